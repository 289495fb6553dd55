use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::registry::{BuildCtx, Registry};
use super::Definition;
use crate::error::{Error, Result};
use crate::layers::{BlobData, Dataset, ForwardCtx, Layer, Param, Phase};
use crate::tensor::{DType, Tensor};

#[derive(Clone)]
pub struct NetOptions {
    pub seed: u64,
    pub dtype: DType,
    /// Directory that `blob_data` file prefixes are resolved against.
    pub data_root: Option<PathBuf>,
    pub registry: Registry,
}

impl Default for NetOptions {
    fn default() -> NetOptions {
        NetOptions { seed: 0, dtype: DType::F32, data_root: None, registry: Registry::default() }
    }
}

impl NetOptions {
    pub fn seed(mut self, seed: u64) -> NetOptions {
        self.seed = seed;
        self
    }

    pub fn dtype(mut self, dtype: DType) -> NetOptions {
        self.dtype = dtype;
        self
    }

    pub fn data_root(mut self, root: impl Into<PathBuf>) -> NetOptions {
        self.data_root = Some(root.into());
        self
    }
}

struct Run {
    phase: Phase,
    executed: Vec<usize>,
}

pub struct Network {
    def: Definition,
    layers: Vec<Box<dyn Layer>>,
    dtype: DType,
    rng: ChaCha8Rng,
    blobs: HashMap<String, Tensor>,
    grads: HashMap<String, Tensor>,
    trace: Option<HashMap<String, Vec<(String, Tensor)>>>,
    run: Option<Run>,
    released: bool,
}

impl Network {
    /// Instantiate every layer in definition order. Parameter initialization
    /// and runtime randomness (dropout) come from separate streams of `seed`.
    pub fn new(def: Definition, opts: &NetOptions) -> Result<Network> {
        let mut init = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(1);
        let mut ctx = BuildCtx { dtype: opts.dtype, rng: &mut init, data_root: opts.data_root.clone() };
        let layers = def.layers().iter().map(|s| opts.registry.build(s, &mut ctx)).collect::<Result<Vec<_>>>()?;
        Ok(Network {
            def,
            layers,
            dtype: opts.dtype,
            rng,
            blobs: HashMap::new(),
            grads: HashMap::new(),
            trace: None,
            run: None,
            released: false,
        })
    }

    pub fn from_json(text: &str, opts: &NetOptions) -> Result<Network> {
        Network::new(Definition::parse(text)?, opts)
    }

    pub fn definition(&self) -> &Definition {
        &self.def
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Run the layers of `phase` in topological order.
    ///
    /// A layer is skipped when any of its outputs is fed; layers that depend
    /// on a skipped layer's other outputs are skipped too. Any other missing
    /// input is a missing feed.
    pub fn forward<S, I>(&mut self, feeds: I, phase: Phase) -> Result<()>
    where
        S: Into<String>,
        I: IntoIterator<Item = (S, Tensor)>,
    {
        self.clear();
        self.released = false;
        let mut fed = HashSet::new();
        for (name, t) in feeds {
            let name = name.into();
            t.check()?;
            fed.insert(name.clone());
            self.blobs.insert(name, t);
        }
        let mut unavailable: HashSet<&str> = HashSet::new();
        let mut executed = Vec::new();
        let mut ctx = ForwardCtx { phase, rng: &mut self.rng };
        'layers: for &i in self.def.order(phase) {
            let spec = &self.def.layers()[i];
            if spec.outputs.iter().any(|o| fed.contains(o)) {
                unavailable.extend(spec.outputs.iter().filter(|o| !fed.contains(*o)).map(String::as_str));
                continue;
            }
            let mut inputs = Vec::with_capacity(spec.inputs.len());
            for name in &spec.inputs {
                match self.blobs.get(name) {
                    Some(t) => inputs.push(t),
                    None if unavailable.contains(name.as_str()) => {
                        unavailable.extend(spec.outputs.iter().map(String::as_str));
                        continue 'layers;
                    }
                    None => return Err(Error::MissingFeed(name.clone())),
                }
            }
            let outputs = self.layers[i].forward(&inputs, &mut ctx).map_err(|e| e.in_layer(&spec.name))?;
            if outputs.len() != spec.outputs.len() {
                return Err(Error::Definition(format!(
                    "layer `{}` produced {} outputs, definition names {}",
                    spec.name,
                    outputs.len(),
                    spec.outputs.len()
                )));
            }
            for (name, t) in spec.outputs.iter().zip(outputs) {
                self.blobs.insert(name.clone(), t);
            }
            executed.push(i);
        }
        self.run = Some(Run { phase, executed });
        Ok(())
    }

    /// Reverse sweep over the last forward pass. Loss outputs are seeded with
    /// 1, and a blob consumed by several layers receives the sum of their
    /// gradients. Parameter gradients are overwritten.
    pub fn backward(&mut self) -> Result<()> {
        let run = self.run.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let executed = run.executed.clone();
        let layers = self.def.layers();

        // blobs whose gradient some parameter depends on
        let mut requires: HashSet<&str> = HashSet::new();
        for &i in &executed {
            let learnable = self.layers[i].params().iter().any(|p| p.learnable);
            if learnable || layers[i].inputs.iter().any(|b| requires.contains(b.as_str())) {
                requires.extend(layers[i].outputs.iter().map(String::as_str));
            }
        }

        self.grads.clear();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        for &i in &executed {
            if self.layers[i].is_loss() {
                for o in &layers[i].outputs {
                    let b = &self.blobs[o];
                    self.grads.insert(o.clone(), Tensor::ones(b.shape(), b.dtype())?);
                }
            }
        }

        for &i in executed.iter().rev() {
            let spec = &layers[i];
            let need: Vec<bool> = spec.inputs.iter().map(|b| requires.contains(b.as_str())).collect();
            let layer = &mut self.layers[i];
            let has_learnable = layer.params().iter().any(|p| p.learnable);
            if !has_learnable && !need.iter().any(|&n| n) {
                continue;
            }
            let top: Vec<Option<&Tensor>> = spec.outputs.iter().map(|o| self.grads.get(o)).collect();
            if top.iter().all(Option::is_none) {
                for p in layer.params_mut().iter_mut().filter(|p| p.learnable) {
                    p.grad = Tensor::zeros(p.value.shape(), p.value.dtype())?;
                }
                continue;
            }
            let inputs: Vec<&Tensor> = spec.inputs.iter().map(|b| &self.blobs[b]).collect();
            let outputs: Vec<&Tensor> = spec.outputs.iter().map(|b| &self.blobs[b]).collect();
            let dx = layer.backward(&inputs, &outputs, &top, &need).map_err(|e| e.in_layer(&spec.name))?;
            for ((name, g), needed) in spec.inputs.iter().zip(dx).zip(&need) {
                let (Some(g), true) = (g, *needed) else { continue };
                if !crate::tensor::same_shape(g.shape(), self.blobs[name].shape()) {
                    return Err(Error::shape(format!(
                        "layer `{}` returned gradient {:?} for blob `{name}` of shape {:?}",
                        spec.name,
                        g.shape(),
                        self.blobs[name].shape()
                    ))
                    .in_layer(&spec.name));
                }
                if let Some(t) = self.trace.as_mut() {
                    t.entry(name.clone()).or_default().push((spec.name.clone(), g.clone()));
                }
                let summed = match self.grads.remove(name) {
                    Some(acc) => acc.plus(&g)?,
                    None => g,
                };
                self.grads.insert(name.clone(), summed);
            }
        }
        Ok(())
    }

    /// Record every consumer's contribution to each blob gradient.
    pub fn trace_gradients(&mut self, on: bool) {
        self.trace = on.then(HashMap::new);
    }

    /// Per-consumer gradients for `blob` from the last backward, when traced.
    pub fn gradient_contributions(&self, blob: &str) -> &[(String, Tensor)] {
        self.trace.as_ref().and_then(|t| t.get(blob)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn blob(&self, name: &str) -> Result<&Tensor> {
        if self.released {
            return Err(Error::Released);
        }
        self.blobs.get(name).ok_or_else(|| Error::NoSuchBlob(name.to_string()))
    }

    pub fn has_blob(&self, name: &str) -> bool {
        !self.released && self.blobs.contains_key(name)
    }

    /// Accumulated gradient of `name` from the last backward.
    pub fn blob_grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Sum of the loss layers' outputs from the last forward.
    pub fn loss(&self) -> Result<f64> {
        let run = self.run.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let mut total = 0.0;
        for &i in run.executed.iter().filter(|&&i| self.layers[i].is_loss()) {
            total += self.blob(&self.def.layers()[i].outputs[0])?.sum_all()?;
        }
        Ok(total)
    }

    pub fn last_phase(&self) -> Option<Phase> {
        self.run.as_ref().map(|r| r.phase)
    }

    /// Names of the layers run by the last forward, in order.
    pub fn executed(&self) -> Vec<&str> {
        let run = self.run.as_ref().map(|r| r.executed.as_slice()).unwrap_or(&[]);
        run.iter().map(|&i| self.def.layers()[i].name.as_str()).collect()
    }

    /// Invalidate blobs and cached layer state. Parameters are kept.
    pub fn release(&mut self) {
        self.clear();
        self.released = true;
    }

    fn clear(&mut self) {
        for (_, mut t) in self.blobs.drain() {
            t.release();
        }
        self.grads.clear();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        for l in &mut self.layers {
            l.release();
        }
        self.run = None;
    }

    /// Every parameter, qualified as `layer.param`, in definition order.
    pub fn params(&self) -> impl Iterator<Item = (String, &Param)> {
        self.def
            .layers()
            .iter()
            .zip(&self.layers)
            .flat_map(|(s, l)| l.params().iter().map(move |p| (format!("{}.{}", s.name, p.name), p)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Param)> {
        self.def
            .layers()
            .iter()
            .zip(self.layers.iter_mut())
            .flat_map(|(s, l)| l.params_mut().iter_mut().map(move |p| (format!("{}.{}", s.name, p.name), p)))
    }

    pub fn param(&self, qualified: &str) -> Option<&Param> {
        self.params().find(|(n, _)| n == qualified).map(|(_, p)| p)
    }

    pub fn learnable(&self) -> impl Iterator<Item = &Param> {
        self.params().map(|(_, p)| p).filter(|p| p.learnable)
    }

    pub fn learnable_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params_mut().map(|(_, p)| p).filter(|p| p.learnable)
    }

    pub fn gradients(&self) -> Vec<&Tensor> {
        self.learnable().map(|p| &p.grad).collect()
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable().map(|p| p.value.numel()).sum()
    }

    fn data_layers(&mut self, phase: Phase) -> Vec<&mut BlobData> {
        let active: Vec<bool> = self.def.layers().iter().map(|s| s.active_in(phase)).collect();
        self.layers
            .iter_mut()
            .zip(active)
            .filter(|(_, a)| *a)
            .filter_map(|(l, _)| l.as_data_layer())
            .collect()
    }

    /// Serve `phase`'s data layers from `dataset` instead of their files.
    pub fn attach_dataset(&mut self, phase: Phase, dataset: Arc<Dataset>) -> Result<()> {
        let layers = self.data_layers(phase);
        if layers.is_empty() {
            return Err(Error::Definition(format!("no blob_data layer in {phase:?} phase")));
        }
        for l in layers {
            l.attach(dataset.clone());
        }
        Ok(())
    }

    /// The dataset behind `phase`'s first data layer, loading it if needed.
    pub fn dataset(&mut self, phase: Phase) -> Result<Arc<Dataset>> {
        match self.data_layers(phase).into_iter().next() {
            Some(l) => l.dataset(),
            None => Err(Error::Definition(format!("no blob_data layer in {phase:?} phase"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures;

    fn lenet() -> Network {
        let mut net = Network::from_json(fixtures::LENET, &NetOptions::default()).unwrap();
        let data = Tensor::from_vec(&[28, 28, 1, 4], (0..4 * 784).map(|i| (i % 256) as u8).collect()).unwrap();
        let label = Tensor::from_vec(&[1, 4], vec![0i32, 1, 2, 3]).unwrap();
        let ds = Arc::new(Dataset::new(data, label).unwrap());
        net.attach_dataset(Phase::Train, ds.clone()).unwrap();
        net.attach_dataset(Phase::Test, ds).unwrap();
        net
    }

    fn batch(n: usize) -> Tensor {
        crate::layers::data::batch_tensor(&(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_image_inference() {
        let mut net = lenet();
        let img = Tensor::zeros(&[28, 28, 1], DType::F32).unwrap();
        net.forward([("data", img)], Phase::Test).unwrap();
        assert_eq!(net.blob("pred").unwrap().shape(), &[10, 1]);
        assert!(!net.has_blob("loss"));
        assert_eq!(net.executed(), ["conv1", "pool1", "relu3", "fc3"]);
    }

    #[test]
    fn train_phase_has_no_accuracy() {
        let mut net = lenet();
        net.forward([("batch", batch(4))], Phase::Train).unwrap();
        assert!(matches!(net.blob("accuracy"), Err(Error::NoSuchBlob(_))));
        net.forward([("batch", batch(4))], Phase::Test).unwrap();
        assert!(net.blob("accuracy").is_ok());
    }

    #[test]
    fn empty_feeds() {
        let mut net = lenet();
        let e = net.forward(Vec::<(String, Tensor)>::new(), Phase::Train).unwrap_err();
        assert!(matches!(e, Error::MissingFeed(ref b) if b == "batch"), "{e}");
    }

    #[test]
    fn backward_fills_gradients() {
        let mut net = lenet();
        assert!(matches!(net.backward(), Err(Error::BackwardWithoutForward)));
        net.forward([("batch", batch(4))], Phase::Train).unwrap();
        net.backward().unwrap();
        let names: Vec<String> = net.params().map(|(n, _)| n).collect();
        assert_eq!(names, ["conv1.W", "conv1.b", "fc3.W", "fc3.b"]);
        assert!(net.gradients().iter().all(|g| g.sum_all().unwrap().is_finite()));
        assert!(net.param("fc3.W").unwrap().grad.to_f64_vec().unwrap().iter().any(|&v| v != 0.0));
        // the first layer's input gradient is never formed
        assert!(net.blob_grad("data").is_none());
    }

    #[test]
    fn release_semantics() {
        let mut net = lenet();
        net.forward([("batch", batch(2))], Phase::Train).unwrap();
        net.release();
        net.release();
        assert!(matches!(net.blob("pred"), Err(Error::Released)));
        assert!(matches!(net.backward(), Err(Error::BackwardWithoutForward)));
        net.forward([("batch", batch(2))], Phase::Train).unwrap();
        assert_eq!(net.blob("pred").unwrap().shape(), &[10, 2]);
    }

    #[test]
    fn layer_errors_name_the_layer() {
        let mut net = lenet();
        let bad = Tensor::zeros(&[28, 28, 3, 1], DType::F32).unwrap();
        let e = net.forward([("data", bad)], Phase::Test).unwrap_err();
        assert!(matches!(e, Error::Layer { ref layer, .. } if layer == "conv1"), "{e}");
    }
}
