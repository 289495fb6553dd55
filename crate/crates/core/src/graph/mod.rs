//! Network definitions, the static DAG they describe, and its execution.

mod network;
pub mod fixtures;
pub mod params;
pub mod registry;

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Phase;

pub use network::{NetOptions, Network};
pub use registry::{BuildCtx, Registry};

pub const PHASES: [Phase; 2] = [Phase::Train, Phase::Test];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub name: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default = "empty_params")]
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Vec<Phase>>,
}

fn empty_params() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

impl LayerSpec {
    pub fn active_in(&self, phase: Phase) -> bool {
        self.phase.as_ref().is_none_or(|p| p.contains(&phase))
    }
}

/// A validated layer list with a topological order for each phase.
#[derive(Clone, Debug)]
pub struct Definition {
    layers: Vec<LayerSpec>,
    train_order: Vec<usize>,
    test_order: Vec<usize>,
    externals: BTreeSet<String>,
}

impl Definition {
    pub fn parse(text: &str) -> Result<Definition> {
        Definition::new(serde_json::from_str(text)?)
    }

    pub fn new(layers: Vec<LayerSpec>) -> Result<Definition> {
        if layers.is_empty() {
            return Err(Error::Definition("no layers".into()));
        }
        let mut names = HashSet::new();
        for l in &layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Definition(format!("duplicate layer name `{}`", l.name)));
            }
            if l.outputs.is_empty() {
                return Err(Error::Definition(format!("layer `{}` has no outputs", l.name)));
            }
            if l.phase.as_ref().is_some_and(|p| p.is_empty()) {
                return Err(Error::Definition(format!("layer `{}` has an empty phase list", l.name)));
            }
        }
        let produced: HashSet<&str> = layers.iter().flat_map(|l| l.outputs.iter().map(String::as_str)).collect();
        let externals: BTreeSet<String> =
            layers.iter().flat_map(|l| l.inputs.iter()).filter(|b| !produced.contains(b.as_str())).cloned().collect();
        let train_order = topo_order(&layers, Phase::Train, &externals)?;
        let test_order = topo_order(&layers, Phase::Test, &externals)?;
        Ok(Definition { layers, train_order, test_order, externals })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn order(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train_order,
            Phase::Test => &self.test_order,
        }
    }

    /// Layer names in execution order for `phase`.
    pub fn order_names(&self, phase: Phase) -> Vec<&str> {
        self.order(phase).iter().map(|&i| self.layers[i].name.as_str()).collect()
    }

    /// Blobs consumed but produced by no layer: they must be fed.
    pub fn externals(&self) -> &BTreeSet<String> {
        &self.externals
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.layers)?)
    }
}

/// Kahn's algorithm over the layers active in `phase`; ties resolve in
/// definition order.
fn topo_order(layers: &[LayerSpec], phase: Phase, externals: &BTreeSet<String>) -> Result<Vec<usize>> {
    let active: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].active_in(phase)).collect();
    let mut producer: HashMap<&str, usize> = HashMap::new();
    for &i in &active {
        for o in &layers[i].outputs {
            if let Some(prev) = producer.insert(o.as_str(), i) {
                return Err(Error::Definition(format!(
                    "blob `{o}` produced by both `{}` and `{}` in {phase:?} phase",
                    layers[prev].name, layers[i].name
                )));
            }
        }
    }
    let mut indegree: HashMap<usize, usize> = active.iter().map(|&i| (i, 0)).collect();
    let mut consumers: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in &active {
        for inp in &layers[i].inputs {
            match producer.get(inp.as_str()) {
                Some(&p) => {
                    *indegree.get_mut(&i).unwrap() += 1;
                    consumers.entry(p).or_default().push(i);
                }
                None if externals.contains(inp) => {}
                None => {
                    return Err(Error::Definition(format!(
                        "layer `{}` input `{inp}` has no producer in {phase:?} phase",
                        layers[i].name
                    )))
                }
            }
        }
    }
    let mut ready: BTreeSet<usize> = active.iter().copied().filter(|i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(active.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in consumers.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(&c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != active.len() {
        let stuck: Vec<&str> =
            active.iter().filter(|i| !order.contains(i)).map(|&i| layers[i].name.as_str()).collect();
        return Err(Error::Definition(format!("cycle through layers {stuck:?}")));
    }
    Ok(order)
}
