//! Max and average pooling over `[h, w, c, n]` blobs.

use serde::Deserialize;

use super::im2col::Window;
use super::{dims4, expect_inputs, with_real, ForwardCtx, Layer};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    #[serde(alias = "average")]
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
pub struct PoolConfig {
    #[serde(rename = "type")]
    pub kind: PoolKind,
    pub ksize: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

fn one() -> usize {
    1
}

impl PoolConfig {
    fn window(&self) -> Window {
        Window { ksize: self.ksize, stride: self.stride, pad: self.pad }
    }
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Switches {
    pub cfg: PoolConfig,
    pub input: [usize; 4],
    pub output: [usize; 4],
    /// Max pooling: flat input offset of each window's maximum.
    pub argmax: Vec<usize>,
}

/// Visit every output window, handing `f` the output offset and the in-bounds
/// input offsets (column-major within the window).
fn for_each_window(input: [usize; 4], out_h: usize, out_w: usize, win: Window, mut f: impl FnMut(usize, &[usize])) {
    let [h, w, c, n] = input;
    let mut taps = Vec::with_capacity(win.ksize * win.ksize);
    let mut o = 0;
    for plane in 0..c * n {
        let base = plane * h * w;
        for ox in 0..out_w {
            for oy in 0..out_h {
                taps.clear();
                for kx in 0..win.ksize {
                    let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for ky in 0..win.ksize {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        taps.push(base + iy as usize + h * ix as usize);
                    }
                }
                f(o, &taps);
                o += 1;
            }
        }
    }
}

fn forward_raw<T: Real>(x: &[T], input: [usize; 4], out_h: usize, out_w: usize, cfg: &PoolConfig) -> Result<(Vec<T>, Vec<usize>)> {
    let [_, _, c, n] = input;
    let mut y = vec![T::zero(); out_h * out_w * c * n];
    let mut argmax = Vec::new();
    let mut empty = false;
    match cfg.kind {
        PoolKind::Max => {
            argmax.reserve(y.len());
            for_each_window(input, out_h, out_w, cfg.window(), |o, taps| {
                let Some(&first) = taps.first() else {
                    empty = true;
                    argmax.push(usize::MAX);
                    return;
                };
                let best = taps.iter().copied().fold(first, |b, t| if x[t] > x[b] { t } else { b });
                y[o] = x[best];
                argmax.push(best);
            });
        }
        PoolKind::Avg => {
            for_each_window(input, out_h, out_w, cfg.window(), |o, taps| {
                if taps.is_empty() {
                    empty = true;
                    return;
                }
                let s: T = taps.iter().map(|&t| x[t]).sum();
                y[o] = s / T::lit(taps.len() as f64);
            });
        }
    }
    if empty {
        return Err(Error::InvalidArgument(format!("pooling window lies entirely in padding: {cfg:?}")));
    }
    Ok((y, argmax))
}

pub fn pooling_forward(x: &Tensor, cfg: &PoolConfig) -> Result<(Tensor, Switches)> {
    let input = dims4(x);
    let win = cfg.window();
    let (out_h, out_w) = (win.out_extent(input[0])?, win.out_extent(input[1])?);
    let output = [out_h, out_w, input[2], input[3]];
    with_real!(x.dtype(), "pooling_2d", T => {
        let (y, argmax) = forward_raw::<T>(x.data()?, input, out_h, out_w, cfg)?;
        Ok((Tensor::from_vec(&output, y)?, Switches { cfg: *cfg, input, output, argmax }))
    })
}

pub fn pooling_backward(sw: &Switches, dy: &Tensor) -> Result<Tensor> {
    if dims4(dy) != sw.output {
        return Err(Error::shape(format!("pooling output gradient {:?}, expected {:?}", dy.shape(), sw.output)));
    }
    let [h, w, c, n] = sw.input;
    with_real!(dy.dtype(), "pooling_2d", T => {
        let g = dy.data::<T>()?;
        let mut dx = vec![T::zero(); h * w * c * n];
        match sw.cfg.kind {
            PoolKind::Max => {
                for (&src, &gv) in sw.argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            }
            PoolKind::Avg => {
                for_each_window(sw.input, sw.output[0], sw.output[1], sw.cfg.window(), |o, taps| {
                    let share = g[o] / T::lit(taps.len() as f64);
                    for &t in taps {
                        dx[t] += share;
                    }
                });
            }
        }
        Tensor::from_vec(&sw.input, dx)
    })
}

pub struct Pooling2d {
    cfg: PoolConfig,
    switches: Option<Switches>,
}

impl Pooling2d {
    pub fn new(cfg: PoolConfig) -> Result<Pooling2d> {
        cfg.window().out_extent(cfg.ksize)?;
        if cfg.pad >= cfg.ksize {
            return Err(Error::InvalidArgument(format!("pooling pad must be smaller than ksize: {cfg:?}")));
        }
        Ok(Pooling2d { cfg, switches: None })
    }
}

impl Layer for Pooling2d {
    fn kind(&self) -> &'static str {
        "pooling_2d"
    }

    fn forward(&mut self, inputs: &[&Tensor], _ctx: &mut ForwardCtx<'_>) -> Result<Vec<Tensor>> {
        expect_inputs(inputs, 1)?;
        let (y, sw) = pooling_forward(inputs[0], &self.cfg)?;
        self.switches = Some(sw);
        Ok(vec![y])
    }

    fn backward(
        &mut self,
        _inputs: &[&Tensor],
        _outputs: &[&Tensor],
        top: &[Option<&Tensor>],
        need: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (Some(dy), true) = (top[0], need[0]) else { return Ok(vec![None]) };
        let sw = self.switches.as_ref().ok_or(Error::BackwardWithoutForward)?;
        Ok(vec![Some(pooling_backward(sw, dy)?)])
    }

    fn release(&mut self) {
        self.switches = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn cfg(kind: PoolKind, k: usize, s: usize) -> PoolConfig {
        PoolConfig { kind, ksize: k, stride: s, pad: 0 }
    }

    // [[1,2],[3,4]] as a 2x2x1x1 blob
    fn window() -> Tensor {
        Tensor::from_vec(&[2, 2, 1, 1], vec![1.0f64, 3.0, 2.0, 4.0]).unwrap()
    }

    #[test]
    fn max_and_switch() {
        let (y, sw) = pooling_forward(&window(), &cfg(PoolKind::Max, 2, 2)).unwrap();
        assert_eq!(y.data::<f64>().unwrap(), &[4.0]);
        // (2,2) in 1-origin coordinates is flat offset 3
        assert_eq!(sw.argmax, vec![3]);
        let dx = pooling_backward(&sw, &Tensor::ones(&[1, 1, 1, 1], DType::F64).unwrap()).unwrap();
        assert_eq!(dx.data::<f64>().unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn average() {
        let (y, sw) = pooling_forward(&window(), &cfg(PoolKind::Avg, 2, 2)).unwrap();
        assert_eq!(y.data::<f64>().unwrap(), &[2.5]);
        let dx = pooling_backward(&sw, &Tensor::ones(&[1, 1, 1, 1], DType::F64).unwrap()).unwrap();
        assert_eq!(dx.data::<f64>().unwrap(), &[0.25; 4]);
    }

    #[test]
    fn avg_excludes_padding() {
        let x = Tensor::ones(&[2, 2, 1, 1], DType::F64).unwrap();
        let c = PoolConfig { kind: PoolKind::Avg, ksize: 3, stride: 1, pad: 1 };
        let (y, _) = pooling_forward(&x, &c).unwrap();
        assert!(y.data::<f64>().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn lenet_pool_shape() {
        let x = Tensor::zeros(&[24, 24, 20, 3], DType::F32).unwrap();
        let (y, _) = pooling_forward(&x, &cfg(PoolKind::Max, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[12, 12, 20, 3]);
    }

    #[test]
    fn non_overlapping_conserves_gradient() {
        let x = Tensor::from_vec(&[6, 4, 2, 2], (0..96).map(|i| ((i * 37) % 17) as f64 + i as f64 * 1e-3).collect()).unwrap();
        let (_, sw) = pooling_forward(&x, &cfg(PoolKind::Max, 2, 2)).unwrap();
        let dy = Tensor::from_vec(&[3, 2, 2, 2], (0..24).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
        let dx = pooling_backward(&sw, &dy).unwrap();
        assert_eq!(dx.sum_all().unwrap(), dy.sum_all().unwrap());
    }

    #[test]
    fn pad_must_be_below_ksize() {
        assert!(Pooling2d::new(PoolConfig { kind: PoolKind::Max, ksize: 2, stride: 2, pad: 2 }).is_err());
    }
}
