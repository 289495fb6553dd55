use super::{for_storage, numel_of, Element, Storage, Tensor};
use crate::error::{Error, Result};

/// One index specification, 1-origin like MATLAB.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Idx {
    At(usize),
    /// Inclusive range `start..=end`.
    Range(usize, usize),
    /// `:`
    All,
}

impl From<usize> for Idx {
    fn from(i: usize) -> Idx {
        Idx::At(i)
    }
}

/// Index specs resolved to 0-origin positions over an effective shape.
struct Selection {
    positions: Vec<Vec<usize>>,
    strides: Vec<usize>,
}

impl Selection {
    fn resolve(shape: &[usize], idx: &[Idx]) -> Result<Selection> {
        if idx.is_empty() {
            return Err(Error::InvalidIndex("no index given".into()));
        }
        let k = idx.len();
        let eff: Vec<usize> = if k == 1 {
            vec![numel_of(shape)]
        } else if k >= shape.len() {
            (0..k).map(|d| shape.get(d).copied().unwrap_or(1)).collect()
        } else {
            let mut e = shape[..k - 1].to_vec();
            e.push(numel_of(&shape[k - 1..]));
            e
        };
        let mut strides = Vec::with_capacity(k);
        let mut s = 1;
        for &e in &eff {
            strides.push(s);
            s *= e;
        }
        let positions = idx
            .iter()
            .zip(&eff)
            .enumerate()
            .map(|(d, (spec, &extent))| {
                let check = |i: usize| {
                    if i == 0 || i > extent {
                        Err(Error::IndexOutOfRange { dim: d + 1, index: i, extent })
                    } else {
                        Ok(i - 1)
                    }
                };
                match *spec {
                    Idx::At(i) => Ok(vec![check(i)?]),
                    Idx::Range(a, b) => {
                        if a > b {
                            return Err(Error::InvalidIndex(format!("empty range {a}..{b}")));
                        }
                        check(a)?;
                        check(b)?;
                        Ok((a - 1..b).collect())
                    }
                    Idx::All => Ok((0..extent).collect()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Selection { positions, strides })
    }

    fn out_shape(&self, single: bool) -> Vec<usize> {
        if single {
            vec![self.positions[0].len(), 1]
        } else {
            self.positions.iter().map(Vec::len).collect()
        }
    }

    fn count(&self) -> usize {
        self.positions.iter().map(Vec::len).product()
    }

    /// Source offsets in column-major order of the selection.
    fn offsets(&self) -> Vec<usize> {
        let k = self.positions.len();
        let total = self.count();
        let mut out = Vec::with_capacity(total);
        let mut counter = vec![0usize; k];
        for _ in 0..total {
            out.push((0..k).map(|d| self.positions[d][counter[d]] * self.strides[d]).sum());
            for d in 0..k {
                counter[d] += 1;
                if counter[d] < self.positions[d].len() {
                    break;
                }
                counter[d] = 0;
            }
        }
        out
    }
}

fn gather<T: Copy>(src: &[T], offsets: &[usize]) -> Vec<T> {
    offsets.iter().map(|&o| src[o]).collect()
}

impl Tensor {
    /// Copy out the selected sub-tensor, keeping one dimension per index spec.
    /// A single spec indexes the buffer linearly.
    pub fn get(&self, idx: &[Idx]) -> Result<Tensor> {
        self.check()?;
        let sel = Selection::resolve(&self.shape, idx)?;
        let offsets = sel.offsets();
        let data = match &self.data {
            Storage::F32(v) => Storage::F32(gather(v, &offsets)),
            Storage::F64(v) => Storage::F64(gather(v, &offsets)),
            Storage::I32(v) => Storage::I32(gather(v, &offsets)),
            Storage::U8(v) => Storage::U8(gather(v, &offsets)),
            Storage::Logical(v) => Storage::Logical(gather(v, &offsets)),
        };
        Tensor::from_storage(sel.out_shape(idx.len() == 1), data)
    }

    /// Scalar element at 1-origin coordinates.
    pub fn at(&self, coords: &[usize]) -> Result<f64> {
        self.check()?;
        let idx: Vec<Idx> = coords.iter().map(|&i| Idx::At(i)).collect();
        let sel = Selection::resolve(&self.shape, &idx)?;
        Ok(self.data.get_f64(sel.offsets()[0]))
    }

    /// Write `value` into the selection; a one-element value broadcasts.
    pub fn set(&mut self, idx: &[Idx], value: &Tensor) -> Result<()> {
        self.check()?;
        value.check()?;
        let sel = Selection::resolve(&self.shape, idx)?;
        let offsets = sel.offsets();
        if value.numel() != 1 {
            let squeeze = |s: &[usize]| s.iter().copied().filter(|&e| e != 1).collect::<Vec<_>>();
            if value.numel() != offsets.len() || squeeze(value.shape()) != squeeze(&sel.out_shape(idx.len() == 1)) {
                return Err(Error::shape(format!(
                    "cannot assign value of shape {:?} to selection of shape {:?}",
                    value.shape(),
                    sel.out_shape(idx.len() == 1)
                )));
            }
        }
        let src = &value.data;
        let pick = |i: usize| if src.len() == 1 { src.get_f64(0) } else { src.get_f64(i) };
        for_storage!(&mut self.data, v => {
            for (i, &o) in offsets.iter().enumerate() {
                v[o] = Element::from_f64(pick(i));
            }
        });
        if let Storage::Logical(v) = &mut self.data {
            v.iter_mut().for_each(|b| *b = u8::from(*b != 0));
        }
        Ok(())
    }

    pub fn set_scalar(&mut self, idx: &[Idx], value: f64) -> Result<()> {
        let v = Tensor::scalar(value, self.dtype());
        self.set(idx, &v)
    }
}
