//! Deterministic inputs shared by the benchmarks.

use flatnet::Tensor;

/// Values in `[0.1, 1)` from a fixed integer hash, so runs see identical
/// operands without pulling in an RNG.
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n as u64)
        .map(|i| {
            let h = (i ^ (salt << 40)).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
            0.1 + 0.9 * (h as f32 / (1u64 << 24) as f32)
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_and_determinism() {
        let a = filled(&[64, 3], 1);
        let v = a.data::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.1..1.0).contains(x)));
        assert_eq!(v, filled(&[64, 3], 1).data::<f32>().unwrap());
        assert_ne!(v, filled(&[64, 3], 2).data::<f32>().unwrap());
    }
}
