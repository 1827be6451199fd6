//! Named parameter collections shared by the base model, the speculator and
//! the optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// A fixed, ordered set of named tensors. `named` and `tensors_mut` must
/// yield tensors in the same order.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std is positive and finite");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Zeroes every tensor in place.
pub fn zero_all<P: ParamSet>(p: &mut P) {
    for t in p.tensors_mut() {
        t.fill(0.0);
    }
}
