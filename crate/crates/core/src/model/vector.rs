//! Flat views of the trainable parameters.
//!
//! `vectorize` concatenates the trainable tensors of the selected scope, in
//! layer order, into one `w` vector; `devectorize` writes such a vector back.
//! Round trips are bit-exact. The flat form drives the PAC-Bayes
//! perturbations and the `||w||`-style measures.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::{Checkpoint, Scope};

/// A flattened parameter vector plus the index ranges of each source tensor.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub values: Vec<f32>,
    /// (layer index, tensor index within layer, start offset in `values`).
    pub segments: Vec<(usize, usize, usize)>,
}

impl ParamVector {
    /// Total number of weights (the omega of the flatness measures).
    pub fn omega(&self) -> usize {
        self.values.len()
    }
}

impl Checkpoint {
    /// Flatten the trainable parameters of the given scope (None = whole
    /// network) in canonical layer order.
    pub fn vectorize(&self, scope: Option<Scope>) -> ParamVector {
        vectorize_tensors(self, &self.params, scope)
    }

    /// Flatten the initialization snapshot the same way.
    pub fn vectorize_init(&self, scope: Option<Scope>) -> ParamVector {
        vectorize_tensors(self, &self.init_params, scope)
    }

    /// Write a flat vector produced by [`Checkpoint::vectorize`] with the
    /// same scope back into the trainable parameters.
    pub fn devectorize(&mut self, v: &ParamVector) -> Result<()> {
        let expected: usize = v
            .segments
            .iter()
            .map(|&(l, t, _)| self.params[l][t].len())
            .sum();
        if expected != v.values.len() {
            return Err(CoreError::ShapeMismatch {
                op: "devectorize",
                detail: format!("vector length {} != segment total {}", v.values.len(), expected),
            });
        }
        for &(l, t, start) in &v.segments {
            let dst = self.params[l][t].data_mut();
            dst.copy_from_slice(&v.values[start..start + dst.len()]);
        }
        Ok(())
    }
}

fn vectorize_tensors(ckpt: &Checkpoint, tensors: &[Vec<Tensor>], scope: Option<Scope>) -> ParamVector {
    let mut values = Vec::new();
    let mut segments = Vec::new();
    for (l, layer) in ckpt.layers().iter().enumerate() {
        if let Some(s) = scope {
            if layer.scope != s {
                continue;
            }
        }
        for (t, tensor) in tensors[l].iter().enumerate() {
            segments.push((l, t, values.len()));
            values.extend_from_slice(tensor.data());
        }
    }
    ParamVector { values, segments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, param_count, NetworkSpec};
    use crate::rng::SeededRng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = NetworkSpec::vgg_like((16, 16), 2, 4, true, 0.0, true).unwrap();
        let mut ckpt = build(&spec, &mut SeededRng::new(5, 0)).unwrap();
        let before = ckpt.params.clone();
        let mut v = ckpt.vectorize(None);
        // Perturb then restore.
        let orig = v.values.clone();
        for x in v.values.iter_mut() {
            *x += 1.0;
        }
        ckpt.devectorize(&v).unwrap();
        assert_ne!(ckpt.params, before);
        v.values = orig;
        ckpt.devectorize(&v).unwrap();
        assert_eq!(ckpt.params, before);
    }

    #[test]
    fn omega_matches_param_count() {
        let spec = NetworkSpec::vgg_like((16, 16), 2, 4, false, 0.0, false).unwrap();
        let ckpt = build(&spec, &mut SeededRng::new(5, 0)).unwrap();
        assert_eq!(ckpt.vectorize(None).omega(), param_count(&spec).unwrap());
    }

    #[test]
    fn scope_filters_decoder() {
        let spec = NetworkSpec::vgg_like((16, 16), 2, 4, false, 0.0, true).unwrap();
        let ckpt = build(&spec, &mut SeededRng::new(5, 0)).unwrap();
        let all = ckpt.vectorize(None).omega();
        let cls = ckpt.vectorize(Some(Scope::Classifier)).omega();
        let dec = ckpt.vectorize(Some(Scope::Decoder)).omega();
        assert_eq!(all, cls + dec);
        assert!(dec > 0);
    }

    #[test]
    fn empty_vector_for_missing_scope() {
        let spec = NetworkSpec::vgg_like((16, 16), 1, 4, false, 0.0, false).unwrap();
        let ckpt = build(&spec, &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(ckpt.vectorize(Some(Scope::Decoder)).omega(), 0);
    }
}
