//! Adam with global-norm gradient clipping, plus seeded mini-batching.

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::invalid("max_norm must be positive"));
    }
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
    Ok(norm)
}

/// Adam with bias correction. Moment tensors are keyed by parameter name
/// and iterated in the store's fixed (sorted) order, so updates are
/// deterministic for a given gradient stream.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(
        &mut self,
        t: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update. Errors (without touching parameters or moments) if any
    /// gradient is non-finite, naming the offending parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: "adam gradient".into(),
                    name: name.clone(),
                });
            }
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = T::from_f64(self.lr / bc1);
        let bc2_sqrt_inv = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing gradient for parameter {}", name)))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                *pv = *pv - lr * *mv / ((*vv).sqrt() * bc2_sqrt_inv + eps);
            }
        }
        Ok(())
    }
}

/// Shuffles sentence pairs with the given RNG, drops pairs whose source
/// or target exceeds `max_len` (returning how many), and pads each batch
/// independently. Every kept pair lands in exactly one batch.
pub fn make_batches(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TokenBatch>, usize)> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut kept: Vec<&(Vec<usize>, Vec<usize>)> = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for p in pairs {
        // target length counts content tokens; BOS/EOS are added here
        if p.0.len() > max_len || p.1.len() > max_len {
            skipped += 1;
        } else {
            kept.push(p);
        }
    }
    kept.shuffle(rng);
    let mut batches = Vec::with_capacity(kept.len().div_ceil(batch_size));
    for chunk in kept.chunks(batch_size) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<usize>> = chunk
            .iter()
            .map(|p| {
                let mut row = Vec::with_capacity(p.1.len() + 2);
                row.push(crate::data::BOS);
                row.extend_from_slice(&p.1);
                row.push(crate::data::EOS);
                row
            })
            .collect();
        batches.push(TokenBatch::new(&src, &tgt)?);
    }
    Ok((batches, skipped))
}
