//! Parameterized building blocks shared by all three models: linear
//! maps, LSTM cells, sequence encoders, additive attention, Gaussian
//! parameter heads and dropout.
//!
//! Layers own no tensors. They hold fully-qualified parameter names and
//! dimensions; the values live in a [`ParamStore`] that is handed to a
//! [`Tape`] as leaf bindings for each forward pass.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Added to every softplus-produced standard deviation so KL terms and
/// log-densities stay finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Named parameter tensors, ordered by fully-qualified name.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::shape(
                        "param_set",
                        format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
                    ));
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::UnboundLeaf(name.to_string())),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Leaf bindings for a fresh tape.
    pub fn bindings(&self) -> BTreeMap<String, Tensor<T>> {
        self.map.clone()
    }

    pub fn to_f64(&self) -> BTreeMap<String, Tensor<f64>> {
        self.map
            .iter()
            .map(|(k, v)| {
                let data: Vec<f64> = v.data().iter().map(|&x| x.to_f64()).collect();
                (k.clone(), Tensor::new(v.shape().to_vec(), data).unwrap())
            })
            .collect()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn glorot_uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Hidden/cell pair of an LSTM.
#[derive(Clone, Copy)]
pub struct RnnState<'t, T: Scalar> {
    pub hidden: Var<'t, T>,
    pub cell: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(format!("{}.w", self.name), glorot_uniform(rng, self.in_dim, self.out_dim));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<'t, T: Scalar>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = tape.leaf(&format!("{}.w", self.name))?;
        let b = tape.leaf(&format!("{}.b", self.name))?;
        x.matmul(w)?.add(b)
    }
}

/// Standard LSTM cell: sigmoid input/forget/output gates, tanh
/// candidate, no peepholes. Gate layout in the fused weight matrices is
/// `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub name: String,
    pub in_dim: usize,
    pub units: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, in_dim: usize, units: usize) -> Self {
        LstmCell {
            name: name.into(),
            in_dim,
            units,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.wx", self.name),
            glorot_uniform(rng, self.in_dim, 4 * self.units),
        );
        store.insert(
            format!("{}.wh", self.name),
            glorot_uniform(rng, self.units, 4 * self.units),
        );
        // forget-gate bias starts at +1
        let mut bias = Tensor::zeros(&[4 * self.units]);
        for v in &mut bias.data_mut()[self.units..2 * self.units] {
            *v = T::one();
        }
        store.insert(format!("{}.b", self.name), bias);
    }

    pub fn zero_state<'t, T: Scalar>(&self, tape: &'t Tape<T>, batch: usize) -> RnnState<'t, T> {
        RnnState {
            hidden: tape.constant(Tensor::zeros(&[batch, self.units])),
            cell: tape.constant(Tensor::zeros(&[batch, self.units])),
        }
    }

    pub fn step<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        state: RnnState<'t, T>,
    ) -> Result<RnnState<'t, T>> {
        let wx = tape.leaf(&format!("{}.wx", self.name))?;
        let wh = tape.leaf(&format!("{}.wh", self.name))?;
        let b = tape.leaf(&format!("{}.b", self.name))?;
        let u = self.units;
        let gates = x.matmul(wx)?.add(state.hidden.matmul(wh)?)?.add(b)?;
        let i = gates.slice_cols(0, u)?.sigmoid();
        let f = gates.slice_cols(u, 2 * u)?.sigmoid();
        let g = gates.slice_cols(2 * u, 3 * u)?.tanh();
        let o = gates.slice_cols(3 * u, 4 * u)?.sigmoid();
        let cell = f.mul(state.cell)?.add(i.mul(g)?)?;
        let hidden = o.mul(cell.tanh())?;
        Ok(RnnState { hidden, cell })
    }
}

/// Mask-aware LSTM sweep. `mask_cols[t]` is `[batch, 1]` with 1 at valid
/// positions. The returned per-step states are zeroed at padding; the
/// final state is the state after the last valid token of each row.
fn masked_sweep<'t, T: Scalar>(
    cell: &LstmCell,
    tape: &'t Tape<T>,
    inputs: &[Var<'t, T>],
    mask_cols: &[Var<'t, T>],
    reverse: bool,
) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("zero-length sequence"));
    }
    let batch = inputs[0].shape()[0];
    let mut state = cell.zero_state(tape, batch);
    let mut outputs: Vec<Option<Var<'t, T>>> = vec![None; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for &t in &order {
        let mask = mask_cols[t];
        let keep = mask.scale(-T::one()).add_scalar(T::one()); // 1 - mask
        let new = cell.step(tape, inputs[t], state)?;
        let hidden = mask.mul(new.hidden)?.add(keep.mul(state.hidden)?)?;
        let cell_v = mask.mul(new.cell)?.add(keep.mul(state.cell)?)?;
        state = RnnState { hidden, cell: cell_v };
        outputs[t] = Some(mask.mul(state.hidden)?);
    }
    Ok((outputs.into_iter().map(|o| o.unwrap()).collect(), state.hidden))
}

/// Bidirectional encoder: per-position concatenation of forward and
/// backward hidden states (zero beyond the sequence length), plus the
/// composite final state (forward final ++ backward final).
pub fn encode_bidirectional<'t, T: Scalar>(
    fwd: &LstmCell,
    bwd: &LstmCell,
    tape: &'t Tape<T>,
    embedded: &[Var<'t, T>],
    mask_cols: &[Var<'t, T>],
) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
    let (fwd_states, fwd_final) = masked_sweep(fwd, tape, embedded, mask_cols, false)?;
    let (bwd_states, bwd_final) = masked_sweep(bwd, tape, embedded, mask_cols, true)?;
    let states = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(f, b)| tape.concat(&[*f, *b]))
        .collect::<Result<Vec<_>>>()?;
    let final_state = tape.concat(&[fwd_final, bwd_final])?;
    Ok((states, final_state))
}

/// Right-to-left encoder: output index `i` holds the state after
/// consuming tokens `i..n`, so it summarizes the remaining suffix.
pub fn encode_reverse<'t, T: Scalar>(
    cell: &LstmCell,
    tape: &'t Tape<T>,
    embedded: &[Var<'t, T>],
    mask_cols: &[Var<'t, T>],
) -> Result<Vec<Var<'t, T>>> {
    let (states, _) = masked_sweep(cell, tape, embedded, mask_cols, true)?;
    Ok(states)
}

/// Additive (concat) attention over encoder states.
#[derive(Clone, Debug)]
pub struct Attention {
    pub name: String,
    pub query_dim: usize,
    pub enc_dim: usize,
    pub attn_dim: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, query_dim: usize, enc_dim: usize, attn_dim: usize) -> Self {
        Attention {
            name: name.into(),
            query_dim,
            enc_dim,
            attn_dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.w", self.name),
            glorot_uniform(rng, self.query_dim + self.enc_dim, self.attn_dim),
        );
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.attn_dim]));
        store.insert(format!("{}.v", self.name), glorot_uniform(rng, self.attn_dim, 1));
    }

    /// Returns `(alphas [batch, m], context [batch, enc_dim])`. Masked
    /// positions get an additive -1e9 score before the softmax.
    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        query: Var<'t, T>,
        enc_states: &[Var<'t, T>],
        mask_cols: &[Var<'t, T>],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if enc_states.is_empty() {
            return Err(Error::invalid("attention over zero encoder states"));
        }
        // every row must have at least one unmasked position
        let batch = query.shape()[0];
        for r in 0..batch {
            let any = mask_cols.iter().any(|m| m.value().data()[r] > T::zero());
            if !any {
                return Err(Error::invalid(format!("attention row {} is fully masked", r)));
            }
        }
        let w = tape.leaf(&format!("{}.w", self.name))?;
        let b = tape.leaf(&format!("{}.b", self.name))?;
        let v = tape.leaf(&format!("{}.v", self.name))?;
        let neg_big = T::from_f64(-1e9);
        let mut scores = Vec::with_capacity(enc_states.len());
        for (j, h) in enc_states.iter().enumerate() {
            let score = tape.concat(&[query, *h])?.matmul(w)?.add(b)?.tanh().matmul(v)?;
            // (mask - 1) * 1e9 is 0 on valid, -1e9 on masked positions
            let penalty = mask_cols[j].add_scalar(-T::one()).scale(-neg_big);
            scores.push(score.add(penalty)?);
        }
        let alphas = tape.concat(&scores)?.softmax();
        let mut context: Option<Var<'t, T>> = None;
        for (j, h) in enc_states.iter().enumerate() {
            let weighted = alphas.slice_cols(j, j + 1)?.mul(*h)?;
            context = Some(match context {
                Some(acc) => acc.add(weighted)?,
                None => weighted,
            });
        }
        Ok((alphas, context.unwrap()))
    }
}

/// Mean/std-dev parameters as graph nodes.
#[derive(Clone, Copy)]
pub struct GaussianVars<'t, T: Scalar> {
    pub mu: Var<'t, T>,
    pub sigma: Var<'t, T>,
}

/// Two single-hidden-layer networks (tanh, hidden width twice the latent
/// size): one computes the mean, the other the standard deviation via
/// softplus plus [`SIGMA_FLOOR`].
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub name: String,
    pub in_dim: usize,
    pub latent_dim: usize,
    mu_hidden: Linear,
    mu_out: Linear,
    sigma_hidden: Linear,
    sigma_out: Linear,
}

impl GaussianHead {
    pub fn new(name: impl Into<String>, in_dim: usize, latent_dim: usize) -> Self {
        let name = name.into();
        let hidden = 2 * latent_dim;
        GaussianHead {
            mu_hidden: Linear::new(format!("{name}.mu_hidden"), in_dim, hidden),
            mu_out: Linear::new(format!("{name}.mu_out"), hidden, latent_dim),
            sigma_hidden: Linear::new(format!("{name}.sigma_hidden"), in_dim, hidden),
            sigma_out: Linear::new(format!("{name}.sigma_out"), hidden, latent_dim),
            name,
            in_dim,
            latent_dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.mu_hidden.init(store, rng);
        self.mu_out.init(store, rng);
        self.sigma_hidden.init(store, rng);
        self.sigma_out.init(store, rng);
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[Var<'t, T>],
    ) -> Result<GaussianVars<'t, T>> {
        let x = if inputs.len() == 1 {
            inputs[0]
        } else {
            tape.concat(inputs)?
        };
        if x.shape().last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "gaussian_head",
                format!("{}: input last dim {:?}, declared {}", self.name, x.shape(), self.in_dim),
            ));
        }
        let mu = self.mu_out.forward(tape, self.mu_hidden.forward(tape, x)?.tanh())?;
        let sigma = self
            .sigma_out
            .forward(tape, self.sigma_hidden.forward(tape, x)?.tanh())?
            .softplus()
            .add_scalar(T::from_f64(SIGMA_FLOOR));
        Ok(GaussianVars { mu, sigma })
    }
}

/// Inverted dropout: in train mode each element is kept with probability
/// `retain` and scaled by `1/retain`; in eval mode this is the identity.
pub fn dropout<'t, T: Scalar>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    retain: f64,
    rng: &mut ChaCha8Rng,
    train_mode: bool,
) -> Result<Var<'t, T>> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(Error::invalid(format!("dropout retain {} outside (0, 1]", retain)));
    }
    if !train_mode || retain == 1.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let scale = T::from_f64(1.0 / retain);
    let data: Vec<T> = (0..shape.iter().product())
        .map(|_| {
            if rng.gen_range(0.0..1.0) < retain {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?);
    x.mul(mask)
}
