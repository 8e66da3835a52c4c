//! The three generative decoders: a deterministic attentional baseline,
//! SENT (one sentence-level Gaussian latent variable concatenated to the
//! decoder input at every step) and SDEC (a per-position latent chain
//! seeded from the source and threaded through the decoder update).
//!
//! All three share the bidirectional source encoder and the additive
//! attention mechanism. The decoder recurrence feeds the post-attention
//! combined state back as the LSTM hidden state, so "the decoder state
//! at position i" is one well-defined vector used by the recurrence,
//! the prior networks and the inference network alike.

use crate::autodiff::{Tape, Var};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::layers::{
    dropout, encode_bidirectional, glorot_uniform, Attention, GaussianHead, GaussianVars, Linear,
    LstmCell, ParamStore, RnnState,
};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Sent,
    Sdec,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Sent => "sent",
            ModelKind::Sdec => "sdec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "sent" => Ok(ModelKind::Sent),
            "sdec" => Ok(ModelKind::Sdec),
            other => Err(Error::invalid(format!("unknown model kind `{}`", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub units: usize,
    pub attn_dim: usize,
    pub latent_dim: usize,
    pub dropout_retain: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let latent_ok = match self.kind {
            ModelKind::Baseline => self.latent_dim == 0,
            _ => self.latent_dim > 0,
        };
        if !latent_ok {
            return Err(Error::invalid(format!(
                "latent_dim {} invalid for kind {}",
                self.latent_dim,
                self.kind.as_str()
            )));
        }
        if !(self.dropout_retain > 0.0 && self.dropout_retain <= 1.0) {
            return Err(Error::invalid(format!(
                "dropout_retain {} outside (0, 1]",
                self.dropout_retain
            )));
        }
        Ok(())
    }
}

/// Where the sampled latent values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    PriorSample,
    PosteriorSample,
    PriorMean,
}

/// Mean and standard deviation as plain tensors (a recorded
/// distribution, detached from any tape).
#[derive(Clone, Debug)]
pub struct GaussianParams<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Sampled `z_0..z_n` with provenance. SENT chains hold exactly one
/// entry (`z_0`), SDEC chains hold one per predicted position plus the
/// initial variable.
#[derive(Clone, Debug)]
pub struct LatentChain<T> {
    pub zs: Vec<Tensor<T>>,
    pub mode: LatentMode,
    pub params: Vec<GaussianParams<T>>,
}

/// Source-side encodings produced once per batch.
pub struct SourceEncoding<'t, T: Scalar> {
    pub states: Vec<Var<'t, T>>,
    pub h_m: Var<'t, T>,
    pub mask_cols: Vec<Var<'t, T>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    enc_fwd: LstmCell,
    enc_bwd: LstmCell,
    dec: LstmCell,
    attn: Attention,
    bridge: Linear,
    combine: Linear,
    output: Linear,
    prior0: Option<GaussianHead>,
    prior_step: Option<GaussianHead>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let u = cfg.units;
        let dec_in = cfg.embed_dim
            + match cfg.kind {
                ModelKind::Baseline => 0,
                _ => cfg.latent_dim,
            };
        let prior0 = match cfg.kind {
            ModelKind::Baseline => None,
            _ => Some(GaussianHead::new("prior0", 2 * u, cfg.latent_dim)),
        };
        let prior_step = match cfg.kind {
            ModelKind::Sdec => Some(GaussianHead::new("prior_step", u + cfg.latent_dim, cfg.latent_dim)),
            _ => None,
        };
        Ok(Model {
            enc_fwd: LstmCell::new("enc_fwd", cfg.embed_dim, u),
            enc_bwd: LstmCell::new("enc_bwd", cfg.embed_dim, u),
            dec: LstmCell::new("dec", dec_in, u),
            attn: Attention::new("attn", u, 2 * u, cfg.attn_dim),
            bridge: Linear::new("bridge", 2 * u, u),
            combine: Linear::new("combine", u + 2 * u, u),
            output: Linear::new("out", u, cfg.tgt_vocab),
            prior0,
            prior_step,
            cfg,
        })
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        store.insert("src_embed", glorot_uniform(rng, self.cfg.src_vocab, self.cfg.embed_dim));
        store.insert("tgt_embed", glorot_uniform(rng, self.cfg.tgt_vocab, self.cfg.embed_dim));
        self.enc_fwd.init(&mut store, rng);
        self.enc_bwd.init(&mut store, rng);
        self.dec.init(&mut store, rng);
        self.attn.init(&mut store, rng);
        self.bridge.init(&mut store, rng);
        self.combine.init(&mut store, rng);
        self.output.init(&mut store, rng);
        if let Some(head) = &self.prior0 {
            head.init(&mut store, rng);
        }
        if let Some(head) = &self.prior_step {
            head.init(&mut store, rng);
        }
        store
    }

    pub fn embed_src<'t, T: Scalar>(&self, tape: &'t Tape<T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = tape.leaf("src_embed")?;
        tape.embed(table, ids)
    }

    pub fn embed_tgt<'t, T: Scalar>(&self, tape: &'t Tape<T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = tape.leaf("tgt_embed")?;
        tape.embed(table, ids)
    }

    /// Bidirectional source encoding with the composite final state
    /// (forward final ++ backward final). Dropout hits the source
    /// embeddings in train mode.
    pub fn encode_source<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        batch: &TokenBatch,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<SourceEncoding<'t, T>> {
        if batch.src_len == 0 {
            return Err(Error::invalid("empty source sentence"));
        }
        let mut embedded = Vec::with_capacity(batch.src_len);
        let mut mask_cols = Vec::with_capacity(batch.src_len);
        for t in 0..batch.src_len {
            let emb = self.embed_src(tape, &batch.src_ids_at(t))?;
            embedded.push(dropout(tape, emb, self.cfg.dropout_retain, rng, train)?);
            mask_cols.push(tape.constant(batch.src_mask_col::<T>(t)));
        }
        let (states, h_m) = encode_bidirectional(&self.enc_fwd, &self.enc_bwd, tape, &embedded, &mask_cols)?;
        Ok(SourceEncoding {
            states,
            h_m,
            mask_cols,
        })
    }

    /// Decoder start state: `t_0 = tanh(bridge(h_m))`, zero cell.
    pub fn init_decoder_state<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        h_m: Var<'t, T>,
    ) -> Result<RnnState<'t, T>> {
        let hidden = self.bridge.forward(tape, h_m)?.tanh();
        let batch = hidden.shape()[0];
        Ok(RnnState {
            hidden,
            cell: tape.constant(Tensor::zeros(&[batch, self.cfg.units])),
        })
    }

    /// Initial prior over `z_0`, computed from the composite source
    /// final state.
    pub fn prior_initial<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        h_m: Var<'t, T>,
    ) -> Result<GaussianVars<'t, T>> {
        match &self.prior0 {
            Some(head) => head.forward(tape, &[h_m]),
            None => Err(Error::invalid("prior_initial called on a baseline model")),
        }
    }

    /// Per-position prior for the latent chain, conditioned on the
    /// previous decoder state and latent value.
    pub fn prior_step<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        t_prev: Var<'t, T>,
        z_prev: Var<'t, T>,
    ) -> Result<GaussianVars<'t, T>> {
        match &self.prior_step {
            Some(head) => head.forward(tape, &[t_prev, z_prev]),
            None => Err(Error::invalid(format!(
                "prior_step is only defined for sdec, model is {}",
                self.cfg.kind.as_str()
            ))),
        }
    }

    /// One teacher-forcing / decoding step. `z` must be present exactly
    /// when the model kind has latent variables. Returns the new state
    /// (hidden = combined post-attention state) and the output logits.
    pub fn decoder_step<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        state: RnnState<'t, T>,
        y_prev_emb: Var<'t, T>,
        z: Option<Var<'t, T>>,
        enc: &SourceEncoding<'t, T>,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<(RnnState<'t, T>, Var<'t, T>)> {
        let input = match (self.cfg.kind, z) {
            (ModelKind::Baseline, None) => y_prev_emb,
            (ModelKind::Sent, Some(z)) | (ModelKind::Sdec, Some(z)) => tape.concat(&[y_prev_emb, z])?,
            (kind, z) => {
                return Err(Error::invalid(format!(
                    "latent arity mismatch: kind {} got z={}",
                    kind.as_str(),
                    z.is_some()
                )))
            }
        };
        let pre = self.dec.step(tape, input, state)?;
        let (_alphas, context) = self.attn.forward(tape, pre.hidden, &enc.states, &enc.mask_cols)?;
        let combined = self.combine.forward(tape, tape.concat(&[pre.hidden, context])?)?;
        let features = dropout(tape, combined, self.cfg.dropout_retain, rng, train)?;
        let logits = self.output.forward(tape, features)?;
        Ok((
            RnnState {
                hidden: combined,
                cell: pre.cell,
            },
            logits,
        ))
    }

    fn check_chain_arity<T: Scalar>(&self, chain: Option<&LatentChain<T>>, positions: usize) -> Result<()> {
        match (self.cfg.kind, chain) {
            (ModelKind::Baseline, None) => Ok(()),
            (ModelKind::Sent, Some(c)) if c.zs.len() == 1 => Ok(()),
            (ModelKind::Sdec, Some(c)) if c.zs.len() == positions + 1 => Ok(()),
            (kind, c) => Err(Error::invalid(format!(
                "latent chain arity mismatch: kind {} with chain len {:?} for {} positions",
                kind.as_str(),
                c.map(|c| c.zs.len()),
                positions
            ))),
        }
    }

    /// Teacher-forced per-position log-probabilities of the gold tokens,
    /// already masked (padding positions contribute exactly zero).
    ///
    /// For latent models a recorded [`LatentChain`] supplies the z
    /// values as constants; replaying a chain reproduces the logits
    /// bit-exactly.
    pub fn teacher_forced_nll<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        batch: &TokenBatch,
        chain: Option<&LatentChain<T>>,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        let positions = batch.num_pred_positions();
        self.check_chain_arity(chain, positions)?;
        let enc = self.encode_source(tape, batch, rng, train)?;
        let mut state = self.init_decoder_state(tape, enc.h_m)?;
        let mut log_probs = Vec::with_capacity(positions);
        for i in 1..=positions {
            let y_prev = self.embed_tgt(tape, &batch.tgt_ids_at(i - 1))?;
            let y_prev = dropout(tape, y_prev, self.cfg.dropout_retain, rng, train)?;
            let z = match (self.cfg.kind, chain) {
                (ModelKind::Baseline, _) => None,
                (ModelKind::Sent, Some(c)) => Some(tape.constant(c.zs[0].clone())),
                (ModelKind::Sdec, Some(c)) => Some(tape.constant(c.zs[i].clone())),
                _ => unreachable!("arity checked above"),
            };
            let (next, logits) = self.decoder_step(tape, state, y_prev, z, &enc, rng, train)?;
            state = next;
            let lp = tape.row_select(logits.log_softmax(), &batch.tgt_ids_at(i))?;
            let mask = tape.constant(batch.pred_mask::<T>(i));
            log_probs.push(lp.mul(mask)?);
        }
        Ok(log_probs)
    }

    /// Total negative log-likelihood of the batch (a scalar node).
    pub fn nll_loss<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        batch: &TokenBatch,
        chain: Option<&LatentChain<T>>,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<Var<'t, T>> {
        let lps = self.teacher_forced_nll(tape, batch, chain, rng, train)?;
        let mut total = lps[0].sum_all();
        for lp in &lps[1..] {
            total = total.add(lp.sum_all())?;
        }
        Ok(total.scale(-T::one()))
    }

    /// Parameter names that belong to the generator's decoder path only
    /// (reachable from a q-side loss solely through the blocked decoder
    /// state): decoder LSTM, attention, combine and output layers.
    pub fn decoder_exclusive_params<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<String> {
        store
            .names()
            .filter(|n| {
                n.starts_with("dec.") || n.starts_with("attn.") || n.starts_with("combine.") || n.starts_with("out.")
            })
            .cloned()
            .collect()
    }
}
