//! Variational inference for the latent decoders: reparametrized
//! sampling, analytic diagonal-Gaussian KL, the look-ahead inference
//! network, the nested positional ELBO and the KL-annealing schedule.
//!
//! The inference network reads representations computed by the
//! generator (the decoder state and the shared target embeddings), but
//! those inputs are wrapped in `stop_gradient` so that no gradient of a
//! q-side quantity ever reaches generator parameters through them.

use crate::autodiff::{Tape, Var};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::layers::{encode_bidirectional, encode_reverse, GaussianHead, GaussianVars, LstmCell, ParamStore};
use crate::model::{GaussianParams, LatentChain, LatentMode, Model, ModelConfig, ModelKind};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// KL scale at optimizer step `t`: `min(t / anneal_steps, 1)`.
pub fn kl_scale(t: u64, anneal_steps: u64) -> f64 {
    assert!(anneal_steps > 0, "anneal_steps must be positive");
    (t as f64 / anneal_steps as f64).min(1.0)
}

/// Standard-normal draws for reparametrized sampling: either fresh from
/// an RNG or replayed from a recorded stream (which makes an ELBO
/// evaluation bit-reproducible and finite-difference-checkable).
pub enum NoiseSource<'a, T: Scalar> {
    Rng(&'a mut ChaCha8Rng),
    Recorded { draws: &'a [Tensor<T>], next: usize },
}

impl<'a, T: Scalar> NoiseSource<'a, T> {
    pub fn recorded(draws: &'a [Tensor<T>]) -> Self {
        NoiseSource::Recorded { draws, next: 0 }
    }

    pub fn next_eps(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        match self {
            NoiseSource::Rng(rng) => {
                let data = (0..shape.iter().product())
                    .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                Tensor::new(shape.to_vec(), data)
            }
            NoiseSource::Recorded { draws, next } => {
                let t = draws
                    .get(*next)
                    .ok_or_else(|| Error::invalid("recorded noise stream exhausted"))?;
                if t.shape() != shape {
                    return Err(Error::shape(
                        "noise_replay",
                        format!("recorded {:?}, requested {:?}", t.shape(), shape),
                    ));
                }
                *next += 1;
                Ok(t.clone())
            }
        }
    }
}

/// `z = mu + sigma (.) eps`, differentiable w.r.t. both parameters.
pub fn reparam_sample<'t, T: Scalar>(
    _tape: &'t Tape<T>,
    params: GaussianVars<'t, T>,
    eps: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if eps.shape() != params.mu.shape() {
        return Err(Error::shape(
            "reparam_sample",
            format!("eps {:?} vs mu {:?}", eps.shape(), params.mu.shape()),
        ));
    }
    params.mu.add(params.sigma.mul(eps)?)
}

/// Analytic KL between diagonal Gaussians, summed over the latent
/// dimension: `sum_d [ log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2 ]`.
/// Returns one value per batch row.
pub fn kl_diag_gaussian<'t, T: Scalar>(
    _tape: &'t Tape<T>,
    q: GaussianVars<'t, T>,
    p: GaussianVars<'t, T>,
) -> Result<Var<'t, T>> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("q {:?} vs p {:?}", q.mu.shape(), p.mu.shape()),
        ));
    }
    for (name, sigma) in [("q", &q.sigma), ("p", &p.sigma)] {
        if sigma.value().data().iter().any(|&s| s <= T::zero()) {
            return Err(Error::invalid(format!("nonpositive {name} sigma in kl_diag_gaussian")));
        }
    }
    let half = T::from_f64(0.5);
    let log_ratio = p.sigma.log().sub(q.sigma.log())?;
    let diff = q.mu.sub(p.mu)?;
    let numer = q.sigma.square()?.add(diff.square()?)?;
    let denom = p.sigma.square()?.scale(T::from_f64(2.0));
    let term = log_ratio.add(numer.div(denom)?)?.add_scalar(-half);
    Ok(term.sum_last())
}

/// Per-position reconstruction and KL totals for one ELBO evaluation
/// (sums over the batch; `kl[0]` is the initial latent variable's term).
#[derive(Clone, Debug)]
pub struct ElboReport {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub kl_scale: f64,
    pub scaled_elbo: f64,
    pub unscaled_elbo: f64,
    pub sentences: usize,
    pub tokens: usize,
}

impl ElboReport {
    pub fn recon_total(&self) -> f64 {
        self.recon.iter().sum()
    }

    pub fn kl_total(&self) -> f64 {
        self.kl.iter().sum()
    }

    pub fn per_token_rate(&self) -> f64 {
        self.kl_total() / self.tokens as f64
    }

    pub fn csv_header() -> &'static str {
        "step,kl_scale,recon_total,kl_total,scaled_elbo,unscaled_elbo,per_token_rate"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            step,
            self.kl_scale,
            self.recon_total(),
            self.kl_total(),
            self.scaled_elbo,
            self.unscaled_elbo,
            self.per_token_rate()
        )
    }
}

/// Result of building one ELBO graph: the scalar training loss node
/// (negative scaled ELBO), the numbers, and the sampled chain.
pub struct ElboOutcome<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    pub report: ElboReport,
    pub chain: LatentChain<T>,
}

/// Look-ahead inference network. Owns the target-side encoders and the
/// variational Gaussian heads; shares the generator's target embedding
/// table (gradient-blocked on this path).
pub struct InferenceNet {
    kind: ModelKind,
    latent_dim: usize,
    tgt_fwd: LstmCell,
    tgt_bwd: LstmCell,
    reverse: Option<LstmCell>,
    q0: GaussianHead,
    q_step: Option<GaussianHead>,
}

impl InferenceNet {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.kind == ModelKind::Baseline {
            return Err(Error::invalid("baseline models have no inference network"));
        }
        let u = cfg.units;
        let reverse = match cfg.kind {
            ModelKind::Sdec => Some(LstmCell::new("inf.rev", cfg.embed_dim, u)),
            _ => None,
        };
        let q_step = match cfg.kind {
            ModelKind::Sdec => Some(GaussianHead::new(
                "inf.q_step",
                u + cfg.latent_dim + u + cfg.embed_dim,
                cfg.latent_dim,
            )),
            _ => None,
        };
        Ok(InferenceNet {
            kind: cfg.kind,
            latent_dim: cfg.latent_dim,
            tgt_fwd: LstmCell::new("inf.tgt_fwd", cfg.embed_dim, u),
            tgt_bwd: LstmCell::new("inf.tgt_bwd", cfg.embed_dim, u),
            reverse,
            q0: GaussianHead::new("inf.q0", 2 * u + 2 * u, cfg.latent_dim),
            q_step,
        })
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.tgt_fwd.init(store, rng);
        self.tgt_bwd.init(store, rng);
        if let Some(rev) = &self.reverse {
            rev.init(store, rng);
        }
        self.q0.init(store, rng);
        if let Some(head) = &self.q_step {
            head.init(store, rng);
        }
    }

    /// Initial posterior from the source summary and the composite final
    /// state of the target bidirectional encoding.
    pub fn q_initial<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        h_m: Var<'t, T>,
        b_n: Var<'t, T>,
    ) -> Result<GaussianVars<'t, T>> {
        self.q0.forward(tape, &[h_m, b_n])
    }

    /// Per-position posterior. `t_prev` comes from the generator and is
    /// gradient-blocked here; `r_i` is the reverse (look-ahead) encoding
    /// at position i and `y_i_emb` the current gold token's embedding.
    pub fn q_step<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        t_prev: Var<'t, T>,
        z_prev: Var<'t, T>,
        r_i: Var<'t, T>,
        y_i_emb: Var<'t, T>,
    ) -> Result<GaussianVars<'t, T>> {
        let head = self
            .q_step
            .as_ref()
            .ok_or_else(|| Error::invalid("q_step is only defined for sdec"))?;
        head.forward(tape, &[t_prev.stop_gradient(), z_prev, r_i, y_i_emb])
    }

    /// Target-side encodings of the gold sequence `y_1..y_N` (content
    /// plus EOS): bidirectional states with composite final, and the
    /// reverse suffix encodings when the model needs them. Embeddings
    /// are shared with the generator but gradient-blocked.
    pub fn encode_target<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        model: &Model,
        batch: &TokenBatch,
    ) -> Result<(Var<'t, T>, Option<Vec<Var<'t, T>>>)> {
        let positions = batch.num_pred_positions();
        let mut embedded = Vec::with_capacity(positions);
        let mut mask_cols = Vec::with_capacity(positions);
        for i in 1..=positions {
            let emb = model.embed_tgt(tape, &batch.tgt_ids_at(i))?.stop_gradient();
            embedded.push(emb);
            mask_cols.push(tape.constant({
                let m = batch.pred_mask::<T>(i);
                Tensor::new(vec![batch.batch, 1], m.into_data())?
            }));
        }
        let (_, b_n) = encode_bidirectional(&self.tgt_fwd, &self.tgt_bwd, tape, &embedded, &mask_cols)?;
        let r_states = match &self.reverse {
            Some(rev) => Some(encode_reverse(rev, tape, &embedded, &mask_cols)?),
            None => None,
        };
        Ok((b_n, r_states))
    }
}

fn record<T: Scalar>(g: &GaussianVars<'_, T>) -> GaussianParams<T> {
    GaussianParams {
        mu: g.mu.value(),
        sigma: g.sigma.value(),
    }
}

/// Single-sample Monte-Carlo estimate of the sequence ELBO, with
/// analytic per-position KL. Posterior samples feed both the decoder and
/// the conditioning of the next prior, matching the nesting of the
/// positional ELBOs. Padding masks both reconstruction and KL terms.
pub fn sequence_elbo<'t, T: Scalar>(
    model: &Model,
    infnet: &InferenceNet,
    tape: &'t Tape<T>,
    batch: &TokenBatch,
    noise: &mut NoiseSource<'_, T>,
    kl_scale: f64,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<ElboOutcome<'t, T>> {
    if model.cfg.kind == ModelKind::Baseline {
        return Err(Error::invalid("sequence_elbo requires a latent model"));
    }
    let latent_shape = [batch.batch, model.cfg.latent_dim];
    let positions = batch.num_pred_positions();

    let enc = model.encode_source(tape, batch, rng, train)?;
    let (b_n, r_states) = infnet.encode_target(tape, model, batch)?;

    // initial latent variable
    let q0 = infnet.q_initial(tape, enc.h_m, b_n)?;
    let p0 = model.prior_initial(tape, enc.h_m)?;
    let eps0 = tape.constant(noise.next_eps(&latent_shape)?);
    let z0 = reparam_sample(tape, q0, eps0)?;
    let kl0 = kl_diag_gaussian(tape, q0, p0)?;
    // z_0's KL is unmasked: every sentence has an initial latent variable
    let mut kl_vars = vec![kl0];
    let mut chain = LatentChain {
        zs: vec![z0.value()],
        mode: LatentMode::PosteriorSample,
        params: vec![record(&q0)],
    };

    let mut state = model.init_decoder_state(tape, enc.h_m)?;
    let mut z_prev = z0;
    let mut recon_vars = Vec::with_capacity(positions);
    for i in 1..=positions {
        let z_i = match model.cfg.kind {
            ModelKind::Sent => z0,
            ModelKind::Sdec => {
                let r_i = r_states.as_ref().unwrap()[i - 1];
                let y_i = model.embed_tgt(tape, &batch.tgt_ids_at(i))?.stop_gradient();
                let q_i = infnet.q_step(tape, state.hidden, z_prev, r_i, y_i)?;
                let p_i = model.prior_step(tape, state.hidden, z_prev)?;
                let eps = tape.constant(noise.next_eps(&latent_shape)?);
                let z_i = reparam_sample(tape, q_i, eps)?;
                let kl_i = kl_diag_gaussian(tape, q_i, p_i)?;
                let mask = tape.constant(batch.pred_mask::<T>(i));
                kl_vars.push(kl_i.mul(mask)?);
                chain.zs.push(z_i.value());
                chain.params.push(record(&q_i));
                z_prev = z_i;
                z_i
            }
            ModelKind::Baseline => unreachable!(),
        };
        let y_prev = model.embed_tgt(tape, &batch.tgt_ids_at(i - 1))?;
        let y_prev = crate::layers::dropout(tape, y_prev, model.cfg.dropout_retain, rng, train)?;
        let (next, logits) = model.decoder_step(tape, state, y_prev, Some(z_i), &enc, rng, train)?;
        state = next;
        let lp = tape.row_select(logits.log_softmax(), &batch.tgt_ids_at(i))?;
        let mask = tape.constant(batch.pred_mask::<T>(i));
        recon_vars.push(lp.mul(mask)?);
    }

    let mut recon_total = recon_vars[0].sum_all();
    for r in &recon_vars[1..] {
        recon_total = recon_total.add(r.sum_all())?;
    }
    let mut kl_total = kl_vars[0].sum_all();
    for k in &kl_vars[1..] {
        kl_total = kl_total.add(k.sum_all())?;
    }
    let scaled = recon_total.sub(kl_total.scale(T::from_f64(kl_scale)))?;
    let loss = scaled.scale(-T::one());

    let recon: Vec<f64> = recon_vars.iter().map(|v| v.value().data().iter().map(|&x| x.to_f64()).sum()).collect();
    let kl: Vec<f64> = kl_vars.iter().map(|v| v.value().data().iter().map(|&x| x.to_f64()).sum()).collect();
    let recon_sum: f64 = recon.iter().sum();
    let kl_sum: f64 = kl.iter().sum();
    let report = ElboReport {
        recon,
        kl,
        kl_scale,
        scaled_elbo: recon_sum - kl_scale * kl_sum,
        unscaled_elbo: recon_sum - kl_sum,
        sentences: batch.batch,
        tokens: batch.total_pred_tokens(),
    };
    Ok(ElboOutcome { loss, report, chain })
}

/// Dataset-average KL: nats per sentence (and per token) — the rate,
/// an estimate of the upper bound on the mutual information between
/// latents and output.
#[derive(Clone, Copy, Debug)]
pub struct RateReport {
    pub nats_per_sentence: f64,
    pub nats_per_token: f64,
}

pub fn rate_diagnostic<T: Scalar>(
    model: &Model,
    infnet: &InferenceNet,
    params: &ParamStore<T>,
    batches: &[TokenBatch],
    seed: u64,
) -> Result<RateReport> {
    use rand::SeedableRng;
    if batches.is_empty() {
        return Err(Error::invalid("rate_diagnostic over an empty dataset"));
    }
    let mut kl_total = 0.0;
    let mut sentences = 0usize;
    let mut tokens = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for batch in batches {
        let tape = Tape::new(params.bindings());
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut noise = NoiseSource::Rng(&mut sample_rng);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = sequence_elbo(model, infnet, &tape, batch, &mut noise, 1.0, &mut drop_rng, false)?;
        kl_total += out.report.kl_total();
        sentences += out.report.sentences;
        tokens += out.report.tokens;
    }
    Ok(RateReport {
        nats_per_sentence: kl_total / sentences as f64,
        nats_per_token: kl_total / tokens as f64,
    })
}
