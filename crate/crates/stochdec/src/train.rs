//! The training loop: KL-annealed objective, Adam with clipping,
//! deterministic seeded batching, periodic dev evaluation, metric
//! logging and checkpointing.
//!
//! Every random draw is derived from the master seed, a purpose stream,
//! and the optimizer step, so a resumed run consumes exactly the same
//! randomness as an uninterrupted one.

use crate::checkpoint::{save_checkpoint, LoadedCheckpoint};
use crate::data::TokenBatch;
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::inference::{kl_scale, sequence_elbo, InferenceNet, NoiseSource};
use crate::layers::ParamStore;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::optim::{clip_global_norm, make_batches, Adam};
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_LATENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_DEV: u64 = 5;

/// RNG for one purpose at one step: same master seed, disjoint stream,
/// and a word position far enough along that steps never overlap.
pub fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((step as u128) << 32);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub anneal_steps: u64,
    pub dev_every: u64,
    pub checkpoint_every: u64,
    pub max_len: usize,
    pub record_wallclock: bool,
}

impl TrainConfig {
    pub fn desk_defaults(kind: ModelKind, src_vocab: usize, tgt_vocab: usize) -> Self {
        TrainConfig {
            model: ModelConfig {
                kind,
                src_vocab,
                tgt_vocab,
                embed_dim: 32,
                units: 64,
                attn_dim: 32,
                latent_dim: if kind == ModelKind::Baseline { 0 } else { 16 },
                dropout_retain: 0.5,
            },
            seed: 1,
            lr: 3e-4,
            clip_norm: 5.0,
            batch_size: 16,
            max_steps: 2000,
            anneal_steps: 20_000,
            dev_every: 100,
            checkpoint_every: 500,
            max_len: 50,
            record_wallclock: true,
        }
    }

    /// Builds a config from key=value pairs; unknown keys are errors.
    /// `src_vocab` and `tgt_vocab` must be present (or supplied later by
    /// the corpus loader via the defaults argument).
    pub fn from_kv(kv: &BTreeMap<String, String>, mut base: TrainConfig) -> Result<TrainConfig> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value `{}` for key `{}`", v, k));
        let mut latent_dim_given = false;
        for (k, v) in kv {
            match k.as_str() {
                "model" => base.model.kind = ModelKind::parse(v).map_err(|e| Error::Config(e.to_string()))?,
                "src_vocab" => base.model.src_vocab = v.parse().map_err(|_| bad(k, v))?,
                "tgt_vocab" => base.model.tgt_vocab = v.parse().map_err(|_| bad(k, v))?,
                "embed_dim" => base.model.embed_dim = v.parse().map_err(|_| bad(k, v))?,
                "units" => base.model.units = v.parse().map_err(|_| bad(k, v))?,
                "attn_dim" => base.model.attn_dim = v.parse().map_err(|_| bad(k, v))?,
                "latent_dim" => {
                    base.model.latent_dim = v.parse().map_err(|_| bad(k, v))?;
                    latent_dim_given = true;
                }
                "dropout_retain" => base.model.dropout_retain = v.parse().map_err(|_| bad(k, v))?,
                "seed" => base.seed = v.parse().map_err(|_| bad(k, v))?,
                "lr" => base.lr = v.parse().map_err(|_| bad(k, v))?,
                "clip_norm" => base.clip_norm = v.parse().map_err(|_| bad(k, v))?,
                "batch_size" => base.batch_size = v.parse().map_err(|_| bad(k, v))?,
                "max_steps" => base.max_steps = v.parse().map_err(|_| bad(k, v))?,
                "anneal_steps" => base.anneal_steps = v.parse().map_err(|_| bad(k, v))?,
                "dev_every" => base.dev_every = v.parse().map_err(|_| bad(k, v))?,
                "checkpoint_every" => base.checkpoint_every = v.parse().map_err(|_| bad(k, v))?,
                "max_len" => base.max_len = v.parse().map_err(|_| bad(k, v))?,
                "record_wallclock" => base.record_wallclock = v.parse().map_err(|_| bad(k, v))?,
                other => return Err(Error::Config(format!("unknown config key `{}`", other))),
            }
        }
        if !latent_dim_given && base.model.kind == ModelKind::Baseline {
            base.model.latent_dim = 0;
        }
        base.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(base)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model={}\nsrc_vocab={}\ntgt_vocab={}\nembed_dim={}\nunits={}\nattn_dim={}\nlatent_dim={}\ndropout_retain={}\nseed={}\nlr={}\nclip_norm={}\nbatch_size={}\nmax_steps={}\nanneal_steps={}\ndev_every={}\ncheckpoint_every={}\nmax_len={}\nrecord_wallclock={}\n",
            self.model.kind.as_str(),
            self.model.src_vocab,
            self.model.tgt_vocab,
            self.model.embed_dim,
            self.model.units,
            self.model.attn_dim,
            self.model.latent_dim,
            self.model.dropout_retain,
            self.seed,
            self.lr,
            self.clip_norm,
            self.batch_size,
            self.max_steps,
            self.anneal_steps,
            self.dev_every,
            self.checkpoint_every,
            self.max_len,
            self.record_wallclock
        )
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model,
    pub infnet: Option<InferenceNet>,
    pub store: ParamStore<T>,
    pub opt: Adam<T>,
    pub metrics_csv: String,
    pub losses: Vec<f64>,
    pub last_dev_metric: Option<f64>,
    pub skipped_pairs: usize,
}

pub const METRICS_HEADER: &str = "step,loss,recon,kl,kl_scale,dev_metric,wallclock_s";

fn batch_for_step(
    pairs: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainConfig,
    step: u64,
    cache: &mut Option<(u64, Vec<TokenBatch>, usize)>,
) -> Result<(TokenBatch, usize)> {
    // count batches per epoch once (depends only on kept-pair count)
    let epoch_len = match cache {
        Some((_, batches, _)) => batches.len() as u64,
        None => {
            let mut rng = step_rng(cfg.seed, STREAM_DATA, 0);
            let (batches, skipped) = make_batches(pairs, cfg.batch_size, cfg.max_len, &mut rng)?;
            if batches.is_empty() {
                return Err(Error::invalid("no trainable pairs within max_len"));
            }
            let n = batches.len() as u64;
            *cache = Some((0, batches, skipped));
            n
        }
    };
    let epoch = step / epoch_len;
    let index = (step % epoch_len) as usize;
    let needs_epoch = match cache {
        Some((e, _, _)) => *e != epoch,
        None => true,
    };
    if needs_epoch {
        let mut rng = step_rng(cfg.seed, STREAM_DATA, epoch);
        let (batches, skipped) = make_batches(pairs, cfg.batch_size, cfg.max_len, &mut rng)?;
        *cache = Some((epoch, batches, skipped));
    }
    let (_, batches, skipped) = cache.as_ref().unwrap();
    Ok((batches[index].clone(), *skipped))
}

/// One forward/backward/update step's numbers.
struct StepStats {
    loss: f64,
    recon: f64,
    kl: f64,
}

fn train_step<T: Scalar>(
    model: &Model,
    infnet: Option<&InferenceNet>,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    batch: &TokenBatch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    let tape = crate::autodiff::Tape::new(store.bindings());
    let mut drop_rng = step_rng(cfg.seed, STREAM_DROPOUT, step);
    let scale = kl_scale(step, cfg.anneal_steps);
    let (loss, recon, kl) = match model.cfg.kind {
        ModelKind::Baseline => {
            let loss = model.nll_loss(&tape, batch, None, &mut drop_rng, true)?;
            let v = loss.value().item()?;
            (loss, -v.to_f64(), 0.0)
        }
        _ => {
            let infnet = infnet.ok_or_else(|| Error::invalid("latent model requires an inference net"))?;
            let mut latent_rng = step_rng(cfg.seed, STREAM_LATENT, step);
            let mut noise = NoiseSource::Rng(&mut latent_rng);
            let out = sequence_elbo(model, infnet, &tape, batch, &mut noise, scale, &mut drop_rng, true)?;
            (out.loss, out.report.recon_total(), out.report.kl_total())
        }
    };
    let loss_val = loss.value().item()?.to_f64();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss",
            name: format!("step {}", step),
        });
    }
    let mut grads = tape.gradient_all(loss)?;
    clip_global_norm(&mut grads, cfg.clip_norm)?;
    opt.step(store, &grads)?;
    Ok(StepStats {
        loss: loss_val,
        recon,
        kl,
    })
}

/// Dev-set metric, higher is better: total log-likelihood for the
/// baseline, total unscaled ELBO (kl_scale = 1) for latent models.
pub fn eval_dev<T: Scalar>(
    model: &Model,
    infnet: Option<&InferenceNet>,
    store: &ParamStore<T>,
    dev: &[TokenBatch],
    seed: u64,
    step: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, batch) in dev.iter().enumerate() {
        let tape = crate::autodiff::Tape::new(store.bindings());
        let mut drop_rng = step_rng(seed, STREAM_DEV, step);
        match model.cfg.kind {
            ModelKind::Baseline => {
                let loss = model.nll_loss(&tape, batch, None, &mut drop_rng, false)?;
                total -= loss.value().item()?.to_f64();
            }
            _ => {
                let infnet = infnet.ok_or_else(|| Error::invalid("latent model requires an inference net"))?;
                let mut latent_rng = step_rng(seed, STREAM_DEV, step);
                latent_rng.set_word_pos(((step as u128) << 32) | ((i as u128 + 1) << 16));
                let mut noise = NoiseSource::Rng(&mut latent_rng);
                let out = sequence_elbo(model, infnet, &tape, batch, &mut noise, 1.0, &mut drop_rng, false)?;
                total += out.report.unscaled_elbo;
            }
        }
    }
    Ok(total)
}

pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_pairs: &[(Vec<usize>, Vec<usize>)],
    dev_pairs: &[(Vec<usize>, Vec<usize>)],
    out_dir: Option<&Path>,
    resume: Option<LoadedCheckpoint<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.model.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let model = Model::new(cfg.model.clone())?;
    let infnet = match cfg.model.kind {
        ModelKind::Baseline => None,
        _ => Some(InferenceNet::new(&cfg.model)?),
    };
    let (mut store, mut opt) = match resume {
        Some(ck) => (ck.params, ck.opt),
        None => {
            let mut init_rng = step_rng(cfg.seed, STREAM_INIT, 0);
            let mut store = model.init_params::<T>(&mut init_rng);
            if let Some(inf) = &infnet {
                inf.init_params(&mut store, &mut init_rng);
            }
            let mut opt = Adam::new(cfg.lr);
            opt.t = 0;
            (store, opt)
        }
    };

    // dev batches are fixed (no shuffling effect on totals, but keep the
    // grouping deterministic anyway)
    let dev_batches = if dev_pairs.is_empty() {
        Vec::new()
    } else {
        let mut rng = step_rng(cfg.seed, STREAM_DEV, u64::MAX >> 8);
        make_batches(dev_pairs, cfg.batch_size, cfg.max_len, &mut rng)?.0
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
    }

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut losses = Vec::new();
    let mut last_dev = None;
    let mut skipped = 0usize;
    let mut cache = None;
    let start = Instant::now();

    while opt.t < cfg.max_steps {
        let step = opt.t;
        let (batch, skip) = batch_for_step(train_pairs, cfg, step, &mut cache)?;
        skipped = skip;
        let scale = kl_scale(step, cfg.anneal_steps);
        let stats = train_step(&model, infnet.as_ref(), &mut store, &mut opt, &batch, cfg, step)?;
        losses.push(stats.loss);

        let done = opt.t >= cfg.max_steps;
        let dev_metric = if !dev_batches.is_empty() && (cfg.dev_every > 0 && opt.t % cfg.dev_every == 0 || done) {
            let m = eval_dev(&model, infnet.as_ref(), &store, &dev_batches, cfg.seed, opt.t)?;
            last_dev = Some(m);
            Some(m)
        } else {
            None
        };
        let wallclock = if cfg.record_wallclock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            step,
            stats.loss,
            stats.recon,
            stats.kl,
            scale,
            dev_metric.map(|m| m.to_string()).unwrap_or_default(),
            wallclock
        ));

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && opt.t % cfg.checkpoint_every == 0 || done {
                save_checkpoint(&dir.join(format!("ckpt-{}", opt.t)), &store, &opt)?;
            }
            if done {
                save_checkpoint(&dir.join("ckpt-final"), &store, &opt)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), &metrics)?;
    }
    Ok(TrainOutcome {
        model,
        infnet,
        store,
        opt,
        metrics_csv: metrics,
        losses,
        last_dev_metric: last_dev,
        skipped_pairs: skipped,
    })
}

/// Per-token greedy-decoding accuracy against references; positions
/// beyond the shorter of output and reference count as wrong.
pub fn token_accuracy<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    max_len: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (src, tgt) in pairs {
        let out = greedy_decode(model, store, src, max_len)?;
        total += tgt.len().max(out.tokens.len());
        correct += out
            .tokens
            .iter()
            .zip(tgt)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::corpus::{build_vocab, encode_pairs, generate_copy_corpus};

    fn copy_task(n: usize) -> (Vec<(Vec<usize>, Vec<usize>)>, usize) {
        let c = generate_copy_corpus(20, n, (2, 4), 3).unwrap();
        let vocab = build_vocab(c.sources(), 20).unwrap();
        (encode_pairs(&c, &vocab, &vocab), vocab.size())
    }

    fn quick_cfg(kind: ModelKind, v: usize) -> TrainConfig {
        let mut cfg = TrainConfig::desk_defaults(kind, v, v);
        cfg.model.embed_dim = 6;
        cfg.model.units = 8;
        cfg.model.attn_dim = 4;
        cfg.model.latent_dim = if kind == ModelKind::Baseline { 0 } else { 3 };
        cfg.model.dropout_retain = 1.0;
        cfg.max_steps = 12;
        cfg.anneal_steps = 10;
        cfg.dev_every = 6;
        cfg.checkpoint_every = 6;
        cfg.batch_size = 8;
        cfg.record_wallclock = false;
        cfg
    }

    #[test]
    fn config_kv_roundtrip_and_unknown_key() {
        let base = TrainConfig::desk_defaults(ModelKind::Sdec, 20, 20);
        let mut kv = BTreeMap::new();
        kv.insert("lr".to_string(), "0.001".to_string());
        kv.insert("model".to_string(), "sent".to_string());
        let cfg = TrainConfig::from_kv(&kv, base.clone()).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.model.kind, ModelKind::Sent);

        kv.insert("learning_rate".to_string(), "0.1".to_string());
        let err = TrainConfig::from_kv(&kv, base).err().unwrap();
        assert!(format!("{}", err).contains("learning_rate"));
    }

    #[test]
    fn loss_decreases_on_copy_task() {
        let (pairs, v) = copy_task(50);
        let mut cfg = quick_cfg(ModelKind::Baseline, v);
        cfg.max_steps = 50;
        cfg.batch_size = 16;
        cfg.lr = 3e-3;
        let out = train::<f32>(&cfg, &pairs, &[], None, None).unwrap();
        let head: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = out.losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "head {} tail {}", head, tail);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (pairs, v) = copy_task(30);
        for kind in [ModelKind::Baseline, ModelKind::Sdec] {
            let cfg = quick_cfg(kind, v);
            let a = train::<f32>(&cfg, &pairs, &pairs[..8], None, None).unwrap();
            let b = train::<f32>(&cfg, &pairs, &pairs[..8], None, None).unwrap();
            assert_eq!(a.metrics_csv, b.metrics_csv, "kind {:?}", kind);
            for (x, y) in a.losses.iter().zip(&b.losses) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (pairs, v) = copy_task(30);
        let cfg = quick_cfg(ModelKind::Sdec, v);
        let dir = tempfile::tempdir().unwrap();
        let full = train::<f32>(&cfg, &pairs, &[], Some(dir.path()), None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.max_steps = 6;
        let half_dir = tempfile::tempdir().unwrap();
        train::<f32>(&half_cfg, &pairs, &[], Some(half_dir.path()), None).unwrap();
        let ck = load_checkpoint::<f32>(&half_dir.path().join("ckpt-final")).unwrap();
        assert_eq!(ck.opt.t, 6);
        let resumed = train::<f32>(&cfg, &pairs, &[], None, Some(ck)).unwrap();
        assert_eq!(resumed.losses.len(), 6);
        for (a, b) in full.losses[6..].iter().zip(&resumed.losses) {
            assert_eq!(a.to_bits(), b.to_bits(), "full {} resumed {}", a, b);
        }
    }

    #[test]
    fn kl_scale_logged_along_schedule() {
        let (pairs, v) = copy_task(30);
        let cfg = quick_cfg(ModelKind::Sdec, v);
        let out = train::<f32>(&cfg, &pairs, &[], None, None).unwrap();
        let rows: Vec<&str> = out.metrics_csv.lines().skip(1).collect();
        let scale_at = |row: &str| row.split(',').nth(4).unwrap().parse::<f64>().unwrap();
        assert_eq!(scale_at(rows[0]), 0.0);
        assert_eq!(scale_at(rows[5]), 0.5);
        assert_eq!(scale_at(rows[10]), 1.0);
        assert_eq!(scale_at(rows[11]), 1.0);
    }

    #[test]
    fn divergent_loss_aborts_keeping_checkpoint() {
        let (pairs, v) = copy_task(20);
        let mut cfg = quick_cfg(ModelKind::Baseline, v);
        cfg.max_steps = 1;
        cfg.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        train::<f32>(&cfg, &pairs, &[], Some(dir.path()), None).unwrap();
        let mut ck = load_checkpoint::<f32>(&dir.path().join("ckpt-final")).unwrap();
        let mut b = ck.params.get("out.b").unwrap().clone();
        b.data_mut()[0] = f32::NAN;
        ck.params.set("out.b", b).unwrap();

        cfg.max_steps = 2;
        let err = train::<f32>(&cfg, &pairs, &[], None, Some(ck));
        assert!(err.is_err());
        // the pre-divergence checkpoint is still on disk and loadable
        assert!(load_checkpoint::<f32>(&dir.path().join("ckpt-final")).is_ok());
    }

    #[test]
    fn metrics_header_matches_contract() {
        assert_eq!(METRICS_HEADER, "step,loss,recon,kl,kl_scale,dev_metric,wallclock_s");
    }
}
