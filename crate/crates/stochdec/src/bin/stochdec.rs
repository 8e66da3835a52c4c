//! Command-line front end: corpus generation, training, translation,
//! latent sampling, ELBO evaluation, gradient checks, and the KL rate
//! diagnostic. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use stochdec::checkpoint::{load_checkpoint, LoadedCheckpoint};
use stochdec::corpus::{
    build_vocab, encode_pairs, generate_copy_corpus, generate_variation_corpus,
    read_parallel_corpus, write_parallel_corpus, Vocab,
};
use stochdec::decode::{beam_decode, default_max_len, greedy_decode, sample_translations};
use stochdec::gradcheck::{format_report, run_suite};
use stochdec::inference::{rate_diagnostic, sequence_elbo, ElboReport, InferenceNet, NoiseSource};
use stochdec::model::{Model, ModelKind};
use stochdec::optim::make_batches;
use stochdec::train::{train, TrainConfig};
use stochdec::{Error, Result};

#[derive(Parser)]
#[command(name = "stochdec", version, about = "Latent-variable sequence-to-sequence translation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus
    GenCorpus(GenCorpusArgs),
    /// Train a model and write a run directory
    Train(TrainArgs),
    /// Translate a file of source sentences with beam or greedy search
    Translate(TranslateArgs),
    /// Sample translations by drawing latent variables from the prior
    Sample(SampleArgs),
    /// Evaluate the unannealed ELBO over a parallel file
    Elbo(ElboArgs),
    /// Finite-difference gradient verification over all layer types
    Gradcheck(GradcheckArgs),
    /// KL rate diagnostic in nats per sentence and per token
    Rate(RateArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// copy or variation
    #[arg(long)]
    generator: String,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 200)]
    num_pairs: usize,
    /// Source length range for the copy generator
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    #[arg(long, default_value_t = 8)]
    len_max: usize,
    /// Valid targets per source for the variation generator
    #[arg(long, default_value_t = 2)]
    variants: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving corpus.src, corpus.tgt, corpus.meta
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    /// Run directory: resolved config, vocabularies, metrics, checkpoints
    #[arg(long)]
    out_dir: PathBuf,
    /// key=value file; flags below override keys of the same name
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
    /// baseline, sent, or sdec
    #[arg(long)]
    model: Option<String>,
    /// Vocabulary size cap, reserved ids included
    #[arg(long)]
    src_vocab: Option<usize>,
    #[arg(long)]
    tgt_vocab: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    dropout_retain: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    anneal_steps: Option<u64>,
    #[arg(long)]
    dev_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    record_wallclock: Option<bool>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Run directory produced by `train`
    #[arg(long)]
    model_dir: PathBuf,
    /// One source sentence per line
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5, conflicts_with = "greedy")]
    beam: usize,
    #[arg(long)]
    greedy: bool,
    /// Print the top K finished hypotheses as rank<TAB>score<TAB>tokens
    #[arg(long)]
    n_best: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    num_samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct ElboArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::GenCorpus(a) => run_gen_corpus(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Translate(a) => run_translate(a),
        Cmd::Sample(a) => run_sample(a),
        Cmd::Elbo(a) => run_elbo(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Rate(a) => run_rate(a),
    };
    if let Err(e) = res {
        eprintln!("error: {}", e);
        let usage = matches!(e, Error::Config(_) | Error::InvalidArgument(_));
        std::process::exit(if usage { 1 } else { 2 });
    }
}

fn run_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let corpus = match a.generator.as_str() {
        "copy" => generate_copy_corpus(a.vocab_size, a.num_pairs, (a.len_min, a.len_max), a.seed)?,
        "variation" => generate_variation_corpus(a.vocab_size, a.num_pairs, a.variants, a.seed)?,
        other => return Err(Error::invalid(format!("unknown generator `{}`", other))),
    };
    std::fs::create_dir_all(&a.out_dir)?;
    write_parallel_corpus(
        &corpus,
        &a.out_dir.join("corpus.src"),
        &a.out_dir.join("corpus.tgt"),
        &a.out_dir.join("corpus.meta"),
    )?;
    println!(
        "wrote {} pairs ({} generator) to {}",
        corpus.pairs.len(),
        corpus.meta.generator,
        a.out_dir.display()
    );
    Ok(())
}

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = stochdec::corpus::read_text_file(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad config line: {}", line)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut kv = match &a.config {
        Some(path) => read_kv_file(path)?,
        None => BTreeMap::new(),
    };
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    set("model", a.model.clone());
    set("src_vocab", a.src_vocab.map(|v| v.to_string()));
    set("tgt_vocab", a.tgt_vocab.map(|v| v.to_string()));
    set("embed_dim", a.embed_dim.map(|v| v.to_string()));
    set("units", a.units.map(|v| v.to_string()));
    set("attn_dim", a.attn_dim.map(|v| v.to_string()));
    set("latent_dim", a.latent_dim.map(|v| v.to_string()));
    set("dropout_retain", a.dropout_retain.map(|v| v.to_string()));
    set("seed", a.seed.map(|v| v.to_string()));
    set("lr", a.lr.map(|v| v.to_string()));
    set("clip_norm", a.clip_norm.map(|v| v.to_string()));
    set("batch_size", a.batch_size.map(|v| v.to_string()));
    set("max_steps", a.max_steps.map(|v| v.to_string()));
    set("anneal_steps", a.anneal_steps.map(|v| v.to_string()));
    set("dev_every", a.dev_every.map(|v| v.to_string()));
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    set("max_len", a.max_len.map(|v| v.to_string()));
    set("record_wallclock", a.record_wallclock.map(|v| v.to_string()));

    let kind = match kv.get("model") {
        Some(m) => ModelKind::parse(m).map_err(|e| Error::Config(e.to_string()))?,
        None => ModelKind::Baseline,
    };
    // vocab caps default high; the actual sizes come from the corpus
    let mut base = TrainConfig::desk_defaults(kind, 10_000, 10_000);
    base.model.src_vocab = 10_000;
    base.model.tgt_vocab = 10_000;
    let cap_cfg = TrainConfig::from_kv(&kv, base)?;

    let train_corpus = read_parallel_corpus(&a.train_src, &a.train_tgt)?;
    let src_vocab = build_vocab(train_corpus.sources(), cap_cfg.model.src_vocab)?;
    let tgt_vocab = build_vocab(train_corpus.targets(), cap_cfg.model.tgt_vocab)?;
    let mut cfg = cap_cfg;
    cfg.model.src_vocab = src_vocab.size();
    cfg.model.tgt_vocab = tgt_vocab.size();

    let train_pairs = encode_pairs(&train_corpus, &src_vocab, &tgt_vocab);
    let dev_pairs = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => encode_pairs(&read_parallel_corpus(s, t)?, &src_vocab, &tgt_vocab),
        (None, None) => Vec::new(),
        _ => return Err(Error::Config("--dev-src and --dev-tgt must be given together".into())),
    };
    let resume = match &a.resume {
        Some(dir) => Some(load_checkpoint::<f32>(dir)?),
        None => None,
    };

    std::fs::create_dir_all(&a.out_dir)?;
    src_vocab.write(&a.out_dir.join("src.vocab"))?;
    tgt_vocab.write(&a.out_dir.join("tgt.vocab"))?;
    let out = train::<f32>(&cfg, &train_pairs, &dev_pairs, Some(&a.out_dir), resume)?;
    if out.skipped_pairs > 0 {
        eprintln!("warning: skipped {} over-length pairs", out.skipped_pairs);
    }
    println!(
        "trained {} for {} steps, final loss {:.4}{}",
        cfg.model.kind.as_str(),
        cfg.max_steps,
        out.losses.last().copied().unwrap_or(f64::NAN),
        match out.last_dev_metric {
            Some(d) => format!(", dev metric {:.4}", d),
            None => String::new(),
        }
    );
    println!("run directory: {}", a.out_dir.display());
    Ok(())
}

struct LoadedModel {
    cfg: TrainConfig,
    model: Model,
    infnet: Option<InferenceNet>,
    ck: LoadedCheckpoint<f32>,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
}

fn load_model_dir(dir: &Path) -> Result<LoadedModel> {
    let kv = read_kv_file(&dir.join("config.txt"))?;
    let kind = match kv.get("model") {
        Some(m) => ModelKind::parse(m).map_err(|e| Error::Config(e.to_string()))?,
        None => return Err(Error::Config(format!("{}/config.txt lacks a model key", dir.display()))),
    };
    let cfg = TrainConfig::from_kv(&kv, TrainConfig::desk_defaults(kind, 4, 4))?;
    let model = Model::new(cfg.model.clone())?;
    let infnet = match cfg.model.kind {
        ModelKind::Baseline => None,
        _ => Some(InferenceNet::new(&cfg.model)?),
    };
    Ok(LoadedModel {
        ck: load_checkpoint::<f32>(&dir.join("ckpt-final"))?,
        src_vocab: Vocab::read(&dir.join("src.vocab"))?,
        tgt_vocab: Vocab::read(&dir.join("tgt.vocab"))?,
        cfg,
        model,
        infnet,
    })
}

fn read_source_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let text = stochdec::corpus::read_text_file(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(Error::Corpus(format!("{}: blank input line", path.display())));
        }
        out.push(vocab.encode(&toks));
    }
    Ok(out)
}

fn render(vocab: &Vocab, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

fn run_translate(a: TranslateArgs) -> Result<()> {
    let lm = load_model_dir(&a.model_dir)?;
    let sources = read_source_lines(&a.input, &lm.src_vocab)?;
    for src in &sources {
        let max_len = a.max_len.unwrap_or_else(|| default_max_len(src.len()));
        if a.greedy {
            let d = greedy_decode(&lm.model, &lm.ck.params, src, max_len)?;
            println!("{}", render(&lm.tgt_vocab, &d.tokens));
        } else {
            let (best, pool) = beam_decode(&lm.model, &lm.ck.params, src, a.beam, max_len)?;
            match a.n_best {
                None => println!("{}", render(&lm.tgt_vocab, &best.tokens)),
                Some(k) => {
                    for (rank, d) in pool.iter().take(k).enumerate() {
                        println!("{}\t{:.4}\t{}", rank + 1, d.score, render(&lm.tgt_vocab, &d.tokens));
                    }
                }
            }
        }
    }
    Ok(())
}

fn run_sample(a: SampleArgs) -> Result<()> {
    let lm = load_model_dir(&a.model_dir)?;
    let sources = read_source_lines(&a.input, &lm.src_vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for src in &sources {
        let max_len = a.max_len.unwrap_or_else(|| default_max_len(src.len()));
        let samples = sample_translations(&lm.model, &lm.ck.params, src, a.num_samples, &mut rng, max_len)?;
        for d in &samples {
            println!("{}", render(&lm.tgt_vocab, &d.tokens));
        }
    }
    Ok(())
}

fn load_eval_batches(lm: &LoadedModel, src: &Path, tgt: &Path, seed: u64) -> Result<Vec<stochdec::data::TokenBatch>> {
    let corpus = read_parallel_corpus(src, tgt)?;
    let pairs = encode_pairs(&corpus, &lm.src_vocab, &lm.tgt_vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batches, skipped) = make_batches(&pairs, lm.cfg.batch_size, lm.cfg.max_len, &mut rng)?;
    if skipped > 0 {
        eprintln!("warning: skipped {} over-length pairs", skipped);
    }
    Ok(batches)
}

fn run_elbo(a: ElboArgs) -> Result<()> {
    let lm = load_model_dir(&a.model_dir)?;
    let infnet = lm
        .infnet
        .as_ref()
        .ok_or_else(|| Error::invalid("elbo requires a latent model (sent or sdec)"))?;
    let batches = load_eval_batches(&lm, &a.src, &a.tgt, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut recon = Vec::new();
    let mut kl = Vec::new();
    let mut tokens = 0usize;
    for batch in &batches {
        let tape = stochdec::autodiff::Tape::new(lm.ck.params.bindings());
        let mut noise = NoiseSource::Rng(&mut rng);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = sequence_elbo(&lm.model, infnet, &tape, batch, &mut noise, 1.0, &mut drop_rng, false)?;
        recon.extend(out.report.recon);
        kl.extend(out.report.kl);
        tokens += out.report.tokens;
    }
    let sentences = recon.len();
    let report = ElboReport {
        scaled_elbo: recon.iter().sum::<f64>() - kl.iter().sum::<f64>(),
        unscaled_elbo: recon.iter().sum::<f64>() - kl.iter().sum::<f64>(),
        recon,
        kl,
        kl_scale: 1.0,
        sentences,
        tokens,
    };
    println!("{}", ElboReport::csv_header());
    println!("{}", report.csv_row(lm.ck.opt.t));
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = run_suite(a.seed)?;
    print!("{}", format_report(a.seed, &entries));
    Ok(())
}

fn run_rate(a: RateArgs) -> Result<()> {
    let lm = load_model_dir(&a.model_dir)?;
    let infnet = lm
        .infnet
        .as_ref()
        .ok_or_else(|| Error::invalid("rate requires a latent model (sent or sdec)"))?;
    let batches = load_eval_batches(&lm, &a.src, &a.tgt, a.seed)?;
    let report = rate_diagnostic(&lm.model, infnet, &lm.ck.params, &batches, a.seed)?;
    println!("nats_per_sentence {:.6}", report.nats_per_sentence);
    println!("nats_per_token {:.6}", report.nats_per_token);
    Ok(())
}
