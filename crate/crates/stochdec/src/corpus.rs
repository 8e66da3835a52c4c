//! Synthetic parallel corpora, vocabularies, and corpus file I/O.
//!
//! Two generators: a copy task (target equals source) for learnability
//! checks, and a variation task where every source has several equally
//! valid targets, so the translation distribution is genuinely
//! multimodal. Variants of one source always have equal length, so a
//! model cannot fake variation capture by modeling length.

use crate::data::{NUM_RESERVED, UNK};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusMeta {
    pub generator: String,
    pub seed: u64,
    pub variants: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub meta: CorpusMeta,
}

impl ParallelCorpus {
    pub fn sources(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|p| &p.0)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().map(|p| &p.1)
    }
}

/// Uniform random sentences with `tgt == src`. `vocab_size` counts the
/// four reserved ids, so `vocab_size - 4` distinct surface tokens.
pub fn generate_copy_corpus(
    vocab_size: usize,
    num_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size < 5 {
        return Err(Error::invalid("copy corpus needs vocab_size >= 5"));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::invalid(format!("invalid length range {}..{}", lo, hi)));
    }
    if num_pairs == 0 {
        return Err(Error::invalid("num_pairs must be positive"));
    }
    let content = vocab_size - NUM_RESERVED;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..num_pairs)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            let sent: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..content))).collect();
            (sent.clone(), sent)
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        meta: CorpusMeta {
            generator: "copy".into(),
            seed,
            variants: 1,
        },
    })
}

const VARIATION_GROUPS: usize = 3;
const VARIATION_SRC_LEN: usize = 3;

/// Number of distinct block-translation tokens available at this vocab
/// size once synonym groups and agreement tokens are budgeted.
fn variation_block_inventory(vocab_size: usize, variants: usize) -> Result<usize> {
    let content = vocab_size.saturating_sub(NUM_RESERVED);
    let overhead = VARIATION_GROUPS * variants + VARIATION_GROUPS;
    if content < overhead + VARIATION_SRC_LEN {
        return Err(Error::invalid(format!(
            "vocab too small for disjoint variant lexicons: {} content tokens, need > {}",
            content,
            overhead + VARIATION_SRC_LEN - 1
        )));
    }
    Ok(content - overhead)
}

/// The full valid target set for one variation-corpus source. Variants
/// differ by the synonym chosen for the final content slot and by the
/// order of the two translation blocks; the trailing agreement token
/// (determined by the source's synonym group) is identical across
/// variants. All variants have equal length.
pub fn variation_targets(src: &[String], variants: usize, vocab_size: usize) -> Result<Vec<Vec<String>>> {
    let m = variation_block_inventory(vocab_size, variants)?;
    if src.len() != VARIATION_SRC_LEN {
        return Err(Error::invalid(format!(
            "variation sources have {} tokens, got {}",
            VARIATION_SRC_LEN,
            src.len()
        )));
    }
    let idx = |tok: &String| -> Result<usize> {
        tok.strip_prefix('s')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&i| i < m)
            .ok_or_else(|| Error::invalid(format!("token {} is not a variation source token", tok)))
    };
    let ids: Vec<usize> = src.iter().map(idx).collect::<Result<_>>()?;
    let group = ids.iter().sum::<usize>() % VARIATION_GROUPS;
    let block_a = vec![format!("t{}", ids[0])];
    let block_b = vec![format!("t{}", ids[1]), format!("t{}", ids[2])];
    let mut out = Vec::with_capacity(variants);
    for j in 0..variants {
        let mut tgt = Vec::with_capacity(VARIATION_SRC_LEN + 2);
        if j % 2 == 0 {
            tgt.extend(block_a.iter().cloned());
            tgt.extend(block_b.iter().cloned());
        } else {
            tgt.extend(block_b.iter().cloned());
            tgt.extend(block_a.iter().cloned());
        }
        tgt.push(format!("y{}x{}", group, j));
        tgt.push(format!("a{}", group));
        out.push(tgt);
    }
    Ok(out)
}

/// `floor(num_pairs / variants)` distinct sources, each emitted once per
/// variant. Which variant a pair uses is not recoverable from its
/// source; only the variant set is.
pub fn generate_variation_corpus(
    vocab_size: usize,
    num_pairs: usize,
    variants_per_source: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if variants_per_source < 2 {
        return Err(Error::invalid("variants_per_source must be >= 2"));
    }
    let m = variation_block_inventory(vocab_size, variants_per_source)?;
    let num_sources = num_pairs / variants_per_source;
    if num_sources == 0 {
        return Err(Error::invalid("num_pairs too small for one full variant cycle"));
    }
    let capacity = m * m * m;
    if num_sources > capacity / 2 {
        return Err(Error::invalid(format!(
            "cannot draw {} distinct sources from {} combinations",
            num_sources, capacity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut sources = Vec::with_capacity(num_sources);
    while sources.len() < num_sources {
        let ids: Vec<usize> = (0..VARIATION_SRC_LEN).map(|_| rng.gen_range(0..m)).collect();
        if seen.insert(ids.clone()) {
            sources.push(ids.iter().map(|i| format!("s{}", i)).collect::<Vec<String>>());
        }
    }
    let mut pairs = Vec::with_capacity(num_sources * variants_per_source);
    for src in &sources {
        let targets = variation_targets(src, variants_per_source, vocab_size)?;
        for tgt in targets {
            pairs.push((src.clone(), tgt));
        }
    }
    pairs.shuffle(&mut rng);
    Ok(ParallelCorpus {
        pairs,
        meta: CorpusMeta {
            generator: "variation".into(),
            seed,
            variants: variants_per_source,
        },
    })
}

/// Token inventory with the four reserved ids first, then corpus tokens
/// ranked by frequency (ties broken lexicographically).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line, id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        let text = read_text_file(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED] != RESERVED_TOKENS.map(str::to_string)
        {
            return Err(Error::Corpus(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.chars().any(char::is_whitespace) || t.is_empty() {
                return Err(Error::Corpus(format!("{}: bad token on line {}", path.display(), i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("{}: duplicate token {}", path.display(), t)));
            }
        }
        Ok(Vocab { tokens, ids })
    }
}

pub fn build_vocab<'a, I>(sentences: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    if max_size <= NUM_RESERVED {
        return Err(Error::invalid("vocab max_size must exceed the reserved ids"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any = false;
    for sent in sentences {
        any = true;
        for tok in sent {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - NUM_RESERVED)
            .map(|(t, _)| t.to_string()),
    );
    let ids = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    Ok(Vocab { tokens, ids })
}

/// Id-space pairs ready for batching.
pub fn encode_pairs(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect()
}

pub fn write_parallel_corpus(
    corpus: &ParallelCorpus,
    src_path: &Path,
    tgt_path: &Path,
    meta_path: &Path,
) -> Result<()> {
    let mut src = std::io::BufWriter::new(std::fs::File::create(src_path)?);
    let mut tgt = std::io::BufWriter::new(std::fs::File::create(tgt_path)?);
    for (s, t) in &corpus.pairs {
        writeln!(src, "{}", s.join(" "))?;
        writeln!(tgt, "{}", t.join(" "))?;
    }
    src.flush()?;
    tgt.flush()?;
    std::fs::write(
        meta_path,
        format!(
            "generator={}\nseed={}\nvariants={}\n",
            corpus.meta.generator, corpus.meta.seed, corpus.meta.variants
        ),
    )?;
    Ok(())
}

/// `read_to_string` with the path folded into the error, so a missing
/// file names what was missing.
pub fn read_text_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Corpus(format!("{}: {}", path.display(), e)))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_text_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(Error::Corpus(format!("{}: blank line {}", path.display(), i + 1)));
        }
        out.push(toks);
    }
    Ok(out)
}

pub fn read_parallel_corpus(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Corpus(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(ParallelCorpus {
        pairs: src.into_iter().zip(tgt).collect(),
        meta: CorpusMeta {
            generator: "file".into(),
            seed: 0,
            variants: 0,
        },
    })
}

pub fn read_corpus_meta(path: &Path) -> Result<CorpusMeta> {
    let text = read_text_file(path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corpus(format!("bad meta line: {}", line)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Corpus(format!("meta missing key {}", k)));
    Ok(CorpusMeta {
        generator: get("generator")?.clone(),
        seed: get("seed")?.parse().map_err(|_| Error::Corpus("bad seed in meta".into()))?,
        variants: get("variants")?.parse().map_err(|_| Error::Corpus("bad variants in meta".into()))?,
    })
}

/// Count-based empirical conditional entropy H(target | source) in nats.
pub fn conditional_entropy(corpus: &ParallelCorpus) -> f64 {
    let mut by_src: BTreeMap<&[String], BTreeMap<&[String], usize>> = BTreeMap::new();
    for (s, t) in &corpus.pairs {
        *by_src.entry(s.as_slice()).or_default().entry(t.as_slice()).or_insert(0) += 1;
    }
    let total = corpus.pairs.len() as f64;
    let mut h = 0.0;
    for counts in by_src.values() {
        let n: usize = counts.values().sum();
        let p_src = n as f64 / total;
        let mut h_given = 0.0;
        for &c in counts.values() {
            let p = c as f64 / n as f64;
            h_given -= p * p.ln();
        }
        h += p_src * h_given;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, EOS, PAD};

    #[test]
    fn copy_corpus_is_copy_and_deterministic() {
        let c1 = generate_copy_corpus(20, 50, (3, 8), 7).unwrap();
        let c2 = generate_copy_corpus(20, 50, (3, 8), 7).unwrap();
        assert_eq!(c1, c2);
        for (s, t) in &c1.pairs {
            assert_eq!(s, t);
            assert!((3..=8).contains(&s.len()));
        }
        assert_ne!(c1, generate_copy_corpus(20, 50, (3, 8), 8).unwrap());
        assert!(generate_copy_corpus(4, 10, (3, 8), 0).is_err());
        assert!(generate_copy_corpus(20, 10, (5, 3), 0).is_err());
    }

    #[test]
    fn copy_corpus_length_distribution_is_flat() {
        let c = generate_copy_corpus(20, 10_000, (3, 8), 1).unwrap();
        let mut counts = [0usize; 6];
        for (s, _) in &c.pairs {
            counts[s.len() - 3] += 1;
        }
        let expected = 10_000.0 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 5 degrees of freedom; 99.9th percentile is about 20.5
        assert!(chi2 < 20.5, "chi2 = {}", chi2);
    }

    #[test]
    fn variation_corpus_structure() {
        let k = 2;
        let vocab = 24;
        let c = generate_variation_corpus(vocab, 100, k, 3).unwrap();
        assert_eq!(c.pairs.len(), 100);
        let mut by_src: BTreeMap<&[String], Vec<&[String]>> = BTreeMap::new();
        for (s, t) in &c.pairs {
            by_src.entry(s).or_default().push(t);
        }
        assert_eq!(by_src.len(), 50);
        for (src, tgts) in &by_src {
            assert_eq!(tgts.len(), k);
            let distinct: std::collections::BTreeSet<_> = tgts.iter().collect();
            assert_eq!(distinct.len(), k, "source {:?} lacks distinct targets", src);
            let lens: std::collections::BTreeSet<_> = tgts.iter().map(|t| t.len()).collect();
            assert_eq!(lens.len(), 1, "variant lengths differ for {:?}", src);
            let agreements: std::collections::BTreeSet<_> = tgts.iter().map(|t| t.last().unwrap()).collect();
            assert_eq!(agreements.len(), 1, "agreement token varies for {:?}", src);
            let expected = variation_targets(src, k, vocab).unwrap();
            for t in tgts {
                assert!(expected.iter().any(|e| e.as_slice() == *t));
            }
        }
    }

    #[test]
    fn variation_corpus_entropy_is_log_k() {
        for k in [2usize, 3] {
            let c = generate_variation_corpus(30, 120, k, 5).unwrap();
            let h = conditional_entropy(&c);
            assert!(h >= (k as f64).ln() - 0.01, "H = {} for k = {}", h, k);
        }
    }

    #[test]
    fn variation_corpus_rejects_small_vocab() {
        let err = generate_variation_corpus(12, 20, 2, 0).unwrap_err();
        assert!(format!("{}", err).contains("vocab too small"));
        assert!(generate_variation_corpus(30, 20, 1, 0).is_err());
    }

    #[test]
    fn vocab_ordering_and_roundtrip() {
        let sents = vec![
            vec!["a".to_string(), "a".to_string(), "b".to_string()],
            vec!["c".to_string(), "b".to_string(), "b".to_string()],
        ];
        let v = build_vocab(&sents, 100).unwrap();
        // b:3 a:2 c:1
        assert_eq!(v.id("b"), NUM_RESERVED);
        assert_eq!(v.id("a"), NUM_RESERVED + 1);
        assert_eq!(v.id("c"), NUM_RESERVED + 2);
        assert_eq!(v.id("zzz"), UNK);
        for s in &sents {
            assert_eq!(v.decode(&v.encode(s)), *s);
        }
        assert!([PAD, BOS, EOS, UNK].iter().all(|&r| v.token(r).starts_with('<')));

        let truncated = build_vocab(&sents, NUM_RESERVED + 1).unwrap();
        assert_eq!(truncated.size(), NUM_RESERVED + 1);
        assert_eq!(truncated.id("a"), UNK);
    }

    #[test]
    fn vocab_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let sents = vec![vec!["a".to_string(), "b".to_string()]];
        let v = build_vocab(&sents, 100).unwrap();
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);

        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocab::read(&path).is_err());
        std::fs::write(&path, "<pad>\n<bos>\n<eos>\n<unk>\na\na\n").unwrap();
        assert!(format!("{}", Vocab::read(&path).unwrap_err()).contains("duplicate"));
    }

    #[test]
    fn corpus_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, tp, mp) = (dir.path().join("c.src"), dir.path().join("c.tgt"), dir.path().join("c.meta"));
        let c = generate_variation_corpus(24, 20, 2, 9).unwrap();
        write_parallel_corpus(&c, &sp, &tp, &mp).unwrap();
        let back = read_parallel_corpus(&sp, &tp).unwrap();
        assert_eq!(back.pairs, c.pairs);
        let meta = read_corpus_meta(&mp).unwrap();
        assert_eq!(meta, c.meta);

        std::fs::write(&tp, "only one line\n").unwrap();
        let err = read_parallel_corpus(&sp, &tp).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("20") && msg.contains('1'), "{}", msg);

        std::fs::write(&tp, "x\n\ny\n").unwrap();
        let err = read_parallel_corpus(&tp, &tp).unwrap_err();
        assert!(format!("{}", err).contains("line 2"));
    }
}
