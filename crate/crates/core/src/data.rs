//! Synthetic parallel corpora, batching, and corpus IO.
//!
//! Four generation tasks stand in for real bilingual data:
//!   copy              target repeats the source
//!   reverse           target is the source reversed
//!   swap-lexicon      word-for-word translation through a fixed lexicon
//!   ambiguous-lexicon like swap-lexicon, but homograph tokens translate
//!                     differently depending on a marker token placed
//!                     elsewhere in the sentence
//!
//! Corpora are stored as two aligned UTF-8 files (`.src`, `.tgt`), one
//! space-separated sentence per line, plus a small `key = value` manifest
//! recording the generation parameters.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, write_kv_file};
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    SwapLexicon,
    AmbiguousLexicon,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Copy,
        Task::Reverse,
        Task::SwapLexicon,
        Task::AmbiguousLexicon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::SwapLexicon => "swap-lexicon",
            Task::AmbiguousLexicon => "ambiguous-lexicon",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown task {s:?}, expected one of: {}",
                    Task::ALL.map(|t| t.name()).join(", ")
                ))
            })
    }
}

/// Generation parameters; regenerating from the same spec reproduces the
/// corpus byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub task: Task,
    pub n: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub spec: Option<CorpusSpec>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_sentences(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn target_sentences(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }
}

// ── Token inventory for the lexicon tasks ───────────────────────────────

/// How the source vocabulary is split for the ambiguous-lexicon task.
/// Markers and homographs are kept scarce in type count but homographs are
/// drawn often, so most sentences hinge on the marker.
struct Inventory {
    markers: Vec<String>,
    homographs: Vec<String>,
    regular: Vec<String>,
}

const MARKER_TYPES: usize = 3;
/// Probability that a non-marker position draws a homograph.
const HOMOGRAPH_DENSITY: f64 = 0.4;

impl Inventory {
    fn build(vocab_size: usize) -> Result<Inventory> {
        // need at least one of each class
        if vocab_size < MARKER_TYPES + 2 {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} too small for the ambiguous-lexicon task"
            )));
        }
        let homograph_count = ((vocab_size - MARKER_TYPES) / 3).max(1);
        let regular_count = vocab_size - MARKER_TYPES - homograph_count;
        Ok(Inventory {
            markers: (0..MARKER_TYPES).map(|i| format!("m{i}")).collect(),
            homographs: (0..homograph_count).map(|i| format!("x{i}")).collect(),
            regular: (0..regular_count).map(|i| format!("w{i}")).collect(),
        })
    }
}

// ── Generation ──────────────────────────────────────────────────────────

pub fn gen_corpus(spec: &CorpusSpec) -> Result<ParallelCorpus> {
    if spec.len_lo < 1 || spec.len_hi > 50 || spec.len_lo > spec.len_hi {
        return Err(Error::InvalidArgument(format!(
            "length range {}..={} outside (1, 50]",
            spec.len_lo, spec.len_hi
        )));
    }
    if spec.n == 0 {
        return Err(Error::InvalidArgument("corpus size must be >= 1".into()));
    }
    if spec.vocab_size < 2 {
        return Err(Error::InvalidArgument("vocab size must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let len = rng.gen_range(spec.len_lo..=spec.len_hi);
        let src = sample_source(spec, len, &mut rng)?;
        let tgt = oracle_translate(spec.task, &src)?;
        pairs.push((src, tgt));
    }
    Ok(ParallelCorpus {
        pairs,
        spec: Some(spec.clone()),
    })
}

fn sample_source(spec: &CorpusSpec, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    match spec.task {
        Task::Copy | Task::Reverse | Task::SwapLexicon => Ok((0..len)
            .map(|_| format!("v{}", rng.gen_range(0..spec.vocab_size)))
            .collect()),
        Task::AmbiguousLexicon => {
            let inv = Inventory::build(spec.vocab_size)?;
            let marker_pos = rng.gen_range(0..len);
            let marker = inv.markers[rng.gen_range(0..inv.markers.len())].clone();
            let mut sent = Vec::with_capacity(len);
            for pos in 0..len {
                if pos == marker_pos {
                    sent.push(marker.clone());
                } else if rng.gen::<f64>() < HOMOGRAPH_DENSITY {
                    sent.push(inv.homographs[rng.gen_range(0..inv.homographs.len())].clone());
                } else {
                    sent.push(inv.regular[rng.gen_range(0..inv.regular.len())].clone());
                }
            }
            Ok(sent)
        }
    }
}

/// Replays the task's generative rule: the reference translation of a
/// source sentence. Scores BLEU 100 against any corpus the same task
/// generated.
pub fn oracle_translate(task: Task, src: &[String]) -> Result<Vec<String>> {
    match task {
        Task::Copy => Ok(src.to_vec()),
        Task::Reverse => Ok(src.iter().rev().cloned().collect()),
        Task::SwapLexicon => Ok(src.iter().map(|t| format!("t{t}")).collect()),
        Task::AmbiguousLexicon => {
            let sense = src
                .iter()
                .find(|t| t.starts_with('m'))
                .map(|t| t[1..].to_string())
                .ok_or_else(|| Error::Data("ambiguous-lexicon sentence has no marker".into()))?;
            Ok(src
                .iter()
                .map(|t| {
                    if t.starts_with('x') {
                        format!("t{t}_{sense}")
                    } else {
                        format!("t{t}")
                    }
                })
                .collect())
        }
    }
}

// ── Corpus IO ───────────────────────────────────────────────────────────

/// Writes `<prefix>.src`, `<prefix>.tgt`, and `<prefix>.manifest` when the
/// generation parameters are known.
pub fn save_corpus(corpus: &ParallelCorpus, prefix: &Path) -> Result<()> {
    let write_side = |ext: &str, side: fn(&(Vec<String>, Vec<String>)) -> &Vec<String>| {
        let path = prefix.with_extension(ext);
        let mut text = String::new();
        for pair in &corpus.pairs {
            text.push_str(&side(pair).join(" "));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write_side("src", |p| &p.0)?;
    write_side("tgt", |p| &p.1)?;
    if let Some(spec) = &corpus.spec {
        write_manifest(spec, &prefix.with_extension("manifest"))?;
    }
    Ok(())
}

pub fn load_corpus(prefix: &Path) -> Result<ParallelCorpus> {
    let read_side = |ext: &str| -> Result<Vec<Vec<String>>> {
        let path = prefix.with_extension(ext);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(text
            .lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    };
    let src = read_side("src")?;
    let tgt = read_side("tgt")?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{}: source has {} sentences but target has {}",
            prefix.display(),
            src.len(),
            tgt.len()
        )));
    }
    let pairs: Vec<_> = src.into_iter().zip(tgt).collect();
    if let Some((i, _)) = pairs
        .iter()
        .enumerate()
        .find(|(_, (s, t))| s.is_empty() || t.is_empty())
    {
        return Err(Error::Data(format!(
            "{}: empty sentence at line {}",
            prefix.display(),
            i + 1
        )));
    }
    let spec = read_manifest(&prefix.with_extension("manifest")).ok();
    Ok(ParallelCorpus { pairs, spec })
}

pub fn write_manifest(spec: &CorpusSpec, path: &Path) -> Result<()> {
    write_kv_file(
        path,
        &[
            ("task", spec.task.to_string()),
            ("n", spec.n.to_string()),
            ("len-lo", spec.len_lo.to_string()),
            ("len-hi", spec.len_hi.to_string()),
            ("vocab-size", spec.vocab_size.to_string()),
            ("seed", spec.seed.to_string()),
        ],
    )
}

pub fn read_manifest(path: &Path) -> Result<CorpusSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map =
        parse_kv(&text).map_err(|m| Error::Data(format!("{}: {m}", path.display())))?;
    let get = |key: &str| -> Result<&String> {
        map.get(key)
            .ok_or_else(|| Error::Data(format!("{}: missing key {key:?}", path.display())))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: invalid {key:?}", path.display())))
    };
    Ok(CorpusSpec {
        task: get("task")?.parse()?,
        n: parse_usize("n")?,
        len_lo: parse_usize("len-lo")?,
        len_hi: parse_usize("len-hi")?,
        vocab_size: parse_usize("vocab-size")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Data(format!("{}: invalid seed", path.display())))?,
    })
}

// ── Batching ────────────────────────────────────────────────────────────

/// Padded id matrices for one mini-batch. PAD appears only beyond each
/// recorded length; targets carry no BOS/EOS here (framing happens in the
/// unroll).
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Unpadded id slices for sentence `i`.
    pub fn sentence(&self, i: usize) -> (&[u32], &[u32]) {
        (
            &self.src[i][..self.src_lens[i]],
            &self.tgt[i][..self.tgt_lens[i]],
        )
    }
}

/// Buckets sentences by source length (to limit padding), cuts batches,
/// then shuffles the batch order.
pub fn make_batches(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut indexed: Vec<(usize, &(Vec<String>, Vec<String>))> =
        corpus.pairs.iter().enumerate().collect();
    indexed.sort_by_key(|(i, (s, _))| (s.len(), *i));

    let mut batches = Vec::new();
    for chunk in indexed.chunks(batch_size) {
        let max_src = chunk.iter().map(|(_, (s, _))| s.len()).max().unwrap();
        let max_tgt = chunk.iter().map(|(_, (_, t))| t.len()).max().unwrap();
        let mut batch = Batch {
            src: Vec::with_capacity(chunk.len()),
            tgt: Vec::with_capacity(chunk.len()),
            src_lens: Vec::with_capacity(chunk.len()),
            tgt_lens: Vec::with_capacity(chunk.len()),
        };
        for (_, (s, t)) in chunk {
            let mut src_ids = src_vocab.ids(s);
            let mut tgt_ids = tgt_vocab.ids(t);
            batch.src_lens.push(src_ids.len());
            batch.tgt_lens.push(tgt_ids.len());
            src_ids.resize(max_src, PAD);
            tgt_ids.resize(max_tgt, PAD);
            batch.src.push(src_ids);
            batch.tgt.push(tgt_ids);
        }
        batches.push(batch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Frames a target-id sequence as decoder input/gold pairs.
pub fn frame_target(tgt: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let inputs = std::iter::once(BOS).chain(tgt.iter().copied()).collect();
    let golds = tgt.iter().copied().chain(std::iter::once(EOS)).collect();
    (inputs, golds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> CorpusSpec {
        CorpusSpec {
            task,
            n: 50,
            len_lo: 3,
            len_hi: 9,
            vocab_size: 20,
            seed: 123,
        }
    }

    #[test]
    fn copy_and_reverse_rules() {
        let src: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(oracle_translate(Task::Copy, &src).unwrap(), src);
        let rev: Vec<String> = ["c", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(oracle_translate(Task::Reverse, &src).unwrap(), rev);
    }

    #[test]
    fn ambiguous_marker_selects_sense() {
        let s1: Vec<String> = ["m1", "w0", "x2"].iter().map(|s| s.to_string()).collect();
        let t1 = oracle_translate(Task::AmbiguousLexicon, &s1).unwrap();
        assert_eq!(t1, vec!["tm1", "tw0", "tx2_1"]);
        let s2: Vec<String> = ["m2", "w0", "x2"].iter().map(|s| s.to_string()).collect();
        let t2 = oracle_translate(Task::AmbiguousLexicon, &s2).unwrap();
        assert_eq!(t2, vec!["tm2", "tw0", "tx2_2"]);
    }

    #[test]
    fn generated_targets_match_rule_replay() {
        for task in Task::ALL {
            let corpus = gen_corpus(&spec(task)).unwrap();
            assert_eq!(corpus.len(), 50);
            for (src, tgt) in &corpus.pairs {
                assert_eq!(&oracle_translate(task, src).unwrap(), tgt, "{task}");
                assert!(!src.is_empty() && !tgt.is_empty());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_corpus(&spec(Task::AmbiguousLexicon)).unwrap();
        let b = gen_corpus(&spec(Task::AmbiguousLexicon)).unwrap();
        assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut s = spec(Task::Copy);
        s.len_lo = 0;
        assert!(gen_corpus(&s).is_err());
        let mut s = spec(Task::Copy);
        s.len_hi = 51;
        assert!(gen_corpus(&s).is_err());
        let mut s = spec(Task::Copy);
        s.len_lo = 9;
        s.len_hi = 3;
        assert!(gen_corpus(&s).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let corpus = gen_corpus(&spec(Task::AmbiguousLexicon)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("train");
        save_corpus(&corpus, &prefix).unwrap();
        let loaded = load_corpus(&prefix).unwrap();
        assert_eq!(loaded.pairs, corpus.pairs);
        assert_eq!(loaded.spec.as_ref(), corpus.spec.as_ref());

        // manifest replay regenerates the identical corpus
        let replay = gen_corpus(loaded.spec.as_ref().unwrap()).unwrap();
        assert_eq!(replay.pairs, corpus.pairs);
    }

    #[test]
    fn vocab_frequency_order_matches_counting_oracle() {
        let corpus = gen_corpus(&spec(Task::SwapLexicon)).unwrap();
        let sents = corpus.source_sentences();
        let vocab = Vocabulary::build(&sents, 1000).unwrap();
        let mut counts: std::collections::HashMap<String, u64> = Default::default();
        for s in &sents {
            for t in s {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        // ids after the reserved block must be sorted by (count desc, token)
        let mut last: Option<(u64, String)> = None;
        for id in 4..vocab.len() as u32 {
            let tok = vocab.token(id).to_string();
            let c = counts[&tok];
            if let Some((lc, lt)) = &last {
                assert!(*lc > c || (*lc == c && *lt < tok), "order violated at {tok}");
            }
            last = Some((c, tok));
        }
    }

    #[test]
    fn batches_preserve_tokens_and_pad_lightly() {
        let corpus = gen_corpus(&spec(Task::Copy)).unwrap();
        let sv = Vocabulary::build(&corpus.source_sentences(), 1000).unwrap();
        let tv = Vocabulary::build(&corpus.target_sentences(), 1000).unwrap();

        // batch-size 1: no padding at all
        let singles = make_batches(&corpus, &sv, &tv, 1, 7).unwrap();
        assert_eq!(singles.len(), corpus.len());
        for b in &singles {
            assert_eq!(b.len(), 1);
            assert!(b.src[0].iter().all(|&id| id != PAD));
        }

        let batches = make_batches(&corpus, &sv, &tv, 8, 7).unwrap();
        let total: usize = batches.iter().flat_map(|b| b.src_lens.iter()).sum();
        let expect: usize = corpus.pairs.iter().map(|(s, _)| s.len()).sum();
        assert_eq!(total, expect, "token count preserved");

        // PAD only beyond the recorded lengths
        for b in &batches {
            for i in 0..b.len() {
                let (s, _) = b.sentence(i);
                assert!(s.iter().all(|&id| id != PAD));
                assert!(b.src[i][b.src_lens[i]..].iter().all(|&id| id == PAD));
            }
        }

        // length bucketing keeps the padded fraction low
        let padded: usize = batches
            .iter()
            .map(|b| b.src.iter().map(|r| r.len()).sum::<usize>())
            .sum();
        let frac = 1.0 - total as f64 / padded as f64;
        assert!(frac < 0.30, "padding fraction {frac}");
    }

    #[test]
    fn frame_target_adds_bos_eos() {
        let (inp, gold) = frame_target(&[7, 8]);
        assert_eq!(inp, vec![BOS, 7, 8]);
        assert_eq!(gold, vec![7, 8, EOS]);
    }
}
