//! Corpus evaluation: BLEU, position accuracy, length-bucketed reports,
//! decoding-speed benchmarks, and gate-saliency export.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DecodeConfig;
use crate::data::ParallelCorpus;
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, PolicySampling, UnrollOptions};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus-level BLEU in [0, 100]: case-insensitive clipped n-gram
/// precision geometric mean times the brevity penalty
/// `min(1, e^(1 - r/c))`. A zero precision at any order zeroes the score.
pub fn bleu(hypotheses: &[String], references: &[String], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("bleu: empty reference list".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut correct = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp: Vec<String> = hyp.to_lowercase().split_whitespace().map(str::to_string).collect();
        let rf: Vec<String> = reference
            .to_lowercase()
            .split_whitespace()
            .map(str::to_string)
            .collect();
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            total[n - 1] += (hyp.len() - n + 1) as u64;
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            if rf.len() >= n {
                for w in rf.windows(n) {
                    *ref_counts.entry(w).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for w in hyp.windows(n) {
                *hyp_counts.entry(w).or_insert(0) += 1;
            }
            for (gram, count) in hyp_counts {
                correct[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if correct[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (correct[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Position-wise token match rate of hypotheses against references,
/// measured over reference tokens.
pub fn position_accuracy(hypotheses: &[String], references: &[String]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        let hyp: Vec<&str> = hyp.split_whitespace().collect();
        let rf: Vec<&str> = rf.split_whitespace().collect();
        total += rf.len();
        hits += rf
            .iter()
            .zip(&hyp)
            .filter(|(a, b)| a == b)
            .count();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

// ── Corpus evaluation ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub bleu: f64,
    /// Position-match token accuracy of the decoded output, in [0, 1].
    pub accuracy: f64,
    /// Percent of decoding steps that refined.
    pub refine_rate: f64,
    pub hypothesis_count: usize,
}

/// Greedy-decodes the corpus and scores it.
pub fn evaluate_corpus(
    model: &Model,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    let (hyps, refs, stats) = decode_corpus(model, corpus, src_vocab, tgt_vocab, cfg)?;
    Ok(EvalReport {
        bleu: bleu(&hyps, &refs, 4)?,
        accuracy: position_accuracy(&hyps, &refs),
        refine_rate: stats.refine_rate(),
        hypothesis_count: hyps.len(),
    })
}

struct DecodeStats {
    refine_ops: usize,
    steps: usize,
}

impl DecodeStats {
    fn refine_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            100.0 * self.refine_ops as f64 / self.steps as f64
        }
    }
}

fn decode_corpus(
    model: &Model,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(Vec<String>, Vec<String>, DecodeStats)> {
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    let mut stats = DecodeStats {
        refine_ops: 0,
        steps: 0,
    };
    for (src_toks, tgt_toks) in &corpus.pairs {
        let src = src_vocab.ids(src_toks);
        let hyp = greedy_decode(model, &src, cfg)?;
        stats.refine_ops += hyp.refine_ops;
        stats.steps += hyp.steps();
        hyps.push(tgt_vocab.detokenize(&hyp.tokens));
        refs.push(tgt_toks.join(" "));
    }
    Ok((hyps, refs, stats))
}

// ── Length buckets ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BucketReport {
    /// Half-open source-length range `[lo, hi)`; `hi` absent for the top
    /// bucket.
    pub lo: usize,
    pub hi: Option<usize>,
    pub sentences: usize,
    pub bleu: f64,
    pub accuracy: f64,
}

impl BucketReport {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{}..{})", self.lo, hi),
            None => format!(">={}", self.lo),
        }
    }
}

/// Index of the bucket a source length falls into, for ascending edges.
pub fn bucket_index(len: usize, edges: &[usize]) -> usize {
    edges.iter().take_while(|&&e| len >= e).count()
}

/// Per-bucket corpus BLEU over sentences grouped by source length.
/// Empty buckets are absent from the result.
pub fn length_bucket_report(
    model: &Model,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    edges: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<BucketReport>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bucket edges must ascend".into()));
    }
    let (hyps, refs, _) = decode_corpus(model, corpus, src_vocab, tgt_vocab, cfg)?;
    let mut grouped: Vec<(Vec<String>, Vec<String>)> = vec![(vec![], vec![]); edges.len() + 1];
    for (i, (src_toks, _)) in corpus.pairs.iter().enumerate() {
        let b = bucket_index(src_toks.len(), edges);
        grouped[b].0.push(hyps[i].clone());
        grouped[b].1.push(refs[i].clone());
    }
    let mut out = Vec::new();
    for (b, (h, r)) in grouped.into_iter().enumerate() {
        if h.is_empty() {
            continue;
        }
        out.push(BucketReport {
            lo: if b == 0 { 0 } else { edges[b - 1] },
            hi: edges.get(b).copied(),
            sentences: h.len(),
            bleu: bleu(&h, &r, 4)?,
            accuracy: position_accuracy(&h, &r),
        });
    }
    Ok(out)
}

// ── Speed benchmark ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BenchResult {
    /// Median translated words per second over the timed repeats.
    pub words_per_sec: f64,
    /// Percent of decoding steps that refined.
    pub refine_rate: f64,
    pub words: usize,
    pub repeats: usize,
}

/// Times greedy decoding over the corpus. One untimed warm-up pass runs
/// first; the reported rate is the median over `repeats` passes.
pub fn speed_benchmark(
    model: &Model,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    cfg: &DecodeConfig,
    repeats: usize,
) -> Result<BenchResult> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let sources: Vec<Vec<u32>> = corpus
        .pairs
        .iter()
        .map(|(s, _)| src_vocab.ids(s))
        .collect();

    let run = |collect: &mut Option<&mut DecodeStats>| -> Result<(usize, f64)> {
        let started = Instant::now();
        let mut words = 0usize;
        for src in &sources {
            let hyp = greedy_decode(model, src, cfg)?;
            words += hyp.words();
            if let Some(stats) = collect.as_deref_mut() {
                stats.refine_ops += hyp.refine_ops;
                stats.steps += hyp.steps();
            }
        }
        Ok((words, started.elapsed().as_secs_f64()))
    };

    let mut stats = DecodeStats {
        refine_ops: 0,
        steps: 0,
    };
    run(&mut Some(&mut stats))?; // warm-up, not timed

    let mut rates = Vec::with_capacity(repeats);
    let mut words = 0;
    for _ in 0..repeats {
        let (w, secs) = run(&mut None)?;
        words = w;
        rates.push(w as f64 / secs.max(1e-9));
    }
    rates.sort_by(f64::total_cmp);
    let words_per_sec = if rates.len() % 2 == 1 {
        rates[rates.len() / 2]
    } else {
        0.5 * (rates[rates.len() / 2 - 1] + rates[rates.len() / 2])
    };
    Ok(BenchResult {
        words_per_sec,
        refine_rate: stats.refine_rate(),
        words,
        repeats,
    })
}

// ── Saliency ────────────────────────────────────────────────────────────

/// `(I, J)` matrix of per-step gate saliencies: entry `(i, j)` is the L1
/// norm over gate dimensions of `d(-log p(y_i)) / d z^i_j`, teacher-forced.
pub fn saliency_map(model: &Model, src: &[u32], tgt: &[u32]) -> Result<Tensor> {
    if model.refine_mode().is_none() {
        return Err(Error::InvalidArgument(
            "saliency requires a variant with a gate".into(),
        ));
    }
    if model.policy.is_some() {
        return Err(Error::InvalidArgument(
            "saliency is defined for the always-refining variants".into(),
        ));
    }
    let opts = UnrollOptions {
        dropout: 0.0,
        tau: 1.0,
        alpha: 0.0,
        policy: PolicySampling::Soft,
        deep_blend: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::train();
    let out = model.sentence_loss(&mut g, src, tgt, &opts, &mut rng)?;
    debug_assert_eq!(out.gates.len(), out.step_losses.len());

    let steps = out.step_losses.len();
    let positions = src.len();
    let mut data = vec![0.0; steps * positions];
    for i in 0..steps {
        g.backward(out.step_losses[i])?;
        let gate = out.gates[i];
        let cols = g.value(gate).cols();
        let grad = g.grad(gate);
        for j in 0..positions {
            data[i * positions + j] = grad[j * cols..(j + 1) * cols]
                .iter()
                .map(|v| v.abs())
                .sum();
        }
    }
    Tensor::new(steps, positions, data)
}

/// CSV rendering of a saliency matrix: one decoding step per row.
pub fn saliency_csv(map: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..map.rows() {
        let row: Vec<String> = map.row(r).iter().map(|v| format!("{v:.6e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Plain (P2) portable graymap of a saliency matrix, bright = salient.
pub fn saliency_pgm(map: &Tensor) -> String {
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", map.cols(), map.rows());
    for r in 0..map.rows() {
        let row: Vec<String> = map
            .row(r)
            .iter()
            .map(|&v| {
                let level = if max > 0.0 {
                    (255.0 * v / max).round() as u32
                } else {
                    0
                };
                level.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
