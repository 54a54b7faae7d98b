//! Loss construction, optimizer, and the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecodeConfig, TrainConfig};
use crate::data::{make_batches, ParallelCorpus};
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::graph::{Graph, NodeId};
use crate::model::{Model, PolicySampling, UnrollOptions};
use crate::params::{GradSet, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

// ── Loss ops ────────────────────────────────────────────────────────────

/// Mean over non-pad positions of `-log p(target)`. Distributions are
/// per-step `(1, V)` probability nodes.
pub fn nll_loss(
    g: &mut Graph,
    step_distributions: &[NodeId],
    targets: &[u32],
    pad_mask: &[bool],
) -> Result<NodeId> {
    if step_distributions.len() != targets.len() || targets.len() != pad_mask.len() {
        return Err(Error::InvalidArgument(format!(
            "nll_loss: {} distributions, {} targets, {} mask entries",
            step_distributions.len(),
            targets.len(),
            pad_mask.len()
        )));
    }
    let mut losses = Vec::new();
    for ((&dist, &target), &pad) in step_distributions.iter().zip(targets).zip(pad_mask) {
        if pad {
            continue;
        }
        let p = g.element(dist, target as usize)?;
        let lp = g.log(p)?;
        losses.push(g.affine(lp, -1.0, 0.0)?);
    }
    if losses.is_empty() {
        return Err(Error::InvalidArgument(
            "nll_loss: every position is padding".into(),
        ));
    }
    let stacked = g.concat_cols(&losses)?;
    g.mean(stacked)
}

/// NLL plus penalty.
pub fn total_loss(g: &mut Graph, nll: NodeId, penalty: NodeId) -> Result<NodeId> {
    g.add(nll, penalty)
}

/// Scales gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// RMSprop: `acc = rho * acc + (1 - rho) * g^2`,
/// `p -= lr * g / sqrt(acc + eps)`.
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        RmsProp {
            lr,
            rho: 0.95,
            eps: 1e-6,
            acc: store.iter().map(|(_, _, v)| vec![0.0; v.numel()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradSet) {
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let acc = &mut self.acc[id.0];
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            for ((a, &gv), pv) in acc.iter_mut().zip(g).zip(p.iter_mut()) {
                *a = self.rho * *a + (1.0 - self.rho) * gv * gv;
                *pv -= self.lr * gv / (*a + self.eps).sqrt();
            }
        }
    }

    /// Persists the accumulators in the checkpoint format, one record per
    /// parameter, same names and shapes.
    pub fn save_state(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let mut out = ParamStore::new();
        for (id, name, value) in store.iter() {
            let [r, c] = value.shape();
            out.add(name, Tensor::new(r, c, self.acc[id.0].clone())?);
        }
        out.save(path)
    }

    pub fn load_state(&mut self, store: &ParamStore, path: &Path) -> Result<()> {
        let loaded = ParamStore::load(path)?;
        let mut fresh = store.clone();
        fresh.load_values_from(&loaded)?;
        for (id, _, value) in fresh.iter() {
            self.acc[id.0] = value.data().to_vec();
        }
        Ok(())
    }
}

// ── Metrics ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_acc: f64,
    pub dev_nll: f64,
    pub dev_acc: f64,
    pub dev_bleu: f64,
    /// Percent of decoding steps choosing REFINE on the dev set (100 for
    /// always-refining variants, 0 for the baselines).
    pub refine_rate: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,nll,token_accuracy,bleu,refine_rate,wall_seconds";

impl EpochMetrics {
    pub fn csv_rows(&self) -> String {
        format!(
            "{e},train,{tn:.6},{ta:.6},,,{w:.3}\n{e},dev,{dn:.6},{da:.6},{b:.4},{r:.2},{w:.3}\n",
            e = self.epoch,
            tn = self.train_nll,
            ta = self.train_acc,
            dn = self.dev_nll,
            da = self.dev_acc,
            b = self.dev_bleu,
            r = self.refine_rate,
            w = self.wall_seconds,
        )
    }
}

/// Reads dev rows back from a metrics CSV (for resuming).
pub fn read_dev_metrics(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields[1] != "dev" {
            continue;
        }
        let epoch: usize = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad epoch {:?}", path.display(), fields[0])))?;
        let nll: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad nll {:?}", path.display(), fields[2])))?;
        rows.push((epoch, nll));
    }
    Ok(rows)
}

// ── Training loop ───────────────────────────────────────────────────────

pub struct TrainJob<'a> {
    pub train: &'a ParallelCorpus,
    pub dev: &'a ParallelCorpus,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub cfg: &'a TrainConfig,
    /// When set, checkpoints and metrics are written here.
    pub out_dir: Option<&'a Path>,
}

/// Progress carried across resumed runs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_epoch: usize,
    pub best_dev_nll: f64,
    pub bad_evals: usize,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            next_epoch: 0,
            best_dev_nll: f64::INFINITY,
            bad_evals: 0,
        }
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_nll: f64,
    pub stopped_early: bool,
}

pub fn best_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.ckpt")
}

pub fn last_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("model.last.ckpt")
}

pub fn optimizer_state_path(dir: &Path) -> PathBuf {
    dir.join("optimizer.last.ckpt")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

/// Trains `model` in place. On return the model holds the parameters of
/// the best dev-NLL epoch; when `out_dir` is set, the best and last
/// checkpoints, optimizer state, and metrics CSV are persisted.
pub fn train(
    model: &mut Model,
    optimizer: &mut RmsProp,
    job: &TrainJob,
    state: TrainState,
) -> Result<TrainOutcome> {
    job.cfg.validate()?;
    let cfg = job.cfg;
    let trainable: ParallelCorpus = ParallelCorpus {
        pairs: job
            .train
            .pairs
            .iter()
            .filter(|(s, t)| s.len() <= cfg.max_len && t.len() <= cfg.max_len)
            .cloned()
            .collect(),
        spec: job.train.spec.clone(),
    };
    if trainable.is_empty() {
        return Err(Error::Data(format!(
            "no training sentences within max-len {}",
            cfg.max_len
        )));
    }

    let mut best_dev_nll = state.best_dev_nll;
    let mut best_epoch = state.next_epoch.saturating_sub(1);
    let mut best_params: Option<ParamStore> = None;
    let mut bad_evals = state.bad_evals;
    let mut history = Vec::new();
    let mut stopped_early = false;

    if let Some(dir) = job.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = metrics_path(dir);
        if !metrics.exists() {
            std::fs::write(&metrics, format!("{METRICS_HEADER}\n"))
                .map_err(|e| Error::io(&metrics, e))?;
        }
    }

    for epoch in state.next_epoch..state.next_epoch + cfg.epochs {
        let started = Instant::now();
        let tau = cfg.tau.at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        let batches = make_batches(
            &trainable,
            job.src_vocab,
            job.tgt_vocab,
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64),
        )?;

        let opts = UnrollOptions {
            dropout: cfg.dropout,
            tau,
            alpha: cfg.alpha,
            policy: PolicySampling::Hard,
            deep_blend: if cfg.deep_warmup == 0 {
                1.0
            } else {
                ((epoch + 1) as f64 / cfg.deep_warmup as f64).min(1.0)
            },
        };

        let mut grads = GradSet::zeros_like(&model.store);
        let mut nll_total = 0.0;
        let mut token_total = 0usize;
        let mut correct_total = 0usize;

        for batch in &batches {
            grads.zero();
            let batch_tokens: usize = batch
                .tgt_lens
                .iter()
                .map(|&l| l + 1) // every token plus EOS
                .sum();
            for i in 0..batch.len() {
                let (src, tgt) = batch.sentence(i);
                let mut g = Graph::train();
                let out = model.sentence_loss(&mut g, src, tgt, &opts, &mut rng)?;
                // batch loss = (sum of token NLLs) / batch tokens
                //            + (sum of penalties) / batch sentences
                let mut contribution = g.affine(out.nll_sum, 1.0 / batch_tokens as f64, 0.0)?;
                if let Some(pen) = out.penalty {
                    let scaled = g.affine(pen, 1.0 / batch.len() as f64, 0.0)?;
                    contribution = g.add(contribution, scaled)?;
                }
                g.backward(contribution)?;
                g.param_grads_into(&mut grads);

                nll_total += g.value(out.nll_sum).item();
                token_total += out.token_count;
                correct_total += out.correct;
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            optimizer.step(&mut model.store, &grads);
        }

        let dev = evaluate_teacher_forced(model, job.dev, job.src_vocab, job.tgt_vocab, tau)?;
        let dev_bleu = dev_greedy_bleu(model, job.dev, job.src_vocab, job.tgt_vocab, cfg.max_len)?;
        let metrics = EpochMetrics {
            epoch,
            train_nll: nll_total / token_total as f64,
            train_acc: correct_total as f64 / token_total as f64,
            dev_nll: dev.nll,
            dev_acc: dev.accuracy,
            dev_bleu,
            refine_rate: dev.refine_rate,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: train nll {:.4} acc {:.3} | dev nll {:.4} acc {:.3} bleu {:.2} refine {:.1}%",
            epoch,
            metrics.train_nll,
            metrics.train_acc,
            metrics.dev_nll,
            metrics.dev_acc,
            metrics.dev_bleu,
            metrics.refine_rate
        );

        if let Some(dir) = job.out_dir {
            let path = metrics_path(dir);
            let mut text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            text.push_str(&metrics.csv_rows());
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            model.store.save(&last_checkpoint_path(dir))?;
            optimizer.save_state(&model.store, &optimizer_state_path(dir))?;
        }

        if metrics.dev_nll < best_dev_nll {
            best_dev_nll = metrics.dev_nll;
            best_epoch = epoch;
            bad_evals = 0;
            best_params = Some(model.store.clone());
            if let Some(dir) = job.out_dir {
                model.store.save(&best_checkpoint_path(dir))?;
            }
        } else {
            bad_evals += 1;
        }
        history.push(metrics);

        if bad_evals >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(best) = best_params {
        model.store = best;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_dev_nll,
        stopped_early,
    })
}

pub struct TeacherForcedEval {
    pub nll: f64,
    pub accuracy: f64,
    /// Percent of steps refining, from the policy traces (100 for
    /// always-refining variants, 0 for the baselines).
    pub refine_rate: f64,
}

/// Teacher-forced metrics with dropout off; the conditional policy follows
/// its deterministic inference rule (threshold 0.5, no noise).
pub fn evaluate_teacher_forced(
    model: &Model,
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    tau: f64,
) -> Result<TeacherForcedEval> {
    let opts = UnrollOptions {
        dropout: 0.0,
        tau,
        alpha: 0.0,
        policy: PolicySampling::Greedy { threshold: 0.5 },
        deep_blend: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    let mut refines = 0usize;
    let mut steps = 0usize;
    for (src_toks, tgt_toks) in &corpus.pairs {
        let src = src_vocab.ids(src_toks);
        let tgt = tgt_vocab.ids(tgt_toks);
        let mut g = Graph::eval();
        let out = model.sentence_loss(&mut g, &src, &tgt, &opts, &mut rng)?;
        nll += g.value(out.nll_sum).item();
        tokens += out.token_count;
        correct += out.correct;
        if let Some(trace) = &out.trace {
            refines += trace.refine_count();
            steps += trace.len();
        } else if model.refine_mode().is_some() {
            refines += out.token_count;
            steps += out.token_count;
        } else {
            steps += out.token_count;
        }
    }
    Ok(TeacherForcedEval {
        nll: nll / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        refine_rate: 100.0 * refines as f64 / steps.max(1) as f64,
    })
}

fn dev_greedy_bleu(
    model: &Model,
    dev: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<f64> {
    let cfg = DecodeConfig::greedy(max_len);
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for (src_toks, tgt_toks) in &dev.pairs {
        let src = src_vocab.ids(src_toks);
        let hyp = greedy_decode(model, &src, &cfg)?;
        hyps.push(tgt_vocab.detokenize(&hyp.tokens));
        refs.push(tgt_toks.join(" "));
    }
    bleu(&hyps, &refs, 4)
}
