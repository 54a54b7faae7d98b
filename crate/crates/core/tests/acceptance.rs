//! Acceptance suite. One test per criterion; each prints a PASS line with
//! the measured numbers (visible with `--nocapture`, and on failure).
//!
//! The heavy criteria share one synthetic-translation experiment (five
//! variants, three seeds) guarded by a lock so wall-clock measurements are
//! not contended.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use renmt_core::check::{grad_check, grad_check_params};
use renmt_core::config::{DecodeConfig, ModelConfig, TauSchedule, TrainConfig, Variant};
use renmt_core::data::{gen_corpus, CorpusSpec, ParallelCorpus, Task};
use renmt_core::decode::{beam_search, greedy_decode, greedy_decode_with, RefineOverride};
use renmt_core::eval::{bleu, evaluate_corpus, length_bucket_report};
use renmt_core::graph::Graph;
use renmt_core::model::{Model, PolicySampling, UnrollOptions};
use renmt_core::policy::{gumbel_softmax, sample_gumbel, st_discretize, REFINE, REUSE};
use renmt_core::tensor::Tensor;
use renmt_core::training::{train, RmsProp, TrainJob, TrainState};
use renmt_core::vocab::Vocabulary;

/// Serializes the timed criteria.
fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// ── Criterion 1: gradient suite ─────────────────────────────────────────

#[test]
fn acceptance_01_gradient_suite() {
    let _guard = heavy_lock();
    let started = Instant::now();

    // every op kind, small random tensors
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = Tensor::uniform(3, 4, 0.1, 1.5, &mut rng);
    let other = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let mat42 = Tensor::uniform(4, 2, -1.0, 1.0, &mut rng);
    let row = Tensor::uniform(1, 4, -1.0, 1.0, &mut rng);
    let col = Tensor::uniform(3, 1, -1.0, 1.0, &mut rng);
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.43 }).collect();

    type Case = (
        &'static str,
        Box<dyn Fn(&mut Graph, renmt_core::NodeId) -> renmt_core::Result<renmt_core::NodeId>>,
    );
    let cases: Vec<Case> = vec![
        ("matmul", {
            let m = mat42.clone();
            Box::new(move |g, x| {
                let w = g.leaf(m.clone());
                let y = g.matmul(x, w)?;
                g.sum(y)
            })
        }),
        ("add", {
            let o = other.clone();
            Box::new(move |g, x| {
                let b = g.leaf(o.clone());
                let y = g.add(x, b)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            })
        }),
        ("sub", {
            let o = other.clone();
            Box::new(move |g, x| {
                let b = g.leaf(o.clone());
                let y = g.sub(x, b)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            })
        }),
        ("mul", {
            let o = other.clone();
            Box::new(move |g, x| {
                let b = g.leaf(o.clone());
                let y = g.mul(x, b)?;
                g.sum(y)
            })
        }),
        ("add_row", {
            let r = row.clone();
            Box::new(move |g, x| {
                let b = g.leaf(r.clone());
                let y = g.add_row(x, b)?;
                let t = g.tanh(y)?;
                g.sum(t)
            })
        }),
        ("scale_by", Box::new(|g, x| {
            let s = g.mean(x)?;
            let y = g.scale_by(x, s)?;
            g.sum(y)
        })),
        ("scale_rows", {
            let c = col.clone();
            Box::new(move |g, x| {
                let c = g.leaf(c.clone());
                let y = g.scale_rows(x, c)?;
                g.sum(y)
            })
        }),
        ("affine", Box::new(|g, x| {
            let y = g.affine(x, -2.5, 0.3)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })),
        ("sigmoid", Box::new(|g, x| {
            let y = g.sigmoid(x)?;
            g.sum(y)
        })),
        ("tanh", Box::new(|g, x| {
            let y = g.tanh(x)?;
            g.sum(y)
        })),
        ("exp", Box::new(|g, x| {
            let y = g.exp(x)?;
            g.sum(y)
        })),
        ("log", Box::new(|g, x| {
            let y = g.log(x)?;
            g.sum(y)
        })),
        ("softmax", Box::new(|g, x| {
            let y = g.softmax(x)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })),
        ("transpose", Box::new(|g, x| {
            let y = g.transpose(x)?;
            let t = g.tanh(y)?;
            g.sum(t)
        })),
        ("concat_cols", Box::new(|g, x| {
            let t = g.tanh(x)?;
            let y = g.concat_cols(&[x, t])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })),
        ("concat_rows", Box::new(|g, x| {
            let t = g.sigmoid(x)?;
            let y = g.concat_rows(&[x, t])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })),
        ("block", Box::new(|g, x| {
            let y = g.block(x, 1, 3, 1, 4)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })),
        ("embed", Box::new(|g, x| {
            let y = g.embed(x, &[2, 0, 2])?;
            let t = g.tanh(y)?;
            g.sum(t)
        })),
        ("mask", {
            let m = mask.clone();
            Box::new(move |g, x| {
                let y = g.apply_mask(x, &m)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            })
        }),
        ("sum", Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })),
        ("mean", Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            g.mean(sq)
        })),
        ("gru_step", Box::new(|g, x| {
            let xin = g.block(x, 0, 1, 0, 4)?;
            let h = g.block(x, 1, 2, 0, 4)?;
            let wz = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.07 * i as f64 - 0.5).collect()).unwrap());
            let wr = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.71 - 0.09 * i as f64).collect()).unwrap());
            let wn = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.05 * i as f64 - 0.3).collect()).unwrap());
            let uz = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.04 * i as f64 - 0.2).collect()).unwrap());
            let ur = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.33 - 0.05 * i as f64).collect()).unwrap());
            let un = g.leaf(Tensor::new(4, 4, (0..16).map(|i| 0.06 * i as f64 - 0.4).collect()).unwrap());
            let bz = g.leaf(Tensor::row_vector(vec![0.1, -0.2, 0.0, 0.3]));
            let br = g.leaf(Tensor::row_vector(vec![-0.1, 0.2, 0.1, 0.0]));
            let bn = g.leaf(Tensor::row_vector(vec![0.0, 0.1, -0.3, 0.2]));
            let out = g.gru_step(xin, h, wz, wr, wn, uz, ur, un, bz, br, bn)?;
            let sq = g.mul(out, out)?;
            g.sum(sq)
        })),
    ];
    let mut worst_op: f64 = 0.0;
    for (name, build) in &cases {
        let err = grad_check(build.as_ref(), &point, 1e-4).unwrap();
        assert!(err < 1e-4, "op {name}: grad err {err}");
        worst_op = worst_op.max(err);
    }

    // full composed loss per variant at d = 8, J = I = 5
    let src = [4u32, 5, 6, 7, 8];
    let tgt = [8u32, 7, 6, 5]; // 5 steps with EOS
    let opts = UnrollOptions {
        dropout: 0.0,
        tau: 0.9,
        alpha: 0.1,
        policy: PolicySampling::Soft,
        deep_blend: 1.0,
    };
    let mut worst_model: f64 = 0.0;
    for variant in [
        Variant::Baseline,
        Variant::Shallow,
        Variant::Deep,
        Variant::HardShallow,
        Variant::HardDeep,
        Variant::Conditional,
    ] {
        let cfg = ModelConfig {
            variant,
            emb_dim: 8,
            rnn_dim: 4, // bidirectional: source states are 8-dim
            attn_dim: 8,
            policy_dim: 4,
        };
        let mut model = Model::new(cfg, 12, 12, 7).unwrap();
        // parameter scale keeps gradients clear of the rounding floor
        let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
        for id in &ids {
            for v in model.store.get_mut(*id).data_mut() {
                *v *= 3.0;
            }
        }
        let mut store = model.store.clone();
        let err = grad_check_params(
            &mut store,
            |ps, g| {
                let mut m = model.clone();
                m.store = ps.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let out = m.sentence_loss(g, &src, &tgt, &opts, &mut rng)?;
                Ok(out.total)
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{variant}: full-loss grad err {err}");
        worst_model = worst_model.max(err);
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
    println!(
        "acceptance 1 (gradient suite): PASS - worst op err {worst_op:.2e}, \
         worst full-loss err {worst_model:.2e}, {secs:.1}s"
    );
}

// ── Criterion 2: sampler statistics ─────────────────────────────────────

#[test]
fn acceptance_02_sampler_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let logits = [0.0f64, 1.0];
    let expect = [0.2689, 0.7311];
    let n = 100_000;
    let mut picks = [0usize; 2];
    for _ in 0..n {
        let perturbed = [logits[0] + sample_gumbel(&mut rng), logits[1] + sample_gumbel(&mut rng)];
        let k = if perturbed[1] > perturbed[0] { 1 } else { 0 };
        picks[k] += 1;
    }
    let freq = [picks[0] as f64 / n as f64, picks[1] as f64 / n as f64];
    for k in 0..2 {
        assert!(
            (freq[k] - expect[k]).abs() < 0.01,
            "gumbel-max pick frequency {k}: {} vs {}",
            freq[k],
            expect[k]
        );
    }

    let m = 1_000_000;
    let mean: f64 = (0..m).map(|_| sample_gumbel(&mut rng)).sum::<f64>() / m as f64;
    assert!((mean - 0.5772).abs() < 0.01, "gumbel mean {mean}");
    println!(
        "acceptance 2 (sampler statistics): PASS - frequencies [{:.4}, {:.4}], mean {mean:.4}"
    , freq[0], freq[1]);
}

// ── Criterion 3: straight-through contract ──────────────────────────────

#[test]
fn acceptance_03_straight_through_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..10_000 {
        let logits = Tensor::row_vector(vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let noise = [sample_gumbel(&mut rng), sample_gumbel(&mut rng)];
        let tau = rng.gen_range(0.1..2.0);
        let weights = Tensor::row_vector(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);

        let run = |hard: bool| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::train();
            let o = g.leaf(logits.clone());
            let relaxed = gumbel_softmax(&mut g, o, &noise, tau).unwrap();
            let branch = if hard {
                st_discretize(&mut g, relaxed).unwrap()
            } else {
                relaxed
            };
            let w = g.leaf(weights.clone());
            let prod = g.mul(branch, w).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            (g.value(branch).data().to_vec(), g.grad(o).to_vec())
        };
        let (hard_fwd, hard_grad) = run(true);
        let (_, soft_grad) = run(false);

        let ones = hard_fwd.iter().filter(|&&v| v == 1.0).count();
        let zeros = hard_fwd.iter().filter(|&&v| v == 0.0).count();
        assert!(
            ones == 1 && zeros == hard_fwd.len() - 1,
            "trial {trial}: forward not exactly one-hot: {hard_fwd:?}"
        );
        let hb: Vec<u64> = hard_grad.iter().map(|v| v.to_bits()).collect();
        let sb: Vec<u64> = soft_grad.iter().map(|v| v.to_bits()).collect();
        assert_eq!(hb, sb, "trial {trial}: straight-through gradient differs");
    }
    println!("acceptance 3 (straight-through contract): PASS - 10000 inputs, gradients bitwise equal");
}

// ── Criterion 4: temperature limits ─────────────────────────────────────

#[test]
fn acceptance_04_temperature_limits() {
    // tau -> 0 approaches argmax: any gap >= 1 concentrates the mass
    let mut sharpest: f64 = 1.0;
    for gap in [1.0, 2.0, 5.0] {
        let mut g = Graph::eval();
        let o = g.leaf(Tensor::row_vector(vec![gap, 0.0]));
        let a = gumbel_softmax(&mut g, o, &[0.0, 0.0], 0.01).unwrap();
        let max = g.value(a).data()[0];
        assert!(max > 0.999, "tau=0.01 gap {gap}: max component {max}");
        sharpest = sharpest.min(max);
    }

    // tau -> infinity approaches uniform over the |o| <= 5 ball,
    // including its worst case o = (5/sqrt(2)) (1, -1)
    let mut worst_dev: f64 = 0.0;
    let extreme = 5.0 / 2.0_f64.sqrt();
    let mut grid: Vec<[f64; 2]> = vec![[extreme, -extreme], [-extreme, extreme]];
    for i in -5..=5 {
        for j in -5..=5 {
            let (a, b) = (i as f64, j as f64);
            if (a * a + b * b).sqrt() <= 5.0 {
                grid.push([a, b]);
            }
        }
    }
    for logits in grid {
        let mut g = Graph::eval();
        let o = g.leaf(Tensor::row_vector(logits.to_vec()));
        let a = gumbel_softmax(&mut g, o, &[0.0, 0.0], 100.0).unwrap();
        for &v in g.value(a).data() {
            let dev = (v - 0.5).abs();
            assert!(dev < 0.02, "tau=100 logits {logits:?}: deviation {dev}");
            worst_dev = worst_dev.max(dev);
        }
    }
    println!(
        "acceptance 4 (temperature limits): PASS - tau=0.01 min max-component {sharpest:.5}, \
         tau=100 worst uniform deviation {worst_dev:.4}"
    );
}

// ── Criterion 5: baseline reduction ─────────────────────────────────────

#[test]
fn acceptance_05_baseline_reduction() {
    let _guard = heavy_lock();
    let cfg = |variant| ModelConfig {
        variant,
        emb_dim: 8,
        rnn_dim: 6,
        attn_dim: 8,
        policy_dim: 4,
    };
    let seed = 33;
    let vocab = 20;
    let baseline = Model::new(cfg(Variant::Baseline), vocab, vocab, seed).unwrap();
    let deep = Model::new(cfg(Variant::Deep), vocab, vocab, seed).unwrap();

    // shared base initialization
    for (id, name, value) in baseline.store.iter() {
        assert_eq!(deep.store.name(id), name);
        let a: Vec<u64> = value.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = deep.store.get(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "base param {name} differs between builds");
    }

    let dc = DecodeConfig::greedy(24);
    let beam1 = DecodeConfig {
        beam: 1,
        max_len: 24,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..200 {
        let len = rng.gen_range(1..=16);
        let src: Vec<u32> = (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect();

        let a = greedy_decode(&baseline, &src, &dc).unwrap();
        let b = greedy_decode_with(&deep, &src, &dc, Some(RefineOverride::Bypass)).unwrap();
        assert_eq!(a.tokens, b.tokens, "sentence {i}: disabled path diverged");
        assert_eq!(
            a.log_prob.to_bits(),
            b.log_prob.to_bits(),
            "sentence {i}: log-prob not bit-identical"
        );

        let c = beam_search(&baseline, &src, &beam1).unwrap();
        assert_eq!(a.tokens, c.tokens, "sentence {i}: beam=1 != greedy");
    }
    println!(
        "acceptance 5 (baseline reduction): PASS - 200 sentences bit-identical under the \
         disabled path; beam=1 matches greedy"
    );
}

// ── Criterion 9: BLEU oracle ────────────────────────────────────────────

#[test]
fn acceptance_09_bleu_oracle() {
    let s = |v: &str| v.to_string();
    // identity and disjoint
    let refs = vec![s("the cat sat on the mat today fine")];
    assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
    let disjoint = vec![s("dog ran fast here quick now so yes")];
    assert_eq!(bleu(&disjoint, &refs, 4).unwrap(), 0.0);

    // five constructed cases, frozen from the hand-count oracle
    // (clipped n-gram counts and brevity penalty recomputed by hand)
    let cases: [(&str, Vec<(&str, &str)>, f64); 5] = [
        (
            // counts 5/6, 3/5, 2/4, 1/3; BP = 1
            "substitution",
            vec![("the cat sat on the mat", "the cat sat on a mat")],
            53.7285,
        ),
        (
            // clipping: "a" appears 4 times but only 2 in the reference;
            // counts 5/7, 4/6, 3/5, 2/4; BP = 1
            "clipping",
            vec![("a a a a b c d", "a a b c d e f")],
            61.4788,
        ),
        (
            // perfect precisions, short hypothesis: BP = e^(1 - 6/4)
            "brevity",
            vec![("a b c d", "a b c d e f")],
            60.6531,
        ),
        (
            // statistics pool across the corpus before the geometric mean
            "corpus pooling",
            vec![
                ("the quick brown fox jumps", "the quick brown fox leaps"),
                ("over the lazy dog today", "over the lazy dog tonight"),
            ],
            66.8740,
        ),
        (
            "case folding",
            vec![("The Quick Brown Fox Jumps High", "the quick brown fox jumps high")],
            100.0000,
        ),
    ];
    for (name, pairs, expect) in cases {
        let hyps: Vec<String> = pairs.iter().map(|(h, _)| s(h)).collect();
        let refs: Vec<String> = pairs.iter().map(|(_, r)| s(r)).collect();
        let got = bleu(&hyps, &refs, 4).unwrap();
        assert!(
            (got - expect).abs() < 5e-5,
            "case {name}: bleu {got:.4} != {expect:.4}"
        );
    }
    println!("acceptance 9 (BLEU oracle): PASS - 5 hand-computed cases to 4 decimals, identity 100, disjoint 0");
}
