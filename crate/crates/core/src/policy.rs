//! Refine/reuse policy with straight-through Gumbel-Softmax.
//!
//! A two-layer network scores the two actions from the current decoder
//! state, previous target embedding and context vector. Training samples
//! actions with Gumbel noise, hardens them to one-hot straight-through
//! (forward discrete, backward through the relaxed sample), and charges a
//! penalty proportional to the refine rate. The decision made at step i is
//! consumed at step i+1; step 1 always refines so an initial refined
//! representation exists.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Action indices in logits/probability vectors.
pub const REUSE: usize = 0;
pub const REFINE: usize = 1;

const GUMBEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Reuse,
    Refine,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Reuse => REUSE,
            Action::Refine => REFINE,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == REFINE {
            Action::Refine
        } else {
            Action::Reuse
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Reuse => "reuse",
            Action::Refine => "refine",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PolicyParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        state_dim: usize,
        emb_dim: usize,
        hidden_dim: usize,
        policy_dim: usize,
    ) -> Self {
        use crate::seq2seq::{init_bias, init_weight};
        let in_dim = state_dim + emb_dim + hidden_dim;
        PolicyParams {
            w1: init_weight(store, rng, "pol.w1", in_dim, policy_dim),
            b1: init_bias(store, "pol.b1", policy_dim),
            w2: init_weight(store, rng, "pol.w2", policy_dim, 2),
            b2: init_bias(store, "pol.b2", 2),
        }
    }

    pub fn param_count(state_dim: usize, emb_dim: usize, hidden_dim: usize, policy_dim: usize) -> usize {
        (state_dim + emb_dim + hidden_dim) * policy_dim + policy_dim + policy_dim * 2 + 2
    }
}

/// Policy state `m_i = tanh(W' [s_i; E_{y_{i-1}}; c_i] + b')`.
pub fn policy_state(
    g: &mut Graph,
    ps: &ParamStore,
    p: &PolicyParams,
    s: NodeId,
    y_emb: NodeId,
    ctx: NodeId,
) -> Result<NodeId> {
    let w1 = g.param(ps, p.w1);
    let b1 = g.param(ps, p.b1);
    let joined = g.concat_cols(&[s, y_emb, ctx])?;
    let pre = g.matmul(joined, w1)?;
    let pre = g.add(pre, b1)?;
    g.tanh(pre)
}

/// Action logits `o_i` and probabilities `pi(a | m_i)`.
pub fn policy_logits(
    g: &mut Graph,
    ps: &ParamStore,
    p: &PolicyParams,
    m: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w2 = g.param(ps, p.w2);
    let b2 = g.param(ps, p.b2);
    let o = g.matmul(m, w2)?;
    let o = g.add(o, b2)?;
    let pi = g.softmax(o)?;
    Ok((o, pi))
}

/// `-log(-log(u))` with `u` clamped away from {0, 1}.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    gumbel_from_uniform(rng.gen::<f64>())
}

/// Relaxed sample `softmax((o + g) / tau)`, differentiable in the logits.
pub fn gumbel_softmax(g: &mut Graph, logits: NodeId, noise: &[f64], tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::Domain {
            op: "gumbel_softmax",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    if noise.len() != g.value(logits).numel() {
        return Err(Error::InvalidArgument(format!(
            "noise length {} does not match {} logits",
            noise.len(),
            g.value(logits).numel()
        )));
    }
    let noise = g.leaf(Tensor::row_vector(noise.to_vec()));
    let sum = g.add(logits, noise)?;
    let scaled = g.affine(sum, 1.0 / tau, 0.0)?;
    g.softmax(scaled)
}

/// One-hot at the argmax of the relaxed sample; gradients pass straight
/// through to the relaxed branch.
pub fn st_discretize(g: &mut Graph, relaxed: NodeId) -> Result<NodeId> {
    g.hardmax(relaxed)
}

/// Training-time state mix: both branches stay in the graph so gradients
/// flow through whichever is selected (and, relaxed, through both).
pub fn mix_nodes(g: &mut Graph, a: NodeId, prev: NodeId, fresh: NodeId) -> Result<NodeId> {
    let keep = g.element(a, REUSE)?;
    let take = g.element(a, REFINE)?;
    let kept = g.scale_by(prev, keep)?;
    let taken = g.scale_by(fresh, take)?;
    g.add(kept, taken)
}

/// Inference-time state mix: the fresh states are only computed when the
/// action is REFINE. This is where the conditional speedup comes from.
pub fn mix_states<T>(action: Action, prev: T, fresh: impl FnOnce() -> T) -> T {
    match action {
        Action::Reuse => prev,
        Action::Refine => fresh(),
    }
}

/// Penalty node `alpha * (sum_i refine_i) / I` from per-step refine
/// indicators (forced steps contribute a constant 1).
pub fn penalty_node(g: &mut Graph, refine_indicators: &[NodeId], alpha: f64) -> Result<NodeId> {
    let stacked = g.concat_cols(refine_indicators)?;
    let mean = g.mean(stacked)?;
    g.affine(mean, alpha, 0.0)
}

// ── Decision schedule ───────────────────────────────────────────────────

/// Carries the one-step-ahead decisions: the action taken at the step
/// about to run was decided at the previous step; the first step is a
/// forced refine.
#[derive(Clone, Debug)]
pub struct ActionSchedule {
    pending: Action,
    started: bool,
}

impl ActionSchedule {
    pub fn new() -> Self {
        ActionSchedule {
            pending: Action::Refine,
            started: false,
        }
    }

    /// True before the first `take` — the forced initial refine.
    pub fn is_forced_step(&self) -> bool {
        !self.started
    }

    /// Action consumed by the step about to run.
    pub fn take(&mut self) -> Action {
        self.started = true;
        self.pending
    }

    /// Records the decision made at the current step for the next one.
    pub fn decide(&mut self, action: Action) {
        self.pending = action;
    }
}

impl Default for ActionSchedule {
    fn default() -> Self {
        Self::new()
    }
}

// ── Trace ───────────────────────────────────────────────────────────────

/// One decoding step's policy record.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    /// Forward action probabilities (a forced step records [0, 1]).
    pub pi: [f64; 2],
    /// Relaxed sample; equals `pi` rounding at inference (no noise).
    pub relaxed: [f64; 2],
    pub action: Action,
    pub tau: f64,
    pub forced: bool,
}

/// Per-step actions realized while decoding one sentence. Entry `i` is the
/// action consumed at step `i+1` (0-based), so the length equals the
/// decoded length.
#[derive(Clone, Debug, Default)]
pub struct PolicyTrace {
    pub steps: Vec<PolicyStep>,
}

impl PolicyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_forced(&mut self, tau: f64) {
        self.steps.push(PolicyStep {
            pi: [0.0, 1.0],
            relaxed: [0.0, 1.0],
            action: Action::Refine,
            tau,
            forced: true,
        });
    }

    pub fn push(&mut self, pi: [f64; 2], relaxed: [f64; 2], action: Action, tau: f64) {
        self.steps.push(PolicyStep {
            pi,
            relaxed,
            action,
            tau,
            forced: false,
        });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn action(&self, step: usize) -> Action {
        self.steps[step].action
    }

    pub fn refine_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.action == Action::Refine)
            .count()
    }

    /// Fraction of steps choosing REFINE, in [0, 1].
    pub fn refine_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.refine_count() as f64 / self.steps.len() as f64
    }

    /// CSV export: `step,pi_reuse,pi_refine,action,tau`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,pi_reuse,pi_refine,action,tau\n");
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                s.pi[REUSE],
                s.pi[REFINE],
                s.action.name(),
                s.tau
            ));
        }
        out
    }
}

/// Penalty value `alpha * refine_count / len` recomputed from a trace.
pub fn refine_penalty(trace: &PolicyTrace, alpha: f64) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    alpha * trace.refine_count() as f64 / trace.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn policy_state_zero_params_and_bounds() {
        let mut store = ParamStore::new();
        let p = PolicyParams {
            w1: store.add("w1", Tensor::zeros(6, 3)),
            b1: store.add("b1", Tensor::zeros(1, 3)),
            w2: store.add("w2", Tensor::zeros(3, 2)),
            b2: store.add("b2", Tensor::zeros(1, 2)),
        };
        let mut g = Graph::eval();
        let s = g.leaf(Tensor::row_vector(vec![0.4, -0.3]));
        let y = g.leaf(Tensor::row_vector(vec![0.2, 0.8]));
        let c = g.leaf(Tensor::row_vector(vec![-0.1, 0.6]));
        let m = policy_state(&mut g, &store, &p, s, y, c).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));

        let mut store2 = ParamStore::new();
        let p2 = PolicyParams::init(&mut store2, &mut rng(), 2, 2, 2, 3);
        let m2 = policy_state(&mut g, &store2, &p2, s, y, c).unwrap();
        assert!(g.value(m2).data().iter().all(|&v| v.abs() < 1.0));
    }

    /// d_m = 2 with explicit numbers.
    #[test]
    fn policy_state_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let w1 = Tensor::new(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let b1 = Tensor::row_vector(vec![0.05, -0.05]);
        let p = PolicyParams {
            w1: store.add("w1", w1),
            b1: store.add("b1", b1),
            w2: store.add("w2", Tensor::zeros(2, 2)),
            b2: store.add("b2", Tensor::zeros(1, 2)),
        };
        let mut g = Graph::eval();
        let s = g.leaf(Tensor::scalar(0.7));
        let y = g.leaf(Tensor::scalar(-0.4));
        let c = g.leaf(Tensor::scalar(0.2));
        let m = policy_state(&mut g, &store, &p, s, y, c).unwrap();
        let pre0: f64 = 0.7 * 0.1 + (-0.4) * 0.3 + 0.2 * (-0.5) + 0.05;
        let pre1: f64 = 0.7 * (-0.2) + (-0.4) * 0.4 + 0.2 * 0.6 - 0.05;
        assert!((g.value(m).data()[0] - pre0.tanh()).abs() < 1e-12);
        assert!((g.value(m).data()[1] - pre1.tanh()).abs() < 1e-12);
    }

    #[test]
    fn logits_zero_params_are_uniform_and_gap_matches_sigmoid() {
        let mut store = ParamStore::new();
        let p = PolicyParams {
            w1: store.add("w1", Tensor::zeros(6, 2)),
            b1: store.add("b1", Tensor::zeros(1, 2)),
            w2: store.add("w2", Tensor::zeros(2, 2)),
            b2: store.add("b2", Tensor::zeros(1, 2)),
        };
        let mut g = Graph::eval();
        let m = g.leaf(Tensor::row_vector(vec![0.3, -0.9]));
        let (_, pi) = policy_logits(&mut g, &store, &p, m).unwrap();
        assert_eq!(g.value(pi).data(), &[0.5, 0.5]);

        // two-class softmax equals the sigmoid of the logit gap
        store.get_mut(p.b2).data_mut()[REFINE] = 2.0;
        let mut g = Graph::eval(); // params are bound per graph
        let m = g.leaf(Tensor::row_vector(vec![0.3, -0.9]));
        let (_, pi) = policy_logits(&mut g, &store, &p, m).unwrap();
        let refine_p = g.value(pi).data()[REFINE];
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((refine_p - expect).abs() < 1e-12);
        assert!((refine_p - 0.8808).abs() < 1e-4);
        assert!((g.value(pi).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gumbel_known_points() {
        assert!((gumbel_from_uniform(1.0 / std::f64::consts::E) - 0.0).abs() < 1e-12);
        let u = (-std::f64::consts::E).exp();
        assert!((gumbel_from_uniform(u) + 1.0).abs() < 1e-12);
        // extreme draws stay finite through the clamp
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_near_euler_mascheroni() {
        let mut r = rng();
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sample_gumbel(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 0.5772).abs() < 0.01, "gumbel mean {mean}");
    }

    #[test]
    fn gumbel_softmax_symmetry_and_sharpness() {
        let mut g = Graph::eval();
        let o = g.leaf(Tensor::row_vector(vec![0.7, 0.7]));
        let a = gumbel_softmax(&mut g, o, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.5]);

        let o = g.leaf(Tensor::row_vector(vec![1.0, 0.0]));
        let sharp = gumbel_softmax(&mut g, o, &[0.0, 0.0], 0.01).unwrap();
        assert!(g.value(sharp).data()[0] > 0.999);

        // worst case of the |o| <= 5 ball: o = (5/sqrt(2)) (1, -1)
        let extreme = 5.0 / 2.0f64.sqrt();
        let o2 = g.leaf(Tensor::row_vector(vec![extreme, -extreme]));
        let flat = gumbel_softmax(&mut g, o2, &[0.0, 0.0], 100.0).unwrap();
        for &v in g.value(flat).data() {
            assert!((v - 0.5).abs() < 0.02, "tau=100 component {v}");
        }
        assert!(gumbel_softmax(&mut g, o, &[0.0, 0.0], 0.0).is_err());
        assert!(gumbel_softmax(&mut g, o, &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn st_discretize_one_hot_and_tie_break() {
        let mut g = Graph::eval();
        let a = g.leaf(Tensor::row_vector(vec![0.7, 0.3]));
        let hard = st_discretize(&mut g, a).unwrap();
        assert_eq!(g.value(hard).data(), &[1.0, 0.0]);
        let tie = g.leaf(Tensor::row_vector(vec![0.5, 0.5]));
        let hard = st_discretize(&mut g, tie).unwrap();
        assert_eq!(g.value(hard).data(), &[1.0, 0.0]);
    }

    /// Straight-through contract: grad of sum(a_hat (.) w) w.r.t. logits
    /// equals grad of sum(a_bar (.) w), bitwise.
    #[test]
    fn straight_through_gradient_equals_relaxed() {
        let logits = Tensor::row_vector(vec![0.4, -1.2]);
        let weights = Tensor::row_vector(vec![0.9, -0.3]);
        let noise = [0.37, -0.81];

        let run = |hard: bool| -> Vec<f64> {
            let mut g = Graph::train();
            let o = g.leaf(logits.clone());
            let relaxed = gumbel_softmax(&mut g, o, &noise, 0.7).unwrap();
            let branch = if hard {
                st_discretize(&mut g, relaxed).unwrap()
            } else {
                relaxed
            };
            let w = g.leaf(weights.clone());
            let prod = g.mul(branch, w).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            g.grad(o).to_vec()
        };
        let hard = run(true);
        let soft = run(false);
        let hb: Vec<u64> = hard.iter().map(|v| v.to_bits()).collect();
        let sb: Vec<u64> = soft.iter().map(|v| v.to_bits()).collect();
        assert_eq!(hb, sb);
    }

    #[test]
    fn mix_skips_thunk_on_reuse() {
        let mut calls = 0;
        let out = mix_states(Action::Reuse, 1, || {
            calls += 1;
            2
        });
        assert_eq!((out, calls), (1, 0));
        let out = mix_states(Action::Refine, 1, || {
            calls += 1;
            2
        });
        assert_eq!((out, calls), (2, 1));
    }

    /// Graph-mode mix with a one-hot action equals the inference-mode
    /// selection of the same branch.
    #[test]
    fn train_and_inference_mix_agree() {
        let prev = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fresh = Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        for (onehot, action) in [([1.0, 0.0], Action::Reuse), ([0.0, 1.0], Action::Refine)] {
            let mut g = Graph::train();
            let a = g.leaf(Tensor::row_vector(onehot.to_vec()));
            let p = g.leaf(prev.clone());
            let f = g.leaf(fresh.clone());
            let mixed = mix_nodes(&mut g, a, p, f).unwrap();
            let picked = mix_states(action, prev.clone(), || fresh.clone());
            assert_eq!(g.value(mixed).data(), picked.data());
        }
    }

    #[test]
    fn penalty_values() {
        let mut all = PolicyTrace::new();
        for _ in 0..5 {
            all.push([0.0, 1.0], [0.0, 1.0], Action::Refine, 1.0);
        }
        assert!((refine_penalty(&all, 0.1) - 0.1).abs() < 1e-12);

        let mut none = PolicyTrace::new();
        none.push([1.0, 0.0], [1.0, 0.0], Action::Reuse, 1.0);
        assert_eq!(refine_penalty(&none, 0.5), 0.0);

        let mut one_of_four = PolicyTrace::new();
        one_of_four.push_forced(1.0);
        for _ in 0..3 {
            one_of_four.push([1.0, 0.0], [1.0, 0.0], Action::Reuse, 1.0);
        }
        assert!((refine_penalty(&one_of_four, 0.2) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn penalty_node_matches_trace_penalty() {
        let mut g = Graph::train();
        let ind: Vec<NodeId> = [1.0, 0.0, 1.0, 0.0]
            .iter()
            .map(|&v| g.leaf(Tensor::scalar(v)))
            .collect();
        let node = penalty_node(&mut g, &ind, 0.2).unwrap();
        assert!((g.value(node).item() - 0.2 * 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_offsets_actions_by_one_step() {
        let mut sched = ActionSchedule::new();
        assert!(sched.is_forced_step());
        // step 1 consumes the forced refine
        assert_eq!(sched.take(), Action::Refine);
        assert!(!sched.is_forced_step());
        sched.decide(Action::Reuse); // decided at step 1
        assert_eq!(sched.take(), Action::Reuse); // consumed at step 2
        sched.decide(Action::Refine); // decided at step 2
        assert_eq!(sched.take(), Action::Refine); // consumed at step 3
    }

    #[test]
    fn trace_counts_and_csv() {
        let mut t = PolicyTrace::new();
        t.push_forced(1.0);
        t.push([0.8, 0.2], [0.9, 0.1], Action::Reuse, 0.9);
        t.push([0.3, 0.7], [0.2, 0.8], Action::Refine, 0.9);
        assert_eq!(t.len(), 3);
        assert_eq!(t.refine_count(), 2);
        assert!((t.refine_rate() - 2.0 / 3.0).abs() < 1e-12);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,pi_reuse,pi_refine,action,tau");
        assert_eq!(lines[1], "1,0,1,refine,1");
        assert_eq!(lines[2], "2,0.8,0.2,reuse,0.9");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn single_step_trace_is_one_forced_refine() {
        let mut sched = ActionSchedule::new();
        let mut trace = PolicyTrace::new();
        // decoding a single token: one consumed action, no decision
        assert!(sched.is_forced_step());
        let a = sched.take();
        trace.push_forced(1.0);
        assert_eq!(a, Action::Refine);
        assert_eq!(trace.len(), 1);
        assert!(trace.steps[0].forced);
        assert_eq!(trace.refine_count(), 1);
    }
}
