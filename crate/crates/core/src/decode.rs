//! Greedy and beam-search decoding over every model variant.
//!
//! Decoding runs on an inference graph per sentence. Refined source states
//! and their attention keys are cached per hypothesis and only recomputed
//! when a step actually refines, so REUSE steps skip the gate, the
//! re-encoder, and the key projection entirely.

use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Model, StepStates};
use crate::refiner::RefineCache;
use crate::policy::{policy_logits, policy_state, Action, PolicyTrace, REFINE, REUSE};
use crate::seq2seq::{attend, decoder_step, init_state, predict};
use crate::vocab::{BOS, EOS, PAD};

/// Forces a fixed refine behaviour instead of the variant's own policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineOverride {
    /// Attend over the raw encoder states; the refiner never runs.
    Bypass,
    /// Refine at every step.
    AlwaysRefine,
    /// Refine once at step 1, then reuse forever.
    AlwaysReuse,
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted token ids; ends with EOS unless max-len truncated.
    pub tokens: Vec<u32>,
    /// Cumulative log-probability of the emitted tokens.
    pub log_prob: f64,
    /// Per-step attention weights over source positions.
    pub attention: Vec<Vec<f64>>,
    /// Policy record (conditional variant only).
    pub trace: Option<PolicyTrace>,
    /// Number of refine operations actually executed.
    pub refine_ops: usize,
}

impl Hypothesis {
    /// Decoding steps taken (tokens emitted, EOS included).
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }

    /// Translated words (EOS excluded).
    pub fn words(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != EOS).count()
    }

    /// Normalized score `log_prob / len^lambda`.
    pub fn score(&self, length_norm: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(length_norm)
    }
}

/// What a decoding step attends over, plus bookkeeping for the policy.
struct DecodeState {
    s: NodeId,
    cur: Option<StepStates>,
    /// (s_i, y_emb_i, c_i) kept for the next step's policy decision.
    pending: Option<(NodeId, NodeId, NodeId)>,
    tokens: Vec<u32>,
    log_prob: f64,
    attention: Vec<Vec<f64>>,
    trace: Option<PolicyTrace>,
    refine_ops: usize,
    ended: bool,
}

enum StepPolicy {
    /// Baseline path: states fixed for the whole sentence.
    Fixed,
    /// Refine at every step.
    Always,
    /// Refine at step 1 only.
    Once,
    /// Learned policy with the given refine threshold.
    Learned { threshold: f64 },
}

fn resolve_policy(model: &Model, cfg: &DecodeConfig, over: Option<RefineOverride>) -> Result<StepPolicy> {
    let refining = model.refine_mode().is_some();
    match over {
        Some(RefineOverride::Bypass) => Ok(StepPolicy::Fixed),
        Some(RefineOverride::AlwaysRefine) => {
            if !refining {
                return Err(Error::InvalidArgument(
                    "cannot force refining on a variant without a refiner".into(),
                ));
            }
            Ok(StepPolicy::Always)
        }
        Some(RefineOverride::AlwaysReuse) => {
            if !refining {
                return Err(Error::InvalidArgument(
                    "cannot force reuse on a variant without a refiner".into(),
                ));
            }
            Ok(StepPolicy::Once)
        }
        None => Ok(if !refining {
            StepPolicy::Fixed
        } else if model.policy.is_some() {
            StepPolicy::Learned {
                threshold: cfg.threshold,
            }
        } else {
            StepPolicy::Always
        }),
    }
}

/// Decides this step's action and refreshes the state cache when refining.
/// Returns false when the step reuses the cached states.
fn establish_states(
    g: &mut Graph,
    model: &Model,
    policy: &StepPolicy,
    raw: NodeId,
    cache: Option<&RefineCache>,
    state: &mut DecodeState,
    step: usize,
) -> Result<()> {
    let action = match policy {
        StepPolicy::Fixed => {
            if state.cur.is_none() {
                state.cur = Some(model.with_keys(g, raw)?);
            }
            return Ok(());
        }
        StepPolicy::Always => Action::Refine,
        StepPolicy::Once => {
            if step == 0 {
                Action::Refine
            } else {
                Action::Reuse
            }
        }
        StepPolicy::Learned { threshold } => {
            if step == 0 {
                // forced initial refine; tau recorded as 0 (argmax limit)
                state.trace.get_or_insert_with(PolicyTrace::new).push_forced(0.0);
                Action::Refine
            } else {
                let (s_prev, y_prev, c_prev) = state
                    .pending
                    .take()
                    .expect("policy inputs from previous step");
                let pol = model.policy.as_ref().unwrap();
                let m = policy_state(g, &model.store, pol, s_prev, y_prev, c_prev)?;
                let (_, pi) = policy_logits(g, &model.store, pol, m)?;
                let pi_v = [g.value(pi).data()[REUSE], g.value(pi).data()[REFINE]];
                let action = if pi_v[REFINE] >= *threshold {
                    Action::Refine
                } else {
                    Action::Reuse
                };
                state
                    .trace
                    .get_or_insert_with(PolicyTrace::new)
                    .push(pi_v, pi_v, action, 0.0);
                action
            }
        }
    };
    match action {
        Action::Refine => {
            let cache = cache.expect("refining variants carry a cache");
            let (fresh, _gate) = model.refreshed_states(g, raw, cache, state.s)?;
            state.cur = Some(fresh);
            state.refine_ops += 1;
        }
        Action::Reuse => {
            debug_assert!(state.cur.is_some(), "reuse before any refine");
        }
    }
    Ok(())
}

/// Argmax over the distribution with PAD masked out.
fn pick_argmax(probs: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &p) in probs.iter().enumerate() {
        if i == PAD as usize {
            continue;
        }
        if best == usize::MAX || p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &Model, src: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis> {
    greedy_decode_with(model, src, cfg, None)
}

pub fn greedy_decode_with(
    model: &Model,
    src: &[u32],
    cfg: &DecodeConfig,
    over: Option<RefineOverride>,
) -> Result<Hypothesis> {
    if cfg.max_len == 0 {
        return Err(Error::InvalidArgument("max-len must be >= 1".into()));
    }
    let policy = resolve_policy(model, cfg, over)?;
    let mut g = Graph::eval();
    let source = model.encode_source(&mut g, src)?;
    let raw = source.states;
    let cache = match (&policy, model.refiner.is_some()) {
        (StepPolicy::Fixed, _) | (_, false) => None,
        _ => Some(model.refine_cache(&mut g, raw)?),
    };
    let s0 = init_state(&mut g, &model.store, &model.decoder, source.bwd_first)?;
    let mut state = DecodeState {
        s: s0,
        cur: None,
        pending: None,
        tokens: Vec::new(),
        log_prob: 0.0,
        attention: Vec::new(),
        trace: None,
        refine_ops: 0,
        ended: false,
    };

    for step in 0..cfg.max_len {
        let y_id = if step == 0 {
            BOS
        } else {
            *state.tokens.last().unwrap()
        };
        let y_emb = model.decoder.embed_token(&mut g, &model.store, y_id)?;
        establish_states(&mut g, model, &policy, raw, cache.as_ref(), &mut state, step)?;
        let cur = state.cur.expect("states established");
        let (ctx, alpha) = attend(&mut g, &model.store, &model.attention, state.s, cur.states, cur.keys)?;
        let s_next = decoder_step(&mut g, &model.store, &model.decoder, y_emb, state.s, ctx)?;
        let probs = predict(&mut g, &model.store, &model.output, s_next, y_emb, ctx, None)?;

        let token = pick_argmax(g.value(probs).data());
        state.log_prob += g.value(probs).data()[token].ln();
        state.tokens.push(token as u32);
        state.attention.push(g.value(alpha).data().to_vec());
        state.s = s_next;
        state.pending = Some((s_next, y_emb, ctx));
        if token as u32 == EOS {
            state.ended = true;
            break;
        }
    }

    Ok(Hypothesis {
        tokens: state.tokens,
        log_prob: state.log_prob,
        attention: state.attention,
        trace: state.trace,
        refine_ops: state.refine_ops,
    })
}

pub fn beam_search(model: &Model, src: &[u32], cfg: &DecodeConfig) -> Result<Hypothesis> {
    beam_search_with(model, src, cfg, None)
}

pub fn beam_search_with(
    model: &Model,
    src: &[u32],
    cfg: &DecodeConfig,
    over: Option<RefineOverride>,
) -> Result<Hypothesis> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::InvalidArgument("beam and max-len must be >= 1".into()));
    }
    let policy = resolve_policy(model, cfg, over)?;
    let mut g = Graph::eval();
    let source = model.encode_source(&mut g, src)?;
    let raw = source.states;
    let cache = match (&policy, model.refiner.is_some()) {
        (StepPolicy::Fixed, _) | (_, false) => None,
        _ => Some(model.refine_cache(&mut g, raw)?),
    };
    let s0 = init_state(&mut g, &model.store, &model.decoder, source.bwd_first)?;

    let mut beams = vec![DecodeState {
        s: s0,
        cur: None,
        pending: None,
        tokens: Vec::new(),
        log_prob: 0.0,
        attention: Vec::new(),
        trace: None,
        refine_ops: 0,
        ended: false,
    }];
    let mut completed: Vec<DecodeState> = Vec::new();

    for step in 0..cfg.max_len {
        // candidate = (cum logp, beam index, token, step outputs)
        let mut candidates: Vec<(f64, usize, u32, NodeId, NodeId, NodeId, Vec<f64>)> = Vec::new();
        for (bi, beam) in beams.iter_mut().enumerate() {
            let y_id = if step == 0 {
                BOS
            } else {
                *beam.tokens.last().unwrap()
            };
            let y_emb = model.decoder.embed_token(&mut g, &model.store, y_id)?;
            establish_states(&mut g, model, &policy, raw, cache.as_ref(), beam, step)?;
            let cur = beam.cur.expect("states established");
            let (ctx, alpha) =
                attend(&mut g, &model.store, &model.attention, beam.s, cur.states, cur.keys)?;
            let s_next = decoder_step(&mut g, &model.store, &model.decoder, y_emb, beam.s, ctx)?;
            let probs = predict(&mut g, &model.store, &model.output, s_next, y_emb, ctx, None)?;
            let alpha_v = g.value(alpha).data().to_vec();
            for (tok, &p) in g.value(probs).data().iter().enumerate() {
                if tok == PAD as usize {
                    continue;
                }
                candidates.push((
                    beam.log_prob + p.ln(),
                    bi,
                    tok as u32,
                    s_next,
                    y_emb,
                    ctx,
                    alpha_v.clone(),
                ));
            }
        }
        // best first; ties resolved by beam index then token id
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        // keep the overall top-beam candidates; EOS ones complete
        let mut next: Vec<DecodeState> = Vec::with_capacity(cfg.beam);
        for (logp, bi, tok, s_next, y_emb, ctx, alpha_v) in candidates.into_iter().take(cfg.beam) {
            let parent = &beams[bi];
            let mut child = DecodeState {
                s: s_next,
                cur: parent.cur,
                pending: Some((s_next, y_emb, ctx)),
                tokens: parent.tokens.clone(),
                log_prob: logp,
                attention: parent.attention.clone(),
                trace: parent.trace.clone(),
                refine_ops: parent.refine_ops,
                ended: false,
            };
            child.tokens.push(tok);
            child.attention.push(alpha_v);
            if tok == EOS {
                child.ended = true;
                completed.push(child);
            } else {
                next.push(child);
            }
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
    }
    // hypotheses that hit max-len without EOS count as completed
    completed.extend(beams);
    if completed.is_empty() {
        return Err(Error::InvalidArgument("beam search produced no hypothesis".into()));
    }

    let best = completed
        .into_iter()
        .map(|st| Hypothesis {
            tokens: st.tokens,
            log_prob: st.log_prob,
            attention: st.attention,
            trace: st.trace,
            refine_ops: st.refine_ops,
        })
        .max_by(|a, b| {
            a.score(cfg.length_norm)
                .total_cmp(&b.score(cfg.length_norm))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .unwrap();
    Ok(best)
}
