//! Model assembly: one parameter store per variant plus the teacher-forced
//! training unroll.
//!
//! Base parameters (encoder, attention, decoder, output) are always drawn
//! first from the seeded RNG, in a fixed order, so every variant shares the
//! same base initialization for the same seed; variant extras follow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::policy::{
    gumbel_softmax, mix_nodes, penalty_node, policy_logits, policy_state, sample_gumbel,
    st_discretize, Action, PolicyParams, PolicyTrace, REFINE, REUSE,
};
use crate::refiner::{make_refine_cache, refine_cached, RefineCache, RefineMode, RefinerParams};
use crate::seq2seq::{
    attend, attn_keys, decoder_step, encode, init_state, predict, AttentionParams, DecoderParams,
    EncoderParams, ExtraLayer, OutputParams,
};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
    pub output: OutputParams,
    pub extra_layer: Option<ExtraLayer>,
    pub refiner: Option<RefinerParams>,
    pub policy: Option<PolicyParams>,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, src_vocab_size: usize, tgt_vocab_size: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (emb, rnn, d_h, d_s) = (cfg.emb_dim, cfg.rnn_dim, cfg.hidden_dim(), cfg.state_dim());

        let encoder = EncoderParams::init(&mut store, &mut rng, src_vocab_size, emb, rnn);
        let attention = AttentionParams::init(&mut store, &mut rng, d_s, d_h, cfg.attn_dim);
        let decoder = DecoderParams::init(&mut store, &mut rng, tgt_vocab_size, emb, rnn, d_s);
        let output = OutputParams::init(&mut store, &mut rng, d_s, emb, d_h, tgt_vocab_size);

        let extra_layer = matches!(cfg.variant, Variant::MultiLayer)
            .then(|| ExtraLayer::init(&mut store, &mut rng, d_h));
        let refiner = refine_mode_of(cfg.variant)
            .map(|mode| RefinerParams::init(&mut store, &mut rng, mode, d_h, d_s, rnn));
        let policy = cfg
            .variant
            .has_policy()
            .then(|| PolicyParams::init(&mut store, &mut rng, d_s, emb, d_h, cfg.policy_dim));

        Ok(Model {
            cfg,
            store,
            encoder,
            attention,
            decoder,
            output,
            extra_layer,
            refiner,
            policy,
            src_vocab_size,
            tgt_vocab_size,
        })
    }

    pub fn refine_mode(&self) -> Option<RefineMode> {
        refine_mode_of(self.cfg.variant)
    }

    /// Per-group and total scalar parameter counts.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, name, value) in self.store.iter() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += value.numel(),
                None => groups.push((group, value.numel())),
            }
        }
        groups.push(("total".to_string(), self.store.total_elems()));
        groups
    }
}

fn refine_mode_of(variant: Variant) -> Option<RefineMode> {
    match variant {
        Variant::Baseline | Variant::MultiLayer => None,
        Variant::Shallow => Some(RefineMode::Shallow),
        Variant::Deep | Variant::Conditional => Some(RefineMode::Deep),
        Variant::HardShallow => Some(RefineMode::HardShallow),
        Variant::HardDeep => Some(RefineMode::HardDeep),
    }
}

/// Encoder output after the optional extra layer.
pub struct EncodedSource {
    pub states: NodeId,
    pub bwd_first: NodeId,
}

/// Source states paired with their attention-key projection; the pair is
/// replaced together whenever the states are refined.
#[derive(Clone, Copy)]
pub struct StepStates {
    pub states: NodeId,
    pub keys: NodeId,
}

impl Model {
    pub fn encode_source(&self, g: &mut Graph, src: &[u32]) -> Result<EncodedSource> {
        let enc = encode(g, &self.store, &self.encoder, src)?;
        let states = match &self.extra_layer {
            Some(layer) => layer.apply(g, &self.store, enc.states)?,
            None => enc.states,
        };
        Ok(EncodedSource {
            states,
            bwd_first: enc.bwd_first,
        })
    }

    pub fn with_keys(&self, g: &mut Graph, states: NodeId) -> Result<StepStates> {
        let keys = attn_keys(g, &self.store, &self.attention, states)?;
        Ok(StepStates { states, keys })
    }

    /// Per-sentence cache for repeated refining over the same raw states.
    pub fn refine_cache(&self, g: &mut Graph, raw: NodeId) -> Result<RefineCache> {
        let params = self
            .refiner
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("variant has no refiner".into()))?;
        make_refine_cache(g, &self.store, params, raw)
    }

    /// Refines the raw states against `s_prev` and projects fresh keys.
    /// Returns the gate activations alongside for saliency export.
    pub fn refreshed_states(
        &self,
        g: &mut Graph,
        raw: NodeId,
        cache: &RefineCache,
        s_prev: NodeId,
    ) -> Result<(StepStates, NodeId)> {
        self.refreshed_states_blend(g, raw, cache, s_prev, 1.0)
    }

    /// [`Model::refreshed_states`] with the deep-path handover weight (used
    /// by the training curriculum; 1.0 is the pure composition).
    pub fn refreshed_states_blend(
        &self,
        g: &mut Graph,
        raw: NodeId,
        cache: &RefineCache,
        s_prev: NodeId,
        blend: f64,
    ) -> Result<(StepStates, NodeId)> {
        let mode = self
            .refine_mode()
            .ok_or_else(|| Error::InvalidArgument("variant has no refiner".into()))?;
        let params = self.refiner.as_ref().expect("refiner params");
        let refined = refine_cached(g, &self.store, params, raw, cache, s_prev, mode)?;
        let states = if mode.is_deep() && blend < 1.0 {
            let deep_part = g.affine(refined.states, blend, 0.0)?;
            let gated_part = g.affine(refined.gated, 1.0 - blend, 0.0)?;
            g.add(deep_part, gated_part)?
        } else {
            refined.states
        };
        Ok((self.with_keys(g, states)?, refined.gate))
    }
}

// ── Teacher-forced unroll ───────────────────────────────────────────────

/// How conditional-policy actions enter the unrolled graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicySampling {
    /// Straight-through: hard one-hot forward, relaxed backward.
    Hard,
    /// Relaxed sample mixed directly (differentiable everywhere; used by
    /// the gradient checks).
    Soft,
    /// Deterministic inference rule: refine when `pi_refine >= threshold`,
    /// no noise (evaluation only).
    Greedy { threshold: f64 },
}

pub struct UnrollOptions {
    pub dropout: f64,
    pub tau: f64,
    pub alpha: f64,
    pub policy: PolicySampling,
    /// Deep-path handover weight in [0, 1]: the states handed to attention
    /// are `blend * reencoded + (1 - blend) * gated`. Early training uses
    /// values below 1 so the encoder matures before the re-encoder takes
    /// over; inference always runs at 1.
    pub deep_blend: f64,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        UnrollOptions {
            dropout: 0.0,
            tau: 1.0,
            alpha: 0.0,
            policy: PolicySampling::Hard,
            deep_blend: 1.0,
        }
    }
}

pub struct SentenceLoss {
    /// Mean NLL plus refine penalty (when present).
    pub total: NodeId,
    /// Mean over target tokens of -log p.
    pub nll: NodeId,
    /// Sum over target tokens (for batch-weighted accumulation).
    pub nll_sum: NodeId,
    pub penalty: Option<NodeId>,
    pub token_count: usize,
    /// Teacher-forced argmax hits.
    pub correct: usize,
    pub trace: Option<PolicyTrace>,
    /// Per-step gate activations for refining variants.
    pub gates: Vec<NodeId>,
    /// Per-step `-log p(y_i)` nodes (saliency backpropagates from these).
    pub step_losses: Vec<NodeId>,
}

impl Model {
    /// Builds the teacher-forced loss for one sentence pair. `tgt` carries
    /// raw token ids; BOS/EOS framing happens here. Deterministic given
    /// the RNG state.
    pub fn sentence_loss<R: Rng>(
        &self,
        g: &mut Graph,
        src: &[u32],
        tgt: &[u32],
        opts: &UnrollOptions,
        rng: &mut R,
    ) -> Result<SentenceLoss> {
        if tgt.is_empty() {
            return Err(Error::InvalidArgument("empty target sentence".into()));
        }
        let steps = tgt.len() + 1; // every token plus EOS
        let inputs: Vec<u32> = std::iter::once(BOS).chain(tgt.iter().copied()).collect();
        let golds: Vec<u32> = tgt.iter().copied().chain(std::iter::once(EOS)).collect();

        let source = self.encode_source(g, src)?;
        let raw = source.states;
        let mut s = init_state(g, &self.store, &self.decoder, source.bwd_first)?;

        let conditional = self.policy.is_some();
        let mode = self.refine_mode();
        let mut cur: Option<StepStates> = match mode {
            None => Some(self.with_keys(g, raw)?),
            Some(_) => None,
        };
        let cache = match mode {
            Some(_) => Some(self.refine_cache(g, raw)?),
            None => None,
        };

        let mut trace = conditional.then(PolicyTrace::new);
        let mut refine_indicators: Vec<NodeId> = Vec::new();
        let mut gates = Vec::new();
        let mut step_losses = Vec::with_capacity(steps);
        let mut correct = 0;

        for i in 0..steps {
            let y_emb = self.decoder.embed_token(g, &self.store, inputs[i])?;
            if mode.is_some() {
                if !conditional {
                    let (fresh, gate) =
                        self.refreshed_states_blend(g, raw, cache.as_ref().unwrap(), s, opts.deep_blend)?;
                    gates.push(gate);
                    cur = Some(fresh);
                } else if i == 0 {
                    // forced initial refine from s_0
                    let (fresh, gate) =
                        self.refreshed_states_blend(g, raw, cache.as_ref().unwrap(), s, opts.deep_blend)?;
                    gates.push(gate);
                    cur = Some(fresh);
                    trace.as_mut().unwrap().push_forced(opts.tau);
                    refine_indicators.push(g.leaf(Tensor::scalar(1.0)));
                }
            }
            let step_states = cur.expect("step states set");

            let (ctx, _alpha) = attend(
                g,
                &self.store,
                &self.attention,
                s,
                step_states.states,
                step_states.keys,
            )?;
            let s_next = decoder_step(g, &self.store, &self.decoder, y_emb, s, ctx)?;
            let mask = (opts.dropout > 0.0 && g.is_training())
                .then(|| dropout_mask(rng, self.output.readout_dim, opts.dropout));
            let probs = predict(
                g,
                &self.store,
                &self.output,
                s_next,
                y_emb,
                ctx,
                mask.as_deref(),
            )?;

            let gold = golds[i];
            if g.value(probs).argmax() == gold as usize {
                correct += 1;
            }
            let p_gold = g.element(probs, gold as usize)?;
            let logp = g.log(p_gold)?;
            let loss_i = g.affine(logp, -1.0, 0.0)?;
            step_losses.push(loss_i);
            s = s_next;

            // decide refine/reuse for the next step
            if conditional && i + 1 < steps {
                let pol = self.policy.as_ref().unwrap();
                let m = policy_state(g, &self.store, pol, s, y_emb, ctx)?;
                let (o, pi) = policy_logits(g, &self.store, pol, m)?;
                let pi_v = [g.value(pi).data()[REUSE], g.value(pi).data()[REFINE]];
                let (chosen, relaxed_v, action) = match opts.policy {
                    PolicySampling::Hard => {
                        let noise = [sample_gumbel(rng), sample_gumbel(rng)];
                        let relaxed = gumbel_softmax(g, o, &noise, opts.tau)?;
                        let rel_v = [g.value(relaxed).data()[REUSE], g.value(relaxed).data()[REFINE]];
                        let action = Action::from_index(g.value(relaxed).argmax());
                        (st_discretize(g, relaxed)?, rel_v, action)
                    }
                    PolicySampling::Soft => {
                        let noise = [sample_gumbel(rng), sample_gumbel(rng)];
                        let relaxed = gumbel_softmax(g, o, &noise, opts.tau)?;
                        let rel_v = [g.value(relaxed).data()[REUSE], g.value(relaxed).data()[REFINE]];
                        let action = Action::from_index(g.value(relaxed).argmax());
                        (relaxed, rel_v, action)
                    }
                    PolicySampling::Greedy { threshold } => {
                        let action = if pi_v[REFINE] >= threshold {
                            Action::Refine
                        } else {
                            Action::Reuse
                        };
                        let mut onehot = [0.0, 0.0];
                        onehot[action.index()] = 1.0;
                        let node = g.leaf(Tensor::row_vector(onehot.to_vec()));
                        (node, pi_v, action)
                    }
                };

                let (fresh, gate) =
                    self.refreshed_states_blend(g, raw, cache.as_ref().unwrap(), s, opts.deep_blend)?;
                gates.push(gate);
                let prev = cur.expect("previous step states");
                let mixed = mix_nodes(g, chosen, prev.states, fresh.states)?;
                cur = Some(self.with_keys(g, mixed)?);

                refine_indicators.push(g.element(chosen, REFINE)?);
                trace
                    .as_mut()
                    .unwrap()
                    .push(pi_v, relaxed_v, action, opts.tau);
            }
        }

        let stacked = g.concat_cols(&step_losses)?;
        let nll = g.mean(stacked)?;
        let nll_sum = g.sum(stacked)?;
        let (total, penalty) = if conditional {
            let pen = penalty_node(g, &refine_indicators, opts.alpha)?;
            (g.add(nll, pen)?, Some(pen))
        } else {
            (nll, None)
        };

        Ok(SentenceLoss {
            total,
            nll,
            nll_sum,
            penalty,
            token_count: steps,
            correct,
            trace,
            gates,
            step_losses,
        })
    }
}

/// Pre-sampled multiplicative dropout mask: zero with probability `rate`,
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask<R: Rng>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
