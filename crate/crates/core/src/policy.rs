//! Autoregressive ego action model.
//!
//! The policy scores the token vocabulary conditioned on the ego's own
//! history and kinematics, neighbor and map sets, upcoming route points,
//! world-model-predicted neighbor end-states, and the correction trace —
//! the ordered rejected proposals of the current planning step. An empty
//! trace contributes an all-zero embedding, so the uncorrected proposal
//! distribution is exactly the base policy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    attention_backward, attention_forward, cross_entropy, mean_pool, mean_pool_backward, softmax,
    AttnCache, Grads, Mlp, MlpCache, ParamStore, Tensor,
};
use crate::scene::{polyline_pose_at, polyline_project, to_frame, Pose2D, Route};
use crate::tokenizer::TokenId;
use crate::world::{
    build_agent_context_full, AgentContext, SceneView, EMBED_DIM, HIDDEN_DIM, HISTORY_TOKENS,
    NEIGHBORS, POS_SCALE,
};

/// Upcoming route points fed to the policy.
pub const ROUTE_POINTS: usize = 16;
/// Spacing between route points, meters.
pub const ROUTE_SPACING_M: f64 = 2.0;
/// Hard upper bound on the correction-trace length (position-table size).
pub const MAX_TRACE: usize = 12;

/// Ordered rejected proposals at the current planning step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectionTrace {
    pub rejected: Vec<TokenId>,
}

impl CorrectionTrace {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rejected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rejected.is_empty()
    }

    pub fn push(&mut self, id: TokenId) {
        debug_assert!(self.rejected.len() < MAX_TRACE);
        self.rejected.push(id);
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.rejected.contains(&id)
    }

    /// View truncated to the final element (the last-token-only variant).
    pub fn last_only(&self) -> Self {
        Self {
            rejected: self.rejected.last().map(|&t| vec![t]).unwrap_or_default(),
        }
    }
}

/// Full conditioning set for one ego proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoContext {
    pub agent: AgentContext,
    /// rel x, rel y, cos(rel tangent), sin(rel tangent), present
    pub route_points: [[f64; 5]; ROUTE_POINTS],
    /// per neighbor slot: predicted end-state rel x, y, heading, speed, present
    pub predicted_agents: [[f64; 5]; NEIGHBORS],
    pub trace: CorrectionTrace,
}

impl EgoContext {
    /// Same context with a different trace.
    pub fn with_trace(&self, trace: CorrectionTrace) -> Self {
        Self {
            trace,
            ..self.clone()
        }
    }
}

/// Build the ego conditioning block. `predict_end_state` maps a body index
/// to its world-model-predicted next end state (world frame), or None to
/// leave the slot padded.
pub fn build_ego_context<F>(
    view: &SceneView,
    ego_index: usize,
    route: &Route,
    trace: &CorrectionTrace,
    pad_id: TokenId,
    mut predict_end_state: F,
) -> Result<EgoContext>
where
    F: FnMut(usize) -> Result<Option<(Pose2D, f64)>>,
{
    let (agent, neighbor_indices) = build_agent_context_full(view, ego_index, pad_id);
    let ego_pose = view.bodies[ego_index].state.pose;

    let centerline = route.centerline(view.map);
    let mut route_points = [[0.0; 5]; ROUTE_POINTS];
    if centerline.len() >= 2 {
        let (s0, _) = polyline_project(&centerline, [ego_pose.x, ego_pose.y]);
        for (k, slot) in route_points.iter_mut().enumerate() {
            let pose = polyline_pose_at(&centerline, s0 + (k + 1) as f64 * ROUTE_SPACING_M);
            let rel = to_frame(pose, ego_pose);
            *slot = [
                rel.x * POS_SCALE,
                rel.y * POS_SCALE,
                rel.heading.cos(),
                rel.heading.sin(),
                1.0,
            ];
        }
    }

    let mut predicted_agents = [[0.0; 5]; NEIGHBORS];
    for (slot, &body_idx) in neighbor_indices.iter().enumerate() {
        if let Some((pose, speed)) = predict_end_state(body_idx)? {
            let rel = to_frame(pose, ego_pose);
            predicted_agents[slot] = [
                rel.x * POS_SCALE,
                rel.y * POS_SCALE,
                rel.heading,
                speed * POS_SCALE,
                1.0,
            ];
        }
    }

    Ok(EgoContext {
        agent,
        route_points,
        predicted_agents,
        trace: trace.clone(),
    })
}

/// Policy network; parameters are prefixed "pi.".
#[derive(Debug, Clone)]
pub struct Policy {
    pub vocab_size: usize,
    kin: Mlp,
    nbr: Mlp,
    map: Mlp,
    route: Mlp,
    pred: Mlp,
    fuse: Mlp,
    head: Mlp,
}

pub struct TraceCache {
    token_ids: Vec<TokenId>,
    attn: AttnCache,
    attended: Vec<Vec<f64>>,
}

pub struct PolicyCache {
    ctx: EgoContext,
    kin: MlpCache,
    nbr: Vec<MlpCache>,
    map: Vec<MlpCache>,
    route: Vec<MlpCache>,
    pred: Vec<MlpCache>,
    trace: Option<TraceCache>,
    fuse: MlpCache,
    head: MlpCache,
}

const FUSE_IN: usize = HISTORY_TOKENS * EMBED_DIM + EMBED_DIM + 4 * HIDDEN_DIM + EMBED_DIM;

impl Policy {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            kin: Mlp::new("pi.kin", &[2, EMBED_DIM], true),
            nbr: Mlp::new("pi.nbr", &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            map: Mlp::new("pi.map", &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            route: Mlp::new("pi.route", &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            pred: Mlp::new("pi.pred", &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            fuse: Mlp::new("pi.fuse", &[FUSE_IN, HIDDEN_DIM, HIDDEN_DIM], true),
            head: Mlp::new("pi.head", &[HIDDEN_DIM, vocab_size], false),
        }
    }

    pub fn pad_id(&self) -> TokenId {
        self.vocab_size
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let rows = self.vocab_size + 1;
        let emb: Vec<f64> = (0..rows * EMBED_DIM)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        store.insert("pi.tok_emb", Tensor::from_vec(&[rows, EMBED_DIM], emb));
        let pos: Vec<f64> = (0..MAX_TRACE * EMBED_DIM)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        store.insert(
            "pi.trace_pos",
            Tensor::from_vec(&[MAX_TRACE, EMBED_DIM], pos),
        );
        for name in ["pi.attn.wq", "pi.attn.wk", "pi.attn.wv"] {
            let a = (6.0 / (2 * EMBED_DIM) as f64).sqrt();
            let data: Vec<f64> = (0..EMBED_DIM * EMBED_DIM)
                .map(|_| rng.random_range(-a..a))
                .collect();
            store.insert(name, Tensor::from_vec(&[EMBED_DIM, EMBED_DIM], data));
        }
        self.kin.init(store, rng, false);
        self.nbr.init(store, rng, false);
        self.map.init(store, rng, false);
        self.route.init(store, rng, false);
        self.pred.init(store, rng, false);
        self.fuse.init(store, rng, false);
        self.head.init(store, rng, true);
    }

    /// Encode the correction trace: position-augmented token embeddings
    /// through one self-attention block, mean-pooled. Empty trace encodes
    /// to the zero vector without touching any trace parameter.
    pub fn encode_trace(
        &self,
        store: &ParamStore,
        trace: &CorrectionTrace,
    ) -> Result<(Vec<f64>, Option<TraceCache>)> {
        if trace.is_empty() {
            return Ok((vec![0.0; EMBED_DIM], None));
        }
        if trace.len() > MAX_TRACE {
            return Err(Error::InvalidParameter(format!(
                "trace length {} exceeds maximum {MAX_TRACE}",
                trace.len()
            )));
        }
        let emb = store.get("pi.tok_emb");
        let pos = store.get("pi.trace_pos");
        let mut xs = Vec::with_capacity(trace.len());
        for (i, &tok) in trace.rejected.iter().enumerate() {
            if tok >= self.vocab_size {
                return Err(Error::InvalidToken {
                    id: tok,
                    vocab: self.vocab_size,
                });
            }
            let x: Vec<f64> = emb
                .row(tok)
                .iter()
                .zip(pos.row(i))
                .map(|(e, p)| e + p)
                .collect();
            xs.push(x);
        }
        let (attended, attn) = attention_forward(
            store.get("pi.attn.wq"),
            store.get("pi.attn.wk"),
            store.get("pi.attn.wv"),
            &xs,
        )?;
        let pooled = mean_pool(&attended);
        Ok((
            pooled,
            Some(TraceCache {
                token_ids: trace.rejected.clone(),
                attn,
                attended,
            }),
        ))
    }

    fn trace_backward(
        &self,
        store: &ParamStore,
        cache: &TraceCache,
        gpooled: &[f64],
        grads: &mut Grads,
    ) {
        let gelem = mean_pool_backward(cache.attended.len(), gpooled);
        let gys: Vec<Vec<f64>> = vec![gelem; cache.attended.len()];
        let gxs = attention_backward(
            store.get("pi.attn.wq"),
            store.get("pi.attn.wk"),
            store.get("pi.attn.wv"),
            ["pi.attn.wq", "pi.attn.wk", "pi.attn.wv"],
            &cache.attn,
            &gys,
            grads,
        );
        let emb = store.get("pi.tok_emb");
        let rows = emb.shape[0];
        let mut demb = vec![0.0; rows * EMBED_DIM];
        let mut dpos = vec![0.0; MAX_TRACE * EMBED_DIM];
        for (i, gx) in gxs.iter().enumerate() {
            let tok = cache.token_ids[i];
            for (j, g) in gx.iter().enumerate() {
                demb[tok * EMBED_DIM + j] += g;
                dpos[i * EMBED_DIM + j] += g;
            }
        }
        grads.accum("pi.tok_emb", &[rows, EMBED_DIM], &demb);
        grads.accum("pi.trace_pos", &[MAX_TRACE, EMBED_DIM], &dpos);
    }

    pub fn forward(&self, store: &ParamStore, ctx: &EgoContext) -> Result<(Vec<f64>, PolicyCache)> {
        let emb = store.get("pi.tok_emb");
        let mut fused = Vec::with_capacity(FUSE_IN);
        for &tok in &ctx.agent.history_tokens {
            if tok > self.vocab_size {
                return Err(Error::InvalidToken {
                    id: tok,
                    vocab: self.vocab_size,
                });
            }
            fused.extend_from_slice(emb.row(tok));
        }
        let (kin_out, kin_cache) = self.kin.forward(store, &ctx.agent.kinematics)?;
        fused.extend_from_slice(&kin_out);

        let encode_set = |mlp: &Mlp, rows: &[[f64; 5]]| -> Result<(Vec<f64>, Vec<MlpCache>)> {
            let mut caches = Vec::with_capacity(rows.len());
            let mut encoded = Vec::with_capacity(rows.len());
            for row in rows {
                let (enc, cache) = mlp.forward(store, row)?;
                encoded.push(enc);
                caches.push(cache);
            }
            Ok((mean_pool(&encoded), caches))
        };
        let (nbr_pool, nbr_caches) = encode_set(&self.nbr, &ctx.agent.neighbors)?;
        fused.extend_from_slice(&nbr_pool);
        let (map_pool, map_caches) = encode_set(&self.map, &ctx.agent.map_points)?;
        fused.extend_from_slice(&map_pool);
        let (route_pool, route_caches) = encode_set(&self.route, &ctx.route_points)?;
        fused.extend_from_slice(&route_pool);
        let (pred_pool, pred_caches) = encode_set(&self.pred, &ctx.predicted_agents)?;
        fused.extend_from_slice(&pred_pool);

        let (trace_emb, trace_cache) = self.encode_trace(store, &ctx.trace)?;
        fused.extend_from_slice(&trace_emb);

        let (hidden, fuse_cache) = self.fuse.forward(store, &fused)?;
        let (logits, head_cache) = self.head.forward(store, &hidden)?;
        Ok((
            logits,
            PolicyCache {
                ctx: ctx.clone(),
                kin: kin_cache,
                nbr: nbr_caches,
                map: map_caches,
                route: route_caches,
                pred: pred_caches,
                trace: trace_cache,
                fuse: fuse_cache,
                head: head_cache,
            },
        ))
    }

    /// Proposal distribution over the vocabulary.
    pub fn propose(&self, store: &ParamStore, ctx: &EgoContext) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(store, ctx)?.0))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PolicyCache,
        glogits: &[f64],
        grads: &mut Grads,
    ) {
        let ghidden = self.head.backward(store, &cache.head, glogits, grads);
        let gfused = self.fuse.backward(store, &cache.fuse, &ghidden, grads);

        let mut off = 0;
        let emb = store.get("pi.tok_emb");
        let rows = emb.shape[0];
        let mut demb = vec![0.0; rows * EMBED_DIM];
        for &tok in &cache.ctx.agent.history_tokens {
            for (j, g) in gfused[off..off + EMBED_DIM].iter().enumerate() {
                demb[tok * EMBED_DIM + j] += g;
            }
            off += EMBED_DIM;
        }
        grads.accum("pi.tok_emb", &[rows, EMBED_DIM], &demb);

        self.kin
            .backward(store, &cache.kin, &gfused[off..off + EMBED_DIM], grads);
        off += EMBED_DIM;

        let decode_set = |mlp: &Mlp, caches: &[MlpCache], gpool: &[f64], grads: &mut Grads| {
            let gelem = mean_pool_backward(caches.len(), gpool);
            for cache_i in caches {
                mlp.backward(store, cache_i, &gelem, grads);
            }
        };
        decode_set(&self.nbr, &cache.nbr, &gfused[off..off + HIDDEN_DIM], grads);
        off += HIDDEN_DIM;
        decode_set(&self.map, &cache.map, &gfused[off..off + HIDDEN_DIM], grads);
        off += HIDDEN_DIM;
        decode_set(
            &self.route,
            &cache.route,
            &gfused[off..off + HIDDEN_DIM],
            grads,
        );
        off += HIDDEN_DIM;
        decode_set(
            &self.pred,
            &cache.pred,
            &gfused[off..off + HIDDEN_DIM],
            grads,
        );
        off += HIDDEN_DIM;

        if let Some(trace_cache) = &cache.trace {
            self.trace_backward(store, trace_cache, &gfused[off..off + EMBED_DIM], grads);
        }
    }

    /// Mean next-token cross-entropy over (context, expert token) pairs.
    /// Used for both the imitation batch (empty traces) and the correction
    /// batch (synthetic unsafe traces).
    pub fn nll_loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[(EgoContext, TokenId)],
    ) -> Result<(f64, Grads)> {
        let mut grads = Grads::new();
        let mut total = 0.0;
        for (ctx, target) in batch {
            if *target >= self.vocab_size {
                return Err(Error::InvalidToken {
                    id: *target,
                    vocab: self.vocab_size,
                });
            }
            let (logits, cache) = self.forward(store, ctx)?;
            let (loss, glogits, _) = cross_entropy(&softmax(&logits), *target);
            total += loss;
            self.backward(store, &cache, &glogits, &mut grads);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }
}
