//! Reactive multi-agent next-token predictor.
//!
//! For every agent the model sees only quantities expressed in that agent's
//! frame (token history, kinematics, neighbor set, nearby lane points), so
//! predictions are invariant to rigid transforms of the whole scene. Frozen
//! after pretraining, it drives background agents during RL rollouts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    adam_update, cross_entropy, mean_pool, mean_pool_backward, softmax, AdamConfig, Grads, Mlp,
    MlpCache, ParamStore, Tensor,
};
use crate::scene::{normalize_angle, to_frame, AgentState, Pose2D, RoadMap};
use crate::tokenizer::{TokenId, SUBSTEP_DT};

/// Token-history length fed to the models.
pub const HISTORY_TOKENS: usize = 4;
/// Neighbor slots per context.
pub const NEIGHBORS: usize = 8;
/// Lane-point slots per context.
pub const MAP_POINTS: usize = 16;
/// Token embedding width.
pub const EMBED_DIM: usize = 32;
/// Positions and speeds are multiplied by this before entering any network
/// (10 m and 10 m/s map to 1.0).
pub const POS_SCALE: f64 = 0.1;
/// Hidden width of every MLP.
pub const HIDDEN_DIM: usize = 64;

/// One body as the context builders see it: current state, the pose one
/// sub-step earlier (for yaw rate), and its executed token history.
#[derive(Debug, Clone)]
pub struct BodyView {
    pub state: AgentState,
    pub prev_pose: Option<Pose2D>,
    pub history_tokens: Vec<TokenId>,
}

/// A scene snapshot at a planning-step boundary.
pub struct SceneView<'a> {
    pub map: &'a RoadMap,
    pub bodies: &'a [BodyView],
}

/// Fixed-size, padded feature block for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentContext {
    /// Oldest to newest; `pad_id` (= vocabulary size) where history is short.
    pub history_tokens: [TokenId; HISTORY_TOKENS],
    /// speed, yaw rate
    pub kinematics: [f64; 2],
    /// rel x, rel y, rel heading, speed, present
    pub neighbors: [[f64; 5]; NEIGHBORS],
    /// rel x, rel y, cos(rel tangent), sin(rel tangent), present
    pub map_points: [[f64; 5]; MAP_POINTS],
}

/// Deterministic fixed-size features for `bodies[subject]`; neighbors and
/// map points picked by Euclidean distance with index tie-breaks.
pub fn build_agent_context(view: &SceneView, subject: usize, pad_id: TokenId) -> AgentContext {
    build_agent_context_full(view, subject, pad_id).0
}

/// As [`build_agent_context`], also returning the body indices occupying
/// the neighbor slots (in slot order).
pub fn build_agent_context_full(
    view: &SceneView,
    subject: usize,
    pad_id: TokenId,
) -> (AgentContext, Vec<usize>) {
    let me = &view.bodies[subject];
    let anchor = me.state.pose;

    let mut history_tokens = [pad_id; HISTORY_TOKENS];
    let hist = &me.history_tokens;
    let take = hist.len().min(HISTORY_TOKENS);
    history_tokens[HISTORY_TOKENS - take..].copy_from_slice(&hist[hist.len() - take..]);

    let yaw_rate = match me.prev_pose {
        Some(prev) => normalize_angle(anchor.heading - prev.heading) / SUBSTEP_DT,
        None => 0.0,
    };
    let kinematics = [me.state.speed * POS_SCALE, yaw_rate];

    // k-nearest other bodies
    let mut others: Vec<(f64, usize)> = view
        .bodies
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != subject)
        .map(|(i, b)| {
            let dx = b.state.pose.x - anchor.x;
            let dy = b.state.pose.y - anchor.y;
            (dx * dx + dy * dy, i)
        })
        .collect();
    others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut neighbors = [[0.0; 5]; NEIGHBORS];
    let mut neighbor_indices = Vec::with_capacity(NEIGHBORS);
    for (slot, &(_, i)) in others.iter().take(NEIGHBORS).enumerate() {
        let b = &view.bodies[i];
        let rel = to_frame(b.state.pose, anchor);
        neighbors[slot] = [
            rel.x * POS_SCALE,
            rel.y * POS_SCALE,
            rel.heading,
            b.state.speed * POS_SCALE,
            1.0,
        ];
        neighbor_indices.push(i);
    }

    // k-nearest lane vertices with tangents
    let mut pts: Vec<(f64, usize, usize)> = Vec::new();
    for (li, lane) in view.map.lanes.iter().enumerate() {
        for (pi, p) in lane.points.iter().enumerate() {
            let dx = p[0] - anchor.x;
            let dy = p[1] - anchor.y;
            pts.push((dx * dx + dy * dy, li, pi));
        }
    }
    pts.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut map_points = [[0.0; 5]; MAP_POINTS];
    for (slot, &(_, li, pi)) in pts.iter().take(MAP_POINTS).enumerate() {
        let lane = &view.map.lanes[li];
        let p = lane.points[pi];
        let (a, b) = if pi + 1 < lane.points.len() {
            (lane.points[pi], lane.points[pi + 1])
        } else {
            (lane.points[pi - 1], lane.points[pi])
        };
        let tangent = (b[1] - a[1]).atan2(b[0] - a[0]);
        let rel = to_frame(Pose2D::new(p[0], p[1], tangent), anchor);
        map_points[slot] = [
            rel.x * POS_SCALE,
            rel.y * POS_SCALE,
            rel.heading.cos(),
            rel.heading.sin(),
            1.0,
        ];
    }

    (
        AgentContext {
            history_tokens,
            kinematics,
            neighbors,
            map_points,
        },
        neighbor_indices,
    )
}

/// World-model network definition; parameters are prefixed "wm.".
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub vocab_size: usize,
    kin: Mlp,
    nbr: Mlp,
    map: Mlp,
    fuse: Mlp,
    head: Mlp,
}

pub struct WmCache {
    ctx: AgentContext,
    kin: MlpCache,
    nbr: Vec<MlpCache>,
    nbr_encoded: Vec<Vec<f64>>,
    map: Vec<MlpCache>,
    map_encoded: Vec<Vec<f64>>,
    fuse: MlpCache,
    head: MlpCache,
}

impl WorldModel {
    pub fn new(vocab_size: usize) -> Self {
        Self::with_prefix("wm", vocab_size)
    }

    /// Same architecture under a different parameter prefix (the policy
    /// reuses these encoders).
    pub fn with_prefix(prefix: &str, vocab_size: usize) -> Self {
        let fuse_in = HISTORY_TOKENS * EMBED_DIM + EMBED_DIM + 2 * HIDDEN_DIM;
        Self {
            vocab_size,
            kin: Mlp::new(format!("{prefix}.kin"), &[2, EMBED_DIM], true),
            nbr: Mlp::new(format!("{prefix}.nbr"), &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            map: Mlp::new(format!("{prefix}.map"), &[5, HIDDEN_DIM, HIDDEN_DIM], true),
            fuse: Mlp::new(
                format!("{prefix}.fuse"),
                &[fuse_in, HIDDEN_DIM, HIDDEN_DIM],
                true,
            ),
            head: Mlp::new(format!("{prefix}.head"), &[HIDDEN_DIM, vocab_size], false),
        }
    }

    pub fn prefix(&self) -> &str {
        self.kin.prefix.strip_suffix(".kin").unwrap()
    }

    fn emb_name(&self) -> String {
        format!("{}.tok_emb", self.prefix())
    }

    pub fn pad_id(&self) -> TokenId {
        self.vocab_size
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let rows = self.vocab_size + 1; // + padding row
        let data: Vec<f64> = (0..rows * EMBED_DIM)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        store.insert(self.emb_name(), Tensor::from_vec(&[rows, EMBED_DIM], data));
        self.kin.init(store, rng, false);
        self.nbr.init(store, rng, false);
        self.map.init(store, rng, false);
        self.fuse.init(store, rng, false);
        // zero head: untrained model emits the uniform distribution
        self.head.init(store, rng, true);
    }

    pub fn forward(&self, store: &ParamStore, ctx: &AgentContext) -> Result<(Vec<f64>, WmCache)> {
        let emb = store.get(&self.emb_name());
        let mut fused = Vec::with_capacity(HISTORY_TOKENS * EMBED_DIM + EMBED_DIM + 2 * HIDDEN_DIM);
        for &tok in &ctx.history_tokens {
            if tok > self.vocab_size {
                return Err(Error::InvalidToken {
                    id: tok,
                    vocab: self.vocab_size,
                });
            }
            fused.extend_from_slice(emb.row(tok));
        }
        let (kin_out, kin_cache) = self.kin.forward(store, &ctx.kinematics)?;
        fused.extend_from_slice(&kin_out);

        let mut nbr_caches = Vec::with_capacity(NEIGHBORS);
        let mut nbr_encoded = Vec::with_capacity(NEIGHBORS);
        for row in &ctx.neighbors {
            let (enc, cache) = self.nbr.forward(store, row)?;
            nbr_encoded.push(enc);
            nbr_caches.push(cache);
        }
        fused.extend_from_slice(&mean_pool(&nbr_encoded));

        let mut map_caches = Vec::with_capacity(MAP_POINTS);
        let mut map_encoded = Vec::with_capacity(MAP_POINTS);
        for row in &ctx.map_points {
            let (enc, cache) = self.map.forward(store, row)?;
            map_encoded.push(enc);
            map_caches.push(cache);
        }
        fused.extend_from_slice(&mean_pool(&map_encoded));

        let (hidden, fuse_cache) = self.fuse.forward(store, &fused)?;
        let (logits, head_cache) = self.head.forward(store, &hidden)?;
        Ok((
            logits,
            WmCache {
                ctx: ctx.clone(),
                kin: kin_cache,
                nbr: nbr_caches,
                nbr_encoded,
                map: map_caches,
                map_encoded,
                fuse: fuse_cache,
                head: head_cache,
            },
        ))
    }

    /// Probability vector over the vocabulary; strictly positive.
    pub fn predict_dist(&self, store: &ParamStore, ctx: &AgentContext) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(store, ctx)?.0))
    }

    /// Backpropagate a logit gradient; accumulates into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &WmCache,
        glogits: &[f64],
        grads: &mut Grads,
    ) {
        let ghidden = self.head.backward(store, &cache.head, glogits, grads);
        let gfused = self.fuse.backward(store, &cache.fuse, &ghidden, grads);

        let mut off = 0;
        let emb_name = self.emb_name();
        let emb = store.get(&emb_name);
        let rows = emb.shape[0];
        let mut emb_delta = vec![0.0; rows * EMBED_DIM];
        for &tok in &cache.ctx.history_tokens {
            let g = &gfused[off..off + EMBED_DIM];
            for (j, gv) in g.iter().enumerate() {
                emb_delta[tok * EMBED_DIM + j] += gv;
            }
            off += EMBED_DIM;
        }
        grads.accum(&emb_name, &[rows, EMBED_DIM], &emb_delta);

        let gkin = &gfused[off..off + EMBED_DIM];
        self.kin.backward(store, &cache.kin, gkin, grads);
        off += EMBED_DIM;

        let gnbr_pool = &gfused[off..off + HIDDEN_DIM];
        let gnbr_elem = mean_pool_backward(cache.nbr_encoded.len(), gnbr_pool);
        for cache_i in &cache.nbr {
            self.nbr.backward(store, cache_i, &gnbr_elem, grads);
        }
        off += HIDDEN_DIM;

        let gmap_pool = &gfused[off..off + HIDDEN_DIM];
        let gmap_elem = mean_pool_backward(cache.map_encoded.len(), gmap_pool);
        for cache_i in &cache.map {
            self.map.backward(store, cache_i, &gmap_elem, grads);
        }
    }

    /// Mean next-token cross-entropy over a batch, with gradients.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[(AgentContext, TokenId)],
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
            let dist = softmax(&logits);
            let (loss, glogits, _) = cross_entropy(&dist, *target);
            total += loss;
            self.backward(store, &cache, &glogits, &mut grads);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    /// One Adam step on a batch; returns the loss.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        batch: &[(AgentContext, TokenId)],
        cfg: &AdamConfig,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(store, batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged(format!("world loss {loss}")));
        }
        adam_update(store, &grads, cfg);
        Ok(loss)
    }

    /// Sample one token per listed subject. Temperature 0 means argmax.
    pub fn sample_step(
        &self,
        store: &ParamStore,
        view: &SceneView,
        subjects: &[usize],
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(subjects.len());
        for &idx in subjects {
            let ctx = build_agent_context(view, idx, self.pad_id());
            let (logits, _) = self.forward(store, &ctx)?;
            out.push(sample_categorical(&logits, temperature, rng));
        }
        Ok(out)
    }

    /// Argmax next token for one subject (deterministic).
    pub fn argmax_token(
        &self,
        store: &ParamStore,
        view: &SceneView,
        subject: usize,
    ) -> Result<TokenId> {
        let ctx = build_agent_context(view, subject, self.pad_id());
        let (logits, _) = self.forward(store, &ctx)?;
        Ok(argmax(&logits))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw from softmax(logits / temperature); temperature 0 is argmax.
pub fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let dist = softmax(&scaled);
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{from_frame, LanePolyline};
    use std::collections::BTreeMap;

    fn small_map() -> RoadMap {
        RoadMap::new(
            vec![
                LanePolyline::new("a", 4.0, vec![[-50.0, 0.0], [0.0, 0.0], [50.0, 0.0]]),
                LanePolyline::new("b", 4.0, vec![[0.0, -50.0], [0.0, 0.0], [0.0, 50.0]]),
            ],
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn body(x: f64, y: f64, heading: f64, speed: f64, tokens: &[TokenId]) -> BodyView {
        BodyView {
            state: AgentState::new(Pose2D::new(x, y, heading), speed, 4.7, 2.1),
            prev_pose: None,
            history_tokens: tokens.to_vec(),
        }
    }

    #[test]
    fn lone_agent_context_is_all_padding() {
        let map = small_map();
        let bodies = vec![body(3.0, 1.0, 0.2, 5.0, &[])];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        let ctx = build_agent_context(&view, 0, 99);
        assert_eq!(ctx.history_tokens, [99; HISTORY_TOKENS]);
        for n in &ctx.neighbors {
            assert_eq!(*n, [0.0; 5]);
        }
        // 6 lane vertices exist; the rest of the map slots are padding
        assert!(ctx.map_points[..6].iter().all(|m| m[4] == 1.0));
        assert!(ctx.map_points[6..].iter().all(|m| m[4] == 0.0));
    }

    #[test]
    fn two_agents_relative_features() {
        let map = small_map();
        let bodies = vec![
            body(0.0, 0.0, 0.0, 5.0, &[1, 2]),
            body(5.0, 0.0, 0.0, 3.0, &[]),
        ];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        let ctx = build_agent_context(&view, 0, 99);
        assert_eq!(ctx.history_tokens, [99, 99, 1, 2]);
        let n = ctx.neighbors[0];
        assert!((n[0] - 5.0 * POS_SCALE).abs() < 1e-12);
        assert!(n[1].abs() < 1e-12);
        assert!((n[3] - 3.0 * POS_SCALE).abs() < 1e-12);
        assert_eq!(n[4], 1.0);
        assert_eq!(ctx.neighbors[1], [0.0; 5]);
    }

    #[test]
    fn neighbor_selection_matches_bruteforce_knn() {
        let map = small_map();
        let mut rng = crate::rngutil::stream_rng(5, "knn", 0);
        use rand::Rng;
        let bodies: Vec<BodyView> = (0..20)
            .map(|_| {
                body(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    0.0,
                    5.0,
                    &[],
                )
            })
            .collect();
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        for subject in 0..bodies.len() {
            let ctx = build_agent_context(&view, subject, 0);
            // exhaustive scan oracle
            let me = bodies[subject].state.pose;
            let mut d: Vec<(f64, usize)> = bodies
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != subject)
                .map(|(i, b)| {
                    (
                        (b.state.pose.x - me.x).powi(2) + (b.state.pose.y - me.y).powi(2),
                        i,
                    )
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for (slot, &(_, i)) in d.iter().take(NEIGHBORS).enumerate() {
                let rel = to_frame(bodies[i].state.pose, me);
                assert!((ctx.neighbors[slot][0] - rel.x * POS_SCALE).abs() < 1e-12);
                assert!((ctx.neighbors[slot][1] - rel.y * POS_SCALE).abs() < 1e-12);
            }
        }
    }

    fn init_model(vocab: usize) -> (WorldModel, ParamStore) {
        let wm = WorldModel::new(vocab);
        let mut store = ParamStore::new();
        let mut rng = crate::rngutil::stream_rng(5, "wm-init", 0);
        wm.init(&mut store, &mut rng);
        (wm, store)
    }

    #[test]
    fn untrained_model_is_uniform_and_normalized() {
        let (wm, store) = init_model(16);
        let map = small_map();
        let bodies = vec![
            body(0.0, 0.0, 0.0, 5.0, &[1]),
            body(8.0, 1.0, 0.3, 2.0, &[]),
        ];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        let ctx = build_agent_context(&view, 0, wm.pad_id());
        let dist = wm.predict_dist(&store, &ctx).unwrap();
        for p in &dist {
            assert!((p - 1.0 / 16.0).abs() < 1e-12);
        }
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn predict_dist_invariant_under_rigid_scene_transform() {
        let (wm, mut store) = init_model(16);
        // random weights in the head too, so invariance is non-trivial
        let mut rng = crate::rngutil::stream_rng(5, "wm-head", 0);
        use rand::Rng;
        for v in &mut store.get_mut("wm.head.w0").data {
            *v = rng.random_range(-0.3..0.3);
        }
        let map = small_map();
        let bodies = vec![
            body(2.0, 1.0, 0.4, 5.0, &[3, 1]),
            body(8.0, -2.0, -0.7, 2.0, &[2]),
            body(-5.0, 4.0, 1.2, 7.0, &[]),
        ];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        let ctx = build_agent_context(&view, 0, wm.pad_id());
        let base = wm.predict_dist(&store, &ctx).unwrap();

        // rigid transform: rotate by 0.9 rad and translate (31, -17)
        let t = Pose2D::new(31.0, -17.0, 0.9);
        let moved_map = RoadMap::new(
            map.lanes
                .iter()
                .map(|l| {
                    LanePolyline::new(
                        l.id.clone(),
                        l.width,
                        l.points
                            .iter()
                            .map(|p| {
                                let q = from_frame(Pose2D::new(p[0], p[1], 0.0), t);
                                [q.x, q.y]
                            })
                            .collect(),
                    )
                })
                .collect(),
            BTreeMap::new(),
        )
        .unwrap();
        let moved_bodies: Vec<BodyView> = bodies
            .iter()
            .map(|b| BodyView {
                state: AgentState::new(
                    from_frame(b.state.pose, t),
                    b.state.speed,
                    b.state.length,
                    b.state.width,
                ),
                prev_pose: None,
                history_tokens: b.history_tokens.clone(),
            })
            .collect();
        let moved_view = SceneView {
            map: &moved_map,
            bodies: &moved_bodies,
        };
        let moved_ctx = build_agent_context(&moved_view, 0, wm.pad_id());
        let moved = wm.predict_dist(&store, &moved_ctx).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn world_loss_trivial_values_and_grad_check() {
        let (wm, mut store) = init_model(8);
        let map = small_map();
        let bodies = vec![
            body(0.0, 0.0, 0.0, 5.0, &[1]),
            body(6.0, 0.0, 0.0, 2.0, &[3]),
        ];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };
        let batch = vec![
            (build_agent_context(&view, 0, wm.pad_id()), 2usize),
            (build_agent_context(&view, 1, wm.pad_id()), 5usize),
        ];
        // uniform predictions -> ln V
        let (loss, _) = wm.loss_and_grads(&store, &batch).unwrap();
        assert!((loss - 8.0f64.ln()).abs() < 1e-9);

        // invalid target
        assert!(wm
            .loss_and_grads(&store, &[(batch[0].0.clone(), 8usize)])
            .is_err());

        // randomize all weights, then finite-difference the whole model
        let mut rng = crate::rngutil::stream_rng(5, "wm-fd", 0);
        use rand::Rng;
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            for v in &mut store.get_mut(&name).data {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let (_, grads) = wm.loss_and_grads(&store, &batch).unwrap();
        let batch_for_loss = batch.clone();
        crate::nn::fdcheck::check_param_grads_sampled(
            &mut store,
            &grads,
            move |s| wm.loss_and_grads(s, &batch_for_loss).unwrap().0,
            16,
        );
    }

    #[test]
    fn overfits_a_small_consistent_dataset() {
        let (wm, mut store) = init_model(12);
        let map = small_map();
        // distinct contexts with fixed targets
        let mut batch = Vec::new();
        for i in 0..10 {
            let bodies = vec![
                body(i as f64 * 3.0, 0.0, 0.0, 3.0 + i as f64, &[i % 12]),
                body(i as f64 * 3.0 + 10.0, 2.0, 0.0, 1.0, &[]),
            ];
            let view = SceneView {
                map: &map,
                bodies: &bodies,
            };
            batch.push((build_agent_context(&view, 0, wm.pad_id()), (i * 7) % 12));
        }
        let cfg = AdamConfig::with_lr(3e-3, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = wm.train_step(&mut store, &batch, &cfg).unwrap();
        }
        assert!(last < 0.05, "overfit loss {last}");
        for (ctx, target) in &batch {
            let dist = wm.predict_dist(&store, ctx).unwrap();
            assert_eq!(argmax(&dist), *target);
        }
    }

    #[test]
    fn sampling_matches_distribution_and_is_seeded() {
        let (wm, mut store) = init_model(8);
        let mut rng = crate::rngutil::stream_rng(5, "wm-sample-init", 0);
        use rand::Rng;
        for v in &mut store.get_mut("wm.head.w0").data {
            *v = rng.random_range(-1.0..1.0);
        }
        let map = small_map();
        let bodies = vec![
            body(0.0, 0.0, 0.0, 5.0, &[2]),
            body(7.0, 0.0, 0.0, 2.0, &[1]),
        ];
        let view = SceneView {
            map: &map,
            bodies: &bodies,
        };

        // temperature 0: argmax, deterministic
        let mut r0 = crate::rngutil::stream_rng(5, "s", 0);
        let t0 = wm
            .sample_step(&store, &view, &[0, 1], 0.0, &mut r0)
            .unwrap();
        let ctx0 = build_agent_context(&view, 0, wm.pad_id());
        let d0 = wm.predict_dist(&store, &ctx0).unwrap();
        assert_eq!(t0[0], argmax(&d0));

        // same seed, same samples
        let mut ra = crate::rngutil::stream_rng(5, "s", 1);
        let mut rb = crate::rngutil::stream_rng(5, "s", 1);
        let sa = wm
            .sample_step(&store, &view, &[0, 1], 1.0, &mut ra)
            .unwrap();
        let sb = wm
            .sample_step(&store, &view, &[0, 1], 1.0, &mut rb)
            .unwrap();
        assert_eq!(sa, sb);

        // frequencies within 3 sigma of multinomial bounds
        let dist = d0.clone();
        let n = 100_000;
        let mut counts = vec![0usize; dist.len()];
        let mut rs = crate::rngutil::stream_rng(5, "s", 2);
        let logits: Vec<f64> = dist.iter().map(|p| p.ln()).collect();
        for _ in 0..n {
            counts[sample_categorical(&logits, 1.0, &mut rs)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = dist[i];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = c as f64 / n as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 1e-9,
                "token {i}: freq {freq} vs p {p}"
            );
        }
    }
}
