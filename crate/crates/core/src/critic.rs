//! Binary collision critic.
//!
//! Scores a proposed ego token against the recent scene: probability that
//! executing it leads to a collision within the next k planning steps.
//! Trained on executed tokens only — correction-trace proposals never enter
//! the training data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_update, binary_cross_entropy, sigmoid, AdamConfig, Grads, Mlp, MlpCache, ParamStore,
};
use crate::rngutil::stream_rng;
use crate::scene::{to_frame, AgentState, Pose2D};
use crate::sim::{RiskScorer, RolloutRecord};
use crate::tokenizer::SUBSTEPS;
use crate::world::{HIDDEN_DIM, NEIGHBORS, POS_SCALE};

/// Ego sub-poses of recent history in the feature block.
pub const EGO_HISTORY: usize = 4;
/// Feature vector width: history poses + proposal poses + neighbor states.
pub const FEATURES: usize = EGO_HISTORY * 3 + SUBSTEPS * 3 + NEIGHBORS * 5;

/// One training example: featurized (ego, neighbors, proposal) window and a
/// collision-within-k label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSample {
    pub features: Vec<f64>,
    /// 1.0 iff a collision occurs within k planning steps.
    pub label: f64,
}

/// Fixed feature layout, everything relative to the current ego pose:
/// up to 4 recent sub-poses (zero-padded on the old side), the proposal's
/// S decoded sub-poses, and the 8 nearest agents (x, y, heading, speed,
/// present).
pub fn critic_features(
    ego_pose: Pose2D,
    recent_poses: &[Pose2D],
    proposal_poses: &[Pose2D],
    agents: &[AgentState],
) -> Vec<f64> {
    let mut f = Vec::with_capacity(FEATURES);
    let take = recent_poses.len().min(EGO_HISTORY);
    for _ in 0..EGO_HISTORY - take {
        f.extend_from_slice(&[0.0, 0.0, 0.0]);
    }
    for p in &recent_poses[recent_poses.len() - take..] {
        let rel = to_frame(*p, ego_pose);
        f.extend_from_slice(&[rel.x * POS_SCALE, rel.y * POS_SCALE, rel.heading]);
    }
    debug_assert_eq!(proposal_poses.len(), SUBSTEPS);
    for p in proposal_poses {
        let rel = to_frame(*p, ego_pose);
        f.extend_from_slice(&[rel.x * POS_SCALE, rel.y * POS_SCALE, rel.heading]);
    }
    let mut order: Vec<(f64, usize)> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let dx = a.pose.x - ego_pose.x;
            let dy = a.pose.y - ego_pose.y;
            (dx * dx + dy * dy, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    for slot in 0..NEIGHBORS {
        match order.get(slot) {
            Some(&(_, i)) => {
                let rel = to_frame(agents[i].pose, ego_pose);
                f.extend_from_slice(&[
                    rel.x * POS_SCALE,
                    rel.y * POS_SCALE,
                    rel.heading,
                    agents[i].speed * POS_SCALE,
                    1.0,
                ]);
            }
            None => f.extend_from_slice(&[0.0; 5]),
        }
    }
    debug_assert_eq!(f.len(), FEATURES);
    f
}

/// Critic feature vectors of a record's executed steps, in step order.
pub fn record_step_features(record: &RolloutRecord) -> Vec<Vec<f64>> {
    // labels need a window parameter; features do not (k = 1 is arbitrary)
    sample_rows(record, 1).into_iter().map(|(f, _)| f).collect()
}

/// Planning steps between the first critic flag (score >= tau) and the
/// first collision, for records that collide and were flagged in time.
pub fn ttc_first_flag(
    critic: &Critic,
    store: &ParamStore,
    record: &RolloutRecord,
    tau: f64,
) -> Result<Option<f64>> {
    let Some(c) = record.steps.iter().position(|s| s.collision()) else {
        return Ok(None);
    };
    for (t, features) in record_step_features(record).iter().enumerate() {
        if critic.predict_prob(store, features)? >= tau {
            return Ok(if t <= c { Some((c - t) as f64) } else { None });
        }
    }
    Ok(None)
}

/// Per-record (features, label, step) rows for executed tokens only.
fn sample_rows(record: &RolloutRecord, k: usize) -> Vec<(Vec<f64>, f64)> {
    let flags: Vec<bool> = record.steps.iter().map(|s| s.collision()).collect();
    let mut rows = Vec::with_capacity(record.steps.len());
    for (t, step) in record.steps.iter().enumerate() {
        let hi = (t + k).min(flags.len());
        let label = if flags[t..hi].iter().any(|&c| c) {
            1.0
        } else {
            0.0
        };
        let ego_pose = step.scene_before.ego.pose;
        let recent: Vec<Pose2D> = if t == 0 {
            Vec::new()
        } else {
            let prev = &record.steps[t - 1].substeps;
            prev[..prev.len() - 1]
                .iter()
                .rev()
                .take(EGO_HISTORY)
                .rev()
                .map(|ss| ss.ego.pose)
                .collect()
        };
        let proposal: Vec<Pose2D> = step.substeps.iter().map(|ss| ss.ego.pose).collect();
        let features = critic_features(ego_pose, &recent, &proposal, &step.scene_before.agents);
        rows.push((features, label));
    }
    rows
}

/// Label every (rollout, step, executed token) with collision-within-k.
/// Correction-trace proposals are excluded by construction.
pub fn label_rollouts(records: &[RolloutRecord], k: usize) -> Result<Vec<CriticSample>> {
    if k < 1 {
        return Err(Error::InvalidParameter(format!(
            "critic horizon k must be >= 1, got {k}"
        )));
    }
    let mut out = Vec::new();
    for record in records {
        for (features, label) in sample_rows(record, k) {
            out.push(CriticSample { features, label });
        }
    }
    Ok(out)
}

/// Keep all positives, subsample negatives to a 1:1 ratio (seeded).
pub fn balance(samples: &[CriticSample], seed: u64) -> Result<Vec<CriticSample>> {
    let n_pos = samples.iter().filter(|s| s.label == 1.0).count();
    if n_pos == 0 {
        return Err(Error::MissingData(
            "no positive collision samples; generate harder scenarios".into(),
        ));
    }
    let neg_indices: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut keep_neg = neg_indices.clone();
    if neg_indices.len() > n_pos {
        let mut rng = stream_rng(seed, "critic-balance", 0);
        let mut pool = neg_indices;
        for i in 0..n_pos {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        keep_neg = pool[..n_pos].to_vec();
        keep_neg.sort_unstable();
    }
    let mut out = Vec::with_capacity(n_pos + keep_neg.len());
    let mut neg_cursor = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.label == 1.0 {
            out.push(s.clone());
        } else if neg_cursor < keep_neg.len() && keep_neg[neg_cursor] == i {
            out.push(s.clone());
            neg_cursor += 1;
        }
    }
    Ok(out)
}

/// Critic network; parameters are prefixed "qc.".
#[derive(Debug, Clone)]
pub struct Critic {
    feat: Mlp,
    head: Mlp,
}

impl Default for Critic {
    fn default() -> Self {
        Self::new()
    }
}

pub struct CriticCache {
    feat: MlpCache,
    head: MlpCache,
}

impl Critic {
    pub fn new() -> Self {
        Self {
            feat: Mlp::new("qc.feat", &[FEATURES, HIDDEN_DIM, HIDDEN_DIM], true),
            head: Mlp::new("qc.head", &[HIDDEN_DIM, 1], false),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.feat.init(store, rng, false);
        self.head.init(store, rng, true); // zero head: p = 0.5 untrained
    }

    pub fn forward(&self, store: &ParamStore, features: &[f64]) -> Result<(f64, CriticCache)> {
        let (hidden, feat_cache) = self.feat.forward(store, features)?;
        let (logit, head_cache) = self.head.forward(store, &hidden)?;
        Ok((
            sigmoid(logit[0]),
            CriticCache {
                feat: feat_cache,
                head: head_cache,
            },
        ))
    }

    /// Collision probability in (0, 1).
    pub fn predict_prob(&self, store: &ParamStore, features: &[f64]) -> Result<f64> {
        Ok(self.forward(store, features)?.0)
    }

    /// Mean binary cross-entropy over a batch, with gradients.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        batch: &[CriticSample],
    ) -> Result<(f64, Grads)> {
        let mut grads = Grads::new();
        let mut total = 0.0;
        for s in batch {
            let (p, cache) = self.forward(store, &s.features)?;
            let (loss, glogit) = binary_cross_entropy(p, s.label);
            total += loss;
            let ghidden = self
                .head
                .backward(store, &cache.head, &[glogit], &mut grads);
            self.feat.backward(store, &cache.feat, &ghidden, &mut grads);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    /// Minibatch AdamW over pre-balanced samples; returns per-epoch losses.
    pub fn train(
        &self,
        store: &mut ParamStore,
        samples: &[CriticSample],
        epochs: usize,
        batch_size: usize,
        cfg: &AdamConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut curve = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..epochs {
            let mut rng = stream_rng(seed, "critic-epoch", epoch as u64);
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch_size.max(1)) {
                let batch: Vec<CriticSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let (loss, grads) = self.loss_and_grads(store, &batch)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("critic loss {loss}")));
                }
                adam_update(store, &grads, cfg);
                epoch_loss += loss;
                batches += 1;
            }
            curve.push(epoch_loss / batches.max(1) as f64);
        }
        Ok(curve)
    }
}

/// Critic wrapped with its parameters: usable as a rollout risk scorer.
pub struct CriticScorer<'a> {
    pub critic: &'a Critic,
    pub store: &'a ParamStore,
}

impl RiskScorer for CriticScorer<'_> {
    fn score(&self, features: &[f64]) -> Result<f64> {
        self.critic.predict_prob(self.store, features)
    }
}

/// Threshold operating point on a validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticCalibration {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub flagged_rate: f64,
    /// Mean planning steps between the first flag and the collision, over
    /// colliding rollouts that were flagged in time; 0 when none were.
    pub ttc_first_flag: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Score validation rollouts and sweep the threshold grid.
pub fn calibrate(
    critic: &Critic,
    store: &ParamStore,
    records: &[RolloutRecord],
    k: usize,
    thresholds: &[f64],
) -> Result<Vec<CriticCalibration>> {
    // per rollout: scored steps with labels
    let mut per_rollout: Vec<Vec<(f64, f64)>> = Vec::with_capacity(records.len());
    let mut collision_step: Vec<Option<usize>> = Vec::with_capacity(records.len());
    for record in records {
        let rows = sample_rows(record, k);
        let mut scored = Vec::with_capacity(rows.len());
        for (features, label) in rows {
            scored.push((critic.predict_prob(store, &features)?, label));
        }
        per_rollout.push(scored);
        collision_step.push(record.steps.iter().position(|s| s.collision()));
    }

    let mut out = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut tn = 0usize;
        let mut fn_ = 0usize;
        for scored in &per_rollout {
            for &(p, label) in scored {
                let flagged = p >= tau;
                match (flagged, label == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let n_pos = tp + fn_;
        let n_neg = fp + tn;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if n_pos > 0 {
            tp as f64 / n_pos as f64
        } else {
            0.0
        };
        let flagged_rate = if n_pos + n_neg > 0 {
            (tp + fp) as f64 / (n_pos + n_neg) as f64
        } else {
            0.0
        };
        let mut ttc_sum = 0.0;
        let mut ttc_n = 0usize;
        for (scored, col) in per_rollout.iter().zip(&collision_step) {
            if let Some(c) = col {
                if let Some(f) = scored.iter().position(|&(p, _)| p >= tau) {
                    if f <= *c {
                        ttc_sum += (*c - f) as f64;
                        ttc_n += 1;
                    }
                }
            }
        }
        out.push(CriticCalibration {
            threshold: tau,
            precision,
            recall,
            flagged_rate,
            ttc_first_flag: if ttc_n > 0 {
                ttc_sum / ttc_n as f64
            } else {
                0.0
            },
            n_pos,
            n_neg,
        });
    }
    Ok(out)
}

/// The calibration report CSV; schema versioned in the header comment.
pub fn write_calibration_csv(path: &std::path::Path, rows: &[CriticCalibration]) -> Result<()> {
    let mut s = String::from("# critic-calibration v1\n");
    s.push_str("threshold,precision,recall,flagged_rate,ttc_first_flag,n_pos,n_neg\n");
    for r in rows {
        s.push_str(&format!(
            "{:.4},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.threshold, r.precision, r.recall, r.flagged_rate, r.ttc_first_flag, r.n_pos, r.n_neg
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}
