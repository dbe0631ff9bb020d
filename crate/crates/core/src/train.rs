//! Two-stage training: joint imitation pretraining of policy and world
//! model (next-token, correction exposure, world loss), critic training
//! from post-IL rollouts, then REINFORCE against the frozen world model
//! with a KL leash to the imitation policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{CorrectionConfig, CorrectionMode, Sampling};
use crate::critic::{balance, calibrate, label_rollouts, Critic, CriticCalibration, CriticScorer};
use crate::error::{Error, Result};
use crate::nn::{adam_update, kl_categorical, softmax, AdamConfig, Grads, ParamStore};
use crate::policy::{build_ego_context, CorrectionTrace, EgoContext, Policy};
use crate::rngutil::{child_seed, stream_rng};
use crate::scene::{boxes_overlap, Scenario};
use crate::sim::{
    rollout, rollout_with_contexts, AgentMode, BudgetMode, ExpertReplay, PolicySource,
    RolloutInputs, RolloutRecord, SimConfig, ZeroRisk,
};
use crate::tokenizer::{
    decode, decode_poses, encode, extract_segments, TokenId, TokenVocabulary, SUBSTEPS,
};
use crate::world::{build_agent_context, AgentContext, BodyView, SceneView, WorldModel};

/// Stage-1 imitation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-annealed to 0 over all steps.
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum synthetic-trace length during correction exposure.
    pub exposure_corrections: usize,
    pub seed: u64,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            exposure_corrections: 5,
            seed: 0,
        }
    }
}

/// Stage-2 REINFORCE configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlConfig {
    pub kl_weight: f64,
    pub gamma: f64,
    /// Per-step correction budget drawn uniformly from lo..=hi.
    pub budget_lo: usize,
    pub budget_hi: usize,
    /// Fraction of rollouts that replay ground truth for ego and agents.
    pub replay_mix: f64,
    pub reward_norm: bool,
    pub epochs: usize,
    pub rollouts_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Critic gate threshold during RL rollouts.
    pub threshold: f64,
    pub temperature: f64,
    /// Rollouts per gradient step.
    pub minibatch: usize,
    /// Keep probability for scenarios whose uncorrected IL rollout stayed
    /// collision-free (colliding ones are always kept).
    pub easy_keep: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            kl_weight: 0.1,
            gamma: 1.0,
            budget_lo: 0,
            budget_hi: 6,
            replay_mix: 0.25,
            reward_norm: true,
            epochs: 3,
            rollouts_per_epoch: 150,
            lr: 5e-5,
            weight_decay: 0.0,
            threshold: 0.75,
            temperature: 1.0,
            minibatch: 16,
            easy_keep: 0.4,
            seed: 0,
        }
    }
}

/// Reward decomposition of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub progression: f64,
    pub collided: bool,
    pub reward: f64,
}

/// r = progression * I(no collision) - I(collision), exactly.
pub fn compute_reward(record: &RolloutRecord) -> RewardBreakdown {
    let collided = record.metrics.collided;
    let progression = record.metrics.progression;
    let reward = if collided { -1.0 } else { progression };
    RewardBreakdown {
        progression,
        collided,
        reward,
    }
}

/// Standardize rewards to mean 0, std 1 (eps 1e-8).
pub fn normalize_rewards(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// A scenario unrolled into per-planning-step views and token targets.
pub struct Tape {
    pub scenario: Scenario,
    pub ego_tokens: Vec<TokenId>,
    pub agent_tokens: Vec<Vec<TokenId>>,
    /// Body views at each planning-step boundary; index 0 is the ego.
    pub views: Vec<Vec<BodyView>>,
}

/// Tokenize logs and precompute per-step body views for a scenario set.
pub fn build_tapes(scenarios: &[Scenario], vocab: &TokenVocabulary) -> Vec<Tape> {
    scenarios
        .iter()
        .map(|sc| {
            let ego_tokens: Vec<TokenId> = extract_segments(&sc.expert)
                .iter()
                .map(|seg| encode(seg, vocab))
                .collect();
            let agent_tokens: Vec<Vec<TokenId>> = sc
                .agent_logs
                .iter()
                .map(|log| {
                    extract_segments(log)
                        .iter()
                        .map(|seg| encode(seg, vocab))
                        .collect()
                })
                .collect();
            let steps = sc.horizon_tokens;
            let views: Vec<Vec<BodyView>> = (0..steps)
                .map(|t| {
                    let sub = t * SUBSTEPS;
                    let mut bodies = Vec::with_capacity(1 + sc.agent_logs.len());
                    bodies.push(BodyView {
                        state: sc.expert.states[sub],
                        prev_pose: (sub > 0).then(|| sc.expert.states[sub - 1].pose),
                        history_tokens: ego_tokens[..t].to_vec(),
                    });
                    for (ai, log) in sc.agent_logs.iter().enumerate() {
                        bodies.push(BodyView {
                            state: log.states[sub],
                            prev_pose: (sub > 0).then(|| log.states[sub - 1].pose),
                            history_tokens: agent_tokens[ai][..t].to_vec(),
                        });
                    }
                    bodies
                })
                .collect();
            Tape {
                scenario: sc.clone(),
                ego_tokens,
                agent_tokens,
                views,
            }
        })
        .collect()
}

/// Next-token samples for every body (ego and agents supervised jointly).
pub fn world_dataset(tapes: &[Tape], pad_id: TokenId) -> Vec<(AgentContext, TokenId)> {
    let mut out = Vec::new();
    for tape in tapes {
        for (t, bodies) in tape.views.iter().enumerate() {
            let view = SceneView {
                map: &tape.scenario.map,
                bodies,
            };
            for (idx, _) in bodies.iter().enumerate() {
                let target = if idx == 0 {
                    tape.ego_tokens.get(t)
                } else {
                    tape.agent_tokens[idx - 1].get(t)
                };
                if let Some(&target) = target {
                    out.push((build_agent_context(&view, idx, pad_id), target));
                }
            }
        }
    }
    out
}

/// Ego context at tape step `t` with fresh world-model neighbor predictions.
fn tape_ego_context(
    tape: &Tape,
    t: usize,
    wm: &WorldModel,
    store: &ParamStore,
    vocab: &TokenVocabulary,
    trace: &CorrectionTrace,
) -> Result<EgoContext> {
    let bodies = &tape.views[t];
    let view = SceneView {
        map: &tape.scenario.map,
        bodies,
    };
    build_ego_context(&view, 0, &tape.scenario.route, trace, vocab.len(), |idx| {
        let tok = wm.argmax_token(store, &view, idx)?;
        let start = view.bodies[idx].state;
        let states = decode(tok, start.pose, start.length, start.width, vocab)?;
        let last = states.last().expect("token sub-steps");
        Ok(Some((last.pose, last.speed)))
    })
}

/// Imitation pairs (empty trace) for every tape step.
pub fn ego_dataset(
    tapes: &[Tape],
    wm: &WorldModel,
    store: &ParamStore,
    vocab: &TokenVocabulary,
) -> Result<Vec<(EgoContext, TokenId)>> {
    let mut out = Vec::new();
    for tape in tapes {
        for t in 0..tape.views.len() {
            if let Some(&target) = tape.ego_tokens.get(t) {
                let ctx = tape_ego_context(tape, t, wm, store, vocab, &CorrectionTrace::empty())?;
                out.push((ctx, target));
            }
        }
    }
    Ok(out)
}

/// Does the decoded proposal overlap any logged agent box during step `t`?
fn proposal_overlaps_logs(
    tape: &Tape,
    t: usize,
    proposal: TokenId,
    vocab: &TokenVocabulary,
) -> Result<bool> {
    let sub = t * SUBSTEPS;
    let ego = tape.views[t][0].state;
    let poses = decode_poses(proposal, ego.pose, vocab)?;
    for (k, pose) in poses.iter().enumerate() {
        let ego_box = crate::scene::OrientedBox {
            center: *pose,
            length: ego.length,
            width: ego.width,
        };
        for log in &tape.scenario.agent_logs {
            let other = log.states[sub + k + 1];
            if boxes_overlap(&ego_box, &other.footprint()) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Correction-exposure pairs: wherever the policy's sampled proposal
/// overlaps a logged agent box, emit (trace-prefix context, expert token)
/// pairs for growing prefixes until a sampled proposal is collision-free
/// or the budget runs out. The collision check is ground truth, not the
/// critic.
pub fn expose_corrections(
    policy: &Policy,
    store: &ParamStore,
    tapes: &[Tape],
    wm: &WorldModel,
    vocab: &TokenVocabulary,
    max_corrections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(EgoContext, TokenId)>> {
    let mut out = Vec::new();
    for tape in tapes {
        for t in 0..tape.views.len() {
            let Some(&expert_token) = tape.ego_tokens.get(t) else {
                continue;
            };
            let base = tape_ego_context(tape, t, wm, store, vocab, &CorrectionTrace::empty())?;
            let dist = policy.propose(store, &base)?;
            let logits: Vec<f64> = dist.iter().map(|p| p.max(1e-300).ln()).collect();
            let mut proposal = crate::world::sample_categorical(&logits, 1.0, rng);
            if !proposal_overlaps_logs(tape, t, proposal, vocab)? {
                continue;
            }
            let mut trace = CorrectionTrace::empty();
            for _c in 1..=max_corrections {
                trace.push(proposal);
                let ctx = base.with_trace(trace.clone());
                out.push((ctx.clone(), expert_token));
                let dist = policy.propose(store, &ctx)?;
                let logits: Vec<f64> = dist.iter().map(|p| p.max(1e-300).ln()).collect();
                proposal = crate::world::sample_categorical(&logits, 1.0, rng);
                if !proposal_overlaps_logs(tape, t, proposal, vocab)? {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-epoch loss-curve row from pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub imitation_loss: f64,
    pub correction_loss: f64,
    pub world_loss: f64,
    pub exposure_pairs: usize,
}

/// Stage 1: joint AdamW on L_imitation + L_corr + L_world over one shared
/// parameter store holding both "pi." and "wm." tensors. Deterministic per
/// config seed.
pub fn pretrain(
    policy: &Policy,
    wm: &WorldModel,
    tapes: &[Tape],
    vocab: &TokenVocabulary,
    cfg: &IlConfig,
) -> Result<(ParamStore, Vec<PretrainEpoch>)> {
    let mut store = ParamStore::new();
    let mut init_rng = stream_rng(cfg.seed, "il-init", 0);
    wm.init(&mut store, &mut init_rng);
    policy.init(&mut store, &mut init_rng);

    let world_samples = world_dataset(tapes, vocab.len());
    let n_world = world_samples.len();
    let steps_per_epoch = n_world.div_ceil(cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, "il-epoch", epoch as u64);
        // ego contexts are rebuilt every epoch: neighbor predictions come
        // from the world model being trained
        let ego_samples = ego_dataset(tapes, wm, &store, vocab)?;
        let exposure = expose_corrections(
            policy,
            &store,
            tapes,
            wm,
            vocab,
            cfg.exposure_corrections,
            &mut rng,
        )?;

        let world_order = shuffled_indices(n_world, &mut rng);
        let ego_order = shuffled_indices(ego_samples.len(), &mut rng);
        let corr_order = shuffled_indices(exposure.len(), &mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for step in 0..steps_per_epoch {
            let lr = cosine_lr(cfg.lr, global_step, total_steps);
            let adam = AdamConfig::with_lr(lr, cfg.weight_decay);
            let mut grads = Grads::new();

            let wslice: Vec<(AgentContext, TokenId)> = world_order
                [step * cfg.batch_size..((step + 1) * cfg.batch_size).min(n_world)]
                .iter()
                .map(|&i| world_samples[i].clone())
                .collect();
            let (lw, gw) = wm.loss_and_grads(&store, &wslice)?;
            grads.add(&gw);

            let ego_bs = (ego_samples.len() / steps_per_epoch).max(1);
            let elo = (step * ego_bs).min(ego_samples.len());
            let ehi = ((step + 1) * ego_bs).min(ego_samples.len());
            let eslice: Vec<(EgoContext, TokenId)> = ego_order[elo..ehi]
                .iter()
                .map(|&i| ego_samples[i].clone())
                .collect();
            let li = if eslice.is_empty() {
                0.0
            } else {
                let (li, gi) = policy.nll_loss_and_grads(&store, &eslice)?;
                grads.add(&gi);
                li
            };

            let lc = if exposure.is_empty() {
                0.0
            } else {
                let corr_bs = (exposure.len() / steps_per_epoch).max(1);
                let clo = (step * corr_bs).min(exposure.len());
                let chi = ((step + 1) * corr_bs).min(exposure.len());
                let cslice: Vec<(EgoContext, TokenId)> = corr_order[clo..chi]
                    .iter()
                    .map(|&i| exposure[i].clone())
                    .collect();
                if cslice.is_empty() {
                    0.0
                } else {
                    let (lc, gc) = policy.nll_loss_and_grads(&store, &cslice)?;
                    grads.add(&gc);
                    lc
                }
            };

            let total = lw + li + lc;
            if !total.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged(format!(
                    "pretrain loss {total} at epoch {epoch} step {step}"
                )));
            }
            adam_update(&mut store, &grads, &adam);
            sums.0 += li;
            sums.1 += lc;
            sums.2 += lw;
            batches += 1;
            global_step += 1;
        }
        curve.push(PretrainEpoch {
            epoch,
            imitation_loss: sums.0 / batches as f64,
            correction_loss: sums.1 / batches as f64,
            world_loss: sums.2 / batches as f64,
            exposure_pairs: exposure.len(),
        });
    }
    Ok((store, curve))
}

/// Split a joint pretraining store into per-model stores by name prefix.
pub fn split_store(joint: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in joint.iter() {
        if name.starts_with(prefix) {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

/// Merge stores with disjoint prefixes into one (rollout code reads both
/// policy and world parameters through a single store).
pub fn merge_stores(stores: &[&ParamStore]) -> ParamStore {
    let mut out = ParamStore::new();
    for s in stores {
        for (name, t) in s.iter() {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

/// One rollout batch entry: record, executed-token contexts, raw reward.
pub struct CollectedRollout {
    pub record: RolloutRecord,
    pub contexts: Vec<EgoContext>,
    pub reward: RewardBreakdown,
    pub normalized_reward: f64,
}

/// Collect (1 - replay_mix) on-policy rollouts against the frozen world
/// model plus replay_mix ground-truth replays, then batch-normalize the
/// rewards.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &Policy,
    critic: &Critic,
    run_store: &ParamStore,
    critic_store: &ParamStore,
    tapes: &[Tape],
    vocab: &TokenVocabulary,
    cfg: &RlConfig,
    n: usize,
    epoch: u64,
) -> Result<Vec<CollectedRollout>> {
    if tapes.is_empty() {
        return Err(Error::MissingData("no scenarios for rollouts".into()));
    }
    let wm = WorldModel::new(vocab.len());
    let n_replay = ((n as f64) * cfg.replay_mix).round() as usize;
    let n_policy = n - n_replay;

    let sim_cfg = SimConfig {
        agent_mode: AgentMode::WorldModel,
        stop_on_collision: true,
        agent_temperature: cfg.temperature,
        horizon_tokens: tapes[0].scenario.horizon_tokens,
        ..SimConfig::default()
    };
    let corr_cfg = CorrectionConfig {
        mode: CorrectionMode::FullTrace,
        threshold: cfg.threshold,
        max_corrections: cfg.budget_hi,
        n_candidates: 10,
        sampling: Sampling::Temperature(cfg.temperature),
    };
    let scorer = CriticScorer {
        critic,
        store: critic_store,
    };
    let source = PolicySource {
        policy,
        store: run_store,
    };

    let mut collected: Vec<CollectedRollout> = Vec::with_capacity(n);
    for i in 0..n_policy {
        let tape = &tapes[i % tapes.len()];
        let inputs = RolloutInputs {
            proposals: &source,
            scorer: &scorer,
            world: Some((&wm, run_store)),
            vocab,
        };
        let seed = child_seed(cfg.seed, "rl-rollout", (epoch << 32) | i as u64);
        let (record, contexts) = rollout_with_contexts(
            &tape.scenario,
            &sim_cfg,
            &corr_cfg,
            BudgetMode::Uniform {
                lo: cfg.budget_lo,
                hi: cfg.budget_hi,
            },
            &inputs,
            seed,
        )?;
        let reward = compute_reward(&record);
        collected.push(CollectedRollout {
            record,
            contexts,
            reward,
            normalized_reward: 0.0,
        });
    }

    // ground-truth replays: agents and ego replay logs; reward as usual
    let replay_sim = SimConfig {
        agent_mode: AgentMode::LogReplay,
        stop_on_collision: true,
        horizon_tokens: tapes[0].scenario.horizon_tokens,
        ..SimConfig::default()
    };
    let replay_corr = CorrectionConfig {
        mode: CorrectionMode::Off,
        ..corr_cfg
    };
    for i in 0..n_replay {
        let tape = &tapes[i % tapes.len()];
        let replay = ExpertReplay {
            tokens: tape.ego_tokens.clone(),
            vocab_size: vocab.len(),
        };
        let inputs = RolloutInputs {
            proposals: &replay,
            scorer: &ZeroRisk,
            world: Some((&wm, run_store)),
            vocab,
        };
        let seed = child_seed(cfg.seed, "rl-replay", (epoch << 32) | i as u64);
        let (record, contexts) = rollout_with_contexts(
            &tape.scenario,
            &replay_sim,
            &replay_corr,
            BudgetMode::Fixed,
            &inputs,
            seed,
        )?;
        let reward = compute_reward(&record);
        collected.push(CollectedRollout {
            record,
            contexts,
            reward,
            normalized_reward: 0.0,
        });
    }

    let raw: Vec<f64> = collected.iter().map(|c| c.reward.reward).collect();
    let normalized = if cfg.reward_norm {
        normalize_rewards(&raw)
    } else {
        raw.clone()
    };
    for (c, z) in collected.iter_mut().zip(normalized) {
        c.normalized_reward = z;
    }
    Ok(collected)
}

/// Gradient of the REINFORCE surrogate with KL regularization over a batch,
/// before any optimizer step. Exposed separately so the credit-assignment
/// structure can be tested.
pub fn reinforce_grads(
    policy: &Policy,
    store: &ParamStore,
    il_store: &ParamStore,
    batch: &[CollectedRollout],
    cfg: &RlConfig,
) -> Result<(Grads, ReinforceStats)> {
    let mut grads = Grads::new();
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let mut logp_sum = 0.0;
    for rollout in batch {
        for (t, ctx) in rollout.contexts.iter().enumerate() {
            let executed = rollout.record.steps[t].executed;
            let (logits, cache) = policy.forward(store, ctx)?;
            let dist = softmax(&logits);
            let coeff = cfg.gamma.powi(t as i32) * rollout.normalized_reward;
            logp_sum += dist[executed].max(1e-300).ln();

            // d/dlogits of [-coeff * log pi(executed)] = coeff * (p - onehot)
            let mut glogits: Vec<f64> = dist.iter().map(|p| coeff * p).collect();
            glogits[executed] -= coeff;

            if cfg.kl_weight > 0.0 {
                let il_dist = softmax(&policy.forward(il_store, ctx)?.0);
                kl_sum += kl_categorical(&il_dist, &dist);
                // d/dlogits KL(q_il || p) = p - q_il
                for (g, (p, q)) in glogits.iter_mut().zip(dist.iter().zip(&il_dist)) {
                    *g += cfg.kl_weight * (p - q);
                }
            }
            kl_n += 1;
            policy.backward(store, &cache, &glogits, &mut grads);
        }
    }
    // trajectory-level objective: average over rollouts
    grads.scale(1.0 / batch.len().max(1) as f64);
    let stats = ReinforceStats {
        mean_kl: if kl_n > 0 { kl_sum / kl_n as f64 } else { 0.0 },
        mean_executed_logprob: if kl_n > 0 {
            logp_sum / kl_n as f64
        } else {
            0.0
        },
        steps: kl_n,
    };
    Ok((grads, stats))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReinforceStats {
    pub mean_kl: f64,
    pub mean_executed_logprob: f64,
    pub steps: usize,
}

/// One REINFORCE + KL ascent step on the policy parameters.
pub fn reinforce_update(
    policy: &Policy,
    store: &mut ParamStore,
    il_store: &ParamStore,
    batch: &[CollectedRollout],
    cfg: &RlConfig,
    lr: f64,
) -> Result<ReinforceStats> {
    let (grads, stats) = reinforce_grads(policy, store, il_store, batch, cfg)?;
    if !grads.all_finite() {
        return Err(Error::Diverged("non-finite REINFORCE gradient".into()));
    }
    adam_update(store, &grads, &AdamConfig::with_lr(lr, cfg.weight_decay));
    Ok(stats)
}

/// Per-epoch RL summary row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlEpoch {
    pub epoch: usize,
    pub mean_reward: f64,
    pub collision_rate: f64,
    pub mean_kl: f64,
    pub mean_executed_logprob: f64,
}

/// Keep scenarios whose uncorrected IL rollout collides, plus a seeded
/// sample of the rest.
pub fn select_hard_tapes(
    policy: &Policy,
    run_store: &ParamStore,
    tapes: Vec<Tape>,
    vocab: &TokenVocabulary,
    cfg: &RlConfig,
) -> Result<Vec<Tape>> {
    let wm = WorldModel::new(vocab.len());
    let source = PolicySource {
        policy,
        store: run_store,
    };
    let sim_cfg = SimConfig {
        agent_mode: AgentMode::WorldModel,
        stop_on_collision: true,
        horizon_tokens: tapes
            .first()
            .map(|t| t.scenario.horizon_tokens)
            .unwrap_or(16),
        ..SimConfig::default()
    };
    let corr_cfg = CorrectionConfig {
        mode: CorrectionMode::Off,
        sampling: Sampling::Temperature(cfg.temperature),
        ..CorrectionConfig::default()
    };
    let mut rng = stream_rng(cfg.seed, "hard-select", 0);
    let mut kept = Vec::new();
    for (i, tape) in tapes.into_iter().enumerate() {
        let inputs = RolloutInputs {
            proposals: &source,
            scorer: &ZeroRisk,
            world: Some((&wm, run_store)),
            vocab,
        };
        let seed = child_seed(cfg.seed, "hard-probe", i as u64);
        let record = rollout(
            &tape.scenario,
            &sim_cfg,
            &corr_cfg,
            BudgetMode::Fixed,
            &inputs,
            seed,
        )?;
        let keep = record.metrics.collided || rng.random::<f64>() < cfg.easy_keep;
        if keep {
            kept.push(tape);
        }
    }
    if kept.is_empty() {
        return Err(Error::MissingData(
            "hard-example selection kept nothing; policy never collides".into(),
        ));
    }
    Ok(kept)
}

/// Stage 2: REINFORCE epochs against the frozen world model. The world
/// parameters live in `run_store` but only "pi." tensors receive
/// gradients, so the world model stays bit-identical (checked by hash).
pub fn train_rl(
    policy: &Policy,
    critic: &Critic,
    run_store: &mut ParamStore,
    critic_store: &ParamStore,
    tapes: &[Tape],
    vocab: &TokenVocabulary,
    cfg: &RlConfig,
) -> Result<Vec<RlEpoch>> {
    let il_store = run_store.clone();
    let wm_hash_before = split_store(run_store, "wm.").hash();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch = collect_rollouts(
            policy,
            critic,
            run_store,
            critic_store,
            tapes,
            vocab,
            cfg,
            cfg.rollouts_per_epoch,
            epoch as u64,
        )?;
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut stats = ReinforceStats {
            mean_kl: 0.0,
            mean_executed_logprob: 0.0,
            steps: 0,
        };
        let mut n_chunks = 0usize;
        for chunk in batch.chunks(cfg.minibatch.max(1)) {
            let s = reinforce_update(policy, run_store, &il_store, chunk, cfg, lr)?;
            stats.mean_kl += s.mean_kl;
            stats.mean_executed_logprob += s.mean_executed_logprob;
            stats.steps += s.steps;
            n_chunks += 1;
        }
        if n_chunks > 0 {
            stats.mean_kl /= n_chunks as f64;
            stats.mean_executed_logprob /= n_chunks as f64;
        }
        let mean_reward =
            batch.iter().map(|c| c.reward.reward).sum::<f64>() / batch.len().max(1) as f64;
        let collision_rate =
            batch.iter().filter(|c| c.reward.collided).count() as f64 / batch.len().max(1) as f64;
        rows.push(RlEpoch {
            epoch,
            mean_reward,
            collision_rate,
            mean_kl: stats.mean_kl,
            mean_executed_logprob: stats.mean_executed_logprob,
        });
    }
    let wm_hash_after = split_store(run_store, "wm.").hash();
    assert_eq!(
        wm_hash_before, wm_hash_after,
        "world model changed during RL"
    );
    Ok(rows)
}

/// Operating threshold picked from a calibration sweep: the best-F1 row
/// among strictly positive thresholds (ties break toward the higher tau).
pub fn calibrated_tau(calibrations: &[CriticCalibration]) -> f64 {
    let mut best_tau = 0.75;
    let mut best_f1 = -1.0;
    for c in calibrations {
        if c.threshold <= 0.0 {
            continue;
        }
        let denom = c.precision + c.recall;
        let f1 = if denom > 0.0 {
            2.0 * c.precision * c.recall / denom
        } else {
            0.0
        };
        if f1 > best_f1 || (f1 == best_f1 && c.threshold > best_tau) {
            best_f1 = f1;
            best_tau = c.threshold;
        }
    }
    best_tau
}

/// Critic training output.
pub struct CriticTraining {
    pub store: ParamStore,
    pub calibrations: Vec<CriticCalibration>,
    pub loss_curve: Vec<f64>,
    pub n_train_rollouts: usize,
    pub n_val_rollouts: usize,
}

/// Collect uncorrected post-IL rollouts, label with collision-within-k,
/// rebalance 1:1, train, and calibrate on a held-out rollout split.
#[allow(clippy::too_many_arguments)]
pub fn train_critic(
    policy: &Policy,
    run_store: &ParamStore,
    tapes: &[Tape],
    vocab: &TokenVocabulary,
    k: usize,
    thresholds: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<CriticTraining> {
    let wm = WorldModel::new(vocab.len());
    let source = PolicySource {
        policy,
        store: run_store,
    };
    let sim_cfg = SimConfig {
        agent_mode: AgentMode::WorldModel,
        stop_on_collision: true,
        horizon_tokens: tapes
            .first()
            .map(|t| t.scenario.horizon_tokens)
            .unwrap_or(16),
        ..SimConfig::default()
    };
    let corr_cfg = CorrectionConfig {
        mode: CorrectionMode::Off,
        sampling: Sampling::Temperature(1.0),
        ..CorrectionConfig::default()
    };
    let mut records = Vec::with_capacity(tapes.len() * 2);
    for (i, tape) in tapes.iter().enumerate() {
        let inputs = RolloutInputs {
            proposals: &source,
            scorer: &ZeroRisk,
            world: Some((&wm, run_store)),
            vocab,
        };
        for pass in 0..4u64 {
            let rollout_seed = child_seed(seed, "critic-data", (pass << 32) | i as u64);
            records.push(rollout(
                &tape.scenario,
                &sim_cfg,
                &corr_cfg,
                BudgetMode::Fixed,
                &inputs,
                rollout_seed,
            )?);
        }
    }
    // held-out split: every 5th rollout calibrates
    let mut train_records = Vec::new();
    let mut val_records = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        if i % 5 == 4 {
            val_records.push(r);
        } else {
            train_records.push(r);
        }
    }
    let samples = label_rollouts(&train_records, k)?;
    let balanced = balance(&samples, seed)?;
    let critic = Critic::new();
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, "critic-init", 0);
    critic.init(&mut store, &mut rng);
    let curve = critic.train(
        &mut store,
        &balanced,
        epochs,
        64,
        &AdamConfig::with_lr(1e-3, 0.0),
        seed,
    )?;
    let calibrations = calibrate(&critic, &store, &val_records, k, thresholds)?;
    Ok(CriticTraining {
        store,
        calibrations,
        loss_curve: curve,
        n_train_rollouts: train_records.len(),
        n_val_rollouts: val_records.len(),
    })
}
