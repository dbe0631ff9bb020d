//! Closed-loop scenario stepping.
//!
//! The ego executes motion tokens; background agents advance by log replay,
//! IDM along lane centerlines, or world-model token sampling. Collision and
//! off-road flags are evaluated at every sub-step and stored in the rollout
//! record together with the full correction trace, so every metric can be
//! recomputed offline from the record alone.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{select_action, ActionEnv, CorrectionConfig};
use crate::critic::critic_features;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::policy::{build_ego_context, CorrectionTrace, EgoContext, Policy};
use crate::rngutil::stream_rng;
use crate::scene::{
    boxes_overlap, offroad, polyline_pose_at, polyline_project, progression, AgentState, Pose2D,
    RoadMap, Scenario, Trajectory,
};
use crate::tokenizer::{decode, decode_poses, TokenId, TokenVocabulary, SUBSTEPS, SUBSTEP_DT};
use crate::world::{BodyView, SceneView, WorldModel, HISTORY_TOKENS};

/// How background agents advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentMode {
    /// Replay the scenario logs exactly (non-reactive).
    LogReplay,
    /// IDM along lane centerlines, reacting to whoever is ahead (reactive).
    Idm,
    /// Sample tokens from the frozen world model (reactive, learned).
    WorldModel,
}

impl std::fmt::Display for AgentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AgentMode::LogReplay => "logreplay",
            AgentMode::Idm => "idm",
            AgentMode::WorldModel => "worldmodel",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub substeps_per_token: usize,
    pub horizon_tokens: usize,
    pub agent_mode: AgentMode,
    /// Stop the rollout at the first colliding planning step (training);
    /// evaluation runs the full horizon.
    pub stop_on_collision: bool,
    /// World-model sampling temperature when agent_mode is WorldModel.
    pub agent_temperature: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: SUBSTEP_DT,
            substeps_per_token: SUBSTEPS,
            horizon_tokens: 16,
            agent_mode: AgentMode::LogReplay,
            stop_on_collision: false,
            agent_temperature: 1.0,
        }
    }
}

/// Intelligent Driver Model parameters (Treiber).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub v0: f64,
    pub t_headway: f64,
    pub a_max: f64,
    pub b_comfort: f64,
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 10.0,
            t_headway: 1.5,
            a_max: 2.0,
            b_comfort: 2.0,
            s0: 2.0,
            delta: 4.0,
        }
    }
}

/// Sentinel gap meaning "no leader" (paired with v_lead = v).
pub const IDM_NO_LEADER_GAP: f64 = 1e9;

/// IDM acceleration, clamped to [-2 b_comfort, a_max]. A non-positive gap
/// triggers the emergency clamp.
pub fn idm_accel(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> f64 {
    let emergency = -2.0 * p.b_comfort;
    if gap <= 0.0 {
        return emergency;
    }
    let s_star = p.s0 + v * p.t_headway + v * (v - v_lead) / (2.0 * (p.a_max * p.b_comfort).sqrt());
    let a = p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / gap).powi(2));
    a.clamp(emergency, p.a_max)
}

/// Search horizon for leaders, meters of arc ahead.
const LEADER_LOOKAHEAD_M: f64 = 100.0;

/// Nearest body ahead of `subject` on its nearest-centerline lane or the
/// successor chain within 100 m, with the bumper-to-bumper gap.
pub fn leader_of(map: &RoadMap, states: &[AgentState], subject: usize) -> Option<(usize, f64)> {
    let me = &states[subject];
    let (my_lane, _) = map.nearest_lane(me.pose.position())?;
    let my_arc = map.lanes[my_lane].project(me.pose.position()).0;

    // lane assignments of everyone else
    let assigned: Vec<Option<(usize, f64)>> = states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == subject {
                None
            } else {
                map.nearest_lane(s.pose.position())
                    .map(|(lane, _)| (lane, map.lanes[lane].project(s.pose.position()).0))
            }
        })
        .collect();

    // walk the successor chain, accumulating arc offsets relative to `me`
    let mut best: Option<(usize, f64)> = None; // (body index, distance along)
    let mut stack: Vec<(usize, f64)> = vec![(my_lane, -my_arc)];
    let mut visited: Vec<(usize, i64)> = Vec::new();
    while let Some((lane, offset)) = stack.pop() {
        // avoid revisiting a lane at an equal-or-farther offset
        let key = (lane, (offset * 1e6) as i64);
        if visited.contains(&key) {
            continue;
        }
        visited.push(key);
        for (i, a) in assigned.iter().enumerate() {
            if let Some((alane, aarc)) = a {
                if *alane == lane {
                    let along = offset + aarc;
                    if along > 1e-9
                        && along <= LEADER_LOOKAHEAD_M
                        && best.is_none_or(|(_, d)| along < d)
                    {
                        best = Some((i, along));
                    }
                }
            }
        }
        let lane_len = map.lanes[lane].arc_length();
        let next_offset = offset + lane_len;
        if next_offset < LEADER_LOOKAHEAD_M {
            for succ in map.successor_ids(&map.lanes[lane].id) {
                if let Some(si) = map.lane_index(succ) {
                    stack.push((si, next_offset));
                }
            }
        }
    }

    best.map(|(i, along)| (i, along - me.length / 2.0 - states[i].length / 2.0))
}

#[derive(Debug, Clone)]
enum DriveState {
    Log,
    Idm { path: Vec<[f64; 2]>, s: f64, v: f64 },
    WorldModel,
}

/// One body in the running simulation.
#[derive(Debug, Clone)]
pub struct SimBody {
    pub state: AgentState,
    pub prev_pose: Option<Pose2D>,
    pub history_tokens: Vec<TokenId>,
    /// Last few absolute sub-step poses, oldest first (critic features).
    pub recent_poses: Vec<Pose2D>,
    drive: DriveState,
}

impl SimBody {
    fn new(state: AgentState, drive: DriveState) -> Self {
        Self {
            state,
            prev_pose: None,
            history_tokens: Vec::new(),
            recent_poses: Vec::new(),
            drive,
        }
    }

    fn view(&self) -> BodyView {
        BodyView {
            state: self.state,
            prev_pose: self.prev_pose,
            history_tokens: self.history_tokens.clone(),
        }
    }

    fn advance_to(&mut self, state: AgentState) {
        self.prev_pose = Some(self.state.pose);
        self.recent_poses.push(self.state.pose);
        let keep = HISTORY_TOKENS;
        if self.recent_poses.len() > keep {
            let drop = self.recent_poses.len() - keep;
            self.recent_poses.drain(..drop);
        }
        self.state = state;
    }
}

/// Per-sub-step record: everything needed to recompute event flags offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstepSnapshot {
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
    pub collision: bool,
    pub offroad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub token: TokenId,
    pub critic_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStepRecord {
    pub scene_before: SceneSnapshot,
    /// Correction trace plus the executed token; the executed token is last.
    pub proposals: Vec<ProposalRecord>,
    pub executed: TokenId,
    pub exhausted: bool,
    pub substeps: Vec<SubstepSnapshot>,
}

impl PlanStepRecord {
    pub fn collision(&self) -> bool {
        self.substeps.iter().any(|s| s.collision)
    }

    pub fn offroad(&self) -> bool {
        self.substeps.iter().any(|s| s.offroad)
    }

    /// Rejected-proposal count at this step.
    pub fn corrections(&self) -> usize {
        self.proposals.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub collided: bool,
    pub offroad: bool,
    pub progression: f64,
    /// Mean rejected proposals per executed planning step.
    pub avg_correction_tokens: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub scenario_seed: u64,
    pub agent_mode: AgentMode,
    pub steps: Vec<PlanStepRecord>,
    pub metrics: RolloutMetrics,
}

impl RolloutRecord {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Recompute per-sub-step (collision, offroad) flags from stored states.
pub fn recompute_flags(record: &RolloutRecord, map: &RoadMap) -> Vec<(bool, bool)> {
    let mut out = Vec::new();
    for step in &record.steps {
        for ss in &step.substeps {
            let ego_box = ss.ego.footprint();
            let collision = ss
                .agents
                .iter()
                .any(|a| boxes_overlap(&ego_box, &a.footprint()));
            out.push((collision, offroad(&ego_box, map)));
        }
    }
    out
}

/// Source of ego proposal distributions.
pub trait ProposalSource: Sync {
    fn propose(&self, ctx: &EgoContext, t: usize) -> Result<Vec<f64>>;
}

/// The trained policy as a proposal source.
pub struct PolicySource<'a> {
    pub policy: &'a Policy,
    pub store: &'a ParamStore,
}

impl ProposalSource for PolicySource<'_> {
    fn propose(&self, ctx: &EgoContext, _t: usize) -> Result<Vec<f64>> {
        self.policy.propose(self.store, ctx)
    }
}

/// Replays a fixed token sequence (near-one-hot distributions).
pub struct ExpertReplay {
    pub tokens: Vec<TokenId>,
    pub vocab_size: usize,
}

impl ProposalSource for ExpertReplay {
    fn propose(&self, _ctx: &EgoContext, t: usize) -> Result<Vec<f64>> {
        let token = *self
            .tokens
            .get(t)
            .ok_or_else(|| Error::MissingData(format!("no replay token for step {t}")))?;
        let mut dist = vec![0.0; self.vocab_size];
        dist[token] = 1.0;
        Ok(dist)
    }
}

/// Collision-risk scorer over critic feature vectors.
pub trait RiskScorer: Sync {
    fn score(&self, features: &[f64]) -> Result<f64>;
}

/// Scorer that never flags; pairs with Off mode and uncorrected baselines.
pub struct ZeroRisk;

impl RiskScorer for ZeroRisk {
    fn score(&self, _features: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Per-step correction budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BudgetMode {
    /// Use `CorrectionConfig::max_corrections` every step.
    Fixed,
    /// Draw uniformly from `lo..=hi` each planning step (RL rollouts).
    Uniform { lo: usize, hi: usize },
}

/// Bundled read-only model handles for a rollout.
pub struct RolloutInputs<'a> {
    pub proposals: &'a dyn ProposalSource,
    pub scorer: &'a dyn RiskScorer,
    pub world: Option<(&'a WorldModel, &'a ParamStore)>,
    pub vocab: &'a TokenVocabulary,
}

/// Running simulation state; `step` advances one planning step.
pub struct SimState<'a> {
    pub scenario: &'a Scenario,
    pub cfg: SimConfig,
    pub substep: usize,
    pub ego: SimBody,
    pub agents: Vec<SimBody>,
}

impl<'a> Clone for SimState<'a> {
    fn clone(&self) -> Self {
        Self {
            scenario: self.scenario,
            cfg: self.cfg,
            substep: self.substep,
            ego: self.ego.clone(),
            agents: self.agents.clone(),
        }
    }
}

/// Lane path an agent follows in IDM mode: lanes its log visits, deduped,
/// extended through first successors.
fn derive_idm_path(scenario: &Scenario, agent: usize) -> Vec<[f64; 2]> {
    let map = &scenario.map;
    let mut lane_seq: Vec<usize> = Vec::new();
    for st in &scenario.agent_logs[agent].states {
        if let Some((lane, _)) = map.nearest_lane(st.pose.position()) {
            if lane_seq.last() != Some(&lane) {
                lane_seq.push(lane);
            }
        }
    }
    if lane_seq.is_empty() {
        if let Some((lane, _)) = map.nearest_lane(scenario.agents_init[agent].pose.position()) {
            lane_seq.push(lane);
        }
    }
    // extend through successors so the path outlives the horizon
    for _ in 0..4 {
        let last = *lane_seq.last().unwrap();
        let succ = map.successor_ids(&map.lanes[last].id);
        match succ.first().and_then(|id| map.lane_index(id)) {
            Some(next) if !lane_seq.contains(&next) => lane_seq.push(next),
            _ => break,
        }
    }
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for lane in lane_seq {
        for &p in &map.lanes[lane].points {
            if pts
                .last()
                .map(|&q| (p[0] - q[0]).hypot(p[1] - q[1]) > 1e-9)
                .unwrap_or(true)
            {
                pts.push(p);
            }
        }
    }
    pts
}

impl<'a> SimState<'a> {
    pub fn new(scenario: &'a Scenario, cfg: SimConfig) -> Self {
        let ego = SimBody::new(scenario.ego_init, DriveState::Log);
        let agents = scenario
            .agents_init
            .iter()
            .enumerate()
            .map(|(i, init)| {
                let drive = match cfg.agent_mode {
                    AgentMode::LogReplay => DriveState::Log,
                    AgentMode::WorldModel => DriveState::WorldModel,
                    AgentMode::Idm => {
                        let path = derive_idm_path(scenario, i);
                        let s = if path.len() >= 2 {
                            polyline_project(&path, init.pose.position()).0
                        } else {
                            0.0
                        };
                        DriveState::Idm {
                            path,
                            s,
                            v: init.speed,
                        }
                    }
                };
                SimBody::new(*init, drive)
            })
            .collect();
        Self {
            scenario,
            cfg,
            substep: 0,
            ego,
            agents,
        }
    }

    /// Planning-step index.
    pub fn step_index(&self) -> usize {
        self.substep / self.cfg.substeps_per_token
    }

    pub fn scene_view(&self, bodies: &'a mut Vec<BodyView>) -> SceneView<'a> {
        bodies.clear();
        bodies.push(self.ego.view());
        for a in &self.agents {
            bodies.push(a.view());
        }
        SceneView {
            map: &self.scenario.map,
            bodies,
        }
    }

    fn body_views(&self) -> Vec<BodyView> {
        let mut v = Vec::with_capacity(1 + self.agents.len());
        v.push(self.ego.view());
        for a in &self.agents {
            v.push(a.view());
        }
        v
    }

    /// Execute one planning step: the ego runs `ego_token`, agents advance
    /// per the configured mode.
    #[allow(clippy::needless_range_loop)] // k indexes lockstep plans and snapshots
    pub fn step(
        &mut self,
        ego_token: TokenId,
        inputs: &RolloutInputs,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SubstepSnapshot>> {
        let s = self.cfg.substeps_per_token;
        let ego_states = decode(
            ego_token,
            self.ego.state.pose,
            self.ego.state.length,
            self.ego.state.width,
            inputs.vocab,
        )?;

        // WorldModel agents commit to one token each at the step boundary
        let mut agent_plans: Vec<Option<Vec<AgentState>>> = vec![None; self.agents.len()];
        if self.cfg.agent_mode == AgentMode::WorldModel && !self.agents.is_empty() {
            let (wm, wm_store) = inputs.world.ok_or_else(|| {
                Error::MissingData("world-model agent mode without a world model".into())
            })?;
            let bodies = self.body_views();
            let view = SceneView {
                map: &self.scenario.map,
                bodies: &bodies,
            };
            let subjects: Vec<usize> = (1..bodies.len()).collect();
            let tokens =
                wm.sample_step(wm_store, &view, &subjects, self.cfg.agent_temperature, rng)?;
            for (ai, tok) in tokens.iter().enumerate() {
                let states = decode(
                    *tok,
                    self.agents[ai].state.pose,
                    self.agents[ai].state.length,
                    self.agents[ai].state.width,
                    inputs.vocab,
                )?;
                self.agents[ai].history_tokens.push(*tok);
                agent_plans[ai] = Some(states);
            }
        }

        let idm = IdmParams::default();
        let mut snapshots = Vec::with_capacity(s);
        for k in 0..s {
            let global = self.substep + k + 1;
            // snapshot of positions before this sub-step (IDM reacts to it)
            let frozen: Vec<AgentState> = std::iter::once(self.ego.state)
                .chain(self.agents.iter().map(|a| a.state))
                .collect();

            self.ego.advance_to(ego_states[k]);
            for (ai, agent) in self.agents.iter_mut().enumerate() {
                let next = match &mut agent.drive {
                    DriveState::Log => {
                        let log = &self.scenario.agent_logs[ai];
                        *log.states.get(global).ok_or_else(|| {
                            Error::MissingData(format!(
                                "agent {ai} log ends before sub-step {global}"
                            ))
                        })?
                    }
                    DriveState::WorldModel => {
                        agent_plans[ai].as_ref().expect("world-model plan exists")[k]
                    }
                    DriveState::Idm { path, s, v } => {
                        let accel = match leader_of(&self.scenario.map, &frozen, ai + 1) {
                            Some((lead_idx, gap)) => {
                                idm_accel(*v, frozen[lead_idx].speed, gap, &idm)
                            }
                            None => idm_accel(*v, *v, IDM_NO_LEADER_GAP, &idm),
                        };
                        *v = (*v + accel * self.cfg.dt).max(0.0);
                        *s += *v * self.cfg.dt;
                        let pose = polyline_pose_at(path, *s);
                        AgentState::new(pose, *v, agent.state.length, agent.state.width)
                    }
                };
                agent.advance_to(next);
            }

            let ego_box = self.ego.state.footprint();
            let collision = self
                .agents
                .iter()
                .any(|a| boxes_overlap(&ego_box, &a.state.footprint()));
            let off = offroad(&ego_box, &self.scenario.map);
            snapshots.push(SubstepSnapshot {
                ego: self.ego.state,
                agents: self.agents.iter().map(|a| a.state).collect(),
                collision,
                offroad: off,
            });
        }
        self.ego.history_tokens.push(ego_token);
        self.substep += s;
        Ok(snapshots)
    }
}

/// Context bundle giving the correction engine access to models and the
/// (clonable) simulation state for lookahead.
struct StepEnv<'a, 'b> {
    sim: &'b SimState<'a>,
    inputs: &'b RolloutInputs<'a>,
    t: usize,
    base_ctx: EgoContext,
    rollout_seed: u64,
}

impl StepEnv<'_, '_> {
    fn ctx_with(&self, trace: &CorrectionTrace) -> EgoContext {
        self.base_ctx.with_trace(trace.clone())
    }
}

impl ActionEnv for StepEnv<'_, '_> {
    fn propose_dist(&mut self, trace: &CorrectionTrace) -> Result<Vec<f64>> {
        self.inputs.proposals.propose(&self.ctx_with(trace), self.t)
    }

    fn score(&mut self, token: TokenId) -> Result<f64> {
        let poses = decode_poses(token, self.sim.ego.state.pose, self.inputs.vocab)?;
        let agents: Vec<AgentState> = self.sim.agents.iter().map(|a| a.state).collect();
        let features = critic_features(
            self.sim.ego.state.pose,
            &self.sim.ego.recent_poses,
            &poses,
            &agents,
        );
        self.inputs.scorer.score(&features)
    }

    fn lookahead(&mut self, first: TokenId, salt: u64) -> Result<(bool, f64)> {
        let mut sim = self.sim.clone();
        let mut rng = stream_rng(self.rollout_seed, "lookahead", (self.t as u64) << 8 | salt);
        let mut collided = false;
        let snaps = sim.step(first, self.inputs, &mut rng)?;
        collided |= snaps.iter().any(|s| s.collision);
        let horizon = sim.cfg.horizon_tokens;
        let mut t = self.t + 1;
        while t < horizon && !collided {
            let ctx = build_rollout_ctx(&sim, self.inputs, &CorrectionTrace::empty())?;
            let dist = self.inputs.proposals.propose(&ctx, t)?;
            let logits: Vec<f64> = dist.iter().map(|p| p.max(1e-300).ln()).collect();
            let token = crate::world::sample_categorical(&logits, 1.0, &mut rng);
            let snaps = sim.step(token, self.inputs, &mut rng)?;
            collided |= snaps.iter().any(|s| s.collision);
            t += 1;
        }
        let final_state = Trajectory::new(vec![sim.ego.state]);
        let prog = progression(&final_state, &sim.scenario.expert)?;
        Ok((collided, prog))
    }
}

/// Ego context at the current boundary of `sim`, with world-model argmax
/// end-states for the neighbor slots when a world model is available.
fn build_rollout_ctx(
    sim: &SimState,
    inputs: &RolloutInputs,
    trace: &CorrectionTrace,
) -> Result<EgoContext> {
    let bodies = sim.body_views();
    let view = SceneView {
        map: &sim.scenario.map,
        bodies: &bodies,
    };
    let pad = inputs.vocab.len();
    build_ego_context(
        &view,
        0,
        &sim.scenario.route,
        trace,
        pad,
        |body_idx| match inputs.world {
            None => Ok(None),
            Some((wm, wm_store)) => {
                let tok = wm.argmax_token(wm_store, &view, body_idx)?;
                let start = view.bodies[body_idx].state;
                let states = decode(tok, start.pose, start.length, start.width, inputs.vocab)?;
                let last = states.last().expect("token has sub-steps");
                Ok(Some((last.pose, last.speed)))
            }
        },
    )
}

/// Closed-loop rollout: H planning steps of propose-evaluate-correct, with
/// per-step event flags and terminal metrics. Deterministic given `seed`.
pub fn rollout(
    scenario: &Scenario,
    sim_cfg: &SimConfig,
    corr_cfg: &CorrectionConfig,
    budget: BudgetMode,
    inputs: &RolloutInputs,
    seed: u64,
) -> Result<RolloutRecord> {
    Ok(rollout_with_contexts(scenario, sim_cfg, corr_cfg, budget, inputs, seed)?.0)
}

/// As [`rollout`], also returning the ego context each executed token was
/// conditioned on (trace included) — the policy-gradient update needs it.
pub fn rollout_with_contexts(
    scenario: &Scenario,
    sim_cfg: &SimConfig,
    corr_cfg: &CorrectionConfig,
    budget: BudgetMode,
    inputs: &RolloutInputs,
    seed: u64,
) -> Result<(RolloutRecord, Vec<EgoContext>)> {
    let start = Instant::now();
    let mut sim = SimState::new(scenario, *sim_cfg);
    let mut rng = stream_rng(seed, "rollout", scenario.seed);
    let mut steps: Vec<PlanStepRecord> = Vec::with_capacity(sim_cfg.horizon_tokens);
    let mut contexts: Vec<EgoContext> = Vec::with_capacity(sim_cfg.horizon_tokens);
    let mut collided = false;

    for t in 0..sim_cfg.horizon_tokens {
        let scene_before = SceneSnapshot {
            ego: sim.ego.state,
            agents: sim.agents.iter().map(|a| a.state).collect(),
        };
        let step_budget = match budget {
            BudgetMode::Fixed => corr_cfg.max_corrections,
            BudgetMode::Uniform { lo, hi } => rng.random_range(lo..=hi),
        };
        let step_cfg = CorrectionConfig {
            max_corrections: step_budget,
            ..*corr_cfg
        };
        let base_ctx = build_rollout_ctx(&sim, inputs, &CorrectionTrace::empty())?;
        let mut env = StepEnv {
            sim: &sim,
            inputs,
            t,
            base_ctx,
            rollout_seed: seed,
        };
        let base_ctx_for_record = env.base_ctx.clone();
        let outcome = select_action(&step_cfg, &mut env, &mut rng)?;
        contexts.push(base_ctx_for_record.with_trace(outcome.executed_conditioning.clone()));

        let substeps = sim.step(outcome.executed, inputs, &mut rng)?;
        let step_collision = substeps.iter().any(|s| s.collision);
        let mut proposals: Vec<ProposalRecord> = outcome
            .trace
            .rejected
            .iter()
            .zip(&outcome.probs)
            .map(|(&token, &critic_prob)| ProposalRecord { token, critic_prob })
            .collect();
        proposals.push(ProposalRecord {
            token: outcome.executed,
            critic_prob: *outcome.probs.last().expect("probs non-empty"),
        });
        steps.push(PlanStepRecord {
            scene_before,
            proposals,
            executed: outcome.executed,
            exhausted: outcome.exhausted,
            substeps,
        });
        if step_collision {
            collided = true;
            if sim_cfg.stop_on_collision {
                break;
            }
        }
    }

    let mut ego_states = vec![scenario.ego_init];
    for step in &steps {
        for ss in &step.substeps {
            ego_states.push(ss.ego);
        }
    }
    let ego_traj = Trajectory::new(ego_states);
    let prog = progression(&ego_traj, &scenario.expert)?;
    let offroad_any = steps.iter().any(PlanStepRecord::offroad);
    let total_corrections: usize = steps.iter().map(PlanStepRecord::corrections).sum();
    let n_steps = steps.len().max(1);

    Ok((
        RolloutRecord {
            scenario_seed: scenario.seed,
            agent_mode: sim_cfg.agent_mode,
            steps,
            metrics: RolloutMetrics {
                collided,
                offroad: offroad_any,
                progression: prog,
                avg_correction_tokens: total_corrections as f64 / n_steps as f64,
                wall_clock_s: start.elapsed().as_secs_f64(),
            },
        },
        contexts,
    ))
}
