//! Suite-level evaluation and ablation grids.
//!
//! Rollouts fan out across worker threads (each one is independent and
//! seeded per scenario), metrics aggregate in scenario order, and every
//! report row can be recomputed offline from the stored rollout records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{CorrectionConfig, CorrectionMode};
use crate::critic::{ttc_first_flag, Critic, CriticScorer};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::policy::Policy;
use crate::rngutil::child_seed;
use crate::scene::Scenario;
use crate::sim::{
    rollout, AgentMode, BudgetMode, PolicySource, RolloutInputs, RolloutRecord, SimConfig,
};
use crate::tokenizer::TokenVocabulary;
use crate::world::WorldModel;

/// One aggregated evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mode: String,
    pub agent_mode: String,
    pub tau: f64,
    pub max_len: usize,
    pub collision_rate_pct: f64,
    pub offroad_rate_pct: f64,
    pub progression_pct: f64,
    pub avg_correction_tokens: f64,
    /// Mean planning steps between first critic flag and collision, over
    /// colliding rollouts (critic applied offline, independent of mode).
    pub mean_ttc_first_flag: f64,
    pub wall_clock_per_rollout_s: f64,
}

pub struct EvalOutput {
    pub row: EvalRow,
    pub records: Vec<RolloutRecord>,
}

/// Bundle of trained artifacts needed to evaluate.
pub struct EvalModels<'a> {
    pub policy: &'a Policy,
    pub critic: &'a Critic,
    /// Holds both "pi." and "wm." tensors.
    pub run_store: &'a ParamStore,
    pub critic_store: &'a ParamStore,
    pub vocab: &'a TokenVocabulary,
}

/// Aggregate stored records into a report row (pure function of records).
pub fn aggregate(
    records: &[RolloutRecord],
    models: &EvalModels,
    corr_cfg: &CorrectionConfig,
    agent_mode: AgentMode,
) -> Result<EvalRow> {
    let n = records.len().max(1) as f64;
    let collision_rate = records.iter().filter(|r| r.metrics.collided).count() as f64 / n;
    let offroad_rate = records.iter().filter(|r| r.metrics.offroad).count() as f64 / n;
    let progression = records.iter().map(|r| r.metrics.progression).sum::<f64>() / n;
    let avg_tok = records
        .iter()
        .map(|r| r.metrics.avg_correction_tokens)
        .sum::<f64>()
        / n;
    let wall = records.iter().map(|r| r.metrics.wall_clock_s).sum::<f64>() / n;
    let mut ttc_sum = 0.0;
    let mut ttc_n = 0usize;
    for r in records {
        if let Some(ttc) =
            ttc_first_flag(models.critic, models.critic_store, r, corr_cfg.threshold)?
        {
            ttc_sum += ttc;
            ttc_n += 1;
        }
    }
    Ok(EvalRow {
        mode: corr_cfg.mode.to_string(),
        agent_mode: agent_mode.to_string(),
        tau: corr_cfg.threshold,
        max_len: corr_cfg.max_corrections,
        collision_rate_pct: 100.0 * collision_rate,
        offroad_rate_pct: 100.0 * offroad_rate,
        progression_pct: 100.0 * progression,
        avg_correction_tokens: avg_tok,
        mean_ttc_first_flag: if ttc_n > 0 {
            ttc_sum / ttc_n as f64
        } else {
            0.0
        },
        wall_clock_per_rollout_s: wall,
    })
}

/// Full-horizon evaluation of one configuration over a scenario set.
pub fn evaluate(
    scenarios: &[Scenario],
    models: &EvalModels,
    corr_cfg: &CorrectionConfig,
    agent_mode: AgentMode,
    seed: u64,
) -> Result<EvalOutput> {
    let wm = WorldModel::new(models.vocab.len());
    let horizon = scenarios.first().map(|s| s.horizon_tokens).unwrap_or(16);
    let sim_cfg = SimConfig {
        agent_mode,
        stop_on_collision: false,
        horizon_tokens: horizon,
        ..SimConfig::default()
    };
    let records: Vec<RolloutRecord> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, sc)| {
            let source = PolicySource {
                policy: models.policy,
                store: models.run_store,
            };
            let scorer = CriticScorer {
                critic: models.critic,
                store: models.critic_store,
            };
            let inputs = RolloutInputs {
                proposals: &source,
                scorer: &scorer,
                world: Some((&wm, models.run_store)),
                vocab: models.vocab,
            };
            rollout(
                sc,
                &sim_cfg,
                corr_cfg,
                BudgetMode::Fixed,
                &inputs,
                child_seed(seed, "eval", i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let row = aggregate(&records, models, corr_cfg, agent_mode)?;
    Ok(EvalOutput { row, records })
}

/// Cartesian threshold x correction-length grid plus the four baseline
/// strategies, all on identical seeds.
pub fn ablate(
    scenarios: &[Scenario],
    models: &EvalModels,
    base_cfg: &CorrectionConfig,
    taus: &[f64],
    lengths: &[usize],
    agent_mode: AgentMode,
    seed: u64,
) -> Result<Vec<EvalOutput>> {
    let mut outputs = Vec::new();
    for &tau in taus {
        for &c in lengths {
            let cfg = CorrectionConfig {
                mode: CorrectionMode::FullTrace,
                threshold: tau,
                max_corrections: c,
                ..*base_cfg
            };
            outputs.push(evaluate(scenarios, models, &cfg, agent_mode, seed)?);
        }
    }
    for mode in [
        CorrectionMode::Off,
        CorrectionMode::RejectionSampling,
        CorrectionMode::LastTokenOnly,
        CorrectionMode::CandidateSelection,
    ] {
        let cfg = CorrectionConfig { mode, ..*base_cfg };
        outputs.push(evaluate(scenarios, models, &cfg, agent_mode, seed)?);
    }
    Ok(outputs)
}

/// Versioned CSV schema; wall clock is the only nondeterministic column.
pub const EVAL_CSV_HEADER: &str = "# eval-report v1\nmode,agent_mode,tau,max_len,collision_rate_pct,offroad_rate_pct,progression_pct,avg_correction_tokens,mean_ttc_first_flag,wall_clock_per_rollout_s\n";

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(EVAL_CSV_HEADER);
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}\n",
            r.mode,
            r.agent_mode,
            r.tau,
            r.max_len,
            r.collision_rate_pct,
            r.offroad_rate_pct,
            r.progression_pct,
            r.avg_correction_tokens,
            r.mean_ttc_first_flag,
            r.wall_clock_per_rollout_s
        ));
    }
    s
}

pub fn write_csv(path: &std::path::Path, rows: &[EvalRow]) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows))?;
    Ok(())
}

/// The CSV with the wall-clock column blanked: every remaining byte is
/// seed-deterministic (used by the reproducibility checks).
pub fn csv_without_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            if line.starts_with('#') || line.starts_with("mode,") {
                line.to_string()
            } else {
                match line.rsplit_once(',') {
                    Some((head, _)) => format!("{head},-"),
                    None => line.to_string(),
                }
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
