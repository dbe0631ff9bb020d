//! The propose-evaluate-correct action selector, plus the alternative
//! selection strategies as pluggable modes.
//!
//! The selector is written against [`ActionEnv`] so it stays independent of
//! the concrete policy, critic, and simulator; a planning step provides the
//! three callbacks and owns all model state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{CorrectionTrace, MAX_TRACE};
use crate::tokenizer::TokenId;
use crate::world::{argmax, sample_categorical};

/// How the next proposal is drawn from the proposal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    /// Argmax with [`repeat_guard`] against re-proposing rejected tokens.
    Greedy,
    /// Temperature sampling; the guard passes proposals through unchanged.
    Temperature(f64),
}

/// Action-selection strategy for one planning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionMode {
    /// Accept the first proposal unconditionally; the critic is never called.
    Off,
    /// Reject flagged proposals and re-propose conditioned on the whole trace.
    FullTrace,
    /// Like FullTrace but conditioning sees only the most recent rejection.
    LastTokenOnly,
    /// Re-draw from the unchanged base distribution after each rejection.
    RejectionSampling,
    /// Sample full-horizon candidate rollouts, filter collisions, pick the
    /// highest progression.
    CandidateSelection,
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CorrectionMode::Off => "off",
            CorrectionMode::FullTrace => "full_trace",
            CorrectionMode::LastTokenOnly => "last_token",
            CorrectionMode::RejectionSampling => "rejection_sampling",
            CorrectionMode::CandidateSelection => "candidate_selection",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub mode: CorrectionMode,
    /// Critic probability at or above which a proposal is rejected.
    pub threshold: f64,
    /// Maximum number of rejections per planning step (trace capacity).
    pub max_corrections: usize,
    /// CandidateSelection only.
    pub n_candidates: usize,
    pub sampling: Sampling,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::FullTrace,
            threshold: 0.75,
            max_corrections: 5,
            n_candidates: 10,
            sampling: Sampling::Greedy,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidParameter(format!(
                "correction threshold {} outside [0,1]",
                self.threshold
            )));
        }
        if self.max_corrections > MAX_TRACE {
            return Err(Error::InvalidParameter(format!(
                "max corrections {} exceeds trace capacity {MAX_TRACE}",
                self.max_corrections
            )));
        }
        if self.n_candidates < 1 {
            return Err(Error::InvalidParameter("n_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one planning step decided.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub executed: TokenId,
    /// Rejected proposals in proposal order (the executed token is not in it).
    pub trace: CorrectionTrace,
    /// Critic probability per proposal, aligned [trace..., executed].
    /// Modes that never score a proposal record 0.0.
    pub probs: Vec<f64>,
    /// True when the correction budget ran out and the minimum-probability
    /// proposal was executed instead of a safe one.
    pub exhausted: bool,
    /// The trace the executed proposal was conditioned on when it was
    /// generated (empty for Off / RejectionSampling / CandidateSelection).
    pub executed_conditioning: CorrectionTrace,
}

/// The hooks a planning step provides to the selector.
pub trait ActionEnv {
    /// Proposal distribution conditioned on a correction trace.
    fn propose_dist(&mut self, trace: &CorrectionTrace) -> Result<Vec<f64>>;
    /// Critic probability that executing `token` now leads to a collision
    /// within the critic horizon.
    fn score(&mut self, token: TokenId) -> Result<f64>;
    /// CandidateSelection lookahead: run the remaining horizon after
    /// executing `first`, returning (collided, progression). `salt`
    /// decorrelates the candidate's internal randomness.
    fn lookahead(&mut self, first: TokenId, salt: u64) -> Result<(bool, f64)>;
}

/// Substitute a proposal that was already rejected: under Greedy sampling,
/// take the highest-probability token not in the trace; if the trace covers
/// the whole vocabulary, fall back to the plain argmax.
pub fn repeat_guard(trace: &CorrectionTrace, proposal: TokenId, dist: &[f64]) -> TokenId {
    if !trace.contains(proposal) {
        return proposal;
    }
    let mut best: Option<usize> = None;
    for (i, &p) in dist.iter().enumerate() {
        if trace.contains(i) {
            continue;
        }
        if best.is_none_or(|b| p > dist[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or_else(|| argmax(dist))
}

fn pick(dist: &[f64], sampling: Sampling, trace: &CorrectionTrace, rng: &mut impl Rng) -> TokenId {
    match sampling {
        Sampling::Greedy => repeat_guard(trace, argmax(dist), dist),
        Sampling::Temperature(t) => {
            let logits: Vec<f64> = dist.iter().map(|p| p.max(1e-300).ln()).collect();
            sample_categorical(&logits, t.max(1e-9), rng)
        }
    }
}

/// Run one planning step's action selection under `cfg`.
pub fn select_action(
    cfg: &CorrectionConfig,
    env: &mut dyn ActionEnv,
    rng: &mut impl Rng,
) -> Result<CorrectionOutcome> {
    cfg.validate()?;
    match cfg.mode {
        CorrectionMode::Off => {
            let dist = env.propose_dist(&CorrectionTrace::empty())?;
            let executed = pick(&dist, cfg.sampling, &CorrectionTrace::empty(), rng);
            Ok(CorrectionOutcome {
                executed,
                trace: CorrectionTrace::empty(),
                probs: vec![0.0],
                exhausted: false,
                executed_conditioning: CorrectionTrace::empty(),
            })
        }
        CorrectionMode::CandidateSelection => {
            let temperature = match cfg.sampling {
                Sampling::Temperature(t) => t,
                Sampling::Greedy => 1.0,
            };
            let mut best_safe: Option<(f64, TokenId)> = None;
            let mut best_any: Option<(f64, TokenId)> = None;
            for k in 0..cfg.n_candidates {
                let dist = env.propose_dist(&CorrectionTrace::empty())?;
                let first = pick(
                    &dist,
                    Sampling::Temperature(temperature),
                    &CorrectionTrace::empty(),
                    rng,
                );
                let (collided, progression) = env.lookahead(first, k as u64)?;
                if !collided && best_safe.is_none_or(|(p, _)| progression > p) {
                    best_safe = Some((progression, first));
                }
                if best_any.is_none_or(|(p, _)| progression > p) {
                    best_any = Some((progression, first));
                }
            }
            let (_, executed) = best_safe.or(best_any).expect("n_candidates >= 1");
            Ok(CorrectionOutcome {
                executed,
                trace: CorrectionTrace::empty(),
                probs: vec![0.0],
                exhausted: false,
                executed_conditioning: CorrectionTrace::empty(),
            })
        }
        CorrectionMode::FullTrace
        | CorrectionMode::LastTokenOnly
        | CorrectionMode::RejectionSampling => {
            let mut trace = CorrectionTrace::empty();
            let mut proposals: Vec<(TokenId, f64)> = Vec::new();
            let mut conditionings: Vec<CorrectionTrace> = Vec::new();
            let mut accepted: Option<usize> = None;
            for c in 0..=cfg.max_corrections {
                let conditioning = match cfg.mode {
                    CorrectionMode::FullTrace => trace.clone(),
                    CorrectionMode::LastTokenOnly => trace.last_only(),
                    _ => CorrectionTrace::empty(),
                };
                let dist = env.propose_dist(&conditioning)?;
                let token = pick(&dist, cfg.sampling, &trace, rng);
                let prob = env.score(token)?;
                proposals.push((token, prob));
                conditionings.push(conditioning);
                if prob < cfg.threshold {
                    accepted = Some(proposals.len() - 1);
                    break;
                }
                if c < cfg.max_corrections {
                    trace.push(token);
                }
            }
            let (executed_idx, exhausted) = match accepted {
                Some(i) => (i, false),
                None => {
                    // budget exhausted: execute the minimum-probability proposal
                    let mut best = 0;
                    for (i, (_, p)) in proposals.iter().enumerate() {
                        if *p < proposals[best].1 {
                            best = i;
                        }
                    }
                    (best, true)
                }
            };
            let executed = proposals[executed_idx].0;
            let mut out_trace = CorrectionTrace::empty();
            let mut probs = Vec::with_capacity(proposals.len());
            for (i, (tok, p)) in proposals.iter().enumerate() {
                if i != executed_idx {
                    out_trace.rejected.push(*tok);
                    probs.push(*p);
                }
            }
            probs.push(proposals[executed_idx].1);
            Ok(CorrectionOutcome {
                executed,
                trace: out_trace,
                probs,
                exhausted,
                executed_conditioning: conditionings[executed_idx].clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scripted environment: fixed base distribution, per-token critic
    /// scores, call counters.
    struct StubEnv {
        base: Vec<f64>,
        /// dist shift added per trace element (makes conditioning visible)
        trace_shift: f64,
        scores: Vec<f64>,
        propose_calls: Vec<CorrectionTrace>,
        score_calls: usize,
        lookahead: Vec<(bool, f64)>,
    }

    impl StubEnv {
        fn new(base: Vec<f64>, scores: Vec<f64>) -> Self {
            Self {
                base,
                trace_shift: 0.0,
                scores,
                propose_calls: Vec::new(),
                score_calls: 0,
                lookahead: Vec::new(),
            }
        }
    }

    impl ActionEnv for StubEnv {
        fn propose_dist(&mut self, trace: &CorrectionTrace) -> Result<Vec<f64>> {
            self.propose_calls.push(trace.clone());
            let mut d = self.base.clone();
            for (i, v) in d.iter_mut().enumerate() {
                *v += self.trace_shift * trace.len() as f64 * (i as f64 + 1.0);
            }
            let s: f64 = d.iter().sum();
            Ok(d.into_iter().map(|v| v / s).collect())
        }

        fn score(&mut self, token: TokenId) -> Result<f64> {
            self.score_calls += 1;
            Ok(self.scores[token])
        }

        fn lookahead(&mut self, first: TokenId, _salt: u64) -> Result<(bool, f64)> {
            Ok(self.lookahead[first])
        }
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::rngutil::stream_rng(3, "corr", 0)
    }

    #[test]
    fn zero_critic_makes_full_trace_identical_to_off() {
        let cfg_full = CorrectionConfig::default();
        let cfg_off = CorrectionConfig {
            mode: CorrectionMode::Off,
            ..cfg_full
        };
        let base = vec![0.1, 0.5, 0.2, 0.2];
        let mut env = StubEnv::new(base.clone(), vec![0.0; 4]);
        let out = select_action(&cfg_full, &mut env, &mut rng()).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.executed, 1);
        assert!(!out.exhausted);
        assert_eq!(env.score_calls, 1);

        let mut env_off = StubEnv::new(base, vec![0.0; 4]);
        let off = select_action(&cfg_off, &mut env_off, &mut rng()).unwrap();
        assert_eq!(off.executed, out.executed);
        assert_eq!(
            env_off.score_calls, 0,
            "Off mode must never call the critic"
        );
    }

    #[test]
    fn always_unsafe_critic_exhausts_budget_and_takes_argmin() {
        let cfg = CorrectionConfig {
            max_corrections: 2,
            ..CorrectionConfig::default()
        };
        // greedy walks 1 (p=.5), 2 (p=.25), 3 (p=.15); scores 1.0, 0.95, 0.8
        let mut env = StubEnv::new(vec![0.1, 0.5, 0.25, 0.15], vec![0.9, 1.0, 0.95, 0.8]);
        let out = select_action(&cfg, &mut env, &mut rng()).unwrap();
        assert!(out.exhausted);
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.probs.len(), 3);
        // argmin critic probability among the three proposals is token 3
        assert_eq!(out.executed, 3);
        assert_eq!(out.trace.rejected, vec![1, 2]);
        assert_eq!(out.probs, vec![1.0, 0.95, 0.8]);
    }

    #[test]
    fn full_trace_with_zero_budget_matches_off_outcome() {
        let cfg = CorrectionConfig {
            max_corrections: 0,
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.2, 0.3, 0.5], vec![1.0, 1.0, 1.0]);
        let out = select_action(&cfg, &mut env, &mut rng()).unwrap();
        assert_eq!(out.executed, 2);
        assert!(out.trace.is_empty());
        assert!(out.exhausted);

        let mut env_off = StubEnv::new(vec![0.2, 0.3, 0.5], vec![1.0, 1.0, 1.0]);
        let off_cfg = CorrectionConfig {
            mode: CorrectionMode::Off,
            ..CorrectionConfig::default()
        };
        let off = select_action(&off_cfg, &mut env_off, &mut rng()).unwrap();
        assert_eq!(off.executed, out.executed);
    }

    #[test]
    fn rejection_sampling_always_proposes_from_empty_trace() {
        let cfg = CorrectionConfig {
            mode: CorrectionMode::RejectionSampling,
            max_corrections: 3,
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.4, 0.3, 0.2, 0.1], vec![1.0, 1.0, 1.0, 1.0]);
        env.trace_shift = 0.05; // would change the dist if the trace leaked in
        let _ = select_action(&cfg, &mut env, &mut rng()).unwrap();
        assert_eq!(env.propose_calls.len(), 4);
        for call in &env.propose_calls {
            assert!(call.is_empty(), "trace leaked into rejection sampling");
        }
    }

    #[test]
    fn full_trace_conditions_on_growing_trace_and_last_token_on_one() {
        let cfg = CorrectionConfig {
            max_corrections: 2,
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.4, 0.3, 0.2, 0.1], vec![1.0; 4]);
        let _ = select_action(&cfg, &mut env, &mut rng()).unwrap();
        let lens: Vec<usize> = env.propose_calls.iter().map(|t| t.len()).collect();
        assert_eq!(lens, vec![0, 1, 2]);

        let cfg = CorrectionConfig {
            mode: CorrectionMode::LastTokenOnly,
            max_corrections: 2,
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.4, 0.3, 0.2, 0.1], vec![1.0; 4]);
        let _ = select_action(&cfg, &mut env, &mut rng()).unwrap();
        let lens: Vec<usize> = env.propose_calls.iter().map(|t| t.len()).collect();
        assert_eq!(
            lens,
            vec![0, 1, 1],
            "last-token mode conditions on one element"
        );
    }

    #[test]
    fn repeat_guard_behaviour() {
        let dist = vec![0.5, 0.3, 0.2];
        let empty = CorrectionTrace::empty();
        assert_eq!(repeat_guard(&empty, 0, &dist), 0);
        let trace = CorrectionTrace { rejected: vec![0] };
        assert_eq!(
            repeat_guard(&trace, 0, &dist),
            1,
            "next-best distinct token"
        );
        let full = CorrectionTrace {
            rejected: vec![0, 1, 2],
        };
        assert_eq!(repeat_guard(&full, 0, &dist), 0, "vocabulary exhausted");
    }

    #[test]
    fn greedy_rejections_walk_down_the_distribution() {
        let cfg = CorrectionConfig {
            max_corrections: 3,
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.1, 0.2, 0.3, 0.4], vec![1.0; 4]);
        let out = select_action(&cfg, &mut env, &mut rng()).unwrap();
        // rejects 3, 2, 1, 0; all scored 1.0; executes the first (tie argmin)
        assert_eq!(out.trace.rejected, vec![2, 1, 0]);
        assert_eq!(out.executed, 3);
    }

    #[test]
    fn candidate_selection_prefers_safe_high_progression() {
        let cfg = CorrectionConfig {
            mode: CorrectionMode::CandidateSelection,
            n_candidates: 6,
            sampling: Sampling::Temperature(1.0),
            ..CorrectionConfig::default()
        };
        let mut env = StubEnv::new(vec![0.25, 0.25, 0.25, 0.25], vec![0.0; 4]);
        // token -> (collided, progression): token 2 is safe with best progression
        env.lookahead = vec![(true, 0.9), (false, 0.4), (false, 0.7), (true, 1.0)];
        let out = select_action(&cfg, &mut env, &mut rng()).unwrap();
        assert!(out.trace.is_empty());
        assert!([1usize, 2usize].contains(&out.executed));
        // with 6 uniform draws, seeing token 2 is near-certain under this seed
        assert_eq!(out.executed, 2);

        // all colliding: highest progression wins among sampled
        let mut env = StubEnv::new(vec![0.25, 0.25, 0.25, 0.25], vec![0.0; 4]);
        env.lookahead = vec![(true, 0.1), (true, 0.4), (true, 0.7), (true, 1.0)];
        let out = select_action(&cfg, &mut env, &mut rng()).unwrap();
        let sampled_best = env.propose_calls.len().min(6);
        assert!(sampled_best > 0);
        assert!(out.executed == 3 || out.executed == 2);
    }

    #[test]
    fn candidate_selection_single_candidate_matches_off_temperature() {
        let base = vec![0.15, 0.35, 0.3, 0.2];
        let cfg_cand = CorrectionConfig {
            mode: CorrectionMode::CandidateSelection,
            n_candidates: 1,
            sampling: Sampling::Temperature(1.0),
            ..CorrectionConfig::default()
        };
        let cfg_off = CorrectionConfig {
            mode: CorrectionMode::Off,
            sampling: Sampling::Temperature(1.0),
            ..CorrectionConfig::default()
        };
        for i in 0..20 {
            let mut env_a = StubEnv::new(base.clone(), vec![0.0; 4]);
            env_a.lookahead = vec![(false, 0.5); 4];
            let mut env_b = StubEnv::new(base.clone(), vec![0.0; 4]);
            let mut ra = crate::rngutil::stream_rng(9, "cand", i);
            let mut rb = crate::rngutil::stream_rng(9, "cand", i);
            let a = select_action(&cfg_cand, &mut env_a, &mut ra).unwrap();
            let b = select_action(&cfg_off, &mut env_b, &mut rb).unwrap();
            assert_eq!(a.executed, b.executed, "seed stream diverged at {i}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = CorrectionConfig {
            threshold: 1.5,
            ..CorrectionConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.threshold = 0.5;
        cfg.n_candidates = 0;
        assert!(cfg.validate().is_err());
        cfg.n_candidates = 1;
        cfg.max_corrections = MAX_TRACE + 1;
        assert!(cfg.validate().is_err());
    }
}
