//! End-to-end pipeline driver: suite generation, vocabulary, imitation
//! pretraining, critic training, RL, and artifact paths under one root.
//! The CLI exposes each stage separately; this module strings them
//! together for programmatic runs (and reproducibility checks).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::critic::{write_calibration_csv, Critic, CriticCalibration};
use crate::error::Result;
use crate::nn::{save_checkpoint_with_meta, ParamStore};
use crate::policy::Policy;
use crate::scene::Scenario;
use crate::suite::{generate_suite, load_suite, SuiteSpec};
use crate::tokenizer::{extract_segments, fit_radius, MotionSegment, TokenVocabulary};
use crate::train::{
    build_tapes, calibrated_tau, merge_stores, pretrain, select_hard_tapes, split_store,
    train_critic, train_rl, IlConfig, PretrainEpoch, RlConfig, RlEpoch,
};
use crate::world::WorldModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_suite: SuiteSpec,
    pub eval_suite: SuiteSpec,
    pub vocab_target: usize,
    pub vocab_slack: usize,
    pub il: IlConfig,
    pub rl: RlConfig,
    pub critic_k: usize,
    pub critic_thresholds: Vec<f64>,
    pub critic_epochs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_suite: SuiteSpec {
                seed: 7,
                ..SuiteSpec::default()
            },
            eval_suite: SuiteSpec {
                seed: 8,
                ..SuiteSpec::default()
            },
            vocab_target: 128,
            vocab_slack: 8,
            il: IlConfig::default(),
            rl: RlConfig::default(),
            critic_k: 5,
            critic_thresholds: vec![0.0, 0.70, 0.75, 0.80],
            critic_epochs: 60,
            seed: 0,
        }
    }
}

/// Everything a full run produces, with artifact paths for byte-level
/// reproducibility checks.
pub struct PipelineArtifacts {
    pub root: PathBuf,
    pub train_scenarios: Vec<Scenario>,
    pub eval_scenarios: Vec<Scenario>,
    pub vocab: TokenVocabulary,
    pub policy: Policy,
    pub critic: Critic,
    pub wm_store: ParamStore,
    pub pi_il_store: ParamStore,
    pub pi_rl_store: ParamStore,
    pub critic_store: ParamStore,
    pub calibrations: Vec<CriticCalibration>,
    pub calibrated_tau: f64,
    pub il_curve: Vec<PretrainEpoch>,
    pub rl_rows: Vec<RlEpoch>,
    pub wall_clock_s: f64,
}

impl PipelineArtifacts {
    pub fn wm_path(&self) -> PathBuf {
        self.root.join("models/wm.ckpt")
    }
    pub fn pi_il_path(&self) -> PathBuf {
        self.root.join("models/pi_il.ckpt")
    }
    pub fn pi_rl_path(&self) -> PathBuf {
        self.root.join("models/pi_rl.ckpt")
    }
    pub fn critic_path(&self) -> PathBuf {
        self.root.join("models/qc.ckpt")
    }
}

/// Run every stage under `root`. Deterministic given the config.
pub fn run_all(root: &Path, cfg: &PipelineConfig) -> Result<PipelineArtifacts> {
    let started = Instant::now();
    std::fs::create_dir_all(root.join("models"))?;

    generate_suite(&cfg.train_suite, &root.join("suite_train"))?;
    generate_suite(&cfg.eval_suite, &root.join("suite_eval"))?;
    let train_scenarios = load_suite(&root.join("suite_train"))?;
    let eval_scenarios = load_suite(&root.join("suite_eval"))?;

    let mut segments: Vec<MotionSegment> = Vec::new();
    for sc in &train_scenarios {
        segments.extend(extract_segments(&sc.expert));
        for log in &sc.agent_logs {
            segments.extend(extract_segments(log));
        }
    }
    let vocab = fit_radius(&segments, cfg.vocab_target, cfg.vocab_slack)?;
    vocab.save_json(&root.join("vocab.json"))?;
    let vocab_hash = vocab.hash();

    let tapes = build_tapes(&train_scenarios, &vocab);
    let policy = Policy::new(vocab.len());
    let wm = WorldModel::new(vocab.len());
    let (joint, il_curve) = pretrain(&policy, &wm, &tapes, &vocab, &cfg.il)?;
    let wm_store = split_store(&joint, "wm.");
    let pi_il_store = split_store(&joint, "pi.");
    save_checkpoint_with_meta(&wm_store, &root.join("models/wm.ckpt"), vocab_hash)?;
    save_checkpoint_with_meta(&pi_il_store, &root.join("models/pi_il.ckpt"), vocab_hash)?;

    let critic_out = train_critic(
        &policy,
        &joint,
        &tapes,
        &vocab,
        cfg.critic_k,
        &cfg.critic_thresholds,
        cfg.critic_epochs,
        cfg.seed,
    )?;
    save_checkpoint_with_meta(&critic_out.store, &root.join("models/qc.ckpt"), vocab_hash)?;
    write_calibration_csv(
        &root.join("models/critic_calibration.csv"),
        &critic_out.calibrations,
    )?;
    let tau = calibrated_tau(&critic_out.calibrations);

    let critic = Critic::new();
    let mut rl_cfg = cfg.rl.clone();
    rl_cfg.threshold = tau;
    // fresh optimizer state: stale pretrain momentum must not leak into RL
    // (it would silently nudge the frozen world-model tensors)
    let mut run_store = merge_stores(&[&wm_store, &pi_il_store]);
    let hard = select_hard_tapes(
        &policy,
        &run_store,
        build_tapes(&train_scenarios, &vocab),
        &vocab,
        &rl_cfg,
    )?;
    let rl_rows = train_rl(
        &policy,
        &critic,
        &mut run_store,
        &critic_out.store,
        &hard,
        &vocab,
        &rl_cfg,
    )?;
    let pi_rl_store = split_store(&run_store, "pi.");
    save_checkpoint_with_meta(&pi_rl_store, &root.join("models/pi_rl.ckpt"), vocab_hash)?;

    Ok(PipelineArtifacts {
        root: root.to_path_buf(),
        train_scenarios,
        eval_scenarios,
        vocab,
        policy,
        critic,
        wm_store,
        pi_il_store,
        pi_rl_store,
        critic_store: critic_out.store,
        calibrations: critic_out.calibrations,
        calibrated_tau: tau,
        il_curve,
        rl_rows,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
