//! Command-line front end for the motion-token planner testbed.
//!
//! Subcommands: `suite gen`, `vocab build`, `train il`, `train critic`,
//! `train rl`, `eval`, `ablate`, `render`. Every command accepts
//! `--config <file>` with flag overrides and `--seed`. Exit code 0 on
//! success; on failure a machine-readable JSON error goes to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tokenplan_core::correction::{CorrectionConfig, CorrectionMode, Sampling};
use tokenplan_core::critic::{write_calibration_csv, Critic};
use tokenplan_core::eval::{ablate, evaluate, write_csv, EvalModels, EvalRow};
use tokenplan_core::nn::{load_checkpoint_checked, save_checkpoint_with_meta, ParamStore};
use tokenplan_core::policy::Policy;
use tokenplan_core::render::render;
use tokenplan_core::scene::Scenario;
use tokenplan_core::sim::{AgentMode, RolloutRecord};
use tokenplan_core::suite::{generate_suite, load_suite, SuiteSpec};
use tokenplan_core::tokenizer::{extract_segments, fit_radius, MotionSegment, TokenVocabulary};
use tokenplan_core::train::{
    build_tapes, merge_stores, pretrain, select_hard_tapes, split_store, train_critic, train_rl,
    IlConfig, RlConfig,
};
use tokenplan_core::world::WorldModel;

#[derive(Parser)]
#[command(name = "tokenplan", about = "Closed-loop motion-token planner testbed")]
struct Cli {
    /// JSON config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scenario-suite operations.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
    /// Token-vocabulary operations.
    Vocab {
        #[command(subcommand)]
        cmd: VocabCmd,
    },
    /// Training stages.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Evaluate one correction configuration over a suite.
    Eval(EvalArgs),
    /// Threshold x correction-length grid plus baseline strategies.
    Ablate(AblateArgs),
    /// Render a stored rollout record over its scenario as SVG.
    Render(RenderArgs),
}

#[derive(Subcommand)]
enum SuiteCmd {
    /// Generate a conflict-scenario suite.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum VocabCmd {
    /// K-disk cluster the suite's motion segments into a vocabulary.
    Build {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target vocabulary size (radius found by bisection).
        #[arg(long, default_value_t = 128)]
        target: usize,
        #[arg(long, default_value_t = 8)]
        slack: usize,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Stage 1: joint imitation pretraining of policy and world model.
    Il {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Collision critic from post-IL rollouts.
    Critic {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stage 2: REINFORCE with KL regularization against the frozen world model.
    Rl {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        critic: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    critic: PathBuf,
    /// idm | logreplay | worldmodel | both
    #[arg(long)]
    agents: Option<String>,
    /// off | full_trace | last_token | rejection_sampling | candidate_selection
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// greedy | temperature
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Store per-scenario rollout records here as JSON.
    #[arg(long)]
    records_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    critic: PathBuf,
    #[arg(long)]
    agents: Option<String>,
    /// Comma-separated threshold grid.
    #[arg(long)]
    taus: Option<String>,
    /// Comma-separated correction-length grid.
    #[arg(long)]
    lens: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    record: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct AppConfig {
    suite: Option<SuiteSpec>,
    il: Option<IlConfig>,
    rl: Option<RlConfig>,
    critic: CriticSection,
    correction: CorrectionSection,
    eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct CriticSection {
    k: usize,
    thresholds: Vec<f64>,
    epochs: usize,
}

impl Default for CriticSection {
    fn default() -> Self {
        Self {
            k: 5,
            thresholds: vec![0.0, 0.70, 0.75, 0.80],
            epochs: 40,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct CorrectionSection {
    mode: String,
    threshold: f64,
    max_len: usize,
    candidates: usize,
    sampling: String,
    temperature: f64,
}

impl Default for CorrectionSection {
    fn default() -> Self {
        Self {
            mode: "full_trace".into(),
            threshold: 0.75,
            max_len: 5,
            candidates: 10,
            sampling: "greedy".into(),
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct EvalSection {
    agent_mode: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            agent_mode: "idm".into(),
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn parse_mode(s: &str) -> Result<CorrectionMode> {
    Ok(match s {
        "off" => CorrectionMode::Off,
        "full_trace" => CorrectionMode::FullTrace,
        "last_token" => CorrectionMode::LastTokenOnly,
        "rejection_sampling" => CorrectionMode::RejectionSampling,
        "candidate_selection" => CorrectionMode::CandidateSelection,
        other => bail!("unknown correction mode {other}"),
    })
}

fn parse_agents(s: &str) -> Result<Vec<AgentMode>> {
    Ok(match s {
        "idm" => vec![AgentMode::Idm],
        "logreplay" => vec![AgentMode::LogReplay],
        "worldmodel" => vec![AgentMode::WorldModel],
        "both" => vec![AgentMode::Idm, AgentMode::LogReplay],
        other => bail!("unknown agent mode {other}"),
    })
}

fn correction_from(section: &CorrectionSection, args: &EvalArgs) -> Result<CorrectionConfig> {
    let mode = parse_mode(args.mode.as_deref().unwrap_or(&section.mode))?;
    let sampling_name = args.sampling.as_deref().unwrap_or(&section.sampling);
    let sampling = match sampling_name {
        "greedy" => Sampling::Greedy,
        "temperature" => Sampling::Temperature(section.temperature),
        other => bail!("unknown sampling {other}"),
    };
    let cfg = CorrectionConfig {
        mode,
        threshold: args.tau.unwrap_or(section.threshold),
        max_corrections: args.max_len.unwrap_or(section.max_len),
        n_candidates: args.candidates.unwrap_or(section.candidates),
        sampling,
    };
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedModels {
    vocab: TokenVocabulary,
    policy: Policy,
    critic: Critic,
    run_store: ParamStore,
    critic_store: ParamStore,
}

fn load_models(
    vocab_path: &Path,
    world_path: &Path,
    policy_path: &Path,
    critic_path: Option<&Path>,
) -> Result<LoadedModels> {
    let vocab = TokenVocabulary::load_json(vocab_path)?;
    let hash = vocab.hash();
    let wm_store = load_checkpoint_checked(world_path, Some(hash))?;
    let pi_store = load_checkpoint_checked(policy_path, Some(hash))?;
    let critic_store = match critic_path {
        Some(p) => load_checkpoint_checked(p, Some(hash))?,
        None => {
            let critic = Critic::new();
            let mut store = ParamStore::new();
            let mut rng = tokenplan_core::rngutil::stream_rng(0, "zero-critic", 0);
            critic.init(&mut store, &mut rng);
            store
        }
    };
    let policy = Policy::new(vocab.len());
    let critic = Critic::new();
    let run_store = merge_stores(&[&wm_store, &pi_store]);
    Ok(LoadedModels {
        vocab,
        policy,
        critic,
        run_store,
        critic_store,
    })
}

fn write_records(dir: &Path, records: &[RolloutRecord], label: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, r) in records.iter().enumerate() {
        r.save_json(&dir.join(format!("{label}_{i:04}.json")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Suite {
            cmd: SuiteCmd::Gen { out },
        } => {
            let mut spec = cfg.suite.unwrap_or_default();
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let paths = generate_suite(&spec, &out)?;
            println!(
                "wrote {} scenarios to {} (seed {})",
                paths.len(),
                out.display(),
                spec.seed
            );
        }
        Cmd::Vocab {
            cmd:
                VocabCmd::Build {
                    suite,
                    out,
                    target,
                    slack,
                },
        } => {
            let scenarios = load_suite(&suite)?;
            let mut segments: Vec<MotionSegment> = Vec::new();
            for sc in &scenarios {
                segments.extend(extract_segments(&sc.expert));
                for log in &sc.agent_logs {
                    segments.extend(extract_segments(log));
                }
            }
            let vocab = fit_radius(&segments, target, slack)?;
            vocab.save_json(&out)?;
            println!(
                "vocabulary: {} tokens, radius {:.4}, hash {:016x} -> {}",
                vocab.len(),
                vocab.radius,
                vocab.hash(),
                out.display()
            );
        }
        Cmd::Train { cmd } => run_train(cmd, &cfg, cli.seed)?,
        Cmd::Eval(args) => {
            let models = load_models(&args.vocab, &args.world, &args.policy, Some(&args.critic))?;
            let scenarios = load_suite(&args.suite)?;
            let corr = correction_from(&cfg.correction, &args)?;
            let agent_modes = parse_agents(args.agents.as_deref().unwrap_or(&cfg.eval.agent_mode))?;
            let seed = cli.seed.unwrap_or(0);
            let eval_models = EvalModels {
                policy: &models.policy,
                critic: &models.critic,
                run_store: &models.run_store,
                critic_store: &models.critic_store,
                vocab: &models.vocab,
            };
            let mut rows: Vec<EvalRow> = Vec::new();
            for mode in agent_modes {
                let out = evaluate(&scenarios, &eval_models, &corr, mode, seed)?;
                if let Some(dir) = &args.records_dir {
                    write_records(dir, &out.records, &format!("{mode}"))?;
                }
                println!(
                    "{} agents: collision {:.2}% offroad {:.2}% progression {:.2}% avg_tok {:.2}",
                    mode,
                    out.row.collision_rate_pct,
                    out.row.offroad_rate_pct,
                    out.row.progression_pct,
                    out.row.avg_correction_tokens
                );
                rows.push(out.row);
            }
            write_csv(&args.out, &rows)?;
            println!("report -> {}", args.out.display());
        }
        Cmd::Ablate(args) => {
            let models = load_models(&args.vocab, &args.world, &args.policy, Some(&args.critic))?;
            let scenarios = load_suite(&args.suite)?;
            let taus: Vec<f64> = match &args.taus {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().context("parsing --taus"))
                    .collect::<Result<_>>()?,
                None => vec![0.0, 0.70, 0.75, 0.80],
            };
            let lens: Vec<usize> = match &args.lens {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse::<usize>().context("parsing --lens"))
                    .collect::<Result<_>>()?,
                None => vec![1, 2, 5],
            };
            let agent_mode =
                parse_agents(args.agents.as_deref().unwrap_or(&cfg.eval.agent_mode))?[0];
            let base = CorrectionConfig {
                threshold: cfg.correction.threshold,
                max_corrections: cfg.correction.max_len,
                n_candidates: cfg.correction.candidates,
                ..CorrectionConfig::default()
            };
            let seed = cli.seed.unwrap_or(0);
            let eval_models = EvalModels {
                policy: &models.policy,
                critic: &models.critic,
                run_store: &models.run_store,
                critic_store: &models.critic_store,
                vocab: &models.vocab,
            };
            let outs = ablate(
                &scenarios,
                &eval_models,
                &base,
                &taus,
                &lens,
                agent_mode,
                seed,
            )?;
            let rows: Vec<EvalRow> = outs.iter().map(|o| o.row.clone()).collect();
            for r in &rows {
                println!(
                    "{:<22} tau {:.2} C {}: collision {:.2}% progression {:.2}%",
                    r.mode, r.tau, r.max_len, r.collision_rate_pct, r.progression_pct
                );
            }
            write_csv(&args.out, &rows)?;
            println!("ablation -> {}", args.out.display());
        }
        Cmd::Render(args) => {
            let scenario = Scenario::load_json(&args.scenario)?;
            let record = RolloutRecord::load_json(&args.record)?;
            render(&record, &scenario, &args.out)?;
            println!("svg -> {}", args.out.display());
        }
    }
    Ok(())
}

fn run_train(cmd: TrainCmd, cfg: &AppConfig, seed: Option<u64>) -> Result<()> {
    match cmd {
        TrainCmd::Il {
            suite,
            vocab,
            out_dir,
        } => {
            let vocab = TokenVocabulary::load_json(&vocab)?;
            let scenarios = load_suite(&suite)?;
            let tapes = build_tapes(&scenarios, &vocab);
            let mut il_cfg = cfg.il.clone().unwrap_or_default();
            if let Some(s) = seed {
                il_cfg.seed = s;
            }
            let policy = Policy::new(vocab.len());
            let wm = WorldModel::new(vocab.len());
            let (joint, curve) = pretrain(&policy, &wm, &tapes, &vocab, &il_cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let hash = vocab.hash();
            save_checkpoint_with_meta(&split_store(&joint, "wm."), &out_dir.join("wm.ckpt"), hash)?;
            save_checkpoint_with_meta(
                &split_store(&joint, "pi."),
                &out_dir.join("pi_il.ckpt"),
                hash,
            )?;
            let mut csv = String::from(
                "# il-loss v1\nepoch,imitation_loss,correction_loss,world_loss,exposure_pairs\n",
            );
            for row in &curve {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{}\n",
                    row.epoch,
                    row.imitation_loss,
                    row.correction_loss,
                    row.world_loss,
                    row.exposure_pairs
                ));
            }
            std::fs::write(out_dir.join("il_loss.csv"), csv)?;
            if let Some(last) = curve.last() {
                println!(
                    "IL done: imitation {:.4} correction {:.4} world {:.4} -> {}",
                    last.imitation_loss,
                    last.correction_loss,
                    last.world_loss,
                    out_dir.display()
                );
            }
        }
        TrainCmd::Critic {
            suite,
            vocab,
            world,
            policy,
            out_dir,
        } => {
            let vocab = TokenVocabulary::load_json(&vocab)?;
            let hash = vocab.hash();
            let wm_store = load_checkpoint_checked(&world, Some(hash))?;
            let pi_store = load_checkpoint_checked(&policy, Some(hash))?;
            let run_store = merge_stores(&[&wm_store, &pi_store]);
            let scenarios = load_suite(&suite)?;
            let tapes = build_tapes(&scenarios, &vocab);
            let policy = Policy::new(vocab.len());
            let out = train_critic(
                &policy,
                &run_store,
                &tapes,
                &vocab,
                cfg.critic.k,
                &cfg.critic.thresholds,
                cfg.critic.epochs,
                seed.unwrap_or(0),
            )?;
            std::fs::create_dir_all(&out_dir)?;
            save_checkpoint_with_meta(&out.store, &out_dir.join("qc.ckpt"), hash)?;
            write_calibration_csv(&out_dir.join("critic_calibration.csv"), &out.calibrations)?;
            let mut csv = String::from("# critic-loss v1\nepoch,loss\n");
            for (i, l) in out.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            std::fs::write(out_dir.join("critic_loss.csv"), csv)?;
            for c in &out.calibrations {
                println!(
                    "tau {:.2}: precision {:.3} recall {:.3} ttc {:.2} ({} pos / {} neg)",
                    c.threshold, c.precision, c.recall, c.ttc_first_flag, c.n_pos, c.n_neg
                );
            }
            println!(
                "critic trained on {} rollouts, calibrated on {} -> {}",
                out.n_train_rollouts,
                out.n_val_rollouts,
                out_dir.display()
            );
        }
        TrainCmd::Rl {
            suite,
            vocab,
            world,
            policy,
            critic,
            out_dir,
        } => {
            let vocab = TokenVocabulary::load_json(&vocab)?;
            let hash = vocab.hash();
            let wm_store = load_checkpoint_checked(&world, Some(hash))?;
            let pi_store = load_checkpoint_checked(&policy, Some(hash))?;
            let critic_store = load_checkpoint_checked(&critic, Some(hash))?;
            let mut run_store = merge_stores(&[&wm_store, &pi_store]);
            let scenarios = load_suite(&suite)?;
            let tapes = build_tapes(&scenarios, &vocab);
            let mut rl_cfg = cfg.rl.clone().unwrap_or_default();
            if let Some(s) = seed {
                rl_cfg.seed = s;
            }
            let policy = Policy::new(vocab.len());
            let critic = Critic::new();
            let hard = select_hard_tapes(&policy, &run_store, tapes, &vocab, &rl_cfg)?;
            println!("hard-example pool: {} scenarios", hard.len());
            let rows = train_rl(
                &policy,
                &critic,
                &mut run_store,
                &critic_store,
                &hard,
                &vocab,
                &rl_cfg,
            )?;
            std::fs::create_dir_all(&out_dir)?;
            save_checkpoint_with_meta(
                &split_store(&run_store, "pi."),
                &out_dir.join("pi_rl.ckpt"),
                hash,
            )?;
            let mut csv = String::from(
                "# rl-stats v1\nepoch,mean_reward,collision_rate,mean_kl,mean_executed_logprob\n",
            );
            for r in &rows {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    r.epoch, r.mean_reward, r.collision_rate, r.mean_kl, r.mean_executed_logprob
                ));
                println!(
                    "epoch {}: reward {:.3} collisions {:.1}% kl {:.4}",
                    r.epoch,
                    r.mean_reward,
                    100.0 * r.collision_rate,
                    r.mean_kl
                );
            }
            std::fs::write(out_dir.join("rl_stats.csv"), csv)?;
            println!("RL done -> {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
