//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (run with `--nocapture` to see them all).
//!
//! The full default pipeline (200-scenario conflict suites, imitation
//! pretraining, critic, RL) builds once and is shared; the property
//! criteria run on independent randomized instances with frozen seeds.

use std::sync::OnceLock;
use std::time::Instant;

use tokenplan_core::correction::{CorrectionConfig, CorrectionMode, Sampling};
use tokenplan_core::critic::{Critic, CriticSample, CriticScorer};
use tokenplan_core::eval::{
    ablate, csv_without_wall_clock, evaluate, rows_to_csv, EvalModels, EvalOutput,
};
use tokenplan_core::nn::fdcheck::{check_param_grads_sampled, rel_err, FD_EPS, FD_REL_TOL};
use tokenplan_core::nn::{
    attention_backward, attention_forward, cross_entropy, kl_categorical, linear_backward,
    linear_forward, mean_pool, mean_pool_backward, softmax, Grads, Mlp, ParamStore, Tensor,
};
use tokenplan_core::pipeline::{run_all, PipelineArtifacts, PipelineConfig};
use tokenplan_core::policy::{CorrectionTrace, Policy};
use tokenplan_core::render::render_string;
use tokenplan_core::rngutil::stream_rng;
use tokenplan_core::scene::{
    boxes_overlap, from_frame, polyline_arc_length, polyline_pose_at, progression, AgentState,
    LanePolyline, OrientedBox, Pose2D, RoadMap, Route, Scenario, Trajectory,
};
use tokenplan_core::sim::{
    recompute_flags, rollout, rollout_with_contexts, AgentMode, BudgetMode, ExpertReplay,
    PolicySource, RolloutInputs, SimConfig, ZeroRisk,
};
use tokenplan_core::suite::{generate_suite, load_suite, SuiteSpec};
use tokenplan_core::tokenizer::{
    avg_corner_distance, build_vocabulary, encode, extract_segments, MotionSegment,
    TokenVocabulary, CANONICAL_BOX, SUBSTEPS, SUBSTEP_DT,
};
use tokenplan_core::train::{
    build_tapes, compute_reward, merge_stores, reinforce_grads, reinforce_update, CollectedRollout,
    IlConfig, RlConfig,
};
use tokenplan_core::world::WorldModel;

use rand::Rng;

// ---------------------------------------------------------------------------
// Shared artifacts
// ---------------------------------------------------------------------------

struct Shared {
    arts: PipelineArtifacts,
    run_store: ParamStore,
    ablation: Vec<EvalOutput>,
    eval_wall_s: f64,
    _dir: tempfile::TempDir,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = PipelineConfig::default();
        let arts = run_all(dir.path(), &cfg).expect("pipeline");
        let run_store = merge_stores(&[&arts.wm_store, &arts.pi_rl_store]);
        let models = EvalModels {
            policy: &arts.policy,
            critic: &arts.critic,
            run_store: &run_store,
            critic_store: &arts.critic_store,
            vocab: &arts.vocab,
        };
        let eval_started = Instant::now();
        let ablation = ablate(
            &arts.eval_scenarios,
            &models,
            &CorrectionConfig::default(),
            &[0.0, 0.70, 0.75, 0.80],
            &[1, 2, 5],
            AgentMode::Idm,
            0,
        )
        .expect("ablation");
        let eval_wall_s = eval_started.elapsed().as_secs_f64();
        Shared {
            arts,
            run_store,
            ablation,
            eval_wall_s,
            _dir: dir,
        }
    })
}

fn grid_row(s: &Shared, tau: f64, c: usize) -> &EvalOutput {
    s.ablation
        .iter()
        .find(|o| {
            o.row.mode == "full_trace" && (o.row.tau - tau).abs() < 1e-9 && o.row.max_len == c
        })
        .expect("grid row")
}

fn mode_row<'a>(s: &'a Shared, mode: &str) -> &'a EvalOutput {
    s.ablation
        .iter()
        .find(|o| o.row.mode == mode)
        .expect("baseline row")
}

// ---------------------------------------------------------------------------
// Criterion 1: self-correction efficacy and budgets
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_self_correction_efficacy() {
    let s = shared();
    let tau = s.arts.calibrated_tau;
    let off = &mode_row(s, "off").row;
    let ft = &grid_row(s, tau, 5).row;

    assert!(
        off.collision_rate_pct > 0.0,
        "Off mode never collides; the suite carries no conflict pressure"
    );
    let relative = (off.collision_rate_pct - ft.collision_rate_pct) / off.collision_rate_pct;
    assert!(
        relative >= 0.20,
        "relative collision reduction {:.1}% (off {:.2}% -> corrected {:.2}%)",
        100.0 * relative,
        off.collision_rate_pct,
        ft.collision_rate_pct
    );
    let drop = off.progression_pct - ft.progression_pct;
    assert!(
        drop <= 5.0,
        "progression dropped {drop:.2} points, budget is 5"
    );
    assert!(
        s.arts.wall_clock_s <= 3600.0,
        "pipeline took {:.0} s, budget 3600",
        s.arts.wall_clock_s
    );
    assert!(
        s.eval_wall_s <= 600.0,
        "evaluation took {:.0} s, budget 600",
        s.eval_wall_s
    );
    println!(
        "[criterion 01] PASS self-correction efficacy: off {:.2}% -> full_trace(tau={tau}, C=5) {:.2}% ({:.0}% relative), progression drop {:.2} pts; pipeline {:.0} s, ablation eval {:.0} s",
        off.collision_rate_pct,
        ft.collision_rate_pct,
        100.0 * relative,
        drop,
        s.arts.wall_clock_s,
        s.eval_wall_s
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: correction-length monotonicity
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_correction_length_monotonicity() {
    let s = shared();
    let mut summary = String::new();
    for &tau in &[0.0, 0.70, 0.75, 0.80] {
        let mut prev: Option<f64> = None;
        for &c in &[1usize, 2, 5] {
            let rate = grid_row(s, tau, c).row.collision_rate_pct;
            if let Some(p) = prev {
                assert!(
                    rate <= p + 0.5,
                    "collision rate increased beyond tolerance at tau {tau}, C {c}: {p:.2}% -> {rate:.2}%"
                );
            }
            prev = Some(rate);
            summary.push_str(&format!("tau {tau} C {c}: {rate:.2}%  "));
        }
    }
    println!("[criterion 02] PASS correction-length monotonicity: {summary}");
}

// ---------------------------------------------------------------------------
// Criterion 3: threshold trade-off
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_threshold_tradeoff() {
    let s = shared();
    let cal = &s.arts.calibrations;
    for w in cal.windows(2) {
        assert!(
            w[1].recall <= w[0].recall + 1e-12,
            "recall increased with tau: {} -> {}",
            w[0].recall,
            w[1].recall
        );
        assert!(
            w[1].flagged_rate <= w[0].flagged_rate + 1e-12,
            "flagged rate increased with tau"
        );
    }
    let tau = s.arts.calibrated_tau;
    let zero = grid_row(s, 0.0, 5).row.progression_pct;
    let calibrated = grid_row(s, tau, 5).row.progression_pct;
    assert!(
        zero < calibrated,
        "tau=0 progression {zero:.2}% not strictly below calibrated {calibrated:.2}%"
    );
    println!(
        "[criterion 03] PASS threshold trade-off: recall {:?} flagged {:?} over taus {:?}; tau=0 progression {zero:.2}% < calibrated({tau}) {calibrated:.2}%",
        cal.iter().map(|c| (c.recall * 100.0).round() / 100.0).collect::<Vec<_>>(),
        cal.iter().map(|c| (c.flagged_rate * 100.0).round() / 100.0).collect::<Vec<_>>(),
        cal.iter().map(|c| c.threshold).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: strategy ordering and trace-conditioning separation
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_strategy_ordering() {
    let s = shared();
    let tau = s.arts.calibrated_tau;
    let ft = grid_row(s, tau, 5).row.collision_rate_pct;
    let rs = mode_row(s, "rejection_sampling").row.collision_rate_pct;
    let lt = mode_row(s, "last_token").row.collision_rate_pct;
    assert!(
        ft <= rs,
        "full trace ({ft:.2}%) worse than rejection sampling ({rs:.2}%)"
    );
    assert!(
        ft <= lt,
        "full trace ({ft:.2}%) worse than last-token-only ({lt:.2}%)"
    );

    // post-rejection contexts: force corrections with tau = 0
    let source = PolicySource {
        policy: &s.arts.policy,
        store: &s.run_store,
    };
    let scorer = CriticScorer {
        critic: &s.arts.critic,
        store: &s.arts.critic_store,
    };
    let wm = WorldModel::new(s.arts.vocab.len());
    let sim_cfg = SimConfig {
        agent_mode: AgentMode::Idm,
        ..SimConfig::default()
    };
    let corr = CorrectionConfig {
        mode: CorrectionMode::FullTrace,
        threshold: 0.0,
        max_corrections: 2,
        ..CorrectionConfig::default()
    };
    let mut tv_sum = 0.0;
    let mut n = 0usize;
    'outer: for (i, sc) in s.arts.eval_scenarios.iter().enumerate() {
        let inputs = RolloutInputs {
            proposals: &source,
            scorer: &scorer,
            world: Some((&wm, &s.run_store)),
            vocab: &s.arts.vocab,
        };
        let (record, contexts) = rollout_with_contexts(
            sc,
            &sim_cfg,
            &corr,
            BudgetMode::Fixed,
            &inputs,
            9000 + i as u64,
        )
        .unwrap();
        for (t, ctx) in contexts.iter().enumerate() {
            if record.steps[t].corrections() == 0 {
                continue;
            }
            let empty_ctx = ctx.with_trace(CorrectionTrace::empty());
            // rejection sampling re-proposes from the same unchanged
            // distribution: recomputation is bit-identical
            let d1 = s.arts.policy.propose(&s.run_store, &empty_ctx).unwrap();
            let d2 = s.arts.policy.propose(&s.run_store, &empty_ctx).unwrap();
            assert_eq!(d1, d2, "base distribution not reproducible bitwise");
            // the full-trace second round conditions on the rejection
            let first_rejected = record.steps[t].proposals[0].token;
            let traced_ctx = ctx.with_trace(CorrectionTrace {
                rejected: vec![first_rejected],
            });
            let dt = s.arts.policy.propose(&s.run_store, &traced_ctx).unwrap();
            tv_sum += 0.5 * d1.iter().zip(&dt).map(|(a, b)| (a - b).abs()).sum::<f64>();
            n += 1;
            if n >= 400 {
                break 'outer;
            }
        }
    }
    assert!(n >= 100, "only {n} post-rejection contexts gathered");
    let mean_tv = tv_sum / n as f64;
    assert!(
        mean_tv > 1e-3,
        "trace conditioning does not move the distribution: mean TV {mean_tv:.2e}"
    );
    println!(
        "[criterion 04] PASS strategy ordering: full_trace {ft:.2}% <= rejection_sampling {rs:.2}% and <= last_token {lt:.2}%; mean TV over {n} post-rejection contexts {mean_tv:.4}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: gradient correctness for every layer and loss
// ---------------------------------------------------------------------------

/// Tiny deterministic driving world used by the gradient and mechanics
/// criteria (independent of the full pipeline).
struct MiniWorld {
    scenario: Scenario,
    vocab: TokenVocabulary,
    policy: Policy,
    store: ParamStore,
}

fn mini_world(seed: u64) -> MiniWorld {
    let dir = tempfile::tempdir().unwrap();
    let spec = SuiteSpec {
        unprotected_left: 0,
        lane_change: 0,
        lead_brake: 1,
        crossing: 1,
        merge: 0,
        seed,
        ..SuiteSpec::default()
    };
    generate_suite(&spec, dir.path()).unwrap();
    let scenarios = load_suite(dir.path()).unwrap();
    let mut segments: Vec<MotionSegment> = Vec::new();
    for sc in &scenarios {
        segments.extend(extract_segments(&sc.expert));
        for log in &sc.agent_logs {
            segments.extend(extract_segments(log));
        }
    }
    let vocab = build_vocabulary(&segments, 0.5, 24).unwrap();
    let policy = Policy::new(vocab.len());
    let wm = WorldModel::new(vocab.len());
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, "mini-init", 0);
    wm.init(&mut store, &mut rng);
    policy.init(&mut store, &mut rng);
    // roughen every tensor so gradients are generic (zero heads stay zero
    // only for the trivial-output tests, not here)
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        for v in &mut store.get_mut(&name).data {
            *v += rng.random_range(-0.15..0.15);
        }
    }
    MiniWorld {
        scenario: scenarios[0].clone(),
        vocab,
        policy,
        store,
    }
}

fn mini_rollout(mw: &MiniWorld, seed: u64, horizon: usize) -> CollectedRollout {
    let source = PolicySource {
        policy: &mw.policy,
        store: &mw.store,
    };
    let wm = WorldModel::new(mw.vocab.len());
    let inputs = RolloutInputs {
        proposals: &source,
        scorer: &ZeroRisk,
        world: Some((&wm, &mw.store)),
        vocab: &mw.vocab,
    };
    let sim_cfg = SimConfig {
        agent_mode: AgentMode::WorldModel,
        horizon_tokens: horizon,
        ..SimConfig::default()
    };
    let corr = CorrectionConfig {
        mode: CorrectionMode::FullTrace,
        threshold: 0.0, // force rejections so traces are non-trivial
        max_corrections: 2,
        sampling: Sampling::Temperature(1.0),
        ..CorrectionConfig::default()
    };
    let (record, contexts) = rollout_with_contexts(
        &mw.scenario,
        &sim_cfg,
        &corr,
        BudgetMode::Fixed,
        &inputs,
        seed,
    )
    .unwrap();
    let reward = compute_reward(&record);
    CollectedRollout {
        record,
        contexts,
        reward,
        normalized_reward: 0.8,
    }
}

/// The exact scalar the REINFORCE gradient implements.
fn reinforce_loss(
    policy: &Policy,
    store: &ParamStore,
    il_store: &ParamStore,
    batch: &[CollectedRollout],
    cfg: &RlConfig,
) -> f64 {
    let mut total = 0.0;
    for rollout in batch {
        for (t, ctx) in rollout.contexts.iter().enumerate() {
            let executed = rollout.record.steps[t].executed;
            let dist = softmax(&policy.forward(store, ctx).unwrap().0);
            let coeff = cfg.gamma.powi(t as i32) * rollout.normalized_reward;
            total += -coeff * dist[executed].max(1e-300).ln();
            if cfg.kl_weight > 0.0 {
                let il = softmax(&policy.forward(il_store, ctx).unwrap().0);
                total += cfg.kl_weight * kl_categorical(&il, &dist);
            }
        }
    }
    total / batch.len().max(1) as f64
}

#[test]
fn criterion_05_gradient_correctness() {
    let started = Instant::now();
    let mut rng = stream_rng(55, "grad-suite", 0);

    // layer kinds: linear, relu (inside Mlp), softmax, meanpool+attention
    let mut store = ParamStore::new();
    let mlp = Mlp::new("g", &[6, 9, 5], false);
    mlp.init(&mut store, &mut rng, false);
    let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (z, cache) = mlp.forward(&store, &x).unwrap();
    let (_, glog, _) = cross_entropy(&softmax(&z), 3);
    let mut grads = Grads::new();
    mlp.backward(&store, &cache, &glog, &mut grads);
    let x2 = x.clone();
    check_param_grads_sampled(
        &mut store,
        &grads,
        move |s| {
            let (z, _) = mlp.forward(s, &x2).unwrap();
            cross_entropy(&softmax(&z), 3).0
        },
        usize::MAX,
    );

    // attention block
    let d = 4;
    let mut astore = ParamStore::new();
    for name in ["wq", "wk", "wv"] {
        let data: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        astore.insert(name, Tensor::from_vec(&[d, d], data));
    }
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let gys: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (_, acache) =
        attention_forward(astore.get("wq"), astore.get("wk"), astore.get("wv"), &xs).unwrap();
    let mut agrads = Grads::new();
    attention_backward(
        astore.get("wq"),
        astore.get("wk"),
        astore.get("wv"),
        ["wq", "wk", "wv"],
        &acache,
        &gys,
        &mut agrads,
    );
    let (xs2, gys2) = (xs.clone(), gys.clone());
    check_param_grads_sampled(
        &mut astore,
        &agrads,
        move |s| {
            let (ys, _) = attention_forward(s.get("wq"), s.get("wk"), s.get("wv"), &xs2).unwrap();
            ys.iter()
                .zip(&gys2)
                .map(|(y, g)| y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        },
        usize::MAX,
    );

    // linear + meanpool primitive backward sanity on a scalar functional
    let w = Tensor::from_vec(
        &[2, 3],
        (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let xin = [0.3, -0.7, 0.2];
    let y = linear_forward(&w, &Tensor::zeros(&[2]), &xin).unwrap();
    let pooled = mean_pool(&[y.clone(), y.clone()]);
    let gpool = [1.0, -2.0];
    let gy = mean_pool_backward(2, &gpool);
    let mut lg = Grads::new();
    let _ = linear_backward(&w, "w", "b", &xin, &gy, &mut lg);
    assert!(lg.get("w").is_some());
    let _ = pooled;

    // losses on the driving models: world, imitation, correction, critic
    let mw = mini_world(55);
    let wm = WorldModel::new(mw.vocab.len());
    let tapes = build_tapes(std::slice::from_ref(&mw.scenario), &mw.vocab);
    let wbatch = tokenplan_core::train::world_dataset(&tapes, mw.vocab.len());
    let wbatch: Vec<_> = wbatch.into_iter().take(2).collect();
    let mut wstore = mw.store.clone();
    let (_, wgrads) = wm.loss_and_grads(&wstore, &wbatch).unwrap();
    let wb2 = wbatch.clone();
    let wm2 = WorldModel::new(mw.vocab.len());
    check_param_grads_sampled(
        &mut wstore,
        &wgrads,
        move |s| wm2.loss_and_grads(s, &wb2).unwrap().0,
        10,
    );

    // policy nll with empty and non-empty traces (imitation and correction)
    let batch = {
        let roll = mini_rollout(&mw, 1, 4);
        let mut b = Vec::new();
        for (t, ctx) in roll.contexts.iter().enumerate().take(2) {
            b.push((ctx.clone(), roll.record.steps[t].executed));
        }
        b.push((
            roll.contexts[0].with_trace(CorrectionTrace {
                rejected: vec![1, 3],
            }),
            2usize,
        ));
        b
    };
    let mut pstore = mw.store.clone();
    let (_, pgrads) = mw.policy.nll_loss_and_grads(&pstore, &batch).unwrap();
    let pb2 = batch.clone();
    let pol2 = Policy::new(mw.vocab.len());
    check_param_grads_sampled(
        &mut pstore,
        &pgrads,
        move |s| pol2.nll_loss_and_grads(s, &pb2).unwrap().0,
        10,
    );

    // critic loss
    let critic = Critic::new();
    let mut cstore = ParamStore::new();
    critic.init(&mut cstore, &mut rng);
    let names: Vec<String> = cstore.names().cloned().collect();
    for name in names {
        for v in &mut cstore.get_mut(&name).data {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let cbatch = vec![
        CriticSample {
            features: (0..tokenplan_core::critic::FEATURES)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: 1.0,
        },
        CriticSample {
            features: (0..tokenplan_core::critic::FEATURES)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            label: 0.0,
        },
    ];
    let (_, cgrads) = critic.loss_and_grads(&cstore, &cbatch).unwrap();
    let cb2 = cbatch.clone();
    let critic2 = Critic::new();
    check_param_grads_sampled(
        &mut cstore,
        &cgrads,
        move |s| critic2.loss_and_grads(s, &cb2).unwrap().0,
        12,
    );

    // REINFORCE surrogate with KL term, discount active
    let roll = mini_rollout(&mw, 2, 4);
    let il_store = mw.store.clone();
    let rl_cfg = RlConfig {
        kl_weight: 0.1,
        gamma: 0.9,
        ..RlConfig::default()
    };
    let batch = vec![roll];
    let mut rstore = mw.store.clone();
    let (rgrads, _) = reinforce_grads(&mw.policy, &rstore, &il_store, &batch, &rl_cfg).unwrap();
    let pol3 = Policy::new(mw.vocab.len());
    check_param_grads_sampled(
        &mut rstore,
        &rgrads,
        move |s| reinforce_loss(&pol3, s, &il_store, &batch, &rl_cfg),
        8,
    );

    // plain KL gradient via softmax route
    let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q: Vec<f64> = softmax(
        &(0..6)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>(),
    );
    let p = softmax(&logits);
    let analytic: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| pi - qi).collect();
    for i in 0..logits.len() {
        let mut lp = logits.clone();
        lp[i] += FD_EPS;
        let up = kl_categorical(&q, &softmax(&lp));
        lp[i] = logits[i] - FD_EPS;
        let down = kl_categorical(&q, &softmax(&lp));
        let numeric = (up - down) / (2.0 * FD_EPS);
        assert!(
            rel_err(analytic[i], numeric) < FD_REL_TOL,
            "KL logit grad mismatch at {i}"
        );
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed <= 120.0,
        "gradient suite took {elapsed:.0} s, budget 120"
    );
    println!(
        "[criterion 05] PASS gradient correctness: every layer and loss matches central finite differences (rel tol 1e-3); suite {elapsed:.1} s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: tokenizer guarantees
// ---------------------------------------------------------------------------

fn random_segment(rng: &mut impl Rng) -> MotionSegment {
    let mut pose = Pose2D::origin();
    let speed: f64 = rng.random_range(0.0..12.0);
    let curve: f64 = rng.random_range(-0.3..0.3);
    let rel_poses = (0..SUBSTEPS)
        .map(|_| {
            let heading = pose.heading + curve * SUBSTEP_DT;
            pose = Pose2D::new(
                pose.x + speed * SUBSTEP_DT * heading.cos(),
                pose.y + speed * SUBSTEP_DT * heading.sin(),
                heading,
            );
            pose
        })
        .collect();
    MotionSegment { rel_poses }
}

/// Independent distance: literal per-corner expansion through from_frame.
fn acd_oracle(a: &MotionSegment, b: &MotionSegment) -> f64 {
    let [l, w] = CANONICAL_BOX;
    let corners = [
        [l / 2.0, w / 2.0],
        [l / 2.0, -w / 2.0],
        [-l / 2.0, -w / 2.0],
        [-l / 2.0, w / 2.0],
    ];
    let mut sum = 0.0;
    let mut count = 0;
    for k in 0..SUBSTEPS {
        for c in corners {
            let pa = from_frame(Pose2D::new(c[0], c[1], 0.0), a.rel_poses[k]);
            let pb = from_frame(Pose2D::new(c[0], c[1], 0.0), b.rel_poses[k]);
            sum += ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn criterion_06_tokenizer_guarantees() {
    let s = shared();
    let vocab = &s.arts.vocab;

    // pairwise separation
    for i in 0..vocab.len() {
        for j in (i + 1)..vocab.len() {
            let d = avg_corner_distance(
                &vocab.tokens[i].template,
                &vocab.tokens[j].template,
                vocab.canonical_box,
            );
            assert!(
                d > vocab.radius,
                "tokens {i},{j} separated by {d} <= radius {}",
                vocab.radius
            );
        }
    }

    // cover property over the vocabulary's own build inputs
    let mut covered = 0usize;
    for sc in &s.arts.train_scenarios {
        let mut all = extract_segments(&sc.expert);
        for log in &sc.agent_logs {
            all.extend(extract_segments(log));
        }
        for seg in &all {
            let nearest = vocab
                .tokens
                .iter()
                .map(|t| avg_corner_distance(seg, &t.template, vocab.canonical_box))
                .fold(f64::INFINITY, f64::min);
            assert!(
                nearest <= vocab.radius + 1e-12,
                "training segment at distance {nearest} > radius {}",
                vocab.radius
            );
            covered += 1;
        }
    }

    // encode equals a brute-force first-minimum scan on 10 000 segments
    let mut rng = stream_rng(66, "tok-scan", 0);
    for _ in 0..10_000 {
        let seg = random_segment(&mut rng);
        let got = encode(&seg, vocab);
        let mut want = 0usize;
        let mut best = f64::INFINITY;
        for (i, t) in vocab.tokens.iter().enumerate() {
            let d = acd_oracle(&seg, &t.template);
            if d < best {
                best = d;
                want = i;
            }
        }
        assert_eq!(got, want, "encode disagrees with brute-force argmin");
    }
    println!(
        "[criterion 06] PASS tokenizer guarantees: {} tokens separated by > {:.4} m, {} training segments covered, encode == brute-force argmin on 10000 random segments",
        vocab.len(),
        vocab.radius,
        covered
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: geometry oracle equivalence
// ---------------------------------------------------------------------------

fn overlap_grid_oracle(a: &OrientedBox, b: &OrientedBox) -> bool {
    let grid_hits = |outer: &OrientedBox, inner: &OrientedBox| {
        let n = 200;
        for i in 0..n {
            for j in 0..n {
                let u = (i as f64 / (n - 1) as f64 - 0.5) * inner.length;
                let v = (j as f64 / (n - 1) as f64 - 0.5) * inner.width;
                let p = from_frame(Pose2D::new(u, v, 0.0), inner.center);
                if outer.contains([p.x, p.y]) {
                    return true;
                }
            }
        }
        false
    };
    grid_hits(a, b) || grid_hits(b, a)
}

#[test]
fn criterion_07_geometry_oracles() {
    let mut rng = stream_rng(20260101, "sat-oracle", 0);
    let mut disagreements = 0;
    for _ in 0..1000 {
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            OrientedBox::new(
                Pose2D::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                ),
                rng.random_range(2.0..6.0),
                rng.random_range(1.0..2.0),
            )
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        if boxes_overlap(&a, &b) != overlap_grid_oracle(&a, &b) {
            disagreements += 1;
        }
    }
    assert_eq!(disagreements, 0, "SAT vs dense containment oracle");

    // progression vs 1 cm dense-projection oracle
    let path = vec![
        [0.0, 0.0],
        [8.0, 0.0],
        [14.0, 4.0],
        [20.0, 4.0],
        [26.0, -1.0],
        [30.0, 3.0],
    ];
    let expert = Trajectory::new(
        path.iter()
            .map(|p| AgentState::new(Pose2D::new(p[0], p[1], 0.0), 1.0, 4.7, 2.1))
            .collect(),
    );
    let total = polyline_arc_length(&path);
    let mut max_err: f64 = 0.0;
    let mut rng = stream_rng(20260101, "progression-oracle", 1);
    for _ in 0..200 {
        let p = [rng.random_range(-2.0..32.0), rng.random_range(-4.0..8.0)];
        let ego = Trajectory::new(vec![AgentState::new(
            Pose2D::new(p[0], p[1], 0.0),
            0.0,
            4.7,
            2.1,
        )]);
        let got = progression(&ego, &expert).unwrap();
        // dense resampling at 1 cm
        let n = (total / 0.01).ceil() as usize;
        let mut best = (0.0f64, f64::INFINITY);
        for i in 0..=n {
            let arc = total * i as f64 / n as f64;
            let q = polyline_pose_at(&path, arc);
            let d = ((q.x - p[0]).powi(2) + (q.y - p[1]).powi(2)).sqrt();
            if d < best.1 {
                best = (arc, d);
            }
        }
        let want = (best.0 / total).clamp(0.0, 1.0);
        max_err = max_err.max((got - want).abs());
    }
    assert!(max_err < 1e-3, "projection error {max_err}");
    println!(
        "[criterion 07] PASS geometry oracles: 1000/1000 SAT agreements, progression max |err| {max_err:.2e} vs 1 cm resampling"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: training mechanics
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_training_mechanics() {
    let mw = mini_world(88);
    let il_store = mw.store.clone();

    // (a) executed-token-only credit: explicitly backpropagating the trace
    // proposals' log-prob gradients with zero coefficient changes nothing;
    // with a nonzero coefficient it must change something.
    let roll = mini_rollout(&mw, 3, 4);
    assert!(
        roll.record.steps.iter().any(|s| s.corrections() > 0),
        "mini rollout produced no corrections to test credit assignment"
    );
    let cfg = RlConfig {
        kl_weight: 0.0,
        ..RlConfig::default()
    };
    let batch = vec![roll];
    let (normal, _) = reinforce_grads(&mw.policy, &mw.store, &il_store, &batch, &cfg).unwrap();

    let trace_credit_grads = |coeff: f64| -> Grads {
        let (mut grads, _) =
            reinforce_grads(&mw.policy, &mw.store, &il_store, &batch, &cfg).unwrap();
        let roll = &batch[0];
        for (t, step) in roll.record.steps.iter().enumerate() {
            // each rejected proposal, conditioned on its prefix
            for (i, proposal) in step.proposals[..step.proposals.len() - 1]
                .iter()
                .enumerate()
            {
                let prefix = CorrectionTrace {
                    rejected: step.proposals[..i].iter().map(|p| p.token).collect(),
                };
                let ctx = roll.contexts[t].with_trace(prefix);
                let (logits, cache) = mw.policy.forward(&mw.store, &ctx).unwrap();
                let dist = softmax(&logits);
                let mut glog: Vec<f64> = dist.iter().map(|p| coeff * p).collect();
                glog[proposal.token] -= coeff;
                mw.policy.backward(&mw.store, &cache, &glog, &mut grads);
            }
        }
        grads
    };
    let zeroed = trace_credit_grads(0.0);
    for (name, t) in normal.iter() {
        let z = zeroed.get(name).expect("same tensor set");
        assert_eq!(t.data, z.data, "zero-credit trace terms changed {name}");
    }
    let loaded = trace_credit_grads(1.0);
    let mut any_diff = false;
    for (name, t) in normal.iter() {
        if loaded.get(name).map(|l| l.data != t.data).unwrap_or(true) {
            any_diff = true;
        }
    }
    assert!(any_diff, "trace credit test has no teeth");

    // (b) positive reward, lambda 0: every executed log-prob strictly
    // increases (short rollout; with many steps sharing parameters, a
    // summed-gradient step can trade one step off against another)
    let short = vec![mini_rollout(&mw, 3, 3)];
    let mut store_up = mw.store.clone();
    let before: Vec<f64> = short[0]
        .contexts
        .iter()
        .enumerate()
        .map(|(t, ctx)| {
            let d = softmax(&mw.policy.forward(&store_up, ctx).unwrap().0);
            d[short[0].record.steps[t].executed].ln()
        })
        .collect();
    reinforce_update(&mw.policy, &mut store_up, &il_store, &short, &cfg, 1e-4).unwrap();
    let after: Vec<f64> = short[0]
        .contexts
        .iter()
        .enumerate()
        .map(|(t, ctx)| {
            let d = softmax(&mw.policy.forward(&store_up, ctx).unwrap().0);
            d[short[0].record.steps[t].executed].ln()
        })
        .collect();
    for (t, (b, a)) in before.iter().zip(&after).enumerate() {
        assert!(
            a > b,
            "executed log-prob did not increase at step {t}: {b} -> {a}"
        );
    }

    // (c) lambda 100 hugs the IL policy at least as tightly as lambda 0.1
    let mean_kl_after = |lambda: f64| -> f64 {
        let cfg = RlConfig {
            kl_weight: lambda,
            ..RlConfig::default()
        };
        let mut store = mw.store.clone();
        reinforce_update(&mw.policy, &mut store, &il_store, &batch, &cfg, 1e-3).unwrap();
        let mut kl = 0.0;
        let mut n = 0;
        for (t, ctx) in batch[0].contexts.iter().enumerate() {
            let _ = t;
            let p = softmax(&mw.policy.forward(&store, ctx).unwrap().0);
            let q = softmax(&mw.policy.forward(&il_store, ctx).unwrap().0);
            kl += kl_categorical(&q, &p);
            n += 1;
        }
        kl / n as f64
    };
    let kl_small = mean_kl_after(0.1);
    let kl_large = mean_kl_after(100.0);
    assert!(
        kl_large <= kl_small + 1e-12,
        "lambda 100 drifted farther from IL than lambda 0.1: {kl_large} vs {kl_small}"
    );

    // (d) zero-reward batch with lambda 0 leaves parameters untouched
    let mut zero_batch = vec![mini_rollout(&mw, 4, 4)];
    zero_batch[0].normalized_reward = 0.0;
    let mut store_frozen = mw.store.clone();
    let hash_before = store_frozen.hash();
    reinforce_update(
        &mw.policy,
        &mut store_frozen,
        &il_store,
        &zero_batch,
        &cfg,
        1e-3,
    )
    .unwrap();
    assert_eq!(
        store_frozen.hash(),
        hash_before,
        "zero gradient moved parameters"
    );

    // (e) reward formula exact on every stored evaluation rollout,
    //     and the world model hash survived RL
    let s = shared();
    let mut checked = 0;
    for out in &s.ablation {
        for r in &out.records {
            let rb = compute_reward(r);
            let expected = if r.metrics.collided {
                -1.0
            } else {
                r.metrics.progression
            };
            assert_eq!(rb.reward, expected);
            checked += 1;
        }
    }
    let wm_on_disk = ParamStore::load(&s.arts.wm_path()).unwrap();
    assert_eq!(wm_on_disk.hash(), s.arts.wm_store.hash());

    println!(
        "[criterion 08] PASS training mechanics: executed-token-only credit (bitwise), positive-reward log-probs up at every step, KL(lambda=100) {kl_large:.2e} <= KL(lambda=0.1) {kl_small:.2e}, reward formula exact on {checked} rollouts, frozen world model hash intact"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: bit-level determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_determinism() {
    let small = PipelineConfig {
        train_suite: SuiteSpec {
            unprotected_left: 4,
            lane_change: 3,
            lead_brake: 3,
            crossing: 4,
            merge: 2,
            seed: 21,
            ..SuiteSpec::default()
        },
        eval_suite: SuiteSpec {
            unprotected_left: 4,
            lane_change: 3,
            lead_brake: 3,
            crossing: 4,
            merge: 2,
            seed: 22,
            ..SuiteSpec::default()
        },
        il: IlConfig {
            epochs: 4,
            ..IlConfig::default()
        },
        rl: RlConfig {
            epochs: 1,
            rollouts_per_epoch: 20,
            ..RlConfig::default()
        },
        critic_epochs: 10,
        ..PipelineConfig::default()
    };

    let run_once = |tag: u64| -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let arts = run_all(dir.path(), &small).unwrap();
        let run_store = merge_stores(&[&arts.wm_store, &arts.pi_rl_store]);
        let models = EvalModels {
            policy: &arts.policy,
            critic: &arts.critic,
            run_store: &run_store,
            critic_store: &arts.critic_store,
            vocab: &arts.vocab,
        };
        let out = evaluate(
            &arts.eval_scenarios,
            &models,
            &CorrectionConfig::default(),
            AgentMode::Idm,
            0,
        )
        .unwrap();
        let csv = csv_without_wall_clock(&rows_to_csv(std::slice::from_ref(&out.row)));
        let svg = render_string(&out.records[0], &arts.eval_scenarios[0]);
        let _ = tag;
        (
            std::fs::read(arts.wm_path()).unwrap(),
            std::fs::read(arts.pi_il_path()).unwrap(),
            std::fs::read(arts.pi_rl_path()).unwrap(),
            std::fs::read(arts.critic_path()).unwrap(),
            csv,
            svg,
        )
    };

    let a = run_once(1);
    let b = run_once(2);
    assert_eq!(a.0, b.0, "world checkpoint differs between runs");
    assert_eq!(a.1, b.1, "IL policy checkpoint differs between runs");
    assert_eq!(a.2, b.2, "RL policy checkpoint differs between runs");
    assert_eq!(a.3, b.3, "critic checkpoint differs between runs");
    assert_eq!(a.4, b.4, "eval report differs between runs");
    assert_eq!(a.5, b.5, "SVG differs between runs");
    println!(
        "[criterion 09] PASS determinism: checkpoints ({} + {} + {} + {} bytes), eval report, and SVG bit-identical across two full runs",
        a.0.len(),
        a.1.len(),
        a.2.len(),
        a.3.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: simulator soundness
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_simulator_soundness() {
    // IDM lead-brake: ego replays a braking leader, IDM follower behind
    let map = RoadMap::new(
        vec![LanePolyline::new(
            "main",
            4.0,
            (0..28).map(|i| [i as f64 * 10.0 - 20.0, 0.0]).collect(),
        )],
        Default::default(),
    )
    .unwrap();
    let n = 16 * SUBSTEPS;
    let mut states = Vec::with_capacity(n + 1);
    let mut x = 25.0;
    let mut v: f64 = 10.0;
    for i in 0..=n {
        states.push(AgentState::new(Pose2D::new(x, 0.0, 0.0), v, 4.7, 2.1));
        if i >= 10 {
            v = (v - 3.0 * SUBSTEP_DT).max(0.0);
        }
        x += v * SUBSTEP_DT;
    }
    let ego_log = Trajectory::new(states);
    let follower: Vec<AgentState> = (0..=n)
        .map(|i| {
            AgentState::new(
                Pose2D::new(10.0 * SUBSTEP_DT * i as f64, 0.0, 0.0),
                10.0,
                4.7,
                2.1,
            )
        })
        .collect();
    let sc = Scenario {
        map,
        route: Route::new(vec!["main".into()]),
        ego_init: ego_log.states[0],
        agents_init: vec![follower[0]],
        expert: ego_log,
        agent_logs: vec![Trajectory::new(follower)],
        horizon_tokens: 16,
        seed: 55,
        dt: SUBSTEP_DT,
        tag: "lead-brake".into(),
    };
    let mut segments = extract_segments(&sc.expert);
    for log in &sc.agent_logs {
        segments.extend(extract_segments(log));
    }
    let vocab = build_vocabulary(&segments, 0.05, 512).unwrap();
    let tokens: Vec<usize> = extract_segments(&sc.expert)
        .iter()
        .map(|s| encode(s, &vocab))
        .collect();
    let replay = ExpertReplay {
        tokens: tokens.clone(),
        vocab_size: vocab.len(),
    };
    let inputs = RolloutInputs {
        proposals: &replay,
        scorer: &ZeroRisk,
        world: None,
        vocab: &vocab,
    };
    let idm_rec = rollout(
        &sc,
        &SimConfig {
            agent_mode: AgentMode::Idm,
            ..SimConfig::default()
        },
        &CorrectionConfig {
            mode: CorrectionMode::Off,
            ..CorrectionConfig::default()
        },
        BudgetMode::Fixed,
        &inputs,
        0,
    )
    .unwrap();
    assert!(
        !idm_rec.metrics.collided,
        "IDM follower hit the braking leader"
    );

    // LogReplay reproduces logs exactly
    let replay2 = ExpertReplay {
        tokens,
        vocab_size: vocab.len(),
    };
    let inputs2 = RolloutInputs {
        proposals: &replay2,
        scorer: &ZeroRisk,
        world: None,
        vocab: &vocab,
    };
    let log_rec = rollout(
        &sc,
        &SimConfig::default(),
        &CorrectionConfig {
            mode: CorrectionMode::Off,
            ..CorrectionConfig::default()
        },
        BudgetMode::Fixed,
        &inputs2,
        0,
    )
    .unwrap();
    let mut sub = 0;
    for step in &log_rec.steps {
        for ss in &step.substeps {
            sub += 1;
            assert_eq!(
                ss.agents[0], sc.agent_logs[0].states[sub],
                "log replay deviated at sub-step {sub}"
            );
        }
    }

    // stored flags equal offline recomputation on real evaluation records
    let s = shared();
    let mut substeps_checked = 0usize;
    for out in s.ablation.iter().take(2) {
        for (record, sc) in out.records.iter().zip(&s.arts.eval_scenarios) {
            let recomputed = recompute_flags(record, &sc.map);
            let stored: Vec<(bool, bool)> = record
                .steps
                .iter()
                .flat_map(|st| st.substeps.iter().map(|ss| (ss.collision, ss.offroad)))
                .collect();
            assert_eq!(stored, recomputed, "flags diverge for scenario {}", sc.tag);
            substeps_checked += stored.len();
        }
    }
    println!(
        "[criterion 10] PASS simulator soundness: lead-brake collision-free, log replay exact over {sub} sub-steps, stored flags equal recomputation over {substeps_checked} sub-steps"
    );
}
