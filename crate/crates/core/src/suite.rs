//! Synthetic conflict-scenario suite.
//!
//! Five archetypes: unprotected left turn, lane change, lead brake,
//! crossing traffic, and ramp merge. Background agents run scripted IDM
//! along their lanes and ignore the ego; the expert ego is a privileged
//! planner (IDM longitudinal control plus gap acceptance against the
//! agents' precomputed future occupancy of every conflict point). Every
//! emitted scenario is verified collision-free and on-road under log
//! replay, with bounded resampling.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::{child_seed, stream_rng};
use crate::scene::{
    boxes_overlap, offroad, polyline_arc_length, polyline_pose_at, polyline_project, AgentState,
    LanePolyline, RoadMap, Route, Scenario, Trajectory,
};
use crate::sim::{idm_accel, IdmParams, IDM_NO_LEADER_GAP};
use crate::tokenizer::{SUBSTEPS, SUBSTEP_DT};

/// Archetype mix and randomization ranges for one generated suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub unprotected_left: usize,
    pub lane_change: usize,
    pub lead_brake: usize,
    pub crossing: usize,
    pub merge: usize,
    /// Background agent desired speeds, m/s.
    pub speed_range: (f64, f64),
    /// Agent arrival offset at the conflict point relative to the ego's
    /// naive arrival, seconds. Small offsets mean tight conflicts.
    pub gap_range: (f64, f64),
    pub horizon_tokens: usize,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            unprotected_left: 50,
            lane_change: 40,
            lead_brake: 40,
            crossing: 50,
            merge: 20,
            speed_range: (5.0, 9.0),
            gap_range: (-1.0, 2.5),
            horizon_tokens: 16,
            seed: 0,
        }
    }
}

impl SuiteSpec {
    pub fn total(&self) -> usize {
        self.unprotected_left + self.lane_change + self.lead_brake + self.crossing + self.merge
    }

    fn archetypes(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("unprotected_left", self.unprotected_left),
            ("lane_change", self.lane_change),
            ("lead_brake", self.lead_brake),
            ("crossing", self.crossing),
            ("merge", self.merge),
        ]
    }
}

const VEH_LEN: f64 = 4.7;
const VEH_WID: f64 = 2.1;
const LANE_W: f64 = 4.0;
/// Turn and junction lanes are wider so box corners stay on-road mid-turn.
const JUNCTION_W: f64 = 7.5;
/// Half-extent of a conflict region along a path, meters.
const CONFLICT_CLEARANCE: f64 = 6.0;
const MAX_ATTEMPTS: usize = 40;

/// A background agent's script: a path, IDM toward `v0`, optional full stop.
struct AgentScript {
    path: Vec<[f64; 2]>,
    start_s: f64,
    start_v: f64,
    v0: f64,
    /// (sub-step, decel) after which the agent brakes to a halt.
    brake: Option<(usize, f64)>,
}

/// Everything needed to simulate and emit one scenario.
struct Blueprint {
    map: RoadMap,
    route: Route,
    ego_start_s: f64,
    ego_start_v: f64,
    ego_v0: f64,
    agents: Vec<AgentScript>,
}

fn line_pts(a: [f64; 2], b: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let n = (len / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn arc_pts(center: [f64; 2], radius: f64, a0: f64, a1: f64, n: usize) -> Vec<[f64; 2]> {
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn lane(id: &str, width: f64, points: Vec<[f64; 2]>) -> LanePolyline {
    LanePolyline::new(id, width, points)
}

/// Segment-segment intersection points of two polylines, deduped to 5 m.
fn polyline_intersections(a: &[[f64; 2]], b: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    for sa in a.windows(2) {
        for sb in b.windows(2) {
            let (p, r) = (sa[0], [sa[1][0] - sa[0][0], sa[1][1] - sa[0][1]]);
            let (q, s) = (sb[0], [sb[1][0] - sb[0][0], sb[1][1] - sb[0][1]]);
            let denom = r[0] * s[1] - r[1] * s[0];
            if denom.abs() < 1e-12 {
                continue;
            }
            let qp = [q[0] - p[0], q[1] - p[1]];
            let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
            let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                let hit = [p[0] + t * r[0], p[1] + t * r[1]];
                if out
                    .iter()
                    .all(|o| (o[0] - hit[0]).hypot(o[1] - hit[1]) > 5.0)
                {
                    out.push(hit);
                }
            }
        }
    }
    out
}

/// Scripted agents simulated along their paths: IDM car-following within
/// the same path, ignoring the ego.
fn simulate_agents(scripts: &[AgentScript], n_substeps: usize) -> Vec<Trajectory> {
    let mut s: Vec<f64> = scripts.iter().map(|a| a.start_s).collect();
    let mut v: Vec<f64> = scripts.iter().map(|a| a.start_v).collect();
    let mut trajs: Vec<Vec<AgentState>> = scripts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            vec![AgentState::new(
                polyline_pose_at(&a.path, s[i]),
                v[i],
                VEH_LEN,
                VEH_WID,
            )]
        })
        .collect();
    for step in 0..n_substeps {
        let s_before = s.clone();
        let v_before = v.clone();
        for (i, script) in scripts.iter().enumerate() {
            let idm = IdmParams {
                v0: script.v0.max(0.1),
                ..IdmParams::default()
            };
            // same-path leader (scripts sharing an identical path Vec ptr
            // are rare; compare by projecting onto my path)
            let mut accel = idm_accel(v_before[i], v_before[i], IDM_NO_LEADER_GAP, &idm);
            let mut best_gap = f64::INFINITY;
            for (j, other) in scripts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let opos = polyline_pose_at(&other.path, s_before[j]);
                let (oj_s, lat) = polyline_project(&script.path, [opos.x, opos.y]);
                if lat < 2.0 && oj_s > s_before[i] {
                    let gap = oj_s - s_before[i] - VEH_LEN;
                    if gap < best_gap {
                        best_gap = gap;
                        accel = idm_accel(v_before[i], v_before[j], gap.max(0.01), &idm);
                    }
                }
            }
            if let Some((t_brake, decel)) = script.brake {
                if step >= t_brake {
                    accel = accel.min(-decel);
                }
            }
            v[i] = (v_before[i] + accel * SUBSTEP_DT).max(0.0);
            s[i] += v[i] * SUBSTEP_DT;
            trajs[i].push(AgentState::new(
                polyline_pose_at(&scripts[i].path, s[i]),
                v[i],
                VEH_LEN,
                VEH_WID,
            ));
        }
    }
    trajs.into_iter().map(Trajectory::new).collect()
}

/// Expert ego: IDM along the route plus gap acceptance at conflict points,
/// with full knowledge of the agents' future occupancy.
fn simulate_expert(bp: &Blueprint, agent_trajs: &[Trajectory], n_substeps: usize) -> Trajectory {
    let path = bp.route.centerline(&bp.map);
    let total = polyline_arc_length(&path);

    // conflict points: ego path x agent paths
    let mut conflicts: Vec<(f64, [f64; 2])> = Vec::new(); // (ego arc, world point)
    for script in &bp.agents {
        for hit in polyline_intersections(&path, &script.path) {
            let (s_c, _) = polyline_project(&path, hit);
            if conflicts.iter().all(|(s, _)| (s - s_c).abs() > 5.0) {
                conflicts.push((s_c, hit));
            }
        }
    }
    conflicts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // occupancy[c][t] = some agent is inside conflict region c at sub-step t
    let occupancy: Vec<Vec<bool>> = conflicts
        .iter()
        .map(|(_, point)| {
            (0..=n_substeps)
                .map(|t| {
                    agent_trajs.iter().any(|traj| {
                        let p = traj.states[t].pose;
                        (p.x - point[0]).hypot(p.y - point[1]) < CONFLICT_CLEARANCE + VEH_LEN / 2.0
                    })
                })
                .collect()
        })
        .collect();

    let idm = IdmParams {
        v0: bp.ego_v0,
        ..IdmParams::default()
    };
    let mut s = bp.ego_start_s;
    let mut v = bp.ego_start_v;
    let mut states = vec![AgentState::new(
        polyline_pose_at(&path, s),
        v,
        VEH_LEN,
        VEH_WID,
    )];
    for t in 0..n_substeps {
        // free-flow / car-following along the route
        let mut accel = idm_accel(v, v, IDM_NO_LEADER_GAP, &idm);
        for (j, traj) in agent_trajs.iter().enumerate() {
            let _ = j;
            let opos = traj.states[t].pose;
            let (os, lat) = polyline_project(&path, [opos.x, opos.y]);
            if lat < 2.0 && os > s {
                let gap = os - s - VEH_LEN;
                accel = accel.min(idm_accel(v, traj.states[t].speed, gap.max(0.01), &idm));
            }
        }
        // gap acceptance: stop before any conflict region that will be
        // occupied while we would transit it
        for (ci, (s_c, _)) in conflicts.iter().enumerate() {
            let entry = s_c - CONFLICT_CLEARANCE;
            if s >= entry {
                continue; // committed
            }
            let dist_entry = entry - s;
            let cruise = v.max(2.0);
            let t_entry = t as f64 + dist_entry / cruise / SUBSTEP_DT;
            let t_exit =
                t as f64 + (dist_entry + 2.0 * CONFLICT_CLEARANCE + VEH_LEN) / cruise / SUBSTEP_DT;
            let margin = 10.0; // sub-steps
            let lo = (t_entry - margin).max(t as f64) as usize;
            let hi = ((t_exit + margin) as usize).min(n_substeps);
            let occupied_during = (lo..=hi).any(|tt| occupancy[ci][tt]);
            if occupied_during {
                // virtual stationary leader at the stop line
                let stop_gap = (dist_entry - 1.0).max(0.01);
                accel = accel.min(idm_accel(v, 0.0, stop_gap, &idm));
            }
        }
        v = (v + accel * SUBSTEP_DT).max(0.0);
        s = (s + v * SUBSTEP_DT).min(total + 50.0);
        states.push(AgentState::new(
            polyline_pose_at(&path, s),
            v,
            VEH_LEN,
            VEH_WID,
        ));
    }
    Trajectory::new(states)
}

fn build_blueprint(arch: &str, spec: &SuiteSpec, rng: &mut ChaCha8Rng) -> Blueprint {
    let speed = |rng: &mut ChaCha8Rng| rng.random_range(spec.speed_range.0..spec.speed_range.1);
    let offset = |rng: &mut ChaCha8Rng| rng.random_range(spec.gap_range.0..spec.gap_range.1);
    match arch {
        "unprotected_left" => {
            // northbound approach on x=2, left turn onto westbound y=2,
            // oncoming southbound on x=-2
            let approach_len = rng.random_range(28.0..42.0);
            let map = RoadMap::new(
                vec![
                    lane(
                        "ego_in",
                        LANE_W,
                        line_pts([2.0, -approach_len - 20.0], [2.0, -10.0], 5.0),
                    ),
                    lane(
                        "ego_turn",
                        JUNCTION_W,
                        arc_pts([-10.0, -10.0], 12.0, 0.0, FRAC_PI_2, 10),
                    ),
                    lane("ego_out", LANE_W, line_pts([-10.0, 2.0], [-90.0, 2.0], 5.0)),
                    lane("onc", LANE_W, line_pts([-2.0, 90.0], [-2.0, -90.0], 5.0)),
                ],
                BTreeMap::from([
                    ("ego_in".to_string(), vec!["ego_turn".to_string()]),
                    ("ego_turn".to_string(), vec!["ego_out".to_string()]),
                ]),
            )
            .expect("valid archetype map");
            let ego_v = rng.random_range(5.0..8.0);
            let ego_start = 10.0; // arc into ego_in
            let route = Route::new(vec!["ego_in".into(), "ego_turn".into(), "ego_out".into()]);
            // ego naive arrival at the conflict (circle x = -2 -> y ~ 0)
            let path = route.centerline(&map);
            let (s_c, _) = polyline_project(&path, [-2.0, -2.0]);
            let t_ego = (s_c - ego_start) / ego_v;
            let n_onc = if rng.random::<f64>() < 0.5 { 1 } else { 2 };
            let onc_path = line_pts([-2.0, 90.0], [-2.0, -90.0], 5.0);
            let agents = (0..n_onc)
                .map(|k| {
                    let v_a = speed(rng);
                    let t_arrive =
                        (t_ego + offset(rng) + k as f64 * rng.random_range(1.6..3.2)).max(1.0);
                    // distance from path start to the conflict point (y ~ -2)
                    let (s_conf, _) = polyline_project(&onc_path, [-2.0, -2.0]);
                    let start_s = (s_conf - v_a * t_arrive).max(0.0);
                    AgentScript {
                        path: onc_path.clone(),
                        start_s,
                        start_v: v_a,
                        v0: v_a,
                        brake: None,
                    }
                })
                .collect();
            Blueprint {
                map,
                route,
                ego_start_s: ego_start,
                ego_start_v: ego_v,
                ego_v0: rng.random_range(7.0..9.5),
                agents,
            }
        }
        "lane_change" => {
            let x_lc = rng.random_range(15.0..30.0);
            let map = RoadMap::new(
                vec![
                    lane("l0a", LANE_W, line_pts([-25.0, 0.0], [x_lc, 0.0], 5.0)),
                    lane("l0b", LANE_W, line_pts([x_lc, 0.0], [170.0, 0.0], 5.0)),
                    lane("link", 6.0, line_pts([x_lc, 0.0], [x_lc + 18.0, 3.5], 3.0)),
                    lane(
                        "l1b",
                        LANE_W,
                        line_pts([x_lc + 18.0, 3.5], [170.0, 3.5], 5.0),
                    ),
                    lane(
                        "l1a",
                        LANE_W,
                        line_pts([-80.0, 3.5], [x_lc + 18.0, 3.5], 5.0),
                    ),
                ],
                BTreeMap::from([
                    (
                        "l0a".to_string(),
                        vec!["link".to_string(), "l0b".to_string()],
                    ),
                    ("link".to_string(), vec!["l1b".to_string()]),
                    ("l1a".to_string(), vec!["l1b".to_string()]),
                ]),
            )
            .expect("valid archetype map");
            let ego_v = rng.random_range(5.0..8.0);
            let route = Route::new(vec!["l0a".into(), "link".into(), "l1b".into()]);
            // slow lead on l0 keeps the pressure on; fast traffic on l1
            let lead_v = rng.random_range(2.0..3.5);
            let lead = AgentScript {
                path: line_pts([-25.0, 0.0], [170.0, 0.0], 5.0),
                start_s: 25.0 + x_lc + rng.random_range(8.0..16.0),
                start_v: lead_v,
                v0: lead_v,
                brake: None,
            };
            let path = route.centerline(&map);
            let merge_pt = [x_lc + 18.0, 3.5];
            let (s_c, _) = polyline_project(&path, merge_pt);
            let t_ego = (s_c - 10.0) / ego_v;
            let l1_path = line_pts([-80.0, 3.5], [170.0, 3.5], 5.0);
            let (s_conf, _) = polyline_project(&l1_path, merge_pt);
            let v_a = speed(rng);
            let t_arrive = (t_ego + offset(rng)).max(1.0);
            let rival = AgentScript {
                path: l1_path,
                start_s: (s_conf - v_a * t_arrive).max(0.0),
                start_v: v_a,
                v0: v_a,
                brake: None,
            };
            Blueprint {
                map,
                route,
                ego_start_s: 10.0,
                ego_start_v: ego_v,
                ego_v0: rng.random_range(7.0..9.5),
                agents: vec![lead, rival],
            }
        }
        "lead_brake" => {
            let map = RoadMap::new(
                vec![lane(
                    "main",
                    LANE_W,
                    line_pts([-25.0, 0.0], [220.0, 0.0], 5.0),
                )],
                BTreeMap::new(),
            )
            .expect("valid archetype map");
            let ego_v = rng.random_range(6.0..9.0);
            let lead_gap = rng.random_range(16.0..30.0);
            let brake_at = rng.random_range(5..30);
            let decel = rng.random_range(2.5..4.0);
            let lead = AgentScript {
                path: line_pts([-25.0, 0.0], [220.0, 0.0], 5.0),
                start_s: 25.0 + 10.0 + lead_gap,
                start_v: ego_v,
                v0: ego_v,
                brake: Some((brake_at, decel)),
            };
            Blueprint {
                map,
                route: Route::new(vec!["main".into()]),
                ego_start_s: 25.0 + 10.0,
                ego_start_v: ego_v,
                ego_v0: rng.random_range(8.0..10.0),
                agents: vec![lead],
            }
        }
        "crossing" => {
            // ego eastbound through an uncontrolled crossing at x = 0
            let map = RoadMap::new(
                vec![
                    lane("ew", LANE_W, line_pts([-70.0, 0.0], [90.0, 0.0], 5.0)),
                    lane("ns", LANE_W, line_pts([0.0, -90.0], [0.0, 90.0], 5.0)),
                ],
                BTreeMap::new(),
            )
            .expect("valid archetype map");
            let ego_v = rng.random_range(5.0..8.5);
            let ego_start = rng.random_range(15.0..30.0); // arc on ew
            let route = Route::new(vec!["ew".into()]);
            let path = route.centerline(&map);
            let (s_c, _) = polyline_project(&path, [0.0, 0.0]);
            let t_ego = (s_c - ego_start) / ego_v;
            let ns_path = line_pts([0.0, -90.0], [0.0, 90.0], 5.0);
            let (s_conf, _) = polyline_project(&ns_path, [0.0, 0.0]);
            let n_cross = if rng.random::<f64>() < 0.6 { 1 } else { 2 };
            let agents = (0..n_cross)
                .map(|k| {
                    let v_a = speed(rng);
                    let t_arrive =
                        (t_ego + offset(rng) + k as f64 * rng.random_range(1.8..3.5)).max(1.0);
                    AgentScript {
                        path: ns_path.clone(),
                        start_s: (s_conf - v_a * t_arrive).max(0.0),
                        start_v: v_a,
                        v0: v_a,
                        brake: None,
                    }
                })
                .collect();
            Blueprint {
                map,
                route,
                ego_start_s: ego_start,
                ego_start_v: ego_v,
                ego_v0: rng.random_range(7.0..9.5),
                agents,
            }
        }
        "merge" => {
            // on-ramp joining an eastbound mainline at the origin
            let ramp_start = [-55.0, -14.0];
            let ramp_pts = {
                let mut pts = line_pts(ramp_start, [-12.0, -3.0], 4.0);
                pts.extend(line_pts([-12.0, -3.0], [0.0, 0.0], 3.0).into_iter().skip(1));
                pts
            };
            let map = RoadMap::new(
                vec![
                    lane("ramp", 6.0, ramp_pts.clone()),
                    lane("main_in", LANE_W, line_pts([-80.0, 0.0], [0.0, 0.0], 5.0)),
                    lane("main_out", LANE_W, line_pts([0.0, 0.0], [160.0, 0.0], 5.0)),
                ],
                BTreeMap::from([
                    ("ramp".to_string(), vec!["main_out".to_string()]),
                    ("main_in".to_string(), vec!["main_out".to_string()]),
                ]),
            )
            .expect("valid archetype map");
            let ego_v = rng.random_range(5.0..8.0);
            let route = Route::new(vec!["ramp".into(), "main_out".into()]);
            let path = route.centerline(&map);
            let (s_c, _) = polyline_project(&path, [0.0, 0.0]);
            let t_ego = (s_c - 5.0) / ego_v;
            let main_path = {
                let mut pts = line_pts([-80.0, 0.0], [0.0, 0.0], 5.0);
                pts.extend(line_pts([0.0, 0.0], [160.0, 0.0], 5.0).into_iter().skip(1));
                pts
            };
            let (s_conf, _) = polyline_project(&main_path, [0.0, 0.0]);
            let v_a = speed(rng);
            let t_arrive = (t_ego + offset(rng)).max(1.0);
            let agents = vec![AgentScript {
                path: main_path,
                start_s: (s_conf - v_a * t_arrive).max(0.0),
                start_v: v_a,
                v0: v_a,
                brake: None,
            }];
            Blueprint {
                map,
                route,
                ego_start_s: 5.0,
                ego_start_v: ego_v,
                ego_v0: rng.random_range(7.0..9.5),
                agents,
            }
        }
        other => unreachable!("unknown archetype {other}"),
    }
}

/// Replay the expert against the logs: any box overlap or off-road corner
/// disqualifies the draw.
fn verify_blueprint(sc: &Scenario) -> bool {
    let n = sc.horizon_tokens * SUBSTEPS;
    for t in 0..=n {
        let ego = sc.expert.states[t];
        let ego_box = ego.footprint();
        if offroad(&ego_box, &sc.map) {
            return false;
        }
        for log in &sc.agent_logs {
            if boxes_overlap(&ego_box, &log.states[t].footprint()) {
                return false;
            }
        }
    }
    // the expert must actually go somewhere
    sc.expert.arc_length() > 20.0
}

fn scenario_from_blueprint(
    bp: &Blueprint,
    horizon_tokens: usize,
    seed: u64,
    tag: &str,
) -> Scenario {
    let n = horizon_tokens * SUBSTEPS;
    let agent_trajs = simulate_agents(&bp.agents, n);
    let expert = simulate_expert(bp, &agent_trajs, n);
    Scenario {
        map: bp.map.clone(),
        route: bp.route.clone(),
        ego_init: expert.states[0],
        agents_init: agent_trajs.iter().map(|t| t.states[0]).collect(),
        expert,
        agent_logs: agent_trajs,
        horizon_tokens,
        seed,
        dt: SUBSTEP_DT,
        tag: tag.to_string(),
    }
}

/// Generate the suite into `out_dir` as one JSON file per scenario.
/// Deterministic per seed; returns the written paths in order.
pub fn generate_suite(spec: &SuiteSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(spec.total());
    let mut index = 0usize;
    for (arch, count) in spec.archetypes() {
        for k in 0..count {
            let mut accepted = None;
            for attempt in 0..MAX_ATTEMPTS {
                let scenario_seed = child_seed(spec.seed, arch, (k as u64) << 16 | attempt as u64);
                let mut rng = stream_rng(scenario_seed, "blueprint", 0);
                let bp = build_blueprint(arch, spec, &mut rng);
                let sc = scenario_from_blueprint(&bp, spec.horizon_tokens, scenario_seed, arch);
                if verify_blueprint(&sc) {
                    accepted = Some(sc);
                    break;
                }
            }
            let sc = accepted.ok_or_else(|| {
                Error::SuiteGeneration(format!(
                    "no collision-free draw for archetype {arch} index {k} (suite seed {})",
                    spec.seed
                ))
            })?;
            sc.validate(SUBSTEPS)?;
            let path = out_dir.join(format!("{index:04}_{arch}.json"));
            sc.save_json(&path)?;
            paths.push(path);
            index += 1;
        }
    }
    Ok(paths)
}

/// Load every scenario file in a suite directory, sorted by filename.
pub fn load_suite(dir: &Path) -> Result<Vec<Scenario>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingData(format!(
            "no scenario files in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| Scenario::load_json(p)).collect()
}
