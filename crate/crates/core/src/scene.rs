//! Geometry, map, scenario, and metric primitives shared by every module.
//!
//! All types are immutable value objects; every operation here is pure, so
//! concurrent rollout workers can share them freely.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalize an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose: position in meters, heading in radians in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Express `p` in the frame of `reference`.
pub fn to_frame(p: Pose2D, reference: Pose2D) -> Pose2D {
    let dx = p.x - reference.x;
    let dy = p.y - reference.y;
    let (s, c) = reference.heading.sin_cos();
    Pose2D {
        x: c * dx + s * dy,
        y: -s * dx + c * dy,
        heading: normalize_angle(p.heading - reference.heading),
    }
}

/// Map a frame-local pose `p` back into the world through `reference`.
pub fn from_frame(p: Pose2D, reference: Pose2D) -> Pose2D {
    let (s, c) = reference.heading.sin_cos();
    Pose2D {
        x: reference.x + c * p.x - s * p.y,
        y: reference.y + s * p.x + c * p.y,
        heading: normalize_angle(reference.heading + p.heading),
    }
}

/// Rectangle with an oriented center pose. `length` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose2D,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2D, length: f64, width: f64) -> Self {
        debug_assert!(length >= width && width > 0.0, "length >= width > 0");
        Self {
            center,
            length,
            width,
        }
    }

    /// The 4 corners in world coordinates.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.center.heading.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let mut out = [[0.0; 2]; 4];
        for (i, (lx, ly)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
            .into_iter()
            .enumerate()
        {
            out[i] = [
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            ];
        }
        out
    }

    /// Point containment, boundary inclusive.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let local = to_frame(Pose2D::new(p[0], p[1], 0.0), self.center);
        local.x.abs() <= self.length / 2.0 && local.y.abs() <= self.width / 2.0
    }
}

/// Separating-axis test over the 4 edge normals; boundary contact counts
/// as overlap.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        a.center.heading.sin_cos(),
        {
            let (s, c) = a.center.heading.sin_cos();
            (c, -s) // perpendicular
        },
        b.center.heading.sin_cos(),
        {
            let (s, c) = b.center.heading.sin_cos();
            (c, -s)
        },
    ];
    for (s, c) in axes {
        // axis direction (c, s): project both corner sets
        let project = |pts: &[[f64; 2]; 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in pts {
                let v = c * p[0] + s * p[1];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Vehicle state: pose, longitudinal speed, and footprint dimensions.
/// The collision box is always centered on the pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose2D,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn new(pose: Pose2D, speed: f64, length: f64, width: f64) -> Self {
        Self {
            pose,
            speed,
            length,
            width,
        }
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: self.pose,
            length: self.length,
            width: self.width,
        }
    }
}

/// Lane centerline with a constant corridor width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: String,
    pub width: f64,
    pub points: Vec<[f64; 2]>,
}

impl LanePolyline {
    pub fn new(id: impl Into<String>, width: f64, points: Vec<[f64; 2]>) -> Self {
        Self {
            id: id.into(),
            width,
            points,
        }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Pose at arc position `s` (clamped to the polyline, extrapolated past
    /// the final point along the last tangent).
    pub fn pose_at(&self, s: f64) -> Pose2D {
        pose_at_arc(&self.points, s)
    }

    /// (arc position, lateral distance) of the closest centerline point.
    pub fn project(&self, p: [f64; 2]) -> (f64, f64) {
        project_on_polyline(&self.points, p)
    }

    fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidScenario(format!(
                "lane {} has fewer than 2 points",
                self.id
            )));
        }
        if self.width <= 0.0 {
            return Err(Error::InvalidScenario(format!(
                "lane {} has non-positive width",
                self.id
            )));
        }
        for w in self.points.windows(2) {
            if dist(w[0], w[1]) <= 0.0 {
                return Err(Error::InvalidScenario(format!(
                    "lane {} has duplicate consecutive points",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `p` to the segment `a..b`, plus arc offset of the closest
/// point along the segment.
fn project_on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> (f64, f64) {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * abx, a[1] + t * aby];
    (t * len2.sqrt(), dist(p, q))
}

/// (arc position, distance) of the closest point of a polyline.
pub fn polyline_project(points: &[[f64; 2]], p: [f64; 2]) -> (f64, f64) {
    project_on_polyline(points, p)
}

/// Pose at arc position `s`, extrapolating past the final point.
pub fn polyline_pose_at(points: &[[f64; 2]], s: f64) -> Pose2D {
    pose_at_arc(points, s)
}

/// Total arc length of a polyline.
pub fn polyline_arc_length(points: &[[f64; 2]]) -> f64 {
    polyline_length(points)
}

fn project_on_polyline(points: &[[f64; 2]], p: [f64; 2]) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    let mut acc = 0.0;
    for w in points.windows(2) {
        let (off, d) = project_on_segment(w[0], w[1], p);
        if d < best.1 {
            best = (acc + off, d);
        }
        acc += dist(w[0], w[1]);
    }
    best
}

fn pose_at_arc(points: &[[f64; 2]], s: f64) -> Pose2D {
    let mut acc = 0.0;
    for w in points.windows(2) {
        let seg = dist(w[0], w[1]);
        if s <= acc + seg || seg == 0.0 {
            let t = if seg > 0.0 {
                ((s - acc) / seg).max(0.0)
            } else {
                0.0
            };
            let heading = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
            return Pose2D::new(
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
                heading,
            );
        }
        acc += seg;
    }
    // past the end: extrapolate along the final tangent
    let n = points.len();
    let a = points[n - 2];
    let b = points[n - 1];
    let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
    let extra = s - polyline_length(points);
    Pose2D::new(
        b[0] + extra * heading.cos(),
        b[1] + extra * heading.sin(),
        heading,
    )
}

fn polyline_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Lane graph: centerlines plus successor connectivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadMap {
    pub lanes: Vec<LanePolyline>,
    pub successors: BTreeMap<String, Vec<String>>,
}

impl RoadMap {
    pub fn new(
        lanes: Vec<LanePolyline>,
        successors: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let map = Self { lanes, successors };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        for lane in &self.lanes {
            lane.validate()?;
        }
        for (from, tos) in &self.successors {
            if self.lane_index(from).is_none() {
                return Err(Error::InvalidScenario(format!(
                    "successor key {from} is not a lane"
                )));
            }
            for to in tos {
                if self.lane_index(to).is_none() {
                    return Err(Error::InvalidScenario(format!(
                        "successor {to} of {from} is not a lane"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn lane_index(&self, id: &str) -> Option<usize> {
        self.lanes.iter().position(|l| l.id == id)
    }

    pub fn lane(&self, id: &str) -> Option<&LanePolyline> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn successor_ids(&self, id: &str) -> &[String] {
        self.successors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Index of the lane whose centerline is closest to `p`, with the
    /// lateral distance. Ties break toward the lower lane index.
    pub fn nearest_lane(&self, p: [f64; 2]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, lane) in self.lanes.iter().enumerate() {
            let (_, d) = lane.project(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }
}

/// True iff any box corner lies outside every lane corridor
/// (lateral distance > width/2 from each centerline; boundary is on-road).
pub fn offroad(bbox: &OrientedBox, map: &RoadMap) -> bool {
    debug_assert!(!map.lanes.is_empty());
    bbox.corners().iter().any(|&corner| {
        map.lanes.iter().all(|lane| {
            let (_, d) = lane.project(corner);
            d > lane.width / 2.0
        })
    })
}

/// Ordered lane path the ego is expected to follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub lane_ids: Vec<String>,
}

impl Route {
    pub fn new(lane_ids: Vec<String>) -> Self {
        Self { lane_ids }
    }

    pub fn validate(&self, map: &RoadMap) -> Result<()> {
        for id in &self.lane_ids {
            if map.lane_index(id).is_none() {
                return Err(Error::InvalidScenario(format!("route lane {id} missing")));
            }
        }
        for w in self.lane_ids.windows(2) {
            if !map.successor_ids(&w[0]).contains(&w[1]) {
                return Err(Error::InvalidScenario(format!(
                    "route lanes {} -> {} are not connected",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Concatenated centerline of the route (consecutive duplicates dropped).
    pub fn centerline(&self, map: &RoadMap) -> Vec<[f64; 2]> {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for id in &self.lane_ids {
            if let Some(lane) = map.lane(id) {
                for &p in &lane.points {
                    if pts.last().map(|&q| dist(p, q) > 1e-9).unwrap_or(true) {
                        pts.push(p);
                    }
                }
            }
        }
        pts
    }
}

/// Time-indexed states at a fixed sub-step dt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>) -> Self {
        Self { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(|s| s.pose.position()).collect()
    }

    pub fn arc_length(&self) -> f64 {
        self.positions().windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

/// Arc-length fraction of the expert path reached by the ego's final
/// position, clipped to [0, 1].
pub fn progression(ego: &Trajectory, expert: &Trajectory) -> Result<f64> {
    let path = expert.positions();
    let total = polyline_length(&path);
    if total <= 0.0 || path.len() < 2 {
        return Err(Error::InvalidScenario(
            "expert trajectory has zero arc length".into(),
        ));
    }
    let last = ego
        .states
        .last()
        .ok_or_else(|| Error::InvalidScenario("empty ego trajectory".into()))?;
    let (s, _) = project_on_polyline(&path, last.pose.position());
    Ok((s / total).clamp(0.0, 1.0))
}

/// A full evaluation scene: map, route, initial states, expert and logged
/// trajectories at sub-step resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub map: RoadMap,
    pub route: Route,
    pub ego_init: AgentState,
    pub agents_init: Vec<AgentState>,
    pub expert: Trajectory,
    pub agent_logs: Vec<Trajectory>,
    pub horizon_tokens: usize,
    pub seed: u64,
    pub dt: f64,
    /// Archetype label carried for reporting; not used by the simulator.
    pub tag: String,
}

impl Scenario {
    pub fn validate(&self, substeps_per_token: usize) -> Result<()> {
        self.map.validate()?;
        self.route.validate(&self.map)?;
        let need = self.horizon_tokens * substeps_per_token + 1;
        if self.expert.len() < need {
            return Err(Error::InvalidScenario(format!(
                "expert covers {} sub-steps, need {need}",
                self.expert.len()
            )));
        }
        if self.agent_logs.len() != self.agents_init.len() {
            return Err(Error::InvalidScenario(
                "agent_logs and agents_init length mismatch".into(),
            ));
        }
        for log in &self.agent_logs {
            if log.len() < need {
                return Err(Error::InvalidScenario(format!(
                    "agent log covers {} sub-steps, need {need}",
                    log.len()
                )));
            }
        }
        let e0 = self.expert.states[0];
        if dist(e0.pose.position(), self.ego_init.pose.position()) > 1e-9 {
            return Err(Error::InvalidScenario(
                "ego_init does not equal expert.states[0]".into(),
            ));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = file::ScenarioFile::from(self);
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: file::ScenarioFile = serde_json::from_str(&text)?;
        file.into_scenario()
    }
}

/// On-disk scenario schema: one JSON document per scenario.
pub mod file {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ScenarioFile {
        pub dt: f64,
        pub map: MapFile,
        pub route: Vec<String>,
        pub ego_init: AgentInitFile,
        pub agents_init: Vec<AgentInitFile>,
        /// [[x, y, heading, speed], ...] at dt
        pub expert: Vec<[f64; 4]>,
        pub agent_logs: Vec<Vec<[f64; 4]>>,
        pub horizon_tokens: usize,
        pub seed: u64,
        #[serde(default)]
        pub tag: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct MapFile {
        pub lanes: Vec<LaneFile>,
        pub successors: BTreeMap<String, Vec<String>>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct LaneFile {
        pub id: String,
        pub width: f64,
        pub points: Vec<[f64; 2]>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct AgentInitFile {
        pub pose: [f64; 3],
        pub speed: f64,
        pub length: f64,
        pub width: f64,
    }

    fn state_row(s: &AgentState) -> [f64; 4] {
        [s.pose.x, s.pose.y, s.pose.heading, s.speed]
    }

    fn row_state(row: [f64; 4], length: f64, width: f64) -> AgentState {
        AgentState::new(Pose2D::new(row[0], row[1], row[2]), row[3], length, width)
    }

    impl From<&Scenario> for ScenarioFile {
        fn from(sc: &Scenario) -> Self {
            ScenarioFile {
                dt: sc.dt,
                map: MapFile {
                    lanes: sc
                        .map
                        .lanes
                        .iter()
                        .map(|l| LaneFile {
                            id: l.id.clone(),
                            width: l.width,
                            points: l.points.clone(),
                        })
                        .collect(),
                    successors: sc.map.successors.clone(),
                },
                route: sc.route.lane_ids.clone(),
                ego_init: AgentInitFile {
                    pose: [
                        sc.ego_init.pose.x,
                        sc.ego_init.pose.y,
                        sc.ego_init.pose.heading,
                    ],
                    speed: sc.ego_init.speed,
                    length: sc.ego_init.length,
                    width: sc.ego_init.width,
                },
                agents_init: sc
                    .agents_init
                    .iter()
                    .map(|a| AgentInitFile {
                        pose: [a.pose.x, a.pose.y, a.pose.heading],
                        speed: a.speed,
                        length: a.length,
                        width: a.width,
                    })
                    .collect(),
                expert: sc.expert.states.iter().map(state_row).collect(),
                agent_logs: sc
                    .agent_logs
                    .iter()
                    .map(|t| t.states.iter().map(state_row).collect())
                    .collect(),
                horizon_tokens: sc.horizon_tokens,
                seed: sc.seed,
                tag: sc.tag.clone(),
            }
        }
    }

    impl ScenarioFile {
        pub fn into_scenario(self) -> Result<Scenario> {
            let map = RoadMap::new(
                self.map
                    .lanes
                    .into_iter()
                    .map(|l| LanePolyline::new(l.id, l.width, l.points))
                    .collect(),
                self.map.successors,
            )?;
            let ego_init = AgentState::new(
                Pose2D::new(
                    self.ego_init.pose[0],
                    self.ego_init.pose[1],
                    self.ego_init.pose[2],
                ),
                self.ego_init.speed,
                self.ego_init.length,
                self.ego_init.width,
            );
            let agents_init: Vec<AgentState> = self
                .agents_init
                .iter()
                .map(|a| {
                    AgentState::new(
                        Pose2D::new(a.pose[0], a.pose[1], a.pose[2]),
                        a.speed,
                        a.length,
                        a.width,
                    )
                })
                .collect();
            let expert = Trajectory::new(
                self.expert
                    .into_iter()
                    .map(|r| row_state(r, ego_init.length, ego_init.width))
                    .collect(),
            );
            let agent_logs: Vec<Trajectory> = self
                .agent_logs
                .into_iter()
                .zip(agents_init.iter())
                .map(|(rows, init)| {
                    Trajectory::new(
                        rows.into_iter()
                            .map(|r| row_state(r, init.length, init.width))
                            .collect(),
                    )
                })
                .collect();
            Ok(Scenario {
                map,
                route: Route::new(self.route),
                ego_init,
                agents_init,
                expert,
                agent_logs,
                horizon_tokens: self.horizon_tokens,
                seed: self.seed,
                dt: self.dt,
                tag: self.tag,
            })
        }
    }
}
