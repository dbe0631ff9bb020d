//! Discrete motion-token vocabulary.
//!
//! Trajectories are cut into 0.5 s segments (S sub-steps at dt), expressed
//! relative to the pose preceding each window. A greedy disk cover over the
//! average-corner-distance pseudometric turns the segment pool into a token
//! vocabulary; encode/decode quantize between segments and token ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil::fnv1a;
use crate::scene::{from_frame, to_frame, AgentState, Pose2D, Trajectory};

/// Sub-steps per planning step (0.5 s at 10 Hz).
pub const SUBSTEPS: usize = 5;
/// Sub-step duration in seconds.
pub const SUBSTEP_DT: f64 = 0.1;
/// Canonical footprint used by the corner metric, meters.
pub const CANONICAL_BOX: [f64; 2] = [4.7, 2.1];

pub type TokenId = usize;

/// One planning step of relative motion: S poses in the frame of the pose
/// preceding the window. The first pose is already one sub-step in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub rel_poses: Vec<Pose2D>,
}

impl MotionSegment {
    pub fn stationary() -> Self {
        Self {
            rel_poses: vec![Pose2D::origin(); SUBSTEPS],
        }
    }
}

/// A vocabulary entry: id plus the template segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionToken {
    pub id: TokenId,
    pub template: MotionSegment,
}

/// Token set produced by the greedy disk cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub tokens: Vec<MotionToken>,
    pub radius: f64,
    pub canonical_box: [f64; 2],
}

impl TokenVocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable content hash; checkpoints record it to detect model/vocab skew.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(&file::VocabularyFile::from(self))
            .expect("vocabulary serializes");
        fnv1a(text.as_bytes())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&file::VocabularyFile::from(self))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let f: file::VocabularyFile = serde_json::from_str(&text)?;
        f.into_vocabulary()
    }
}

/// Cut a trajectory into consecutive non-overlapping S-sub-step windows,
/// each re-expressed in the frame of the pose preceding the window.
pub fn extract_segments(traj: &Trajectory) -> Vec<MotionSegment> {
    let n = traj.len();
    if n < SUBSTEPS + 1 {
        return Vec::new();
    }
    let count = (n - 1) / SUBSTEPS;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let anchor = traj.states[w * SUBSTEPS].pose;
        let rel_poses = (1..=SUBSTEPS)
            .map(|k| to_frame(traj.states[w * SUBSTEPS + k].pose, anchor))
            .collect();
        out.push(MotionSegment { rel_poses });
    }
    out
}

fn corner_offsets(box_dims: [f64; 2]) -> [[f64; 2]; 4] {
    let hl = box_dims[0] / 2.0;
    let hw = box_dims[1] / 2.0;
    [[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]]
}

/// Mean over sub-steps and the 4 canonical-box corners of the Euclidean
/// distance between corresponding corner positions.
pub fn avg_corner_distance(a: &MotionSegment, b: &MotionSegment, box_dims: [f64; 2]) -> f64 {
    debug_assert_eq!(a.rel_poses.len(), b.rel_poses.len());
    let offsets = corner_offsets(box_dims);
    let mut sum = 0.0;
    for (pa, pb) in a.rel_poses.iter().zip(&b.rel_poses) {
        let (sa, ca) = pa.heading.sin_cos();
        let (sb, cb) = pb.heading.sin_cos();
        for o in offsets {
            let ax = pa.x + ca * o[0] - sa * o[1];
            let ay = pa.y + sa * o[0] + ca * o[1];
            let bx = pb.x + cb * o[0] - sb * o[1];
            let by = pb.y + sb * o[0] + cb * o[1];
            sum += ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
        }
    }
    sum / (a.rel_poses.len() * 4) as f64
}

/// Greedy disk cover in input order: a segment becomes a new template iff
/// it is farther than `radius` from every existing template. Stops early at
/// `max_size`.
pub fn build_vocabulary(
    segments: &[MotionSegment],
    radius: f64,
    max_size: usize,
) -> Result<TokenVocabulary> {
    if radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "K-disk radius must be positive, got {radius}"
        )));
    }
    if segments.is_empty() {
        return Err(Error::InvalidParameter("no segments to cluster".into()));
    }
    let mut tokens: Vec<MotionToken> = Vec::new();
    for seg in segments {
        if tokens.len() >= max_size {
            break;
        }
        let covered = tokens
            .iter()
            .any(|t| avg_corner_distance(seg, &t.template, CANONICAL_BOX) <= radius);
        if !covered {
            tokens.push(MotionToken {
                id: tokens.len(),
                template: seg.clone(),
            });
        }
    }
    Ok(TokenVocabulary {
        tokens,
        radius,
        canonical_box: CANONICAL_BOX,
    })
}

/// Bisect the disk radius so the vocabulary size lands within
/// `target ± slack`. Returns the vocabulary for the best radius found.
pub fn fit_radius(
    segments: &[MotionSegment],
    target: usize,
    slack: usize,
) -> Result<TokenVocabulary> {
    let mut lo = 1e-3;
    let mut hi = 10.0;
    let mut best: Option<TokenVocabulary> = None;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let vocab = build_vocabulary(segments, mid, target + slack + 64)?;
        let n = vocab.len();
        let better = best
            .as_ref()
            .map(|b| n.abs_diff(target) < b.len().abs_diff(target))
            .unwrap_or(true);
        if better {
            best = Some(vocab);
        }
        if n > target {
            lo = mid; // too many tokens: widen disks
        } else if n < target {
            hi = mid;
        } else {
            break;
        }
    }
    let vocab = best.expect("at least one bisection iteration");
    if vocab.len().abs_diff(target) > slack {
        return Err(Error::InvalidParameter(format!(
            "radius bisection stalled at {} tokens for target {target}±{slack}",
            vocab.len()
        )));
    }
    Ok(vocab)
}

/// Nearest-template token id; ties break toward the lowest id.
pub fn encode(seg: &MotionSegment, vocab: &TokenVocabulary) -> TokenId {
    debug_assert!(!vocab.is_empty());
    let mut best = (0, f64::INFINITY);
    for t in &vocab.tokens {
        let d = avg_corner_distance(seg, &t.template, vocab.canonical_box);
        if d < best.1 {
            best = (t.id, d);
        }
    }
    best.0
}

/// Map a token through `start`, producing S absolute sub-step states.
/// Speed at each sub-step is chord length over dt.
pub fn decode(
    id: TokenId,
    start: Pose2D,
    length: f64,
    width: f64,
    vocab: &TokenVocabulary,
) -> Result<Vec<AgentState>> {
    let token = vocab.tokens.get(id).ok_or(Error::InvalidToken {
        id,
        vocab: vocab.len(),
    })?;
    let mut out = Vec::with_capacity(SUBSTEPS);
    let mut prev = start;
    for rel in &token.template.rel_poses {
        let pose = from_frame(*rel, start);
        let chord = ((pose.x - prev.x).powi(2) + (pose.y - prev.y).powi(2)).sqrt();
        out.push(AgentState::new(pose, chord / SUBSTEP_DT, length, width));
        prev = pose;
    }
    Ok(out)
}

/// Absolute sub-step poses of a token template from `start` (no states).
pub fn decode_poses(id: TokenId, start: Pose2D, vocab: &TokenVocabulary) -> Result<Vec<Pose2D>> {
    let token = vocab.tokens.get(id).ok_or(Error::InvalidToken {
        id,
        vocab: vocab.len(),
    })?;
    Ok(token
        .template
        .rel_poses
        .iter()
        .map(|rel| from_frame(*rel, start))
        .collect())
}

/// On-disk vocabulary schema.
pub mod file {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    pub struct VocabularyFile {
        pub radius: f64,
        pub canonical_box: [f64; 2],
        pub tokens: Vec<TokenFile>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct TokenFile {
        pub id: usize,
        pub rel_poses: Vec<[f64; 3]>,
    }

    impl From<&TokenVocabulary> for VocabularyFile {
        fn from(v: &TokenVocabulary) -> Self {
            let mut tokens: Vec<TokenFile> = v
                .tokens
                .iter()
                .map(|t| TokenFile {
                    id: t.id,
                    rel_poses: t
                        .template
                        .rel_poses
                        .iter()
                        .map(|p| [p.x, p.y, p.heading])
                        .collect(),
                })
                .collect();
            tokens.sort_by_key(|t| t.id);
            VocabularyFile {
                radius: v.radius,
                canonical_box: v.canonical_box,
                tokens,
            }
        }
    }

    impl VocabularyFile {
        pub fn into_vocabulary(self) -> Result<TokenVocabulary> {
            let mut tokens: Vec<MotionToken> = self
                .tokens
                .into_iter()
                .map(|t| MotionToken {
                    id: t.id,
                    template: MotionSegment {
                        rel_poses: t
                            .rel_poses
                            .into_iter()
                            .map(|p| Pose2D::new(p[0], p[1], p[2]))
                            .collect(),
                    },
                })
                .collect();
            tokens.sort_by_key(|t| t.id);
            for (i, t) in tokens.iter().enumerate() {
                if t.id != i {
                    return Err(Error::VocabMismatch(format!(
                        "token ids are not dense: expected {i}, found {}",
                        t.id
                    )));
                }
            }
            Ok(TokenVocabulary {
                tokens,
                radius: self.radius,
                canonical_box: self.canonical_box,
            })
        }
    }
}
