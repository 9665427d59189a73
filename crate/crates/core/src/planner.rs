//! Straight skin-to-bile-duct trajectory planning.
//!
//! Every skin surface voxel is connected to every bile centreline voxel; a
//! segment is rejected when it crosses a risk voxel or is longer than the
//! maximum insertion length, and otherwise scored by its clearance from risk
//! structures and the number of bile voxels it runs through.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::edt;
use crate::serde_inf;
use crate::volume::{BodyMask, Geometry, TissueLabel, VoxelVolume};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no bile duct voxels to aim at")]
    EmptyTarget,
    #[error("no skin surface voxel")]
    NoSkin,
    #[error("invalid planner config: {0}")]
    BadConfig(String),
    #[error("label grid does not match the body mask")]
    GridMismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("path file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Clearance at which the risk-distance score saturates, mm.
    pub d_cap: f64,
    /// Bile voxel count at which the target-coverage score saturates.
    pub n_cap: f64,
    /// Paths scoring below this are discarded.
    pub q_min: f64,
    /// Maximum insertion length, mm.
    pub max_length: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            d_cap: 10.0,
            n_cap: 15.0,
            q_min: 0.4,
            max_length: 90.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.d_cap > 0.0 && self.n_cap > 0.0 && self.max_length > 0.0) {
            return Err(PlanError::BadConfig("caps and max length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.q_min) {
            return Err(PlanError::BadConfig(format!("q_min {} outside [0, 1]", self.q_min)));
        }
        Ok(())
    }
}

/// Bile centreline surrogate: voxel indices and their centres, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub voxels: Vec<[usize; 3]>,
    pub centers: Vec<Vector3<f64>>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Bile voxels whose interior distance is a strict local maximum along at
/// least one axis. Neighbours outside the grid count as distance 0.
pub fn extract_targets(labels: &[TissueLabel], g: &Geometry) -> Result<TargetSet, PlanError> {
    let bile: Vec<bool> = labels.iter().map(|&l| l == TissueLabel::HepBile).collect();
    if !bile.iter().any(|&b| b) {
        return Err(PlanError::EmptyTarget);
    }
    let outside: Vec<bool> = bile.iter().map(|&b| !b).collect();
    let mut d = edt(&outside, g);
    if d.iter().all(|v| v.is_infinite()) {
        // the whole grid is bile: every voxel is equally deep
        d.iter_mut().for_each(|v| *v = 1.0);
    }
    let mut voxels = Vec::new();
    let mut centers = Vec::new();
    for idx in 0..labels.len() {
        if !bile[idx] {
            continue;
        }
        let c = g.coords(idx);
        let here = d[idx];
        let ridge = (0..3).any(|a| {
            let get = |delta: i64| {
                let mut n = [c[0] as i64, c[1] as i64, c[2] as i64];
                n[a] += delta;
                if g.in_grid(n) {
                    d[g.index(n[0] as usize, n[1] as usize, n[2] as usize)]
                } else {
                    0.0
                }
            };
            here > get(-1) && here > get(1)
        });
        if ridge {
            voxels.push(c);
            centers.push(g.center(c));
        }
    }
    Ok(TargetSet { voxels, centers })
}

/// Risk structures for planning: bone, hepatic vessels and air inside the body.
pub fn risk_mask(labels: &[TissueLabel], body: &BodyMask) -> Vec<bool> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| match l {
            TissueLabel::Bone | TissueLabel::HepBlood => true,
            TissueLabel::Air => body.contains_index(i),
            _ => false,
        })
        .collect()
}

/// Skin voxels with at least one in-grid 6-neighbour outside the body.
pub fn skin_surface(labels: &[TissueLabel], body: &BodyMask) -> Vec<[usize; 3]> {
    let g = &body.geometry;
    (0..labels.len())
        .filter(|&i| labels[i] == TissueLabel::Skin)
        .map(|i| g.coords(i))
        .filter(|&c| {
            g.neighbors6(c)
                .any(|n| !body.contains_index(g.index(n[0], n[1], n[2])))
        })
        .collect()
}

/// Calls `visit` for every voxel the closed segment between the centres of
/// `a` and `b` touches, from `a` to `b`. Voxel `i` spans `[i - 1/2, i + 1/2]`
/// along each axis; where the segment passes exactly through an edge or a
/// corner, every voxel meeting there is visited. Crossing parameters are
/// compared in exact integer arithmetic. Stops early when `visit` returns
/// false.
pub fn traverse(a: [usize; 3], b: [usize; 3], mut visit: impl FnMut([usize; 3]) -> bool) {
    let d: [i64; 3] = [0, 1, 2].map(|x| b[x] as i64 - a[x] as i64);
    let step: [i64; 3] = d.map(|v| v.signum());
    let ad: [i64; 3] = d.map(|v| v.abs());
    let mut left = ad;
    // next crossing of axis x happens at t = num[x] / (2 |d[x]|)
    let mut num = [1i64; 3];
    let mut cur = [a[0] as i64, a[1] as i64, a[2] as i64];
    let as_u = |c: [i64; 3]| [c[0] as usize, c[1] as usize, c[2] as usize];
    if !visit(as_u(cur)) {
        return;
    }
    while left.iter().any(|&r| r > 0) {
        // axes whose next crossing is earliest
        let mut tied = [false; 3];
        let mut best: Option<usize> = None;
        for x in 0..3 {
            if left[x] == 0 {
                continue;
            }
            match best {
                None => {
                    best = Some(x);
                    tied = [false; 3];
                    tied[x] = true;
                }
                Some(bx) => {
                    // compare num[x]/ad[x] with num[bx]/ad[bx]
                    let lhs = num[x] as i128 * ad[bx] as i128;
                    let rhs = num[bx] as i128 * ad[x] as i128;
                    if lhs < rhs {
                        best = Some(x);
                        tied = [false; 3];
                        tied[x] = true;
                    } else if lhs == rhs {
                        tied[x] = true;
                    }
                }
            }
        }
        let mut axes = [0usize; 3];
        let mut m = 0;
        for x in (0..3).filter(|&x| tied[x]) {
            axes[m] = x;
            m += 1;
        }
        let axes = &axes[..m];
        if m > 1 {
            // every voxel sharing the edge or corner, before the diagonal one
            for mask in 1..(1u32 << m) - 1 {
                let mut c = cur;
                for (bit, &x) in axes.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        c[x] += step[x];
                    }
                }
                if !visit(as_u(c)) {
                    return;
                }
            }
        }
        for &x in axes {
            cur[x] += step[x];
            left[x] -= 1;
            num[x] += 2;
        }
        if !visit(as_u(cur)) {
            return;
        }
    }
}

/// Criterion values of one straight segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    #[serde(with = "serde_inf")]
    pub c1: f64,
    #[serde(with = "serde_inf")]
    pub c2: f64,
    /// Smallest risk distance along the shaft, mm (infinite without risk voxels).
    #[serde(with = "serde_inf")]
    pub c3: f64,
    /// Bile voxels along the shaft.
    pub c4: usize,
    pub c3_norm: f64,
    pub c4_norm: f64,
    #[serde(with = "serde_inf")]
    pub q: f64,
    pub length: f64,
}

/// Immutable planning data for one patient.
#[derive(Debug, Clone)]
pub struct PlanContext {
    pub geometry: Geometry,
    pub labels: Vec<TissueLabel>,
    pub risk: Vec<bool>,
    pub risk_distance: Vec<f64>,
    pub config: PlannerConfig,
}

impl PlanContext {
    pub fn new(labels: &[TissueLabel], body: &BodyMask, config: PlannerConfig) -> Result<Self, PlanError> {
        config.validate()?;
        if labels.len() != body.mask.len() {
            return Err(PlanError::GridMismatch);
        }
        let g = body.geometry;
        let risk = risk_mask(labels, body);
        let risk_distance = edt(&risk, &g);
        Ok(PlanContext {
            geometry: g,
            labels: labels.to_vec(),
            risk,
            risk_distance,
            config,
        })
    }

    pub fn length(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        (self.geometry.center(b) - self.geometry.center(a)).norm()
    }

    /// Hard constraints only: `(c1, c2)`, each 0 or infinite.
    pub fn check_hard(&self, a: [usize; 3], b: [usize; 3]) -> (f64, f64) {
        let c2 = if self.length(a, b) > self.config.max_length {
            f64::INFINITY
        } else {
            0.0
        };
        let g = &self.geometry;
        let mut blocked = false;
        traverse(a, b, |c| {
            blocked = self.risk[g.index(c[0], c[1], c[2])];
            !blocked
        });
        (if blocked { f64::INFINITY } else { 0.0 }, c2)
    }

    /// Soft criteria `(c3_norm, c4_norm)` of a segment.
    pub fn score_soft(&self, a: [usize; 3], b: [usize; 3]) -> (f64, f64) {
        let s = self.score(a, b);
        (s.c3_norm, s.c4_norm)
    }

    /// All four criteria and the combined score. `q` is infinite when a hard
    /// constraint fails.
    pub fn score(&self, a: [usize; 3], b: [usize; 3]) -> SegmentScore {
        let length = self.length(a, b);
        let c2 = if length > self.config.max_length {
            f64::INFINITY
        } else {
            0.0
        };
        let g = &self.geometry;
        let mut c1 = 0.0;
        let mut c3 = f64::INFINITY;
        let mut c4 = 0usize;
        traverse(a, b, |c| {
            let i = g.index(c[0], c[1], c[2]);
            if self.risk[i] {
                c1 = f64::INFINITY;
            }
            c3 = c3.min(self.risk_distance[i]);
            if self.labels[i] == TissueLabel::HepBile {
                c4 += 1;
            }
            true
        });
        self.combine(c1, c2, c3, c4, length)
    }

    fn combine(&self, c1: f64, c2: f64, c3: f64, c4: usize, length: f64) -> SegmentScore {
        let c3_norm = (c3 / self.config.d_cap).clamp(0.0, 1.0);
        let c4_norm = (c4 as f64 / self.config.n_cap).clamp(0.0, 1.0);
        SegmentScore {
            c1,
            c2,
            c3,
            c4,
            c3_norm,
            c4_norm,
            q: quality(c1, c2, c3_norm, c4_norm),
            length,
        }
    }

    /// Like `score` but gives up as soon as a risk voxel is met, or once the
    /// score can no longer exceed `floor`.
    fn score_feasible(&self, a: [usize; 3], b: [usize; 3], length: f64, floor: f64) -> Option<SegmentScore> {
        let g = &self.geometry;
        let [nx, ny, _] = g.dims;
        let mut c3 = f64::INFINITY;
        let mut c4 = 0usize;
        let mut ok = true;
        traverse(a, b, |c| {
            let i = c[0] + nx * (c[1] + ny * c[2]);
            if self.risk[i] {
                ok = false;
                return false;
            }
            let d = self.risk_distance[i];
            if d < c3 {
                c3 = d;
                if quality(0.0, 0.0, (c3 / self.config.d_cap).clamp(0.0, 1.0), 1.0) <= floor {
                    ok = false;
                    return false;
                }
            }
            if self.labels[i] == TissueLabel::HepBile {
                c4 += 1;
            }
            true
        });
        ok.then(|| self.combine(0.0, 0.0, c3, c4, length))
    }
}

/// Weighted criterion sum with all weights 1/2.
pub fn quality(c1: f64, c2: f64, c3_norm: f64, c4_norm: f64) -> f64 {
    0.5 * (c1 + c2 + c3_norm + c4_norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePath {
    pub id: usize,
    pub skin_voxel: [usize; 3],
    pub target_voxel: [usize; 3],
    pub target_index: usize,
    /// Skin voxel centre, mm.
    pub origin: [f64; 3],
    /// Target voxel centre, mm.
    pub target: [f64; 3],
    pub direction: [f64; 3],
    pub length: f64,
    #[serde(with = "serde_inf")]
    pub c1: f64,
    #[serde(with = "serde_inf")]
    pub c2: f64,
    #[serde(with = "serde_inf")]
    pub c3: f64,
    pub c4: usize,
    pub c3_norm: f64,
    pub c4_norm: f64,
    pub q: f64,
}

impl CandidatePath {
    pub fn origin_vec(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    pub fn direction_vec(&self) -> Vector3<f64> {
        Vector3::from(self.direction)
    }

    /// An unscored straight trajectory, for steering outside the planner.
    pub fn straight(origin: Vector3<f64>, direction: Vector3<f64>, length: f64) -> Self {
        let dir = direction.normalize();
        CandidatePath {
            id: 0,
            skin_voxel: [0; 3],
            target_voxel: [0; 3],
            target_index: 0,
            origin: origin.into(),
            target: (origin + dir * length).into(),
            direction: dir.into(),
            length,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            c4: 0,
            c3_norm: 0.0,
            c4_norm: 0.0,
            q: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub paths: Vec<CandidatePath>,
    pub skin_voxels: usize,
    pub targets: usize,
}

/// For every skin surface voxel keeps the best feasible segment to any target
/// (ties to the lowest target index), drops paths below `q_min` and sorts by
/// score, best first, then by skin voxel raster index.
pub fn plan(volume: &VoxelVolume, body: &BodyMask, config: &PlannerConfig) -> Result<PlanOutput, PlanError> {
    let ctx = PlanContext::new(&volume.labels, body, *config)?;
    let targets = extract_targets(&volume.labels, &volume.geometry)?;
    let skin = skin_surface(&volume.labels, body);
    if skin.is_empty() {
        return Err(PlanError::NoSkin);
    }
    plan_with(&ctx, &targets, &skin).map(|paths| PlanOutput {
        paths,
        skin_voxels: skin.len(),
        targets: targets.len(),
    })
}

pub fn plan_with(
    ctx: &PlanContext,
    targets: &TargetSet,
    skin: &[[usize; 3]],
) -> Result<Vec<CandidatePath>, PlanError> {
    let g = ctx.geometry;
    let cfg = ctx.config;
    let target_clearance: Vec<f64> = targets
        .voxels
        .iter()
        .map(|c| ctx.risk_distance[g.index(c[0], c[1], c[2])])
        .collect();

    let best: Vec<Option<(usize, SegmentScore)>> = skin
        .par_iter()
        .map(|&s| {
            let sc = g.center(s);
            let s_clear = ctx.risk_distance[g.index(s[0], s[1], s[2])];
            let mut best: Option<(usize, SegmentScore)> = None;
            for (ti, (&t, tc)) in targets.voxels.iter().zip(&targets.centers).enumerate() {
                let length = (tc - sc).norm();
                if length > cfg.max_length {
                    continue;
                }
                // clearance can only shrink along the shaft; coverage is at most 1
                let bound = quality(0.0, 0.0, (s_clear.min(target_clearance[ti]) / cfg.d_cap).clamp(0.0, 1.0), 1.0);
                if let Some((_, b)) = &best {
                    if bound <= b.q {
                        continue;
                    }
                }
                let floor = best.as_ref().map_or(f64::NEG_INFINITY, |(_, b)| b.q);
                if let Some(score) = ctx.score_feasible(s, t, length, floor) {
                    if best.as_ref().is_none_or(|(_, b)| score.q > b.q) {
                        best = Some((ti, score));
                    }
                }
            }
            best
        })
        .collect();

    let mut paths: Vec<(usize, CandidatePath)> = skin
        .iter()
        .zip(best)
        .filter_map(|(&s, b)| {
            let (ti, score) = b?;
            if !(score.q >= cfg.q_min) {
                return None;
            }
            let o = g.center(s);
            let t = targets.centers[ti];
            let dir = (t - o) / score.length;
            Some((
                g.index(s[0], s[1], s[2]),
                CandidatePath {
                    id: 0,
                    skin_voxel: s,
                    target_voxel: targets.voxels[ti],
                    target_index: ti,
                    origin: o.into(),
                    target: t.into(),
                    direction: dir.into(),
                    length: score.length,
                    c1: score.c1,
                    c2: score.c2,
                    c3: score.c3,
                    c4: score.c4,
                    c3_norm: score.c3_norm,
                    c4_norm: score.c4_norm,
                    q: score.q,
                },
            ))
        })
        .collect();
    paths.sort_by(|a, b| b.1.q.total_cmp(&a.1.q).then(a.0.cmp(&b.0)));
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut p))| {
            p.id = i;
            p
        })
        .collect())
}

/// One JSON object per line.
pub fn write_paths(path: impl AsRef<Path>, paths: &[CandidatePath]) -> Result<(), PlanError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in paths {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_paths(path: impl AsRef<Path>) -> Result<Vec<CandidatePath>, PlanError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PlanError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
