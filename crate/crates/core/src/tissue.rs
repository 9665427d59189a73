//! Haptic tissue parameters, intensity transfer-function thresholds and the
//! per-position tissue classification used by the force engine.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{BodyMask, TissueLabel, VolumeError, VoxelVolume};

#[derive(Debug, Error)]
pub enum TissueError {
    #[error("no haptic parameters for label {0}")]
    UnknownLabel(TissueLabel),
    #[error("class {0} is degenerate (empty or zero variance)")]
    DegenerateClass(&'static str),
    #[error("invalid haptic table: {0}")]
    InvalidTable(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("voxel at ({x:.2}, {y:.2}, {z:.2}) mm is unlabeled and the provider has no transfer function")]
    Unclassifiable { x: f64, y: f64, z: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("config: {0}")]
    Config(String),
}

/// How a tissue matters to the planner and trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pass,
    Risk,
    Target,
}

/// Cutting threshold `T_N` (N, may be infinite), sustain force `R` (N) and
/// stiffness `k` (N/mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    #[serde(with = "crate::serde_inf")]
    pub cut_threshold: f64,
    pub sustain: f64,
    pub stiffness: f64,
}

impl TissueParams {
    pub const fn new(cut_threshold: f64, sustain: f64, stiffness: f64) -> Self {
        TissueParams {
            cut_threshold,
            sustain,
            stiffness,
        }
    }

    pub const ZERO: TissueParams = TissueParams::new(0.0, 0.0, 0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueEntry {
    #[serde(flatten)]
    pub params: TissueParams,
    pub role: Role,
}

/// Label → (haptic parameters, role). Air's role is `Pass`; an air cavity
/// inside the body is reported as a risk by the classifier instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HapticTable {
    tissues: BTreeMap<TissueLabel, TissueEntry>,
}

impl Default for HapticTable {
    fn default() -> Self {
        use TissueLabel::*;
        let rows = [
            (Air, 0.0, 0.0, 0.0, Role::Pass),
            (Skin, 0.7, 0.7, 0.8, Role::Pass),
            (FatSoft, 0.7, 0.7, 1.0, Role::Pass),
            (Bone, f64::INFINITY, 3.0, 2.0, Role::Risk),
            (Fascia, 2.5, 1.0, 1.0, Role::Pass),
            (Liver, 0.3, 0.9, 1.2, Role::Pass),
            (HepBlood, 1.05, 0.75, 1.1, Role::Risk),
            (HepBile, 1.2, 0.5, 1.0, Role::Target),
        ];
        let tissues = rows
            .into_iter()
            .map(|(l, t, r, k, role)| {
                (
                    l,
                    TissueEntry {
                        params: TissueParams::new(t, r, k),
                        role,
                    },
                )
            })
            .collect();
        HapticTable { tissues }
    }
}

impl HapticTable {
    /// Builds a table, checking that every tissue has a row and all values
    /// are non-negative. `R > T_N` is allowed (the default liver row has it);
    /// see [`HapticTable::sustain_above_threshold`].
    pub fn new(tissues: BTreeMap<TissueLabel, TissueEntry>) -> Result<Self, TissueError> {
        let t = HapticTable { tissues };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TissueError> {
        for l in TissueLabel::TISSUES {
            let e = self
                .tissues
                .get(&l)
                .ok_or_else(|| TissueError::InvalidTable(format!("missing row for {l}")))?;
            let p = e.params;
            if !(p.cut_threshold >= 0.0 && p.sustain >= 0.0 && p.stiffness >= 0.0)
                || !p.sustain.is_finite()
                || !p.stiffness.is_finite()
            {
                return Err(TissueError::InvalidTable(format!("{l}: negative or non-finite value")));
            }
            if p.stiffness == 0.0 && p.sustain > 0.0 {
                return Err(TissueError::InvalidTable(format!("{l}: zero stiffness with positive sustain")));
            }
        }
        if self.tissues.contains_key(&TissueLabel::Unlabeled) {
            return Err(TissueError::InvalidTable("unlabeled must not have a row".into()));
        }
        Ok(())
    }

    /// Tissues whose sustain force exceeds their finite cutting threshold.
    /// Entering such a tissue from inside the body is always an immediate cut.
    pub fn sustain_above_threshold(&self) -> Vec<TissueLabel> {
        self.tissues
            .iter()
            .filter(|(_, e)| e.params.cut_threshold.is_finite() && e.params.sustain > e.params.cut_threshold)
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn params_of(&self, label: TissueLabel) -> Result<TissueParams, TissueError> {
        self.tissues
            .get(&label)
            .map(|e| e.params)
            .ok_or(TissueError::UnknownLabel(label))
    }

    pub fn role_of(&self, label: TissueLabel) -> Option<Role> {
        self.tissues.get(&label).map(|e| e.role)
    }

    /// Largest stiffness in the table (N/mm).
    pub fn max_stiffness(&self) -> f64 {
        self.tissues
            .values()
            .map(|e| e.params.stiffness)
            .fold(0.0, f64::max)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TissueError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(VolumeError::Io)?;
        let t: HapticTable =
            serde_json::from_str(&text).map_err(|e| TissueError::Config(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// Table lookup; `Unlabeled` has no row.
pub fn params_of(label: TissueLabel, table: &HapticTable) -> Result<TissueParams, TissueError> {
    table.params_of(label)
}

/// Lower interval bounds of the intensity transfer function (HU).
/// air `[-1024, t0)`, skin `[t0, t1)`, fat/soft `[t1, t2)`, bone `[t2, inf)`,
/// where `t2` is `t2_minus` before the fascia is passed and `t2_plus` after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub t0: f64,
    pub t1: f64,
    pub t2_minus: f64,
    pub t2_plus: f64,
}

impl ThresholdSet {
    pub fn new(t0: f64, t1: f64, t2_minus: f64, t2_plus: f64) -> Result<Self, TissueError> {
        let t = ThresholdSet {
            t0,
            t1,
            t2_minus,
            t2_plus,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TissueError> {
        if !(self.t0 < self.t1 && self.t1 < self.t2_minus && self.t2_minus <= self.t2_plus) {
            return Err(TissueError::InvalidThresholds(format!(
                "need t0 < t1 < t2- <= t2+, got {:?}",
                self
            )));
        }
        Ok(())
    }

    pub fn bone_threshold(&self, fascia_passed: bool) -> f64 {
        if fascia_passed {
            self.t2_plus
        } else {
            self.t2_minus
        }
    }

    /// Interval lookup for an intensity.
    pub fn label_for(&self, hu: f64, fascia_passed: bool) -> TissueLabel {
        if hu < self.t0 {
            TissueLabel::Air
        } else if hu < self.t1 {
            TissueLabel::Skin
        } else if hu < self.bone_threshold(fascia_passed) {
            TissueLabel::FatSoft
        } else {
            TissueLabel::Bone
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TissueError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(VolumeError::Io)?;
        #[derive(Deserialize)]
        struct Either {
            thresholds: Option<ThresholdSet>,
            #[serde(flatten)]
            direct: Option<ThresholdSet>,
        }
        let e: Either =
            serde_json::from_str(&text).map_err(|e| TissueError::Config(e.to_string()))?;
        let t = e
            .thresholds
            .or(e.direct)
            .ok_or_else(|| TissueError::Config("no thresholds in file".into()))?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub mean: f64,
    pub sd: f64,
    pub weight: f64,
}

impl GaussianClass {
    /// Weighted log-density at `x` (up to the common `-ln sqrt(2 pi)`).
    pub fn log_weighted_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        self.weight.ln() - self.sd.ln() - 0.5 * z * z
    }
}

/// Gaussian intensity models of the four bulk classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassModel {
    pub air: GaussianClass,
    pub skin: GaussianClass,
    pub fat_soft: GaussianClass,
    pub bone: GaussianClass,
}

/// Thresholds plus which of them fell back to the midpoint of the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub model: GaussianClassModel,
    pub thresholds: ThresholdSet,
    pub fallback: Vec<String>,
}

/// Where two weighted Gaussian densities intersect between their means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intersection {
    Root(f64),
    /// The densities never cross between the means; midpoint returned.
    Midpoint(f64),
}

impl Intersection {
    pub fn value(self) -> f64 {
        match self {
            Intersection::Root(v) | Intersection::Midpoint(v) => v,
        }
    }
}

/// Bayes-optimal decision boundary of `lower` vs `upper` (`lower.mean < upper.mean`):
/// the smallest root of the log-density difference between the means at which
/// the lower class stops dominating.
pub fn gaussian_intersection(lower: &GaussianClass, upper: &GaussianClass) -> Intersection {
    let (m1, s1, w1) = (lower.mean, lower.sd, lower.weight);
    let (m2, s2, w2) = (upper.mean, upper.sd, upper.weight);
    // g(x) = ln(w1 N1) - ln(w2 N2) = a x² + b x + c
    let a = 1.0 / (2.0 * s2 * s2) - 1.0 / (2.0 * s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = (w1 / s1).ln() - (w2 / s2).ln() - m1 * m1 / (2.0 * s1 * s1) + m2 * m2 / (2.0 * s2 * s2);
    let mid = 0.5 * (m1 + m2);
    let scale = (1.0 / (s1 * s1)).max(1.0 / (s2 * s2));
    let mut roots: Vec<f64> = Vec::with_capacity(2);
    if a.abs() <= 1e-12 * scale {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let q = -0.5 * (b + b.signum() * sq);
            if q != 0.0 {
                roots.push(q / a);
                roots.push(c / q);
            } else {
                roots.push(-b / (2.0 * a));
            }
        }
    }
    roots.retain(|r| r.is_finite() && *r > m1 && *r < m2);
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let falling = roots.iter().copied().find(|&r| 2.0 * a * r + b <= 0.0);
    match falling.or_else(|| roots.first().copied()) {
        Some(r) => Intersection::Root(r),
        None => Intersection::Midpoint(mid),
    }
}

fn fit_class(values: &[f64], total: usize, name: &'static str) -> Result<GaussianClass, TissueError> {
    if values.len() < 2 {
        return Err(TissueError::DegenerateClass(name));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(TissueError::DegenerateClass(name));
    }
    Ok(GaussianClass {
        mean,
        sd,
        weight: n / total as f64,
    })
}

/// Fits one Gaussian per bulk class from a fully labelled volume and derives
/// the transfer-function thresholds at the adjacent-class intersections.
/// `t2_plus = t2_minus + bone_offset_hu`.
pub fn fit_thresholds(v: &VoxelVolume, bone_offset_hu: f64) -> Result<ThresholdFit, TissueError> {
    let mut buckets: [Vec<f64>; 4] = Default::default();
    for (&hu, &l) in v.intensities.iter().zip(&v.labels) {
        let slot = match l {
            TissueLabel::Air => 0,
            TissueLabel::Skin => 1,
            TissueLabel::FatSoft => 2,
            TissueLabel::Bone => 3,
            _ => continue,
        };
        buckets[slot].push(hu as f64);
    }
    let total: usize = buckets.iter().map(Vec::len).sum();
    let model = GaussianClassModel {
        air: fit_class(&buckets[0], total, "air")?,
        skin: fit_class(&buckets[1], total, "skin")?,
        fat_soft: fit_class(&buckets[2], total, "fat_soft")?,
        bone: fit_class(&buckets[3], total, "bone")?,
    };
    let mut fallback = Vec::new();
    let mut pick = |lo: &GaussianClass, hi: &GaussianClass, name: &str| {
        let i = gaussian_intersection(lo, hi);
        if let Intersection::Midpoint(_) = i {
            fallback.push(name.to_string());
        }
        i.value()
    };
    let t0 = pick(&model.air, &model.skin, "t0");
    let t1 = pick(&model.skin, &model.fat_soft, "t1");
    let t2 = pick(&model.fat_soft, &model.bone, "t2_minus");
    let thresholds = ThresholdSet::new(t0, t1, t2, t2 + bone_offset_hu)?;
    Ok(ThresholdFit {
        model,
        thresholds,
        fallback,
    })
}

/// Which label source backs a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Every voxel carries a segmented label.
    Full,
    /// Key structures segmented, the rest resolved by the transfer function.
    Partial,
}

/// A label grid plus an optional intensity transfer function for the
/// voxels it leaves unlabeled.
#[derive(Debug, Clone)]
pub struct LabelProvider {
    pub kind: ProviderKind,
    pub labels: Vec<TissueLabel>,
    pub transfer: Option<ThresholdSet>,
}

impl LabelProvider {
    pub fn full_segmentation(volume: &VoxelVolume) -> Self {
        LabelProvider {
            kind: ProviderKind::Full,
            labels: volume.labels.clone(),
            transfer: None,
        }
    }

    pub fn partial(labels: Vec<TissueLabel>, thresholds: ThresholdSet) -> Self {
        LabelProvider {
            kind: ProviderKind::Partial,
            labels,
            transfer: Some(thresholds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: TissueLabel,
    pub params: TissueParams,
    /// Air cavity inside the body.
    pub risk: bool,
}

/// Everything needed to resolve the tissue under the needle tip. Immutable,
/// shareable across sessions.
#[derive(Debug)]
pub struct Classifier {
    pub volume: Arc<VoxelVolume>,
    pub provider: LabelProvider,
    pub body: Arc<BodyMask>,
    pub table: HapticTable,
}

impl Classifier {
    pub fn new(
        volume: Arc<VoxelVolume>,
        provider: LabelProvider,
        body: Arc<BodyMask>,
        table: HapticTable,
    ) -> Result<Self, TissueError> {
        let n = volume.geometry.len();
        if provider.labels.len() != n || body.mask.len() != n {
            return Err(TissueError::Config(
                "label grid or body mask does not match the volume".into(),
            ));
        }
        table.validate()?;
        Ok(Classifier {
            volume,
            provider,
            body,
            table,
        })
    }

    /// Case distinction at a position: a segmented voxel wins; otherwise the
    /// transfer function applies inside the body and air with zero force
    /// outside it. Air inside the body is flagged as risk.
    pub fn classify(&self, pos: &Vector3<f64>, fascia_passed: bool) -> Result<Classification, TissueError> {
        let idx = self.volume.geometry.nearest_index(pos)?;
        self.classify_index(idx, fascia_passed)
            .ok_or(TissueError::Unclassifiable {
                x: pos.x,
                y: pos.y,
                z: pos.z,
            })
    }

    pub fn classify_index(&self, idx: usize, fascia_passed: bool) -> Option<Classification> {
        let inside = self.body.contains_index(idx);
        let segmented = self.provider.labels[idx];
        let label = if segmented.is_labeled() {
            segmented
        } else {
            let t = self.provider.transfer.as_ref()?;
            if !inside {
                TissueLabel::Air
            } else {
                t.label_for(self.volume.intensities[idx] as f64, fascia_passed)
            }
        };
        let risk = label == TissueLabel::Air && inside;
        let params = self.table.params_of(label).ok()?;
        Some(Classification { label, params, risk })
    }
}

/// Free-function form of [`Classifier::classify`].
pub fn classify(
    pos: &Vector3<f64>,
    classifier: &Classifier,
    fascia_passed: bool,
) -> Result<Classification, TissueError> {
    classifier.classify(pos, fascia_passed)
}
