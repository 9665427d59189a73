//! Robotic steering along planned paths and the force-error metrics between
//! a reference and a test label provider.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineConfig, EngineError, Event, NeedleSession, Phase};
use crate::planner::CandidatePath;
use crate::tissue::Classifier;
use crate::volume::TissueLabel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("traces differ in length or step ({0} vs {1} samples)")]
    LengthMismatch(usize, usize),
    #[error("reference stimulus must be positive, got {0}")]
    ZeroReference(f64),
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("step {0} mm outside (0, 0.09]")]
    BadStep(f64),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("bad trace file: {0}")]
    BadTrace(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MAX_STEP: f64 = 0.09;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerConfig {
    /// Advance per sample, mm.
    pub step: f64,
    /// Distance in front of the skin voxel centre where the needle starts, mm.
    pub standoff: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            step: MAX_STEP,
            standoff: 2.0,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.step > 0.0 && self.step <= MAX_STEP) {
            return Err(EvalError::BadStep(self.step));
        }
        if !(self.standoff >= 0.0 && self.standoff.is_finite()) {
            return Err(EvalError::BadConfig("standoff must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of uniform steps needed to cover `total` mm.
    pub fn steps_for(&self, total: f64) -> usize {
        (total / self.step - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub depth: f64,
    pub force: f64,
    pub label: TissueLabel,
    pub phase: Phase,
    pub events: Vec<Event>,
}

/// Force magnitude along one steered path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrace {
    pub path_id: u64,
    pub step: f64,
    pub samples: Vec<TraceSample>,
}

/// Trajectory start: the skin voxel centre backed off by the standoff.
pub fn steering_start(path: &CandidatePath, cfg: &SteerConfig) -> nalgebra::Vector3<f64> {
    path.origin_vec() - path.direction_vec() * cfg.standoff
}

/// Fresh session advanced in uniform steps from the start to the target.
pub fn steer(
    path: &CandidatePath,
    classifier: Arc<Classifier>,
    engine: &EngineConfig,
    cfg: &SteerConfig,
) -> Result<ForceTrace, EvalError> {
    cfg.validate()?;
    let mut session = NeedleSession::new(
        classifier,
        steering_start(path, cfg),
        path.direction_vec(),
        *engine,
    )?;
    let n = cfg.steps_for(path.length + cfg.standoff);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let r = session.advance(cfg.step)?;
        samples.push(TraceSample {
            depth: r.depth,
            force: r.magnitude,
            label: r.label,
            phase: r.phase,
            events: r.events,
        });
    }
    Ok(ForceTrace {
        path_id: path.id as u64,
        step: cfg.step,
        samples,
    })
}

impl ForceTrace {
    /// Depth of the first surface contact with each tissue.
    pub fn first_contacts(&self) -> BTreeMap<TissueLabel, f64> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            for e in &s.events {
                if let Event::SurfaceContact { tissue } = e {
                    out.entry(*tissue).or_insert(s.depth);
                }
            }
        }
        out
    }

    pub fn bone_blocked(&self) -> bool {
        self.samples.iter().any(|s| s.phase == Phase::BoneBlocked)
    }

    pub fn max_force(&self) -> f64 {
        self.samples.iter().map(|s| s.force).fold(0.0, f64::max)
    }

    const MAGIC: &'static [u8; 4] = b"NSFT";
    const VERSION: u32 = 1;

    /// Little-endian binary layout, see `docs/formats.md`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + self.samples.len() * 20);
        b.extend_from_slice(Self::MAGIC);
        b.extend_from_slice(&Self::VERSION.to_le_bytes());
        b.extend_from_slice(&self.path_id.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            b.extend_from_slice(&s.depth.to_le_bytes());
            b.extend_from_slice(&s.force.to_le_bytes());
            b.push(s.label.code());
            b.push(s.phase.code());
            b.push(s.events.len() as u8);
            for e in &s.events {
                let (x, y) = event_operands(e);
                b.extend_from_slice(&[e.code(), x, y]);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EvalError> {
        let mut r = bytes;
        let bad = |m: &str| EvalError::BadTrace(m.to_string());
        let mut take = |n: usize| -> Result<&[u8], EvalError> {
            if r.len() < n {
                return Err(EvalError::BadTrace("truncated".into()));
            }
            let (h, t) = r.split_at(n);
            r = t;
            Ok(h)
        };
        if take(4)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let path_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let step = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let depth = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let force = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let h = take(3)?;
            let label = TissueLabel::from_code(h[0]).ok_or_else(|| bad("bad label code"))?;
            let phase = Phase::from_code(h[1]).ok_or_else(|| bad("bad phase code"))?;
            let ne = h[2] as usize;
            let mut events = Vec::with_capacity(ne);
            for _ in 0..ne {
                let e = take(3)?;
                events.push(decode_event(e[0], e[1], e[2]).ok_or_else(|| bad("bad event"))?);
            }
            samples.push(TraceSample {
                depth,
                force,
                label,
                phase,
                events,
            });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(ForceTrace {
            path_id,
            step,
            samples,
        })
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// `depth,force,label,phase,events` with events `;`-separated.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "depth,force,label,phase,events")?;
        for s in &self.samples {
            let ev: Vec<String> = s.events.iter().map(event_name).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                s.depth,
                s.force,
                s.label,
                s.phase.name(),
                ev.join(";")
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn event_operands(e: &Event) -> (u8, u8) {
    match e {
        Event::SurfaceContact { tissue } | Event::Puncture { tissue } | Event::RiskContact { tissue } => {
            (tissue.code(), 255)
        }
        Event::TissueTransition { from, to } => (from.code(), to.code()),
        _ => (255, 255),
    }
}

fn decode_event(code: u8, x: u8, y: u8) -> Option<Event> {
    let l = |c| TissueLabel::from_code(c);
    Some(match code {
        0 => Event::SurfaceContact { tissue: l(x)? },
        1 => Event::Puncture { tissue: l(x)? },
        2 => Event::TissueTransition {
            from: l(x)?,
            to: l(y)?,
        },
        3 => Event::RiskContact { tissue: l(x)? },
        4 => Event::TargetReached,
        5 => Event::BodyExit,
        6 => Event::BoneBlocked,
        _ => return None,
    })
}

pub fn event_name(e: &Event) -> String {
    match e {
        Event::SurfaceContact { tissue } => format!("surface_contact:{tissue}"),
        Event::Puncture { tissue } => format!("puncture:{tissue}"),
        Event::TissueTransition { from, to } => format!("transition:{from}>{to}"),
        Event::RiskContact { tissue } => format!("risk_contact:{tissue}"),
        Event::TargetReached => "target_reached".into(),
        Event::BodyExit => "body_exit".into(),
        Event::BoneBlocked => "bone_blocked".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub tissue: TissueLabel,
    pub ref_depth: f64,
    pub test_depth: f64,
}

impl Crossing {
    pub fn distance(&self) -> f64 {
        (self.test_depth - self.ref_depth).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub path_id: u64,
    pub samples: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Samples with bit-identical force, %.
    pub pct_identical: f64,
    pub identical: usize,
    pub crossings: Vec<Crossing>,
    /// Tissues contacted in only one of the traces.
    pub unmatched: Vec<TissueLabel>,
    pub msd: f64,
    pub hsd: f64,
    pub ref_bone_blocked: bool,
    pub test_bone_blocked: bool,
}

pub fn compare(reference: &ForceTrace, test: &ForceTrace) -> Result<PathMetrics, EvalError> {
    let n = reference.samples.len();
    if n != test.samples.len() || reference.step.to_bits() != test.step.to_bits() {
        return Err(EvalError::LengthMismatch(n, test.samples.len()));
    }
    let mut sq = 0.0;
    let mut mae: f64 = 0.0;
    let mut identical = 0usize;
    for (a, b) in reference.samples.iter().zip(&test.samples) {
        let d = a.force - b.force;
        sq += d * d;
        mae = mae.max(d.abs());
        if a.force.to_bits() == b.force.to_bits() {
            identical += 1;
        }
    }
    let (rmse, pct) = if n == 0 {
        (0.0, 100.0)
    } else {
        ((sq / n as f64).sqrt().min(mae), 100.0 * identical as f64 / n as f64)
    };

    let rc = reference.first_contacts();
    let tc = test.first_contacts();
    let mut crossings = Vec::new();
    let mut unmatched = Vec::new();
    for (&tissue, &rd) in &rc {
        match tc.get(&tissue) {
            Some(&td) => crossings.push(Crossing {
                tissue,
                ref_depth: rd,
                test_depth: td,
            }),
            None => unmatched.push(tissue),
        }
    }
    unmatched.extend(tc.keys().filter(|t| !rc.contains_key(t)));
    unmatched.sort();
    let (msd, hsd) = if crossings.is_empty() {
        (0.0, 0.0)
    } else {
        let d: Vec<f64> = crossings.iter().map(Crossing::distance).collect();
        (
            d.iter().sum::<f64>() / d.len() as f64,
            d.iter().cloned().fold(0.0, f64::max),
        )
    };
    Ok(PathMetrics {
        path_id: reference.path_id,
        samples: n,
        rmse,
        mae,
        pct_identical: pct,
        identical,
        crossings,
        unmatched,
        msd: msd.min(hsd),
        hsd,
        ref_bone_blocked: reference.bone_blocked(),
        test_bone_blocked: test.bone_blocked(),
    })
}

/// Weber fraction `dS/S` in percent.
pub fn jnd_percent(s: f64, ds: f64) -> Result<f64, EvalError> {
    if !(s > 0.0) {
        return Err(EvalError::ZeroReference(s));
    }
    Ok(((s + ds) - s) / s * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JndConfig {
    pub force_threshold: f64,
    pub distance_band: [f64; 2],
    pub reference_force: f64,
    pub reference_length: f64,
}

impl Default for JndConfig {
    fn default() -> Self {
        JndConfig {
            force_threshold: 0.145,
            distance_band: [2.0, 3.0],
            reference_force: 0.8,
            reference_length: 28.0,
        }
    }
}

impl JndConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let all_pos = [
            self.force_threshold,
            self.distance_band[0],
            self.distance_band[1],
            self.reference_force,
            self.reference_length,
        ]
        .iter()
        .all(|&v| v > 0.0 && v.is_finite());
        if !all_pos || self.distance_band[0] >= self.distance_band[1] {
            return Err(EvalError::BadConfig("JND values must be positive with band low < high".into()));
        }
        Ok(())
    }
}

/// Outlier factor on the standard deviation.
pub const OUTLIER_SIGMAS: f64 = 2.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// `mean + 2.7 sd`.
    pub outlier_threshold: f64,
    pub outliers: usize,
    pub outlier_fraction: f64,
}

impl MetricStats {
    /// Order-independent: values are sorted before summation.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let sd = (dev.iter().sum::<f64>() / n).sqrt();
        let thr = mean + OUTLIER_SIGMAS * sd;
        let outliers = v.iter().filter(|&&x| x > thr).count();
        MetricStats {
            mean,
            sd,
            min: v[0],
            max: v[v.len() - 1],
            outlier_threshold: thr,
            outliers,
            outlier_fraction: outliers as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub paths: usize,
    pub rmse: MetricStats,
    pub mae: MetricStats,
    pub msd: MetricStats,
    pub hsd: MetricStats,
    /// Identical samples over all samples of the group, %.
    pub pct_identical: f64,
    pub mean_path_pct_identical: f64,
    /// Paths whose MAE can only come from the bone clamp (above half the
    /// device maximum; no other tissue force exceeds 3 N).
    pub mae_at_clamp: usize,
    pub test_bone_blocked: usize,
    pub ref_bone_blocked: usize,
    pub unmatched_crossings: usize,
    pub sub_jnd_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFlags {
    pub patient: String,
    pub path_id: u64,
    pub sub_jnd: bool,
    pub rmse_outlier: bool,
    pub mae_outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JndSummary {
    pub config: JndConfig,
    pub force_percent: f64,
    pub distance_percent_low: f64,
    pub distance_percent_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub pooled: GroupStats,
    pub per_patient: BTreeMap<String, GroupStats>,
    pub jnd: JndSummary,
    pub flags: Vec<PathFlags>,
}

/// A per-path result tagged with its patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient: String,
    pub metrics: PathMetrics,
}

fn is_sub_jnd(m: &PathMetrics, jnd: &JndConfig) -> bool {
    m.rmse <= jnd.force_threshold && m.msd <= jnd.distance_band[0]
}

fn group(items: &[&PathMetrics], jnd: &JndConfig, max_force: f64) -> GroupStats {
    let col = |f: fn(&PathMetrics) -> f64| items.iter().map(|m| f(m)).collect::<Vec<f64>>();
    let total: usize = items.iter().map(|m| m.samples).sum();
    let ident: usize = items.iter().map(|m| m.identical).sum();
    GroupStats {
        paths: items.len(),
        rmse: MetricStats::of(&col(|m| m.rmse)),
        mae: MetricStats::of(&col(|m| m.mae)),
        msd: MetricStats::of(&col(|m| m.msd)),
        hsd: MetricStats::of(&col(|m| m.hsd)),
        pct_identical: if total == 0 {
            100.0
        } else {
            100.0 * ident as f64 / total as f64
        },
        mean_path_pct_identical: MetricStats::of(&col(|m| m.pct_identical)).mean,
        mae_at_clamp: items.iter().filter(|m| m.mae > 0.5 * max_force).count(),
        test_bone_blocked: items.iter().filter(|m| m.test_bone_blocked).count(),
        ref_bone_blocked: items.iter().filter(|m| m.ref_bone_blocked).count(),
        unmatched_crossings: items.iter().map(|m| m.unmatched.len()).sum(),
        sub_jnd_paths: items.iter().filter(|m| is_sub_jnd(m, jnd)).count(),
    }
}

/// Pooled and per-patient statistics. Invariant under permutation of the input.
pub fn aggregate(metrics: &[PatientMetrics], jnd: &JndConfig) -> Result<StudySummary, EvalError> {
    aggregate_with_clamp(metrics, jnd, crate::engine::MAX_FORCE)
}

pub fn aggregate_with_clamp(
    metrics: &[PatientMetrics],
    jnd: &JndConfig,
    max_force: f64,
) -> Result<StudySummary, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    jnd.validate()?;
    let all: Vec<&PathMetrics> = metrics.iter().map(|m| &m.metrics).collect();
    let pooled = group(&all, jnd, max_force);
    let mut by_patient: BTreeMap<String, Vec<&PathMetrics>> = BTreeMap::new();
    for m in metrics {
        by_patient.entry(m.patient.clone()).or_default().push(&m.metrics);
    }
    let per_patient: BTreeMap<String, GroupStats> = by_patient
        .iter()
        .map(|(p, v)| (p.clone(), group(v, jnd, max_force)))
        .collect();
    let mut flags: Vec<PathFlags> = metrics
        .iter()
        .map(|m| {
            let g = &per_patient[&m.patient];
            PathFlags {
                patient: m.patient.clone(),
                path_id: m.metrics.path_id,
                sub_jnd: is_sub_jnd(&m.metrics, jnd),
                rmse_outlier: m.metrics.rmse > g.rmse.outlier_threshold,
                mae_outlier: m.metrics.mae > g.mae.outlier_threshold,
            }
        })
        .collect();
    flags.sort_by(|a, b| a.patient.cmp(&b.patient).then(a.path_id.cmp(&b.path_id)));
    Ok(StudySummary {
        pooled,
        per_patient,
        jnd: JndSummary {
            config: *jnd,
            force_percent: jnd_percent(jnd.reference_force, jnd.force_threshold)?,
            distance_percent_low: jnd_percent(jnd.reference_length, jnd.distance_band[0])?,
            distance_percent_high: jnd_percent(jnd.reference_length, jnd.distance_band[1])?,
        },
        flags,
    })
}

/// `patient,path_id,rmse,mae,pct_identical,msd,hsd,flags`.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[PatientMetrics], summary: &StudySummary) -> Result<(), EvalError> {
    let flags: BTreeMap<(&str, u64), &PathFlags> = summary
        .flags
        .iter()
        .map(|f| ((f.patient.as_str(), f.path_id), f))
        .collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "patient,path_id,rmse,mae,pct_identical,msd,hsd,flags")?;
    for r in rows {
        let m = &r.metrics;
        let mut fl = Vec::new();
        if let Some(f) = flags.get(&(r.patient.as_str(), m.path_id)) {
            if f.sub_jnd {
                fl.push("sub_jnd".to_string());
            }
            if f.rmse_outlier {
                fl.push("rmse_outlier".into());
            }
            if f.mae_outlier {
                fl.push("mae_outlier".into());
            }
        }
        if !m.unmatched.is_empty() {
            let u: Vec<String> = m.unmatched.iter().map(|t| t.to_string()).collect();
            fl.push(format!("unmatched:{}", u.join("+")));
        }
        if m.test_bone_blocked {
            fl.push("test_bone_blocked".into());
        }
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.patient,
            m.path_id,
            m.rmse,
            m.mae,
            m.pct_identical,
            m.msd,
            m.hsd,
            fl.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(forces: &[f64], contacts: &[(usize, TissueLabel)]) -> ForceTrace {
        let mut samples: Vec<TraceSample> = forces
            .iter()
            .enumerate()
            .map(|(i, &f)| TraceSample {
                depth: (i + 1) as f64 * 0.09,
                force: f,
                label: TissueLabel::Liver,
                phase: Phase::Pass,
                events: vec![],
            })
            .collect();
        for &(i, t) in contacts {
            samples[i].events.push(Event::SurfaceContact { tissue: t });
        }
        ForceTrace {
            path_id: 1,
            step: 0.09,
            samples,
        }
    }

    #[test]
    fn identical_traces() {
        let t = trace(&[0.0, 0.7, 0.9, 0.9], &[(1, TissueLabel::Skin)]);
        let m = compare(&t, &t).unwrap();
        assert_eq!((m.rmse, m.mae, m.pct_identical, m.msd, m.hsd), (0.0, 0.0, 100.0, 0.0, 0.0));
    }

    #[test]
    fn single_differing_sample() {
        let a = trace(&vec![0.5; 1000], &[]);
        let mut f = vec![0.5; 1000];
        f[500] = 1.5;
        let b = trace(&f, &[]);
        let m = compare(&a, &b).unwrap();
        assert!((m.rmse - 1.0 / 1000f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.mae, 1.0);
        assert!((m.pct_identical - 99.9).abs() < 1e-9);
    }

    #[test]
    fn crossing_distances_and_unmatched() {
        let mut a = trace(&vec![0.0; 400], &[]);
        let mut b = trace(&vec![0.0; 400], &[]);
        a.samples[0].depth = 30.0;
        a.samples[0].events.push(Event::SurfaceContact { tissue: TissueLabel::Skin });
        b.samples[0].depth = 31.5;
        b.samples[0].events.push(Event::SurfaceContact { tissue: TissueLabel::Skin });
        b.samples[5].events.push(Event::SurfaceContact { tissue: TissueLabel::Bone });
        let m = compare(&a, &b).unwrap();
        assert!((m.msd - 1.5).abs() < 1e-12);
        assert_eq!(m.unmatched, vec![TissueLabel::Bone]);
        let short = trace(&[0.0; 3], &[]);
        assert!(matches!(compare(&a, &short), Err(EvalError::LengthMismatch(400, 3))));
    }

    #[test]
    fn jnd_values() {
        assert!((jnd_percent(0.8, 0.145).unwrap() - 18.125).abs() < 1e-9);
        assert!((jnd_percent(28.0, 3.0).unwrap() - 10.714285714285714).abs() < 1e-9);
        assert_eq!(jnd_percent(0.8, 0.0).unwrap(), 0.0);
        assert!(matches!(jnd_percent(0.0, 1.0), Err(EvalError::ZeroReference(_))));
    }

    fn pm(patient: &str, id: u64, rmse: f64, mae: f64) -> PatientMetrics {
        PatientMetrics {
            patient: patient.into(),
            metrics: PathMetrics {
                path_id: id,
                samples: 100,
                rmse,
                mae,
                pct_identical: if mae == 0.0 { 100.0 } else { 90.0 },
                identical: if mae == 0.0 { 100 } else { 90 },
                crossings: vec![],
                unmatched: vec![],
                msd: 0.0,
                hsd: 0.0,
                ref_bone_blocked: false,
                test_bone_blocked: false,
            },
        }
    }

    #[test]
    fn aggregate_zero_and_single() {
        let jnd = JndConfig::default();
        let s = aggregate(&[pm("a", 0, 0.0, 0.0), pm("a", 1, 0.0, 0.0)], &jnd).unwrap();
        assert_eq!((s.pooled.rmse.mean, s.pooled.rmse.sd, s.pooled.rmse.outlier_fraction), (0.0, 0.0, 0.0));
        let s = aggregate(&[pm("a", 0, 0.3, 1.0)], &jnd).unwrap();
        assert_eq!((s.pooled.mae.sd, s.pooled.mae.outlier_fraction), (0.0, 0.0));
        assert!(matches!(aggregate(&[], &jnd), Err(EvalError::EmptyInput)));
        assert!((s.jnd.force_percent - 18.125).abs() < 1e-9);
    }

    #[test]
    fn outliers_beyond_two_point_seven_sigma() {
        let mut v: Vec<PatientMetrics> = (0..99).map(|i| pm("p", i, 0.1, 0.5)).collect();
        v.push(pm("p", 99, 3.0, 5.0));
        let s = aggregate(&v, &JndConfig::default()).unwrap();
        assert_eq!(s.pooled.rmse.outliers, 1);
        assert!((s.pooled.rmse.outlier_fraction - 0.01).abs() < 1e-12);
        assert!(s.flags.iter().find(|f| f.path_id == 99).unwrap().mae_outlier);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            vals in prop::collection::vec((0.0f64..2.0, 0.0f64..5.0, 0usize..3), 1..40),
            seed in any::<u64>(),
        ) {
            let items: Vec<PatientMetrics> = vals.iter().enumerate()
                .map(|(i, &(r, m, p))| pm(&format!("p{p}"), i as u64, r.min(m), m)).collect();
            let mut shuffled = items.clone();
            // deterministic shuffle
            let mut s = seed | 1;
            for i in (1..shuffled.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                shuffled.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let jnd = JndConfig::default();
            prop_assert_eq!(aggregate(&items, &jnd).unwrap(), aggregate(&shuffled, &jnd).unwrap());
        }

        #[test]
        fn compare_invariants(a in prop::collection::vec(0.0f64..3.0, 1..200), noise in prop::collection::vec(prop::option::of(-1.0f64..1.0), 200)) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| n.map_or(*x, |d| x + d)).collect();
            let m = compare(&trace(&a, &[]), &trace(&b, &[])).unwrap();
            prop_assert!(m.rmse <= m.mae);
            prop_assert!(m.msd <= m.hsd);
            prop_assert!((0.0..=100.0).contains(&m.pct_identical));
            if m.pct_identical == 100.0 {
                prop_assert!(m.rmse == 0.0 && m.mae == 0.0);
            }
        }
    }

    #[test]
    fn binary_round_trip() {
        let mut t = trace(&[0.0, 0.25, 0.7], &[(1, TissueLabel::Skin)]);
        t.samples[2].events.push(Event::TissueTransition {
            from: TissueLabel::Skin,
            to: TissueLabel::FatSoft,
        });
        t.samples[2].events.push(Event::BoneBlocked);
        let back = ForceTrace::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(ForceTrace::from_bytes(&bytes).is_err());
    }
}
