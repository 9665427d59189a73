//! The reference-versus-test study: plan on ground truth, steer every path
//! under both label providers, compare and aggregate.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::evaluation::{
    aggregate, compare, steer, EvalError, JndConfig, PatientMetrics, SteerConfig, StudySummary,
};
use crate::phantom::{degrade, generate, DegradeSpec, PhantomError, PhantomSpec};
use crate::planner::{plan, CandidatePath, PlanError, PlannerConfig};
use crate::tissue::{
    fit_thresholds, Classifier, HapticTable, LabelProvider, ThresholdFit, ThresholdSet, TissueError,
};
use crate::volume::{extract_body_mask, BodyMask, TissueLabel, VolumeError, VolumeHeader, VoxelVolume};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Tissue(#[from] TissueError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("case {0} produced no paths")]
    NoPaths(String),
}

/// Which provider the test arm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestArm {
    /// Key structures plus the intensity transfer function.
    #[default]
    Partial,
    /// The reference segmentation again.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub engine: EngineConfig,
    pub steer: SteerConfig,
    pub planner: PlannerConfig,
    pub jnd: JndConfig,
    pub table: HapticTable,
    /// Replaces the fitted thresholds when set.
    pub thresholds: Option<ThresholdSet>,
    /// Specific-minus-sensitive bone threshold gap, HU.
    pub bone_offset_hu: f64,
    /// Body mask intensity threshold, HU.
    pub body_threshold_hu: f64,
    pub test_arm: TestArm,
    /// Keep only the best `n` paths per case.
    pub max_paths: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            engine: EngineConfig::default(),
            steer: SteerConfig::default(),
            planner: PlannerConfig::default(),
            jnd: JndConfig::default(),
            table: HapticTable::default(),
            thresholds: None,
            bone_offset_hu: 100.0,
            body_threshold_hu: -500.0,
            test_arm: TestArm::Partial,
            max_paths: None,
        }
    }
}

/// One patient: ground-truth volume and the partial key-structure labels.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub volume: Arc<VoxelVolume>,
    pub partial: Vec<TissueLabel>,
}

impl Case {
    pub fn new(name: impl Into<String>, volume: VoxelVolume, partial: Vec<TissueLabel>) -> Result<Self, StudyError> {
        if partial.len() != volume.geometry.len() {
            return Err(TissueError::Config("partial label grid does not match the volume".into()).into());
        }
        Ok(Case {
            name: name.into(),
            volume: Arc::new(volume),
            partial,
        })
    }

    /// Writes `volume.json` (ground truth) and `partial.json`, which shares
    /// the intensity file and carries the key-structure labels.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf, StudyError> {
        let dir = dir.as_ref();
        let header = self.volume.save(dir, "volume")?;
        let codes: Vec<u8> = self.partial.iter().map(|l| l.code()).collect();
        fs::write(dir.join("partial.u8"), codes).map_err(VolumeError::from)?;
        let g = self.volume.geometry;
        let partial = VolumeHeader {
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            intensity_file: "volume.i16".into(),
            label_file: Some("partial.u8".into()),
        };
        fs::write(
            dir.join("partial.json"),
            serde_json::to_string_pretty(&partial).expect("header serializes"),
        )
        .map_err(VolumeError::from)?;
        Ok(header)
    }

    /// Reads a directory written by [`Case::save`]. A missing `partial.json`
    /// leaves every voxel to the transfer function.
    pub fn load(dir: impl AsRef<Path>, name: impl Into<String>) -> Result<Self, StudyError> {
        let dir = dir.as_ref();
        let volume = VoxelVolume::load(dir.join("volume.json"))?;
        let partial_path = dir.join("partial.json");
        let partial = if partial_path.exists() {
            let p = VoxelVolume::load(partial_path)?;
            if p.geometry != volume.geometry {
                return Err(TissueError::Config("partial labels do not match the volume grid".into()).into());
            }
            p.labels
        } else {
            vec![TissueLabel::Unlabeled; volume.geometry.len()]
        };
        Case::new(name, volume, partial)
    }

    /// Phantom ground truth with degraded key structures.
    pub fn phantom(name: impl Into<String>, spec: &PhantomSpec, degrade_spec: &DegradeSpec) -> Result<Self, StudyError> {
        let volume = generate(spec)?;
        let partial = degrade(&volume.labels, &volume.geometry, degrade_spec)?;
        Case::new(name, volume, partial)
    }
}

/// Both classifiers of a case plus its body mask and thresholds.
#[derive(Debug, Clone)]
pub struct Arms {
    pub body: Arc<BodyMask>,
    pub fit: Option<ThresholdFit>,
    pub thresholds: ThresholdSet,
    pub reference: Arc<Classifier>,
    pub test: Arc<Classifier>,
}

pub fn build_arms(case: &Case, cfg: &StudyConfig) -> Result<Arms, StudyError> {
    let body = Arc::new(extract_body_mask(&case.volume, cfg.body_threshold_hu)?);
    let (fit, thresholds) = match cfg.thresholds {
        Some(t) => {
            t.validate()?;
            (None, t)
        }
        None => {
            let f = fit_thresholds(&case.volume, cfg.bone_offset_hu)?;
            let t = f.thresholds;
            (Some(f), t)
        }
    };
    let reference = Arc::new(Classifier::new(
        case.volume.clone(),
        LabelProvider::full_segmentation(&case.volume),
        body.clone(),
        cfg.table.clone(),
    )?);
    let test = match cfg.test_arm {
        TestArm::Full => reference.clone(),
        TestArm::Partial => Arc::new(Classifier::new(
            case.volume.clone(),
            LabelProvider::partial(case.partial.clone(), thresholds),
            body.clone(),
            cfg.table.clone(),
        )?),
    };
    Ok(Arms {
        body,
        fit,
        thresholds,
        reference,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct CaseRun {
    pub patient: String,
    pub thresholds: ThresholdSet,
    pub fit: Option<ThresholdFit>,
    pub skin_voxels: usize,
    pub targets: usize,
    pub paths: Vec<CandidatePath>,
    pub metrics: Vec<PatientMetrics>,
}

pub fn run_case(case: &Case, cfg: &StudyConfig) -> Result<CaseRun, StudyError> {
    cfg.steer.validate()?;
    let arms = build_arms(case, cfg)?;
    let planned = plan(&case.volume, &arms.body, &cfg.planner)?;
    let mut paths = planned.paths;
    if let Some(n) = cfg.max_paths {
        paths.truncate(n);
    }
    let metrics = paths
        .par_iter()
        .map(|p| {
            let r = steer(p, arms.reference.clone(), &cfg.engine, &cfg.steer)?;
            let t = steer(p, arms.test.clone(), &cfg.engine, &cfg.steer)?;
            Ok(PatientMetrics {
                patient: case.name.clone(),
                metrics: compare(&r, &t)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(CaseRun {
        patient: case.name.clone(),
        thresholds: arms.thresholds,
        fit: arms.fit,
        skin_voxels: planned.skin_voxels,
        targets: planned.targets,
        paths,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub cases: Vec<CaseRun>,
    pub summary: StudySummary,
}

impl StudyOutput {
    pub fn metrics(&self) -> Vec<PatientMetrics> {
        self.cases.iter().flat_map(|c| c.metrics.iter().cloned()).collect()
    }
}

pub fn run_study(cases: &[Case], cfg: &StudyConfig) -> Result<StudyOutput, StudyError> {
    let runs = cases
        .iter()
        .map(|c| run_case(c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<PatientMetrics> = runs.iter().flat_map(|c| c.metrics.iter().cloned()).collect();
    if all.is_empty() {
        let name = cases.first().map_or_else(String::new, |c| c.name.clone());
        return Err(StudyError::NoPaths(name));
    }
    let summary = aggregate(&all, &cfg.jnd)?;
    Ok(StudyOutput { cases: runs, summary })
}
