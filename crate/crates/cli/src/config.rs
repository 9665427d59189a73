use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use needlesim::engine::EngineConfig;
use needlesim::evaluation::{JndConfig, SteerConfig, MAX_STEP};
use needlesim::phantom::{DegradeSpec, PhantomSpec};
use needlesim::planner::PlannerConfig;
use needlesim::study::{StudyConfig, TestArm};
use needlesim::tissue::{HapticTable, ThresholdSet};

use crate::error::CliError;

/// Everything a run depends on. Command-line flags override single fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ground-truth volume header.
    pub volume: Option<PathBuf>,
    /// Partial key-structure label header.
    pub partial: Option<PathBuf>,
    /// Threshold override file; thresholds are fitted per volume otherwise.
    pub thresholds: Option<PathBuf>,
    /// Haptic table override file.
    pub table: Option<PathBuf>,
    /// Phantom spec file; the built-in phantom otherwise.
    pub phantom: Option<PathBuf>,
    pub planner: PlannerConfig,
    pub step: f64,
    pub standoff: f64,
    pub a1_fraction: f64,
    pub bone_offset_hu: f64,
    pub body_threshold_hu: f64,
    /// Boundary displacement of generated partial labels, mm.
    pub sigma: f64,
    /// Generated patients when `study` has no input volume.
    pub patients: usize,
    pub test_arm: TestArm,
    pub max_paths: Option<usize>,
    pub jnd: JndConfig,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StudyConfig::default();
        RunConfig {
            volume: None,
            partial: None,
            thresholds: None,
            table: None,
            phantom: None,
            planner: s.planner,
            step: s.steer.step,
            standoff: s.steer.standoff,
            a1_fraction: s.engine.a1_fraction,
            bone_offset_hu: s.bone_offset_hu,
            body_threshold_hu: s.body_threshold_hu,
            sigma: DegradeSpec::default().sigma,
            patients: 1,
            test_arm: TestArm::Partial,
            max_paths: None,
            jnd: s.jnd,
            out: None,
            seed: PhantomSpec::default().seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.step > 0.0 && self.step <= MAX_STEP) {
            return Err(CliError::Config(format!("step {} outside (0, {MAX_STEP}]", self.step)));
        }
        if !(0.0..=1.0).contains(&self.planner.q_min) {
            return Err(CliError::Config(format!("q_min {} outside [0, 1]", self.planner.q_min)));
        }
        if self.patients == 0 {
            return Err(CliError::Config("patients must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steer(&self) -> SteerConfig {
        SteerConfig {
            step: self.step,
            standoff: self.standoff,
        }
    }

    pub fn study(&self) -> Result<StudyConfig, CliError> {
        self.validate()?;
        let table = match &self.table {
            Some(p) => HapticTable::load(p)?,
            None => HapticTable::default(),
        };
        let thresholds = self.thresholds.as_ref().map(ThresholdSet::load).transpose()?;
        Ok(StudyConfig {
            engine: EngineConfig {
                a1_fraction: self.a1_fraction,
                ..EngineConfig::default()
            },
            steer: self.steer(),
            planner: self.planner,
            jnd: self.jnd,
            table,
            thresholds,
            bone_offset_hu: self.bone_offset_hu,
            body_threshold_hu: self.body_threshold_hu,
            test_arm: self.test_arm,
            max_paths: self.max_paths,
        })
    }

    /// Phantom and degradation specs for patient `i`. Patient 0 with the
    /// default seed reproduces the built-in phantom exactly.
    pub fn phantom_specs(&self, i: usize) -> Result<(PhantomSpec, DegradeSpec), CliError> {
        let mut spec = match &self.phantom {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => PhantomSpec::default(),
        };
        let base = self.seed.wrapping_add(1000 * i as u64);
        spec.seed = base;
        let degrade = DegradeSpec {
            sigma: self.sigma,
            seed: base.wrapping_add(4),
            ..DegradeSpec::default()
        };
        Ok((spec, degrade))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (--out)".into()))
    }
}
