use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use needlesim::planner::{plan, CandidatePath, PlanContext, PlanError};
use needlesim::study::{build_arms, Arms, Case, StudyConfig, StudyError};
use needlesim::volume::VoxelVolume;

/// A loaded volume with both label providers and, on first use, its
/// planning context and reference paths.
#[derive(Debug)]
pub struct VolumeEntry {
    pub name: String,
    pub case: Case,
    pub arms: Arms,
    pub config: StudyConfig,
    context: OnceLock<Result<PlanContext, String>>,
    paths: OnceLock<Result<Vec<CandidatePath>, String>>,
}

impl VolumeEntry {
    pub fn new(case: Case, config: StudyConfig) -> Result<Self, StudyError> {
        let arms = build_arms(&case, &config)?;
        Ok(VolumeEntry {
            name: case.name.clone(),
            case,
            arms,
            config,
            context: OnceLock::new(),
            paths: OnceLock::new(),
        })
    }

    pub fn volume(&self) -> &Arc<VoxelVolume> {
        &self.case.volume
    }

    pub fn plan_context(&self) -> Result<&PlanContext, String> {
        self.context
            .get_or_init(|| {
                PlanContext::new(&self.case.volume.labels, &self.arms.body, self.config.planner)
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Planner output on the ground truth, best first.
    pub fn reference_paths(&self) -> Result<&[CandidatePath], String> {
        self.paths
            .get_or_init(|| {
                plan(&self.case.volume, &self.arms.body, &self.config.planner)
                    .map(|o| o.paths)
                    .or_else(|e| match e {
                        PlanError::EmptyTarget | PlanError::NoSkin => Ok(Vec::new()),
                        e => Err(e.to_string()),
                    })
            })
            .as_ref()
            .map(Vec::as_slice)
            .map_err(Clone::clone)
    }
}

/// Read-only set of volumes shared by all sessions.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    volumes: BTreeMap<String, Arc<VolumeEntry>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: VolumeEntry) {
        self.volumes.insert(entry.name.clone(), Arc::new(entry));
    }

    pub fn get(&self, name: &str) -> Option<Arc<VolumeEntry>> {
        self.volumes.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.volumes.keys().cloned().collect()
    }
}
