use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::Vector3;
use thiserror::Error;

use needlesim::engine::{EngineError, Event, NeedleSession, StepResult};
use needlesim::planner::SegmentScore;
use needlesim::tissue::{Classifier, Role, TissueError};
use needlesim::volume::VolumeError;

use crate::protocol::{
    ErrorKind, Flags, NeedleState, ProviderChoice, ReferenceMatch, Reply, Request, Sample,
};
use crate::registry::{Registry, VolumeEntry};
use crate::slice;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("{0}")]
    BadState(String),
    #[error("{0}")]
    OutOfBounds(String),
    #[error("unknown volume {0:?}")]
    UnknownVolume(String),
    #[error("{0}")]
    BadMessage(String),
    #[error("{0}")]
    Internal(String),
}

impl TrainerError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TrainerError::BadState(_) => ErrorKind::BadState,
            TrainerError::OutOfBounds(_) => ErrorKind::OutOfBounds,
            TrainerError::UnknownVolume(_) => ErrorKind::UnknownVolume,
            TrainerError::BadMessage(_) => ErrorKind::BadMessage,
            TrainerError::Internal(_) => ErrorKind::Internal,
        }
    }

    pub fn into_reply(self) -> Reply {
        Reply::Error {
            kind: self.kind(),
            message: self.to_string(),
        }
    }
}

impl From<EngineError> for TrainerError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Tissue(TissueError::Volume(VolumeError::OutOfBounds { .. })) => {
                TrainerError::OutOfBounds(e.to_string())
            }
            EngineError::RetractBeyondEntry { .. } => TrainerError::OutOfBounds(e.to_string()),
            EngineError::NonPositiveStep(_) | EngineError::BadDirection => TrainerError::BadMessage(e.to_string()),
            e => TrainerError::Internal(e.to_string()),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Needle {
    session: NeedleSession,
    entry: Vector3<f64>,
    /// Net requested insertion, mm.
    requested: f64,
    /// Net engine steps taken.
    steps: i64,
}

/// One client's state. Messages are applied strictly in order.
pub struct TrainerSession {
    pub id: u64,
    registry: Arc<Registry>,
    volume: Option<Arc<VolumeEntry>>,
    provider: ProviderChoice,
    needle: Option<Needle>,
    /// Every state pushed since the entry was set.
    pub log: Vec<NeedleState>,
    pub last_score: Option<SegmentScore>,
}

impl TrainerSession {
    pub fn new(registry: Arc<Registry>) -> Self {
        TrainerSession {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            registry,
            volume: None,
            provider: ProviderChoice::Full,
            needle: None,
            log: Vec::new(),
            last_score: None,
        }
    }

    fn volume(&self) -> Result<&Arc<VolumeEntry>, TrainerError> {
        self.volume
            .as_ref()
            .ok_or_else(|| TrainerError::BadState("no session.start yet".into()))
    }

    fn classifier(&self) -> Result<Arc<Classifier>, TrainerError> {
        let v = self.volume()?;
        Ok(match self.provider {
            ProviderChoice::Full => v.arms.reference.clone(),
            ProviderChoice::Partial => v.arms.test.clone(),
        })
    }

    fn step(&self) -> Result<f64, TrainerError> {
        Ok(self.volume()?.config.steer.step)
    }

    /// Applies one request. Errors become `Reply::Error`.
    pub fn handle(&mut self, req: Request) -> Reply {
        self.try_handle(req).unwrap_or_else(TrainerError::into_reply)
    }

    pub fn try_handle(&mut self, req: Request) -> Result<Reply, TrainerError> {
        match req {
            Request::SessionStart { volume, provider } => {
                let v = self
                    .registry
                    .get(&volume)
                    .ok_or(TrainerError::UnknownVolume(volume))?;
                let g = v.volume().geometry;
                let step = v.config.steer.step;
                let name = v.name.clone();
                self.volume = Some(v);
                self.provider = provider;
                self.needle = None;
                self.log.clear();
                self.last_score = None;
                Ok(Reply::SessionStarted {
                    session: self.id,
                    volume: name,
                    provider,
                    dims: g.dims,
                    spacing: g.spacing,
                    step,
                })
            }
            Request::SliceGet { axis, index, overlay } => {
                let v = self.volume()?;
                slice::extract(v.volume(), axis, index, overlay, slice::DEFAULT_WINDOW)
                    .map(Reply::Slice)
                    .ok_or_else(|| TrainerError::OutOfBounds(format!("slice {index} outside the volume")))
            }
            Request::EntrySet { point, direction } => {
                let cls = self.classifier()?;
                let entry = Vector3::from(point);
                let dir = Vector3::from(direction);
                let session = NeedleSession::new(cls, entry, dir, self.volume()?.config.engine)?;
                self.needle = Some(Needle {
                    session,
                    entry,
                    requested: 0.0,
                    steps: 0,
                });
                self.log.clear();
                self.last_score = None;
                let state = self.state(&[], Vec::new())?;
                self.log.push(state.clone());
                Ok(Reply::State(state))
            }
            Request::NeedleAdvance { mm } | Request::NeedleRetract { mm } if !(mm >= 0.0 && mm.is_finite()) => {
                Err(TrainerError::BadMessage(format!("distance must be a finite mm >= 0, got {mm}")))
            }
            Request::NeedleAdvance { mm } => self.move_needle(mm),
            Request::NeedleRetract { mm } => self.move_needle(-mm),
            Request::AttemptFinish {} => self.finish(),
            Request::PathsReference { limit } => {
                let v = self.volume()?;
                let all = v.reference_paths().map_err(TrainerError::Internal)?;
                let n = limit.unwrap_or(50).min(all.len());
                Ok(Reply::Paths {
                    total: all.len(),
                    paths: all[..n].to_vec(),
                })
            }
        }
    }

    /// Sub-steps at exactly the configured step; the remainder is carried to
    /// the next command, so a sequence of commands replays a batch steer.
    fn move_needle(&mut self, delta: f64) -> Result<Reply, TrainerError> {
        let step = self.step()?;
        let g = self.volume()?.volume().geometry;
        let needle = self
            .needle
            .as_mut()
            .ok_or_else(|| TrainerError::BadState("no entry.set yet".into()))?;
        let requested = needle.requested + delta;
        let target = (requested / step + 1e-9).floor() as i64;
        if target < 0 {
            return Err(TrainerError::OutOfBounds("retraction past the entry point".into()));
        }
        // the grid is convex: checking the end point covers every sub-step
        let end = needle.entry + needle.session.direction() * (target as f64 * step);
        if target > needle.steps && !g.contains(&end) {
            return Err(TrainerError::OutOfBounds(format!("{delta} mm would leave the volume")));
        }
        let mut results = Vec::new();
        while needle.steps != target {
            let forward = needle.steps < target;
            let r = if forward {
                needle.session.advance(step)?
            } else {
                needle.session.retract(step)?
            };
            needle.steps += if forward { 1 } else { -1 };
            results.push(r);
        }
        needle.requested = requested;
        let events: Vec<Event> = results.iter().flat_map(|r| r.events.iter().copied()).collect();
        let state = self.state(&results, events)?;
        self.log.push(state.clone());
        Ok(Reply::State(state))
    }

    fn state(&self, results: &[StepResult], events: Vec<Event>) -> Result<NeedleState, TrainerError> {
        let needle = self.needle.as_ref().expect("entry set");
        let s = &needle.session;
        let cls = s
            .classifier()
            .classify(&s.tip(), s.fascia_passed())
            .map_err(|e| TrainerError::OutOfBounds(e.to_string()))?;
        let role = s.classifier().table.role_of(cls.label);
        let flags = Flags {
            risk: cls.risk
                || role == Some(Role::Risk)
                || events.iter().any(|e| matches!(e, Event::RiskContact { .. })),
            target: role == Some(Role::Target) || events.contains(&Event::TargetReached),
            bone_blocked: s.phase() == needlesim::engine::Phase::BoneBlocked,
            exited: s.exited_body(),
        };
        Ok(NeedleState {
            depth: s.depth(),
            force: s.force_magnitude(),
            force_vector: s.force().into(),
            phase: s.phase(),
            tissue: s.current_tissue(),
            flags,
            samples: results
                .iter()
                .map(|r| Sample {
                    depth: r.depth,
                    force: r.magnitude,
                })
                .collect(),
            events,
        })
    }

    /// Scores the executed straight trajectory from the entry point to the
    /// current tip with the planner's criteria.
    fn finish(&mut self) -> Result<Reply, TrainerError> {
        let v = self.volume()?.clone();
        let needle = self
            .needle
            .as_ref()
            .ok_or_else(|| TrainerError::BadState("no entry.set yet".into()))?;
        let g = v.volume().geometry;
        let snap = |p: &Vector3<f64>| g.nearest_voxel(p).map_err(|e| TrainerError::OutOfBounds(e.to_string()));
        let a = snap(&needle.entry)?;
        let b = snap(&needle.session.tip())?;
        let ctx = v.plan_context().map_err(TrainerError::Internal)?;
        let score = ctx.score(a, b);
        let reference = v
            .reference_paths()
            .map_err(TrainerError::Internal)?
            .iter()
            .map(|p| {
                let d = (Vector3::from(p.origin) - g.center(a)).norm() + (Vector3::from(p.target) - g.center(b)).norm();
                (d, p)
            })
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.id.cmp(&y.1.id)))
            .map(|(d, p)| ReferenceMatch {
                id: p.id,
                q: p.q,
                distance: d,
            });
        self.last_score = Some(score);
        Ok(Reply::Score {
            entry_voxel: a,
            tip_voxel: b,
            score,
            reference,
        })
    }
}
