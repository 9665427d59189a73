//! Axial proxy-based needle force rendering.
//!
//! The tip moves along a straight trajectory `x(d) = origin + d * dir`. A
//! proxy point trails the tip on the same line and the rendered force is the
//! spring between the two. Phases per tissue: pre-puncture (proxy pinned at
//! the surface, non-linear spring ramp), post-puncture (single-step release to
//! the sustain level), pass (linear spring capped at `l_max = R/k`) and
//! transition (hand-off at the next label boundary).

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tissue::{Classification, Classifier, Role, TissueError, TissueParams};
use crate::volume::TissueLabel;

/// Device maximum axial force, N.
pub const MAX_FORCE: f64 = 22.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("design slope a1 = {a1} outside [0, k = {k}]")]
    BadDesignSlope { a1: f64, k: f64 },
    #[error("cannot build a puncture spring for an infinite cutting threshold")]
    InfiniteThreshold,
    #[error("cutting threshold {t_n} N is below the start level {a0} N")]
    ThresholdBelowStart { t_n: f64, a0: f64 },
    #[error("zero stiffness with positive sustain force")]
    ZeroStiffness,
    #[error("step must be positive and finite, got {0}")]
    NonPositiveStep(f64),
    #[error("cannot retract {step} mm from depth {depth} mm")]
    RetractBeyondEntry { depth: f64, step: f64 },
    #[error("trajectory direction must be a non-zero finite vector")]
    BadDirection,
    #[error("invalid engine config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tissue(#[from] TissueError),
}

/// `f(d) = a2 d² + a1 d + a0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpringModel {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

/// Pre-puncture spring that reaches `t_n` at the same displacement
/// `(t_n - a0)/k` as the linear spring of stiffness `k`.
pub fn make_spring(t_n: f64, a0: f64, k: f64, a1: f64) -> Result<SpringModel, EngineError> {
    if !(a1 >= 0.0 && a1 <= k) {
        return Err(EngineError::BadDesignSlope { a1, k });
    }
    if !t_n.is_finite() {
        return Err(EngineError::InfiniteThreshold);
    }
    if t_n < a0 {
        return Err(EngineError::ThresholdBelowStart { t_n, a0 });
    }
    if !(k > 0.0) {
        return Err(EngineError::ZeroStiffness);
    }
    if t_n == a0 {
        return Ok(SpringModel { a0, a1: k, a2: 0.0 });
    }
    Ok(SpringModel {
        a0,
        a1,
        a2: k * (k - a1) / (t_n - a0).abs(),
    })
}

#[inline]
pub fn eval_spring(s: &SpringModel, d: f64) -> f64 {
    s.a2 * d * d + s.a1 * d + s.a0
}

/// Maximum proxy lag in the pass phase, `R/k` (mm). Air gives 0.
pub fn l_max_of(p: &TissueParams) -> Result<f64, EngineError> {
    if p.stiffness > 0.0 {
        Ok(p.sustain / p.stiffness)
    } else if p.sustain == 0.0 {
        Ok(0.0)
    } else {
        Err(EngineError::ZeroStiffness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Pre-puncture design slope as a fraction of the tissue stiffness.
    pub a1_fraction: f64,
    pub max_force: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            a1_fraction: 0.0,
            max_force: MAX_FORCE,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.a1_fraction) {
            return Err(EngineError::BadConfig(format!(
                "a1_fraction {} outside [0, 1]",
                self.a1_fraction
            )));
        }
        if !(self.max_force > 0.0 && self.max_force.is_finite()) {
            return Err(EngineError::BadConfig("max_force must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    SurfaceContact { tissue: TissueLabel },
    Puncture { tissue: TissueLabel },
    TissueTransition { from: TissueLabel, to: TissueLabel },
    RiskContact { tissue: TissueLabel },
    TargetReached,
    BodyExit,
    BoneBlocked,
}

impl Event {
    pub fn code(&self) -> u8 {
        match self {
            Event::SurfaceContact { .. } => 0,
            Event::Puncture { .. } => 1,
            Event::TissueTransition { .. } => 2,
            Event::RiskContact { .. } => 3,
            Event::TargetReached => 4,
            Event::BodyExit => 5,
            Event::BoneBlocked => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub depth: f64,
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Tip in air outside the body.
    Free,
    PrePuncture,
    Pass,
    BoneBlocked,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Free => 0,
            Phase::PrePuncture => 1,
            Phase::Pass => 2,
            Phase::BoneBlocked => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Phase::Free,
            1 => Phase::PrePuncture,
            2 => Phase::Pass,
            3 => Phase::BoneBlocked,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Free => "free",
            Phase::PrePuncture => "pre_puncture",
            Phase::Pass => "pass",
            Phase::BoneBlocked => "bone_blocked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    pub depth: f64,
    pub force: Vector3<f64>,
    pub magnitude: f64,
    pub phase: Phase,
    /// Label under the tip after the step.
    pub label: TissueLabel,
    /// Internal air cavity under the tip.
    pub risk: bool,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Free,
    PrePuncture {
        anchor: f64,
        spring: SpringModel,
        tissue: TissueLabel,
        params: TissueParams,
        from: TissueLabel,
    },
    Pass {
        tissue: TissueLabel,
        params: TissueParams,
    },
    BoneBlocked {
        anchor: f64,
    },
}

/// A single needle insertion. Depths are mm along the trajectory from its
/// origin; the proxy is kept as a depth on the same line.
#[derive(Debug, Clone)]
pub struct NeedleSession {
    classifier: Arc<Classifier>,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    config: EngineConfig,
    depth: f64,
    proxy: f64,
    state: State,
    fascia_passed: bool,
    exited_body: bool,
    entered: [bool; 8],
    force: f64,
    force_sign: f64,
    events: Vec<LoggedEvent>,
}

impl NeedleSession {
    /// Places the tip at `origin`. If that point is already inside tissue the
    /// session starts in that tissue's pass phase with zero lag.
    pub fn new(
        classifier: Arc<Classifier>,
        origin: Vector3<f64>,
        direction: Vector3<f64>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) || !origin.iter().all(|c| c.is_finite()) {
            return Err(EngineError::BadDirection);
        }
        let dir = direction / n;
        let cls = classifier.classify(&origin, false)?;
        let state = match cls.label {
            TissueLabel::Air if !cls.risk => State::Free,
            TissueLabel::Bone => State::BoneBlocked { anchor: 0.0 },
            l => State::Pass {
                tissue: l,
                params: cls.params,
            },
        };
        let mut entered = [false; 8];
        if cls.label != TissueLabel::Air || cls.risk {
            entered[cls.label.code() as usize] = true;
        }
        let force = if let State::BoneBlocked { .. } = state {
            config.max_force
        } else {
            0.0
        };
        Ok(NeedleSession {
            classifier,
            origin,
            dir,
            config,
            depth: 0.0,
            proxy: 0.0,
            state,
            fascia_passed: false,
            exited_body: false,
            entered,
            force,
            force_sign: -1.0,
            events: Vec::new(),
        })
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.dir
    }

    pub fn tip(&self) -> Vector3<f64> {
        self.origin + self.dir * self.depth
    }

    pub fn proxy(&self) -> Vector3<f64> {
        self.origin + self.dir * self.proxy
    }

    pub fn proxy_depth(&self) -> f64 {
        self.proxy
    }

    pub fn phase(&self) -> Phase {
        match self.state {
            State::Free => Phase::Free,
            State::PrePuncture { .. } => Phase::PrePuncture,
            State::Pass { .. } => Phase::Pass,
            State::BoneBlocked { .. } => Phase::BoneBlocked,
        }
    }

    /// Tissue whose mechanics currently apply.
    pub fn current_tissue(&self) -> TissueLabel {
        match self.state {
            State::Free => TissueLabel::Air,
            State::PrePuncture { tissue, .. } | State::Pass { tissue, .. } => tissue,
            State::BoneBlocked { .. } => TissueLabel::Bone,
        }
    }

    pub fn current_params(&self) -> TissueParams {
        match self.state {
            State::Free => TissueParams::ZERO,
            State::PrePuncture { params, .. } | State::Pass { params, .. } => params,
            State::BoneBlocked { .. } => self
                .classifier
                .table
                .params_of(TissueLabel::Bone)
                .unwrap_or(TissueParams::ZERO),
        }
    }

    /// Spring of the running pre-puncture phase.
    pub fn spring(&self) -> Option<SpringModel> {
        match self.state {
            State::PrePuncture { spring, .. } => Some(spring),
            _ => None,
        }
    }

    /// Surface point pinned during pre-puncture or at a bone contact.
    pub fn surface_anchor(&self) -> Option<Vector3<f64>> {
        match self.state {
            State::PrePuncture { anchor, .. } | State::BoneBlocked { anchor } => {
                Some(self.origin + self.dir * anchor)
            }
            _ => None,
        }
    }

    pub fn fascia_passed(&self) -> bool {
        self.fascia_passed
    }

    pub fn exited_body(&self) -> bool {
        self.exited_body
    }

    pub fn force_magnitude(&self) -> f64 {
        self.force
    }

    pub fn force(&self) -> Vector3<f64> {
        self.dir * (self.force_sign * self.force)
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn classifier(&self) -> &Arc<Classifier> {
        &self.classifier
    }

    fn classify_tip(&self, depth: f64) -> Result<Classification, EngineError> {
        let pos = self.origin + self.dir * depth;
        Ok(self.classifier.classify(&pos, self.fascia_passed)?)
    }

    fn l_max(&self, p: &TissueParams) -> Result<f64, EngineError> {
        l_max_of(p)
    }

    /// Moves the tip `step` mm forward and resolves the phases.
    pub fn advance(&mut self, step: f64) -> Result<StepResult, EngineError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(EngineError::NonPositiveStep(step));
        }
        let depth = self.depth + step;
        // classify first so a failed step leaves the session untouched
        let mut cls = self.classify_tip(depth)?;
        self.depth = depth;
        let mut events = Vec::new();

        match self.state {
            State::Free => {
                if cls.label == TissueLabel::Air && !cls.risk {
                    self.proxy = depth;
                    self.set_force(0.0, -1.0);
                } else {
                    self.enter(&cls, TissueLabel::Air, 0.0, &mut events)?;
                }
            }
            State::BoneBlocked { .. } => {
                self.set_force(self.config.max_force, -1.0);
            }
            State::Pass { tissue, params } => {
                if tissue == TissueLabel::Bone && cls.label == TissueLabel::Bone {
                    self.state = State::BoneBlocked { anchor: depth };
                    self.proxy = depth;
                    events.push(Event::BoneBlocked);
                    self.set_force(self.config.max_force, -1.0);
                } else if cls.label == tissue && !(tissue == TissueLabel::Air && !cls.risk) {
                    self.pass_update(&params)?;
                } else {
                    self.enter(&cls, tissue, params.sustain, &mut events)?;
                }
            }
            State::PrePuncture {
                anchor,
                spring,
                tissue,
                params,
                from,
            } => {
                if cls.label == TissueLabel::Bone {
                    self.enter(&cls, tissue, params.sustain, &mut events)?;
                } else {
                    let f = eval_spring(&spring, depth - anchor);
                    if f > params.cut_threshold {
                        events.push(Event::Puncture { tissue });
                        events.push(Event::TissueTransition { from, to: tissue });
                        if tissue == TissueLabel::Fascia && !self.fascia_passed {
                            self.fascia_passed = true;
                            cls = self.classify_tip(depth)?;
                        }
                        self.state = State::Pass { tissue, params };
                        self.proxy = depth - self.l_max(&params)?;
                        self.set_force(params.sustain, -1.0);
                        if cls.label != tissue {
                            self.enter(&cls, tissue, params.sustain, &mut events)?;
                        }
                    } else {
                        self.proxy = anchor;
                        self.set_force(f, -1.0);
                    }
                }
            }
        }
        Ok(self.finish(cls, events))
    }

    /// Tip enters the tissue of `cls` from `from`, whose sustain level was `r_prev`.
    fn enter(
        &mut self,
        cls: &Classification,
        from: TissueLabel,
        r_prev: f64,
        events: &mut Vec<Event>,
    ) -> Result<(), EngineError> {
        let label = cls.label;
        let depth = self.depth;
        if label == TissueLabel::Air {
            if cls.risk {
                events.push(Event::TissueTransition { from, to: label });
                if self.first_entry(label) {
                    events.push(Event::RiskContact { tissue: label });
                }
                self.state = State::Pass {
                    tissue: label,
                    params: cls.params,
                };
            } else {
                if !matches!(self.state, State::Free) {
                    events.push(Event::BodyExit);
                    self.exited_body = true;
                }
                self.state = State::Free;
            }
            self.proxy = depth;
            self.set_force(0.0, -1.0);
            return Ok(());
        }

        events.push(Event::SurfaceContact { tissue: label });
        let first = self.first_entry(label);
        let role = self.classifier.table.role_of(label);
        if first && role == Some(Role::Risk) {
            events.push(Event::RiskContact { tissue: label });
        }
        if first && role == Some(Role::Target) {
            events.push(Event::TargetReached);
        }

        let p = cls.params;
        if label == TissueLabel::Bone || !p.cut_threshold.is_finite() {
            events.push(Event::BoneBlocked);
            self.state = State::BoneBlocked { anchor: depth };
            self.proxy = depth;
            self.set_force(self.config.max_force, -1.0);
        } else if p.cut_threshold <= r_prev {
            // the surface is cut immediately
            events.push(Event::TissueTransition { from, to: label });
            if label == TissueLabel::Fascia {
                self.fascia_passed = true;
            }
            self.state = State::Pass {
                tissue: label,
                params: p,
            };
            self.proxy = depth - self.l_max(&p)?;
            self.set_force(p.sustain, -1.0);
        } else {
            let spring = make_spring(
                p.cut_threshold,
                r_prev,
                p.stiffness,
                self.config.a1_fraction * p.stiffness,
            )?;
            self.state = State::PrePuncture {
                anchor: depth,
                spring,
                tissue: label,
                params: p,
                from,
            };
            self.proxy = depth;
            self.set_force(spring.a0, -1.0);
        }
        Ok(())
    }

    fn first_entry(&mut self, label: TissueLabel) -> bool {
        let slot = &mut self.entered[label.code() as usize];
        let first = !*slot;
        *slot = true;
        first
    }

    /// Pass mechanics: linear spring with the proxy lag capped at `l_max`.
    fn pass_update(&mut self, params: &TissueParams) -> Result<(), EngineError> {
        let l_max = self.l_max(params)?;
        let lag = self.proxy - self.depth;
        let sign = if lag > 0.0 { 1.0 } else { -1.0 };
        if lag.abs() >= l_max {
            self.proxy = self.depth + sign * l_max;
            self.set_force(params.sustain, sign);
        } else {
            self.set_force((params.stiffness * lag.abs()).min(params.sustain), sign);
        }
        Ok(())
    }

    fn set_force(&mut self, magnitude: f64, sign: f64) {
        self.force = magnitude.min(self.config.max_force);
        self.force_sign = sign;
    }

    fn finish(&mut self, cls: Classification, events: Vec<Event>) -> StepResult {
        for &event in &events {
            self.events.push(LoggedEvent {
                depth: self.depth,
                event,
            });
        }
        StepResult {
            depth: self.depth,
            force: self.force(),
            magnitude: self.force,
            phase: self.phase(),
            label: cls.label,
            risk: cls.risk,
            events,
        }
    }

    /// Pulls the tip `step` mm back. Only pass mechanics apply, with the
    /// proxy ahead of the tip; no puncture happens on the way out.
    pub fn retract(&mut self, step: f64) -> Result<StepResult, EngineError> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(EngineError::NonPositiveStep(step));
        }
        if step > self.depth + 1e-9 {
            return Err(EngineError::RetractBeyondEntry {
                depth: self.depth,
                step,
            });
        }
        let depth = (self.depth - step).max(0.0);
        let cls = self.classify_tip(depth)?;
        self.depth = depth;
        let mut events = Vec::new();

        let current = match self.state {
            State::Pass { tissue, params } => Some((tissue, params)),
            State::PrePuncture { .. } | State::BoneBlocked { .. } => {
                self.proxy = depth;
                None
            }
            State::Free => None,
        };

        if cls.label == TissueLabel::Air && !cls.risk {
            if !matches!(self.state, State::Free) {
                events.push(Event::BodyExit);
                self.exited_body = true;
            }
            self.state = State::Free;
            self.proxy = depth;
            self.set_force(0.0, 1.0);
            return Ok(self.finish(cls, events));
        }

        match current {
            Some((tissue, _)) if tissue == cls.label => {}
            Some((tissue, _)) => {
                events.push(Event::TissueTransition {
                    from: tissue,
                    to: cls.label,
                });
            }
            None => {
                if matches!(self.state, State::Free) {
                    self.proxy = depth;
                }
            }
        }
        self.state = State::Pass {
            tissue: cls.label,
            params: cls.params,
        };
        self.pass_update(&cls.params)?;
        Ok(self.finish(cls, events))
    }
}
