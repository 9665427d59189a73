//! JSON messages exchanged over `/session`. Every message carries the
//! schema version in `v`.

use serde::{Deserialize, Serialize};

use needlesim::engine::{Event, Phase};
use needlesim::planner::{CandidatePath, SegmentScore};
use needlesim::volume::TissueLabel;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    #[default]
    Full,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Request {
    #[serde(rename = "session.start")]
    SessionStart {
        volume: String,
        #[serde(default)]
        provider: ProviderChoice,
    },
    #[serde(rename = "slice.get")]
    SliceGet {
        axis: Axis,
        index: usize,
        #[serde(default)]
        overlay: bool,
    },
    #[serde(rename = "entry.set")]
    EntrySet { point: [f64; 3], direction: [f64; 3] },
    #[serde(rename = "needle.advance")]
    NeedleAdvance { mm: f64 },
    #[serde(rename = "needle.retract")]
    NeedleRetract { mm: f64 },
    #[serde(rename = "attempt.finish")]
    AttemptFinish {},
    #[serde(rename = "paths.reference")]
    PathsReference {
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// An incoming message: `{"v": 1, "type": "...", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Envelope {
            v: PROTOCOL_VERSION,
            body,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    /// Red background.
    pub risk: bool,
    /// Green background.
    pub target: bool,
    pub bone_blocked: bool,
    pub exited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub depth: f64,
    pub force: f64,
}

/// Live needle state after a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleState {
    pub depth: f64,
    /// Force magnitude, N.
    pub force: f64,
    pub force_vector: [f64; 3],
    pub phase: Phase,
    pub tissue: TissueLabel,
    pub flags: Flags,
    /// Every engine sub-step of this command, in order.
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRun {
    pub row: usize,
    pub start: usize,
    pub len: usize,
    pub label: TissueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// HU mapped to 0 and 255.
    pub window: [f64; 2],
    /// Row-major 8-bit grey values, base64.
    pub pixels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<Vec<OverlayRun>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMatch {
    pub id: usize,
    pub q: f64,
    /// Entry plus target distance to the attempt's endpoints, mm.
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadState,
    OutOfBounds,
    UnknownVolume,
    BadMessage,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Reply {
    #[serde(rename = "session.started")]
    SessionStarted {
        session: u64,
        volume: String,
        provider: ProviderChoice,
        dims: [usize; 3],
        spacing: [f64; 3],
        step: f64,
    },
    #[serde(rename = "slice")]
    Slice(Slice),
    #[serde(rename = "state")]
    State(NeedleState),
    #[serde(rename = "score")]
    Score {
        entry_voxel: [usize; 3],
        tip_voxel: [usize; 3],
        score: SegmentScore,
        reference: Option<ReferenceMatch>,
    },
    #[serde(rename = "paths")]
    Paths { total: usize, paths: Vec<CandidatePath> },
    #[serde(rename = "error")]
    Error { kind: ErrorKind, message: String },
}
