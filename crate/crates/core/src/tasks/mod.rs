//! Task archetypes: recognition (AR), state change (OSCC), keyframe (PNR),
//! anticipation (LTA) and localization (MQ).
//!
//! Every task owns a neck that projects backbone nodes into its feature
//! space and a head that produces task outputs. Segment-level tasks read
//! features aligned to annotated spans on the finest stage; localization
//! reads per-node features on every stage.

mod align;
mod decode;
mod heads;
mod metrics;
mod neck;

pub use align::{align, align_indices, align_many};
pub use decode::{decode_localization, nms, tiou, Detection, Interval};
pub use heads::{
    head_forward, init_head, softmax_rows, task_loss, HeadInput, HeadOutput, LocalizationTargets,
    Targets,
};
pub use metrics::{
    argmax, average_precision, edit_distance, mean_average_precision, metric,
    normalized_edit_distance, top1_accuracy, GroundTruth, MetricRecord, Predictions,
    TIOU_THRESHOLDS,
};
pub use neck::{init_neck, neck_forward};

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    Recognition,
    StateChange,
    Keyframe,
    Anticipation,
    Localization,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Recognition,
        TaskKind::StateChange,
        TaskKind::Keyframe,
        TaskKind::Anticipation,
        TaskKind::Localization,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Recognition => "ar",
            TaskKind::StateChange => "oscc",
            TaskKind::Keyframe => "pnr",
            TaskKind::Anticipation => "lta",
            TaskKind::Localization => "mq",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::Validation(format!("unknown task {id:?}")))
    }

    /// Whether the task consumes every backbone stage rather than the finest.
    pub fn multi_stage(self) -> bool {
        self == TaskKind::Localization
    }

    /// Whether the task reads span-aligned features.
    pub fn aligned(self) -> bool {
        matches!(
            self,
            TaskKind::Recognition | TaskKind::StateChange | TaskKind::Anticipation
        )
    }
}

impl core::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action {
    pub verb: u32,
    pub noun: u32,
}

impl Action {
    pub fn new(verb: u32, noun: u32) -> Self {
        Action { verb, noun }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub verbs: usize,
    pub nouns: usize,
    /// Localization class count.
    pub classes: usize,
    /// Anticipation horizon.
    pub horizon: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("{}: {what} must be positive", self.kind)));
        match self.kind {
            TaskKind::Recognition if self.verbs == 0 || self.nouns == 0 => bad("verb and noun counts"),
            TaskKind::Anticipation if self.verbs == 0 || self.nouns == 0 => bad("verb and noun counts"),
            TaskKind::Anticipation if self.horizon == 0 => bad("horizon"),
            TaskKind::Localization if self.classes == 0 => bad("class count"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Action(Action),
    StateChange(bool),
    Keyframe(f64),
    Future(Vec<Action>),
    Class(u32),
}

/// A temporally grounded annotation `(start, end, label)` in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAnnotation {
    pub start: f64,
    pub end: f64,
    pub label: Label,
}

impl SegmentAnnotation {
    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        if !(self.start < self.end) {
            return Err(Error::Validation(format!(
                "annotation start {} must precede end {}",
                self.start, self.end
            )));
        }
        let ok = match (&self.label, spec.kind) {
            (Label::Action(a), TaskKind::Recognition) => {
                (a.verb as usize) < spec.verbs && (a.noun as usize) < spec.nouns
            }
            (Label::StateChange(_), TaskKind::StateChange) => true,
            (Label::Keyframe(t), TaskKind::Keyframe) => *t >= self.start && *t <= self.end,
            (Label::Future(f), TaskKind::Anticipation) => {
                f.len() == spec.horizon
                    && f.iter()
                        .all(|a| (a.verb as usize) < spec.verbs && (a.noun as usize) < spec.nouns)
            }
            (Label::Class(c), TaskKind::Localization) => (*c as usize) < spec.classes,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "annotation {:?} does not fit task {}",
                self.label, spec.kind
            )))
        }
    }
}
