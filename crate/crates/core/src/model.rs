//! The full model: shared backbone, per-task necks and heads, and the
//! novel-task path through the backpack.
//!
//! Parameters live under `backbone.*`, `neck.{task}.*`, `head.{task}.*`
//! (with `head.{novel}.via_{support}.*` for logits fusion) and
//! `backpack.{support}.m{layer}.*`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{backbone_forward, BackboneConfig, StageOutput};
use crate::backpack::{fuse_features, interact, InteractionConfig, Neighbor, PrototypeSet};
use crate::data::{LabelSpace, Video};
use crate::diffcore::{ParameterStore, Session, Tape, Tensor, Var};
use crate::rng::Key;
use crate::tasks::{
    align_indices, align_many, argmax, decode_localization, head_forward, init_head, init_neck,
    neck_forward, nms, softmax_rows, Detection, GroundTruth, HeadInput, HeadOutput, Interval, Label,
    LocalizationTargets, Predictions, TaskKind, Targets,
};
use crate::tgraph::Topology;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub labels: LabelSpace,
}

pub fn neck_prefix(k: TaskKind) -> String {
    format!("neck.{k}")
}

pub fn head_prefix(k: TaskKind) -> String {
    format!("head.{k}")
}

pub fn via_prefix(novel: TaskKind, support: TaskKind) -> String {
    format!("head.{novel}.via_{support}")
}

/// Adds a task's neck and head.
pub fn init_task(store: &mut ParameterStore, key: Key, cfg: &ModelConfig, kind: TaskKind) -> Result<()> {
    let d = cfg.backbone.dim;
    init_neck(store, key, &neck_prefix(kind), d)?;
    init_head(store, key, &head_prefix(kind), &cfg.labels.spec(kind), d)
}

/// Several videos joined into one disjoint-union graph.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// Dataset index and video, in node order.
    pub videos: Vec<(usize, &'a Video)>,
    pub features: Tensor,
    /// Topology of every backbone stage.
    pub stages: Vec<Topology>,
}

impl<'a> Batch<'a> {
    pub fn new(videos: Vec<(usize, &'a Video)>, cfg: &BackboneConfig) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Validation("a batch needs at least one video".into()));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for (_, v) in &videos {
            if v.features.row_width() != cfg.dim || v.features.rows() != v.len() {
                return Err(Error::dim("batch_features", v.features.shape(), &[v.len(), cfg.dim]));
            }
            rows += v.len();
            data.extend_from_slice(v.features.data());
        }
        let pes: Vec<&[f64]> = videos.iter().map(|(_, v)| v.timestamps.as_slice()).collect();
        let mut stages = vec![Topology::union(&pes, cfg.tau)?];
        while stages.len() < cfg.stages {
            let (next, _) = stages.last().expect("non-empty").pooled(cfg.pool);
            stages.push(next);
        }
        Ok(Batch { videos, features: Tensor::matrix(rows, cfg.dim, data)?, stages })
    }

    pub fn forward_backbone(&self, sess: &mut Session, cfg: &BackboneConfig) -> Result<Vec<StageOutput>> {
        let x0 = sess.tape.constant(self.features.clone());
        backbone_forward(sess, cfg, x0, &self.stages[0])
    }
}

/// Node selections, training targets and ground truth of one task on one
/// batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub kind: TaskKind,
    /// Stage-0 node groups: aligned spans, or keyframe windows.
    pub groups: Vec<Vec<usize>>,
    pub targets: Targets,
    pub truth: GroundTruth,
    /// Spans that fell back to the nearest node.
    pub fallbacks: usize,
}

impl TaskBatch {
    /// Number of annotated samples; zero means the task is absent from the batch.
    pub fn samples(&self) -> usize {
        match &self.truth {
            GroundTruth::Recognition { verbs, .. } => verbs.len(),
            GroundTruth::StateChange(v) => v.len(),
            GroundTruth::Keyframe(v) => v.len(),
            GroundTruth::Anticipation { verbs, .. } => verbs.len(),
            GroundTruth::Localization(v) => v.len(),
        }
    }
}

fn bad_label(kind: TaskKind, l: &Label) -> Error {
    Error::Validation(format!("annotation {l:?} does not belong to task {kind}"))
}

pub fn task_batch(batch: &Batch, labels: &LabelSpace, kind: TaskKind) -> Result<TaskBatch> {
    let stage0 = &batch.stages[0];
    let mut groups = Vec::new();
    let mut fallbacks = 0;
    let (mut v_t, mut n_t, mut flags, mut fut_v, mut fut_n) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut kf_targets, mut kf_truth) = (vec![], vec![]);
    let mut intervals = Vec::new();
    for (b, (global, video)) in batch.videos.iter().enumerate() {
        let range = stage0.videos()[b].clone();
        let pe = &stage0.pe()[range.clone()];
        for ann in video.annotations(kind) {
            ann.validate(&labels.spec(kind))?;
            if kind == TaskKind::Localization {
                let Label::Class(c) = ann.label else { return Err(bad_label(kind, &ann.label)) };
                intervals.push(Interval { video: *global, start: ann.start, end: ann.end, class: c as usize });
                continue;
            }
            let (idx, fb) = align_indices(pe, ann.start, ann.end)?;
            fallbacks += usize::from(fb);
            let idx: Vec<usize> = idx.into_iter().map(|i| i + range.start).collect();
            match &ann.label {
                Label::Action(a) => {
                    v_t.push(a.verb as usize);
                    n_t.push(a.noun as usize);
                }
                Label::StateChange(f) => flags.push(usize::from(*f)),
                Label::Keyframe(t) => {
                    let all = stage0.pe();
                    let mut best = 0;
                    for (j, &i) in idx.iter().enumerate() {
                        if (all[i] - t).abs() < (all[idx[best]] - t).abs() {
                            best = j;
                        }
                    }
                    kf_targets.push(best);
                    kf_truth.push(*t);
                }
                Label::Future(f) => {
                    fut_v.push(f.iter().map(|a| a.verb as usize).collect::<Vec<_>>());
                    fut_n.push(f.iter().map(|a| a.noun as usize).collect::<Vec<_>>());
                }
                l @ Label::Class(_) => return Err(bad_label(kind, l)),
            }
            groups.push(idx);
        }
    }
    let (targets, truth) = match kind {
        TaskKind::Recognition => (
            Targets::Recognition { verbs: v_t.clone(), nouns: n_t.clone() },
            GroundTruth::Recognition { verbs: v_t, nouns: n_t },
        ),
        TaskKind::StateChange => (Targets::StateChange { flags: flags.clone() }, GroundTruth::StateChange(flags)),
        TaskKind::Keyframe => (
            Targets::Keyframe { windows: groups.clone(), targets: kf_targets },
            GroundTruth::Keyframe(kf_truth),
        ),
        TaskKind::Anticipation => (
            Targets::Anticipation { verbs: fut_v.clone(), nouns: fut_n.clone() },
            GroundTruth::Anticipation { verbs: fut_v, nouns: fut_n },
        ),
        TaskKind::Localization => {
            let mut per_stage = Vec::with_capacity(batch.stages.len());
            for topo in &batch.stages {
                let mut t = LocalizationTargets { nodes: vec![], classes: vec![], offsets: vec![] };
                for (b, (global, _)) in batch.videos.iter().enumerate() {
                    for i in topo.videos()[b].clone() {
                        let p = topo.pe()[i];
                        if let Some(iv) = intervals
                            .iter()
                            .find(|iv| iv.video == *global && iv.start < p && p < iv.end)
                        {
                            t.nodes.push(i);
                            t.classes.push(iv.class);
                            t.offsets.push([p - iv.start, iv.end - p]);
                        }
                    }
                }
                per_stage.push(t);
            }
            (Targets::Localization(per_stage), GroundTruth::Localization(intervals))
        }
    };
    Ok(TaskBatch { kind, groups, targets, truth, fallbacks })
}

/// Backbone features a task reads, before its neck: one aligned row per
/// span, the finest stage's nodes, or every stage's nodes.
pub fn raw_input(tape: &mut Tape, stages: &[StageOutput], tb: &TaskBatch) -> Result<Vec<(Var, usize)>> {
    Ok(match tb.kind {
        k if k.aligned() => vec![(align_many(tape, stages[0].x, &tb.groups)?, 0)],
        TaskKind::Keyframe => vec![(stages[0].x, 0)],
        _ => stages.iter().enumerate().map(|(l, s)| (s.x, l)).collect(),
    })
}

fn head_input(kind: TaskKind, vars: Vec<(Var, usize)>) -> HeadInput {
    if kind.aligned() {
        HeadInput::Aligned(vars[0].0)
    } else {
        HeadInput::Nodes(vars)
    }
}

fn through_neck(sess: &mut Session, kind: TaskKind, raw: &[(Var, usize)]) -> Result<Vec<(Var, usize)>> {
    let p = neck_prefix(kind);
    raw.iter().map(|&(x, l)| Ok((neck_forward(sess, &p, x)?, l))).collect()
}

/// A task's own neck and head.
pub fn task_forward(sess: &mut Session, cfg: &ModelConfig, kind: TaskKind, raw: &[(Var, usize)]) -> Result<HeadOutput> {
    let f = through_neck(sess, kind, raw)?;
    head_forward(sess, &head_prefix(kind), &cfg.labels.spec(kind), &head_input(kind, f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Features,
    Logits,
}

impl Fusion {
    pub fn id(self) -> &'static str {
        match self {
            Fusion::Features => "features",
            Fusion::Logits => "logits",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Fusion::Features),
            "logits" => Ok(Fusion::Logits),
            _ => Err(Error::Validation(format!("unknown fusion mode {s:?}"))),
        }
    }
}

/// Support prototypes and how the novel task uses them.
#[derive(Debug, Clone, Copy)]
pub struct BackpackView<'p> {
    pub prototypes: &'p BTreeMap<TaskKind, PrototypeSet>,
    pub interaction: &'p InteractionConfig,
    pub fusion: Fusion,
}

/// Neighbors retrieved per support task for each row of the first input.
pub type Retrievals = BTreeMap<TaskKind, Vec<Vec<Neighbor>>>;

/// The novel task's forward pass: its own perspective plus every support
/// perspective refined against that support's prototypes.
pub fn novel_forward(
    sess: &mut Session,
    cfg: &ModelConfig,
    novel: TaskKind,
    raw: &[(Var, usize)],
    bp: BackpackView,
) -> Result<(HeadOutput, Retrievals)> {
    let spec = cfg.labels.spec(novel);
    let own = through_neck(sess, novel, raw)?;
    let mut refined: Vec<(TaskKind, Vec<(Var, usize)>)> = Vec::new();
    let mut retrievals = BTreeMap::new();
    for (&k, protos) in bp.prototypes {
        let xk = through_neck(sess, k, raw)?;
        let mut rk = Vec::with_capacity(xk.len());
        for (i, &(x, l)) in xk.iter().enumerate() {
            let (r, nb) = interact(sess, x, protos, bp.interaction)?;
            if i == 0 {
                retrievals.insert(k, nb);
            }
            rk.push((r, l));
        }
        refined.push((k, rk));
    }
    let out = match bp.fusion {
        Fusion::Features => {
            let mut fused = Vec::with_capacity(own.len());
            for (i, &(f, l)) in own.iter().enumerate() {
                let others: Vec<Var> = refined.iter().map(|(_, r)| r[i].0).collect();
                fused.push((fuse_features(&mut sess.tape, f, &others)?, l));
            }
            head_forward(sess, &head_prefix(novel), &spec, &head_input(novel, fused))?
        }
        Fusion::Logits => {
            let mut out = head_forward(sess, &head_prefix(novel), &spec, &head_input(novel, own))?;
            for (k, r) in refined {
                let vote = head_forward(sess, &via_prefix(novel, k), &spec, &head_input(novel, r))?;
                out = out.add(&mut sess.tape, &vote)?;
            }
            out
        }
    };
    Ok((out, retrievals))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Videos per inference batch.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.1, nms_iou: 0.5, batch: 16 }
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|i| argmax(t.row(i))).collect()
}

/// Turns a head output into task predictions.
pub fn predict(tape: &Tape, out: &HeadOutput, tb: &TaskBatch, batch: &Batch, eval: &EvalConfig) -> Result<Predictions> {
    Ok(match out {
        HeadOutput::Recognition { verb, noun } => Predictions::Recognition {
            verbs: argmax_rows(tape.value(*verb)),
            nouns: argmax_rows(tape.value(*noun)),
        },
        HeadOutput::StateChange { logits } => Predictions::StateChange(argmax_rows(tape.value(*logits))),
        HeadOutput::Keyframe { scores } => {
            let s = tape.value(*scores).data();
            let pe = batch.stages[0].pe();
            Predictions::Keyframe(
                tb.groups
                    .iter()
                    .map(|w| {
                        let local: Vec<f64> = w.iter().map(|&i| s[i]).collect();
                        pe[w[argmax(&local)]]
                    })
                    .collect(),
            )
        }
        HeadOutput::Anticipation { verbs, nouns } => {
            let per = |vs: &[Var]| -> Vec<Vec<usize>> {
                let cols: Vec<Vec<usize>> = vs.iter().map(|v| argmax_rows(tape.value(*v))).collect();
                let n = cols.first().map_or(0, Vec::len);
                (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
            };
            Predictions::Anticipation { verbs: per(verbs), nouns: per(nouns) }
        }
        HeadOutput::Localization { stages } => {
            let mut dets: Vec<Detection> = Vec::new();
            for (b, (global, _)) in batch.videos.iter().enumerate() {
                let mut video_dets = Vec::new();
                for (st, topo) in stages.iter().zip(&batch.stages) {
                    let r = topo.videos()[b].clone();
                    let cls = tape.value(st.classes);
                    let off = tape.value(st.offsets);
                    let k = cls.row_width();
                    let probs = softmax_rows(&Tensor::matrix(r.len(), k, cls.data()[r.start * k..r.end * k].to_vec())?);
                    let secs = Tensor::matrix(
                        r.len(),
                        2,
                        off.data()[r.start * 2..r.end * 2].iter().map(|v| v * st.scale).collect(),
                    )?;
                    video_dets.extend(decode_localization(
                        &probs,
                        &secs,
                        &topo.pe()[r],
                        *global,
                        eval.score_threshold,
                        eval.nms_iou,
                    )?);
                }
                dets.extend(nms(&video_dets, eval.nms_iou));
            }
            Predictions::Localization(dets)
        }
    })
}

/// Appends `b` to `a`; both must be the same kind.
pub fn extend_predictions(a: &mut Predictions, b: Predictions) -> Result<()> {
    match (a, b) {
        (Predictions::Recognition { verbs, nouns }, Predictions::Recognition { verbs: v, nouns: n }) => {
            verbs.extend(v);
            nouns.extend(n);
        }
        (Predictions::StateChange(x), Predictions::StateChange(y)) => x.extend(y),
        (Predictions::Keyframe(x), Predictions::Keyframe(y)) => x.extend(y),
        (Predictions::Anticipation { verbs, nouns }, Predictions::Anticipation { verbs: v, nouns: n }) => {
            verbs.extend(v);
            nouns.extend(n);
        }
        (Predictions::Localization(x), Predictions::Localization(y)) => x.extend(y),
        _ => return Err(Error::Usage("cannot merge predictions of different tasks".into())),
    }
    Ok(())
}

pub fn extend_truth(a: &mut GroundTruth, b: GroundTruth) -> Result<()> {
    match (a, b) {
        (GroundTruth::Recognition { verbs, nouns }, GroundTruth::Recognition { verbs: v, nouns: n }) => {
            verbs.extend(v);
            nouns.extend(n);
        }
        (GroundTruth::StateChange(x), GroundTruth::StateChange(y)) => x.extend(y),
        (GroundTruth::Keyframe(x), GroundTruth::Keyframe(y)) => x.extend(y),
        (GroundTruth::Anticipation { verbs, nouns }, GroundTruth::Anticipation { verbs: v, nouns: n }) => {
            verbs.extend(v);
            nouns.extend(n);
        }
        (GroundTruth::Localization(x), GroundTruth::Localization(y)) => x.extend(y),
        _ => return Err(Error::Usage("cannot merge ground truth of different tasks".into())),
    }
    Ok(())
}
