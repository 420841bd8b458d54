//! Stage-1 multi-task pretraining, prototype construction, Stage-2 novel
//! task learning, evaluation and activation records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::backbone::{Activation, BackboneConfig};
use crate::backpack::{
    init_interaction, is_coupling_weight, knn_query, ActivationRecord, Coupling, InteractionConfig,
    PrototypeSet,
};
use crate::data::{LabelSpace, Video};
use crate::diffcore::{Adam, ParameterStore, Session, Tensor, Var};
use crate::model::{
    extend_predictions, extend_truth, init_task, neck_prefix, novel_forward, predict, raw_input,
    task_batch, task_forward, via_prefix, Batch, BackpackView, EvalConfig, Fusion, ModelConfig,
};
use crate::rng::Key;
use crate::tasks::{
    init_head, metric, neck_forward, task_loss, Action, MetricRecord, TaskKind, Targets,
};
use crate::tgraph::PoolMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Backpack,
    Novel,
}

impl Stage {
    pub fn id(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Backpack => "backpack",
            Stage::Novel => "novel",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "backpack" => Ok(Stage::Backpack),
            "novel" => Ok(Stage::Novel),
            _ => Err(Error::Validation(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NovelConfig {
    pub task: TaskKind,
    pub fusion: Fusion,
    pub interaction: InteractionConfig,
    pub freeze_backbone: bool,
}

/// Everything about a checkpoint except its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub model: ModelConfig,
    pub supports: Vec<TaskKind>,
    pub novel: Option<NovelConfig>,
}

fn list<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl CheckpointMeta {
    /// Canonical `key = value` lines; parsing them back gives an equal value.
    pub fn to_text(&self) -> String {
        let b = &self.model.backbone;
        let l = &self.model.labels;
        let mut lines = alloc::vec![
            format!("stage = {}", self.stage.id()),
            format!("backbone.stages = {}", b.stages),
            format!("backbone.layers = {}", list(&b.layers_per_stage)),
            format!("backbone.dim = {}", b.dim),
            format!("backbone.tau = {:?}", b.tau),
            format!("backbone.pool = {}", b.pool.id()),
            format!("backbone.gate_hidden = {}", b.gate_hidden),
            format!("backbone.activation = {}", b.activation.id()),
            format!("labels.verbs = {}", l.verbs),
            format!("labels.nouns = {}", l.nouns),
            format!("labels.classes = {}", l.classes),
            format!("labels.horizon = {}", l.horizon),
            format!("supports = {}", list(self.supports.iter().map(|k| k.id()))),
        ];
        if let Some(n) = &self.novel {
            lines.extend([
                format!("novel.task = {}", n.task),
                format!("novel.fusion = {}", n.fusion.id()),
                format!("novel.k = {}", n.interaction.k),
                format!("novel.layers = {}", n.interaction.layers),
                format!("novel.requery = {}", n.interaction.requery),
                format!("novel.coupling = {}", n.interaction.coupling.id()),
                format!("novel.freeze_backbone = {}", n.freeze_backbone),
            ]);
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("malformed checkpoint line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Validation(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Validation(format!("{k} is not an integer")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::Validation(format!("{k} is not a boolean")))
        };
        let layers = get("backbone.layers")?
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Validation("bad backbone.layers".into())))
            .collect::<Result<Vec<_>>>()?;
        let supports_text = get("supports")?;
        let supports = if supports_text.is_empty() {
            Vec::new()
        } else {
            supports_text.split(',').map(|s| TaskKind::from_id(s.trim())).collect::<Result<Vec<_>>>()?
        };
        let model = ModelConfig {
            backbone: BackboneConfig {
                stages: num("backbone.stages")?,
                layers_per_stage: layers,
                dim: num("backbone.dim")?,
                tau: get("backbone.tau")?
                    .parse()
                    .map_err(|_| Error::Validation("backbone.tau is not a number".into()))?,
                pool: PoolMode::from_id(get("backbone.pool")?)?,
                gate_hidden: num("backbone.gate_hidden")?,
                activation: Activation::from_id(get("backbone.activation")?)?,
            },
            labels: LabelSpace {
                verbs: num("labels.verbs")?,
                nouns: num("labels.nouns")?,
                classes: num("labels.classes")?,
                horizon: num("labels.horizon")?,
            },
        };
        let novel = if kv.contains_key("novel.task") {
            Some(NovelConfig {
                task: TaskKind::from_id(get("novel.task")?)?,
                fusion: Fusion::from_id(get("novel.fusion")?)?,
                interaction: InteractionConfig {
                    k: num("novel.k")?,
                    layers: num("novel.layers")?,
                    requery: flag("novel.requery")?,
                    coupling: Coupling::from_id(get("novel.coupling")?)?,
                },
                freeze_backbone: flag("novel.freeze_backbone")?,
            })
        } else {
            None
        };
        Ok(CheckpointMeta { stage: Stage::from_id(get("stage")?)?, model, supports, novel })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParameterStore,
    pub prototypes: BTreeMap<TaskKind, PrototypeSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Videos per step.
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { seed: 0, steps: 600, batch: 4, lr: 1e-3 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Validation("steps and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One loss value; `task` is a task id or `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub task: String,
    pub loss: f64,
}

/// Receives training progress.
pub trait Observer {
    fn log(&mut self, _row: &StepLog) {}
    /// Gradients of the trainable parameters before the update.
    fn grads(&mut self, _step: usize, _store: &ParameterStore) {}
}

impl Observer for () {}

/// The `b` dataset indices used at `step`, sorted.
pub fn batch_indices(seed: u64, step: usize, n: usize, b: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if b < n {
        let mut s = Key::new(seed).derive_str("batches").derive(step as u64).stream();
        for i in 0..b {
            let j = i + s.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(b);
        idx.sort_unstable();
    }
    idx
}

fn run_steps(
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    videos: &[Video],
    backbone: &BackboneConfig,
    trainable: &dyn Fn(&str) -> bool,
    forward: &dyn Fn(&mut Session, &Batch) -> Result<Vec<(String, Var)>>,
    obs: &mut dyn Observer,
) -> Result<Vec<StepLog>> {
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let idx = batch_indices(cfg.seed, step, videos.len(), cfg.batch);
        let batch = Batch::new(idx.iter().map(|&i| (i, &videos[i])).collect(), backbone)?;
        let mut sess = Session::new(store, trainable);
        let losses = forward(&mut sess, &batch)?;
        let mut rows = Vec::with_capacity(losses.len() + 1);
        let mut total: Option<Var> = None;
        for (name, l) in &losses {
            rows.push(StepLog { step, task: name.clone(), loss: sess.tape.value(*l).item() });
            total = Some(match total {
                None => *l,
                Some(t) => sess.tape.add(t, *l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Validation(format!("step {step}: batch has no annotated samples")))?;
        let tv = sess.tape.value(total).item();
        rows.push(StepLog { step, task: "total".into(), loss: tv });
        if !tv.is_finite() {
            return Err(Error::NonFinite { step });
        }
        sess.tape.backward(total)?;
        let grads = sess.gradients();
        drop(sess);
        for (n, g) in &grads {
            store.accumulate_grad(n, g)?;
        }
        let missing: Vec<(String, Vec<usize>)> = store
            .iter()
            .filter(|(n, _)| trainable(n) && store.grad(n).is_none())
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (n, shape) in missing {
            store.accumulate_grad(&n, &Tensor::zeros(&shape))?;
        }
        obs.grads(step, store);
        adam.step(store, trainable)?;
        for r in rows {
            obs.log(&r);
            log.push(r);
        }
    }
    Ok(log)
}

fn check_tasks(tasks: &[TaskKind], videos: &[Video]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Validation("no tasks to train".into()));
    }
    for (i, k) in tasks.iter().enumerate() {
        if tasks[..i].contains(k) {
            return Err(Error::Validation(format!("task {k} listed twice")));
        }
        if videos.iter().all(|v| v.annotations(*k).is_empty()) {
            return Err(Error::Validation(format!("task {k} has no annotations")));
        }
    }
    Ok(())
}

/// Stage 1: every task shares the backbone and the step loss is the
/// unweighted sum of task losses.
pub fn stage1_mtl(
    model: &ModelConfig,
    tasks: &[TaskKind],
    cfg: &TrainConfig,
    videos: &[Video],
    obs: &mut dyn Observer,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    cfg.validate()?;
    model.backbone.validate()?;
    check_tasks(tasks, videos)?;
    let key = Key::new(cfg.seed).derive_str("init");
    let mut store = ParameterStore::new();
    model.backbone.init_params(key, &mut store)?;
    for &k in tasks {
        init_task(&mut store, key, model, k)?;
    }
    let forward = |sess: &mut Session, batch: &Batch| -> Result<Vec<(String, Var)>> {
        let stages = batch.forward_backbone(sess, &model.backbone)?;
        let mut out = Vec::new();
        for &k in tasks {
            let tb = task_batch(batch, &model.labels, k)?;
            if tb.samples() == 0 {
                continue;
            }
            let raw = raw_input(&mut sess.tape, &stages, &tb)?;
            let head = task_forward(sess, model, k, &raw)?;
            out.push((k.id().to_string(), task_loss(&mut sess.tape, &head, &tb.targets)?));
        }
        Ok(out)
    };
    let log = run_steps(&mut store, cfg, videos, &model.backbone, &|_| true, &forward, obs)?;
    let meta = CheckpointMeta { stage: Stage::Pretrained, model: model.clone(), supports: tasks.to_vec(), novel: None };
    Ok((Checkpoint { meta, store, prototypes: BTreeMap::new() }, log))
}

fn chunks(videos: &[Video], size: usize) -> impl Iterator<Item = Vec<(usize, &Video)>> {
    let size = size.max(1);
    (0..videos.len())
        .step_by(size)
        .map(move |s| (s..(s + size).min(videos.len())).map(|i| (i, &videos[i])).collect())
}

/// Prototypes of every support task from recognition-annotated videos.
pub fn build_prototypes(ckpt: &Checkpoint, videos: &[Video], eval: &EvalConfig) -> Result<Checkpoint> {
    let model = &ckpt.meta.model;
    if ckpt.meta.supports.is_empty() {
        return Err(Error::Usage("checkpoint has no support tasks".into()));
    }
    let mut feats: BTreeMap<TaskKind, Vec<f64>> = BTreeMap::new();
    let mut labels: Vec<Action> = Vec::new();
    for group in chunks(videos, eval.batch) {
        let batch = Batch::new(group, &model.backbone)?;
        let tb = task_batch(&batch, &model.labels, TaskKind::Recognition)?;
        if tb.samples() == 0 {
            continue;
        }
        let Targets::Recognition { verbs, nouns } = &tb.targets else { unreachable!() };
        labels.extend(verbs.iter().zip(nouns).map(|(&v, &n)| Action::new(v as u32, n as u32)));
        let mut sess = Session::inference(&ckpt.store);
        let stages = batch.forward_backbone(&mut sess, &model.backbone)?;
        let raw = raw_input(&mut sess.tape, &stages, &tb)?;
        for &k in &ckpt.meta.supports {
            let y = neck_forward(&mut sess, &neck_prefix(k), raw[0].0)?;
            feats.entry(k).or_default().extend_from_slice(sess.tape.value(y).data());
        }
    }
    if labels.is_empty() {
        return Err(Error::Validation("no recognition annotations to build prototypes from".into()));
    }
    let d = model.backbone.dim;
    let mut prototypes = BTreeMap::new();
    for (k, data) in feats {
        let t = Tensor::matrix(labels.len(), d, data)?;
        prototypes.insert(k, PrototypeSet::from_samples(k, &t, &labels)?);
    }
    let mut out = ckpt.clone();
    out.meta.stage = Stage::Backpack;
    out.prototypes = prototypes;
    Ok(out)
}

fn require_backpack(ckpt: &Checkpoint) -> Result<()> {
    for k in &ckpt.meta.supports {
        if !ckpt.prototypes.contains_key(k) {
            return Err(Error::Usage(format!(
                "checkpoint has no prototypes for {k}; run build-backpack first"
            )));
        }
    }
    Ok(())
}

/// Parameter names Stage 2 may update.
pub fn stage2_trainable(novel: &NovelConfig) -> impl Fn(&str) -> bool {
    let neck = format!("neck.{}.", novel.task);
    let head = format!("head.{}.", novel.task);
    let backbone = !novel.freeze_backbone;
    let coupled = novel.interaction.coupling == Coupling::Full;
    move |n: &str| {
        n.starts_with(&neck)
            || n.starts_with(&head)
            || (backbone && n.starts_with("backbone."))
            || (n.starts_with("backpack.") && (coupled || !is_coupling_weight(n)))
    }
}

/// Stage 2: learns the novel task through the frozen support necks and
/// prototypes. Only the novel task's annotations are read.
pub fn stage2_novel(
    ckpt: &Checkpoint,
    novel: &NovelConfig,
    cfg: &TrainConfig,
    videos: &[Video],
    obs: &mut dyn Observer,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    cfg.validate()?;
    novel.interaction.validate()?;
    require_backpack(ckpt)?;
    if ckpt.meta.novel.is_some() {
        return Err(Error::Usage("checkpoint already carries a novel task".into()));
    }
    if ckpt.meta.supports.contains(&novel.task) {
        return Err(Error::Validation(format!("novel task {} is also a support task", novel.task)));
    }
    check_tasks(&[novel.task], videos)?;
    let model = &ckpt.meta.model;
    for p in ckpt.prototypes.values() {
        if novel.interaction.coupling != Coupling::Off && novel.interaction.k > p.len() {
            return Err(Error::Validation(format!(
                "k = {} exceeds the {} prototypes of {}",
                novel.interaction.k,
                p.len(),
                p.task()
            )));
        }
    }
    let key = Key::new(cfg.seed).derive_str("init");
    let mut store = ckpt.store.clone();
    store.set_steps(0);
    init_task(&mut store, key, model, novel.task)?;
    let spec = model.labels.spec(novel.task);
    for &k in &ckpt.meta.supports {
        init_interaction(&mut store, k, model.backbone.dim, novel.interaction.layers, novel.interaction.coupling)?;
        if novel.fusion == Fusion::Logits {
            init_head(&mut store, key, &via_prefix(novel.task, k), &spec, model.backbone.dim)?;
        }
    }
    let view = BackpackView { prototypes: &ckpt.prototypes, interaction: &novel.interaction, fusion: novel.fusion };
    let forward = |sess: &mut Session, batch: &Batch| -> Result<Vec<(String, Var)>> {
        let tb = task_batch(batch, &model.labels, novel.task)?;
        if tb.samples() == 0 {
            return Ok(Vec::new());
        }
        let stages = batch.forward_backbone(sess, &model.backbone)?;
        let raw = raw_input(&mut sess.tape, &stages, &tb)?;
        let (head, _) = novel_forward(sess, model, novel.task, &raw, view)?;
        Ok(alloc::vec![(novel.task.id().to_string(), task_loss(&mut sess.tape, &head, &tb.targets)?)])
    };
    let trainable = stage2_trainable(novel);
    let log = run_steps(&mut store, cfg, videos, &model.backbone, &trainable, &forward, obs)?;
    let meta = CheckpointMeta { stage: Stage::Novel, novel: Some(novel.clone()), ..ckpt.meta.clone() };
    Ok((Checkpoint { meta, store, prototypes: ckpt.prototypes.clone() }, log))
}

/// The single-task baseline: Stage 1 on the novel task alone.
pub fn single_task(
    model: &ModelConfig,
    task: TaskKind,
    cfg: &TrainConfig,
    videos: &[Video],
    obs: &mut dyn Observer,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    stage1_mtl(model, &[task], cfg, videos, obs)
}

/// Deterministic metrics of one task; never mutates the checkpoint.
pub fn evaluate(ckpt: &Checkpoint, videos: &[Video], task: TaskKind, eval: &EvalConfig) -> Result<MetricRecord> {
    if videos.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let model = &ckpt.meta.model;
    let novel = ckpt.meta.novel.as_ref().filter(|n| n.task == task);
    if novel.is_none() && !ckpt.meta.supports.contains(&task) {
        return Err(Error::Usage(format!("checkpoint was not trained on task {task}")));
    }
    let mut preds = None;
    let mut truth = None;
    for group in chunks(videos, eval.batch) {
        let batch = Batch::new(group, &model.backbone)?;
        let tb = task_batch(&batch, &model.labels, task)?;
        if tb.samples() == 0 {
            continue;
        }
        let mut sess = Session::inference(&ckpt.store);
        let stages = batch.forward_backbone(&mut sess, &model.backbone)?;
        let raw = raw_input(&mut sess.tape, &stages, &tb)?;
        let out = match novel {
            Some(n) => {
                let view = BackpackView { prototypes: &ckpt.prototypes, interaction: &n.interaction, fusion: n.fusion };
                novel_forward(&mut sess, model, task, &raw, view)?.0
            }
            None => task_forward(&mut sess, model, task, &raw)?,
        };
        let p = predict(&sess.tape, &out, &tb, &batch, eval)?;
        match (&mut preds, &mut truth) {
            (Some(ps), Some(ts)) => {
                extend_predictions(ps, p)?;
                extend_truth(ts, tb.truth)?;
            }
            _ => {
                preds = Some(p);
                truth = Some(tb.truth);
            }
        }
    }
    match (preds, truth) {
        (Some(p), Some(t)) => metric(&model.labels.spec(task), &p, &t),
        _ => Err(Error::Validation(format!("no {task} annotations in the evaluation split"))),
    }
}

/// Prototypes each support task retrieves for every sample. Samples are the
/// novel task's spans (or nodes) when the checkpoint has one, otherwise the
/// recognition spans; queries are the sample features seen through each
/// support neck.
pub fn activations(ckpt: &Checkpoint, videos: &[Video], k: usize, eval: &EvalConfig) -> Result<Vec<ActivationRecord>> {
    require_backpack(ckpt)?;
    let model = &ckpt.meta.model;
    let task = ckpt.meta.novel.as_ref().map_or(TaskKind::Recognition, |n| n.task);
    let mut out = Vec::new();
    for group in chunks(videos, eval.batch) {
        let batch = Batch::new(group, &model.backbone)?;
        let tb = task_batch(&batch, &model.labels, task)?;
        if tb.samples() == 0 {
            continue;
        }
        let mut sess = Session::inference(&ckpt.store);
        let stages = batch.forward_backbone(&mut sess, &model.backbone)?;
        let raw = raw_input(&mut sess.tape, &stages, &tb)?;
        let first = out.len();
        for (&support, protos) in &ckpt.prototypes {
            let q = neck_forward(&mut sess, &neck_prefix(support), raw[0].0)?;
            let nbrs = knn_query(sess.tape.value(q), protos, k)?;
            for (i, list) in nbrs.into_iter().enumerate() {
                if first + i == out.len() {
                    out.push(ActivationRecord { sample: first + i, per_task: BTreeMap::new() });
                }
                let row = list.into_iter().map(|n| (n, protos.labels()[n.row])).collect();
                out[first + i].per_task.insert(support, row);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no {task} samples for activation records")));
    }
    Ok(out)
}

/// Pairwise consensus over the support tasks, in the order of `tasks`.
pub fn consensus_matrix(records: &[ActivationRecord], tasks: &[TaskKind]) -> Result<Vec<Vec<f64>>> {
    tasks
        .iter()
        .map(|&a| tasks.iter().map(|&b| crate::backpack::consensus(records, a, b)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig, Synthetic};

    fn tiny() -> (Synthetic, ModelConfig) {
        let g = GenConfig {
            videos: 10,
            dim: 8,
            actions: 14,
            min_segments: 10,
            max_segments: 14,
            ..GenConfig::default()
        };
        let data = generate(&g, 4).unwrap();
        let model = ModelConfig {
            backbone: BackboneConfig { dim: 8, gate_hidden: 4, ..BackboneConfig::default() },
            labels: data.labels(),
        };
        (data, model)
    }

    const SUPPORTS: [TaskKind; 4] =
        [TaskKind::Recognition, TaskKind::StateChange, TaskKind::Keyframe, TaskKind::Localization];

    #[test]
    fn meta_text_round_trips() {
        let (_, model) = tiny();
        let mut meta = CheckpointMeta { stage: Stage::Pretrained, model, supports: SUPPORTS.to_vec(), novel: None };
        assert_eq!(CheckpointMeta::parse(&meta.to_text()).unwrap(), meta);
        meta.novel = Some(NovelConfig {
            task: TaskKind::Anticipation,
            fusion: Fusion::Logits,
            interaction: InteractionConfig { k: 3, layers: 1, requery: true, coupling: Coupling::Zero },
            freeze_backbone: true,
        });
        meta.model.backbone.tau = 0.1 + 0.2;
        assert_eq!(CheckpointMeta::parse(&meta.to_text()).unwrap(), meta);
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let a = batch_indices(3, 7, 20, 5);
        assert_eq!(a, batch_indices(3, 7, 20, 5));
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(batch_indices(3, 7, 4, 5), alloc::vec![0, 1, 2, 3]);
    }

    #[test]
    fn total_loss_is_the_sum_of_task_losses() {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 3, batch: 3, ..TrainConfig::default() };
        let (_, log) = stage1_mtl(&model, &SUPPORTS, &cfg, &data.train_videos(), &mut ()).unwrap();
        for step in 0..3 {
            let rows: Vec<&StepLog> = log.iter().filter(|r| r.step == step).collect();
            let parts: f64 = rows.iter().filter(|r| r.task != "total").map(|r| r.loss).sum();
            let total = rows.iter().find(|r| r.task == "total").unwrap().loss;
            assert_eq!(rows.len(), 5);
            assert!((parts - total).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_task_is_single_task_training() {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 4, batch: 2, ..TrainConfig::default() };
        let v = data.train_videos();
        let (a, la) = stage1_mtl(&model, &[TaskKind::StateChange], &cfg, &v, &mut ()).unwrap();
        let (b, lb) = single_task(&model, TaskKind::StateChange, &cfg, &v, &mut ()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 3, batch: 2, seed: 11, ..TrainConfig::default() };
        let v = data.train_videos();
        let a = stage1_mtl(&model, &SUPPORTS, &cfg, &v, &mut ()).unwrap();
        let b = stage1_mtl(&model, &SUPPORTS, &cfg, &v, &mut ()).unwrap();
        assert_eq!(a, b);
        let c = stage1_mtl(&model, &SUPPORTS, &TrainConfig { seed: 12, ..cfg }, &v, &mut ()).unwrap();
        assert_ne!(a.0.store, c.0.store);
    }

    #[test]
    fn task_without_annotations_is_rejected_up_front() {
        let (data, model) = tiny();
        let mut v = data.train_videos();
        for x in &mut v {
            x.annotations.remove(&TaskKind::Keyframe);
        }
        let r = stage1_mtl(&model, &SUPPORTS, &TrainConfig::default(), &v, &mut ());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    struct Seen(BTreeMap<String, bool>);

    impl Observer for Seen {
        fn grads(&mut self, _step: usize, store: &ParameterStore) {
            for (n, _) in store.iter() {
                let nz = store.grad(n).is_some_and(|g| g.data().iter().any(|v| *v != 0.0));
                *self.0.entry(n.to_string()).or_default() |= nz;
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 50, batch: 2, ..TrainConfig::default() };
        let mut seen = Seen(BTreeMap::new());
        let tasks: Vec<TaskKind> = TaskKind::ALL.to_vec();
        stage1_mtl(&model, &tasks, &cfg, &data.train_videos(), &mut seen).unwrap();
        let dead: Vec<&String> = seen.0.iter().filter(|(_, v)| !**v).map(|(k, _)| k).collect();
        assert!(dead.is_empty(), "{dead:?}");
    }

    fn pretrained() -> (Synthetic, Checkpoint) {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 5, batch: 3, ..TrainConfig::default() };
        let (ck, _) = stage1_mtl(&model, &SUPPORTS, &cfg, &data.train_videos(), &mut ()).unwrap();
        let ck = build_prototypes(&ck, &data.train_videos(), &EvalConfig::default()).unwrap();
        (data, ck)
    }

    fn novel(coupling: Coupling, fusion: Fusion) -> NovelConfig {
        NovelConfig {
            task: TaskKind::Anticipation,
            fusion,
            interaction: InteractionConfig { k: 3, layers: 2, requery: false, coupling },
            freeze_backbone: false,
        }
    }

    #[test]
    fn stage2_needs_prototypes() {
        let (data, model) = tiny();
        let cfg = TrainConfig { steps: 1, batch: 2, ..TrainConfig::default() };
        let (ck, _) = stage1_mtl(&model, &SUPPORTS, &cfg, &data.train_videos(), &mut ()).unwrap();
        let r = stage2_novel(&ck, &novel(Coupling::Full, Fusion::Features), &cfg, &data.train_videos(), &mut ());
        assert!(matches!(r, Err(Error::Usage(m)) if m.contains("build-backpack")));
    }

    #[test]
    fn stage2_freezes_support_necks_and_prototypes() {
        let (data, ck) = pretrained();
        let mut v = data.train_videos();
        for x in &mut v {
            x.annotations.retain(|k, _| *k == TaskKind::Anticipation);
        }
        for fusion in [Fusion::Features, Fusion::Logits] {
            let cfg = TrainConfig { steps: 3, batch: 3, ..TrainConfig::default() };
            let (out, _) = stage2_novel(&ck, &novel(Coupling::Full, fusion), &cfg, &v, &mut ()).unwrap();
            for (k, p) in &ck.prototypes {
                assert_eq!(out.prototypes[k].to_bytes(), p.to_bytes());
            }
            for (n, t) in ck.store.iter().filter(|(n, _)| n.starts_with("neck.")) {
                assert_eq!(out.store.get(n).unwrap(), t);
            }
            assert_ne!(out.store.get("backbone.s0.l0.w_r"), ck.store.get("backbone.s0.l0.w_r"));
            let m = evaluate(&out, &data.val_videos(), TaskKind::Anticipation, &EvalConfig::default()).unwrap();
            assert!(m.get("verb_ed").is_some());
        }
    }

    #[test]
    fn zero_coupling_matches_no_retrieval_exactly() {
        let (data, ck) = pretrained();
        let cfg = TrainConfig { steps: 4, batch: 3, ..TrainConfig::default() };
        let v = data.train_videos();
        let (a, la) = stage2_novel(&ck, &novel(Coupling::Zero, Fusion::Features), &cfg, &v, &mut ()).unwrap();
        let (b, lb) = stage2_novel(&ck, &novel(Coupling::Off, Fusion::Features), &cfg, &v, &mut ()).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert!((x.loss - y.loss).abs() <= 1e-9);
        }
        let ev = EvalConfig::default();
        let ma = evaluate(&a, &data.val_videos(), TaskKind::Anticipation, &ev).unwrap();
        let mb = evaluate(&b, &data.val_videos(), TaskKind::Anticipation, &ev).unwrap();
        for (k, x) in ma.iter() {
            assert!((x - mb.get(k).unwrap()).abs() <= 1e-9);
        }
        for (n, t) in a.store.iter().filter(|(n, _)| is_coupling_weight(n)) {
            assert!(t.data().iter().all(|v| *v == 0.0), "{n}");
        }
    }

    #[test]
    fn evaluation_is_pure_and_checks_inputs() {
        let (data, ck) = pretrained();
        let ev = EvalConfig::default();
        let before = ck.clone();
        let a = evaluate(&ck, &data.val_videos(), TaskKind::Recognition, &ev).unwrap();
        let b = evaluate(&ck, &data.val_videos(), TaskKind::Recognition, &ev).unwrap();
        assert_eq!(a, b);
        assert_eq!(ck, before);
        assert!(matches!(evaluate(&ck, &[], TaskKind::Recognition, &ev), Err(Error::Validation(_))));
        assert!(matches!(evaluate(&ck, &data.val_videos(), TaskKind::Anticipation, &ev), Err(Error::Usage(_))));
    }

    #[test]
    fn consensus_matrix_shape() {
        let (data, ck) = pretrained();
        let recs = activations(&ck, &data.val_videos(), 3, &EvalConfig::default()).unwrap();
        let m = consensus_matrix(&recs, &SUPPORTS).unwrap();
        for i in 0..4 {
            assert_eq!(m[i][i], 100.0);
            for j in 0..4 {
                assert_eq!(m[i][j], m[j][i]);
                assert!((0.0..=100.0).contains(&m[i][j]));
            }
        }
    }
}
