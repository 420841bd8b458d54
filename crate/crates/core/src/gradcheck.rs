//! Finite-difference verification of every differentiable operation and of
//! the whole backbone-to-loss path.
//!
//! Each case owns a parameter store. The analytic gradient comes from one
//! backward pass over a session that trains every entry; the numeric one
//! from central differences on fresh inference sessions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{init_tdgc, tdgc_forward, Activation, BackboneConfig};
use crate::backpack::{init_interaction, interact, Coupling, InteractionConfig, PrototypeSet};
use crate::data::{generate, GenConfig, Video};
use crate::diffcore::{ParameterStore, Session, Tensor, Var};
use crate::model::{
    init_task, novel_forward, raw_input, task_batch, task_forward, via_prefix, Batch, BackpackView, EvalConfig,
    Fusion, ModelConfig,
};
use crate::rng::Key;
use crate::tasks::{init_head, task_loss, Action, TaskKind};
use crate::tgraph::{PoolMode, TemporalGraph, Topology};
use crate::train::{build_prototypes, Checkpoint, CheckpointMeta, Stage};
use crate::{Error, Result};

pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random instances per case.
    pub instances: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { seed: 0, instances: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub end_to_end: bool,
    pub instances: usize,
    /// Largest relative error over the instances.
    pub worst: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, and 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let den = libm::sqrt(na) + libm::sqrt(nb);
    if den == 0.0 {
        0.0
    } else {
        libm::sqrt(diff) / den
    }
}

type Loss<'a> = dyn Fn(&mut Session) -> Result<Var> + 'a;

/// Analytic and central-difference gradients of `f`, flattened over the
/// store in name order.
pub fn compare(store: &ParameterStore, f: &Loss, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sess = Session::new(store, |_| true);
    let root = f(&mut sess)?;
    sess.tape.backward(root)?;
    let grads: BTreeMap<String, Tensor> = sess.gradients().into_iter().collect();
    drop(sess);

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut sess = Session::inference(s);
        let v = f(&mut sess)?;
        Ok(sess.tape.value(v).item())
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let n = store.get(name).map_or(0, Tensor::numel);
        match grads.get(name) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(core::iter::repeat(0.0).take(n)),
        }
        for k in 0..n {
            let orig = store.get(name).expect("listed").data()[k];
            work.value_mut(name).expect("listed").data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(name).expect("listed").data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(name).expect("listed").data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    Ok((analytic, numeric))
}

fn normal(key: Key, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n as u64).map(|i| key.normal_at(i)).collect()).expect("shape matches")
}

fn uniform(key: Key, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n as u64).map(|i| lo + (hi - lo) * key.uniform_at(i)).collect()).expect("shape matches")
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output coordinate carries a distinct weight.
fn project(sess: &mut Session, y: Var, key: Key) -> Result<Var> {
    let shape = sess.tape.shape(y).to_vec();
    let r = sess.tape.constant(normal(key.derive_str("projection"), &shape));
    let p = sess.tape.mul(y, r)?;
    Ok(sess.tape.sum(p))
}

fn store_of(inputs: Vec<(&str, Tensor)>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (n, t) in inputs {
        s.insert(n, t).expect("distinct names");
    }
    s
}

/// Uniformly spaced timestamps with the given jitter, sorted.
fn timestamps(key: Key, n: usize) -> Vec<f64> {
    let mut pe: Vec<f64> = (0..n).map(|i| i as f64 + 0.5 + 0.3 * (key.uniform_at(i as u64) - 0.5)).collect();
    pe.sort_by(f64::total_cmp);
    pe
}

struct OpCase {
    name: &'static str,
    build: fn(Key) -> Result<f64>,
}

fn run_op(inputs: Vec<(&str, Tensor)>, f: &Loss) -> Result<f64> {
    let (a, n) = compare(&store_of(inputs), f, STEP)?;
    Ok(relative_error(&a, &n))
}

macro_rules! simple {
    ($key:ident, [$($name:literal : $t:expr),*], |$s:ident, $v:ident| $body:expr) => {{
        let inputs = vec![$(($name, $t)),*];
        let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
        let pk = $key.derive_str("out");
        run_op(inputs, &|$s: &mut Session| {
            let $v: Vec<Var> = names.iter().map(|n| $s.param(n)).collect::<Result<_>>()?;
            let y: Var = $body?;
            project($s, y, pk)
        })
    }};
}

fn ops() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[4, 2])], |s, v| s.tape.matmul(v[0], v[1])),
        },
        OpCase {
            name: "add",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[3, 4])], |s, v| s.tape.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[3, 4])], |s, v| s.tape.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[3, 4])], |s, v| s.tape.mul(v[0], v[1])),
        },
        OpCase {
            name: "add_row",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[4])], |s, v| s.tape.add_row(v[0], v[1])),
        },
        OpCase {
            name: "mul_col",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[3, 1])], |s, v| s.tape.mul_col(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.scale(v[0], -1.7))),
        },
        OpCase {
            name: "abs",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.abs(v[0]))),
        },
        OpCase {
            name: "sign",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.sign(v[0]))),
        },
        OpCase {
            name: "relu",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.relu(v[0]))),
        },
        OpCase {
            name: "softplus",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.softplus(v[0]))),
        },
        OpCase {
            name: "sum",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.sum(v[0]))),
        },
        OpCase {
            name: "mean",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| Ok::<_, Error>(s.tape.mean(v[0]))),
        },
        OpCase {
            name: "segment_mean",
            build: |k| {
                let ids: Vec<usize> = (0..6).map(|i| k.derive(2).u64_at(i) as usize % 4).collect();
                simple!(k, ["a": normal(k.derive(0), &[6, 3])], |s, v| s.tape.segment_mean(v[0], &ids, 4).map(|r| r.0))
            },
        },
        OpCase {
            name: "gather_rows",
            build: |k| {
                let idx: Vec<usize> = (0..7).map(|i| k.derive(2).u64_at(i) as usize % 4).collect();
                simple!(k, ["a": normal(k.derive(0), &[4, 3])], |s, v| s.tape.gather_rows(v[0], &idx))
            },
        },
        OpCase {
            name: "window_max",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[5, 3])], |s, v| s.tape.window_max(v[0], &[0..2, 2..4, 4..5])),
        },
        OpCase {
            name: "reshape",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4])], |s, v| s.tape.reshape(v[0], &[2, 6])),
        },
        OpCase {
            name: "slice_cols",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 5])], |s, v| s.tape.slice_cols(v[0], 1, 3)),
        },
        OpCase {
            name: "concat_rows",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[2, 3]), "b": normal(k.derive(1), &[3, 3])], |s, v| s.tape.concat_rows(&[v[0], v[1], v[0]])),
        },
        OpCase {
            name: "cross_entropy",
            build: |k| {
                let t: Vec<usize> = (0..4).map(|i| k.derive(2).u64_at(i) as usize % 5).collect();
                simple!(k, ["a": normal(k.derive(0), &[4, 5])], |s, v| s.tape.cross_entropy(v[0], &t))
            },
        },
        OpCase {
            name: "binary_ce",
            build: |k| {
                let t = uniform(k.derive(2), &[4, 2], 0.0, 1.0).into_data();
                simple!(k, ["a": normal(k.derive(0), &[4, 2])], |s, v| s.tape.binary_ce(v[0], &t))
            },
        },
        OpCase {
            name: "mse",
            build: |k| simple!(k, ["a": normal(k.derive(0), &[3, 4]), "b": normal(k.derive(1), &[3, 4])], |s, v| s.tape.mse(v[0], v[1])),
        },
        OpCase { name: "pool_mean", build: |k| pool_case(k, PoolMode::Mean) },
        OpCase { name: "pool_max", build: |k| pool_case(k, PoolMode::Max) },
        OpCase { name: "tdgc", build: tdgc_case },
        OpCase { name: "interact", build: interact_case },
    ]
}

fn pool_case(k: Key, mode: PoolMode) -> Result<f64> {
    let n = 7;
    let g = TemporalGraph::build(Tensor::zeros(&[n, 3]), timestamps(k.derive(3), n), 2.0)?;
    let (_, map) = g.pool(mode)?;
    simple!(k, ["a": normal(k.derive(0), &[n, 3])], |s, v| map.apply(&mut s.tape, v[0]))
}

fn tdgc_case(k: Key) -> Result<f64> {
    let (n, d, h) = (6, 3, 4);
    let stage = (k.u64_at(7) % 3) as usize;
    let pe: Vec<f64> = timestamps(k.derive(3), n).iter().map(|t| t * libm::ldexp(1.0, stage as i32)).collect();
    let base = Topology::new(pe.clone(), 2.0)?;
    let topo = Topology::from_raw_parts(pe, base.edges().to_vec(), stage, 2.0);
    let mut store = ParameterStore::new();
    init_tdgc(&mut store, k.derive(1), "l", d, h)?;
    store.insert("x", normal(k.derive(0), &[n, d]))?;
    let pk = k.derive_str("out");
    let act = if k.u64_at(8) % 2 == 0 { Activation::Relu } else { Activation::Identity };
    let (a, b) = compare(
        &store,
        &|s: &mut Session| {
            let x = s.param("x")?;
            let y = tdgc_forward(s, "l", x, &topo, act)?;
            project(s, y, pk)
        },
        STEP,
    )?;
    Ok(relative_error(&a, &b))
}

fn interact_case(k: Key) -> Result<f64> {
    let (n, d, p) = (4, 3, 6);
    let labels: Vec<Action> = (0..p as u32).map(|i| Action::new(i, 0)).collect();
    let protos = PrototypeSet::new(TaskKind::StateChange, normal(k.derive(2), &[p, d]), labels)?;
    let mut store = ParameterStore::new();
    init_interaction(&mut store, TaskKind::StateChange, d, 2, Coupling::Full)?;
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        let t = store.get(&name).expect("listed").clone();
        let noise = normal(k.derive_str(&name), t.shape());
        let mixed: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.3 * b).collect();
        store.set(&name, Tensor::new(t.shape(), mixed)?);
    }
    store.insert("x", normal(k.derive(0), &[n, d]))?;
    let cfg = InteractionConfig { k: 2, layers: 2, requery: k.u64_at(9) % 2 == 0, coupling: Coupling::Full };
    let pk = k.derive_str("out");
    let (a, b) = compare(
        &store,
        &|s: &mut Session| {
            let x = s.param("x")?;
            let (y, _) = interact(s, x, &protos, &cfg)?;
            project(s, y, pk)
        },
        STEP,
    )?;
    Ok(relative_error(&a, &b))
}

fn tiny_data(seed: u64) -> Result<Vec<Video>> {
    let cfg = GenConfig {
        videos: 2,
        verbs: 3,
        nouns: 2,
        actions: 4,
        dim: 4,
        min_segments: 8,
        max_segments: 12,
        min_duration: 2,
        max_duration: 3,
        horizon: 2,
        val_fraction: 0.0,
        ..GenConfig::default()
    };
    Ok(generate(&cfg, seed)?.videos.into_iter().map(|s| s.video).collect())
}

fn tiny_model(videos_seed: u64) -> Result<(ModelConfig, Vec<Video>)> {
    let videos = tiny_data(videos_seed)?;
    let cfg = GenConfig { verbs: 3, nouns: 2, horizon: 2, ..GenConfig::default() };
    let backbone = BackboneConfig {
        stages: 2,
        layers_per_stage: vec![1, 1],
        dim: 4,
        gate_hidden: 3,
        ..BackboneConfig::default()
    };
    Ok((ModelConfig { backbone, labels: cfg.labels() }, videos))
}

/// Sum of all five task losses through a fresh multi-task model.
fn multitask_case(k: Key) -> Result<f64> {
    let (model, videos) = tiny_model(k.u64_at(0))?;
    let mut store = ParameterStore::new();
    model.backbone.init_params(k.derive(1), &mut store)?;
    for kind in TaskKind::ALL {
        init_task(&mut store, k.derive(1), &model, kind)?;
    }
    let batch = Batch::new(videos.iter().enumerate().collect(), &model.backbone)?;
    let (a, b) = compare(
        &store,
        &|s: &mut Session| {
            let stages = batch.forward_backbone(s, &model.backbone)?;
            let mut total = None;
            for kind in TaskKind::ALL {
                let tb = task_batch(&batch, &model.labels, kind)?;
                if tb.samples() == 0 {
                    continue;
                }
                let raw = raw_input(&mut s.tape, &stages, &tb)?;
                let head = task_forward(s, &model, kind, &raw)?;
                let l = task_loss(&mut s.tape, &head, &tb.targets)?;
                total = Some(match total {
                    None => l,
                    Some(t) => s.tape.add(t, l)?,
                });
            }
            total.ok_or_else(|| Error::Validation("fixture has no annotated samples".into()))
        },
        STEP,
    )?;
    Ok(relative_error(&a, &b))
}

/// Novel-task loss through the backbone, frozen support necks, prototype
/// interaction and fusion.
fn novel_case(k: Key) -> Result<f64> {
    let (model, videos) = tiny_model(k.u64_at(0))?;
    let novel = TaskKind::ALL[(k.u64_at(1) % 5) as usize];
    let fusion = if k.u64_at(2) % 2 == 0 { Fusion::Features } else { Fusion::Logits };
    let supports: Vec<TaskKind> = TaskKind::ALL.into_iter().filter(|&t| t != novel).collect();
    let mut store = ParameterStore::new();
    model.backbone.init_params(k.derive(3), &mut store)?;
    for &t in &supports {
        init_task(&mut store, k.derive(3), &model, t)?;
    }
    let meta = CheckpointMeta { stage: Stage::Pretrained, model: model.clone(), supports: supports.clone(), novel: None };
    let ckpt = build_prototypes(&Checkpoint { meta, store, prototypes: BTreeMap::new() }, &videos, &EvalConfig::default())?;
    let mut store = ckpt.store.clone();
    init_task(&mut store, k.derive(4), &model, novel)?;
    let spec = model.labels.spec(novel);
    for &t in &supports {
        init_interaction(&mut store, t, model.backbone.dim, 2, Coupling::Full)?;
        if fusion == Fusion::Logits {
            init_head(&mut store, k.derive(4), &via_prefix(novel, t), &spec, model.backbone.dim)?;
        }
    }
    let k_nn = ckpt.prototypes.values().map(PrototypeSet::len).min().unwrap_or(1).min(2);
    let interaction = InteractionConfig { k: k_nn, layers: 2, requery: false, coupling: Coupling::Full };
    let view = BackpackView { prototypes: &ckpt.prototypes, interaction: &interaction, fusion };
    let batch = Batch::new(videos.iter().enumerate().collect(), &model.backbone)?;
    let (a, b) = compare(
        &store,
        &|s: &mut Session| {
            let tb = task_batch(&batch, &model.labels, novel)?;
            let stages = batch.forward_backbone(s, &model.backbone)?;
            let raw = raw_input(&mut s.tape, &stages, &tb)?;
            let (head, _) = novel_forward(s, &model, novel, &raw, view)?;
            task_loss(&mut s.tape, &head, &tb.targets)
        },
        STEP,
    )?;
    Ok(relative_error(&a, &b))
}

fn case(name: &str, end_to_end: bool, cfg: &GradCheckConfig, f: fn(Key) -> Result<f64>) -> Result<CaseReport> {
    let root = Key::new(cfg.seed).derive_str(name);
    let mut worst: f64 = 0.0;
    for i in 0..cfg.instances {
        let e = f(root.derive(i as u64))?;
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(CaseReport {
        name: name.into(),
        end_to_end,
        instances: cfg.instances,
        worst,
        tolerance: if end_to_end { END_TO_END_TOLERANCE } else { OP_TOLERANCE },
    })
}

/// Runs every case; `progress` sees each report as it completes.
pub fn run(cfg: &GradCheckConfig, mut progress: impl FnMut(&CaseReport)) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(Error::Validation("grad check needs at least one instance".into()));
    }
    let mut cases = Vec::new();
    let all = ops()
        .into_iter()
        .map(|c| (c.name, false, c.build))
        .chain([("multitask", true, multitask_case as fn(Key) -> Result<f64>), ("novel", true, novel_case)]);
    for (name, e2e, f) in all {
        let r = case(name, e2e, cfg, f)?;
        progress(&r);
        cases.push(r);
    }
    Ok(GradCheckReport { cases })
}

impl CaseReport {
    /// One tab-separated line: name, kind, instances, worst, tolerance, verdict.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.3e}\t{:.0e}\t{}",
            self.name,
            if self.end_to_end { "end-to-end" } else { "op" },
            self.instances,
            self.worst,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compare_catches_a_wrong_gradient() {
        let store = store_of(vec![("a", Tensor::from_rows(&[[0.5, -1.0]]).unwrap())]);
        // Reading a value back as a constant cuts a path the differences still see.
        let (a, n) = compare(
            &store,
            &|s: &mut Session| {
                let x = s.param("a")?;
                let y = s.tape.sign(x);
                let y = s.tape.mul(y, x)?;
                let z = s.tape.constant(s.tape.value(x).clone());
                let w = s.tape.mul(y, z)?;
                Ok(s.tape.sum(w))
            },
            STEP,
        )
        .unwrap();
        assert!(relative_error(&a, &n) > 0.1);
    }

    #[test]
    fn every_case_passes_on_a_few_instances() {
        let report = run(&GradCheckConfig { seed: 7, instances: 2 }, |_| {}).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{}", c.line());
        }
        assert_eq!(report.cases.iter().filter(|c| c.end_to_end).count(), 2);
    }

    #[test]
    fn zero_instances_is_rejected() {
        assert!(run(&GradCheckConfig { seed: 0, instances: 0 }, |_| {}).is_err());
    }
}
