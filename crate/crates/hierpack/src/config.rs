//! Run configuration: a flat file of `key = value` lines.
//!
//! Blank lines and `#` comments are ignored. Every key has a default;
//! unknown keys are rejected. Values resolve in the order defaults, file,
//! `--set key=value` overrides, then `--seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hierpack_core::backbone::{Activation, BackboneConfig};
use hierpack_core::backpack::{Coupling, InteractionConfig};
use hierpack_core::data::GenConfig;
use hierpack_core::model::{EvalConfig, Fusion};
use hierpack_core::tasks::TaskKind;
use hierpack_core::tgraph::PoolMode;
use hierpack_core::train::{NovelConfig, TrainConfig};

use crate::error::{Error, Result};
use crate::fsutil;

/// Every key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("paths.root", "."),
    ("paths.data", "data"),
    ("paths.checkpoints", "checkpoints"),
    ("paths.outputs", "outputs"),
    ("data.videos", "200"),
    ("data.verbs", "12"),
    ("data.nouns", "16"),
    ("data.actions", "32"),
    ("data.dim", "128"),
    ("data.sigma", "0.3"),
    ("data.temperature", "0.5"),
    ("data.min_segments", "60"),
    ("data.max_segments", "100"),
    ("data.min_duration", "2"),
    ("data.max_duration", "4"),
    ("data.horizon", "4"),
    ("data.val_fraction", "0.2"),
    ("backbone.L", "3"),
    ("backbone.layers", "2"),
    ("backbone.dim", "128"),
    ("backbone.tau", "2"),
    ("backbone.pool", "mean"),
    ("backbone.gate_hidden", "16"),
    ("backbone.activation", "relu"),
    ("tasks.supports", "ar,pnr,lta,mq"),
    ("tasks.novel", "oscc"),
    ("pretrain.steps", "600"),
    ("pretrain.batch", "4"),
    ("pretrain.lr", "0.001"),
    ("novel.steps", "300"),
    ("novel.batch", "4"),
    ("novel.lr", "0.001"),
    ("novel.videos", "0"),
    ("novel.freeze_backbone", "false"),
    ("backpack.k", "16"),
    ("backpack.M", "2"),
    ("backpack.requery", "false"),
    ("backpack.coupling", "full"),
    ("backpack.fusion", "features"),
    ("eval.checkpoint", "novel"),
    ("eval.task", ""),
    ("eval.split", "val"),
    ("eval.score_threshold", "0.1"),
    ("eval.nms_iou", "0.5"),
    ("eval.batch", "16"),
    ("consensus.checkpoint", "backpack"),
    ("consensus.k", "4"),
    ("consensus.split", "val"),
    ("gradcheck.instances", "20"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.txt")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints.join(format!("{name}.hepk"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.outputs.join(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: GenConfig,
    pub backbone: BackboneConfig,
    pub supports: Vec<TaskKind>,
    pub pretrain: TrainConfig,
    pub novel: NovelConfig,
    pub novel_train: TrainConfig,
    /// Leading training videos Stage 2 may use; 0 means all.
    pub novel_videos: usize,
    pub eval: EvalConfig,
    pub eval_checkpoint: String,
    pub eval_task: Option<TaskKind>,
    pub eval_split: String,
    pub consensus_checkpoint: String,
    pub consensus_k: usize,
    pub consensus_split: String,
    pub gradcheck_instances: usize,
    /// Every key with its resolved value.
    pub resolved: BTreeMap<String, String>,
}

/// Parses `key = value` lines, rejecting malformed lines and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = &kv[key];
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn core<T>(key: &str, r: hierpack_core::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn task_list(key: &str, v: &str) -> Result<Vec<TaskKind>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| core(key, TaskKind::from_id(s)))
        .collect()
}

impl RunConfig {
    /// Resolves a configuration from optional file text, overrides and a
    /// seed override. `base` anchors a relative `paths.root`.
    pub fn resolve(file: Option<&str>, overrides: &[String], seed: Option<u64>, base: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut apply = |k: &str, v: &str, origin: &str| -> Result<()> {
            match kv.get_mut(k) {
                Some(slot) => {
                    *slot = v.to_string();
                    Ok(())
                }
                None => Err(Error::Config(format!("unknown key {k:?} in {origin}"))),
            }
        };
        if let Some(text) = file {
            for (k, v) in parse_pairs(text)? {
                apply(&k, &v, "config file")?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply(k.trim(), v.trim(), "--set")?;
        }
        if let Some(s) = seed {
            apply("seed", &s.to_string(), "--seed")?;
        }
        Self::from_pairs(kv, base)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = path.map(fsutil::read_text).transpose().map_err(|e| match e {
            Error::Missing { path, .. } => Error::Config(format!("config file {} not found", path.display())),
            e => e,
        })?;
        let base = path.and_then(Path::parent).unwrap_or(Path::new("."));
        Self::resolve(text.as_deref(), overrides, seed, base)
    }

    fn from_pairs(kv: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let seed: u64 = parse(&kv, "seed")?;
        let root = base.join(&kv["paths.root"]);
        let paths = Paths {
            data: root.join(&kv["paths.data"]),
            checkpoints: root.join(&kv["paths.checkpoints"]),
            outputs: root.join(&kv["paths.outputs"]),
        };
        let data = GenConfig {
            videos: parse(&kv, "data.videos")?,
            verbs: parse(&kv, "data.verbs")?,
            nouns: parse(&kv, "data.nouns")?,
            actions: parse(&kv, "data.actions")?,
            dim: parse(&kv, "data.dim")?,
            sigma: parse(&kv, "data.sigma")?,
            temperature: parse(&kv, "data.temperature")?,
            min_segments: parse(&kv, "data.min_segments")?,
            max_segments: parse(&kv, "data.max_segments")?,
            min_duration: parse(&kv, "data.min_duration")?,
            max_duration: parse(&kv, "data.max_duration")?,
            horizon: parse(&kv, "data.horizon")?,
            val_fraction: parse(&kv, "data.val_fraction")?,
        };
        core("data", data.validate())?;

        let stages: usize = parse(&kv, "backbone.L")?;
        let layers: Vec<usize> = kv["backbone.layers"]
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("backbone.layers: cannot parse {s:?}"))))
            .collect::<Result<_>>()?;
        let layers_per_stage = if layers.len() == 1 { vec![layers[0]; stages] } else { layers };
        let backbone = BackboneConfig {
            stages,
            layers_per_stage,
            dim: parse(&kv, "backbone.dim")?,
            tau: parse(&kv, "backbone.tau")?,
            pool: core("backbone.pool", PoolMode::from_id(&kv["backbone.pool"]))?,
            gate_hidden: parse(&kv, "backbone.gate_hidden")?,
            activation: core("backbone.activation", Activation::from_id(&kv["backbone.activation"]))?,
        };
        core("backbone", backbone.validate())?;

        let supports = task_list("tasks.supports", &kv["tasks.supports"])?;
        if supports.is_empty() {
            return Err(Error::Config("tasks.supports: at least one support task is required".into()));
        }
        for (i, k) in supports.iter().enumerate() {
            if supports[..i].contains(k) {
                return Err(Error::Config(format!("tasks.supports: {k} is listed twice")));
            }
        }
        let novel_task = core("tasks.novel", TaskKind::from_id(&kv["tasks.novel"]))?;
        if supports.contains(&novel_task) {
            return Err(Error::Config(format!("tasks.novel: {novel_task} is also a support task")));
        }
        let train = |p: &str| -> Result<TrainConfig> {
            let t = TrainConfig {
                seed,
                steps: parse(&kv, &format!("{p}.steps"))?,
                batch: parse(&kv, &format!("{p}.batch"))?,
                lr: parse(&kv, &format!("{p}.lr"))?,
            };
            core(p, t.validate())?;
            Ok(t)
        };
        let pretrain = train("pretrain")?;
        let novel_train = train("novel")?;
        let interaction = InteractionConfig {
            k: parse(&kv, "backpack.k")?,
            layers: parse(&kv, "backpack.M")?,
            requery: parse(&kv, "backpack.requery")?,
            coupling: core("backpack.coupling", Coupling::from_id(&kv["backpack.coupling"]))?,
        };
        core("backpack", interaction.validate())?;
        let novel = NovelConfig {
            task: novel_task,
            fusion: core("backpack.fusion", Fusion::from_id(&kv["backpack.fusion"]))?,
            interaction,
            freeze_backbone: parse(&kv, "novel.freeze_backbone")?,
        };
        let eval = EvalConfig {
            score_threshold: parse(&kv, "eval.score_threshold")?,
            nms_iou: parse(&kv, "eval.nms_iou")?,
            batch: parse(&kv, "eval.batch")?,
        };
        for key in ["eval.score_threshold", "eval.nms_iou"] {
            let v: f64 = parse(&kv, key)?;
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{key} must lie in (0, 1), got {v}")));
            }
        }
        if eval.batch == 0 {
            return Err(Error::Config("eval.batch must be positive".into()));
        }
        let checkpoint_name = |key: &str| -> Result<String> {
            match kv[key].as_str() {
                s @ ("pretrain" | "backpack" | "novel") => Ok(s.to_string()),
                s => Err(Error::Config(format!("{key}: expected pretrain, backpack or novel, got {s:?}"))),
            }
        };
        let split = |key: &str| -> Result<String> {
            match kv[key].as_str() {
                s @ ("train" | "val") => Ok(s.to_string()),
                s => Err(Error::Config(format!("{key}: expected train or val, got {s:?}"))),
            }
        };
        let eval_task = match kv["eval.task"].as_str() {
            "" => None,
            s => Some(core("eval.task", TaskKind::from_id(s))?),
        };
        let consensus_k: usize = parse(&kv, "consensus.k")?;
        let gradcheck_instances: usize = parse(&kv, "gradcheck.instances")?;
        if consensus_k == 0 || gradcheck_instances == 0 {
            return Err(Error::Config("consensus.k and gradcheck.instances must be positive".into()));
        }
        Ok(RunConfig {
            seed,
            paths,
            data,
            backbone,
            supports,
            pretrain,
            novel,
            novel_train,
            novel_videos: parse(&kv, "novel.videos")?,
            eval,
            eval_checkpoint: checkpoint_name("eval.checkpoint")?,
            eval_task,
            eval_split: split("eval.split")?,
            consensus_checkpoint: checkpoint_name("consensus.checkpoint")?,
            consensus_k,
            consensus_split: split("consensus.split")?,
            gradcheck_instances,
            resolved: kv,
        })
    }

    /// The resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
