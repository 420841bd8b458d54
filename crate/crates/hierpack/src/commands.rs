//! One function per subcommand. Each reads its inputs, writes its outputs
//! atomically under the configured directories and reports to `out`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hierpack_core::data::{generate, Video};
use hierpack_core::gradcheck::{self, GradCheckConfig};
use hierpack_core::model::ModelConfig;
use hierpack_core::tasks::{MetricRecord, TaskKind};
use hierpack_core::train::{
    activations, build_prototypes, consensus_matrix, evaluate, stage1_mtl, stage2_novel, Checkpoint, Observer, StepLog,
};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{Dataset, Manifest, Split, VideoRecord};
use crate::{checkpoint, features, fsutil, labels};

/// Streams training rows to a temporary file that becomes the log on
/// `finish`, so a failed run still leaves the rows it reached.
struct TsvLog {
    path: PathBuf,
    tmp: PathBuf,
    file: std::io::BufWriter<fs::File>,
    start: Instant,
    error: Option<std::io::Error>,
}

impl TsvLog {
    fn create(path: PathBuf) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("tsv.partial");
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut file = std::io::BufWriter::new(f);
        writeln!(file, "step\ttask\tloss\twall_clock").map_err(|e| Error::io(&tmp, e))?;
        Ok(TsvLog { path, tmp, file, start: Instant::now(), error: None })
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.tmp, e));
        }
        self.file.flush().map_err(|e| Error::io(&self.tmp, e))?;
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Observer for TsvLog {
    fn log(&mut self, row: &StepLog) {
        if self.error.is_none() {
            let t = self.start.elapsed().as_secs_f64();
            if let Err(e) = writeln!(self.file, "{}\t{}\t{}\t{t:.3}", row.step, row.task, row.loss) {
                self.error = Some(e);
            }
        }
    }
}

fn run_logged<T>(path: PathBuf, f: impl FnOnce(&mut TsvLog) -> hierpack_core::Result<T>) -> Result<T> {
    let mut log = TsvLog::create(path)?;
    let r = f(&mut log);
    log.finish()?;
    Ok(r?)
}

fn write_config(cfg: &RunConfig, command: &str) -> Result<()> {
    fsutil::write_atomic(&cfg.paths.output(&format!("{command}.config.txt")), cfg.to_text().as_bytes())
}

fn metrics_tsv(rows: &[(TaskKind, MetricRecord)]) -> String {
    let mut s = String::from("task\tmetric\tvalue\n");
    for (k, m) in rows {
        for (name, v) in m.iter() {
            let _ = writeln!(s, "{k}\t{name}\t{v}");
        }
    }
    s
}

fn report(out: &mut dyn Write, rows: &[(TaskKind, MetricRecord)]) -> Result<()> {
    for (k, m) in rows {
        let parts: Vec<String> = m.iter().filter(|(n, _)| !n.contains('@')).map(|(n, v)| format!("{n}={v:.4}")).collect();
        let _ = writeln!(out, "{k}: {}", parts.join(" "));
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, name: &str, producer: &str) -> Result<Checkpoint> {
    let path = cfg.paths.checkpoint(name);
    if !path.exists() {
        return Err(Error::Missing { path, hint: format!("run `{producer}` first") });
    }
    let ckpt = checkpoint::load(&path)?;
    if ckpt.meta.model.backbone != cfg.backbone {
        let expected = ModelConfig { backbone: cfg.backbone.clone(), labels: ckpt.meta.model.labels };
        let mut want = ckpt.meta.clone();
        want.model = expected;
        return Err(Error::Config(format!(
            "{} has config fingerprint {} but the current backbone configuration gives {}",
            path.display(),
            checkpoint::fingerprint(&ckpt.meta),
            checkpoint::fingerprint(&want)
        )));
    }
    Ok(ckpt)
}

fn load_data(cfg: &RunConfig, tasks: &[TaskKind]) -> Result<Dataset> {
    let path = cfg.paths.manifest();
    if !path.exists() {
        return Err(Error::Missing { path, hint: "run `gen-data` first".into() });
    }
    let data = Dataset::load(&path, tasks)?;
    if data.manifest.dim != cfg.backbone.dim {
        return Err(Error::Config(format!(
            "backbone.dim = {} but the dataset features have width {}",
            cfg.backbone.dim, data.manifest.dim
        )));
    }
    Ok(data)
}

fn split<'d>(data: &'d Dataset, which: &str) -> &'d [Video] {
    if which == "train" {
        &data.train
    } else {
        &data.val
    }
}

pub fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = generate(&cfg.data, cfg.seed)?;
    let root = &cfg.paths.data;
    let mut records = Vec::with_capacity(data.videos.len());
    for (i, sv) in data.videos.iter().enumerate() {
        let v = &sv.video;
        let rel = PathBuf::from("features").join(format!("{}.hepf", v.id));
        features::write(&root.join(&rel), &v.features)?;
        records.push(VideoRecord {
            id: v.id.clone(),
            split: if i < data.train { Split::Train } else { Split::Val },
            segments: v.len(),
            features: rel,
        });
    }
    let mut label_files = std::collections::BTreeMap::new();
    for k in TaskKind::ALL {
        let rel = PathBuf::from("labels").join(format!("{k}.tsv"));
        let text = labels::encode(k, data.videos.iter().map(|s| (s.video.id.as_str(), s.video.annotations(k))));
        fsutil::write_atomic(&root.join(&rel), text.as_bytes())?;
        label_files.insert(k, rel);
    }
    let manifest = Manifest { seed: cfg.seed, labels: data.labels(), dim: cfg.data.dim, label_files, videos: records };
    let path = cfg.paths.manifest();
    fsutil::write_atomic(&path, manifest.to_text().as_bytes())?;
    write_config(cfg, "gen-data")?;
    let _ = writeln!(out, "wrote {} videos ({} train) to {}", data.videos.len(), data.train, path.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg, &cfg.supports)?;
    let model = ModelConfig { backbone: cfg.backbone.clone(), labels: data.manifest.labels };
    write_config(cfg, "pretrain")?;
    let (ckpt, _) = run_logged(cfg.paths.output("pretrain_log.tsv"), |log| {
        stage1_mtl(&model, &cfg.supports, &cfg.pretrain, &data.train, log)
    })?;
    let path = cfg.paths.checkpoint("pretrain");
    checkpoint::save(&path, &ckpt)?;
    let mut rows = Vec::new();
    if !data.val.is_empty() {
        for &k in &cfg.supports {
            rows.push((k, evaluate(&ckpt, &data.val, k, &cfg.eval)?));
        }
        fsutil::write_atomic(&cfg.paths.output("pretrain_metrics.tsv"), metrics_tsv(&rows).as_bytes())?;
    }
    let _ = writeln!(out, "checkpoint {} fingerprint {}", path.display(), checkpoint::fingerprint(&ckpt.meta));
    report(out, &rows)
}

pub fn build_backpack(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(cfg, "pretrain", "pretrain")?;
    let data = load_data(cfg, &[TaskKind::Recognition])?;
    let built = build_prototypes(&ckpt, &data.train, &cfg.eval)?;
    let path = cfg.paths.checkpoint("backpack");
    checkpoint::save(&path, &built)?;
    write_config(cfg, "build-backpack")?;
    for (k, p) in &built.prototypes {
        let _ = writeln!(out, "{k}: {} prototypes of width {}", p.len(), p.dim());
    }
    let _ = writeln!(out, "checkpoint {}", path.display());
    Ok(())
}

pub fn train_novel(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(cfg, "backpack", "build-backpack")?;
    if ckpt.prototypes.is_empty() {
        return Err(Error::Missing { path: cfg.paths.checkpoint("backpack"), hint: "no prototypes; run `build-backpack`".into() });
    }
    let task = cfg.novel.task;
    let data = load_data(cfg, &[task])?;
    let train = match cfg.novel_videos {
        0 => &data.train[..],
        n => &data.train[..n.min(data.train.len())],
    };
    write_config(cfg, "train-novel")?;
    let (trained, _) =
        run_logged(cfg.paths.output("novel_log.tsv"), |log| stage2_novel(&ckpt, &cfg.novel, &cfg.novel_train, train, log))?;
    let path = cfg.paths.checkpoint("novel");
    checkpoint::save(&path, &trained)?;
    let mut rows = Vec::new();
    if !data.val.is_empty() {
        rows.push((task, evaluate(&trained, &data.val, task, &cfg.eval)?));
        fsutil::write_atomic(&cfg.paths.output("novel_metrics.tsv"), metrics_tsv(&rows).as_bytes())?;
    }
    let _ = writeln!(out, "checkpoint {} fingerprint {}", path.display(), checkpoint::fingerprint(&trained.meta));
    report(out, &rows)
}

pub fn run_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let producer = match cfg.eval_checkpoint.as_str() {
        "pretrain" => "pretrain",
        "backpack" => "build-backpack",
        _ => "train-novel",
    };
    let ckpt = load_checkpoint(cfg, &cfg.eval_checkpoint, producer)?;
    let tasks: Vec<TaskKind> = match (cfg.eval_task, &ckpt.meta.novel) {
        (Some(t), _) => vec![t],
        (None, Some(n)) => vec![n.task],
        (None, None) => ckpt.meta.supports.clone(),
    };
    let data = load_data(cfg, &tasks)?;
    let videos = split(&data, &cfg.eval_split);
    let rows = tasks
        .iter()
        .map(|&k| Ok((k, evaluate(&ckpt, videos, k, &cfg.eval)?)))
        .collect::<Result<Vec<_>>>()?;
    let name = format!("eval_{}_{}.tsv", cfg.eval_checkpoint, cfg.eval_split);
    fsutil::write_atomic(&cfg.paths.output(&name), metrics_tsv(&rows).as_bytes())?;
    report(out, &rows)
}

pub fn run_consensus(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let producer = if cfg.consensus_checkpoint == "novel" { "train-novel" } else { "build-backpack" };
    let ckpt = load_checkpoint(cfg, &cfg.consensus_checkpoint, producer)?;
    if ckpt.prototypes.is_empty() {
        return Err(Error::Missing {
            path: cfg.paths.checkpoint(&cfg.consensus_checkpoint),
            hint: "no prototypes; run `build-backpack`".into(),
        });
    }
    let task = ckpt.meta.novel.as_ref().map_or(TaskKind::Recognition, |n| n.task);
    let data = load_data(cfg, &[task])?;
    let records = activations(&ckpt, split(&data, &cfg.consensus_split), cfg.consensus_k, &cfg.eval)?;
    let tasks: Vec<TaskKind> = ckpt.prototypes.keys().copied().collect();
    let m = consensus_matrix(&records, &tasks)?;
    let mut text = String::from("task");
    for k in &tasks {
        let _ = write!(text, "\t{k}");
    }
    text.push('\n');
    for (k, row) in tasks.iter().zip(&m) {
        let _ = write!(text, "{k}");
        for v in row {
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    }
    fsutil::write_atomic(&cfg.paths.output("consensus.tsv"), text.as_bytes())?;
    let _ = writeln!(out, "consensus over {} samples, k = {}", records.len(), cfg.consensus_k);
    for (k, row) in tasks.iter().zip(&m) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.2}")).collect();
        let _ = writeln!(out, "{k:>5} {}", cells.join(" "));
    }
    Ok(())
}

pub fn grad_check(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let gc = GradCheckConfig { seed: cfg.seed, instances: cfg.gradcheck_instances };
    let mut text = String::from("case\tkind\tinstances\tmax_rel_error\ttolerance\tverdict\n");
    let report = gradcheck::run(&gc, |c| {
        let _ = writeln!(out, "{}", c.line());
        let _ = writeln!(text, "{}", c.line());
    })?;
    fsutil::write_atomic(&cfg.paths.output("gradcheck.tsv"), text.as_bytes())?;
    let worst = |e2e: bool| report.cases.iter().filter(|c| c.end_to_end == e2e).map(|c| c.worst).fold(0.0, f64::max);
    let _ = writeln!(out, "max relative error: per-op {:.3e}, end-to-end {:.3e}", worst(false), worst(true));
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(hierpack_core::Error::Validation(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}
