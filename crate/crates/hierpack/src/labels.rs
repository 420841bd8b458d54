//! Per-task annotation tables: one tab-separated row per annotation,
//! `video start end label...`, with a `#` header line.
//!
//! Label columns: `ar` verb and noun, `oscc` 0 or 1, `pnr` keyframe time,
//! `lta` comma-separated `verb:noun` pairs, `mq` class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hierpack_core::tasks::{Action, Label, SegmentAnnotation, TaskKind};

use crate::error::{Error, Result};

pub type Table = BTreeMap<String, Vec<SegmentAnnotation>>;

fn header(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Recognition => "verb\tnoun",
        TaskKind::StateChange => "state_change",
        TaskKind::Keyframe => "keyframe",
        TaskKind::Anticipation => "future",
        TaskKind::Localization => "class",
    }
}

/// Renders rows for `videos` in the given order.
pub fn encode<'a>(kind: TaskKind, videos: impl IntoIterator<Item = (&'a str, &'a [SegmentAnnotation])>) -> String {
    let mut out = format!("# video\tstart\tend\t{}\n", header(kind));
    for (id, anns) in videos {
        for a in anns {
            let _ = write!(out, "{id}\t{}\t{}\t", a.start, a.end);
            let _ = match &a.label {
                Label::Action(x) => write!(out, "{}\t{}", x.verb, x.noun),
                Label::StateChange(b) => write!(out, "{}", u8::from(*b)),
                Label::Keyframe(t) => write!(out, "{t}"),
                Label::Future(f) => {
                    let parts: Vec<String> = f.iter().map(|x| format!("{}:{}", x.verb, x.noun)).collect();
                    write!(out, "{}", parts.join(","))
                }
                Label::Class(c) => write!(out, "{c}"),
            };
            out.push('\n');
        }
    }
    out
}

fn action(s: &str) -> Option<Action> {
    let (v, n) = s.split_once(':')?;
    Some(Action::new(v.parse().ok()?, n.parse().ok()?))
}

pub fn decode(kind: TaskKind, text: &str, path: &Path) -> Result<Table> {
    let mut table = Table::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::format(path, at, format!("{kind} row {line:?}: {m}"));
        let cols: Vec<&str> = line.split('\t').collect();
        let want = if kind == TaskKind::Recognition { 5 } else { 4 };
        if cols.len() != want {
            return Err(bad(&format!("expected {want} columns, found {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let (start, end) = match (num(cols[1]), num(cols[2])) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(bad("start and end must be numbers")),
        };
        let label = match kind {
            TaskKind::Recognition => match (cols[3].parse(), cols[4].parse()) {
                (Ok(v), Ok(n)) => Label::Action(Action::new(v, n)),
                _ => return Err(bad("verb and noun must be integers")),
            },
            TaskKind::StateChange => match cols[3] {
                "0" => Label::StateChange(false),
                "1" => Label::StateChange(true),
                _ => return Err(bad("state change must be 0 or 1")),
            },
            TaskKind::Keyframe => Label::Keyframe(num(cols[3]).ok_or_else(|| bad("keyframe must be a number"))?),
            TaskKind::Anticipation => Label::Future(
                cols[3].split(',').map(action).collect::<Option<Vec<_>>>().ok_or_else(|| bad("future must be verb:noun pairs"))?,
            ),
            TaskKind::Localization => Label::Class(cols[3].parse().map_err(|_| bad("class must be an integer"))?),
        };
        table.entry(cols[0].to_string()).or_default().push(SegmentAnnotation { start, end, label });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(kind: TaskKind) -> Vec<SegmentAnnotation> {
        let label = match kind {
            TaskKind::Recognition => Label::Action(Action::new(3, 7)),
            TaskKind::StateChange => Label::StateChange(true),
            TaskKind::Keyframe => Label::Keyframe(1.6),
            TaskKind::Anticipation => Label::Future(vec![Action::new(1, 2), Action::new(0, 5)]),
            TaskKind::Localization => Label::Class(4),
        };
        vec![SegmentAnnotation { start: 0.0, end: 2.5, label: label.clone() }, SegmentAnnotation { start: 2.5, end: 4.0, label }]
    }

    #[test]
    fn every_task_round_trips() {
        for kind in TaskKind::ALL {
            let r = rows(kind);
            let text = encode(kind, [("v0001", r.as_slice())]);
            let back = decode(kind, &text, Path::new("t")).unwrap();
            assert_eq!(back["v0001"], r, "{kind}");
        }
    }

    #[test]
    fn malformed_rows_report_their_offset() {
        let text = "# header\nv1\t0\t1\t2\n";
        match decode(TaskKind::Recognition, text, Path::new("t")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 9),
            e => panic!("{e}"),
        }
        assert!(decode(TaskKind::StateChange, "v1\t0\t1\tyes\n", Path::new("t")).is_err());
        assert!(decode(TaskKind::Anticipation, "v1\t0\t1\t1-2\n", Path::new("t")).is_err());
    }
}
