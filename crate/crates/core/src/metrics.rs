//! Metric emission. Every run writes the same metrics twice: a CSV of
//! `key,value` rows and a JSON object. Keys are fixed per subcommand (no
//! run-dependent keys), CSV uses a '.' decimal with no locale dependence,
//! and JSON numbers carry 17 significant digits so reloads are bit-faithful.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::pipeline::RunMetrics;

/// Formats a float with 17 significant digits; round-trips every f64 bit
/// pattern (format! with `{:e}` is locale-independent in Rust).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Flattens metrics into a key-ordered list of scalar rows. The schema is a
/// function of the metric contents only: per-step losses as `loss.N`,
/// per-task accuracy as `accuracy.<task>`, the win/tie/loss tallies, then
/// sorted `extra` keys.
pub fn rows(metrics: &RunMetrics) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (i, l) in metrics.loss.iter().enumerate() {
        out.push((format!("loss.{i}"), *l));
    }
    for (task, acc) in &metrics.task_accuracy {
        out.push((format!("accuracy.{task}"), *acc));
    }
    out.push(("wins".into(), metrics.wins as f64));
    out.push(("ties".into(), metrics.ties as f64));
    out.push(("losses".into(), metrics.losses as f64));
    for (k, v) in &metrics.extra {
        out.push((format!("extra.{k}"), *v));
    }
    out
}

pub fn to_csv(metrics: &RunMetrics) -> String {
    let mut s = String::from("key,value\n");
    for (k, v) in rows(metrics) {
        s.push_str(&format!("{k},{}\n", format_float(v)));
    }
    s
}

pub fn to_json(metrics: &RunMetrics) -> String {
    let mut s = String::from("{\n");
    let rows = rows(metrics);
    for (i, (k, v)) in rows.iter().enumerate() {
        let comma = if i + 1 == rows.len() { "" } else { "," };
        s.push_str(&format!("  \"{k}\": {}{comma}\n", format_float(*v)));
    }
    s.push('}');
    s.push('\n');
    s
}

fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn emit(metrics: &RunMetrics, dir: &Path, stem: &str) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(format!("{stem}.csv")), &to_csv(metrics))?;
    write_atomic(&dir.join(format!("{stem}.json")), &to_json(metrics))
}
