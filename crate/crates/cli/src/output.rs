//! Artifact writers. Every artifact carries a [`Provenance`]; wall-clock
//! time only goes to `run.log`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use faultclip_core::metrics::{RateSummary, SweepResult};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub command: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, command: &str) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_file(path, text.as_bytes())
}

/// `rate,trial,accuracy` rows after a `#` provenance line.
pub fn sweep_csv(result: &SweepResult, prov: &Provenance) -> Result<String, CliError> {
    let mut out = format!(
        "# config_hash={},seed={},version={}\n",
        prov.config_hash, prov.seed, prov.tool_version
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| CliError::Internal(format!("csv: {e}"));
        w.write_record(["rate", "trial", "accuracy"]).map_err(fail)?;
        for (rate, trial, acc) in result.rows() {
            w.write_record([rate.to_string(), trial.to_string(), format!("{acc:.6}")])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| CliError::Internal(format!("csv: {e}")))?;
    }
    String::from_utf8(out).map_err(|e| CliError::Internal(e.to_string()))
}

/// Box-plot style chart of accuracy per rate: whiskers at min/max, a box
/// from q1 to q3 and the mean curve.
pub fn sweep_svg(summary: &[RateSummary], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let n = summary.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {} V{} H{}" fill="none" stroke="black"/>"#,
        pad - 10.0,
        h - pad,
        w - pad
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.2}</text>"#,
            pad - 5.0,
            y(a) + 4.0
        );
    }
    let mut mean = String::new();
    for (i, r) in summary.iter().enumerate() {
        let cx = x(i);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="gray"/>"#,
            y(r.min),
            y(r.max)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="{:.1}" fill="lightsteelblue" stroke="steelblue"/>"#,
            cx - 6.0,
            y(r.q3),
            y(r.q1) - y(r.q3)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{:e}</text>"#,
            h - pad + 16.0,
            r.rate
        );
        let _ = write!(mean, "{}{cx:.1},{:.1}", if i == 0 { "" } else { " " }, y(r.mean));
    }
    let _ = writeln!(s, r#"<polyline points="{mean}" fill="none" stroke="firebrick" stroke-width="2"/>"#);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Appends a timestamped line to `run.log` in the output directory.
pub fn log_run(out_dir: &Path, prov: &Provenance, detail: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = format!(
        "unix_time={secs} command={} config_hash={} seed={} {detail}\n",
        prov.command, prov.config_hash, prov.seed
    );
    let res = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("run.log"))
        .and_then(|mut f| f.write_all(line.as_bytes()));
    if let Err(e) = res {
        log::warn!("cannot append to run.log: {e}");
    }
}
