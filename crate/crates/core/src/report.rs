//! Report rows and their CSV / JSON encodings.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::bounds::BoundEstimate;
use crate::config::ReportFormat;
use crate::data::SourceKind;
use crate::error::{AmiError, Result};
use crate::game::{GameEngine, GameRun, Resolved, TauOrigin};
use crate::ldp::{CheckResult, DpConfig, Mechanism};

pub const GAME_SCHEMA: &str = "ami-report/1";
pub const BOUNDS_SCHEMA: &str = "ami-bounds/1";
pub const DP_CHECK_SCHEMA: &str = "ami-dp-check/1";

/// Columns that change between identical runs.
pub const VOLATILE_COLUMNS: [&str; 2] = ["run_id", "wall_ms"];

pub const SCORE_KIND: &str = "max_abs_grad";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run_id: String,
    pub source: String,
    pub attack: String,
    pub variant: String,
    pub dp_mechanism: String,
    pub epsilon: f64,
    pub n: usize,
    #[serde(rename = "l_X")]
    pub l_x: usize,
    #[serde(rename = "d_X")]
    pub d_x: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub tau_origin: String,
    pub score_kind: String,
    pub trials: usize,
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub advantage: f64,
    pub condition_ratio: f64,
    pub condition_holds: String,
    pub seed: u64,
    pub wall_ms: f64,
}

fn tau_origin(o: TauOrigin) -> &'static str {
    match o {
        TauOrigin::Explicit => "config",
        TauOrigin::Vocabulary => "vocabulary",
        TauOrigin::ReferenceSample => "reference",
        TauOrigin::Fallback => "fallback",
    }
}

impl ReportRow {
    pub fn from_run(run_id: &str, engine: &GameEngine, dp: &DpConfig, run: &GameRun) -> Self {
        let cfg = engine.config();
        let r = engine.resolved();
        let (origin, holds) = match r {
            Resolved::Fc { origin, .. } => (tau_origin(*origin), "-"),
            Resolved::Attn { condition_holds, .. } => ("-", if *condition_holds { "true" } else { "false" }),
        };
        let m = &run.metrics;
        ReportRow {
            run_id: run_id.to_string(),
            source: cfg.source.kind().to_string(),
            attack: cfg.attack.name().to_string(),
            variant: cfg.attack.variant().to_string(),
            dp_mechanism: dp.mechanism.to_string(),
            epsilon: if dp.mechanism == Mechanism::None { f64::NAN } else { dp.epsilon },
            n: cfg.n,
            l_x: cfg.source.l_x(),
            d_x: cfg.source.d_x(),
            beta: r.beta(),
            gamma: r.gamma(),
            tau: r.tau(),
            tau_origin: origin.to_string(),
            score_kind: SCORE_KIND.to_string(),
            trials: run.outcomes.len(),
            acc: m.acc,
            f1: m.f1,
            auc: m.auc,
            tpr: m.tpr,
            tnr: m.tnr,
            advantage: m.advantage,
            condition_ratio: r.condition_ratio(),
            condition_holds: holds.to_string(),
            seed: cfg.seed,
            wall_ms: run.wall_ns() as f64 / 1e6,
        }
    }

    fn cmp_key(&self, o: &Self) -> Ordering {
        (&self.source, &self.attack, &self.variant, &self.dp_mechanism)
            .cmp(&(&o.source, &o.attack, &o.variant, &o.dp_mechanism))
            .then(self.epsilon.total_cmp(&o.epsilon))
            .then((self.n, self.l_x, self.d_x, self.seed).cmp(&(o.n, o.l_x, o.d_x, o.seed)))
    }
}

pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(ReportRow::cmp_key);
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsRow {
    pub source: String,
    #[serde(rename = "d_X")]
    pub d_x: usize,
    #[serde(rename = "l_X")]
    pub l_x: usize,
    pub beta: f64,
    pub p_proj: f64,
    pub p_proj_iid: f64,
    pub p_box: f64,
    pub bar_delta: f64,
    pub lower_bound: f64,
    pub condition_ratio: f64,
    pub samples: usize,
    pub n: usize,
    pub m: f64,
    pub delta: f64,
    pub p_proj_err: f64,
    pub p_box_err: f64,
    pub condition_holds: bool,
}

impl From<&BoundEstimate> for BoundsRow {
    fn from(b: &BoundEstimate) -> Self {
        BoundsRow {
            source: b.source.kind().to_string(),
            d_x: b.d_x,
            l_x: b.l_x,
            beta: b.beta,
            p_proj: b.p_proj,
            p_proj_iid: b.p_proj_iid,
            p_box: b.p_box,
            bar_delta: b.bar_delta,
            lower_bound: b.lower_bound,
            condition_ratio: b.condition_ratio,
            samples: b.samples,
            n: b.n,
            m: b.m,
            delta: b.delta,
            p_proj_err: b.p_proj_err,
            p_box_err: b.p_box_err,
            condition_holds: b.condition_holds,
        }
    }
}

pub fn sort_bounds(rows: &mut [BoundsRow]) {
    rows.sort_by(|a, b| (source_rank(&a.source), a.d_x, a.l_x).cmp(&(source_rank(&b.source), b.d_x, b.l_x)));
}

fn source_rank(s: &str) -> (u8, &str) {
    match s.parse::<SourceKind>() {
        Ok(SourceKind::OneHot) => (0, s),
        Ok(SourceKind::Spherical) => (1, s),
        Ok(SourceKind::Gaussian) => (2, s),
        _ => (3, s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub mechanism: String,
    pub statistic: String,
    pub epsilon: f64,
    pub k: usize,
    pub observations: u64,
    pub empirical: f64,
    pub expected: f64,
    pub sigma: f64,
    pub pass: bool,
}

impl From<&CheckResult> for CheckRow {
    fn from(c: &CheckResult) -> Self {
        CheckRow {
            mechanism: c.mechanism.to_string(),
            statistic: c.statistic.to_string(),
            epsilon: c.epsilon,
            k: c.k,
            observations: c.observations,
            empirical: c.empirical,
            expected: c.expected,
            sigma: c.sigma,
            pass: c.pass,
        }
    }
}

fn csv_err(e: csv::Error) -> AmiError {
    AmiError::Io(std::io::Error::other(e))
}

/// CSV with a leading `# <schema>` line; the header comes from the row type.
pub fn to_csv<T: Serialize>(schema: &str, rows: &[T]) -> Result<String> {
    let mut out = format!("# {schema}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    String::from_utf8(out).map_err(|e| AmiError::Io(std::io::Error::other(e)))
}

#[derive(Serialize)]
struct JsonReport<'a, T> {
    schema: &'a str,
    rows: &'a [T],
}

/// `{"schema": ..., "rows": [...]}`; non-finite numbers become `null`.
pub fn to_json<T: Serialize>(schema: &str, rows: &[T]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&JsonReport { schema, rows })
        .map_err(|e| AmiError::Io(std::io::Error::other(e)))?;
    s.push('\n');
    Ok(s)
}

pub fn render<T: Serialize>(schema: &str, rows: &[T], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => to_csv(schema, rows),
        ReportFormat::Json => to_json(schema, rows),
    }
}

/// Writes to `path`, or to stdout when there is none.
pub fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

/// The report with run-dependent columns removed, for comparing runs.
pub fn canonical_body(text: &str) -> Result<String> {
    if text.trim_start().starts_with('{') {
        let mut v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| AmiError::Io(std::io::Error::other(e)))?;
        if let Some(rows) = v.get_mut("rows").and_then(|r| r.as_array_mut()) {
            for r in rows.iter_mut().filter_map(|r| r.as_object_mut()) {
                for c in VOLATILE_COLUMNS {
                    r.remove(c);
                }
            }
        }
        return Ok(v.to_string());
    }
    let (schema, body) = text.split_once('\n').unwrap_or(("", text));
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut keep: Option<Vec<bool>> = None;
    let mut out = String::from(schema);
    out.push('\n');
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let mask = keep.get_or_insert_with(|| rec.iter().map(|h| !VOLATILE_COLUMNS.contains(&h)).collect());
        let fields: Vec<&str> = rec.iter().zip(mask.iter()).filter(|(_, &k)| k).map(|(f, _)| f).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}
