//! `report`: collates whatever artifacts exist into `report.md`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use crate::commands::{
    ARCHITECTURE, BASELINE, COST_TABLE, METRICS, SCREENING_REMOVALS, SEARCH_SPACES, SEARCH_TRACE, SPACES,
};
use crate::config::RunConfig;
use crate::Failure;

pub const REPORT: &str = "report.md";

fn csv_table(path: &Path, max_rows: usize) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let mut s = String::new();
    writeln!(s, "| {} |", headers.iter().collect::<Vec<_>>().join(" | "))?;
    writeln!(s, "|{}", "---|".repeat(headers.len()))?;
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
    for rec in rows.iter().take(max_rows) {
        writeln!(s, "| {} |", rec.iter().collect::<Vec<_>>().join(" | "))?;
    }
    if rows.len() > max_rows {
        writeln!(s, "\n({} more rows in `{}`)", rows.len() - max_rows, path.file_name().unwrap_or_default().to_string_lossy())?;
    }
    Ok(Some(s))
}

fn json_fields(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut s = String::from("| key | value |\n|---|---|\n");
    if let serde_json::Value::Object(m) = v {
        for (k, v) in m {
            let shown = match &v {
                serde_json::Value::Array(a) => format!("{} entries", a.len()),
                other => other.to_string(),
            };
            writeln!(s, "| {k} | {shown} |")?;
        }
    }
    Ok(Some(s))
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out_dir;
    let mut doc = format!("# trinas run report\n\nprofile `{:?}`, seed {}\n", cfg.profile, cfg.seed).to_lowercase();
    let mut sections = 0;
    let mut add = |title: &str, body: Option<String>| {
        if let Some(b) = body {
            let _ = write!(doc, "\n## {title}\n\n{b}");
            sections += 1;
        }
    };
    let text = |name: &str| -> Option<String> {
        fs::read_to_string(out.join(name)).ok().map(|t| format!("```text\n{t}```\n"))
    };
    add("Screening removals", csv_table(&out.join(SCREENING_REMOVALS), 200)?);
    add("Screened sub spaces", text(SPACES));
    add("Searched sub spaces", text(SEARCH_SPACES));
    add("Search trace", csv_table(&out.join(SEARCH_TRACE), 200)?);
    add("Architecture", text(ARCHITECTURE));
    add("Cost table", csv_table(&out.join(COST_TABLE), 40)?);
    add("Test metrics", json_fields(&out.join(METRICS))?);
    add("Random-architecture baseline", baseline_section(&out.join(BASELINE))?);
    if sections == 0 {
        return Err(Failure::Missing {
            path: out.clone(),
            hint: "no artifacts to report; run `trinas screen` or `trinas search` first".into(),
        }
        .into());
    }
    fs::write(out.join(REPORT), &doc)?;
    print!("{doc}");
    Ok(())
}

fn baseline_section(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut s = String::from("| architecture | loss | accuracy | mean IoU |\n|---|---|---|---|\n");
    let mut row = |name: &str, m: &serde_json::Value| {
        let _ = writeln!(s, "| {name} | {} | {} | {} |", m["loss"], m["accuracy"], m["mean_iou"]);
    };
    row("searched", &v["searched"]);
    if let Some(runs) = v["random"].as_array() {
        for (i, m) in runs.iter().enumerate() {
            row(&format!("random {i}"), m);
        }
    }
    row("random mean", &v["random_mean"]);
    Ok(Some(s))
}
