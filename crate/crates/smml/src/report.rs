//! Report rendering: CSV at full precision, markdown at one decimal.

use std::fmt::Write as _;
use std::path::Path;

use smml_core::eval::{EvalReport, Region};
use smml_core::masking::ModalityMask;

use crate::dataset::modality_names;
use crate::driver::AblationRow;
use crate::error::{write, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn region_header() -> String {
    Region::ALL.iter().map(Region::name).collect::<Vec<_>>().join(",")
}

/// One row per subset: presence flags per modality, then WT,TC,ET.
pub fn report_csv(report: &EvalReport) -> String {
    let k = report.masks.first().map_or(0, ModalityMask::len);
    let mut out = format!("{},{}\n", modality_names(k).join(","), region_header());
    for (m, row) in report.masks.iter().zip(&report.rows) {
        let flags: Vec<&str> = m.bits().iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(out, "{},{},{},{}", flags.join(","), row[0], row[1], row[2]);
    }
    out
}

pub fn parse_report_csv(text: &str) -> std::result::Result<EvalReport, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty report")?.split(',').collect();
    if header.len() < 4 || header[header.len() - 3..].join(",") != region_header() {
        return Err(format!("unexpected header {header:?}"));
    }
    let k = header.len() - 3;
    let mut masks = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != k + 3 {
            return Err(format!("row {}: expected {} fields", i + 2, k + 3));
        }
        let bits = f[..k]
            .iter()
            .map(|s| match *s {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(format!("row {}: bad flag {other:?}", i + 2)),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut row = [0.0; 3];
        for (r, s) in row.iter_mut().zip(&f[k..]) {
            *r = s.parse().map_err(|_| format!("row {}: bad number {s:?}", i + 2))?;
        }
        masks.push(ModalityMask::new(bits));
        rows.push(row);
    }
    Ok(EvalReport { masks, rows })
}

/// Table with `●`/`○` mask strings, 1-decimal DSC and an average row.
pub fn report_markdown(report: &EvalReport) -> String {
    let k = report.masks.first().map_or(0, ModalityMask::len);
    let mut out = format!("| {} | WT | TC | ET |\n|---|---:|---:|---:|\n", modality_names(k).join(" "));
    for (m, row) in report.masks.iter().zip(&report.rows) {
        let _ = writeln!(out, "| {} | {:.1} | {:.1} | {:.1} |", m.render(), row[0], row[1], row[2]);
    }
    let avg = report.region_means();
    let _ = writeln!(out, "| Avg | {:.1} | {:.1} | {:.1} |", avg[0], avg[1], avg[2]);
    out
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Markdown => report_markdown(report),
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    write(path, render_report(report, format))
}

pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    parse_report_csv(&crate::error::read_string(path)?).map_err(|e| Error::format(path, e))
}

/// Region means and their mean per variant, in percent.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Variant | WT | TC | ET | Mean |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        let m = r.report.region_means();
        let _ = writeln!(out, "| {} | {:.1} | {:.1} | {:.1} | {:.1} |", r.variant.label(), m[0], m[1], m[2], r.report.grand_mean());
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,WT,TC,ET,mean\n");
    for r in rows {
        let m = r.report.region_means();
        let _ = writeln!(out, "{},{},{},{},{}", r.variant.name(), m[0], m[1], m[2], r.report.grand_mean());
    }
    out
}
