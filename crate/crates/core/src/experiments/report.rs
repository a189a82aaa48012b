use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DopError, Result};

/// Seed-mean ROUGE F1 triple with its standard error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: [f64; 3],
    pub std_err: [f64; 3],
    /// Successful seeds behind the mean.
    pub seeds: usize,
    pub failures: usize,
}

impl Aggregate {
    pub fn from_scores(scores: &[[f64; 3]], failures: usize) -> Self {
        let n = scores.len();
        let mut mean = [0.0; 3];
        let mut std_err = [0.0; 3];
        if n > 0 {
            for i in 0..3 {
                mean[i] = scores.iter().map(|s| s[i]).sum::<f64>() / n as f64;
                if n > 1 {
                    let var = scores.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1) as f64;
                    std_err[i] = (var / n as f64).sqrt();
                }
            }
        }
        Self {
            mean,
            std_err,
            seeds: n,
            failures,
        }
    }

    pub fn ok(&self) -> bool {
        self.failures == 0 && self.seeds > 0
    }

    pub(crate) fn cell(&self, i: usize) -> String {
        if self.seeds == 0 {
            return "FAILED".into();
        }
        let mark = if self.failures > 0 { " (partial)" } else { "" };
        format!("{:.2} ± {:.2}{mark}", 100.0 * self.mean[i], 100.0 * self.std_err[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// One aggregate per column.
    pub cells: Vec<Aggregate>,
}

/// Rows by columns, each cell rendered as R-1, R-2 and R-L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ScoreTable {
    pub fn new(title: &str, row_header: &str, columns: Vec<String>) -> Self {
        Self {
            title: title.to_string(),
            row_header: row_header.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn get(&self, row: &str, column: &str) -> Option<&Aggregate> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row).and_then(|r| r.cells.get(c))
    }

    fn markdown(&self) -> String {
        let mut s = format!("## {}\n\n| {} |", self.title, self.row_header);
        for c in &self.columns {
            let _ = write!(s, " {c} R-1 | {c} R-2 | {c} R-L | {c} n |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(4 * self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.label);
            for a in &r.cells {
                let _ = write!(s, " {} | {} | {} | {} |", a.cell(0), a.cell(1), a.cell(2), a.seeds);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub x: f64,
    pub score: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x_label: String,
    pub points: Vec<SeriesPoint>,
}

impl Series {
    fn csv(&self) -> String {
        let mut s = String::from("x,r1,r2,rl,r1_se,r2_se,rl_se,seeds,failures\n");
        for p in &self.points {
            let a = &p.score;
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                p.x, a.mean[0], a.mean[1], a.mean[2], a.std_err[0], a.std_err[1], a.std_err[2], a.seeds, a.failures
            );
        }
        s
    }

    /// Line plot of the three seed-mean series, one marker per point.
    fn svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const M: f64 = 48.0;
        let xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = if x1 > x0 { x1 - x0 } else { 1.0 };
        let top = self
            .points
            .iter()
            .flat_map(|p| p.score.mean)
            .fold(0.0f64, f64::max);
        let y_max = ((top * 10.0).ceil() / 10.0).max(0.1);
        let px = |x: f64| M + (x - x0) / span * (W - 2.0 * M);
        let py = |y: f64| H - M - y / y_max * (H - 2.0 * M);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
             <line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n\
             <text x=\"12\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(-90 12 {:.1})\">ROUGE F1</text>\n",
            W / 2.0,
            self.name,
            H - M,
            W - M,
            H - M,
            H - M,
            W / 2.0,
            H - 10.0,
            self.x_label,
            H / 2.0,
            H / 2.0,
        );
        for &x in &xs {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{x}</text>",
                px(x),
                H - M + 14.0
            );
        }
        for k in 0..=4 {
            let y = y_max * k as f64 / 4.0;
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{y:.2}</text>",
                M - 4.0,
                py(y) + 3.0
            );
        }
        for (i, (name, color)) in [("R-1", "#1f77b4"), ("R-2", "#ff7f0e"), ("R-L", "#2ca02c")].iter().enumerate() {
            let pts: Vec<String> = self
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", px(p.x), py(p.score.mean[i])))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
            for p in &self.points {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                    px(p.x),
                    py(p.score.mean[i])
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
                W - M + 4.0,
                M + 14.0 * i as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Split hash per `target/seed/k/source-limit`; runs that share a key
    /// must have used the same split.
    pub split_hashes: BTreeMap<String, String>,
    /// Stage timings in seconds; logged, never written to report files.
    #[serde(skip)]
    pub durations: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tables: Vec<ScoreTable>,
    pub series: Vec<Series>,
    /// One message per failed run.
    pub failures: Vec<String>,
    pub metadata: RunMetadata,
}

impl ExperimentReport {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            metadata,
            ..Self::default()
        }
    }

    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Folds `other` into `self`; metadata must describe the same config.
    pub fn merge(&mut self, other: ExperimentReport) -> Result<()> {
        if !self.metadata.config_hash.is_empty() && self.metadata.config_hash != other.metadata.config_hash {
            return Err(DopError::contract("cannot merge reports of different configs"));
        }
        self.metadata.config_hash = other.metadata.config_hash;
        self.metadata.seeds = other.metadata.seeds;
        for (k, v) in other.metadata.split_hashes {
            if let Some(old) = self.metadata.split_hashes.get(&k) {
                if *old != v {
                    return Err(DopError::contract(format!("split hash mismatch for {k}")));
                }
            }
            self.metadata.split_hashes.insert(k, v);
        }
        self.metadata.durations.extend(other.metadata.durations);
        self.tables.extend(other.tables);
        self.series.extend(other.series);
        self.failures.extend(other.failures);
        Ok(())
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Experiment report\n\n");
        let _ = writeln!(s, "- config hash: `{}`", self.metadata.config_hash);
        let seeds: Vec<String> = self.metadata.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "- seeds: {}", seeds.join(", "));
        s.push_str("- cells: mean ± standard error of F1 × 100 over `n` seeds\n\n");
        for t in &self.tables {
            s.push_str(&t.markdown());
            s.push('\n');
        }
        for sr in &self.series {
            let _ = writeln!(s, "## Sweep: {}\n", sr.name);
            let _ = writeln!(s, "| {} | R-1 | R-2 | R-L | n |\n|---:|---:|---:|---:|---:|", sr.x_label);
            for p in &sr.points {
                let a = &p.score;
                let _ = writeln!(s, "| {} | {} | {} | {} | {} |", p.x, a.cell(0), a.cell(1), a.cell(2), a.seeds);
            }
            let _ = writeln!(s, "\n![{}]({}.svg)\n", sr.name, sr.name);
        }
        if !self.failures.is_empty() {
            s.push_str("## Failures\n\n");
            for f in &self.failures {
                let _ = writeln!(s, "- {f}");
            }
            s.push('\n');
        }
        if !self.metadata.split_hashes.is_empty() {
            s.push_str("## Splits\n\n| run | split sha256 |\n|---|---|\n");
            for (k, v) in &self.metadata.split_hashes {
                let _ = writeln!(s, "| {k} | `{v}` |");
            }
        }
        s
    }
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| DopError::io(&path, e))?;
    Ok(path)
}

/// Writes `report.md`, `report.json`, and a CSV and SVG per series. Returns
/// the written paths.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| DopError::io(out_dir, e))?;
    let mut files = vec![
        write(out_dir.join("report.md"), &report.markdown())?,
        write(out_dir.join("report.json"), &(serde_json::to_string_pretty(report)? + "\n"))?,
    ];
    for s in &report.series {
        files.push(write(out_dir.join(format!("{}.csv", s.name)), &s.csv())?);
        files.push(write(out_dir.join(format!("{}.svg", s.name)), &s.svg())?);
    }
    for (stage, secs) in &report.metadata.durations {
        log::info!("duration {stage}: {secs:.2}s");
    }
    Ok(files)
}
