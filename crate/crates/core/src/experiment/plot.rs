//! Aggregation of finished runs into curve, heatmap and table data, plus a
//! minimal SVG line chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_record, RunRecord};
use crate::error::{Error, Result};
use crate::eval::{gate_correlation, top_indices, TOP_UNITS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    RepCurve,
    ClCurve,
    SimilarityTrace,
    GateHeatmap,
    Table,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rep_curve" => PlotKind::RepCurve,
            "cl_curve" => PlotKind::ClCurve,
            "similarity_trace" => PlotKind::SimilarityTrace,
            "gate_heatmap" => PlotKind::GateHeatmap,
            "table" => PlotKind::Table,
            other => {
                return Err(Error::config(
                    "kind",
                    format!(
                        "unknown plot kind `{other}` (rep_curve, cl_curve, similarity_trace, gate_heatmap, table)"
                    ),
                ))
            }
        })
    }
}

/// Mean, sample standard deviation (0 for a single value) and count.
pub fn mean_std(values: &[f64]) -> (f64, f64, usize) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub task_index: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

fn collect_json(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n != "timing") {
                    collect_json(&p, out)?;
                }
            } else if p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed-") && n.ends_with(".json"))
            {
                out.push(p);
            }
        }
        Ok(())
    } else {
        out.push(path.to_path_buf());
        Ok(())
    }
}

/// Load run records from files or result directories, refusing to mix
/// configurations.
pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    for p in paths {
        collect_json(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::config("results", "no result files found"));
    }
    let records = files
        .iter()
        .map(|f| read_record(f))
        .collect::<Result<Vec<_>>>()?;
    check_compatible(&records)?;
    Ok(records)
}

pub fn check_compatible(records: &[RunRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.config_hash != first.config_hash) {
            return Err(Error::MixedResults(format!(
                "{}/seed-{} has config hash {} but {}/seed-{} has {}; \
                 results from different protocols cannot be aggregated",
                first.strategy.name,
                first.seed,
                &first.config_hash[..12],
                other.strategy.name,
                other.seed,
                &other.config_hash[..12.min(other.config_hash.len())]
            )));
        }
    }
    Ok(())
}

/// Records grouped by strategy name, seeds in order.
pub fn by_strategy(records: &[RunRecord]) -> BTreeMap<String, Vec<&RunRecord>> {
    let mut map: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.strategy.name.clone()).or_default().push(r);
    }
    for runs in map.values_mut() {
        runs.sort_by_key(|r| r.seed);
    }
    map
}

/// Seed statistics of a per-report metric at every task index it exists.
pub fn curve(
    runs: &[&RunRecord],
    metric: impl Fn(&super::EvalReport) -> Option<f64>,
) -> Vec<CurvePoint> {
    let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for rep in &r.reports {
            if let Some(v) = metric(rep) {
                at.entry(rep.task_index).or_default().push(v);
            }
        }
    }
    at.into_iter()
        .map(|(task_index, vals)| {
            let (mean, std, n_seeds) = mean_std(&vals);
            CurvePoint {
                task_index,
                mean,
                std,
                n_seeds,
            }
        })
        .collect()
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("task_index,mean,std,n_seeds\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.task_index, p.mean, p.std, p.n_seeds);
    }
    s
}

/// Top-unit similarity traces for one run and feature. `per_point` picks
/// the best units afresh at each evaluation; `global` follows the units
/// that are best at the final evaluation.
pub fn similarity_traces(run: &RunRecord, feature: usize) -> Option<(Vec<(usize, Vec<f64>)>, Vec<(usize, Vec<f64>)>)> {
    let last = run.last()?.similarity.get(feature)?.as_ref()?;
    let global_units = top_indices(&last.per_unit, TOP_UNITS);
    let mut per_point = Vec::new();
    let mut global = Vec::new();
    for r in &run.reports {
        let s = r.similarity.get(feature)?.as_ref()?;
        per_point.push((r.task_index, s.top_values()));
        global.push((r.task_index, global_units.iter().map(|&u| s.per_unit[u]).collect()));
    }
    Some((per_point, global))
}

/// Gate correlation between every pair of recorded tasks.
pub fn gate_matrix(run: &RunRecord) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (&i, gi) in &run.gates {
        for (&j, gj) in &run.gates {
            out.push((i, j, gate_correlation(gi, gj)?.0));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub strategy: String,
    pub task_index: usize,
    pub p_rep: (f64, f64, usize),
    pub p_cl: (f64, f64, usize),
}

/// Seed statistics at the last task where every seed has a finetuning
/// evaluation.
pub fn table_rows(records: &[RunRecord]) -> Vec<TableRow> {
    by_strategy(records)
        .into_iter()
        .filter_map(|(name, runs)| {
            let task_index = runs
                .iter()
                .map(|r| {
                    r.reports
                        .iter()
                        .filter(|x| x.rep.is_some())
                        .map(|x| x.task_index)
                        .max()
                })
                .collect::<Option<Vec<_>>>()?
                .into_iter()
                .min()?;
            let at: Vec<_> = runs.iter().filter_map(|r| r.report_at(task_index)).collect();
            let reps: Vec<f64> = at.iter().filter_map(|r| r.p_rep()).collect();
            let cls: Vec<f64> = at.iter().map(|r| r.p_cl()).collect();
            Some(TableRow {
                strategy: name,
                task_index,
                p_rep: mean_std(&reps),
                p_cl: mean_std(&cls),
            })
        })
        .collect()
}

pub fn render_table(rows: &[TableRow]) -> String {
    let fmt = |(m, s, n): (f64, f64, usize)| format!("{m:.2} ± {s:.2} (k={n})");
    let task = rows.first().map_or(0, |r| r.task_index);
    let mut cells = vec![[
        "Strategy".to_string(),
        format!("P_rep @Task {task}"),
        format!("P_CL @Task {task}"),
    ]];
    for r in rows {
        cells.push([r.strategy.clone(), fmt(r.p_rep), fmt(r.p_cl)]);
    }
    let widths: Vec<usize> = (0..3)
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    out
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Write the data (and, for curves, an SVG) for `kind` into `out_dir`.
pub fn emit_plotdata(records: &[RunRecord], kind: PlotKind, out_dir: &Path) -> Result<Vec<PathBuf>> {
    check_compatible(records)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let groups = by_strategy(records);
    match kind {
        PlotKind::RepCurve | PlotKind::ClCurve => {
            let (stem, label) = if kind == PlotKind::RepCurve {
                ("rep_curve", "P_rep")
            } else {
                ("cl_curve", "P_CL")
            };
            let mut series = Vec::new();
            for (name, runs) in &groups {
                let points = if kind == PlotKind::RepCurve {
                    curve(runs, |r| r.p_rep())
                } else {
                    curve(runs, |r| Some(r.p_cl()))
                };
                write(out_dir.join(format!("{stem}_{name}.csv")), &curve_csv(&points), &mut written)?;
                series.push((name.clone(), points));
            }
            write(
                out_dir.join(format!("{stem}.svg")),
                &line_chart(&series, "task", label),
                &mut written,
            )?;
        }
        PlotKind::SimilarityTrace => {
            let mut csv = String::from("strategy,feature,selection,rank,task_index,mean,std,n_seeds\n");
            let mut series = Vec::new();
            for (name, runs) in &groups {
                let n_features = runs[0].last().map_or(0, |r| r.similarity.len());
                for f in 0..n_features {
                    let traces: Vec<_> = runs.iter().filter_map(|r| similarity_traces(r, f)).collect();
                    if traces.is_empty() {
                        continue;
                    }
                    for (label, pick) in [("per_point", 0usize), ("global", 1)] {
                        for rank in 0..TOP_UNITS {
                            let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                            for t in &traces {
                                let trace = if pick == 0 { &t.0 } else { &t.1 };
                                for (task, vals) in trace {
                                    if let Some(v) = vals.get(rank) {
                                        at.entry(*task).or_default().push(*v);
                                    }
                                }
                            }
                            let mut points = Vec::new();
                            for (task, vals) in at {
                                let (m, s, n) = mean_std(&vals);
                                let _ = writeln!(csv, "{name},h{},{label},{},{task},{m},{s},{n}", f + 1, rank + 1);
                                points.push(CurvePoint {
                                    task_index: task,
                                    mean: m,
                                    std: s,
                                    n_seeds: n,
                                });
                            }
                            if f == 0 && pick == 1 {
                                series.push((format!("{name} unit {}", rank + 1), points));
                            }
                        }
                    }
                }
            }
            write(out_dir.join("similarity_trace.csv"), &csv, &mut written)?;
            write(
                out_dir.join("similarity_trace.svg"),
                &line_chart(&series, "task", "similarity to h1"),
                &mut written,
            )?;
        }
        PlotKind::GateHeatmap => {
            let mut csv = String::from("strategy,task_i,task_j,mean,std,n_seeds\n");
            for (name, runs) in &groups {
                let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
                for r in runs {
                    for (i, j, c) in gate_matrix(r)? {
                        cells.entry((i, j)).or_default().push(c);
                    }
                }
                for ((i, j), vals) in cells {
                    let (m, s, n) = mean_std(&vals);
                    let _ = writeln!(csv, "{name},{i},{j},{m},{s},{n}");
                }
            }
            write(out_dir.join("gate_heatmap.csv"), &csv, &mut written)?;
        }
        PlotKind::Table => {
            let rows = table_rows(records);
            let mut csv = String::from(
                "strategy,task_index,p_rep_mean,p_rep_std,p_cl_mean,p_cl_std,n_seeds\n",
            );
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    r.strategy, r.task_index, r.p_rep.0, r.p_rep.1, r.p_cl.0, r.p_cl.1, r.p_rep.2
                );
            }
            write(out_dir.join("table.csv"), &csv, &mut written)?;
            write(out_dir.join("table.txt"), &render_table(&rows), &mut written)?;
        }
    }
    Ok(written)
}

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Line chart of mean curves with a ±std band.
pub fn line_chart(series: &[(String, Vec<CurvePoint>)], x_label: &str, y_label: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|p| p.mean.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.task_index as f64);
        x1 = x1.max(p.task_index as f64);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{l},{t} V{b} H{r}" stroke="black" fill="none"/>"#,
        l = pad,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    for (v, x, y, anchor) in [
        (x0, sx(x0), h - pad + 16.0, "middle"),
        (x1, sx(x1), h - pad + 16.0, "middle"),
    ] {
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v}</text>"#);
    }
    for v in [y0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            pad - 4.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (k, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let finite: Vec<_> = points.iter().filter(|p| p.mean.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        if finite.iter().any(|p| p.std > 0.0) {
            let upper = finite.iter().map(|p| format!("{:.1},{:.1}", sx(p.task_index as f64), sy(p.mean + p.std)));
            let lower = finite.iter().rev().map(|p| format!("{:.1},{:.1}", sx(p.task_index as f64), sy(p.mean - p.std)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                band.join(" ")
            );
        }
        let line: Vec<String> = finite
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.task_index as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#,
            w - pad - 150.0,
            pad + 14.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
