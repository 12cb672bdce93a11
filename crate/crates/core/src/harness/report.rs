//! Report files: `metrics.csv`, per-run manifests and `plots.svg`.
//!
//! A single manifest produces exactly three files: `metrics.csv`,
//! `manifest.json` and `plots.svg`. With several manifests each one is
//! written to `manifest_<run_id>.json` instead.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{invalid, Result};
use crate::harness::manifest::RunManifest;
use crate::harness::svg::{bar_panel, document, line_panel, Frame, Series};

pub const METRICS_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "epoch",
    "loss_mean",
    "lr",
    "purity",
    "entropy_mean",
    "inconsistency_mean",
    "knn_acc",
    "probe_acc",
];

/// One row of `metrics.csv`. Accuracies are filled on the final epoch only.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub loss_mean: f64,
    pub lr: f64,
    pub purity: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub inconsistency_mean: Option<f64>,
    pub knn_acc: Option<f64>,
    pub probe_acc: Option<f64>,
}

pub fn metrics_rows(manifests: &[RunManifest]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for m in manifests {
        let last = m.epochs.len().saturating_sub(1);
        for (i, e) in m.epochs.iter().enumerate() {
            rows.push(MetricsRow {
                run_id: m.run_id.clone(),
                seed: m.config.seed,
                epoch: e.epoch,
                loss_mean: e.loss_mean,
                lr: e.lr,
                purity: e.purity,
                entropy_mean: e.entropy_mean,
                inconsistency_mean: e.inconsistency_mean,
                knn_acc: (i == last).then_some(m.final_eval.knn_acc),
                probe_acc: if i == last { m.final_eval.probe_acc } else { None },
            });
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.loss_mean.to_string(),
            r.lr.to_string(),
            opt(r.purity),
            opt(r.entropy_mean),
            opt(r.inconsistency_mean),
            opt(r.knn_acc),
            opt(r.probe_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(invalid(format!("unexpected metrics header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Loss curves, purity curves and final accuracy bars, one series per run.
pub fn render_plots(rows: &[MetricsRow]) -> String {
    let mut runs: Vec<&str> = Vec::new();
    for r in rows {
        if !runs.contains(&r.run_id.as_str()) {
            runs.push(&r.run_id);
        }
    }
    let series = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<Series> {
        runs.iter()
            .map(|id| Series {
                name: id.to_string(),
                points: rows
                    .iter()
                    .filter(|r| r.run_id == *id)
                    .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
                    .collect(),
            })
            .collect()
    };
    let bars: Vec<(String, Vec<(String, f64)>)> = runs
        .iter()
        .map(|id| {
            let last = rows.iter().filter(|r| r.run_id == *id).next_back();
            let mut v = Vec::new();
            if let Some(a) = last.and_then(|r| r.knn_acc) {
                v.push(("knn".to_string(), a));
            }
            if let Some(a) = last.and_then(|r| r.probe_acc) {
                v.push(("probe".to_string(), a));
            }
            (id.to_string(), v)
        })
        .collect();
    let (w, h) = (420.0, 300.0);
    let mut body = String::new();
    line_panel(&mut body, Frame { x: 0.0, y: 0.0, w, h }, "loss vs epoch", &series(&|r| Some(r.loss_mean)));
    line_panel(&mut body, Frame { x: w, y: 0.0, w, h }, "purity vs epoch", &series(&|r| r.purity));
    bar_panel(&mut body, Frame { x: 2.0 * w, y: 0.0, w, h }, "final accuracy", &bars);
    document(3.0 * w, h, &body)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub plots: PathBuf,
}

impl ReportFiles {
    pub fn all(&self) -> Vec<PathBuf> {
        let mut v = vec![self.metrics.clone()];
        v.extend(self.manifests.iter().cloned());
        v.push(self.plots.clone());
        v
    }
}

pub fn emit_report(manifests: &[RunManifest], dir: &Path) -> Result<ReportFiles> {
    if manifests.is_empty() {
        return Err(invalid("a report needs at least one manifest"));
    }
    fs::create_dir_all(dir)?;
    let rows = metrics_rows(manifests);
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&metrics, &rows)?;
    let mut paths = Vec::new();
    for m in manifests {
        let name = if manifests.len() == 1 {
            "manifest.json".to_string()
        } else {
            format!("manifest_{}.json", m.run_id)
        };
        let p = dir.join(name);
        m.save(&p)?;
        paths.push(p);
    }
    let plots = dir.join("plots.svg");
    fs::write(&plots, render_plots(&rows))?;
    Ok(ReportFiles {
        metrics,
        manifests: paths,
        plots,
    })
}
