//! ROC analysis, the DPM-only baseline and ablation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geodata::LocationTable;
use crate::inference::{run_em, FitResult, OptimizerConfig, PosteriorMethod};
use crate::model::LocationPosterior;

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are predicted positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Starts at (0, 0) with threshold +∞ and ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Threshold maximizing Youden's J = TPR − FPR.
    pub fn youden_threshold(&self) -> f64 {
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for p in &self.points {
            let j = p.tpr - p.fpr;
            if j > best.0 {
                best = (j, p.threshold);
            }
        }
        best.1
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        out
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut pos = 0;
    for &l in labels {
        match l {
            0 => {}
            1 => pos += 1,
            other => return Err(Error::invalid(format!("label {other} is not 0/1"))),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("labels must contain both classes"));
    }
    Ok((pos, neg))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().unwrap();
        let (fpr, tpr) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint { threshold: s, fpr, tpr });
    }
    Ok(RocCurve { points, auc })
}

pub fn tpr_tnr_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, l) {
            (true, 1) => tp += 1,
            (false, 0) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

/// Min-max normalized DPM value for every labeled record, in record order.
pub fn dpm_baseline_scores(table: &LocationTable) -> Vec<f64> {
    let ys: Vec<f64> = table.records.iter().filter(|r| r.label.is_some()).map(|r| r.y).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    ys.iter().map(|y| if span > 0.0 { (y - lo) / span } else { 0.0 }).collect()
}

/// Labels of the labeled records, in record order.
pub fn table_labels(table: &LocationTable) -> Vec<u8> {
    table.records.iter().filter_map(|r| r.label).collect()
}

/// Posterior damage probability for every labeled record, in record order.
pub fn posterior_scores(table: &LocationTable, posteriors: &[LocationPosterior]) -> Result<Vec<f64>> {
    if posteriors.len() != table.len() {
        return Err(Error::invalid(format!("{} posteriors for {} records", posteriors.len(), table.len())));
    }
    Ok(table
        .records
        .iter()
        .zip(posteriors)
        .filter(|(r, _)| r.label.is_some())
        .map(|(_, p)| p.q_bd)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub threshold: f64,
    pub tpr: f64,
    pub tnr: f64,
}

/// AUC plus TPR/TNR at the Youden-optimal threshold.
pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    let roc = roc_curve(scores, labels)?;
    let threshold = roc.youden_threshold();
    let (tpr, tnr) = tpr_tnr_at(scores, labels, threshold)?;
    Ok(Metrics {
        auc: roc.auc,
        threshold,
        tpr,
        tnr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationConfig {
    pub optimizer: OptimizerConfig,
}

impl AblationConfig {
    pub fn label(&self) -> String {
        let method = match self.optimizer.method {
            PosteriorMethod::Variational => "VI",
            PosteriorMethod::Mcmc(_) => "MCMC",
        };
        let graph = if self.optimizer.pruning { "Local" } else { "Full" };
        format!("{method} {graph}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub batch_size: usize,
    pub auc: f64,
    /// Final mean per-location bound.
    pub vlb: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Wall time to convergence.
    pub seconds: f64,
    pub seconds_per_epoch: f64,
    pub epochs: usize,
}

pub fn ablation_row(table: &LocationTable, config: &AblationConfig, fit: &FitResult) -> Result<AblationRow> {
    let labels = table_labels(table);
    let scores = posterior_scores(table, &fit.posteriors)?;
    let m = classification_metrics(&scores, &labels)?;
    Ok(AblationRow {
        method: config.label(),
        batch_size: config.optimizer.batch_size,
        auc: m.auc,
        vlb: fit.final_elbo(),
        tpr: m.tpr,
        tnr: m.tnr,
        seconds: fit.wall_time_seconds,
        seconds_per_epoch: fit.seconds_per_epoch(),
        epochs: fit.epochs_run(),
    })
}

/// Fits every config on the same table and scores it against the joined
/// labels. Configs run one after another so their timings are comparable.
pub fn ablation_report(table: &LocationTable, configs: &[AblationConfig]) -> Result<Vec<AblationRow>> {
    if table.records.iter().all(|r| r.label.is_none()) {
        return Err(Error::Data("ablation needs labeled locations".into()));
    }
    configs
        .iter()
        .map(|c| {
            let fit = run_em(table, &c.optimizer)?;
            ablation_row(table, c, &fit)
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,batch_size,auc,vlb,tpr,tnr,seconds\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.method, r.batch_size, r.auc, r.vlb, r.tpr, r.tnr, r.seconds).unwrap();
    }
    out
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ablation_csv(rows))?;
    Ok(())
}
