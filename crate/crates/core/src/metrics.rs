//! Saliency evaluation: MAE, maximum F-measure and S-measure, plus directory
//! evaluation with CSV/JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{list_images, load_mask, write_atomic};
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

/// 8-bit ground truth at or above 128/255 counts as foreground.
pub const GT_THRESHOLD: f64 = 127.5 / 255.0;
/// Slack on the threshold comparison so `k / 255` grid values stored in f32
/// land on the intended side.
const THRESHOLD_SLACK: f64 = 1e-4;
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub beta_sq: f64,
    pub thresholds: usize,
    pub alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            beta_sq: 0.3,
            thresholds: 256,
            alpha: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds < 2 {
            return Err(Error::Config("metrics need at least 2 thresholds".into()));
        }
        if !(self.beta_sq > 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(
                "beta_sq must be > 0 and alpha in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, p: &Tensor<f32>, g: &Tensor<f32>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: p.shape(),
            right: g.shape(),
        });
    }
    if !p.all_finite() || !g.all_finite() {
        return Err(Error::NonFinite(format!("{op} input")));
    }
    Ok(())
}

fn binarize(g: &Tensor<f32>) -> Vec<bool> {
    g.data()
        .iter()
        .map(|&v| f64::from(v) >= GT_THRESHOLD)
        .collect()
}

pub fn mae(p: &Tensor<f32>, g: &Tensor<f32>) -> Result<f64> {
    check_pair("mae", p, g)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .sum();
    Ok(sum / p.numel() as f64)
}

/// Maximum F-beta over thresholds `k / (thresholds - 1)`, predicting
/// foreground where `P > threshold`.
pub fn max_f_measure(
    p: &Tensor<f32>,
    g: &Tensor<f32>,
    beta_sq: f64,
    thresholds: usize,
) -> Result<f64> {
    check_pair("max_f_measure", p, g)?;
    if thresholds < 2 {
        return Err(Error::Config(
            "max_f_measure needs at least 2 thresholds".into(),
        ));
    }
    let gt = binarize(g);
    let positives = gt.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(Error::Metric(
            "maxF undefined: ground truth has no foreground pixels".into(),
        ));
    }
    let top = thresholds - 1;
    let mut pos_hist = vec![0usize; thresholds];
    let mut neg_hist = vec![0usize; thresholds];
    for (&v, &fg) in p.data().iter().zip(&gt) {
        // positive at threshold k iff v > k / top; `last` is the highest such k
        let last = (f64::from(v) * top as f64 - THRESHOLD_SLACK).ceil() - 1.0;
        if last < 0.0 {
            continue;
        }
        let bin = (last as usize).min(top);
        if fg {
            pos_hist[bin] += 1;
        } else {
            neg_hist[bin] += 1;
        }
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for k in (0..thresholds).rev() {
        tp += pos_hist[k];
        fp += neg_hist[k];
        best = best.max(f_beta(tp, fp, positives, beta_sq));
    }
    Ok(best)
}

fn f_beta(tp: usize, fp: usize, positives: usize, beta_sq: f64) -> f64 {
    let predicted = tp + fp;
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = tp as f64 / positives as f64;
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Structure measure of a single `1 x 1 x H x W` map.
pub fn s_measure(p: &Tensor<f32>, g: &Tensor<f32>, alpha: f64) -> Result<f64> {
    check_pair("s_measure", p, g)?;
    let s = p.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(
            "s_measure",
            format!("expected a single 1-channel map, got {s}"),
        ));
    }
    let pred: Vec<f64> = p.data().iter().map(|&v| f64::from(v)).collect();
    let gt = binarize(g);
    let n = pred.len() as f64;
    let fg_fraction = gt.iter().filter(|&&b| b).count() as f64 / n;
    let score = if fg_fraction == 0.0 {
        1.0 - pred.iter().sum::<f64>() / n
    } else if fg_fraction == 1.0 {
        pred.iter().sum::<f64>() / n
    } else {
        let object = object_score(&pred, &gt, fg_fraction);
        let region = region_score(&pred, &gt, s.h, s.w);
        alpha * object + (1.0 - alpha) * region
    };
    Ok(score.clamp(0.0, 1.0))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_similarity(values: &[f64]) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pred: &[f64], gt: &[bool], fg_fraction: f64) -> f64 {
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    fg_fraction * object_similarity(&fg) + (1.0 - fg_fraction) * object_similarity(&bg)
}

/// Foreground centroid as split indices, rounded half to even then shifted by one.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut area, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] {
                area += 1.0;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let (cx, cy) = if area == 0.0 {
        (
            (w as f64 / 2.0).round_ties_even(),
            (h as f64 / 2.0).round_ties_even(),
        )
    } else {
        ((sx / area).round_ties_even(), (sy / area).round_ties_even())
    };
    (cx as usize + 1, cy as usize + 1)
}

fn region_score(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(gt, h, w);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let quadrants = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut total = 0.0;
    for (y0, y1, x0, x1) in quadrants {
        let count = (y1 - y0) * (x1 - x0);
        if count == 0 {
            continue;
        }
        let mut pv = Vec::with_capacity(count);
        let mut gv = Vec::with_capacity(count);
        for y in y0..y1 {
            for x in x0..x1 {
                pv.push(pred[y * w + x]);
                gv.push(if gt[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        total += count as f64 / area * region_ssim(&pv, &gv);
    }
    total
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    if p.len() > 1 {
        for (a, b) in p.iter().zip(g) {
            sxx += (a - x) * (a - x);
            syy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
        sxx /= n - 1.0;
        syy /= n - 1.0;
        sxy /= n - 1.0;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub maxf: f64,
    pub smeasure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mae: f64,
    pub maxf: f64,
    pub smeasure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<ImageMetrics>,
    /// `None` when no image could be scored.
    pub aggregate: Option<Aggregate>,
    pub thresholds: usize,
    pub errors: Vec<String>,
}

impl MetricsReport {
    pub fn from_records(
        records: Vec<ImageMetrics>,
        errors: Vec<String>,
        thresholds: usize,
    ) -> Self {
        let aggregate = (!records.is_empty()).then(|| {
            let n = records.len() as f64;
            Aggregate {
                count: records.len(),
                mae: records.iter().map(|r| r.mae).sum::<f64>() / n,
                maxf: records.iter().map(|r| r.maxf).sum::<f64>() / n,
                smeasure: records.iter().map(|r| r.smeasure).sum::<f64>() / n,
            }
        });
        MetricsReport {
            records,
            aggregate,
            thresholds,
            errors,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.errors.is_empty() && self.aggregate.is_some()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mae,maxf,smeasure\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                r.name, r.mae, r.maxf, r.smeasure
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "aggregate": self.aggregate,
            "thresholds": self.thresholds,
            "errors": self.errors,
        });
        serde_json::to_string_pretty(&summary).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        write_atomic(&csv_path.with_extension("json"), self.to_json().as_bytes())
    }
}

/// All three metrics for one prediction/ground-truth map pair.
pub fn score_pair(
    name: &str,
    p: &Tensor<f32>,
    g: &Tensor<f32>,
    cfg: &MetricsConfig,
) -> Result<ImageMetrics> {
    let gs = g.shape();
    let p = if p.shape() != gs {
        bilinear_resize(p, gs.h, gs.w)?
    } else {
        p.clone()
    };
    Ok(ImageMetrics {
        name: name.to_string(),
        mae: mae(&p, g)?,
        maxf: max_f_measure(&p, g, cfg.beta_sq, cfg.thresholds)?,
        smeasure: s_measure(&p, g, cfg.alpha)?,
    })
}

fn by_stem(files: Vec<PathBuf>) -> BTreeMap<String, PathBuf> {
    files
        .into_iter()
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect()
}

/// Scores every prediction against the same-named ground truth file.
/// Predictions are bilinearly resized to the ground truth size first.
pub fn evaluate_dirs(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let preds = by_stem(list_images(pred_dir)?);
    let gts = by_stem(list_images(gt_dir)?);
    let mut errors = Vec::new();
    for name in preds.keys().filter(|k| !gts.contains_key(*k)) {
        errors.push(format!("{name}: no ground truth"));
    }
    for name in gts.keys().filter(|k| !preds.contains_key(*k)) {
        errors.push(format!("{name}: no prediction"));
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (k, p, g)))
        .collect();
    if pairs.is_empty() {
        errors.push("no prediction/ground-truth pairs with matching names".into());
    }
    let scored: Vec<Result<ImageMetrics>> = pairs
        .par_iter()
        .map(|(name, p, g)| score_pair(name, &load_mask(p)?, &load_mask(g)?, cfg))
        .collect();
    let mut records = Vec::new();
    for ((name, _, _), r) in pairs.iter().zip(scored) {
        match r {
            Ok(m) => records.push(m),
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    Ok(MetricsReport::from_records(records, errors, cfg.thresholds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::from_slice([1, 1, h, w], v).unwrap()
    }

    #[test]
    fn mae_examples() {
        let g = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        assert_eq!(mae(&map(2, 2, &[0.5; 4]), &g).unwrap(), 0.5);
    }

    #[test]
    fn maxf_examples() {
        let g = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(max_f_measure(&g, &g, 0.3, 256).unwrap(), 1.0);
        let inv = map(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(max_f_measure(&inv, &g, 0.3, 256).unwrap(), 0.0);
        let f = max_f_measure(&map(2, 2, &[0.7; 4]), &g, 0.3, 256).unwrap();
        assert!((f - 1.3 * 0.5 / 1.15).abs() < 1e-12);
        assert!(matches!(
            max_f_measure(&g, &map(2, 2, &[0.0; 4]), 0.3, 256),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn smeasure_examples() {
        let g = map(
            4,
            4,
            &[
                1., 0., 1., 0., 0., 1., 0., 1., 1., 0., 1., 0., 0., 1., 0., 1.,
            ],
        );
        assert!((s_measure(&g, &g, 0.5).unwrap() - 1.0).abs() < 1e-6);
        let inv = g.map(|v| 1.0 - v);
        assert!(s_measure(&inv, &g, 0.5).unwrap() < 0.5);
        let zeros = map(3, 3, &[0.0; 9]);
        assert_eq!(s_measure(&zeros, &zeros, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn report_means_and_csv() {
        let recs = vec![
            ImageMetrics {
                name: "a".into(),
                mae: 0.1,
                maxf: 0.9,
                smeasure: 0.8,
            },
            ImageMetrics {
                name: "b".into(),
                mae: 0.3,
                maxf: 0.7,
                smeasure: 0.6,
            },
        ];
        let r = MetricsReport::from_records(recs, vec![], 256);
        let a = r.aggregate.clone().unwrap();
        assert!(
            (a.mae - 0.2).abs() < 1e-12
                && (a.maxf - 0.8).abs() < 1e-12
                && (a.smeasure - 0.7).abs() < 1e-12
        );
        assert!(r
            .to_csv()
            .starts_with("name,mae,maxf,smeasure\na,0.100000,"));
        assert!(MetricsReport::from_records(vec![], vec!["x".into()], 256)
            .aggregate
            .is_none());
    }
}
