//! Boundary evaluation: thinning, tolerance matching, ODS/OIS/AP.
//!
//! Conventions for empty sets: precision is 1 when nothing is predicted and
//! recall is 1 when there is nothing to find. F is 0 whenever `P + R = 0`.

mod matching;
mod nms;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

pub use matching::{match_boundaries, MatchCounts};
pub use nms::{nms_thin, sobel};

/// Single-channel edge probability image.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "EdgeMap",
                format!("{height}×{width} needs {} values", height * width),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// From a 1×H×W (or H×W) tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => {
                return Err(Error::shape(
                    "EdgeMap",
                    format!("expected 1×H×W, got {s:?}"),
                ))
            }
        };
        Self::new(h, w, t.data().iter().map(|v| v.f64() as f32).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixels with value `>= threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMap {
        BinaryMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64 >= threshold).collect(),
        }
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_edge_map(&self) -> EdgeMap {
        EdgeMap {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Match radius as a fraction of the image diagonal.
    pub maxdist: f64,
    pub thresholds: Vec<f64>,
    pub f_beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            maxdist: 0.0075,
            thresholds: (1..=99).map(|i| i as f64 / 100.0).collect(),
            f_beta: 1.0,
        }
    }
}

impl EvalConfig {
    /// `n` evenly spaced thresholds strictly inside (0, 1).
    pub fn with_threshold_count(n: usize) -> Self {
        Self {
            thresholds: (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("at least one threshold is required".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config(
                "thresholds must lie strictly inside (0, 1)".into(),
            ));
        }
        if self.thresholds.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if self.maxdist.is_nan() || self.maxdist <= 0.0 {
            return Err(Error::Config(format!(
                "maxdist must be positive, got {}",
                self.maxdist
            )));
        }
        if self.f_beta.is_nan() || self.f_beta <= 0.0 {
            return Err(Error::Config(format!(
                "f_beta must be positive, got {}",
                self.f_beta
            )));
        }
        Ok(())
    }
}

pub fn precision(c: &MatchCounts) -> f64 {
    if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

pub fn recall(c: &MatchCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

/// Weighted harmonic mean `(1+β²)PR / (β²P + R)`; 0 when both are 0.
pub fn f_measure(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    if p + r == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / (b2 * p + r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdStats {
    pub threshold: f64,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl ThresholdStats {
    fn new(threshold: f64, counts: MatchCounts, beta: f64) -> Self {
        let (p, r) = (precision(&counts), recall(&counts));
        Self {
            threshold,
            counts,
            precision: p,
            recall: r,
            f: f_measure(p, r, beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalPoint {
    pub threshold: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Dataset-aggregated statistics, one per threshold.
    pub per_threshold: Vec<ThresholdStats>,
    pub ods: OptimalPoint,
    /// Best threshold of each image.
    pub per_image: Vec<OptimalPoint>,
    pub ois: f64,
    pub ap: f64,
    /// `(recall, precision)` in ascending recall, as integrated for AP.
    pub pr_samples: Vec<(f64, f64)>,
}

/// First index of the maximum F (earliest threshold wins ties).
fn best(stats: &[ThresholdStats]) -> OptimalPoint {
    stats.iter().fold(
        OptimalPoint {
            threshold: stats[0].threshold,
            f: f64::NEG_INFINITY,
        },
        |acc, s| {
            if s.f > acc.f {
                OptimalPoint {
                    threshold: s.threshold,
                    f: s.f,
                }
            } else {
                acc
            }
        },
    )
}

/// Trapezoidal area under the PR curve, anchored at recall 0 with the
/// precision of the lowest-recall sample. Thresholds with no predicted
/// pixels do not contribute a sample.
pub fn average_precision(stats: &[ThresholdStats]) -> (f64, Vec<(f64, f64)>) {
    let mut pts: Vec<(f64, f64)> = stats
        .iter()
        .filter(|s| s.counts.tp + s.counts.fp > 0)
        .map(|s| (s.recall, s.precision))
        .collect();
    if pts.is_empty() {
        return (0.0, pts);
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    (area, pts)
}

/// Per-threshold match counts for one image (thinned once, then swept).
pub fn image_counts(pred: &EdgeMap, gt: &BinaryMap, cfg: &EvalConfig) -> Result<Vec<MatchCounts>> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "evaluate",
            format!(
                "prediction {}×{} vs gt {}×{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    let thin = nms_thin(pred);
    let radius = cfg.maxdist * gt.to_edge_map().diagonal();
    Ok(cfg
        .thresholds
        .iter()
        .map(|&t| match_boundaries(&thin.binarize(t), gt, radius))
        .collect())
}

/// ODS, OIS and AP over a dataset.
pub fn evaluate(preds: &[EdgeMap], gts: &[BinaryMap], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let idx: Vec<usize> = (0..preds.len()).collect();
    let per_image = par::map_slice(&idx, |&i| image_counts(&preds[i], &gts[i], cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let per_threshold: Vec<ThresholdStats> = cfg
        .thresholds
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let mut sum = MatchCounts::default();
            for counts in &per_image {
                sum += counts[ti];
            }
            ThresholdStats::new(t, sum, cfg.f_beta)
        })
        .collect();

    let image_best: Vec<OptimalPoint> = per_image
        .iter()
        .map(|counts| {
            let stats: Vec<_> = cfg
                .thresholds
                .iter()
                .zip(counts)
                .map(|(&t, &c)| ThresholdStats::new(t, c, cfg.f_beta))
                .collect();
            best(&stats)
        })
        .collect();
    let ois = image_best.iter().map(|b| b.f).sum::<f64>() / image_best.len() as f64;
    let (ap, pr_samples) = average_precision(&per_threshold);

    Ok(EvalReport {
        ods: best(&per_threshold),
        per_threshold,
        per_image: image_best,
        ois,
        ap,
        pr_samples,
    })
}

/// Writes `threshold,precision,recall,f` rows and a closing
/// `summary,<ods>,<ois>,<ap>` row.
pub fn export_pr(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if report.per_threshold.is_empty() {
        return Err(Error::Contract("report has no thresholds to export".into()));
    }
    std::fs::write(path, format_pr_csv(report)).map_err(|e| Error::io(path, e))
}

pub fn format_pr_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,precision,recall,f\n");
    for t in &report.per_threshold {
        let _ = writeln!(
            s,
            "{:.6},{:.6},{:.6},{:.6}",
            t.threshold, t.precision, t.recall, t.f
        );
    }
    let _ = writeln!(
        s,
        "summary,{:.6},{:.6},{:.6}",
        report.ods.f, report.ois, report.ap
    );
    s
}

/// Values read back from an exported PR file.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(threshold, precision, recall, f)` rows.
    pub rows: Vec<[f64; 4]>,
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
}

pub fn read_pr_csv(path: impl AsRef<Path>) -> Result<PrCurve> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Data(format!("{}: malformed PR line {line:?}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("threshold,precision,recall,f") {
        return Err(Error::Data(format!(
            "{}: missing PR header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    let mut summary = None;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(line));
        }
        if fields[0] == "summary" {
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(line))?;
            summary = Some((v[0], v[1], v[2]));
        } else {
            let v: Vec<f64> = fields
                .iter()
                .map(|f| f.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(line))?;
            rows.push([v[0], v[1], v[2], v[3]]);
        }
    }
    let (ods, ois, ap) =
        summary.ok_or_else(|| Error::Data(format!("{}: missing summary row", path.display())))?;
    Ok(PrCurve { rows, ods, ois, ap })
}
