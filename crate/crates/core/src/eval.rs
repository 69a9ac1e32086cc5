//! Detection metrics over an mIoU threshold `tau`.
//!
//! A prediction is correct when its mIoU with the ground truth exceeds
//! `tau`. Accuracy scores primary lines; precision and recall score whole
//! line sets under a greedy one-to-one matching. Sweeping `tau` gives
//! curves, summarized by their normalized area.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{ImageSize, Line, SplitLine};

/// Default `tau` sweep.
pub const TAU_LO: f64 = 0.5;
pub const TAU_HI: f64 = 1.0;
pub const TAU_STEP: f64 = 0.005;

/// A selected line with its D-Net score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub line: Line,
    pub score: f64,
    pub primary: bool,
}

/// Checks scores lie in `[0, 1]` and a nonempty set has exactly one primary.
pub fn validate_detections(dets: &[Detection]) -> Result<()> {
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::Validation(format!("detection score {} outside [0, 1]", d.score)));
    }
    let primaries = dets.iter().filter(|d| d.primary).count();
    if !dets.is_empty() && primaries != 1 {
        return Err(Error::Validation(format!("{primaries} primary lines in one detection set")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Dimension(format!(
            "{a} predictions, {b} ground truths and {c} image sizes"
        )));
    }
    Ok(())
}

/// Primary-line mIoU per image; `None` where nothing was predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryScores {
    scores: Vec<Option<f64>>,
}

impl PrimaryScores {
    pub fn new(preds: &[Option<Line>], gts: &[Line], sizes: &[ImageSize]) -> Result<Self> {
        check_lengths(preds.len(), gts.len(), sizes.len())?;
        let scores = preds
            .iter()
            .zip(gts)
            .zip(sizes)
            .map(|((p, g), &s)| p.map(|p| crate::geometry::miou(&p, g, s)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(PrimaryScores { scores })
    }

    /// Fraction of images whose primary line has mIoU above `tau`.
    pub fn accuracy(&self, tau: f64) -> f64 {
        if self.scores.is_empty() {
            return 1.0;
        }
        let hits = self.scores.iter().filter(|s| s.is_some_and(|s| s > tau)).count();
        hits as f64 / self.scores.len() as f64
    }
}

/// `N_c / N`: images whose predicted primary line has mIoU above `tau` with
/// the ground-truth primary. Missing predictions count as wrong.
pub fn primary_accuracy(preds: &[Option<Line>], gts: &[Line], sizes: &[ImageSize], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(PrimaryScores::new(preds, gts, sizes)?.accuracy(tau))
}

/// Counts behind precision and recall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    /// `N_l`: matched predictions.
    pub matched: usize,
    /// `N_e`: unmatched predictions.
    pub extra: usize,
    /// `N_m`: unmatched ground truths.
    pub missed: usize,
}

impl MatchCounts {
    /// `N_l / (N_l + N_e)`, or 1 with no predictions.
    pub fn precision(&self) -> f64 {
        ratio(self.matched, self.matched + self.extra)
    }

    /// `N_l / (N_l + N_m)`, or 1 with no ground truths.
    pub fn recall(&self) -> f64 {
        ratio(self.matched, self.matched + self.missed)
    }

    pub fn add(&mut self, other: MatchCounts) {
        self.matched += other.matched;
        self.extra += other.extra;
        self.missed += other.missed;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Prediction/ground-truth mIoU pairs of one image in greedy matching order.
#[derive(Clone, Debug)]
pub struct ImagePairs {
    n_pred: usize,
    n_gt: usize,
    /// `(miou, pred, gt)` by descending mIoU, then by indices.
    pairs: Vec<(f64, usize, usize)>,
}

impl ImagePairs {
    pub fn new(preds: &[Line], gts: &[Line], size: ImageSize) -> Result<Self> {
        let ps = preds.iter().map(|l| SplitLine::new(*l, size)).collect::<Result<Vec<_>>>()?;
        let gs = gts.iter().map(|l| SplitLine::new(*l, size)).collect::<Result<Vec<_>>>()?;
        let mut pairs = Vec::with_capacity(ps.len() * gs.len());
        for (i, p) in ps.iter().enumerate() {
            for (j, g) in gs.iter().enumerate() {
                pairs.push((p.miou(g), i, j));
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        Ok(ImagePairs {
            n_pred: preds.len(),
            n_gt: gts.len(),
            pairs,
        })
    }

    /// Greedy one-to-one matching of pairs with mIoU above `tau`.
    pub fn counts(&self, tau: f64) -> MatchCounts {
        let mut pred_used = vec![false; self.n_pred];
        let mut gt_used = vec![false; self.n_gt];
        let mut matched = 0;
        for &(m, i, j) in &self.pairs {
            if m <= tau {
                break;
            }
            if !pred_used[i] && !gt_used[j] {
                pred_used[i] = true;
                gt_used[j] = true;
                matched += 1;
            }
        }
        MatchCounts {
            matched,
            extra: self.n_pred - matched,
            missed: self.n_gt - matched,
        }
    }
}

/// Precomputed matching pairs for a whole test set.
#[derive(Clone, Debug)]
pub struct SetPairs {
    images: Vec<ImagePairs>,
}

impl SetPairs {
    pub fn new(preds: &[Vec<Line>], gts: &[Vec<Line>], sizes: &[ImageSize]) -> Result<Self> {
        check_lengths(preds.len(), gts.len(), sizes.len())?;
        let images = preds
            .iter()
            .zip(gts)
            .zip(sizes)
            .map(|((p, g), &s)| ImagePairs::new(p, g, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(SetPairs { images })
    }

    pub fn counts(&self, tau: f64) -> MatchCounts {
        let mut total = MatchCounts::default();
        for im in &self.images {
            total.add(im.counts(tau));
        }
        total
    }
}

/// Aggregate precision and recall at `tau`.
pub fn precision_recall(
    preds: &[Vec<Line>],
    gts: &[Vec<Line>],
    sizes: &[ImageSize],
    tau: f64,
) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let c = SetPairs::new(preds, gts, sizes)?.counts(tau);
    Ok((c.precision(), c.recall()))
}

/// A metric sampled over `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// Trapezoidal area normalized by the `tau` range, in percent.
    pub auc: f64,
}

/// Samples `tau_lo, tau_lo + step, ...` up to `tau_hi` (always included).
pub fn tau_samples(tau_lo: f64, tau_hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(tau_lo < tau_hi) || !(step > 0.0) {
        return Err(Error::Config(format!(
            "invalid tau sweep [{tau_lo}, {tau_hi}] step {step}"
        )));
    }
    let n = ((tau_hi - tau_lo) / step + 1e-9).floor() as usize;
    let mut taus: Vec<f64> = (0..=n).map(|i| tau_lo + i as f64 * step).collect();
    let last = *taus.last().expect("nonempty");
    if tau_hi - last > 1e-9 * step {
        taus.push(tau_hi);
    } else {
        *taus.last_mut().expect("nonempty") = tau_hi;
    }
    Ok(taus)
}

pub fn curve_and_auc(
    mut metric: impl FnMut(f64) -> f64,
    tau_lo: f64,
    tau_hi: f64,
    step: f64,
) -> Result<EvalCurve> {
    let taus = tau_samples(tau_lo, tau_hi, step)?;
    let values: Vec<f64> = taus.iter().map(|&t| metric(t)).collect();
    let mut area = 0.0;
    for k in 1..taus.len() {
        area += 0.5 * (values[k] + values[k - 1]) * (taus[k] - taus[k - 1]);
    }
    Ok(EvalCurve {
        taus,
        values,
        auc: 100.0 * area / (tau_hi - tau_lo),
    })
}

/// CSV with a `tau` column followed by one column per curve, 6 decimals.
/// All curves must share their `tau` samples.
pub fn curves_csv(names: &[&str], curves: &[&EvalCurve]) -> Result<String> {
    let Some(first) = curves.first() else {
        return Err(Error::Dimension("no curves to write".into()));
    };
    if names.len() != curves.len() || curves.iter().any(|c| c.taus != first.taus) {
        return Err(Error::Dimension("curves must share tau samples and have one name each".into()));
    }
    let mut out = String::from("tau");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (k, t) in first.taus.iter().enumerate() {
        write!(out, "{t:.6}").expect("string write");
        for c in curves {
            write!(out, ",{:.6}", c.values[k]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// `key=value` lines.
pub fn summary_block(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        writeln!(out, "{k}={v}").expect("string write");
    }
    out
}

/// Accuracy, precision and recall curves for a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: EvalCurve,
    pub precision: EvalCurve,
    pub recall: EvalCurve,
    pub images: usize,
}

impl EvalReport {
    /// `primaries[i]` is the predicted primary line of image `i`; `sets[i]`
    /// all its selected lines. Ground truths are given the same way.
    pub fn compute(
        pred_primaries: &[Option<Line>],
        pred_sets: &[Vec<Line>],
        gt_primaries: &[Line],
        gt_sets: &[Vec<Line>],
        sizes: &[ImageSize],
        sweep: (f64, f64, f64),
    ) -> Result<Self> {
        let (lo, hi, step) = sweep;
        check_tau(lo)?;
        check_tau(hi)?;
        let prim = PrimaryScores::new(pred_primaries, gt_primaries, sizes)?;
        let pairs = SetPairs::new(pred_sets, gt_sets, sizes)?;
        Ok(EvalReport {
            accuracy: curve_and_auc(|t| prim.accuracy(t), lo, hi, step)?,
            precision: curve_and_auc(|t| pairs.counts(t).precision(), lo, hi, step)?,
            recall: curve_and_auc(|t| pairs.counts(t).recall(), lo, hi, step)?,
            images: sizes.len(),
        })
    }

    pub fn accuracy_csv(&self) -> String {
        curves_csv(&["accuracy"], &[&self.accuracy]).expect("single curve")
    }

    pub fn precision_recall_csv(&self) -> String {
        curves_csv(&["precision", "recall"], &[&self.precision, &self.recall]).expect("shared taus")
    }

    /// AUC figures plus the value at `tau`, which must be a sample point.
    pub fn summary(&self, tau: f64) -> String {
        let at = |c: &EvalCurve| {
            c.taus
                .iter()
                .position(|t| (t - tau).abs() < 1e-12)
                .map(|k| format!("{:.6}", c.values[k]))
                .unwrap_or_else(|| "nan".into())
        };
        summary_block(&[
            ("images", self.images.to_string()),
            ("tau_lo", format!("{:.6}", self.accuracy.taus[0])),
            ("tau_hi", format!("{:.6}", self.accuracy.taus[self.accuracy.taus.len() - 1])),
            ("auc_a", format!("{:.6}", self.accuracy.auc)),
            ("auc_p", format!("{:.6}", self.precision.auc)),
            ("auc_r", format!("{:.6}", self.recall.auc)),
            ("tau", format!("{tau:.6}")),
            ("accuracy_at_tau", at(&self.accuracy)),
            ("precision_at_tau", at(&self.precision)),
            ("recall_at_tau", at(&self.recall)),
            ("empty_denominator", "1".into()),
        ])
    }
}
