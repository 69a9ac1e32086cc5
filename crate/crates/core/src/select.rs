//! Choosing the final lines from D-Net detections.
//!
//! R-Net scores give each line a reliability; the most reliable alive line
//! is selected and every alive line M-Net considers identical to it is
//! removed, until nothing is left. [`nms`] is the overlap-based baseline.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::{ImageSize, Line, SplitLine};
use crate::model::siamese::{mnet_forward, rnet_forward, SiameseHeadParams};
use crate::neural::ProbPair;

/// Removal threshold on `p^m`.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// Square matrix of pair probabilities; the diagonal is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl PairwiseMatrix {
    /// Row-major `n x n` entries. Off-diagonal values must lie in `[0, 1]`.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", data.len())));
        }
        for i in 0..n {
            for j in 0..n {
                let v = data[i * n + j];
                if i != j && !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!("entry ({i}, {j}) = {v} is not a probability")));
                }
            }
        }
        Ok(PairwiseMatrix { n, data })
    }

    /// Builds from `f(i, j)` for `i != j`; the diagonal is zero.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    data[i * n + j] = f(i, j);
                }
            }
        }
        Self::new(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `Pr[i][j] = p^r(f_i, f_j)` and `Pm[i][j] = p^m(f_i, f_j)` for every ordered pair.
pub fn pairwise_scores(
    features: &[Vec<f64>],
    rparams: &SiameseHeadParams,
    mparams: &SiameseHeadParams,
) -> Result<(PairwiseMatrix, PairwiseMatrix)> {
    if features.is_empty() {
        return Err(Error::EmptyCandidates("no line features to compare".into()));
    }
    let n = features.len();
    let mut pr = vec![0.0; n * n];
    let mut pm = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pr[i * n + j] = rnet_forward(&features[i], &features[j], rparams)?.p;
                pm[i * n + j] = mnet_forward(&features[i], &features[j], mparams)?.p;
            }
        }
    }
    Ok((PairwiseMatrix::new(n, pr)?, PairwiseMatrix::new(n, pm)?))
}

/// `r_i = sum over alive j != i of Pr[i][j]`, in the order of `alive`.
pub fn reliability(pr: &PairwiseMatrix, alive: &[usize]) -> Vec<f64> {
    alive
        .iter()
        .map(|&i| alive.iter().filter(|&&j| j != i).map(|&j| pr.get(i, j)).sum())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionStep {
    pub selected: usize,
    /// Lines removed as identical to `selected`, ascending.
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SelectionResult {
    pub steps: Vec<SelectionStep>,
}

impl SelectionResult {
    pub fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.selected).collect()
    }

    /// The first selected line.
    pub fn primary(&self) -> Option<usize> {
        self.steps.first().map(|s| s.selected)
    }
}

/// Alternating selection and removal until no line is alive.
///
/// Reliability ties go to the lowest index. The selected line leaves the
/// alive set; so does every alive `j` with `Pm[i*][j] > 0.5`.
pub fn select_iterate(pr: &PairwiseMatrix, pm: &PairwiseMatrix) -> Result<SelectionResult> {
    if pr.n() != pm.n() {
        return Err(Error::Dimension(format!(
            "ranking matrix is {0}x{0}, matching matrix is {1}x{1}",
            pr.n(),
            pm.n()
        )));
    }
    let mut alive: Vec<usize> = (0..pr.n()).collect();
    let mut result = SelectionResult::default();
    while !alive.is_empty() {
        let r = reliability(pr, &alive);
        let mut best = 0;
        for k in 1..alive.len() {
            if r[k] > r[best] {
                best = k;
            }
        }
        let chosen = alive.remove(best);
        let (removed, kept): (Vec<usize>, Vec<usize>) =
            alive.iter().partition(|&&j| pm.get(chosen, j) > MATCH_THRESHOLD);
        alive = kept;
        result.steps.push(SelectionStep {
            selected: chosen,
            removed,
        });
    }
    Ok(result)
}

/// Overlap threshold of the NMS baseline.
pub const NMS_THRESHOLD: f64 = 0.85;

/// Greedy suppression: keep the best-scoring remaining line, drop every
/// remaining line whose mIoU with it exceeds `overlap_thr`. Equal scores
/// are ordered by index. Returns kept indices in keep order.
pub fn nms(lines: &[Line], scores: &[f64], size: ImageSize, overlap_thr: f64) -> Result<Vec<usize>> {
    if lines.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} lines but {} scores",
            lines.len(),
            scores.len()
        )));
    }
    let splits = lines
        .iter()
        .map(|l| SplitLine::new(*l, size))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| splits[k].miou(&splits[i]) <= overlap_thr) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// A line taking part in a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LineRef {
    GroundTruth(usize),
    Detection(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairTask {
    Ranking,
    Matching,
}

/// One-hot training target for an ordered pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLabel {
    pub first: LineRef,
    pub second: LineRef,
    pub task: PairTask,
    /// `p = 1` when `first` is more reliable (ranking) or identical (matching).
    pub target: ProbPair,
}

/// Training pairs for R-Net and M-Net.
///
/// Each detection matched to a ground truth yields the ranking pair with the
/// ground truth as the more reliable line, in both orders. Matched detections
/// are paired with each other for matching, positive exactly when they share
/// a ground truth. Unmatched detections produce no labels.
pub fn build_pair_labels(detections: &[(Line, Option<usize>)], gts: &[Line]) -> Result<Vec<PairLabel>> {
    let mut labels = Vec::new();
    let matched: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .filter_map(|(d, (_, g))| g.map(|g| (d, g)))
        .collect();
    for &(d, g) in &matched {
        if g >= gts.len() {
            return Err(Error::Validation(format!(
                "detection {d} refers to ground truth {g} of {}",
                gts.len()
            )));
        }
        labels.push(PairLabel {
            first: LineRef::GroundTruth(g),
            second: LineRef::Detection(d),
            task: PairTask::Ranking,
            target: ProbPair::positive(),
        });
        labels.push(PairLabel {
            first: LineRef::Detection(d),
            second: LineRef::GroundTruth(g),
            task: PairTask::Ranking,
            target: ProbPair::negative(),
        });
    }
    for &(a, ga) in &matched {
        for &(b, gb) in &matched {
            if a != b {
                labels.push(PairLabel {
                    first: LineRef::Detection(a),
                    second: LineRef::Detection(b),
                    task: PairTask::Matching,
                    target: if ga == gb { ProbPair::positive() } else { ProbPair::negative() },
                });
            }
        }
    }
    Ok(labels)
}
