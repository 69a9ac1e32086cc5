use crate::error::Result;
use crate::geometry::{ImageSize, Line, SplitLine};
use crate::model::{CandidateLabel, LineOffset};
use crate::neural::ProbPair;

/// mIoU above which a line counts as a correct detection of a ground truth.
pub const POSITIVE_THRESHOLD: f64 = 0.85;

/// Index and mIoU of the ground truth closest to `line` (lowest index on ties).
pub fn best_gt(line: &SplitLine, gts: &[SplitLine]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gts.iter().enumerate() {
        let m = line.miou(g);
        if best.map_or(true, |(_, b)| m > b) {
            best = Some((k, m));
        }
    }
    best
}

/// Offset from `candidate` (as stored) to `gt`, pairing each candidate
/// endpoint with the nearer gt endpoint.
pub fn offset_target(candidate: &Line, gt: &Line) -> LineOffset {
    let direct = candidate.start.distance(gt.start) + candidate.end.distance(gt.end);
    let swapped = candidate.start.distance(gt.end) + candidate.end.distance(gt.start);
    if swapped < direct {
        LineOffset::between(candidate, &gt.reversed())
    } else {
        LineOffset::between(candidate, gt)
    }
}

/// Classification and regression targets for each candidate.
///
/// A candidate is positive when its best ground-truth mIoU exceeds
/// `threshold`; its offset target then moves its canonical endpoints onto
/// that ground truth. Negatives get a zero offset.
pub fn assign_candidate_labels(
    candidates: &[Line],
    gts: &[Line],
    size: ImageSize,
    threshold: f64,
) -> Result<Vec<CandidateLabel>> {
    let gsplit = gts.iter().map(|g| SplitLine::new(*g, size)).collect::<Result<Vec<_>>>()?;
    candidates
        .iter()
        .map(|c| {
            let canon = c.canonical(size);
            let split = SplitLine::new(canon, size)?;
            Ok(match best_gt(&split, &gsplit) {
                Some((k, m)) if m > threshold => CandidateLabel {
                    prob: ProbPair::positive(),
                    offset: offset_target(&canon, &gts[k]),
                },
                _ => CandidateLabel {
                    prob: ProbPair::negative(),
                    offset: LineOffset::zero(),
                },
            })
        })
        .collect()
}
