//! Whole-dataset detection, re-selection and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{Detection, EvalReport};
use crate::geometry::{ImageSize, Line};
use crate::select::SelectionResult;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::detect::{apply_selection, Detector, SelectionMode};
use super::io::{AnnotationRecord, DetectionRecord, PairwiseRecord};
use super::synth::Scene;

/// Per-image outputs of [`detect_scenes`], in scene order.
#[derive(Clone, Debug, Default)]
pub struct DetectedSet {
    pub raw: Vec<DetectionRecord>,
    /// Present for every image when the mode is rank-and-match.
    pub pairwise: Vec<PairwiseRecord>,
    pub selected: Vec<DetectionRecord>,
    pub traces: Vec<(String, Option<SelectionResult>)>,
}

impl DetectedSet {
    /// Selection steps as text, one `id step selected removed...` row per step.
    pub fn trace_text(&self) -> String {
        trace_text(&self.traces)
    }
}

pub fn trace_text(traces: &[(String, Option<SelectionResult>)]) -> String {
    let mut out = String::from("# id step selected removed...\n");
    for (id, sel) in traces {
        let Some(sel) = sel else { continue };
        for (k, s) in sel.steps.iter().enumerate() {
            write!(out, "{id} {k} {}", s.selected).expect("string write");
            for r in &s.removed {
                write!(out, " {r}").expect("string write");
            }
            out.push('\n');
        }
    }
    out
}

/// Runs the detector over every scene with `config.selection`.
pub fn detect_scenes(scenes: &[Scene], ckpt: &Checkpoint, config: &TrainConfig) -> Result<DetectedSet> {
    let mut detectors: BTreeMap<(usize, usize), Detector> = BTreeMap::new();
    let mut out = DetectedSet::default();
    for s in scenes {
        let size = s.size();
        let key = (size.width(), size.height());
        if !detectors.contains_key(&key) {
            let d = Detector::new(ckpt, size, config.candidate_step, config.selection, config.nms_threshold)?;
            detectors.insert(key, d);
        }
        let res = detectors[&key].run(&s.image)?;
        out.raw.push(DetectionRecord {
            id: s.id.clone(),
            size,
            detections: res.raw,
        });
        if config.selection == SelectionMode::RankMatch {
            let (rank, matching) = match res.pairwise {
                Some(p) => p,
                None => empty_pairwise(),
            };
            out.pairwise.push(PairwiseRecord {
                id: s.id.clone(),
                rank,
                matching,
            });
        }
        out.selected.push(DetectionRecord {
            id: s.id.clone(),
            size,
            detections: res.detections,
        });
        out.traces.push((s.id.clone(), res.selection));
    }
    Ok(out)
}

fn empty_pairwise() -> (crate::select::PairwiseMatrix, crate::select::PairwiseMatrix) {
    let e = crate::select::PairwiseMatrix::new(0, Vec::new()).expect("empty matrix");
    (e.clone(), e)
}

/// Re-runs selection on saved raw detections.
///
/// Rank-and-match needs a pairwise record for every image, matched by id.
pub fn reselect(
    raw: &[DetectionRecord],
    pairwise: &[PairwiseRecord],
    mode: SelectionMode,
    nms_threshold: f64,
) -> Result<(Vec<DetectionRecord>, Vec<(String, Option<SelectionResult>)>)> {
    let by_id: BTreeMap<&str, &PairwiseRecord> = pairwise.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut selected = Vec::with_capacity(raw.len());
    let mut traces = Vec::with_capacity(raw.len());
    for r in raw {
        let pw = match mode {
            SelectionMode::RankMatch => {
                let p = by_id
                    .get(r.id.as_str())
                    .ok_or_else(|| Error::Validation(format!("no pairwise scores for image {}", r.id)))?;
                Some((p.rank.clone(), p.matching.clone()))
            }
            _ => None,
        };
        let (dets, sel) = apply_selection(&r.detections, mode, r.size, nms_threshold, pw.as_ref())?;
        selected.push(DetectionRecord {
            id: r.id.clone(),
            size: r.size,
            detections: dets,
        });
        traces.push((r.id.clone(), sel));
    }
    Ok((selected, traces))
}

/// Metrics of `detections` against `annotations`, paired by image id.
///
/// Every annotated image needs a detection record; images without
/// annotated lines are skipped.
pub fn evaluate(
    detections: &[DetectionRecord],
    annotations: &[AnnotationRecord],
    config: &TrainConfig,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &DetectionRecord> = detections.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut pred_primaries = Vec::new();
    let mut pred_sets = Vec::new();
    let mut gt_primaries = Vec::new();
    let mut gt_sets = Vec::new();
    let mut sizes: Vec<ImageSize> = Vec::new();
    for a in annotations {
        let Some(primary) = a.lines.iter().find(|g| g.primary) else {
            continue;
        };
        let d = by_id
            .get(a.id.as_str())
            .ok_or_else(|| Error::Validation(format!("no detections for image {}", a.id)))?;
        if d.size != a.size {
            return Err(Error::Validation(format!(
                "image {}: detections are for {}, annotation for {}",
                a.id, d.size, a.size
            )));
        }
        pred_primaries.push(d.detections.iter().find(|x| x.primary).map(|x| x.line));
        pred_sets.push(d.detections.iter().map(|x| x.line).collect::<Vec<Line>>());
        gt_primaries.push(primary.line);
        gt_sets.push(a.lines.iter().map(|g| g.line).collect());
        sizes.push(a.size);
    }
    EvalReport::compute(
        &pred_primaries,
        &pred_sets,
        &gt_primaries,
        &gt_sets,
        &sizes,
        (config.tau_lo, config.tau_hi, config.tau_step),
    )
}

/// Detection records from in-memory selections, for callers that skip files.
pub fn records(scenes: &[Scene], sets: Vec<Vec<Detection>>) -> Vec<DetectionRecord> {
    scenes
        .iter()
        .zip(sets)
        .map(|(s, d)| DetectionRecord {
            id: s.id.clone(),
            size: s.size(),
            detections: d,
        })
        .collect()
}
