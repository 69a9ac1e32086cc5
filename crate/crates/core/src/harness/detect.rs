use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::featgrid::FeatureGrid;
use crate::geometry::{generate_candidates, ImageSize, Line};
use crate::model::dnet::head_forward;
use crate::model::{regress_line, DNetTopology, ImageFeatures, LineGeometry};
use crate::select::{nms, pairwise_scores, select_iterate, PairwiseMatrix, SelectionResult};

use super::checkpoint::Checkpoint;

/// How surviving detections are reduced to the final set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// R-Net ranking with M-Net removal.
    RankMatch,
    /// mIoU non-maximum suppression.
    Nms,
    /// Keep every surviving detection.
    None,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::RankMatch => "rm",
            SelectionMode::Nms => "nms",
            SelectionMode::None => "none",
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rm" => Ok(SelectionMode::RankMatch),
            "nms" => Ok(SelectionMode::Nms),
            "none" => Ok(SelectionMode::None),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

/// Candidate lines of one image size with their precomputed geometry.
/// Candidates whose pooling strips would be empty are left out.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    size: ImageSize,
    geoms: Vec<LineGeometry>,
}

impl CandidateSet {
    pub fn new(size: ImageSize, step: f64, topology: &DNetTopology) -> Result<Self> {
        let mut geoms = Vec::new();
        for line in generate_candidates(size, step)? {
            match LineGeometry::new(&line, size, topology) {
                Ok(g) => geoms.push(g),
                Err(Error::DegenerateRegion(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if geoms.is_empty() {
            return Err(Error::EmptyCandidates(format!("no poolable candidates at step {step} on {size}")));
        }
        Ok(CandidateSet { size, geoms })
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn geometries(&self) -> &[LineGeometry] {
        &self.geoms
    }

    /// Canonical candidate lines.
    pub fn lines(&self) -> Vec<Line> {
        self.geoms.iter().map(|g| *g.line()).collect()
    }

    pub fn len(&self) -> usize {
        self.geoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geoms.is_empty()
    }
}

/// Everything `detect` produces for one image.
#[derive(Clone, Debug)]
pub struct DetectOutput {
    /// Candidates with `p > 0.5` after regression, in candidate order; the
    /// highest-scoring one is flagged primary.
    pub raw: Vec<Detection>,
    /// `FC1` feature of each raw detection's line.
    pub features: Vec<Vec<f64>>,
    pub pairwise: Option<(PairwiseMatrix, PairwiseMatrix)>,
    pub selection: Option<SelectionResult>,
    /// The selected lines, primary first.
    pub detections: Vec<Detection>,
}

/// Runs D-Net over every candidate and selects lines.
#[derive(Clone, Debug)]
pub struct Detector<'a> {
    ckpt: &'a Checkpoint,
    candidates: CandidateSet,
    mode: SelectionMode,
    nms_threshold: f64,
}

impl<'a> Detector<'a> {
    pub fn new(ckpt: &'a Checkpoint, size: ImageSize, step: f64, mode: SelectionMode, nms_threshold: f64) -> Result<Self> {
        let candidates = CandidateSet::new(size, step, &ckpt.dnet.topology)?;
        Ok(Detector {
            ckpt,
            candidates,
            mode,
            nms_threshold,
        })
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    /// Surviving detections and their features, before selection.
    ///
    /// The image is standardized per channel before the backbone, as in training.
    pub fn raw(&self, image: &FeatureGrid) -> Result<(Vec<Detection>, Vec<Vec<f64>>)> {
        let params = &self.ckpt.dnet;
        let size = self.candidates.size;
        let feats = ImageFeatures::compute(params, &image.standardize_channels())?;
        if feats.image_size() != size {
            return Err(Error::Dimension(format!(
                "detector built for {size}, image is {}",
                feats.image_size()
            )));
        }
        let mut dets = Vec::new();
        let mut features = Vec::new();
        for geom in &self.candidates.geoms {
            let out = head_forward(params, &feats, geom)?;
            if !out.prob.is_positive() {
                continue;
            }
            // a degenerate regression keeps the candidate line and its feature
            let moved = regress_line(geom.line(), &out.offset, size)
                .ok()
                .and_then(|l| LineGeometry::new(&l, size, &params.topology).ok());
            let (line, feature) = match moved {
                Some(g) => (*g.line(), head_forward(params, &feats, &g)?.feature),
                None => (*geom.line(), out.feature),
            };
            dets.push(Detection {
                line,
                score: out.prob.p,
                primary: false,
            });
            features.push(feature);
        }
        if let Some(best) = by_score(&dets).first() {
            dets[*best].primary = true;
        }
        Ok((dets, features))
    }

    pub fn run(&self, image: &FeatureGrid) -> Result<DetectOutput> {
        let (raw, features) = self.raw(image)?;
        let pairwise = match self.mode {
            SelectionMode::RankMatch if !raw.is_empty() => {
                Some(pairwise_scores(&features, &self.ckpt.rnet, &self.ckpt.mnet)?)
            }
            _ => None,
        };
        let (detections, selection) =
            apply_selection(&raw, self.mode, self.candidates.size, self.nms_threshold, pairwise.as_ref())?;
        Ok(DetectOutput {
            raw,
            features,
            pairwise,
            selection,
            detections,
        })
    }
}

/// Indices by descending score, ties by index.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Reduces raw detections to the final set, primary first.
///
/// Rank-and-match mode needs the pairwise matrices over `raw`.
pub fn apply_selection(
    raw: &[Detection],
    mode: SelectionMode,
    size: ImageSize,
    nms_threshold: f64,
    pairwise: Option<&(PairwiseMatrix, PairwiseMatrix)>,
) -> Result<(Vec<Detection>, Option<SelectionResult>)> {
    if raw.is_empty() {
        return Ok((Vec::new(), None));
    }
    let (order, selection) = match mode {
        SelectionMode::None => (by_score(raw), None),
        SelectionMode::Nms => {
            let lines: Vec<Line> = raw.iter().map(|d| d.line).collect();
            let scores: Vec<f64> = raw.iter().map(|d| d.score).collect();
            (nms(&lines, &scores, size, nms_threshold)?, None)
        }
        SelectionMode::RankMatch => {
            let (pr, pm) = pairwise.ok_or_else(|| {
                Error::Validation("rank-and-match selection needs pairwise scores".into())
            })?;
            if pr.n() != raw.len() {
                return Err(Error::Dimension(format!(
                    "{} detections but {}x{} pairwise scores",
                    raw.len(),
                    pr.n(),
                    pr.n()
                )));
            }
            let sel = select_iterate(pr, pm)?;
            (sel.selected(), Some(sel))
        }
    };
    let dets = order
        .iter()
        .enumerate()
        .map(|(k, &i)| Detection {
            primary: k == 0,
            ..raw[i]
        })
        .collect();
    Ok((dets, selection))
}

/// Detections for one image with the configured selection mode.
pub fn detect(image: &FeatureGrid, ckpt: &Checkpoint, config: &super::TrainConfig) -> Result<Vec<Detection>> {
    let size = ImageSize::new(image.width(), image.height())?;
    let det = Detector::new(ckpt, size, config.candidate_step, config.selection, config.nms_threshold)?;
    Ok(det.run(image)?.detections)
}
