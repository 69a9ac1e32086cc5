//! Two-stage training on labeled scenes.
//!
//! Stage 1 fits D-Net by minibatch gradient descent on its candidate loss.
//! Stage 2 freezes D-Net, runs it over the training images, and fits the
//! R-Net and M-Net heads on pairs of the resulting line features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featgrid::FeatureGrid;
use crate::geometry::{ImageSize, SplitLine};
use crate::model::dnet::{head_forward, image_loss, image_loss_and_grad, LossParts};
use crate::model::siamese::siamese_loss_and_grad;
use crate::model::{CandidateLabel, DNetParams, ImageFeatures, LineGeometry, SiameseHeadParams};
use crate::neural::ProbPair;
use crate::select::{build_pair_labels, LineRef, PairTask};

use super::checkpoint::{param_checksum, Checkpoint};
use super::config::TrainConfig;
use super::detect::{CandidateSet, Detector, SelectionMode};
use super::labels::{assign_candidate_labels, best_gt};
use super::synth::Scene;

/// Pairs per gradient step when fitting the Siamese heads.
pub const PAIR_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DNet,
    RNet,
    MNet,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::DNet => "dnet",
            Stage::RNet => "rnet",
            Stage::MNet => "mnet",
        }
    }
}

/// Mean per-sample losses of one epoch. Epoch 0 is measured before any
/// update; later epochs average the losses seen during their steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// D-Net parameter checksums around stage 2.
    pub dnet_checksum_before: u64,
    pub dnet_checksum_after: u64,
}

impl TrainLog {
    pub fn stage(&self, stage: Stage) -> Vec<&LogEntry> {
        self.entries.iter().filter(|e| e.stage == stage).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,loss,cls_loss,reg_loss,samples\n");
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{}",
                e.stage.as_str(),
                e.epoch,
                e.loss,
                e.cls_loss,
                e.reg_loss,
                e.samples
            )
            .expect("string write");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Candidate sets keyed by image size.
#[derive(Default)]
struct CandidateCache {
    sets: BTreeMap<(usize, usize), CandidateSet>,
}

impl CandidateCache {
    fn get(&mut self, size: ImageSize, config: &TrainConfig, params: &DNetParams) -> Result<&CandidateSet> {
        let key = (size.width(), size.height());
        if !self.sets.contains_key(&key) {
            let set = CandidateSet::new(size, config.candidate_step, &params.topology)?;
            self.sets.insert(key, set);
        }
        Ok(&self.sets[&key])
    }
}

struct SceneLabels {
    size: (usize, usize),
    labels: Vec<CandidateLabel>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

/// Which candidates each scene contributes in one epoch, in visiting order.
fn epoch_plan(rng: &mut ChaCha8Rng, labels: &[SceneLabels], negatives: usize) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|s| {
            let sl = &labels[s];
            let mut pick = sl.positives.clone();
            let k = negatives.min(sl.negatives.len());
            pick.extend(sample(rng, sl.negatives.len(), k).into_iter().map(|i| sl.negatives[i]));
            (s, pick)
        })
        .collect()
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            reason: format!("loss became {loss}"),
        })
    }
}

fn entry(stage: Stage, epoch: usize, parts: LossParts, n: usize) -> LogEntry {
    let d = n.max(1) as f64;
    LogEntry {
        stage,
        epoch,
        loss: parts.total() / d,
        cls_loss: parts.cls / d,
        reg_loss: parts.reg / d,
        samples: n,
    }
}

/// Stage 1: D-Net from random trunk weights and zeroed heads.
pub fn train_dnet(scenes: &[Scene], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(DNetParams, Vec<LogEntry>)> {
    let channels = scenes[0].image.channels();
    let topology = crate::model::DNetTopology {
        input_channels: channels,
        ..config.topology()
    };
    let mut params = DNetParams::random(topology, rng)?;
    params.zero_heads();
    let mut cache = CandidateCache::default();
    let mut labels = Vec::with_capacity(scenes.len());
    for s in scenes {
        let size = s.size();
        let set = cache.get(size, config, &params)?;
        let lab = assign_candidate_labels(&set.lines(), &s.gt_lines(), size, config.positive_threshold)?;
        let positives = (0..lab.len()).filter(|&i| lab[i].is_positive()).collect();
        let negatives = (0..lab.len()).filter(|&i| !lab[i].is_positive()).collect();
        labels.push(SceneLabels {
            size: (size.width(), size.height()),
            labels: lab,
            positives,
            negatives,
        });
    }
    let samples_of = |s: usize, pick: &[usize], cache: &CandidateCache| -> Vec<(LineGeometry, CandidateLabel)> {
        let set = &cache.sets[&labels[s].size];
        pick.iter()
            .map(|&i| (set.geometries()[i].clone(), labels[s].labels[i]))
            .collect()
    };

    let inputs: Vec<FeatureGrid> = scenes.iter().map(|s| s.image.standardize_channels()).collect();
    let mut log = Vec::new();
    let mut plan = epoch_plan(rng, &labels, config.negatives_per_image);
    let mut initial = LossParts::default();
    let mut count = 0;
    for (s, pick) in &plan {
        let owned = samples_of(*s, pick, &cache);
        let refs: Vec<(&LineGeometry, CandidateLabel)> = owned.iter().map(|(g, l)| (g, *l)).collect();
        let p = image_loss(&params, &inputs[*s], &refs, config.lambda)?;
        initial.cls += p.cls;
        initial.reg += p.reg;
        count += refs.len();
    }
    check_finite(0, initial.total())?;
    log.push(entry(Stage::DNet, 0, initial, count));

    for epoch in 1..=config.epochs {
        if epoch > 1 {
            plan = epoch_plan(rng, &labels, config.negatives_per_image);
        }
        let mut seen = LossParts::default();
        let mut count = 0;
        for batch in plan.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            let mut n = 0;
            for (s, pick) in batch {
                let owned = samples_of(*s, pick, &cache);
                let refs: Vec<(&LineGeometry, CandidateLabel)> = owned.iter().map(|(g, l)| (g, *l)).collect();
                let (p, g, _) = image_loss_and_grad(&params, &inputs[*s], &refs, config.lambda)?;
                seen.cls += p.cls;
                seen.reg += p.reg;
                n += refs.len();
                grads.add_scaled(&g, 1.0);
            }
            check_finite(epoch, seen.total())?;
            if n > 0 {
                params.add_scaled(&grads, -config.learning_rate / n as f64);
            }
            count += n;
        }
        log.push(entry(Stage::DNet, epoch, seen, count));
    }
    Ok((params, log))
}

/// Feature pair with a one-hot target; indices point into one scene's feature list.
#[derive(Clone, Copy, Debug)]
struct PairSample {
    scene: usize,
    a: usize,
    b: usize,
    target: ProbPair,
}

struct PairData {
    /// Per scene: detection features followed by ground-truth features.
    features: Vec<Vec<Vec<f64>>>,
    ranking: Vec<PairSample>,
    matching: Vec<PairSample>,
}

fn take_up_to(rng: &mut ChaCha8Rng, v: Vec<PairSample>, k: usize) -> Vec<PairSample> {
    if v.len() <= k {
        return v;
    }
    let mut idx = sample(rng, v.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| v[i]).collect()
}

/// Runs the frozen D-Net over the training scenes and collects pair labels.
fn collect_pairs(scenes: &[Scene], ckpt: &Checkpoint, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PairData> {
    let mut detectors: BTreeMap<(usize, usize), Detector> = BTreeMap::new();
    let mut data = PairData {
        features: Vec::new(),
        ranking: Vec::new(),
        matching: Vec::new(),
    };
    for (si, s) in scenes.iter().enumerate() {
        let size = s.size();
        let key = (size.width(), size.height());
        if !detectors.contains_key(&key) {
            detectors.insert(
                key,
                Detector::new(ckpt, size, config.candidate_step, SelectionMode::None, config.nms_threshold)?,
            );
        }
        let (dets, mut feats) = detectors[&key].raw(&s.image)?;
        let gts = s.gt_lines();
        let gsplit = gts.iter().map(|g| SplitLine::new(*g, size)).collect::<Result<Vec<_>>>()?;
        let image_feats = ImageFeatures::compute(&ckpt.dnet, &s.image.standardize_channels())?;
        let mut gt_slot = Vec::with_capacity(gts.len());
        for g in &gts {
            match LineGeometry::new(g, size, &ckpt.dnet.topology) {
                Ok(geom) => {
                    gt_slot.push(Some(feats.len()));
                    feats.push(head_forward(&ckpt.dnet, &image_feats, &geom)?.feature);
                }
                Err(Error::DegenerateRegion(_)) => gt_slot.push(None),
                Err(e) => return Err(e),
            }
        }
        let matched: Vec<(crate::geometry::Line, Option<usize>)> = dets
            .iter()
            .map(|d| {
                let split = SplitLine::new(d.line, size)?;
                let m = best_gt(&split, &gsplit).filter(|&(_, m)| m > config.positive_threshold);
                Ok((d.line, m.map(|(k, _)| k)))
            })
            .collect::<Result<Vec<_>>>()?;
        let slot = |r: LineRef| match r {
            LineRef::Detection(d) => Some(d),
            LineRef::GroundTruth(g) => gt_slot[g],
        };
        let mut ranking = Vec::new();
        let mut match_pos = Vec::new();
        let mut match_neg = Vec::new();
        for l in build_pair_labels(&matched, &gts)? {
            let (Some(a), Some(b)) = (slot(l.first), slot(l.second)) else {
                continue;
            };
            let ps = PairSample {
                scene: si,
                a,
                b,
                target: l.target,
            };
            match (l.task, l.target.is_positive()) {
                (PairTask::Ranking, _) => ranking.push(ps),
                (PairTask::Matching, true) => match_pos.push(ps),
                (PairTask::Matching, false) => match_neg.push(ps),
            }
        }
        let mut ranking = take_up_to(rng, ranking, config.pair_cap);
        if config.rank_primary_pairs {
            let primary = s.lines.iter().position(|g| g.primary);
            let mut extra = Vec::new();
            for (a, (_, ga)) in matched.iter().enumerate() {
                for (b, (_, gb)) in matched.iter().enumerate() {
                    if let (Some(ga), Some(gb)) = (ga, gb) {
                        if Some(*ga) == primary && Some(*gb) != primary {
                            for (x, y, t) in [(a, b, ProbPair::positive()), (b, a, ProbPair::negative())] {
                                extra.push(PairSample {
                                    scene: si,
                                    a: x,
                                    b: y,
                                    target: t,
                                });
                            }
                        }
                    }
                }
            }
            ranking.extend(take_up_to(rng, extra, config.pair_cap));
        }
        let half = config.pair_cap / 2;
        data.ranking.extend(ranking);
        data.matching.extend(take_up_to(rng, match_pos, half));
        data.matching.extend(take_up_to(rng, match_neg, config.pair_cap - half));
        data.features.push(feats);
    }
    Ok(data)
}

fn fit_head(
    stage: Stage,
    samples: &mut [PairSample],
    features: &[Vec<Vec<f64>>],
    feature_dim: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SiameseHeadParams, Vec<LogEntry>)> {
    let mut params = SiameseHeadParams::random(rng, feature_dim, config.siamese_hidden);
    let mut log = Vec::new();
    let loss_of = |p: &SiameseHeadParams, s: &PairSample| {
        let f = &features[s.scene];
        siamese_loss_and_grad(p, &f[s.a], &f[s.b], s.target)
    };
    let mut initial = 0.0;
    for s in samples.iter() {
        initial += loss_of(&params, s)?.0;
    }
    check_finite(0, initial)?;
    log.push(entry(stage, 0, LossParts { cls: initial, reg: 0.0 }, samples.len()));
    for epoch in 1..=config.siamese_epochs {
        samples.shuffle(rng);
        let mut total = 0.0;
        for batch in samples.chunks(PAIR_BATCH) {
            let mut grads = params.zeros_like();
            for s in batch {
                let (l, g) = loss_of(&params, s)?;
                total += l;
                grads.add_scaled(&g, 1.0);
            }
            check_finite(epoch, total)?;
            params.add_scaled(&grads, -config.siamese_learning_rate / batch.len() as f64);
        }
        log.push(entry(stage, epoch, LossParts { cls: total, reg: 0.0 }, samples.len()));
    }
    Ok((params, log))
}

/// Stage 2: R-Net and M-Net on the frozen D-Net's features.
pub fn train_heads(
    scenes: &[Scene],
    dnet: DNetParams,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Checkpoint, TrainLog)> {
    let before = param_checksum(&dnet.to_flat());
    let dim = dnet.topology.fc1_width;
    let placeholder = SiameseHeadParams::zeros(dim, config.siamese_hidden);
    let mut ckpt = Checkpoint {
        dnet,
        rnet: placeholder.clone(),
        mnet: placeholder,
    };
    let mut data = collect_pairs(scenes, &ckpt, config, rng)?;
    let (rnet, rlog) = fit_head(Stage::RNet, &mut data.ranking, &data.features, dim, config, rng)?;
    let (mnet, mlog) = fit_head(Stage::MNet, &mut data.matching, &data.features, dim, config, rng)?;
    ckpt.rnet = rnet;
    ckpt.mnet = mnet;
    let after = param_checksum(&ckpt.dnet.to_flat());
    if before != after {
        return Err(Error::Training {
            epoch: 0,
            reason: "D-Net parameters changed while training the comparison heads".into(),
        });
    }
    Ok((
        ckpt,
        TrainLog {
            entries: rlog.into_iter().chain(mlog).collect(),
            dnet_checksum_before: before,
            dnet_checksum_after: after,
        },
    ))
}

/// Both training stages; deterministic in `config.seed`.
pub fn train_toy(scenes: &[Scene], config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dnet, dlog) = train_dnet(scenes, config, &mut rng)?;
    let (checkpoint, mut log) = train_heads(scenes, dnet, config, &mut rng)?;
    log.entries.splice(0..0, dlog);
    Ok(Trained { checkpoint, log })
}
