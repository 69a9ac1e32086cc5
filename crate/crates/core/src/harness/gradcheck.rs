//! Finite-difference checks of every backward pass, bundled for the CLI and
//! the acceptance run.
//!
//! Each primitive is checked through the scalar loss `sum(out * r)` for a
//! random `r`, so the analytic gradient is the backward pass fed with `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featgrid::{FeatureGrid, GridLine};
use crate::geometry::ImageSize;
use crate::model::attention::{attention_backward, attention_forward, AttentionGeometry};
use crate::model::dnet::{head_forward, image_loss_and_grad};
use crate::model::pooling::PoolRegions;
use crate::model::siamese::siamese_loss_and_grad;
use crate::model::{
    dnet_loss, AttentionMode, CandidateLabel, DNetParams, DNetTopology, ImageFeatures, LineGeometry, LineOffset,
    MirrorAttentionParams, SiameseHeadParams,
};
use crate::neural::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, cross_entropy, cross_entropy_logit_grad, dense,
    dense_backward, grad_check, grad_check_coords, smooth_l1, smooth_l1_grad, softmax2, tanh_backward, tanh_grid,
    ConvParams, DenseParams, GradCheck, ProbPair,
};

use super::synth::sample_line;

/// Step for the primitive checks.
pub const PRIMITIVE_EPS: f64 = 1e-5;
/// Step for the full D-Net composition, whose smallest gradients are near
/// 1e-8 and drown in rounding noise at smaller steps.
pub const COMPOSITION_EPS: f64 = 1e-3;
/// Sampled parameter coordinates per tensor in the composition check.
pub const COORDS_PER_TENSOR: usize = 32;
/// Sampled input coordinates in the composition check.
pub const INPUT_COORDS: usize = 64;

fn grid(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn worse(a: GradCheck, b: GradCheck) -> GradCheck {
    let checked = a.checked + b.checked;
    let w = if b.max_rel_error > a.max_rel_error { b } else { a };
    GradCheck { checked, ..w }
}

fn conv_flat(p: &ConvParams) -> Vec<f64> {
    p.weights.iter().chain(&p.bias).copied().collect()
}

fn conv_set(p: &mut ConvParams, v: &[f64]) {
    let n = p.weights.len();
    p.weights.copy_from_slice(&v[..n]);
    p.bias.copy_from_slice(&v[n..]);
}

fn attention_flat(p: &MirrorAttentionParams) -> Vec<f64> {
    [&p.f0, &p.f1, &p.f2].into_iter().flat_map(conv_flat).collect()
}

fn attention_set(p: &mut MirrorAttentionParams, v: &[f64]) {
    let mut off = 0;
    for c in [&mut p.f0, &mut p.f1, &mut p.f2] {
        let n = c.weights.len() + c.bias.len();
        conv_set(c, &v[off..off + n]);
        off += n;
    }
}

fn random_grid_line(rng: &mut impl Rng, h: usize, w: usize) -> Result<GridLine> {
    let size = ImageSize::new(w, h)?;
    GridLine::new(sample_line(rng, size, 0.2), size)
}

fn conv_check(rng: &mut impl Rng) -> Result<GradCheck> {
    let p = ConvParams::random(rng, 3, 3, 4);
    let x = grid(rng, 6, 5, 3);
    let r = grid(rng, 6, 5, 4);
    let (gx, gp) = conv2d_backward(&p, &x, &r);
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let a = grad_check(
        |v| dot(conv2d(&p, &FeatureGrid::from_vec(h, w, c, v.to_vec()).unwrap()).unwrap().data(), r.data()),
        x.data(),
        gx.data(),
        PRIMITIVE_EPS,
    )?;
    let b = grad_check(
        |v| {
            let mut q = p.clone();
            conv_set(&mut q, v);
            dot(conv2d(&q, &x).unwrap().data(), r.data())
        },
        &conv_flat(&p),
        &conv_flat(&gp),
        PRIMITIVE_EPS,
    )?;
    Ok(worse(a, b))
}

fn dense_check(rng: &mut impl Rng) -> Result<GradCheck> {
    let p = DenseParams::random(rng, 7, 5);
    let x = vec(rng, 7);
    let r = vec(rng, 5);
    let (gx, gp) = dense_backward(&p, &x, &r);
    let a = grad_check(|v| dot(&dense(&p, v).unwrap(), &r), &x, &gx, PRIMITIVE_EPS)?;
    let flat = |d: &DenseParams| d.weights.iter().chain(&d.bias).copied().collect::<Vec<_>>();
    let b = grad_check(
        |v| {
            let mut q = p.clone();
            let n = q.weights.len();
            q.weights.copy_from_slice(&v[..n]);
            q.bias.copy_from_slice(&v[n..]);
            dot(&dense(&q, &x).unwrap(), &r)
        },
        &flat(&p),
        &flat(&gp),
        PRIMITIVE_EPS,
    )?;
    Ok(worse(a, b))
}

fn activation_checks(rng: &mut impl Rng) -> Result<Vec<(&'static str, GradCheck)>> {
    let x = grid(rng, 4, 6, 2);
    let (h, w, c) = (4, 6, 2);
    let r = grid(rng, h, w, c);
    let y = tanh_grid(&x);
    let g = tanh_backward(&y, &r);
    let tanh = grad_check(
        |v| dot(tanh_grid(&FeatureGrid::from_vec(h, w, c, v.to_vec()).unwrap()).data(), r.data()),
        x.data(),
        g.data(),
        PRIMITIVE_EPS,
    )?;

    let rp = grid(rng, h / 2, w / 2, c);
    let g = avg_pool2_backward(h, w, &rp);
    let pool = grad_check(
        |v| dot(avg_pool2(&FeatureGrid::from_vec(h, w, c, v.to_vec()).unwrap()).unwrap().data(), rp.data()),
        x.data(),
        g.data(),
        PRIMITIVE_EPS,
    )?;

    let logits = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
    let label = ProbPair::new(0.3, 0.7)?;
    let g = cross_entropy_logit_grad(logits, label);
    let ce = grad_check(
        |v| cross_entropy(softmax2([v[0], v[1]]), label),
        &logits,
        &g,
        PRIMITIVE_EPS,
    )?;

    let delta: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let g = smooth_l1_grad(&delta, &target);
    let sl1 = grad_check(|v| smooth_l1(v, &target), &delta, &g, PRIMITIVE_EPS)?;
    Ok(vec![("tanh", tanh), ("avg_pool2", pool), ("softmax_cross_entropy", ce), ("smooth_l1", sl1)])
}

fn attention_check(rng: &mut impl Rng, mirror: bool) -> Result<GradCheck> {
    let (h, w, c) = (8, 8, 3);
    let line = random_grid_line(rng, h, w)?;
    let geom = AttentionGeometry::new(&line, 2.0)?;
    let p = MirrorAttentionParams::random(rng, c, 3, 2.0, mirror);
    let x = grid(rng, h, w, c);
    let r = grid(rng, h, w, c);
    let (_, cache) = attention_forward(&x, &geom, &p)?;
    let (gx, gp) = attention_backward(&geom, &p, &cache, &r);
    let out = |x: &FeatureGrid, p: &MirrorAttentionParams| dot(attention_forward(x, &geom, p).unwrap().0.data(), r.data());
    let a = grad_check(
        |v| out(&FeatureGrid::from_vec(h, w, c, v.to_vec()).unwrap(), &p),
        x.data(),
        gx.data(),
        PRIMITIVE_EPS,
    )?;
    let b = grad_check(
        |v| {
            let mut q = p.clone();
            attention_set(&mut q, v);
            out(&x, &q)
        },
        &attention_flat(&p),
        &attention_flat(&gp),
        PRIMITIVE_EPS,
    )?;
    Ok(worse(a, b))
}

fn pooling_check(rng: &mut impl Rng) -> Result<GradCheck> {
    let (h, w, c) = (10, 10, 2);
    let regions = loop {
        if let Ok(r) = PoolRegions::new(&random_grid_line(rng, h, w)?, 2.5) {
            break r;
        }
    };
    let x = grid(rng, h, w, c);
    let r = vec(rng, 2 * c);
    let g = regions.pool_backward(h, w, &r);
    grad_check(
        |v| dot(&regions.pool(&FeatureGrid::from_vec(h, w, c, v.to_vec()).unwrap()), &r),
        x.data(),
        g.data(),
        PRIMITIVE_EPS,
    )
}

fn siamese_check(rng: &mut impl Rng) -> Result<GradCheck> {
    let p = SiameseHeadParams::random(rng, 6, 5);
    let fi = vec(rng, 6);
    let fj = vec(rng, 6);
    let label = if rng.gen_bool(0.5) { ProbPair::positive() } else { ProbPair::negative() };
    let (_, g) = siamese_loss_and_grad(&p, &fi, &fj, label)?;
    grad_check(
        |v| {
            let mut q = p.clone();
            q.set_flat(v);
            siamese_loss_and_grad(&q, &fi, &fj, label).unwrap().0
        },
        &p.to_flat(),
        &g.to_flat(),
        PRIMITIVE_EPS,
    )
}

/// Every primitive's worst relative error for one seed.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![("conv2d", conv_check(&mut rng)?), ("dense", dense_check(&mut rng)?)];
    out.extend(activation_checks(&mut rng)?);
    out.push(("mirror_attention", attention_check(&mut rng, true)?));
    out.push(("no_flip_attention", attention_check(&mut rng, false)?));
    out.push(("region_pool", pooling_check(&mut rng)?));
    out.push(("siamese_head", siamese_check(&mut rng)?));
    Ok(out)
}

/// D-Net loss of one candidate, recomputed from scratch.
fn candidate_loss(p: &DNetParams, img: &FeatureGrid, geom: &LineGeometry, label: CandidateLabel) -> Result<f64> {
    let feats = ImageFeatures::compute(p, img)?;
    let out = head_forward(p, &feats, geom)?;
    Ok(dnet_loss((out.prob, out.offset), (label.prob, label.offset), 1.0))
}

/// The full loss-of-forward composition on a 16x16x4 input with the default
/// topology and random weights, checked on sampled parameter and input
/// coordinates. Seeds cycle through the three attention modes.
pub fn composition_check(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = ImageSize::new(16, 16)?;
    let mode = [AttentionMode::Mirror, AttentionMode::NoFlip, AttentionMode::Off][(seed % 3) as usize];
    let topo = DNetTopology {
        input_channels: 4,
        attention: mode,
        ..DNetTopology::default()
    };
    let p = DNetParams::random(topo, &mut rng)?;
    let img = FeatureGrid::from_fn(16, 16, 4, |_, _, _| rng.gen_range(0.0..1.0));
    let geom = loop {
        match LineGeometry::new(&sample_line(&mut rng, size, 0.2), size, &p.topology) {
            Ok(g) => break g,
            Err(Error::DegenerateRegion(_)) => continue,
            Err(e) => return Err(e),
        }
    };
    let label = CandidateLabel {
        prob: if seed % 2 == 0 { ProbPair::positive() } else { ProbPair::negative() },
        offset: LineOffset([0.0; 4].map(|_: f64| rng.gen_range(-3.0..3.0))),
    };
    let (_, grads, g_img) = image_loss_and_grad(&p, &img, &[(&geom, label)], 1.0)?;

    let mut coords = Vec::new();
    let mut off = 0;
    for (_, _, t) in p.tensors() {
        for _ in 0..COORDS_PER_TENSOR.min(t.len()) {
            coords.push(off + rng.gen_range(0..t.len()));
        }
        off += t.len();
    }
    let params = grad_check_coords(
        |v| {
            let mut q = p.clone();
            q.set_flat(v);
            candidate_loss(&q, &img, &geom, label).unwrap_or(f64::NAN)
        },
        &p.to_flat(),
        &grads.to_flat(),
        COMPOSITION_EPS,
        &coords,
    )?;
    let coords: Vec<usize> = (0..INPUT_COORDS).map(|_| rng.gen_range(0..img.data().len())).collect();
    let input = grad_check_coords(
        |v| candidate_loss(&p, &FeatureGrid::from_vec(16, 16, 4, v.to_vec()).unwrap(), &geom, label).unwrap_or(f64::NAN),
        img.data(),
        g_img.data(),
        COMPOSITION_EPS,
        &coords,
    )?;
    Ok(worse(params, input))
}

/// Worst error per check over `seeds`, composition last.
pub fn run_all(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut acc: Vec<(&'static str, GradCheck)> = Vec::new();
    for seed in seeds {
        let mut row = primitive_checks(seed)?;
        row.push(("dnet_composition", composition_check(seed)?));
        if acc.is_empty() {
            acc = row;
        } else {
            for (a, (_, b)) in acc.iter_mut().zip(row) {
                a.1 = worse(a.1, b);
            }
        }
    }
    Ok(acc)
}
