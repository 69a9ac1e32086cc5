//! The detection network.
//!
//! A small convolutional backbone runs once per image. Each candidate line
//! then passes through a mirror attention block on each of the two attended
//! stages, is region-pooled there, and the two pooled vectors feed a shared
//! `FC1` layer. Classification and regression heads branch from `FC1`.

use rand::Rng;

use super::attention::{
    attention_backward, attention_forward, AttentionCache, AttentionGeometry, AttentionMode,
    MirrorAttentionParams,
};
use super::pooling::PoolRegions;
use crate::error::{Error, Result};
use crate::featgrid::{FeatureGrid, GridLine};
use crate::geometry::{ImageSize, Line, Point};
use crate::neural::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, cross_entropy, cross_entropy_logit_grad,
    dense, dense_backward, smooth_l1, smooth_l1_grad, softmax2, tanh_backward, tanh_grid,
    ConvParams, DenseParams, ProbPair,
};

/// Regression offsets `(dx_s, dy_s, dx_e, dy_e)` in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LineOffset(pub [f64; 4]);

impl LineOffset {
    pub fn zero() -> Self {
        LineOffset([0.0; 4])
    }

    /// Offset taking `from` onto `to`, endpoint by endpoint.
    pub fn between(from: &Line, to: &Line) -> Self {
        LineOffset([
            to.start.x - from.start.x,
            to.start.y - from.start.y,
            to.end.x - from.end.x,
            to.end.y - from.end.y,
        ])
    }
}

/// Architecture of the detection network; stored with every checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DNetTopology {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    /// 2x average pooling after the stage.
    pub downsample_after: Vec<bool>,
    pub attended_stages: [usize; 2],
    pub kernel: usize,
    /// `n` of the attention block: `f0` is `n x n`, `f1`/`f2` are `(2n+1) x (2n+1)`.
    pub attention_kernel: usize,
    pub attention: AttentionMode,
    pub sigma: f64,
    pub pool_threshold: f64,
    pub fc1_width: usize,
}

impl Default for DNetTopology {
    fn default() -> Self {
        DNetTopology {
            input_channels: 3,
            stage_channels: vec![8, 16, 32, 32],
            downsample_after: vec![true, true, false, false],
            attended_stages: [2, 3],
            kernel: 3,
            attention_kernel: 3,
            attention: AttentionMode::Mirror,
            sigma: 4.0,
            pool_threshold: 3.0,
            fc1_width: 32,
        }
    }
}

impl DNetTopology {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.downsample_after.len() != n {
            return Err(Error::Config(format!(
                "{} stage widths but {} downsampling flags",
                n,
                self.downsample_after.len()
            )));
        }
        if self.attended_stages.iter().any(|&s| s >= n) {
            return Err(Error::Config(format!(
                "attended stages {:?} out of range for {n} stages",
                self.attended_stages
            )));
        }
        if self.kernel % 2 == 0 || self.attention_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.input_channels == 0 || self.fc1_width == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(self.pool_threshold > 0.0) {
            return Err(Error::Config("sigma and pooling threshold must be positive".into()));
        }
        Ok(())
    }

    /// Grid `(height, width)` seen by each stage for an image of `size`.
    pub fn stage_grids(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.stage_channels.len());
        let (mut h, mut w) = (height, width);
        for &down in &self.downsample_after {
            out.push((h, w));
            if down {
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    /// Length of the pooled vector fed to `FC1`.
    pub fn pooled_dim(&self) -> usize {
        self.attended_stages
            .iter()
            .map(|&s| 2 * self.stage_channels[s])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DNetParams {
    pub topology: DNetTopology,
    pub backbone: Vec<ConvParams>,
    /// One block per attended stage; empty when attention is off.
    pub attention: Vec<MirrorAttentionParams>,
    pub fc1: DenseParams,
    pub cls: DenseParams,
    pub reg: DenseParams,
}

impl DNetParams {
    /// Every layer initialized uniformly in `+-sqrt(1/fan_in)`.
    pub fn random(topology: DNetTopology, rng: &mut impl Rng) -> Result<Self> {
        topology.validate()?;
        let mut backbone = Vec::new();
        let mut depth = topology.input_channels;
        for &c in &topology.stage_channels {
            backbone.push(ConvParams::random(rng, topology.kernel, depth, c));
            depth = c;
        }
        let attention = match topology.attention {
            AttentionMode::Off => Vec::new(),
            mode => topology
                .attended_stages
                .iter()
                .map(|&s| {
                    MirrorAttentionParams::random(
                        rng,
                        topology.stage_channels[s],
                        topology.attention_kernel,
                        topology.sigma,
                        mode == AttentionMode::Mirror,
                    )
                })
                .collect(),
        };
        let fc1 = DenseParams::random(rng, topology.pooled_dim(), topology.fc1_width);
        let cls = DenseParams::random(rng, topology.fc1_width, 2);
        let reg = DenseParams::random(rng, topology.fc1_width, 4);
        Ok(DNetParams {
            topology,
            backbone,
            attention,
            fc1,
            cls,
            reg,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(topology: DNetTopology) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(Self::random(topology, &mut rng)?.zeros_like())
    }

    /// Zeroes the classification and regression heads (`p = 0.5`, `dl = 0` everywhere).
    pub fn zero_heads(&mut self) {
        self.cls = self.cls.zeros_like();
        self.reg = self.reg.zeros_like();
    }

    pub fn zeros_like(&self) -> Self {
        DNetParams {
            topology: self.topology.clone(),
            backbone: self.backbone.iter().map(ConvParams::zeros_like).collect(),
            attention: self.attention.iter().map(MirrorAttentionParams::zeros_like).collect(),
            fc1: self.fc1.zeros_like(),
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
        }
    }

    /// Named tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            push_conv(&mut out, &format!("backbone.{i}"), c);
        }
        for (i, a) in self.attention.iter().enumerate() {
            push_conv(&mut out, &format!("attention.{i}.f0"), &a.f0);
            push_conv(&mut out, &format!("attention.{i}.f1"), &a.f1);
            push_conv(&mut out, &format!("attention.{i}.f2"), &a.f2);
        }
        push_dense(&mut out, "fc1", &self.fc1);
        push_dense(&mut out, "cls", &self.cls);
        push_dense(&mut out, "reg", &self.reg);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for c in &mut self.backbone {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        for a in &mut self.attention {
            for c in [&mut a.f0, &mut a.f1, &mut a.f2] {
                out.push(&mut c.weights);
                out.push(&mut c.bias);
            }
        }
        for d in [&mut self.fc1, &mut self.cls, &mut self.reg] {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &DNetParams, alpha: f64) {
        let src: Vec<&Vec<f64>> = other.tensors().into_iter().map(|(_, _, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    /// Parameters of everything before the heads.
    pub fn trunk_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|(name, _, _)| !name.starts_with("cls.") && !name.starts_with("reg."))
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }
}

fn push_conv<'a>(out: &mut Vec<(String, Vec<usize>, &'a Vec<f64>)>, name: &str, c: &'a ConvParams) {
    out.push((
        format!("{name}.weight"),
        vec![c.out_depth, c.kernel_h, c.kernel_w, c.in_depth],
        &c.weights,
    ));
    out.push((format!("{name}.bias"), vec![c.out_depth], &c.bias));
}

fn push_dense<'a>(out: &mut Vec<(String, Vec<usize>, &'a Vec<f64>)>, name: &str, d: &'a DenseParams) {
    out.push((format!("{name}.weight"), vec![d.out_dim, d.in_dim], &d.weights));
    out.push((format!("{name}.bias"), vec![d.out_dim], &d.bias));
}

/// Backbone activations of one image.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    image_size: ImageSize,
    inputs: Vec<FeatureGrid>,
    stages: Vec<FeatureGrid>,
}

impl ImageFeatures {
    pub fn compute(params: &DNetParams, image: &FeatureGrid) -> Result<Self> {
        let topo = &params.topology;
        if image.channels() != topo.input_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, image has {}",
                topo.input_channels,
                image.channels()
            )));
        }
        let image_size = ImageSize::new(image.width(), image.height())?;
        let mut inputs = Vec::with_capacity(params.backbone.len());
        let mut stages = Vec::with_capacity(params.backbone.len());
        let mut cur = image.clone();
        for (conv, &down) in params.backbone.iter().zip(&topo.downsample_after) {
            let act = tanh_grid(&conv2d(conv, &cur)?);
            let next = if down { avg_pool2(&act)? } else { act.clone() };
            inputs.push(cur);
            stages.push(act);
            cur = next;
        }
        Ok(ImageFeatures {
            image_size,
            inputs,
            stages,
        })
    }

    pub fn image_size(&self) -> ImageSize {
        self.image_size
    }

    pub fn stage(&self, k: usize) -> &FeatureGrid {
        &self.stages[k]
    }

    /// Backpropagates gradients on the attended stage outputs to the
    /// backbone parameters and the input image.
    fn backward(
        &self,
        params: &DNetParams,
        stage_grads: &[Option<FeatureGrid>],
        grads: &mut DNetParams,
    ) -> FeatureGrid {
        let n = params.backbone.len();
        let mut carry: Option<FeatureGrid> = None;
        for k in (0..n).rev() {
            let act = &self.stages[k];
            let mut g_act = match carry.take() {
                Some(g) if params.topology.downsample_after[k] => {
                    avg_pool2_backward(act.height(), act.width(), &g)
                }
                Some(g) => g,
                None => FeatureGrid::zeros(act.height(), act.width(), act.channels()),
            };
            if let Some(g) = &stage_grads[k] {
                g_act.add_assign(g);
            }
            let g_pre = tanh_backward(act, &g_act);
            let (g_in, g_conv) = conv2d_backward(&params.backbone[k], &self.inputs[k], &g_pre);
            let dst = &mut grads.backbone[k];
            for (d, s) in dst.weights.iter_mut().zip(&g_conv.weights) {
                *d += s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&g_conv.bias) {
                *d += s;
            }
            carry = Some(g_in);
        }
        carry.expect("at least one stage")
    }
}

/// Per-stage geometry of one candidate line.
#[derive(Clone, Debug)]
struct StageGeometry {
    attention: AttentionGeometry,
    regions: PoolRegions,
}

/// Everything about a candidate line that does not depend on the image
/// content or the parameters. Build once per (line, image size).
#[derive(Clone, Debug)]
pub struct LineGeometry {
    line: Line,
    image_size: ImageSize,
    stages: Vec<StageGeometry>,
}

impl LineGeometry {
    /// Canonicalizes the endpoint order, then maps the line onto each attended grid.
    pub fn new(line: &Line, image_size: ImageSize, topology: &DNetTopology) -> Result<Self> {
        let line = Line::new(line.start, line.end, image_size)?.canonical(image_size);
        let grids = topology.stage_grids(image_size.height(), image_size.width());
        let mut stages = Vec::with_capacity(2);
        for &s in &topology.attended_stages {
            let (gh, gw) = grids[s];
            let gl = GridLine::from_image(&line, image_size, gw, gh)?;
            stages.push(StageGeometry {
                attention: AttentionGeometry::new(&gl, topology.sigma)?,
                regions: PoolRegions::new(&gl, topology.pool_threshold)?,
            });
        }
        Ok(LineGeometry {
            line,
            image_size,
            stages,
        })
    }

    /// The canonical image-space line.
    pub fn line(&self) -> &Line {
        &self.line
    }

    pub fn image_size(&self) -> ImageSize {
        self.image_size
    }
}

/// Forward activations of the heads for one line.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub prob: ProbPair,
    pub offset: LineOffset,
    pub logits: [f64; 2],
    /// `FC1` activation, the shared line feature.
    pub feature: Vec<f64>,
    pooled: Vec<f64>,
    attended: Vec<Option<AttentionCache>>,
}

pub fn head_forward(
    params: &DNetParams,
    features: &ImageFeatures,
    geom: &LineGeometry,
) -> Result<HeadOutput> {
    if geom.image_size != features.image_size {
        return Err(Error::Dimension(format!(
            "line geometry for {} applied to a {} image",
            geom.image_size, features.image_size
        )));
    }
    let topo = &params.topology;
    let mut pooled = Vec::with_capacity(topo.pooled_dim());
    let mut attended = Vec::with_capacity(2);
    for (i, &s) in topo.attended_stages.iter().enumerate() {
        let x = features.stage(s);
        let sg = &geom.stages[i];
        if topo.attention == AttentionMode::Off {
            pooled.extend(sg.regions.pool(x));
            attended.push(None);
        } else {
            let (y_att, cache) = attention_forward(x, &sg.attention, &params.attention[i])?;
            pooled.extend(sg.regions.pool(&y_att));
            attended.push(Some(cache));
        }
    }
    let feature: Vec<f64> = dense(&params.fc1, &pooled)?.into_iter().map(softplus).collect();
    let z = dense(&params.cls, &feature)?;
    let logits = [z[0], z[1]];
    let o = dense(&params.reg, &feature)?;
    Ok(HeadOutput {
        prob: softmax2(logits),
        offset: LineOffset([o[0], o[1], o[2], o[3]]),
        logits,
        feature,
        pooled,
        attended,
    })
}

/// Accumulates head/attention gradients into `grads` and stage gradients
/// into `stage_grads` for the given output gradients.
fn head_backward(
    params: &DNetParams,
    features: &ImageFeatures,
    geom: &LineGeometry,
    out: &HeadOutput,
    d_logits: [f64; 2],
    d_offset: [f64; 4],
    grads: &mut DNetParams,
    stage_grads: &mut [Option<FeatureGrid>],
) {
    let topo = &params.topology;
    let (gf_cls, g_cls) = dense_backward(&params.cls, &out.feature, &d_logits);
    let (gf_reg, g_reg) = dense_backward(&params.reg, &out.feature, &d_offset);
    let gh: Vec<f64> = out
        .feature
        .iter()
        .zip(gf_cls.iter().zip(&gf_reg))
        .map(|(f, (a, b))| (a + b) * softplus_grad(*f))
        .collect();
    let (g_pooled, g_fc1) = dense_backward(&params.fc1, &out.pooled, &gh);
    add_dense(&mut grads.cls, &g_cls);
    add_dense(&mut grads.reg, &g_reg);
    add_dense(&mut grads.fc1, &g_fc1);
    let mut off = 0;
    for (i, &s) in topo.attended_stages.iter().enumerate() {
        let x = features.stage(s);
        let width = 2 * x.channels();
        let sg = &geom.stages[i];
        let g_att = sg.regions.pool_backward(x.height(), x.width(), &g_pooled[off..off + width]);
        off += width;
        let g_x = match &out.attended[i] {
            None => g_att,
            Some(cache) => {
                let (g_x, g_params) =
                    attention_backward(&sg.attention, &params.attention[i], cache, &g_att);
                let dst = &mut grads.attention[i];
                for (d, s) in [&mut dst.f0, &mut dst.f1, &mut dst.f2]
                    .into_iter()
                    .zip([&g_params.f0, &g_params.f1, &g_params.f2])
                {
                    for (a, b) in d.weights.iter_mut().zip(&s.weights) {
                        *a += b;
                    }
                    for (a, b) in d.bias.iter_mut().zip(&s.bias) {
                        *a += b;
                    }
                }
                g_x
            }
        };
        match &mut stage_grads[s] {
            Some(g) => g.add_assign(&g_x),
            slot @ None => *slot = Some(g_x),
        }
    }
}

fn add_dense(dst: &mut DenseParams, src: &DenseParams) {
    for (a, b) in dst.weights.iter_mut().zip(&src.weights) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(&src.bias) {
        *a += b;
    }
}

/// `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Derivative of softplus written in terms of its output `f`: `1 - e^-f`.
fn softplus_grad(f: f64) -> f64 {
    -(-f).exp_m1()
}

/// Classification probability and regression offset for a candidate line.
///
/// The line is declared semantic when `p > 0.5`.
pub fn dnet_forward(
    image: &FeatureGrid,
    line: &Line,
    params: &DNetParams,
) -> Result<(ProbPair, LineOffset)> {
    let feats = ImageFeatures::compute(params, image)?;
    let geom = LineGeometry::new(line, feats.image_size(), &params.topology)?;
    let out = head_forward(params, &feats, &geom)?;
    Ok((out.prob, out.offset))
}

/// The `FC1` activation for a line: the shared trunk with the heads removed.
pub fn line_feature(image: &FeatureGrid, line: &Line, params: &DNetParams) -> Result<Vec<f64>> {
    let feats = ImageFeatures::compute(params, image)?;
    let geom = LineGeometry::new(line, feats.image_size(), &params.topology)?;
    Ok(head_forward(params, &feats, &geom)?.feature)
}

/// Moves both endpoints by `offset` and snaps them back onto the boundary.
pub fn regress_line(line: &Line, offset: &LineOffset, size: ImageSize) -> Result<Line> {
    let d = offset.0;
    let s = line.start.add(Point::new(d[0], d[1]));
    let e = line.end.add(Point::new(d[2], d[3]));
    Line::projected(s, e, size)
}

/// Training target of a candidate line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateLabel {
    pub prob: ProbPair,
    pub offset: LineOffset,
}

impl CandidateLabel {
    pub fn is_positive(&self) -> bool {
        self.prob.is_positive()
    }
}

/// Cross-entropy plus `lambda` times the smooth L1 offset error; the
/// regression term only applies to positive labels.
pub fn dnet_loss(pred: (ProbPair, LineOffset), label: (ProbPair, LineOffset), lambda: f64) -> f64 {
    let ce = cross_entropy(pred.0, label.0);
    if label.0.is_positive() {
        ce + lambda * smooth_l1(&pred.1 .0, &label.1 .0)
    } else {
        ce
    }
}

/// Summed classification and weighted regression terms of the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    /// Already multiplied by `lambda`.
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }

    fn add(&mut self, out: &HeadOutput, label: &CandidateLabel, lambda: f64) {
        self.cls += cross_entropy(out.prob, label.prob);
        if label.is_positive() {
            self.reg += lambda * smooth_l1(&out.offset.0, &label.offset.0);
        }
    }
}

/// Loss over several candidate lines of one image, without gradients.
pub fn image_loss(
    params: &DNetParams,
    image: &FeatureGrid,
    samples: &[(&LineGeometry, CandidateLabel)],
    lambda: f64,
) -> Result<LossParts> {
    let feats = ImageFeatures::compute(params, image)?;
    let mut parts = LossParts::default();
    for (geom, label) in samples {
        parts.add(&head_forward(params, &feats, geom)?, label, lambda);
    }
    Ok(parts)
}

/// Loss and gradients over several candidate lines of one image, sharing a
/// single backbone pass. Returns the summed loss, parameter gradients and
/// the gradient with respect to the image.
pub fn image_loss_and_grad(
    params: &DNetParams,
    image: &FeatureGrid,
    samples: &[(&LineGeometry, CandidateLabel)],
    lambda: f64,
) -> Result<(LossParts, DNetParams, FeatureGrid)> {
    let feats = ImageFeatures::compute(params, image)?;
    let mut grads = params.zeros_like();
    let mut stage_grads: Vec<Option<FeatureGrid>> = vec![None; params.backbone.len()];
    let mut parts = LossParts::default();
    for (geom, label) in samples {
        let out = head_forward(params, &feats, geom)?;
        parts.add(&out, label, lambda);
        let d_logits = cross_entropy_logit_grad(out.logits, label.prob);
        let d_offset = if label.is_positive() {
            let g = smooth_l1_grad(&out.offset.0, &label.offset.0);
            [lambda * g[0], lambda * g[1], lambda * g[2], lambda * g[3]]
        } else {
            [0.0; 4]
        };
        head_backward(params, &feats, geom, &out, d_logits, d_offset, &mut grads, &mut stage_grads);
    }
    let g_image = feats.backward(params, &stage_grads, &mut grads);
    Ok((parts, grads, g_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_topology() -> DNetTopology {
        DNetTopology {
            input_channels: 4,
            ..DNetTopology::default()
        }
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
        FeatureGrid::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_topology_shapes() {
        let t = DNetTopology::default();
        t.validate().unwrap();
        assert_eq!(t.stage_grids(64, 64), vec![(64, 64), (32, 32), (16, 16), (16, 16)]);
        assert_eq!(t.pooled_dim(), 128);
        let bad = DNetTopology {
            downsample_after: vec![true],
            ..DNetTopology::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_heads_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = DNetParams::random(DNetTopology::default(), &mut rng).unwrap();
        p.zero_heads();
        let img = random_image(&mut rng, 32, 32, 3);
        let size = ImageSize::new(32, 32).unwrap();
        for line in crate::geometry::generate_candidates(size, 8.0).unwrap() {
            match dnet_forward(&img, &line, &p) {
                Ok((prob, off)) => {
                    assert_eq!(prob.p, 0.5);
                    assert_eq!(off, LineOffset::zero());
                }
                Err(Error::DegenerateRegion(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn endpoint_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DNetParams::random(DNetTopology::default(), &mut rng).unwrap();
        let img = random_image(&mut rng, 32, 32, 3);
        let size = ImageSize::new(32, 32).unwrap();
        let l = Line::from_coords(0.0, 5.0, 32.0, 20.0, size).unwrap();
        let a = dnet_forward(&img, &l, &p).unwrap();
        let b = dnet_forward(&img, &l.reversed(), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(line_feature(&img, &l, &p).unwrap(), line_feature(&img, &l.reversed(), &p).unwrap());
    }

    #[test]
    fn line_feature_matches_forward_intermediate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DNetParams::random(DNetTopology::default(), &mut rng).unwrap();
        let img = random_image(&mut rng, 32, 32, 3);
        let size = ImageSize::new(32, 32).unwrap();
        let l = Line::from_coords(10.0, 0.0, 0.0, 30.0, size).unwrap();
        let f = line_feature(&img, &l, &p).unwrap();
        assert_eq!(f.len(), p.topology.fc1_width);
        assert_eq!(f, line_feature(&img, &l, &p).unwrap());
        // recompute the heads from the captured feature
        let feats = ImageFeatures::compute(&p, &img).unwrap();
        let geom = LineGeometry::new(&l, size, &p.topology).unwrap();
        let out = head_forward(&p, &feats, &geom).unwrap();
        assert_eq!(out.feature, f);
        let z = dense(&p.cls, &f).unwrap();
        assert_eq!(softmax2([z[0], z[1]]), dnet_forward(&img, &l, &p).unwrap().0);
    }

    #[test]
    fn regress_line_rules() {
        let size = ImageSize::new(100, 100).unwrap();
        let l = Line::from_coords(30.0, 0.0, 0.0, 70.0, size).unwrap();
        assert_eq!(regress_line(&l, &LineOffset::zero(), size).unwrap(), l);
        // start pushed to (32, 3) inside the rectangle snaps back to (32, 0)
        let r = regress_line(&l, &LineOffset([2.0, 3.0, 0.0, 0.0]), size).unwrap();
        assert_eq!(r.start, Point::new(32.0, 0.0));
        // an endpoint pushed outside clamps onto the rectangle
        let r = regress_line(&l, &LineOffset([0.0, -5.0, -4.0, 0.0]), size).unwrap();
        assert_eq!(r.start, Point::new(30.0, 0.0));
        assert_eq!(r.end, Point::new(0.0, 70.0));
        // both endpoints pushed onto the top edge
        let bad = LineOffset([0.0, 0.0, 10.0, -70.0]);
        assert!(matches!(regress_line(&l, &bad, size), Err(Error::DegenerateLine(_))));
    }

    #[test]
    fn regress_line_property_sweep() {
        let size = ImageSize::new(64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut lines, mut valid) = (0, 0);
        while lines < 1000 {
            let a = rng.gen_range(0.0..size.perimeter());
            let b = rng.gen_range(0.0..size.perimeter());
            let Ok(l) = Line::new(size.point_at_arc(a), size.point_at_arc(b), size) else {
                continue;
            };
            lines += 1;
            let off = LineOffset([
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ]);
            if let Ok(r) = regress_line(&l, &off, size) {
                assert!(size.boundary_distance(r.start) < 1e-9);
                assert!(size.boundary_distance(r.end) < 1e-9);
                assert!(Line::new(r.start, r.end, size).is_ok());
                valid += 1;
            }
        }
        assert!(valid > 900);
    }

    #[test]
    fn loss_rules() {
        let pos = ProbPair::positive();
        let off = LineOffset([1.0, -2.0, 0.5, 0.0]);
        assert!(dnet_loss((pos, off), (pos, off), 1.0).abs() < 1e-11);
        let pred = (ProbPair { p: 0.3, q: 0.7 }, LineOffset([9.0, 9.0, 9.0, 9.0]));
        let neg = ProbPair::negative();
        assert_eq!(dnet_loss(pred, (neg, off), 1.0), cross_entropy(pred.0, neg));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pp = rng.gen_range(0.01..0.99);
            let pred = (
                ProbPair { p: pp, q: 1.0 - pp },
                LineOffset([0.0; 4].map(|_: f64| rng.gen_range(-3.0..3.0))),
            );
            let tgt = LineOffset([0.0; 4].map(|_: f64| rng.gen_range(-3.0..3.0)));
            let lambda = rng.gen_range(0.1..2.0);
            let expected = cross_entropy(pred.0, pos) + lambda * smooth_l1(&pred.1 .0, &tgt.0);
            assert!((dnet_loss(pred, (pos, tgt), lambda) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DNetParams::random(small_topology(), &mut rng).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.set_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn image_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DNetParams::random(DNetTopology::default(), &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 4);
        let size = ImageSize::new(16, 16).unwrap();
        let l = Line::from_coords(0.0, 5.0, 16.0, 11.0, size).unwrap();
        assert!(matches!(dnet_forward(&img, &l, &p), Err(Error::Dimension(_))));
    }

    fn sample_loss(
        p: &DNetParams,
        img: &FeatureGrid,
        geom: &LineGeometry,
        label: CandidateLabel,
    ) -> f64 {
        let feats = ImageFeatures::compute(p, img).unwrap();
        let out = head_forward(p, &feats, geom).unwrap();
        dnet_loss((out.prob, out.offset), (label.prob, label.offset), 1.0)
    }

    /// Central differences on sampled coordinates: 32 per parameter tensor
    /// plus 64 input values, every seed. Parameters use eps = 1e-4 because
    /// softplus curvature makes the 1e-3 truncation error too large for
    /// small FC1 gradients; inputs keep 1e-3.
    #[test]
    fn full_composition_gradients() {
        use crate::geometry::tests::random_line;
        use crate::neural::grad_check_coords;
        let size = ImageSize::new(16, 16).unwrap();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mode = [AttentionMode::Mirror, AttentionMode::NoFlip, AttentionMode::Off][seed as usize % 3];
            let topo = DNetTopology {
                attention: mode,
                ..small_topology()
            };
            let p = DNetParams::random(topo, &mut rng).unwrap();
            let img = random_image(&mut rng, 16, 16, 4);
            let geom = loop {
                if let Ok(g) = LineGeometry::new(&random_line(&mut rng, size, 0.2), size, &p.topology) {
                    break g;
                }
            };
            let label = CandidateLabel {
                prob: if seed % 2 == 0 { ProbPair::positive() } else { ProbPair::negative() },
                offset: LineOffset([0.0; 4].map(|_: f64| rng.gen_range(-3.0..3.0))),
            };
            let (loss, grads, g_img) = image_loss_and_grad(&p, &img, &[(&geom, label)], 1.0).unwrap();
            assert!((loss.total() - sample_loss(&p, &img, &geom, label)).abs() < 1e-12);
            assert_eq!(loss, image_loss(&p, &img, &[(&geom, label)], 1.0).unwrap());

            let mut coords = Vec::new();
            let mut off = 0;
            for (_, _, t) in p.tensors() {
                for _ in 0..32.min(t.len()) {
                    coords.push(off + rng.gen_range(0..t.len()));
                }
                off += t.len();
            }
            let report = grad_check_coords(
                |v| {
                    let mut q = p.clone();
                    q.set_flat(v);
                    sample_loss(&q, &img, &geom, label)
                },
                &p.to_flat(),
                &grads.to_flat(),
                1e-4,
                &coords,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed} params: {report:?}");

            let coords: Vec<usize> = (0..64).map(|_| rng.gen_range(0..img.data().len())).collect();
            let report = grad_check_coords(
                |v| sample_loss(&p, &FeatureGrid::from_vec(16, 16, 4, v.to_vec()).unwrap(), &geom, label),
                img.data(),
                g_img.data(),
                1e-3,
                &coords,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed} input: {report:?}");
        }
    }

    #[test]
    fn shared_backbone_sums_per_line_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = DNetParams::random(small_topology(), &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16, 4);
        let size = ImageSize::new(16, 16).unwrap();
        let g1 = LineGeometry::new(&Line::from_coords(0.0, 4.0, 16.0, 9.0, size).unwrap(), size, &p.topology).unwrap();
        let g2 = LineGeometry::new(&Line::from_coords(7.0, 0.0, 10.0, 16.0, size).unwrap(), size, &p.topology).unwrap();
        let lab = CandidateLabel { prob: ProbPair::positive(), offset: LineOffset([1.0, 0.5, -1.0, 2.0]) };
        let (l, g, gi) = image_loss_and_grad(&p, &img, &[(&g1, lab), (&g2, lab)], 1.0).unwrap();
        let (la, ga, gia) = image_loss_and_grad(&p, &img, &[(&g1, lab)], 1.0).unwrap();
        let (lb, gb, gib) = image_loss_and_grad(&p, &img, &[(&g2, lab)], 1.0).unwrap();
        assert!((l.total() - la.total() - lb.total()).abs() < 1e-12);
        for ((x, a), b) in g.to_flat().iter().zip(ga.to_flat()).zip(gb.to_flat()) {
            assert!((x - a - b).abs() < 1e-10);
        }
        for ((x, a), b) in gi.data().iter().zip(gia.data()).zip(gib.data()) {
            assert!((x - a - b).abs() < 1e-10);
        }
    }

}
