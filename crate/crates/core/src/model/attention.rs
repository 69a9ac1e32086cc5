use rand::Rng;

use crate::error::{Error, Result};
use crate::featgrid::{concat_channels, gaussian_weights, scale_pixels, FeatureGrid, GridLine, MirrorSampler};
use crate::neural::{conv2d, conv2d_backward, sigmoid, ConvParams};

/// How the attention block builds its mask input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// `f0` sees the weighted map concatenated with its reflection.
    Mirror,
    /// `f0` sees only the weighted map.
    NoFlip,
    /// No attention: pooling reads the backbone features directly.
    Off,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Mirror => "mirror",
            AttentionMode::NoFlip => "no-flip",
            AttentionMode::Off => "off",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirror" => Ok(AttentionMode::Mirror),
            "no-flip" | "noflip" => Ok(AttentionMode::NoFlip),
            "off" | "none" => Ok(AttentionMode::Off),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Filters of one mirror attention block.
///
/// `f0` is `n x n` over the `2C` channels of `[Y, Y~]` (or `C` without the
/// flip); `f1` and `f2` are single `(2n+1) x (2n+1)` filters.
#[derive(Clone, Debug, PartialEq)]
pub struct MirrorAttentionParams {
    pub f0: ConvParams,
    pub f1: ConvParams,
    pub f2: ConvParams,
    pub sigma: f64,
    pub mirror: bool,
}

impl MirrorAttentionParams {
    pub fn random(rng: &mut impl Rng, channels: usize, n: usize, sigma: f64, mirror: bool) -> Self {
        let depth = if mirror { 2 * channels } else { channels };
        MirrorAttentionParams {
            f0: ConvParams::random(rng, n, depth, 1),
            f1: ConvParams::random(rng, 2 * n + 1, 1, 1),
            f2: ConvParams::random(rng, 2 * n + 1, 1, 1),
            sigma,
            mirror,
        }
    }

    pub fn zeros(channels: usize, n: usize, sigma: f64, mirror: bool) -> Self {
        let depth = if mirror { 2 * channels } else { channels };
        MirrorAttentionParams {
            f0: ConvParams::zeros(n, depth, 1),
            f1: ConvParams::zeros(2 * n + 1, 1, 1),
            f2: ConvParams::zeros(2 * n + 1, 1, 1),
            sigma,
            mirror,
        }
    }

    /// Channel count of the host feature map.
    pub fn channels(&self) -> usize {
        if self.mirror {
            self.f0.in_depth / 2
        } else {
            self.f0.in_depth
        }
    }

    pub fn zeros_like(&self) -> Self {
        MirrorAttentionParams {
            f0: self.f0.zeros_like(),
            f1: self.f1.zeros_like(),
            f2: self.f2.zeros_like(),
            sigma: self.sigma,
            mirror: self.mirror,
        }
    }
}

/// Line-dependent, parameter-free operators of an attention block: the
/// Gaussian weights and the reflection sampler. Reusable across images.
#[derive(Clone, Debug)]
pub struct AttentionGeometry {
    line: GridLine,
    weights: Vec<f64>,
    sampler: MirrorSampler,
}

impl AttentionGeometry {
    pub fn new(line: &GridLine, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(AttentionGeometry {
            line: *line,
            weights: gaussian_weights(line, sigma),
            sampler: MirrorSampler::new(line),
        })
    }

    pub fn line(&self) -> &GridLine {
        &self.line
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    y: FeatureGrid,
    z: FeatureGrid,
    a0: FeatureGrid,
    a1: FeatureGrid,
    mask: FeatureGrid,
}

impl AttentionCache {
    /// The attention mask `A`, one channel.
    pub fn mask(&self) -> &FeatureGrid {
        &self.mask
    }
}

fn check_depth(x: &FeatureGrid, params: &MirrorAttentionParams) -> Result<()> {
    if x.channels() != params.channels() {
        return Err(Error::Dimension(format!(
            "attention built for {} channels, grid has {}",
            params.channels(),
            x.channels()
        )));
    }
    Ok(())
}

pub fn attention_forward(
    x: &FeatureGrid,
    geom: &AttentionGeometry,
    params: &MirrorAttentionParams,
) -> Result<(FeatureGrid, AttentionCache)> {
    check_depth(x, params)?;
    geom.line.check_grid(x)?;
    let y = scale_pixels(x, &geom.weights);
    let z = if params.mirror {
        concat_channels(&y, &geom.sampler.apply(&y))?
    } else {
        y.clone()
    };
    let a0 = conv2d(&params.f0, &z)?;
    let a1 = conv2d(&params.f1, &a0)?;
    let a2 = conv2d(&params.f2, &a1)?;
    let mask = a2.map(sigmoid);
    let c = y.channels();
    let mut out = y.clone();
    for (p, &a) in mask.data().iter().enumerate() {
        for v in &mut out.data_mut()[p * c..(p + 1) * c] {
            *v *= 1.0 + a;
        }
    }
    Ok((out, AttentionCache { y, z, a0, a1, mask }))
}

/// Returns `(dL/dx, dL/dparams)` given `dL/dY_att`.
pub fn attention_backward(
    geom: &AttentionGeometry,
    params: &MirrorAttentionParams,
    cache: &AttentionCache,
    grad_out: &FeatureGrid,
) -> (FeatureGrid, MirrorAttentionParams) {
    let c = cache.y.channels();
    let npix = cache.y.pixels();
    let mut gy = grad_out.clone();
    let mut ga2 = FeatureGrid::zeros(cache.y.height(), cache.y.width(), 1);
    for p in 0..npix {
        let a = cache.mask.data()[p];
        let g = &grad_out.data()[p * c..(p + 1) * c];
        let yv = cache.y.pixel(p);
        let ga: f64 = g.iter().zip(yv).map(|(g, y)| g * y).sum();
        ga2.data_mut()[p] = ga * a * (1.0 - a);
        for v in &mut gy.data_mut()[p * c..(p + 1) * c] {
            *v *= 1.0 + a;
        }
    }
    let (ga1, g_f2) = conv2d_backward(&params.f2, &cache.a1, &ga2);
    let (ga0, g_f1) = conv2d_backward(&params.f1, &cache.a0, &ga1);
    let (gz, g_f0) = conv2d_backward(&params.f0, &cache.z, &ga0);
    if params.mirror {
        gy.add_assign(&gz.slice_channels(0, c));
        gy.add_assign(&geom.sampler.apply_adjoint(&gz.slice_channels(c, 2 * c)));
    } else {
        gy.add_assign(&gz);
    }
    let gx = scale_pixels(&gy, &geom.weights);
    (
        gx,
        MirrorAttentionParams {
            f0: g_f0,
            f1: g_f1,
            f2: g_f2,
            sigma: params.sigma,
            mirror: params.mirror,
        },
    )
}

/// Mirror attention on `x` for a candidate line: Gaussian weighting, reflection,
/// mask convolutions, and the residual reweighting `(1 + A) * Y`.
pub fn mirror_attention(
    x: &FeatureGrid,
    line: &GridLine,
    params: &MirrorAttentionParams,
) -> Result<FeatureGrid> {
    let geom = AttentionGeometry::new(line, params.sigma)?;
    attention_forward(x, &geom, params).map(|(y, _)| y)
}
