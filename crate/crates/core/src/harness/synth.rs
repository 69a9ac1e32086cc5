//! Synthetic training scenes with known semantic lines.
//!
//! Heterogeneous scenes split the image into two flat regions of different
//! color along the primary line; up to two weaker secondary boundaries
//! subdivide one side without shifting that side's mean. Symmetric scenes
//! mirror a smooth texture across a single line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featgrid::{pixel_center, FeatureGrid};
use crate::geometry::{miou, split_regions, ImageSize, Line};

/// Secondary boundary strength relative to the primary contrast.
pub const SECONDARY_RATIO: f64 = 0.3;
/// Each side of a generated line covers at least this share of the image.
pub const MIN_SIDE_FRACTION: f64 = 0.15;
/// Generated lines overlap each other less than this mIoU.
pub const MAX_GT_OVERLAP: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneMode {
    Heterogeneous,
    Symmetric,
}

impl SceneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneMode::Heterogeneous => "heterogeneous",
            SceneMode::Symmetric => "symmetric",
        }
    }
}

impl std::str::FromStr for SceneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heterogeneous" => Ok(SceneMode::Heterogeneous),
            "symmetric" => Ok(SceneMode::Symmetric),
            other => Err(Error::Config(format!("unknown scene mode {other:?}"))),
        }
    }
}

/// An annotated line; exactly one per scene is primary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtLine {
    pub line: Line,
    pub primary: bool,
}

/// An image with its ground-truth lines. `mode` is known only for generated scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: FeatureGrid,
    pub lines: Vec<GtLine>,
    pub mode: Option<SceneMode>,
}

impl Scene {
    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.image.width(), self.image.height()).expect("scene images are at least 2x2")
    }

    pub fn primary(&self) -> Option<&Line> {
        self.lines.iter().find(|g| g.primary).map(|g| &g.line)
    }

    pub fn gt_lines(&self) -> Vec<Line> {
        self.lines.iter().map(|g| g.line).collect()
    }
}

/// Generation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: ImageSize,
    pub mode: SceneMode,
    pub contrast: f64,
    pub noise: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) || !(self.contrast > 2.0 * self.noise) {
            return Err(Error::Config(format!(
                "contrast {} must exceed twice the noise {}",
                self.contrast, self.noise
            )));
        }
        // flat colors plus two secondary offsets plus noise must fit in [0, 1]
        if self.margin() > 0.5 {
            return Err(Error::Config(format!(
                "contrast {} with noise {} cannot fit intensities in [0, 1]",
                self.contrast, self.noise
            )));
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        match self.mode {
            SceneMode::Heterogeneous => {
                self.contrast / 2.0 + 2.0 * SECONDARY_RATIO * self.contrast + self.noise
            }
            SceneMode::Symmetric => self.contrast / 2.0 + self.noise,
        }
    }
}

/// `count` scenes, deterministic in `seed`. Scene `k` is named `scene{k:05}`.
pub fn gen_synthetic(
    count: usize,
    size: ImageSize,
    mode: SceneMode,
    contrast: f64,
    noise: f64,
    seed: u64,
) -> Result<Vec<Scene>> {
    let spec = SynthSpec {
        size,
        mode,
        contrast,
        noise,
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let (image, lines) = match mode {
                SceneMode::Heterogeneous => heterogeneous(&mut rng, &spec)?,
                SceneMode::Symmetric => symmetric(&mut rng, &spec)?,
            };
            Ok(Scene {
                id: format!("scene{k:05}"),
                image,
                lines,
                mode: Some(mode),
            })
        })
        .collect()
}

/// A random boundary-to-boundary line with at least `min_frac` of the area on each side.
pub fn sample_line(rng: &mut impl Rng, size: ImageSize, min_frac: f64) -> Line {
    loop {
        let a = rng.gen_range(0.0..size.perimeter());
        let b = rng.gen_range(0.0..size.perimeter());
        let Ok(line) = Line::new(size.point_at_arc(a), size.point_at_arc(b), size) else {
            continue;
        };
        let Ok((r1, r2)) = split_regions(&line, size) else {
            continue;
        };
        if r1.area().min(r2.area()) >= min_frac * size.area() {
            return line;
        }
    }
}

/// Pixel side of a line: `false` for negative signed distance.
fn side(line: &Line, r: usize, c: usize) -> bool {
    line.signed_distance(pixel_center(r, c)) >= 0.0
}

fn heterogeneous(rng: &mut impl Rng, spec: &SynthSpec) -> Result<(FeatureGrid, Vec<GtLine>)> {
    let size = spec.size;
    let (h, w) = (size.height(), size.width());
    let primary = sample_line(rng, size, MIN_SIDE_FRACTION);
    let margin = spec.margin();
    let mut base = FeatureGrid::zeros(h, w, 3);
    for ch in 0..3 {
        let mid = rng.gen_range(margin..=1.0 - margin);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let half = sign * spec.contrast / 2.0;
        for r in 0..h {
            for c in 0..w {
                let i = base.index(r, c, ch);
                base.data_mut()[i] = if side(&primary, r, c) { mid + half } else { mid - half };
            }
        }
    }
    let mut lines = vec![GtLine {
        line: primary,
        primary: true,
    }];
    let extra = rng.gen_range(0..=2);
    for _ in 0..extra {
        // a bounded number of attempts keeps generation finite on tiny images
        for _ in 0..200 {
            let cand = sample_line(rng, size, MIN_SIDE_FRACTION);
            let distinct = lines
                .iter()
                .all(|g| miou(&cand, &g.line, size).map_or(false, |m| m < MAX_GT_OVERLAP));
            if !distinct {
                continue;
            }
            let host = rng.gen_bool(0.5);
            let (mut n1, mut n2) = (0usize, 0usize);
            for r in 0..h {
                for c in 0..w {
                    if side(&primary, r, c) == host {
                        if side(&cand, r, c) {
                            n2 += 1;
                        } else {
                            n1 += 1;
                        }
                    }
                }
            }
            let min_count = (0.1 * size.area()) as usize;
            if n1 < min_count || n2 < min_count {
                continue;
            }
            // offsets weighted by the opposite part's count sum to zero on the host side
            let n = (n1 + n2) as f64;
            for ch in 0..3 {
                let delta = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * SECONDARY_RATIO * spec.contrast;
                let up = delta * n2 as f64 / n;
                let down = -delta * n1 as f64 / n;
                for r in 0..h {
                    for c in 0..w {
                        if side(&primary, r, c) == host {
                            let i = base.index(r, c, ch);
                            base.data_mut()[i] += if side(&cand, r, c) { down } else { up };
                        }
                    }
                }
            }
            lines.push(GtLine {
                line: cand,
                primary: false,
            });
            break;
        }
    }
    Ok((add_noise(rng, base, spec.noise), lines))
}

fn symmetric(rng: &mut impl Rng, spec: &SynthSpec) -> Result<(FeatureGrid, Vec<GtLine>)> {
    let size = spec.size;
    let line = sample_line(rng, size, MIN_SIDE_FRACTION);
    // three plane waves per channel, wavelengths 6 to 20 pixels
    let mut waves = Vec::new();
    for _ in 0..3 {
        let mid = rng.gen_range(spec.margin()..=1.0 - spec.margin());
        let comps: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / rng.gen_range(6.0..20.0);
                (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), spec.contrast / 6.0)
            })
            .collect();
        waves.push((mid, comps));
    }
    let image = FeatureGrid::from_fn(size.height(), size.width(), 3, |r, c, ch| {
        let p = pixel_center(r, c);
        let q = if side(&line, r, c) { line.reflect(p) } else { p };
        let (mid, comps) = &waves[ch];
        mid + comps.iter().map(|(kx, ky, ph, a)| a * (kx * q.x + ky * q.y + ph).sin()).sum::<f64>()
    });
    Ok((
        add_noise(rng, image, spec.noise),
        vec![GtLine {
            line,
            primary: true,
        }],
    ))
}

fn add_noise(rng: &mut impl Rng, grid: FeatureGrid, noise: f64) -> FeatureGrid {
    if noise == 0.0 {
        return grid;
    }
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let data = grid
        .into_data()
        .into_iter()
        .map(|v| (v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))
        .collect();
    FeatureGrid::from_vec(h, w, c, data).expect("same shape")
}

/// Mean over channels of the absolute difference between the two sides'
/// mean intensities, sides split by pixel-center signed distance.
pub fn region_contrast(image: &FeatureGrid, line: &Line) -> f64 {
    let c = image.channels();
    let mut sums = vec![[0.0f64; 2]; c];
    let mut counts = [0usize; 2];
    for r in 0..image.height() {
        for col in 0..image.width() {
            let s = side(line, r, col) as usize;
            counts[s] += 1;
            for (ch, acc) in sums.iter_mut().enumerate() {
                acc[s] += image.get(r, col, ch);
            }
        }
    }
    sums.iter()
        .map(|s| (s[0] / counts[0] as f64 - s[1] / counts[1] as f64).abs())
        .sum::<f64>()
        / c as f64
}
