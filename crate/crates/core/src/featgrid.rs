//! Feature grids and the line-conditioned transforms that feed mirror attention.
//!
//! A [`FeatureGrid`] is an `H x W x C` array in row-major `(row, column,
//! channel)` order. Pixel `(r, c)` has its center at `(c + 0.5, r + 0.5)` in
//! the grid's continuous coordinate frame `[0, W] x [0, H]`. Lines are carried
//! into that frame as [`GridLine`]s.
//!
//! Every transform here is linear in the grid values for a fixed line, so
//! each one has an exact adjoint that the backward passes reuse.

use crate::error::{Error, Result};
use crate::geometry::{ImageSize, Line, Point};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid shape");
        FeatureGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "grid shape {height}x{width}x{channels} has an empty axis"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite grid value at flat index {i}")));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = FeatureGrid::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    let i = g.index(r, c, ch);
                    g.data[i] = f(r, c, ch);
                }
            }
        }
        g
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.index(r, c, ch)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Values of pixel `p` (flat pixel index) across channels.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureGrid {
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &FeatureGrid, beta: f64) -> Result<FeatureGrid> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("grid shapes differ".into()));
        }
        Ok(FeatureGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &FeatureGrid) {
        assert!(self.same_shape(other), "grid shapes differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Each channel shifted to zero mean and scaled to unit variance.
    ///
    /// A flat channel is only centered.
    pub fn standardize_channels(&self) -> FeatureGrid {
        let n = self.pixels() as f64;
        let c = self.channels;
        let mut data = self.data.clone();
        for ch in 0..c {
            let mean = self.data.iter().skip(ch).step_by(c).sum::<f64>() / n;
            let var = self.data.iter().skip(ch).step_by(c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            for v in data.iter_mut().skip(ch).step_by(c) {
                *v = (*v - mean) * scale;
            }
        }
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: c,
            data,
        }
    }

    /// Channel range `[from, to)` as a new grid.
    pub fn slice_channels(&self, from: usize, to: usize) -> FeatureGrid {
        assert!(from < to && to <= self.channels);
        let c = to - from;
        let mut data = Vec::with_capacity(self.pixels() * c);
        for p in 0..self.pixels() {
            data.extend_from_slice(&self.pixel(p)[from..to]);
        }
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: c,
            data,
        }
    }
}

#[inline]
pub fn pixel_center(r: usize, c: usize) -> Point {
    Point::new(c as f64 + 0.5, r as f64 + 0.5)
}

/// A line in a feature grid's coordinate frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridLine {
    line: Line,
    size: ImageSize,
}

impl GridLine {
    pub fn new(line: Line, size: ImageSize) -> Result<Self> {
        let line = Line::new(line.start, line.end, size)?;
        Ok(GridLine { line, size })
    }

    /// Rescales an image-space line onto a `grid_w x grid_h` grid, then
    /// re-projects its endpoints onto the grid boundary.
    pub fn from_image(line: &Line, image: ImageSize, grid_w: usize, grid_h: usize) -> Result<Self> {
        let size = ImageSize::new(grid_w, grid_h)?;
        let (s, e) = line.scaled(size.w() / image.w(), size.h() / image.h());
        let line = Line::projected(s, e, size)?;
        Ok(GridLine { line, size })
    }

    pub fn line(&self) -> &Line {
        &self.line
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn canonical(&self) -> GridLine {
        GridLine {
            line: self.line.canonical(self.size),
            size: self.size,
        }
    }

    pub(crate) fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.width() != self.size.width() || grid.height() != self.size.height() {
            return Err(Error::Dimension(format!(
                "line frame {} does not match grid {}x{}",
                self.size,
                grid.width(),
                grid.height()
            )));
        }
        Ok(())
    }
}

/// Per-pixel Gaussian weights `exp(-d^2 / (2 sigma^2))` of the distance to the line.
pub fn gaussian_weights(line: &GridLine, sigma: f64) -> Vec<f64> {
    let (h, w) = (line.size.height(), line.size.width());
    let (n, c0) = line.line.normal_form();
    let denom = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let d = n.dot(pixel_center(r, c)) + c0;
            out.push((-(d * d) / denom).exp());
        }
    }
    out
}

/// Scales every pixel by a per-pixel factor (shared across channels).
pub(crate) fn scale_pixels(x: &FeatureGrid, weights: &[f64]) -> FeatureGrid {
    let mut out = x.clone();
    let c = x.channels();
    for (p, &wt) in weights.iter().enumerate() {
        for v in &mut out.data[p * c..(p + 1) * c] {
            *v *= wt;
        }
    }
    out
}

/// Weights every feature by a Gaussian of its pixel's distance to the line.
pub fn gaussian_weight(x: &FeatureGrid, line: &GridLine, sigma: f64) -> Result<FeatureGrid> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    line.check_grid(x)?;
    Ok(scale_pixels(x, &gaussian_weights(line, sigma)))
}

/// Sparse bilinear resampling operator for the reflection across a line.
///
/// Row `p` holds the taps that produce output pixel `p` from the input grid.
/// Reflections that leave the grid rectangle produce no taps (value zero);
/// taps that fall outside the pixel lattice read as zero.
#[derive(Clone, Debug)]
pub struct MirrorSampler {
    height: usize,
    width: usize,
    row_start: Vec<usize>,
    taps: Vec<(usize, f64)>,
}

impl MirrorSampler {
    pub fn new(line: &GridLine) -> Self {
        let (h, w) = (line.size.height(), line.size.width());
        let (wf, hf) = (w as f64, h as f64);
        let mut row_start = Vec::with_capacity(h * w + 1);
        let mut taps = Vec::with_capacity(h * w * 4);
        for r in 0..h {
            for c in 0..w {
                row_start.push(taps.len());
                let q = line.line.reflect(pixel_center(r, c));
                if !(q.x >= 0.0 && q.x <= wf && q.y >= 0.0 && q.y <= hf) {
                    continue;
                }
                let u = q.x - 0.5;
                let v = q.y - 0.5;
                let c0 = u.floor();
                let r0 = v.floor();
                let fx = u - c0;
                let fy = v - r0;
                let (c0, r0) = (c0 as isize, r0 as isize);
                for (dr, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    for (dc, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let wt = wy * wx;
                        let (rr, cc) = (r0 + dr, c0 + dc);
                        if wt == 0.0 || rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        taps.push((rr as usize * w + cc as usize, wt));
                    }
                }
            }
        }
        row_start.push(taps.len());
        MirrorSampler {
            height: h,
            width: w,
            row_start,
            taps,
        }
    }

    fn check(&self, y: &FeatureGrid) {
        assert!(
            y.height() == self.height && y.width() == self.width,
            "sampler built for a different grid"
        );
    }

    pub fn apply(&self, y: &FeatureGrid) -> FeatureGrid {
        self.check(y);
        let ch = y.channels();
        let mut out = FeatureGrid::zeros(self.height, self.width, ch);
        for p in 0..self.height * self.width {
            let dst = &mut out.data[p * ch..(p + 1) * ch];
            for &(q, wt) in &self.taps[self.row_start[p]..self.row_start[p + 1]] {
                let src = &y.data[q * ch..(q + 1) * ch];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
        out
    }

    /// Transpose of [`MirrorSampler::apply`].
    pub fn apply_adjoint(&self, g: &FeatureGrid) -> FeatureGrid {
        self.check(g);
        let ch = g.channels();
        let mut out = FeatureGrid::zeros(self.height, self.width, ch);
        for p in 0..self.height * self.width {
            for &(q, wt) in &self.taps[self.row_start[p]..self.row_start[p + 1]] {
                for k in 0..ch {
                    out.data[q * ch + k] += wt * g.data[p * ch + k];
                }
            }
        }
        out
    }
}

/// Reflects the grid across `line`, sampling bilinearly at reflected pixel centers.
pub fn mirror_flip(y: &FeatureGrid, line: &GridLine) -> Result<FeatureGrid> {
    line.check_grid(y)?;
    Ok(MirrorSampler::new(line).apply(y))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &FeatureGrid, b: &FeatureGrid) -> Result<FeatureGrid> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Dimension(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.pixels() * c);
    for p in 0..a.pixels() {
        data.extend_from_slice(a.pixel(p));
        data.extend_from_slice(b.pixel(p));
    }
    Ok(FeatureGrid {
        height: a.height,
        width: a.width,
        channels: c,
        data,
    })
}
