//! Differentiable building blocks: convolution, dense layers, activations and
//! losses. Every forward function has a hand-derived backward counterpart and
//! [`grad_check`] compares those against central differences.
//!
//! Parameter structs double as gradient accumulators: a backward pass returns
//! a value of the same type holding `dL/dparam` in place of the parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::featgrid::FeatureGrid;

/// Added inside the logarithm of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

fn init_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (3.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{name}[{i}] is not finite"))),
        None => Ok(()),
    }
}

/// Same-padded, stride-1 2-D convolution (cross-correlation convention).
///
/// Weights are laid out `[out][kernel row][kernel col][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_depth: usize,
    pub out_depth: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_depth: usize,
        out_depth: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel {kernel_h}x{kernel_w} must have odd sides"
            )));
        }
        if in_depth == 0 || out_depth == 0 {
            return Err(Error::Dimension("convolution depths must be positive".into()));
        }
        if weights.len() != kernel_h * kernel_w * in_depth * out_depth || bias.len() != out_depth {
            return Err(Error::Dimension(format!(
                "{} weights / {} biases for a {kernel_h}x{kernel_w}x{in_depth}->{out_depth} kernel",
                weights.len(),
                bias.len()
            )));
        }
        check_finite("conv weight", &weights)?;
        check_finite("conv bias", &bias)?;
        Ok(ConvParams {
            kernel_h,
            kernel_w,
            in_depth,
            out_depth,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel: usize, in_depth: usize, out_depth: usize) -> Self {
        ConvParams::new(
            kernel,
            kernel,
            in_depth,
            out_depth,
            vec![0.0; kernel * kernel * in_depth * out_depth],
            vec![0.0; out_depth],
        )
        .expect("odd kernel")
    }

    pub fn random(rng: &mut impl Rng, kernel: usize, in_depth: usize, out_depth: usize) -> Self {
        let fan_in = kernel * kernel * in_depth;
        let weights = init_uniform(rng, kernel * kernel * in_depth * out_depth, fan_in);
        let bias = init_uniform(rng, out_depth, fan_in);
        ConvParams::new(kernel, kernel, in_depth, out_depth, weights, bias).expect("odd kernel")
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, j: usize) -> usize {
        ((o * self.kernel_h + i) * self.kernel_w + j) * self.in_depth
    }
}

pub fn conv2d(params: &ConvParams, x: &FeatureGrid) -> Result<FeatureGrid> {
    if x.channels() != params.in_depth {
        return Err(Error::Dimension(format!(
            "conv expects depth {}, grid has {}",
            params.in_depth,
            x.channels()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let cin = params.in_depth;
    let cout = params.out_depth;
    let mut out = FeatureGrid::zeros(h, w, cout);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..h * w {
        od[p * cout..(p + 1) * cout].copy_from_slice(&params.bias);
    }
    for (i, j, rows, cols) in taps(params, h, w) {
        for o in 0..cout {
            let wi = params.w_index(o, i, j);
            let ws = &params.weights[wi..wi + cin];
            for (r, rr) in (rows.lo..rows.hi).zip(rows.lo_in..) {
                let (cs, ce) = (cols.lo, cols.hi);
                if cin == 1 && cout == 1 {
                    // single channel rows are contiguous
                    let dst = &mut od[r * w + cs..r * w + ce];
                    let src = &xd[rr * w + cols.lo_in..rr * w + cols.lo_in + (ce - cs)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += ws[0] * s;
                    }
                    continue;
                }
                for (c, cc) in (cs..ce).zip(cols.lo_in..) {
                    let xi = (rr * w + cc) * cin;
                    od[(r * w + c) * cout + o] += dot(ws, &xd[xi..xi + cin]);
                }
            }
        }
    }
    Ok(out)
}

/// Output positions `lo..hi` along one axis that a kernel tap reaches; output
/// `t` reads input `t + lo_in - lo`.
#[derive(Clone, Copy)]
struct Span {
    lo: usize,
    hi: usize,
    lo_in: usize,
}

/// Kernel taps `(i, j)` with the output rows and columns each one reaches
/// inside the grid.
fn taps(params: &ConvParams, h: usize, w: usize) -> Vec<(usize, usize, Span, Span)> {
    let span = |k: usize, half: usize, n: usize| {
        let lo = half.saturating_sub(k).min(n);
        let hi = (n + half).saturating_sub(k).min(n).max(lo);
        Span {
            lo,
            hi,
            lo_in: lo + k - half,
        }
    };
    let (ph, pw) = (params.kernel_h / 2, params.kernel_w / 2);
    let mut out = Vec::with_capacity(params.kernel_h * params.kernel_w);
    for i in 0..params.kernel_h {
        for j in 0..params.kernel_w {
            out.push((i, j, span(i, ph, h), span(j, pw, w)));
        }
    }
    out
}

/// Returns `(dL/dx, dL/dparams)` given `dL/dout`.
pub fn conv2d_backward(
    params: &ConvParams,
    x: &FeatureGrid,
    grad_out: &FeatureGrid,
) -> (FeatureGrid, ConvParams) {
    let (h, w) = (x.height(), x.width());
    let cin = params.in_depth;
    let cout = params.out_depth;
    let mut grads = params.zeros_like();
    let mut gx = FeatureGrid::zeros(h, w, cin);
    let xd = x.data();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for p in 0..h * w {
        for (b, g) in grads.bias.iter_mut().zip(&gd[p * cout..(p + 1) * cout]) {
            *b += g;
        }
    }
    for (i, j, rows, cols) in taps(params, h, w) {
        for o in 0..cout {
            let wi = params.w_index(o, i, j);
            let ws = &params.weights[wi..wi + cin];
            let gw = &mut grads.weights[wi..wi + cin];
            for (r, rr) in (rows.lo..rows.hi).zip(rows.lo_in..) {
                for (c, cc) in (cols.lo..cols.hi).zip(cols.lo_in..) {
                    let go = gd[(r * w + c) * cout + o];
                    if go == 0.0 {
                        continue;
                    }
                    let xi = (rr * w + cc) * cin;
                    let xs = &xd[xi..xi + cin];
                    let gxs = &mut gxd[xi..xi + cin];
                    for k in 0..cin {
                        gw[k] += go * xs[k];
                        gxs[k] += go * ws[k];
                    }
                }
            }
        }
    }
    (gx, grads)
}

/// Four running sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Affine map `W v + b`, `W` stored row-major `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Dimension(format!(
                "{} weights / {} biases for a {in_dim}->{out_dim} layer",
                weights.len(),
                bias.len()
            )));
        }
        check_finite("dense weight", &weights)?;
        check_finite("dense bias", &bias)?;
        Ok(DenseParams {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = DenseParams::zeros(dim, dim);
        for i in 0..dim {
            p.weights[i * dim + i] = 1.0;
        }
        p
    }

    pub fn random(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            in_dim,
            out_dim,
            weights: init_uniform(rng, in_dim * out_dim, in_dim),
            bias: init_uniform(rng, out_dim, in_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DenseParams::zeros(self.in_dim, self.out_dim)
    }
}

pub fn dense(params: &DenseParams, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.in_dim {
        return Err(Error::Dimension(format!(
            "dense layer expects {} inputs, got {}",
            params.in_dim,
            v.len()
        )));
    }
    Ok((0..params.out_dim)
        .map(|o| params.bias[o] + dot(&params.weights[o * params.in_dim..(o + 1) * params.in_dim], v))
        .collect())
}

/// Returns `(dL/dv, dL/dparams)` given `dL/dout`.
pub fn dense_backward(params: &DenseParams, v: &[f64], grad_out: &[f64]) -> (Vec<f64>, DenseParams) {
    let mut grads = params.zeros_like();
    let mut gv = vec![0.0; params.in_dim];
    for (o, &g) in grad_out.iter().enumerate() {
        grads.bias[o] = g;
        let row = &params.weights[o * params.in_dim..(o + 1) * params.in_dim];
        let grow = &mut grads.weights[o * params.in_dim..(o + 1) * params.in_dim];
        for k in 0..params.in_dim {
            grow[k] = g * v[k];
            gv[k] += g * row[k];
        }
    }
    (gv, grads)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class probability vector `(p, q)` with `p + q = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbPair {
    pub p: f64,
    pub q: f64,
}

impl ProbPair {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) || (p + q - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("({p}, {q}) is not a probability pair")));
        }
        Ok(ProbPair { p, q })
    }

    pub const fn positive() -> Self {
        ProbPair { p: 1.0, q: 0.0 }
    }

    pub const fn negative() -> Self {
        ProbPair { p: 0.0, q: 1.0 }
    }

    pub fn is_positive(&self) -> bool {
        self.p > 0.5
    }
}

/// Max-subtracted softmax over two logits.
pub fn softmax2(logits: [f64; 2]) -> ProbPair {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    let s = a + b;
    let p = a / s;
    ProbPair { p, q: 1.0 - p }
}

pub fn cross_entropy(p: ProbPair, label: ProbPair) -> f64 {
    -(label.p * (p.p + CE_EPS).ln() + label.q * (p.q + CE_EPS).ln())
}

/// Gradient of `cross_entropy(softmax2(logits), label)` with respect to the logits.
pub fn cross_entropy_logit_grad(logits: [f64; 2], label: ProbPair) -> [f64; 2] {
    let pr = softmax2(logits);
    let probs = [pr.p, pr.q];
    let lab = [label.p, label.q];
    let dp = [
        -lab[0] / (probs[0] + CE_EPS),
        -lab[1] / (probs[1] + CE_EPS),
    ];
    let mut g = [0.0; 2];
    for (j, gj) in g.iter_mut().enumerate() {
        for k in 0..2 {
            let jac = probs[k] * (if k == j { 1.0 } else { 0.0 } - probs[j]);
            *gj += dp[k] * jac;
        }
    }
    g
}

#[inline]
pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// `sum_i eta(delta_i - target_i)` with the unit-transition smooth L1 `eta`.
pub fn smooth_l1(delta: &[f64], target: &[f64]) -> f64 {
    delta
        .iter()
        .zip(target)
        .map(|(d, t)| smooth_l1_scalar(d - t))
        .sum()
}

/// Gradient of [`smooth_l1`] with respect to `delta`.
pub fn smooth_l1_grad(delta: &[f64], target: &[f64]) -> Vec<f64> {
    delta
        .iter()
        .zip(target)
        .map(|(d, t)| {
            let x = d - t;
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        })
        .collect()
}

pub fn tanh_grid(x: &FeatureGrid) -> FeatureGrid {
    x.map(f64::tanh)
}

/// Backward of `tanh` given its output `y`.
pub fn tanh_backward(y: &FeatureGrid, grad_out: &FeatureGrid) -> FeatureGrid {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    FeatureGrid::from_vec(y.height(), y.width(), y.channels(), data).expect("shape preserved")
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &FeatureGrid) -> Result<FeatureGrid> {
    let (h, w) = (x.height() / 2, x.width() / 2);
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "cannot downsample a {}x{} grid",
            x.height(),
            x.width()
        )));
    }
    let c = x.channels();
    Ok(FeatureGrid::from_fn(h, w, c, |r, col, ch| {
        0.25 * (x.get(2 * r, 2 * col, ch)
            + x.get(2 * r, 2 * col + 1, ch)
            + x.get(2 * r + 1, 2 * col, ch)
            + x.get(2 * r + 1, 2 * col + 1, ch))
    }))
}

pub fn avg_pool2_backward(input_h: usize, input_w: usize, grad_out: &FeatureGrid) -> FeatureGrid {
    let c = grad_out.channels();
    FeatureGrid::from_fn(input_h, input_w, c, |r, col, ch| {
        let (pr, pc) = (r / 2, col / 2);
        if pr < grad_out.height() && pc < grad_out.width() {
            0.25 * grad_out.get(pr, pc, ch)
        } else {
            0.0
        }
    })
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at every coordinate of `x`.
///
/// The per-coordinate error is `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn grad_check(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<GradCheck> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, analytic, eps, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<GradCheck> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "{} analytic gradients for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let ga = analytic[i];
        if !numeric.is_finite() || !ga.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i} (analytic {ga}, numeric {numeric})"
            )));
        }
        let err = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
