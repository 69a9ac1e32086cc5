use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{
    cross_entropy, cross_entropy_logit_grad, dense, dense_backward, softmax2, DenseParams, ProbPair,
};

/// Two dense layers over `[f_i; f_j]` ending in two logits. R-Net and M-Net
/// share this shape and differ only in their training labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseHeadParams {
    pub hidden: DenseParams,
    pub out: DenseParams,
}

impl SiameseHeadParams {
    pub fn random(rng: &mut impl Rng, feature_dim: usize, hidden_width: usize) -> Self {
        SiameseHeadParams {
            hidden: DenseParams::random(rng, 2 * feature_dim, hidden_width),
            out: DenseParams::random(rng, hidden_width, 2),
        }
    }

    pub fn zeros(feature_dim: usize, hidden_width: usize) -> Self {
        SiameseHeadParams {
            hidden: DenseParams::zeros(2 * feature_dim, hidden_width),
            out: DenseParams::zeros(hidden_width, 2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SiameseHeadParams {
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    /// Length of one line feature.
    pub fn feature_dim(&self) -> usize {
        self.hidden.in_dim / 2
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let mut out = Vec::new();
        for (name, d) in [("hidden", &self.hidden), ("out", &self.out)] {
            out.push((format!("{name}.weight"), vec![d.out_dim, d.in_dim], &d.weights));
            out.push((format!("{name}.bias"), vec![d.out_dim], &d.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.out.weights,
            &mut self.out.bias,
        ]
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
    pub fn add_scaled(&mut self, other: &SiameseHeadParams, alpha: f64) {
        let src: Vec<&Vec<f64>> = other.tensors().into_iter().map(|(_, _, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

struct Forward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: [f64; 2],
}

fn forward(params: &SiameseHeadParams, fi: &[f64], fj: &[f64]) -> Result<Forward> {
    if fi.len() != fj.len() || fi.len() != params.feature_dim() {
        return Err(Error::Dimension(format!(
            "pair features of length {} and {} for a head expecting {}",
            fi.len(),
            fj.len(),
            params.feature_dim()
        )));
    }
    let input: Vec<f64> = fi.iter().chain(fj).copied().collect();
    let hidden: Vec<f64> = dense(&params.hidden, &input)?.into_iter().map(f64::tanh).collect();
    let z = dense(&params.out, &hidden)?;
    Ok(Forward {
        input,
        hidden,
        logits: [z[0], z[1]],
    })
}

pub fn siamese_forward(params: &SiameseHeadParams, fi: &[f64], fj: &[f64]) -> Result<ProbPair> {
    Ok(softmax2(forward(params, fi, fj)?.logits))
}

/// `p^r`: probability that line `i` is more reliable than line `j`.
pub fn rnet_forward(fi: &[f64], fj: &[f64], params: &SiameseHeadParams) -> Result<ProbPair> {
    siamese_forward(params, fi, fj)
}

/// `p^m`: probability that lines `i` and `j` are semantically identical.
pub fn mnet_forward(fi: &[f64], fj: &[f64], params: &SiameseHeadParams) -> Result<ProbPair> {
    siamese_forward(params, fi, fj)
}

/// Cross-entropy of the head output against `label`, with parameter gradients.
pub fn siamese_loss_and_grad(
    params: &SiameseHeadParams,
    fi: &[f64],
    fj: &[f64],
    label: ProbPair,
) -> Result<(f64, SiameseHeadParams)> {
    let fw = forward(params, fi, fj)?;
    let loss = cross_entropy(softmax2(fw.logits), label);
    let dz = cross_entropy_logit_grad(fw.logits, label);
    let (gh, g_out) = dense_backward(&params.out, &fw.hidden, &dz);
    let gpre: Vec<f64> = gh
        .iter()
        .zip(&fw.hidden)
        .map(|(g, h)| g * (1.0 - h * h))
        .collect();
    let (_, g_hidden) = dense_backward(&params.hidden, &fw.input, &gpre);
    Ok((
        loss,
        SiameseHeadParams {
            hidden: g_hidden,
            out: g_out,
        },
    ))
}
