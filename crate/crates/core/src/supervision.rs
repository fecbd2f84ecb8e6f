//! Gaussian soft labels, the two cross-entropy losses and the score merge
//! `p_t = max(b_t, 1 - m_t[0])`.

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_CLAMP;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisionConfig {
    /// Gaussian width in frames.
    pub sigma: f64,
    /// Truncation radius in frames; `None` means `3 * sigma`.
    pub radius: Option<f64>,
    /// Weight of the categorical loss.
    pub lambda: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            radius: None,
            lambda: 1.0,
        }
    }
}

impl SupervisionConfig {
    pub fn radius(&self) -> f64 {
        self.radius.unwrap_or(3.0 * self.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.radius() >= 0.0) {
            return Err(Error::InvalidArgument("radius must be >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Soft targets for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels {
    /// Length `T`, values in `[0, 1]`.
    pub binary: Tensor,
    /// `T × (K+1)`, one row per frame, each row sums to 1. Column 0 is
    /// "no boundary".
    pub categorical: Option<Tensor>,
}

fn gaussian_weight(distance: f64, sigma: f64, radius: f64) -> f64 {
    if distance.abs() > radius {
        0.0
    } else {
        (-(distance * distance) / (2.0 * sigma * sigma)).exp()
    }
}

fn check_index(b: usize, t: usize) -> Result<()> {
    if b >= t {
        return Err(Error::InvalidArgument(format!(
            "boundary frame {b} outside [0, {t})"
        )));
    }
    Ok(())
}

/// Binary soft labels: each frame takes the largest truncated Gaussian
/// weight over all boundaries.
pub fn soften(boundaries: &[usize], t: usize, sigma: f64, radius: f64) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let mut labels = vec![0.0; t];
    for &b in boundaries {
        check_index(b, t)?;
        let reach = radius.floor() as usize;
        let lo = b.saturating_sub(reach);
        let hi = (b + reach).min(t - 1);
        for (i, slot) in labels.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let w = gaussian_weight(i as f64 - b as f64, sigma, radius);
            if w > *slot {
                *slot = w;
            }
        }
    }
    Ok(Tensor::vector(labels))
}

/// Categorical soft labels over `K+1` classes, one row per frame.
///
/// Class `k` gets the truncated Gaussian weight of the nearest boundary of
/// category `k`; class 0 gets `1 - max_k`; rows are then renormalized.
pub fn soften_categorical(
    boundaries: &[usize],
    categories: &[u32],
    t: usize,
    num_categories: usize,
    sigma: f64,
    radius: f64,
) -> Result<Tensor> {
    if boundaries.len() != categories.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boundaries but {} categories",
            boundaries.len(),
            categories.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let classes = num_categories + 1;
    let mut out = vec![0.0; t * classes];
    for (&b, &c) in boundaries.iter().zip(categories) {
        check_index(b, t)?;
        if c == 0 || c as usize > num_categories {
            return Err(Error::InvalidArgument(format!(
                "category {c} outside [1, {num_categories}]"
            )));
        }
        for frame in 0..t {
            // Nearest boundary of a class has the largest weight, so a max
            // over same-class boundaries picks it.
            let w = gaussian_weight(frame as f64 - b as f64, sigma, radius);
            let slot = &mut out[frame * classes + c as usize];
            if w > *slot {
                *slot = w;
            }
        }
    }
    for row in out.chunks_mut(classes) {
        let peak = row[1..].iter().copied().fold(0.0, f64::max);
        row[0] = 1.0 - peak;
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(vec![t, classes], out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub(crate) fn bce_value(probs: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

pub(crate) fn cce_value(probs: &[f64], targets: &[f64], classes: usize) -> f64 {
    let frames = probs.len() / classes;
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| -y * clamp_prob(p).ln())
        .sum();
    total / frames as f64
}

/// Mean binary cross-entropy between per-frame probabilities and soft labels.
pub fn binary_loss(b: &Tensor, labels: &Tensor) -> Result<f64> {
    if b.len() != labels.len() {
        return Err(Error::shape(
            "binary_loss",
            format!("{} predictions, {} labels", b.len(), labels.len()),
        ));
    }
    Ok(bce_value(b.data(), labels.data()))
}

/// Mean over frames of the categorical cross-entropy; both inputs are
/// `T × (K+1)`.
pub fn categorical_loss(m: &Tensor, labels: &Tensor) -> Result<f64> {
    if m.shape() != labels.shape() {
        return Err(Error::shape(
            "categorical_loss",
            format!("{:?} vs {:?}", m.shape(), labels.shape()),
        ));
    }
    Ok(cce_value(m.data(), labels.data(), m.cols()))
}

/// Per-frame `max(b_t, 1 - m_t[0])`. `m` is `T × (K+1)`.
pub fn merge(b: &Tensor, m: &Tensor) -> Result<Tensor> {
    let t = b.len();
    if m.rows() != t {
        return Err(Error::shape(
            "merge",
            format!("{t} binary scores, {} category rows", m.rows()),
        ));
    }
    let classes = m.cols();
    let p = b
        .data()
        .iter()
        .enumerate()
        .map(|(i, &bt)| bt.max(1.0 - m.data()[i * classes]))
        .collect();
    Ok(Tensor::vector(p))
}
