//! Piecewise-stationary synthetic videos with known boundaries.
//!
//! Each video is a sequence of segments. Within a segment every frame is the
//! segment mean plus isotropic Gaussian noise. A boundary of category `k`
//! starts a new segment whose mean mixes a fresh random vector with a fixed
//! per-category prototype, so categories are recoverable from the content
//! after the change. The boundary is annotated at the first frame of the new
//! segment, at its frame center.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::annotations::BoundaryAnnotation;
use super::features::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames: usize,
    pub channels: usize,
    /// Channels of an optional second (flow-like) modality; 0 disables it.
    pub flow_channels: usize,
    pub fps: f64,
    /// Expected boundaries per video (Poisson mean).
    pub boundary_rate: f64,
    /// Minimum distance in frames between boundaries and from either end.
    pub min_gap: usize,
    /// Per-frame noise standard deviation.
    pub noise_scale: f64,
    /// Number of boundary categories.
    pub categories: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 100,
            frames: 100,
            channels: 16,
            flow_channels: 0,
            fps: 1.0,
            boundary_rate: 4.0,
            min_gap: 10,
            noise_scale: 0.5,
            categories: 8,
            seed: 0,
            id_prefix: "synth".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.frames == 0 || self.channels == 0 {
            return bad("synthetic frames and channels must be >= 1");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("synthetic fps must be > 0");
        }
        if !(self.boundary_rate >= 0.0 && self.boundary_rate.is_finite()) {
            return bad("boundary_rate must be >= 0");
        }
        if self.min_gap == 0 {
            return bad("min_gap must be >= 1");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be >= 0");
        }
        if self.categories == 0 {
            return bad("categories must be >= 1");
        }
        if self.id_prefix.chars().any(char::is_whitespace) {
            return bad("id_prefix must not contain whitespace");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub rgb: FrameFeatureSequence,
    pub flow: Option<FrameFeatureSequence>,
    pub annotation: BoundaryAnnotation,
    /// First frame of every segment after the first.
    pub boundary_frames: Vec<usize>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Boundary frames in `[min_gap, T - min_gap]`, pairwise at least `min_gap`
/// apart. The count is Poisson, capped at what fits.
fn sample_boundaries(rng: &mut impl Rng, spec: &SyntheticSpec) -> Vec<usize> {
    let (t, gap) = (spec.frames, spec.min_gap);
    if spec.boundary_rate == 0.0 || t < 2 * gap {
        return Vec::new();
    }
    let fit = (t - 2 * gap) / gap + 1;
    let drawn = Poisson::new(spec.boundary_rate)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0);
    let k = drawn.min(fit);
    if k == 0 {
        return Vec::new();
    }
    let slack = t - 2 * gap - (k - 1) * gap;
    let mut u: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
    u.sort_unstable();
    u.iter().enumerate().map(|(i, &v)| gap + v + i * gap).collect()
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

fn render(
    rng: &mut impl Rng,
    means: &[Vec<f64>],
    starts: &[usize],
    frames: usize,
    noise: f64,
) -> Tensor {
    let c = means[0].len();
    let mut data = Vec::with_capacity(frames * c);
    let mut seg = 0;
    let nd = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    for t in 0..frames {
        while seg + 1 < starts.len() && t >= starts[seg + 1] {
            seg += 1;
        }
        for &m in &means[seg] {
            let n = if noise > 0.0 { nd.sample(rng) } else { 0.0 };
            data.push(round_f32(m + n));
        }
    }
    Tensor::new(vec![frames, c], data).expect("shape matches")
}

/// Generates `spec.num_videos` videos. Video `i` only depends on the seed
/// and `i`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.categories)
        .map(|_| gaussian_vec(&mut proto_rng, spec.channels, 1.0))
        .collect();
    let duration = spec.frames as f64 / spec.fps;

    (0..spec.num_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let boundaries = sample_boundaries(&mut rng, spec);
            let cats: Vec<u32> = boundaries
                .iter()
                .map(|_| rng.random_range(1..=spec.categories as u32))
                .collect();

            let mut starts = vec![0];
            starts.extend(&boundaries);
            let mut means = vec![gaussian_vec(&mut rng, spec.channels, 1.0)];
            for &c in &cats {
                let fresh = gaussian_vec(&mut rng, spec.channels, 0.7);
                let proto = &prototypes[c as usize - 1];
                means.push(fresh.iter().zip(proto).map(|(f, p)| f + 0.7 * p).collect());
            }
            let rgb_t = render(&mut rng, &means, &starts, spec.frames, spec.noise_scale);

            let flow = (spec.flow_channels > 0).then(|| {
                let flow_means: Vec<Vec<f64>> = starts
                    .iter()
                    .map(|_| gaussian_vec(&mut rng, spec.flow_channels, 1.0))
                    .collect();
                render(&mut rng, &flow_means, &starts, spec.frames, spec.noise_scale)
            });

            let id = format!("{}{i:05}", spec.id_prefix);
            let rgb = FrameFeatureSequence::new(id.clone(), rgb_t, spec.fps, duration)?;
            let flow = flow
                .map(|f| FrameFeatureSequence::new(id.clone(), f, spec.fps, duration))
                .transpose()?;
            let annotation = BoundaryAnnotation {
                video_id: id,
                boundaries_s: boundaries
                    .iter()
                    .map(|&b| crate::inference::index_to_time(b, spec.fps))
                    .collect(),
                categories: (!cats.is_empty()).then_some(cats),
                duration_s: duration,
            };
            annotation.validate()?;
            Ok(SyntheticVideo {
                rgb,
                flow,
                annotation,
                boundary_frames: boundaries,
            })
        })
        .collect()
}
