//! Whole-video scoring, peak selection, ensembling and the text dumps that
//! carry scores and detections between commands.
//!
//! Score dump, one video per line:
//! `video_id T fps duration_s p_0 ... p_{T-1}`
//!
//! Detection dump, one video per line:
//! `video_id k t_1 ... t_k`

use std::collections::HashSet;
use std::path::Path;

use crate::data::FrameFeatureSequence;
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::network::{Prediction, ScTransformer};
use crate::tensor::Tensor;

pub const DEFAULT_PEAK_RADIUS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryScores {
    pub video_id: String,
    /// Merged boundary confidence per frame, in `[0, 1]`.
    pub p: Vec<f64>,
    pub fps: f64,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub video_id: String,
    pub boundary_times_s: Vec<f64>,
}

/// Frame-center timestamp of frame `index`.
pub fn index_to_time(index: usize, fps: f64) -> f64 {
    (index as f64 + 0.5) / fps
}

/// Nearest frame whose center is closest to `time`.
pub fn time_to_index(time: f64, fps: f64) -> usize {
    (time * fps - 0.5).round().max(0.0) as usize
}

pub fn indices_to_times(indices: &[usize], fps: f64) -> Vec<f64> {
    indices.iter().map(|&i| index_to_time(i, fps)).collect()
}

/// Runs the model over one video and returns merged per-frame scores.
pub fn score_video(model: &ScTransformer, features: &FrameFeatureSequence) -> Result<BoundaryScores> {
    Ok(score_video_detailed(model, features)?.0)
}

/// Like [`score_video`], also returning the raw head outputs and the number
/// of encoder passes.
pub fn score_video_detailed(
    model: &ScTransformer,
    features: &FrameFeatureSequence,
) -> Result<(BoundaryScores, Prediction)> {
    let expected = model.config().channels;
    if features.channels() != expected {
        return Err(Error::InvalidArgument(format!(
            "{}: features have {} channels, model expects {expected}",
            features.video_id,
            features.channels()
        )));
    }
    let pred = model.predict(&features.features)?;
    let scores = BoundaryScores {
        video_id: features.video_id.clone(),
        p: pred.p.data().to_vec(),
        fps: features.fps,
        duration_s: features.duration_s,
    };
    Ok((scores, pred))
}

/// Indices that are strict local maxima against earlier neighbors and
/// non-strict against later ones within `±radius`, and exceed `threshold`.
/// On a plateau the leftmost frame wins.
pub fn peak_select(p: &[f64], radius: usize, threshold: f64) -> Vec<usize> {
    let n = p.len();
    let mut out = Vec::new();
    for t in 0..n {
        let v = p[t];
        if !(v > threshold) {
            continue;
        }
        let lo = t.saturating_sub(radius);
        let hi = (t + radius).min(n - 1);
        let left_ok = p[lo..t].iter().all(|&q| v > q);
        let right_ok = p[t + 1..=hi].iter().all(|&q| v >= q);
        if left_ok && right_ok {
            out.push(t);
        }
    }
    out
}

/// Peak selection on a score sequence, mapped to frame-center times.
pub fn detect(scores: &BoundaryScores, radius: usize, threshold: f64) -> DetectionResult {
    let peaks = peak_select(&scores.p, radius, threshold);
    let times = indices_to_times(&peaks, scores.fps)
        .into_iter()
        .filter(|&t| t > 0.0 && t < scores.duration_s)
        .collect();
    DetectionResult {
        video_id: scores.video_id.clone(),
        boundary_times_s: times,
    }
}

/// Elementwise mean of score sequences for the same video.
///
/// Each element is averaged over its values in sorted order, so the result
/// does not depend on input order; identical inputs return themselves
/// exactly.
pub fn ensemble(scores: &[BoundaryScores]) -> Result<BoundaryScores> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of zero models".into()))?;
    for s in &scores[1..] {
        if s.video_id != first.video_id {
            return Err(Error::InvalidArgument(format!(
                "cannot ensemble {} with {}",
                first.video_id, s.video_id
            )));
        }
        if s.p.len() != first.p.len() {
            return Err(Error::shape(
                "ensemble",
                format!("{}: {} vs {} frames", first.video_id, first.p.len(), s.p.len()),
            ));
        }
    }
    let n = scores.len() as f64;
    let mut column = Vec::with_capacity(scores.len());
    let p = (0..first.p.len())
        .map(|t| {
            column.clear();
            column.extend(scores.iter().map(|s| s.p[t]));
            column.sort_by(f64::total_cmp);
            let (lo, hi) = (column[0], column[column.len() - 1]);
            if lo == hi {
                lo
            } else {
                (column.iter().sum::<f64>() / n).clamp(lo, hi)
            }
        })
        .collect();
    Ok(BoundaryScores {
        video_id: first.video_id.clone(),
        p,
        fps: first.fps,
        duration_s: first.duration_s,
    })
}

/// Ensembles several score dumps video by video. Every dump must hold the
/// same set of videos.
pub fn ensemble_dumps(dumps: &[Vec<BoundaryScores>]) -> Result<Vec<BoundaryScores>> {
    let first = dumps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score dumps".into()))?;
    for (k, d) in dumps.iter().enumerate().skip(1) {
        if d.len() != first.len() {
            return Err(Error::InvalidArgument(format!(
                "dump {k} has {} videos, dump 0 has {}",
                d.len(),
                first.len()
            )));
        }
    }
    first
        .iter()
        .map(|s| {
            let group: Vec<BoundaryScores> = dumps
                .iter()
                .map(|d| {
                    d.iter()
                        .find(|x| x.video_id == s.video_id)
                        .cloned()
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("video {} missing from a dump", s.video_id))
                        })
                })
                .collect::<Result<_>>()?;
            ensemble(&group)
        })
        .collect()
}

pub fn format_scores(scores: &[BoundaryScores]) -> String {
    let mut out = String::new();
    for s in scores {
        out.push_str(&format!("{} {} {} {}", s.video_id, s.p.len(), s.fps, s.duration_s));
        for v in &s.p {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_scores(path: &Path, text: &str) -> Result<Vec<BoundaryScores>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("line {}", i + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(Error::parse(path, at, "expected `video_id T fps duration p...`"));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, &at, format!("bad number {s:?}")))
        };
        let t: usize = tok[1]
            .parse()
            .map_err(|_| Error::parse(path, &at, format!("bad frame count {:?}", tok[1])))?;
        if t == 0 || tok.len() != 4 + t {
            return Err(Error::parse(
                path,
                &at,
                format!("declared {t} scores, found {}", tok.len() - 4),
            ));
        }
        let fps = num(tok[2])?;
        let duration = num(tok[3])?;
        if fps <= 0.0 || duration <= 0.0 {
            return Err(Error::parse(path, &at, "fps and duration must be > 0"));
        }
        let p = tok[4..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::parse(path, &at, "scores must lie in [0, 1]"));
        }
        if !seen.insert(tok[0]) {
            return Err(Error::parse(path, &at, format!("duplicate video id {}", tok[0])));
        }
        out.push(BoundaryScores {
            video_id: tok[0].to_owned(),
            p,
            fps,
            duration_s: duration,
        });
    }
    Ok(out)
}

pub fn load_scores(path: &Path) -> Result<Vec<BoundaryScores>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(path, &text)
}

pub fn save_scores(scores: &[BoundaryScores], path: &Path) -> Result<()> {
    write_atomic(path, format_scores(scores).as_bytes())
}

pub fn format_detections(dets: &[DetectionResult]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&format!("{} {}", d.video_id, d.boundary_times_s.len()));
        for t in &d.boundary_times_s {
            out.push(' ');
            out.push_str(&t.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<DetectionResult>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("line {}", i + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 2 {
            return Err(Error::parse(path, at, "expected `video_id k t...`"));
        }
        let k: usize = tok[1]
            .parse()
            .map_err(|_| Error::parse(path, &at, format!("bad count {:?}", tok[1])))?;
        if tok.len() != 2 + k {
            return Err(Error::parse(
                path,
                &at,
                format!("declared {k} times, found {}", tok.len() - 2),
            ));
        }
        let times = tok[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, &at, format!("bad time {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::parse(path, &at, "times must be ascending"));
        }
        if !seen.insert(tok[0]) {
            return Err(Error::parse(path, &at, format!("duplicate video id {}", tok[0])));
        }
        out.push(DetectionResult {
            video_id: tok[0].to_owned(),
            boundary_times_s: times,
        });
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(path, &text)
}

pub fn save_detections(dets: &[DetectionResult], path: &Path) -> Result<()> {
    write_atomic(path, format_detections(dets).as_bytes())
}

impl BoundaryScores {
    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.p.clone())
    }
}
