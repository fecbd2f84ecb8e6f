//! Relative-distance F1 for boundary detection.
//!
//! A prediction matches a ground-truth boundary when their distance is at
//! most `rel_dis × duration`. Matching is one-to-one; counts are summed over
//! all videos before computing precision, recall and F1.

use std::collections::HashMap;

use crate::data::BoundaryAnnotation;
use crate::error::{Error, Result};
use crate::inference::DetectionResult;

pub const DEFAULT_REL_DIS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Matching {
    /// Predictions in ascending order each take the earliest unmatched
    /// ground truth in range.
    #[default]
    Greedy,
    /// Maximum bipartite matching.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub rel_dis_threshold: f64,
    pub tp: usize,
    pub num_pred: usize,
    pub num_gt: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(rel_dis: f64, tp: usize, num_pred: usize, num_gt: usize) -> Self {
        let precision = if num_pred == 0 { 0.0 } else { tp as f64 / num_pred as f64 };
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            rel_dis_threshold: rel_dis,
            tp,
            num_pred,
            num_gt,
            precision,
            recall,
            f1,
        }
    }

    /// `rel_dis tp num_pred num_gt precision recall f1`
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {:.6} {:.6} {:.6}",
            self.rel_dis_threshold, self.tp, self.num_pred, self.num_gt, self.precision, self.recall, self.f1
        )
    }
}

fn tolerance(duration_s: f64, rel_dis: f64) -> Result<f64> {
    if !(duration_s >= 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be >= 0, got {duration_s}")));
    }
    if !(rel_dis >= 0.0) {
        return Err(Error::InvalidArgument(format!("rel_dis must be >= 0, got {rel_dis}")));
    }
    Ok(rel_dis * duration_s)
}

/// Greedy one-to-one match count. Both lists must be ascending.
pub fn match_count(pred: &[f64], gt: &[f64], duration_s: f64, rel_dis: f64) -> Result<usize> {
    let tol = tolerance(duration_s, rel_dis)?;
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for &p in pred {
        if let Some(j) = (0..gt.len()).find(|&j| !used[j] && (p - gt[j]).abs() <= tol) {
            used[j] = true;
            tp += 1;
        }
    }
    Ok(tp)
}

/// Maximum one-to-one match count via augmenting paths.
pub fn match_count_optimal(pred: &[f64], gt: &[f64], duration_s: f64, rel_dis: f64) -> Result<usize> {
    let tol = tolerance(duration_s, rel_dis)?;
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|&p| (0..gt.len()).filter(|&j| (p - gt[j]).abs() <= tol).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];

    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut tp = 0;
    for i in 0..pred.len() {
        let mut seen = vec![false; gt.len()];
        if augment(i, &adj, &mut seen, &mut owner) {
            tp += 1;
        }
    }
    Ok(tp)
}

/// Aggregates matches over all annotated videos. Annotated videos without a
/// detection entry count as having no predictions.
pub fn evaluate(
    detections: &[DetectionResult],
    annotations: &[BoundaryAnnotation],
    rel_dis: f64,
    matching: Matching,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &BoundaryAnnotation> =
        annotations.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let mut dets: HashMap<&str, &DetectionResult> = HashMap::new();
    for d in detections {
        if !by_id.contains_key(d.video_id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "detections for unknown video {}",
                d.video_id
            )));
        }
        if dets.insert(d.video_id.as_str(), d).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate detections for video {}",
                d.video_id
            )));
        }
    }
    let (mut tp, mut num_pred, mut num_gt) = (0, 0, 0);
    for a in annotations {
        let pred: &[f64] = dets.get(a.video_id.as_str()).map_or(&[], |d| &d.boundary_times_s);
        tp += match matching {
            Matching::Greedy => match_count(pred, &a.boundaries_s, a.duration_s, rel_dis)?,
            Matching::Optimal => match_count_optimal(pred, &a.boundaries_s, a.duration_s, rel_dis)?,
        };
        num_pred += pred.len();
        num_gt += a.boundaries_s.len();
    }
    Ok(EvalReport::from_counts(rel_dis, tp, num_pred, num_gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, times: &[f64], duration: f64) -> BoundaryAnnotation {
        BoundaryAnnotation {
            video_id: id.into(),
            boundaries_s: times.to_vec(),
            categories: None,
            duration_s: duration,
        }
    }

    fn det(id: &str, times: &[f64]) -> DetectionResult {
        DetectionResult {
            video_id: id.into(),
            boundary_times_s: times.to_vec(),
        }
    }

    #[test]
    fn exact_predictions_match_everything() {
        let gt = [1.0, 4.0, 7.5];
        assert_eq!(match_count(&gt, &gt, 10.0, 0.05).unwrap(), 3);
        assert_eq!(match_count(&[], &gt, 10.0, 0.05).unwrap(), 0);
        assert!(match_count(&[], &gt, -1.0, 0.05).is_err());
    }

    #[test]
    fn greedy_takes_earliest_in_range() {
        // tol = 1.0; prediction 2.0 could take 1.5 or 2.5 and picks 1.5.
        assert_eq!(match_count(&[2.0, 3.4], &[1.5, 2.5], 20.0, 0.05).unwrap(), 2);
        assert_eq!(match_count(&[1.0, 2.0], &[1.9, 2.9], 20.0, 0.05).unwrap(), 2);
        assert_eq!(match_count_optimal(&[1.0, 2.0], &[1.9, 2.9], 20.0, 0.05).unwrap(), 2);
        assert_eq!(match_count(&[1.0, 1.2], &[1.9], 20.0, 0.05).unwrap(), 1);
    }

    #[test]
    fn two_video_hand_case() {
        // A: 3 predictions, 2 matched, 2 gt. B: 2 predictions, 1 matched, 3 gt.
        // tp = 3, pred = 5, gt = 5.
        let anns = [ann("A", &[10.0, 50.0], 100.0), ann("B", &[20.0, 60.0, 90.0], 100.0)];
        let dets = [det("A", &[10.0, 30.0, 52.0]), det("B", &[21.0, 75.0])];
        let r = evaluate(&dets, &anns, 0.05, Matching::Greedy).unwrap();
        assert_eq!((r.tp, r.num_pred, r.num_gt), (3, 5, 5));
        assert_eq!(r.precision, 3.0 / 5.0);
        assert_eq!(r.recall, 3.0 / 5.0);
        assert_eq!(r.f1, 3.0 / 5.0);
    }

    #[test]
    fn empty_detector_and_unknown_ids() {
        let anns = [ann("A", &[1.0], 10.0)];
        let r = evaluate(&[], &anns, 0.05, Matching::Greedy).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let err = evaluate(&[det("Z", &[])], &anns, 0.05, Matching::Greedy).unwrap_err();
        assert!(err.to_string().contains('Z'));
    }

    #[test]
    fn report_line_layout() {
        let r = EvalReport::from_counts(0.05, 3, 5, 5);
        assert_eq!(r.to_line(), "0.05 3 5 5 0.600000 0.600000 0.600000");
    }
}
