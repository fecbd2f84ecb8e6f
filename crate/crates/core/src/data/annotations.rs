//! Boundary annotations, one video per line:
//!
//! ```text
//! video_id duration_s k t_1 c_1 ... t_k c_k
//! ```
//!
//! Category `0` means unlabeled. A video is either fully labeled or fully
//! unlabeled.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryAnnotation {
    pub video_id: String,
    /// Strictly ascending, each in `(0, duration_s)`.
    pub boundaries_s: Vec<f64>,
    /// Categories in `1..=K`, aligned with `boundaries_s`.
    pub categories: Option<Vec<u32>>,
    pub duration_s: f64,
}

impl BoundaryAnnotation {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{}: duration must be > 0, got {}",
                self.video_id, self.duration_s
            )));
        }
        for (i, &t) in self.boundaries_s.iter().enumerate() {
            if !(t > 0.0 && t < self.duration_s) {
                return Err(Error::InvalidArgument(format!(
                    "{}: boundary {t} outside (0, {})",
                    self.video_id, self.duration_s
                )));
            }
            if i > 0 && t <= self.boundaries_s[i - 1] {
                return Err(Error::InvalidArgument(format!(
                    "{}: boundaries not strictly ascending at {t}",
                    self.video_id
                )));
            }
        }
        if let Some(cats) = &self.categories {
            if cats.len() != self.boundaries_s.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} categories for {} boundaries",
                    self.video_id,
                    cats.len(),
                    self.boundaries_s.len()
                )));
            }
            if cats.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "{}: category 0 mixed with labeled boundaries",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    /// Boundary frame indices under the frame-center convention
    /// `time = (index + 0.5) / fps`, clamped into `[0, T)`.
    pub fn frame_indices(&self, fps: f64, num_frames: usize) -> Vec<usize> {
        self.boundaries_s
            .iter()
            .map(|&t| crate::inference::time_to_index(t, fps).min(num_frames - 1))
            .collect()
    }
}

pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<BoundaryAnnotation>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("line {}", i + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 3 {
            return Err(Error::parse(path, at, "expected `video_id duration_s k ...`"));
        }
        let id = tok[0].to_owned();
        let duration: f64 = tok[1]
            .parse()
            .map_err(|_| Error::parse(path, &at, format!("bad duration {:?}", tok[1])))?;
        let k: usize = tok[2]
            .parse()
            .map_err(|_| Error::parse(path, &at, format!("bad boundary count {:?}", tok[2])))?;
        if tok.len() != 3 + 2 * k {
            return Err(Error::parse(
                path,
                &at,
                format!("{k} boundaries need {} fields, found {}", 3 + 2 * k, tok.len()),
            ));
        }
        let mut times = Vec::with_capacity(k);
        let mut cats = Vec::with_capacity(k);
        for j in 0..k {
            let t: f64 = tok[3 + 2 * j]
                .parse()
                .map_err(|_| Error::parse(path, &at, format!("bad time {:?}", tok[3 + 2 * j])))?;
            let c: u32 = tok[4 + 2 * j]
                .parse()
                .map_err(|_| Error::parse(path, &at, format!("bad category {:?}", tok[4 + 2 * j])))?;
            times.push(t);
            cats.push(c);
        }
        let categories = if cats.iter().all(|&c| c == 0) { None } else { Some(cats) };
        let ann = BoundaryAnnotation {
            video_id: id,
            boundaries_s: times,
            categories,
            duration_s: duration,
        };
        ann.validate()
            .map_err(|e| Error::parse(path, &at, e.to_string()))?;
        if !seen.insert(ann.video_id.clone()) {
            return Err(Error::parse(path, &at, format!("duplicate video id {}", ann.video_id)));
        }
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<BoundaryAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(path, &text)
}

pub fn format_annotations(annotations: &[BoundaryAnnotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&format!("{} {} {}", a.video_id, a.duration_s, a.boundaries_s.len()));
        for (i, t) in a.boundaries_s.iter().enumerate() {
            let c = a.categories.as_ref().map_or(0, |c| c[i]);
            out.push_str(&format!(" {t} {c}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_annotations(annotations: &[BoundaryAnnotation], path: &Path) -> Result<()> {
    write_atomic(path, format_annotations(annotations).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<BoundaryAnnotation>> {
        parse_annotations(Path::new("ann.txt"), text)
    }

    #[test]
    fn parses_one_record() {
        let a = parse("v1 5.0 2 1.5 0 3.0 0\n").unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].boundaries_s, vec![1.5, 3.0]);
        assert_eq!(a[0].categories, None);
        assert_eq!(a[0].duration_s, 5.0);
    }

    #[test]
    fn rejects_invalid_records() {
        assert!(parse("v1 5.0 1 6.0 0\n").is_err());
        assert!(parse("v1 5.0 2 3.0 1 2.0 1\n").is_err());
        assert!(parse("v1 5.0 2 1.0 1 2.0 0\n").is_err());
        assert!(parse("v1 5.0 2 1.0 1\n").is_err());
        assert!(parse("v1 5.0 0\nv1 4.0 0\n").is_err());
        assert!(parse("v1 -1 0\n").is_err());
        let msg = parse("v1 5.0 0\nv2 5 1 x 0\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn empty_boundary_list() {
        let a = parse("# header\n\nv 3.5 0\n").unwrap();
        assert!(a[0].boundaries_s.is_empty());
    }

    proptest! {
        #[test]
        fn write_read_round_trip(
            videos in prop::collection::vec(
                (1.0f64..500.0, prop::collection::btree_set(1u32..10_000, 0..8), any::<bool>()),
                0..6,
            ),
        ) {
            let anns: Vec<BoundaryAnnotation> = videos
                .iter()
                .enumerate()
                .map(|(i, (dur, marks, labeled))| {
                    let times: Vec<f64> = marks.iter().map(|&m| dur * f64::from(m) / 10_000.0).collect();
                    let cats = labeled.then(|| (0..times.len() as u32).map(|c| c % 7 + 1).collect());
                    BoundaryAnnotation {
                        video_id: format!("vid{i}"),
                        categories: if times.is_empty() { None } else { cats },
                        boundaries_s: times,
                        duration_s: *dur,
                    }
                })
                .collect();
            let text = format_annotations(&anns);
            prop_assert_eq!(parse(&text).unwrap(), anns);
        }
    }
}
