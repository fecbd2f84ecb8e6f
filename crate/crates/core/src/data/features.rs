//! Per-video frame feature files.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic    b"GEBDFEAT"
//! version  u32 (1)
//! T, C     u32, u32
//! fps      f64
//! duration f64 (seconds)
//! values   T·C f32, row-major
//! ```
//!
//! The text variant is meant for hand-written fixtures: a header line
//! `gebd-features 1 <T> <C> <fps> <duration>` followed by `T` lines of `C`
//! numbers. Blank lines and lines starting with `#` are ignored. The video
//! id is the file stem in both cases.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_f64, read_u32, write_atomic};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GEBDFEAT";
const TEXT_TAG: &str = "gebd-features";
const VERSION: u32 = 1;
pub const FEATURE_EXTENSION: &str = "feat";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    /// `T × C`.
    pub features: Tensor,
    pub fps: f64,
    pub duration_s: f64,
}

impl FrameFeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Tensor, fps: f64, duration_s: f64) -> Result<Self> {
        let s = Self {
            video_id: video_id.into(),
            features,
            fps,
            duration_s,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.shape().len() != 2 {
            return Err(Error::shape("features", format!("expected T x C, got {:?}", self.features.shape())));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: fps must be > 0", self.video_id)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: duration must be > 0", self.video_id)));
        }
        if let Some(i) = self.features.data().iter().position(|v| !v.is_finite()) {
            let c = self.channels();
            return Err(Error::NonFinite(format!(
                "{}: frame {}, channel {}",
                self.video_id,
                i / c,
                i % c
            )));
        }
        if self.video_id.is_empty() || self.video_id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "video id {:?} must be non-empty without whitespace",
                self.video_id
            )));
        }
        Ok(())
    }
}

fn video_id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::parse(path, "name", "cannot derive a video id from the file name"))
}

/// Reads either feature format, detected from the leading bytes.
pub fn load_features(path: &Path) -> Result<FrameFeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = video_id_of(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(path, id, &bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::parse(path, format!("byte {}", e.valid_up_to()), "neither binary features nor UTF-8 text"))?;
        decode_text(path, id, text)
    }
}

fn decode_binary(path: &Path, id: String, bytes: &[u8]) -> Result<FrameFeatureSequence> {
    let mut r = &bytes[MAGIC.len()..];
    let header = |e: std::io::Error| Error::parse(path, "header", format!("truncated header: {e}"));
    let version = read_u32(&mut r).map_err(header)?;
    if version != VERSION {
        return Err(Error::parse(path, "header", format!("unsupported version {version}")));
    }
    let t = read_u32(&mut r).map_err(header)? as usize;
    let c = read_u32(&mut r).map_err(header)? as usize;
    let fps = read_f64(&mut r).map_err(header)?;
    let duration = read_f64(&mut r).map_err(header)?;
    if t == 0 || c == 0 {
        return Err(Error::parse(path, "header", format!("declared shape {t} x {c}")));
    }
    let expected = t * c;
    if r.len() != expected * 4 {
        return Err(Error::parse(
            path,
            "body",
            format!("expected {expected} values, found {} bytes ({} values)", r.len(), r.len() as f64 / 4.0),
        ));
    }
    let mut data = Vec::with_capacity(expected);
    let mut buf = [0u8; 4];
    for i in 0..expected {
        r.read_exact(&mut buf).expect("length checked");
        let v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::parse(
                path,
                format!("frame {}, channel {}", i / c, i % c),
                "non-finite value",
            ));
        }
        data.push(f64::from(v));
    }
    FrameFeatureSequence::new(id, Tensor::new(vec![t, c], data)?, fps, duration)
        .map_err(|e| Error::parse(path, "header", e.to_string()))
}

fn decode_text(path: &Path, id: String, text: &str) -> Result<FrameFeatureSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, "line 1", "missing header"))?;
    let at = |line: usize| format!("line {line}");
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != TEXT_TAG {
        return Err(Error::parse(
            path,
            at(hl),
            format!("expected `{TEXT_TAG} 1 <T> <C> <fps> <duration>`"),
        ));
    }
    if fields[1] != "1" {
        return Err(Error::parse(path, at(hl), format!("unsupported version {}", fields[1])));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::parse(path, at(hl), format!("bad {what} {s:?}")))
    };
    let t: usize = fields[2]
        .parse()
        .map_err(|_| Error::parse(path, at(hl), format!("bad T {:?}", fields[2])))?;
    let c: usize = fields[3]
        .parse()
        .map_err(|_| Error::parse(path, at(hl), format!("bad C {:?}", fields[3])))?;
    let fps = num(fields[4], "fps")?;
    let duration = num(fields[5], "duration")?;
    if t == 0 || c == 0 {
        return Err(Error::parse(path, at(hl), format!("declared shape {t} x {c}")));
    }
    let mut data = Vec::with_capacity(t * c);
    let mut rows = 0;
    for (ln, line) in lines {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, at(ln), format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, at(ln), "non-finite value"));
            }
            data.push(v);
        }
        if data.len() - before != c {
            return Err(Error::parse(
                path,
                at(ln),
                format!("expected {c} values per frame, found {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != t {
        return Err(Error::parse(
            path,
            "body",
            format!("expected {} values ({t} frames), found {} ({rows} frames)", t * c, data.len()),
        ));
    }
    FrameFeatureSequence::new(id, Tensor::new(vec![t, c], data)?, fps, duration)
        .map_err(|e| Error::parse(path, at(hl), e.to_string()))
}

/// Binary encoding. Values are stored as `f32`.
pub fn encode_features(seq: &FrameFeatureSequence) -> Vec<u8> {
    let (t, c) = (seq.num_frames(), seq.channels());
    let mut out = Vec::with_capacity(32 + t * c * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    out.extend_from_slice(&seq.duration_s.to_le_bytes());
    for &v in seq.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_features_text(seq: &FrameFeatureSequence) -> String {
    let mut out = format!(
        "{TEXT_TAG} {VERSION} {} {} {} {}\n",
        seq.num_frames(),
        seq.channels(),
        seq.fps,
        seq.duration_s
    );
    for t in 0..seq.num_frames() {
        let row: Vec<String> = seq.features.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_features(seq: &FrameFeatureSequence, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(seq))
}

pub fn save_features_text(seq: &FrameFeatureSequence, path: &Path) -> Result<()> {
    write_atomic(path, encode_features_text(seq).as_bytes())
}

/// Loads every `*.feat` file of a directory, sorted by video id.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<FrameFeatureSequence>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(FEATURE_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_features(p)).collect()
}

/// Concatenates modalities channel-wise in argument order. All parts must
/// share video id and frame count; timing metadata comes from the first.
pub fn fuse_all(parts: &[&FrameFeatureSequence]) -> Result<FrameFeatureSequence> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let t = first.num_frames();
    for p in &parts[1..] {
        if p.video_id != first.video_id {
            return Err(Error::InvalidArgument(format!(
                "cannot fuse {} with {}",
                first.video_id, p.video_id
            )));
        }
        if p.num_frames() != t {
            return Err(Error::shape(
                "fuse_modalities",
                format!("{}: {t} frames vs {}", first.video_id, p.num_frames()),
            ));
        }
    }
    let width: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(t * width);
    for i in 0..t {
        for p in parts {
            data.extend_from_slice(p.features.row(i));
        }
    }
    Ok(FrameFeatureSequence {
        video_id: first.video_id.clone(),
        features: Tensor::new(vec![t, width], data)?,
        fps: first.fps,
        duration_s: first.duration_s,
    })
}

/// `[rgb | flow]` per frame.
pub fn fuse_modalities(rgb: &FrameFeatureSequence, flow: &FrameFeatureSequence) -> Result<FrameFeatureSequence> {
    fuse_all(&[rgb, flow])
}
