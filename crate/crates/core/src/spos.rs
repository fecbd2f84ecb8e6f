//! Structured partition of a frame sequence into shared context windows.
//!
//! Frames are cut into consecutive groups of `stride` frames. Every group
//! owns one window of `window` frames centered on it, and every frame of the
//! group is scored from that window. The number of windows, and therefore of
//! encoder passes, is `ceil(T / stride)`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextGroup {
    /// Frames scored from this window.
    pub frames: Range<usize>,
    /// Window position in padded coordinates; may start below 0 or end
    /// past `T`.
    pub window: Range<isize>,
}

impl ContextGroup {
    /// Position of `frame` inside this group's window.
    pub fn offset_of(&self, frame: usize) -> usize {
        (frame as isize - self.window.start) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextPlan {
    pub num_frames: usize,
    pub window: usize,
    pub stride: usize,
    pub groups: Vec<ContextGroup>,
}

pub fn plan(num_frames: usize, window: usize, stride: usize) -> Result<ContextPlan> {
    if num_frames == 0 {
        return Err(Error::InvalidArgument("sequence must have at least one frame".into()));
    }
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= stride <= window, got window {window}, stride {stride}"
        )));
    }
    let lead = ((window - stride) / 2) as isize;
    let groups = (0..num_frames.div_ceil(stride))
        .map(|g| {
            let first = g * stride;
            let start = first as isize - lead;
            ContextGroup {
                frames: first..(first + stride).min(num_frames),
                window: start..start + window as isize,
            }
        })
        .collect();
    Ok(ContextPlan {
        num_frames,
        window,
        stride,
        groups,
    })
}

impl ContextPlan {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Group index of every frame.
    pub fn frame_to_group(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames);
        for (g, group) in self.groups.iter().enumerate() {
            out.extend(std::iter::repeat_n(g, group.frames.len()));
        }
        out
    }

    /// Source row of each window position, clamped into `[0, T)`.
    pub fn window_rows(&self, group: usize) -> Vec<usize> {
        let last = self.num_frames as isize - 1;
        self.groups[group]
            .window
            .clone()
            .map(|i| i.clamp(0, last) as usize)
            .collect()
    }
}

/// One `window × C` context per group, with edge replication outside the
/// sequence.
pub fn gather(features: &Tensor, plan: &ContextPlan) -> Result<Vec<Tensor>> {
    if features.shape().len() != 2 || features.rows() != plan.num_frames {
        return Err(Error::shape(
            "gather",
            format!("features {:?} for a plan over {} frames", features.shape(), plan.num_frames),
        ));
    }
    let c = features.cols();
    (0..plan.num_groups())
        .map(|g| {
            let mut data = Vec::with_capacity(plan.window * c);
            for row in plan.window_rows(g) {
                data.extend_from_slice(features.row(row));
            }
            Tensor::new(vec![plan.window, c], data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let p = plan(10, 8, 4).unwrap();
        let got: Vec<_> = p.groups.iter().map(|g| (g.frames.clone(), g.window.clone())).collect();
        assert_eq!(got, vec![(0..4, -2..6), (4..8, 2..10), (8..10, 6..14)]);
    }

    #[test]
    fn single_frame() {
        let p = plan(1, 1, 1).unwrap();
        assert_eq!(p.groups, vec![ContextGroup { frames: 0..1, window: 0..1 }]);
    }

    #[test]
    fn rejects_invalid() {
        assert!(plan(0, 4, 2).is_err());
        assert!(plan(5, 0, 1).is_err());
        assert!(plan(5, 4, 0).is_err());
        assert!(plan(5, 4, 5).is_err());
    }

    #[test]
    fn gather_interior_and_padding() {
        let f = Tensor::new(vec![10, 2], (0..20).map(f64::from).collect()).unwrap();
        let p = plan(10, 8, 4).unwrap();
        let w = gather(&f, &p).unwrap();
        // Group 1 window [2, 10) is interior.
        assert_eq!(w[1].data(), &f.data()[4..20]);
        // Group 0 window starts at -2: rows 0 and 1 replicate frame 0.
        assert_eq!(w[0].row(0), f.row(0));
        assert_eq!(w[0].row(1), f.row(0));
        assert_eq!(w[0].row(2), f.row(0));
        assert_eq!(w[2].row(7), f.row(9));
        assert!(gather(&Tensor::zeros(&[9, 2]), &p).is_err());
    }

    proptest! {
        #[test]
        fn gather_matches_per_frame_slicing(
            t in 1usize..60, window in 1usize..20, s in 1usize..20, c in 1usize..4,
        ) {
            let s = s.min(window);
            let f = Tensor::new(vec![t, c], (0..t * c).map(|v| v as f64 * 0.5).collect()).unwrap();
            let p = plan(t, window, s).unwrap();
            let w = gather(&f, &p).unwrap();
            for (g, group) in p.groups.iter().enumerate() {
                for (k, pos) in group.window.clone().enumerate() {
                    let src = pos.max(0).min(t as isize - 1) as usize;
                    prop_assert_eq!(w[g].row(k), f.row(src));
                }
            }
        }
    }
}
