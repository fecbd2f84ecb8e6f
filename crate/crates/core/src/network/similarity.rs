use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!(
            "{groups} similarity groups do not divide {channels} channels"
        )));
    }
    Ok(())
}

/// Cosine similarity maps over `groups` contiguous channel groups, stacked
/// as a `(G · L) × L` matrix.
pub(crate) fn group_similarity_var(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let c = g.value(x).cols();
    check_groups(c, groups)?;
    let width = c / groups;
    let mut maps = Vec::with_capacity(groups);
    for k in 0..groups {
        let part = g.slice_cols(x, k * width, width)?;
        let unit = g.normalize_rows(part)?;
        maps.push(g.matmul_t(unit, unit)?);
    }
    if maps.len() == 1 {
        Ok(maps[0])
    } else {
        g.concat_rows(&maps)
    }
}

/// `G × L × L` tensor whose entry `(g, i, j)` is the cosine similarity of
/// rows `i` and `j` restricted to channel group `g`. Zero-norm sub-vectors
/// have similarity 0 with everything.
pub fn group_similarity(refined: &Tensor, groups: usize) -> Result<Tensor> {
    if refined.shape().len() != 2 {
        return Err(Error::shape(
            "group_similarity",
            format!("expected L x C, got {:?}", refined.shape()),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(refined.clone());
    let s = group_similarity_var(&mut g, x, groups)?;
    let l = refined.rows();
    g.value(s).clone().reshape(vec![groups, l, l])
}

/// Flat indices into a stacked `(G · L) × L` similarity matrix that pick,
/// for every offset, its row in each group and lay them out as `L × G`
/// (window position by group).
pub(crate) fn row_select_index(offsets: &[usize], window: usize, groups: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(offsets.len() * window * groups);
    for &o in offsets {
        for j in 0..window {
            for k in 0..groups {
                index.push(k * window * window + o * window + j);
            }
        }
    }
    index
}
