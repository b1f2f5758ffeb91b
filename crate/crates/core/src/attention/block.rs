use super::params::{BlockParams, BranchParams};
use super::{AttentionError, AttentionMap, AttentionState, BlockMaps};
use crate::numerics::{dot_slices, softmax_rows, DenseMatrix};

/// Residual update of one pass plus the attention map it used.
#[derive(Debug, Clone, PartialEq)]
pub struct PassOutput {
    pub delta: DenseMatrix,
    pub map: AttentionMap,
}

fn head_width(d: usize, heads: usize) -> Result<usize, AttentionError> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(AttentionError::HeadSplit { d, h: heads });
    }
    Ok(d / heads)
}

/// Scaled dot-product logits of all heads, stacked head-major, then one
/// softmax over the whole stack.
fn stacked_attention(q: &DenseMatrix, k: &DenseMatrix, heads: usize) -> Result<AttentionMap, AttentionError> {
    let dh = head_width(q.cols(), heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let (m, n) = (q.rows(), k.rows());
    let mut logits = DenseMatrix::zeros(heads * m, n);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..m {
            let qi = &q.row(i)[cols.clone()];
            let row = logits.row_mut(h * m + i);
            for (j, out) in row.iter_mut().enumerate() {
                *out = dot_slices(qi, &k.row(j)[cols.clone()]) * scale;
            }
        }
    }
    AttentionMap::new(heads, softmax_rows(&logits))
}

/// Per head `A_h · V_h`, heads concatenated back to width `d`.
fn aggregate(map: &AttentionMap, v: &DenseMatrix) -> Result<DenseMatrix, AttentionError> {
    let heads = map.heads();
    let dh = head_width(v.cols(), heads)?;
    if map.keys() != v.rows() {
        return Err(AttentionError::MapShape {
            expected: (map.queries(), v.rows()),
            found: (map.queries(), map.keys()),
        });
    }
    let m = map.queries();
    let mut out = DenseMatrix::zeros(m, v.cols());
    for h in 0..heads {
        for i in 0..m {
            let weights = map.stacked().row(h * m + i);
            let dst = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, s) in dst.iter_mut().zip(&v.row(j)[h * dh..(h + 1) * dh]) {
                    *o += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// One attention pass of `x` over `source` (`source = x` for self
/// attention): `f_mlp(f_p(softmax(QKᵀ/√(d/h))·V) ‖ x)`, returned as the
/// residual term together with the map.
pub fn attention_pass(
    x: &DenseMatrix,
    source: &DenseMatrix,
    branch: &BranchParams,
    heads: usize,
) -> Result<PassOutput, AttentionError> {
    let q = branch.q.forward_rows(x)?;
    let k = branch.k.forward_rows(source)?;
    let v = branch.v.forward_rows(source)?;
    let map = stacked_attention(&q, &k, heads)?;
    let msg = branch.p.forward_rows(&aggregate(&map, &v)?)?;
    let delta = branch.mlp.forward_rows(&msg.hcat(x)?)?;
    Ok(PassOutput { delta, map })
}

/// Second pass reusing a cached map with fresh value/output projections;
/// performs no softmax.
pub fn shared_attention_pass(
    x: &DenseMatrix,
    source: &DenseMatrix,
    map: &AttentionMap,
    branch: &BranchParams,
) -> Result<DenseMatrix, AttentionError> {
    if map.queries() != x.rows() || map.keys() != source.rows() {
        return Err(AttentionError::MapShape {
            expected: (x.rows(), source.rows()),
            found: (map.queries(), map.keys()),
        });
    }
    let v = branch.vbar.forward_rows(source)?;
    let msg = branch.pbar.forward_rows(&aggregate(map, &v)?)?;
    Ok(branch.mlp_shared.forward_rows(&msg.hcat(x)?)?)
}

/// Self and cross passes for both images, then the shared passes. Exactly
/// four softmax evaluations.
pub fn iteration_block(state: &AttentionState, params: &BlockParams) -> Result<AttentionState, AttentionError> {
    let (x0, y0) = (&state.x, &state.y);
    let h = params.heads;
    let xs = attention_pass(x0, x0, &params.self_branch, h)?;
    let xc = attention_pass(x0, y0, &params.cross_branch, h)?;
    let ys = attention_pass(y0, y0, &params.self_branch, h)?;
    let yc = attention_pass(y0, x0, &params.cross_branch, h)?;

    let x = x0
        .add(&xs.delta)?
        .add(&xc.delta)?
        .add(&shared_attention_pass(x0, x0, &xs.map, &params.self_branch)?)?
        .add(&shared_attention_pass(x0, y0, &xc.map, &params.cross_branch)?)?;
    let y = y0
        .add(&ys.delta)?
        .add(&yc.delta)?
        .add(&shared_attention_pass(y0, y0, &ys.map, &params.self_branch)?)?
        .add(&shared_attention_pass(y0, x0, &yc.map, &params.cross_branch)?)?;

    Ok(AttentionState {
        x,
        y,
        maps: Some(BlockMaps {
            xs: xs.map,
            xc: xc.map,
            ys: ys.map,
            yc: yc.map,
        }),
        active_x: state.active_x.clone(),
        active_y: state.active_y.clone(),
    })
}

/// Single-head maps with identity projections, used when no trained
/// weights are loaded so sampling still has attention scores. `gram` may
/// supply a precomputed `X·Yᵀ`.
pub fn parameter_free_maps(
    x: &DenseMatrix,
    y: &DenseMatrix,
    gram: Option<&DenseMatrix>,
) -> Result<BlockMaps, AttentionError> {
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let xy = match gram {
        Some(g) => g.clone(),
        None => x.matmul_transposed(y)?,
    };
    let map = |logits: DenseMatrix| AttentionMap::new(1, softmax_rows(&logits.scale(scale)));
    Ok(BlockMaps {
        xs: map(x.matmul_transposed(x)?)?,
        yc: map(xy.transpose())?,
        xc: map(xy)?,
        ys: map(y.matmul_transposed(y)?)?,
    })
}
