//! Graph-level loss primitives shared by the pretraining objectives.

use super::{CicoAgg, ObjectiveError};
use crate::tensor::{Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Symmetric InfoNCE over a similarity matrix: mean cross-entropy of each
/// row against its diagonal target, averaged with the column direction.
pub fn symmetric_infonce(g: &mut Graph, sim: NodeId, tau: f64) -> NodeId {
    let n = g.shape(sim)[0];
    let scaled = g.scale(sim, 1.0 / tau);
    let mut eye = ArrayD::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        eye[[i, i]] = 1.0;
    }
    let row_lsm = g.log_softmax_last(scaled);
    let row_diag = g.mul_const(row_lsm, &eye);
    let row_sum = g.sum_all(row_diag);
    let row_loss = g.scale(row_sum, -1.0 / n as f64);

    let scaled_t = g.permute(scaled, &[1, 0]);
    let col_lsm = g.log_softmax_last(scaled_t);
    let col_diag = g.mul_const(col_lsm, &eye);
    let col_sum = g.sum_all(col_diag);
    let col_loss = g.scale(col_sum, -1.0 / n as f64);

    let total = g.add(row_loss, col_loss);
    g.scale(total, 0.5)
}

fn check_nonzero_rows(g: &Graph, x: NodeId, what: &str) -> Result<(), ObjectiveError> {
    let v = g.value(x);
    let d = *v.shape().last().unwrap();
    let rows = v.len() / d;
    let flat = v.as_slice().expect("standard layout");
    for r in 0..rows {
        let norm: f64 = flat[r * d..(r + 1) * d].iter().map(|&x| x * x).sum();
        if norm.sqrt() < 1e-12 {
            return Err(ObjectiveError::Numerical(format!(
                "{what} row {r} has zero norm"
            )));
        }
    }
    Ok(())
}

/// Paired-summary contrastive loss: cosine similarity matrix at
/// temperature `tau`, symmetric cross-entropy toward the diagonal.
pub fn clip_contrastive(
    g: &mut Graph,
    video: NodeId,
    text: NodeId,
    tau: f64,
) -> Result<NodeId, ObjectiveError> {
    let n = g.shape(video)[0];
    if n < 2 {
        return Err(ObjectiveError::DegenerateBatch(n));
    }
    check_nonzero_rows(g, video, "video summary")?;
    check_nonzero_rows(g, text, "text summary")?;
    let vn = g.normalize_last(video, 1e-12);
    let tn = g.normalize_last(text, 1e-12);
    let tnt = g.permute(tn, &[1, 0]);
    let sim = g.mm(vn, tnt);
    Ok(symmetric_infonce(g, sim, tau))
}

/// Triplet hinge between each frame, its successor, and a frame `gap`
/// steps ahead, on L2-normalized features. Returns `None` when the
/// sequence is too short for any anchor (the degenerate case).
pub fn adjacent_frame_contrastive(
    g: &mut Graph,
    feats: NodeId,
    valid_len: usize,
    margin: f64,
    gap: usize,
    mut sample_rng: Option<&mut ChaCha8Rng>,
) -> Option<NodeId> {
    assert!(gap >= 1, "gap must be positive");
    if valid_len < gap + 1 {
        return None;
    }
    let fnorm = g.normalize_last(feats, 1e-12);
    let dist = |g: &mut Graph, a: NodeId, b: NodeId| {
        let d = g.sub(a, b);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        let s = g.add_scalar(s, 1e-12);
        g.sqrt(s)
    };
    let mut hinges = Vec::new();
    for t in 0..valid_len - gap {
        let anchor = g.slice_axis(fnorm, 0, t, t + 1);
        let pos = g.slice_axis(fnorm, 0, t + 1, t + 2);
        let neg_idx = match sample_rng.as_deref_mut() {
            Some(rng) => rng.gen_range(t + gap..valid_len),
            None => t + gap,
        };
        let neg = g.slice_axis(fnorm, 0, neg_idx, neg_idx + 1);
        let d_pos = dist(g, anchor, pos);
        let d_neg = dist(g, anchor, neg);
        let diff = g.sub(d_pos, d_neg);
        let shifted = g.add_scalar(diff, margin);
        let hinge = g.relu(shifted);
        hinges.push(g.reshape(hinge, &[1]));
    }
    let all = g.concat(0, &hinges);
    Some(g.mean_all(all))
}

/// Fine-grained sequence contrastive loss: every frame is compared with
/// every token, the cosine matrix is pooled per `agg` into one similarity
/// per sample pair, and the result feeds the same symmetric InfoNCE as
/// the summary-level loss.
pub fn cico_contrastive(
    g: &mut Graph,
    video: NodeId,
    video_mask: &[Vec<f64>],
    text: NodeId,
    text_mask: &[Vec<f64>],
    tau: f64,
    agg: CicoAgg,
) -> Result<NodeId, ObjectiveError> {
    let vshape = g.shape(video).to_vec();
    let tshape = g.shape(text).to_vec();
    let n = vshape[0];
    if n < 2 {
        return Err(ObjectiveError::DegenerateBatch(n));
    }
    if tshape[0] != n {
        return Err(ObjectiveError::Numerical(format!(
            "batch mismatch: {n} video vs {} text samples",
            tshape[0]
        )));
    }
    let (tv, u, d) = (vshape[1], tshape[1], vshape[2]);
    let v_valid: Vec<f64> = video_mask.iter().map(|m| m.iter().sum()).collect();
    let t_valid: Vec<f64> = text_mask.iter().map(|m| m.iter().sum()).collect();
    if let Some(i) = v_valid.iter().position(|&c| c == 0.0) {
        return Err(ObjectiveError::Numerical(format!(
            "video sample {i} has no valid frames"
        )));
    }
    if let Some(i) = t_valid.iter().position(|&c| c == 0.0) {
        return Err(ObjectiveError::Numerical(format!(
            "text sample {i} has no valid tokens"
        )));
    }

    let vn = g.normalize_last(video, 1e-12);
    let tn = g.normalize_last(text, 1e-12);

    // Additive -inf-style bias rows blocking padded positions from the max.
    let neg = -1e9;
    let tok_bias: Vec<ArrayD<f64>> = text_mask
        .iter()
        .map(|m| {
            ArrayD::from_shape_vec(
                IxDyn(&[1, u]),
                m.iter().map(|&v| if v == 1.0 { 0.0 } else { neg }).collect(),
            )
            .unwrap()
        })
        .collect();
    let frame_bias: Vec<ArrayD<f64>> = video_mask
        .iter()
        .map(|m| {
            ArrayD::from_shape_vec(
                IxDyn(&[1, tv]),
                m.iter().map(|&v| if v == 1.0 { 0.0 } else { neg }).collect(),
            )
            .unwrap()
        })
        .collect();
    let frame_keep: Vec<ArrayD<f64>> = video_mask
        .iter()
        .map(|m| ArrayD::from_shape_vec(IxDyn(&[tv]), m.clone()).unwrap())
        .collect();
    let tok_keep: Vec<ArrayD<f64>> = text_mask
        .iter()
        .map(|m| ArrayD::from_shape_vec(IxDyn(&[u]), m.clone()).unwrap())
        .collect();
    let frame_bias_flat: Vec<ArrayD<f64>> = video_mask
        .iter()
        .map(|m| {
            ArrayD::from_shape_vec(
                IxDyn(&[tv]),
                m.iter().map(|&v| if v == 1.0 { 0.0 } else { neg }).collect(),
            )
            .unwrap()
        })
        .collect();

    let mut sims = Vec::with_capacity(n * n);
    for i in 0..n {
        let vi = g.slice_axis(vn, 0, i, i + 1);
        let vi = g.reshape(vi, &[tv, d]);
        for j in 0..n {
            let wj = g.slice_axis(tn, 0, j, j + 1);
            let wj = g.reshape(wj, &[u, d]);
            let wjt = g.permute(wj, &[1, 0]);
            let c = g.mm(vi, wjt); // [Tv, U]

            let sim = match agg {
                CicoAgg::MeanOfMax => {
                    // Video -> text: best token per valid frame, meaned.
                    let cb = g.add_const(c, &tok_bias[j]);
                    let best = g.max_last(cb); // [Tv]
                    let best = g.mul_const(best, &frame_keep[i]);
                    let sum = g.sum_all(best);
                    let s_vt = g.scale(sum, 1.0 / v_valid[i]);

                    // Text -> video: best frame per valid token, meaned.
                    let ct = g.permute(c, &[1, 0]); // [U, Tv]
                    let ctb = g.add_const(ct, &frame_bias[i]);
                    let best_t = g.max_last(ctb); // [U]
                    let best_t = g.mul_const(best_t, &tok_keep[j]);
                    let sum_t = g.sum_all(best_t);
                    let s_tv = g.scale(sum_t, 1.0 / t_valid[j]);

                    let both = g.add(s_vt, s_tv);
                    g.scale(both, 0.5)
                }
                CicoAgg::MaxOfMax => {
                    // A single global max over valid frame/token pairs;
                    // symmetric, so one pass covers both directions.
                    let cb = g.add_const(c, &tok_bias[j]);
                    let best = g.max_last(cb); // [Tv]
                    let best = g.add_const(best, &frame_bias_flat[i]);
                    g.max_last(best)
                }
            };
            sims.push(g.reshape(sim, &[1]));
        }
    }
    let flat = g.concat(0, &sims);
    let sim = g.reshape(flat, &[n, n]);
    Ok(symmetric_infonce(g, sim, tau))
}

/// Weighted sum of scalar losses.
pub fn combine(g: &mut Graph, terms: &[(NodeId, f64)]) -> NodeId {
    assert!(!terms.is_empty(), "combine needs at least one term");
    let mut total: Option<NodeId> = None;
    for &(node, w) in terms {
        let scaled = g.scale(node, w);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    total.unwrap()
}
