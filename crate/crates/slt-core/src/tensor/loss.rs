//! Fused loss heads: label-smoothed cross entropy and monotonic alignment
//! marginalization over a blank symbol (forward-backward over the extended
//! label sequence, all in f64 log space).

use super::ops::log_softmax_last_value;
use super::{dyn_shape, Graph, NodeId};
use ndarray::ArrayD;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target of length {target} cannot be emitted from {input} frames")]
    Length { input: usize, target: usize },
}

/// Alignment target for [`Graph::ctc_loss`]: label ids plus the reserved
/// blank id (conventionally 0, never a valid label).
#[derive(Debug, Clone)]
pub struct CtcTarget {
    pub labels: Vec<usize>,
    pub blank: usize,
}

impl CtcTarget {
    /// Minimum number of frames able to emit the labels: one per label plus
    /// a separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self
            .labels
            .windows(2)
            .filter(|w| w[0] == w[1])
            .count();
        self.labels.len() + repeats
    }
}

fn log_sum(acc: f64, x: f64) -> f64 {
    if acc == f64::NEG_INFINITY {
        x
    } else if x == f64::NEG_INFINITY {
        acc
    } else if acc >= x {
        acc + (x - acc).exp().ln_1p()
    } else {
        x + (acc - x).exp().ln_1p()
    }
}

impl Graph {
    /// Label-smoothed cross entropy over `[N, V]` logits.
    ///
    /// The target distribution mixes the one-hot row with the uniform
    /// distribution: `q = (1 - eps) * onehot + eps / V`. Rows with weight 0
    /// are excluded; the result is the weighted mean over the rest. Returns
    /// a zero constant when every weight is 0.
    pub fn cross_entropy_label_smooth(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
        eps: f64,
    ) -> NodeId {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross entropy expects [N, V] logits");
        let (n, v) = (shape[0], shape[1]);
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return self.scalar_const(0.0);
        }
        let logp = log_softmax_last_value(self.value(logits));
        let lp = logp.as_slice().unwrap();
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lp[i * v..(i + 1) * v];
            let row_sum: f64 = row.iter().sum();
            let li = -(1.0 - eps) * row[targets[i]] - eps / v as f64 * row_sum;
            total += weights[i] * li;
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(
            ndarray::arr0(total / wsum).into_dyn(),
            Some(Box::new(move |_g, grad, buf| {
                let gs = grad.iter().next().copied().unwrap();
                let mut d = vec![0.0; n * v];
                let lp2 = logp.as_slice().unwrap();
                for i in 0..n {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let scale = gs * weights[i] / wsum;
                    let row = &lp2[i * v..(i + 1) * v];
                    let uni = eps / v as f64;
                    for j in 0..v {
                        let q = if j == targets[i] { 1.0 - eps + uni } else { uni };
                        d[i * v + j] = scale * (row[j].exp() - q);
                    }
                }
                buf.add(
                    logits,
                    ArrayD::from_shape_vec(dyn_shape(&[n, v]), d).unwrap(),
                );
            })),
        )
    }

    /// Negative log probability of the label sequence under all monotonic
    /// blank-separated alignments of the `[T, V]` log-probability rows.
    ///
    /// The gradient with respect to the log probabilities is the negated
    /// posterior symbol occupancy from the forward-backward recursion.
    pub fn ctc_loss(&mut self, log_probs: NodeId, target: &CtcTarget) -> Result<NodeId, LossError> {
        let shape = self.shape(log_probs).to_vec();
        assert_eq!(shape.len(), 2, "ctc expects [T, V] log probabilities");
        let (t_len, v) = (shape[0], shape[1]);
        if target.min_frames() > t_len {
            return Err(LossError::Length {
                input: t_len,
                target: target.labels.len(),
            });
        }
        let blank = target.blank;
        for &l in &target.labels {
            assert!(l < v && l != blank, "label {l} invalid for vocab {v}");
        }

        // extended sequence: blank, l1, blank, l2, ..., blank
        let s_len = 2 * target.labels.len() + 1;
        let ext: Vec<usize> = (0..s_len)
            .map(|s| if s % 2 == 0 { blank } else { target.labels[s / 2] })
            .collect();
        let lp = self.value(log_probs).as_slice().unwrap();
        let at = |t: usize, sym: usize| lp[t * v + sym];

        let neg = f64::NEG_INFINITY;
        let mut alpha = vec![neg; t_len * s_len];
        alpha[0] = at(0, ext[0]);
        if s_len > 1 {
            alpha[1] = at(0, ext[1]);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let mut acc = alpha[(t - 1) * s_len + s];
                if s >= 1 {
                    acc = log_sum(acc, alpha[(t - 1) * s_len + s - 1]);
                }
                if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                    acc = log_sum(acc, alpha[(t - 1) * s_len + s - 2]);
                }
                alpha[t * s_len + s] = if acc == neg { neg } else { acc + at(t, ext[s]) };
            }
        }
        let mut log_z = alpha[(t_len - 1) * s_len + s_len - 1];
        if s_len > 1 {
            log_z = log_sum(log_z, alpha[(t_len - 1) * s_len + s_len - 2]);
        }
        if log_z == neg {
            // unreachable when min_frames fits, kept as a hard stop
            return Err(LossError::Length {
                input: t_len,
                target: target.labels.len(),
            });
        }

        // beta excludes the emission at t so alpha + beta covers each path once
        let mut beta = vec![neg; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let mut acc = beta[(t + 1) * s_len + s] + at(t + 1, ext[s]);
                if s + 1 < s_len {
                    acc = log_sum(acc, beta[(t + 1) * s_len + s + 1] + at(t + 1, ext[s + 1]));
                }
                if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                    acc = log_sum(acc, beta[(t + 1) * s_len + s + 2] + at(t + 1, ext[s + 2]));
                }
                beta[t * s_len + s] = acc;
            }
        }

        let mut occupancy = vec![0.0; t_len * v];
        for t in 0..t_len {
            for s in 0..s_len {
                let a = alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a == neg || b == neg {
                    continue;
                }
                occupancy[t * v + ext[s]] += (a + b - log_z).exp();
            }
        }

        Ok(self.push(
            ndarray::arr0(-log_z).into_dyn(),
            Some(Box::new(move |_g, grad, buf| {
                let gs = grad.iter().next().copied().unwrap();
                let d: Vec<f64> = occupancy.iter().map(|&o| -gs * o).collect();
                buf.add(
                    log_probs,
                    ArrayD::from_shape_vec(dyn_shape(&[t_len, v]), d).unwrap(),
                );
            })),
        ))
    }
}
