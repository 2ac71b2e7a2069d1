//! Layers over the autodiff tape.
//!
//! Layers own [`ParamId`]s, not values; values live in the shared
//! [`ParamStore`] so checkpointing and partial loading can work on named
//! groups. Construction order is fixed by the callers, which keeps
//! initialization bit-reproducible for a given seed.

use crate::tensor::{Fwd, NodeId, ParamGroup, ParamId, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NEG_BIAS: f64 = -1e9;

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{prefix}/w"),
            group,
            xavier(&[d_in, d_out], d_in, d_out, rng),
            true,
        );
        let b = bias.then(|| {
            store.add(
                format!("{prefix}/b"),
                group,
                ArrayD::zeros(IxDyn(&[d_out])),
                true,
            )
        });
        Linear { w, b, d_in, d_out }
    }

    /// Apply to `[..., d_in]`, returning `[..., d_out]`.
    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let shape = f.g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.d_in, "linear input width");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = f.g.reshape(x, &[rows, self.d_in]);
        let w = f.p(self.w);
        let mut y = f.g.mm(flat, w);
        if let Some(b) = self.b {
            let b = f.p(b);
            y = f.g.add_bias(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        f.g.reshape(y, &out_shape)
    }
}

pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(
            format!("{prefix}/table"),
            group,
            uniform(&[vocab, dim], 0.1, rng),
            true,
        );
        Embedding { table, dim }
    }

    pub fn forward(&self, f: &mut Fwd, ids: &[usize], shape: &[usize]) -> NodeId {
        let table = f.p(self.table);
        f.g.embedding(ids, shape, table)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(
            format!("{prefix}/gamma"),
            group,
            ArrayD::ones(IxDyn(&[dim])),
            true,
        );
        let beta = store.add(
            format!("{prefix}/beta"),
            group,
            ArrayD::zeros(IxDyn(&[dim])),
            true,
        );
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        f.g.layer_norm(x, gamma, beta, self.eps)
    }
}

pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{prefix}/w"),
            group,
            kaiming(&[c_out, c_in, k], c_in * k, rng),
            true,
        );
        let b = bias.then(|| {
            store.add(
                format!("{prefix}/b"),
                group,
                ArrayD::zeros(IxDyn(&[c_out])),
                true,
            )
        });
        Conv1d { w, b, pad: (k - 1) / 2 }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.conv1d(x, w, b, self.pad)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{prefix}/w"),
            group,
            kaiming(&[c_out, c_in, k, k], c_in * k * k, rng),
            true,
        );
        let b = bias.then(|| {
            store.add(
                format!("{prefix}/b"),
                group,
                ArrayD::zeros(IxDyn(&[c_out])),
                true,
            )
        });
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with running statistics kept as non-trainable store
/// buffers so they ride along in checkpoints.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(
            format!("{prefix}/gamma"),
            group,
            ArrayD::ones(IxDyn(&[dim])),
            true,
        );
        let beta = store.add(
            format!("{prefix}/beta"),
            group,
            ArrayD::zeros(IxDyn(&[dim])),
            true,
        );
        let running_mean = store.add(
            format!("{prefix}/running_mean"),
            group,
            ArrayD::zeros(IxDyn(&[dim])),
            false,
        );
        let running_var = store.add(
            format!("{prefix}/running_var"),
            group,
            ArrayD::ones(IxDyn(&[dim])),
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        // A frozen layer acts as a fixed feature extractor: it normalizes
        // with its stored statistics and leaves them untouched, keeping
        // every parameter of a frozen group bit-identical across a stage.
        let frozen = f.store.get(self.gamma).frozen;
        if f.train() && !frozen {
            let (y, mean, var) = f.g.batch_norm_train(x, gamma, beta, self.eps);
            let m = self.momentum;
            {
                let rm = f.store.value_mut(self.running_mean).as_slice_mut().unwrap();
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            {
                let rv = f.store.value_mut(self.running_var).as_slice_mut().unwrap();
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            y
        } else {
            let mean = f.store.value(self.running_mean).as_slice().unwrap().to_vec();
            let var = f.store.value(self.running_var).as_slice().unwrap().to_vec();
            f.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide evenly across heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{prefix}/wq"), group, dim, dim, true),
            wk: Linear::new(store, rng, &format!("{prefix}/wk"), group, dim, dim, true),
            wv: Linear::new(store, rng, &format!("{prefix}/wv"), group, dim, dim, true),
            wo: Linear::new(store, rng, &format!("{prefix}/wo"), group, dim, dim, true),
            heads,
            dim,
            dropout,
        }
    }

    /// `q_in [B, Lq, D]`, `kv_in [B, Lk, D]`, additive `bias [B, Lq, Lk]`
    /// (0 to attend, large negative to block).
    pub fn forward(
        &self,
        f: &mut Fwd,
        q_in: NodeId,
        kv_in: NodeId,
        bias: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let (b, lq, d) = {
            let s = f.g.shape(q_in);
            (s[0], s[1], s[2])
        };
        let lk = f.g.shape(kv_in)[1];
        assert_eq!(d, self.dim);
        let h = self.heads;
        let dk = d / h;

        let q = self.wq.forward(f, q_in);
        let k = self.wk.forward(f, kv_in);
        let v = self.wv.forward(f, kv_in);

        // [B, L, D] -> [B*H, L, dk]
        let split = |f: &mut Fwd, x: NodeId, l: usize| {
            let x = f.g.reshape(x, &[b, l, h, dk]);
            let x = f.g.permute(x, &[0, 2, 1, 3]);
            f.g.reshape(x, &[b * h, l, dk])
        };
        let q = split(f, q, lq);
        let k = split(f, k, lk);
        let v = split(f, v, lk);

        let kt = f.g.permute(k, &[0, 2, 1]);
        let scores = f.g.bmm(q, kt);
        let mut scores = f.g.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), &[b, lq, lk]);
            // expand over heads: [B, Lq, Lk] -> [B*H, Lq, Lk]
            let expanded = bias
                .clone()
                .insert_axis(ndarray::Axis(1))
                .broadcast(IxDyn(&[b, h, lq, lk]))
                .unwrap()
                .to_owned()
                .into_shape_with_order(IxDyn(&[b * h, lq, lk]))
                .unwrap();
            scores = f.g.add_const(scores, &expanded);
        }
        let attn = f.g.softmax_last(scores);
        let attn = f.g.dropout(attn, self.dropout, &mut f.rng);
        let ctx = f.g.bmm(attn, v);
        let ctx = f.g.reshape(ctx, &[b, h, lq, dk]);
        let ctx = f.g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = f.g.reshape(ctx, &[b, lq, d]);
        self.wo.forward(f, ctx)
    }
}

pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{prefix}/lin1"), group, dim, hidden, true),
            lin2: Linear::new(store, rng, &format!("{prefix}/lin2"), group, hidden, dim, true),
            dropout,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let h = self.lin1.forward(f, x);
        let h = f.g.relu(h);
        let h = f.g.dropout(h, self.dropout, &mut f.rng);
        self.lin2.forward(f, h)
    }
}

/// Pre-norm transformer encoder layer.
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{prefix}/ln1"), group, dim),
            attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}/attn"),
                group,
                dim,
                heads,
                dropout,
            ),
            ln2: LayerNorm::new(store, &format!("{prefix}/ln2"), group, dim),
            ff: FeedForward::new(store, rng, &format!("{prefix}/ff"), group, dim, ff_hidden, dropout),
            dropout,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId, bias: Option<&ArrayD<f64>>) -> NodeId {
        let normed = self.ln1.forward(f, x);
        let a = self.attn.forward(f, normed, normed, bias);
        let a = f.g.dropout(a, self.dropout, &mut f.rng);
        let x = f.g.add(x, a);
        let normed = self.ln2.forward(f, x);
        let h = self.ff.forward(f, normed);
        let h = f.g.dropout(h, self.dropout, &mut f.rng);
        f.g.add(x, h)
    }
}

/// Pre-norm transformer decoder layer with causal self-attention and
/// cross-attention over encoder memory.
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(store, &format!("{prefix}/ln1"), group, dim),
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}/self_attn"),
                group,
                dim,
                heads,
                dropout,
            ),
            ln2: LayerNorm::new(store, &format!("{prefix}/ln2"), group, dim),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{prefix}/cross_attn"),
                group,
                dim,
                heads,
                dropout,
            ),
            ln3: LayerNorm::new(store, &format!("{prefix}/ln3"), group, dim),
            ff: FeedForward::new(store, rng, &format!("{prefix}/ff"), group, dim, ff_hidden, dropout),
            dropout,
        }
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        x: NodeId,
        memory: NodeId,
        self_bias: &ArrayD<f64>,
        cross_bias: Option<&ArrayD<f64>>,
    ) -> NodeId {
        let normed = self.ln1.forward(f, x);
        let a = self.self_attn.forward(f, normed, normed, Some(self_bias));
        let a = f.g.dropout(a, self.dropout, &mut f.rng);
        let x = f.g.add(x, a);
        let normed = self.ln2.forward(f, x);
        let c = self.cross_attn.forward(f, normed, memory, cross_bias);
        let c = f.g.dropout(c, self.dropout, &mut f.rng);
        let x = f.g.add(x, c);
        let normed = self.ln3.forward(f, x);
        let h = self.ff.forward(f, normed);
        let h = f.g.dropout(h, self.dropout, &mut f.rng);
        f.g.add(x, h)
    }
}

/// Learned positional embeddings added to a `[B, L, D]` sequence.
pub struct PosEmbedding {
    pub table: ParamId,
    pub max_positions: usize,
}

impl PosEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: ParamGroup,
        max_positions: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(
            format!("{prefix}/pos"),
            group,
            uniform(&[max_positions, dim], 0.02, rng),
            true,
        );
        PosEmbedding { table, max_positions }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let (b, l) = {
            let s = f.g.shape(x);
            (s[0], s[1])
        };
        assert!(
            l <= self.max_positions,
            "sequence length {l} exceeds max positions {}",
            self.max_positions
        );
        let ids: Vec<usize> = (0..l).collect();
        let table = f.p(self.table);
        let pos = f.g.embedding(&ids, &[l], table);
        let pos = {
            let d = f.g.shape(pos)[1];
            f.g.reshape(pos, &[1, l, d])
        };
        let pos = f.g.tile0(pos, b);
        f.g.add(x, pos)
    }
}

/// Additive attention bias blocking padded key positions.
///
/// `mask[b][t] = 1.0` for real tokens, `0.0` for padding; the result is
/// `[B, Lq, Lk]` with `NEG_BIAS` wherever the key is padding.
pub fn padding_bias(mask: &[Vec<f64>], lq: usize) -> ArrayD<f64> {
    let b = mask.len();
    let lk = mask[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[b, lq, lk]));
    for (bi, row) in mask.iter().enumerate() {
        assert_eq!(row.len(), lk);
        for (ki, &m) in row.iter().enumerate() {
            if m == 0.0 {
                for qi in 0..lq {
                    out[[bi, qi, ki]] = NEG_BIAS;
                }
            }
        }
    }
    out
}

/// Causal plus padding bias for decoder self-attention: position `q` may
/// attend keys `<= q` that are not padding.
pub fn causal_bias(mask: &[Vec<f64>]) -> ArrayD<f64> {
    let b = mask.len();
    let l = mask[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[b, l, l]));
    for (bi, row) in mask.iter().enumerate() {
        for qi in 0..l {
            for ki in 0..l {
                if ki > qi || row[ki] == 0.0 {
                    out[[bi, qi, ki]] = NEG_BIAS;
                }
            }
        }
    }
    out
}

/// Multiplicative `[B, T, 1]`-broadcastable mask zeroing padded time steps
/// of a `[B, T, D]` feature tensor.
pub fn feature_mask(mask: &[Vec<f64>]) -> ArrayD<f64> {
    let b = mask.len();
    let t = mask[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[b, t, 1]));
    for (bi, row) in mask.iter().enumerate() {
        for (ti, &m) in row.iter().enumerate() {
            out[[bi, ti, 0]] = m;
        }
    }
    out
}

/// Channel-layout variant: `[B, 1, T]` for `[B, C, T]` feature tensors.
pub fn channel_mask(mask: &[Vec<f64>]) -> ArrayD<f64> {
    let b = mask.len();
    let t = mask[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[b, 1, t]));
    for (bi, row) in mask.iter().enumerate() {
        for (ti, &m) in row.iter().enumerate() {
            out[[bi, 0, ti]] = m;
        }
    }
    out
}

/// Mask after a kernel-2 stride-2 ceil-mode pool: a pooled step is valid
/// when either source step was valid.
pub fn pool_mask(mask: &[Vec<f64>]) -> Vec<Vec<f64>> {
    mask.iter()
        .map(|row| {
            row.chunks(2)
                .map(|c| if c.iter().any(|&m| m > 0.0) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}
