//! Per-frame spatial feature extractors mapping `[N, 3, H, W]` images to
//! `[N, hidden]` vectors.

use super::{Backbone, VisualEncoderConfig};
use crate::nn::{BatchNorm, Conv2d, Linear};
use crate::tensor::{Fwd, NodeId, ParamGroup, ParamStore};
use rand_chacha::ChaCha8Rng;

const GROUP: ParamGroup = ParamGroup::VisualBackbone;

/// Two strided conv-BN-ReLU blocks and a linear head; the desk-scale
/// default.
pub struct TinyConvNet {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    fc: Linear,
}

impl TinyConvNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize) -> TinyConvNet {
        let p = "visual_backbone/tiny";
        TinyConvNet {
            conv1: Conv2d::new(store, rng, &format!("{p}/conv1"), GROUP, 3, 16, 3, 2, 1, false),
            bn1: BatchNorm::new(store, &format!("{p}/bn1"), GROUP, 16),
            conv2: Conv2d::new(store, rng, &format!("{p}/conv2"), GROUP, 16, 32, 3, 2, 1, false),
            bn2: BatchNorm::new(store, &format!("{p}/bn2"), GROUP, 32),
            fc: Linear::new(store, rng, &format!("{p}/fc"), GROUP, 32, hidden, true),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let x = self.conv1.forward(f, x);
        let x = self.bn1.forward(f, x);
        let x = f.g.relu(x);
        let x = self.conv2.forward(f, x);
        let x = self.bn2.forward(f, x);
        let x = f.g.relu(x);
        let x = f.g.global_avgpool2d(x);
        self.fc.forward(f, x)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> BasicBlock {
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(store, rng, &format!("{prefix}/down"), GROUP, c_in, c_out, 1, stride, 0, false),
                BatchNorm::new(store, &format!("{prefix}/down_bn"), GROUP, c_out),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(store, rng, &format!("{prefix}/conv1"), GROUP, c_in, c_out, 3, stride, 1, false),
            bn1: BatchNorm::new(store, &format!("{prefix}/bn1"), GROUP, c_out),
            conv2: Conv2d::new(store, rng, &format!("{prefix}/conv2"), GROUP, c_out, c_out, 3, 1, 1, false),
            bn2: BatchNorm::new(store, &format!("{prefix}/bn2"), GROUP, c_out),
            down,
        }
    }

    fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let h = self.conv1.forward(f, x);
        let h = self.bn1.forward(f, h);
        let h = f.g.relu(h);
        let h = self.conv2.forward(f, h);
        let h = self.bn2.forward(f, h);
        let skip = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(f, x);
                bn.forward(f, s)
            }
            None => x,
        };
        let sum = f.g.add(h, skip);
        f.g.relu(sum)
    }
}

/// 18-layer residual topology (stem + four stages of two basic blocks) at
/// configurable width; width 64 matches the standard layout, the default
/// width 16 keeps desk-scale runs cheap.
pub struct ResidualNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

impl ResidualNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        width: usize,
        hidden: usize,
    ) -> ResidualNet {
        let p = "visual_backbone/res18";
        let stem = Conv2d::new(store, rng, &format!("{p}/stem"), GROUP, 3, width, 3, 1, 1, false);
        let stem_bn = BatchNorm::new(store, &format!("{p}/stem_bn"), GROUP, width);
        let mut blocks = Vec::new();
        let mut c_in = width;
        for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let c_out = width * mult;
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    rng,
                    &format!("{p}/s{stage}b{block}"),
                    c_in,
                    c_out,
                    stride,
                ));
                c_in = c_out;
            }
        }
        let fc = Linear::new(store, rng, &format!("{p}/fc"), GROUP, c_in, hidden, true);
        ResidualNet {
            stem,
            stem_bn,
            blocks,
            fc,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        let x = self.stem.forward(f, x);
        let x = self.stem_bn.forward(f, x);
        let mut x = f.g.relu(x);
        for b in &self.blocks {
            x = b.forward(f, x);
        }
        let x = f.g.global_avgpool2d(x);
        self.fc.forward(f, x)
    }
}

pub enum BackboneNet {
    TinyConv(TinyConvNet),
    Residual18(ResidualNet),
}

impl BackboneNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &VisualEncoderConfig) -> Self {
        match cfg.backbone {
            Backbone::TinyConv => {
                BackboneNet::TinyConv(TinyConvNet::new(store, rng, cfg.hidden_dim))
            }
            Backbone::Residual18 => BackboneNet::Residual18(ResidualNet::new(
                store,
                rng,
                cfg.residual_width,
                cfg.hidden_dim,
            )),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> NodeId {
        match self {
            BackboneNet::TinyConv(n) => n.forward(f, x),
            BackboneNet::Residual18(n) => n.forward(f, x),
        }
    }
}
