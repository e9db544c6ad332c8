//! One decoding stage: position-aware self-attention, Dyn kernel generation,
//! dynamic convolution, Out projection, FFN and detection head.

use rand::Rng;

use super::DecoderConfig;
use crate::geometry::apply_deltas_var;
use crate::nn::{LayerNorm, Linear, Mlp, ParamBuilder};
use crate::numerics::{Graph, Params, Scalar, Tensor, Var};
use crate::posenc::{kernel_pe, BoxPeHead, CenternessHead, GeometryHeads, ROI_CELLS};

/// Multi-head attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize, heads: usize) -> Self {
        b.scope("self_attn", |b| Self {
            query: b.linear("query", c, c, true),
            key: b.linear("key", c, c, true),
            value: b.linear("value", c, c, true),
            proj: b.linear("proj", c, c, true),
            heads,
        })
    }

    /// Attention with `queries = keys = x + pe` and `values = x`, `[n, c]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        x: Var<'g, T>,
        pe: Option<Var<'g, T>>,
    ) -> Var<'g, T> {
        let shape = x.shape();
        let (n, c) = (shape[0], shape[1]);
        let h = self.heads;
        let dh = c / h;
        let qk_in = match pe {
            Some(pe) => x + pe,
            None => x,
        };
        let split = |t: Var<'g, T>| t.reshape(&[n, h, dh]).permute(&[1, 0, 2]);
        let q = split(self.query.forward(g, p, qk_in));
        let k = split(self.key.forward(g, p, qk_in));
        let v = split(self.value.forward(g, p, x));
        let scores = q.bmm(k.transpose()).scale(1.0 / (dh as f64).sqrt());
        let mixed = scores.softmax().bmm(v).permute(&[1, 0, 2]).reshape(&[n, c]);
        self.proj.forward(g, p, mixed)
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.proj.num_params()
    }
}

/// `Linear (no bias) → LayerNorm → ReLU` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub blocks: Vec<(Linear, LayerNorm)>,
}

impl Tower {
    fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, name: &str, c: usize, depth: usize) -> Self {
        b.scope(name, |b| Self {
            blocks: (0..depth)
                .map(|i| (b.linear(&format!("fc{i}"), c, c, false), b.layer_norm(&format!("norm{i}"), c)))
                .collect(),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, x: Var<'g, T>) -> Var<'g, T> {
        self.blocks
            .iter()
            .fold(x, |h, (fc, norm)| norm.forward(g, p, fc.forward(g, p, h)).relu())
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|(l, n)| l.num_params() + n.num_params()).sum()
    }
}

/// Normalization inside the dynamic-convolution bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BottleneckNorm {
    /// LayerNorm over `d` after the first conv and over `c` after the second.
    Layer { hidden: LayerNorm, output: LayerNorm },
    /// No normalization (ReLU only); used to check the bare contraction.
    Identity,
}

/// Every parameter of one decoding stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub self_attn: SelfAttention,
    pub attn_norm: LayerNorm,
    /// `FC_{c → 2cd}` producing both dynamic kernels.
    pub dyn_layer: Linear,
    pub conv_norm: BottleneckNorm,
    /// `FC_{49c → c}` collapsing the 7x7 RoI.
    pub out_layer: Linear,
    pub out_norm: LayerNorm,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
    pub cls_tower: Tower,
    pub classifier: Linear,
    pub reg_tower: Tower,
    pub regressor: Linear,
    pub box_pe: Option<BoxPeHead>,
    pub geometry: Option<GeometryHeads>,
    pub centerness: Option<CenternessHead>,
}

/// Classification prior used to initialize the classifier bias.
pub const PRIOR_PROB: f64 = 0.01;
pub const CLS_TOWER_DEPTH: usize = 1;
pub const REG_TOWER_DEPTH: usize = 3;

impl StageWeights {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, cfg: &DecoderConfig) -> Self {
        let (c, d) = (cfg.c, cfg.d);
        let self_attn = SelfAttention::build(b, c, cfg.n_heads);
        let attn_norm = b.layer_norm("attn_norm", c);
        let dyn_layer = b.linear("dyn", c, 2 * c * d, true);
        let conv_norm = BottleneckNorm::Layer {
            hidden: b.layer_norm("conv_norm1", d),
            output: b.layer_norm("conv_norm2", c),
        };
        let out_layer = b.linear("out", ROI_CELLS * c, c, true);
        let out_norm = b.layer_norm("out_norm", c);
        let ffn = Mlp::build(b, "ffn", &[c, cfg.ffn_dim, c]);
        let ffn_norm = b.layer_norm("ffn_norm", c);
        let cls_tower = Tower::build(b, "cls_tower", c, CLS_TOWER_DEPTH);
        let classifier = b.scope("classifier", |b| {
            let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
            Linear {
                weight: b.xavier("weight", c, cfg.num_classes),
                bias: Some(b.tensor("bias", Tensor::full(&[cfg.num_classes], T::lit(bias)))),
                in_dim: c,
                out_dim: cfg.num_classes,
            }
        });
        let reg_tower = Tower::build(b, "reg_tower", c, REG_TOWER_DEPTH);
        let regressor = b.linear("regressor", c, 4, true);
        let (box_pe, geometry) = if cfg.use_box_pe {
            (Some(BoxPeHead::build(b, c)), Some(GeometryHeads::build(b, c)))
        } else {
            (None, None)
        };
        let centerness = cfg
            .use_centerness
            .then(|| CenternessHead::build(b, cfg.centerness_variant, c));
        Self {
            self_attn,
            attn_norm,
            dyn_layer,
            conv_norm,
            out_layer,
            out_norm,
            ffn,
            ffn_norm,
            cls_tower,
            classifier,
            reg_tower,
            regressor,
            box_pe,
            geometry,
            centerness,
        }
    }

    /// `LN(Q + MSA(Q + P, Q + P, Q))`; `P = 0` without box PE.
    pub fn self_attention_with_pe<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        q: Var<'g, T>,
        pe: Option<Var<'g, T>>,
    ) -> Var<'g, T> {
        self.attn_norm.forward(g, p, q + self.self_attn.forward(g, p, q, pe))
    }

    /// Dynamic kernels `k: [n, c, d]` and `v: [n, d, c]` from `q: [n, c]`.
    pub fn dyn_kernels<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, q: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let n = q.shape()[0];
        let c = self.dyn_layer.in_dim;
        let cd = self.dyn_layer.out_dim / 2;
        let d = cd / c;
        let y = self.dyn_layer.forward(g, p, q);
        let k = y.narrow(1, 0, cd).reshape(&[n, c, d]);
        let v = y.narrow(1, cd, cd).reshape(&[n, d, c]);
        (k, v)
    }

    /// `o = Out(flatten(f')) + q`, `[n, c]`.
    pub fn out<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, f: Var<'g, T>, q: Var<'g, T>) -> Var<'g, T> {
        let n = f.shape()[0];
        self.out_layer.forward(g, p, f.reshape(&[n, self.out_layer.in_dim])) + q
    }

    pub fn num_params(&self) -> usize {
        let norms = match self.conv_norm {
            BottleneckNorm::Layer { hidden, output } => hidden.num_params() + output.num_params(),
            BottleneckNorm::Identity => 0,
        };
        self.self_attn.num_params()
            + self.attn_norm.num_params()
            + self.dyn_layer.num_params()
            + norms
            + self.out_layer.num_params()
            + self.out_norm.num_params()
            + self.ffn.num_params()
            + self.ffn_norm.num_params()
            + self.cls_tower.num_params()
            + self.classifier.num_params()
            + self.reg_tower.num_params()
            + self.regressor.num_params()
            + self.box_pe.as_ref().map_or(0, BoxPeHead::num_params)
            + self.geometry.as_ref().map_or(0, GeometryHeads::num_params)
            + self.centerness.as_ref().map_or(0, CenternessHead::num_params)
    }
}

/// Position-aware dynamic convolution over a batch of RoIs.
///
/// `f: [n, 49, c]`, `k: [n, c, d]`, `v: [n, d, c]`; `pe` carries the
/// per-element RoI encoding `p_f: [n, 49, c]` and kernel encoding
/// `p_k: [n, c]`; `mask: [n, 49]`.
///
/// The first conv contracts `[m·f, p_f]` against `m·[k; diag(p_k)·k]`,
/// evaluated as `m · ((m·f + p_f ⊙ p_k) k)` so the `2c`-wide operands are
/// never materialized.
pub fn dynamic_conv<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Params<T>,
    f: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    pe: Option<(Var<'g, T>, Var<'g, T>)>,
    mask: Option<Var<'g, T>>,
    norm: BottleneckNorm,
) -> Var<'g, T> {
    let fs = f.shape();
    assert_eq!(fs.len(), 3, "RoI features must be [n, 49, c]");
    let (n, cells, c) = (fs[0], fs[1], fs[2]);
    assert_eq!(k.shape()[..2], [n, c], "kernel k must be [n, c, d]");
    let m = mask.map(|m| {
        assert_eq!(m.shape(), [n, cells], "mask must be [n, 49]");
        m.reshape(&[n, cells, 1])
    });
    let mut x = match m {
        Some(m) => f * m,
        None => f,
    };
    if let Some((pf, pk)) = pe {
        assert_eq!(pf.shape(), fs, "element PE must match RoI features");
        x = x + pf * pk.reshape(&[n, 1, c]);
    }
    let mut h = x.bmm(k);
    if let Some(m) = m {
        h = h * m;
    }
    match norm {
        BottleneckNorm::Layer { hidden, output } => {
            let h = hidden.forward(g, p, h).relu();
            output.forward(g, p, h.bmm(v)).relu()
        }
        BottleneckNorm::Identity => h.relu().bmm(v).relu(),
    }
}

/// Per-stage RoI input: sampled features and, with box PE, their
/// per-element encodings.
#[derive(Debug, Clone, Copy)]
pub struct StageRoi<'g, T: Scalar> {
    pub features: Var<'g, T>,
    pub element_pe: Option<Var<'g, T>>,
}

/// Outputs of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput<'g, T: Scalar> {
    /// Object features `[n, c]`, next stage's proposal features.
    pub features: Var<'g, T>,
    /// Refined boxes `[n, 4]` (center/size, normalized).
    pub boxes: Var<'g, T>,
    pub logits: Var<'g, T>,
    pub deltas: Var<'g, T>,
}

/// Runs one stage on proposal features `q: [n, c]` and boxes `[n, 4]`.
pub fn decode_stage<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Params<T>,
    w: &StageWeights,
    cfg: &DecoderConfig,
    q: Var<'g, T>,
    boxes: Var<'g, T>,
    roi: StageRoi<'g, T>,
) -> StageOutput<'g, T> {
    let n = q.shape()[0];
    let box_pe = w.box_pe.as_ref().map(|head| head.forward(g, p, boxes));
    let q1 = w.self_attention_with_pe(g, p, q, box_pe);
    let mut o = q1;
    for _ in 0..cfg.in_stage_depth {
        let (k, v) = w.dyn_kernels(g, p, o);
        let pe = match (&w.geometry, roi.element_pe) {
            (Some(heads), Some(pf)) => Some((pf, kernel_pe(g, p, heads, o, boxes))),
            _ => None,
        };
        let mask = w.centerness.as_ref().map(|head| head.mask(g, p, n, Some(o)));
        let f = dynamic_conv(g, p, roi.features, k, v, pe, mask, w.conv_norm);
        o = w.out_norm.forward(g, p, w.out(g, p, f, o));
    }
    let obj = w.ffn_norm.forward(g, p, o + w.ffn.forward(g, p, o));
    let logits = w.classifier.forward(g, p, w.cls_tower.forward(g, p, obj));
    let deltas = w.regressor.forward(g, p, w.reg_tower.forward(g, p, obj));
    StageOutput {
        features: obj,
        boxes: apply_deltas_var(boxes, deltas),
        logits,
        deltas,
    }
}
