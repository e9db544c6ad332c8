//! Gradient checks for every learnable operation.
//!
//! Each case builds a small instance of one operation in `f64`, reduces its
//! output to a scalar with fixed random weights (so every output element
//! contributes) and compares reverse-mode gradients against central
//! differences, both for the operation's parameters and its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_param_subset, finite_difference_gradient, GradCheckReport, Graph, ParamId, Params, Tensor, Var};
use crate::decoder::{decode_stage, dynamic_conv, BottleneckNorm, DecoderConfig, Sharing, StageRoi, StageWeights};
use crate::geometry::BoxCXCYWH;
use crate::matching_loss::{set_criterion, LossWeights, Target};
use crate::nn::ParamBuilder;
use crate::pipeline::{roi_align, FeaturePyramid, PyramidLevel, MAX_LEVEL, MIN_LEVEL};
use crate::posenc::{
    kernel_pe, modulate_with_centerness, roi_element_pe, static_mask, CenternessHead, CenternessVariant, ROI_CELLS,
};

/// Central-difference step.
pub const SUITE_EPS: f64 = 1e-5;
/// Maximum relative error for a pass.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Scale of the reduction weights. Central differences carry roundoff of
/// about `ulp(f) / 2ε`; directions along which an op is exactly flat
/// (a shared key bias under softmax, a LayerNorm row reduced to one active
/// unit) have near-zero gradients, and with `|f| ~ 1` that roundoff exceeds
/// the `1e-8` relative-error floor. Keeping `|f|` small keeps it below; the
/// relative error of non-degenerate entries does not depend on the scale.
const WEIGHT_SCALE: f64 = 1e-3;

const C: usize = 8;
const D: usize = 4;
const N: usize = 3;
const IMAGE: usize = 64;

/// Decoder configuration exercising every optional module.
fn suite_config(variant: CenternessVariant) -> DecoderConfig {
    DecoderConfig {
        c: C,
        d: D,
        n_stages: 1,
        n_heads: 2,
        ffn_dim: 16,
        in_stage_depth: 2,
        sharing: Sharing::Cascade,
        use_box_pe: true,
        use_centerness: true,
        centerness_variant: variant,
        num_classes: 3,
        num_proposals: N,
        ..DecoderConfig::desk()
    }
}

struct Fixture {
    seed: u64,
    eps: f64,
    tolerance: f64,
    reports: Vec<GradCheckReport>,
}

impl Fixture {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
    }

    fn randn(&self, shape: &[usize], salt: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut self.rng(salt))
    }

    fn stage(&self, variant: CenternessVariant) -> (StageWeights, Params<f64>) {
        let mut params = Params::new();
        let mut rng = self.rng(1);
        let w = StageWeights::build(&mut ParamBuilder::new(&mut params, &mut rng), &suite_config(variant));
        // Move every parameter off its structured initial value (unit norm
        // gains, zero biases, clamp-boundary masks) to a generic point.
        let ids: Vec<_> = params.ids().collect();
        let mut rng = self.rng(2);
        for id in ids {
            let t = params.get(id).clone();
            let noise = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
            let moved = Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
                .expect("same shape");
            params.set(id, moved).expect("same shape");
        }
        (w, params)
    }

    /// Boxes well inside the image, `[N, 4]`.
    fn boxes(&self, salt: u64) -> Tensor<f64> {
        let u = Tensor::uniform(&[N, 4], 0.0, 1.0, &mut self.rng(salt));
        let data = u
            .data()
            .chunks(4)
            .flat_map(|r: &[f64]| [0.3 + 0.4 * r[0], 0.3 + 0.4 * r[1], 0.2 + 0.3 * r[2], 0.2 + 0.3 * r[3]])
            .collect();
        Tensor::new(&[N, 4], data).expect("box extent")
    }

    /// `Σ y ⊙ W` with `W ~ N(0, WEIGHT_SCALE² / |y|)` fixed by the output
    /// shape, so `f` stays near `WEIGHT_SCALE` whatever the output size.
    fn weigh<'g>(&self, g: &'g Graph<f64>, y: Var<'g, f64>) -> Var<'g, f64> {
        let shape = y.shape();
        let salt = shape.iter().fold(17u64, |h, &s| h.wrapping_mul(31).wrapping_add(s as u64));
        let numel: usize = shape.iter().product();
        let w = Tensor::randn(&shape, WEIGHT_SCALE / (numel as f64).sqrt(), &mut self.rng(salt));
        (y * g.constant(w)).sum()
    }

    fn params<F>(&mut self, name: &str, params: &Params<f64>, prefixes: &[&str], f: F)
    where
        F: for<'g> Fn(&'g Graph<f64>, &Params<f64>) -> Var<'g, f64>,
    {
        let ids = with_prefix(params, prefixes);
        assert!(!ids.is_empty(), "{name}: no parameters match {prefixes:?}");
        let report = check_param_subset(name, params, &ids, |g, p| self.weigh(g, f(g, p)), self.eps, self.tolerance);
        self.reports.push(report);
    }

    fn input<F>(&mut self, name: &str, point: &Tensor<f64>, f: F)
    where
        F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
    {
        let report = finite_difference_gradient(name, |g, x| self.weigh(g, f(g, x)), point, self.eps, self.tolerance);
        self.reports.push(report);
    }
}

fn with_prefix(params: &Params<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    params
        .iter()
        .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(id, _, _)| id)
        .collect()
}

fn pyramid<'g>(g: &'g Graph<f64>, levels: &[Tensor<f64>]) -> FeaturePyramid<'g, f64> {
    FeaturePyramid {
        levels: (MIN_LEVEL..=MAX_LEVEL)
            .zip(levels)
            .map(|(level, t)| PyramidLevel {
                features: g.constant(t.clone()),
                level,
            })
            .collect(),
        image_height: IMAGE,
        image_width: IMAGE,
    }
}

fn modulated<'g>(g: &'g Graph<f64>, f: Var<'g, f64>, k: Var<'g, f64>, m: Var<'g, f64>) -> Var<'g, f64> {
    let (fm, ke) = modulate_with_centerness(f, k, m);
    g.concat(&[fm.reshape(&[ROI_CELLS * C]), ke.reshape(&[ROI_CELLS * C * D])], 0)
}

fn dyn_out<'g>(w: &StageWeights, g: &'g Graph<f64>, p: &Params<f64>, x: Var<'g, f64>) -> Var<'g, f64> {
    let (k, v) = w.dyn_kernels(g, p, x);
    g.concat(&[k.reshape(&[N * C * D]), v.reshape(&[N * D * C])], 0)
}

/// Dynamic convolution over fixed `inputs` (features, k, v, element PE,
/// kernel PE, mask), with input `slot` replaced by a variable.
fn conv<'g>(
    g: &'g Graph<f64>,
    p: &Params<f64>,
    w: &StageWeights,
    inputs: &[&Tensor<f64>; 6],
    slot: Option<(usize, Var<'g, f64>)>,
) -> Var<'g, f64> {
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| match slot {
            Some((j, x)) if i == j => x,
            _ => g.constant((*t).clone()),
        })
        .collect();
    dynamic_conv(g, p, vars[0], vars[1], vars[2], Some((vars[3], vars[4])), Some(vars[5]), w.conv_norm)
}

struct LossCase<'a> {
    w: &'a StageWeights,
    cfg: &'a DecoderConfig,
    target: &'a Target,
    features: &'a Tensor<f64>,
    element_pe: &'a Tensor<f64>,
}

impl LossCase<'_> {
    fn loss<'g>(&self, g: &'g Graph<f64>, p: &Params<f64>, q: Var<'g, f64>, boxes: Var<'g, f64>) -> Var<'g, f64> {
        let roi = StageRoi {
            features: g.constant(self.features.clone()),
            element_pe: Some(g.constant(self.element_pe.clone())),
        };
        let out = decode_stage(g, p, self.w, self.cfg, q, boxes, roi);
        let (loss, _, _) = set_criterion(&[out], self.target, &LossWeights::default()).expect("finite costs");
        loss
    }
}

/// Seed used when none is given.
pub const DEFAULT_SUITE_SEED: u64 = 7;

/// Runs every case at the standard step and tolerance.
///
/// Sample points are random, so an occasional seed lands within `ε` of a
/// ReLU or min/max breakpoint, where central differences average two
/// one-sided slopes and the case fails without any gradient being wrong.
pub fn run_gradient_suite(seed: u64) -> Vec<GradCheckReport> {
    run_gradient_suite_with(seed, SUITE_EPS, SUITE_TOLERANCE)
}

pub fn run_gradient_suite_with(seed: u64, eps: f64, tolerance: f64) -> Vec<GradCheckReport> {
    let mut fx = Fixture {
        seed,
        eps,
        tolerance,
        reports: Vec::new(),
    };
    let (w, params) = fx.stage(CenternessVariant::Adjust);
    let q = fx.randn(&[N, C], 10);
    let boxes = fx.boxes(11);

    // Box positional encoding.
    let head = w.box_pe.clone().expect("box PE enabled");
    fx.params("box_pe", &params, &["box_pe."], |g, p| head.forward(g, p, g.constant(boxes.clone())));
    fx.input("box_pe.boxes", &boxes, |g, b| head.forward(g, &params, b));

    // Kernel positional encoding.
    let geo = w.geometry.clone().expect("geometry heads enabled");
    fx.params("kernel_pe", &params, &["mlp_c.", "mlp_s."], |g, p| {
        kernel_pe(g, p, &geo, g.constant(q.clone()), g.constant(boxes.clone()))
    });
    fx.input("kernel_pe.features", &q, |g, x| kernel_pe(g, &params, &geo, x, g.constant(boxes.clone())));
    fx.input("kernel_pe.boxes", &boxes, |g, b| kernel_pe(g, &params, &geo, g.constant(q.clone()), b));

    // Centerness modulation of one RoI, for every mask flavour.
    let f1 = fx.randn(&[ROI_CELLS, C], 12);
    let k1 = fx.randn(&[C, D], 13);
    let mask = static_mask::<f64>();
    fx.input("centerness_static.features", &f1, |g, f| {
        modulated(g, f, g.constant(k1.clone()), g.constant(mask.clone()))
    });
    fx.input("centerness_static.kernel", &k1, |g, k| {
        modulated(g, g.constant(f1.clone()), k, g.constant(mask.clone()))
    });
    let (wl, pl) = fx.stage(CenternessVariant::Learnable);
    let learnable = wl.centerness.clone().expect("centerness enabled");
    fx.params("centerness_learnable", &pl, &["centerness."], |g, p| {
        let m = learnable.mask(g, p, 1, None);
        modulated(g, g.constant(f1.clone()), g.constant(k1.clone()), m)
    });
    let adjust = w.centerness.clone().expect("centerness enabled");
    debug_assert!(matches!(adjust, CenternessHead::Adjust { .. }));
    fx.params("centerness_adjust", &params, &["centerness."], |g, p| {
        adjust.mask(g, p, N, Some(g.constant(q.clone())))
    });
    fx.input("centerness_adjust.features", &q, |g, x| adjust.mask(g, &params, N, Some(x)));

    // Dyn: kernel generation from proposal features.
    fx.params("dyn", &params, &["dyn."], |g, p| dyn_out(&w, g, p, g.constant(q.clone())));
    fx.input("dyn.features", &q, |g, x| dyn_out(&w, g, &params, x));

    // Position-aware dynamic convolution with centerness mask.
    let f = fx.randn(&[N, ROI_CELLS, C], 14);
    let k = fx.randn(&[N, C, D], 15).map(|v| v * 0.5);
    let v = fx.randn(&[N, D, C], 16).map(|v| v * 0.5);
    let pf = fx.randn(&[N, ROI_CELLS, C], 17);
    let pk = fx.randn(&[N, C], 18);
    let m = Tensor::uniform(&[N, ROI_CELLS], 0.1, 0.9, &mut fx.rng(19));
    let inputs = [&f, &k, &v, &pf, &pk, &m];
    fx.params("dynamic_conv", &params, &["conv_norm"], |g, p| conv(g, p, &w, &inputs, None));
    let names = ["features", "kernel_k", "kernel_v", "element_pe", "kernel_pe", "mask"];
    for (i, (name, t)) in names.iter().zip(inputs).enumerate() {
        fx.input(&format!("dynamic_conv.{name}"), t, |g, x| conv(g, &params, &w, &inputs, Some((i, x))));
    }
    fx.input("dynamic_conv.no_norm", &f, |g, x| {
        dynamic_conv(
            g,
            &params,
            x,
            g.constant(k.clone()),
            g.constant(v.clone()),
            None,
            None,
            BottleneckNorm::Identity,
        )
    });

    // Out: flatten and project the convolved RoI.
    let fo = fx.randn(&[N, ROI_CELLS, C], 20);
    fx.params("out", &params, &["out."], |g, p| w.out(g, p, g.constant(fo.clone()), g.constant(q.clone())));
    fx.input("out.features", &fo, |g, x| w.out(g, &params, x, g.constant(q.clone())));

    // Position-aware multi-head self-attention with its residual norm.
    let pe = fx.randn(&[N, C], 21);
    fx.params("self_attention", &params, &["self_attn.", "attn_norm."], |g, p| {
        w.self_attention_with_pe(g, p, g.constant(q.clone()), Some(g.constant(pe.clone())))
    });
    fx.input("self_attention.features", &q, |g, x| {
        w.self_attention_with_pe(g, &params, x, Some(g.constant(pe.clone())))
    });
    fx.input("self_attention.pe", &pe, |g, x| w.self_attention_with_pe(g, &params, g.constant(q.clone()), Some(x)));

    // RoI Align over a four-level pyramid.
    let levels: Vec<_> = (MIN_LEVEL..=MAX_LEVEL)
        .map(|l| fx.randn(&[IMAGE >> l, IMAGE >> l, C], 30 + l as u64))
        .collect();
    let routed: Vec<_> = [[0.5, 0.5, 0.9, 0.8], [0.3, 0.6, 0.2, 0.25], [0.7, 0.3, 0.1, 0.12]]
        .map(BoxCXCYWH::from_f64)
        .to_vec();
    for (i, level) in levels.iter().enumerate() {
        let name = format!("roi_align.level{}", MIN_LEVEL + i);
        fx.input(&name, level, |g, x| {
            let mut pyr = pyramid(g, &levels);
            pyr.levels[i].features = x;
            roi_align(&pyr, &routed, 2).features
        });
    }

    // Full per-stage set loss: attention, Dyn/dynamic conv/Out twice,
    // FFN, heads, box refinement, matching and focal + L1 + GIoU.
    let cfg = suite_config(CenternessVariant::Adjust);
    let target = Target {
        classes: vec![0, 2],
        boxes: vec![BoxCXCYWH::new(0.4, 0.45, 0.3, 0.35), BoxCXCYWH::new(0.65, 0.6, 0.2, 0.25)],
    };
    let roi_feats = fx.randn(&[N, ROI_CELLS, C], 40);
    let centers: Vec<[f64; 2]> = Tensor::uniform(&[N * ROI_CELLS, 2], 0.0, 1.0, &mut fx.rng(41))
        .data()
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect();
    let element_pe = roi_element_pe(&centers, C);
    let ctx = LossCase {
        w: &w,
        cfg: &cfg,
        target: &target,
        features: &roi_feats,
        element_pe: &element_pe,
    };
    fx.params("stage_loss", &params, &[""], |g, p| {
        ctx.loss(g, p, g.constant(q.clone()), g.constant(boxes.clone()))
    });
    fx.input("stage_loss.features", &q, |g, x| ctx.loss(g, &params, x, g.constant(boxes.clone())));
    fx.input("stage_loss.boxes", &boxes, |g, b| ctx.loss(g, &params, g.constant(q.clone()), b));
    fx.reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let reports = run_gradient_suite(7);
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        let mut names: Vec<_> = reports.iter().map(|r| r.op_name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), reports.len(), "duplicate case names");
    }
}
