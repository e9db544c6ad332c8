//! Positional encodings: sinusoidal embeddings, the box PE used in
//! self-attention, the kernel PE and per-element RoI PE used in dynamic
//! convolution, and the 7x7 centerness mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Linear, Mlp, ParamBuilder};
use crate::numerics::{Graph, ParamId, Params, Scalar, Tensor, Var, DIV_EPS};

/// Side of the RoI grid.
pub const ROI_SIZE: usize = 7;
pub const ROI_CELLS: usize = ROI_SIZE * ROI_SIZE;
/// Largest center shift predicted by the `adjust` centerness variant, in grid cells.
pub const MAX_CENTER_SHIFT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidalConfig {
    pub embed_dim: usize,
    pub temperature: f64,
}

impl SinusoidalConfig {
    pub fn new(embed_dim: usize) -> Self {
        assert!(
            embed_dim > 0 && embed_dim % 2 == 0,
            "sinusoidal width must be even and positive, got {embed_dim}"
        );
        Self {
            embed_dim,
            temperature: 10_000.0,
        }
    }

    /// Angular frequency of pair `i`: `2π / T^(2i/D)`.
    pub fn frequency(&self, i: usize) -> f64 {
        std::f64::consts::TAU / self.temperature.powf(2.0 * i as f64 / self.embed_dim as f64)
    }

    fn frequencies<T: Scalar>(&self) -> Tensor<T> {
        let half = self.embed_dim / 2;
        Tensor::new(&[1, half], (0..half).map(|i| T::lit(self.frequency(i))).collect())
            .expect("frequency row")
    }
}

/// Interleaved `[sin(v ω_0), cos(v ω_0), sin(v ω_1), ...]`.
pub fn sinusoidal_embed<T: Scalar>(value: T, cfg: SinusoidalConfig) -> Vec<T> {
    let freqs: Vec<T> = (0..cfg.embed_dim / 2).map(|i| T::lit(cfg.frequency(i))).collect();
    let mut out = Vec::with_capacity(cfg.embed_dim);
    embed_into(value, &freqs, &mut out);
    out
}

fn embed_into<T: Scalar>(value: T, freqs: &[T], out: &mut Vec<T>) {
    for &w in freqs {
        let a = value * w;
        out.extend([a.sin(), a.cos()]);
    }
}

/// Recorded embedding of an `[n, 1]` column of values, shape `[n, D]`.
pub fn sinusoidal_var<'g, T: Scalar>(values: Var<'g, T>, cfg: SinusoidalConfig) -> Var<'g, T> {
    let g = values.graph();
    let n = values.shape()[0];
    let half = cfg.embed_dim / 2;
    let angles = values * g.constant(cfg.frequencies());
    let s = angles.sin().reshape(&[n, half, 1]);
    let c = angles.cos().reshape(&[n, half, 1]);
    g.concat(&[s, c], 2).reshape(&[n, cfg.embed_dim])
}

/// Concatenated `[sin-embed(x), sin-embed(y)]` for `[n, 2]` points, width `c`.
pub fn point_embedding<T: Scalar>(points: &[[T; 2]], c: usize) -> Tensor<T> {
    let cfg = SinusoidalConfig::new(c / 2);
    let freqs: Vec<T> = (0..cfg.embed_dim / 2).map(|i| T::lit(cfg.frequency(i))).collect();
    let mut data = Vec::with_capacity(points.len() * c);
    for p in points {
        embed_into(p[0], &freqs, &mut data);
        embed_into(p[1], &freqs, &mut data);
    }
    Tensor::new(&[points.len(), c], data).expect("point embedding extent")
}

/// Per-element RoI encoding from the global sample centers of each RoI
/// grid, `[n, 49, c]`. `centers` holds `49` points per RoI.
pub fn roi_element_pe<T: Scalar>(centers: &[[T; 2]], c: usize) -> Tensor<T> {
    assert_eq!(centers.len() % ROI_CELLS, 0, "centers must come in 7x7 grids");
    let n = centers.len() / ROI_CELLS;
    point_embedding(centers, c)
        .reshape(&[n, ROI_CELLS, c])
        .expect("roi pe extent")
}

/// MLP turning a box into the PE vector added to attention queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPeHead {
    pub mlp: Mlp,
    pub c: usize,
}

impl BoxPeHead {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize) -> Self {
        assert!(c % 4 == 0, "box PE width must be divisible by 4, got {c}");
        Self {
            mlp: Mlp::build(b, "box_pe", &[2 * c, c, c]),
            c,
        }
    }

    /// `[n, 4]` center/size boxes to `[n, c]`.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, boxes: Var<'g, T>) -> Var<'g, T> {
        let cfg = SinusoidalConfig::new(self.c / 2);
        let parts: Vec<_> = (0..4)
            .map(|i| sinusoidal_var(boxes.narrow(1, i, 1), cfg))
            .collect();
        self.mlp.forward(g, p, g.concat(&parts, 1))
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }
}

/// `MLP_c` (center features) and `MLP_s` (reference width/height) heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryHeads {
    pub center: Mlp,
    pub shape: Mlp,
    pub c: usize,
}

impl GeometryHeads {
    pub fn build<T: Scalar, R: Rng>(b: &mut ParamBuilder<'_, T, R>, c: usize) -> Self {
        assert!(c % 4 == 0, "kernel PE width must be divisible by 4, got {c}");
        Self {
            center: Mlp::build(b, "mlp_c", &[c, c, c]),
            shape: Mlp::build(b, "mlp_s", &[c, c / 4, 2]),
            c,
        }
    }

    /// `q_c` as `[n, c]`, first half for x and second half for y.
    pub fn center_features<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, q: Var<'g, T>) -> Var<'g, T> {
        self.center.forward(g, p, q)
    }

    /// `q_s = [w_ref, h_ref]`, strictly positive, `[n, 2]`.
    pub fn reference_size<'g, T: Scalar>(&self, g: &'g Graph<T>, p: &Params<T>, q: Var<'g, T>) -> Var<'g, T> {
        self.shape.forward(g, p, q).softplus()
    }

    pub fn num_params(&self) -> usize {
        self.center.num_params() + self.shape.num_params()
    }
}

/// Kernel PE `p_k = [w_ref/w · Sin(x) ⊙ q_{c,x}, h_ref/h · Sin(y) ⊙ q_{c,y}]`,
/// shape `[n, c]`, for proposal features `q: [n, c]` and boxes `[n, 4]`.
///
/// Sizes are floored at `DIV_EPS` rather than offset by it, which keeps the
/// map exactly homogeneous of degree -1 in `w` and `h`.
pub fn kernel_pe<'g, T: Scalar>(
    g: &'g Graph<T>,
    p: &Params<T>,
    heads: &GeometryHeads,
    q: Var<'g, T>,
    boxes: Var<'g, T>,
) -> Var<'g, T> {
    let c = heads.c;
    let half = c / 2;
    let cfg = SinusoidalConfig::new(half);
    let qc = heads.center_features(g, p, q);
    let qs = heads.reference_size(g, p, q);
    let floor = g.scalar(DIV_EPS);
    let axis = |coord: usize, size: usize, slot: usize| {
        let pos = sinusoidal_var(boxes.narrow(1, coord, 1), cfg);
        let ratio = qs.narrow(1, slot, 1) / boxes.narrow(1, size, 1).maximum(floor);
        ratio * pos * qc.narrow(1, slot * half, half)
    };
    g.concat(&[axis(0, 2, 0), axis(1, 3, 1)], 1)
}

/// Centerness mask flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenternessVariant {
    /// Fixed mask, identical for every proposal.
    Static,
    /// Trainable 7x7 map initialized to the static mask.
    Learnable,
    /// Static formula re-centred on a peak predicted from the proposal feature.
    Adjust,
}

impl std::str::FromStr for CenternessVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Self::Static),
            "learnable" => Ok(Self::Learnable),
            "adjust" => Ok(Self::Adjust),
            other => Err(format!("unknown centerness variant `{other}`")),
        }
    }
}

/// `m(x*, y*) = sqrt(min(x*, 6-x*)/max(x*, 6-x*) · min(y*, 6-y*)/max(y*, 6-y*))`.
pub fn static_centerness(x: usize, y: usize) -> f64 {
    let last = (ROI_SIZE - 1) as f64;
    let ratio = |v: usize| {
        let v = v as f64;
        v.min(last - v) / v.max(last - v)
    };
    (ratio(x) * ratio(y)).sqrt()
}

/// Static mask as a row-major `[7, 7]` grid indexed `[y*, x*]`.
pub fn static_mask<T: Scalar>() -> Tensor<T> {
    let mut t = Tensor::zeros(&[ROI_SIZE, ROI_SIZE]);
    for y in 0..ROI_SIZE {
        for x in 0..ROI_SIZE {
            t.set(&[y, x], T::lit(static_centerness(x, y)));
        }
    }
    t
}

/// Learned state backing the non-static centerness variants.
#[derive(Debug, Clone, PartialEq)]
pub enum CenternessHead {
    Static,
    Learnable { mask: ParamId },
    Adjust { offset: Linear },
}

impl CenternessHead {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        variant: CenternessVariant,
        c: usize,
    ) -> Self {
        match variant {
            CenternessVariant::Static => Self::Static,
            CenternessVariant::Learnable => Self::Learnable {
                mask: b.tensor("centerness.mask", static_mask()),
            },
            CenternessVariant::Adjust => Self::Adjust {
                offset: b.linear("centerness.offset", c, 2, true),
            },
        }
    }

    pub fn variant(&self) -> CenternessVariant {
        match self {
            Self::Static => CenternessVariant::Static,
            Self::Learnable { .. } => CenternessVariant::Learnable,
            Self::Adjust { .. } => CenternessVariant::Adjust,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Static => 0,
            Self::Learnable { .. } => ROI_CELLS,
            Self::Adjust { offset } => offset.num_params(),
        }
    }

    /// Mask for each proposal, `[n, 49]` in `[y*, x*]` row-major order, values in `[0, 1]`.
    ///
    /// # Panics
    /// The adjust variant needs proposal features `q: [n, c]`.
    pub fn mask<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        p: &Params<T>,
        n: usize,
        q: Option<Var<'g, T>>,
    ) -> Var<'g, T> {
        match self {
            Self::Static => {
                let m = static_mask::<T>();
                let data = m.data().repeat(n);
                g.constant(Tensor::new(&[n, ROI_CELLS], data).expect("mask extent"))
            }
            Self::Learnable { mask } => {
                let m = g.param(p, *mask).clamp(0.0, 1.0).reshape(&[1, ROI_CELLS]);
                m + g.constant(Tensor::zeros(&[n, ROI_CELLS]))
            }
            Self::Adjust { offset } => {
                let q = q.expect("adjust centerness needs proposal features");
                let shift = offset.forward(g, p, q).tanh().scale(MAX_CENTER_SHIFT);
                adjusted_mask(shift)
            }
        }
    }
}

/// The static formula with its peak moved by `shift: [n, 2]` cells.
///
/// Distances are measured to the edges of a 6-cell-wide window centred on
/// the shifted peak, so a zero shift reproduces the static mask.
pub fn adjusted_mask<'g, T: Scalar>(shift: Var<'g, T>) -> Var<'g, T> {
    let g = shift.graph();
    let n = shift.shape()[0];
    let last = (ROI_SIZE - 1) as f64;
    let grid = g.constant(
        Tensor::new(&[1, ROI_SIZE], (0..ROI_SIZE).map(|i| T::lit(i as f64)).collect())
            .expect("grid row"),
    );
    let zero = g.scalar(0.0);
    let ratio = |s: Var<'g, T>| {
        let near = grid - s;
        let far = (s - grid).offset(last);
        near.minimum(far).maximum(zero) / near.maximum(far)
    };
    let rx = ratio(shift.narrow(1, 0, 1)).reshape(&[n, 1, ROI_SIZE]);
    let ry = ratio(shift.narrow(1, 1, 1)).reshape(&[n, ROI_SIZE, 1]);
    (ry * rx).sqrt().clamp(0.0, 1.0).reshape(&[n, ROI_CELLS])
}

/// Explicit centerness modulation of one RoI: `f_m = m ⊙ f` (mask replicated
/// over channels) and `k_e[cell] = m[cell] · k`, giving `[49, c]` and
/// `[49, c, d]`.
pub fn modulate_with_centerness<'g, T: Scalar>(
    f: Var<'g, T>,
    k: Var<'g, T>,
    m: Var<'g, T>,
) -> (Var<'g, T>, Var<'g, T>) {
    let fs = f.shape();
    let ks = k.shape();
    assert_eq!(fs.len(), 2, "RoI feature must be [49, c]");
    assert_eq!(fs[0], ROI_CELLS, "RoI feature must have 49 cells");
    assert_eq!(ks.len(), 2, "kernel must be [c, d]");
    assert_eq!(ks[0], fs[1], "kernel input width must match RoI channels");
    assert_eq!(m.shape().iter().product::<usize>(), ROI_CELLS, "mask must hold 49 cells");
    let (c, d) = (ks[0], ks[1]);
    let fm = f * m.reshape(&[ROI_CELLS, 1]);
    let ke = k.reshape(&[1, c, d]) * m.reshape(&[ROI_CELLS, 1, 1]);
    (fm, ke)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_zero() {
        let e = sinusoidal_embed(0.0f64, SinusoidalConfig::new(8));
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn embed_quarter() {
        let e = sinusoidal_embed(0.25f64, SinusoidalConfig::new(4));
        assert_abs_diff_eq!(e[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[2], (0.25 * std::f64::consts::TAU / 100.0).sin(), epsilon = 1e-15);
        assert!(e[3] > 0.99);
    }

    #[test]
    fn embed_lowest_frequency_period() {
        let cfg = SinusoidalConfig::new(6);
        let period = std::f64::consts::TAU / cfg.frequency(0);
        let a = sinusoidal_embed(0.3, cfg);
        let b = sinusoidal_embed(0.3 + period, cfg);
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
    }

    #[test]
    fn recorded_embed_matches_plain() {
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[2, 1], &[0.1, 0.7]).unwrap());
        let cfg = SinusoidalConfig::new(8);
        let e = sinusoidal_var(v, cfg).value();
        assert_eq!(e.row(1), sinusoidal_embed(0.7, cfg).as_slice());
    }

    #[test]
    fn static_mask_values() {
        assert_eq!(static_centerness(3, 3), 1.0);
        for k in 0..ROI_SIZE {
            assert_eq!(static_centerness(0, k), 0.0);
            assert_eq!(static_centerness(6, k), 0.0);
        }
        assert_abs_diff_eq!(static_centerness(1, 3), 0.2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(static_centerness(2, 1), 0.1f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn zero_shift_reproduces_static() {
        let g = Graph::<f64>::new();
        let m = adjusted_mask(g.constant(Tensor::zeros(&[2, 2]))).value();
        let s = static_mask::<f64>();
        for i in 0..2 {
            for cell in 0..ROI_CELLS {
                assert_abs_diff_eq!(m.at(&[i, cell]), s.data()[cell], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn shifted_peak_moves() {
        let g = Graph::<f64>::new();
        let m = adjusted_mask(g.constant(Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap())).value();
        // peak at x* = 4, y* = 1
        assert_abs_diff_eq!(m.at(&[0, 7 + 4]), 1.0, epsilon = 1e-15);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn learnable_mask_starts_static() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CenternessHead::build(
            &mut ParamBuilder::new(&mut params, &mut rng),
            CenternessVariant::Learnable,
            8,
        );
        let g = Graph::new();
        let m = head.mask(&g, &params, 3, None).value();
        assert_eq!(&m.data()[2 * ROI_CELLS..], static_mask::<f64>().data());
    }

    #[test]
    #[should_panic(expected = "adjust centerness needs proposal features")]
    fn adjust_requires_features() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CenternessHead::build(
            &mut ParamBuilder::new(&mut params, &mut rng),
            CenternessVariant::Adjust,
            8,
        );
        let g = Graph::new();
        head.mask(&g, &params, 1, None);
    }

    #[test]
    fn modulation_identity_and_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::randn(&[ROI_CELLS, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
        let (fm, ke) = modulate_with_centerness(f, k, g.constant(Tensor::ones(&[ROI_CELLS])));
        assert_eq!(fm.value(), f.value());
        for cell in 0..ROI_CELLS {
            assert_eq!(&ke.value().data()[cell * 8..(cell + 1) * 8], k.value().data());
        }
        let (fm, ke) = modulate_with_centerness(f, k, g.constant(static_mask()));
        let center = 3 * ROI_SIZE + 3;
        assert_eq!(&ke.value().data()[center * 8..(center + 1) * 8], k.value().data());
        for cell in 0..ROI_CELLS {
            let (y, x) = (cell / ROI_SIZE, cell % ROI_SIZE);
            if x == 0 || y == 0 || x == 6 || y == 6 {
                assert!(fm.value().data()[cell * 4..(cell + 1) * 4].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn kernel_pe_scaling_examples() {
        let c = 8;
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = GeometryHeads::build(&mut ParamBuilder::new(&mut params, &mut rng), c);
        let q = Tensor::randn(&[1, c], 1.0, &mut rng);
        let g = Graph::new();
        let qv = g.constant(q);
        let b1 = g.constant(Tensor::from_f64(&[1, 4], &[0.3, 0.6, 0.2, 0.4]).unwrap());
        let b2 = g.constant(Tensor::from_f64(&[1, 4], &[0.3, 0.6, 0.4, 0.4]).unwrap());
        let p1 = kernel_pe(&g, &params, &heads, qv, b1).value();
        let p2 = kernel_pe(&g, &params, &heads, qv, b2).value();
        for i in 0..c / 2 {
            assert_abs_diff_eq!(p2.data()[i], 0.5 * p1.data()[i], epsilon = 1e-14);
            // y half untouched
            assert_eq!(p2.data()[c / 2 + i], p1.data()[c / 2 + i]);
        }
        // unit modulation when w equals w_ref
        let wref = heads.reference_size(&g, &params, qv).value().data()[0];
        let b3 = g.constant(Tensor::from_f64(&[1, 4], &[0.3, 0.6, wref, 0.4]).unwrap());
        let p3 = kernel_pe(&g, &params, &heads, qv, b3).value();
        let qc = heads.center_features(&g, &params, qv).value();
        let sin = sinusoidal_embed(0.3, SinusoidalConfig::new(c / 2));
        for i in 0..c / 2 {
            assert_abs_diff_eq!(p3.data()[i], sin[i] * qc.data()[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn box_pe_shape_and_distinct() {
        let c = 16;
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = BoxPeHead::build(&mut ParamBuilder::new(&mut params, &mut rng), c);
        let g = Graph::new();
        let b = g.constant(
            Tensor::from_f64(&[3, 4], &[0.2, 0.2, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1])
                .unwrap(),
        );
        let p = head.forward(&g, &params, b).value();
        assert_eq!(p.shape(), &[3, c]);
        assert_eq!(p.row(0), p.row(2));
        assert_ne!(p.row(0), p.row(1));
    }

    #[test]
    fn roi_pe_width_and_shift() {
        let pts: Vec<[f64; 2]> = (0..ROI_CELLS).map(|i| [0.1 + 0.01 * (i % 7) as f64, 0.5]).collect();
        let pe = roi_element_pe(&pts, 8);
        assert_eq!(pe.shape(), &[1, ROI_CELLS, 8]);
        let shifted: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + 0.05, p[1]]).collect();
        let pe2 = roi_element_pe(&shifted, 8);
        for cell in 0..ROI_CELLS {
            let want = sinusoidal_embed(pts[cell][0] + 0.05, SinusoidalConfig::new(4));
            assert_eq!(&pe2.data()[cell * 8..cell * 8 + 4], want.as_slice());
        }
        assert_ne!(pe, pe2);
    }
}
