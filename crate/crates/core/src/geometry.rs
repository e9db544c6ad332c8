//! Box representations, overlap measures and the between-stage box update.

use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Var};

/// Smallest box side, in normalized image units, after clamping.
pub const MIN_BOX_SIDE: f64 = 1e-3;
/// Log-scale size deltas are clamped to `[-MAX_LOG_DELTA, MAX_LOG_DELTA]`.
pub const MAX_LOG_DELTA: f64 = 4.0;
/// Area floor for degenerate boxes in overlap measures.
const AREA_EPS: f64 = 1e-12;

/// Center/size box in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCXCYWH<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

/// Corner box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Scale-invariant box regression target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDeltas<T> {
    pub dx: T,
    pub dy: T,
    pub dw: T,
    pub dh: T,
}

impl<T: Scalar> BoxCXCYWH<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_f64(v: [f64; 4]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]), T::lit(v[3]))
    }

    /// The whole image.
    pub fn full_image() -> Self {
        Self::from_f64([0.5, 0.5, 1.0, 1.0])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn to_xyxy(self) -> BoxXYXY<T> {
        let half = T::lit(0.5);
        BoxXYXY {
            x1: self.x - half * self.w,
            y1: self.y - half * self.h,
            x2: self.x + half * self.w,
            y2: self.y + half * self.h,
        }
    }

    pub fn area(self) -> T {
        self.w * self.h
    }

    /// Clips to `[0, 1]^2` keeping at least [`MIN_BOX_SIDE`] per side.
    pub fn clamp_to_image(self) -> Self {
        let (zero, one, min_side) = (T::zero(), T::one(), T::lit(MIN_BOX_SIDE));
        let half = T::lit(0.5);
        let axis = |c: T, s: T| {
            let lo = (c - half * s).max(zero).min(one);
            let hi = (c + half * s).max(zero).min(one);
            let side = (hi - lo).max(min_side);
            let mid = (half * (lo + hi)).max(half * side).min(one - half * side);
            (mid, side)
        };
        let (x, w) = axis(self.x, self.w);
        let (y, h) = axis(self.y, self.h);
        Self { x, y, w, h }
    }

    pub fn translate(self, dx: T, dy: T) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..self
        }
    }
}

impl<T: Scalar> BoxXYXY<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_f64(v: [f64; 4]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]), T::lit(v[3]))
    }

    pub fn to_cxcywh(self) -> BoxCXCYWH<T> {
        let half = T::lit(0.5);
        BoxCXCYWH {
            x: half * (self.x1 + self.x2),
            y: half * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(self) -> T {
        (self.x2 - self.x1).max(T::zero()) * (self.y2 - self.y1).max(T::zero())
    }

    pub fn translate(self, dx: T, dy: T) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

impl<T: Scalar> BoxDeltas<T> {
    pub fn new(dx: T, dy: T, dw: T, dh: T) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn clamped(self) -> Self {
        let lim = T::lit(MAX_LOG_DELTA);
        Self {
            dw: self.dw.max(-lim).min(lim),
            dh: self.dh.max(-lim).min(lim),
            ..self
        }
    }
}

fn overlap<T: Scalar>(a: BoxXYXY<T>, b: BoxXYXY<T>) -> (T, T, T) {
    let eps = T::lit(AREA_EPS);
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    let union = a.area().max(eps) + b.area().max(eps) - inter;
    let enclosing = ((a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))).max(eps);
    (inter, union, enclosing)
}

pub fn iou<T: Scalar>(a: BoxXYXY<T>, b: BoxXYXY<T>) -> T {
    let (inter, union, _) = overlap(a, b);
    inter / union
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou<T: Scalar>(a: BoxXYXY<T>, b: BoxXYXY<T>) -> T {
    let (inter, union, enclosing) = overlap(a, b);
    inter / union - (enclosing - union) / enclosing
}

/// Applies clamped deltas, then clips the result to the image.
pub fn apply_deltas<T: Scalar>(b: BoxCXCYWH<T>, d: BoxDeltas<T>) -> BoxCXCYWH<T> {
    let d = d.clamped();
    BoxCXCYWH {
        x: b.x + d.dx * b.w,
        y: b.y + d.dy * b.h,
        w: b.w * d.dw.exp(),
        h: b.h * d.dh.exp(),
    }
    .clamp_to_image()
}

/// Splits an `[n, 4]` box tensor into its four `[n, 1]` columns.
fn columns<'g, T: Scalar>(v: Var<'g, T>) -> [Var<'g, T>; 4] {
    [0, 1, 2, 3].map(|i| v.narrow(1, i, 1))
}

/// `[n, 4]` center/size boxes to corner boxes.
pub fn cxcywh_to_xyxy_var<'g, T: Scalar>(b: Var<'g, T>) -> Var<'g, T> {
    let [x, y, w, h] = columns(b);
    let (hw, hh) = (w.scale(0.5), h.scale(0.5));
    b.graph().concat(&[x - hw, y - hh, x + hw, y + hh], 1)
}

/// Recorded [`apply_deltas`] over `[n, 4]` boxes and deltas.
pub fn apply_deltas_var<'g, T: Scalar>(boxes: Var<'g, T>, deltas: Var<'g, T>) -> Var<'g, T> {
    let g = boxes.graph();
    let [x, y, w, h] = columns(boxes);
    let [dx, dy, dw, dh] = columns(deltas);
    let cx = x + dx * w;
    let cy = y + dy * h;
    let nw = w * dw.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let nh = h * dh.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let axis = |c: Var<'g, T>, s: Var<'g, T>| {
        let lo = (c - s.scale(0.5)).clamp(0.0, 1.0);
        let hi = (c + s.scale(0.5)).clamp(0.0, 1.0);
        let min_side = g.scalar(MIN_BOX_SIDE);
        let side = (hi - lo).maximum(min_side);
        let half = side.scale(0.5);
        let mid = (lo + hi).scale(0.5).maximum(half).minimum((-half).offset(1.0));
        (mid, side)
    };
    let (cx, nw) = axis(cx, nw);
    let (cy, nh) = axis(cy, nh);
    g.concat(&[cx, cy, nw, nh], 1)
}

/// Row-wise generalized IoU of two `[n, 4]` center/size box tensors, shape `[n, 1]`.
pub fn giou_var<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let g = a.graph();
    let eps = g.scalar(AREA_EPS);
    let [ax1, ay1, ax2, ay2] = columns(cxcywh_to_xyxy_var(a));
    let [bx1, by1, bx2, by2] = columns(cxcywh_to_xyxy_var(b));
    let zero = g.scalar(0.0);
    let area_a = ((ax2 - ax1) * (ay2 - ay1)).maximum(eps);
    let area_b = ((bx2 - bx1) * (by2 - by1)).maximum(eps);
    let iw = (ax2.minimum(bx2) - ax1.maximum(bx1)).maximum(zero);
    let ih = (ay2.minimum(by2) - ay1.maximum(by1)).maximum(zero);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let enclosing =
        ((ax2.maximum(bx2) - ax1.minimum(bx1)) * (ay2.maximum(by2) - ay1.minimum(by1))).maximum(eps);
    inter / union - (enclosing - union) / enclosing
}
