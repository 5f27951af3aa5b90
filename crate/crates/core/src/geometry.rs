//! Axis-aligned boxes in normalized `[0, 1]` image coordinates.

use serde::{Deserialize, Serialize};

/// Smallest side length a decoded box may have.
pub const MIN_BOX_SIZE: f64 = 1e-3;

/// Upper bound on the log-scale size delta, so `exp` cannot overflow.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        BBox::new(s[0], s[1], s[2], s[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.x1 <= self.x2
            && self.y1 <= self.y2
            && in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
    }

    /// Clamps into the unit square keeping at least `MIN_BOX_SIZE` per side.
    pub fn clamped(self) -> BBox {
        let (x1, x2) = clamp_interval(self.x1, self.x2);
        let (y1, y2) = clamp_interval(self.y1, self.y2);
        BBox::new(x1, y1, x2, y2)
    }
}

fn clamp_interval(lo: f64, hi: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, 1.0 - MIN_BOX_SIZE);
    let hi = hi.max(lo + MIN_BOX_SIZE).min(1.0);
    (lo, hi)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    };
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclose <= 0.0 {
        return iou;
    }
    iou - (enclose - union) / enclose
}

pub fn l1_box(a: &BBox, b: &BBox) -> f64 {
    (a.x1 - b.x1).abs() + (a.y1 - b.y1).abs() + (a.x2 - b.x2).abs() + (a.y2 - b.y2).abs()
}

/// Center/size delta decoding: `[dcx, dcy, dlogw, dlogh]`, result clamped.
pub fn apply_deltas(base: &BBox, deltas: [f64; 4]) -> BBox {
    let raw = decode_raw(base.to_array(), deltas);
    BBox::from_array(raw).clamped()
}

fn decode_raw(base: [f64; 4], d: [f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for axis in 0..2 {
        let (lo, hi) = (base[axis], base[axis + 2]);
        let size = hi - lo;
        let center = 0.5 * (lo + hi);
        let scale = d[axis + 2].min(MAX_LOG_SCALE).exp();
        let c = center + d[axis] * size;
        out[axis] = c - 0.5 * size * scale;
        out[axis + 2] = c + 0.5 * size * scale;
    }
    out
}

/// Decoded box plus Jacobians w.r.t. the base box and the deltas.
/// Rows index output coordinates, columns index inputs.
pub(crate) struct DeltaJacobian {
    pub out: [f64; 4],
    pub d_base: [[f64; 4]; 4],
    pub d_delta: [[f64; 4]; 4],
}

pub(crate) fn apply_deltas_jacobian(base: [f64; 4], d: [f64; 4]) -> DeltaJacobian {
    let mut jac = DeltaJacobian {
        out: [0.0; 4],
        d_base: [[0.0; 4]; 4],
        d_delta: [[0.0; 4]; 4],
    };
    for axis in 0..2 {
        let (lo_i, hi_i) = (axis, axis + 2);
        let (lo, hi) = (base[lo_i], base[hi_i]);
        let size = hi - lo;
        let center = 0.5 * (lo + hi);
        let shift = d[axis];
        let active = d[axis + 2] < MAX_LOG_SCALE;
        let scale = d[axis + 2].min(MAX_LOG_SCALE).exp();
        let c = center + shift * size;
        let raw_lo = c - 0.5 * size * scale;
        let raw_hi = c + 0.5 * size * scale;

        // Jacobian rows of the unclamped coordinates, as (d/dlo, d/dhi, d/dshift, d/dlogscale).
        let ds = if active { 0.5 * size * scale } else { 0.0 };
        let j_lo = [0.5 - shift + 0.5 * scale, 0.5 + shift - 0.5 * scale, size, -ds];
        let j_hi = [0.5 - shift - 0.5 * scale, 0.5 + shift + 0.5 * scale, size, ds];

        // A coordinate sitting exactly on the image border keeps its gradient,
        // so boxes initialized to the full image can still shrink.
        let out_lo = raw_lo.clamp(0.0, 1.0 - MIN_BOX_SIZE);
        let j_out_lo = if (0.0..=1.0 - MIN_BOX_SIZE).contains(&raw_lo) {
            j_lo
        } else {
            [0.0; 4]
        };
        let floor = out_lo + MIN_BOX_SIZE;
        let (out_hi, j_out_hi) = if raw_hi > 1.0 {
            (1.0, [0.0; 4])
        } else if raw_hi < floor {
            (floor, j_out_lo)
        } else {
            (raw_hi, j_hi)
        };

        jac.out[lo_i] = out_lo;
        jac.out[hi_i] = out_hi;
        for (row, j) in [(lo_i, j_out_lo), (hi_i, j_out_hi)] {
            jac.d_base[row][lo_i] = j[0];
            jac.d_base[row][hi_i] = j[1];
            jac.d_delta[row][axis] = j[2];
            jac.d_delta[row][axis + 2] = j[3];
        }
    }
    jac
}

/// GIoU of two raw coordinate arrays together with its gradient w.r.t. both.
pub(crate) fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4], [f64; 4]) {
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];

    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let area_a = aw * ah;
    let area_b = bw * bh;

    // Intersection extents; ties assign the derivative to `a`.
    let a_left = a[0] >= b[0];
    let a_top = a[1] >= b[1];
    let a_right = a[2] <= b[2];
    let a_bottom = a[3] <= b[3];
    let iw_raw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih_raw = a[3].min(b[3]) - a[1].max(b[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;

    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew * eh;

    let iou = if union > 0.0 && inter > 0.0 {
        inter / union
    } else {
        0.0
    };
    if enclose <= 0.0 || union <= 0.0 {
        return (iou, ga, gb);
    }
    let giou = iou - 1.0 + union / enclose;

    // Partials of giou w.r.t. the intermediate quantities.
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enclose;
    let d_area = -inter / (union * union) + 1.0 / enclose;
    let d_enclose = -union / (enclose * enclose);

    // Areas.
    let area_grad = |g: &mut [f64; 4], w: f64, h: f64| {
        g[0] -= d_area * h;
        g[2] += d_area * h;
        g[1] -= d_area * w;
        g[3] += d_area * w;
    };
    area_grad(&mut ga, aw, ah);
    area_grad(&mut gb, bw, bh);

    // Intersection.
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if a_right { ga[2] += d_iw } else { gb[2] += d_iw }
        if a_left { ga[0] -= d_iw } else { gb[0] -= d_iw }
        if a_bottom { ga[3] += d_ih } else { gb[3] += d_ih }
        if a_top { ga[1] -= d_ih } else { gb[1] -= d_ih }
    }

    // Enclosing box.
    let d_ew = d_enclose * eh;
    let d_eh = d_enclose * ew;
    if a[2] >= b[2] { ga[2] += d_ew } else { gb[2] += d_ew }
    if a[0] <= b[0] { ga[0] -= d_ew } else { gb[0] -= d_ew }
    if a[3] >= b[3] { ga[3] += d_eh } else { gb[3] += d_eh }
    if a[1] <= b[1] { ga[1] -= d_eh } else { gb[1] -= d_eh }

    (giou, ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        let shifted = BBox::new(0.5, 0.5, 1.5, 1.5);
        assert_relative_eq!(iou(&unit, &shifted), 1.0 / 7.0, epsilon = 1e-15);
        let a = BBox::new(0.0, 0.0, 0.3, 0.3);
        let b = BBox::new(0.5, 0.5, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let point = BBox::new(0.4, 0.4, 0.4, 0.4);
        assert_eq!(iou(&point, &point), 0.0);
        assert_eq!(iou(&point, &BBox::FULL), 0.0);
    }

    #[test]
    fn giou_examples() {
        let unit = BBox::FULL;
        assert_eq!(giou(&unit, &unit), 1.0);
        let a = BBox::new(0.0, 0.0, 0.5, 0.5);
        let b = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_relative_eq!(giou(&a, &b), -0.5, epsilon = 1e-15);
        let c = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_relative_eq!(giou(&unit, &c), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn l1_examples() {
        let unit = BBox::FULL;
        assert_eq!(l1_box(&unit, &unit), 0.0);
        assert_relative_eq!(
            l1_box(&unit, &BBox::new(0.1, 0.0, 1.0, 1.0)),
            0.1,
            epsilon = 1e-15
        );
        let p = BBox::new(0.2, 0.2, 0.2, 0.2);
        let q = BBox::new(0.5, 0.5, 0.5, 0.5);
        assert_relative_eq!(l1_box(&p, &q), 4.0 * 0.3, epsilon = 1e-15);
    }

    #[test]
    fn delta_examples() {
        let base = BBox::new(0.25, 0.25, 0.75, 0.75);
        assert_eq!(apply_deltas(&base, [0.0; 4]), base);
        let raw = decode_raw(base.to_array(), [0.0, 0.0, std::f64::consts::LN_2, 0.0]);
        assert_relative_eq!(raw[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(raw[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(raw[2], 1.0, epsilon = 1e-15);
        assert_relative_eq!(raw[3], 0.75, epsilon = 1e-15);
        let tall = apply_deltas(&base, [0.0, 0.0, 0.0, 50.0]);
        assert_eq!((tall.y1, tall.y2), (0.0, 1.0));
        assert!(tall.is_valid());
    }

    #[test]
    fn clamp_keeps_min_size() {
        let outside = BBox::new(1.4, -0.5, 1.6, -0.2).clamped();
        assert!(outside.is_valid());
        assert!(outside.width() >= MIN_BOX_SIZE - 1e-12);
        assert!(outside.height() >= MIN_BOX_SIZE - 1e-12);
    }

    #[test]
    fn giou_grad_value_matches_plain() {
        let a = [0.1, 0.2, 0.5, 0.6];
        let b = [0.3, 0.1, 0.8, 0.4];
        let (g, _, _) = giou_with_grad(a, b);
        assert_relative_eq!(
            g,
            giou(&BBox::from_array(a), &BBox::from_array(b)),
            epsilon = 1e-15
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| {
            BBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
        })
    }

    proptest! {
        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!(g <= i + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn giou_is_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(giou(&a, &b), giou(&b, &a));
        }

        #[test]
        fn decoded_boxes_are_valid(
            a in arb_box(),
            d in prop::array::uniform4(-20.0..20.0f64),
        ) {
            prop_assert!(apply_deltas(&a, d).is_valid());
        }
    }
}
