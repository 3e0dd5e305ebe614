//! Box representations, overlap metrics and the logit/coordinate maps used
//! by anchor-box queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default clamp for [`inverse_sigmoid`].
pub const INVERSE_SIGMOID_EPS: f64 = 1e-3;

/// Smallest width/height used when a box scales agent offsets.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Center/size box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCCWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_corners(self) -> BoxXYXY {
        to_corners(self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn to_ccwh(self) -> BoxCCWH {
        from_corners(self)
    }
}

pub fn to_corners(b: BoxCCWH) -> BoxXYXY {
    BoxXYXY {
        x0: b.cx - b.w / 2.0,
        y0: b.cy - b.h / 2.0,
        x1: b.cx + b.w / 2.0,
        y1: b.cy + b.h / 2.0,
    }
}

pub fn from_corners(b: BoxXYXY) -> BoxCCWH {
    BoxCCWH {
        cx: (b.x0 + b.x1) / 2.0,
        cy: (b.y0 + b.y1) / 2.0,
        w: b.x1 - b.x0,
        h: b.y1 - b.y0,
    }
}

fn intersection(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    w * h
}

/// Intersection over union; 0 when both boxes have zero area.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`.
///
/// Two zero-area boxes give 0 (the differentiable version also gives them a
/// zero gradient).
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let hull = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    inter / union - (hull - union) / hull
}

/// `ln(p'/(1-p'))` with `p' = clamp(p, eps, 1-eps)`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    crate::numerics::sigmoid_scalar(x)
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn box_l1(a: &BoxCCWH, b: &BoxCCWH) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `[.., 4]` center/size boxes to corners, differentiably.
pub fn ccwh_to_xyxy(boxes: &Tensor) -> Result<Tensor> {
    let r = check_boxes(boxes, "ccwh_to_xyxy")?;
    let c = boxes.slice(r, 0, 2)?;
    let half = boxes.slice(r, 2, 4)?.scale(0.5)?;
    Tensor::concat(&[&c.sub(&half)?, &c.add(&half)?], r)
}

fn check_boxes(boxes: &Tensor, op: &'static str) -> Result<usize> {
    match boxes.shape().last() {
        Some(4) => Ok(boxes.rank() - 1),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: boxes.shape().to_vec(),
            rhs: vec![4],
        }),
    }
}

/// Row-wise generalized IoU of two `[t, 4]` corner tensors, giving `[t]`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_boxes(a, "giou")?;
    check_boxes(b, "giou")?;
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape("giou", a.shape(), b.shape()));
    }
    let col = |t: &Tensor, i: usize| -> Result<Tensor> { t.slice(1, i, i + 1)?.reshape(&[t.shape()[0]]) };
    let (ax0, ay0, ax1, ay1) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx0, by0, bx1, by1) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);

    let side = |lo: &Tensor, hi: &Tensor| -> Result<Tensor> { hi.sub(lo)?.clamp_min(0.0) };
    let area_a = side(&ax0, &ax1)?.mul(&side(&ay0, &ay1)?)?;
    let area_b = side(&bx0, &bx1)?.mul(&side(&by0, &by1)?)?;
    let iw = ax1.minimum(&bx1)?.sub(&ax0.maximum(&bx0)?)?.clamp_min(0.0)?;
    let ih = ay1.minimum(&by1)?.sub(&ay0.maximum(&by0)?)?.clamp_min(0.0)?;
    let inter = iw.mul(&ih)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;
    let hw = ax1.maximum(&bx1)?.sub(&ax0.minimum(&bx0)?)?;
    let hh = ay1.maximum(&by1)?.sub(&ay0.minimum(&by0)?)?;
    let hull = hw.mul(&hh)?;

    // rows where both boxes are empty are defined as 0 with no gradient
    let live: Vec<f64> = union.data().iter().map(|&u| if u > 0.0 { 1.0 } else { 0.0 }).collect();
    let live = Tensor::new(union.shape(), live)?;
    let tiny = 1e-12;
    let safe_union = union.clamp_min(tiny)?;
    let safe_hull = hull.clamp_min(tiny)?;
    let iou = inter.div(&safe_union)?;
    let gap = hull.sub(&union)?.div(&safe_hull)?;
    iou.sub(&gap)?.mul(&live)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn corners_examples() {
        assert_eq!(to_corners(BoxCCWH::new(0.5, 0.5, 1.0, 1.0)), BoxXYXY::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(to_corners(BoxCCWH::new(0.5, 0.5, 0.0, 0.0)), BoxXYXY::new(0.5, 0.5, 0.5, 0.5));
        let c = to_corners(BoxCCWH::new(0.3, 0.4, 0.2, 0.4));
        for (got, want) in [(c.x0, 0.2), (c.y0, 0.2), (c.x1, 0.4), (c.y1, 0.6)] {
            assert!(close(got, want), "{c:?}");
        }
    }

    #[test]
    fn giou_examples() {
        let a = BoxXYXY::new(0.1, 0.2, 0.6, 0.9);
        assert!(close(giou(&a, &a), 1.0));
        let a = BoxXYXY::new(0.0, 0.0, 0.2, 0.2);
        let b = BoxXYXY::new(0.8, 0.8, 1.0, 1.0);
        assert!(close(giou(&a, &b), -0.92));
        let outer = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let inner = BoxXYXY::new(0.25, 0.25, 0.75, 0.75);
        assert!(close(giou(&outer, &inner), 0.25));
        assert!(close(giou(&outer, &inner), iou(&outer, &inner)));
        let p = BoxXYXY::new(0.3, 0.3, 0.3, 0.3);
        let q = BoxXYXY::new(0.6, 0.6, 0.6, 0.6);
        assert_eq!(giou(&p, &q), 0.0);
    }

    #[test]
    fn inverse_sigmoid_examples() {
        assert_eq!(inverse_sigmoid(0.5, INVERSE_SIGMOID_EPS), 0.0);
        assert!((inverse_sigmoid(0.0, 1e-3) - (-6.906_754_778_648_554)).abs() < 1e-12);
        for p in [1e-3, 0.01, 0.3, 0.77, 0.999] {
            assert!((sigmoid(inverse_sigmoid(p, 1e-3)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_examples() {
        let a = BoxCCWH::new(0.2, 0.2, 0.1, 0.1);
        assert_eq!(box_l1(&a, &a), 0.0);
        let b = BoxCCWH::new(0.3, 0.3, 0.2, 0.2);
        assert!(close(box_l1(&a, &b), 0.4));
        let c = BoxCCWH::new(0.5, 0.1, 0.3, 0.1);
        assert!(close(box_l1(&a, &c), 0.6));
    }

    fn xyxy_tensor(boxes: &[BoxXYXY]) -> Tensor {
        let v = boxes.iter().flat_map(|b| [b.x0, b.y0, b.x1, b.y1]).collect();
        Tensor::new(&[boxes.len(), 4], v).unwrap()
    }

    #[test]
    fn tensor_giou_agrees_with_scalar() {
        let pairs = [
            (BoxXYXY::new(0.0, 0.0, 0.2, 0.2), BoxXYXY::new(0.8, 0.8, 1.0, 1.0)),
            (BoxXYXY::new(0.1, 0.2, 0.5, 0.7), BoxXYXY::new(0.3, 0.1, 0.9, 0.4)),
            (BoxXYXY::new(0.3, 0.3, 0.3, 0.3), BoxXYXY::new(0.6, 0.6, 0.6, 0.6)),
        ];
        let a = xyxy_tensor(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let b = xyxy_tensor(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let g = giou_tensor(&a, &b).unwrap();
        for (i, (p, q)) in pairs.iter().enumerate() {
            assert!((g.data()[i] - giou(p, q)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_giou_has_zero_gradient() {
        let a = xyxy_tensor(&[BoxXYXY::new(0.3, 0.3, 0.3, 0.3)]);
        let b = xyxy_tensor(&[BoxXYXY::new(0.6, 0.6, 0.6, 0.6)]);
        let tape = crate::numerics::Tape::new();
        let (ta, tb) = (tape.leaf(&a), tape.leaf(&b));
        let grads = giou_tensor(&ta, &tb).unwrap().sum().unwrap().backward().unwrap();
        assert!(grads.wrt(&ta).iter().chain(grads.wrt(&tb).iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        // overlapping, disjoint and nested configurations, away from kinks
        let a = Tensor::new(&[3, 4], vec![0.31, 0.52, 0.23, 0.17, 0.2, 0.2, 0.1, 0.12, 0.5, 0.5, 0.6, 0.5]).unwrap();
        let b = Tensor::new(&[3, 4], vec![0.37, 0.44, 0.29, 0.21, 0.71, 0.8, 0.2, 0.14, 0.52, 0.47, 0.2, 0.3]).unwrap();
        let report = finite_difference_check(
            |p| {
                let g = giou_tensor(&ccwh_to_xyxy(&p[0])?, &ccwh_to_xyxy(&p[1])?)?;
                g.mul(&Tensor::new(&[3], vec![1.0, -0.7, 0.4])?)?.sum()
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn arb_box() -> impl Strategy<Value = BoxCCWH> {
        (0.05f64..0.95, 0.05f64..0.95, 0.0f64..0.5, 0.0f64..0.5).prop_map(|(cx, cy, w, h)| BoxCCWH::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn giou_is_symmetric_and_below_iou(a in arb_box(), b in arb_box()) {
            let (a, b) = (a.to_corners(), b.to_corners());
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-12);
            prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-12);
            prop_assert!(giou(&a, &b) > -1.0 && giou(&a, &b) <= 1.0 + 1e-12);
        }

        #[test]
        fn corner_round_trip(b in arb_box()) {
            let back = from_corners(to_corners(b));
            for (x, y) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
