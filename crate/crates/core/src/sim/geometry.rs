use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Polyline with cumulative arc length, used for ego and NPC routes.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// `points` must hold at least two points with distinct neighbours.
    pub fn new(points: Vec<(f64, f64)>) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Some(Self { points, cumulative })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn end(&self) -> (f64, f64) {
        *self.points.last().unwrap()
    }

    fn segment_at(&self, s: f64) -> usize {
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        }
    }

    /// Pose at arc length `s`, clamped to the polyline; heading is the local tangent.
    pub fn pose_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        Pose {
            x: a.0 + f * (b.0 - a.0),
            y: a.1 + f * (b.1 - a.1),
            heading: (b.1 - a.1).atan2(b.0 - a.0),
        }
    }

    /// Arc length of the closest point to `p` among segments overlapping `[s_min, s_max]`.
    pub fn project(&self, p: (f64, f64), s_min: f64, s_max: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.points.len() - 1 {
            if self.cumulative[i + 1] < s_min || self.cumulative[i] > s_max {
                continue;
            }
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            let f = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + f * dx, a.1 + f * dy);
            let d = (p.0 - qx).hypot(p.1 - qy);
            if d < best.0 {
                best = (d, self.cumulative[i] + f * len2.sqrt());
            }
        }
        if best.0.is_infinite() {
            s_min.clamp(0.0, self.length())
        } else {
            best.1
        }
    }
}

/// Oriented rectangle: center, heading of the long axis, full length and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [(0.0, 0.0); 4];
        for (k, (l, w)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].into_iter().enumerate() {
            out[k] = (self.cx + l * c - w * s, self.cy + l * s + w * c);
        }
        out
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }
}

fn project_onto(corners: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.0 * axis.0 + p.1 * axis.1;
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test over the four edge normals. Touching boxes overlap.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (amin, amax) = project_onto(&ca, axis);
        let (bmin, bmax) = project_onto(&cb, axis);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let f = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - f * dx).hypot(p.1 - a.1 - f * dy)
}

/// Boundary-to-boundary clearance between two boxes; zero when they overlap.
pub fn box_distance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if boxes_overlap(a, b) {
        return 0.0;
    }
    let ca = a.corners();
    let cb = b.corners();
    let mut best = f64::INFINITY;
    for (pts, poly) in [(&ca, &cb), (&cb, &ca)] {
        for &p in pts.iter() {
            for k in 0..4 {
                best = best.min(point_segment_distance(p, poly[k], poly[(k + 1) % 4]));
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, heading: f64) -> OrientedBox {
        OrientedBox { cx, cy, heading, length: 5.0, width: 2.0 }
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_and_distant() {
        assert!(boxes_overlap(&bx(1.0, 2.0, 0.3), &bx(1.0, 2.0, 0.3)));
        assert!(!boxes_overlap(&bx(0.0, 0.0, 0.0), &bx(100.0, 0.0, 0.0)));
    }

    #[test]
    fn rotated_diagonal_gap() {
        // Corner-to-corner near miss that an AABB test would call a hit.
        let a = bx(0.0, 0.0, PI / 4.0);
        let b = bx(4.0, 4.0, -PI / 4.0);
        assert!(!boxes_overlap(&a, &b));
    }

    #[test]
    fn distance_of_aligned_boxes() {
        let d = box_distance(&bx(0.0, 0.0, 0.0), &bx(6.0, 0.0, 0.0));
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(box_distance(&bx(0.0, 0.0, 0.0), &bx(1.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn polyline_pose_and_projection() {
        let p = Polyline::new(vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)]).unwrap();
        assert_eq!(p.length(), 20.0);
        let q = p.pose_at(15.0);
        assert!((q.x - 10.0).abs() < 1e-12 && (q.y - 5.0).abs() < 1e-12);
        assert!((q.heading - PI / 2.0).abs() < 1e-12);
        assert!((p.project((3.0, 1.0), 0.0, 20.0) - 3.0).abs() < 1e-12);
        assert!(Polyline::new(vec![(0.0, 0.0), (0.0, 0.0)]).is_none());
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64, ah in -PI..PI,
            bxx in -10.0..10.0f64, by in -10.0..10.0f64, bh in -PI..PI,
            l in 0.5..6.0f64, w in 0.5..3.0f64,
        ) {
            let a = OrientedBox { cx: ax, cy: ay, heading: ah, length: l, width: w };
            let b = OrientedBox { cx: bxx, cy: by, heading: bh, length: w + 1.0, width: l / 2.0 };
            prop_assert_eq!(boxes_overlap(&a, &b), boxes_overlap(&b, &a));
            prop_assert_eq!(box_distance(&a, &b) == 0.0, boxes_overlap(&a, &b));
        }
    }
}
