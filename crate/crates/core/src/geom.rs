//! Oriented 3D boxes, rotated IoU and point containment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{normalize_angle, Real};
use crate::rimg::CartesianPoint;

/// Intersections smaller than this are treated as empty.
const SLIVER_AREA: f64 = 1e-12;

/// Oriented box: center, extents along heading (`length`), across it
/// (`width`) and vertically (`height`), and yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox<T> {
    pub cx: T,
    pub cy: T,
    pub cz: T,
    pub length: T,
    pub width: T,
    pub height: T,
    pub yaw: T,
}

impl<T: Real> OrientedBox<T> {
    /// Validating constructor; normalizes yaw into `(-π, π]`.
    pub fn new(center: [T; 3], dims: [T; 3], yaw: T) -> Result<Self> {
        if dims.iter().any(|d| !(*d > T::zero()) || !d.is_finite()) {
            return Err(Error::contract("box dimensions must be positive and finite"));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::contract("box center and yaw must be finite"));
        }
        Ok(Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            length: dims[0],
            width: dims[1],
            height: dims[2],
            yaw: normalize_angle(yaw),
        })
    }

    pub fn center(&self) -> CartesianPoint<T> {
        CartesianPoint::new(self.cx, self.cy, self.cz)
    }

    /// Euclidean distance of the center from the sensor origin.
    pub fn center_range(&self) -> T {
        self.center().norm()
    }

    pub fn bev_area(&self) -> T {
        self.length * self.width
    }

    pub fn volume(&self) -> T {
        self.length * self.width * self.height
    }

    pub fn bottom(&self) -> T {
        self.cz - self.height / T::lit(2.0)
    }

    pub fn top(&self) -> T {
        self.cz + self.height / T::lit(2.0)
    }

    /// Rotates the box about the sensor z axis by `angle`.
    pub fn rotated_about_z(&self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            cx: c * self.cx - s * self.cy,
            cy: s * self.cx + c * self.cy,
            yaw: normalize_angle(self.yaw + angle),
            ..*self
        }
    }

    /// Expresses a world point in the box frame (origin at center, x along heading).
    pub fn to_local(&self, p: &CartesianPoint<T>) -> CartesianPoint<T> {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        CartesianPoint::new(c * dx + s * dy, -s * dx + c * dy, p.z - self.cz)
    }

    fn ordering_key(&self) -> [T; 7] {
        [
            self.cx,
            self.cy,
            self.cz,
            self.length,
            self.width,
            self.height,
            self.yaw,
        ]
    }
}

/// Corners of the yaw-rotated `length x width` footprint, counter-clockwise.
pub fn bev_corners<T: Real>(b: &OrientedBox<T>) -> [[T; 2]; 4] {
    let half = T::lit(0.5);
    let (hl, hw) = (b.length * half, b.width * half);
    let (s, c) = b.yaw.sin_cos();
    let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
    local.map(|[u, v]| [b.cx + c * u - s * v, b.cy + s * u + c * v])
}

/// Shoelace area of a simple polygon, positive for counter-clockwise order.
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc / T::lit(2.0)
}

/// Sutherland–Hodgman clip of `subject` against the convex counter-clockwise `clip`.
pub fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut output: Vec<[T; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [T; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= T::zero() {
                if sp < T::zero() {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= T::zero() {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect<T: Real>(p: [T; 2], q: [T; 2], sp: T, sq: T) -> [T; 2] {
    let t = sp / (sp - sq);
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

/// Footprint intersection area, computed in a canonical argument order so
/// that the result is bitwise symmetric.
pub fn bev_intersection_area<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
    let (first, second) = if lexicographic_le(a, b) { (a, b) } else { (b, a) };
    let poly = clip_convex(&bev_corners(first), &bev_corners(second));
    let area = polygon_area(&poly);
    if area < T::lit(SLIVER_AREA) {
        T::zero()
    } else {
        area
    }
}

fn lexicographic_le<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> bool {
    for (x, y) in a.ordering_key().iter().zip(b.ordering_key().iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    true
}

pub fn iou_bev<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
    let inter = bev_intersection_area(a, b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).min(T::one())
}

pub fn vertical_overlap<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
    (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(T::zero())
}

pub fn iou_3d<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
    let dz = vertical_overlap(a, b);
    if dz <= T::zero() {
        return T::zero();
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).min(T::one())
}

/// Boundary-inclusive containment test in the box frame.
pub fn point_in_box<T: Real>(p: &CartesianPoint<T>, b: &OrientedBox<T>) -> bool {
    let l = b.to_local(p);
    let half = T::lit(0.5);
    l.x.abs() <= b.length * half && l.y.abs() <= b.width * half && l.z.abs() <= b.height * half
}

/// Which overlap measure to use for matching and suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    #[default]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou<T: Real>(self, a: &OrientedBox<T>, b: &OrientedBox<T>) -> T {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}
