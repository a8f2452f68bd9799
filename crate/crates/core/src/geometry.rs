//! Planar geometry in scene meters: oriented boxes, axis-aligned rectangles,
//! a separating-axis overlap test and exact oriented-box IoU via convex
//! polygon clipping.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Oriented rectangle: center, extent along heading (length) and across it (width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, heading: f64) -> Self {
        Self {
            cx,
            cy,
            length,
            width,
            heading,
        }
    }

    pub fn center(&self) -> Point {
        [self.cx, self.cy]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Unit vectors along the length and width axes.
    fn axes(&self) -> (Point, Point) {
        let (s, c) = self.heading.sin_cos();
        ([c, s], [-s, c])
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Point; 4] {
        let (u, v) = self.axes();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let at = |a: f64, b: f64| [self.cx + a * u[0] + b * v[0], self.cy + a * u[1] + b * v[1]];
        [at(hl, -hw), at(hl, hw), at(-hl, hw), at(-hl, -hw)]
    }

    /// Point containment, boundary inclusive.
    pub fn contains(&self, p: Point) -> bool {
        let (u, v) = self.axes();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let a = dx * u[0] + dy * u[1];
        let b = dx * v[0] + dy * v[1];
        a.abs() <= 0.5 * self.length + 1e-12 && b.abs() <= 0.5 * self.width + 1e-12
    }

    /// Radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        let (u, v) = self.axes();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let a = (dx * u[0] + dy * u[1]).abs() - 0.5 * self.length;
        let b = (dx * v[0] + dy * v[1]).abs() - 0.5 * self.width;
        a.max(0.0).hypot(b.max(0.0))
    }

    /// Axis-aligned bounding rectangle.
    pub fn aabb(&self) -> Rect {
        let cs = self.corners();
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in cs {
            r.x0 = r.x0.min(c[0]);
            r.y0 = r.y0.min(c[1]);
            r.x1 = r.x1.max(c[0]);
            r.y1 = r.y1.max(c[1]);
        }
        r
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Closed containment.
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Half-open containment `[x0, x1) × [y0, y1)`, used to partition points.
    pub fn contains_half_open(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] < self.x1 && p[1] >= self.y0 && p[1] < self.y1
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x1, self.y1],
            [self.x0, self.y1],
        ]
    }
}

fn project(points: &[Point], axis: Point) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p[0] * axis[0] + p[1] * axis[1];
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis overlap test between an oriented box and an axis-aligned
/// rectangle. Touching boundaries count as overlap.
pub fn box_intersects_rect(b: &OrientedBox, r: &Rect) -> bool {
    let bc = b.corners();
    let rc = r.corners();
    let (u, v) = b.axes();
    for axis in [[1.0, 0.0], [0.0, 1.0], u, v] {
        let (a0, a1) = project(&bc, axis);
        let (b0, b1) = project(&rc, axis);
        if a1 < b0 - 1e-9 || b1 < a0 - 1e-9 {
            return false;
        }
    }
    true
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` against convex CCW `clip`.
fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let dp = cross(a, b, p);
                let dq = cross(a, b, q);
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

/// Area of the intersection of two oriented boxes.
pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d > a.radius() + b.radius() {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.corners(), &b.corners()))
}

/// Intersection over union of two oriented boxes, in `[0, 1]`.
pub fn iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
