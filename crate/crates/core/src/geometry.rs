//! Oriented rectangles, convex polygon clipping and rotated IoU.
//!
//! Angles are counterclockwise radians in the canonical range `[-π/2, π/2)`.
//! A rectangle is invariant under a rotation by π, so every angle maps onto
//! that range without changing the covered region.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for classifying a vertex as lying on a clipping edge.
pub const CLIP_EPS: f64 = 1e-9;

/// Intersections smaller than this are reported as exactly zero.
pub const AREA_SNAP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
}

/// An oriented rectangle given by its center, side lengths and rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct RotatedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    angle: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    angle: f64,
}

impl TryFrom<RawBox> for RotatedBox {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        RotatedBox::new(r.cx, r.cy, r.w, r.h, r.angle)
    }
}

impl From<RotatedBox> for RawBox {
    fn from(b: RotatedBox) -> Self {
        RawBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h, angle: b.angle }
    }
}

/// Maps any finite angle onto `[-π/2, π/2)` modulo π.
///
/// Angles already inside the range are returned unchanged.
pub fn normalize_angle(angle: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&angle) {
        return angle;
    }
    let mut a = angle - PI * ((angle + FRAC_PI_2) / PI).floor();
    // floor() can land one period off when the quotient rounds.
    while a >= FRAC_PI_2 {
        a -= PI;
    }
    while a < -FRAC_PI_2 {
        a += PI;
    }
    a
}

impl RotatedBox {
    /// Builds a box, reducing `angle` into the canonical range.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> Result<Self, GeometryError> {
        let fields = [cx, cy, w, h, angle];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox(format!(
                "non-finite field in ({cx}, {cy}, {w}, {h}, {angle})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h, angle: normalize_angle(angle) })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four corners, counterclockwise, starting from the local `(-w/2, -h/2)` corner.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(dx, dy)| [self.cx + dx * c - dy * s, self.cy + dx * s + dy * c])
    }

    /// Whether a point lies inside the closed rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= 0.5 * self.w && v.abs() <= 0.5 * self.h
    }

    /// Axis-aligned bounds as `(xmin, ymin, xmax, ymax)`.
    pub fn aabb(&self) -> (f64, f64, f64, f64) {
        let pts = self.corners();
        let mut out = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for [x, y] in pts {
            out.0 = out.0.min(x);
            out.1 = out.1.min(y);
            out.2 = out.2.max(x);
            out.3 = out.3.max(y);
        }
        out
    }

    /// Applies a rigid rotation by `theta` about the origin.
    pub fn rotated_about_origin(&self, theta: f64) -> Result<Self, GeometryError> {
        let (s, c) = theta.sin_cos();
        RotatedBox::new(
            self.cx * c - self.cy * s,
            self.cx * s + self.cy * c,
            self.w,
            self.h,
            self.angle + theta,
        )
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.cx
            .total_cmp(&other.cx)
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
            .then(self.angle.total_cmp(&other.angle))
    }
}

/// A convex polygon with counterclockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    /// Validates orientation and convexity of the given vertex list.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon(format!(
                "{} vertices, need at least 3",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPolygon("non-finite vertex".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if dist(a, b) < CLIP_EPS {
                return Err(GeometryError::InvalidPolygon(format!("repeated vertex at index {i}")));
            }
            if cross(sub(b, a), sub(c, b)) < -CLIP_EPS * dist(a, b).max(dist(b, c)) {
                return Err(GeometryError::InvalidPolygon("not convex counterclockwise".into()));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Shoelace area (positive for counterclockwise order).
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }
}

/// Corner polygon of a box.
pub fn box_to_polygon(b: &RotatedBox) -> ConvexPolygon {
    ConvexPolygon { vertices: b.corners().to_vec() }
}

/// Area of the intersection of two convex polygons.
///
/// Clips `a` successively against each edge half-plane of `b`.
pub fn intersection_area(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let mut subject = a.vertices.clone();
    let mut scratch = Vec::with_capacity(subject.len() + 4);
    let clip = &b.vertices;
    for i in 0..clip.len() {
        let p = clip[i];
        let q = clip[(i + 1) % clip.len()];
        clip_half_plane(&subject, p, q, &mut scratch);
        std::mem::swap(&mut subject, &mut scratch);
        if subject.len() < 3 {
            return 0.0;
        }
    }
    let area = shoelace(&subject);
    if area < AREA_SNAP {
        0.0
    } else {
        area.min(a.area()).min(b.area())
    }
}

/// Intersection over union of two oriented rectangles.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    // Fixed argument order keeps the result bit-symmetric.
    let (first, second) = if a.total_cmp(b) == Ordering::Greater { (b, a) } else { (a, b) };
    if first == second {
        return 1.0;
    }
    let inter = intersection_area(&box_to_polygon(first), &box_to_polygon(second));
    let union = first.area() + second.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Whether four points in order form a simple (non-self-intersecting) quadrilateral.
pub fn quad_is_simple(q: &[[f64; 2]; 4]) -> bool {
    !segments_cross(q[0], q[1], q[2], q[3]) && !segments_cross(q[1], q[2], q[3], q[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(sub(b, a), sub(c, a));
    let d2 = cross(sub(b, a), sub(d, a));
    let d3 = cross(sub(d, c), sub(a, c));
    let d4 = cross(sub(d, c), sub(b, c));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Convex hull (counterclockwise, monotone chain) of a small point set.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 {
                let n = hull.len();
                if cross(sub(hull[n - 1], hull[n - 2]), sub(p, hull[n - 2])) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle of a point set, by checking every hull
/// edge direction. Ties keep the first hull edge.
pub fn min_area_rect(points: &[[f64; 2]]) -> Result<RotatedBox, GeometryError> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(GeometryError::InvalidBox("points are collinear".into()));
    }
    let mut best: Option<(f64, RotatedBox)> = None;
    for i in 0..hull.len() {
        let e = sub(hull[(i + 1) % hull.len()], hull[i]);
        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = [e[0] / len, e[1] / len];
        let v = [-u[1], u[0]];
        let (mut umin, mut umax, mut vmin, mut vmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let pu = p[0] * u[0] + p[1] * u[1];
            let pv = p[0] * v[0] + p[1] * v[1];
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let (w, h) = (umax - umin, vmax - vmin);
        let area = w * h;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let (cu, cv) = (0.5 * (umin + umax), 0.5 * (vmin + vmax));
            let cx = cu * u[0] + cv * v[0];
            let cy = cu * u[1] + cv * v[1];
            let b = RotatedBox::new(cx, cy, w, h, u[1].atan2(u[0]))?;
            best = Some((area, b));
        }
    }
    best.map(|(_, b)| b).ok_or_else(|| GeometryError::InvalidBox("degenerate point set".into()))
}

fn clip_half_plane(input: &[[f64; 2]], p: [f64; 2], q: [f64; 2], out: &mut Vec<[f64; 2]>) {
    out.clear();
    let edge = sub(q, p);
    let len = (edge[0] * edge[0] + edge[1] * edge[1]).sqrt();
    let side = |v: [f64; 2]| cross(edge, sub(v, p)) / len;
    let n = input.len();
    for i in 0..n {
        let cur = input[i];
        let next = input[(i + 1) % n];
        let dc = side(cur);
        let dn = side(next);
        let cur_in = dc >= -CLIP_EPS;
        let next_in = dn >= -CLIP_EPS;
        if cur_in {
            push_distinct(out, cur);
        }
        if cur_in != next_in && (dc - dn).abs() > 0.0 {
            let t = dc / (dc - dn);
            if (0.0..=1.0).contains(&t) {
                push_distinct(out, [cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
    }
    if out.len() > 1 && dist(out[0], out[out.len() - 1]) < CLIP_EPS {
        out.pop();
    }
}

fn push_distinct(out: &mut Vec<[f64; 2]>, v: [f64; 2]) {
    if out.last().is_none_or(|&last| dist(last, v) >= CLIP_EPS) {
        out.push(v);
    }
}

pub(crate) fn shoelace(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

pub(crate) fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}
