//! Boundary-anchored lines on an image rectangle.
//!
//! All coordinates are continuous: the image occupies `[0, W] x [0, H]` and
//! pixel `(row i, column j)` has its center at `(j + 0.5, i + 0.5)`. A [`Line`]
//! is stored as its two boundary endpoints; it always denotes the infinite
//! line through them, clipped to the rectangle.
//!
//! The perimeter is parameterized by arc length, starting at corner `(0, 0)`
//! and running clockwise on screen (`(0,0) -> (W,0) -> (W,H) -> (0,H)`). Arc
//! length gives every boundary point a total order, which fixes candidate
//! ordering and the canonical endpoint order of a line.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Maximum distance from the rectangle boundary for a valid endpoint.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Minimum separation between the two endpoints of a line.
pub const MIN_ENDPOINT_SEPARATION: f64 = 1e-6;
/// Polygons smaller than this are treated as empty.
pub const MIN_REGION_AREA: f64 = 1e-9;
/// Below this `|sin|` two lines are considered parallel.
pub const PARALLEL_SIN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    #[inline]
    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    #[inline]
    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    #[inline]
    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    #[inline]
    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 2-D cross product.
    #[inline]
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        self.sub(other).norm()
    }
}

/// Image (or feature-grid) extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageSize {
    width: usize,
    height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Validation(format!(
                "image size {width}x{height} is below the 2x2 minimum"
            )));
        }
        Ok(ImageSize { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn w(&self) -> f64 {
        self.width as f64
    }

    pub fn h(&self) -> f64 {
        self.height as f64
    }

    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.w() + self.h())
    }

    /// Corners in counter-clockwise (positive shoelace) order, starting at the origin.
    pub fn corners(&self) -> [Point; 4] {
        let (w, h) = (self.w(), self.h());
        [
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ]
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.w() && p.y >= 0.0 && p.y <= self.h()
    }

    /// Distance from `p` to the rectangle's boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let (w, h) = (self.w(), self.h());
        if self.contains(p) {
            p.x.min(w - p.x).min(p.y).min(h - p.y)
        } else {
            let cx = p.x.clamp(0.0, w);
            let cy = p.y.clamp(0.0, h);
            p.distance(Point::new(cx, cy))
        }
    }

    /// Nearest point on the rectangle boundary. Ties between edges resolve
    /// in the order top, right, bottom, left.
    pub fn project_to_boundary(&self, p: Point) -> Point {
        let (w, h) = (self.w(), self.h());
        if !self.contains(p) {
            return Point::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h));
        }
        let candidates = [
            (p.y, Point::new(p.x, 0.0)),
            (w - p.x, Point::new(w, p.y)),
            (h - p.y, Point::new(p.x, h)),
            (p.x, Point::new(0.0, p.y)),
        ];
        let mut best = candidates[0];
        for c in &candidates[1..] {
            if c.0 < best.0 {
                best = *c;
            }
        }
        best.1
    }

    /// Bitmask of the edges (top=1, right=2, bottom=4, left=8) that `p` lies on.
    pub fn edges_of(&self, p: Point) -> u8 {
        let (w, h) = (self.w(), self.h());
        let mut mask = 0;
        if p.y.abs() < BOUNDARY_TOL {
            mask |= 1;
        }
        if (p.x - w).abs() < BOUNDARY_TOL {
            mask |= 2;
        }
        if (p.y - h).abs() < BOUNDARY_TOL {
            mask |= 4;
        }
        if p.x.abs() < BOUNDARY_TOL {
            mask |= 8;
        }
        mask
    }

    /// Clockwise arc length of a boundary point measured from `(0, 0)`.
    pub fn arc_length(&self, p: Point) -> f64 {
        let (w, h) = (self.w(), self.h());
        let t = if p.y.abs() < BOUNDARY_TOL && p.x < w - BOUNDARY_TOL {
            p.x
        } else if (p.x - w).abs() < BOUNDARY_TOL && p.y < h - BOUNDARY_TOL {
            w + p.y
        } else if (p.y - h).abs() < BOUNDARY_TOL && p.x > BOUNDARY_TOL {
            w + h + (w - p.x)
        } else {
            2.0 * w + h + (h - p.y)
        };
        t.clamp(0.0, self.perimeter())
    }

    /// Inverse of [`ImageSize::arc_length`]; `t` wraps modulo the perimeter.
    pub fn point_at_arc(&self, t: f64) -> Point {
        let (w, h) = (self.w(), self.h());
        let t = t.rem_euclid(self.perimeter());
        if t < w {
            Point::new(t, 0.0)
        } else if t < w + h {
            Point::new(w, t - w)
        } else if t < 2.0 * w + h {
            Point::new(w - (t - w - h), h)
        } else {
            Point::new(0.0, h - (t - 2.0 * w - h))
        }
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A straight line through the image, stored as its two boundary endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line {
    pub start: Point,
    pub end: Point,
}

impl Line {
    /// Validates the endpoints against `size`.
    pub fn new(start: Point, end: Point, size: ImageSize) -> Result<Self> {
        for p in [start, end] {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::DegenerateLine(format!("non-finite endpoint {p:?}")));
            }
            let d = size.boundary_distance(p);
            if d >= BOUNDARY_TOL {
                return Err(Error::DegenerateLine(format!(
                    "endpoint ({}, {}) is {d:.3e} away from the {size} boundary",
                    p.x, p.y
                )));
            }
        }
        if start.distance(end) <= MIN_ENDPOINT_SEPARATION {
            return Err(Error::DegenerateLine("coincident endpoints".into()));
        }
        if size.edges_of(start) & size.edges_of(end) != 0 {
            return Err(Error::DegenerateLine(format!(
                "endpoints ({}, {}) and ({}, {}) lie on the same edge",
                start.x, start.y, end.x, end.y
            )));
        }
        Ok(Line { start, end })
    }

    pub fn from_coords(xs: f64, ys: f64, xe: f64, ye: f64, size: ImageSize) -> Result<Self> {
        Line::new(Point::new(xs, ys), Point::new(xe, ye), size)
    }

    /// Projects both endpoints onto the boundary before validating.
    pub fn projected(start: Point, end: Point, size: ImageSize) -> Result<Self> {
        Line::new(
            size.project_to_boundary(start),
            size.project_to_boundary(end),
            size,
        )
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.start.x, self.start.y, self.end.x, self.end.y]
    }

    pub fn reversed(&self) -> Line {
        Line {
            start: self.end,
            end: self.start,
        }
    }

    pub fn direction(&self) -> Point {
        self.end.sub(self.start)
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    /// Endpoint order with the smaller perimeter arc length first.
    pub fn canonical(&self, size: ImageSize) -> Line {
        if size.arc_length(self.start) <= size.arc_length(self.end) {
            *self
        } else {
            self.reversed()
        }
    }

    /// Same infinite line regardless of endpoint order.
    pub fn same_line_as(&self, other: &Line) -> bool {
        (self.start == other.start && self.end == other.end)
            || (self.start == other.end && self.end == other.start)
    }

    /// Signed perpendicular distance; negative on the right of `start -> end`
    /// in math orientation.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let d = self.direction();
        d.cross(p.sub(self.start)) / d.norm()
    }

    /// Unit normal `n` and offset `c` with `n . p + c` the signed distance.
    pub fn normal_form(&self) -> (Point, f64) {
        let d = self.direction();
        let len = d.norm();
        let n = Point::new(-d.y / len, d.x / len);
        (n, -n.dot(self.start))
    }

    /// Mirror image of `p` across the line.
    pub fn reflect(&self, p: Point) -> Point {
        let (n, c) = self.normal_form();
        let s = n.dot(p) + c;
        p.sub(n.scale(2.0 * s))
    }

    /// Uniformly scales both endpoints (image space to a coarser grid).
    pub fn scaled(&self, sx: f64, sy: f64) -> (Point, Point) {
        (
            Point::new(self.start.x * sx, self.start.y * sy),
            Point::new(self.end.x * sx, self.end.y * sy),
        )
    }
}

/// Perpendicular distance from `point` to the infinite line through `line`.
pub fn point_line_distance(line: &Line, point: Point) -> f64 {
    let (n, c) = line.normal_form();
    (n.dot(point) + c).abs()
}

/// Intersection of the two infinite lines, or `None` when they are parallel.
pub fn intersect(a: &Line, b: &Line) -> Option<Point> {
    let da = a.direction();
    let db = b.direction();
    let denom = da.cross(db);
    if (denom / (da.norm() * db.norm())).abs() < PARALLEL_SIN_TOL {
        return None;
    }
    let t = b.start.sub(a.start).cross(db) / denom;
    Some(a.start.add(da.scale(t)))
}

/// Every pair of perimeter samples spaced `step` apart that forms a valid line.
///
/// Samples start at `(0, 0)` and proceed clockwise. Pairs on a common edge
/// are skipped. Output is ordered lexicographically by the arc lengths of
/// the two endpoints, and each line is stored in canonical endpoint order.
pub fn generate_candidates(size: ImageSize, step: f64) -> Result<Vec<Line>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("candidate step must be positive, got {step}")));
    }
    let perimeter = size.perimeter();
    let mut samples = Vec::new();
    let mut k = 0usize;
    loop {
        let t = k as f64 * step;
        if t >= perimeter - BOUNDARY_TOL {
            break;
        }
        samples.push(size.point_at_arc(t));
        k += 1;
    }
    if samples.len() < 4 {
        return Err(Error::EmptyCandidates(format!(
            "step {step} leaves only {} sample point(s) on a {size} perimeter",
            samples.len()
        )));
    }
    let edges: Vec<u8> = samples.iter().map(|&p| size.edges_of(p)).collect();
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if edges[i] & edges[j] != 0 {
                continue;
            }
            if let Ok(line) = Line::new(samples[i], samples[j], size) {
                out.push(line);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCandidates(format!(
            "step {step} yields no valid pair on {size}"
        )));
    }
    Ok(out)
}

/// Convex polygon with vertices in counter-clockwise (positive-area) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let vertices = dedup_ring(vertices);
        if vertices.len() < 3 {
            return Err(Error::Validation(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let area = shoelace(&vertices);
        if !(area > MIN_REGION_AREA) {
            return Err(Error::Validation(format!(
                "polygon must be counter-clockwise with positive area, got {area}"
            )));
        }
        let n = vertices.len();
        let scale = vertices.iter().map(|p| p.x.abs().max(p.y.abs())).fold(1.0, f64::max);
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if b.sub(a).cross(c.sub(b)) < -1e-12 * scale * scale {
                return Err(Error::Validation("polygon is not convex".into()));
            }
        }
        Ok(ConvexPolygon { vertices })
    }

    pub fn rectangle(size: ImageSize) -> Self {
        ConvexPolygon {
            vertices: size.corners().to_vec(),
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            b.sub(a).cross(p.sub(a)) >= -1e-12
        })
    }

    /// Sutherland-Hodgman clip of `self` against the convex `clip` polygon.
    pub fn intersection(&self, clip: &ConvexPolygon) -> Option<ConvexPolygon> {
        let mut poly = self.vertices.clone();
        let n = clip.vertices.len();
        for i in 0..n {
            if poly.len() < 3 {
                return None;
            }
            poly = clip_halfplane(&poly, clip.vertices[i], clip.vertices[(i + 1) % n]);
        }
        let poly = dedup_ring(poly);
        if poly.len() < 3 || shoelace(&poly) <= MIN_REGION_AREA {
            return None;
        }
        Some(ConvexPolygon { vertices: poly })
    }

    pub fn intersection_area(&self, clip: &ConvexPolygon) -> f64 {
        self.intersection(clip).map_or(0.0, |p| p.area())
    }
}

fn dedup_ring(mut v: Vec<Point>) -> Vec<Point> {
    v.dedup_by(|a, b| a.distance(*b) < 1e-12);
    while v.len() > 1 && v[0].distance(v[v.len() - 1]) < 1e-12 {
        v.pop();
    }
    v
}

pub(crate) fn shoelace(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        s += poly[i].cross(poly[(i + 1) % n]);
    }
    0.5 * s
}

/// Keeps the part of `poly` on the left of (or on) the directed line `a -> b`.
pub(crate) fn clip_halfplane(poly: &[Point], a: Point, b: Point) -> Vec<Point> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    let dir = b.sub(a);
    for i in 0..n {
        let s = poly[i];
        let e = poly[(i + 1) % n];
        let sc = dir.cross(s.sub(a));
        let ec = dir.cross(e.sub(a));
        let s_in = sc >= 0.0;
        let e_in = ec >= 0.0;
        if s_in != e_in {
            let t = sc / (sc - ec);
            out.push(s.add(e.sub(s).scale(t)));
        }
        if e_in {
            out.push(e);
        }
    }
    out
}

/// The two regions `line` cuts the rectangle into.
///
/// The first polygon lies on the side holding the corner with the smallest
/// signed distance, i.e. the negative side of `start -> end`.
pub fn split_regions(line: &Line, size: ImageSize) -> Result<(ConvexPolygon, ConvexPolygon)> {
    let rect = size.corners();
    // negative side of s->e is the left of e->s
    let first = dedup_ring(clip_halfplane(&rect, line.end, line.start));
    let second = dedup_ring(clip_halfplane(&rect, line.start, line.end));
    let a1 = shoelace(&first);
    let a2 = shoelace(&second);
    if first.len() < 3 || second.len() < 3 || a1 < MIN_REGION_AREA || a2 < MIN_REGION_AREA {
        return Err(Error::DegenerateLine(format!(
            "line ({}, {}) -> ({}, {}) leaves an empty region (areas {a1:.3e}, {a2:.3e})",
            line.start.x, line.start.y, line.end.x, line.end.y
        )));
    }
    Ok((
        ConvexPolygon { vertices: first },
        ConvexPolygon { vertices: second },
    ))
}

/// A line with its split regions cached, for repeated mIoU evaluation.
#[derive(Clone, Debug)]
pub struct SplitLine {
    line: Line,
    first: ConvexPolygon,
    first_area: f64,
    second_area: f64,
}

impl SplitLine {
    pub fn new(line: Line, size: ImageSize) -> Result<Self> {
        let (first, second) = split_regions(&line, size)?;
        let first_area = first.area();
        let second_area = second.area();
        Ok(SplitLine {
            line,
            first,
            first_area,
            second_area,
        })
    }

    pub fn line(&self) -> &Line {
        &self.line
    }

    /// mIoU against another split line of the same image.
    pub fn miou(&self, other: &SplitLine) -> f64 {
        if self.line.same_line_as(&other.line) {
            return 1.0;
        }
        // argument order is canonicalized so that miou(a, b) == miou(b, a) bitwise
        let (a, b) = match cmp_lines(&self.line, &other.line) {
            Ordering::Greater => (other, self),
            _ => (self, other),
        };
        let clipped = clip_halfplane(a.first.vertices(), b.line.end, b.line.start);
        let i11 = shoelace(&clipped).max(0.0).min(a.first_area.min(b.first_area));
        let (a1, a2, b1, b2) = (a.first_area, a.second_area, b.first_area, b.second_area);
        let i12 = (a1 - i11).max(0.0);
        let i21 = (b1 - i11).max(0.0);
        let i22 = (a2 - i21).max(0.0);
        let same = 0.5 * (iou(i11, a1, b1) + iou(i22, a2, b2));
        let swapped = 0.5 * (iou(i12, a1, b2) + iou(i21, a2, b1));
        same.max(swapped).clamp(0.0, 1.0)
    }
}

fn iou(inter: f64, a: f64, b: f64) -> f64 {
    let union = a + b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn cmp_lines(a: &Line, b: &Line) -> Ordering {
    a.coords()
        .iter()
        .zip(b.coords().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Mean region IoU between two lines, maximized over the two region pairings.
pub fn miou(a: &Line, b: &Line, size: ImageSize) -> Result<f64> {
    let sa = SplitLine::new(*a, size)?;
    let sb = SplitLine::new(*b, size)?;
    Ok(sa.miou(&sb))
}

/// Row-major `n x n` mIoU matrix (diagonal is 1).
pub fn pairwise_miou(lines: &[Line], size: ImageSize) -> Result<Vec<f64>> {
    let split = lines
        .iter()
        .map(|l| SplitLine::new(*l, size))
        .collect::<Result<Vec<_>>>()?;
    let n = split.len();
    let mut out = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let m = split[i].miou(&split[j]);
            out[i * n + j] = m;
            out[j * n + i] = m;
        }
    }
    Ok(out)
}
