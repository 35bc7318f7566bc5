//! Raster masks, points and the overlap/shape primitives the pipeline is built on.
//!
//! All masks live on the integer pixel grid of a parent image. A mask stores a
//! local `width × height` window plus the offset of that window in the parent,
//! so a patch-sized segmentation and a full-image ground-truth mask can be
//! compared directly. Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`
//! for rasterization, while centroids are reported in pixel-index coordinates
//! (a single pixel at `(3, 7)` has centroid `(3.0, 7.0)`).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("cannot fit an axis: all points coincide")]
    DegenerateAxis,
    #[error("polygon has zero area")]
    DegeneratePolygon,
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
}

/// A point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(&self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }

    /// Index of the pixel containing this point (pixel `i` covers `[i - 0.5, i + 0.5)`).
    pub fn pixel(&self) -> (i64, i64) {
        ((self.x + 0.5).floor() as i64, (self.y + 0.5).floor() as i64)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

/// Integer position of a local raster inside its parent image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Offset {
    pub x: i64,
    pub y: i64,
}

impl Offset {
    pub const ZERO: Offset = Offset { x: 0, y: 0 };

    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// True if the pixel containing `p` is inside the image.
    pub fn contains_point(&self, p: Point2) -> bool {
        if !p.is_finite() {
            return false;
        }
        let (x, y) = p.pixel();
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

/// A fixed-size window cut out of a parent image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub image: GrayImage,
    pub offset: Offset,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.image.width
    }

    pub fn to_local(&self, p: Point2) -> Point2 {
        Point2::new(p.x - self.offset.x as f64, p.y - self.offset.y as f64)
    }

    pub fn to_global(&self, p: Point2) -> Point2 {
        Point2::new(p.x + self.offset.x as f64, p.y + self.offset.y as f64)
    }
}

/// Foreground mask on a local window of the parent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    offset: Offset,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, offset: Offset) -> Self {
        Self {
            width,
            height,
            offset,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, offset: Offset, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(Self {
            width,
            height,
            offset,
            bits,
        })
    }

    /// Builds a mask from a set of global pixel coordinates, cropped to their bounding box.
    pub fn from_pixels<I: IntoIterator<Item = (i64, i64)>>(pixels: I) -> Self {
        let pts: Vec<(i64, i64)> = pixels.into_iter().collect();
        if pts.is_empty() {
            return Self::new(0, 0, Offset::ZERO);
        }
        let x0 = pts.iter().map(|p| p.0).min().unwrap();
        let y0 = pts.iter().map(|p| p.1).min().unwrap();
        let x1 = pts.iter().map(|p| p.0).max().unwrap();
        let y1 = pts.iter().map(|p| p.1).max().unwrap();
        let mut m = Self::new((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize, Offset::new(x0, y0));
        for (x, y) in pts {
            m.set_global(x, y, true);
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn offset(&self) -> Offset {
        self.offset
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Sets a pixel by parent-image coordinates; returns false if outside the window.
    pub fn set_global(&mut self, x: i64, y: i64, v: bool) -> bool {
        let lx = x - self.offset.x;
        let ly = y - self.offset.y;
        if lx < 0 || ly < 0 || lx >= self.width as i64 || ly >= self.height as i64 {
            return false;
        }
        self.set(lx as usize, ly as usize, v);
        true
    }

    /// Tests a pixel by parent-image coordinates; pixels outside the window are background.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let lx = x - self.offset.x;
        let ly = y - self.offset.y;
        if lx < 0 || ly < 0 || lx >= self.width as i64 || ly >= self.height as i64 {
            return false;
        }
        self.get(lx as usize, ly as usize)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels in parent-image coordinates, row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| {
            (
                self.offset.x + (i % self.width) as i64,
                self.offset.y + (i / self.width) as i64,
            )
        })
    }

    /// Tight bounding box `(x0, y0, x1, y1)` of the foreground, exclusive upper bounds.
    pub fn bbox(&self) -> Option<(i64, i64, i64, i64)> {
        let mut bb: Option<(i64, i64, i64, i64)> = None;
        for (x, y) in self.pixels() {
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bb
    }

    /// Longer side of the tight bounding box, 0 for an empty mask.
    pub fn bbox_long_side(&self) -> usize {
        self.bbox()
            .map(|(x0, y0, x1, y1)| (x1 - x0).max(y1 - y0) as usize)
            .unwrap_or(0)
    }

    /// Restricts the window to `[0, width) × [0, height)` of the parent image.
    pub fn clip_to(&self, width: usize, height: usize) -> BinaryMask {
        let x0 = self.offset.x.max(0);
        let y0 = self.offset.y.max(0);
        let x1 = (self.offset.x + self.width as i64).min(width as i64);
        let y1 = (self.offset.y + self.height as i64).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return BinaryMask::new(0, 0, Offset::new(x0, y0));
        }
        let mut out = BinaryMask::new((x1 - x0) as usize, (y1 - y0) as usize, Offset::new(x0, y0));
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x, y) {
                    out.set_global(x, y, true);
                }
            }
        }
        out
    }

    /// Shrinks the window to the tight bounding box of the foreground.
    pub fn cropped(&self) -> BinaryMask {
        match self.bbox() {
            None => BinaryMask::new(0, 0, self.offset),
            Some(_) => BinaryMask::from_pixels(self.pixels()),
        }
    }

    pub fn translated(&self, dx: i64, dy: i64) -> BinaryMask {
        BinaryMask {
            offset: Offset::new(self.offset.x + dx, self.offset.y + dy),
            ..self.clone()
        }
    }

    /// True if both masks have the same foreground pixel set, regardless of window.
    pub fn same_pixels(&self, other: &BinaryMask) -> bool {
        self.area() == other.area() && intersection_count(self, other) == self.area()
    }

    /// Renders the mask into a full-size `0/255` raster.
    pub fn to_image(&self, width: usize, height: usize) -> GrayImage {
        let mut img = GrayImage::new(width, height);
        for (x, y) in self.pixels() {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                img.set(x as usize, y as usize, 255);
            }
        }
        img
    }

    /// Nonzero pixels of a full-size raster become foreground.
    pub fn from_image(img: &GrayImage) -> BinaryMask {
        let bits = img.data.iter().map(|&v| v != 0).collect();
        BinaryMask {
            width: img.width,
            height: img.height,
            offset: Offset::ZERO,
            bits,
        }
    }
}

/// Number of pixels foreground in both masks.
pub fn intersection_count(a: &BinaryMask, b: &BinaryMask) -> usize {
    let x0 = a.offset.x.max(b.offset.x);
    let y0 = a.offset.y.max(b.offset.y);
    let x1 = (a.offset.x + a.width as i64).min(b.offset.x + b.width as i64);
    let y1 = (a.offset.y + a.height as i64).min(b.offset.y + b.height as i64);
    let mut n = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            if a.contains(x, y) && b.contains(x, y) {
                n += 1;
            }
        }
    }
    n
}

/// Mean of foreground pixel coordinates in parent-image coordinates.
pub fn centroid(mask: &BinaryMask) -> Result<Point2, GeometryError> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.pixels() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok(Point2::new(sx / n as f64, sy / n as f64))
}

/// Dice similarity coefficient `2|A∩B| / (|A| + |B|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let total = a.area() + b.area();
    if total == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok(2.0 * intersection_count(a, b) as f64 / total as f64)
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = intersection_count(a, b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// An oriented line through `origin` with unit `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub origin: Point2,
    pub direction: Point2,
}

impl Axis {
    pub fn project(&self, p: Point2) -> f64 {
        (p - self.origin).dot(self.direction)
    }

    pub fn reversed(&self) -> Axis {
        Axis {
            origin: self.origin,
            direction: self.direction * -1.0,
        }
    }
}

/// Fits the principal axis of a point cloud.
///
/// The direction is the dominant eigenvector of the 2×2 covariance matrix,
/// signed so that `dy > 0`, or `dx > 0` when the axis is horizontal.
/// Isotropic clouds resolve to the x axis.
pub fn principal_axis(points: &[Point2]) -> Result<Axis, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::DegenerateAxis);
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Point2::default(), |acc, &p| acc + p) * (1.0 / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = *p - mean;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    if sxx + syy == 0.0 {
        return Err(GeometryError::DegenerateAxis);
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut dir = Point2::new(theta.cos(), theta.sin());
    // snap exact zeros so collinear axis-aligned inputs yield exact unit vectors
    if sxy == 0.0 {
        dir = if syy > sxx {
            Point2::new(0.0, 1.0)
        } else {
            Point2::new(1.0, 0.0)
        };
    }
    if dir.y < 0.0 || (dir.y == 0.0 && dir.x < 0.0) {
        dir = dir * -1.0;
    }
    if dir.y == 0.0 {
        dir.y = 0.0; // drop a negative zero
    }
    Ok(Axis {
        origin: mean,
        direction: dir,
    })
}

/// Indices of `points` ordered by ascending projection on `axis`, ties by ascending y then x.
pub fn sort_by_projection(points: &[Point2], axis: &Axis) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| {
        let (pi, pj) = (points[i], points[j]);
        axis.project(pi)
            .total_cmp(&axis.project(pj))
            .then(pi.y.total_cmp(&pj.y))
            .then(pi.x.total_cmp(&pj.x))
    });
    idx
}

/// Cuts a `size × size` window centered on the rounded `center`, zero-padding outside the image.
pub fn extract_patch(image: &GrayImage, center: Point2, size: usize) -> Patch {
    let size = size.max(1);
    let half = (size / 2) as i64;
    let (cx, cy) = center.pixel();
    let (ox, oy) = (cx - half, cy - half);
    let mut out = GrayImage::new(size, size);
    for py in 0..size {
        let y = oy + py as i64;
        if y < 0 || y >= image.height as i64 {
            continue;
        }
        for px in 0..size {
            let x = ox + px as i64;
            if x < 0 || x >= image.width as i64 {
                continue;
            }
            out.set(px, py, image.get(x as usize, y as usize));
        }
    }
    Patch {
        image: out,
        offset: Offset::new(ox, oy),
    }
}

/// Signed shoelace area (positive for counter-clockwise in a y-up frame).
pub fn polygon_signed_area(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

/// Even-odd scanline fill: a pixel is foreground iff its center lies inside the polygon.
///
/// The result is clipped to `[0, width) × [0, height)` and cropped to the
/// polygon's pixel bounding box.
pub fn rasterize_polygon(
    vertices: &[Point2],
    width: usize,
    height: usize,
) -> Result<BinaryMask, GeometryError> {
    if vertices.len() < 3 {
        return Err(GeometryError::TooFewVertices(vertices.len()));
    }
    if polygon_signed_area(vertices).abs() < 1e-12 {
        return Err(GeometryError::DegeneratePolygon);
    }
    let min_x = vertices.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = vertices.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = vertices.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = vertices.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);

    let x0 = (min_x.floor() as i64).max(0);
    let x1 = (max_x.ceil() as i64).min(width as i64);
    let y0 = (min_y.floor() as i64).max(0);
    let y1 = (max_y.ceil() as i64).min(height as i64);
    if x1 <= x0 || y1 <= y0 {
        return Ok(BinaryMask::new(0, 0, Offset::new(x0.max(0), y0.max(0))));
    }
    let mut mask = BinaryMask::new((x1 - x0) as usize, (y1 - y0) as usize, Offset::new(x0, y0));
    let n = vertices.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    for y in y0..y1 {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            // half-open rule: count an edge when yc is in [min, max)
            if (a.y <= yc) != (b.y <= yc) {
                let t = (yc - a.y) / (b.y - a.y);
                crossings.push(a.x + t * (b.x - a.x));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            // pixel centers x + 0.5 in [left, right)
            let first = (span[0] - 0.5).ceil() as i64;
            let last = (span[1] - 0.5).ceil() as i64 - 1;
            for x in first.max(x0)..=last.min(x1 - 1) {
                mask.set_global(x, y, true);
            }
        }
    }
    Ok(mask.cropped())
}

/// Rectilinear outline of a row-convex mask, tracing pixel edges.
///
/// Rasterizing the returned polygon reproduces the mask exactly, because no
/// pixel center lies on a pixel edge. Returns `None` if some row has more than
/// one run or the occupied rows are not contiguous.
pub fn mask_outline(mask: &BinaryMask) -> Option<Vec<Point2>> {
    let (_, y0, _, y1) = mask.bbox()?;
    let mut runs: Vec<(i64, i64)> = Vec::new();
    for y in y0..y1 {
        let xs: Vec<i64> = mask.pixels().filter(|p| p.1 == y).map(|p| p.0).collect();
        let first = *xs.first()?;
        let last = *xs.last()?;
        if (last - first + 1) as usize != xs.len() {
            return None;
        }
        runs.push((first, last + 1));
    }
    let mut pts: Vec<(i64, i64)> = Vec::new();
    for (i, &(_, right)) in runs.iter().enumerate() {
        let y = y0 + i as i64;
        pts.push((right, y));
        pts.push((right, y + 1));
    }
    for (i, &(left, _)) in runs.iter().enumerate().rev() {
        let y = y0 + i as i64;
        pts.push((left, y + 1));
        pts.push((left, y));
    }
    pts.dedup();
    if pts.first() == pts.last() {
        pts.pop();
    }
    // drop collinear vertices
    let n = pts.len();
    let keep: Vec<(i64, i64)> = (0..n)
        .filter(|&i| {
            let a = pts[(i + n - 1) % n];
            let b = pts[i];
            let c = pts[(i + 1) % n];
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
        })
        .map(|i| pts[i])
        .collect();
    Some(keep.into_iter().map(|(x, y)| Point2::new(x as f64, y as f64)).collect())
}

/// Orders `f64` values with `total_cmp`; handy for `max_by`.
pub fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}
