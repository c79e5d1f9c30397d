//! Box arithmetic and the 9-point lesion sampling used by the distillation
//! losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Strictly positive extent in both directions.
    pub fn is_proper(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox { x_min: width - self.x_max, y_min: self.y_min, x_max: width - self.x_min, y_max: self.y_max }
    }
}

/// Integer feature-map location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// The nine roles a critical point can play, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointRole {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    MidTop,
    MidBottom,
    MidLeft,
    MidRight,
}

impl PointRole {
    pub const ORDER: [PointRole; 9] = [
        PointRole::Center,
        PointRole::TopLeft,
        PointRole::TopRight,
        PointRole::BottomLeft,
        PointRole::BottomRight,
        PointRole::MidTop,
        PointRole::MidBottom,
        PointRole::MidLeft,
        PointRole::MidRight,
    ];

    pub fn index(self) -> usize {
        Self::ORDER.iter().position(|&r| r == self).unwrap()
    }

    pub fn is_corner(self) -> bool {
        matches!(self, PointRole::TopLeft | PointRole::TopRight | PointRole::BottomLeft | PointRole::BottomRight)
    }

    pub fn is_side_midpoint(self) -> bool {
        matches!(self, PointRole::MidTop | PointRole::MidBottom | PointRole::MidLeft | PointRole::MidRight)
    }
}

pub const NUM_CRITICAL: usize = 9;

/// Nine feature-map cells ordered as [`PointRole::ORDER`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticalPoints(pub [Cell; NUM_CRITICAL]);

impl CriticalPoints {
    pub fn cells(&self) -> &[Cell; NUM_CRITICAL] {
        &self.0
    }

    pub fn get(&self, role: PointRole) -> Cell {
        self.0[role.index()]
    }
}

/// Map an image-space box onto a feature map with the given total stride,
/// clamping to valid cell coordinates. The result may be degenerate.
pub fn scale_box(bbox: &BBox, stride: usize, feat_h: usize, feat_w: usize) -> BBox {
    assert!(stride >= 1, "stride must be positive");
    let s = stride as f64;
    let (max_x, max_y) = ((feat_w - 1) as f64, (feat_h - 1) as f64);
    BBox {
        x_min: (bbox.x_min / s).clamp(0.0, max_x),
        y_min: (bbox.y_min / s).clamp(0.0, max_y),
        x_max: (bbox.x_max / s).clamp(0.0, max_x),
        y_max: (bbox.y_max / s).clamp(0.0, max_y),
    }
}

/// Nearest integer, halves going to the smaller neighbour.
pub fn round_half_down(v: f64) -> usize {
    (v - 0.5).ceil().max(0.0) as usize
}

/// Center, four corners and four side midpoints of a feature-space box.
pub fn critical_points(bbox: &BBox) -> CriticalPoints {
    let (cx, cy) = bbox.center();
    let (x0, x1, xc) = (round_half_down(bbox.x_min), round_half_down(bbox.x_max), round_half_down(cx));
    let (y0, y1, yc) = (round_half_down(bbox.y_min), round_half_down(bbox.y_max), round_half_down(cy));
    CriticalPoints([
        Cell::new(yc, xc),
        Cell::new(y0, x0),
        Cell::new(y0, x1),
        Cell::new(y1, x0),
        Cell::new(y1, x1),
        Cell::new(y0, xc),
        Cell::new(y1, xc),
        Cell::new(yc, x0),
        Cell::new(yc, x1),
    ])
}

/// Gathers the feature vectors at `cells` from image `image` of a
/// `[N, D, H, W]` (or `[D, H, W]`, with `image == 0`) feature map, giving a
/// differentiable `D × cells.len()` matrix.
pub fn gather_cells(graph: &mut Graph, features: Var, image: usize, cells: &[Cell]) -> Result<Var> {
    let shape = graph.value(features).shape().to_vec();
    let (n, d, h, w) = match shape[..] {
        [d, h, w] => (1, d, h, w),
        [n, d, h, w] => (n, d, h, w),
        _ => return Err(Error::Shape(format!("gather_cells: expected a 3-D or 4-D feature map, got {shape:?}"))),
    };
    if image >= n {
        return Err(Error::Geometry(format!("image {image} out of range for batch of {n}")));
    }
    if let Some(bad) = cells.iter().find(|c| c.row >= h || c.col >= w) {
        return Err(Error::Geometry(format!("cell {bad:?} outside {h}x{w} feature map")));
    }
    let base = image * d * h * w;
    let mut indices = Vec::with_capacity(d * cells.len());
    for ch in 0..d {
        for c in cells {
            indices.push(base + (ch * h + c.row) * w + c.col);
        }
    }
    graph.gather(features, indices, &[d, cells.len()])
}

/// `D × 9` critical feature matrix for one lesion.
pub fn gather_critical(graph: &mut Graph, features: Var, image: usize, points: &CriticalPoints) -> Result<Var> {
    gather_cells(graph, features, image, points.cells())
}

/// True when `cell` touches the (inclusive) extent of any box.
pub fn covered_by_any(cell: Cell, boxes: &[BBox]) -> bool {
    boxes.iter().any(|b| {
        let (r, c) = (cell.row as f64, cell.col as f64);
        c >= b.x_min.floor() && c <= b.x_max.ceil() && r >= b.y_min.floor() && r <= b.y_max.ceil()
    })
}

/// Draws `count` distinct background cells uniformly from the cells of an
/// `h × w` map not covered by any feature-space box.
pub fn sample_noncritical<R: Rng + ?Sized>(
    feat_h: usize,
    feat_w: usize,
    scaled_boxes: &[BBox],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Cell>> {
    let background: Vec<Cell> = (0..feat_h)
        .flat_map(|row| (0..feat_w).map(move |col| Cell::new(row, col)))
        .filter(|&c| !covered_by_any(c, scaled_boxes))
        .collect();
    if background.len() < count {
        return Err(Error::Geometry(format!(
            "only {} background cells outside {} boxes, need {count}",
            background.len(),
            scaled_boxes.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, background.len(), count)
        .into_iter()
        .map(|i| background[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseArray;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_divides_then_clamps() {
        let b = scale_box(&BBox::new(32.0, 64.0, 96.0, 128.0), 8, 16, 16);
        assert_eq!(b, BBox::new(4.0, 8.0, 12.0, 15.0));
        let b = scale_box(&BBox::new(0.0, 0.0, 8.0, 8.0), 1, 16, 16);
        assert_eq!(b, BBox::new(0.0, 0.0, 8.0, 8.0));
        let b = scale_box(&BBox::new(120.0, 120.0, 160.0, 160.0), 8, 16, 16);
        assert_eq!(b, BBox::new(15.0, 15.0, 15.0, 15.0));
    }

    #[test]
    fn critical_points_golden() {
        let p = critical_points(&BBox::new(2.0, 2.0, 6.0, 10.0));
        // (x, y) pairs from the box geometry, stored as (row = y, col = x).
        let xy = [(4, 6), (2, 2), (6, 2), (2, 10), (6, 10), (4, 2), (4, 10), (2, 6), (6, 6)];
        for (cell, (x, y)) in p.cells().iter().zip(xy) {
            assert_eq!(*cell, Cell::new(y, x));
        }
    }

    #[test]
    fn degenerate_box_collapses() {
        let p = critical_points(&BBox::new(3.0, 3.0, 3.0, 3.0));
        assert!(p.cells().iter().all(|&c| c == Cell::new(3, 3)));
    }

    #[test]
    fn ties_round_down() {
        assert_eq!(round_half_down(4.5), 4);
        assert_eq!(round_half_down(4.51), 5);
        assert_eq!(round_half_down(4.49), 4);
        assert_eq!(round_half_down(0.5), 0);
        assert_eq!(round_half_down(7.0), 7);
    }

    #[test]
    fn gather_constant_and_one_hot() {
        let mut g = Graph::new();
        let fm = g.leaf(DenseArray::filled(&[3, 4, 4], 5.0));
        let pts = critical_points(&BBox::new(0.0, 0.0, 3.0, 3.0));
        let m = gather_critical(&mut g, fm, 0, &pts).unwrap();
        assert_eq!(g.value(m).shape(), &[3, 9]);
        assert!(g.value(m).data().iter().all(|&v| v == 5.0));

        let mut one_hot = DenseArray::zeros(&[2, 4, 4]);
        one_hot.set(&[1, 0, 3], 1.0);
        let fm = g.leaf(one_hot);
        let m = gather_critical(&mut g, fm, 0, &pts).unwrap();
        let nonzero: Vec<usize> = (0..18).filter(|&i| g.value(m).data()[i] != 0.0).collect();
        // Channel 1, top-right corner column.
        assert_eq!(nonzero, vec![9 + PointRole::TopRight.index()]);
    }

    #[test]
    fn gather_gradient_counts_selections() {
        let mut g = Graph::new();
        let fm = g.leaf(DenseArray::filled(&[1, 4, 4], 1.0));
        let pts = critical_points(&BBox::new(1.0, 1.0, 1.0, 2.0));
        let m = gather_critical(&mut g, fm, 0, &pts).unwrap();
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        let grad = g.grad(fm);
        let mut expected = DenseArray::zeros(&[1, 4, 4]);
        for c in pts.cells() {
            let v = expected.get(&[0, c.row, c.col]);
            expected.set(&[0, c.row, c.col], v + 1.0);
        }
        assert_eq!(grad, expected);
        assert_eq!(grad.sum(), 9.0);
    }

    #[test]
    fn gather_rejects_out_of_bounds() {
        let mut g = Graph::new();
        let fm = g.leaf(DenseArray::zeros(&[1, 4, 4]));
        let pts = critical_points(&BBox::new(0.0, 0.0, 5.0, 5.0));
        assert!(matches!(gather_critical(&mut g, fm, 0, &pts), Err(Error::Geometry(_))));
    }

    #[test]
    fn background_sampling_full_and_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cells = sample_noncritical(16, 16, &[], 9, &mut rng).unwrap();
        let mut uniq = cells.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 9);

        // Covers rows 0..=14 fully; row 15 keeps columns 0..9 free via a
        // second box over columns 9..=15.
        let boxes = [BBox::new(0.0, 0.0, 15.0, 14.0), BBox::new(9.0, 15.0, 15.0, 15.0)];
        let mut cells = sample_noncritical(16, 16, &boxes, 9, &mut rng).unwrap();
        cells.sort();
        let expected: Vec<Cell> = (0..9).map(|c| Cell::new(15, c)).collect();
        assert_eq!(cells, expected);
    }

    #[test]
    fn background_sampling_rejects_covered_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes = [BBox::new(0.0, 0.0, 15.0, 15.0)];
        assert!(matches!(sample_noncritical(16, 16, &boxes, 9, &mut rng), Err(Error::Geometry(_))));
    }

    #[test]
    fn iou_of_offset_boxes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 6.0, 10.0, 16.0);
        assert!((a.iou(&b) - 0.25).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
