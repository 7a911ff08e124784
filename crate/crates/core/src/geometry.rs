//! Normalized bounding boxes, IoU, and patch-grid region masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in normalized image coordinates, `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.x0) && (0.0..1.0).contains(&self.y0) && self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= 1.0 && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid normalized bbox {:?}", self.to_array())))
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Whether the center of grid cell `(row, col)` lies inside the box.
    pub fn covers_cell(&self, row: usize, col: usize, grid: (usize, usize)) -> bool {
        let (h, w) = grid;
        let cx = (col as f64 + 0.5) / w as f64;
        let cy = (row as f64 + 0.5) / h as f64;
        self.contains_point(cx, cy)
    }
}

/// Binary indicator over the patch positions of an `h × w` grid, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    values: Vec<f64>,
    grid: (usize, usize),
}

impl RegionMask {
    /// Marks patch `n` iff the center of its grid cell lies inside `bbox`.
    pub fn from_bbox(bbox: &BBox, grid: (usize, usize)) -> Result<Self> {
        bbox.validate()?;
        let (h, w) = grid;
        let mut values = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                if bbox.covers_cell(r, c, grid) {
                    values[r * w + c] = 1.0;
                }
            }
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::EmptyMask(bbox.to_array()));
        }
        Ok(Self { values, grid })
    }

    pub fn from_values(values: Vec<f64>, grid: (usize, usize)) -> Result<Self> {
        if values.len() != grid.0 * grid.1 {
            return Err(Error::Dimension(format!("mask of length {} for grid {grid:?}", values.len())));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::Contract("mask selects no patch".into()));
        }
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1.0).count()
    }

    pub fn is_set(&self, n: usize) -> bool {
        self.values[n] == 1.0
    }
}
