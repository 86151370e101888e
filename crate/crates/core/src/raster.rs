//! 8-bit grayscale images and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Inclusive pixel-coordinate box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Thresholds `values` (row-major, `height x width`) at `threshold`.
    pub fn from_probabilities(width: usize, height: usize, values: &[f64], threshold: f64) -> Self {
        Self::new(width, height, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "masks are {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn bounding_box(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert(BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x,
                        y_max: y,
                    });
                    b.x_min = b.x_min.min(x);
                    b.y_min = b.y_min.min(y);
                    b.x_max = b.x_max.max(x);
                    b.y_max = b.y_max.max(y);
                }
            }
        }
        bb
    }

    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Dilation by a Euclidean disk of the given radius.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let mut out = BinaryMask::empty(self.width, self.height);
        for (x, y) in self.foreground() {
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
        out
    }

    /// Area-weighted downsampling followed by a `>= 0.5` threshold.
    pub fn downsample_area(&self, out_w: usize, out_h: usize) -> BinaryMask {
        let cov = self.area_coverage(out_w, out_h);
        BinaryMask::from_probabilities(out_w, out_h, &cov, 0.5)
    }

    /// Fraction of each output cell covered by foreground (area interpolation).
    pub fn area_coverage(&self, out_w: usize, out_h: usize) -> Vec<f64> {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let spans = |o: usize, scale: f64, len: usize| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut v = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < len {
                let w = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if w > 0.0 {
                    v.push((i, w));
                }
                i += 1;
            }
            v
        };
        let xs: Vec<_> = (0..out_w).map(|o| spans(o, sx, self.width)).collect();
        let ys: Vec<_> = (0..out_h).map(|o| spans(o, sy, self.height)).collect();
        let mut out = Vec::with_capacity(out_w * out_h);
        for ysp in &ys {
            for xsp in &xs {
                let mut acc = 0.0;
                for &(iy, wy) in ysp {
                    for &(ix, wx) in xsp {
                        if self.get(ix, iy) {
                            acc += wx * wy;
                        }
                    }
                }
                out.push(acc / (sx * sy));
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

pub fn jaccard_ratio(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let u = a.union_count(b);
    if u == 0 {
        1.0
    } else {
        a.intersection_count(b) as f64 / u as f64
    }
}
