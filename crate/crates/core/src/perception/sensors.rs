//! Sensor stand-ins: BEV rasterization of the point cloud and inverse-depth
//! splat images for four body-mounted cameras.

use serde::{Deserialize, Serialize};

use crate::simulator::{AlignedScene, Point3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// BEV cells per side.
    pub bev_cells: usize,
    /// The grid covers `[-extent, extent]^2` meters.
    pub bev_extent: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { bev_cells: 64, bev_extent: 128.0, image_height: 16, image_width: 32 }
    }
}

impl SensorConfig {
    pub fn bev_resolution(&self) -> f64 {
        2.0 * self.bev_extent / self.bev_cells as f64
    }
}

/// Two-channel grid `(cells, cells, 2)`: max height and `ln(1 + count)`.
/// Row index follows body x, column index body y.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub cells: usize,
    pub resolution: f64,
    pub extent: f64,
    pub grid: Vec<f64>,
}

impl BevMap {
    pub fn height(&self, i: usize, j: usize) -> f64 {
        self.grid[(i * self.cells + j) * 2]
    }

    pub fn density(&self, i: usize, j: usize) -> f64 {
        self.grid[(i * self.cells + j) * 2 + 1]
    }

    /// Cell containing body-frame coordinates `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x + self.extent) / self.resolution).floor();
        let fj = ((y + self.extent) / self.resolution).floor();
        let n = self.cells as f64;
        if fi < 0.0 || fj < 0.0 || fi >= n || fj >= n {
            None
        } else {
            Some((fi as usize, fj as usize))
        }
    }
}

pub fn rasterize_bev(points: &[Point3], cfg: &SensorConfig) -> BevMap {
    let cells = cfg.bev_cells;
    let mut map = BevMap { cells, resolution: cfg.bev_resolution(), extent: cfg.bev_extent, grid: vec![0.0; cells * cells * 2] };
    let mut counts = vec![0u32; cells * cells];
    let mut heights = vec![f64::NEG_INFINITY; cells * cells];
    for p in points {
        if let Some((i, j)) = map.cell_of(p.x, p.y) {
            let c = i * cells + j;
            counts[c] += 1;
            heights[c] = heights[c].max(p.z);
        }
    }
    for c in 0..cells * cells {
        if counts[c] > 0 {
            map.grid[2 * c] = heights[c];
            map.grid[2 * c + 1] = (1.0 + counts[c] as f64).ln();
        }
    }
    map
}

/// Single-channel image, row-major `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

/// Forward and rightward axes of the views facing +x, -x, +y, -y.
pub const VIEW_AXES: [([f64; 2], [f64; 2]); 4] = [
    ([1.0, 0.0], [0.0, -1.0]),
    ([-1.0, 0.0], [0.0, 1.0]),
    ([0.0, 1.0], [1.0, 0.0]),
    ([0.0, -1.0], [-1.0, 0.0]),
];

/// Pinhole renders with a 90 degree horizontal field of view. Each
/// scatterer in a view's frustum writes `1 / distance` to its pixel,
/// keeping the maximum on collisions.
pub fn render_views(aligned: &AlignedScene, cfg: &SensorConfig) -> [Image; 4] {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let focal = w as f64 / 2.0;
    let mut views = [Image::zeros(h, w), Image::zeros(h, w), Image::zeros(h, w), Image::zeros(h, w)];
    for p in &aligned.scatterers_local {
        let dist = p.norm();
        if dist <= 0.0 {
            continue;
        }
        for (img, (fwd, right)) in views.iter_mut().zip(VIEW_AXES) {
            let depth = p.x * fwd[0] + p.y * fwd[1];
            if depth <= 0.0 {
                continue;
            }
            let xc = (p.x * right[0] + p.y * right[1]) / depth;
            let yc = p.z / depth;
            let u = (w as f64 / 2.0 + focal * xc).floor();
            let v = (h as f64 / 2.0 - focal * yc).floor();
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let idx = v as usize * w + u as usize;
            img.pixels[idx] = img.pixels[idx].max(1.0 / dist);
        }
    }
    views
}
