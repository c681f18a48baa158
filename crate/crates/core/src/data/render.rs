//! 3x16x16 procedural renders of catalog items.

use rand_distr::{Distribution, Normal};

use super::schema::AttributeSchema;
use super::{rng_for, Item};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const DEFAULT_PIXEL_SIGMA: f64 = 0.05;

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.90, 0.10],
    [0.10, 0.85, 0.90],
    [0.85, 0.10, 0.80],
    [1.00, 0.55, 0.05],
    [0.50, 0.20, 0.70],
];

/// Which part of the picture a pixel belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    Background,
    Foreground,
    /// Foreground pixel lit by the pattern overlay.
    Pattern,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub pixel_sigma: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: DEFAULT_PIXEL_SIGMA,
            seed: 0,
        }
    }
}

fn attr_index(schema: &AttributeSchema, item: &Item, name: &str) -> usize {
    schema.position(name).map_or(0, |a| item.values[a])
}

fn in_shape(shape: usize, x: usize, y: usize) -> bool {
    let dx = x as f64 - 7.5;
    let dy = y as f64 - 7.5;
    let r = (dx * dx + dy * dy).sqrt();
    match shape % 8 {
        0 => r <= 5.5,
        1 => dx.abs() <= 4.5 && dy.abs() <= 4.5,
        2 => (-5.5..=5.5).contains(&dy) && dx.abs() <= (dy + 5.5) * 0.6,
        3 => dx.abs() + dy.abs() <= 6.5,
        4 => (dx.abs() <= 1.5 && dy.abs() <= 6.5) || (dy.abs() <= 1.5 && dx.abs() <= 6.5),
        5 => (3.0..=6.5).contains(&r),
        6 => dy.abs() <= 2.5 && dx.abs() <= 6.5,
        _ => r <= 6.5 && ((dx - dy).abs() <= 1.5 || (dx + dy).abs() <= 1.5),
    }
}

fn pattern_on(pattern: usize, x: usize, y: usize) -> bool {
    match pattern % 4 {
        0 => false,
        1 => y % 4 < 2,
        2 => x % 3 == 1 && y % 3 == 1,
        _ => (x / 2 + y / 2) % 2 == 0,
    }
}

/// Pixel classes of an item's render in row-major order.
pub fn layout(schema: &AttributeSchema, item: &Item) -> Vec<PixelClass> {
    let shape = attr_index(schema, item, "shape");
    let pattern = attr_index(schema, item, "pattern");
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            out.push(match (in_shape(shape, x, y), pattern_on(pattern, x, y)) {
                (false, _) => PixelClass::Background,
                (true, false) => PixelClass::Foreground,
                (true, true) => PixelClass::Pattern,
            });
        }
    }
    out
}

/// RGB of each pixel class for a palette color.
pub fn class_rgb(color: usize, class: PixelClass) -> [f64; 3] {
    let c = PALETTE[color % PALETTE.len()];
    match class {
        PixelClass::Background => c,
        PixelClass::Foreground => c.map(|v| 0.3 * v),
        PixelClass::Pattern => c.map(|v| 0.5 * v + 0.5),
    }
}

/// Background in the item's color, the shape stencil in a dark tint of it,
/// pattern pixels in a light tint, plus seeded Gaussian noise clipped to [0, 1].
pub fn render(schema: &AttributeSchema, item: &Item, cfg: RenderConfig) -> Tensor {
    let color = attr_index(schema, item, "color");
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; IMAGE_CHANNELS * plane];
    for (p, class) in layout(schema, item).into_iter().enumerate() {
        let rgb = class_rgb(color, class);
        for c in 0..IMAGE_CHANNELS {
            data[c * plane + p] = rgb[c];
        }
    }
    if cfg.pixel_sigma > 0.0 {
        let mut rng = rng_for(cfg.seed, 1 << 32 | item.id as u64);
        let normal = Normal::new(0.0, cfg.pixel_sigma).expect("positive sigma");
        for v in &mut data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image shape")
}
