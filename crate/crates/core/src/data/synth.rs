//! Programmatically drawn stand-ins for the eight e-waste classes. Each class
//! has a distinctive silhouette; position, size, colors and noise vary per
//! image and are fully determined by `(seed, class, index)`.

use std::path::{Path, PathBuf};

use super::image::{encode_ppm, Image};
use crate::fsutil::write_atomic;
use crate::rng::SeededRng;
use crate::Result;

pub const SYNTHETIC_CLASSES: [&str; 8] = [
    "Camera",
    "Keyboards",
    "Laptop",
    "Microwave",
    "Mobile",
    "Mouses",
    "Smartwatch",
    "TV",
];

/// Parameters of the copy that ships under `crates/core/data/synthetic`.
pub const BUNDLED_SEED: u64 = 2024;
pub const BUNDLED_PER_CLASS: usize = 10;
pub const BUNDLED_SIZE: usize = 64;

pub fn bundled_synthetic_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("synthetic")
}

/// Drawing surface in unit coordinates (`0..1` on both axes).
struct Canvas {
    img: Image,
}

type Rgb = [f32; 3];

impl Canvas {
    fn fill_where(&mut self, color: Rgb, inside: impl Fn(f64, f64) -> bool) {
        let (h, w) = (self.img.height, self.img.width);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                if inside(u, v) {
                    self.img.set(y, x, color);
                }
            }
        }
    }

    fn rect(&mut self, cx: f64, cy: f64, hw: f64, hh: f64, color: Rgb) {
        self.fill_where(color, |u, v| (u - cx).abs() <= hw && (v - cy).abs() <= hh);
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb) {
        self.fill_where(color, |u, v| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0);
    }

    /// Horizontal band whose half-width grows linearly from `top_hw` to `bottom_hw`.
    fn trapezoid(&mut self, cx: f64, cy: f64, top_hw: f64, bottom_hw: f64, hh: f64, color: Rgb) {
        self.fill_where(color, |u, v| {
            let t = (v - (cy - hh)) / (2.0 * hh);
            (0.0..=1.0).contains(&t) && (u - cx).abs() <= top_hw + (bottom_hw - top_hw) * t
        });
    }
}

fn jitter(rng: &mut SeededRng, base: Rgb, amount: f64) -> Rgb {
    base.map(|c| (c as f64 + rng.symmetric(amount)).clamp(0.0, 1.0) as f32)
}

/// One synthetic image of `class` (an index into [`SYNTHETIC_CLASSES`]).
pub fn synthetic_image(class: usize, size: usize, seed: u64, index: usize) -> Image {
    let mut rng = SeededRng::derived(seed, &[class as u64, index as u64]);
    let bg = jitter(&mut rng, [0.85, 0.85, 0.82], 0.1);
    let mut c = Canvas {
        img: Image::filled(size, size, bg),
    };
    let cx = 0.5 + rng.symmetric(0.08);
    let cy = 0.5 + rng.symmetric(0.08);
    let s = 0.85 + 0.25 * rng.uniform();
    match class {
        0 => {
            // camera: dark body, ringed lens, flash
            c.rect(cx, cy, 0.32 * s, 0.2 * s, jitter(&mut rng, [0.15, 0.15, 0.17], 0.06));
            c.rect(cx - 0.2 * s, cy - 0.24 * s, 0.07 * s, 0.04 * s, jitter(&mut rng, [0.3, 0.3, 0.3], 0.05));
            c.ellipse(cx, cy, 0.15 * s, 0.15 * s, jitter(&mut rng, [0.7, 0.7, 0.72], 0.06));
            c.ellipse(cx, cy, 0.09 * s, 0.09 * s, jitter(&mut rng, [0.1, 0.15, 0.35], 0.06));
        }
        1 => {
            // keyboard: wide flat slab with a grid of keys
            let (hw, hh) = (0.44 * s, 0.16 * s);
            c.rect(cx, cy, hw, hh, jitter(&mut rng, [0.25, 0.25, 0.28], 0.06));
            let key = jitter(&mut rng, [0.9, 0.9, 0.9], 0.05);
            for row in 0..4 {
                for col in 0..10 {
                    let kx = cx - hw + (col as f64 + 0.5) * 2.0 * hw / 10.0;
                    let ky = cy - hh + (row as f64 + 0.5) * 2.0 * hh / 4.0;
                    c.rect(kx, ky, 0.3 * hw / 10.0, 0.28 * hh / 4.0, key);
                }
            }
        }
        2 => {
            // laptop: screen above a wider trapezoid base
            let silver = jitter(&mut rng, [0.65, 0.66, 0.7], 0.06);
            c.rect(cx, cy - 0.12 * s, 0.3 * s, 0.2 * s, silver);
            c.rect(cx, cy - 0.12 * s, 0.26 * s, 0.16 * s, jitter(&mut rng, [0.15, 0.3, 0.6], 0.08));
            c.trapezoid(cx, cy + 0.15 * s, 0.3 * s, 0.4 * s, 0.07 * s, silver);
        }
        3 => {
            // microwave: box, dark window on the left, dials on the right
            let (hw, hh) = (0.38 * s, 0.26 * s);
            c.rect(cx, cy, hw, hh, jitter(&mut rng, [0.95, 0.95, 0.93], 0.04));
            c.rect(cx - 0.1 * s, cy, 0.22 * s, 0.19 * s, jitter(&mut rng, [0.12, 0.12, 0.12], 0.05));
            let dial = jitter(&mut rng, [0.4, 0.4, 0.45], 0.05);
            for k in 0..3 {
                c.ellipse(cx + 0.26 * s, cy - 0.14 * s + k as f64 * 0.14 * s, 0.035 * s, 0.035 * s, dial);
            }
        }
        4 => {
            // mobile: tall slim body with a bright screen
            c.rect(cx, cy, 0.15 * s, 0.34 * s, jitter(&mut rng, [0.08, 0.08, 0.1], 0.05));
            c.rect(cx, cy - 0.02 * s, 0.12 * s, 0.27 * s, jitter(&mut rng, [0.3, 0.6, 0.85], 0.1));
        }
        5 => {
            // mouse: upright ellipse, button split and wheel
            let body = jitter(&mut rng, [0.3, 0.3, 0.32], 0.08);
            c.ellipse(cx, cy, 0.17 * s, 0.26 * s, body);
            c.rect(cx, cy - 0.14 * s, 0.006 + 0.004 * s, 0.12 * s, jitter(&mut rng, [0.9, 0.9, 0.9], 0.05));
            c.rect(cx, cy - 0.13 * s, 0.02 * s, 0.04 * s, jitter(&mut rng, [0.75, 0.2, 0.2], 0.08));
        }
        6 => {
            // smartwatch: full-height strap and a round face
            c.rect(cx, 0.5, 0.09 * s, 0.5, jitter(&mut rng, [0.55, 0.3, 0.2], 0.1));
            c.ellipse(cx, cy, 0.17 * s, 0.17 * s, jitter(&mut rng, [0.1, 0.1, 0.1], 0.04));
            c.ellipse(cx, cy, 0.13 * s, 0.13 * s, jitter(&mut rng, [0.2, 0.75, 0.4], 0.1));
        }
        _ => {
            // TV: large frame with a colored screen on a small stand
            c.rect(cx, cy + 0.3 * s, 0.05 * s, 0.06 * s, jitter(&mut rng, [0.2, 0.2, 0.2], 0.05));
            c.rect(cx, cy - 0.04 * s, 0.42 * s, 0.27 * s, jitter(&mut rng, [0.05, 0.05, 0.05], 0.03));
            c.rect(cx, cy - 0.04 * s, 0.38 * s, 0.23 * s, jitter(&mut rng, [0.6, 0.35, 0.7], 0.12));
        }
    }
    for p in c.img.pixels.iter_mut() {
        *p = (*p as f64 + rng.symmetric(0.03)).clamp(0.0, 1.0) as f32;
    }
    c.img
}

/// Writes `root/<Class>/<Class>_NN.ppm` for every class. Images are
/// quantized to 8 bits by the PPM encoder.
pub fn write_synthetic_dataset(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<()> {
    for (class, name) in SYNTHETIC_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
        for i in 0..per_class {
            let img = synthetic_image(class, size, seed, i);
            write_atomic(&dir.join(format!("{name}_{i:02}.ppm")), &encode_ppm(&img))?;
        }
    }
    Ok(())
}
