//! Seeded affine augmentation: rotation, shift, shear, zoom and horizontal
//! flip, composed into a single transform and resampled bilinearly.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub rotation_deg_max: f64,
    /// Fraction of the image width/height.
    pub shift_frac_max: f64,
    pub shear_deg_max: f64,
    /// Zoom factor is drawn from `1 ± zoom_frac_max`.
    pub zoom_frac_max: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_deg_max: 20.0,
            shift_frac_max: 0.1,
            shear_deg_max: 10.0,
            zoom_frac_max: 0.1,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationSpec {
    /// No transformation at all.
    pub fn none() -> Self {
        Self {
            rotation_deg_max: 0.0,
            shift_frac_max: 0.0,
            shear_deg_max: 0.0,
            zoom_frac_max: 0.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rotation_deg_max", self.rotation_deg_max),
            ("shift_frac_max", self.shift_frac_max),
            ("shear_deg_max", self.shear_deg_max),
            ("zoom_frac_max", self.zoom_frac_max),
        ];
        let mut problems: Vec<String> = fields
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n} = {v} must be finite and non-negative"))
            .collect();
        if self.zoom_frac_max >= 1.0 {
            problems.push(format!("zoom_frac_max = {} must be below 1", self.zoom_frac_max));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            problems.push(format!("hflip_prob = {} must be in [0, 1]", self.hflip_prob));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation: {}", problems.join("; "))))
        }
    }
}

/// A 2×3 affine map from output pixel coordinates to source coordinates,
/// both measured from the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn rotation(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine {
            m: [[c, -s], [s, c]],
            t: [0.0, 0.0],
        }
    }

    pub fn hflip() -> Self {
        Affine {
            m: [[-1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let a = &self.m;
        let b = &other.m;
        let m = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        let t = [
            a[0][0] * other.t[0] + a[0][1] * other.t[1] + self.t[0],
            a[1][0] * other.t[0] + a[1][1] * other.t[1] + self.t[1],
        ];
        Affine { m, t }
    }

    pub fn inverse(&self) -> Result<Affine> {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::arg("affine transform is singular"));
        }
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Ok(Affine { m, t })
    }

    /// Draws the forward transform `shift ∘ rotate ∘ shear ∘ zoom ∘ flip`.
    pub fn sample(spec: &AugmentationSpec, height: usize, width: usize, rng: &mut SeededRng) -> Affine {
        let theta = rng.symmetric(spec.rotation_deg_max);
        let tx = rng.symmetric(spec.shift_frac_max) * width as f64;
        let ty = rng.symmetric(spec.shift_frac_max) * height as f64;
        let shear = rng.symmetric(spec.shear_deg_max).to_radians().tan();
        let zoom = 1.0 + rng.symmetric(spec.zoom_frac_max);
        let flip = rng.bernoulli(spec.hflip_prob);

        let mut a = if flip { Affine::hflip() } else { Affine::IDENTITY };
        a = Affine {
            m: [[zoom, 0.0], [0.0, zoom]],
            t: [0.0, 0.0],
        }
        .then_after(&a);
        a = Affine {
            m: [[1.0, shear], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
        .then_after(&a);
        a = Affine::rotation(theta).then_after(&a);
        Affine {
            m: a.m,
            t: [a.t[0] + tx, a.t[1] + ty],
        }
    }
}

/// Bilinear sample at source coordinates; taps outside the image read 0.
fn sample_bilinear(img: &Image, sy: f64, sx: f64, out: &mut [f32]) {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    out.fill(0.0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wy * wx;
            let (y, x) = (y0 + dy, x0 + dx);
            if w == 0.0 || y < 0 || x < 0 || y >= img.height as isize || x >= img.width as isize {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * img.get(y as usize, x as usize, c);
            }
        }
    }
}

/// Applies a forward transform by inverse-mapping every output pixel.
pub fn warp(image: &Image, forward: &Affine) -> Result<Image> {
    if *forward == Affine::IDENTITY {
        return Ok(image.clone());
    }
    let inv = forward.inverse()?;
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let mut out = Image::filled(image.height, image.width, [0.0; 3]);
    let mut px = [0.0f32; 3];
    for y in 0..image.height {
        for x in 0..image.width {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let sx = inv.m[0][0] * u + inv.m[0][1] * v + inv.t[0] + cx;
            let sy = inv.m[1][0] * u + inv.m[1][1] * v + inv.t[1] + cy;
            sample_bilinear(image, sy, sx, &mut px);
            for p in px.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
            out.set(y, x, px);
        }
    }
    Ok(out)
}

/// One random augmentation of `image`. Dimensions are preserved.
pub fn augment(image: &Image, spec: &AugmentationSpec, rng: &mut SeededRng) -> Result<Image> {
    spec.validate()?;
    let a = Affine::sample(spec, image.height, image.width, rng);
    warp(image, &a)
}
