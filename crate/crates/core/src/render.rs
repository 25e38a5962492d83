//! Deterministic parametric renderer for compositional images.
//!
//! An object index selects a binary shape mask (geometry), an attribute
//! index selects the appearance painted inside that mask (base color,
//! stripe modulation, texture noise). Rendering is a pure function of
//! `(spec, attribute, object, seed)`:
//!
//! * the seed drives only geometry jitter (shift and scale), so two renders
//!   that differ only in attribute share the exact mask support, and zero
//!   jitter ranges make the output seed-independent;
//! * texture noise is hash-based in pixel coordinates, not drawn from the
//!   seed stream.
//!
//! Pixels are `f32` in `[0, 1]`, row-major `(y, x, channel)`.

use serde::{Deserialize, Serialize};

use crate::error::{MmptError, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    /// `count` horizontal bars filling the shape's bounding box.
    HBars { count: usize },
    /// `count` vertical bars filling the shape's bounding box.
    VBars { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Half-extent as a fraction of `min(height, width) / 2`.
    pub extent: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub base_rgb: [f32; 3],
    /// Diagonal stripe count across the canvas; 0 disables banding motion.
    pub stripe_freq: f32,
    /// Stripe darkening strength in `[0, 1]`.
    pub stripe_depth: f32,
    /// Amplitude of per-pixel hash noise.
    pub noise_amp: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    /// Max center shift as a fraction of the image side.
    pub max_shift: f32,
    /// Max relative scale perturbation (0.1 = +-10%).
    pub max_scale: f32,
}

impl JitterSpec {
    pub fn none() -> Self {
        JitterSpec { max_shift: 0.0, max_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub height: usize,
    pub width: usize,
    pub background: [f32; 3],
    pub objects: Vec<ShapeSpec>,
    pub attributes: Vec<StyleSpec>,
    pub jitter: JitterSpec,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(MmptError::invalid("render spec has a zero image dimension"));
        }
        if self.objects.is_empty() || self.attributes.is_empty() {
            return Err(MmptError::invalid("render spec needs at least one shape and one style"));
        }
        for (i, s) in self.objects.iter().enumerate() {
            if !(s.extent > 0.0 && s.extent <= 1.0) {
                return Err(MmptError::invalid(format!(
                    "shape {i} extent {} must be in (0, 1]",
                    s.extent
                )));
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    /// Stable content hash, recorded in dataset manifests.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("render spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// splitmix64 finalizer; the standard 64-bit avalanche mix.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash noise in [0, 1), a pure function of its coordinates.
fn hash01(x: usize, y: usize, attr: usize, ch: usize) -> f32 {
    let key = (x as u64) ^ ((y as u64) << 16) ^ ((attr as u64) << 32) ^ ((ch as u64) << 48);
    (mix64(key) >> 40) as f32 / (1u64 << 24) as f32
}

/// Two independent geometry draws in [-1, 1] per axis plus one scale draw,
/// derived from the sample seed alone.
fn jitter_draws(seed: u64) -> (f32, f32, f32) {
    let a = mix64(seed ^ 0x6a09e667f3bcc908);
    let b = mix64(seed ^ 0xbb67ae8584caa73b);
    let c = mix64(seed ^ 0x3c6ef372fe94f82b);
    let unit = |v: u64| ((v >> 40) as f32 / (1u64 << 23) as f32) - 1.0;
    (unit(a), unit(b), unit(c))
}

fn in_mask(kind: ShapeKind, half: f32, dx: f32, dy: f32) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Triangle => {
            // Upward triangle: apex at the top of the bounding box, width
            // growing linearly toward the base.
            if dy < -half || dy > half {
                return false;
            }
            let row_frac = (dy + half) / (2.0 * half);
            dx.abs() <= row_frac * half
        }
        ShapeKind::HBars { count } => {
            if dx.abs() > half || dy.abs() > half {
                return false;
            }
            let frac = (dy + half) / (2.0 * half);
            bar_on(frac, count)
        }
        ShapeKind::VBars { count } => {
            if dx.abs() > half || dy.abs() > half {
                return false;
            }
            let frac = (dx + half) / (2.0 * half);
            bar_on(frac, count)
        }
    }
}

/// `count` on-bands alternating with `count - 1` gaps across `frac in [0,1]`.
fn bar_on(frac: f32, count: usize) -> bool {
    let bands = 2 * count - 1;
    let band = ((frac * bands as f32) as usize).min(bands - 1);
    band % 2 == 0
}

/// Renders one image. Pure in all four arguments.
pub fn render(spec: &RenderSpec, attribute: usize, object: usize, seed: u64) -> Result<Vec<f32>> {
    spec.validate()?;
    let style = spec.attributes.get(attribute).ok_or_else(|| {
        MmptError::invalid(format!("attribute index {attribute} outside render spec"))
    })?;
    let shape = spec
        .objects
        .get(object)
        .ok_or_else(|| MmptError::invalid(format!("object index {object} outside render spec")))?;

    let (h, w) = (spec.height, spec.width);
    let (jx, jy, js) = jitter_draws(seed);
    let shift_x = if spec.jitter.max_shift > 0.0 { jx * spec.jitter.max_shift * w as f32 } else { 0.0 };
    let shift_y = if spec.jitter.max_shift > 0.0 { jy * spec.jitter.max_shift * h as f32 } else { 0.0 };
    let scale = if spec.jitter.max_scale > 0.0 { 1.0 + js * spec.jitter.max_scale } else { 1.0 };

    let cx = w as f32 / 2.0 + shift_x;
    let cy = h as f32 / 2.0 + shift_y;
    let half = shape.extent * scale * (h.min(w) as f32 / 2.0);

    let mut pixels = vec![0.0f32; spec.pixel_count()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let base = (y * w + x) * CHANNELS;
            if in_mask(shape.kind, half, dx, dy) {
                let wave = if style.stripe_freq > 0.0 {
                    let phase = std::f32::consts::TAU * style.stripe_freq * (x + y) as f32
                        / (h + w) as f32;
                    0.5 + 0.5 * phase.sin()
                } else {
                    0.5
                };
                let modulation = 1.0 - style.stripe_depth * wave;
                for ch in 0..CHANNELS {
                    let noise = (hash01(x, y, attribute, ch) - 0.5) * 2.0 * style.noise_amp;
                    pixels[base + ch] = (style.base_rgb[ch] * modulation + noise).clamp(0.0, 1.0);
                }
            } else {
                pixels[base..base + CHANNELS].copy_from_slice(&spec.background);
            }
        }
    }
    Ok(pixels)
}

/// Mask support of a rendered image: pixels that differ from the background.
pub fn mask_of(spec: &RenderSpec, pixels: &[f32]) -> Vec<bool> {
    (0..spec.height * spec.width)
        .map(|i| {
            let px = &pixels[i * CHANNELS..(i + 1) * CHANNELS];
            px != spec.background
        })
        .collect()
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h_deg % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Desk-scale defaults: shapes cycle through five kinds over two size tiers,
/// styles walk the hue wheel with alternating stripe banding.
pub fn default_render_spec(n_attrs: usize, n_objs: usize, height: usize, width: usize) -> RenderSpec {
    let kinds = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::HBars { count: 3 },
        ShapeKind::VBars { count: 3 },
    ];
    let objects = (0..n_objs)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let extent = if (i / kinds.len()) % 2 == 0 { 0.72 } else { 0.45 };
            ShapeSpec { kind, extent }
        })
        .collect();
    let attributes = (0..n_attrs)
        .map(|i| {
            let hue = 360.0 * i as f32 / n_attrs.max(1) as f32;
            let striped = i % 2 == 1;
            StyleSpec {
                base_rgb: hsv_to_rgb(hue, 0.85, 0.95),
                stripe_freq: if striped { 4.0 + 2.0 * (i % 3) as f32 } else { 0.0 },
                stripe_depth: if striped { 0.5 } else { 0.0 },
                noise_amp: 0.06,
            }
        })
        .collect();
    RenderSpec {
        height,
        width,
        background: [0.125, 0.125, 0.125],
        objects,
        attributes,
        jitter: JitterSpec { max_shift: 0.08, max_scale: 0.12 },
    }
}
