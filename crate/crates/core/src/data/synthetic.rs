//! Flat-shaded toy faces with exact landmark and yaw ground truth.
//!
//! Geometry is laid out on a 36-unit design canvas and scaled to the
//! requested size. A facial feature at lateral offset `dx` and depth `d`
//! projects to `cx + dx cos(yaw) + d sin(yaw)`, so positive yaw moves the nose
//! towards `+x`. Identities are exactly mirror-symmetric, which makes the
//! render at `-yaw` the mirror image of the render at `+yaw` (before noise).

use serde::{Deserialize, Serialize};

use crate::data::image::RgbImage;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::shapemodel::LandmarkShape;

const DESIGN: f64 = 36.0;
const FEATURE_DEPTH: f64 = 5.0;
const SUPERSAMPLE: usize = 3;
const BACKGROUND: [f64; 3] = [46.0, 58.0, 74.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticFaceConfig {
    pub identities: usize,
    pub geometry_seed: u64,
    /// Network input size after cropping.
    pub image_size: usize,
    /// Rendered size; crops of `image_size` are taken from it.
    pub source_size: usize,
    pub max_yaw_degrees: f64,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
    pub train_per_identity: usize,
    /// Evaluation renders per identity at each of the evenly spaced poses.
    pub eval_repeats: usize,
    pub eval_poses: usize,
    /// Pose codes are scaled so that the largest training `|code|` equals this.
    pub code_extent: f64,
}

impl Default for SyntheticFaceConfig {
    fn default() -> Self {
        SyntheticFaceConfig {
            identities: 20,
            geometry_seed: 1,
            image_size: 32,
            source_size: 36,
            max_yaw_degrees: 60.0,
            noise: 2.0,
            train_per_identity: 50,
            eval_repeats: 2,
            eval_poses: 9,
            code_extent: 17.0,
        }
    }
}

impl SyntheticFaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.identities < 2 {
            return bad(format!("identity count must be at least 2, got {}", self.identities));
        }
        if self.image_size < 16 {
            return bad(format!("image size must be at least 16, got {}", self.image_size));
        }
        if self.source_size < self.image_size {
            return bad(format!(
                "source size {} is smaller than image size {}",
                self.source_size, self.image_size
            ));
        }
        if !(self.max_yaw_degrees > 0.0 && self.max_yaw_degrees <= 80.0) {
            return bad(format!("yaw range must be in (0, 80] degrees, got {}", self.max_yaw_degrees));
        }
        if !(self.noise >= 0.0) || !(self.code_extent > 0.0) {
            return bad("noise must be non-negative and code extent positive".into());
        }
        if self.train_per_identity == 0 || self.eval_poses == 0 || self.eval_repeats == 0 {
            return bad("sample counts must be positive".into());
        }
        Ok(())
    }

    /// Evenly spaced evaluation yaws spanning the full range.
    pub fn eval_yaws(&self) -> Vec<f64> {
        if self.eval_poses == 1 {
            return vec![0.0];
        }
        let m = self.max_yaw_degrees;
        (0..self.eval_poses).map(|j| -m + 2.0 * m * j as f64 / (self.eval_poses - 1) as f64).collect()
    }
}

/// Per-identity appearance, in design-canvas units.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    face_half_width: f64,
    face_half_height: f64,
    hairline: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    eye_colour: [f64; 3],
    lip: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    eye_radius: f64,
    nose_depth: f64,
    nose_y: f64,
    mouth_dx: f64,
    mouth_y: f64,
}

impl Identity {
    pub fn sample(rng: &mut RngStream) -> Self {
        let tone = rng.uniform(0.35, 0.9) * 255.0;
        let skin = [tone, tone * rng.uniform(0.72, 0.88), tone * rng.uniform(0.55, 0.75)];
        let hair = [rng.uniform(10.0, 220.0), rng.uniform(10.0, 160.0), rng.uniform(10.0, 120.0)];
        let eye_colour = [rng.uniform(0.0, 90.0), rng.uniform(0.0, 110.0), rng.uniform(20.0, 160.0)];
        let lip = [rng.uniform(150.0, 230.0), rng.uniform(30.0, 90.0), rng.uniform(40.0, 100.0)];
        Identity {
            face_half_width: rng.uniform(10.5, 12.5),
            face_half_height: rng.uniform(13.5, 15.5),
            hairline: rng.uniform(-11.0, -7.5),
            skin,
            hair,
            eye_colour,
            lip,
            eye_dx: rng.uniform(4.5, 6.0),
            eye_y: rng.uniform(-4.5, -2.5),
            eye_radius: rng.uniform(1.2, 1.8),
            nose_depth: rng.uniform(2.5, 4.0),
            nose_y: rng.uniform(1.5, 3.5),
            mouth_dx: rng.uniform(3.0, 4.5),
            mouth_y: rng.uniform(6.0, 7.5),
        }
    }
}

/// Face centre on the design canvas.
const CX: f64 = DESIGN / 2.0;
const CY: f64 = DESIGN / 2.0 + 0.5;

fn project(dx: f64, depth: f64, yaw: f64) -> f64 {
    CX + dx * yaw.cos() + depth * yaw.sin()
}

/// Landmarks on the design canvas (image-left eye first).
fn design_landmarks(id: &Identity, yaw: f64) -> [[f64; 2]; 5] {
    let d = FEATURE_DEPTH;
    [
        [project(-id.eye_dx, d, yaw), CY + id.eye_y],
        [project(id.eye_dx, d, yaw), CY + id.eye_y],
        [project(0.0, d + id.nose_depth, yaw), CY + id.nose_y],
        [project(-id.mouth_dx, d, yaw), CY + id.mouth_y],
        [project(id.mouth_dx, d, yaw), CY + id.mouth_y],
    ]
}

/// Exact landmarks for `yaw_degrees` on a `size x size` canvas.
pub fn landmarks(id: &Identity, yaw_degrees: f64, size: usize) -> LandmarkShape {
    let s = size as f64 / DESIGN;
    let pts = design_landmarks(id, yaw_degrees.to_radians()).map(|[x, y]| [x * s, y * s]);
    LandmarkShape::new(pts).expect("synthetic landmarks are finite")
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((wx - t * vx).powi(2) + (wy - t * vy).powi(2)).sqrt()
}

fn shade(rgb: [f64; 3], f: f64) -> [f64; 3] {
    rgb.map(|v| v * f)
}

/// Colour at a design-canvas point.
fn colour_at(id: &Identity, yaw: f64, lm: &[[f64; 2]; 5], p: [f64; 2]) -> [f64; 3] {
    let (x, y) = (p[0] - CX, p[1] - CY);
    let r = (x / id.face_half_width).powi(2) + (y / id.face_half_height).powi(2);
    if r > 1.0 {
        return BACKGROUND;
    }
    let far = x * yaw.signum() > 0.0 && yaw != 0.0;
    let light = if far { 1.0 - 0.5 * yaw.sin().abs() } else { 1.0 };
    if y < id.hairline {
        return shade(id.hair, light);
    }
    let squeeze = 0.4 + 0.6 * yaw.cos();
    for eye in &lm[..2] {
        let ex = (p[0] - eye[0]) / (id.eye_radius * squeeze);
        let ey = (p[1] - eye[1]) / id.eye_radius;
        if ex * ex + ey * ey <= 1.0 {
            return shade(id.eye_colour, light);
        }
    }
    if segment_distance(p, lm[3], lm[4]) < 0.9 {
        return shade(id.lip, light);
    }
    let bridge = [project(0.0, FEATURE_DEPTH + 0.5 * id.nose_depth, yaw), CY + id.eye_y + 1.0];
    if segment_distance(p, bridge, lm[2]) < 0.9 {
        return shade(id.skin, 0.72 * light);
    }
    shade(id.skin, light)
}

/// Renders one face. Noise is drawn from `noise_rng` only when `noise > 0`.
pub fn render(id: &Identity, yaw_degrees: f64, size: usize, noise: f64, noise_rng: &mut RngStream) -> RgbImage {
    let yaw = yaw_degrees.to_radians();
    let lm = design_landmarks(id, yaw);
    let scale = DESIGN / size as f64;
    let mut img = RgbImage::filled(size, size, [0; 3]);
    let ss = SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        (px as f64 + (sx as f64 + 0.5) / ss) * scale,
                        (py as f64 + (sy as f64 + 0.5) / ss) * scale,
                    ];
                    let c = colour_at(id, yaw, &lm, p);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let mut out = [0u8; 3];
            for k in 0..3 {
                let mut v = acc[k] / (ss * ss);
                if noise > 0.0 {
                    v += noise * noise_rng.normal();
                }
                out[k] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set_pixel(px, py, out);
        }
    }
    img
}
