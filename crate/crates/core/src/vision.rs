//! sRGB frames and their normalized L / ab views.
//!
//! Conversion goes sRGB -> linear RGB -> XYZ (D65) -> CIE L*a*b*, evaluated
//! in `f64`. L is mapped from `[0, 100]` to `[-1, 1]`; a and b are divided by
//! 110 and clamped to `[-1, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Planar `[3, H, W]` RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(dim_err!(
                "frame of {}x{} needs {} bytes, got {}",
                height,
                width,
                3 * height * width,
                rgb.len()
            ));
        }
        Ok(Self { height, width, rgb })
    }

    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let plane = height * width;
        let mut rgb = vec![0u8; 3 * plane];
        for (c, &v) in color.iter().enumerate() {
            rgb[c * plane..(c + 1) * plane].fill(v);
        }
        Self { height, width, rgb }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let plane = self.pixels();
        let i = y * self.width + x;
        [self.rgb[i], self.rgb[plane + i], self.rgb[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, color: [u8; 3]) {
        let plane = self.pixels();
        let i = y * self.width + x;
        for (c, &v) in color.iter().enumerate() {
            self.rgb[c * plane + i] = v;
        }
    }
}

/// The two views fed to the image encoders, each normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabViews {
    pub height: usize,
    pub width: usize,
    /// `[1, H, W]`
    pub l_view: Vec<f32>,
    /// `[2, H, W]`, a plane then b plane.
    pub ab_view: Vec<f32>,
}

const AB_RANGE: f64 = 110.0;
const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;
// D65 reference white.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        libm::pow((c + 0.055) / 1.055, 2.4)
    }
}

fn linear_to_srgb(c: f64) -> u8 {
    let c = c.clamp(0.0, 1.0);
    let v = if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * libm::pow(c, 1.0 / 2.4) - 0.055
    };
    libm::round(v * 255.0).clamp(0.0, 255.0) as u8
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        libm::cbrt(t)
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn lightness_from_y(y: f64) -> f64 {
    if y > EPSILON {
        116.0 * libm::cbrt(y) - 16.0
    } else {
        KAPPA * y
    }
}

/// CIE L*a*b* of one sRGB color. Grays take an exact path with `a = b = 0`.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    if rgb[0] == rgb[1] && rgb[1] == rgb[2] {
        return [lightness_from_y(srgb_to_linear(rgb[0])), 0.0, 0.0];
    }
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(&mut xyz) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let f = [
        lab_f(xyz[0] / WHITE[0]),
        lab_f(xyz[1] / WHITE[1]),
        lab_f(xyz[2] / WHITE[2]),
    ];
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

/// Inverse of [`srgb_to_lab`]; out-of-gamut colors are clamped.
pub fn lab_to_srgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    if lab[1] == 0.0 && lab[2] == 0.0 {
        let y = if lab[0] > KAPPA * EPSILON {
            fy * fy * fy
        } else {
            lab[0] / KAPPA
        };
        let v = linear_to_srgb(y);
        return [v; 3];
    }
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let y = if lab[0] > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        lab[0] / KAPPA
    };
    let xyz = [lab_f_inv(fx) * WHITE[0], y, lab_f_inv(fz) * WHITE[2]];
    let mut out = [0u8; 3];
    for (row, o) in XYZ_TO_RGB.iter().zip(&mut out) {
        *o = linear_to_srgb(row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2]);
    }
    out
}

pub fn normalize_lab(lab: [f64; 3]) -> [f32; 3] {
    [
        (lab[0] / 50.0 - 1.0) as f32,
        (lab[1] / AB_RANGE).clamp(-1.0, 1.0) as f32,
        (lab[2] / AB_RANGE).clamp(-1.0, 1.0) as f32,
    ]
}

pub fn denormalize_lab(v: [f32; 3]) -> [f64; 3] {
    [
        (v[0].clamp(-1.0, 1.0) as f64 + 1.0) * 50.0,
        v[1].clamp(-1.0, 1.0) as f64 * AB_RANGE,
        v[2].clamp(-1.0, 1.0) as f64 * AB_RANGE,
    ]
}

pub fn rgb_to_lab(frame: &Frame) -> LabViews {
    let plane = frame.pixels();
    let mut l_view = vec![0.0f32; plane];
    let mut ab_view = vec![0.0f32; 2 * plane];
    for i in 0..plane {
        let px = [frame.rgb[i], frame.rgb[plane + i], frame.rgb[2 * plane + i]];
        let n = normalize_lab(srgb_to_lab(px));
        l_view[i] = n[0];
        ab_view[i] = n[1];
        ab_view[plane + i] = n[2];
    }
    LabViews {
        height: frame.height,
        width: frame.width,
        l_view,
        ab_view,
    }
}

pub fn lab_to_rgb(lab: &LabViews) -> Result<Frame> {
    let plane = lab.height * lab.width;
    if lab.l_view.len() != plane || lab.ab_view.len() != 2 * plane {
        return Err(dim_err!("lab views do not match {}x{}", lab.height, lab.width));
    }
    let mut rgb = vec![0u8; 3 * plane];
    for i in 0..plane {
        let v = [lab.l_view[i], lab.ab_view[i], lab.ab_view[plane + i]];
        let px = lab_to_srgb(denormalize_lab(v));
        rgb[i] = px[0];
        rgb[plane + i] = px[1];
        rgb[2 * plane + i] = px[2];
    }
    Frame::new(lab.height, lab.width, rgb)
}

/// Interleaves both views into the `[3, H, W]` layout the decoder reconstructs.
pub fn stacked_views(lab: &LabViews) -> Vec<f32> {
    let mut out = Vec::with_capacity(lab.l_view.len() + lab.ab_view.len());
    out.extend_from_slice(&lab.l_view);
    out.extend_from_slice(&lab.ab_view);
    out
}

/// Lab views of every frame of a trajectory, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabSequence {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// `[frames, 1, H, W]`
    pub l: Vec<f32>,
    /// `[frames, 2, H, W]`
    pub ab: Vec<f32>,
}

impl LabSequence {
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(dim_err!("empty trajectory"));
        };
        let (height, width) = (first.height, first.width);
        let plane = height * width;
        let mut l = Vec::with_capacity(frames.len() * plane);
        let mut ab = Vec::with_capacity(2 * frames.len() * plane);
        for f in frames {
            if f.height != height || f.width != width {
                return Err(dim_err!("trajectory mixes frame sizes"));
            }
            let v = rgb_to_lab(f);
            l.extend_from_slice(&v.l_view);
            ab.extend_from_slice(&v.ab_view);
        }
        Ok(Self {
            height,
            width,
            frames: frames.len(),
            l,
            ab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_are_exact() {
        assert_eq!(srgb_to_lab([255; 3]), [100.0, 0.0, 0.0]);
        assert_eq!(srgb_to_lab([0; 3]), [0.0, 0.0, 0.0]);
        assert_eq!(lab_to_srgb(srgb_to_lab([255; 3])), [255; 3]);
        assert_eq!(lab_to_srgb(srgb_to_lab([0; 3])), [0; 3]);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_lab([100.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
        assert_eq!(normalize_lab([0.0, 200.0, -200.0]), [-1.0, 1.0, -1.0]);
    }

    #[test]
    fn frame_size_is_checked() {
        assert!(Frame::new(2, 2, vec![0; 11]).is_err());
        let mut f = Frame::filled(2, 3, [1, 2, 3]);
        f.set_pixel(1, 2, [9, 8, 7]);
        assert_eq!(f.pixel(1, 2), [9, 8, 7]);
        assert_eq!(f.pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn views_round_trip_a_frame() {
        let mut f = Frame::filled(2, 2, [10, 200, 30]);
        f.set_pixel(0, 1, [255, 255, 255]);
        let back = lab_to_rgb(&rgb_to_lab(&f)).unwrap();
        for (a, b) in f.rgb.iter().zip(&back.rgb) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }
}
