//! Geometry primitives, angular metrics, and normal-map encoding.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};

/// Norm below which a vector is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Plain 3-vector, `f64` components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, other: Vec3) -> Vec3 {
        Vec3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }
}

/// Unit-norm 3-vector. Construction goes through [`normalize_vec`], so the
/// unit invariant holds within 1e-6 everywhere one of these appears.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    /// Viewing direction of the orthographic camera.
    pub const Z: UnitVec3 = UnitVec3(Vec3::new(0.0, 0.0, 1.0));

    pub fn x(self) -> f64 {
        self.0.x
    }

    pub fn y(self) -> f64 {
        self.0.y
    }

    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn as_vec3(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, other: UnitVec3) -> f64 {
        self.0.dot(other.0)
    }
}

/// Normalizes `v` to unit length.
///
/// Near-zero input (norm <= 1e-12) is rejected as [`CoreError::DegenerateVector`].
pub fn normalize_vec(v: Vec3) -> Result<UnitVec3> {
    let n = v.norm();
    if !n.is_finite() || n <= DEGENERATE_NORM {
        return Err(CoreError::DegenerateVector);
    }
    Ok(UnitVec3(v.scaled(1.0 / n)))
}

/// Angle between two unit vectors, in degrees.
///
/// The dot product is clamped to [-1, 1] before `acos` so round-off at
/// (anti)parallel vectors cannot produce NaN. Symmetric, range [0, 180].
pub fn angular_error(a: UnitVec3, b: UnitVec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Binary object mask. Values are exactly 0 or 1 and at least one pixel is 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::DimensionMismatch(format!(
                "mask data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(CoreError::InvalidConfig(
                "mask values must be 0 or 1".into(),
            ));
        }
        if !data.iter().any(|&v| v == 1) {
            return Err(CoreError::InvalidConfig(
                "mask must select at least one pixel".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// All-ones mask.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Mask value at (row, col).
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// H x W grid of unit normals. Entries are meaningful only where a companion
/// [`Mask`] is 1; masked-out entries hold an arbitrary placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    data: Vec<UnitVec3>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, data: Vec<UnitVec3>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::DimensionMismatch(format!(
                "normal map length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant map, useful as a placeholder-filled canvas.
    pub fn filled(width: usize, height: usize, n: UnitVec3) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![n; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[UnitVec3] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> UnitVec3 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, n: UnitVec3) {
        self.data[row * self.width + col] = n;
    }
}

/// Mean angular error over `mask == 1` pixels, in degrees.
pub fn mean_angular_error(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<f64> {
    if pred.width != gt.width
        || pred.height != gt.height
        || pred.width != mask.width
        || pred.height != mask.height
    {
        return Err(CoreError::DimensionMismatch(format!(
            "normal maps {}x{} / {}x{} and mask {}x{} must agree",
            pred.width, pred.height, gt.width, gt.height, mask.width, mask.height
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..mask.data.len() {
        if mask.data[idx] == 1 {
            sum += angular_error(pred.data[idx], gt.data[idx]);
            count += 1;
        }
    }
    // Mask construction guarantees count >= 1.
    Ok(sum / count as f64)
}

/// Per-pixel angular error map in degrees; masked-out pixels are 0.
pub fn angular_error_map(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Vec<f64>> {
    if pred.width != gt.width
        || pred.height != gt.height
        || pred.width != mask.width
        || pred.height != mask.height
    {
        return Err(CoreError::DimensionMismatch(
            "error map inputs must share dimensions".into(),
        ));
    }
    Ok((0..mask.data.len())
        .map(|idx| {
            if mask.data[idx] == 1 {
                angular_error(pred.data[idx], gt.data[idx])
            } else {
                0.0
            }
        })
        .collect())
}

/// 3-channel image with values in [0, 1], row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbGrid {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::DimensionMismatch(format!(
                "rgb grid length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Encodes normals as RGB with the (n + 1) / 2 convention; masked-out pixels
/// are black.
pub fn encode_normal_rgb(n: &NormalMap, mask: &Mask) -> Result<RgbGrid> {
    if n.width != mask.width || n.height != mask.height {
        return Err(CoreError::DimensionMismatch(
            "normal map and mask must share dimensions".into(),
        ));
    }
    let data = n
        .data
        .iter()
        .zip(mask.data.iter())
        .map(|(nv, &m)| {
            if m == 1 {
                [
                    (nv.x() + 1.0) * 0.5,
                    (nv.y() + 1.0) * 0.5,
                    (nv.z() + 1.0) * 0.5,
                ]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok(RgbGrid {
        width: n.width,
        height: n.height,
        data,
    })
}

/// Decodes an RGB image back to normals via n = 2 * value - 1 and
/// re-normalization. Returns the map plus per-pixel validity (0 where the
/// decoded vector was near zero; such pixels hold a +z placeholder).
pub fn decode_normal_rgb(img: &RgbGrid) -> (NormalMap, Vec<u8>) {
    let mut normals = Vec::with_capacity(img.data.len());
    let mut valid = Vec::with_capacity(img.data.len());
    for px in &img.data {
        let v = Vec3::new(
            px[0] * 2.0 - 1.0,
            px[1] * 2.0 - 1.0,
            px[2] * 2.0 - 1.0,
        );
        match normalize_vec(v) {
            Ok(u) if v.norm() >= 1e-3 => {
                normals.push(u);
                valid.push(1);
            }
            _ => {
                normals.push(UnitVec3::Z);
                valid.push(0);
            }
        }
    }
    (
        NormalMap {
            width: img.width,
            height: img.height,
            data: normals,
        },
        valid,
    )
}
