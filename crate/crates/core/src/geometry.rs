//! Directions on the unit sphere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cartesian direction of arrival. Reference directions are unit length;
/// raw regressor outputs may lie anywhere in `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl DoaVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Unit vector from azimuth/elevation in degrees (azimuth counter-clockwise
    /// from +x in the horizontal plane, elevation up from it).
    pub fn from_az_el_deg(azimuth: f64, elevation: f64) -> Self {
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        Self::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    /// (azimuth, elevation) in degrees, azimuth in (-180, 180].
    pub fn to_az_el_deg(self) -> (f64, f64) {
        let n = self.norm();
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let az = self.y.atan2(self.x).to_degrees();
        let el = (self.z / n).clamp(-1.0, 1.0).asin().to_degrees();
        (if az <= -180.0 { az + 360.0 } else { az }, el)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn sub(self, other: Self) -> Self {
        Self::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scaled(1.0 / n))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Great-circle angle between two non-zero vectors, in radians.
pub fn angular_distance(a: DoaVector, b: DoaVector) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("angular distance of a zero-norm vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Straight-line (chord) distance.
pub fn euclidean_distance(a: DoaVector, b: DoaVector) -> f64 {
    a.sub(b).norm()
}

/// Chord length between unit vectors separated by `angle` radians.
pub fn chord_from_angle(angle: f64) -> f64 {
    2.0 * (angle / 2.0).sin()
}

/// Inverse of [`chord_from_angle`] for chords in [0, 2].
pub fn angle_from_chord(chord: f64) -> f64 {
    2.0 * (chord / 2.0).clamp(-1.0, 1.0).asin()
}

/// Directions at every multiple of `resolution` degrees in azimuth `[0, 360)`
/// and elevation `[-90, 90]`, with each pole kept once.
pub fn sample_equiangular_grid(resolution: u32) -> Result<Vec<DoaVector>> {
    if resolution == 0 || 360 % resolution != 0 {
        return Err(Error::Argument(format!(
            "grid resolution must be a positive divisor of 360 degrees, got {resolution}"
        )));
    }
    let r = resolution as i32;
    let top = 90 / r * r;
    let mut out = Vec::new();
    for el in (-top..=top).step_by(r as usize) {
        if el.abs() == 90 {
            out.push(DoaVector::from_az_el_deg(0.0, f64::from(el)));
            continue;
        }
        for az in (0..360).step_by(r as usize) {
            out.push(DoaVector::from_az_el_deg(f64::from(az), f64::from(el)));
        }
    }
    Ok(out)
}
