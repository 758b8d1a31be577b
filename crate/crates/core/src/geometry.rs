//! Gaze direction representations and the angular-error metric.
//!
//! The fixed camera-facing convention maps `(pitch, yaw) = (0, 0)` to the
//! direction `(0, 0, -1)`:
//!
//! ```text
//! x = -cos(pitch) * sin(yaw)
//! y = -sin(pitch)
//! z = -cos(pitch) * cos(yaw)
//! ```

use core::f64::consts::{FRAC_PI_2, PI};
use core::fmt;

/// Raw 3-component vector as produced by network heads (not necessarily unit norm).
pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryError {
    /// Vector has zero (or sub-normal) length and has no direction.
    ZeroVector,
    /// A component is NaN or infinite.
    NonFinite,
    PitchOutOfRange(f64),
    YawOutOfRange(f64),
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::ZeroVector => write!(f, "zero-length vector has no direction"),
            GeometryError::NonFinite => write!(f, "vector has non-finite components"),
            GeometryError::PitchOutOfRange(p) => {
                write!(f, "pitch {p} rad outside [-pi/2, pi/2]")
            }
            GeometryError::YawOutOfRange(y) => write!(f, "yaw {y} rad outside [-pi, pi]"),
        }
    }
}

impl core::error::Error for GeometryError {}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Unit-norm gaze direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVector {
    x: f64,
    y: f64,
    z: f64,
}

impl GazeVector {
    /// Normalizes `(x, y, z)` to unit length.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::from_array([x, y, z])
    }

    pub fn from_array(v: Vec3) -> Result<Self, GeometryError> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = norm(&v);
        if !n.is_finite() || n <= f64::MIN_POSITIVE {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self {
            x: v[0] / n,
            y: v[1] / n,
            z: v[2] / n,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &GazeVector) -> f64 {
        dot(&self.to_array(), &other.to_array())
    }

    pub fn negated(&self) -> GazeVector {
        GazeVector {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Angular gaze representation in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchYaw {
    pitch: f64,
    yaw: f64,
}

impl PitchYaw {
    pub fn new(pitch: f64, yaw: f64) -> Result<Self, GeometryError> {
        if !pitch.is_finite() || !(-FRAC_PI_2..=FRAC_PI_2).contains(&pitch) {
            return Err(GeometryError::PitchOutOfRange(pitch));
        }
        if !yaw.is_finite() || !(-PI..=PI).contains(&yaw) {
            return Err(GeometryError::YawOutOfRange(yaw));
        }
        Ok(Self { pitch, yaw })
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }
}

/// How `(pitch, yaw)` label pairs map onto 3-vectors.
///
/// Public preprocessed datasets do not agree on a single convention, so the
/// loader takes one explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    /// `(-cos p sin y, -sin p, -cos p cos y)`.
    #[default]
    CameraFacing,
    /// Same as `CameraFacing` with the horizontal axis flipped (`x` negated).
    MirroredYaw,
}

impl Convention {
    pub fn to_vector(self, p: PitchYaw) -> GazeVector {
        let v = pitch_yaw_to_vector(p);
        match self {
            Convention::CameraFacing => v,
            Convention::MirroredYaw => GazeVector {
                x: -v.x,
                y: v.y,
                z: v.z,
            },
        }
    }

    pub fn to_pitch_yaw(self, v: GazeVector) -> PitchYaw {
        match self {
            Convention::CameraFacing => vector_to_pitch_yaw(v),
            Convention::MirroredYaw => vector_to_pitch_yaw(GazeVector {
                x: -v.x,
                y: v.y,
                z: v.z,
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::CameraFacing => "camera_facing",
            Convention::MirroredYaw => "mirrored_yaw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "camera_facing" => Some(Convention::CameraFacing),
            "mirrored_yaw" => Some(Convention::MirroredYaw),
            _ => None,
        }
    }
}

pub fn pitch_yaw_to_vector(p: PitchYaw) -> GazeVector {
    let (sp, cp) = (libm::sin(p.pitch), libm::cos(p.pitch));
    let (sy, cy) = (libm::sin(p.yaw), libm::cos(p.yaw));
    // already unit norm up to rounding; renormalize so the invariant is exact to 1 ulp-ish
    GazeVector::new(-cp * sy, -sp, -cp * cy).expect("trigonometric vector is never zero")
}

/// Inverse of [`pitch_yaw_to_vector`]. At the poles (`|y| = 1`) yaw is 0.
pub fn vector_to_pitch_yaw(v: GazeVector) -> PitchYaw {
    let y = v.y.clamp(-1.0, 1.0);
    let pitch = -libm::asin(y);
    let yaw = if v.x == 0.0 && v.z == 0.0 {
        0.0
    } else {
        libm::atan2(-v.x, -v.z)
    };
    PitchYaw { pitch, yaw }
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `arccos(a.b / |a||b|)` evaluated as `atan2(|a x b|, a.b)`, which stays exact
/// for parallel and antiparallel inputs where the arccos form loses ~1e-8 rad.
pub fn angle_of(a: &Vec3, b: &Vec3) -> f64 {
    libm::atan2(norm(&cross(a, b)), dot(a, b))
}

/// Angle in radians between two arbitrary nonzero vectors.
pub fn angle_between(a: &Vec3, b: &Vec3) -> Result<f64, GeometryError> {
    let na = norm(a);
    let nb = norm(b);
    if !na.is_finite() || !nb.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    if !(na > 0.0 && nb > 0.0) {
        return Err(GeometryError::ZeroVector);
    }
    Ok(angle_of(a, b))
}

/// Angular error in degrees between a true and a predicted gaze direction.
pub fn angular_error(g: &GazeVector, g_hat: &GazeVector) -> f64 {
    angle_of(&g.to_array(), &g_hat.to_array()).to_degrees()
}

/// Angular error in degrees against a raw (unnormalized) prediction.
///
/// A degenerate zero prediction scores the worst possible 180 degrees.
pub fn angular_error_raw(g: &GazeVector, pred: &Vec3) -> f64 {
    match angle_between(&g.to_array(), pred) {
        Ok(a) => a.to_degrees(),
        Err(_) => 180.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> GazeVector {
        GazeVector::new(x, y, z).unwrap()
    }

    #[test]
    fn straight_ahead_and_up() {
        let g = pitch_yaw_to_vector(PitchYaw::new(0.0, 0.0).unwrap());
        assert_eq!(g.to_array(), [-0.0, -0.0, -1.0]);
        let up = pitch_yaw_to_vector(PitchYaw::new(FRAC_PI_2, 0.0).unwrap());
        assert_abs_diff_eq!(up.x(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(up.y(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(up.z(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn off_axis_components() {
        // -cos(0.1) sin(0.2), -sin(0.1), -cos(0.1) cos(0.2), evaluated independently
        let expected = [
            -0.197_676_811_654_083_88,
            -0.099_833_416_646_828_15,
            -0.975_170_327_201_816,
        ];
        let g = pitch_yaw_to_vector(PitchYaw::new(0.1, 0.2).unwrap());
        for (a, b) in g.to_array().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn inverse_identity_and_gimbal() {
        let p = vector_to_pitch_yaw(v(0.0, 0.0, -1.0));
        assert_eq!((p.pitch(), p.yaw()), (0.0, 0.0));
        let p = vector_to_pitch_yaw(v(0.0, -1.0, 0.0));
        assert_abs_diff_eq!(p.pitch(), FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(p.yaw(), 0.0);
    }

    #[test]
    fn round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = PitchYaw::new(rng.random_range(-1.5..1.5), rng.random_range(-3.1..3.1)).unwrap();
            let q = vector_to_pitch_yaw(pitch_yaw_to_vector(p));
            assert_abs_diff_eq!(p.pitch(), q.pitch(), epsilon = 1e-6);
            assert_abs_diff_eq!(p.yaw(), q.yaw(), epsilon = 1e-6);
        }
    }

    #[test]
    fn mirrored_convention_round_trips() {
        let p = PitchYaw::new(0.2, -0.4).unwrap();
        let g = Convention::MirroredYaw.to_vector(p);
        assert!(g.x() < 0.0);
        let q = Convention::MirroredYaw.to_pitch_yaw(g);
        assert_abs_diff_eq!(q.yaw(), -0.4, epsilon = 1e-12);
    }

    #[test]
    fn metric_cases() {
        let a = v(1.0, 0.0, 0.0);
        assert_eq!(angular_error(&a, &a), 0.0);
        assert_abs_diff_eq!(angular_error(&a, &v(0.0, 1.0, 0.0)), 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(angular_error(&a, &a.negated()), 180.0, epsilon = 1e-12);
        // arccos(cos(0.1) cos(0.1)) in degrees, scalar oracle
        let g = pitch_yaw_to_vector(PitchYaw::new(0.1, 0.1).unwrap());
        assert_abs_diff_eq!(
            angular_error(&v(0.0, 0.0, -1.0), &g),
            8.096_082_646_564_302,
            epsilon = 1e-9
        );
    }

    #[test]
    fn rejects_degenerate() {
        assert_eq!(GazeVector::new(0.0, 0.0, 0.0), Err(GeometryError::ZeroVector));
        assert_eq!(GazeVector::new(f64::NAN, 0.0, 1.0), Err(GeometryError::NonFinite));
        assert!(PitchYaw::new(2.0, 0.0).is_err());
        assert!(PitchYaw::new(0.0, 4.0).is_err());
        assert_eq!(angular_error_raw(&v(0.0, 0.0, -1.0), &[0.0; 3]), 180.0);
    }
}
