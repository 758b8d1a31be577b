//! Training objectives over 3-vector gaze predictions.
//!
//! * `l_original`: componentwise gap (L1 by default) between prediction and label.
//! * `l_new`: angle between prediction and label, radians.
//! * `lb = alpha * l_new + (1 - alpha) * l_original`.
//! * `la = |angle(g_diff, g_guidance) - angle(g_test, g_guidance)|` supervises the
//!   differential head relative to the guidance label.
//! * `total_loss = (1 - beta) * la + beta * lb`.
//!
//! Predictions are free 3-vectors; angle-based terms normalize internally.
//! Each loss has a `*_grad` companion returning the value together with the
//! gradient with respect to the prediction(s).

use core::fmt;

use crate::geometry::{self, dot, norm, GazeVector, Vec3};

/// Cosine bound applied inside angle gradients, where `d/dc acos(c)` diverges at `|c| = 1`.
pub const GRAD_COS_LIMIT: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossError {
    /// A vector entering an angle term has zero length (degenerate network output).
    DegenerateVector,
    NonFinite,
    WeightOutOfRange {
        name: &'static str,
        value: f64,
    },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::DegenerateVector => {
                write!(f, "zero-norm vector in angular loss (degenerate network output)")
            }
            LossError::NonFinite => write!(f, "non-finite value in loss input"),
            LossError::WeightOutOfRange { name, value } => {
                write!(f, "loss weight {name} = {value} outside [0, 1]")
            }
        }
    }
}

impl core::error::Error for LossError {}

/// The alpha/beta pair balancing the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LossError> {
        check_unit("alpha", alpha)?;
        check_unit("beta", beta)?;
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 0.75,
        }
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(LossError::WeightOutOfRange { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapNorm {
    #[default]
    L1,
    /// Squared Euclidean distance.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapSpace {
    /// Compare raw 3-vector components.
    #[default]
    Vector,
    /// Compare (pitch, yaw) after normalizing the prediction.
    Angles,
}

/// Configuration of the componentwise-gap term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GapLoss {
    pub norm: GapNorm,
    pub space: GapSpace,
}

impl GapLoss {
    pub fn value(&self, pred: &Vec3, target: &GazeVector) -> Result<f64, LossError> {
        self.grad(pred, target).map(|(v, _)| v)
    }

    pub fn grad(&self, pred: &Vec3, target: &GazeVector) -> Result<(f64, Vec3), LossError> {
        check_finite(pred)?;
        match self.space {
            GapSpace::Vector => {
                let t = target.to_array();
                let d = [pred[0] - t[0], pred[1] - t[1], pred[2] - t[2]];
                Ok(gap_norm(self.norm, &d))
            }
            GapSpace::Angles => {
                let n = norm(pred);
                if n.is_nan() || n <= 0.0 {
                    return Err(LossError::DegenerateVector);
                }
                let (pitch, dpitch) = pitch_of(pred);
                let (yaw, dyaw) = yaw_of(pred);
                let t = geometry::vector_to_pitch_yaw(*target);
                let d = [pitch - t.pitch(), yaw - t.yaw()];
                let (v, g2) = gap_norm2(self.norm, &d);
                let mut g = [0.0; 3];
                for k in 0..3 {
                    g[k] = g2[0] * dpitch[k] + g2[1] * dyaw[k];
                }
                Ok((v, g))
            }
        }
    }
}

fn gap_norm(kind: GapNorm, d: &Vec3) -> (f64, Vec3) {
    match kind {
        GapNorm::L1 => (d.iter().map(|x| x.abs()).sum(), [sign(d[0]), sign(d[1]), sign(d[2])]),
        GapNorm::L2 => (dot(d, d), [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]),
    }
}

fn gap_norm2(kind: GapNorm, d: &[f64; 2]) -> (f64, [f64; 2]) {
    match kind {
        GapNorm::L1 => (d[0].abs() + d[1].abs(), [sign(d[0]), sign(d[1])]),
        GapNorm::L2 => (d[0] * d[0] + d[1] * d[1], [2.0 * d[0], 2.0 * d[1]]),
    }
}

// pitch = -asin(y / |a|)
fn pitch_of(a: &Vec3) -> (f64, Vec3) {
    let n = norm(a);
    let u = a[1] / n;
    let uc = u.clamp(-GRAD_COS_LIMIT, GRAD_COS_LIMIT);
    let k = -1.0 / libm::sqrt(1.0 - uc * uc);
    let mut g = [0.0; 3];
    for (i, gi) in g.iter_mut().enumerate() {
        let e = if i == 1 { 1.0 } else { 0.0 };
        *gi = k * (e - u * a[i] / n) / n;
    }
    (-libm::asin(u.clamp(-1.0, 1.0)), g)
}

// yaw = atan2(-x, -z)
fn yaw_of(a: &Vec3) -> (f64, Vec3) {
    let r2 = a[0] * a[0] + a[2] * a[2];
    let yaw = libm::atan2(-a[0], -a[2]);
    if r2 == 0.0 {
        return (0.0, [0.0; 3]);
    }
    (yaw, [a[2] / r2, 0.0, -a[0] / r2])
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(v: &Vec3) -> Result<(), LossError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

/// Angle between `a` and `b` with its gradient with respect to `a`.
///
/// The gradient uses the cosine clamped to `[-GRAD_COS_LIMIT, GRAD_COS_LIMIT]`.
pub fn angle_grad(a: &Vec3, b: &Vec3) -> Result<(f64, Vec3), LossError> {
    check_finite(a)?;
    check_finite(b)?;
    let na = norm(a);
    let nb = norm(b);
    if !(na > 0.0 && nb > 0.0) {
        return Err(LossError::DegenerateVector);
    }
    let c = dot(a, b) / (na * nb);
    let value = geometry::angle_of(a, b);
    let cg = c.clamp(-GRAD_COS_LIMIT, GRAD_COS_LIMIT);
    let k = -1.0 / libm::sqrt(1.0 - cg * cg);
    let mut g = [0.0; 3];
    for i in 0..3 {
        // dc/da = b / (|a||b|) - c * a / |a|^2
        g[i] = k * (b[i] / (na * nb) - c * a[i] / (na * na));
    }
    Ok((value, g))
}

/// L1 gap between prediction and label.
pub fn l_original(g: &Vec3, g_hat: &GazeVector) -> Result<f64, LossError> {
    GapLoss::default().value(g, g_hat)
}

pub fn l_original_grad(g: &Vec3, g_hat: &GazeVector) -> Result<(f64, Vec3), LossError> {
    GapLoss::default().grad(g, g_hat)
}

/// Angle (radians) between prediction and label.
pub fn l_new(g: &Vec3, g_hat: &GazeVector) -> Result<f64, LossError> {
    l_new_grad(g, g_hat).map(|(v, _)| v)
}

pub fn l_new_grad(g: &Vec3, g_hat: &GazeVector) -> Result<(f64, Vec3), LossError> {
    angle_grad(g, &g_hat.to_array())
}

pub fn lb(g: &Vec3, g_hat: &GazeVector, alpha: f64) -> Result<f64, LossError> {
    lb_grad(g, g_hat, alpha, &GapLoss::default()).map(|(v, _)| v)
}

pub fn lb_grad(g: &Vec3, g_hat: &GazeVector, alpha: f64, gap: &GapLoss) -> Result<(f64, Vec3), LossError> {
    check_unit("alpha", alpha)?;
    let (a, ga) = l_new_grad(g, g_hat)?;
    let (o, go) = gap.grad(g, g_hat)?;
    let mut grad = [0.0; 3];
    for k in 0..3 {
        grad[k] = alpha * ga[k] + (1.0 - alpha) * go[k];
    }
    Ok((alpha * a + (1.0 - alpha) * o, grad))
}

pub fn la(g_diff: &Vec3, g_hat_test: &GazeVector, g_hat_guidance: &GazeVector) -> Result<f64, LossError> {
    la_grad(g_diff, g_hat_test, g_hat_guidance).map(|(v, _)| v)
}

/// LA with its gradient with respect to `g_diff`.
pub fn la_grad(g_diff: &Vec3, g_hat_test: &GazeVector, g_hat_guidance: &GazeVector) -> Result<(f64, Vec3), LossError> {
    let guidance = g_hat_guidance.to_array();
    let (diff_angle, g) = angle_grad(g_diff, &guidance)?;
    let (label_angle, _) = angle_grad(&g_hat_test.to_array(), &guidance)?;
    let d = diff_angle - label_angle;
    let s = sign(d);
    Ok((d.abs(), [s * g[0], s * g[1], s * g[2]]))
}

pub fn total_loss(
    g_drnet: &Vec3,
    g_diff: &Vec3,
    g_hat_test: &GazeVector,
    g_hat_guidance: &GazeVector,
    w: &LossWeights,
) -> Result<f64, LossError> {
    total_loss_grad(g_drnet, g_diff, g_hat_test, g_hat_guidance, w, &GapLoss::default()).map(|b| b.total)
}

/// Loss terms and gradients for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// `None` when LA was not evaluated.
    pub la: Option<f64>,
    pub lb: f64,
    pub total: f64,
    pub grad_gaze: Vec3,
    pub grad_diff: Vec3,
}

pub fn total_loss_grad(
    g_drnet: &Vec3,
    g_diff: &Vec3,
    g_hat_test: &GazeVector,
    g_hat_guidance: &GazeVector,
    w: &LossWeights,
    gap: &GapLoss,
) -> Result<LossBreakdown, LossError> {
    let (lb_v, lb_g) = lb_grad(g_drnet, g_hat_test, w.alpha, gap)?;
    let (la_v, la_g) = la_grad(g_diff, g_hat_test, g_hat_guidance)?;
    let beta = w.beta;
    Ok(LossBreakdown {
        la: Some(la_v),
        lb: lb_v,
        total: (1.0 - beta) * la_v + beta * lb_v,
        grad_gaze: lb_g.map(|x| beta * x),
        grad_diff: la_g.map(|x| (1.0 - beta) * x),
    })
}

/// LB alone, for variants without a differential path.
pub fn lb_only_grad(
    g: &Vec3,
    g_hat_test: &GazeVector,
    w: &LossWeights,
    gap: &GapLoss,
) -> Result<LossBreakdown, LossError> {
    let (lb_v, lb_g) = lb_grad(g, g_hat_test, w.alpha, gap)?;
    Ok(LossBreakdown {
        la: None,
        lb: lb_v,
        total: lb_v,
        grad_gaze: lb_g,
        grad_diff: [0.0; 3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use core::f64::consts::FRAC_PI_2;

    fn gv(x: f64, y: f64, z: f64) -> GazeVector {
        GazeVector::new(x, y, z).unwrap()
    }

    #[test]
    fn gap_examples() {
        let g = gv(0.3, -0.2, 0.9);
        assert_eq!(l_original(&g.to_array(), &g).unwrap(), 0.0);
        assert_eq!(l_original(&[0.0, 0.0, 0.0], &gv(1.0, 0.0, 0.0)).unwrap(), 1.0);
        assert_abs_diff_eq!(
            l_original(&[0.1, 0.2, -0.9], &gv(0.0, 0.0, -1.0)).unwrap(),
            0.4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn angle_examples() {
        let v = gv(0.2, 0.5, -0.7);
        assert_eq!(l_new(&v.to_array(), &v).unwrap(), 0.0);
        assert_abs_diff_eq!(
            l_new(&[1.0, 0.0, 0.0], &gv(0.0, 1.0, 0.0)).unwrap(),
            FRAC_PI_2,
            epsilon = 1e-12
        );
        // arccos(0.8), computed independently
        assert_abs_diff_eq!(
            l_new(&[0.6, 0.0, -0.8], &gv(0.0, 0.0, -1.0)).unwrap(),
            0.643_501_108_793_284_3,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_prediction_is_degenerate() {
        let t = gv(0.0, 0.0, -1.0);
        assert_eq!(l_new(&[0.0; 3], &t), Err(LossError::DegenerateVector));
        assert_eq!(la(&[0.0; 3], &t, &t), Err(LossError::DegenerateVector));
        assert_eq!(l_new(&[f64::NAN, 0.0, 1.0], &t), Err(LossError::NonFinite));
    }

    #[test]
    fn la_examples() {
        let t = gv(0.1, 0.2, -0.9);
        let g = gv(-0.3, 0.1, -0.8);
        assert_eq!(la(&t.to_array(), &t, &g).unwrap(), 0.0);
        assert_eq!(la(&g.to_array(), &g, &g).unwrap(), 0.0);
        assert_abs_diff_eq!(
            la(&[1.0, 0.0, 0.0], &gv(0.0, 1.0, 0.0), &gv(0.0, 0.0, 1.0)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn endpoints() {
        let p = [0.3, -0.1, -0.8];
        let t = gv(0.1, 0.05, -1.0);
        let g = gv(-0.2, 0.1, -0.9);
        let d = [0.5, 0.3, -0.6];
        assert_eq!(lb(&p, &t, 1.0).unwrap(), l_new(&p, &t).unwrap());
        assert_eq!(lb(&p, &t, 0.0).unwrap(), l_original(&p, &t).unwrap());
        let w1 = LossWeights::new(0.75, 1.0).unwrap();
        let w0 = LossWeights::new(0.75, 0.0).unwrap();
        assert_eq!(total_loss(&p, &d, &t, &g, &w1).unwrap(), lb(&p, &t, 0.75).unwrap());
        assert_eq!(total_loss(&p, &d, &t, &g, &w0).unwrap(), la(&d, &t, &g).unwrap());
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(1.2, 0.5).is_err());
        assert!(LossWeights::new(0.5, -0.1).is_err());
        assert!(lb(&[0.0, 0.0, -1.0], &gv(0.0, 0.0, -1.0), 2.0).is_err());
        let d = LossWeights::default();
        assert_eq!((d.alpha(), d.beta()), (0.75, 0.75));
    }

    #[test]
    fn scale_behaviour() {
        let p = [0.3, -0.1, -0.8];
        let t = gv(0.1, 0.05, -1.0);
        let scaled = p.map(|x| 3.5 * x);
        assert_abs_diff_eq!(l_new(&p, &t).unwrap(), l_new(&scaled, &t).unwrap(), epsilon = 1e-12);
        assert!((l_original(&p, &t).unwrap() - l_original(&scaled, &t).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn angle_space_gap_matches_pitch_yaw_difference() {
        let gap = GapLoss {
            norm: GapNorm::L1,
            space: GapSpace::Angles,
        };
        let t = geometry::pitch_yaw_to_vector(geometry::PitchYaw::new(0.1, 0.2).unwrap());
        let p = geometry::pitch_yaw_to_vector(geometry::PitchYaw::new(0.15, 0.1).unwrap());
        let v = gap.value(&p.to_array().map(|x| 2.0 * x), &t).unwrap();
        assert_abs_diff_eq!(v, 0.05 + 0.1, epsilon = 1e-12);
    }
}
