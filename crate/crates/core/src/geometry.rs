//! Rigid-body rotation of planar arrays and the array responses it induces.
//!
//! Angles follow the intrinsic z-y-x convention, `R = R_x(ζx)·R_y(ζy)·R_z(ζz)`.
//! An array is a centered grid of element offsets in its local x-y plane with
//! boresight `+z`; rotating it moves every element to `d0 + R·d̄_v` and tilts
//! the boresight to `R·[0,0,1]`.
//!
//! Every quantity that depends on the angles comes with its analytic
//! derivative. [`ArrayPose`] caches the rotation, its three partials and the
//! rotated offsets so that many paths can share them.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector, C64};

/// `|n^T u|` below this is treated as the visibility boundary, where the
/// zero subgradient is returned.
pub const KINK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub zeta_x: f64,
    pub zeta_y: f64,
    pub zeta_z: f64,
}

impl EulerAngles {
    pub const ZERO: EulerAngles = EulerAngles {
        zeta_x: 0.0,
        zeta_y: 0.0,
        zeta_z: 0.0,
    };

    pub fn new(zeta_x: f64, zeta_y: f64, zeta_z: f64) -> Self {
        Self {
            zeta_x,
            zeta_y,
            zeta_z,
        }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.zeta_x, self.zeta_y, self.zeta_z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Mechanical limits of one array, componentwise `lower ≤ ζ ≤ upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationBox {
    pub lower: EulerAngles,
    pub upper: EulerAngles,
}

impl RotationBox {
    pub fn new(lower: EulerAngles, upper: EulerAngles) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[-range, range]` on every axis.
    pub fn symmetric(range: f64) -> Self {
        let r = range.abs();
        Self {
            lower: EulerAngles::new(-r, -r, -r),
            upper: EulerAngles::new(r, r, r),
        }
    }

    /// The single point `{0}`: a fixed array.
    pub fn fixed() -> Self {
        Self::symmetric(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        for i in 0..3 {
            if !(lo[i].is_finite() && hi[i].is_finite()) || lo[i] > hi[i] {
                return Err(Error::InvalidConfig(format!(
                    "rotation box axis {i}: [{}, {}] is not a valid interval",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, a: &EulerAngles) -> bool {
        let (lo, hi, v) = (self.lower.to_array(), self.upper.to_array(), a.to_array());
        (0..3).all(|i| lo[i] <= v[i] && v[i] <= hi[i])
    }

    pub fn clamp(&self, a: &EulerAngles) -> EulerAngles {
        let (lo, hi, v) = (self.lower.to_array(), self.upper.to_array(), a.to_array());
        EulerAngles::new(
            v[0].clamp(lo[0], hi[0]),
            v[1].clamp(lo[1], hi[1]),
            v[2].clamp(lo[2], hi[2]),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }
}

/// Uniform planar array description shared by the BS and the RIS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub rows: usize,
    pub cols: usize,
    pub element_spacing: f64,
    pub center: Vector3<f64>,
    pub local_offsets: Vec<Vector3<f64>>,
    pub max_gain: f64,
    pub directivity_exponent: f64,
    pub wavelength: f64,
    /// Logistic sharpness of the optional smooth visibility gate. `None`
    /// keeps the hard half-space cutoff.
    #[serde(default)]
    pub smooth_gating: Option<f64>,
}

impl ArraySpec {
    /// `rows × cols` grid centered at the origin of the local frame, rows
    /// along local x and columns along local y.
    pub fn upa(
        rows: usize,
        cols: usize,
        element_spacing: f64,
        center: Vector3<f64>,
        wavelength: f64,
        max_gain: f64,
        directivity_exponent: f64,
    ) -> Result<Self> {
        let x0 = (rows as f64 - 1.0) / 2.0;
        let y0 = (cols as f64 - 1.0) / 2.0;
        let mut local_offsets = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                local_offsets.push(Vector3::new(
                    (r as f64 - x0) * element_spacing,
                    (c as f64 - y0) * element_spacing,
                    0.0,
                ));
            }
        }
        let spec = Self {
            rows,
            cols,
            element_spacing,
            center,
            local_offsets,
            max_gain,
            directivity_exponent,
            wavelength,
            smooth_gating: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.local_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_offsets.is_empty()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig("array must have at least one element".into()));
        }
        if self.local_offsets.len() != self.rows * self.cols {
            return Err(Error::InvalidConfig(format!(
                "array has {} offsets for a {}x{} grid",
                self.local_offsets.len(),
                self.rows,
                self.cols
            )));
        }
        let sum: Vector3<f64> = self.local_offsets.iter().sum();
        let scale = self.element_spacing.abs().max(1.0) * self.len() as f64;
        if sum.norm() > 1e-9 * scale {
            return Err(Error::InvalidConfig("element offsets are not centered".into()));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::InvalidConfig("wavelength must be positive".into()));
        }
        if !(self.max_gain >= 0.0) || !(self.directivity_exponent >= 0.0) {
            return Err(Error::InvalidConfig(
                "max gain and directivity exponent must be nonnegative".into(),
            ));
        }
        if let Some(k) = self.smooth_gating {
            if !(k > 0.0) {
                return Err(Error::InvalidConfig("gating sharpness must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Unit-norm far-field direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector(Vector3<f64>);

impl DirectionVector {
    /// Normalizes `v`; returns `None` for a zero vector.
    pub fn new(v: Vector3<f64>) -> Option<Self> {
        let n = v.norm();
        (n > 0.0 && n.is_finite()).then(|| Self(v / n))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// `(elevation, azimuth)` of this direction.
    pub fn angles(&self) -> (f64, f64) {
        (self.0.z.clamp(-1.0, 1.0).asin(), self.0.y.atan2(self.0.x))
    }
}

/// `[cosϑ·cosφ, cosϑ·sinφ, sinϑ]`, elevation from the xOy plane and azimuth
/// from the x-axis.
pub fn direction_vector(elevation: f64, azimuth: f64) -> DirectionVector {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    DirectionVector(Vector3::new(ce * ca, ce * sa, se))
}

fn axis_x(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn axis_y(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn axis_z(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

pub fn rotation_matrix(angles: &EulerAngles) -> Matrix3<f64> {
    let (rx, _) = axis_x(angles.zeta_x);
    let (ry, _) = axis_y(angles.zeta_y);
    let (rz, _) = axis_z(angles.zeta_z);
    rx * ry * rz
}

/// `[∂R/∂ζx, ∂R/∂ζy, ∂R/∂ζz]` by the product rule.
pub fn rotation_matrix_partials(angles: &EulerAngles) -> [Matrix3<f64>; 3] {
    let (rx, dx) = axis_x(angles.zeta_x);
    let (ry, dy) = axis_y(angles.zeta_y);
    let (rz, dz) = axis_z(angles.zeta_z);
    [dx * ry * rz, rx * dy * rz, rx * ry * dz]
}

pub fn rotated_positions(spec: &ArraySpec, angles: &EulerAngles) -> Vec<Vector3<f64>> {
    let r = rotation_matrix(angles);
    spec.local_offsets
        .iter()
        .map(|d| spec.center + r * d)
        .collect()
}

pub fn boresight(angles: &EulerAngles) -> DirectionVector {
    DirectionVector(rotation_matrix(angles).column(2).into_owned())
}

/// Array orientation with everything the steering and gain evaluations need.
#[derive(Debug, Clone)]
pub struct ArrayPose<'a> {
    spec: &'a ArraySpec,
    positions: Vec<Vector3<f64>>,
    /// `∂R/∂ζ_i · d̄_v` per element, one column per axis.
    offset_partials: Vec<Matrix3<f64>>,
    boresight: Vector3<f64>,
    boresight_partials: Matrix3<f64>,
}

impl<'a> ArrayPose<'a> {
    pub fn new(spec: &'a ArraySpec, angles: &EulerAngles) -> Self {
        let r = rotation_matrix(angles);
        let dr = rotation_matrix_partials(angles);
        let positions = spec.local_offsets.iter().map(|d| spec.center + r * d).collect();
        let offset_partials = spec
            .local_offsets
            .iter()
            .map(|d| Matrix3::from_columns(&[dr[0] * d, dr[1] * d, dr[2] * d]))
            .collect();
        let boresight = r.column(2).into_owned();
        let boresight_partials = Matrix3::from_columns(&[
            dr[0].column(2).into_owned(),
            dr[1].column(2).into_owned(),
            dr[2].column(2).into_owned(),
        ]);
        Self {
            spec,
            positions,
            offset_partials,
            boresight,
            boresight_partials,
        }
    }

    pub fn spec(&self) -> &ArraySpec {
        self.spec
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn steering(&self, u: &DirectionVector) -> CVector {
        let k = self.spec.wavenumber();
        CVector::from_iterator(
            self.positions.len(),
            self.positions
                .iter()
                .map(|d| C64::from_polar(1.0, k * u.0.dot(d))),
        )
    }

    /// Steering vector and its `J × 3` angle Jacobian `diag(ω_i)·t`.
    pub fn steering_with_jacobian(&self, u: &DirectionVector) -> (CVector, CMatrix) {
        let k = self.spec.wavenumber();
        let t = self.steering(u);
        let mut jac = CMatrix::zeros(t.len(), 3);
        for (v, dp) in self.offset_partials.iter().enumerate() {
            let w = dp.transpose() * u.0;
            for i in 0..3 {
                jac[(v, i)] = C64::new(0.0, k * w[i]) * t[v];
            }
        }
        (t, jac)
    }

    fn cosine(&self, u: &DirectionVector) -> f64 {
        self.boresight.dot(&u.0)
    }

    fn cosine_gradient(&self, u: &DirectionVector) -> Vector3<f64> {
        self.boresight_partials.transpose() * u.0
    }

    pub fn gain(&self, u: &DirectionVector) -> f64 {
        gain_profile(self.spec, self.cosine(u)).0
    }

    pub fn gain_gradient(&self, u: &DirectionVector) -> Vector3<f64> {
        let (_, dg, _) = gain_profile(self.spec, self.cosine(u));
        self.cosine_gradient(u) * dg
    }

    pub fn sqrt_gain_gradient(&self, u: &DirectionVector) -> Vector3<f64> {
        let (_, _, dsg) = gain_profile(self.spec, self.cosine(u));
        self.cosine_gradient(u) * dsg
    }

    /// `√G(u)·t(u)`, the per-path array response.
    pub fn weighted_steering(&self, u: &DirectionVector) -> CVector {
        let g = self.gain(u);
        if g == 0.0 {
            return CVector::zeros(self.positions.len());
        }
        self.steering(u) * C64::new(g.sqrt(), 0.0)
    }

    /// `√G·t` and its Jacobian `t·(∂√G)^T + √G·∂t`.
    pub fn weighted_steering_with_jacobian(&self, u: &DirectionVector) -> (CVector, CMatrix) {
        let c = self.cosine(u);
        let (g, _, dsg) = gain_profile(self.spec, c);
        let n = self.positions.len();
        if g == 0.0 && dsg == 0.0 {
            return (CVector::zeros(n), CMatrix::zeros(n, 3));
        }
        let sg = g.sqrt();
        let dsqrt = self.cosine_gradient(u) * dsg;
        let (t, dt) = self.steering_with_jacobian(u);
        let mut jac = dt * C64::new(sg, 0.0);
        for v in 0..n {
            for i in 0..3 {
                jac[(v, i)] += t[v] * dsqrt[i];
            }
        }
        (t * C64::new(sg, 0.0), jac)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(G, dG/dc, d√G/dc)` as functions of `c = n^T u`.
fn gain_profile(spec: &ArraySpec, c: f64) -> (f64, f64, f64) {
    let g0 = spec.max_gain;
    let p = spec.directivity_exponent;
    match spec.smooth_gating {
        None => {
            if c >= 0.0 {
                return (0.0, 0.0, 0.0);
            }
            let m = -c;
            let g = if p == 0.0 { g0 } else { g0 * (p * m.ln()).exp() };
            if m <= KINK_TOLERANCE || p == 0.0 {
                return (g, 0.0, 0.0);
            }
            let dg = -g0 * p * m.powf(p - 1.0);
            let dsg = -g0.sqrt() * 0.5 * p * m.powf(0.5 * p - 1.0);
            (g, dg, dsg)
        }
        Some(k) => {
            let m = c.abs();
            let s = logistic(-k * c);
            let mp = if p == 0.0 { 1.0 } else if m == 0.0 { 0.0 } else { m.powf(p) };
            let g = g0 * mp * s;
            if m <= KINK_TOLERANCE && p != 0.0 {
                return (g, 0.0, 0.0);
            }
            let dmp = if p == 0.0 { 0.0 } else { p * m.powf(p - 1.0) * c.signum() };
            let dg = g0 * (dmp * s - k * mp * s * (1.0 - s));
            let dsg = if g > 0.0 { dg / (2.0 * g.sqrt()) } else { 0.0 };
            (g, dg, dsg)
        }
    }
}

/// Element `v` is `exp(j·2π/λ·u^T d_v(ζ))`.
pub fn steering_vector(spec: &ArraySpec, angles: &EulerAngles, u: &DirectionVector) -> CVector {
    ArrayPose::new(spec, angles).steering(u)
}

/// `J × 3`, column `i` is `∂t/∂ζ_i`.
pub fn steering_jacobian(spec: &ArraySpec, angles: &EulerAngles, u: &DirectionVector) -> CMatrix {
    ArrayPose::new(spec, angles).steering_with_jacobian(u).1
}

/// `G0·(−n^T u)^p` on the front half-space `n^T u < 0`, zero behind.
pub fn directivity_gain(spec: &ArraySpec, angles: &EulerAngles, u: &DirectionVector) -> f64 {
    ArrayPose::new(spec, angles).gain(u)
}

/// `∂G/∂ζ`; zero behind the array and on the visibility boundary.
pub fn directivity_gradient(
    spec: &ArraySpec,
    angles: &EulerAngles,
    u: &DirectionVector,
) -> Vector3<f64> {
    ArrayPose::new(spec, angles).gain_gradient(u)
}

/// `∂√G/∂ζ = ∂G/∂ζ / (2√G)`, defined as zero where `G = 0`.
pub fn sqrt_directivity_gradient(
    spec: &ArraySpec,
    angles: &EulerAngles,
    u: &DirectionVector,
) -> Vector3<f64> {
    ArrayPose::new(spec, angles).sqrt_gain_gradient(u)
}
