//! Scenario sampling and rotation-dependent channel synthesis.
//!
//! A [`Scenario`] stores every sampled path parameter; [`Channels`] evaluates
//! the BS-user, BS-RIS, RIS-user and sensing responses at one pair of array
//! orientations, optionally with their Euler-angle Jacobians. The BS-RIS
//! matrix is kept in factored form `B = Σ_p b_p v_p q_p^H` so that its
//! angle derivatives never have to be materialized.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boresight, direction_vector, ArrayPose, ArraySpec, DirectionVector, EulerAngles, RotationBox};
use crate::linalg::{hadamard, CMatrix, CVector, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: C64,
    pub elevation: f64,
    pub azimuth: f64,
}

impl PathParams {
    pub fn direction(&self) -> DirectionVector {
        direction_vector(self.elevation, self.azimuth)
    }
}

/// One BS-RIS path: a single complex gain with separate angles on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgePath {
    pub gain: C64,
    pub bs_elevation: f64,
    pub bs_azimuth: f64,
    pub ris_elevation: f64,
    pub ris_azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLinks {
    /// BS-user paths.
    pub direct: Vec<PathParams>,
    /// RIS-user paths.
    pub ris: Vec<PathParams>,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub elevation: f64,
    pub azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingGrid {
    pub points: Vec<GridPoint>,
    pub desired: Vec<f64>,
    pub focused_set: Vec<usize>,
    pub azimuth_points: usize,
    pub elevation_points: usize,
}

impl SensingGrid {
    /// Azimuth-major grid: point `i_az * elevation_points + i_el`. Both axes
    /// are inclusive linspaces. `focused` holds `[i_az, i_el]` pairs.
    pub fn uniform(
        azimuth_points: usize,
        elevation_points: usize,
        elevation_max: f64,
        focused: &[[usize; 2]],
    ) -> Result<Self> {
        if azimuth_points == 0 || elevation_points == 0 {
            return Err(Error::InvalidConfig("sensing grid must not be empty".into()));
        }
        let az = linspace(-PI, PI, azimuth_points);
        let el = linspace(-elevation_max, elevation_max, elevation_points);
        let mut points = Vec::with_capacity(az.len() * el.len());
        for &a in &az {
            for &e in &el {
                points.push(GridPoint {
                    elevation: e,
                    azimuth: a,
                });
            }
        }
        let mut focused_set = Vec::with_capacity(focused.len());
        for &[ia, ie] in focused {
            if ia >= azimuth_points || ie >= elevation_points {
                return Err(Error::InvalidConfig(format!(
                    "focused point [{ia}, {ie}] outside the {azimuth_points}x{elevation_points} grid"
                )));
            }
            let idx = ia * elevation_points + ie;
            if !focused_set.contains(&idx) {
                focused_set.push(idx);
            }
        }
        let mut desired = vec![0.0; points.len()];
        for &i in &focused_set {
            desired[i] = 1.0;
        }
        Ok(Self {
            points,
            desired,
            focused_set,
            azimuth_points,
            elevation_points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Per grid direction: the BS-target gain `a_a` along the grid direction and
/// the RIS-target gain `c_a` along the geometric RIS-to-target direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingTarget {
    pub direct_gain: C64,
    pub ris_gain: C64,
    pub bs_elevation: f64,
    pub bs_azimuth: f64,
    pub ris_elevation: f64,
    pub ris_azimuth: f64,
}

/// Sampling recipe. Every field has a default so partial JSON files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_users: usize,
    pub bs_rows: usize,
    pub bs_cols: usize,
    pub ris_rows: usize,
    pub ris_cols: usize,
    pub bs_center: [f64; 3],
    pub ris_center: [f64; 3],
    pub wavelength: f64,
    /// Defaults to half a wavelength.
    pub element_spacing: Option<f64>,
    pub bs_max_gain: f64,
    pub ris_max_gain: f64,
    pub bs_directivity_exponent: f64,
    pub ris_directivity_exponent: f64,
    pub smooth_gating: Option<f64>,
    pub noise_variance: f64,
    pub power_dbm: f64,
    pub mse_threshold: f64,
    pub direct_paths: usize,
    pub ris_paths: usize,
    pub bridge_paths: usize,
    pub path_elevation_max_deg: f64,
    pub grid_azimuth_points: usize,
    pub grid_elevation_points: usize,
    pub grid_elevation_max_deg: f64,
    /// `[azimuth index, elevation index]` of each spotlight direction.
    pub focused_points: Vec<[usize; 2]>,
    pub target_range: f64,
    pub bs_rotation_range_deg: f64,
    pub ris_rotation_range_deg: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_users: 2,
            bs_rows: 2,
            bs_cols: 2,
            ris_rows: 6,
            ris_cols: 6,
            bs_center: [0.0, 0.0, 0.0],
            ris_center: [10.0, 0.0, 0.0],
            wavelength: 0.1,
            element_spacing: None,
            bs_max_gain: 2.0,
            ris_max_gain: 2.0,
            bs_directivity_exponent: 0.0,
            ris_directivity_exponent: 0.0,
            smooth_gating: None,
            noise_variance: 1e-6,
            power_dbm: 30.0,
            mse_threshold: 0.2,
            direct_paths: 2,
            ris_paths: 2,
            bridge_paths: 2,
            path_elevation_max_deg: 60.0,
            grid_azimuth_points: 11,
            grid_elevation_points: 6,
            grid_elevation_max_deg: 45.0,
            focused_points: vec![[3, 1], [7, 1]],
            target_range: 30.0,
            bs_rotation_range_deg: 90.0,
            ris_rotation_range_deg: 90.0,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("bs_rows", self.bs_rows),
            ("bs_cols", self.bs_cols),
            ("ris_rows", self.ris_rows),
            ("ris_cols", self.ris_cols),
            ("direct_paths", self.direct_paths),
            ("ris_paths", self.ris_paths),
            ("bridge_paths", self.bridge_paths),
            ("grid_azimuth_points", self.grid_azimuth_points),
            ("grid_elevation_points", self.grid_elevation_points),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("wavelength", self.wavelength),
            ("noise_variance", self.noise_variance),
            ("mse_threshold", self.mse_threshold),
            ("target_range", self.target_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.power_dbm.is_finite() {
            return Err(Error::InvalidConfig("power_dbm must be finite".into()));
        }
        if let Some(s) = self.element_spacing {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig("element_spacing must be positive".into()));
            }
        }
        for (name, v) in [
            ("bs_rotation_range_deg", self.bs_rotation_range_deg),
            ("ris_rotation_range_deg", self.ris_rotation_range_deg),
            ("path_elevation_max_deg", self.path_elevation_max_deg),
            ("grid_elevation_max_deg", self.grid_elevation_max_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.focused_points.is_empty() {
            return Err(Error::InvalidConfig("at least one focused point is required".into()));
        }
        Ok(())
    }

    pub fn power_budget(&self) -> f64 {
        dbm_to_watts(self.power_dbm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bs_spec: ArraySpec,
    pub ris_spec: ArraySpec,
    pub users: Vec<UserLinks>,
    pub bridge: Vec<BridgePath>,
    pub grid: SensingGrid,
    pub targets: Vec<SensingTarget>,
    pub power_budget: f64,
    pub mse_threshold: f64,
    pub bs_box: RotationBox,
    pub ris_box: RotationBox,
    pub rng_seed: u64,
}

fn complex_normal(rng: &mut ChaCha8Rng, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

fn sample_paths(rng: &mut ChaCha8Rng, count: usize, el_max: f64) -> Vec<PathParams> {
    let var = 1.0 / count as f64;
    (0..count)
        .map(|_| {
            let gain = complex_normal(rng, var);
            let elevation = rng.random_range(-el_max..=el_max);
            let azimuth = rng.random_range(-PI..=PI);
            PathParams {
                gain,
                elevation,
                azimuth,
            }
        })
        .collect()
}

/// Draws every random quantity of a scenario from `seed`.
pub fn sample_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let spacing = config.element_spacing.unwrap_or(config.wavelength / 2.0);
    let mut bs_spec = ArraySpec::upa(
        config.bs_rows,
        config.bs_cols,
        spacing,
        Vector3::from(config.bs_center),
        config.wavelength,
        config.bs_max_gain,
        config.bs_directivity_exponent,
    )?;
    let mut ris_spec = ArraySpec::upa(
        config.ris_rows,
        config.ris_cols,
        spacing,
        Vector3::from(config.ris_center),
        config.wavelength,
        config.ris_max_gain,
        config.ris_directivity_exponent,
    )?;
    bs_spec.smooth_gating = config.smooth_gating;
    ris_spec.smooth_gating = config.smooth_gating;
    bs_spec.validate()?;

    let el_max = config.path_elevation_max_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..config.num_users)
        .map(|_| {
            let direct = sample_paths(&mut rng, config.direct_paths, el_max);
            let ris = sample_paths(&mut rng, config.ris_paths, el_max);
            UserLinks {
                direct,
                ris,
                noise_variance: config.noise_variance,
            }
        })
        .collect();
    let bvar = 1.0 / config.bridge_paths as f64;
    let bridge = (0..config.bridge_paths)
        .map(|_| BridgePath {
            gain: complex_normal(&mut rng, bvar),
            bs_elevation: rng.random_range(-el_max..=el_max),
            bs_azimuth: rng.random_range(-PI..=PI),
            ris_elevation: rng.random_range(-el_max..=el_max),
            ris_azimuth: rng.random_range(-PI..=PI),
        })
        .collect();

    let grid = SensingGrid::uniform(
        config.grid_azimuth_points,
        config.grid_elevation_points,
        config.grid_elevation_max_deg.to_radians(),
        &config.focused_points,
    )?;
    let bs_center = Vector3::from(config.bs_center);
    let ris_center = Vector3::from(config.ris_center);
    let targets = grid
        .points
        .iter()
        .map(|p| {
            let u = direction_vector(p.elevation, p.azimuth);
            let target = bs_center + u.as_vector() * config.target_range;
            let (ris_elevation, ris_azimuth) = DirectionVector::new(target - ris_center)
                .map(|d| d.angles())
                .unwrap_or((p.elevation, p.azimuth));
            SensingTarget {
                direct_gain: complex_normal(&mut rng, 1.0),
                ris_gain: complex_normal(&mut rng, 1.0),
                bs_elevation: p.elevation,
                bs_azimuth: p.azimuth,
                ris_elevation,
                ris_azimuth,
            }
        })
        .collect();

    Ok(Scenario {
        bs_spec,
        ris_spec,
        users,
        bridge,
        grid,
        targets,
        power_budget: config.power_budget(),
        mse_threshold: config.mse_threshold,
        bs_box: RotationBox::symmetric(config.bs_rotation_range_deg.to_radians()),
        ris_box: RotationBox::symmetric(config.ris_rotation_range_deg.to_radians()),
        rng_seed: seed,
    })
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn bs_elements(&self) -> usize {
        self.bs_spec.len()
    }

    pub fn ris_elements(&self) -> usize {
        self.ris_spec.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// Columns of the precoder: `K` communication beams then `M` sensing beams.
    pub fn num_beams(&self) -> usize {
        self.num_users() + self.bs_elements()
    }

    pub fn validate(&self) -> Result<()> {
        self.bs_spec.validate()?;
        self.ris_spec.validate()?;
        self.bs_box.validate()?;
        self.ris_box.validate()?;
        if self.users.is_empty() {
            return Err(Error::InvalidConfig("scenario has no users".into()));
        }
        if self.users.iter().any(|u| !(u.noise_variance > 0.0)) {
            return Err(Error::InvalidConfig("noise variances must be positive".into()));
        }
        if !(self.power_budget > 0.0) || !(self.mse_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "power budget and MSE threshold must be positive".into(),
            ));
        }
        if self.targets.len() != self.grid.len() || self.grid.desired.len() != self.grid.len() {
            return Err(Error::InvalidConfig("sensing grid and targets disagree".into()));
        }
        for (a, &d) in self.grid.desired.iter().enumerate() {
            if (d == 1.0) != self.grid.focused_set.contains(&a) || !(d == 0.0 || d == 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "desired pattern at {a} does not match the focused set"
                )));
            }
        }
        Ok(())
    }

    /// Zeroes every RIS-user path gain.
    pub fn without_ris_user_links(&self) -> Scenario {
        let mut s = self.clone();
        for u in &mut s.users {
            for p in &mut u.ris {
                p.gain = C64::new(0.0, 0.0);
            }
        }
        s
    }

    /// Smallest `|n^T u|` over every path direction seen by either array.
    /// Directivity gains have a kink where this is zero.
    pub fn visibility_margin(&self, r_bs: &EulerAngles, r_ris: &EulerAngles) -> f64 {
        let nb = *boresight(r_bs).as_vector();
        let nr = *boresight(r_ris).as_vector();
        let mut bs_dirs: Vec<DirectionVector> = Vec::new();
        let mut ris_dirs: Vec<DirectionVector> = Vec::new();
        for u in &self.users {
            bs_dirs.extend(u.direct.iter().map(|p| p.direction()));
            ris_dirs.extend(u.ris.iter().map(|p| p.direction()));
        }
        for p in &self.bridge {
            bs_dirs.push(direction_vector(p.bs_elevation, p.bs_azimuth));
            ris_dirs.push(direction_vector(p.ris_elevation, p.ris_azimuth));
        }
        for t in &self.targets {
            bs_dirs.push(direction_vector(t.bs_elevation, t.bs_azimuth));
            ris_dirs.push(direction_vector(t.ris_elevation, t.ris_azimuth));
        }
        let bs = bs_dirs.iter().map(|u| nb.dot(u.as_vector()).abs());
        let ris = ris_dirs.iter().map(|u| nr.dot(u.as_vector()).abs());
        bs.chain(ris).fold(f64::INFINITY, f64::min)
    }

    pub fn channels(&self, r_bs: &EulerAngles, r_ris: &EulerAngles, with_jacobians: bool) -> Channels {
        Channels::new(self, r_bs, r_ris, with_jacobians)
    }
}

/// Factor `b_p · v_p q_p^H` of the BS-RIS matrix.
#[derive(Debug, Clone)]
pub struct BridgeFactor {
    pub gain: C64,
    /// `√G^B t^BR`, length `M`.
    pub bs: CVector,
    pub bs_jac: CMatrix,
    /// `√G^R t^RB`, length `N`.
    pub ris: CVector,
    pub ris_jac: CMatrix,
}

/// All channel quantities at one pair of orientations.
///
/// Jacobian fields are empty unless requested.
#[derive(Debug, Clone)]
pub struct Channels {
    pub h: Vec<CVector>,
    pub h_jac: Vec<CMatrix>,
    pub g: Vec<CVector>,
    pub g_jac: Vec<CMatrix>,
    pub bridge: Vec<BridgeFactor>,
    pub b: CMatrix,
    /// Direct sensing term `a_a √G^B t^BT`.
    pub d: Vec<CVector>,
    pub d_jac: Vec<CMatrix>,
    /// RIS-side sensing vector `c_a √G^R t^RT`.
    pub x: Vec<CVector>,
    pub x_jac: Vec<CMatrix>,
}

fn sum_paths(pose: &ArrayPose, paths: &[PathParams], jac: bool) -> (CVector, Option<CMatrix>) {
    let n = pose.positions().len();
    let mut v = CVector::zeros(n);
    let mut j = jac.then(|| CMatrix::zeros(n, 3));
    for p in paths {
        if p.gain == C64::new(0.0, 0.0) {
            continue;
        }
        let u = p.direction();
        if let Some(jm) = j.as_mut() {
            let (t, dt) = pose.weighted_steering_with_jacobian(&u);
            v.axpy(p.gain, &t, C64::new(1.0, 0.0));
            jm.zip_apply(&dt, |a, b| *a += p.gain * b);
        } else {
            v.axpy(p.gain, &pose.weighted_steering(&u), C64::new(1.0, 0.0));
        }
    }
    (v, j)
}

fn scaled(gain: C64, pose: &ArrayPose, u: &DirectionVector, jac: bool) -> (CVector, Option<CMatrix>) {
    if jac {
        let (t, dt) = pose.weighted_steering_with_jacobian(u);
        (t * gain, Some(dt * gain))
    } else {
        (pose.weighted_steering(u) * gain, None)
    }
}

impl Channels {
    pub fn new(scenario: &Scenario, r_bs: &EulerAngles, r_ris: &EulerAngles, jac: bool) -> Self {
        let bs = ArrayPose::new(&scenario.bs_spec, r_bs);
        let ris = ArrayPose::new(&scenario.ris_spec, r_ris);
        let (m, n) = (scenario.bs_elements(), scenario.ris_elements());

        let mut h = Vec::with_capacity(scenario.num_users());
        let mut h_jac = Vec::new();
        let mut g = Vec::with_capacity(scenario.num_users());
        let mut g_jac = Vec::new();
        for u in &scenario.users {
            let (hv, hj) = sum_paths(&bs, &u.direct, jac);
            let (gv, gj) = sum_paths(&ris, &u.ris, jac);
            h.push(hv);
            g.push(gv);
            h_jac.extend(hj);
            g_jac.extend(gj);
        }

        let mut b = CMatrix::zeros(m, n);
        let bridge: Vec<BridgeFactor> = scenario
            .bridge
            .iter()
            .map(|p| {
                let ub = direction_vector(p.bs_elevation, p.bs_azimuth);
                let ur = direction_vector(p.ris_elevation, p.ris_azimuth);
                let unit = C64::new(1.0, 0.0);
                let (bv, bj) = scaled(unit, &bs, &ub, jac);
                let (rv, rj) = scaled(unit, &ris, &ur, jac);
                b.gerc(p.gain, &bv, &rv, unit);
                BridgeFactor {
                    gain: p.gain,
                    bs: bv,
                    bs_jac: bj.unwrap_or_else(|| CMatrix::zeros(0, 0)),
                    ris: rv,
                    ris_jac: rj.unwrap_or_else(|| CMatrix::zeros(0, 0)),
                }
            })
            .collect();

        let mut d = Vec::with_capacity(scenario.grid_len());
        let mut d_jac = Vec::new();
        let mut x = Vec::with_capacity(scenario.grid_len());
        let mut x_jac = Vec::new();
        for t in &scenario.targets {
            let ub = direction_vector(t.bs_elevation, t.bs_azimuth);
            let ur = direction_vector(t.ris_elevation, t.ris_azimuth);
            let (dv, dj) = scaled(t.direct_gain, &bs, &ub, jac);
            let (xv, xj) = scaled(t.ris_gain, &ris, &ur, jac);
            d.push(dv);
            x.push(xv);
            d_jac.extend(dj);
            x_jac.extend(xj);
        }

        Self {
            h,
            h_jac,
            g,
            g_jac,
            bridge,
            b,
            d,
            d_jac,
            x,
            x_jac,
        }
    }

    pub fn has_jacobians(&self) -> bool {
        !self.h_jac.is_empty() || (self.h.is_empty() && !self.d_jac.is_empty())
    }

    /// `h + B(θ ⊙ g)`.
    pub fn compose(&self, direct: &CVector, ris_side: &CVector, theta: &CVector) -> CVector {
        direct + &self.b * hadamard(theta, ris_side)
    }

    pub fn effective_user(&self, k: usize, theta: &CVector) -> CVector {
        self.compose(&self.h[k], &self.g[k], theta)
    }

    pub fn effective_users(&self, theta: &CVector) -> Vec<CVector> {
        (0..self.h.len()).map(|k| self.effective_user(k, theta)).collect()
    }

    pub fn sensing(&self, a: usize, theta: &CVector) -> CVector {
        self.compose(&self.d[a], &self.x[a], theta)
    }

    pub fn sensing_all(&self, theta: &CVector) -> Vec<CVector> {
        (0..self.d.len()).map(|a| self.sensing(a, theta)).collect()
    }

    /// `(∂B/∂r^B_i) y` for the three BS angles, columns of an `M × 3` matrix.
    pub fn bridge_bs_derivative_apply(&self, y: &CVector) -> CMatrix {
        let m = self.b.nrows();
        let mut out = CMatrix::zeros(m, 3);
        for f in &self.bridge {
            let s = f.gain * f.ris.dotc(y);
            out.zip_apply(&f.bs_jac, |o, j| *o += s * j);
        }
        out
    }

    /// `(∂B/∂r^R_i) y` for the three RIS angles.
    pub fn bridge_ris_derivative_apply(&self, y: &CVector) -> CMatrix {
        let m = self.b.nrows();
        let mut out = CMatrix::zeros(m, 3);
        for f in &self.bridge {
            for i in 0..3 {
                let s = f.gain * f.ris_jac.column(i).dotc(y);
                for r in 0..m {
                    out[(r, i)] += s * f.bs[r];
                }
            }
        }
        out
    }

    /// Dense `∂B/∂r_i`, `i` in `0..6` (BS angles first).
    pub fn bridge_partials(&self) -> Vec<CMatrix> {
        let (m, n) = self.b.shape();
        let mut out = vec![CMatrix::zeros(m, n); 6];
        for f in &self.bridge {
            for i in 0..3 {
                out[i] += f.bs_jac.column(i) * f.ris.adjoint() * f.gain;
                out[3 + i] += &f.bs * f.ris_jac.column(i).adjoint() * f.gain;
            }
        }
        out
    }

    /// `M × 6` Jacobian of `direct + B(θ ⊙ ris_side)`.
    pub fn compose_jacobian(
        &self,
        direct_jac: &CMatrix,
        ris_side: &CVector,
        ris_side_jac: &CMatrix,
        theta: &CVector,
    ) -> CMatrix {
        let m = self.b.nrows();
        let y = hadamard(theta, ris_side);
        let db = self.bridge_bs_derivative_apply(&y);
        let dr = self.bridge_ris_derivative_apply(&y);
        let mut jac = CMatrix::zeros(m, 6);
        for i in 0..3 {
            let col_b = direct_jac.column(i) + db.column(i);
            jac.set_column(i, &col_b);
            let dy = hadamard(theta, &ris_side_jac.column(i).into_owned());
            let col_r = dr.column(i) + &self.b * dy;
            jac.set_column(3 + i, &col_r);
        }
        jac
    }

    pub fn user_jacobian(&self, k: usize, theta: &CVector) -> CMatrix {
        assert!(self.has_jacobians(), "channels were built without Jacobians");
        self.compose_jacobian(&self.h_jac[k], &self.g[k], &self.g_jac[k], theta)
    }

    pub fn sensing_jacobian(&self, a: usize, theta: &CVector) -> CMatrix {
        assert!(self.has_jacobians(), "channels were built without Jacobians");
        self.compose_jacobian(&self.d_jac[a], &self.x[a], &self.x_jac[a], theta)
    }
}

/// `h_k(r^B)`.
pub fn user_channel(scenario: &Scenario, k: usize, r_bs: &EulerAngles) -> CVector {
    let pose = ArrayPose::new(&scenario.bs_spec, r_bs);
    sum_paths(&pose, &scenario.users[k].direct, false).0
}

/// `g_k(r^R)`.
pub fn ris_user_channel(scenario: &Scenario, k: usize, r_ris: &EulerAngles) -> CVector {
    let pose = ArrayPose::new(&scenario.ris_spec, r_ris);
    sum_paths(&pose, &scenario.users[k].ris, false).0
}

/// Dense `B(r^B, r^R)`.
pub fn bs_ris_channel(scenario: &Scenario, r_bs: &EulerAngles, r_ris: &EulerAngles) -> CMatrix {
    Channels::new(scenario, r_bs, r_ris, false).b
}

pub fn effective_channel(
    scenario: &Scenario,
    k: usize,
    r_bs: &EulerAngles,
    r_ris: &EulerAngles,
    theta: &CVector,
) -> CVector {
    Channels::new(scenario, r_bs, r_ris, false).effective_user(k, theta)
}

pub fn sensing_steering(
    scenario: &Scenario,
    a: usize,
    r_bs: &EulerAngles,
    r_ris: &EulerAngles,
    theta: &CVector,
) -> CVector {
    Channels::new(scenario, r_bs, r_ris, false).sensing(a, theta)
}

/// Which composite channel a Jacobian refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    User(usize),
    Sensing(usize),
}

pub fn channel_jacobians(
    scenario: &Scenario,
    link: Link,
    r_bs: &EulerAngles,
    r_ris: &EulerAngles,
    theta: &CVector,
) -> CMatrix {
    let ch = Channels::new(scenario, r_bs, r_ris, true);
    match link {
        Link::User(k) => ch.user_jacobian(k, theta),
        Link::Sensing(a) => ch.sensing_jacobian(a, theta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::steering_vector;

    fn default_scenario(seed: u64) -> Scenario {
        sample_scenario(&ScenarioConfig::default(), seed).unwrap()
    }

    fn random_theta(n: usize, seed: u64) -> CVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CVector::from_iterator(n, (0..n).map(|_| C64::from_polar(1.0, rng.random_range(-PI..PI))))
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(default_scenario(3), default_scenario(3));
        assert_ne!(default_scenario(3), default_scenario(4));
    }

    #[test]
    fn default_config_values() {
        let s = default_scenario(0);
        assert_eq!(s.num_users(), 2);
        assert_eq!(s.bs_elements(), 4);
        assert_eq!(s.ris_elements(), 36);
        assert_eq!(s.ris_spec.center, Vector3::new(10.0, 0.0, 0.0));
        assert_eq!(s.users[0].noise_variance, 1e-6);
        assert!((s.power_budget - 1.0).abs() < 1e-15);
        assert_eq!(s.mse_threshold, 0.2);
        assert_eq!(s.grid_len(), 66);
        assert_eq!(s.grid.focused_set.len(), 2);
        s.validate().unwrap();
    }

    #[test]
    fn focused_points_are_in_front_at_rest() {
        let s = default_scenario(0);
        for &a in &s.grid.focused_set {
            assert!(s.grid.points[a].elevation < 0.0);
        }
    }

    #[test]
    fn path_gain_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let paths = sample_paths(&mut rng, 4, PI / 3.0);
        let mut acc = 0.0;
        let mut count = 0;
        acc += paths.iter().map(|p| p.gain.norm_sqr()).sum::<f64>();
        count += paths.len();
        while count < n {
            let ps = sample_paths(&mut rng, 4, PI / 3.0);
            acc += ps.iter().map(|p| p.gain.norm_sqr()).sum::<f64>();
            count += ps.len();
        }
        let var = acc / count as f64;
        assert!((var - 0.25).abs() < 0.05 * 0.25, "variance {var}");
    }

    #[test]
    fn invalid_config_rejected() {
        let c = ScenarioConfig {
            num_users: 0,
            ..Default::default()
        };
        assert!(sample_scenario(&c, 0).is_err());
        let c = ScenarioConfig {
            grid_azimuth_points: 0,
            ..Default::default()
        };
        assert!(sample_scenario(&c, 0).is_err());
        let c = ScenarioConfig {
            focused_points: vec![[20, 0]],
            ..Default::default()
        };
        assert!(sample_scenario(&c, 0).is_err());
    }

    #[test]
    fn single_isotropic_path_is_steering_vector() {
        let mut s = default_scenario(1);
        s.bs_spec.max_gain = 1.0;
        s.users[0].direct = vec![PathParams {
            gain: C64::new(1.0, 0.0),
            elevation: -0.3,
            azimuth: 0.8,
        }];
        let r = EulerAngles::ZERO;
        let h = user_channel(&s, 0, &r);
        let t = steering_vector(&s.bs_spec, &r, &direction_vector(-0.3, 0.8));
        assert!((h - t).norm() < 1e-14);
    }

    #[test]
    fn zero_gains_give_zero_channels() {
        let s = default_scenario(2).without_ris_user_links();
        let g = ris_user_channel(&s, 1, &EulerAngles::new(0.1, 0.2, 0.3));
        assert_eq!(g.norm(), 0.0);
        let theta = random_theta(s.ris_elements(), 1);
        let r = EulerAngles::new(0.2, -0.1, 0.3);
        let f = effective_channel(&s, 0, &r, &r, &theta);
        assert_eq!(f, user_channel(&s, 0, &r));
    }

    #[test]
    fn user_channel_matches_term_by_term_sum() {
        let s = default_scenario(5);
        let r = EulerAngles::new(0.3, -0.4, 1.1);
        let mut expected = CVector::zeros(s.bs_elements());
        for p in &s.users[1].direct {
            let u = p.direction();
            let g = crate::geometry::directivity_gain(&s.bs_spec, &r, &u);
            expected += steering_vector(&s.bs_spec, &r, &u) * (p.gain * g.sqrt());
        }
        assert!((user_channel(&s, 1, &r) - expected).norm() < 1e-13);
    }

    #[test]
    fn bridge_rank_is_bounded() {
        let s = default_scenario(9);
        let b = bs_ris_channel(&s, &EulerAngles::new(0.4, 0.1, 0.0), &EulerAngles::new(-0.3, 0.2, 0.5));
        let sv = b.clone().singular_values();
        let tol = 1e-10 * sv.max().max(1e-300);
        let rank = sv.iter().filter(|&&x| x > tol).count();
        assert!(rank <= s.bridge.len());
    }

    #[test]
    fn bs_rotation_leaves_ris_factor() {
        let s = default_scenario(4);
        let rr = EulerAngles::new(-0.3, 0.2, 0.5);
        let c1 = Channels::new(&s, &EulerAngles::ZERO, &rr, false);
        let c2 = Channels::new(&s, &EulerAngles::new(1.0, -0.5, 0.3), &rr, false);
        for (a, b) in c1.bridge.iter().zip(&c2.bridge) {
            assert_eq!(a.ris, b.ris);
        }
    }

    #[test]
    fn effective_channel_is_affine_in_theta() {
        let s = default_scenario(6);
        let r = EulerAngles::new(0.1, -0.2, 0.3);
        let ch = Channels::new(&s, &r, &r, false);
        let n = s.ris_elements();
        let (t1, t2, t0) = (random_theta(n, 1), random_theta(n, 2), random_theta(n, 3));
        let combo = &t1 + &t2 - &t0;
        let lhs = ch.effective_user(0, &combo);
        let rhs = ch.effective_user(0, &t1) + ch.effective_user(0, &t2) - ch.effective_user(0, &t0);
        assert!((lhs - rhs).norm() < 1e-10);
        let dense = &ch.h[0] + &ch.b * hadamard(&t1, &ch.g[0]);
        assert!((ch.effective_user(0, &t1) - dense).norm() < 1e-12);
    }

    #[test]
    fn factored_bridge_derivatives_match_dense() {
        let s = default_scenario(8);
        let ch = Channels::new(&s, &EulerAngles::new(0.5, 0.1, -0.2), &EulerAngles::new(0.2, -0.6, 0.3), true);
        let y = random_theta(s.ris_elements(), 4);
        let dense = ch.bridge_partials();
        let fb = ch.bridge_bs_derivative_apply(&y);
        let fr = ch.bridge_ris_derivative_apply(&y);
        for i in 0..3 {
            assert!((&dense[i] * &y - fb.column(i)).norm() < 1e-10);
            assert!((&dense[3 + i] * &y - fr.column(i)).norm() < 1e-10);
        }
    }

    #[test]
    fn no_ris_user_jacobian_has_no_ris_columns() {
        let s = default_scenario(3).without_ris_user_links();
        let theta = random_theta(s.ris_elements(), 7);
        let j = channel_jacobians(&s, Link::User(1), &EulerAngles::new(0.2, 0.1, 0.0), &EulerAngles::ZERO, &theta);
        for i in 3..6 {
            assert_eq!(j.column(i).norm(), 0.0);
        }
    }

    #[test]
    fn scenario_json_roundtrip() {
        let s = default_scenario(12);
        let text = serde_json::to_string(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
