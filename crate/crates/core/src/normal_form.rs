//! Reduced ODE models for the two-mode amplitudes: the resonant normal form,
//! its modulus system `(f, g)`, the heuristic quintic model and the regime-time
//! predictions derived from them.

use serde::{Deserialize, Serialize};

use crate::bound_states::Perturbation;
use crate::decomposition::ProbeRecord;
use crate::error::{Error, Result};
use crate::field::C64;
use crate::spectral::{Profiles, SpectralData};

/// Local error bound enforced by the step-doubling check.
pub const LOCAL_TOL: f64 = 1e-10;
/// `ε₃`.
pub const EPS3: f64 = 1.0 / 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Closed form in terms of the bound states.
    Formula,
    /// Supplied through [`ImaginaryOverrides`].
    Configured,
    /// Not determined by the model; set to zero.
    Default,
}

/// Imaginary parts of the quintic coefficients, which only rotate phases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImaginaryOverrides {
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub c5: Option<f64>,
    pub c8: Option<f64>,
    pub c9: Option<f64>,
    pub c10: Option<f64>,
}

/// Coefficients `c₁..c₁₀` of
///
/// ```text
/// u' = (c1|u|² + c2|v|²) u + (c3|u|⁴ + c4|u|²|v|² + c5|v|⁴) u
/// v' = (c6|u|² + c7|v|²) v + (c8|u|⁴ + c9|u|²|v|² + c10|v|⁴) v
/// ```
///
/// The growth term `|v|⁴u` carries `Re c5 = λ²γ₀`, balanced by `Re c9 = -2λ²γ₀`;
/// every other coefficient is purely imaginary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalFormCoefficients {
    pub c: [C64; 10],
    pub provenance: [Provenance; 10],
    pub gamma0: f64,
    pub lambda: f64,
}

impl NormalFormCoefficients {
    /// `c_j` with the 1-based index used in the equations.
    pub fn get(&self, j: usize) -> C64 {
        self.c[j - 1]
    }

    /// Effective rate `γ = Re c5 = λ²γ₀` of the modulus system.
    pub fn growth(&self) -> f64 {
        self.c[4].re
    }

    /// Checks the sign structure: only `c5` and `c9` have real parts, in ratio `-2`.
    pub fn check_structure(&self) -> Result<()> {
        for (j, c) in self.c.iter().enumerate() {
            if j != 4 && j != 8 && c.re != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "c{} has a real part",
                    j + 1
                )));
            }
        }
        if self.c[8].re != -2.0 * self.c[4].re {
            return Err(Error::InvalidArgument("Re c9 != -2 Re c5".into()));
        }
        Ok(())
    }

    pub fn rhs(&self, u: C64, v: C64) -> (C64, C64) {
        let (a, b) = (u.norm_sqr(), v.norm_sqr());
        let c = &self.c;
        let du = (c[0] * a + c[1] * b + c[2] * a * a + c[3] * a * b + c[4] * b * b) * u;
        let dv = (c[5] * a + c[6] * b + c[7] * a * a + c[8] * a * b + c[9] * b * b) * v;
        (du, dv)
    }

    /// Largest phase rate at amplitudes `(|u|², |v|²) = (a, b)`.
    pub fn max_rate(&self, a: f64, b: f64) -> f64 {
        let c: Vec<f64> = self.c.iter().map(|z| z.norm()).collect();
        let ru = c[0] * a + c[1] * b + c[2] * a * a + c[3] * a * b + c[4] * b * b;
        let rv = c[5] * a + c[6] * b + c[7] * a * a + c[8] * a * b + c[9] * b * b;
        ru.max(rv)
    }
}

/// `γ₀ = -(φ0 φ1², Im Φ1) / λ` from the resolvent profiles.
pub fn profile_gamma0(s: &SpectralData, p: &Profiles) -> Result<f64> {
    if p.lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(-s.coupling_field().inner_real(&p.phi1_im())? / p.lambda)
}

pub fn compute_coefficients(
    s: &SpectralData,
    pert: &Perturbation,
    gamma0: f64,
    lambda: f64,
    overrides: &ImaginaryOverrides,
) -> Result<NormalFormCoefficients> {
    let p0 = s.phi0();
    let p1 = s.phi1();
    let p00 = p0.mul(p0)?;
    let p11 = p1.mul(p1)?;
    let i = C64::new(0.0, 1.0);
    let a00 = p00.inner_real(&p00)?;
    let a01 = p00.inner_real(&p11)?;
    let gamma0 = if lambda == 0.0 { 0.0 } else { gamma0 };
    let g = lambda * lambda * gamma0;
    let e12 = if lambda == 0.0 { 0.0 } else { pert.e12 };

    let mut c = [C64::new(0.0, 0.0); 10];
    let mut provenance = [Provenance::Default; 10];
    c[0] = -i * lambda * a00;
    c[1] = -2.0 * i * lambda * a01;
    c[5] = c[1];
    c[6] = -i * e12;
    for j in [0, 1, 5, 6] {
        provenance[j] = Provenance::Formula;
    }
    let imag = [
        (2, overrides.c3),
        (3, overrides.c4),
        (4, overrides.c5),
        (7, overrides.c8),
        (8, overrides.c9),
        (9, overrides.c10),
    ];
    for (j, o) in imag {
        if let Some(v) = o {
            c[j].im = v;
            provenance[j] = Provenance::Configured;
        }
    }
    c[4].re = g;
    c[8].re = -2.0 * g;
    if overrides.c5.is_none() {
        provenance[4] = Provenance::Formula;
    }
    if overrides.c9.is_none() {
        provenance[8] = Provenance::Formula;
    }
    Ok(NormalFormCoefficients {
        c,
        provenance,
        gamma0,
        lambda,
    })
}

fn rk4<const N: usize>(f: &impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], h: f64) -> [f64; N] {
    let shift = |a: &[f64; N], k: &[f64; N], s: f64| {
        let mut o = *a;
        for (oi, ki) in o.iter_mut().zip(k) {
            *oi += s * ki;
        }
        o
    };
    let k1 = f(y);
    let k2 = f(&shift(y, &k1, h / 2.0));
    let k3 = f(&shift(y, &k2, h / 2.0));
    let k4 = f(&shift(y, &k3, h));
    let mut o = *y;
    for i in 0..N {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

fn check_horizon(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end >= 0.0 && t_end.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon {t_end} / step {dt}"
        )));
    }
    Ok((t_end / dt - 1e-9).ceil().max(0.0) as usize)
}

/// Sampled `(t, u, v)`; also used for frame amplitudes in the rotating frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub t: Vec<f64>,
    pub u: Vec<C64>,
    pub v: Vec<C64>,
}

impl ReducedTrajectory {
    /// `f = 2|u|²`.
    pub fn f(&self) -> Vec<f64> {
        self.u.iter().map(|z| 2.0 * z.norm_sqr()).collect()
    }

    /// `g = |v|²`.
    pub fn g(&self) -> Vec<f64> {
        self.v.iter().map(|z| z.norm_sqr()).collect()
    }

    /// First time at which `f` exceeds `g`, linearly interpolated.
    pub fn crossing_time(&self) -> Option<f64> {
        first_crossing(&self.t, &self.f(), &self.g())
    }

    /// Rotating-frame amplitudes `u = e^{i e0 t} x`, `v = e^{i e1 t} y` from frame probes.
    pub fn from_probes(probes: &[ProbeRecord], e0: f64, e1: f64) -> Self {
        let mut out = Self::default();
        for p in probes {
            out.t.push(p.t);
            out.u.push(C64::from_polar(1.0, e0 * p.t) * p.x());
            out.v.push(C64::from_polar(1.0, e1 * p.t) * p.y());
        }
        out
    }
}

pub(crate) fn first_crossing(t: &[f64], a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    if d.first().is_some_and(|v| *v >= 0.0) {
        return t.first().copied();
    }
    for i in 1..d.len() {
        if d[i] >= 0.0 {
            let s = -d[i - 1] / (d[i] - d[i - 1]);
            return Some(t[i - 1] + s * (t[i] - t[i - 1]));
        }
    }
    None
}

/// Step for [`integrate_nf`]: `10⁻³ (γ S²)⁻¹` capped so the fastest phase turns
/// by at most 0.01 rad per step.
pub fn default_nf_dt(coeffs: &NormalFormCoefficients, u0: C64, v0: C64) -> f64 {
    let (a, b) = (u0.norm_sqr(), v0.norm_sqr());
    let s = 2.0 * a + b;
    let slow = if coeffs.growth() > 0.0 && s > 0.0 {
        1e-3 / (coeffs.growth() * s * s)
    } else {
        f64::INFINITY
    };
    let w = coeffs.max_rate(a.max(s / 2.0), s);
    let fast = if w > 0.0 { 0.01 / w } else { f64::INFINITY };
    let dt = slow.min(fast);
    if dt.is_finite() {
        dt
    } else {
        1.0
    }
}

/// RK4 on the truncated normal form. Every step is repeated as two half steps;
/// the half-step result is kept and the step fails if the two differ by more
/// than [`LOCAL_TOL`] relative to the state.
pub fn integrate_nf(
    u0: C64,
    v0: C64,
    coeffs: &NormalFormCoefficients,
    t_end: f64,
    dt: f64,
) -> Result<ReducedTrajectory> {
    let steps = check_horizon(t_end, dt)?;
    let h = if steps == 0 {
        0.0
    } else {
        t_end / steps as f64
    };
    let f = |s: &[f64; 4]| {
        let (du, dv) = coeffs.rhs(C64::new(s[0], s[1]), C64::new(s[2], s[3]));
        [du.re, du.im, dv.re, dv.im]
    };
    let mut y = [u0.re, u0.im, v0.re, v0.im];
    let mut out = ReducedTrajectory {
        t: vec![0.0],
        u: vec![u0],
        v: vec![v0],
    };
    for k in 1..=steps {
        let full = rk4(&f, &y, h);
        let half = rk4(&f, &rk4(&f, &y, h / 2.0), h / 2.0);
        let scale = half
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let err = full
            .iter()
            .zip(&half)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if !(err <= LOCAL_TOL * scale) {
            return Err(Error::Integrator(format!(
                "local error {:.2e} exceeds {LOCAL_TOL:.0e} at t = {:.4}; reduce dt below {h:.3e}",
                err / scale,
                (k - 1) as f64 * h
            )));
        }
        y = half;
        out.t.push(k as f64 * h);
        out.u.push(C64::new(y[0], y[1]));
        out.v.push(C64::new(y[2], y[3]));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FgTrajectory {
    pub t: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl FgTrajectory {
    pub fn crossing_time(&self) -> Option<f64> {
        first_crossing(&self.t, &self.f, &self.g)
    }
}

/// `f' = 2γ g² f`, `g' = -2γ f g²` by RK4. Without `dt` the step is `10⁻³ (γ (f0+g0)²)⁻¹`.
pub fn integrate_fg(
    f0: f64,
    g0: f64,
    gamma: f64,
    t_end: f64,
    dt: Option<f64>,
) -> Result<FgTrajectory> {
    if !(f0 >= 0.0 && g0 >= 0.0) {
        return Err(Error::InvalidArgument(
            "f0 and g0 must be nonnegative".into(),
        ));
    }
    let s = f0 + g0;
    let dt = dt.unwrap_or_else(|| {
        let r = gamma.abs() * s * s;
        if r > 0.0 {
            (1e-3 / r).min(t_end.max(1e-300))
        } else {
            t_end.max(1.0)
        }
    });
    let steps = check_horizon(t_end, dt)?;
    let h = if steps == 0 {
        0.0
    } else {
        t_end / steps as f64
    };
    let rhs = |y: &[f64; 2]| {
        let r = 2.0 * gamma * y[0] * y[1] * y[1];
        [r, -r]
    };
    let mut y = [f0, g0];
    let mut out = FgTrajectory {
        t: vec![0.0],
        f: vec![f0],
        g: vec![g0],
    };
    for k in 1..=steps {
        y = rk4(&rhs, &y, h);
        out.t.push(k as f64 * h);
        out.f.push(y[0]);
        out.g.push(y[1]);
    }
    Ok(out)
}

/// `F(h) = -1/h + ln h - ln(1-h)`, the antiderivative of `1/((1-h)h²)`.
fn fg_primitive(h: f64) -> f64 {
    -1.0 / h + h.ln() - (1.0 - h).ln()
}

/// Time for `h = g/(f+g)` to move from `h0` to `h` under the `(f, g)` system.
pub fn fg_time_between(h0: f64, h: f64, gamma: f64, sum: f64) -> Result<f64> {
    let ok = |v: f64| v > 0.0 && v < 1.0;
    if !ok(h0) || !ok(h) || gamma <= 0.0 || sum <= 0.0 {
        return Err(Error::InvalidArgument(
            "need 0 < h < 1, γ > 0, f + g > 0".into(),
        ));
    }
    Ok((fg_primitive(h0) - fg_primitive(h)) / (2.0 * gamma * sum * sum))
}

/// Closed-form time at which `f` first equals `g`.
pub fn fg_crossing_time(f0: f64, g0: f64, gamma: f64) -> Result<f64> {
    let s = f0 + g0;
    if g0 <= f0 {
        return Ok(0.0);
    }
    if f0 <= 0.0 {
        return Ok(f64::INFINITY);
    }
    fg_time_between(g0 / s, 0.5, gamma, s)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Model4Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<C64>,
    pub y: Vec<C64>,
}

impl Model4Trajectory {
    /// `|x|² + ½|y|²` along the trajectory.
    pub fn invariant(&self) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(x, y)| x.norm_sqr() + 0.5 * y.norm_sqr())
            .collect()
    }
}

/// `x' = γ|y|⁴x`, `y' = -2γ|x|²|y|²y` by RK4. Without `dt` the step is
/// `10⁻³ (γ S²)⁻¹` with `S = 2|x0|² + |y0|²`.
pub fn integrate_model4(
    x0: C64,
    y0: C64,
    gamma: f64,
    t_end: f64,
    dt: Option<f64>,
) -> Result<Model4Trajectory> {
    let s = 2.0 * x0.norm_sqr() + y0.norm_sqr();
    let dt = dt.unwrap_or_else(|| {
        let r = gamma.abs() * s * s;
        if r > 0.0 {
            (1e-3 / r).min(t_end.max(1e-300))
        } else {
            t_end.max(1.0)
        }
    });
    let steps = check_horizon(t_end, dt)?;
    let h = if steps == 0 {
        0.0
    } else {
        t_end / steps as f64
    };
    let rhs = |z: &[f64; 4]| {
        let a = z[0] * z[0] + z[1] * z[1];
        let b = z[2] * z[2] + z[3] * z[3];
        let gx = gamma * b * b;
        let gy = -2.0 * gamma * a * b;
        [gx * z[0], gx * z[1], gy * z[2], gy * z[3]]
    };
    let mut z = [x0.re, x0.im, y0.re, y0.im];
    let mut out = Model4Trajectory {
        t: vec![0.0],
        x: vec![x0],
        y: vec![y0],
    };
    for k in 1..=steps {
        z = rk4(&rhs, &z, h);
        out.t.push(k as f64 * h);
        out.x.push(C64::new(z[0], z[1]));
        out.y.push(C64::new(z[2], z[3]));
    }
    Ok(out)
}

/// Amplitudes describing initial data `ψ₀ = x₀φ₀ + Q₁(y₀) + ξ₀`.
///
/// The time scales are evaluated for the rescaled amplitude `√|λ| n`, under which
/// the equation with coupling `λ` maps onto the one with unit coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataClass {
    pub n: f64,
    pub x0: f64,
    pub y0: f64,
    /// `‖ξ₀‖_Y`.
    pub xi0: f64,
    pub lambda: f64,
}

impl DataClass {
    fn n_eff(&self) -> f64 {
        self.n * self.lambda.abs().sqrt()
    }

    /// `n₁ = (|x₀|² + ½|y₀|²)^{1/2}`.
    pub fn n1(&self) -> f64 {
        (self.x0 * self.x0 + 0.5 * self.y0 * self.y0).sqrt()
    }

    pub fn predicates(&self, gamma0: f64) -> PredicateReport {
        let ne = self.n_eff();
        PredicateReport {
            y_dominant: self.y0.abs() >= 0.5 * self.n,
            x_not_small: self.x0.abs() >= 2.0 * self.n * (-1.0 / ne).exp(),
            x_above_dispersion: self.x0.abs()
                >= self.lambda.abs() * self.n * self.n * self.xi0 / eps2(gamma0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateReport {
    /// `|y₀| ≥ n/2`.
    pub y_dominant: bool,
    /// `|x₀| ≥ 2n e^{-1/n}`.
    pub x_not_small: bool,
    /// `|x₀| ≥ ε₂⁻¹ n² ‖ξ₀‖_Y`.
    pub x_above_dispersion: bool,
}

impl PredicateReport {
    pub fn all(&self) -> bool {
        self.y_dominant && self.x_not_small && self.x_above_dispersion
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.y_dominant {
            v.push("|y0| < n/2");
        }
        if !self.x_not_small {
            v.push("|x0| < 2n exp(-1/n)");
        }
        if !self.x_above_dispersion {
            v.push("|x0| < n^2 |xi0|_Y / eps2");
        }
        v
    }
}

/// `ε₂ = 1/(2000(γ₀+1))`.
pub fn eps2(gamma0: f64) -> f64 {
    1.0 / (2000.0 * (gamma0 + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimePrediction {
    pub n: f64,
    pub n1: f64,
    pub x0: f64,
    pub lambda: f64,
    pub gamma0: f64,
    pub eps: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub t0: f64,
    /// Upper bound for the end of the initial layer, `t₀ + 1.01 (γ₀n⁴)⁻¹ log(n/|x₀|)`.
    pub t1_bound: f64,
    /// `t1_bound + 10100 (γ₀n⁴ε²)⁻¹`.
    pub t2_bound: f64,
    /// `n ≤ ε²` for the rescaled amplitude.
    pub small_amplitude: bool,
    pub predicates: PredicateReport,
}

/// Regime times without enforcing the admissible class.
pub fn regime_prediction(d: &DataClass, gamma0: f64, eps0: f64) -> Result<RegimePrediction> {
    if !(d.n > 0.0 && d.x0.abs() > 0.0 && eps0 > 0.0) {
        return Err(Error::InvalidArgument(
            "need n > 0, x0 != 0 and eps0 > 0".into(),
        ));
    }
    let ne = d.n_eff();
    let n4 = ne.powi(4);
    let x0 = d.x0.abs();
    let log2 = (2.0 * d.n / x0).ln();
    let eps = if log2 > 0.0 {
        (0.5 * eps0).min(log2.powf(-0.5))
    } else {
        0.5 * eps0
    };
    let t0 = EPS3 / n4;
    let rate = gamma0 * n4;
    let t1_bound = t0 + 1.01 / rate * (d.n / x0).ln().max(0.0);
    let t2_bound = t1_bound + 10100.0 / (rate * eps * eps);
    Ok(RegimePrediction {
        n: d.n,
        n1: d.n1(),
        x0,
        lambda: d.lambda,
        gamma0,
        eps,
        eps2: eps2(gamma0),
        eps3: EPS3,
        t0,
        t1_bound,
        t2_bound,
        small_amplitude: ne <= eps * eps,
        predicates: d.predicates(gamma0),
    })
}

/// As [`regime_prediction`], failing when the data lie outside the admissible class.
pub fn predict_times(d: &DataClass, gamma0: f64, eps0: f64) -> Result<RegimePrediction> {
    let p = regime_prediction(d, gamma0, eps0)?;
    if !p.predicates.all() {
        return Err(Error::Predicate(p.predicates.failures().join(", ")));
    }
    Ok(p)
}

/// Normal-form residuals along a sampled trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NfResiduals {
    pub t: Vec<f64>,
    /// `|g_u|`.
    pub gu: Vec<f64>,
    pub gv: Vec<f64>,
    /// Components of `g_u`, `g_v` along `u`, `v`: the parts that change the moduli.
    pub gu_modulus: Vec<f64>,
    pub gv_modulus: Vec<f64>,
    /// `|u|` of the smoothed amplitude.
    pub u_abs: Vec<f64>,
    /// `|u - ů|` where `ů` is the smoothed amplitude.
    pub u_dev: Vec<f64>,
}

impl NfResiduals {
    fn sup(v: &[f64]) -> f64 {
        v.iter().copied().fold(0.0, f64::max)
    }

    /// `sup |g_u| / |u|`.
    pub fn sup_gu_rel(&self) -> f64 {
        Self::sup(
            &self
                .gu
                .iter()
                .zip(&self.u_abs)
                .map(|(g, u)| g / u)
                .collect::<Vec<_>>(),
        )
    }

    pub fn sup_gv(&self) -> f64 {
        Self::sup(&self.gv)
    }

    pub fn sup_gu_modulus_rel(&self) -> f64 {
        Self::sup(
            &self
                .gu_modulus
                .iter()
                .zip(&self.u_abs)
                .map(|(g, u)| g / u)
                .collect::<Vec<_>>(),
        )
    }

    pub fn sup_gv_modulus(&self) -> f64 {
        Self::sup(&self.gv_modulus)
    }

    /// `sup |u - ů| / |u|`.
    pub fn sup_u_dev_rel(&self) -> f64 {
        Self::sup(
            &self
                .u_dev
                .iter()
                .zip(&self.u_abs)
                .map(|(g, u)| g / u)
                .collect::<Vec<_>>(),
        )
    }
}

/// Boxcar passes per smoothing; three passes push the sidelobes of the
/// non-resonant oscillations below the residuals being measured.
const SMOOTH_PASSES: usize = 3;

/// Moving average over `2k+1` samples, defined on the interior.
fn smooth(z: &[f64], k: usize) -> Vec<f64> {
    let w = (2 * k + 1) as f64;
    let mut out = Vec::with_capacity(z.len().saturating_sub(2 * k));
    if z.len() < 2 * k + 1 {
        return out;
    }
    let mut acc: f64 = z[..2 * k + 1].iter().sum();
    out.push(acc / w);
    for i in 2 * k + 1..z.len() {
        acc += z[i] - z[i - 2 * k - 1];
        out.push(acc / w);
    }
    out
}

/// Repeated moving averages of the modulus and of the unwrapped phase.
fn smooth_polar(z: &[C64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let rho: Vec<f64> = z.iter().map(|v| v.norm()).collect();
    let mut theta = Vec::with_capacity(z.len());
    let mut prev = 0.0;
    for (i, v) in z.iter().enumerate() {
        let a = v.arg();
        let t = if i == 0 {
            a
        } else {
            let mut d = (a - prev).rem_euclid(std::f64::consts::TAU);
            if d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            prev + d
        };
        theta.push(t);
        prev = t;
    }
    let mut out = (rho, theta);
    for _ in 0..SMOOTH_PASSES {
        out = (smooth(&out.0, k), smooth(&out.1, k));
    }
    out
}

/// Residuals `g_u = ů' - N_u(ů, v̊)` and likewise for `v`, by centered differences.
///
/// `ů`, `v̊` carry the moving averages of the modulus and unwrapped phase of `u`,
/// `v` over `window` time units, which removes the non-resonant oscillations but
/// not the slow rotation; `window = 0` uses the samples as they are. Samples
/// must be uniformly spaced.
pub fn measure_nf_residuals(
    traj: &ReducedTrajectory,
    coeffs: &NormalFormCoefficients,
    window: f64,
) -> Result<NfResiduals> {
    let n = traj.t.len();
    if n < 5 || traj.u.len() != n || traj.v.len() != n {
        return Err(Error::InsufficientData(format!(
            "{n} samples cannot be differenced"
        )));
    }
    let h = (traj.t[n - 1] - traj.t[0]) / (n - 1) as f64;
    if !(h > 0.0)
        || traj
            .t
            .windows(2)
            .any(|w| ((w[1] - w[0]) - h).abs() > 1e-6 * h)
    {
        return Err(Error::InsufficientData(
            "samples are not uniformly spaced".into(),
        ));
    }
    let k = (0.5 * window / h).round() as usize;
    if n < 4 * SMOOTH_PASSES * k + 5 {
        return Err(Error::InsufficientData(format!(
            "{n} samples spaced {h:.3e} are too sparse for a {window} smoothing window"
        )));
    }
    let (ru, pu) = smooth_polar(&traj.u, k);
    let (rv, pv) = smooth_polar(&traj.v, k);
    let polar = |r: f64, p: f64| C64::from_polar(r, p);
    let mut r = NfResiduals::default();
    for j in 1..ru.len() - 1 {
        let i = j + SMOOTH_PASSES * k;
        let (u, v) = (polar(ru[j], pu[j]), polar(rv[j], pv[j]));
        let drive = |rho: &[f64], ph: &[f64]| {
            let dr = (rho[j + 1] - rho[j - 1]) / (2.0 * h);
            let dp = (ph[j + 1] - ph[j - 1]) / (2.0 * h);
            C64::new(dr, rho[j] * dp) * C64::from_polar(1.0, ph[j])
        };
        let (nu, nv) = coeffs.rhs(u, v);
        let gu = drive(&ru, &pu) - nu;
        let gv = drive(&rv, &pv) - nv;
        let (ua, va) = (ru[j], rv[j]);
        r.t.push(traj.t[i]);
        r.gu.push(gu.norm());
        r.gv.push(gv.norm());
        r.gu_modulus.push(if ua > 0.0 {
            (u.conj() * gu).re.abs() / ua
        } else {
            0.0
        });
        r.gv_modulus.push(if va > 0.0 {
            (v.conj() * gv).re.abs() / va
        } else {
            0.0
        });
        r.u_abs.push(ua);
        r.u_dev.push((traj.u[i] - u).norm());
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound_states::compute_perturbation;
    use crate::grid::SpatialGrid;
    use crate::spectral::{solve_eigenpairs, Potential, PotentialKind};
    use proptest::prelude::*;

    fn synthetic(g: f64) -> NormalFormCoefficients {
        let i = C64::new(0.0, 1.0);
        let mut c = [C64::new(0.0, 0.0); 10];
        c[0] = -0.7 * i;
        c[1] = -0.4 * i;
        c[5] = -0.4 * i;
        c[6] = -0.2 * i;
        c[2] = 0.3 * i;
        c[3] = -0.1 * i;
        c[4] = C64::new(g, 0.05);
        c[7] = 0.2 * i;
        c[8] = C64::new(-2.0 * g, -0.3);
        c[9] = 0.1 * i;
        NormalFormCoefficients {
            c,
            provenance: [Provenance::Configured; 10],
            gamma0: g,
            lambda: 1.0,
        }
    }

    fn spectral() -> SpectralData {
        let g = SpatialGrid::one_d(256, 24.0).unwrap();
        solve_eigenpairs(
            &Potential::sample(
                PotentialKind::Gaussian {
                    depth: 8.0,
                    width: 1.0,
                },
                g,
            )
            .unwrap(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn coefficient_structure() {
        let s = spectral();
        let pert = compute_perturbation(&s, 1.0).unwrap();
        let c =
            compute_coefficients(&s, &pert, 0.004, 1.0, &ImaginaryOverrides::default()).unwrap();
        c.check_structure().unwrap();
        assert_eq!(c.get(9).re / c.get(5).re, -2.0);
        assert_eq!(c.get(2), c.get(6));
        assert!(c.get(1).im < 0.0 && c.get(1).re == 0.0);
        assert_eq!(c.get(7), C64::new(0.0, -pert.e12));
        assert_eq!(c.provenance[2], Provenance::Default);

        let o = ImaginaryOverrides {
            c4: Some(0.5),
            ..Default::default()
        };
        let c = compute_coefficients(&s, &pert, 0.004, 2.0, &o).unwrap();
        assert_eq!(c.get(4), C64::new(0.0, 0.5));
        assert_eq!(c.provenance[3], Provenance::Configured);
        assert!((c.growth() - 4.0 * 0.004).abs() < 1e-18);

        let z =
            compute_coefficients(&s, &pert, 0.004, 0.0, &ImaginaryOverrides::default()).unwrap();
        assert!(z.c.iter().all(|c| *c == C64::new(0.0, 0.0)) && z.gamma0 == 0.0);
    }

    #[test]
    fn invariant_subspaces() {
        let c = synthetic(2.0);
        let tr = integrate_nf(C64::new(0.3, 0.1), C64::new(0.0, 0.0), &c, 20.0, 0.01).unwrap();
        let a0 = tr.u[0].norm();
        assert!(tr.u.iter().all(|u| (u.norm() - a0).abs() < 1e-12));
        let tr = integrate_nf(C64::new(0.0, 0.0), C64::new(0.4, -0.2), &c, 20.0, 0.01).unwrap();
        let b0 = tr.v[0].norm();
        assert!(tr.u.iter().all(|u| *u == C64::new(0.0, 0.0)));
        assert!(tr.v.iter().all(|v| (v.norm() - b0).abs() < 1e-12));
    }

    #[test]
    fn nf_moduli_match_fg() {
        let c = synthetic(3.0);
        let (u0, v0) = (C64::new(0.05, 0.02), C64::new(0.4, 0.3));
        let dt = default_nf_dt(&c, u0, v0);
        let t_end = 30.0;
        let tr = integrate_nf(u0, v0, &c, t_end, dt).unwrap();
        let fg = integrate_fg(
            2.0 * u0.norm_sqr(),
            v0.norm_sqr(),
            c.growth(),
            t_end,
            Some(t_end / (tr.t.len() - 1) as f64),
        )
        .unwrap();
        let f = tr.f();
        let g = tr.g();
        for i in 0..f.len() {
            assert!((f[i] - fg.f[i]).abs() < 1e-8 && (g[i] - fg.g[i]).abs() < 1e-8);
        }
        assert!(f.windows(2).all(|w| w[1] >= w[0]) && g.windows(2).all(|w| w[1] <= w[0]));
        assert!(*f.last().unwrap() > 2.0 * f[0]);
    }

    #[test]
    fn step_rejection() {
        let c = synthetic(3.0);
        let r = integrate_nf(C64::new(0.5, 0.0), C64::new(0.8, 0.0), &c, 10.0, 1.0);
        assert!(matches!(r, Err(Error::Integrator(_))));
    }

    #[test]
    fn fg_trivial_and_growth() {
        let tr = integrate_fg(0.0, 0.5, 2.0, 10.0, None).unwrap();
        assert!(tr.f.iter().all(|f| *f == 0.0) && tr.g.iter().all(|g| *g == 0.5));

        let (f0, g0, gam) = (1e-5, 0.8, 1.5);
        let tr = integrate_fg(f0, g0, gam, 40.0, None).unwrap();
        for i in 0..tr.t.len() {
            assert!(((tr.f[i] + tr.g[i]) - (f0 + g0)).abs() <= 1e-10 * (f0 + g0));
            if tr.f[i] <= 0.01 * g0 {
                let pred = (2.0 * gam * g0 * g0 * tr.t[i]).exp();
                assert!((tr.f[i] / f0 / pred - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn closed_form_crossing() {
        let (f0, g0, gam) = (0.02, 0.9, 0.7);
        let tc = fg_crossing_time(f0, g0, gam).unwrap();
        let tr = integrate_fg(f0, g0, gam, 1.5 * tc, None).unwrap();
        let num = tr.crossing_time().unwrap();
        assert!((num - tc).abs() < 1e-6 * tc, "{num} vs {tc}");
        assert_eq!(fg_crossing_time(0.9, 0.1, gam).unwrap(), 0.0);
    }

    #[test]
    fn model4_invariant_and_mapping() {
        let tr = integrate_model4(
            C64::new(0.2, 0.0),
            C64::new(0.0, 0.0),
            5.0,
            10.0,
            Some(0.01),
        )
        .unwrap();
        assert!(tr.x.iter().all(|x| *x == C64::new(0.2, 0.0)));

        let (x0, y0, gam) = (C64::new(0.06, 0.03), C64::new(0.5, -0.4), 4.0);
        let tr = integrate_model4(x0, y0, gam, 200.0, None).unwrap();
        let inv = tr.invariant();
        assert!(inv.iter().all(|v| (v - inv[0]).abs() <= 1e-10 * inv[0]));
        let h = tr.t[1];
        let fg = integrate_fg(2.0 * x0.norm_sqr(), y0.norm_sqr(), gam, 200.0, Some(h)).unwrap();
        for i in 0..tr.t.len() {
            assert!((2.0 * tr.x[i].norm_sqr() - fg.f[i]).abs() < 1e-8);
            assert!((tr.y[i].norm_sqr() - fg.g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn regime_examples() {
        assert_eq!(eps2(0.0), 1.0 / 2000.0);
        let d = DataClass {
            n: 0.1,
            x0: 0.03,
            y0: 0.09,
            xi0: 0.0,
            lambda: 1.0,
        };
        let p = predict_times(&d, 0.004, 0.5).unwrap();
        assert!((p.t0 - 5.0).abs() < 1e-12);
        assert!(p.eps <= 0.25);
        assert!((p.n1 - (0.03f64.powi(2) + 0.5 * 0.09f64.powi(2)).sqrt()).abs() < 1e-15);
        let d = DataClass {
            x0: 0.1,
            y0: 0.1,
            ..d
        };
        let p = predict_times(&d, 0.004, 0.5).unwrap();
        assert_eq!(p.t1_bound, p.t0);

        let bad = DataClass {
            n: 0.05,
            x0: 0.015,
            y0: 0.01,
            xi0: 0.0,
            lambda: 1.0,
        };
        assert!(matches!(
            predict_times(&bad, 0.004, 0.5),
            Err(Error::Predicate(_))
        ));
        let bad = DataClass {
            n: 0.05,
            x0: 0.015,
            y0: 0.045,
            xi0: 1.0,
            lambda: 1.0,
        };
        assert!(matches!(
            predict_times(&bad, 0.004, 0.5),
            Err(Error::Predicate(_))
        ));
    }

    #[test]
    fn self_consistent_residuals() {
        let c = synthetic(3.0);
        let tr = integrate_nf(C64::new(0.05, 0.02), C64::new(0.4, 0.3), &c, 20.0, 0.005).unwrap();
        let r = measure_nf_residuals(&tr, &c, 0.0).unwrap();
        assert!(r.sup_gv() < 1e-6 && r.sup_gu_rel() < 1e-6);
        assert!(r.sup_u_dev_rel() < 1e-13);
        let short = ReducedTrajectory {
            t: tr.t[..4].to_vec(),
            u: tr.u[..4].to_vec(),
            v: tr.v[..4].to_vec(),
        };
        assert!(matches!(
            measure_nf_residuals(&short, &c, 0.0),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            measure_nf_residuals(&tr, &c, 15.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn smoothing_removes_fast_oscillation() {
        let c = synthetic(3.0);
        let tr = integrate_nf(C64::new(0.05, 0.02), C64::new(0.4, 0.3), &c, 40.0, 0.005).unwrap();
        let mut noisy = tr.clone();
        for (t, u) in noisy.t.iter().zip(noisy.u.iter_mut()) {
            *u += 1e-3 * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * t);
        }
        let raw = measure_nf_residuals(&noisy, &c, 0.0).unwrap();
        let sm = measure_nf_residuals(&noisy, &c, 4.0).unwrap();
        assert!(raw.sup_gu_rel() > 0.05);
        assert!(sm.sup_gu_rel() < 0.05 * raw.sup_gu_rel());
        assert!(sm.sup_u_dev_rel() > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fg_conserves_and_is_monotone(f0 in 0.0f64..1.0, g0 in 0.01f64..1.0, gam in 0.01f64..5.0, t in 0.1f64..50.0) {
            let tr = integrate_fg(f0, g0, gam, t, None).unwrap();
            let s = f0 + g0;
            for i in 0..tr.t.len() {
                prop_assert!(((tr.f[i] + tr.g[i]) - s).abs() <= 1e-10 * s);
                prop_assert!(tr.f[i] >= 0.0 && tr.g[i] >= 0.0);
            }
            prop_assert!(tr.f.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(tr.g.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn structure_holds_for_any_override(v in proptest::array::uniform6(-5.0f64..5.0), gam in 0.0f64..0.1, lam in -3.0f64..3.0) {
            let s = spectral_small();
            let pert = Perturbation { q3: s.phi1().clone(), e12: 0.3 };
            let o = ImaginaryOverrides { c3: Some(v[0]), c4: Some(v[1]), c5: Some(v[2]), c8: Some(v[3]), c9: Some(v[4]), c10: Some(v[5]) };
            let c = compute_coefficients(&s, &pert, gam, lam, &o).unwrap();
            prop_assert!(c.check_structure().is_ok());
        }
    }

    fn spectral_small() -> SpectralData {
        use std::sync::OnceLock;
        static S: OnceLock<SpectralData> = OnceLock::new();
        S.get_or_init(|| {
            let g = SpatialGrid::one_d(128, 20.0).unwrap();
            solve_eigenpairs(
                &Potential::sample(
                    PotentialKind::Gaussian {
                        depth: 8.0,
                        width: 1.0,
                    },
                    g,
                )
                .unwrap(),
                2,
            )
            .unwrap()
        })
        .clone()
    }
}
