//! The excited-state frame `ψ = x φ0 + Q1(y) + ξ`, the splitting of the
//! nonlinear source `G`, and the explicit dispersive profile `ξ^(2)`.

use serde::{Deserialize, Serialize};

use crate::bound_states::ExcitedFamily;
use crate::error::{Error, Result};
use crate::field::{ComplexField, C64};
use crate::spectral::{project_continuum, Profiles, SpectralData};

/// Below this `|y|` the phase equation is singular and no probe is taken.
pub const DEGENERATE_M: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FrameState {
    pub t: f64,
    pub x: C64,
    pub y: C64,
    pub xi: ComplexField,
    /// `u = e^{i e0 t} x`.
    pub u: C64,
    /// `v = e^{i e1 t} y`.
    pub v: C64,
}

impl FrameState {
    pub fn m(&self) -> f64 {
        self.y.norm()
    }

    pub fn theta(&self) -> f64 {
        self.y.arg()
    }

    /// `x φ0 + Q1(y) + ξ`.
    pub fn reconstruct(&self, s: &SpectralData, ex: &ExcitedFamily) -> Result<ComplexField> {
        let (q1, _) = ex.eval_q1(self.y)?;
        let mut out = q1.add(&self.xi)?;
        out.axpy(self.x, s.phi0())?;
        Ok(out)
    }
}

/// `y = (φ1, ψ)`, `x = (φ0, ψ) - (φ0, Q1(y))`, `ξ = P_c (ψ - Q1(y))`.
pub fn decompose_excited(
    psi: &ComplexField,
    t: f64,
    s: &SpectralData,
    ex: &ExcitedFamily,
) -> Result<FrameState> {
    let y = s.phi1().inner(psi)?;
    let (q1, _) = ex.eval_q1(y)?;
    let x = s.phi0().inner(psi)? - s.phi0().inner(&q1)?;
    let xi = project_continuum(&psi.sub(&q1)?, s)?;
    Ok(FrameState {
        t,
        x,
        y,
        xi,
        u: x * C64::from_polar(1.0, s.e0() * t),
        v: y * C64::from_polar(1.0, s.e1() * t),
    })
}

#[derive(Debug, Clone)]
pub struct GSplit {
    pub g: ComplexField,
    pub g3: ComplexField,
    pub g5: ComplexField,
    pub g7: ComplexField,
    pub lambda_pi: ComplexField,
    pub mdot: f64,
    pub thetadot: f64,
}

/// Splits `G = λ|ψ|^2 ψ - λ Q1^3 e^{iΘ}` into its cubic, quintic and remainder
/// parts and evaluates the modulation rates.
pub fn compute_g_split(
    fr: &FrameState,
    s: &SpectralData,
    ex: &ExcitedFamily,
    lambda: f64,
) -> Result<GSplit> {
    let m = fr.m();
    if m < DEGENERATE_M {
        return Err(Error::DegenerateFrame(format!(
            "|y| = {m:.3e} is below {DEGENERATE_M:e}"
        )));
    }
    let ph = fr.y / m;
    let (q1, dq1, _) = ex.eval_m(m)?;
    let grid = *fr.xi.grid();
    let (x, y) = (fr.x, fr.y);
    let (xb, yb) = (x.conj(), y.conj());
    let (p0, p1, q3, xi) = (
        s.phi0().values(),
        s.phi1().values(),
        ex.q3().values(),
        fr.xi.values(),
    );
    let n = xi.len();
    let mut g = Vec::with_capacity(n);
    let mut g3 = Vec::with_capacity(n);
    let mut g5 = Vec::with_capacity(n);
    let c3a = lambda * (y * y * xb + 2.0 * y * yb * x);
    let c3b = lambda * (2.0 * x * xb * y + x * x * yb);
    let c3c = lambda * x * xb * x;
    let c5a = lambda * (2.0 * y * y * y * yb * xb + 4.0 * (y * yb) * (y * yb) * x);
    let c5b = lambda * (2.0 * x * xb * y * y * yb + x * x * y * yb * yb);
    for k in 0..n {
        let (a, b, q, z) = (p0[k].re, p1[k].re, q3[k].re, xi[k]);
        let h = x * a + z;
        let psi = q1.values()[k] * ph + h;
        let qm = q1.values()[k].re;
        g.push(lambda * psi.norm_sqr() * psi - lambda * qm * qm * qm * ph);
        g3.push(c3a * a * b * b + c3b * a * a * b + c3c * a * a * a);
        let w = x * a + y * b;
        g5.push(
            c5a * a * b * q
                + c5b * a * a * q
                + lambda * w * w * z.conj()
                + 2.0 * lambda * w.norm_sqr() * z,
        );
    }
    let g7: Vec<C64> = (0..n).map(|k| g[k] - g3[k] - g5[k]).collect();
    let dv = grid.cell_volume();
    let (mut im, mut re) = (0.0, 0.0);
    for k in 0..n {
        let r = g[k] * ph.conj();
        im += p1[k].re * r.im;
        re += p1[k].re * r.re;
    }
    let mdot = im * dv;
    let thetadot = -re * dv / m;
    let lam: Vec<C64> = (0..n)
        .map(|k| (q1.values()[k] * thetadot - C64::i() * mdot * dq1.values()[k]) * ph)
        .collect();
    let lam = ComplexField::from_vec_unchecked(grid, lam);
    let c = s.phi1().inner(&lam)?;
    let mut lambda_pi = lam;
    lambda_pi.axpy(-c, s.phi1())?;
    let f = |v: Vec<C64>| ComplexField::from_vec_unchecked(grid, v);
    Ok(GSplit {
        g: f(g),
        g3: f(g3),
        g5: f(g5),
        g7: f(g7),
        lambda_pi,
        mdot,
        thetadot,
    })
}

/// `ξ^(2) = y^2 x̄ Φ1 + |y|^2 x Φ2 + |x|^2 y Φ3 + x^2 ȳ Φ4 + |x|^2 x Φ5`.
pub fn compute_xi2(x: C64, y: C64, p: &Profiles) -> Result<ComplexField> {
    let (xb, yb) = (x.conj(), y.conj());
    let coeffs = [y * y * xb, y * yb * x, x * xb * y, x * x * yb, x * xb * x];
    let mut out = ComplexField::zeros(*p.phi1.grid());
    for (c, f) in coeffs
        .iter()
        .zip([&p.phi1, &p.phi2, &p.phi3, &p.phi4, &p.phi5])
    {
        out.axpy(*c, f)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monomial {
    /// `y^2 x̄`
    YYXbar,
    /// `|y|^2 x`
    YYbarX,
    /// `|x|^2 y`
    XXbarY,
    /// `x^2 ȳ`
    XXYbar,
    /// `|x|^2 x`
    XXbarX,
}

impl Monomial {
    pub const ALL: [Monomial; 5] = [
        Self::YYXbar,
        Self::YYbarX,
        Self::XXbarY,
        Self::XXYbar,
        Self::XXbarX,
    ];

    /// Phase factor: the monomial oscillates like `e^{i phase t}`.
    pub fn phase(self, e0: f64, e1: f64) -> f64 {
        match self {
            Self::YYXbar => -2.0 * e1 + e0,
            Self::YYbarX => -e0,
            Self::XXbarY => -e1,
            Self::XXYbar => -2.0 * e0 + e1,
            Self::XXbarX => -e0,
        }
    }
}

/// The five cubic monomials of `G3` with their phases. When `e0 < 2 e1` the
/// first is the only negative one; any other outcome is an error.
pub fn phase_factor_table(e0: f64, e1: f64) -> Result<Vec<(Monomial, f64)>> {
    let table: Vec<(Monomial, f64)> = Monomial::ALL
        .iter()
        .map(|&m| (m, m.phase(e0, e1)))
        .collect();
    if e0 < 2.0 * e1 {
        let neg: Vec<Monomial> = table
            .iter()
            .filter(|(_, p)| *p < 0.0)
            .map(|(m, _)| *m)
            .collect();
        if neg != [Monomial::YYXbar] {
            return Err(Error::Spectrum(format!(
                "expected a single negative phase, found {neg:?}"
            )));
        }
    }
    Ok(table)
}

/// One line of the probe stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub t: f64,
    pub re_x: f64,
    pub im_x: f64,
    pub re_y: f64,
    pub im_y: f64,
    #[serde(rename = "xi_L2")]
    pub xi_l2: f64,
    #[serde(rename = "xi_L2loc")]
    pub xi_l2loc: f64,
    #[serde(rename = "xi_L4")]
    pub xi_l4: f64,
    #[serde(rename = "G3_norm")]
    pub g3_norm: Option<f64>,
    #[serde(rename = "G5_norm")]
    pub g5_norm: Option<f64>,
    #[serde(rename = "G7_norm")]
    pub g7_norm: Option<f64>,
    pub mdot: Option<f64>,
    pub thetadot: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    /// `‖ξ - ξ^(2)‖_loc / ‖ξ^(2)‖_loc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi2_rel: Option<f64>,
    /// Phase of `(φ0, ψ)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg_phi0: Option<f64>,
}

impl ProbeRecord {
    pub fn x(&self) -> C64 {
        C64::new(self.re_x, self.im_x)
    }

    pub fn y(&self) -> C64 {
        C64::new(self.re_y, self.im_y)
    }

    pub fn validate(&self) -> Result<()> {
        let req = [
            self.t,
            self.re_x,
            self.im_x,
            self.re_y,
            self.im_y,
            self.xi_l2,
            self.xi_l2loc,
            self.xi_l4,
        ];
        if req.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite probe value at t = {}",
                self.t
            )));
        }
        if self.xi_l2 < 0.0 || self.xi_l2loc < 0.0 || self.xi_l4 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative norm at t = {}",
                self.t
            )));
        }
        Ok(())
    }
}

/// Frame probe at time `t`; the `G` fields are `None` for a degenerate frame.
pub fn probe(
    psi: &ComplexField,
    t: f64,
    s: &SpectralData,
    ex: &ExcitedFamily,
    lambda: f64,
    profiles: Option<&Profiles>,
) -> Result<ProbeRecord> {
    let fr = decompose_excited(psi, t, s, ex)?;
    let split = match compute_g_split(&fr, s, ex, lambda) {
        Ok(g) => Some(g),
        Err(Error::DegenerateFrame(_)) => None,
        Err(e) => return Err(e),
    };
    let xi2_rel = match profiles {
        Some(p) => {
            let xi2 = compute_xi2(fr.x, fr.y, p)?;
            let d = fr.xi.sub(&xi2)?.norm_loc();
            let r = xi2.norm_loc();
            (r > 0.0).then(|| d / r)
        }
        None => None,
    };
    Ok(ProbeRecord {
        t,
        re_x: fr.x.re,
        im_x: fr.x.im,
        re_y: fr.y.re,
        im_y: fr.y.im,
        xi_l2: fr.xi.norm_l2(),
        xi_l2loc: fr.xi.norm_loc(),
        xi_l4: fr.xi.norm_lp(4.0)?,
        g3_norm: split.as_ref().map(|g| g.g3.norm_l2()),
        g5_norm: split.as_ref().map(|g| g.g5.norm_l2()),
        g7_norm: split.as_ref().map(|g| g.g7.norm_l2()),
        mdot: split.as_ref().map(|g| g.mdot),
        thetadot: split.as_ref().map(|g| g.thetadot),
        mass: Some(psi.norm_l2().powi(2)),
        energy: None,
        xi2_rel,
        arg_phi0: Some(s.phi0().inner(psi)?.arg()),
    })
}

pub fn to_ndjson(records: &[ProbeRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses newline-delimited probe records; blank lines are skipped.
pub fn parse_ndjson(text: &str) -> Result<Vec<ProbeRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ProbeRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("probe line {}: {e}", i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}
