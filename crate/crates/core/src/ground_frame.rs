//! Linearization about the ground family, its spectral split and the
//! ground-state frame used to measure relaxation.
//!
//! Writing `h = a + i b`, the linearized operator
//! `𝓛h = -i{(H0 - E + 2λQ²)h + λQ²h̄}` acts as `(a, b) ↦ (L₋b, -L₊a)` with
//! `L₋ = H0 - E + λQ²` and `L₊ = H0 - E + 3λQ²`. Both the generalized kernel
//! `span{iQ, R}` and the discrete pair are described by eigenvectors of `L₋L₊`
//! and its adjoint `L₊L₋`, which give the oblique projectors in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bound_states::GroundFamily;
use crate::error::{Error, Result};
use crate::field::{ComplexField, C64, ZERO};
use crate::fit;
use crate::grid::SpatialGrid;
use crate::spectral::{Hamiltonian, Potential, SpectralData};

/// Tolerance on the two frame conditions.
pub const FRAME_TOL: f64 = 1e-9;
const FRAME_MAX_ITER: usize = 60;

#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    energy: f64,
    lambda: f64,
    q: ComplexField,
    r: ComplexField,
    potential: Potential,
    h: Hamiltonian,
}

impl LinearizedOperator {
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn q(&self) -> &ComplexField {
        &self.q
    }

    pub fn r(&self) -> &ComplexField {
        &self.r
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.q.grid()
    }

    /// `L₊ f` (`plus`) or `L₋ f` on a real-valued field.
    fn l_pm(&self, f: &[f64], plus: bool) -> Vec<f64> {
        let x: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
        let mut y = vec![ZERO; x.len()];
        self.h.apply(&x, &mut y);
        let k = if plus { 3.0 } else { 1.0 } * self.lambda;
        y.iter()
            .zip(f)
            .zip(self.q.values())
            .map(|((y, f), q)| y.re - self.energy * f + k * q.re * q.re * f)
            .collect()
    }

    /// Matrix-free `𝓛h`.
    pub fn apply(&self, h: &ComplexField) -> Result<ComplexField> {
        if h.grid() != self.grid() {
            return Err(Error::GridMismatch);
        }
        let a: Vec<f64> = h.real_part();
        let b: Vec<f64> = h.imag_part();
        let lb = self.l_pm(&b, false);
        let la = self.l_pm(&a, true);
        let v = lb
            .iter()
            .zip(&la)
            .map(|(re, im)| C64::new(*re, -im))
            .collect();
        ComplexField::new(*self.grid(), v)
    }

    /// Dense `L₋`, `L₊` on a centred window with `m` points per axis.
    fn dense_parts(&self, window: &SpatialGrid) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let pot = Potential::sample(self.potential.kind(), *window)?;
        let h = pot.hamiltonian().dense()?;
        let q = self.q.restrict(window)?;
        let m = window.len();
        let mut lm = h.clone();
        let mut lp = h;
        for i in 0..m {
            let q2 = q.values()[i].re.powi(2);
            lm[(i, i)] += -self.energy + self.lambda * q2;
            lp[(i, i)] += -self.energy + 3.0 * self.lambda * q2;
        }
        Ok((lm, lp))
    }

    /// The real `2M × 2M` matrix `[[0, L₋], [-L₊, 0]]` acting on `(Re h, Im h)`
    /// restricted to `window`.
    pub fn assemble(&self, window: &SpatialGrid) -> Result<DMatrix<f64>> {
        let (lm, lp) = self.dense_parts(window)?;
        let m = window.len();
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        a.view_mut((0, m), (m, m)).copy_from(&lm);
        a.view_mut((m, 0), (m, m)).copy_from(&(-lp));
        Ok(a)
    }
}

/// `𝓛` about `Q_E` with `R_E = ∂_E Q_E`. For `Q = 0` pass `R = φ0`, which turns
/// the kernel projector into the orthogonal projector onto `span{φ0, iφ0}`.
pub fn build_linearized(
    s: &SpectralData,
    q: &ComplexField,
    r: &ComplexField,
    energy: f64,
    lambda: f64,
) -> Result<LinearizedOperator> {
    if q.grid() != s.grid() || r.grid() != s.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(LinearizedOperator {
        energy,
        lambda,
        q: q.clone(),
        r: r.clone(),
        potential: s.potential().clone(),
        h: s.hamiltonian(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Points per axis of the centred window used for the dense eigenproblem.
    pub window_points: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { window_points: 256 }
    }
}

/// Oblique projectors onto `S = span{iQ, R}`, the discrete pair subspace `E₁`
/// and the continuous subspace `H_c` (the complement).
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    /// Kernel directions: `S = span{(r, 0), (0, q)}`.
    q: ComplexField,
    r: ComplexField,
    /// `E₁ = span{(A, 0), (0, B)}` with `L₋L₊A = ω²A`, `B = L₊A/ω`.
    a: ComplexField,
    b: ComplexField,
    omega: f64,
}

fn re_inner(f: &ComplexField, g: &[f64]) -> f64 {
    f.values().iter().zip(g).map(|(f, g)| f.re * g).sum::<f64>() * f.grid().cell_volume()
}

impl SpectralSplit {
    /// Frequency `ω` of the discrete pair `±iω`.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn e1_basis(&self) -> (&ComplexField, &ComplexField) {
        (&self.a, &self.b)
    }

    /// Coefficients `(α, β)` of `P_S h = α R + β iQ`.
    pub fn s_coefficients(&self, h: &ComplexField) -> (f64, f64) {
        let (a, b) = (h.real_part(), h.imag_part());
        let qr = re_inner(&self.q, &self.r.real_part());
        (re_inner(&self.q, &a) / qr, re_inner(&self.r, &b) / qr)
    }

    /// Coefficients `(α, β)` of `P_{E₁} h = α A + β iB`.
    pub fn e1_coefficients(&self, h: &ComplexField) -> (f64, f64) {
        let (a, b) = (h.real_part(), h.imag_part());
        let ab = re_inner(&self.a, &self.b.real_part());
        (re_inner(&self.b, &a) / ab, re_inner(&self.a, &b) / ab)
    }

    pub fn project_s(&self, h: &ComplexField) -> ComplexField {
        let (al, be) = self.s_coefficients(h);
        let mut out = self.r.scale_real(al);
        out.axpy(C64::new(0.0, be), &self.q).expect("same grid");
        out
    }

    pub fn project_e1(&self, h: &ComplexField) -> ComplexField {
        let (al, be) = self.e1_coefficients(h);
        let mut out = self.a.scale_real(al);
        out.axpy(C64::new(0.0, be), &self.b).expect("same grid");
        out
    }

    pub fn project_c(&self, h: &ComplexField) -> ComplexField {
        h.sub(&self.project_s(h))
            .and_then(|d| d.sub(&self.project_e1(h)))
            .expect("same grid")
    }
}

/// Builds the projectors. The pair `±iω` is found from the symmetric matrix
/// `L₋^{1/2} L₊ L₋^{1/2}` on the window, whose nonzero spectrum is that of `L₋L₊`;
/// exactly one eigenvalue must lie strictly between `0` and the continuum edge `E²`.
pub fn spectral_split(op: &LinearizedOperator, opts: SplitOptions) -> Result<SpectralSplit> {
    let g = *op.grid();
    let m = opts.window_points.min(g.n());
    if !(g.n() - m).is_multiple_of(2) || m < 8 {
        return Err(Error::InvalidArgument(format!(
            "window of {m} points does not centre in {}",
            g.n()
        )));
    }
    let window = SpatialGrid::new(g.dim(), m, 0.5 * m as f64 * g.spacing())?;
    let (lm, lp) = op.dense_parts(&window)?;
    let eig = SymmetricEigen::new(lm);
    let root = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()),
    );
    let u = eig.eigenvectors;
    let ud = &u * DMatrix::from_diagonal(&root);
    let mut sym = ud.transpose() * &lp * &ud;
    let st = sym.transpose();
    sym = (sym + st) * 0.5;
    let se = SymmetricEigen::new(sym);

    let e2 = op.energy * op.energy;
    let edge = 0.95 * e2;
    let floor = 1e-8 * e2.max(1e-12);
    let found: Vec<usize> = (0..se.eigenvalues.len())
        .filter(|&i| se.eigenvalues[i] > floor && se.eigenvalues[i] < edge)
        .collect();
    if found.len() != 1 {
        let vals: Vec<f64> = found.iter().map(|&i| se.eigenvalues[i].sqrt()).collect();
        return Err(Error::Spectrum(format!(
            "expected one discrete pair of the linearized operator below the continuum, found {} (ω = {vals:?})",
            found.len()
        )));
    }
    let k = found[0];
    let omega = se.eigenvalues[k].sqrt();
    let av = &ud * se.eigenvectors.column(k);
    let mut a = ComplexField::from_real(window, av.as_slice())?.embed(&g)?;
    let nrm = a.norm_l2();
    a = a.scale_real(1.0 / nrm);
    if re_inner(&a, &op.q.real_part()).abs() > 1e-6
        || a.values().iter().map(|z| z.re).sum::<f64>() < 0.0
    {
        a = a.scale_real(-1.0);
    }
    let bv: Vec<f64> = op
        .l_pm(&a.real_part(), true)
        .iter()
        .map(|v| v / omega)
        .collect();
    let b = ComplexField::from_real(g, &bv)?;
    let q = if op.q.norm_l2() == 0.0 {
        op.r.clone()
    } else {
        op.q.clone()
    };
    Ok(SpectralSplit {
        q,
        r: op.r.clone(),
        a,
        b,
        omega,
    })
}

/// `ψ = [Q_E + ζ + η] e^{iΘ}` with the kernel coefficients of `ψe^{-iΘ} - Q_E` removed.
#[derive(Debug, Clone)]
pub struct GroundFrameState {
    pub t: f64,
    pub energy: f64,
    pub theta: f64,
    /// Remaining `R_E` coefficient (zero up to [`FRAME_TOL`]).
    pub a: f64,
    /// Remaining `iQ_E` coefficient.
    pub b: f64,
    pub zeta: ComplexField,
    pub eta: ComplexField,
    pub q: ComplexField,
    pub omega: f64,
    pub iterations: usize,
}

impl GroundFrameState {
    pub fn reconstruct(&self) -> ComplexField {
        let h = self.zeta.add(&self.eta).expect("same grid");
        self.q
            .add(&h)
            .expect("same grid")
            .scale(C64::from_polar(1.0, self.theta))
    }

    /// `‖ψ - Q_E e^{iΘ}‖_{L²_loc}`.
    pub fn distance_loc(&self) -> f64 {
        self.zeta.add(&self.eta).expect("same grid").norm_loc()
    }

    pub fn sample(&self) -> GroundSample {
        GroundSample {
            t: self.t,
            energy: self.energy,
            theta: self.theta,
            distance: self.distance_loc(),
        }
    }
}

fn frame_conditions(
    psi: &ComplexField,
    q: &ComplexField,
    r: &ComplexField,
    theta: f64,
) -> (f64, f64, ComplexField) {
    let h = psi
        .scale(C64::from_polar(1.0, -theta))
        .sub(q)
        .expect("same grid");
    let qr = q.inner_real(r).expect("same grid");
    let a = re_inner(q, &h.real_part()) / qr;
    let b = re_inner(r, &h.imag_part()) / qr;
    (a, b, h)
}

/// Newton on `(E, Θ)` so that `ψe^{-iΘ} - Q_E` has no component along `R_E` or `iQ_E`.
pub fn decompose_ground_frame(
    psi: &ComplexField,
    t: f64,
    s: &SpectralData,
    fam: &GroundFamily,
    energy_guess: f64,
    opts: SplitOptions,
) -> Result<GroundFrameState> {
    if psi.grid() != s.grid() {
        return Err(Error::GridMismatch);
    }
    let mut e = energy_guess;
    let (q, _) = fam.interpolate(e)?;
    let mut theta = q.inner(psi)?.arg();
    let (lo, hi) = fam.energy_range();
    let mut last = (f64::NAN, f64::NAN);
    for it in 0..FRAME_MAX_ITER {
        let (q, r) = fam.interpolate(e)?;
        let (a, b, _) = frame_conditions(psi, &q, &r, theta);
        last = (a, b);
        if a.abs() <= FRAME_TOL && b.abs() <= FRAME_TOL {
            return finish_frame(psi, t, s, fam, e, theta, it, opts);
        }
        let de = 1e-6 * (hi - lo).max(1e-9);
        let ep = if e + de <= hi { e + de } else { e - de };
        let (qp, rp) = fam.interpolate(ep)?;
        let (ap, bp, _) = frame_conditions(psi, &qp, &rp, theta);
        let dth = 1e-6;
        let (at, bt, _) = frame_conditions(psi, &q, &r, theta + dth);
        let j = [
            [(ap - a) / (ep - e), (at - a) / dth],
            [(bp - b) / (ep - e), (bt - b) / dth],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det.abs() > 0.0) || !det.is_finite() {
            break;
        }
        let d_e = (a * j[1][1] - b * j[0][1]) / det;
        let d_t = (j[0][0] * b - j[1][0] * a) / det;
        e = (e - d_e).clamp(lo, hi);
        theta -= d_t;
    }
    Err(Error::NotConverged {
        what: "ground-frame Newton",
        iterations: FRAME_MAX_ITER,
        residual: last.0.abs().max(last.1.abs()),
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_frame(
    psi: &ComplexField,
    t: f64,
    s: &SpectralData,
    fam: &GroundFamily,
    e: f64,
    theta: f64,
    iterations: usize,
    opts: SplitOptions,
) -> Result<GroundFrameState> {
    let (q, r) = fam.interpolate(e)?;
    let (a, b, h) = frame_conditions(psi, &q, &r, theta);
    let op = build_linearized(s, &q, &r, e, fam.lambda())?;
    let split = spectral_split(&op, opts)?;
    let zeta = split.project_e1(&h);
    let eta = h.sub(&zeta)?;
    Ok(GroundFrameState {
        t,
        energy: e,
        theta: theta.rem_euclid(std::f64::consts::TAU),
        a,
        b,
        zeta,
        eta,
        q,
        omega: split.omega(),
        iterations,
    })
}

/// One ground-frame measurement along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundSample {
    pub t: f64,
    pub energy: f64,
    pub theta: f64,
    pub distance: f64,
}

/// `Θ(t) + E∞ t ≈ c0 + c1 t + c2 log t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaModel {
    pub intercept: f64,
    pub linear: f64,
    pub log: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationFit {
    pub e_inf: f64,
    /// `d(t) ≈ prefactor · (1 + t)^exponent`.
    pub prefactor: f64,
    pub exponent: f64,
    /// Two-standard-error interval for the exponent.
    pub exponent_ci: [f64; 2],
    pub theta_model: ThetaModel,
    pub window: [f64; 2],
    pub points: usize,
}

/// Unwraps `Θ`, taking at each step the branch closest to `-E Δt`.
pub fn unwrap_theta(samples: &[GroundSample]) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if i == 0 {
            out.push(s.theta);
            continue;
        }
        let p = &samples[i - 1];
        let pred = out[i - 1] - 0.5 * (p.energy + s.energy) * (s.t - p.t);
        let k = ((pred - s.theta) / tau).round();
        out.push(s.theta + k * tau);
    }
    out
}

/// Densely sampled, unwrapped phase `Θ(t)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrack {
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
}

impl PhaseTrack {
    /// Appends a phase known modulo `2π`, on the branch closest to the
    /// previous value advanced by `-energy Δt`.
    pub fn push_wrapped(&mut self, t: f64, theta: f64, energy: f64) {
        let v = match (self.t.last(), self.theta.last()) {
            (Some(&tp), Some(&thp)) => {
                let pred = thp - energy * (t - tp);
                theta + ((pred - theta) / std::f64::consts::TAU).round() * std::f64::consts::TAU
            }
            _ => theta,
        };
        self.t.push(t);
        self.theta.push(v);
    }
}

/// Power-law fit of the frame distance and the drift model of `Θ` over `window`.
/// `E∞` is the frame energy at the last sample in the window. `Θ` comes from
/// `phase` when given, otherwise from the unwrapped frame samples, which must
/// then be dense enough to resolve `E Δt` modulo `2π`.
pub fn fit_relaxation(
    samples: &[GroundSample],
    phase: Option<&PhaseTrack>,
    window: [f64; 2],
) -> Result<RelaxationFit> {
    let [ta, tb] = window;
    if !(ta > 0.0 && tb >= 10.0 * ta) {
        return Err(Error::InsufficientData(format!(
            "window [{ta}, {tb}] spans less than one decade"
        )));
    }
    let sel: Vec<GroundSample> = samples
        .iter()
        .copied()
        .filter(|s| s.t >= ta && s.t <= tb)
        .collect();
    if sel.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} samples in the window",
            sel.len()
        )));
    }
    let first = sel[0].t;
    let last = sel[sel.len() - 1].t;
    if last < 10.0 * first * (1.0 - 1e-9) {
        return Err(Error::InsufficientData(format!(
            "samples span [{first}, {last}], less than one decade"
        )));
    }
    let lt: Vec<f64> = sel.iter().map(|s| (1.0 + s.t).ln()).collect();
    let ld: Vec<f64> = sel.iter().map(|s| s.distance.ln()).collect();
    if ld.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("distance must be positive".into()));
    }
    let pl = fit::linear(&lt, &ld)?;
    let e_inf = sel[sel.len() - 1].energy;
    let (ts, th) = match phase {
        Some(p) => {
            let idx: Vec<usize> = (0..p.t.len())
                .filter(|&i| p.t[i] >= ta && p.t[i] <= tb)
                .collect();
            if idx.len() < 4 {
                return Err(Error::InsufficientData(format!(
                    "{} phase samples in the window",
                    idx.len()
                )));
            }
            (
                idx.iter().map(|&i| p.t[i]).collect(),
                idx.iter().map(|&i| p.theta[i]).collect(),
            )
        }
        None => (
            sel.iter().map(|s| s.t).collect::<Vec<f64>>(),
            unwrap_theta(&sel),
        ),
    };
    let resid: Vec<f64> = th.iter().zip(&ts).map(|(th, t)| th + e_inf * t).collect();
    let c = fit::basis(&ts, &resid, &[&|_| 1.0, &|t| t, &|t: f64| t.ln()])?;
    Ok(RelaxationFit {
        e_inf,
        prefactor: pl.intercept.exp(),
        exponent: pl.slope,
        exponent_ci: [
            pl.slope - 2.0 * pl.slope_stderr,
            pl.slope + 2.0 * pl.slope_stderr,
        ],
        theta_model: ThetaModel {
            intercept: c[0],
            linear: c[1],
            log: c[2],
        },
        window,
        points: sel.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{solve_eigenpairs, PotentialKind};
    use rand::{Rng, SeedableRng};
    use std::sync::OnceLock;

    const LAMBDA: f64 = 1.0;

    fn setup() -> &'static (SpectralData, GroundFamily) {
        static S: OnceLock<(SpectralData, GroundFamily)> = OnceLock::new();
        S.get_or_init(|| {
            let g = SpatialGrid::one_d(256, 24.0).unwrap();
            let v = Potential::sample(
                PotentialKind::Gaussian {
                    depth: 8.0,
                    width: 1.0,
                },
                g,
            )
            .unwrap();
            let s = solve_eigenpairs(&v, 2).unwrap();
            let fam = GroundFamily::build(&s, LAMBDA, 0.6, 0.05).unwrap();
            (s, fam)
        })
    }

    fn random_field(g: SpatialGrid, seed: u64) -> ComplexField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = (0..g.len())
            .map(|i| {
                let x = g.position(i)[0];
                C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * (-x * x / 8.0).exp()
            })
            .collect();
        ComplexField::new(g, v).unwrap()
    }

    fn operator_at(e: f64) -> LinearizedOperator {
        let (s, fam) = setup();
        let (q, r) = fam.interpolate(e).unwrap();
        build_linearized(s, &q, &r, e, LAMBDA).unwrap()
    }

    fn mid_energy() -> f64 {
        let (_, fam) = setup();
        let (lo, hi) = fam.energy_range();
        lo + 0.5 * (hi - lo)
    }

    #[test]
    fn gauge_zero_mode_and_generalized_kernel() {
        let (s, fam) = setup();
        let e = mid_energy();
        let st = fam.solve_at(s, e).unwrap();
        let op = build_linearized(s, &st.q, &st.r, e, LAMBDA).unwrap();
        let iq = st.q.scale(C64::new(0.0, 1.0));
        assert!(op.apply(&iq).unwrap().norm_l2() < 1e-8 * st.q.norm_l2());
        let lr = op.apply(&st.r).unwrap();
        let target = st.q.scale(C64::new(0.0, -1.0));
        assert!(lr.sub(&target).unwrap().norm_l2() < 1e-7 * st.q.norm_l2());
    }

    #[test]
    fn dense_matches_matrix_free() {
        let op = operator_at(mid_energy());
        let g = *op.grid();
        let mat = op.assemble(&g).unwrap();
        let h = random_field(g, 3);
        let m = g.len();
        let mut x = DVector::zeros(2 * m);
        for i in 0..m {
            x[i] = h.values()[i].re;
            x[m + i] = h.values()[i].im;
        }
        let y = &mat * x;
        let z = op.apply(&h).unwrap();
        let err = (0..m)
            .map(|i| {
                (y[i] - z.values()[i].re)
                    .abs()
                    .max((y[m + i] - z.values()[i].im).abs())
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-10 * mat.norm(), "{err}");
    }

    #[test]
    fn zero_amplitude_split_is_orthogonal() {
        let (s, _) = setup();
        let z = ComplexField::zeros(*s.grid());
        let op = build_linearized(s, &z, s.phi0(), s.e0(), LAMBDA).unwrap();
        let sp = spectral_split(&op, SplitOptions::default()).unwrap();
        assert!((sp.omega() - (s.e1() - s.e0())).abs() < 1e-8);
        let h = random_field(*s.grid(), 5);
        let ps = sp.project_s(&h);
        let c0 = s.phi0().inner(&h).unwrap();
        let want = s.phi0().scale(c0);
        assert!(ps.sub(&want).unwrap().norm_l2() < 1e-10);
        let pe = sp.project_e1(&h);
        let c1 = s.phi1().inner(&h).unwrap();
        assert!(pe.sub(&s.phi1().scale(c1)).unwrap().norm_l2() < 1e-8);
    }

    #[test]
    fn projectors_complete_and_invariant() {
        let op = operator_at(mid_energy());
        let sp = spectral_split(&op, SplitOptions::default()).unwrap();
        let h = random_field(*op.grid(), 9);
        let sum = sp
            .project_s(&h)
            .add(&sp.project_e1(&h))
            .unwrap()
            .add(&sp.project_c(&h))
            .unwrap();
        assert!(sum.sub(&h).unwrap().norm_l2() < 1e-7 * h.norm_l2());
        for zeta in [sp.a.clone(), sp.b.scale(C64::new(0.0, 1.0))] {
            let lz = op.apply(&zeta).unwrap();
            assert!(sp.project_c(&lz).norm_l2() <= 1e-6 * lz.norm_l2());
            assert!(sp.project_s(&lz).norm_l2() <= 1e-6 * lz.norm_l2());
        }
        let pe = sp.project_e1(&h);
        assert!(sp.project_e1(&pe).sub(&pe).unwrap().norm_l2() < 1e-10 * pe.norm_l2().max(1e-30));
        let (s, _) = setup();
        assert!((sp.omega() - (s.e1() - op.energy())).abs() < 0.2 * (s.e1() - s.e0()));
    }

    #[test]
    fn dense_pair_matches_split() {
        let op = operator_at(mid_energy());
        let g = *op.grid();
        let w = SpatialGrid::new(1, 128, 64.0 * g.spacing()).unwrap();
        let ev = op.assemble(&w).unwrap().complex_eigenvalues();
        let sp = spectral_split(&op, SplitOptions { window_points: 128 }).unwrap();
        let near = ev
            .iter()
            .map(|z| (z.im.abs() - sp.omega()).abs() + z.re.abs())
            .fold(f64::INFINITY, f64::min);
        assert!(near < 1e-6, "{near}");
    }

    #[test]
    fn frame_fixed_point_and_gauge() {
        let (s, fam) = setup();
        let e = mid_energy();
        let (q, _) = fam.interpolate(e).unwrap();
        let th = 0.7;
        let psi = q.scale(C64::from_polar(1.0, th));
        let fr =
            decompose_ground_frame(&psi, 0.0, s, fam, e + 0.01, SplitOptions::default()).unwrap();
        assert!((fr.energy - e).abs() < 1e-9 && (fr.theta - th).abs() < 1e-9);
        assert!(fr.zeta.norm_l2() < 1e-8 && fr.eta.norm_l2() < 1e-8);

        let sp = spectral_split(&operator_at(e), SplitOptions::default()).unwrap();
        let zs =
            sp.a.scale_real(0.002)
                .add(&sp.b.scale(C64::new(0.0, -0.001)))
                .unwrap();
        let psi = q.add(&zs).unwrap().scale(C64::from_polar(1.0, th));
        let fr = decompose_ground_frame(&psi, 0.0, s, fam, e, SplitOptions::default()).unwrap();
        assert!((fr.energy - e).abs() < 1e-7 && (fr.theta - th).abs() < 1e-7);
        assert!(fr.zeta.sub(&zs).unwrap().norm_l2() < 1e-7);
        assert!(fr.reconstruct().sub(&psi).unwrap().norm_l2() < 1e-8 * psi.norm_l2());

        let alpha = 1.3;
        let fr2 = decompose_ground_frame(
            &psi.scale(C64::from_polar(1.0, alpha)),
            0.0,
            s,
            fam,
            e,
            SplitOptions::default(),
        )
        .unwrap();
        assert!((fr2.energy - fr.energy).abs() < 1e-9);
        let dth = (fr2.theta - fr.theta - alpha).rem_euclid(std::f64::consts::TAU);
        assert!(dth.min(std::f64::consts::TAU - dth) < 1e-9);
        let rot =
            fr2.zeta.sub(&fr.zeta).unwrap().norm_l2() + fr2.eta.sub(&fr.eta).unwrap().norm_l2();
        assert!(rot < 1e-9);
    }

    #[test]
    fn relaxation_fit_recovers_power_law() {
        let e_inf = -5.2;
        let samples: Vec<GroundSample> = (0..200)
            .map(|i| {
                let t = 100.0 * (1.03f64).powi(i);
                let th = -e_inf * t + 0.3 * t.ln();
                GroundSample {
                    t,
                    energy: e_inf,
                    theta: th.rem_euclid(std::f64::consts::TAU),
                    distance: 0.7 * (1.0 + t).powf(-0.5),
                }
            })
            .collect();
        let f = fit_relaxation(&samples, None, [100.0, 1e4]).unwrap();
        assert!((f.exponent + 0.5).abs() < 0.005 && (f.prefactor - 0.7).abs() < 1e-9);
        assert!(f.theta_model.linear.abs() < 1e-9 && (f.theta_model.log - 0.3).abs() < 1e-6);
        assert!(matches!(
            fit_relaxation(&samples, None, [100.0, 500.0]),
            Err(Error::InsufficientData(_))
        ));

        let mut track = PhaseTrack::default();
        for i in 0..40000 {
            let t = 100.0 + 0.25 * i as f64;
            let th = -e_inf * t - 0.4 * t.ln() + 1.0;
            track.push_wrapped(t, th.rem_euclid(std::f64::consts::TAU), e_inf);
        }
        let f = fit_relaxation(&samples, Some(&track), [100.0, 1e4]).unwrap();
        assert!(f.theta_model.linear.abs() < 1e-9 && (f.theta_model.log + 0.4).abs() < 1e-6);
    }

    #[test]
    fn theta_unwrap_tracks_frequency() {
        let e = -5.3;
        let s: Vec<GroundSample> = (0..500)
            .map(|i| {
                let t = i as f64 * 0.9;
                let th = -e * t + 0.2 * (1.0 + t).ln();
                GroundSample {
                    t,
                    energy: e,
                    theta: th.rem_euclid(std::f64::consts::TAU),
                    distance: 1.0,
                }
            })
            .collect();
        let u = unwrap_theta(&s);
        for (i, v) in u.iter().enumerate() {
            let t = i as f64 * 0.9;
            let want = -e * t + 0.2 * (1.0 + t).ln();
            assert!((v - want - (u[0] - s[0].theta)).abs() < 1e-9);
        }
    }
}
