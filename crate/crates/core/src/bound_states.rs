//! Nonlinear bound states `(-Δ + V) Q + λ Q^3 = E Q`.
//!
//! The ground family bifurcates from `(e0, φ0)` and is continued in mass
//! `n = ||Q||_2`; the excited family bifurcates from `(e1, φ1)` and is continued in
//! `m = (φ1, Q1)`. Both use Newton's method on the system bordered by the
//! parameter constraint, with GMRES for the linear solves.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{dot, ComplexField, C64, ZERO};
use crate::grid::SpatialGrid;
use crate::linalg::{gmres, norm, KrylovOptions};
use crate::spectral::{resolvent_apply, Hamiltonian, SpectralData};

const NEWTON_MAX: usize = 50;

/// Residual target of the profile equation in `L^2`.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Newton keeps iterating below the tolerance while it still gains this factor.
const NEWTON_GAIN: f64 = 0.3;

fn newton_done(res: f64, prev: f64) -> bool {
    res <= 0.05 * RESIDUAL_TOL && (res <= 1e-15 || res > NEWTON_GAIN * prev)
}

/// `(H0 - E) Q + λ Q^3` for real `Q`.
fn profile_residual(h: &Hamiltonian, q: &[C64], e: f64, lambda: f64) -> Vec<C64> {
    let mut r = vec![ZERO; q.len()];
    h.apply_shifted(q, &mut r, C64::new(e, 0.0));
    for (ri, qi) in r.iter_mut().zip(q) {
        *ri += lambda * qi.re * qi.re * qi.re;
    }
    r
}

struct Linearization<'a> {
    h: &'a Hamiltonian,
    e: f64,
    /// `3 λ Q^2`.
    w: Vec<f64>,
    far: C64,
    /// Unit vector along `Q` and its Rayleigh quotient; `L+` is nearly singular
    /// there at small amplitude, so the preconditioner inverts it exactly.
    soft: Option<(Vec<C64>, f64)>,
}

impl<'a> Linearization<'a> {
    fn new(h: &'a Hamiltonian, q: &[C64], e: f64, lambda: f64) -> Self {
        let vmax = h
            .potential()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut lin = Self {
            h,
            e,
            w: q.iter().map(|z| 3.0 * lambda * z.re * z.re).collect(),
            far: C64::new((vmax - e).max(0.5), 0.0),
            soft: None,
        };
        let qn = norm(q);
        if qn > 0.0 {
            let u: Vec<C64> = q.iter().map(|z| z / qn).collect();
            let mut lu = vec![ZERO; u.len()];
            lin.apply(&u, &mut lu);
            let mu = dot(&u, &lu).re;
            if mu.abs() > 0.0 {
                lin.soft = Some((u, mu));
            }
        }
        lin
    }

    fn precondition(&self, a: &[C64], out: &mut [C64]) {
        match &self.soft {
            None => self.h.apply_free_inverse(a, out, self.far),
            Some((u, mu)) => {
                let ca = dot(u, a);
                let pa: Vec<C64> = a.iter().zip(u).map(|(x, ui)| x - ui * ca).collect();
                self.h.apply_free_inverse(&pa, out, self.far);
                let co = dot(u, out);
                for (o, ui) in out.iter_mut().zip(u) {
                    *o += ui * (ca / *mu - co);
                }
            }
        }
    }

    /// `L+ x = (H0 - E + 3 λ Q^2) x`.
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.h.apply_shifted(x, y, C64::new(self.e, 0.0));
        for ((yi, xi), wi) in y.iter_mut().zip(x).zip(&self.w) {
            *yi += wi * xi;
        }
    }

    /// Relative residual target: `1e-9`, or the roundoff floor `κ·ε` when the
    /// soft direction makes `L+` worse conditioned than that.
    fn tolerance(&self) -> f64 {
        let g = self.h.grid();
        let kmax = std::f64::consts::PI / g.spacing();
        let top =
            g.dim() as f64 * kmax * kmax + self.far.re + self.w.iter().copied().fold(0.0, f64::max);
        let kappa = self
            .soft
            .as_ref()
            .map(|(_, mu)| top / mu.abs())
            .unwrap_or(1.0);
        1e-9f64.max(64.0 * f64::EPSILON * kappa)
    }

    fn solve(&self, rhs: &[C64]) -> Result<Vec<C64>> {
        let opts = KrylovOptions {
            tol: self.tolerance(),
            max_iter: 4000,
            restart: 100,
        };
        let pre = |a: &[C64], b: &mut [C64]| self.precondition(a, b);
        Ok(gmres(
            |a, b| self.apply(a, b),
            pre,
            rhs,
            None,
            opts,
            "linearized profile solve",
        )?
        .0)
    }

    /// Solves `L+ dq - de * q = r`, `(b, dq) = rho`.
    fn solve_bordered(&self, q: &[C64], b: &[C64], r: &[C64], rho: f64) -> Result<(Vec<C64>, f64)> {
        let m = q.len();
        let op = |a: &[C64], out: &mut [C64]| {
            self.apply(&a[..m], &mut out[..m]);
            let de = a[m];
            for (o, qi) in out[..m].iter_mut().zip(q) {
                *o -= de * qi;
            }
            out[m] = dot(b, &a[..m]);
        };
        let pre = |a: &[C64], out: &mut [C64]| {
            self.precondition(&a[..m], &mut out[..m]);
            out[m] = a[m];
        };
        let mut rhs = r.to_vec();
        rhs.push(C64::new(rho, 0.0));
        let opts = KrylovOptions {
            tol: 1e-9,
            max_iter: 4000,
            restart: 100,
        };
        let (sol, _) = gmres(op, pre, &rhs, None, opts, "bordered Newton solve")?;
        let de = sol[m].re;
        let dq = sol[..m].iter().map(|z| C64::new(z.re, 0.0)).collect();
        Ok((dq, de))
    }
}

fn field_norm(grid: &SpatialGrid, v: &[C64]) -> f64 {
    norm(v) * grid.cell_volume().sqrt()
}

/// One nonlinear ground state with its `E`-derivative.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub q: ComplexField,
    /// `R_E = ∂_E Q_E`; zero at the branch point, where it is undefined.
    pub r: ComplexField,
    pub mass: f64,
    pub residual: f64,
}

impl GroundState {
    /// `(Q, R)^{-1}`.
    pub fn c1(&self) -> f64 {
        1.0 / self.q.inner(&self.r).map(|z| z.re).unwrap_or(f64::NAN)
    }
}

/// Newton's method at fixed `E`, starting from `warm` or from `n φ0` with the
/// leading-order mass.
pub fn solve_ground(
    s: &SpectralData,
    lambda: f64,
    energy: f64,
    warm: Option<&ComplexField>,
) -> Result<GroundState> {
    let grid = *s.grid();
    let e0 = s.e0();
    if energy == e0 || lambda == 0.0 {
        if energy != e0 {
            return Err(Error::InvalidArgument("λ = 0 admits only E = e0".into()));
        }
        return Ok(GroundState {
            energy,
            q: ComplexField::zeros(grid),
            r: ComplexField::zeros(grid),
            mass: 0.0,
            residual: 0.0,
        });
    }
    if (energy - e0) / lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "λ^-1 (E - e0) must be positive (E = {energy}, e0 = {e0})"
        )));
    }
    let h = s.hamiltonian();
    let mut q: Vec<C64> = match warm {
        Some(w) => {
            if w.grid() != &grid {
                return Err(Error::GridMismatch);
            }
            w.values().iter().map(|z| C64::new(z.re, 0.0)).collect()
        }
        None => {
            let p4: f64 =
                s.phi0().values().iter().map(|z| z.re.powi(4)).sum::<f64>() * grid.cell_volume();
            let n = ((energy - e0) / lambda / p4).sqrt();
            s.phi0().values().iter().map(|z| z * n).collect()
        }
    };
    let mut res = f64::INFINITY;
    for _ in 0..NEWTON_MAX {
        let r = profile_residual(&h, &q, energy, lambda);
        let prev = res;
        res = field_norm(&grid, &r);
        if newton_done(res, prev) {
            break;
        }
        let lin = Linearization::new(&h, &q, energy, lambda);
        let dq = lin.solve(&r)?;
        for (qi, d) in q.iter_mut().zip(&dq) {
            *qi -= C64::new(d.re, 0.0);
        }
    }
    if !(res <= RESIDUAL_TOL) {
        return Err(Error::NotConverged {
            what: "ground-state Newton",
            iterations: NEWTON_MAX,
            residual: res,
        });
    }
    finish_ground(s, &h, q, energy, lambda, res)
}

fn finish_ground(
    s: &SpectralData,
    h: &Hamiltonian,
    mut q: Vec<C64>,
    energy: f64,
    lambda: f64,
    residual: f64,
) -> Result<GroundState> {
    let grid = *s.grid();
    // Positive branch: the sign of the overlap with φ0.
    if dot(s.phi0().values(), &q).re < 0.0 {
        for z in q.iter_mut() {
            *z = -*z;
        }
    }
    let lin = Linearization::new(h, &q, energy, lambda);
    let r = lin.solve(&q)?;
    let r: Vec<C64> = r.iter().map(|z| C64::new(z.re, 0.0)).collect();
    let mass = field_norm(&grid, &q);
    Ok(GroundState {
        energy,
        q: ComplexField::from_vec_unchecked(grid, q),
        r: ComplexField::from_vec_unchecked(grid, r),
        mass,
        residual,
    })
}

/// Newton's method at fixed mass `n` with `E` as the Lagrange multiplier.
fn solve_ground_at_mass(
    s: &SpectralData,
    h: &Hamiltonian,
    lambda: f64,
    n: f64,
    mut q: Vec<C64>,
    mut e: f64,
) -> Result<GroundState> {
    let grid = *s.grid();
    let dv = grid.cell_volume();
    let mut res = f64::INFINITY;
    for it in 0..NEWTON_MAX {
        let r = profile_residual(h, &q, e, lambda);
        let mass2 = norm(&q).powi(2) * dv;
        let c = (mass2 - n * n) / (2.0 * n);
        let prev = res;
        res = field_norm(&grid, &r);
        if newton_done(res, prev) && c.abs() <= 1e-13 {
            break;
        }
        if it + 1 == NEWTON_MAX {
            break;
        }
        let b: Vec<C64> = q.iter().map(|z| z * (dv / n)).collect();
        let lin = Linearization::new(h, &q, e, lambda);
        let (dq, de) = lin.solve_bordered(&q, &b, &r, c)?;
        for (qi, d) in q.iter_mut().zip(&dq) {
            *qi -= d;
        }
        e -= de;
    }
    if !(res <= RESIDUAL_TOL) {
        return Err(Error::NotConverged {
            what: "ground-family Newton",
            iterations: NEWTON_MAX,
            residual: res,
        });
    }
    finish_ground(s, h, q, e, lambda, res)
}

/// Tabulated ground family `E ↦ (Q_E, R_E)`.
#[derive(Debug, Clone)]
pub struct GroundFamily {
    lambda: f64,
    e0: f64,
    grid: SpatialGrid,
    phi0: Vec<C64>,
    zero: Vec<C64>,
    nodes: Vec<GroundState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundNodeSummary {
    pub mass: f64,
    pub energy: f64,
    pub residual: f64,
    pub c1: f64,
}

impl GroundFamily {
    /// Continues in mass from `dn` to `n_max` in steps of `dn`.
    pub fn build(s: &SpectralData, lambda: f64, n_max: f64, dn: f64) -> Result<Self> {
        if lambda == 0.0 || !(dn > 0.0) || !(n_max >= dn) {
            return Err(Error::InvalidArgument(
                "need λ ≠ 0 and 0 < dn <= n_max".into(),
            ));
        }
        let h = s.hamiltonian();
        let dv = s.grid().cell_volume();
        let p4: f64 = s.phi0().values().iter().map(|z| z.re.powi(4)).sum::<f64>() * dv;
        let count = (n_max / dn + 1e-9).floor() as usize;
        let mut nodes: Vec<GroundState> = Vec::with_capacity(count);
        for i in 1..=count {
            let n = dn * i as f64;
            let (q0, e_guess) = match nodes.len() {
                0 => (
                    s.phi0().values().iter().map(|z| z * n).collect::<Vec<_>>(),
                    s.e0() + lambda * n * n * p4,
                ),
                1 => {
                    let a = &nodes[0];
                    let scale = n / a.mass;
                    (
                        a.q.values().iter().map(|z| z * scale).collect(),
                        s.e0() + (a.energy - s.e0()) * scale * scale,
                    )
                }
                _ => {
                    let (a, b) = (&nodes[nodes.len() - 2], &nodes[nodes.len() - 1]);
                    let t = (n - b.mass) / (b.mass - a.mass);
                    (
                        b.q.values()
                            .iter()
                            .zip(a.q.values())
                            .map(|(qb, qa)| qb + (qb - qa) * t)
                            .collect(),
                        b.energy + (b.energy - a.energy) * t,
                    )
                }
            };
            nodes.push(solve_ground_at_mass(s, &h, lambda, n, q0, e_guess)?);
        }
        Ok(Self {
            lambda,
            e0: s.e0(),
            grid: *s.grid(),
            phi0: s.phi0().values().to_vec(),
            zero: vec![ZERO; s.grid().len()],
            nodes,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn e0(&self) -> f64 {
        self.e0
    }

    pub fn nodes(&self) -> &[GroundState] {
        &self.nodes
    }

    pub fn summary(&self) -> Vec<GroundNodeSummary> {
        self.nodes
            .iter()
            .map(|g| GroundNodeSummary {
                mass: g.mass,
                energy: g.energy,
                residual: g.residual,
                c1: g.c1(),
            })
            .collect()
    }

    /// `(E_min, E_max)` covered by the table, including the branch point.
    pub fn energy_range(&self) -> (f64, f64) {
        let b = self.nodes.last().map(|g| g.energy).unwrap_or(self.e0);
        (self.e0.min(b), self.e0.max(b))
    }

    pub fn mass_max(&self) -> f64 {
        self.nodes.last().map(|g| g.mass).unwrap_or(0.0)
    }

    /// Node `i` as `(n, E, dE/dn, Q, dQ/dn)`; index 0 is the branch point.
    fn node(&self, i: usize) -> (f64, f64, f64, &[C64], Vec<C64>) {
        if i == 0 {
            return (0.0, self.e0, 0.0, &self.zero, self.phi0.clone());
        }
        let g = &self.nodes[i - 1];
        let dedn = g.mass * g.c1();
        let dq = g.r.values().iter().map(|r| r * dedn).collect();
        (g.mass, g.energy, dedn, g.q.values(), dq)
    }

    /// Hermite interpolation in mass: `(Q, dQ/dn, E, dE/dn)`.
    fn at_mass(&self, n: f64) -> Result<(Vec<C64>, Vec<C64>, f64, f64)> {
        let nmax = self.mass_max();
        if !(n >= 0.0 && n <= nmax) || self.nodes.is_empty() {
            return Err(Error::OutOfRange {
                value: n,
                min: 0.0,
                max: nmax,
            });
        }
        let i = (0..self.nodes.len())
            .find(|&i| n <= self.nodes[i].mass)
            .unwrap_or(self.nodes.len() - 1);
        let (na, ea, sa, qa, dqa) = self.node(i);
        let (nb, eb, sb, qb, dqb) = self.node(i + 1);
        let h = nb - na;
        let t = (n - na) / h;
        let (h00, h10, h01, h11) = hermite(t);
        let (d00, d10, d01, d11) = hermite_slope(t, h);
        let q = (0..qa.len())
            .map(|k| qa[k] * h00 + dqa[k] * (h10 * h) + qb[k] * h01 + dqb[k] * (h11 * h))
            .collect();
        let dq = (0..qa.len())
            .map(|k| qa[k] * d00 + dqa[k] * d10 + qb[k] * d01 + dqb[k] * d11)
            .collect();
        let e = ea * h00 + sa * h10 * h + eb * h01 + sb * h11 * h;
        let de = ea * d00 + sa * d10 + eb * d01 + sb * d11;
        Ok((q, dq, e, de))
    }

    /// Mass on the ground branch with frequency `energy`.
    pub fn mass_of(&self, energy: f64) -> Result<f64> {
        let (lo, hi) = self.energy_range();
        if !(energy >= lo && energy <= hi) {
            return Err(Error::OutOfRange {
                value: energy,
                min: lo,
                max: hi,
            });
        }
        let sign = (self.lambda).signum();
        let (mut a, mut b) = (0.0, self.mass_max());
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let (_, _, e, _) = self.at_mass(mid)?;
            if sign * (e - energy) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-15 * self.mass_max() {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Interpolated `(Q_E, R_E)`: cubic Hermite in mass, with `R = (dQ/dn)/(dE/dn)`.
    pub fn interpolate(&self, energy: f64) -> Result<(ComplexField, ComplexField)> {
        let n = self.mass_of(energy)?;
        let (q, dq, _, de) = self.at_mass(n)?;
        let g = *self.phi0_grid();
        let r = if de != 0.0 {
            dq.iter().map(|z| z / de).collect()
        } else {
            vec![ZERO; q.len()]
        };
        Ok((
            ComplexField::from_vec_unchecked(g, q),
            ComplexField::from_vec_unchecked(g, r),
        ))
    }

    /// Interpolated `(Q, E)` at mass `n`.
    pub fn interpolate_mass(&self, n: f64) -> Result<(ComplexField, f64)> {
        let (q, _, e, _) = self.at_mass(n)?;
        Ok((ComplexField::from_vec_unchecked(*self.phi0_grid(), q), e))
    }

    fn phi0_grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Exact `(Q_E, R_E)` by Newton from the interpolant.
    pub fn solve_at(&self, s: &SpectralData, energy: f64) -> Result<GroundState> {
        let (q, _) = self.interpolate(energy)?;
        solve_ground(s, self.lambda, energy, Some(&q))
    }
}

/// Derivatives of the Hermite basis with respect to the physical variable.
fn hermite_slope(t: f64, h: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    (
        (6.0 * t2 - 6.0 * t) / h,
        3.0 * t2 - 4.0 * t + 1.0,
        (-6.0 * t2 + 6.0 * t) / h,
        3.0 * t2 - 2.0 * t,
    )
}

fn hermite(t: f64) -> (f64, f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    )
}

/// First corrections of the excited family: `q3` and `E_{1,2}`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    /// `q3 = -λ (H0 - e1)^{-1} π φ1^3`.
    pub q3: ComplexField,
    /// `E_{1,2} = λ (φ1, φ1^3)`.
    pub e12: f64,
}

/// `π h = h - (φ1, h) φ1`.
pub fn project_pi(h: &ComplexField, s: &SpectralData) -> Result<ComplexField> {
    let c = s.phi1().inner(h)?;
    let mut out = h.clone();
    out.axpy(-c, s.phi1())?;
    Ok(out)
}

pub fn compute_perturbation(s: &SpectralData, lambda: f64) -> Result<Perturbation> {
    let grid = *s.grid();
    if lambda == 0.0 {
        return Ok(Perturbation {
            q3: ComplexField::zeros(grid),
            e12: 0.0,
        });
    }
    let p1 = s.phi1();
    let p13 = p1.mul(p1)?.mul(p1)?;
    let e1 = s.e1();
    // (H0 - e1)^{-1} π splits into the other discrete modes and the continuum.
    let mut w = resolvent_apply(C64::new(e1, 0.0), &p13, s)?;
    for (j, (phi, &e)) in s.modes().iter().zip(s.energies()).enumerate() {
        if j == 1 {
            continue;
        }
        let c = phi.inner(&p13)?;
        w.axpy(c / (e - e1), phi)?;
    }
    let q3 = w.map(|z| C64::new(-lambda * z.re, 0.0));
    let e12 = lambda * p1.inner(&p13)?.re;
    Ok(Perturbation { q3, e12 })
}

/// One excited bound state with its `m`-derivatives.
#[derive(Debug, Clone)]
pub struct ExcitedState {
    pub m: f64,
    pub energy: f64,
    pub q: ComplexField,
    /// `Q1'(m)`.
    pub dq: ComplexField,
    /// `E1'(m)`.
    pub de: f64,
    pub residual: f64,
}

/// Tabulated excited family `m ↦ (Q1(m), E1(m))` from `m = 0`.
#[derive(Debug, Clone)]
pub struct ExcitedFamily {
    lambda: f64,
    e1: f64,
    nodes: Vec<ExcitedState>,
    perturbation: Perturbation,
    e14: f64,
}

pub const DEFAULT_M_CAP: f64 = 0.1;

impl ExcitedFamily {
    pub fn build(s: &SpectralData, lambda: f64, m_max: f64, dm: f64) -> Result<Self> {
        if !(dm > 0.0) || !(m_max >= dm) {
            return Err(Error::InvalidArgument("need 0 < dm <= m_max".into()));
        }
        let grid = *s.grid();
        let h = s.hamiltonian();
        let dv = grid.cell_volume();
        let pert = compute_perturbation(s, lambda)?;
        let phi1 = s.phi1().values().to_vec();
        let border: Vec<C64> = phi1.iter().map(|z| z * dv).collect();
        let count = (m_max / dm + 1e-9).floor() as usize;
        let mut nodes = vec![ExcitedState {
            m: 0.0,
            energy: s.e1(),
            q: ComplexField::zeros(grid),
            dq: s.phi1().clone(),
            de: 0.0,
            residual: 0.0,
        }];
        for i in 1..=count {
            let m = dm * i as f64;
            let prev = nodes.last().expect("seeded");
            let step = m - prev.m;
            let mut q: Vec<C64> = prev
                .q
                .values()
                .iter()
                .zip(prev.dq.values())
                .map(|(a, b)| a + b * step)
                .collect();
            let mut e = prev.energy + prev.de * step;
            let mut res = f64::INFINITY;
            let mut conv = false;
            for _ in 0..NEWTON_MAX {
                let r = profile_residual(&h, &q, e, lambda);
                let c = dot(&border, &q).re - m;
                let prev = res;
                res = field_norm(&grid, &r);
                if newton_done(res, prev) && c.abs() <= 1e-14 {
                    conv = true;
                    break;
                }
                let lin = Linearization::new(&h, &q, e, lambda);
                let (dq, de) = lin.solve_bordered(&q, &border, &r, c)?;
                for (qi, d) in q.iter_mut().zip(&dq) {
                    *qi -= d;
                }
                e -= de;
            }
            if !conv && !(res <= RESIDUAL_TOL) {
                return Err(Error::NotConverged {
                    what: "excited-family Newton",
                    iterations: NEWTON_MAX,
                    residual: res,
                });
            }
            // Tangent: L+ Q' - E' Q = 0, (φ1, Q') = 1.
            let lin = Linearization::new(&h, &q, e, lambda);
            let zero = vec![ZERO; q.len()];
            let (dq, de) = lin.solve_bordered(&q, &border, &zero, 1.0)?;
            nodes.push(ExcitedState {
                m,
                energy: e,
                q: ComplexField::from_vec_unchecked(grid, q),
                dq: ComplexField::from_vec_unchecked(grid, dq),
                de,
                residual: res,
            });
        }
        let e14 = fit_e14(&nodes, s.e1(), pert.e12);
        Ok(Self {
            lambda,
            e1: s.e1(),
            nodes,
            perturbation: pert,
            e14,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn e1(&self) -> f64 {
        self.e1
    }

    pub fn nodes(&self) -> &[ExcitedState] {
        &self.nodes
    }

    pub fn q3(&self) -> &ComplexField {
        &self.perturbation.q3
    }

    pub fn e12(&self) -> f64 {
        self.perturbation.e12
    }

    /// Least-squares coefficient of `m^4` in `E1(m) - e1 - E_{1,2} m^2`.
    pub fn e14(&self) -> f64 {
        self.e14
    }

    pub fn m_max(&self) -> f64 {
        self.nodes.last().map(|n| n.m).unwrap_or(0.0)
    }

    /// `(Q1(m), Q1'(m), E1(m))` by cubic Hermite interpolation in `m`.
    pub fn eval_m(&self, m: f64) -> Result<(ComplexField, ComplexField, f64)> {
        let mmax = self.m_max();
        if !(m >= 0.0 && m <= mmax) {
            return Err(Error::OutOfRange {
                value: m,
                min: 0.0,
                max: mmax,
            });
        }
        let i = self
            .nodes
            .windows(2)
            .position(|w| m <= w[1].m)
            .unwrap_or(self.nodes.len().saturating_sub(2));
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let hstep = b.m - a.m;
        let t = (m - a.m) / hstep;
        let (h00, h10, h01, h11) = hermite(t);
        let (d00, d10, d01, d11) = hermite_slope(t, hstep);
        let n = a.q.len();
        let mut q = Vec::with_capacity(n);
        let mut dq = Vec::with_capacity(n);
        for k in 0..n {
            let (qa, qb) = (a.q.values()[k], b.q.values()[k]);
            let (sa, sb) = (a.dq.values()[k], b.dq.values()[k]);
            q.push(qa * h00 + sa * (h10 * hstep) + qb * h01 + sb * (h11 * hstep));
            dq.push(qa * d00 + sa * d10 + qb * d01 + sb * d11);
        }
        let e = a.energy * h00 + a.de * h10 * hstep + b.energy * h01 + b.de * h11 * hstep;
        let g = *a.q.grid();
        Ok((
            ComplexField::from_vec_unchecked(g, q),
            ComplexField::from_vec_unchecked(g, dq),
            e,
        ))
    }

    /// `Q1(y) = Q1(|y|) y/|y|` and `Q1'(|y|) y/|y|`.
    pub fn eval_q1(&self, y: C64) -> Result<(ComplexField, ComplexField)> {
        let m = y.norm();
        let (q, dq, _) = self.eval_m(m)?;
        if m == 0.0 {
            return Ok((q, dq));
        }
        let ph = y / m;
        Ok((q.scale(ph), dq.scale(ph)))
    }

    pub fn energy(&self, m: f64) -> Result<f64> {
        Ok(self.eval_m(m)?.2)
    }
}

fn fit_e14(nodes: &[ExcitedState], e1: f64, e12: f64) -> f64 {
    // Fit over the lower half of the table where the m^6 term is smallest.
    let take = (nodes.len() / 2).max(2).min(nodes.len());
    let (mut num, mut den) = (0.0, 0.0);
    for nd in nodes.iter().take(take).skip(1) {
        let m4 = nd.m.powi(4);
        num += (nd.energy - e1 - e12 * nd.m * nd.m) * m4;
        den += m4 * m4;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{solve_eigenpairs, Potential, PotentialKind};

    fn spectral() -> SpectralData {
        let g = SpatialGrid::one_d(256, 32.0).unwrap();
        let v = Potential::sample(
            PotentialKind::Gaussian {
                depth: 8.0,
                width: 1.0,
            },
            g,
        )
        .unwrap();
        solve_eigenpairs(&v, 2).unwrap()
    }

    #[test]
    fn branch_point_is_trivial() {
        let s = spectral();
        let g = solve_ground(&s, 1.0, s.e0(), None).unwrap();
        assert_eq!(g.q.max_abs(), 0.0);
        assert!(solve_ground(&s, 1.0, s.e0() - 0.01, None).is_err());
    }

    #[test]
    fn ground_state_residual_and_sign() {
        let s = spectral();
        let gs = solve_ground(&s, 1.0, s.e0() + 1e-3, None).unwrap();
        assert!(gs.residual <= RESIDUAL_TOL);
        assert!(gs.c1() > 0.0);
        assert!(s.phi0().inner(&gs.q).unwrap().re > 0.0);
    }

    #[test]
    fn ground_family_interpolates_exact_states() {
        let s = spectral();
        let fam = GroundFamily::build(&s, 1.0, 0.05, 0.01).unwrap();
        assert!(fam.nodes().iter().all(|n| n.residual <= RESIDUAL_TOL));
        let (lo, hi) = fam.energy_range();
        let e = 0.5 * (lo + hi);
        let exact = fam.solve_at(&s, e).unwrap();
        let (q, _) = fam.interpolate(e).unwrap();
        let err = q.sub(&exact.q).unwrap().norm_l2() / exact.q.norm_l2();
        assert!(err < 1e-6, "{err}");
        assert!(fam.interpolate(hi + 1.0).is_err());
    }

    #[test]
    fn negative_coupling_family() {
        let s = spectral();
        let fam = GroundFamily::build(&s, -1.0, 0.03, 0.01).unwrap();
        assert!(fam
            .nodes()
            .iter()
            .all(|n| n.energy < s.e0() && n.c1() < 0.0));
    }

    #[test]
    fn perturbation_orthogonality() {
        let s = spectral();
        let p = compute_perturbation(&s, 1.0).unwrap();
        assert!(s.phi1().inner(&p.q3).unwrap().norm() < 1e-10);
        let z = compute_perturbation(&s, 0.0).unwrap();
        assert_eq!((z.q3.max_abs(), z.e12), (0.0, 0.0));
    }

    #[test]
    fn excited_family_constraints() {
        let s = spectral();
        let fam = ExcitedFamily::build(&s, 1.0, 0.04, 0.01).unwrap();
        for nd in fam.nodes() {
            assert!((s.phi1().inner(&nd.q).unwrap().re - nd.m).abs() < 1e-10);
            assert!(nd.residual <= RESIDUAL_TOL);
            let pi = project_pi(&nd.q, &s).unwrap();
            let expect = nd.q.sub(&s.phi1().scale_real(nd.m)).unwrap();
            assert!(pi.sub(&expect).unwrap().norm_l2() < 1e-10);
        }
        let (q0, _) = fam.eval_q1(C64::new(0.0, 0.0)).unwrap();
        assert_eq!(q0.max_abs(), 0.0);
        let (qr, _) = fam.eval_q1(C64::new(0.025, 0.0)).unwrap();
        assert!(qr.values().iter().all(|z| z.im == 0.0));
        let (qi, _) = fam.eval_q1(C64::new(0.0, 0.025)).unwrap();
        assert!(qi.sub(&qr.scale(C64::new(0.0, 1.0))).unwrap().max_abs() < 1e-15);
        assert!(fam.eval_q1(C64::new(0.05, 0.0)).is_err());
        assert!((fam.energy(0.0).unwrap() - s.e1()).abs() < 1e-15);
    }
}
