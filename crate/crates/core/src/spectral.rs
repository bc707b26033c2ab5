//! The linear Hamiltonian `H0 = -Δ + V`: eigenpairs, continuum projection,
//! propagation, resolvents, the resonance coefficient γ0 and the profiles
//! Φ1..Φ5 that appear in the dispersive part of the solution.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot, ComplexField, C64, ZERO};
use crate::fourier::{ops_for, FourierOps};
use crate::grid::SpatialGrid;
use crate::linalg::{cg, gmres, norm, KrylovOptions};

/// Largest value allowed on the outermost grid layer.
pub const BOUNDARY_DECAY: f64 = 1e-10;

/// Built-in potential families, all attractive wells `V <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    /// `-depth * exp(-|x|^2 / width^2)`.
    Gaussian {
        depth: f64,
        width: f64,
    },
    /// `-depth * exp(-(|x|^2 / width^2)^power)`.
    SuperGaussian {
        depth: f64,
        width: f64,
        power: u32,
    },
    Zero,
}

impl PotentialKind {
    pub fn eval(&self, r2: f64) -> f64 {
        match *self {
            PotentialKind::Gaussian { depth, width } => -depth * (-r2 / (width * width)).exp(),
            PotentialKind::SuperGaussian {
                depth,
                width,
                power,
            } => -depth * (-(r2 / (width * width)).powi(power as i32)).exp(),
            PotentialKind::Zero => 0.0,
        }
    }

    pub fn depth(&self) -> f64 {
        match *self {
            PotentialKind::Gaussian { depth, .. } | PotentialKind::SuperGaussian { depth, .. } => {
                depth
            }
            PotentialKind::Zero => 0.0,
        }
    }

    pub fn with_depth(&self, d: f64) -> PotentialKind {
        match *self {
            PotentialKind::Gaussian { width, .. } => PotentialKind::Gaussian { depth: d, width },
            PotentialKind::SuperGaussian { width, power, .. } => PotentialKind::SuperGaussian {
                depth: d,
                width,
                power,
            },
            PotentialKind::Zero => PotentialKind::Zero,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PotentialKind::Gaussian { depth, width } => {
                depth.is_finite() && width.is_finite() && width > 0.0
            }
            PotentialKind::SuperGaussian {
                depth,
                width,
                power,
            } => depth.is_finite() && width.is_finite() && width > 0.0 && (1..=8).contains(&power),
            PotentialKind::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bad potential parameters {self:?}"
            )))
        }
    }
}

/// A potential sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    kind: PotentialKind,
    grid: SpatialGrid,
    values: Vec<f64>,
}

impl Potential {
    /// Samples `kind` on `grid`, rejecting potentials that have not decayed at the box edge.
    pub fn sample(kind: PotentialKind, grid: SpatialGrid) -> Result<Self> {
        kind.validate()?;
        let values: Vec<f64> = grid
            .radius_squared()
            .into_iter()
            .map(|r2| kind.eval(r2))
            .collect();
        let edge = (0..grid.len())
            .filter(|&i| grid.multi_index(i)[..grid.dim()].contains(&0))
            .map(|i| values[i].abs())
            .fold(0.0, f64::max);
        if edge > BOUNDARY_DECAY {
            return Err(Error::InvalidArgument(format!(
                "potential is {edge:.2e} at the box edge; enlarge the box"
            )));
        }
        Ok(Self { kind, grid, values })
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn hamiltonian(&self) -> Hamiltonian {
        Hamiltonian {
            grid: self.grid,
            v: self.values.clone(),
            ops: ops_for(&self.grid),
        }
    }
}

/// Matrix-free `H0 = -Δ + V` with the spectral Laplacian.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    grid: SpatialGrid,
    v: Vec<f64>,
    ops: Arc<FourierOps>,
}

impl Hamiltonian {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn potential(&self) -> &[f64] {
        &self.v
    }

    pub fn ops(&self) -> &Arc<FourierOps> {
        &self.ops
    }

    /// `y = (H0 - shift) x`.
    pub fn apply_shifted(&self, x: &[C64], y: &mut [C64], shift: C64) {
        y.copy_from_slice(x);
        let mut s = self.ops.make_scratch();
        self.ops.forward_with(y, &mut s);
        for (z, k2) in y.iter_mut().zip(self.ops.k_squared()) {
            *z *= k2;
        }
        self.ops.inverse_with(y, &mut s);
        for ((yi, xi), vi) in y.iter_mut().zip(x).zip(&self.v) {
            *yi += (vi - shift) * xi;
        }
    }

    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.apply_shifted(x, y, ZERO);
    }

    pub fn apply_field(&self, f: &ComplexField) -> ComplexField {
        let mut y = vec![ZERO; f.len()];
        self.apply(f.values(), &mut y);
        ComplexField::from_vec_unchecked(self.grid, y)
    }

    /// `y = (|k|^2 + c)^{-1} x`, with complex `c` off the negative real axis.
    pub fn apply_free_inverse(&self, x: &[C64], y: &mut [C64], c: C64) {
        y.copy_from_slice(x);
        let mut s = self.ops.make_scratch();
        self.ops.apply_symbol(y, |k2| 1.0 / (k2 + c), &mut s);
    }

    /// Dense real matrix (small grids only).
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        let m = self.grid.len();
        if m > 4096 {
            return Err(Error::InvalidArgument(format!(
                "{m} points is too large for a dense matrix"
            )));
        }
        let mut a = DMatrix::zeros(m, m);
        let mut e = vec![ZERO; m];
        let mut col = vec![ZERO; m];
        for j in 0..m {
            e[j] = C64::new(1.0, 0.0);
            self.apply(&e, &mut col);
            e[j] = ZERO;
            for i in 0..m {
                a[(i, j)] = col[i].re;
            }
        }
        // Symmetrize away FFT round-off.
        let at = a.transpose();
        Ok((a + at) * 0.5)
    }
}

/// Discrete eigenpairs of `H0` together with the potential they belong to.
#[derive(Debug, Clone)]
pub struct SpectralData {
    potential: Potential,
    energies: Vec<f64>,
    modes: Vec<ComplexField>,
    residuals: Vec<f64>,
    bound_count: usize,
}

impl SpectralData {
    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.potential.grid()
    }

    pub fn hamiltonian(&self) -> Hamiltonian {
        self.potential.hamiltonian()
    }

    pub fn e0(&self) -> f64 {
        self.energies[0]
    }

    pub fn e1(&self) -> f64 {
        self.energies[1]
    }

    pub fn phi0(&self) -> &ComplexField {
        &self.modes[0]
    }

    pub fn phi1(&self) -> &ComplexField {
        &self.modes[1]
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn modes(&self) -> &[ComplexField] {
        &self.modes
    }

    /// `||H0 φ_j - e_j φ_j||_2` per mode.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn gap(&self) -> f64 {
        self.e1() - self.e0()
    }

    /// Number of localized negative eigenvalues found.
    pub fn bound_count(&self) -> usize {
        self.bound_count
    }

    /// `e0 < 2 e1`: twice the excited frequency reaches the continuum.
    pub fn resonant(&self) -> bool {
        self.e0() < 2.0 * self.e1()
    }

    /// `2 e1 - e0`.
    pub fn resonance_energy(&self) -> f64 {
        2.0 * self.e1() - self.e0()
    }

    /// Same eigenpairs carried to a larger box with the same spacing.
    pub fn embed(&self, grid: &SpatialGrid) -> Result<SpectralData> {
        let potential = Potential::sample(self.potential.kind, *grid)?;
        let modes = self
            .modes
            .iter()
            .map(|m| m.embed(grid))
            .collect::<Result<Vec<_>>>()?;
        let h = potential.hamiltonian();
        let residuals = modes
            .iter()
            .zip(&self.energies)
            .map(|(m, &e)| eigen_residual(&h, m, e))
            .collect();
        Ok(SpectralData {
            potential,
            energies: self.energies.clone(),
            modes,
            residuals,
            bound_count: self.bound_count,
        })
    }

    /// `φ0 φ1^2`, the coupling field of the resonance.
    pub fn coupling_field(&self) -> ComplexField {
        let f = self.phi0().mul(self.phi1()).expect("same grid");
        f.mul(self.phi1()).expect("same grid")
    }
}

fn eigen_residual(h: &Hamiltonian, f: &ComplexField, e: f64) -> f64 {
    let mut y = vec![ZERO; f.len()];
    h.apply_shifted(f.values(), &mut y, C64::new(e, 0.0));
    ComplexField::from_vec_unchecked(*f.grid(), y).norm_l2()
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Extra vectors carried in the block iteration.
    pub guard: usize,
    pub max_block_iter: usize,
    pub residual_tol: f64,
    /// A negative eigenvalue counts as bound only if its mode keeps less than this
    /// mass fraction in the outer half of the box.
    pub localization_tol: f64,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            guard: 4,
            max_block_iter: 400,
            residual_tol: 1e-9,
            localization_tol: 1e-6,
            seed: 7,
        }
    }
}

/// The `k` lowest bound states of `H0` on the grid of `v`.
pub fn solve_eigenpairs(v: &Potential, k: usize) -> Result<SpectralData> {
    solve_eigenpairs_with(v, k, EigenOptions::default())
}

pub fn solve_eigenpairs_with(v: &Potential, k: usize, opts: EigenOptions) -> Result<SpectralData> {
    if k < 2 {
        return Err(Error::InvalidArgument(
            "at least two eigenpairs are required".into(),
        ));
    }
    let h = v.hamiltonian();
    let grid = *v.grid();
    let m = grid.len();
    let p = (k + opts.guard).min(m);
    let shift = v.min() - 1.0;
    let far = C64::new(v.max() - shift, 0.0);
    let dv = grid.cell_volume();

    let op = |x: &[C64], y: &mut [C64]| h.apply_shifted(x, y, C64::new(shift, 0.0));
    let pre = |x: &[C64], y: &mut [C64]| h.apply_free_inverse(x, y, far);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut block: Vec<Vec<C64>> = (0..p)
        .map(|_| {
            (0..m)
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), 0.0))
                .collect()
        })
        .collect();
    let mut ritz = vec![0.0; p];
    let inner_opts = KrylovOptions {
        tol: 1e-10,
        max_iter: 2000,
        restart: 0,
    };

    let mut bound = 0;
    for it in 0..opts.max_block_iter {
        let solved: Vec<Vec<C64>> = block
            .par_iter()
            .map(|b| cg(op, pre, b, None, inner_opts, "shift-invert solve").map(|r| r.0))
            .collect::<Result<_>>()?;
        let (vecs, vals) = rayleigh_ritz(&h, solved)?;
        block = vecs;
        ritz = vals;
        let res: Vec<f64> = (0..k)
            .map(|j| {
                let mut y = vec![ZERO; m];
                h.apply_shifted(&block[j], &mut y, C64::new(ritz[j], 0.0));
                norm(&y) * dv.sqrt()
            })
            .collect();
        let converged = res.iter().all(|r| *r < 1e-5);
        if converged || it + 1 == opts.max_block_iter {
            bound = count_bound(&grid, &block, &ritz, opts.localization_tol);
            break;
        }
        // Early exit when the lowest Ritz values are clearly not bound.
        if it > 30 && ritz[1] >= 0.0 {
            break;
        }
    }
    if bound < 2 || ritz[1] >= 0.0 {
        return Err(Error::Spectrum(format!(
            "fewer than 2 bound states (found {bound})"
        )));
    }
    if bound < k {
        return Err(Error::Spectrum(format!(
            "requested {k} bound states, found {bound}"
        )));
    }

    // Deflated inverse iteration with a shift just below each Ritz value.
    let mut modes: Vec<Vec<C64>> = Vec::with_capacity(k);
    let mut energies = Vec::with_capacity(k);
    for j in 0..k {
        let gap = ritz[j + 1] - ritz[j];
        if gap < 1e-8 || (j > 0 && ritz[j] - energies[j - 1] < 1e-8) {
            return Err(Error::Spectrum(format!("eigenvalue {j} is degenerate")));
        }
        let mut x = block[j].clone();
        let mut e = ritz[j];
        let mut last = f64::INFINITY;
        for _ in 0..60 {
            let sigma = e - 0.1 * gap;
            let prev: &[Vec<C64>] = &modes;
            let deflate = |v: &mut [C64]| {
                for q in prev {
                    let c = dot(q, v);
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= c * qi;
                    }
                }
            };
            let op = |a: &[C64], b: &mut [C64]| {
                let mut t = a.to_vec();
                deflate(&mut t);
                h.apply_shifted(&t, b, C64::new(sigma, 0.0));
                deflate(b);
            };
            let pre = |a: &[C64], b: &mut [C64]| {
                h.apply_free_inverse(a, b, far);
                deflate(b);
            };
            let mut rhs = x.clone();
            deflate(&mut rhs);
            let refine = KrylovOptions {
                tol: 1e-13,
                max_iter: 4000,
                restart: 0,
            };
            let mut w = match cg(op, pre, &rhs, Some(&rhs), refine, "inverse iteration") {
                Ok((w, _)) => w,
                Err(_) => cg(op, pre, &rhs, Some(&rhs), inner_opts, "inverse iteration")?.0,
            };
            deflate(&mut w);
            let nw = norm(&w);
            for z in w.iter_mut() {
                *z /= nw;
            }
            let mut hw = vec![ZERO; m];
            h.apply(&w, &mut hw);
            e = dot(&w, &hw).re;
            x = w;
            for (hi, xi) in hw.iter_mut().zip(&x) {
                *hi -= e * xi;
            }
            // Iterate to the round-off floor, not just to the tolerance.
            let r = norm(&hw) * dv.sqrt();
            if r < 0.05 * opts.residual_tol && (r < 1e-14 || r > 0.5 * last) {
                break;
            }
            last = r;
        }
        // Real, positive at the point of largest modulus.
        let imax = (0..m)
            .max_by(|&a, &b| x[a].norm().total_cmp(&x[b].norm()))
            .unwrap_or(0);
        let phase = x[imax].conj() / x[imax].norm();
        let mut xr: Vec<C64> = x.iter().map(|z| C64::new((z * phase).re, 0.0)).collect();
        let nr = norm(&xr);
        for z in xr.iter_mut() {
            *z /= nr;
        }
        modes.push(xr);
        energies.push(e);
    }

    let fields: Vec<ComplexField> = modes
        .into_iter()
        .map(|v| {
            let s = 1.0 / dv.sqrt();
            ComplexField::from_vec_unchecked(grid, v.into_iter().map(|z| z * s).collect())
        })
        .collect();
    let residuals: Vec<f64> = fields
        .iter()
        .zip(&energies)
        .map(|(f, &e)| eigen_residual(&h, f, e))
        .collect();
    if let Some((j, r)) = residuals
        .iter()
        .enumerate()
        .find(|(_, r)| **r > opts.residual_tol)
    {
        return Err(Error::NotConverged {
            what: "eigenpair refinement",
            iterations: j,
            residual: *r,
        });
    }
    Ok(SpectralData {
        potential: v.clone(),
        energies,
        modes: fields,
        residuals,
        bound_count: bound,
    })
}

fn rayleigh_ritz(h: &Hamiltonian, mut w: Vec<Vec<C64>>) -> Result<(Vec<Vec<C64>>, Vec<f64>)> {
    let m = w[0].len();
    // Orthonormalize (two passes of Gram-Schmidt).
    for i in 0..w.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (a, b) = w.split_at_mut(i);
                let c = dot(&a[j], &b[0]);
                for (x, y) in b[0].iter_mut().zip(&a[j]) {
                    *x -= c * y;
                }
            }
        }
        let nv = norm(&w[i]);
        if nv < 1e-300 {
            return Err(Error::Spectrum("block iteration lost rank".into()));
        }
        for z in w[i].iter_mut() {
            *z /= nv;
        }
    }
    let p = w.len();
    let hw: Vec<Vec<C64>> = w
        .iter()
        .map(|x| {
            let mut y = vec![ZERO; m];
            h.apply(x, &mut y);
            y
        })
        .collect();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] = dot(&w[i], &hw[j]).re;
        }
    }
    let a = (a.clone() + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = order
        .iter()
        .map(|&c| {
            let mut v = vec![ZERO; m];
            for (r, wr) in w.iter().enumerate() {
                let coef = eig.eigenvectors[(r, c)];
                for (vi, x) in v.iter_mut().zip(wr) {
                    *vi += coef * x;
                }
            }
            v
        })
        .collect();
    Ok((vecs, vals))
}

fn count_bound(grid: &SpatialGrid, block: &[Vec<C64>], ritz: &[f64], tol: f64) -> usize {
    block
        .iter()
        .zip(ritz)
        .take_while(|(v, &e)| {
            e < 0.0 && {
                let f = ComplexField::from_vec_unchecked(*grid, v.to_vec());
                f.outer_mass_fraction(0.5) < tol
            }
        })
        .count()
}

/// A one-parameter family of wells ordered by depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialFamily {
    /// Shape template; its own depth is tried first.
    pub template: PotentialKind,
    pub depth_min: f64,
    pub depth_max: f64,
}

/// Finds a depth with exactly two bound states and `2 e1 - e0 > target_margin`.
pub fn find_resonant_potential(
    family: PotentialFamily,
    grid: SpatialGrid,
    target_margin: f64,
) -> Result<Potential> {
    let accept = |depth: f64| -> Result<Option<Potential>> {
        let v = Potential::sample(family.template.with_depth(depth), grid)?;
        match solve_eigenpairs(&v, 2) {
            Ok(s) if s.bound_count() == 2 && s.resonance_energy() > target_margin => Ok(Some(v)),
            Ok(_) | Err(Error::Spectrum(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    if let Some(v) = accept(family.template.depth())? {
        return Ok(v);
    }
    let count = |depth: f64| -> Result<usize> {
        let v = Potential::sample(family.template.with_depth(depth), grid)?;
        match solve_eigenpairs(&v, 2) {
            Ok(s) => Ok(s.bound_count()),
            Err(Error::Spectrum(_)) => Ok(0),
            Err(e) => Err(e),
        }
    };
    let (mut lo, mut hi) = (family.depth_min, family.depth_max);
    if count(hi)? < 2 {
        return Err(Error::Spectrum(format!(
            "no depth in [{lo}, {hi}] supports two bound states"
        )));
    }
    if count(lo)? >= 2 {
        hi = lo;
    } else {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if count(mid)? >= 2 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-3 * hi {
                break;
            }
        }
    }
    // Walk upward from the threshold; the excited state needs some binding to localize.
    let mut d = hi;
    while d <= family.depth_max {
        if let Some(v) = accept(d)? {
            return Ok(v);
        }
        d *= 1.05;
    }
    Err(Error::Spectrum(format!(
        "no depth in [{}, {}] meets the resonance margin {target_margin}",
        family.depth_min, family.depth_max
    )))
}

/// `f - Σ_j (φ_j, f) φ_j` over all stored bound states.
pub fn project_continuum(f: &ComplexField, s: &SpectralData) -> Result<ComplexField> {
    let mut out = f.clone();
    for phi in s.modes() {
        let c = phi.inner(f)?;
        out.axpy(-c, phi)?;
    }
    Ok(out)
}

fn project_continuum_raw(v: &mut [C64], modes: &[ComplexField]) {
    for phi in modes {
        let c = dot(phi.values(), v) * phi.grid().cell_volume();
        for (x, p) in v.iter_mut().zip(phi.values()) {
            *x -= c * p;
        }
    }
}

/// `e^{-itH0} f` by Strang splitting with at most `dt_max` per step.
pub fn propagate_linear(
    h: &Hamiltonian,
    f: &ComplexField,
    t: f64,
    dt_max: f64,
) -> Result<ComplexField> {
    if f.grid() != h.grid() {
        return Err(Error::GridMismatch);
    }
    if !(dt_max > 0.0) {
        return Err(Error::InvalidArgument("time step must be positive".into()));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    let steps = (t.abs() / dt_max).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    let half: Vec<C64> =
        h.v.iter()
            .map(|v| C64::from_polar(1.0, -0.5 * dt * v))
            .collect();
    let full: Vec<C64> = h.v.iter().map(|v| C64::from_polar(1.0, -dt * v)).collect();
    let kin: Vec<C64> = h
        .ops
        .k_squared()
        .iter()
        .map(|k2| C64::from_polar(1.0, -dt * k2))
        .collect();
    let mut w = f.values().to_vec();
    let mut s = h.ops.make_scratch();
    for (x, p) in w.iter_mut().zip(&half) {
        *x *= p;
    }
    for i in 0..steps {
        h.ops.forward_with(&mut w, &mut s);
        for (x, p) in w.iter_mut().zip(&kin) {
            *x *= p;
        }
        h.ops.inverse_with(&mut w, &mut s);
        let ph = if i + 1 == steps { &half } else { &full };
        for (x, p) in w.iter_mut().zip(ph) {
            *x *= p;
        }
    }
    Ok(ComplexField::from_vec_unchecked(*h.grid(), w))
}

/// Default step of [`propagate_linear`].
pub fn default_linear_dt(s: &SpectralData) -> f64 {
    0.01 / s.e0().abs().max(1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct ResolventOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for ResolventOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 20000,
            restart: 80,
        }
    }
}

/// Solves `(H0 - z) w = P_c f` with `w ⟂ φ_j`.
///
/// Real `z` is allowed only below the continuum, i.e. not above the highest stored
/// bound state, where the deflated operator is positive definite.
pub fn resolvent_apply(z: C64, f: &ComplexField, s: &SpectralData) -> Result<ComplexField> {
    resolvent_apply_with(z, f, s, ResolventOptions::default(), None)
}

pub fn resolvent_apply_with(
    z: C64,
    f: &ComplexField,
    s: &SpectralData,
    opts: ResolventOptions,
    warm: Option<&ComplexField>,
) -> Result<ComplexField> {
    if f.grid() != s.grid() {
        return Err(Error::GridMismatch);
    }
    let h = s.hamiltonian();
    let modes = s.modes();
    let mut rhs = f.values().to_vec();
    project_continuum_raw(&mut rhs, modes);
    if norm(&rhs) <= 1e-13 * norm(f.values()) {
        return Ok(ComplexField::zeros(*s.grid()));
    }
    let kopts = KrylovOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        restart: opts.restart,
    };
    let top = s
        .energies()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let x0 = warm.map(|w| w.values());
    let mut w = if z.im == 0.0 {
        if z.re > top + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "real spectral parameter {} is not below the continuum",
                z.re
            )));
        }
        let vmax = h.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let far = C64::new((vmax - z.re).max(1.0), 0.0);
        let op = |a: &[C64], b: &mut [C64]| {
            let mut t = a.to_vec();
            project_continuum_raw(&mut t, modes);
            h.apply_shifted(&t, b, z);
            project_continuum_raw(b, modes);
        };
        let pre = |a: &[C64], b: &mut [C64]| {
            h.apply_free_inverse(a, b, far);
            project_continuum_raw(b, modes);
        };
        cg(op, pre, &rhs, x0, kopts, "deflated resolvent")?.0
    } else {
        let op = |a: &[C64], b: &mut [C64]| h.apply_shifted(a, b, z);
        let pre = |a: &[C64], b: &mut [C64]| h.apply_free_inverse(a, b, -z);
        gmres(op, pre, &rhs, x0, kopts, "complex resolvent")?.0
    };
    project_continuum_raw(&mut w, modes);
    Ok(ComplexField::from_vec_unchecked(*s.grid(), w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceOptions {
    /// Regularizations in units of `|e1|`.
    pub sigma_ladder: Vec<f64>,
    /// Half-width of the energy window, in units of `|e1|`.
    pub s0: f64,
    pub window_points: usize,
    /// Smallest σ must exceed this multiple of the local level spacing.
    pub spacing_factor: f64,
    /// Cap on the number of points of the enlarged box.
    pub max_points: usize,
    pub tol: f64,
}

impl Default for ResonanceOptions {
    fn default() -> Self {
        Self {
            sigma_ladder: vec![0.2, 0.1, 0.05, 0.025],
            s0: 0.1,
            window_points: 5,
            spacing_factor: 3.0,
            max_points: 1 << 17,
            tol: 1e-10,
        }
    }
}

/// The limit `Im (f, (H0 - E - iσ)^{-1} P_c f)` as σ → 0+ at one energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceEstimate {
    pub energy: f64,
    pub value: f64,
    /// `(σ, Im F(σ))` pairs in ladder order.
    pub ladder: Vec<(f64, f64)>,
    /// Richardson tableau, one row per elimination level.
    pub tableau: Vec<Vec<f64>>,
    pub monotone: bool,
    /// Relative spread of the last two extrapolants of the highest level.
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceData {
    pub gamma0: f64,
    pub estimate: ResonanceEstimate,
    /// `(s, γ(s))` over the energy window `|s| <= s0`.
    pub window: Vec<(f64, f64)>,
    pub window_min: f64,
    /// `window_min / γ0`.
    pub window_margin: f64,
    pub level_spacing: f64,
    pub resonance_grid: SpatialGrid,
    pub reliable: bool,
}

/// Spacing of distinct free levels `|k|^2` near `energy` on `grid`.
pub fn level_spacing(grid: &SpatialGrid, energy: f64) -> f64 {
    let k = grid.wavenumbers();
    let window = 0.5 * energy.abs().max(1e-3);
    let mut levels: Vec<f64> = match grid.dim() {
        1 => k.iter().map(|a| a * a).collect(),
        _ => {
            // Levels of a cube depend only on the sorted multiset of |k_a|.
            let pos: Vec<f64> = k.iter().filter(|a| **a >= 0.0).copied().collect();
            let mut v = Vec::new();
            let dim = grid.dim();
            let mut idx = vec![0usize; dim];
            loop {
                let e: f64 = idx.iter().map(|&i| pos[i] * pos[i]).sum();
                if (e - energy).abs() <= window {
                    v.push(e);
                }
                let mut a = 0;
                loop {
                    if a == dim {
                        break;
                    }
                    idx[a] += 1;
                    if idx[a] < pos.len() {
                        break;
                    }
                    idx[a] = 0;
                    a += 1;
                }
                if a == dim {
                    break;
                }
            }
            v
        }
    };
    levels.retain(|e| (e - energy).abs() <= window);
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    if levels.len() < 2 {
        return f64::INFINITY;
    }
    (levels[levels.len() - 1] - levels[0]) / (levels.len() - 1) as f64
}

/// Enlarges the box (same spacing) until the smallest σ resolves the level comb.
pub fn resonance_grid(
    grid: &SpatialGrid,
    energy: f64,
    sigma_min: f64,
    opts: &ResonanceOptions,
) -> Result<SpatialGrid> {
    let mut g = *grid;
    loop {
        let sp = level_spacing(&g, energy);
        if sigma_min >= opts.spacing_factor * sp {
            return Ok(g);
        }
        let next = SpatialGrid::new(g.dim(), g.n() * 2, g.half_width() * 2.0);
        match next {
            Ok(n) if n.len() <= opts.max_points => g = n,
            _ => {
                return Err(Error::Resonance(format!(
                    "σ = {sigma_min:.3e} is below {} x level spacing {sp:.3e} and the box cannot grow further",
                    opts.spacing_factor
                )))
            }
        }
    }
}

/// `Im (f, (H0 - E - iσ)^{-1} P_c f)` extrapolated to σ → 0 with the given ladder.
pub fn resonance_limit(
    f: &ComplexField,
    s: &SpectralData,
    energy: f64,
    sigmas: &[f64],
    tol: f64,
) -> Result<ResonanceEstimate> {
    if sigmas.is_empty() || sigmas.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidArgument(
            "σ ladder must be non-empty and positive".into(),
        ));
    }
    let opts = ResolventOptions {
        tol,
        ..Default::default()
    };
    let mut ladder = Vec::with_capacity(sigmas.len());
    let mut warm: Option<ComplexField> = None;
    for &sg in sigmas {
        let w = resolvent_apply_with(C64::new(energy, sg), f, s, opts, warm.as_ref())?;
        let val = f.inner(&w)?.im;
        ladder.push((sg, val));
        warm = Some(w);
    }
    Ok(extrapolate(energy, ladder))
}

/// Neville extrapolation to σ = 0 assuming `F(σ) = γ + a σ + b σ^2 + ...`.
pub fn extrapolate(energy: f64, ladder: Vec<(f64, f64)>) -> ResonanceEstimate {
    let mut tableau = vec![ladder.iter().map(|p| p.1).collect::<Vec<f64>>()];
    let sig: Vec<f64> = ladder.iter().map(|p| p.0).collect();
    for level in 1..ladder.len() {
        let prev = &tableau[level - 1];
        let row: Vec<f64> = (0..prev.len() - 1)
            .map(|i| {
                let (s0, s1) = (sig[i], sig[i + level]);
                (s0 * prev[i + 1] - s1 * prev[i]) / (s0 - s1)
            })
            .collect();
        tableau.push(row);
    }
    let raw = &tableau[0];
    let diffs: Vec<f64> = raw.windows(2).map(|w| w[1] - w[0]).collect();
    let tail = &diffs[diffs.len().saturating_sub(2)..];
    let monotone = tail.iter().all(|d| *d >= 0.0) || tail.iter().all(|d| *d <= 0.0);
    // Use the deepest level that still has two entries for the spread, and its last entry.
    let (value, spread) = if tableau.len() >= 3 {
        let row = &tableau[tableau.len() - 2];
        let last = row[row.len() - 1];
        let before = row[row.len() - 2];
        let best = tableau[tableau.len() - 1][0];
        (best, (last - before).abs() / best.abs().max(1e-300))
    } else if tableau.len() == 2 {
        let v = tableau[1][0];
        (v, (v - raw[1]).abs() / v.abs().max(1e-300))
    } else {
        (raw[0], f64::INFINITY)
    };
    ResonanceEstimate {
        energy,
        value,
        ladder,
        tableau,
        monotone,
        spread,
    }
}

/// Computes γ0 for `φ0 φ1^2` at `2 e1 - e0` with the default ladder.
pub fn compute_gamma0(s: &SpectralData) -> Result<ResonanceData> {
    compute_gamma0_with(s, &s.coupling_field(), &ResonanceOptions::default())
}

/// γ0 for an arbitrary coupling field `f` on the grid of `s`.
pub fn compute_gamma0_with(
    s: &SpectralData,
    f: &ComplexField,
    opts: &ResonanceOptions,
) -> Result<ResonanceData> {
    if !s.resonant() {
        return Err(Error::Resonance("2 e1 - e0 is not in the continuum".into()));
    }
    let energy = s.resonance_energy();
    let unit = s.e1().abs();
    let sigmas: Vec<f64> = opts.sigma_ladder.iter().map(|x| x * unit).collect();
    let sigma_min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let rg = resonance_grid(s.grid(), energy, sigma_min, opts)?;
    let spacing = level_spacing(&rg, energy);
    let (sb, fb) = if rg == *s.grid() {
        (s.clone(), f.clone())
    } else {
        (s.embed(&rg)?, f.embed(&rg)?)
    };

    let s0 = opts.s0 * unit;
    let np = opts.window_points.max(1);
    let shifts: Vec<f64> = if np == 1 {
        vec![0.0]
    } else {
        (0..np)
            .map(|i| -s0 + 2.0 * s0 * i as f64 / (np - 1) as f64)
            .collect()
    };
    let mut energies: Vec<f64> = vec![energy];
    energies.extend(shifts.iter().filter(|x| **x != 0.0).map(|x| energy + x));
    let estimates: Vec<ResonanceEstimate> = energies
        .par_iter()
        .map(|&e| resonance_limit(&fb, &sb, e, &sigmas, opts.tol))
        .collect::<Result<_>>()?;
    let est = estimates[0].clone();
    let gamma0 = est.value;
    let scale = fb.norm_l2().powi(2).max(1e-300);
    if gamma0 < -1e-12 * scale.max(1.0) {
        return Err(Error::Resonance(format!(
            "γ0 = {gamma0:.3e} is negative; the regularization sign is wrong"
        )));
    }
    if est.spread > 0.05 && gamma0.abs() > 1e-12 * scale {
        return Err(Error::Resonance(format!(
            "σ ladder did not stabilize (relative spread {:.1}%)",
            100.0 * est.spread
        )));
    }
    let mut window: Vec<(f64, f64)> = Vec::with_capacity(shifts.len());
    let mut k = 1;
    for &sh in &shifts {
        if sh == 0.0 {
            window.push((0.0, gamma0));
        } else {
            window.push((sh, estimates[k].value));
            k += 1;
        }
    }
    let window_min = window.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let gamma0 = gamma0.max(0.0);
    let window_margin = if gamma0 > 0.0 {
        window_min / gamma0
    } else {
        f64::NAN
    };
    Ok(ResonanceData {
        gamma0,
        reliable: est.monotone && est.spread <= 0.05,
        estimate: est,
        window,
        window_min,
        window_margin,
        level_spacing: spacing,
        resonance_grid: rg,
    })
}

/// The dispersive profiles multiplying the cubic monomials in `ξ^(2)`.
#[derive(Debug, Clone)]
pub struct Profiles {
    pub lambda: f64,
    /// `Φ1 = -λ (H0 - (2e1 - e0) - i0)^{-1} P_c φ0 φ1^2`.
    pub phi1: ComplexField,
    pub phi2: ComplexField,
    pub phi3: ComplexField,
    pub phi4: ComplexField,
    pub phi5: ComplexField,
}

impl Profiles {
    pub fn phi1_re(&self) -> ComplexField {
        self.phi1.map(|z| C64::new(z.re, 0.0))
    }

    pub fn phi1_im(&self) -> ComplexField {
        self.phi1.map(|z| C64::new(z.im, 0.0))
    }
}

/// Builds Φ1..Φ5. Φ1 uses the σ-ladder of `opts` on the enlarged box, extrapolated
/// pointwise, and is then restricted back to the grid of `s`.
pub fn compute_profiles(
    s: &SpectralData,
    lambda: f64,
    opts: &ResonanceOptions,
) -> Result<Profiles> {
    let g = *s.grid();
    if lambda == 0.0 {
        let z = ComplexField::zeros(g);
        return Ok(Profiles {
            lambda,
            phi1: z.clone(),
            phi2: z.clone(),
            phi3: z.clone(),
            phi4: z.clone(),
            phi5: z,
        });
    }
    if !s.resonant() {
        return Err(Error::Resonance("2 e1 - e0 is not in the continuum".into()));
    }
    let (e0, e1) = (s.e0(), s.e1());
    let p0 = s.phi0();
    let p1 = s.phi1();
    let f011 = s.coupling_field();
    let f001 = p0.mul(p0)?.mul(p1)?;
    let f000 = p0.mul(p0)?.mul(p0)?;

    let energy = s.resonance_energy();
    let unit = e1.abs();
    let sigmas: Vec<f64> = opts.sigma_ladder.iter().map(|x| x * unit).collect();
    let sigma_min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    let rg = resonance_grid(&g, energy, sigma_min, opts)?;
    let (sb, fb) = if rg == g {
        (s.clone(), f011.clone())
    } else {
        (s.embed(&rg)?, f011.embed(&rg)?)
    };
    let ropts = ResolventOptions {
        tol: opts.tol,
        ..Default::default()
    };
    let mut sols: Vec<Vec<C64>> = Vec::with_capacity(sigmas.len());
    let mut warm: Option<ComplexField> = None;
    for &sg in &sigmas {
        let w = resolvent_apply_with(C64::new(energy, sg), &fb, &sb, ropts, warm.as_ref())?;
        sols.push(w.restrict(&g)?.into_values());
        warm = Some(w);
    }
    let mut phi1 = vec![ZERO; g.len()];
    for i in 0..g.len() {
        let re = extrapolate(
            energy,
            sigmas
                .iter()
                .zip(&sols)
                .map(|(s, v)| (*s, v[i].re))
                .collect(),
        );
        let im = extrapolate(
            energy,
            sigmas
                .iter()
                .zip(&sols)
                .map(|(s, v)| (*s, v[i].im))
                .collect(),
        );
        phi1[i] = C64::new(re.value, im.value) * (-lambda);
    }
    let phi1 = ComplexField::from_vec_unchecked(g, phi1);

    let real_solve = |z: f64, f: &ComplexField, coef: f64| -> Result<ComplexField> {
        let w = resolvent_apply(C64::new(z, 0.0), f, s)?;
        Ok(w.map(|v| C64::new(v.re * coef, 0.0)))
    };
    Ok(Profiles {
        lambda,
        phi1,
        phi2: real_solve(e0, &f011, -2.0 * lambda)?,
        phi3: real_solve(e1, &f001, -2.0 * lambda)?,
        phi4: real_solve(2.0 * e0 - e1, &f001, -lambda)?,
        phi5: real_solve(e0, &f000, -lambda)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn well(n: usize, l: f64) -> Potential {
        let g = SpatialGrid::one_d(n, l).unwrap();
        Potential::sample(
            PotentialKind::Gaussian {
                depth: 8.0,
                width: 1.0,
            },
            g,
        )
        .unwrap()
    }

    #[test]
    fn potential_must_decay() {
        let g = SpatialGrid::one_d(64, 3.0).unwrap();
        assert!(Potential::sample(
            PotentialKind::Gaussian {
                depth: 8.0,
                width: 1.0
            },
            g
        )
        .is_err());
    }

    #[test]
    fn zero_potential_has_no_bound_states() {
        let g = SpatialGrid::one_d(128, 16.0).unwrap();
        let v = Potential::sample(PotentialKind::Zero, g).unwrap();
        match solve_eigenpairs(&v, 2) {
            Err(Error::Spectrum(m)) => assert!(m.contains("fewer than 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eigenpairs_match_dense_oracle() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let dense = v.hamiltonian().dense().unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(dense)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        assert!((s.e0() - ev[0]).abs() < 1e-9, "{} vs {}", s.e0(), ev[0]);
        assert!((s.e1() - ev[1]).abs() < 1e-9);
        assert_eq!(s.bound_count(), 2);
        assert!(s.residuals().iter().all(|r| *r <= 1e-9));
        assert!((s.phi0().norm_l2() - 1.0).abs() < 1e-10);
        assert!(s.phi0().inner(s.phi1()).unwrap().norm() < 1e-10);
        assert!(s.resonant());
        // Parity: φ0 even, φ1 odd about the origin (index n/2).
        let n = 256;
        for i in 1..n / 2 {
            let (a, b) = (
                s.phi0().values()[n / 2 + i].re,
                s.phi0().values()[n / 2 - i].re,
            );
            assert!((a - b).abs() < 1e-8);
            let (a, b) = (
                s.phi1().values()[n / 2 + i].re,
                s.phi1().values()[n / 2 - i].re,
            );
            assert!((a + b).abs() < 1e-8);
        }
    }

    #[test]
    fn continuum_projection() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        assert!(project_continuum(s.phi0(), &s).unwrap().norm_l2() < 1e-10);
        let g = *s.grid();
        let f = ComplexField::from_fn(g, |x| {
            C64::new(
                (-(x[0] - 1.0).powi(2)).exp(),
                x[0].sin() * (-x[0] * x[0] / 8.0).exp(),
            )
        });
        let pf = project_continuum(&f, &s).unwrap();
        assert!(s.phi0().inner(&pf).unwrap().norm() < 1e-10);
        assert!(s.phi1().inner(&pf).unwrap().norm() < 1e-10);
        let ppf = project_continuum(&pf, &s).unwrap();
        assert!(ppf.sub(&pf).unwrap().norm_l2() < 1e-12);
    }

    #[test]
    fn propagation_of_eigenstate() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let h = s.hamiltonian();
        assert_eq!(
            propagate_linear(&h, s.phi0(), 0.0, 0.01).unwrap(),
            *s.phi0()
        );
        let t = 2.0;
        let out = propagate_linear(&h, s.phi0(), t, 1e-3).unwrap();
        let expect = s.phi0().scale(C64::from_polar(1.0, -s.e0() * t));
        assert!(out.sub(&expect).unwrap().norm_l2() < 1e-4);
        assert!((out.norm_l2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn real_resolvent_matches_dense_solve() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let g = *s.grid();
        let f = ComplexField::from_fn(g, |x| C64::new((-(x[0] - 0.5).powi(2)).exp(), 0.0));
        let z = s.e0() - 10.0;
        let w = resolvent_apply(C64::new(z, 0.0), &f, &s).unwrap();
        let mut a = v.hamiltonian().dense().unwrap();
        for i in 0..g.len() {
            a[(i, i)] -= z;
        }
        let pf = project_continuum(&f, &s).unwrap();
        let b = nalgebra::DVector::from_iterator(g.len(), pf.values().iter().map(|c| c.re));
        let x = a.lu().solve(&b).unwrap();
        for i in 0..g.len() {
            assert!((w.values()[i].re - x[i]).abs() < 1e-8);
        }
        assert!(
            resolvent_apply(C64::new(s.e0(), 0.0), s.phi0(), &s)
                .unwrap()
                .norm_l2()
                < 1e-10
        );
        assert!(resolvent_apply(C64::new(1.0, 0.0), &f, &s).is_err());
    }

    #[test]
    fn complex_resolvent_conjugate_symmetry() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let g = *s.grid();
        let f = ComplexField::from_fn(g, |x| {
            C64::new((-(x[0] - 0.5).powi(2)).exp(), 0.3 * (-x[0] * x[0]).exp())
        });
        let z = C64::new(2.0, 0.3);
        let a = resolvent_apply(z, &f, &s).unwrap();
        let b = resolvent_apply(z.conj(), &f.conj(), &s).unwrap();
        assert!(a.conj().sub(&b).unwrap().norm_l2() < 1e-10 * a.norm_l2().max(1.0));
        let mut r = vec![ZERO; g.len()];
        s.hamiltonian().apply_shifted(a.values(), &mut r, z);
        let pf = project_continuum(&f, &s).unwrap();
        let res = ComplexField::new(g, r).unwrap().sub(&pf).unwrap().norm_l2();
        assert!(res <= 1e-8 * f.norm_l2());
    }

    #[test]
    fn richardson_recovers_polynomial_limit() {
        let ladder: Vec<(f64, f64)> = [0.4, 0.2, 0.1, 0.05]
            .iter()
            .map(|&s| (s, 1.5 + 0.7 * s - 2.0 * s * s + 0.3 * s * s * s))
            .collect();
        let e = extrapolate(0.0, ladder);
        assert!((e.value - 1.5).abs() < 1e-12);
        assert!(e.monotone);
    }

    #[test]
    fn level_spacing_one_d() {
        let g = SpatialGrid::one_d(8192, 1024.0).unwrap();
        let e: f64 = 2.4;
        let expect = 2.0 * e.sqrt() * std::f64::consts::PI / 1024.0;
        let got = level_spacing(&g, e);
        assert!((got - expect).abs() < 0.05 * expect, "{got} vs {expect}");
    }

    #[test]
    fn zero_coupling_gives_zero_gamma() {
        let v = well(1024, 128.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let z = ComplexField::zeros(*s.grid());
        let r = compute_gamma0_with(&s, &z, &ResonanceOptions::default()).unwrap();
        assert_eq!(r.gamma0, 0.0);
    }

    #[test]
    fn profiles_vanish_without_coupling() {
        let v = well(256, 32.0);
        let s = solve_eigenpairs(&v, 2).unwrap();
        let p = compute_profiles(&s, 0.0, &ResonanceOptions::default()).unwrap();
        assert_eq!(p.phi1.max_abs(), 0.0);
        assert_eq!(p.phi5.max_abs(), 0.0);
    }
}
