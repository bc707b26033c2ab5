//! Time evolution of the full equation by Strang splitting.
//!
//! One step is a half step of the pointwise flow `exp(-i dt/2 (V + λ|ψ|^2))`,
//! a full kinetic step in Fourier space and another half pointwise step.
//! Consecutive half steps are fused between observation points.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, C64};
use crate::fit::{self, LinearFit};
use crate::fourier::{ops_for, FourierOps};
use crate::grid::SpatialGrid;
use crate::spectral::{Potential, SpectralData};

/// Largest admissible `dt * |e0|`.
pub const PHASE_GUARD: f64 = 0.2;

/// Absorbing layer at the faces of the box.
///
/// Each application multiplies by `cos(π d / 2)^(strength * every)`, where `d`
/// is the normalized depth into the layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsorberSpec {
    pub width: f64,
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// Apply the mask every this many steps.
    #[serde(default = "default_every")]
    pub every: usize,
}

fn default_strength() -> f64 {
    0.125
}

fn default_every() -> usize {
    10
}

impl AbsorberSpec {
    pub fn new(width: f64) -> Self {
        Self {
            width,
            strength: default_strength(),
            every: default_every(),
        }
    }

    fn mask(&self, grid: &SpatialGrid) -> Result<Vec<f64>> {
        let l = grid.half_width();
        if !(self.width > 0.0 && self.width < l) || !(self.strength > 0.0) || self.every == 0 {
            return Err(Error::Config(format!(
                "absorber needs 0 < width < {l}, positive strength and every >= 1"
            )));
        }
        let p = self.strength * self.every as f64;
        Ok((0..grid.len())
            .map(|i| {
                let x = grid.position(i);
                (0..grid.dim())
                    .map(|a| {
                        let d = ((x[a].abs() - (l - self.width)) / self.width).clamp(0.0, 1.0);
                        (0.5 * std::f64::consts::PI * d).cos().max(0.0).powf(p)
                    })
                    .product()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Observers are called every this many steps.
    pub stride: usize,
    pub lambda: f64,
    #[serde(default)]
    pub absorber: Option<AbsorberSpec>,
}

impl EvolutionConfig {
    /// Default step `0.01 / |e0|`.
    pub fn default_dt(e0: f64) -> f64 {
        0.01 / e0.abs()
    }

    pub fn validate(&self, e0: f64) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if self.dt * e0.abs() > PHASE_GUARD * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "dt = {} exceeds {PHASE_GUARD}/|e0| = {}",
                self.dt,
                PHASE_GUARD / e0.abs()
            )));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(
                "horizon must be finite and nonnegative".into(),
            ));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }

    /// Number of steps; the horizon is always reached exactly.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    /// Step actually taken: the largest `horizon / k` not exceeding `dt`.
    pub fn step_size(&self) -> f64 {
        match self.steps() {
            0 => self.dt,
            k => self.horizon / k as f64,
        }
    }
}

/// Mass `∫|ψ|^2`.
pub fn mass(psi: &ComplexField) -> f64 {
    psi.norm_l2().powi(2)
}

/// `ℋ[ψ] = ∫ ½|∇ψ|^2 + ½V|ψ|^2 + ¼λ|ψ|^4`.
pub fn hamiltonian_energy(psi: &ComplexField, v: &[f64], lambda: f64) -> f64 {
    let dv = psi.grid().cell_volume();
    let local: f64 = psi
        .values()
        .iter()
        .zip(v)
        .map(|(z, v)| {
            let a = z.norm_sqr();
            0.5 * v * a + 0.25 * lambda * a * a
        })
        .sum();
    0.5 * psi.gradient_energy() + local * dv
}

/// Time series of the conserved quantities, including what left through the absorber.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConservedLedger {
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    pub energy: Vec<f64>,
    pub absorbed_mass: Vec<f64>,
    pub absorbed_energy: Vec<f64>,
}

impl ConservedLedger {
    fn push(&mut self, t: f64, m: f64, e: f64, am: f64, ae: f64) {
        self.times.push(t);
        self.mass.push(m);
        self.energy.push(e);
        self.absorbed_mass.push(am);
        self.absorbed_energy.push(ae);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Interior plus absorbed mass.
    pub fn total_mass(&self) -> Vec<f64> {
        self.mass
            .iter()
            .zip(&self.absorbed_mass)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn total_energy(&self) -> Vec<f64> {
        self.energy
            .iter()
            .zip(&self.absorbed_energy)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Relative mass drift per unit time: fitted slope of the total over its initial value.
    pub fn mass_drift_rate(&self) -> f64 {
        drift_rate(&self.times, &self.total_mass())
    }

    pub fn energy_drift_rate(&self) -> f64 {
        drift_rate(&self.times, &self.total_energy())
    }

    /// Largest relative deviation of the total mass from its initial value.
    pub fn max_mass_deviation(&self) -> f64 {
        max_deviation(&self.total_mass())
    }

    pub fn max_energy_deviation(&self) -> f64 {
        max_deviation(&self.total_energy())
    }
}

fn max_deviation(x: &[f64]) -> f64 {
    match x.first() {
        Some(&a) if a != 0.0 => x.iter().map(|v| ((v - a) / a).abs()).fold(0.0, f64::max),
        _ => 0.0,
    }
}

fn drift_rate(t: &[f64], x: &[f64]) -> f64 {
    if t.len() < 2 || x[0] == 0.0 {
        return 0.0;
    }
    let y: Vec<f64> = x.iter().map(|v| v / x[0]).collect();
    crate::fit::linear(t, &y)
        .map(|f| f.slope.abs())
        .unwrap_or(0.0)
}

/// Called at `t = 0`, every `stride` steps and at the horizon.
pub trait Observer {
    fn observe(&mut self, t: f64, psi: &ComplexField) -> Result<()>;
}

impl<F: FnMut(f64, &ComplexField) -> Result<()>> Observer for F {
    fn observe(&mut self, t: f64, psi: &ComplexField) -> Result<()> {
        self(t, psi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Even,
    Odd,
}

/// Index of the grid point at `-x`.
pub fn mirror_indices(grid: &SpatialGrid) -> Vec<usize> {
    let n = grid.n();
    (0..grid.len())
        .map(|i| {
            let idx = grid.multi_index(i);
            (0..grid.dim()).fold(0, |acc, a| acc * n + (n - idx[a]) % n)
        })
        .collect()
}

/// Split-step integrator state.
pub struct Evolver {
    grid: SpatialGrid,
    v: Vec<f64>,
    lambda: f64,
    dt: f64,
    kinetic: Vec<C64>,
    mask: Option<(Vec<f64>, usize)>,
    ops: Arc<FourierOps>,
    scratch: Vec<C64>,
    psi: Vec<C64>,
    steps: usize,
    absorbed_mass: f64,
    absorbed_energy: f64,
}

impl Evolver {
    pub fn new(potential: &Potential, psi0: &ComplexField, cfg: &EvolutionConfig) -> Result<Self> {
        let grid = *potential.grid();
        if psi0.grid() != &grid {
            return Err(Error::GridMismatch);
        }
        if !(cfg.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        let dt = cfg.step_size();
        let ops = ops_for(&grid);
        let kinetic = ops
            .k_squared()
            .iter()
            .map(|k2| C64::from_polar(1.0, -dt * k2))
            .collect();
        let mask = match cfg.absorber {
            Some(a) => Some((a.mask(&grid)?, a.every)),
            None => None,
        };
        Ok(Self {
            grid,
            v: potential.values().to_vec(),
            lambda: cfg.lambda,
            dt,
            kinetic,
            mask,
            scratch: ops.make_scratch(),
            ops,
            psi: psi0.values().to_vec(),
            steps: 0,
            absorbed_mass: 0.0,
            absorbed_energy: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self) -> ComplexField {
        ComplexField::from_vec_unchecked(self.grid, self.psi.clone())
    }

    pub fn absorbed(&self) -> (f64, f64) {
        (self.absorbed_mass, self.absorbed_energy)
    }

    fn potential_phase(&mut self, tau: f64) {
        let lambda = self.lambda;
        for (z, v) in self.psi.iter_mut().zip(&self.v) {
            let (s, c) = (-tau * (v + lambda * z.norm_sqr())).sin_cos();
            *z *= C64::new(c, s);
        }
    }

    fn kinetic_step(&mut self) {
        self.ops.forward_with(&mut self.psi, &mut self.scratch);
        for (z, p) in self.psi.iter_mut().zip(&self.kinetic) {
            *z *= p;
        }
        self.ops.inverse_with(&mut self.psi, &mut self.scratch);
    }

    /// One Strang step.
    pub fn step(&mut self) {
        self.advance(1);
    }

    /// `k` Strang steps with fused interior half steps; the absorber acts at step
    /// boundaries that are multiples of its period.
    pub fn advance(&mut self, k: usize) {
        let mut left = k;
        while left > 0 {
            let chunk = match &self.mask {
                Some((_, every)) => (every - self.steps % every).min(left),
                None => left,
            };
            self.potential_phase(0.5 * self.dt);
            for i in 0..chunk {
                self.kinetic_step();
                let tau = if i + 1 == chunk {
                    0.5 * self.dt
                } else {
                    self.dt
                };
                self.potential_phase(tau);
            }
            self.steps += chunk;
            left -= chunk;
            if let Some((_, every)) = &self.mask {
                if self.steps.is_multiple_of(*every) {
                    self.absorb();
                }
            }
        }
    }

    fn absorb(&mut self) {
        let Some((mask, _)) = &self.mask else { return };
        let before = ComplexField::from_vec_unchecked(self.grid, self.psi.clone());
        for (z, m) in self.psi.iter_mut().zip(mask) {
            *z *= m;
        }
        let after = ComplexField::from_vec_unchecked(self.grid, self.psi.clone());
        self.absorbed_mass += mass(&before) - mass(&after);
        self.absorbed_energy += hamiltonian_energy(&before, &self.v, self.lambda)
            - hamiltonian_energy(&after, &self.v, self.lambda);
    }

    /// Appends the current conserved quantities to `ledger`.
    pub fn record(&self, ledger: &mut ConservedLedger) {
        let psi = ComplexField::from_vec_unchecked(self.grid, self.psi.clone());
        ledger.push(
            self.time(),
            mass(&psi),
            hamiltonian_energy(&psi, &self.v, self.lambda),
            self.absorbed_mass,
            self.absorbed_energy,
        );
    }

    /// Projects the state onto the given parity under `x -> -x`.
    pub fn project_parity(&mut self, parity: Parity) {
        let mirror = mirror_indices(&self.grid);
        let sign = match parity {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        };
        let old = self.psi.clone();
        for (i, z) in self.psi.iter_mut().enumerate() {
            *z = 0.5 * (old[i] + sign * old[mirror[i]]);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self
            .psi
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
        {
            Ok(())
        } else {
            Err(Error::NonFinite { t: self.time() })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub final_state: ComplexField,
    pub ledger: ConservedLedger,
    pub steps: usize,
    pub t_final: f64,
}

/// Runs to the horizon, recording the ledger and calling observers at the stride.
pub fn evolve(
    s: &SpectralData,
    psi0: &ComplexField,
    cfg: &EvolutionConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    cfg.validate(s.e0())?;
    evolve_unchecked(s.potential(), psi0, cfg, observers)
}

/// [`evolve`] without the phase-resolution guard, for potentials without bound states.
pub fn evolve_unchecked(
    potential: &Potential,
    psi0: &ComplexField,
    cfg: &EvolutionConfig,
    observers: &mut [&mut dyn Observer],
) -> Result<Trajectory> {
    if !psi0.is_finite() {
        return Err(Error::NonFinite { t: 0.0 });
    }
    let mut ev = Evolver::new(potential, psi0, cfg)?;
    let total = cfg.steps();
    let mut ledger = ConservedLedger::default();
    let mut record = |ev: &Evolver, obs: &mut [&mut dyn Observer]| -> Result<()> {
        ev.check_finite()?;
        let psi = ev.state();
        let (am, ae) = ev.absorbed();
        ledger.push(
            ev.time(),
            mass(&psi),
            hamiltonian_energy(&psi, &ev.v, ev.lambda),
            am,
            ae,
        );
        for o in obs.iter_mut() {
            o.observe(ev.time(), &psi)?;
        }
        Ok(())
    };
    record(&ev, observers)?;
    while ev.steps < total {
        let k = cfg.stride.min(total - ev.steps);
        ev.advance(k);
        record(&ev, observers)?;
    }
    Ok(Trajectory {
        final_state: ev.state(),
        steps: ev.steps,
        t_final: ev.time(),
        ledger,
    })
}

/// Final state only, without observers.
pub fn evolve_to(
    potential: &Potential,
    psi0: &ComplexField,
    cfg: &EvolutionConfig,
) -> Result<ComplexField> {
    let mut ev = Evolver::new(potential, psi0, cfg)?;
    ev.advance(cfg.steps());
    ev.check_finite()?;
    Ok(ev.state())
}

/// Sup and local norms of a linear evolution sampled at increasing times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayProbe {
    pub dim: usize,
    pub t: Vec<f64>,
    pub sup: Vec<f64>,
    /// `‖⟨x⟩^{-4} u(t)‖₂`.
    pub loc: Vec<f64>,
}

impl DecayProbe {
    fn fit(&self, values: &[f64], window: [f64; 2]) -> Result<LinearFit> {
        let (t, v): (Vec<f64>, Vec<f64>) = self
            .t
            .iter()
            .zip(values)
            .filter(|(t, _)| **t >= window[0] && **t <= window[1])
            .map(|(t, v)| (*t, *v))
            .unzip();
        if t.len() < 3 {
            return Err(Error::InsufficientData(format!(
                "{} decay samples in {window:?}",
                t.len()
            )));
        }
        fit::log_log(&t, &v)
    }

    /// Slope of `log ‖u‖_∞` against `log t` over `window`.
    pub fn sup_exponent(&self, window: [f64; 2]) -> Result<LinearFit> {
        self.fit(&self.sup, window)
    }

    /// Slope of `log ‖⟨x⟩^{-4}u‖₂` against `log t` over `window`.
    pub fn loc_exponent(&self, window: [f64; 2]) -> Result<LinearFit> {
        self.fit(&self.loc, window)
    }
}

/// Evolves `f` under `-Δ + V` (`λ = 0`) and records the decay norms at `times`.
pub fn linear_decay_probe(
    potential: &Potential,
    f: &ComplexField,
    times: &[f64],
    dt: f64,
    absorber: Option<AbsorberSpec>,
) -> Result<DecayProbe> {
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidArgument(
            "probe times must be nonnegative and increasing".into(),
        ));
    }
    let horizon = times.last().copied().unwrap_or(0.0);
    let cfg = EvolutionConfig {
        dt,
        horizon,
        stride: 1,
        lambda: 0.0,
        absorber,
    };
    let mut ev = Evolver::new(potential, f, &cfg)?;
    let mut out = DecayProbe {
        dim: f.grid().dim(),
        ..Default::default()
    };
    for &t in times {
        let k = ((t - ev.time()) / ev.dt).round().max(0.0) as usize;
        ev.advance(k);
        let u = ev.state();
        out.t.push(ev.time());
        out.sup.push(u.max_abs());
        out.loc.push(u.norm_loc());
    }
    ev.check_finite()?;
    Ok(out)
}

/// Relative change of the final state when `dt` is halved.
pub fn dt_self_check(
    potential: &Potential,
    psi0: &ComplexField,
    cfg: &EvolutionConfig,
) -> Result<f64> {
    let coarse = evolve_to(potential, psi0, cfg)?;
    let fine = evolve_to(
        potential,
        psi0,
        &EvolutionConfig {
            dt: 0.5 * cfg.dt,
            ..*cfg
        },
    )?;
    Ok(coarse.sub(&fine)?.norm_l2() / fine.norm_l2().max(f64::MIN_POSITIVE))
}

/// Observed order from errors at `dt` and `dt/2` against a `dt/8` reference.
pub fn convergence_order(
    potential: &Potential,
    psi0: &ComplexField,
    cfg: &EvolutionConfig,
) -> Result<f64> {
    let reference = evolve_to(
        potential,
        psi0,
        &EvolutionConfig {
            dt: cfg.dt / 8.0,
            ..*cfg
        },
    )?;
    let e1 = evolve_to(potential, psi0, cfg)?.sub(&reference)?.norm_l2();
    let e2 = evolve_to(
        potential,
        psi0,
        &EvolutionConfig {
            dt: 0.5 * cfg.dt,
            ..*cfg
        },
    )?
    .sub(&reference)?
    .norm_l2();
    Ok((e1 / e2).log2())
}
