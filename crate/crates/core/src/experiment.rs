//! Experiment configuration, initial data, single runs, regime detection and
//! n-ladders.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound_states::{ExcitedFamily, GroundFamily};
use crate::decomposition::{probe, ProbeRecord};
use crate::dynamics::{AbsorberSpec, ConservedLedger, EvolutionConfig, Evolver, Parity};
use crate::error::{Error, Result};
use crate::field::{ComplexField, WeightedNormSpec, C64};
use crate::fit::{self, LinearFit};
use crate::grid::SpatialGrid;
use crate::ground_frame::{
    decompose_ground_frame, fit_relaxation, GroundSample, PhaseTrack, RelaxationFit, SplitOptions,
};
use crate::normal_form::{
    compute_coefficients, fg_crossing_time, fg_time_between, first_crossing, measure_nf_residuals,
    regime_prediction, DataClass, ImaginaryOverrides, NormalFormCoefficients, PredicateReport,
    ReducedTrajectory, RegimePrediction,
};
use crate::spectral::{
    compute_gamma0, project_continuum, solve_eigenpairs, Potential, PotentialKind, SpectralData,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Conservation gates: relative drift per unit time.
pub const MASS_DRIFT_GATE: f64 = 1e-8;
pub const ENERGY_DRIFT_GATE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.dim, self.n, self.half_width)
    }
}

/// Continuum part `ξ₀` of the initial data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum XiRecipe {
    #[default]
    None,
    /// Random modes with `|k| <= cutoff` under a Gaussian envelope of the given
    /// width, projected onto the continuum and scaled to `‖ξ₀‖_Y = norm_y`.
    Random {
        norm_y: f64,
        cutoff: f64,
        envelope: f64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicatePolicy {
    #[default]
    Abort,
    Warn,
}

/// `ψ₀ = x₀φ₀ + Q₁(y₀) + ξ₀` with `x₀ = x0_ratio·n·e^{i x0_phase}` and `y₀ = y0_ratio·n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n: f64,
    pub x0_ratio: f64,
    #[serde(default)]
    pub x0_phase: f64,
    pub y0_ratio: f64,
    #[serde(default)]
    pub xi0: XiRecipe,
    #[serde(default)]
    pub on_violation: PredicatePolicy,
}

impl DataSpec {
    pub fn x0(&self) -> C64 {
        C64::from_polar(self.x0_ratio * self.n, self.x0_phase)
    }

    pub fn y0(&self) -> f64 {
        self.y0_ratio * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Horizon {
    Fixed(f64),
    /// Multiple of the `t₂` predicted by the `(f, g)` system.
    T2Multiple(f64),
}

/// Log-spaced ground-frame measurements from `start_t2_multiple · t₂` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSampling {
    pub start_t2_multiple: f64,
    pub per_decade: usize,
    #[serde(default = "default_window_points")]
    pub window_points: usize,
}

fn default_window_points() -> usize {
    SplitOptions::default().window_points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
    #[serde(default)]
    pub snapshot: bool,
}

fn default_dt_e0() -> f64 {
    0.01
}

fn default_eps0() -> f64 {
    0.5
}

fn default_sample_every() -> usize {
    10
}

fn default_probe_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialKind,
    pub grid: GridSpec,
    pub lambda: f64,
    pub data: DataSpec,
    /// Time step in units of `1/|e0|`.
    #[serde(default = "default_dt_e0")]
    pub dt_e0: f64,
    pub horizon: Horizon,
    /// Frame amplitudes are sampled every this many steps.
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    /// Full probes and ledger entries every this many samples.
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    #[serde(default)]
    pub absorber: Option<AbsorberSpec>,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default)]
    pub seed: u64,
    /// Skips the resonance computation when set.
    #[serde(default)]
    pub gamma0: Option<f64>,
    #[serde(default)]
    pub ground_frames: Option<FrameSampling>,
    /// Keeps the state in one parity sector.
    #[serde(default)]
    pub parity: Option<Parity>,
    #[serde(default)]
    pub imaginary_overrides: ImaginaryOverrides,
    #[serde(default)]
    pub output: Option<OutputSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let d = Sha256::digest(text.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.data.n > 0.0 && self.data.n.is_finite()) {
            return bad("data.n must be positive");
        }
        if !self.data.x0_ratio.is_finite()
            || !self.data.y0_ratio.is_finite()
            || self.data.y0_ratio < 0.0
        {
            return bad("data ratios must be finite, y0_ratio nonnegative");
        }
        if !(self.dt_e0 > 0.0 && self.dt_e0.is_finite()) {
            return bad("dt_e0 must be positive");
        }
        if self.sample_every == 0 || self.probe_every == 0 {
            return bad("sample_every and probe_every must be at least 1");
        }
        if !self.lambda.is_finite() || !(self.eps0 > 0.0) {
            return bad("lambda must be finite and eps0 positive");
        }
        match self.horizon {
            Horizon::Fixed(t) | Horizon::T2Multiple(t) if !(t > 0.0 && t.is_finite()) => {
                return bad("horizon must be positive")
            }
            _ => {}
        }
        if let Some(g) = self.gamma0 {
            if !(g >= 0.0) {
                return bad("gamma0 must be nonnegative");
            }
        }
        if let XiRecipe::Random {
            norm_y,
            cutoff,
            envelope,
        } = self.data.xi0
        {
            if !(norm_y >= 0.0 && cutoff > 0.0 && envelope > 0.0) {
                return bad("xi0 needs norm_y >= 0, cutoff > 0, envelope > 0");
            }
        }
        if let Some(f) = self.ground_frames {
            if !(f.start_t2_multiple > 0.0) || f.per_decade == 0 {
                return bad("ground_frames needs a positive start and per_decade >= 1");
            }
        }
        self.grid.build()?;
        Ok(())
    }

    /// The configuration with the data amplitude replaced.
    pub fn with_n(&self, n: f64) -> Self {
        let mut c = self.clone();
        c.data.n = n;
        c
    }
}

/// Everything shared by runs on one potential, grid and coupling.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spectral: SpectralData,
    pub gamma0: f64,
    /// `(window margin, reliable)` of the resonance computation, when done here.
    pub resonance: Option<(f64, bool)>,
    pub excited: ExcitedFamily,
    pub ground: GroundFamily,
    pub coefficients: NormalFormCoefficients,
    pub lambda: f64,
}

impl Setup {
    /// Eigenpairs, `γ₀` and both families, sized for the largest of `n_values`.
    pub fn prepare(cfg: &ExperimentConfig, n_values: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid.build()?;
        let v = Potential::sample(cfg.potential, grid)?;
        let s = solve_eigenpairs(&v, 2)?;
        let (gamma0, resonance) = match cfg.gamma0 {
            Some(g) => (g, None),
            None => {
                let r = compute_gamma0(&s)?;
                (r.gamma0, Some((r.window_margin, r.reliable)))
            }
        };
        let n_max = n_values.iter().copied().fold(cfg.data.n, f64::max);
        let d = &cfg.data;
        let m_max = 1.05 * d.y0_ratio.max(1e-3) * n_max;
        let excited = ExcitedFamily::build(&s, cfg.lambda, m_max, m_max / 32.0)?;
        let g_max = 1.1 * (d.x0_ratio.powi(2) + d.y0_ratio.powi(2)).sqrt().max(1e-3) * n_max;
        let ground = GroundFamily::build(&s, cfg.lambda, g_max, g_max / 32.0)?;
        let pert = crate::bound_states::compute_perturbation(&s, cfg.lambda)?;
        let coefficients =
            compute_coefficients(&s, &pert, gamma0, cfg.lambda, &cfg.imaginary_overrides)?;
        Ok(Self {
            spectral: s,
            gamma0,
            resonance,
            excited,
            ground,
            coefficients,
            lambda: cfg.lambda,
        })
    }

    pub fn dt(&self, cfg: &ExperimentConfig) -> f64 {
        cfg.dt_e0 / self.spectral.e0().abs()
    }
}

/// What was checked about the initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub dim: usize,
    /// Nominal amplitude used in the admissibility predicates and time scales.
    pub n: f64,
    pub x0: [f64; 2],
    pub y0: f64,
    /// `‖ψ₀‖_Y`.
    pub psi0_norm_y: f64,
    pub psi0_norm_l2: f64,
    pub xi0_norm_y: f64,
    pub n1: f64,
    pub eps: f64,
    pub predicates: PredicateReport,
    pub admissible: bool,
}

/// `ε = min(ε₀/2, (log(2n/|x₀|))^{-1/2})`.
pub fn epsilon(n: f64, x0: f64, eps0: f64) -> f64 {
    let l = (2.0 * n / x0.abs()).ln();
    if l.is_infinite() {
        return 0.0;
    }
    if l > 0.0 {
        (0.5 * eps0).min(l.powf(-0.5))
    } else {
        0.5 * eps0
    }
}

fn random_continuum(
    s: &SpectralData,
    cutoff: f64,
    envelope: f64,
    seed: u64,
) -> Result<ComplexField> {
    let g = *s.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<C64> = (0..g.len())
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let ops = crate::fourier::ops_for(&g);
    ops.forward(&mut v);
    for (z, k2) in v.iter_mut().zip(ops.k_squared()) {
        if *k2 > cutoff * cutoff {
            *z = C64::new(0.0, 0.0);
        }
    }
    ops.inverse(&mut v);
    for (i, z) in v.iter_mut().enumerate() {
        let r2: f64 = g.position(i).iter().map(|x| x * x).sum();
        *z *= (-0.5 * r2 / (envelope * envelope)).exp();
    }
    project_continuum(&ComplexField::new(g, v)?, s)
}

/// Assembles `ψ₀ = x₀φ₀ + Q₁(y₀) + ξ₀` and evaluates the admissibility predicates.
pub fn build_initial_data(
    cfg: &ExperimentConfig,
    setup: &Setup,
) -> Result<(ComplexField, Certificate)> {
    let s = &setup.spectral;
    let d = &cfg.data;
    let (x0, y0) = (d.x0(), d.y0());
    let (q1, _) = setup.excited.eval_q1(C64::new(y0, 0.0))?;
    let mut psi = q1;
    psi.axpy(x0, s.phi0())?;
    let w = WeightedNormSpec::default();
    let xi = match d.xi0 {
        XiRecipe::None => None,
        XiRecipe::Random {
            norm_y,
            cutoff,
            envelope,
        } => {
            let r = random_continuum(s, cutoff, envelope, cfg.seed)?;
            let ny = r.norm_y(w);
            Some(if ny > 0.0 {
                r.scale_real(norm_y / ny)
            } else {
                r
            })
        }
    };
    let xi_y = xi.as_ref().map(|x| x.norm_y(w)).unwrap_or(0.0);
    if let Some(x) = &xi {
        psi = psi.add(x)?;
    }
    let dc = DataClass {
        n: d.n,
        x0: x0.norm(),
        y0,
        xi0: xi_y,
        lambda: cfg.lambda,
    };
    let predicates = dc.predicates(setup.gamma0);
    let cert = Certificate {
        dim: cfg.grid.dim,
        n: d.n,
        x0: [x0.re, x0.im],
        y0,
        psi0_norm_y: psi.norm_y(w),
        psi0_norm_l2: psi.norm_l2(),
        xi0_norm_y: xi_y,
        n1: dc.n1(),
        eps: epsilon(d.n, x0.norm(), cfg.eps0),
        predicates,
        admissible: predicates.all(),
    };
    if !cert.admissible && d.on_violation == PredicatePolicy::Abort {
        return Err(Error::Predicate(predicates.failures().join(", ")));
    }
    Ok((psi, cert))
}

/// Frame amplitudes sampled along a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSeries {
    pub t: Vec<f64>,
    pub x: Vec<C64>,
    pub y: Vec<C64>,
}

impl AmplitudeSeries {
    pub fn x_abs(&self) -> Vec<f64> {
        self.x.iter().map(|z| z.norm()).collect()
    }

    pub fn y_abs(&self) -> Vec<f64> {
        self.y.iter().map(|z| z.norm()).collect()
    }

    /// Rotating-frame amplitudes `u = e^{i e0 t} x`, `v = e^{i e1 t} y`.
    pub fn reduced(&self, e0: f64, e1: f64) -> ReducedTrajectory {
        ReducedTrajectory {
            t: self.t.clone(),
            u: self
                .t
                .iter()
                .zip(&self.x)
                .map(|(t, x)| C64::from_polar(1.0, e0 * t) * x)
                .collect(),
            v: self
                .t
                .iter()
                .zip(&self.y)
                .map(|(t, y)| C64::from_polar(1.0, e1 * t) * y)
                .collect(),
        }
    }

    pub fn from_probes(probes: &[ProbeRecord]) -> Self {
        Self {
            t: probes.iter().map(|p| p.t).collect(),
            x: probes.iter().map(|p| p.x()).collect(),
            y: probes.iter().map(|p| p.y()).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,re_x,im_x,re_y,im_y,f,g\n");
        for i in 0..self.t.len() {
            let (x, y) = (self.x[i], self.y[i]);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.t[i],
                x.re,
                x.im,
                y.re,
                y.im,
                2.0 * x.norm_sqr(),
                y.norm_sqr()
            ));
        }
        out
    }

    /// Parses the output of [`AmplitudeSeries::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (i, line) in text
            .lines()
            .enumerate()
            .skip(1)
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let v: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("series line {}: {e}", i + 1)))?;
            if v.len() < 5 {
                return Err(Error::Config(format!(
                    "series line {} has {} columns",
                    i + 1,
                    v.len()
                )));
            }
            out.t.push(v[0]);
            out.x.push(C64::new(v[1], v[2]));
            out.y.push(C64::new(v[3], v[4]));
        }
        Ok(out)
    }
}

/// Thresholds for [`detect_regimes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub n: f64,
    pub x0: f64,
    pub y0: f64,
    pub t0: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialLayer {
    /// Range of `|x|/|x₀|` on `[0, t₀]`.
    pub x_ratio: [f64; 2],
    /// Largest `||y|/|y₀| - 1|` on `[0, t₀]`.
    pub y_deviation: f64,
    /// `|x| ∈ [½, 3/2]|x₀|`.
    pub x_ok: bool,
    /// `|y|` within 1% of `|y₀|`.
    pub y_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeTimes {
    pub t0: f64,
    /// First `t ≥ t₀` with `|x| ≥ 0.01 n`.
    pub t1: f64,
    /// First `t` with `|y|² ≤ (εn)²`.
    pub t2: f64,
    /// First `t` with `2|x|² ≥ |y|²`.
    pub crossing: Option<f64>,
    pub initial_layer: InitialLayer,
}

fn interp(t: &[f64], v: &[f64], at: f64) -> f64 {
    match t.iter().position(|&s| s >= at) {
        Some(0) | None if t.is_empty() => f64::NAN,
        Some(0) => v[0],
        None => v[v.len() - 1],
        Some(i) => {
            let w = (at - t[i - 1]) / (t[i] - t[i - 1]);
            v[i - 1] + w * (v[i] - v[i - 1])
        }
    }
}

/// Milestones from sampled `|x(t)|`, `|y(t)|`, with linear interpolation between samples.
pub fn detect_regimes(
    t: &[f64],
    x_abs: &[f64],
    y_abs: &[f64],
    th: &RegimeThresholds,
) -> Result<RegimeTimes> {
    if t.len() < 2 || x_abs.len() != t.len() || y_abs.len() != t.len() {
        return Err(Error::InsufficientData(
            "need at least two aligned samples".into(),
        ));
    }
    let mut xr = [f64::INFINITY, f64::NEG_INFINITY];
    let mut ydev: f64 = 0.0;
    let mut layer = |x: f64, y: f64| {
        let r = x / th.x0;
        xr[0] = xr[0].min(r);
        xr[1] = xr[1].max(r);
        ydev = ydev.max((y / th.y0 - 1.0).abs());
    };
    for i in 0..t.len() {
        if t[i] <= th.t0 {
            layer(x_abs[i], y_abs[i]);
        }
    }
    layer(interp(t, x_abs, th.t0), interp(t, y_abs, th.t0));
    let initial_layer = InitialLayer {
        x_ratio: xr,
        y_deviation: ydev,
        x_ok: xr[0] >= 0.5 && xr[1] <= 1.5,
        y_ok: ydev <= 0.01,
    };

    let level = 0.01 * th.n;
    let start = t
        .iter()
        .position(|&s| s >= th.t0)
        .ok_or_else(|| Error::InsufficientData(format!("samples end before t0 = {}", th.t0)))?;
    let mut t1 = None;
    if interp(t, x_abs, th.t0) >= level {
        t1 = Some(th.t0);
    } else {
        for i in start.max(1)..t.len() {
            if x_abs[i] >= level {
                let a = x_abs[i - 1];
                let w = if x_abs[i] > a {
                    (level - a) / (x_abs[i] - a)
                } else {
                    1.0
                };
                t1 = Some((t[i - 1] + w * (t[i] - t[i - 1])).max(th.t0));
                break;
            }
        }
    }
    let t1 = t1.ok_or_else(|| Error::InsufficientData("|x| never reached 0.01 n".into()))?;
    let g_level = (th.eps * th.n).powi(2);
    let g: Vec<f64> = y_abs.iter().map(|y| y * y).collect();
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let lvl = vec![-g_level; g.len()];
    let t2 = first_crossing(t, &neg, &lvl).ok_or_else(|| {
        Error::InsufficientData(format!("g never fell below (εn)² = {g_level:.3e}"))
    })?;
    let f: Vec<f64> = x_abs.iter().map(|x| 2.0 * x * x).collect();
    let crossing = first_crossing(t, &f, &g);
    Ok(RegimeTimes {
        t0: th.t0,
        t1,
        t2,
        crossing,
        initial_layer,
    })
}

/// Rate coefficient of `f' = 2γ g² f` fitted as the slope of `ln f` against
/// `τ(t) = ∫₀ᵗ 2g²`, over the samples with `f ≤ stop·(f + g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub gamma_fit: f64,
    /// `gamma_fit / (λ²γ₀)`.
    pub ratio: f64,
    /// Slope of `ln f` against `t` over the same window divided by `2λ²γ₀g₀²`.
    pub frozen_ratio: f64,
    pub window: [f64; 2],
    pub points: usize,
}

pub fn growth_fit(series: &AmplitudeSeries, gamma: f64, stop: f64) -> Result<GrowthFit> {
    let f: Vec<f64> = series.x.iter().map(|x| 2.0 * x.norm_sqr()).collect();
    let g: Vec<f64> = series.y.iter().map(|y| y.norm_sqr()).collect();
    let mut tau = vec![0.0; f.len()];
    for i in 1..f.len() {
        let dt = series.t[i] - series.t[i - 1];
        tau[i] = tau[i - 1] + dt * (g[i - 1] * g[i - 1] + g[i] * g[i]);
    }
    let end = (0..f.len())
        .find(|&i| f[i] > stop * (f[i] + g[i]))
        .unwrap_or(f.len());
    if end < 8 {
        return Err(Error::InsufficientData(format!(
            "{end} samples in the early window"
        )));
    }
    let lf: Vec<f64> = f[..end].iter().map(|v| v.ln()).collect();
    let a = fit::linear(&tau[..end], &lf)?;
    let b = fit::linear(&series.t[..end], &lf)?;
    Ok(GrowthFit {
        gamma_fit: a.slope,
        ratio: a.slope / gamma,
        frozen_ratio: b.slope / (2.0 * gamma * g[0] * g[0]),
        window: [series.t[0], series.t[end - 1]],
        points: end,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservationSummary {
    pub mass_drift_rate: f64,
    pub energy_drift_rate: f64,
    pub max_mass_deviation: f64,
    pub max_energy_deviation: f64,
    pub absorbed_mass: f64,
}

impl ConservationSummary {
    pub fn from_ledger(l: &ConservedLedger) -> Self {
        Self {
            mass_drift_rate: l.mass_drift_rate(),
            energy_drift_rate: l.energy_drift_rate(),
            max_mass_deviation: l.max_mass_deviation(),
            max_energy_deviation: l.max_energy_deviation(),
            absorbed_mass: l.absorbed_mass.last().copied().unwrap_or(0.0),
        }
    }

    pub fn passes(&self) -> bool {
        self.mass_drift_rate <= MASS_DRIFT_GATE && self.energy_drift_rate <= ENERGY_DRIFT_GATE
    }
}

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn within(name: &str, measured: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let passed = measured.is_finite()
            && lower.is_none_or(|l| measured >= l)
            && upper.is_none_or(|u| measured <= u);
        Self {
            name: name.into(),
            measured,
            lower,
            upper,
            passed,
        }
    }

    pub fn describe(&self) -> String {
        let lo = self
            .lower
            .map(|v| format!("{v:.4e} <= "))
            .unwrap_or_default();
        let hi = self
            .upper
            .map(|v| format!(" <= {v:.4e}"))
            .unwrap_or_default();
        format!(
            "{} {}: {lo}{:.6e}{hi}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured
        )
    }
}

/// Sup-norm residual summary of the normal form along a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub window: f64,
    pub sup_gu_rel: f64,
    pub sup_gv: f64,
    pub sup_gu_modulus_rel: f64,
    pub sup_gv_modulus: f64,
    pub sup_u_dev_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub code_version: String,
    pub dim: usize,
    pub gamma0: f64,
    pub certificate: Certificate,
    pub prediction: Option<RegimePrediction>,
    /// `t₂` and the `f = g` crossing of the `(f, g)` system from the same data.
    pub predicted_t2: Option<f64>,
    pub predicted_crossing: Option<f64>,
    pub regimes: Option<RegimeTimes>,
    pub growth: Option<GrowthFit>,
    pub relaxation: Option<RelaxationFit>,
    pub residuals: Option<ResidualSummary>,
    pub conservation: ConservationSummary,
    pub horizon: f64,
    pub steps: usize,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub probes: Vec<ProbeRecord>,
    pub series: AmplitudeSeries,
    pub ground: Vec<GroundSample>,
    /// Unwrapped `arg (φ0, ψ)` from the first ground frame on.
    pub phase: PhaseTrack,
    pub ledger: ConservedLedger,
    pub final_state: ComplexField,
}

/// Closed-form `(t₂, crossing)` of the `(f, g)` system.
pub fn predicted_times(
    f0: f64,
    g0: f64,
    gamma: f64,
    n: f64,
    eps: f64,
) -> (Option<f64>, Option<f64>) {
    let s = f0 + g0;
    if !(gamma > 0.0 && f0 > 0.0 && g0 > 0.0) {
        return (None, None);
    }
    let h2 = (eps * n).powi(2) / s;
    let t2 = if h2 < g0 / s {
        fg_time_between(g0 / s, h2, gamma, s).ok()
    } else {
        Some(0.0)
    };
    (t2, fg_crossing_time(f0, g0, gamma).ok())
}

/// Smoothing window for residual measurement: 20 periods of `|e1 - e0|`.
pub fn residual_window(s: &SpectralData) -> f64 {
    20.0 * std::f64::consts::TAU / (s.e1() - s.e0()).abs()
}

/// Runs one experiment and analyses it.
pub fn run_experiment(cfg: &ExperimentConfig, setup: &Setup) -> Result<RunOutput> {
    let s = &setup.spectral;
    let (psi0, cert) = build_initial_data(cfg, setup)?;
    let d = &cfg.data;
    let gamma = setup.coefficients.growth();
    let (x0, y0) = (d.x0().norm(), d.y0());
    let dc = DataClass {
        n: d.n,
        x0,
        y0,
        xi0: cert.xi0_norm_y,
        lambda: cfg.lambda,
    };
    let prediction = regime_prediction(&dc, setup.gamma0, cfg.eps0).ok();
    let (predicted_t2, predicted_crossing) =
        predicted_times(2.0 * x0 * x0, y0 * y0, gamma, d.n, cert.eps);
    let horizon = match cfg.horizon {
        Horizon::Fixed(t) => t,
        Horizon::T2Multiple(k) => {
            k * predicted_t2
                .ok_or_else(|| Error::Config("no t2 prediction for a t2-relative horizon".into()))?
        }
    };
    let ecfg = EvolutionConfig {
        dt: setup.dt(cfg),
        horizon,
        stride: cfg.sample_every,
        lambda: cfg.lambda,
        absorber: cfg.absorber,
    };
    ecfg.validate(s.e0())?;
    let total = ecfg.steps();
    let mut ev = Evolver::new(s.potential(), &psi0, &ecfg)?;
    let mut ledger = ConservedLedger::default();
    let mut series = AmplitudeSeries::default();
    let mut probes = Vec::new();
    let mut ground = Vec::new();
    let frames = cfg.ground_frames.map(|f| {
        let start = f.start_t2_multiple * predicted_t2.unwrap_or(horizon);
        (f, start)
    });
    let mut next_frame = frames.map(|(_, s)| s).unwrap_or(f64::INFINITY);
    let mut e_guess = None;
    let mut phase = PhaseTrack::default();
    let mut count = 0usize;
    loop {
        let t = ev.time();
        let psi = ev.state();
        let y = s.phi1().inner(&psi)?;
        let c0 = s.phi0().inner(&psi)?;
        let x = if y.norm() <= setup.excited.m_max() {
            let (q1, _) = setup.excited.eval_q1(y)?;
            c0 - s.phi0().inner(&q1)?
        } else {
            return Err(Error::OutOfRange {
                value: y.norm(),
                min: 0.0,
                max: setup.excited.m_max(),
            });
        };
        series.t.push(t);
        series.x.push(x);
        series.y.push(y);
        let last = ev.steps() >= total;
        if count.is_multiple_of(cfg.probe_every) || last {
            ev.check_finite()?;
            ev.record(&mut ledger);
            probes.push(probe(&psi, t, s, &setup.excited, cfg.lambda, None)?);
        }
        if let Some((f, start)) = frames {
            if t >= next_frame {
                let guess = match e_guess {
                    Some(e) => e,
                    None => {
                        let m = x.norm().min(setup.ground.mass_max());
                        setup.ground.interpolate_mass(m)?.1
                    }
                };
                let opts = SplitOptions {
                    window_points: f.window_points,
                };
                let fr = decompose_ground_frame(&psi, t, s, &setup.ground, guess, opts)?;
                e_guess = Some(fr.energy);
                ground.push(fr.sample());
                let ratio = 10f64.powf(1.0 / f.per_decade as f64);
                while next_frame <= t {
                    next_frame = if next_frame < start {
                        start
                    } else {
                        next_frame * ratio
                    };
                }
            }
            if let Some(e) = e_guess {
                phase.push_wrapped(t, c0.arg(), e);
            }
        }
        if last {
            break;
        }
        ev.advance(cfg.sample_every.min(total - ev.steps()));
        if let Some(p) = cfg.parity {
            ev.project_parity(p);
        }
        count += 1;
    }
    let final_state = ev.state();
    let conservation = ConservationSummary::from_ledger(&ledger);

    let t0 = prediction.map(|p| p.t0).unwrap_or(0.0);
    let th = RegimeThresholds {
        n: d.n,
        x0,
        y0,
        t0,
        eps: cert.eps,
    };
    let regimes = detect_regimes(&series.t, &series.x_abs(), &series.y_abs(), &th).ok();
    let growth = if gamma > 0.0 && x0 > 0.0 {
        growth_fit(&series, gamma, 0.3).ok()
    } else {
        None
    };
    let relaxation = match (&regimes, ground.len()) {
        (Some(r), k) if k >= 4 => {
            let ta = ground.iter().map(|g| g.t).find(|&t| t >= r.t2);
            let tb = ground.last().map(|g| g.t);
            match (ta, tb) {
                (Some(a), Some(b)) if b >= 10.0 * a => {
                    fit_relaxation(&ground, Some(&phase), [a, b]).ok()
                }
                _ => None,
            }
        }
        _ => None,
    };
    let window = residual_window(s);
    let mut reduced = series.reduced(s.e0(), s.e1());
    let k = reduced.t.len();
    if k >= 3 && ev.steps() % cfg.sample_every != 0 {
        reduced.t.pop();
        reduced.u.pop();
        reduced.v.pop();
    }
    let residuals = measure_nf_residuals(&reduced, &setup.coefficients, window)
        .ok()
        .map(|r| ResidualSummary {
            window,
            sup_gu_rel: r.sup_gu_rel(),
            sup_gv: r.sup_gv(),
            sup_gu_modulus_rel: r.sup_gu_modulus_rel(),
            sup_gv_modulus: r.sup_gv_modulus(),
            sup_u_dev_rel: r.sup_u_dev_rel(),
        });

    let mut checks = vec![
        Check::within(
            "mass drift per unit time",
            conservation.mass_drift_rate,
            None,
            Some(MASS_DRIFT_GATE),
        ),
        Check::within(
            "energy drift per unit time",
            conservation.energy_drift_rate,
            None,
            Some(ENERGY_DRIFT_GATE),
        ),
    ];
    if let (Some(r), Some(p)) = (&regimes, &prediction) {
        checks.push(Check::within(
            "t1 below its bound",
            r.t1,
            None,
            Some(p.t1_bound),
        ));
    }
    let report = RunReport {
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
        dim: cfg.grid.dim,
        gamma0: setup.gamma0,
        certificate: cert,
        prediction,
        predicted_t2,
        predicted_crossing,
        regimes,
        growth,
        relaxation,
        residuals,
        conservation,
        horizon,
        steps: ev.steps(),
        checks: std::mem::take(&mut checks),
    };
    let out = RunOutput {
        report,
        probes,
        series,
        ground,
        phase,
        ledger,
        final_state,
    };
    if let Some(o) = &cfg.output {
        write_outputs(Path::new(&o.dir), &out, o.snapshot)?;
    }
    Ok(out)
}

/// Writes `report.json`, `probes.ndjson`, `series.csv`, `ground.json`,
/// `phase.json` and, optionally, `final.snap`.
pub fn write_outputs(dir: &Path, out: &RunOutput, snapshot: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&out.report)?,
    )?;
    std::fs::write(
        dir.join("probes.ndjson"),
        crate::decomposition::to_ndjson(&out.probes)?,
    )?;
    std::fs::write(dir.join("series.csv"), out.series.to_csv())?;
    std::fs::write(dir.join("ground.json"), serde_json::to_string(&out.ground)?)?;
    std::fs::write(dir.join("phase.json"), serde_json::to_string(&out.phase)?)?;
    if snapshot {
        crate::snapshot::write(dir.join("final.snap"), &out.final_state)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub n: Vec<f64>,
    pub members: Vec<RunReport>,
    /// `log t₂` against `log n`.
    pub t2_fit: LinearFit,
    pub growth_ratios: Vec<f64>,
    /// `log sup|g_u|/|u|`, `log sup|g_v|` (modulus parts) and `log sup|u - ů|/|u|` against `log n`.
    pub gu_fit: Option<LinearFit>,
    pub gv_fit: Option<LinearFit>,
    pub u_dev_fit: Option<LinearFit>,
    pub checks: Vec<Check>,
}

/// Runs the template at each `n` (in parallel) and fits the scaling laws.
pub fn run_ladder(
    template: &ExperimentConfig,
    n_values: &[f64],
    setup: &Setup,
) -> Result<(LadderReport, Vec<RunOutput>)> {
    let lo = n_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = n_values.iter().copied().fold(0.0, f64::max);
    if n_values.len() < 3 || !(hi >= 2.0 * lo) {
        return Err(Error::InsufficientData(format!(
            "a ladder needs at least 3 amplitudes spanning a factor 2, got {n_values:?}"
        )));
    }
    let outs: Vec<RunOutput> = n_values
        .par_iter()
        .map(|&n| {
            let mut c = template.with_n(n);
            if let Some(o) = c.output.as_mut() {
                o.dir = format!("{}/n{n}", o.dir);
            }
            run_experiment(&c, setup)
        })
        .collect::<Result<_>>()?;
    for (o, n) in outs.iter().zip(n_values) {
        if !o.report.conservation.passes() {
            return Err(Error::InvalidArgument(format!(
                "ladder member n = {n} failed the conservation gates"
            )));
        }
    }
    let t2: Vec<f64> = outs
        .iter()
        .zip(n_values)
        .map(|(o, n)| {
            o.report
                .regimes
                .map(|r| r.t2)
                .ok_or_else(|| Error::InsufficientData(format!("n = {n} did not reach t2")))
        })
        .collect::<Result<_>>()?;
    let t2_fit = fit::log_log(n_values, &t2)?;
    let growth_ratios: Vec<f64> = outs
        .iter()
        .map(|o| o.report.growth.map(|g| g.ratio).unwrap_or(f64::NAN))
        .collect();
    let res: Option<Vec<ResidualSummary>> = outs.iter().map(|o| o.report.residuals).collect();
    let (gu_fit, gv_fit, u_dev_fit) = match res {
        Some(r) => (
            fit::log_log(
                n_values,
                &r.iter().map(|r| r.sup_gu_modulus_rel).collect::<Vec<_>>(),
            )
            .ok(),
            fit::log_log(
                n_values,
                &r.iter().map(|r| r.sup_gv_modulus).collect::<Vec<_>>(),
            )
            .ok(),
            fit::log_log(
                n_values,
                &r.iter().map(|r| r.sup_u_dev_rel).collect::<Vec<_>>(),
            )
            .ok(),
        ),
        None => (None, None, None),
    };
    let mut checks = vec![Check::within(
        "log t2 vs log n slope",
        t2_fit.slope,
        Some(-4.5),
        Some(-3.5),
    )];
    for (r, n) in growth_ratios.iter().zip(n_values) {
        checks.push(Check::within(
            &format!("growth ratio n={n}"),
            *r,
            Some(0.8),
            Some(1.1),
        ));
    }
    let report = LadderReport {
        n: n_values.to_vec(),
        members: outs.iter().map(|o| o.report.clone()).collect(),
        t2_fit,
        growth_ratios,
        gu_fit,
        gv_fit,
        u_dev_fit,
        checks,
    };
    Ok((report, outs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            potential: PotentialKind::Gaussian {
                depth: 8.0,
                width: 1.0,
            },
            grid: GridSpec {
                dim: 1,
                n: 256,
                half_width: 24.0,
            },
            lambda: 1.0,
            data: DataSpec {
                n: 0.05,
                x0_ratio: 0.3,
                x0_phase: 0.0,
                y0_ratio: 0.9,
                xi0: XiRecipe::None,
                on_violation: PredicatePolicy::Abort,
            },
            dt_e0: 0.05,
            horizon: Horizon::Fixed(5.0),
            sample_every: 5,
            probe_every: 4,
            absorber: Some(AbsorberSpec::new(6.0)),
            eps0: 0.5,
            seed: 7,
            gamma0: Some(0.004),
            ground_frames: None,
            parity: None,
            imaginary_overrides: ImaginaryOverrides::default(),
            output: None,
        }
    }

    #[test]
    fn config_round_trip_and_hash() {
        let mut c = small_config();
        c.data.xi0 = XiRecipe::Random {
            norm_y: 1e-9,
            cutoff: 2.0,
            envelope: 3.0,
        };
        c.data.x0_phase = 0.1 + 0.2;
        let text = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.data.x0_phase.to_bits(), c.data.x0_phase.to_bits());
        assert_ne!(c.with_n(0.04).hash(), c.hash());
        assert!(ExperimentConfig::from_json(&text.replace("\"seed\"", "\"sed\"")).is_err());
    }

    #[test]
    fn n1_formula() {
        let dc = DataClass {
            n: 5.0,
            x0: 3.0,
            y0: 4.0,
            xi0: 0.0,
            lambda: 1.0,
        };
        assert!((dc.n1() - 17f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn initial_data_certificates() {
        let c = small_config();
        let setup = Setup::prepare(&c, &[]).unwrap();
        let (psi, cert) = build_initial_data(&c, &setup).unwrap();
        assert!(cert.admissible && cert.predicates.all());
        assert!((s_inner(&setup, &psi, 0) - 0.015).abs() < 1e-3);
        assert!(cert.psi0_norm_y > cert.psi0_norm_l2);

        let mut pure = c.clone();
        pure.data.x0_ratio = 0.0;
        assert!(matches!(
            build_initial_data(&pure, &setup),
            Err(Error::Predicate(_))
        ));
        pure.data.on_violation = PredicatePolicy::Warn;
        let (_, cert) = build_initial_data(&pure, &setup).unwrap();
        assert!(!cert.predicates.x_not_small && !cert.admissible);

        let mut noisy = c.clone();
        noisy.data.xi0 = XiRecipe::Random {
            norm_y: 1e-8,
            cutoff: 3.0,
            envelope: 4.0,
        };
        let (_, cert) = build_initial_data(&noisy, &setup).unwrap();
        assert!((cert.xi0_norm_y - 1e-8).abs() < 1e-14 && cert.admissible);
    }

    fn s_inner(setup: &Setup, psi: &ComplexField, k: usize) -> f64 {
        setup.spectral.modes()[k].inner(psi).unwrap().norm()
    }

    #[test]
    fn detect_synthetic_crossings() {
        let (n, x0, gam) = (0.05, 1e-4, 0.3);
        let t: Vec<f64> = (0..400).map(|i| i as f64 * 0.1).collect();
        let x: Vec<f64> = t.iter().map(|t| x0 * (gam * t).exp()).collect();
        let y: Vec<f64> = t.iter().map(|t| 0.9 * n * (-0.05 * t).exp()).collect();
        let th = RegimeThresholds {
            n,
            x0,
            y0: 0.9 * n,
            t0: 0.05,
            eps: 0.25,
        };
        let r = detect_regimes(&t, &x, &y, &th).unwrap();
        let exact = (0.01 * n / x0).ln() / gam;
        assert!((r.t1 - exact).abs() < 0.1);
        let t2 = (0.9f64 / 0.25).ln() / 0.05;
        assert!((r.t2 - t2).abs() < 0.1);
        assert!(r.initial_layer.x_ok && r.initial_layer.y_ok);
        let short = detect_regimes(&t[..10], &x[..10], &y[..10], &th);
        assert!(matches!(short, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn short_run_is_deterministic() {
        let c = small_config();
        let setup = Setup::prepare(&c, &[]).unwrap();
        let a = run_experiment(&c, &setup).unwrap();
        let b = run_experiment(&c, &setup).unwrap();
        let ta = crate::decomposition::to_ndjson(&a.probes).unwrap();
        let tb = crate::decomposition::to_ndjson(&b.probes).unwrap();
        assert_eq!(ta, tb);
        assert!(a.report.conservation.passes());
        assert_eq!(a.report.config_hash, c.hash());
        assert!(a.probes.len() >= 3 && a.series.t.len() > a.probes.len());
        let back = AmplitudeSeries::from_csv(&a.series.to_csv()).unwrap();
        assert_eq!(back, a.series);
    }

    #[test]
    fn ladder_needs_three_points() {
        let c = small_config();
        let setup = Setup::prepare(&c, &[]).unwrap();
        assert!(matches!(
            run_ladder(&c, &[0.05], &setup),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            run_ladder(&c, &[0.03, 0.04, 0.05], &setup),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn epsilon_formula() {
        assert_eq!(epsilon(0.05, 0.015, 0.5), 0.25);
        let e = epsilon(0.05, 0.05 * 2.0 * (-30.0f64).exp(), 1.0);
        assert!((e - 30f64.powf(-0.5)).abs() < 1e-12);
        assert_eq!(epsilon(0.05, 0.0, 0.5), 0.0);
    }
}
