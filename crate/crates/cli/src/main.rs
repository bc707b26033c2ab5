use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nlsrelax::bound_states::{ExcitedFamily, GroundFamily, GroundNodeSummary};
use nlsrelax::dynamics::{linear_decay_probe, AbsorberSpec, DecayProbe};
use nlsrelax::experiment::{
    residual_window, run_experiment, run_ladder, write_outputs, AmplitudeSeries, ExperimentConfig,
    OutputSpec, RunReport, Setup,
};
use nlsrelax::fit::LinearFit;
use nlsrelax::ground_frame::{fit_relaxation, GroundSample, PhaseTrack, RelaxationFit};
use nlsrelax::normal_form::{
    integrate_fg, integrate_nf, measure_nf_residuals, regime_prediction, DataClass,
    NormalFormCoefficients, RegimePrediction,
};
use nlsrelax::spectral::{
    compute_gamma0, project_continuum, solve_eigenpairs, Potential, ResonanceData,
};
use nlsrelax::{ComplexField, SpatialGrid, C64};

#[derive(Parser)]
#[command(
    name = "nlsrelax",
    version,
    about = "Resonance-driven relaxation experiments for the cubic NLS with a potential"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lowest eigenpairs of -Δ + V on the configured grid.
    Spectrum {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2)]
        modes: usize,
    },
    /// Tabulate the ground and excited nonlinear bound-state families.
    BoundStates {
        #[arg(short, long)]
        config: PathBuf,
        /// Largest mass tabulated; defaults to the configured data amplitude.
        #[arg(long)]
        n_max: Option<f64>,
        #[arg(long, default_value_t = 32)]
        points: usize,
    },
    /// Fermi golden rule coefficient of the configured potential.
    Gamma0 {
        #[arg(short, long)]
        config: PathBuf,
        /// Also recompute on a grid with twice the points and report the change.
        #[arg(long)]
        refine: bool,
    },
    /// Run one full simulation and write its outputs.
    Evolve {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Exit with status 2 when any check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Normal-form coefficients, regime predictions and the reduced f-g flow.
    Normalform {
        #[arg(short, long)]
        config: PathBuf,
        /// Integrate the f-g system up to this time; defaults to three crossing times.
        #[arg(long)]
        t_end: Option<f64>,
        /// Write the f-g trajectory as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare a finished run against the reduced systems.
    Compare {
        #[arg(short, long)]
        config: PathBuf,
        /// Directory written by `evolve`.
        #[arg(short, long)]
        run: PathBuf,
    },
    /// Fit decay exponents.
    FitDecay {
        #[command(subcommand)]
        mode: FitDecay,
    },
    /// Run the configuration at several amplitudes and fit the scaling laws.
    Ladder {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Subcommand)]
enum FitDecay {
    /// Power-law fit of the ground-frame distance of a finished run.
    Relax {
        #[arg(short, long)]
        run: PathBuf,
        /// Fit window; defaults to [t2, last frame].
        #[arg(long, num_args = 2)]
        window: Option<Vec<f64>>,
    },
    /// Linear evolution of a Gaussian bump and its sup and local decay rates.
    Linear(LinearArgs),
}

#[derive(Args)]
struct LinearArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Offset of the bump along the first axis.
    #[arg(long, default_value_t = 0.0)]
    center: f64,
    /// Remove the bound-state components first.
    #[arg(long)]
    continuum: bool,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, num_args = 2, default_values_t = [1.0, 100.0])]
    times: Vec<f64>,
    #[arg(long, default_value_t = 21)]
    samples: usize,
    #[arg(long, num_args = 2)]
    window: Option<Vec<f64>>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Spectrum { config, modes } => spectrum(&load(&config)?, modes)?,
        Command::BoundStates {
            config,
            n_max,
            points,
        } => bound_states(&load(&config)?, n_max, points)?,
        Command::Gamma0 { config, refine } => gamma0(&load(&config)?, refine)?,
        Command::Evolve {
            config,
            out,
            strict,
        } => return evolve(load(&config)?, out, strict),
        Command::Normalform { config, t_end, csv } => normalform(&load(&config)?, t_end, csv)?,
        Command::Compare { config, run } => compare(&load(&config)?, &run)?,
        Command::FitDecay {
            mode: FitDecay::Relax { run, window },
        } => fit_relax(&run, window)?,
        Command::FitDecay {
            mode: FitDecay::Linear(args),
        } => fit_linear(&args)?,
        Command::Ladder {
            config,
            n,
            out,
            strict,
        } => return ladder(load(&config)?, &n, out, strict),
    }
    Ok(0)
}

#[derive(Serialize)]
struct SpectrumReport {
    energies: Vec<f64>,
    residuals: Vec<f64>,
    bound_count: usize,
    gap: f64,
    resonant: bool,
    resonance_energy: f64,
}

fn spectrum(cfg: &ExperimentConfig, modes: usize) -> Result<()> {
    let v = Potential::sample(cfg.potential, cfg.grid.build()?)?;
    let s = solve_eigenpairs(&v, modes.max(2))?;
    emit(&SpectrumReport {
        energies: s.energies().to_vec(),
        residuals: s.residuals().to_vec(),
        bound_count: s.bound_count(),
        gap: s.gap(),
        resonant: s.resonant(),
        resonance_energy: s.resonance_energy(),
    })
}

#[derive(Serialize)]
struct ExcitedNode {
    m: f64,
    energy: f64,
    residual: f64,
}

#[derive(Serialize)]
struct BoundStatesReport {
    lambda: f64,
    e0: f64,
    e1: f64,
    ground: Vec<GroundNodeSummary>,
    excited: Vec<ExcitedNode>,
    /// `E1(m) ≈ e1 + e12 m² + e14 m⁴`.
    e12: f64,
    e14: f64,
}

fn bound_states(cfg: &ExperimentConfig, n_max: Option<f64>, points: usize) -> Result<()> {
    if points < 2 {
        bail!("--points must be at least 2");
    }
    let v = Potential::sample(cfg.potential, cfg.grid.build()?)?;
    let s = solve_eigenpairs(&v, 2)?;
    let n_max = n_max.unwrap_or(cfg.data.n);
    let step = n_max / points as f64;
    let ground = GroundFamily::build(&s, cfg.lambda, n_max, step)?;
    let excited = ExcitedFamily::build(&s, cfg.lambda, n_max, step)?;
    emit(&BoundStatesReport {
        lambda: cfg.lambda,
        e0: s.e0(),
        e1: s.e1(),
        ground: ground.summary(),
        excited: excited
            .nodes()
            .iter()
            .map(|e| ExcitedNode {
                m: e.m,
                energy: e.energy,
                residual: e.residual,
            })
            .collect(),
        e12: excited.e12(),
        e14: excited.e14(),
    })
}

#[derive(Serialize)]
struct Gamma0Report {
    #[serde(flatten)]
    data: ResonanceData,
    refined_gamma0: Option<f64>,
    refinement_change: Option<f64>,
}

fn gamma0(cfg: &ExperimentConfig, refine: bool) -> Result<()> {
    let grid = cfg.grid.build()?;
    let s = solve_eigenpairs(&Potential::sample(cfg.potential, grid)?, 2)?;
    let data = compute_gamma0(&s)?;
    let (refined_gamma0, refinement_change) = if refine {
        let fine = SpatialGrid::new(grid.dim(), 2 * grid.n(), grid.half_width())?;
        let g = compute_gamma0(&solve_eigenpairs(
            &Potential::sample(cfg.potential, fine)?,
            2,
        )?)?
        .gamma0;
        (Some(g), Some((g / data.gamma0 - 1.0).abs()))
    } else {
        (None, None)
    };
    emit(&Gamma0Report {
        data,
        refined_gamma0,
        refinement_change,
    })
}

fn print_checks(report: &RunReport) {
    for c in &report.checks {
        eprintln!("{}", c.describe());
    }
}

fn evolve(mut cfg: ExperimentConfig, out: Option<PathBuf>, strict: bool) -> Result<i32> {
    if let Some(dir) = out {
        let snapshot = cfg.output.as_ref().is_some_and(|o| o.snapshot);
        cfg.output = Some(OutputSpec {
            dir: dir.to_string_lossy().into_owned(),
            snapshot,
        });
    }
    let setup = Setup::prepare(&cfg, &[])?;
    let result = run_experiment(&cfg, &setup)?;
    if let Some(o) = &cfg.output {
        write_outputs(Path::new(&o.dir), &result, o.snapshot)?;
        std::fs::write(Path::new(&o.dir).join("config.json"), cfg.to_json()?)?;
    }
    print_checks(&result.report);
    emit(&result.report)?;
    Ok(if strict && !result.report.passed() {
        2
    } else {
        0
    })
}

#[derive(Serialize)]
struct NormalFormReport {
    coefficients: NormalFormCoefficients,
    structure_ok: bool,
    growth: f64,
    prediction: Option<RegimePrediction>,
    f0: f64,
    g0: f64,
    fg_crossing: Option<f64>,
}

fn normalform(cfg: &ExperimentConfig, t_end: Option<f64>, csv: Option<PathBuf>) -> Result<()> {
    let setup = Setup::prepare(cfg, &[])?;
    let co = setup.coefficients.clone();
    let d = &cfg.data;
    let (x0, y0) = (d.x0().norm(), d.y0());
    let (f0, g0) = (2.0 * x0 * x0, y0 * y0);
    let dc = DataClass {
        n: d.n,
        x0,
        y0,
        xi0: 0.0,
        lambda: cfg.lambda,
    };
    let prediction = regime_prediction(&dc, setup.gamma0, cfg.eps0).ok();
    let closed = nlsrelax::normal_form::fg_crossing_time(f0, g0, co.growth()).ok();
    let t_end = match (t_end, closed) {
        (Some(t), _) => t,
        (None, Some(c)) => 3.0 * c,
        (None, None) => bail!("no f-g crossing for these data; pass --t-end"),
    };
    let fg = integrate_fg(f0, g0, co.growth(), t_end, None)?;
    if let Some(path) = csv {
        let mut text = String::from("t,f,g\n");
        for i in 0..fg.t.len() {
            text.push_str(&format!("{},{},{}\n", fg.t[i], fg.f[i], fg.g[i]));
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&NormalFormReport {
        structure_ok: co.check_structure().is_ok(),
        growth: co.growth(),
        coefficients: co,
        prediction,
        f0,
        g0,
        fg_crossing: fg.crossing_time(),
    })
}

#[derive(Serialize)]
struct CompareReport {
    samples: usize,
    pde_crossing: Option<f64>,
    fg_crossing: Option<f64>,
    nf_crossing: Option<f64>,
    crossing_relative_error: Option<f64>,
    residual_window: f64,
    sup_gu_modulus_rel: Option<f64>,
    sup_gv_modulus: Option<f64>,
    sup_u_dev_rel: Option<f64>,
}

fn compare(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    let path = run.join("series.csv");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut series = AmplitudeSeries::from_csv(&text)?;
    let n = series.t.len();
    // A run ending between samples leaves a short final interval.
    if n > 2
        && ((series.t[n - 1] - series.t[n - 2]) / (series.t[1] - series.t[0]) - 1.0).abs() > 1e-6
    {
        series.t.pop();
        series.x.pop();
        series.y.pop();
    }
    if series.t.len() < 2 {
        bail!("{} holds fewer than two samples", path.display());
    }
    let setup = Setup::prepare(cfg, &[])?;
    let s = &setup.spectral;
    let co = &setup.coefficients;
    let reduced = series.reduced(s.e0(), s.e1());
    let pde = reduced.crossing_time();
    let (u0, v0) = (reduced.u[0], reduced.v[0]);
    let t_end = *series.t.last().unwrap() - series.t[0];
    let fg = integrate_fg(2.0 * u0.norm_sqr(), v0.norm_sqr(), co.growth(), t_end, None)?;
    let fg_crossing = fg.crossing_time().map(|t| t + series.t[0]);
    let nf_dt = nlsrelax::normal_form::default_nf_dt(co, u0, v0);
    let nf_crossing = integrate_nf(u0, v0, co, t_end, nf_dt)?
        .crossing_time()
        .map(|t| t + series.t[0]);
    let window = residual_window(s);
    let residuals = measure_nf_residuals(&reduced, co, window).ok();
    emit(&CompareReport {
        samples: series.t.len(),
        pde_crossing: pde,
        fg_crossing,
        nf_crossing,
        crossing_relative_error: pde.zip(fg_crossing).map(|(a, b)| (a / b - 1.0).abs()),
        residual_window: window,
        sup_gu_modulus_rel: residuals.as_ref().map(|r| r.sup_gu_modulus_rel()),
        sup_gv_modulus: residuals.as_ref().map(|r| r.sup_gv_modulus()),
        sup_u_dev_rel: residuals.as_ref().map(|r| r.sup_u_dev_rel()),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn fit_relax(run: &Path, window: Option<Vec<f64>>) -> Result<()> {
    let samples: Vec<GroundSample> = read_json(&run.join("ground.json"))?;
    let phase: Option<PhaseTrack> = run
        .join("phase.json")
        .exists()
        .then(|| read_json(&run.join("phase.json")))
        .transpose()?;
    let last = samples
        .last()
        .map(|g| g.t)
        .context("no ground-frame samples in the run")?;
    let window = match window {
        Some(w) => [w[0], w[1]],
        None => {
            let report: RunReport = read_json(&run.join("report.json"))?;
            let t2 = report
                .regimes
                .map(|r| r.t2)
                .context("the run never reached t2; pass --window")?;
            let start = samples
                .iter()
                .map(|g| g.t)
                .find(|t| *t >= t2)
                .context("no frames after t2")?;
            [start, last]
        }
    };
    let fit: RelaxationFit =
        fit_relaxation(&samples, phase.as_ref().filter(|p| !p.t.is_empty()), window)?;
    emit(&fit)
}

#[derive(Serialize)]
struct LinearDecayReport {
    probe: DecayProbe,
    window: [f64; 2],
    sup_fit: LinearFit,
    loc_fit: LinearFit,
    reference_exponent: f64,
}

fn fit_linear(a: &LinearArgs) -> Result<()> {
    let cfg = load(&a.config)?;
    let [t0, t1] = [a.times[0], a.times[1]];
    if !(t0 > 0.0 && t1 > t0) || a.samples < 3 {
        bail!("need 0 < t0 < t1 and at least 3 samples");
    }
    let grid = cfg.grid.build()?;
    let v = Potential::sample(cfg.potential, grid)?;
    let bump = ComplexField::from_fn(grid, |x| {
        let r2 = (x[0] - a.center).powi(2) + x[1] * x[1] + x[2] * x[2];
        C64::new((-0.5 * r2 / (a.sigma * a.sigma)).exp(), 0.0)
    });
    let f = if a.continuum {
        project_continuum(&bump, &solve_eigenpairs(&v, 2)?)?
    } else {
        bump
    };
    let times: Vec<f64> = (0..a.samples)
        .map(|i| t0 * (t1 / t0).powf(i as f64 / (a.samples - 1) as f64))
        .collect();
    let absorber = cfg
        .absorber
        .or_else(|| Some(AbsorberSpec::new(0.125 * grid.half_width())));
    let probe = linear_decay_probe(&v, &f, &times, a.dt, absorber)?;
    let window = a.window.as_ref().map_or([t0, t1], |w| [w[0], w[1]]);
    emit(&LinearDecayReport {
        sup_fit: probe.sup_exponent(window)?,
        loc_fit: probe.loc_exponent(window)?,
        reference_exponent: -0.5 * grid.dim() as f64,
        window,
        probe,
    })
}

fn ladder(mut cfg: ExperimentConfig, n: &[f64], out: Option<PathBuf>, strict: bool) -> Result<i32> {
    if let Some(dir) = &out {
        cfg.output = Some(OutputSpec {
            dir: dir.to_string_lossy().into_owned(),
            snapshot: false,
        });
    }
    let setup = Setup::prepare(&cfg, n)?;
    let (report, runs) = run_ladder(&cfg, n, &setup)?;
    if let Some(o) = &cfg.output {
        for (r, n) in runs.iter().zip(n) {
            write_outputs(&Path::new(&o.dir).join(format!("n{n}")), r, o.snapshot)?;
        }
        std::fs::write(
            Path::new(&o.dir).join("ladder.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    for c in &report.checks {
        eprintln!("{}", c.describe());
    }
    emit(&report)?;
    Ok(if strict && !report.checks.iter().all(|c| c.passed) {
        2
    } else {
        0
    })
}
