//! Batch front end: runs detectors, Monte Carlo operating characteristics
//! and the expansion-constant pipeline from JSON configs, emitting CSV/JSON
//! artifacts with an embedded reproducibility manifest.

mod config;
mod manifest;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use config::{parse_model_spec, parse_quasi_stationary, parse_scenario, parse_scenario_with_omega, ModelFile};
use cpdhmm::detect::default_cap;
use cpdhmm::oc::{run_trials, summarize_delay, summarize_run_lengths};
use cpdhmm::renewal::{
    approx_delay_from_parts, estimate_constants, ConstantsConfig, DeltaConfig, EtaConfig,
    LadderConfig,
};
use cpdhmm::{
    AlarmReport, ChangePoint, ChangeScenario, DetectorConfig, DetectorKind, InitPolicy,
    McEstimate, QuasiStationaryDist,
};
use manifest::RunManifest;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SUMMARY_HEADER: &str = "rule,b,gamma,omega,mean,se,trials,censored,seed";
const TRIAL_HEADER: &str = "trial,rule,b,N,censored,overshoot,seed";

#[derive(Parser)]
#[command(
    name = "cpdhmm",
    version,
    about = "Sequential change-point detection for hidden Markov models",
    after_help = "Model files hold one model ({d, trans, emission, stationary?}) or a \
                  scenario ({pre, post, omega}); omega is a positive integer or \"inf\". \
                  Seeds are mandatory so every artifact is reproducible."
)]
struct Cli {
    /// Bound harness parallelism (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Embed a wall-clock timestamp in the manifest (off by default so
    /// identical invocations are byte-identical).
    #[arg(long, global = true)]
    stamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct DetectorArgs {
    /// Detector config file {"rule", "log_b", "p"?, "init"?}; flags below
    /// are then unnecessary.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Stopping rule.
    #[arg(long, value_enum, required_unless_present = "detector")]
    rule: Option<RuleArg>,
    /// Log threshold b = log B.
    #[arg(long, required_unless_present = "detector")]
    log_b: Option<f64>,
    /// Geometric prior parameter (shiryaev rule only).
    #[arg(long)]
    p: Option<f64>,
    /// SRP start: zero or quasi_stationary (the latter needs --quasistat).
    #[arg(long, value_enum, default_value = "zero")]
    init: InitArg,
    /// Start-distribution file produced by the quasistat subcommand.
    #[arg(long)]
    quasistat: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum RuleArg {
    Srp,
    Cusum,
    Shiryaev,
}

impl From<RuleArg> for DetectorKind {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Srp => DetectorKind::Srp,
            RuleArg::Cusum => DetectorKind::Cusum,
            RuleArg::Shiryaev => DetectorKind::Shiryaev,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum InitArg {
    Zero,
    QuasiStationary,
}

impl DetectorArgs {
    fn build(&self) -> anyhow::Result<(DetectorConfig, Option<QuasiStationaryDist>)> {
        let cfg = match &self.detector {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<DetectorConfig>(&text)
                    .with_context(|| format!("validating detector config {}", path.display()))?
            }
            None => DetectorConfig {
                rule: self.rule.expect("enforced by clap").into(),
                log_b: self.log_b.expect("enforced by clap"),
                p: self.p,
                init: match self.init {
                    InitArg::Zero => InitPolicy::Zero,
                    InitArg::QuasiStationary => InitPolicy::QuasiStationary,
                },
            },
        };
        let psi = match (cfg.init, &self.quasistat) {
            (InitPolicy::QuasiStationary, Some(path)) => Some(parse_quasi_stationary(path)?),
            (InitPolicy::QuasiStationary, None) => {
                return Err(anyhow!(
                    "quasi_stationary init requires --quasistat FILE with the start distribution"
                ));
            }
            _ => None,
        };
        Ok((cfg, psi))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample one observation path from a scenario.
    Simulate {
        /// Model or scenario file (a bare model runs with no change).
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        /// Number of observations.
        #[arg(long)]
        horizon: u64,
        #[arg(long)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one detector to its alarm on one sampled path.
    Detect {
        /// Scenario file.
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
        /// Step cap (default 50 B).
        #[arg(long)]
        cap: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the run length to false alarm under the no-change measure.
    Arl {
        /// Scenario file (the change time is ignored; data follow the
        /// pre-change law).
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        trials: u64,
        /// Step cap (default 50 B).
        #[arg(long)]
        cap: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one CSV row per trial to this path.
        #[arg(long)]
        per_trial: Option<PathBuf>,
    },
    /// Estimate the conditional detection delay at the scenario's change
    /// time.
    Delay {
        /// Scenario file with a finite change time (or use --omega).
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        /// Override the scenario's change time.
        #[arg(long)]
        omega: Option<u64>,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        cap: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        per_trial: Option<PathBuf>,
    },
    /// Search the threshold whose run length matches a target.
    Calibrate {
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        #[arg(long, value_enum)]
        rule: RuleArg,
        #[arg(long)]
        p: Option<f64>,
        /// Target run length to false alarm.
        #[arg(long)]
        gamma: f64,
        /// Trials per search probe.
        #[arg(long, default_value_t = 2000)]
        budget: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate every constant of the second-order delay expansion and
    /// write the constants file consumed by `approx`.
    Constants {
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 400_000)]
        kl_steps: u64,
        #[arg(long, default_value_t = 2_000)]
        kl_burn_in: u64,
        #[arg(long, default_value_t = 200)]
        ladder_trials: u64,
        #[arg(long, default_value_t = 50)]
        ladders_per_trial: u64,
        /// Ladder epochs discarded per trial before recording.
        #[arg(long, default_value_t = 20)]
        ladder_burn_in: u64,
        #[arg(long, default_value_t = 20_000)]
        eta_trials: u64,
        /// Tail truncation threshold for the eta accumulation.
        #[arg(long, default_value_t = 40.0)]
        trunc: f64,
        /// Series horizon of the Poisson-correction estimator.
        #[arg(long, default_value_t = 200)]
        delta_horizon: u64,
        /// Replicate paths per probe state.
        #[arg(long, default_value_t = 200)]
        delta_replicates: u64,
        /// Probe states harvested from a stationary post-change run.
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// Ladder-epoch states backing the stationary-ladder integral.
        #[arg(long, default_value_t = 50)]
        mplus: usize,
    },
    /// Evaluate the second-order delay approximation from a constants file.
    Approx {
        /// Constants file written by `constants`.
        #[arg(long)]
        constants: PathBuf,
        #[arg(long)]
        log_b: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate several rules to one run-length target and compare their
    /// delays across change times.
    Compare {
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        /// Comma-separated rules, e.g. srp,cusum.
        #[arg(long, value_enum, value_delimiter = ',')]
        rules: Vec<RuleArg>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        gamma: f64,
        /// Comma-separated change times to probe.
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        omegas: Vec<u64>,
        /// Trials per calibration probe.
        #[arg(long, default_value_t = 2000)]
        budget: u64,
        /// Trials per delay estimate.
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        cap: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the quasi-stationary start distribution of the SRP rule.
    Quasistat {
        #[arg(long, visible_alias = "scenario")]
        model: PathBuf,
        #[arg(long)]
        log_b: f64,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        /// Burn-in sweeps (default 10 B).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad invocation or missing input: exit 2.
    Usage(anyhow::Error),
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate {
            model,
            horizon,
            seed,
            out,
        } => simulate(cli, model, *horizon, *seed, out.as_ref()),
        Command::Detect {
            model,
            detector,
            cap,
            seed,
            out,
        } => detect(cli, model, detector, *cap, *seed, out.as_ref()),
        Command::Arl {
            model,
            detector,
            trials,
            cap,
            seed,
            out,
            per_trial,
        } => arl(cli, model, detector, *trials, *cap, *seed, out.as_ref(), per_trial.as_ref()),
        Command::Delay {
            model,
            omega,
            detector,
            trials,
            cap,
            seed,
            out,
            per_trial,
        } => delay(
            cli,
            model,
            *omega,
            detector,
            *trials,
            *cap,
            *seed,
            out.as_ref(),
            per_trial.as_ref(),
        ),
        Command::Calibrate {
            model,
            rule,
            p,
            gamma,
            budget,
            seed,
            out,
        } => calibrate(cli, model, *rule, *p, *gamma, *budget, *seed, out.as_ref()),
        Command::Constants { .. } => constants(cli),
        Command::Approx {
            constants,
            log_b,
            out,
        } => approx(cli, constants, *log_b, out.as_ref()),
        Command::Compare {
            model,
            rules,
            p,
            gamma,
            omegas,
            budget,
            trials,
            cap,
            seed,
            out,
        } => compare(
            cli,
            model,
            rules,
            *p,
            *gamma,
            omegas,
            *budget,
            *trials,
            *cap,
            *seed,
            out.as_ref(),
        ),
        Command::Quasistat {
            model,
            log_b,
            particles,
            steps,
            seed,
            out,
        } => quasistat(cli, model, *log_b, *particles, *steps, *seed, out.as_ref()),
    }
}

fn write_artifact(out: Option<&PathBuf>, content: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{content}"),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn trial_rows(reports: &[AlarmReport]) -> String {
    let mut s = String::from(TRIAL_HEADER);
    s.push('\n');
    for (t, r) in reports.iter().enumerate() {
        s.push_str(&format!(
            "{t},{},{},{},{},{},{}\n",
            r.rule.name(),
            r.log_b,
            r.stopping_time,
            r.censored,
            fmt_opt(r.overshoot),
            r.seed
        ));
    }
    s
}

fn summary_row(
    rule: &str,
    log_b: f64,
    gamma: Option<f64>,
    omega: &str,
    est: &McEstimate,
) -> String {
    format!(
        "{rule},{log_b},{},{omega},{},{},{},{},{}\n",
        fmt_opt(gamma),
        est.mean,
        est.std_error,
        est.trials,
        est.censored,
        est.seed
    )
}

fn simulate(
    cli: &Cli,
    model: &Path,
    horizon: u64,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = match parse_model_spec(model)? {
        ModelFile::Scenario(sc) => sc,
        ModelFile::Model(m) => {
            ChangeScenario::no_change(m.clone(), m).map_err(|e| Failure::Runtime(e.into()))?
        }
    };
    if horizon == 0 {
        return Err(Failure::Usage(anyhow!("--horizon must be at least 1")));
    }
    let path = cpdhmm::hmm::sample_changed_path(&scenario, horizon, seed);
    let man = RunManifest::new("simulate", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    let mut csv = format!("{}\nn,xi,state\n", man.csv_header());
    for (n, (xi, state)) in path
        .observations
        .iter()
        .zip(path.hidden.iter())
        .enumerate()
    {
        csv.push_str(&format!("{n},{xi},{state}\n"));
    }
    write_artifact(out, &csv)?;
    eprintln!("simulate: {horizon} observations, seed {seed}");
    Ok(())
}

fn detect(
    cli: &Cli,
    model: &Path,
    detector: &DetectorArgs,
    cap: Option<u64>,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = parse_scenario(model)?;
    let (cfg, psi) = detector.build().map_err(Failure::Usage)?;
    let cap = cap.unwrap_or_else(|| default_cap(cfg.log_b));
    let report = cpdhmm::detect::run_to_alarm(&scenario, &cfg, psi.as_ref(), cap, seed)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let man = RunManifest::new("detect", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    let csv = format!("{}\n{}", man.csv_header(), trial_rows(&[report.clone()]));
    write_artifact(out, &csv)?;
    eprintln!(
        "detect: rule {} alarmed at N = {}{} (seed {seed})",
        report.rule.name(),
        report.stopping_time,
        if report.censored { " [censored]" } else { "" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn arl(
    cli: &Cli,
    model: &Path,
    detector: &DetectorArgs,
    trials: u64,
    cap: Option<u64>,
    seed: u64,
    out: Option<&PathBuf>,
    per_trial: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = parse_scenario(model)?;
    let (cfg, psi) = detector.build().map_err(Failure::Usage)?;
    let cap = cap.unwrap_or_else(|| default_cap(cfg.log_b));
    let no_change = ChangeScenario::no_change(scenario.pre().clone(), scenario.post().clone())
        .map_err(|e| Failure::Runtime(e.into()))?;
    let reports = run_trials(&no_change, &cfg, psi.as_ref(), trials, cap, seed)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let est = summarize_run_lengths(&reports, seed);

    let man = RunManifest::new("arl", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    let csv = format!(
        "{}\n{SUMMARY_HEADER}\n{}",
        man.csv_header(),
        summary_row(cfg.rule.name(), cfg.log_b, None, "inf", &est)
    );
    write_artifact(out, &csv)?;
    if let Some(pt) = per_trial {
        let csv = format!("{}\n{}", man.csv_header(), trial_rows(&reports));
        std::fs::write(pt, csv).with_context(|| format!("writing {}", pt.display()))?;
    }
    eprintln!(
        "arl: mean {} se {} over {} trials ({} censored{})",
        est.mean,
        est.std_error,
        est.trials,
        est.censored,
        if est.lower_bound { ", lower bound" } else { "" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn delay(
    cli: &Cli,
    model: &Path,
    omega: Option<u64>,
    detector: &DetectorArgs,
    trials: u64,
    cap: Option<u64>,
    seed: u64,
    out: Option<&PathBuf>,
    per_trial: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = parse_scenario_with_omega(model, omega)?;
    let k = match scenario.omega() {
        ChangePoint::Finite(k) => k,
        ChangePoint::Infinite => {
            return Err(Failure::Usage(anyhow!(
                "delay needs a finite change time: set omega in the scenario or pass --omega"
            )));
        }
    };
    let (cfg, psi) = detector.build().map_err(Failure::Usage)?;
    let cap = cap.unwrap_or_else(|| default_cap(cfg.log_b));
    let reports = run_trials(&scenario, &cfg, psi.as_ref(), trials, cap, seed)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let d = summarize_delay(&reports, k, k, seed).map_err(|e| Failure::Runtime(e.into()))?;

    let man = RunManifest::new("delay", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    let csv = format!(
        "{}\n{SUMMARY_HEADER}\n{}",
        man.csv_header(),
        summary_row(cfg.rule.name(), cfg.log_b, None, &k.to_string(), &d.estimate)
    );
    write_artifact(out, &csv)?;
    if let Some(pt) = per_trial {
        let csv = format!("{}\n{}", man.csv_header(), trial_rows(&reports));
        std::fs::write(pt, csv).with_context(|| format!("writing {}", pt.display()))?;
    }
    eprintln!(
        "delay at omega {k}: mean {} se {} ({} included, {} early alarms, {} censored)",
        d.estimate.mean, d.estimate.std_error, d.included, d.excluded, d.estimate.censored
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn calibrate(
    cli: &Cli,
    model: &Path,
    rule: RuleArg,
    p: Option<f64>,
    gamma: f64,
    budget: u64,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = parse_scenario(model)?;
    let cfg = DetectorConfig {
        rule: rule.into(),
        log_b: gamma.ln().max(1.0),
        p,
        init: InitPolicy::Zero,
    };
    let cal = cpdhmm::oc::calibrate_threshold(
        scenario.pre(),
        scenario.post(),
        &cfg,
        None,
        gamma,
        budget,
        seed,
    )
    .map_err(|e| Failure::Runtime(e.into()))?;

    let man = RunManifest::new("calibrate", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    #[derive(Serialize)]
    struct CalibrateOut<'a> {
        manifest: &'a RunManifest,
        rule: &'a str,
        gamma: f64,
        log_b: f64,
        converged: bool,
        probes: &'a [(f64, f64)],
        arl_mean: f64,
        arl_se: f64,
        arl_trials: u64,
        arl_censored: u64,
    }
    let payload = serde_json::to_string_pretty(&CalibrateOut {
        manifest: &man,
        rule: cfg.rule.name(),
        gamma,
        log_b: cal.log_b,
        converged: cal.converged,
        probes: &cal.probes,
        arl_mean: cal.arl.mean,
        arl_se: cal.arl.std_error,
        arl_trials: cal.arl.trials,
        arl_censored: cal.arl.censored,
    })
    .context("serializing calibration")?;
    write_artifact(out, &format!("{payload}\n"))?;
    eprintln!(
        "calibrate: log_b {} (run length {} se {} over {} trials){}",
        cal.log_b,
        cal.arl.mean,
        cal.arl.std_error,
        cal.arl.trials,
        if cal.converged { "" } else { " [did not converge]" }
    );
    Ok(())
}

/// Constants file schema shared by `constants` and `approx`.
#[derive(Debug, Serialize, Deserialize)]
struct ConstantsFile {
    manifest: RunManifest,
    k10: f64,
    k10_se: f64,
    k01: f64,
    k01_se: f64,
    mean_ladder: f64,
    mean_sq_ladder: f64,
    rho: f64,
    rho_se: f64,
    eta: f64,
    eta_se: f64,
    truncation_threshold: f64,
    integral_mplus: f64,
    delta_at_init: f64,
    max_probe_residual: f64,
    init_residual: f64,
    delta_horizon: u64,
    delta_replicates: u64,
    kl_steps: u64,
    kl_burn_in: u64,
}

fn constants(cli: &Cli) -> Result<(), Failure> {
    let Command::Constants {
        model,
        seed,
        out,
        kl_steps,
        kl_burn_in,
        ladder_trials,
        ladders_per_trial,
        ladder_burn_in,
        eta_trials,
        trunc,
        delta_horizon,
        delta_replicates,
        probes,
        mplus,
    } = &cli.command
    else {
        unreachable!("dispatched from run");
    };
    let scenario = parse_scenario(model)?;
    let cfg = ConstantsConfig {
        kl_steps: *kl_steps,
        kl_burn_in: *kl_burn_in,
        ladder: LadderConfig {
            trials: *ladder_trials,
            ladders_per_trial: *ladders_per_trial,
            burn_in_ladders: *ladder_burn_in,
            cap_steps_per_ladder: 1_000_000,
        },
        eta: EtaConfig {
            trials: *eta_trials,
            trunc_threshold: *trunc,
            burn_in_ladders: *ladder_burn_in,
            cap_steps: 10_000_000,
        },
        delta: DeltaConfig {
            horizon: *delta_horizon,
            replicates: *delta_replicates,
            residual_tol: None,
        },
        probe_count: *probes,
        mplus_count: *mplus,
        probe_spacing: 50,
        probe_burn_in: 1_000,
    };
    let c = estimate_constants(scenario.pre(), scenario.post(), &cfg, *seed)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let man = RunManifest::new("constants", *seed)
        .with_config(model)
        .with_output(out.as_ref())
        .stamped(cli.stamp);
    let file = ConstantsFile {
        manifest: man,
        k10: c.kl.k10,
        k10_se: c.kl.se_k10,
        k01: c.kl.k01,
        k01_se: c.kl.se_k01,
        mean_ladder: c.overshoot.mean_ladder,
        mean_sq_ladder: c.overshoot.mean_sq_ladder,
        rho: c.overshoot.rho,
        rho_se: c.overshoot.se_rho,
        eta: c.eta.mean_eta,
        eta_se: c.eta.se,
        truncation_threshold: c.eta.truncation_threshold,
        integral_mplus: c.delta.integral_mplus,
        delta_at_init: c.delta.delta_at_init,
        max_probe_residual: c.delta.residuals.iter().cloned().fold(0.0, f64::max),
        init_residual: c.delta.init_residual,
        delta_horizon: c.delta.horizon,
        delta_replicates: c.delta.replicates,
        kl_steps: c.kl.steps,
        kl_burn_in: c.kl.burn_in,
    };
    let payload = serde_json::to_string_pretty(&file).context("serializing constants")?;
    write_artifact(out.as_ref(), &format!("{payload}\n"))?;
    eprintln!(
        "constants: k10 {} (se {}), rho {}, eta {} (se {}), corrections {} / {}",
        file.k10, file.k10_se, file.rho, file.eta, file.eta_se, file.integral_mplus,
        file.delta_at_init
    );
    Ok(())
}

fn approx(
    cli: &Cli,
    constants_path: &Path,
    log_b: f64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    if !constants_path.exists() {
        return Err(Failure::Usage(anyhow!(
            "constants file {} does not exist; run the constants subcommand first",
            constants_path.display()
        )));
    }
    let text = std::fs::read_to_string(constants_path)
        .with_context(|| format!("reading {}", constants_path.display()))?;
    let file: ConstantsFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing constants {}", constants_path.display()))?;
    let value = approx_delay_from_parts(
        log_b,
        file.k10,
        file.eta,
        file.rho,
        file.integral_mplus,
        file.delta_at_init,
    )
    .map_err(|e| Failure::Runtime(e.into()))?;

    // No randomness here; the approximation is a pure function of the file.
    let man = RunManifest::new("approx", 0)
        .with_config(constants_path)
        .with_output(out)
        .stamped(cli.stamp);
    #[derive(Serialize)]
    struct ApproxOut<'a> {
        manifest: &'a RunManifest,
        log_b: f64,
        approx_expected_alarm_time: f64,
        constants: &'a ConstantsFile,
    }
    let payload = serde_json::to_string_pretty(&ApproxOut {
        manifest: &man,
        log_b,
        approx_expected_alarm_time: value,
        constants: &file,
    })
    .context("serializing approximation")?;
    write_artifact(out, &format!("{payload}\n"))?;
    eprintln!("approx: expected alarm time {} at log_b {}", value, log_b);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn compare(
    cli: &Cli,
    model: &Path,
    rules: &[RuleArg],
    p: Option<f64>,
    gamma: f64,
    omegas: &[u64],
    budget: u64,
    trials: u64,
    cap: Option<u64>,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    if rules.is_empty() {
        return Err(Failure::Usage(anyhow!("--rules must name at least one rule")));
    }
    let scenario = parse_scenario(model)?;
    let configs: Vec<DetectorConfig> = rules
        .iter()
        .map(|r| DetectorConfig {
            rule: (*r).into(),
            log_b: gamma.ln().max(1.0),
            p,
            init: InitPolicy::Zero,
        })
        .collect();
    let cap = cap.unwrap_or_else(|| default_cap(gamma.ln() + 2.0));
    let table = cpdhmm::oc::compare_rules(
        scenario.pre(),
        scenario.post(),
        &configs,
        None,
        gamma,
        omegas,
        budget,
        trials,
        cap,
        seed,
    )
    .map_err(|e| Failure::Runtime(e.into()))?;

    let man = RunManifest::new("compare", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    let mut csv = format!("{}\n{SUMMARY_HEADER}\n", man.csv_header());
    for row in &table.rows {
        csv.push_str(&summary_row(
            row.rule.rule.name(),
            row.rule.log_b,
            Some(gamma),
            "inf",
            &row.calibration.arl,
        ));
        for (omega, d) in &row.delays {
            csv.push_str(&summary_row(
                row.rule.rule.name(),
                row.rule.log_b,
                Some(gamma),
                &omega.to_string(),
                &d.estimate,
            ));
        }
        if !row.calibration.converged {
            eprintln!(
                "warning: {} calibration did not converge (best log_b {})",
                row.rule.rule.name(),
                row.rule.log_b
            );
        }
    }
    write_artifact(out, &csv)?;
    eprintln!(
        "compare: {} rules at gamma {gamma}, change times {:?}",
        table.rows.len(),
        omegas
    );
    Ok(())
}

fn quasistat(
    cli: &Cli,
    model: &Path,
    log_b: f64,
    particles: usize,
    steps: Option<u64>,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), Failure> {
    let scenario = parse_scenario(model)?;
    let steps = steps.unwrap_or_else(|| (10.0 * log_b.exp()).ceil() as u64);
    let dist = cpdhmm::detect::estimate_quasi_stationary(
        scenario.pre(),
        scenario.post(),
        log_b,
        particles,
        steps,
        seed,
    )
    .map_err(|e| Failure::Runtime(e.into()))?;

    let man = RunManifest::new("quasistat", seed)
        .with_config(model)
        .with_output(out)
        .stamped(cli.stamp);
    #[derive(Serialize)]
    struct QuasistatOut<'a> {
        manifest: &'a RunManifest,
        dist: &'a QuasiStationaryDist,
    }
    let payload = serde_json::to_string(&QuasistatOut {
        manifest: &man,
        dist: &dist,
    })
    .context("serializing start distribution")?;
    write_artifact(out, &format!("{payload}\n"))?;
    eprintln!(
        "quasistat: {} particles after {} sweeps, mean start {}",
        particles,
        steps,
        dist.mean()
    );
    Ok(())
}
