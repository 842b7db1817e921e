//! Monte Carlo operating characteristics: run length to false alarm,
//! detection delay, threshold calibration and rule comparison.
//!
//! Trials are independent and run in parallel on counter-derived RNG streams
//! (trial `t` of base seed `s` always consumes the same randomness), results
//! are collected in trial order and aggregated sequentially, so every
//! estimate is bit-identical across thread counts and execution orders.

use crate::detect::{default_cap, run_to_alarm_with, AlarmReport, DetectorConfig, QuasiStationaryDist};
use crate::error::{Error, Result};
use crate::hmm::{ChangePoint, ChangeScenario, HmmParams};
use crate::rng::trial_rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Monte Carlo point estimate with its standard error and censoring
/// accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: u64,
    pub censored: u64,
    pub seed: u64,
    /// Wall-clock seconds spent producing the estimate (not part of any
    /// reproducible artifact).
    pub wall_time: f64,
    /// Set when censored trials contributed their cap, making the mean a
    /// lower bound.
    pub lower_bound: bool,
}

/// Equality ignores `wall_time`: two estimates are the same result when the
/// reproducible fields agree.
impl PartialEq for McEstimate {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.std_error == other.std_error
            && self.trials == other.trials
            && self.censored == other.censored
            && self.seed == other.seed
            && self.lower_bound == other.lower_bound
    }
}

impl McEstimate {
    fn from_values(values: &[f64], censored: u64, seed: u64, wall_time: f64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_error: (var / n).sqrt(),
            trials: values.len() as u64,
            censored,
            seed,
            wall_time,
            lower_bound: censored > 0,
        }
    }

    /// Pooled standard error of the difference of two estimates.
    pub fn pooled_se(&self, other: &McEstimate) -> f64 {
        (self.std_error * self.std_error + other.std_error * other.std_error).sqrt()
    }
}

/// Conditional delay estimate with exclusion accounting:
/// `included + excluded + censored = trials`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub estimate: McEstimate,
    /// Trials that alarmed before the conditioning time (not part of the
    /// conditional mean).
    pub excluded: u64,
    /// Trials that alarmed at or after the conditioning time.
    pub included: u64,
    /// Change time of the scenario the delay was measured against.
    pub omega: u64,
    /// Conditioning time: the mean is of `N - r` over trials with `N >= r`.
    pub reference: u64,
}

/// Runs `trials` independent detector replicas and returns their reports in
/// trial order. Trials execute in parallel on per-trial RNG streams, so the
/// result is identical for any thread count.
pub fn run_trials(
    scenario: &ChangeScenario,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<Vec<AlarmReport>> {
    if trials == 0 {
        return Err(Error::Estimation("zero trials requested".into()));
    }
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            run_to_alarm_with(scenario, cfg, psi, cap, seed, &mut rng)
        })
        .collect()
}

/// Aggregates stopping times of a report batch (the run-length summary).
pub fn summarize_run_lengths(reports: &[AlarmReport], seed: u64) -> McEstimate {
    let censored = reports.iter().filter(|r| r.censored).count() as u64;
    let values: Vec<f64> = reports.iter().map(|r| r.stopping_time as f64).collect();
    McEstimate::from_values(&values, censored, seed, 0.0)
}

/// Aggregates a report batch into the conditional delay from `reference`:
/// mean of `N - reference` over alarmed trials with `N >= reference`.
pub fn summarize_delay(
    reports: &[AlarmReport],
    omega: u64,
    reference: u64,
    seed: u64,
) -> Result<DelayEstimate> {
    let mut values = Vec::with_capacity(reports.len());
    let mut excluded = 0u64;
    let mut censored = 0u64;
    for r in reports {
        if r.censored {
            censored += 1;
        } else if r.stopping_time >= reference {
            values.push((r.stopping_time - reference) as f64);
        } else {
            excluded += 1;
        }
    }
    if values.is_empty() {
        return Err(Error::Estimation(format!(
            "no trial alarmed at or after the conditioning time {reference} \
             ({excluded} early alarms, {censored} censored)"
        )));
    }
    let included = values.len() as u64;
    let estimate = McEstimate::from_values(&values, censored, seed, 0.0);
    Ok(DelayEstimate {
        estimate,
        excluded,
        included,
        omega,
        reference,
    })
}

/// Mean run length to (false) alarm under the no-change measure.
///
/// Censored trials contribute the cap as a lower bound and flag the
/// estimate; they are never dropped.
pub fn estimate_arl(
    pre: &HmmParams,
    post: &HmmParams,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<McEstimate> {
    let start = Instant::now();
    let scenario = ChangeScenario::no_change(pre.clone(), post.clone())?;
    let reports = run_trials(&scenario, cfg, psi, trials, cap, seed)?;
    let mut est = summarize_run_lengths(&reports, seed);
    est.wall_time = start.elapsed().as_secs_f64();
    Ok(est)
}

/// Conditional detection delay `E(N - omega | N >= omega)` for a scenario
/// with a finite change time.
///
/// Trials alarming before the change are excluded from the conditional mean
/// and counted; censored trials are counted separately.
pub fn estimate_delay(
    scenario: &ChangeScenario,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<DelayEstimate> {
    let omega = finite_omega(scenario)?;
    estimate_delay_from(scenario, cfg, psi, omega, trials, cap, seed)
}

/// Conditional delay measured from an arbitrary reference time `r`:
/// mean of `N - r` over trials with `N >= r`.
///
/// `r = omega` is the plain conditional delay; `r = omega - 1` is the
/// functional that the quasi-stationary start equalizes across change times;
/// `r = 0` is the unconditional mean stopping time.
pub fn estimate_delay_from(
    scenario: &ChangeScenario,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    reference: u64,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<DelayEstimate> {
    let start = Instant::now();
    let omega = finite_omega(scenario)?;
    let reports = run_trials(scenario, cfg, psi, trials, cap, seed)?;
    let mut delay = summarize_delay(&reports, omega, reference, seed)?;
    delay.estimate.wall_time = start.elapsed().as_secs_f64();
    Ok(delay)
}

fn finite_omega(scenario: &ChangeScenario) -> Result<u64> {
    match scenario.omega() {
        ChangePoint::Finite(k) => Ok(k),
        ChangePoint::Infinite => Err(Error::Domain(
            "delay estimation requires a finite change time".into(),
        )),
    }
}

/// Result of a threshold search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub log_b: f64,
    /// Run-length estimate at the returned threshold.
    pub arl: McEstimate,
    /// False when the probe budget ran out before the target band was hit;
    /// the returned threshold is then the best probe seen.
    pub converged: bool,
    /// `(log_b, arl_mean)` per probe, in search order.
    pub probes: Vec<(f64, f64)>,
}

/// Search bound: probes per calibration run.
pub const CALIBRATION_MAX_PROBES: usize = 12;

/// Finds `log_b` whose run length to false alarm matches `gamma` within 5%,
/// by stochastic bisection on the log threshold seeded at `log(gamma)`.
///
/// `budget` is the trial count per probe. The search accepts a probe when
/// its estimate plus one standard error sits inside the 5% band; when the
/// probe allowance is exhausted first, the closest probe is returned with
/// `converged = false`.
pub fn calibrate_threshold(
    pre: &HmmParams,
    post: &HmmParams,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    gamma: f64,
    budget: u64,
    seed: u64,
) -> Result<Calibration> {
    if !(gamma > 1.0) {
        return Err(Error::Domain(format!("gamma = {gamma} must exceed 1")));
    }
    let mut log_b = gamma.ln();
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut probes = Vec::new();
    let mut best: Option<(f64, McEstimate)> = None;

    for probe in 0..CALIBRATION_MAX_PROBES {
        let probe_seed = crate::rng::derive_seed(seed, probe as u64 + 1);
        let cap = default_cap(log_b);
        let est = estimate_arl(pre, post, &cfg.with_log_b(log_b), psi, budget, cap, probe_seed)?;
        probes.push((log_b, est.mean));

        let better = match &best {
            None => true,
            Some((b_log_b, b_est)) => {
                let _ = b_log_b;
                (est.mean - gamma).abs() < (b_est.mean - gamma).abs()
            }
        };
        if better {
            best = Some((log_b, est.clone()));
        }

        if (est.mean - gamma).abs() + est.std_error <= 0.05 * gamma {
            return Ok(Calibration {
                log_b,
                arl: est,
                converged: true,
                probes,
            });
        }

        // Maintain the bracket from run-length monotonicity in the
        // threshold, then move along the log scale: ARL is close to
        // proportional to B, so log(gamma / estimate) is the natural step.
        if est.mean < gamma {
            lo = lo.max(log_b);
        } else {
            hi = hi.min(log_b);
        }
        let mut next = log_b + (gamma / est.mean).ln();
        if next <= lo || next >= hi {
            next = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + 0.5
            } else {
                hi - 0.5
            };
        }
        log_b = next;
    }

    let (log_b, arl) = best.expect("at least one probe ran");
    Ok(Calibration {
        log_b,
        arl,
        converged: false,
        probes,
    })
}

/// One rule's calibrated threshold, run length and delays in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rule: DetectorConfig,
    pub gamma: f64,
    pub calibration: Calibration,
    /// Delay estimates per probed change time.
    pub delays: Vec<(u64, DelayEstimate)>,
}

/// Delay comparison of several rules at a common false-alarm constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Calibrates every rule to the same run-length target, then estimates the
/// conditional delay at each probed change time.
pub fn compare_rules(
    pre: &HmmParams,
    post: &HmmParams,
    rules: &[DetectorConfig],
    psi: Option<&QuasiStationaryDist>,
    gamma: f64,
    omegas: &[u64],
    calibration_budget: u64,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(rules.len());
    for (i, rule) in rules.iter().enumerate() {
        let rule_seed = crate::rng::derive_seed(seed, 1000 + i as u64);
        let calibration =
            calibrate_threshold(pre, post, rule, psi, gamma, calibration_budget, rule_seed)?;
        let tuned = rule.with_log_b(calibration.log_b);
        let mut delays = Vec::with_capacity(omegas.len());
        for (j, &omega) in omegas.iter().enumerate() {
            let scenario = ChangeScenario::new(
                pre.clone(),
                post.clone(),
                ChangePoint::finite(omega),
            )?;
            // Label space disjoint from the calibration probes' seeds.
            let delay_seed = crate::rng::derive_seed(rule_seed, 4096 + j as u64);
            let d = estimate_delay(&scenario, &tuned, psi, trials, cap, delay_seed)?;
            delays.push((omega, d));
        }
        rows.push(ComparisonRow {
            rule: tuned,
            gamma,
            calibration,
            delays,
        });
    }
    Ok(ComparisonTable { rows })
}
