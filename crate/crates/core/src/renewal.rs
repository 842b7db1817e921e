//! Simulation estimators for the constants of the second-order delay
//! expansion, plus a first-passage laboratory for perturbed Markov random
//! walks.
//!
//! For a walk `S_n` with positive stationary drift `K`, the expected alarm
//! time of the log detector statistic over a threshold `b` expands as
//!
//! ```text
//! E N_b = (b - E eta + rho - int delta dm+ + delta(w_init)) / K + o(1)
//! ```
//!
//! where `eta = log(1 + sum_{k>=1} e^{-S_k})` is the limit of the gap
//! between the detector statistic and the bare walk, `rho` is the stationary
//! mean overshoot expressed through ascending ladder heights
//! (`E H^2 / 2 E H`), and `delta` solves the Poisson equation
//! `E_w delta(W_1) - delta(w) = g_bar(w) - K` that corrects for Markov
//! dependence of the increments. Every constant here is estimated by
//! simulation; nothing is taken from closed form.

use crate::error::{Error, Result};
use crate::oc::McEstimate;
use crate::rng::{derive_seed, trial_rng};
use crate::walk::MarkovWalk;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Default ladder-epoch burn-in before treating the walk as stationary on
/// ladders.
pub const DEFAULT_LADDER_BURN_IN: u64 = 20;

/// Consecutive exceedances of the truncation threshold required to stop the
/// tail accumulation in the eta estimator.
pub const ETA_STOP_RUN: u64 = 50;

// ---------------------------------------------------------------------------
// Kullback-Leibler numbers
// ---------------------------------------------------------------------------

/// Long-run drift of the log-likelihood-ratio walk under each regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Drift under the post-change law (positive for distinct models).
    pub k10: f64,
    /// Drift of the reversed ratio under the pre-change law.
    pub k01: f64,
    pub se_k10: f64,
    pub se_k01: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub seed: u64,
    /// Set when either estimate fails to be positive beyond three standard
    /// errors, which contradicts a well-separated model pair.
    pub suspicious: bool,
}

/// Batch-means long-run average of a walk's increments.
fn long_run_mean<W: MarkovWalk, R: rand::Rng + ?Sized>(
    walk: &mut W,
    steps: u64,
    burn_in: u64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if steps <= burn_in {
        return Err(Error::Domain(format!(
            "steps = {steps} must exceed burn_in = {burn_in}"
        )));
    }
    for _ in 0..burn_in {
        walk.step(rng);
    }
    let kept = steps - burn_in;
    let n_batches = 32u64.min(kept).max(1);
    let batch = kept / n_batches;
    let mut means = Vec::with_capacity(n_batches as usize);
    let mut total = 0.0;
    let mut count = 0u64;
    for _ in 0..n_batches {
        let mut acc = 0.0;
        for _ in 0..batch {
            acc += walk.step(rng);
        }
        total += acc;
        count += batch;
        means.push(acc / batch as f64);
    }
    let mean = total / count as f64;
    let nb = means.len() as f64;
    let var_b = if means.len() > 1 {
        means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (nb - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var_b / nb).sqrt()))
}

/// Estimates both Kullback-Leibler numbers of a model pair by long-run
/// averages of the log-likelihood-ratio increments along a path from each
/// regime, with batch-means standard errors.
pub fn estimate_kl(
    post: &crate::hmm::HmmParams,
    pre: &crate::hmm::HmmParams,
    steps: u64,
    burn_in: u64,
    seed: u64,
) -> Result<KlEstimate> {
    let mut rng1 = trial_rng(seed, 0);
    let mut w1 = crate::walk::HmmLogLrWalk::post_stationary(pre, post, &mut rng1)?;
    let (k10, se_k10) = long_run_mean(&mut w1, steps, burn_in, &mut rng1)?;

    let mut rng0 = trial_rng(seed, 1);
    let mut w0 = crate::walk::HmmLogLrWalk::pre_stationary(pre, post, &mut rng0)?;
    let (neg_k01, se_k01) = long_run_mean(&mut w0, steps, burn_in, &mut rng0)?;
    let k01 = -neg_k01;

    // Not positive beyond noise: either drift could still be zero.
    let suspicious = k10 <= 3.0 * se_k10 || k01 <= 3.0 * se_k01;
    Ok(KlEstimate {
        k10,
        k01,
        se_k10,
        se_k01,
        steps,
        burn_in,
        seed,
        suspicious,
    })
}

// ---------------------------------------------------------------------------
// Ladder variables and overshoot
// ---------------------------------------------------------------------------

/// Ladder-height moments and the stationary overshoot constant
/// `rho = E H^2 / (2 E H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvershootSummary {
    pub mean_ladder: f64,
    pub mean_sq_ladder: f64,
    pub rho: f64,
    pub se_mean_ladder: f64,
    pub se_rho: f64,
    /// Sorted ladder heights backing the stationary overshoot law.
    pub heights: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
}

impl OvershootSummary {
    /// Stationary overshoot CDF implied by the ladder heights:
    /// `G(y) = 1 - E (H - y)^+ / E H`, nondecreasing from 0 to 1.
    pub fn overshoot_cdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let excess: f64 = self
            .heights
            .iter()
            .map(|&h| (h - y).max(0.0))
            .sum::<f64>()
            / self.heights.len() as f64;
        1.0 - excess / self.mean_ladder
    }
}

/// Ladder sampling configuration.
#[derive(Debug, Clone, Copy)]
pub struct LadderConfig {
    pub trials: u64,
    /// Heights recorded per trial after the burn-in ladders.
    pub ladders_per_trial: u64,
    /// Ladders discarded per trial before recording.
    pub burn_in_ladders: u64,
    /// Step allowance per ladder epoch before declaring a drift failure.
    pub cap_steps_per_ladder: u64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            trials: 200,
            ladders_per_trial: 50,
            burn_in_ladders: DEFAULT_LADDER_BURN_IN,
            cap_steps_per_ladder: 100_000,
        }
    }
}

/// Advances the walk to its next strict ascent above `anchor` and returns
/// the new maximum, or an error when the cap is exhausted.
fn next_ladder<W: MarkovWalk, R: rand::Rng + ?Sized>(
    walk: &mut W,
    s: &mut f64,
    anchor: f64,
    cap: u64,
    rng: &mut R,
) -> Result<f64> {
    for _ in 0..cap {
        *s += walk.step(rng);
        if *s > anchor {
            return Ok(*s);
        }
    }
    Err(Error::Estimation(format!(
        "no ladder epoch within {cap} steps; the walk drift may not be positive"
    )))
}

/// Samples ascending ladder heights of the walk and summarizes their
/// moments. Per trial, the first `burn_in_ladders` epochs are discarded so
/// the recorded heights approximate the stationary ladder law.
pub fn simulate_ladder<W: MarkovWalk + Sync>(
    proto: &W,
    cfg: &LadderConfig,
    seed: u64,
) -> Result<OvershootSummary> {
    if cfg.trials == 0 || cfg.ladders_per_trial == 0 {
        return Err(Error::Domain("ladder sampling needs trials and ladders".into()));
    }
    let per_trial: Result<Vec<Vec<f64>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut walk = proto.clone();
            walk.restart(&mut rng);
            let mut s = 0.0;
            let mut anchor = 0.0;
            for _ in 0..cfg.burn_in_ladders {
                anchor = next_ladder(&mut walk, &mut s, anchor, cfg.cap_steps_per_ladder, &mut rng)?;
            }
            let mut heights = Vec::with_capacity(cfg.ladders_per_trial as usize);
            for _ in 0..cfg.ladders_per_trial {
                let new_max =
                    next_ladder(&mut walk, &mut s, anchor, cfg.cap_steps_per_ladder, &mut rng)?;
                heights.push(new_max - anchor);
                anchor = new_max;
            }
            Ok(heights)
        })
        .collect();
    let per_trial = per_trial?;

    let mut heights: Vec<f64> = per_trial.iter().flatten().copied().collect();
    let n = heights.len() as f64;
    let mean_ladder = heights.iter().sum::<f64>() / n;
    let mean_sq_ladder = heights.iter().map(|h| h * h).sum::<f64>() / n;
    let rho = mean_sq_ladder / (2.0 * mean_ladder);

    // Trial-level batching for the standard errors (heights within a trial
    // are dependent through the shared path).
    let trial_stats: Vec<(f64, f64)> = per_trial
        .iter()
        .map(|hs| {
            let m = hs.len() as f64;
            (
                hs.iter().sum::<f64>() / m,
                hs.iter().map(|h| h * h).sum::<f64>() / m,
            )
        })
        .collect();
    let nt = trial_stats.len() as f64;
    let var_mean = trial_stats
        .iter()
        .map(|(m1, _)| (m1 - mean_ladder) * (m1 - mean_ladder))
        .sum::<f64>()
        / (nt - 1.0).max(1.0);
    let rhos: Vec<f64> = trial_stats
        .iter()
        .map(|(m1, m2)| m2 / (2.0 * m1))
        .collect();
    let rho_mean = rhos.iter().sum::<f64>() / nt;
    let var_rho = rhos
        .iter()
        .map(|r| (r - rho_mean) * (r - rho_mean))
        .sum::<f64>()
        / (nt - 1.0).max(1.0);

    heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(OvershootSummary {
        mean_ladder,
        mean_sq_ladder,
        rho,
        se_mean_ladder: (var_mean / nt).sqrt(),
        se_rho: (var_rho / nt).sqrt(),
        heights,
        trials: cfg.trials,
        seed,
    })
}

/// Harvests one walk state per trial at a post-burn-in ladder epoch; the
/// empirical law of these states approximates the stationary ladder law the
/// expansion integrates against.
pub fn harvest_ladder_states<W: MarkovWalk + Sync>(
    proto: &W,
    count: usize,
    burn_in_ladders: u64,
    cap_steps_per_ladder: u64,
    seed: u64,
) -> Result<Vec<W::State>> {
    (0..count as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut walk = proto.clone();
            walk.restart(&mut rng);
            let mut s = 0.0;
            let mut anchor = 0.0;
            for _ in 0..=burn_in_ladders {
                anchor = next_ladder(&mut walk, &mut s, anchor, cap_steps_per_ladder, &mut rng)?;
            }
            Ok(walk.state())
        })
        .collect()
}

/// Harvests states along one long walk path, spaced to reduce dependence.
pub fn harvest_stationary_states<W: MarkovWalk>(
    proto: &W,
    count: usize,
    spacing: u64,
    burn_in: u64,
    seed: u64,
) -> Vec<W::State> {
    let mut rng = trial_rng(seed, 0);
    let mut walk = proto.clone();
    walk.restart(&mut rng);
    for _ in 0..burn_in {
        walk.step(&mut rng);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..spacing {
            walk.step(&mut rng);
        }
        out.push(walk.state());
    }
    out
}

/// Mean overshoot and first-passage time of the drift-adjusted walk
/// `S_n - u n` over the level `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstPassage {
    pub tau: McEstimate,
    pub overshoot: McEstimate,
    /// Raw overshoot samples from completed trials, in trial order.
    pub overshoot_samples: Vec<f64>,
}

/// First passage of `S_n - u n` over `c`: per-trial crossing time and
/// overshoot `S_tau - u tau - c`. Trials that exhaust `cap` are censored
/// (they contribute the cap to the time estimate as a lower bound and no
/// overshoot sample).
pub fn first_passage_tau<W: MarkovWalk + Sync>(
    proto: &W,
    c: f64,
    u: f64,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<FirstPassage> {
    if c < 0.0 {
        return Err(Error::Domain(format!("level c = {c} must be nonnegative")));
    }
    let start = Instant::now();
    let results: Vec<(u64, Option<f64>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut walk = proto.clone();
            walk.restart(&mut rng);
            let mut s = 0.0;
            for n in 1..=cap {
                s += walk.step(&mut rng);
                let adjusted = s - u * n as f64;
                if adjusted > c {
                    return (n, Some(adjusted - c));
                }
            }
            (cap, None)
        })
        .collect();

    let censored = results.iter().filter(|(_, o)| o.is_none()).count() as u64;
    if censored == trials {
        return Err(Error::Estimation(
            "every first-passage trial was censored at the cap".into(),
        ));
    }
    let times: Vec<f64> = results.iter().map(|(n, _)| *n as f64).collect();
    let overshoot_samples: Vec<f64> = results.iter().filter_map(|(_, o)| *o).collect();
    let wall = start.elapsed().as_secs_f64();
    let tau = mc_from_values(&times, censored, seed, wall);
    let overshoot = mc_from_values(&overshoot_samples, censored, seed, wall);
    Ok(FirstPassage {
        tau,
        overshoot,
        overshoot_samples,
    })
}

fn mc_from_values(values: &[f64], censored: u64, seed: u64, wall_time: f64) -> McEstimate {
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

// ---------------------------------------------------------------------------
// Eta: the nonlinear term's limit
// ---------------------------------------------------------------------------

/// Estimate of `E log(1 + sum_{k>=1} e^{-S_k})` under the stationary ladder
/// start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    pub mean_eta: f64,
    pub se: f64,
    pub truncation_threshold: f64,
    pub trials: u64,
    pub seed: u64,
}

/// Eta estimation configuration.
#[derive(Debug, Clone, Copy)]
pub struct EtaConfig {
    pub trials: u64,
    pub trunc_threshold: f64,
    /// Ladder epochs burned before the accumulation starts (the walk is
    /// then approximately at its stationary ladder law and the partial sum
    /// restarts at zero).
    pub burn_in_ladders: u64,
    pub cap_steps: u64,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig {
            trials: 20_000,
            trunc_threshold: 40.0,
            burn_in_ladders: DEFAULT_LADDER_BURN_IN,
            cap_steps: 1_000_000,
        }
    }
}

/// Per trial: burn the configured ladder epochs, restart the partial sum at
/// zero, then accumulate `sum e^{-S_k}` until the walk has exceeded the
/// truncation threshold for [`ETA_STOP_RUN`] consecutive steps; the trial
/// value is `log(1 + sum)`.
pub fn estimate_eta<W: MarkovWalk + Sync>(
    proto: &W,
    cfg: &EtaConfig,
    seed: u64,
) -> Result<EtaEstimate> {
    if cfg.trials == 0 {
        return Err(Error::Domain("eta estimation needs trials".into()));
    }
    let values: Result<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut walk = proto.clone();
            walk.restart(&mut rng);
            let mut s = 0.0;
            let mut anchor = 0.0;
            for _ in 0..cfg.burn_in_ladders {
                anchor = next_ladder(&mut walk, &mut s, anchor, cfg.cap_steps, &mut rng)?;
            }
            let mut sum = 0.0f64;
            let mut run = 0u64;
            let mut s_rel = 0.0f64;
            for _ in 0..cfg.cap_steps {
                s_rel += walk.step(&mut rng);
                sum += (-s_rel).exp();
                if s_rel > cfg.trunc_threshold {
                    run += 1;
                    if run >= ETA_STOP_RUN {
                        return Ok(sum.ln_1p());
                    }
                } else {
                    run = 0;
                }
            }
            Err(Error::Estimation(format!(
                "walk failed to exceed the truncation threshold {} within {} steps",
                cfg.trunc_threshold, cfg.cap_steps
            )))
        })
        .collect();
    let values = values?;
    let est = mc_from_values(&values, 0, seed, 0.0);
    Ok(EtaEstimate {
        mean_eta: est.mean,
        se: est.std_error,
        truncation_threshold: cfg.trunc_threshold,
        trials: cfg.trials,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Poisson-equation correction
// ---------------------------------------------------------------------------

/// Truncated-series estimates of the Poisson-equation solution at probe
/// states, its stationary-ladder integral, and its value at the walk's own
/// initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// One value per probe state, aligned with the caller's probe order.
    pub delta_at: Vec<f64>,
    /// One-step tail drift residual per probe state (the plug-in residual of
    /// the Poisson equation at the truncation horizon).
    pub residuals: Vec<f64>,
    /// Value at the walk's initial distribution (fresh restarts).
    pub delta_at_init: f64,
    pub init_residual: f64,
    /// Average of the solution over the supplied stationary-ladder states.
    pub integral_mplus: f64,
    pub horizon: u64,
    pub replicates: u64,
    pub k_hat: f64,
    pub seed: u64,
}

/// Delta estimation configuration.
#[derive(Debug, Clone, Copy)]
pub struct DeltaConfig {
    /// Series truncation horizon.
    pub horizon: u64,
    /// Replicate paths per probe state.
    pub replicates: u64,
    /// When set, any probe whose residual exceeds this raises a diagnostic
    /// error instead of returning.
    pub residual_tol: Option<f64>,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig {
            horizon: 200,
            replicates: 200,
            residual_tol: None,
        }
    }
}

enum DeltaStart<'a, S> {
    At(&'a S),
    Fresh,
}

/// Nested Monte Carlo for one probe: `delta(w) = -sum_{n=0}^{H}
/// (E_w sigma_{n+1} - K)`, which telescopes to minus the centered expected
/// path sum; the residual is the centered mean increment one step past the
/// horizon.
fn delta_at_start<W: MarkovWalk>(
    proto: &W,
    start: DeltaStart<'_, W::State>,
    k_hat: f64,
    horizon: u64,
    replicates: u64,
    seed: u64,
    stream_base: u64,
) -> (f64, f64) {
    let mut sum_path = 0.0f64;
    let mut sum_tail = 0.0f64;
    for j in 0..replicates {
        let mut rng = trial_rng(seed, stream_base + j);
        let mut walk = proto.clone();
        match &start {
            DeltaStart::At(s) => walk.set_state(s),
            DeltaStart::Fresh => walk.restart(&mut rng),
        }
        let mut path = 0.0;
        for _ in 0..=horizon {
            path += walk.step(&mut rng);
        }
        sum_path += path;
        sum_tail += walk.step(&mut rng);
    }
    let mean_path = sum_path / replicates as f64;
    let mean_tail = sum_tail / replicates as f64;
    let delta = -(mean_path - (horizon + 1) as f64 * k_hat);
    let residual = (mean_tail - k_hat).abs();
    (delta, residual)
}

/// Estimates the Poisson-equation solution at every probe state by the
/// truncated series, averages it over the supplied stationary-ladder states,
/// and evaluates it at the walk's initial law.
pub fn estimate_delta<W: MarkovWalk + Sync>(
    proto: &W,
    probes: &[W::State],
    mplus_states: &[W::State],
    k_hat: f64,
    cfg: &DeltaConfig,
    seed: u64,
) -> Result<DeltaEstimate> {
    if cfg.replicates == 0 {
        return Err(Error::Domain("delta estimation needs replicates".into()));
    }
    let r = cfg.replicates;
    let probe_results: Vec<(f64, f64)> = probes
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            delta_at_start(
                proto,
                DeltaStart::At(w),
                k_hat,
                cfg.horizon,
                r,
                seed,
                (i as u64) * r,
            )
        })
        .collect();
    let off_mplus = probes.len() as u64 * r;
    let mplus_results: Vec<f64> = mplus_states
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            delta_at_start(
                proto,
                DeltaStart::At(w),
                k_hat,
                cfg.horizon,
                r,
                seed,
                off_mplus + (i as u64) * r,
            )
            .0
        })
        .collect();
    let off_init = off_mplus + mplus_states.len() as u64 * r;
    let (delta_at_init, init_residual) = delta_at_start(
        proto,
        DeltaStart::<W::State>::Fresh,
        k_hat,
        cfg.horizon,
        r,
        seed,
        off_init,
    );

    let delta_at: Vec<f64> = probe_results.iter().map(|(d, _)| *d).collect();
    let residuals: Vec<f64> = probe_results.iter().map(|(_, e)| *e).collect();
    if let Some(tol) = cfg.residual_tol {
        let bad: Vec<String> = residuals
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > tol)
            .map(|(i, e)| format!("probe {i}: {e:.4}"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Estimation(format!(
                "Poisson residual exceeds {tol} at {} of {} probes: {}",
                bad.len(),
                residuals.len(),
                bad.join(", ")
            )));
        }
    }
    let integral_mplus = if mplus_results.is_empty() {
        0.0
    } else {
        mplus_results.iter().sum::<f64>() / mplus_results.len() as f64
    };
    Ok(DeltaEstimate {
        delta_at,
        residuals,
        delta_at_init,
        init_residual,
        integral_mplus,
        horizon: cfg.horizon,
        replicates: r,
        k_hat,
        seed,
    })
}

// ---------------------------------------------------------------------------
// The expansion itself
// ---------------------------------------------------------------------------

/// Second-order approximation of the expected alarm time at threshold `b`:
/// `(b - E eta + rho - int delta dm+ + delta(w_init)) / K`.
pub fn approx_delay(
    b: f64,
    kl: &KlEstimate,
    overshoot: &OvershootSummary,
    eta: &EtaEstimate,
    delta: &DeltaEstimate,
) -> Result<f64> {
    approx_delay_from_parts(
        b,
        kl.k10,
        eta.mean_eta,
        overshoot.rho,
        delta.integral_mplus,
        delta.delta_at_init,
    )
}

/// Scalar form of [`approx_delay`] for callers holding the constants
/// directly (the constants file, for instance).
pub fn approx_delay_from_parts(
    b: f64,
    k10: f64,
    mean_eta: f64,
    rho: f64,
    integral_mplus: f64,
    delta_at_init: f64,
) -> Result<f64> {
    if !(k10 > 0.0) {
        return Err(Error::Domain(format!(
            "post-change drift k10 = {k10} must be positive"
        )));
    }
    Ok((b - mean_eta + rho - integral_mplus + delta_at_init) / k10)
}

// ---------------------------------------------------------------------------
// Nonlinear first passage
// ---------------------------------------------------------------------------

/// Boundary family for nonlinear first-passage sampling.
#[derive(Clone)]
pub enum Boundary {
    Constant(f64),
    Linear { intercept: f64, slope: f64 },
    Callable(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Boundary::Constant(l) => write!(f, "Constant({l})"),
            Boundary::Linear { intercept, slope } => {
                write!(f, "Linear {{ intercept: {intercept}, slope: {slope} }}")
            }
            Boundary::Callable(_) => write!(f, "Callable(..)"),
        }
    }
}

impl Boundary {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Boundary::Constant(l) => *l,
            Boundary::Linear { intercept, slope } => intercept + slope * t,
            Boundary::Callable(f) => f(t),
        }
    }

    /// Crossing scale: the largest `t >= 1` with `A(t) >= t * drift`
    /// (numeric for callable boundaries). Finite for every admissible
    /// boundary.
    pub fn crossing_scale(&self, drift: f64) -> Result<f64> {
        if !(drift > 0.0) {
            return Err(Error::Domain(format!("drift {drift} must be positive")));
        }
        match self {
            Boundary::Constant(l) => Ok((l / drift).max(1.0)),
            Boundary::Linear { intercept, slope } => {
                if *slope >= drift {
                    return Err(Error::Domain(format!(
                        "boundary slope {slope} must stay below the walk drift {drift}"
                    )));
                }
                Ok((intercept / (drift - slope)).max(1.0))
            }
            Boundary::Callable(f) => {
                let mut last_above: Option<f64> = None;
                let mut t = 1.0f64;
                while t < 1e9 {
                    if f(t) >= t * drift {
                        last_above = Some(t);
                    }
                    t *= 1.05;
                }
                let lo = last_above
                    .ok_or_else(|| Error::Domain("boundary never reaches the drift line".into()))?;
                if lo * 1.05 >= 1e9 {
                    return Err(Error::Domain(
                        "boundary crossing scale is not finite within the scan range".into(),
                    ));
                }
                // Bisect the sign change in [lo, 1.05 lo].
                let (mut a, mut b) = (lo, lo * 1.05);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    if f(m) >= m * drift {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                Ok(a)
            }
        }
    }

    /// Boundary slope at the crossing scale (numeric for callables).
    pub fn slope_at_scale(&self, drift: f64) -> Result<f64> {
        match self {
            Boundary::Constant(_) => Ok(0.0),
            Boundary::Linear { slope, .. } => Ok(*slope),
            Boundary::Callable(f) => {
                let b = self.crossing_scale(drift)?;
                let h = (b * 1e-5).max(1e-5);
                Ok((f(b + h) - f(b - h)) / (2.0 * h))
            }
        }
    }
}

/// Perturbation supplier matching the gap between the log SRP statistic and
/// the bare walk: called as `eta(n, S_n)` it returns
/// `log(1 + sum_{k=1}^{n-1} e^{-S_k})` and accumulates the new term.
pub fn sr_log_perturbation() -> impl FnMut(u64, f64) -> f64 {
    let mut acc = 0.0f64;
    move |_n, s_n| {
        let eta = acc.ln_1p();
        acc += (-s_n).exp();
        eta
    }
}

/// Zero perturbation: the bare walk.
pub fn no_perturbation() -> impl FnMut(u64, f64) -> f64 {
    |_n, _s| 0.0
}

/// First-passage samples of a perturbed walk over a boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearPassage {
    pub stopping_time: McEstimate,
    pub overshoot: McEstimate,
    /// `(T, overshoot)` per completed trial, in trial order.
    pub samples: Vec<(u64, f64)>,
}

/// Samples the first crossing of `Z_n = S_n + eta_n` over the boundary:
/// `T = inf { n >= 1 : Z_n > A(n) }` with overshoot `Z_T - A(T)`.
///
/// `perturbation` builds one stateful supplier per trial.
pub fn nonlinear_first_passage<W, G, F>(
    proto: &W,
    perturbation: G,
    boundary: &Boundary,
    trials: u64,
    cap: u64,
    seed: u64,
) -> Result<NonlinearPassage>
where
    W: MarkovWalk + Sync,
    G: Fn() -> F + Sync,
    F: FnMut(u64, f64) -> f64,
{
    let start = Instant::now();
    let results: Vec<Option<(u64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut walk = proto.clone();
            walk.restart(&mut rng);
            let mut eta = perturbation();
            let mut s = 0.0;
            for n in 1..=cap {
                s += walk.step(&mut rng);
                let z = s + eta(n, s);
                let a = boundary.at(n as f64);
                if z > a {
                    return Some((n, z - a));
                }
            }
            None
        })
        .collect();

    let censored = results.iter().filter(|r| r.is_none()).count() as u64;
    if censored == trials {
        return Err(Error::Estimation(
            "every nonlinear passage trial was censored at the cap".into(),
        ));
    }
    let samples: Vec<(u64, f64)> = results.iter().filter_map(|r| *r).collect();
    let times: Vec<f64> = results
        .iter()
        .map(|r| r.map(|(n, _)| n as f64).unwrap_or(cap as f64))
        .collect();
    let overshoots: Vec<f64> = samples.iter().map(|&(_, r)| r).collect();
    let wall = start.elapsed().as_secs_f64();
    Ok(NonlinearPassage {
        stopping_time: mc_from_values(&times, censored, seed, wall),
        overshoot: mc_from_values(&overshoots, censored, seed, wall),
        samples,
    })
}

/// Bundle of all estimated expansion constants for one model pair, as
/// written by the constants pipeline and consumed by the approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConstants {
    pub kl: KlEstimate,
    pub overshoot: OvershootSummary,
    pub eta: EtaEstimate,
    pub delta: DeltaEstimate,
}

impl ExpansionConstants {
    pub fn approx_delay(&self, b: f64) -> Result<f64> {
        approx_delay(b, &self.kl, &self.overshoot, &self.eta, &self.delta)
    }
}

/// Settings for the full constants pipeline.
#[derive(Debug, Clone)]
pub struct ConstantsConfig {
    pub kl_steps: u64,
    pub kl_burn_in: u64,
    pub ladder: LadderConfig,
    pub eta: EtaConfig,
    pub delta: DeltaConfig,
    /// Probe states harvested from a stationary post-change run.
    pub probe_count: usize,
    /// Ladder-epoch states backing the stationary-ladder integral.
    pub mplus_count: usize,
    pub probe_spacing: u64,
    pub probe_burn_in: u64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig {
            kl_steps: 400_000,
            kl_burn_in: 2_000,
            ladder: LadderConfig::default(),
            eta: EtaConfig::default(),
            delta: DeltaConfig::default(),
            probe_count: 50,
            mplus_count: 50,
            probe_spacing: 50,
            probe_burn_in: 1_000,
        }
    }
}

/// Runs the whole pipeline on a model pair: drift, ladder moments, eta and
/// the Poisson correction, each phase on its own derived seed.
pub fn estimate_constants(
    pre: &crate::hmm::HmmParams,
    post: &crate::hmm::HmmParams,
    cfg: &ConstantsConfig,
    seed: u64,
) -> Result<ExpansionConstants> {
    let kl = estimate_kl(post, pre, cfg.kl_steps, cfg.kl_burn_in, derive_seed(seed, 1))?;
    let mut proto_rng = trial_rng(derive_seed(seed, 2), 0);
    let walk = crate::walk::HmmLogLrWalk::post_stationary(pre, post, &mut proto_rng)?;
    let overshoot = simulate_ladder(&walk, &cfg.ladder, derive_seed(seed, 3))?;
    let eta = estimate_eta(&walk, &cfg.eta, derive_seed(seed, 4))?;
    let probes = harvest_stationary_states(
        &walk,
        cfg.probe_count,
        cfg.probe_spacing,
        cfg.probe_burn_in,
        derive_seed(seed, 5),
    );
    let mplus = harvest_ladder_states(
        &walk,
        cfg.mplus_count,
        cfg.ladder.burn_in_ladders,
        cfg.ladder.cap_steps_per_ladder,
        derive_seed(seed, 6),
    )?;
    // The expansion evaluates the correction at the detector's actual start:
    // pre-change initial draw, post-change dynamics.
    let mut init_rng = trial_rng(derive_seed(seed, 7), 0);
    let init_walk = crate::walk::HmmLogLrWalk::omega_one(pre, post, &mut init_rng)?;
    let at_probes = estimate_delta(&walk, &probes, &mplus, kl.k10, &cfg.delta, derive_seed(seed, 8))?;
    let at_init = estimate_delta(
        &init_walk,
        &[],
        &[],
        kl.k10,
        &cfg.delta,
        derive_seed(seed, 9),
    )?;
    let delta = DeltaEstimate {
        delta_at_init: at_init.delta_at_init,
        init_residual: at_init.init_residual,
        ..at_probes
    };
    Ok(ExpansionConstants {
        kl,
        overshoot,
        eta,
        delta,
    })
}
