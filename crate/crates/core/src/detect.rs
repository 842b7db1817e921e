//! Streaming stopping rules fed by log-likelihood-ratio increments.
//!
//! Three detectors over a common increment stream `sigma_1, sigma_2, ..`
//! (one increment per observation after the initial filter state):
//!
//! ```text
//! SRP:       R_{n+1} = e^sigma (1 + R_n),        alarm at log R_n >= b
//! CUSUM:     G_{n+1} = max(G_n, 0) + sigma,      alarm at G_n >= b
//! Shiryaev:  R_{n+1} = e^sigma (1 + R_n) / q,    alarm at log R_n >= b
//! ```
//!
//! The SRP statistic grows linearly before a change and exponentially after
//! it, so the recursion runs in the log domain throughout. The SRP start is
//! either zero or a draw from the quasi-stationary law of the statistic
//! conditioned on no alarm, estimated by a particle system.

use crate::error::{Error, Result};
use crate::hmm::{ChangeScenario, ScenarioSampler};
use crate::likelihood::{init_filter, FilterPair};
use crate::rng::{trial_rng, TrialRng};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `log(1 + e^x)` without overflow for large `x` (and exact 0 for `x = -inf`).
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stopping rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Srp,
    Cusum,
    Shiryaev,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Srp => "srp",
            DetectorKind::Cusum => "cusum",
            DetectorKind::Shiryaev => "shiryaev",
        }
    }
}

/// Initial value policy for the SRP statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Zero,
    QuasiStationary,
}

/// Detector configuration as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub rule: DetectorKind,
    pub log_b: f64,
    /// Geometric prior parameter, required for the Shiryaev rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub init: InitPolicy,
}

impl DetectorConfig {
    pub fn srp(log_b: f64) -> Self {
        DetectorConfig {
            rule: DetectorKind::Srp,
            log_b,
            p: None,
            init: InitPolicy::Zero,
        }
    }

    pub fn srp_quasi_stationary(log_b: f64) -> Self {
        DetectorConfig {
            rule: DetectorKind::Srp,
            log_b,
            p: None,
            init: InitPolicy::QuasiStationary,
        }
    }

    pub fn cusum(log_b: f64) -> Self {
        DetectorConfig {
            rule: DetectorKind::Cusum,
            log_b,
            p: None,
            init: InitPolicy::Zero,
        }
    }

    pub fn shiryaev(log_b: f64, p: f64) -> Self {
        DetectorConfig {
            rule: DetectorKind::Shiryaev,
            log_b,
            p: Some(p),
            init: InitPolicy::Zero,
        }
    }

    pub fn with_log_b(&self, log_b: f64) -> Self {
        let mut c = self.clone();
        c.log_b = log_b;
        c
    }
}

// ---------------------------------------------------------------------------
// SRP
// ---------------------------------------------------------------------------

/// SRP start value.
#[derive(Debug, Clone, Copy)]
pub enum SrpStart<'a> {
    Zero,
    QuasiStationary(&'a QuasiStationaryDist),
}

/// Shiryaev-Roberts-Pollak statistic in log form.
#[derive(Debug, Clone, PartialEq)]
pub struct SrpState {
    log_b: f64,
    /// `log R_n`; negative infinity encodes `R = 0`.
    log_r: f64,
    n: u64,
    alarmed: bool,
    overshoot: Option<f64>,
}

impl SrpState {
    pub fn log_r(&self) -> f64 {
        self.log_r
    }

    pub fn log_b(&self) -> f64 {
        self.log_b
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    /// Log-scale overshoot `log R_N - b`, present once alarmed.
    pub fn overshoot(&self) -> Option<f64> {
        self.overshoot
    }
}

/// Builds the SRP state with a zero or quasi-stationary start.
pub fn srp_init<R: Rng + ?Sized>(log_b: f64, init: SrpStart<'_>, rng: &mut R) -> Result<SrpState> {
    if !(log_b > 0.0) {
        return Err(Error::Domain(format!(
            "SRP threshold log_b = {log_b} must be positive"
        )));
    }
    let log_r = match init {
        SrpStart::Zero => f64::NEG_INFINITY,
        SrpStart::QuasiStationary(dist) => {
            let r = dist.sample(rng);
            if r > 0.0 {
                r.ln()
            } else {
                f64::NEG_INFINITY
            }
        }
    };
    let alarmed = log_r >= log_b;
    Ok(SrpState {
        log_b,
        log_r,
        n: 0,
        alarmed,
        overshoot: if alarmed { Some(log_r - log_b) } else { None },
    })
}

/// One SRP update `R <- e^sigma (1 + R)`. No-op once alarmed.
pub fn srp_step(s: &SrpState, sigma: f64) -> SrpState {
    let mut next = s.clone();
    srp_step_mut(&mut next, sigma);
    next
}

pub fn srp_step_mut(s: &mut SrpState, sigma: f64) {
    if s.alarmed {
        return;
    }
    s.log_r = sigma + log1p_exp(s.log_r);
    s.n += 1;
    if s.log_r >= s.log_b {
        s.alarmed = true;
        s.overshoot = Some(s.log_r - s.log_b);
    }
}

// ---------------------------------------------------------------------------
// CUSUM
// ---------------------------------------------------------------------------

/// CUSUM statistic: running maximum of suffix sums of the increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumState {
    log_b: f64,
    g: f64,
    n: u64,
    alarmed: bool,
    overshoot: Option<f64>,
}

impl CusumState {
    pub fn new(log_b: f64) -> Result<Self> {
        if !(log_b > 0.0) {
            return Err(Error::Domain(format!(
                "CUSUM threshold log_b = {log_b} must be positive"
            )));
        }
        Ok(CusumState {
            log_b,
            g: 0.0,
            n: 0,
            alarmed: false,
            overshoot: None,
        })
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn log_b(&self) -> f64 {
        self.log_b
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    pub fn overshoot(&self) -> Option<f64> {
        self.overshoot
    }
}

/// One CUSUM update `G <- max(G, 0) + sigma`. No-op once alarmed.
pub fn cusum_step(s: &CusumState, sigma: f64) -> CusumState {
    let mut next = s.clone();
    cusum_step_mut(&mut next, sigma);
    next
}

pub fn cusum_step_mut(s: &mut CusumState, sigma: f64) {
    if s.alarmed {
        return;
    }
    s.g = s.g.max(0.0) + sigma;
    s.n += 1;
    if s.g >= s.log_b {
        s.alarmed = true;
        s.overshoot = Some(s.g - s.log_b);
    }
}

// ---------------------------------------------------------------------------
// Shiryaev
// ---------------------------------------------------------------------------

/// Bayesian statistic for a geometric change-time prior with parameter `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiryaevState {
    p: f64,
    log_b: f64,
    /// `log R_{n,p}`; negative infinity encodes `R = 0`.
    log_r: f64,
    n: u64,
    alarmed: bool,
    overshoot: Option<f64>,
}

impl ShiryaevState {
    pub fn new(log_b: f64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!(
                "Shiryaev prior parameter p = {p} must lie in (0, 1]"
            )));
        }
        if !(log_b > 0.0) {
            return Err(Error::Domain(format!(
                "Shiryaev threshold log_b = {log_b} must be positive"
            )));
        }
        Ok(ShiryaevState {
            p,
            log_b,
            log_r: f64::NEG_INFINITY,
            n: 0,
            alarmed: false,
            overshoot: None,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        1.0 - self.p
    }

    pub fn log_r(&self) -> f64 {
        self.log_r
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn alarmed(&self) -> bool {
        self.alarmed
    }

    pub fn overshoot(&self) -> Option<f64> {
        self.overshoot
    }

    /// Posterior probability that the change has occurred:
    /// `R / (R + 1/p)`, a strictly increasing function of `R`.
    pub fn posterior(&self) -> f64 {
        // sigmoid(log R + log p), stable at both ends
        let t = self.log_r + self.p.ln();
        if t >= 0.0 {
            1.0 / (1.0 + (-t).exp())
        } else {
            let e = t.exp();
            e / (1.0 + e)
        }
    }
}

/// One Shiryaev update `R <- e^sigma (1 + R) / q`. No-op once alarmed.
pub fn shiryaev_step(s: &ShiryaevState, sigma: f64) -> ShiryaevState {
    let mut next = s.clone();
    shiryaev_step_mut(&mut next, sigma);
    next
}

pub fn shiryaev_step_mut(s: &mut ShiryaevState, sigma: f64) {
    if s.alarmed {
        return;
    }
    // p = 1 gives q = 0: the statistic is infinite after one step and the
    // rule alarms immediately, which the log domain represents exactly.
    s.log_r = sigma + log1p_exp(s.log_r) - (1.0 - s.p).ln();
    s.n += 1;
    if s.log_r >= s.log_b {
        s.alarmed = true;
        s.overshoot = Some(s.log_r - s.log_b);
    }
}

// ---------------------------------------------------------------------------
// Unified detector
// ---------------------------------------------------------------------------

/// Any of the three stopping rules behind one stepping interface.
#[derive(Debug, Clone)]
pub enum Detector {
    Srp(SrpState),
    Cusum(CusumState),
    Shiryaev(ShiryaevState),
}

impl Detector {
    /// Builds a detector from its config; a quasi-stationary SRP start draws
    /// from `psi`.
    pub fn build<R: Rng + ?Sized>(
        cfg: &DetectorConfig,
        psi: Option<&QuasiStationaryDist>,
        rng: &mut R,
    ) -> Result<Self> {
        match cfg.rule {
            DetectorKind::Srp => {
                let start = match cfg.init {
                    InitPolicy::Zero => SrpStart::Zero,
                    InitPolicy::QuasiStationary => {
                        let dist = psi.ok_or_else(|| {
                            Error::Domain(
                                "quasi_stationary init requires an estimated start distribution"
                                    .into(),
                            )
                        })?;
                        SrpStart::QuasiStationary(dist)
                    }
                };
                Ok(Detector::Srp(srp_init(cfg.log_b, start, rng)?))
            }
            DetectorKind::Cusum => Ok(Detector::Cusum(CusumState::new(cfg.log_b)?)),
            DetectorKind::Shiryaev => {
                let p = cfg.p.ok_or_else(|| {
                    Error::Domain("shiryaev rule requires the prior parameter p".into())
                })?;
                Ok(Detector::Shiryaev(ShiryaevState::new(cfg.log_b, p)?))
            }
        }
    }

    pub fn step_mut(&mut self, sigma: f64) {
        match self {
            Detector::Srp(s) => srp_step_mut(s, sigma),
            Detector::Cusum(s) => cusum_step_mut(s, sigma),
            Detector::Shiryaev(s) => shiryaev_step_mut(s, sigma),
        }
    }

    pub fn alarmed(&self) -> bool {
        match self {
            Detector::Srp(s) => s.alarmed(),
            Detector::Cusum(s) => s.alarmed(),
            Detector::Shiryaev(s) => s.alarmed(),
        }
    }

    pub fn overshoot(&self) -> Option<f64> {
        match self {
            Detector::Srp(s) => s.overshoot(),
            Detector::Cusum(s) => s.overshoot(),
            Detector::Shiryaev(s) => s.overshoot(),
        }
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Srp(_) => DetectorKind::Srp,
            Detector::Cusum(_) => DetectorKind::Cusum,
            Detector::Shiryaev(_) => DetectorKind::Shiryaev,
        }
    }

    pub fn log_b(&self) -> f64 {
        match self {
            Detector::Srp(s) => s.log_b(),
            Detector::Cusum(s) => s.log_b(),
            Detector::Shiryaev(s) => s.log_b,
        }
    }
}

/// Outcome of running a detector on one sampled stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub rule: DetectorKind,
    pub log_b: f64,
    /// Number of increments consumed at the alarm, or the cap when censored.
    pub stopping_time: u64,
    pub censored: bool,
    /// Log-scale overshoot over the threshold; absent when censored.
    pub overshoot: Option<f64>,
    pub seed: u64,
}

/// Runs a detector over one sampled path of the scenario until it alarms or
/// the step cap is exhausted (a censored report, not an error).
///
/// The initial observation only initializes the filter pair; the detector
/// consumes one log-likelihood-ratio increment per subsequent observation,
/// so `stopping_time = n` means observations `0 ..= n` were seen.
pub fn run_to_alarm(
    scenario: &ChangeScenario,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    cap: u64,
    seed: u64,
) -> Result<AlarmReport> {
    let mut rng = trial_rng(seed, 0);
    run_to_alarm_with(scenario, cfg, psi, cap, seed, &mut rng)
}

/// As [`run_to_alarm`] with a caller-held RNG (`seed` is metadata only).
/// The detector start is drawn before the path begins.
pub fn run_to_alarm_with(
    scenario: &ChangeScenario,
    cfg: &DetectorConfig,
    psi: Option<&QuasiStationaryDist>,
    cap: u64,
    seed: u64,
    rng: &mut TrialRng,
) -> Result<AlarmReport> {
    assert!(cap >= 1, "cap must be at least 1");
    let mut detector = Detector::build(cfg, psi, rng)?;
    let mut sampler = ScenarioSampler::start(scenario, rng);
    let mut fp = init_filter(scenario.pre(), scenario.post(), sampler.xi())?;
    for n in 1..=cap {
        let xi_prev = sampler.xi();
        let xi = sampler.advance(rng);
        let sigma = fp.step(xi, xi_prev, scenario.pre(), scenario.post())?;
        detector.step_mut(sigma);
        if detector.alarmed() {
            return Ok(AlarmReport {
                rule: cfg.rule,
                log_b: cfg.log_b,
                stopping_time: n,
                censored: false,
                overshoot: detector.overshoot(),
                seed,
            });
        }
    }
    Ok(AlarmReport {
        rule: cfg.rule,
        log_b: cfg.log_b,
        stopping_time: cap,
        censored: true,
        overshoot: None,
        seed,
    })
}

/// Default censoring cap for no-change runs at threshold `log_b`.
pub fn default_cap(log_b: f64) -> u64 {
    (50.0 * log_b.exp()).ceil().max(1000.0) as u64
}

// ---------------------------------------------------------------------------
// Quasi-stationary start distribution
// ---------------------------------------------------------------------------

/// Empirical law of the SRP statistic under the no-change measure
/// conditioned on never having alarmed, estimated by a particle system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiStationaryDist {
    /// `(r, weight)` pairs with all `r` in `[0, B)`.
    pub support: Vec<(f64, f64)>,
    pub log_b: f64,
    pub particles: usize,
    pub burn_in: u64,
    pub seed: u64,
}

impl QuasiStationaryDist {
    /// Point mass, mostly useful in tests.
    pub fn point_mass(r: f64, log_b: f64) -> Self {
        QuasiStationaryDist {
            support: vec![(r, 1.0)],
            log_b,
            particles: 1,
            burn_in: 0,
            seed: 0,
        }
    }

    /// Draws one start value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(r, w) in &self.support {
            acc += w;
            if u < acc {
                return r;
            }
        }
        self.support.last().map(|&(r, _)| r).unwrap_or(0.0)
    }

    /// Mean of the support.
    pub fn mean(&self) -> f64 {
        self.support.iter().map(|&(r, w)| r * w).sum()
    }
}

/// One particle of the conditioned SRP system: the statistic plus the state
/// that drives its increments.
#[derive(Clone)]
struct QsParticle {
    r: f64,
    hidden: usize,
    xi: f64,
    u_pre: Vec<f64>,
    u_post: Vec<f64>,
}

/// Particle estimate of the quasi-stationary start distribution.
///
/// `particles` replicas of (statistic, filter state) evolve under the
/// no-change measure; replicas whose statistic crosses `B` are replaced by
/// multinomial resampling from the survivors, which conditions the ensemble
/// on no alarm. After `steps` burn-in sweeps the empirical law of the
/// statistic is returned.
pub fn estimate_quasi_stationary(
    pre: &crate::hmm::HmmParams,
    post: &crate::hmm::HmmParams,
    log_b: f64,
    particles: usize,
    steps: u64,
    seed: u64,
) -> Result<QuasiStationaryDist> {
    let mut sim = QsSystem::init(pre, post, log_b, particles, seed)?;
    for _ in 0..steps {
        sim.sweep()?;
    }
    Ok(sim.dist(steps))
}

/// Fixed-point residual of the estimated quasi-stationary law: the
/// Kolmogorov-Smirnov distance between the burned-in ensemble and its
/// one-step push-forward conditioned on survival.
pub fn quasi_stationary_ks_residual(
    pre: &crate::hmm::HmmParams,
    post: &crate::hmm::HmmParams,
    log_b: f64,
    particles: usize,
    steps: u64,
    seed: u64,
) -> Result<f64> {
    let mut sim = QsSystem::init(pre, post, log_b, particles, seed)?;
    for _ in 0..steps {
        sim.sweep()?;
    }
    let before: Vec<f64> = sim.particles.iter().map(|p| p.r).collect();
    sim.move_particles()?;
    let after: Vec<f64> = sim
        .particles
        .iter()
        .filter(|p| p.r < sim.cap_b)
        .map(|p| p.r)
        .collect();
    if after.is_empty() {
        return Err(Error::Degenerate(
            "push-forward lost every particle; threshold too low".into(),
        ));
    }
    Ok(ks_distance(&before, &after))
}

struct QsSystem<'a> {
    pre: &'a crate::hmm::HmmParams,
    post: &'a crate::hmm::HmmParams,
    cap_b: f64,
    log_b: f64,
    particles: Vec<QsParticle>,
    rng: TrialRng,
    seed: u64,
    scratch: FilterPair,
}

impl<'a> QsSystem<'a> {
    fn init(
        pre: &'a crate::hmm::HmmParams,
        post: &'a crate::hmm::HmmParams,
        log_b: f64,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        if particles == 0 {
            return Err(Error::Domain("particle count must be positive".into()));
        }
        let mut rng = trial_rng(seed, 0);
        let mut out = Vec::with_capacity(particles);
        let mut scratch = None;
        for _ in 0..particles {
            let hidden = pre.sample_stationary(&mut rng);
            let xi = pre.emission().sample(hidden, 0.0, &mut rng);
            let fp = init_filter(pre, post, xi)?;
            out.push(QsParticle {
                r: 0.0,
                hidden,
                xi,
                u_pre: fp.u_pre().to_vec(),
                u_post: fp.u_post().to_vec(),
            });
            if scratch.is_none() {
                scratch = Some(fp);
            }
        }
        Ok(QsSystem {
            pre,
            post,
            cap_b: log_b.exp(),
            log_b,
            particles: out,
            rng,
            seed,
            scratch: scratch.expect("at least one particle"),
        })
    }

    /// Advances every particle one no-change step (statistics may cross B).
    fn move_particles(&mut self) -> Result<()> {
        for p in &mut self.particles {
            let (next, xi) = crate::hmm::sample_step(self.pre, p.hidden, p.xi, &mut self.rng);
            self.scratch.load(&p.u_pre, &p.u_post);
            let sigma = self.scratch.step(xi, p.xi, self.pre, self.post)?;
            p.hidden = next;
            p.xi = xi;
            p.u_pre.copy_from_slice(self.scratch.u_pre());
            p.u_post.copy_from_slice(self.scratch.u_post());
            p.r = sigma.exp() * (1.0 + p.r);
        }
        Ok(())
    }

    /// One conditioned sweep: move, then resample absorbed particles from
    /// the survivors.
    fn sweep(&mut self) -> Result<()> {
        self.move_particles()?;
        let survivors: Vec<usize> = (0..self.particles.len())
            .filter(|&i| self.particles[i].r < self.cap_b)
            .collect();
        if survivors.is_empty() {
            return Err(Error::Degenerate(
                "every particle crossed the threshold in one sweep; threshold too low".into(),
            ));
        }
        for i in 0..self.particles.len() {
            if self.particles[i].r >= self.cap_b {
                let donor = survivors[(self.rng.random::<u64>() % survivors.len() as u64) as usize];
                self.particles[i] = self.particles[donor].clone();
            }
        }
        Ok(())
    }

    fn dist(&self, burn_in: u64) -> QuasiStationaryDist {
        let w = 1.0 / self.particles.len() as f64;
        QuasiStationaryDist {
            support: self.particles.iter().map(|p| (p.r, w)).collect(),
            log_b: self.log_b,
            particles: self.particles.len(),
            burn_in,
            seed: self.seed,
        }
    }
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0.0f64;
    while i < xs.len() && j < ys.len() {
        // Evaluate both empirical CDFs just past the next data value,
        // consuming ties on both sides together.
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
