//! Hidden Markov models with an optional change point.
//!
//! A model is a finite ergodic chain on `{0, .., d-1}` emitting real
//! observations. Emissions are Gaussian per hidden state, optionally with an
//! AR(1) dependence on the previous observation:
//!
//! ```text
//! xi_k | X_k = x, xi_{k-1}  ~  Normal(mean[x] + ar[x] * xi_{k-1}, stdev[x]^2)
//! ```
//!
//! A [`ChangeScenario`] pairs a pre-change model with a post-change model and
//! a change time `omega`: observations with index `< omega` follow the
//! pre-change law, observations from `omega` on follow the post-change law
//! (`omega = inf` means no change ever occurs). The hidden chain switches its
//! transition law at the same time.

use crate::error::{Error, Result};
use crate::rng::{trial_rng, TrialRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Row-sum tolerance for accepting a transition matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance on `|pi P - pi|_1` for an accepted stationary vector.
pub const STATIONARY_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Emissions
// ---------------------------------------------------------------------------

/// Emission family shared by all hidden states of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionFamily {
    /// State-dependent Gaussian, independent of the previous observation.
    Gaussian,
    /// State-dependent Gaussian whose mean shifts by `ar[x] * xi_prev`.
    GaussianAr1,
}

/// Per-state emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmissionSpecRaw", into = "EmissionSpecRaw")]
pub struct EmissionSpec {
    family: EmissionFamily,
    mean: Vec<f64>,
    ar: Vec<f64>,
    stdev: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmissionSpecRaw {
    family: EmissionFamily,
    mean: Vec<f64>,
    #[serde(default)]
    ar: Vec<f64>,
    stdev: Vec<f64>,
}

impl TryFrom<EmissionSpecRaw> for EmissionSpec {
    type Error = Error;
    fn try_from(raw: EmissionSpecRaw) -> Result<Self> {
        let ar = if raw.ar.is_empty() {
            vec![0.0; raw.mean.len()]
        } else {
            raw.ar
        };
        EmissionSpec::new(raw.family, raw.mean, ar, raw.stdev)
    }
}

impl From<EmissionSpec> for EmissionSpecRaw {
    fn from(spec: EmissionSpec) -> Self {
        EmissionSpecRaw {
            family: spec.family,
            mean: spec.mean,
            ar: spec.ar,
            stdev: spec.stdev,
        }
    }
}

impl EmissionSpec {
    /// Validates and builds an emission spec; all three vectors are indexed
    /// by hidden state.
    pub fn new(
        family: EmissionFamily,
        mean: Vec<f64>,
        ar: Vec<f64>,
        stdev: Vec<f64>,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Validation("emission spec has no states".into()));
        }
        if ar.len() != d || stdev.len() != d {
            return Err(Error::Validation(format!(
                "emission parameter lengths disagree: mean {}, ar {}, stdev {}",
                d,
                ar.len(),
                stdev.len()
            )));
        }
        for (x, &s) in stdev.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Validation(format!(
                    "stdev[{x}] = {s} must be a positive finite number"
                )));
            }
        }
        for (x, &m) in mean.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::Validation(format!("mean[{x}] = {m} is not finite")));
            }
        }
        for (x, &a) in ar.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Validation(format!("ar[{x}] = {a} is not finite")));
            }
            match family {
                EmissionFamily::Gaussian if a != 0.0 => {
                    return Err(Error::Validation(format!(
                        "gaussian family requires ar[{x}] = 0, got {a}"
                    )));
                }
                EmissionFamily::GaussianAr1 if a.abs() >= 1.0 => {
                    return Err(Error::Validation(format!(
                        "gaussian_ar1 requires |ar[{x}]| < 1 for an ergodic observation chain, got {a}"
                    )));
                }
                _ => {}
            }
        }
        Ok(EmissionSpec {
            family,
            mean,
            ar,
            stdev,
        })
    }

    /// Gaussian emissions with unit-free means and stdevs, `ar = 0`.
    pub fn gaussian(mean: Vec<f64>, stdev: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        EmissionSpec::new(EmissionFamily::Gaussian, mean, vec![0.0; d], stdev)
    }

    pub fn family(&self) -> EmissionFamily {
        self.family
    }

    pub fn states(&self) -> usize {
        self.mean.len()
    }

    /// Conditional mean of the emission for `state` given the previous
    /// observation.
    pub fn cond_mean(&self, state: usize, xi_prev: f64) -> f64 {
        self.mean[state] + self.ar[state] * xi_prev
    }

    pub fn stdev(&self, state: usize) -> f64 {
        self.stdev[state]
    }

    /// Log transition density `log f(xi; phi_state | xi_prev)`.
    pub fn log_density(&self, state: usize, xi: f64, xi_prev: f64) -> f64 {
        let s = self.stdev[state];
        let z = (xi - self.cond_mean(state, xi_prev)) / s;
        -0.5 * z * z - s.ln() - LN_SQRT_2PI
    }

    /// Draws one emission for `state` given the previous observation.
    pub fn sample<R: Rng + ?Sized>(&self, state: usize, xi_prev: f64, rng: &mut R) -> f64 {
        let normal = Normal::new(self.cond_mean(state, xi_prev), self.stdev[state])
            .expect("validated stdev is positive");
        normal.sample(rng)
    }
}

/// Transition density `f(xi; phi_state | xi_prev)` of the observation chain.
///
/// For the plain Gaussian family the value does not depend on `xi_prev`.
pub fn emission_density(spec: &EmissionSpec, state: usize, xi: f64, xi_prev: f64) -> f64 {
    spec.log_density(state, xi, xi_prev).exp()
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

/// One parameterized hidden Markov model: transition matrix, emission spec
/// and the stationary vector of the hidden chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmParamsRaw", into = "HmmParamsRaw")]
pub struct HmmParams {
    d: usize,
    /// Row-major `d * d` transition probabilities.
    trans: Vec<f64>,
    emission: EmissionSpec,
    stationary: Vec<f64>,
}

/// On-disk schema for a model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HmmParamsRaw {
    d: usize,
    trans: Vec<Vec<f64>>,
    emission: EmissionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stationary: Option<Vec<f64>>,
}

impl TryFrom<HmmParamsRaw> for HmmParams {
    type Error = Error;
    fn try_from(raw: HmmParamsRaw) -> Result<Self> {
        if raw.trans.len() != raw.d {
            return Err(Error::Validation(format!(
                "field d = {} disagrees with {} transition rows",
                raw.d,
                raw.trans.len()
            )));
        }
        match raw.stationary {
            Some(pi) => HmmParams::with_stationary(raw.trans, raw.emission, pi),
            None => HmmParams::new(raw.trans, raw.emission),
        }
    }
}

impl From<HmmParams> for HmmParamsRaw {
    fn from(p: HmmParams) -> Self {
        let rows = (0..p.d).map(|x| p.row(x).to_vec()).collect();
        HmmParamsRaw {
            d: p.d,
            trans: rows,
            emission: p.emission,
            stationary: Some(p.stationary),
        }
    }
}

impl HmmParams {
    /// Validates the transition matrix, checks irreducibility, computes the
    /// stationary vector and builds the model.
    pub fn new(trans: Vec<Vec<f64>>, emission: EmissionSpec) -> Result<Self> {
        let stationary = stationary_distribution(&trans)?;
        Self::with_stationary(trans, emission, stationary)
    }

    /// As [`HmmParams::new`] but with a caller-supplied stationary vector,
    /// which is verified against `pi P = pi`.
    pub fn with_stationary(
        trans: Vec<Vec<f64>>,
        emission: EmissionSpec,
        stationary: Vec<f64>,
    ) -> Result<Self> {
        let d = trans.len();
        validate_transition_matrix(&trans)?;
        if emission.states() != d {
            return Err(Error::Validation(format!(
                "emission spec has {} states but transition matrix has {d}",
                emission.states()
            )));
        }
        if stationary.len() != d {
            return Err(Error::Validation(format!(
                "stationary vector length {} does not match d = {d}",
                stationary.len()
            )));
        }
        let sum: f64 = stationary.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "stationary vector sums to {sum}, expected 1"
            )));
        }
        let mut resid = 0.0;
        for y in 0..d {
            let mut py = 0.0;
            for x in 0..d {
                py += stationary[x] * trans[x][y];
            }
            resid += (py - stationary[y]).abs();
        }
        if resid > STATIONARY_TOL {
            return Err(Error::Validation(format!(
                "|pi P - pi|_1 = {resid:.3e} exceeds {STATIONARY_TOL:.0e}"
            )));
        }
        let flat = trans.into_iter().flatten().collect();
        Ok(HmmParams {
            d,
            trans: flat,
            emission,
            stationary,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn emission(&self) -> &EmissionSpec {
        &self.emission
    }

    /// Transition probability from `x` to `y`.
    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.trans[x * self.d + y]
    }

    /// Row `x` of the transition matrix.
    pub fn row(&self, x: usize) -> &[f64] {
        &self.trans[x * self.d..(x + 1) * self.d]
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Draws a state from the stationary vector.
    pub fn sample_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.stationary, rng)
    }
}

fn validate_transition_matrix(trans: &[Vec<f64>]) -> Result<()> {
    let d = trans.len();
    if d == 0 {
        return Err(Error::Validation("transition matrix is empty".into()));
    }
    for (x, row) in trans.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Validation(format!(
                "row {x} has {} entries, expected {d}",
                row.len()
            )));
        }
        let mut sum = 0.0;
        for (y, &p) in row.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Validation(format!(
                    "trans[{x}][{y}] = {p} must be a finite nonnegative probability"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!(
                "row {x} sums to {sum:.17}, which deviates from 1 by more than {ROW_SUM_TOL:.0e}"
            )));
        }
    }
    check_irreducible(trans)
}

/// The chain is irreducible iff the directed graph of positive transitions is
/// strongly connected: every state reachable from state 0, and state 0
/// reachable from every state.
fn check_irreducible(trans: &[Vec<f64>]) -> Result<()> {
    let d = trans.len();
    let forward = reachable_from_zero(trans, false);
    if let Some(bad) = (0..d).find(|&x| !forward[x]) {
        return Err(Error::Validation(format!(
            "chain is reducible: state {bad} is unreachable from state 0"
        )));
    }
    let backward = reachable_from_zero(trans, true);
    if let Some(bad) = (0..d).find(|&x| !backward[x]) {
        return Err(Error::Validation(format!(
            "chain is reducible: state 0 is unreachable from state {bad}"
        )));
    }
    Ok(())
}

fn reachable_from_zero(trans: &[Vec<f64>], reversed: bool) -> Vec<bool> {
    let d = trans.len();
    let mut seen = vec![false; d];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(x) = stack.pop() {
        for y in 0..d {
            let p = if reversed { trans[y][x] } else { trans[x][y] };
            if p > 0.0 && !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    seen
}

/// Solves `pi P = pi`, `sum pi = 1` by a direct linear solve of the
/// transposed system with an appended normalization row.
///
/// Rejects non-stochastic or reducible matrices, naming the offending row or
/// state in the error.
pub fn stationary_distribution(trans: &[Vec<f64>]) -> Result<Vec<f64>> {
    validate_transition_matrix(trans)?;
    let d = trans.len();
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = DMatrix::<f64>::zeros(d, d);
    for x in 0..d {
        for y in 0..d {
            a[(y, x)] = trans[x][y] - if x == y { 1.0 } else { 0.0 };
        }
    }
    for x in 0..d {
        a[(d - 1, x)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(d);
    b[d - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("singular system while solving pi P = pi".into()))?;

    let mut out: Vec<f64> = pi.iter().copied().collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    let mut resid = 0.0;
    for y in 0..d {
        let mut py = 0.0;
        for x in 0..d {
            py += out[x] * trans[x][y];
        }
        resid += (py - out[y]).abs();
    }
    if resid > STATIONARY_TOL {
        return Err(Error::Degenerate(format!(
            "stationary solve residual {resid:.3e} exceeds {STATIONARY_TOL:.0e}"
        )));
    }
    if out.iter().any(|&v| v <= 0.0) {
        return Err(Error::Degenerate(
            "stationary vector has a nonpositive entry on an irreducible chain".into(),
        ));
    }
    Ok(out)
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Advances the hidden chain one step and emits the next observation:
/// the state moves first, then the emission conditions on the new state and
/// the previous observation.
pub fn sample_step<R: Rng + ?Sized>(
    params: &HmmParams,
    state: usize,
    xi_prev: f64,
    rng: &mut R,
) -> (usize, f64) {
    let next = sample_categorical(params.row(state), rng);
    let xi = params.emission.sample(next, xi_prev, rng);
    (next, xi)
}

// ---------------------------------------------------------------------------
// Change scenarios
// ---------------------------------------------------------------------------

/// Change time: index of the first observation drawn from the post-change
/// law, or `Infinite` for no change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangePoint {
    Finite(u64),
    Infinite,
}

impl ChangePoint {
    /// A change at time 0 is indistinguishable from a change at time 1
    /// (the initial state is drawn pre-change either way), so 0 normalizes
    /// to 1.
    pub fn finite(omega: u64) -> Self {
        ChangePoint::Finite(omega.max(1))
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ChangePoint::Finite(_))
    }

    /// True when observation index `k` is governed by the post-change law.
    pub fn is_post_change(&self, k: u64) -> bool {
        match self {
            ChangePoint::Finite(omega) => k >= *omega,
            ChangePoint::Infinite => false,
        }
    }
}

impl Serialize for ChangePoint {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ChangePoint::Finite(k) => ser.serialize_u64(*k),
            ChangePoint::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ChangePoint {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(de)? {
            Raw::Int(k) => Ok(ChangePoint::finite(k)),
            Raw::Str(s) if s == "inf" => Ok(ChangePoint::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "omega must be a positive integer or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Pre-change model, post-change model and the change time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChangeScenarioRaw", into = "ChangeScenarioRaw")]
pub struct ChangeScenario {
    pre: HmmParams,
    post: HmmParams,
    omega: ChangePoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChangeScenarioRaw {
    pre: HmmParams,
    post: HmmParams,
    omega: ChangePoint,
}

impl TryFrom<ChangeScenarioRaw> for ChangeScenario {
    type Error = Error;
    fn try_from(raw: ChangeScenarioRaw) -> Result<Self> {
        ChangeScenario::new(raw.pre, raw.post, raw.omega)
    }
}

impl From<ChangeScenario> for ChangeScenarioRaw {
    fn from(sc: ChangeScenario) -> Self {
        ChangeScenarioRaw {
            pre: sc.pre,
            post: sc.post,
            omega: sc.omega,
        }
    }
}

impl ChangeScenario {
    pub fn new(pre: HmmParams, post: HmmParams, omega: ChangePoint) -> Result<Self> {
        if pre.d() != post.d() {
            return Err(Error::Validation(format!(
                "pre-change model has d = {} but post-change model has d = {}",
                pre.d(),
                post.d()
            )));
        }
        let omega = match omega {
            ChangePoint::Finite(k) => ChangePoint::finite(k),
            inf => inf,
        };
        Ok(ChangeScenario { pre, post, omega })
    }

    /// No-change scenario over the given model pair (used for run-length
    /// experiments, where the detector still needs both hypotheses).
    pub fn no_change(pre: HmmParams, post: HmmParams) -> Result<Self> {
        Self::new(pre, post, ChangePoint::Infinite)
    }

    pub fn pre(&self) -> &HmmParams {
        &self.pre
    }

    pub fn post(&self) -> &HmmParams {
        &self.post
    }

    pub fn omega(&self) -> ChangePoint {
        self.omega
    }

    /// Same models, different change time.
    pub fn with_omega(&self, omega: ChangePoint) -> Self {
        ChangeScenario {
            pre: self.pre.clone(),
            post: self.post.clone(),
            omega,
        }
    }

    /// Model generating observation `k`.
    fn regime(&self, k: u64) -> &HmmParams {
        if self.omega.is_post_change(k) {
            &self.post
        } else {
            &self.pre
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Streaming sampler over a change scenario.
///
/// `start` draws the initial hidden state from the pre-change stationary
/// vector and the initial observation with `xi_prev = 0`; `advance` then
/// produces one observation per call, switching regimes at the change time.
#[derive(Debug, Clone)]
pub struct ScenarioSampler<'a> {
    scenario: &'a ChangeScenario,
    state: usize,
    xi: f64,
    /// Index of the latest emitted observation.
    step: u64,
}

impl<'a> ScenarioSampler<'a> {
    pub fn start<R: Rng + ?Sized>(scenario: &'a ChangeScenario, rng: &mut R) -> Self {
        let pre = scenario.pre();
        let state = pre.sample_stationary(rng);
        let xi = pre.emission().sample(state, 0.0, rng);
        ScenarioSampler {
            scenario,
            state,
            xi,
            step: 0,
        }
    }

    /// Latest observation.
    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Latest hidden state.
    pub fn hidden(&self) -> usize {
        self.state
    }

    /// Index of the latest observation.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Generates the next observation and returns it.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        self.step += 1;
        let params = self.scenario.regime(self.step);
        let (next, xi) = sample_step(params, self.state, self.xi, rng);
        self.state = next;
        self.xi = xi;
        xi
    }
}

/// One sampled trajectory of observations and hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub observations: Vec<f64>,
    pub hidden: Vec<usize>,
    pub omega: ChangePoint,
    pub seed: u64,
}

/// Samples `horizon` observations (indices `0 .. horizon-1`) from the
/// scenario. Identical `(scenario, horizon, seed)` yields a bit-identical
/// path.
pub fn sample_changed_path(scenario: &ChangeScenario, horizon: u64, seed: u64) -> SamplePath {
    let mut rng = trial_rng(seed, 0);
    sample_changed_path_with(scenario, horizon, seed, &mut rng)
}

/// As [`sample_changed_path`] but drawing from a caller-held RNG; `seed` is
/// recorded as metadata only.
pub fn sample_changed_path_with(
    scenario: &ChangeScenario,
    horizon: u64,
    seed: u64,
    rng: &mut TrialRng,
) -> SamplePath {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut observations = Vec::with_capacity(horizon as usize);
    let mut hidden = Vec::with_capacity(horizon as usize);
    let mut sampler = ScenarioSampler::start(scenario, rng);
    observations.push(sampler.xi());
    hidden.push(sampler.hidden());
    for _ in 1..horizon {
        sampler.advance(rng);
        observations.push(sampler.xi());
        hidden.push(sampler.hidden());
    }
    SamplePath {
        observations,
        hidden,
        omega: scenario.omega(),
        seed,
    }
}
