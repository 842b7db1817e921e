//! Likelihoods and log-likelihood ratios via normalized products of random
//! matrices.
//!
//! For a model with transition matrix `P` and emission densities `f`, the
//! joint density of `xi_0 .. xi_n` is the L1 norm of a matrix product acting
//! on the stationary vector:
//!
//! ```text
//! p(xi_0..xi_n) = | M_n .. M_1 M_0 pi |,   M_0 = diag(f(xi_0; phi_x)),
//! (M_k)[a][b] = P[b][a] * f(xi_k; phi_a | xi_{k-1})
//! ```
//!
//! Raw products under/overflow after tens of steps, so [`FilterPair`] keeps
//! the normalized direction of the product for each of two models and
//! accumulates log norms. The per-step difference of log norms is the
//! increment of the log-likelihood ratio between the two models, and the
//! normalized vectors are the predictive filters.
//!
//! [`brute_force_likelihood`] sums over all hidden paths and is the oracle
//! the matrix representation is tested against.

use crate::error::{Error, Result};
use crate::hmm::HmmParams;
use nalgebra::DMatrix;

/// Normalized filter sum tolerance maintained after every step.
pub const FILTER_SUM_TOL: f64 = 1e-12;

/// Hidden-path count guard for the brute-force oracle.
pub const BRUTE_FORCE_MAX_PATHS: f64 = 1e7;

/// Diagonal initial matrix: entry `(x, x)` is the density of `xi0` under
/// state `x` with no conditioning.
pub fn m0_matrix(params: &HmmParams, xi0: f64) -> DMatrix<f64> {
    let d = params.d();
    DMatrix::from_fn(d, d, |r, c| {
        if r == c {
            crate::hmm::emission_density(params.emission(), r, xi0, 0.0)
        } else {
            0.0
        }
    })
}

/// Step matrix: entry `(a, b)` is `P[b][a] * f(xi; phi_a | xi_prev)`, so the
/// product chain acts on column vectors by predict-then-weigh.
pub fn mk_matrix(params: &HmmParams, xi: f64, xi_prev: f64) -> DMatrix<f64> {
    let d = params.d();
    DMatrix::from_fn(d, d, |a, b| {
        params.p(b, a) * crate::hmm::emission_density(params.emission(), a, xi, xi_prev)
    })
}

/// Two normalized predictive filters (pre- and post-change model) advanced in
/// lockstep, with the running log-likelihood-ratio.
#[derive(Debug, Clone)]
pub struct FilterPair {
    u_pre: Vec<f64>,
    u_post: Vec<f64>,
    last_sigma: f64,
    last_log_norm_pre: f64,
    last_log_norm_post: f64,
    cum_log_lr: f64,
    step_index: u64,
    scratch: Vec<f64>,
}

impl FilterPair {
    /// Normalized pre-change filter.
    pub fn u_pre(&self) -> &[f64] {
        &self.u_pre
    }

    /// Normalized post-change filter.
    pub fn u_post(&self) -> &[f64] {
        &self.u_post
    }

    /// Most recent log-likelihood-ratio increment.
    pub fn last_sigma(&self) -> f64 {
        self.last_sigma
    }

    /// Most recent log norm of the pre-change product step.
    pub fn last_log_norm_pre(&self) -> f64 {
        self.last_log_norm_pre
    }

    /// Most recent log norm of the post-change product step.
    pub fn last_log_norm_post(&self) -> f64 {
        self.last_log_norm_post
    }

    /// Running log-likelihood-ratio (sum of all increments so far, including
    /// the initial one).
    pub fn cum_log_lr(&self) -> f64 {
        self.cum_log_lr
    }

    /// Number of observations consumed after the initial one.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Restores the filter content from a saved state.
    pub fn load(&mut self, u_pre: &[f64], u_post: &[f64]) {
        self.u_pre.copy_from_slice(u_pre);
        self.u_post.copy_from_slice(u_post);
    }

    /// Advances both filters by one observation and returns the
    /// log-likelihood-ratio increment.
    ///
    /// Densities are rescaled by their per-step maximum before
    /// exponentiation, so the update is stable for any finite observation.
    pub fn step(
        &mut self,
        xi: f64,
        xi_prev: f64,
        pre: &HmmParams,
        post: &HmmParams,
    ) -> Result<f64> {
        let log_norm_pre = advance_one(&mut self.u_pre, &mut self.scratch, pre, xi, xi_prev)?;
        let log_norm_post = advance_one(&mut self.u_post, &mut self.scratch, post, xi, xi_prev)?;
        self.last_log_norm_pre = log_norm_pre;
        self.last_log_norm_post = log_norm_post;
        self.last_sigma = log_norm_post - log_norm_pre;
        self.cum_log_lr += self.last_sigma;
        self.step_index += 1;
        Ok(self.last_sigma)
    }
}

/// One normalized filter update `u <- normalize(M u)`; returns `log |M u|`.
fn advance_one(
    u: &mut [f64],
    scratch: &mut Vec<f64>,
    params: &HmmParams,
    xi: f64,
    xi_prev: f64,
) -> Result<f64> {
    let d = params.d();
    scratch.clear();
    // Predict: w[a] = sum_b P[b][a] u[b].
    for a in 0..d {
        let mut acc = 0.0;
        for (b, ub) in u.iter().enumerate() {
            acc += params.p(b, a) * ub;
        }
        scratch.push(acc);
    }
    // Weigh by emission densities, factored by the max log density.
    let spec = params.emission();
    let mut max_log = f64::NEG_INFINITY;
    let mut logs = [0.0f64; 8];
    let mut logs_vec;
    let logs: &mut [f64] = if d <= 8 {
        &mut logs[..d]
    } else {
        logs_vec = vec![0.0; d];
        &mut logs_vec
    };
    for (a, slot) in logs.iter_mut().enumerate() {
        let l = spec.log_density(a, xi, xi_prev);
        *slot = l;
        if l > max_log {
            max_log = l;
        }
    }
    let mut norm = 0.0;
    for a in 0..d {
        scratch[a] *= (logs[a] - max_log).exp();
        norm += scratch[a];
    }
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "filter norm degenerated to {norm} at observation {xi}"
        )));
    }
    for (ua, wa) in u.iter_mut().zip(scratch.iter()) {
        *ua = wa / norm;
    }
    Ok(norm.ln() + max_log)
}

/// Builds the filter pair from the initial observation: each filter is the
/// normalized `M_0 pi` of its model, and the initial log-likelihood-ratio
/// increment is the difference of the two log norms.
pub fn init_filter(pre: &HmmParams, post: &HmmParams, xi0: f64) -> Result<FilterPair> {
    if pre.d() != post.d() {
        return Err(Error::Validation(format!(
            "filter models disagree on state count: {} vs {}",
            pre.d(),
            post.d()
        )));
    }
    let (u_pre, log_norm_pre) = init_one(pre, xi0)?;
    let (u_post, log_norm_post) = init_one(post, xi0)?;
    let sigma0 = log_norm_post - log_norm_pre;
    Ok(FilterPair {
        u_pre,
        u_post,
        last_sigma: sigma0,
        last_log_norm_pre: log_norm_pre,
        last_log_norm_post: log_norm_post,
        cum_log_lr: sigma0,
        step_index: 0,
        scratch: Vec::with_capacity(pre.d()),
    })
}

fn init_one(params: &HmmParams, xi0: f64) -> Result<(Vec<f64>, f64)> {
    let d = params.d();
    let spec = params.emission();
    let logs: Vec<f64> = (0..d).map(|x| spec.log_density(x, xi0, 0.0)).collect();
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut u: Vec<f64> = (0..d)
        .map(|x| params.stationary()[x] * (logs[x] - max_log).exp())
        .collect();
    let norm: f64 = u.iter().sum();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "initial filter norm degenerated to {norm} at observation {xi0}"
        )));
    }
    u.iter_mut().for_each(|v| *v /= norm);
    Ok((u, norm.ln() + max_log))
}

/// Pure-function form of [`FilterPair::step`].
pub fn filter_step(
    fp: &FilterPair,
    xi: f64,
    xi_prev: f64,
    pre: &HmmParams,
    post: &HmmParams,
) -> Result<FilterPair> {
    let mut next = fp.clone();
    next.step(xi, xi_prev, pre, post)?;
    Ok(next)
}

/// Log joint density of an observation sequence under one model, computed by
/// the normalized filter recursion (sum of log norms).
pub fn log_likelihood(params: &HmmParams, xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("empty observation sequence".into()));
    }
    let (mut u, mut total) = init_one(params, xs[0])?;
    let mut scratch = Vec::with_capacity(params.d());
    for k in 1..xs.len() {
        total += advance_one(&mut u, &mut scratch, params, xs[k], xs[k - 1])?;
    }
    Ok(total)
}

/// Log joint density of an observation sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLikelihood {
    pub log_value: f64,
}

/// Exact log joint density by summation over all `d^(n+1)` hidden paths.
///
/// Guarded to at most [`BRUTE_FORCE_MAX_PATHS`] paths.
pub fn brute_force_likelihood(params: &HmmParams, xs: &[f64]) -> Result<PathLikelihood> {
    if xs.is_empty() {
        return Err(Error::Domain("empty observation sequence".into()));
    }
    let d = params.d();
    let n = xs.len();
    let paths = (d as f64).powi(n as i32);
    if paths > BRUTE_FORCE_MAX_PATHS {
        return Err(Error::TooLarge(format!(
            "{d}^{n} = {paths:.3e} hidden paths exceeds the {BRUTE_FORCE_MAX_PATHS:.0e} guard"
        )));
    }
    let spec = params.emission();
    let mut total = 0.0f64;
    let mut path = vec![0usize; n];
    loop {
        let mut p = params.stationary()[path[0]]
            * crate::hmm::emission_density(spec, path[0], xs[0], 0.0);
        for l in 1..n {
            p *= params.p(path[l - 1], path[l])
                * crate::hmm::emission_density(spec, path[l], xs[l], xs[l - 1]);
        }
        total += p;
        // Odometer increment over the path digits.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(PathLikelihood {
                    log_value: total.ln(),
                });
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < d {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Helper for tests and emission spec oracles: density of `xi` under an
/// emission spec marginalized over the stationary vector (the `n = 0` joint
/// density).
pub fn initial_marginal_density(params: &HmmParams, xi0: f64) -> f64 {
    (0..params.d())
        .map(|x| params.stationary()[x] * crate::hmm::emission_density(params.emission(), x, xi0, 0.0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{ChangePoint, ChangeScenario, EmissionFamily, EmissionSpec};
    use crate::rng::trial_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn model(trans: Vec<Vec<f64>>, means: Vec<f64>, sds: Vec<f64>) -> HmmParams {
        HmmParams::new(trans, EmissionSpec::gaussian(means, sds).unwrap()).unwrap()
    }

    fn random_model(rng: &mut crate::rng::TrialRng, d: usize, ar: bool) -> HmmParams {
        let mut rows = Vec::new();
        for _ in 0..d {
            let mut row: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            rows.push(row);
        }
        let means: Vec<f64> = (0..d).map(|_| 3.0 * (rng.random::<f64>() - 0.5)).collect();
        let sds: Vec<f64> = (0..d).map(|_| 0.5 + rng.random::<f64>()).collect();
        let spec = if ar {
            let ars: Vec<f64> = (0..d).map(|_| 1.4 * (rng.random::<f64>() - 0.5)).collect();
            EmissionSpec::new(EmissionFamily::GaussianAr1, means, ars, sds).unwrap()
        } else {
            EmissionSpec::gaussian(means, sds).unwrap()
        };
        HmmParams::new(rows, spec).unwrap()
    }

    #[test]
    fn m0_matrix_is_diagonal_of_densities() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let m = m0_matrix(&p, 0.0);
        assert_relative_eq!(m[(0, 0)], 0.3989422804, epsilon = 1e-9);
        assert_relative_eq!(m[(1, 1)], 0.2419707245, epsilon = 1e-9);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
    }

    #[test]
    fn m0_matrix_equal_states_is_scalar_identity() {
        let p = model(
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            vec![0.7, 0.7],
            vec![1.3, 1.3],
        );
        let m = m0_matrix(&p, 0.1);
        assert_eq!(m[(0, 0)], m[(1, 1)]);
    }

    #[test]
    fn mk_matrix_is_transposed_transition_scaled_by_density() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let m = mk_matrix(&p, 0.0, 0.3);
        let f0 = 0.3989422804;
        let f1 = 0.2419707245;
        assert_relative_eq!(m[(0, 0)], 0.9 * f0, epsilon = 1e-9);
        assert_relative_eq!(m[(0, 1)], 0.2 * f0, epsilon = 1e-9);
        assert_relative_eq!(m[(1, 0)], 0.1 * f1, epsilon = 1e-9);
        assert_relative_eq!(m[(1, 1)], 0.8 * f1, epsilon = 1e-9);
    }

    #[test]
    fn mk_matrix_constant_density_is_scaled_transpose() {
        // With equal emission parameters across states, the density factor is
        // constant and M_k = c * P^T.
        let p = model(
            vec![vec![0.6, 0.4], vec![0.3, 0.7]],
            vec![0.2, 0.2],
            vec![0.9, 0.9],
        );
        let m = mk_matrix(&p, 1.0, -2.0);
        let c = m[(0, 0)] / 0.6;
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(m[(a, b)], c * p.p(b, a), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn d1_matrices_are_scalars() {
        let p = model(vec![vec![1.0]], vec![0.0], vec![1.0]);
        assert_relative_eq!(m0_matrix(&p, 0.0)[(0, 0)], 0.3989422804, epsilon = 1e-9);
        assert_relative_eq!(mk_matrix(&p, 0.0, 9.0)[(0, 0)], 0.3989422804, epsilon = 1e-9);
    }

    #[test]
    fn init_filter_identical_models_gives_zero_lr() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let fp = init_filter(&p, &p, 0.37).unwrap();
        assert_eq!(fp.cum_log_lr(), 0.0);
        assert_eq!(fp.u_pre(), fp.u_post());
    }

    #[test]
    fn init_filter_d1_reduces_to_density_ratio() {
        let pre = model(vec![vec![1.0]], vec![0.0], vec![1.0]);
        let post = model(vec![vec![1.0]], vec![1.0], vec![1.0]);
        let x = 0.6;
        let fp = init_filter(&pre, &post, x).unwrap();
        let expect = crate::hmm::emission_density(post.emission(), 0, x, 0.0).ln()
            - crate::hmm::emission_density(pre.emission(), 0, x, 0.0).ln();
        assert_relative_eq!(fp.cum_log_lr(), expect, epsilon = 1e-14);
    }

    #[test]
    fn init_filter_matches_explicit_m0_products() {
        let pre = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let post = model(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
        );
        let xi0 = 0.3;
        let fp = init_filter(&pre, &post, xi0).unwrap();
        let v_pre = m0_matrix(&pre, xi0) * nalgebra::DVector::from_column_slice(pre.stationary());
        let v_post =
            m0_matrix(&post, xi0) * nalgebra::DVector::from_column_slice(post.stationary());
        let expect = v_post.sum().ln() - v_pre.sum().ln();
        assert_relative_eq!(fp.cum_log_lr(), expect, epsilon = 1e-12);
    }

    #[test]
    fn filter_step_matches_explicit_matrix_action() {
        let pre = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let post = model(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![1.0, 2.0],
            vec![1.0, 1.0],
        );
        let mut fp = init_filter(&pre, &post, 0.3).unwrap();
        let u_pre = nalgebra::DVector::from_column_slice(fp.u_pre());
        let v = mk_matrix(&pre, -0.4, 0.3) * u_pre;
        let expected_log_norm = v.sum().ln();
        let expected_u: Vec<f64> = v.iter().map(|x| x / v.sum()).collect();

        fp.step(-0.4, 0.3, &pre, &post).unwrap();
        assert_relative_eq!(fp.last_log_norm_pre(), expected_log_norm, epsilon = 1e-12);
        for (a, b) in fp.u_pre().iter().zip(expected_u.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_models_give_zero_increments_forever() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let mut rng = trial_rng(4, 0);
        let sc = ChangeScenario::new(p.clone(), p.clone(), ChangePoint::Infinite).unwrap();
        let path = crate::hmm::sample_changed_path(&sc, 200, 4);
        let mut fp = init_filter(&p, &p, path.observations[0]).unwrap();
        for k in 1..path.observations.len() {
            let s = fp
                .step(path.observations[k], path.observations[k - 1], &p, &p)
                .unwrap();
            assert_eq!(s, 0.0);
        }
        assert_eq!(fp.cum_log_lr(), 0.0);
        let _ = rng.random::<f64>();
    }

    #[test]
    fn d1_gaussian_increment_closed_form() {
        // N(0,1) vs N(1,1): sigma = x - 1/2 exactly.
        let pre = model(vec![vec![1.0]], vec![0.0], vec![1.0]);
        let post = model(vec![vec![1.0]], vec![1.0], vec![1.0]);
        let mut fp = init_filter(&pre, &post, 0.0).unwrap();
        for &x in &[-1.3, 0.0, 0.5, 2.2] {
            let s = fp.step(x, 0.0, &pre, &post).unwrap();
            assert_relative_eq!(s, x - 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn filters_stay_probability_vectors() {
        let mut rng = trial_rng(21, 0);
        for _ in 0..20 {
            let d = 1 + (rng.random::<u32>() % 3) as usize;
            let pre = random_model(&mut rng, d, false);
            let post = random_model(&mut rng, d, true);
            let sc =
                ChangeScenario::new(pre.clone(), post.clone(), ChangePoint::finite(1)).unwrap();
            let path = crate::hmm::sample_changed_path(&sc, 64, rng.random());
            let mut fp = init_filter(&pre, &post, path.observations[0]).unwrap();
            for k in 1..path.observations.len() {
                fp.step(path.observations[k], path.observations[k - 1], &pre, &post)
                    .unwrap();
                for u in [fp.u_pre(), fp.u_post()] {
                    assert!(u.iter().all(|&v| v >= 0.0));
                    let sum: f64 = u.iter().sum();
                    assert!((sum - 1.0).abs() <= FILTER_SUM_TOL, "sum {sum}");
                }
            }
        }
    }

    #[test]
    fn cum_log_lr_telescopes_log_norm_sums() {
        let mut rng = trial_rng(22, 0);
        let pre = random_model(&mut rng, 3, false);
        let post = random_model(&mut rng, 3, false);
        let sc = ChangeScenario::new(pre.clone(), post.clone(), ChangePoint::finite(1)).unwrap();
        let path = crate::hmm::sample_changed_path(&sc, 128, 7);
        let mut fp = init_filter(&pre, &post, path.observations[0]).unwrap();
        let mut sum_pre = fp.last_log_norm_pre();
        let mut sum_post = fp.last_log_norm_post();
        let mut sum_sigma = fp.cum_log_lr();
        for k in 1..path.observations.len() {
            let s = fp
                .step(path.observations[k], path.observations[k - 1], &pre, &post)
                .unwrap();
            sum_pre += fp.last_log_norm_pre();
            sum_post += fp.last_log_norm_post();
            sum_sigma += s;
        }
        assert_relative_eq!(fp.cum_log_lr(), sum_post - sum_pre, epsilon = 1e-9);
        assert_relative_eq!(fp.cum_log_lr(), sum_sigma, epsilon = 1e-9);
    }

    #[test]
    fn brute_force_single_observation() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let bf = brute_force_likelihood(&p, &[0.4]).unwrap();
        assert_relative_eq!(
            bf.log_value,
            initial_marginal_density(&p, 0.4).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn brute_force_d1_is_sum_of_log_densities() {
        let p = model(vec![vec![1.0]], vec![0.3], vec![0.9]);
        let xs = [0.0, 1.0, -0.5];
        let bf = brute_force_likelihood(&p, &xs).unwrap();
        let mut expect = crate::hmm::emission_density(p.emission(), 0, xs[0], 0.0).ln();
        for k in 1..xs.len() {
            expect += crate::hmm::emission_density(p.emission(), 0, xs[k], xs[k - 1]).ln();
        }
        assert_relative_eq!(bf.log_value, expect, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_size_guard_triggers() {
        let p = model(
            vec![
                vec![0.4, 0.3, 0.3],
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.3, 0.4],
            ],
            vec![0.0, 1.0, 2.0],
            vec![1.0, 1.0, 1.0],
        );
        let xs = vec![0.0; 20];
        assert!(matches!(
            brute_force_likelihood(&p, &xs),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn matrix_product_matches_brute_force_on_random_instances() {
        let mut rng = trial_rng(23, 0);
        for i in 0..100 {
            let d = 1 + (i % 3) as usize;
            let p = random_model(&mut rng, d, i % 2 == 1);
            let n = 1 + (rng.random::<u32>() % 8) as usize;
            let xs: Vec<f64> = (0..n).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let bf = brute_force_likelihood(&p, &xs).unwrap().log_value;
            let ff = log_likelihood(&p, &xs).unwrap();
            assert_relative_eq!(bf, ff, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn pair_lr_matches_brute_force_ratio() {
        let mut rng = trial_rng(24, 0);
        for i in 0..40 {
            let d = 1 + (i % 3) as usize;
            let pre = random_model(&mut rng, d, false);
            let post = random_model(&mut rng, d, i % 2 == 0);
            let n = 2 + (rng.random::<u32>() % 7) as usize;
            let xs: Vec<f64> = (0..n).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();

            let mut fp = init_filter(&pre, &post, xs[0]).unwrap();
            for k in 1..n {
                fp.step(xs[k], xs[k - 1], &pre, &post).unwrap();
            }
            let expect = brute_force_likelihood(&post, &xs).unwrap().log_value
                - brute_force_likelihood(&pre, &xs).unwrap().log_value;
            let got = fp.cum_log_lr();
            let denom = expect.abs().max(1.0);
            assert!(
                ((got - expect) / denom).abs() <= 1e-9,
                "instance {i}: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn d1_cum_log_lr_equals_iid_sum_over_long_streams() {
        let pre = model(vec![vec![1.0]], vec![0.0], vec![1.0]);
        let post = model(vec![vec![1.0]], vec![1.0], vec![1.0]);
        let sc = ChangeScenario::new(pre.clone(), post.clone(), ChangePoint::Infinite).unwrap();
        let n = 10_000u64;
        let path = crate::hmm::sample_changed_path(&sc, n + 1, 51);
        let mut fp = init_filter(&pre, &post, path.observations[0]).unwrap();
        let mut iid_sum = post.emission().log_density(0, path.observations[0], 0.0)
            - pre.emission().log_density(0, path.observations[0], 0.0);
        for k in 1..path.observations.len() {
            fp.step(path.observations[k], path.observations[k - 1], &pre, &post)
                .unwrap();
            iid_sum += post
                .emission()
                .log_density(0, path.observations[k], path.observations[k - 1])
                - pre
                    .emission()
                    .log_density(0, path.observations[k], path.observations[k - 1]);
        }
        assert!(
            (fp.cum_log_lr() - iid_sum).abs() <= 1e-12,
            "gap {}",
            (fp.cum_log_lr() - iid_sum).abs()
        );
    }

    #[test]
    fn extreme_observations_do_not_degenerate() {
        let p = model(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        );
        let mut fp = init_filter(&p, &p, 60.0).unwrap();
        // Density underflows in linear space at |z| ~ 39; the scaled update
        // must survive far beyond that.
        fp.step(-75.0, 60.0, &p, &p).unwrap();
        fp.step(80.0, -75.0, &p, &p).unwrap();
        assert!(fp.u_pre().iter().all(|v| v.is_finite()));
        assert_eq!(fp.cum_log_lr(), 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Filters remain probability vectors and the running
            /// log-likelihood-ratio telescopes the per-model log norms on
            /// arbitrary bounded observation streams.
            #[test]
            fn filter_invariants_hold_on_arbitrary_streams(
                model_seed in 0u64..500,
                xs in prop::collection::vec(-6.0f64..6.0, 2..50),
            ) {
                let mut rng = trial_rng(model_seed, 0);
                let d = 1 + (model_seed % 3) as usize;
                let pre = random_model(&mut rng, d, false);
                let post = random_model(&mut rng, d, model_seed % 2 == 0);
                let mut fp = init_filter(&pre, &post, xs[0]).unwrap();
                let mut sum_pre = fp.last_log_norm_pre();
                let mut sum_post = fp.last_log_norm_post();
                for k in 1..xs.len() {
                    fp.step(xs[k], xs[k - 1], &pre, &post).unwrap();
                    sum_pre += fp.last_log_norm_pre();
                    sum_post += fp.last_log_norm_post();
                    for u in [fp.u_pre(), fp.u_post()] {
                        prop_assert!(u.iter().all(|&v| v >= 0.0));
                        let total: f64 = u.iter().sum();
                        prop_assert!((total - 1.0).abs() <= FILTER_SUM_TOL);
                    }
                }
                prop_assert!((fp.cum_log_lr() - (sum_post - sum_pre)).abs() <= 1e-9);
            }
        }
    }
}
