//! Markov random walks: state-driven increment streams.
//!
//! The renewal estimators operate on any walk exposing this interface. The
//! production walk is the log-likelihood-ratio stream of a hidden Markov
//! model pair; the synthetic walks back oracle tests and the first-passage
//! laboratory.

use crate::hmm::{sample_step, HmmParams};
use crate::likelihood::{init_filter, FilterPair};
use rand::Rng;

/// A Markov chain with an additive real increment per transition.
pub trait MarkovWalk: Clone + Send {
    type State: Clone + Send + Sync;

    /// Snapshot of the current state.
    fn state(&self) -> Self::State;

    /// Repositions the walk at a saved state.
    fn set_state(&mut self, state: &Self::State);

    /// Redraws the walk's initial state from its initial distribution.
    fn restart<R: Rng + ?Sized>(&mut self, rng: &mut R);

    /// Advances one transition and returns the increment.
    fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64;
}

/// Full state of the log-likelihood-ratio walk: hidden state, latest
/// observation and both normalized filters.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmWalkState {
    pub hidden: usize,
    pub xi: f64,
    pub u_pre: Vec<f64>,
    pub u_post: Vec<f64>,
}

/// Log-likelihood-ratio walk of a model pair, driven by data from a chosen
/// generating law.
///
/// Increments are the per-observation differences of filter log norms, the
/// same stream the detectors consume.
#[derive(Debug, Clone)]
pub struct HmmLogLrWalk {
    /// Law of the initial (hidden, observation) draw.
    init: HmmParams,
    /// Law driving transitions and emissions from then on.
    drive: HmmParams,
    pre: HmmParams,
    post: HmmParams,
    hidden: usize,
    current_xi: f64,
    fp: FilterPair,
}

impl HmmLogLrWalk {
    /// Walk under the post-change law throughout (initial state from the
    /// post-change stationary vector). This is the regime the delay
    /// expansion constants are estimated in.
    pub fn post_stationary<R: Rng + ?Sized>(
        pre: &HmmParams,
        post: &HmmParams,
        rng: &mut R,
    ) -> crate::error::Result<Self> {
        Self::new(post.clone(), post.clone(), pre, post, rng)
    }

    /// Walk under the pre-change law throughout (for the reversed
    /// Kullback-Leibler number).
    pub fn pre_stationary<R: Rng + ?Sized>(
        pre: &HmmParams,
        post: &HmmParams,
        rng: &mut R,
    ) -> crate::error::Result<Self> {
        Self::new(pre.clone(), pre.clone(), pre, post, rng)
    }

    /// Walk matching a change at the first observation: initial draw from
    /// the pre-change law, every transition from the post-change law. On a
    /// shared RNG stream this reproduces the detector's increment sequence
    /// exactly.
    pub fn omega_one<R: Rng + ?Sized>(
        pre: &HmmParams,
        post: &HmmParams,
        rng: &mut R,
    ) -> crate::error::Result<Self> {
        Self::new(pre.clone(), post.clone(), pre, post, rng)
    }

    fn new<R: Rng + ?Sized>(
        init: HmmParams,
        drive: HmmParams,
        pre: &HmmParams,
        post: &HmmParams,
        rng: &mut R,
    ) -> crate::error::Result<Self> {
        let hidden = init.sample_stationary(rng);
        let xi = init.emission().sample(hidden, 0.0, rng);
        let fp = init_filter(pre, post, xi)?;
        Ok(HmmLogLrWalk {
            init,
            drive,
            pre: pre.clone(),
            post: post.clone(),
            hidden,
            current_xi: xi,
            fp,
        })
    }

    /// Latest observation.
    pub fn xi(&self) -> f64 {
        self.current_xi
    }
}

impl MarkovWalk for HmmLogLrWalk {
    type State = HmmWalkState;

    fn state(&self) -> HmmWalkState {
        HmmWalkState {
            hidden: self.hidden,
            xi: self.current_xi,
            u_pre: self.fp.u_pre().to_vec(),
            u_post: self.fp.u_post().to_vec(),
        }
    }

    fn set_state(&mut self, state: &HmmWalkState) {
        self.hidden = state.hidden;
        self.current_xi = state.xi;
        self.fp.load(&state.u_pre, &state.u_post);
    }

    fn restart<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.hidden = self.init.sample_stationary(rng);
        let xi = self.init.emission().sample(self.hidden, 0.0, rng);
        self.fp = init_filter(&self.pre, &self.post, xi).expect("validated models");
        self.current_xi = xi;
    }

    fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let (next, xi) = sample_step(&self.drive, self.hidden, self.current_xi, rng);
        let sigma = self
            .fp
            .step(xi, self.current_xi, &self.pre, &self.post)
            .expect("scaled filter update cannot degenerate on finite data");
        self.hidden = next;
        self.current_xi = xi;
        sigma
    }
}

/// Synthetic walks for oracle tests and the first-passage laboratory.
pub mod synthetic {
    use super::MarkovWalk;
    use rand::Rng;
    use rand_distr::Distribution;

    /// Independent increments from a fixed distribution; stateless.
    #[derive(Debug, Clone)]
    pub struct IidWalk<D> {
        dist: D,
    }

    impl<D> IidWalk<D> {
        pub fn new(dist: D) -> Self {
            IidWalk { dist }
        }
    }

    impl<D> MarkovWalk for IidWalk<D>
    where
        D: Distribution<f64> + Clone + Send + Sync,
    {
        type State = ();

        fn state(&self) {}

        fn set_state(&mut self, _: &()) {}

        fn restart<R: Rng + ?Sized>(&mut self, _: &mut R) {}

        fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
            self.dist.sample(rng)
        }
    }

    /// Constant increments; the fully degenerate walk.
    #[derive(Debug, Clone, Copy)]
    pub struct DeterministicWalk {
        pub increment: f64,
    }

    impl MarkovWalk for DeterministicWalk {
        type State = ();

        fn state(&self) {}

        fn set_state(&mut self, _: &()) {}

        fn restart<R: Rng + ?Sized>(&mut self, _: &mut R) {}

        fn step<R: Rng + ?Sized>(&mut self, _: &mut R) -> f64 {
            self.increment
        }
    }

    /// Observable finite chain with a deterministic reward per transition.
    /// Its additive-functional quantities (mean drift, Poisson-equation
    /// solution) have exact linear-algebra values, which makes it the
    /// oracle for the simulation estimators.
    #[derive(Debug, Clone)]
    pub struct FiniteChainWalk {
        trans: Vec<Vec<f64>>,
        /// `reward[x][y]` is the increment on the transition `x -> y`.
        reward: Vec<Vec<f64>>,
        stationary: Vec<f64>,
        state: usize,
    }

    impl FiniteChainWalk {
        pub fn new(
            trans: Vec<Vec<f64>>,
            reward: Vec<Vec<f64>>,
        ) -> crate::error::Result<Self> {
            let stationary = crate::hmm::stationary_distribution(&trans)?;
            if reward.len() != trans.len() || reward.iter().any(|r| r.len() != trans.len()) {
                return Err(crate::error::Error::Validation(
                    "reward matrix shape must match the transition matrix".into(),
                ));
            }
            Ok(FiniteChainWalk {
                trans,
                reward,
                stationary,
                state: 0,
            })
        }

        pub fn states(&self) -> usize {
            self.trans.len()
        }

        pub fn transition(&self, x: usize, y: usize) -> f64 {
            self.trans[x][y]
        }

        pub fn stationary(&self) -> &[f64] {
            &self.stationary
        }

        /// Expected one-step increment from each state.
        pub fn g_bar(&self) -> Vec<f64> {
            (0..self.states())
                .map(|x| {
                    (0..self.states())
                        .map(|y| self.trans[x][y] * self.reward[x][y])
                        .sum()
                })
                .collect()
        }

        /// Stationary mean increment.
        pub fn mean_increment(&self) -> f64 {
            self.g_bar()
                .iter()
                .zip(&self.stationary)
                .map(|(g, pi)| g * pi)
                .sum()
        }

        /// Exact solution of `E_x delta(X_1) - delta(x) = g_bar(x) - K`
        /// normalized to zero stationary mean.
        pub fn exact_delta(&self) -> Vec<f64> {
            let d = self.states();
            let k = self.mean_increment();
            let g = self.g_bar();
            // (P - I) delta = g_bar - K, with one equation replaced by
            // pi . delta = 0 (the dropped one is implied by the rest).
            let mut a = nalgebra::DMatrix::<f64>::zeros(d, d);
            let mut b = nalgebra::DVector::<f64>::zeros(d);
            for x in 0..d {
                for y in 0..d {
                    a[(x, y)] = self.trans[x][y] - if x == y { 1.0 } else { 0.0 };
                }
                b[x] = g[x] - k;
            }
            for y in 0..d {
                a[(d - 1, y)] = self.stationary[y];
            }
            b[d - 1] = 0.0;
            let sol = a.lu().solve(&b).expect("irreducible chain system");
            sol.iter().copied().collect()
        }
    }

    impl MarkovWalk for FiniteChainWalk {
        type State = usize;

        fn state(&self) -> usize {
            self.state
        }

        fn set_state(&mut self, s: &usize) {
            self.state = *s;
        }

        fn restart<R: Rng + ?Sized>(&mut self, rng: &mut R) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            self.state = self.stationary.len() - 1;
            for (i, &p) in self.stationary.iter().enumerate() {
                acc += p;
                if u < acc {
                    self.state = i;
                    break;
                }
            }
        }

        fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = self.trans.len() - 1;
            for (y, &p) in self.trans[self.state].iter().enumerate() {
                acc += p;
                if u < acc {
                    next = y;
                    break;
                }
            }
            let r = self.reward[self.state][next];
            self.state = next;
            r
        }
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use crate::hmm::EmissionSpec;
    use crate::rng::trial_rng;
    use approx::assert_relative_eq;

    #[test]
    fn deterministic_walk_accumulates() {
        let mut w = DeterministicWalk { increment: 0.25 };
        let mut rng = trial_rng(0, 0);
        let total: f64 = (0..8).map(|_| w.step(&mut rng)).sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn finite_chain_exact_delta_solves_poisson_equation() {
        let w = FiniteChainWalk::new(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![0.5, 2.0], vec![-1.0, 1.0]],
        )
        .unwrap();
        let delta = w.exact_delta();
        let g = w.g_bar();
        let k = w.mean_increment();
        for x in 0..2 {
            let e_next: f64 = (0..2).map(|y| w.transition(x, y) * delta[y]).sum();
            assert_relative_eq!(e_next - delta[x], g[x] - k, epsilon = 1e-12);
        }
        let pi_dot: f64 = delta
            .iter()
            .zip(w.stationary())
            .map(|(d, p)| d * p)
            .sum();
        assert_relative_eq!(pi_dot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hmm_walk_d1_increment_matches_closed_form() {
        let pre = HmmParams::new(
            vec![vec![1.0]],
            EmissionSpec::gaussian(vec![0.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let post = HmmParams::new(
            vec![vec![1.0]],
            EmissionSpec::gaussian(vec![1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let mut rng = trial_rng(13, 0);
        let mut walk = HmmLogLrWalk::post_stationary(&pre, &post, &mut rng).unwrap();
        let mut mean = 0.0;
        let n = 20_000;
        for _ in 0..n {
            mean += walk.step(&mut rng);
        }
        mean /= n as f64;
        // Drift is 0.5 with increment variance 1.
        assert!((mean - 0.5).abs() < 3.0 / (n as f64).sqrt() * 1.5, "{mean}");
    }

    #[test]
    fn set_state_replays_identically() {
        let pre = HmmParams::new(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            EmissionSpec::gaussian(vec![0.0, 0.6], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let post = HmmParams::new(
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            EmissionSpec::gaussian(vec![1.0, 1.8], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut rng = trial_rng(29, 0);
        let mut walk = HmmLogLrWalk::post_stationary(&pre, &post, &mut rng).unwrap();
        for _ in 0..10 {
            walk.step(&mut rng);
        }
        let snap = walk.state();
        let mut a = walk.clone();
        let mut b = walk.clone();
        b.set_state(&snap);
        let mut rng_a = trial_rng(1, 1);
        let mut rng_b = trial_rng(1, 1);
        for _ in 0..20 {
            assert_eq!(a.step(&mut rng_a), b.step(&mut rng_b));
        }
    }
}
