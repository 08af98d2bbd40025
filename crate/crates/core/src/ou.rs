//! Ornstein–Uhlenbeck load dynamics and the staleness-variance bookkeeping
//! behind the time-varying weight matrix.
//!
//! Each load's complex-power deviation follows `dS = -θ S dt + σ dW` with
//! independent real/imaginary noise axes. Between SCADA acquisitions the
//! uncertainty of a stale reading grows along the closed form
//! `(σ²/2θ)(1 - e^{-2θ(t-τ)})`, equivalently the geometric recursion
//! `Var[k] = Var[k-1]·γ + (σ²/2θ)(1-γ)` with `γ = e^{-2θΔt}`. Both are
//! implemented and tested against each other; the estimator consumes the
//! variances, the simulator consumes the sample paths.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Parameters of one load's OU process, fixed over a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    /// Mean-reversion rate θ in 1/s.
    pub theta: f64,
    /// Noise scale σ of the complex process, pu·s^(-1/2).
    pub sigma_ou: f64,
    /// Sample interval Δt in seconds (one μPMU tick).
    pub dt: f64,
}

impl OuParams {
    pub fn new(theta: f64, sigma_ou: f64, dt: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "OU theta must be > 0, got {theta}"
            )));
        }
        if !(sigma_ou >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "OU sigma must be >= 0, got {sigma_ou}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "OU dt must be > 0, got {dt}"
            )));
        }
        Ok(OuParams {
            theta,
            sigma_ou,
            dt,
        })
    }

    /// One-step mean decay factor e^{-θΔt}.
    pub fn decay(&self) -> f64 {
        (-self.theta * self.dt).exp()
    }

    /// One-step variance decay factor γ = e^{-2θΔt} ∈ (0, 1].
    pub fn gamma(&self) -> f64 {
        (-2.0 * self.theta * self.dt).exp()
    }

    /// Stationary variance σ²/(2θ) of the complex process.
    pub fn stationary_var(&self) -> f64 {
        self.sigma_ou * self.sigma_ou / (2.0 * self.theta)
    }

    /// The σ that makes the stationary *standard deviation* of the complex
    /// process equal `sd` (used to express load volatility as a percentage
    /// of base apparent power).
    pub fn sigma_for_stationary_sd(theta: f64, sd: f64) -> f64 {
        sd * (2.0 * theta).sqrt()
    }
}

/// Evolving state of one load between SCADA acquisitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuLoadState {
    /// Current complex-power value S[k], pu.
    pub s_now: Complex64,
    /// Value at the last SCADA acquisition S(τ), pu.
    pub s_anchor: Complex64,
    /// Tick index q of the last acquisition.
    pub anchor_tick: u64,
    /// Variance Var[S[k]] accumulated since the acquisition, pu².
    pub staleness_var: f64,
}

impl OuLoadState {
    /// A state freshly acquired at `tick` (zero staleness).
    pub fn anchored(s: Complex64, tick: u64) -> Self {
        OuLoadState {
            s_now: s,
            s_anchor: s,
            anchor_tick: tick,
            staleness_var: 0.0,
        }
    }

    /// Record a SCADA acquisition at `tick`: the anchor moves to the current
    /// value and the staleness variance resets to zero exactly.
    pub fn mark_acquired(&mut self, tick: u64) {
        self.s_anchor = self.s_now;
        self.anchor_tick = tick;
        self.staleness_var = 0.0;
    }
}

/// Advance one exact-discretization OU step.
///
/// `S[k+1] = S[k]·e^{-θΔt} + ζ` where ζ has independent zero-mean Gaussian
/// axes with per-axis variance `½·(σ²/2θ)(1-e^{-2θΔt})` — the transition
/// density of the continuous process sampled at Δt, so there is no Euler
/// discretization error at any step size.
pub fn sample_step<R: Rng + ?Sized>(
    state: &OuLoadState,
    params: &OuParams,
    rng: &mut R,
) -> OuLoadState {
    let per_axis_sd = (0.5 * params.stationary_var() * (1.0 - params.gamma())).sqrt();
    let zr: f64 = StandardNormal.sample(rng);
    let zi: f64 = StandardNormal.sample(rng);
    OuLoadState {
        s_now: state.s_now * params.decay() + Complex64::new(per_axis_sd * zr, per_axis_sd * zi),
        s_anchor: state.s_anchor,
        anchor_tick: state.anchor_tick,
        staleness_var: variance_update(state.staleness_var, params),
    }
}

/// One step of the staleness-variance recursion.
///
/// Written in the affine form `stat + γ·(prev - stat)` — algebraically equal
/// to `prev·γ + stat·(1-γ)` but with the stationary variance as an *exact*
/// floating-point fixed point.
pub fn variance_update(prev_var: f64, params: &OuParams) -> f64 {
    let stat = params.stationary_var();
    stat + params.gamma() * (prev_var - stat)
}

/// Closed-form staleness variance after `elapsed` seconds without an
/// acquisition: `(σ²/2θ)(1 - e^{-2θ·elapsed})`.
pub fn stale_variance(params: &OuParams, elapsed: f64) -> f64 {
    debug_assert!(elapsed >= 0.0);
    params.stationary_var() * (1.0 - (-2.0 * params.theta * elapsed).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(theta: f64, sigma: f64, dt: f64) -> OuParams {
        OuParams::new(theta, sigma, dt).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(OuParams::new(0.0, 1.0, 1.0).is_err());
        assert!(OuParams::new(-1.0, 1.0, 1.0).is_err());
        assert!(OuParams::new(0.1, -1.0, 1.0).is_err());
        assert!(OuParams::new(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn noiseless_step_is_pure_decay() {
        let p = params(0.0125, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = OuLoadState::anchored(Complex64::new(0.3, -0.1), 0);
        let s1 = sample_step(&s0, &p, &mut rng);
        let d = p.decay();
        assert!((s1.s_now - s0.s_now * d).norm() < 1e-16);
        assert_eq!(s1.staleness_var, 0.0);
    }

    #[test]
    fn decay_factor_at_reference_theta() {
        let p = params(0.0125, 0.05, 1.0);
        assert!((p.decay() - 0.987_577_800_494_9).abs() < 1e-10);
        assert!((p.gamma() - (-0.025_f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn variance_update_fixed_point_is_exact() {
        let p = params(0.0125, 0.034, 1.0);
        let stat = p.stationary_var();
        // Bitwise equality, not approximate: the affine form guarantees it.
        assert_eq!(variance_update(stat, &p), stat);
    }

    #[test]
    fn variance_update_first_step_from_zero() {
        // With σ²/2θ = 1: one step from zero gives 1 - e^{-0.025} = 0.0246900...
        let theta = 0.0125_f64;
        let sigma = (2.0 * theta).sqrt();
        let p = params(theta, sigma, 1.0);
        assert!((p.stationary_var() - 1.0).abs() < 1e-15);
        let v1 = variance_update(0.0, &p);
        assert!((v1 - 0.024_690_087_971_667).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_closed_form() {
        let p = params(0.0125, 0.041, 1.0);
        let mut v = 0.0;
        for k in 1..=10_000u64 {
            v = variance_update(v, &p);
            let closed = stale_variance(&p, k as f64 * p.dt);
            assert!(
                (v - closed).abs() <= 1e-12,
                "recursion diverged from closed form at step {k}: {v} vs {closed}"
            );
        }
    }

    #[test]
    fn recursion_converges_to_stationary_variance() {
        let p = params(0.0125, 0.02, 1.0);
        let stat = p.stationary_var();
        let mut v = 0.0;
        for _ in 0..4000 {
            v = variance_update(v, &p);
        }
        assert!((v - stat).abs() < stat * 1e-12);
        assert!(stale_variance(&p, 1e9) <= stat + 1e-18);
        assert_eq!(stale_variance(&p, 0.0), 0.0);
    }

    #[test]
    fn staleness_resets_on_acquisition() {
        let p = params(0.0125, 0.03, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut st = OuLoadState::anchored(Complex64::new(0.2, 0.1), 0);
        let mut prev = 0.0;
        for _ in 0..50 {
            st = sample_step(&st, &p, &mut rng);
            assert!(st.staleness_var >= prev, "staleness must be nondecreasing");
            prev = st.staleness_var;
        }
        st.mark_acquired(50);
        assert_eq!(st.staleness_var, 0.0);
        assert_eq!(st.anchor_tick, 50);
        assert_eq!(st.s_anchor, st.s_now);
    }

    #[test]
    fn fixed_seed_reproduces_path() {
        let p = params(0.0125, 0.05, 1.0);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = OuLoadState::anchored(Complex64::new(0.1, 0.0), 0);
            (0..100)
                .map(|_| {
                    st = sample_step(&st, &p, &mut rng);
                    st.s_now
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    /// Monte-Carlo check of the transition variance: Var[S[k]] from a fixed
    /// start equals (σ²/2θ)(1 - e^{-2θ·kΔt}); a lighter version of the
    /// acceptance-suite run.
    #[test]
    fn monte_carlo_variance_matches_closed_form() {
        let p = params(0.0125, 0.08, 1.0);
        let k = 100;
        let paths = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let s0 = Complex64::new(0.25, -0.15);
        let mut sum = Complex64::new(0.0, 0.0);
        let mut sum_sq = 0.0;
        let mut finals = Vec::with_capacity(paths);
        for _ in 0..paths {
            let mut st = OuLoadState::anchored(s0, 0);
            for _ in 0..k {
                st = sample_step(&st, &p, &mut rng);
            }
            sum += st.s_now;
            finals.push(st.s_now);
        }
        let mean = sum / paths as f64;
        for s in &finals {
            sum_sq += (s - mean).norm_sqr();
        }
        let var = sum_sq / (paths - 1) as f64;
        let closed = stale_variance(&p, k as f64 * p.dt);
        assert!(
            (var - closed).abs() < 0.08 * closed,
            "MC variance {var} vs closed form {closed}"
        );
        // Mean reversion: E[S[k]] = S0·e^{-θkΔt}, within 3 standard errors per axis.
        let expect = s0 * (-p.theta * k as f64 * p.dt).exp();
        let se = (closed / 2.0 / paths as f64).sqrt();
        assert!((mean.re - expect.re).abs() < 3.0 * se);
        assert!((mean.im - expect.im).abs() < 3.0 * se);
    }

    #[test]
    fn sigma_for_stationary_sd_round_trips() {
        let theta = 0.0125;
        let sd = 0.02;
        let sigma = OuParams::sigma_for_stationary_sd(theta, sd);
        let p = params(theta, sigma, 1.0);
        assert!((p.stationary_var().sqrt() - sd).abs() < 1e-15);
    }
}
