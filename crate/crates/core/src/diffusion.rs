//! Forward and reverse denoising diffusion over multichannel signals.
//!
//! The forward process corrupts a clean signal `x0` with Gaussian noise over
//! `T` steps; the closed form `q(x_t | x0) = N(sqrt(abar_t) x0, (1 - abar_t) I)`
//! lets any step be reached directly. The reverse process walks back from
//! `x_T ~ N(0, I)` using a noise predictor (the trained denoiser) and the
//! posterior variance `btilde_t`.
//!
//! Schedule tables are kept in 64-bit: the cumulative product `abar_t`
//! underflows quickly in 32-bit for long schedules.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Beta/alpha-bar tables for a `T`-step diffusion process.
///
/// Steps are 1-based throughout: `t` in `1..=T`. `alpha_bar(0)` is defined
/// as 1, which makes the posterior variance at `t = 1` exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` inclusive.
    ///
    /// With `t_steps = 1` the single beta is `beta_start`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Schedule("step count must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if t_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (t_steps - 1) as f64;
            (0..t_steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas; `alpha_bars` is their cumulative product
    /// of `(1 - beta)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be >= 1".into()));
        }
        if let Some(bad) = betas.iter().find(|b| !(0.0 < **b && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {bad} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// The convention used by the rest of the toolkit: 200 steps, beta linear
    /// in `[1e-4, 0.02]`.
    pub fn default_linear() -> Self {
        Self::linear(200, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// `abar_t` for `t` in `0..=T`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Reverse-posterior variance `btilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    ///
    /// `btilde_1` is exactly 0 because `abar_0 = 1`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let abar_prev = self.alpha_bar(t - 1)?;
        let abar = self.alpha_bars[t - 1];
        Ok((1.0 - abar_prev) / (1.0 - abar) * self.betas[t - 1])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.betas.len(),
            });
        }
        Ok(())
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} with shape {:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Closed-form forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x0, eps, "noise")?;
    let abar = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.len() });
    }
    Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// Single-step transition kernel: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(
    x_prev: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x_prev, eps, "noise")?;
    let beta = sched.beta(t)?;
    Ok(x_prev * (1.0 - beta).sqrt() + eps * beta.sqrt())
}

/// One reverse (denoising) step using the epsilon parameterization:
///
/// `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t)`,
/// then `x_{t-1} = mu + sqrt(btilde_t) z`. `z` is ignored at `t = 1`.
pub fn reverse_step(
    x_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    z: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_shape(x_t, eps_hat, "predicted noise")?;
    check_same_shape(x_t, z, "reverse noise")?;
    let beta = sched.beta(t)?;
    let abar = sched.alpha_bar(t)?;
    let mean = (x_t - &(eps_hat * (beta / (1.0 - abar).sqrt()))) / (1.0 - beta).sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let sigma = sched.posterior_variance(t)?.sqrt();
    Ok(mean + z * sigma)
}

/// A denoiser usable by the ancestral sampler: predicts the noise component
/// of `x_t` at step `t`. Label conditioning is bound by the implementor.
pub trait NoisePredictor {
    fn channels(&self) -> usize;
    fn length(&self) -> usize;
    fn predict(&self, x_t: &Array2<f64>, t: usize) -> Result<Array2<f64>>;
}

/// Draw one signal by ancestral sampling: `x_T ~ N(0, I)`, then
/// `reverse_step` for `t = T..1`. Reproducible for a fixed seed.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(model, sched, &mut rng)
}

/// As [`sample`], but drawing from a caller-owned stream. Used when many
/// chains need independent, reproducible substreams.
pub fn sample_with_rng(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let shape = (model.channels(), model.length());
    let mut x = randn(shape, rng);
    for t in (1..=sched.len()).rev() {
        let eps_hat = model.predict(&x, t)?;
        let z = if t == 1 {
            Array2::zeros(shape)
        } else {
            randn(shape, rng)
        };
        x = reverse_step(&x, &eps_hat, t, sched, &z)?;
    }
    Ok(x)
}

/// Standard-normal tensor drawn in row-major order.
pub fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_schedule_single_step() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert!(close(s.alpha_bar(1).unwrap(), 0.9, 1e-15));
    }

    #[test]
    fn linear_schedule_cumulative_product() {
        // betas [0.1, 0.2, 0.3, 0.4] -> abar [0.9, 0.72, 0.504, 0.3024]
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let expect_beta = [0.1, 0.2, 0.3, 0.4];
        let expect_abar = [0.9, 0.72, 0.504, 0.3024];
        for (i, (b, a)) in expect_beta.iter().zip(expect_abar).enumerate() {
            assert!(close(s.beta(i + 1).unwrap(), *b, 1e-12));
            assert!(close(s.alpha_bar(i + 1).unwrap(), a, 1e-12));
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_in_unit_interval() {
        let s = NoiseSchedule::default_linear();
        let mut prev = 1.0;
        for t in 1..=s.len() {
            let a = s.alpha_bar(t).unwrap();
            assert!(a > 0.0 && a < 1.0);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn forward_sample_noiseless_scales_by_sqrt_alpha_bar() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let x0 = array![[1.0, -2.0], [0.5, 0.0]];
        let eps = Array2::zeros((2, 2));
        let xt = forward_sample(&x0, 2, &eps, &s).unwrap();
        let scale = 0.72f64.sqrt();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!(close(*a, scale * b, 1e-12));
        }
    }

    #[test]
    fn forward_sample_identity_limit_for_tiny_beta() {
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x0 = array![[1.0, -2.0, 3.0]];
        let eps = array![[0.3, 0.1, -0.2]];
        let xt = forward_sample(&x0, 1, &eps, &s).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!(close(*a, *b, 1e-5));
        }
    }

    #[test]
    fn forward_step_hand_value() {
        // beta = 0.19 -> sqrt(1 - beta) = 0.9
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let x = array![[2.0, -1.0]];
        let eps = Array2::zeros((1, 2));
        let y = forward_step(&x, 1, &eps, &s).unwrap();
        assert!(close(y[[0, 0]], 1.8, 1e-12));
        assert!(close(y[[0, 1]], -0.9, 1e-12));

        let zero = Array2::zeros((1, 2));
        let y0 = forward_step(&zero, 1, &zero, &s).unwrap();
        assert!(y0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_and_step_errors() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let x = Array2::zeros((2, 3));
        let eps_bad = Array2::zeros((2, 4));
        assert!(matches!(
            forward_sample(&x, 1, &eps_bad, &s),
            Err(Error::ShapeMismatch { .. })
        ));
        let eps = Array2::zeros((2, 3));
        assert!(matches!(
            forward_sample(&x, 5, &eps, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_step(&x, 0, &eps, &s),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn posterior_variance_values() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        // (1 - 0.9) / (1 - 0.72) * 0.2
        assert!(close(s.posterior_variance(2).unwrap(), 0.1 / 0.28 * 0.2, 1e-15));
    }

    #[test]
    fn posterior_variance_below_beta() {
        let s = NoiseSchedule::default_linear();
        for t in 1..=s.len() {
            assert!(s.posterior_variance(t).unwrap() < s.beta(t).unwrap());
        }
    }

    #[test]
    fn reverse_inverts_single_step_forward() {
        // With T = 1 and the true eps supplied, the reverse mean recovers x0.
        let s = NoiseSchedule::from_betas(vec![0.37]).unwrap();
        let x0 = array![[0.8, -1.3, 0.02], [2.4, 0.0, -0.6]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = randn((2, 3), &mut rng);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let z = Array2::zeros((2, 3));
        let rec = reverse_step(&x1, &eps, 1, &s, &z).unwrap();
        for (a, b) in rec.iter().zip(x0.iter()) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn reverse_step_zero_noise_terms() {
        let s = NoiseSchedule::from_betas(vec![0.2, 0.2]).unwrap();
        let x = array![[1.0, -0.5]];
        let zeros = Array2::zeros((1, 2));
        let y = reverse_step(&x, &zeros, 2, &s, &zeros).unwrap();
        let scale = 1.0 / 0.8f64.sqrt();
        assert!(close(y[[0, 0]], scale, 1e-12));
        assert!(close(y[[0, 1]], -0.5 * scale, 1e-12));
    }

    #[test]
    fn reverse_step_noise_variance_matches_posterior() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let x = Array2::zeros((1, 1));
        let eps_hat = Array2::zeros((1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = randn((1, 1), &mut rng);
            let y = reverse_step(&x, &eps_hat, 3, &s, &z).unwrap()[[0, 0]];
            acc += y;
            acc2 += y * y;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let btilde = s.posterior_variance(3).unwrap();
        // MC s.e. of the variance is ~ btilde * sqrt(2/n)
        assert!((var - btilde).abs() < 3.0 * btilde * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn composed_steps_match_closed_form_statistics() {
        // Mean/variance agreement between q(x_t | x0) and the composed
        // single-step kernels, Monte Carlo, one coordinate.
        let s = NoiseSchedule::linear(6, 0.05, 0.3).unwrap();
        let x0 = array![[0.7]];
        let t = 5;
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut direct = Vec::with_capacity(n);
        let mut composed = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = randn((1, 1), &mut rng);
            direct.push(forward_sample(&x0, t, &eps, &s).unwrap()[[0, 0]]);
            let mut x = x0.clone();
            for step in 1..=t {
                let eps = randn((1, 1), &mut rng);
                x = forward_step(&x, step, &eps, &s).unwrap();
            }
            composed.push(x[[0, 0]]);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var)
        };
        let (m1, v1) = stats(&direct);
        let (m2, v2) = stats(&composed);
        let se_mean = ((v1 + v2) / n as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_mean, "means {m1} vs {m2}");
        let se_var = ((v1 * v1 + v2 * v2) * 2.0 / (n as f64 - 1.0)).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se_var, "variances {v1} vs {v2}");
    }

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn channels(&self) -> usize {
            2
        }
        fn length(&self) -> usize {
            5
        }
        fn predict(&self, x_t: &Array2<f64>, _t: usize) -> Result<Array2<f64>> {
            Ok(Array2::zeros(x_t.dim()))
        }
    }

    #[test]
    fn sampling_is_reproducible_and_shaped() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let a = sample(&ZeroPredictor, &s, 9).unwrap();
        let b = sample(&ZeroPredictor, &s, 9).unwrap();
        assert_eq!(a.dim(), (2, 5));
        assert_eq!(a, b);
        let c = sample(&ZeroPredictor, &s, 10).unwrap();
        assert_ne!(a, c);
    }
}
