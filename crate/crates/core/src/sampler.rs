//! Noise schedule, deterministic DDIM stepping, and DDIM inversion.

use crate::backends::{denoise, Denoiser, TextCondition};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{LatentTensor, Tensor};

/// Cumulative signal rates `ᾱ[0..=T]` with `ᾱ[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Builds a schedule from explicit values. Requires `ᾱ[0] = 1`, every
    /// value in `(0, 1]`, and a non-increasing sequence (flat segments are
    /// accepted so degenerate schedules can be exercised).
    pub fn from_alpha_bar(alpha_bar: Vec<T>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::validation("alpha_bar", "need at least T+1 = 2 entries"));
        }
        if alpha_bar[0] != T::one() {
            return Err(Error::validation("alpha_bar", "alpha_bar[0] must be 1"));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] > T::zero() && w[1] <= w[0]) {
                return Err(Error::validation("alpha_bar", "must be non-increasing within (0, 1]"));
            }
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.alpha_bar.windows(2).all(|w| w[1] < w[0])
    }
}

/// Linear-β schedule: `ᾱ[s] = Π_{k≤s} (1 − β_k)`, with `β_1 = beta_start`
/// and `β_T = beta_end`.
pub fn make_schedule<T: Scalar>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    if steps == 0 {
        return Err(Error::validation("T", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation("beta", "need 0 < beta_start <= beta_end < 1"));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(T::one());
    let mut acc = 1.0f64;
    for k in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(cast(acc));
    }
    let schedule = NoiseSchedule::from_alpha_bar(alpha_bar)?;
    if !schedule.is_strictly_decreasing() {
        return Err(Error::validation("beta", "schedule is not strictly decreasing at this precision"));
    }
    Ok(schedule)
}

fn check_step<T: Scalar>(z: &LatentTensor<T>, eps: &Tensor<T>, schedule: &NoiseSchedule<T>) -> Result<()> {
    eps.ensure_same_shape(&z.data)?;
    if z.timestep > schedule.steps() {
        return Err(Error::validation(
            "timestep",
            format!("{} beyond schedule length {}", z.timestep, schedule.steps()),
        ));
    }
    Ok(())
}

/// One deterministic (η = 0) DDIM update from timestep `i` to `i − 1`.
pub fn ddim_step<T: Scalar>(
    z: &LatentTensor<T>,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    if z.timestep == 0 {
        return Err(Error::StepUnderflow);
    }
    check_step(z, eps, schedule)?;
    let i = z.timestep;
    let a_t = schedule.alpha_bar[i];
    let a_prev = schedule.alpha_bar[i - 1];
    let (sa_t, sn_t) = (a_t.sqrt(), (T::one() - a_t).sqrt());
    let (sa_prev, sn_prev) = (a_prev.sqrt(), (T::one() - a_prev).sqrt());
    let data = z.data.zip_map(eps, |zv, e| {
        let x0 = (zv - sn_t * e) / sa_t;
        sa_prev * x0 + sn_prev * e
    })?;
    Ok(LatentTensor { data, timestep: i - 1 })
}

/// Algebraic inverse of [`ddim_step`]: given the latent at `i − 1` and the
/// noise used for the step, recovers the latent at `i`.
pub fn ddim_step_inverse<T: Scalar>(
    z_prev: &LatentTensor<T>,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    check_step(z_prev, eps, schedule)?;
    let i = z_prev.timestep + 1;
    if i > schedule.steps() {
        return Err(Error::validation("timestep", "cannot invert past T"));
    }
    let a_t = schedule.alpha_bar[i];
    let a_prev = schedule.alpha_bar[i - 1];
    let (sa_t, sn_t) = (a_t.sqrt(), (T::one() - a_t).sqrt());
    let (sa_prev, sn_prev) = (a_prev.sqrt(), (T::one() - a_prev).sqrt());
    let data = z_prev.data.zip_map(eps, |zv, e| {
        let x0 = (zv - sn_prev * e) / sa_prev;
        sa_t * x0 + sn_t * e
    })?;
    Ok(LatentTensor { data, timestep: i })
}

/// DDIM inversion: integrates the η = 0 recurrence backwards from timestep
/// 0 to T, predicting noise at the current latent with the target timestep.
/// Always a single conditional pass (guidance scale 1).
pub fn ddim_invert<T: Scalar, D: Denoiser<T> + ?Sized>(
    z0: &LatentTensor<T>,
    backend: &D,
    cond: &TextCondition<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    let mut z = z0.clone().with_timestep(0);
    for i in 1..=schedule.steps() {
        let probe = LatentTensor { data: z.data.clone(), timestep: i };
        let eps = denoise(backend, &probe, cond, None, None, 1.0)?;
        z = ddim_step_inverse(&z, &eps, schedule)?;
    }
    Ok(z)
}

/// Plain η = 0 sampling from `z` (at timestep `z.timestep`) down to 0 with
/// one backend and one condition.
pub fn ddim_sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    z: &LatentTensor<T>,
    backend: &D,
    cond: &TextCondition<T>,
    schedule: &NoiseSchedule<T>,
    guidance_scale: f64,
) -> Result<LatentTensor<T>> {
    let mut z = z.clone();
    while z.timestep > 0 {
        let eps = denoise(backend, &z, cond, None, None, guidance_scale)?;
        z = ddim_step(&z, &eps, schedule)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(vals: Vec<f64>, t: usize) -> LatentTensor<f64> {
        let n = vals.len();
        LatentTensor::new(Tensor::new(&[1, 1, n], vals).unwrap(), t).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule::<f64>(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[1.0, 0.5]);
    }

    #[test]
    fn product_oracle_at_default_t() {
        let s = make_schedule::<f64>(50, 1e-4, 2e-2).unwrap();
        // independent: explicit betas then a running product
        let betas: Vec<f64> = (0..50).map(|k| 1e-4 + (2e-2 - 1e-4) * k as f64 / 49.0).collect();
        let mut p = 1.0;
        for b in &betas {
            p *= 1.0 - b;
        }
        assert!((s.alpha_bar()[50] - p).abs() < 1e-15);
        assert!(s.is_strictly_decreasing());
    }

    #[test]
    fn invalid_betas_rejected() {
        assert!(make_schedule::<f32>(10, 0.02, 0.01).is_err());
        assert!(make_schedule::<f32>(10, 0.0, 0.01).is_err());
        assert!(make_schedule::<f32>(10, 0.1, 1.0).is_err());
        assert!(make_schedule::<f32>(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_eps_scales_latent() {
        let s = make_schedule::<f64>(10, 1e-3, 5e-2).unwrap();
        let z = latent(vec![1.0, -2.0, 0.5], 7);
        let out = ddim_step(&z, &Tensor::zeros(&[1, 1, 3]), &s).unwrap();
        let k = (s.alpha_bar()[6] / s.alpha_bar()[7]).sqrt();
        for (a, b) in out.data.data().iter().zip(z.data.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }
        assert_eq!(out.timestep, 6);
    }

    #[test]
    fn flat_schedule_is_identity() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.7, 0.7]).unwrap();
        let z = latent(vec![0.3, -1.1, 2.5], 2);
        let eps = Tensor::new(&[1, 1, 3], vec![0.9, 0.1, -0.4]).unwrap();
        let out = ddim_step(&z, &eps, &s).unwrap();
        assert!(out.data.max_abs_diff(&z.data).unwrap() < 1e-12);
    }

    #[test]
    fn timestep_zero_underflows() {
        let s = make_schedule::<f32>(5, 1e-3, 1e-2).unwrap();
        let z = LatentTensor::new(Tensor::<f32>::zeros(&[1, 1, 1]), 0).unwrap();
        assert!(matches!(ddim_step(&z, &Tensor::zeros(&[1, 1, 1]), &s), Err(Error::StepUnderflow)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = make_schedule::<f32>(5, 1e-3, 1e-2).unwrap();
        let z = LatentTensor::new(Tensor::<f32>::zeros(&[1, 1, 2]), 3).unwrap();
        assert!(ddim_step(&z, &Tensor::zeros(&[1, 1, 3]), &s).is_err());
    }
}
