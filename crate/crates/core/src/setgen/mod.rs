//! Set-aware sampling: token layouts, the set attention mask, grid
//! concatenation and the divide-and-conquer sampler.

mod grid;
mod layout;
mod mask;
mod sampler;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::{Float, Tensor, TensorError};

pub use grid::{
    concat_grid, grid_layout_for, sliding_windows, split_grid, GridLayout, WindowPlan, WINDOW_SIZE,
    WINDOW_STRIDE,
};
pub use layout::{build_token_layout, TokenLayout};
pub use mask::{build_mask, build_set_mask, AttnMask, MaskPolicy};
pub use sampler::{
    conquer_phase, divide_phase, generate_set, image_seeds, initial_noise, latent_checksum,
    latents_to_images, sample_single, ConquerOptions, ConquerOutput, DivideOptions, SetOutput,
    SetPrompts, WindowTrace,
};

#[derive(Debug, Error)]
pub enum SetGenError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Denoising schedule: `total_steps` Euler steps over a linear σ grid from
/// 1 to 0, of which the first `divide_steps` run per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub divide_steps: usize,
    pub guidance_scale: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_steps: 20,
            divide_steps: 2,
            guidance_scale: 3.5,
        }
    }
}

impl Schedule {
    pub fn new(total_steps: usize, divide_steps: usize, guidance_scale: f64) -> Result<Self, SetGenError> {
        let s = Self {
            total_steps,
            divide_steps,
            guidance_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SetGenError> {
        if self.total_steps == 0 {
            return Err(SetGenError::Schedule("total_steps must be at least 1".into()));
        }
        if self.divide_steps > self.total_steps {
            return Err(SetGenError::Schedule(format!(
                "divide_steps {} exceeds total_steps {}",
                self.divide_steps, self.total_steps
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(SetGenError::Schedule("guidance_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// `σ_i = 1 − i/t` for `i = 0..=t`.
    pub fn sigmas(&self) -> Vec<f64> {
        let t = self.total_steps as f64;
        (0..=self.total_steps).map(|i| 1.0 - i as f64 / t).collect()
    }
}

/// Classifier-free guidance: `v_u + s·(v_c − v_u)`.
pub fn cfg_combine<F: Float>(v_uncond: &Tensor<F>, v_cond: &Tensor<F>, s: f64) -> Result<Tensor<F>, SetGenError> {
    let diff = v_cond.sub(v_uncond)?;
    Ok(v_uncond.add(&diff.scale(F::from_f64_lossy(s)))?)
}

/// `x + (σ_next − σ_now)·v`
pub fn euler_step<F: Float>(x: &Tensor<F>, v: &Tensor<F>, sigma_now: f64, sigma_next: f64) -> Result<Tensor<F>, SetGenError> {
    Ok(x.add(&v.scale(F::from_f64_lossy(sigma_next - sigma_now)))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([1, v.len()], v).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let (u, c) = (t(&[0.0, 1.0]), t(&[2.0, -1.0]));
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&t(&[0.0]), &t(&[2.0]), 3.5).unwrap().data(), &[7.0]);
        assert!(cfg_combine(&u, &t(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn euler_zero_velocity_is_identity() {
        let x = t(&[0.3, -1.2]);
        assert_eq!(euler_step(&x, &t(&[0.0, 0.0]), 0.7, 0.65).unwrap(), x);
    }

    #[test]
    fn euler_integrates_constant_field_exactly() {
        // dx/dσ = c  ⇒  x(0) = x(1) − c
        let s = Schedule::new(20, 0, 1.0).unwrap();
        let sig = s.sigmas();
        let c = t(&[0.5, -2.0]);
        let mut x = t(&[1.0, 1.0]);
        for i in 0..20 {
            x = euler_step(&x, &c, sig[i], sig[i + 1]).unwrap();
        }
        assert!((x.data()[0] - 0.5).abs() < 1e-12);
        assert!((x.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn euler_linear_field_matches_closed_form() {
        // dx/dσ = a·x has x(σ) = x(1)·exp(a(σ−1)); Euler on the grid gives
        // the product of (1 + a·Δσ) factors, which tends to the closed form
        let a = 0.8;
        for t_steps in [20usize, 200, 2000] {
            let s = Schedule::new(t_steps, 0, 1.0).unwrap();
            let sig = s.sigmas();
            let mut x = t(&[1.0]);
            let mut prod = 1.0;
            for i in 0..t_steps {
                let v = x.scale(a);
                x = euler_step(&x, &v, sig[i], sig[i + 1]).unwrap();
                prod *= 1.0 + a * (sig[i + 1] - sig[i]);
            }
            assert!((x.data()[0] - prod).abs() < 1e-12);
            let exact = (-a).exp();
            assert!((x.data()[0] - exact).abs() < 0.5 / t_steps as f64);
        }
    }

    #[test]
    fn schedule_grid_and_bounds() {
        let s = Schedule::default();
        let sig = s.sigmas();
        assert_eq!(sig.len(), 21);
        assert_eq!(sig[0], 1.0);
        assert_eq!(sig[20], 0.0);
        assert!((sig[2] - 0.9).abs() < 1e-15);
        assert!(Schedule::new(20, 21, 3.5).is_err());
        assert!(Schedule::new(20, 2, -1.0).is_err());
        assert!(Schedule::new(0, 0, 1.0).is_err());
    }
}
