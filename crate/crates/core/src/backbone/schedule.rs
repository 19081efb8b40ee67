use candle_core::Tensor;

use crate::error::{Error, Result};

/// Discrete forward-noising schedule. Timesteps are 1-based: `alpha_bar(t)`
/// is the product of the first `t` alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Invalid("noise schedule is empty".into()));
        }
        if let Some((i, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a <= 1.0))
        {
            return Err(Error::Invalid(format!(
                "alpha at timestep {} is {a}, outside (0, 1]",
                i + 1
            )));
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    /// Betas spaced linearly in square-root space between `beta_start` and
    /// `beta_end`, the schedule latent diffusion models are trained with.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("noise schedule is empty".into()));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let alphas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                let s = a + (b - a) * frac;
                1.0 - s * s
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// 1000 steps, betas from 0.00085 to 0.012.
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("valid default schedule")
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::Timestep { t, max: self.len() })
        } else {
            Ok(())
        }
    }
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps`.
pub fn mix_noise(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape("noise tensor", z0.dims(), eps.dims()));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Invalid(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    let signal = z0.affine(alpha_bar.sqrt(), 0.0)?;
    let noise = eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?;
    Ok((signal + noise)?)
}

/// Samples `z_t` directly from `z0` at timestep `t`.
pub fn add_noise(schedule: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    mix_noise(z0, eps, schedule.alpha_bar(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    #[test]
    fn worked_example() {
        let out = mix_noise(&scalar(2.0), &scalar(0.5), 0.64).unwrap();
        let v = out.to_vec1::<f64>().unwrap()[0];
        assert!((v - 1.9).abs() < 1e-12);
    }

    #[test]
    fn limits_are_exact() {
        let z = Tensor::new(&[1.5f64, -2.25, 0.125], &Device::Cpu).unwrap();
        let e = Tensor::new(&[0.3f64, 7.0, -1.0], &Device::Cpu).unwrap();
        assert_eq!(
            mix_noise(&z, &e, 1.0).unwrap().to_vec1::<f64>().unwrap(),
            z.to_vec1::<f64>().unwrap()
        );
        assert_eq!(
            mix_noise(&z, &e, 0.0).unwrap().to_vec1::<f64>().unwrap(),
            e.to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn cumulative_products() {
        let s = NoiseSchedule::stable_diffusion();
        assert_eq!(s.len(), 1000);
        let mut prod = 1.0;
        for t in 1..=s.len() {
            prod *= s.alphas()[t - 1];
            assert!((s.alpha_bar(t).unwrap() - prod).abs() <= 1e-12);
            assert!(s.alpha_bar(t).unwrap() > 0.0);
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() <= s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 0.00085)).abs() < 1e-15);
    }

    #[test]
    fn timestep_range_is_enforced() {
        let s = NoiseSchedule::scaled_linear(10, 1e-4, 2e-2).unwrap();
        let z = scalar(1.0);
        assert!(matches!(
            add_noise(&s, &z, 0, &z),
            Err(Error::Timestep { .. })
        ));
        assert!(matches!(
            add_noise(&s, &z, 11, &z),
            Err(Error::Timestep { .. })
        ));
        assert!(add_noise(&s, &z, 10, &z).is_ok());
        assert!(NoiseSchedule::from_alphas(vec![0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(3, candle_core::DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(mix_noise(&a, &b, 0.5).is_err());
    }
}
