use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LdlaError, Result};

/// Linear-beta DDPM schedule with its cumulative products `alpha_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps == 0 {
            return Err(LdlaError::Domain("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(LdlaError::Domain(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            params,
            betas,
            alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(LdlaError::Domain(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t)` and `sqrt(1 - alpha_bar_t)`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Per-sample coefficients broadcastable against an `(N, ...)` tensor.
    pub(crate) fn coefficient_tensors(
        &self,
        ts: &[usize],
        rank: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        for &t in ts {
            self.check_timestep(t)?;
        }
        let mut shape = vec![ts.len()];
        shape.resize(rank, 1);
        let (a, b): (Vec<f64>, Vec<f64>) = ts.iter().map(|&t| self.coefficients(t)).unzip();
        let a = Tensor::from_vec(a, shape.as_slice(), device)?.to_dtype(dtype)?;
        let b = Tensor::from_vec(b, shape.as_slice(), device)?.to_dtype(dtype)?;
        Ok((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bar(), &[0.9999]);
    }

    #[test]
    fn defaults_first_and_last() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        assert_eq!(s.alpha_bar()[0], 0.9999);
        // extended-precision oracle: sum of logs with compensated summation
        // over betas recomputed independently from the interpolation formula
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            let y = (-beta).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle = sum.exp();
        let got = s.alpha_bar()[999];
        assert!(((got - oracle) / oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn invalid_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn monotone_and_cumulative() {
        for (steps, b0, b1) in [(1000, 1e-4, 0.02), (50, 1e-3, 0.3), (7, 0.1, 0.1)] {
            let s = make_schedule(steps, b0, b1).unwrap();
            let mut prod = 1.0;
            for (i, (&ab, &b)) in s.alpha_bar().iter().zip(s.betas()).enumerate() {
                prod *= 1.0 - b;
                assert!((ab - prod).abs() < 1e-9);
                assert!(ab > 0.0 && ab <= 1.0);
                if i > 0 {
                    assert!(ab < s.alpha_bar()[i - 1]);
                }
            }
        }
    }
}
