//! SGD with momentum and coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{lit, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-8,
            batch_size: 20,
        }
    }
}

impl SgdConfig {
    /// `lr = 0` is accepted: it leaves every parameter in place.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// Momentum buffers, one per parameter (empty for frozen ones).
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity<T> {
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> Velocity<T> {
    pub fn zeros_like(params: &[Param<T>]) -> Result<Self> {
        Ok(Velocity {
            buffers: params
                .iter()
                .map(|p| Tensor::zeros(p.value.dims().to_vec()))
                .collect::<Result<_>>()?,
        })
    }
}

/// One update: `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`. Frozen parameters are skipped.
pub fn sgd_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Option<&[T]>],
    velocity: &mut Velocity<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocity.buffers.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.buffers.len()
        )));
    }
    if let Some(p) = params
        .iter()
        .zip(grads)
        .find(|(p, g)| !p.frozen && g.is_none())
        .map(|(p, _)| p)
    {
        return Err(Error::Graph(format!("trainable parameter {} has no gradient", p.name)));
    }
    let lr: T = lit(cfg.lr);
    let mu: T = lit(cfg.momentum);
    let wd: T = lit(cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut velocity.buffers) {
        if p.frozen {
            continue;
        }
        let g = g.expect("checked above");
        if g.len() != p.value.numel() || v.numel() != p.value.numel() {
            return Err(Error::InvalidInput(format!(
                "gradient or velocity of {} has the wrong size",
                p.name
            )));
        }
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.data_mut()) {
            *vi = mu * *vi + (gi + wd * *w);
            *w = *w - lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn scalar_param(v: f64, frozen: bool) -> Param<f64> {
        Param {
            name: "p".into(),
            value: Tensor::from_f64([1], &[v]).unwrap(),
            group: ParamGroup::Head,
            frozen,
        }
    }

    #[test]
    fn plain_sgd_subtracts_lr_times_grad() {
        let mut ps = vec![scalar_param(1.0, false)];
        let mut v = Velocity::zeros_like(&ps).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
        };
        sgd_step(&mut ps, &[Some(&[0.5][..])], &mut v, &cfg).unwrap();
        assert_eq!(ps[0].value.data(), &[1.0 - 0.1 * 0.5]);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut ps = vec![scalar_param(3.0, false)];
        let mut v = Velocity::zeros_like(&ps).unwrap();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        for _ in 0..10 {
            sgd_step(&mut ps, &[Some(&[0.0][..])], &mut v, &cfg).unwrap();
        }
        assert_eq!(ps[0].value.data(), &[3.0]);
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        // f(p) = p²/2, gradient p
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
        };
        let mut ps = vec![scalar_param(1.0, false)];
        let mut vel = Velocity::zeros_like(&ps).unwrap();
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..50 {
            let g = ps[0].value.data()[0];
            sgd_step(&mut ps, &[Some(&[g][..])], &mut vel, &cfg).unwrap();
            v = 0.9 * v + p;
            p -= 0.1 * v;
            assert!((ps[0].value.data()[0] - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_untouched_and_missing_gradient_named() {
        let mut ps = vec![scalar_param(2.0, true), scalar_param(1.0, false)];
        ps[1].name = "head.w".into();
        let mut v = Velocity::zeros_like(&ps).unwrap();
        let cfg = SgdConfig::default();
        sgd_step(&mut ps, &[None, Some(&[1.0][..])], &mut v, &cfg).unwrap();
        assert_eq!(ps[0].value.data(), &[2.0]);
        let err = sgd_step(&mut ps, &[None, None], &mut v, &cfg).unwrap_err();
        assert!(err.to_string().contains("head.w"));
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            lr: -1.0,
            momentum: 1.0,
            weight_decay: -1.0,
            batch_size: 0,
        };
        match bad.validate() {
            Err(Error::InvalidConfig(e)) => assert_eq!(e.len(), 4),
            other => panic!("{other:?}"),
        }
    }
}
