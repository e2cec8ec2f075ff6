//! Central finite-difference verification of reverse-mode gradients.
//!
//! Only forward evaluations feed the numerical side, so a broken backward
//! rule cannot hide behind itself.
//!
//! ReLU makes the loss piecewise smooth. When a `±h` stencil flips any ReLU
//! relative to the unperturbed pass, the central difference averages two
//! linear pieces and is meaningless; such elements are retried with a ten
//! times smaller step, down to [`MIN_STEP`], and counted as skipped if every
//! step still straddles a kink.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, ClassCenters, ClassWeights, HybridLossConfig};
use crate::nn::{build_model, BnMode, ModelConfig, ParamGroup, Placement};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const MIN_STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const SCALE_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub elements: usize,
    pub worst_rel_err: f64,
    /// Elements that needed a smaller step to stay off a ReLU kink.
    pub refined: usize,
    /// Elements with no kink-free step; excluded from `worst_rel_err`.
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

/// Compares the backward pass of `loss` against central differences for
/// every element of every named leaf.
pub fn check_gradients<F>(leaves: &[(String, Tensor<f64>)], loss: F) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let l = loss(&mut g, &ids)?;
        Ok((g.value(l).item()?, g.relu_signature()))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let l = loss(&mut g, &ids)?;
    let base = g.relu_signature();
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, (_, t))| g.grad_data(id).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut values: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut out = Vec::with_capacity(leaves.len());
    for (i, (name, t)) in leaves.iter().enumerate() {
        let mut check = GroupCheck {
            name: name.clone(),
            elements: t.numel(),
            worst_rel_err: 0.0,
            refined: 0,
            skipped: 0,
        };
        for j in 0..t.numel() {
            let orig = t.data()[j];
            let mut step = STEP;
            let numeric = loop {
                values[i].data_mut()[j] = orig + step;
                let (plus, sp) = eval(&values)?;
                values[i].data_mut()[j] = orig - step;
                let (minus, sm) = eval(&values)?;
                values[i].data_mut()[j] = orig;
                if sp == base && sm == base {
                    break Some((plus - minus) / (2.0 * step));
                }
                step /= 10.0;
                if step < MIN_STEP * 0.5 {
                    break None;
                }
            };
            match numeric {
                Some(n) => {
                    if step < STEP {
                        check.refined += 1;
                    }
                    check.worst_rel_err = check.worst_rel_err.max(relative_error(analytic[i][j], n));
                }
                None => check.skipped += 1,
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// Problem size for an end-to-end model check.
#[derive(Debug, Clone)]
pub struct ModelCheckSpec {
    pub model: ModelConfig,
    pub batch: usize,
    pub image_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl ModelCheckSpec {
    /// `N=2` images of `8×8`, backbone kept at stride 1 so the attention net
    /// sees an `8×8×8` map, `K=5`.
    pub fn small(placement: Placement) -> Self {
        ModelCheckSpec {
            model: ModelConfig {
                in_channels: 3,
                stage_channels: vec![4, 8],
                stage_strides: vec![1, 1],
                blocks_per_stage: 1,
                attention_channels: vec![8, 8],
                placement,
                reduction: 4,
                feature_dim: 0,
                classes: 5,
                freeze_backbone: false,
            },
            batch: 2,
            image_size: 8,
            lambda: 0.1,
            seed: 7,
        }
    }
}

/// Finite-difference check of the hybrid loss with respect to every model
/// parameter tensor.
pub fn check_model(spec: &ModelCheckSpec) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        freeze_backbone: false,
        ..spec.model.clone()
    };
    let mut model = build_model::<f64>(&cfg, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    // nonzero biases so their gradients are exercised away from symmetric points
    for p in model.params_mut() {
        if p.name.ends_with(".b") || p.name.ends_with(".bn.beta") {
            p.value = Tensor::uniform(p.value.dims().to_vec(), -0.1, 0.1, &mut rng)?;
        } else if p.name.ends_with(".bn.gamma") {
            p.value = Tensor::uniform(p.value.dims().to_vec(), 0.5, 1.5, &mut rng)?;
        }
    }
    let s = spec.image_size;
    let images = Tensor::uniform([spec.batch, s, s, cfg.in_channels], -1.0, 1.0, &mut rng)?;
    let k = cfg.classes;
    let labels: Vec<usize> = (0..spec.batch).map(|i| (i * 3 + 1) % k).collect();
    let counts: Vec<usize> = (1..=k).collect();
    let loss_cfg = HybridLossConfig::new(spec.lambda, ClassWeights::from_counts(&counts)?)?;
    let centers = ClassCenters {
        centers: Tensor::uniform([k, cfg.feature_width()], -0.5, 0.5, &mut rng)?,
        alpha: 0.5,
    };

    // running statistics are unused by a batch-mode pass
    let trainable: Vec<bool> = model.params().iter().map(|p| p.group != ParamGroup::Running).collect();
    let leaves: Vec<(String, Tensor<f64>)> = model
        .params()
        .iter()
        .filter(|p| p.group != ParamGroup::Running)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    let groups = check_gradients(&leaves, |g, ids| {
        let mut next = ids.iter();
        let all: Vec<NodeId> = model
            .params()
            .iter()
            .zip(&trainable)
            .map(|(p, &t)| {
                if t {
                    *next.next().unwrap()
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        let out = model.forward_with(g, images.clone(), all, BnMode::Batch)?;
        Ok(hybrid_loss(g, out.logits, out.features, &labels, &loss_cfg, &centers)?.total)
    })?;
    Ok(GradCheckReport {
        label: cfg.placement.to_string(),
        groups,
    })
}

/// Runs [`check_model`] for every placement.
pub fn check_all_placements(seed: u64) -> Result<Vec<GradCheckReport>> {
    Placement::ALL
        .into_iter()
        .map(|p| {
            let mut spec = ModelCheckSpec::small(p);
            spec.seed = seed;
            check_model(&spec)
        })
        .collect()
}

pub fn ensure_passed(reports: &[GradCheckReport], tolerance: f64) -> Result<()> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed(tolerance))
        .map(|r| format!("{} (worst {:.3e})", r.label, r.worst()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check above {tolerance:e}: {}",
            failed.join(", ")
        )))
    }
}
