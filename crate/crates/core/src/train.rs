//! The epoch loop, evaluation, and resumable training state.
//!
//! Epoch `e` draws its permutation and augmentations from a ChaCha stream
//! keyed by `(seed, e)`, so a run resumed from the checkpoint of epoch `e−1`
//! replays exactly what an uninterrupted run would have done.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{make_batch, AugmentPolicy, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, update_centers, ClassCenters, HybridLossConfig};
use crate::metrics::{aca, macro_f1, multiclass_auc, per_class_f1, ConfusionMatrix, MulticlassAuc};
use crate::nn::checkpoint::{load_model, save_model};
use crate::nn::Model;
use crate::optim::{sgd_step, SgdConfig, Velocity};
use crate::tensor::{io, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub lambda: f64,
    pub center_alpha: f64,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            sgd: SgdConfig::default(),
            lambda: 0.1,
            center_alpha: 0.5,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.sgd.validate(), self.augment.validate()] {
            if let Err(Error::InvalidConfig(e)) = r {
                errs.extend(e);
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.center_alpha) {
            errs.push(format!("center_alpha must lie in [0, 1], got {}", self.center_alpha));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// One row of `metrics.csv`. `loss` is the sample-weighted mean training
/// loss of the epoch (epoch 0: the untrained model on unaugmented data);
/// the rest are test-split metrics after the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub aca: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub aca: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Last completed epoch.
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub velocity: Velocity<T>,
    pub centers: ClassCenters<T>,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    global_step: u64,
    seed: u64,
    center_alpha: f64,
    best: Option<BestSnapshot>,
    history: Vec<EpochRecord>,
}

/// Weight of each batch in the backbone's running BN statistics.
pub const BN_MOMENTUM: f64 = 0.1;

const STATE: &str = "state.toml";

impl<T: Real> TrainState<T> {
    pub fn new(model: &Model<T>, cfg: &TrainConfig) -> Result<Self> {
        let mc = model.config();
        Ok(TrainState {
            epoch: 0,
            global_step: 0,
            seed: cfg.seed,
            velocity: Velocity::zeros_like(model.params())?,
            centers: ClassCenters::zeros(mc.classes, mc.feature_width(), cfg.center_alpha)?,
            best: None,
            history: Vec::new(),
        })
    }

    /// Writes `state.toml`, `centers.sgt` and `velocity/vNNN.sgt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("velocity");
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (i, v) in self.velocity.buffers.iter().enumerate() {
            io::save(v, vdir.join(format!("v{i:03}.sgt")))?;
        }
        io::save(&self.centers.centers, dir.join("centers.sgt"))?;
        let file = StateFile {
            epoch: self.epoch,
            global_step: self.global_step,
            seed: self.seed,
            center_alpha: self.centers.alpha,
            best: self.best,
            history: self.history.clone(),
        };
        let text = toml::to_string(&file).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(dir.join(STATE), text).map_err(|e| Error::io(dir.join(STATE), e))
    }

    pub fn load(dir: &Path, model: &Model<T>) -> Result<Self> {
        let path = dir.join(STATE);
        if !path.is_file() {
            return Err(Error::MissingFiles(vec![path]));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StateFile =
            toml::from_str(&text).map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
        let mut buffers = Vec::with_capacity(model.params().len());
        for (i, p) in model.params().iter().enumerate() {
            let v: Tensor<T> = io::load(dir.join("velocity").join(format!("v{i:03}.sgt")))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "velocity {i} does not match parameter {}",
                    p.name
                )));
            }
            buffers.push(v);
        }
        let centers: Tensor<T> = io::load(dir.join("centers.sgt"))?;
        let mc = model.config();
        if centers.dims() != [mc.classes, mc.feature_width()] {
            return Err(Error::Incompatible(format!(
                "centers have shape {:?}, model needs {}×{}",
                centers.shape(),
                mc.classes,
                mc.feature_width()
            )));
        }
        Ok(TrainState {
            epoch: file.epoch,
            global_step: file.global_step,
            seed: file.seed,
            velocity: Velocity { buffers },
            centers: ClassCenters {
                centers,
                alpha: file.center_alpha,
            },
            best: file.best,
            history: file.history,
        })
    }
}

/// Saves model and state together so training can resume from `dir`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, state: &TrainState<T>, dir: &Path) -> Result<()> {
    save_model(model, dir)?;
    state.save(dir)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model<T>, TrainState<T>)> {
    let model = load_model(dir)?;
    let state = TrainState::load(dir, &model)?;
    Ok((model, state))
}

pub fn write_history_csv<W: std::io::Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))
}

/// Predictions and metrics of a model on one split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub aca: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub auc: MulticlassAuc,
    /// Row-major `N×K` softmax probabilities.
    pub probabilities: Vec<f64>,
    /// Row-major `N×D` features (the vector the center loss acts on).
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub labels: Vec<usize>,
    pub records: Vec<usize>,
}

impl Evaluation {
    /// Scores raw logits (`N×K`, row-major) against labels.
    pub fn from_logits(logits: &[f64], classes: usize, labels: &[usize]) -> Result<Self> {
        let mut probabilities = Vec::with_capacity(logits.len());
        let mut predicted = Vec::with_capacity(labels.len());
        for row in logits.chunks(classes) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probabilities.extend(e.iter().map(|v| v / s));
            // first maximum wins ties
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
            predicted.push(best);
        }
        let confusion = ConfusionMatrix::from_predictions(labels, &predicted, classes)?;
        Ok(Evaluation {
            aca: aca(&confusion)?,
            macro_f1: macro_f1(&confusion),
            per_class_f1: per_class_f1(&confusion),
            auc: multiclass_auc(&probabilities, classes, labels)?,
            confusion,
            probabilities,
            features: Vec::new(),
            feature_dim: 0,
            labels: labels.to_vec(),
            records: (0..labels.len()).collect(),
        })
    }
}

/// Runs the model over `samples` in order, without augmentation.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], size: usize, batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let (logits, features, labels) = infer(model, samples, size, batch_size)?;
    let classes = model.config().classes;
    let mut ev = Evaluation::from_logits(&logits, classes, &labels)?;
    ev.feature_dim = model.config().feature_width();
    ev.features = features;
    ev.records = samples.iter().map(|s| s.record).collect();
    Ok(ev)
}

type Inference = (Vec<f64>, Vec<f64>, Vec<usize>);

fn infer<T: Real>(model: &Model<T>, samples: &[Sample], size: usize, batch_size: usize) -> Result<Inference> {
    let (mut logits, mut features, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = make_batch::<T, ChaCha8Rng>(&refs, size, None)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, x)?;
        logits.extend(g.value(out.logits).to_f64_vec());
        features.extend(g.value(out.features).to_f64_vec());
        labels.extend(y);
    }
    Ok((logits, features, labels))
}

/// Sample-weighted mean hybrid loss over `samples`, no augmentation, no updates.
pub fn mean_loss<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    size: usize,
    batch_size: usize,
    loss_cfg: &HybridLossConfig,
    centers: &ClassCenters<T>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = make_batch::<T, ChaCha8Rng>(&refs, size, None)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, x)?;
        let l = hybrid_loss(&mut g, out.logits, out.features, &y, loss_cfg, centers)?;
        total += to_f64(g.value(l.total).item()?) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Generator for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn diagnostics<T: Real>(model: &Model<T>) -> String {
    let mut bad: Vec<&str> = model
        .params()
        .iter()
        .filter(|p| !p.value.is_finite())
        .map(|p| p.name.as_str())
        .collect();
    if bad.is_empty() {
        let mut by_size: Vec<(&str, f64)> = model
            .params()
            .iter()
            .map(|p| (p.name.as_str(), to_f64(p.value.max_abs())))
            .collect();
        by_size.sort_by(|a, b| b.1.total_cmp(&a.1));
        let top: Vec<String> = by_size
            .iter()
            .take(3)
            .map(|(n, v)| format!("{n} max|w|={v:.3e}"))
            .collect();
        return format!("largest parameters: {}", top.join(", "));
    }
    bad.truncate(8);
    format!("non-finite parameters: {}", bad.join(", "))
}

fn step_error<T: Real>(e: Error, (epoch, step, global): (usize, usize, u64), model: &Model<T>) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!(
            "epoch {epoch}, step {step} (global {global}): {msg}; {}",
            diagnostics(model)
        )),
        other => other,
    }
}

/// Trains from `state` up to `cfg.epochs`, calling `on_epoch` after every
/// completed epoch (and once for epoch 0 on a fresh state).
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    mut on_epoch: impl FnMut(&Model<T>, &TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    if model.config().classes != data.classes() {
        return Err(Error::Incompatible(format!(
            "model has {} classes, dataset {}",
            model.config().classes,
            data.classes()
        )));
    }
    let loss_cfg = HybridLossConfig::new(cfg.lambda, data.weights.clone())?;
    let size = data.image_size();
    let bs = cfg.sgd.batch_size;

    let record = |model: &Model<T>, epoch: usize, loss: f64| -> Result<EpochRecord> {
        let ev = evaluate(model, &data.test, size, bs)?;
        Ok(EpochRecord {
            epoch,
            loss,
            aca: ev.aca,
            macro_f1: ev.macro_f1,
            auc: ev.auc.auc,
        })
    };

    if state.history.is_empty() {
        let loss = mean_loss(model, &data.train, size, bs, &loss_cfg, &state.centers)?;
        let r = record(model, 0, loss)?;
        log::info!("epoch 0: loss {:.4} aca {:.4}", r.loss, r.aca);
        state.history.push(r);
        on_epoch(model, &state)?;
    }

    for epoch in state.epoch + 1..=cfg.epochs {
        let mut rng = epoch_rng(state.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let at = (epoch, step, state.global_step);
            let (x, labels) = make_batch::<T, _>(&refs, size, Some((&cfg.augment, &mut rng)))?;
            let mut g = Graph::new();
            let out = model.forward_train(&mut g, x).map_err(|e| step_error(e, at, model))?;
            let loss = hybrid_loss(&mut g, out.logits, out.features, &labels, &loss_cfg, &state.centers)
                .map_err(|e| step_error(e, at, model))?;
            let value = to_f64(g.value(loss.total).item()?);
            if !value.is_finite() {
                return Err(step_error(Error::NonFinite(format!("loss is {value}")), at, model));
            }
            loss_sum += value * chunk.len() as f64;
            let k = model.config().classes;
            for (row, &y) in g.value(out.logits).data().chunks(k).zip(&labels) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
                correct += usize::from(best == y);
            }
            g.backward(loss.total)?;
            let features = g.value(out.features).clone();
            {
                let grads: Vec<Option<&[T]>> = out.params.iter().map(|&id| g.grad_data(id)).collect();
                sgd_step(model.params_mut(), &grads, &mut state.velocity, &cfg.sgd)?;
            }
            if let Some(p) = model.params().iter().find(|p| !p.value.is_finite()) {
                let msg = format!("update made {} non-finite", p.name);
                return Err(step_error(Error::NonFinite(msg), at, model));
            }
            if !out.batch_stats.is_empty() {
                model.update_running_stats(&out.batch_stats, BN_MOMENTUM)?;
            }
            update_centers(&features, &labels, &mut state.centers)?;
            state.global_step += 1;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let r = record(model, epoch, train_loss)?;
        log::info!(
            "epoch {epoch}: loss {:.4} running train acc {:.4} test aca {:.4} macro-F1 {:.4} auc {:.4}",
            r.loss,
            correct as f64 / data.train.len() as f64,
            r.aca,
            r.macro_f1,
            r.auc
        );
        if state.best.is_none_or(|b| r.aca > b.aca) {
            state.best = Some(BestSnapshot { epoch, aca: r.aca });
        }
        state.history.push(r);
        state.epoch = epoch;
        on_epoch(model, &state)?;
    }
    Ok(state)
}

/// Writes the usual run artifacts after each epoch: `metrics.csv`,
/// `checkpoints/epoch-NNN/` and, when the test ACA improves, `best/`.
pub fn run_dir_writer<T: Real>(dir: &Path) -> impl FnMut(&Model<T>, &TrainState<T>) -> Result<()> + '_ {
    move |model, state| {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join("metrics.csv");
        let f = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
        write_history_csv(&state.history, f)?;
        save_checkpoint(
            model,
            state,
            &dir.join("checkpoints").join(format!("epoch-{:03}", state.epoch)),
        )?;
        if state.best.is_some_and(|b| b.epoch == state.epoch) {
            save_checkpoint(model, state, &dir.join("best"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, DatasetManifest, PrepareConfig};
    use crate::nn::{build_model, ModelConfig, ParamGroup};

    fn tiny() -> (tempfile::TempDir, Dataset, ModelConfig) {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::synthetic(3, 3, 2, 20, 1).unwrap();
        let cfg = PrepareConfig {
            image_size: 8,
            classes: 3,
            ..PrepareConfig::default()
        };
        prepare(&m, &cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let mc = ModelConfig {
            stage_channels: vec![4, 8],
            stage_strides: vec![2, 1],
            attention_channels: vec![8],
            classes: 3,
            ..ModelConfig::default()
        };
        (dir, ds, mc)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            sgd: SgdConfig {
                batch_size: 4,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_records_initial_metrics_only() {
        let (_d, ds, mc) = tiny();
        let mut model = build_model::<f64>(&mc, 0).unwrap();
        let before = model.params().to_vec();
        let state = TrainState::new(&model, &cfg(0)).unwrap();
        let mut calls = 0;
        let out = train(&mut model, &ds, &cfg(0), state, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].epoch, 0);
        assert_eq!(calls, 1);
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (_d, ds, mc) = tiny();
        let mut model = build_model::<f64>(&mc, 0).unwrap();
        let before = model.params().to_vec();
        let mut c = cfg(2);
        c.sgd.lr = 0.0;
        let state = TrainState::new(&model, &c).unwrap();
        let out = train(&mut model, &ds, &c, state, |_, _| Ok(())).unwrap();
        // only the running BN statistics move
        for (p, q) in model.params().iter().zip(&before) {
            assert_eq!(p.value == q.value, p.group != ParamGroup::Running, "{}", p.name);
        }
        assert_eq!(out.global_step, 6);
        assert_ne!(out.centers.centers.max_abs(), 0.0);
    }

    #[test]
    fn state_round_trips_through_disk() {
        let (_d, ds, mc) = tiny();
        let mut model = build_model::<f64>(&mc, 0).unwrap();
        let state = TrainState::new(&model, &cfg(1)).unwrap();
        let state = train(&mut model, &ds, &cfg(1), state, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &state, dir.path()).unwrap();
        let (m2, s2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(m2.params(), model.params());
        assert_eq!(s2, state);
    }

    #[test]
    fn oracle_logits_score_perfectly() {
        let labels = [0, 1, 2, 1, 0, 2];
        let logits: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..3).map(move |k| if k == y { 1.0 } else { 0.0 }))
            .collect();
        let ev = Evaluation::from_logits(&logits, 3, &labels).unwrap();
        assert_eq!((ev.aca, ev.macro_f1, ev.auc.auc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn config_validation_collects_everything() {
        let mut c = TrainConfig::default();
        c.sgd.momentum = 2.0;
        c.lambda = -1.0;
        c.augment.hflip_prob = 3.0;
        match c.validate() {
            Err(Error::InvalidConfig(e)) => assert_eq!(e.len(), 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }
}
