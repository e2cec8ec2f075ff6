//! Weighted cross-entropy, center loss and their λ-weighted sum.
//!
//! Cross-entropy is averaged over the batch; the center term is the plain
//! half sum of squared distances over the batch, then scaled by λ. Class
//! centers are not graph parameters: they move by [`update_centers`] after
//! each optimizer step.

use std::fmt;
use std::io::Write;

use crate::autodiff::{CustomOp, Graph, NodeId};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{lit, Real, Tensor};

/// Rescaling weight of one class, kept as the exact ratio `total / count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassWeight {
    pub total: u64,
    pub count: u64,
}

impl ClassWeight {
    pub fn value(&self) -> f64 {
        self.total as f64 / self.count as f64
    }

    /// `weight · count`, computed without rounding.
    pub fn times_count(&self) -> u64 {
        // (total / count) · count == total in exact arithmetic
        self.total
    }
}

impl fmt::Display for ClassWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Per-class weights `total / count_k` derived from training-set counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<ClassWeight>,
}

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidInput("no classes to weight".into()));
        }
        let empty: Vec<String> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(k, _)| format!("class {k} has no training samples"))
            .collect();
        if !empty.is_empty() {
            return Err(Error::InvalidInput(empty.join("; ")));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        Ok(ClassWeights {
            weights: counts.iter().map(|&c| ClassWeight { total, count: c as u64 }).collect(),
        })
    }

    /// Every class weighted 1.
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            weights: vec![ClassWeight { total: 1, count: 1 }; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> ClassWeight {
        self.weights[class]
    }

    pub fn values(&self) -> Vec<f64> {
        self.weights.iter().map(ClassWeight::value).collect()
    }

    /// Writes the `class,count,weight` report.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "count", "weight"])?;
        for (k, cw) in self.weights.iter().enumerate() {
            w.write_record([k.to_string(), cw.count.to_string(), cw.value().to_string()])?;
        }
        w.flush().map_err(|e| Error::io("class weights", e))?;
        Ok(())
    }
}

/// One center per class, `K×D`, with center learning rate α.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters<T> {
    pub centers: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> ClassCenters<T> {
    pub fn zeros(classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        Ok(ClassCenters {
            centers: Tensor::zeros([classes, dim])?,
            alpha,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.dims()[1]
    }

    pub fn center(&self, class: usize) -> &[T] {
        let d = self.dim();
        &self.centers.data()[class * d..(class + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridLossConfig {
    pub lambda: f64,
    pub class_weights: ClassWeights,
}

impl HybridLossConfig {
    pub fn new(lambda: f64, class_weights: ClassWeights) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(vec![format!(
                "lambda must be a finite nonnegative number, got {lambda}"
            )]));
        }
        Ok(HybridLossConfig { lambda, class_weights })
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {}", labels.len(), n));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {y} of sample {i} is outside [0, {}]",
            classes - 1
        )));
    }
    Ok(())
}

struct WeightedCe<T> {
    labels: Vec<usize>,
    weights: Vec<T>,
    probs: Vec<T>,
}

impl<T: Real> CustomOp<T> for WeightedCe<T> {
    fn name(&self) -> &'static str {
        "weighted_ce"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, k) = (inputs[0].dims()[0], inputs[0].dims()[1]);
        let scale = g[0] / lit(n as f64);
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[i * k + y] = d[i * k + y] - T::one();
            let w = self.weights[y] * scale;
            for v in &mut d[i * k..(i + 1) * k] {
                *v = *v * w;
            }
        }
        vec![Some(d)]
    }
}

/// Batch mean of `weight_y · (−log softmax(logits)[y])`.
pub fn weighted_ce<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[usize], w: &ClassWeights) -> Result<NodeId> {
    let (n, k) = g.shape(logits).matrix()?;
    if k != w.len() {
        return Err(dim_err!("{} logits per sample but {} class weights", k, w.len()));
    }
    check_labels(labels, n, k)?;
    let weights: Vec<T> = (0..k).map(|c| lit(w.get(c).value())).collect();
    let x = g.value(logits).data();
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            sum = sum + *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p = *p / sum;
        }
        let nll = max + sum.ln() - row[y];
        total = total + weights[y] * nll;
    }
    let loss = total / lit(n as f64);
    g.custom(
        &[logits],
        Tensor::scalar(loss),
        Box::new(WeightedCe {
            labels: labels.to_vec(),
            weights,
            probs,
        }),
    )
}

struct CenterLoss<T> {
    diff: Vec<T>,
}

impl<T: Real> CustomOp<T> for CenterLoss<T> {
    fn name(&self) -> &'static str {
        "center_loss"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.diff.iter().map(|&d| d * g[0]).collect())]
    }
}

/// `½ Σ_i ‖x_i − c_{y_i}‖²` over the batch; centers are held constant.
pub fn center_loss<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<NodeId> {
    let (n, d) = g.shape(features).matrix()?;
    if d != centers.dim() {
        return Err(dim_err!(
            "features have dimension {} but centers have {}",
            d,
            centers.dim()
        ));
    }
    check_labels(labels, n, centers.classes())?;
    let x = g.value(features).data();
    let mut diff = vec![T::zero(); n * d];
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let c = centers.center(y);
        for j in 0..d {
            let v = x[i * d + j] - c[j];
            diff[i * d + j] = v;
            total = total + v * v;
        }
    }
    let loss = total * lit(0.5);
    g.custom(&[features], Tensor::scalar(loss), Box::new(CenterLoss { diff }))
}

/// Node handles of the hybrid objective and its two parts.
#[derive(Debug, Clone, Copy)]
pub struct HybridLoss {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub center: NodeId,
}

/// `L = L_ce + λ · L_ct`.
pub fn hybrid_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    features: NodeId,
    labels: &[usize],
    cfg: &HybridLossConfig,
    centers: &ClassCenters<T>,
) -> Result<HybridLoss> {
    let ce = weighted_ce(g, logits, labels, &cfg.class_weights)?;
    let ct = center_loss(g, features, labels, centers)?;
    let scaled = g.scale(ct, lit(cfg.lambda))?;
    let total = g.add(ce, scaled)?;
    Ok(HybridLoss {
        total,
        cross_entropy: ce,
        center: ct,
    })
}

/// Moves each class center present in the batch toward its samples:
/// `c_k ← c_k − α · Σ_{y_i = k}(c_k − x_i) / (1 + n_k)`.
pub fn update_centers<T: Real>(features: &Tensor<T>, labels: &[usize], centers: &mut ClassCenters<T>) -> Result<()> {
    let (n, d) = features.shape().matrix()?;
    if d != centers.dim() {
        return Err(dim_err!(
            "features have dimension {} but centers have {}",
            d,
            centers.dim()
        ));
    }
    check_labels(labels, n, centers.classes())?;
    let k = centers.classes();
    let mut delta = vec![T::zero(); k * d];
    let mut counts = vec![0usize; k];
    let x = features.data();
    let c = centers.centers.data();
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for j in 0..d {
            delta[y * d + j] = delta[y * d + j] + (c[y * d + j] - x[i * d + j]);
        }
    }
    let alpha: T = lit(centers.alpha);
    let c = centers.centers.data_mut();
    for (class, &m) in counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let denom: T = lit((1 + m) as f64);
        for j in 0..d {
            let at = class * d + j;
            c[at] = c[at] - alpha * delta[at] / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_ce(logits: &[f64], k: usize, labels: &[usize], w: &ClassWeights) -> f64 {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_f64([labels.len(), k], logits).unwrap());
        let l = weighted_ce(&mut g, x, labels, w).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let l = forward_ce(&[0.3; 10], 5, &[0, 4], &ClassWeights::uniform(5));
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let l = forward_ce(&[60.0, 0.0, 0.0, 0.0, 0.0], 5, &[0], &ClassWeights::uniform(5));
        assert!(l < 1e-20);
    }

    #[test]
    fn weights_from_counts() {
        let w = ClassWeights::from_counts(&[50, 25, 10, 10, 5]).unwrap();
        assert_eq!(w.values(), vec![2.0, 4.0, 10.0, 10.0, 20.0]);
        assert!(ClassWeights::from_counts(&[3, 0, 1]).is_err());
    }

    #[test]
    fn weighted_ce_matches_per_sample_evaluation() {
        let w = ClassWeights::from_counts(&[50, 25, 10, 10, 5]).unwrap();
        let logits = [
            1.0, 0.0, -1.0, 0.5, 2.0, /**/ 0.0, 3.0, 0.0, 0.0, 0.0, /**/ -2.0, 0.0, 0.0, 1.0, 0.0,
        ];
        let labels = [4, 1, 3];
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * 5..i * 5 + 5];
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            want += w.get(y).value() * -(row[y].exp() / z).ln();
        }
        want /= 3.0;
        let got = forward_ce(&logits, 5, &labels, &w);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([1, 3]).unwrap());
        assert!(weighted_ce(&mut g, x, &[3], &ClassWeights::uniform(3)).is_err());
    }

    #[test]
    fn center_loss_values() {
        let centers = ClassCenters::<f64>::zeros(2, 2, 0.5).unwrap();
        let mut g = Graph::new();
        let x = g.param(Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap());
        let l = center_loss(&mut g, x, &[1], &centers).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 12.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad_data(x).unwrap(), &[3.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::zeros([3, 2]).unwrap());
        let l = center_loss(&mut g, x, &[0, 1, 1], &centers).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        let bad = g.param(Tensor::zeros([1, 3]).unwrap());
        assert!(center_loss(&mut g, bad, &[0], &centers).is_err());
    }

    #[test]
    fn center_update_rules() {
        let feats = Tensor::<f64>::from_f64([2, 2], &[2.0, 2.0, -4.0, 0.0]).unwrap();
        let mut c = ClassCenters::zeros(3, 2, 0.0).unwrap();
        update_centers(&feats, &[0, 1], &mut c).unwrap();
        assert!(c.centers.data().iter().all(|&v| v == 0.0));

        let mut c = ClassCenters::zeros(3, 2, 1.0).unwrap();
        update_centers(&feats, &[0, 1], &mut c).unwrap();
        assert_eq!(c.center(0), &[1.0, 1.0]);
        assert_eq!(c.center(1), &[-2.0, 0.0]);
        assert_eq!(c.center(2), &[0.0, 0.0]);
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let w = ClassWeights::from_counts(&[3, 1]).unwrap();
        let centers = ClassCenters::<f64>::zeros(2, 2, 0.5).unwrap();
        let cfg = HybridLossConfig::new(0.0, w.clone()).unwrap();
        let mut g = Graph::new();
        let logits = g.param(Tensor::from_f64([2, 2], &[0.2, -0.7, 1.5, 0.1]).unwrap());
        let feats = g.param(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = hybrid_loss(&mut g, logits, feats, &[0, 1], &cfg, &centers).unwrap();
        let ce = weighted_ce(&mut g, logits, &[0, 1], &w).unwrap();
        assert_eq!(
            g.value(h.total).item().unwrap().to_bits(),
            g.value(ce).item().unwrap().to_bits()
        );
        assert!(HybridLossConfig::new(-0.1, w).is_err());
    }
}
