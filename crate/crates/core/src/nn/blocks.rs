//! Graph-level building blocks: conv-BN residual backbone, squeeze-and-excitation,
//! the attention net, and the classifier head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Where squeeze-and-excitation blocks sit relative to the attention convs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    /// Attention net alone.
    #[serde(rename = "at")]
    At,
    /// One SE block on the backbone output, before the attention convs.
    #[serde(rename = "se-at")]
    SeAt,
    /// One SE block after the last attention conv.
    #[serde(rename = "at-se")]
    AtSe,
    /// One SE block after every attention conv.
    #[serde(rename = "sea")]
    Sea,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::At, Placement::SeAt, Placement::AtSe, Placement::Sea];

    /// Number of SE blocks for an attention net of `convs` layers.
    pub fn se_count(self, convs: usize) -> usize {
        match self {
            Placement::At => 0,
            Placement::SeAt | Placement::AtSe => 1,
            Placement::Sea => convs,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::At => "at",
            Placement::SeAt => "se-at",
            Placement::AtSe => "at-se",
            Placement::Sea => "sea",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidConfig(vec![format!(
                    "unknown placement {s:?}; expected at, se-at, at-se or sea"
                )])
            })
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of one SE block in row-vector convention.
///
/// `w2` (`C × C/r`) squeezes the pooled descriptor into the bottleneck,
/// `w1` (`C/r × C`) expands it back, so `ẑ = relu(z·w2)·w1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlockParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub reduction: usize,
}

impl<T: Real> SeBlockParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(dim_err!(
                "{channels} channels not divisible by reduction ratio {reduction}"
            ));
        }
        let hidden = channels / reduction;
        Ok(SeBlockParams {
            w1: Tensor::zeros([hidden, channels])?,
            w2: Tensor::zeros([channels, hidden])?,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w2.dims()[0]
    }

    pub fn register(&self, g: &mut Graph<T>) -> SeNodes {
        SeNodes {
            w1: g.param(self.w1.clone()),
            w2: g.param(self.w2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeNodes {
    pub w1: NodeId,
    pub w2: NodeId,
}

/// Recalibrates each channel of `x` by `σ(ẑ_i)`.
pub fn se_forward<T: Real>(g: &mut Graph<T>, x: NodeId, se: SeNodes) -> Result<NodeId> {
    let (n, _, _, c) = g.shape(x).nhwc()?;
    let (wc, hidden) = g.shape(se.w2).matrix()?;
    if wc != c || g.shape(se.w1).dims() != [hidden, c] {
        return Err(dim_err!(
            "SE block {:?}/{:?} does not fit {} channels",
            g.shape(se.w2),
            g.shape(se.w1),
            c
        ));
    }
    let pooled = g.global_avg_pool(x)?;
    let z = g.reshape(pooled, [n, c])?;
    let squeezed = g.matmul(z, se.w2)?;
    let h = g.relu(squeezed)?;
    let z_hat = g.matmul(h, se.w1)?;
    let gate = g.sigmoid(z_hat)?;
    let gate = g.reshape(gate, [n, 1, 1, c])?;
    g.mul(x, gate)
}

/// 1×1 convolutions of the attention net with their channel schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNetParams<T> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AttentionNetParams<T> {
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.convs.iter().take(1).map(|(w, _)| w.dims()[0]).collect();
        s.extend(self.convs.iter().map(|(w, _)| w.dims()[1]));
        s
    }

    pub fn register(&self, g: &mut Graph<T>) -> AttentionNodes {
        AttentionNodes {
            convs: self
                .convs
                .iter()
                .map(|(w, b)| (g.param(w.clone()), g.param(b.clone())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub convs: Vec<(NodeId, NodeId)>,
}

/// Intermediate values of one attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Refined map `A` after the convs (and any SE blocks).
    pub refined: NodeId,
    /// Channel distribution `softmax(GAP(A) ⊘ GAP(U))`, shape `N×1×1×C`.
    pub distribution: NodeId,
    /// `A` gated channel-wise by the distribution.
    pub attended: NodeId,
    /// `GAP(attended)` flattened to `N×C`.
    pub features: NodeId,
}

pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    u: NodeId,
    net: &AttentionNodes,
    placement: Placement,
    se: &[SeNodes],
) -> Result<AttentionOutput> {
    let convs = net.convs.len();
    if convs == 0 {
        return Err(Error::InvalidConfig(vec![
            "attention net needs at least one conv".into()
        ]));
    }
    let want = placement.se_count(convs);
    if se.len() != want {
        return Err(Error::InvalidConfig(vec![format!(
            "placement {placement} with {convs} convs needs {want} SE blocks, got {}",
            se.len()
        )]));
    }
    let (n, _, _, c) = g.shape(u).nhwc()?;

    let mut a = match placement {
        Placement::SeAt => se_forward(g, u, se[0])?,
        _ => u,
    };
    for (i, &(w, b)) in net.convs.iter().enumerate() {
        let conv = g.conv1x1(a, w, b)?;
        a = g.relu(conv)?;
        if placement == Placement::Sea {
            a = se_forward(g, a, se[i])?;
        }
    }
    if placement == Placement::AtSe {
        a = se_forward(g, a, se[0])?;
    }
    if g.shape(a) != g.shape(u) {
        return Err(dim_err!(
            "attention net maps {:?} to {:?}; the last conv must emit {} channels",
            g.shape(u),
            g.shape(a),
            c
        ));
    }

    let x = g.global_avg_pool(a)?;
    let y = g.global_avg_pool(u)?;
    let ratio = g.div(x, y)?;
    let s = g.softmax(ratio, 3)?;
    let attended = g.mul(a, s)?;
    let pooled = g.global_avg_pool(attended)?;
    let features = g.reshape(pooled, [n, c])?;
    Ok(AttentionOutput {
        refined: a,
        distribution: s,
        attended,
        features,
    })
}

/// Affine map `features·w + b`.
pub fn classifier_head<T: Real>(g: &mut Graph<T>, features: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let (_, k) = g.shape(w).matrix()?;
    if g.shape(b).dims() != [k] {
        return Err(dim_err!(
            "head bias {:?} does not match weight {:?}",
            g.shape(b),
            g.shape(w)
        ));
    }
    let z = g.matmul(features, w)?;
    g.add(z, b)
}

/// Node ids of a bias-free 3×3 conv followed by batch normalization.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnNodes {
    pub w: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

/// Node ids of one residual stage: a strided transition conv followed by
/// identity-shortcut blocks of two 3×3 convs.
#[derive(Debug, Clone)]
pub struct StageNodes {
    pub stride: usize,
    pub down: ConvBnNodes,
    pub blocks: Vec<[ConvBnNodes; 2]>,
}

/// Running mean and variance for each conv of the backbone, in forward order.
pub type RunningStats<'a, T> = &'a [(&'a [T], &'a [T])];

struct BnCursor<'a, T> {
    running: Option<RunningStats<'a, T>>,
    next: usize,
    batch: Vec<BatchStats<T>>,
}

impl<T: Real> BnCursor<'_, T> {
    fn conv_bn(&mut self, g: &mut Graph<T>, x: NodeId, conv: &ConvBnNodes, stride: usize) -> Result<NodeId> {
        let c = g.shape(conv.gamma).numel();
        let zero = g.input(Tensor::zeros([c])?);
        let h = g.conv3x3(x, conv.w, zero, stride)?;
        let running = match self.running {
            Some(r) => Some(
                *r.get(self.next)
                    .ok_or_else(|| dim_err!("no running statistics for backbone conv {}", self.next))?,
            ),
            None => None,
        };
        self.next += 1;
        let (y, stats) = g.batch_norm(h, conv.gamma, conv.beta, running)?;
        self.batch.extend(stats);
        Ok(y)
    }
}

/// Conv-BN stack of residual stages. With `running = None` every BN uses
/// batch statistics, which are returned in forward order.
pub fn backbone_forward<T: Real>(
    g: &mut Graph<T>,
    image: NodeId,
    stages: &[StageNodes],
    running: Option<RunningStats<'_, T>>,
) -> Result<(NodeId, Vec<BatchStats<T>>)> {
    let mut bn = BnCursor {
        running,
        next: 0,
        batch: Vec::new(),
    };
    let mut x = image;
    for stage in stages {
        let h = bn.conv_bn(g, x, &stage.down, stage.stride)?;
        x = g.relu(h)?;
        for block in &stage.blocks {
            let h = bn.conv_bn(g, x, &block[0], 1)?;
            let h = g.relu(h)?;
            let h = bn.conv_bn(g, h, &block[1], 1)?;
            let sum = g.add(x, h)?;
            x = g.relu(sum)?;
        }
    }
    Ok((x, bn.batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(dims, lo, hi, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let x = random_map(1, [2, 3, 3, 8], -2.0, 2.0);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let se = SeBlockParams::zeros(8, 4).unwrap().register(&mut g);
        let y = se_forward(&mut g, xi, se).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        assert_eq!(g.value(y).data(), &want[..]);
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        assert!(SeBlockParams::<f64>::zeros(10, 4).is_err());
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 2, 2, 6]).unwrap());
        let se = SeBlockParams::zeros(8, 4).unwrap().register(&mut g);
        assert!(se_forward(&mut g, x, se).is_err());
    }

    #[test]
    fn identity_attention_is_uniform() {
        let u = random_map(2, [2, 4, 4, 8], 1.0, 2.0);
        let mut g = Graph::new();
        let ui = g.input(u);
        let net = AttentionNetParams {
            convs: vec![(Tensor::identity(8).unwrap(), Tensor::zeros([8]).unwrap())],
        }
        .register(&mut g);
        let out = attention_forward(&mut g, ui, &net, Placement::At, &[]).unwrap();
        for &s in g.value(out.distribution).data() {
            assert!((s - 0.125).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn se_count_must_match_placement() {
        let mut g = Graph::<f64>::new();
        let ui = g.input(random_map(3, [1, 2, 2, 4], 0.5, 1.0));
        let params = AttentionNetParams {
            convs: vec![
                (Tensor::identity(4).unwrap(), Tensor::zeros([4]).unwrap()),
                (Tensor::identity(4).unwrap(), Tensor::zeros([4]).unwrap()),
            ],
        };
        let net = params.register(&mut g);
        let se = SeBlockParams::zeros(4, 2).unwrap();
        let one = se.register(&mut g);
        let two = se.register(&mut g);
        assert!(attention_forward(&mut g, ui, &net, Placement::At, &[]).is_ok());
        assert!(attention_forward(&mut g, ui, &net, Placement::At, &[one]).is_err());
        assert!(attention_forward(&mut g, ui, &net, Placement::Sea, &[one]).is_err());
        assert!(attention_forward(&mut g, ui, &net, Placement::Sea, &[one, two]).is_ok());
        assert!(attention_forward(&mut g, ui, &net, Placement::AtSe, &[one]).is_ok());
        assert_eq!(params.channel_schedule(), vec![4, 4, 4]);
    }

    #[test]
    fn zero_head_returns_bias() {
        let mut g = Graph::<f64>::new();
        let f = g.input(random_map(4, [3, 1, 1, 8], -1.0, 1.0).reshape([3, 8]).unwrap());
        let w = g.param(Tensor::zeros([8, 5]).unwrap());
        let b = g.param(Tensor::from_f64([5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let z = classifier_head(&mut g, f, w, b).unwrap();
        for row in g.value(z).data().chunks(5) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        }
    }

    #[test]
    fn placement_names_round_trip() {
        for p in Placement::ALL {
            assert_eq!(p.name().parse::<Placement>().unwrap(), p);
        }
        assert!("se_at".parse::<Placement>().is_err());
    }
}
