//! Model assembly: residual backbone → attention net with SE blocks in one of
//! four placements → optional embedding → classifier.

pub mod blocks;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{
    attention_forward, classifier_head, se_forward, AttentionNetParams, AttentionNodes, AttentionOutput, ConvBnNodes,
    Placement, SeBlockParams, SeNodes, StageNodes,
};

use crate::autodiff::{BatchStats, Graph, NodeId};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each backbone stage; the last one is `C`.
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Output widths of the attention convs; the last must equal `C`.
    pub attention_channels: Vec<usize>,
    pub placement: Placement,
    pub reduction: usize,
    /// Width of a linear embedding between pooling and the classifier; 0 disables it.
    pub feature_dim: usize,
    pub classes: usize,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 32],
            stage_strides: vec![2, 2, 2],
            blocks_per_stage: 1,
            attention_channels: vec![32, 32],
            placement: Placement::Sea,
            reduction: 4,
            feature_dim: 0,
            classes: 5,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    /// Backbone output channels `C`.
    pub fn channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    /// Dimension of the features fed to the classifier and the center loss.
    pub fn feature_width(&self) -> usize {
        if self.feature_dim > 0 {
            self.feature_dim
        } else {
            self.channels()
        }
    }

    /// Channel widths that carry an SE block under the configured placement.
    fn se_widths(&self) -> Vec<usize> {
        let c = self.channels();
        match self.placement {
            Placement::At => vec![],
            Placement::SeAt | Placement::AtSe => vec![c],
            Placement::Sea => self.attention_channels.clone(),
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.in_channels == 0 {
            errs.push("in_channels must be positive".to_string());
        }
        if self.stage_channels.is_empty() {
            errs.push("stage_channels must list at least one stage".into());
        }
        if self.stage_channels.contains(&0) {
            errs.push("stage_channels entries must be positive".into());
        }
        if self.stage_strides.len() != self.stage_channels.len() {
            errs.push(format!(
                "stage_strides has {} entries but stage_channels has {}",
                self.stage_strides.len(),
                self.stage_channels.len()
            ));
        }
        if self.stage_strides.contains(&0) {
            errs.push("stage_strides entries must be positive".into());
        }
        if self.attention_channels.is_empty() {
            errs.push("attention_channels must list at least one conv".into());
        } else if self.attention_channels.last() != self.stage_channels.last() {
            errs.push(format!(
                "last attention width {} must equal the backbone channels {}",
                self.attention_channels.last().unwrap(),
                self.channels()
            ));
        }
        if self.attention_channels.contains(&0) {
            errs.push("attention_channels entries must be positive".into());
        }
        if self.reduction == 0 {
            errs.push("reduction must be positive".into());
        } else {
            for w in self.se_widths() {
                if w % self.reduction != 0 {
                    errs.push(format!(
                        "SE block over {w} channels: not divisible by reduction {}",
                        self.reduction
                    ));
                }
            }
        }
        if self.classes < 2 {
            errs.push(format!("classes must be at least 2, got {}", self.classes));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Spatial size of the backbone output for a square `size×size` input.
    pub fn output_size(&self, size: usize) -> usize {
        self.stage_strides.iter().fold(size, |s, &st| (s - 1) / st + 1)
    }

    /// Trainable parameter count by closed form; running statistics excluded.
    pub fn parameter_count(&self) -> usize {
        let conv3 = |i: usize, o: usize| 9 * i * o + 2 * o;
        let mut total = 0;
        let mut prev = self.in_channels;
        for &c in &self.stage_channels {
            total += conv3(prev, c) + self.blocks_per_stage * 2 * conv3(c, c);
            prev = c;
        }
        for &c in &self.attention_channels {
            total += prev * c + c;
            prev = c;
        }
        total += self
            .se_widths()
            .iter()
            .map(|&w| 2 * w * (w / self.reduction.max(1)))
            .sum::<usize>();
        let c = self.channels();
        if self.feature_dim > 0 {
            total += c * self.feature_dim + self.feature_dim;
        }
        total + self.feature_width() * self.classes + self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Attention,
    Se,
    Embedding,
    Head,
    /// Running mean and variance of the backbone's batch normalization;
    /// updated from batch statistics, never by the optimizer.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Excluded from optimisation.
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnLayout {
    w: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct StageLayout {
    stride: usize,
    down: ConvBnLayout,
    blocks: Vec<[ConvBnLayout; 2]>,
}

impl StageLayout {
    fn convs(&self) -> impl Iterator<Item = &ConvBnLayout> {
        std::iter::once(&self.down).chain(self.blocks.iter().flatten())
    }
}

/// Positions of each block's tensors in [`Model::params`].
#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<StageLayout>,
    attention: Vec<(usize, usize)>,
    se: Vec<(usize, usize)>,
    embed: Option<(usize, usize)>,
    head: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Whether backbone batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    pub logits: NodeId,
    pub features: NodeId,
    pub backbone: NodeId,
    pub attention: AttentionOutput,
    /// Leaf node of each parameter, in [`Model::params`] order.
    pub params: Vec<NodeId>,
    /// Batch statistics of every backbone BN under [`BnMode::Batch`].
    pub batch_stats: Vec<BatchStats<T>>,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
    frozen_backbone: bool,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>, group: ParamGroup) -> usize {
        let frozen = group == ParamGroup::Running || (self.frozen_backbone && group == ParamGroup::Backbone);
        self.params.push(Param {
            name,
            value,
            group,
            frozen,
        });
        self.params.len() - 1
    }

    /// He-uniform weight, bound `sqrt(6 / fan_in)`.
    fn weight(&mut self, name: String, dims: Vec<usize>, fan_in: usize, group: ParamGroup) -> Result<usize> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(dims, -bound, bound, self.rng)?;
        Ok(self.push(name, t, group))
    }

    fn bias(&mut self, name: String, n: usize, group: ParamGroup) -> Result<usize> {
        Ok(self.push(name, Tensor::zeros([n])?, group))
    }

    fn conv_bn(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Result<ConvBnLayout> {
        let w = self.weight(
            format!("{prefix}.w"),
            vec![3, 3, c_in, c_out],
            9 * c_in,
            ParamGroup::Backbone,
        )?;
        let gamma = self.push(
            format!("{prefix}.bn.gamma"),
            Tensor::full([c_out], T::one())?,
            ParamGroup::Backbone,
        );
        let beta = self.bias(format!("{prefix}.bn.beta"), c_out, ParamGroup::Backbone)?;
        let mean = self.bias(format!("{prefix}.bn.mean"), c_out, ParamGroup::Running)?;
        let var = self.push(
            format!("{prefix}.bn.var"),
            Tensor::full([c_out], T::one())?,
            ParamGroup::Running,
        );
        Ok(ConvBnLayout {
            w,
            gamma,
            beta,
            mean,
            var,
        })
    }

    fn dense(&mut self, prefix: &str, c_in: usize, c_out: usize, group: ParamGroup) -> Result<(usize, usize)> {
        let w = self.weight(format!("{prefix}.w"), vec![c_in, c_out], c_in, group)?;
        let b = self.bias(format!("{prefix}.b"), c_out, group)?;
        Ok((w, b))
    }
}

/// Builds a model with He-uniform weights, zero biases and identity BN, deterministic in `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
        frozen_backbone: cfg.freeze_backbone,
    };

    let mut stages = Vec::new();
    let mut prev = cfg.in_channels;
    for (s, (&c, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
        let down = b.conv_bn(&format!("backbone.stage{s}.down"), prev, c)?;
        let mut blocks = Vec::new();
        for k in 0..cfg.blocks_per_stage {
            let c1 = b.conv_bn(&format!("backbone.stage{s}.block{k}.conv1"), c, c)?;
            let c2 = b.conv_bn(&format!("backbone.stage{s}.block{k}.conv2"), c, c)?;
            blocks.push([c1, c2]);
        }
        stages.push(StageLayout { stride, down, blocks });
        prev = c;
    }

    let mut attention = Vec::new();
    for (i, &c) in cfg.attention_channels.iter().enumerate() {
        attention.push(b.dense(&format!("attention.conv{i}"), prev, c, ParamGroup::Attention)?);
        prev = c;
    }

    let mut se = Vec::new();
    for (i, w) in cfg.se_widths().into_iter().enumerate() {
        let hidden = w / cfg.reduction;
        let w2 = b.weight(format!("se{i}.w2"), vec![w, hidden], w, ParamGroup::Se)?;
        let w1 = b.weight(format!("se{i}.w1"), vec![hidden, w], hidden, ParamGroup::Se)?;
        se.push((w1, w2));
    }

    let c = cfg.channels();
    let embed = if cfg.feature_dim > 0 {
        Some(b.dense("embed", c, cfg.feature_dim, ParamGroup::Embedding)?)
    } else {
        None
    };
    let head = b.dense("head", cfg.feature_width(), cfg.classes, ParamGroup::Head)?;

    let model = Model {
        config: cfg.clone(),
        params: b.params,
        layout: Layout {
            stages,
            attention,
            se,
            embed,
            head,
        },
    };
    debug_assert_eq!(model.parameter_count(), cfg.parameter_count());
    Ok(model)
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Trainable entries, running statistics excluded.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Running)
            .map(|p| p.value.numel())
            .sum()
    }

    /// BN mode for a training step: batch statistics unless the backbone is frozen.
    pub fn train_bn_mode(&self) -> BnMode {
        if self.config.freeze_backbone {
            BnMode::Running
        } else {
            BnMode::Batch
        }
    }

    /// Folds batch statistics into the running ones:
    /// `r ← (1 − m)·r + m·s`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let convs: Vec<ConvBnLayout> = self.layout.stages.iter().flat_map(|s| s.convs().copied()).collect();
        if stats.len() != convs.len() {
            return Err(dim_err!(
                "{} batch statistics for {} backbone convs",
                stats.len(),
                convs.len()
            ));
        }
        let m: T = crate::tensor::lit(momentum);
        let keep = T::one() - m;
        for (conv, st) in convs.iter().zip(stats) {
            let n = st.count as f64;
            let unbias: T = crate::tensor::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            for (r, &v) in self.params[conv.mean].value.data_mut().iter_mut().zip(&st.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in self.params[conv.var].value.data_mut().iter_mut().zip(&st.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
        Ok(())
    }

    /// SE weights in the order they are applied.
    pub fn se_blocks(&self) -> Vec<SeBlockParams<T>> {
        self.layout
            .se
            .iter()
            .map(|&(w1, w2)| SeBlockParams {
                w1: self.params[w1].value.clone(),
                w2: self.params[w2].value.clone(),
                reduction: self.config.reduction,
            })
            .collect()
    }

    pub fn attention_params(&self) -> AttentionNetParams<T> {
        AttentionNetParams {
            convs: self
                .layout
                .attention
                .iter()
                .map(|&(w, b)| (self.params[w].value.clone(), self.params[b].value.clone()))
                .collect(),
        }
    }

    /// Replaces parameter values, keeping names and shapes.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Incompatible(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Registers every parameter as a graph leaf; frozen ones as constants.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if p.frozen {
                    g.input(p.value.clone())
                } else {
                    g.param(p.value.clone())
                }
            })
            .collect()
    }

    /// Inference pass on an `N×H×W×C_in` batch, BN on running statistics.
    pub fn forward(&self, g: &mut Graph<T>, images: Tensor<T>) -> Result<ModelOutput<T>> {
        let ids = self.register(g);
        self.forward_with(g, images, ids, BnMode::Running)
    }

    /// Training pass; see [`Model::train_bn_mode`].
    pub fn forward_train(&self, g: &mut Graph<T>, images: Tensor<T>) -> Result<ModelOutput<T>> {
        let ids = self.register(g);
        self.forward_with(g, images, ids, self.train_bn_mode())
    }

    /// Like [`Model::forward`] with parameter leaves supplied by the caller,
    /// one per entry of [`Model::params`].
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        images: Tensor<T>,
        ids: Vec<NodeId>,
        mode: BnMode,
    ) -> Result<ModelOutput<T>> {
        if ids.len() != self.params.len() {
            return Err(dim_err!(
                "{} parameter nodes for {} parameters",
                ids.len(),
                self.params.len()
            ));
        }
        let (_, h, w, c) = images.shape().nhwc()?;
        if c != self.config.in_channels {
            return Err(dim_err!(
                "model expects {} input channels, batch has {}",
                self.config.in_channels,
                c
            ));
        }
        let pair = |(a, b): (usize, usize)| (ids[a], ids[b]);
        let conv = |l: &ConvBnLayout| ConvBnNodes {
            w: ids[l.w],
            gamma: ids[l.gamma],
            beta: ids[l.beta],
        };
        let stages: Vec<StageNodes> = self
            .layout
            .stages
            .iter()
            .map(|s| StageNodes {
                stride: s.stride,
                down: conv(&s.down),
                blocks: s.blocks.iter().map(|bl| [conv(&bl[0]), conv(&bl[1])]).collect(),
            })
            .collect();
        let att = AttentionNodes {
            convs: self.layout.attention.iter().map(|&p| pair(p)).collect(),
        };
        let se: Vec<SeNodes> = self
            .layout
            .se
            .iter()
            .map(|&(w1, w2)| SeNodes {
                w1: ids[w1],
                w2: ids[w2],
            })
            .collect();

        let x = g.input(images);
        let running: Vec<(&[T], &[T])> = self
            .layout
            .stages
            .iter()
            .flat_map(|s| s.convs())
            .map(|l| (self.params[l.mean].value.data(), self.params[l.var].value.data()))
            .collect();
        let running = (mode == BnMode::Running).then_some(running.as_slice());
        let (u, batch_stats) = blocks::backbone_forward(g, x, &stages, running)?;
        let (_, uh, uw, _) = g.shape(u).nhwc()?;
        if uh * uw < 2 {
            return Err(dim_err!(
                "backbone reduces {h}×{w} input to {uh}×{uw}; pooling needs more than one cell"
            ));
        }
        let attention = attention_forward(g, u, &att, self.config.placement, &se)?;
        let features = match self.layout.embed {
            Some(e) => {
                let (ew, eb) = pair(e);
                classifier_head(g, attention.features, ew, eb)?
            }
            None => attention.features,
        };
        let (hw, hb) = pair(self.layout.head);
        let logits = classifier_head(g, features, hw, hb)?;
        Ok(ModelOutput {
            logits,
            features,
            backbone: u,
            attention,
            params: ids,
            batch_stats,
        })
    }
}
