//! Whole networks: an embedding layer, a homogeneous stack of scheme blocks,
//! and a classifier head.

mod checkpoint;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::schemes::{Block, HGranularity, Scheme, StepScale, VernerCoefficients};
use crate::subnet::{he_normal, Activation, Forward, Mode, NormLayer, StageFunction, StubResponse};
use crate::tensor::{NormStats, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InputSpec {
    Dense { features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputSpec {
    fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputSpec::Dense { features } => vec![features],
            InputSpec::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Total layer count including embedding and head.
    pub depth: usize,
    pub scheme: Scheme,
    /// Feature or channel count carried between blocks.
    pub width: usize,
    pub input: InputSpec,
    pub classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub verner: VernerCoefficients,
    #[serde(default)]
    pub h_granularity: HGranularity,
    #[serde(default)]
    pub h_clamp: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// `2 + blocks × layers_per_block` for every block count that lands within
/// `radius` layers of `depth`.
pub fn valid_depths_near(scheme: Scheme, depth: usize, radius: usize) -> Vec<usize> {
    let per = scheme.layers_per_block();
    (1..)
        .map(|b| 2 + b * per)
        .take_while(|&d| d <= depth + radius.max(per))
        .filter(|&d| d + radius.max(per) >= depth)
        .collect()
}

impl NetworkShape {
    pub fn dense(scheme: Scheme, depth: usize, width: usize, features: usize, classes: usize) -> Self {
        NetworkShape {
            depth,
            scheme,
            width,
            input: InputSpec::Dense { features },
            classes,
            activation: Activation::Relu,
            verner: VernerCoefficients::Paper,
            h_granularity: HGranularity::Shared,
            h_clamp: false,
        }
    }

    pub fn block_count(&self) -> Result<usize> {
        let per = self.scheme.layers_per_block();
        if self.depth < 2 + per || !(self.depth - 2).is_multiple_of(per) {
            let near = valid_depths_near(self.scheme, self.depth, per);
            let near: Vec<String> = near.iter().map(|d| d.to_string()).collect();
            return Err(Error::Config(format!(
                "depth {} is not 2 + k×{per} for {}; nearby valid depths: {}",
                self.depth,
                self.scheme,
                near.join(", ")
            )));
        }
        Ok((self.depth - 2) / per)
    }

    pub fn validate(&self) -> Result<()> {
        self.block_count()?;
        if self.width == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "width must be positive and classes ≥ 2 (got {} and {})",
                self.width, self.classes
            )));
        }
        if self.input.sample_shape().contains(&0) {
            return Err(Error::Config("input extents must be positive".into()));
        }
        Ok(())
    }

    /// The same shape under another scheme; fails when the depth is not
    /// valid for it.
    pub fn with_scheme(&self, scheme: Scheme) -> Result<Self> {
        let shape = NetworkShape {
            scheme,
            ..self.clone()
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Embedding {
    Dense { weight: ParamId, bias: ParamId },
    Conv { weight: ParamId, bias: ParamId },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Every learnable scalar, step scales included.
    pub trainable: usize,
    /// Learnable step scales.
    pub extra_h: usize,
    /// Learnable scalars inside blocks, step scales excluded.
    pub blocks: usize,
}

#[derive(Clone, Debug)]
pub struct HoNetwork {
    pub shape: NetworkShape,
    pub seed: u64,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Network output plus the batch statistics gathered in training mode.
pub struct Output {
    pub logits: Var,
    pub stats: Vec<NormStats>,
}

impl HoNetwork {
    /// Deterministic for a given `(shape, seed)`.
    pub fn build(shape: &NetworkShape, seed: u64) -> Result<Self> {
        Self::assemble(shape, seed, None)
    }

    /// Same wiring with parameter-free stub stages.
    pub fn build_with_stubs(shape: &NetworkShape, seed: u64, stub: StubResponse) -> Result<Self> {
        Self::assemble(shape, seed, Some(stub))
    }

    fn assemble(shape: &NetworkShape, seed: u64, stub: Option<StubResponse>) -> Result<Self> {
        shape.validate()?;
        let blocks_n = shape.block_count()?;
        let mut rng = rng_for(seed, "network-init", 0);
        let mut store = ParamStore::new();
        let c = shape.width;
        let embedding = match shape.input {
            InputSpec::Dense { features } => Embedding::Dense {
                weight: store.add(
                    "embed.weight",
                    ParamKind::Weight,
                    he_normal(&[features, c], features, &mut rng),
                ),
                bias: store.add("embed.bias", ParamKind::Bias, Tensor::zeros(&[c])),
            },
            InputSpec::Image { channels, .. } => Embedding::Conv {
                weight: store.add(
                    "embed.weight",
                    ParamKind::Weight,
                    he_normal(&[c, channels, 3, 3], channels * 9, &mut rng),
                ),
                bias: store.add("embed.bias", ParamKind::Bias, Tensor::zeros(&[c])),
            },
        };
        let tableau = Arc::new(shape.scheme.tableau(shape.verner));
        let mut blocks = Vec::with_capacity(blocks_n);
        for b in 0..blocks_n {
            let stages = (0..tableau.stage_count())
                .map(|s| match stub {
                    Some(resp) => StageFunction::make_stub(resp),
                    None => {
                        let name = format!("block{b}.stage{}", s + 1);
                        match shape.input {
                            InputSpec::Dense { .. } => StageFunction::dense2(
                                &mut store,
                                &name,
                                c,
                                c,
                                shape.activation,
                                &mut rng,
                            ),
                            InputSpec::Image { .. } => StageFunction::conv2(
                                &mut store,
                                &name,
                                c,
                                c,
                                shape.activation,
                                &mut rng,
                            ),
                        }
                    }
                })
                .collect();
            let step = if shape.scheme.learnable_h() {
                StepScale::learnable(
                    &mut store,
                    &format!("block{b}"),
                    tableau.stage_count(),
                    shape.h_granularity,
                    shape.h_clamp,
                )
            } else {
                StepScale::Unit
            };
            blocks.push(Block::new(tableau.clone(), stages, step)?);
        }
        let head = Head {
            weight: store.add(
                "head.weight",
                ParamKind::Weight,
                he_normal(&[c, shape.classes], c, &mut rng),
            ),
            bias: store.add("head.bias", ParamKind::Bias, Tensor::zeros(&[shape.classes])),
        };
        Ok(HoNetwork {
            shape: shape.clone(),
            seed,
            store,
            embedding,
            blocks,
            head,
        })
    }

    /// Layers actually wired: embedding, two per stage, head.
    pub fn layer_count(&self) -> usize {
        2 + self
            .blocks
            .iter()
            .map(|b| 2 * b.stages.len())
            .sum::<usize>()
    }

    pub fn param_count(&self) -> ParamCount {
        let extra_h = self.store.scalar_count_of(ParamKind::StepScale);
        let blocks = self
            .blocks
            .iter()
            .flat_map(|b| b.stages.iter())
            .map(|f| f.param_count(&self.store))
            .sum();
        ParamCount {
            trainable: self.store.scalar_count(),
            extra_h,
            blocks,
        }
    }

    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store
                .get_mut(id)
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let sample = self.shape.input.sample_shape();
        if shape.len() != sample.len() + 1 || shape[1..] != sample[..] {
            let mut expected = vec![0];
            expected.extend(sample);
            return Err(Error::dim("network input", shape, &expected));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor, mode: Mode) -> Result<Output> {
        self.check_batch(batch.shape())?;
        let mut fwd = Forward::new(tape, &self.store, mode);
        let x = fwd.tape.constant(batch.clone());
        let mut h = match self.embedding {
            Embedding::Dense { weight, bias } => {
                let w = fwd.param(weight);
                let b = fwd.param(bias);
                let y = fwd.tape.matmul(x, w)?;
                fwd.tape.add_channel(y, b)?
            }
            Embedding::Conv { weight, bias } => {
                let w = fwd.param(weight);
                let b = fwd.param(bias);
                let y = fwd.tape.conv3x3(x, w)?;
                fwd.tape.add_channel(y, b)?
            }
        };
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&mut fwd, h).map_err(|e| match e {
                Error::Divergence { location } => Error::Divergence {
                    location: format!("block {i} ({location})"),
                },
                other => other,
            })?;
        }
        if matches!(self.shape.input, InputSpec::Image { .. }) {
            h = fwd.tape.global_avg_pool(h)?;
        }
        let w = fwd.param(self.head.weight);
        let b = fwd.param(self.head.bias);
        let y = fwd.tape.matmul(h, w)?;
        let logits = fwd.tape.add_channel(y, b)?;
        if !fwd.tape.value(logits).is_finite() {
            return Err(Error::Divergence {
                location: "classifier head".into(),
            });
        }
        Ok(Output {
            logits,
            stats: fwd.stats,
        })
    }

    /// Logits without recording gradients for later use.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.stages.iter_mut())
            .flat_map(|f| f.norms_mut())
    }

    pub fn norms(&self) -> impl Iterator<Item = &NormLayer> {
        self.blocks
            .iter()
            .flat_map(|b| b.stages.iter())
            .flat_map(|f| f.norms())
    }

    /// Folds training-mode batch statistics into the running estimates, in
    /// the order the forward pass visited the normalization layers.
    pub fn apply_norm_stats(&mut self, stats: &[NormStats]) -> Result<()> {
        let norms: Vec<&mut NormLayer> = self.norms_mut().collect();
        if norms.len() != stats.len() {
            return Err(Error::Contract(format!(
                "{} normalization layers but {} statistic records",
                norms.len(),
                stats.len()
            )));
        }
        for (n, s) in norms.into_iter().zip(stats) {
            n.update_running(s);
        }
        Ok(())
    }

    /// Running means and variances of every normalization layer, concatenated.
    pub fn running_stats(&self) -> Vec<f64> {
        self.norms()
            .flat_map(|n| n.running_mean.iter().chain(&n.running_var).copied())
            .collect()
    }

    pub fn load_running_stats(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.norms().map(|n| 2 * n.running_mean.len()).sum();
        if flat.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} running statistics, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for n in self.norms_mut() {
            let c = n.running_mean.len();
            n.running_mean.copy_from_slice(&flat[offset..offset + c]);
            n.running_var.copy_from_slice(&flat[offset + c..offset + 2 * c]);
            offset += 2 * c;
        }
        Ok(())
    }

    /// Projects clamped step scales back into range.
    pub fn apply_clamps(&mut self) {
        for b in &self.blocks {
            b.step.apply_clamp(&mut self.store);
        }
    }

    pub fn step_scales(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.step.param_ids().iter())
            .map(|&id| self.store.get(id).tensor.data()[0])
            .collect()
    }
}
