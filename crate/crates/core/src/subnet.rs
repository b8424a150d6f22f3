//! The stage function applied at every evaluation point of a block.
//!
//! A learned stage is two layers, `affine → norm → act → affine → norm`. The
//! second layer's normalized output is returned before any activation, so the
//! shortcut additions performed by the block act on raw stage outputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NormStats, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs besides the module itself.
///
/// In [`Mode::Train`], every normalization layer pushes its batch statistics
/// onto `stats` in visitation order; the owner applies them afterwards with
/// [`NormLayer::update_running`].
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub stats: Vec<NormStats>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Forward {
            tape,
            store,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Dense2,
    Conv2,
}

/// Fixed, parameter-free response used for solver-equivalence checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubResponse {
    Identity,
    Scalar(f64),
}

/// Per-channel batch normalization with running estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::NormScale,
            Tensor::full(&[channels], 1.0),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::NormShift,
            Tensor::zeros(&[channels]),
        );
        NormLayer {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        match fwd.mode {
            Mode::Train => {
                let (y, stats) = fwd.tape.norm(x, gamma, beta, self.eps, None)?;
                fwd.stats.extend(stats);
                Ok(y)
            }
            Mode::Eval => {
                let running = Some((&self.running_mean[..], &self.running_var[..]));
                Ok(fwd.tape.norm(x, gamma, beta, self.eps, running)?.0)
            }
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update_running(&mut self, stats: &NormStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Affine map `x·W + b` with `W: [in, out]`, or a bias-free 3×3 convolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnedStage {
    pub kind: StageKind,
    pub activation: Activation,
    /// Feature (dense) or channel (conv) count entering and leaving the stage.
    pub dim: usize,
    /// Hidden width between the two layers.
    pub width: usize,
    pub first: Layer,
    pub first_norm: NormLayer,
    pub second: Layer,
    pub second_norm: NormLayer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum StageFunction {
    Learned(LearnedStage),
    Stub(StubResponse),
}

/// He-normal initialization, std = sqrt(2 / fan_in).
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl StageFunction {
    pub fn make_stub(response: StubResponse) -> Self {
        StageFunction::Stub(response)
    }

    pub fn dense2(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        width: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.add(
            format!("{name}.fc1.weight"),
            ParamKind::Weight,
            he_normal(&[dim, width], dim, rng),
        );
        let b1 = store.add(
            format!("{name}.fc1.bias"),
            ParamKind::Bias,
            Tensor::zeros(&[width]),
        );
        let first_norm = NormLayer::new(store, &format!("{name}.norm1"), width);
        let w2 = store.add(
            format!("{name}.fc2.weight"),
            ParamKind::Weight,
            he_normal(&[width, dim], width, rng),
        );
        let b2 = store.add(
            format!("{name}.fc2.bias"),
            ParamKind::Bias,
            Tensor::zeros(&[dim]),
        );
        let second_norm = NormLayer::new(store, &format!("{name}.norm2"), dim);
        StageFunction::Learned(LearnedStage {
            kind: StageKind::Dense2,
            activation,
            dim,
            width,
            first: Layer {
                weight: w1,
                bias: Some(b1),
            },
            first_norm,
            second: Layer {
                weight: w2,
                bias: Some(b2),
            },
            second_norm,
        })
    }

    pub fn conv2(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        width: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.add(
            format!("{name}.conv1.weight"),
            ParamKind::Weight,
            he_normal(&[width, channels, 3, 3], channels * 9, rng),
        );
        let first_norm = NormLayer::new(store, &format!("{name}.norm1"), width);
        let w2 = store.add(
            format!("{name}.conv2.weight"),
            ParamKind::Weight,
            he_normal(&[channels, width, 3, 3], width * 9, rng),
        );
        let second_norm = NormLayer::new(store, &format!("{name}.norm2"), channels);
        StageFunction::Learned(LearnedStage {
            kind: StageKind::Conv2,
            activation,
            dim: channels,
            width,
            first: Layer {
                weight: w1,
                bias: None,
            },
            first_norm,
            second: Layer {
                weight: w2,
                bias: None,
            },
            second_norm,
        })
    }

    /// Zeroes the second layer so the stage maps everything to zero at
    /// initialization.
    pub fn zero_last_layer(&self, store: &mut ParamStore) {
        if let StageFunction::Learned(s) = self {
            let ids = [Some(s.second.weight), s.second.bias, Some(s.second_norm.beta)];
            for id in ids.into_iter().flatten() {
                store
                    .get_mut(id)
                    .tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn is_stub(&self) -> bool {
        matches!(self, StageFunction::Stub(_))
    }

    /// Trainable scalars owned by this stage.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .iter()
            .map(|&id| store.get(id).tensor.numel())
            .sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            StageFunction::Stub(_) => Vec::new(),
            StageFunction::Learned(s) => {
                let mut ids = vec![s.first.weight];
                ids.extend(s.first.bias);
                ids.extend([s.first_norm.gamma, s.first_norm.beta, s.second.weight]);
                ids.extend(s.second.bias);
                ids.extend([s.second_norm.gamma, s.second_norm.beta]);
                ids
            }
        }
    }

    pub fn norms_mut(&mut self) -> Vec<&mut NormLayer> {
        match self {
            StageFunction::Stub(_) => Vec::new(),
            StageFunction::Learned(s) => vec![&mut s.first_norm, &mut s.second_norm],
        }
    }

    pub fn norms(&self) -> Vec<&NormLayer> {
        match self {
            StageFunction::Stub(_) => Vec::new(),
            StageFunction::Learned(s) => vec![&s.first_norm, &s.second_norm],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let StageFunction::Learned(s) = self else {
            return Ok(());
        };
        let ok = match s.kind {
            StageKind::Dense2 => shape.len() == 2 && shape[1] == s.dim,
            StageKind::Conv2 => shape.len() == 4 && shape[1] == s.dim,
        };
        if ok {
            Ok(())
        } else {
            let expected = match s.kind {
                StageKind::Dense2 => vec![0, s.dim],
                StageKind::Conv2 => vec![0, s.dim, 0, 0],
            };
            Err(Error::dim("stage forward", shape, &expected))
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.check_input(fwd.tape.shape(x))?;
        match self {
            StageFunction::Stub(StubResponse::Identity) => Ok(fwd.tape.scale(x, 1.0)),
            StageFunction::Stub(StubResponse::Scalar(l)) => Ok(fwd.tape.scale(x, *l)),
            StageFunction::Learned(s) => {
                let h = apply_layer(fwd, s.kind, &s.first, x)?;
                let h = s.first_norm.forward(fwd, h)?;
                let h = match s.activation {
                    Activation::Relu => fwd.tape.relu(h),
                    Activation::Tanh => fwd.tape.tanh(h),
                };
                let h = apply_layer(fwd, s.kind, &s.second, h)?;
                s.second_norm.forward(fwd, h)
            }
        }
    }
}

fn apply_layer(fwd: &mut Forward<'_>, kind: StageKind, layer: &Layer, x: Var) -> Result<Var> {
    let w = fwd.param(layer.weight);
    let y = match kind {
        StageKind::Dense2 => fwd.tape.matmul(x, w)?,
        StageKind::Conv2 => fwd.tape.conv3x3(x, w)?,
    };
    match layer.bias {
        Some(b) => {
            let b = fwd.param(b);
            fwd.tape.add_channel(y, b)
        }
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, FD_STEP, REL_FLOOR};

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(f: &StageFunction, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, store, mode);
        let xv = fwd.tape.constant(x.clone());
        let y = f.forward(&mut fwd, xv)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn stubs() {
        let store = ParamStore::new();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let id = StageFunction::make_stub(StubResponse::Identity);
        assert_eq!(run(&id, &store, &x, Mode::Eval).unwrap().data(), &[1.0, 2.0]);
        let zero = StageFunction::make_stub(StubResponse::Scalar(0.0));
        assert_eq!(run(&zero, &store, &x, Mode::Eval).unwrap().data(), &[0.0, 0.0]);
        let neg = StageFunction::make_stub(StubResponse::Scalar(-2.0));
        let three = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(run(&neg, &store, &three, Mode::Eval).unwrap().data(), &[-6.0]);
        assert_eq!(neg.param_count(&store), 0);
    }

    #[test]
    fn zero_initialized_last_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [StageKind::Dense2, StageKind::Conv2] {
            let (f, x) = match kind {
                StageKind::Dense2 => (
                    StageFunction::dense2(&mut store, "f", 5, 7, Activation::Relu, &mut rng),
                    input(&[4, 5], 1),
                ),
                StageKind::Conv2 => (
                    StageFunction::conv2(&mut store, "c", 2, 3, Activation::Relu, &mut rng),
                    input(&[2, 2, 3, 3], 2),
                ),
            };
            f.zero_last_layer(&mut store);
            for mode in [Mode::Train, Mode::Eval] {
                let y = run(&f, &store, &x, mode).unwrap();
                assert!(y.data().iter().all(|&v| v == 0.0), "{kind:?} {mode:?}");
            }
        }
    }

    #[test]
    fn dense2_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, w) = (6, 10);
        let f = StageFunction::dense2(&mut store, "f", d, w, Activation::Relu, &mut rng);
        let affine = d * w + w + w * d + d;
        let norm = 2 * w + 2 * d;
        assert_eq!(f.param_count(&store), affine + norm);
        let affine_only: usize = f
            .param_ids()
            .iter()
            .filter(|&&id| {
                matches!(store.get(id).kind, ParamKind::Weight | ParamKind::Bias)
            })
            .map(|&id| store.get(id).tensor.numel())
            .sum();
        assert_eq!(affine_only, affine);
    }

    #[test]
    fn shape_is_preserved_for_every_kind_and_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for width in [1, 3, 8] {
            for act in [Activation::Relu, Activation::Tanh] {
                let f = StageFunction::dense2(&mut store, "d", 4, width, act, &mut rng);
                let x = input(&[3, 4], width as u64);
                assert_eq!(run(&f, &store, &x, Mode::Train).unwrap().shape(), &[3, 4]);
                let c = StageFunction::conv2(&mut store, "c", 2, width, act, &mut rng);
                let x = input(&[2, 2, 4, 3], width as u64);
                assert_eq!(run(&c, &store, &x, Mode::Eval).unwrap().shape(), &[2, 2, 4, 3]);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = StageFunction::dense2(&mut store, "f", 4, 4, Activation::Relu, &mut rng);
        let x = input(&[2, 3], 0);
        assert!(matches!(
            run(&f, &store, &x, Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dense2_width16_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = StageFunction::dense2(&mut store, "f", 3, 16, Activation::Tanh, &mut rng);
        let x = input(&[5, 3], 9);
        let probe = input(&[5, 3], 10);
        let loss_of = |store: &ParamStore, x: &Tensor| -> (Tape, Var, Var) {
            let mut tape = Tape::new();
            let mut fwd = Forward::new(&mut tape, store, Mode::Train);
            let xv = fwd.tape.leaf(x.clone().with_requires_grad(true));
            let y = f.forward(&mut fwd, xv).unwrap();
            let p = tape.constant(probe.clone());
            let yp = tape.mul(y, p).unwrap();
            let l = tape.sum(yp);
            (tape, l, xv)
        };
        let (mut tape, loss, xv) = loss_of(&store, &x);
        tape.backward(loss).unwrap();
        let mut grads = store.clone();
        grads.accumulate_grads(&tape).unwrap();

        let numeric_x = central_difference(x.data(), FD_STEP, |d| {
            let xt = Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap();
            let (t, l, _) = loss_of(&store, &xt);
            t.value(l).item().unwrap()
        });
        let err_x = max_relative_error(tape.grad(xv).unwrap(), &numeric_x, REL_FLOOR);
        assert!(err_x < 1e-4, "input gradient error {err_x}");

        let flat = store.flatten();
        let numeric_p = central_difference(&flat, FD_STEP, |p| {
            let mut s = store.clone();
            s.load_flat(p).unwrap();
            let (t, l, _) = loss_of(&s, &x);
            t.value(l).item().unwrap()
        });
        let analytic_p: Vec<f64> = grads
            .iter()
            .flat_map(|(_, p)| {
                p.tensor
                    .grad()
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
            })
            .collect();
        let err_p = max_relative_error(&analytic_p, &numeric_p, REL_FLOOR);
        assert!(err_p < 1e-4, "parameter gradient error {err_p}");
    }

    #[test]
    fn running_statistics_follow_momentum_rule() {
        let mut store = ParamStore::new();
        let mut norm = NormLayer::new(&mut store, "n", 1);
        let stats = NormStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        norm.update_running(&stats);
        assert!((norm.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((norm.running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
