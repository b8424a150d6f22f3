//! Measurement battery: untrained loss probes, learning-rate sweeps,
//! degradation against depth, time to an accuracy threshold, and cost
//! accounting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::network::{HoNetwork, NetworkShape};
use crate::rng::split_seed;
use crate::schemes::Scheme;
use crate::subnet::Mode;
use crate::tensor::{Tape, Tensor};
use crate::training::{per_sample_cross_entropy, EpochRecord, TrainConfig, Trainer};

/// Losses above this switch spread comparisons to log space.
pub const LOG_SPREAD_THRESHOLD: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedProbe {
    pub seed: u64,
    /// Mean loss over the probe batch; `+∞` when the forward pass diverged.
    pub mean_loss: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

impl SeedProbe {
    /// `log10(1 + max) − log10(1 + min)` over the probe samples.
    pub fn log_spread(&self) -> f64 {
        (1.0 + self.max_loss).log10() - (1.0 + self.min_loss).log10()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitProbeResult {
    pub scheme: Scheme,
    pub depth: usize,
    pub seeds: Vec<SeedProbe>,
    /// Extremes of the per-seed mean losses.
    pub min: f64,
    pub max: f64,
    pub spread: f64,
    /// Median over seeds of the per-seed log spread.
    pub median_log_spread: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds one untrained network per seed and evaluates it, in evaluation
/// mode, on a fixed probe batch.
pub fn init_probe(shape: &NetworkShape, seeds: &[u64], probe: &(Tensor, Vec<usize>)) -> Result<InitProbeResult> {
    init_probe_with(shape, seeds, probe, HoNetwork::build)
}

pub fn init_probe_with<B>(
    shape: &NetworkShape,
    seeds: &[u64],
    probe: &(Tensor, Vec<usize>),
    build: B,
) -> Result<InitProbeResult>
where
    B: Fn(&NetworkShape, u64) -> Result<HoNetwork> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("init probe needs at least one seed".into()));
    }
    let probes: Vec<SeedProbe> = seeds
        .par_iter()
        .map(|&seed| {
            let net = build(shape, seed)?;
            let mut tape = Tape::new();
            let losses = match net.forward(&mut tape, &probe.0, Mode::Eval) {
                Ok(out) => per_sample_cross_entropy(tape.value(out.logits), &probe.1),
                Err(Error::Divergence { .. }) => vec![f64::INFINITY; probe.1.len()],
                Err(e) => return Err(e),
            };
            let losses: Vec<f64> = losses
                .into_iter()
                .map(|l| if l.is_finite() { l } else { f64::INFINITY })
                .collect();
            Ok(SeedProbe {
                seed,
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
                max_loss: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = probes.iter().map(|p| p.mean_loss).collect();
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spreads: Vec<f64> = probes.iter().map(SeedProbe::log_spread).collect();
    Ok(InitProbeResult {
        scheme: shape.scheme,
        depth: shape.depth,
        min,
        max,
        spread: if max == min { 0.0 } else { max - min },
        median_log_spread: median(&spreads),
        seeds: probes,
    })
}

/// `n` seeds derived from `root`.
pub fn seed_list(root: u64, tag: &str, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| split_seed(root, tag, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrCell {
    pub lr: f64,
    pub diverged: bool,
    /// Epochs completed before stopping.
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSweepResult {
    pub scheme: Scheme,
    pub depth: usize,
    pub cells: Vec<LrCell>,
    /// Largest grid value below which no cell diverged.
    pub max_stable_lr: Option<f64>,
}

/// Largest `lr` such that it and every smaller grid value converged.
pub fn max_stable_lr(cells: &[LrCell]) -> Option<f64> {
    cells
        .iter()
        .take_while(|c| !c.diverged)
        .last()
        .map(|c| c.lr)
}

/// Integer-step grid `start, start + step, …` up to `end` inclusive.
pub fn lr_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) {
        return Err(Error::Config(format!(
            "grid {start}:{end}:{step} is empty"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    // Rounded so that 0.05 + 2·0.05 reads back as 0.15.
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// One training run per learning rate from a fresh network, all on the same
/// data and initialization.
pub fn lr_sweep(
    shape: &NetworkShape,
    grid: &[f64],
    base: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    init_seed: u64,
) -> Result<LrSweepResult> {
    if grid.len() < 3 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "lr grid needs at least 3 strictly increasing values".into(),
        ));
    }
    let cells: Vec<LrCell> = grid
        .par_iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                lr0: lr,
                ..base.clone()
            };
            let records = train_fresh(shape, init_seed, &cfg, train, test)?;
            let last = records.last();
            Ok(LrCell {
                lr,
                diverged: last.is_some_and(|r| r.diverged),
                epochs: records.len(),
                final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
                final_test_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LrSweepResult {
        scheme: shape.scheme,
        depth: shape.depth,
        max_stable_lr: max_stable_lr(&cells),
        cells,
    })
}

pub fn train_fresh(
    shape: &NetworkShape,
    init_seed: u64,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<EpochRecord>> {
    let mut net = HoNetwork::build(shape, init_seed)?;
    let mut trainer = Trainer::new(cfg.clone(), &net)?;
    trainer.run(&mut net, train, test, &mut |_, _, _| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth: usize,
    pub blocks: usize,
    /// Final test accuracy; for a diverged run, that of the diverged epoch.
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub scheme: Scheme,
    pub points: Vec<DepthPoint>,
    /// Test predictions behind each point (test size × seeds). Sets the
    /// noise floor for calling a difference a drop.
    pub evaluated: usize,
}

impl DegradationCurve {
    /// Binomial standard error of an accuracy `p` measured on `evaluated`
    /// predictions.
    pub fn noise(&self, p: f64) -> f64 {
        if self.evaluated == 0 {
            return 0.0;
        }
        (p * (1.0 - p) / self.evaluated as f64).max(0.0).sqrt()
    }

    /// First depth whose accuracy falls below the best shallower one by more
    /// than that one's standard error.
    pub fn first_drop_depth(&self) -> Option<usize> {
        let mut best = self.points.first()?.test_accuracy;
        for p in &self.points[1..] {
            if p.test_accuracy < best - self.noise(best) {
                return Some(p.depth);
            }
            best = best.max(p.test_accuracy);
        }
        None
    }

    /// Some shallower depth beats the deepest one by more than the noise.
    pub fn peaks_before_max_depth(&self) -> bool {
        let Some((last, rest)) = self.points.split_last() else {
            return false;
        };
        rest.iter()
            .any(|p| last.test_accuracy < p.test_accuracy - self.noise(p.test_accuracy))
    }
}

/// Trains one network per depth with the same budget. Initialization seeds
/// are averaged over `repeats` runs per depth.
pub fn degradation_sweep(
    shape: &NetworkShape,
    depths: &[usize],
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
) -> Result<DegradationCurve> {
    if depths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("degradation sweep needs depths and seeds".into()));
    }
    let shapes: Vec<NetworkShape> = depths
        .iter()
        .map(|&depth| {
            let s = NetworkShape {
                depth,
                ..shape.clone()
            };
            s.validate().map(|_| s)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..shapes.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let runs: Vec<(usize, EpochRecord)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let records = train_fresh(&shapes[i], seed, cfg, train, test)?;
            let last = records
                .last()
                .cloned()
                .ok_or_else(|| Error::Config("degradation sweep needs at least one epoch".into()))?;
            Ok((i, last))
        })
        .collect::<Result<_>>()?;
    let points = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mine: Vec<&EpochRecord> = runs.iter().filter(|r| r.0 == i).map(|r| &r.1).collect();
            let n = mine.len() as f64;
            Ok(DepthPoint {
                depth: s.depth,
                blocks: s.block_count()?,
                test_accuracy: mine.iter().map(|r| r.test_accuracy).sum::<f64>() / n,
                train_accuracy: mine.iter().map(|r| r.train_accuracy).sum::<f64>() / n,
                diverged: mine.iter().any(|r| r.diverged),
            })
        })
        .collect::<Result<_>>()?;
    Ok(DegradationCurve {
        scheme: shape.scheme,
        points,
        evaluated: test.len() * seeds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub scheme: Scheme,
    pub depth: usize,
    pub threshold: f64,
    /// Per seed: epochs until train accuracy first reached the threshold.
    pub epochs: Vec<Option<usize>>,
    /// Median over seeds, with runs that never reached it counted as
    /// `budget + 1`.
    pub median_epochs: f64,
}

pub fn time_to_threshold(
    shape: &NetworkShape,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    threshold: f64,
    seeds: &[u64],
) -> Result<ThresholdResult> {
    let epochs: Vec<Option<usize>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut net = HoNetwork::build(shape, seed)?;
            let mut trainer = Trainer::new(cfg.clone(), &net)?;
            let mut hit = None;
            while !trainer.finished() && hit.is_none() {
                let r = trainer.run_epoch(&mut net, train, test)?;
                if r.train_accuracy >= threshold {
                    hit = Some(r.epoch + 1);
                }
            }
            Ok(hit)
        })
        .collect::<Result<_>>()?;
    let counted: Vec<f64> = epochs
        .iter()
        .map(|e| e.map_or(cfg.epochs as f64 + 1.0, |v| v as f64))
        .collect();
    Ok(ThresholdResult {
        scheme: shape.scheme,
        depth: shape.depth,
        threshold,
        median_epochs: median(&counted),
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostAccount {
    pub scheme: Scheme,
    pub blocks: usize,
    pub retained_shortcuts: usize,
    pub extra_multiplies: usize,
    pub extra_adds: usize,
    /// Scalars held by the tape after one training forward and backward
    /// pass on a batch.
    pub peak_retained_scalars: usize,
    /// Fastest of the timed epochs.
    pub epoch_seconds: f64,
}

/// Static counts from the tableau plus measured memory and epoch time.
pub fn cost_account(
    shape: &NetworkShape,
    cfg: &TrainConfig,
    train: &Dataset,
    timed_epochs: usize,
    seed: u64,
) -> Result<CostAccount> {
    let tableau = shape.scheme.tableau(shape.verner);
    let mut net = HoNetwork::build(shape, seed)?;
    let batch: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
    let (x, y) = train.gather(&batch)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(out.logits, &y)?;
    tape.backward(loss)?;
    let peak = tape.retained_scalars();
    let epoch_seconds = time_epochs(&mut net, cfg, train, timed_epochs)?;
    Ok(CostAccount {
        scheme: shape.scheme,
        blocks: shape.block_count()?,
        retained_shortcuts: tableau.retained_shortcuts(),
        extra_multiplies: tableau.extra_multiplies(),
        extra_adds: tableau.extra_adds(),
        peak_retained_scalars: peak,
        epoch_seconds,
    })
}

/// Minimum wall-clock over `n` training epochs (no evaluation pass).
pub fn time_epochs(net: &mut HoNetwork, cfg: &TrainConfig, train: &Dataset, n: usize) -> Result<f64> {
    let empty = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        ..train.clone()
    };
    let cfg = TrainConfig {
        epochs: n.max(1),
        milestones: Vec::new(),
        ..cfg.clone()
    };
    let mut trainer = Trainer::new(cfg, net)?;
    let mut best = f64::INFINITY;
    while !trainer.finished() {
        let start = Instant::now();
        trainer.run_epoch(net, train, &empty)?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Fixed probe batch drawn from the task's test split.
pub fn probe_batch(task: &TaskSpec, seed: u64, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (_, test) = task.generate(seed)?;
    let n = size.min(test.len());
    let order = crate::data::batches(test.len(), n, split_seed(seed, "probe", 0))?;
    test.gather(&order[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subnet::StubResponse;

    fn cell(lr: f64, diverged: bool) -> LrCell {
        LrCell {
            lr,
            diverged,
            epochs: 1,
            final_train_loss: 0.0,
            final_test_accuracy: 0.0,
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn stable_lr_stops_at_first_divergence() {
        let cells = [cell(0.1, false), cell(0.2, false), cell(0.3, true), cell(0.4, false)];
        assert_eq!(max_stable_lr(&cells), Some(0.2));
        assert_eq!(max_stable_lr(&cells[2..]), None);
    }

    #[test]
    fn grid_arithmetic() {
        let g = lr_grid(0.05, 0.45, 0.05).unwrap();
        assert_eq!(g.len(), 9);
        assert!((g[8] - 0.45).abs() < 1e-12);
        assert_eq!(g[2], 0.15);
        assert!(lr_grid(0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn zero_stub_probe_is_uniform() {
        let shape = NetworkShape::dense(Scheme::Rk4, 10, 4, 2, 3);
        let probe = probe_batch(&TaskSpec { classes: 3, ..TaskSpec::spirals() }, 0, 16).unwrap();
        let r = init_probe_with(&shape, &[1, 2, 3], &probe, |s, seed| {
            let mut net = HoNetwork::build_with_stubs(s, seed, StubResponse::Scalar(0.0))?;
            net.zero_head();
            Ok(net)
        })
        .unwrap();
        for p in &r.seeds {
            assert!((p.mean_loss - 3f64.ln()).abs() < 1e-12);
        }
        assert_eq!(r.spread, 0.0);
        assert_eq!(r.median_log_spread, 0.0);
    }

    #[test]
    fn single_seed_has_zero_spread() {
        let shape = NetworkShape::dense(Scheme::Euler, 6, 4, 2, 2);
        let probe = probe_batch(&TaskSpec::spirals(), 0, 8).unwrap();
        let r = init_probe(&shape, &[5], &probe).unwrap();
        assert_eq!(r.spread, 0.0);
        assert!(r.min.is_finite());
    }

    #[test]
    fn curve_shape_queries() {
        let point = |depth, acc| DepthPoint {
            depth,
            blocks: 1,
            test_accuracy: acc,
            train_accuracy: acc,
            diverged: false,
        };
        let c = DegradationCurve {
            scheme: Scheme::Euler,
            points: vec![point(10, 0.8), point(18, 0.9), point(30, 0.85), point(58, 0.7)],
            evaluated: 0,
        };
        assert_eq!(c.first_drop_depth(), Some(30));
        assert!(c.peaks_before_max_depth());

        // 0.9 on 100 predictions has standard error 0.03.
        let noisy = DegradationCurve {
            points: vec![point(10, 0.9), point(18, 0.88), point(30, 0.85)],
            evaluated: 100,
            ..c.clone()
        };
        assert!((noisy.noise(0.9) - 0.03).abs() < 1e-15);
        assert_eq!(noisy.first_drop_depth(), Some(30));
        assert!(noisy.peaks_before_max_depth());
        let flat = DegradationCurve {
            points: vec![point(10, 0.9), point(18, 0.89), point(30, 0.9)],
            ..noisy.clone()
        };
        assert_eq!(flat.first_drop_depth(), None);
        assert!(!flat.peaks_before_max_depth());

        let single = DegradationCurve {
            scheme: Scheme::Euler,
            points: vec![point(10, 0.8)],
            evaluated: 10,
        };
        assert_eq!(single.first_drop_depth(), None);
        assert!(!single.peaks_before_max_depth());
    }
}
