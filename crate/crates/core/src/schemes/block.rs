use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tableau::{HPolicy, Tableau};
use crate::error::{Error, Result};
use crate::subnet::{Forward, StageFunction};
use crate::tensor::{Coef, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Interval the step scale is projected onto when clamping is enabled.
pub const H_CLAMP: (f64, f64) = (0.125, 4.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HGranularity {
    /// One step scale for every rule of the block.
    #[default]
    Shared,
    /// One step scale per stage rule (stages 2..s) plus one for the output.
    PerStage,
}

/// The step multiplier `h` applied to every blended rule of a block.
#[derive(Clone, Debug, PartialEq)]
pub enum StepScale {
    /// Rules are used as written.
    Unit,
    /// Constant `h`.
    Fixed(f64),
    Learnable {
        ids: Vec<ParamId>,
        granularity: HGranularity,
        clamp: Option<(f64, f64)>,
    },
}

impl StepScale {
    pub fn learnable(
        store: &mut ParamStore,
        name: &str,
        stages: usize,
        granularity: HGranularity,
        clamp: bool,
    ) -> Self {
        let count = match granularity {
            HGranularity::Shared => 1,
            HGranularity::PerStage => stages,
        };
        let ids = (0..count)
            .map(|i| {
                store.add(
                    format!("{name}.h{i}"),
                    ParamKind::StepScale,
                    Tensor::scalar(1.0),
                )
            })
            .collect();
        StepScale::Learnable {
            ids,
            granularity,
            clamp: clamp.then_some(H_CLAMP),
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        match self {
            StepScale::Learnable { ids, .. } => ids,
            _ => &[],
        }
    }

    /// Projects every learnable `h` onto the clamp interval, if one is set.
    pub fn apply_clamp(&self, store: &mut ParamStore) {
        if let StepScale::Learnable {
            ids,
            clamp: Some((lo, hi)),
            ..
        } = self
        {
            for &id in ids {
                let v = &mut store.get_mut(id).tensor.data_mut()[0];
                *v = v.clamp(*lo, *hi);
            }
        }
    }

    /// Coefficient for rule `rule` (stage index, or `stages` for the output).
    fn coef(&self, value: f64, rule: usize, h_vars: &[Var]) -> Coef {
        match self {
            StepScale::Unit => Coef::constant(value),
            StepScale::Fixed(h) => Coef::constant(value * h),
            StepScale::Learnable { granularity, .. } => {
                let idx = match granularity {
                    HGranularity::Shared => 0,
                    // stage 0 has no rule, so stage i maps to i - 1 and the
                    // output (rule == stages) to the last slot
                    HGranularity::PerStage => rule - 1,
                };
                Coef::scaled(value, h_vars[idx])
            }
        }
    }
}

/// One residual block: a tableau, one stage function per stage, and the
/// step scale.
#[derive(Clone, Debug)]
pub struct Block {
    pub tableau: Arc<Tableau>,
    pub stages: Vec<StageFunction>,
    pub step: StepScale,
}

/// Block output plus every stage output, in stage order.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    pub stages: Vec<Var>,
}

impl Block {
    pub fn new(tableau: Arc<Tableau>, stages: Vec<StageFunction>, step: StepScale) -> Result<Self> {
        if stages.len() != tableau.stage_count() {
            return Err(Error::Config(format!(
                "{} needs {} stage functions, got {}",
                tableau.name,
                tableau.stage_count(),
                stages.len()
            )));
        }
        if tableau.h_policy == HPolicy::None && matches!(step, StepScale::Learnable { .. }) {
            return Err(Error::Config(format!(
                "{} has no step scale to learn",
                tableau.name
            )));
        }
        Ok(Block {
            tableau,
            stages,
            step,
        })
    }

    /// Block whose every stage is the same stub, for solver comparisons.
    pub fn with_stubs(tableau: Tableau, stub: StageFunction, step: StepScale) -> Self {
        let stages = vec![stub; tableau.stage_count()];
        Block {
            tableau: Arc::new(tableau),
            stages,
            step,
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(fwd, x)?.output)
    }

    /// Evaluates stage `i` on `x + Σ_j h·a_ij·k_j`, then returns
    /// `x + Σ_i h·b_i·k_i`.
    pub fn forward_traced(&self, fwd: &mut Forward<'_>, x: Var) -> Result<BlockTrace> {
        let h_vars: Vec<Var> = self
            .step
            .param_ids()
            .iter()
            .map(|&id| fwd.param(id))
            .collect();
        let mut ks: Vec<Var> = Vec::with_capacity(self.stages.len());
        for (i, (rule, f)) in self.tableau.stages.iter().zip(&self.stages).enumerate() {
            let input = if rule.is_empty() {
                x
            } else {
                let terms: Vec<(Coef, Var)> = rule
                    .iter()
                    .map(|term| (self.step.coef(term.coefficient.value, i, &h_vars), ks[term.source]))
                    .collect();
                fwd.tape.scale_add(x, &terms)?
            };
            let k = f.forward(fwd, input)?;
            if !fwd.tape.value(k).is_finite() {
                return Err(Error::Divergence {
                    location: format!("{} stage k{}", self.tableau.name, i + 1),
                });
            }
            ks.push(k);
        }
        let s = self.stages.len();
        let terms: Vec<(Coef, Var)> = self
            .tableau
            .output
            .iter()
            .map(|term| (self.step.coef(term.coefficient.value, s, &h_vars), ks[term.source]))
            .collect();
        let output = fwd.tape.scale_add(x, &terms)?;
        if !fwd.tape.value(output).is_finite() {
            return Err(Error::Divergence {
                location: format!("{} output", self.tableau.name),
            });
        }
        Ok(BlockTrace {
            output,
            stages: ks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.stages.iter().flat_map(|f| f.param_ids()).collect();
        ids.extend_from_slice(self.step.param_ids());
        ids
    }
}

/// Sequential application of blocks, keeping every intermediate state.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    pub output: Var,
    /// Input to each block followed by the final output.
    pub states: Vec<Var>,
    /// Stage outputs of every block, concatenated in evaluation order.
    pub stage_outputs: Vec<Var>,
}

/// Applies Euler blocks one after another; with no blocks the input is
/// returned unchanged.
pub fn stacked_euler_chain(blocks: &[Block], fwd: &mut Forward<'_>, x: Var) -> Result<ChainTrace> {
    let mut states = vec![x];
    let mut stage_outputs = Vec::new();
    let mut cur = x;
    for (i, block) in blocks.iter().enumerate() {
        if block.tableau.stage_count() != 1 || block.tableau.output.len() != 1 {
            return Err(Error::Config(format!(
                "block {i} is {} rather than euler",
                block.tableau.name
            )));
        }
        let trace = block.forward_traced(fwd, cur)?;
        stage_outputs.extend(trace.stages);
        cur = trace.output;
        states.push(cur);
    }
    Ok(ChainTrace {
        output: cur,
        states,
        stage_outputs,
    })
}
