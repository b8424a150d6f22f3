//! Coefficient tables and the blocks wired from them.

mod block;
mod tableau;


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use block::{
    stacked_euler_chain, Block, BlockTrace, ChainTrace, HGranularity, StepScale, H_CLAMP,
};
pub use tableau::{Coefficient, HPolicy, Tableau, Term};

use crate::error::{Error, Result};

/// Which Verner coefficient set a Verner block uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VernerCoefficients {
    /// The truncated block with rounded decimals, verbatim.
    #[default]
    Paper,
    /// Exact-form 8(9) coefficients.
    Canonical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Euler,
    Midpoint,
    Rk4,
    Rk4Lite,
    VernerFixed,
    VernerAdaptive,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Euler,
        Scheme::Midpoint,
        Scheme::Rk4,
        Scheme::Rk4Lite,
        Scheme::VernerFixed,
        Scheme::VernerAdaptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Midpoint => "midpoint",
            Scheme::Rk4 => "rk4",
            Scheme::Rk4Lite => "rk4-lite",
            Scheme::VernerFixed => "verner",
            Scheme::VernerAdaptive => "verner-adaptive",
        }
    }

    pub fn tableau(self, coefficients: VernerCoefficients) -> Tableau {
        let verner = |policy| match coefficients {
            VernerCoefficients::Paper => Tableau::verner_paper(policy),
            VernerCoefficients::Canonical => Tableau::verner_canonical(policy),
        };
        match self {
            Scheme::Euler => Tableau::euler(),
            Scheme::Midpoint => Tableau::midpoint(),
            Scheme::Rk4 => Tableau::rk4(),
            Scheme::Rk4Lite => Tableau::rk4_lite(),
            Scheme::VernerFixed => verner(HPolicy::Fixed),
            Scheme::VernerAdaptive => verner(HPolicy::Learnable),
        }
    }

    pub fn stage_count(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Midpoint => 2,
            Scheme::Rk4 | Scheme::Rk4Lite => 4,
            Scheme::VernerFixed | Scheme::VernerAdaptive => 14,
        }
    }

    /// Each stage function is two layers.
    pub fn layers_per_block(self) -> usize {
        2 * self.stage_count()
    }

    pub fn learnable_h(self) -> bool {
        self == Scheme::VernerAdaptive
    }

    /// The convergence order the scheme's table is expected to show as an
    /// ODE integrator.
    pub fn declared_order(self, coefficients: VernerCoefficients) -> OrderTarget {
        match (self, coefficients) {
            (Scheme::Euler | Scheme::Rk4Lite, _) => OrderTarget::Band { order: 1.0, tol: 0.1 },
            (Scheme::Midpoint, _) => OrderTarget::Band { order: 2.0, tol: 0.1 },
            (Scheme::Rk4, _) => OrderTarget::Band { order: 4.0, tol: 0.2 },
            (_, VernerCoefficients::Paper) => OrderTarget::AtLeast(4.0),
            (_, VernerCoefficients::Canonical) => OrderTarget::AtLeast(7.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderTarget {
    Band { order: f64, tol: f64 },
    AtLeast(f64),
}

impl OrderTarget {
    pub fn accepts(self, measured: f64) -> bool {
        match self {
            OrderTarget::Band { order, tol } => (measured - order).abs() <= tol,
            OrderTarget::AtLeast(min) => measured >= min,
        }
    }
}

impl fmt::Display for OrderTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderTarget::Band { order, tol } => write!(f, "{order}±{tol}"),
            OrderTarget::AtLeast(min) => write!(f, "≥{min}"),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let alias = match key.as_str() {
            "verner-fixed" | "rk8" => "verner",
            "rk4lite" | "rk4_lite" => "rk4-lite",
            "verner_adaptive" => "verner-adaptive",
            other => other,
        };
        Scheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == alias)
            .ok_or_else(|| {
                let names: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!(
                    "unknown scheme `{s}`; valid: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Pretty JSON of a tableau's rules, nodes and weights.
pub fn tableau_json(tableau: &Tableau) -> Result<String> {
    let value = serde_json::json!({
        "name": tableau.name,
        "stages": tableau.stage_count(),
        "h_policy": tableau.h_policy,
        "stage_rules": tableau.stages,
        "output_rule": tableau.output,
        "nodes": tableau.nodes(),
        "weights": tableau.b_weights(),
        "weight_sum": tableau.weight_sum(),
        "retained_shortcuts": tableau.retained_shortcuts(),
        "extra_multiplies": tableau.extra_multiplies(),
        "extra_adds": tableau.extra_adds(),
    });
    Ok(serde_json::to_string_pretty(&value)?)
}
