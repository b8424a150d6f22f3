//! Explicit Runge-Kutta coefficient tables.
//!
//! Each table is written the way the block wires it: stage `i` receives the
//! block input plus a weighted sum of earlier stage outputs, and the block
//! output is the input plus a weighted sum of stage outputs. Closed-form
//! coefficients are evaluated once, here, and kept next to their source
//! expression so a dump can be audited line by line.

use serde::{Deserialize, Serialize};

const SQRT6: f64 = 2.449_489_742_783_178;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub value: f64,
    pub expr: String,
    /// `(numerator, denominator)` when the coefficient is rational.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rational: Option<(i64, i64)>,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn add_rational(a: (i64, i64), b: (i64, i64)) -> (i64, i64) {
    let num = a.0 * b.1 + b.0 * a.1;
    let den = a.1 * b.1;
    let g = gcd(num, den).max(1);
    (num / g, den / g)
}

fn q(num: f64, den: f64) -> Coefficient {
    Coefficient {
        value: num / den,
        expr: if den == 1.0 {
            format!("{num}")
        } else {
            format!("{num}/{den}")
        },
        rational: Some((num as i64, den as i64)),
    }
}

/// `(a + b·√6) / den`
fn r6(a: f64, b: f64, den: f64) -> Coefficient {
    Coefficient {
        value: (a + b * SQRT6) / den,
        expr: format!("({a} + {b}*sqrt6)/{den}"),
        rational: None,
    }
}

/// A decimal printed to limited precision.
fn dec(value: f64) -> Coefficient {
    Coefficient {
        value,
        expr: format!("{value}"),
        rational: None,
    }
}

/// One term `coefficient · k_source` of a stage or output rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    /// Zero-based stage index.
    pub source: usize,
    pub coefficient: Coefficient,
}

/// How the block scales its blended stage outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HPolicy {
    /// Coefficients are used as written; equivalent to a unit step.
    None,
    /// Every rule is multiplied by a fixed step `h = 1`.
    Fixed,
    /// Every rule is multiplied by a trainable step.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tableau {
    pub name: String,
    /// `stages[i]` lists the earlier stage outputs feeding stage `i`.
    pub stages: Vec<Vec<Term>>,
    pub output: Vec<Term>,
    pub h_policy: HPolicy,
}

fn t(source_one_based: usize, coefficient: Coefficient) -> Term {
    Term {
        source: source_one_based - 1,
        coefficient,
    }
}

impl Tableau {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// `a[i][j]` as a dense strictly lower-triangular matrix.
    pub fn a_matrix(&self) -> Vec<Vec<f64>> {
        let s = self.stage_count();
        let mut a = vec![vec![0.0; s]; s];
        for (i, rule) in self.stages.iter().enumerate() {
            for term in rule {
                a[i][term.source] += term.coefficient.value;
            }
        }
        a
    }

    pub fn b_weights(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.stage_count()];
        for term in &self.output {
            b[term.source] += term.coefficient.value;
        }
        b
    }

    /// Abscissae `c_i = Σ_j a_ij`, used only for non-autonomous problems.
    pub fn nodes(&self) -> Vec<f64> {
        self.stages
            .iter()
            .map(|rule| rule.iter().fold(0.0, |c, term| c + term.coefficient.value))
            .collect()
    }

    pub fn weight_sum(&self) -> f64 {
        self.output.iter().map(|term| term.coefficient.value).sum()
    }

    /// Output weight sum in exact arithmetic, when every weight is rational.
    pub fn exact_weight_sum(&self) -> Option<(i64, i64)> {
        self.output.iter().try_fold((0, 1), |acc, term| {
            term.coefficient.rational.map(|r| add_rational(acc, r))
        })
    }

    /// Stage `i` reads only stages `j < i`.
    pub fn is_explicit(&self) -> bool {
        let s = self.stage_count();
        self.stages
            .iter()
            .enumerate()
            .all(|(i, rule)| rule.iter().all(|term| term.source < i))
            && self.output.iter().all(|term| term.source < s)
    }

    pub fn euler() -> Self {
        Tableau {
            name: "euler".into(),
            stages: vec![vec![]],
            output: vec![t(1, q(1.0, 1.0))],
            h_policy: HPolicy::None,
        }
    }

    pub fn midpoint() -> Self {
        Tableau {
            name: "midpoint".into(),
            stages: vec![vec![], vec![t(1, q(1.0, 2.0))]],
            output: vec![t(2, q(1.0, 1.0))],
            h_policy: HPolicy::None,
        }
    }

    pub fn rk4() -> Self {
        Tableau {
            name: "rk4".into(),
            stages: vec![
                vec![],
                vec![t(1, q(1.0, 2.0))],
                vec![t(2, q(1.0, 2.0))],
                vec![t(3, q(1.0, 1.0))],
            ],
            output: vec![
                t(1, q(1.0, 6.0)),
                t(2, q(2.0, 6.0)),
                t(3, q(2.0, 6.0)),
                t(4, q(1.0, 6.0)),
            ],
            h_policy: HPolicy::None,
        }
    }

    /// RK4 stages with the blend dropped: output is `x + k₄`.
    pub fn rk4_lite() -> Self {
        Tableau {
            name: "rk4-lite".into(),
            output: vec![t(4, q(1.0, 1.0))],
            ..Self::rk4()
        }
    }

    /// Stages 1-11 shared by both Verner variants, except stage 5's `k₄`
    /// coefficient which differs between them.
    fn verner_head(k5_k4: Coefficient) -> Vec<Vec<Term>> {
        vec![
            vec![],
            vec![t(1, q(1.0, 12.0))],
            vec![t(1, q(1.0, 27.0)), t(2, q(2.0, 27.0))],
            vec![t(1, q(1.0, 24.0)), t(3, q(3.0, 24.0))],
            vec![
                t(1, r6(4.0, 94.0, 375.0)),
                t(3, r6(-282.0, -252.0, 375.0)),
                t(4, k5_k4),
            ],
            vec![
                t(1, r6(9.0, -1.0, 150.0)),
                t(4, r6(312.0, 32.0, 1425.0)),
                t(5, r6(69.0, 29.0, 570.0)),
            ],
            vec![
                t(1, r6(927.0, -347.0, 1250.0)),
                t(4, r6(-16248.0, 7328.0, 9375.0)),
                t(5, r6(-489.0, 179.0, 3750.0)),
                t(6, r6(14268.0, -5798.0, 9375.0)),
            ],
            vec![
                t(1, q(4.0, 54.0)),
                t(6, r6(16.0, -1.0, 54.0)),
                t(7, r6(16.0, 1.0, 54.0)),
            ],
            vec![
                t(1, q(38.0, 512.0)),
                t(6, r6(118.0, -23.0, 512.0)),
                t(7, r6(118.0, 23.0, 512.0)),
                t(8, q(-18.0, 512.0)),
            ],
            vec![
                t(1, q(11.0, 144.0)),
                t(6, r6(266.0, -1.0, 864.0)),
                t(7, r6(266.0, 1.0, 864.0)),
                t(8, q(-1.0, 16.0)),
                t(9, q(-8.0, 27.0)),
            ],
            vec![
                t(1, r6(5034.0, -271.0, 61440.0)),
                t(7, r6(7859.0, -1626.0, 10240.0)),
                t(8, r6(-2232.0, 813.0, 20480.0)),
                t(9, r6(-594.0, 271.0, 960.0)),
                t(10, r6(657.0, -813.0, 5120.0)),
            ],
        ]
    }

    /// Verner 8(9) truncated to the 14 stages that reach the output, with
    /// the decimals exactly as commonly printed for stages 12-14 and for the
    /// output weights. The printed weights sum to 0.9924, and stage 12's
    /// printed row does not sum to its node, so this table is not a
    /// convergent integrator; it reproduces the published block verbatim.
    pub fn verner_paper(h_policy: HPolicy) -> Self {
        let mut stages = Self::verner_head(r6(328.0, 206.0, 375.0));
        stages.push(vec![
            t(1, dec(-8.14164)),
            t(6, dec(-574.436)),
            t(7, dec(847.88)),
            t(8, dec(113.719)),
            t(9, dec(626.94)),
            t(10, dec(605.73)),
            t(11, dec(-328.69)),
        ]);
        stages.push(vec![
            t(1, dec(0.0878)),
            t(6, dec(0.69337)),
            t(7, dec(-1.9)),
            t(8, dec(0.23)),
            t(9, dec(-0.69)),
            t(10, dec(-0.077)),
            t(11, dec(2.49)),
            t(12, dec(0.0018)),
        ]);
        stages.push(vec![
            t(1, dec(-0.1)),
            t(6, dec(5.575)),
            t(7, dec(7.486)),
            t(8, dec(-6.23)),
            t(9, dec(2.27)),
            t(10, dec(-4.89)),
            t(11, dec(-4.86)),
            t(12, dec(-0.0235)),
            t(13, dec(1.78)),
        ]);
        Tableau {
            name: "verner-paper".into(),
            stages,
            output: vec![
                t(1, dec(0.06)),
                t(8, dec(-0.19)),
                t(9, dec(0.72)),
                t(10, dec(-0.72)),
                t(11, dec(0.75)),
                t(12, dec(0.0004)),
                t(13, dec(0.34)),
                t(14, dec(0.032)),
            ],
            h_policy,
        }
    }

    /// Verner's 1978 8(9) pair, eighth-order weights, in exact form.
    pub fn verner_canonical(h_policy: HPolicy) -> Self {
        let mut stages = Self::verner_head(r6(328.0, 208.0, 375.0));
        stages.push(vec![
            t(1, r6(5996.0, -3794.0, 405.0)),
            t(6, r6(-4342.0, -338.0, 9.0)),
            t(7, r6(154922.0, -40458.0, 135.0)),
            t(8, r6(-4176.0, 3794.0, 45.0)),
            t(9, r6(-340864.0, 242816.0, 405.0)),
            t(10, r6(26304.0, -15176.0, 45.0)),
            t(11, q(-26624.0, 81.0)),
        ]);
        stages.push(vec![
            t(1, r6(3793.0, 2168.0, 103680.0)),
            t(6, r6(4042.0, 2263.0, 13824.0)),
            t(7, r6(-231278.0, 40717.0, 69120.0)),
            t(8, r6(7947.0, -2168.0, 11520.0)),
            t(9, r6(1048.0, -542.0, 405.0)),
            t(10, r6(-1383.0, 542.0, 720.0)),
            t(11, q(2624.0, 1053.0)),
            t(12, q(3.0, 1664.0)),
        ]);
        stages.push(vec![
            t(1, q(-137.0, 1296.0)),
            t(6, r6(5642.0, -337.0, 864.0)),
            t(7, r6(5642.0, 337.0, 864.0)),
            t(8, q(-299.0, 48.0)),
            t(9, q(184.0, 81.0)),
            t(10, q(-44.0, 9.0)),
            t(11, q(-5120.0, 1053.0)),
            t(12, q(-11.0, 468.0)),
            t(13, q(16.0, 9.0)),
        ]);
        Tableau {
            name: "verner-canonical".into(),
            stages,
            output: vec![
                t(1, q(103.0, 1680.0)),
                t(8, q(-27.0, 140.0)),
                t(9, q(76.0, 105.0)),
                t(10, q(-201.0, 280.0)),
                t(11, q(1024.0, 1365.0)),
                t(12, q(3.0, 7280.0)),
                t(13, q(12.0, 35.0)),
                t(14, q(9.0, 280.0)),
            ],
            h_policy,
        }
    }

    /// Tensors that must be held besides the running one, at the widest
    /// point of the stage dependency graph.
    ///
    /// After stage `i` completes, the live set is the block input plus every
    /// `k_j, j ≤ i` read by a later rule (a later stage or the output). The
    /// count reported is the size of the largest live set minus one, the
    /// tensor currently flowing forward.
    pub fn retained_shortcuts(&self) -> usize {
        let s = self.stage_count();
        // last rule index reading each k_j; the output rule has index s
        let mut last_use = vec![None; s];
        for (i, rule) in self.stages.iter().enumerate() {
            for term in rule {
                last_use[term.source] = Some(i);
            }
        }
        for term in &self.output {
            last_use[term.source] = Some(s);
        }
        (0..s)
            .map(|i| {
                // the block input is always live (the output reads it) and
                // cancels against the flowing tensor
                (0..=i)
                    .filter(|&j| last_use[j].is_some_and(|u| u > i))
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    /// Extra scalar multiplications per block relative to plain stacking:
    /// one per coefficient other than ±1, plus one per rule when the block
    /// applies a step scale.
    pub fn extra_multiplies(&self) -> usize {
        let rules = self.stages.iter().chain(std::iter::once(&self.output));
        let mut count = 0;
        for rule in rules {
            count += rule
                .iter()
                .filter(|term| term.coefficient.value.abs() != 1.0)
                .count();
            if self.h_policy != HPolicy::None && !rule.is_empty() {
                count += 1;
            }
        }
        count
    }

    /// Extra tensor additions per block relative to stacking one shortcut
    /// per stage function.
    pub fn extra_adds(&self) -> usize {
        let terms: usize =
            self.stages.iter().map(Vec::len).sum::<usize>() + self.output.len();
        terms.saturating_sub(self.stage_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_order_weights_sum_to_one_exactly() {
        for tab in [Tableau::euler(), Tableau::midpoint(), Tableau::rk4(), Tableau::rk4_lite()] {
            assert_eq!(tab.exact_weight_sum(), Some((1, 1)), "{}", tab.name);
            assert!((tab.weight_sum() - 1.0).abs() <= f64::EPSILON, "{}", tab.name);
        }
    }

    #[test]
    fn verner_paper_weights_sum_near_one() {
        // 0.06 − 0.19 + 0.72 − 0.72 + 0.75 + 0.0004 + 0.34 + 0.032 = 0.9924
        let tab = Tableau::verner_paper(HPolicy::Fixed);
        assert!((tab.weight_sum() - 0.9924).abs() < 1e-12);
        assert!((tab.weight_sum() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn canonical_verner_is_consistent() {
        let tab = Tableau::verner_canonical(HPolicy::Fixed);
        assert!((tab.weight_sum() - 1.0).abs() < 1e-14);
        assert_eq!(tab.exact_weight_sum(), Some((1, 1)));
        let c = tab.nodes();
        let expected = [
            0.0,
            1.0 / 12.0,
            1.0 / 9.0,
            1.0 / 6.0,
            (2.0 + 2.0 * SQRT6) / 15.0,
            (6.0 + SQRT6) / 15.0,
            (6.0 - SQRT6) / 15.0,
            2.0 / 3.0,
            0.5,
            1.0 / 3.0,
            0.25,
            4.0 / 3.0,
            5.0 / 6.0,
            1.0,
        ];
        for (i, (ci, ei)) in c.iter().zip(expected).enumerate() {
            assert!((ci - ei).abs() < 1e-11, "node {}: {ci} vs {ei}", i + 1);
        }
    }

    #[test]
    fn sqrt6_constant() {
        assert_eq!(SQRT6, 6f64.sqrt());
    }

    #[test]
    fn paper_decimals_round_canonical_values() {
        // stages 13 and 14 and the output weights agree to the printed digits
        let p = Tableau::verner_paper(HPolicy::Fixed);
        let c = Tableau::verner_canonical(HPolicy::Fixed);
        for rule in [12, 13] {
            for (tp, tc) in p.stages[rule].iter().zip(&c.stages[rule]) {
                assert_eq!(tp.source, tc.source);
                assert!(
                    (tp.coefficient.value - tc.coefficient.value).abs() < 0.04,
                    "stage {} k{}",
                    rule + 1,
                    tp.source + 1
                );
            }
        }
        for (bp, bc) in p.b_weights().iter().zip(c.b_weights()) {
            assert!((bp - bc).abs() < 0.004);
        }
    }

    #[test]
    fn all_tables_are_explicit() {
        for tab in [
            Tableau::euler(),
            Tableau::midpoint(),
            Tableau::rk4(),
            Tableau::rk4_lite(),
            Tableau::verner_paper(HPolicy::Fixed),
            Tableau::verner_canonical(HPolicy::Learnable),
        ] {
            assert!(tab.is_explicit(), "{}", tab.name);
            let a = tab.a_matrix();
            for (i, row) in a.iter().enumerate() {
                assert!(row[i..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn operation_counts_for_low_order_blocks() {
        assert_eq!(Tableau::euler().extra_multiplies(), 0);
        assert_eq!(Tableau::euler().extra_adds(), 0);
        assert_eq!(Tableau::midpoint().extra_multiplies(), 1);
        assert_eq!(Tableau::midpoint().extra_adds(), 0);
        assert_eq!(Tableau::rk4().extra_multiplies(), 6);
        assert_eq!(Tableau::rk4().extra_adds(), 3);
    }

    #[test]
    fn retained_shortcuts_from_dependency_graph() {
        assert_eq!(Tableau::euler().retained_shortcuts(), 1);
        assert_eq!(Tableau::midpoint().retained_shortcuts(), 1);
        assert_eq!(Tableau::rk4().retained_shortcuts(), 4);
        assert_eq!(Tableau::rk4_lite().retained_shortcuts(), 1);
        // after k13: x, k1, k6..k13 are all still needed
        assert_eq!(Tableau::verner_paper(HPolicy::Fixed).retained_shortcuts(), 9);
    }
}
