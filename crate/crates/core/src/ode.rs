//! Classical explicit integrators driven by the same tables as the blocks,
//! and empirical convergence-order measurement.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schemes::Tableau;

/// Errors below this are treated as rounding noise.
pub const ERROR_FLOOR: f64 = 1e-13;

/// Fits whose RMS log-residual exceeds this are refit on the middle range.
pub const FIT_RESIDUAL_LIMIT: f64 = 0.05;

pub type Rhs = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
pub type Solution = dyn Fn(f64) -> Vec<f64> + Send + Sync;

pub struct IvProblem {
    pub name: String,
    pub f: Box<Rhs>,
    pub y0: Vec<f64>,
    pub t_span: (f64, f64),
    pub analytic: Option<Box<Solution>>,
}

impl IvProblem {
    /// `y' = y`, `y(0) = 1` on `[0, 1]`.
    pub fn growth() -> Self {
        IvProblem {
            name: "growth".into(),
            f: Box::new(|_, y| y.to_vec()),
            y0: vec![1.0],
            t_span: (0.0, 1.0),
            analytic: Some(Box::new(|t| vec![t.exp()])),
        }
    }

    /// `y' = −2ty`, `y(0) = 1` on `[0, 2]`.
    pub fn gaussian_decay() -> Self {
        Self::gaussian_decay_to(2.0)
    }

    /// `y' = −2ty` on `[0, t_end]`.
    pub fn gaussian_decay_to(t_end: f64) -> Self {
        IvProblem {
            name: "gaussian-decay".into(),
            f: Box::new(|t, y| vec![-2.0 * t * y[0]]),
            y0: vec![1.0],
            t_span: (0.0, t_end),
            analytic: Some(Box::new(|t| vec![(-t * t).exp()])),
        }
    }

    /// `y' = (−y₂, y₁)`, `y(0) = (1, 0)` on `[0, 2]`.
    pub fn rotation() -> Self {
        IvProblem {
            name: "rotation".into(),
            f: Box::new(|_, y| vec![-y[1], y[0]]),
            y0: vec![1.0, 0.0],
            t_span: (0.0, 2.0),
            analytic: Some(Box::new(|t| vec![t.cos(), t.sin()])),
        }
    }

    /// `y' = λy`, `y(0) = 1` on `[0, 1]`.
    pub fn linear(lambda: f64) -> Self {
        IvProblem {
            name: format!("linear({lambda})"),
            f: Box::new(move |_, y| y.iter().map(|v| lambda * v).collect()),
            y0: vec![1.0],
            t_span: (0.0, 1.0),
            analytic: Some(Box::new(move |t| vec![(lambda * t).exp()])),
        }
    }

    /// Problems used for order studies. The gaussian runs on `[0, 1]` so the
    /// coarsest steps keep `|h·∂f/∂y| ≤ 0.5` and stay in the asymptotic range.
    pub fn suite() -> Vec<IvProblem> {
        vec![Self::growth(), Self::gaussian_decay_to(1.0), Self::rotation()]
    }
}

/// One explicit step `y + h·Σ bᵢkᵢ`, `kᵢ = f(t + cᵢh, y + h·Σ aᵢⱼkⱼ)`.
pub fn step(tableau: &Tableau, f: &Rhs, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let nodes = tableau.nodes();
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(tableau.stage_count());
    for (i, rule) in tableau.stages.iter().enumerate() {
        let mut arg = y.to_vec();
        for term in rule {
            let c = h * term.coefficient.value;
            for (a, k) in arg.iter_mut().zip(&ks[term.source]) {
                *a += c * k;
            }
        }
        let k = f(t + nodes[i] * h, &arg);
        if k.len() != y.len() {
            return Err(Error::dim("rhs", &[y.len()], &[k.len()]));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                location: format!("{} stage k{}", tableau.name, i + 1),
            });
        }
        ks.push(k);
    }
    let mut out = y.to_vec();
    for term in &tableau.output {
        let c = h * term.coefficient.value;
        for (o, k) in out.iter_mut().zip(&ks[term.source]) {
            *o += c * k;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.y.last().expect("trajectory holds the initial state")
    }
}

/// Uniform-step integration over the problem's span.
pub fn integrate(tableau: &Tableau, problem: &IvProblem, n_steps: usize) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Contract("integrate needs at least one step".into()));
    }
    let (t0, t1) = problem.t_span;
    let h = (t1 - t0) / n_steps as f64;
    let mut traj = Trajectory {
        t: vec![t0],
        y: vec![problem.y0.clone()],
    };
    for n in 0..n_steps {
        let t = t0 + n as f64 * h;
        let next = step(tableau, problem.f.as_ref(), t, traj.last(), h).map_err(|e| match e {
            Error::Divergence { location } => Error::Divergence {
                location: format!("{location} at step {n}"),
            },
            other => other,
        })?;
        traj.t.push(t0 + (n + 1) as f64 * h);
        traj.y.push(next);
    }
    Ok(traj)
}

/// Max-norm error at the end of the span.
pub fn endpoint_error(tableau: &Tableau, problem: &IvProblem, n_steps: usize) -> Result<f64> {
    let analytic = problem
        .analytic
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{} has no analytic solution", problem.name)))?;
    let traj = integrate(tableau, problem, n_steps)?;
    let exact = analytic(problem.t_span.1);
    Ok(traj
        .last()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderEstimate {
    pub tableau: String,
    pub problem: String,
    /// Step sizes actually used, largest first.
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: f64,
    /// RMS residual of the fit in natural-log units.
    pub residual: f64,
    /// Points used by the final fit, as a range into `h`.
    pub fit_range: (usize, usize),
    /// Whether the grid had to move coarser because errors hit the floor.
    pub shifted: bool,
}

/// Geometric grid `base · 2^-i` for `i` in `from..=to`.
pub fn halving_grid(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|i| 2f64.powi(-i)).collect()
}

fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    (slope, (rss / n).sqrt())
}

fn steps_for(problem: &IvProblem, h: f64) -> Result<usize> {
    let span = problem.t_span.1 - problem.t_span.0;
    let n = span / h;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "step {h} does not divide the span {span}"
        )));
    }
    Ok(rounded as usize)
}

/// Least-squares slope of `log error` against `log h`.
///
/// Points whose error falls below [`ERROR_FLOOR`] are dropped. If fewer than
/// four remain, the grid is refined to half-octave spacing (integer step
/// counts nearest `n₀·2^(k/2)`) over the same range, and only if that still
/// leaves fewer than four points are coarser lattice steps added, finest
/// first. Such estimates are flagged `shifted`. If the fit residual exceeds
/// [`FIT_RESIDUAL_LIMIT`], the largest and smallest steps are discarded and
/// the fit repeated.
pub fn measure_order(tableau: &Tableau, problem: &IvProblem, h_list: &[f64]) -> Result<OrderEstimate> {
    if h_list.len() < 4 {
        return Err(Error::Contract(format!(
            "order fit needs at least 4 step sizes, got {}",
            h_list.len()
        )));
    }
    let mut hs: Vec<f64> = h_list.to_vec();
    hs.sort_by(|a, b| b.total_cmp(a));
    let ratio = hs[0] / hs[1];
    if hs.windows(2).any(|w| ((w[0] / w[1]) - ratio).abs() > 1e-9 * ratio) {
        return Err(Error::Contract("step sizes must be geometric".into()));
    }
    let span = problem.t_span.1 - problem.t_span.0;
    let error_at = |n: usize| endpoint_error(tableau, problem, n).map(|e| (span / n as f64, e));
    let mut pairs = Vec::new();
    for &h in &hs {
        let (h, err) = error_at(steps_for(problem, h)?)?;
        if err >= ERROR_FLOOR {
            pairs.push((h, err));
        }
    }
    let mut shifted = false;
    if pairs.len() < 4 {
        shifted = true;
        let n0 = steps_for(problem, hs[0])?;
        let n_max = steps_for(problem, hs[hs.len() - 1])?;
        let lattice = |k: i32| (n0 as f64 * 2f64.powf(k as f64 / 2.0)).round() as usize;
        let mut counts: Vec<usize> = (0..).map(lattice).take_while(|&n| n <= n_max).collect();
        counts.dedup();
        pairs.clear();
        for n in counts {
            let p = error_at(n)?;
            if p.1 >= ERROR_FLOOR {
                pairs.push(p);
            }
        }
        let mut k = -1;
        let mut last = n0;
        while pairs.len() < 4 {
            let n = lattice(k);
            k -= 1;
            if n == last {
                continue;
            }
            if n == 0 {
                let (h, error) = error_at(n_max)?;
                return Err(Error::Underflow {
                    h,
                    error,
                    floor: ERROR_FLOOR,
                });
            }
            last = n;
            pairs.insert(0, error_at(n)?);
        }
    }
    let fit = |lo: usize, hi: usize| {
        let x: Vec<f64> = pairs[lo..hi].iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = pairs[lo..hi].iter().map(|p| p.1.ln()).collect();
        ols(&x, &y)
    };
    let mut range = (0, pairs.len());
    let (mut order, mut residual) = fit(range.0, range.1);
    if residual > FIT_RESIDUAL_LIMIT && pairs.len() >= 6 {
        range = (1, pairs.len() - 1);
        (order, residual) = fit(range.0, range.1);
    }
    Ok(OrderEstimate {
        tableau: tableau.name.clone(),
        problem: problem.name.clone(),
        h: pairs.iter().map(|p| p.0).collect(),
        errors: pairs.iter().map(|p| p.1).collect(),
        order,
        residual,
        fit_range: range,
        shifted,
    })
}
