//! Fit metrics, BFGS, constant refinement and candidate ranking.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::expr::ExprTree;

/// Objective contribution of a row at which the expression is invalid.
pub const INVALID_ROW_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("dataset is empty")]
    Empty,
    #[error("dataset contains non-finite values")]
    NonFinite,
    #[error("target has zero variance")]
    DegenerateTarget,
    #[error("expression is invalid on every row")]
    NoValidRows,
    #[error("every candidate is invalid on every row")]
    AllInvalid,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("no candidates supplied")]
    NoCandidates,
}

/// Inputs and targets for one regression problem, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Dataset {
    /// `x` is n × d, `y` has n entries; all values must be finite and n ≥ 1.
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self, FitError> {
        if x.nrows() != y.len() {
            return Err(FitError::LengthMismatch(x.nrows(), y.len()));
        }
        let cols = crate::expr::columns_of(x.view());
        Dataset::from_columns(cols, y)
    }

    pub fn from_columns(cols: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self, FitError> {
        if y.is_empty() {
            return Err(FitError::Empty);
        }
        if let Some(c) = cols.iter().find(|c| c.len() != y.len()) {
            return Err(FitError::LengthMismatch(c.len(), y.len()));
        }
        if !y.iter().chain(cols.iter().flatten()).all(|v| v.is_finite()) {
            return Err(FitError::NonFinite);
        }
        Ok(Dataset { cols, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.cols
    }

    pub fn column_refs(&self) -> Vec<&[f64]> {
        self.cols.iter().map(Vec::as_slice).collect()
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[r]).collect()
    }

    pub fn x(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim()), |(r, c)| self.cols[c][r])
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            cols: self.cols.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    /// Predictions of `tree` on every row, NaN where invalid.
    pub fn predict(&self, tree: &ExprTree) -> Vec<f64> {
        tree.eval_columns(&self.column_refs(), self.len())
    }
}

/// Quality of an expression on a dataset, over the rows where it is valid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitReport {
    pub mse: f64,
    /// NaN when fewer than two valid rows or the valid targets are constant.
    pub r2: f64,
    pub n_valid: usize,
}

impl FitReport {
    /// Evaluates `tree` on `data`.
    pub fn of(tree: &ExprTree, data: &Dataset) -> Result<FitReport, FitError> {
        FitReport::from_predictions(&data.predict(tree), data.targets())
    }

    /// Builds a report from predictions that mark invalid rows as NaN.
    pub fn from_predictions(pred: &[f64], target: &[f64]) -> Result<FitReport, FitError> {
        let (p, t): (Vec<f64>, Vec<f64>) = pred
            .iter()
            .zip(target)
            .filter(|(p, _)| !p.is_nan())
            .map(|(&p, &t)| (p, t))
            .unzip();
        if p.is_empty() {
            return Err(FitError::NoValidRows);
        }
        Ok(FitReport {
            mse: mse(&p, &t)?,
            r2: r2(&p, &t).unwrap_or(f64::NAN),
            n_valid: p.len(),
        })
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, FitError> {
    if pred.len() != target.len() {
        return Err(FitError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(FitError::Empty);
    }
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(ss / pred.len() as f64)
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64, FitError> {
    if pred.len() != target.len() {
        return Err(FitError::LengthMismatch(pred.len(), target.len()));
    }
    if target.len() < 2 {
        return Err(FitError::TooFewRows { need: 2, got: target.len() });
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(FitError::DegenerateTarget);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iters: 100,
            grad_tol: 1e-8,
            step_tol: 1e-12,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    LineSearchFailed,
    /// The objective was not finite at the starting point.
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl BfgsResult {
    pub fn progressed(&self) -> bool {
        self.termination != Termination::NonFiniteStart
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `objective`, which returns the value and gradient at a point.
///
/// Dense inverse-Hessian BFGS with a backtracking Armijo line search. The
/// returned value never exceeds the value at `x0`.
pub fn bfgs_minimize<F>(mut objective: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let m = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    if !f.is_finite() {
        return BfgsResult { x, f, iterations: 0, termination: Termination::NonFiniteStart };
    }
    if m == 0 {
        return BfgsResult { x, f, iterations: 0, termination: Termination::GradientTolerance };
    }
    // row-major m × m
    let mut h = identity(m);
    let mut scaled = false;
    let mut iterations = 0;
    let termination = loop {
        if !g.iter().all(|v| v.is_finite()) {
            break Termination::LineSearchFailed;
        }
        if norm(&g) < opts.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let mut p: Vec<f64> = (0..m).map(|i| -dot(&h[i * m..(i + 1) * m], &g)).collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(m);
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + t * pi).collect();
            let (ft, gt) = objective(&trial);
            if ft.is_finite() && ft <= f + opts.c1 * t * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= opts.shrink;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break Termination::LineSearchFailed;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let step = norm(&s);
        x = x_new;
        f = f_new;
        g = g_new;
        if step < opts.step_tol {
            break Termination::StepTolerance;
        }

        let sy = dot(&s, &yv);
        if sy.is_finite() && sy > 1e-12 * step * norm(&yv) {
            if !scaled {
                let gamma = sy / dot(&yv, &yv);
                h.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..m {
                    h[i * m + i] = gamma;
                }
                scaled = true;
            }
            let hy: Vec<f64> = (0..m).map(|i| dot(&h[i * m..(i + 1) * m], &yv)).collect();
            let yhy = dot(&yv, &hy);
            let a = (sy + yhy) / (sy * sy);
            for i in 0..m {
                for j in 0..m {
                    h[i * m + j] += a * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
    };
    BfgsResult { x, f, iterations, termination }
}

fn identity(m: usize) -> Vec<f64> {
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        h[i * m + i] = 1.0;
    }
    h
}

/// Penalized mean squared error of `tree` and its gradient with respect to
/// the constant slots. Invalid rows contribute [`INVALID_ROW_PENALTY`] and no
/// gradient.
pub fn penalized_objective(tree: &ExprTree, cols: &[&[f64]], y: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len();
    let trace = tree.forward_trace(cols, n);
    let pred = &trace[0];
    let mut total = 0.0;
    let mut adj = vec![0.0; n];
    for r in 0..n {
        if pred[r].is_nan() {
            total += INVALID_ROW_PENALTY;
        } else {
            let e = pred[r] - y[r];
            total += e * e;
            adj[r] = 2.0 * e / n as f64;
        }
    }
    let mut grad = tree.backward_constants(&trace, &adj);
    for g in grad.iter_mut() {
        if !g.is_finite() {
            *g = 0.0;
        }
    }
    (total / n as f64, grad)
}

/// Optimizes the constants of `tree` on `data` with BFGS. The refined tree is
/// returned only if its MSE is no worse and it is valid on at least as many
/// rows; otherwise the original is returned.
pub fn refine_constants(tree: &ExprTree, data: &Dataset) -> Result<(ExprTree, FitReport), FitError> {
    refine_constants_with(tree, data, &BfgsOptions::default())
}

pub fn refine_constants_with(
    tree: &ExprTree,
    data: &Dataset,
    opts: &BfgsOptions,
) -> Result<(ExprTree, FitReport), FitError> {
    let original = FitReport::of(tree, data)?;
    let c0 = tree.constants();
    if c0.is_empty() {
        return Ok((tree.clone(), original));
    }
    let cols = data.column_refs();
    let y = data.targets();
    let mut work = tree.clone();
    let result = bfgs_minimize(
        |c| {
            work.set_constants(c);
            penalized_objective(&work, &cols, y)
        },
        &c0,
        opts,
    );
    let mut refined = tree.clone();
    refined.set_constants(&result.x);
    match FitReport::of(&refined, data) {
        Ok(rep) if rep.mse <= original.mse && rep.n_valid >= original.n_valid => Ok((refined, rep)),
        _ => Ok((tree.clone(), original)),
    }
}

/// One candidate's quality before and after refinement. `after` is `None`
/// when the candidate is invalid on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFit {
    pub tree: ExprTree,
    pub before: Option<FitReport>,
    pub after: Option<FitReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub best_index: usize,
    pub candidates: Vec<CandidateFit>,
}

impl Ranking {
    pub fn best(&self) -> &CandidateFit {
        &self.candidates[self.best_index]
    }

    /// Candidate indices sorted best first; invalid candidates are omitted.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.candidates.len())
            .filter(|&i| self.candidates[i].after.is_some())
            .collect();
        idx.sort_by(|&a, &b| compare(&self.candidates[a], a, &self.candidates[b], b));
        idx
    }
}

fn compare(a: &CandidateFit, ia: usize, b: &CandidateFit, ib: usize) -> Ordering {
    let (ma, mb) = (a.after.map_or(f64::INFINITY, |r| r.mse), b.after.map_or(f64::INFINITY, |r| r.mse));
    ma.total_cmp(&mb)
        .then(a.tree.node_count().cmp(&b.tree.node_count()))
        .then(ia.cmp(&ib))
}

/// Refines every candidate and picks the one with the lowest MSE, breaking
/// ties by node count and then by list position.
pub fn rank_candidates(cands: &[ExprTree], data: &Dataset) -> Result<Ranking, FitError> {
    if cands.is_empty() {
        return Err(FitError::NoCandidates);
    }
    let candidates: Vec<CandidateFit> = cands
        .iter()
        .map(|t| match FitReport::of(t, data) {
            Ok(before) => {
                let (tree, after) = refine_constants(t, data).expect("valid rows checked above");
                CandidateFit { tree, before: Some(before), after: Some(after) }
            }
            Err(_) => CandidateFit { tree: t.clone(), before: None, after: None },
        })
        .collect();
    let mut ranking = Ranking { best_index: 0, candidates };
    ranking.best_index = *ranking.order().first().ok_or(FitError::AllInvalid)?;
    Ok(ranking)
}
