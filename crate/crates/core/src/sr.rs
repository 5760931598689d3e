//! Candidate generation for symbolic regression and the per-coordinate fitting
//! pipeline: standardize, generate, refine, rank, and fold the scaling back
//! into the winning expression.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::expr::{BinaryOp, ExprTree, NamedConst, Node, UnaryOp, DEFAULT_MAX_NODES};
use crate::fit::{
    bfgs_minimize, penalized_objective, rank_candidates, BfgsOptions, Dataset, FitError, FitReport, Ranking,
    INVALID_ROW_PENALTY,
};

/// Minimum number of rows accepted by [`fit_dimension`].
pub const MIN_FIT_ROWS: usize = 20;
/// Fraction of rows on which a candidate must be valid.
pub const MIN_VALID_FRACTION: f64 = 0.9;

const EXPONENTS: [i32; 4] = [-2, -1, 2, 3];
const CLIP_BOUNDS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SrError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Relative sampling weight of every token. Zero disables a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenWeights {
    pub add: f64,
    pub sub: f64,
    pub mul: f64,
    pub div: f64,
    pub abs: f64,
    pub inv: f64,
    pub sqrt: f64,
    pub log: f64,
    pub exp: f64,
    pub sin: f64,
    pub cos: f64,
    pub asin: f64,
    pub acos: f64,
    pub tan: f64,
    pub atan: f64,
    pub clip: f64,
    pub trunc: f64,
    pub pow: f64,
    pub var: f64,
    pub constant: f64,
    /// The named constants `pi` and `e`.
    pub named: f64,
}

impl Default for TokenWeights {
    fn default() -> Self {
        TokenWeights {
            add: 4.0,
            sub: 2.0,
            mul: 4.0,
            div: 1.0,
            abs: 0.25,
            inv: 0.25,
            sqrt: 0.25,
            log: 0.25,
            exp: 0.25,
            sin: 1.5,
            cos: 1.5,
            asin: 0.1,
            acos: 0.1,
            tan: 0.25,
            atan: 0.25,
            clip: 3.0,
            trunc: 0.05,
            pow: 0.5,
            var: 3.0,
            constant: 1.0,
            named: 0.0,
        }
    }
}

impl TokenWeights {
    fn entries(&self) -> Vec<(f64, Token)> {
        use UnaryOp::*;
        vec![
            (self.add, Token::Binary(BinaryOp::Add)),
            (self.sub, Token::Binary(BinaryOp::Sub)),
            (self.mul, Token::Binary(BinaryOp::Mul)),
            (self.div, Token::Binary(BinaryOp::Div)),
            (self.abs, Token::Unary(Abs)),
            (self.inv, Token::Unary(Inv)),
            (self.sqrt, Token::Unary(Sqrt)),
            (self.log, Token::Unary(Log)),
            (self.exp, Token::Unary(Exp)),
            (self.sin, Token::Unary(Sin)),
            (self.cos, Token::Unary(Cos)),
            (self.asin, Token::Unary(Asin)),
            (self.acos, Token::Unary(Acos)),
            (self.tan, Token::Unary(Tan)),
            (self.atan, Token::Unary(Atan)),
            (self.clip, Token::Clip),
            (self.trunc, Token::Unary(Trunc)),
            (self.pow, Token::Pow),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
enum Token {
    Binary(BinaryOp),
    Unary(UnaryOp),
    Clip,
    Pow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub max_nodes: usize,
    pub n_candidates: usize,
    pub population: usize,
    pub generations: usize,
    /// Independent populations evolved one after another; candidates are
    /// drawn from all of them.
    pub islands: usize,
    pub tournament_size: usize,
    pub p_crossover: f64,
    pub p_mutate: f64,
    pub weights: TokenWeights,
    /// Probability that the root of a random tree is an operator; multiplied
    /// by `depth_decay` at every level below.
    pub op_prob: f64,
    pub depth_decay: f64,
    /// Individuals per generation whose constants are polished with BFGS.
    pub refine_top: usize,
    pub refine_iters: usize,
    /// Relative fitness penalty per node used in selection.
    pub parsimony: f64,
    /// Rows used per fit; larger datasets are subsampled.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            max_nodes: DEFAULT_MAX_NODES,
            n_candidates: 7,
            population: 500,
            generations: 60,
            islands: 4,
            tournament_size: 5,
            p_crossover: 0.7,
            p_mutate: 0.25,
            weights: TokenWeights::default(),
            op_prob: 0.9,
            depth_decay: 0.6,
            refine_top: 8,
            refine_iters: 30,
            parsimony: 0.0,
            max_rows: 400,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SrError> {
        let bad = |m: &str| Err(SrError::Config(m.to_string()));
        for (name, p) in [("p_crossover", self.p_crossover), ("p_mutate", self.p_mutate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.p_crossover + self.p_mutate > 1.0 {
            return bad("p_crossover + p_mutate must not exceed 1");
        }
        if self.n_candidates == 0 || self.population < self.n_candidates {
            return bad("need population >= n_candidates >= 1");
        }
        if self.max_nodes == 0 {
            return bad("max_nodes must be positive");
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.op_prob) || !(0.0..=1.0).contains(&self.depth_decay) {
            return bad("op_prob and depth_decay must be in [0, 1]");
        }
        if !(self.parsimony >= 0.0 && self.parsimony.is_finite()) {
            return bad("parsimony must be finite and non-negative");
        }
        if self.max_rows < MIN_FIT_ROWS {
            return bad(&format!("max_rows must be at least {MIN_FIT_ROWS}"));
        }
        let w = &self.weights;
        let all: Vec<f64> = w.entries().iter().map(|e| e.0).chain([w.var, w.constant, w.named]).collect();
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("token weights must be finite and non-negative");
        }
        if w.var + w.constant + w.named <= 0.0 {
            return bad("at least one leaf token needs positive weight");
        }
        Ok(())
    }
}

/// Per-dimension affine map of a closed interval onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub inputs: Vec<(f64, f64)>,
    pub target: (f64, f64),
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn to_unit(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        (x - mid) / half
    } else {
        0.0
    }
}

fn from_unit(z: f64, (lo, hi): (f64, f64)) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    mid + (half * z)
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Standardizer {
        Standardizer {
            inputs: data.columns().iter().map(|c| bounds(c)).collect(),
            target: bounds(data.targets()),
        }
    }

    pub fn standardize_input(&self, dim: usize, x: f64) -> f64 {
        to_unit(x, self.inputs[dim])
    }

    pub fn destandardize_input(&self, dim: usize, z: f64) -> f64 {
        from_unit(z, self.inputs[dim])
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        to_unit(y, self.target)
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        from_unit(z, self.target)
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let cols = data
            .columns()
            .iter()
            .enumerate()
            .map(|(i, c)| c.iter().map(|&x| self.standardize_input(i, x)).collect())
            .collect();
        let y = data.targets().iter().map(|&y| self.standardize_target(y)).collect();
        Dataset::from_columns(cols, y).expect("affine image of a valid dataset")
    }

    /// Rewrites a tree over standardized inputs/outputs into one over
    /// original units. Applies the same operations as the standardizing
    /// functions so the two paths agree to rounding.
    pub fn compose(&self, tree: &ExprTree) -> ExprTree {
        let inner = tree.substitute_vars(|i| {
            let (lo, hi) = self.inputs[i];
            if hi > lo {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                ExprTree::var(i).sub(ExprTree::constant(mid)).div(ExprTree::constant(half))
            } else {
                ExprTree::constant(0.0)
            }
        });
        let (lo, hi) = self.target;
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        ExprTree::constant(mid).add(ExprTree::constant(half).mul(inner))
    }
}

/// Source of candidate expressions for a dataset.
pub trait ExpressionGenerator {
    /// Returns `n` candidates that validate for `data.dim()` and are valid on
    /// at least 90% of the rows.
    fn generate(&self, data: &Dataset, n: usize, rng: &mut dyn RngCore) -> Vec<ExprTree>;
}

/// Samples a random expression by recursive weighted token choice.
pub fn sample_random_expr<R: Rng + ?Sized>(cfg: &GeneratorConfig, d: usize, rng: &mut R) -> ExprTree {
    sample_bounded(cfg, d, cfg.max_nodes, rng)
}

fn sample_bounded<R: Rng + ?Sized>(cfg: &GeneratorConfig, d: usize, max_nodes: usize, rng: &mut R) -> ExprTree {
    assert!(d >= 1, "need at least one input");
    let ops = cfg.weights.entries();
    let op_total: f64 = ops.iter().map(|e| e.0).sum();
    loop {
        let mut nodes = Vec::new();
        if grow(cfg, d, &ops, op_total, 0, max_nodes, &mut nodes, rng) {
            return ExprTree::from_nodes(nodes);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn grow<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    d: usize,
    ops: &[(f64, Token)],
    op_total: f64,
    depth: i32,
    max_nodes: usize,
    out: &mut Vec<Node>,
    rng: &mut R,
) -> bool {
    if out.len() >= max_nodes {
        return false;
    }
    let p_op = cfg.op_prob * cfg.depth_decay.powi(depth);
    if op_total > 0.0 && max_nodes > 1 && rng.random::<f64>() < p_op {
        let mut r = rng.random::<f64>() * op_total;
        let mut tok = ops[0].1;
        for &(w, t) in ops {
            if r < w {
                tok = t;
                break;
            }
            r -= w;
        }
        match tok {
            Token::Binary(op) => {
                out.push(Node::Binary(op));
                grow(cfg, d, ops, op_total, depth + 1, max_nodes, out, rng)
                    && grow(cfg, d, ops, op_total, depth + 1, max_nodes, out, rng)
            }
            Token::Unary(op) => {
                out.push(Node::Unary(op));
                grow(cfg, d, ops, op_total, depth + 1, max_nodes, out, rng)
            }
            Token::Clip => {
                out.push(Node::Unary(UnaryOp::Clip(CLIP_BOUNDS[rng.random_range(0..CLIP_BOUNDS.len())])));
                grow(cfg, d, ops, op_total, depth + 1, max_nodes, out, rng)
            }
            Token::Pow => {
                out.push(Node::Unary(UnaryOp::Pow(EXPONENTS[rng.random_range(0..EXPONENTS.len())])));
                grow(cfg, d, ops, op_total, depth + 1, max_nodes, out, rng)
            }
        }
    } else {
        out.push(random_leaf(cfg, d, rng));
        true
    }
}

fn random_leaf<R: Rng + ?Sized>(cfg: &GeneratorConfig, d: usize, rng: &mut R) -> Node {
    let w = &cfg.weights;
    let r = rng.random::<f64>() * (w.var + w.constant + w.named);
    if r < w.var {
        Node::Var(rng.random_range(0..d))
    } else if r < w.var + w.constant {
        Node::Const(rng.sample(StandardNormal))
    } else if rng.random_bool(0.5) {
        Node::Named(NamedConst::Pi)
    } else {
        Node::Named(NamedConst::E)
    }
}

/// Fraction of rows on which `pred` is valid.
fn valid_fraction(pred: &[f64]) -> f64 {
    pred.iter().filter(|v| !v.is_nan()).count() as f64 / pred.len() as f64
}

/// Best affine rescaling `a + b * f` of predictions onto `y` over valid rows,
/// and the resulting penalized MSE.
fn linear_scaling(pred: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mut m = 0usize;
    let (mut sf, mut sy) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(y) {
        if !p.is_nan() {
            m += 1;
            sf += p;
            sy += t;
        }
    }
    if m == 0 {
        return (0.0, 0.0, INVALID_ROW_PENALTY);
    }
    let (mf, my) = (sf / m as f64, sy / m as f64);
    let (mut sff, mut sfy) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(y) {
        if !p.is_nan() {
            sff += (p - mf) * (p - mf);
            sfy += (p - mf) * (t - my);
        }
    }
    let b = if sff > 1e-12 * m as f64 { sfy / sff } else { 0.0 };
    let a = my - b * mf;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(y) {
        total += if p.is_nan() {
            INVALID_ROW_PENALTY
        } else {
            let e = a + b * p - t;
            e * e
        };
    }
    let fit = total / n;
    if fit.is_finite() {
        (a, b, fit)
    } else {
        (0.0, 0.0, INVALID_ROW_PENALTY)
    }
}

fn scaled(tree: &ExprTree, a: f64, b: f64) -> ExprTree {
    ExprTree::constant(a).add(ExprTree::constant(b).mul(tree.clone()))
}

/// Fitness at which a search stops early.
const EXACT_FIT: f64 = 1e-20;

/// Room taken by the `a + b * f` wrapper.
const SCALING_NODES: usize = 4;

#[derive(Debug, Clone)]
struct Individual {
    tree: ExprTree,
    fitness: f64,
    /// Fitness inflated by the size penalty; drives selection.
    score: f64,
    a: f64,
    b: f64,
}

impl Individual {
    fn better_than(&self, other: &Individual) -> bool {
        self.rank_cmp(other).is_lt()
    }

    fn rank_cmp(&self, other: &Individual) -> std::cmp::Ordering {
        self.score.total_cmp(&other.score).then(self.tree.node_count().cmp(&other.tree.node_count()))
    }

    fn scaled(&self) -> ExprTree {
        scaled(&self.tree, self.a, self.b)
    }
}

/// Evaluates a tree; `None` when it is invalid on too many rows.
fn assess(tree: ExprTree, cols: &[&[f64]], y: &[f64], parsimony: f64) -> Option<Individual> {
    let pred = tree.eval_columns(cols, y.len());
    if valid_fraction(&pred) < MIN_VALID_FRACTION {
        return None;
    }
    let (a, b, fitness) = linear_scaling(&pred, y);
    let score = fitness * (1.0 + parsimony * tree.node_count() as f64);
    Some(Individual { tree, fitness, score, a, b })
}

/// Genetic programming with linearly scaled fitness and BFGS polishing of
/// the leading individuals' constants.
#[derive(Debug, Clone, Default)]
pub struct GpGenerator {
    pub cfg: GeneratorConfig,
}

impl GpGenerator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        GpGenerator { cfg }
    }

    fn budget(&self) -> usize {
        self.cfg.max_nodes.saturating_sub(SCALING_NODES).max(1)
    }

    fn fresh<R: Rng + ?Sized>(&self, cols: &[&[f64]], y: &[f64], rng: &mut R) -> Individual {
        for _ in 0..1000 {
            let t = sample_bounded(&self.cfg, cols.len(), self.budget(), rng);
            if let Some(ind) = assess(t, cols, y, self.cfg.parsimony) {
                return ind;
            }
        }
        // a bare variable is valid on every finite row
        assess(ExprTree::var(rng.random_range(0..cols.len())), cols, y, self.cfg.parsimony).expect("variables are always valid")
    }

    /// Keeps `t` if it is small enough and valid enough, otherwise draws a
    /// replacement.
    fn admit<R: Rng + ?Sized>(&self, t: ExprTree, cols: &[&[f64]], y: &[f64], rng: &mut R) -> Individual {
        if t.node_count() <= self.budget() {
            if let Some(ind) = assess(t, cols, y, self.cfg.parsimony) {
                return ind;
            }
        }
        self.fresh(cols, y, rng)
    }

    fn tournament<'a, R: Rng + ?Sized>(&self, pop: &'a [Individual], rng: &mut R) -> &'a Individual {
        let mut best = &pop[rng.random_range(0..pop.len())];
        for _ in 1..self.cfg.tournament_size {
            let c = &pop[rng.random_range(0..pop.len())];
            if c.better_than(best) {
                best = c;
            }
        }
        best
    }

    fn crossover<R: Rng + ?Sized>(&self, a: &ExprTree, b: &ExprTree, rng: &mut R) -> ExprTree {
        let budget = self.budget();
        for _ in 0..8 {
            let pa = rng.random_range(0..a.node_count());
            let pb = rng.random_range(0..b.node_count());
            let child = a.replace_subtree(pa, &b.subtree(pb));
            if child.node_count() <= budget {
                return child;
            }
        }
        a.clone()
    }

    /// Weighted choice among the tokens selected by `keep`.
    fn pick_token<R: Rng + ?Sized>(&self, keep: impl Fn(&Token) -> bool, rng: &mut R) -> Option<Node> {
        let ops: Vec<(f64, Token)> = self.cfg.weights.entries().into_iter().filter(|e| keep(&e.1)).collect();
        let total: f64 = ops.iter().map(|e| e.0).sum();
        if total <= 0.0 {
            return None;
        }
        let mut r = rng.random::<f64>() * total;
        let mut tok = ops[0].1;
        for &(w, t) in &ops {
            if r < w {
                tok = t;
                break;
            }
            r -= w;
        }
        Some(match tok {
            Token::Binary(op) => Node::Binary(op),
            Token::Unary(op) => Node::Unary(op),
            Token::Clip => Node::Unary(UnaryOp::Clip(CLIP_BOUNDS[rng.random_range(0..CLIP_BOUNDS.len())])),
            Token::Pow => Node::Unary(UnaryOp::Pow(EXPONENTS[rng.random_range(0..EXPONENTS.len())])),
        })
    }

    /// Subtree replacement, point mutation, insertion of an operator above a
    /// random node, or lifting the scaled individual under a unary operator,
    /// with equal probability.
    fn mutate<R: Rng + ?Sized>(&self, ind: &Individual, d: usize, rng: &mut R) -> ExprTree {
        let t = &ind.tree;
        let pos = rng.random_range(0..t.node_count());
        let is_binary = |tok: &Token| matches!(tok, Token::Binary(_));
        match rng.random_range(0..4) {
            0 => {
                let room = self.budget().saturating_sub(t.node_count() - t.subtree(pos).node_count()).clamp(1, 15);
                t.replace_subtree(pos, &sample_bounded(&self.cfg, d, room, rng))
            }
            1 => {
                let mut nodes = t.nodes().to_vec();
                nodes[pos] = match nodes[pos] {
                    Node::Const(c) => Node::Const(c + 0.5 * rng.sample::<f64, _>(StandardNormal)),
                    Node::Var(_) | Node::Named(_) => random_leaf(&self.cfg, d, rng),
                    Node::Binary(op) => self.pick_token(is_binary, rng).unwrap_or(Node::Binary(op)),
                    n @ Node::Unary(_) => self.pick_token(|k| !is_binary(k), rng).unwrap_or(n),
                };
                ExprTree::from_nodes(nodes)
            }
            2 => match self.pick_token(|k| !is_binary(k), rng) {
                // the argument is already in target units, so bounded
                // operators such as clip act where the data saturates
                Some(Node::Unary(op)) => ExprTree::unary(op, ind.scaled()),
                _ => t.clone(),
            },
            _ => {
                let sub = t.subtree(pos);
                let wrapped = if rng.random_bool(0.5) {
                    match self.pick_token(|k| !is_binary(k), rng) {
                        Some(Node::Unary(op)) => ExprTree::unary(op, sub),
                        _ => return t.clone(),
                    }
                } else {
                    let leaf = ExprTree::from_nodes(vec![random_leaf(&self.cfg, d, rng)]);
                    match self.pick_token(is_binary, rng) {
                        Some(Node::Binary(op)) if rng.random_bool(0.5) => ExprTree::binary(op, sub, leaf),
                        Some(Node::Binary(op)) => ExprTree::binary(op, leaf, sub),
                        _ => return t.clone(),
                    }
                };
                t.replace_subtree(pos, &wrapped)
            }
        }
    }

    /// Improves constants of `ind` in place with a short BFGS run on the
    /// linearly scaled objective.
    fn polish(&self, ind: &mut Individual, cols: &[&[f64]], y: &[f64]) {
        if ind.tree.constant_count() == 0 || self.cfg.refine_iters == 0 {
            return;
        }
        let mut work = ind.scaled();
        let c0 = work.constants();
        let opts = BfgsOptions { max_iters: self.cfg.refine_iters, ..BfgsOptions::default() };
        let res = bfgs_minimize(
            |c| {
                work.set_constants(c);
                penalized_objective(&work, cols, y)
            },
            &c0,
            &opts,
        );
        let mut tree = ind.tree.clone();
        tree.set_constants(&res.x[2..]);
        if let Some(cand) = assess(tree, cols, y, self.cfg.parsimony) {
            if cand.score < ind.score {
                *ind = cand;
            }
        }
    }

    /// Evolves a population on `data` and returns it sorted best first.
    fn evolve(&self, data: &Dataset, rng: &mut dyn RngCore) -> Vec<Individual> {
        let cfg = &self.cfg;
        let cols = data.column_refs();
        let y = data.targets();
        let d = data.dim();
        let mut pop: Vec<Individual> = (0..d)
            .filter_map(|i| assess(ExprTree::var(i), &cols, y, cfg.parsimony))
            .take(cfg.population)
            .collect();
        while pop.len() < cfg.population {
            pop.push(self.fresh(&cols, y, rng));
        }
        sort_population(&mut pop);
        self.polish_leaders(&mut pop, &cols, y);
        for _ in 0..cfg.generations {
            if pop[0].fitness <= EXACT_FIT {
                break;
            }
            let mut next = Vec::with_capacity(cfg.population);
            next.push(pop[0].clone());
            while next.len() < cfg.population {
                let r: f64 = rng.random();
                let parent = self.tournament(&pop, rng);
                let child = if r < cfg.p_crossover {
                    let other = self.tournament(&pop, rng);
                    self.crossover(&parent.tree, &other.tree, rng)
                } else if r < cfg.p_crossover + cfg.p_mutate {
                    self.mutate(parent, d, rng)
                } else {
                    next.push(parent.clone());
                    continue;
                };
                next.push(self.admit(child, &cols, y, rng));
            }
            pop = next;
            sort_population(&mut pop);
            self.polish_leaders(&mut pop, &cols, y);
        }
        pop
    }

    fn polish_leaders(&self, pop: &mut [Individual], cols: &[&[f64]], y: &[f64]) {
        let mut seen: Vec<String> = Vec::new();
        for ind in pop.iter_mut() {
            if seen.len() >= self.cfg.refine_top {
                break;
            }
            let key = ind.tree.structure_key();
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            self.polish(ind, cols, y);
        }
        sort_population(pop);
    }
}

fn sort_population(pop: &mut [Individual]) {
    pop.sort_by(|a, b| a.rank_cmp(b));
}

/// The best `n` individuals with distinct structure; short lists are padded
/// with duplicates so exactly `n` trees are returned.
fn distinct_heads(pop: &[Individual], n: usize) -> Vec<ExprTree> {
    let mut keys = Vec::new();
    let mut out = Vec::new();
    for ind in pop {
        let key = ind.tree.structure_key();
        if !keys.contains(&key) {
            keys.push(key);
            out.push(ind.scaled());
            if out.len() == n {
                return out;
            }
        }
    }
    let mut i = 0;
    while out.len() < n {
        out.push(pop[i % pop.len()].scaled());
        i += 1;
    }
    out
}

impl ExpressionGenerator for GpGenerator {
    fn generate(&self, data: &Dataset, n: usize, rng: &mut dyn RngCore) -> Vec<ExprTree> {
        let mut pop = Vec::new();
        for _ in 0..self.cfg.islands.max(1) {
            let island = self.evolve(data, rng);
            let solved = island[0].fitness <= EXACT_FIT;
            pop.extend(island);
            if solved {
                break;
            }
        }
        sort_population(&mut pop);
        distinct_heads(&pop, n)
    }
}

/// Draws a pool of random expressions and returns the `n` with the lowest
/// raw MSE. Constants are left as sampled.
#[derive(Debug, Clone)]
pub struct RandomGenerator {
    pub cfg: GeneratorConfig,
    pub pool: usize,
}

impl RandomGenerator {
    pub fn new(cfg: GeneratorConfig, pool: usize) -> Self {
        RandomGenerator { cfg, pool }
    }
}

impl ExpressionGenerator for RandomGenerator {
    fn generate(&self, data: &Dataset, n: usize, rng: &mut dyn RngCore) -> Vec<ExprTree> {
        let cols = data.column_refs();
        let y = data.targets();
        let mut scored: Vec<(f64, ExprTree)> = Vec::with_capacity(self.pool.max(n));
        let mut keys = Vec::new();
        let mut attempts = 0;
        while scored.len() < self.pool.max(n) {
            attempts += 1;
            let t = sample_random_expr(&self.cfg, data.dim(), rng);
            let pred = t.eval_columns(&cols, y.len());
            if valid_fraction(&pred) < MIN_VALID_FRACTION {
                continue;
            }
            let key = t.structure_key();
            if keys.contains(&key) && attempts < 100 * self.pool.max(n) {
                continue;
            }
            keys.push(key);
            let rep = FitReport::from_predictions(&pred, y).map(|r| r.mse).unwrap_or(f64::INFINITY);
            scored.push((rep, t));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.node_count().cmp(&b.1.node_count())));
        scored.into_iter().take(n).map(|(_, t)| t).collect()
    }
}

/// Outcome of fitting one output coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionFit {
    /// Winning expression over original-unit inputs and outputs.
    pub tree: ExprTree,
    /// Held-out quality in original units.
    pub report: FitReport,
    /// Candidate refinement details on the standardized training split.
    pub ranking: Option<Ranking>,
    pub standardizer: Standardizer,
}

/// Runs the full pipeline for one output coordinate. Rows are shuffled and
/// split 80/20; the training part is capped at `max_rows` rows.
pub fn fit_dimension(
    data: &Dataset,
    gen: &dyn ExpressionGenerator,
    n_candidates: usize,
    max_rows: usize,
    seed: u64,
) -> Result<DimensionFit, SrError> {
    if data.len() < MIN_FIT_ROWS {
        return Err(SrError::TooFewRows { need: MIN_FIT_ROWS, got: data.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let n_test = (data.len() / 5).max(1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let train = data.subset(&train_idx[..train_idx.len().min(max_rows)]);
    let test = data.subset(test_idx);

    let standardizer = Standardizer::fit(&train);
    let (tree, ranking) = if standardizer.target.1 > standardizer.target.0 {
        let unit = standardizer.apply(&train);
        let cands = gen.generate(&unit, n_candidates, &mut rng);
        let ranking = rank_candidates(&cands, &unit)?;
        (standardizer.compose(&ranking.best().tree), Some(ranking))
    } else {
        (ExprTree::constant(standardizer.target.0), None)
    };
    let report = FitReport::of(&tree, &test)?;
    Ok(DimensionFit { tree, report, ranking, standardizer })
}
