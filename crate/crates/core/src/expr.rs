//! Expression trees over a fixed token vocabulary.
//!
//! A tree is stored as a flat vector of nodes in prefix order, so every
//! subtree occupies a contiguous range. This keeps crossover and mutation
//! cheap and lets evaluation run as a stack machine over the reversed node
//! list, either for a single point or column-wise over a whole dataset.
//!
//! Evaluation never produces NaN or infinities silently: any domain violation
//! or non-finite intermediate yields [`Invalid`].

use std::fmt;

use ndarray::ArrayView2;

/// Node budget used when no explicit limit is given.
pub const DEFAULT_MAX_NODES: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    #[inline]
    pub fn apply(self, l: f64, r: f64) -> f64 {
        match self {
            BinaryOp::Add => l + r,
            BinaryOp::Sub => l - r,
            BinaryOp::Mul => l * r,
            BinaryOp::Div => l / r,
        }
    }

    /// Partial derivatives with respect to the left and right operand.
    #[inline]
    pub fn partials(self, l: f64, r: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (r, l),
            BinaryOp::Div => (1.0 / r, -l / (r * r)),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

/// Unary functions. `Clip` and `Pow` carry a structural parameter that is not
/// part of the fitted constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Abs,
    Inv,
    Sqrt,
    Log,
    Exp,
    Sin,
    Cos,
    Asin,
    Acos,
    Tan,
    Atan,
    /// Symmetric clamp to `[-c, c]`.
    Clip(f64),
    /// Rounding toward zero.
    Trunc,
    /// Integer power, exponent in `[-4, 4] \ {0}`.
    Pow(i32),
}

impl UnaryOp {
    /// Parameter-free unary functions, in a fixed order.
    pub const SIMPLE: [UnaryOp; 12] = [
        UnaryOp::Abs,
        UnaryOp::Inv,
        UnaryOp::Sqrt,
        UnaryOp::Log,
        UnaryOp::Exp,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Asin,
        UnaryOp::Acos,
        UnaryOp::Tan,
        UnaryOp::Atan,
        UnaryOp::Trunc,
    ];

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            UnaryOp::Abs => v.abs(),
            UnaryOp::Inv => 1.0 / v,
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Asin => v.asin(),
            UnaryOp::Acos => v.acos(),
            UnaryOp::Tan => v.tan(),
            UnaryOp::Atan => v.atan(),
            // f64::max/min swallow NaN, so propagate it explicitly.
            UnaryOp::Clip(c) => {
                if v.is_nan() {
                    v
                } else {
                    v.max(-c).min(c)
                }
            }
            UnaryOp::Trunc => v.trunc(),
            UnaryOp::Pow(k) => v.powi(k),
        }
    }

    /// Derivative with respect to the argument, evaluated at the argument.
    /// Kinks use the conventions sign(0) = 0, clip' = 1 strictly inside the
    /// band and 0 elsewhere, trunc' = 0.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            UnaryOp::Abs => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Inv => -1.0 / (v * v),
            UnaryOp::Sqrt => 0.5 / v.sqrt(),
            UnaryOp::Log => 1.0 / v,
            UnaryOp::Exp => v.exp(),
            UnaryOp::Sin => v.cos(),
            UnaryOp::Cos => -v.sin(),
            UnaryOp::Asin => 1.0 / (1.0 - v * v).sqrt(),
            UnaryOp::Acos => -1.0 / (1.0 - v * v).sqrt(),
            UnaryOp::Tan => {
                let t = v.tan();
                1.0 + t * t
            }
            UnaryOp::Atan => 1.0 / (1.0 + v * v),
            UnaryOp::Clip(c) => {
                if v.abs() < c {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Trunc => 0.0,
            UnaryOp::Pow(k) => f64::from(k) * v.powi(k - 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Abs => "abs",
            UnaryOp::Inv => "inv",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Asin => "asin",
            UnaryOp::Acos => "acos",
            UnaryOp::Tan => "tan",
            UnaryOp::Atan => "atan",
            UnaryOp::Clip(_) => "clip",
            UnaryOp::Trunc => "trunc",
            UnaryOp::Pow(_) => "pow",
        }
    }

    fn from_name(name: &str) -> Option<UnaryOp> {
        UnaryOp::SIMPLE.iter().copied().find(|op| op.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NamedConst {
    E,
    Pi,
}

impl NamedConst {
    pub fn value(self) -> f64 {
        match self {
            NamedConst::E => std::f64::consts::E,
            NamedConst::Pi => std::f64::consts::PI,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NamedConst::E => "e",
            NamedConst::Pi => "pi",
        }
    }
}

/// One token of an expression tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Binary(BinaryOp),
    Unary(UnaryOp),
    /// Input variable by index.
    Var(usize),
    /// Fitted numeric constant.
    Const(f64),
    Named(NamedConst),
}

impl Node {
    #[inline]
    pub fn arity(&self) -> usize {
        match self {
            Node::Binary(_) => 2,
            Node::Unary(_) => 1,
            _ => 0,
        }
    }
}

/// Marker for a point at which an expression cannot be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("expression cannot be evaluated at this point")]
pub struct Invalid;

pub type EvalResult = Result<f64, Invalid>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("empty expression")]
    Empty,
    #[error("node {pos} is missing children")]
    Arity { pos: usize },
    #[error("unexpected node at position {pos} after a complete tree")]
    Trailing { pos: usize },
    #[error("variable index {index} at node {pos} is out of range for input dimension {dim}")]
    VarIndex { pos: usize, index: usize, dim: usize },
    #[error("node {pos} has an invalid parameter: {reason}")]
    Parameter { pos: usize, reason: &'static str },
    #[error("{count} nodes exceed the budget of {max}")]
    TooLarge { count: usize, max: usize },
}

/// An expression tree in prefix order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    nodes: Vec<Node>,
}

impl ExprTree {
    /// Wraps a prefix node list without checking it; call [`ExprTree::validate`]
    /// before evaluating trees built this way.
    pub fn from_nodes(nodes: Vec<Node>) -> Self {
        ExprTree { nodes }
    }

    pub fn var(index: usize) -> Self {
        ExprTree { nodes: vec![Node::Var(index)] }
    }

    pub fn constant(value: f64) -> Self {
        ExprTree { nodes: vec![Node::Const(value)] }
    }

    pub fn named(c: NamedConst) -> Self {
        ExprTree { nodes: vec![Node::Named(c)] }
    }

    pub fn unary(op: UnaryOp, arg: ExprTree) -> Self {
        let mut nodes = Vec::with_capacity(arg.nodes.len() + 1);
        nodes.push(Node::Unary(op));
        nodes.extend(arg.nodes);
        ExprTree { nodes }
    }

    pub fn binary(op: BinaryOp, left: ExprTree, right: ExprTree) -> Self {
        let mut nodes = Vec::with_capacity(left.nodes.len() + right.nodes.len() + 1);
        nodes.push(Node::Binary(op));
        nodes.extend(left.nodes);
        nodes.extend(right.nodes);
        ExprTree { nodes }
    }

    pub fn add(self, rhs: ExprTree) -> Self {
        ExprTree::binary(BinaryOp::Add, self, rhs)
    }

    pub fn sub(self, rhs: ExprTree) -> Self {
        ExprTree::binary(BinaryOp::Sub, self, rhs)
    }

    pub fn mul(self, rhs: ExprTree) -> Self {
        ExprTree::binary(BinaryOp::Mul, self, rhs)
    }

    pub fn div(self, rhs: ExprTree) -> Self {
        ExprTree::binary(BinaryOp::Div, self, rhs)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self, dim: usize) -> Result<(), Violation> {
        self.validate_with(dim, DEFAULT_MAX_NODES)
    }

    /// Checks arity, variable bounds, structural parameters, finiteness of
    /// constants and the node budget, returning the first violation.
    pub fn validate_with(&self, dim: usize, max_nodes: usize) -> Result<(), Violation> {
        if self.nodes.is_empty() {
            return Err(Violation::Empty);
        }
        // (position, open child slots)
        let mut open: Vec<(usize, usize)> = Vec::new();
        for (pos, node) in self.nodes.iter().enumerate() {
            if pos > 0 {
                match open.last_mut() {
                    None => return Err(Violation::Trailing { pos }),
                    Some(top) => {
                        top.1 -= 1;
                        if top.1 == 0 {
                            open.pop();
                        }
                    }
                }
            }
            match *node {
                Node::Var(index) if index >= dim => {
                    return Err(Violation::VarIndex { pos, index, dim });
                }
                Node::Const(c) if !c.is_finite() => {
                    return Err(Violation::Parameter { pos, reason: "constant is not finite" });
                }
                Node::Unary(UnaryOp::Clip(c)) if !(c.is_finite() && c > 0.0) => {
                    return Err(Violation::Parameter { pos, reason: "clip bound must be positive" });
                }
                Node::Unary(UnaryOp::Pow(k)) if k == 0 || !(-4..=4).contains(&k) => {
                    return Err(Violation::Parameter {
                        pos,
                        reason: "exponent must be a nonzero integer in [-4, 4]",
                    });
                }
                _ => {}
            }
            let arity = node.arity();
            if arity > 0 {
                open.push((pos, arity));
            }
        }
        if let Some(&(pos, _)) = open.last() {
            return Err(Violation::Arity { pos });
        }
        if self.nodes.len() > max_nodes {
            return Err(Violation::TooLarge { count: self.nodes.len(), max: max_nodes });
        }
        Ok(())
    }

    /// Evaluates the tree at a single point.
    pub fn evaluate(&self, x: &[f64]) -> EvalResult {
        let mut stack: Vec<f64> = Vec::with_capacity(16);
        for node in self.nodes.iter().rev() {
            let v = match *node {
                Node::Var(i) => x[i],
                Node::Const(c) => c,
                Node::Named(c) => c.value(),
                Node::Unary(op) => {
                    let a = stack.pop().ok_or(Invalid)?;
                    op.apply(a)
                }
                Node::Binary(op) => {
                    let l = stack.pop().ok_or(Invalid)?;
                    let r = stack.pop().ok_or(Invalid)?;
                    op.apply(l, r)
                }
            };
            if !v.is_finite() {
                return Err(Invalid);
            }
            stack.push(v);
        }
        stack.pop().ok_or(Invalid)
    }

    /// Evaluates every row of `x` (n × d).
    pub fn evaluate_batch(&self, x: ArrayView2<'_, f64>) -> Vec<EvalResult> {
        let cols = columns_of(x);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        self.eval_columns(&refs, x.nrows())
            .into_iter()
            .map(|v| if v.is_nan() { Err(Invalid) } else { Ok(v) })
            .collect()
    }

    /// Column-wise evaluation; invalid rows are reported as NaN.
    pub fn eval_columns(&self, cols: &[&[f64]], n: usize) -> Vec<f64> {
        let mut stack: Vec<Vec<f64>> = Vec::with_capacity(16);
        let mut pool: Vec<Vec<f64>> = Vec::new();
        for node in self.nodes.iter().rev() {
            let out = match *node {
                Node::Var(i) => {
                    let mut buf = take_buf(&mut pool, n);
                    buf.copy_from_slice(&cols[i][..n]);
                    for v in buf.iter_mut() {
                        if !v.is_finite() {
                            *v = f64::NAN;
                        }
                    }
                    buf
                }
                Node::Const(c) => {
                    let mut buf = take_buf(&mut pool, n);
                    buf.fill(c);
                    buf
                }
                Node::Named(c) => {
                    let mut buf = take_buf(&mut pool, n);
                    buf.fill(c.value());
                    buf
                }
                Node::Unary(op) => {
                    let mut a = stack.pop().expect("validated tree");
                    for v in a.iter_mut() {
                        *v = finite_or_nan(op.apply(*v));
                    }
                    a
                }
                Node::Binary(op) => {
                    let mut l = stack.pop().expect("validated tree");
                    let r = stack.pop().expect("validated tree");
                    for (a, b) in l.iter_mut().zip(r.iter()) {
                        *a = finite_or_nan(op.apply(*a, *b));
                    }
                    pool.push(r);
                    l
                }
            };
            stack.push(out);
        }
        stack.pop().expect("validated tree")
    }

    /// Fitted constants in depth-first, left-to-right order. Clip bounds and
    /// integer exponents are structural and not included.
    pub fn constants(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Const(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn constant_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Const(_))).count()
    }

    /// Overwrites the constant slots in order.
    ///
    /// # Panics
    /// If `values` does not have one entry per constant slot.
    pub fn set_constants(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for node in self.nodes.iter_mut() {
            if let Node::Const(c) = node {
                *c = *it.next().expect("too few constant values");
            }
        }
        assert!(it.next().is_none(), "too many constant values");
    }

    /// Exclusive end index of the subtree rooted at every position.
    pub fn subtree_ends(&self) -> Vec<usize> {
        let mut ends = vec![0; self.nodes.len()];
        let mut stack: Vec<usize> = Vec::with_capacity(16);
        for (pos, node) in self.nodes.iter().enumerate().rev() {
            let end = match node.arity() {
                0 => pos + 1,
                1 => stack.pop().expect("validated tree"),
                _ => {
                    let _left = stack.pop().expect("validated tree");
                    stack.pop().expect("validated tree")
                }
            };
            ends[pos] = end;
            stack.push(end);
        }
        ends
    }

    pub fn subtree(&self, pos: usize) -> ExprTree {
        let end = self.subtree_ends()[pos];
        ExprTree { nodes: self.nodes[pos..end].to_vec() }
    }

    /// Returns a copy with the subtree at `pos` replaced by `replacement`.
    pub fn replace_subtree(&self, pos: usize, replacement: &ExprTree) -> ExprTree {
        let end = self.subtree_ends()[pos];
        let mut nodes = Vec::with_capacity(self.nodes.len() - (end - pos) + replacement.nodes.len());
        nodes.extend_from_slice(&self.nodes[..pos]);
        nodes.extend_from_slice(&replacement.nodes);
        nodes.extend_from_slice(&self.nodes[end..]);
        ExprTree { nodes }
    }

    /// Replaces every variable node with the tree produced by `f`.
    pub fn substitute_vars(&self, f: impl Fn(usize) -> ExprTree) -> ExprTree {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            match *node {
                Node::Var(i) => nodes.extend(f(i).nodes),
                other => nodes.push(other),
            }
        }
        ExprTree { nodes }
    }

    /// Gradient of the value with respect to the constant slots at one point.
    pub fn grad_constants(&self, x: &[f64]) -> Result<Vec<f64>, Invalid> {
        let cols: Vec<[f64; 1]> = x.iter().map(|&v| [v]).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let trace = self.forward_trace(&refs, 1);
        if trace[0][0].is_nan() {
            return Err(Invalid);
        }
        Ok(self.backward_constants(&trace, &[1.0]))
    }

    /// Per-node values for every row. Row `r` of node 0 is the output.
    pub fn forward_trace(&self, cols: &[&[f64]], n: usize) -> Vec<Vec<f64>> {
        let len = self.nodes.len();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); len];
        let ends = self.subtree_ends();
        for pos in (0..len).rev() {
            let out: Vec<f64> = match self.nodes[pos] {
                Node::Var(i) => cols[i][..n].iter().map(|&v| finite_or_nan(v)).collect(),
                Node::Const(c) => vec![c; n],
                Node::Named(c) => vec![c.value(); n],
                Node::Unary(op) => values[pos + 1].iter().map(|&v| finite_or_nan(op.apply(v))).collect(),
                Node::Binary(op) => {
                    let l = &values[pos + 1];
                    let r = &values[ends[pos + 1]];
                    l.iter().zip(r).map(|(&a, &b)| finite_or_nan(op.apply(a, b))).collect()
                }
            };
            values[pos] = out;
        }
        values
    }

    /// Reverse pass over a trace: sums `root_adjoint[r] * d out[r] / d c_j`
    /// over rows for every constant slot `j`. Rows with zero adjoint are
    /// skipped, so invalid rows must be given a zero adjoint.
    pub fn backward_constants(&self, trace: &[Vec<f64>], root_adjoint: &[f64]) -> Vec<f64> {
        let len = self.nodes.len();
        let n = root_adjoint.len();
        let ends = self.subtree_ends();
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); len];
        adj[0] = root_adjoint.to_vec();
        let mut grads = Vec::new();
        for pos in 0..len {
            let a = std::mem::take(&mut adj[pos]);
            match self.nodes[pos] {
                Node::Const(_) => grads.push(a.iter().sum()),
                Node::Var(_) | Node::Named(_) => {}
                Node::Unary(op) => {
                    let child = &trace[pos + 1];
                    adj[pos + 1] = (0..n)
                        .map(|r| if a[r] == 0.0 { 0.0 } else { a[r] * op.derivative(child[r]) })
                        .collect();
                }
                Node::Binary(op) => {
                    let li = pos + 1;
                    let ri = ends[li];
                    let (lv, rv) = (&trace[li], &trace[ri]);
                    let mut la = vec![0.0; n];
                    let mut ra = vec![0.0; n];
                    for r in 0..n {
                        if a[r] != 0.0 {
                            let (dl, dr) = op.partials(lv[r], rv[r]);
                            la[r] = a[r] * dl;
                            ra[r] = a[r] * dr;
                        }
                    }
                    adj[li] = la;
                    adj[ri] = ra;
                }
            }
        }
        grads
    }

    /// Renders the tree with the given variable names instead of `x0, x1, ...`.
    pub fn display_with<'a>(&'a self, names: &'a [&'a str]) -> impl fmt::Display + 'a {
        Named { tree: self, names: Some(names) }
    }

    /// Structure key ignoring constant values; used to deduplicate candidates.
    pub fn structure_key(&self) -> String {
        let mut t = self.clone();
        let zeros = vec![0.0; t.constant_count()];
        t.set_constants(&zeros);
        t.to_string()
    }

    /// Bitwise equality including the sign of zero constants.
    pub fn bit_eq(&self, other: &ExprTree) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| match (a, b) {
                (Node::Const(x), Node::Const(y)) => x.to_bits() == y.to_bits(),
                (Node::Unary(UnaryOp::Clip(x)), Node::Unary(UnaryOp::Clip(y))) => x.to_bits() == y.to_bits(),
                _ => a == b,
            })
    }
}

#[inline]
fn finite_or_nan(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

fn take_buf(pool: &mut Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    match pool.pop() {
        Some(mut b) => {
            b.resize(n, 0.0);
            b
        }
        None => vec![0.0; n],
    }
}

/// Copies the columns of an n × d matrix into contiguous vectors.
pub fn columns_of(x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    x.columns().into_iter().map(|c| c.to_vec()).collect()
}

struct Named<'a> {
    tree: &'a ExprTree,
    names: Option<&'a [&'a str]>,
}

impl Named<'_> {
    fn write_at(&self, f: &mut fmt::Formatter<'_>, pos: usize) -> Result<usize, fmt::Error> {
        let nodes = &self.tree.nodes;
        match nodes[pos] {
            Node::Var(i) => {
                match self.names.and_then(|n| n.get(i)) {
                    Some(name) => write!(f, "{name}")?,
                    None => write!(f, "x{i}")?,
                }
                Ok(pos + 1)
            }
            Node::Const(c) => {
                write!(f, "{c}")?;
                Ok(pos + 1)
            }
            Node::Named(c) => {
                write!(f, "{}", c.name())?;
                Ok(pos + 1)
            }
            Node::Unary(op) => {
                write!(f, "{}(", op.name())?;
                let end = self.write_at(f, pos + 1)?;
                match op {
                    UnaryOp::Clip(c) => write!(f, ", {c})")?,
                    UnaryOp::Pow(k) => write!(f, ", {k})")?,
                    _ => write!(f, ")")?,
                }
                Ok(end)
            }
            Node::Binary(op) => {
                write!(f, "(")?;
                let mid = self.write_at(f, pos + 1)?;
                write!(f, " {} ", op.symbol())?;
                let end = self.write_at(f, mid)?;
                write!(f, ")")?;
                Ok(end)
            }
        }
    }
}

impl fmt::Display for Named<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.tree.nodes.is_empty() {
            return write!(f, "<empty>");
        }
        self.write_at(f, 0).map(|_| ())
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Named { tree: self, names: None }.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] Violation),
}

/// Parses infix text with variables `x0 .. x{dim-1}`.
pub fn parse(text: &str, dim: usize) -> Result<ExprTree, ParseError> {
    let names: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    parse_with_names(text, &refs)
}

/// Parses infix text, resolving identifiers against `names` first and then
/// `x<i>`. The input dimension is `names.len()`. The node budget is not
/// enforced here since composed model expressions may exceed it.
pub fn parse_with_names(text: &str, names: &[&str]) -> Result<ExprTree, ParseError> {
    let mut p = Parser { src: text, pos: 0, names };
    let tree = p.expr()?;
    p.skip_ws();
    if p.pos < text.len() {
        return Err(p.err("unexpected trailing input"));
    }
    tree.validate_with(names.len(), usize::MAX)?;
    Ok(tree)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    names: &'a [&'a str],
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax { pos: self.pos, msg: msg.into() }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<ExprTree, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinaryOp::Add
            } else if self.eat('-') {
                BinaryOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = ExprTree::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<ExprTree, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = if self.eat('*') {
                BinaryOp::Mul
            } else if self.eat('/') {
                BinaryOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.factor()?;
            lhs = ExprTree::binary(op, lhs, rhs);
        }
    }

    fn factor(&mut self) -> Result<ExprTree, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some('-') => {
                let start = self.pos;
                self.pos += 1;
                self.skip_ws();
                if matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.') {
                    self.pos = start;
                    Ok(ExprTree::constant(self.number()?))
                } else {
                    let inner = self.factor()?;
                    Ok(ExprTree::constant(-1.0).mul(inner))
                }
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(ExprTree::constant(self.number()?)),
            Some(c) if is_ident_char(c) => self.ident_expr(),
            Some(c) => Err(self.err(format!("unexpected character '{c}'"))),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        if i < bytes.len() && (bytes[i] == b'-' || bytes[i] == b'+') {
            i += 1;
        }
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'-' || bytes[j] == b'+') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = &self.src[start..i];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(v)
            }
            Err(_) => Err(self.err(format!("malformed number '{text}'"))),
        }
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if is_ident_char(c) {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }

    fn ident_expr(&mut self) -> Result<ExprTree, ParseError> {
        let start = self.pos;
        let name = self.ident().to_string();
        if let Some(i) = self.names.iter().position(|n| *n == name) {
            return Ok(ExprTree::var(i));
        }
        self.skip_ws();
        if self.peek() == Some('(') {
            self.pos += 1;
            let arg = self.expr()?;
            let op = match name.as_str() {
                "clip" => {
                    self.expect(',')?;
                    UnaryOp::Clip(self.number()?)
                }
                "pow" => {
                    self.expect(',')?;
                    let at = self.pos;
                    let k = self.number()?;
                    if k.fract() != 0.0 || k.abs() > 4.0 {
                        self.pos = at;
                        return Err(self.err("pow exponent must be an integer in [-4, 4]"));
                    }
                    UnaryOp::Pow(k as i32)
                }
                other => match UnaryOp::from_name(other) {
                    Some(op) => op,
                    None => {
                        self.pos = start;
                        return Err(self.err(format!("unknown function '{other}'")));
                    }
                },
            };
            self.expect(')')?;
            return Ok(ExprTree::unary(op, arg));
        }
        match name.as_str() {
            "e" => Ok(ExprTree::named(NamedConst::E)),
            "pi" => Ok(ExprTree::named(NamedConst::Pi)),
            _ => {
                if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    if s_is_canonical(&name) {
                        return Ok(ExprTree::var(idx));
                    }
                }
                self.pos = start;
                Err(self.err(format!("unknown identifier '{name}'")))
            }
        }
    }
}

fn s_is_canonical(name: &str) -> bool {
    let digits = &name[1..];
    !digits.is_empty() && (digits == "0" || !digits.starts_with('0'))
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || (!c.is_ascii() && !c.is_whitespace())
}
