use crate::error::{Error, Result};
use crate::linalg::Activation;
use crate::ops::{affine_kernel, log_softmax_row, rms_norm_kernel, rope_kernel, softmax_kernel, Backend};
use crate::Scalar;
use ndarray::{concatenate, s, Array2, Axis, Zip};
use std::cell::{Ref, RefCell};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Act(usize, Activation),
    AffineAct { x: usize, a: usize, b: usize, act: Activation },
    RmsNorm { x: usize, gain: usize, inv: Vec<T> },
    Rope { x: usize, positions: Vec<usize>, base: T },
    Softmax(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Gather { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    LogProb { logits: usize, row: usize, target: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::AffineAct { .. } => "affine_activation",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Rope { .. } => "rope",
            Op::Softmax(..) => "softmax",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LogProb { .. } => "log_prob",
        }
    }
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Values are stored eagerly; [`Tape::backward`] walks the record in
/// reverse creation order, which is a valid topological order.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every recorded value that
/// depends on a parameter.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl FnOnce(&Array2<T>) -> Array2<T>) -> Var {
        let value = f(&self.nodes.borrow()[x.0].value);
        let needs = self.needs(&[x.0]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl FnOnce(&Array2<T>, &Array2<T>) -> Array2<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, op, needs)
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(nodes[output.0].value.dim()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteGradient { op: node.op.name() });
            }
            let mut send = |target: usize, contrib: Array2<T>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            let val = |k: usize| &nodes[k].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, g.dot(val(*b)));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if a == b {
                        send(*a, &g + &g);
                    } else {
                        send(*a, g.clone());
                        send(*b, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    send(*a, &g * val(*b));
                    send(*b, &g * val(*a));
                }
                Op::Scale(a, c) => send(*a, &g * *c),
                Op::Act(x, act) => {
                    let mut dx = val(*x).mapv(|v| act.derivative(v));
                    dx *= &g;
                    send(*x, dx);
                }
                Op::AffineAct { x, a, b, act } => {
                    let sa = val(*a)[[0, 0]];
                    let sb = val(*b)[[0, 0]];
                    let xv = val(*x);
                    // g ⊙ σ'(a·x + b)
                    let mut gz = xv.mapv(|v| act.derivative(sa * v + sb));
                    gz *= &g;
                    let da = Zip::from(&gz).and(xv).fold(T::zero(), |acc, &p, &q| acc + p * q);
                    let db = gz.sum();
                    send(*a, Array2::from_elem((1, 1), da));
                    send(*b, Array2::from_elem((1, 1), db));
                    gz *= sa;
                    send(*x, gz);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let xv = val(*x);
                    let gv = val(*gain);
                    let d = T::of(xv.ncols() as f64);
                    if nodes[*gain].needs_grad {
                        let mut dg = Array2::<T>::zeros((1, xv.ncols()));
                        for ((xr, gr), &r) in xv.rows().into_iter().zip(g.rows()).zip(inv) {
                            Zip::from(dg.row_mut(0)).and(&xr).and(&gr).for_each(|o, &a, &b| *o += a * b * r);
                        }
                        send(*gain, dg);
                    }
                    if nodes[*x].needs_grad {
                        let mut dx = Array2::<T>::zeros(xv.dim());
                        for (((mut out, xr), gr), &r) in dx.rows_mut().into_iter().zip(xv.rows()).zip(g.rows()).zip(inv) {
                            let dot = Zip::from(&gr).and(gv.row(0)).and(&xr).fold(T::zero(), |acc, &a, &b, &c| acc + a * b * c);
                            let coef = dot * r * r * r / d;
                            Zip::from(&mut out).and(&xr).and(&gr).and(gv.row(0)).for_each(|o, &xi, &gi, &wi| {
                                *o = r * wi * gi - xi * coef;
                            });
                        }
                        send(*x, dx);
                    }
                }
                Op::Rope { x, positions, base } => send(*x, rope_kernel(g.view(), positions, *base, true)),
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: T = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|o, &yy| *o -= yy * dot);
                    }
                    send(*x, dx);
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Array2::zeros(val(*x).dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(val(*x).dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = val(p).nrows();
                        send(p, g.slice(s![off..off + r, ..]).to_owned());
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).ncols();
                        send(p, g.slice(s![.., off..off + c]).to_owned());
                        off += c;
                    }
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::zeros(val(*table).dim());
                    for (gr, &id) in g.rows().into_iter().zip(ids) {
                        let mut row = dt.row_mut(id);
                        row += &gr;
                    }
                    send(*table, dt);
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = val(*logits);
                    let scale = g[[0, 0]] / T::of(targets.len() as f64);
                    let mut dl = Array2::zeros(lv.dim());
                    for ((mut out, row), &t) in dl.rows_mut().into_iter().zip(lv.rows()).zip(targets) {
                        let lp = log_softmax_row(row);
                        for (o, l) in out.iter_mut().zip(lp) {
                            *o = l.exp() * scale;
                        }
                        out[t] -= scale;
                    }
                    send(*logits, dl);
                }
                Op::LogProb { logits, row, target } => {
                    let lv = val(*logits);
                    let mut dl = Array2::zeros(lv.dim());
                    let lp = log_softmax_row(lv.row(*row));
                    let gs = g[[0, 0]];
                    for (o, l) in dl.row_mut(*row).iter_mut().zip(lp) {
                        *o = -l.exp() * gs;
                    }
                    dl[[*row, *target]] += gs;
                    send(*logits, dl);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<T: Scalar> Backend<T> for Tape<T> {
    type M = Var;

    fn constant(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims(&self, m: &Var) -> (usize, usize) {
        self.nodes.borrow()[m.0].value.dim()
    }

    fn to_array(&self, m: &Var) -> Array2<T> {
        self.nodes.borrow()[m.0].value.clone()
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::MatMul(a.0, b.0), |x, y| x.dot(y))
    }

    fn matmul_nt(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::MatMulNt(a.0, b.0), |x, y| x.dot(&y.t()))
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    fn scale(&self, a: &Var, c: T) -> Var {
        self.unary(*a, Op::Scale(a.0, c), |x| x * c)
    }

    fn activation(&self, x: &Var, act: Activation) -> Var {
        self.unary(*x, Op::Act(x.0, act), |v| v.mapv(|e| act.apply(e)))
    }

    fn affine_activation(&self, x: &Var, act: Activation, a: &Var, b: &Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            affine_kernel(nodes[x.0].value.view(), act, nodes[a.0].value[[0, 0]], nodes[b.0].value[[0, 0]])
        };
        let needs = self.needs(&[x.0, a.0, b.0]);
        self.push(value, Op::AffineAct { x: x.0, a: a.0, b: b.0, act }, needs)
    }

    fn rms_norm(&self, x: &Var, gain: &Var, eps: T) -> Var {
        let (value, inv) = {
            let nodes = self.nodes.borrow();
            rms_norm_kernel(nodes[x.0].value.view(), nodes[gain.0].value.view(), eps)
        };
        let needs = self.needs(&[x.0, gain.0]);
        self.push(value, Op::RmsNorm { x: x.0, gain: gain.0, inv }, needs)
    }

    fn rope(&self, x: &Var, positions: &[usize], base: T) -> Var {
        let op = Op::Rope {
            x: x.0,
            positions: positions.to_vec(),
            base,
        };
        self.unary(*x, op, |v| rope_kernel(v.view(), positions, base, false))
    }

    fn softmax_rows(&self, x: &Var, causal: bool) -> Var {
        self.unary(*x, Op::Softmax(x.0), |v| softmax_kernel(v.view(), causal))
    }

    fn slice_rows(&self, x: &Var, start: usize, len: usize) -> Var {
        self.unary(*x, Op::SliceRows { x: x.0, start }, |v| v.slice(s![start..start + len, ..]).to_owned())
    }

    fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Var {
        self.unary(*x, Op::SliceCols { x: x.0, start }, |v| v.slice(s![.., start..start + len]).to_owned())
    }

    fn concat_rows(&self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(0), &views).expect("row concat shapes agree")
        };
        let needs = self.needs(&ids);
        self.push(value, Op::ConcatRows(ids), needs)
    }

    fn concat_cols(&self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(1), &views).expect("column concat shapes agree")
        };
        let needs = self.needs(&ids);
        self.push(value, Op::ConcatCols(ids), needs)
    }

    fn gather_rows(&self, table: &Var, ids: &[usize]) -> Var {
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.unary(*table, op, |t| t.select(Axis(0), ids))
    }

    fn cross_entropy(&self, logits: &Var, targets: &[usize]) -> Var {
        let value = crate::ops::Eager.cross_entropy(&self.nodes.borrow()[logits.0].value, targets);
        let needs = self.needs(&[logits.0]);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
        };
        self.push(value, op, needs)
    }

    fn log_prob(&self, logits: &Var, row: usize, target: usize) -> Var {
        let value = crate::ops::Eager.log_prob(&self.nodes.borrow()[logits.0].value, row, target);
        let needs = self.needs(&[logits.0]);
        self.push(value, Op::LogProb { logits: logits.0, row, target }, needs)
    }
}
