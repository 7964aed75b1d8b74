//! Dense tensors and a tape for reverse-mode automatic differentiation.
//!
//! Values are 64-bit floats in row-major order. The tape records tensor-level
//! primitives (affine maps, elementwise nonlinearities, reductions, gathers)
//! during the forward pass and replays them in reverse to accumulate
//! gradients. A tape is single-threaded; distinct tapes may run on distinct
//! threads.

use crate::error::{Error, Result};
use rand::Rng;

/// Upper clamp on exp inputs. Hard saturation with zero gradient beyond it.
pub const EXP_CLAMP: f64 = 30.0;

/// Dense numeric array, the carrier for all parameters and activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Uniform init in [-a, a] with a = 1/sqrt(fan_in).
    pub fn kaiming_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        Tensor { shape, data, requires_grad: true, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, &v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise nonlinearity kinds recordable on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Tanh,
    Exp,
    Softplus,
    Square,
}

impl std::str::FromStr for ElemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ElemKind::Tanh),
            "exp" => Ok(ElemKind::Exp),
            "softplus" => Ok(ElemKind::Softplus),
            "square" => Ok(ElemKind::Square),
            other => Err(Error::Config(format!("unknown elementwise kind '{other}'"))),
        }
    }
}

impl ElemKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            ElemKind::Tanh => x.tanh(),
            ElemKind::Exp => x.min(EXP_CLAMP).exp(),
            ElemKind::Softplus => {
                // numerically stable: max(x,0) + ln(1 + e^{-|x|})
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            }
            ElemKind::Square => x * x,
        }
    }

    /// Local derivative given the input and the already-computed output.
    fn derivative(self, x: f64, fx: f64) -> f64 {
        match self {
            ElemKind::Tanh => 1.0 - fx * fx,
            ElemKind::Exp => {
                if x > EXP_CLAMP {
                    0.0
                } else {
                    fx
                }
            }
            ElemKind::Softplus => 1.0 / (1.0 + (-x).exp()),
            ElemKind::Square => 2.0 * x,
        }
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Constant,
    /// y = W x + b, W is (m, n).
    Affine { x: Var, w: Var, b: Var },
    /// y = W x, W is (m, n).
    MatVec { w: Var, x: Var },
    Elementwise { x: Var, kind: ElemKind },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    Sum { x: Var },
    Concat { a: Var, b: Var },
    Gather { x: Var, idx: Vec<usize> },
    Scatter { x: Var, idx: Vec<usize> },
    Reshape { x: Var },
    SqrtScalar { x: Var },
    /// y = x / s with s a positive scalar on the tape.
    DivByScalar { x: Var, s: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Append-only record of forward operations; replayed backwards for gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients, persistent across backward calls.
    acc_grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf. Gradients flow back to it iff
    /// `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf { requires_grad: t.requires_grad }, t.shape.clone(), t.data.clone())
    }

    /// A constant vector; no gradient flows back.
    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(Op::Constant, vec![n], data)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Constant, vec![1], vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// y = W x + b.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(w)?;
        let xn = self.nodes[x.0].value.len();
        let bm = self.nodes[b.0].value.len();
        if xn != n || bm != m {
            return Err(Error::Dimension(format!(
                "affine: W is {}x{}, x has length {}, b has length {}",
                m, n, xn, bm
            )));
        }
        let mut out = self.nodes[b.0].value.clone();
        {
            let wv = &self.nodes[w.0].value;
            let xv = &self.nodes[x.0].value;
            for i in 0..m {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(xv) {
                    acc += a * b;
                }
                out[i] += acc;
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite affine output".into()));
        }
        Ok(self.push(Op::Affine { x, w, b }, vec![m], out))
    }

    /// y = W x (no bias).
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(w)?;
        let xn = self.nodes[x.0].value.len();
        if xn != n {
            return Err(Error::Dimension(format!(
                "matvec: W is {}x{}, x has length {}",
                m, n, xn
            )));
        }
        let mut out = vec![0.0; m];
        {
            let wv = &self.nodes[w.0].value;
            let xv = &self.nodes[x.0].value;
            for i in 0..m {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(xv) {
                    acc += a * b;
                }
                out[i] = acc;
            }
        }
        Ok(self.push(Op::MatVec { w, x }, vec![m], out))
    }

    fn matrix_dims(&self, w: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[w.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("expected a matrix, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn elementwise(&mut self, x: Var, kind: ElemKind) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Elementwise { x, kind }, shape, value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(Error::Dimension(format!(
                "{what}: lengths {} and {}",
                self.nodes[a.0].value.len(),
                self.nodes[b.0].value.len()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub { a, b }, shape, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, value)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddConst { x }, shape, value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![s])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        let n = value.len();
        self.push(Op::Concat { a, b }, vec![n], value)
    }

    /// Picks the listed coordinates of x, in order.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value: Vec<f64> = idx.iter().map(|&i| self.nodes[x.0].value[i]).collect();
        let n = value.len();
        self.push(Op::Gather { x, idx }, vec![n], value)
    }

    /// Places x's coordinates at the listed positions of a zero vector of
    /// length `out_dim`.
    pub fn scatter(&mut self, x: Var, idx: Vec<usize>, out_dim: usize) -> Var {
        let mut value = vec![0.0; out_dim];
        for (k, &i) in idx.iter().enumerate() {
            value[i] = self.nodes[x.0].value[k];
        }
        self.push(Op::Scatter { x, idx }, vec![out_dim], value)
    }

    /// Reinterprets x with a new shape of equal total size.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} incompatible with length {}",
                shape,
                self.nodes[x.0].value.len()
            )));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(Op::Reshape { x }, shape, value))
    }

    pub fn sqrt_scalar(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.len() != 1 {
            return Err(Error::Usage("sqrt_scalar expects a scalar".into()));
        }
        let v = self.nodes[x.0].value[0];
        if v < 0.0 {
            return Err(Error::Numerical(format!("sqrt of negative value {v}")));
        }
        Ok(self.push(Op::SqrtScalar { x }, vec![1], vec![v.sqrt()]))
    }

    /// y = x / s, s a scalar on the tape.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::Usage("div_by_scalar expects a scalar divisor".into()));
        }
        let sv = self.nodes[s.0].value[0];
        if sv.abs() < 1e-300 {
            return Err(Error::Numerical("division by (near-)zero scalar".into()));
        }
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v / sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::DivByScalar { x, s }, shape, value))
    }

    /// Reverse sweep from a scalar output. Gradients accumulate additively
    /// across repeated calls; read them with [`Tape::grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage("output is not on this tape".into()));
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Usage("backward requires a scalar output".into()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.len()]).collect();
        adj[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // take the adjoint out to appease the borrow checker
            let g = std::mem::take(&mut adj[i]);
            match &self.nodes[i].op {
                Op::Leaf { .. } | Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let (m, nn) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (xi, wi, bi) = (x.0, w.0, b.0);
                    for r in 0..m {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        adj[bi][r] += gr;
                        for c in 0..nn {
                            adj[wi][r * nn + c] += gr * xv[c];
                        }
                    }
                    for c in 0..nn {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += wv[r * nn + c] * g[r];
                        }
                        adj[xi][c] += acc;
                    }
                }
                Op::MatVec { w, x } => {
                    let (m, nn) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (xi, wi) = (x.0, w.0);
                    for r in 0..m {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..nn {
                            adj[wi][r * nn + c] += gr * xv[c];
                        }
                    }
                    for c in 0..nn {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += wv[r * nn + c] * g[r];
                        }
                        adj[xi][c] += acc;
                    }
                }
                Op::Elementwise { x, kind } => {
                    let kind = *kind;
                    let xi = x.0;
                    for k in 0..g.len() {
                        let xv = self.nodes[xi].value[k];
                        let fx = self.nodes[i].value[k];
                        adj[xi][k] += g[k] * kind.derivative(xv, fx);
                    }
                }
                Op::Add { a, b } => {
                    let (ai, bi) = (a.0, b.0);
                    for k in 0..g.len() {
                        adj[ai][k] += g[k];
                        adj[bi][k] += g[k];
                    }
                }
                Op::Sub { a, b } => {
                    let (ai, bi) = (a.0, b.0);
                    for k in 0..g.len() {
                        adj[ai][k] += g[k];
                        adj[bi][k] -= g[k];
                    }
                }
                Op::Mul { a, b } => {
                    let (ai, bi) = (a.0, b.0);
                    for k in 0..g.len() {
                        let av = self.nodes[ai].value[k];
                        let bv = self.nodes[bi].value[k];
                        adj[ai][k] += g[k] * bv;
                        adj[bi][k] += g[k] * av;
                    }
                }
                Op::Scale { x, c } => {
                    let (xi, c) = (x.0, *c);
                    for k in 0..g.len() {
                        adj[xi][k] += g[k] * c;
                    }
                }
                Op::AddConst { x } => {
                    let xi = x.0;
                    for k in 0..g.len() {
                        adj[xi][k] += g[k];
                    }
                }
                Op::Sum { x } => {
                    let xi = x.0;
                    let g0 = g[0];
                    for v in adj[xi].iter_mut() {
                        *v += g0;
                    }
                }
                Op::Concat { a, b } => {
                    let (ai, bi) = (a.0, b.0);
                    let na = self.nodes[ai].value.len();
                    for k in 0..na {
                        adj[ai][k] += g[k];
                    }
                    for k in 0..self.nodes[bi].value.len() {
                        adj[bi][k] += g[na + k];
                    }
                }
                Op::Gather { x, idx } => {
                    let xi = x.0;
                    let idx = idx.clone();
                    for (k, &j) in idx.iter().enumerate() {
                        adj[xi][j] += g[k];
                    }
                }
                Op::Scatter { x, idx } => {
                    let xi = x.0;
                    let idx = idx.clone();
                    for (k, &j) in idx.iter().enumerate() {
                        adj[xi][k] += g[j];
                    }
                }
                Op::Reshape { x } => {
                    let xi = x.0;
                    for k in 0..g.len() {
                        adj[xi][k] += g[k];
                    }
                }
                Op::SqrtScalar { x } => {
                    let xi = x.0;
                    let y = self.nodes[i].value[0];
                    adj[xi][0] += g[0] * 0.5 / y;
                }
                Op::DivByScalar { x, s } => {
                    let (xi, si) = (x.0, s.0);
                    let sv = self.nodes[si].value[0];
                    let mut ds = 0.0;
                    for k in 0..g.len() {
                        let xv = self.nodes[xi].value[k];
                        adj[xi][k] += g[k] / sv;
                        ds -= g[k] * xv / (sv * sv);
                    }
                    adj[si][0] += ds;
                }
            }
            adj[i] = g;
        }

        if self.acc_grads.len() < n {
            for nd in &self.nodes[self.acc_grads.len()..] {
                self.acc_grads.push(vec![0.0; nd.value.len()]);
            }
        }
        for (acc, a) in self.acc_grads.iter_mut().zip(&adj) {
            for (x, y) in acc.iter_mut().zip(a) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Accumulated gradient of the last backward sweep(s) w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.acc_grads[v.0]
    }

    /// True when the leaf was registered from a requires_grad tensor.
    pub fn leaf_requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { requires_grad: true })
    }
}

/// Max relative error between analytic gradients and central finite
/// differences over every coordinate of every parameter.
///
/// `f` builds the scalar objective on a fresh tape from leaf vars bound to
/// `params` in order.
pub fn gradient_check<F>(f: F, params: &mut [Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage("gradient_check requires h > 0".into()));
    }
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut max_err: f64 = 0.0;
    for pi in 0..params.len() {
        for k in 0..params[pi].data.len() {
            let orig = params[pi].data[k];
            params[pi].data[k] = orig + h;
            let fp = eval(params)?;
            params[pi].data[k] = orig - h;
            let fm = eval(params)?;
            params[pi].data[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite objective at parameter {pi} coordinate {k}"
                )));
            }
            let diff = (fp - fm) / (2.0 * h);
            let a = analytic[pi][k];
            let err = (a - diff).abs() / a.abs().max(diff.abs()).max(1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affine_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0]);
        let w = tape
            .leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(vec![0.0, 0.0]);
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn affine_row_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 1.0]);
        let w = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(vec![-2.0]);
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[0.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0]);
        let w = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(vec![0.0, 0.0]);
        let err = tape.affine(x, w, b).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("2x2"));
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut r = rng(7);
        let (m, n) = (5, 4);
        let w = Tensor::kaiming_uniform(vec![m, n], n, &mut r);
        let b = Tensor::kaiming_uniform(vec![m], n, &mut r);
        let x = Tensor::kaiming_uniform(vec![n], n, &mut r);

        // independent naive oracle
        let mut expect = vec![0.0; m];
        for i in 0..m {
            expect[i] = b.data[i];
            for j in 0..n {
                expect[i] += w.data[i * n + j] * x.data[j];
            }
        }

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.affine(xv, wv, bv).unwrap();
        for (a, e) in tape.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0]);
        let y = tape.elementwise(x, ElemKind::Tanh);
        assert_eq!(tape.value(y), &[0.0]);

        let x = tape.constant(vec![0.0, 1.0]);
        let y = tape.elementwise(x, ElemKind::Exp);
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-15);
        assert!((tape.value(y)[1] - std::f64::consts::E).abs() < 1e-12);

        let x = tape.constant(vec![-3.0]);
        let y = tape.elementwise(x, ElemKind::Square);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn unknown_elementwise_kind_is_config_error() {
        let err = "selu".parse::<ElemKind>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn exp_clamp_saturates_with_zero_gradient() {
        let t = Tensor::vector(vec![50.0]).with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.elementwise(x, ElemKind::Exp);
        assert_eq!(tape.value(y)[0], EXP_CLAMP.exp());
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x)[0], 0.0);
    }

    #[test]
    fn backward_square() {
        let t = Tensor::vector(vec![3.0]).with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn backward_affine_weight_grad_is_input() {
        let mut r = rng(11);
        let w = Tensor::kaiming_uniform(vec![3, 2], 2, &mut r);
        let x = Tensor::vector(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let b = tape.constant(vec![0.0; 3]);
        let y = tape.affine(xv, wv, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let gw = tape.grad(wv);
        for i in 0..3 {
            for j in 0..2 {
                assert!((gw[i * 2 + j] - x.data[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_accumulates_over_repeated_calls() {
        let t = Tensor::vector(vec![2.0]).with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[8.0]);
    }

    #[test]
    fn backward_linearity_sum_of_graphs() {
        // backward on f+g equals backward(f) then backward(g)
        let t = Tensor::vector(vec![1.5, -0.5]).with_grad();

        let mut tape1 = Tape::new();
        let x1 = tape1.leaf(&t);
        let f = {
            let sq = tape1.mul(x1, x1).unwrap();
            tape1.sum(sq)
        };
        let g = {
            let th = tape1.elementwise(x1, ElemKind::Tanh);
            tape1.sum(th)
        };
        let total = tape1.add(f, g).unwrap();
        tape1.backward(total).unwrap();
        let combined = tape1.grad(x1).to_vec();

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(&t);
        let f2 = {
            let sq = tape2.mul(x2, x2).unwrap();
            tape2.sum(sq)
        };
        let g2 = {
            let th = tape2.elementwise(x2, ElemKind::Tanh);
            tape2.sum(th)
        };
        tape2.backward(f2).unwrap();
        tape2.backward(g2).unwrap();
        let separate = tape2.grad(x2).to_vec();

        for (a, b) in combined.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    // two-layer tanh net, gradients vs central differences
    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut r = rng(13);
        let mut params = vec![
            Tensor::kaiming_uniform(vec![4, 3], 3, &mut r),
            Tensor::kaiming_uniform(vec![4], 3, &mut r),
            Tensor::kaiming_uniform(vec![1, 4], 4, &mut r),
            Tensor::kaiming_uniform(vec![1], 4, &mut r),
        ];
        let x = vec![0.3, -0.7, 1.1];
        let err = gradient_check(
            |tape, vars| {
                let xin = tape.constant(x.clone());
                let h = tape.affine(xin, vars[0], vars[1])?;
                let h = tape.elementwise(h, ElemKind::Tanh);
                let o = tape.affine(h, vars[2], vars[3])?;
                Ok(tape.sum(o))
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_fd_across_seeds() {
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let mut params = vec![
                Tensor::kaiming_uniform(vec![3, 3], 3, &mut r),
                Tensor::kaiming_uniform(vec![3], 3, &mut r),
                Tensor::kaiming_uniform(vec![3], 1, &mut r),
            ];
            let err = gradient_check(
                |tape, vars| {
                    let h = tape.affine(vars[2], vars[0], vars[1])?;
                    let t = tape.elementwise(h, ElemKind::Tanh);
                    let e = tape.elementwise(h, ElemKind::Exp);
                    let sp = tape.elementwise(h, ElemKind::Softplus);
                    let sq = tape.elementwise(h, ElemKind::Square);
                    let a = tape.add(t, e)?;
                    let b = tape.mul(sp, sq)?;
                    let c = tape.sub(a, b)?;
                    Ok(tape.sum(c))
                },
                &mut params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_check_quadratic_and_constant() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let err = gradient_check(
            |tape, vars| {
                let sq = tape.elementwise(vars[0], ElemKind::Square);
                Ok(tape.sum(sq))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic error {err}");

        let err = gradient_check(
            |tape, vars| {
                let z = tape.scale(vars[0], 0.0);
                let s = tape.sum(z);
                Ok(tape.add_const(s, 42.0))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-12, "constant error {err}");
    }

    #[test]
    fn no_grad_forward_is_bit_identical() {
        let mut r = rng(21);
        let w = Tensor::kaiming_uniform(vec![4, 4], 4, &mut r);
        let b = Tensor::kaiming_uniform(vec![4], 4, &mut r);
        let x = Tensor::kaiming_uniform(vec![4], 4, &mut r);

        let run = |grad: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut w2 = w.clone();
            let mut b2 = b.clone();
            let mut x2 = x.clone();
            w2.requires_grad = grad;
            b2.requires_grad = grad;
            x2.requires_grad = grad;
            let (xv, wv, bv) = (tape.leaf(&x2), tape.leaf(&w2), tape.leaf(&b2));
            let y = tape.affine(xv, wv, bv).unwrap();
            let y = tape.elementwise(y, ElemKind::Tanh);
            tape.value(y).to_vec()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let even = tape.gather(x, vec![0, 2]);
        let odd = tape.gather(x, vec![1, 3]);
        let sodd = tape.scale(odd, 3.0);
        let a = tape.scatter(even, vec![0, 2], 4);
        let b = tape.scatter(sodd, vec![1, 3], 4);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 6.0, 3.0, 12.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 3.0, 1.0, 3.0]);
    }

    #[test]
    fn div_by_scalar_gradient() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0, 2.0])];
        let err = gradient_check(
            |tape, vars| {
                let sq = tape.elementwise(vars[0], ElemKind::Square);
                let n2 = tape.sum(sq);
                let n = tape.sqrt_scalar(n2)?;
                let unit = tape.div_by_scalar(vars[0], n)?;
                let w = tape.constant(vec![0.3, -0.2, 0.9]);
                let prod = tape.mul(unit, w)?;
                Ok(tape.sum(prod))
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "normalize gradient error {err}");
    }
}
