use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Square(Var),
    Cube(Var),
    Sqrt(Var),
    Log(Var),
    Recip(Var),
    Tanh(Var),
    /// Piecewise-linear map whose derivative is the stored elementwise
    /// slope (relu, leaky relu, abs, clamp). The slope is treated as locally
    /// constant, so its own derivative is zero.
    Piecewise(Var, Rc<[f32]>),
    Reshape(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    ConvTranspose2d(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf { .. } => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(*a), Some(*b)],
            Conv2d(a, b, _) | ConvTranspose2d(a, b, _) | ConvWeightGrad(a, b, _) => {
                [Some(*a), Some(*b)]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Square(a) | Cube(a) | Sqrt(a) | Log(a)
            | Recip(a) | Tanh(a) | Piecewise(a, _) | Reshape(a) | SumTo(a) | BroadcastTo(a)
            | Transpose(a) => [Some(*a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner computation record. Every op evaluates eagerly and appends a
/// node; node order is a topological order of the graph.
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Option<HashMap<usize, Tensor>>,
    /// Unfolded inputs of recorded convolutions, reused by weight gradients.
    cols: HashMap<(usize, ConvGeom), Rc<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: None,
            cols: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that [`Tape::backward`] computes gradients for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { trainable },
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Result<Var> {
        if !kernels::all_finite(&data) {
            return Err(Error::NonFinite { op: name });
        }
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, data, op)
    }

    /// Brings two operands to a common shape by inserting broadcasts.
    /// Rank-0 operands broadcast against anything.
    fn broadcast_pair(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let (a, sa) = if sa.is_empty() {
            let s = vec![1; sb.len()];
            (self.reshape(a, &s)?, s)
        } else {
            (a, sa)
        };
        let (b, sb) = if sb.is_empty() {
            let s = vec![1; sa.len()];
            (self.reshape(b, &s)?, s)
        } else {
            (b, sb)
        };
        if sa.len() != sb.len() {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let mut target = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            target.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(Error::shape(name, format!("{sa:?} vs {sb:?}"))),
            });
        }
        let a = self.broadcast_to(a, &target)?;
        let b = self.broadcast_to(b, &target)?;
        Ok((a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        mk: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (a, b) = self.broadcast_pair(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(name, shape, data, mk(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn cube(&mut self, a: Var) -> Result<Var> {
        self.unary("cube", a, |x| x * x * x, Op::Cube(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f32::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f32::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f32::tanh, Op::Tanh(a))
    }

    fn piecewise(&mut self, name: &'static str, a: Var, value: impl Fn(f32) -> f32, slope: impl Fn(f32) -> f32) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mask: Rc<[f32]> = t.data().iter().map(|&x| slope(x)).collect();
        let data = t.data().iter().map(|&x| value(x)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, data, Op::Piecewise(a, mask))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f32) -> Result<Var> {
        self.piecewise(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { alpha * x },
            |x| if x > 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.piecewise("abs", a, f32::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `max(a, floor)`, passing gradient only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f32) -> Result<Var> {
        self.piecewise("clamp_min", a, |x| x.max(floor), |x| if x > floor { 1.0 } else { 0.0 })
    }

    fn scale_by_mask(&mut self, a: Var, mask: Rc<[f32]>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        self.push("piecewise_grad", shape, data, Op::Piecewise(a, mask))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape() == shape {
            return Ok(a);
        }
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Sums over the axes where `shape` is 1 (same rank as the input).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape() == shape {
            return Ok(a);
        }
        let data = kernels::sum_to(t.data(), t.shape(), shape)?;
        self.push("sum_to", shape.to_vec(), data, Op::SumTo(a))
    }

    /// Repeats along the axes where the input is 1 (same rank).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape() == shape {
            return Ok(a);
        }
        let data = kernels::broadcast_to(t.data(), t.shape(), shape)?;
        self.push("broadcast_to", shape.to_vec(), data, Op::BroadcastTo(a))
    }

    /// Sum of all entries as a rank-0 value.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ones = vec![1; self.shape(a).len()];
        let s = self.sum_to(a, &ones)?;
        self.reshape(s, &[])
    }

    /// Mean of all entries as a rank-0 value.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let &[r, c] = t.shape() else {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", t.shape())));
        };
        let data = kernels::transpose2d(t.data(), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let out = kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (&[_, _, h, wd], &[_, _, kh, kw]) = (sx, sw) else {
            return Err(Error::shape("conv2d", format!("{sx:?} * {sw:?}")));
        };
        let geom = ConvGeom::new((kh, kw), stride, padding, (h, wd))?;
        self.conv2d_geom(x, w, geom)
    }

    /// Upsampling convolution: the adjoint of [`Tape::conv2d`] with the same
    /// weight layout `w: [O, C, kh, kw]`, mapping `[B, O, h, w]` to
    /// `[B, C, H, W]` with `(H, W) = out_hw`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let &[_, _, kh, kw] = self.shape(w) else {
            return Err(Error::shape("conv_transpose2d", format!("weight {:?}", self.shape(w))));
        };
        let geom = ConvGeom::new((kh, kw), stride, padding, out_hw)?;
        self.conv_transpose2d_geom(x, w, geom)
    }

    fn unfolded(&mut self, x: Var, channels: usize, geom: &ConvGeom) -> Rc<Vec<f32>> {
        let batch = self.shape(x)[0];
        let nodes = &self.nodes;
        self.cols
            .entry((x.0, *geom))
            .or_insert_with(|| Rc::new(kernels::im2col(nodes[x.0].value.data(), batch, channels, geom)))
            .clone()
    }

    pub(crate) fn conv2d_geom(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (&[b, c, h, wd], &[o, c2, kh, kw]) = (sx, sw) else {
            return Err(Error::shape("conv2d", format!("{sx:?} * {sw:?}")));
        };
        if c != c2 || (h, wd) != geom.input || (kh, kw) != geom.kernel {
            return Err(Error::shape("conv2d", format!("{sx:?} * {sw:?} with {geom:?}")));
        }
        let (ho, wo) = geom.output();
        let cols = self.unfolded(x, c, &geom);
        let data = kernels::conv2d_cols(&cols, b, self.value(w).data(), o, c, &geom);
        self.push("conv2d", vec![b, o, ho, wo], data, Op::Conv2d(x, w, geom))
    }

    pub(crate) fn conv_transpose2d_geom(&mut self, g: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (sg, sw) = (self.shape(g), self.shape(w));
        let (&[b, o, ho, wo], &[o2, c, kh, kw]) = (sg, sw) else {
            return Err(Error::shape("conv_transpose2d", format!("{sg:?} * {sw:?}")));
        };
        if o != o2 || (ho, wo) != geom.output() || (kh, kw) != geom.kernel {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("{sg:?} * {sw:?} with {geom:?}"),
            ));
        }
        let data = kernels::conv_transpose2d(self.value(g).data(), b, o, self.value(w).data(), c, &geom);
        let (h, wd) = geom.input;
        self.push("conv_transpose2d", vec![b, c, h, wd], data, Op::ConvTranspose2d(g, w, geom))
    }

    pub(crate) fn conv_weight_grad(&mut self, x: Var, g: Var, geom: ConvGeom) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        let (&[b, c, h, wd], &[b2, o, ho, wo]) = (sx, sg) else {
            return Err(Error::shape("conv_weight_grad", format!("{sx:?}, {sg:?}")));
        };
        if b != b2 || (h, wd) != geom.input || (ho, wo) != geom.output() {
            return Err(Error::shape("conv_weight_grad", format!("{sx:?}, {sg:?} with {geom:?}")));
        }
        let cols = self.unfolded(x, c, &geom);
        let data = kernels::conv2d_weight_grad_cols(&cols, b, c, self.value(g).data(), o, &geom);
        let (kh, kw) = geom.kernel;
        self.push("conv_weight_grad", vec![o, c, kh, kw], data, Op::ConvWeightGrad(x, g, geom))
    }

    /// Vector-Jacobian products of node `out` (upstream `u`) for the inputs
    /// flagged in `need`. Every product is itself recorded on the tape.
    fn vjp(&mut self, out: Var, u: Var, need: [bool; 2]) -> Result<[Option<Var>; 2]> {
        use Op::*;
        let op = self.nodes[out.0].op.clone();
        let mut res = [None, None];
        match op {
            Leaf { .. } => {}
            Add(_, _) => res = [Some(u), Some(u)],
            Sub(_, _) => {
                res[0] = Some(u);
                if need[1] {
                    res[1] = Some(self.neg(u)?);
                }
            }
            Mul(a, b) => {
                if need[0] {
                    res[0] = Some(self.mul(u, b)?);
                }
                if need[1] {
                    res[1] = Some(self.mul(u, a)?);
                }
            }
            Neg(_) => res[0] = Some(self.neg(u)?),
            Scale(_, c) => res[0] = Some(self.scale(u, c)?),
            AddScalar(_) => res[0] = Some(u),
            Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                res[0] = Some(self.mul(u, two_a)?);
            }
            Cube(a) => {
                let a2 = self.square(a)?;
                let three_a2 = self.scale(a2, 3.0)?;
                res[0] = Some(self.mul(u, three_a2)?);
            }
            Sqrt(_) => {
                let r = self.recip(out)?;
                let half_r = self.scale(r, 0.5)?;
                res[0] = Some(self.mul(u, half_r)?);
            }
            Log(a) => {
                let r = self.recip(a)?;
                res[0] = Some(self.mul(u, r)?);
            }
            Recip(_) => {
                let y2 = self.square(out)?;
                let t = self.mul(u, y2)?;
                res[0] = Some(self.neg(t)?);
            }
            Tanh(_) => {
                let y2 = self.square(out)?;
                let neg = self.neg(y2)?;
                let d = self.add_scalar(neg, 1.0)?;
                res[0] = Some(self.mul(u, d)?);
            }
            Piecewise(_, mask) => res[0] = Some(self.scale_by_mask(u, mask)?),
            Reshape(a) => {
                let s = self.shape(a).to_vec();
                res[0] = Some(self.reshape(u, &s)?);
            }
            SumTo(a) => {
                let s = self.shape(a).to_vec();
                res[0] = Some(self.broadcast_to(u, &s)?);
            }
            BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                res[0] = Some(self.sum_to(u, &s)?);
            }
            Transpose(_) => res[0] = Some(self.transpose(u)?),
            MatMul(a, b) => {
                if need[0] {
                    let bt = self.transpose(b)?;
                    res[0] = Some(self.matmul(u, bt)?);
                }
                if need[1] {
                    let at = self.transpose(a)?;
                    res[1] = Some(self.matmul(at, u)?);
                }
            }
            Conv2d(x, w, geom) => {
                if need[0] {
                    res[0] = Some(self.conv_transpose2d_geom(u, w, geom)?);
                }
                if need[1] {
                    res[1] = Some(self.conv_weight_grad(x, u, geom)?);
                }
            }
            ConvTranspose2d(g, w, geom) => {
                if need[0] {
                    res[0] = Some(self.conv2d_geom(u, w, geom)?);
                }
                if need[1] {
                    res[1] = Some(self.conv_weight_grad(u, g, geom)?);
                }
            }
            ConvWeightGrad(x, g, geom) => {
                if need[0] {
                    res[0] = Some(self.conv_transpose2d_geom(g, u, geom)?);
                }
                if need[1] {
                    res[1] = Some(self.conv2d_geom(x, u, geom)?);
                }
            }
        }
        for (slot, n) in res.iter_mut().zip(need) {
            if !n {
                *slot = None;
            }
        }
        Ok(res)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`,
    /// recorded on the tape so they can be differentiated again. `None` means
    /// the output does not depend on that variable.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(
                "grad",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| relevant[v.0]);
            }
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if relevant[output.0] {
            let shape = self.shape(output).to_vec();
            adjoint[output.0] = Some(self.constant(Tensor::full(&shape, 1.0)));
        }
        for i in (0..n).rev() {
            let Some(u) = adjoint[i] else { continue };
            let inputs = self.nodes[i].op.inputs();
            if inputs.iter().flatten().next().is_none() {
                continue;
            }
            let need = inputs.map(|v| v.is_some_and(|v| relevant[v.0]));
            if !need.iter().any(|&b| b) {
                continue;
            }
            let grads = self.vjp(Var(i), u, need)?;
            for (input, g) in inputs.iter().zip(grads) {
                let (Some(input), Some(g)) = (input, g) else { continue };
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| adjoint.get(w.0).copied().flatten())
            .collect())
    }

    /// Populates gradients of the scalar `loss` on every trainable leaf.
    /// A tape supports a single call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.leaf_grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let leaves: Vec<Var> = (0..=loss.0)
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf { trainable: true }))
            .map(Var)
            .collect();
        let grads = self.grad(loss, &leaves)?;
        let mut map = HashMap::with_capacity(leaves.len());
        for (leaf, g) in leaves.iter().zip(grads) {
            let value = match g {
                Some(g) => self.value(g).clone(),
                None => Tensor::zeros(self.shape(*leaf)),
            };
            map.insert(leaf.0, value);
        }
        self.leaf_grads = Some(map);
        Ok(())
    }

    /// Gradient accumulated by [`Tape::backward`] on a trainable leaf.
    pub fn gradient(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.as_ref()?.get(&v.0)
    }
}
