use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `cols` is the unrolled input, kept only when gradients can flow.
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    AvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Flatten(Var),
    Concat(Var, Var),
    Mse(Var, Var),
    L1(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; backward walks the record in
/// reverse, which is a valid reverse topological order because every node
/// is appended after its inputs.
///
/// Parameters registered with [`Graph::param`] stay mutably borrowed for the
/// graph's lifetime so that [`Graph::backward`] can accumulate into their
/// gradients directly.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: Vec<(Var, &'a mut Tensor<T>)>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Like [`Graph::constant`] but takes ownership of the buffer.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Records a leaf backed by `t`. If `t.requires_grad()`, backward adds
    /// d(loss)/d(t) into `t`'s gradient.
    pub fn param(&mut self, t: &'a mut Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad);
        if requires_grad {
            self.bound.push((v, t));
        }
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes have valid shapes")
    }

    /// Gradient of the last `backward` call's loss w.r.t. `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Which branch every non-smooth op took: the sign of each relu input and
    /// each max-pool winner. Finite-difference checks compare signatures to
    /// skip perturbations that straddle a kink.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].value.iter().map(|v| (*v > T::zero()) as usize)),
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                Op::L1(p, t) => sig.extend(
                    self.nodes[p.0]
                        .value
                        .iter()
                        .zip(&self.nodes[t.0].value)
                        .map(|(a, b)| (*a > *b) as usize + (*a < *b) as usize * 2),
                ),
                _ => {}
            }
        }
        sig
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv2d bias {bs:?} does not match {} output channels",
                ws[0]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("conv2d stride must be positive, got {stride:?}")));
        }
        let (ph, pw) = padding;
        if ws[2] > xs[2] + 2 * ph || ws[3] > xs[3] + 2 * pw {
            return Err(Error::Shape(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                ws[2],
                ws[3],
                xs[2] + 2 * ph,
                xs[3] + 2 * pw
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            ho: (xs[2] + 2 * ph - ws[2]) / stride.0 + 1,
            wo: (xs[3] + 2 * pw - ws[3]) / stride.1 + 1,
        };
        let (out, cols) = kernels::conv2d_forward(&geom, self.value(x), self.value(w), self.value(b));
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.n, geom.k, geom.ho, geom.wo],
            out,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear expects input [N,F], weight [G,F], bias [G]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        let out = kernels::linear_forward(n, f, g, self.value(x), self.value(w), self.value(b));
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![n, g], out, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::Shape(format!("add of {:?} and {:?}", na.shape, nb.shape)));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| *x + *y).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad || nb.requires_grad);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    fn pool_dims(&self, x: Var) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            &[n, c, h, w] => Ok((n, c, h * w)),
            s => Err(Error::Shape(format!("pooling expects [N,C,H,W], got {s:?}"))),
        }
    }

    /// Global mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = self.pool_dims(x)?;
        let scale = T::from_f64_lossy(1.0 / hw as f64);
        let out = self
            .value(x)
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n, c, 1, 1], out, Op::AvgPool(x), rg))
    }

    /// Global max per channel: `[N,C,H,W] -> [N,C,1,1]`. The gradient goes to
    /// the first maximal element in row-major order.
    pub fn adaptive_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = self.pool_dims(x)?;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in self.value(x).chunks_exact(hw) {
            let mut best = 0;
            for (i, v) in plane.iter().enumerate().skip(1) {
                if *v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(best);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n, c, 1, 1], out, Op::MaxPool { x, argmax }, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let node = self.node(x);
        if node.shape.is_empty() {
            return Err(Error::Shape("cannot flatten a scalar".into()));
        }
        let n = node.shape[0];
        let shape = vec![n, node.value.len() / n];
        let (value, rg) = (node.value.clone(), node.requires_grad);
        Ok(self.push(shape, value, Op::Flatten(x), rg))
    }

    /// Concatenates two `[N, F]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[0] != nb.shape[0] {
            return Err(Error::Shape(format!(
                "concat expects [N,Fa] and [N,Fb], got {:?} and {:?}",
                na.shape, nb.shape
            )));
        }
        let (n, fa, fb) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            out.extend_from_slice(&na.value[i * fa..(i + 1) * fa]);
            out.extend_from_slice(&nb.value[i * fb..(i + 1) * fb]);
        }
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![n, fa + fb], out, Op::Concat(a, b), rg))
    }

    fn loss_operands(&self, pred: Var, target: Var) -> Result<usize> {
        let (p, t) = (self.node(pred), self.node(target));
        if p.shape != t.shape {
            return Err(Error::Shape(format!(
                "loss operands differ: {:?} vs {:?}",
                p.shape, t.shape
            )));
        }
        match p.shape.first() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::Shape("loss needs at least one sample".into())),
        }
    }

    /// Mean over samples of the squared error (summed over any trailing axes).
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.loss_operands(pred, target)?;
        let total: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (*p - *t) * (*p - *t))
            .sum();
        let rg = self.node(pred).requires_grad || self.node(target).requires_grad;
        let v = total / T::from_f64_lossy(n as f64);
        Ok(self.push(Vec::new(), vec![v], Op::Mse(pred, target), rg))
    }

    /// Mean over samples of the absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.loss_operands(pred, target)?;
        let total: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (*p - *t).abs())
            .sum();
        let rg = self.node(pred).requires_grad || self.node(target).requires_grad;
        let v = total / T::from_f64_lossy(n as f64);
        Ok(self.push(Vec::new(), vec![v], Op::L1(pred, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let total = n.value.iter().copied().sum::<T>();
        let rg = n.requires_grad;
        self.push(Vec::new(), vec![total], Op::Sum(x), rg)
    }

    /// Back-propagates from the scalar `loss` and accumulates leaf gradients
    /// into every bound parameter tensor. Parameters that the loss does not
    /// depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 || !ln.shape.is_empty() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (v, t) in self.bound.iter_mut() {
            match grads[v.0].as_deref() {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (mut dx, mut dw, mut db) = (None, None, None);
                // Three distinct earlier nodes; split the borrow by taking.
                if wants(*x) {
                    dx = Some(take_slot(grads, nodes, *x));
                }
                if wants(*w) {
                    dw = Some(take_slot(grads, nodes, *w));
                }
                if wants(*b) {
                    db = Some(take_slot(grads, nodes, *b));
                }
                kernels::conv2d_backward(
                    geom,
                    &nodes[x.0].value,
                    cols,
                    &nodes[w.0].value,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                restore(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let xs = &nodes[x.0].shape;
                let (n, f, gdim) = (xs[0], xs[1], nodes[w.0].shape[0]);
                let (mut dx, mut dw, mut db) = (None, None, None);
                if wants(*x) {
                    dx = Some(take_slot(grads, nodes, *x));
                }
                if wants(*w) {
                    dw = Some(take_slot(grads, nodes, *w));
                }
                if wants(*b) {
                    db = Some(take_slot(grads, nodes, *b));
                }
                kernels::linear_backward(
                    n,
                    f,
                    gdim,
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                restore(grads, *b, db);
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let dx = slot(grads, nodes, *x);
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > T::zero() {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(d, gv)| *d += *gv);
                    }
                }
            }
            Op::AvgPool(x) => {
                if wants(*x) {
                    let s = &nodes[x.0].shape;
                    let hw = s[2] * s[3];
                    let scale = T::from_f64_lossy(1.0 / hw as f64);
                    let dx = slot(grads, nodes, *x);
                    for (plane, gv) in dx.chunks_exact_mut(hw).zip(g) {
                        let d = *gv * scale;
                        plane.iter_mut().for_each(|v| *v += d);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let s = &nodes[x.0].shape;
                    let hw = s[2] * s[3];
                    let dx = slot(grads, nodes, *x);
                    for ((plane, gv), &am) in dx.chunks_exact_mut(hw).zip(g).zip(argmax) {
                        plane[am] += *gv;
                    }
                }
            }
            Op::Flatten(x) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += *gv);
                }
            }
            Op::Concat(a, b) => {
                let (n, fa, fb) = (
                    nodes[a.0].shape[0],
                    nodes[a.0].shape[1],
                    nodes[b.0].shape[1],
                );
                let f = fa + fb;
                if wants(*a) {
                    let da = slot(grads, nodes, *a);
                    for r in 0..n {
                        da[r * fa..(r + 1) * fa]
                            .iter_mut()
                            .zip(&g[r * f..r * f + fa])
                            .for_each(|(d, gv)| *d += *gv);
                    }
                }
                if wants(*b) {
                    let db = slot(grads, nodes, *b);
                    for r in 0..n {
                        db[r * fb..(r + 1) * fb]
                            .iter_mut()
                            .zip(&g[r * f + fa..(r + 1) * f])
                            .for_each(|(d, gv)| *d += *gv);
                    }
                }
            }
            Op::Mse(p, t) | Op::L1(p, t) => {
                let is_mse = matches!(nodes[i].op, Op::Mse(..));
                let n = nodes[p.0].shape[0];
                let scale = g[0] / T::from_f64_lossy(n as f64);
                let two = T::from_f64_lossy(2.0);
                let local: Vec<T> = nodes[p.0]
                    .value
                    .iter()
                    .zip(&nodes[t.0].value)
                    .map(|(pv, tv)| {
                        let d = *pv - *tv;
                        if is_mse {
                            two * d * scale
                        } else if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*p) {
                    slot(grads, nodes, *p).iter_mut().zip(&local).for_each(|(d, l)| *d += *l);
                }
                if wants(*t) {
                    slot(grads, nodes, *t).iter_mut().zip(&local).for_each(|(d, l)| *d -= *l);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn take_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Vec<T> {
    grads[v.0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}
