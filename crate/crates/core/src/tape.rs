//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation records its output value plus a closure that routes the
//! incoming gradient to its parents. Nodes are pushed in evaluation order,
//! so walking the tape backwards is a valid reverse topological order.
//! Gradients for the same node accumulate additively.

use crate::error::DiffError;
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

type BackFn<E> = Box<dyn Fn(&Tensor<E>, &mut [Option<Tensor<E>>])>;

struct Node<E: Element> {
    value: Tensor<E>,
    backward: Option<BackFn<E>>,
}

pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

/// Gradients produced by one backward pass, indexed by [`Val`].
pub struct Grads<E: Element = f32> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Val) -> Option<&Tensor<E>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

fn accum<E: Element>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) {
    match slot {
        Some(t) => t.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes an input node. Gradients accumulate here but do not propagate
    /// further.
    pub fn leaf(&mut self, value: Tensor<E>) -> Val {
        self.push(value, None)
    }

    pub fn value(&self, v: Val) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, backward: Option<BackFn<E>>) -> Val {
        self.nodes.push(Node { value, backward });
        Val(self.nodes.len() - 1)
    }

    /// Runs the backward pass from a scalar root.
    pub fn backward(&self, root: Val) -> Result<Grads<E>, DiffError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(DiffError::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), E::one()));
        for id in (0..=root.0).rev() {
            let Some(grad) = slots[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                back(&grad, &mut slots);
            }
            slots[id] = Some(grad);
        }
        Ok(Grads { slots })
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.clone());
            })),
        ))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.map(|x| -x));
            })),
        ))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.zip_map(&bv, |x, y| x * y).expect("mul shapes"));
                accum(&mut slots[b.0], g.zip_map(&av, |x, y| x * y).expect("mul shapes"));
            })),
        ))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let s = E::from_f64(c);
        let v = self.value(a).map(|x| x * s);
        self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.map(|x| x * s));
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f64) -> Result<Val, DiffError> {
        if !(0.0..1.0).contains(&slope) {
            return Err(DiffError::invalid("leaky_relu", format!("slope {slope} outside [0,1)")));
        }
        let s = E::from_f64(slope);
        let av = self.value(a).clone();
        let v = av.map(|x| if x >= E::zero() { x } else { x * s });
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let dx = g
                    .zip_map(&av, |gi, xi| if xi >= E::zero() { gi } else { gi * s })
                    .expect("leaky_relu shapes");
                accum(&mut slots[a.0], dx);
            })),
        ))
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let v = self.value(a).map(|x| x.tanh());
        let out = v.clone();
        self.push(
            v,
            Some(Box::new(move |g, slots| {
                let dx = g
                    .zip_map(&out, |gi, yi| gi * (E::one() - yi * yi))
                    .expect("tanh shapes");
                accum(&mut slots[a.0], dx);
            })),
        )
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let total = self.value(a).data().iter().fold(E::zero(), |acc, &v| acc + v);
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], Tensor::filled(&shape, g.item()));
            })),
        )
    }

    /// Weighted sum of scalar terms: `sum_i w_i * t_i`.
    pub fn weighted_sum(&mut self, terms: &[(Val, f64)]) -> Result<Val, DiffError> {
        let mut total = E::zero();
        for &(t, w) in terms {
            if self.value(t).len() != 1 {
                return Err(DiffError::invalid("weighted_sum", "terms must be scalar"));
            }
            total = total + self.value(t).item() * E::from_f64(w);
        }
        let captured: Vec<(usize, E)> = terms.iter().map(|&(t, w)| (t.0, E::from_f64(w))).collect();
        Ok(self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, slots| {
                for &(id, w) in &captured {
                    accum(&mut slots[id], Tensor::scalar(g.item() * w));
                }
            })),
        ))
    }

    // -- shape plumbing -----------------------------------------------------

    pub fn reshape(&mut self, a: Val, shape: &[usize]) -> Result<Val, DiffError> {
        let old = self.value(a).shape().to_vec();
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone().reshaped(&old).expect("reshape back"));
            })),
        ))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val, DiffError> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], ops::transpose(g).expect("transpose back"));
            })),
        ))
    }

    /// First `n` rows of a matrix; the dropped rows get zero gradient.
    pub fn take_rows(&mut self, a: Val, n: usize) -> Result<Val, DiffError> {
        let (r, c) = self.value(a).dims2("take_rows")?;
        if n == 0 || n > r {
            return Err(DiffError::dim("take_rows", format!("take {n} of {r} rows")));
        }
        let v = Tensor::new(&[n, c], self.value(a).data()[..n * c].to_vec())?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let mut back = Tensor::zeros(&[r, c]);
                back.data_mut()[..n * c].copy_from_slice(g.data());
                accum(&mut slots[a.0], back);
            })),
        ))
    }

    /// `(D, H, W)` feature map viewed as `(N, D)` site matrix, `N = H*W`.
    pub fn chw_to_sites(&mut self, a: Val) -> Result<Val, DiffError> {
        let (d, h, w) = self.value(a).dims3("chw_to_sites")?;
        let n = h * w;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[n, d]);
        {
            let od = out.data_mut();
            for j in 0..d {
                for s in 0..n {
                    od[s * d + j] = src[j * n + s];
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, slots| {
                let gd = g.data();
                let mut back = Tensor::zeros(&[d, h, w]);
                {
                    let bd = back.data_mut();
                    for j in 0..d {
                        for s in 0..n {
                            bd[j * n + s] = gd[s * d + j];
                        }
                    }
                }
                accum(&mut slots[a.0], back);
            })),
        ))
    }

    /// Inverse of [`Tape::chw_to_sites`].
    pub fn sites_to_chw(&mut self, a: Val, h: usize, w: usize) -> Result<Val, DiffError> {
        let (n, d) = self.value(a).dims2("sites_to_chw")?;
        if n != h * w {
            return Err(DiffError::dim("sites_to_chw", format!("{n} sites vs {h}x{w}")));
        }
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[d, h, w]);
        {
            let od = out.data_mut();
            for s in 0..n {
                for j in 0..d {
                    od[j * n + s] = src[s * d + j];
                }
            }
        }
        Ok(self.push(
            out,
            Some(Box::new(move |g, slots| {
                let gd = g.data();
                let mut back = Tensor::zeros(&[n, d]);
                {
                    let bd = back.data_mut();
                    for s in 0..n {
                        for j in 0..d {
                            bd[s * d + j] = gd[j * n + s];
                        }
                    }
                }
                accum(&mut slots[a.0], back);
            })),
        ))
    }

    pub fn channel_concat(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let (c1, h1, w1) = self.value(a).dims3("channel_concat")?;
        let (c2, h2, w2) = self.value(b).dims3("channel_concat")?;
        if (h1, w1) != (h2, w2) {
            return Err(DiffError::dim(
                "channel_concat",
                format!("spatial dims {h1}x{w1} vs {h2}x{w2}"),
            ));
        }
        let mut data = Vec::with_capacity((c1 + c2) * h1 * w1);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(&[c1 + c2, h1, w1], data)?;
        let split = c1 * h1 * w1;
        let (sa, sb) = ([c1, h1, w1], [c2, h2, w2]);
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let ga = Tensor::new(&sa, g.data()[..split].to_vec()).expect("concat split");
                let gb = Tensor::new(&sb, g.data()[split..].to_vec()).expect("concat split");
                accum(&mut slots[a.0], ga);
                accum(&mut slots[b.0], gb);
            })),
        ))
    }

    /// Channels `[from, to)` of a `(C, H, W)` tensor.
    pub fn slice_channels(&mut self, a: Val, from: usize, to: usize) -> Result<Val, DiffError> {
        let (c, h, w) = self.value(a).dims3("slice_channels")?;
        if from >= to || to > c {
            return Err(DiffError::dim("slice_channels", format!("[{from},{to}) of {c} channels")));
        }
        let plane = h * w;
        let v = Tensor::new(&[to - from, h, w], self.value(a).data()[from * plane..to * plane].to_vec())?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let mut back = Tensor::zeros(&[c, h, w]);
                back.data_mut()[from * plane..to * plane].copy_from_slice(g.data());
                accum(&mut slots[a.0], back);
            })),
        ))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val, DiffError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = ops::matmul(&av, &bv)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let bt = ops::transpose(&bv).expect("matmul backward");
                let at = ops::transpose(&av).expect("matmul backward");
                accum(&mut slots[a.0], ops::matmul(g, &bt).expect("matmul backward"));
                accum(&mut slots[b.0], ops::matmul(&at, g).expect("matmul backward"));
            })),
        ))
    }

    /// Adds a length-`C` bias vector to every row of an `(R, C)` matrix.
    pub fn bias_rows(&mut self, a: Val, bias: Val) -> Result<Val, DiffError> {
        let (r, c) = self.value(a).dims2("bias_rows")?;
        let blen = self.value(bias).len();
        if blen != c {
            return Err(DiffError::dim("bias_rows", format!("bias len {blen} vs {c} columns")));
        }
        let bv = self.value(bias).clone();
        let mut v = self.value(a).clone();
        {
            let vd = v.data_mut();
            let bd = bv.data();
            for i in 0..r {
                for j in 0..c {
                    vd[i * c + j] = vd[i * c + j] + bd[j];
                }
            }
        }
        let bshape = self.value(bias).shape().to_vec();
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                let mut db = Tensor::zeros(&bshape);
                {
                    let dd = db.data_mut();
                    let gd = g.data();
                    for i in 0..r {
                        for j in 0..c {
                            dd[j] = dd[j] + gd[i * c + j];
                        }
                    }
                }
                accum(&mut slots[bias.0], db);
            })),
        ))
    }

    /// Adds a per-channel bias to a `(C, H, W)` tensor.
    pub fn bias_channels(&mut self, a: Val, bias: Val) -> Result<Val, DiffError> {
        let (c, h, w) = self.value(a).dims3("bias_channels")?;
        let blen = self.value(bias).len();
        if blen != c {
            return Err(DiffError::dim("bias_channels", format!("bias len {blen} vs {c} channels")));
        }
        let bv = self.value(bias).clone();
        let mut v = self.value(a).clone();
        let plane = h * w;
        {
            let vd = v.data_mut();
            let bd = bv.data();
            for ci in 0..c {
                for p in 0..plane {
                    vd[ci * plane + p] = vd[ci * plane + p] + bd[ci];
                }
            }
        }
        let bshape = self.value(bias).shape().to_vec();
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], g.clone());
                let mut db = Tensor::zeros(&bshape);
                {
                    let dd = db.data_mut();
                    let gd = g.data();
                    for ci in 0..c {
                        for p in 0..plane {
                            dd[ci] = dd[ci] + gd[ci * plane + p];
                        }
                    }
                }
                accum(&mut slots[bias.0], db);
            })),
        ))
    }

    // -- convolution ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Val, kernel: Val, stride: usize, pad: usize) -> Result<Val, DiffError> {
        let xv = self.value(x).clone();
        let kv = self.value(kernel).clone();
        let v = ops::conv2d(&xv, &kv, stride, pad)?;
        let in_shape = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k_shape = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[x.0], ops::conv2d_backward_input(g, &kv, in_shape, stride, pad));
                accum(&mut slots[kernel.0], ops::conv2d_backward_kernel(g, &xv, k_shape, stride, pad));
            })),
        ))
    }

    pub fn deconv2d(&mut self, x: Val, kernel: Val, stride: usize, pad: usize) -> Result<Val, DiffError> {
        let xv = self.value(x).clone();
        let kv = self.value(kernel).clone();
        let v = ops::deconv2d(&xv, &kv, stride, pad)?;
        let in_shape = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k_shape = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[x.0], ops::deconv2d_backward_input(g, &kv, in_shape, stride, pad));
                accum(&mut slots[kernel.0], ops::deconv2d_backward_kernel(g, &xv, k_shape, stride, pad));
            })),
        ))
    }

    // -- row-wise maps -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Val) -> Result<Val, DiffError> {
        let v = ops::softmax_rows(self.value(a))?;
        let out = v.clone();
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], ops::softmax_rows_backward(g, &out));
            })),
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Val, eps: f64) -> Result<Val, DiffError> {
        let xv = self.value(a).clone();
        let v = ops::l2_normalize_rows(&xv, eps)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                accum(&mut slots[a.0], ops::l2_normalize_rows_backward(g, &xv, eps));
            })),
        ))
    }

    // -- aggregation ----------------------------------------------------------

    /// Weighted residual sums: `V(j,l) = sum_n beta(n,l) (sites(n,j) - centers(l,j))`.
    pub fn aggregate_residuals(&mut self, sites: Val, beta: Val, centers: Val) -> Result<Val, DiffError> {
        let sv = self.value(sites).clone();
        let bv = self.value(beta).clone();
        let cv = self.value(centers).clone();
        let v = ops::aggregate_residuals(&sv, &bv, &cv)?;
        Ok(self.push(
            v,
            Some(Box::new(move |g, slots| {
                let (ds, db, dc) = ops::aggregate_residuals_backward(g, &sv, &bv, &cv);
                accum(&mut slots[sites.0], ds);
                accum(&mut slots[beta.0], db);
                accum(&mut slots[centers.0], dc);
            })),
        ))
    }

    // -- losses ---------------------------------------------------------------
    // Targets and selection indices are constants; gradients flow to the
    // prediction / feature / prototype arguments only.

    pub fn mse_loss(&mut self, pred: Val, target: &Tensor<E>) -> Result<Val, DiffError> {
        let pv = self.value(pred).clone();
        let tv = target.clone();
        let v = ops::mse(&pv, &tv)?;
        Ok(self.push(
            Tensor::scalar(v),
            Some(Box::new(move |g, slots| {
                accum(&mut slots[pred.0], ops::mse_backward(g.item(), &pv, &tv));
            })),
        ))
    }

    pub fn gradient_loss(&mut self, pred: Val, target: &Tensor<E>) -> Result<Val, DiffError> {
        let pv = self.value(pred).clone();
        let tv = target.clone();
        let v = ops::gradient_diff(&pv, &tv)?;
        Ok(self.push(
            Tensor::scalar(v),
            Some(Box::new(move |g, slots| {
                accum(&mut slots[pred.0], ops::gradient_diff_backward(g.item(), &pv, &tv));
            })),
        ))
    }

    pub fn compaction_loss(&mut self, sites: Val, protos: Val, assign: Vec<usize>) -> Result<Val, DiffError> {
        let sv = self.value(sites).clone();
        let pv = self.value(protos).clone();
        let v = ops::compaction(&sv, &pv, &assign)?;
        Ok(self.push(
            Tensor::scalar(v),
            Some(Box::new(move |g, slots| {
                let (ds, dp) = ops::compaction_backward(g.item(), &sv, &pv, &assign);
                accum(&mut slots[sites.0], ds);
                accum(&mut slots[protos.0], dp);
            })),
        ))
    }

    pub fn separation_loss(
        &mut self,
        sites: Val,
        protos: Val,
        nearest: Vec<usize>,
        second: Vec<usize>,
        margin: f64,
    ) -> Result<Val, DiffError> {
        let sv = self.value(sites).clone();
        let pv = self.value(protos).clone();
        let v = ops::separation(&sv, &pv, &nearest, &second, margin)?;
        Ok(self.push(
            Tensor::scalar(v),
            Some(Box::new(move |g, slots| {
                let (ds, dp) = ops::separation_backward(g.item(), &sv, &pv, &nearest, &second, margin);
                accum(&mut slots[sites.0], ds);
                accum(&mut slots[protos.0], dp);
            })),
        ))
    }
}


/// One forward/backward pass over a parameter store: every parameter is
/// bound as a tape leaf, and leaf gradients are folded back into a
/// [`GradBuffer`] afterwards.
pub struct Session<'s, E: Element = f32> {
    pub tape: Tape<E>,
    leaves: Vec<Val>,
    store: &'s crate::tensor::ParamStore<E>,
}

impl<'s, E: Element> Session<'s, E> {
    pub fn new(store: &'s crate::tensor::ParamStore<E>) -> Self {
        let mut tape = Tape::new();
        let leaves = store.ids().map(|id| tape.leaf(store.get(id).value.clone())).collect();
        Self { tape, leaves, store }
    }

    pub fn param(&self, id: crate::tensor::ParamId) -> Val {
        self.leaves[id.0]
    }

    pub fn store(&self) -> &crate::tensor::ParamStore<E> {
        self.store
    }

    /// Backward from `root`, scaling every parameter gradient by `scale`
    /// (batch averaging) and adding it into `buf`.
    pub fn backprop_into(
        &self,
        root: Val,
        scale: f64,
        buf: &mut GradBuffer<E>,
    ) -> Result<(), DiffError> {
        let grads = self.tape.backward(root)?;
        let s = E::from_f64(scale);
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(g) = grads.get(*leaf) {
                let slot = &mut buf.grads[i];
                for (acc, &gv) in slot.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + gv * s;
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator, index-parallel to a `ParamStore`.
pub struct GradBuffer<E: Element = f32> {
    pub grads: Vec<Tensor<E>>,
}

impl<E: Element> GradBuffer<E> {
    pub fn zeros_like(store: &crate::tensor::ParamStore<E>) -> Self {
        Self { grads: store.ids().map(|id| Tensor::zeros(store.get(id).value.shape())).collect() }
    }

    pub fn merge(&mut self, other: &GradBuffer<E>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    /// Adds the buffered gradients into `Parameter::grad`.
    pub fn apply_to(&self, store: &mut crate::tensor::ParamStore<E>) {
        for (i, g) in self.grads.iter().enumerate() {
            store.get_mut(crate::tensor::ParamId(i)).grad.add_assign(g);
        }
    }
}
