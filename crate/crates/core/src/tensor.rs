//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Values are computed eagerly and every operation is recorded on an
//! append-only [`Tape`]. The backward pass is itself built out of recorded
//! primitive operations, so gradients can be differentiated again
//! (Hessian-vector products, mixed partials) without any special casing.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{CoreError, Result};

/// Recorded operation. Inputs always reference earlier node ids.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    /// Broadcast input up to the node's shape (scalar -> any, [n] -> [b, n]).
    Broadcast(usize),
    /// Sum input down to the node's shape (the inverse of Broadcast).
    SumTo(usize),
    Reshape(usize),
    /// Concatenate along the last axis.
    Concat(usize, usize),
    /// Slice a range along the last axis.
    Slice { input: usize, start: usize, len: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Rc<[f64]>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of a computation. Confined to one thread.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value registered on a tape. Immutable after creation.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            values: values.into(),
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Register a leaf (input/constant/parameter) tensor.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "leaf: {} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![], vec![v], Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf)
    }

    pub fn ones(&self, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), vec![1.0; numel(shape)], Op::Leaf)
    }

    pub fn full(&self, shape: &[usize], v: f64) -> Tensor {
        self.push(shape.to_vec(), vec![v; numel(shape)], Op::Leaf)
    }

    /// Recompute every node's forward value from the leaves and check that
    /// the replay reproduces the recorded values bit-exactly.
    pub fn replay_is_deterministic(&self) -> bool {
        let inner = self.inner.borrow();
        let mut replayed: Vec<Rc<[f64]>> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let vals = match node.op {
                Op::Leaf => node.values.clone(),
                _ => eval_forward(&node.op, &node.shape, |i| {
                    (&inner.nodes[i].shape, &replayed[i])
                })
                .into(),
            };
            // Bitwise comparison so that NaNs compare equal to themselves.
            let same = vals.len() == node.values.len()
                && vals
                    .iter()
                    .zip(node.values.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
            replayed.push(vals);
        }
        true
    }
}

/// Forward kernel shared by recording and replay.
fn eval_forward<'a, F>(op: &Op, out_shape: &[usize], get: F) -> Vec<f64>
where
    F: Fn(usize) -> (&'a Vec<usize>, &'a Rc<[f64]>),
{
    match *op {
        Op::Leaf => unreachable!("leaves are not re-evaluated"),
        Op::Add(a, b) => zip_with(get(a).1, get(b).1, |x, y| x + y),
        Op::Sub(a, b) => zip_with(get(a).1, get(b).1, |x, y| x - y),
        Op::Mul(a, b) => zip_with(get(a).1, get(b).1, |x, y| x * y),
        Op::Div(a, b) => zip_with(get(a).1, get(b).1, |x, y| x / y),
        Op::Matmul(a, b) => {
            let (sa, va) = get(a);
            let (sb, vb) = get(b);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = va[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &vb[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * row[j];
                    }
                }
            }
            out
        }
        Op::Transpose(a) => {
            let (sa, va) = get(a);
            let (r, c) = (sa[0], sa[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = va[i * c + j];
                }
            }
            out
        }
        Op::Relu(a) => get(a).1.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        Op::Sigmoid(a) => get(a).1.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
        Op::Tanh(a) => get(a).1.iter().map(|&x| x.tanh()).collect(),
        Op::Exp(a) => get(a).1.iter().map(|&x| x.exp()).collect(),
        Op::Log(a) => get(a).1.iter().map(|&x| x.ln()).collect(),
        Op::Sqrt(a) => get(a).1.iter().map(|&x| x.sqrt()).collect(),
        Op::Broadcast(a) => {
            let (sa, va) = get(a);
            let out_n = numel(out_shape);
            if sa.is_empty() {
                vec![va[0]; out_n]
            } else {
                // [n] -> [b, n]: tile the row.
                let n = va.len();
                let mut out = Vec::with_capacity(out_n);
                for _ in 0..out_n / n {
                    out.extend_from_slice(va);
                }
                out
            }
        }
        Op::SumTo(a) => {
            let (_, va) = get(a);
            let out_n = numel(out_shape);
            if out_n == 1 && out_shape.is_empty() {
                vec![va.iter().sum()]
            } else {
                // [b, n] -> [n]: sum over leading rows.
                let n = out_n;
                let mut out = vec![0.0; n];
                for chunk in va.chunks(n) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                out
            }
        }
        Op::Reshape(a) => get(a).1.to_vec(),
        Op::Concat(a, b) => {
            let (sa, va) = get(a);
            let (sb, vb) = get(b);
            if sa.len() == 1 {
                let mut out = va.to_vec();
                out.extend_from_slice(vb);
                out
            } else {
                let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
                }
                out
            }
        }
        Op::Slice { input, start, len } => {
            let (sa, va) = get(input);
            if sa.len() == 1 {
                va[start..start + len].to_vec()
            } else {
                let (r, c) = (sa[0], sa[1]);
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&va[i * c + start..i * c + start + len]);
                }
                out
            }
        }
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn values(&self) -> Rc<[f64]> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    /// Scalar value; panics if the tensor is not scalar-shaped.
    pub fn item(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        v[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// New leaf on the same tape with identical values, cutting the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let (shape, values) = (node.shape.clone(), node.values.to_vec());
        drop(inner);
        self.tape.push(shape, values, Op::Leaf)
    }

    fn record(&self, shape: Vec<usize>, op: Op) -> Tensor {
        let values = {
            let inner = self.tape.inner.borrow();
            eval_forward(&op, &shape, |i| (&inner.nodes[i].shape, &inner.nodes[i].values))
        };
        self.tape.push(shape, values, op)
    }

    fn check_binary(&self, other: &Tensor, what: &str) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(CoreError::DetachedTensor);
        }
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_binary(other, "add")?;
        Ok(self.record(self.shape(), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_binary(other, "sub")?;
        Ok(self.record(self.shape(), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_binary(other, "mul")?;
        Ok(self.record(self.shape(), Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_binary(other, "div")?;
        Ok(self.record(self.shape(), Op::Div(self.id, other.id)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(CoreError::DetachedTensor);
        }
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                sa, sb
            )));
        }
        Ok(self.record(vec![sa[0], sb[1]], Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch(format!("transpose: {:?}", s)));
        }
        Ok(self.record(vec![s[1], s[0]], Op::Transpose(self.id)))
    }

    pub fn relu(&self) -> Tensor {
        self.record(self.shape(), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.record(self.shape(), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Tensor {
        self.record(self.shape(), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Tensor {
        self.record(self.shape(), Op::Exp(self.id))
    }

    pub fn log(&self) -> Tensor {
        self.record(self.shape(), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Tensor {
        self.record(self.shape(), Op::Sqrt(self.id))
    }

    /// Broadcast: scalar -> any shape, or [n] -> [b, n].
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let ok = s.is_empty()
            || s == shape
            || (s.len() == 1 && shape.len() == 2 && shape[1] == s[0]);
        if !ok {
            return Err(CoreError::ShapeMismatch(format!(
                "broadcast: {:?} -> {:?}",
                s, shape
            )));
        }
        Ok(self.record(shape.to_vec(), Op::Broadcast(self.id)))
    }

    /// Sum leading dimensions away: [b, n] -> [n], or anything -> scalar.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let ok = shape.is_empty()
            || s == shape
            || (shape.len() == 1 && s.len() == 2 && s[1] == shape[0]);
        if !ok {
            return Err(CoreError::ShapeMismatch(format!(
                "sum_to: {:?} -> {:?}",
                s, shape
            )));
        }
        Ok(self.record(shape.to_vec(), Op::SumTo(self.id)))
    }

    pub fn sum(&self) -> Tensor {
        self.record(vec![], Op::SumTo(self.id))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(CoreError::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(self.record(shape.to_vec(), Op::Reshape(self.id)))
    }

    /// Concatenate along the last axis (1-D or 2-D).
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(CoreError::DetachedTensor);
        }
        let (sa, sb) = (self.shape(), other.shape());
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![sa[0] + sb[0]],
            (2, 2) if sa[0] == sb[0] => vec![sa[0], sa[1] + sb[1]],
            _ => {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    sa, sb
                )))
            }
        };
        Ok(self.record(shape, Op::Concat(self.id, other.id)))
    }

    /// Slice a range along the last axis (1-D or 2-D).
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        let last = *s.last().ok_or_else(|| {
            CoreError::ShapeMismatch("slice on scalar".into())
        })?;
        if start + len > last || s.len() > 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "slice [{start}, {}) of {:?}",
                start + len,
                s
            )));
        }
        let shape = if s.len() == 1 {
            vec![len]
        } else {
            vec![s[0], len]
        };
        Ok(self.record(
            shape,
            Op::Slice {
                input: self.id,
                start,
                len,
            },
        ))
    }

    /// Multiply elementwise by a constant scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        let k = self.tape.full(&self.shape(), c);
        self.mul(&k).expect("same shape by construction")
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Add a constant scalar elementwise.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let k = self.tape.full(&self.shape(), c);
        self.add(&k).expect("same shape by construction")
    }
}

/// Backward pass: propagate `seed` (the adjoint of `output`) down to `wrt`.
///
/// Adjoints are built out of recorded primitives, so the returned tensors
/// can be differentiated again.
fn backward(output: &Tensor, seed: Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
    let tape = output.tape();
    for w in wrt {
        if !tape.same_tape(w.tape()) {
            return Err(CoreError::DetachedTensor);
        }
    }
    if !tape.same_tape(seed.tape()) {
        return Err(CoreError::DetachedTensor);
    }

    let out_id = output.id;
    // Ops snapshot: backward itself appends nodes, so collect the static
    // structure first to keep the borrow short.
    let ops: Vec<Op> = {
        let inner = tape.inner.borrow();
        inner.nodes[..=out_id].iter().map(|n| n.op.clone()).collect()
    };

    // Restrict propagation to ancestors of the output.
    let mut reachable = vec![false; out_id + 1];
    reachable[out_id] = true;
    for id in (0..=out_id).rev() {
        if !reachable[id] {
            continue;
        }
        for input in op_inputs(&ops[id]) {
            reachable[input] = true;
        }
    }

    // ... that can also reach a requested tensor by following inputs.
    // Adjoints elsewhere cannot influence the requested gradients, and
    // skipping them keeps repeated backward passes over a growing tape
    // (e.g. one optimization step at a time) linear instead of quadratic.
    let mut leads_to_wrt = vec![false; out_id + 1];
    for w in wrt {
        if w.id <= out_id {
            leads_to_wrt[w.id] = true;
        }
    }
    for id in 0..=out_id {
        if !leads_to_wrt[id] {
            leads_to_wrt[id] = op_inputs(&ops[id]).iter().any(|&i| leads_to_wrt[i]);
        }
    }

    let mut adjoints: Vec<Option<Tensor>> = vec![None; out_id + 1];
    adjoints[out_id] = Some(seed);

    let accumulate = |slot: &mut Option<Tensor>, g: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            None => g,
            Some(prev) => prev.add(&g)?,
        });
        Ok(())
    };

    for id in (0..=out_id).rev() {
        if !reachable[id] {
            continue;
        }
        if !leads_to_wrt[id] {
            adjoints[id] = None;
            continue;
        }
        let go = match adjoints[id].clone() {
            Some(g) => g,
            None => continue,
        };
        match ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut adjoints[a], go.clone())?;
                accumulate(&mut adjoints[b], go)?;
            }
            Op::Sub(a, b) => {
                accumulate(&mut adjoints[a], go.clone())?;
                accumulate(&mut adjoints[b], go.neg())?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (tensor_at(tape, a), tensor_at(tape, b));
                accumulate(&mut adjoints[a], go.mul(&tb)?)?;
                accumulate(&mut adjoints[b], go.mul(&ta)?)?;
            }
            Op::Div(a, b) => {
                let (tb, out) = (tensor_at(tape, b), tensor_at(tape, id));
                accumulate(&mut adjoints[a], go.div(&tb)?)?;
                accumulate(&mut adjoints[b], go.mul(&out)?.div(&tb)?.neg())?;
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (tensor_at(tape, a), tensor_at(tape, b));
                accumulate(&mut adjoints[a], go.matmul(&tb.transpose()?)?)?;
                accumulate(&mut adjoints[b], ta.transpose()?.matmul(&go)?)?;
            }
            Op::Transpose(a) => {
                accumulate(&mut adjoints[a], go.transpose()?)?;
            }
            Op::Relu(a) => {
                let ta = tensor_at(tape, a);
                // Subgradient mask is a constant w.r.t. further differentiation.
                let mask: Vec<f64> = ta
                    .values()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = tape.leaf(mask, &ta.shape())?;
                accumulate(&mut adjoints[a], go.mul(&mask)?)?;
            }
            Op::Sigmoid(a) => {
                let out = tensor_at(tape, id);
                let one = tape.ones(&out.shape());
                accumulate(&mut adjoints[a], go.mul(&out)?.mul(&one.sub(&out)?)?)?;
            }
            Op::Tanh(a) => {
                let out = tensor_at(tape, id);
                let one = tape.ones(&out.shape());
                accumulate(&mut adjoints[a], go.mul(&one.sub(&out.mul(&out)?)?)?)?;
            }
            Op::Exp(a) => {
                let out = tensor_at(tape, id);
                accumulate(&mut adjoints[a], go.mul(&out)?)?;
            }
            Op::Log(a) => {
                let ta = tensor_at(tape, a);
                accumulate(&mut adjoints[a], go.div(&ta)?)?;
            }
            Op::Sqrt(a) => {
                let out = tensor_at(tape, id);
                accumulate(&mut adjoints[a], go.div(&out)?.scale(0.5))?;
            }
            Op::Broadcast(a) => {
                let ta = tensor_at(tape, a);
                accumulate(&mut adjoints[a], go.sum_to(&ta.shape())?)?;
            }
            Op::SumTo(a) => {
                let ta = tensor_at(tape, a);
                accumulate(&mut adjoints[a], go.broadcast_to(&ta.shape())?)?;
            }
            Op::Reshape(a) => {
                let ta = tensor_at(tape, a);
                accumulate(&mut adjoints[a], go.reshape(&ta.shape())?)?;
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (tensor_at(tape, a).shape(), tensor_at(tape, b).shape());
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                accumulate(&mut adjoints[a], go.slice_last(0, ca)?)?;
                accumulate(&mut adjoints[b], go.slice_last(ca, cb)?)?;
            }
            Op::Slice { input, start, len } => {
                let ti = tensor_at(tape, input);
                let s = ti.shape();
                let last = *s.last().unwrap();
                let rows = if s.len() == 2 { Some(s[0]) } else { None };
                let zshape = |cols: usize| match rows {
                    Some(r) => vec![r, cols],
                    None => vec![cols],
                };
                let mut g = go;
                if start > 0 {
                    g = tape.zeros(&zshape(start)).concat(&g)?;
                }
                if start + len < last {
                    g = g.concat(&tape.zeros(&zshape(last - start - len)))?;
                }
                accumulate(&mut adjoints[input], g)?;
            }
        }
    }

    wrt.iter()
        .map(|w| match adjoints[w.id].clone() {
            Some(g) => Ok(g),
            None => Ok(tape.zeros(&w.shape())),
        })
        .collect()
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b)
        | Op::Concat(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Broadcast(a)
        | Op::SumTo(a)
        | Op::Reshape(a) => vec![a],
        Op::Slice { input, .. } => vec![input],
    }
}

fn tensor_at(tape: &Tape, id: usize) -> Tensor {
    Tensor {
        tape: tape.clone(),
        id,
    }
}

/// d output / d wrt for a scalar output. With `create_graph` the returned
/// gradients stay connected to the tape and can be differentiated again;
/// without it they are detached leaves.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if !output.shape().is_empty() {
        return Err(CoreError::NonScalarOutput(output.shape()));
    }
    let seed = output.tape().scalar(1.0);
    let grads = backward(output, seed, wrt)?;
    if create_graph {
        Ok(grads)
    } else {
        Ok(grads.iter().map(Tensor::detach).collect())
    }
}

/// cotangent^T . d outputs / d wrt, without materializing the Jacobian.
pub fn vjp(outputs: &Tensor, wrt: &[&Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
    if cotangent.shape() != outputs.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "vjp cotangent: {:?} vs outputs {:?}",
            cotangent.shape(),
            outputs.shape()
        )));
    }
    backward(outputs, cotangent.clone(), wrt)
}

// ── Composite row-wise helpers (built from primitives, so fully
//    higher-order differentiable) ──────────────────────────────────

/// Sum over the last axis: [b, c] -> [b].
pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::ShapeMismatch(format!("row_sum: {:?}", s)));
    }
    let ones = x.tape().ones(&[s[1], 1]);
    x.matmul(&ones)?.reshape(&[s[0]])
}

/// [b] -> [b, c] by repeating each entry across the row.
pub fn row_broadcast(v: &Tensor, cols: usize) -> Result<Tensor> {
    let s = v.shape();
    if s.len() != 1 {
        return Err(CoreError::ShapeMismatch(format!("row_broadcast: {:?}", s)));
    }
    let ones = v.tape().ones(&[1, cols]);
    v.reshape(&[s[0], 1])?.matmul(&ones)
}

/// Numerically stable softmax over the last axis of a [b, c] tensor.
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::ShapeMismatch(format!("row_softmax: {:?}", s)));
    }
    let (b, c) = (s[0], s[1]);
    // Row max as a detached constant: exact shift, gradient unaffected.
    let vals = x.values();
    let mut maxes = Vec::with_capacity(b * c);
    for i in 0..b {
        let m = vals[i * c..(i + 1) * c]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        maxes.extend(std::iter::repeat(m).take(c));
    }
    let shift = x.tape().leaf(maxes, &[b, c])?;
    let e = x.sub(&shift)?.exp();
    let denom = row_sum(&e)?;
    e.div(&row_broadcast(&denom, c)?)
}

/// Per-example softmax cross-entropy: logits [b, c], targets [b, c]
/// (rows are probability vectors, possibly soft). Returns [b].
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || targets.shape() != s {
        return Err(CoreError::ShapeMismatch(format!(
            "softmax_cross_entropy: logits {:?}, targets {:?}",
            s,
            targets.shape()
        )));
    }
    let (b, c) = (s[0], s[1]);
    let vals = logits.values();
    let mut maxes = Vec::with_capacity(b * c);
    for i in 0..b {
        let m = vals[i * c..(i + 1) * c]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        maxes.extend(std::iter::repeat(m).take(c));
    }
    let shift = logits.tape().leaf(maxes, &[b, c])?;
    let shifted = logits.sub(&shift)?;
    let lse = row_sum(&shifted.exp())?.log();
    let dot = row_sum(&targets.mul(&shifted)?)?;
    lse.sub(&dot)
}

/// Per-example sum of squared differences: [b, k] x [b, k] -> [b].
pub fn squared_error(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = pred.sub(target)?;
    row_sum(&d.mul(&d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn scalar_add_and_sigmoid() {
        let tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(3.0);
        assert_eq!(a.add(&b).unwrap().item(), 5.0);
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let ta = tape.leaf(a.clone(), &[m, k]).unwrap();
        let tb = tape.leaf(b.clone(), &[k, n]).unwrap();
        let out = ta.matmul(&tb).unwrap();
        let vals = out.values();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert!((vals[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_of_square_is_2x() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = x.mul(&x).unwrap();
        let g = grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let g = grad(&y, &[&x], true).unwrap();
        let gg = grad(&g[0], &[&x], false).unwrap();
        assert_eq!(gg[0].item(), 12.0);
    }

    #[test]
    fn softmax_xent_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target = 2usize;
        let loss_at = |z: &[f64]| -> f64 {
            let tape = Tape::new();
            let l = tape.leaf(z.to_vec(), &[1, 4]).unwrap();
            let mut t = vec![0.0; 4];
            t[target] = 1.0;
            let t = tape.leaf(t, &[1, 4]).unwrap();
            softmax_cross_entropy(&l, &t).unwrap().sum().item()
        };
        let tape = Tape::new();
        let l = tape.leaf(logits.clone(), &[1, 4]).unwrap();
        let mut tv = vec![0.0; 4];
        tv[target] = 1.0;
        let t = tape.leaf(tv, &[1, 4]).unwrap();
        let loss = softmax_cross_entropy(&l, &t).unwrap().sum();
        let g = grad(&loss, &[&l], false).unwrap()[0].values();
        let h = 1e-5;
        for i in 0..4 {
            let mut zp = logits.clone();
            let mut zm = logits.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (loss_at(&zp) - loss_at(&zm)) / (2.0 * h);
            assert!(rel_err(g[i], fd) < 1e-6, "coord {i}: {} vs {}", g[i], fd);
        }
    }

    #[test]
    fn vjp_of_linear_map_is_a_transpose_v() {
        let tape = Tape::new();
        let a = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3])
            .unwrap();
        let x = tape.leaf(vec![0.5, -1.0, 2.0], &[3, 1]).unwrap();
        let y = a.matmul(&x).unwrap();
        let v = tape.leaf(vec![1.0, -2.0], &[2, 1]).unwrap();
        let r = vjp(&y, &[&x], &v).unwrap()[0].values();
        // A^T v = [1-8, 2-10, 3-12]
        assert_eq!(&r[..], &[-7.0, -8.0, -9.0]);
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.tanh();
        let z = tape.zeros(&[2]);
        let r = vjp(&y, &[&x], &z).unwrap()[0].values();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_matches_dense_jacobian_built_from_grad() {
        // 5-dim nonlinear map y = tanh(x) * sigmoid(x) elementwise plus a mix.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let vv: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |tape: &Tape| {
            let x = tape.leaf(xv.clone(), &[5]).unwrap();
            let y = x.tanh().mul(&x.sigmoid()).unwrap().add(&x.exp().scale(0.1)).unwrap();
            (x, y)
        };
        // Dense Jacobian column-by-column via grad of each output coord.
        let mut jac = vec![vec![0.0; 5]; 5]; // jac[i][j] = dy_i/dx_j
        for i in 0..5 {
            let tape = Tape::new();
            let (x, y) = build(&tape);
            let yi = y.slice_last(i, 1).unwrap().sum();
            let g = grad(&yi, &[&x], false).unwrap()[0].values();
            jac[i].copy_from_slice(&g);
        }
        let tape = Tape::new();
        let (x, y) = build(&tape);
        let v = tape.leaf(vv.clone(), &[5]).unwrap();
        let r = vjp(&y, &[&x], &v).unwrap()[0].values();
        for j in 0..5 {
            let expect: f64 = (0..5).map(|i| vv[i] * jac[i][j]).sum();
            assert!((r[j] - expect).abs() < 1e-10, "{} vs {}", r[j], expect);
        }
    }

    #[test]
    fn grad_equals_vjp_with_unit_cotangent() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.3, -0.7, 1.2], &[3]).unwrap();
        let y = x.sigmoid().sum();
        let g = grad(&y, &[&x], false).unwrap()[0].values();
        let one = tape.scalar(1.0);
        let v = vjp(&y, &[&x], &one).unwrap()[0].values();
        assert_eq!(&g[..], &v[..]);
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
        let y = x.matmul(&x).unwrap().tanh().sum();
        let _ = grad(&y, &[&x], true).unwrap();
        assert!(tape.replay_is_deterministic());
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(matches!(a.add(&b), Err(CoreError::ShapeMismatch(_))));
        assert!(matches!(a.matmul(&b), Err(CoreError::ShapeMismatch(_))));
        let y = a.sum();
        let other_tape = Tape::new();
        let c = other_tape.scalar(1.0);
        assert!(matches!(grad(&y, &[&c], false), Err(CoreError::DetachedTensor)));
        assert!(matches!(
            grad(&a, &[&a], false),
            Err(CoreError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn broadcast_and_sum_to_are_inverse_in_shape() {
        let tape = Tape::new();
        let v = tape.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = v.broadcast_to(&[4, 3]).unwrap();
        assert_eq!(b.shape(), vec![4, 3]);
        let s = b.sum_to(&[3]).unwrap();
        assert_eq!(&s.values()[..], &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.leaf(vec![3.0], &[1, 1]).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(&c.values()[..], &[1.0, 2.0, 3.0]);
        let mid = c.slice_last(1, 2).unwrap();
        let loss = mid.mul(&mid).unwrap().sum();
        let g = grad(&loss, &[&a, &b], false).unwrap();
        assert_eq!(&g[0].values()[..], &[0.0, 4.0]);
        assert_eq!(&g[1].values()[..], &[6.0]);
    }
}
