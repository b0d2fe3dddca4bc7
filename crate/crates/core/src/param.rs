//! Flat parameter collections for student and commentary networks.

use crate::error::{CoreError, Result};
use crate::tensor::{grad, Tape, Tensor};

/// Per-layer parameter tensors (weights and biases) addressable as one
/// flat vector. Flatten/unflatten round-trips exactly.
#[derive(Clone)]
pub struct ParamVector {
    pub tensors: Vec<Tensor>,
}

impl ParamVector {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn total_dim(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in &self.tensors {
            out.extend_from_slice(&t.values());
        }
        out
    }

    /// Leaves on `tape` with the given segment shapes, filled from `flat`.
    pub fn from_flat(tape: &Tape, shapes: &[Vec<usize>], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(CoreError::DimensionMismatch {
                expected: total,
                got: flat.len(),
            });
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            tensors.push(tape.leaf(flat[off..off + n].to_vec(), s)?);
            off += n;
        }
        Ok(Self { tensors })
    }

    /// Detach every segment into fresh leaves on the same tape.
    pub fn detach(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Taped inner product with another ParamVector of identical layout.
    pub fn dot(&self, other: &ParamVector) -> Result<Tensor> {
        if self.tensors.len() != other.tensors.len() {
            return Err(CoreError::DimensionMismatch {
                expected: self.tensors.len(),
                got: other.tensors.len(),
            });
        }
        let mut acc: Option<Tensor> = None;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            let s = a.mul(b)?.sum();
            acc = Some(match acc {
                None => s,
                Some(prev) => prev.add(&s)?,
            });
        }
        acc.ok_or_else(|| CoreError::Precondition("empty ParamVector".into()))
    }

    pub fn refs(&self) -> Vec<&Tensor> {
        self.tensors.iter().collect()
    }
}

/// Parameter values detached from any tape: the serializable form of a
/// commentary's phi or a student's theta.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiValues {
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl PhiValues {
    pub fn from_param(p: &ParamVector) -> Self {
        Self {
            shapes: p.shapes(),
            values: p.tensors.iter().map(|t| t.values().to_vec()).collect(),
        }
    }

    pub fn from_flat(shapes: Vec<Vec<usize>>, flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(CoreError::DimensionMismatch {
                expected: total,
                got: flat.len(),
            });
        }
        let mut values = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            values.push(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(Self { shapes, values })
    }

    pub fn total_dim(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Instantiate as leaves on a tape.
    pub fn leaves(&self, tape: &Tape) -> Result<ParamVector> {
        let mut tensors = Vec::with_capacity(self.values.len());
        for (v, s) in self.values.iter().zip(&self.shapes) {
            tensors.push(tape.leaf(v.clone(), s)?);
        }
        Ok(ParamVector { tensors })
    }
}

/// Hessian-vector product H.v for a scalar loss: computed as
/// grad(<grad(loss, params, create_graph), v>, params).
pub fn hvp(loss: &Tensor, params: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.total_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: params.total_dim(),
            got: v.len(),
        });
    }
    let tape = loss.tape();
    let g = grad(loss, &params.refs(), true)?;
    let g = ParamVector::new(g);
    let vleaves = ParamVector::from_flat(tape, &params.shapes(), v)?;
    let inner = g.dot(&vleaves)?;
    let h = grad(&inner, &params.refs(), false)?;
    Ok(ParamVector::new(h).flatten())
}
