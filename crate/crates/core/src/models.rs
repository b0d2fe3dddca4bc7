//! Multilayer perceptrons for student and commentary networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::param::ParamVector;
use crate::tensor::{row_softmax, row_sum, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutputHead {
    /// Raw class logits.
    Logits,
    /// Single sigmoid output in (0, 1); final width must be 1. Output shape [b].
    SigmoidScalar,
    /// Tanh-bounded vector in [-1, 1]^k.
    BoundedVector,
    /// Spatial softmax over a rows x cols grid; output is the
    /// probability-weighted (row, col) center, shape [b, 2].
    SpatialCenter { rows: usize, cols: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, head: OutputHead) -> Result<Self> {
        let spec = Self {
            widths,
            activation,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(CoreError::InvalidSpec("need at least 2 layer widths".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidSpec("layer widths must be positive".into()));
        }
        let last = *self.widths.last().unwrap();
        match self.head {
            OutputHead::SigmoidScalar if last != 1 => Err(CoreError::InvalidSpec(
                "sigmoid-scalar head requires final width 1".into(),
            )),
            OutputHead::SpatialCenter { rows, cols } => {
                if last < 4 {
                    Err(CoreError::InvalidSpec(
                        "spatial-center head requires final width >= 4".into(),
                    ))
                } else if rows * cols != last {
                    Err(CoreError::InvalidSpec(format!(
                        "spatial-center grid {rows}x{cols} does not match final width {last}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_dim(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Zero-mean uniform weights scaled by 1/sqrt(fan-in); zero biases.
/// Deterministic for a given (spec, seed).
pub fn init_params(spec: &MlpSpec, seed: u64, tape: &Tape) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for w in spec.widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        tensors.push(tape.leaf(weights, &[fan_in, fan_out])?);
        tensors.push(tape.zeros(&[fan_out]));
    }
    Ok(ParamVector::new(tensors))
}

/// Forward evaluation; output shape is determined by the output head.
pub fn forward(spec: &MlpSpec, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
    let shape = inputs.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "forward: inputs {:?} for spec input width {}",
            shape,
            spec.input_dim()
        )));
    }
    let batch = shape[0];
    let layers = spec.widths.len() - 1;
    if params.tensors.len() != 2 * layers {
        return Err(CoreError::DimensionMismatch {
            expected: 2 * layers,
            got: params.tensors.len(),
        });
    }
    let mut h = inputs.clone();
    for l in 0..layers {
        let w = &params.tensors[2 * l];
        let b = &params.tensors[2 * l + 1];
        let z = h.matmul(w)?.add(&b.broadcast_to(&[batch, spec.widths[l + 1]])?)?;
        h = if l + 1 < layers {
            match spec.activation {
                Activation::Relu => z.relu(),
                Activation::Tanh => z.tanh(),
            }
        } else {
            z
        };
    }
    match spec.head {
        OutputHead::Logits => Ok(h),
        OutputHead::SigmoidScalar => h.sigmoid().reshape(&[batch]),
        OutputHead::BoundedVector => Ok(h.tanh()),
        OutputHead::SpatialCenter { rows, cols } => spatial_center_batch(&h, rows, cols),
    }
}

/// Spatial softmax expectation: grid logits [b, rows*cols] -> centers [b, 2]
/// (row mean, col mean), differentiable.
pub fn spatial_center_batch(grid_logits: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let shape = grid_logits.shape();
    if shape.len() != 2 || shape[1] != rows * cols {
        return Err(CoreError::ShapeMismatch(format!(
            "spatial_center: {:?} for {rows}x{cols} grid",
            shape
        )));
    }
    let b = shape[0];
    let tape = grid_logits.tape();
    let p = row_softmax(grid_logits)?;
    let mut rgrid = Vec::with_capacity(rows * cols);
    let mut cgrid = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            rgrid.push(r as f64);
            cgrid.push(c as f64);
        }
    }
    let rconst = tape.leaf(rgrid, &[rows * cols])?.broadcast_to(&[b, rows * cols])?;
    let cconst = tape.leaf(cgrid, &[rows * cols])?.broadcast_to(&[b, rows * cols])?;
    let rmean = row_sum(&p.mul(&rconst)?)?;
    let cmean = row_sum(&p.mul(&cconst)?)?;
    rmean.reshape(&[b, 1])?.concat(&cmean.reshape(&[b, 1])?)
}

/// Forward with the normalized training iteration appended as an extra
/// input feature on every example.
pub fn teacher_forward(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: &Tensor,
    iteration: usize,
    total_iterations: usize,
) -> Result<Tensor> {
    let shape = inputs.shape();
    if shape.len() != 2 || shape[1] + 1 != spec.input_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "teacher_forward: inputs {:?} for spec input width {} (data width + 1)",
            shape,
            spec.input_dim()
        )));
    }
    let frac = iteration as f64 / total_iterations as f64;
    let col = inputs.tape().full(&[shape[0], 1], frac);
    let augmented = inputs.concat(&col)?;
    forward(spec, params, &augmented)
}

/// Fraction of rows where the arg-max logit matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    assert_eq!(b, labels.len());
    let vals = logits.values();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &vals[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

/// One-hot target rows as a constant tensor.
pub fn one_hot(tape: &Tape, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut vals = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(CoreError::ClassOutOfRange {
                label: l,
                num_classes,
            });
        }
        vals[i * num_classes + l] = 1.0;
    }
    tape.leaf(vals, &[labels.len(), num_classes])
}
