//! The commentary families and their loss-adaptation rules.
//!
//! Each family turns a plain training loss into an adjusted loss that
//! depends on commentary parameters phi. Validation losses are always
//! the plain cross-entropy (the attention mask is the one family whose
//! mask also applies at validation and test time).

use crate::data::Batch;
use crate::error::{CoreError, Result};
use crate::models::{forward, one_hot, teacher_forward, MlpSpec, OutputHead};
use crate::param::{ParamVector, PhiValues};
use crate::tensor::{row_broadcast, softmax_cross_entropy, squared_error, Tape, Tensor};

/// Tagged union of the commentary families. `phi` holds the current
/// parameter values; computations take tape-registered leaves so that
/// gradients can flow during meta-training.
#[derive(Clone, Debug)]
pub enum Commentary {
    /// One free scalar; used by the quadratic smoke task.
    Scalar { phi: PhiValues },
    /// Teacher network emitting per-example, per-iteration weights in [0, 1].
    ExampleWeight { teacher: MlpSpec, phi: PhiValues },
    /// Label-pair blending grid; phi is a num_classes^2 matrix.
    Augmentation { num_classes: usize, phi: PhiValues },
    /// Network predicting a Gaussian mask center per image.
    AttentionMask {
        net: MlpSpec,
        phi: PhiValues,
        sigma: f64,
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Network emitting a [-1, 1]^k auxiliary regression target.
    AuxTarget {
        net: MlpSpec,
        phi: PhiValues,
        target_dim: usize,
        aux_weight: f64,
    },
}

impl Commentary {
    pub fn family_tag(&self) -> &'static str {
        match self {
            Commentary::Scalar { .. } => "scalar",
            Commentary::ExampleWeight { .. } => "example_weight",
            Commentary::Augmentation { .. } => "augmentation",
            Commentary::AttentionMask { .. } => "attention_mask",
            Commentary::AuxTarget { .. } => "aux_target",
        }
    }

    pub fn phi(&self) -> &PhiValues {
        match self {
            Commentary::Scalar { phi }
            | Commentary::ExampleWeight { phi, .. }
            | Commentary::Augmentation { phi, .. }
            | Commentary::AttentionMask { phi, .. }
            | Commentary::AuxTarget { phi, .. } => phi,
        }
    }

    pub fn set_phi(&mut self, new: PhiValues) {
        match self {
            Commentary::Scalar { phi }
            | Commentary::ExampleWeight { phi, .. }
            | Commentary::Augmentation { phi, .. }
            | Commentary::AttentionMask { phi, .. }
            | Commentary::AuxTarget { phi, .. } => *phi = new,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Commentary::Scalar { phi } => {
                if phi.total_dim() != 1 {
                    return Err(CoreError::InvalidSpec("scalar commentary needs 1 dim".into()));
                }
            }
            Commentary::ExampleWeight { teacher, .. } => {
                teacher.validate()?;
                if teacher.head != OutputHead::SigmoidScalar {
                    return Err(CoreError::InvalidSpec(
                        "example-weight teacher needs a sigmoid-scalar head".into(),
                    ));
                }
            }
            Commentary::Augmentation { num_classes, phi } => {
                if phi.total_dim() != num_classes * num_classes {
                    return Err(CoreError::InvalidSpec(
                        "augmentation grid must be num_classes^2".into(),
                    ));
                }
            }
            Commentary::AttentionMask { net, sigma, .. } => {
                net.validate()?;
                if *sigma <= 0.0 {
                    return Err(CoreError::InvalidSpec("mask sigma must be positive".into()));
                }
                if !matches!(net.head, OutputHead::SpatialCenter { .. }) {
                    return Err(CoreError::InvalidSpec(
                        "attention-mask net needs a spatial-center head".into(),
                    ));
                }
            }
            Commentary::AuxTarget { net, target_dim, .. } => {
                net.validate()?;
                if *target_dim == 0 {
                    return Err(CoreError::InvalidSpec("aux target dim must be >= 1".into()));
                }
                if net.head != OutputHead::BoundedVector {
                    return Err(CoreError::InvalidSpec(
                        "aux-target net needs a bounded-vector head".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A blended training batch: convex combinations of example pairs with
/// per-pair blending proportion lambda in [0.5, 1].
pub struct BlendedBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lambdas: Tensor,
    pub source_pairs: Vec<(usize, usize)>,
}

/// Per-example teacher weights in [0, 1] for the current iteration.
pub fn example_weights(
    teacher: &MlpSpec,
    phi: &ParamVector,
    inputs: &Tensor,
    iteration: usize,
    total_iterations: usize,
) -> Result<Tensor> {
    teacher_forward(teacher, phi, inputs, iteration, total_iterations)
}

/// Mean of per-example cross-entropy scaled by per-example weights.
pub fn weighted_xent(weights: &Tensor, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let per_example = softmax_cross_entropy(logits, targets)?;
    Ok(weights.mul(&per_example)?.mean())
}

/// Plain mean cross-entropy (the identity-configuration baseline).
pub fn mean_xent(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(softmax_cross_entropy(logits, targets)?.mean())
}

/// Per-pair lambda values read from the blending grid:
/// lambda_{i,j} = 1 - 0.5 * sigmoid(phi_{i,j}).
pub fn blend_lambdas(
    grid_phi: &Tensor,
    pairs: &[(usize, usize)],
    num_classes: usize,
) -> Result<Tensor> {
    let flat = grid_phi.reshape(&[num_classes * num_classes])?;
    let mut entries: Option<Tensor> = None;
    for &(y1, y2) in pairs {
        if y1 >= num_classes || y2 >= num_classes {
            return Err(CoreError::ClassOutOfRange {
                label: y1.max(y2),
                num_classes,
            });
        }
        let e = flat.slice_last(y1 * num_classes + y2, 1)?;
        entries = Some(match entries {
            None => e,
            Some(prev) => prev.concat(&e)?,
        });
    }
    let entries = entries.ok_or_else(|| CoreError::Precondition("empty batch".into()))?;
    Ok(entries.sigmoid().scale(-0.5).add_scalar(1.0))
}

/// Blend two equal-sized batches according to the grid. Inputs and the
/// soft class targets both become convex combinations; lambda stays
/// differentiable w.r.t. the grid.
pub fn blend_batch(
    grid_phi: &Tensor,
    batch1: &Batch,
    batch2: &Batch,
    num_classes: usize,
) -> Result<BlendedBatch> {
    if batch1.len() != batch2.len() || batch1.feature_dim != batch2.feature_dim {
        return Err(CoreError::ShapeMismatch(format!(
            "blend_batch: {}x{} vs {}x{}",
            batch1.len(),
            batch1.feature_dim,
            batch2.len(),
            batch2.feature_dim
        )));
    }
    let tape = grid_phi.tape();
    let pairs: Vec<(usize, usize)> = batch1
        .labels
        .iter()
        .zip(&batch2.labels)
        .map(|(&a, &b)| (a, b))
        .collect();
    let lambdas = blend_lambdas(grid_phi, &pairs, num_classes)?;
    blend_batch_with_lambdas(tape, batch1, batch2, num_classes, &lambdas, pairs)
}

/// Blend with explicit lambda values. Used directly by the identity
/// (lambda = 1) reduction and ablation paths.
pub fn blend_batch_with_lambdas(
    tape: &Tape,
    batch1: &Batch,
    batch2: &Batch,
    num_classes: usize,
    lambdas: &Tensor,
    source_pairs: Vec<(usize, usize)>,
) -> Result<BlendedBatch> {
    let (b, d) = (batch1.len(), batch1.feature_dim);
    let x1 = batch1.input_tensor(tape)?;
    let x2 = batch2.input_tensor(tape)?;
    let y1 = one_hot(tape, &batch1.labels, num_classes)?;
    let y2 = one_hot(tape, &batch2.labels, num_classes)?;
    let one_minus = lambdas.neg().add_scalar(1.0);
    let lx = row_broadcast(lambdas, d)?;
    let lxc = row_broadcast(&one_minus, d)?;
    let inputs = lx.mul(&x1)?.add(&lxc.mul(&x2)?)?;
    let ly = row_broadcast(lambdas, num_classes)?;
    let lyc = row_broadcast(&one_minus, num_classes)?;
    let targets = ly.mul(&y1)?.add(&lyc.mul(&y2)?)?;
    let _ = b;
    Ok(BlendedBatch {
        inputs,
        targets,
        lambdas: lambdas.clone(),
        source_pairs,
    })
}

/// Pixelwise Gaussian attenuation masks with peak value 1 at the
/// (possibly fractional) centers. centers: [b, 2] as (row, col).
pub fn gaussian_mask_batch(
    centers: &Tensor,
    sigma: f64,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(CoreError::Precondition("sigma must be positive".into()));
    }
    let shape = centers.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(CoreError::ShapeMismatch(format!(
            "gaussian_mask centers: {:?}",
            shape
        )));
    }
    let b = shape[0];
    let hw = height * width;
    let tape = centers.tape();
    let mut rgrid = Vec::with_capacity(hw);
    let mut cgrid = Vec::with_capacity(hw);
    for r in 0..height {
        for c in 0..width {
            rgrid.push(r as f64);
            cgrid.push(c as f64);
        }
    }
    let rconst = tape.leaf(rgrid, &[hw])?.broadcast_to(&[b, hw])?;
    let cconst = tape.leaf(cgrid, &[hw])?.broadcast_to(&[b, hw])?;
    let rows = row_broadcast(&centers.slice_last(0, 1)?.reshape(&[b])?, hw)?;
    let cols = row_broadcast(&centers.slice_last(1, 1)?.reshape(&[b])?, hw)?;
    let dr = rconst.sub(&rows)?;
    let dc = cconst.sub(&cols)?;
    let sq = dr.mul(&dr)?.add(&dc.mul(&dc)?)?;
    Ok(sq.scale(-1.0 / (2.0 * sigma * sigma)).exp())
}

/// Single-image convenience wrapper: center [2] -> mask [height*width].
pub fn gaussian_mask(center: &Tensor, sigma: f64, height: usize, width: usize) -> Result<Tensor> {
    let c = center.reshape(&[1, 2])?;
    gaussian_mask_batch(&c, sigma, height, width)?.reshape(&[height * width])
}

/// Softmax-expectation center of a single h x w logit grid -> [2].
pub fn spatial_center(logit_grid: &Tensor) -> Result<Tensor> {
    let s = logit_grid.shape();
    if s.len() != 2 {
        return Err(CoreError::ShapeMismatch(format!("spatial_center: {:?}", s)));
    }
    let (h, w) = (s[0], s[1]);
    let flat = logit_grid.reshape(&[1, h * w])?;
    crate::models::spatial_center_batch(&flat, h, w)?.reshape(&[2])
}

/// Repeat a [b, h*w] mask across channels -> [b, channels*h*w].
pub fn tile_mask_channels(mask: &Tensor, channels: usize) -> Result<Tensor> {
    let mut out = mask.clone();
    for _ in 1..channels {
        out = out.concat(mask)?;
    }
    Ok(out)
}

/// Apply the attention-mask commentary: predict centers, build masks,
/// attenuate the inputs. Returns (masked inputs, centers).
pub fn apply_attention_mask(
    net: &MlpSpec,
    phi: &ParamVector,
    inputs: &Tensor,
    sigma: f64,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<(Tensor, Tensor)> {
    let centers = forward(net, phi, inputs)?;
    let mask = gaussian_mask_batch(&centers, sigma, height, width)?;
    let tiled = tile_mask_channels(&mask, channels)?;
    Ok((inputs.mul(&tiled)?, centers))
}

/// Cross-entropy of the student on mask-attenuated inputs.
pub fn masked_loss(
    net: &MlpSpec,
    phi: &ParamVector,
    student_spec: &MlpSpec,
    student_params: &ParamVector,
    inputs: &Tensor,
    targets: &Tensor,
    sigma: f64,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Tensor> {
    let (masked, _) = apply_attention_mask(net, phi, inputs, sigma, height, width, channels)?;
    let logits = forward(student_spec, student_params, &masked)?;
    mean_xent(&logits, targets)
}

/// Squared error to the commentary vector (scaled by aux_weight) plus
/// cross-entropy on the class logits. Student outputs are
/// [b, num_classes + target_dim]: logits first, regression head last.
pub fn aux_target_loss(
    net: &MlpSpec,
    phi: &ParamVector,
    student_outputs: &Tensor,
    targets: &Tensor,
    inputs: &Tensor,
    num_classes: usize,
    target_dim: usize,
    aux_weight: f64,
) -> Result<Tensor> {
    let shape = student_outputs.shape();
    if shape.len() != 2 || shape[1] != num_classes + target_dim {
        return Err(CoreError::DimensionMismatch {
            expected: num_classes + target_dim,
            got: *shape.last().unwrap_or(&0),
        });
    }
    let logits = student_outputs.slice_last(0, num_classes)?;
    let t_hat = student_outputs.slice_last(num_classes, target_dim)?;
    let t = forward(net, phi, inputs)?;
    let aux = squared_error(&t_hat, &t)?.mean().scale(aux_weight);
    mean_xent(&logits, targets)?.add(&aux)
}
