//! Hypergradients of a student's validation loss with respect to
//! commentary parameters: exact, by backpropagating through the whole
//! inner training trajectory, and approximate, via the implicit function
//! theorem with a truncated Neumann inverse-Hessian product.

use std::rc::Rc;

use crate::commentary::{
    aux_target_loss, blend_batch, example_weights, masked_loss, mean_xent, weighted_xent,
    Commentary,
};
use crate::data::{Batch, BatchStream, Dataset, Split};
use crate::error::{CoreError, Result};
use crate::models::{accuracy, forward, init_params, one_hot, MlpSpec};
use crate::optim::{
    adam_step, flat_sgd_step, outer_adam_step, sgd_step, AdamConfig, FlatAdamState, OptState,
    SgdConfig,
};
use crate::param::{ParamVector, PhiValues};
use crate::tensor::{grad, Tape, Tensor};

/// Inner optimizer choice for student training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerOpt {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl InnerOpt {
    pub fn learning_rate(&self) -> f64 {
        match self {
            InnerOpt::Sgd(c) => c.lr,
            InnerOpt::Adam(c) => c.lr,
        }
    }
}

/// Inner-loop settings shared by both hypergradient algorithms.
#[derive(Clone, Debug)]
pub struct InnerLoopConfig {
    pub optimizer: InnerOpt,
    pub steps: usize,
    /// Unrolled-mode budget in stored floats (approximate tape footprint).
    pub memory_budget: usize,
}

impl InnerLoopConfig {
    pub fn new(optimizer: InnerOpt, steps: usize) -> Self {
        Self {
            optimizer,
            steps,
            memory_budget: 200_000_000,
        }
    }
}

/// An inner training problem seen through the eyes of the hypergradient
/// algorithms: initialize a student, evaluate the adjusted training loss
/// at a step, evaluate the plain validation loss.
pub trait InnerObjective {
    fn init_student(&self, tape: &Tape, seed: u64) -> Result<ParamVector>;
    fn train_loss(
        &self,
        tape: &Tape,
        theta: &ParamVector,
        phi: &ParamVector,
        step: usize,
    ) -> Result<Tensor>;
    fn val_loss(&self, tape: &Tape, theta: &ParamVector, phi: &ParamVector) -> Result<Tensor>;
    /// Rough floats-per-inner-step cost for the unrolled memory check.
    fn unroll_cost(&self) -> usize;
}

/// Output of one hypergradient evaluation.
pub struct HypergradResult {
    /// dL_V/dphi, flat.
    pub hypergradient: Vec<f64>,
    pub val_loss: f64,
    pub final_student: Vec<f64>,
    /// Per-inner-step training losses (unrolled mode).
    pub train_losses: Vec<f64>,
    /// |dL_T/dtheta| at the final student params (IFT diagnostic).
    pub stationarity_gap: Option<f64>,
}

/// Exact hypergradient by differentiating through `steps` inner updates
/// (Algorithm 1 style: fresh student, whole trajectory on one tape).
pub fn unrolled_hypergrad<O: InnerObjective>(
    problem: &O,
    cfg: &InnerLoopConfig,
    phi: &PhiValues,
    student_seed: u64,
) -> Result<HypergradResult> {
    let needed = cfg.steps.saturating_mul(problem.unroll_cost());
    if needed > cfg.memory_budget {
        return Err(CoreError::MemoryBudgetExceeded {
            needed,
            budget: cfg.memory_budget,
        });
    }
    let tape = Tape::new();
    let phi_t = phi.leaves(&tape)?;
    let mut theta = problem.init_student(&tape, student_seed)?;
    let mut adam_state = OptState::zeros_like(&theta);
    let mut train_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = problem.train_loss(&tape, &theta, &phi_t, step)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "training loss diverged at inner step {step}"
            )));
        }
        train_losses.push(lv);
        theta = match cfg.optimizer {
            InnerOpt::Sgd(ref c) => sgd_step(&theta, &loss, c, true)?,
            InnerOpt::Adam(ref c) => {
                let (t, s) = adam_step(&theta, &adam_state, &loss, c, true)?;
                adam_state = s;
                t
            }
        };
    }
    let val = problem.val_loss(&tape, &theta, &phi_t)?;
    let val_value = val.item();
    if !val_value.is_finite() {
        return Err(CoreError::NonFinite("validation loss is not finite".into()));
    }
    let hg = grad(&val, &phi_t.refs(), false)?;
    Ok(HypergradResult {
        hypergradient: ParamVector::new(hg).flatten(),
        val_loss: val_value,
        final_student: theta.flatten(),
        train_losses,
        stationarity_gap: None,
    })
}

/// Truncated Neumann approximation of H^-1 v:
/// alpha * sum_{j=0..terms} (I - alpha H)^j v.
pub fn neumann_inverse_hvp<F>(
    mut hvp_operator: F,
    v: &[f64],
    terms: usize,
    scale: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if scale <= 0.0 {
        return Err(CoreError::Precondition("neumann scale must be positive".into()));
    }
    let mut acc = v.to_vec();
    let mut cur = v.to_vec();
    for _ in 0..terms {
        let hv = hvp_operator(&cur)?;
        if hv.len() != v.len() {
            return Err(CoreError::DimensionMismatch {
                expected: v.len(),
                got: hv.len(),
            });
        }
        for i in 0..cur.len() {
            cur[i] -= scale * hv[i];
        }
        for (a, c) in acc.iter_mut().zip(&cur) {
            *a += c;
        }
    }
    for a in acc.iter_mut() {
        *a *= scale;
    }
    if acc.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite(
            "Neumann series diverged (spectral radius of I - alpha*H >= 1?)".into(),
        ));
    }
    Ok(acc)
}

/// Approximate hypergradient at (approximately stationary) student
/// params via the implicit function theorem:
/// -u^T d^2 L_T / (dtheta dphi) with u = H^-1 dL_V/dtheta.
pub fn ift_hypergrad<O: InnerObjective>(
    problem: &O,
    phi: &PhiValues,
    student_params: &[f64],
    student_shapes: &[Vec<usize>],
    neumann_terms: usize,
    neumann_scale: f64,
    step: usize,
) -> Result<HypergradResult> {
    let tape = Tape::new();
    let phi_t = phi.leaves(&tape)?;
    let theta = ParamVector::from_flat(&tape, student_shapes, student_params)?;

    let lt = problem.train_loss(&tape, &theta, &phi_t, step)?;
    let g_theta = ParamVector::new(grad(&lt, &theta.refs(), true)?);
    let gap = g_theta
        .flatten()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();

    let lv = problem.val_loss(&tape, &theta, &phi_t)?;
    let val_value = lv.item();
    if !val_value.is_finite() {
        return Err(CoreError::NonFinite("validation loss is not finite".into()));
    }
    let g = ParamVector::new(grad(&lv, &theta.refs(), false)?).flatten();

    let shapes = theta.shapes();
    let u = neumann_inverse_hvp(
        |v| {
            // H v via one more backward through the taped gradient.
            let vleaves = ParamVector::from_flat(&tape, &shapes, v)?;
            let inner = g_theta.dot(&vleaves)?;
            Ok(ParamVector::new(grad(&inner, &theta.refs(), false)?).flatten())
        },
        &g,
        neumann_terms,
        neumann_scale,
    )?;

    // One VJP through dL_T/dtheta with cotangent u gives
    // u^T d^2 L_T / (dtheta dphi).
    let uleaves = ParamVector::from_flat(&tape, &shapes, &u)?;
    let inner = g_theta.dot(&uleaves)?;
    let mixed = ParamVector::new(grad(&inner, &phi_t.refs(), false)?).flatten();
    let hypergradient: Vec<f64> = mixed.iter().map(|x| -x).collect();
    if hypergradient.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite("IFT hypergradient is not finite".into()));
    }
    Ok(HypergradResult {
        hypergradient,
        val_loss: val_value,
        final_student: student_params.to_vec(),
        train_losses: vec![],
        stationarity_gap: Some(gap),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Unrolled,
    Ift,
}

/// Outer-loop settings for meta-training.
#[derive(Clone, Debug)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub meta_steps: usize,
    pub outer: AdamConfig,
    pub inner: InnerLoopConfig,
    pub neumann_terms: usize,
    /// Defaults to the inner learning rate when None.
    pub neumann_scale: Option<f64>,
    /// Inner steps interleaved per meta-step in IFT mode.
    pub inner_steps_per_meta: usize,
}

impl MetaConfig {
    pub fn neumann_scale(&self) -> f64 {
        self.neumann_scale
            .unwrap_or_else(|| self.inner.optimizer.learning_rate())
    }
}

/// One row of the meta-training log.
#[derive(Clone, Debug)]
pub struct MetaRecord {
    pub meta_step: usize,
    pub val_loss: f64,
    pub train_loss: f64,
    pub hypergrad_norm: f64,
}

/// Optimize phi with either algorithm; returns the final values and a
/// per-meta-step log.
pub fn meta_train<O: InnerObjective>(
    problem: &O,
    cfg: &MetaConfig,
    phi0: &PhiValues,
    seed: u64,
) -> Result<(PhiValues, Vec<MetaRecord>)> {
    if cfg.meta_steps == 0 {
        return Err(CoreError::Precondition("meta-steps must be >= 1".into()));
    }
    let mut phi = phi0.clone();
    let mut outer_state = FlatAdamState::zeros(phi.total_dim());
    let mut log = Vec::with_capacity(cfg.meta_steps);

    match cfg.algorithm {
        Algorithm::Unrolled => {
            for t in 0..cfg.meta_steps {
                let student_seed = seed
                    .wrapping_mul(0x100_0000)
                    .wrapping_add(t as u64);
                let res = unrolled_hypergrad(problem, &cfg.inner, &phi, student_seed)?;
                let flat = phi.flatten();
                let updated = outer_adam_step(&flat, &res.hypergradient, &mut outer_state, &cfg.outer)?;
                phi = PhiValues::from_flat(phi.shapes.clone(), &updated)?;
                log.push(MetaRecord {
                    meta_step: t,
                    val_loss: res.val_loss,
                    train_loss: mean_or_nan(&res.train_losses),
                    hypergrad_norm: l2(&res.hypergradient),
                });
            }
        }
        Algorithm::Ift => {
            // Joint training: the student persists across meta-steps.
            let init_tape = Tape::new();
            let theta0 = problem.init_student(&init_tape, seed)?;
            let shapes = theta0.shapes();
            let mut theta = theta0.flatten();
            let mut inner_state = FlatAdamState::zeros(theta.len());
            let mut global_step = 0usize;
            for t in 0..cfg.meta_steps {
                let mut last_train = f64::NAN;
                for _ in 0..cfg.inner_steps_per_meta.max(1) {
                    let tape = Tape::new();
                    let phi_t = phi.leaves(&tape)?;
                    let th = ParamVector::from_flat(&tape, &shapes, &theta)?;
                    let loss = problem.train_loss(&tape, &th, &phi_t, global_step)?;
                    last_train = loss.item();
                    if !last_train.is_finite() {
                        return Err(CoreError::NonFinite(format!(
                            "training loss diverged at joint step {global_step}"
                        )));
                    }
                    let g = ParamVector::new(grad(&loss, &th.refs(), false)?).flatten();
                    theta = match cfg.inner.optimizer {
                        InnerOpt::Sgd(ref c) => flat_sgd_step(&theta, &g, c.lr),
                        InnerOpt::Adam(ref c) => {
                            outer_adam_step(&theta, &g, &mut inner_state, c)?
                        }
                    };
                    global_step += 1;
                }
                let res = ift_hypergrad(
                    problem,
                    &phi,
                    &theta,
                    &shapes,
                    cfg.neumann_terms,
                    cfg.neumann_scale(),
                    global_step,
                )?;
                let flat = phi.flatten();
                let updated = outer_adam_step(&flat, &res.hypergradient, &mut outer_state, &cfg.outer)?;
                phi = PhiValues::from_flat(phi.shapes.clone(), &updated)?;
                log.push(MetaRecord {
                    meta_step: t,
                    val_loss: res.val_loss,
                    train_loss: last_train,
                    hypergrad_norm: l2(&res.hypergradient),
                });
            }
        }
    }
    Ok((phi, log))
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ── Concrete inner problems ─────────────────────────────────────────

/// Student network trained on a dataset with a commentary-adjusted loss.
pub struct StudentProblem {
    pub student: MlpSpec,
    pub commentary: Option<Commentary>,
    pub train_stream: BatchStream,
    /// Second independent stream for blending partners.
    pub partner_stream: Option<BatchStream>,
    pub val_batch: Batch,
    pub num_classes: usize,
    pub total_iterations: usize,
}

impl StudentProblem {
    pub fn new(
        student: MlpSpec,
        commentary: Option<Commentary>,
        dataset: Rc<Dataset>,
        batch_size: usize,
        data_seed: u64,
        total_iterations: usize,
        max_val_examples: usize,
    ) -> Result<Self> {
        let train_stream = BatchStream::new(dataset.clone(), Split::Train, batch_size, data_seed)?;
        let partner_stream = match commentary {
            Some(Commentary::Augmentation { .. }) => Some(BatchStream::new(
                dataset.clone(),
                Split::Train,
                batch_size,
                data_seed ^ 0x5EED_BEEF,
            )?),
            _ => None,
        };
        let val_range = dataset.split_range(Split::Validation);
        let val_idx: Vec<usize> = val_range.take(max_val_examples).collect();
        if val_idx.is_empty() {
            return Err(CoreError::EmptySplit("validation".into()));
        }
        let val_batch = dataset.gather(&val_idx);
        let num_classes = dataset.num_classes;
        Ok(Self {
            student,
            commentary,
            train_stream,
            partner_stream,
            val_batch,
            num_classes,
            total_iterations,
        })
    }

    /// Adjusted training loss for an explicit batch.
    pub fn adjusted_loss_on(
        &self,
        tape: &Tape,
        theta: &ParamVector,
        phi: &ParamVector,
        batch: &Batch,
        step: usize,
    ) -> Result<Tensor> {
        let inputs = batch.input_tensor(tape)?;
        match &self.commentary {
            None => {
                let logits = forward(&self.student, theta, &inputs)?;
                let targets = one_hot(tape, &batch.labels, self.num_classes)?;
                mean_xent(&logits, &targets)
            }
            Some(Commentary::Scalar { .. }) => Err(CoreError::Precondition(
                "scalar commentary has no student loss; use QuadraticBilevel".into(),
            )),
            Some(Commentary::ExampleWeight { teacher, .. }) => {
                let w = example_weights(teacher, phi, &inputs, step, self.total_iterations)?;
                let logits = forward(&self.student, theta, &inputs)?;
                let targets = one_hot(tape, &batch.labels, self.num_classes)?;
                weighted_xent(&w, &logits, &targets)
            }
            Some(Commentary::Augmentation { num_classes, .. }) => {
                let partner = self
                    .partner_stream
                    .as_ref()
                    .expect("augmentation problem has a partner stream")
                    .batch_at(step);
                let blended = blend_batch(&phi.tensors[0], batch, &partner, *num_classes)?;
                let logits = forward(&self.student, theta, &blended.inputs)?;
                mean_xent(&logits, &blended.targets)
            }
            Some(Commentary::AttentionMask {
                net,
                sigma,
                height,
                width,
                channels,
                ..
            }) => {
                let targets = one_hot(tape, &batch.labels, self.num_classes)?;
                masked_loss(
                    net, phi, &self.student, theta, &inputs, &targets, *sigma, *height, *width,
                    *channels,
                )
            }
            Some(Commentary::AuxTarget {
                net,
                target_dim,
                aux_weight,
                ..
            }) => {
                let outputs = forward(&self.student, theta, &inputs)?;
                let targets = one_hot(tape, &batch.labels, self.num_classes)?;
                aux_target_loss(
                    net,
                    phi,
                    &outputs,
                    &targets,
                    &inputs,
                    self.num_classes,
                    *target_dim,
                    *aux_weight,
                )
            }
        }
    }

    /// Class logits for evaluation. The attention mask applies at
    /// validation/test time; the aux head is sliced away.
    pub fn eval_logits(
        &self,
        tape: &Tape,
        theta: &ParamVector,
        phi: &ParamVector,
        batch: &Batch,
    ) -> Result<Tensor> {
        let inputs = batch.input_tensor(tape)?;
        match &self.commentary {
            Some(Commentary::AttentionMask {
                net,
                sigma,
                height,
                width,
                channels,
                ..
            }) => {
                let (masked, _) = crate::commentary::apply_attention_mask(
                    net, phi, &inputs, *sigma, *height, *width, *channels,
                )?;
                forward(&self.student, theta, &masked)
            }
            Some(Commentary::AuxTarget { target_dim, .. }) => {
                let out = forward(&self.student, theta, &inputs)?;
                let _ = target_dim;
                out.slice_last(0, self.num_classes)
            }
            _ => forward(&self.student, theta, &inputs),
        }
    }

    pub fn eval_metrics(
        &self,
        theta_flat: &[f64],
        shapes: &[Vec<usize>],
        phi: &PhiValues,
        batch: &Batch,
    ) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let theta = ParamVector::from_flat(&tape, shapes, theta_flat)?;
        let phi_t = phi.leaves(&tape)?;
        let logits = self.eval_logits(&tape, &theta, &phi_t, batch)?;
        let targets = one_hot(&tape, &batch.labels, self.num_classes)?;
        let loss = mean_xent(&logits, &targets)?.item();
        let acc = accuracy(&logits, &batch.labels);
        Ok((loss, acc))
    }
}

impl InnerObjective for StudentProblem {
    fn init_student(&self, tape: &Tape, seed: u64) -> Result<ParamVector> {
        init_params(&self.student, seed, tape)
    }

    fn train_loss(
        &self,
        tape: &Tape,
        theta: &ParamVector,
        phi: &ParamVector,
        step: usize,
    ) -> Result<Tensor> {
        let batch = self.train_stream.batch_at(step);
        self.adjusted_loss_on(tape, theta, phi, &batch, step)
    }

    fn val_loss(&self, tape: &Tape, theta: &ParamVector, phi: &ParamVector) -> Result<Tensor> {
        // Plain (unadjusted) cross-entropy; the mask family still
        // attenuates inputs because masks apply at evaluation time too.
        let logits = self.eval_logits(tape, theta, phi, &self.val_batch)?;
        let targets = one_hot(tape, &self.val_batch.labels, self.num_classes)?;
        mean_xent(&logits, &targets)
    }

    fn unroll_cost(&self) -> usize {
        let batch = self.train_stream.batch_at(0).len();
        let phi_dim = self
            .commentary
            .as_ref()
            .map(|c| c.phi().total_dim())
            .unwrap_or(0);
        // Forward activations + taped gradient copies, per step.
        8 * (batch * self.student.input_dim() + self.student.param_dim() + phi_dim)
    }
}

/// The textbook quadratic bilevel problem:
/// L_T = 1/2 (theta - phi)^2, L_V = 1/2 (theta - c)^2, optimum phi* = c.
pub struct QuadraticBilevel {
    pub target: f64,
}

impl QuadraticBilevel {
    pub fn initial_phi(phi0: f64) -> PhiValues {
        PhiValues {
            shapes: vec![vec![]],
            values: vec![vec![phi0]],
        }
    }
}

impl InnerObjective for QuadraticBilevel {
    fn init_student(&self, tape: &Tape, _seed: u64) -> Result<ParamVector> {
        Ok(ParamVector::new(vec![tape.scalar(0.0)]))
    }

    fn train_loss(
        &self,
        _tape: &Tape,
        theta: &ParamVector,
        phi: &ParamVector,
        _step: usize,
    ) -> Result<Tensor> {
        let d = theta.tensors[0].sub(&phi.tensors[0])?;
        Ok(d.mul(&d)?.scale(0.5))
    }

    fn val_loss(&self, tape: &Tape, theta: &ParamVector, _phi: &ParamVector) -> Result<Tensor> {
        let c = tape.scalar(self.target);
        let d = theta.tensors[0].sub(&c)?;
        Ok(d.mul(&d)?.scale(0.5))
    }

    fn unroll_cost(&self) -> usize {
        16
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_unrolled_quadratic_is_exact() {
        // lr = 1 makes theta_1 = phi exactly, so dL_V/dphi = phi - c.
        let problem = QuadraticBilevel { target: 5.0 };
        let cfg = InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(1.0).unwrap()), 1);
        let phi = QuadraticBilevel::initial_phi(2.0);
        let res = unrolled_hypergrad(&problem, &cfg, &phi, 0).unwrap();
        assert_eq!(res.hypergradient, vec![-3.0]);
        assert_eq!(res.final_student, vec![2.0]);
        assert_eq!(res.val_loss, 0.5 * 9.0);
        assert_eq!(res.train_losses.len(), 1);
    }

    #[test]
    fn multi_step_unrolled_matches_the_closed_form() {
        // SGD with lr a on L_T = 1/2 (theta - phi)^2 from theta_0 = 0:
        // theta_N = phi (1 - (1-a)^N), so
        // dL_V/dphi = (theta_N - c) (1 - (1-a)^N).
        let (a, n, c, phi0) = (0.3, 4usize, 2.0, 1.5);
        let problem = QuadraticBilevel { target: c };
        let cfg = InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(a).unwrap()), n);
        let phi = QuadraticBilevel::initial_phi(phi0);
        let res = unrolled_hypergrad(&problem, &cfg, &phi, 0).unwrap();
        let contraction = 1.0 - (1.0 - a).powi(n as i32);
        let theta_n = phi0 * contraction;
        let expected = (theta_n - c) * contraction;
        assert!((res.hypergradient[0] - expected).abs() < 1e-12);
        assert!((res.final_student[0] - theta_n).abs() < 1e-12);
    }

    #[test]
    fn unrolled_memory_budget_is_enforced() {
        let problem = QuadraticBilevel { target: 1.0 };
        let mut cfg = InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(0.5).unwrap()), 10);
        cfg.memory_budget = 3;
        let phi = QuadraticBilevel::initial_phi(0.0);
        assert!(matches!(
            unrolled_hypergrad(&problem, &cfg, &phi, 0),
            Err(CoreError::MemoryBudgetExceeded { .. })
        ));
    }

    #[test]
    fn neumann_is_exact_for_the_identity_hessian() {
        let v = vec![2.0, -3.0, 0.5];
        let out = neumann_inverse_hvp(|x| Ok(x.to_vec()), &v, 1, 1.0).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn neumann_converges_geometrically_on_a_scalar() {
        // H = 2, alpha = 0.25: alpha * sum (1 - 0.5)^j -> 0.5 = 1/H.
        let out = neumann_inverse_hvp(
            |x| Ok(x.iter().map(|v| 2.0 * v).collect()),
            &[1.0],
            20,
            0.25,
        )
        .unwrap();
        assert!((out[0] - 0.5).abs() < 1e-2);
        // 20 terms leave an error of 0.5^21 in this geometric series.
        assert!((out[0] - 0.5 * (1.0 - 0.5f64.powi(21))).abs() < 1e-12);
        // More terms can only tighten it.
        let out40 = neumann_inverse_hvp(
            |x| Ok(x.iter().map(|v| 2.0 * v).collect()),
            &[1.0],
            40,
            0.25,
        )
        .unwrap();
        assert!((out40[0] - 0.5).abs() <= (out[0] - 0.5).abs());
        assert!(neumann_inverse_hvp(|x| Ok(x.to_vec()), &[1.0], 5, 0.0).is_err());
    }

    #[test]
    fn neumann_diagonal_spd_error_shrinks_with_terms() {
        // H = diag(1, 2, 4); exact inverse applied to v is v_i / h_i.
        let h = [1.0, 2.0, 4.0];
        let v = [1.0, 1.0, 1.0];
        let apply = |x: &[f64]| Ok(x.iter().zip(h.iter()).map(|(a, b)| a * b).collect());
        let err = |terms: usize| {
            let out = neumann_inverse_hvp(apply, &v, terms, 0.2).unwrap();
            out.iter()
                .zip(h.iter())
                .map(|(o, hi)| (o - 1.0 / hi).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (e5, e20, e80) = (err(5), err(20), err(80));
        assert!(e20 < e5 && e80 < e20, "{e5} {e20} {e80}");
        assert!(e80 < 1e-2);
    }

    #[test]
    fn ift_on_the_quadratic_matches_the_exact_hypergradient() {
        // At any theta: H = 1, dL_V/dtheta = theta - c, mixed term = -1,
        // so the exact hypergradient is theta - c.
        let problem = QuadraticBilevel { target: 4.0 };
        let phi = QuadraticBilevel::initial_phi(1.0);
        let res = ift_hypergrad(&problem, &phi, &[1.0], &[vec![]], 50, 0.5, 0).unwrap();
        assert!((res.hypergradient[0] - (1.0 - 4.0)).abs() < 1e-6);
        // theta == phi is stationary for the inner loss.
        assert!(res.stationarity_gap.unwrap() < 1e-12);
        // Away from stationarity the gap reports |theta - phi|.
        let res2 = ift_hypergrad(&problem, &phi, &[3.5], &[vec![]], 50, 0.5, 0).unwrap();
        assert!((res2.stationarity_gap.unwrap() - 2.5).abs() < 1e-12);
        // Zero validation gradient gives a zero hypergradient.
        let res3 = ift_hypergrad(&problem, &phi, &[4.0], &[vec![]], 50, 0.5, 0).unwrap();
        assert_eq!(res3.hypergradient, vec![0.0]);
    }

    #[test]
    fn meta_training_solves_the_quadratic_with_both_algorithms() {
        let problem = QuadraticBilevel { target: 1.5 };
        let unrolled = MetaConfig {
            algorithm: Algorithm::Unrolled,
            meta_steps: 300,
            outer: AdamConfig::new(0.1),
            inner: InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(1.0).unwrap()), 3),
            neumann_terms: 0,
            neumann_scale: None,
            inner_steps_per_meta: 1,
        };
        let phi0 = QuadraticBilevel::initial_phi(0.0);
        let (phi, log) = meta_train(&problem, &unrolled, &phi0, 7).unwrap();
        assert_eq!(log.len(), 300);
        assert!(
            (phi.flatten()[0] - 1.5).abs() < 1e-2,
            "unrolled phi = {}",
            phi.flatten()[0]
        );
        assert!(log.last().unwrap().val_loss < log[0].val_loss);

        let ift = MetaConfig {
            algorithm: Algorithm::Ift,
            meta_steps: 300,
            outer: AdamConfig::new(0.1),
            inner: InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(0.5).unwrap()), 0),
            neumann_terms: 30,
            neumann_scale: Some(0.5),
            inner_steps_per_meta: 10,
        };
        let (phi_ift, log_ift) = meta_train(&problem, &ift, &phi0, 7).unwrap();
        assert!(
            (phi_ift.flatten()[0] - 1.5).abs() < 5e-2,
            "ift phi = {}",
            phi_ift.flatten()[0]
        );
        assert!(log_ift.last().unwrap().val_loss < log_ift[0].val_loss);
    }

    #[test]
    fn zero_meta_steps_is_rejected() {
        let problem = QuadraticBilevel { target: 1.0 };
        let cfg = MetaConfig {
            algorithm: Algorithm::Unrolled,
            meta_steps: 0,
            outer: AdamConfig::new(0.1),
            inner: InnerLoopConfig::new(InnerOpt::Sgd(SgdConfig::new(0.5).unwrap()), 1),
            neumann_terms: 0,
            neumann_scale: None,
            inner_steps_per_meta: 1,
        };
        assert!(meta_train(&problem, &cfg, &QuadraticBilevel::initial_phi(0.0), 0).is_err());
    }
}
