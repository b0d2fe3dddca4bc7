//! Experiment execution: meta-training commentaries and evaluating
//! frozen commentary artifacts on fresh students.

use std::path::Path;
use std::rc::Rc;

use commentary_core::commentary::Commentary;
use commentary_core::data::{
    gen_rotated, gen_spurious_background, gen_two_object, load_idx, Dataset, RotatedSpec, Split,
};
use commentary_core::hypergrad::{
    ift_hypergrad, unrolled_hypergrad, Algorithm, InnerLoopConfig, InnerObjective, InnerOpt,
    QuadraticBilevel, StudentProblem,
};
use commentary_core::models::{init_params, Activation, MlpSpec, OutputHead};
use commentary_core::optim::{outer_adam_step, AdamConfig, FlatAdamState, SgdConfig};
use commentary_core::param::{ParamVector, PhiValues};
use commentary_core::tensor::{grad, Tape};

use crate::artifact::{provenance_timestamp, CommentaryArtifact};
use crate::config::{DatasetConfig, ExperimentConfig, Family, OptimizerKind};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsLog, MetricsRow, WallClock};

pub const ARTIFACT_FILE: &str = "commentary.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Option<Rc<Dataset>>> {
    let ds = match &cfg.dataset {
        DatasetConfig::Quadratic => return Ok(None),
        DatasetConfig::Rotated {
            mode,
            train,
            validation,
            test,
            image_side,
            seed,
        } => gen_rotated(&RotatedSpec {
            mode: *mode,
            train: *train,
            validation: *validation,
            test: *test,
            image_side: *image_side,
            seed: *seed,
        })?,
        DatasetConfig::TwoObject {
            train,
            validation,
            test,
            image_side,
            seed,
        } => gen_two_object(*train, *validation, *test, *image_side, *seed)?,
        DatasetConfig::Spurious {
            train,
            validation,
            test,
            image_side,
            num_classes,
            seed,
        } => gen_spurious_background(*train, *validation, *test, *image_side, *num_classes, *seed)?,
        DatasetConfig::Idx { images, labels } => load_idx(images, labels)?,
    };
    Ok(Some(Rc::new(ds)))
}

/// Student network for this config; the aux-target family widens the
/// output layer by the regression head.
pub fn student_spec(cfg: &ExperimentConfig, dataset: &Dataset, with_aux_head: bool) -> Result<MlpSpec> {
    let mut widths = vec![dataset.feature_dim];
    widths.extend(&cfg.student_hidden);
    let out = if with_aux_head && cfg.family == Family::AuxTarget {
        dataset.num_classes + cfg.target_dim
    } else {
        dataset.num_classes
    };
    widths.push(out);
    Ok(MlpSpec::new(widths, Activation::Relu, OutputHead::Logits)?)
}

/// Commentary with freshly initialized phi for this config.
pub fn build_commentary(cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<Option<Commentary>> {
    let phi_seed = cfg.meta_seed ^ 0x00C0_FFEE;
    let init_phi = |spec: &MlpSpec| -> Result<PhiValues> {
        let tape = Tape::new();
        Ok(PhiValues::from_param(&init_params(spec, phi_seed, &tape)?))
    };
    let need_data = || -> Result<&Dataset> {
        dataset.ok_or_else(|| HarnessError::Config("this commentary family needs a dataset".into()))
    };
    let commentary = match cfg.family {
        Family::None => return Ok(None),
        Family::Scalar => Commentary::Scalar {
            phi: QuadraticBilevel::initial_phi(cfg.quadratic_phi0),
        },
        Family::ExampleWeight => {
            let ds = need_data()?;
            let mut widths = vec![ds.feature_dim + 1];
            widths.extend(&cfg.commentary_hidden);
            widths.push(1);
            let teacher = MlpSpec::new(widths, Activation::Relu, OutputHead::SigmoidScalar)?;
            let mut phi = init_phi(&teacher)?;
            // Bias the sigmoid head so initial weights sit near 1: the
            // commentary starts as (almost) the identity configuration
            // and meta-training learns deviations from the baseline
            // instead of spending its budget recovering the baseline's
            // effective learning rate.
            for b in phi.values.last_mut().expect("teacher has parameters") {
                *b += 2.2;
            }
            Commentary::ExampleWeight { teacher, phi }
        }
        Family::Augmentation => {
            let ds = need_data()?;
            let n = ds.num_classes;
            // Zero grid: every lambda starts at 0.75.
            Commentary::Augmentation {
                num_classes: n,
                phi: PhiValues {
                    shapes: vec![vec![n, n]],
                    values: vec![vec![0.0; n * n]],
                },
            }
        }
        Family::AttentionMask => {
            let ds = need_data()?;
            let (h, w) = (ds.height, ds.width);
            let mut widths = vec![ds.feature_dim];
            widths.extend(&cfg.commentary_hidden);
            widths.push(h * w);
            let net = MlpSpec::new(
                widths,
                Activation::Relu,
                OutputHead::SpatialCenter { rows: h, cols: w },
            )?;
            let phi = init_phi(&net)?;
            Commentary::AttentionMask {
                net,
                phi,
                sigma: cfg.sigma,
                height: h,
                width: w,
                channels: ds.channels,
            }
        }
        Family::AuxTarget => {
            let ds = need_data()?;
            let mut widths = vec![ds.feature_dim];
            widths.extend(&cfg.commentary_hidden);
            widths.push(cfg.target_dim);
            let net = MlpSpec::new(widths, Activation::Relu, OutputHead::BoundedVector)?;
            let phi = init_phi(&net)?;
            Commentary::AuxTarget {
                net,
                phi,
                target_dim: cfg.target_dim,
                aux_weight: cfg.aux_weight,
            }
        }
    };
    commentary.validate()?;
    Ok(Some(commentary))
}

pub fn inner_opt(cfg: &ExperimentConfig) -> Result<InnerOpt> {
    Ok(match cfg.inner_optimizer {
        OptimizerKind::Sgd => InnerOpt::Sgd(SgdConfig::new(cfg.inner_lr)?),
        OptimizerKind::Adam => {
            let mut c = AdamConfig::new(cfg.inner_lr);
            c.epsilon = cfg.inner_eps;
            InnerOpt::Adam(c)
        }
    })
}

pub fn build_problem(
    cfg: &ExperimentConfig,
    dataset: Rc<Dataset>,
    commentary: Option<Commentary>,
    data_seed: u64,
) -> Result<StudentProblem> {
    let with_aux = commentary
        .as_ref()
        .map(|c| matches!(c, Commentary::AuxTarget { .. }))
        .unwrap_or(false);
    let student = student_spec(cfg, &dataset, with_aux)?;
    Ok(StudentProblem::new(
        student,
        commentary,
        dataset,
        cfg.inner_batch_size,
        data_seed,
        cfg.inner_steps,
        cfg.val_examples,
    )?)
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn phi_fingerprint(phi: &PhiValues) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for v in phi.flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Outer meta-training loop over a generic inner objective. Mirrors the
/// library meta_train but logs per step so partial metrics survive a
/// divergence error.
fn meta_loop<O: InnerObjective>(
    problem: &O,
    cfg: &ExperimentConfig,
    phi0: &PhiValues,
    log: &mut MetricsLog,
    quiet: bool,
) -> Result<PhiValues> {
    let clock = WallClock::start();
    let inner = InnerLoopConfig {
        optimizer: inner_opt(cfg)?,
        steps: cfg.inner_steps,
        memory_budget: cfg.memory_budget,
    };
    let outer = AdamConfig::new(cfg.outer_lr);
    let mut phi = phi0.clone();
    let mut outer_state = FlatAdamState::zeros(phi.total_dim());

    // Persistent student state for the joint (IFT) mode.
    let mut joint: Option<(Vec<f64>, Vec<Vec<usize>>, FlatAdamState, usize)> = None;
    if cfg.algorithm == Algorithm::Ift {
        let tape = Tape::new();
        let theta0 = problem.init_student(&tape, cfg.meta_seed)?;
        let shapes = theta0.shapes();
        let flat = theta0.flatten();
        let dim = flat.len();
        joint = Some((flat, shapes, FlatAdamState::zeros(dim), 0));
    }

    for t in 0..cfg.meta_steps {
        let (hypergradient, val_loss, train_loss) = match cfg.algorithm {
            Algorithm::Unrolled => {
                let student_seed = cfg.meta_seed.wrapping_mul(0x100_0000).wrapping_add(t as u64);
                let res = unrolled_hypergrad(problem, &inner, &phi, student_seed)?;
                let train = res.train_losses.iter().sum::<f64>()
                    / res.train_losses.len().max(1) as f64;
                (res.hypergradient, res.val_loss, train)
            }
            Algorithm::Ift => {
                let (theta, shapes, state, step) = joint.as_mut().unwrap();
                let mut last_train = f64::NAN;
                for _ in 0..cfg.inner_steps_per_meta.max(1) {
                    let tape = Tape::new();
                    let phi_t = phi.leaves(&tape)?;
                    let th = ParamVector::from_flat(&tape, shapes, theta)?;
                    let loss = problem.train_loss(&tape, &th, &phi_t, *step)?;
                    last_train = loss.item();
                    if !last_train.is_finite() {
                        return Err(HarnessError::Core(
                            commentary_core::CoreError::NonFinite(format!(
                                "training loss diverged at joint step {step}"
                            )),
                        ));
                    }
                    let g = ParamVector::new(grad(&loss, &th.refs(), false)?).flatten();
                    *theta = match inner.optimizer {
                        InnerOpt::Sgd(ref c) => {
                            commentary_core::optim::flat_sgd_step(theta, &g, c.lr)
                        }
                        InnerOpt::Adam(ref c) => outer_adam_step(theta, &g, state, c)?,
                    };
                    *step += 1;
                }
                let scale = cfg.neumann_scale.unwrap_or(cfg.inner_lr);
                let res = ift_hypergrad(
                    problem,
                    &phi,
                    theta,
                    shapes,
                    cfg.neumann_terms,
                    scale,
                    *step,
                )?;
                (res.hypergradient, res.val_loss, last_train)
            }
        };
        let flat = phi.flatten();
        let updated = outer_adam_step(&flat, &hypergradient, &mut outer_state, &outer)?;
        phi = PhiValues::from_flat(phi.shapes.clone(), &updated)?;
        log.push(MetricsRow {
            phase: "meta".into(),
            step: t,
            seed: cfg.meta_seed,
            train_loss,
            val_loss,
            test_acc: f64::NAN,
            wall_time_ms: clock.elapsed_ms(),
        })?;
        if !quiet {
            println!(
                "meta step {t}: val_loss {val_loss:.6} train_loss {train_loss:.6} |hg| {:.3e}",
                l2(&hypergradient)
            );
        }
    }
    Ok(phi)
}

/// Meta-train per the config; writes the commentary artifact and metrics
/// CSV into `out_dir`. On divergence the partial metrics are still
/// written before the error propagates.
pub fn run_meta(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    quiet: bool,
) -> Result<(CommentaryArtifact, MetricsLog)> {
    std::fs::create_dir_all(out_dir)?;
    let mut log = MetricsLog::new();
    let result = run_meta_inner(cfg, &mut log, quiet);
    log.save(&out_dir.join(METRICS_FILE))?;
    let artifact = result?;
    artifact.save(&out_dir.join(ARTIFACT_FILE))?;
    Ok((artifact, log))
}

fn run_meta_inner(
    cfg: &ExperimentConfig,
    log: &mut MetricsLog,
    quiet: bool,
) -> Result<CommentaryArtifact> {
    let dataset = build_dataset(cfg)?;
    let mut commentary = build_commentary(cfg, dataset.as_deref())?
        .ok_or_else(|| HarnessError::Config("meta-training needs a commentary family".into()))?;
    let phi0 = commentary.phi().clone();
    let phi = match &cfg.dataset {
        DatasetConfig::Quadratic => {
            let problem = QuadraticBilevel {
                target: cfg.quadratic_target,
            };
            meta_loop(&problem, cfg, &phi0, log, quiet)?
        }
        _ => {
            let dataset = dataset.expect("non-quadratic config has a dataset");
            let problem = build_problem(cfg, dataset, Some(commentary.clone()), cfg.meta_seed)?;
            meta_loop(&problem, cfg, &phi0, log, quiet)?
        }
    };
    commentary.set_phi(phi);
    Ok(CommentaryArtifact {
        commentary,
        config_hash: cfg.hash(),
        meta_seed: cfg.meta_seed,
        timestamp: provenance_timestamp(),
    })
}

fn check_compatible(commentary: &Commentary, dataset: &Dataset) -> Result<()> {
    let mismatch = |msg: String| Err(HarnessError::ArtifactIncompatible(msg));
    match commentary {
        Commentary::Scalar { .. } => {
            return mismatch("the scalar family has no student evaluation".into())
        }
        Commentary::ExampleWeight { teacher, .. } => {
            if teacher.input_dim() != dataset.feature_dim + 1 {
                return mismatch(format!(
                    "teacher expects {} input features, dataset provides {} (+1 iteration)",
                    teacher.input_dim(),
                    dataset.feature_dim
                ));
            }
        }
        Commentary::Augmentation { num_classes, .. } => {
            if *num_classes != dataset.num_classes {
                return mismatch(format!(
                    "grid covers {num_classes} classes, dataset has {}",
                    dataset.num_classes
                ));
            }
        }
        Commentary::AttentionMask {
            net,
            height,
            width,
            channels,
            ..
        } => {
            if net.input_dim() != dataset.feature_dim
                || *height != dataset.height
                || *width != dataset.width
                || *channels != dataset.channels
            {
                return mismatch(format!(
                    "mask geometry {height}x{width}x{channels} vs dataset {}x{}x{}",
                    dataset.height, dataset.width, dataset.channels
                ));
            }
        }
        Commentary::AuxTarget { net, .. } => {
            if net.input_dim() != dataset.feature_dim {
                return mismatch(format!(
                    "aux net expects {} input features, dataset provides {}",
                    net.input_dim(),
                    dataset.feature_dim
                ));
            }
        }
    }
    Ok(())
}

/// One fresh-student training run with frozen phi; logs every
/// `log_interval` steps plus the final step.
fn eval_one(
    cfg: &ExperimentConfig,
    dataset: &Rc<Dataset>,
    commentary: Option<Commentary>,
    seed: u64,
    phase: &str,
    log: &mut MetricsLog,
) -> Result<f64> {
    let clock = WallClock::start();
    let problem = build_problem(cfg, dataset.clone(), commentary, seed)?;
    let phi = problem
        .commentary
        .as_ref()
        .map(|c| c.phi().clone())
        .unwrap_or(PhiValues {
            shapes: vec![],
            values: vec![],
        });
    let opt = inner_opt(cfg)?;

    let init_tape = Tape::new();
    let theta0 = problem.init_student(&init_tape, seed)?;
    let shapes = theta0.shapes();
    let mut theta = theta0.flatten();
    let mut adam = FlatAdamState::zeros(theta.len());

    let test_idx: Vec<usize> = dataset.split_range(Split::Test).take(cfg.val_examples).collect();
    let test_batch = dataset.gather(&test_idx);
    let val_batch = problem.val_batch.clone();

    let mut last_val = f64::NAN;
    for step in 0..cfg.eval_steps {
        let tape = Tape::new();
        let phi_t = phi.leaves(&tape)?;
        let th = ParamVector::from_flat(&tape, &shapes, &theta)?;
        let loss = problem.train_loss(&tape, &th, &phi_t, step)?;
        let train_loss = loss.item();
        if !train_loss.is_finite() {
            return Err(HarnessError::Core(commentary_core::CoreError::NonFinite(
                format!("{phase} run diverged at step {step}"),
            )));
        }
        let g = ParamVector::new(grad(&loss, &th.refs(), false)?).flatten();
        theta = match opt {
            InnerOpt::Sgd(ref c) => commentary_core::optim::flat_sgd_step(&theta, &g, c.lr),
            InnerOpt::Adam(ref c) => outer_adam_step(&theta, &g, &mut adam, c)?,
        };
        let done = step + 1;
        if done % cfg.log_interval == 0 || done == cfg.eval_steps {
            let (val_loss, _) = problem.eval_metrics(&theta, &shapes, &phi, &val_batch)?;
            let (_, test_acc) = problem.eval_metrics(&theta, &shapes, &phi, &test_batch)?;
            last_val = val_loss;
            log.push(MetricsRow {
                phase: phase.into(),
                step: done,
                seed,
                train_loss,
                val_loss,
                test_acc,
                wall_time_ms: clock.elapsed_ms(),
            })?;
        }
    }
    Ok(last_val)
}

/// Evaluate a frozen commentary on fresh students, paired with the
/// no-commentary baseline under the same seeds. phi is asserted frozen
/// by fingerprinting before and after.
pub fn run_eval(
    artifact: &CommentaryArtifact,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    quiet: bool,
) -> Result<MetricsLog> {
    let dataset = build_dataset(cfg)?
        .ok_or_else(|| HarnessError::ArtifactIncompatible("quadratic config has no dataset".into()))?;
    check_compatible(&artifact.commentary, &dataset)?;
    let phi_before = phi_fingerprint(artifact.commentary.phi());

    let mut log = MetricsLog::new();
    for &seed in &cfg.eval_seeds {
        let v1 = eval_one(
            cfg,
            &dataset,
            Some(artifact.commentary.clone()),
            seed,
            "eval",
            &mut log,
        )?;
        let v2 = eval_one(cfg, &dataset, None, seed, "baseline", &mut log)?;
        if !quiet {
            println!("seed {seed}: final val_loss commentary {v1:.6} baseline {v2:.6}");
        }
    }
    if phi_fingerprint(artifact.commentary.phi()) != phi_before {
        return Err(HarnessError::Artifact(
            "phi changed during evaluation".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    log.save(&out_dir.join(EVAL_METRICS_FILE))?;
    Ok(log)
}
