//! Line-oriented `key = value` experiment configuration.
//!
//! Keys use dotted sections (`inner.steps = 200`). Blank lines and lines
//! starting with `#` are ignored. Unknown keys are rejected before any
//! compute starts, and every referenced field is validated up front.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use commentary_core::data::RotationMode;
use commentary_core::hypergrad::Algorithm;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetConfig {
    /// The scalar quadratic bilevel smoke task; no dataset is generated.
    Quadratic,
    Rotated {
        mode: RotationMode,
        train: usize,
        validation: usize,
        test: usize,
        image_side: usize,
        seed: u64,
    },
    TwoObject {
        train: usize,
        validation: usize,
        test: usize,
        image_side: usize,
        seed: u64,
    },
    Spurious {
        train: usize,
        validation: usize,
        test: usize,
        image_side: usize,
        num_classes: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    None,
    Scalar,
    ExampleWeight,
    Augmentation,
    AttentionMask,
    AuxTarget,
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::None => "none",
            Family::Scalar => "scalar",
            Family::ExampleWeight => "example_weight",
            Family::Augmentation => "augmentation",
            Family::AttentionMask => "attention_mask",
            Family::AuxTarget => "aux_target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub family: Family,
    /// Hidden widths of the commentary network, where the family has one.
    pub commentary_hidden: Vec<usize>,
    pub sigma: f64,
    pub target_dim: usize,
    pub aux_weight: f64,
    /// Hidden widths of the student network (empty = linear).
    pub student_hidden: Vec<usize>,
    pub algorithm: Algorithm,
    pub inner_steps: usize,
    pub inner_batch_size: usize,
    pub inner_optimizer: OptimizerKind,
    pub inner_lr: f64,
    /// Adam epsilon for the inner optimizer. Differentiating through an
    /// unrolled Adam trajectory is sensitive to this: tiny-gradient
    /// coordinates make the update's derivative scale like 1/epsilon.
    pub inner_eps: f64,
    pub memory_budget: usize,
    pub meta_steps: usize,
    pub outer_lr: f64,
    pub neumann_terms: usize,
    pub neumann_scale: Option<f64>,
    pub inner_steps_per_meta: usize,
    pub meta_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub eval_steps: usize,
    pub log_interval: usize,
    pub val_examples: usize,
    pub quadratic_target: f64,
    pub quadratic_phi0: f64,
    pub out_dir: Option<PathBuf>,
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::ConfigLine {
                line: idx + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(HarnessError::ConfigLine {
                line: idx + 1,
                msg: "empty key or value".into(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(HarnessError::ConfigLine {
                line: idx + 1,
                msg: format!("duplicate key {key}"),
            });
        }
    }
    Ok(map)
}

struct KeyReader {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl KeyReader {
    fn get(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| HarnessError::Config(format!("invalid value for {key}: {v:?}"))),
        }
    }

    fn parse_list(&mut self, key: &str, default: Vec<u64>) -> Result<Vec<u64>> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("invalid value for {key}: {v:?}")))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(HarnessError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let mut r = KeyReader {
            map: parse_lines(text)?,
            used: Default::default(),
        };

        let kind = r
            .get("dataset.kind")
            .ok_or_else(|| HarnessError::Config("dataset.kind is required".into()))?;
        let dataset = match kind.as_str() {
            "quadratic" => DatasetConfig::Quadratic,
            "rotated" => DatasetConfig::Rotated {
                mode: match r.get("dataset.mode").as_deref() {
                    None | Some("non_overlapping") => RotationMode::NonOverlapping,
                    Some("overlapping") => RotationMode::Overlapping,
                    Some(other) => {
                        return Err(HarnessError::Config(format!("invalid dataset.mode {other:?}")))
                    }
                },
                train: r.parse("dataset.train", 2000)?,
                validation: r.parse("dataset.validation", 500)?,
                test: r.parse("dataset.test", 500)?,
                image_side: r.parse("dataset.image_side", 16)?,
                seed: r.parse("dataset.seed", 0)?,
            },
            "two_object" => DatasetConfig::TwoObject {
                train: r.parse("dataset.train", 2000)?,
                validation: r.parse("dataset.validation", 500)?,
                test: r.parse("dataset.test", 500)?,
                image_side: r.parse("dataset.image_side", 32)?,
                seed: r.parse("dataset.seed", 0)?,
            },
            "spurious" => DatasetConfig::Spurious {
                train: r.parse("dataset.train", 2000)?,
                validation: r.parse("dataset.validation", 500)?,
                test: r.parse("dataset.test", 500)?,
                image_side: r.parse("dataset.image_side", 16)?,
                num_classes: r.parse("dataset.num_classes", 4)?,
                seed: r.parse("dataset.seed", 0)?,
            },
            "idx" => DatasetConfig::Idx {
                images: PathBuf::from(r.get("dataset.images").ok_or_else(|| {
                    HarnessError::Config("dataset.images is required for idx".into())
                })?),
                labels: PathBuf::from(r.get("dataset.labels").ok_or_else(|| {
                    HarnessError::Config("dataset.labels is required for idx".into())
                })?),
            },
            other => {
                return Err(HarnessError::Config(format!("invalid dataset.kind {other:?}")))
            }
        };

        let family = match r.get("commentary.family").as_deref() {
            None | Some("none") => Family::None,
            Some("scalar") => Family::Scalar,
            Some("example_weight") => Family::ExampleWeight,
            Some("augmentation") => Family::Augmentation,
            Some("attention_mask") => Family::AttentionMask,
            Some("aux_target") => Family::AuxTarget,
            Some(other) => {
                return Err(HarnessError::Config(format!(
                    "invalid commentary.family {other:?}"
                )))
            }
        };

        let parse_widths = |r: &mut KeyReader, key: &str, default: Vec<usize>| -> Result<Vec<usize>> {
            match r.get(key) {
                None => Ok(default),
                Some(v) => v
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<usize>().map_err(|_| {
                            HarnessError::Config(format!("invalid value for {key}: {v:?}"))
                        })
                    })
                    .collect(),
            }
        };

        let algorithm = match r.get("algorithm").as_deref() {
            None | Some("unrolled") => Algorithm::Unrolled,
            Some("ift") => Algorithm::Ift,
            Some(other) => {
                return Err(HarnessError::Config(format!("invalid algorithm {other:?}")))
            }
        };
        let inner_optimizer = match r.get("inner.optimizer").as_deref() {
            None | Some("adam") => OptimizerKind::Adam,
            Some("sgd") => OptimizerKind::Sgd,
            Some(other) => {
                return Err(HarnessError::Config(format!(
                    "invalid inner.optimizer {other:?}"
                )))
            }
        };

        let cfg = ExperimentConfig {
            dataset,
            family,
            commentary_hidden: parse_widths(&mut r, "commentary.hidden", vec![16])?,
            sigma: r.parse("commentary.sigma", 4.0)?,
            target_dim: r.parse("commentary.target_dim", 2)?,
            aux_weight: r.parse("commentary.aux_weight", 1.0)?,
            student_hidden: parse_widths(&mut r, "student.hidden", vec![32])?,
            algorithm,
            inner_steps: r.parse("inner.steps", 200)?,
            inner_batch_size: r.parse("inner.batch_size", 10)?,
            inner_optimizer,
            inner_lr: r.parse("inner.lr", 1e-3)?,
            inner_eps: r.parse("inner.eps", 1e-8)?,
            memory_budget: r.parse("inner.memory_budget", 200_000_000)?,
            meta_steps: r.parse("outer.meta_steps", 20)?,
            outer_lr: r.parse("outer.lr", 1e-3)?,
            neumann_terms: r.parse("neumann.terms", 5)?,
            neumann_scale: match r.get("neumann.scale") {
                None => None,
                Some(v) => Some(v.parse().map_err(|_| {
                    HarnessError::Config(format!("invalid value for neumann.scale: {v:?}"))
                })?),
            },
            inner_steps_per_meta: r.parse("ift.inner_steps_per_meta", 10)?,
            meta_seed: r.parse("seeds.meta", 0)?,
            eval_seeds: r.parse_list("seeds.eval", vec![1, 2, 3])?,
            eval_steps: r.parse("eval.steps", 400)?,
            log_interval: r.parse("eval.log_interval", 25)?,
            val_examples: r.parse("eval.val_examples", 200)?,
            quadratic_target: r.parse("quadratic.target", 1.0)?,
            quadratic_phi0: r.parse("quadratic.phi0", 0.0)?,
            out_dir: r.get("output.dir").map(PathBuf::from),
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(HarnessError::Config("inner.steps must be >= 1".into()));
        }
        if self.meta_steps == 0 {
            return Err(HarnessError::Config("outer.meta_steps must be >= 1".into()));
        }
        if self.inner_batch_size == 0 {
            return Err(HarnessError::Config("inner.batch_size must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(HarnessError::Config("eval.log_interval must be >= 1".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(HarnessError::Config("seeds.eval must be non-empty".into()));
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if !(self.inner_eps > 0.0) {
            return Err(HarnessError::Config("inner.eps must be positive".into()));
        }
        if self.sigma <= 0.0 {
            return Err(HarnessError::Config("commentary.sigma must be positive".into()));
        }
        let quadratic = matches!(self.dataset, DatasetConfig::Quadratic);
        let scalar = matches!(self.family, Family::Scalar);
        if quadratic != scalar {
            return Err(HarnessError::Config(
                "the quadratic dataset pairs with the scalar family (and only with it)".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a 64 hash of the canonical (sorted `key = value`) form; ties
    /// artifacts to the exact configuration that produced them.
    pub fn hash(&self) -> u64 {
        let canon = format!("{self:?}");
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# rotated-curriculum experiment
dataset.kind = rotated
dataset.mode = non_overlapping
dataset.train = 400
commentary.family = example_weight
inner.steps = 50
outer.meta_steps = 10
seeds.eval = 1, 2, 3
";

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_str(GOOD).unwrap();
        assert_eq!(cfg.family, Family::ExampleWeight);
        assert_eq!(cfg.inner_steps, 50);
        assert_eq!(cfg.eval_seeds, vec![1, 2, 3]);
        assert_eq!(cfg.inner_batch_size, 10);
        match cfg.dataset {
            DatasetConfig::Rotated { train, validation, .. } => {
                assert_eq!(train, 400);
                assert_eq!(validation, 500);
            }
            _ => panic!("expected rotated dataset"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{GOOD}\nnot.a.key = 1\n");
        assert!(matches!(
            ExperimentConfig::from_str(&text),
            Err(HarnessError::UnknownKey(k)) if k == "not.a.key"
        ));
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejected() {
        assert!(ExperimentConfig::from_str("dataset.kind rotated").is_err());
        assert!(
            ExperimentConfig::from_str("dataset.kind = rotated\ndataset.kind = rotated").is_err()
        );
        assert!(ExperimentConfig::from_str("dataset.kind = nope").is_err());
    }

    #[test]
    fn zero_inner_steps_fail_validation() {
        let text = format!("{GOOD}\ninner.steps = 0\n");
        // Duplicate key wins first; rebuild without the original.
        let text = text.replace("inner.steps = 50\n", "");
        assert!(ExperimentConfig::from_str(&text).is_err());
    }

    #[test]
    fn quadratic_requires_the_scalar_family() {
        assert!(ExperimentConfig::from_str("dataset.kind = quadratic").is_err());
        let cfg = ExperimentConfig::from_str(
            "dataset.kind = quadratic\ncommentary.family = scalar\n",
        )
        .unwrap();
        assert_eq!(cfg.family, Family::Scalar);
    }

    #[test]
    fn hash_is_stable_and_config_sensitive() {
        let a = ExperimentConfig::from_str(GOOD).unwrap();
        let b = ExperimentConfig::from_str(GOOD).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_str(&GOOD.replace("= 50", "= 51")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
