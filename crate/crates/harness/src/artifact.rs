//! Versioned text serialization of trained commentaries.
//!
//! Layout: a `COMMENTARY v1` header line, `key = value` metadata, then
//! the phi tensors as decimal floats, one tensor per `tensor.shape` /
//! `tensor.values` section. Floats use shortest-round-trip formatting,
//! so save -> load -> save is byte-identical.

use std::path::Path;

use commentary_core::commentary::Commentary;
use commentary_core::models::{Activation, MlpSpec, OutputHead};
use commentary_core::param::PhiValues;

use crate::error::{HarnessError, Result};

pub const FORMAT_HEADER: &str = "COMMENTARY v1";

#[derive(Clone, Debug)]
pub struct CommentaryArtifact {
    pub commentary: Commentary,
    pub config_hash: u64,
    pub meta_seed: u64,
    /// Seconds since the epoch; sourced from `SOURCE_DATE_EPOCH` when
    /// set, else 0, so that reruns are byte-identical.
    pub timestamp: u64,
}

pub fn provenance_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn activation_tag(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(HarnessError::Artifact(format!("unknown activation {other:?}"))),
    }
}

fn csv_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_csv_usize(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| HarnessError::Artifact(format!("bad integer list {s:?}")))
        })
        .collect()
}

impl CommentaryArtifact {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT_HEADER);
        out.push('\n');
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("family", self.commentary.family_tag().to_string());
        kv("config_hash", format!("{:016x}", self.config_hash));
        kv("meta_seed", self.meta_seed.to_string());
        kv("timestamp", self.timestamp.to_string());
        match &self.commentary {
            Commentary::Scalar { .. } => {}
            Commentary::ExampleWeight { teacher, .. } => {
                kv("widths", csv_usize(&teacher.widths));
                kv("activation", activation_tag(teacher.activation).to_string());
            }
            Commentary::Augmentation { num_classes, .. } => {
                kv("num_classes", num_classes.to_string());
            }
            Commentary::AttentionMask {
                net,
                sigma,
                height,
                width,
                channels,
                ..
            } => {
                kv("widths", csv_usize(&net.widths));
                kv("activation", activation_tag(net.activation).to_string());
                if let OutputHead::SpatialCenter { rows, cols } = net.head {
                    kv("grid", csv_usize(&[rows, cols]));
                }
                kv("sigma", format!("{sigma:?}"));
                kv("height", height.to_string());
                kv("width", width.to_string());
                kv("channels", channels.to_string());
            }
            Commentary::AuxTarget {
                net,
                target_dim,
                aux_weight,
                ..
            } => {
                kv("widths", csv_usize(&net.widths));
                kv("activation", activation_tag(net.activation).to_string());
                kv("target_dim", target_dim.to_string());
                kv("aux_weight", format!("{aux_weight:?}"));
            }
        }
        let phi = self.commentary.phi();
        for (shape, values) in phi.shapes.iter().zip(&phi.values) {
            // "-" marks a scalar (rank-0) tensor.
            let shape_str = if shape.is_empty() {
                "-".to_string()
            } else {
                csv_usize(shape)
            };
            kv("tensor.shape", shape_str);
            kv(
                "tensor.values",
                values
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != FORMAT_HEADER {
            return Err(HarnessError::FormatVersion(header.to_string()));
        }
        let mut meta: Vec<(String, String)> = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Artifact(format!("bad line {line:?}")))?;
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| -> Result<String> {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| HarnessError::Artifact(format!("missing key {key}")))
        };

        let mut shapes = Vec::new();
        let mut values = Vec::new();
        let mut pending_shape: Option<Vec<usize>> = None;
        for (k, v) in &meta {
            match k.as_str() {
                "tensor.shape" => {
                    if pending_shape.is_some() {
                        return Err(HarnessError::Artifact(
                            "tensor.shape without following tensor.values".into(),
                        ));
                    }
                    pending_shape = Some(if v == "-" {
                        Vec::new()
                    } else {
                        parse_csv_usize(v)?
                    });
                }
                "tensor.values" => {
                    let shape = pending_shape.take().ok_or_else(|| {
                        HarnessError::Artifact("tensor.values without tensor.shape".into())
                    })?;
                    let vals: Vec<f64> = v
                        .split_whitespace()
                        .map(|p| {
                            p.parse()
                                .map_err(|_| HarnessError::Artifact(format!("bad float {p:?}")))
                        })
                        .collect::<Result<_>>()?;
                    if vals.len() != shape.iter().product::<usize>() {
                        return Err(HarnessError::Artifact(format!(
                            "tensor shape {shape:?} does not match {} values",
                            vals.len()
                        )));
                    }
                    shapes.push(shape);
                    values.push(vals);
                }
                _ => {}
            }
        }
        if pending_shape.is_some() {
            return Err(HarnessError::Artifact("trailing tensor.shape".into()));
        }
        let phi = PhiValues { shapes, values };

        let family = get("family")?;
        let commentary = match family.as_str() {
            "scalar" => Commentary::Scalar { phi },
            "example_weight" => Commentary::ExampleWeight {
                teacher: MlpSpec::new(
                    parse_csv_usize(&get("widths")?)?,
                    parse_activation(&get("activation")?)?,
                    OutputHead::SigmoidScalar,
                )
                .map_err(|e| HarnessError::Artifact(e.to_string()))?,
                phi,
            },
            "augmentation" => Commentary::Augmentation {
                num_classes: get("num_classes")?
                    .parse()
                    .map_err(|_| HarnessError::Artifact("bad num_classes".into()))?,
                phi,
            },
            "attention_mask" => {
                let grid = parse_csv_usize(&get("grid")?)?;
                if grid.len() != 2 {
                    return Err(HarnessError::Artifact("grid must be rows,cols".into()));
                }
                Commentary::AttentionMask {
                    net: MlpSpec::new(
                        parse_csv_usize(&get("widths")?)?,
                        parse_activation(&get("activation")?)?,
                        OutputHead::SpatialCenter {
                            rows: grid[0],
                            cols: grid[1],
                        },
                    )
                    .map_err(|e| HarnessError::Artifact(e.to_string()))?,
                    phi,
                    sigma: get("sigma")?
                        .parse()
                        .map_err(|_| HarnessError::Artifact("bad sigma".into()))?,
                    height: get("height")?
                        .parse()
                        .map_err(|_| HarnessError::Artifact("bad height".into()))?,
                    width: get("width")?
                        .parse()
                        .map_err(|_| HarnessError::Artifact("bad width".into()))?,
                    channels: get("channels")?
                        .parse()
                        .map_err(|_| HarnessError::Artifact("bad channels".into()))?,
                }
            }
            "aux_target" => Commentary::AuxTarget {
                net: MlpSpec::new(
                    parse_csv_usize(&get("widths")?)?,
                    parse_activation(&get("activation")?)?,
                    OutputHead::BoundedVector,
                )
                .map_err(|e| HarnessError::Artifact(e.to_string()))?,
                phi,
                target_dim: get("target_dim")?
                    .parse()
                    .map_err(|_| HarnessError::Artifact("bad target_dim".into()))?,
                aux_weight: get("aux_weight")?
                    .parse()
                    .map_err(|_| HarnessError::Artifact("bad aux_weight".into()))?,
            },
            other => {
                return Err(HarnessError::Artifact(format!("unknown family {other:?}")))
            }
        };
        commentary
            .validate()
            .map_err(|e| HarnessError::Artifact(e.to_string()))?;
        let config_hash = u64::from_str_radix(&get("config_hash")?, 16)
            .map_err(|_| HarnessError::Artifact("bad config_hash".into()))?;
        Ok(Self {
            commentary,
            config_hash,
            meta_seed: get("meta_seed")?
                .parse()
                .map_err(|_| HarnessError::Artifact("bad meta_seed".into()))?,
            timestamp: get("timestamp")?
                .parse()
                .map_err(|_| HarnessError::Artifact("bad timestamp".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CommentaryArtifact {
        let teacher =
            MlpSpec::new(vec![5, 3, 1], Activation::Relu, OutputHead::SigmoidScalar).unwrap();
        let dim = teacher.param_dim();
        let phi = PhiValues {
            shapes: vec![vec![5, 3], vec![3], vec![3, 1], vec![1]],
            values: vec![
                (0..15).map(|i| i as f64 * 0.125 - 1.0).collect(),
                vec![0.0, -0.5, 1.0 / 3.0],
                vec![0.1, 0.2, 0.3],
                vec![-2.25],
            ],
        };
        assert_eq!(phi.total_dim(), dim);
        CommentaryArtifact {
            commentary: Commentary::ExampleWeight { teacher, phi },
            config_hash: 0xDEAD_BEEF_0123_4567,
            meta_seed: 42,
            timestamp: 0,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = sample();
        let text1 = a.to_text();
        let b = CommentaryArtifact::from_text(&text1).unwrap();
        assert_eq!(text1, b.to_text());
        assert_eq!(a.commentary.phi(), b.commentary.phi());
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.meta_seed, b.meta_seed);
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let bad = sample().to_text().replace(FORMAT_HEADER, "COMMENTARY v2");
        assert!(matches!(
            CommentaryArtifact::from_text(&bad),
            Err(HarnessError::FormatVersion(_))
        ));
    }

    #[test]
    fn corrupt_tensors_are_rejected() {
        let a = sample().to_text();
        let truncated = a.replace("tensor.values = 0.1 0.2 0.3\n", "tensor.values = 0.1 0.2\n");
        assert!(CommentaryArtifact::from_text(&truncated).is_err());
    }

    #[test]
    fn every_family_round_trips() {
        let mask_net = MlpSpec::new(
            vec![4, 4],
            Activation::Tanh,
            OutputHead::SpatialCenter { rows: 2, cols: 2 },
        )
        .unwrap();
        let aux_net =
            MlpSpec::new(vec![4, 2], Activation::Relu, OutputHead::BoundedVector).unwrap();
        let cases = vec![
            Commentary::Scalar {
                phi: PhiValues {
                    shapes: vec![vec![]],
                    values: vec![vec![1.5]],
                },
            },
            Commentary::Augmentation {
                num_classes: 2,
                phi: PhiValues {
                    shapes: vec![vec![2, 2]],
                    values: vec![vec![0.0, 0.1, -0.2, 7e-3]],
                },
            },
            Commentary::AttentionMask {
                net: mask_net,
                phi: PhiValues {
                    shapes: vec![vec![4, 4], vec![4]],
                    values: vec![vec![0.25; 16], vec![0.0; 4]],
                },
                sigma: 2.5,
                height: 2,
                width: 2,
                channels: 1,
            },
            Commentary::AuxTarget {
                net: aux_net,
                phi: PhiValues {
                    shapes: vec![vec![4, 2], vec![2]],
                    values: vec![vec![0.5; 8], vec![0.0; 2]],
                },
                target_dim: 2,
                aux_weight: 0.75,
            },
        ];
        for commentary in cases {
            let a = CommentaryArtifact {
                commentary,
                config_hash: 1,
                meta_seed: 2,
                timestamp: 3,
            };
            let text = a.to_text();
            let b = CommentaryArtifact::from_text(&text).unwrap();
            assert_eq!(text, b.to_text());
        }
    }
}
