//! Post-hoc analyses of trained commentary artifacts against the
//! dataset they were trained on. Each supported family writes a
//! machine-readable CSV plus an SVG visualization.

use std::fmt::Write as _;
use std::path::Path;

use commentary_core::commentary::{example_weights, Commentary};
use commentary_core::data::{Dataset, Meta, Split};
use commentary_core::models::forward;
use commentary_core::tensor::Tape;

use crate::artifact::CommentaryArtifact;
use crate::error::{HarnessError, Result};

pub const ANALYSIS_CSV: &str = "analysis.csv";
pub const ANALYSIS_SVG: &str = "analysis.svg";

/// Structured analysis results (also serialized to CSV/SVG).
#[derive(Clone, Debug)]
pub enum AnalysisReport {
    /// Example-weight commentary on angle-annotated data.
    WeightVsAngle {
        /// (angle-bin center, mean weight, iteration).
        bins: Vec<(f64, f64, usize)>,
        /// (iteration, Spearman correlation of |angle| vs weight).
        rank_correlation: Vec<(usize, f64)>,
    },
    /// Blending-grid dump: (class-1, class-2, lambda).
    LambdaGrid { entries: Vec<(usize, usize, f64)> },
    /// Per-test-image predicted centers and distances to the annotated
    /// object centers: (index, pred-row, pred-col, d-primary, d-distractor).
    MaskCenters {
        rows: Vec<(usize, f64, f64, f64, Option<f64>)>,
    },
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Weights of every train example at one iteration of the schedule.
pub fn weights_at_iteration(
    commentary: &Commentary,
    dataset: &Dataset,
    iteration: usize,
    total_iterations: usize,
) -> Result<Vec<f64>> {
    let Commentary::ExampleWeight { teacher, phi } = commentary else {
        return Err(HarnessError::UnsupportedFamily(commentary_family(commentary)));
    };
    let tape = Tape::new();
    let phi_t = phi.leaves(&tape)?;
    let batch = dataset.split_batch(Split::Train);
    let inputs = batch.input_tensor(&tape)?;
    let w = example_weights(teacher, &phi_t, &inputs, iteration, total_iterations)?;
    Ok(w.values().to_vec())
}

fn commentary_family(c: &Commentary) -> &'static str {
    c.family_tag()
}

pub fn analyze(
    artifact: &CommentaryArtifact,
    dataset: &Dataset,
    total_iterations: usize,
    log_interval: usize,
) -> Result<AnalysisReport> {
    match &artifact.commentary {
        Commentary::ExampleWeight { .. } => {
            let angles: Vec<f64> = dataset
                .split_range(Split::Train)
                .map(|i| match dataset.meta[i] {
                    Meta::Angle(a) => Ok(a),
                    _ => Err(HarnessError::ArtifactIncompatible(
                        "example-weight analysis needs angle metadata".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            let (lo, hi) = angles
                .iter()
                .fold((f64::MAX, f64::MIN), |(l, h), &a| (l.min(a), h.max(a)));
            let nbins = 9;
            let width = (hi - lo) / nbins as f64;

            let mut bins = Vec::new();
            let mut rank_correlation = Vec::new();
            let mut iterations: Vec<usize> = (0..=total_iterations)
                .step_by(log_interval.max(1))
                .collect();
            if *iterations.last().unwrap_or(&0) != total_iterations {
                iterations.push(total_iterations);
            }
            for &it in &iterations {
                let w = weights_at_iteration(&artifact.commentary, dataset, it, total_iterations)?;
                let abs_angles: Vec<f64> = angles.iter().map(|a| a.abs()).collect();
                rank_correlation.push((it, spearman(&abs_angles, &w)));
                let mut sums = vec![(0.0, 0usize); nbins];
                for (a, wi) in angles.iter().zip(&w) {
                    let b = (((a - lo) / width) as usize).min(nbins - 1);
                    sums[b].0 += wi;
                    sums[b].1 += 1;
                }
                for (b, (s, n)) in sums.iter().enumerate() {
                    if *n > 0 {
                        bins.push((lo + (b as f64 + 0.5) * width, s / *n as f64, it));
                    }
                }
            }
            Ok(AnalysisReport::WeightVsAngle {
                bins,
                rank_correlation,
            })
        }
        Commentary::Augmentation { num_classes, phi } => {
            let n = *num_classes;
            let flat = phi.flatten();
            let mut entries = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let lambda = 1.0 - 0.5 / (1.0 + (-flat[i * n + j]).exp());
                    entries.push((i, j, lambda));
                }
            }
            Ok(AnalysisReport::LambdaGrid { entries })
        }
        Commentary::AttentionMask { net, phi, .. } => {
            let tape = Tape::new();
            let phi_t = phi.leaves(&tape)?;
            let test = dataset.split_batch(Split::Test);
            let inputs = test.input_tensor(&tape)?;
            let centers = forward(net, &phi_t, &inputs)?;
            let cv = centers.values();
            let mut rows = Vec::with_capacity(test.len());
            for (k, &i) in test.indices.iter().enumerate() {
                let pred = (cv[2 * k], cv[2 * k + 1]);
                let dist = |c: (f64, f64)| ((pred.0 - c.0).powi(2) + (pred.1 - c.1).powi(2)).sqrt();
                let (primary, distractor) = match dataset.meta[i] {
                    Meta::TwoObject {
                        red_center,
                        blue_center,
                    } => (dist(red_center), Some(dist(blue_center))),
                    Meta::Background { center, .. } => (dist(center), None),
                    _ => {
                        return Err(HarnessError::ArtifactIncompatible(
                            "mask analysis needs object-center metadata".into(),
                        ))
                    }
                };
                rows.push((i, pred.0, pred.1, primary, distractor));
            }
            Ok(AnalysisReport::MaskCenters { rows })
        }
        Commentary::Scalar { .. } => Err(HarnessError::UnsupportedFamily("scalar")),
        Commentary::AuxTarget { .. } => Err(HarnessError::UnsupportedFamily("aux_target")),
    }
}

impl AnalysisReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            AnalysisReport::WeightVsAngle {
                bins,
                rank_correlation,
            } => {
                out.push_str("section,a,b,c\n");
                for (angle, weight, it) in bins {
                    let _ = writeln!(out, "weight_vs_angle,{angle:?},{weight:?},{it}");
                }
                for (it, rho) in rank_correlation {
                    let _ = writeln!(out, "rank_correlation,{it},{rho:?},");
                }
            }
            AnalysisReport::LambdaGrid { entries } => {
                out.push_str("class_1,class_2,lambda\n");
                for (i, j, l) in entries {
                    let _ = writeln!(out, "{i},{j},{l:?}");
                }
            }
            AnalysisReport::MaskCenters { rows } => {
                out.push_str("index,pred_row,pred_col,dist_primary,dist_distractor\n");
                for (i, r, c, dp, dd) in rows {
                    match dd {
                        Some(d) => {
                            let _ = writeln!(out, "{i},{r:?},{c:?},{dp:?},{d:?}");
                        }
                        None => {
                            let _ = writeln!(out, "{i},{r:?},{c:?},{dp:?},");
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let mut svg = String::from(
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="480" height="360" viewBox="0 0 480 360">
<rect width="480" height="360" fill="white"/>
"#,
        );
        match self {
            AnalysisReport::WeightVsAngle { bins, .. } => {
                // Final-iteration mean weight per angle bin.
                let last_it = bins.iter().map(|b| b.2).max().unwrap_or(0);
                let pts: Vec<(f64, f64)> = bins
                    .iter()
                    .filter(|b| b.2 == last_it)
                    .map(|b| (b.0, b.1))
                    .collect();
                let (x0, x1) = pts
                    .iter()
                    .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.0), h.max(p.0)));
                let coords: Vec<String> = pts
                    .iter()
                    .map(|&(a, w)| {
                        let x = 40.0 + (a - x0) / (x1 - x0).max(1e-9) * 400.0;
                        let y = 320.0 - w * 280.0;
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    svg,
                    r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
                    coords.join(" ")
                );
                let _ = writeln!(
                    svg,
                    r#"<text x="240" y="350" text-anchor="middle" font-size="13">rotation angle (final iteration mean weight)</text>"#
                );
            }
            AnalysisReport::LambdaGrid { entries } => {
                let n = (entries.len() as f64).sqrt() as usize;
                let cell = 280.0 / n as f64;
                for (i, j, l) in entries {
                    // lambda in [0.5, 1] -> gray level
                    let g = ((l - 0.5) / 0.5 * 255.0).round() as u8;
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({g},{g},{g})" stroke="black" stroke-width="0.5"/>"#,
                        60.0 + *j as f64 * cell,
                        30.0 + *i as f64 * cell
                    );
                }
                let _ = writeln!(
                    svg,
                    r#"<text x="240" y="350" text-anchor="middle" font-size="13">blending proportion grid (dark = 0.5, light = 1)</text>"#
                );
            }
            AnalysisReport::MaskCenters { rows } => {
                let dmax = rows
                    .iter()
                    .flat_map(|r| [r.3, r.4.unwrap_or(r.3)])
                    .fold(1e-9f64, f64::max);
                for (_, _, _, dp, dd) in rows {
                    let x = 40.0 + dp / dmax * 400.0;
                    let y = match dd {
                        Some(d) => 320.0 - d / dmax * 280.0,
                        None => 320.0,
                    };
                    let _ = writeln!(
                        svg,
                        r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#d62728" fill-opacity="0.6"/>"##
                    );
                }
                let _ = writeln!(
                    svg,
                    r#"<text x="240" y="350" text-anchor="middle" font-size="13">distance to primary (x) vs distractor (y) object</text>"#
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(ANALYSIS_CSV), self.to_csv())?;
        std::fs::write(out_dir.join(ANALYSIS_SVG), self.to_svg())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use commentary_core::param::PhiValues;

    #[test]
    fn spearman_matches_hand_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Monotone nonlinear map still gives rho = 1.
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]) - 1.0).abs() < 1e-12);
        // Constant input has no defined ordering; we report 0.
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn zero_grid_dumps_uniform_three_quarters() {
        let artifact = CommentaryArtifact {
            commentary: Commentary::Augmentation {
                num_classes: 2,
                phi: PhiValues {
                    shapes: vec![vec![2, 2]],
                    values: vec![vec![0.0; 4]],
                },
            },
            config_hash: 0,
            meta_seed: 0,
            timestamp: 0,
        };
        let ds = commentary_core::data::gen_rotated(&commentary_core::data::RotatedSpec {
            mode: commentary_core::data::RotationMode::NonOverlapping,
            train: 8,
            validation: 4,
            test: 4,
            image_side: 8,
            seed: 0,
        })
        .unwrap();
        let report = analyze(&artifact, &ds, 10, 5).unwrap();
        let AnalysisReport::LambdaGrid { entries } = &report else {
            panic!("expected grid");
        };
        assert_eq!(entries.len(), 4);
        for (_, _, l) in entries {
            assert!((l - 0.75).abs() < 1e-12);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("class_1,class_2,lambda\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn aux_target_analysis_is_unsupported() {
        let net = commentary_core::models::MlpSpec::new(
            vec![4, 2],
            commentary_core::models::Activation::Relu,
            commentary_core::models::OutputHead::BoundedVector,
        )
        .unwrap();
        let artifact = CommentaryArtifact {
            commentary: Commentary::AuxTarget {
                net,
                phi: PhiValues {
                    shapes: vec![vec![4, 2], vec![2]],
                    values: vec![vec![0.0; 8], vec![0.0; 2]],
                },
                target_dim: 2,
                aux_weight: 1.0,
            },
            config_hash: 0,
            meta_seed: 0,
            timestamp: 0,
        };
        let ds = commentary_core::data::gen_rotated(&commentary_core::data::RotatedSpec {
            mode: commentary_core::data::RotationMode::NonOverlapping,
            train: 8,
            validation: 4,
            test: 4,
            image_side: 8,
            seed: 0,
        })
        .unwrap();
        assert!(matches!(
            analyze(&artifact, &ds, 10, 5),
            Err(HarnessError::UnsupportedFamily("aux_target"))
        ));
    }
}
