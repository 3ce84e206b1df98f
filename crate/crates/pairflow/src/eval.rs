//! Desk-scale metrics and experiment harnesses: identity drift vs semantic
//! alignment against the known ground-truth direction, scale sweeps, the
//! ablation table, and the fusion comparison.

use crate::error::{Error, Result};
use crate::net::{DenoiserParams, LoraAdapter};
use crate::sampler::{generate, generate_fused, EditStack, SampleConfig};
use crate::tensor::Tensor;
use crate::trainer::{
    train_paired, train_variant_a, train_variant_b, train_variant_c, TrainConfig,
};

/// Held-out evaluation seeds (64 of them).
pub const EVAL_SEEDS: std::ops::Range<u64> = 1000..1064;

/// L2 norm of the component of (edited - original) orthogonal to the
/// ground-truth direction g, normalized by ||original||.
pub fn identity_drift(original: &Tensor, edited: &Tensor, g: &Tensor) -> Result<f64> {
    let delta = edited.sub(original)?;
    let g_norm = g.norm();
    if g_norm == 0.0 {
        return Err(Error::InvalidArgument("zero ground-truth direction".into()));
    }
    let proj = delta.dot(g)? / (g_norm * g_norm);
    let orth = delta.axpy(-proj, g)?;
    Ok(orth.norm() / original.norm())
}

/// Cosine between (edited - original) and g; 0 when the edit delta has zero
/// length.
pub fn alignment(original: &Tensor, edited: &Tensor, g: &Tensor) -> Result<f64> {
    let delta = edited.sub(original)?;
    let dn = delta.norm();
    let gn = g.norm();
    if dn == 0.0 || gn == 0.0 {
        return Ok(0.0);
    }
    Ok(delta.dot(g)? / (dn * gn))
}

/// Signed projection of the edit delta onto the unit direction g.
pub fn projection(original: &Tensor, edited: &Tensor, g: &Tensor) -> Result<f64> {
    let delta = edited.sub(original)?;
    Ok(delta.dot(g)? / g.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub semantic_name: String,
    pub method: String,
    pub scale: f64,
    pub seed: u64,
    pub projection: f64,
    pub identity_drift: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "semantic,method,scale,seed,projection,identity_drift,alignment";

impl EditReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.semantic_name, r.method, r.scale, r.seed, r.projection, r.identity_drift,
                r.alignment
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EditReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == REPORT_HEADER => {}
            _ => return Err(Error::Format("bad report header".into())),
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("report line {}: {} fields", ln + 2, f.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad float '{}'", s)))
            };
            rows.push(ReportRow {
                semantic_name: f[0].to_string(),
                method: f[1].to_string(),
                scale: parse(f[2])?,
                seed: f[3]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed '{}'", f[3])))?,
                projection: parse(f[4])?,
                identity_drift: parse(f[5])?,
                alignment: parse(f[6])?,
            });
        }
        Ok(EditReport { rows })
    }

    pub fn mean_over_seeds(&self, method: &str, scale: f64) -> Option<(f64, f64, f64)> {
        let rows: Vec<&ReportRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.scale == scale)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut p = 0.0;
        let mut d = 0.0;
        let mut a = 0.0;
        for r in &rows {
            p += r.projection;
            d += r.identity_drift;
            a += r.alignment;
        }
        Some((p / n, d / n, a / n))
    }
}

/// Per-scale, per-seed edit metrics for one semantic adapter applied over
/// plain generation. The original is the same-seed generation at scale 0.
#[allow(clippy::too_many_arguments)]
pub fn scale_sweep(
    base: &DenoiserParams,
    content: Option<&LoraAdapter>,
    semantic: &LoraAdapter,
    g: &Tensor,
    scales: &[f64],
    seeds: impl Iterator<Item = u64> + Clone,
    sample_cfg: &SampleConfig,
    semantic_name: &str,
    method: &str,
) -> Result<EditReport> {
    let mut rows = Vec::new();
    for &scale in scales {
        for seed in seeds.clone() {
            let cfg = SampleConfig {
                seed,
                scale,
                ..*sample_cfg
            };
            let mut original_stack = EditStack::bare();
            let mut edited_stack = EditStack::semantic_only(semantic, scale);
            if let Some(c) = content {
                original_stack.always.push((c, 1.0));
                edited_stack.always.push((c, 1.0));
            }
            let original = generate(base, &original_stack, &cfg)?;
            let edited = generate(base, &edited_stack, &cfg)?;
            rows.push(ReportRow {
                semantic_name: semantic_name.to_string(),
                method: method.to_string(),
                scale,
                seed,
                projection: projection(&original, &edited, g)?,
                identity_drift: identity_drift(&original, &edited, g)?,
                alignment: alignment(&original, &edited, g)?,
            });
        }
    }
    // Fixed report order regardless of any internal parallelism.
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.scale, a.seed)
            .partial_cmp(&(b.method.as_str(), b.scale, b.seed))
            .unwrap()
    });
    Ok(EditReport { rows })
}

/// Grid of candidate scales used when matching a variant's alignment to the
/// full method's.
pub const MATCH_SCALES: [f64; 8] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0];

/// Alignment tolerance when declaring a variant's operating point matched to
/// the full method's.
pub const ALIGN_MATCH_BAND: f64 = 0.05;

/// Trains the full method plus the three ablation variants on identical
/// seed/data and reports one row per method, with each variant evaluated at
/// the grid scale whose mean alignment best matches the full method's.
pub fn ablation_table(
    base: &DenoiserParams,
    pairs: &[(Tensor, Tensor)],
    g: &Tensor,
    train_cfg: &TrainConfig,
    sample_cfg: &SampleConfig,
    semantic_name: &str,
) -> Result<EditReport> {
    let (content, semantic, _) = train_paired(base, pairs, train_cfg)?;
    let (adapter_a, _) = train_variant_a(base, pairs, train_cfg)?;
    let (semantic_b, _) = train_variant_b(base, pairs, train_cfg)?;
    let (_content_c, semantic_c, _) = train_variant_c(base, pairs, train_cfg)?;
    let _ = content;

    let sweep = |sem: &LoraAdapter, method: &str| -> Result<EditReport> {
        scale_sweep(
            base,
            None,
            sem,
            g,
            &MATCH_SCALES,
            EVAL_SEEDS,
            sample_cfg,
            semantic_name,
            method,
        )
    };
    let full = sweep(&semantic, "full")?;
    let var_a = sweep(&adapter_a, "variant_a")?;
    let var_b = sweep(&semantic_b, "variant_b")?;
    let var_c = sweep(&semantic_c, "variant_c")?;

    let (full_proj, full_drift, full_align) = full
        .mean_over_seeds("full", 1.0)
        .ok_or_else(|| Error::InvalidArgument("no full-method rows".into()))?;

    let mut rows = vec![ReportRow {
        semantic_name: semantic_name.to_string(),
        method: "full".into(),
        scale: 1.0,
        seed: train_cfg.seed,
        projection: full_proj,
        identity_drift: full_drift,
        alignment: full_align,
    }];
    for (report, method) in [(&var_a, "variant_a"), (&var_b, "variant_b"), (&var_c, "variant_c")] {
        // Matched point: alignment within the band and edit strength
        // comparable to the full method's (projection at least half of its
        // value), with the closest projection winning. A variant that only
        // reaches the band at negligible strength has not matched the edit,
        // so fall back to the strength-matched scale.
        let mut in_band: Option<(f64, f64, f64, f64)> = None;
        let mut nearest: Option<(f64, f64, f64, f64)> = None;
        for &s in &MATCH_SCALES {
            if let Some((p, d, a)) = report.mean_over_seeds(method, s) {
                let pgap = (p - full_proj).abs();
                if (a - full_align).abs() <= ALIGN_MATCH_BAND && p >= 0.5 * full_proj {
                    if in_band.map_or(true, |(bg, ..)| pgap < bg) {
                        in_band = Some((pgap, s, d, a));
                    }
                }
                if nearest.map_or(true, |(bg, ..)| pgap < bg) {
                    nearest = Some((pgap, s, d, a));
                }
            }
        }
        let (_, scale, drift, align) = in_band.or(nearest).unwrap();
        rows.push(ReportRow {
            semantic_name: semantic_name.to_string(),
            method: method.into(),
            scale,
            seed: train_cfg.seed,
            projection: report.mean_over_seeds(method, scale).unwrap().0,
            identity_drift: drift,
            alignment: align,
        });
    }
    Ok(EditReport { rows })
}

/// Guidance-based fusion vs weight-space linear merge at a shared strength
/// grid. The original is the reconstruction-only generation per seed.
pub fn fusion_compare(
    base: &DenoiserParams,
    rec: &LoraAdapter,
    sem: &LoraAdapter,
    g: &Tensor,
    gammas: &[f64],
    seeds: impl Iterator<Item = u64> + Clone,
    sample_cfg: &SampleConfig,
    semantic_name: &str,
) -> Result<EditReport> {
    let mut rows = Vec::new();
    for &gamma in gammas {
        for seed in seeds.clone() {
            let cfg = SampleConfig { seed, ..*sample_cfg };
            let original = generate(
                base,
                &EditStack {
                    always: vec![(rec, 1.0)],
                    delayed: vec![],
                },
                &cfg,
            )?;
            // Guidance-based fusion.
            let fused = generate_fused(base, rec, &[(sem, 1.0)], &[gamma], &cfg)?;
            rows.push(ReportRow {
                semantic_name: semantic_name.to_string(),
                method: "guidance_fusion".into(),
                scale: gamma,
                seed,
                projection: projection(&original, &fused, g)?,
                identity_drift: identity_drift(&original, &fused, g)?,
                alignment: alignment(&original, &fused, g)?,
            });
            // Weight-space linear combination at the same strength.
            let merged = rec.linear_merge(sem, gamma)?;
            let linear = generate(
                base,
                &EditStack {
                    always: vec![(&merged, 1.0)],
                    delayed: vec![],
                },
                &cfg,
            )?;
            rows.push(ReportRow {
                semantic_name: semantic_name.to_string(),
                method: "linear_merge".into(),
                scale: gamma,
                seed,
                projection: projection(&original, &linear, g)?,
                identity_drift: identity_drift(&original, &linear, g)?,
                alignment: alignment(&original, &linear, g)?,
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.scale, a.seed)
            .partial_cmp(&(b.method.as_str(), b.scale, b.seed))
            .unwrap()
    });
    Ok(EditReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gauss, RngState};
    use crate::tensor::Matrix;

    fn unit(v: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(v).unwrap();
        t.scale(1.0 / t.norm()).unwrap()
    }

    #[test]
    fn drift_zero_for_identity_and_pure_edits() {
        let g = unit(vec![1.0, 0.0, 0.0]);
        let orig = Tensor::from_vec(vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(identity_drift(&orig, &orig, &g).unwrap(), 0.0);
        let on_dir = orig.axpy(0.7, &g).unwrap();
        assert!(identity_drift(&orig, &on_dir, &g).unwrap() < 1e-15);
    }

    #[test]
    fn drift_orthogonal_edit() {
        let g = unit(vec![1.0, 0.0]);
        let orig = Tensor::from_vec(vec![3.0, 4.0]).unwrap();
        let g_perp = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        let c = 0.5;
        let edited = orig.axpy(c, &g_perp).unwrap();
        let d = identity_drift(&orig, &edited, &g).unwrap();
        assert!((d - c / orig.norm()).abs() < 1e-14);
    }

    #[test]
    fn alignment_parallel_orthogonal_zero() {
        let g = unit(vec![0.0, 1.0]);
        let orig = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        let along = orig.axpy(2.0, &g).unwrap();
        assert!((alignment(&orig, &along, &g).unwrap() - 1.0).abs() < 1e-14);
        let perp = orig
            .axpy(2.0, &Tensor::from_vec(vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(alignment(&orig, &perp, &g).unwrap().abs() < 1e-14);
        assert_eq!(alignment(&orig, &orig, &g).unwrap(), 0.0);
    }

    fn random_rotation(dim: usize, seed: u64) -> Matrix {
        // Gram-Schmidt on a random Gaussian matrix.
        let mut rng = RngState::new(seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for _ in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gauss()).collect();
            for u in &cols {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for vi in &mut v {
                *vi /= n;
            }
            cols.push(v);
        }
        let mut m = Matrix::zeros(dim, dim);
        for (c, col) in cols.iter().enumerate() {
            for r in 0..dim {
                m.set(r, c, col[r]);
            }
        }
        m
    }

    #[test]
    fn metrics_rotation_invariant() {
        let dim = 5;
        let mut rng = RngState::new(4);
        let orig = gauss(&mut rng, &[dim]).unwrap();
        let edited = gauss(&mut rng, &[dim]).unwrap();
        let g = {
            let t = gauss(&mut rng, &[dim]).unwrap();
            t.scale(1.0 / t.norm()).unwrap()
        };
        let d0 = identity_drift(&orig, &edited, &g).unwrap();
        let a0 = alignment(&orig, &edited, &g).unwrap();
        for seed in [10, 11, 12] {
            let rot = random_rotation(dim, seed);
            let apply = |t: &Tensor| {
                Tensor::new(t.shape().to_vec(), rot.matvec(t.data())).unwrap()
            };
            let d1 = identity_drift(&apply(&orig), &apply(&edited), &apply(&g)).unwrap();
            let a1 = alignment(&apply(&orig), &apply(&edited), &apply(&g)).unwrap();
            assert!((d0 - d1).abs() < 1e-10, "{} vs {}", d0, d1);
            assert!((a0 - a1).abs() < 1e-10, "{} vs {}", a0, a1);
        }
    }

    #[test]
    fn report_csv_roundtrip_byte_equal() {
        let report = EditReport {
            rows: vec![
                ReportRow {
                    semantic_name: "v1-offset".into(),
                    method: "full".into(),
                    scale: 1.0,
                    seed: 1000,
                    projection: 1.2345678901234567,
                    identity_drift: 0.03125,
                    alignment: 0.97,
                },
                ReportRow {
                    semantic_name: "i1-local".into(),
                    method: "variant_b".into(),
                    scale: 0.5,
                    seed: 1001,
                    projection: -0.25,
                    identity_drift: 1e-9,
                    alignment: 0.0,
                },
            ],
        };
        let csv = report.to_csv();
        let parsed = EditReport::from_csv(&csv).unwrap();
        assert_eq!(parsed.to_csv(), csv);
        assert_eq!(parsed, report);
    }

    #[test]
    fn report_rejects_bad_header() {
        assert!(EditReport::from_csv("nope\n1,2,3").is_err());
    }
}
