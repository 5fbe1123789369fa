use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::infer::{infer, InferOptions, Stage};
use super::train::csv_error;
use crate::datagen::{make_object, Sample};
use crate::diffusion::NoiseSchedule;
use crate::geometry::{geodesic_distance, median, Pose};
use crate::{Error, Result};

pub const RECALL_ROT_DEG: f64 = 5.0;
pub const RECALL_DEPTH_REL: f64 = 0.05;

/// A pose estimate with its hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pose: Pose,
    pub hypotheses: Vec<Pose>,
    /// First-stage estimate when a second stage ran.
    pub coarse: Option<Pose>,
    pub warning: Option<String>,
}

impl Prediction {
    pub fn exact(pose: Pose) -> Self {
        Prediction {
            pose,
            hypotheses: vec![pose],
            coarse: None,
            warning: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub object_id: u64,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    pub depth_rel_err: f64,
    /// Smallest rotation error over the hypotheses.
    pub best_rot_err_deg: f64,
    /// Mean geodesic distance from the hypotheses to the aggregate.
    pub spread_deg: f64,
    pub hypotheses: usize,
    pub coarse_rot_err_deg: Option<f64>,
    pub coarse_depth_rel_err: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub median_rot_deg: f64,
    pub mean_rot_deg: f64,
    pub median_trans_m: f64,
    pub mean_trans_m: f64,
    pub median_depth_rel: f64,
    pub mean_depth_rel: f64,
    pub recall_5deg: f64,
    pub recall_5deg_5pct_depth: f64,
    pub median_best_rot_deg: f64,
    /// Share of samples where the best hypothesis is at least as good as
    /// the aggregate.
    pub best_not_worse_rate: f64,
    pub median_spread_deg: f64,
    pub mean_spread_deg: f64,
    pub median_coarse_rot_deg: Option<f64>,
    pub median_coarse_depth_rel: Option<f64>,
    pub warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub summary: Summary,
    pub samples: Vec<SampleReport>,
}

fn rot_deg(a: &Pose, b: &Pose) -> f64 {
    geodesic_distance(&a.r, &b.r).to_degrees()
}

fn depth_rel(est: &Pose, gt: &Pose) -> f64 {
    (est.t.z - gt.t.z).abs() / gt.t.z
}

fn med(v: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = v.collect();
    median(&mut v)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores predictions against the samples' query poses.
pub fn evaluate_predictions(samples: &[Sample], preds: &[Prediction], seed: u64) -> Result<EvalReport> {
    if samples.len() != preds.len() || samples.is_empty() {
        return Err(Error::Contract(format!(
            "{} samples, {} predictions",
            samples.len(),
            preds.len()
        )));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, (s, p)) in samples.iter().zip(preds).enumerate() {
        let gt = &s.query.pose;
        let rot = rot_deg(&p.pose, gt);
        let best = p.hypotheses.iter().map(|h| rot_deg(h, gt)).fold(rot, f64::min);
        let spread = if p.hypotheses.is_empty() {
            0.0
        } else {
            mean(p.hypotheses.iter().map(|h| rot_deg(h, &p.pose)))
        };
        let row = SampleReport {
            index: i,
            object_id: s.object_id,
            rot_err_deg: rot,
            trans_err_m: (p.pose.t - gt.t).norm(),
            depth_rel_err: depth_rel(&p.pose, gt),
            best_rot_err_deg: best,
            spread_deg: spread,
            hypotheses: p.hypotheses.len(),
            coarse_rot_err_deg: p.coarse.map(|c| rot_deg(&c, gt)),
            coarse_depth_rel_err: p.coarse.map(|c| depth_rel(&c, gt)),
            warning: p.warning.clone(),
        };
        let finite = [row.rot_err_deg, row.trans_err_m, row.depth_rel_err, row.best_rot_err_deg, row.spread_deg]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric {
                context: format!("metrics of sample {i}"),
            });
        }
        rows.push(row);
    }
    let n = rows.len() as f64;
    let coarse: Vec<_> = rows.iter().filter_map(|r| r.coarse_rot_err_deg).collect();
    let coarse_d: Vec<_> = rows.iter().filter_map(|r| r.coarse_depth_rel_err).collect();
    let summary = Summary {
        samples: rows.len(),
        median_rot_deg: med(rows.iter().map(|r| r.rot_err_deg)),
        mean_rot_deg: mean(rows.iter().map(|r| r.rot_err_deg)),
        median_trans_m: med(rows.iter().map(|r| r.trans_err_m)),
        mean_trans_m: mean(rows.iter().map(|r| r.trans_err_m)),
        median_depth_rel: med(rows.iter().map(|r| r.depth_rel_err)),
        mean_depth_rel: mean(rows.iter().map(|r| r.depth_rel_err)),
        recall_5deg: rows.iter().filter(|r| r.rot_err_deg < RECALL_ROT_DEG).count() as f64 / n,
        recall_5deg_5pct_depth: rows
            .iter()
            .filter(|r| r.rot_err_deg < RECALL_ROT_DEG && r.depth_rel_err < RECALL_DEPTH_REL)
            .count() as f64
            / n,
        median_best_rot_deg: med(rows.iter().map(|r| r.best_rot_err_deg)),
        best_not_worse_rate: rows.iter().filter(|r| r.best_rot_err_deg <= r.rot_err_deg).count() as f64 / n,
        median_spread_deg: med(rows.iter().map(|r| r.spread_deg)),
        mean_spread_deg: mean(rows.iter().map(|r| r.spread_deg)),
        median_coarse_rot_deg: (coarse.len() == rows.len()).then(|| med(coarse.into_iter())),
        median_coarse_depth_rel: (coarse_d.len() == rows.len()).then(|| med(coarse_d.into_iter())),
        warnings: rows.iter().filter(|r| r.warning.is_some()).count(),
    };
    Ok(EvalReport {
        seed,
        summary,
        samples: rows,
    })
}

/// Per-sample inference seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Runs inference on every sample (in order) and scores the result. Object
/// models for fine templates are rebuilt from the sample's object id with
/// `k_points` points.
pub fn evaluate<C: Stage, G: Stage>(
    coarse: (&C, &NoiseSchedule),
    fine: Option<(&G, &NoiseSchedule)>,
    samples: &[Sample],
    k_points: Option<usize>,
    opts: &InferOptions,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let obj = match k_points {
            Some(k) if fine.is_some() => Some(make_object(s.object_id, k)?),
            _ => None,
        };
        let o = InferOptions {
            seed: sample_seed(opts.seed, i),
            ..opts.clone()
        };
        let r = infer(coarse, fine, &s.query, &s.templates, obj.as_ref(), &o).map_err(|e| match e {
            Error::Numeric { context } => Error::Numeric {
                context: format!("sample {i}: {context}"),
            },
            Error::Decode(m) => Error::Decode(format!("sample {i}: {m}")),
            Error::Contract(m) => Error::Contract(format!("sample {i}: {m}")),
            other => other,
        })?;
        preds.push(Prediction {
            pose: r.pose,
            hypotheses: r.hypotheses,
            coarse: r.fine.as_ref().map(|_| r.coarse.pose),
            warning: r.warning,
        });
    }
    evaluate_predictions(samples, &preds, opts.seed)
}

/// Writes `report.json` and `samples.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jp = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: jp.clone(),
        source: e,
    })?;
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    let cp = dir.join("samples.csv");
    let mut w = csv::Writer::from_path(&cp).map_err(|e| csv_error(&cp, e))?;
    w.write_record([
        "index",
        "object_id",
        "rot_err_deg",
        "trans_err_m",
        "depth_rel_err",
        "best_rot_err_deg",
        "spread_deg",
        "coarse_rot_err_deg",
    ])
    .map_err(|e| csv_error(&cp, e))?;
    for r in &report.samples {
        w.write_record([
            r.index.to_string(),
            r.object_id.to_string(),
            r.rot_err_deg.to_string(),
            r.trans_err_m.to_string(),
            r.depth_rel_err.to_string(),
            r.best_rot_err_deg.to_string(),
            r.spread_deg.to_string(),
            r.coarse_rot_err_deg.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(|e| csv_error(&cp, e))?;
    }
    w.flush().map_err(|e| Error::io(&cp, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig};
    use crate::geometry::Rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize) -> Vec<Sample> {
        generate_dataset(&GenConfig {
            samples: n,
            templates: 2,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = samples(20);
        let preds: Vec<_> = s.iter().map(|s| Prediction::exact(s.query.pose)).collect();
        let r = evaluate_predictions(&s, &preds, 0).unwrap();
        assert_eq!(r.summary.recall_5deg, 1.0);
        assert_eq!(r.summary.recall_5deg_5pct_depth, 1.0);
        assert!(r.samples.iter().all(|x| x.rot_err_deg < 1e-6 && x.trans_err_m == 0.0 && x.depth_rel_err == 0.0));
    }

    #[test]
    fn random_rotations_have_the_uniform_median() {
        // median of the uniform-SO(3) angle density (1 - cos x)/pi
        let s = samples(600);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<_> = s
            .iter()
            .map(|s| Prediction::exact(Pose::new(Rotation::random(&mut rng), s.query.pose.t)))
            .collect();
        let r = evaluate_predictions(&s, &preds, 0).unwrap();
        assert!((r.summary.median_rot_deg - 132.35).abs() < 5.0, "{}", r.summary.median_rot_deg);
        assert!((r.summary.mean_rot_deg - 126.5).abs() < 5.0, "{}", r.summary.mean_rot_deg);
    }

    #[test]
    fn reports_are_deterministic() {
        let s = samples(10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<_> = s
            .iter()
            .map(|s| Prediction::exact(Pose::new(Rotation::random(&mut rng), s.query.pose.t)))
            .collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_report(&evaluate_predictions(&s, &preds, 1).unwrap(), a.path()).unwrap();
        write_report(&evaluate_predictions(&s, &preds, 1).unwrap(), b.path()).unwrap();
        for f in ["report.json", "samples.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
