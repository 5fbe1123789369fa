use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::eval::{evaluate, write_report, EvalReport};
use super::infer::InferOptions;
use super::train::{csv_error, train, TrainConfig};
use crate::datagen::{generate_dataset, GenConfig, TemplateDistribution};
use crate::model::PoseNet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Fixed, random and three local template distributions.
    TemplateDistribution,
    /// Relative vs absolute pose supervision.
    PoseFrame,
    /// Multiview fusion vs independent single views.
    Views,
    /// With vs without template pose maps in the view encoder.
    PoseConditioning,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::TemplateDistribution,
        AblationAxis::PoseFrame,
        AblationAxis::Views,
        AblationAxis::PoseConditioning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::TemplateDistribution => "template-distribution",
            AblationAxis::PoseFrame => "pose-frame",
            AblationAxis::Views => "views",
            AblationAxis::PoseConditioning => "pose-conditioning",
        }
    }

    /// Setting label, training config and evaluation generator per setting.
    /// The first setting is the reference configuration.
    pub fn settings(self, train: &TrainConfig, eval: &GenConfig) -> Vec<(String, TrainConfig, GenConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut t = train.clone();
            f(&mut t);
            t
        };
        match self {
            AblationAxis::TemplateDistribution => template_sweep()
                .into_iter()
                .map(|d| {
                    let mut t = train.clone();
                    t.data.distribution = d;
                    let e = GenConfig {
                        distribution: d,
                        ..eval.clone()
                    };
                    (d.label(), t, e)
                })
                .collect(),
            AblationAxis::PoseFrame => vec![
                ("relative".into(), train.clone(), eval.clone()),
                ("absolute".into(), with(&|t| t.model.absolute_pose = true), eval.clone()),
            ],
            AblationAxis::Views => vec![
                ("multiview".into(), train.clone(), eval.clone()),
                ("single_view".into(), with(&|t| t.model.single_view = true), eval.clone()),
            ],
            AblationAxis::PoseConditioning => vec![
                ("pose_conditioned".into(), train.clone(), eval.clone()),
                ("no_pose".into(), with(&|t| t.model.condition_template_pose = false), eval.clone()),
            ],
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

/// Fixed, random, then local bounds of 90°/10 cm, 30°/5 cm and 15°/3 cm.
pub fn template_sweep() -> Vec<TemplateDistribution> {
    vec![
        TemplateDistribution::Fixed,
        TemplateDistribution::Random,
        TemplateDistribution::Local {
            max_rot_deg: 90.0,
            max_trans_m: 0.10,
        },
        TemplateDistribution::Local {
            max_rot_deg: 30.0,
            max_trans_m: 0.05,
        },
        TemplateDistribution::Local {
            max_rot_deg: 15.0,
            max_trans_m: 0.03,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Held-out evaluation samples.
    pub eval: GenConfig,
    pub seeds: Vec<u64>,
    pub infer: InferOptions,
    pub out_dir: PathBuf,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            eval: GenConfig {
                seed: 1_000_003,
                samples: 500,
                ..GenConfig::default()
            },
            seeds: vec![0, 1, 2],
            infer: InferOptions::default(),
            out_dir: PathBuf::from("runs/ablate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub seed: u64,
    pub samples: usize,
    pub median_rot_deg: f64,
    pub median_trans_m: f64,
    pub median_depth_rel: f64,
    pub recall_5deg: f64,
}

/// Trains and evaluates one configuration; returns the report.
pub fn train_and_evaluate(train_cfg: &TrainConfig, eval: &GenConfig, opts: &InferOptions, dir: &Path) -> Result<EvalReport> {
    let t = TrainConfig {
        out_dir: dir.to_path_buf(),
        ..train_cfg.clone()
    };
    let out = train(&t)?;
    let ck = Checkpoint::load(&out.checkpoint)?;
    let sched = ck.config.schedule.build()?;
    let samples = generate_dataset(eval)?;
    let report = evaluate::<_, PoseNet<f32>>((&ck.net, &sched), None, &samples, None, opts)?;
    write_report(&report, &dir.join("eval"))?;
    Ok(report)
}

/// Runs every setting of `axis` for every seed and writes
/// `ablation_<axis>.csv` under `cfg.out_dir`.
pub fn ablate(axis: AblationAxis, cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (label, t, e) in axis.settings(&cfg.train, &cfg.eval) {
        for &seed in &cfg.seeds {
            let dir = cfg.out_dir.join(axis.name()).join(&label).join(format!("seed_{seed}"));
            let tc = TrainConfig { seed, ..t.clone() };
            let r = train_and_evaluate(&tc, &e, &cfg.infer, &dir)?;
            log::info!("{axis} {label} seed {seed}: median rotation error {:.2} deg", r.summary.median_rot_deg);
            rows.push(AblationRow {
                axis: axis.name().into(),
                setting: label.clone(),
                seed,
                samples: r.summary.samples,
                median_rot_deg: r.summary.median_rot_deg,
                median_trans_m: r.summary.median_trans_m,
                median_depth_rel: r.summary.median_depth_rel,
                recall_5deg: r.summary.recall_5deg,
            });
        }
    }
    write_rows(&cfg.out_dir.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_sweep_has_five_settings() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("bogus".parse::<AblationAxis>().is_err());
        let s = AblationAxis::TemplateDistribution.settings(&TrainConfig::default(), &GenConfig::default());
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|(_, t, e)| t.data.distribution == e.distribution));
        let s = AblationAxis::PoseFrame.settings(&TrainConfig::default(), &GenConfig::default());
        assert!(!s[0].1.model.absolute_pose && s[1].1.model.absolute_pose);
    }
}
