//! Ablation sweeps: retrain from scratch for every (setting, seed) pair
//! while everything else stays fixed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PromptSubset, SweepAxis, SweepValue, TeacherKind};
use crate::error::{Error, Result};
use crate::experiment::{build_dataset, run_once, teacher_labels, Dataset};
use crate::ovs_teacher::PseudoLabelStore;
use crate::trainer::MetricHistory;

/// One grid point along a sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Setting {
    Number(f64),
    Count(usize),
    Prompts(PromptSubset),
    Teacher(TeacherKind),
}

impl Setting {
    pub fn parse(axis: SweepAxis, value: &SweepValue) -> Result<Setting> {
        let num = || match value {
            SweepValue::Num(v) => Ok(*v),
            SweepValue::Text(s) => s
                .parse::<f64>()
                .map_err(|_| Error::config(format!("{} grid needs numbers, got {s:?}", axis.name()))),
        };
        let text = || match value {
            SweepValue::Text(s) => Ok(s.clone()),
            SweepValue::Num(v) => Err(Error::config(format!("{} grid needs names, got {v}", axis.name()))),
        };
        Ok(match axis {
            SweepAxis::TauOut | SweepAxis::LambdaOut => Setting::Number(num()?),
            SweepAxis::NUnlabeledOut => {
                let v = num()?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::config(format!("n_unlabeled_out grid value {v} is not a count")));
                }
                Setting::Count(v as usize)
            }
            SweepAxis::PromptSubset => Setting::Prompts(PromptSubset::parse(&text()?)?),
            SweepAxis::TeacherSource => Setting::Teacher(TeacherKind::parse(&text()?)?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Setting::Number(v) => format!("{v}"),
            Setting::Count(n) => n.to_string(),
            Setting::Prompts(p) => p.name().to_string(),
            Setting::Teacher(t) => t.name().to_string(),
        }
    }

    /// Position on a plot's x axis.
    pub fn position(&self) -> f64 {
        match self {
            Setting::Number(v) => *v,
            Setting::Count(n) => *n as f64,
            Setting::Prompts(p) => *p as u8 as f64,
            Setting::Teacher(t) => *t as u8 as f64,
        }
    }

    pub fn apply(&self, axis: SweepAxis, cfg: &mut ExperimentConfig) {
        match *self {
            Setting::Number(v) if axis == SweepAxis::TauOut => cfg.train.tau_out = v,
            Setting::Number(v) => cfg.train.lambda_out = v,
            Setting::Count(n) => cfg.train.n_unlabeled_out = n,
            Setting::Prompts(p) => cfg.teacher.prompt_subset = p,
            Setting::Teacher(t) => cfg.teacher.source = t,
        }
    }
}

/// Parse, sort and de-duplicate a grid.
pub fn parse_grid(axis: SweepAxis, grid: &[SweepValue]) -> Result<Vec<Setting>> {
    if grid.is_empty() {
        return Err(Error::config(format!("{} sweep grid is empty", axis.name())));
    }
    let mut settings = grid
        .iter()
        .map(|v| Setting::parse(axis, v))
        .collect::<Result<Vec<_>>>()?;
    settings.sort_by(|a, b| a.position().total_cmp(&b.position()));
    settings.dedup_by(|a, b| a.position() == b.position());
    Ok(settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub history: MetricHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: Setting,
    pub runs: Vec<RunRecord>,
}

impl SettingResult {
    pub fn median_miou(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.miou).collect::<Vec<_>>())
    }

    pub fn mean_miou(&self) -> f64 {
        self.runs.iter().map(|r| r.miou).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub class_names: Vec<String>,
    pub settings: Vec<SettingResult>,
}

impl SweepResult {
    pub fn run_count(&self) -> usize {
        self.settings.iter().map(|s| s.runs.len()).sum()
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// A failed sweep together with the runs that completed before the failure.
#[derive(Debug)]
pub struct SweepAbort {
    pub partial: SweepResult,
    pub error: Error,
}

/// Run every grid setting once per seed. Pseudo-labels are computed once
/// per prompt subset and shared across runs.
pub fn run_sweep(
    axis: SweepAxis,
    grid: &[SweepValue],
    base: &ExperimentConfig,
    seeds: &[u64],
) -> std::result::Result<SweepResult, SweepAbort> {
    let mut result = SweepResult {
        axis,
        class_names: base.scene.in_class_names.clone(),
        settings: Vec::new(),
    };
    let abort = |partial: &SweepResult, error: Error| SweepAbort {
        partial: partial.clone(),
        error,
    };
    let settings = parse_grid(axis, grid).map_err(|e| abort(&result, e))?;
    if seeds.is_empty() {
        return Err(abort(&result, Error::config("sweep needs at least one seed")));
    }
    let data: Dataset = build_dataset(base).map_err(|e| abort(&result, e))?;
    let mut stores: BTreeMap<PromptSubset, PseudoLabelStore> = BTreeMap::new();

    for setting in settings {
        let mut cfg = base.clone();
        setting.apply(axis, &mut cfg);
        let uses_store = cfg.teacher.source == TeacherKind::Ovs && cfg.train.n_unlabeled_out > 0;
        if uses_store && !stores.contains_key(&cfg.teacher.prompt_subset) {
            let ps = cfg.prompt_set().map_err(|e| abort(&result, e))?;
            let store = teacher_labels(&cfg, &ps, &data.ood).map_err(|e| abort(&result, e))?;
            stores.insert(cfg.teacher.prompt_subset, store);
        }
        let store = stores.get(&cfg.teacher.prompt_subset);
        let mut entry = SettingResult {
            setting,
            runs: Vec::new(),
        };
        for &seed in seeds {
            cfg.train.seed = seed;
            match run_once(&cfg, &data, store) {
                Ok(out) => entry.runs.push(RunRecord {
                    seed,
                    miou: out.eval.miou,
                    per_class: out.eval.per_class,
                    history: out.history,
                }),
                Err(e) => {
                    if !entry.runs.is_empty() {
                        result.settings.push(entry);
                    }
                    return Err(abort(&result, e));
                }
            }
        }
        result.settings.push(entry);
    }
    Ok(result)
}
