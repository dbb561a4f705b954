//! Experiment configuration: one TOML document with `[scene]`, `[data]`,
//! `[train]`, `[teacher]` and `[sweep]` sections. Unknown keys are rejected
//! and every missing key takes its default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_synth::{Protocol, SceneSpec};
use crate::error::{Error, Result};
use crate::ovs_teacher::{build_prompt_set, default_templates, Embedder, FileEmbedder, OracleEmbedder, PromptSet};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// In-distribution scenes; split into labeled and unlabeled.
    pub n_scenes: usize,
    pub n_labeled: usize,
    pub protocol: Protocol,
    /// Share of scenes whose annotation is fine rather than coarse.
    pub quality_fraction: f64,
    /// OOD corpus size.
    pub n_ood: usize,
    /// Held-out in-distribution test scenes.
    pub n_test: usize,
    pub split_seed: u64,
    /// Drop corpus images with more pixels than this.
    pub max_pixels: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_scenes: 60,
            n_labeled: 12,
            protocol: Protocol::Original,
            quality_fraction: 0.5,
            n_ood: 48,
            n_test: 40,
            split_seed: 1,
            max_pixels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Stored open-vocabulary pseudo-labels.
    Ovs,
    /// The student labels OOD images itself.
    #[serde(rename = "self")]
    SelfTeacher,
}

impl TeacherKind {
    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Ovs => "ovs",
            TeacherKind::SelfTeacher => "self",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ovs" => Ok(TeacherKind::Ovs),
            "self" => Ok(TeacherKind::SelfTeacher),
            _ => Err(Error::config(format!("unknown teacher source {s:?} (expected ovs or self)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Synthetic embedder that reads the full-vocabulary scene layout.
    Oracle,
    /// Embeddings exported by an external model into a directory.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSubset {
    /// Only the target classes.
    TargetsOnly,
    /// Targets plus the first half (rounded up) of the extra classes.
    Half,
    /// Targets plus every extra class.
    Full,
}

impl PromptSubset {
    pub fn name(self) -> &'static str {
        match self {
            PromptSubset::TargetsOnly => "targets_only",
            PromptSubset::Half => "half",
            PromptSubset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "targets_only" => Ok(PromptSubset::TargetsOnly),
            "half" => Ok(PromptSubset::Half),
            "full" => Ok(PromptSubset::Full),
            _ => Err(Error::config(format!(
                "unknown prompt subset {s:?} (expected targets_only, half or full)"
            ))),
        }
    }

    pub fn select(self, extras: &[String]) -> Vec<String> {
        let n = match self {
            PromptSubset::TargetsOnly => 0,
            PromptSubset::Half => extras.len().div_ceil(2),
            PromptSubset::Full => extras.len(),
        };
        extras[..n].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub source: TeacherKind,
    pub embedder: EmbedderKind,
    /// Oracle embedding dimension.
    pub dim: usize,
    /// Oracle pixel-embedding noise level.
    pub noise: f64,
    /// Oracle pull of OOD class vectors toward a target class.
    pub confusion: f64,
    pub seed: u64,
    /// Softmax temperature of the decoder.
    pub temperature: f64,
    pub prompt_subset: PromptSubset,
    /// Extra vocabulary; defaults to the scene's OOD class names.
    pub extra_classes: Option<Vec<String>>,
    pub templates: Vec<String>,
    /// Synonym phrases per class name, averaged into one class embedding.
    pub concepts: BTreeMap<String, Vec<String>>,
    /// Directory read by the file embedder.
    pub embedding_dir: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            source: TeacherKind::Ovs,
            embedder: EmbedderKind::Oracle,
            dim: 32,
            noise: 0.15,
            confusion: OracleEmbedder::DEFAULT_CONFUSION,
            seed: 11,
            temperature: 0.1,
            prompt_subset: PromptSubset::Full,
            extra_classes: None,
            templates: default_templates(),
            concepts: BTreeMap::new(),
            embedding_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TauOut,
    LambdaOut,
    PromptSubset,
    TeacherSource,
    NUnlabeledOut,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TauOut => "tau_out",
            SweepAxis::LambdaOut => "lambda_out",
            SweepAxis::PromptSubset => "prompt_subset",
            SweepAxis::TeacherSource => "teacher_source",
            SweepAxis::NUnlabeledOut => "n_unlabeled_out",
        }
    }
}

/// Grid entry: a number for numeric axes, a name for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: Option<SweepAxis>,
    pub grid: Vec<SweepValue>,
    /// Training seeds; each grid setting runs once per seed.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: None,
            grid: Vec::new(),
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root for command outputs when no `--out` is given.
    pub output_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Resolved form with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_test == 0 {
            return Err(Error::config("data.n_test must be positive"));
        }
        if !(0.0..=1.0).contains(&d.quality_fraction) {
            return Err(Error::config("data.quality_fraction must lie in [0, 1]"));
        }
        if d.n_labeled == 0 || d.n_labeled >= d.n_scenes {
            return Err(Error::InfeasibleSplit(format!(
                "need 0 < n_labeled < n_scenes, got {} labeled of {}",
                d.n_labeled, d.n_scenes
            )));
        }
        if self.train.n_unlabeled_out > 0 && d.n_ood == 0 {
            return Err(Error::config("train.n_unlabeled_out > 0 needs data.n_ood > 0"));
        }
        if self.scene.height < self.train.crop_size || self.scene.width < self.train.crop_size {
            return Err(Error::config("train.crop_size exceeds the scene size"));
        }
        let t = &self.teacher;
        if !(t.temperature > 0.0) {
            return Err(Error::config("teacher.temperature must be positive"));
        }
        if t.embedder == EmbedderKind::File && t.embedding_dir.is_none() {
            return Err(Error::config("teacher.embedder = \"file\" needs teacher.embedding_dir"));
        }
        self.prompt_set()?;
        Ok(())
    }

    pub fn extra_classes(&self) -> Vec<String> {
        self.teacher
            .extra_classes
            .clone()
            .unwrap_or_else(|| self.scene.ood_class_names.clone())
    }

    pub fn prompt_set(&self) -> Result<PromptSet> {
        self.prompt_set_for(self.teacher.prompt_subset)
    }

    pub fn prompt_set_for(&self, subset: PromptSubset) -> Result<PromptSet> {
        let t = &self.teacher;
        // concepts for classes that the subset leaves out are dropped
        let extras = subset.select(&self.extra_classes());
        let keep: Vec<&String> = self.scene.in_class_names.iter().chain(&extras).collect();
        let concepts = t
            .concepts
            .iter()
            .filter(|(k, _)| keep.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        build_prompt_set(&self.scene.in_class_names, &extras, &t.templates, &concepts)
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        let t = &self.teacher;
        match t.embedder {
            EmbedderKind::Oracle => {
                let mut e = OracleEmbedder::with_confusion(&self.scene, t.dim, t.noise, t.seed, t.confusion)?;
                for (class, phrases) in &t.concepts {
                    for phrase in phrases.iter().filter(|p| *p != class) {
                        e.add_alias(phrase, class)?;
                    }
                }
                Ok(Box::new(e))
            }
            EmbedderKind::File => {
                let dir = t.embedding_dir.as_ref().expect("validated");
                Ok(Box::new(FileEmbedder::open(dir)?))
            }
        }
    }
}
