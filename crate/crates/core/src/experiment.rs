//! Building datasets from a configuration, reading and writing them on disk,
//! and running one train + evaluate cycle.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TeacherKind};
use crate::data_synth::{
    coarsen_label, generate_scene, load_manifest, make_splits, write_manifest, CorpusItem, DatasetSplit,
    LabelQuality, Protocol, Scene,
};
use crate::error::{Error, Result};
use crate::evalkit::metrics::{evaluate, MiouResult};
use crate::ovs_teacher::offline::{load_corpus_item, semantic_sidecar};
use crate::ovs_teacher::{label_items, OfflineItem, PromptSet, PseudoLabelStore};
use crate::seeding::{derive_seed, tag};
use crate::trainer::{train, ConvNet, MetricHistory, TeacherSource, TrainData};
use crate::types::{Image, LabelMap};

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn ood_id(index: usize) -> String {
    format!("ood_{index:04}")
}

pub fn test_id(index: usize) -> String {
    format!("test_{index:04}")
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub id: String,
    pub image: Image,
    /// Training label: the ground truth, or its coarsened version.
    pub label: LabelMap,
    pub quality: LabelQuality,
}

/// Everything a run needs, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub split: DatasetSplit,
    pub labeled: Vec<LabeledItem>,
    pub unlabeled_in: Vec<(String, Image)>,
    /// OOD corpus; the semantic map is only used by the oracle embedder.
    pub ood: Vec<OfflineItem>,
    pub test: Vec<(Image, LabelMap)>,
}

fn coarse_seed(split_seed: u64, index: usize) -> u64 {
    derive_seed(split_seed, &[tag("coarse"), index as u64])
}

/// Generate the synthetic benchmark described by `cfg`.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let spec = &cfg.scene;
    let mut split = make_splits(d.n_scenes, d.n_labeled, d.protocol, d.quality_fraction, d.split_seed)?;
    let scenes: Vec<Scene> = (0..d.n_scenes)
        .into_par_iter()
        .map(|i| generate_scene(spec, i as u64, false))
        .collect::<Result<_>>()?;
    let ood: Vec<Scene> = (0..d.n_ood)
        .into_par_iter()
        .map(|j| generate_scene(spec, j as u64, true))
        .collect::<Result<_>>()?;
    let test: Vec<Scene> = (0..d.n_test)
        .into_par_iter()
        .map(|k| generate_scene(spec, (d.n_scenes + k) as u64, false))
        .collect::<Result<_>>()?;

    split.unlabeled_out = (0..d.n_ood).map(ood_id).collect();
    let labeled = split
        .labeled
        .iter()
        .map(|&(i, quality)| LabeledItem {
            id: scene_id(i),
            image: scenes[i].image.clone(),
            label: match quality {
                LabelQuality::Fine => scenes[i].label.clone(),
                LabelQuality::Coarse => coarsen_label(&scenes[i].label, coarse_seed(d.split_seed, i)),
            },
            quality,
        })
        .collect();
    let unlabeled_in = split
        .unlabeled_in
        .iter()
        .map(|&i| (scene_id(i), scenes[i].image.clone()))
        .collect();
    Ok(Dataset {
        class_names: spec.in_class_names.clone(),
        split,
        labeled,
        unlabeled_in,
        ood: ood
            .iter()
            .enumerate()
            .map(|(j, s)| OfflineItem::from_scene(ood_id(j), s))
            .collect(),
        test: test.into_iter().map(|s| (s.image, s.label)).collect(),
    })
}

impl Dataset {
    pub fn train_data(&self) -> TrainData {
        TrainData {
            labeled: self.labeled.iter().map(|l| (l.image.clone(), l.label.clone())).collect(),
            unlabeled_in: self.unlabeled_in.iter().map(|(_, i)| i.clone()).collect(),
            unlabeled_out: self.ood.iter().map(|o| (o.id.clone(), o.image.clone())).collect(),
        }
    }

    pub fn ood_ids(&self) -> Vec<String> {
        self.ood.iter().map(|o| o.id.clone()).collect()
    }
}

/// Pseudo-label the OOD corpus in memory.
pub fn teacher_labels(cfg: &ExperimentConfig, prompt_set: &PromptSet, ood: &[OfflineItem]) -> Result<PseudoLabelStore> {
    let embedder = cfg.embedder()?;
    let items: Vec<Result<OfflineItem>> = ood.iter().cloned().map(Ok).collect();
    let ids: Vec<String> = ood.iter().map(|o| o.id.clone()).collect();
    let (store, skipped) = label_items(&items, &ids, prompt_set, embedder.as_ref(), cfg.teacher.temperature)?;
    if let Some(first) = skipped.first() {
        return Err(Error::Run(format!("teacher failed on {}: {}", first.id, first.reason)));
    }
    Ok(store)
}

/// Outcome of one train + evaluate cycle.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ConvNet<f32>,
    pub history: MetricHistory,
    pub eval: MiouResult,
}

pub fn init_model(cfg: &ExperimentConfig) -> ConvNet<f32> {
    ConvNet::new(
        cfg.train.model_width,
        cfg.scene.n_in(),
        derive_seed(cfg.train.seed, &[tag("init")]),
    )
}

/// Train from scratch and score the test split. `store` must hold labels
/// for every OOD item when the OVS teacher is selected and the OOD flow is on.
pub fn run_once(cfg: &ExperimentConfig, data: &Dataset, store: Option<&PseudoLabelStore>) -> Result<RunOutcome> {
    let mut model = init_model(cfg);
    let train_data = data.train_data();
    let empty = PseudoLabelStore::new();
    let teacher = match cfg.teacher.source {
        TeacherKind::Ovs => TeacherSource::Ovs(store.unwrap_or(&empty)),
        TeacherKind::SelfTeacher => TeacherSource::SelfTeacher,
    };
    let history = train(&mut model, &train_data, teacher, &cfg.train)?;
    let eval = evaluate(&model, &data.test)?.miou()?;
    Ok(RunOutcome { model, history, eval })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub class_names: Vec<String>,
    pub n_scenes: usize,
    pub n_ood: usize,
    pub n_test: usize,
    pub protocols: Vec<SplitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub protocol: Protocol,
    pub labeled: usize,
    pub fine: usize,
    pub coarse: usize,
    pub unlabeled_in: usize,
}

/// On-disk dataset layout.
///
/// ```text
/// scenes/<id>.png          image
/// scenes/<id>.label.png    ground truth
/// scenes/<id>.coarse.png   coarse annotation (coarse tier only)
/// ood/<id>.png             OOD corpus image, ood/<id>.sem.png semantic sidecar
/// test/<id>.png, test/<id>.label.png
/// ood_manifest.tsv         corpus manifest
/// splits/<protocol>.json   one split file per protocol
/// summary.json
/// ```
pub struct DatasetDir {
    pub root: PathBuf,
}

fn save_png_rgb(path: &Path, img: &Image) -> Result<()> {
    img.to_rgb8().save(path)?;
    Ok(())
}

fn save_png_label(path: &Path, label: &LabelMap) -> Result<()> {
    label.to_luma8().save(path)?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Image> {
    Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
}

fn read_label(path: &Path) -> Result<LabelMap> {
    Ok(LabelMap::from_luma8(&image::open(path)?.to_luma8()))
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("ood_manifest.tsv")
    }

    pub fn split_path(&self, protocol: Protocol) -> PathBuf {
        self.root.join("splits").join(format!("{}.json", protocol.name()))
    }

    /// Generate every scene and write the layout; returns the summary.
    pub fn write(&self, cfg: &ExperimentConfig) -> Result<DatasetSummary> {
        cfg.validate()?;
        let d = &cfg.data;
        let spec = &cfg.scene;
        let mut protocols = Vec::new();
        let mut splits = Vec::new();
        for protocol in Protocol::ALL {
            // the configured protocol must be feasible; the others are written when they are
            match make_splits(d.n_scenes, d.n_labeled, protocol, d.quality_fraction, d.split_seed) {
                Ok(mut s) => {
                    s.unlabeled_out = (0..d.n_ood).map(ood_id).collect();
                    splits.push(s);
                }
                Err(e) if protocol == d.protocol => return Err(e),
                Err(_) => {}
            }
        }
        for dir in ["scenes", "ood", "test", "splits"] {
            fs::create_dir_all(self.root.join(dir))?;
        }
        let coarse: std::collections::BTreeSet<usize> = crate::data_synth::quality_tiers(
            d.n_scenes,
            d.quality_fraction,
            d.split_seed,
        )
        .1
        .into_iter()
        .collect();

        (0..d.n_scenes).into_par_iter().try_for_each(|i| -> Result<()> {
            let s = generate_scene(spec, i as u64, false)?;
            let base = self.root.join("scenes").join(scene_id(i));
            save_png_rgb(&base.with_extension("png"), &s.image)?;
            save_png_label(&base.with_extension("label.png"), &s.label)?;
            if coarse.contains(&i) {
                let c = coarsen_label(&s.label, coarse_seed(d.split_seed, i));
                save_png_label(&base.with_extension("coarse.png"), &c)?;
            }
            Ok(())
        })?;
        (0..d.n_ood).into_par_iter().try_for_each(|j| -> Result<()> {
            let s = generate_scene(spec, j as u64, true)?;
            let path = self.root.join("ood").join(format!("{}.png", ood_id(j)));
            save_png_rgb(&path, &s.image)?;
            save_png_label(&semantic_sidecar(&path), &s.semantic)
        })?;
        (0..d.n_test).into_par_iter().try_for_each(|k| -> Result<()> {
            let s = generate_scene(spec, (d.n_scenes + k) as u64, false)?;
            let base = self.root.join("test").join(test_id(k));
            save_png_rgb(&base.with_extension("png"), &s.image)?;
            save_png_label(&base.with_extension("label.png"), &s.label)
        })?;

        let items: Vec<CorpusItem> = (0..d.n_ood)
            .map(|j| CorpusItem {
                id: ood_id(j),
                path: PathBuf::from("ood").join(format!("{}.png", ood_id(j))),
                width: spec.width as u64,
                height: spec.height as u64,
            })
            .collect();
        write_manifest(&self.manifest_path(), &items)?;

        for s in &splits {
            let fine = s.labeled.iter().filter(|(_, q)| *q == LabelQuality::Fine).count();
            protocols.push(SplitSummary {
                protocol: s.protocol,
                labeled: s.labeled.len(),
                fine,
                coarse: s.labeled.len() - fine,
                unlabeled_in: s.unlabeled_in.len(),
            });
            fs::write(self.split_path(s.protocol), serde_json::to_string_pretty(s).expect("split serializes"))?;
        }
        let summary = DatasetSummary {
            class_names: spec.in_class_names.clone(),
            n_scenes: d.n_scenes,
            n_ood: d.n_ood,
            n_test: d.n_test,
            protocols,
        };
        fs::write(
            self.root.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
        Ok(summary)
    }

    pub fn read_split(&self, protocol: Protocol) -> Result<DatasetSplit> {
        let path = self.split_path(protocol);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Run(format!("cannot read split {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn read_test(&self, n_test: usize) -> Result<Vec<(Image, LabelMap)>> {
        (0..n_test)
            .into_par_iter()
            .map(|k| {
                let base = self.root.join("test").join(test_id(k));
                Ok((read_rgb(&base.with_extension("png"))?, read_label(&base.with_extension("label.png"))?))
            })
            .collect()
    }

    /// Load the dataset written by [`DatasetDir::write`] under `cfg`'s protocol.
    pub fn read(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        if !self.root.join("summary.json").exists() {
            return Err(Error::Run(format!(
                "no dataset at {} (run `generate` first)",
                self.root.display()
            )));
        }
        let split = self.read_split(cfg.data.protocol)?;
        let scene_path = |i: usize, ext: &str| self.root.join("scenes").join(scene_id(i)).with_extension(ext);
        let labeled = split
            .labeled
            .par_iter()
            .map(|&(i, quality)| {
                let ext = match quality {
                    LabelQuality::Fine => "label.png",
                    LabelQuality::Coarse => "coarse.png",
                };
                Ok(LabeledItem {
                    id: scene_id(i),
                    image: read_rgb(&scene_path(i, "png"))?,
                    label: read_label(&scene_path(i, ext))?,
                    quality,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled_in = split
            .unlabeled_in
            .par_iter()
            .map(|&i| Ok((scene_id(i), read_rgb(&scene_path(i, "png"))?)))
            .collect::<Result<Vec<_>>>()?;
        let manifest = load_manifest(&self.manifest_path(), cfg.data.max_pixels)?;
        let ood = (0..manifest.items.len())
            .into_par_iter()
            .map(|i| load_corpus_item(&manifest, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            class_names: cfg.scene.in_class_names.clone(),
            split,
            labeled,
            unlabeled_in,
            ood,
            test: self.read_test(cfg.data.n_test)?,
        })
    }
}
