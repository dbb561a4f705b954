//! Offline pseudo-labeling of an unlabeled corpus.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{CorpusManifest, Scene};
use crate::error::{Error, Result};
use crate::types::{Image, LabelMap};

use super::cost::{cost_volume, decode, encode_text, TextEmbeddings};
use super::embedder::{Embedder, TeacherInput};
use super::prompt::PromptSet;
use super::pseudo::{make_pseudo_label, pseudo_label_path, write_pseudo_label, PseudoLabel, PseudoLabelStore};

/// Full teacher pipeline for one image: embed, cost volume, decode at the
/// image's resolution, refine.
pub fn pseudo_label_item(
    input: &TeacherInput<'_>,
    text: &TextEmbeddings,
    embedder: &dyn Embedder,
    n_in: usize,
    temperature: f64,
) -> Result<PseudoLabel> {
    let field = embedder.embed_image(input)?;
    let (cv, _) = cost_volume(&field, text)?;
    let prob = decode(&cv, input.image.dims(), temperature)?;
    Ok(make_pseudo_label(&prob, n_in))
}

/// One corpus entry ready for the teacher.
#[derive(Debug, Clone)]
pub struct OfflineItem {
    pub id: String,
    pub image: Image,
    pub semantic: Option<LabelMap>,
}

impl OfflineItem {
    pub fn from_scene(id: impl Into<String>, scene: &Scene) -> Self {
        OfflineItem {
            id: id.into(),
            image: scene.image.clone(),
            semantic: Some(scene.semantic.clone()),
        }
    }

    fn input(&self) -> TeacherInput<'_> {
        TeacherInput {
            id: &self.id,
            image: &self.image,
            semantic: self.semantic.as_ref(),
        }
    }
}

/// Path of the optional full-vocabulary sidecar for a corpus image.
pub fn semantic_sidecar(image_path: &Path) -> std::path::PathBuf {
    image_path.with_extension("sem.png")
}

/// Read the image of a manifest item plus its semantic sidecar if present.
pub fn load_corpus_item(manifest: &CorpusManifest, index: usize) -> Result<OfflineItem> {
    let item = &manifest.items[index];
    let path = manifest.resolve(item);
    let image = Image::from_rgb8(&image::open(&path)?.to_rgb8());
    let sidecar = semantic_sidecar(&path);
    let semantic = if sidecar.exists() {
        let sem = LabelMap::from_luma8(&image::open(&sidecar)?.to_luma8());
        if sem.dims() != image.dims() {
            return Err(Error::format(&sidecar, "semantic map size differs from image"));
        }
        Some(sem)
    } else {
        None
    };
    Ok(OfflineItem {
        id: item.id.clone(),
        image,
        semantic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub items: usize,
    pub written: usize,
    pub skipped: Vec<SkippedItem>,
    pub class_names: Vec<String>,
    /// Pixel count per target class over all written labels.
    pub class_pixels: Vec<u64>,
    pub mean_confidence: f64,
}

/// Pseudo-label in-memory items. Items the teacher cannot process are
/// returned as skipped.
pub fn label_items(
    items: &[Result<OfflineItem>],
    ids: &[String],
    prompt_set: &PromptSet,
    embedder: &dyn Embedder,
    temperature: f64,
) -> Result<(PseudoLabelStore, Vec<SkippedItem>)> {
    let text = encode_text(prompt_set, embedder)?;
    let n_in = prompt_set.n_in();
    let results: Vec<Result<PseudoLabel>> = items
        .par_iter()
        .map(|item| match item {
            Ok(it) => pseudo_label_item(&it.input(), &text, embedder, n_in, temperature),
            Err(e) => Err(Error::Run(e.to_string())),
        })
        .collect();
    let mut store = PseudoLabelStore::new();
    let mut skipped = Vec::new();
    for (id, res) in ids.iter().zip(results) {
        match res {
            Ok(pl) => store.insert(id.clone(), pl),
            Err(e) => skipped.push(SkippedItem {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok((store, skipped))
}

/// Convenience wrapper for synthetic scenes.
pub fn label_scenes(
    scenes: &[(String, Scene)],
    prompt_set: &PromptSet,
    embedder: &dyn Embedder,
    temperature: f64,
) -> Result<PseudoLabelStore> {
    let items: Vec<Result<OfflineItem>> = scenes
        .iter()
        .map(|(id, s)| Ok(OfflineItem::from_scene(id.clone(), s)))
        .collect();
    let ids: Vec<String> = scenes.iter().map(|(id, _)| id.clone()).collect();
    let (store, skipped) = label_items(&items, &ids, prompt_set, embedder, temperature)?;
    if let Some(first) = skipped.first() {
        return Err(Error::Run(format!("teacher failed on {}: {}", first.id, first.reason)));
    }
    Ok(store)
}

pub enum OfflineSource<'a> {
    Manifest(&'a CorpusManifest),
    Scenes(&'a [(String, Scene)]),
}

/// Write one `<id>.sovspl` per item plus `summary.json` into `out_dir`.
pub fn generate_offline(
    source: OfflineSource<'_>,
    prompt_set: &PromptSet,
    embedder: &dyn Embedder,
    temperature: f64,
    out_dir: &Path,
) -> Result<OfflineSummary> {
    fs::create_dir_all(out_dir)?;
    let (items, ids): (Vec<Result<OfflineItem>>, Vec<String>) = match source {
        OfflineSource::Manifest(m) => (
            (0..m.items.len()).into_par_iter().map(|i| load_corpus_item(m, i)).collect(),
            m.items.iter().map(|it| it.id.clone()).collect(),
        ),
        OfflineSource::Scenes(s) => (
            s.iter().map(|(id, sc)| Ok(OfflineItem::from_scene(id.clone(), sc))).collect(),
            s.iter().map(|(id, _)| id.clone()).collect(),
        ),
    };
    let (store, skipped) = label_items(&items, &ids, prompt_set, embedder, temperature)?;
    if store.is_empty() {
        return Err(Error::Run(format!(
            "all {} corpus items were skipped{}",
            ids.len(),
            skipped.first().map(|s| format!(" (first: {}: {})", s.id, s.reason)).unwrap_or_default()
        )));
    }

    let n_in = prompt_set.n_in();
    let mut class_pixels = vec![0u64; n_in];
    let mut conf_sum = 0.0f64;
    let mut conf_count = 0usize;
    for id in &ids {
        let Some(pl) = store.get(id) else { continue };
        write_pseudo_label(&pseudo_label_path(out_dir, id), pl, n_in)?;
        for &v in pl.label.data() {
            class_pixels[v as usize] += 1;
        }
        conf_sum += pl.confidence.iter().map(|&c| c as f64).sum::<f64>();
        conf_count += pl.confidence.len();
    }
    let summary = OfflineSummary {
        items: ids.len(),
        written: store.len(),
        skipped,
        class_names: prompt_set.class_names()[..n_in].to_vec(),
        class_pixels,
        mean_confidence: conf_sum / conf_count.max(1) as f64,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
