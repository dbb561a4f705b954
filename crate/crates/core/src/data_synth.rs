//! Seeded "shapes world" benchmark.
//!
//! In-distribution scenes contain target shapes on a textured background.
//! OOD scenes additionally contain shapes from classes outside the target
//! label space, drawn with colours close to a target class, and apply a
//! global appearance shift. Ground truth marks every OOD object as
//! background. The `semantic` map keeps the full-vocabulary identity of each
//! pixel (target ids first, then OOD ids) for teachers that need it.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::types::{BBox, Image, LabelMap, BACKGROUND_ID, IGNORE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Stripe,
}

impl ShapeKind {
    /// Catalogue lookup by class name.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "disk" => ShapeKind::Disk,
            "square" => ShapeKind::Square,
            "triangle" => ShapeKind::Triangle,
            "cross" => ShapeKind::Cross,
            "diamond" => ShapeKind::Diamond,
            "ring" => ShapeKind::Ring,
            "stripe" => ShapeKind::Stripe,
            _ => return None,
        })
    }

    /// Base RGB colour. OOD shapes sit near one target colour each.
    pub fn base_color(self) -> [f32; 3] {
        match self {
            ShapeKind::Disk => [0.85, 0.15, 0.15],
            ShapeKind::Square => [0.15, 0.75, 0.20],
            ShapeKind::Triangle => [0.15, 0.25, 0.85],
            ShapeKind::Cross => [0.90, 0.85, 0.15],
            ShapeKind::Diamond => [0.90, 0.40, 0.12],
            ShapeKind::Ring => [0.20, 0.72, 0.60],
            ShapeKind::Stripe => [0.45, 0.20, 0.80],
        }
    }

    /// Coverage test in box-normalized coordinates `u, v` in `[-1, 1]`.
    fn covers(self, u: f32, v: f32) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => true,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => (0.42..=1.0).contains(&r2),
            ShapeKind::Stripe => v.abs() <= 0.4,
        }
    }
}

/// Whether pixel `(y, x)` belongs to a shape of `kind` rasterized in `bbox`.
pub fn shape_mask(kind: ShapeKind, bbox: &BBox, y: usize, x: usize) -> bool {
    if !bbox.contains(y, x) {
        return false;
    }
    let u = ((x - bbox.left) as f32 + 0.5) / bbox.width as f32 * 2.0 - 1.0;
    let v = ((y - bbox.top) as f32 + 0.5) / bbox.height as f32 * 2.0 - 1.0;
    kind.covers(u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceShift {
    None,
    Palette,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Target classes in label-id order; index 0 is background.
    pub in_class_names: Vec<String>,
    pub ood_class_names: Vec<String>,
    /// Inclusive range of target objects per scene.
    pub shapes_per_scene: (usize, usize),
    pub appearance_shift: AppearanceShift,
    /// Probability that an in-distribution scene carries one unshifted OOD
    /// object as background clutter.
    pub clutter_prob: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            in_class_names: ["background", "disk", "square", "triangle", "cross"]
                .map(String::from)
                .to_vec(),
            ood_class_names: ["diamond", "ring", "stripe"].map(String::from).to_vec(),
            shapes_per_scene: (1, 3),
            appearance_shift: AppearanceShift::Palette,
            clutter_prob: 0.5,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn n_in(&self) -> usize {
        self.in_class_names.len()
    }

    /// Target names followed by OOD names; index = semantic id.
    pub fn full_vocabulary(&self) -> Vec<String> {
        self.in_class_names
            .iter()
            .chain(&self.ood_class_names)
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in() < 2 {
            return Err(Error::config(
                "scene spec needs at least two target classes (background + one)",
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("scene must be at least 8x8 pixels"));
        }
        if self.shapes_per_scene.0 > self.shapes_per_scene.1 {
            return Err(Error::config("shapes_per_scene range is reversed"));
        }
        if !(0.0..=1.0).contains(&self.clutter_prob) {
            return Err(Error::config("clutter_prob must lie in [0, 1]"));
        }
        let mut seen = HashSet::new();
        for name in self.full_vocabulary() {
            if !seen.insert(name.clone()) {
                return Err(Error::config(format!(
                    "class name {name:?} appears more than once across target and OOD lists"
                )));
            }
        }
        for name in self.in_class_names.iter().skip(1).chain(&self.ood_class_names) {
            if ShapeKind::from_name(name).is_none() {
                return Err(Error::config(format!("no shape is registered for class {name:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_name: String,
    pub bbox: BBox,
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Ground truth over target ids; OOD objects are background.
    pub label: LabelMap,
    /// Full-vocabulary identity per pixel.
    pub semantic: LabelMap,
    pub objects: Vec<SceneObject>,
}

const SCENE_TAG: u64 = 0x5C3E;

pub fn generate_scene(spec: &SceneSpec, index: u64, ood: bool) -> Result<Scene> {
    spec.validate()?;
    if ood && spec.ood_class_names.is_empty() {
        return Err(Error::config("OOD scene requested but no OOD classes are configured"));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_for(spec.seed, &[SCENE_TAG, index, ood as u64]);

    let mut image = render_background(&mut rng, h, w);
    let mut label = LabelMap::filled(h, w, BACKGROUND_ID);
    let mut semantic = LabelMap::filled(h, w, BACKGROUND_ID);
    let mut objects = Vec::new();
    let n_in = spec.n_in();

    let n_objects = rng.random_range(spec.shapes_per_scene.0..=spec.shapes_per_scene.1);
    for _ in 0..n_objects {
        let id = rng.random_range(1..n_in);
        let name = &spec.in_class_names[id];
        let bbox = random_box(&mut rng, h, w);
        paint(&mut rng, &mut image, name, &bbox);
        stamp(&mut label, name, &bbox, id as u16);
        stamp(&mut semantic, name, &bbox, id as u16);
        objects.push(SceneObject {
            class_name: name.clone(),
            bbox,
            is_ood: false,
        });
    }

    // OOD objects go on top so every pixel of their mask stays visible.
    let n_ood = if ood {
        rng.random_range(1..=2)
    } else if !spec.ood_class_names.is_empty() && rng.random_bool(spec.clutter_prob) {
        1
    } else {
        0
    };
    for _ in 0..n_ood {
        let j = rng.random_range(0..spec.ood_class_names.len());
        let name = &spec.ood_class_names[j];
        let bbox = random_box(&mut rng, h, w);
        paint(&mut rng, &mut image, name, &bbox);
        stamp(&mut label, name, &bbox, BACKGROUND_ID);
        stamp(&mut semantic, name, &bbox, (n_in + j) as u16);
        objects.push(SceneObject {
            class_name: name.clone(),
            bbox,
            is_ood: true,
        });
    }

    if ood {
        apply_shift(&mut rng, &mut image, spec.appearance_shift);
    }
    image.quantize_u8();

    Ok(Scene {
        image,
        label,
        semantic,
        objects,
    })
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let base: f32 = rng.random_range(0.35..0.55);
    let gy: f32 = rng.random_range(-0.1..0.1);
    let gx: f32 = rng.random_range(-0.1..0.1);
    let tint: [f32; 3] = [
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
    ];
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let ramp = base + gy * (y as f32 / h as f32 - 0.5) + gx * (x as f32 / w as f32 - 0.5);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = (ramp + tint[c] + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let lo_h = 10.min(h);
    let lo_w = 10.min(w);
    let bh = rng.random_range(lo_h..=22.min(h).max(lo_h));
    let bw = rng.random_range(lo_w..=22.min(w).max(lo_w));
    let top = rng.random_range(0..=h - bh);
    let left = rng.random_range(0..=w - bw);
    BBox::new(top, left, bh, bw)
}

fn paint(rng: &mut ChaCha8Rng, image: &mut Image, name: &str, bbox: &BBox) {
    let kind = ShapeKind::from_name(name).expect("validated class name");
    let base = kind.base_color();
    let jitter: [f32; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    for y in bbox.top..bbox.top + bbox.height {
        for x in bbox.left..bbox.left + bbox.width {
            if shape_mask(kind, bbox, y, x) {
                let mut px = [0.0; 3];
                for c in 0..3 {
                    px[c] = (base[c] + jitter[c] + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
                image.set_pixel(y, x, px);
            }
        }
    }
}

fn stamp(map: &mut LabelMap, name: &str, bbox: &BBox, id: u16) {
    let kind = ShapeKind::from_name(name).expect("validated class name");
    for y in bbox.top..bbox.top + bbox.height {
        for x in bbox.left..bbox.left + bbox.width {
            if shape_mask(kind, bbox, y, x) {
                map.set(y, x, id);
            }
        }
    }
}

fn apply_shift(rng: &mut ChaCha8Rng, image: &mut Image, shift: AppearanceShift) {
    match shift {
        AppearanceShift::None => {}
        AppearanceShift::Palette => {
            let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.25));
            let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
            for px in image.data_mut().chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] * gain[c] + offset[c]).clamp(0.0, 1.0);
                }
            }
        }
        AppearanceShift::Texture => {
            let period: f32 = rng.random_range(3.0..7.0);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (h, w) = image.dims();
            for y in 0..h {
                for x in 0..w {
                    let m = 1.0 + 0.2 * ((x + y) as f32 / period * std::f32::consts::TAU + phase).sin();
                    let mut px = image.pixel(y, x);
                    for v in &mut px {
                        *v = (*v * m).clamp(0.0, 1.0);
                    }
                    image.set_pixel(y, x, px);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Labeled images drawn only from the high-quality tier.
    Original,
    /// Labeled images drawn uniformly over both tiers.
    Blended,
    /// High-quality tier exhausted first, then coarse.
    Priority,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Original, Protocol::Blended, Protocol::Priority];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Original => "original",
            Protocol::Blended => "blended",
            Protocol::Priority => "priority",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelQuality {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<(usize, LabelQuality)>,
    pub unlabeled_in: Vec<usize>,
    pub unlabeled_out: Vec<String>,
    pub protocol: Protocol,
}

impl DatasetSplit {
    pub fn labeled_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.labeled.iter().map(|(id, _)| *id)
    }
}

/// Seeded fine/coarse tier assignment: `(fine, coarse)` scene ids.
pub fn quality_tiers(n_scenes: usize, quality_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut rng_for(seed, &[0x71E2]));
    let n_fine = (quality_fraction * n_scenes as f64).round() as usize;
    let coarse = order.split_off(n_fine.min(n_scenes));
    (order, coarse)
}

pub fn make_splits(
    n_scenes: usize,
    n_labeled: usize,
    protocol: Protocol,
    quality_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&quality_fraction) {
        return Err(Error::config("quality_fraction must lie in [0, 1]"));
    }
    if n_labeled == 0 || n_labeled >= n_scenes {
        return Err(Error::InfeasibleSplit(format!(
            "need 0 < n_labeled < n_scenes, got {n_labeled} labeled of {n_scenes}"
        )));
    }
    let (fine, coarse) = quality_tiers(n_scenes, quality_fraction, seed);
    let mut rng = rng_for(seed, &[0x5E1E, protocol as u64]);

    let mut labeled: Vec<(usize, LabelQuality)> = match protocol {
        Protocol::Original => {
            if n_labeled > fine.len() {
                return Err(Error::InfeasibleSplit(format!(
                    "original protocol needs {n_labeled} labeled scenes but the fine tier has {}",
                    fine.len()
                )));
            }
            fine.choose_multiple(&mut rng, n_labeled)
                .map(|&id| (id, LabelQuality::Fine))
                .collect()
        }
        Protocol::Blended => {
            let tagged: Vec<(usize, LabelQuality)> = fine
                .iter()
                .map(|&id| (id, LabelQuality::Fine))
                .chain(coarse.iter().map(|&id| (id, LabelQuality::Coarse)))
                .collect();
            tagged.choose_multiple(&mut rng, n_labeled).copied().collect()
        }
        Protocol::Priority => {
            let from_fine = n_labeled.min(fine.len());
            let mut picked: Vec<(usize, LabelQuality)> = fine
                .choose_multiple(&mut rng, from_fine)
                .map(|&id| (id, LabelQuality::Fine))
                .collect();
            picked.extend(
                coarse
                    .choose_multiple(&mut rng, n_labeled - from_fine)
                    .map(|&id| (id, LabelQuality::Coarse)),
            );
            picked
        }
    };
    labeled.sort_unstable();

    let taken: HashSet<usize> = labeled.iter().map(|(id, _)| *id).collect();
    let unlabeled_in = (0..n_scenes).filter(|id| !taken.contains(id)).collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled_in,
        unlabeled_out: Vec::new(),
        protocol,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub path: PathBuf,
    pub width: u64,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub items: Vec<CorpusItem>,
    pub max_pixels: Option<u64>,
    /// Items removed by the resolution filter.
    pub dropped: usize,
    /// Directory that relative item paths are resolved against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, item: &CorpusItem) -> PathBuf {
        if item.path.is_absolute() {
            item.path.clone()
        } else {
            self.base_dir.join(&item.path)
        }
    }
}

/// Parse a tab-separated `id, path, width, height` manifest, dropping items
/// larger than `max_pixels`.
pub fn load_manifest(path: &Path, max_pixels: Option<u64>) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path)?;
    let items = parse_manifest(&text, path)?;
    let before = items.len();
    let items: Vec<CorpusItem> = match max_pixels {
        Some(limit) => items
            .into_iter()
            .filter(|it| it.width.saturating_mul(it.height) <= limit)
            .collect(),
        None => items,
    };
    Ok(CorpusManifest {
        dropped: before - items.len(),
        items,
        max_pixels,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let dim = |s: &str, what: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| err(format!("bad {what} {s:?}: {e}")))
        };
        if fields[0].is_empty() {
            return Err(err("empty item id".into()));
        }
        items.push(CorpusItem {
            id: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            width: dim(fields[2], "width")?,
            height: dim(fields[3], "height")?,
        });
    }
    Ok(items)
}

pub fn write_manifest(path: &Path, items: &[CorpusItem]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            it.id,
            it.path.display(),
            it.width,
            it.height
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Coarse-annotation emulation: each class region is dilated into background
/// or eroded by one pixel, then small connected regions are dropped to
/// background at random. Ignore pixels are left untouched.
pub fn coarsen_label(label: &LabelMap, seed: u64) -> LabelMap {
    const DROP_AREA: usize = 16;
    let (h, w) = label.dims();
    let mut rng = rng_for(seed, &[0xC0A5]);
    let mut out = label.clone();

    for id in label.ids().into_iter().filter(|&id| id != BACKGROUND_ID) {
        let op: u8 = rng.random_range(0..3);
        let snapshot = out.clone();
        for y in 0..h {
            for x in 0..w {
                let here = snapshot.get(y, x);
                match op {
                    // dilate into background neighbours
                    0 if here == BACKGROUND_ID && any_neighbor(&snapshot, y, x, |v| v == id) => {
                        out.set(y, x, id)
                    }
                    // erode boundary
                    1 if here == id && any_neighbor(&snapshot, y, x, |v| v != id && v != IGNORE_ID) => {
                        out.set(y, x, BACKGROUND_ID)
                    }
                    _ => {}
                }
            }
        }
    }

    for component in components(&out) {
        if component.len() < DROP_AREA && rng.random_bool(0.5) {
            for p in component {
                out.data_mut()[p] = BACKGROUND_ID;
            }
        }
    }
    out
}

fn any_neighbor(map: &LabelMap, y: usize, x: usize, pred: impl Fn(u16) -> bool) -> bool {
    let (h, w) = map.dims();
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            if pred(map.get(ny as usize, nx as usize)) {
                return true;
            }
        }
    }
    false
}

/// 4-connected components of non-background, non-ignore pixels.
fn components(map: &LabelMap) -> Vec<Vec<usize>> {
    let (h, w) = map.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let id = map.data()[start];
        if seen[start] || id == BACKGROUND_ID || id == IGNORE_ID {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && map.data()[q] == id {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}
