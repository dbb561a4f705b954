use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::perturb::Target;
use crate::trainer::model::{Real, StudentModel};
use crate::types::{Image, LabelMap, ProbMap, BACKGROUND_ID};

use super::embedder::split_header;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoSource {
    /// Open-vocabulary teacher.
    Ovs,
    /// The student's own prediction.
    SelfTeacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: LabelMap,
    pub confidence: Vec<f32>,
    pub source: PseudoSource,
}

impl PseudoLabel {
    pub fn into_target(self) -> Target {
        Target {
            label: self.label,
            confidence: self.confidence,
        }
    }

    pub fn to_target(&self) -> Target {
        Target {
            label: self.label.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Map every id outside the target space `[0, n_in)` to background.
pub fn refine_ids(ids: &mut [u16], n_in: usize) {
    for id in ids {
        if *id as usize >= n_in {
            *id = BACKGROUND_ID;
        }
    }
}

/// Argmax over all `N` classes, refined to the first `n_in`. Confidence is
/// the max probability over all `N` classes, taken before refinement.
pub fn make_pseudo_label(prob: &ProbMap, n_in: usize) -> PseudoLabel {
    let (mut ids, confidence) = prob.argmax_max();
    refine_ids(&mut ids, n_in);
    PseudoLabel {
        label: LabelMap::from_vec(prob.height(), prob.width(), ids).expect("sizes agree"),
        confidence,
        source: PseudoSource::Ovs,
    }
}

/// Pseudo-label from the student's own `N_in`-way prediction.
pub fn self_teacher_pseudo_label<T: Real, M: StudentModel<T>>(model: &M, image: &Image) -> PseudoLabel {
    let prob = model.forward(image).softmax();
    let mut pl = make_pseudo_label(&prob, model.num_classes());
    pl.source = PseudoSource::SelfTeacher;
    pl
}

const PL_MAGIC: &str = "SOVSPL";

/// Serialize as `SOVSPL v1 H W N_IN\n`, then `H*W` little-endian `u16`
/// labels and `H*W` little-endian `f32` confidences, row-major.
pub fn encode_pseudo_label(pl: &PseudoLabel, n_in: usize) -> Vec<u8> {
    let (h, w) = pl.label.dims();
    let mut buf = format!("{PL_MAGIC} v1 {h} {w} {n_in}\n").into_bytes();
    buf.reserve(h * w * 6);
    for id in pl.label.data() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for c in &pl.confidence {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    buf
}

pub fn decode_pseudo_label(bytes: &[u8], path: &Path) -> Result<(PseudoLabel, usize)> {
    let (dims, body) = split_header(bytes, PL_MAGIC, 3, path)?;
    let (h, w, n_in) = (dims[0], dims[1], dims[2]);
    let hw = h * w;
    if body.len() != hw * 6 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", hw * 6, body.len())));
    }
    let (lab, conf) = body.split_at(hw * 2);
    let ids: Vec<u16> = lab.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= n_in) {
        return Err(Error::format(path, format!("label id {bad} not below N_IN={n_in}")));
    }
    let confidence: Vec<f32> = conf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if confidence.iter().any(|c| !c.is_finite()) {
        return Err(Error::format(path, "non-finite confidence"));
    }
    Ok((
        PseudoLabel {
            label: LabelMap::from_vec(h, w, ids)?,
            confidence,
            source: PseudoSource::Ovs,
        },
        n_in,
    ))
}

pub fn pseudo_label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.sovspl"))
}

pub fn write_pseudo_label(path: &Path, pl: &PseudoLabel, n_in: usize) -> Result<()> {
    fs::write(path, encode_pseudo_label(pl, n_in))?;
    Ok(())
}

pub fn read_pseudo_label(path: &Path) -> Result<(PseudoLabel, usize)> {
    let bytes = fs::read(path)?;
    decode_pseudo_label(&bytes, path)
}

/// Offline pseudo-labels keyed by item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelStore {
    labels: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, pl: PseudoLabel) {
        self.labels.insert(id.into(), pl);
    }

    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.labels.get(id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Load the files for `ids` from `dir`; a missing file is an error.
    pub fn load_dir<'a>(dir: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut store = PseudoLabelStore::new();
        for id in ids {
            let path = pseudo_label_path(dir, id);
            if !path.exists() {
                return Err(Error::MissingPseudoLabel(format!("{id} (expected {})", path.display())));
            }
            store.insert(id, read_pseudo_label(&path)?.0);
        }
        Ok(store)
    }

    /// Fail unless every id has a label.
    pub fn ensure_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in ids {
            if !self.labels.contains_key(id) {
                return Err(Error::MissingPseudoLabel(id.to_string()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::{ConvNet, Logits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob(h: usize, w: usize, n: usize, seed: u64) -> ProbMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..h * w {
            let row: Vec<f32> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f32 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        ProbMap::from_vec(h, w, n, data).unwrap()
    }

    #[test]
    fn out_of_target_argmax_becomes_background() {
        let mut row = vec![0.001f32; 171];
        row[57] = 1.0 - 0.001 * 170.0;
        let p = ProbMap::from_vec(1, 1, 171, row).unwrap();
        let pl = make_pseudo_label(&p, 21);
        assert_eq!(pl.label.get(0, 0), 0);
        assert!((pl.confidence[0] - 0.83).abs() < 1e-5);
    }

    #[test]
    fn in_target_passes_through() {
        let mut row = vec![0.05f32; 5];
        row[3] = 0.8;
        let p = ProbMap::from_vec(1, 1, 5, row).unwrap();
        let pl = make_pseudo_label(&p, 5);
        assert_eq!(pl.label.get(0, 0), 3);
        assert_eq!(pl.confidence[0], 0.8);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let pl = make_pseudo_label(&prob(3, 4, 8, 2), 5);
        let bytes = encode_pseudo_label(&pl, 5);
        assert!(bytes.starts_with(b"SOVSPL v1 3 4 5\n"));
        assert_eq!(bytes.len(), 16 + 12 * 2 + 12 * 4);
        let (back, n_in) = decode_pseudo_label(&bytes, Path::new("x")).unwrap();
        assert_eq!(n_in, 5);
        assert_eq!(back, pl);
        assert_eq!(encode_pseudo_label(&back, 5), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let pl = make_pseudo_label(&prob(2, 2, 4, 1), 4);
        let mut bytes = encode_pseudo_label(&pl, 4);
        bytes.pop();
        assert!(decode_pseudo_label(&bytes, Path::new("x")).is_err());
        let mut bytes = encode_pseudo_label(&pl, 4);
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        bytes[header_len] = 9;
        assert!(decode_pseudo_label(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn store_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let pl = make_pseudo_label(&prob(2, 2, 4, 1), 4);
        write_pseudo_label(&pseudo_label_path(dir.path(), "a"), &pl, 4).unwrap();
        let store = PseudoLabelStore::load_dir(dir.path(), ["a"]).unwrap();
        assert_eq!(store.get("a"), Some(&pl));
        assert!(matches!(
            PseudoLabelStore::load_dir(dir.path(), ["a", "b"]),
            Err(Error::MissingPseudoLabel(_))
        ));
        assert!(store.ensure_covers(["a"]).is_ok());
        assert!(store.ensure_covers(["b"]).is_err());
    }

    #[test]
    fn self_teacher_uniform_logits() {
        struct Flat;
        impl StudentModel<f64> for Flat {
            type Cache = ();
            fn num_classes(&self) -> usize {
                5
            }
            fn forward_cached(&self, image: &Image) -> (Logits<f64>, ()) {
                let (h, w) = image.dims();
                (
                    Logits {
                        classes: 5,
                        height: h,
                        width: w,
                        data: vec![0.7; 5 * h * w],
                    },
                    (),
                )
            }
            fn backward(&self, _: &(), _: &[f64], _: &mut [f64]) {}
            fn params(&self) -> &[f64] {
                &[]
            }
            fn params_mut(&mut self) -> &mut [f64] {
                &mut []
            }
            fn reset(&mut self, _: u64) {}
        }
        let img = Image::zeros(4, 4);
        let pl = self_teacher_pseudo_label(&Flat, &img);
        assert!(pl.confidence.iter().all(|&c| (c - 0.2).abs() < 1e-7));
        assert_eq!(pl.source, PseudoSource::SelfTeacher);
    }

    #[test]
    fn self_teacher_equals_unrefined_argmax() {
        let net = ConvNet::<f32>::new(4, 5, 2);
        let img = crate::data_synth::generate_scene(&Default::default(), 0, false).unwrap().image;
        let pl = self_teacher_pseudo_label(&net, &img);
        let direct = make_pseudo_label(&net.forward(&img).softmax(), 5);
        assert_eq!(pl.label, direct.label);
        assert_eq!(pl.confidence, direct.confidence);
        assert_eq!(pl, self_teacher_pseudo_label(&net, &img));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn refinement_total_and_idempotent(ids in proptest::collection::vec(0u16..12, 1..64), n_in in 1usize..12) {
                let mut once = ids.clone();
                refine_ids(&mut once, n_in);
                prop_assert!(once.iter().all(|&v| (v as usize) < n_in));
                let mut twice = once.clone();
                refine_ids(&mut twice, n_in);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
