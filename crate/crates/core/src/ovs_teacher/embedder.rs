//! Image/text encoders behind one interface.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_synth::SceneSpec;
use crate::error::{Error, Result};
use crate::seeding::{rng_for, tag};
use crate::types::{Image, LabelMap};

/// Dense `H x W x D` field of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingField {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::contract(format!(
                "embedding buffer has {} values, expected {height}x{width}x{dim}",
                data.len()
            )));
        }
        Ok(EmbeddingField {
            height,
            width,
            dim,
            data,
        })
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// What an image encoder sees for one item.
#[derive(Debug, Clone, Copy)]
pub struct TeacherInput<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    /// Full-vocabulary identity map, available for synthetic scenes.
    pub semantic: Option<&'a LabelMap>,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of one text phrase.
    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>>;

    fn embed_image(&self, input: &TeacherInput<'_>) -> Result<EmbeddingField>;
}

pub(crate) fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

fn random_unit(seed: u64, parts: &[u64], dim: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, parts);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Controllable-accuracy teacher for synthetic scenes.
///
/// Every vocabulary class owns a fixed random unit vector. OOD classes are
/// pulled toward one target class (`confusion` weight), so a prompt set that
/// lacks them maps OOD pixels onto that target class. Pixel embeddings are
/// the class vector of the pixel's semantic id plus isotropic Gaussian noise.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    dim: usize,
    noise: f64,
    seed: u64,
    class_vectors: Vec<Vec<f32>>,
    /// `(phrase, class)` pairs, longest phrase first.
    lexicon: Vec<(String, usize)>,
}

impl OracleEmbedder {
    pub const DEFAULT_CONFUSION: f64 = 0.6;

    pub fn new(spec: &SceneSpec, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        Self::with_confusion(spec, dim, noise, seed, Self::DEFAULT_CONFUSION)
    }

    pub fn with_confusion(
        spec: &SceneSpec,
        dim: usize,
        noise: f64,
        seed: u64,
        confusion: f64,
    ) -> Result<Self> {
        spec.validate()?;
        if dim < 2 {
            return Err(Error::config("oracle embedding dimension must be at least 2"));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::config("oracle noise must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&confusion) {
            return Err(Error::config("oracle confusion must lie in [0, 1)"));
        }
        let n_in = spec.n_in();
        let vocab = spec.full_vocabulary();
        let mut class_vectors = Vec::with_capacity(vocab.len());
        for c in 0..vocab.len() {
            let own = random_unit(seed, &[0xC1A5, c as u64], dim);
            let v: Vec<f64> = if c < n_in {
                own
            } else {
                let anchor = 1 + (c - n_in) % (n_in - 1);
                let target = random_unit(seed, &[0xC1A5, anchor as u64], dim);
                let rest = (1.0 - confusion * confusion).sqrt();
                target.iter().zip(&own).map(|(t, o)| confusion * t + rest * o).collect()
            };
            let mut v: Vec<f32> = v.iter().map(|x| *x as f32).collect();
            normalize(&mut v);
            class_vectors.push(v);
        }
        let mut lexicon: Vec<(String, usize)> =
            vocab.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        lexicon.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(OracleEmbedder {
            dim,
            noise,
            seed,
            class_vectors,
            lexicon,
        })
    }

    /// Register a synonym phrase for a vocabulary class.
    pub fn add_alias(&mut self, phrase: &str, class_name: &str) -> Result<()> {
        let class = self
            .lexicon
            .iter()
            .find(|(n, _)| n == class_name)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::config(format!("alias target {class_name:?} is not a known class")))?;
        self.lexicon.push((phrase.to_string(), class));
        self.lexicon
            .sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(())
    }

    pub fn class_vector(&self, class: usize) -> &[f32] {
        &self.class_vectors[class]
    }

    fn lookup(&self, phrase: &str) -> Option<usize> {
        self.lexicon
            .iter()
            .find(|(name, _)| contains_word(phrase, name))
            .map(|(_, c)| *c)
    }
}

/// Substring match on word boundaries.
fn contains_word(haystack: &str, needle: &str) -> bool {
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

impl Embedder for OracleEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>> {
        match self.lookup(phrase) {
            Some(c) => Ok(self.class_vectors[c].clone()),
            // Unknown phrases get their own direction, as an open vocabulary would.
            None => Ok(random_unit(self.seed, &[0x7E47, tag(phrase)], self.dim)
                .into_iter()
                .map(|x| x as f32)
                .collect()),
        }
    }

    fn embed_image(&self, input: &TeacherInput<'_>) -> Result<EmbeddingField> {
        let semantic = input.semantic.ok_or_else(|| Error::Embedder {
            context: format!("image {}", input.id),
            message: "oracle embedder needs a semantic map".into(),
        })?;
        let (h, w) = semantic.dims();
        let mut rng = rng_for(self.seed, &[0x1A6E, tag(input.id)]);
        let mut data = Vec::with_capacity(h * w * self.dim);
        for &id in semantic.data() {
            let base = self.class_vectors.get(id as usize).ok_or_else(|| Error::Embedder {
                context: format!("image {}", input.id),
                message: format!("semantic id {id} outside the oracle vocabulary"),
            })?;
            let start = data.len();
            for &b in base {
                let n: f64 = if self.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                data.push((b as f64 + self.noise * n) as f32);
            }
            normalize(&mut data[start..]);
        }
        EmbeddingField::new(h, w, self.dim, data)
    }
}

const EMB_MAGIC: &str = "SOVSEMB";

pub fn write_embedding_file(path: &Path, field: &EmbeddingField) -> Result<()> {
    let mut buf = format!("{EMB_MAGIC} v1 {} {} {}\n", field.height, field.width, field.dim).into_bytes();
    buf.reserve(field.data.len() * 4);
    for v in &field.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingField> {
    let bytes = fs::read(path)?;
    let (dims, body) = split_header(&bytes, EMB_MAGIC, 3, path)?;
    let (h, w, d) = (dims[0], dims[1], dims[2]);
    if body.len() != h * w * d * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", h * w * d * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingField::new(h, w, d, data)
}

/// Split `MAGIC v1 a b c\n` from the payload.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    magic: &str,
    fields: usize,
    path: &Path,
) -> Result<(Vec<usize>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header is not ASCII"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(magic) || parts.next() != Some("v1") {
        return Err(Error::format(path, format!("expected `{magic} v1` header, found {header:?}")));
    }
    let dims = parts
        .map(|p| p.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != fields {
        return Err(Error::format(path, format!("header needs {fields} numeric fields")));
    }
    Ok((dims, &bytes[nl + 1..]))
}

/// Embeddings produced outside this crate and exchanged through files.
///
/// Image embeddings live at `<dir>/<id>.sovsemb`. Text embeddings live in
/// `<dir>/text.tsv`, one `phrase<TAB>v1 v2 ... vD` line per phrase.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    dir: PathBuf,
    dim: usize,
    text: HashMap<String, Vec<f32>>,
}

impl FileEmbedder {
    pub fn open(dir: &Path) -> Result<Self> {
        let text_path = dir.join("text.tsv");
        let raw = fs::read_to_string(&text_path)?;
        let mut text = HashMap::new();
        let mut dim = None;
        for (lineno, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: text_path.clone(),
                line: lineno + 1,
                message,
            };
            let (phrase, values) = line
                .split_once('\t')
                .ok_or_else(|| err("expected phrase<TAB>values".into()))?;
            let mut v = values
                .split_whitespace()
                .map(|s| s.parse::<f32>().map_err(|e| err(format!("bad value {s:?}: {e}"))))
                .collect::<Result<Vec<f32>>>()?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(err("inconsistent embedding dimension".into()));
            }
            normalize(&mut v);
            text.insert(phrase.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::format(&text_path, "no text embeddings"))?;
        Ok(FileEmbedder {
            dir: dir.to_path_buf(),
            dim,
            text,
        })
    }
}

impl Embedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f32>> {
        self.text.get(phrase).cloned().ok_or_else(|| Error::Embedder {
            context: format!("phrase {phrase:?}"),
            message: "not present in text.tsv".into(),
        })
    }

    fn embed_image(&self, input: &TeacherInput<'_>) -> Result<EmbeddingField> {
        let field = read_embedding_file(&self.dir.join(format!("{}.sovsemb", input.id)))?;
        if field.dim != self.dim {
            return Err(Error::Embedder {
                context: format!("image {}", input.id),
                message: format!("dimension {} differs from text dimension {}", field.dim, self.dim),
            });
        }
        Ok(field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::generate_scene;

    #[test]
    fn oracle_text_is_unit_and_deterministic() {
        let spec = SceneSpec::default();
        let e = OracleEmbedder::new(&spec, 16, 0.0, 3).unwrap();
        for phrase in ["a photo of a disk.", "a photo of a giraffe.", "ring"] {
            let v = e.embed_text(phrase).unwrap();
            let n: f32 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
            assert_eq!(v, e.embed_text(phrase).unwrap());
        }
        assert_eq!(e.embed_text("a photo of a disk.").unwrap(), e.class_vector(1));
    }

    #[test]
    fn word_boundaries() {
        assert!(contains_word("a photo of a ring.", "ring"));
        assert!(!contains_word("a photo of a string.", "ring"));
    }

    #[test]
    fn ood_vectors_lean_toward_a_target() {
        let spec = SceneSpec::default();
        let e = OracleEmbedder::new(&spec, 32, 0.0, 1).unwrap();
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        // diamond (id 5) anchors on disk (id 1)
        let d = dot(e.class_vector(5), e.class_vector(1));
        assert!(d > 0.4, "{d}");
    }

    #[test]
    fn oracle_needs_semantic_map() {
        let spec = SceneSpec::default();
        let e = OracleEmbedder::new(&spec, 8, 0.1, 1).unwrap();
        let s = generate_scene(&spec, 0, true).unwrap();
        let input = TeacherInput {
            id: "x",
            image: &s.image,
            semantic: None,
        };
        assert!(matches!(e.embed_image(&input), Err(Error::Embedder { .. })));
        let input = TeacherInput {
            semantic: Some(&s.semantic),
            ..input
        };
        let f = e.embed_image(&input).unwrap();
        assert_eq!((f.height, f.width, f.dim), (64, 64, 8));
        assert_eq!(f, e.embed_image(&input).unwrap());
    }

    #[test]
    fn embedding_file_round_trip_and_file_embedder() {
        let dir = tempfile::tempdir().unwrap();
        let field = EmbeddingField::new(2, 3, 2, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        write_embedding_file(&dir.path().join("a.sovsemb"), &field).unwrap();
        let bytes = fs::read(dir.path().join("a.sovsemb")).unwrap();
        assert!(bytes.starts_with(b"SOVSEMB v1 2 3 2\n"));
        assert_eq!(bytes.len(), 17 + 48);
        assert_eq!(read_embedding_file(&dir.path().join("a.sovsemb")).unwrap(), field);

        fs::write(dir.path().join("text.tsv"), "a photo of a disk.\t3 4\n").unwrap();
        let fe = FileEmbedder::open(dir.path()).unwrap();
        assert_eq!(fe.embed_text("a photo of a disk.").unwrap(), vec![0.6, 0.8]);
        assert!(fe.embed_text("missing").is_err());
        let img = Image::zeros(2, 3);
        let input = TeacherInput { id: "a", image: &img, semantic: None };
        assert_eq!(fe.embed_image(&input).unwrap(), field);
    }

    #[test]
    fn corrupt_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.sovsemb");
        fs::write(&p, b"SOVSEMB v1 2 2 2\n\x00\x00").unwrap();
        assert!(matches!(read_embedding_file(&p), Err(Error::Format { .. })));
        fs::write(&p, b"NOPE v1 1 1 1\n\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_embedding_file(&p), Err(Error::Format { .. })));
    }
}
