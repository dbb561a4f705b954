use crate::error::{Error, Result};
use crate::types::ProbMap;

use super::embedder::{normalize, Embedder, EmbeddingField};
use super::prompt::PromptSet;

/// Class-by-template text embeddings, stored `N x P x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub classes: usize,
    pub templates: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TextEmbeddings {
    #[inline]
    pub fn vector(&self, class: usize, template: usize) -> &[f32] {
        let i = (class * self.templates + template) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Embed every (class, template) pair, averaging the class's concept
/// embeddings and re-normalizing the mean.
pub fn encode_text(prompt_set: &PromptSet, embedder: &dyn Embedder) -> Result<TextEmbeddings> {
    let dim = embedder.dim();
    let (n, p) = (prompt_set.num_classes(), prompt_set.num_templates());
    let mut data = Vec::with_capacity(n * p * dim);
    for class in 0..n {
        for template in 0..p {
            let prompts = prompt_set.prompts(class, template);
            if let [phrase] = prompts.as_slice() {
                // single concept: the ensemble is the prompt embedding itself
                let v = embed_checked(embedder, prompt_set, class, template, phrase, dim)?;
                data.extend_from_slice(&v);
                continue;
            }
            let mut acc = vec![0.0f64; dim];
            for phrase in &prompts {
                let v = embed_checked(embedder, prompt_set, class, template, phrase, dim)?;
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += *x as f64;
                }
            }
            let k = prompts.len() as f64;
            let mut mean: Vec<f32> = acc.iter().map(|a| (a / k) as f32).collect();
            normalize(&mut mean);
            data.extend_from_slice(&mean);
        }
    }
    Ok(TextEmbeddings {
        classes: n,
        templates: p,
        dim,
        data,
    })
}

fn embed_checked(
    embedder: &dyn Embedder,
    prompt_set: &PromptSet,
    class: usize,
    template: usize,
    phrase: &str,
    dim: usize,
) -> Result<Vec<f32>> {
    let context = || {
        format!(
            "class {:?}, template {:?}",
            prompt_set.class_names()[class],
            prompt_set.templates()[template]
        )
    };
    let v = embedder.embed_text(phrase).map_err(|e| Error::Embedder {
        context: context(),
        message: e.to_string(),
    })?;
    if v.len() != dim {
        return Err(Error::Embedder {
            context: context(),
            message: format!("phrase {phrase:?} returned {} values, expected {dim}", v.len()),
        });
    }
    Ok(v)
}

/// Cosine similarities, stored `H x W x N x P`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub templates: usize,
    pub values: Vec<f32>,
}

impl CostVolume {
    #[inline]
    pub fn get(&self, y: usize, x: usize, class: usize, template: usize) -> f32 {
        self.values[((y * self.width + x) * self.classes + class) * self.templates + template]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostDiagnostics {
    /// Pixels whose image embedding had zero norm; their row is all zeros.
    pub zero_norm_pixels: usize,
}

pub fn cost_volume(
    image_emb: &EmbeddingField,
    text_emb: &TextEmbeddings,
) -> Result<(CostVolume, CostDiagnostics)> {
    if image_emb.dim != text_emb.dim {
        return Err(Error::contract(format!(
            "image embedding dimension {} differs from text dimension {}",
            image_emb.dim, text_emb.dim
        )));
    }
    let (n, p) = (text_emb.classes, text_emb.templates);
    let text_norms: Vec<f64> = (0..n * p)
        .map(|i| l2(&text_emb.data[i * text_emb.dim..(i + 1) * text_emb.dim]))
        .collect();
    let mut values = Vec::with_capacity(image_emb.height * image_emb.width * n * p);
    let mut diag = CostDiagnostics::default();
    for y in 0..image_emb.height {
        for x in 0..image_emb.width {
            let v = image_emb.vector(y, x);
            let vn = l2(v);
            if vn == 0.0 {
                diag.zero_norm_pixels += 1;
            }
            for class in 0..n {
                for template in 0..p {
                    let t = text_emb.vector(class, template);
                    let tn = text_norms[class * p + template];
                    let cos = if vn == 0.0 || tn == 0.0 {
                        0.0
                    } else {
                        let dot: f64 = v.iter().zip(t).map(|(a, b)| *a as f64 * *b as f64).sum();
                        (dot / (vn * tn)).clamp(-1.0, 1.0)
                    };
                    values.push(cos as f32);
                }
            }
        }
    }
    Ok((
        CostVolume {
            height: image_emb.height,
            width: image_emb.width,
            classes: n,
            templates: p,
            values,
        },
        diag,
    ))
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Parameter-free decoder: max over templates, tempered softmax over
/// classes, bilinear upsampling to `output_size`, per-pixel renormalization.
pub fn decode(cv: &CostVolume, output_size: (usize, usize), temperature: f64) -> Result<ProbMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param("decode temperature must be positive"));
    }
    if output_size.0 == 0 || output_size.1 == 0 || cv.height == 0 || cv.width == 0 {
        return Err(Error::contract("decode needs non-empty input and output"));
    }
    let n = cv.classes;
    let (h, w) = (cv.height, cv.width);
    let mut probs = vec![0.0f64; h * w * n];
    for y in 0..h {
        for x in 0..w {
            let row = &mut probs[(y * w + x) * n..(y * w + x + 1) * n];
            for (class, r) in row.iter_mut().enumerate() {
                let best = (0..cv.templates)
                    .map(|t| cv.get(y, x, class, t))
                    .fold(f32::NEG_INFINITY, f32::max);
                *r = best as f64 / temperature;
            }
            softmax_in_place(row);
        }
    }

    let (oh, ow) = output_size;
    if (oh, ow) == (h, w) {
        return ProbMap::from_vec(h, w, n, probs.into_iter().map(|v| v as f32).collect());
    }
    let mut out = vec![0.0f32; oh * ow * n];
    for oy in 0..oh {
        let (y0, y1, ty) = bilinear_coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, tx) = bilinear_coord(ox, ow, w);
            let dst = &mut out[(oy * ow + ox) * n..(oy * ow + ox + 1) * n];
            let mut total = 0.0;
            let mut tmp = vec![0.0f64; n];
            for (c, t) in tmp.iter_mut().enumerate() {
                let at = |yy: usize, xx: usize| probs[(yy * w + xx) * n + c];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * tx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * tx;
                *t = top + (bot - top) * ty;
                total += *t;
            }
            for (d, t) in dst.iter_mut().zip(&tmp) {
                *d = (t / total) as f32;
            }
        }
    }
    ProbMap::from_vec(oh, ow, n, out)
}

fn bilinear_coord(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let f = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = f.floor() as usize;
    (i0, (i0 + 1).min(in_len - 1), f - i0 as f64)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ovs_teacher::prompt::build_prompt_set;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, HashMap};

    struct TableEmbedder(HashMap<String, Vec<f32>>, usize);

    impl Embedder for TableEmbedder {
        fn dim(&self) -> usize {
            self.1
        }
        fn embed_text(&self, phrase: &str) -> Result<Vec<f32>> {
            self.0.get(phrase).cloned().ok_or_else(|| Error::Embedder {
                context: phrase.into(),
                message: "unknown".into(),
            })
        }
        fn embed_image(&self, _: &super::super::TeacherInput<'_>) -> Result<EmbeddingField> {
            unreachable!()
        }
    }

    fn field(h: usize, w: usize, d: usize, data: Vec<f32>) -> EmbeddingField {
        EmbeddingField::new(h, w, d, data).unwrap()
    }

    fn texts(n: usize, p: usize, d: usize, data: Vec<f32>) -> TextEmbeddings {
        TextEmbeddings {
            classes: n,
            templates: p,
            dim: d,
            data,
        }
    }

    #[test]
    fn orthonormal_basis() {
        let (cv, _) = cost_volume(&field(1, 1, 2, vec![1.0, 0.0]), &texts(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        assert_eq!(cv.values, vec![1.0, 0.0]);
        let (cv3, _) = cost_volume(&field(1, 1, 2, vec![3.0, 0.0]), &texts(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        assert_eq!(cv3, cv);
    }

    #[test]
    fn naive_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img: Vec<f32> = (0..2 * 2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let txt: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (cv, _) = cost_volume(&field(2, 2, 4, img.clone()), &texts(3, 1, 4, txt.clone())).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for n in 0..3 {
                    let a = &img[(y * 2 + x) * 4..(y * 2 + x + 1) * 4];
                    let b = &txt[n * 4..(n + 1) * 4];
                    let mut dot = 0.0f64;
                    let mut na = 0.0f64;
                    let mut nb = 0.0f64;
                    for k in 0..4 {
                        dot += a[k] as f64 * b[k] as f64;
                        na += (a[k] as f64).powi(2);
                        nb += (b[k] as f64).powi(2);
                    }
                    let want = dot / (na.sqrt() * nb.sqrt());
                    assert!((cv.get(y, x, n, 0) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_norm_pixels_are_zero_rows() {
        let (cv, diag) =
            cost_volume(&field(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]), &texts(1, 1, 2, vec![1.0, 0.0])).unwrap();
        assert_eq!(diag.zero_norm_pixels, 1);
        assert_eq!(cv.values[0], 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(cost_volume(&field(1, 1, 3, vec![1.0; 3]), &texts(1, 1, 2, vec![1.0; 2])).is_err());
    }

    #[test]
    fn decode_two_class_closed_form() {
        let cv = CostVolume {
            height: 1,
            width: 1,
            classes: 2,
            templates: 2,
            values: vec![1.0, 0.2, -1.0, -1.0],
        };
        let p = decode(&cv, (1, 1), 0.5).unwrap();
        let sigma4 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((p.row(0)[0] as f64 - sigma4).abs() < 1e-6);
        assert!((p.row(0)[0] - 0.982).abs() < 1e-3);
        assert!((p.row(0)[1] as f64 - (1.0 - sigma4)).abs() < 1e-6);
    }

    #[test]
    fn decode_uniform_and_upsampling() {
        let cv = CostVolume {
            height: 2,
            width: 2,
            classes: 4,
            templates: 1,
            values: vec![0.3; 16],
        };
        let p = decode(&cv, (5, 7), 0.1).unwrap();
        assert_eq!((p.height(), p.width()), (5, 7));
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
        assert!(decode(&cv, (2, 2), 0.0).is_err());
    }

    #[test]
    fn decode_same_size_is_pointwise() {
        let cv = CostVolume {
            height: 1,
            width: 2,
            classes: 2,
            templates: 1,
            values: vec![0.9, 0.1, 0.1, 0.9],
        };
        let p = decode(&cv, (1, 2), 0.1).unwrap();
        assert!(p.row(0)[0] > 0.99 && p.row(1)[1] > 0.99);
        let up = decode(&cv, (2, 4), 0.1).unwrap();
        for px in 0..8 {
            let s: f32 = up.row(px).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn concept_averaging() {
        let s = 0.5f32.sqrt();
        let mut table = HashMap::new();
        table.insert("a photo of a x.".to_string(), vec![1.0, 0.0]);
        table.insert("a photo of a y.".to_string(), vec![0.0, 1.0]);
        table.insert("a photo of a z.".to_string(), vec![s, s]);
        let e = TableEmbedder(table, 2);
        let mut concepts = BTreeMap::new();
        concepts.insert("c".to_string(), vec!["x".to_string(), "y".to_string()]);
        concepts.insert("d".to_string(), vec!["z".to_string(), "z".to_string()]);
        let tmpl = vec!["a photo of a {}.".to_string()];
        let ps = build_prompt_set(&["c".to_string(), "d".to_string()], &[], &tmpl, &concepts).unwrap();
        let te = encode_text(&ps, &e).unwrap();
        // orthogonal concepts: mean has norm 1/sqrt(2) before normalization
        let mean = [0.5f32, 0.5];
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((norm - s).abs() < 1e-7);
        for (a, b) in te.vector(0, 0).iter().zip([s, s]) {
            assert!((a - b).abs() < 1e-6);
        }
        // identical concepts average to themselves
        for (a, b) in te.vector(1, 0).iter().zip([s, s]) {
            assert!((a - b).abs() < 1e-6);
        }

        let missing = build_prompt_set(&["q".to_string()], &[], &tmpl, &BTreeMap::new()).unwrap();
        let err = encode_text(&missing, &e).unwrap_err().to_string();
        assert!(err.contains("\"q\""), "{err}");
    }
}
