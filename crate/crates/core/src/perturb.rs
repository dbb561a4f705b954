//! Weak (geometric) and strong (photometric + CutMix) views.
//!
//! The strong view is always built on top of the weak view, so a target
//! derived from the weak view stays pixel-aligned with the strong view
//! everywhere outside the CutMix box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Image, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub flip: bool,
    pub crop: BBox,
    /// `(height, width)` of the resampled output.
    pub output_size: (usize, usize),
}

impl WeakParams {
    pub fn identity(height: usize, width: usize) -> Self {
        WeakParams {
            flip: false,
            crop: BBox::full(height, width),
            output_size: (height, width),
        }
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if !self.crop.fits(height, width) {
            return Err(Error::param(format!(
                "crop {:?} does not fit a {height}x{width} image",
                self.crop
            )));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::param("weak output size must be non-zero"));
        }
        Ok(())
    }

    /// Source pixel (nearest) feeding output pixel `(y, x)`.
    fn nearest_source(&self, y: usize, x: usize) -> (usize, usize) {
        let (oh, ow) = self.output_size;
        let x = if self.flip { ow - 1 - x } else { x };
        let sy = ((y as f64 + 0.5) * self.crop.height as f64 / oh as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * self.crop.width as f64 / ow as f64).floor() as usize;
        (
            self.crop.top + sy.min(self.crop.height - 1),
            self.crop.left + sx.min(self.crop.width - 1),
        )
    }
}

/// Photometric jitter ranges and augmentation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongRanges {
    pub scale: (f32, f32),
    pub shift: (f32, f32),
    pub blur_sigma: (f32, f32),
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub cutmix_prob: f64,
    /// Fraction of the image area covered by a CutMix box.
    pub cutmix_area: (f64, f64),
}

impl Default for StrongRanges {
    fn default() -> Self {
        StrongRanges {
            scale: (0.5, 1.5),
            shift: (-0.2, 0.2),
            blur_sigma: (0.0, 1.5),
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            cutmix_prob: 0.5,
            cutmix_area: (0.02, 0.4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongParams {
    pub jitter_scale: [f32; 3],
    pub jitter_shift: [f32; 3],
    pub grayscale: bool,
    pub blur_sigma: f32,
    pub cutmix_box: Option<BBox>,
    /// Index of the partner image inside the current batch.
    pub cutmix_partner: Option<usize>,
}

impl StrongParams {
    pub fn identity() -> Self {
        StrongParams {
            jitter_scale: [1.0; 3],
            jitter_shift: [0.0; 3],
            grayscale: false,
            blur_sigma: 0.0,
            cutmix_box: None,
            cutmix_partner: None,
        }
    }
}

/// Label map with a per-pixel confidence; the target form of a pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub label: LabelMap,
    pub confidence: Vec<f32>,
}

impl Target {
    pub fn new(label: LabelMap, confidence: Vec<f32>) -> Result<Self> {
        if confidence.len() != label.len() {
            return Err(Error::contract("confidence and label sizes differ"));
        }
        Ok(Target { label, confidence })
    }

    /// Fully confident target from a ground-truth map.
    pub fn certain(label: LabelMap) -> Self {
        let confidence = vec![1.0; label.len()];
        Target { label, confidence }
    }
}

pub fn sample_weak<R: Rng>(
    rng: &mut R,
    image_size: (usize, usize),
    output_size: usize,
    min_scale: f64,
) -> WeakParams {
    let side_max = image_size.0.min(image_size.1);
    let side_min = ((min_scale * side_max as f64).ceil() as usize).clamp(1, side_max);
    let side = rng.random_range(side_min..=side_max);
    let top = rng.random_range(0..=image_size.0 - side);
    let left = rng.random_range(0..=image_size.1 - side);
    WeakParams {
        flip: rng.random_bool(0.5),
        crop: BBox::new(top, left, side, side),
        output_size: (output_size, output_size),
    }
}

/// Draw strong parameters; a CutMix box is only drawn when `partner` is given.
pub fn sample_strong<R: Rng>(
    rng: &mut R,
    ranges: &StrongRanges,
    image_size: (usize, usize),
    partner: Option<usize>,
) -> StrongParams {
    let mut p = StrongParams::identity();
    if rng.random_bool(ranges.jitter_prob) {
        for c in 0..3 {
            p.jitter_scale[c] = rng.random_range(ranges.scale.0..=ranges.scale.1);
            p.jitter_shift[c] = rng.random_range(ranges.shift.0..=ranges.shift.1);
        }
    }
    p.grayscale = rng.random_bool(ranges.grayscale_prob);
    if rng.random_bool(ranges.blur_prob) {
        p.blur_sigma = rng.random_range(ranges.blur_sigma.0..=ranges.blur_sigma.1);
    }
    if let Some(partner) = partner {
        if rng.random_bool(ranges.cutmix_prob) {
            let (h, w) = image_size;
            let area = rng.random_range(ranges.cutmix_area.0..=ranges.cutmix_area.1);
            let ratio: f64 = rng.random_range(0.5..2.0);
            let bh = ((area * (h * w) as f64 * ratio).sqrt().round() as usize).clamp(1, h);
            let bw = ((area * (h * w) as f64 / ratio).sqrt().round() as usize).clamp(1, w);
            let top = rng.random_range(0..=h - bh);
            let left = rng.random_range(0..=w - bw);
            p.cutmix_box = Some(BBox::new(top, left, bh, bw));
            p.cutmix_partner = Some(partner);
        }
    }
    p
}

/// Apply crop, resize and flip. Images are resampled bilinearly, labels by
/// nearest neighbour with identical geometry.
pub fn weak_apply(
    image: &Image,
    label: Option<&LabelMap>,
    params: &WeakParams,
) -> Result<(Image, Option<LabelMap>)> {
    let (h, w) = image.dims();
    params.check(h, w)?;
    if let Some(l) = label {
        if l.dims() != (h, w) {
            return Err(Error::contract("label and image sizes differ"));
        }
    }
    let out_img = resample_bilinear(image, params);
    let out_label = label.map(|l| {
        let (oh, ow) = params.output_size;
        let mut out = LabelMap::filled(oh, ow, 0);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = params.nearest_source(y, x);
                out.set(y, x, l.get(sy, sx));
            }
        }
        out
    });
    Ok((out_img, out_label))
}

/// Weak geometry applied to a label + confidence target.
pub fn weak_apply_target(target: &Target, params: &WeakParams) -> Result<Target> {
    let (h, w) = target.label.dims();
    params.check(h, w)?;
    let (oh, ow) = params.output_size;
    let mut label = LabelMap::filled(oh, ow, 0);
    let mut confidence = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = params.nearest_source(y, x);
            label.set(y, x, target.label.get(sy, sx));
            confidence[y * ow + x] = target.confidence[sy * w + sx];
        }
    }
    Ok(Target { label, confidence })
}

fn resample_bilinear(image: &Image, params: &WeakParams) -> Image {
    let (oh, ow) = params.output_size;
    let crop = params.crop;
    let mut out = Image::zeros(oh, ow);
    let sy_scale = crop.height as f64 / oh as f64;
    let sx_scale = crop.width as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (crop.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(crop.height - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let xs = if params.flip { ow - 1 - x } else { x };
            let fx = ((xs as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (crop.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(crop.width - 1);
            let tx = (fx - x0 as f64) as f32;
            let p00 = image.pixel(crop.top + y0, crop.left + x0);
            let p01 = image.pixel(crop.top + y0, crop.left + x1);
            let p10 = image.pixel(crop.top + y1, crop.left + x0);
            let p11 = image.pixel(crop.top + y1, crop.left + x1);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * tx;
                let bot = p10[c] + (p11[c] - p10[c]) * tx;
                px[c] = top + (bot - top) * ty;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Photometric ops in fixed order: jitter, grayscale, blur.
pub fn photometric_apply(image: &Image, params: &StrongParams) -> Image {
    let mut out = image.clone();
    let identity_jitter = params.jitter_scale == [1.0; 3] && params.jitter_shift == [0.0; 3];
    for px in out.data_mut().chunks_exact_mut(3) {
        if !identity_jitter {
            for c in 0..3 {
                px[c] = (px[c] * params.jitter_scale[c] + params.jitter_shift[c]).clamp(0.0, 1.0);
            }
        }
        if params.grayscale {
            let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(g);
        }
    }
    if params.blur_sigma > 0.0 {
        out = gaussian_blur(&out, params.blur_sigma);
    }
    out
}

fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = image.dims();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                let p = image.pixel(y, clamp(x as i64 + d, w));
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            tmp.set_pixel(y, x, acc);
        }
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                let p = tmp.pixel(clamp(y as i64 + d, h), x);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    out
}

/// Photometric ops followed by CutMix from `partner_image`. Returns the
/// strong view and the mask of partner-owned pixels.
pub fn strong_apply(
    image: &Image,
    params: &StrongParams,
    partner_image: Option<&Image>,
) -> Result<(Image, Vec<bool>)> {
    let (h, w) = image.dims();
    if params.cutmix_box.is_some() != params.cutmix_partner.is_some() {
        return Err(Error::param("cutmix box and partner must be given together"));
    }
    let mut out = photometric_apply(image, params);
    let mut mask = vec![false; h * w];
    if let Some(bbox) = params.cutmix_box {
        if !bbox.fits(h, w) {
            return Err(Error::param(format!("cutmix box {bbox:?} outside {h}x{w} image")));
        }
        let partner = partner_image
            .ok_or_else(|| Error::param("cutmix requested without a partner image"))?;
        if partner.dims() != (h, w) {
            return Err(Error::contract("cutmix partner size differs"));
        }
        for y in bbox.top..bbox.top + bbox.height {
            for x in bbox.left..bbox.left + bbox.width {
                out.set_pixel(y, x, partner.pixel(y, x));
                mask[y * w + x] = true;
            }
        }
    }
    Ok((out, mask))
}

/// Pixels inside `mask` come from `b`, the rest from `a`.
pub fn mix_targets(a: &Target, b: &Target, mask: &[bool]) -> Result<Target> {
    if a.label.dims() != b.label.dims() || mask.len() != a.label.len() {
        return Err(Error::contract("mix_targets: shapes of targets and mask differ"));
    }
    let mut out = a.clone();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            out.label.data_mut()[p] = b.label.data()[p];
            out.confidence[p] = b.confidence[p];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (Image, LabelMap) {
        let s = generate_scene(&SceneSpec::default(), 2, false).unwrap();
        (s.image, s.label)
    }

    #[test]
    fn identity_weak_is_noop() {
        let (img, lab) = scene();
        let (i2, l2) = weak_apply(&img, Some(&lab), &WeakParams::identity(64, 64)).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2.unwrap(), lab);
    }

    #[test]
    fn flip_is_involution() {
        let (img, lab) = scene();
        let p = WeakParams {
            flip: true,
            ..WeakParams::identity(64, 64)
        };
        let (i1, l1) = weak_apply(&img, Some(&lab), &p).unwrap();
        assert_ne!(i1, img);
        let (i2, l2) = weak_apply(&i1, l1.as_ref(), &p).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2.unwrap(), lab);
    }

    #[test]
    fn crop_index_arithmetic() {
        let (img, lab) = scene();
        let p = WeakParams {
            flip: false,
            crop: BBox::new(0, 0, 32, 32),
            output_size: (32, 32),
        };
        let (ci, cl) = weak_apply(&img, Some(&lab), &p).unwrap();
        let cl = cl.unwrap();
        for (y, x) in [(5, 5), (0, 31), (31, 0), (17, 9)] {
            assert_eq!(cl.get(y, x), lab.get(y, x));
            assert_eq!(ci.pixel(y, x), img.pixel(y, x));
        }
        let p = WeakParams {
            crop: BBox::new(10, 20, 32, 32),
            ..p
        };
        let (_, cl) = weak_apply(&img, Some(&lab), &p).unwrap();
        assert_eq!(cl.unwrap().get(5, 5), lab.get(15, 25));
    }

    #[test]
    fn crop_outside_is_param_error() {
        let (img, _) = scene();
        let p = WeakParams {
            flip: false,
            crop: BBox::new(40, 40, 32, 32),
            output_size: (32, 32),
        };
        assert!(matches!(weak_apply(&img, None, &p), Err(Error::Param(_))));
    }

    #[test]
    fn identity_strong_is_noop() {
        let (img, _) = scene();
        let (out, mask) = strong_apply(&img, &StrongParams::identity(), None).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn full_cutmix_copies_partner() {
        let (img, _) = scene();
        let partner = generate_scene(&SceneSpec::default(), 9, true).unwrap().image;
        let p = StrongParams {
            cutmix_box: Some(BBox::full(64, 64)),
            cutmix_partner: Some(1),
            ..StrongParams::identity()
        };
        let (out, mask) = strong_apply(&img, &p, Some(&partner)).unwrap();
        assert_eq!(out, partner);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn cutmix_requires_box_and_partner_together() {
        let (img, _) = scene();
        let p = StrongParams {
            cutmix_partner: Some(0),
            ..StrongParams::identity()
        };
        assert!(matches!(strong_apply(&img, &p, Some(&img)), Err(Error::Param(_))));
        let p = StrongParams {
            cutmix_box: Some(BBox::new(60, 60, 8, 8)),
            cutmix_partner: Some(0),
            ..StrongParams::identity()
        };
        assert!(matches!(strong_apply(&img, &p, Some(&img)), Err(Error::Param(_))));
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let (img, _) = scene();
        let p = StrongParams {
            grayscale: true,
            jitter_scale: [1.2, 0.7, 1.0],
            jitter_shift: [0.1, -0.1, 0.0],
            ..StrongParams::identity()
        };
        let (out, _) = strong_apply(&img, &p, None).unwrap();
        for px in out.data().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        let p = StrongParams {
            blur_sigma: 1.2,
            ..StrongParams::identity()
        };
        let (out, _) = strong_apply(&img, &p, None).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mix_targets_select() {
        let a = Target::certain(LabelMap::filled(4, 4, 1));
        let b = Target::new(LabelMap::filled(4, 4, 2), vec![0.5; 16]).unwrap();
        assert_eq!(mix_targets(&a, &b, &[false; 16]).unwrap(), a);
        assert_eq!(mix_targets(&a, &b, &[true; 16]).unwrap(), b);
        let left: Vec<bool> = (0..16).map(|p| p % 4 < 2).collect();
        let m = mix_targets(&a, &b, &left).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (want, conf) = if x < 2 { (2, 0.5) } else { (1, 1.0) };
                assert_eq!(m.label.get(y, x), want);
                assert_eq!(m.confidence[y * 4 + x], conf);
            }
        }
        let c = Target::certain(LabelMap::filled(3, 3, 0));
        assert!(matches!(mix_targets(&a, &c, &[true; 9]), Err(Error::Contract(_))));
    }

    #[test]
    fn sampled_params_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ranges = StrongRanges::default();
        for _ in 0..200 {
            let wp = sample_weak(&mut rng, (64, 64), 32, 0.5);
            assert!(wp.crop.fits(64, 64));
            let sp = sample_strong(&mut rng, &ranges, (32, 32), Some(1));
            assert_eq!(sp.cutmix_box.is_some(), sp.cutmix_partner.is_some());
            if let Some(b) = sp.cutmix_box {
                assert!(b.fits(32, 32));
            }
            assert!((0.0..=1.5).contains(&sp.blur_sigma));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mix_is_idempotent_on_same_mask(
                la in proptest::collection::vec(0u16..5, 36),
                lb in proptest::collection::vec(0u16..5, 36),
                mask in proptest::collection::vec(any::<bool>(), 36),
            ) {
                let a = Target::certain(LabelMap::from_vec(6, 6, la).unwrap());
                let b = Target::new(LabelMap::from_vec(6, 6, lb).unwrap(), vec![0.3; 36]).unwrap();
                let once = mix_targets(&a, &b, &mask).unwrap();
                let twice = mix_targets(&once, &b, &mask).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn photometric_never_moves_label_geometry(seed in 0u64..500) {
                // Without CutMix, the strong view is a pointwise function of the weak view.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sp = sample_strong(&mut rng, &StrongRanges { blur_prob: 0.0, ..Default::default() }, (8, 8), None);
                let mut img = Image::zeros(8, 8);
                img.set_pixel(3, 4, [1.0, 1.0, 1.0]);
                let (out, mask) = strong_apply(&img, &sp, None).unwrap();
                prop_assert!(mask.iter().all(|m| !m));
                let bg = out.pixel(0, 0);
                for y in 0..8 { for x in 0..8 {
                    if (y, x) != (3, 4) { prop_assert_eq!(out.pixel(y, x), bg); }
                }}
            }
        }
    }
}
