//! Three-flow training loop: supervised, in-distribution weak-to-strong
//! consistency, and OOD images supervised by teacher pseudo-labels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ovs_teacher::{self_teacher_pseudo_label, PseudoLabelStore};
use crate::perturb::{
    mix_targets, photometric_apply, sample_strong, sample_weak, strong_apply, weak_apply, weak_apply_target,
    StrongParams, StrongRanges, Target,
};
use crate::seeding::{rng_for, tag};
use crate::types::{Image, LabelMap};

use super::loss::{masked_ce, mean, supervised_ce, target_from_probs, CeSum};
use super::model::{Real, StudentModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Confidence threshold of the in-distribution flow.
    pub tau_in: f64,
    /// Confidence threshold of the OOD flow.
    pub tau_out: f64,
    /// Weight of the OOD flow.
    pub lambda_out: f64,
    pub n_labeled: usize,
    pub n_unlabeled_in: usize,
    pub n_unlabeled_out: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Polynomial decay power.
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub crop_size: usize,
    /// Smallest crop side as a fraction of the shorter image side.
    pub min_crop_scale: f64,
    pub model_width: usize,
    pub seed: u64,
    pub strong: StrongRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau_in: 0.95,
            tau_out: 0.0,
            lambda_out: 1.0,
            n_labeled: 8,
            n_unlabeled_in: 8,
            n_unlabeled_out: 8,
            epochs: 200,
            learning_rate: 0.1,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            crop_size: 32,
            min_crop_scale: 0.5,
            model_width: 8,
            seed: 1,
            strong: StrongRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_in", self.tau_in), ("tau_out", self.tau_out)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {tau}")));
            }
        }
        if !(self.lambda_out >= 0.0 && self.lambda_out.is_finite()) {
            return Err(Error::config("lambda_out must be finite and non-negative"));
        }
        if self.n_labeled == 0 && self.n_unlabeled_in == 0 && (self.n_unlabeled_out == 0 || self.lambda_out == 0.0) {
            return Err(Error::config("every loss component is disabled"));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::config("learning_rate and epochs must be positive"));
        }
        if self.crop_size == 0 || self.model_width == 0 {
            return Err(Error::config("crop_size and model_width must be positive"));
        }
        if !(self.min_crop_scale > 0.0 && self.min_crop_scale <= 1.0) {
            return Err(Error::config("min_crop_scale must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Images available to the trainer.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<(Image, LabelMap)>,
    pub unlabeled_in: Vec<Image>,
    pub unlabeled_out: Vec<(String, Image)>,
}

/// Where OOD targets come from.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    /// Stored open-vocabulary pseudo-labels, keyed by OOD item id.
    Ovs(&'a PseudoLabelStore),
    /// The student labels its own weak view.
    SelfTeacher,
}

#[derive(Debug, Clone)]
pub struct LabeledView {
    pub image: Image,
    pub label: LabelMap,
}

/// Weak and strong views of one unlabeled flow. The strong view of image `i`
/// holds pixels of `partners[i]` wherever `masks[i]` is set.
#[derive(Debug, Clone, Default)]
pub struct UnlabeledViews {
    pub weak: Vec<Image>,
    pub strong: Vec<Image>,
    pub masks: Vec<Vec<bool>>,
    pub partners: Vec<Option<usize>>,
    /// Teacher targets aligned with the weak views; `None` means self-labeling.
    pub teacher_targets: Option<Vec<Target>>,
}

impl UnlabeledViews {
    pub fn len(&self) -> usize {
        self.strong.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strong.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub labeled: Vec<LabeledView>,
    pub unlabeled_in: UnlabeledViews,
    pub unlabeled_out: UnlabeledViews,
}

/// Loss components of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub l_s: f64,
    pub l_u_in: f64,
    pub l_u_out: f64,
    pub total: f64,
    pub masked_frac_in: f64,
    pub masked_frac_out: f64,
}

/// Cycles through a reshuffled index order, one stream per flow.
struct CyclicSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        CyclicSampler {
            len,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

const FLOW_LABELED: u64 = 1;
const FLOW_IN: u64 = 2;
const FLOW_OUT: u64 = 3;

/// Deterministic batch assembly. Each flow draws from its own random
/// streams, so enabling or disabling one flow never shifts another.
pub struct BatchSampler<'a> {
    data: &'a TrainData,
    teacher: TeacherSource<'a>,
    cfg: &'a TrainConfig,
    labeled: CyclicSampler,
    unlabeled_in: CyclicSampler,
    unlabeled_out: CyclicSampler,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a TrainData, teacher: TeacherSource<'a>, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let crop = cfg.crop_size;
        let check = |img: &Image, what: &str| {
            if img.height() < crop || img.width() < crop {
                Err(Error::config(format!(
                    "{what} image {}x{} is smaller than crop_size {crop}",
                    img.height(),
                    img.width()
                )))
            } else {
                Ok(())
            }
        };
        for (img, lab) in &data.labeled {
            check(img, "labeled")?;
            if lab.dims() != img.dims() {
                return Err(Error::contract("labeled image and label sizes differ"));
            }
        }
        data.unlabeled_in.iter().try_for_each(|i| check(i, "unlabeled"))?;
        data.unlabeled_out.iter().try_for_each(|(_, i)| check(i, "OOD"))?;
        if cfg.n_labeled > 0 && data.labeled.is_empty() {
            return Err(Error::config("n_labeled > 0 but no labeled images"));
        }
        if cfg.n_unlabeled_in > 0 && data.unlabeled_in.is_empty() {
            return Err(Error::config("n_unlabeled_in > 0 but no in-distribution unlabeled images"));
        }
        if cfg.n_unlabeled_out > 0 {
            if data.unlabeled_out.is_empty() {
                return Err(Error::config("n_unlabeled_out > 0 but no OOD images"));
            }
            if let TeacherSource::Ovs(store) = teacher {
                store.ensure_covers(data.unlabeled_out.iter().map(|(id, _)| id.as_str()))?;
                for (id, img) in &data.unlabeled_out {
                    let pl = store.get(id).expect("coverage checked");
                    if pl.label.dims() != img.dims() {
                        return Err(Error::contract(format!("pseudo-label for {id} does not match its image size")));
                    }
                }
            }
        }
        let s = cfg.seed;
        Ok(BatchSampler {
            data,
            teacher,
            cfg,
            labeled: CyclicSampler::new(data.labeled.len(), rng_for(s, &[tag("order"), FLOW_LABELED])),
            unlabeled_in: CyclicSampler::new(data.unlabeled_in.len(), rng_for(s, &[tag("order"), FLOW_IN])),
            unlabeled_out: CyclicSampler::new(data.unlabeled_out.len(), rng_for(s, &[tag("order"), FLOW_OUT])),
        })
    }

    /// Steps per epoch: one pass over the in-distribution unlabeled set, or
    /// over the labeled set when that flow is off.
    pub fn steps_per_epoch(&self) -> usize {
        let (len, per) = if self.cfg.n_unlabeled_in > 0 {
            (self.data.unlabeled_in.len(), self.cfg.n_unlabeled_in)
        } else if self.cfg.n_labeled > 0 {
            (self.data.labeled.len(), self.cfg.n_labeled)
        } else {
            (self.data.unlabeled_out.len(), self.cfg.n_unlabeled_out)
        };
        len.div_ceil(per).max(1)
    }

    pub fn next_batch(&mut self, step: usize) -> Result<Batch> {
        let cfg = self.cfg;
        let crop = cfg.crop_size;
        let step = step as u64;

        let mut rng = rng_for(cfg.seed, &[tag("aug"), FLOW_LABELED, step]);
        let labeled = self
            .labeled
            .take(cfg.n_labeled)
            .into_iter()
            .map(|i| {
                let (img, lab) = &self.data.labeled[i];
                let wp = sample_weak(&mut rng, img.dims(), crop, cfg.min_crop_scale);
                let (image, label) = weak_apply(img, Some(lab), &wp)?;
                Ok(LabeledView {
                    image,
                    label: label.expect("label requested"),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let idx_in = self.unlabeled_in.take(cfg.n_unlabeled_in);
        let imgs_in: Vec<&Image> = idx_in.iter().map(|&i| &self.data.unlabeled_in[i]).collect();
        let unlabeled_in = build_views(&imgs_in, None, cfg, rng_for(cfg.seed, &[tag("aug"), FLOW_IN, step]))?;

        let idx_out = self.unlabeled_out.take(cfg.n_unlabeled_out);
        let imgs_out: Vec<&Image> = idx_out.iter().map(|&i| &self.data.unlabeled_out[i].1).collect();
        let stored: Option<Vec<Target>> = match self.teacher {
            TeacherSource::Ovs(store) => Some(
                idx_out
                    .iter()
                    .map(|&i| {
                        let id = &self.data.unlabeled_out[i].0;
                        store
                            .get(id)
                            .map(|pl| pl.to_target())
                            .ok_or_else(|| Error::MissingPseudoLabel(id.clone()))
                    })
                    .collect::<Result<_>>()?,
            ),
            TeacherSource::SelfTeacher => None,
        };
        let unlabeled_out = build_views(
            &imgs_out,
            stored.as_deref(),
            cfg,
            rng_for(cfg.seed, &[tag("aug"), FLOW_OUT, step]),
        )?;

        Ok(Batch {
            labeled,
            unlabeled_in,
            unlabeled_out,
        })
    }
}

/// Weak geometry, then photometric strong ops, then CutMix with the next
/// image of the batch. Stored targets follow the weak geometry.
fn build_views(
    images: &[&Image],
    stored: Option<&[Target]>,
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<UnlabeledViews> {
    let b = images.len();
    let crop = cfg.crop_size;
    let mut views = UnlabeledViews {
        teacher_targets: stored.map(|_| Vec::with_capacity(b)),
        ..Default::default()
    };
    let mut photo = Vec::with_capacity(b);
    let mut params: Vec<StrongParams> = Vec::with_capacity(b);
    for (i, img) in images.iter().enumerate() {
        let wp = sample_weak(&mut rng, img.dims(), crop, cfg.min_crop_scale);
        let (weak, _) = weak_apply(img, None, &wp)?;
        if let (Some(targets), Some(store)) = (views.teacher_targets.as_mut(), stored) {
            targets.push(weak_apply_target(&store[i], &wp)?);
        }
        let partner = (b > 1).then_some((i + 1) % b);
        let sp = sample_strong(&mut rng, &cfg.strong, (crop, crop), partner);
        photo.push(photometric_apply(&weak, &sp));
        params.push(sp);
        views.weak.push(weak);
    }
    for (i, sp) in params.iter().enumerate() {
        // photometric ops already applied; only the CutMix paste remains
        let paste = StrongParams {
            cutmix_box: sp.cutmix_box,
            cutmix_partner: sp.cutmix_partner,
            ..StrongParams::identity()
        };
        let partner = sp.cutmix_partner.map(|p| &photo[p]);
        let (strong, mask) = strong_apply(&photo[i], &paste, partner)?;
        views.strong.push(strong);
        views.masks.push(mask);
        views.partners.push(sp.cutmix_partner);
    }
    Ok(views)
}

/// Weak-view targets mixed through each image's CutMix mask.
fn mixed_targets(views: &UnlabeledViews, targets: &[Target]) -> Result<Vec<Target>> {
    (0..views.len())
        .map(|i| match views.partners[i] {
            Some(p) => mix_targets(&targets[i], &targets[p], &views.masks[i]),
            None => Ok(targets[i].clone()),
        })
        .collect()
}

struct FlowResult<T> {
    loss: f64,
    masked_frac: f64,
    grad: Option<Vec<T>>,
}

/// Forward every image, form the batch mean over active pixels, and
/// backpropagate `scale * d mean / d logits`.
fn run_flow<T: Real, M: StudentModel<T>>(
    model: &M,
    images: &[&Image],
    term: impl Fn(usize, &super::model::Logits<T>) -> Result<CeSum<T>> + Sync,
    scale: Option<T>,
) -> Result<FlowResult<T>> {
    let want_grad = scale.is_some();
    let per_image: Vec<(CeSum<T>, Option<M::Cache>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            if want_grad {
                let (logits, cache) = model.forward_cached(img);
                Ok((term(i, &logits)?, Some(cache)))
            } else {
                let logits = model.forward(img);
                Ok((term(i, &logits)?, None))
            }
        })
        .collect::<Result<_>>()?;

    let active: usize = per_image.iter().map(|(s, _)| s.active).sum();
    let masked: usize = per_image.iter().map(|(s, _)| s.masked).sum();
    let pixels: usize = images.iter().map(|i| i.height() * i.width()).sum();
    let loss_sum = per_image.iter().fold(T::zero(), |acc, (s, _)| acc + s.loss_sum);
    let loss = mean(loss_sum, active);

    let grad = match scale {
        Some(scale) => {
            let factor = scale / T::from_f64(active.max(1) as f64);
            let n_params = model.params().len();
            let parts: Vec<Vec<T>> = per_image
                .par_iter()
                .map(|(s, cache)| {
                    let mut g = vec![T::zero(); n_params];
                    if s.active > 0 {
                        let gl: Vec<T> = s.grad.iter().map(|&v| v * factor).collect();
                        model.backward(cache.as_ref().expect("cached"), &gl, &mut g);
                    }
                    g
                })
                .collect();
            let mut total = vec![T::zero(); n_params];
            for part in parts {
                for (t, p) in total.iter_mut().zip(part) {
                    *t += p;
                }
            }
            Some(total)
        }
        None => None,
    };
    Ok(FlowResult {
        loss: loss.to_f64().unwrap_or(f64::NAN),
        masked_frac: if pixels == 0 { 0.0 } else { masked as f64 / pixels as f64 },
        grad,
    })
}

fn weak_self_targets<T: Real, M: StudentModel<T>>(model: &M, weak: &[Image], labels_only_n: bool) -> Vec<Target> {
    weak.par_iter()
        .map(|img| {
            if labels_only_n {
                self_teacher_pseudo_label(model, img).into_target()
            } else {
                target_from_probs(&model.forward(img).softmax())
            }
        })
        .collect()
}

/// Pseudo-label targets of the two unlabeled flows, already mixed through
/// the CutMix masks. They are constants for differentiation.
#[derive(Debug, Clone, Default)]
pub struct FlowTargets {
    pub unlabeled_in: Vec<Target>,
    pub unlabeled_out: Vec<Target>,
}

pub fn resolve_targets<T: Real, M: StudentModel<T>>(model: &M, batch: &Batch) -> Result<FlowTargets> {
    let mut out = FlowTargets::default();
    let u_in = &batch.unlabeled_in;
    if !u_in.is_empty() {
        let raw = weak_self_targets(model, &u_in.weak, false);
        out.unlabeled_in = mixed_targets(u_in, &raw)?;
    }
    let u_out = &batch.unlabeled_out;
    if !u_out.is_empty() {
        let raw = match &u_out.teacher_targets {
            Some(t) => t.clone(),
            None => weak_self_targets(model, &u_out.weak, true),
        };
        out.unlabeled_out = mixed_targets(u_out, &raw)?;
    }
    Ok(out)
}

/// Evaluate `l_s + l_u_in + lambda_out * l_u_out` on a prepared batch and,
/// when `want_grad`, its gradient with respect to the model parameters.
pub fn batch_objective<T: Real, M: StudentModel<T>>(
    model: &M,
    batch: &Batch,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(StepLosses, Option<Vec<T>>)> {
    let targets = resolve_targets(model, batch)?;
    objective_with_targets(model, batch, &targets, cfg, want_grad)
}

/// Objective with fixed targets, as produced by [`resolve_targets`].
pub fn objective_with_targets<T: Real, M: StudentModel<T>>(
    model: &M,
    batch: &Batch,
    targets: &FlowTargets,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(StepLosses, Option<Vec<T>>)> {
    let one = want_grad.then_some(T::one());
    let mut losses = StepLosses::default();
    let mut grads: Vec<Vec<T>> = Vec::new();

    if !batch.labeled.is_empty() {
        let imgs: Vec<&Image> = batch.labeled.iter().map(|v| &v.image).collect();
        let r = run_flow(model, &imgs, |i, l| supervised_ce(l, &batch.labeled[i].label, want_grad), one)?;
        losses.l_s = r.loss;
        grads.extend(r.grad);
    }

    let u_in = &batch.unlabeled_in;
    if !u_in.is_empty() {
        let t = &targets.unlabeled_in;
        let imgs: Vec<&Image> = u_in.strong.iter().collect();
        let r = run_flow(model, &imgs, |i, l| masked_ce(l, &t[i], cfg.tau_in, want_grad), one)?;
        losses.l_u_in = r.loss;
        losses.masked_frac_in = r.masked_frac;
        grads.extend(r.grad);
    }

    let u_out = &batch.unlabeled_out;
    if !u_out.is_empty() {
        let t = &targets.unlabeled_out;
        let imgs: Vec<&Image> = u_out.strong.iter().collect();
        // a zero-weight OOD flow contributes no gradient at all
        let scale = (want_grad && cfg.lambda_out != 0.0).then(|| T::from_f64(cfg.lambda_out));
        let grad_wanted = scale.is_some();
        let r = run_flow(model, &imgs, |i, l| masked_ce(l, &t[i], cfg.tau_out, grad_wanted), scale)?;
        losses.l_u_out = r.loss;
        losses.masked_frac_out = r.masked_frac;
        grads.extend(r.grad);
    }

    losses.total = losses.l_s + losses.l_u_in + cfg.lambda_out * losses.l_u_out;
    if !losses.total.is_finite() {
        return Err(Error::Run(format!("non-finite objective {losses:?}")));
    }
    let grad = want_grad.then(|| {
        let mut total = vec![T::zero(); model.params().len()];
        for g in grads {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    });
    Ok((losses, grad))
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_s: f64,
    pub l_u_in: f64,
    pub l_u_out: f64,
    pub masked_frac_in: f64,
    pub masked_frac_out: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricHistory {
    pub const HEADER: &'static str = "epoch,l_s,l_u_in,l_u_out,masked_frac_in,masked_frac_out,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for m in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.epoch, m.l_s, m.l_u_in, m.l_u_out, m.masked_frac_in, m.masked_frac_out, m.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::HEADER => {}
            _ => return Err(Error::format(path, "missing metric history header")),
        }
        let mut epochs = Vec::new();
        for (lineno, line) in lines {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err(format!("expected 7 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
            epochs.push(EpochMetrics {
                epoch: f[0].parse().map_err(|e| err(format!("bad epoch: {e}")))?,
                l_s: num(f[1])?,
                l_u_in: num(f[2])?,
                l_u_out: num(f[3])?,
                masked_frac_in: num(f[4])?,
                masked_frac_out: num(f[5])?,
                lr: num(f[6])?,
            });
        }
        Ok(MetricHistory { epochs })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?, path)
    }
}

/// Polynomial decay from `base` to zero over `total` steps.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    base * (1.0 - step as f64 / total.max(1) as f64).max(0.0).powf(power)
}

/// Called after every update with the global step and current parameters.
pub type StepObserver<'o, T> = dyn FnMut(usize, &[T]) + 'o;

pub fn train<T: Real, M: StudentModel<T>>(
    model: &mut M,
    data: &TrainData,
    teacher: TeacherSource<'_>,
    cfg: &TrainConfig,
) -> Result<MetricHistory> {
    train_observed(model, data, teacher, cfg, &mut |_, _| {})
}

pub fn train_observed<T: Real, M: StudentModel<T>>(
    model: &mut M,
    data: &TrainData,
    teacher: TeacherSource<'_>,
    cfg: &TrainConfig,
    observer: &mut StepObserver<'_, T>,
) -> Result<MetricHistory> {
    let mut sampler = BatchSampler::new(data, teacher, cfg)?;
    let steps = sampler.steps_per_epoch();
    let total = steps * cfg.epochs;
    let mut velocity = vec![T::zero(); model.params().len()];
    let momentum = T::from_f64(cfg.momentum);
    let decay = T::from_f64(cfg.weight_decay);
    let mut history = MetricHistory::default();

    for epoch in 0..cfg.epochs {
        let mut acc = StepLosses::default();
        let epoch_lr = poly_lr(cfg.learning_rate, epoch * steps, total, cfg.lr_power);
        for s in 0..steps {
            let step = epoch * steps + s;
            let batch = sampler.next_batch(step)?;
            let (losses, grad) = batch_objective(model, &batch, cfg, true)?;
            let grad = grad.expect("gradient requested");
            let lr = T::from_f64(poly_lr(cfg.learning_rate, step, total, cfg.lr_power));
            for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = momentum * *v + *g + decay * *p;
                *p = *p - lr * *v;
            }
            observer(step, model.params());
            acc.l_s += losses.l_s;
            acc.l_u_in += losses.l_u_in;
            acc.l_u_out += losses.l_u_out;
            acc.masked_frac_in += losses.masked_frac_in;
            acc.masked_frac_out += losses.masked_frac_out;
        }
        let k = steps as f64;
        history.epochs.push(EpochMetrics {
            epoch,
            l_s: acc.l_s / k,
            l_u_in: acc.l_u_in / k,
            l_u_out: acc.l_u_out / k,
            masked_frac_in: acc.masked_frac_in / k,
            masked_frac_out: acc.masked_frac_out / k,
            lr: epoch_lr,
        });
    }
    Ok(history)
}
