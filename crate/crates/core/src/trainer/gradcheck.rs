//! Finite-difference verification of the analytic training gradient.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::seeding::{rng_for, tag};

use super::model::StudentModel;
use super::train::{objective_with_targets, resolve_targets, Batch, TrainConfig};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Step shrink factors tried when a probe disagrees, in order.
const STEP_LADDER: [f64; 3] = [1.0, 0.25, 0.0625];

/// Agreement below which a probe is accepted without shrinking the step.
const LADDER_ACCEPT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub epsilon: f64,
    pub loss: f64,
    /// Worst parameter: (index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
    /// Parameters whose first probe straddled a ReLU kink and needed a
    /// smaller step.
    pub reprobed: usize,
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compare the analytic gradient of the full objective with central
/// differences on `n_checks` randomly chosen parameters (all of them when
/// the model has fewer). Pseudo-label targets are resolved once at the
/// current parameters and held fixed, matching the stop-gradient rule.
///
/// The objective is piecewise smooth. A step of `epsilon` that crosses a
/// ReLU kink measures a secant, so a disagreeing probe is repeated at
/// `epsilon / 4` and `epsilon / 16` and the closest agreement is kept. A
/// wrong analytic gradient disagrees at every step.
pub fn gradient_check<M: StudentModel<f64>>(
    model: &mut M,
    batch: &Batch,
    cfg: &TrainConfig,
    epsilon: f64,
    n_checks: usize,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let targets = resolve_targets(model, batch)?;
    let (losses, grad) = objective_with_targets(model, batch, &targets, cfg, true)?;
    let grad = grad.expect("gradient requested");
    let n = model.params().len();
    let mut rng = rng_for(cfg.seed, &[tag("gradcheck")]);
    let mut picks = sample(&mut rng, n, n_checks.min(n)).into_vec();
    picks.sort_unstable();

    let eval = |model: &mut M, i: usize, value: f64| -> Result<f64> {
        model.params_mut()[i] = value;
        let (l, _) = objective_with_targets(model, batch, &targets, cfg, false)?;
        if !l.total.is_finite() {
            return Err(Error::Run(format!("non-finite loss while probing parameter {i}")));
        }
        Ok(l.total)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: picks.len(),
        epsilon,
        loss: losses.total,
        worst: None,
        reprobed: 0,
    };
    for &i in &picks {
        let orig = model.params()[i];
        // (error, numeric, ladder rung)
        let mut best: Option<(f64, f64, usize)> = None;
        for (k, shrink) in STEP_LADDER.iter().enumerate() {
            let h = epsilon * shrink;
            let plus = eval(model, i, orig + h);
            let minus = eval(model, i, orig - h);
            model.params_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            if best.is_none_or(|(e, _, _)| err < e) {
                best = Some((err, numeric, k));
            }
            if err <= LADDER_ACCEPT {
                break;
            }
        }
        let (err, numeric, rung) = best.expect("ladder is non-empty");
        report.reprobed += usize::from(rung > 0);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, grad[i], numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::experiment::{build_dataset, teacher_labels};
    use crate::trainer::model::ConvNet;
    use crate::trainer::train::{BatchSampler, TeacherSource};
    use crate::types::Image;

    /// Backward pass that overstates every gradient by 2%.
    struct Skewed(ConvNet<f64>);

    impl StudentModel<f64> for Skewed {
        type Cache = <ConvNet<f64> as StudentModel<f64>>::Cache;

        fn num_classes(&self) -> usize {
            self.0.num_classes()
        }

        fn forward_cached(&self, image: &Image) -> (crate::trainer::Logits<f64>, Self::Cache) {
            self.0.forward_cached(image)
        }

        fn backward(&self, cache: &Self::Cache, grad_logits: &[f64], grad: &mut [f64]) {
            let mut own = vec![0.0; grad.len()];
            self.0.backward(cache, grad_logits, &mut own);
            for (g, o) in grad.iter_mut().zip(own) {
                *g += 1.02 * o;
            }
        }

        fn params(&self) -> &[f64] {
            self.0.params()
        }

        fn params_mut(&mut self) -> &mut [f64] {
            self.0.params_mut()
        }

        fn reset(&mut self, seed: u64) {
            self.0.reset(seed)
        }
    }

    #[test]
    fn smaller_steps_do_not_hide_a_wrong_gradient() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n_scenes = 8;
        cfg.data.n_labeled = 2;
        cfg.data.n_ood = 2;
        cfg.data.n_test = 1;
        cfg.train.n_labeled = 2;
        cfg.train.n_unlabeled_in = 2;
        cfg.train.n_unlabeled_out = 2;
        cfg.train.crop_size = 12;
        let data = build_dataset(&cfg).unwrap();
        let store = teacher_labels(&cfg, &cfg.prompt_set().unwrap(), &data.ood).unwrap();
        let td = data.train_data();
        let batch = BatchSampler::new(&td, TeacherSource::Ovs(&store), &cfg.train)
            .unwrap()
            .next_batch(0)
            .unwrap();
        let mut model = Skewed(ConvNet::new(4, 5, 2));
        for (k, p) in model.params_mut().iter_mut().enumerate() {
            *p += 0.01 * ((k % 7) as f64 - 3.0);
        }
        let r = gradient_check(&mut model, &batch, &cfg.train, 1e-5, 40).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert!(r.reprobed > 0);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / GRAD_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
