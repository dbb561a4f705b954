//! Student segmentation network with hand-written backpropagation.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seeding::rng_for;
use crate::types::{argmax, Image, LabelMap, ProbMap};

/// Scalar type a student can be instantiated with.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static {
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Per-pixel class scores, stored class-major (`CHW`).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, class: usize, pixel: usize) -> T {
        self.data[class * self.pixels() + pixel]
    }

    /// Softmax over classes, returned as an `HWN` probability map.
    pub fn softmax(&self) -> ProbMap {
        let (n, hw) = (self.classes, self.pixels());
        let mut out = vec![0.0f32; hw * n];
        let mut row = vec![T::zero(); n];
        for p in 0..hw {
            for (c, r) in row.iter_mut().enumerate() {
                *r = self.at(c, p);
            }
            softmax_row(&mut row);
            for c in 0..n {
                out[p * n + c] = row[c].to_f32();
            }
        }
        ProbMap::from_vec(self.height, self.width, n, out).expect("sizes agree")
    }

    pub fn argmax_labels(&self) -> LabelMap {
        let (n, hw) = (self.classes, self.pixels());
        let mut row = vec![T::zero(); n];
        let ids = (0..hw)
            .map(|p| {
                for (c, r) in row.iter_mut().enumerate() {
                    *r = self.at(c, p);
                }
                argmax(&row).0 as u16
            })
            .collect();
        LabelMap::from_vec(self.height, self.width, ids).expect("sizes agree")
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Contract between the trainer and a per-pixel classifier.
pub trait StudentModel<T: Real>: Send + Sync {
    /// Activations kept from a forward pass for the backward pass.
    type Cache: Send + Sync;

    fn num_classes(&self) -> usize;

    fn forward(&self, image: &Image) -> Logits<T> {
        self.forward_cached(image).0
    }

    fn forward_cached(&self, image: &Image) -> (Logits<T>, Self::Cache);

    /// Accumulate `d loss / d params` into `grad` given `d loss / d logits`.
    fn backward(&self, cache: &Self::Cache, grad_logits: &[T], grad: &mut [T]);

    fn params(&self) -> &[T];

    fn params_mut(&mut self) -> &mut [T];

    fn reset(&mut self, seed: u64);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    relu: bool,
    offset: usize,
}

impl ConvLayer {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

/// Fully-convolutional student: three 3x3 conv + ReLU stages with dilation
/// 1, 2, 4 followed by a 1x1 classifier. Size-agnostic, same padding.
#[derive(Debug, Clone)]
pub struct ConvNet<T> {
    layers: Vec<ConvLayer>,
    params: Vec<T>,
}

impl<T: Real> ConvNet<T> {
    pub fn new(width: usize, classes: usize, seed: u64) -> Self {
        let shapes = [
            (3, width, 3, 1, true),
            (width, width, 3, 2, true),
            (width, width, 3, 4, true),
            (width, classes, 1, 1, false),
        ];
        let mut offset = 0;
        let layers = shapes
            .iter()
            .map(|&(cin, cout, kernel, dilation, relu)| {
                let l = ConvLayer {
                    cin,
                    cout,
                    kernel,
                    dilation,
                    relu,
                    offset,
                };
                offset += l.param_len();
                l
            })
            .collect();
        let mut net = ConvNet {
            layers,
            params: vec![T::zero(); offset],
        };
        net.reset(seed);
        net
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Channel width of the hidden stages.
    pub fn width(&self) -> usize {
        self.layers[0].cout
    }

    /// Copy with parameters cast to another scalar type.
    pub fn cast<U: Real>(&self) -> ConvNet<U> {
        ConvNet {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64().unwrap())).collect(),
        }
    }
}

/// Forward activations: network input followed by each layer's output.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    height: usize,
    width: usize,
    activations: Vec<Vec<T>>,
}

impl<T: Real> StudentModel<T> for ConvNet<T> {
    type Cache = ConvCache<T>;

    fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }

    fn forward_cached(&self, image: &Image) -> (Logits<T>, ConvCache<T>) {
        let (h, w) = image.dims();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        // inputs are centred on zero: [0, 1] -> [-1, 1]
        let two = T::from_f64(2.0);
        let input: Vec<T> = image.to_chw::<T>().into_iter().map(|v| v * two - T::one()).collect();
        activations.push(input);
        for layer in &self.layers {
            let input = activations.last().expect("input present");
            let mut out = conv_forward(layer, &self.params, input, h, w);
            if layer.relu {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            activations.push(out);
        }
        let logits = Logits {
            classes: self.num_classes(),
            height: h,
            width: w,
            data: activations.last().expect("output present").clone(),
        };
        (
            logits,
            ConvCache {
                height: h,
                width: w,
                activations,
            },
        )
    }

    fn backward(&self, cache: &ConvCache<T>, grad_logits: &[T], grad: &mut [T]) {
        let (h, w) = (cache.height, cache.width);
        let mut g = grad_logits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (gv, a) in g.iter_mut().zip(&cache.activations[i + 1]) {
                    if *a <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let need_input_grad = i > 0;
            g = conv_backward(
                layer,
                &self.params,
                &cache.activations[i],
                &g,
                h,
                w,
                grad,
                need_input_grad,
            );
        }
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn reset(&mut self, seed: u64) {
        let mut rng = rng_for(seed, &[0x1417]);
        for layer in &self.layers {
            let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = &mut self.params[layer.offset..layer.offset + layer.weight_len()];
            for v in w.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = T::from_f64(z * std);
            }
            let b = &mut self.params[layer.offset + layer.weight_len()..layer.offset + layer.param_len()];
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Valid output range along one axis for kernel offset `shift`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

fn conv_forward<T: Real>(layer: &ConvLayer, params: &[T], input: &[T], h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let k = layer.kernel;
    let pad = (layer.dilation * (k - 1) / 2) as isize;
    let weights = &params[layer.offset..layer.offset + layer.weight_len()];
    let bias = &params[layer.offset + layer.weight_len()..layer.offset + layer.param_len()];
    let mut out = vec![T::zero(); layer.cout * hw];
    for co in 0..layer.cout {
        let plane = &mut out[co * hw..(co + 1) * hw];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..layer.cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = (ky * layer.dilation) as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = (kx * layer.dilation) as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weights[((co * layer.cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wv * *v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    layer: &ConvLayer,
    params: &[T],
    input: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    grad_params: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let hw = h * w;
    let k = layer.kernel;
    let pad = (layer.dilation * (k - 1) / 2) as isize;
    let wlen = layer.weight_len();
    let weights = &params[layer.offset..layer.offset + wlen];
    let (gw, gb) = grad_params[layer.offset..layer.offset + layer.param_len()].split_at_mut(wlen);
    let mut grad_in = if need_input_grad {
        vec![T::zero(); layer.cin * hw]
    } else {
        Vec::new()
    };
    for co in 0..layer.cout {
        let g = &grad_out[co * hw..(co + 1) * hw];
        gb[co] += g.iter().copied().sum::<T>();
        for ci in 0..layer.cin {
            let src = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = (ky * layer.dilation) as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = (kx * layer.dilation) as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((co * layer.cin + ci) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let go = &g[y * w + x0..y * w + x1];
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let s = &src[s0..s0 + (x1 - x0)];
                        for (a, b) in go.iter().zip(s) {
                            acc += *a * *b;
                        }
                        if need_input_grad {
                            let gi = &mut grad_in[ci * hw + s0..ci * hw + s0 + (x1 - x0)];
                            for (d, a) in gi.iter_mut().zip(go) {
                                *d += wv * *a;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_scene, SceneSpec};

    #[test]
    fn param_count_within_budget() {
        let net = ConvNet::<f64>::new(8, 5, 0);
        assert_eq!(net.num_params(), 3 * 8 * 9 + 8 + 2 * (8 * 8 * 9 + 8) + 8 * 5 + 5);
        assert!(net.num_params() <= 5000);
        assert_eq!(StudentModel::<f64>::num_classes(&net), 5);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let net = ConvNet::<f32>::new(8, 5, 3);
        let img = generate_scene(&SceneSpec::default(), 0, false).unwrap().image;
        let a = net.forward(&img);
        assert_eq!(a, net.forward(&img));
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert_eq!((a.classes, a.height, a.width), (5, 64, 64));
    }

    #[test]
    fn conv_matches_naive_reference() {
        let net = ConvNet::<f64>::new(4, 3, 9);
        let img = generate_scene(&SceneSpec::default(), 1, false).unwrap().image;
        let (h, w) = (img.height(), img.width());
        let layer = net.layers[1];
        let input: Vec<f64> = (0..4 * h * w).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        let fast = conv_forward(&layer, &net.params, &input, h, w);
        let k = layer.kernel as isize;
        let d = layer.dilation as isize;
        let pad = d * (k - 1) / 2;
        let wts = &net.params[layer.offset..];
        for co in 0..layer.cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = wts[layer.weight_len() + co];
                    for ci in 0..layer.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky * d - pad, x + kx * d - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((co * layer.cin + ci) * layer.kernel + ky as usize) * layer.kernel
                                    + kx as usize;
                                acc += wts[wi] * input[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    let got = fast[co * h * w + y as usize * w + x as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = ConvNet::<f64>::new(3, 3, 5);
        let full = generate_scene(&SceneSpec::default(), 4, false).unwrap().image;
        let img = crate::perturb::weak_apply(
            &full,
            None,
            &crate::perturb::WeakParams {
                flip: false,
                crop: crate::types::BBox::new(8, 8, 12, 12),
                output_size: (12, 12),
            },
        )
        .unwrap()
        .0;
        // loss = sum(logits * r) for a fixed random r
        let (logits, cache) = net.forward_cached(&img);
        let r: Vec<f64> = (0..logits.data.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&cache, &r, &mut grad);
        let loss = |n: &ConvNet<f64>| -> f64 { n.forward(&img).data.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let eps = 1e-6;
        for i in (0..net.num_params()).step_by(7) {
            let orig = net.params[i];
            net.params[i] = orig + eps;
            let lp = loss(&net);
            net.params[i] = orig - eps;
            let lm = loss(&net);
            net.params[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn reset_reproduces_initialization() {
        let mut a = ConvNet::<f32>::new(8, 5, 11);
        let b = ConvNet::<f32>::new(8, 5, 11);
        a.params_mut()[0] = 99.0;
        a.reset(11);
        assert_eq!(a.params(), b.params());
    }
}
