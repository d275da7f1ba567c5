//! Reference regressor: three 3×3 conv blocks, global average pooling and a
//! linear head, with a hand-written reverse pass.
//!
//! ```text
//! conv3x3(4→8) → ReLU → maxpool2 → conv3x3(8→16) → ReLU → maxpool2
//!   → conv3x3(16→32) → ReLU → global avg pool → linear(32→1)
//! ```
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for gradient checking.

mod checkpoint;
mod flops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use flops::{flops_estimate, FlopsReport, LayerFlops};

pub trait Scalar: Float + Sum + AddAssign + MulAssign + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

pub const INPUT_CHANNELS: usize = 4;
pub const WIDTHS: [usize; 3] = [8, 16, 32];

/// Name and shape of every parameter tensor, in storage order.
pub const LAYOUT: [(&str, &[usize]); 8] = [
    ("conv1.w", &[8, 4, 3, 3]),
    ("conv1.b", &[8]),
    ("conv2.w", &[16, 8, 3, 3]),
    ("conv2.b", &[16]),
    ("conv3.w", &[32, 16, 3, 3]),
    ("conv3.b", &[32]),
    ("head.w", &[1, 32]),
    ("head.b", &[1]),
];

pub const PARAM_COUNT: usize = 6137;

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const CONV3_W: usize = 4;
const CONV3_B: usize = 5;
const HEAD_W: usize = 6;
const HEAD_B: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub data: Vec<T>,
}

impl<T> Tensor<T> {
    /// Biases and other rank-1 tensors are exempt from weight decay.
    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }
}

/// The ordered parameter set of the reference regressor. Also used to hold
/// gradients and optimizer moments, which share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros() -> Self {
        ModelParams {
            tensors: LAYOUT
                .iter()
                .map(|(name, shape)| Tensor {
                    name,
                    shape,
                    data: vec![T::zero(); shape.iter().product()],
                })
                .collect(),
        }
    }

    /// Uniform fan-in initialization `U(−√(6/fan_in), √(6/fan_in))` for
    /// weights, zeros for biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "model/init");
        let mut params = Self::zeros();
        for t in &mut params.tensors {
            if t.is_vector() {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = cast(rng.gen_range(-bound..bound));
            }
        }
        params
    }

    pub fn from_flat(values: &[T]) -> Result<Self> {
        if values.len() != PARAM_COUNT {
            return Err(Error::Shape(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                values.len()
            )));
        }
        let mut params = Self::zeros();
        let mut offset = 0;
        for t in &mut params.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.iter().map(|v| U::from(*v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    fn data(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }
}

/// Activations cached by [`forward`] for one sample.
#[derive(Debug, Clone)]
pub struct SampleTrace<T> {
    input: Vec<T>,
    z1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<u32>,
    z2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<u32>,
    z3: Vec<T>,
    pooled: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    height: usize,
    width: usize,
    samples: Vec<SampleTrace<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Per-layer activation lengths of one sample.
    pub fn layer_shapes(&self) -> Vec<usize> {
        self.samples.first().map_or_else(Vec::new, |s| {
            vec![
                s.z1.len(),
                s.p1.len(),
                s.z2.len(),
                s.p2.len(),
                s.z3.len(),
                s.pooled.len(),
            ]
        })
    }

    /// Every piecewise-linear branch the forward pass took: ReLU signs and
    /// max-pool winners. Two traces with equal patterns lie on the same
    /// linear piece of the network.
    pub fn pattern(&self) -> (Vec<bool>, Vec<u32>) {
        let mut signs = Vec::new();
        let mut args = Vec::new();
        for s in &self.samples {
            for z in [&s.z1, &s.z2, &s.z3] {
                signs.extend(z.iter().map(|v| *v > T::zero()));
            }
            args.extend_from_slice(&s.arg1);
            args.extend_from_slice(&s.arg2);
        }
        (signs, args)
    }

    /// Pre-activations of the first conv layer, for inspection.
    pub fn conv1_preactivation(&self, sample: usize) -> &[T] {
        &self.samples[sample].z1
    }
}

fn conv3x3<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); cout * hw];
    for o in 0..cout {
        let plane = &mut out[o * hw..(o + 1) * hw];
        plane.fill(bias[o]);
        for c in 0..cin {
            let src = &input[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = (
                    (-dy).max(0) as usize,
                    (h as isize - dy).min(h as isize) as usize,
                );
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = (
                        (-dx).max(0) as usize,
                        (w as isize - dx).min(w as isize) as usize,
                    );
                    let wv = weight[((o * cin + c) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of a 3×3 conv and, if requested,
/// returns the gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let mut din = want_input_grad.then(|| vec![T::zero(); cin * hw]);
    for o in 0..cout {
        let g = &dout[o * hw..(o + 1) * hw];
        dbias[o] += g.iter().copied().sum::<T>();
        for c in 0..cin {
            let src = &input[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = (
                    (-dy).max(0) as usize,
                    (h as isize - dy).min(h as isize) as usize,
                );
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = (
                        (-dx).max(0) as usize,
                        (w as isize - dx).min(w as isize) as usize,
                    );
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let row = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (gv, s) in grow.iter().zip(row) {
                            acc += *gv * *s;
                        }
                        if let Some(din) = din.as_mut() {
                            let drow =
                                &mut din[c * hw + sy * w + sx0..c * hw + sy * w + sx0 + (x1 - x0)];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * *gv;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
    din
}

/// ReLU followed by 2×2 max pooling. Ties go to the first maximum in
/// row-major window order.
fn relu_maxpool<T: Scalar>(z: &[T], ch: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut arg = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        let plane = &z[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (2 * y) * w + 2 * x;
                let mut best = plane[best_idx].max(T::zero());
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * x + dx;
                    let v = plane[idx].max(T::zero());
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

fn relu_maxpool_backward<T: Scalar>(
    z: &[T],
    arg: &[u32],
    dpool: &[T],
    ch: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let hw = h * w;
    let per = (h / 2) * (w / 2);
    let mut dz = vec![T::zero(); ch * hw];
    for c in 0..ch {
        for k in 0..per {
            let idx = c * hw + arg[c * per + k] as usize;
            if z[idx] > T::zero() {
                dz[idx] += dpool[c * per + k];
            }
        }
    }
    dz
}

fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "input {height}x{width} must be at least 8x8 with sides divisible by 4"
        )));
    }
    Ok(())
}

fn forward_sample<T: Scalar>(
    params: &ModelParams<T>,
    input: &[T],
    h: usize,
    w: usize,
) -> (T, SampleTrace<T>) {
    let [c1, c2, c3] = WIDTHS;
    let z1 = conv3x3(
        input,
        INPUT_CHANNELS,
        h,
        w,
        params.data(CONV1_W),
        params.data(CONV1_B),
        c1,
    );
    let (p1, arg1) = relu_maxpool(&z1, c1, h, w);
    let (h2, w2) = (h / 2, w / 2);
    let z2 = conv3x3(
        &p1,
        c1,
        h2,
        w2,
        params.data(CONV2_W),
        params.data(CONV2_B),
        c2,
    );
    let (p2, arg2) = relu_maxpool(&z2, c2, h2, w2);
    let (h3, w3) = (h2 / 2, w2 / 2);
    let z3 = conv3x3(
        &p2,
        c2,
        h3,
        w3,
        params.data(CONV3_W),
        params.data(CONV3_B),
        c3,
    );
    let n3 = cast::<T>((h3 * w3) as f64);
    let pooled: Vec<T> = z3
        .chunks_exact(h3 * w3)
        .map(|plane| plane.iter().map(|v| v.max(T::zero())).sum::<T>() / n3)
        .collect();
    let mut pred = params.data(HEAD_B)[0];
    for (wv, g) in params.data(HEAD_W).iter().zip(&pooled) {
        pred += *wv * *g;
    }
    let trace = SampleTrace {
        input: input.to_vec(),
        z1,
        p1,
        arg1,
        z2,
        p2,
        arg2,
        z3,
        pooled,
    };
    (pred, trace)
}

/// Runs the network on a contiguous `n × 4 × height × width` batch.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[T],
    n: usize,
    height: usize,
    width: usize,
) -> Result<(Vec<T>, ForwardTrace<T>)> {
    check_input_size(height, width)?;
    let per = INPUT_CHANNELS * height * width;
    if batch.len() != n * per {
        return Err(Error::Shape(format!(
            "batch has {} values, expected {n}x4x{height}x{width}",
            batch.len()
        )));
    }
    let mut preds = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for input in batch.chunks_exact(per) {
        let (p, t) = forward_sample(params, input, height, width);
        preds.push(p);
        samples.push(t);
    }
    Ok((
        preds,
        ForwardTrace {
            height,
            width,
            samples,
        },
    ))
}

/// Predictions only; no trace is kept.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[T],
    n: usize,
    height: usize,
    width: usize,
) -> Result<Vec<T>> {
    check_input_size(height, width)?;
    let per = INPUT_CHANNELS * height * width;
    if batch.len() != n * per {
        return Err(Error::Shape(format!(
            "batch has {} values, expected {n}x4x{height}x{width}",
            batch.len()
        )));
    }
    Ok(batch
        .chunks_exact(per)
        .map(|input| forward_sample(params, input, height, width).0)
        .collect())
}

/// Gradient of `Σ_i upstream[i] · pred_i` with respect to every parameter.
/// Samples are accumulated in batch order.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    upstream: &[T],
) -> Result<ModelParams<T>> {
    if upstream.len() != trace.samples.len() {
        return Err(Error::Shape(format!(
            "trace holds {} samples but {} upstream gradients were given",
            trace.samples.len(),
            upstream.len()
        )));
    }
    let (h, w) = (trace.height, trace.width);
    let [c1, c2, c3] = WIDTHS;
    let (h2, w2) = (h / 2, w / 2);
    let (h3, w3) = (h2 / 2, w2 / 2);
    if let Some(s) = trace.samples.first() {
        if s.z1.len() != c1 * h * w || s.z3.len() != c3 * h3 * w3 || s.pooled.len() != c3 {
            return Err(Error::Shape("trace does not match the architecture".into()));
        }
    }

    let mut grads = ModelParams::<T>::zeros();
    let head_w = params.data(HEAD_W);
    let n3 = cast::<T>((h3 * w3) as f64);
    for (s, &u) in trace.samples.iter().zip(upstream) {
        if u == T::zero() {
            continue;
        }
        grads.tensors[HEAD_B].data[0] += u;
        for (gw, p) in grads.tensors[HEAD_W].data.iter_mut().zip(&s.pooled) {
            *gw += u * *p;
        }

        let mut dz3 = vec![T::zero(); c3 * h3 * w3];
        for k in 0..c3 {
            let dg = u * head_w[k] / n3;
            for i in 0..h3 * w3 {
                if s.z3[k * h3 * w3 + i] > T::zero() {
                    dz3[k * h3 * w3 + i] = dg;
                }
            }
        }

        let (lo, hi) = grads.tensors.split_at_mut(CONV3_B);
        let dp2 = conv3x3_backward(
            &s.p2,
            c2,
            h3,
            w3,
            params.data(CONV3_W),
            c3,
            &dz3,
            &mut lo[CONV3_W].data,
            &mut hi[0].data,
            true,
        )
        .unwrap();
        let dz2 = relu_maxpool_backward(&s.z2, &s.arg2, &dp2, c2, h2, w2);

        let (lo, hi) = grads.tensors.split_at_mut(CONV2_B);
        let dp1 = conv3x3_backward(
            &s.p1,
            c1,
            h2,
            w2,
            params.data(CONV2_W),
            c2,
            &dz2,
            &mut lo[CONV2_W].data,
            &mut hi[0].data,
            true,
        )
        .unwrap();
        let dz1 = relu_maxpool_backward(&s.z1, &s.arg1, &dp1, c1, h, w);

        let (lo, hi) = grads.tensors.split_at_mut(CONV1_B);
        conv3x3_backward(
            &s.input,
            INPUT_CHANNELS,
            h,
            w,
            params.data(CONV1_W),
            c1,
            &dz1,
            &mut lo[CONV1_W].data,
            &mut hi[0].data,
            false,
        );
    }
    Ok(grads)
}
