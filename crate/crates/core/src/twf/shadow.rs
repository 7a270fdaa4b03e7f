//! `f64` shadow of the forecaster used for training and for checking the
//! fixed-point path. Batched teacher-forced forward pass and full BPTT.

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quant::LstmParams;
use crate::fixed::FixedPoint;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmF64 {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    /// `(4h, inputs + h)`, gate blocks `[i, f, g, o]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Gradients with the same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct LstmGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// One teacher-forced batch: `x (T, B, inputs)`, `y (T, B, outputs)`,
/// per-entry loss weights `weight (T, B, outputs)` (zero excludes an entry),
/// and dropout masks `mask (B, hidden)` already scaled by `1/(1-p)`.
pub struct Batch {
    pub x: Array3<f64>,
    pub y: Array3<f64>,
    pub weight: Array3<f64>,
    pub mask: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct StepCache {
    cat: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

impl LstmF64 {
    /// Uniform(-1/sqrt(h), 1/sqrt(h)) weights, forget-gate bias 1.
    pub fn init(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        let cols = inputs + hidden;
        let w = Array2::from_shape_fn((4 * hidden, cols), |_| rng.random_range(-bound..bound));
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        let w_out = Array2::from_shape_fn((outputs, hidden), |_| rng.random_range(-bound..bound));
        let b_out = Array1::zeros(outputs);
        Self { inputs, hidden, outputs, w, b, w_out, b_out }
    }

    pub fn zero_grads(&self) -> LstmGrads {
        LstmGrads {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len() + self.w_out.len() + self.b_out.len()
    }

    /// Flat view index -> mutable reference, in the order `w, b, w_out, b_out`.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        let tensors: [&mut [f64]; 4] = [
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ];
        for t in tensors {
            if idx < t.len() {
                return &mut t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn step(&self, x: &Array2<f64>, h: &Array2<f64>, c: &Array2<f64>) -> StepCache {
        let hd = self.hidden;
        let bsz = x.nrows();
        let mut cat = Array2::zeros((bsz, self.inputs + hd));
        cat.slice_mut(s![.., ..self.inputs]).assign(x);
        cat.slice_mut(s![.., self.inputs..]).assign(h);
        let z = cat.dot(&self.w.t()) + &self.b;
        let i = z.slice(s![.., ..hd]).mapv(sigmoid);
        let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
        let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
        let o = z.slice(s![.., 3 * hd..]).mapv(sigmoid);
        let c_new = &f * c + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        StepCache { cat, i, f, g, o, c_prev: c.clone(), tanh_c, h: h_new }
    }

    fn c_of(cache: &StepCache) -> Array2<f64> {
        &cache.f * &cache.c_prev + &cache.i * &cache.g
    }

    /// Predictions `(T, B, outputs)` for a teacher-forced batch.
    pub fn predict(&self, x: &Array3<f64>, mask: &Array2<f64>) -> Array3<f64> {
        let (t_len, bsz, _) = x.dim();
        let mut h = Array2::zeros((bsz, self.hidden));
        let mut c = Array2::zeros((bsz, self.hidden));
        let mut out = Array3::zeros((t_len, bsz, self.outputs));
        for t in 0..t_len {
            let cache = self.step(&x.index_axis(Axis(0), t).to_owned(), &h, &c);
            c = Self::c_of(&cache);
            h = cache.h;
            let y = (&h * mask).dot(&self.w_out.t()) + &self.b_out;
            out.index_axis_mut(Axis(0), t).assign(&y);
        }
        out
    }

    /// Weighted squared error normalized by the number of weighted entries.
    pub fn loss(&self, batch: &Batch) -> f64 {
        let pred = self.predict(&batch.x, &batch.mask);
        let n = batch.weight.iter().filter(|w| **w > 0.0).count().max(1) as f64;
        let mut acc = 0.0;
        Zip::from(&pred).and(&batch.y).and(&batch.weight).for_each(|p, y, w| acc += w * (p - y).powi(2));
        acc / n
    }

    /// Loss and gradients by backpropagation through time.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, LstmGrads) {
        let (t_len, bsz, _) = batch.x.dim();
        let hd = self.hidden;
        let n = batch.weight.iter().filter(|w| **w > 0.0).count().max(1) as f64;
        let mut h = Array2::zeros((bsz, hd));
        let mut c = Array2::zeros((bsz, hd));
        let mut caches = Vec::with_capacity(t_len);
        let mut dys = Vec::with_capacity(t_len);
        let mut loss = 0.0;
        for t in 0..t_len {
            let cache = self.step(&batch.x.index_axis(Axis(0), t).to_owned(), &h, &c);
            c = Self::c_of(&cache);
            h = cache.h.clone();
            let y = (&h * &batch.mask).dot(&self.w_out.t()) + &self.b_out;
            let yt = batch.y.index_axis(Axis(0), t);
            let wt = batch.weight.index_axis(Axis(0), t);
            let diff = &y - &yt;
            loss += (&diff * &diff * &wt).sum();
            dys.push(&diff * &wt * (2.0 / n));
            caches.push(cache);
        }
        let mut g = self.zero_grads();
        let mut dh_next = Array2::<f64>::zeros((bsz, hd));
        let mut dc_next = Array2::<f64>::zeros((bsz, hd));
        for t in (0..t_len).rev() {
            let cache = &caches[t];
            let dy = &dys[t];
            let hm = &cache.h * &batch.mask;
            g.w_out += &dy.t().dot(&hm);
            g.b_out += &dy.sum_axis(Axis(0));
            let dh = dy.dot(&self.w_out) * &batch.mask + &dh_next;
            let d_o = &dh * &cache.tanh_c;
            let dc = &dc_next + &(&dh * &cache.o * &cache.tanh_c.mapv(|v| 1.0 - v * v));
            let di = &dc * &cache.g;
            let dg = &dc * &cache.i;
            let df = &dc * &cache.c_prev;
            dc_next = &dc * &cache.f;
            let mut dz = Array2::zeros((bsz, 4 * hd));
            dz.slice_mut(s![.., ..hd]).assign(&(&di * &cache.i * &cache.i.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., hd..2 * hd]).assign(&(&df * &cache.f * &cache.f.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(&dg * &cache.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hd..]).assign(&(&d_o * &cache.o * &cache.o.mapv(|v| 1.0 - v)));
            g.w += &dz.t().dot(&cache.cat);
            g.b += &dz.sum_axis(Axis(0));
            let dcat = dz.dot(&self.w);
            dh_next = dcat.slice(s![.., self.inputs..]).to_owned();
        }
        (loss / n, g)
    }

    /// Quantizes every parameter with round-half-to-even.
    pub fn quantize(&self, dropout: f64) -> LstmParams {
        let q = |a: &[f64]| a.iter().map(|v| FixedPoint::from_f64(*v)).collect::<Vec<_>>();
        LstmParams::new(
            self.inputs,
            self.hidden,
            self.outputs,
            FixedPoint::from_f64(dropout),
            q(self.w.as_standard_layout().as_slice().expect("contiguous")),
            q(self.b.as_slice().expect("contiguous")),
            q(self.w_out.as_standard_layout().as_slice().expect("contiguous")),
            q(self.b_out.as_slice().expect("contiguous")),
        )
    }

    /// Exact `f64` image of quantized parameters.
    pub fn from_quantized(p: &LstmParams) -> Self {
        let f = |v: &[FixedPoint]| v.iter().map(|x| x.to_f64()).collect::<Vec<_>>();
        Self {
            inputs: p.inputs,
            hidden: p.hidden,
            outputs: p.outputs,
            w: Array2::from_shape_vec((4 * p.hidden, p.cols()), f(&p.w)).expect("shape"),
            b: Array1::from(f(&p.b)),
            w_out: Array2::from_shape_vec((p.outputs, p.hidden), f(&p.w_out)).expect("shape"),
            b_out: Array1::from(f(&p.b_out)),
        }
    }

    /// Single-sequence recurrent step on plain vectors (for shadow rollouts).
    pub fn step_vec(&self, x: &[f64], h: &mut Vec<f64>, c: &mut Vec<f64>) {
        let xa = Array2::from_shape_vec((1, self.inputs), x.to_vec()).expect("shape");
        let ha = Array2::from_shape_vec((1, self.hidden), h.clone()).expect("shape");
        let ca = Array2::from_shape_vec((1, self.hidden), c.clone()).expect("shape");
        let cache = self.step(&xa, &ha, &ca);
        *c = Self::c_of(&cache).into_raw_vec_and_offset().0;
        *h = cache.h.into_raw_vec_and_offset().0;
    }

    pub fn output_vec(&self, h: &[f64]) -> Vec<f64> {
        let ha = Array1::from(h.to_vec());
        (self.w_out.dot(&ha) + &self.b_out).to_vec()
    }
}

impl LstmGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.w
            .iter()
            .chain(self.b.iter())
            .chain(self.w_out.iter())
            .chain(self.b_out.iter())
            .copied()
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.w *= k;
        self.b *= k;
        self.w_out *= k;
        self.b_out *= k;
    }
}
