//! Pointer-style policy with reward and cost critics on a shared SELU trunk.
//!
//! Parameters live in one flat vector so the optimizer, clipping, gradient
//! checks and checkpoints treat them uniformly. The `f64` net trains; the
//! quantized twin runs evaluation-mode inference bit-exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::fixed::{math, FixedPoint};

pub const HIDDEN: usize = 128;
pub const EMBED: usize = 32;
/// Per-candidate feature width.
pub const FEATURES: usize = 6;
/// Initial bias of the STOP logit.
pub const STOP_BIAS: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Seg {
    W1,
    B1,
    W2,
    B2,
    Wr,
    Br,
    Wc,
    Bc,
    Wq,
    Bq,
    We,
    Be,
    Wg,
    Ws,
    Bs,
}

const SEGS: [Seg; 15] = [
    Seg::W1,
    Seg::B1,
    Seg::W2,
    Seg::B2,
    Seg::Wr,
    Seg::Br,
    Seg::Wc,
    Seg::Bc,
    Seg::Wq,
    Seg::Bq,
    Seg::We,
    Seg::Be,
    Seg::Wg,
    Seg::Ws,
    Seg::Bs,
];

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub state_dim: usize,
    offsets: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn new(state_dim: usize) -> Self {
        let mut offsets = Vec::with_capacity(SEGS.len());
        let mut at = 0;
        for s in SEGS {
            offsets.push(at);
            at += Self::shape_of(state_dim, s).0 * Self::shape_of(state_dim, s).1;
        }
        Self { state_dim, offsets, len: at }
    }

    fn shape_of(d: usize, s: Seg) -> (usize, usize) {
        match s {
            Seg::W1 => (HIDDEN, d),
            Seg::W2 => (HIDDEN, HIDDEN),
            Seg::B1 | Seg::B2 | Seg::Wr | Seg::Wc | Seg::Ws => (HIDDEN, 1),
            Seg::Br | Seg::Bc | Seg::Bs => (1, 1),
            Seg::Wq => (EMBED, HIDDEN),
            Seg::Bq | Seg::Be => (EMBED, 1),
            Seg::We => (EMBED, FEATURES),
            Seg::Wg => (EMBED, EMBED),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn range(&self, s: Seg) -> std::ops::Range<usize> {
        let i = SEGS.iter().position(|x| *x == s).expect("segment");
        let (r, c) = Self::shape_of(self.state_dim, s);
        self.offsets[i]..self.offsets[i] + r * c
    }

    fn mat<'a>(&self, theta: &'a [f64], s: Seg) -> ArrayView2<'a, f64> {
        let shape = Self::shape_of(self.state_dim, s);
        ArrayView2::from_shape(shape, &theta[self.range(s)]).expect("shape")
    }

    fn vec<'a>(&self, theta: &'a [f64], s: Seg) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.range(s)])
    }

    fn mat_mut<'a>(&self, g: &'a mut [f64], s: Seg) -> ArrayViewMut2<'a, f64> {
        let shape = Self::shape_of(self.state_dim, s);
        let r = self.range(s);
        ArrayViewMut2::from_shape(shape, &mut g[r]).expect("shape")
    }

    fn vec_mut<'a>(&self, g: &'a mut [f64], s: Seg) -> ArrayViewMut1<'a, f64> {
        let r = self.range(s);
        ArrayViewMut1::from(&mut g[r])
    }

    fn scalar(&self, theta: &[f64], s: Seg) -> f64 {
        theta[self.range(s).start]
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        math::SELU_LAMBDA * x
    } else {
        math::SELU_LAMBDA * math::SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        math::SELU_LAMBDA
    } else {
        math::SELU_LAMBDA * math::SELU_ALPHA * x.exp()
    }
}

/// Inputs of one decision: state vector, candidate features and activity priors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolicyInput {
    pub state: Vec<f64>,
    /// `n x FEATURES`, row-major.
    pub features: Vec<f64>,
    pub prior: Vec<f64>,
}

impl PolicyInput {
    pub fn num_candidates(&self) -> usize {
        self.prior.len()
    }

    fn phi(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.prior.len(), FEATURES), &self.features).expect("feature shape")
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    p1: Array1<f64>,
    h1: Array1<f64>,
    p2: Array1<f64>,
    z: Array1<f64>,
    q: Array1<f64>,
    e: Array2<f64>,
    a: Array1<f64>,
    g: Array1<f64>,
    q2: Array1<f64>,
    pub logits: Vec<f64>,
    pub stop: f64,
    pub value: f64,
    pub cost_value: f64,
}

/// Upstream gradients of a scalar loss with respect to the network outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub logits: Vec<f64>,
    pub stop: f64,
    pub value: f64,
    pub cost_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub layout: Layout,
    pub theta: Vec<f64>,
}

fn inv_sqrt_embed() -> f64 {
    1.0 / (EMBED as f64).sqrt()
}

impl PolicyNet {
    /// LeCun-normal weights (the SELU self-normalizing init), zero biases.
    pub fn init(state_dim: usize, seed: u64) -> Self {
        let layout = Layout::new(state_dim);
        let mut theta = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in SEGS {
            let (r, c) = Layout::shape_of(state_dim, s);
            let fan_in = match s {
                Seg::W1 | Seg::W2 | Seg::Wq | Seg::We | Seg::Wg => c,
                Seg::Wr | Seg::Wc | Seg::Ws => HIDDEN,
                _ => continue,
            };
            let scale = match s {
                Seg::Wr | Seg::Wc | Seg::Ws => 0.1,
                _ => 1.0,
            };
            let normal = Normal::new(0.0, scale / (fan_in as f64).sqrt()).expect("finite std");
            let range = layout.range(s);
            debug_assert_eq!(range.len(), r * c);
            for v in &mut theta[range] {
                *v = normal.sample(&mut rng);
            }
        }
        let bs = layout.range(Seg::Bs).start;
        theta[bs] = STOP_BIAS;
        Self { layout, theta }
    }

    pub fn state_dim(&self) -> usize {
        self.layout.state_dim
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn forward(&self, x: &PolicyInput) -> Forward {
        let l = &self.layout;
        let t = &self.theta[..];
        let s = ArrayView1::from(&x.state);
        let p1 = l.mat(t, Seg::W1).dot(&s) + l.vec(t, Seg::B1);
        let h1 = p1.mapv(selu);
        let p2 = l.mat(t, Seg::W2).dot(&h1) + l.vec(t, Seg::B2);
        let z = p2.mapv(selu);
        let value = l.vec(t, Seg::Wr).dot(&z) + l.scalar(t, Seg::Br);
        let cost_value = l.vec(t, Seg::Wc).dot(&z) + l.scalar(t, Seg::Bc);
        let stop = l.vec(t, Seg::Ws).dot(&z) + l.scalar(t, Seg::Bs);
        let q = l.mat(t, Seg::Wq).dot(&z) + l.vec(t, Seg::Bq);
        let n = x.num_candidates();
        let k = inv_sqrt_embed();
        let (e, a, g, q2, logits) = if n == 0 {
            (Array2::zeros((0, EMBED)), Array1::zeros(0), Array1::zeros(EMBED), q.clone(), Vec::new())
        } else {
            let e = (x.phi().dot(&l.mat(t, Seg::We).t()) + l.vec(t, Seg::Be)).mapv(f64::tanh);
            let sc = e.dot(&q) * k;
            let mx = sc.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let ex = sc.mapv(|v| (v - mx).exp());
            let a = &ex / ex.sum();
            let g = e.t().dot(&a);
            let q2 = &q + &l.mat(t, Seg::Wg).dot(&g);
            let u = e.dot(&q2) * k;
            let logits = u.iter().zip(&x.prior).map(|(u, p)| u + p).collect();
            (e, a, g, q2, logits)
        };
        Forward { p1, h1, p2, z, q, e, a, g, q2, logits, stop, value, cost_value }
    }

    /// Accumulates parameter gradients of a loss into `grad`.
    pub fn backward(&self, x: &PolicyInput, f: &Forward, d: &OutputGrads, grad: &mut [f64]) {
        let l = &self.layout;
        let t = &self.theta[..];
        let k = inv_sqrt_embed();
        let mut dz = l.vec(t, Seg::Ws).to_owned() * d.stop;
        dz.scaled_add(d.value, &l.vec(t, Seg::Wr));
        dz.scaled_add(d.cost_value, &l.vec(t, Seg::Wc));
        l.vec_mut(grad, Seg::Ws).scaled_add(d.stop, &f.z);
        grad[l.range(Seg::Bs).start] += d.stop;
        l.vec_mut(grad, Seg::Wr).scaled_add(d.value, &f.z);
        grad[l.range(Seg::Br).start] += d.value;
        l.vec_mut(grad, Seg::Wc).scaled_add(d.cost_value, &f.z);
        grad[l.range(Seg::Bc).start] += d.cost_value;

        let n = x.num_candidates();
        let mut dq = Array1::<f64>::zeros(EMBED);
        if n > 0 {
            let du = ArrayView1::from(&d.logits);
            // u_j = k q2 . e_j
            let dq2 = f.e.t().dot(&du) * k;
            let mut de = Array2::<f64>::zeros((n, EMBED));
            for j in 0..n {
                de.row_mut(j).scaled_add(du[j] * k, &f.q2);
            }
            // q2 = q + Wg g
            dq += &dq2;
            {
                let mut gw = l.mat_mut(grad, Seg::Wg);
                for r in 0..EMBED {
                    gw.row_mut(r).scaled_add(dq2[r], &f.g);
                }
            }
            let dg = l.mat(t, Seg::Wg).t().dot(&dq2);
            // g = sum_j a_j e_j ; a = softmax(k e q)
            let da = f.e.dot(&dg);
            let dot = f.a.dot(&da);
            let ds = &f.a * &(da - dot);
            for j in 0..n {
                de.row_mut(j).scaled_add(f.a[j], &dg);
                de.row_mut(j).scaled_add(ds[j] * k, &f.q);
            }
            dq += &(f.e.t().dot(&ds) * k);
            // e = tanh(We phi + be)
            let dpre = &de * &f.e.mapv(|v| 1.0 - v * v);
            let phi = x.phi();
            {
                let mut gw = l.mat_mut(grad, Seg::We);
                gw += &dpre.t().dot(&phi);
            }
            l.vec_mut(grad, Seg::Be).scaled_add(1.0, &dpre.sum_axis(ndarray::Axis(0)));
        }
        {
            let mut gw = l.mat_mut(grad, Seg::Wq);
            for r in 0..EMBED {
                gw.row_mut(r).scaled_add(dq[r], &f.z);
            }
        }
        l.vec_mut(grad, Seg::Bq).scaled_add(1.0, &dq);
        dz += &l.mat(t, Seg::Wq).t().dot(&dq);

        let dp2 = &dz * &f.p2.mapv(selu_grad);
        {
            let mut gw = l.mat_mut(grad, Seg::W2);
            for r in 0..HIDDEN {
                gw.row_mut(r).scaled_add(dp2[r], &f.h1);
            }
        }
        l.vec_mut(grad, Seg::B2).scaled_add(1.0, &dp2);
        let dh1 = l.mat(t, Seg::W2).t().dot(&dp2);
        let dp1 = &dh1 * &f.p1.mapv(selu_grad);
        let s = ArrayView1::from(&x.state);
        {
            let mut gw = l.mat_mut(grad, Seg::W1);
            for r in 0..HIDDEN {
                gw.row_mut(r).scaled_add(dp1[r], &s);
            }
        }
        l.vec_mut(grad, Seg::B1).scaled_add(1.0, &dp1);
    }

    pub fn quantize(&self) -> QuantPolicy {
        QuantPolicy {
            layout: self.layout.clone(),
            theta: self.theta.iter().map(|v| FixedPoint::from_f64(*v)).collect(),
        }
    }

    pub fn from_quantized(q: &QuantPolicy) -> Self {
        Self { layout: q.layout.clone(), theta: q.theta.iter().map(|v| v.to_f64()).collect() }
    }
}

/// Fixed-point twin of [`PolicyNet`] used for evaluation-mode decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantPolicy {
    pub layout: Layout,
    pub theta: Vec<FixedPoint>,
}

/// Quantized decision inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantInput {
    pub state: Vec<FixedPoint>,
    pub features: Vec<FixedPoint>,
    pub prior: Vec<FixedPoint>,
}

impl QuantInput {
    pub fn to_f64(&self) -> PolicyInput {
        let c = |v: &[FixedPoint]| v.iter().map(|x| x.to_f64()).collect();
        PolicyInput { state: c(&self.state), features: c(&self.features), prior: c(&self.prior) }
    }
}

impl QuantPolicy {
    fn seg(&self, s: Seg) -> &[FixedPoint] {
        &self.theta[self.layout.range(s)]
    }

    fn affine(&self, w: Seg, b: Option<Seg>, x: &[FixedPoint]) -> Vec<FixedPoint> {
        let (rows, cols) = Layout::shape_of(self.layout.state_dim, w);
        debug_assert_eq!(cols, x.len());
        let wm = self.seg(w);
        (0..rows)
            .map(|r| {
                let bias = b.map_or(FixedPoint::ZERO, |b| self.seg(b)[r]);
                FixedPoint::affine(bias, &wm[r * cols..(r + 1) * cols], x)
            })
            .collect()
    }

    /// Candidate logits and the STOP logit.
    pub fn logits(&self, x: &QuantInput) -> (Vec<FixedPoint>, FixedPoint) {
        let h1: Vec<FixedPoint> = self.affine(Seg::W1, Some(Seg::B1), &x.state).into_iter().map(math::selu).collect();
        let z: Vec<FixedPoint> = self.affine(Seg::W2, Some(Seg::B2), &h1).into_iter().map(math::selu).collect();
        let stop = FixedPoint::affine(self.seg(Seg::Bs)[0], self.seg(Seg::Ws), &z);
        let n = x.prior.len();
        if n == 0 {
            return (Vec::new(), stop);
        }
        let q = self.affine(Seg::Wq, Some(Seg::Bq), &z);
        let k = FixedPoint::from_f64(inv_sqrt_embed());
        let e: Vec<Vec<FixedPoint>> = (0..n)
            .map(|j| {
                self.affine(Seg::We, Some(Seg::Be), &x.features[j * FEATURES..(j + 1) * FEATURES])
                    .into_iter()
                    .map(math::tanh)
                    .collect()
            })
            .collect();
        let sc: Vec<FixedPoint> = e.iter().map(|ej| FixedPoint::dot(ej, &q) * k).collect();
        let mx = *sc.iter().max().expect("nonempty");
        let ex: Vec<FixedPoint> = sc.iter().map(|v| math::exp_nonpositive(*v - mx)).collect();
        let total: FixedPoint = ex.iter().copied().sum();
        let a: Vec<FixedPoint> = ex.iter().map(|v| v.saturating_div(total)).collect();
        let g: Vec<FixedPoint> = (0..EMBED)
            .map(|i| {
                let col: Vec<FixedPoint> = e.iter().map(|ej| ej[i]).collect();
                FixedPoint::dot(&a, &col)
            })
            .collect();
        let wg = self.affine(Seg::Wg, None, &g);
        let q2: Vec<FixedPoint> = q.iter().zip(&wg).map(|(a, b)| *a + *b).collect();
        let logits = e.iter().zip(&x.prior).map(|(ej, p)| FixedPoint::dot(ej, &q2) * k + *p).collect();
        (logits, stop)
    }
}
