//! Fixed-point LSTM inference.

use crate::fixed::{math, FixedPoint};

/// Quantized LSTM cell plus linear read-out. Gate rows are stacked
/// `[input, forget, cell, output]`; each row of `w` covers `[x; h]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    /// Dropout probability applied to `h` before the read-out.
    pub dropout: FixedPoint,
    pub(crate) w: Vec<FixedPoint>,
    pub(crate) b: Vec<FixedPoint>,
    pub(crate) w_out: Vec<FixedPoint>,
    pub(crate) b_out: Vec<FixedPoint>,
    max_w: i64,
    max_w_out: i64,
}

/// Recurrent state of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Vec<FixedPoint>,
    pub c: Vec<FixedPoint>,
}

impl LstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        dropout: FixedPoint,
        w: Vec<FixedPoint>,
        b: Vec<FixedPoint>,
        w_out: Vec<FixedPoint>,
        b_out: Vec<FixedPoint>,
    ) -> Self {
        assert_eq!(w.len(), 4 * hidden * (inputs + hidden));
        assert_eq!(b.len(), 4 * hidden);
        assert_eq!(w_out.len(), outputs * hidden);
        assert_eq!(b_out.len(), outputs);
        let max_w = Self::max_abs(&w);
        let max_w_out = Self::max_abs(&w_out);
        Self { inputs, hidden, outputs, dropout, w, b, w_out, b_out, max_w, max_w_out }
    }

    pub fn cols(&self) -> usize {
        self.inputs + self.hidden
    }

    pub fn zero_state(&self) -> CellState {
        CellState { h: vec![FixedPoint::ZERO; self.hidden], c: vec![FixedPoint::ZERO; self.hidden] }
    }

    /// Whether a product sum over `cols` terms bounded by the largest weight
    /// and `max_x` fits in an `i64` accumulator.
    fn fits_i64(max_w: i64, max_x: i64, cols: usize) -> bool {
        let bits = |v: i64| 64 - (v.unsigned_abs().max(1)).leading_zeros();
        let terms = 64 - (cols as u64 + 1).leading_zeros();
        bits(max_w) + bits(max_x) + terms < 62
    }

    fn row_sum(row: &[FixedPoint], x: &[FixedPoint], narrow: bool) -> i128 {
        if narrow {
            row.iter().zip(x).map(|(a, b)| a.raw() * b.raw()).sum::<i64>() as i128
        } else {
            row.iter().zip(x).map(|(a, b)| a.raw() as i128 * b.raw() as i128).sum()
        }
    }

    fn max_abs(v: &[FixedPoint]) -> i64 {
        v.iter().map(|x| x.raw().unsigned_abs().min(i64::MAX as u64) as i64).max().unwrap_or(0)
    }

    /// One recurrent step; exact accumulation, one rounding per gate pre-activation.
    pub fn step(&self, x: &[FixedPoint], state: &mut CellState) {
        debug_assert_eq!(x.len(), self.inputs);
        let hd = self.hidden;
        let cols = self.cols();
        let mut buf = Vec::with_capacity(cols);
        buf.extend_from_slice(x);
        buf.extend_from_slice(&state.h);
        let narrow = Self::fits_i64(self.max_w, Self::max_abs(&buf), cols);
        let mut z = Vec::with_capacity(4 * hd);
        for r in 0..4 * hd {
            let acc = Self::row_sum(&self.w[r * cols..(r + 1) * cols], &buf, narrow)
                + ((self.b[r].raw() as i128) << crate::fixed::FRAC_BITS);
            z.push(FixedPoint::from_product_sum(acc));
        }
        for j in 0..hd {
            let i = math::sigmoid(z[j]);
            let f = math::sigmoid(z[hd + j]);
            let g = math::tanh(z[2 * hd + j]);
            let o = math::sigmoid(z[3 * hd + j]);
            let c = f * state.c[j] + i * g;
            state.c[j] = c;
            state.h[j] = o * math::tanh(c);
        }
    }

    /// Linear read-out of `h ⊙ mask` (mask entries are 0 or the inverted-dropout scale).
    pub fn output(&self, h: &[FixedPoint], mask: Option<&[FixedPoint]>) -> Vec<FixedPoint> {
        let hm: Vec<FixedPoint> = match mask {
            Some(m) => h.iter().zip(m).map(|(a, b)| *a * *b).collect(),
            None => h.to_vec(),
        };
        let narrow = Self::fits_i64(self.max_w_out, Self::max_abs(&hm), self.hidden);
        (0..self.outputs)
            .map(|k| {
                let row = &self.w_out[k * self.hidden..(k + 1) * self.hidden];
                let acc = Self::row_sum(row, &hm, narrow)
                    + ((self.b_out[k].raw() as i128) << crate::fixed::FRAC_BITS);
                FixedPoint::from_product_sum(acc)
            })
            .collect()
    }

    /// True when every parameter is a non-saturated value.
    pub fn is_finite(&self) -> bool {
        [&self.w, &self.b, &self.w_out, &self.b_out]
            .iter()
            .all(|t| t.iter().all(|v| *v != FixedPoint::MAX && *v != FixedPoint::MIN))
    }
}
