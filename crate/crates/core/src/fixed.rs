//! Q47.16 fixed-point numbers.
//!
//! Every arithmetic operation saturates at the representable range and counts
//! the event in a per-thread saturation counter (see [`saturation_count`]).
//! Multiplication and division round to nearest, ties to even. Nothing here
//! touches platform floating point except the explicit `from_f64` / `to_f64`
//! conversions, so identical operand sequences give identical raw values.

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

pub const FRAC_BITS: u32 = 16;
const ONE_RAW: i64 = 1 << FRAC_BITS;

thread_local! {
    static SATURATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of saturating operations performed on this thread so far.
pub fn saturation_count() -> u64 {
    SATURATIONS.with(|c| c.get())
}

/// Returns the saturation count and resets it to zero.
pub fn take_saturations() -> u64 {
    SATURATIONS.with(|c| c.replace(0))
}

fn report_saturation() {
    SATURATIONS.with(|c| c.set(c.get() + 1));
}

fn clamp_i128(v: i128) -> i64 {
    if v > i64::MAX as i128 {
        report_saturation();
        i64::MAX
    } else if v < i64::MIN as i128 {
        report_saturation();
        i64::MIN
    } else {
        v as i64
    }
}

/// Shift right by `FRAC_BITS` with round-half-to-even.
fn shift_rne(v: i128) -> i128 {
    let q = v >> FRAC_BITS;
    let rem = v - (q << FRAC_BITS);
    let half = 1i128 << (FRAC_BITS - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Integer division with round-half-to-even. `den` must be non-zero.
fn div_rne(num: i128, den: i128) -> i128 {
    let negative = (num < 0) != (den < 0);
    let (n, d) = (num.unsigned_abs(), den.unsigned_abs());
    let mut q = n / d;
    let r = n % d;
    let twice = r * 2;
    if twice > d || (twice == d && q & 1 == 1) {
        q += 1;
    }
    let q = q as i128;
    if negative {
        -q
    } else {
        q
    }
}

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedPoint(i64);

impl FixedPoint {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(ONE_RAW);
    pub const MAX: Self = Self(i64::MAX);
    pub const MIN: Self = Self(i64::MIN);
    /// One unit in the last place.
    pub const ULP: Self = Self(1);

    pub const fn from_raw(raw: i64) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub fn from_int(v: i64) -> Self {
        Self(clamp_i128((v as i128) << FRAC_BITS))
    }

    /// Converts with round-half-to-even; NaN maps to zero and counts as a saturation.
    pub fn from_f64(v: f64) -> Self {
        if v.is_nan() {
            report_saturation();
            return Self::ZERO;
        }
        let scaled = (v * ONE_RAW as f64).round_ties_even();
        if scaled >= i64::MAX as f64 {
            report_saturation();
            Self::MAX
        } else if scaled <= i64::MIN as f64 {
            report_saturation();
            Self::MIN
        } else {
            Self(scaled as i64)
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / ONE_RAW as f64
    }

    /// `num / den` rounded to nearest even.
    pub fn from_ratio(num: i64, den: i64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        Some(Self(clamp_i128(div_rne((num as i128) << FRAC_BITS, den as i128))))
    }

    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        self.0.checked_add(rhs.0).map(Self)
    }

    pub fn checked_sub(self, rhs: Self) -> Option<Self> {
        self.0.checked_sub(rhs.0).map(Self)
    }

    pub fn checked_mul(self, rhs: Self) -> Option<Self> {
        let v = shift_rne(self.0 as i128 * rhs.0 as i128);
        i64::try_from(v).ok().map(Self)
    }

    pub fn checked_div(self, rhs: Self) -> Option<Self> {
        if rhs.0 == 0 {
            return None;
        }
        let v = div_rne((self.0 as i128) << FRAC_BITS, rhs.0 as i128);
        i64::try_from(v).ok().map(Self)
    }

    /// Saturating division; division by zero saturates toward the sign of the dividend.
    pub fn saturating_div(self, rhs: Self) -> Self {
        if rhs.0 == 0 {
            report_saturation();
            return if self.0 >= 0 { Self::MAX } else { Self::MIN };
        }
        Self(clamp_i128(div_rne((self.0 as i128) << FRAC_BITS, rhs.0 as i128)))
    }

    pub fn abs(self) -> Self {
        if self.0 == i64::MIN {
            report_saturation();
            Self::MAX
        } else {
            Self(self.0.abs())
        }
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Square root of a non-negative value, rounded to nearest. Negative input yields zero.
    pub fn sqrt(self) -> Self {
        if self.0 <= 0 {
            return Self::ZERO;
        }
        let n = (self.0 as u128) << FRAC_BITS;
        let mut x = n.isqrt();
        // round to nearest: compare n with (x + 1/2)^2 = x^2 + x + 1/4
        if n > x * x + x {
            x += 1;
        }
        Self(x as i64)
    }

    /// Dot product accumulated exactly in 128 bits and rounded once.
    pub fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let acc: i128 = a.iter().zip(b).map(|(x, y)| x.0 as i128 * y.0 as i128).sum();
        Self(clamp_i128(shift_rne(acc)))
    }

    /// Rounds an exact accumulator of raw products (scale 2^-32) back to Q47.16.
    pub fn from_product_sum(acc: i128) -> Self {
        Self(clamp_i128(shift_rne(acc)))
    }

    /// `bias + Σ a_i b_i`, accumulated exactly and rounded once.
    pub fn affine(bias: Self, a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let acc: i128 = a.iter().zip(b).map(|(x, y)| x.0 as i128 * y.0 as i128).sum::<i128>()
            + ((bias.0 as i128) << FRAC_BITS);
        Self(clamp_i128(shift_rne(acc)))
    }
}

impl Add for FixedPoint {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self(clamp_i128(self.0 as i128 + rhs.0 as i128))
    }
}

impl Sub for FixedPoint {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self(clamp_i128(self.0 as i128 - rhs.0 as i128))
    }
}

impl Mul for FixedPoint {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self(clamp_i128(shift_rne(self.0 as i128 * rhs.0 as i128)))
    }
}

impl Div for FixedPoint {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self.saturating_div(rhs)
    }
}

impl Neg for FixedPoint {
    type Output = Self;
    fn neg(self) -> Self {
        Self(clamp_i128(-(self.0 as i128)))
    }
}

impl AddAssign for FixedPoint {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for FixedPoint {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl Sum for FixedPoint {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

impl fmt::Debug for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fx({})", self.to_f64())
    }
}

impl fmt::Display for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl From<i64> for FixedPoint {
    fn from(v: i64) -> Self {
        Self::from_int(v)
    }
}

/// Lookup-table transcendental functions on fixed-point values.
///
/// Tables are built from [`portable_exp`], which uses only IEEE-754 basic
/// operations (correctly rounded everywhere), so the tables are bit-identical
/// on every conforming platform.
pub mod math {
    use std::sync::OnceLock;

    use super::FixedPoint;

    /// Table resolution: 2^-8 in the argument.
    const STEP_BITS: u32 = 8;
    const TANH_RANGE: i64 = 8;
    const EXP_RANGE: i64 = 16;

    /// `e^x` from range reduction and a fixed-length Taylor series.
    pub fn portable_exp(x: f64) -> f64 {
        const LN2: f64 = std::f64::consts::LN_2;
        if x < -700.0 {
            return 0.0;
        }
        let k = (x / LN2).round_ties_even();
        let r = x - k * LN2;
        let mut term = 1.0;
        let mut sum = 1.0;
        for i in 1..=24 {
            term = term * r / i as f64;
            sum += term;
        }
        let mut scale = 1.0;
        let (base, n) = if k >= 0.0 { (2.0, k as i64) } else { (0.5, -k as i64) };
        for _ in 0..n {
            scale *= base;
        }
        sum * scale
    }

    /// `(sin x, cos x)` from range reduction and Taylor series; basic IEEE ops only.
    pub fn portable_sin_cos(x: f64) -> (f64, f64) {
        const TWO_PI: f64 = std::f64::consts::TAU;
        let k = (x / TWO_PI).round_ties_even();
        let r = x - k * TWO_PI;
        let r2 = r * r;
        let (mut s, mut c) = (0.0, 0.0);
        let (mut ts, mut tc) = (r, 1.0);
        for i in 0..24 {
            s += ts;
            c += tc;
            let n = (2 * i + 2) as f64;
            ts = -ts * r2 / (n * (n + 1.0));
            tc = -tc * r2 / ((n - 1.0) * n);
        }
        (s, c)
    }

    fn portable_tanh(x: f64) -> f64 {
        let e2 = portable_exp(-2.0 * x.abs());
        let t = (1.0 - e2) / (1.0 + e2);
        if x < 0.0 {
            -t
        } else {
            t
        }
    }

    struct Tables {
        tanh: Vec<i64>,
        exp_neg: Vec<i64>,
    }

    fn tables() -> &'static Tables {
        static TABLES: OnceLock<Tables> = OnceLock::new();
        TABLES.get_or_init(|| {
            let per_unit = 1i64 << STEP_BITS;
            let tanh = (-TANH_RANGE * per_unit..=TANH_RANGE * per_unit)
                .map(|i| FixedPoint::from_f64(portable_tanh(i as f64 / per_unit as f64)).raw())
                .collect();
            let exp_neg = (0..=EXP_RANGE * per_unit)
                .map(|i| FixedPoint::from_f64(portable_exp(-(i as f64) / per_unit as f64)).raw())
                .collect();
            Tables { tanh, exp_neg }
        })
    }

    /// Linear interpolation into `table`, whose entry `i` sits at
    /// argument offset `i * 2^-STEP_BITS`. `offset_raw` is a Q16 offset >= 0.
    fn interp(table: &[i64], offset_raw: i64) -> i64 {
        let frac_bits = super::FRAC_BITS - STEP_BITS;
        let idx = (offset_raw >> frac_bits) as usize;
        if idx + 1 >= table.len() {
            return table[table.len() - 1];
        }
        let frac = offset_raw & ((1 << frac_bits) - 1);
        let (a, b) = (table[idx] as i128, table[idx + 1] as i128);
        let delta = (b - a) * frac as i128;
        // rounding shift by frac_bits, ties to even
        let q = delta >> frac_bits;
        let rem = delta - (q << frac_bits);
        let half = 1i128 << (frac_bits - 1);
        let q = if rem > half || (rem == half && q & 1 == 1) { q + 1 } else { q };
        (a + q) as i64
    }

    pub fn tanh(x: FixedPoint) -> FixedPoint {
        let lo = -TANH_RANGE << super::FRAC_BITS;
        let hi = TANH_RANGE << super::FRAC_BITS;
        let t = tables();
        if x.raw() <= lo {
            return FixedPoint::from_raw(t.tanh[0]);
        }
        if x.raw() >= hi {
            return FixedPoint::from_raw(t.tanh[t.tanh.len() - 1]);
        }
        FixedPoint::from_raw(interp(&t.tanh, x.raw() - lo))
    }

    /// Logistic function via `(1 + tanh(x/2)) / 2`.
    pub fn sigmoid(x: FixedPoint) -> FixedPoint {
        let half_x = FixedPoint::from_raw(x.raw() >> 1);
        let t = tanh(half_x);
        FixedPoint::from_raw((FixedPoint::ONE + t).raw() >> 1)
    }

    /// `e^x` for `x <= 0`; positive arguments are clamped to zero (result 1).
    pub fn exp_nonpositive(x: FixedPoint) -> FixedPoint {
        let t = tables();
        let off = (-x.raw()).max(0);
        if off >= EXP_RANGE << super::FRAC_BITS {
            return FixedPoint::ZERO;
        }
        FixedPoint::from_raw(interp(&t.exp_neg, off))
    }

    pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
    pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

    pub fn selu(x: FixedPoint) -> FixedPoint {
        let lambda = FixedPoint::from_f64(SELU_LAMBDA);
        if x.raw() > 0 {
            lambda * x
        } else {
            let la = FixedPoint::from_f64(SELU_LAMBDA * SELU_ALPHA);
            la * (exp_nonpositive(x) - FixedPoint::ONE)
        }
    }
}
