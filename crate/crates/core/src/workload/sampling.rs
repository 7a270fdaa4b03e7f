use rand::Rng;

use crate::fixed::math::portable_exp;

/// Fractional hour of day at `height`, cycling every `24 * blocks_per_hour` blocks.
pub fn hour_of(height: u64, blocks_per_hour: u32) -> f64 {
    let day = 24 * blocks_per_hour as u64;
    (height % day) as f64 / blocks_per_hour as f64
}

const CHUNK: f64 = 16.0;

/// Poisson draw built from Knuth's product-of-uniforms method on chunks of
/// the rate; the sum of independent Poisson variables is Poisson, so this is
/// exact for any rate and uses only basic floating-point operations.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let mut remaining = rate;
    let mut total = 0;
    while remaining > 0.0 {
        let lambda = remaining.min(CHUNK);
        remaining -= lambda;
        let limit = portable_exp(-lambda);
        let mut p: f64 = rng.random();
        while p > limit {
            total += 1;
            p *= rng.random::<f64>();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn poisson_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rate in [0.5, 7.0, 250.0] {
            let n = 4000;
            let xs: Vec<f64> = (0..n).map(|_| poisson(&mut rng, rate) as f64).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (rate / n as f64).sqrt();
            assert!((mean - rate).abs() < 5.0 * se, "rate {rate}: mean {mean}");
            assert!((var / rate - 1.0).abs() < 0.15, "rate {rate}: var {var}");
        }
        assert_eq!(poisson(&mut rng, 0.0), 0);
    }

    #[test]
    fn hours_wrap() {
        assert_eq!(hour_of(0, 10), 0.0);
        assert_eq!(hour_of(125, 10), 12.5);
        assert_eq!(hour_of(240, 10), 0.0);
    }
}
