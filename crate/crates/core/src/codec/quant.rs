use crate::codec::coder::TOTAL;
use crate::error::{Error, Result};
use crate::nn::normal_cdf;

/// Largest alphabet a channel may use.
pub const MAX_SYMBOLS: usize = 4096;

/// Fixed quantization grid for the latents of one layer: bin width and
/// symbol bounds per latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrid {
    pub delta: Vec<f64>,
    pub k_min: Vec<i32>,
    pub k_max: Vec<i32>,
}

impl QuantGrid {
    pub fn channels(&self) -> usize {
        self.delta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.delta.len();
        if self.k_min.len() != n || self.k_max.len() != n {
            return Err(Error::Format(
                "quantization grid arrays differ in length".into(),
            ));
        }
        for c in 0..n {
            if !(self.delta[c] > 0.0) || !self.delta[c].is_finite() {
                return Err(Error::Format(format!(
                    "channel {c}: bin width {} is not positive",
                    self.delta[c]
                )));
            }
            let size = self.k_max[c] as i64 - self.k_min[c] as i64 + 1;
            if size < 1 || size as usize > MAX_SYMBOLS {
                return Err(Error::Format(format!(
                    "channel {c}: symbol range [{}, {}] is empty or too large",
                    self.k_min[c], self.k_max[c]
                )));
            }
        }
        Ok(())
    }

    pub fn symbols(&self, c: usize) -> usize {
        (self.k_max[c] - self.k_min[c] + 1) as usize
    }
}

/// `k = round(mu / delta)` clamped to `[k_min, k_max]`; the flag reports
/// whether clamping moved it.
pub fn quantize_latent(mu: f64, delta: f64, k_min: i32, k_max: i32) -> (i32, bool) {
    let raw = (mu / delta).round();
    let k = raw.clamp(k_min as f64, k_max as f64) as i32;
    (k, k as f64 != raw)
}

pub fn dequantize_latent(k: i32, delta: f64) -> f64 {
    k as f64 * delta
}

/// `P(lo < Z <= hi)` for `Z ~ N(mu, sigma^2)`, evaluated on the side of the
/// mean that avoids cancellation.
fn interval_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    }
}

/// Integer frequencies (summing to 2^16, each at least 1) for the symbols
/// `k_min..=k_max` under `N(mu, sigma^2)` integrated over bins of width
/// `delta` centred on `k * delta`. Tail mass goes to the edge bins; rounding
/// uses the largest-remainder rule.
pub fn bin_pmf(mu: f64, sigma: f64, delta: f64, k_min: i32, k_max: i32) -> Result<Vec<u32>> {
    if !(sigma > 0.0) || !(delta > 0.0) || !mu.is_finite() {
        return Err(Error::Contract(format!(
            "bin_pmf: mu {mu}, sigma {sigma}, delta {delta}"
        )));
    }
    if k_max < k_min || (k_max - k_min) as usize >= MAX_SYMBOLS {
        return Err(Error::Contract(format!(
            "bin_pmf: bad symbol range [{k_min}, {k_max}]"
        )));
    }
    let n = (k_max - k_min + 1) as usize;
    let p: Vec<f64> = (k_min..=k_max)
        .map(|k| {
            let lo = if k == k_min {
                f64::NEG_INFINITY
            } else {
                (k as f64 - 0.5) * delta
            };
            let hi = if k == k_max {
                f64::INFINITY
            } else {
                (k as f64 + 0.5) * delta
            };
            interval_mass(lo, hi, mu, sigma).max(0.0)
        })
        .collect();
    let mass: f64 = p.iter().sum();
    let budget = TOTAL - n as u32;
    let mut freq = vec![1u32; n];
    let mut rem: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut used = 0u32;
    for (i, &pi) in p.iter().enumerate() {
        let share = if mass > 0.0 {
            pi / mass * budget as f64
        } else {
            budget as f64 / n as f64
        };
        let whole = (share.floor() as u32).min(budget);
        freq[i] += whole;
        used += whole;
        rem.push((share - whole as f64, i));
    }
    // largest fractional parts first, lower index breaks ties
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = budget.saturating_sub(used);
    for &(_, i) in rem.iter().cycle() {
        if left == 0 {
            break;
        }
        freq[i] += 1;
        left -= 1;
    }
    debug_assert_eq!(freq.iter().sum::<u32>(), TOTAL);
    Ok(freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_latent(0.0, 0.3, -10, 10), (0, false));
        assert_eq!(quantize_latent(1.4 * 0.3, 0.3, -10, 10).0, 1);
        assert_eq!(quantize_latent(100.0, 0.3, -10, 10), (10, true));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let delta = rng.gen_range(0.01..2.0);
            let mu = rng.gen_range(-50.0..50.0) * delta;
            let (k, clamped) = quantize_latent(mu, delta, -60, 60);
            assert!(!clamped);
            assert!((dequantize_latent(k, delta) - mu).abs() <= delta / 2.0 + 1e-12);
        }
    }

    #[test]
    fn tables_sum_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let mu = rng.gen_range(-5.0..5.0);
            let sigma = (rng.gen_range(-14.0f64..14.0) / 2.0).exp();
            let delta = rng.gen_range(0.05..1.5);
            let lo = rng.gen_range(-200..0);
            let hi = rng.gen_range(0..200);
            let f = bin_pmf(mu, sigma, delta, lo, hi).unwrap();
            assert_eq!(f.iter().sum::<u32>(), TOTAL);
            assert!(f.iter().all(|&v| v >= 1));
        }
    }

    #[test]
    fn symmetric_prior_symmetric_table() {
        let f = bin_pmf(0.0, 1.3, 0.4, -20, 20).unwrap();
        for k in 0..=20 {
            let (a, b) = (f[20 + k] as i64, f[20 - k] as i64);
            assert!((a - b).abs() <= 1, "k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn narrow_prior_concentrates_mass() {
        let sigma = (-7.0f64).exp();
        let f = bin_pmf(0.26, sigma, 0.5, -8, 8).unwrap();
        // nearest bin to 0.26 is k = 1
        assert_eq!(f[9], TOTAL - 16);
        assert!(f.iter().enumerate().all(|(i, &v)| i == 9 || v == 1));
    }

    #[test]
    fn matches_cdf_oracle() {
        let (mu, sigma, delta) = (0.3, 0.8, 0.5);
        let f = bin_pmf(mu, sigma, delta, -6, 6).unwrap();
        let n = f.len() as f64;
        for (i, k) in (-5..=5).enumerate() {
            let z = |e: f64| normal_cdf(((k as f64 + e) * delta - mu) / sigma);
            let exact = z(0.5) - z(-0.5);
            let approx = (f[i + 1] as f64 - 1.0) / (TOTAL as f64 - n);
            assert!((approx - exact).abs() < 2.0 / TOTAL as f64, "k={k}");
        }
    }
}
