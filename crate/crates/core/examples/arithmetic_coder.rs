//! Codes a stream of quantized Gaussian samples with the range coder, using
//! discretized Gaussian tables, and compares the size with the ideal cost.
//!
//! cargo run --release --example arithmetic_coder

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use convdraw::codec::{bin_pmf, quantize_latent, Pmf, RangeDecoder, RangeEncoder};

fn main() -> convdraw::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (delta, k_min, k_max) = (0.5, -40, 40);
    let mut enc = RangeEncoder::new();
    let mut ideal = 0.0;
    let mut sent = Vec::new();
    for _ in 0..20_000 {
        let (mu, sigma) = (rng.gen_range(-3.0..3.0), rng.gen_range(0.2..3.0));
        let x = Normal::new(mu, sigma).unwrap().sample(&mut rng);
        let (k, _) = quantize_latent(x, delta, k_min, k_max);
        let pmf = Pmf::from_freqs(&bin_pmf(mu, sigma, delta, k_min, k_max)?)?;
        let s = (k - k_min) as usize;
        ideal += pmf.cost_bits(s);
        enc.encode(&pmf, s)?;
        sent.push((mu, sigma, s));
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes)?;
    for (i, &(mu, sigma, s)) in sent.iter().enumerate() {
        let pmf = Pmf::from_freqs(&bin_pmf(mu, sigma, delta, k_min, k_max)?)?;
        assert_eq!(dec.decode(&pmf)?, s, "symbol {i}");
    }
    println!(
        "{} symbols: {} bits coded, {:.1} bits ideal, overhead {:.2} bits",
        sent.len(),
        bytes.len() * 8,
        ideal,
        bytes.len() as f64 * 8.0 - ideal
    );
    Ok(())
}
