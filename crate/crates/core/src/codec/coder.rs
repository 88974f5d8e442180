//! Integer range coder: 32-bit range, 16-bit frequencies, carry
//! propagation into already emitted bytes, byte-wise renormalisation.
//!
//! The encoder holds `low` in a `u64` so an addition can overflow into bit
//! 32; the carry is then pushed back through the output. The flush emits the
//! shortest byte string (zero or one byte) that, followed by implicit zero
//! bytes, lands inside the final interval. The decoder supplies those zero
//! bytes itself, up to four of them.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
/// Every frequency table sums to this.
pub const TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;
const MAX_VIRTUAL_BYTES: usize = 4;

/// A frequency table as cumulative counts: symbol `s` owns
/// `cum[s]..cum[s + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pmf {
    cum: Vec<u32>,
}

impl Pmf {
    /// `freqs` must be positive and sum to [`TOTAL`].
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u32;
        for (s, &f) in freqs.iter().enumerate() {
            if f == 0 {
                return Err(Error::Contract(format!("symbol {s} has zero frequency")));
            }
            acc = acc
                .checked_add(f)
                .filter(|&a| a <= TOTAL)
                .ok_or_else(|| Error::Contract(format!("frequencies exceed {TOTAL}")))?;
            cum.push(acc);
        }
        if acc != TOTAL {
            return Err(Error::Contract(format!(
                "frequencies sum to {acc}, not {TOTAL}"
            )));
        }
        Ok(Pmf { cum })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 || n > TOTAL as usize {
            return Err(Error::Contract(format!("uniform table over {n} symbols")));
        }
        let base = TOTAL / n as u32;
        let extra = (TOTAL % n as u32) as usize;
        let freqs: Vec<u32> = (0..n).map(|i| base + (i < extra) as u32).collect();
        Pmf::from_freqs(&freqs)
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Ideal code length of `s` in bits.
    pub fn cost_bits(&self, s: usize) -> f64 {
        PROB_BITS as f64 - (self.freq(s) as f64).log2()
    }

    fn lookup(&self, v: u32) -> usize {
        // last s with cum[s] <= v
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the start of the stream");
    }

    fn add_low(&mut self, v: u64) {
        self.low += v;
        if self.low >> 32 != 0 {
            self.carry();
            self.low &= 0xFFFF_FFFF;
        }
    }

    pub fn encode(&mut self, pmf: &Pmf, s: usize) -> Result<()> {
        if s >= pmf.len() {
            return Err(Error::Contract(format!(
                "symbol {s} outside a {}-symbol table",
                pmf.len()
            )));
        }
        let (lo, hi) = (pmf.cum[s], pmf.cum[s + 1]);
        let r = self.range >> PROB_BITS;
        self.add_low(r as u64 * lo as u64);
        self.range = if hi == TOTAL {
            self.range - r * lo
        } else {
            r * (hi - lo)
        };
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xFFFF_FFFF;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes written so far (excluding the pending flush byte).
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.low != 0 {
            // smallest multiple of 2^24 at or above low; range >= 2^24 keeps
            // it inside the interval
            let v = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
            if v >> 32 != 0 {
                self.carry();
            } else {
                self.out.push((v >> 24) as u8);
            }
        }
        self.out
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.buf.get(self.pos).copied();
        self.pos += 1;
        match b {
            Some(b) => Ok(b),
            None if self.pos <= self.buf.len() + MAX_VIRTUAL_BYTES => Ok(0),
            None => Err(Error::CorruptStream("payload exhausted".into())),
        }
    }

    pub fn decode(&mut self, pmf: &Pmf) -> Result<usize> {
        if self.code >= self.range {
            return Err(Error::CorruptStream(
                "code value outside the coding interval".into(),
            ));
        }
        let r = self.range >> PROB_BITS;
        let v = (self.code / r).min(TOTAL - 1);
        let s = pmf.lookup(v);
        let (lo, hi) = (pmf.cum[s], pmf.cum[s + 1]);
        self.code -= r * lo;
        self.range = if hi == TOTAL {
            self.range - r * lo
        } else {
            r * (hi - lo)
        };
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(s)
    }
}

/// Encodes `symbols`; `pmf_for(i, prefix)` returns the table for symbol `i`
/// given the symbols before it.
pub fn ac_encode(
    symbols: &[usize],
    mut pmf_for: impl FnMut(usize, &[usize]) -> Result<Pmf>,
) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let pmf = pmf_for(i, &symbols[..i])?;
        enc.encode(&pmf, s)?;
    }
    Ok(enc.finish())
}

pub fn ac_decode(
    bytes: &[u8],
    mut pmf_for: impl FnMut(usize, &[usize]) -> Result<Pmf>,
    count: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    let mut dec = RangeDecoder::new(bytes)?;
    for i in 0..count {
        let pmf = pmf_for(i, &out)?;
        out.push(dec.decode(&pmf)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ideal(symbols: &[usize], tables: &[Pmf]) -> f64 {
        symbols
            .iter()
            .zip(tables)
            .map(|(&s, p)| p.cost_bits(s))
            .sum()
    }

    fn random_pmf(rng: &mut impl Rng) -> Pmf {
        let n = rng.gen_range(1..=40);
        let mut w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3) + 1e-4).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        let mut f: Vec<u32> = w
            .iter()
            .map(|p| 1 + (p * (TOTAL - n as u32) as f64) as u32)
            .collect();
        let short = TOTAL - f.iter().sum::<u32>();
        f[0] += short;
        Pmf::from_freqs(&f).unwrap()
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        let pmf = Pmf::from_freqs(&[TOTAL]).unwrap();
        let bytes = ac_encode(&[0; 100], |_, _| Ok(pmf.clone())).unwrap();
        assert!(bytes.len() <= 4);
        assert_eq!(
            ac_decode(&bytes, |_, _| Ok(pmf.clone()), 100).unwrap(),
            vec![0; 100]
        );
    }

    #[test]
    fn fair_coins() {
        let pmf = Pmf::uniform(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
        let bytes = ac_encode(&syms, |_, _| Ok(pmf.clone())).unwrap();
        assert!(bytes.len() * 8 <= 1000 + 32);
        assert_eq!(
            ac_decode(&bytes, |_, _| Ok(pmf.clone()), 1000).unwrap(),
            syms
        );
    }

    #[test]
    fn abc_message() {
        let pmf = Pmf::from_freqs(&[TOTAL / 2, TOTAL / 4, TOTAL / 4]).unwrap();
        let bytes = ac_encode(&[0, 1, 2], |_, _| Ok(pmf.clone())).unwrap();
        assert_eq!(
            ideal(&[0, 1, 2], &[pmf.clone(), pmf.clone(), pmf.clone()]),
            5.0
        );
        assert!(bytes.len() * 8 <= 37);
        assert_eq!(
            ac_decode(&bytes, |_, _| Ok(pmf.clone()), 3).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn carries_through_ff_runs() {
        // a near-certain last symbol pushes low toward the top of the range
        let pmf = Pmf::from_freqs(&[1, TOTAL - 1]).unwrap();
        let syms = vec![1; 5000];
        let bytes = ac_encode(&syms, |_, _| Ok(pmf.clone())).unwrap();
        assert_eq!(
            ac_decode(&bytes, |_, _| Ok(pmf.clone()), syms.len()).unwrap(),
            syms
        );
    }

    #[test]
    fn empty_and_bad_input() {
        assert!(ac_encode(&[], |_, _| Pmf::uniform(3)).unwrap().is_empty());
        assert!(ac_decode(&[], |_, _| Pmf::uniform(3), 0)
            .unwrap()
            .is_empty());
        assert!(ac_encode(&[3], |_, _| Pmf::uniform(3)).is_err());
        assert!(Pmf::from_freqs(&[1, 2]).is_err());
        assert!(Pmf::from_freqs(&[0, TOTAL]).is_err());
    }

    #[test]
    fn truncation_is_an_error_not_a_panic() {
        let pmf = Pmf::uniform(256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let syms: Vec<usize> = (0..400).map(|_| rng.gen_range(0..256)).collect();
        let bytes = ac_encode(&syms, |_, _| Ok(pmf.clone())).unwrap();
        for cut in [0, 1, bytes.len() / 2, bytes.len() - 8] {
            let r = ac_decode(&bytes[..cut], |_, _| Ok(pmf.clone()), syms.len());
            assert!(matches!(r, Err(Error::CorruptStream(_))), "cut {cut}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn round_trip_within_bound(seed in any::<u64>(), len in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tables: Vec<Pmf> = (0..len).map(|_| random_pmf(&mut rng)).collect();
            let syms: Vec<usize> = tables.iter().map(|p| rng.gen_range(0..p.len())).collect();
            let bytes = ac_encode(&syms, |i, _| Ok(tables[i].clone())).unwrap();
            prop_assert!((bytes.len() * 8) as f64 <= ideal(&syms, &tables) + 32.0);
            prop_assert_eq!(ac_decode(&bytes, |i, _| Ok(tables[i].clone()), len).unwrap(), syms);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64), n in 0usize..200) {
            let _ = ac_decode(&bytes, |_, _| Pmf::uniform(7), n);
        }
    }
}
