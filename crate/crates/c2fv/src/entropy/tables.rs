//! Frozen integer CDF tables bridging learned densities to the range coder.
//!
//! Latent tables cover the symbol alphabet [-L, L] plus a final escape
//! entry; a symbol outside the range codes the escape entry followed by the
//! raw value as four uniform bytes. Gaussian tables are keyed by sigma bin
//! (means are handled by integer-shifting symbols), so the table set is
//! finite and model-independent; factorized tables are built per channel
//! from the frozen prior.

use crate::config::{CDF_TOTAL, SIGMA_BINS, SYMBOL_RANGE};
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::range::{RangeDecoder, RangeEncoder};
use crate::entropy::{gaussian_interval_prob, sigma_bin_center, sigma_bin_index};
use crate::Result;
use std::sync::OnceLock;

/// Alphabet size of a latent table: 2L+1 values plus escape.
pub const LATENT_SYMBOLS: usize = 2 * SYMBOL_RANGE as usize + 2;
/// Index of the escape entry.
pub const ESCAPE: usize = LATENT_SYMBOLS - 1;

/// A monotone cumulative table with total mass exactly 2^16 and every
/// symbol at least one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantize a probability vector. Largest-remainder apportionment keeps
    /// each entry within ~1 unit of its rounded target; the excess created
    /// by the one-unit floor is drained round-robin from large entries,
    /// sparing the single largest one so the mode stays accurate.
    pub fn from_probs(probs: &[f64]) -> CdfTable {
        let n = probs.len();
        assert!(n >= 2 && n as u32 <= CDF_TOTAL, "unusable alphabet size");
        let mass: f64 = probs.iter().sum();
        assert!(mass > 0.0, "all-zero probability vector");
        let scaled: Vec<f64> = probs.iter().map(|p| p.max(0.0) / mass * CDF_TOTAL as f64).collect();
        let mut freq: Vec<i64> = scaled.iter().map(|&s| (s.floor() as i64).max(1)).collect();
        let mut total: i64 = freq.iter().sum();

        // hand out the remainder by largest fractional part first
        if total < CDF_TOTAL as i64 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let fa = scaled[a] - scaled[a].floor();
                let fb = scaled[b] - scaled[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            let mut i = 0;
            while total < CDF_TOTAL as i64 {
                freq[order[i % n]] += 1;
                total += 1;
                i += 1;
            }
        }
        // drain any floor-induced excess, round-robin over big entries,
        // skipping the largest so the mode keeps its rounded mass
        if total > CDF_TOTAL as i64 {
            let argmax = (0..n).max_by(|&a, &b| freq[a].cmp(&freq[b])).unwrap();
            let mut order: Vec<usize> = (0..n).filter(|&i| i != argmax).collect();
            order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            let mut guard = 0usize;
            'drain: while total > CDF_TOTAL as i64 {
                let mut stole = false;
                for &i in &order {
                    if freq[i] > 1 {
                        freq[i] -= 1;
                        total -= 1;
                        stole = true;
                        if total == CDF_TOTAL as i64 {
                            break 'drain;
                        }
                    }
                }
                if !stole {
                    // everything but the mode is at the floor
                    freq[argmax] -= total - CDF_TOTAL as i64;
                    total = CDF_TOTAL as i64;
                }
                guard += 1;
                assert!(guard < CDF_TOTAL as usize, "table quantization stuck");
            }
        }

        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freq {
            debug_assert!(f >= 1);
            acc += f as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc, CDF_TOTAL);
        CdfTable { cum }
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    /// (cum, freq) span of a symbol.
    pub fn span(&self, s: usize) -> (u32, u32) {
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Largest symbol whose cumulative start is <= the scaled frequency.
    pub fn lookup(&self, scaled: u32) -> usize {
        // binary search over cum[1..]
        let mut lo = 0usize;
        let mut hi = self.symbols();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= scaled {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Table code length of a symbol in bits.
    pub fn bits(&self, s: usize) -> f64 {
        -(self.freq(s) as f64 / CDF_TOTAL as f64).log2()
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }
}

fn byte_table() -> &'static CdfTable {
    static TABLE: OnceLock<CdfTable> = OnceLock::new();
    TABLE.get_or_init(|| CdfTable::from_probs(&vec![1.0; 256]))
}

/// Zero-mean Gaussian latent table for one sigma-bin center.
pub fn gaussian_cdf_table(sigma: f64) -> CdfTable {
    let mut probs = Vec::with_capacity(LATENT_SYMBOLS);
    let mut interior = 0.0;
    for s in -SYMBOL_RANGE..=SYMBOL_RANGE {
        let p = gaussian_interval_prob(s as f64, 0.0, sigma);
        interior += p;
        probs.push(p);
    }
    probs.push((1.0 - interior).max(0.0)); // escape carries the tail mass
    CdfTable::from_probs(&probs)
}

/// The frozen set of Gaussian tables, one per sigma bin. Model-independent,
/// built once per process.
pub struct GaussianTables {
    tables: Vec<CdfTable>,
}

impl GaussianTables {
    pub fn get() -> &'static GaussianTables {
        static TABLES: OnceLock<GaussianTables> = OnceLock::new();
        TABLES.get_or_init(|| GaussianTables {
            tables: (0..SIGMA_BINS)
                .map(|i| gaussian_cdf_table(sigma_bin_center(i)))
                .collect(),
        })
    }

    pub fn for_sigma(&self, sigma: f64) -> &CdfTable {
        &self.tables[sigma_bin_index(sigma)]
    }

    pub fn by_bin(&self, bin: usize) -> &CdfTable {
        &self.tables[bin]
    }
}

/// Per-channel latent tables frozen from a factorized prior.
pub struct FactorizedTables {
    tables: Vec<CdfTable>,
}

impl FactorizedTables {
    pub fn build(prior: &FactorizedPrior) -> FactorizedTables {
        let mut tables = Vec::with_capacity(prior.channels());
        for ch in 0..prior.channels() {
            let mut probs = Vec::with_capacity(LATENT_SYMBOLS);
            let mut interior = 0.0;
            for s in -SYMBOL_RANGE..=SYMBOL_RANGE {
                let p = (prior.cumulative(ch, s as f64 + 0.5)
                    - prior.cumulative(ch, s as f64 - 0.5))
                .max(0.0);
                interior += p;
                probs.push(p);
            }
            probs.push((1.0 - interior).max(0.0));
            tables.push(CdfTable::from_probs(&probs));
        }
        FactorizedTables { tables }
    }

    pub fn channel(&self, ch: usize) -> &CdfTable {
        &self.tables[ch]
    }
}

/// Encode one (possibly out-of-range) integer under a latent table.
pub fn encode_latent_symbol(enc: &mut RangeEncoder, table: &CdfTable, value: i64) {
    if (-SYMBOL_RANGE as i64..=SYMBOL_RANGE as i64).contains(&value) {
        let idx = (value + SYMBOL_RANGE as i64) as usize;
        let (cum, freq) = table.span(idx);
        enc.encode(cum, freq);
    } else {
        let (cum, freq) = table.span(ESCAPE);
        enc.encode(cum, freq);
        let raw = value.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        let bt = byte_table();
        for b in raw.to_le_bytes() {
            let (cum, freq) = bt.span(b as usize);
            enc.encode(cum, freq);
        }
    }
}

/// Decode one integer coded by [`encode_latent_symbol`].
pub fn decode_latent_symbol(dec: &mut RangeDecoder, table: &CdfTable) -> Result<i64> {
    let idx = table.lookup(dec.decode_freq());
    let (cum, freq) = table.span(idx);
    dec.decode_update(cum, freq)?;
    if idx != ESCAPE {
        return Ok(idx as i64 - SYMBOL_RANGE as i64);
    }
    let bt = byte_table();
    let mut raw = [0u8; 4];
    for b in &mut raw {
        let i = bt.lookup(dec.decode_freq());
        let (cum, freq) = bt.span(i);
        dec.decode_update(cum, freq)?;
        *b = i as u8;
    }
    Ok(i32::from_le_bytes(raw) as i64)
}

/// Table-based estimate of [`encode_latent_symbol`]'s cost in bits.
pub fn latent_symbol_bits(table: &CdfTable, value: i64) -> f64 {
    if (-SYMBOL_RANGE as i64..=SYMBOL_RANGE as i64).contains(&value) {
        table.bits((value + SYMBOL_RANGE as i64) as usize)
    } else {
        table.bits(ESCAPE) + 32.0
    }
}
