//! Halton sequences and the per-respondent standard-normal draw sets used for
//! simulated integration.
//!
//! Respondent `n` (zero-based) receives the contiguous block of Halton indices
//! `skip + n·R + 1 ..= skip + (n+1)·R`; dimension `d` uses the `d`-th prime.
//! Uniforms are clamped to `[1e-12, 1 − 1e-12]` before the normal quantile so
//! every draw is finite.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distributions::inv_cdf_unchecked;
use crate::error::{Error, Result};

pub const DEFAULT_SKIP: u64 = 10;
pub const DEFAULT_DRAWS: usize = 2000;
pub const UNIFORM_CLAMP: f64 = 1e-12;

const PRIME_TABLE_LEN: usize = 100;
const CACHE_MAGIC: &[u8; 4] = b"LCDS";
const CACHE_VERSION: u32 = 1;

/// The first 100 primes.
pub fn prime_table() -> &'static [u64] {
    static TABLE: OnceLock<Vec<u64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut primes = Vec::with_capacity(PRIME_TABLE_LEN);
        let mut candidate = 2u64;
        while primes.len() < PRIME_TABLE_LEN {
            if primes
                .iter()
                .take_while(|p| *p * *p <= candidate)
                .all(|p| candidate % p != 0)
            {
                primes.push(candidate);
            }
            candidate += 1;
        }
        primes
    })
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

#[inline]
fn radical_inverse(mut index: u64, base: u64, perm: Option<&[u64]>) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut scale = inv_base;
    let mut value = 0.0;
    while index > 0 {
        let mut digit = index % base;
        if let Some(p) = perm {
            digit = p[digit as usize];
        }
        value += digit as f64 * scale;
        index /= base;
        scale *= inv_base;
    }
    value
}

/// Radical inverse of `index` (≥ 1) in a prime `base`.
pub fn halton_point(index: u64, base: u64) -> Result<f64> {
    if index == 0 {
        return Err(Error::InvalidArgument("Halton index must be >= 1".into()));
    }
    if !is_prime(base) {
        return Err(Error::InvalidArgument(format!(
            "Halton base {base} is not prime"
        )));
    }
    Ok(radical_inverse(index, base, None))
}

/// Digit permutation for one base: 0 stays fixed so finite expansions remain
/// finite, the remaining digits are shuffled.
fn digit_permutation(base: u64, seed: u64, dim: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(dim as u64);
    let mut tail: Vec<u64> = (1..base).collect();
    tail.shuffle(&mut rng);
    let mut perm = Vec::with_capacity(base as usize);
    perm.push(0);
    perm.extend(tail);
    perm
}

/// Uniform Halton values for indices `start..start+count` in one dimension.
pub fn halton_uniforms(start: u64, count: usize, base: u64, perm: Option<&[u64]>) -> Vec<f64> {
    (0..count as u64)
        .map(|i| radical_inverse(start + i, base, perm))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    n_respondents: usize,
    draws: usize,
    dims: usize,
    skip: u64,
    primes: Vec<u64>,
    scramble_seed: Option<u64>,
    values: Vec<f64>,
}

impl DrawSet {
    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn skip(&self) -> u64 {
        self.skip
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    pub fn scramble_seed(&self) -> Option<u64> {
        self.scramble_seed
    }

    /// All draws of one respondent, row-major `(draw, dim)`.
    pub fn respondent(&self, n: usize) -> &[f64] {
        let stride = self.draws * self.dims;
        &self.values[n * stride..(n + 1) * stride]
    }

    pub fn draw(&self, n: usize, r: usize) -> &[f64] {
        let start = (n * self.draws + r) * self.dims;
        &self.values[start..start + self.dims]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(40 + 8 * (self.primes.len() + self.values.len()));
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for v in [
            self.draws as u64,
            self.dims as u64,
            self.skip,
            self.n_respondents as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.primes {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(cursor..cursor + n)
                .ok_or_else(|| Error::DrawCache("truncated file".into()))?;
            cursor += n;
            Ok(slice)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(Error::DrawCache("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::DrawCache(format!("unsupported version {version}")));
        }
        let mut read_u64 = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let draws = read_u64()? as usize;
        let dims = read_u64()? as usize;
        let skip = read_u64()?;
        let n = read_u64()? as usize;
        let primes = (0..dims).map(|_| read_u64()).collect::<Result<Vec<_>>>()?;
        let values = (0..n * draws * dims)
            .map(|_| read_u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(DrawSet {
            n_respondents: n,
            draws,
            dims,
            skip,
            primes,
            scramble_seed: None,
            values,
        })
    }
}

/// Builds standard-normal Halton draws for `n_respondents` × `draws` × `dims`.
pub fn build_draws(
    n_respondents: usize,
    draws: usize,
    dims: usize,
    skip: u64,
    scramble_seed: Option<u64>,
) -> Result<DrawSet> {
    let table = prime_table();
    if dims > table.len() {
        return Err(Error::InvalidArgument(format!(
            "{dims} draw dimensions requested but only {} primes are tabulated",
            table.len()
        )));
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be >= 1".into()));
    }
    let primes = table[..dims].to_vec();
    let perms: Vec<Option<Vec<u64>>> = primes
        .iter()
        .enumerate()
        .map(|(d, &b)| scramble_seed.map(|s| digit_permutation(b, s, d)))
        .collect();
    let mut values = vec![0.0; n_respondents * draws * dims];
    let stride = draws * dims.max(1);
    if dims > 0 {
        values
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(n, block)| {
                let first = skip + (n * draws) as u64 + 1;
                for (d, (&base, perm)) in primes.iter().zip(&perms).enumerate() {
                    for r in 0..draws {
                        let u = radical_inverse(first + r as u64, base, perm.as_deref())
                            .clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
                        block[r * dims + d] = inv_cdf_unchecked(u);
                    }
                }
            });
    }
    Ok(DrawSet {
        n_respondents,
        draws,
        dims,
        skip,
        primes,
        scramble_seed,
        values,
    })
}
