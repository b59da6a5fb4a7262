//! Counter-based random streams.
//!
//! A stream is addressed by `(root_seed, label_path)`. Draw `i` is a pure
//! function of the stream key and `i`, so forking a child stream never shifts
//! the draws of its siblings, and two streams built from the same address
//! produce the same sequence regardless of what else was drawn in between.

use crate::error::{invalid, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn segment_hash(label: &str) -> u64 {
    // FNV-1a, terminated so that ["ab", "c"] and ["a", "bc"] differ.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes().chain(std::iter::once(0xFF)) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    root_seed: u64,
    labels: Vec<String>,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            labels: Vec::new(),
            key: mix64(root_seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Stream at `root_seed` addressed by a `/`-separated label path.
    pub fn at(root_seed: u64, path: &str) -> Self {
        Self::new(root_seed).child(path)
    }

    /// Child stream with `label` appended to the path. The counter of the
    /// child starts at zero; `self` is not advanced.
    pub fn child(&self, label: impl AsRef<str>) -> Self {
        let mut labels = self.labels.clone();
        let mut key = self.key;
        for seg in label.as_ref().split('/').filter(|s| !s.is_empty()) {
            key = mix64(key ^ segment_hash(seg)).wrapping_add(GOLDEN);
            labels.push(seg.to_owned());
        }
        Self {
            root_seed: self.root_seed,
            labels,
            key,
            counter: 0,
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> String {
        self.labels.join("/")
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn word(&self, index: u64) -> u64 {
        let a = mix64(self.key ^ index.wrapping_add(1).wrapping_mul(GOLDEN));
        mix64(a ^ self.key.rotate_left(29))
    }

    /// Uniform in the open interval (0, 1) from the word at `index`.
    #[inline]
    fn open_unit(&self, index: u64) -> f64 {
        ((self.word(index) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// One uniform draw in (0, 1); advances the counter by one.
    pub fn uniform(&mut self) -> f64 {
        let u = self.open_unit(2 * self.counter);
        self.counter += 1;
        u
    }

    /// Uniform index in `0..n`; advances the counter by one.
    pub fn index(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(invalid("index range must be non-empty"));
        }
        let w = self.word(2 * self.counter);
        self.counter += 1;
        Ok(((u128::from(w) * n as u128) >> 64) as usize)
    }

    /// `n` i.i.d. standard normal draws (Box-Muller, two words per draw);
    /// advances the counter by exactly `n`.
    pub fn gaussian(&mut self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(invalid("gaussian draw length must be >= 1"));
        }
        let out = (0..n as u64)
            .map(|j| {
                let c = self.counter + j;
                let u1 = self.open_unit(2 * c);
                let u2 = self.open_unit(2 * c + 1);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        self.counter += n as u64;
        Ok(out)
    }

    /// `k` distinct indices from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(invalid(format!("cannot draw {k} distinct items from {n}")));
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i)?;
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}
