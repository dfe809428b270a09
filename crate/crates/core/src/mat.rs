//! Plain dense `f64` matrices for the data pipeline, plus the FNV-1a hash and
//! seed-derivation helpers every randomized stage funnels through.
//!
//! This type carries raw timeseries and connectomes. Model math lives in
//! [`crate::numerics`]; `Mat` deliberately has no autodiff machinery.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Keep only the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (k, &c) in cols.iter().enumerate() {
                out.set(r, k, self.get(r, c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite entry as (row, col), if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i / self.cols, i % self.cols))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a, for digesting parameter blobs without buffering.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Derive a child seed from a base seed, a string tag, and integer coordinates.
///
/// Parallel or reordered callers get identical streams because the child seed
/// depends only on the coordinates, never on call order.
pub fn derive_seed(base: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(tag.len() + 8 * coords.len());
    bytes.extend_from_slice(tag.as_bytes());
    for c in coords {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    base ^ fnv1a(&bytes)
}

/// Seed for per-scan randomness: base ⊕ hash(subject_id, stream index).
pub fn scan_seed(base: u64, subject_id: &str, stream: u64) -> u64 {
    let mut bytes = Vec::with_capacity(subject_id.len() + 8);
    bytes.extend_from_slice(subject_id.as_bytes());
    bytes.extend_from_slice(&stream.to_le_bytes());
    base ^ fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_known_vectors() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn incremental_matches_oneshot() {
        let mut h = Fnv1a::new();
        h.update(b"foo");
        h.update(b"bar");
        assert_eq!(h.finish(), fnv1a(b"foobar"));
    }

    #[test]
    fn select_columns_picks_in_order() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = m.select_columns(&[0, 2]);
        assert_eq!(s.as_slice(), &[1.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn derived_seeds_distinguish_coordinates() {
        let a = derive_seed(7, "view", &[0, 1]);
        let b = derive_seed(7, "view", &[1, 0]);
        let c = derive_seed(7, "mask", &[0, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "view", &[0, 1]));
    }
}
