//! Small shared utilities: packed bit matrices, checksums, parallelism gate.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

/// Dense boolean matrix packed into `u64` words, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMat {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BitMat {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.bits[r * self.words_per_row + c / 64];
        (w >> (c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let w = &mut self.bits[r * self.words_per_row + c / 64];
        if v {
            *w |= 1 << (c % 64);
        } else {
            *w &= !(1 << (c % 64));
        }
    }

    /// Iterate set column indices of one row in increasing order.
    pub fn row_ones(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        let start = r * self.words_per_row;
        let words = &self.bits[start..start + self.words_per_row];
        words.iter().enumerate().flat_map(move |(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }

    pub fn count_row(&self, r: usize) -> usize {
        let start = r * self.words_per_row;
        self.bits[start..start + self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Copy a rectangular window into a new matrix.
    pub fn window(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> BitMat {
        let mut out = BitMat::new(nr, nc);
        for r in 0..nr {
            for c in 0..nc {
                if self.get(r0 + r, c0 + c) {
                    out.set(r, c, true);
                }
            }
        }
        out
    }
}

/// FNV-1a 64-bit checksum over raw bytes. Stable across platforms; used for
/// frozen-weight verification in checkpoints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn fnv1a64_str(s: &str) -> u64 {
    fnv1a64(s.as_bytes())
}

static SERIAL_OVERRIDE: AtomicBool = AtomicBool::new(false);
static ENV_DETERMINISTIC: OnceLock<bool> = OnceLock::new();

/// True when internal op parallelism should be disabled. Controlled by the
/// `DOUBLEFUSE_DETERMINISTIC=1` environment variable or [`set_serial`].
/// The parallel kernels partition work so results are identical either way;
/// this switch exists so determinism tests can also rule out scheduling.
pub fn serial_mode() -> bool {
    let env = *ENV_DETERMINISTIC
        .get_or_init(|| std::env::var("DOUBLEFUSE_DETERMINISTIC").is_ok_and(|v| v == "1"));
    env || SERIAL_OVERRIDE.load(Ordering::Relaxed)
}

pub fn set_serial(v: bool) {
    SERIAL_OVERRIDE.store(v, Ordering::Relaxed);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmat_roundtrip() {
        let mut m = BitMat::new(3, 130);
        m.set(0, 0, true);
        m.set(1, 64, true);
        m.set(2, 129, true);
        assert!(m.get(0, 0) && m.get(1, 64) && m.get(2, 129));
        assert!(!m.get(0, 1));
        assert_eq!(m.row_ones(1).collect::<Vec<_>>(), vec![64]);
        assert_eq!(m.count_row(2), 1);
    }

    #[test]
    fn bitmat_window() {
        let mut m = BitMat::new(4, 4);
        for i in 0..4 {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        let w = m.window(1, 2, 0, 3);
        assert!(w.get(0, 0) && w.get(0, 1) && !w.get(0, 2));
        assert!(w.get(1, 2));
    }

    #[test]
    fn fnv_is_stable() {
        // Reference value for "hello" from the FNV-1a specification.
        assert_eq!(fnv1a64(b"hello"), 0xa430d84680aabd0b);
    }
}
