//! Diagonal linear recurrences `x_k = a ⊙ x_{k-1} + b_k`, `x_{-1} = 0`.

use super::complex::Complex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    /// Work-efficient up-sweep/down-sweep prefix scan over the associative
    /// combine `(a1, b1) ∘ (a2, b2) = (a1 a2, a2 b1 + b2)`.
    Parallel,
}

/// Runs `N` independent recurrences over `T` steps.
///
/// `b_seq` is row-major `[T × N]`; the result has the same layout and holds
/// every state `x_0 .. x_{T-1}`.
pub fn linear_scan(a: &[Complex], b_seq: &[Complex], mode: ScanMode) -> Result<Vec<Complex>> {
    let n = a.len();
    if n == 0 {
        return Err(Error::invalid("linear_scan: empty state"));
    }
    if !b_seq.len().is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "linear_scan: b_seq length {} is not a multiple of state size {n}",
            b_seq.len()
        )));
    }
    Ok(match mode {
        ScanMode::Sequential => sequential(a, b_seq),
        ScanMode::Parallel => blelloch(a, b_seq),
    })
}

fn sequential(a: &[Complex], b_seq: &[Complex]) -> Vec<Complex> {
    let n = a.len();
    let mut out = Vec::with_capacity(b_seq.len());
    let mut x = vec![Complex::new(0.0, 0.0); n];
    for row in b_seq.chunks_exact(n) {
        for ((xi, ai), bi) in x.iter_mut().zip(a).zip(row) {
            *xi = *ai * *xi + *bi;
        }
        out.extend_from_slice(&x);
    }
    out
}

#[inline]
fn combine(left: (Complex, Complex), right: (Complex, Complex)) -> (Complex, Complex) {
    (left.0 * right.0, right.0 * left.1 + right.1)
}

fn blelloch(a: &[Complex], b_seq: &[Complex]) -> Vec<Complex> {
    let n = a.len();
    let t = b_seq.len() / n;
    if t == 0 {
        return Vec::new();
    }
    let size = t.next_power_of_two();
    let identity = (Complex::new(1.0, 0.0), Complex::new(0.0, 0.0));
    let mut out = vec![Complex::new(0.0, 0.0); t * n];
    let mut tree = vec![identity; size];
    for lane in 0..n {
        for (k, slot) in tree.iter_mut().enumerate() {
            *slot = if k < t {
                (a[lane], b_seq[k * n + lane])
            } else {
                identity
            };
        }
        let leaves: Vec<_> = tree[..t].to_vec();

        // up-sweep
        let mut stride = 1;
        while stride < size {
            let mut i = 2 * stride - 1;
            while i < size {
                tree[i] = combine(tree[i - stride], tree[i]);
                i += 2 * stride;
            }
            stride *= 2;
        }
        // down-sweep to an exclusive scan
        tree[size - 1] = identity;
        stride = size / 2;
        while stride >= 1 {
            let mut i = 2 * stride - 1;
            while i < size {
                let left = tree[i - stride];
                tree[i - stride] = tree[i];
                tree[i] = combine(tree[i], left);
                i += 2 * stride;
            }
            stride /= 2;
        }
        for k in 0..t {
            out[k * n + lane] = combine(tree[k], leaves[k]).1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex {
        Complex::new(re, 0.0)
    }

    #[test]
    fn unit_decay_gives_prefix_sums() {
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let x = linear_scan(&[c(1.0)], &[c(1.0); 4], mode).unwrap();
            assert_eq!(x, vec![c(1.0), c(2.0), c(3.0), c(4.0)]);
        }
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let b: Vec<_> = (0..7)
            .map(|k| Complex::new(k as f64, -(k as f64)))
            .collect();
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            assert_eq!(linear_scan(&[c(0.0)], &b, mode).unwrap(), b);
        }
    }

    #[test]
    fn ragged_input_is_rejected() {
        assert!(linear_scan(&[c(1.0), c(1.0)], &[c(1.0); 3], ScanMode::Parallel).is_err());
        assert!(linear_scan(&[], &[], ScanMode::Sequential).is_err());
    }
}
