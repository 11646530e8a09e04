//! Small numeric helpers: deterministic summation, quantiles, rng streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Pairwise (tree) summation. Deterministic for a fixed input order and
/// accurate to O(log n) rounding growth, which matters for the long
/// Monte Carlo accumulations used in the acceptance designs.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Sum of f(i) for i in 0..n through a scratch buffer, pairwise-reduced.
pub fn sum_by<F: FnMut(usize) -> f64>(n: usize, mut f: F) -> f64 {
    let xs: Vec<f64> = (0..n).map(|i| f(i)).collect();
    pairwise_sum(&xs)
}

/// Mean and (unbiased) variance in one pass over a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let devs: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&devs) / (n - 1) as f64)
}

/// Empirical quantile at level `p` using the order statistic of rank
/// ceil(p * n), without sorting the whole slice.
pub fn quantile(xs: &mut [f64], p: f64) -> f64 {
    assert!(!xs.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = xs.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = xs.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *v
}

/// Counter-based rng stream: one ChaCha20 generator per (seed, stream) pair.
/// Streams are independent, so parallel consumers can each own one without
/// coordinating, and replaying a stream never depends on the others.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 step. Used to derive per-entry Rademacher signs from a counter
/// without materializing the projection matrices.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic +-1 draw keyed by (seed, tag, row, col).
#[inline]
pub fn rademacher(seed: u64, tag: u64, row: u64, col: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(tag ^ splitmix64(row ^ splitmix64(col))));
    if h & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|u, v| u.total_cmp(v));
    ys.sort_by(|u, v| u.total_cmp(v));
    let (n, m) = (xs.len(), ys.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n || j < m {
        // next distinct value in the merged order; consume ties from both sides
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        let cdf_a = i as f64 / n as f64;
        let cdf_b = j as f64 / m as f64;
        d = d.max((cdf_a - cdf_b).abs());
    }
    d
}

/// One-sample KS statistic against a supplied cdf.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|u, v| u.total_cmp(v));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn test_quantile_of_uniform_grid() {
        let mut xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(quantile(&mut xs, 0.95), 95.0);
        let mut xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(quantile(&mut xs, 1.0), 100.0);
    }

    #[test]
    fn test_rademacher_is_deterministic_and_signed() {
        let a = rademacher(7, 0, 3, 9);
        let b = rademacher(7, 0, 3, 9);
        assert_eq!(a, b);
        assert!(a == 1.0 || a == -1.0);
        let mut ones = 0usize;
        for i in 0..10_000 {
            if rademacher(1, 1, i, 0) > 0.0 {
                ones += 1;
            }
        }
        // crude balance check on the sign stream
        assert!(ones > 4700 && ones < 5300);
    }

    #[test]
    fn test_stream_rngs_are_independent_of_consumption_order() {
        use rand::RngCore;
        let mut a = stream_rng(5, 0);
        let mut b = stream_rng(5, 1);
        let first_b = b.next_u64();
        let _ = a.next_u64();
        let mut b2 = stream_rng(5, 1);
        assert_eq!(first_b, b2.next_u64());
    }

    #[test]
    fn test_ks_two_sample_identical_samples_is_zero() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&xs, &xs), 0.0);
    }

    #[test]
    fn test_ks_one_sample_uniform() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_one_sample(&xs, |x| x.clamp(0.0, 1.0));
        assert!(d < 0.001 + 1e-12);
    }
}
