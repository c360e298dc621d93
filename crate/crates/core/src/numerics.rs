//! Scalar and vector kernels shared by every other module.
//!
//! Reductions accumulate in `f64` regardless of the input element type.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded random stream: ChaCha8 keyed from a 64-bit seed, with Box–Muller
/// normals on top. The same seed yields the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for consumer `index`, keyed by `mix(seed, index)`.
    pub fn child(&self, index: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.uniform();
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        for v in out {
            *v = sigma * self.standard_normal();
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. draws from N(0, sigma^2).
pub fn gaussian(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if sigma > 0.0 {
        rng.fill_normal(&mut out, sigma);
    } else {
        // keep the stream position independent of sigma
        for _ in 0..n {
            rng.standard_normal();
        }
    }
    out
}

pub fn dot<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_sim<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::invalid("cosine_sim of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit norm in place.
pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n <= 1e-12 {
        return Err(Error::invalid("cannot normalize a zero-norm vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("softmax logit".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked variant for hot loops; the caller guarantees finite input.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071068).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-30);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn gaussian_zero_sigma_is_zero() {
        let mut rng = Rng::new(1);
        assert_eq!(gaussian(&mut rng, 4, 0.0), vec![0.0; 4]);
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = gaussian(&mut Rng::new(42), 17, 1.0);
        let b = gaussian(&mut Rng::new(42), 17, 1.0);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = gaussian(&mut Rng::new(43), 17, 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_moments() {
        let xs = gaussian(&mut Rng::new(7), 1_000_000, 1.0);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn children_differ_and_repeat() {
        let parent = Rng::new(5);
        let a = parent.child(0).next_u64();
        assert_eq!(a, parent.child(0).next_u64());
        assert_ne!(a, parent.child(1).next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        Rng::new(3).shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, s);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-2e4f64..2e4, 1..40)) {
            let p = softmax(&logits).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn cosine_is_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            prop_assert_eq!(cosine_sim(&a, &b).unwrap().to_bits(), cosine_sim(&b, &a).unwrap().to_bits());
        }

        #[test]
        fn unit_distance_matches_cosine(
            a in proptest::collection::vec(-5.0f64..5.0, 8),
            b in proptest::collection::vec(-5.0f64..5.0, 8),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let (mut x, mut y) = (a, b);
            normalize(&mut x).unwrap();
            normalize(&mut y).unwrap();
            let d2: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum();
            prop_assert!((d2 - 2.0 * (1.0 - cosine_sim(&x, &y).unwrap())).abs() < 1e-5);
        }
    }
}
