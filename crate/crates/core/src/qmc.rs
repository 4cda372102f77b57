//! Randomly shifted rank-1 lattice points with Richtmyer generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Points `frac(k * sqrt(prime_j) + shift_j)` folded by the tent map. Extensible:
/// the first `2N` points contain the first `N`.
#[derive(Debug, Clone)]
pub struct ShiftedLattice {
    generator: Vec<f64>,
    shifts: Vec<Vec<f64>>,
}

/// Smallest value handed out, so inverse CDFs never see exactly 0 or 1.
const EDGE: f64 = 1e-15;

impl ShiftedLattice {
    pub fn new(dim: usize, n_shifts: usize, seed: u64) -> Self {
        let generator = primes(dim).into_iter().map(|p| (p as f64).sqrt().fract()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts = (0..n_shifts)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Self { generator, shifts }
    }

    pub fn dim(&self) -> usize {
        self.generator.len()
    }

    pub fn n_shifts(&self) -> usize {
        self.shifts.len()
    }

    /// Writes point `k` of randomization `shift` into `out`.
    #[inline]
    pub fn point(&self, shift: usize, k: usize, out: &mut [f64]) {
        let kf = k as f64;
        for ((o, g), s) in out.iter_mut().zip(&self.generator).zip(&self.shifts[shift]) {
            let x = (kf * g + s).fract();
            *o = (1.0 - (2.0 * x - 1.0).abs()).clamp(EDGE, 1.0 - EDGE);
        }
    }
}

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= candidate).all(|&p| !candidate.is_multiple_of(p)) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}
