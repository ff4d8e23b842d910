use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

/// Log-normal Poisson draw before truncation:
/// `ξ ~ N(ln k̄ − σ²/2, σ²)`, `k = Poisson(e^ξ) + 1`.
pub fn sample_depth_untruncated(k_bar: usize, sigma2: f64, rng: &mut impl Rng) -> usize {
    assert!(k_bar >= 1, "k_bar must be >= 1");
    let mean = (k_bar as f64).ln() - 0.5 * sigma2 * sigma2;
    let xi = Normal::new(mean, sigma2).expect("finite sigma2").sample(rng);
    let rate = xi.exp();
    let draw: f64 = Poisson::new(rate).expect("positive Poisson rate").sample(rng);
    draw as usize + 1
}

/// Clamp applied to every training depth draw.
pub fn truncate_depth(k: usize, k_bar: usize) -> usize {
    k.min(3 * k_bar)
}

/// Training depth: the untruncated draw capped at `3·k̄`.
pub fn sample_depth(k_bar: usize, sigma2: f64, rng: &mut impl Rng) -> usize {
    truncate_depth(sample_depth_untruncated(k_bar, sigma2, rng), k_bar)
}
