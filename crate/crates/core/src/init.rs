//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated normal used for weights.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) samples resampled until they fall within ±2·std.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_stay_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = trunc_normal(&[4096], 0.02, &mut rng);
        assert!(t.max_abs() <= 0.04);
        let mean = t.sum() / 4096.0;
        assert!(mean.abs() < 2e-3);
        let sd = (t.data().iter().map(|v| v * v).sum::<f64>() / 4096.0).sqrt();
        // a ±2σ truncated normal has std ≈ 0.88σ
        assert!((sd - 0.0176).abs() < 1.5e-3, "{sd}");
    }
}
