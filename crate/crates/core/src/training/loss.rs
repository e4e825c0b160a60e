//! Cross-entropy, soft distillation and their convex combination.

use crate::error::{Error, Result};
use crate::tensor::tape::{cross_entropy_batch, soft_distill_batch};
use crate::tensor::{ComputationRecord, KlDirection, Real, Tensor, Var};

/// Loss value split into its components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
}

/// Batch-mean `τ²·KL` between softened student and teacher distributions.
pub fn soft_distill_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    tau: T,
    direction: KlDirection,
) -> Result<T> {
    Ok(soft_distill_batch(student, teacher, tau, direction)?.0)
}

/// Batch-mean negative log softmax probability of the labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_batch(logits, labels)?.0)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `(1−λ)·CE + λ·L_D`.
pub fn total_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    lambda: T,
    tau: T,
    direction: KlDirection,
) -> Result<T> {
    check_lambda(lambda.to_f64_lossless())?;
    let ce = cross_entropy(student, labels)?;
    let kd = soft_distill_loss(student, teacher, tau, direction)?;
    Ok((T::one() - lambda) * ce + lambda * kd)
}

/// Records the training loss on `rec`.
///
/// Without teacher logits the loss is plain cross-entropy.
pub(crate) fn record_loss<T: Real>(
    rec: &mut ComputationRecord<T>,
    logits: Var,
    labels: &[usize],
    teacher: Option<&Tensor<T>>,
    lambda: f64,
    tau: f64,
    direction: KlDirection,
) -> Result<(Var, LossParts)> {
    let ce = rec.cross_entropy(logits, labels)?;
    let ce_v = rec.value(ce).data()[0].to_f64_lossless();
    let Some(t) = teacher else {
        return Ok((ce, LossParts { total: ce_v, ce: ce_v, kd: 0.0 }));
    };
    check_lambda(lambda)?;
    let kd = rec.soft_distill(logits, t, T::lit(tau), direction)?;
    let kd_v = rec.value(kd).data()[0].to_f64_lossless();
    let a = rec.scale(ce, T::lit(1.0 - lambda));
    let b = rec.scale(kd, T::lit(lambda));
    let total = rec.add(a, b)?;
    let total_v = rec.value(total).data()[0].to_f64_lossless();
    Ok((total, LossParts { total: total_v, ce: ce_v, kd: kd_v }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn identical_logits_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&[16, 10], &mut rng);
        for tau in [0.5, 1.0, 4.0] {
            for dir in [KlDirection::TeacherTarget, KlDirection::StudentTarget] {
                assert_eq!(soft_distill_loss(&z, &z, tau, dir).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn two_class_closed_form() {
        let zt = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let zs = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let oracle = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        let got = soft_distill_loss(&zs, &zt, 1.0, KlDirection::TeacherTarget).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        // literal order: KL([1/2,1/2] ‖ [2/3,1/3])
        let rev = 0.5 * (0.5f64 / (2.0 / 3.0)).ln() + 0.5 * (0.5f64 / (1.0 / 3.0)).ln();
        let got = soft_distill_loss(&zs, &zt, 1.0, KlDirection::StudentTarget).unwrap();
        assert!((got - rev).abs() < 1e-10);
    }

    #[test]
    fn kl_shrinks_with_temperature() {
        let zs = Tensor::new(vec![1, 3], vec![1.0f64, -0.5, 2.0]).unwrap();
        let zt = Tensor::new(vec![1, 3], vec![-1.0f64, 0.5, 0.3]).unwrap();
        let taus = [1.0, 2.0, 4.0, 8.0, 64.0];
        let scaled: Vec<f64> = taus
            .iter()
            .map(|&t| soft_distill_loss(&zs, &zt, t, KlDirection::TeacherTarget).unwrap())
            .collect();
        // the bare KL vanishes like 1/τ²
        let kl: Vec<f64> = scaled.iter().zip(taus).map(|(v, t)| v / (t * t)).collect();
        assert!(kl.windows(2).all(|w| w[1] < w[0]), "{kl:?}");
        assert!(kl[4] < 1e-3 * kl[0]);
        // τ²·KL tends to half the uniform-weighted variance of z_t − z_s
        let d = [-2.0f64, 1.0, -1.7];
        let m = d.iter().sum::<f64>() / 3.0;
        let half_var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
        assert!((scaled[4] - half_var).abs() < 0.02 * half_var, "{} vs {half_var}", scaled[4]);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let z = Tensor::<f64>::zeros(&[1, 2]);
        assert!(soft_distill_loss(&z, &z, 0.0, KlDirection::TeacherTarget).is_err());
        assert!(soft_distill_loss(&z, &z, -1.0, KlDirection::TeacherTarget).is_err());
    }

    #[test]
    fn total_loss_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs = random(&[4, 5], &mut rng);
        let zt = random(&[4, 5], &mut rng);
        let y = [0, 3, 4, 1];
        let dir = KlDirection::TeacherTarget;
        let ce = cross_entropy(&zs, &y).unwrap();
        let kd = soft_distill_loss(&zs, &zt, 2.0, dir).unwrap();
        assert_eq!(total_loss(&zs, &zt, &y, 0.0, 2.0, dir).unwrap(), ce);
        assert_eq!(total_loss(&zs, &zt, &y, 1.0, 2.0, dir).unwrap(), kd);
        // λ=0 ignores the teacher, λ=1 ignores the labels
        let zt2 = random(&[4, 5], &mut rng);
        assert_eq!(
            total_loss(&zs, &zt, &y, 0.0, 2.0, dir).unwrap(),
            total_loss(&zs, &zt2, &y, 0.0, 2.0, dir).unwrap()
        );
        assert_eq!(
            total_loss(&zs, &zt, &y, 1.0, 2.0, dir).unwrap(),
            total_loss(&zs, &zt, &[1, 1, 1, 1], 1.0, 2.0, dir).unwrap()
        );
        assert!(total_loss(&zs, &zt, &y, 1.5, 2.0, dir).is_err());
        assert!(total_loss(&zs, &zt, &[0, 0, 0, 9], 0.5, 2.0, dir).is_err());
    }

    #[test]
    fn two_class_half_lambda_oracle() {
        // z_s = [0.3, -0.2], z_t = [1, 0], y = 1, τ = 1
        let zs = Tensor::new(vec![1, 2], vec![0.3f64, -0.2]).unwrap();
        let zt = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let ps1 = (-0.2f64).exp() / (0.3f64.exp() + (-0.2f64).exp());
        let ps0 = 1.0 - ps1;
        let pt0 = 1f64.exp() / (1f64.exp() + 1.0);
        let pt1 = 1.0 - pt0;
        let ce = -ps1.ln();
        let kd = pt0 * (pt0 / ps0).ln() + pt1 * (pt1 / ps1).ln();
        let got = total_loss(&zs, &zt, &[1], 0.5, 1.0, KlDirection::TeacherTarget).unwrap();
        assert!((got - 0.5 * (ce + kd)).abs() < 1e-12);
    }
}
