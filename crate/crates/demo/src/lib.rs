//! Browser bindings: expand a small learngene and watch the PC1 trend, plot
//! expansion coefficients, and compare distillation loss across temperatures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use tleg_core::analysis::{analyze_group, LinearityReport};
use tleg_core::learngene::{expansion_coefficient, ExpansionScope, Learngene};
use tleg_core::tensor::{KlDirection, Tensor};
use tleg_core::training::loss::soft_distill_loss;
use tleg_core::vit::{GroupSet, ModelConfig};

const DIM: usize = 16;
const HEADS: usize = 2;
const MLP_DIM: usize = 32;
const WEIGHT_STD: f64 = 0.02;

/// PC1 scores of an expanded stack and their straight-line fit.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Trend {
    report: LinearityReport,
}

#[wasm_bindgen]
impl Trend {
    #[wasm_bindgen(getter)]
    pub fn layers(&self) -> Vec<f64> {
        self.report.layer_indices.iter().map(|&l| l as f64).collect()
    }

    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.report.pc1_scores.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn slope(&self) -> f64 {
        self.report.slope
    }

    #[wasm_bindgen(getter)]
    pub fn intercept(&self) -> f64 {
        self.report.intercept
    }

    /// NaN when the stack is degenerate.
    #[wasm_bindgen(getter)]
    pub fn r_squared(&self) -> f64 {
        self.report.r_squared.unwrap_or(f64::NAN)
    }

    #[wasm_bindgen(getter)]
    pub fn explained_variance_ratio(&self) -> f64 {
        self.report.explained_variance_ratio
    }

    /// NaN below three layers.
    #[wasm_bindgen(getter)]
    pub fn residual(&self) -> f64 {
        self.report.residual.unwrap_or(f64::NAN)
    }

    #[wasm_bindgen(getter)]
    pub fn degenerate(&self) -> bool {
        self.report.degenerate
    }
}

/// Expands a random learngene to `depth` layers with `θ_A` scaled by
/// `a_scale`, adds independent per-layer noise of relative size `noise`, and
/// analyzes the stack. `a_scale = 0` gives weight sharing.
pub fn expansion_trend(depth: usize, a_scale: f64, noise: f64, seed: u64) -> Result<Trend, String> {
    if depth < 2 {
        return Err(format!("depth must be at least 2, got {depth}"));
    }
    if !(a_scale.is_finite() && noise.is_finite() && noise >= 0.0) {
        return Err("scale and noise must be finite, noise non-negative".into());
    }
    let cfg = ModelConfig::new(DIM, depth, HEADS, MLP_DIM);
    let mut lg = Learngene::<f64>::init(cfg, ExpansionScope::default(), seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for t in lg.theta_a.refs_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = unit.sample(&mut rng) * WEIGHT_STD * a_scale);
    }
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let mut layer = lg.expand_layer(l, depth).map_err(|e| e.to_string())?;
        if noise > 0.0 {
            for t in layer.refs_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += unit.sample(&mut rng) * WEIGHT_STD * noise);
            }
        }
        layers.push(layer);
    }
    let report = analyze_group("demo", "all", &layers, 1, GroupSet::ALL).map_err(|e| e.to_string())?;
    Ok(Trend { report })
}

/// `(l−1)/L` for `l = 1..=L`.
pub fn coefficient_curve(depth: usize) -> Result<Vec<f64>, String> {
    (1..=depth)
        .map(|l| expansion_coefficient(l, depth).map_err(|e| e.to_string()))
        .collect()
}

/// Distillation loss of one student/teacher logit pair at each temperature.
/// Returns `τ²·KL` followed by the bare `KL`, each `taus.len()` long.
pub fn distill_curve(student: &[f64], teacher: &[f64], taus: &[f64], teacher_target: bool) -> Result<Vec<f64>, String> {
    if student.len() != teacher.len() || student.len() < 2 {
        return Err("student and teacher need the same number (≥2) of logits".into());
    }
    let zs = Tensor::new(vec![1, student.len()], student.to_vec()).map_err(|e| e.to_string())?;
    let zt = Tensor::new(vec![1, teacher.len()], teacher.to_vec()).map_err(|e| e.to_string())?;
    let dir = if teacher_target { KlDirection::TeacherTarget } else { KlDirection::StudentTarget };
    let scaled = taus
        .iter()
        .map(|&t| soft_distill_loss(&zs, &zt, t, dir).map_err(|e| e.to_string()))
        .collect::<Result<Vec<f64>, String>>()?;
    let bare: Vec<f64> = scaled.iter().zip(taus).map(|(v, t)| v / (t * t)).collect();
    Ok([scaled, bare].concat())
}

#[wasm_bindgen(js_name = expansionTrend)]
pub fn expansion_trend_js(depth: usize, a_scale: f64, noise: f64, seed: u32) -> Result<Trend, JsError> {
    expansion_trend(depth, a_scale, noise, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = coefficientCurve)]
pub fn coefficient_curve_js(depth: usize) -> Result<Vec<f64>, JsError> {
    coefficient_curve(depth).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = distillCurve)]
pub fn distill_curve_js(student: &[f64], teacher: &[f64], taus: &[f64], teacher_target: bool) -> Result<Vec<f64>, JsError> {
    distill_curve(student, teacher, taus, teacher_target).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_expansion_is_linear() {
        let t = expansion_trend(8, 1.0, 0.0, 3).unwrap();
        assert!(t.r_squared() > 0.999999);
        assert!(t.residual() < 1e-12);
        assert_eq!(t.scores().len(), 8);
        assert!(t.scores()[7] >= t.scores()[0]);
    }

    #[test]
    fn zero_scale_is_degenerate() {
        for seed in 0..4 {
            for depth in [3, 6, 7, 12] {
                let t = expansion_trend(depth, 0.0, 0.0, seed).unwrap();
                assert!(t.degenerate(), "depth {depth} seed {seed}");
                assert!(t.r_squared().is_nan());
            }
        }
    }

    #[test]
    fn noise_breaks_linearity() {
        let clean = expansion_trend(8, 0.2, 0.0, 5).unwrap();
        let noisy = expansion_trend(8, 0.2, 3.0, 5).unwrap();
        assert!(noisy.r_squared() < clean.r_squared());
        assert!(noisy.residual() > 1e-3);
    }

    #[test]
    fn bad_inputs() {
        assert!(expansion_trend(1, 1.0, 0.0, 0).is_err());
        assert!(expansion_trend(4, 1.0, -1.0, 0).is_err());
        assert!(coefficient_curve(0).unwrap().is_empty());
        assert!(distill_curve(&[1.0], &[1.0], &[1.0], true).is_err());
        assert!(distill_curve(&[1.0, 0.0], &[1.0, 0.0], &[0.0], true).is_err());
    }

    #[test]
    fn coefficients_match_layer_fractions() {
        assert_eq!(coefficient_curve(4).unwrap(), vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn distill_curve_layout() {
        let taus = [0.5, 1.0, 2.0, 8.0];
        let v = distill_curve(&[0.0, 0.0], &[1.0, 0.0], &taus, true).unwrap();
        assert_eq!(v.len(), 8);
        // the bare divergence shrinks as the distributions soften
        assert!(v[4..].windows(2).all(|w| w[1] < w[0]));
        let p: f64 = 1.0 / (1.0 + (-1.0f64).exp());
        let kl = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
        assert!((v[5] - kl).abs() < 1e-12);
    }
}
