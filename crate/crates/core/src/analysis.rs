//! How linear are layer parameters as a function of depth?
//!
//! Each layer is flattened to a vector, projected onto the first principal
//! component of the stack, and the resulting scores are regressed on layer
//! index.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{GroupSet, LayerParams, ParamGroup};

/// One flattened parameter vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layers: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(contract(format!("a layer trace needs at least 2 layers, got {}", layers.len())));
        }
        let p = layers[0].len();
        if layers.iter().any(|v| v.len() != p) {
            return Err(contract("layer vectors differ in length"));
        }
        Ok(Self { layers })
    }

    /// Slots of `groups` from every layer.
    pub fn from_layers<T: Real>(layers: &[LayerParams<Tensor<T>>], groups: GroupSet) -> Result<Self> {
        Self::new(layers.iter().map(|l| l.flatten(groups)).collect())
    }
}

/// First-principal-component projection of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Pc1 {
    pub scores: Vec<f64>,
    pub explained_variance_ratio: f64,
    /// All layers identical, so there is no direction to project on.
    pub degenerate: bool,
}

/// PC1 scores via the `L×L` Gram matrix of the centered layer vectors.
///
/// Scores are `√λ₁·u₁` (the projections onto the unit principal direction),
/// signed so the last layer scores at least as high as the first.
pub fn pca_project_layers(trace: &LayerTrace) -> Pc1 {
    let l = trace.layers.len();
    let p = trace.layers[0].len();
    let mean: Vec<f64> = (0..p)
        .map(|j| trace.layers.iter().map(|v| v[j]).sum::<f64>() / l as f64)
        .collect();
    let centered: Vec<Vec<f64>> = trace
        .layers
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let gram = DMatrix::from_fn(l, l, |i, k| {
        centered[i].iter().zip(&centered[k]).map(|(a, b)| a * b).sum()
    });
    let trace_g: f64 = gram.trace();
    // the centered mean can leave rounding residue on identical layers
    if trace_g == 0.0 || trace.layers.iter().all(|v| v == &trace.layers[0]) {
        return Pc1 {
            scores: vec![0.0; l],
            explained_variance_ratio: 0.0,
            degenerate: true,
        };
    }
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.imax();
    let lambda = eig.eigenvalues[top].max(0.0);
    let u = eig.eigenvectors.column(top);
    let mut scores: Vec<f64> = u.iter().map(|x| x * lambda.sqrt()).collect();
    if scores[l - 1] < scores[0] {
        scores.iter_mut().for_each(|s| *s = -*s);
    }
    Pc1 {
        scores,
        explained_variance_ratio: (lambda / trace_g).clamp(0.0, 1.0),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the scores have zero variance.
    pub r_squared: Option<f64>,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(y: &[f64], x: &[f64]) -> Result<LinearFit> {
    if y.len() != x.len() || y.len() < 2 {
        return Err(contract(format!("linear fit needs ≥2 paired points, got {} and {}", y.len(), x.len())));
    }
    let n = y.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(contract("linear fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let r_squared = (ss_tot > 0.0).then(|| {
        let ss_res: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let r = b - (slope * a + intercept);
                r * r
            })
            .sum();
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    });
    Ok(LinearFit { slope, intercept, r_squared })
}

/// `max |(v_{l+1} − v_l) − (v_2 − v_1)|` over layers and coordinates.
pub fn linearity_residual_vectors(layers: &[Vec<f64>]) -> Result<f64> {
    if layers.len() < 3 {
        return Err(contract(format!("linearity residual needs ≥3 layers, got {}", layers.len())));
    }
    let d0: Vec<f64> = layers[1].iter().zip(&layers[0]).map(|(b, a)| b - a).collect();
    let mut worst = 0.0f64;
    for w in layers.windows(2).skip(1) {
        for ((b, a), d) in w[1].iter().zip(&w[0]).zip(&d0) {
            worst = worst.max(((b - a) - d).abs());
        }
    }
    Ok(worst)
}

/// Residual over every slot of the given layers.
pub fn linearity_residual<T: Real>(layers: &[LayerParams<Tensor<T>>]) -> Result<f64> {
    let v: Vec<Vec<f64>> = layers.iter().map(|l| l.flatten(GroupSet::ALL)).collect();
    linearity_residual_vectors(&v)
}

/// Linearity summary of one parameter group across a layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityReport {
    pub checkpoint: String,
    /// `all`, `msa`, `mlp`, `ln`, or a comma list for a partial scope.
    pub group: String,
    /// 1-based layer indices the scores belong to.
    pub layer_indices: Vec<usize>,
    pub pc1_scores: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: Option<f64>,
    pub explained_variance_ratio: f64,
    /// `None` with fewer than three layers.
    pub residual: Option<f64>,
    pub degenerate: bool,
}

pub const REPORT_HEADER: &str =
    "checkpoint,group,slope,intercept,r_squared,explained_variance_ratio,residual,degenerate";

impl LinearityReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        format!(
            "{},{},{:.10},{:.10},{},{:.10},{},{}",
            self.checkpoint,
            self.group,
            self.slope,
            self.intercept,
            opt(self.r_squared),
            self.explained_variance_ratio,
            self.residual.map(|r| format!("{r:.3e}")).unwrap_or_default(),
            self.degenerate
        )
    }

    /// Two columns: layer index and PC1 score.
    pub fn plot_points(&self) -> String {
        let mut out = String::from("layer,score\n");
        for (l, s) in self.layer_indices.iter().zip(&self.pc1_scores) {
            out.push_str(&format!("{l},{s:.10}\n"));
        }
        out
    }

    /// Two columns: layer index and fitted score.
    pub fn plot_fit(&self) -> String {
        let mut out = String::from("layer,fitted\n");
        for l in &self.layer_indices {
            out.push_str(&format!("{l},{:.10}\n", self.slope * *l as f64 + self.intercept));
        }
        out
    }
}

/// Report for the `groups` slots of `layers`, whose 1-based indices start at
/// `first_layer`.
pub fn analyze_group<T: Real>(
    checkpoint: &str,
    group: &str,
    layers: &[LayerParams<Tensor<T>>],
    first_layer: usize,
    groups: GroupSet,
) -> Result<LinearityReport> {
    let trace = LayerTrace::from_layers(layers, groups)?;
    let pc = pca_project_layers(&trace);
    let layer_indices: Vec<usize> = (first_layer..first_layer + layers.len()).collect();
    let xs: Vec<f64> = layer_indices.iter().map(|&l| l as f64).collect();
    let fit = linear_fit(&pc.scores, &xs)?;
    let residual = if layers.len() >= 3 {
        Some(linearity_residual_vectors(&trace.layers)?)
    } else {
        None
    };
    Ok(LinearityReport {
        checkpoint: checkpoint.to_string(),
        group: group.to_string(),
        layer_indices,
        pc1_scores: pc.scores,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: if pc.degenerate { None } else { fit.r_squared },
        explained_variance_ratio: pc.explained_variance_ratio,
        residual,
        degenerate: pc.degenerate || fit.r_squared.is_none(),
    })
}

/// One report for `scope` combined, then one per group.
pub fn analyze_layers<T: Real>(
    checkpoint: &str,
    layers: &[LayerParams<Tensor<T>>],
    first_layer: usize,
    scope: GroupSet,
) -> Result<Vec<LinearityReport>> {
    let label = if scope.is_all() { "all".to_string() } else { scope.to_string() };
    let mut out = vec![analyze_group(checkpoint, &label, layers, first_layer, scope)?];
    for g in ParamGroup::ALL {
        out.push(analyze_group(checkpoint, g.name(), layers, first_layer, GroupSet::only(g))?);
    }
    Ok(out)
}

pub fn reports_csv(reports: &[LinearityReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
