//! The learngene: two layer-shaped modules θ_A and θ_B from which layer `l`
//! of an `L`-layer network is generated as `θ_B + (l−1)/L · θ_A`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{GroupSet, LayerParams, ModelConfig};

/// Which groups are expanded and from which layer on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpansionScope {
    pub modules: GroupSet,
    /// First expanded layer, 1-based. Earlier layers are free parameters.
    pub start_layer: usize,
}

impl Default for ExpansionScope {
    fn default() -> Self {
        Self {
            modules: GroupSet::ALL,
            start_layer: 1,
        }
    }
}

impl ExpansionScope {
    pub fn new(modules: GroupSet, start_layer: usize) -> Self {
        Self { modules, start_layer }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Config("expansion scope has no modules".into()));
        }
        if self.start_layer < 1 || self.start_layer > depth {
            return Err(Error::Config(format!(
                "start_layer {} outside 1..={depth}",
                self.start_layer
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ExpansionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.modules, self.start_layer)
    }
}

/// `(l−1)/L` for `1 ≤ l ≤ L`.
pub fn expansion_coefficient(l: usize, depth: usize) -> Result<f64> {
    if l < 1 || l > depth {
        return Err(contract(format!("layer {l} outside 1..={depth}")));
    }
    Ok((l - 1) as f64 / depth as f64)
}

/// Elements in one encoder layer: MSA `4D² + 4D`, MLP `2·D·D_h + D_h + D`, LN `4D`.
pub fn layer_param_count(cfg: &ModelConfig) -> usize {
    let (d, dh) = (cfg.dim, cfg.mlp_dim);
    let msa = 4 * d * d + 4 * d;
    let mlp = 2 * d * dh + dh + d;
    let ln = 4 * d;
    msa + mlp + ln
}

/// Elements in a learngene for `cfg`: exactly two layers.
pub fn learngene_param_count(cfg: &ModelConfig) -> usize {
    2 * layer_param_count(cfg)
}

/// θ_A, θ_B and the dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Learngene<T: Real = f32> {
    pub theta_a: LayerParams<Tensor<T>>,
    pub theta_b: LayerParams<Tensor<T>>,
    /// Layer dimensions; `depth` and image fields are not used by expansion.
    pub cfg: ModelConfig,
    pub scope: ExpansionScope,
}

impl<T: Real> Learngene<T> {
    /// θ_A = 0 and θ_B with standard layer initialization, so expansion starts
    /// from exact weight sharing.
    pub fn init(cfg: ModelConfig, scope: ExpansionScope, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            theta_a: LayerParams::zeros(&cfg),
            theta_b: LayerParams::init(&cfg, &mut rng),
            cfg,
            scope,
        })
    }

    pub fn from_parts(
        theta_a: LayerParams<Tensor<T>>,
        theta_b: LayerParams<Tensor<T>>,
        cfg: ModelConfig,
        scope: ExpansionScope,
    ) -> Result<Self> {
        theta_a.check_shapes(&cfg)?;
        theta_b.check_shapes(&cfg)?;
        Ok(Self { theta_a, theta_b, cfg, scope })
    }

    pub fn param_count(&self) -> usize {
        self.theta_a.numel() + self.theta_b.numel()
    }

    /// `θ_B + (l−1)/L · θ_A` over every slot.
    ///
    /// Only the groups in `scope.modules` are meant to be taken from the
    /// result; see [`Learngene::expand_into`].
    pub fn expand_layer(&self, l: usize, depth: usize) -> Result<LayerParams<Tensor<T>>> {
        let c = T::lit(expansion_coefficient(l, depth)?);
        self.theta_b.add_scaled(c, &self.theta_a)
    }

    /// Overwrites the in-scope groups of `target` with layer `l` of `depth`.
    pub fn expand_into(&self, l: usize, depth: usize, target: &mut LayerParams<Tensor<T>>) -> Result<()> {
        let expanded = self.expand_layer(l, depth)?;
        target.copy_groups_from(&expanded, self.scope.modules)
    }

    pub fn cast<U: Real>(&self) -> Learngene<U> {
        Learngene {
            theta_a: self.theta_a.cast(),
            theta_b: self.theta_b.cast(),
            cfg: self.cfg,
            scope: self.scope,
        }
    }
}

/// Folds per-layer gradients of expanded layers onto θ_A and θ_B.
///
/// `per_layer[i]` is the gradient for layer `first_layer + i` of a
/// `depth`-layer network. For every slot in `modules`,
/// `grad_B = Σ g_l` and `grad_A = Σ (l−1)/L · g_l`, summed in ascending `l`.
/// Slots outside `modules` receive zero.
pub fn accumulate_learngene_grads<T: Real>(
    per_layer: &[LayerParams<Tensor<T>>],
    first_layer: usize,
    depth: usize,
    modules: GroupSet,
) -> Result<(LayerParams<Tensor<T>>, LayerParams<Tensor<T>>)> {
    let first = per_layer
        .first()
        .ok_or_else(|| contract("no layer gradients to accumulate"))?;
    if first_layer < 1 || first_layer + per_layer.len() - 1 > depth {
        return Err(contract(format!(
            "{} gradients starting at layer {first_layer} exceed depth {depth}",
            per_layer.len()
        )));
    }
    let mut grad_a = first.map(|t| Tensor::zeros(t.shape()));
    let mut grad_b = grad_a.clone();
    let groups = first.slot_groups();
    for (i, g) in per_layer.iter().enumerate() {
        let c = T::lit(expansion_coefficient(first_layer + i, depth)?);
        if g.heads.len() != first.heads.len() {
            return Err(contract("layer gradients disagree on head count"));
        }
        let slots = grad_a
            .refs_mut()
            .into_iter()
            .zip(grad_b.refs_mut())
            .zip(g.refs())
            .zip(&groups);
        for (((ga, gb), gl), group) in slots {
            if !modules.contains(*group) {
                continue;
            }
            gb.axpy(T::one(), gl)?;
            ga.axpy(c, gl)?;
        }
    }
    Ok((grad_a, grad_b))
}
