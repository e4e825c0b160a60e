//! The auxiliary network whose in-scope layers are generated from a
//! learngene at every forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::learngene::{accumulate_learngene_grads, ExpansionScope, Learngene};
use crate::tensor::{ComputationRecord, Gradients, KlDirection, Real, Tensor, Var};
use crate::vit::{record, GroupSet, LayerParams, ModelConfig, NonLayerParams};

use super::loss::{record_loss, LossParts};

#[derive(Debug, Clone, PartialEq)]
pub struct AuxNet<T: Real = f32> {
    pub learngene: Learngene<T>,
    /// Layers `1..start_layer`, trained independently.
    pub free_layers: Vec<LayerParams<Tensor<T>>>,
    /// Layers `start_layer..=L`. Only slots outside `scope.modules` are read;
    /// empty when the scope covers every group.
    pub unscoped: Vec<LayerParams<Tensor<T>>>,
    pub nlp: NonLayerParams<Tensor<T>>,
    /// `depth` is the Aux-Net depth `L`.
    pub cfg: ModelConfig,
}

/// Gradients of every trainable part of an [`AuxNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuxGrads<T: Real> {
    pub theta_a: LayerParams<Tensor<T>>,
    pub theta_b: LayerParams<Tensor<T>>,
    pub free_layers: Vec<LayerParams<Tensor<T>>>,
    pub unscoped: Vec<LayerParams<Tensor<T>>>,
    pub nlp: NonLayerParams<Tensor<T>>,
}

impl<T: Real> AuxNet<T> {
    pub fn init(cfg: ModelConfig, scope: ExpansionScope, seed: u64) -> Result<Self> {
        cfg.validate()?;
        scope.validate(cfg.depth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nlp = NonLayerParams::init(&cfg, &mut rng);
        let theta_b = LayerParams::init(&cfg, &mut rng);
        let learngene = Learngene::from_parts(LayerParams::zeros(&cfg), theta_b, cfg, scope)?;
        let free_layers = (1..scope.start_layer).map(|_| LayerParams::init(&cfg, &mut rng)).collect();
        let unscoped = if scope.modules.is_all() {
            Vec::new()
        } else {
            // in-scope slots are never read; keep them zero
            let zeros = LayerParams::zeros(&cfg);
            (scope.start_layer..=cfg.depth)
                .map(|_| {
                    let mut l = LayerParams::init(&cfg, &mut rng);
                    l.copy_groups_from(&zeros, scope.modules)?;
                    Ok(l)
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { learngene, free_layers, unscoped, nlp, cfg })
    }

    pub fn from_parts(
        learngene: Learngene<T>,
        free_layers: Vec<LayerParams<Tensor<T>>>,
        unscoped: Vec<LayerParams<Tensor<T>>>,
        nlp: NonLayerParams<Tensor<T>>,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let scope = learngene.scope;
        scope.validate(cfg.depth)?;
        if !cfg.same_layer_shape(&learngene.cfg) {
            return Err(contract("learngene and Aux-Net layer shapes differ"));
        }
        if free_layers.len() != scope.start_layer - 1 {
            return Err(contract(format!(
                "{} free layers for start_layer {}",
                free_layers.len(),
                scope.start_layer
            )));
        }
        let want_unscoped = if scope.modules.is_all() { 0 } else { cfg.depth - scope.start_layer + 1 };
        if unscoped.len() != want_unscoped {
            return Err(contract(format!(
                "{} unscoped layers, expected {want_unscoped}",
                unscoped.len()
            )));
        }
        for l in free_layers.iter().chain(&unscoped) {
            l.check_shapes(&cfg)?;
        }
        nlp.check_shapes(&cfg)?;
        Ok(Self { learngene, free_layers, unscoped, nlp, cfg })
    }

    pub fn scope(&self) -> ExpansionScope {
        self.learngene.scope
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    /// 1-based indices of the generated layers.
    pub fn expanded_range(&self) -> std::ops::RangeInclusive<usize> {
        self.scope().start_layer..=self.cfg.depth
    }

    /// Parameters of layer `l` (1-based), regenerated from the learngene for
    /// expanded layers.
    pub fn layer(&self, l: usize) -> Result<LayerParams<Tensor<T>>> {
        let s = self.scope().start_layer;
        if l < 1 || l > self.cfg.depth {
            return Err(contract(format!("layer {l} outside 1..={}", self.cfg.depth)));
        }
        if l < s {
            return Ok(self.free_layers[l - 1].clone());
        }
        let expanded = self.learngene.expand_layer(l, self.cfg.depth)?;
        if self.unscoped.is_empty() {
            return Ok(expanded);
        }
        let mut out = self.unscoped[l - s].clone();
        out.copy_groups_from(&expanded, self.scope().modules)?;
        Ok(out)
    }

    pub fn layers(&self) -> Result<Vec<LayerParams<Tensor<T>>>> {
        (1..=self.cfg.depth).map(|l| self.layer(l)).collect()
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        crate::vit::forward(images, &self.layers()?, &self.nlp, &self.cfg)
    }

    /// Loss on one batch and the gradient of every trainable part.
    ///
    /// Gradients of the generated layers are folded onto θ_A and θ_B.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        teacher: Option<&Tensor<T>>,
        lambda: f64,
        tau: f64,
        direction: KlDirection,
    ) -> Result<(LossParts, AuxGrads<T>)> {
        let mut rec = ComputationRecord::new();
        let layers = self.layers()?;
        let lv: Vec<LayerParams<Var>> = layers.iter().map(|l| l.register(&mut rec)).collect();
        let nv = self.nlp.register(&mut rec);
        let logits = record::forward(&mut rec, images, &lv, &nv, &self.cfg)?;
        let (loss, parts) = record_loss(&mut rec, logits, labels, teacher, lambda, tau, direction)?;
        let mut g = rec.backward(loss)?;
        let grads = self.fold(&lv, &nv, &mut g)?;
        Ok((parts, grads))
    }

    fn fold(
        &self,
        lv: &[LayerParams<Var>],
        nv: &NonLayerParams<Var>,
        g: &mut Gradients<T>,
    ) -> Result<AuxGrads<T>> {
        let scope = self.scope();
        let s = scope.start_layer;
        let per_layer: Vec<LayerParams<Tensor<T>>> =
            lv.iter().map(|l| l.map(|&v| g.take(v))).collect();
        let (theta_a, theta_b) =
            accumulate_learngene_grads(&per_layer[s - 1..], s, self.cfg.depth, scope.modules)?;
        let free_layers = per_layer[..s - 1].to_vec();
        let unscoped = if self.unscoped.is_empty() {
            Vec::new()
        } else {
            per_layer[s - 1..].to_vec()
        };
        let nlp = nv.map(|&v| g.take(v));
        Ok(AuxGrads { theta_a, theta_b, free_layers, unscoped, nlp })
    }

    /// Trainable tensors in a fixed order: in-scope θ_A slots, in-scope θ_B
    /// slots, free layers, out-of-scope slots of generated layers, non-layer
    /// parameters.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let modules = self.learngene.scope.modules;
        let mut out = Vec::new();
        let groups = self.learngene.theta_a.slot_groups();
        for theta in [&mut self.learngene.theta_a, &mut self.learngene.theta_b] {
            out.extend(pick(theta.refs_mut(), &groups, modules));
        }
        for l in &mut self.free_layers {
            out.extend(l.refs_mut());
        }
        let outside = complement(modules);
        for l in &mut self.unscoped {
            out.extend(pick(l.refs_mut(), &groups, outside));
        }
        out.extend(self.nlp.refs_mut());
        out
    }

    /// Number of trainable elements.
    pub fn trainable_count(&mut self) -> usize {
        self.trainable_mut().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> AuxNet<U> {
        AuxNet {
            learngene: self.learngene.cast(),
            free_layers: self.free_layers.iter().map(|l| l.cast()).collect(),
            unscoped: self.unscoped.iter().map(|l| l.cast()).collect(),
            nlp: self.nlp.cast(),
            cfg: self.cfg,
        }
    }
}

impl<T: Real> AuxGrads<T> {
    /// Flattened in the order of [`AuxNet::trainable_mut`].
    pub fn into_ordered(self, modules: GroupSet) -> Vec<Tensor<T>> {
        let groups = self.theta_a.slot_groups();
        let owned = |l: LayerParams<Tensor<T>>| -> Vec<Tensor<T>> {
            l.refs().into_iter().cloned().collect()
        };
        let keep = |l: LayerParams<Tensor<T>>, set: GroupSet| -> Vec<Tensor<T>> {
            owned(l)
                .into_iter()
                .zip(&groups)
                .filter(|(_, g)| set.contains(**g))
                .map(|(t, _)| t)
                .collect()
        };
        let mut out = keep(self.theta_a, modules);
        out.extend(keep(self.theta_b, modules));
        for l in self.free_layers {
            out.extend(owned(l));
        }
        let outside = complement(modules);
        for l in self.unscoped {
            out.extend(keep(l, outside));
        }
        out.extend(self.nlp.refs().into_iter().cloned());
        out
    }
}

fn complement(g: GroupSet) -> GroupSet {
    GroupSet::from_groups(crate::vit::ParamGroup::ALL.into_iter().filter(|x| !g.contains(*x)))
}

fn pick<'a, T>(
    refs: Vec<&'a mut T>,
    groups: &[crate::vit::ParamGroup],
    set: GroupSet,
) -> Vec<&'a mut T> {
    refs.into_iter()
        .zip(groups)
        .filter(|(_, g)| set.contains(**g))
        .map(|(t, _)| t)
        .collect()
}
