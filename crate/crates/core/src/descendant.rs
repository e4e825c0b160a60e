//! Materializing descendant networks of any depth from a learngene.

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::learngene::Learngene;
use crate::tensor::{Real, Tensor};
use crate::vit::{GroupSet, LayerParams, NonLayerParams, Vit};

/// A descendant is an ordinary ViT with independently stored layers.
pub type DesNet<T = f32> = Vit<T>;

#[derive(Debug, Clone, PartialEq)]
pub struct DescendantSpec {
    pub depth: usize,
    /// 1-based, inclusive layers taken from the learngene.
    pub init_layers: RangeInclusive<usize>,
    /// Groups taken from the learngene; the rest are random.
    pub modules: GroupSet,
    pub num_classes: usize,
    /// Seed for every randomly initialized portion.
    pub seed: u64,
}

impl DescendantSpec {
    /// Every layer and group from the learngene.
    pub fn full(depth: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            depth,
            init_layers: 1..=depth,
            modules: GroupSet::ALL,
            num_classes,
            seed,
        }
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        Self {
            depth,
            init_layers: *self.init_layers.start()..=(*self.init_layers.end()).min(depth),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (*self.init_layers.start(), *self.init_layers.end());
        if self.depth == 0 {
            return Err(Error::Config("descendant depth must be at least 1".into()));
        }
        if a < 1 || a > b || b > self.depth {
            return Err(Error::Config(format!(
                "init layers {a}-{b} outside 1..={}",
                self.depth
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `A-B` (or a single layer `A`) into an inclusive range.
pub fn parse_layer_range(s: &str) -> Result<RangeInclusive<usize>> {
    let bad = || Error::Config(format!("expected layer range A-B, got '{s}'"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim(), b.trim()),
        None => (s.trim(), s.trim()),
    };
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

/// Builds a descendant of `spec.depth` layers.
///
/// Every layer is first randomly initialized (so random portions do not
/// depend on the range); layers in `spec.init_layers` then receive the
/// `spec.modules` groups of `θ_B + (l−1)/L_ds · θ_A`. Patch projection,
/// positional embeddings, class token and final norm come from `aux_nlp`;
/// the head is reused when the class count matches and re-initialized
/// otherwise.
pub fn materialize_descendant<T: Real>(
    lg: &Learngene<T>,
    spec: &DescendantSpec,
    aux_nlp: &NonLayerParams<Tensor<T>>,
) -> Result<DesNet<T>> {
    spec.validate()?;
    let cfg = lg.cfg.with_depth(spec.depth).with_classes(spec.num_classes);
    cfg.validate()?;
    let src_classes = aux_nlp.head_b.numel();
    let src_cfg = cfg.with_classes(src_classes);
    aux_nlp.check_shapes(&src_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.depth);
    for l in 1..=spec.depth {
        let mut layer = LayerParams::init(&cfg, &mut rng);
        if spec.init_layers.contains(&l) {
            let e = lg.expand_layer(l, spec.depth)?;
            layer.copy_groups_from(&e, spec.modules)?;
        }
        layers.push(layer);
    }
    let mut nlp = aux_nlp.clone();
    if src_classes != spec.num_classes {
        nlp.reinit_head(spec.num_classes, &mut rng);
    }
    Vit::from_parts(cfg, layers, nlp)
}

/// Parameters needed to initialize descendants, against storing one full
/// pretrained model per depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageAccounting {
    /// θ_A plus θ_B.
    pub learngene_params: usize,
    /// Transferred non-layer parameters, head excluded.
    pub transferred_params: usize,
    /// `learngene_params + transferred_params`; independent of the depths.
    pub stored_initializer_params: usize,
    /// `(depth, full model size)` for the pretrain-every-depth baseline.
    pub baseline_per_depth: Vec<(usize, usize)>,
    pub baseline_total: usize,
}

impl StorageAccounting {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,model_params,baseline_cumulative,learngene_params,stored_initializer_params\n");
        let mut cum = 0;
        for &(d, n) in &self.baseline_per_depth {
            cum += n;
            out.push_str(&format!(
                "{d},{n},{cum},{},{}\n",
                self.learngene_params, self.stored_initializer_params
            ));
        }
        out
    }
}

/// One descendant per depth from a single learngene.
pub fn depth_sweep<T: Real>(
    lg: &Learngene<T>,
    depths: &[usize],
    base: &DescendantSpec,
    aux_nlp: &NonLayerParams<Tensor<T>>,
) -> Result<(Vec<DesNet<T>>, StorageAccounting)> {
    if depths.is_empty() {
        return Err(contract("depth sweep needs at least one depth"));
    }
    let nets = depths
        .iter()
        .map(|&d| {
            let mut spec = base.with_depth(d);
            if *base.init_layers.end() == base.depth {
                spec.init_layers = *base.init_layers.start()..=d;
            }
            materialize_descendant(lg, &spec, aux_nlp)
        })
        .collect::<Result<Vec<_>>>()?;
    let transferred = aux_nlp.numel_without_head();
    let baseline_per_depth: Vec<(usize, usize)> =
        nets.iter().map(|n| (n.cfg.depth, n.param_count())).collect();
    let acct = StorageAccounting {
        learngene_params: lg.param_count(),
        transferred_params: transferred,
        stored_initializer_params: lg.param_count() + transferred,
        baseline_total: baseline_per_depth.iter().map(|p| p.1).sum(),
        baseline_per_depth,
    };
    Ok((nets, acct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learngene::ExpansionScope;
    use crate::training::AuxNet;
    use crate::vit::{ModelConfig, ParamGroup};
    use rand::Rng;

    fn trained_like() -> AuxNet<f32> {
        let cfg = ModelConfig::new(8, 6, 2, 16).with_image(4, 2, 3).with_classes(3);
        let mut aux = AuxNet::<f32>::init(cfg, ExpansionScope::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in aux.trainable_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        aux
    }

    #[test]
    fn second_layer_of_six() {
        let aux = trained_like();
        let lg = &aux.learngene;
        let des = materialize_descendant(lg, &DescendantSpec::full(6, 3, 0), &aux.nlp).unwrap();
        let want = Tensor::from_fn(lg.theta_b.heads[0].w_q.shape(), |i| {
            lg.theta_b.heads[0].w_q.data()[i] + (1.0f32 / 6.0) * lg.theta_a.heads[0].w_q.data()[i]
        });
        assert_eq!(des.layers[1].heads[0].w_q, want);
        assert_eq!(des.layers[0], lg.theta_b);
    }

    #[test]
    fn partial_layer_range() {
        let aux = trained_like();
        let lg = &aux.learngene;
        let spec = DescendantSpec { init_layers: 1..=3, ..DescendantSpec::full(6, 3, 4) };
        let a = materialize_descendant(lg, &spec, &aux.nlp).unwrap();
        let b = materialize_descendant(lg, &DescendantSpec { seed: 5, ..spec.clone() }, &aux.nlp).unwrap();
        for l in 1..=6 {
            let e = lg.expand_layer(l, 6).unwrap();
            if l <= 3 {
                assert_eq!(a.layers[l - 1], e);
                assert_eq!(a.layers[l - 1], b.layers[l - 1]);
            } else {
                assert_ne!(a.layers[l - 1].w1, e.w1);
                assert_ne!(a.layers[l - 1].w1, b.layers[l - 1].w1);
            }
        }
    }

    #[test]
    fn module_scope_msa_only() {
        let aux = trained_like();
        let lg = &aux.learngene;
        let spec = DescendantSpec { modules: GroupSet::only(ParamGroup::Msa), ..DescendantSpec::full(4, 3, 7) };
        let d = materialize_descendant(lg, &spec, &aux.nlp).unwrap();
        let e = lg.expand_layer(3, 4).unwrap();
        assert_eq!(d.layers[2].w_o, e.w_o);
        assert_ne!(d.layers[2].w1, e.w1);
        // LN slots are random-initialized, i.e. back at γ=1, β=0
        assert_eq!(d.layers[2].ln1_gamma, Tensor::ones(&[8]));
    }

    #[test]
    fn equal_depth_matches_aux_logits() {
        let aux = trained_like();
        let d = materialize_descendant(&aux.learngene, &DescendantSpec::full(6, 3, 0), &aux.nlp).unwrap();
        let x = Tensor::from_fn(&[5, 3, 4, 4], |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
        let diff = d.logits(&x).unwrap().max_abs_diff(&aux.logits(&x).unwrap()).unwrap();
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn head_reinit_and_pos_mismatch() {
        let aux = trained_like();
        let d = materialize_descendant(&aux.learngene, &DescendantSpec::full(4, 7, 0), &aux.nlp).unwrap();
        assert_eq!(d.nlp.head_w.shape(), &[8, 7]);
        assert_eq!(d.nlp.pos, aux.nlp.pos);
        let mut bad = aux.nlp.clone();
        bad.pos = Tensor::zeros(&[9, 8]);
        assert!(materialize_descendant(&aux.learngene, &DescendantSpec::full(4, 3, 0), &bad).is_err());
    }

    #[test]
    fn sweep_storage_is_constant() {
        let aux = trained_like();
        let base = DescendantSpec::full(4, 3, 0);
        let (nets, acct) = depth_sweep(&aux.learngene, &[4, 6, 8], &base, &aux.nlp).unwrap();
        assert_eq!(nets.len(), 3);
        let (_, one) = depth_sweep(&aux.learngene, &[4], &base, &aux.nlp).unwrap();
        assert_eq!(acct.stored_initializer_params, one.stored_initializer_params);
        assert_eq!(acct.learngene_params, 2 * crate::learngene::layer_param_count(&aux.cfg));
        assert!(acct.baseline_total > one.baseline_total);
        for n in &nets {
            assert_eq!(n.layers[0], aux.learngene.theta_b);
        }
        let direct = materialize_descendant(&aux.learngene, &base, &aux.nlp).unwrap();
        assert_eq!(one.baseline_per_depth, vec![(4, direct.param_count())]);
    }

    #[test]
    fn deterministic_and_independent_storage() {
        let aux = trained_like();
        let spec = DescendantSpec { init_layers: 2..=3, ..DescendantSpec::full(5, 3, 9) };
        let a = materialize_descendant(&aux.learngene, &spec, &aux.nlp).unwrap();
        let mut b = materialize_descendant(&aux.learngene, &spec, &aux.nlp).unwrap();
        assert_eq!(a, b);
        b.layers[1].w1.data_mut()[0] += 1.0;
        assert_eq!(a.layers[2], b.layers[2]);
    }

    #[test]
    fn layer_range_parsing() {
        assert_eq!(parse_layer_range("1-3").unwrap(), 1..=3);
        assert_eq!(parse_layer_range("4").unwrap(), 4..=4);
        assert!(parse_layer_range("3-1").is_err());
        assert!(parse_layer_range("0-2").is_err());
        assert!(parse_layer_range("x").is_err());
    }
}
