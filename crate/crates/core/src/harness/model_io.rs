//! Model, learngene and Aux-Net conversion to and from checkpoints.
//!
//! Tensor names:
//! - ViT layers `layer.{l}.{group}.{slot}`, non-layer `nlp.{name}`
//! - learngene `learngene.A.{group}.{slot}` and `learngene.B.{group}.{slot}`
//! - Aux-Net free layers `free.{l}.{group}.{slot}`, out-of-scope slots of
//!   generated layers `unscoped.{l}.{group}.{slot}`

use crate::error::{Error, Result};
use crate::learngene::{ExpansionScope, Learngene};
use crate::tensor::Tensor;
use crate::training::AuxNet;
use crate::vit::{GroupSet, LayerParams, ModelConfig, NonLayerParams, Vit};

use super::checkpoint::Checkpoint;
use super::config::KvConfig;

pub const KIND_VIT: &str = "vit";
pub const KIND_LEARNGENE: &str = "learngene";
pub const KIND_AUX: &str = "aux";

fn push_layer(
    ck: &mut Checkpoint,
    prefix: &str,
    layer: &LayerParams<Tensor<f32>>,
    cfg: &ModelConfig,
    groups: GroupSet,
) {
    let slots = LayerParams::slots(cfg);
    for (s, t) in slots.refs().into_iter().zip(layer.refs()) {
        if groups.contains(s.group) {
            ck.push(format!("{prefix}{}", s.qualified()), t.clone());
        }
    }
}

fn read_layer(
    ck: &Checkpoint,
    prefix: &str,
    cfg: &ModelConfig,
    groups: GroupSet,
) -> Result<LayerParams<Tensor<f32>>> {
    LayerParams::slots(cfg).try_map(|s| {
        if !groups.contains(s.group) {
            return Ok(Tensor::zeros(&s.shape));
        }
        let name = format!("{prefix}{}", s.qualified());
        let t = ck.require(&name)?;
        if t.shape() != s.shape.as_slice() {
            return Err(Error::Data(format!(
                "tensor '{name}' has shape {:?}, config needs {:?}",
                t.shape(),
                s.shape
            )));
        }
        Ok(t.clone())
    })
}

fn push_nlp(ck: &mut Checkpoint, nlp: &NonLayerParams<Tensor<f32>>, cfg: &ModelConfig) {
    let slots = NonLayerParams::slots(cfg);
    for (s, t) in slots.refs().into_iter().zip(nlp.refs()) {
        ck.push(format!("nlp.{}", s.name), t.clone());
    }
}

fn read_nlp(ck: &Checkpoint, cfg: &ModelConfig) -> Result<NonLayerParams<Tensor<f32>>> {
    let nlp = NonLayerParams::slots(cfg).try_map(|s| ck.require(&format!("nlp.{}", s.name)).cloned())?;
    nlp.check_shapes(cfg)?;
    Ok(nlp)
}

fn header(kind: &str, cfg: &ModelConfig, extra: &KvConfig) -> KvConfig {
    let mut kv = extra.clone();
    kv.set("kind", kind);
    kv.set_model("model.", cfg);
    kv
}

fn set_scope(kv: &mut KvConfig, scope: &ExpansionScope) {
    kv.set("scope.modules", scope.modules);
    kv.set("scope.start_layer", scope.start_layer);
}

fn read_scope(kv: &KvConfig) -> Result<ExpansionScope> {
    Ok(ExpansionScope::new(
        kv.require("scope.modules")?,
        kv.require("scope.start_layer")?,
    ))
}

pub fn vit_to_checkpoint(vit: &Vit<f32>, extra: &KvConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(header(KIND_VIT, &vit.cfg, extra).render());
    for (i, l) in vit.layers.iter().enumerate() {
        push_layer(&mut ck, &format!("layer.{}.", i + 1), l, &vit.cfg, GroupSet::ALL);
    }
    push_nlp(&mut ck, &vit.nlp, &vit.cfg);
    ck
}

fn push_learngene(ck: &mut Checkpoint, lg: &Learngene<f32>) {
    push_layer(ck, "learngene.A.", &lg.theta_a, &lg.cfg, GroupSet::ALL);
    push_layer(ck, "learngene.B.", &lg.theta_b, &lg.cfg, GroupSet::ALL);
}

/// Learngene plus the non-layer parameters descendants inherit. `cfg` is the
/// Aux-Net configuration the learngene was trained in.
pub fn learngene_to_checkpoint(
    lg: &Learngene<f32>,
    nlp: &NonLayerParams<Tensor<f32>>,
    cfg: &ModelConfig,
    extra: &KvConfig,
) -> Checkpoint {
    let mut kv = header(KIND_LEARNGENE, cfg, extra);
    set_scope(&mut kv, &lg.scope);
    let mut ck = Checkpoint::new(kv.render());
    push_learngene(&mut ck, lg);
    push_nlp(&mut ck, nlp, cfg);
    ck
}

pub fn aux_to_checkpoint(aux: &AuxNet<f32>, extra: &KvConfig) -> Checkpoint {
    let mut kv = header(KIND_AUX, &aux.cfg, extra);
    let scope = aux.scope();
    set_scope(&mut kv, &scope);
    let mut ck = Checkpoint::new(kv.render());
    push_learngene(&mut ck, &aux.learngene);
    for (i, l) in aux.free_layers.iter().enumerate() {
        push_layer(&mut ck, &format!("free.{}.", i + 1), l, &aux.cfg, GroupSet::ALL);
    }
    let outside = GroupSet::from_groups(
        crate::vit::ParamGroup::ALL.into_iter().filter(|g| !scope.modules.contains(*g)),
    );
    for (i, l) in aux.unscoped.iter().enumerate() {
        push_layer(&mut ck, &format!("unscoped.{}.", scope.start_layer + i), l, &aux.cfg, outside);
    }
    push_nlp(&mut ck, &aux.nlp, &aux.cfg);
    ck
}

/// Anything a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Vit(Vit<f32>),
    Learngene {
        learngene: Learngene<f32>,
        nlp: NonLayerParams<Tensor<f32>>,
        cfg: ModelConfig,
    },
    Aux(AuxNet<f32>),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Vit(_) => KIND_VIT,
            Artifact::Learngene { .. } => KIND_LEARNGENE,
            Artifact::Aux(_) => KIND_AUX,
        }
    }

    /// Learngene, inherited non-layer parameters and training config, for
    /// learngene and Aux-Net checkpoints.
    pub fn into_learngene(self) -> Result<(Learngene<f32>, NonLayerParams<Tensor<f32>>, ModelConfig)> {
        match self {
            Artifact::Learngene { learngene, nlp, cfg } => Ok((learngene, nlp, cfg)),
            Artifact::Aux(aux) => Ok((aux.learngene, aux.nlp, aux.cfg)),
            Artifact::Vit(_) => Err(Error::Data("checkpoint holds a plain ViT, not a learngene".into())),
        }
    }
}

pub fn artifact_from_checkpoint(ck: &Checkpoint) -> Result<(Artifact, KvConfig)> {
    let kv = KvConfig::parse(&ck.config)?;
    let kind: String = kv.require("kind")?;
    let cfg = kv.model("model.")?;
    let art = match kind.as_str() {
        KIND_VIT => {
            let layers = (1..=cfg.depth)
                .map(|l| read_layer(ck, &format!("layer.{l}."), &cfg, GroupSet::ALL))
                .collect::<Result<Vec<_>>>()?;
            Artifact::Vit(Vit::from_parts(cfg, layers, read_nlp(ck, &cfg)?)?)
        }
        KIND_LEARNGENE | KIND_AUX => {
            let scope = read_scope(&kv)?;
            let a = read_layer(ck, "learngene.A.", &cfg, GroupSet::ALL)?;
            let b = read_layer(ck, "learngene.B.", &cfg, GroupSet::ALL)?;
            let learngene = Learngene::from_parts(a, b, cfg, scope)?;
            let nlp = read_nlp(ck, &cfg)?;
            if kind == KIND_LEARNGENE {
                Artifact::Learngene { learngene, nlp, cfg }
            } else {
                let free = (1..scope.start_layer)
                    .map(|l| read_layer(ck, &format!("free.{l}."), &cfg, GroupSet::ALL))
                    .collect::<Result<Vec<_>>>()?;
                let unscoped = if scope.modules.is_all() {
                    Vec::new()
                } else {
                    let outside = GroupSet::from_groups(
                        crate::vit::ParamGroup::ALL.into_iter().filter(|g| !scope.modules.contains(*g)),
                    );
                    (scope.start_layer..=cfg.depth)
                        .map(|l| read_layer(ck, &format!("unscoped.{l}."), &cfg, outside))
                        .collect::<Result<Vec<_>>>()?
                };
                Artifact::Aux(AuxNet::from_parts(learngene, free, unscoped, nlp, cfg)?)
            }
        }
        other => return Err(Error::Data(format!("unknown checkpoint kind '{other}'"))),
    };
    Ok((art, kv))
}

pub fn save_artifact(art: &Artifact, extra: &KvConfig, path: &std::path::Path) -> Result<()> {
    let ck = match art {
        Artifact::Vit(v) => vit_to_checkpoint(v, extra),
        Artifact::Learngene { learngene, nlp, cfg } => learngene_to_checkpoint(learngene, nlp, cfg, extra),
        Artifact::Aux(a) => aux_to_checkpoint(a, extra),
    };
    ck.save(path)
}

pub fn load_artifact(path: &std::path::Path) -> Result<(Artifact, KvConfig)> {
    artifact_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ParamGroup;

    fn cfg() -> ModelConfig {
        ModelConfig::new(8, 4, 2, 16).with_image(4, 2, 3).with_classes(3)
    }

    #[test]
    fn vit_round_trip_and_names() {
        let v = Vit::<f32>::init(cfg(), 1).unwrap();
        let ck = vit_to_checkpoint(&v, &KvConfig::new());
        assert!(ck.get("layer.1.msa.head0.w_q").is_some());
        assert!(ck.get("layer.4.ln.beta2").is_some());
        assert!(ck.get("nlp.pos").is_some());
        assert_eq!(ck.numel(), v.param_count());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (art, _) = artifact_from_checkpoint(&back).unwrap();
        assert_eq!(art, Artifact::Vit(v));
    }

    #[test]
    fn learngene_holds_exactly_two_layers() {
        let aux = AuxNet::<f32>::init(cfg(), ExpansionScope::default(), 2).unwrap();
        let ck = learngene_to_checkpoint(&aux.learngene, &aux.nlp, &aux.cfg, &KvConfig::new());
        let lg_elems: usize = ck
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("learngene."))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(lg_elems, 2 * crate::learngene::layer_param_count(&aux.cfg));
        assert!(ck.get("learngene.A.mlp.w1").is_some());
        let (art, _) = artifact_from_checkpoint(&ck).unwrap();
        let (lg, nlp, c) = art.into_learngene().unwrap();
        assert_eq!((lg, nlp, c), (aux.learngene, aux.nlp, aux.cfg));
    }

    #[test]
    fn aux_round_trip_with_partial_scope() {
        let scope = ExpansionScope::new(GroupSet::only(ParamGroup::Mlp), 2);
        let aux = AuxNet::<f32>::init(cfg(), scope, 3).unwrap();
        let ck = aux_to_checkpoint(&aux, &KvConfig::new());
        assert!(ck.get("free.1.msa.w_o").is_some());
        assert!(ck.get("unscoped.2.msa.w_o").is_some());
        assert!(ck.get("unscoped.2.mlp.w1").is_none());
        let (art, _) = artifact_from_checkpoint(&ck).unwrap();
        assert_eq!(art, Artifact::Aux(aux));
    }

    #[test]
    fn missing_tensor_is_data_error() {
        let v = Vit::<f32>::init(cfg(), 1).unwrap();
        let mut ck = vit_to_checkpoint(&v, &KvConfig::new());
        ck.tensors.retain(|(n, _)| n != "nlp.cls");
        assert!(matches!(artifact_from_checkpoint(&ck), Err(Error::Data(_))));
    }
}
