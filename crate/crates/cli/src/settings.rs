//! Resolved run configuration: built-in defaults, then the config file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use tleg_core::harness::data::{DatasetKind, DatasetSource, Normalization, Split, CIFAR10_MEAN, CIFAR10_STD};
use tleg_core::harness::KvConfig;
use tleg_core::learngene::ExpansionScope;
use tleg_core::training::TrainConfig;
use tleg_core::vit::{GroupSet, ModelConfig};
use tleg_core::{Error, Result};

pub fn defaults() -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("seed", 0);
    kv.set("data.kind", DatasetKind::Synthetic);
    kv.set("data.path", "");
    kv.set("data.seed", 0);
    kv.set("data.train_samples", 2000);
    kv.set("data.test_samples", 1000);
    kv.set("data.num_classes", 10);
    kv.set("data.image_size", 16);
    kv.set("data.normalize", true);
    kv.set("data.mean", join(&CIFAR10_MEAN));
    kv.set("data.std", join(&CIFAR10_STD));
    kv.set("vit.patch_size", 4);
    for (p, dim, depth, heads, mlp) in [("teacher", 64, 8, 4, 128), ("aux", 32, 6, 2, 64)] {
        kv.set(&format!("{p}.dim"), dim);
        kv.set(&format!("{p}.depth"), depth);
        kv.set(&format!("{p}.heads"), heads);
        kv.set(&format!("{p}.mlp_dim"), mlp);
    }
    kv.set("aux.modules", GroupSet::ALL);
    kv.set("aux.start_layer", 1);
    let teacher = TrainConfig { epochs: 15, warmup_steps: 50, ..Default::default() };
    let aux = TrainConfig { epochs: 15, lr: 2e-3, ..Default::default() };
    let fine = TrainConfig { epochs: 3, ..Default::default() };
    for (p, tc) in [("teacher.train.", teacher), ("aux.train.", aux), ("finetune.", fine)] {
        tc.to_kv(&mut kv, p);
        kv.remove(&format!("{p}seed"));
    }
    kv.set("expand.init_layers", "all");
    kv.set("expand.modules", "inherit");
    kv.set("expand.num_classes", "inherit");
    kv.set("sweep.depths", "2,4,6");
    kv.set("sweep.seeds", "0,1,2");
    kv
}

fn join(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}'")))
        })
        .collect()
}

/// Defaults merged with an optional file and then with `overrides`.
pub fn resolve(file: Option<&Path>, overrides: &KvConfig) -> Result<KvConfig> {
    let mut kv = defaults();
    if let Some(p) = file {
        let text = std::fs::read_to_string(p)?;
        let file_kv = KvConfig::parse(&text)?;
        for k in file_kv.keys() {
            if !kv.contains(k) {
                return Err(Error::Config(format!("unknown key '{k}' in {}", p.display())));
            }
        }
        kv.merge(&file_kv);
    }
    kv.merge(overrides);
    Ok(kv)
}

pub fn seed(kv: &KvConfig) -> Result<u64> {
    kv.require("seed")
}

pub fn dataset(kv: &KvConfig, split: Split) -> Result<DatasetSource> {
    let kind: DatasetKind = kv.require("data.kind")?;
    let path = kv.get("data.path").unwrap_or("");
    let normalization = if kv.require::<bool>("data.normalize")? && kind != DatasetKind::Synthetic {
        Some(Normalization {
            mean: parse_list("data.mean", kv.get("data.mean").unwrap_or(""))?,
            std: parse_list("data.std", kv.get("data.std").unwrap_or(""))?,
        })
    } else {
        None
    };
    let samples_key = match split {
        Split::Train => "data.train_samples",
        Split::Test => "data.test_samples",
    };
    let samples = match kv.get(samples_key) {
        Some("all") | Some("") | None => None,
        Some(_) => Some(kv.require(samples_key)?),
    };
    Ok(DatasetSource {
        kind,
        location: (!path.is_empty()).then(|| PathBuf::from(path)),
        split,
        normalization,
        seed: kv.require("data.seed")?,
        samples,
        num_classes: kv.require("data.num_classes")?,
        image_size: kv.require("data.image_size")?,
    })
}

/// Model dimensions under `prefix` (`teacher` or `aux`) with the data's
/// image size and class count.
pub fn model(kv: &KvConfig, prefix: &str) -> Result<ModelConfig> {
    let cfg = ModelConfig::new(
        kv.require(&format!("{prefix}.dim"))?,
        kv.require(&format!("{prefix}.depth"))?,
        kv.require(&format!("{prefix}.heads"))?,
        kv.require(&format!("{prefix}.mlp_dim"))?,
    )
    .with_image(kv.require("data.image_size")?, kv.require("vit.patch_size")?, 3)
    .with_classes(kv.require("data.num_classes")?);
    cfg.validate()?;
    Ok(cfg)
}

pub fn scope(kv: &KvConfig) -> Result<ExpansionScope> {
    Ok(ExpansionScope::new(kv.require("aux.modules")?, kv.require("aux.start_layer")?))
}

/// Training recipe under `prefix`, seeded by the global seed.
pub fn train(kv: &KvConfig, prefix: &str) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default().from_kv(kv, prefix)?;
    tc.seed = seed(kv)?;
    Ok(tc)
}
