use std::path::{Path, PathBuf};
use std::time::Instant;

use tleg_core::analysis::{analyze_layers, reports_csv, LinearityReport};
use tleg_core::descendant::{depth_sweep, parse_layer_range, DescendantSpec, StorageAccounting};
use tleg_core::harness::data::{Dataset, Split};
use tleg_core::harness::eval::evaluate;
use tleg_core::harness::model_io::{
    aux_to_checkpoint, learngene_to_checkpoint, load_artifact, vit_to_checkpoint, Artifact,
};
use tleg_core::harness::sweep::{run_sweep, SweepPlan};
use tleg_core::harness::{write_atomic, KvConfig, MetricsLog};
use tleg_core::learngene::Learngene;
use tleg_core::tensor::Tensor;
use tleg_core::training::{self, AuxNet, TrainReport};
use tleg_core::vit::{GroupSet, NonLayerParams, Vit};
use tleg_core::{Error, Result};

use crate::settings::{self, parse_list};
use crate::CliResult;

fn load_data(kv: &KvConfig, split: Split) -> Result<Dataset> {
    let ds = settings::dataset(kv, split)?.load()?;
    eprintln!("loaded {} {split} samples", ds.len());
    Ok(ds)
}

fn print_report(run: &str, r: &TrainReport) {
    for e in &r.epochs {
        let acc = e.eval.map(|a| format!(" top1 {:.4}", a.top1)).unwrap_or_default();
        eprintln!(
            "[{run}] epoch {} loss {:.4} (ce {:.4}, kd {:.4}){acc} {:.1}s",
            e.epoch, e.train_loss, e.ce_loss, e.kd_loss, e.seconds
        );
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_metrics(path: &Path, run: &str, r: &TrainReport) -> Result<()> {
    let mut log = MetricsLog::new();
    log.extend(r.rows(run))?;
    let p = sibling(path, "metrics.csv");
    log.write(&p)?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

pub fn train_teacher(kv: &KvConfig, out: &Path) -> CliResult<()> {
    let train = load_data(kv, Split::Train)?;
    let test = load_data(kv, Split::Test)?;
    let cfg = settings::model(kv, "teacher")?;
    let tc = settings::train(kv, "teacher.train.")?;
    let mut vit = Vit::<f32>::init(cfg, tc.seed)?;
    let report = training::finetune(&mut vit, &train, Some(&test), &tc)?;
    print_report("teacher", &report);
    ensure_parent(out)?;
    vit_to_checkpoint(&vit, kv).save(out)?;
    write_metrics(out, "teacher", &report)?;
    println!("teacher written to {}", out.display());
    Ok(())
}

fn load_teacher(path: &Path) -> Result<Vit<f32>> {
    match load_artifact(path)?.0 {
        Artifact::Vit(v) => Ok(v),
        other => Err(Error::Data(format!(
            "{} holds a {} checkpoint, a teacher must be a plain ViT",
            path.display(),
            other.kind()
        ))),
    }
}

fn stage_one(kv: &KvConfig, teacher: &Vit<f32>, train: &Dataset, test: &Dataset) -> Result<(AuxNet<f32>, TrainReport)> {
    let cfg = settings::model(kv, "aux")?;
    let tc = settings::train(kv, "aux.train.")?;
    let mut aux = AuxNet::<f32>::init(cfg, settings::scope(kv)?, tc.seed)?;
    let report = training::train_aux(&mut aux, teacher, train, Some(test), &tc)?;
    print_report("aux", &report);
    Ok((aux, report))
}

pub fn train_aux(kv: &KvConfig, teacher: &Path, out: &Path, aux_out: &Path) -> CliResult<()> {
    let teacher = load_teacher(teacher)?;
    let train = load_data(kv, Split::Train)?;
    let test = load_data(kv, Split::Test)?;
    let (aux, report) = stage_one(kv, &teacher, &train, &test)?;
    ensure_parent(out)?;
    ensure_parent(aux_out)?;
    learngene_to_checkpoint(&aux.learngene, &aux.nlp, &aux.cfg, kv).save(out)?;
    aux_to_checkpoint(&aux, kv).save(aux_out)?;
    write_metrics(out, "aux", &report)?;
    println!(
        "learngene ({} parameters) written to {}; Aux-Net written to {}",
        aux.learngene.param_count(),
        out.display(),
        aux_out.display()
    );
    Ok(())
}

fn load_learngene(path: &Path) -> Result<(Learngene<f32>, NonLayerParams<Tensor<f32>>)> {
    let (lg, nlp, _) = load_artifact(path)?.0.into_learngene()?;
    Ok((lg, nlp))
}

/// Descendant template from the `expand.*` keys.
fn descendant_spec(kv: &KvConfig, lg: &Learngene<f32>, nlp: &NonLayerParams<Tensor<f32>>, depth: usize) -> Result<DescendantSpec> {
    let init_layers = match kv.get("expand.init_layers").unwrap_or("all") {
        "all" => 1..=depth,
        r => parse_layer_range(r)?,
    };
    let modules = match kv.get("expand.modules").unwrap_or("inherit") {
        "inherit" => lg.scope.modules,
        m => m.parse::<GroupSet>()?,
    };
    let num_classes = match kv.get("expand.num_classes").unwrap_or("inherit") {
        "inherit" => nlp.head_b.numel(),
        _ => kv.require("expand.num_classes")?,
    };
    Ok(DescendantSpec { depth, init_layers, modules, num_classes, seed: settings::seed(kv)? })
}

fn print_accounting(a: &StorageAccounting) {
    println!(
        "stored initializer: {} parameters (learngene {} + transferred {}), for any number of depths",
        a.stored_initializer_params, a.learngene_params, a.transferred_params
    );
    println!("pretrain-per-depth baseline: {} parameters", a.baseline_total);
}

pub fn expand(kv: &KvConfig, learngene: &Path, depths: &[usize], out_dir: &Path) -> CliResult<()> {
    let (lg, nlp) = load_learngene(learngene)?;
    let base = descendant_spec(kv, &lg, &nlp, depths[0])?;
    let all_layers = kv.get("expand.init_layers") == Some("all");
    std::fs::create_dir_all(out_dir)?;
    for &d in depths {
        let mut spec = base.with_depth(d);
        if all_layers {
            spec.init_layers = 1..=d;
        } else {
            spec.init_layers = base.init_layers.clone();
        }
        spec.validate()?;
        let (nets, _) = depth_sweep(&lg, &[d], &spec, &nlp)?;
        let path = out_dir.join(format!("des_d{d}.ckpt"));
        vit_to_checkpoint(&nets[0], kv).save(&path)?;
        println!(
            "depth {d}: layers {}-{} ({}) from learngene -> {}",
            spec.init_layers.start(),
            spec.init_layers.end(),
            spec.modules,
            path.display()
        );
    }
    let full = DescendantSpec::full(depths[0], base.num_classes, base.seed);
    let (_, acct) = depth_sweep(&lg, depths, &full, &nlp)?;
    print_accounting(&acct);
    Ok(())
}

pub fn finetune(kv: &KvConfig, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let mut des = match load_artifact(checkpoint)?.0 {
        Artifact::Vit(v) => v,
        other => {
            return Err(Error::Data(format!(
                "finetune needs a materialized network, got a {} checkpoint",
                other.kind()
            ))
            .into())
        }
    };
    let train = load_data(kv, Split::Train)?;
    let test = load_data(kv, Split::Test)?;
    if train.num_classes != des.cfg.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network head has {}",
            train.num_classes, des.cfg.num_classes
        ))
        .into());
    }
    let tc = settings::train(kv, "finetune.")?;
    let report = training::finetune(&mut des, &train, Some(&test), &tc)?;
    print_report("finetune", &report);
    ensure_parent(out)?;
    vit_to_checkpoint(&des, kv).save(out)?;
    write_metrics(out, "finetune", &report)?;
    println!("fine-tuned network written to {}", out.display());
    Ok(())
}

pub fn eval(kv: &KvConfig, checkpoint: &Path, split: Split, out: Option<&Path>) -> CliResult<()> {
    let (art, _) = load_artifact(checkpoint)?;
    let data = load_data(kv, split)?;
    let bs = settings::train(kv, "finetune.")?.eval_batch_size;
    let acc = match &art {
        Artifact::Vit(v) => evaluate(|x| v.logits(x), &data, bs)?,
        Artifact::Aux(a) => evaluate(|x| a.logits(x), &data, bs)?,
        Artifact::Learngene { .. } => {
            return Err(Error::Data("a learngene has no classifier; expand it first".into()).into())
        }
    };
    let top5 = acc.top5.map(|v| format!("{v:.6}")).unwrap_or_default();
    let line = format!("{},{split},{:.6},{top5}", checkpoint.display(), acc.top1);
    println!("checkpoint,split,top1,top5\n{line}");
    if let Some(p) = out {
        write_atomic(p, format!("checkpoint,split,top1,top5\n{line}\n").as_bytes())?;
    }
    Ok(())
}

/// Layers to analyze and the 1-based index of the first one.
fn analyzed_layers(art: &Artifact) -> Result<(Vec<tleg_core::vit::LayerParams<Tensor<f32>>>, usize, GroupSet)> {
    match art {
        Artifact::Vit(v) => Ok((v.layers.clone(), 1, GroupSet::ALL)),
        Artifact::Aux(a) => {
            let range = a.expanded_range();
            let first = *range.start();
            let layers = range.map(|l| a.layer(l)).collect::<Result<Vec<_>>>()?;
            Ok((layers, first, a.scope().modules))
        }
        Artifact::Learngene { learngene, cfg, .. } => {
            let s = learngene.scope.start_layer;
            let layers = (s..=cfg.depth)
                .map(|l| learngene.expand_layer(l, cfg.depth))
                .collect::<Result<Vec<_>>>()?;
            Ok((layers, s, learngene.scope.modules))
        }
    }
}

pub fn analyze(checkpoints: &[PathBuf], out_dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut all: Vec<LinearityReport> = Vec::new();
    for path in checkpoints {
        let (art, _) = load_artifact(path)?;
        let (layers, first, scope) = analyzed_layers(&art)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
        let reports = analyze_layers(&id, &layers, first, scope)?;
        for r in &reports {
            let tag = r.group.replace(',', "+");
            write_atomic(&out_dir.join(format!("{id}_{tag}_points.csv")), r.plot_points().as_bytes())?;
            write_atomic(&out_dir.join(format!("{id}_{tag}_fit.csv")), r.plot_fit().as_bytes())?;
        }
        all.extend(reports);
    }
    let csv = reports_csv(&all);
    write_atomic(&out_dir.join("report.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(kv: &KvConfig, learngene: Option<&Path>, accounting_only: bool, out_dir: &Path) -> CliResult<()> {
    let depths: Vec<usize> = parse_list("sweep.depths", kv.get("sweep.depths").unwrap_or(""))?;
    let seeds: Vec<u64> = parse_list("sweep.seeds", kv.get("sweep.seeds").unwrap_or(""))?;
    if depths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs depths and seeds".into()).into());
    }
    std::fs::create_dir_all(out_dir)?;
    let t0 = Instant::now();
    let (lg, nlp, train, test) = match learngene {
        Some(p) => {
            let (lg, nlp) = load_learngene(p)?;
            if accounting_only {
                (lg, nlp, None, None)
            } else {
                (lg, nlp, Some(load_data(kv, Split::Train)?), Some(load_data(kv, Split::Test)?))
            }
        }
        None if accounting_only => {
            let aux = AuxNet::<f32>::init(settings::model(kv, "aux")?, settings::scope(kv)?, settings::seed(kv)?)?;
            (aux.learngene, aux.nlp, None, None)
        }
        None => {
            let train = load_data(kv, Split::Train)?;
            let test = load_data(kv, Split::Test)?;
            let tc = settings::train(kv, "teacher.train.")?;
            let mut teacher = Vit::<f32>::init(settings::model(kv, "teacher")?, tc.seed)?;
            let r = training::finetune(&mut teacher, &train, Some(&test), &tc)?;
            print_report("teacher", &r);
            let (aux, _) = stage_one(kv, &teacher, &train, &test)?;
            learngene_to_checkpoint(&aux.learngene, &aux.nlp, &aux.cfg, kv).save(&out_dir.join("learngene.ckpt"))?;
            (aux.learngene, aux.nlp, Some(train), Some(test))
        }
    };
    if kv.get("expand.init_layers") != Some("all") {
        return Err(Error::Config("sweep initializes every layer; leave expand.init_layers=all".into()).into());
    }
    let spec = descendant_spec(kv, &lg, &nlp, depths[0])?;
    let (_, acct) = depth_sweep(&lg, &depths, &spec, &nlp)?;
    write_atomic(&out_dir.join("storage.csv"), acct.to_csv().as_bytes())?;
    print!("{}", acct.to_csv());
    print_accounting(&acct);
    let (Some(train), Some(test)) = (train, test) else {
        return Ok(());
    };
    let plan = SweepPlan { depths, seeds, spec, train: settings::train(kv, "finetune.")? };
    let outcome = run_sweep(&lg, &nlp, &train, &test, &plan)?;
    write_atomic(&out_dir.join("results.csv"), outcome.results_csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), outcome.summary_csv().as_bytes())?;
    outcome.metrics.write(&out_dir.join("metrics.csv"))?;
    print!("{}", outcome.summary_csv());
    println!(
        "learngene >= scratch at {} of {} depths ({:.0}s)",
        outcome.depths_won(),
        plan.depths.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
