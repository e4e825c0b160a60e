//! Depth sweep: one learngene initializes descendants of several depths,
//! each compared against a scratch model trained for the same epochs.

use crate::descendant::{depth_sweep, DescendantSpec, StorageAccounting};
use crate::error::{contract, Result};
use crate::harness::data::Dataset;
use crate::harness::eval::evaluate;
use crate::harness::metrics::MetricsLog;
use crate::learngene::Learngene;
use crate::tensor::Tensor;
use crate::training::{finetune, TrainConfig};
use crate::vit::{NonLayerParams, Vit};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template for descendants; `depth` and `seed` are overridden.
    pub spec: DescendantSpec,
    /// Fine-tuning recipe shared by learngene and scratch runs.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub seed: u64,
    pub tleg_top1: f64,
    pub scratch_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub storage: StorageAccounting,
    pub metrics: MetricsLog,
}

impl SweepOutcome {
    /// `(depth, mean learngene top-1, mean scratch top-1)` in plan order.
    pub fn means(&self) -> Vec<(usize, f64, f64)> {
        let mut depths: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !depths.contains(&r.depth) {
                depths.push(r.depth);
            }
        }
        depths
            .into_iter()
            .map(|d| {
                let rs: Vec<&SweepRow> = self.rows.iter().filter(|r| r.depth == d).collect();
                let k = rs.len() as f64;
                (
                    d,
                    rs.iter().map(|r| r.tleg_top1).sum::<f64>() / k,
                    rs.iter().map(|r| r.scratch_top1).sum::<f64>() / k,
                )
            })
            .collect()
    }

    /// Depths where the learngene mean is at least the scratch mean.
    pub fn depths_won(&self) -> usize {
        self.means().iter().filter(|(_, t, s)| t >= s).count()
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("depth,seed,tleg_top1,scratch_top1\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.depth, r.seed, r.tleg_top1, r.scratch_top1));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("depth,tleg_mean_top1,scratch_mean_top1,stored_initializer_params,scratch_params\n");
        for ((d, t, s), (_, n)) in self.means().iter().zip(&self.storage.baseline_per_depth) {
            out.push_str(&format!(
                "{d},{t:.6},{s:.6},{},{n}\n",
                self.storage.stored_initializer_params
            ));
        }
        out
    }
}

/// Runs the sweep. Each seed re-materializes the descendants so the random
/// portions and the data order follow that seed.
pub fn run_sweep(
    lg: &Learngene<f32>,
    aux_nlp: &NonLayerParams<Tensor<f32>>,
    train: &Dataset,
    test: &Dataset,
    plan: &SweepPlan,
) -> Result<SweepOutcome> {
    if plan.seeds.is_empty() {
        return Err(contract("sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut metrics = MetricsLog::new();
    let mut storage = None;
    for &seed in &plan.seeds {
        let spec = DescendantSpec { seed, num_classes: train.num_classes, ..plan.spec.clone() };
        let (nets, acct) = depth_sweep(lg, &plan.depths, &spec, aux_nlp)?;
        storage.get_or_insert(acct);
        let tc = TrainConfig { seed, ..plan.train.clone() };
        for mut des in nets {
            let depth = des.cfg.depth;
            let r = finetune(&mut des, train, None, &tc)?;
            metrics.extend(r.rows(&format!("tleg-d{depth}-s{seed}")))?;
            let tleg = evaluate(|x| des.logits(x), test, tc.eval_batch_size)?.top1;
            let mut scratch = Vit::<f32>::init(des.cfg, seed ^ 0x5c7a_7c40)?;
            let r = finetune(&mut scratch, train, None, &tc)?;
            metrics.extend(r.rows(&format!("scratch-d{depth}-s{seed}")))?;
            let base = evaluate(|x| scratch.logits(x), test, tc.eval_batch_size)?.top1;
            rows.push(SweepRow { depth, seed, tleg_top1: tleg, scratch_top1: base });
        }
    }
    rows.sort_by_key(|r| {
        let pos = plan.depths.iter().position(|&d| d == r.depth).unwrap_or(usize::MAX);
        (pos, plan.seeds.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX))
    });
    Ok(SweepOutcome {
        rows,
        storage: storage.ok_or_else(|| contract("sweep produced no accounting"))?,
        metrics,
    })
}
