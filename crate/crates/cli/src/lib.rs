//! `tleg` command-line driver for the two-stage learngene pipeline.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tleg_core::harness::KvConfig;

mod commands;
pub mod settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] tleg_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Key=value config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed for initialization, shuffling and descendants.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `--set aux.train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the ancestry (teacher) model from scratch.
    TrainTeacher,
    /// Stage 1: distill the teacher into an Aux-Net and write its learngene.
    TrainAux {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Where to write the full Aux-Net checkpoint.
        #[arg(long)]
        aux_out: Option<PathBuf>,
        /// Expanded groups, e.g. `msa,mlp`.
        #[arg(long)]
        modules: Option<String>,
        #[arg(long)]
        start_layer: Option<usize>,
    },
    /// Materialize descendants of the given depths.
    Expand {
        #[arg(long)]
        learngene: Option<PathBuf>,
        /// Descendant depth; repeat for several.
        #[arg(long = "depth")]
        depths: Vec<usize>,
        /// Layers taken from the learngene, `A-B`.
        #[arg(long)]
        init_layers: Option<String>,
        #[arg(long)]
        modules: Option<String>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Stage 2: supervised fine-tuning of a descendant.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-1/top-5 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Linearity reports for one or more checkpoints.
    Analyze {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Depth sweep comparing learngene initialization with scratch training.
    Sweep {
        /// Learngene or Aux-Net checkpoint. Without it the teacher and Aux-Net
        /// are trained first.
        #[arg(long)]
        learngene: Option<PathBuf>,
        /// Overrides `sweep.depths`; repeat for several.
        #[arg(long = "depth")]
        depths: Vec<usize>,
        /// Report parameter accounting without training anything.
        #[arg(long)]
        accounting_only: bool,
    },
}

#[derive(Debug, Parser)]
#[command(name = "tleg", version, about = "Train, expand and analyze linearly expanded learngenes")]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Runs `tleg` with `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let root = match Root::try_parse_from(argv) {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(root) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn overrides(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<KvConfig> {
    let mut kv = KvConfig::new();
    for raw in &common.set {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{raw}'")))?;
        if !settings::defaults().contains(k.trim()) {
            return Err(CliError::Usage(format!("unknown config key '{}'", k.trim())));
        }
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

fn require_path(p: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new(default).to_path_buf())
}

fn run(root: Root) -> CliResult<()> {
    let common = root.common;
    let flags: Vec<(&str, Option<String>)> = match &root.command {
        Command::TrainAux { modules, start_layer, .. } => vec![
            ("aux.modules", modules.clone()),
            ("aux.start_layer", start_layer.map(|s| s.to_string())),
        ],
        Command::Expand { init_layers, modules, num_classes, .. } => vec![
            ("expand.init_layers", init_layers.clone()),
            ("expand.modules", modules.clone()),
            ("expand.num_classes", num_classes.map(|n| n.to_string())),
        ],
        Command::Sweep { depths, .. } if !depths.is_empty() => vec![(
            "sweep.depths",
            Some(depths.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")),
        )],
        _ => Vec::new(),
    };
    let kv = settings::resolve(common.config.as_deref(), &overrides(&common, &flags)?)?;
    if common.dump_config {
        print!("{}", kv.render());
        return Ok(());
    }
    match root.command {
        Command::TrainTeacher => commands::train_teacher(&kv, &out_or(&common, "teacher.ckpt")),
        Command::TrainAux { teacher, aux_out, .. } => {
            let out = out_or(&common, "learngene.ckpt");
            let aux_out = aux_out.unwrap_or_else(|| out.with_file_name("aux.ckpt"));
            commands::train_aux(&kv, &require_path(&teacher, "teacher")?, &out, &aux_out)
        }
        Command::Expand { learngene, depths, .. } => {
            if depths.is_empty() {
                return Err(CliError::Usage("expand needs at least one --depth".into()));
            }
            commands::expand(&kv, &require_path(&learngene, "learngene")?, &depths, &out_or(&common, "."))
        }
        Command::Finetune { checkpoint } => commands::finetune(
            &kv,
            &require_path(&checkpoint, "checkpoint")?,
            &out_or(&common, "finetuned.ckpt"),
        ),
        Command::Eval { checkpoint, split } => {
            let split = split.parse().map_err(|e: tleg_core::Error| CliError::Usage(e.to_string()))?;
            commands::eval(&kv, &require_path(&checkpoint, "checkpoint")?, split, common.out.as_deref())
        }
        Command::Analyze { checkpoints } => {
            if checkpoints.is_empty() {
                return Err(CliError::Usage("analyze needs at least one --checkpoint".into()));
            }
            commands::analyze(&checkpoints, &out_or(&common, "analysis"))
        }
        Command::Sweep { learngene, accounting_only, .. } => {
            commands::sweep(&kv, learngene.as_deref(), accounting_only, &out_or(&common, "sweep"))
        }
    }
}
