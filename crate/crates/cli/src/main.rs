use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccl_core::data::generate_synthetic;
use ccl_core::run::{self, DataSource, RunConfig};
use ccl_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccl", version, about = "Train classifiers with learned class-correlation soft labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write log, parameters, soft labels and metrics to --out.
    Train(RunArgs),
    /// Evaluate saved parameters on a dataset file.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset file to --out.
    GenData(RunArgs),
    /// Write the soft label matrix of saved ccl parameters into the --out directory.
    ExportSoftlabels {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Every flag mirrors the config key of the same name (dashes for
/// underscores). Flags override values from --config.
#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    val_data: Option<String>,
    /// sibling-pairs, separable or isic.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    divisor: Option<String>,
    #[arg(long)]
    d_near: Option<String>,
    #[arg(long)]
    d_far: Option<String>,
    #[arg(long)]
    stddev: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    train_ratio: Option<String>,
    /// hard, ccl, lsr-u, lsr-a, lsr-u1, lsr-u5, lsr-a1 or lsr-a5.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr_backbone: Option<String>,
    #[arg(long)]
    lr_ccl: Option<String>,
    /// Comma-separated epochs, or `none`.
    #[arg(long)]
    lr_drops: Option<String>,
    #[arg(long)]
    grad_clip: Option<String>,
    /// Epochs, or `none` to never freeze the dictionary.
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    kl_weight: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// Comma-separated backbone widths; the last is the feature size.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    b: Option<String>,
    #[arg(long)]
    alpha_cc: Option<String>,
    #[arg(long)]
    n2: Option<String>,
    #[arg(long)]
    embed_hidden: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl RunArgs {
    fn pairs(&self) -> ccl_core::Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.display().to_string(),
                    source: e,
                })?;
                run::parse_key_values(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        let flags = [
            ("data", &self.data),
            ("val_data", &self.val_data),
            ("synthetic", &self.synthetic),
            ("per_class", &self.per_class),
            ("classes", &self.classes),
            ("divisor", &self.divisor),
            ("d_near", &self.d_near),
            ("d_far", &self.d_far),
            ("stddev", &self.stddev),
            ("data_seed", &self.data_seed),
            ("train_ratio", &self.train_ratio),
            ("mode", &self.mode),
            ("epsilon", &self.epsilon),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr_backbone", &self.lr_backbone),
            ("lr_ccl", &self.lr_ccl),
            ("lr_drops", &self.lr_drops),
            ("grad_clip", &self.grad_clip),
            ("patience", &self.patience),
            ("kl_weight", &self.kl_weight),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("backbone", &self.backbone),
            ("b", &self.b),
            ("alpha_cc", &self.alpha_cc),
            ("n2", &self.n2),
            ("embed_hidden", &self.embed_hidden),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        Ok(pairs)
    }
}

fn write(path: &Path, text: &str) -> ccl_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn execute(cmd: Command) -> ccl_core::Result<()> {
    match cmd {
        Command::Train(args) => {
            let cfg = RunConfig::from_pairs(&args.pairs()?)?;
            let outcome = run::train_run(&cfg, |_, line| println!("{line}"))?;
            print!("{}", outcome.confusion.report()?);
            println!("out={}", cfg.out.display());
        }
        Command::Eval { params, data, out } => {
            let (_, report) = run::eval_run(&params, &data)?;
            print!("{report}");
            if let Some(out) = out {
                write(&out, &report)?;
            }
        }
        Command::GenData(args) => {
            if args.out.is_none() && args.config.is_none() {
                return Err(Error::InvalidArgument("gen-data needs --out <file>".into()));
            }
            let cfg = RunConfig::from_pairs(&args.pairs()?)?;
            let DataSource::Synthetic(req) = &cfg.data else {
                return Err(Error::InvalidArgument("gen-data needs --synthetic <preset>".into()));
            };
            let ds = generate_synthetic(&req.spec())?;
            ds.save(&cfg.out)?;
            println!("samples={} classes={} dim={} out={}", ds.len(), ds.classes(), ds.dim(), cfg.out.display());
        }
        Command::ExportSoftlabels { params, out } => {
            let (matrix, summary) = run::export_softlabels(&params)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            matrix.write(&out.join("softlabels.csv"))?;
            write(&out.join("softlabels_summary.txt"), &summary)?;
            print!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error category={} message={msg}", e.category());
            ExitCode::from(2)
        }
    }
}
