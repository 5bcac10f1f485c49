//! Command-line harness: dataset rendering, GAN pretraining, inversion
//! training/fine-tuning, expression training, evaluation and visualization.
//!
//! Outputs land under `--out-dir`, or `$IFER_OUT_DIR`, or `./runs`. Config
//! files are flat `key=value` text (see `RunConfig::set` for the key list);
//! explicit flags override file values.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ifer::checkpoint::Checkpoint;
use ifer::config::RunConfig;
use ifer::faces::{sample_dataset, Split};
use ifer::fer::FusionMode;
use ifer::train::{
    evaluate_fer, evaluate_inversion, finetune_inversion, invert_command, mix_command,
    pretrain_generator, train_fer, train_inversion, viz_attn_command, Arch,
};
use ifer::{IferError, Result};

#[derive(Parser)]
#[command(name = "ifer", about = "Toy-scale face inversion and expression recognition")]
struct Cli {
    /// Output root; defaults to $IFER_OUT_DIR, then ./runs
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Extra key=value overrides, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                IferError::Config(format!("--set expects key=value, got '{kv}'"))
            })?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(l) = self.lr {
            cfg.lr = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Adversarially pretrain the toy generator and proxy trunk
    PretrainGan {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint filename under the output root
        #[arg(long, default_value = "pretrain.ckpt")]
        out: PathBuf,
    },
    /// Train the inversion encoder against a frozen pretrained generator
    TrainInversion {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long, default_value = "inversion.ckpt")]
        out: PathBuf,
    },
    /// Continue inversion training on the expression split
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "finetune.ckpt")]
        out: PathBuf,
    },
    /// Train the expression head (and encoder)
    TrainFer {
        #[command(flatten)]
        run: RunArgs,
        /// Inversion/finetune checkpoint; omit with --from-scratch
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
        /// full | latents-only | structure-only
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value = "fer.ckpt")]
        out: PathBuf,
        #[arg(long, default_value = "fer_report.json")]
        report: PathBuf,
    },
    /// Metric report for a checkpoint on a rendered split
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// inversion | fer
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Dataset sampling seed
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Fusion path for fer mode
        #[arg(long, default_value = "full")]
        fusion: String,
    },
    /// Source/inversion grids for PNG inputs
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Style-mixing grid from two PNG inputs
    Mix {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        img_a: PathBuf,
        #[arg(long)]
        img_b: PathBuf,
        /// Layers [0, crossover) take image A's codes
        #[arg(long)]
        crossover: usize,
    },
    /// Attention-overlay grids for PNG inputs
    VizAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render a labeled toy-face split to PNGs plus a CSV manifest
    MakeDataset {
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// train | val | test
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("IFER_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn in_root(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let root = out_root(&cli.out_dir);
    std::fs::create_dir_all(&root)?;
    match cli.cmd {
        Cmd::PretrainGan { run, out } => {
            let cfg = run.build()?;
            let res = pretrain_generator(&cfg, &Arch::desk_default())?;
            let path = in_root(&root, &out);
            res.ckpt.save(&path)?;
            println!("saved {}", path.display());
        }
        Cmd::TrainInversion { run, gan, out } => {
            let cfg = run.build()?;
            let gan_ck = Checkpoint::load(&in_root(&root, &gan))?;
            let res = train_inversion(&cfg, &gan_ck)?;
            let path = in_root(&root, &out);
            res.ckpt.save(&path)?;
            if let Some(last) = res.breakdowns.last() {
                println!("final composite loss {:.6}", last.total);
            }
            println!("saved {}", path.display());
        }
        Cmd::Finetune { run, ckpt, out } => {
            let cfg = run.build()?;
            let inv = Checkpoint::load(&in_root(&root, &ckpt))?;
            let res = finetune_inversion(&cfg, &inv)?;
            let path = in_root(&root, &out);
            res.ckpt.save(&path)?;
            println!("saved {}", path.display());
        }
        Cmd::TrainFer {
            run,
            ckpt,
            from_scratch,
            mode,
            out,
            report,
        } => {
            let cfg = run.build()?;
            let mode = FusionMode::parse(&mode)?;
            let loaded = match (&ckpt, from_scratch) {
                (Some(p), false) => Some(Checkpoint::load(&in_root(&root, p))?),
                (None, true) => None,
                (None, false) => {
                    return Err(IferError::Config(
                        "train-fer needs --ckpt or --from-scratch".into(),
                    ))
                }
                (Some(_), true) => {
                    return Err(IferError::Config(
                        "--ckpt and --from-scratch are mutually exclusive".into(),
                    ))
                }
            };
            let res = train_fer(&cfg, &Arch::desk_default(), loaded.as_ref(), mode)?;
            let cpath = in_root(&root, &out);
            res.ckpt.save(&cpath)?;
            let rpath = in_root(&root, &report);
            write_json(&rpath, &res.report)?;
            println!("accuracy {:.4}", res.accuracy);
            println!("saved {} and {}", cpath.display(), rpath.display());
        }
        Cmd::Evaluate {
            ckpt,
            mode,
            split,
            count,
            seed,
            out,
            fusion,
        } => {
            let ck = Checkpoint::load(&in_root(&root, &ckpt))?;
            let samples = sample_dataset(count, seed, Split::parse(&split)?)?;
            let report = match mode.as_str() {
                "inversion" => evaluate_inversion(&ck, &samples)?,
                "fer" => evaluate_fer(&ck, &samples, FusionMode::parse(&fusion)?)?,
                other => {
                    return Err(IferError::Config(format!(
                        "unknown evaluate mode '{other}' (inversion | fer)"
                    )))
                }
            };
            let path = in_root(&root, &out);
            write_json(&path, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("saved {}", path.display());
        }
        Cmd::Invert { ckpt, images } => {
            let ck = Checkpoint::load(&in_root(&root, &ckpt))?;
            let written = invert_command(&ck, &images, &root)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Mix {
            ckpt,
            img_a,
            img_b,
            crossover,
        } => {
            let ck = Checkpoint::load(&in_root(&root, &ckpt))?;
            let p = mix_command(&ck, &img_a, &img_b, crossover, &root)?;
            println!("wrote {}", p.display());
        }
        Cmd::VizAttn { ckpt, images } => {
            let ck = Checkpoint::load(&in_root(&root, &ckpt))?;
            let written = viz_attn_command(&ck, &images, &root)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Cmd::MakeDataset { count, split, seed } => {
            let sp = Split::parse(&split)?;
            let dir = root.join(format!("dataset_{split}"));
            std::fs::create_dir_all(&dir)?;
            let samples = sample_dataset(count, seed, sp)?;
            let mut wtr = csv::Writer::from_path(dir.join("manifest.csv"))
                .map_err(|e| IferError::Validation(format!("manifest: {e}")))?;
            wtr.write_record(["filename", "label", "label_index"])
                .map_err(|e| IferError::Validation(format!("manifest: {e}")))?;
            for (i, s) in samples.iter().enumerate() {
                let name = format!("{split}_{i:05}.png");
                ifer::imageio::save_png(&dir.join(&name), &s.image)?;
                wtr.write_record([
                    name.as_str(),
                    s.label.name(),
                    &s.label.index().to_string(),
                ])
                .map_err(|e| IferError::Validation(format!("manifest: {e}")))?;
            }
            wtr.flush()?;
            println!("wrote {count} images to {}", dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
