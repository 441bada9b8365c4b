use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bdn_core::arch::{Head, Profile, Variant};
use bdn_core::augment::AugmentOp;
use bdn_core::bradley_terry::{bt_fit, format_lp_factors, parse_comparisons, BtOptions};
use bdn_core::checkpoint::{load_attributes, load_model, load_scae, save_attributes, save_model, save_scae};
use bdn_core::data::{generate_synthetic, style_index, Dataset, SyntheticTaskSpec, STYLE_COUNT, STYLE_NAMES};
use bdn_core::metrics::{compute_metrics, predict, predict_dataset};
use bdn_core::rgb::RgbImage;
use bdn_core::train::{
    assemble, finetune, pretrain_scae, train_composite, train_pathway, unsupervised_attributes, warm_start_gaussian,
    TrainConfig, TrainLog,
};
use bdn_core::arch::AttributeStage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "bdn", version, about = "Parallel-pathway convolutional networks for image aesthetics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Training configuration (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured channel profile (desk or full)
    #[arg(long)]
    profile: Option<Profile>,
    /// Exclusion half-width for binary labels; `eval` accepts a
    /// comma-separated list and reports each, training uses the first
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.profile {
            cfg.profile = p;
        }
        if let Some(&d) = self.delta.first() {
            cfg.delta = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic rated-image dataset (PNG images plus manifest.csv)
    GenData {
        /// Output directory
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Styles (names or indices) that drive the rating; all by default
        #[arg(long, value_delimiter = ',')]
        styles: Vec<String>,
        /// Image side length
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Probability each style is present
        #[arg(long)]
        positive_rate: Option<f64>,
        #[arg(long, default_value_t = 200)]
        raters: u32,
    },
    /// Trains the convolutional auto-encoder on every image of a dataset
    Pretrain {
        /// Dataset manifest
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bdn pretrains one shared encoder; bfcn and bdn-wp one block per style
        #[arg(long, default_value = "bdn")]
        variant: Variant,
        /// Styles of the merged stack (bfcn, bdn-wp); all by default
        #[arg(long, value_delimiter = ',')]
        styles: Vec<String>,
        /// Appends the training log (JSON lines)
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains a style pathway (bdn), the composite stack (bdn-wp), or
    /// extracts the unsupervised stack (bfcn)
    TrainPathway {
        /// Dataset manifest
        data: PathBuf,
        /// Auto-encoder checkpoint
        #[arg(long)]
        scae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "bdn")]
        variant: Variant,
        /// Style to learn (bdn)
        #[arg(long)]
        style: Option<String>,
        /// Styles of the composite label (bdn-wp); all by default
        #[arg(long, value_delimiter = ',')]
        styles: Vec<String>,
        /// Keep the conv4 classifier in the checkpoint
        #[arg(long)]
        with_head: bool,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Assembles pathways and the synthesis network and fine-tunes them
    TrainBdn {
        /// Dataset manifest
        data: PathBuf,
        /// Attribute checkpoints, in pathway order
        #[arg(long, num_args = 1.., required_unless_present = "init")]
        pathways: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "bdn")]
        variant: Variant,
        #[arg(long)]
        head: Option<Head>,
        /// Train only the synthesis network
        #[arg(long)]
        frozen_pathways: bool,
        /// Trained binary model to start the Gaussian head from
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Prints one prediction line per image
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Predict every image of this manifest
        #[arg(long, conflicts_with = "images")]
        data: Option<PathBuf>,
        /// Image files (PNG or raw)
        images: Vec<PathBuf>,
        /// Write lines here instead of standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a model on a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest
        data: PathBuf,
        /// Also write `key,value` records here
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fits Bradley-Terry strengths to `item_a,item_b,winner` lines and
    /// prints LP factors
    BtFit {
        comparisons: PathBuf,
        /// Item whose factor is pinned to 1
        #[arg(long, default_value = "groundtruth")]
        groundtruth: String,
        /// Add half a virtual win and loss per item
        #[arg(long)]
        virtual_ties: bool,
    },
    /// Applies one augmentation to an image
    Augment {
        #[arg(long)]
        op: AugmentOp,
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_style(s: &str) -> Result<usize> {
    if let Some(i) = style_index(s) {
        return Ok(i);
    }
    match s.parse::<usize>() {
        Ok(i) if i < STYLE_COUNT => Ok(i),
        _ => bail!("unknown style '{}' (use a name such as {} or an index 0-13)", s, STYLE_NAMES[0]),
    }
}

fn parse_styles(list: &[String]) -> Result<Vec<usize>> {
    if list.is_empty() {
        return Ok((0..STYLE_COUNT).collect());
    }
    list.iter().map(|s| parse_style(s)).collect()
}

fn write_log(log: &TrainLog, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        log.append_to(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            styles,
            size,
            positive_rate,
            raters,
        } => {
            let mut spec = if styles.is_empty() {
                SyntheticTaskSpec::default()
            } else {
                SyntheticTaskSpec::focused(&parse_styles(&styles)?)?
            };
            spec.height = size;
            spec.width = size;
            spec.raters = raters;
            if let Some(p) = positive_rate {
                spec.positive_rate = [p; STYLE_COUNT];
            }
            let ds = generate_synthetic(&spec, n, seed)?;
            let manifest = ds.save(&out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain {
            data,
            out,
            variant,
            styles,
            log,
            common,
        } => {
            let cfg = common.config()?;
            let ds = load_dataset(&data)?;
            let blocks = match variant {
                Variant::Bfcn | Variant::BdnWp => parse_styles(&styles)?.len(),
                _ => 1,
            };
            let (scae, l) = pretrain_scae(&ds, blocks, &cfg)?;
            save_scae(&scae, &out)?;
            write_log(&l, &log)?;
        }
        Command::TrainPathway {
            data,
            scae,
            out,
            variant,
            style,
            styles,
            with_head,
            log,
            common,
        } => {
            let cfg = common.config()?;
            let scae = load_scae(&scae).with_context(|| format!("loading {}", scae.display()))?;
            let stage = match variant {
                Variant::Bfcn => unsupervised_attributes(&scae, &cfg)?,
                Variant::BdnWp => {
                    let ds = load_dataset(&data)?;
                    let (stage, l) = train_composite(&ds, &parse_styles(&styles)?, &scae, &cfg)?;
                    write_log(&l, &log)?;
                    stage
                }
                Variant::Bdn => {
                    let style = style.context("--style is required for bdn pathways")?;
                    let ds = load_dataset(&data)?;
                    let (p, l) = train_pathway(&ds, parse_style(&style)?, &scae, 0, &cfg)?;
                    write_log(&l, &log)?;
                    p.with_head()
                }
                other => bail!("variant {} has no attribute stage of its own; train bdn pathways", other),
            };
            save_attributes(&if with_head { stage } else { stage.headless() }, &out)?;
        }
        Command::TrainBdn {
            data,
            pathways,
            out,
            variant,
            head,
            frozen_pathways,
            init,
            log,
            common,
        } => {
            let cfg = common.config()?;
            let head = head.unwrap_or(variant.default_head());
            if !variant.supports(head) {
                bail!("variant {} does not support the {} head", variant, head);
            }
            let ds = load_dataset(&data)?;
            let mut model = match init {
                Some(p) => {
                    let base = load_model(&p, Some(variant)).with_context(|| format!("loading {}", p.display()))?;
                    if head != Head::Gaussian {
                        bail!("--init starts a Gaussian head from a binary model; pass --head gaussian");
                    }
                    warm_start_gaussian(&base)?
                }
                None => {
                    if head == Head::Gaussian && cfg.head_warm_start {
                        bail!("the Gaussian head starts from a trained binary model: pass --init <model>, or set head_warm_start = false");
                    }
                    let stages = pathways
                        .iter()
                        .map(|p| load_attributes(p).with_context(|| format!("loading {}", p.display())))
                        .collect::<Result<Vec<AttributeStage>>>()?;
                    let mut m = assemble(&AttributeStage::combine(stages)?, variant, head, &cfg)?;
                    m.frozen_pathways = frozen_pathways;
                    m
                }
            };
            if frozen_pathways {
                model.frozen_pathways = true;
            }
            let l = finetune(&mut model, &ds, &cfg)?;
            save_model(&model, &out)?;
            write_log(&l, &log)?;
        }
        Command::Predict {
            model,
            data,
            images,
            out,
        } => {
            let model = load_model(&model, None).with_context(|| format!("loading {}", model.display()))?;
            let mut lines = String::new();
            if let Some(d) = data {
                let ds = load_dataset(&d)?;
                let idx: Vec<usize> = (0..ds.len()).collect();
                for (p, r) in predict_dataset(&model, &ds, &idx)?.iter().zip(ds.records()) {
                    lines.push_str(&p.to_line(&r.image_id)?);
                    lines.push('\n');
                }
            } else {
                if images.is_empty() {
                    bail!("give image paths or --data <manifest>");
                }
                for path in &images {
                    let img = RgbImage::load(path).with_context(|| format!("loading {}", path.display()))?;
                    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    lines.push_str(&predict(&model, &img)?.to_line(id)?);
                    lines.push('\n');
                }
            }
            match out {
                Some(p) => fs::write(&p, lines).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", lines),
            }
        }
        Command::Eval {
            model,
            data,
            report,
            common,
        } => {
            let cfg = common.config()?;
            let model = load_model(&model, None).with_context(|| format!("loading {}", model.display()))?;
            let ds = load_dataset(&data)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let preds = predict_dataset(&model, &ds, &idx)?;
            let deltas = if common.delta.is_empty() { vec![cfg.delta] } else { common.delta.clone() };
            let mut records = String::new();
            for (i, &d) in deltas.iter().enumerate() {
                let rep = compute_metrics(&preds, ds.records(), d)?;
                if i > 0 {
                    println!();
                }
                print!("{}", rep.to_human());
                records.push_str(&rep.to_records());
            }
            if let Some(p) = report {
                fs::write(&p, records).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::BtFit {
            comparisons,
            groundtruth,
            virtual_ties,
        } => {
            let text = fs::read_to_string(&comparisons).with_context(|| format!("reading {}", comparisons.display()))?;
            let opts = BtOptions {
                groundtruth,
                virtual_ties,
                ..BtOptions::default()
            };
            let scores = bt_fit(&parse_comparisons(&text)?, &opts)?;
            print!("{}", format_lp_factors(&scores));
        }
        Command::Augment {
            op,
            input,
            output,
            seed,
        } => {
            let img = RgbImage::load(&input).with_context(|| format!("loading {}", input.display()))?;
            op.apply(&img, &mut ChaCha8Rng::seed_from_u64(seed)).save(&output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("bdn: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bdn: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
