use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use twingan::autograd::Tensor;
use twingan::data::{load_folder, make_toy, save_image, ToySpec};
use twingan::evaluation::{self, SwdConfig};
use twingan::trainer::{load_inference, run_dir};
use twingan::{DomainId, Error, RunConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "twingan", version, about = "Unpaired two-domain image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural two-domain dataset into OUT/a and OUT/b.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train through the progressive schedule.
    Train(TrainArgs),
    /// Translate every image in a folder with a trained checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        from: DomainId,
        #[arg(long)]
        to: DomainId,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Sliced Wasserstein score between two image folders.
    EvalSwd {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Row label in the table.
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32])]
        levels: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        n_images: usize,
        #[arg(long, default_value_t = 64)]
        descriptors: usize,
        #[arg(long, default_value_t = 128)]
        projections: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the row as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Cross-domain nearest neighbours of encoder embeddings.
    Nn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        query_domain: DomainId,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Score top-1 retrieval, counting files with the same name as a match.
        #[arg(long)]
        pairs_by_name: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_a: PathBuf,
    #[arg(long)]
    data_b: PathBuf,
    /// Parent directory; the run goes into a subdirectory named after the ablation.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    no_cyc: bool,
    #[arg(long)]
    no_sem: bool,
    #[arg(long)]
    no_unet: bool,
    /// Stop after this many steps (a checkpoint is written).
    #[arg(long)]
    max_steps: Option<u64>,
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.ablation.enable_cyc &= !args.no_cyc;
    cfg.ablation.enable_sem &= !args.no_sem;
    cfg.ablation.enable_unet &= !args.no_unet;
    let out = run_dir(&args.out, &cfg);
    let opts = TrainOptions {
        resume: args.resume,
        max_steps: args.max_steps,
    };
    log::info!("writing to {}", out.display());
    let summary = twingan::train(&cfg, &args.data_a, &args.data_b, &out, &opts, |row| {
        if row.step % 50 == 0 {
            log::info!(
                "step {} stage {} {}x{} α={:.3} total {:.4} total_d {:.4} cyc {:.4}",
                row.step,
                row.stage,
                row.resolution,
                row.resolution,
                row.alpha,
                row.report.total,
                row.report.total_d,
                row.report.cyc
            );
        }
    })?;
    println!(
        "{} steps, {} checkpoints, finished: {}",
        summary.steps_run,
        summary.checkpoints.len(),
        summary.final_stage.terminal
    );
    Ok(())
}

fn load_batch_chunks(dir: &Path, resolution: usize, batch: usize) -> anyhow::Result<(Vec<Tensor>, Vec<String>)> {
    let folder = load_folder(dir, resolution)?;
    let chunks = folder.images.chunks(batch.max(1)).map(Tensor::stack).collect();
    Ok((chunks, folder.names))
}

fn translate(ckpt: &Path, input: &Path, from: DomainId, to: DomainId, out: &Path, batch: usize) -> anyhow::Result<()> {
    let (model, stage) = load_inference(ckpt)?;
    let (chunks, names) = load_batch_chunks(input, stage.resolution, batch)?;
    std::fs::create_dir_all(out)?;
    let mut k = 0;
    for chunk in chunks {
        let y = model.translate_images(&chunk, from, to, &stage)?;
        for i in 0..y.shape()[0] {
            let name = Path::new(&names[k]).with_extension("png");
            save_image(&y.select(i), &out.join(name))?;
            k += 1;
        }
    }
    println!("translated {k} images {from}→{to} into {}", out.display());
    Ok(())
}

fn embed(
    model: &twingan::TwinGan,
    stage: &twingan::StageState,
    dir: &Path,
    domain: DomainId,
) -> anyhow::Result<(Vec<Vec<f32>>, Vec<String>)> {
    let (chunks, names) = load_batch_chunks(dir, stage.resolution, 64)?;
    let mut out = Vec::with_capacity(names.len());
    for chunk in chunks {
        out.extend(model.embed_images(&chunk, domain, stage)?);
    }
    Ok((out, names))
}

fn nn(ckpt: &Path, queries: &Path, qd: DomainId, corpus: &Path, k: usize, pairs_by_name: bool) -> anyhow::Result<()> {
    let (model, stage) = load_inference(ckpt)?;
    let (q, qnames) = embed(&model, &stage, queries, qd)?;
    let (c, cnames) = embed(&model, &stage, corpus, qd.other())?;
    let ranked = evaluation::nn_search(&q, &c, k)?;
    for (qi, r) in ranked.iter().enumerate() {
        let list: Vec<String> = r.iter().map(|(i, d)| format!("{}:{d:.4}", cnames[*i])).collect();
        println!("{}\t{}", qnames[qi], list.join("\t"));
    }
    if pairs_by_name {
        let truth = |qi: usize| cnames.iter().position(|n| *n == qnames[qi]).unwrap_or(usize::MAX);
        let acc = evaluation::top1_accuracy(&ranked, truth);
        println!("top-1 {acc:.4} (chance {:.4})", 1.0 / c.len() as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeToy {
            out,
            n,
            size,
            seed,
            force,
        } => {
            let spec = ToySpec {
                n_samples: n,
                image_size: size,
                seed,
            };
            for d in DomainId::ALL {
                let dir = out.join(d.key());
                make_toy(&spec, d, &dir, force).with_context(|| format!("writing {}", dir.display()))?;
            }
            println!("wrote {n} pairs of {size}x{size} images to {}", out.display());
        }
        Command::Train(args) => train(args)?,
        Command::Translate {
            ckpt,
            input,
            from,
            to,
            out,
            batch,
        } => translate(&ckpt, &input, from, to, &out, batch)?,
        Command::EvalSwd {
            a,
            b,
            name,
            levels,
            n_images,
            descriptors,
            projections,
            seed,
            csv,
        } => {
            let cfg = SwdConfig {
                levels,
                descriptors_per_image: descriptors,
                n_projections: projections,
                n_images,
                seed,
                ..SwdConfig::default()
            };
            let rows = vec![(name, evaluation::swd_score(&a, &b, &cfg)?)];
            print!("{}", evaluation::format_table(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, evaluation::to_csv(&rows))?;
            }
        }
        Command::Nn {
            ckpt,
            queries,
            query_domain,
            corpus,
            k,
            pairs_by_name,
        } => nn(&ckpt, &queries, query_domain, &corpus, k, pairs_by_name)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::TomlDe(_)) => 2,
        Some(Error::NumericalFailure { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
