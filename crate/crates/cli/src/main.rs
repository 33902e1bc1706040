//! `atbseg`: synthesize phantom corpora, pretrain base-model grids, run
//! k-frame adaptation rounds, train matched-condition benchmarks, evaluate
//! checkpoints and render reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atbseg::corpus::{load_corpus, save_mask_png};
use atbseg::eval::{write_metrics_csv, Averaging};
use atbseg::experiment::{
    parse_subjects, run_adapt, run_eval, run_grid, run_matched, run_report, AdaptOverrides,
    Experiment, PoolSpec,
};
use atbseg::nn::Architecture;
use atbseg::phantom::generate_benchmark_suite;
use atbseg::rasterize::masks_from_contours;
use atbseg::report::summary_table;
use atbseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "atbseg",
    version,
    about = "Air-tissue boundary segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the two phantom benchmark corpora (phantomA, phantomB).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Rasterize every annotation of a corpus into mask PNGs.
    Rasterize {
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base-model grid of an experiment config (resumable).
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Parallel training jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fine-tune every registered base model for each frame count and round.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Registry directory (default: <output>/registry).
        #[arg(long)]
        registry: Option<PathBuf>,
        /// `same-corpus:IDS` or `cross-corpus:IDS`, e.g. `same-corpus:P5,P6`.
        #[arg(long)]
        pool: Option<String>,
        /// Comma-separated frame counts, e.g. `1,5,10,15`.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        rounds: Option<u32>,
        /// Only adapt base models of these architectures.
        #[arg(long, value_delimiter = ',')]
        architectures: Option<Vec<Architecture>>,
        /// Metric CSV (default: <output>/records.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train and score the matched-condition benchmark.
    Matched {
        #[arg(long)]
        config: PathBuf,
        /// Metric CSV (default: <output>/matched.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on whole videos at native resolution.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated subject ids.
        #[arg(long)]
        subjects: String,
        /// Comma-separated video indices.
        #[arg(long, value_delimiter = ',', required = true)]
        videos: Vec<u32>,
        /// Model name written to the records.
        #[arg(long, default_value = "model")]
        name: String,
        /// Pool pixels over all frames instead of averaging per frame.
        #[arg(long)]
        pooled: bool,
        /// Also write the records as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Charts (SVG), aggregate CSV/JSON and summary from metric CSVs.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        matched: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn rasterize(corpus: &Path, out: &Path) -> Result<usize> {
    let corpus = load_corpus(corpus)?;
    let mut n = 0;
    for s in &corpus.subjects {
        for clip in &s.videos {
            for (frame, ann) in clip.frames.iter().zip(&clip.annotations) {
                let (w, h) = frame.pixels.dims();
                let masks = masks_from_contours(ann, w, h)?;
                let dir = out
                    .join(s.subject.id.as_str())
                    .join(format!("v{:02}", clip.video_index));
                for (i, m) in masks.as_array().into_iter().enumerate() {
                    save_mask_png(
                        &dir.join(format!("f{:04}_m{}.png", frame.frame_index, i + 1)),
                        m,
                    )?;
                }
                n += 1;
            }
        }
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed } => {
            let (a, b) = generate_benchmark_suite(&out, seed)?;
            println!("{}", a.display());
            println!("{}", b.display());
        }
        Command::Rasterize { corpus, out } => {
            let n = rasterize(&corpus, &out)?;
            println!("rasterized {n} frames into {}", out.display());
        }
        Command::Grid { config, jobs } => {
            let exp = Experiment::load(&config)?;
            let s = run_grid(&exp, jobs, &progress)?;
            println!(
                "trained {}, skipped {}, registry has {} entries at {}",
                s.trained.len(),
                s.skipped.len(),
                s.entries,
                exp.registry_dir().display()
            );
        }
        Command::Adapt {
            config,
            registry,
            pool,
            frames,
            rounds,
            architectures,
            out,
            jobs,
        } => {
            let exp = Experiment::load(&config)?;
            let ov = AdaptOverrides {
                registry,
                pool: pool.map(|p| p.parse::<PoolSpec>()).transpose()?,
                frames,
                rounds,
                output: out,
                architectures,
            };
            let s = run_adapt(&exp, &ov, jobs, &progress)?;
            println!(
                "{} base models, {} adapted evaluations, {} metric rows written to {}",
                s.base_models,
                s.adapted,
                s.records.len(),
                s.records_path.display()
            );
        }
        Command::Matched { config, out } => {
            let exp = Experiment::load(&config)?;
            let s = run_matched(&exp, out.as_deref(), &progress)?;
            for r in &s.records {
                println!("mask {}: pca {:.4} dice {:.4}", r.mask, r.pca, r.dice);
            }
            println!("written to {}", s.records_path.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            subjects,
            videos,
            name,
            pooled,
            out,
        } => {
            let averaging = if pooled {
                Averaging::Pooled
            } else {
                Averaging::PerFrame
            };
            let subjects = parse_subjects(&subjects)?;
            let records = run_eval(&checkpoint, &corpus, &subjects, &videos, &name, averaging)?;
            for r in &records {
                println!(
                    "mask {}: pca {:.4} dice {:.4} ({} frames)",
                    r.mask, r.pca, r.dice, r.n_frames
                );
            }
            if let Some(out) = out {
                write_metrics_csv(&out, &records)?;
            }
        }
        Command::Report {
            records,
            matched,
            out,
        } => {
            let files = run_report(&records, &matched, &out)?;
            print!("{}", summary_table(&files.summary));
            for c in &files.charts {
                println!("{}", c.display());
            }
            println!("{}", files.aggregate_csv.display());
            println!("{}", files.aggregate_json.display());
            println!("{}", files.summary_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_chain(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report_chain(e: &Error) {
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}
