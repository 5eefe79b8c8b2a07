//! Pipeline entry point: synthesize a corpus, corrupt its labels, split it,
//! train, evaluate retrieval, or sweep the ablation variants.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nirnl::dataio::{
    inject_symmetric_noise, load_dataset, load_splits, save_dataset, save_flips, save_splits,
    split_dataset, PairedDataset, SplitManifest,
};
use nirnl::encoder::{forward, load_checkpoint, EncoderParams};
use nirnl::eval::{
    map_from_rankings, pr_curve, rank_queries, write_eval_report, write_pr_curve_csv, EvalReport,
};
use nirnl::numkit::{Matrix, Rng};
use nirnl::trainer::{run, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "nirnl", about = "Cross-modal retrieval lab robust to noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        dv: usize,
        #[arg(long)]
        dt: usize,
        #[arg(long)]
        separation: f32,
        #[arg(long = "noise-std")]
        noise_std: f32,
        #[arg(long)]
        seed: u64,
    },
    /// Inject symmetric label noise, preserving the clean labels and writing
    /// an auditable flip manifest. Always corrupts from the clean labels, so
    /// re-running with the same flags reproduces the same files.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Write a random train/val/test split manifest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train on the dataset's train split; writes metrics.jsonl and
    /// per-epoch checkpoints under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split; writes eval_report.json and
    /// pr_curve.csv into the checkpoint directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitName,
    },
    /// Run the five ablation variants sequentially on one corrupted dataset;
    /// writes one metrics log per variant plus summary.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            classes,
            n,
            dv,
            dt,
            separation,
            noise_std,
            seed,
        } => {
            let mut rng = Rng::seed_from(seed);
            let ds = nirnl::dataio::synth_generate(classes, n, dv, dt, separation, noise_std, &mut rng)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} instances ({} classes, {}+{} dims) to {}",
                n,
                classes,
                dv,
                dt,
                out.display()
            );
        }
        Command::Corrupt { data, rate, seed } => {
            let ds = load_dataset(&data)?;
            let clean = ds.clean_labels.clone().unwrap_or_else(|| ds.labels.clone());
            let mut rng = Rng::seed_from(seed);
            let (corrupted, flips) =
                inject_symmetric_noise(&clean, rate, ds.num_classes, &mut rng)?;
            let updated = PairedDataset {
                labels: corrupted,
                clean_labels: Some(clean),
                ..ds
            };
            save_dataset(&updated, &data)?;
            save_flips(&flips, &data.join("flips.csv"))?;
            println!("flipped {} of {} labels (rate {})", flips.len(), updated.len(), rate);
        }
        Command::Split {
            data,
            train,
            val,
            test,
            seed,
        } => {
            let ds = load_dataset(&data)?;
            let mut rng = Rng::seed_from(seed);
            let splits = split_dataset(ds.len(), (train, val, test), &mut rng)?;
            save_splits(&splits, &data.join("splits.json"))?;
            println!("wrote splits {}/{}/{} to {}", train, val, test, data.join("splits.json").display());
        }
        Command::Train { data, config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = load_dataset(&data)?;
            let splits = load_and_check_splits(&data, &ds)?;
            let result = run(&ds, &splits, &cfg, Some(&out))?;
            println!(
                "trained {} epochs (variant {}); best epoch {} with mean val MAP {:.4}",
                cfg.epochs, cfg.variant, result.best_epoch, result.best_val_map_mean
            );
        }
        Command::Eval {
            data,
            checkpoint,
            split,
        } => {
            let ds = load_dataset(&data)?;
            let splits = load_and_check_splits(&data, &ds)?;
            let indices = match split {
                SplitName::Train => &splits.train,
                SplitName::Val => &splits.val,
                SplitName::Test => &splits.test,
            };
            ensure!(!indices.is_empty(), "requested split is empty");
            let params_v = load_checkpoint(&checkpoint.join("visual"))?;
            let params_t = load_checkpoint(&checkpoint.join("text"))?;
            let report = evaluate_split(&ds, indices, &params_v, &params_t, &checkpoint)?;
            println!(
                "MAP i2t {:.4} ({} queries), t2i {:.4} ({} queries)",
                report.map_i2t, report.n_queries_i2t, report.map_t2i, report.n_queries_t2i
            );
        }
        Command::Ablate { data, config, out } => {
            let base = TrainConfig::load(&config)?;
            let ds = load_dataset(&data)?;
            let splits = load_and_check_splits(&data, &ds)?;
            let mut rows = Vec::new();
            for variant in Variant::ABLATION {
                let cfg = TrainConfig { variant, ..base.clone() };
                let variant_out = out.join(variant.to_string());
                let result = run(&ds, &splits, &cfg, Some(&variant_out))?;
                let (i2t, t2i) = test_map(&ds, &splits.test, &result.visual, &result.text)?;
                println!(
                    "{}: best epoch {}, test MAP i2t {:.4} / t2i {:.4}",
                    variant, result.best_epoch, i2t, t2i
                );
                rows.push((variant, result.best_epoch, i2t, t2i));
            }
            let mut csv = String::from("variant,best_epoch,test_map_i2t,test_map_t2i,test_map_mean\n");
            for (variant, epoch, i2t, t2i) in rows {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    variant,
                    epoch,
                    i2t,
                    t2i,
                    0.5 * (i2t + t2i)
                ));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let summary = out.join("summary.csv");
            std::fs::write(&summary, csv).with_context(|| format!("writing {}", summary.display()))?;
            println!("wrote {}", summary.display());
        }
    }
    Ok(())
}

fn load_and_check_splits(data: &Path, ds: &PairedDataset) -> Result<SplitManifest> {
    let splits = load_splits(&data.join("splits.json"))?;
    splits.validate(ds.len())?;
    Ok(splits)
}

fn embed_split(
    ds: &PairedDataset,
    indices: &[usize],
    params_v: &EncoderParams<f32>,
    params_t: &EncoderParams<f32>,
) -> Result<(Matrix, Matrix, Vec<usize>)> {
    let fv = forward(params_v, &ds.visual.select_rows(indices))?;
    let ft = forward(params_t, &ds.text.select_rows(indices))?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.eval_labels()[i]).collect();
    Ok((fv, ft, labels))
}

fn test_map(
    ds: &PairedDataset,
    indices: &[usize],
    params_v: &EncoderParams<f32>,
    params_t: &EncoderParams<f32>,
) -> Result<(f64, f64)> {
    let (fv, ft, labels) = embed_split(ds, indices, params_v, params_t)?;
    let i2t = nirnl::eval::map_score(&fv, &ft, &labels, &labels)?;
    let t2i = nirnl::eval::map_score(&ft, &fv, &labels, &labels)?;
    Ok((i2t, t2i))
}

fn evaluate_split(
    ds: &PairedDataset,
    indices: &[usize],
    params_v: &EncoderParams<f32>,
    params_t: &EncoderParams<f32>,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (fv, ft, labels) = embed_split(ds, indices, params_v, params_t)?;
    let rankings_i2t = rank_queries(&fv, &ft, &labels, &labels)?;
    let rankings_t2i = rank_queries(&ft, &fv, &labels, &labels)?;
    let report = EvalReport {
        map_i2t: map_from_rankings(&rankings_i2t),
        map_t2i: map_from_rankings(&rankings_t2i),
        n_queries_i2t: rankings_i2t
            .iter()
            .filter(|r| r.num_relevant() > 0)
            .count(),
        n_queries_t2i: rankings_t2i
            .iter()
            .filter(|r| r.num_relevant() > 0)
            .count(),
    };
    write_eval_report(&report, &out_dir.join("eval_report.json"))?;
    let curve_i2t = pr_curve(&rankings_i2t)?;
    let curve_t2i = pr_curve(&rankings_t2i)?;
    write_pr_curve_csv(&curve_i2t, &curve_t2i, &out_dir.join("pr_curve.csv"))?;
    Ok(report)
}
