//! Training orchestration: warm-up on the margin loss alone, per-epoch
//! refinement snapshots, mini-batch optimization of the combined objective
//! with Adam, ablation variants, checkpointing, and metric logging.
//!
//! Model selection follows peak mean validation MAP over both retrieval
//! directions; ties keep the earlier epoch.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use num_traits::Float;
use serde::Serialize;

use crate::cmp::loss_cmp;
use crate::dataio::{PairedDataset, SplitManifest};
use crate::encoder::{backward, forward, init_params, save_checkpoint, EncoderParams, ParamGrads};
use crate::eval::{map_score, partition_report, write_partition_report_csv, PartitionReport};
use crate::nir::{
    loss_hard, loss_noisy, loss_pure, refine, BarycenterMode, BarycenterOpts, BarycenterSet,
    BarycenterSource, EpochSnapshot, RefineConfig, SubsetTag,
};
use crate::numkit::{Matrix, Rng};

/// Which pieces of the objective participate in the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Subset losses plus the margin term.
    Full,
    /// Margin term logged but excluded from the objective.
    NoCmp,
    /// Noisy-tagged instances leave the epoch entirely.
    DropNoisy,
    /// Hard instances routed through the unweighted pure loss.
    HardAsPure,
    /// Margin term only; no barycenter alignment at all.
    CmpOnly,
    /// Plain cross-entropy on every instance against its (noisy) label plus
    /// the margin term; the partition has no influence.
    Naive,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCmp,
        Variant::DropNoisy,
        Variant::HardAsPure,
        Variant::CmpOnly,
        Variant::Naive,
    ];

    /// The five ablation-table variants (everything except the naive
    /// baseline).
    pub const ABLATION: [Variant; 5] = [
        Variant::Full,
        Variant::NoCmp,
        Variant::DropNoisy,
        Variant::HardAsPure,
        Variant::CmpOnly,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoCmp => "no_cmp",
            Variant::DropNoisy => "drop_noisy",
            Variant::HardAsPure => "hard_as_pure",
            Variant::CmpOnly => "cmp_only",
            Variant::Naive => "naive",
        };
        write!(f, "{}", s)
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_cmp" => Variant::NoCmp,
            "drop_noisy" => Variant::DropNoisy,
            "hard_as_pure" => Variant::HardAsPure,
            "cmp_only" => Variant::CmpOnly,
            "naive" => Variant::Naive,
            other => bail!("unknown variant '{}'", other),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub k_neighbors: usize,
    pub margin: f32,
    pub alpha: f32,
    pub lambda_entropic: f32,
    pub clamp_eps: f32,
    pub embed_dim: usize,
    pub hidden_dims_visual: Vec<usize>,
    pub hidden_dims_text: Vec<usize>,
    pub barycenter_mode: BarycenterMode,
    pub barycenter_source: BarycenterSource,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 100,
            learning_rate: 1e-4,
            k_neighbors: 10,
            margin: 0.2,
            alpha: 1.0,
            lambda_entropic: 1.0,
            clamp_eps: 1e-8,
            embed_dim: 512,
            hidden_dims_visual: vec![1024],
            hidden_dims_text: vec![1024],
            barycenter_mode: BarycenterMode::Mean,
            barycenter_source: BarycenterSource::All,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.epochs >= self.warmup_epochs,
            "epochs ({}) must be ≥ warmup_epochs ({})",
            self.epochs,
            self.warmup_epochs
        );
        ensure!(self.batch_size >= 2, "batch_size must be ≥ 2");
        ensure!(self.learning_rate > 0.0, "learning_rate must be positive");
        ensure!(self.k_neighbors >= 1, "k_neighbors must be ≥ 1");
        ensure!(self.margin >= 0.0, "margin must be ≥ 0");
        ensure!(self.alpha >= 0.0, "alpha must be ≥ 0");
        ensure!(self.lambda_entropic > 0.0, "lambda_entropic must be positive");
        ensure!(self.clamp_eps > 0.0, "clamp_eps must be positive");
        ensure!(self.embed_dim >= 1, "embed_dim must be ≥ 1");
        Ok(())
    }

    /// Parse a flat `key=value` document. Keys mirror the config fields;
    /// unknown keys are errors, missing keys keep their defaults. `#` starts
    /// a comment line.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got '{}'", lineno + 1, line))?;
            let key = key.trim();
            let value = value.trim();
            let ctx = || format!("line {}: invalid value '{}' for {}", lineno + 1, value, key);
            match key {
                "seed" => cfg.seed = value.parse().with_context(ctx)?,
                "epochs" => cfg.epochs = value.parse().with_context(ctx)?,
                "warmup_epochs" => cfg.warmup_epochs = value.parse().with_context(ctx)?,
                "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
                "learning_rate" => cfg.learning_rate = value.parse().with_context(ctx)?,
                "k_neighbors" => cfg.k_neighbors = value.parse().with_context(ctx)?,
                "margin" => cfg.margin = value.parse().with_context(ctx)?,
                "alpha" => cfg.alpha = value.parse().with_context(ctx)?,
                "lambda_entropic" => cfg.lambda_entropic = value.parse().with_context(ctx)?,
                "clamp_eps" => cfg.clamp_eps = value.parse().with_context(ctx)?,
                "embed_dim" => cfg.embed_dim = value.parse().with_context(ctx)?,
                "hidden_dims_visual" => cfg.hidden_dims_visual = parse_dims(value).with_context(ctx)?,
                "hidden_dims_text" => cfg.hidden_dims_text = parse_dims(value).with_context(ctx)?,
                "barycenter_mode" => {
                    cfg.barycenter_mode = match value {
                        "mean" => BarycenterMode::Mean,
                        "em" => BarycenterMode::Em,
                        _ => bail!("line {}: barycenter_mode must be mean|em", lineno + 1),
                    }
                }
                "barycenter_source" => {
                    cfg.barycenter_source = match value {
                        "all" => BarycenterSource::All,
                        "trusted" => BarycenterSource::Trusted,
                        _ => bail!("line {}: barycenter_source must be all|trusted", lineno + 1),
                    }
                }
                "variant" => cfg.variant = value.parse()?,
                other => bail!("line {}: unknown config key '{}'", lineno + 1, other),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_key_values(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn refine_config(&self) -> RefineConfig {
        // The naive baseline is partition-free by definition, so it never
        // gets trusted-subset barycenters even when the config asks for them.
        let source = if self.variant == Variant::Naive {
            BarycenterSource::All
        } else {
            self.barycenter_source
        };
        RefineConfig {
            k_neighbors: self.k_neighbors,
            clamp_eps: self.clamp_eps,
            barycenter: BarycenterOpts {
                mode: self.barycenter_mode,
                lambda: self.lambda_entropic,
                tol: 1e-6,
                max_iters: 50,
            },
            source,
        }
    }
}

fn parse_dims(value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("invalid dim '{}'", s))
        })
        .collect()
}

/// One epoch's logged state. `pure_purity` is present only when clean labels
/// exist and a partition was computed.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_total: f32,
    pub loss_p: f32,
    pub loss_h: f32,
    pub loss_n: f32,
    pub loss_cmp: f32,
    pub n_pure: usize,
    pub n_hard: usize,
    pub n_noisy: usize,
    pub val_map_i2t: f64,
    pub val_map_t2i: f64,
    pub pure_purity: Option<f64>,
}

/// Loss pieces and embedding gradients for one mini-batch.
pub struct BatchLoss<T = f32> {
    pub total: T,
    pub pure: T,
    pub hard: T,
    pub noisy: T,
    pub cmp: T,
    pub grad_fv: Matrix<T>,
    pub grad_ft: Matrix<T>,
}

pub struct LossConfig<T = f32> {
    pub margin: T,
    pub alpha: T,
    pub clamp_eps: T,
    pub variant: Variant,
}

/// Combined objective over one batch. Subset losses run over the batch
/// members carrying each tag (normalized by the in-batch subset size); the
/// margin term runs over the whole batch, except under `DropNoisy` where
/// noisy-tagged rows leave every term. The margin gradient is added only
/// when its coefficient is positive, so `NoCmp` matches an `alpha = 0` run
/// bit for bit.
pub fn total_loss<T: Float>(
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    labels: &[usize],
    tags: &[SubsetTag],
    weights: &[Option<T>],
    corrected: &[Option<usize>],
    centers: &BarycenterSet<T>,
    cfg: &LossConfig<T>,
) -> Result<BatchLoss<T>> {
    let n = fv.rows();
    ensure!(
        ft.rows() == n && labels.len() == n && tags.len() == n,
        "batch inputs disagree on length"
    );
    ensure!(weights.len() == n && corrected.len() == n, "batch inputs disagree on length");

    let mut grad_fv = Matrix::zeros(n, fv.cols());
    let mut grad_ft = Matrix::zeros(n, ft.cols());
    let mut add = |dst: &mut Matrix<T>, src: &Matrix<T>| {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = *d + *s;
        }
    };

    // Subset membership under the variant's routing.
    let mut pure_idx: Vec<usize> = Vec::new();
    let mut hard_items: Vec<(usize, T)> = Vec::new();
    let mut noisy_items: Vec<(usize, usize)> = Vec::new();
    match cfg.variant {
        Variant::CmpOnly => {}
        Variant::Naive => pure_idx.extend(0..n),
        _ => {
            for i in 0..n {
                match tags[i] {
                    SubsetTag::Pure => pure_idx.push(i),
                    SubsetTag::Hard => {
                        if cfg.variant == Variant::HardAsPure {
                            pure_idx.push(i);
                        } else {
                            let w = weights[i]
                                .with_context(|| format!("hard instance {} missing weight", i))?;
                            hard_items.push((i, w));
                        }
                    }
                    SubsetTag::Noisy => {
                        if cfg.variant != Variant::DropNoisy {
                            let y = corrected[i].with_context(|| {
                                format!("noisy instance {} missing corrected class", i)
                            })?;
                            noisy_items.push((i, y));
                        }
                    }
                }
            }
        }
    }

    let mut loss_p = T::zero();
    let mut loss_h = T::zero();
    let mut loss_n = T::zero();
    if !pure_idx.is_empty() {
        let out = loss_pure(&pure_idx, fv, ft, labels, centers, cfg.clamp_eps)?;
        loss_p = out.loss;
        add(&mut grad_fv, &out.grad_fv);
        add(&mut grad_ft, &out.grad_ft);
    }
    if !hard_items.is_empty() {
        let out = loss_hard(&hard_items, fv, ft, labels, centers, cfg.clamp_eps)?;
        loss_h = out.loss;
        add(&mut grad_fv, &out.grad_fv);
        add(&mut grad_ft, &out.grad_ft);
    }
    if !noisy_items.is_empty() {
        let out = loss_noisy(&noisy_items, fv, ft, centers, cfg.clamp_eps)?;
        loss_n = out.loss;
        add(&mut grad_fv, &out.grad_fv);
        add(&mut grad_ft, &out.grad_ft);
    }

    // Margin term: whole batch, or the surviving rows under DropNoisy.
    let cmp_alpha = if cfg.variant == Variant::NoCmp {
        T::zero()
    } else {
        cfg.alpha
    };
    let cmp_value;
    if cfg.variant == Variant::DropNoisy {
        let kept: Vec<usize> = (0..n).filter(|&i| tags[i] != SubsetTag::Noisy).collect();
        let sub = loss_cmp(&fv.select_rows(&kept), &ft.select_rows(&kept), cfg.margin)?;
        cmp_value = sub.loss;
        if cmp_alpha > T::zero() {
            for (pos, &i) in kept.iter().enumerate() {
                for (d, &s) in grad_fv.row_mut(i).iter_mut().zip(sub.grad_fv.row(pos)) {
                    *d = *d + cmp_alpha * s;
                }
                for (d, &s) in grad_ft.row_mut(i).iter_mut().zip(sub.grad_ft.row(pos)) {
                    *d = *d + cmp_alpha * s;
                }
            }
        }
    } else {
        let out = loss_cmp(fv, ft, cfg.margin)?;
        cmp_value = out.loss;
        if cmp_alpha > T::zero() {
            for (d, &s) in grad_fv.data_mut().iter_mut().zip(out.grad_fv.data()) {
                *d = *d + cmp_alpha * s;
            }
            for (d, &s) in grad_ft.data_mut().iter_mut().zip(out.grad_ft.data()) {
                *d = *d + cmp_alpha * s;
            }
        }
    }

    let total = loss_p + loss_h + loss_n + cmp_alpha * cmp_value;
    Ok(BatchLoss {
        total,
        pure: loss_p,
        hard: loss_h,
        noisy: loss_n,
        cmp: cmp_value,
        grad_fv,
        grad_ft,
    })
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Adam moments for one encoder, laid out like its flattened parameters.
struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u32,
}

impl AdamState {
    fn new(params: &EncoderParams<f32>) -> Self {
        let n = params.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut EncoderParams<f32>, grads: &ParamGrads<f32>, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let flat_grads = grads.flatten();
        let mut flat = Vec::with_capacity(flat_grads.len());
        for l in &params.layers {
            flat.extend_from_slice(l.weight.data());
        }
        for l in &params.layers {
            flat.extend_from_slice(&l.bias);
        }
        for i in 0..flat.len() {
            let g = flat_grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        let mut pos = 0;
        for l in params.layers.iter_mut() {
            let len = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        for l in params.layers.iter_mut() {
            let len = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
    }
}

pub struct RunOutput {
    /// 1-based epoch with peak mean validation MAP; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_map_mean: f64,
    pub visual: EncoderParams<f32>,
    pub text: EncoderParams<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub partition_reports: Vec<(usize, PartitionReport)>,
}

/// Train on the dataset's train split. Epochs up to `warmup_epochs` optimize
/// the margin term alone; afterwards each epoch refreshes the refinement
/// snapshot from a full train-set forward pass, then iterates shuffled
/// mini-batches of the combined objective. When `out_dir` is given,
/// `metrics.jsonl`, per-epoch checkpoints, `partition_report.csv`, and
/// `best.json` are written there.
pub fn run(
    ds: &PairedDataset,
    splits: &SplitManifest,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    ds.validate()?;
    splits.validate(ds.len())?;
    ensure!(!splits.train.is_empty(), "train split is empty");

    let root = Rng::seed_from(cfg.seed);
    let mut dims_v = vec![ds.visual.cols()];
    dims_v.extend(&cfg.hidden_dims_visual);
    dims_v.push(cfg.embed_dim);
    let mut dims_t = vec![ds.text.cols()];
    dims_t.extend(&cfg.hidden_dims_text);
    dims_t.push(cfg.embed_dim);
    let mut params_v = init_params(&dims_v, &mut root.derive(1))?;
    let mut params_t = init_params(&dims_t, &mut root.derive(2))?;
    let mut adam_v = AdamState::new(&params_v);
    let mut adam_t = AdamState::new(&params_t);

    let train_visual = ds.visual.select_rows(&splits.train);
    let train_text = ds.text.select_rows(&splits.train);
    let train_labels: Vec<usize> = splits.train.iter().map(|&i| ds.labels[i]).collect();
    let train_clean: Option<Vec<usize>> = ds
        .clean_labels
        .as_ref()
        .map(|c| splits.train.iter().map(|&i| c[i]).collect());
    let n_train = splits.train.len();

    let val_visual = ds.visual.select_rows(&splits.val);
    let val_text = ds.text.select_rows(&splits.val);
    let val_labels: Vec<usize> = splits.val.iter().map(|&i| ds.eval_labels()[i]).collect();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let refine_cfg = cfg.refine_config();
    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(cfg.epochs);
    let mut reports: Vec<(usize, PartitionReport)> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_map = f64::NEG_INFINITY;
    let mut best_params: Option<(EncoderParams<f32>, EncoderParams<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let warmup = epoch <= cfg.warmup_epochs;

        let snapshot: Option<EpochSnapshot> = if warmup {
            None
        } else {
            let fv_all = forward(&params_v, &train_visual)?;
            let ft_all = forward(&params_t, &train_text)?;
            Some(refine(&fv_all, &ft_all, &train_labels, ds.num_classes, &refine_cfg)?)
        };

        let mut order: Vec<usize> = (0..n_train).collect();
        root.derive(100 + epoch as u64).shuffle(&mut order);

        let mut sums = [0.0f64; 5]; // total, p, h, n, cmp
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bv = train_visual.select_rows(chunk);
            let bt = train_text.select_rows(chunk);
            let fv = forward(&params_v, &bv)?;
            let ft = forward(&params_t, &bt)?;

            let batch = if warmup {
                // NoCmp keeps the margin term out of the gradient here too,
                // so its trajectory matches an alpha = 0 run exactly.
                let warmup_alpha = if cfg.variant == Variant::NoCmp {
                    0.0
                } else {
                    cfg.alpha
                };
                let out = loss_cmp(&fv, &ft, cfg.margin)?;
                let mut grad_fv = out.grad_fv;
                let mut grad_ft = out.grad_ft;
                for v in grad_fv.data_mut() {
                    *v *= warmup_alpha;
                }
                for v in grad_ft.data_mut() {
                    *v *= warmup_alpha;
                }
                BatchLoss {
                    total: warmup_alpha * out.loss,
                    pure: 0.0,
                    hard: 0.0,
                    noisy: 0.0,
                    cmp: out.loss,
                    grad_fv,
                    grad_ft,
                }
            } else {
                let snap = snapshot.as_ref().context("refinement snapshot missing after warm-up")?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
                let tags: Vec<SubsetTag> = chunk.iter().map(|&i| snap.assignment.tags[i]).collect();
                let weights: Vec<Option<f32>> =
                    chunk.iter().map(|&i| snap.assignment.weights[i]).collect();
                let corrected: Vec<Option<usize>> =
                    chunk.iter().map(|&i| snap.assignment.corrected[i]).collect();
                total_loss(
                    &fv,
                    &ft,
                    &labels,
                    &tags,
                    &weights,
                    &corrected,
                    &snap.centers,
                    &LossConfig {
                        margin: cfg.margin,
                        alpha: cfg.alpha,
                        clamp_eps: cfg.clamp_eps,
                        variant: cfg.variant,
                    },
                )?
            };

            if !batch.total.is_finite() {
                bail!(
                    "non-finite loss at epoch {} batch {} (total = {})",
                    epoch,
                    batches + 1,
                    batch.total
                );
            }

            let (grads_v, _) = backward(&params_v, &bv, &batch.grad_fv)?;
            let (grads_t, _) = backward(&params_t, &bt, &batch.grad_ft)?;
            adam_v.apply(&mut params_v, &grads_v, cfg.learning_rate);
            adam_t.apply(&mut params_t, &grads_t, cfg.learning_rate);

            sums[0] += batch.total as f64;
            sums[1] += batch.pure as f64;
            sums[2] += batch.hard as f64;
            sums[3] += batch.noisy as f64;
            sums[4] += batch.cmp as f64;
            batches += 1;
        }
        let mean = |s: f64| (s / batches.max(1) as f64) as f32;

        let (val_map_i2t, val_map_t2i) = if splits.val.is_empty() {
            (0.0, 0.0)
        } else {
            let qv = forward(&params_v, &val_visual)?;
            let qt = forward(&params_t, &val_text)?;
            (
                map_score(&qv, &qt, &val_labels, &val_labels)?,
                map_score(&qt, &qv, &val_labels, &val_labels)?,
            )
        };

        let (n_pure, n_hard, n_noisy, pure_purity) = match (&snapshot, &train_clean) {
            (Some(snap), clean) => {
                let report = clean
                    .as_ref()
                    .map(|c| partition_report(&snap.assignment, &train_labels, c))
                    .transpose()?;
                if let Some(r) = report {
                    reports.push((epoch, r));
                }
                (
                    snap.assignment.count(SubsetTag::Pure),
                    snap.assignment.count(SubsetTag::Hard),
                    snap.assignment.count(SubsetTag::Noisy),
                    reports.last().filter(|(e, _)| *e == epoch).map(|(_, r)| r.pure_purity),
                )
            }
            (None, _) => (0, 0, 0, None),
        };

        metrics.push(MetricsRecord {
            epoch,
            loss_total: mean(sums[0]),
            loss_p: mean(sums[1]),
            loss_h: mean(sums[2]),
            loss_n: mean(sums[3]),
            loss_cmp: mean(sums[4]),
            n_pure,
            n_hard,
            n_noisy,
            val_map_i2t,
            val_map_t2i,
            pure_purity,
        });

        if let Some(dir) = out_dir {
            let epoch_dir = dir.join("checkpoints").join(format!("epoch_{}", epoch));
            save_checkpoint(&params_v, &epoch_dir.join("visual"))?;
            save_checkpoint(&params_t, &epoch_dir.join("text"))?;
            if let Some(snap) = &snapshot {
                crate::nir::write_partition_csv(&snap.assignment, &epoch_dir.join("partition.csv"))?;
            }
        }

        let mean_map = 0.5 * (val_map_i2t + val_map_t2i);
        if mean_map > best_map {
            best_map = mean_map;
            best_epoch = epoch;
            best_params = Some((params_v.clone(), params_t.clone()));
        }
    }

    let (visual, text) = best_params.unwrap_or((params_v, params_t));
    if let Some(dir) = out_dir {
        let mut jsonl = String::new();
        for record in &metrics {
            jsonl.push_str(&serde_json::to_string(record)?);
            jsonl.push('\n');
        }
        fs::write(dir.join("metrics.jsonl"), jsonl)?;
        if !reports.is_empty() {
            write_partition_report_csv(&reports, &dir.join("partition_report.csv"))?;
        }
        if best_epoch > 0 {
            let best_dir = dir.join("checkpoints").join("best");
            save_checkpoint(&visual, &best_dir.join("visual"))?;
            save_checkpoint(&text, &best_dir.join("text"))?;
            let summary = serde_json::json!({
                "best_epoch": best_epoch,
                "val_map_mean": best_map,
            });
            fs::write(dir.join("best.json"), format!("{:#}\n", summary))?;
        }
    }

    Ok(RunOutput {
        best_epoch,
        best_val_map_mean: if best_map.is_finite() { best_map } else { 0.0 },
        visual,
        text,
        metrics,
        partition_reports: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_generate;
    use crate::dataio::split_dataset;
    use crate::nir::{compute_barycenters, fuse_and_correct, instance_weight, BarycenterOpts};
    use crate::numkit::grad_check;

    #[test]
    fn config_parses_and_validates() {
        let text = "\
# comment
seed = 9
epochs=12
warmup_epochs = 2
batch_size = 16
learning_rate = 0.001
k_neighbors = 5
margin=0.3
alpha = 0.5
lambda_entropic = 2.0
clamp_eps = 1e-8
embed_dim = 32
hidden_dims_visual = 64,32
hidden_dims_text = 48
barycenter_mode = em
barycenter_source = trusted
variant = drop_noisy
";
        let cfg = TrainConfig::from_key_values(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.hidden_dims_visual, vec![64, 32]);
        assert_eq!(cfg.barycenter_mode, BarycenterMode::Em);
        assert_eq!(cfg.barycenter_source, BarycenterSource::Trusted);
        assert_eq!(cfg.variant, Variant::DropNoisy);
    }

    #[test]
    fn config_rejects_unknown_key_and_bad_invariants() {
        let err = TrainConfig::from_key_values("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        let err = TrainConfig::from_key_values("epochs = 1\nwarmup_epochs = 2\n").unwrap_err();
        assert!(err.to_string().contains("warmup"));
        let err = TrainConfig::from_key_values("batch_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    fn batch_fixture(
        seed: u64,
    ) -> (
        Matrix<f64>,
        Matrix<f64>,
        Vec<usize>,
        Vec<SubsetTag>,
        Vec<Option<f64>>,
        Vec<Option<usize>>,
        BarycenterSet<f64>,
    ) {
        let mut rng = Rng::seed_from(seed);
        let n = 6;
        let d = 5;
        let c = 3;
        let mut fv = Matrix::zeros(n, d);
        let mut ft = Matrix::zeros(n, d);
        for v in fv.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f64;
        }
        for v in ft.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f64;
        }
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let tags = vec![
            SubsetTag::Pure,
            SubsetTag::Hard,
            SubsetTag::Noisy,
            SubsetTag::Pure,
            SubsetTag::Hard,
            SubsetTag::Noisy,
        ];
        let weights: Vec<Option<f64>> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (*t == SubsetTag::Hard).then(|| 0.3 + 0.1 * i as f64))
            .collect();
        let corrected: Vec<Option<usize>> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (*t == SubsetTag::Noisy).then(|| (i + 1) % c))
            .collect();
        let centers = compute_barycenters(&fv, &ft, &labels, c, &BarycenterOpts::default()).unwrap();
        (fv, ft, labels, tags, weights, corrected, centers)
    }

    #[test]
    fn cmp_only_is_alpha_times_cmp() {
        let (fv, ft, labels, tags, weights, corrected, centers) = batch_fixture(1);
        let cfg = LossConfig {
            margin: 0.2,
            alpha: 0.7,
            clamp_eps: 1e-8,
            variant: Variant::CmpOnly,
        };
        let out = total_loss(&fv, &ft, &labels, &tags, &weights, &corrected, &centers, &cfg).unwrap();
        let cmp = loss_cmp(&fv, &ft, 0.2).unwrap();
        assert!((out.total - 0.7 * cmp.loss).abs() < 1e-12);
        assert_eq!(out.pure, 0.0);
        assert_eq!(out.hard, 0.0);
        assert_eq!(out.noisy, 0.0);
    }

    #[test]
    fn all_pure_batch_with_zero_alpha_is_pure_loss() {
        let (fv, ft, labels, _, _, _, centers) = batch_fixture(2);
        let n = fv.rows();
        let tags = vec![SubsetTag::Pure; n];
        let weights = vec![None; n];
        let corrected = vec![None; n];
        let cfg = LossConfig {
            margin: 0.2,
            alpha: 0.0,
            clamp_eps: 1e-8,
            variant: Variant::Full,
        };
        let out = total_loss(&fv, &ft, &labels, &tags, &weights, &corrected, &centers, &cfg).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let pure = loss_pure(&all, &fv, &ft, &labels, &centers, 1e-8).unwrap();
        assert!((out.total - pure.loss).abs() < 1e-12);
        assert!((out.pure - pure.loss).abs() < 1e-12);
    }

    #[test]
    fn full_variant_matches_term_by_term_recomputation() {
        let (fv, ft, labels, tags, weights, corrected, centers) = batch_fixture(3);
        let cfg = LossConfig {
            margin: 0.2,
            alpha: 1.3,
            clamp_eps: 1e-8,
            variant: Variant::Full,
        };
        let out = total_loss(&fv, &ft, &labels, &tags, &weights, &corrected, &centers, &cfg).unwrap();

        let pure_idx: Vec<usize> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == SubsetTag::Pure)
            .map(|(i, _)| i)
            .collect();
        let hard_items: Vec<(usize, f64)> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == SubsetTag::Hard)
            .map(|(i, _)| (i, weights[i].unwrap()))
            .collect();
        let noisy_items: Vec<(usize, usize)> = tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == SubsetTag::Noisy)
            .map(|(i, _)| (i, corrected[i].unwrap()))
            .collect();
        let p = loss_pure(&pure_idx, &fv, &ft, &labels, &centers, 1e-8).unwrap().loss;
        let h = loss_hard(&hard_items, &fv, &ft, &labels, &centers, 1e-8).unwrap().loss;
        let nn = loss_noisy(&noisy_items, &fv, &ft, &centers, 1e-8).unwrap().loss;
        let c = loss_cmp(&fv, &ft, 0.2).unwrap().loss;
        assert!((out.total - (p + h + nn + 1.3 * c)).abs() < 1e-6);
        assert!((out.pure - p).abs() < 1e-12);
        assert!((out.hard - h).abs() < 1e-12);
        assert!((out.noisy - nn).abs() < 1e-12);
        assert!((out.cmp - c).abs() < 1e-12);
    }

    #[test]
    fn total_loss_passes_grad_check_across_tags() {
        let (fv0, ft0, labels, tags, weights, corrected, centers) = batch_fixture(4);
        let (rows, cols) = (fv0.rows(), fv0.cols());
        for variant in Variant::ALL {
            let cfg = LossConfig {
                margin: 0.2,
                alpha: 0.8,
                clamp_eps: 1e-8,
                variant,
            };
            let f = |flat: &[f64]| {
                let fv = Matrix::from_vec(rows, cols, flat[..rows * cols].to_vec())?;
                let ft = Matrix::from_vec(rows, cols, flat[rows * cols..].to_vec())?;
                let out =
                    total_loss(&fv, &ft, &labels, &tags, &weights, &corrected, &centers, &cfg)?;
                let mut grad = out.grad_fv.data().to_vec();
                grad.extend_from_slice(out.grad_ft.data());
                Ok((out.total, grad))
            };
            let mut flat = fv0.data().to_vec();
            flat.extend_from_slice(ft0.data());
            let err = grad_check(f, &flat, 1e-5).unwrap();
            assert!(err <= 1e-4, "{}: relative error {}", variant, err);
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            seed: 5,
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 16,
            learning_rate: 1e-3,
            k_neighbors: 4,
            embed_dim: 8,
            hidden_dims_visual: vec![12],
            hidden_dims_text: vec![12],
            ..TrainConfig::default()
        }
    }

    fn quick_corpus() -> (PairedDataset, SplitManifest) {
        let mut rng = Rng::seed_from(500);
        let ds = synth_generate(4, 80, 10, 8, 8.0, 1.0, &mut rng).unwrap();
        let splits = split_dataset(80, (60, 10, 10), &mut rng.derive(1)).unwrap();
        (ds, splits)
    }

    #[test]
    fn warmup_only_run_has_zero_subset_counts() {
        let (ds, splits) = quick_corpus();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 2,
            ..quick_config()
        };
        let out = run(&ds, &splits, &cfg, None).unwrap();
        assert_eq!(out.metrics.len(), 2);
        for m in &out.metrics {
            assert_eq!(m.n_pure + m.n_hard + m.n_noisy, 0);
            assert_eq!(m.loss_p, 0.0);
            assert!(m.pure_purity.is_none());
        }
        assert!(out.partition_reports.is_empty());
    }

    #[test]
    fn subset_counts_cover_train_split_after_warmup() {
        let (ds, splits) = quick_corpus();
        let out = run(&ds, &splits, &quick_config(), None).unwrap();
        for m in out.metrics.iter().filter(|m| m.epoch > 1) {
            assert_eq!(m.n_pure + m.n_hard + m.n_noisy, splits.train.len());
            assert!(m.loss_total.is_finite());
            assert!((0.0..=1.0).contains(&m.val_map_i2t));
            assert!((0.0..=1.0).contains(&m.val_map_t2i));
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let (ds, splits) = quick_corpus();
        let a = run(&ds, &splits, &quick_config(), None).unwrap();
        let b = run(&ds, &splits, &quick_config(), None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.visual, b.visual);
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn no_cmp_trajectory_matches_zero_alpha() {
        let (ds, splits) = quick_corpus();
        let base = quick_config();
        let no_cmp = TrainConfig {
            variant: Variant::NoCmp,
            ..base.clone()
        };
        let zero_alpha = TrainConfig {
            alpha: 0.0,
            ..base
        };
        let a = run(&ds, &splits, &no_cmp, None).unwrap();
        let b = run(&ds, &splits, &zero_alpha, None).unwrap();
        assert_eq!(a.visual, b.visual);
        assert_eq!(a.text, b.text);
        // Warm-up under alpha = 0 is a no-op but the margin loss values are
        // still logged identically.
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ma.loss_cmp, mb.loss_cmp);
            assert_eq!(ma.loss_p, mb.loss_p);
        }
    }

    #[test]
    fn clean_separable_corpus_tags_little_noise() {
        let mut rng = Rng::seed_from(600);
        let ds = synth_generate(5, 300, 48, 32, 12.0, 1.0, &mut rng).unwrap();
        let splits = split_dataset(300, (240, 30, 30), &mut rng.derive(1)).unwrap();
        let cfg = TrainConfig {
            seed: 11,
            epochs: 8,
            warmup_epochs: 2,
            batch_size: 60,
            learning_rate: 1e-3,
            k_neighbors: 8,
            embed_dim: 16,
            hidden_dims_visual: vec![32],
            hidden_dims_text: vec![32],
            ..TrainConfig::default()
        };
        let out = run(&ds, &splits, &cfg, None).unwrap();
        let last = out.metrics.last().unwrap();
        let frac = last.n_noisy as f64 / splits.train.len() as f64;
        assert!(frac <= 0.05, "noisy fraction {} too high on clean data", frac);
    }

    #[test]
    fn run_writes_declared_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, splits) = quick_corpus();
        let cfg = quick_config();
        let out = run(&ds, &splits, &cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(dir.path().join("best.json").exists());
        assert!(dir.path().join("partition_report.csv").exists());
        for e in 1..=cfg.epochs {
            let epoch_dir = dir.path().join("checkpoints").join(format!("epoch_{}", e));
            assert!(epoch_dir.join("visual").join("params.json").exists());
            assert!(epoch_dir.join("text").join("params.f32").exists());
        }
        let best = dir.path().join("checkpoints").join("best");
        let loaded = crate::encoder::load_checkpoint(&best.join("visual")).unwrap();
        assert_eq!(loaded, out.visual);
    }

    #[test]
    fn snapshot_weight_and_correction_sources_agree_with_nir() {
        // The refine driver must produce weights/corrections consistent with
        // calling the primitives directly.
        let mut rng = Rng::seed_from(700);
        let ds = synth_generate(3, 40, 6, 6, 6.0, 1.5, &mut rng).unwrap();
        let refine_cfg = RefineConfig {
            k_neighbors: 5,
            clamp_eps: 1e-8,
            barycenter: BarycenterOpts::default(),
            source: BarycenterSource::All,
        };
        let snap = refine(&ds.visual, &ds.text, &ds.labels, 3, &refine_cfg).unwrap();
        for i in 0..ds.len() {
            match snap.assignment.tags[i] {
                SubsetTag::Hard => {
                    let s_v = crate::nir::barycenter_score(
                        ds.visual.row(i),
                        ds.labels[i],
                        &snap.centers,
                        1e-8,
                    );
                    let s_t = crate::nir::barycenter_score(
                        ds.text.row(i),
                        ds.labels[i],
                        &snap.centers,
                        1e-8,
                    );
                    let want = instance_weight(s_v, s_t).unwrap();
                    assert_eq!(snap.assignment.weights[i], Some(want));
                }
                SubsetTag::Noisy => {
                    let (_, want) =
                        fuse_and_correct(snap.soft.visual.row(i), snap.soft.text.row(i));
                    assert_eq!(snap.assignment.corrected[i], Some(want));
                }
                SubsetTag::Pure => {}
            }
        }
    }
}
