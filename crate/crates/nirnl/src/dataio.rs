//! Dataset container, on-disk format, train/val/test splitting, symmetric
//! label-noise injection, and a synthetic two-modality corpus generator.
//!
//! Directory layout (bit-exact):
//! - `meta.json`   — `{"version":1,"n":N,"d_visual":d_v,"d_text":d_t,"num_classes":C}`
//! - `visual.f32`  — N×d_v row-major little-endian f32, no header
//! - `text.f32`    — N×d_t likewise
//! - `labels.csv`  — one 0-based integer per line, N lines
//! - `clean_labels.csv` — optional, same format (present after corruption)
//! - `splits.json` — `{"train":[...],"val":[...],"test":[...]}`
//! - `flips.csv`   — header `index,original,corrupted`, one record per flip

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, Rng};

/// Aligned visual/text feature matrices with per-instance class labels.
/// `clean_labels` is present only after corruption, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub visual: Matrix,
    pub text: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub clean_labels: Option<Vec<usize>>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.visual.rows() == self.text.rows() && self.visual.rows() == self.labels.len(),
            "row mismatch: visual {} rows, text {} rows, {} labels",
            self.visual.rows(),
            self.text.rows(),
            self.labels.len()
        );
        ensure!(self.visual.is_finite(), "visual features contain non-finite values");
        ensure!(self.text.is_finite(), "text features contain non-finite values");
        for (i, &y) in self.labels.iter().enumerate() {
            ensure!(
                y < self.num_classes,
                "label {} at index {} out of range (num_classes {})",
                y,
                i,
                self.num_classes
            );
        }
        if let Some(clean) = &self.clean_labels {
            ensure!(
                clean.len() == self.labels.len(),
                "clean_labels length {} does not match {} labels",
                clean.len(),
                self.labels.len()
            );
            for (i, &y) in clean.iter().enumerate() {
                ensure!(
                    y < self.num_classes,
                    "clean label {} at index {} out of range (num_classes {})",
                    y,
                    i,
                    self.num_classes
                );
            }
        }
        Ok(())
    }

    /// Labels to use as retrieval ground truth: the clean set when present.
    pub fn eval_labels(&self) -> &[usize] {
        self.clean_labels.as_deref().unwrap_or(&self.labels)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    n: usize,
    d_visual: usize,
    d_text: usize,
    num_classes: usize,
}

/// Disjoint train/val/test index sets covering exactly [0, n).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn validate(&self, n: usize) -> Result<()> {
        let total = self.train.len() + self.val.len() + self.test.len();
        ensure!(total == n, "splits cover {} indices, dataset has {}", total, n);
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            ensure!(i < n, "split index {} out of range (n = {})", i, n);
            ensure!(!seen[i], "split index {} appears twice", i);
            seen[i] = true;
        }
        Ok(())
    }
}

/// One label corruption: original ≠ corrupted, indices unique across records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipRecord {
    pub index: usize,
    pub original: usize,
    pub corrupted: usize,
}

pub type FlipManifest = Vec<FlipRecord>;

/// Uniformly random permutation of [0, n) partitioned by the given sizes.
pub fn split_dataset(
    n: usize,
    sizes: (usize, usize, usize),
    rng: &mut Rng,
) -> Result<SplitManifest> {
    let (tr, va, te) = sizes;
    ensure!(
        tr + va + te == n,
        "split sizes {}+{}+{} do not sum to {}",
        tr,
        va,
        te,
        n
    );
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let val = perm.split_off(tr + va);
    let mid = perm.split_off(tr);
    Ok(SplitManifest {
        train: perm,
        val: mid,
        test: val,
    })
}

/// Flip exactly round(rate·N) labels, chosen uniformly without replacement,
/// each to a class drawn uniformly from the other C−1 classes.
pub fn inject_symmetric_noise(
    labels: &[usize],
    rate: f64,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, FlipManifest)> {
    ensure!((0.0..=1.0).contains(&rate), "noise rate {} outside [0,1]", rate);
    for (i, &y) in labels.iter().enumerate() {
        ensure!(
            y < num_classes,
            "label {} at index {} out of range (num_classes {})",
            y,
            i,
            num_classes
        );
    }
    let n = labels.len();
    let flips = (rate * n as f64).round() as usize;
    if flips > 0 {
        ensure!(
            num_classes >= 2,
            "cannot corrupt labels with num_classes {} (no alternative class exists)",
            num_classes
        );
    }
    let mut targets = rng.sample_indices(n, flips);
    targets.sort_unstable();
    let mut corrupted = labels.to_vec();
    let mut manifest = Vec::with_capacity(flips);
    for &i in &targets {
        let original = labels[i];
        let mut draw = rng.index(num_classes - 1);
        if draw >= original {
            draw += 1;
        }
        corrupted[i] = draw;
        manifest.push(FlipRecord {
            index: i,
            original,
            corrupted: draw,
        });
    }
    Ok((corrupted, manifest))
}

/// Latent dimensionality of the synthetic generator's class space.
const SYNTH_LATENT_DIM: usize = 32;

/// Synthetic two-view corpus: C latent class centers at pairwise distance
/// governed by `separation`, unit within-class jitter, one fixed random
/// affine map per modality, isotropic feature noise of scale `noise_std`.
/// Class sizes are balanced within ±1 and `clean_labels` mirrors `labels`.
pub fn synth_generate(
    num_classes: usize,
    n: usize,
    d_visual: usize,
    d_text: usize,
    separation: f32,
    noise_std: f32,
    rng: &mut Rng,
) -> Result<PairedDataset> {
    ensure!(num_classes >= 2, "need at least 2 classes, got {}", num_classes);
    ensure!(n >= num_classes, "need n ≥ num_classes ({} < {})", n, num_classes);
    ensure!(d_visual > 0 && d_text > 0, "feature dims must be positive");

    let ld = SYNTH_LATENT_DIM;
    // Center coordinates scale with 0.75·separation/√L: pairwise center
    // distance ≈ 1.06·separation. Against the unit within-class latent
    // jitter this keeps Euclidean nearest-neighbor structure clean once
    // separation clears noise_std by an order of magnitude, while leaving
    // enough angular class overlap that retrieval quality genuinely depends
    // on the learned alignment. A shared non-zero offset puts the classes in
    // a cone away from the origin, like un-centered backbone activations;
    // it moves no pairwise distance.
    let center_scale = 0.75 * separation / (ld as f32).sqrt();
    let offset: Vec<f32> = (0..ld).map(|_| rng.normal() * center_scale).collect();
    let mut centers = Matrix::zeros(num_classes, ld);
    for r in 0..num_classes {
        for (v, &o) in centers.row_mut(r).iter_mut().zip(&offset) {
            *v = o + rng.normal() * center_scale;
        }
    }

    let scale = 1.0 / (ld as f32).sqrt();
    let mut draw_affine = |d_out: usize| {
        let mut w = Matrix::zeros(d_out, ld);
        for v in w.data_mut() {
            *v = rng.normal() * scale;
        }
        let bias: Vec<f32> = (0..d_out).map(|_| rng.normal()).collect();
        (w, bias)
    };
    let (map_v, bias_v) = draw_affine(d_visual);
    let (map_t, bias_t) = draw_affine(d_text);

    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let mut visual = Matrix::zeros(n, d_visual);
    let mut text = Matrix::zeros(n, d_text);
    let mut latent = vec![0.0f32; ld];
    for i in 0..n {
        let center = centers.row(labels[i]);
        for (z, &c) in latent.iter_mut().zip(center) {
            *z = c + rng.normal();
        }
        for j in 0..d_visual {
            let v = crate::numkit::dot(map_v.row(j), &latent) + bias_v[j];
            visual.set(i, j, v + noise_std * rng.normal());
        }
        for j in 0..d_text {
            let v = crate::numkit::dot(map_t.row(j), &latent) + bias_t[j];
            text.set(i, j, v + noise_std * rng.normal());
        }
    }

    let ds = PairedDataset {
        visual,
        text,
        clean_labels: Some(labels.clone()),
        labels,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_f32_blob(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_f32_blob(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let expected = rows * cols * 4;
    ensure!(
        bytes.len() == expected,
        "{}: expected {} bytes ({}x{} f32), found {}",
        path.display(),
        expected,
        rows,
        cols,
        bytes.len()
    );
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    for (i, v) in data.iter().enumerate() {
        ensure!(
            v.is_finite(),
            "{}: non-finite value at element {}",
            path.display(),
            i
        );
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut s = String::new();
    for y in labels {
        s.push_str(&y.to_string());
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_labels(path: &Path, expected: usize, num_classes: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = Vec::with_capacity(expected);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let y: usize = line.parse().with_context(|| {
            format!("{}: line {}: invalid label '{}'", path.display(), lineno + 1, line)
        })?;
        ensure!(
            y < num_classes,
            "{}: line {}: label {} out of range (num_classes {})",
            path.display(),
            lineno + 1,
            y,
            num_classes
        );
        labels.push(y);
    }
    ensure!(
        labels.len() == expected,
        "{}: expected {} labels, found {}",
        path.display(),
        expected,
        labels.len()
    );
    Ok(labels)
}

pub fn save_dataset(ds: &PairedDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let meta = Meta {
        version: 1,
        n: ds.len(),
        d_visual: ds.visual.cols(),
        d_text: ds.text.cols(),
        num_classes: ds.num_classes,
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)?;
    meta_json.push('\n');
    fs::write(dir.join("meta.json"), meta_json)?;
    write_f32_blob(&dir.join("visual.f32"), &ds.visual)?;
    write_f32_blob(&dir.join("text.f32"), &ds.text)?;
    write_labels(&dir.join("labels.csv"), &ds.labels)?;
    if let Some(clean) = &ds.clean_labels {
        write_labels(&dir.join("clean_labels.csv"), clean)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<PairedDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text =
        fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .with_context(|| format!("parsing {}", meta_path.display()))?;
    ensure!(meta.version == 1, "unsupported dataset version {}", meta.version);
    let visual = read_f32_blob(&dir.join("visual.f32"), meta.n, meta.d_visual)?;
    let text = read_f32_blob(&dir.join("text.f32"), meta.n, meta.d_text)?;
    let labels = read_labels(&dir.join("labels.csv"), meta.n, meta.num_classes)?;
    let clean_path = dir.join("clean_labels.csv");
    let clean_labels = if clean_path.exists() {
        Some(read_labels(&clean_path, meta.n, meta.num_classes)?)
    } else {
        None
    };
    let ds = PairedDataset {
        visual,
        text,
        labels,
        num_classes: meta.num_classes,
        clean_labels,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_splits(splits: &SplitManifest, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(splits)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let splits: SplitManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(splits)
}

pub fn save_flips(flips: &FlipManifest, path: &Path) -> Result<()> {
    let mut s = String::from("index,original,corrupted\n");
    for f in flips {
        s.push_str(&format!("{},{},{}\n", f.index, f.original, f.corrupted));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_flips(path: &Path) -> Result<FlipManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut flips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            ensure!(
                line.trim() == "index,original,corrupted",
                "{}: unexpected header '{}'",
                path.display(),
                line
            );
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        ensure!(
            parts.len() == 3,
            "{}: line {}: expected 3 fields, found {}",
            path.display(),
            lineno + 1,
            parts.len()
        );
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .with_context(|| format!("{}: line {}: invalid field '{}'", path.display(), lineno + 1, s))
        };
        flips.push(FlipRecord {
            index: parse(parts[0])?,
            original: parse(parts[1])?,
            corrupted: parse(parts[2])?,
        });
    }
    Ok(flips)
}
