//! Neighbor-aware instance refining: KNN soft labels per modality,
//! pure/hard/noisy tri-partition by label-vs-consensus agreement, per-class
//! semantic barycenters (closed-form mean or EM iteration), barycenter
//! membership scores, the three subset losses, and noisy-or label fusion.
//!
//! Everything here is pure given its inputs. The trainer refreshes one
//! [`EpochSnapshot`] per epoch from a full-dataset forward pass and treats it
//! as constant within the epoch; no gradient flows through soft labels,
//! weights, corrected labels, or barycenters.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use num_traits::Float;

use crate::numkit::{cosine_similarity, norm2, Matrix};

/// Per-modality neighbor-consensus class distributions; rows sum to 1 and
/// every entry is a multiple of 1/K.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelTable<T = f32> {
    pub visual: Matrix<T>,
    pub text: Matrix<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetTag {
    Pure,
    Hard,
    Noisy,
}

impl fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetTag::Pure => write!(f, "pure"),
            SubsetTag::Hard => write!(f, "hard"),
            SubsetTag::Noisy => write!(f, "noisy"),
        }
    }
}

/// Per-instance subset tag, plus the corrected class for noisy instances and
/// the confidence weight for hard instances.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionAssignment {
    pub tags: Vec<SubsetTag>,
    pub corrected: Vec<Option<usize>>,
    pub weights: Vec<Option<f32>>,
}

impl PartitionAssignment {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn count(&self, tag: SubsetTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn indices(&self, tag: SubsetTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }
}

/// Per-class semantic barycenters, row c for class c.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterSet<T = f32> {
    pub centers: Matrix<T>,
}

impl<T: Float> BarycenterSet<T> {
    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarycenterMode {
    Mean,
    Em,
}

#[derive(Debug, Clone, Copy)]
pub struct BarycenterOpts<T = f32> {
    pub mode: BarycenterMode,
    pub lambda: T,
    pub tol: T,
    pub max_iters: usize,
}

impl<T: Float> Default for BarycenterOpts<T> {
    fn default() -> Self {
        Self {
            mode: BarycenterMode::Mean,
            lambda: T::one(),
            tol: T::from(1e-6).unwrap(),
            max_iters: 50,
        }
    }
}

/// KNN soft labels: row i averages the one-hot labels of the K nearest
/// neighbors of instance i (cosine similarity, self excluded, exact brute
/// force; similarity ties break toward the lower index).
pub fn knn_soft_labels<T: Float>(
    embeddings: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
    k: usize,
) -> Result<Matrix<T>> {
    let n = embeddings.rows();
    ensure!(n == labels.len(), "{} embeddings but {} labels", n, labels.len());
    ensure!(k >= 1, "K must be at least 1");
    ensure!(k <= n.saturating_sub(1), "K = {} but only {} other instances exist", k, n.saturating_sub(1));
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < num_classes, "label {} at index {} out of range", y, i);
    }

    // Normalize once so each query row is a single matrix-vector product.
    let mut unit = embeddings.clone();
    for r in 0..n {
        let nrm = norm2(unit.row(r));
        if nrm > T::zero() {
            for v in unit.row_mut(r) {
                *v = *v / nrm;
            }
        } else {
            for v in unit.row_mut(r) {
                *v = T::zero();
            }
        }
    }

    let inv_k = T::one() / T::from(k).unwrap();
    let mut out = Matrix::zeros(n, num_classes);
    let mut sims: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        sims.clear();
        let qrow = unit.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            sims.push((crate::numkit::dot(qrow, unit.row(j)), j));
        }
        sims.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut counts = vec![0usize; num_classes];
        for &(_, j) in sims.iter().take(k) {
            counts[labels[j]] += 1;
        }
        let row = out.row_mut(i);
        for (c, &count) in counts.iter().enumerate() {
            row[c] = T::from(count).unwrap() * inv_k;
        }
    }
    Ok(out)
}

/// All maximizers of a soft-label row. Entries are exact multiples of 1/K so
/// equality against the max is exact.
fn argmax_set<T: Float>(row: &[T]) -> Vec<usize> {
    let mut max = T::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(c, _)| c)
        .collect()
}

fn label_is_maximal<T: Float>(row: &[T], label: usize) -> bool {
    let v = row[label];
    row.iter().all(|&other| other <= v)
}

/// Tri-partition: the given label agreeing with the consensus argmax in both
/// modalities is pure, in exactly one is hard, in neither is noisy. A label
/// counts as consistent if it is ANY maximizer of that modality's row.
pub fn partition<T: Float>(
    soft_v: &Matrix<T>,
    soft_t: &Matrix<T>,
    labels: &[usize],
) -> Result<Vec<SubsetTag>> {
    ensure!(
        soft_v.rows() == soft_t.rows() && soft_v.rows() == labels.len(),
        "shape mismatch: soft_v {} rows, soft_t {} rows, {} labels",
        soft_v.rows(),
        soft_t.rows(),
        labels.len()
    );
    ensure!(soft_v.cols() == soft_t.cols(), "soft label tables disagree on class count");
    let mut tags = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < soft_v.cols(), "label {} at index {} out of range", y, i);
        let in_v = label_is_maximal(soft_v.row(i), y);
        let in_t = label_is_maximal(soft_t.row(i), y);
        tags.push(match (in_v, in_t) {
            (true, true) => SubsetTag::Pure,
            (false, false) => SubsetTag::Noisy,
            _ => SubsetTag::Hard,
        });
    }
    Ok(tags)
}

/// One EM pass over a set of points. Responsibilities are softmin weights of
/// squared distance with temperature lambda (computed with a max-shift so
/// huge distances cannot underflow everything); each M-step re-centers at the
/// responsibility-weighted mean. Returns the center and, per iteration, the
/// weighted objective before and after the M-step.
pub fn em_barycenter_trace<T: Float>(
    points: &[&[T]],
    init: &[T],
    lambda: T,
    tol: T,
    max_iters: usize,
) -> (Vec<T>, Vec<(T, T)>) {
    assert!(!points.is_empty());
    assert!(lambda > T::zero());
    let d = init.len();
    let mut center = init.to_vec();
    let mut trace = Vec::new();
    let mut d2 = vec![T::zero(); points.len()];
    for _ in 0..max_iters {
        for (i, p) in points.iter().enumerate() {
            let mut acc = T::zero();
            for c in 0..d {
                let diff = center[c] - p[c];
                acc = acc + diff * diff;
            }
            d2[i] = acc;
        }
        let shift = d2.iter().cloned().fold(T::infinity(), T::min);
        let mut total = T::zero();
        let weights: Vec<T> = d2
            .iter()
            .map(|&v| {
                let w = (-(v - shift) / lambda).exp();
                total = total + w;
                w
            })
            .collect();
        let mut new_center = vec![T::zero(); d];
        let mut obj_before = T::zero();
        for (i, p) in points.iter().enumerate() {
            let r = weights[i] / total;
            obj_before = obj_before + r * d2[i];
            for c in 0..d {
                new_center[c] = new_center[c] + r * p[c];
            }
        }
        let mut obj_after = T::zero();
        let mut delta2 = T::zero();
        for (i, p) in points.iter().enumerate() {
            let r = weights[i] / total;
            let mut acc = T::zero();
            for c in 0..d {
                let diff = new_center[c] - p[c];
                acc = acc + diff * diff;
            }
            obj_after = obj_after + r * acc;
        }
        for c in 0..d {
            let diff = new_center[c] - center[c];
            delta2 = delta2 + diff * diff;
        }
        trace.push((obj_before, obj_after));
        center = new_center;
        if delta2.sqrt() < tol {
            break;
        }
    }
    (center, trace)
}

/// Barycenters from explicit per-class member index lists. `members[c]`
/// indexes rows of `fv`/`ft`; each class contributes both modality embeddings
/// of its members.
pub fn compute_barycenters_from_members<T: Float>(
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    members: &[Vec<usize>],
    opts: &BarycenterOpts<T>,
) -> Result<BarycenterSet<T>> {
    ensure!(fv.cols() == ft.cols(), "modality embedding dims differ");
    ensure!(fv.rows() == ft.rows(), "modality embedding counts differ");
    let d = fv.cols();
    let mut centers = Matrix::zeros(members.len(), d);
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            bail!("class {} has no members", c);
        }
        let points: Vec<&[T]> = idx
            .iter()
            .flat_map(|&i| [fv.row(i), ft.row(i)])
            .collect();
        let inv = T::one() / T::from(points.len()).unwrap();
        let mut mean = vec![T::zero(); d];
        for p in &points {
            for (m, &v) in mean.iter_mut().zip(*p) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
        let center = match opts.mode {
            BarycenterMode::Mean => mean,
            BarycenterMode::Em => {
                em_barycenter_trace(&points, &mean, opts.lambda, opts.tol, opts.max_iters).0
            }
        };
        centers.row_mut(c).copy_from_slice(&center);
    }
    Ok(BarycenterSet { centers })
}

/// Barycenters over all instances carrying each label in [0, num_classes).
pub fn compute_barycenters<T: Float>(
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
    opts: &BarycenterOpts<T>,
) -> Result<BarycenterSet<T>> {
    ensure!(fv.rows() == labels.len(), "{} embeddings but {} labels", fv.rows(), labels.len());
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < num_classes, "label {} at index {} out of range", y, i);
        members[y].push(i);
    }
    compute_barycenters_from_members(fv, ft, &members, opts)
}

/// Clamped-cosine share of the embedding's similarity to the labeled class
/// barycenter among all class barycenters; always in (0, 1].
pub fn barycenter_score<T: Float>(
    f: &[T],
    label: usize,
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> T {
    score_and_grad(f, label, centers, clamp_eps, false).0
}

/// Score plus its gradient with respect to `f` (centers held constant).
/// The clamp max(Γ, ε) contributes zero gradient on the clamped side.
pub fn barycenter_score_grad<T: Float>(
    f: &[T],
    label: usize,
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> (T, Vec<T>) {
    let (s, g) = score_and_grad(f, label, centers, clamp_eps, true);
    (s, g.unwrap())
}

fn score_and_grad<T: Float>(
    f: &[T],
    label: usize,
    centers: &BarycenterSet<T>,
    clamp_eps: T,
    want_grad: bool,
) -> (T, Option<Vec<T>>) {
    let c = centers.num_classes();
    assert!(label < c, "label {} out of range for {} classes", label, c);
    assert!(clamp_eps > T::zero());
    let d = f.len();
    let nf = norm2(f);
    if nf == T::zero() {
        // Degenerate embedding: uniform score, no usable direction.
        let s = T::one() / T::from(c).unwrap();
        return (s, want_grad.then(|| vec![T::zero(); d]));
    }

    let mut gammas = Vec::with_capacity(c);
    let mut denom = T::zero();
    for j in 0..c {
        let g = cosine_similarity(f, centers.centers.row(j));
        let clamped = if g > clamp_eps { g } else { clamp_eps };
        gammas.push((g, clamped));
        denom = denom + clamped;
    }
    let numer = gammas[label].1;
    let s = numer / denom;
    if !want_grad {
        return (s, None);
    }

    // dΓ_j/df = (ĉ_j − Γ_j f̂)/‖f‖ on the unclamped side, 0 on the clamped side.
    let inv_nf = T::one() / nf;
    let fhat: Vec<T> = f.iter().map(|&v| v * inv_nf).collect();
    let mut dnumer = vec![T::zero(); d];
    let mut ddenom = vec![T::zero(); d];
    for j in 0..c {
        let (raw, _) = gammas[j];
        if raw <= clamp_eps {
            continue;
        }
        let crow = centers.centers.row(j);
        let nc = norm2(crow);
        if nc == T::zero() {
            continue;
        }
        let inv_nc = T::one() / nc;
        for k in 0..d {
            let dg = (crow[k] * inv_nc - raw * fhat[k]) * inv_nf;
            ddenom[k] = ddenom[k] + dg;
            if j == label {
                dnumer[k] = dnumer[k] + dg;
            }
        }
    }
    let denom2 = denom * denom;
    let grad: Vec<T> = (0..d)
        .map(|k| (dnumer[k] * denom - numer * ddenom[k]) / denom2)
        .collect();
    (s, Some(grad))
}

/// Loss value plus gradients on the full embedding matrices (rows outside the
/// indexed subset stay zero).
pub struct SubsetLoss<T = f32> {
    pub loss: T,
    pub grad_fv: Matrix<T>,
    pub grad_ft: Matrix<T>,
}

impl<T: Float> SubsetLoss<T> {
    fn zero(fv: &Matrix<T>, ft: &Matrix<T>) -> Self {
        Self {
            loss: T::zero(),
            grad_fv: Matrix::zeros(fv.rows(), fv.cols()),
            grad_ft: Matrix::zeros(ft.rows(), ft.cols()),
        }
    }
}

/// Cross-entropy on barycenter scores over the pure subset:
/// −(1/m) Σ [log s(v_i) + log s(t_i)].
pub fn loss_pure<T: Float>(
    indices: &[usize],
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    labels: &[usize],
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> Result<SubsetLoss<T>> {
    let weighted: Vec<(usize, T)> = indices.iter().map(|&i| (i, T::one())).collect();
    weighted_ce_loss(&weighted, fv, ft, labels, centers, clamp_eps)
}

/// Confidence-weighted cross-entropy over the hard subset. Weights come from
/// the epoch snapshot and are constants here (no gradient through them).
pub fn loss_hard<T: Float>(
    items: &[(usize, T)],
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    labels: &[usize],
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> Result<SubsetLoss<T>> {
    for &(_, w) in items {
        ensure!(
            (T::zero()..=T::one()).contains(&w),
            "instance weight outside [0,1]"
        );
    }
    weighted_ce_loss(items, fv, ft, labels, centers, clamp_eps)
}

fn weighted_ce_loss<T: Float>(
    items: &[(usize, T)],
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    labels: &[usize],
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> Result<SubsetLoss<T>> {
    let mut out = SubsetLoss::zero(fv, ft);
    if items.is_empty() {
        return Ok(out);
    }
    let inv_m = T::one() / T::from(items.len()).unwrap();
    for &(i, w) in items {
        ensure!(i < fv.rows(), "index {} out of range", i);
        let y = labels[i];
        for (emb, grad) in [(&*fv, &mut out.grad_fv), (&*ft, &mut out.grad_ft)] {
            let (s, ds) = barycenter_score_grad(emb.row(i), y, centers, clamp_eps);
            out.loss = out.loss - w * inv_m * s.ln();
            let coeff = -w * inv_m / s;
            let row = grad.row_mut(i);
            for (g, dsk) in row.iter_mut().zip(&ds) {
                *g = *g + coeff * *dsk;
            }
        }
    }
    Ok(out)
}

/// Noisy-or fusion of two score confidences: 1 − (1−s_v)(1−s_t).
pub fn instance_weight<T: Float>(s_v: T, s_t: T) -> Result<T> {
    ensure!(
        (T::zero()..=T::one()).contains(&s_v) && (T::zero()..=T::one()).contains(&s_t),
        "scores must lie in [0,1]"
    );
    Ok(T::one() - (T::one() - s_v) * (T::one() - s_t))
}

/// Noisy-or fusion of the two modality soft-label rows plus the corrected
/// class (argmax, ties to the lowest class index).
pub fn fuse_and_correct<T: Float>(soft_v: &[T], soft_t: &[T]) -> (Vec<T>, usize) {
    assert_eq!(soft_v.len(), soft_t.len());
    let fused: Vec<T> = soft_v
        .iter()
        .zip(soft_t)
        .map(|(&pv, &pt)| T::one() - (T::one() - pv) * (T::one() - pt))
        .collect();
    let mut best = 0;
    for (c, &v) in fused.iter().enumerate() {
        if v > fused[best] {
            best = c;
        }
    }
    (fused, best)
}

/// Mean-absolute-error loss over the noisy subset with corrected classes:
/// (1/m) Σ Σ_modality (1 − s(f_i, ŷ_i)); each term lies in [0, 1).
pub fn loss_noisy<T: Float>(
    items: &[(usize, usize)],
    fv: &Matrix<T>,
    ft: &Matrix<T>,
    centers: &BarycenterSet<T>,
    clamp_eps: T,
) -> Result<SubsetLoss<T>> {
    let mut out = SubsetLoss::zero(fv, ft);
    if items.is_empty() {
        return Ok(out);
    }
    let inv_m = T::one() / T::from(items.len()).unwrap();
    for &(i, corrected) in items {
        ensure!(i < fv.rows(), "index {} out of range", i);
        ensure!(
            corrected < centers.num_classes(),
            "corrected class {} out of range",
            corrected
        );
        for (emb, grad) in [(&*fv, &mut out.grad_fv), (&*ft, &mut out.grad_ft)] {
            let (s, ds) = barycenter_score_grad(emb.row(i), corrected, centers, clamp_eps);
            out.loss = out.loss + inv_m * (T::one() - s);
            let row = grad.row_mut(i);
            for (g, dsk) in row.iter_mut().zip(&ds) {
                *g = *g - inv_m * *dsk;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarycenterSource {
    /// Every instance carrying the (noisy) class label.
    All,
    /// Pure ∪ Hard members only; classes left empty fall back to All.
    Trusted,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub k_neighbors: usize,
    pub clamp_eps: f32,
    pub barycenter: BarycenterOpts<f32>,
    pub source: BarycenterSource,
}

/// Immutable per-epoch refinement state consumed by the batch loop.
#[derive(Debug, Clone)]
pub struct EpochSnapshot {
    pub soft: SoftLabelTable,
    pub assignment: PartitionAssignment,
    pub centers: BarycenterSet,
}

/// Full refresh from a training-set forward pass: soft labels in both
/// modalities, tri-partition, barycenters, hard-instance weights, and
/// corrected classes for noisy instances. Always driven by the given (noisy)
/// labels, never by previously corrected ones.
pub fn refine(
    fv: &Matrix<f32>,
    ft: &Matrix<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &RefineConfig,
) -> Result<EpochSnapshot> {
    let soft_v = knn_soft_labels(fv, labels, num_classes, cfg.k_neighbors)
        .context("visual soft labels")?;
    let soft_t =
        knn_soft_labels(ft, labels, num_classes, cfg.k_neighbors).context("text soft labels")?;
    let tags = partition(&soft_v, &soft_t, labels)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    match cfg.source {
        BarycenterSource::All => {
            for (i, &y) in labels.iter().enumerate() {
                members[y].push(i);
            }
        }
        BarycenterSource::Trusted => {
            for (i, &y) in labels.iter().enumerate() {
                if tags[i] != SubsetTag::Noisy {
                    members[y].push(i);
                }
            }
            for (c, m) in members.iter_mut().enumerate() {
                if m.is_empty() {
                    m.extend(labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i));
                }
            }
        }
    }
    let centers = compute_barycenters_from_members(fv, ft, &members, &cfg.barycenter)?;

    let mut corrected = vec![None; labels.len()];
    let mut weights = vec![None; labels.len()];
    for i in 0..labels.len() {
        match tags[i] {
            SubsetTag::Hard => {
                let s_v = barycenter_score(fv.row(i), labels[i], &centers, cfg.clamp_eps);
                let s_t = barycenter_score(ft.row(i), labels[i], &centers, cfg.clamp_eps);
                weights[i] = Some(instance_weight(s_v, s_t)?);
            }
            SubsetTag::Noisy => {
                let (_, y_hat) = fuse_and_correct(soft_v.row(i), soft_t.row(i));
                corrected[i] = Some(y_hat);
            }
            SubsetTag::Pure => {}
        }
    }

    Ok(EpochSnapshot {
        soft: SoftLabelTable {
            visual: soft_v,
            text: soft_t,
        },
        assignment: PartitionAssignment {
            tags,
            corrected,
            weights,
        },
        centers,
    })
}

/// Export `index,tag,corrected_class,weight` lines, empty fields where
/// undefined.
pub fn write_partition_csv(assignment: &PartitionAssignment, path: &Path) -> Result<()> {
    let mut s = String::from("index,tag,corrected_class,weight\n");
    for i in 0..assignment.len() {
        let corrected = assignment.corrected[i]
            .map(|c| c.to_string())
            .unwrap_or_default();
        let weight = assignment.weights[i]
            .map(|w| format!("{}", w))
            .unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", i, assignment.tags[i], corrected, weight));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
