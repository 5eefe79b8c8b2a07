//! Retrieval evaluation: MAP in both directions over full rankings,
//! 11-point interpolated precision-recall curves, and partition-quality
//! diagnostics against clean labels. AP arithmetic runs in f64.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::Serialize;

use crate::nir::{PartitionAssignment, SubsetTag};
use crate::numkit::{cosine_similarity, Matrix};

/// One query's gallery ranking: indices sorted by descending cosine
/// similarity (ties broken by ascending gallery index) with aligned
/// relevance flags (query and gallery item share a class label).
#[derive(Debug, Clone)]
pub struct RetrievalRanking {
    pub order: Vec<usize>,
    pub relevant: Vec<bool>,
}

impl RetrievalRanking {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Rank the gallery for every query embedding.
pub fn rank_queries(
    query_emb: &Matrix<f32>,
    gallery_emb: &Matrix<f32>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Vec<RetrievalRanking>> {
    ensure!(gallery_emb.rows() > 0, "empty gallery");
    ensure!(
        query_emb.cols() == gallery_emb.cols(),
        "embedding dims differ: {} vs {}",
        query_emb.cols(),
        gallery_emb.cols()
    );
    ensure!(query_emb.rows() == query_labels.len(), "query label count mismatch");
    ensure!(gallery_emb.rows() == gallery_labels.len(), "gallery label count mismatch");

    let mut rankings = Vec::with_capacity(query_emb.rows());
    let mut scored: Vec<(f32, usize)> = Vec::with_capacity(gallery_emb.rows());
    for q in 0..query_emb.rows() {
        scored.clear();
        for g in 0..gallery_emb.rows() {
            scored.push((cosine_similarity(query_emb.row(q), gallery_emb.row(g)), g));
        }
        scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let order: Vec<usize> = scored.iter().map(|&(_, g)| g).collect();
        let relevant: Vec<bool> = order
            .iter()
            .map(|&g| gallery_labels[g] == query_labels[q])
            .collect();
        rankings.push(RetrievalRanking { order, relevant });
    }
    Ok(rankings)
}

/// AP over the full ranking: (1/R) Σ_k Prec@k·rel(k). None when the query
/// has no relevant gallery item.
pub fn average_precision(ranking: &RetrievalRanking) -> Option<f64> {
    let total = ranking.num_relevant();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (k, &rel) in ranking.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

/// Mean AP over queries with at least one relevant gallery item; queries
/// without any are skipped.
pub fn map_score(
    query_emb: &Matrix<f32>,
    gallery_emb: &Matrix<f32>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    let rankings = rank_queries(query_emb, gallery_emb, query_labels, gallery_labels)?;
    Ok(map_from_rankings(&rankings))
}

pub fn map_from_rankings(rankings: &[RetrievalRanking]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in rankings {
        if let Some(ap) = average_precision(r) {
            total += ap;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub const PR_RECALL_LEVELS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Interpolated precision averaged over queries at the 11 standard recall
/// levels: P(r) = max precision at any position whose recall ≥ r.
pub fn pr_curve(rankings: &[RetrievalRanking]) -> Result<Vec<(f64, f64)>> {
    let with_relevant: Vec<&RetrievalRanking> =
        rankings.iter().filter(|r| r.num_relevant() > 0).collect();
    ensure!(!with_relevant.is_empty(), "no query has a relevant gallery item");

    let mut sums = [0.0f64; 11];
    for r in &with_relevant {
        let total = r.num_relevant() as f64;
        let n = r.relevant.len();
        let mut recall = vec![0.0f64; n];
        let mut precision = vec![0.0f64; n];
        let mut hits = 0usize;
        for k in 0..n {
            if r.relevant[k] {
                hits += 1;
            }
            recall[k] = hits as f64 / total;
            precision[k] = hits as f64 / (k + 1) as f64;
        }
        // Suffix max turns precision@k into interpolated precision.
        let mut best_from = vec![0.0f64; n];
        let mut running = 0.0f64;
        for k in (0..n).rev() {
            running = running.max(precision[k]);
            best_from[k] = running;
        }
        for (level_idx, &level) in PR_RECALL_LEVELS.iter().enumerate() {
            let pos = recall.iter().position(|&r| r >= level);
            // Recall reaches 1.0 at the last relevant item, so every level
            // has a position.
            let interp = pos.map(|k| best_from[k]).unwrap_or(0.0);
            sums[level_idx] += interp;
        }
    }
    let q = with_relevant.len() as f64;
    Ok(PR_RECALL_LEVELS
        .iter()
        .zip(&sums)
        .map(|(&r, &s)| (r, s / q))
        .collect())
}

/// Counts and quality fractions of a partition against the clean labels.
/// Vacuous denominators report 1.0 (nothing to get wrong).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionReport {
    pub n_pure: usize,
    pub n_hard: usize,
    pub n_noisy: usize,
    pub pure_purity: f64,
    pub noisy_recall: f64,
    pub correction_accuracy: f64,
}

pub fn partition_report(
    assignment: &PartitionAssignment,
    noisy_labels: &[usize],
    clean_labels: &[usize],
) -> Result<PartitionReport> {
    let n = assignment.len();
    ensure!(
        noisy_labels.len() == n && clean_labels.len() == n,
        "label lengths ({}, {}) do not match {} assignments",
        noisy_labels.len(),
        clean_labels.len(),
        n
    );
    let mut n_pure = 0;
    let mut n_hard = 0;
    let mut n_noisy = 0;
    let mut pure_clean = 0;
    let mut corrupted = 0;
    let mut corrupted_caught = 0;
    let mut corrected_right = 0;
    for i in 0..n {
        let is_corrupted = noisy_labels[i] != clean_labels[i];
        if is_corrupted {
            corrupted += 1;
        }
        match assignment.tags[i] {
            SubsetTag::Pure => {
                n_pure += 1;
                if !is_corrupted {
                    pure_clean += 1;
                }
            }
            SubsetTag::Hard => n_hard += 1,
            SubsetTag::Noisy => {
                n_noisy += 1;
                if is_corrupted {
                    corrupted_caught += 1;
                }
                if assignment.corrected[i] == Some(clean_labels[i]) {
                    corrected_right += 1;
                }
            }
        }
    }
    let frac = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(PartitionReport {
        n_pure,
        n_hard,
        n_noisy,
        pure_purity: frac(pure_clean, n_pure),
        noisy_recall: frac(corrupted_caught, corrupted),
        correction_accuracy: frac(corrected_right, n_noisy),
    })
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub map_i2t: f64,
    pub map_t2i: f64,
    pub n_queries_i2t: usize,
    pub n_queries_t2i: usize,
}

pub fn write_eval_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `recall,precision_i2t,precision_t2i` with the 11 standard levels.
pub fn write_pr_curve_csv(
    i2t: &[(f64, f64)],
    t2i: &[(f64, f64)],
    path: &Path,
) -> Result<()> {
    ensure!(i2t.len() == 11 && t2i.len() == 11, "expected 11 recall levels");
    let mut s = String::from("recall,precision_i2t,precision_t2i\n");
    for (a, b) in i2t.iter().zip(t2i) {
        ensure!((a.0 - b.0).abs() < 1e-12, "recall grids differ");
        s.push_str(&format!("{:.1},{:.6},{:.6}\n", a.0, a.1, b.1));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `epoch,n_pure,n_hard,n_noisy,pure_purity,noisy_recall,correction_accuracy`.
pub fn write_partition_report_csv(rows: &[(usize, PartitionReport)], path: &Path) -> Result<()> {
    let mut s =
        String::from("epoch,n_pure,n_hard,n_noisy,pure_purity,noisy_recall,correction_accuracy\n");
    for (epoch, r) in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            epoch, r.n_pure, r.n_hard, r.n_noisy, r.pure_purity, r.noisy_recall, r.correction_accuracy
        ));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn ranking(flags: &[bool]) -> RetrievalRanking {
        RetrievalRanking {
            order: (0..flags.len()).collect(),
            relevant: flags.to_vec(),
        }
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let r = ranking(&[true, true, false, false]);
        assert_eq!(average_precision(&r), Some(1.0));
    }

    #[test]
    fn textbook_ap_case() {
        // [relevant, irrelevant, relevant], R = 2 → (1/2)(1/1 + 2/3)
        let r = ranking(&[true, false, true]);
        let ap = average_precision(&r).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap = {}", ap);
    }

    #[test]
    fn no_relevant_items_skips_query() {
        let r = ranking(&[false, false]);
        assert_eq!(average_precision(&r), None);
        assert_eq!(map_from_rankings(&[r]), 0.0);
    }

    #[test]
    fn ap_is_one_iff_all_relevant_first() {
        let good = ranking(&[true, true, true, false]);
        assert_eq!(average_precision(&good), Some(1.0));
        let bad = ranking(&[true, false, true, true]);
        assert!(average_precision(&bad).unwrap() < 1.0);
    }

    /// Deliberately different AP formulation: walk ranks, averaging
    /// precision at each relevant position via explicit rational sums.
    fn ap_oracle(flags: &[bool]) -> Option<f64> {
        let positions: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(k, _)| k + 1)
            .collect();
        if positions.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for (count, &rank) in positions.iter().enumerate() {
            acc += (count + 1) as f64 / rank as f64;
        }
        Some(acc / positions.len() as f64)
    }

    #[test]
    fn map_matches_brute_force_oracle_on_random_configs() {
        let mut rng = Rng::seed_from(55);
        for _ in 0..50 {
            let n_query = 1 + rng.index(15);
            let n_gallery = 2 + rng.index(19);
            let d = 3 + rng.index(4);
            let c = 2 + rng.index(3);
            let mut qe = Matrix::<f32>::zeros(n_query, d);
            let mut ge = Matrix::<f32>::zeros(n_gallery, d);
            for v in qe.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            for v in ge.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let ql: Vec<usize> = (0..n_query).map(|_| rng.index(c)).collect();
            let gl: Vec<usize> = (0..n_gallery).map(|_| rng.index(c)).collect();

            let got = map_score(&qe, &ge, &ql, &gl).unwrap();
            let rankings = rank_queries(&qe, &ge, &ql, &gl).unwrap();
            let aps: Vec<f64> = rankings.iter().filter_map(|r| ap_oracle(&r.relevant)).collect();
            let want = if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            };
            assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
    }

    #[test]
    fn map_invariant_under_query_rescaling() {
        let mut rng = Rng::seed_from(66);
        let mut qe = Matrix::<f32>::zeros(6, 4);
        let mut ge = Matrix::<f32>::zeros(9, 4);
        for v in qe.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for v in ge.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let ql = vec![0, 1, 2, 0, 1, 2];
        let gl = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let base = map_score(&qe, &ge, &ql, &gl).unwrap();
        let mut scaled = qe.clone();
        for v in scaled.data_mut() {
            *v *= 4.0;
        }
        let after = map_score(&scaled, &ge, &ql, &gl).unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn map_rejects_empty_gallery() {
        let qe = Matrix::<f32>::zeros(1, 2);
        let ge = Matrix::<f32>::zeros(0, 2);
        assert!(map_score(&qe, &ge, &[0], &[]).is_err());
    }

    #[test]
    fn pr_perfect_ranking_is_flat_one() {
        let r = ranking(&[true, true, false]);
        let curve = pr_curve(&[r]).unwrap();
        assert_eq!(curve.len(), 11);
        for &(_, p) in &curve {
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn pr_single_relevant_ranked_last() {
        let n = 5;
        let mut flags = vec![false; n];
        flags[n - 1] = true;
        let curve = pr_curve(&[ranking(&flags)]).unwrap();
        let (r, p) = curve[10];
        assert_eq!(r, 1.0);
        assert!((p - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn pr_matches_brute_force_interpolation_oracle() {
        let mut rng = Rng::seed_from(77);
        for _ in 0..20 {
            let n = 3 + rng.index(10);
            let flags: Vec<bool> = (0..n).map(|_| rng.index(2) == 0).collect();
            if !flags.iter().any(|&f| f) {
                continue;
            }
            let curve = pr_curve(&[ranking(&flags)]).unwrap();
            let total = flags.iter().filter(|&&f| f).count() as f64;
            for (level_idx, &level) in PR_RECALL_LEVELS.iter().enumerate() {
                // Oracle: scan every cut position, keep max precision among
                // those with recall ≥ level.
                let mut best = 0.0f64;
                let mut hits = 0usize;
                for k in 0..n {
                    if flags[k] {
                        hits += 1;
                    }
                    let recall = hits as f64 / total;
                    let precision = hits as f64 / (k + 1) as f64;
                    if recall >= level && precision > best {
                        best = precision;
                    }
                }
                assert!(
                    (curve[level_idx].1 - best).abs() < 1e-9,
                    "level {}: {} vs {}",
                    level,
                    curve[level_idx].1,
                    best
                );
            }
        }
    }

    #[test]
    fn pr_precision_nonincreasing_in_recall() {
        let mut rng = Rng::seed_from(88);
        let rankings: Vec<RetrievalRanking> = (0..5)
            .map(|_| {
                let flags: Vec<bool> = (0..12).map(|_| rng.index(3) == 0).collect();
                ranking(&flags)
            })
            .filter(|r| r.num_relevant() > 0)
            .collect();
        let curve = pr_curve(&rankings).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12);
        }
    }

    #[test]
    fn pr_requires_some_relevant_item() {
        let r = ranking(&[false, false]);
        assert!(pr_curve(&[r]).is_err());
    }

    fn assignment(tags: Vec<SubsetTag>, corrected: Vec<Option<usize>>) -> PartitionAssignment {
        let weights = vec![None; tags.len()];
        PartitionAssignment {
            tags,
            corrected,
            weights,
        }
    }

    #[test]
    fn report_vacuous_case_uses_one() {
        let a = assignment(vec![SubsetTag::Pure, SubsetTag::Pure], vec![None, None]);
        let r = partition_report(&a, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(r.pure_purity, 1.0);
        assert_eq!(r.noisy_recall, 1.0);
        assert_eq!(r.correction_accuracy, 1.0);
    }

    #[test]
    fn report_perfect_correction() {
        let a = assignment(
            vec![SubsetTag::Noisy, SubsetTag::Noisy],
            vec![Some(1), Some(0)],
        );
        let r = partition_report(&a, &[0, 1], &[1, 0]).unwrap();
        assert_eq!(r.correction_accuracy, 1.0);
        assert_eq!(r.noisy_recall, 1.0);
    }

    #[test]
    fn report_matches_counting_oracle() {
        let mut rng = Rng::seed_from(99);
        let n = 100;
        let c = 4;
        let clean: Vec<usize> = (0..n).map(|_| rng.index(c)).collect();
        let mut noisy = clean.clone();
        for i in 0..n {
            if rng.index(3) == 0 {
                noisy[i] = (clean[i] + 1 + rng.index(c - 1)) % c;
            }
        }
        let tags: Vec<SubsetTag> = (0..n)
            .map(|_| match rng.index(3) {
                0 => SubsetTag::Pure,
                1 => SubsetTag::Hard,
                _ => SubsetTag::Noisy,
            })
            .collect();
        let corrected: Vec<Option<usize>> = tags
            .iter()
            .map(|t| (*t == SubsetTag::Noisy).then(|| rng.index(c)))
            .collect();
        let a = assignment(tags.clone(), corrected.clone());
        let r = partition_report(&a, &noisy, &clean).unwrap();

        let n_pure = tags.iter().filter(|&&t| t == SubsetTag::Pure).count();
        let n_noisy = tags.iter().filter(|&&t| t == SubsetTag::Noisy).count();
        assert_eq!(r.n_pure, n_pure);
        assert_eq!(r.n_noisy, n_noisy);
        assert_eq!(r.n_hard, n - n_pure - n_noisy);

        let pure_clean = (0..n)
            .filter(|&i| tags[i] == SubsetTag::Pure && noisy[i] == clean[i])
            .count();
        assert_eq!(r.pure_purity, pure_clean as f64 / n_pure as f64);

        let corrupted: Vec<usize> = (0..n).filter(|&i| noisy[i] != clean[i]).collect();
        let caught = corrupted.iter().filter(|&&i| tags[i] == SubsetTag::Noisy).count();
        assert_eq!(r.noisy_recall, caught as f64 / corrupted.len() as f64);

        let right = (0..n)
            .filter(|&i| tags[i] == SubsetTag::Noisy && corrected[i] == Some(clean[i]))
            .count();
        assert_eq!(r.correction_accuracy, right as f64 / n_noisy as f64);
    }

    #[test]
    fn csv_and_json_writers_produce_declared_headers() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvalReport {
            map_i2t: 0.5,
            map_t2i: 0.25,
            n_queries_i2t: 10,
            n_queries_t2i: 10,
        };
        let p = dir.path().join("eval_report.json");
        write_eval_report(&report, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"map_i2t\": 0.5"));

        let curve: Vec<(f64, f64)> = PR_RECALL_LEVELS.iter().map(|&r| (r, 1.0)).collect();
        let p = dir.path().join("pr_curve.csv");
        write_pr_curve_csv(&curve, &curve, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "recall,precision_i2t,precision_t2i");
        assert_eq!(lines.len(), 12);

        let pr = PartitionReport {
            n_pure: 1,
            n_hard: 2,
            n_noisy: 3,
            pure_purity: 1.0,
            noisy_recall: 0.5,
            correction_accuracy: 0.25,
        };
        let p = dir.path().join("partition_report.csv");
        write_partition_report_csv(&[(7, pr)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "epoch,n_pure,n_hard,n_noisy,pure_purity,noisy_recall,correction_accuracy\n7,1,2,3,"
        ));
    }
}
