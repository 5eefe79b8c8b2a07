//! Cross-modal margin preserving loss: for every in-batch pair, the cosine
//! similarity of the matched pair must exceed every mismatched pair's by at
//! least the margin, in both retrieval directions. Hinged violations are
//! averaged over the batch; gradients are exact for the given batch.

use anyhow::{ensure, Result};
use num_traits::Float;

use crate::numkit::{norm2, Matrix};

pub struct CmpLoss<T = f32> {
    pub loss: T,
    pub grad_fv: Matrix<T>,
    pub grad_ft: Matrix<T>,
}

/// Unit-normalized rows plus the original norms. Zero-norm rows stay zero
/// (their cosine is 0 and no gradient flows through them).
fn normalize_rows<T: Float>(m: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm2(m.row(r));
        norms.push(n);
        if n > T::zero() {
            for v in unit.row_mut(r) {
                *v = *v / n;
            }
        } else {
            for v in unit.row_mut(r) {
                *v = T::zero();
            }
        }
    }
    (unit, norms)
}

pub fn loss_cmp<T: Float>(fv: &Matrix<T>, ft: &Matrix<T>, margin: T) -> Result<CmpLoss<T>> {
    ensure!(
        fv.rows() == ft.rows() && fv.cols() == ft.cols(),
        "embedding shapes differ: {}x{} vs {}x{}",
        fv.rows(),
        fv.cols(),
        ft.rows(),
        ft.cols()
    );
    ensure!(margin >= T::zero(), "margin must be non-negative");
    let n = fv.rows();
    if n < 2 {
        // No mismatched pairs exist.
        return Ok(CmpLoss {
            loss: T::zero(),
            grad_fv: Matrix::zeros(fv.rows(), fv.cols()),
            grad_ft: Matrix::zeros(ft.rows(), ft.cols()),
        });
    }

    let (u, norms_v) = normalize_rows(fv);
    let (v, norms_t) = normalize_rows(ft);
    let sims = u.matmul_nt(&v); // sims[i][j] = cos(fv_i, ft_j)

    let inv_n = T::one() / T::from(n).unwrap();
    let mut loss = T::zero();
    let mut g = Matrix::<T>::zeros(n, n); // dL/dsims
    for i in 0..n {
        let diag = sims.get(i, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            // visual query i against text gallery
            let a = sims.get(i, j) - diag + margin;
            if a > T::zero() {
                loss = loss + a * inv_n;
                g.set(i, j, g.get(i, j) + inv_n);
                g.set(i, i, g.get(i, i) - inv_n);
            }
            // text query i against visual gallery: cos(ft_i, fv_j) = sims[j][i]
            let b = sims.get(j, i) - diag + margin;
            if b > T::zero() {
                loss = loss + b * inv_n;
                g.set(j, i, g.get(j, i) + inv_n);
                g.set(i, i, g.get(i, i) - inv_n);
            }
        }
    }

    // d cos(a,b)/da = (b̂ − cos·â)/‖a‖
    let gv = g.matmul(&v); // Σ_j g[i][j] v̂_j
    let mut grad_fv = Matrix::zeros(n, fv.cols());
    for i in 0..n {
        if norms_v[i] == T::zero() {
            continue;
        }
        let coeff = crate::numkit::dot(g.row(i), sims.row(i));
        let scale = T::one() / norms_v[i];
        let (urow, gvrow) = (u.row(i), gv.row(i));
        let out = grad_fv.row_mut(i);
        for c in 0..out.len() {
            out[c] = (gvrow[c] - coeff * urow[c]) * scale;
        }
    }

    let gt_u = g.matmul_tn(&u); // row j = Σ_i g[i][j] û_i
    let mut grad_ft = Matrix::zeros(n, ft.cols());
    for j in 0..n {
        if norms_t[j] == T::zero() {
            continue;
        }
        let mut coeff = T::zero();
        for i in 0..n {
            coeff = coeff + g.get(i, j) * sims.get(i, j);
        }
        let scale = T::one() / norms_t[j];
        let (vrow, gurow) = (v.row(j), gt_u.row(j));
        let out = grad_ft.row_mut(j);
        for c in 0..out.len() {
            out[c] = (gurow[c] - coeff * vrow[c]) * scale;
        }
    }

    Ok(CmpLoss {
        loss,
        grad_fv,
        grad_ft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{cosine_similarity, grad_check, Rng};
    use proptest::prelude::*;

    /// Two unit text rows e1/e2 and visual rows with prescribed cosines
    /// (diag on the matched axis, off elsewhere) padded into 4 dims.
    fn prescribed_pair(diag: f64, off: f64) -> (Matrix<f64>, Matrix<f64>) {
        let rest = (1.0 - diag * diag - off * off).sqrt();
        let fv = Matrix::from_rows(&[
            vec![diag, off, rest, 0.0],
            vec![off, diag, 0.0, rest],
        ])
        .unwrap();
        let ft = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        (fv, ft)
    }

    #[test]
    fn satisfied_margins_give_zero_loss() {
        let (fv, ft) = prescribed_pair(0.9, 0.1);
        assert!((cosine_similarity(fv.row(0), ft.row(0)) - 0.9).abs() < 1e-12);
        assert!((cosine_similarity(fv.row(0), ft.row(1)) - 0.1).abs() < 1e-12);
        let out = loss_cmp(&fv, &ft, 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_fv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverted_similarities_give_two() {
        let (fv, ft) = prescribed_pair(0.1, 0.9);
        let out = loss_cmp(&fv, &ft, 0.2).unwrap();
        assert!((out.loss - 2.0).abs() < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn identical_rows_zero_margin_zero_loss() {
        let fv = Matrix::from_rows(&vec![vec![0.3f64, -0.7, 0.2]; 4]).unwrap();
        let ft = Matrix::from_rows(&vec![vec![0.5f64, 0.1, -0.4]; 4]).unwrap();
        let out = loss_cmp(&fv, &ft, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn single_row_batch_is_zero() {
        let fv = Matrix::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let ft = Matrix::from_rows(&[vec![0.5f32, 0.5]]).unwrap();
        let out = loss_cmp(&fv, &ft, 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>) {
        let mut rng = Rng::seed_from(seed);
        let mut fv = Matrix::zeros(n, d);
        let mut ft = Matrix::zeros(n, d);
        for v in fv.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f64;
        }
        for v in ft.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f64;
        }
        (fv, ft)
    }

    #[test]
    fn gradients_pass_grad_check() {
        for seed in [1u64, 2, 3] {
            let (fv, ft) = random_batch(5, 6, seed);
            let margin = 0.2;
            let rows = fv.rows();
            let cols = fv.cols();
            let f = |flat: &[f64]| {
                let fvp = Matrix::from_vec(rows, cols, flat[..rows * cols].to_vec())?;
                let ftp = Matrix::from_vec(rows, cols, flat[rows * cols..].to_vec())?;
                let out = loss_cmp(&fvp, &ftp, margin)?;
                let mut grad = out.grad_fv.data().to_vec();
                grad.extend_from_slice(out.grad_ft.data());
                Ok((out.loss, grad))
            };
            let mut flat = fv.data().to_vec();
            flat.extend_from_slice(ft.data());
            let err = grad_check(f, &flat, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {}: relative error {}", seed, err);
        }
    }

    #[test]
    fn monotone_in_margin() {
        let (fv, ft) = random_batch(6, 5, 9);
        let mut prev = 0.0;
        for k in 0..6 {
            let m = 0.1 * k as f64;
            let out = loss_cmp(&fv, &ft, m).unwrap();
            assert!(out.loss >= prev - 1e-12, "margin {}: {} < {}", m, out.loss, prev);
            prev = out.loss;
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_row_scale_invariant(
            seed in 0u64..500,
            scale in 0.05f64..20.0,
            row in 0usize..4,
        ) {
            let (fv, ft) = random_batch(4, 3, seed);
            let base = loss_cmp(&fv, &ft, 0.2).unwrap().loss;
            prop_assert!(base >= 0.0);
            let mut scaled = fv.clone();
            for v in scaled.row_mut(row) {
                *v *= scale;
            }
            let after = loss_cmp(&scaled, &ft, 0.2).unwrap().loss;
            prop_assert!((after - base).abs() < 1e-9, "{} vs {}", after, base);
        }
    }
}
