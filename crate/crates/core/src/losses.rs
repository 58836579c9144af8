//! Training objectives and their gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, contract_err, Result};
use crate::real::{gemm, Op, Real};
use crate::tensor::Tensor;

/// Index of the positive partner of row `j` among `2n` rows.
pub fn positive_index(j: usize, n: usize) -> usize {
    if j < n {
        j + n
    } else {
        j - n
    }
}

fn check_contrastive<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<usize> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(config_err!("temperature must be positive, got {temperature}"));
    }
    if z.shape().len() != 2 || z.dim(0) == 0 || z.dim(0) % 2 != 0 {
        return Err(contract_err!("contrastive batch must be [2N, P] with N >= 1, got {:?}", z.shape()));
    }
    Ok(z.dim(0) / 2)
}

/// InfoNCE over `2N` unit rows where row `j` and row `j ± N` are positives.
pub fn info_nce<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<T> {
    info_nce_with_grad(z, temperature).map(|(l, _)| l)
}

/// [`info_nce`] and `d loss / d z`.
pub fn info_nce_with_grad<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<(T, Tensor<T>)> {
    check_contrastive(z, temperature)?;
    let tol = T::epsilon().sqrt() * T::of(10.0);
    for j in 0..z.dim(0) {
        let n2: T = z.item(j).iter().map(|v| *v * *v).sum();
        if (n2.sqrt() - T::one()).abs() > tol {
            return Err(contract_err!("row {j} of the contrastive batch has norm {}, expected 1", n2.sqrt()));
        }
    }
    info_nce_raw(z, temperature)
}

/// The same objective without the unit-norm check, for arbitrary rows.
pub fn info_nce_raw<T: Real>(z: &Tensor<T>, temperature: f64) -> Result<(T, Tensor<T>)> {
    let n = check_contrastive(z, temperature)?;
    let rows = 2 * n;
    let p = z.dim(1);
    let inv_tau = T::of(1.0 / temperature);
    let mut s = vec![T::zero(); rows * rows];
    gemm(rows, p, rows, z.data(), Op::N, z.data(), Op::T, &mut s, false);
    s.iter_mut().for_each(|v| *v *= inv_tau);

    let scale = T::one() / T::of(rows as f64);
    let mut loss = T::zero();
    // g holds d loss / d s.
    let mut g = vec![T::zero(); rows * rows];
    for j in 0..rows {
        let row = &s[j * rows..(j + 1) * rows];
        let m = row.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &v)| v).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (k, &v) in row.iter().enumerate() {
            if k != j {
                sum += (v - m).exp();
            }
        }
        let lse = m + sum.ln();
        let pos = positive_index(j, n);
        loss += lse - row[pos];
        let grow = &mut g[j * rows..(j + 1) * rows];
        for (k, &v) in row.iter().enumerate() {
            if k != j {
                grow[k] = (v - m).exp() / sum * scale;
            }
        }
        grow[pos] -= scale;
    }
    loss *= scale;

    // s = Z Z^T / tau, so dZ = (G + G^T) Z / tau.
    let mut sym = vec![T::zero(); rows * rows];
    for a in 0..rows {
        for b in 0..rows {
            sym[a * rows + b] = (g[a * rows + b] + g[b * rows + a]) * inv_tau;
        }
    }
    let mut grad = Tensor::zeros(&[rows, p]);
    gemm(rows, rows, p, &sym, Op::N, z.data(), Op::N, grad.data_mut(), false);
    Ok((loss, grad))
}

fn mse_with_grad<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(contract_err!("prediction length {} differs from target length {}", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(contract_err!("empty batch"));
    }
    let inv = T::one() / T::of(pred.len() as f64);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&d, &t)| {
            let e = d - t;
            loss += e * e;
            T::of(2.0) * e * inv
        })
        .collect();
    Ok((loss * inv, grad))
}

/// Mean of `(d_i - gt_i)^2` against nonnegative distances.
pub fn intra_mse<T: Real>(pred: &[T], gt_distance: &[T]) -> Result<T> {
    intra_mse_with_grad(pred, gt_distance).map(|(l, _)| l)
}

pub fn intra_mse_with_grad<T: Real>(pred: &[T], gt_distance: &[T]) -> Result<(T, Vec<T>)> {
    if let Some(i) = gt_distance.iter().position(|&g| g < T::zero()) {
        return Err(contract_err!("intra-personal distance {i} is negative"));
    }
    mse_with_grad(pred, gt_distance)
}

/// Mean squared error against signed changes.
pub fn task_mse<T: Real>(pred: &[T], gt_signed: &[T]) -> Result<T> {
    task_mse_with_grad(pred, gt_signed).map(|(l, _)| l)
}

pub fn task_mse_with_grad<T: Real>(pred: &[T], gt_signed: &[T]) -> Result<(T, Vec<T>)> {
    mse_with_grad(pred, gt_signed)
}

/// `L = L_inter + L_intra`.
pub fn combined_loss<T: Real>(l_inter: T, l_intra: T) -> T {
    l_inter + l_intra
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn unit_rows(rows: usize, p: usize, seed: u64) -> Tensor<f64> {
        let mut r = stream(seed);
        let mut data: Vec<f64> = (0..rows * p).map(|_| r.gen_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(p) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::from_vec(&[rows, p], data)
    }

    #[test]
    fn single_pair_is_exactly_zero() {
        for seed in 0..20 {
            let z = unit_rows(2, 5, seed);
            assert_eq!(info_nce(&z, 0.1).unwrap(), 0.0);
        }
    }

    #[test]
    fn basis_vector_example() {
        let z = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        // Row j: positive similarity 10, negatives {0, 10, 0} minus self.
        let per_row = (2.0 * 1.0f64 + (10.0f64).exp()).ln() - 10.0;
        assert!((info_nce(&z, 0.1).unwrap() - per_row).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_batches() {
        let z = unit_rows(4, 3, 1);
        assert!(matches!(info_nce(&z, 0.0), Err(crate::Error::Config(_))));
        assert!(matches!(info_nce(&unit_rows(3, 3, 1), 0.1), Err(crate::Error::Contract(_))));
        let mut bad = z.clone();
        bad.item_mut(0)[0] += 0.5;
        assert!(matches!(info_nce(&bad, 0.1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(intra_mse(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(intra_mse(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(task_mse(&[-2.6, 1.3], &[-2.6, 1.3]).unwrap(), 0.0);
        assert_eq!(task_mse(&[0.0, 0.0], &[-2.0, 2.0]).unwrap(), 4.0);
        assert!(intra_mse(&[0.0], &[-1.0]).is_err());
        assert!(task_mse(&[0.0], &[1.0, 2.0]).is_err());
        assert_eq!(combined_loss(1.5, 0.25), 1.75);
        assert_eq!(combined_loss(0.0, 0.0), 0.0);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let z = unit_rows(6, 4, 7);
        let (_, g) = info_nce_raw(&z, 0.1).unwrap();
        let h = 1e-5;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let fd = (info_nce_raw(&zp, 0.1).unwrap().0 - info_nce_raw(&zm, 0.1).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g.data()[i]);
        }
    }
}
