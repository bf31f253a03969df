//! Scoring against ground truth: endmember alignment, abundance and
//! coefficient RMSE, mean spectral angle, and coefficient histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{AbundanceTensor, EndmemberMatrix, NonlinearField};
use crate::training::loss::pixel_angle;

/// Relative slack under which two assignment costs count as equal.
const COST_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_abun: f64,
    /// Radians.
    pub sad_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_b: Option<f64>,
    /// `permutation[k]` is the true index matched to estimate `k`.
    pub permutation: Vec<usize>,
}

/// Spectral angle in radians; `None` when either vector is zero.
pub fn spectral_angle(a: &[f32], b: &[f32]) -> Option<f64> {
    pixel_angle(a, b).map(|p| p.angle)
}

fn sad_matrix(m_hat: &EndmemberMatrix, m_true: &EndmemberMatrix) -> Result<Vec<Vec<f64>>> {
    if m_hat.count() != m_true.count() || m_hat.bands() != m_true.bands() {
        return Err(Error::data(format!(
            "estimate has {}x{} endmembers, truth {}x{}",
            m_hat.count(),
            m_hat.bands(),
            m_true.count(),
            m_true.bands()
        )));
    }
    m_hat
        .rows()
        .map(|a| {
            m_true
                .rows()
                .map(|b| spectral_angle(a, b).ok_or_else(|| Error::data("zero endmember row")))
                .collect()
        })
        .collect()
}

/// Minimum-cost perfect matching on a square matrix, returning the
/// column assigned to each row (shortest augmenting paths with
/// potentials).
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays with a virtual column 0
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

fn assignment_cost(cost: &[Vec<f64>], a: &[usize]) -> f64 {
    a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal matching that is lexicographically first among all optimal
/// ones: each row in turn takes the lowest column that still admits an
/// optimal completion.
fn first_optimal_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let best = assignment_cost(cost, &min_cost_assignment(cost));
    let tie = COST_TIE * best.abs().max(1.0);
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let chosen = (0..n)
            .filter(|j| !fixed.contains(j))
            .find(|&j| {
                let cols: Vec<usize> = (0..n).filter(|c| *c != j && !fixed.contains(c)).collect();
                let sub: Vec<Vec<f64>> = rest_rows
                    .iter()
                    .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
                    .collect();
                let rest = assignment_cost(&sub, &min_cost_assignment(&sub));
                fixed_cost + cost[i][j] + rest <= best + tie
            })
            .expect("an optimal completion always exists");
        fixed_cost += cost[i][chosen];
        fixed.push(chosen);
    }
    fixed
}

/// Permutation minimizing the summed spectral angle between estimated
/// and true endmembers; ties go to the lowest true index.
pub fn match_endmembers(m_hat: &EndmemberMatrix, m_true: &EndmemberMatrix) -> Result<Vec<usize>> {
    Ok(first_optimal_assignment(&sad_matrix(m_hat, m_true)?))
}

fn check_permutation(perm: &[usize], r: usize) -> Result<()> {
    let mut seen = vec![false; r];
    if perm.len() != r {
        return Err(Error::data(format!("permutation has {} entries, expected {r}", perm.len())));
    }
    for &p in perm {
        if p >= r || std::mem::replace(&mut seen[p], true) {
            return Err(Error::data(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

/// RMSE over all entries after moving estimated channel `k` to
/// `perm[k]`.
pub fn rmse_abun(a_hat: &AbundanceTensor, a_true: &AbundanceTensor, perm: &[usize]) -> Result<f64> {
    if a_hat.tensor().shape() != a_true.tensor().shape() {
        return Err(Error::data(format!(
            "abundance shapes {:?} and {:?} differ",
            a_hat.tensor().shape(),
            a_true.tensor().shape()
        )));
    }
    let r = a_true.endmembers();
    check_permutation(perm, r)?;
    let mut total = 0.0f64;
    for (est, truth) in a_hat.tensor().data().chunks(r).zip(a_true.tensor().data().chunks(r)) {
        for (k, &p) in perm.iter().enumerate() {
            let d = f64::from(est[k]) - f64::from(truth[p]);
            total += d * d;
        }
    }
    Ok((total / a_true.tensor().len() as f64).sqrt())
}

/// Mean spectral angle between estimate `k` and true endmember `perm[k]`.
pub fn sad_end(m_hat: &EndmemberMatrix, m_true: &EndmemberMatrix, perm: &[usize]) -> Result<f64> {
    let cost = sad_matrix(m_hat, m_true)?;
    check_permutation(perm, cost.len())?;
    Ok(assignment_cost(&cost, perm) / cost.len() as f64)
}

pub fn rmse_b(b_hat: &NonlinearField, b_true: &NonlinearField) -> Result<f64> {
    let (x, y) = (b_hat.tensor(), b_true.tensor());
    if x.shape() != y.shape() {
        return Err(Error::data(format!("coefficient fields {:?} and {:?} differ", x.shape(), y.shape())));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok((total / x.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len()).map(|i| self.min + (i as f64 + 0.5) * w).collect()
    }

    /// `bin_center,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,count\n");
        for (c, n) in self.centers().iter().zip(&self.counts) {
            let _ = writeln!(s, "{c},{n}");
        }
        s
    }
}

/// Equal-width histogram over `[min, max]`; the maximum falls in the last
/// bin and a constant field fills the first.
pub fn b_histogram(b: &NonlinearField, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let data = b.tensor().data();
    let (min, max) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(f64::from(v)), hi.max(f64::from(v)))
    });
    let mut counts = vec![0; bins];
    let span = max - min;
    for &v in data {
        let i = if span > 0.0 {
            (((f64::from(v) - min) / span * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1;
    }
    Ok(Histogram { min, max, counts })
}

/// Aligns the estimate to the truth by endmembers and scores it. The
/// coefficient RMSE is reported when both sides carry a field.
pub fn evaluate(
    m_hat: &EndmemberMatrix,
    a_hat: &AbundanceTensor,
    b_hat: Option<&NonlinearField>,
    m_true: &EndmemberMatrix,
    a_true: &AbundanceTensor,
    b_true: Option<&NonlinearField>,
) -> Result<EvalReport> {
    let permutation = match_endmembers(m_hat, m_true)?;
    Ok(EvalReport {
        rmse_abun: rmse_abun(a_hat, a_true, &permutation)?,
        sad_end: sad_end(m_hat, m_true, &permutation)?,
        rmse_b: match (b_hat, b_true) {
            (Some(x), Some(y)) => Some(rmse_b(x, y)?),
            _ => None,
        },
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn m(rows: &[&[f32]]) -> EndmemberMatrix {
        EndmemberMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn permuted_endmembers_are_recovered() {
        let truth = m(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.2], &[0.3, 0.0, 1.0]]);
        let est = m(&[&[0.3, 0.0, 1.0], &[1.0, 0.1, 0.0], &[0.0, 1.0, 0.2]]);
        let perm = match_endmembers(&est, &truth).unwrap();
        assert_eq!(perm, vec![2, 0, 1]);
        assert_eq!(sad_end(&est, &truth, &perm).unwrap(), 0.0);
    }

    #[test]
    fn crossed_pair_is_swapped() {
        let truth = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let est = m(&[&[0.2, 1.0], &[1.0, 0.3]]);
        assert_eq!(match_endmembers(&est, &truth).unwrap(), vec![1, 0]);
    }

    #[test]
    fn ties_go_to_the_first_index() {
        let truth = m(&[&[1.0, 0.5], &[1.0, 0.5], &[1.0, 0.5]]);
        let est = m(&[&[0.2, 1.0], &[1.0, 0.3], &[0.4, 0.4]]);
        assert_eq!(match_endmembers(&est, &truth).unwrap(), vec![0, 1, 2]);
        assert!(match_endmembers(&m(&[&[1.0, 0.0]]), &truth).is_err());
    }

    #[test]
    fn abundance_rmse_examples() {
        let a = AbundanceTensor::new(Tensor::new(&[1, 2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap()).unwrap();
        assert_eq!(rmse_abun(&a, &a, &[0, 1]).unwrap(), 0.0);
        let shifted = AbundanceTensor::new(Tensor::new(&[1, 2, 2], vec![0.4, 0.6, 0.7, 0.3]).unwrap()).unwrap();
        assert!((rmse_abun(&shifted, &a, &[0, 1]).unwrap() - 0.1).abs() < 1e-7);
        let swapped = AbundanceTensor::new(Tensor::new(&[1, 2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap()).unwrap();
        assert_eq!(rmse_abun(&swapped, &a, &[1, 0]).unwrap(), 0.0);
        assert!(rmse_abun(&a, &a, &[0, 0]).is_err());
    }

    #[test]
    fn coefficient_rmse_and_histogram() {
        let b = NonlinearField::new(Tensor::new(&[2, 2, 1], vec![0.1, -0.2, 0.3, 0.0]).unwrap()).unwrap();
        assert_eq!(rmse_b(&b, &b).unwrap(), 0.0);
        let h = b_histogram(&b, 5).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.counts[4], 1);
        let flat = NonlinearField::new(Tensor::full(&[3, 3, 1], 0.2)).unwrap();
        let h = b_histogram(&flat, 4).unwrap();
        assert_eq!(h.counts, vec![9, 0, 0, 0]);
        assert!(h.to_csv().starts_with("bin_center,count\n"));
        assert!(b_histogram(&flat, 0).is_err());
    }

    #[test]
    fn report_omits_missing_coefficients() {
        let r = EvalReport {
            rmse_abun: 0.0,
            sad_end: 0.0,
            rmse_b: None,
            permutation: vec![0],
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("rmse_b") && json.contains("permutation"));
    }
}
