use serde::{Deserialize, Serialize};

use crate::record::BenchRecord;
use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `median_ns` against `nnz` over one
/// `(op, impl, dims, threads)` group of at least four records.
pub fn fit_nnz_linearity(records: &[BenchRecord]) -> Result<LinearFit> {
    if records.len() < 4 {
        return Err(BenchError::InsufficientPoints { need: 4, got: records.len() });
    }
    let r0 = &records[0];
    if records.iter().any(|r| {
        (r.op, r.implementation, &r.dims, r.threads, r.unit) != (r0.op, r0.implementation, &r0.dims, r0.threads, r0.unit)
    }) {
        return Err(BenchError::InvalidArgument("records mix operations, implementations, shapes or units".into()));
    }
    let n = records.len() as f64;
    let mx = records.iter().map(|r| r.nnz as f64).sum::<f64>() / n;
    let my = records.iter().map(|r| r.median_ns).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for r in records {
        let (dx, dy) = (r.nnz as f64 - mx, r.median_ns - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(BenchError::InvalidArgument("all records have the same nnz".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = records.iter().map(|r| (r.median_ns - (intercept + slope * r.nnz as f64)).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(LinearFit { slope, intercept, r2 })
}

/// Smallest measured sparsity at which the sparse median is no slower than
/// the dense one.
pub fn crossover(sparse: &[BenchRecord], dense: &BenchRecord) -> Result<Option<f64>> {
    if let Some(r) = sparse.iter().find(|r| r.dims != dense.dims || r.threads != dense.threads || r.op != dense.op) {
        return Err(BenchError::InvalidArgument(format!(
            "sparse record {}/{} threads does not match dense {}/{} threads",
            r.dims, r.threads, dense.dims, dense.threads
        )));
    }
    Ok(sparse
        .iter()
        .filter(|r| r.median_ns <= dense.median_ns)
        .map(|r| r.sparsity)
        .min_by(f64::total_cmp))
}

/// Pairs of consecutive sparsities (ascending) where the median rises, with
/// whether the rise exceeds the larger of the two IQRs.
pub fn monotonicity_inversions(records: &[BenchRecord]) -> Vec<(f64, f64, bool)> {
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity));
    sorted
        .windows(2)
        .filter(|w| w[1].median_ns > w[0].median_ns)
        .map(|w| (w[0].sparsity, w[1].sparsity, w[1].median_ns - w[0].median_ns > w[0].iqr_ns.max(w[1].iqr_ns)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{BenchImpl, Op, Unit};

    fn rec(s: f64, nnz: usize, median: f64) -> BenchRecord {
        BenchRecord {
            op: Op::LinearBwd,
            implementation: BenchImpl::SparseLinear,
            dims: "10x10x4".into(),
            sparsity: s,
            nnz,
            threads: 1,
            repeats: 3,
            warmup: 0,
            median_ns: median,
            iqr_ns: 1.0,
            seed: 0,
            unit: Unit::Ns,
        }
    }

    #[test]
    fn exact_line() {
        let recs: Vec<_> = (1..=5).map(|i| rec(1.0 - i as f64 / 10.0, i * 10, 3.0 * (i * 10) as f64 + 7.0)).collect();
        let f = fit_nnz_linearity(&recs).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 7.0).abs() < 1e-9);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn outlier_lowers_r2() {
        let mut recs: Vec<_> = (1..=5).map(|i| rec(0.5, i * 10, (i * 10) as f64)).collect();
        recs[2].median_ns = 500.0;
        let f = fit_nnz_linearity(&recs).unwrap();
        assert!(f.r2 < 1.0 && f.r2 > 0.0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_nnz_linearity(&[rec(0.1, 1, 1.0)]), Err(BenchError::InsufficientPoints { .. })));
        let mut recs: Vec<_> = (1..=4).map(|i| rec(0.5, i, i as f64)).collect();
        recs[3].threads = 2;
        assert!(fit_nnz_linearity(&recs).is_err());
        let same: Vec<_> = (1..=4).map(|i| rec(0.5, 3, i as f64)).collect();
        assert!(fit_nnz_linearity(&same).is_err());
    }

    #[test]
    fn crossover_cases() {
        let dense = BenchRecord { implementation: BenchImpl::Dense, ..rec(0.0, 100, 50.0) };
        let slower = vec![rec(0.8, 20, 90.0), rec(0.9, 10, 60.0)];
        assert_eq!(crossover(&slower, &dense).unwrap(), None);
        let faster = vec![rec(0.9, 10, 5.0), rec(0.8, 20, 10.0)];
        assert_eq!(crossover(&faster, &dense).unwrap(), Some(0.8));
        let mixed = vec![rec(0.8, 20, 90.0), rec(0.9, 10, 40.0), rec(0.99, 1, 4.0)];
        assert_eq!(crossover(&mixed, &dense).unwrap(), Some(0.9));
        let other = BenchRecord { dims: "1x1x1".into(), ..dense };
        assert!(crossover(&mixed, &other).is_err());
    }

    #[test]
    fn inversions() {
        let recs = vec![rec(0.8, 20, 10.0), rec(0.9, 10, 10.5), rec(0.95, 5, 20.0), rec(0.99, 1, 1.0)];
        assert_eq!(monotonicity_inversions(&recs), vec![(0.8, 0.9, false), (0.9, 0.95, true)]);
    }
}
