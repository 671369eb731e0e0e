//! Single-subject trajectory data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpaceTimePoint;

/// Time stamps, planar locations, responses and covariate rows for one
/// subject, sorted by strictly increasing time. A missing response marks a
/// point to be predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    times: Vec<f64>,
    locations: Vec<[f64; 2]>,
    responses: Vec<Option<f64>>,
    covariate_names: Vec<String>,
    /// Row-major, `len × p`.
    covariates: Vec<f64>,
}

impl TrajectoryDataset {
    /// Builds a dataset from rows already sorted by time.
    pub fn new(
        times: Vec<f64>,
        locations: Vec<[f64; 2]>,
        responses: Vec<Option<f64>>,
        covariate_names: Vec<String>,
        covariates: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = times.len();
        if locations.len() != n || responses.len() != n || covariates.len() != n {
            return Err(Error::Dimension(format!(
                "dataset columns disagree: {} times, {} locations, {} responses, {} covariate rows",
                n,
                locations.len(),
                responses.len(),
                covariates.len()
            )));
        }
        let p = covariate_names.len();
        let mut flat = Vec::with_capacity(n * p);
        for (i, row) in covariates.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Data { row: i, message: format!("expected {p} covariates, found {}", row.len()) });
            }
            flat.extend_from_slice(row);
        }
        for i in 0..n {
            if !times[i].is_finite() || !locations[i].iter().all(|c| c.is_finite()) {
                return Err(Error::Data { row: i, message: "non-finite time or coordinate".into() });
            }
            if matches!(responses[i], Some(v) if !v.is_finite()) {
                return Err(Error::Data { row: i, message: "non-finite response".into() });
            }
            if flat[i * p..(i + 1) * p].iter().any(|v| !v.is_finite()) {
                return Err(Error::Data { row: i, message: "non-finite covariate".into() });
            }
            if i > 0 && times[i] <= times[i - 1] {
                let message = if times[i] == times[i - 1] {
                    format!("duplicate time {}", times[i])
                } else {
                    format!("time {} precedes {}", times[i], times[i - 1])
                };
                return Err(Error::Data { row: i, message });
            }
        }
        Ok(TrajectoryDataset { times, locations, responses, covariate_names, covariates: flat })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of covariates `p`.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    pub fn responses(&self) -> &[Option<f64>] {
        &self.responses
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn location(&self, i: usize) -> [f64; 2] {
        self.locations[i]
    }

    pub fn response(&self, i: usize) -> Option<f64> {
        self.responses[i]
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.covariates[i * p..(i + 1) * p]
    }

    pub fn point(&self, i: usize) -> SpaceTimePoint {
        SpaceTimePoint::new(self.times[i], self.locations[i])
    }

    /// Epoch label of row `i` for the discrete-time models: its rank in time.
    pub fn epoch(&self, i: usize) -> usize {
        i + 1
    }

    /// Rows with an observed response.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.responses[i].is_some()).collect()
    }

    /// Rows flagged for prediction (missing response).
    pub fn targets(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.responses[i].is_none()).collect()
    }

    /// Covariate rows for `rows` as an `len(rows) × p` matrix.
    pub fn design(&self, rows: &[usize]) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(rows.len(), p, |r, j| self.covariates[rows[r] * p + j])
    }

    /// Responses at `rows`; fails naming the first row without one.
    pub fn observed_values(&self, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| {
                self.responses
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::Data { row: i, message: "row has no observed response".into() })
            })
            .collect()
    }

    /// Copy with the responses at `rows` removed (turned into targets).
    pub fn mask(&self, rows: &[usize]) -> Self {
        let mut out = self.clone();
        for &i in rows {
            out.responses[i] = None;
        }
        out
    }

    /// Keeps only `rows` (sorted, deduplicated first).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dimension(format!("row {bad} out of range for {} rows", self.len())));
        }
        TrajectoryDataset::new(
            rows.iter().map(|&i| self.times[i]).collect(),
            rows.iter().map(|&i| self.locations[i]).collect(),
            rows.iter().map(|&i| self.responses[i]).collect(),
            self.covariate_names.clone(),
            rows.iter().map(|&i| self.x(i).to_vec()).collect(),
        )
    }

    /// Applies `f` to every location (for invariance checks and projections).
    pub fn map_locations(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut out = self.clone();
        out.locations = self.locations.iter().map(|&s| f(s)).collect();
        out
    }

    /// Adds `shift` to every time stamp.
    pub fn shift_times(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.times = self.times.iter().map(|t| t + shift).collect();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TrajectoryDataset {
        TrajectoryDataset::new(
            vec![1.0, 2.0, 3.5],
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            vec![Some(0.5), None, Some(-1.0)],
            vec!["slope".into()],
            vec![vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap()
    }

    #[test]
    fn accessors_and_targets() {
        let d = toy();
        assert_eq!(d.len(), 3);
        assert_eq!(d.p(), 1);
        assert_eq!(d.observed(), vec![0, 2]);
        assert_eq!(d.targets(), vec![1]);
        assert_eq!(d.x(2), &[3.0]);
        assert_eq!(d.design(&[0, 2])[(1, 0)], 3.0);
        assert!(d.observed_values(&[1]).is_err());
    }

    #[test]
    fn rejects_duplicate_and_unsorted_times() {
        let err = TrajectoryDataset::new(
            vec![1.0, 1.0],
            vec![[0.0, 0.0]; 2],
            vec![Some(0.0); 2],
            vec![],
            vec![vec![], vec![]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { row: 1, .. }));
        let err = TrajectoryDataset::new(
            vec![2.0, 1.0],
            vec![[0.0, 0.0]; 2],
            vec![Some(0.0); 2],
            vec![],
            vec![vec![], vec![]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data { row: 1, .. }));
    }

    #[test]
    fn subset_and_mask() {
        let d = toy();
        let s = d.subset(&[2, 0]).unwrap();
        assert_eq!(s.times(), &[1.0, 3.5]);
        let m = d.mask(&[0]);
        assert_eq!(m.targets(), vec![0, 1]);
    }
}
