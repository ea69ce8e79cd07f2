use mddkit_tensor::Tensor;

use crate::error::{invalid, shape, Result};

/// Per-frame categorical distributions over the output vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    probs: Tensor,
    log_probs: Tensor,
}

impl PosteriorGrid {
    /// Row-wise log-softmax of an `n x K` logit matrix.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (n, k) = logits.dims2()?;
        if n == 0 || k == 0 {
            return Err(shape("posterior grid needs at least one frame and one class"));
        }
        let mut log_probs = vec![0.0; n * k];
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter().enumerate() {
                log_probs[i * k + j] = v - lse;
            }
        }
        Self::from_log_probs(Tensor::new(vec![n, k], log_probs)?)
    }

    pub fn from_log_probs(log_probs: Tensor) -> Result<Self> {
        let probs = log_probs.map(f64::exp);
        let grid = Self { probs, log_probs };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid from explicit probability rows; each row must sum to 1
    /// within `1e-10`.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let probs = Tensor::from_rows(rows)?;
        let log_probs = probs.map(f64::ln);
        let grid = Self { probs, log_probs };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        let (n, _) = self.probs.dims2()?;
        if n == 0 {
            return Err(shape("posterior grid has no frames"));
        }
        for i in 0..n {
            let row = self.probs.row(i);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(invalid(format!("frame {i} has a probability outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(invalid(format!("frame {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn prob(&self, frame: usize, class: usize) -> f64 {
        self.probs.at2(frame, class)
    }

    pub fn log_prob(&self, frame: usize, class: usize) -> f64 {
        self.log_probs.at2(frame, class)
    }

    /// Most probable class per frame; ties go to the lowest id.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.num_frames())
            .map(|i| argmax(self.probs.row(i)))
            .collect()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_give_stochastic_rows() {
        let logits = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let g = PosteriorGrid::from_logits(&logits).unwrap();
        for i in 0..2 {
            let s: f64 = g.probs().row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.argmax_path(), vec![2, 0]);
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        assert!(PosteriorGrid::from_probs(&[vec![0.5, 0.4]]).is_err());
        assert!(PosteriorGrid::from_probs(&[vec![1.5, -0.5]]).is_err());
        assert!(PosteriorGrid::from_probs(&[vec![0.5, 0.5]]).is_ok());
    }
}
