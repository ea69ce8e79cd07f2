//! CTC negative log-likelihood via the log-space forward/backward recursions.

use mddkit_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::grid::PosteriorGrid;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum frames needed to emit `targets`: one per label plus one blank
/// between each pair of identical neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &t in targets {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]`, emission at `t` included.
fn forward(lp: &[f64], k: usize, n: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut a = vec![f64::NEG_INFINITY; n * s_len];
    a[0] = lp[ext[0]];
    if s_len > 1 {
        a[1] = lp[ext[1]];
    }
    for t in 1..n {
        for s in 0..s_len {
            let mut v = a[(t - 1) * s_len + s];
            if s >= 1 {
                v = log_add(v, a[(t - 1) * s_len + s - 1]);
            }
            if can_skip(ext, s, blank) {
                v = log_add(v, a[(t - 1) * s_len + s - 2]);
            }
            a[t * s_len + s] = v + lp[t * k + ext[s]];
        }
    }
    a
}

/// Backward variables `beta[t][s]`, emission at `t` included.
fn backward(lp: &[f64], k: usize, n: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut b = vec![f64::NEG_INFINITY; n * s_len];
    let last = (n - 1) * s_len;
    b[last + s_len - 1] = lp[(n - 1) * k + ext[s_len - 1]];
    if s_len > 1 {
        b[last + s_len - 2] = lp[(n - 1) * k + ext[s_len - 2]];
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let mut v = b[(t + 1) * s_len + s];
            if s + 1 < s_len {
                v = log_add(v, b[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, blank) {
                v = log_add(v, b[(t + 1) * s_len + s + 2]);
            }
            b[t * s_len + s] = v + lp[t * k + ext[s]];
        }
    }
    b
}

fn total_log_prob(alpha: &[f64], n: usize, s_len: usize) -> f64 {
    let last = (n - 1) * s_len;
    let mut v = alpha[last + s_len - 1];
    if s_len > 1 {
        v = log_add(v, alpha[last + s_len - 2]);
    }
    v
}

fn validate(targets: &[usize], classes: usize, blank: usize) -> Result<()> {
    if blank >= classes {
        return Err(invalid(format!("blank id {blank} outside vocabulary of {classes}")));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= classes || t == blank) {
        return Err(invalid(format!("target id {t} is blank or outside the vocabulary")));
    }
    Ok(())
}

/// `-log p(targets | grid)`; `+inf` (with a warning) when the grid has too
/// few frames for the target sequence.
pub fn ctc_loss(grid: &PosteriorGrid, targets: &[usize], blank: usize) -> Result<f64> {
    let mut g = Graph::new();
    let lp = g.constant(grid.log_probs().clone());
    let loss = ctc_loss_node(&mut g, lp, targets, blank)?;
    Ok(g.value(loss).item())
}

#[derive(Debug)]
struct CtcOp {
    targets: Vec<usize>,
    blank: usize,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_nll"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let lp_t = inputs[0];
        let (n, k) = lp_t.dims2().expect("ctc input is a matrix");
        let lp = lp_t.data();
        let ext = extended(&self.targets, self.blank);
        let s_len = ext.len();
        let a = forward(lp, k, n, &ext, self.blank);
        let b = backward(lp, k, n, &ext, self.blank);
        let log_p = -output.item();
        let up = grad.item();
        let mut d = vec![0.0; n * k];
        for t in 0..n {
            for s in 0..s_len {
                let c = ext[s];
                let occ = a[t * s_len + s] + b[t * s_len + s] - lp[t * k + c] - log_p;
                if occ > f64::NEG_INFINITY {
                    d[t * k + c] -= up * occ.exp();
                }
            }
        }
        vec![Some(Tensor::new(vec![n, k], d).expect("ctc grad shape"))]
    }
}

/// CTC loss as a graph node over an `n x K` log-probability matrix.
pub fn ctc_loss_node(g: &mut Graph, log_probs: Var, targets: &[usize], blank: usize) -> Result<Var> {
    let (n, k) = g.value(log_probs).dims2()?;
    validate(targets, k, blank)?;
    if n == 0 || min_frames(targets) > n {
        log::warn!(
            "CTC infeasible: {} targets need {} frames, only {n} available",
            targets.len(),
            min_frames(targets)
        );
        return Ok(g.scalar(f64::INFINITY));
    }
    let ext = extended(targets, blank);
    let alpha = forward(g.value(log_probs).data(), k, n, &ext, blank);
    let nll = -total_log_prob(&alpha, n, ext.len());
    Ok(g.custom(
        &[log_probs],
        Tensor::scalar(nll),
        Box::new(CtcOp {
            targets: targets.to_vec(),
            blank,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frame_example() {
        // classes: 0 = a, 1 = blank
        let grid = PosteriorGrid::from_probs(&[vec![0.6, 0.4], vec![0.7, 0.3]]).unwrap();
        let loss = ctc_loss(&grid, &[0], 1).unwrap();
        assert!((loss + 0.88f64.ln()).abs() < 1e-12);
        assert!((loss - 0.12783).abs() < 1e-5);
    }

    #[test]
    fn single_forced_path() {
        let grid = PosteriorGrid::from_probs(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(ctc_loss(&grid, &[0], 1).unwrap(), 0.0);
    }

    #[test]
    fn infeasible_is_infinite() {
        let grid = PosteriorGrid::from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        // "a a" needs a blank in between: three frames
        assert_eq!(ctc_loss(&grid, &[0, 0], 1).unwrap(), f64::INFINITY);
        assert_eq!(min_frames(&[0, 0]), 3);
    }

    #[test]
    fn blank_target_rejected() {
        let grid = PosteriorGrid::from_probs(&[vec![0.5, 0.5]]).unwrap();
        assert!(ctc_loss(&grid, &[1], 1).is_err());
        assert!(ctc_loss(&grid, &[0], 2).is_err());
    }
}
