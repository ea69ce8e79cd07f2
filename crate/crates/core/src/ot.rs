//! Monotone 1D optimal transport between frames and labels.
//!
//! With both supports sorted along time, the optimal coupling for any convex
//! function of the index gap is the cumulative-mass ("north-west corner")
//! construction: cell `(i, j)` receives the overlap of the `i`-th frame
//! interval `[A_{i-1}, A_i]` with the `j`-th label interval `[B_{j-1}, B_j]`.
//! The construction is piecewise linear in the frame weights, which lets the
//! alignment loss differentiate through the plan itself.

use mddkit_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, shape, Result};
use crate::grid::PosteriorGrid;

const SIMPLEX_TOL: f64 = 1e-8;

fn check_simplex(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(invalid(format!("{name} is empty")));
    }
    if let Some(v) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(invalid(format!("{name} has a negative or non-finite entry {v}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Frame weights `alpha`, one per acoustic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWeights(Vec<f64>);

impl FrameWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_simplex("frame weights", &alpha)?;
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Label weights `beta`, one per target token. Uniform unless overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights(Vec<f64>);

impl LabelWeights {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        check_simplex("label weights", &beta)?;
        Ok(Self(beta))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("label weights need at least one label"));
        }
        Ok(Self(vec![1.0 / m as f64; m]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of per-frame scores over time.
pub fn frame_weights(frame_scores: &[f64]) -> Result<FrameWeights> {
    if frame_scores.is_empty() {
        return Err(invalid("frame scores are empty"));
    }
    if frame_scores.iter().any(|v| !v.is_finite()) {
        return Err(invalid("frame scores must be finite"));
    }
    let max = frame_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = frame_scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(FrameWeights(exps.into_iter().map(|e| e / total).collect()))
}

/// A monotone coupling between `n` frames and `m` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    n: usize,
    m: usize,
    gamma: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl TransportPlan {
    pub fn num_frames(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.m + j]
    }

    /// Row-major `n x m` matrix.
    pub fn dense(&self) -> &[f64] {
        &self.gamma
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.m], self.gamma.clone()).expect("plan dims")
    }

    /// Cells with positive mass, ordered by frame then label.
    pub fn support(&self) -> &[(usize, usize)] {
        &self.support
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.gamma.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for r in self.gamma.chunks(self.m) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// `sum_ij gamma_ij * cost(i, j)`.
    pub fn cost(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        self.support
            .iter()
            .map(|&(i, j)| self.get(i, j) * cost(i, j))
            .sum()
    }
}

fn prefix_sums(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Overlap of frame interval `i` with label interval `j`, before clamping at 0.
fn overlap(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
    let a_prev = if i == 0 { 0.0 } else { a[i - 1] };
    let b_prev = if j == 0 { 0.0 } else { b[j - 1] };
    a[i].min(b[j]) - a_prev.max(b_prev)
}

fn build_plan(alpha: &[f64], beta: &[f64]) -> TransportPlan {
    let (n, m) = (alpha.len(), beta.len());
    let a = prefix_sums(alpha);
    let b = prefix_sums(beta);
    let mut gamma = vec![0.0; n * m];
    let mut support = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        let v = overlap(&a, &b, i, j);
        if v > 0.0 {
            gamma[i * m + j] = v;
            support.push((i, j));
        }
        if a[i] < b[j] {
            i += 1;
        } else if b[j] < a[i] {
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    TransportPlan {
        n,
        m,
        gamma,
        support,
    }
}

/// The optimal monotone coupling with marginals `alpha` and `beta`.
pub fn solve_coupling(alpha: &FrameWeights, beta: &LabelWeights) -> Result<TransportPlan> {
    check_simplex("frame weights", &alpha.0)?;
    check_simplex("label weights", &beta.0)?;
    Ok(build_plan(&alpha.0, &beta.0))
}

/// Transport cost of the monotone coupling under an explicit `n x m` cost grid.
pub fn sotd(alpha: &FrameWeights, beta: &LabelWeights, cost_grid: &Tensor) -> Result<f64> {
    let (n, m) = cost_grid.dims2()?;
    if n != alpha.len() || m != beta.len() {
        return Err(shape(format!(
            "cost grid is {n}x{m} but marginals are {}x{}",
            alpha.len(),
            beta.len()
        )));
    }
    let plan = solve_coupling(alpha, beta)?;
    Ok(plan.cost(|i, j| cost_grid.at2(i, j)))
}

fn check_targets(targets: &[usize], classes: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(invalid("target sequence is empty"));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= classes) {
        return Err(invalid(format!("target id {t} outside vocabulary of {classes}")));
    }
    Ok(())
}

/// `-sum_ij gamma_ij log p(y_j | x_i)` for a fixed grid and frame weights.
pub fn ottc_loss(
    grid: &PosteriorGrid,
    targets: &[usize],
    alpha: &FrameWeights,
    beta: &LabelWeights,
) -> Result<f64> {
    check_targets(targets, grid.num_classes())?;
    if alpha.len() != grid.num_frames() || beta.len() != targets.len() {
        return Err(shape(format!(
            "grid has {} frames and {} targets, weights are {}x{}",
            grid.num_frames(),
            targets.len(),
            alpha.len(),
            beta.len()
        )));
    }
    let plan = solve_coupling(alpha, beta)?;
    Ok(-plan.cost(|i, j| grid.log_prob(i, targets[j])))
}

/// Gradient rule of the cumulative-mass coupling with respect to `alpha`.
///
/// Each support cell is `min(A_i, B_j) - max(A_{i-1}, B_{j-1})`; ties in the
/// min/max take the left (frame-side) argument.
#[derive(Debug)]
struct CouplingOp {
    beta_prefix: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl CustomOp for CouplingOp {
    fn name(&self) -> &'static str {
        "monotone_coupling"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let alpha = inputs[0].data();
        let n = alpha.len();
        let m = self.beta_prefix.len();
        let a = prefix_sums(alpha);
        let b = &self.beta_prefix;
        let g = grad.data();
        let mut d_prefix = vec![0.0; n];
        for &(i, j) in &self.support {
            let gij = g[i * m + j];
            if a[i] <= b[j] {
                d_prefix[i] += gij;
            }
            if i > 0 {
                let b_prev = if j == 0 { 0.0 } else { b[j - 1] };
                if a[i - 1] >= b_prev {
                    d_prefix[i - 1] -= gij;
                }
            }
        }
        // alpha_k feeds every prefix A_i with i >= k.
        let mut d_alpha = vec![0.0; n];
        let mut acc = 0.0;
        for k in (0..n).rev() {
            acc += d_prefix[k];
            d_alpha[k] = acc;
        }
        vec![Some(Tensor::vector(d_alpha))]
    }
}

/// Records the coupling `gamma(alpha, beta)` as a graph node differentiable
/// in `alpha` (a length-`n` vector). Returns the node and the plan.
pub fn coupling_node(
    g: &mut Graph,
    alpha: Var,
    beta: &LabelWeights,
    detach: bool,
) -> Result<(Var, TransportPlan)> {
    let alpha_vals = g.value(alpha).data().to_vec();
    if g.shape(alpha).len() != 1 {
        return Err(shape("frame weights must be a vector"));
    }
    check_simplex("frame weights", &alpha_vals)?;
    let plan = build_plan(&alpha_vals, &beta.0);
    let value = plan.to_tensor();
    let node = if detach {
        g.constant(value)
    } else {
        g.custom(
            &[alpha],
            value,
            Box::new(CouplingOp {
                beta_prefix: prefix_sums(&beta.0),
                support: plan.support.clone(),
            }),
        )
    };
    Ok((node, plan))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OttcOptions {
    /// Treat the plan as a constant; only the posteriors receive gradient.
    pub detach_plan: bool,
}

/// Graph nodes produced by [`ottc_loss_node`].
#[derive(Debug, Clone)]
pub struct OttcTerms {
    pub loss: Var,
    pub alpha: Var,
    pub plan: TransportPlan,
}

/// Alignment loss on graph nodes: `log_probs` is `n x K`, `frame_scores`
/// has length `n`. Gradients reach both.
pub fn ottc_loss_node(
    g: &mut Graph,
    log_probs: Var,
    frame_scores: Var,
    targets: &[usize],
    beta: &LabelWeights,
    opts: OttcOptions,
) -> Result<OttcTerms> {
    let (n, k) = g.value(log_probs).dims2()?;
    check_targets(targets, k)?;
    if g.shape(frame_scores) != [n] {
        return Err(shape(format!(
            "frame scores {:?} do not match {n} frames",
            g.shape(frame_scores)
        )));
    }
    if beta.len() != targets.len() {
        return Err(shape("label weights and targets differ in length"));
    }
    let alpha = g.softmax(frame_scores, 0)?;
    let (gamma, plan) = coupling_node(g, alpha, beta, opts.detach_plan)?;
    let picked = g.gather_cols(log_probs, targets)?;
    let weighted = g.mul(gamma, picked)?;
    let total = g.sum(weighted);
    let loss = g.neg(total);
    Ok(OttcTerms { loss, alpha, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fw(v: &[f64]) -> FrameWeights {
        FrameWeights::new(v.to_vec()).unwrap()
    }

    fn lw(v: &[f64]) -> LabelWeights {
        LabelWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn frame_weights_examples() {
        let w = frame_weights(&[0.0, 0.0, 0.0]).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = frame_weights(&[2f64.ln(), 0.0]).unwrap();
        assert!((w.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(frame_weights(&[5.0]).unwrap().as_slice(), &[1.0]);
        assert!(frame_weights(&[]).is_err());
        assert!(frame_weights(&[f64::NAN]).is_err());
    }

    #[test]
    fn matched_marginals_give_diagonal() {
        let p = solve_coupling(&fw(&[0.5, 0.5]), &lw(&[0.5, 0.5])).unwrap();
        assert_eq!(p.dense(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(p.support(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn uneven_frames_example() {
        let p = solve_coupling(&fw(&[0.2, 0.3, 0.5]), &lw(&[0.5, 0.5])).unwrap();
        let expect = [0.2, 0.0, 0.3, 0.0, 0.0, 0.5];
        for (a, b) in p.dense().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell() {
        let p = solve_coupling(&fw(&[1.0]), &lw(&[1.0])).unwrap();
        assert_eq!(p.dense(), &[1.0]);
    }

    #[test]
    fn off_simplex_rejected() {
        assert!(FrameWeights::new(vec![0.5, 0.6]).is_err());
        assert!(LabelWeights::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn sotd_examples() {
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(sotd(&fw(&[0.2, 0.3, 0.5]), &lw(&[0.5, 0.5]), &zero).unwrap(), 0.0);
        let n = 4;
        let mut sq = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                sq.data_mut()[i * n + j] = ((i as f64) - (j as f64)).powi(2);
            }
        }
        let u = FrameWeights::uniform(n).unwrap();
        let v = LabelWeights::uniform(n).unwrap();
        assert_eq!(sotd(&u, &v, &sq).unwrap(), 0.0);
        assert!(sotd(&u, &v, &Tensor::zeros(&[n, n - 1])).is_err());
        assert!(sotd(&u, &v, &Tensor::zeros(&[0, n])).is_err());
    }

    #[test]
    fn ottc_hand_example() {
        let grid = PosteriorGrid::from_probs(&[vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap();
        let loss = ottc_loss(&grid, &[0, 1], &fw(&[0.5, 0.5]), &lw(&[0.5, 0.5])).unwrap();
        assert!((loss + 0.8f64.ln()).abs() < 1e-12);
        assert!((loss - 0.22314).abs() < 1e-5);
    }

    #[test]
    fn perfect_posterior_has_zero_loss() {
        let grid = PosteriorGrid::from_probs(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let loss = ottc_loss(&grid, &[0, 1], &fw(&[0.25, 0.25, 0.5]), &lw(&[0.5, 0.5])).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn target_outside_vocab_rejected() {
        let grid = PosteriorGrid::from_probs(&[vec![0.5, 0.5]]).unwrap();
        assert!(ottc_loss(&grid, &[2], &fw(&[1.0]), &lw(&[1.0])).is_err());
    }
}
