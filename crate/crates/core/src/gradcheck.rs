//! Finite-difference verification of the training objectives.
//!
//! Each check draws a small random instance, differentiates the graph form
//! of a loss by reverse mode and compares against central differences of
//! the plain (graph-free) implementation.

use mddkit_tensor::{central_difference, max_relative_error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::PosteriorGrid;
use crate::losses::consistency::{cr_loss, cr_loss_node};
use crate::losses::ctc::{ctc_loss, ctc_loss_node, min_frames};
use crate::losses::guided::{guided_attention_loss, guided_attention_node, DEFAULT_BANDWIDTH};
use crate::losses::heads::{error_head_losses, error_head_losses_node};
use crate::ot::{frame_weights, ottc_loss, ottc_loss_node, LabelWeights, OttcOptions};
use crate::tags::{ErrorTags, PositionTag, Realization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Alignment loss, gradient with respect to the posterior logits.
    OttcLogits,
    /// Alignment loss, gradient with respect to the frame scores.
    OttcScores,
    Ctc,
    Consistency,
    Position,
    Type,
    GuidedAttention,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::OttcLogits,
        LossKind::OttcScores,
        LossKind::Ctc,
        LossKind::Consistency,
        LossKind::Position,
        LossKind::Type,
        LossKind::GuidedAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::OttcLogits => "ottc-logits",
            LossKind::OttcScores => "ottc-scores",
            LossKind::Ctc => "ctc",
            LossKind::Consistency => "consistency",
            LossKind::Position => "position",
            LossKind::Type => "type",
            LossKind::GuidedAttention => "guided-attention",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random instances per loss.
    pub instances: usize,
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(invalid("gradcheck needs at least one instance"));
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(invalid("gradcheck step and tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub loss: LossKind,
    pub instances: usize,
    pub max_error: f64,
    /// Index of the instance with the largest error.
    pub worst: usize,
    pub passed: bool,
}

/// Analytic and numeric gradients for one instance.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradientPair {
    pub fn error(&self) -> f64 {
        max_relative_error(&self.analytic, &self.numeric)
    }
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().expect("matrix");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c).take(r) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn random_tags<R: Rng>(rng: &mut R, m: usize, k: usize) -> ErrorTags {
    let positions = (0..m)
        .map(|_| match rng.random_range(0..5) {
            0 => PositionTag {
                inserted_before: Vec::new(),
                core: Realization::Substituted(rng.random_range(0..k)),
            },
            1 => PositionTag {
                inserted_before: Vec::new(),
                core: Realization::Deleted,
            },
            2 => PositionTag {
                inserted_before: vec![rng.random_range(0..k)],
                core: Realization::Kept,
            },
            _ => PositionTag::correct(),
        })
        .collect();
    ErrorTags {
        positions,
        terminal: Vec::new(),
    }
}

fn random_targets<R: Rng>(rng: &mut R, m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

/// Draws one random instance of `kind` and returns both gradients.
pub fn check_instance<R: Rng>(kind: LossKind, rng: &mut R, step: f64) -> Result<GradientPair> {
    let mut g = Graph::new();
    match kind {
        LossKind::OttcLogits | LossKind::OttcScores => {
            let n = rng.random_range(2..=6);
            let k = rng.random_range(3..=5);
            let m = rng.random_range(1..=n.min(4));
            let targets = random_targets(rng, m, k);
            let beta = LabelWeights::uniform(m)?;
            let inputs = [uniform_tensor(rng, &[n, k], 2.0), uniform_tensor(rng, &[n], 1.5)];
            let logits = g.leaf(inputs[0].clone().with_grad());
            let scores = g.leaf(inputs[1].clone().with_grad());
            let lp = g.log_softmax(logits, 1)?;
            let terms = ottc_loss_node(&mut g, lp, scores, &targets, &beta, OttcOptions::default())?;
            let mut grads = g.backward(terms.loss)?;
            let which = usize::from(kind == LossKind::OttcScores);
            let var = [logits, scores][which];
            let analytic = grads.take(var).expect("leaf gradient");
            let numeric = central_difference(
                |t| {
                    let grid = PosteriorGrid::from_logits(&t[0]).expect("finite logits");
                    let alpha = frame_weights(t[1].data()).expect("finite scores");
                    ottc_loss(&grid, &targets, &alpha, &beta).expect("valid instance")
                },
                &inputs,
                which,
                step,
            );
            Ok(GradientPair { analytic, numeric })
        }
        LossKind::Ctc => {
            let k = rng.random_range(2..=4);
            let blank = k;
            let m = rng.random_range(1..=3);
            let targets = random_targets(rng, m, k);
            let lo = min_frames(&targets);
            let n = rng.random_range(lo..=lo.max(6));
            let inputs = [uniform_tensor(rng, &[n, k + 1], 2.0)];
            let logits = g.leaf(inputs[0].clone().with_grad());
            let lp = g.log_softmax(logits, 1)?;
            let loss = ctc_loss_node(&mut g, lp, &targets, blank)?;
            let analytic = g.backward(loss)?.take(logits).expect("leaf gradient");
            let numeric = central_difference(
                |t| {
                    let grid = PosteriorGrid::from_logits(&t[0]).expect("finite logits");
                    ctc_loss(&grid, &targets, blank).expect("valid instance")
                },
                &inputs,
                0,
                step,
            );
            Ok(GradientPair { analytic, numeric })
        }
        LossKind::Consistency => {
            let n = rng.random_range(1..=6);
            let k = rng.random_range(2..=5);
            let inputs = [uniform_tensor(rng, &[n, k], 2.0), uniform_tensor(rng, &[n, k], 2.0)];
            let a = g.leaf(inputs[0].clone().with_grad());
            let b = g.leaf(inputs[1].clone().with_grad());
            let la = g.log_softmax(a, 1)?;
            let lb = g.log_softmax(b, 1)?;
            let loss = cr_loss_node(&mut g, la, lb)?;
            let mut grads = g.backward(loss)?;
            let ga = grads.take(a).expect("leaf gradient");
            let gb = grads.take(b).expect("leaf gradient");
            let f = |t: &[Tensor]| {
                let pa = PosteriorGrid::from_logits(&t[0]).expect("finite logits");
                let pb = PosteriorGrid::from_logits(&t[1]).expect("finite logits");
                cr_loss(&pa, &pb).expect("equal shapes")
            };
            let na = central_difference(f, &inputs, 0, step);
            let nb = central_difference(f, &inputs, 1, step);
            let mut analytic = ga.data().to_vec();
            analytic.extend_from_slice(gb.data());
            let mut numeric = na.data().to_vec();
            numeric.extend_from_slice(nb.data());
            Ok(GradientPair {
                analytic: Tensor::vector(analytic),
                numeric: Tensor::vector(numeric),
            })
        }
        LossKind::Position | LossKind::Type => {
            let m = rng.random_range(1..=6);
            let tags = random_tags(rng, m, 8);
            let inputs = [uniform_tensor(rng, &[m], 3.0), uniform_tensor(rng, &[m, 4], 2.0)];
            let pos = g.leaf(inputs[0].clone().with_grad());
            let typ = g.leaf(inputs[1].clone().with_grad());
            let pp = g.sigmoid(pos);
            let tp = g.softmax(typ, 1)?;
            let (l_pos, l_type) = error_head_losses_node(&mut g, pp, tp, &tags)?;
            let (root, var, which) = if kind == LossKind::Position {
                (l_pos, pos, 0)
            } else {
                (l_type, typ, 1)
            };
            let analytic = g.backward(root)?.take(var).expect("leaf gradient");
            let numeric = central_difference(
                |t| {
                    let p: Vec<f64> = t[0].data().iter().map(|&v| sigmoid(v)).collect();
                    let (lp, lt) = error_head_losses(&p, &softmax_rows(&t[1]), &tags).expect("valid heads");
                    if which == 0 {
                        lp
                    } else {
                        lt
                    }
                },
                &inputs,
                which,
                step,
            );
            Ok(GradientPair { analytic, numeric })
        }
        LossKind::GuidedAttention => {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            let inputs = [uniform_tensor(rng, &[rows, cols], 2.0)];
            let logits = g.leaf(inputs[0].clone().with_grad());
            let attn = g.softmax(logits, 1)?;
            let loss = guided_attention_node(&mut g, attn, DEFAULT_BANDWIDTH)?;
            let analytic = g.backward(loss)?.take(logits).expect("leaf gradient");
            let numeric = central_difference(
                |t| guided_attention_loss(&softmax_rows(&t[0]), DEFAULT_BANDWIDTH).expect("valid map"),
                &inputs,
                0,
                step,
            );
            Ok(GradientPair { analytic, numeric })
        }
    }
}

fn kind_rng(kind: LossKind, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64);
    rng
}

/// Checks `cfg.instances` seeded instances of one loss. With `flip_sign`
/// the analytic gradient is negated first.
pub fn check_loss(kind: LossKind, cfg: &GradCheckConfig, seed: u64, flip_sign: bool) -> Result<CheckSummary> {
    cfg.validate()?;
    let mut rng = kind_rng(kind, seed);
    let mut max_error = 0.0_f64;
    let mut worst = 0;
    for i in 0..cfg.instances {
        let mut pair = check_instance(kind, &mut rng, cfg.step)?;
        if flip_sign {
            pair.analytic.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        let err = pair.error();
        if err > max_error || err.is_nan() {
            max_error = err;
            worst = i;
        }
    }
    Ok(CheckSummary {
        loss: kind,
        instances: cfg.instances,
        max_error,
        worst,
        passed: max_error <= cfg.tolerance,
    })
}

/// Runs every loss in [`LossKind::ALL`].
pub fn run_suite(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<CheckSummary>> {
    LossKind::ALL.iter().map(|&k| check_loss(k, cfg, seed, false)).collect()
}

/// Negative control: a sign-flipped gradient has to fail for every loss.
pub fn sign_flip_detected(cfg: &GradCheckConfig, seed: u64) -> Result<bool> {
    for kind in LossKind::ALL {
        if check_loss(kind, cfg, seed, true)?.passed {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = GradCheckConfig {
            instances: 5,
            ..Default::default()
        };
        for s in run_suite(&cfg, 3).unwrap() {
            assert!(s.passed, "{} error {}", s.loss, s.max_error);
        }
    }

    #[test]
    fn flipped_sign_is_caught() {
        let cfg = GradCheckConfig {
            instances: 3,
            ..Default::default()
        };
        assert!(sign_flip_detected(&cfg, 3).unwrap());
    }

    #[test]
    fn order_does_not_matter() {
        let cfg = GradCheckConfig {
            instances: 2,
            ..Default::default()
        };
        let a = run_suite(&cfg, 9).unwrap();
        for kind in LossKind::ALL.into_iter().rev() {
            let s = check_loss(kind, &cfg, 9, false).unwrap();
            assert_eq!(a.iter().find(|x| x.loss == kind).unwrap(), &s);
        }
    }
}
