//! Teacher-forced next-token cross-entropy for the phoneme decoder.

use mddkit_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, shape, Result};

fn gold_sequence(targets: &[usize], eos: usize, rows: usize, classes: usize) -> Result<Vec<usize>> {
    if rows != targets.len() + 1 {
        return Err(shape(format!(
            "{rows} decoder rows for {} targets (expected targets + 1 for <eos>)",
            targets.len()
        )));
    }
    let gold: Vec<usize> = targets.iter().copied().chain([eos]).collect();
    if let Some(t) = gold.iter().find(|&&t| t >= classes) {
        return Err(invalid(format!("target id {t} outside vocabulary of {classes}")));
    }
    Ok(gold)
}

/// Mean over `targets ++ [eos]` of `-log softmax(logits[j])[gold_j]`.
/// `logits` has one row per decoder input (`<bos>` plus each target).
pub fn lm_loss(logits: &Tensor, targets: &[usize], eos: usize) -> Result<f64> {
    let (rows, k) = logits.dims2()?;
    let gold = gold_sequence(targets, eos, rows, k)?;
    let mut total = 0.0;
    for (j, &y) in gold.iter().enumerate() {
        let row = logits.row(j);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / gold.len() as f64)
}

pub fn lm_loss_node(g: &mut Graph, logits: Var, targets: &[usize], eos: usize) -> Result<Var> {
    let (rows, k) = g.value(logits).dims2()?;
    let gold = gold_sequence(targets, eos, rows, k)?;
    let mut mask = Tensor::zeros(&[rows, k]);
    for (j, &y) in gold.iter().enumerate() {
        mask.data_mut()[j * k + y] = 1.0;
    }
    let lp = g.log_softmax(logits, 1)?;
    let mask = g.constant(mask);
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::zeros(&[3, 4]);
        let v = lm_loss(&logits, &[0, 1], 3).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut t = Tensor::zeros(&[2, 3]);
            t.data_mut()[1] = margin;
            t.data_mut()[3 + 2] = margin;
            let v = lm_loss(&t, &[1], 2).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(lm_loss(&Tensor::zeros(&[2, 4]), &[0, 1], 3).is_err());
    }

    #[test]
    fn node_agrees() {
        let logits = Tensor::from_rows(&[vec![0.2, -1.0, 0.5], vec![1.5, 0.1, -0.3]]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(logits.clone());
        let l = lm_loss_node(&mut g, x, &[0], 2).unwrap();
        assert!((g.value(l).item() - lm_loss(&logits, &[0], 2).unwrap()).abs() < 1e-12);
    }
}
