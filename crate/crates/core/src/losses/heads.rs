//! Position (binary) and type (four-way) losses for the teacher's error heads.

use mddkit_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, shape, Result};
use crate::losses::consistency::PROB_FLOOR;
use crate::tags::ErrorTags;

fn check(m: usize, pos_shape: &[usize], type_shape: &[usize], tags: &ErrorTags) -> Result<()> {
    if tags.len() != m || pos_shape != [m] || type_shape != [m, 4] {
        return Err(shape(format!(
            "heads {pos_shape:?}/{type_shape:?} do not match {} tagged positions",
            tags.len()
        )));
    }
    if m == 0 {
        return Err(invalid("error heads need at least one position"));
    }
    Ok(())
}

fn check_probs(name: &str, data: &[f64]) -> Result<()> {
    if let Some(p) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("{name} probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `(mean BCE of positions, mean CE of types)`, probabilities floored
/// before logs.
pub fn error_head_losses(pos_probs: &[f64], type_probs: &Tensor, tags: &ErrorTags) -> Result<(f64, f64)> {
    let m = pos_probs.len();
    check(m, &[m], type_probs.shape(), tags)?;
    check_probs("position", pos_probs)?;
    check_probs("type", type_probs.data())?;
    let flags = tags.position_flags();
    let l_pos = pos_probs
        .iter()
        .zip(&flags)
        .map(|(&p, &y)| {
            if y == 1 {
                -p.max(PROB_FLOOR).ln()
            } else {
                -(1.0 - p).max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>()
        / m as f64;
    let l_type = tags
        .types()
        .iter()
        .enumerate()
        .map(|(j, t)| -type_probs.at2(j, t.index()).max(PROB_FLOOR).ln())
        .sum::<f64>()
        / m as f64;
    Ok((l_pos, l_type))
}

/// Graph form over a length-`m` probability vector and an `m x 4`
/// probability matrix.
pub fn error_head_losses_node(
    g: &mut Graph,
    pos_probs: Var,
    type_probs: Var,
    tags: &ErrorTags,
) -> Result<(Var, Var)> {
    let pos_shape = g.shape(pos_probs).to_vec();
    let m = pos_shape.first().copied().unwrap_or(0);
    check(m, &pos_shape, g.shape(type_probs), tags)?;
    check_probs("position", g.value(pos_probs).data())?;
    check_probs("type", g.value(type_probs).data())?;

    let y: Vec<f64> = tags.position_flags().iter().map(|&f| f64::from(f)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = g.constant(Tensor::vector(y));
    let not_y = g.constant(Tensor::vector(not_y));
    let one = g.scalar(1.0);
    let log_p = g.floor_log(pos_probs, PROB_FLOOR);
    let neg_p = g.neg(pos_probs);
    let q = g.add(neg_p, one)?;
    let log_q = g.floor_log(q, PROB_FLOOR);
    let a = g.mul(log_p, y)?;
    let b = g.mul(log_q, not_y)?;
    let ab = g.add(a, b)?;
    let s = g.sum(ab);
    let l_pos = g.scale(s, -1.0 / m as f64);

    let mut mask = Tensor::zeros(&[m, 4]);
    for (j, t) in tags.types().iter().enumerate() {
        mask.data_mut()[j * 4 + t.index()] = 1.0;
    }
    let mask = g.constant(mask);
    let log_t = g.floor_log(type_probs, PROB_FLOOR);
    let picked = g.mul(log_t, mask)?;
    let s = g.sum(picked);
    let l_type = g.scale(s, -1.0 / m as f64);
    Ok((l_pos, l_type))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::{PositionTag, Realization};

    fn tags() -> ErrorTags {
        ErrorTags {
            positions: vec![
                PositionTag::correct(),
                PositionTag {
                    inserted_before: vec![],
                    core: Realization::Substituted(4),
                },
                PositionTag {
                    inserted_before: vec![],
                    core: Realization::Deleted,
                },
            ],
            terminal: vec![],
        }
    }

    #[test]
    fn perfect_predictions() {
        let t = tags();
        let types = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        let (p, c) = error_head_losses(&[0.0, 1.0, 1.0], &types, &t).unwrap();
        assert_eq!((p, c), (0.0, 0.0));
    }

    #[test]
    fn uninformative_predictions() {
        let t = tags();
        let (p, c) = error_head_losses(&[0.5; 3], &Tensor::full(&[3, 4], 0.25), &t).unwrap();
        assert!((p - 2f64.ln()).abs() < 1e-12);
        assert!((c - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let t = tags();
        assert!(error_head_losses(&[0.5, 1.2, 0.5], &Tensor::full(&[3, 4], 0.25), &t).is_err());
        assert!(error_head_losses(&[0.5; 2], &Tensor::full(&[2, 4], 0.25), &t).is_err());
    }

    #[test]
    fn node_agrees() {
        let t = tags();
        let pos = [0.2, 0.7, 0.9];
        let types = Tensor::from_rows(&[
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.2, 0.5, 0.2, 0.1],
            vec![0.1, 0.2, 0.6, 0.1],
        ])
        .unwrap();
        let (p, c) = error_head_losses(&pos, &types, &t).unwrap();
        let mut g = Graph::new();
        let pv = g.leaf(Tensor::vector(pos.to_vec()));
        let tv = g.leaf(types);
        let (pn, cn) = error_head_losses_node(&mut g, pv, tv, &t).unwrap();
        assert!((g.value(pn).item() - p).abs() < 1e-12);
        assert!((g.value(cn).item() - c).abs() < 1e-12);
    }
}
