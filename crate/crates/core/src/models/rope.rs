//! Rotary position embedding.
//!
//! Pair `k` of a `D`-dim row at position `p` is rotated by
//! `p * base^(-2k/D)`. Positions are real so callers can rescale them.

use mddkit_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};

pub const ROPE_BASE: f64 = 10000.0;

fn tables(positions: &[f64], dim: usize) -> (Tensor, Tensor) {
    let n = positions.len();
    let mut cos = vec![0.0; n * dim];
    let mut sin = vec![0.0; n * dim];
    for (r, &p) in positions.iter().enumerate() {
        for k in 0..dim / 2 {
            let theta = p * ROPE_BASE.powf(-2.0 * k as f64 / dim as f64);
            let (s, c) = theta.sin_cos();
            cos[r * dim + 2 * k] = c;
            cos[r * dim + 2 * k + 1] = c;
            // rotated = x * cos + swap(x) * sin, swap(x0, x1) = (-x1, x0)
            sin[r * dim + 2 * k] = s;
            sin[r * dim + 2 * k + 1] = s;
        }
    }
    (
        Tensor::new(vec![n, dim], cos).expect("rope table"),
        Tensor::new(vec![n, dim], sin).expect("rope table"),
    )
}

/// `D x D` matrix `S` with `x S = swap(x)`.
fn swap_matrix(dim: usize) -> Tensor {
    let mut s = Tensor::zeros(&[dim, dim]);
    for k in 0..dim / 2 {
        // out[2k] = -x[2k+1]; out[2k+1] = x[2k]
        s.data_mut()[(2 * k + 1) * dim + 2 * k] = -1.0;
        s.data_mut()[2 * k * dim + 2 * k + 1] = 1.0;
    }
    s
}

fn check(rows: usize, dim: usize, positions: &[f64]) -> Result<()> {
    if dim % 2 != 0 {
        return Err(invalid(format!("rotary embedding needs an even dimension, got {dim}")));
    }
    if positions.len() != rows {
        return Err(invalid(format!("{} positions for {rows} rows", positions.len())));
    }
    Ok(())
}

/// Rotates the rows of an `n x D` matrix.
pub fn rope(x: &Tensor, positions: &[f64]) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    check(n, d, positions)?;
    let mut out = x.data().to_vec();
    for (r, &p) in positions.iter().enumerate() {
        for k in 0..d / 2 {
            let theta = p * ROPE_BASE.powf(-2.0 * k as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (x.data()[r * d + 2 * k], x.data()[r * d + 2 * k + 1]);
            out[r * d + 2 * k] = a * c - b * s;
            out[r * d + 2 * k + 1] = a * s + b * c;
        }
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

/// Graph form: `x * cos + (x S) * sin`.
pub fn rope_node(g: &mut Graph, x: Var, positions: &[f64]) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    check(n, d, positions)?;
    let (cos, sin) = tables(positions, d);
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let swap = g.constant(swap_matrix(d));
    let a = g.mul(x, cos)?;
    let xs = g.matmul(x, swap)?;
    let b = g.mul(xs, sin)?;
    Ok(g.add(a, b)?)
}

pub fn positions(n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7]]).unwrap();
        assert_eq!(rope(&x, &[0.0]).unwrap(), x);
    }

    #[test]
    fn node_matches_direct() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7], vec![1.0, 0.5, -0.5, 0.25]]).unwrap();
        let pos = [3.0, 7.5];
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = rope_node(&mut g, v, &pos).unwrap();
        let direct = rope(&x, &pos).unwrap();
        for (a, b) in g.value(r).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(rope(&Tensor::zeros(&[1, 3]), &[0.0]).is_err());
    }
}
