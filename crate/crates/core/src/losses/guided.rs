//! Diagonal-prior penalty on fusion attention maps.

use mddkit_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};

pub const DEFAULT_BANDWIDTH: f64 = 0.2;

/// `W[t, n] = 1 - exp(-(t/T - n/N)^2 / (2 g^2))`, 0-based indices.
pub fn guided_weights(rows: usize, cols: usize, bandwidth: f64) -> Tensor {
    let mut w = Tensor::zeros(&[rows, cols]);
    let denom = 2.0 * bandwidth * bandwidth;
    for t in 0..rows {
        for n in 0..cols {
            let d = t as f64 / rows as f64 - n as f64 / cols as f64;
            w.data_mut()[t * cols + n] = 1.0 - (-d * d / denom).exp();
        }
    }
    w
}

fn check(attn: &Tensor, bandwidth: f64) -> Result<(usize, usize)> {
    let (t, n) = attn.dims2()?;
    if t == 0 || n == 0 {
        return Err(invalid("attention matrix is empty"));
    }
    if !(bandwidth > 0.0) {
        return Err(invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if let Some(v) = attn.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("attention weight {v} is negative")));
    }
    Ok((t, n))
}

/// Mean over all cells of `attn * W`.
pub fn guided_attention_loss(attn: &Tensor, bandwidth: f64) -> Result<f64> {
    let (t, n) = check(attn, bandwidth)?;
    let w = guided_weights(t, n, bandwidth);
    let total: f64 = attn.data().iter().zip(w.data()).map(|(a, w)| a * w).sum();
    Ok(total / (t * n) as f64)
}

pub fn guided_attention_node(g: &mut Graph, attn: Var, bandwidth: f64) -> Result<Var> {
    let (t, n) = check(g.value(attn), bandwidth)?;
    let w = g.constant(guided_weights(t, n, bandwidth));
    let prod = g.mul(attn, w)?;
    Ok(g.mean(prod)?)
}
