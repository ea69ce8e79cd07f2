//! CTC likelihood by summing over every frame labelling.

/// Merge repeats, then drop `blank`.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if prev != Some(c) && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// `-ln sum_{paths collapsing to targets} prod_t probs[t][path_t]`.
/// Visits `K^n` paths.
pub fn nll(probs: &[Vec<f64>], targets: &[usize], blank: usize) -> f64 {
    let n = probs.len();
    let k = probs.first().map_or(0, Vec::len);
    let mut path = vec![0usize; n];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == targets {
            total += path.iter().enumerate().map(|(t, &c)| probs[t][c]).product::<f64>();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == n {
                return -total.ln();
            }
            path[t] += 1;
            if path[t] < k {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frames_one_label() {
        // a-, -a, aa
        let p = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let want = 0.6 * 0.7 + 0.4 * 0.3 + 0.4 * 0.7;
        assert!((nll(&p, &[1], 0) + f64::ln(want)).abs() < 1e-15);
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
    }
}
