//! Best monotone segmentation of frames into labels, by enumeration.

/// Calls `f` with the length of every segment, for each composition of `n`
/// into `parts` positive parts.
fn compositions(n: usize, parts: usize, f: &mut dyn FnMut(&[usize])) {
    fn go(left: usize, parts: usize, acc: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if parts == 0 {
            if left == 0 {
                f(acc);
            }
            return;
        }
        for len in 1..=left.saturating_sub(parts - 1) {
            acc.push(len);
            go(left - len, parts - 1, acc, f);
            acc.pop();
        }
    }
    go(n, parts, &mut Vec::new(), f);
}

/// Max over segmentations of `sum_t log_probs[t][label(t)]`, every label
/// covering at least one frame, all frames used. `-inf` if impossible.
pub fn best(log_probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = log_probs.len();
    let mut best = f64::NEG_INFINITY;
    if labels.is_empty() || labels.len() > n {
        return best;
    }
    compositions(n, labels.len(), &mut |lens| {
        let mut t = 0;
        let mut score = 0.0;
        for (&len, &y) in lens.iter().zip(labels) {
            for _ in 0..len {
                score += log_probs[t][y];
                t += 1;
            }
        }
        best = best.max(score);
    });
    best
}

/// Like [`best`], but frames before the first and after the last label may
/// instead be `sil` (runs of length zero allowed). An empty label list
/// scores the all-silence path.
pub fn best_with_silence(log_probs: &[Vec<f64>], labels: &[usize], sil: usize) -> f64 {
    let n = log_probs.len();
    let sil_sum = |a: usize, b: usize| (a..b).map(|t| log_probs[t][sil]).sum::<f64>();
    if labels.is_empty() {
        return sil_sum(0, n);
    }
    let mut out = f64::NEG_INFINITY;
    for lead in 0..n {
        for tail in 0..(n - lead) {
            let inner = &log_probs[lead..n - tail];
            let s = best(inner, labels);
            if s > f64::NEG_INFINITY {
                out = out.max(sil_sum(0, lead) + s + sil_sum(n - tail, n));
            }
        }
    }
    out
}
