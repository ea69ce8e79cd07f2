//! Edit distance by plain recursion over the three last-symbol choices.

use std::collections::BTreeSet;

/// Every `(substitutions, deletions, insertions)` triple reachable by an
/// optimal alignment, with the optimal distance.
pub fn optimal_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> (usize, BTreeSet<(usize, usize, usize)>) {
    let all = all_counts(reference, hyp);
    let best = all.iter().map(|(s, d, i)| s + d + i).min().unwrap_or(0);
    let opt = all.into_iter().filter(|(s, d, i)| s + d + i == best).collect();
    (best, opt)
}

/// Counts of every alignment, optimal or not. Exponential.
fn all_counts<T: PartialEq>(r: &[T], h: &[T]) -> BTreeSet<(usize, usize, usize)> {
    let mut out = BTreeSet::new();
    match (r.split_last(), h.split_last()) {
        (None, None) => {
            out.insert((0, 0, 0));
        }
        (Some(_), None) => {
            out.insert((0, r.len(), 0));
        }
        (None, Some(_)) => {
            out.insert((0, 0, h.len()));
        }
        (Some((a, r_rest)), Some((b, h_rest))) => {
            let sub = usize::from(a != b);
            for (s, d, i) in all_counts(r_rest, h_rest) {
                out.insert((s + sub, d, i));
            }
            for (s, d, i) in all_counts(r_rest, h) {
                out.insert((s, d + 1, i));
            }
            for (s, d, i) in all_counts(r, h_rest) {
                out.insert((s, d, i + 1));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitten_sitting() {
        let (d, opt) = optimal_counts(&b"kitten"[..], &b"sitting"[..]);
        assert_eq!(d, 3);
        assert!(opt.contains(&(2, 0, 1)));
    }
}
