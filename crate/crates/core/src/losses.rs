//! Information-theoretic primitives, in both plain-f64 form and as graph
//! builders on probability rows.
//!
//! Natural logarithms everywhere. Zero probabilities contribute zero to the
//! entropy sum; logs are floored at 1e-12 so gradients never see -inf.

use gta_autodiff::Tx;

pub const LOG_FLOOR: f64 = 1e-12;

/// Shannon entropy of a distribution, in nats. `entropy` of a uniform
/// K-way distribution is ln K.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v > 0.0 { v * v.max(LOG_FLOOR).ln() } else { 0.0 }).sum::<f64>()
}

/// Cross entropy -sum y ln p against a one-hot (or soft) target.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len());
    -p.iter().zip(y).map(|(&pv, &yv)| if yv > 0.0 { yv * pv.max(LOG_FLOOR).ln() } else { 0.0 }).sum::<f64>()
}

/// KL(p || q) in nats; q is floored so the value stays finite.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            if pv > 0.0 {
                pv * (pv.max(LOG_FLOOR).ln() - qv.max(LOG_FLOOR).ln())
            } else {
                0.0
            }
        })
        .sum()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over rows of -sum_k p ln p, recorded on the tape.
pub fn graph_entropy_mean<'a>(probs: Tx<'a>) -> Tx<'a> {
    let n = probs.shape()[0] as f64;
    let ent = -(probs * probs.max_scalar(LOG_FLOOR).ln()).sum_all();
    ent.scale(1.0 / n)
}

/// Mean over rows of -sum_k y ln p; `targets` should be a constant leaf.
pub fn graph_cross_entropy_mean<'a>(probs: Tx<'a>, targets: Tx<'a>) -> Tx<'a> {
    let n = probs.shape()[0] as f64;
    let ce = -(targets * probs.max_scalar(LOG_FLOOR).ln()).sum_all();
    ce.scale(1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_entropy_is_ln_k() {
        let p = vec![1.0 / 1000.0; 1000];
        assert!((entropy(&p) - 1000.0_f64.ln()).abs() < 1e-12);
        let p2 = vec![0.5, 0.5];
        assert!((entropy(&p2) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_contributes_nothing() {
        assert!((entropy(&[1.0, 0.0, 0.0]) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        let p = [0.75, 0.25];
        let q = [0.5, 0.5];
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_divergence(&p, &q) - expect).abs() < 1e-12);
        assert!((expect - 0.1308).abs() < 5e-4);
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
        // one-hot against uniform over K gives ln K
        let onehot = [1.0, 0.0, 0.0, 0.0];
        let uniform = [0.25; 4];
        assert!((kl_divergence(&onehot, &uniform) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot() {
        let p = [0.1, 0.6, 0.3];
        let y = [0.0, 1.0, 0.0];
        assert!((cross_entropy(&p, &y) + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
