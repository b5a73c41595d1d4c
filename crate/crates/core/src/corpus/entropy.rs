//! Exact next-token entropy analytics for [`SyntheticSpec`] chains.

use super::SyntheticSpec;
use crate::error::{Error, Result};

/// How per-source state distributions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StationaryMode {
    /// Stationary distribution; a chain without a unique one is an error.
    #[default]
    Exact,
    /// Use the stationary distribution where it is unique, otherwise the
    /// expected state occupancy over one document of length `L`.
    OccupancyFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyGap {
    /// Next-token entropy of the source-agnostic bigram mixture predictor.
    pub h_mixture: f64,
    /// Next-token entropy when the source is known.
    pub h_conditional: f64,
    pub gap: f64,
    /// Sources whose state distribution came from the occupancy fallback.
    pub fallback_sources: Vec<usize>,
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Number of closed communicating classes of the chain with row-major
/// transition matrix `t`.
fn closed_classes(t: &[f64], v: usize) -> usize {
    let mut reach = vec![false; v * v];
    for s in 0..v {
        let mut stack = vec![s];
        reach[s * v + s] = true;
        while let Some(x) = stack.pop() {
            for y in 0..v {
                if t[x * v + y] > 0.0 && !reach[s * v + y] {
                    reach[s * v + y] = true;
                    stack.push(y);
                }
            }
        }
    }
    // A state is in a closed class iff everything it reaches reaches it back;
    // count classes by their smallest member.
    (0..v)
        .filter(|&s| {
            let closed = (0..v).all(|y| !reach[s * v + y] || reach[y * v + s]);
            closed && (0..s).all(|r| !(reach[s * v + r] && reach[r * v + s]))
        })
        .count()
}

/// Solves `π T = π`, `Σ π = 1` by Gaussian elimination with partial pivoting.
fn stationary(t: &[f64], v: usize) -> Option<Vec<f64>> {
    if closed_classes(t, v) != 1 {
        return None;
    }
    // Row i of the system: Σ_s π_s (T[s][i] - δ_si) = 0; last row replaced by Σ π = 1.
    let n = v;
    let mut a = vec![0.0; n * (n + 1)];
    for i in 0..n {
        for s in 0..n {
            a[i * (n + 1) + s] = t[s * v + i] - if s == i { 1.0 } else { 0.0 };
        }
    }
    for s in 0..n {
        a[(n - 1) * (n + 1) + s] = 1.0;
    }
    a[(n - 1) * (n + 1) + n] = 1.0;
    let w = n + 1;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))?;
        if a[piv * w + col].abs() < 1e-300 {
            return None;
        }
        for j in 0..w {
            a.swap(col * w + j, piv * w + j);
        }
        for r in 0..n {
            if r != col {
                let f = a[r * w + col] / a[col * w + col];
                if f != 0.0 {
                    for j in col..w {
                        a[r * w + j] -= f * a[col * w + j];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| (a[i * w + n] / a[i * w + i]).max(0.0)).collect())
}

/// Mean state distribution over the `L - 1` predicting positions of a
/// document (the initial distribution when `L = 1`).
fn occupancy(spec: &SyntheticSpec, k: usize) -> Vec<f64> {
    let v = spec.vocab_size;
    let steps = spec.doc_len.saturating_sub(1).max(1);
    let mut cur = spec.initial[k].clone();
    let mut acc = vec![0.0; v];
    for step in 0..steps {
        acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += c);
        if step + 1 < steps {
            let mut next = vec![0.0; v];
            for s in 0..v {
                if cur[s] > 0.0 {
                    for (n, t) in next.iter_mut().zip(spec.transition_row(k, s)) {
                        *n += cur[s] * t;
                    }
                }
            }
            cur = next;
        }
    }
    acc.iter_mut().for_each(|a| *a /= steps as f64);
    acc
}

/// `H_mixture − H_conditional` under a uniform source mixture, where the
/// mixture predictor weights source `k` at state `x` by `π_k(x)`.
pub fn analytic_entropy_gap(spec: &SyntheticSpec, mode: StationaryMode) -> Result<EntropyGap> {
    spec.validate()?;
    let (kn, v) = (spec.num_sources(), spec.vocab_size);
    let mut pis = Vec::with_capacity(kn);
    let mut fallback_sources = Vec::new();
    for k in 0..kn {
        match (stationary(&spec.transitions[k], v), mode) {
            (Some(pi), _) => pis.push(pi),
            (None, StationaryMode::OccupancyFallback) => {
                fallback_sources.push(k);
                pis.push(occupancy(spec, k));
            }
            (None, StationaryMode::Exact) => {
                return Err(Error::Data(format!(
                    "source {k}: chain has no unique stationary distribution"
                )))
            }
        }
    }
    let inv_k = 1.0 / kn as f64;
    let mut h_cond = 0.0;
    for k in 0..kn {
        for s in 0..v {
            if pis[k][s] > 0.0 {
                h_cond += inv_k * pis[k][s] * entropy(spec.transition_row(k, s));
            }
        }
    }
    let mut h_mix = 0.0;
    let mut row = vec![0.0; v];
    for x in 0..v {
        let mass: f64 = pis.iter().map(|p| p[x]).sum();
        if mass <= 0.0 {
            continue;
        }
        row.iter_mut().for_each(|r| *r = 0.0);
        for k in 0..kn {
            let w = pis[k][x] / mass;
            if w > 0.0 {
                for (r, t) in row.iter_mut().zip(spec.transition_row(k, x)) {
                    *r += w * t;
                }
            }
        }
        h_mix += inv_k * mass * entropy(&row);
    }
    let mut gap = h_mix - h_cond;
    if gap < 0.0 && gap > -1e-12 {
        gap = 0.0;
    }
    Ok(EntropyGap {
        h_mixture: h_mix,
        h_conditional: h_cond,
        gap,
        fallback_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(rows: [[f64; 2]; 2]) -> Vec<f64> {
        rows.concat()
    }

    fn spec(ts: Vec<Vec<f64>>, v: usize) -> SyntheticSpec {
        let k = ts.len();
        SyntheticSpec {
            vocab_size: v,
            transitions: ts,
            initial: vec![vec![1.0 / v as f64; v]; k],
            doc_len: 8,
            docs_per_source: 1,
            heldout_per_source: 0,
            source_names: (0..k).map(|i| format!("s{i}")).collect(),
        }
    }

    #[test]
    fn mirrored_two_state_chains() {
        let s = spec(
            vec![
                two_state([[0.9, 0.1], [0.1, 0.9]]),
                two_state([[0.1, 0.9], [0.9, 0.1]]),
            ],
            2,
        );
        let g = analytic_entropy_gap(&s, StationaryMode::Exact).unwrap();
        // Both stationary distributions are uniform, so the mixture row is
        // [0.5, 0.5] and the conditional rows are {0.9, 0.1}.
        let h91 = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((g.h_mixture - 2f64.ln()).abs() < 1e-12);
        assert!((g.h_conditional - h91).abs() < 1e-12);
        assert!((g.gap - 0.368064).abs() < 1e-6, "{}", g.gap);
    }

    #[test]
    fn identical_chains_have_zero_gap() {
        let base = SyntheticSpec::shared(1, 6, 10, 1, 0.5, 3);
        let s = spec(vec![base.transitions[0].clone(); 3], 6);
        let g = analytic_entropy_gap(&s, StationaryMode::Exact).unwrap();
        assert!(g.gap.abs() < 1e-12);
    }

    #[test]
    fn disjoint_chains_have_zero_gap() {
        let s = SyntheticSpec::disjoint(3, 4, 10, 1, 0.5, 11);
        let g = analytic_entropy_gap(&s, StationaryMode::Exact).unwrap();
        assert!(g.gap.abs() < 1e-12, "{}", g.gap);
    }

    #[test]
    fn stationary_solves_balance_equations() {
        let s = SyntheticSpec::shared(1, 7, 10, 1, 0.3, 5);
        let pi = stationary(&s.transitions[0], 7).unwrap();
        for i in 0..7 {
            let lhs: f64 = (0..7).map(|x| pi[x] * s.transitions[0][x * 7 + i]).sum();
            assert!((lhs - pi[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_chain_errors_unless_fallback() {
        // Two absorbing states: two closed classes.
        let s = spec(vec![two_state([[1.0, 0.0], [0.0, 1.0]])], 2);
        assert!(analytic_entropy_gap(&s, StationaryMode::Exact).is_err());
        let g = analytic_entropy_gap(&s, StationaryMode::OccupancyFallback).unwrap();
        assert_eq!(g.fallback_sources, vec![0]);
        assert_eq!(g.gap, 0.0);
    }

    #[test]
    fn transient_states_still_have_unique_stationary() {
        let s = spec(vec![two_state([[0.5, 0.5], [0.0, 1.0]])], 2);
        let pi = stationary(&s.transitions[0], 2).unwrap();
        assert!((pi[1] - 1.0).abs() < 1e-12 && pi[0].abs() < 1e-12);
    }
}
