//! Quality indicators, reference fronts and the rank-sum test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{binomial, mean, normal_cdf, variance, RngStream};
use crate::tasks::{canonical_dtlz, eval_dtlz, Family};

/// Points on a true Pareto front, mutually nondominated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub points: Vec<Vec<f64>>,
}

/// Mean over reference points of the dominance-truncated distance to the
/// nearest archive point.
pub fn igd_plus(reference: &ReferenceSet, archive: &[Vec<f64>]) -> Result<f64> {
    if reference.points.is_empty() {
        return Err(Error::EmptySet("reference set"));
    }
    if archive.is_empty() {
        return Err(Error::EmptySet("archive objectives"));
    }
    let m = reference.points[0].len();
    if let Some(bad) = archive.iter().chain(&reference.points).find(|p| p.len() != m) {
        return Err(Error::DimensionError {
            expected: m,
            got: bad.len(),
        });
    }
    let total: f64 = reference
        .points
        .iter()
        .map(|z| {
            archive
                .iter()
                .map(|a| {
                    a.iter()
                        .zip(z)
                        .map(|(ai, zi)| (ai - zi).max(0.0).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / reference.points.len() as f64)
}

/// `a` weakly better everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strict |= x < y;
    }
    strict
}

/// Indices of the nondominated points. Sweeps in `O(n log n)` for two and
/// three objectives and falls back to pairwise checks otherwise.
pub fn nondominated(points: &[Vec<f64>]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let m = points[0].len();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // exact duplicates would otherwise survive together
    order.dedup_by(|a, b| points[*a] == points[*b]);
    let mut keep = Vec::new();
    match m {
        2 => {
            let mut best = f64::INFINITY;
            for i in order {
                if points[i][1] < best {
                    best = points[i][1];
                    keep.push(i);
                }
            }
        }
        3 => {
            // staircase over (f2, f3): keys f2 ascending, values f3 strictly descending
            let mut stair: BTreeMap<OrdF64, f64> = BTreeMap::new();
            for i in order {
                let (f2, f3) = (points[i][1], points[i][2]);
                let covered = stair.range(..=OrdF64(f2)).next_back().is_some_and(|(_, &v)| v <= f3);
                if covered {
                    continue;
                }
                keep.push(i);
                let doomed: Vec<OrdF64> = stair
                    .range(OrdF64(f2)..)
                    .take_while(|(_, &v)| v >= f3)
                    .map(|(k, _)| *k)
                    .collect();
                for k in doomed {
                    stair.remove(&k);
                }
                stair.insert(OrdF64(f2), f3);
            }
        }
        _ => {
            for &i in &order {
                if !order.iter().any(|&j| j != i && dominates(&points[j], &points[i])) {
                    keep.push(i);
                }
            }
        }
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Side length of the DTLZ7 sampling grid per `y` coordinate, so that the
/// grid holds roughly 10⁵ points.
fn dtlz7_grid_side(m: usize) -> usize {
    let dims = (m - 1) as f64;
    (1e5f64.powf(1.0 / dims).round() as usize).max(2)
}

/// Reference points on the front of a canonical DTLZ problem.
pub fn pf_reference(family: Family, m: usize, n_points: usize, rng: &mut RngStream) -> Result<ReferenceSet> {
    if m < 2 || n_points == 0 {
        return Err(Error::Config(format!("reference front needs m >= 2 and points > 0, got m = {m}")));
    }
    let points = match family {
        Family::Dtlz1 => (0..n_points)
            .map(|_| {
                let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.uniform()).ln()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| 0.5 * v / s).collect()
            })
            .collect(),
        Family::Dtlz2 | Family::Dtlz3 | Family::Dtlz4 => (0..n_points)
            .map(|_| {
                let e: Vec<f64> = (0..m).map(|_| rng.standard_normal().abs()).collect();
                let s = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                e.iter().map(|v| v / s).collect()
            })
            .collect(),
        Family::Dtlz5 | Family::Dtlz6 => {
            // g = 0 pins every angle but the first at π/4
            let spec = canonical_dtlz(Family::Dtlz5, m, m)?;
            (0..n_points)
                .map(|i| {
                    let t = if n_points == 1 { 0.5 } else { i as f64 / (n_points - 1) as f64 };
                    let mut x = vec![0.5; m];
                    x[0] = t;
                    eval_dtlz(&spec, &x).map(|e| e.objectives)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Family::Dtlz7 => {
            let spec = canonical_dtlz(Family::Dtlz7, m, m)?;
            let side = dtlz7_grid_side(m);
            let total = side.pow((m - 1) as u32);
            let mut cands = Vec::with_capacity(total);
            for idx in 0..total {
                let mut x = vec![0.0; m];
                let mut r = idx;
                for v in x.iter_mut().take(m - 1) {
                    *v = (r % side) as f64 / (side - 1) as f64;
                    r /= side;
                }
                cands.push(eval_dtlz(&spec, &x)?.objectives);
            }
            let mut front: Vec<Vec<f64>> = nondominated(&cands).into_iter().map(|i| cands[i].clone()).collect();
            if front.len() > n_points {
                rng.shuffle(&mut front);
                front.truncate(n_points);
            }
            front
        }
        other => return Err(Error::UnsupportedFamily(other.name().into())),
    };
    Ok(ReferenceSet { points })
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// MSE divided by the population variance of the truth.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let v = variance(truth);
    if v <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(mse(pred, truth)? / v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Rank sum of the first sample (midranks for ties).
    pub statistic: f64,
    pub p_value: f64,
}

/// Midranks (1-based) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon rank-sum test. Exact over all rank assignments when
/// the pooled size is at most 12, otherwise the tie-corrected normal
/// approximation with continuity correction.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSum> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 3 || n2 < 3 {
        return Err(Error::TooFewSamples(n1, n2));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let w: f64 = ranks[..n1].iter().sum();
    let n = n1 + n2;
    let expected = n1 as f64 * (n as f64 + 1.0) / 2.0;
    let dev = (w - expected).abs();
    let p = if n <= 12 {
        // enumerate every subset of size n1; ties keep their midranks
        let total = binomial(n, n1);
        let mut extreme = 0usize;
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            if (s - expected).abs() >= dev - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / total as f64
    } else {
        let (f1, f2, fn_) = (n1 as f64, n2 as f64, n as f64);
        let mut ties = 0.0;
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
        let var = f1 * f2 / 12.0 * ((fn_ + 1.0) - ties / (fn_ * (fn_ - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = ((dev - 0.5).max(0.0)) / var.sqrt();
            2.0 * (1.0 - normal_cdf(z))
        }
    };
    Ok(RankSum {
        statistic: w,
        p_value: p.min(1.0),
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (m, (ss / (xs.len() - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_igd(r: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for z in r {
            let mut best = f64::INFINITY;
            for p in a {
                let mut s = 0.0;
                for k in 0..z.len() {
                    let e = if p[k] > z[k] { p[k] - z[k] } else { 0.0 };
                    s += e * e;
                }
                if s.sqrt() < best {
                    best = s.sqrt();
                }
            }
            total += best;
        }
        total / r.len() as f64
    }

    #[test]
    fn igd_examples() {
        let r = ReferenceSet { points: vec![vec![0.0, 0.0]] };
        assert!((igd_plus(&r, &[vec![1.0, 1.0]]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(igd_plus(&r, &[vec![-1.0, 1.0]]).unwrap(), 1.0);
        assert!(matches!(igd_plus(&r, &[]), Err(Error::EmptySet(_))));
    }

    proptest! {
        #[test]
        fn igd_matches_brute_force(seed in 0u64..1000, nr in 1usize..60, na in 1usize..60) {
            let mut rng = RngStream::new(seed, 0);
            let r: Vec<Vec<f64>> = (0..nr).map(|_| (0..3).map(|_| rng.uniform()).collect()).collect();
            let a: Vec<Vec<f64>> = (0..na).map(|_| (0..3).map(|_| rng.uniform_in(-0.5, 1.5)).collect()).collect();
            let v = igd_plus(&ReferenceSet { points: r.clone() }, &a).unwrap();
            prop_assert!((v - brute_igd(&r, &a)).abs() < 1e-12);
            // translation invariance and no harm from a dominated extra point
            let shift = |s: &Vec<Vec<f64>>| s.iter().map(|p| p.iter().map(|v| v + 3.0).collect()).collect::<Vec<Vec<f64>>>();
            let t = igd_plus(&ReferenceSet { points: shift(&r) }, &shift(&a)).unwrap();
            prop_assert!((t - v).abs() < 1e-9);
            let mut a2 = a.clone();
            a2.push(a[0].iter().map(|v| v + 0.1).collect());
            let with_extra = igd_plus(&ReferenceSet { points: r }, &a2).unwrap();
            prop_assert!(with_extra <= v + 1e-15);
        }

        #[test]
        fn sweep_matches_pairwise(seed in 0u64..500, n in 1usize..120, m in 2usize..4) {
            let mut rng = RngStream::new(seed, 1);
            // coarse values force ties and duplicates
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| (rng.uniform() * 6.0).floor()).collect()).collect();
            let fast = nondominated(&pts);
            for i in 0..n {
                let dominated = pts.iter().any(|q| dominates(q, &pts[i]));
                let kept_equal = fast.iter().any(|&k| pts[k] == pts[i]);
                prop_assert_eq!(!dominated, kept_equal);
            }
            for (x, &i) in fast.iter().enumerate() {
                for &j in &fast[x + 1..] {
                    prop_assert!(pts[i] != pts[j]);
                }
            }
        }
    }

    #[test]
    fn reference_fronts() {
        let mut rng = RngStream::new(1, 0);
        let r = pf_reference(Family::Dtlz2, 3, 500, &mut rng).unwrap();
        assert!(r.points.iter().all(|p| (p.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10));
        let r = pf_reference(Family::Dtlz1, 3, 500, &mut rng).unwrap();
        assert!(r.points.iter().all(|p| (p.iter().sum::<f64>() - 0.5).abs() < 1e-10));
        for fam in [Family::Dtlz5, Family::Dtlz7] {
            let r = pf_reference(fam, 3, 300, &mut rng).unwrap();
            assert_eq!(nondominated(&r.points).len(), r.points.len());
            assert!(r.points.len() <= 300);
        }
        assert!(matches!(
            pf_reference(Family::Sinusoid, 3, 10, &mut rng),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn regression_errors() {
        let t = [1.0, 2.0, 3.0, 6.0];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert!((nmse(&[3.0; 4], &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mse(&[2.0, 3.0, 4.0, 7.0], &t).unwrap(), 1.0);
        assert!(matches!(mse(&[1.0], &t), Err(Error::LengthMismatch(1, 4))));
        assert!(matches!(nmse(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn rank_sum_examples() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 6.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let same = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert!((wilcoxon_rank_sum(&same, &same).unwrap().p_value - 1.0).abs() < 1e-9);
        let mut rng = RngStream::new(3, 0);
        let a: Vec<f64> = (0..30).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.standard_normal() + 3.0).collect();
        assert!(wilcoxon_rank_sum(&a, &b).unwrap().p_value < 1e-3);
        assert!(matches!(wilcoxon_rank_sum(&[1.0, 2.0], &b), Err(Error::TooFewSamples(2, 30))));
    }

    #[test]
    fn summary_of_one_run() {
        assert_eq!(mean_std(&[2.5]), (2.5, 0.0));
    }
}
