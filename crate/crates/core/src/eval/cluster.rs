//! Seeded k-means and the NMI / adjusted Rand agreement scores.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 5, restarts: 10, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Mat,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(x: &Mat) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn plus_plus_seeds(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![pts[rng.gen_range(0..pts.len())].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            d2.iter().position(|&w| {
                u -= w;
                u < 0.0
            })
            .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.gen_range(0..pts.len())
        };
        centers.push(pts[pick].clone());
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(pts: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        pts.iter()
            .map(|p| {
                centers
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |best, (c, ctr)| {
                        let d = sq_dist(p, ctr);
                        if d < best.1 {
                            (c, d)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..max_iter {
        let d = pts[0].len();
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, &n)) in sums.into_iter().zip(&counts).enumerate() {
            if n > 0 {
                centers[c] = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = pts.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, centers, inertia)
}

/// Lloyd iterations from k-means++ seeds; the restart with the lowest
/// inertia wins, earlier restarts winning ties.
pub fn kmeans(x: &Mat, cfg: &KMeansConfig, seed: u64) -> Result<KMeans> {
    if cfg.k == 0 || x.nrows() < cfg.k {
        return Err(Error::Eval(format!("k-means with k={} needs at least k points, got {}", cfg.k, x.nrows())));
    }
    let pts = rows(x);
    let runs: Vec<_> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let seeds = plus_plus_seeds(&pts, cfg.k, &mut rng);
            lloyd(&pts, seeds, cfg.max_iter)
        })
        .collect();
    let (labels, centers, inertia) = runs.into_iter().fold(None, |best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)>, run| match best {
        Some(b) if b.2 <= run.2 => Some(b),
        _ => Some(run),
    })
    .unwrap();
    let d = x.ncols();
    let centers = Mat::from_shape_vec((cfg.k, d), centers.into_iter().flatten().collect()).unwrap();
    Ok(KMeans { labels, centers, inertia })
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), f64>, BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    assert_eq!(a.len(), b.len());
    let (mut joint, mut ra, mut rb) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ra.entry(x).or_insert(0.0) += 1.0;
        *rb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ra, rb)
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts.values().map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
/// Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (joint, ra, rb) = contingency(a, b);
    let (ha, hb) = (entropy(&ra, n), entropy(&rb, n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint.iter().map(|(&(x, y), &c)| (c / n) * (c * n / (ra[&x] * rb[&y])).ln()).sum();
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Identical partitions (including the all-one-cluster
/// degenerate case) score 1.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (joint, ra, rb) = contingency(a, b);
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.values().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.values().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Segment clusters against the clusters segments inherit from their
/// assigned parcels. Returns `(NMI, ARS)`.
pub fn cluster_consistency(segments: &Mat, parcels: &Mat, parcel_of: &[usize], cfg: &KMeansConfig, seed: u64) -> Result<(f64, f64)> {
    if cfg.k < 2 {
        return Err(Error::Eval("cluster consistency needs k >= 2".into()));
    }
    if parcel_of.len() != segments.nrows() {
        return Err(Error::Eval("assignment length differs from the segment count".into()));
    }
    let parcel_labels = kmeans(parcels, cfg, seed)?.labels;
    let a = kmeans(segments, cfg, seed.wrapping_add(1))?.labels;
    let b: Vec<usize> = parcel_of.iter().map(|&r| parcel_labels[r]).collect();
    Ok((nmi(&a, &b), adjusted_rand(&a, &b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..k)).collect()
    }

    /// Textbook NMI from label-probability sums over every label pair.
    fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len() as f64;
        let ka = *a.iter().max().unwrap() + 1;
        let kb = *b.iter().max().unwrap() + 1;
        let p = |pred: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| pred(i)).count() as f64 / n;
        let mut mi = 0.0;
        let (mut ha, mut hb) = (0.0, 0.0);
        for x in 0..ka {
            let px = p(&|i| a[i] == x);
            if px > 0.0 {
                ha -= px * px.ln();
            }
            for y in 0..kb {
                let py = p(&|i| b[i] == y);
                let pxy = p(&|i| a[i] == x && b[i] == y);
                if pxy > 0.0 {
                    mi += pxy * (pxy / (px * py)).ln();
                }
            }
        }
        for y in 0..kb {
            let py = p(&|i| b[i] == y);
            if py > 0.0 {
                hb -= py * py.ln();
            }
        }
        mi / ((ha + hb) / 2.0)
    }

    /// Adjusted Rand index from brute-force pair agreement counts.
    fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
                both += (sa && sb) as u8 as f64;
                in_a += sa as u8 as f64;
                in_b += sb as u8 as f64;
                pairs += 1.0;
            }
        }
        let expected = in_a * in_b / pairs;
        (both - expected) / ((in_a + in_b) / 2.0 - expected)
    }

    #[test]
    fn scores_match_textbook_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in 0..30 {
            let n = 20 + t;
            let a = random_labels(&mut rng, n, 2 + t % 4);
            let b = random_labels(&mut rng, n, 2 + t % 3);
            assert!((nmi(&a, &b) - nmi_oracle(&a, &b)).abs() < 1e-9);
            assert!((adjusted_rand(&a, &b) - ari_oracle(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_labels(&mut rng, 50, 4);
        let relabeled: Vec<usize> = a.iter().map(|&x| 3 - x).collect();
        assert!((nmi(&a, &relabeled) - 1.0).abs() < 1e-12);
        assert!((adjusted_rand(&a, &relabeled) - 1.0).abs() < 1e-12);
        let b = random_labels(&mut rng, 50, 3);
        assert_eq!(nmi(&a, &b), nmi(&b, &a));
        assert_eq!(adjusted_rand(&a, &b), adjusted_rand(&b, &a));
    }

    #[test]
    fn independent_labels_have_near_zero_ars() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_labels(&mut rng, 5000, 5);
        let b = random_labels(&mut rng, 5000, 5);
        assert!(adjusted_rand(&a, &b).abs() < 0.05);
    }

    #[test]
    fn kmeans_separates_blobs_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let x = Mat::from_shape_fn((90, 2), |(i, d)| (truth[i] * 10) as f64 * (d as f64 + 1.0) + rng.gen_range(-0.5..0.5));
        let cfg = KMeansConfig { k: 3, ..Default::default() };
        let km = kmeans(&x, &cfg, 1).unwrap();
        assert_eq!(adjusted_rand(&km.labels, &truth), 1.0);
        assert_eq!(kmeans(&x, &cfg, 1).unwrap(), km);
        assert!(kmeans(&x.slice(ndarray::s![..2, ..]).to_owned(), &cfg, 1).is_err());
    }

    #[test]
    fn consistency_of_copied_clusters_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let parcels = Mat::from_shape_fn((12, 2), |(i, _)| (i % 3) as f64 * 10.0 + rng.gen_range(-0.1..0.1));
        let parcel_of: Vec<usize> = (0..36).map(|s| s % 12).collect();
        let segments = Mat::from_shape_fn((36, 2), |(s, d)| parcels[[parcel_of[s], d]]);
        let cfg = KMeansConfig { k: 3, ..Default::default() };
        let (n, a) = cluster_consistency(&segments, &parcels, &parcel_of, &cfg, 0).unwrap();
        assert!((n - 1.0).abs() < 1e-12 && (a - 1.0).abs() < 1e-12);
        let bad = KMeansConfig { k: 1, ..Default::default() };
        assert!(cluster_consistency(&segments, &parcels, &parcel_of, &bad, 0).is_err());
    }
}
