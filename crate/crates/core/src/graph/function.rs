use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Edge, Relation, WeightedEdgeList};
use crate::geometry::point_in_polygon;
use crate::model::{nearest_by, snap_point_to_segment, EntityType, MapBundle};

/// Per-entity sparse TF-IDF vectors over the POI category vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfTable {
    pub entity: EntityType,
    pub vocab_size: usize,
    /// `(category, value)` pairs sorted by category; only positive values kept.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl TfidfTable {
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab_size];
        for &(k, x) in &self.rows[i] {
            v[k] = x;
        }
        v
    }

    fn norm(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|(_, x)| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity; zero vectors have similarity 0 with everything.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (ni, nj) = (self.norm(i), self.norm(j));
        if ni == 0.0 || nj == 0.0 {
            return 0.0;
        }
        let (a, b) = (&self.rows[i], &self.rows[j]);
        let (mut p, mut q, mut dot) = (0, 0, 0.0);
        while p < a.len() && q < b.len() {
            match a[p].0.cmp(&b[q].0) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[p].1 * b[q].1;
                    p += 1;
                    q += 1;
                }
            }
        }
        dot / (ni * nj)
    }
}

/// TF-IDF over category documents: `tf = count / doc_len`,
/// `idf = ln(N / (1 + df))`, negative values clamped to zero.
pub fn tfidf_from_documents(entity: EntityType, docs: &[Vec<usize>], vocab_size: usize) -> TfidfTable {
    let n = docs.len() as f64;
    let mut df = vec![0usize; vocab_size];
    for d in docs {
        for c in d.iter().copied().collect::<BTreeSet<_>>() {
            df[c] += 1;
        }
    }
    let rows = docs
        .iter()
        .map(|d| {
            if d.is_empty() {
                return Vec::new();
            }
            let mut counts = vec![0usize; vocab_size];
            d.iter().for_each(|&c| counts[c] += 1);
            counts
                .iter()
                .enumerate()
                .filter(|(_, &cnt)| cnt > 0)
                .filter_map(|(c, &cnt)| {
                    let v = (cnt as f64 / d.len() as f64) * (n / (1.0 + df[c] as f64)).ln();
                    (v > 0.0).then_some((c, v))
                })
                .collect()
        })
        .collect();
    TfidfTable { entity, vocab_size, rows }
}

/// Entity index each POI belongs to: nearest segment, or the containing parcel
/// with a nearest-centroid fallback.
pub fn match_pois(entity: EntityType, bundle: &MapBundle) -> Vec<usize> {
    bundle
        .pois
        .iter()
        .map(|p| match entity {
            EntityType::Segment => snap_point_to_segment(p.location, &bundle.segments).expect("non-empty segments"),
            EntityType::Parcel => bundle
                .parcels
                .iter()
                .find(|r| point_in_polygon(p.location, &r.polygon))
                .map(|r| r.id)
                .or_else(|| nearest_by(bundle.parcels.len(), |i| bundle.parcels[i].centroid.dist(p.location)))
                .expect("non-empty parcels"),
        })
        .collect()
}

pub fn compute_tfidf(entity: EntityType, bundle: &MapBundle) -> TfidfTable {
    let n = match entity {
        EntityType::Segment => bundle.segments.len(),
        EntityType::Parcel => bundle.parcels.len(),
    };
    let mut docs = vec![Vec::new(); n];
    if n > 0 {
        for (poi, owner) in bundle.pois.iter().zip(match_pois(entity, bundle)) {
            docs[owner].push(poi.category);
        }
    }
    tfidf_from_documents(entity, &docs, bundle.poi_vocab_size())
}

/// Each entity links to its `top_k` most cosine-similar peers; the edge set is
/// symmetrized and weighted by cosine similarity. Zero similarities are dropped.
pub fn build_function_graph(tfidf: &TfidfTable, top_k: usize) -> WeightedEdgeList {
    let relation = match tfidf.entity {
        EntityType::Segment => Relation::SFun,
        EntityType::Parcel => Relation::RFun,
    };
    let n = tfidf.rows.len();
    let mut chosen = BTreeSet::new();
    for i in 0..n {
        if tfidf.rows[i].is_empty() {
            continue;
        }
        let mut cands: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (tfidf.cosine(i, j), j)).filter(|(s, _)| *s > 0.0).collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cands.iter().take(top_k) {
            chosen.insert((i, j));
            chosen.insert((j, i));
        }
    }
    let edges = chosen.into_iter().map(|(i, j)| Edge { src: i, dst: j, weight: tfidf.cosine(i, j) }).collect();
    WeightedEdgeList::new(relation, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward dense re-derivation used as the reference.
    fn reference_tfidf(docs: &[Vec<usize>], v: usize) -> Vec<Vec<f64>> {
        let n = docs.len() as f64;
        docs.iter()
            .map(|d| {
                (0..v)
                    .map(|c| {
                        if d.is_empty() {
                            return 0.0;
                        }
                        let tf = d.iter().filter(|&&x| x == c).count() as f64 / d.len() as f64;
                        let containing = docs.iter().filter(|doc| doc.contains(&c)).count() as f64;
                        (tf * (n / (1.0 + containing)).ln()).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn dense_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    #[test]
    fn three_document_corpus_matches_reference() {
        let docs = vec![vec![0, 0, 1], vec![0], vec![2]];
        let t = tfidf_from_documents(EntityType::Parcel, &docs, 3);
        let r = reference_tfidf(&docs, 3);
        for i in 0..3 {
            let got = t.dense_row(i);
            for c in 0..3 {
                assert!((got[c] - r[i][c]).abs() < 1e-12);
            }
        }
        // `a` occurs in two of three documents: ln(3/3) = 0
        assert_eq!(t.dense_row(1), vec![0.0; 3]);
        assert!((t.dense_row(2)[2] - (1.5f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_and_singleton_corpora() {
        let t = tfidf_from_documents(EntityType::Segment, &[vec![], vec![1]], 2);
        assert!(t.rows[0].is_empty());
        let single = tfidf_from_documents(EntityType::Segment, &[vec![0, 1, 1]], 2);
        assert!(single.rows[0].is_empty(), "ln(1/2) < 0 clamps to zero");
    }

    #[test]
    fn identical_and_orthogonal_vectors() {
        let docs = vec![vec![0, 1], vec![0, 1], vec![2], vec![3], vec![3, 4]];
        let t = tfidf_from_documents(EntityType::Parcel, &docs, 5);
        let g = build_function_graph(&t, 3);
        assert!((g.weight(0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(g.weight(0, 2), None);
    }

    #[test]
    fn top_k_matches_dense_similarity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = if trial == 0 { 5 } else { rng.gen_range(3..50) };
            let v = 6;
            let docs: Vec<Vec<usize>> =
                (0..n).map(|_| (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..v)).collect()).collect();
            let t = tfidf_from_documents(EntityType::Segment, &docs, v);
            let dense = reference_tfidf(&docs, v);
            let k = 2;
            let g = build_function_graph(&t, k);
            let mut expect = BTreeSet::new();
            for i in 0..n {
                let mut row: Vec<(f64, usize)> =
                    (0..n).filter(|&j| j != i).map(|j| (dense_cos(&dense[i], &dense[j]), j)).collect();
                row.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                for &(s, j) in row.iter().take(k) {
                    if s > 1e-12 {
                        expect.insert((i, j));
                        expect.insert((j, i));
                    }
                }
            }
            let got: BTreeSet<_> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
            assert_eq!(got, expect, "trial {trial}");
            for e in &g.edges {
                assert!((e.weight - dense_cos(&dense[e.src], &dense[e.dst])).abs() < 1e-9);
            }
        }
    }
}
