use std::collections::BTreeMap;

use super::{Edge, Relation, WeightedEdgeList};
use crate::model::SegmentTrajectory;

/// Row-normalized first-order transition counts over entity sequences.
pub fn transfer_probabilities<'a>(relation: Relation, sequences: impl IntoIterator<Item = &'a [usize]>) -> WeightedEdgeList {
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut out: BTreeMap<usize, f64> = BTreeMap::new();
    for seq in sequences {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1.0;
            *out.entry(w[0]).or_default() += 1.0;
        }
    }
    let edges = counts.into_iter().map(|((i, j), c)| Edge { src: i, dst: j, weight: c / out[&i] }).collect();
    WeightedEdgeList::new(relation, edges)
}

pub fn build_segment_mobility(trajectories: &[SegmentTrajectory]) -> WeightedEdgeList {
    transfer_probabilities(Relation::SMob, trajectories.iter().map(|t| t.segment_ids.as_slice()))
}

/// Maps a segment trajectory onto parcels and collapses consecutive repeats.
pub fn parcel_sequence(segment_ids: &[usize], parcel_of: &[usize]) -> Vec<usize> {
    let mut seq: Vec<usize> = segment_ids.iter().map(|&s| parcel_of[s]).collect();
    seq.dedup();
    seq
}

pub fn build_parcel_mobility(trajectories: &[SegmentTrajectory], parcel_of: &[usize]) -> WeightedEdgeList {
    let seqs: Vec<Vec<usize>> = trajectories.iter().map(|t| parcel_sequence(&t.segment_ids, parcel_of)).collect();
    transfer_probabilities(Relation::RMob, seqs.iter().map(Vec::as_slice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(ids: &[usize]) -> SegmentTrajectory {
        SegmentTrajectory { id: 0, segment_ids: ids.to_vec() }
    }

    #[test]
    fn hand_counted_transitions() {
        let g = build_segment_mobility(&[traj(&[1, 2, 1, 3, 1, 2])]);
        assert!((g.weight(1, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.weight(1, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.weight(2, 1), Some(1.0));
        assert_eq!(g.weight(3, 1), Some(1.0));
        assert!(build_segment_mobility(&[]).is_empty());
    }

    #[test]
    fn parcel_collapse() {
        // segments 0,1 -> parcel A(0); 2,3 -> parcel B(1)
        let parcel_of = [0, 0, 1, 1];
        assert_eq!(parcel_sequence(&[0, 1, 2, 3], &parcel_of), vec![0, 1]);
        let g = build_parcel_mobility(&[traj(&[0, 1, 2, 3])], &parcel_of);
        assert_eq!(g.weight(0, 1), Some(1.0));
        assert_eq!(g.len(), 1);
        assert!(build_parcel_mobility(&[traj(&[0, 1, 0])], &parcel_of).is_empty());
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(seqs in prop::collection::vec(prop::collection::vec(0usize..12, 0..15), 0..20)) {
            let trajs: Vec<_> = seqs.iter().map(|s| traj(s)).collect();
            let g = build_segment_mobility(&trajs);
            for (node, sum) in g.out_weight_sums(12).into_iter().enumerate() {
                let has_out = g.edges.iter().any(|e| e.src == node);
                if has_out {
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
            }
            prop_assert!(g.edges.iter().all(|e| e.weight > 0.0 && e.weight <= 1.0));
        }
    }
}
