//! Flow and origin-destination targets counted from trajectories.

use crate::autodiff::Mat;
use crate::graph::parcel_sequence;
use crate::model::{EntityType, SegmentTrajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTargets {
    pub inflow: Vec<f64>,
    pub outflow: Vec<f64>,
    /// `od[[i, j]]`: trajectories starting at `i` and ending at `j`.
    pub od: Mat,
}

/// Counts inflow, outflow and OD pairs over `trajectories`.
///
/// Every consecutive transition `a -> b` adds one outflow at `a` and one
/// inflow at `b`, so an origin only gains outflow, a destination only inflow,
/// and every entity in between both. Parcel sequences are the segment
/// sequences mapped through `parcel_of` with consecutive repeats collapsed.
pub fn derive_flow_and_od(trajectories: &[SegmentTrajectory], parcel_of: &[usize], entity: EntityType, n: usize) -> FlowTargets {
    let mut t = FlowTargets { inflow: vec![0.0; n], outflow: vec![0.0; n], od: Mat::zeros((n, n)) };
    for traj in trajectories {
        let seq = match entity {
            EntityType::Segment => traj.segment_ids.clone(),
            EntityType::Parcel => parcel_sequence(&traj.segment_ids, parcel_of),
        };
        let (Some(&first), Some(&last)) = (seq.first(), seq.last()) else { continue };
        for w in seq.windows(2) {
            t.outflow[w[0]] += 1.0;
            t.inflow[w[1]] += 1.0;
        }
        t.od[[first, last]] += 1.0;
    }
    t
}
