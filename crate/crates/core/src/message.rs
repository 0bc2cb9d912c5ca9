use crate::domain::Vec3;
use crate::parcels::Parcel;

/// Two-sided messages exchanged between neighbouring workers.
#[derive(Clone, Debug, PartialEq)]
pub enum Msg {
    /// Boundary small parcel sent for a search in the receiver's cells.
    SmallCopy {
        gid: u64,
        position: Vec3,
        volume: f64,
        index: usize,
    },
    /// Best candidate found for a remote copy, returned to the owner.
    Candidate {
        origin: usize,
        iclo: usize,
        gclo: u64,
        dclo: f64,
    },
    /// Tells the owner of `target` that `origin` on the sender points at it.
    InEdge {
        target: usize,
        origin: usize,
        origin_gid: u64,
    },
    /// A leaf parcel travelling to the owner of its root.
    Leaf { root: usize, parcel: Parcel },
    /// A merged parcel that left its owner's subdomain.
    Migrate(Parcel),
}
