//! Parcel attributes, the small-parcel criterion, artificial sampling and the
//! merge of a resolved cluster.

pub mod io;

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Cell, Decomposition, Domain, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub gid: u64,
    pub position: Vec3,
    pub volume: f64,
    pub buoyancy: f64,
    /// `(xi, eta, zeta)`
    pub vorticity: Vec3,
    /// Aspect ratio `a/c`.
    pub lambda1: f64,
    /// Aspect ratio `a/b`.
    pub lambda2: f64,
    /// Azimuthal angle in `[0, 2pi)`.
    pub theta: f64,
    /// Polar angle in `[0, pi]`.
    pub phi: f64,
}

impl Parcel {
    /// A parcel with neutral attributes; handy for geometric fixtures.
    pub fn at(gid: u64, position: Vec3, volume: f64) -> Self {
        Self {
            gid,
            position,
            volume,
            buoyancy: 0.0,
            vorticity: [0.0; 3],
            lambda1: 1.0,
            lambda2: 1.0,
            theta: 0.0,
            phi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.volume > 0.0
            && self.lambda1 >= 1.0
            && self.lambda2 >= 1.0
            && (0.0..TAU).contains(&self.theta)
            && (0.0..=PI).contains(&self.phi);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "parcel {} violates attribute bounds",
                self.gid
            )))
        }
    }
}

pub fn is_small(parcel: &Parcel, domain: &Domain) -> bool {
    parcel.volume < domain.min_volume()
}

/// Where a remote copy lives on its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub worker: usize,
    pub index: usize,
}

/// Structure-of-arrays parcel storage for one worker.
///
/// Indices `0..n_local` are owned parcels. Indices
/// `n_local..n_local + n_remote` are copies of small parcels owned by other
/// workers; they carry only `gid`, `position` and `volume`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParcelStore {
    pub gid: Vec<u64>,
    pub position: Vec<Vec3>,
    pub volume: Vec<f64>,
    pub buoyancy: Vec<f64>,
    pub vorticity: Vec<Vec3>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl ParcelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_local(&self) -> usize {
        self.buoyancy.len()
    }

    pub fn n_remote(&self) -> usize {
        self.provenance.len()
    }

    pub fn len(&self) -> usize {
        self.gid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gid.is_empty()
    }

    /// Appends an owned parcel. Owned parcels precede remote copies.
    pub fn push(&mut self, p: Parcel) {
        assert_eq!(self.n_remote(), 0, "push after remote copies were appended");
        self.gid.push(p.gid);
        self.position.push(p.position);
        self.volume.push(p.volume);
        self.buoyancy.push(p.buoyancy);
        self.vorticity.push(p.vorticity);
        self.lambda1.push(p.lambda1);
        self.lambda2.push(p.lambda2);
        self.theta.push(p.theta);
        self.phi.push(p.phi);
    }

    pub fn append_remote(&mut self, gid: u64, position: Vec3, volume: f64, from: Provenance) {
        self.gid.push(gid);
        self.position.push(position);
        self.volume.push(volume);
        self.provenance.push(from);
    }

    pub fn provenance(&self, index: usize) -> Option<Provenance> {
        index
            .checked_sub(self.n_local())
            .and_then(|r| self.provenance.get(r).copied())
    }

    pub fn clear_remote(&mut self) {
        let n = self.n_local();
        self.gid.truncate(n);
        self.position.truncate(n);
        self.volume.truncate(n);
        self.provenance.clear();
    }

    /// Full attributes of owned parcel `i`.
    pub fn parcel(&self, i: usize) -> Parcel {
        assert!(i < self.n_local(), "remote copies carry no full attributes");
        Parcel {
            gid: self.gid[i],
            position: self.position[i],
            volume: self.volume[i],
            buoyancy: self.buoyancy[i],
            vorticity: self.vorticity[i],
            lambda1: self.lambda1[i],
            lambda2: self.lambda2[i],
            theta: self.theta[i],
            phi: self.phi[i],
        }
    }

    pub fn set(&mut self, i: usize, p: Parcel) {
        assert!(i < self.n_local());
        self.gid[i] = p.gid;
        self.position[i] = p.position;
        self.volume[i] = p.volume;
        self.buoyancy[i] = p.buoyancy;
        self.vorticity[i] = p.vorticity;
        self.lambda1[i] = p.lambda1;
        self.lambda2[i] = p.lambda2;
        self.theta[i] = p.theta;
        self.phi[i] = p.phi;
    }

    pub fn parcels(&self) -> impl Iterator<Item = Parcel> + '_ {
        (0..self.n_local()).map(|i| self.parcel(i))
    }

    /// Keeps owned parcels where `keep[i]`, in order; drops remote copies.
    pub fn retain_local(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.n_local());
        self.clear_remote();
        let parcels: Vec<Parcel> = self
            .parcels()
            .zip(keep)
            .filter_map(|(p, &k)| k.then_some(p))
            .collect();
        *self = parcels.into_iter().collect();
    }
}

impl FromIterator<Parcel> for ParcelStore {
    fn from_iter<I: IntoIterator<Item = Parcel>>(iter: I) -> Self {
        let mut s = ParcelStore::new();
        for p in iter {
            s.push(p);
        }
        s
    }
}

fn cell_rng(seed: u64, cell: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell as u64);
    rng
}

fn sample_cell(domain: &Domain, cell: Cell, n_per_cell: usize, seed: u64, out: &mut ParcelStore) {
    let lin = domain.linear_cell(cell);
    let mut rng = cell_rng(seed, lin);
    let h = domain.spacing();
    let o = domain.origin();
    let v_min = domain.min_volume();
    let corner = [
        o[0] + cell.i as f64 * h[0],
        o[1] + cell.j as f64 * h[1],
        o[2] + cell.k as f64 * h[2],
    ];
    for slot in 0..n_per_cell {
        let position = [
            corner[0] + rng.random::<f64>() * h[0],
            corner[1] + rng.random::<f64>() * h[1],
            corner[2] + rng.random::<f64>() * h[2],
        ];
        let vorticity = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        ];
        out.push(Parcel {
            gid: (lin * n_per_cell + slot) as u64,
            position,
            vorticity,
            buoyancy: rng.random_range(-1.0..1.0),
            volume: rng.random_range(0.5 * v_min..1.5 * v_min),
            lambda1: rng.random_range(1.0..4.0),
            lambda2: rng.random_range(1.0..4.0),
            theta: rng.random_range(0.0..TAU),
            phi: rng.random_range(0.0..PI),
        });
    }
}

/// Samples `n_per_cell` parcels in every cell of the domain.
///
/// Each cell draws from its own stream keyed by `(seed, cell)`, so the
/// population does not depend on how the domain is decomposed.
pub fn sample_artificial(domain: &Domain, n_per_cell: usize, seed: u64) -> Result<ParcelStore> {
    if n_per_cell == 0 {
        return Err(Error::InvalidInput("n_per_cell must be >= 1".into()));
    }
    let mut store = ParcelStore::new();
    for lin in 0..domain.n_cells() {
        sample_cell(domain, domain.cell_from_linear(lin), n_per_cell, seed, &mut store);
    }
    Ok(store)
}

/// The part of [`sample_artificial`] that falls in `worker`'s cells.
pub fn sample_owned(
    domain: &Domain,
    decomposition: &Decomposition,
    worker: usize,
    n_per_cell: usize,
    seed: u64,
) -> Result<ParcelStore> {
    if n_per_cell == 0 {
        return Err(Error::InvalidInput("n_per_cell must be >= 1".into()));
    }
    let mut store = ParcelStore::new();
    for cell in decomposition.owned_cells(domain, worker) {
        sample_cell(domain, cell, n_per_cell, seed, &mut store);
    }
    Ok(store)
}

/// Combines a cluster into one parcel.
///
/// Volume is summed; position, buoyancy, vorticity and shape parameters are
/// volume-weighted means. Positions are averaged through minimum-image
/// displacements from the member with the smallest gid, which also lends its
/// gid to the result.
pub fn merge_group(members: &[Parcel], domain: &Domain) -> Result<Parcel> {
    let Some(first) = members.iter().min_by_key(|p| p.gid) else {
        return Err(Error::InvalidInput("cannot merge an empty group".into()));
    };
    if members.len() == 1 {
        return Ok(first.clone());
    }
    let mut order: Vec<&Parcel> = members.iter().collect();
    order.sort_by_key(|p| p.gid);

    let volume: f64 = order.iter().map(|p| p.volume).sum();
    let mean = |f: &dyn Fn(&Parcel) -> f64| order.iter().map(|p| p.volume * f(p)).sum::<f64>() / volume;

    let mut shift = [0.0; 3];
    for p in &order {
        let d = domain.minimum_image_delta(p.position, first.position);
        for (s, c) in shift.iter_mut().zip(d) {
            *s += p.volume * c;
        }
    }
    let position = domain.normalise([
        first.position[0] + shift[0] / volume,
        first.position[1] + shift[1] / volume,
        first.position[2] + shift[2] / volume,
    ])?;

    Ok(Parcel {
        gid: first.gid,
        position,
        volume,
        buoyancy: mean(&|p| p.buoyancy),
        vorticity: [
            mean(&|p| p.vorticity[0]),
            mean(&|p| p.vorticity[1]),
            mean(&|p| p.vorticity[2]),
        ],
        lambda1: mean(&|p| p.lambda1),
        lambda2: mean(&|p| p.lambda2),
        theta: mean(&|p| p.theta),
        phi: mean(&|p| p.phi),
    })
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    /// Neumaier-compensated sum, the reference for conservation checks.
    fn compensated(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = sum + x;
            c += if sum.abs() >= x.abs() {
                (sum - t) + x
            } else {
                (x - t) + sum
            };
            sum = t;
        }
        sum + c
    }

    fn parcel() -> impl Strategy<Value = Parcel> {
        (
            any::<u32>(),
            proptest::array::uniform3(0.0f64..1.0),
            1e-6f64..1e-3,
            -1.0f64..1.0,
            proptest::array::uniform3(-10.0f64..10.0),
        )
            .prop_map(|(gid, position, volume, buoyancy, vorticity)| Parcel {
                buoyancy,
                vorticity,
                ..Parcel::at(gid as u64, position, volume)
            })
    }

    proptest! {
        #[test]
        fn merge_conserves_integrals(mut group in proptest::collection::vec(parcel(), 1..9), rot in 0usize..8) {
            let d = Domain::unit_cube(4).unwrap();
            let m = merge_group(&group, &d).unwrap();
            let vol = compensated(group.iter().map(|p| p.volume));
            prop_assert!(((m.volume - vol) / vol).abs() < 1e-12);
            let vb = compensated(group.iter().map(|p| p.volume * p.buoyancy));
            let scale = compensated(group.iter().map(|p| (p.volume * p.buoyancy).abs()));
            prop_assert!((m.volume * m.buoyancy - vb).abs() <= 1e-12 * scale);
            for axis in 0..3 {
                let vw = compensated(group.iter().map(|p| p.volume * p.vorticity[axis]));
                let scale = compensated(group.iter().map(|p| (p.volume * p.vorticity[axis]).abs()));
                prop_assert!((m.volume * m.vorticity[axis] - vw).abs() <= 1e-12 * scale);
            }
            let k = rot % group.len();
            group.rotate_left(k);
            let m2 = merge_group(&group, &d).unwrap();
            prop_assert_eq!(m, m2);
        }
    }
}
