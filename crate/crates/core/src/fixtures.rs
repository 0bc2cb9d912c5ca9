//! The twelve-parcel worked example, as a positioned population and as a
//! bare gid graph.

use crate::domain::Domain;
use crate::error::Result;
use crate::parcels::{io, Parcel};
use crate::resolve::ResolveInput;

pub const WORKED_EXAMPLE_CSV: &str = include_str!("../fixtures/worked_example.csv");

/// Vertex names, indexed by gid.
pub const LABELS: [char; 12] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L'];

pub fn label(gid: u64) -> char {
    LABELS.get(gid as usize).copied().unwrap_or('?')
}

pub fn gid_of(label: char) -> u64 {
    LABELS.iter().position(|&c| c == label).expect("label A..L") as u64
}

/// `(origin, target)` by label.
pub const WORKED_EXAMPLE_EDGES: [(char, char); 12] = [
    ('A', 'F'),
    ('B', 'F'),
    ('F', 'C'),
    ('C', 'D'),
    ('D', 'E'),
    ('E', 'H'),
    ('H', 'E'),
    ('G', 'I'),
    ('J', 'I'),
    ('K', 'I'),
    ('I', 'H'),
    ('L', 'H'),
];

pub fn worked_example_domain() -> Domain {
    Domain::new([64.0; 3], [0.0; 3], [4; 3]).expect("valid domain")
}

pub fn worked_example() -> Result<(Domain, Vec<Parcel>)> {
    Ok((
        worked_example_domain(),
        io::read_csv(WORKED_EXAMPLE_CSV.as_bytes())?,
    ))
}

/// Spreads a gid graph over workers: vertex `v` lives on `owner[v]`, with
/// local indices assigned in gid order. Distances are all 1.
pub fn distribute_edges(edges: &[(u64, u64)], owner: &[usize], n_workers: usize) -> Vec<ResolveInput> {
    let index = |v: u64| {
        let w = owner[v as usize];
        owner[..v as usize].iter().filter(|&&o| o == w).count()
    };
    let mut inputs: Vec<ResolveInput> = (0..n_workers)
        .map(|w| ResolveInput {
            store_len: owner.iter().filter(|&&o| o == w).count(),
            ..Default::default()
        })
        .collect();
    let mut sorted = edges.to_vec();
    sorted.sort_by_key(|&(s, _)| (owner[s as usize], index(s)));
    for &(s, t) in &sorted {
        let inp = &mut inputs[owner[s as usize]];
        inp.candidates.push(index(s), index(t), owner[t as usize], 1.0, t);
        inp.origin_gid.push(s);
    }
    for inp in &mut inputs {
        for m in 0..inp.candidates.len() {
            let (s, t) = (inp.origin_gid[m], inp.candidates.gclo[m]);
            inp.candidates.dual[m] = edges.contains(&(t, s));
        }
    }
    inputs
}
