//! Parcel snapshots.
//!
//! The binary layout is little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "PCLS"
//! version    u32      1
//! n_parcels  u64
//! n_attrs    u32      13
//! gid        u64 x n_parcels
//! x, y, z, volume, buoyancy, xi, eta, zeta,
//! lambda1, lambda2, theta, phi     f64 x n_parcels each, in this order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Parcel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCLS";
pub const VERSION: u32 = 1;
const N_ATTRS: u32 = 13;

type Getter = fn(&Parcel) -> f64;
type Setter = fn(&mut Parcel, f64);

const FLOAT_ATTRS: [(Getter, Setter); 12] = [
    (|p| p.position[0], |p, v| p.position[0] = v),
    (|p| p.position[1], |p, v| p.position[1] = v),
    (|p| p.position[2], |p, v| p.position[2] = v),
    (|p| p.volume, |p, v| p.volume = v),
    (|p| p.buoyancy, |p, v| p.buoyancy = v),
    (|p| p.vorticity[0], |p, v| p.vorticity[0] = v),
    (|p| p.vorticity[1], |p, v| p.vorticity[1] = v),
    (|p| p.vorticity[2], |p, v| p.vorticity[2] = v),
    (|p| p.lambda1, |p, v| p.lambda1 = v),
    (|p| p.lambda2, |p, v| p.lambda2 = v),
    (|p| p.theta, |p, v| p.theta = v),
    (|p| p.phi, |p, v| p.phi = v),
];

pub fn write_snapshot<W: Write>(mut w: W, parcels: &[Parcel]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(parcels.len() as u64).to_le_bytes())?;
    w.write_all(&N_ATTRS.to_le_bytes())?;
    let mut buf = Vec::with_capacity(parcels.len() * 8);
    for p in parcels {
        buf.extend_from_slice(&p.gid.to_le_bytes());
    }
    w.write_all(&buf)?;
    for (get, _) in FLOAT_ATTRS {
        buf.clear();
        for p in parcels {
            buf.extend_from_slice(&get(p).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, n: usize) -> Result<Vec<[u8; 8]>> {
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated attribute array: {e}")))?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| c.try_into().expect("8-byte chunk"))
        .collect())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<Vec<Parcel>> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("short header: {e}")))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let attrs = u32::from_le_bytes(header[16..20].try_into().unwrap());
    if attrs != N_ATTRS {
        return Err(Error::Format(format!("expected {N_ATTRS} attributes, got {attrs}")));
    }
    let mut parcels: Vec<Parcel> = read_array(&mut r, n)?
        .into_iter()
        .map(|b| Parcel::at(u64::from_le_bytes(b), [0.0; 3], 0.0))
        .collect();
    for (_, set) in FLOAT_ATTRS {
        for (p, b) in parcels.iter_mut().zip(read_array(&mut r, n)?) {
            set(p, f64::from_le_bytes(b));
        }
    }
    Ok(parcels)
}

#[derive(Serialize, Deserialize)]
struct ParcelRow {
    gid: u64,
    x: f64,
    y: f64,
    z: f64,
    volume: f64,
    buoyancy: f64,
    xi: f64,
    eta: f64,
    zeta: f64,
    lambda1: f64,
    lambda2: f64,
    theta: f64,
    phi: f64,
}

pub fn write_csv<W: Write>(w: W, parcels: &[Parcel]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in parcels {
        out.serialize(ParcelRow {
            gid: p.gid,
            x: p.position[0],
            y: p.position[1],
            z: p.position[2],
            volume: p.volume,
            buoyancy: p.buoyancy,
            xi: p.vorticity[0],
            eta: p.vorticity[1],
            zeta: p.vorticity[2],
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            theta: p.theta,
            phi: p.phi,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<Parcel>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rdr.deserialize::<ParcelRow>()
        .map(|row| {
            let r = row?;
            Ok(Parcel {
                gid: r.gid,
                position: [r.x, r.y, r.z],
                volume: r.volume,
                buoyancy: r.buoyancy,
                vorticity: [r.xi, r.eta, r.zeta],
                lambda1: r.lambda1,
                lambda2: r.lambda2,
                theta: r.theta,
                phi: r.phi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::parcels::sample_artificial;

    #[test]
    fn snapshot_round_trip_and_layout() {
        let d = Domain::unit_cube(2).unwrap();
        let parcels: Vec<_> = sample_artificial(&d, 3, 1).unwrap().parcels().collect();
        let mut bytes = Vec::new();
        write_snapshot(&mut bytes, &parcels).unwrap();
        assert_eq!(&bytes[..4], b"PCLS");
        assert_eq!(bytes.len(), 20 + 24 * 13 * 8);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 24);
        // the first gid follows the header
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 0);
        assert_eq!(read_snapshot(&bytes[..]).unwrap(), parcels);
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let mut bytes = Vec::new();
        write_snapshot(&mut bytes, &[Parcel::at(1, [0.0; 3], 1.0)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_snapshot(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(
            read_snapshot(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(read_snapshot(&v2[..]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = Domain::unit_cube(2).unwrap();
        let parcels: Vec<_> = sample_artificial(&d, 2, 4).unwrap().parcels().collect();
        let mut text = Vec::new();
        write_csv(&mut text, &parcels).unwrap();
        let s = String::from_utf8(text.clone()).unwrap();
        assert!(s.starts_with("gid,x,y,z,volume,buoyancy,xi,eta,zeta,lambda1,lambda2,theta,phi\n"));
        assert_eq!(read_csv(&text[..]).unwrap(), parcels);
    }
}
