//! Simulation box, node-centred grid and the horizontal worker decomposition.
//!
//! The box is periodic in `x` and `y` and bounded by solid walls in `z`.
//! Parcels are binned into the cell that contains them; the nearest-neighbour
//! search of a parcel scans the 2x2x2 block of cells that surround the grid
//! node closest to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Horizontal halo width in cells.
pub const HALO_WIDTH: usize = 1;

/// Index of a grid cell, `i` and `j` in `0..nx`, `0..ny`, `k` in `0..nz`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// Index of a grid node, `i`, `j` reduced modulo `nx`, `ny` and `k` in `0..=nz`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// The cells surrounding one grid node: 8 in the interior, 4 on a wall.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    cells: [Cell; 8],
    len: usize,
}

impl Stencil {
    pub fn as_slice(&self) -> &[Cell] {
        &self.cells[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.as_slice().contains(&cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    extent: Vec3,
    origin: Vec3,
    cells: [usize; 3],
}

impl Domain {
    pub fn new(extent: Vec3, origin: Vec3, cells: [usize; 3]) -> Result<Self> {
        if extent.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "domain extents must be positive, got {extent:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite origin {origin:?}")));
        }
        if cells.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "cell counts must be positive, got {cells:?}"
            )));
        }
        Ok(Self {
            extent,
            origin,
            cells,
        })
    }

    /// `[0, 1]^3` split into `n^3` cells.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Self::new([1.0; 3], [0.0; 3], [n; 3])
    }

    pub fn extent(&self) -> Vec3 {
        self.extent
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn periodic(&self) -> [bool; 3] {
        [true, true, false]
    }

    pub fn spacing(&self) -> Vec3 {
        [
            self.extent[0] / self.cells[0] as f64,
            self.extent[1] / self.cells[1] as f64,
            self.extent[2] / self.cells[2] as f64,
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        let [dx, dy, dz] = self.spacing();
        dx * dy * dz
    }

    /// Volume below which a parcel is small.
    pub fn min_volume(&self) -> f64 {
        self.cell_volume() / 40.0
    }

    /// Squared distance exceeding that of any pair of points in the box.
    pub fn sentinel_distance(&self) -> f64 {
        self.extent.iter().map(|l| l * l).sum()
    }

    /// Wraps `x`, `y` into the primary box; rejects `z` outside the walls.
    pub fn normalise(&self, p: Vec3) -> Result<Vec3> {
        let z_lo = self.origin[2];
        let z_hi = z_lo + self.extent[2];
        if !p.iter().all(|c| c.is_finite()) || p[2] < z_lo || p[2] > z_hi {
            return Err(Error::InvalidInput(format!(
                "position {p:?} outside vertical extent [{z_lo}, {z_hi}]"
            )));
        }
        Ok([self.wrap(p[0], 0), self.wrap(p[1], 1), p[2]])
    }

    fn wrap(&self, x: f64, axis: usize) -> f64 {
        let l = self.extent[axis];
        let w = (x - self.origin[axis]).rem_euclid(l);
        // rem_euclid can round up to exactly l for tiny negative inputs
        self.origin[axis] + if w >= l { 0.0 } else { w }
    }

    /// The cell containing an in-box position.
    pub fn cell_of(&self, p: Vec3) -> Cell {
        let h = self.spacing();
        let idx = |axis: usize| {
            let t = ((p[axis] - self.origin[axis]) / h[axis]).floor();
            (t.max(0.0) as usize).min(self.cells[axis] - 1)
        };
        Cell {
            i: idx(0),
            j: idx(1),
            k: idx(2),
        }
    }

    pub fn linear_cell(&self, c: Cell) -> usize {
        c.i + self.cells[0] * (c.j + self.cells[1] * c.k)
    }

    pub fn cell_from_linear(&self, index: usize) -> Cell {
        let [nx, ny, _] = self.cells;
        Cell {
            i: index % nx,
            j: (index / nx) % ny,
            k: index / (nx * ny),
        }
    }

    /// Grid node closest to `p`. Midpoints round toward the lower node.
    pub fn nearest_node(&self, p: Vec3) -> Result<Node> {
        let p = self.normalise(p)?;
        let h = self.spacing();
        let round = |axis: usize| {
            let t = (p[axis] - self.origin[axis]) / h[axis];
            (t - 0.5).ceil().max(0.0) as usize
        };
        Ok(Node {
            i: round(0) % self.cells[0],
            j: round(1) % self.cells[1],
            k: round(2).min(self.cells[2]),
        })
    }

    /// Cells `{i-1,i} x {j-1,j} x {k-1,k}` around `node`, wrapped
    /// horizontally and clipped at the walls.
    pub fn surrounding_cells(&self, node: Node) -> Result<Stencil> {
        let [nx, ny, nz] = self.cells;
        if node.i >= nx || node.j >= ny || node.k > nz {
            return Err(Error::InvalidInput(format!("invalid node {node:?}")));
        }
        // a single-cell axis wraps onto itself
        let xs = &[(node.i + nx - 1) % nx, node.i][usize::from(nx == 1)..];
        let ys = &[(node.j + ny - 1) % ny, node.j][usize::from(ny == 1)..];
        let mut stencil = Stencil {
            cells: [Cell { i: 0, j: 0, k: 0 }; 8],
            len: 0,
        };
        for k in [node.k.wrapping_sub(1), node.k] {
            if k >= nz {
                continue;
            }
            for &j in ys {
                for &i in xs {
                    stencil.cells[stencil.len] = Cell { i, j, k };
                    stencil.len += 1;
                }
            }
        }
        Ok(stencil)
    }

    /// Search stencil of an in-box position.
    pub fn stencil_of(&self, p: Vec3) -> Result<Stencil> {
        self.surrounding_cells(self.nearest_node(p)?)
    }

    /// `p - q` with horizontal components wrapped into `[-L/2, L/2)`.
    pub fn minimum_image_delta(&self, p: Vec3, q: Vec3) -> Vec3 {
        let mut d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        for (axis, c) in d.iter_mut().enumerate().take(2) {
            let l = self.extent[axis];
            let half = 0.5 * l;
            if c.abs() < l {
                // in-box points: one shift at most
                if *c >= half {
                    *c -= l;
                } else if *c < -half {
                    *c += l;
                }
            } else {
                *c = (*c + half).rem_euclid(l) - half;
            }
        }
        d
    }

    pub fn distance_sq(&self, p: Vec3, q: Vec3) -> f64 {
        let d = self.minimum_image_delta(p, q);
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    }
}

/// Splits the horizontal cells over a `px x py` grid of workers.
///
/// Worker ids run `x`-fastest: worker `wx + px * wy` owns the cell columns
/// `x_range(wx) x y_range(wy)` over the full vertical extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    px: usize,
    py: usize,
    x_bounds: Vec<usize>,
    y_bounds: Vec<usize>,
    x_owner: Vec<usize>,
    y_owner: Vec<usize>,
    neighbours: Vec<[usize; 8]>,
}

impl Decomposition {
    /// Most-square factorisation `px * py = n_workers` with `px >= py`.
    pub fn new(domain: &Domain, n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::InvalidInput("worker count must be >= 1".into()));
        }
        let py = (1..=n_workers)
            .take_while(|d| d * d <= n_workers)
            .filter(|&d| n_workers.is_multiple_of(d))
            .last()
            .unwrap_or(1);
        Self::with_grid(domain, n_workers / py, py)
    }

    pub fn with_grid(domain: &Domain, px: usize, py: usize) -> Result<Self> {
        let [nx, ny, _] = domain.cells();
        if px == 0 || py == 0 {
            return Err(Error::InvalidInput("worker grid must be non-empty".into()));
        }
        if nx < 2 * px || ny < 2 * py {
            return Err(Error::InvalidInput(format!(
                "{px}x{py} workers over {nx}x{ny} cells leaves a worker with fewer than 2 cells"
            )));
        }
        let bounds = |n: usize, p: usize| (0..=p).map(|w| w * n / p).collect::<Vec<_>>();
        let owners = |b: &[usize], n: usize| {
            let mut owner = vec![0; n];
            for w in 0..b.len() - 1 {
                owner[b[w]..b[w + 1]].fill(w);
            }
            owner
        };
        let x_bounds = bounds(nx, px);
        let y_bounds = bounds(ny, py);
        let x_owner = owners(&x_bounds, nx);
        let y_owner = owners(&y_bounds, ny);

        let mut neighbours = Vec::with_capacity(px * py);
        for wy in 0..py {
            for wx in 0..px {
                let mut table = [0; 8];
                let mut n = 0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nxw = (wx as i64 + dx).rem_euclid(px as i64) as usize;
                        let nyw = (wy as i64 + dy).rem_euclid(py as i64) as usize;
                        table[n] = nxw + px * nyw;
                        n += 1;
                    }
                }
                neighbours.push(table);
            }
        }

        Ok(Self {
            px,
            py,
            x_bounds,
            y_bounds,
            x_owner,
            y_owner,
            neighbours,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.px * self.py
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.px, self.py)
    }

    pub fn coords(&self, worker: usize) -> (usize, usize) {
        (worker % self.px, worker / self.px)
    }

    pub fn x_range(&self, worker: usize) -> std::ops::Range<usize> {
        let (wx, _) = self.coords(worker);
        self.x_bounds[wx]..self.x_bounds[wx + 1]
    }

    pub fn y_range(&self, worker: usize) -> std::ops::Range<usize> {
        let (_, wy) = self.coords(worker);
        self.y_bounds[wy]..self.y_bounds[wy + 1]
    }

    pub fn owner_of_cell(&self, i: usize, j: usize) -> usize {
        self.x_owner[i] + self.px * self.y_owner[j]
    }

    pub fn owns(&self, worker: usize, cell: Cell) -> bool {
        self.owner_of_cell(cell.i, cell.j) == worker
    }

    /// The 8 surrounding workers under periodic wrap; entries may repeat.
    pub fn neighbours(&self, worker: usize) -> &[usize; 8] {
        &self.neighbours[worker]
    }

    pub fn is_neighbour(&self, worker: usize, other: usize) -> bool {
        self.neighbours[worker].contains(&other)
    }

    /// Owned cells of `worker` in `x`-fastest order over the full column.
    pub fn owned_cells<'a>(
        &'a self,
        domain: &'a Domain,
        worker: usize,
    ) -> impl Iterator<Item = Cell> + 'a {
        let xs = self.x_range(worker);
        let ys = self.y_range(worker);
        (0..domain.cells()[2]).flat_map(move |k| {
            let xs = xs.clone();
            ys.clone()
                .flat_map(move |j| xs.clone().map(move |i| Cell { i, j, k }))
        })
    }
}
