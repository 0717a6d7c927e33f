//! MAC grid construction and queries.
//!
//! The domain is a finite union of axis-aligned boxes discretized by one
//! structured lattice over the bounding box plus an activity mask, so cell
//! and face lookup stay O(1) on non-box (e.g. L-shaped) domains. Scalars
//! live on primal cells; the i-th velocity component lives on the faces
//! orthogonal to axis i, each of which carries a dual cell made of the two
//! adjacent half-cells. Dual faces come in two geometric kinds:
//!
//! * in-cell: normal to axis i, cutting a primal cell through its center
//!   plane and separating the dual cells of the cell's two i-faces;
//! * tangent: half of a primal face of another direction, separating the
//!   dual cells of the i-faces that touch that half.
//!
//! Tangent dual faces are stored at half-face granularity. In the generic
//! interior configuration the two halves carry identical geometry and their
//! contributions sum to the usual full-width dual face; at re-entrant
//! corners the halves genuinely differ and the split is what keeps flux
//! conservativity and the diamond-cell mass balance exact.

use thiserror::Error;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid refinement: {0}")]
    InvalidRefinement(String),
    #[error("box boundary coordinate {coordinate} on axis {axis} is not a grid line; no structured partition exists")]
    IncompatibleBoxes { axis: usize, coordinate: f64 },
    #[error("the union of boxes is not connected ({components} components)")]
    Disconnected { components: usize },
}

/// One closed axis-aligned box, `lo[a] < hi[a]` for every used axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub lo: [f64; MAX_DIM],
    pub hi: [f64; MAX_DIM],
}

impl BoxSpec {
    pub fn new_2d(lo: [f64; 2], hi: [f64; 2]) -> Self {
        BoxSpec { lo: [lo[0], lo[1], 0.0], hi: [hi[0], hi[1], 0.0] }
    }

    pub fn new_3d(lo: [f64; 3], hi: [f64; 3]) -> Self {
        BoxSpec { lo, hi }
    }

    pub fn volume(&self, dim: usize) -> f64 {
        (0..dim).map(|a| self.hi[a] - self.lo[a]).product()
    }
}

/// Domain description: dimension and a union of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub dimension: usize,
    pub boxes: Vec<BoxSpec>,
}

impl DomainSpec {
    pub fn unit_square() -> Self {
        DomainSpec { dimension: 2, boxes: vec![BoxSpec::new_2d([0.0, 0.0], [1.0, 1.0])] }
    }

    pub fn unit_cube() -> Self {
        DomainSpec { dimension: 3, boxes: vec![BoxSpec::new_3d([0.0; 3], [1.0; 3])] }
    }

    /// [0,1]^2 with the upper-right quadrant [1,2]x[0,1/2] attached.
    pub fn l_shape() -> Self {
        DomainSpec {
            dimension: 2,
            boxes: vec![
                BoxSpec::new_2d([0.0, 0.0], [1.0, 1.0]),
                BoxSpec::new_2d([1.0, 0.0], [2.0, 0.5]),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.dimension != 2 && self.dimension != 3 {
            return Err(GridError::InvalidDomain(format!(
                "dimension must be 2 or 3, got {}",
                self.dimension
            )));
        }
        if self.boxes.is_empty() {
            return Err(GridError::InvalidDomain("no boxes given".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            for a in 0..self.dimension {
                if !(b.lo[a] < b.hi[a]) || !b.lo[a].is_finite() || !b.hi[a].is_finite() {
                    return Err(GridError::InvalidDomain(format!(
                        "box {} is degenerate on axis {}: [{}, {}]",
                        i, a, b.lo[a], b.hi[a]
                    )));
                }
            }
        }
        Ok(())
    }

    fn bounding(&self, axis: usize) -> (f64, f64) {
        let lo = self.boxes.iter().map(|b| b.lo[axis]).fold(f64::INFINITY, f64::min);
        let hi = self.boxes.iter().map(|b| b.hi[axis]).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    fn contains(&self, x: &[f64; MAX_DIM]) -> bool {
        self.boxes.iter().any(|b| (0..self.dimension).all(|a| x[a] >= b.lo[a] && x[a] <= b.hi[a]))
    }
}

/// How to generate the coordinate lines of the lattice.
#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    /// Uniform subdivision of the bounding box, one count per axis.
    Uniform([usize; MAX_DIM]),
    /// Explicit strictly increasing coordinate arrays per axis.
    Lines(Vec<Vec<f64>>),
}

impl Refinement {
    pub fn uniform_2d(nx: usize, ny: usize) -> Self {
        Refinement::Uniform([nx, ny, 1])
    }

    pub fn uniform_3d(nx: usize, ny: usize, nz: usize) -> Self {
        Refinement::Uniform([nx, ny, nz])
    }
}

/// Primal cell of the structured lattice (active cells only).
#[derive(Debug, Clone)]
pub struct Cell {
    pub lattice: [usize; MAX_DIM],
    pub center: [f64; MAX_DIM],
    pub lengths: [f64; MAX_DIM],
    pub measure: f64,
    /// Per direction: [low-side face id, high-side face id] into `faces[dir]`.
    pub faces: [[usize; 2]; MAX_DIM],
}

/// Primal face; `cell_lo`/`cell_hi` are the active cells on the lower /
/// higher coordinate side along the face normal.
#[derive(Debug, Clone)]
pub struct Face {
    pub lattice: [usize; MAX_DIM],
    pub center: [f64; MAX_DIM],
    pub measure: f64,
    pub cell_lo: Option<usize>,
    pub cell_hi: Option<usize>,
    /// Distance between adjacent cell centers (interior) or from the single
    /// cell center to the face plane (boundary).
    pub dist: f64,
    /// |D_sigma| and the half-cell parts contributed by each side.
    pub dual_measure: f64,
    pub half_lo: f64,
    pub half_hi: f64,
}

impl Face {
    pub fn interior(&self) -> bool {
        self.cell_lo.is_some() && self.cell_hi.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualFaceKind {
    /// Cuts primal cell `cell` orthogonally to the velocity direction.
    InCell { cell: usize },
    /// Half of the primal face `tau` (id within `faces[normal_axis]`).
    Tangent { tau: usize },
}

/// Dual face of the direction-i dual mesh. `face_lo`/`face_hi` identify the
/// dual cells it separates (ids within `faces[i]`); a missing side means the
/// face lies on the domain boundary.
#[derive(Debug, Clone)]
pub struct DualFace {
    pub normal_axis: usize,
    pub measure: f64,
    pub dist: f64,
    pub face_lo: Option<usize>,
    pub face_hi: Option<usize>,
    pub kind: DualFaceKind,
}

impl DualFace {
    pub fn boundary(&self) -> bool {
        self.face_lo.is_none() || self.face_hi.is_none()
    }
}

/// Immutable staggered-grid geometry and topology.
#[derive(Debug)]
pub struct MacGrid {
    pub dim: usize,
    /// Coordinate lines per axis; `lines[a].len() == n[a] + 1` for a < dim.
    pub lines: [Vec<f64>; MAX_DIM],
    /// Lattice cell counts per axis (1 for unused axes).
    pub n: [usize; MAX_DIM],
    pub active: Vec<bool>,
    cell_of_lattice: Vec<Option<usize>>,
    pub cells: Vec<Cell>,
    pub faces: [Vec<Face>; MAX_DIM],
    face_of_lattice: [Vec<Option<usize>>; MAX_DIM],
    pub dual_faces: [Vec<DualFace>; MAX_DIM],
    pub volume: f64,
    h: f64,
    eta: f64,
    /// Non-fatal observations from the build (e.g. degenerate refinement).
    pub warnings: Vec<String>,
}

const SNAP_REL: f64 = 1e-9;

fn is_close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= SNAP_REL * scale.max(1.0)
}

/// Build a MAC grid for the given domain and refinement.
pub fn build_grid(spec: &DomainSpec, refinement: &Refinement) -> Result<MacGrid, GridError> {
    spec.validate()?;
    let dim = spec.dimension;
    let mut warnings = Vec::new();

    // coordinate lines per axis
    let mut lines: [Vec<f64>; MAX_DIM] = [Vec::new(), Vec::new(), Vec::new()];
    match refinement {
        Refinement::Uniform(counts) => {
            for a in 0..dim {
                let cnt = counts[a];
                if cnt == 0 {
                    return Err(GridError::InvalidRefinement(format!(
                        "axis {} has zero cells",
                        a
                    )));
                }
                let (lo, hi) = spec.bounding(a);
                let h = (hi - lo) / cnt as f64;
                lines[a] = (0..=cnt).map(|k| lo + k as f64 * h).collect();
                // snap endpoints exactly
                lines[a][0] = lo;
                lines[a][cnt] = hi;
            }
        }
        Refinement::Lines(explicit) => {
            if explicit.len() < dim {
                return Err(GridError::InvalidRefinement(format!(
                    "expected {} coordinate arrays, got {}",
                    dim,
                    explicit.len()
                )));
            }
            for a in 0..dim {
                let arr = &explicit[a];
                if arr.len() < 2 {
                    return Err(GridError::InvalidRefinement(format!(
                        "axis {} needs at least two coordinates",
                        a
                    )));
                }
                if arr.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(GridError::InvalidRefinement(format!(
                        "axis {} coordinates are not strictly increasing",
                        a
                    )));
                }
                let (lo, hi) = spec.bounding(a);
                let scale = hi - lo;
                if !is_close(arr[0], lo, scale) || !is_close(*arr.last().unwrap(), hi, scale) {
                    return Err(GridError::InvalidRefinement(format!(
                        "axis {} coordinates must span the bounding interval [{}, {}]",
                        a, lo, hi
                    )));
                }
                lines[a] = arr.clone();
            }
        }
    }

    // every box boundary coordinate must be a lattice line
    for b in &spec.boxes {
        for a in 0..dim {
            let scale = spec.bounding(a).1 - spec.bounding(a).0;
            for coord in [b.lo[a], b.hi[a]] {
                if !lines[a].iter().any(|&l| is_close(l, coord, scale)) {
                    return Err(GridError::IncompatibleBoxes { axis: a, coordinate: coord });
                }
            }
        }
    }

    let mut n = [1usize; MAX_DIM];
    for a in 0..dim {
        n[a] = lines[a].len() - 1;
        if n[a] == 1 {
            warnings.push(format!(
                "axis {} has a single cell: no interior faces in that direction",
                a
            ));
        }
    }
    let lattice_len = n[0] * n[1] * n[2];
    let lat_idx = |ix: usize, iy: usize, iz: usize| ix + n[0] * (iy + n[1] * iz);

    // activity mask via the cell-center test (exact because all box
    // boundaries lie on lattice lines)
    let mut active = vec![false; lattice_len];
    for iz in 0..n[2] {
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                let lat = [ix, iy, iz];
                let mut c = [0.0; MAX_DIM];
                for a in 0..dim {
                    c[a] = 0.5 * (lines[a][lat[a]] + lines[a][lat[a] + 1]);
                }
                active[lat_idx(ix, iy, iz)] = spec.contains(&c);
            }
        }
    }
    if !active.iter().any(|&a| a) {
        return Err(GridError::InvalidDomain("no lattice cell lies inside the domain".into()));
    }

    // connectivity of the active cells (face adjacency)
    {
        let start = active.iter().position(|&a| a).unwrap();
        let mut seen = vec![false; lattice_len];
        seen[start] = true;
        let mut stack = vec![start];
        let mut count = 1usize;
        while let Some(idx) = stack.pop() {
            let iz = idx / (n[0] * n[1]);
            let iy = (idx / n[0]) % n[1];
            let ix = idx % n[0];
            let lat = [ix, iy, iz];
            for a in 0..dim {
                for s in [-1isize, 1] {
                    let mut nb = lat;
                    let v = lat[a] as isize + s;
                    if v < 0 || v >= n[a] as isize {
                        continue;
                    }
                    nb[a] = v as usize;
                    let nidx = lat_idx(nb[0], nb[1], nb[2]);
                    if active[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        count += 1;
                        stack.push(nidx);
                    }
                }
            }
        }
        let total = active.iter().filter(|&&a| a).count();
        if count != total {
            // count the components for the error message
            let mut comps = 1;
            let mut seen2 = seen;
            while let Some(s) = (0..lattice_len).find(|&i| active[i] && !seen2[i]) {
                comps += 1;
                let mut stack = vec![s];
                seen2[s] = true;
                while let Some(idx) = stack.pop() {
                    let iz = idx / (n[0] * n[1]);
                    let iy = (idx / n[0]) % n[1];
                    let ix = idx % n[0];
                    let lat = [ix, iy, iz];
                    for a in 0..dim {
                        for s in [-1isize, 1] {
                            let mut nb = lat;
                            let v = lat[a] as isize + s;
                            if v < 0 || v >= n[a] as isize {
                                continue;
                            }
                            nb[a] = v as usize;
                            let nidx = lat_idx(nb[0], nb[1], nb[2]);
                            if active[nidx] && !seen2[nidx] {
                                seen2[nidx] = true;
                                stack.push(nidx);
                            }
                        }
                    }
                }
            }
            return Err(GridError::Disconnected { components: comps });
        }
    }

    // cells
    let mut cell_of_lattice = vec![None; lattice_len];
    let mut cells = Vec::new();
    for iz in 0..n[2] {
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                let idx = lat_idx(ix, iy, iz);
                if !active[idx] {
                    continue;
                }
                let lat = [ix, iy, iz];
                let mut center = [0.0; MAX_DIM];
                let mut lengths = [1.0; MAX_DIM];
                for a in 0..dim {
                    lengths[a] = lines[a][lat[a] + 1] - lines[a][lat[a]];
                    center[a] = 0.5 * (lines[a][lat[a]] + lines[a][lat[a] + 1]);
                }
                let measure: f64 = lengths[..dim].iter().product();
                cell_of_lattice[idx] = Some(cells.len());
                cells.push(Cell {
                    lattice: lat,
                    center,
                    lengths,
                    measure,
                    faces: [[usize::MAX; 2]; MAX_DIM],
                });
            }
        }
    }

    // faces per direction
    let mut faces: [Vec<Face>; MAX_DIM] = [Vec::new(), Vec::new(), Vec::new()];
    let mut face_of_lattice: [Vec<Option<usize>>; MAX_DIM] = [Vec::new(), Vec::new(), Vec::new()];
    for dir in 0..dim {
        let mut dims = n;
        dims[dir] += 1;
        let flen = dims[0] * dims[1] * dims[2];
        let fidx = |lat: [usize; MAX_DIM]| lat[0] + dims[0] * (lat[1] + dims[1] * lat[2]);
        face_of_lattice[dir] = vec![None; flen];
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let lat = [ix, iy, iz];
                    // adjacent lattice cells on either side along `dir`
                    let lo_cell = if lat[dir] > 0 {
                        let mut c = lat;
                        c[dir] -= 1;
                        cell_of_lattice[lat_idx(c[0], c[1], c[2])]
                    } else {
                        None
                    };
                    let hi_cell = if lat[dir] < n[dir] {
                        cell_of_lattice[lat_idx(lat[0], lat[1], lat[2])]
                    } else {
                        None
                    };
                    if lo_cell.is_none() && hi_cell.is_none() {
                        continue;
                    }
                    let mut center = [0.0; MAX_DIM];
                    let mut measure = 1.0;
                    for a in 0..dim {
                        if a == dir {
                            center[a] = lines[a][lat[a]];
                        } else {
                            center[a] = 0.5 * (lines[a][lat[a]] + lines[a][lat[a] + 1]);
                            measure *= lines[a][lat[a] + 1] - lines[a][lat[a]];
                        }
                    }
                    let half = |c: Option<usize>| {
                        c.map(|id| 0.5 * cells[id].measure).unwrap_or(0.0)
                    };
                    let half_lo = half(lo_cell);
                    let half_hi = half(hi_cell);
                    let dist = match (lo_cell, hi_cell) {
                        (Some(k), Some(l)) => cells[l].center[dir] - cells[k].center[dir],
                        (Some(k), None) => center[dir] - cells[k].center[dir],
                        (None, Some(l)) => cells[l].center[dir] - center[dir],
                        (None, None) => unreachable!(),
                    };
                    let id = faces[dir].len();
                    face_of_lattice[dir][fidx(lat)] = Some(id);
                    if let Some(k) = lo_cell {
                        cells[k].faces[dir][1] = id;
                    }
                    if let Some(l) = hi_cell {
                        cells[l].faces[dir][0] = id;
                    }
                    faces[dir].push(Face {
                        lattice: lat,
                        center,
                        measure,
                        cell_lo: lo_cell,
                        cell_hi: hi_cell,
                        dist,
                        dual_measure: half_lo + half_hi,
                        half_lo,
                        half_hi,
                    });
                }
            }
        }
    }

    // dual faces per velocity direction
    let mut dual_faces: [Vec<DualFace>; MAX_DIM] = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..dim {
        // in-cell dual faces: one per active cell
        for (cid, cell) in cells.iter().enumerate() {
            dual_faces[i].push(DualFace {
                normal_axis: i,
                measure: cell.measure / cell.lengths[i],
                dist: cell.lengths[i],
                face_lo: Some(cell.faces[i][0]),
                face_hi: Some(cell.faces[i][1]),
                kind: DualFaceKind::InCell { cell: cid },
            });
        }
        // tangent dual faces: halves of faces of the other directions. A
        // side whose cell is missing may still have a partner face on the
        // same lattice line (re-entrant corners); those pair at center
        // distance like interior faces.
        for j in 0..dim {
            if j == i {
                continue;
            }
            let mut fdims = n;
            fdims[i] += 1;
            let flookup = |lat: [usize; MAX_DIM]| -> Option<usize> {
                face_of_lattice[i][lat[0] + fdims[0] * (lat[1] + fdims[1] * lat[2])]
            };
            for (tid, tau) in faces[j].iter().enumerate() {
                for side in 0..2 {
                    // the i-faces at this end of tau, in the cell rows on
                    // either side of tau's plane
                    let partner = |row_cell: Option<usize>, below: bool| -> Option<usize> {
                        if let Some(c) = row_cell {
                            return Some(cells[c].faces[i][side]);
                        }
                        if below && tau.lattice[j] == 0 {
                            return None;
                        }
                        let mut lat = tau.lattice;
                        lat[i] += side;
                        if below {
                            lat[j] -= 1;
                        } else if lat[j] >= n[j] {
                            return None;
                        }
                        flookup(lat)
                    };
                    let face_lo = partner(tau.cell_lo, true);
                    let face_hi = partner(tau.cell_hi, false);
                    if face_lo.is_none() && face_hi.is_none() {
                        continue;
                    }
                    let plane = tau.center[j];
                    let dist = match (face_lo, face_hi) {
                        (Some(a), Some(b)) => {
                            faces[i][b].center[j] - faces[i][a].center[j]
                        }
                        (Some(a), None) => plane - faces[i][a].center[j],
                        (None, Some(b)) => faces[i][b].center[j] - plane,
                        (None, None) => unreachable!(),
                    };
                    // half of tau along axis i, full extent across the rest
                    let measure = 0.5 * tau.measure;
                    dual_faces[i].push(DualFace {
                        normal_axis: j,
                        measure,
                        dist,
                        face_lo,
                        face_hi,
                        kind: DualFaceKind::Tangent { tau: tid },
                    });
                }
            }
        }
    }

    // global mesh metrics
    let volume: f64 = cells.iter().map(|c| c.measure).sum();
    let h = cells
        .iter()
        .map(|c| (0..dim).map(|a| c.lengths[a] * c.lengths[a]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let min_len = cells
        .iter()
        .flat_map(|c| c.lengths[..dim].iter().copied())
        .fold(f64::INFINITY, f64::min);
    let eta = min_len / h;

    Ok(MacGrid {
        dim,
        lines,
        n,
        active,
        cell_of_lattice,
        cells,
        faces,
        face_of_lattice,
        dual_faces,
        volume,
        h,
        eta,
        warnings,
    })
}

impl MacGrid {
    /// Largest cell diameter.
    pub fn mesh_size(&self) -> f64 {
        self.h
    }

    /// Smallest distance between opposite face centers of a cell, relative
    /// to the mesh size.
    pub fn regularity(&self) -> f64 {
        self.eta
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_faces(&self, dir: usize) -> usize {
        self.faces[dir].len()
    }

    pub fn n_interior_faces(&self, dir: usize) -> usize {
        self.faces[dir].iter().filter(|f| f.interior()).count()
    }

    pub fn cell_at_lattice(&self, lat: [usize; MAX_DIM]) -> Option<usize> {
        let idx = lat[0] + self.n[0] * (lat[1] + self.n[1] * lat[2]);
        self.cell_of_lattice.get(idx).copied().flatten()
    }

    pub fn face_at_lattice(&self, dir: usize, lat: [usize; MAX_DIM]) -> Option<usize> {
        let mut dims = self.n;
        dims[dir] += 1;
        let idx = lat[0] + dims[0] * (lat[1] + dims[1] * lat[2]);
        self.face_of_lattice[dir].get(idx).copied().flatten()
    }

    /// The up-to-four direction-i faces of the two cells sharing the
    /// direction-j face `sigma` (the neighbor set used by the full-grid
    /// velocity reconstruction). Missing entries correspond to cells that
    /// do not exist; exterior faces are listed like any other.
    pub fn neighbor_faces(&self, j: usize, sigma: usize, i: usize) -> [Option<usize>; 4] {
        debug_assert_ne!(i, j);
        let f = &self.faces[j][sigma];
        let mut out = [None; 4];
        for (slot, cell) in [f.cell_lo, f.cell_hi].into_iter().enumerate() {
            if let Some(c) = cell {
                out[2 * slot] = Some(self.cells[c].faces[i][0]);
                out[2 * slot + 1] = Some(self.cells[c].faces[i][1]);
            }
        }
        out
    }

    /// Structured one-page summary of the grid.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("dimension: {}\n", self.dim));
        s.push_str(&format!("lattice: {:?}\n", &self.n[..self.dim]));
        s.push_str(&format!("cells: {}\n", self.n_cells()));
        for dir in 0..self.dim {
            s.push_str(&format!(
                "faces[{}]: {} ({} interior)\n",
                dir,
                self.n_faces(dir),
                self.n_interior_faces(dir)
            ));
            s.push_str(&format!("dual_faces[{}]: {}\n", dir, self.dual_faces[dir].len()));
        }
        s.push_str(&format!("volume: {:.16e}\n", self.volume));
        s.push_str(&format!("mesh_size: {:.16e}\n", self.mesh_size()));
        s.push_str(&format!("regularity: {:.16e}\n", self.regularity()));
        for w in &self.warnings {
            s.push_str(&format!("warning: {}\n", w));
        }
        s
    }
}
