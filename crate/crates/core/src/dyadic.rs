//! Finite dyadic lattices on `[0,1)^N`, vector-valued grid functions, averages,
//! martingale differences and the localized dyadic maximal function.
//!
//! Finest cells are stored in Morton (Z-order), so every dyadic cube owns a
//! contiguous range of cells.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_LEVEL_1D: u8 = 14;
pub const MAX_LEVEL_2D: u8 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DyadicError {
    #[error("dimension {0} not supported (expected 1 or 2)")]
    BadDimension(u8),
    #[error("level {level} exceeds the cap {max} for this dimension")]
    LevelTooDeep { level: u8, max: u8 },
    #[error("cube {0:?} is not in the lattice")]
    CubeOutsideLattice(DyadicCube),
    #[error("cube {0:?} is at the finest level and has no children")]
    FinestLevel(DyadicCube),
    #[error("separation class (k={k}, r={r}) invalid: need k <= r")]
    BadSeparation { k: u8, r: u8 },
    #[error("grid function has {got} values, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("vector dimension {0} outside [1, 4]")]
    BadVectorDim(usize),
    #[error("vector dimensions differ: {0} vs {1}")]
    VectorDimMismatch(usize, usize),
    #[error("grid functions live on different lattices")]
    LatticeMismatch,
    #[error("grid function has a non-finite entry at cell {0}")]
    NonFinite(usize),
    #[error("operation needs a scalar function, got d = {0}")]
    NotScalar(usize),
}

/// A dyadic cube `Π [i_k 2^{-l}, (i_k+1) 2^{-l})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub dim: u8,
    pub level: u8,
    pub index: [u32; 2],
}

impl DyadicCube {
    pub fn root(dim: u8) -> Self {
        DyadicCube {
            dim,
            level: 0,
            index: [0, 0],
        }
    }

    pub fn new(dim: u8, level: u8, index: [u32; 2]) -> Result<Self, DyadicError> {
        if !(1..=2).contains(&dim) {
            return Err(DyadicError::BadDimension(dim));
        }
        let cube = DyadicCube { dim, level, index };
        if level > 31
            || index[0] >= (1u32 << level)
            || (dim == 2 && index[1] >= (1u32 << level))
            || (dim == 1 && index[1] != 0)
        {
            return Err(DyadicError::CubeOutsideLattice(cube));
        }
        Ok(cube)
    }

    /// Cube at `level` with Morton code `morton`.
    pub fn from_morton(dim: u8, level: u8, morton: u64) -> Self {
        let index = if dim == 1 {
            [morton as u32, 0]
        } else {
            deinterleave(morton)
        };
        DyadicCube { dim, level, index }
    }

    pub fn side(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn volume(&self) -> f64 {
        (-((self.dim as i32 * self.level as i32) as f64)).exp2()
    }

    pub fn morton(&self) -> u64 {
        if self.dim == 1 {
            self.index[0] as u64
        } else {
            interleave(self.index[0], self.index[1])
        }
    }

    /// Position in the level-by-level enumeration of all cubes.
    pub fn id(&self) -> u64 {
        let n = self.dim as u32;
        let offset = ((1u64 << (n * self.level as u32)) - 1) / ((1u64 << n) - 1);
        offset + self.morton()
    }

    pub fn parent(&self) -> Option<DyadicCube> {
        (self.level > 0).then(|| DyadicCube {
            dim: self.dim,
            level: self.level - 1,
            index: [self.index[0] >> 1, self.index[1] >> 1],
        })
    }

    pub fn ancestor_at(&self, level: u8) -> Option<DyadicCube> {
        (level <= self.level).then(|| {
            let s = self.level - level;
            DyadicCube {
                dim: self.dim,
                level,
                index: [self.index[0] >> s, self.index[1] >> s],
            }
        })
    }

    /// Child `i` in Morton order, `i < 2^N`.
    pub fn child(&self, i: usize) -> DyadicCube {
        debug_assert!(i < (1 << self.dim));
        let (bx, by) = (i as u32 & 1, (i as u32 >> 1) & 1);
        DyadicCube {
            dim: self.dim,
            level: self.level + 1,
            index: [2 * self.index[0] + bx, if self.dim == 2 { 2 * self.index[1] + by } else { 0 }],
        }
    }

    pub fn children(&self) -> Vec<DyadicCube> {
        (0..1usize << self.dim).map(|i| self.child(i)).collect()
    }

    /// Descendants `gen` generations down, in Morton order.
    pub fn descendants(&self, gen: u8) -> Vec<DyadicCube> {
        let n = self.dim as u32;
        let base = self.morton() << (n * gen as u32);
        (0..1u64 << (n * gen as u32))
            .map(|m| DyadicCube::from_morton(self.dim, self.level + gen, base + m))
            .collect()
    }

    /// `other ⊆ self`.
    pub fn contains(&self, other: &DyadicCube) -> bool {
        other.dim == self.dim
            && other.level >= self.level
            && other.ancestor_at(self.level).as_ref() == Some(self)
    }

    /// Finest cells of a level-`max_level` grid covered by this cube.
    pub fn cell_range(&self, max_level: u8) -> Range<usize> {
        let shift = self.dim as u32 * (max_level - self.level) as u32;
        let start = (self.morton() << shift) as usize;
        start..start + (1usize << shift)
    }

    pub fn lower_corner(&self) -> [f64; 2] {
        [self.index[0] as f64 * self.side(), self.index[1] as f64 * self.side()]
    }
}

fn interleave(x: u32, y: u32) -> u64 {
    let mut m = 0u64;
    for b in 0..32 {
        m |= (((x >> b) & 1) as u64) << (2 * b);
        m |= (((y >> b) & 1) as u64) << (2 * b + 1);
    }
    m
}

fn deinterleave(m: u64) -> [u32; 2] {
    let mut x = 0u32;
    let mut y = 0u32;
    for b in 0..32 {
        x |= (((m >> (2 * b)) & 1) as u32) << b;
        y |= (((m >> (2 * b + 1)) & 1) as u32) << b;
    }
    [x, y]
}

/// Dyadic lattice of depth `max_level` on `[0,1)^dim`, optionally restricted to
/// the sublattice of levels `k + (r+1) j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DyadicLattice {
    pub dim: u8,
    pub max_level: u8,
    pub separation: Option<(u8, u8)>,
}

impl DyadicLattice {
    pub fn new(dim: u8, max_level: u8) -> Result<Self, DyadicError> {
        let max = match dim {
            1 => MAX_LEVEL_1D,
            2 => MAX_LEVEL_2D,
            _ => return Err(DyadicError::BadDimension(dim)),
        };
        if max_level > max {
            return Err(DyadicError::LevelTooDeep {
                level: max_level,
                max,
            });
        }
        Ok(DyadicLattice {
            dim,
            max_level,
            separation: None,
        })
    }

    pub fn with_separation(self, k: u8, r: u8) -> Result<Self, DyadicError> {
        if k > r {
            return Err(DyadicError::BadSeparation { k, r });
        }
        Ok(DyadicLattice {
            separation: Some((k, r)),
            ..self
        })
    }

    /// The same grid without a separation class.
    pub fn full(&self) -> Self {
        DyadicLattice {
            separation: None,
            ..*self
        }
    }

    pub fn n_cells(&self) -> usize {
        1usize << (self.dim as u32 * self.max_level as u32)
    }

    pub fn cells_per_side(&self) -> usize {
        1usize << self.max_level
    }

    pub fn cell_volume(&self) -> f64 {
        1.0 / self.n_cells() as f64
    }

    pub fn cell_side(&self) -> f64 {
        1.0 / self.cells_per_side() as f64
    }

    pub fn root(&self) -> DyadicCube {
        DyadicCube::root(self.dim)
    }

    pub fn is_member_level(&self, level: u8) -> bool {
        if level > self.max_level {
            return false;
        }
        match self.separation {
            None => true,
            Some((k, r)) => level >= k && (level - k).is_multiple_of(r + 1),
        }
    }

    pub fn member_levels(&self) -> Vec<u8> {
        (0..=self.max_level)
            .filter(|&l| self.is_member_level(l))
            .collect()
    }

    /// Whether `cube` belongs to this (sub)lattice.
    pub fn contains_cube(&self, cube: &DyadicCube) -> bool {
        self.in_grid(cube) && self.is_member_level(cube.level)
    }

    /// Whether `cube` is a dyadic cube of the underlying full grid.
    pub fn in_grid(&self, cube: &DyadicCube) -> bool {
        cube.dim == self.dim && cube.level <= self.max_level
    }

    pub fn check_cube(&self, cube: &DyadicCube) -> Result<(), DyadicError> {
        if self.in_grid(cube) {
            Ok(())
        } else {
            Err(DyadicError::CubeOutsideLattice(*cube))
        }
    }

    pub fn n_cubes_at(&self, level: u8) -> usize {
        1usize << (self.dim as u32 * level as u32)
    }

    pub fn cubes_at_level(&self, level: u8) -> impl Iterator<Item = DyadicCube> + '_ {
        let dim = self.dim;
        (0..self.n_cubes_at(level) as u64).map(move |m| DyadicCube::from_morton(dim, level, m))
    }

    /// All cubes of the full grid, coarse to fine.
    pub fn all_cubes(&self) -> impl Iterator<Item = DyadicCube> + '_ {
        (0..=self.max_level).flat_map(move |l| self.cubes_at_level(l))
    }

    pub fn cell_cube(&self, cell: usize) -> DyadicCube {
        DyadicCube::from_morton(self.dim, self.max_level, cell as u64)
    }

    /// Integer coordinates of a finest cell.
    pub fn cell_coords(&self, cell: usize) -> [u32; 2] {
        self.cell_cube(cell).index
    }

    pub fn cell_from_coords(&self, coords: [u32; 2]) -> usize {
        DyadicCube {
            dim: self.dim,
            level: self.max_level,
            index: coords,
        }
        .morton() as usize
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let c = self.cell_coords(cell);
        let h = self.cell_side();
        let y = if self.dim == 2 { (c[1] as f64 + 0.5) * h } else { 0.0 };
        [(c[0] as f64 + 0.5) * h, y]
    }

    /// Smallest member cube of this (sub)lattice containing `cube`, if any.
    pub fn enclosing_member(&self, cube: &DyadicCube) -> Option<DyadicCube> {
        (0..=cube.level)
            .rev()
            .find(|&l| self.is_member_level(l))
            .and_then(|l| cube.ancestor_at(l))
    }
}

/// Axis-aligned box of finest cells, `lo ≤ coords < hi` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridBox {
    pub lo: [u32; 2],
    pub hi: [u32; 2],
}

impl GridBox {
    pub fn from_cube(cube: &DyadicCube, max_level: u8) -> Self {
        let s = max_level - cube.level;
        let lo = [cube.index[0] << s, cube.index[1] << s];
        let w = 1u32 << s;
        let hi = [lo[0] + w, if cube.dim == 2 { lo[1] + w } else { 1 }];
        GridBox { lo, hi }
    }

    /// The concentric dilate `3Q`, clipped to the unit cube.
    pub fn tripled(cube: &DyadicCube, max_level: u8) -> Self {
        let b = GridBox::from_cube(cube, max_level);
        let n = 1u32 << max_level;
        let w = b.hi[0] - b.lo[0];
        let mut out = b;
        for k in 0..cube.dim as usize {
            out.lo[k] = b.lo[k].saturating_sub(w);
            out.hi[k] = (b.hi[k] + w).min(n);
        }
        out
    }

    pub fn n_cells(&self) -> usize {
        ((self.hi[0] - self.lo[0]) as usize) * ((self.hi[1] - self.lo[1]) as usize)
    }

    pub fn volume(&self, lattice: &DyadicLattice) -> f64 {
        self.n_cells() as f64 * lattice.cell_volume()
    }

    pub fn contains_coords(&self, c: [u32; 2]) -> bool {
        c[0] >= self.lo[0] && c[0] < self.hi[0] && c[1] >= self.lo[1] && c[1] < self.hi[1]
    }

    pub fn contains_cell(&self, lattice: &DyadicLattice, cell: usize) -> bool {
        self.contains_coords(lattice.cell_coords(cell))
    }

    pub fn contains_box(&self, other: &GridBox) -> bool {
        (0..2).all(|k| other.lo[k] >= self.lo[k] && other.hi[k] <= self.hi[k])
    }

    pub fn intersects(&self, other: &GridBox) -> bool {
        (0..2).all(|k| other.lo[k] < self.hi[k] && self.lo[k] < other.hi[k])
    }

    /// Finest cells in the box (cell indices in Morton order of the grid).
    pub fn cells(&self, lattice: &DyadicLattice) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_cells());
        for y in self.lo[1]..self.hi[1] {
            for x in self.lo[0]..self.hi[0] {
                out.push(lattice.cell_from_coords([x, y]));
            }
        }
        out.sort_unstable();
        out
    }

    /// Longest side measured in cells.
    pub fn max_side_cells(&self) -> u32 {
        (self.hi[0] - self.lo[0]).max(self.hi[1] - self.lo[1])
    }
}

/// `ℝ^d`-valued function, constant on each finest cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    d: usize,
    lattice: DyadicLattice,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(lattice: DyadicLattice, d: usize, values: Vec<f64>) -> Result<Self, DyadicError> {
        if !(1..=4).contains(&d) {
            return Err(DyadicError::BadVectorDim(d));
        }
        let expected = lattice.n_cells() * d;
        if values.len() != expected {
            return Err(DyadicError::LengthMismatch {
                got: values.len(),
                expected,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DyadicError::NonFinite(i / d));
        }
        Ok(GridFunction { d, lattice, values })
    }

    pub fn zeros(lattice: DyadicLattice, d: usize) -> Self {
        assert!((1..=4).contains(&d));
        GridFunction {
            d,
            lattice,
            values: vec![0.0; lattice.n_cells() * d],
        }
    }

    pub fn constant(lattice: DyadicLattice, v: &[f64]) -> Self {
        let mut f = GridFunction::zeros(lattice, v.len());
        for cell in 0..lattice.n_cells() {
            f.cell_mut(cell).copy_from_slice(v);
        }
        f
    }

    pub fn scalar(lattice: DyadicLattice, values: Vec<f64>) -> Result<Self, DyadicError> {
        GridFunction::new(lattice, 1, values)
    }

    pub fn from_cells(lattice: DyadicLattice, d: usize, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut g = GridFunction::zeros(lattice, d);
        for cell in 0..lattice.n_cells() {
            f(cell, g.cell_mut(cell));
        }
        g
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.d..(cell + 1) * self.d]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.values[cell * self.d..(cell + 1) * self.d]
    }

    pub fn n_cells(&self) -> usize {
        self.lattice.n_cells()
    }

    fn check_compatible(&self, other: &GridFunction) -> Result<(), DyadicError> {
        if self.lattice.full() != other.lattice.full() {
            return Err(DyadicError::LatticeMismatch);
        }
        if self.d != other.d {
            return Err(DyadicError::VectorDimMismatch(self.d, other.d));
        }
        Ok(())
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction, DyadicError> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(GridFunction { d: self.d, lattice: self.lattice, values })
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction, DyadicError> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(GridFunction { d: self.d, lattice: self.lattice, values })
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        GridFunction {
            d: self.d,
            lattice: self.lattice,
            values: self.values.iter().map(|v| s * v).collect(),
        }
    }

    /// Scalar function `x ↦ f(x)·e`.
    pub fn project(&self, e: &[f64]) -> GridFunction {
        GridFunction {
            d: 1,
            lattice: self.lattice,
            values: (0..self.n_cells())
                .map(|c| self.cell(c).iter().zip(e).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    pub fn component(&self, k: usize) -> GridFunction {
        GridFunction {
            d: 1,
            lattice: self.lattice,
            values: (0..self.n_cells()).map(|c| self.cell(c)[k]).collect(),
        }
    }

    /// Cellwise Euclidean norm.
    pub fn pointwise_norm(&self) -> GridFunction {
        GridFunction {
            d: 1,
            lattice: self.lattice,
            values: (0..self.n_cells())
                .map(|c| self.cell(c).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        }
    }

    /// `f · 1_range`.
    pub fn restrict(&self, cells: Range<usize>) -> GridFunction {
        let mut g = GridFunction::zeros(self.lattice, self.d);
        let d = self.d;
        g.values[cells.start * d..cells.end * d]
            .copy_from_slice(&self.values[cells.start * d..cells.end * d]);
        g
    }

    pub fn restrict_box(&self, b: &GridBox) -> GridFunction {
        let mut g = GridFunction::zeros(self.lattice, self.d);
        for cell in b.cells(&self.lattice) {
            g.cell_mut(cell).copy_from_slice(self.cell(cell));
        }
        g
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.n_cells())
            .map(|c| self.cell(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// `∫ f·g` with Lebesgue measure.
    pub fn inner(&self, other: &GridFunction) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
            * self.lattice.cell_volume()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Smallest dyadic cube containing every cell where `f ≠ 0`.
    pub fn support_cube(&self) -> Option<DyadicCube> {
        let nz: Vec<usize> = (0..self.n_cells())
            .filter(|&c| self.cell(c).iter().any(|v| *v != 0.0))
            .collect();
        let (first, last) = (*nz.first()?, *nz.last()?);
        let j = self.lattice.max_level;
        let a = self.lattice.cell_cube(first);
        let b = self.lattice.cell_cube(last);
        (0..=j)
            .rev()
            .map(|l| a.ancestor_at(l).unwrap())
            .find(|q| q.contains(&b))
    }

    /// Exact average over `q`: cell sum in index order times `2^{-N(J-l)}`.
    pub fn average(&self, q: &DyadicCube) -> Result<Vec<f64>, DyadicError> {
        self.lattice.check_cube(q)?;
        let range = q.cell_range(self.lattice.max_level);
        let w = 1.0 / range.len() as f64;
        let mut out = vec![0.0; self.d];
        for cell in range {
            for (o, v) in out.iter_mut().zip(self.cell(cell)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= w);
        Ok(out)
    }

    /// Average of `|f|` (cellwise Euclidean norm) over `q`.
    pub fn average_abs(&self, q: &DyadicCube) -> Result<f64, DyadicError> {
        self.lattice.check_cube(q)?;
        let range = q.cell_range(self.lattice.max_level);
        let w = 1.0 / range.len() as f64;
        Ok(range
            .map(|c| self.cell(c).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            * w)
    }

    pub fn pyramid(&self) -> AveragePyramid {
        AveragePyramid::new(self)
    }
}

/// Averages of a grid function over every dyadic cube, finest level first
/// computed and coarser levels by exact child means.
#[derive(Clone, Debug)]
pub struct AveragePyramid {
    d: usize,
    dim: u8,
    levels: Vec<Vec<f64>>,
}

impl AveragePyramid {
    pub fn new(f: &GridFunction) -> Self {
        let j = f.lattice.max_level as usize;
        let d = f.d;
        let fan = 1usize << f.lattice.dim;
        let mut levels = vec![Vec::new(); j + 1];
        levels[j] = f.values.clone();
        for l in (0..j).rev() {
            let fine = &levels[l + 1];
            let n = fine.len() / d / fan;
            let mut coarse = vec![0.0; n * d];
            for m in 0..n {
                for c in 0..fan {
                    for k in 0..d {
                        coarse[m * d + k] += fine[(m * fan + c) * d + k];
                    }
                }
                for k in 0..d {
                    coarse[m * d + k] /= fan as f64;
                }
            }
            levels[l] = coarse;
        }
        AveragePyramid {
            d,
            dim: f.lattice.dim,
            levels,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, q: &DyadicCube) -> &[f64] {
        debug_assert_eq!(q.dim, self.dim);
        let m = q.morton() as usize;
        &self.levels[q.level as usize][m * self.d..(m + 1) * self.d]
    }

    pub fn level(&self, l: u8) -> &[f64] {
        &self.levels[l as usize]
    }
}

/// `Δ_R b`: child average minus `⟨b⟩_R` on each child of `R`, zero elsewhere.
pub fn martingale_difference(b: &GridFunction, r: &DyadicCube) -> Result<GridFunction, DyadicError> {
    b.lattice.check_cube(r)?;
    if r.level >= b.lattice.max_level {
        return Err(DyadicError::FinestLevel(*r));
    }
    let j = b.lattice.max_level;
    let parent = b.average(r)?;
    let mut out = GridFunction::zeros(b.lattice, b.d);
    for ch in r.children() {
        let avg = b.average(&ch)?;
        let diff: Vec<f64> = avg.iter().zip(&parent).map(|(a, p)| a - p).collect();
        for cell in ch.cell_range(j) {
            out.cell_mut(cell).copy_from_slice(&diff);
        }
    }
    Ok(out)
}

/// `M_Q f(x) = max_{R ∈ D(Q), R ∋ x} |⟨f⟩_R|` on `Q`, zero outside.
pub fn maximal_function(f: &GridFunction, q: &DyadicCube) -> Result<GridFunction, DyadicError> {
    if f.d != 1 {
        return Err(DyadicError::NotScalar(f.d));
    }
    f.lattice.check_cube(q)?;
    let pyr = f.pyramid();
    Ok(maximal_function_with(&pyr, &f.lattice, q))
}

pub(crate) fn maximal_function_with(
    pyr: &AveragePyramid,
    lattice: &DyadicLattice,
    q: &DyadicCube,
) -> GridFunction {
    let j = lattice.max_level;
    let mut out = GridFunction::zeros(*lattice, 1);
    let range = q.cell_range(j);
    let fan_bits = lattice.dim as u32;
    // Running max down each root-to-cell path, one level at a time.
    let mut running = vec![pyr.get(q)[0].abs()];
    for l in (q.level + 1)..=j {
        let base = q.morton() << (fan_bits * (l - q.level) as u32);
        let lev = pyr.level(l);
        running = (0..running.len() << fan_bits)
            .map(|i| running[i >> fan_bits].max(lev[base as usize + i].abs()))
            .collect();
    }
    out.values_mut()[range].copy_from_slice(&running);
    out
}
