//! Dyadic shift operators (generalized big Haar shifts, martingale transforms,
//! paraproducts), their separation and truncation, and a discrete truncated
//! Calderón–Zygmund kernel on the line with its maximal companions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{DyadicCube, DyadicError, DyadicLattice, GridBox, GridFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
    #[error("function lives on a different lattice than the operator")]
    LatticeMismatch,
    #[error("block for cube {0:?} does not fit: level + complexity + 1 exceeds the grid depth")]
    BlockTooDeep(DyadicCube),
    #[error("block for cube {cube:?} has {got} entries, expected {expected}")]
    BlockShape { cube: DyadicCube, got: usize, expected: usize },
    #[error("duplicate block for cube {0:?}")]
    DuplicateBlock(DyadicCube),
    #[error("cubes {0:?} and {1:?} overlap")]
    Overlapping(DyadicCube, DyadicCube),
    #[error("operator needs a one-dimensional grid")]
    NeedsLine,
    #[error("power iteration did not converge after {iterations} steps (estimates {previous:.6e}, {last:.6e})")]
    NoConvergence { iterations: usize, previous: f64, last: f64 },
    #[error("symbol has {got} values, lattice has {expected} cells")]
    SymbolLength { got: usize, expected: usize },
}

/// Linear operator on grid functions acting componentwise on `ℝ^d` values.
pub trait GridOperator: Send + Sync {
    fn lattice(&self) -> &DyadicLattice;
    fn apply(&self, f: &GridFunction) -> Result<GridFunction, OperatorError>;
    fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction, OperatorError>;
}

fn check_lattice(op: &DyadicLattice, f: &GridFunction) -> Result<(), OperatorError> {
    let fl = f.lattice();
    if fl.dim != op.dim || fl.max_level != op.max_level {
        return Err(OperatorError::LatticeMismatch);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct IdentityOperator {
    pub lattice: DyadicLattice,
}

impl GridOperator for IdentityOperator {
    fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    fn apply(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        check_lattice(&self.lattice, f)?;
        Ok(f.clone())
    }

    fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        self.apply(f)
    }
}

/// Kernel of one `T_Q`: value on `R × S` for `R, S` the descendants of `Q`
/// `r+1` generations down, row-major in Morton order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftBlock {
    pub cube: DyadicCube,
    pub kernel: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncationMode {
    /// Keep `T_Q` for `Q` inside some cube of the family.
    Inside,
    /// Keep `T_Q` for `Q` inside none of them.
    Outside,
}

/// `Σ_Q T_Q` with kernels constant on blocks `r+1` generations below `Q`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HaarShift {
    lattice: DyadicLattice,
    complexity: u8,
    big: bool,
    blocks: Vec<ShiftBlock>,
}

impl HaarShift {
    pub fn new(lattice: DyadicLattice, complexity: u8, big: bool, mut blocks: Vec<ShiftBlock>) -> Result<Self, OperatorError> {
        let lattice = lattice.full();
        let m = 1usize << (lattice.dim as usize * (complexity as usize + 1));
        blocks.sort_by_key(|b| b.cube.id());
        for w in blocks.windows(2) {
            if w[0].cube == w[1].cube {
                return Err(OperatorError::DuplicateBlock(w[0].cube));
            }
        }
        for b in &blocks {
            lattice.check_cube(&b.cube)?;
            if b.cube.level as usize + complexity as usize + 1 > lattice.max_level as usize {
                return Err(OperatorError::BlockTooDeep(b.cube));
            }
            if b.kernel.len() != m * m {
                return Err(OperatorError::BlockShape {
                    cube: b.cube,
                    got: b.kernel.len(),
                    expected: m * m,
                });
            }
        }
        Ok(HaarShift {
            lattice,
            complexity,
            big,
            blocks,
        })
    }

    /// Random blocks on every cube deep enough to carry one: entries uniform in
    /// `[-1,1]`, doubly centred when `big`, then scaled to sup norm `|Q|^{-1}`.
    pub fn random(lattice: DyadicLattice, complexity: u8, big: bool, seed: u64) -> Result<Self, OperatorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1usize << (lattice.dim as usize * (complexity as usize + 1));
        let mut blocks = Vec::new();
        let top = lattice.max_level as i32 - complexity as i32 - 1;
        for l in 0..=top {
            for cube in lattice.full().cubes_at_level(l as u8) {
                let mut k: Vec<f64> = (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if big {
                    double_center(&mut k, m);
                }
                let mx = k.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                if mx > 0.0 {
                    let s = 1.0 / (mx * cube.volume());
                    k.iter_mut().for_each(|v| *v *= s);
                }
                blocks.push(ShiftBlock { cube, kernel: k });
            }
        }
        HaarShift::new(lattice, complexity, big, blocks)
    }

    /// `Σ_Q σ_Q Δ_Q / (2^N − 1)` with random signs: a complexity-0 big shift.
    pub fn martingale_transform(lattice: DyadicLattice, seed: u64) -> Result<Self, OperatorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1usize << lattice.dim;
        let mut blocks = Vec::new();
        for l in 0..lattice.max_level {
            for cube in lattice.full().cubes_at_level(l) {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let s = sign / ((m as f64 - 1.0) * cube.volume());
                let kernel = (0..m * m)
                    .map(|ij| s * (if ij / m == ij % m { m as f64 } else { 0.0 } - 1.0))
                    .collect();
                blocks.push(ShiftBlock { cube, kernel });
            }
        }
        HaarShift::new(lattice, 0, true, blocks)
    }

    /// `Π f = Σ_Q ⟨f⟩_Q Σ_{R ∈ ch^r Q} Δ_R b`, with `b` rescaled so the operator
    /// norm estimate equals `2^{-Nr/2}`. A constant symbol gives the zero shift.
    pub fn paraproduct(b: &GridFunction, order: u8) -> Result<Self, OperatorError> {
        if b.d() != 1 {
            return Err(OperatorError::LatticeMismatch);
        }
        let lattice = b.lattice().full();
        let j = lattice.max_level as usize;
        let n = lattice.dim as usize;
        let r = order as usize;
        let m = 1usize << (n * (r + 1));
        let pyr = b.pyramid();
        let mut blocks = Vec::new();
        if r < j {
            for l in 0..=(j - r - 1) {
                for cube in lattice.cubes_at_level(l as u8) {
                    let fine = l + r + 1;
                    let base = (cube.morton() as usize) << (n * (r + 1));
                    let lev = pyr.level(fine as u8);
                    let par = pyr.level((fine - 1) as u8);
                    let inv_q = 1.0 / cube.volume();
                    let mut kernel = vec![0.0; m * m];
                    for i in 0..m {
                        let child = base + i;
                        let delta = lev[child] - par[child >> n];
                        for jj in 0..m {
                            kernel[i * m + jj] = delta * inv_q;
                        }
                    }
                    blocks.push(ShiftBlock { cube, kernel });
                }
            }
        }
        let raw = HaarShift::new(lattice, order, false, blocks)?;
        if raw.is_zero() {
            return Ok(raw);
        }
        let est = power_norm(
            lattice.n_cells(),
            |x| raw.apply_flat(x, 1, false),
            |x| raw.apply_flat(x, 1, true),
            0x5eed,
            1e-13,
            10_000,
        );
        let target = (-(n as f64) * r as f64 / 2.0).exp2();
        Ok(raw.scaled(target / est.value))
    }

    pub fn scaled(&self, s: f64) -> HaarShift {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.kernel.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    pub fn complexity(&self) -> u8 {
        self.complexity
    }

    pub fn is_big(&self) -> bool {
        self.big
    }

    pub fn blocks(&self) -> &[ShiftBlock] {
        &self.blocks
    }

    pub fn block_size(&self) -> usize {
        1usize << (self.lattice.dim as usize * (self.complexity as usize + 1))
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.kernel.iter().all(|v| *v == 0.0))
    }

    /// `max_Q |Q| · ‖K_Q‖_∞`; at most 1 for shifts from [`HaarShift::random`].
    pub fn kernel_sup_ratio(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.cube.volume() * b.kernel.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
            .fold(0.0, f64::max)
    }

    /// Levels carrying a nonzero block.
    pub fn active_levels(&self) -> Vec<u8> {
        let mut ls: Vec<u8> = self
            .blocks
            .iter()
            .filter(|b| b.kernel.iter().any(|v| *v != 0.0))
            .map(|b| b.cube.level)
            .collect();
        ls.dedup();
        ls
    }

    /// Residue class `k` when all nonzero blocks sit on levels `≡ k mod (r+1)`.
    /// The zero shift reports class 0.
    pub fn separation_class(&self) -> Option<u8> {
        let period = self.complexity + 1;
        let mut classes = self.active_levels().into_iter().map(|l| l % period);
        let first = classes.next().unwrap_or(0);
        classes.all(|c| c == first).then_some(first)
    }

    /// Splits into `r+1` shifts, the `k`-th keeping levels `≡ k mod (r+1)`.
    pub fn separate(&self) -> Vec<HaarShift> {
        let period = self.complexity + 1;
        (0..period)
            .map(|k| HaarShift {
                lattice: self.lattice,
                complexity: self.complexity,
                big: self.big,
                blocks: self.blocks.iter().filter(|b| b.cube.level % period == k).cloned().collect(),
            })
            .collect()
    }

    pub fn truncate(&self, family: &[DyadicCube], mode: TruncationMode) -> Result<HaarShift, OperatorError> {
        check_disjoint(family)?;
        let inside = |q: &DyadicCube| family.iter().any(|r| r.contains(q));
        Ok(HaarShift {
            lattice: self.lattice,
            complexity: self.complexity,
            big: self.big,
            blocks: self
                .blocks
                .iter()
                .filter(|b| inside(&b.cube) == (mode == TruncationMode::Inside))
                .cloned()
                .collect(),
        })
    }

    /// Per-level pieces of the block sums: entry `[L][P]` is the (constant)
    /// value on the level-`L` cube `P` of all `T_Q x` whose blocks live on level
    /// `L`, i.e. `level(Q) = L − r − 1`.
    fn contributions(&self, x: &[f64], d: usize, adjoint: bool) -> Vec<Vec<f64>> {
        let lat = &self.lattice;
        let n = lat.dim as usize;
        let j = lat.max_level as usize;
        let shift = n * (self.complexity as usize + 1);
        let m = self.block_size();
        // Per-level integrals ∫_S x over cubes S.
        let mut sums: Vec<Vec<f64>> = vec![Vec::new(); j + 1];
        let cell_vol = lat.cell_volume();
        sums[j] = x.iter().map(|v| v * cell_vol).collect();
        for l in (0..j).rev() {
            let fine = &sums[l + 1];
            let cnt = (fine.len() / d) >> n;
            let mut coarse = vec![0.0; cnt * d];
            for (i, chunk) in fine.chunks(d << n).enumerate() {
                for c in chunk.chunks(d) {
                    for k in 0..d {
                        coarse[i * d + k] += c[k];
                    }
                }
            }
            sums[l] = coarse;
        }
        let mut acc: Vec<Vec<f64>> = sums.iter().map(|s| vec![0.0; s.len()]).collect();
        for b in &self.blocks {
            let fine = b.cube.level as usize + self.complexity as usize + 1;
            let base = (b.cube.morton() as usize) << shift;
            let src = &sums[fine];
            let dst = &mut acc[fine];
            for i in 0..m {
                for jj in 0..m {
                    let kv = if adjoint { b.kernel[jj * m + i] } else { b.kernel[i * m + jj] };
                    if kv == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        dst[(base + i) * d + k] += kv * src[(base + jj) * d + k];
                    }
                }
            }
        }
        acc
    }

    /// Running sums of [`Self::contributions`] down the tree: entry `[l][P]` is
    /// `Σ T_Q x` over blocks with `level(Q) ≤ l − r − 1`, all constant on the
    /// level-`l` cube `P`. The last level holds `Tx` itself.
    pub(crate) fn cumulative(&self, x: &[f64], d: usize) -> Vec<Vec<f64>> {
        let n = self.lattice.dim as usize;
        let mut acc = self.contributions(x, d, false);
        for l in 1..acc.len() {
            let (upper, lower) = acc.split_at_mut(l);
            let prev = &upper[l - 1];
            for (c, chunk) in lower[0].chunks_mut(d).enumerate() {
                let p = c >> n;
                for k in 0..d {
                    chunk[k] += prev[p * d + k];
                }
            }
        }
        acc
    }

    /// Block-sum evaluation on a flat array of `d`-vectors per cell.
    pub(crate) fn apply_flat(&self, x: &[f64], d: usize, adjoint: bool) -> Vec<f64> {
        let lat = &self.lattice;
        let n = lat.dim as usize;
        let j = lat.max_level as usize;
        let acc = self.contributions(x, d, adjoint);
        let mut out = vec![0.0; x.len()];
        for (l, a) in acc.iter().enumerate() {
            if a.iter().all(|v| *v == 0.0) {
                continue;
            }
            let s = n * (j - l);
            for c in 0..x.len() / d {
                let p = c >> s;
                for k in 0..d {
                    out[c * d + k] += a[p * d + k];
                }
            }
        }
        out
    }
}

impl GridOperator for HaarShift {
    fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    fn apply(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        check_lattice(&self.lattice, f)?;
        Ok(GridFunction::new(*f.lattice(), f.d(), self.apply_flat(f.values(), f.d(), false))?)
    }

    fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        check_lattice(&self.lattice, f)?;
        Ok(GridFunction::new(*f.lattice(), f.d(), self.apply_flat(f.values(), f.d(), true))?)
    }
}

fn double_center(k: &mut [f64], m: usize) {
    let rows: Vec<f64> = (0..m).map(|i| k[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let cols: Vec<f64> = (0..m).map(|j| (0..m).map(|i| k[i * m + j]).sum::<f64>() / m as f64).collect();
    let all = rows.iter().sum::<f64>() / m as f64;
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] += all - rows[i] - cols[j];
        }
    }
}

pub fn check_disjoint(family: &[DyadicCube]) -> Result<(), OperatorError> {
    for (i, a) in family.iter().enumerate() {
        for b in &family[i + 1..] {
            if a.contains(b) || b.contains(a) {
                return Err(OperatorError::Overlapping(*a, *b));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Estimate one step before the last.
    pub previous: f64,
}

/// Largest singular value of `A` by power iteration on `A*A` from a seeded
/// start vector; stops when successive estimates, and the geometric
/// extrapolation of what remains, agree to `rtol`.
pub fn power_norm(
    len: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    adjoint: impl Fn(&[f64]) -> Vec<f64>,
    seed: u64,
    rtol: f64,
    max_iter: usize,
) -> NormEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nrm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = nrm(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut prev = 0.0;
    let mut est = 0.0;
    let mut last_step = 0.0;
    for it in 1..=max_iter {
        let y = apply(&x);
        est = nrm(&y);
        if est == 0.0 {
            return NormEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
                previous: prev,
            };
        }
        // Estimates increase geometrically towards the norm; stop once the
        // step and the extrapolated remaining gain are both below `rtol`.
        let step = (est - prev).abs();
        let rate = if last_step > 0.0 { (step / last_step).min(0.999) } else { 0.0 };
        let tail = step * rate / (1.0 - rate);
        last_step = step;
        if it > 3 && step.max(tail) <= rtol * est {
            return NormEstimate {
                value: est,
                iterations: it,
                converged: true,
                previous: prev,
            };
        }
        prev = est;
        let z = adjoint(&y);
        let nz = nrm(&z);
        if nz == 0.0 {
            break;
        }
        x = z.into_iter().map(|v| v / nz).collect();
    }
    NormEstimate {
        value: est,
        iterations: max_iter,
        converged: false,
        previous: prev,
    }
}

/// `K(x,y) = 1/(x−y)` between cell centers, zero for centers closer than
/// `band` cells; quadrature by cell length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CzKernel {
    lattice: DyadicLattice,
    band: usize,
}

impl CzKernel {
    pub fn hilbert(lattice: DyadicLattice) -> Result<Self, OperatorError> {
        if lattice.dim != 1 {
            return Err(OperatorError::NeedsLine);
        }
        Ok(CzKernel {
            lattice: lattice.full(),
            band: 3,
        })
    }

    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    pub fn band(&self) -> usize {
        self.band
    }

    /// `K` between cells `i` and `j`.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        let di = i as i64 - j as i64;
        if di.unsigned_abs() as usize >= self.band {
            1.0 / (di as f64 * self.lattice.cell_side())
        } else {
            0.0
        }
    }

    /// `Σ_{j ∈ src} h K(i,j) x_j` for each output `i`, on flat `d`-vectors.
    fn apply_range(&self, x: &[f64], d: usize, src: std::ops::Range<usize>, i: usize, out: &mut [f64]) {
        let h = self.lattice.cell_side();
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in src {
            let k = self.kernel(i, j);
            if k != 0.0 {
                for c in 0..d {
                    out[c] += h * k * x[j * d + c];
                }
            }
        }
    }

    fn apply_flat(&self, x: &[f64], d: usize, adjoint: bool) -> Vec<f64> {
        let n = self.lattice.n_cells();
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
            self.apply_range(x, d, 0..n, i, o);
            if adjoint {
                o.iter_mut().for_each(|v| *v = -*v);
            }
        });
        out
    }

    /// `sup |K(x,y)|·|x−y|` over distinct cell pairs.
    pub fn size_constant(&self) -> f64 {
        let h = self.lattice.cell_side();
        let n = self.lattice.n_cells();
        (1..n)
            .map(|di| self.kernel(di, 0).abs() * di as f64 * h)
            .fold(0.0, f64::max)
    }

    /// Smallest `C` with `|K(x,y) − K(x',y)| ≤ C (|x−x'|/|x−y|) |x−y|^{-1}`
    /// whenever `|x−x'| ≤ |x−y|/2`, over all cell triples.
    pub fn smoothness_constant(&self) -> f64 {
        let n = self.lattice.n_cells() as i64;
        let h = self.lattice.cell_side();
        // Translation invariance: fix y = 0 offsets and scan x−y, x'−x.
        let mut best: f64 = 0.0;
        for dxy in (-(n - 1))..n {
            if dxy == 0 {
                continue;
            }
            let dist = dxy.abs() as f64 * h;
            for dxx in (-(n - 1))..n {
                if dxx == 0 || 2 * dxx.abs() > dxy.abs() {
                    continue;
                }
                let kx = kernel_offset(dxy, self.band, h);
                let kxp = kernel_offset(dxy + dxx, self.band, h);
                let t = dxx.abs() as f64 * h / dist;
                best = best.max((kx - kxp).abs() * dist / t);
            }
        }
        best
    }
}

fn kernel_offset(di: i64, band: usize, h: f64) -> f64 {
    if di.unsigned_abs() as usize >= band {
        1.0 / (di as f64 * h)
    } else {
        0.0
    }
}

impl GridOperator for CzKernel {
    fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    fn apply(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        check_lattice(&self.lattice, f)?;
        Ok(GridFunction::new(*f.lattice(), f.d(), self.apply_flat(f.values(), f.d(), false))?)
    }

    fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        check_lattice(&self.lattice, f)?;
        Ok(GridFunction::new(*f.lattice(), f.d(), self.apply_flat(f.values(), f.d(), true))?)
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `max_{ξ ∈ P} |T(f 1_{(3P)^c})(ξ)|` for every dyadic cube `P`, level by level
/// in Morton order (`|·|` is the Euclidean norm for vector `f`).
pub fn outside_maxima(k: &CzKernel, f: &GridFunction) -> Result<Vec<Vec<f64>>, OperatorError> {
    check_lattice(&k.lattice, f)?;
    let lat = k.lattice;
    let d = f.d();
    let full = k.apply_flat(f.values(), d, false);
    let j = lat.max_level;
    Ok((0..=j)
        .map(|l| {
            let cubes: Vec<DyadicCube> = lat.cubes_at_level(l).collect();
            cubes
                .par_iter()
                .map(|p| {
                    let b = GridBox::tripled(p, j);
                    let near = b.lo[0] as usize..b.hi[0] as usize;
                    let mut local = vec![0.0; d];
                    p.cell_range(j)
                        .map(|xi| {
                            k.apply_range(f.values(), d, near.clone(), xi, &mut local);
                            let v: Vec<f64> = (0..d).map(|c| full[xi * d + c] - local[c]).collect();
                            vec_norm(&v)
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect())
}

/// `M_T f(x) = max_{P ∋ x} max_{ξ ∈ P} |T(f 1_{(3P)^c})(ξ)|` over all dyadic `P`.
pub fn maximal_mt(k: &CzKernel, f: &GridFunction) -> Result<GridFunction, OperatorError> {
    let per_cube = outside_maxima(k, f)?;
    let lat = k.lattice;
    let j = lat.max_level as usize;
    let mut running = per_cube[0].clone();
    for level in per_cube.iter().take(j + 1).skip(1) {
        running = (0..level.len()).map(|i| running[i >> 1].max(level[i])).collect();
    }
    Ok(GridFunction::scalar(lat, running)?)
}

/// `M_T f` on the cells of `q` (in range order), given `Tf`. Only cubes
/// `P ⊆ q` matter when `f` is supported in `3q`: larger `P` have `3P ⊇ 3q`.
pub fn maximal_mt_local(k: &CzKernel, f: &GridFunction, tf: &GridFunction, q: &DyadicCube) -> Result<Vec<f64>, OperatorError> {
    check_lattice(&k.lattice, f)?;
    check_lattice(&k.lattice, tf)?;
    let j = k.lattice.max_level;
    let d = f.d();
    let range = q.cell_range(j);
    let start = range.start;
    let mut out = vec![0.0_f64; range.len()];
    for gen in 0..=(j - q.level) {
        let cubes = q.descendants(gen);
        let maxima: Vec<f64> = cubes
            .par_iter()
            .map(|p| {
                let b = GridBox::tripled(p, j);
                let near = b.lo[0] as usize..b.hi[0] as usize;
                let mut local = vec![0.0; d];
                p.cell_range(j)
                    .map(|xi| {
                        k.apply_range(f.values(), d, near.clone(), xi, &mut local);
                        let v: Vec<f64> = (0..d).map(|c| tf.cell(xi)[c] - local[c]).collect();
                        vec_norm(&v)
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        for (p, m) in cubes.iter().zip(maxima) {
            for x in p.cell_range(j) {
                out[x - start] = out[x - start].max(m);
            }
        }
    }
    Ok(out)
}

/// `T♯f(x) = max_ε |Σ_{|x−y| > ε} h K(x,y) f(y)|` over `ε = 2^j h`, `j = 0..=J`.
pub fn sharp_truncation(k: &CzKernel, f: &GridFunction) -> Result<GridFunction, OperatorError> {
    check_lattice(&k.lattice, f)?;
    let lat = k.lattice;
    let n = lat.n_cells();
    let d = f.d();
    let h = lat.cell_side();
    let x = f.values();
    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            // Accumulate from the farthest shell inward so each radius is a suffix sum.
            let mut by_dist = vec![vec![0.0; d]; n];
            for jj in 0..n {
                let dist = (i as i64 - jj as i64).unsigned_abs() as usize;
                let kv = k.kernel(i, jj);
                for c in 0..d {
                    by_dist[dist][c] += h * kv * x[jj * d + c];
                }
            }
            let mut suffix = vec![0.0; d];
            let mut best: f64 = 0.0;
            let mut dist = n;
            let mut radii: Vec<usize> = (0..=lat.max_level).map(|j| 1usize << j).collect();
            radii.reverse();
            for r in radii {
                // Terms with center distance strictly greater than r cells.
                while dist > r + 1 {
                    dist -= 1;
                    for c in 0..d {
                        suffix[c] += by_dist[dist][c];
                    }
                }
                best = best.max(vec_norm(&suffix));
            }
            best
        })
        .collect();
    Ok(GridFunction::scalar(lat, vals)?)
}

/// How to build the symbol of a paraproduct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum SymbolSpec {
    /// Independent uniform values in `[-1,1]` per cell.
    Random { seed: u64 },
    /// The Haar function of one cube (one component for N = 2).
    Haar { level: u8, index: Vec<u32> },
    Explicit { values: Vec<f64> },
}

impl SymbolSpec {
    pub fn build(&self, lattice: DyadicLattice) -> Result<GridFunction, OperatorError> {
        let n = lattice.n_cells();
        let vals = match self {
            SymbolSpec::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
            SymbolSpec::Haar { level, index } => {
                let idx = [index.first().copied().unwrap_or(0), index.get(1).copied().unwrap_or(0)];
                let q = DyadicCube::new(lattice.dim, *level, idx)?;
                lattice.check_cube(&q)?;
                if q.level >= lattice.max_level {
                    return Err(DyadicError::FinestLevel(q).into());
                }
                let mut v = vec![0.0; n];
                let first = q.child(0).cell_range(lattice.max_level);
                let amp = 1.0 / q.volume().sqrt();
                for c in q.cell_range(lattice.max_level) {
                    v[c] = if first.contains(&c) { amp } else { -amp };
                }
                v
            }
            SymbolSpec::Explicit { values } => {
                if values.len() != n {
                    return Err(OperatorError::SymbolLength {
                        got: values.len(),
                        expected: n,
                    });
                }
                values.clone()
            }
        };
        Ok(GridFunction::scalar(lattice, vals)?)
    }
}

/// Operator families available to experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum OperatorSpec {
    #[serde(rename_all = "camelCase")]
    HaarShift { complexity: u8, seed: u64 },
    #[serde(rename_all = "camelCase")]
    BigHaarShift { complexity: u8, seed: u64 },
    #[serde(rename_all = "camelCase")]
    Paraproduct { complexity: u8, symbol: SymbolSpec },
    CzHilbert {},
    #[serde(rename_all = "camelCase")]
    MartingaleTransform { seed: u64 },
}

#[derive(Clone, Debug)]
pub enum Operator {
    Shift(HaarShift),
    Cz(CzKernel),
}

impl OperatorSpec {
    pub fn build(&self, lattice: DyadicLattice) -> Result<Operator, OperatorError> {
        Ok(match self {
            OperatorSpec::HaarShift { complexity, seed } => Operator::Shift(HaarShift::random(lattice, *complexity, false, *seed)?),
            OperatorSpec::BigHaarShift { complexity, seed } => Operator::Shift(HaarShift::random(lattice, *complexity, true, *seed)?),
            OperatorSpec::Paraproduct { complexity, symbol } => {
                Operator::Shift(HaarShift::paraproduct(&symbol.build(lattice)?, *complexity)?)
            }
            OperatorSpec::CzHilbert {} => Operator::Cz(CzKernel::hilbert(lattice)?),
            OperatorSpec::MartingaleTransform { seed } => Operator::Shift(HaarShift::martingale_transform(lattice, *seed)?),
        })
    }
}

impl GridOperator for Operator {
    fn lattice(&self) -> &DyadicLattice {
        match self {
            Operator::Shift(s) => s.lattice(),
            Operator::Cz(k) => k.lattice(),
        }
    }

    fn apply(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        match self {
            Operator::Shift(s) => s.apply(f),
            Operator::Cz(k) => k.apply(f),
        }
    }

    fn apply_adjoint(&self, f: &GridFunction) -> Result<GridFunction, OperatorError> {
        match self {
            Operator::Shift(s) => s.apply_adjoint(f),
            Operator::Cz(k) => k.apply_adjoint(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn lat(dim: u8, j: u8) -> DyadicLattice {
        DyadicLattice::new(dim, j).unwrap()
    }

    fn random_fn(lattice: DyadicLattice, d: usize, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::from_cells(lattice, d, |_, v| v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0)))
    }

    /// Dense kernel matrix of a shift: entry `(x, y)` is `h^N Σ_Q K_Q(x,y)`.
    fn dense_shift(t: &HaarShift) -> Vec<Vec<f64>> {
        let lat = t.lattice();
        let n = lat.n_cells();
        let j = lat.max_level;
        let m = t.block_size();
        let gen = t.complexity() + 1;
        let mut a = vec![vec![0.0; n]; n];
        for b in t.blocks() {
            let desc = b.cube.descendants(gen);
            for (i, r) in desc.iter().enumerate() {
                for (jj, s) in desc.iter().enumerate() {
                    for x in r.cell_range(j) {
                        for y in s.cell_range(j) {
                            a[x][y] += lat.cell_volume() * b.kernel[i * m + jj];
                        }
                    }
                }
            }
        }
        a
    }

    fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn random_shifts_satisfy_kernel_invariants() {
        for (dim, j) in [(1u8, 6u8), (2, 4)] {
            for r in 0..=2u8 {
                let t = HaarShift::random(lat(dim, j), r, true, r as u64 + 3).unwrap();
                assert!(t.kernel_sup_ratio() <= 1.0 + 1e-12);
                let m = t.block_size();
                for b in t.blocks() {
                    for i in 0..m {
                        let row: f64 = b.kernel[i * m..(i + 1) * m].iter().sum();
                        let col: f64 = (0..m).map(|k| b.kernel[k * m + i]).sum();
                        assert!(row.abs() < 1e-9 / b.cube.volume() && col.abs() < 1e-9 / b.cube.volume());
                    }
                }
                let one = GridFunction::constant(lat(dim, j), &[1.0]);
                assert!(t.apply(&one).unwrap().sup_norm() < 1e-9);
                assert!(t.apply_adjoint(&one).unwrap().sup_norm() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_matches_dense_oracle() {
        for (dim, j, r) in [(1u8, 5u8, 0u8), (1, 5, 2), (2, 3, 1)] {
            let t = HaarShift::random(lat(dim, j), r, false, 11).unwrap();
            let a = dense_shift(&t);
            let f = random_fn(lat(dim, j), 1, 5);
            let got = t.apply(&f).unwrap();
            assert!(max_diff(got.values(), &matvec(&a, f.values())) < 1e-9);
            let at: Vec<Vec<f64>> = (0..a.len()).map(|i| a.iter().map(|row| row[i]).collect()).collect();
            let got_t = t.apply_adjoint(&f).unwrap();
            assert!(max_diff(got_t.values(), &matvec(&at, f.values())) < 1e-9);
        }
    }

    #[test]
    fn cumulative_sums_end_in_apply() {
        let l = lat(2, 4);
        let t = HaarShift::random(l, 1, false, 21).unwrap();
        let f = random_fn(l, 2, 4);
        let cum = t.cumulative(f.values(), 2);
        assert!(max_diff(&cum[4], t.apply(&f).unwrap().values()) < 1e-12);
        // Level-2 entries: blocks on level 0 only, constant on level-2 cubes.
        let top = t.truncate(&[], TruncationMode::Outside).unwrap();
        let only0 = HaarShift::new(l, 1, false, top.blocks().iter().filter(|b| b.cube.level == 0).cloned().collect()).unwrap();
        let g = only0.apply(&f).unwrap();
        for c in 0..l.n_cells() {
            let p = c >> 4;
            for k in 0..2 {
                assert!((cum[2][p * 2 + k] - g.cell(c)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn componentwise_action() {
        let l = lat(1, 6);
        let t = HaarShift::random(l, 1, true, 2).unwrap();
        let f = random_fn(l, 2, 9);
        let tf = t.apply(&f).unwrap();
        for k in 0..2 {
            let tk = t.apply(&f.component(k)).unwrap();
            assert!(max_diff(tk.values(), tf.component(k).values()) < 1e-13);
        }
    }

    #[test]
    fn martingale_transform_is_isometric_up_to_signs() {
        let l = lat(1, 6);
        let t = HaarShift::martingale_transform(l, 4).unwrap();
        assert!((t.kernel_sup_ratio() - 1.0).abs() < 1e-12);
        let f = random_fn(l, 1, 1);
        let mean = f.average(&l.root()).unwrap()[0];
        let centered = f.sub(&GridFunction::constant(l, &[mean])).unwrap();
        let tf = t.apply(&f).unwrap();
        assert!((tf.l2_norm() - centered.l2_norm()).abs() < 1e-9);
    }

    #[test]
    fn paraproduct_examples() {
        let l = lat(1, 6);
        let c = GridFunction::constant(l, &[3.0]);
        assert!(HaarShift::paraproduct(&c, 0).unwrap().is_zero());
        // Single Haar symbol, r = 0: Π f = ⟨f⟩_Q · (scaled h_Q).
        let q = DyadicCube::new(1, 2, [1, 0]).unwrap();
        let b = SymbolSpec::Haar { level: 2, index: vec![1] }.build(l).unwrap();
        let p = HaarShift::paraproduct(&b, 0).unwrap();
        let f = random_fn(l, 1, 3);
        let pf = p.apply(&f).unwrap();
        let avg = f.average(&q).unwrap()[0];
        let ratio = pf.cell(q.cell_range(6).start)[0] / (avg * b.cell(q.cell_range(6).start)[0]);
        for cell in 0..l.n_cells() {
            let expect = ratio * avg * b.cell(cell)[0];
            assert!((pf.cell(cell)[0] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn paraproduct_matches_formula_and_is_normalized() {
        let l = lat(1, 5);
        for r in 0..=2u8 {
            let b = SymbolSpec::Random { seed: r as u64 }.build(l).unwrap();
            let p = HaarShift::paraproduct(&b, r).unwrap();
            let target = (-(r as f64) / 2.0).exp2();
            // Independent norm estimate from the dense matrix.
            let a = dense_shift(&p);
            let ata: Vec<Vec<f64>> = (0..a.len())
                .map(|i| (0..a.len()).map(|k| a.iter().map(|row| row[i] * row[k]).sum()).collect())
                .collect();
            let mut x = vec![1.0; a.len()];
            let mut lam = 0.0;
            for _ in 0..5000 {
                let y = matvec(&ata, &x);
                lam = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                x = y.iter().map(|v| v / lam).collect();
            }
            assert!(lam.sqrt() <= target * (1.0 + 1e-6), "r={r}: {} vs {target}", lam.sqrt());
            // Formula: Σ_Q ⟨f⟩_Q Σ_{R∈ch^r Q} Δ_R b, with the fitted scale.
            let f = random_fn(l, 1, 8);
            let pf = p.apply(&f).unwrap();
            let raw: Vec<f64> = (0..l.n_cells())
                .map(|x| {
                    let mut s = 0.0;
                    for lev in 0..=(5 - r as i32 - 1) {
                        let qc = l.cell_cube(x).ancestor_at(lev as u8).unwrap();
                        let rc = l.cell_cube(x).ancestor_at(lev as u8 + r).unwrap();
                        let child = l.cell_cube(x).ancestor_at(lev as u8 + r + 1).unwrap();
                        s += f.average(&qc).unwrap()[0]
                            * (b.average(&child).unwrap()[0] - b.average(&rc).unwrap()[0]);
                    }
                    s
                })
                .collect();
            let k = pf.values().iter().zip(&raw).map(|(a, b)| a * b).sum::<f64>()
                / raw.iter().map(|v| v * v).sum::<f64>();
            assert!(max_diff(pf.values(), &raw.iter().map(|v| v * k).collect::<Vec<_>>()) < 1e-10);
        }
    }

    #[test]
    fn separation_examples() {
        let l = lat(1, 6);
        let t0 = HaarShift::random(l, 0, true, 1).unwrap();
        assert_eq!(t0.separate().len(), 1);
        assert_eq!(t0.separate()[0], t0);
        let t1 = HaarShift::random(lat(1, 5), 1, true, 1).unwrap();
        assert_eq!(t1.active_levels(), vec![0, 1, 2, 3]);
        let parts = t1.separate();
        assert_eq!(parts[0].active_levels(), vec![0, 2]);
        assert_eq!(parts[1].active_levels(), vec![1, 3]);
        assert_eq!(parts[0].separation_class(), Some(0));
        assert_eq!(parts[1].separation_class(), Some(1));
        assert_eq!(t1.separation_class(), None);
        let f = random_fn(lat(1, 5), 2, 3);
        let sum = parts[0].apply(&f).unwrap().add(&parts[1].apply(&f).unwrap()).unwrap();
        assert!(max_diff(sum.values(), t1.apply(&f).unwrap().values()) < 1e-12);
    }

    #[test]
    fn truncation_examples() {
        let l = lat(1, 6);
        let t = HaarShift::random(l, 1, true, 5).unwrap();
        assert_eq!(t.truncate(&[l.root()], TruncationMode::Inside).unwrap(), t);
        assert!(t.truncate(&[], TruncationMode::Inside).unwrap().is_zero());
        let g = [DyadicCube::new(1, 2, [1, 0]).unwrap(), DyadicCube::new(1, 3, [6, 0]).unwrap()];
        let inside = t.truncate(&g, TruncationMode::Inside).unwrap();
        let outside = t.truncate(&g, TruncationMode::Outside).unwrap();
        let f = random_fn(l, 1, 2);
        let sum = inside.apply(&f).unwrap().add(&outside.apply(&f).unwrap()).unwrap();
        assert!(max_diff(sum.values(), t.apply(&f).unwrap().values()) < 1e-12);
        let overlap = [DyadicCube::new(1, 1, [0, 0]).unwrap(), DyadicCube::new(1, 3, [1, 0]).unwrap()];
        assert!(matches!(t.truncate(&overlap, TruncationMode::Inside), Err(OperatorError::Overlapping(..))));
    }

    #[test]
    fn cz_examples() {
        let l = lat(1, 7);
        let k = CzKernel::hilbert(l).unwrap();
        assert!(CzKernel::hilbert(lat(2, 3)).is_err());
        let zero = GridFunction::zeros(l, 1);
        assert!(k.apply(&zero).unwrap().is_zero());
        assert!(maximal_mt(&k, &zero).unwrap().is_zero());
        assert!(sharp_truncation(&k, &zero).unwrap().is_zero());
        // Symmetric indicator around cell 64 → value 0 there.
        let f = GridFunction::from_cells(l, 1, |c, v| v[0] = if (44..=84).contains(&c) { 1.0 } else { 0.0 });
        assert!(k.apply(&f).unwrap().cell(64)[0].abs() < 1e-12);
        // Dense oracle and antisymmetry.
        let g = random_fn(l, 1, 3);
        let n = l.n_cells();
        let dense: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| l.cell_side() * k.kernel(i, j) * g.cell(j)[0]).sum())
            .collect();
        assert!(max_diff(k.apply(&g).unwrap().values(), &dense) < 1e-12);
        let h = random_fn(l, 1, 4);
        let lhs = k.apply(&g).unwrap().inner(&h);
        let rhs = g.inner(&k.apply(&h).unwrap());
        assert!((lhs + rhs).abs() < 1e-12);
        assert!((k.size_constant() - 1.0).abs() < 1e-12);
        let s = CzKernel::hilbert(lat(1, 5)).unwrap().smoothness_constant();
        assert!(s.is_finite() && s <= 6.0 + 1e-9, "{s}");
    }

    /// `max_{ξ∈P} |T(f 1_{(3P)^c})(ξ)|` by direct summation over far cells.
    fn brute_mt(k: &CzKernel, f: &GridFunction) -> Vec<f64> {
        let l = k.lattice();
        let j = l.max_level;
        let n = l.n_cells();
        let mut out = vec![0.0_f64; n];
        for p in l.all_cubes() {
            let b = GridBox::tripled(&p, j);
            let mut hp: f64 = 0.0;
            for xi in p.cell_range(j) {
                let v: f64 = (0..n)
                    .filter(|y| !b.contains_cell(l, *y))
                    .map(|y| l.cell_side() * k.kernel(xi, y) * f.cell(y)[0])
                    .sum();
                hp = hp.max(v.abs());
            }
            for x in p.cell_range(j) {
                out[x] = out[x].max(hp);
            }
        }
        out
    }

    #[test]
    fn maximal_mt_matches_exhaustive_scan() {
        let l = lat(1, 6);
        let k = CzKernel::hilbert(l).unwrap();
        let f = random_fn(l, 1, 12);
        let mt = maximal_mt(&k, &f).unwrap();
        assert!(max_diff(mt.values(), &brute_mt(&k, &f)) < 1e-11);
        // Two-cube hand example: f on the right half, x in the left quarter.
        let g = GridFunction::from_cells(l, 1, |c, v| v[0] = if c == 50 { 1.0 } else { 0.0 });
        let mt = maximal_mt(&k, &g).unwrap();
        assert!(mt.values().iter().all(|v| *v >= 0.0));
        let abs = GridFunction::scalar(l, f.values().iter().map(|v| v.abs()).collect()).unwrap();
        let bigger = GridFunction::scalar(l, abs.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let m1 = maximal_mt(&k, &abs).unwrap();
        let m2 = maximal_mt(&k, &bigger).unwrap();
        assert!(m1.values().iter().zip(m2.values()).all(|(a, b)| a <= b));
    }

    #[test]
    fn local_maximal_mt_agrees_for_localized_input() {
        let l = lat(1, 6);
        let k = CzKernel::hilbert(l).unwrap();
        let q = DyadicCube::new(1, 2, [1, 0]).unwrap();
        let b = GridBox::tripled(&q, 6);
        let f = GridFunction::from_cells(l, 2, |c, v| {
            if b.contains_cell(&l, c) {
                v[0] = (c as f64).sin();
                v[1] = (c as f64 * 0.3).cos();
            }
        });
        let tf = k.apply(&f).unwrap();
        let loc = maximal_mt_local(&k, &f, &tf, &q).unwrap();
        let full = maximal_mt(&k, &f).unwrap();
        for (i, x) in q.cell_range(6).enumerate() {
            assert!((loc[i] - full.cell(x)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_truncation_matches_radius_scan() {
        let l = lat(1, 6);
        let k = CzKernel::hilbert(l).unwrap();
        let f = random_fn(l, 1, 13);
        let got = sharp_truncation(&k, &f).unwrap();
        let n = l.n_cells();
        for i in 0..n {
            let mut best: f64 = 0.0;
            for jr in 0..=6 {
                let r = 1i64 << jr;
                let v: f64 = (0..n)
                    .filter(|y| (i as i64 - *y as i64).abs() > r)
                    .map(|y| l.cell_side() * k.kernel(i, y) * f.cell(y)[0])
                    .sum();
                best = best.max(v.abs());
            }
            assert!((got.cell(i)[0] - best).abs() < 1e-11);
        }
        let single = GridFunction::from_cells(l, 1, |c, v| v[0] = if c == 10 { 1.0 } else { 0.0 });
        let s = sharp_truncation(&k, &single).unwrap();
        assert!((s.cell(30)[0] - l.cell_side() * k.kernel(30, 10).abs()).abs() < 1e-12);
    }

    #[test]
    fn power_norm_on_diagonal() {
        let d = [3.0, -1.0, 2.0, 0.5];
        let est = power_norm(4, |x| x.iter().zip(&d).map(|(a, b)| a * b).collect(), |x| x.iter().zip(&d).map(|(a, b)| a * b).collect(), 1, 1e-12, 1000);
        assert!(est.converged && (est.value - 3.0).abs() < 1e-9);
    }

    #[test]
    fn spec_roundtrip() {
        let s = OperatorSpec::Paraproduct {
            complexity: 1,
            symbol: SymbolSpec::Random { seed: 3 },
        };
        let txt = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<OperatorSpec>(&txt).unwrap(), s);
        assert!(serde_json::from_str::<OperatorSpec>(r#"{"kind":"czHilbert"}"#).is_ok());
        assert!(serde_json::from_str::<OperatorSpec>(r#"{"kind":"czHilbert","x":1}"#).is_err());
        assert!(matches!(s.build(lat(1, 5)).unwrap(), Operator::Shift(_)));
    }

    proptest! {
        #[test]
        fn separated_pieces_sum_to_shift(seed in 0u64..200, r in 0u8..3) {
            let l = lat(1, 6);
            let t = HaarShift::random(l, r, seed % 2 == 0, seed).unwrap();
            let f = random_fn(l, 1, seed + 1);
            let mut sum = GridFunction::zeros(l, 1);
            for p in t.separate() {
                prop_assert!(p.separation_class().is_some());
                sum = sum.add(&p.apply(&f).unwrap()).unwrap();
            }
            prop_assert!(max_diff(sum.values(), t.apply(&f).unwrap().values()) < 1e-10);
        }

        #[test]
        fn adjoint_pairing(seed in 0u64..200) {
            let l = lat(2, 3);
            let t = HaarShift::random(l, 1, false, seed).unwrap();
            let f = random_fn(l, 2, seed + 5);
            let g = random_fn(l, 2, seed + 6);
            let a = t.apply(&f).unwrap().inner(&g);
            let b = f.inner(&t.apply_adjoint(&g).unwrap());
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }
}
