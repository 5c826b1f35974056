//! Matrix weights on the grid and their characteristics: matrix and two-weight
//! A2, scalar A∞ (per direction and over a net), reverse Hölder checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{DyadicCube, DyadicError, DyadicLattice, GridFunction};
use crate::smallmat::{Mat, MatError, SymMatrix, PSD_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("weight has {got} cells, lattice has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("cell {cell}: matrix dimension {got}, expected {expected}")]
    DimensionMismatch { cell: usize, got: usize, expected: usize },
    #[error("cell {0}: matrix is not positive semidefinite")]
    NotPsd(usize),
    #[error("weight is not invertible (cell {cell}, smallest eigenvalue {min_eigenvalue:.3e})")]
    NotInvertible { cell: usize, min_eigenvalue: f64 },
    #[error("scalar weight is negative at cell {0}")]
    Negative(usize),
    #[error("scalar weight vanishes identically")]
    ZeroWeight,
    #[error("weights live on different lattices or dimensions")]
    Mismatch,
    #[error("exponent {delta} outside (0, {cap}]")]
    Precondition { delta: f64, cap: f64 },
    #[error("invalid weight spec: {0}")]
    BadSpec(String),
}

/// Supremum of a cube characteristic with the cube (and direction) attaining it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CharacteristicReport {
    pub value: f64,
    pub witness_cube: DyadicCube,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_direction: Option<Vec<f64>>,
}

/// Picks the larger value, breaking ties towards the earlier cube so parallel
/// scans are schedule independent.
fn better(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    if a.0 > b.0 || (a.0 == b.0 && a.1 <= b.1) {
        a
    } else {
        b
    }
}

/// Per-cell PSD matrix field with cached square roots and inverses.
#[derive(Clone, Debug)]
pub struct MatrixWeight {
    lattice: DyadicLattice,
    d: usize,
    cells: Vec<SymMatrix>,
    sqrt: Vec<SymMatrix>,
    inv: Vec<SymMatrix>,
    inv_sqrt: Vec<SymMatrix>,
    invertible: bool,
    eigen_floor: f64,
}

impl MatrixWeight {
    /// Validates PSD cells; the weight is invertible when every cell's smallest
    /// eigenvalue exceeds `eigen_floor` and the PSD tolerance. Otherwise the
    /// inverse caches hold pseudo-inverses.
    pub fn new(lattice: DyadicLattice, cells: Vec<SymMatrix>, eigen_floor: f64) -> Result<Self, WeightError> {
        let n = lattice.n_cells();
        if cells.len() != n {
            return Err(WeightError::LengthMismatch {
                got: cells.len(),
                expected: n,
            });
        }
        let d = cells[0].dim();
        let mut invertible = true;
        let mut sqrt = Vec::with_capacity(n);
        let mut inv = Vec::with_capacity(n);
        let mut inv_sqrt = Vec::with_capacity(n);
        for (i, c) in cells.iter().enumerate() {
            if c.dim() != d {
                return Err(WeightError::DimensionMismatch {
                    cell: i,
                    got: c.dim(),
                    expected: d,
                });
            }
            let e = c.eig();
            let lmax = e.max();
            if e.min() < -PSD_TOL * lmax.abs() {
                return Err(WeightError::NotPsd(i));
            }
            let cell_inv = e.min() > eigen_floor.max(PSD_TOL * lmax) && lmax > 0.0;
            invertible &= cell_inv;
            sqrt.push(c.sqrt(true)?);
            inv.push(c.inverse(true)?);
            inv_sqrt.push(c.inv_sqrt(true)?);
        }
        Ok(MatrixWeight {
            lattice,
            d,
            cells,
            sqrt,
            inv,
            inv_sqrt,
            invertible,
            eigen_floor,
        })
    }

    pub fn identity(lattice: DyadicLattice, d: usize) -> Self {
        MatrixWeight::new(lattice, vec![SymMatrix::identity(d); lattice.n_cells()], 0.0)
            .expect("identity is a valid weight")
    }

    /// `w(x)·I_d` from a positive scalar field.
    pub fn from_scalar(w: &GridFunction, d: usize) -> Result<Self, WeightError> {
        if w.d() != 1 {
            return Err(WeightError::Mismatch);
        }
        let cells = (0..w.n_cells())
            .map(|c| SymMatrix::identity(d).scale(w.cell(c)[0]))
            .collect();
        MatrixWeight::new(*w.lattice(), cells, 0.0)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    pub fn is_invertible(&self) -> bool {
        self.invertible
    }

    pub fn eigen_floor(&self) -> f64 {
        self.eigen_floor
    }

    pub fn cell(&self, c: usize) -> &SymMatrix {
        &self.cells[c]
    }

    pub fn cells(&self) -> &[SymMatrix] {
        &self.cells
    }

    pub fn sqrt_cell(&self, c: usize) -> &SymMatrix {
        &self.sqrt[c]
    }

    pub fn inv_cell(&self, c: usize) -> &SymMatrix {
        &self.inv[c]
    }

    pub fn inv_sqrt_cell(&self, c: usize) -> &SymMatrix {
        &self.inv_sqrt[c]
    }

    fn require_invertible(&self) -> Result<(), WeightError> {
        if self.invertible {
            return Ok(());
        }
        let (cell, min_eigenvalue) = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.eig().min()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        Err(WeightError::NotInvertible { cell, min_eigenvalue })
    }

    /// `W^{-1}` as a weight.
    pub fn inverse(&self) -> Result<MatrixWeight, WeightError> {
        self.require_invertible()?;
        MatrixWeight::new(self.lattice, self.inv.clone(), 0.0)
    }

    pub fn scale(&self, c: f64) -> Result<MatrixWeight, WeightError> {
        MatrixWeight::new(self.lattice, self.cells.iter().map(|m| m.scale(c)).collect(), self.eigen_floor * c)
    }

    /// `(W(x)e, e)`.
    pub fn direction_weight(&self, e: &[f64]) -> GridFunction {
        let vals = self.cells.iter().map(|m| m.quad_form(e).max(0.0)).collect();
        GridFunction::scalar(self.lattice, vals).expect("finite weight")
    }

    pub fn pyramid(&self) -> MatrixPyramid {
        MatrixPyramid::new(&self.lattice, self.d, &self.cells)
    }

    pub fn inv_pyramid(&self) -> MatrixPyramid {
        MatrixPyramid::new(&self.lattice, self.d, &self.inv)
    }

    pub fn average(&self, q: &DyadicCube) -> Result<SymMatrix, WeightError> {
        self.lattice.check_cube(q)?;
        Ok(average_cells(&self.cells, q, self.lattice.max_level, self.d))
    }

    pub fn inv_average(&self, q: &DyadicCube) -> Result<SymMatrix, WeightError> {
        self.lattice.check_cube(q)?;
        Ok(average_cells(&self.inv, q, self.lattice.max_level, self.d))
    }
}

fn average_cells(cells: &[SymMatrix], q: &DyadicCube, j: u8, d: usize) -> SymMatrix {
    let range = q.cell_range(j);
    let w = 1.0 / range.len() as f64;
    let mut acc = Mat::zeros(d);
    for c in range {
        acc = acc.add(cells[c].as_mat());
    }
    SymMatrix::new(acc.scale(w)).expect("finite averages")
}

/// Averages of a matrix field over every dyadic cube.
#[derive(Clone, Debug)]
pub struct MatrixPyramid {
    d: usize,
    dim: u8,
    levels: Vec<Vec<f64>>,
}

impl MatrixPyramid {
    fn new(lattice: &DyadicLattice, d: usize, cells: &[SymMatrix]) -> Self {
        let j = lattice.max_level as usize;
        let dd = d * d;
        let fan = 1usize << lattice.dim;
        let mut levels = vec![Vec::new(); j + 1];
        levels[j] = cells.iter().flat_map(|m| m.as_mat().to_row_major()).collect();
        for l in (0..j).rev() {
            let fine = &levels[l + 1];
            let n = fine.len() / dd / fan;
            let mut coarse = vec![0.0; n * dd];
            for m in 0..n {
                for c in 0..fan {
                    for k in 0..dd {
                        coarse[m * dd + k] += fine[(m * fan + c) * dd + k];
                    }
                }
                for k in 0..dd {
                    coarse[m * dd + k] /= fan as f64;
                }
            }
            levels[l] = coarse;
        }
        MatrixPyramid {
            d,
            dim: lattice.dim,
            levels,
        }
    }

    pub fn get(&self, q: &DyadicCube) -> SymMatrix {
        debug_assert_eq!(q.dim, self.dim);
        let dd = self.d * self.d;
        let m = q.morton() as usize;
        SymMatrix::from_row_major(self.d, &self.levels[q.level as usize][m * dd..(m + 1) * dd])
            .expect("finite averages")
    }
}

/// `‖A^{1/2} B^{1/2}‖² = λ_max(A^{1/2} B A^{1/2})`.
pub fn product_norm_sq(a: &SymMatrix, b: &SymMatrix) -> f64 {
    let ah = a.sqrt(true).expect("PSD average");
    b.congruence(&ah).eig().max().max(0.0)
}

fn scan_cubes(
    lattice: &DyadicLattice,
    value: impl Fn(&DyadicCube) -> f64 + Sync,
) -> CharacteristicReport {
    let full = lattice.full();
    let cubes: Vec<DyadicCube> = full.all_cubes().collect();
    let (value, id) = cubes
        .par_iter()
        .map(|q| (value(q), q.id()))
        .reduce(|| (f64::NEG_INFINITY, u64::MAX), better);
    let witness_cube = *cubes.iter().find(|q| q.id() == id).expect("nonempty lattice");
    CharacteristicReport {
        value,
        witness_cube,
        witness_direction: None,
    }
}

/// `sup_Q ‖⟨W⟩_Q^{1/2} ⟨W^{-1}⟩_Q^{1/2}‖²`.
pub fn a2_matrix(w: &MatrixWeight) -> Result<CharacteristicReport, WeightError> {
    w.require_invertible()?;
    let pw = w.pyramid();
    let pinv = w.inv_pyramid();
    Ok(scan_cubes(&w.lattice, |q| product_norm_sq(&pw.get(q), &pinv.get(q))))
}

/// `sup_Q ‖⟨W⟩_Q^{1/2} ⟨V⟩_Q^{1/2}‖²`.
pub fn a2_two_weight(w: &MatrixWeight, v: &MatrixWeight) -> Result<CharacteristicReport, WeightError> {
    if w.lattice.full() != v.lattice.full() || w.d != v.d {
        return Err(WeightError::Mismatch);
    }
    let pw = w.pyramid();
    let pv = v.pyramid();
    Ok(scan_cubes(&w.lattice, |q| product_norm_sq(&pw.get(q), &pv.get(q))))
}

fn check_scalar_weight(w: &GridFunction) -> Result<(), WeightError> {
    if w.d() != 1 {
        return Err(WeightError::Mismatch);
    }
    if let Some(c) = w.values().iter().position(|v| *v < 0.0) {
        return Err(WeightError::Negative(c));
    }
    if w.is_zero() {
        return Err(WeightError::ZeroWeight);
    }
    Ok(())
}

/// `sup_Q ⟨w⟩_Q ⟨w^{-1}⟩_Q` for a positive scalar weight.
pub fn a2_scalar(w: &GridFunction) -> Result<CharacteristicReport, WeightError> {
    check_scalar_weight(w)?;
    if let Some(c) = w.values().iter().position(|v| *v <= 0.0) {
        return Err(WeightError::NotInvertible {
            cell: c,
            min_eigenvalue: 0.0,
        });
    }
    let inv = GridFunction::scalar(*w.lattice(), w.values().iter().map(|v| 1.0 / v).collect())?;
    let pw = w.pyramid();
    let pi = inv.pyramid();
    Ok(scan_cubes(w.lattice(), |q| pw.get(q)[0] * pi.get(q)[0]))
}

/// `(⟨M_Q w⟩_Q, ⟨w⟩_Q)` for every cube, level by level in Morton order.
pub fn maximal_averages(w: &GridFunction) -> Vec<Vec<(f64, f64)>> {
    let lat = w.lattice();
    let j = lat.max_level;
    let bits = lat.dim as u32;
    let pyr = w.pyramid();
    (0..=j)
        .map(|l0| {
            let avgs = pyr.level(l0);
            let mut running: Vec<f64> = avgs.iter().map(|v| v.abs()).collect();
            for l in (l0 + 1)..=j {
                let lev = pyr.level(l);
                running = (0..lev.len())
                    .map(|i| running[i >> bits].max(lev[i].abs()))
                    .collect();
            }
            let block = 1usize << (bits * (j - l0) as u32);
            running
                .chunks(block)
                .zip(avgs)
                .map(|(ch, a)| (ch.iter().sum::<f64>() / block as f64, *a))
                .collect()
        })
        .collect()
}

/// `sup_Q ⟨M_Q w⟩_Q / ⟨w⟩_Q` (0/0 counts as 1).
pub fn a_infty_scalar(w: &GridFunction) -> Result<CharacteristicReport, WeightError> {
    check_scalar_weight(w)?;
    let lat = w.lattice();
    let prof = maximal_averages(w);
    let mut best = (f64::NEG_INFINITY, u64::MAX);
    for (l, level) in prof.iter().enumerate() {
        for (m, (mw, avg)) in level.iter().enumerate() {
            let ratio = if *avg > 0.0 { mw / avg } else { 1.0 };
            let q = DyadicCube::from_morton(lat.dim, l as u8, m as u64);
            best = better(best, (ratio, q.id()));
        }
    }
    let witness = lat.full().all_cubes().find(|q| q.id() == best.1).expect("nonempty");
    Ok(CharacteristicReport {
        value: best.0,
        witness_cube: witness,
        witness_direction: None,
    })
}

/// `max_{e ∈ net} [w_e]_{A∞}`; a lower bound for the supremum over all directions.
pub fn a_infty_scalar_matrix(w: &MatrixWeight, net: &[Vec<f64>]) -> Result<CharacteristicReport, WeightError> {
    if net.is_empty() {
        return Err(WeightError::BadSpec("empty direction net".into()));
    }
    let results: Vec<(usize, CharacteristicReport)> = net
        .par_iter()
        .enumerate()
        .map(|(i, e)| a_infty_scalar(&w.direction_weight(e)).map(|r| (i, r)))
        .collect::<Result<_, _>>()?;
    let (i, mut rep) = results
        .into_iter()
        .reduce(|a, b| if b.1.value > a.1.value { b } else { a })
        .expect("nonempty net");
    rep.witness_direction = Some(net[i].clone());
    Ok(rep)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReverseHolderReport {
    pub holds: bool,
    pub worst_ratio: f64,
    pub witness_cube: DyadicCube,
    pub delta: f64,
    pub delta_cap: f64,
    pub within_precondition: bool,
}

/// `max_Q ⟨w^{1+δ}⟩_Q / ⟨w⟩_Q^{1+δ}` against the constant 2. With `strict`, a
/// `δ` above `2^{-N-1}/[w]_{A∞}` is an error; otherwise it is only flagged.
pub fn reverse_holder_check(w: &GridFunction, delta: f64, strict: bool) -> Result<ReverseHolderReport, WeightError> {
    check_scalar_weight(w)?;
    let ainf = a_infty_scalar(w)?.value;
    let cap = (-(w.lattice().dim as f64) - 1.0).exp2() / ainf;
    let within = delta > 0.0 && delta <= cap * (1.0 + 1e-12);
    if strict && !within {
        return Err(WeightError::Precondition { delta, cap });
    }
    let powered = GridFunction::scalar(*w.lattice(), w.values().iter().map(|v| v.powf(1.0 + delta)).collect())?;
    let pp = powered.pyramid();
    let pw = w.pyramid();
    let rep = scan_cubes(w.lattice(), |q| {
        let a = pw.get(q)[0];
        if a > 0.0 {
            pp.get(q)[0] / a.powf(1.0 + delta)
        } else {
            1.0
        }
    });
    Ok(ReverseHolderReport {
        holds: rep.value <= 2.0,
        worst_ratio: rep.value,
        witness_cube: rep.witness_cube,
        delta,
        delta_cap: cap,
        within_precondition: within,
    })
}

/// Norm of `f ↦ ⟨f⟩_Q 1_Q` on `L²(W)`, by power iteration on the conjugated
/// operator `W^{1/2} P_Q W^{-1/2}`. Only the cells of `Q` matter.
pub fn averaging_operator_norm(w: &MatrixWeight, q: &DyadicCube, seed: u64) -> Result<f64, WeightError> {
    w.require_invertible()?;
    w.lattice.check_cube(q)?;
    let d = w.d;
    let range = q.cell_range(w.lattice.max_level);
    let n = range.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let apply = |x: &[f64], forward: bool| -> Vec<f64> {
        // forward: W^{1/2} P W^{-1/2} x, adjoint: W^{-1/2} P W^{1/2} x.
        let (pre, post): (&[SymMatrix], &[SymMatrix]) = if forward {
            (&w.inv_sqrt[range.clone()], &w.sqrt[range.clone()])
        } else {
            (&w.sqrt[range.clone()], &w.inv_sqrt[range.clone()])
        };
        let mut avg = vec![0.0; d];
        for (i, m) in pre.iter().enumerate() {
            let y = m.as_mat().mul_vec(&x[i * d..(i + 1) * d]);
            for k in 0..d {
                avg[k] += y[k] / n as f64;
            }
        }
        let mut out = vec![0.0; n * d];
        for (i, m) in post.iter().enumerate() {
            let y = m.as_mat().mul_vec(&avg);
            out[i * d..(i + 1) * d].copy_from_slice(&y[..d]);
        }
        out
    };
    let nrm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut lam = 0.0;
    for _ in 0..10_000 {
        let y = apply(&apply(&x, true), false);
        let ny = nrm(&y);
        if ny == 0.0 {
            return Ok(0.0);
        }
        let new_lam = ny / nrm(&x);
        x = y.iter().map(|v| v / ny).collect();
        if (new_lam - lam).abs() <= 1e-14 * new_lam {
            lam = new_lam;
            break;
        }
        lam = new_lam;
    }
    Ok(lam.sqrt())
}

/// `scale · max(|x − center|, 2^{-J})^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PowerLaw {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub power: f64,
    #[serde(default)]
    pub center: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl PowerLaw {
    pub fn constant(value: f64) -> Self {
        PowerLaw {
            scale: value,
            power: 0.0,
            center: Vec::new(),
        }
    }

    fn eval(&self, x: [f64; 2], lattice: &DyadicLattice) -> f64 {
        let c = [
            self.center.first().copied().unwrap_or(0.0),
            self.center.get(1).copied().unwrap_or(0.0),
        ];
        let dist = ((x[0] - c[0]).powi(2) + if lattice.dim == 2 { (x[1] - c[1]).powi(2) } else { 0.0 }).sqrt();
        self.scale * dist.max(lattice.cell_side()).powf(self.power)
    }
}

/// Built-in weight families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum WeightSpec {
    Identity {},
    /// `max(|x − center|, 2^{-J})^p · I`, evaluated at cell centers.
    #[serde(rename_all = "camelCase")]
    ScalarPower {
        p: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    /// `R(θ(x)) diag(λ₁(x), λ₂(x)) R(θ(x))ᵀ` with `θ(x) = θ₀ + ω x₁` (d = 2).
    #[serde(rename_all = "camelCase")]
    MatrixRotating {
        lambda1: PowerLaw,
        lambda2: PowerLaw,
        #[serde(default)]
        theta0: f64,
        #[serde(default)]
        omega: f64,
    },
    /// `exp(S(x))` with independent random symmetric `S`, `‖S(x)‖ ≤ bound`.
    #[serde(rename_all = "camelCase")]
    RandomLogBounded { seed: u64, bound: f64 },
    /// One row-major `d×d` matrix per finest cell.
    #[serde(rename_all = "camelCase")]
    Explicit { matrices: Vec<Vec<f64>> },
    /// Pointwise inverse of another weight.
    #[serde(rename_all = "camelCase")]
    InverseOf { of: Box<WeightSpec> },
}

impl WeightSpec {
    pub fn build(&self, lattice: DyadicLattice, d: usize, eigen_floor: f64) -> Result<MatrixWeight, WeightError> {
        let n = lattice.n_cells();
        let cells: Vec<SymMatrix> = match self {
            WeightSpec::Identity {} => vec![SymMatrix::identity(d); n],
            WeightSpec::ScalarPower { p, center } => {
                let law = PowerLaw {
                    scale: 1.0,
                    power: *p,
                    center: center.clone(),
                };
                (0..n)
                    .map(|c| SymMatrix::identity(d).scale(law.eval(lattice.cell_center(c), &lattice)))
                    .collect()
            }
            WeightSpec::MatrixRotating {
                lambda1,
                lambda2,
                theta0,
                omega,
            } => {
                if d != 2 {
                    return Err(WeightError::BadSpec("matrixRotating needs vectorDim 2".into()));
                }
                (0..n)
                    .map(|c| {
                        let x = lattice.cell_center(c);
                        rotating_matrix(
                            theta0 + omega * x[0],
                            lambda1.eval(x, &lattice),
                            lambda2.eval(x, &lattice),
                        )
                    })
                    .collect()
            }
            WeightSpec::RandomLogBounded { seed, bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n)
                    .map(|_| {
                        let s = SymMatrix::new(Mat::from_fn(d, |_, _| rng.gen_range(-1.0..1.0))).expect("finite");
                        let e = s.eig();
                        let scale = bound / e.max().abs().max(e.min().abs()).max(1e-300);
                        s.map_eigenvalues(|l| (l * scale).exp())
                    })
                    .collect()
            }
            WeightSpec::Explicit { matrices } => {
                if matrices.len() != n {
                    return Err(WeightError::LengthMismatch {
                        got: matrices.len(),
                        expected: n,
                    });
                }
                matrices
                    .iter()
                    .map(|m| SymMatrix::from_row_major(d, m).map_err(WeightError::from))
                    .collect::<Result<_, _>>()?
            }
            WeightSpec::InverseOf { of } => {
                return of.build(lattice, d, 0.0)?.inverse().and_then(|w| {
                    MatrixWeight::new(lattice, w.cells, eigen_floor)
                });
            }
        };
        MatrixWeight::new(lattice, cells, eigen_floor)
    }
}

pub fn rotating_matrix(theta: f64, l1: f64, l2: f64) -> SymMatrix {
    let (s, c) = theta.sin_cos();
    let m = Mat::from_fn(2, |i, j| {
        let r = [[c, -s], [s, c]];
        r[i][0] * l1 * r[j][0] + r[i][1] * l2 * r[j][1]
    });
    SymMatrix::new(m).expect("finite")
}

/// Scalar power weight `max(|x − x₀|, 2^{-J})^p` as a grid function.
pub fn scalar_power_weight(lattice: DyadicLattice, p: f64, center: &[f64]) -> GridFunction {
    let law = PowerLaw {
        scale: 1.0,
        power: p,
        center: center.to_vec(),
    };
    GridFunction::from_cells(lattice, 1, |c, v| v[0] = law.eval(lattice.cell_center(c), &lattice))
}
