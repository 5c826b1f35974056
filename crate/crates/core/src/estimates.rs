//! Weighted estimates for sparse objects: square functions, Lerner
//! operators, Carleson embeddings, matrix-free operator norms and the ratio
//! experiments built on them.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{default_net_size, direction_net};
use crate::domination::{family_tree, DominationError, SparseFamily};
use crate::dyadic::{DyadicCube, DyadicError, DyadicLattice, GridFunction};
use crate::operators::{power_norm, GridOperator, NormEstimate, OperatorError};
use crate::smallmat::{op_norm, Mat, SymMatrix};
use crate::weights::{
    a2_scalar, a2_two_weight, a_infty_scalar_matrix, scalar_power_weight, MatrixWeight, PowerLaw, WeightError,
    WeightSpec,
};

/// Relative tolerance for every power iteration in this module.
pub const NORM_RTOL: f64 = 1e-6;
pub const NORM_MAX_ITER: usize = 10_000;
/// Largest grid on which the pair kernel `‖V(x)^{1/2} W(y)^{1/2}‖` is cached.
const KERNEL_CACHE_CELLS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Domination(#[from] DominationError),
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
    #[error("family lacks the `{0}` certificate")]
    MissingCertificate(&'static str),
    #[error("target `{0}` needs an operator")]
    MissingOperator(&'static str),
    #[error("target `{0}` needs a sparse family")]
    MissingFamily(&'static str),
    #[error("family is not simple: cube {0:?} has several children in the family")]
    NotSimple(DyadicCube),
    #[error("power iteration stalled after {iterations} steps (bracket {previous:.6e} .. {last:.6e})")]
    NoConvergence { iterations: usize, previous: f64, last: f64 },
    #[error("parameter {name} = {value} out of range")]
    BadParameter { name: &'static str, value: f64 },
    #[error("weights, family and function must share one lattice and vector dimension")]
    Mismatch,
}

/// Nonnegative coefficients `a_Q` on every dyadic cube, in mass form: the
/// Carleson constant is `sup_J |J|^{-1} Σ_{Q ⊆ J} a_Q`. A sparse family
/// corresponds to `a_Q = |Q|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CarlesonSequence {
    lattice: DyadicLattice,
    levels: Vec<Vec<f64>>,
}

impl CarlesonSequence {
    pub fn zeros(lattice: DyadicLattice) -> Self {
        let lattice = lattice.full();
        let levels = (0..=lattice.max_level).map(|l| vec![0.0; lattice.n_cubes_at(l)]).collect();
        CarlesonSequence { lattice, levels }
    }

    pub fn from_family(family: &SparseFamily) -> Result<Self, EstimateError> {
        if !family.is_dyadic() {
            return Err(DominationError::NotDyadic("carlesonSequence").into());
        }
        let mut s = CarlesonSequence::zeros(family.lattice);
        for c in family.cubes() {
            s.set(&c, c.volume())?;
        }
        Ok(s)
    }

    /// Independent coefficients `u·|Q|` on a random subset of cubes.
    pub fn random(lattice: DyadicLattice, seed: u64, density: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = CarlesonSequence::zeros(lattice);
        for (l, level) in s.levels.iter_mut().enumerate() {
            let vol = (-(lattice.dim as f64) * l as f64).exp2();
            for a in level.iter_mut() {
                if rng.gen_bool(density) {
                    *a = rng.gen_range(0.0..2.0) * vol;
                }
            }
        }
        s
    }

    pub fn lattice(&self) -> &DyadicLattice {
        &self.lattice
    }

    pub fn get(&self, q: &DyadicCube) -> f64 {
        self.levels[q.level as usize][q.morton() as usize]
    }

    pub fn set(&mut self, q: &DyadicCube, value: f64) -> Result<(), EstimateError> {
        self.lattice.check_cube(q)?;
        if !(value >= 0.0 && value.is_finite()) {
            return Err(EstimateError::BadParameter { name: "a_Q", value });
        }
        self.levels[q.level as usize][q.morton() as usize] = value;
        Ok(())
    }

    /// Cubes with a positive coefficient, coarse to fine.
    pub fn support(&self) -> Vec<(DyadicCube, f64)> {
        let dim = self.lattice.dim;
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(l, v)| {
                v.iter()
                    .enumerate()
                    .filter(|(_, a)| **a > 0.0)
                    .map(move |(m, a)| (DyadicCube::from_morton(dim, l as u8, m as u64), *a))
            })
            .collect()
    }

    /// `sup_J |J|^{-1} Σ_{Q ⊆ J} a_Q`.
    pub fn carleson_constant(&self) -> f64 {
        let fan = 1usize << self.lattice.dim;
        let mut below = self.levels.last().cloned().unwrap_or_default();
        let mut best: f64 = 0.0;
        let depth = self.levels.len();
        for l in (0..depth).rev() {
            if l + 1 < depth {
                below = below.chunks(fan).zip(&self.levels[l]).map(|(ch, a)| a + ch.iter().sum::<f64>()).collect();
            }
            let vol = (-(self.lattice.dim as f64) * l as f64).exp2();
            best = below.iter().fold(best, |b, s| b.max(s / vol));
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SquareKind {
    /// `‖V(x)^{1/2} W(y)^{1/2}‖`, depends on the output point.
    One,
    /// `‖⟨W⟩_Q^{-1/2} W(y)^{1/2}‖`.
    Two,
    /// `‖⟨V⟩_Q^{1/2} W(y)^{1/2}‖`.
    Three,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Variant {
    /// Acts on `ℝ^d`-valued `f` through `‖A(y) f(y)‖`.
    Vector,
    /// Acts on `|f|` through `‖A(y)‖ |f(y)|`.
    Scalar,
}

fn check_inputs(w: &MatrixWeight, v: Option<&MatrixWeight>, seq: &CarlesonSequence) -> Result<(), EstimateError> {
    if w.lattice().full() != seq.lattice {
        return Err(EstimateError::Mismatch);
    }
    if let Some(v) = v {
        if v.lattice().full() != seq.lattice || v.d() != w.d() {
            return Err(EstimateError::Mismatch);
        }
    }
    Ok(())
}

fn need_v(kind: SquareKind, v: Option<&MatrixWeight>) -> Result<&MatrixWeight, EstimateError> {
    v.ok_or(EstimateError::Weight(WeightError::BadSpec(format!("square function {kind:?} needs V"))))
}

/// `⟨W⟩_Q^{-1/2}` (pseudo-inverse with a warning when singular) or `⟨V⟩_Q^{1/2}`.
fn cube_factor(kind: SquareKind, w: &MatrixWeight, v: Option<&MatrixWeight>, q: &DyadicCube) -> Result<SymMatrix, EstimateError> {
    match kind {
        SquareKind::Two => {
            let avg = w.average(q)?;
            let e = avg.eig();
            if e.min() <= 1e-14 * e.max().abs() {
                log::warn!("average of W over {q:?} is singular; using the pseudo-inverse");
            }
            Ok(avg.inv_sqrt(true).map_err(WeightError::from)?)
        }
        SquareKind::Three => Ok(need_v(kind, v)?.average(q)?.sqrt(true).map_err(WeightError::from)?),
        SquareKind::One => unreachable!("kind one has no cube factor"),
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn apply_mat(m: &Mat, v: &[f64]) -> f64 {
    vec_norm(&m.mul_vec(v)[..v.len()])
}

/// Average over `q` of the density `y ↦ ‖A(y) f(y)‖` or `‖A(y)‖·|f(y)|`.
fn density_average(variant: Variant, q: &DyadicCube, j: u8, f: &GridFunction, a: impl Fn(usize) -> Mat) -> f64 {
    let range = q.cell_range(j);
    let n = range.len() as f64;
    range
        .map(|y| match variant {
            Variant::Vector => apply_mat(&a(y), f.cell(y)),
            Variant::Scalar => op_norm(&a(y)) * vec_norm(f.cell(y)),
        })
        .sum::<f64>()
        / n
}

fn check_f(f: &GridFunction, w: &MatrixWeight, variant: Variant) -> Result<(), EstimateError> {
    if f.lattice().full() != w.lattice().full() {
        return Err(EstimateError::Mismatch);
    }
    if variant == Variant::Vector && f.d() != w.d() {
        return Err(EstimateError::Mismatch);
    }
    Ok(())
}

/// Pointwise values of the sparse square function of the given kind, with
/// multipliers `a_Q/|Q|` from the sequence.
pub fn square_function(
    kind: SquareKind,
    variant: Variant,
    w: &MatrixWeight,
    v: Option<&MatrixWeight>,
    seq: &CarlesonSequence,
    f: &GridFunction,
) -> Result<GridFunction, EstimateError> {
    check_inputs(w, v, seq)?;
    check_f(f, w, variant)?;
    let lat = seq.lattice;
    let j = lat.max_level;
    let mut sq = vec![0.0; lat.n_cells()];
    for (q, a) in seq.support() {
        let m = a / q.volume();
        match kind {
            SquareKind::One => {
                let v = need_v(kind, v)?;
                for x in q.cell_range(j) {
                    let vx = v.sqrt_cell(x).as_mat();
                    let val = density_average(variant, &q, j, f, |y| vx.mul(w.sqrt_cell(y).as_mat()));
                    sq[x] += m * val * val;
                }
            }
            _ => {
                let b = cube_factor(kind, w, v, &q)?;
                let val = density_average(variant, &q, j, f, |y| b.as_mat().mul(w.sqrt_cell(y).as_mat()));
                for x in q.cell_range(j) {
                    sq[x] += m * val * val;
                }
            }
        }
    }
    Ok(GridFunction::scalar(lat, sq.into_iter().map(f64::sqrt).collect())?)
}

/// Pointwise values of the Lerner operator `Σ_Q m_Q ⟨‖V(x)^{1/2} W^{1/2} ·‖⟩_Q 1_Q(x)`.
pub fn lerner_apply(
    variant: Variant,
    w: &MatrixWeight,
    v: &MatrixWeight,
    seq: &CarlesonSequence,
    f: &GridFunction,
) -> Result<GridFunction, EstimateError> {
    check_inputs(w, Some(v), seq)?;
    check_f(f, w, variant)?;
    let lat = seq.lattice;
    let j = lat.max_level;
    let mut out = vec![0.0; lat.n_cells()];
    for (q, a) in seq.support() {
        let m = a / q.volume();
        for x in q.cell_range(j) {
            let vx = v.sqrt_cell(x).as_mat();
            out[x] += m * density_average(variant, &q, j, f, |y| vx.mul(w.sqrt_cell(y).as_mat()));
        }
    }
    Ok(GridFunction::scalar(lat, out)?)
}

/// `‖V(x)^{1/2} W(y)^{1/2}‖`, factored when both weights are scalar multiples
/// of the identity, cached on small grids, computed on demand otherwise.
enum PairKernel<'a> {
    Factored { left: Vec<f64>, right: Vec<f64> },
    Cached { n: usize, values: Vec<f64> },
    Direct { w: &'a MatrixWeight, v: &'a MatrixWeight },
}

fn scalar_diagonal(w: &MatrixWeight) -> Option<Vec<f64>> {
    let d = w.d();
    w.cells()
        .iter()
        .map(|m| {
            let c = m.get(0, 0);
            let iso = (0..d).all(|i| (0..d).all(|k| m.get(i, k) == if i == k { c } else { 0.0 }));
            iso.then_some(c.max(0.0).sqrt())
        })
        .collect()
}

impl<'a> PairKernel<'a> {
    fn new(w: &'a MatrixWeight, v: &'a MatrixWeight) -> Self {
        if let (Some(right), Some(left)) = (scalar_diagonal(w), scalar_diagonal(v)) {
            return PairKernel::Factored { left, right };
        }
        let n = w.cells().len();
        if n <= KERNEL_CACHE_CELLS {
            let values = (0..n * n)
                .into_par_iter()
                .map(|i| op_norm(&v.sqrt_cell(i / n).as_mat().mul(w.sqrt_cell(i % n).as_mat())))
                .collect();
            PairKernel::Cached { n, values }
        } else {
            PairKernel::Direct { w, v }
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        match self {
            PairKernel::Factored { left, right } => left[x] * right[y],
            PairKernel::Cached { n, values } => values[x * n + y],
            PairKernel::Direct { w, v } => op_norm(&v.sqrt_cell(x).as_mat().mul(w.sqrt_cell(y).as_mat())),
        }
    }

    /// `Σ_{y ∈ Q} K(x,y) u(y)` (or `Σ_x K(x,y) u(x)` when `transpose`) for every
    /// point of `Q`, written into `out` with weight `c`.
    fn block(&self, range: std::ops::Range<usize>, u: &[f64], c: f64, transpose: bool, out: &mut [f64]) {
        match self {
            PairKernel::Factored { left, right } => {
                let (inner, outer) = if transpose { (left, right) } else { (right, left) };
                let s: f64 = range.clone().map(|y| inner[y] * u[y]).sum();
                for x in range {
                    out[x] += c * outer[x] * s;
                }
            }
            _ => {
                for x in range.clone() {
                    let s: f64 = range
                        .clone()
                        .map(|y| if transpose { self.at(y, x) } else { self.at(x, y) } * u[y])
                        .sum();
                    out[x] += c * s;
                }
            }
        }
    }
}

fn finish_norm(est: NormEstimate) -> Result<NormEstimate, EstimateError> {
    if est.converged {
        Ok(est)
    } else {
        Err(EstimateError::NoConvergence {
            iterations: est.iterations,
            previous: est.previous,
            last: est.value,
        })
    }
}

/// `L²` operator norm of the scalar square function (nonnegative kernel, so
/// the norm is attained on nonnegative inputs and equals that of a linear map).
pub fn square_function_norm(
    kind: SquareKind,
    w: &MatrixWeight,
    v: Option<&MatrixWeight>,
    seq: &CarlesonSequence,
    seed: u64,
) -> Result<NormEstimate, EstimateError> {
    check_inputs(w, v, seq)?;
    let j = seq.lattice.max_level;
    let n = seq.lattice.n_cells();
    let cubes = seq.support();
    match kind {
        SquareKind::One => {
            let v = need_v(kind, v)?;
            let kernel = PairKernel::new(w, v);
            // Rows indexed by (cube, point); stored cube-major.
            let offsets: Vec<usize> = cubes
                .iter()
                .scan(0, |acc, (q, _)| {
                    let o = *acc;
                    *acc += q.cell_range(j).len();
                    Some(o)
                })
                .collect();
            let rows = offsets.last().map_or(0, |o| o + cubes.last().map_or(0, |(q, _)| q.cell_range(j).len()));
            let coef: Vec<f64> = cubes
                .iter()
                .map(|(q, a)| (a / q.volume()).sqrt() / q.cell_range(j).len() as f64)
                .collect();
            let apply = |u: &[f64]| {
                let mut out = vec![0.0; rows];
                for (i, (q, _)) in cubes.iter().enumerate() {
                    let r = q.cell_range(j);
                    let mut tmp = vec![0.0; n];
                    kernel.block(r.clone(), u, coef[i], false, &mut tmp);
                    out[offsets[i]..offsets[i] + r.len()].copy_from_slice(&tmp[r]);
                }
                out
            };
            let adjoint = |z: &[f64]| {
                let mut out = vec![0.0; n];
                for (i, (q, _)) in cubes.iter().enumerate() {
                    let r = q.cell_range(j);
                    let mut src = vec![0.0; n];
                    src[r.clone()].copy_from_slice(&z[offsets[i]..offsets[i] + r.len()]);
                    kernel.block(r, &src, coef[i], true, &mut out);
                }
                out
            };
            finish_norm(power_norm(n, apply, adjoint, seed, NORM_RTOL, NORM_MAX_ITER))
        }
        _ => {
            let tables: Vec<(std::ops::Range<usize>, f64, Vec<f64>)> = cubes
                .iter()
                .map(|(q, a)| {
                    let b = cube_factor(kind, w, v, q)?;
                    let r = q.cell_range(j);
                    let c = (a / q.volume() / r.len() as f64).sqrt();
                    let vals = r.clone().map(|y| op_norm(&b.as_mat().mul(w.sqrt_cell(y).as_mat()))).collect();
                    Ok((r, c, vals))
                })
                .collect::<Result<_, EstimateError>>()?;
            let apply = |u: &[f64]| {
                tables
                    .iter()
                    .map(|(r, c, vals)| c * r.clone().zip(vals).map(|(y, a)| a * u[y]).sum::<f64>())
                    .collect::<Vec<f64>>()
            };
            let adjoint = |z: &[f64]| {
                let mut out = vec![0.0; n];
                for ((r, c, vals), zi) in tables.iter().zip(z) {
                    for (y, a) in r.clone().zip(vals) {
                        out[y] += c * a * zi;
                    }
                }
                out
            };
            finish_norm(power_norm(n, apply, adjoint, seed, NORM_RTOL, NORM_MAX_ITER))
        }
    }
}

/// `L²` operator norm of the scalar Lerner operator.
pub fn lerner_norm(w: &MatrixWeight, v: &MatrixWeight, seq: &CarlesonSequence, seed: u64) -> Result<NormEstimate, EstimateError> {
    check_inputs(w, Some(v), seq)?;
    let j = seq.lattice.max_level;
    let n = seq.lattice.n_cells();
    let cubes = seq.support();
    let kernel = PairKernel::new(w, v);
    let run = |u: &[f64], transpose: bool| {
        let mut out = vec![0.0; n];
        for (q, a) in &cubes {
            let r = q.cell_range(j);
            let c = a / q.volume() / r.len() as f64;
            kernel.block(r, u, c, transpose, &mut out);
        }
        out
    };
    finish_norm(power_norm(n, |u| run(u, false), |u| run(u, true), seed, NORM_RTOL, NORM_MAX_ITER))
}

/// Largest singular value of `f ↦ W^{1/2} T (V^{1/2} f)` in unweighted `L²`.
pub fn composite_norm(t: &dyn GridOperator, w: &MatrixWeight, v: &MatrixWeight, seed: u64) -> Result<NormEstimate, EstimateError> {
    let lat = *t.lattice();
    if w.lattice().full() != lat.full() || v.lattice().full() != lat.full() || w.d() != v.d() {
        return Err(EstimateError::Mismatch);
    }
    let d = w.d();
    let n = lat.n_cells();
    let mult = |m: &MatrixWeight, x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for c in 0..n {
            let y = m.sqrt_cell(c).as_mat().mul_vec(&x[c * d..(c + 1) * d]);
            out[c * d..(c + 1) * d].copy_from_slice(&y[..d]);
        }
        out
    };
    let through = |first: &MatrixWeight, second: &MatrixWeight, x: &[f64], adjoint: bool| -> Vec<f64> {
        let g = GridFunction::new(lat.full(), d, mult(first, x)).expect("consistent length");
        let tg = if adjoint { t.apply_adjoint(&g) } else { t.apply(&g) }.expect("operator on its own lattice");
        mult(second, tg.values())
    };
    finish_norm(power_norm(
        n * d,
        |x| through(v, w, x, false),
        |y| through(w, v, y, true),
        seed,
        NORM_RTOL,
        NORM_MAX_ITER,
    ))
}

/// Characteristics entering the bound products.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Characteristics {
    pub a2_two_weight: f64,
    pub a_infty_w: f64,
    pub a_infty_v: f64,
}

impl Characteristics {
    pub fn compute(w: &MatrixWeight, v: &MatrixWeight) -> Result<Self, EstimateError> {
        let net = direction_net(w.d(), default_net_size(w.d()));
        Ok(Characteristics {
            a2_two_weight: a2_two_weight(w, v)?.value,
            a_infty_w: a_infty_scalar_matrix(w, &net)?.value,
            a_infty_v: a_infty_scalar_matrix(v, &net)?.value,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BoundTarget {
    S2,
    S3,
    S1,
    Lerner,
    SimpleLerner,
    Composite,
}

impl BoundTarget {
    pub const ALL: [BoundTarget; 6] = [
        BoundTarget::S2,
        BoundTarget::S3,
        BoundTarget::S1,
        BoundTarget::Lerner,
        BoundTarget::SimpleLerner,
        BoundTarget::Composite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BoundTarget::S2 => "s2",
            BoundTarget::S3 => "s3",
            BoundTarget::S1 => "s1",
            BoundTarget::Lerner => "lerner",
            BoundTarget::SimpleLerner => "simpleLerner",
            BoundTarget::Composite => "composite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundRatioReport {
    pub target: BoundTarget,
    pub measured_norm_sq: f64,
    pub bound_value: f64,
    pub ratio: f64,
    /// Seed of the power-iteration start vector realizing the norm.
    pub witness_seed: u64,
    pub iterations: usize,
    pub characteristics: Characteristics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl BoundRatioReport {
    pub fn recomputed_ratio(&self) -> f64 {
        self.measured_norm_sq / self.bound_value
    }
}

/// Whether every member has at most one child in the family.
pub fn is_simple(family: &SparseFamily) -> Result<(), EstimateError> {
    let (cubes, parents) = family_tree(family);
    let mut count = vec![0usize; cubes.len()];
    for p in parents.into_iter().flatten() {
        count[p] += 1;
        if count[p] > 1 {
            return Err(EstimateError::NotSimple(cubes[p]));
        }
    }
    Ok(())
}

/// Measured squared norm of the designated object divided by the product of
/// characteristics it is bounded by (absolute constants set to one).
pub fn bound_ratio(
    target: BoundTarget,
    operator: Option<&dyn GridOperator>,
    w: &MatrixWeight,
    v: &MatrixWeight,
    family: Option<&SparseFamily>,
    chars: &Characteristics,
    seed: u64,
) -> Result<BoundRatioReport, EstimateError> {
    let dim_factor = (w.lattice().dim as f64).exp2() * w.d() as f64;
    let need_family = || family.ok_or(EstimateError::MissingFamily(target.name()));
    let lambda = || -> Result<f64, EstimateError> {
        need_family()?
            .certificates
            .dyadic_carleson
            .ok_or(EstimateError::MissingCertificate("dyadicCarleson"))
    };
    let seq = || CarlesonSequence::from_family(need_family()?);
    let (est, bound, lam) = match target {
        BoundTarget::S2 => {
            let l = lambda()?;
            (square_function_norm(SquareKind::Two, w, Some(v), &seq()?, seed)?, l * dim_factor * chars.a_infty_w, Some(l))
        }
        BoundTarget::S3 | BoundTarget::S1 => {
            let l = lambda()?;
            let kind = if target == BoundTarget::S3 { SquareKind::Three } else { SquareKind::One };
            (
                square_function_norm(kind, w, Some(v), &seq()?, seed)?,
                l * dim_factor * chars.a2_two_weight * chars.a_infty_w,
                Some(l),
            )
        }
        BoundTarget::Lerner => {
            let l = lambda()?;
            (
                lerner_norm(w, v, &seq()?, seed)?,
                l * l * dim_factor * dim_factor * chars.a2_two_weight * chars.a_infty_w * chars.a_infty_v,
                Some(l),
            )
        }
        BoundTarget::SimpleLerner => {
            is_simple(need_family()?)?;
            let s = chars.a_infty_w.sqrt() + chars.a_infty_v.sqrt();
            (lerner_norm(w, v, &seq()?, seed)?, dim_factor * chars.a2_two_weight * s * s, None)
        }
        BoundTarget::Composite => {
            let t = operator.ok_or(EstimateError::MissingOperator("composite"))?;
            (
                composite_norm(t, w, v, seed)?,
                chars.a_infty_v * chars.a_infty_w * chars.a2_two_weight,
                None,
            )
        }
    };
    let measured_norm_sq = est.value * est.value;
    Ok(BoundRatioReport {
        target,
        measured_norm_sq,
        bound_value: bound,
        ratio: measured_norm_sq / bound,
        witness_seed: seed,
        iterations: est.iterations,
        characteristics: chars.clone(),
        lambda: lam,
    })
}

/// Chain `[0,1)^N ⊃ [0,1/2)^N ⊃ … ⊃ [0,2^{-n})^N` with certificates.
pub fn make_simple_sparse(lattice: DyadicLattice, n: u8) -> Result<SparseFamily, EstimateError> {
    if n > lattice.max_level {
        return Err(EstimateError::BadParameter { name: "depth", value: n as f64 });
    }
    let cubes: Vec<DyadicCube> = (0..=n).map(|l| DyadicCube::from_morton(lattice.dim, l, 0)).collect();
    let mut fam = SparseFamily::dyadic(lattice, &cubes);
    fam.certify()?;
    Ok(fam)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CarlesonEmbeddingReport {
    pub lhs: f64,
    pub rhs: f64,
    pub carleson_constant: f64,
    pub holds: bool,
}

/// `Σ_Q a_Q ⟨f⟩_Q^p` against `(p′)^p A ‖f‖_p^p` for Lebesgue measure.
pub fn carleson_embedding(a: &CarlesonSequence, f: &GridFunction, p: f64) -> Result<CarlesonEmbeddingReport, EstimateError> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(EstimateError::BadParameter { name: "p", value: p });
    }
    if f.d() != 1 || f.lattice().full() != a.lattice {
        return Err(EstimateError::Mismatch);
    }
    if let Some(c) = f.values().iter().position(|v| *v < 0.0) {
        return Err(EstimateError::BadParameter { name: "f", value: f.values()[c] });
    }
    let pyr = f.pyramid();
    let lhs: f64 = a.support().iter().map(|(q, aq)| aq * pyr.get(q)[0].powf(p)).sum();
    let carleson_constant = a.carleson_constant();
    let pp = p / (p - 1.0);
    let norm_p: f64 = f.values().iter().map(|v| v.powf(p)).sum::<f64>() * a.lattice.cell_volume();
    let rhs = pp.powf(p) * carleson_constant * norm_p;
    Ok(CarlesonEmbeddingReport {
        lhs,
        rhs,
        carleson_constant,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

/// `⟨‖⟨W⟩_Q^{-1/2} W^{1/2}‖²_{HS}⟩_Q`, equal to `d` for invertible averages.
pub fn trace_identity(w: &MatrixWeight, q: &DyadicCube) -> Result<f64, EstimateError> {
    let b = cube_factor(SquareKind::Two, w, None, q)?;
    let j = w.lattice().max_level;
    let r = q.cell_range(j);
    let n = r.len() as f64;
    Ok(r.map(|y| b.as_mat().mul(w.sqrt_cell(y).as_mat()).hs_norm().powi(2)).sum::<f64>() / n)
}

/// `⟨‖⟨V⟩_Q^{1/2} W^{1/2}‖²_{HS}⟩_Q`, at most `d·[W,V]`.
pub fn trace_bound(w: &MatrixWeight, v: &MatrixWeight, q: &DyadicCube) -> Result<f64, EstimateError> {
    let b = cube_factor(SquareKind::Three, w, Some(v), q)?;
    let j = w.lattice().max_level;
    let r = q.cell_range(j);
    let n = r.len() as f64;
    Ok(r.map(|y| b.as_mat().mul(w.sqrt_cell(y).as_mat()).hs_norm().powi(2)).sum::<f64>() / n)
}

/// `(L̃f, g)` against `‖S̃₃ f‖·‖S̃₂^V g‖` for nonnegative scalar `f, g`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BilinearReport {
    pub pairing: f64,
    pub product: f64,
    pub holds: bool,
}

pub fn bilinear_factorization(
    w: &MatrixWeight,
    v: &MatrixWeight,
    seq: &CarlesonSequence,
    f: &GridFunction,
    g: &GridFunction,
) -> Result<BilinearReport, EstimateError> {
    let vol = seq.lattice.cell_volume();
    let lf = lerner_apply(Variant::Scalar, w, v, seq, f)?;
    let pairing = lf.values().iter().zip(g.values()).map(|(a, b)| a * b.abs()).sum::<f64>() * vol;
    let s3 = square_function(SquareKind::Three, Variant::Scalar, w, Some(v), seq, f)?;
    let s2v = square_function(SquareKind::Two, Variant::Scalar, v, None, seq, g)?;
    let product = s3.l2_norm() * s2v.l2_norm();
    Ok(BilinearReport {
        pairing,
        product,
        holds: pairing <= product * (1.0 + 1e-12) + 1e-300,
    })
}

/// Three-way split of the pairing over a simple chain.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SplitReport {
    pub total: f64,
    /// Pairs with `y` in the part of `Q` outside its child.
    pub outer: f64,
    /// Pairs with `x` outside the child and `y` inside it.
    pub mixed: f64,
    /// Pairs with both points in the child.
    pub inner: f64,
}

/// `Σ_Q |Q|^{-1} ∬_{Q×Q} f(y) ‖W(y)^{1/2} V(x)^{1/2}‖ g(x)` split into the
/// pieces over `Q × E_Q`, `E_Q × Q̂` and `Q̂ × Q̂`.
pub fn simple_chain_split(
    w: &MatrixWeight,
    v: &MatrixWeight,
    family: &SparseFamily,
    f: &GridFunction,
    g: &GridFunction,
) -> Result<SplitReport, EstimateError> {
    is_simple(family)?;
    let (cubes, parents) = family_tree(family);
    let lat = family.lattice;
    let j = lat.max_level;
    let vol = lat.cell_volume();
    let kernel = PairKernel::new(w, v);
    let mut child: Vec<Option<DyadicCube>> = vec![None; cubes.len()];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            child[*p] = Some(cubes[i]);
        }
    }
    let mut rep = SplitReport {
        total: 0.0,
        outer: 0.0,
        mixed: 0.0,
        inner: 0.0,
    };
    for (i, q) in cubes.iter().enumerate() {
        let hat = child[i].map(|c| c.cell_range(j));
        let in_hat = |c: usize| hat.as_ref().is_some_and(|h| h.contains(&c));
        let scale = vol * vol / q.volume();
        for x in q.cell_range(j) {
            for y in q.cell_range(j) {
                let term = scale * f.cell(y)[0].abs() * kernel.at(x, y) * g.cell(x)[0].abs();
                rep.total += term;
                match (in_hat(x), in_hat(y)) {
                    (_, false) => rep.outer += term,
                    (false, true) => rep.mixed += term,
                    (true, true) => rep.inner += term,
                }
            }
        }
    }
    Ok(rep)
}

/// Largest excess of a vector object over its scalar majorant.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DomToScalarReport {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub lerner: f64,
}

impl DomToScalarReport {
    pub fn holds(&self, tol: f64) -> bool {
        [self.s1, self.s2, self.s3, self.lerner].iter().all(|e| *e <= tol)
    }
}

pub fn dom_to_scalar(
    w: &MatrixWeight,
    v: &MatrixWeight,
    seq: &CarlesonSequence,
    f: &GridFunction,
) -> Result<DomToScalarReport, EstimateError> {
    let abs = f.pointwise_norm();
    let excess = |a: GridFunction, b: GridFunction| {
        a.values().iter().zip(b.values()).map(|(x, y)| x - y).fold(f64::NEG_INFINITY, f64::max)
    };
    let sq = |kind| -> Result<f64, EstimateError> {
        Ok(excess(
            square_function(kind, Variant::Vector, w, Some(v), seq, f)?,
            square_function(kind, Variant::Scalar, w, Some(v), seq, &abs)?,
        ))
    };
    Ok(DomToScalarReport {
        s1: sq(SquareKind::One)?,
        s2: sq(SquareKind::Two)?,
        s3: sq(SquareKind::Three)?,
        lerner: excess(
            lerner_apply(Variant::Vector, w, v, seq, f)?,
            lerner_apply(Variant::Scalar, w, v, seq, &abs)?,
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeRow {
    pub p: f64,
    pub a2: f64,
    pub norm: f64,
    pub ratio: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PowerProbe {
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of `log norm` against `log [w]_{A₂}`.
    pub slope: Option<f64>,
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Scalar Lerner operator over the full chain at the origin with the power
/// weight `w = max(|x|, 2^{-J})^p` and `V = w^{-1}`, for each `p`.
pub fn power_weight_probe(lattice: DyadicLattice, p_grid: &[f64], seed: u64) -> Result<PowerProbe, EstimateError> {
    if lattice.dim != 1 {
        return Err(EstimateError::Mismatch);
    }
    let lattice = lattice.full();
    let chain = make_simple_sparse(lattice, lattice.max_level)?;
    let seq = CarlesonSequence::from_family(&chain)?;
    let rows: Vec<ProbeRow> = p_grid
        .par_iter()
        .map(|&p| {
            let w = scalar_power_weight(lattice, p, &[0.0]);
            let a2 = a2_scalar(&w)?.value;
            let wm = MatrixWeight::from_scalar(&w, 1)?;
            let vm = wm.inverse()?;
            let est = lerner_norm(&wm, &vm, &seq, seed)?;
            Ok(ProbeRow {
                p,
                a2,
                norm: est.value,
                ratio: est.value / a2,
                iterations: est.iterations,
            })
        })
        .collect::<Result<_, EstimateError>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.a2.ln(), r.norm.ln())).collect();
    Ok(PowerProbe {
        slope: least_squares_slope(&pts),
        rows,
    })
}

/// Rotating-eigenvector weight with eigenvalues `(10^{log_ratio}, 1)`.
pub fn rotating_spec(log_ratio: f64, theta0: f64, omega: f64) -> WeightSpec {
    WeightSpec::MatrixRotating {
        lambda1: PowerLaw::constant(10f64.powf(log_ratio)),
        lambda2: PowerLaw::constant(1.0),
        theta0,
        omega,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchResult {
    pub alpha: f64,
    pub best_ratio: f64,
    pub best_norm: f64,
    pub best_a2: f64,
    pub best_spec: WeightSpec,
    pub evaluations: usize,
}

/// Random restarts followed by coordinate perturbation over rotating weights
/// `(log₁₀ λ₁, θ₀, ω)`, maximizing `‖W^{1/2} T W^{-1/2}‖ / [W]_{A₂}^α`.
pub fn counterexample_search(
    t: &dyn GridOperator,
    alpha: f64,
    budget: usize,
    seed: u64,
) -> Result<SearchResult, EstimateError> {
    if !(1.0..=1.5).contains(&alpha) {
        return Err(EstimateError::BadParameter { name: "alpha", value: alpha });
    }
    if budget == 0 {
        return Err(EstimateError::BadParameter { name: "budget", value: 0.0 });
    }
    let lat = t.lattice().full();
    let eval = |x: [f64; 3]| -> Result<(f64, f64, f64), EstimateError> {
        let w = rotating_spec(x[0], x[1], x[2]).build(lat, 2, 0.0)?;
        let winv = w.inverse()?;
        let a2 = crate::weights::a2_matrix(&w)?.value;
        let norm = composite_norm(t, &w, &winv, seed)?.value;
        Ok((norm / a2.powf(alpha), norm, a2))
    };
    let bounds = [(0.0, 3.0), (0.0, PI), (0.0, 4.0 * PI)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let restarts = budget.div_ceil(2);
    let mut best: Option<([f64; 3], (f64, f64, f64))> = None;
    let mut evaluations = 0;
    for _ in 0..restarts {
        let x = [
            rng.gen_range(bounds[0].0..bounds[0].1),
            rng.gen_range(bounds[1].0..bounds[1].1),
            rng.gen_range(bounds[2].0..bounds[2].1),
        ];
        let r = eval(x)?;
        evaluations += 1;
        if best.as_ref().is_none_or(|b| r.0 > b.1 .0) {
            best = Some((x, r));
        }
    }
    let (mut x, mut r) = best.expect("budget is positive");
    let mut step = [0.5, 0.5, 1.0];
    while evaluations < budget {
        let k = evaluations % 3;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut y = x;
        y[k] = (y[k] + sign * step[k]).clamp(bounds[k].0, bounds[k].1);
        let ry = eval(y)?;
        evaluations += 1;
        if ry.0 > r.0 {
            x = y;
            r = ry;
        } else {
            step[k] *= 0.7;
        }
    }
    Ok(SearchResult {
        alpha,
        best_ratio: r.0,
        best_norm: r.1,
        best_a2: r.2,
        best_spec: rotating_spec(x[0], x[1], x[2]),
        evaluations,
    })
}

/// Random dyadic family whose members have child mass at most `eps|Q|`,
/// grown top-down from the root.
pub fn random_sparse_family(lattice: DyadicLattice, eps: f64, seed: u64) -> Result<SparseFamily, EstimateError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(EstimateError::BadParameter { name: "eps", value: eps });
    }
    let lattice = lattice.full();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![lattice.root()];
    let mut stack = vec![lattice.root()];
    let mut seen = HashSet::new();
    while let Some(q) = stack.pop() {
        if q.level >= lattice.max_level {
            continue;
        }
        let mut budget = eps * q.volume();
        let max_gen = (lattice.max_level - q.level).min(3);
        for _ in 0..4 {
            let g = rng.gen_range(1..=max_gen);
            let kids = q.descendants(g);
            let c = kids[rng.gen_range(0..kids.len())];
            let overlaps = out.iter().any(|o| o != &q && (o.contains(&c) || c.contains(o)));
            if c.volume() <= budget && !overlaps && seen.insert(c) {
                budget -= c.volume();
                out.push(c);
                stack.push(c);
            }
        }
    }
    let mut fam = SparseFamily::dyadic(lattice, &out);
    fam.certify()?;
    Ok(fam)
}
