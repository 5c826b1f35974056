//! Zonotopes as exact convex-body averages, membership certificates, John
//! ellipsoids and the rank-one representation of points of a body average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{DyadicCube, DyadicError, GridBox, GridFunction};
use crate::smallmat::{solve_dense, Mat, MatError, SymMatrix};

pub const MEMBERSHIP_MAX_ITER: usize = 20_000;
pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-9;
/// Cap on facet-normal candidates fed to the John optimizer.
const MAX_FACET_NORMALS: usize = 20_000;
const SPAN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zonotope is degenerate (zero body)")]
    Degenerate,
    #[error("ellipsoid certificate failed: inner slack {inner:.3e}, outer slack {outer:.3e} (limit {limit:.6})")]
    CertificateFailed { inner: f64, outer: f64, limit: f64 },
    #[error("point at cell {cell} is not in the body (residual {residual:.3e})")]
    MembershipViolated { cell: usize, residual: f64 },
    #[error("membership test undecided after {0} iterations")]
    Indeterminate(usize),
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `{Σ t_i g_i : t ∈ [-1,1]^m}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    d: usize,
    gens: Vec<f64>,
}

impl Zonotope {
    pub fn new(d: usize, gens: Vec<f64>) -> Result<Self, ConvexError> {
        if d == 0 || !gens.len().is_multiple_of(d) {
            return Err(ConvexError::DimensionMismatch(gens.len(), d));
        }
        Ok(Zonotope { d, gens })
    }

    pub fn from_generators(d: usize, gens: &[Vec<f64>]) -> Result<Self, ConvexError> {
        let mut flat = Vec::with_capacity(gens.len() * d);
        for g in gens {
            if g.len() != d {
                return Err(ConvexError::DimensionMismatch(g.len(), d));
            }
            flat.extend_from_slice(g);
        }
        Ok(Zonotope { d, gens: flat })
    }

    pub fn zero(d: usize) -> Self {
        Zonotope { d, gens: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.gens.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.gens.is_empty()
    }

    pub fn generator(&self, i: usize) -> &[f64] {
        &self.gens[i * self.d..(i + 1) * self.d]
    }

    pub fn generators(&self) -> impl Iterator<Item = &[f64]> {
        self.gens.chunks_exact(self.d)
    }

    pub fn push(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.d);
        self.gens.extend_from_slice(g);
    }

    /// `h(e) = Σ |g_i·e|`.
    pub fn support(&self, e: &[f64]) -> f64 {
        self.generators().map(|g| dot(g, e).abs()).sum()
    }

    pub fn scale(&self, c: f64) -> Zonotope {
        Zonotope {
            d: self.d,
            gens: self.gens.iter().map(|v| c * v).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.gens.iter().all(|v| *v == 0.0)
    }

    /// `Σ g_i g_iᵀ`.
    pub fn gram(&self) -> SymMatrix {
        let mut m = Mat::zeros(self.d);
        for g in self.generators() {
            for i in 0..self.d {
                for j in 0..self.d {
                    m.set(i, j, m.get(i, j) + g[i] * g[j]);
                }
            }
        }
        SymMatrix::new(m).expect("finite generators")
    }
}

/// Generators `(|c|/|Q|) f(c)` for every finest cell `c ⊆ Q`.
pub fn body_average(f: &GridFunction, q: &DyadicCube) -> Result<Zonotope, ConvexError> {
    f.lattice().check_cube(q)?;
    let range = q.cell_range(f.lattice().max_level);
    let w = 1.0 / range.len() as f64;
    let d = f.d();
    let mut gens = Vec::with_capacity(range.len() * d);
    for cell in range {
        gens.extend(f.cell(cell).iter().map(|v| w * v));
    }
    Ok(Zonotope { d, gens })
}

/// Generators `(|c|/|B|) f(c)` for every finest cell `c` of a grid box.
pub fn body_average_box(f: &GridFunction, b: &GridBox) -> Zonotope {
    let cells = b.cells(f.lattice());
    let w = 1.0 / cells.len() as f64;
    let d = f.d();
    let mut gens = Vec::with_capacity(cells.len() * d);
    for cell in cells {
        gens.extend(f.cell(cell).iter().map(|v| w * v));
    }
    Zonotope { d, gens }
}

pub fn minkowski_sum(a: &Zonotope, b: &Zonotope) -> Result<Zonotope, ConvexError> {
    if a.d != b.d {
        return Err(ConvexError::DimensionMismatch(a.d, b.d));
    }
    let mut gens = a.gens.clone();
    gens.extend_from_slice(&b.gens);
    Ok(Zonotope { d: a.d, gens })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MembershipStatus {
    Inside,
    Outside,
    Indeterminate,
}

#[derive(Clone, Debug)]
pub struct MembershipCert {
    pub status: MembershipStatus,
    /// `‖Σ t_i g_i − x‖` at the returned coefficients.
    pub residual: f64,
    pub coefficients: Vec<f64>,
    /// Unit direction with `x·e > h(e)` when the point is certified outside.
    pub separating: Option<Vec<f64>>,
    pub iterations: usize,
}

impl MembershipCert {
    pub fn inside(&self) -> bool {
        self.status == MembershipStatus::Inside
    }
}

struct BoxLsq<'a> {
    z: &'a Zonotope,
    x: &'a [f64],
}

impl BoxLsq<'_> {
    fn residual_vec(&self, t: &[f64]) -> Vec<f64> {
        let d = self.z.d;
        let mut r: Vec<f64> = self.x.iter().map(|v| -v).collect();
        for (ti, g) in t.iter().zip(self.z.generators()) {
            if *ti != 0.0 {
                for k in 0..d {
                    r[k] += ti * g[k];
                }
            }
        }
        r
    }

    fn gradient(&self, r: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(self.z.generators()) {
            *o = dot(g, r);
        }
    }

    /// Greedy min-norm corrections on the free coordinates.
    fn polish(&self, t: &mut [f64]) {
        let d = self.z.d;
        for _ in 0..(d + 4) {
            let r = self.residual_vec(t);
            let rn = norm(&r);
            if rn == 0.0 {
                return;
            }
            let free: Vec<usize> = (0..t.len()).filter(|&i| t[i].abs() < 1.0).collect();
            if free.is_empty() {
                return;
            }
            let mut a = vec![0.0; d * d];
            for &i in &free {
                let g = self.z.generator(i);
                for p in 0..d {
                    for q in 0..d {
                        a[p * d + q] += g[p] * g[q];
                    }
                }
            }
            let tr: f64 = (0..d).map(|p| a[p * d + p]).sum();
            if tr == 0.0 {
                return;
            }
            for p in 0..d {
                a[p * d + p] += 1e-14 * tr;
            }
            let mut y: Vec<f64> = r.iter().map(|v| -v).collect();
            if !solve_dense(&mut a, &mut y, d) {
                return;
            }
            let mut step = 1.0_f64;
            let delta: Vec<f64> = free.iter().map(|&i| dot(self.z.generator(i), &y)).collect();
            for (&i, &dl) in free.iter().zip(&delta) {
                if dl > 0.0 {
                    step = step.min((1.0 - t[i]) / dl);
                } else if dl < 0.0 {
                    step = step.min((-1.0 - t[i]) / dl);
                }
            }
            let step = step.max(0.0);
            for (&i, &dl) in free.iter().zip(&delta) {
                t[i] = (t[i] + step * dl).clamp(-1.0, 1.0);
            }
            if step >= 1.0 {
                return;
            }
        }
    }
}

/// Box-constrained least squares `min_{t∈[-1,1]^m} ‖Σ t_i g_i − x‖` by projected
/// gradient with Barzilai–Borwein steps and a `1/L` fallback.
pub fn contains(z: &Zonotope, x: &[f64], tol: f64) -> Result<MembershipCert, ConvexError> {
    if x.len() != z.d {
        return Err(ConvexError::DimensionMismatch(x.len(), z.d));
    }
    let m = z.len();
    let tol_abs = tol * (1.0 + norm(x));
    let prob = BoxLsq { z, x };
    let mut t = vec![0.0; m];
    if m == 0 || z.is_zero() {
        let rn = norm(x);
        let inside = rn <= tol_abs;
        return Ok(MembershipCert {
            status: if inside {
                MembershipStatus::Inside
            } else {
                MembershipStatus::Outside
            },
            residual: rn,
            coefficients: t,
            separating: (!inside).then(|| x.iter().map(|v| v / rn).collect()),
            iterations: 0,
        });
    }
    let lip = z.gram().eig().max().max(f64::MIN_POSITIVE);
    let mut grad = vec![0.0; m];
    let mut prev_t = vec![0.0; m];
    let mut prev_grad = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut have_prev = false;
    for iter in 0..MEMBERSHIP_MAX_ITER {
        if iter % 50 == 0 {
            prob.polish(&mut t);
            have_prev = false;
        }
        let r = prob.residual_vec(&t);
        let rn = norm(&r);
        if rn <= tol_abs {
            return Ok(MembershipCert {
                status: MembershipStatus::Inside,
                residual: rn,
                coefficients: t,
                separating: None,
                iterations: iter,
            });
        }
        if iter % 10 == 0 {
            let e: Vec<f64> = r.iter().map(|v| -v / rn).collect();
            let gap = dot(x, &e) - z.support(&e);
            if gap > tol_abs {
                return Ok(MembershipCert {
                    status: MembershipStatus::Outside,
                    residual: rn,
                    coefficients: t,
                    separating: Some(e),
                    iterations: iter,
                });
            }
        }
        prob.gradient(&r, &mut grad);
        let mut step = 1.0 / lip;
        if have_prev {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in 0..m {
                let s = t[i] - prev_t[i];
                ss += s * s;
                sy += s * (grad[i] - prev_grad[i]);
            }
            if sy > 0.0 && ss > 0.0 {
                step = ss / sy;
            }
        }
        let f0 = 0.5 * rn * rn;
        for i in 0..m {
            trial[i] = (t[i] - step * grad[i]).clamp(-1.0, 1.0);
        }
        let f1 = 0.5 * dot(&prob.residual_vec(&trial), &prob.residual_vec(&trial));
        if f1 > f0 {
            for i in 0..m {
                trial[i] = (t[i] - grad[i] / lip).clamp(-1.0, 1.0);
            }
        }
        prev_t.copy_from_slice(&t);
        prev_grad.copy_from_slice(&grad);
        have_prev = true;
        t.copy_from_slice(&trial);
    }
    let rn = norm(&prob.residual_vec(&t));
    Ok(MembershipCert {
        status: MembershipStatus::Indeterminate,
        residual: rn,
        coefficients: t,
        separating: None,
        iterations: MEMBERSHIP_MAX_ITER,
    })
}

/// `max_e (x·e)/h(e)` over the net: a lower bound for the gauge of `x`.
pub fn gauge_lower_bound(z: &Zonotope, x: &[f64], net: &[Vec<f64>]) -> f64 {
    net.iter()
        .map(|e| {
            let h = z.support(e);
            let xe = dot(x, e).abs();
            if h > 0.0 {
                xe / h
            } else if xe > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Smallest `c ≥ 0` with `x ∈ c·Z` (infinite when `x` leaves the span of `Z`).
/// Exact from the facet normals of the span-projected zonotope; when the
/// normal list had to be truncated the estimate is refined by bisection on
/// [`contains`].
pub fn gauge(z: &Zonotope, x: &[f64]) -> Result<f64, ConvexError> {
    Ok(gauge_many(z, &[x.to_vec()])?[0])
}

/// [`gauge`] for many points, sharing the facet computation.
pub fn gauge_many(z: &Zonotope, xs: &[Vec<f64>]) -> Result<Vec<f64>, ConvexError> {
    if let Some(x) = xs.iter().find(|x| x.len() != z.d) {
        return Err(ConvexError::DimensionMismatch(x.len(), z.d));
    }
    let basis = span_subspace(z);
    let gens = span_coords(z, &basis);
    let k = basis.len();
    let (normals, complete) = match k {
        0 => (Vec::new(), true),
        1 => (vec![vec![1.0]], true),
        _ => facet_normals(&gens, k),
    };
    let heights: Vec<f64> = normals
        .iter()
        .map(|u| gens.iter().map(|g| dot(g, u).abs()).sum::<f64>())
        .collect();
    xs.iter()
        .map(|x| {
            let xn = norm(x);
            if xn == 0.0 {
                return Ok(0.0);
            }
            if k == 0 {
                return Ok(f64::INFINITY);
            }
            let xk: Vec<f64> = basis.iter().map(|b| dot(b, x)).collect();
            let mut rest = x.to_vec();
            for (b, c) in basis.iter().zip(&xk) {
                for (r, bi) in rest.iter_mut().zip(b) {
                    *r -= c * bi;
                }
            }
            if norm(&rest) > 1e-9 * xn {
                return Ok(f64::INFINITY);
            }
            let lower = normals
                .iter()
                .zip(&heights)
                .map(|(u, h)| dot(&xk, u).abs() / h)
                .fold(0.0, f64::max);
            if complete {
                return Ok(lower);
            }
            let inside = |c: f64| -> Result<bool, ConvexError> { Ok(contains(&z.scale(c), x, 1e-12)?.inside()) };
            let mut lo = lower;
            let mut hi = lower.max(f64::MIN_POSITIVE) * 2.0;
            while !inside(hi)? {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if inside(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        })
        .collect()
}

/// Orthonormal basis of the span of the generators.
pub fn span_subspace(z: &Zonotope) -> Vec<Vec<f64>> {
    if z.is_empty() {
        return Vec::new();
    }
    let e = z.gram().eig();
    let lmax = e.max();
    if lmax <= 0.0 {
        return Vec::new();
    }
    (0..z.d)
        .filter(|&k| e.values[k] > SPAN_TOL * lmax)
        .map(|k| e.vector(k))
        .collect()
}

pub fn default_net_size(d: usize) -> usize {
    match d {
        1 => 1,
        2 => 720,
        3 => 2048,
        _ => 8192,
    }
}

/// Deterministic direction net: uniform angles (d=2), Fibonacci sphere (d=3),
/// normalized low-discrepancy points (d=4).
pub fn direction_net(d: usize, size: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0]],
        2 => (0..size)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / size as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..size)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / size as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    vec![r * th.cos(), r * th.sin(), z]
                })
                .collect()
        }
        _ => {
            // Additive recurrence with the generalized golden ratio for d.
            let mut phi = 2.0_f64;
            for _ in 0..64 {
                phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
            }
            let alpha: Vec<f64> = (1..=d).map(|k| (1.0 / phi.powi(k as i32)).fract()).collect();
            let mut out = Vec::with_capacity(size);
            let mut n = 0u64;
            while out.len() < size {
                n += 1;
                let v: Vec<f64> = alpha
                    .iter()
                    .map(|a| 2.0 * (0.5 + a * n as f64).fract() - 1.0)
                    .collect();
                let nv = norm(&v);
                if nv > 0.2 && nv <= 1.0 {
                    out.push(v.iter().map(|x| x / nv).collect());
                }
            }
            out
        }
    }
}

/// Seeded Gaussian directions, normalized.
pub fn random_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let nv = norm(&v);
            if nv > 1e-8 {
                break v.iter().map(|x| x / nv).collect();
            }
        })
        .collect()
}

pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// John ellipsoid `M·B_E` with its sandwich certificate. `m` acts on span
/// coordinates; `span_basis` lists the orthonormal basis vectors in `ℝ^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipsoidCert {
    pub d: usize,
    pub span_basis: Vec<Vec<f64>>,
    pub m: Vec<f64>,
    /// `min_e h(e)/‖Me‖` over the checked directions (≥ 1 means `E ⊆ K`).
    pub inner_slack: f64,
    /// `max_e h(e)/‖Me‖` over the checked directions (≤ √k means `K ⊆ √k E`).
    pub outer_slack: f64,
    pub net_size: usize,
}

impl EllipsoidCert {
    pub fn span_dim(&self) -> usize {
        self.span_basis.len()
    }

    pub fn matrix(&self) -> SymMatrix {
        SymMatrix::from_row_major(self.span_dim(), &self.m).expect("valid ellipsoid")
    }

    fn to_span(&self, e: &[f64]) -> Vec<f64> {
        self.span_basis.iter().map(|b| dot(b, e)).collect()
    }

    /// Support function of the ellipsoid, `‖M Bᵀe‖`.
    pub fn support(&self, e: &[f64]) -> f64 {
        let k = self.span_dim();
        let a = self.to_span(e);
        let mut s = 0.0;
        for i in 0..k {
            let v: f64 = (0..k).map(|j| self.m[i * k + j] * a[j]).sum();
            s += v * v;
        }
        s.sqrt()
    }

    /// `B M Bᵀ` as a `d×d` matrix.
    pub fn lifted(&self) -> SymMatrix {
        let k = self.span_dim();
        let mut out = Mat::zeros(self.d);
        for p in 0..self.d {
            for q in 0..self.d {
                let mut s = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        s += self.span_basis[i][p] * self.m[i * k + j] * self.span_basis[j][q];
                    }
                }
                out.set(p, q, s);
            }
        }
        SymMatrix::new(out).expect("finite")
    }

    /// Worst inner/outer slack of `z` against this ellipsoid on `net`.
    pub fn slack_on(&self, z: &Zonotope, net: &[Vec<f64>]) -> (f64, f64) {
        let mut inner = f64::INFINITY;
        let mut outer: f64 = 0.0;
        for e in net {
            let a = self.to_span(e);
            if norm(&a) < 1e-6 {
                continue;
            }
            let h = z.support(e);
            let s = self.support(e);
            let ratio = h / s;
            inner = inner.min(ratio);
            outer = outer.max(ratio);
        }
        (inner, outer)
    }
}

fn span_coords(z: &Zonotope, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.generators()
        .map(|g| basis.iter().map(|b| dot(b, g)).collect())
        .collect()
}

/// Normals of hyperplanes spanned by `k-1` generators: with them the facet
/// constraints make containment `E ⊆ K` exact. The flag is false when the
/// candidate list was truncated.
fn facet_normals(gens: &[Vec<f64>], k: usize) -> (Vec<Vec<f64>>, bool) {
    let merged = merge_parallel(gens);
    let mut out = Vec::new();
    let mut complete = true;
    match k {
        2 => {
            for g in &merged {
                out.push(vec![-g[1], g[0]]);
            }
        }
        3 => {
            'outer: for i in 0..merged.len() {
                for j in (i + 1)..merged.len() {
                    let (a, b) = (&merged[i], &merged[j]);
                    out.push(vec![
                        a[1] * b[2] - a[2] * b[1],
                        a[2] * b[0] - a[0] * b[2],
                        a[0] * b[1] - a[1] * b[0],
                    ]);
                    if out.len() >= MAX_FACET_NORMALS {
                        complete = false;
                        break 'outer;
                    }
                }
            }
        }
        4 => {
            'outer4: for i in 0..merged.len() {
                for j in (i + 1)..merged.len() {
                    for l in (j + 1)..merged.len() {
                        out.push(cross4(&merged[i], &merged[j], &merged[l]));
                        if out.len() >= MAX_FACET_NORMALS {
                            complete = false;
                            break 'outer4;
                        }
                    }
                }
            }
        }
        _ => complete = false,
    }
    let normals = out
        .into_iter()
        .filter_map(|v| {
            let n = norm(&v);
            (n > 1e-10).then(|| v.iter().map(|x| x / n).collect())
        })
        .collect();
    (normals, complete)
}

fn cross4(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let det3 = |r: [usize; 3]| {
        let m = |row: &[f64], i: usize| row[r[i]];
        m(a, 0) * (m(b, 1) * m(c, 2) - m(b, 2) * m(c, 1)) - m(a, 1) * (m(b, 0) * m(c, 2) - m(b, 2) * m(c, 0))
            + m(a, 2) * (m(b, 0) * m(c, 1) - m(b, 1) * m(c, 0))
    };
    vec![
        det3([1, 2, 3]),
        -det3([0, 2, 3]),
        det3([0, 1, 3]),
        -det3([0, 1, 2]),
    ]
}

/// Unit directions of the generators with parallel copies merged.
fn merge_parallel(gens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = gens
        .iter()
        .filter_map(|g| {
            let n = norm(g);
            if n <= 0.0 {
                return None;
            }
            let lead = g.iter().cloned().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() + 1e-12 { v } else { acc });
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            Some(g.iter().map(|v| s * v / n).collect())
        })
        .collect();
    dirs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in dirs {
        if let Some(last) = out.last() {
            if last.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12) {
                continue;
            }
        }
        out.push(v);
    }
    out
}

struct Barrier<'a> {
    k: usize,
    a: &'a [Vec<f64>],
    h2: Vec<f64>,
    pairs: Vec<(usize, usize)>,
}

impl Barrier<'_> {
    fn basis_apply(&self, idx: usize, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (p, q) = self.pairs[idx];
        if p == q {
            out[p] = a[p];
        } else {
            out[p] = a[q];
            out[q] = a[p];
        }
    }

    fn mat_vec(&self, m: &[f64], a: &[f64]) -> Vec<f64> {
        let k = self.k;
        (0..k).map(|i| (0..k).map(|j| m[i * k + j] * a[j]).sum()).collect()
    }

    fn slacks(&self, m: &[f64]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.a.len());
        for (a, h2) in self.a.iter().zip(&self.h2) {
            let v = self.mat_vec(m, a);
            let s = h2 - dot(&v, &v);
            if s <= 0.0 {
                return None;
            }
            out.push(s);
        }
        Some(out)
    }

    fn value(&self, m: &[f64], t: f64) -> Option<f64> {
        let s = self.slacks(m)?;
        let e = SymMatrix::from_row_major(self.k, m).ok()?.eig();
        if e.min() <= 0.0 {
            return None;
        }
        let logdet: f64 = (0..self.k).map(|i| e.values[i].ln()).sum();
        Some(-t * logdet - s.iter().map(|v| v.ln()).sum::<f64>())
    }

    fn pd_inverse(&self, m: &[f64]) -> Option<Vec<f64>> {
        let sm = SymMatrix::from_row_major(self.k, m).ok()?;
        let e = sm.eig();
        if e.min() <= 0.0 {
            return None;
        }
        Some(sm.inverse(false).ok()?.as_mat().to_row_major())
    }

    /// Gradient and Hessian of `-t log det M - Σ log s_j` in symmetric coordinates.
    fn derivatives(&self, m: &[f64], t: f64, minv: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        let p = self.pairs.len();
        let mut g = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        // log det part.
        let mut xs = Vec::with_capacity(p);
        for idx in 0..p {
            let (a, b) = self.pairs[idx];
            let mut x = vec![0.0; k * k];
            // X = M^{-1} E_idx
            for i in 0..k {
                x[i * k + b] += minv[i * k + a];
                if a != b {
                    x[i * k + a] += minv[i * k + b];
                }
            }
            g[idx] = -t * (0..k).map(|i| x[i * k + i]).sum::<f64>();
            xs.push(x);
        }
        for i1 in 0..p {
            for i2 in i1..p {
                let mut tr = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        tr += xs[i1][i * k + j] * xs[i2][j * k + i];
                    }
                }
                hess[i1 * p + i2] += t * tr;
            }
        }
        // Constraint part.
        let mut ea = vec![vec![0.0; k]; p];
        let mut c = vec![0.0; p];
        for (a, sj) in self.a.iter().zip(s) {
            let v = self.mat_vec(m, a);
            for idx in 0..p {
                self.basis_apply(idx, a, &mut ea[idx]);
                c[idx] = 2.0 * dot(&v, &ea[idx]);
                g[idx] += c[idx] / sj;
            }
            for i1 in 0..p {
                for i2 in i1..p {
                    hess[i1 * p + i2] += c[i1] * c[i2] / (sj * sj) + 2.0 * dot(&ea[i1], &ea[i2]) / sj;
                }
            }
        }
        for i1 in 0..p {
            for i2 in 0..i1 {
                hess[i1 * p + i2] = hess[i2 * p + i1];
            }
        }
        (g, hess)
    }

    fn step_matrix(&self, delta: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut d = vec![0.0; k * k];
        for (idx, &(a, b)) in self.pairs.iter().enumerate() {
            d[a * k + b] += delta[idx];
            if a != b {
                d[b * k + a] += delta[idx];
            }
        }
        d
    }
}

/// Maximizes `log det M` subject to `‖M a_j‖ ≤ h_j` by a damped-Newton barrier
/// method, then scales `M` up to touch the worst constraint.
fn john_barrier(k: usize, a: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    let hmax = h.iter().cloned().fold(0.0, f64::max);
    let hn: Vec<f64> = h.iter().map(|v| v / hmax).collect();
    let hmin = hn.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut pairs = Vec::new();
    for p in 0..k {
        for q in p..k {
            pairs.push((p, q));
        }
    }
    let bar = Barrier {
        k,
        a,
        h2: hn.iter().map(|v| v * v).collect(),
        pairs,
    };
    let np = bar.pairs.len();
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        m[i * k + i] = 0.5 * hmin;
    }
    let nu = 2.0 * a.len() as f64 + k as f64;
    let mut t = 1.0;
    loop {
        let mut prev_dec = f64::INFINITY;
        for _ in 0..200 {
            let Some(s) = bar.slacks(&m) else { break };
            let Some(minv) = bar.pd_inverse(&m) else { break };
            let (g, mut hess) = bar.derivatives(&m, t, &minv, &s);
            let mut delta: Vec<f64> = g.iter().map(|v| -v).collect();
            if !solve_dense(&mut hess, &mut delta, np) {
                break;
            }
            let dec = -dot(&g, &delta);
            if !(dec > 1e-14) {
                break;
            }
            let dm = bar.step_matrix(&delta);
            let f0 = bar.value(&m, t);
            let mut alpha = 1.0;
            let mut next = None;
            for _ in 0..40 {
                let cand: Vec<f64> = m.iter().zip(&dm).map(|(x, y)| x + alpha * y).collect();
                if let (Some(f0), Some(f1)) = (f0, bar.value(&cand, t)) {
                    let noise = 1e-12 * f0.abs().max(1.0);
                    if 0.01 * alpha * dec < noise {
                        break;
                    }
                    if f1 <= f0 - 0.01 * alpha * dec {
                        next = Some(cand);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let armijo_ok = next.is_some();
            if !armijo_ok && dec > 0.5 * prev_dec {
                break;
            }
            if next.is_none() {
                // Value comparisons drown in rounding at large t; take the
                // self-concordant damped step instead.
                alpha = if dec > 0.25 { 1.0 / (1.0 + dec.sqrt()) } else { 1.0 };
                for _ in 0..60 {
                    let cand: Vec<f64> = m.iter().zip(&dm).map(|(x, y)| x + alpha * y).collect();
                    if bar.value(&cand, t).is_some() {
                        next = Some(cand);
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            let Some(next) = next else { break };
            m = next;
            // Quadratic convergence has ended once the decrement stops shrinking;
            // what remains is rounding noise that grows with t.
            if dec < 1e-10 || (dec < 1e-5 && dec > 0.25 * prev_dec) {
                break;
            }
            prev_dec = dec;
        }
        if nu / t < 1e-13 {
            break;
        }
        t *= 16.0;
    }
    // Touch the worst constraint.
    let mut c = f64::INFINITY;
    for (aj, hj) in a.iter().zip(&hn) {
        let v = bar.mat_vec(&m, aj);
        let nv = norm(&v);
        if nv > 0.0 {
            c = c.min(hj / nv);
        }
    }
    m.iter().map(|x| x * c * hmax).collect()
}

/// John ellipsoid of `z` inside its span, certified on `net` (directions in `ℝ^d`).
pub fn john_ellipsoid(z: &Zonotope, net: &[Vec<f64>], tol: f64) -> Result<EllipsoidCert, ConvexError> {
    let basis = span_subspace(z);
    let k = basis.len();
    if k == 0 {
        return Err(ConvexError::Degenerate);
    }
    let gens = span_coords(z, &basis);
    let support_k = |a: &[f64]| gens.iter().map(|g| dot(g, a).abs()).sum::<f64>();
    let m = if k == 1 {
        vec![gens.iter().map(|g| g[0].abs()).sum::<f64>()]
    } else {
        let (mut cons, complete) = facet_normals(&gens, k);
        if !complete {
            if net.is_empty() {
                cons.extend(direction_net(k, default_net_size(k)));
            }
            for e in net {
                let a: Vec<f64> = basis.iter().map(|b| dot(b, e)).collect();
                let na = norm(&a);
                if na > 1e-6 {
                    cons.push(a.iter().map(|v| v / na).collect());
                }
            }
        }
        let h: Vec<f64> = cons.iter().map(|a| support_k(a)).collect();
        john_barrier(k, &cons, &h)
    };
    let mut cert = EllipsoidCert {
        d: z.d,
        span_basis: basis,
        m,
        inner_slack: f64::INFINITY,
        outer_slack: 0.0,
        net_size: net.len(),
    };
    let (mut inner, mut outer) = cert.slack_on(z, net);
    // The constraint set is checked too, so the inner bound covers facet normals.
    let kn = direction_net(k, default_net_size(k));
    for a in kn.iter().chain(facet_normals(&gens, k).0.iter()) {
        let e: Vec<f64> = (0..z.d)
            .map(|p| (0..k).map(|i| cert.span_basis[i][p] * a[i]).sum())
            .collect();
        let ratio = z.support(&e) / cert.support(&e);
        inner = inner.min(ratio);
        outer = outer.max(ratio);
    }
    if k == 1 {
        inner = inner.min(1.0);
        outer = outer.max(1.0);
    }
    cert.inner_slack = inner;
    cert.outer_slack = outer;
    let limit = (k as f64).sqrt() * (1.0 + tol);
    if inner < 1.0 - tol || outer > limit {
        return Err(ConvexError::CertificateFailed { inner, outer, limit });
    }
    Ok(cert)
}

/// Orthonormal axes of the ellipsoid in `ℝ^d` with semi-axis lengths,
/// descending, padded with zero-length axes spanning the complement.
pub fn principal_axes(cert: &EllipsoidCert) -> Vec<(Vec<f64>, f64)> {
    let k = cert.span_dim();
    let d = cert.d;
    let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d);
    if k > 0 {
        let e = cert.matrix().eig();
        for col in 0..k {
            let v = e.vector(col);
            let axis: Vec<f64> = (0..d)
                .map(|p| (0..k).map(|i| cert.span_basis[i][p] * v[i]).sum())
                .collect();
            out.push((axis, e.values[col].max(0.0)));
        }
    }
    for unit in 0..d {
        if out.len() == d {
            break;
        }
        let mut v = vec![0.0; d];
        v[unit] = 1.0;
        for (u, _) in &out {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            out.push((v.iter().map(|x| x / nv).collect(), 0.0));
        }
    }
    out
}

/// `g(x) = Σ_i ψ_i(x) ⟨φ_i f⟩_Q` with bounded `ψ_i`.
#[derive(Clone, Debug)]
pub struct RankOneRep {
    /// `φ_i` on the cells of `Q` (cell order of the cube's range).
    pub phi: Vec<Vec<f64>>,
    /// `ψ_i` on the cells of `Q`.
    pub psi: Vec<Vec<f64>>,
    /// `⟨φ_i f⟩_Q`.
    pub averages: Vec<Vec<f64>>,
    pub bound: f64,
    pub reconstruction_error: f64,
}

pub fn rank_one_representation(
    f: &GridFunction,
    q: &DyadicCube,
    g: &GridFunction,
    tol: f64,
) -> Result<RankOneRep, ConvexError> {
    let d = f.d();
    if g.d() != d {
        return Err(ConvexError::DimensionMismatch(g.d(), d));
    }
    let z = body_average(f, q)?;
    let range = q.cell_range(f.lattice().max_level);
    for cell in range.clone() {
        let cert = contains(&z, g.cell(cell), DEFAULT_MEMBERSHIP_TOL)?;
        if !cert.inside() {
            return Err(ConvexError::MembershipViolated {
                cell,
                residual: cert.residual,
            });
        }
    }
    let ncells = range.len();
    let mut phi = vec![vec![0.0; ncells]; d];
    let mut psi = vec![vec![0.0; ncells]; d];
    let mut averages = vec![vec![0.0; d]; d];
    if z.is_zero() {
        return Ok(RankOneRep {
            phi,
            psi,
            averages,
            bound: 0.0,
            reconstruction_error: 0.0,
        });
    }
    let ell = john_ellipsoid(&z, &direction_net(d, default_net_size(d)), tol)?;
    let axes = principal_axes(&ell);
    let active: Vec<usize> = (0..d).filter(|&i| axes[i].1 > 0.0).collect();
    for &i in &active {
        let (e, alpha) = &axes[i];
        let target: Vec<f64> = e.iter().map(|v| alpha * v).collect();
        let cert = contains(&z, &target, 1e-12)?;
        if cert.status == MembershipStatus::Indeterminate {
            return Err(ConvexError::Indeterminate(cert.iterations));
        }
        phi[i] = cert.coefficients.clone();
        let mut avg = vec![0.0; d];
        for (t, gen) in cert.coefficients.iter().zip(z.generators()) {
            for kk in 0..d {
                avg[kk] += t * gen[kk];
            }
        }
        averages[i] = avg;
    }
    // Solve for coordinates of g(x) in the realized averages (least squares on
    // the active set, which spans the body).
    let na = active.len();
    let mut normal = vec![0.0; na * na];
    for (p, &i) in active.iter().enumerate() {
        for (qq, &j) in active.iter().enumerate() {
            normal[p * na + qq] = dot(&averages[i], &averages[j]);
        }
    }
    let mut bound: f64 = 0.0;
    let mut err: f64 = 0.0;
    for (pos, cell) in range.enumerate() {
        let gx = g.cell(cell);
        let mut a = normal.clone();
        let mut rhs: Vec<f64> = active.iter().map(|&i| dot(&averages[i], gx)).collect();
        if na > 0 && !solve_dense(&mut a, &mut rhs, na) {
            return Err(ConvexError::Degenerate);
        }
        let mut rec = vec![0.0; d];
        for (p, &i) in active.iter().enumerate() {
            psi[i][pos] = rhs[p];
            bound = bound.max(rhs[p].abs());
            for kk in 0..d {
                rec[kk] += rhs[p] * averages[i][kk];
            }
        }
        err = err.max(norm(&rec.iter().zip(gx).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    Ok(RankOneRep {
        phi,
        psi,
        averages,
        bound,
        reconstruction_error: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::DyadicLattice;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_zonotope(d: usize, m: usize, seed: u64) -> Zonotope {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gens: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        Zonotope::from_generators(d, &gens).unwrap()
    }

    #[test]
    fn gauge_matches_membership_bisection() {
        for d in 2..=3 {
            for seed in 0..20u64 {
                let z = random_zonotope(d, 3 + seed as usize % 6, seed + 77);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let g = gauge(&z, &x).unwrap();
                assert!(contains(&z.scale(g * (1.0 + 1e-7)), &x, 1e-10).unwrap().inside());
                assert!(!contains(&z.scale(g * (1.0 - 1e-4)), &x, 1e-10).unwrap().inside());
            }
        }
        let seg = Zonotope::from_generators(2, &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(gauge(&seg, &[0.5, 0.0]).unwrap(), 0.5);
        assert_eq!(gauge(&seg, &[0.5, 0.1]).unwrap(), f64::INFINITY);
        assert_eq!(gauge(&Zonotope::zero(2), &[0.0, 0.0]).unwrap(), 0.0);
    }

    /// Support by enumerating all sign vectors.
    fn vertex_support(z: &Zonotope, e: &[f64]) -> f64 {
        let m = z.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0..(1u32 << m) {
            let mut p = vec![0.0; z.dim()];
            for i in 0..m {
                let s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                for k in 0..z.dim() {
                    p[k] += s * z.generator(i)[k];
                }
            }
            best = best.max(dot(&p, e));
        }
        best
    }

    #[test]
    fn support_matches_vertex_enumeration() {
        for seed in 0..20 {
            let z = random_zonotope(3, 10, seed);
            for e in random_directions(3, 16, seed + 100) {
                assert!((z.support(&e) - vertex_support(&z, &e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn body_average_examples() {
        let lat = DyadicLattice::new(1, 5).unwrap();
        let v = [0.3, -0.7];
        let f = GridFunction::constant(lat, &v);
        let q = DyadicCube::new(1, 2, [1, 0]).unwrap();
        let z = body_average(&f, &q).unwrap();
        for e in random_directions(2, 32, 1) {
            assert!((z.support(&e) - dot(&v, &e).abs()).abs() < 1e-14);
        }
        // d = 1: interval [-<|f|>, <|f|>].
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = GridFunction::from_cells(lat, 1, |_, x| x[0] = rng.gen_range(-1.0..1.0));
        let z1 = body_average(&s, &q).unwrap();
        let avg_abs = s.average_abs(&q).unwrap();
        assert!((z1.support(&[1.0]) - avg_abs).abs() < 1e-14);
    }

    #[test]
    fn body_average_support_is_sign_choice_average() {
        let lat = DyadicLattice::new(2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = GridFunction::from_cells(lat, 2, |_, x| x.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)));
        let q = DyadicCube::new(2, 1, [1, 1]).unwrap();
        let z = body_average(&f, &q).unwrap();
        for e in random_directions(2, 64, 2) {
            // φ(c) = sign(f(c)·e) realizes the support.
            let phi_f = GridFunction::from_cells(lat, 2, |c, out| {
                let s = dot(f.cell(c), &e).signum();
                out[0] = s * f.cell(c)[0];
                out[1] = s * f.cell(c)[1];
            });
            let avg = phi_f.average(&q).unwrap();
            assert!((z.support(&e) - dot(&avg, &e)).abs() < 1e-12);
            assert!((z.support(&e) - f.project(&e).average_abs(&q).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn minkowski_examples() {
        let a = random_zonotope(2, 5, 1);
        let s = minkowski_sum(&a, &Zonotope::zero(2)).unwrap();
        assert_eq!(s, a);
        let u = Zonotope::from_generators(2, &[vec![1.0, 2.0]]).unwrap();
        let v = Zonotope::from_generators(2, &[vec![-0.5, 1.0]]).unwrap();
        let uv = minkowski_sum(&u, &v).unwrap();
        for e in random_directions(2, 64, 3) {
            let expected = dot(&[1.0, 2.0], &e).abs() + dot(&[-0.5, 1.0], &e).abs();
            assert!((uv.support(&e) - expected).abs() < 1e-14);
        }
        assert!(minkowski_sum(&a, &Zonotope::zero(3)).is_err());
    }

    #[test]
    fn membership_examples() {
        let z = random_zonotope(2, 8, 3);
        let c = contains(&z, &[0.0, 0.0], 1e-9).unwrap();
        assert!(c.inside());
        assert!(c.coefficients.iter().all(|t| *t == 0.0));
        let sum: Vec<f64> = (0..2).map(|k| z.generators().map(|g| g[k]).sum()).collect();
        let c = contains(&z, &sum, 1e-9).unwrap();
        assert!(c.inside(), "residual {}", c.residual);
        for e in random_directions(2, 20, 9) {
            let x: Vec<f64> = e.iter().map(|v| 1.01 * z.support(&e) * v).collect();
            let c = contains(&z, &x, 1e-9).unwrap();
            assert_eq!(c.status, MembershipStatus::Outside);
            let sep = c.separating.unwrap();
            assert!(dot(&x, &sep) > z.support(&sep));
        }
    }

    #[test]
    fn membership_boundary_points() {
        for seed in 0..30 {
            let z = random_zonotope(3, 12, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // A point on a face: most coefficients at the bounds.
            let t: Vec<f64> = (0..12)
                .map(|i| if i < 2 { rng.gen_range(-1.0..1.0) } else if rng.gen() { 1.0 } else { -1.0 })
                .collect();
            let x: Vec<f64> = (0..3).map(|k| t.iter().zip(z.generators()).map(|(ti, g)| ti * g[k]).sum()).collect();
            let c = contains(&z, &x, 1e-9).unwrap();
            assert!(c.inside(), "seed {seed} residual {} status {:?}", c.residual, c.status);
        }
    }

    #[test]
    fn span_examples() {
        let z = Zonotope::from_generators(3, &[vec![1.0, 2.0, 0.0], vec![-2.0, -4.0, 0.0]]).unwrap();
        let b = span_subspace(&z);
        assert_eq!(b.len(), 1);
        assert!((b[0][0].abs() - 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!(span_subspace(&Zonotope::zero(2)).is_empty());
        // Generators in the plane orthogonal to n.
        let n = [1.0, -1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gens: Vec<Vec<f64>> = (0..7)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let c = dot(&v, &n) / dot(&n, &n);
                v.iter().zip(&n).map(|(a, b)| a - c * b).collect()
            })
            .collect();
        let b = span_subspace(&Zonotope::from_generators(3, &gens).unwrap());
        assert_eq!(b.len(), 2);
        for v in &b {
            assert!(dot(v, &n).abs() < 1e-10);
        }
    }

    #[test]
    fn john_cube_attains_sqrt2() {
        let z = Zonotope::from_generators(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cert = john_ellipsoid(&z, &direction_net(2, 720), 1e-6).unwrap();
        let m = cert.lifted();
        assert!(m.as_mat().sub(&Mat::identity(2)).max_abs() < 1e-8, "{m:?}");
        assert!((cert.outer_slack - 2f64.sqrt()).abs() < 1e-6);
        assert!((cert.inner_slack - 1.0).abs() < 1e-8);
    }

    #[test]
    fn john_segment() {
        let v = [0.6, -0.8];
        let z = Zonotope::from_generators(2, &[v.to_vec()]).unwrap();
        let cert = john_ellipsoid(&z, &direction_net(2, 720), 1e-6).unwrap();
        assert_eq!(cert.span_dim(), 1);
        assert!((cert.m[0] - 1.0).abs() < 1e-14);
        assert!((cert.inner_slack - 1.0).abs() < 1e-12);
        assert!((cert.outer_slack - 1.0).abs() < 1e-12);
        assert!(john_ellipsoid(&Zonotope::zero(2), &[], 1e-6).is_err());
    }

    #[test]
    fn john_sandwich_on_dense_net() {
        for d in 2..=3 {
            for seed in 0..40 {
                // Includes parallelotopes (m = d), where the outer bound is tight.
                let z = random_zonotope(d, d + seed as usize % 15, seed);
                let cert = john_ellipsoid(&z, &direction_net(d, default_net_size(d)), 1e-6).unwrap();
                let (inner, outer) = cert.slack_on(&z, &random_directions(d, 4096, 77 + seed));
                assert!(inner >= 1.0 - 1e-6, "d={d} seed={seed} inner {inner}");
                assert!(outer <= (d as f64).sqrt() * (1.0 + 1e-6), "d={d} seed={seed} outer {outer}");
            }
        }
    }

    #[test]
    fn principal_axes_examples() {
        let cert = EllipsoidCert {
            d: 2,
            span_basis: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            m: vec![2.0, 0.0, 0.0, 1.0],
            inner_slack: 1.0,
            outer_slack: 1.0,
            net_size: 0,
        };
        let ax = principal_axes(&cert);
        assert_eq!(ax[0], (vec![1.0, 0.0], 2.0));
        assert_eq!(ax[1], (vec![0.0, 1.0], 1.0));
        let seg = EllipsoidCert {
            d: 2,
            span_basis: vec![vec![0.6, 0.8]],
            m: vec![3.0],
            inner_slack: 1.0,
            outer_slack: 1.0,
            net_size: 0,
        };
        let ax = principal_axes(&seg);
        assert_eq!(ax.len(), 2);
        assert_eq!(ax[1].1, 0.0);
        assert!(dot(&ax[0].0, &ax[1].0).abs() < 1e-12);
        // Σ α² = HS norm².
        let z = random_zonotope(3, 9, 5);
        let c = john_ellipsoid(&z, &direction_net(3, 2048), 1e-6).unwrap();
        let s: f64 = principal_axes(&c).iter().map(|(_, a)| a * a).sum();
        let hs = c.matrix().as_mat().hs_norm();
        assert!((s - hs * hs).abs() < 1e-10 * hs * hs);
    }

    #[test]
    fn axis_component_bound() {
        let lat = DyadicLattice::new(1, 6).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = GridFunction::from_cells(lat, 3, |_, x| x.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)));
            let q = lat.root();
            let z = body_average(&f, &q).unwrap();
            let cert = john_ellipsoid(&z, &direction_net(3, 2048), 1e-6).unwrap();
            for (e, alpha) in principal_axes(&cert) {
                let avg = f.project(&e).average_abs(&q).unwrap();
                assert!(avg <= 3f64.sqrt() * (1.0 + 1e-6) * alpha);
            }
        }
    }

    #[test]
    fn rank_one_scalar_case() {
        let lat = DyadicLattice::new(1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = GridFunction::from_cells(lat, 1, |_, x| x[0] = rng.gen_range(0.1..1.0) * if rng.gen() { 1.0 } else { -1.0 });
        let q = DyadicCube::new(1, 1, [0, 0]).unwrap();
        let avg_abs = f.average_abs(&q).unwrap();
        let g = GridFunction::from_cells(lat, 1, |_, x| x[0] = rng.gen_range(-avg_abs..avg_abs));
        let rep = rank_one_representation(&f, &q, &g, 1e-6).unwrap();
        for (pos, cell) in q.cell_range(5).enumerate() {
            assert!((rep.phi[0][pos] - f.cell(cell)[0].signum()).abs() < 1e-9);
            assert!((rep.psi[0][pos] - g.cell(cell)[0] / avg_abs).abs() < 1e-9);
        }
        assert!(rep.reconstruction_error < 1e-12);
    }

    #[test]
    fn rank_one_rejects_outside_point() {
        let lat = DyadicLattice::new(1, 3).unwrap();
        let f = GridFunction::constant(lat, &[1.0, 0.0]);
        let mut g = GridFunction::zeros(lat, 2);
        g.cell_mut(2).copy_from_slice(&[0.0, 0.5]);
        let err = rank_one_representation(&f, &lat.root(), &g, 1e-6).unwrap_err();
        assert!(matches!(err, ConvexError::MembershipViolated { cell: 2, .. }));
    }

    proptest! {
        #[test]
        fn support_additive(seed in 0u64..1000) {
            let a = random_zonotope(2, 6, seed);
            let b = random_zonotope(2, 4, seed + 1);
            let s = minkowski_sum(&a, &b).unwrap();
            for e in random_directions(2, 8, seed) {
                prop_assert!((s.support(&e) - a.support(&e) - b.support(&e)).abs() < 1e-12);
            }
        }

        #[test]
        fn membership_duality(seed in 0u64..300) {
            let z = random_zonotope(2, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c = contains(&z, &x, 1e-9).unwrap();
            prop_assert!(c.status != MembershipStatus::Indeterminate);
            if c.inside() {
                for e in random_directions(2, 256, seed) {
                    prop_assert!(dot(&x, &e) <= z.support(&e) * (1.0 + 1e-9) + 1e-9 * (1.0 + norm(&x)));
                }
            } else {
                let net = direction_net(2, 4096);
                prop_assert!(net.iter().any(|e| dot(&x, e) > z.support(e)));
            }
        }
    }
}
