//! Small-scale invariant suite run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convex::{
    body_average, default_net_size, direction_net, john_ellipsoid, random_directions, rank_one_representation,
    Zonotope,
};
use crate::domination::{check_family, dominate_cz, dominate_shift, dominate_shift_scalar, FamilyKind};
use crate::dyadic::{DyadicCube, DyadicLattice, GridFunction};
use crate::estimates::{
    bilinear_factorization, carleson_embedding, composite_norm, random_sparse_family, rotating_spec,
    CarlesonSequence,
};
use crate::operators::{CzKernel, GridOperator, HaarShift, IdentityOperator, SymbolSpec};
use crate::weights::{a2_matrix, a2_scalar, a_infty_scalar, reverse_holder_check, scalar_power_weight, MatrixWeight};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type Check = fn(u64) -> Result<(bool, String), String>;

const CHECKS: [(&str, Check); 11] = [
    ("shiftAdjoint", shift_adjoint),
    ("johnSandwich", john_sandwich),
    ("rankOne", rank_one),
    ("scalarWeightBounds", scalar_weight_bounds),
    ("directionA2", direction_a2),
    ("carlesonEmbedding", embedding),
    ("shiftDomination", shift_domination),
    ("czDomination", cz_domination),
    ("scalarCoherence", scalar_coherence),
    ("compositeNormScaling", composite_scaling),
    ("bilinearFactorization", bilinear),
];

pub fn run_selftest(seed: u64) -> SelftestReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|(name, f)| match f(seed) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect();
    SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn lat(dim: u8, j: u8) -> DyadicLattice {
    DyadicLattice::new(dim, j).expect("fixed sizes are valid")
}

fn random_fn(l: DyadicLattice, d: usize, rng: &mut ChaCha8Rng) -> GridFunction {
    GridFunction::from_cells(l, d, |_, v| {
        let amp = if rng.gen_bool(0.05) { 20.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x = amp * rng.gen_range(-1.0..1.0));
    })
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn shift_adjoint(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for r in 0..3u8 {
        let t = HaarShift::random(l, r, true, seed + r as u64).map_err(s)?;
        let f = random_fn(l, 2, &mut rng);
        let g = random_fn(l, 2, &mut rng);
        let lhs = t.apply(&f).map_err(s)?.inner(&g);
        let rhs = f.inner(&t.apply_adjoint(&g).map_err(s)?);
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    Ok((worst <= 1e-12, format!("max relative gap {worst:.3e}")))
}

fn john_sandwich(seed: u64) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for d in 1..=3usize {
        let net = direction_net(d, default_net_size(d));
        for trial in 0..10u64 {
            let m = rng.gen_range(1..=3 * d + 3);
            let gens: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let z = Zonotope::from_generators(d, &gens).map_err(s)?;
            let cert = john_ellipsoid(&z, &net, 1e-6).map_err(s)?;
            let (inner, outer) = cert.slack_on(&z, &random_directions(d, 2048, seed + trial));
            lo = lo.min(inner);
            hi = hi.max(outer / (d as f64).sqrt());
        }
    }
    Ok((
        lo >= 1.0 - 1e-5 && hi <= 1.0 + 1e-5,
        format!("inner {lo:.8}, outer/sqrt(d) {hi:.8}"),
    ))
}

fn rank_one(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err, mut psi) = (0.0f64, 0.0f64);
    for trial in 0..10 {
        let d = 2 + trial % 2;
        let f = random_fn(l, d, &mut rng);
        let q = DyadicCube::from_morton(1, rng.gen_range(0..3), 0);
        let z = body_average(&f, &q).map_err(s)?;
        let g = GridFunction::from_cells(l, d, |_, v| {
            for gen in z.generators() {
                let t = rng.gen_range(-1.0..1.0) * 0.999;
                v.iter_mut().zip(gen).for_each(|(x, y)| *x += t * y);
            }
        });
        let rep = rank_one_representation(&f, &q, &g, 1e-6).map_err(s)?;
        err = err.max(rep.reconstruction_error);
        let m = rep.psi.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        psi = psi.max(m / (d as f64).sqrt());
    }
    Ok((
        err <= 1e-8 && psi <= 1.0 + 1e-5,
        format!("reconstruction error {err:.3e}, max |psi|/sqrt(d) {psi:.6}"),
    ))
}

fn scalar_weight_bounds(seed: u64) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let l = lat(1, rng.gen_range(3..=9));
        let w = if trial % 2 == 0 {
            scalar_power_weight(l, rng.gen_range(-0.9..0.9), &[rng.gen_range(0.0..1.0)])
        } else {
            let sc = rng.gen_range(0.1..2.0);
            GridFunction::from_cells(l, 1, |_, v| v[0] = (sc * rng.gen_range(-1.0..1.0f64)).exp())
        };
        let a2 = a2_scalar(&w).map_err(s)?.value;
        let ainf = a_infty_scalar(&w).map_err(s)?.value;
        let cap = 0.25 / ainf;
        let rh = reverse_holder_check(&w, cap, true).map_err(s)?;
        ok &= a2 >= 1.0 - 1e-12 && ainf <= 4.0 * a2 * (1.0 + 1e-12) && rh.holds;
        worst = worst.max(ainf / (4.0 * a2));
    }
    Ok((ok, format!("max [w]Ainf/(4[w]A2) {worst:.6}")))
}

fn direction_a2(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 6);
    let mut worst = 0.0f64;
    for k in 0..5u64 {
        let w = rotating_spec(k as f64 * 0.5, 0.2 * k as f64, 1.0 + k as f64)
            .build(l, 2, 0.0)
            .map_err(s)?;
        let a2 = a2_matrix(&w).map_err(s)?.value;
        for e in random_directions(2, 16, seed + k) {
            worst = worst.max(a2_scalar(&w.direction_weight(&e)).map_err(s)?.value / a2);
        }
    }
    Ok((worst <= 1.0 + 1e-12, format!("max [w_e]A2/[W]A2 {worst:.6}")))
}

fn embedding(seed: u64) -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for trial in 0..20u64 {
        let l = lat(1, rng.gen_range(1..=7));
        let a = CarlesonSequence::random(l, seed + trial, rng.gen_range(0.1..1.0));
        let p = 1.0 + 10f64.powf(rng.gen_range(-1.0..1.0));
        let f = GridFunction::from_cells(l, 1, |_, v| v[0] = rng.gen_range(0.0..1.0));
        if !carleson_embedding(&a, &f, p).map_err(s)?.holds {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} violations in 20 instances")))
}

fn shift_for(l: DyadicLattice, trial: u64) -> Result<HaarShift, String> {
    let r = (trial % 3) as u8;
    if trial % 4 == 3 {
        let b = SymbolSpec::Random { seed: trial }.build(l).map_err(s)?;
        HaarShift::paraproduct(&b, r).map_err(s)
    } else {
        HaarShift::random(l, r, true, trial).map_err(s)
    }
}

fn shift_domination(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    let mut worst = 0.0f64;
    for trial in 0..4u64 {
        let t = shift_for(l, seed + trial)?;
        let f = random_fn(l, 2, &mut rng);
        for piece in t.separate() {
            let res = dominate_shift(&piece, &f, 0.5).map_err(s)?;
            ok &= res.passed() && res.achieved_eps <= 0.5 + 1e-12;
            worst = worst.max(res.max_residual);
        }
    }
    Ok((ok, format!("max residual {worst:.3e}")))
}

fn cz_domination(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 7);
    let k = CzKernel::hilbert(l).map_err(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = l.n_cells();
    let f = GridFunction::from_cells(l, 2, |c, v| {
        let inside = (n / 4..3 * n / 4).contains(&c);
        v.iter_mut().for_each(|x| *x = if inside { rng.gen_range(-1.0..1.0) } else { 0.0 });
    });
    let res = dominate_cz(&k, &f, 0.5).map_err(s)?;
    let eta = check_family(&res.family, FamilyKind::Weak).map_err(s)?.value;
    Ok((
        res.passed() && eta >= 1.0 / 6.0,
        format!("eta {eta:.4}, residual {:.3e}", res.max_residual),
    ))
}

fn scalar_coherence(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for trial in 0..4u64 {
        let t = shift_for(l, seed + trial)?;
        let f = random_fn(l, 1, &mut rng);
        for piece in t.separate() {
            let v = dominate_shift(&piece, &f, 0.5).map_err(s)?;
            let sc = dominate_shift_scalar(&piece, &f, 0.5).map_err(s)?;
            let steps: Vec<f64> = v.steps.iter().map(|x| x.body_constant).collect();
            if v.family.cubes() != sc.cubes || v.constant != sc.constant || steps != sc.step_constants {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatching pieces")))
}

fn composite_scaling(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 5);
    let id = IdentityOperator { lattice: l };
    let w = MatrixWeight::identity(l, 2).scale(4.0).map_err(s)?;
    let v = MatrixWeight::identity(l, 2).scale(9.0).map_err(s)?;
    let norm = composite_norm(&id, &w, &v, seed).map_err(s)?.value;
    Ok(((norm - 6.0).abs() <= 1e-6, format!("norm {norm:.9} (expected 6)")))
}

fn bilinear(seed: u64) -> Result<(bool, String), String> {
    let l = lat(1, 6);
    let fam = random_sparse_family(l, 0.5, seed).map_err(s)?;
    let seq = CarlesonSequence::from_family(&fam).map_err(s)?;
    let w = rotating_spec(1.0, 0.3, 2.0).build(l, 2, 0.0).map_err(s)?;
    let v = w.inverse().map_err(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    for _ in 0..5 {
        let f = GridFunction::from_cells(l, 1, |_, x| x[0] = rng.gen_range(0.0..1.0));
        let g = GridFunction::from_cells(l, 1, |_, x| x[0] = rng.gen_range(0.0..1.0));
        ok &= bilinear_factorization(&w, &v, &seq, &f, &g).map_err(s)?.holds;
    }
    Ok((ok, "5 random pairs".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_selftest(0);
        for c in &a.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(a, run_selftest(0));
    }
}
