//! Self-contained verification pass: operator-calculus probes on the
//! configured problem plus the library's core numeric contracts. One
//! pass/fail line per check.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use irgn::gauss_newton::{run, AlphaSchedule, StopRule, StopRuleConfig};
use irgn::hilbert::{cg_solve, power_iteration_norm, CgSettings, GridFunction};
use irgn::operator::{adjoint_check, lipschitz_probe, random_ball_point, taylor_remainder_check};
use irgn::problems::{add_noise, diagonal_forward, DiagonalProblem, EllipticProblem, NoiseSpec};

use crate::config::{ExperimentConfig, ProblemKind};
use crate::experiment::build_setup;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

/// Runs every check; never aborts early, so the report is complete.
pub fn run_selfcheck(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let setup = build_setup(cfg)?;
    let op = setup.op.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);

    // Adjoint identity at 20 sampled points.
    {
        let mut worst = 0.0f64;
        for i in 0..20 {
            let x = random_ball_point(&mut rng, &setup.x_dagger, setup.rho)?;
            worst = worst.max(adjoint_check(op, &x, 5, 900 + i)?);
        }
        checks.push(check(
            "adjoint identity (20 points)",
            worst <= 1e-10,
            format!("max relative defect {worst:.3e}, bound 1e-10"),
        ));
    }

    // Taylor remainder against (L/2)||h||^2 at 20 sampled pairs.
    {
        let mut worst_ratio = 0.0f64;
        let mut ok = true;
        for i in 0..20 {
            let x = random_ball_point(&mut rng, &setup.x_dagger, 0.5 * setup.rho)?;
            let dir = random_ball_point(&mut rng, &op.zero_x(), 1.0)?;
            let dn = dir.norm();
            if dn == 0.0 {
                continue;
            }
            let scale = setup.rho * 0.25 * [1.0, 0.1, 0.01][i % 3];
            let h = dir.scale(scale / dn);
            let out = taylor_remainder_check(op, &x, &h)?;
            if out.bound > 0.0 {
                worst_ratio = worst_ratio.max(out.remainder / out.bound);
            } else if out.remainder > 1e-12 {
                ok = false;
            }
        }
        ok &= worst_ratio <= 1.5;
        checks.push(check(
            "taylor remainder (20 pairs)",
            ok,
            format!("max remainder/bound {worst_ratio:.3}, allowed 1.5"),
        ));
    }

    // Lipschitz probe sanity.
    match cfg.problem {
        ProblemKind::Diagonal => {
            let problem = DiagonalProblem::new(cfg.n, cfg.sigma_p, cfg.gamma)?;
            let exact = problem.exact_lipschitz();
            let fresh = diagonal_forward(problem);
            let probed = lipschitz_probe(&fresh, 100, 5, 50)?;
            let passed = if exact == 0.0 {
                probed <= 1e-12
            } else {
                probed <= exact * (1.0 + 1e-9) && probed >= 0.5 * exact
            };
            checks.push(check(
                "lipschitz probe brackets exact constant",
                passed,
                format!("probe {probed:.6e} vs exact {exact:.6e}"),
            ));
        }
        ProblemKind::Elliptic => {
            let a = lipschitz_probe(op, 30, 1, 50)?;
            let b = lipschitz_probe(op, 30, 2, 50)?;
            let spread = (a - b).abs() / a.max(b).max(1e-300);
            checks.push(check(
                "lipschitz probe positive and seed-stable",
                a > 0.0 && spread <= 0.2,
                format!("probes {a:.6e}/{b:.6e}, spread {spread:.3}"),
            ));
        }
    }

    // Scaling condition at 10 sampled points.
    {
        let bound = op.scale_alpha0().sqrt() * (1.0 + 1e-6);
        let mut worst = 0.0f64;
        for i in 0..10 {
            let x = random_ball_point(&mut rng, &setup.x_dagger, setup.rho)?;
            let norm = power_iteration_norm(
                |h| op.derivative_apply(&x, h),
                |w| op.adjoint_apply(&x, w),
                op.x_dim(),
                op.x_weight(),
                60,
                700 + i,
            )?;
            worst = worst.max(norm);
        }
        checks.push(check(
            "scaling condition (10 points)",
            worst <= bound,
            format!("max ||F'|| {worst:.9} vs bound {bound:.9}"),
        ));
    }

    // Derivative vs one-sided finite differences (linear in step size).
    {
        let x = random_ball_point(&mut rng, &setup.x_dagger, 0.25 * setup.rho)?;
        let h = random_ball_point(&mut rng, &op.zero_x(), 1.0)?;
        let exact = op.derivative_apply(&x, &h)?;
        let fd = |t: f64| -> Result<f64> {
            let mut shifted = x.clone();
            shifted.axpy(t, &h)?;
            let mut diff = op.eval(&shifted)?;
            diff.axpy(-1.0, &op.eval(&x)?)?;
            Ok(diff.scale(1.0 / t).distance(&exact)?)
        };
        let (e1, e2) = (fd(1e-3)?, fd(5e-4)?);
        let ratio = if e2 > 0.0 { e1 / e2 } else { 2.0 };
        let linear_or_exact = (1.5..=2.5).contains(&ratio) || e1 <= 1e-12;
        checks.push(check(
            "derivative matches finite differences",
            linear_or_exact,
            format!("fd errors {e1:.3e} -> {e2:.3e} (ratio {ratio:.2})"),
        ));
    }

    // Elliptic state solve against the analytic solution, plus second-order
    // mesh convergence. Independent of the configured n.
    {
        let pi = std::f64::consts::PI;
        let err_for = |n: usize| -> Result<f64> {
            let p = EllipticProblem::with_functions(n, |t| pi * pi * (pi * t).sin(), |_| 0.0)?;
            let u = p.solve_state(p.c_dagger())?;
            let h = p.mesh();
            Ok(u.values()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - (pi * ((i as f64 + 1.0) * h)).sin()).abs())
                .fold(0.0f64, f64::max))
        };
        let (e99, e199) = (err_for(99)?, err_for(199)?);
        let ratio = e99 / e199;
        checks.push(check(
            "elliptic state solve (analytic + mesh doubling)",
            e199 <= 1e-3 && (3.2..=4.8).contains(&ratio),
            format!("error(n=199) {e199:.3e}, refinement ratio {ratio:.2}"),
        ));
    }

    // Conjugate gradient residual contract on seeded SPD diagonal systems.
    {
        let mut ok = true;
        let mut worst = 0.0f64;
        let mut cg_rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n = cg_rng.gen_range(2..=64);
            let diag: Vec<f64> =
                (0..n).map(|_| 10f64.powf(cg_rng.gen_range(-3.0..2.0))).collect();
            let rhs = GridFunction::from_fn(n, 1.0, |i| ((i * 37 + 11) % 19) as f64 - 9.0)?;
            let alpha = 10f64.powf(cg_rng.gen_range(-5.0..0.0));
            let d = diag.clone();
            let apply = move |v: &GridFunction| {
                GridFunction::new(
                    v.values().iter().zip(&d).map(|(x, di)| x * di).collect(),
                    v.weight(),
                )
            };
            let settings = CgSettings::for_dim(n);
            match cg_solve(&apply, alpha, &rhs, &settings) {
                Ok(sol) => {
                    let mut res = rhs.clone();
                    let mut az = apply(&sol.solution)?;
                    az.axpy(alpha, &sol.solution)?;
                    res.axpy(-1.0, &az)?;
                    let rel = res.norm() / rhs.norm();
                    worst = worst.max(rel);
                    ok &= rel <= settings.rel_tolerance * (1.0 + 1e-9);
                }
                Err(_) => ok = false,
            }
        }
        checks.push(check(
            "cg residual contract (20 systems)",
            ok,
            format!("worst relative residual {worst:.3e}"),
        ));
    }

    // Krylov norm estimate on a known spectrum.
    {
        let apply = |v: &GridFunction| {
            GridFunction::new(
                v.values().iter().zip([1.0, 2.0, 3.0]).map(|(x, d)| d * x).collect(),
                v.weight(),
            )
        };
        let norm = power_iteration_norm(apply, apply, 3, 1.0, 50, 1)?;
        checks.push(check(
            "operator norm estimate (known spectrum)",
            (norm - 3.0).abs() <= 1e-8,
            format!("estimate {norm:.12}"),
        ));
    }

    // Noise lands exactly on the requested level and is seed-deterministic.
    {
        let delta = 0.37 * setup.y_norm;
        let a = add_noise(&setup.y_clean, &NoiseSpec { delta, seed: 3 })?;
        let b = add_noise(&setup.y_clean, &NoiseSpec { delta, seed: 3 })?;
        let achieved = a.distance(&setup.y_clean)?;
        checks.push(check(
            "noise exactness and determinism",
            (achieved - delta).abs() <= 1e-12 * delta && a == b,
            format!("requested {delta:.6e}, achieved {achieved:.6e}"),
        ));
    }

    // Noise-free fixed point: started at the solution, stay there.
    {
        let stop = StopRuleConfig {
            rule: StopRule::KMaxOnly,
            tau: setup.tau,
            c0: setup.c0,
            k_max: 10.min(setup.k_max),
        };
        let trace = run(
            op,
            &setup.x_dagger,
            &setup.y_clean,
            0.0,
            &setup.schedule,
            &stop,
            &setup.cg,
        )?;
        let worst = trace.records.iter().map(|r| r.residual_norm).fold(0.0f64, f64::max);
        checks.push(check(
            "noise-free fixed point",
            worst <= 1e-12,
            format!("max residual {worst:.3e}"),
        ));
    }

    // Geometric schedule recurrence (exact for the halving ratio).
    {
        let s = AlphaSchedule::halving(setup.schedule.alpha0())?;
        let alphas: Vec<f64> = s.iter().take(40).collect();
        let exact = alphas.windows(2).all(|w| w[1] * 2.0 == w[0]);
        checks.push(check(
            "schedule recurrence",
            exact,
            "alpha_k * 2 == alpha_{k-1} over 40 steps".to_string(),
        ));
    }

    // Source construction hit its target and respects the ball condition.
    {
        let target = cfg.initial_error_over_rho * setup.rho;
        let achieved = setup.source.initial_error;
        checks.push(check(
            "source ball condition",
            (achieved - target).abs() <= 1e-12 * target && achieved <= setup.rho / 4.0,
            format!("||x0 - x_true|| = {achieved:.6e}, target {target:.6e}, rho/4 = {:.6e}",
                setup.rho / 4.0),
        ));
    }

    Ok(checks)
}
