//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clr_mpc_core::linalg::{Matrix, Vector};
use clr_mpc_core::model::{ConstraintSet, Model, Polytope, UncertainSystem};
use clr_mpc_core::mpc::ControllerState;
use clr_mpc_core::prediction::{build_bundle, build_gain_matrices, shifted_inputs, stage_weight, tightening_blocks, GainSet};
use clr_mpc_core::sim::{batch_stats, run_batch, DeltaMode};
use clr_mpc_core::solver::{solve_qp, QpProblem, QpStatus};
use clr_mpc_core::synthesis::{synthesize, Certificate, SynthesisConfig};
use clr_mpc_core::terminal::DecreaseLmi;
use clr_mpc_core::verify::{check_farkas, check_inclusions, lyapunov_check, srf_monte_carlo};

const REFERENCE_COST: f64 = 83.0;
const MSD_X0: [f64; 4] = [1.9, 0.5, -1.7, 1.7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn randn<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn randv<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn box_constraints(nx: usize, nu: usize, bound: f64) -> ConstraintSet {
    let nc = 2 * (nx + nu);
    let mut f = Matrix::zeros(nc, nx);
    let mut g = Matrix::zeros(nc, nu);
    for i in 0..nx {
        f[(2 * i, i)] = 1.0;
        f[(2 * i + 1, i)] = -1.0;
    }
    for i in 0..nu {
        g[(2 * (nx + i), i)] = 1.0;
        g[(2 * (nx + i) + 1, i)] = -1.0;
    }
    ConstraintSet { f, g, b: Vector::from_element(nc, bound) }
}

fn criterion_1(model: &Model, cert: &Certificate, seconds: f64) -> Outcome {
    let bundle = cert.bundle(model).expect("bundle");
    let farkas = check_farkas(cert, &bundle, &model.sys, &model.w).expect("farkas");
    let worst = farkas.iter().map(|r| r.eq_resid.max(r.ineq_resid).max(r.negativity)).fold(0.0, f64::max);
    let inclusions = check_inclusions(cert, &bundle, &model.sys, &model.w).expect("inclusions");
    let confirmed = inclusions.iter().filter(|c| c.included && !c.empty_inner).count();
    let pass = farkas.iter().all(|r| r.ok()) && confirmed == 4 && seconds <= 600.0;
    outcome(
        pass,
        format!("max Farkas residual {worst:.2e}, {confirmed}/4 inclusions confirmed by support LPs, synthesis {seconds:.1} s"),
    )
}

fn criterion_2(model: &Model, cert: &Certificate) -> Outcome {
    let bundle = cert.bundle(model).expect("bundle");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clean = srf_monte_carlo(cert, &bundle, &model.sys, &model.w, 10_000, &mut rng).expect("srf");
    let mut corrupted = cert.clone();
    let nc = bundle.n_c;
    for i in nc..2 * nc {
        corrupted.tightenings[i] *= 0.5;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bad = srf_monte_carlo(&corrupted, &bundle, &model.sys, &model.w, 10_000, &mut rng).expect("srf");
    outcome(
        clean.samples == 10_000 && clean.failures == 0 && bad.failures >= 1,
        format!(
            "{}/{} failures (worst margin {:.2e}); halved t1: {} failures",
            clean.failures, clean.samples, clean.worst_margin, bad.failures
        ),
    )
}

fn criteria_3_4(model: &Model, ctrl: &ControllerState) -> (Outcome, Outcome) {
    let x0 = Vector::from_row_slice(&MSD_X0);
    let mut parts = Vec::new();
    let mut ok = true;
    let mut fixed_cost = f64::NAN;
    for mode in [DeltaMode::FixedDelta, DeltaMode::PerStepDelta] {
        let runs = run_batch(ctrl, &model.sys, &model.w, &x0, 60, 25, 1, mode).expect("batch");
        let stats = batch_stats(&runs).expect("stats");
        let complete = runs.iter().filter(|t| t.steps() == 60).count();
        ok &= stats.violation_count == 0 && stats.infeasible_count == 0 && complete == 25;
        parts.push(format!(
            "{mode:?}: {} violations, {} infeasible, {complete}/25 complete",
            stats.violation_count, stats.infeasible_count
        ));
        if mode == DeltaMode::FixedDelta {
            fixed_cost = stats.mean_cost;
        }
    }
    let rel = (fixed_cost - REFERENCE_COST) / REFERENCE_COST;
    (
        outcome(ok, parts.join("; ")),
        outcome(
            rel.abs() <= 0.15,
            format!("mean cost {fixed_cost:.2} vs reference {REFERENCE_COST} ({:+.1}%)", 100.0 * rel),
        ),
    )
}

fn criterion_5(model: &Model, cert: &Certificate, ctrl: &ControllerState) -> Outcome {
    let lmi = DecreaseLmi::new(&ctrl.bundle, &model.sys, &cert.gains, &cert.q_x, &cert.q_u, cert.cost.epsilon).expect("lmi");
    let independent = (0..model.sys.n_delta())
        .map(|j| lmi.vertex_matrix(j, &cert.cost.q_n).symmetric_eigen().eigenvalues.min())
        .fold(f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lyap = lyapunov_check(cert, ctrl, &model.sys, &model.w, 1_000, false, &mut rng).expect("lyapunov");
    let nominal = lyapunov_check(cert, ctrl, &model.sys, &model.w, 1_000, true, &mut rng).expect("lyapunov");
    let lmi_ok = cert.cost.slack >= 1e-6 && independent >= 1e-6;
    outcome(
        lmi_ok && lyap.failures == 0 && nominal.failures == 0,
        format!(
            "LMI slack {:.3e} (independent eigensolver {independent:.3e}, required >= 1e-6); sampled decrease {}/{} failures; w = 0 decrease {}/{} failures",
            cert.cost.slack, lyap.failures, lyap.samples, nominal.failures, nominal.samples
        ),
    )
}

fn degenerate(model: &Model) -> Model {
    let mut m = model.clone();
    for d in &mut m.sys.deltas {
        d.fill(0.0);
    }
    m.w = Polytope::boxed(m.sys.n_w(), 0.0);
    m
}

fn max_tightening_after_first(cert: &Certificate, model: &Model) -> f64 {
    let bundle = cert.bundle(model).expect("bundle");
    tightening_blocks(&bundle, &cert.tightenings)[1..].iter().map(|b| b.amax()).fold(0.0, f64::max)
}

/// Minimizer of a strictly convex QP found by enumerating active sets of
/// size at most the number of variables.
fn brute_force_qp(h: &Matrix, f: &Vector, a: &Matrix, b: &Vector) -> Option<Vector> {
    let (n, m) = (f.len(), b.len());
    let mut best: Option<(f64, Vector)> = None;
    let mut visit = |set: &[usize]| {
        let k = set.len();
        let mut kkt = Matrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = Vector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&-f);
        for (r, &i) in set.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = a[(i, c)];
                kkt[(c, n + r)] = a[(i, c)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { return };
        let x = sol.rows(0, n).into_owned();
        let feasible = (a * &x - b).iter().all(|&v| v <= 1e-9);
        let dual_ok = sol.rows(n, k).iter().all(|&v| v >= -1e-9);
        if feasible && dual_ok {
            let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, x));
            }
        }
    };
    fn subsets(m: usize, max: usize, start: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        visit(cur);
        if cur.len() == max {
            return;
        }
        for i in start..m {
            cur.push(i);
            subsets(m, max, i + 1, cur, visit);
            cur.pop();
        }
    }
    subsets(m, n, 0, &mut Vec::new(), &mut visit);
    best.map(|(_, x)| x)
}

fn scalar_model() -> Model {
    let s = |v: f64| Matrix::from_element(1, 1, v);
    Model {
        sys: UncertainSystem {
            a: s(1.1),
            b: s(1.0),
            b_p: s(0.1),
            b_w: s(1.0),
            d_x: s(1.0),
            d_u: s(0.0),
            d_w: s(0.0),
            deltas: vec![s(0.0)],
        },
        w: Polytope::boxed(1, 0.0),
        c: box_constraints(1, 1, 1.0),
    }
}

fn criterion_6(msd: &Model) -> Outcome {
    let model = degenerate(msd);
    let cert = synthesize(&model, SynthesisConfig::standard(4, 2)).expect("degenerate synthesis").certificate;
    let t_msd = max_tightening_after_first(&cert, &model);

    let scalar = scalar_model();
    let cfg = SynthesisConfig { n: 3, k_prime: 1, ..SynthesisConfig::standard(1, 1) };
    let cert = synthesize(&scalar, cfg).expect("scalar synthesis").certificate;
    let t_scalar = max_tightening_after_first(&cert, &scalar);
    let ctrl = ControllerState::new(cert.clone(), &scalar).expect("controller");
    let bundle = &ctrl.bundle;
    let q_s = stage_weight(&cert.q_x, &cert.cost.q_n, &cert.q_u, bundle.n);
    let hess = bundle.s_u.transpose() * &q_s * &bundle.s_u * 2.0;
    let a_in = &bundle.h_xu * &bundle.s_u;
    let rhs = &bundle.b_stack - &cert.tightenings;
    let extent = ctrl.roa_extent(&Vector::from_element(1, 1.0), 10.0, 1e-9).expect("extent");
    let lower = ctrl.roa_extent(&Vector::from_element(1, -1.0), 10.0, 1e-9).expect("extent");

    let (mut worst_gap, mut worst_shift, mut states) = (0.0_f64, f64::NEG_INFINITY, 0);
    for k in 0..=40 {
        let x = Vector::from_element(1, -lower + (extent + lower) * k as f64 / 40.0) * (1.0 - 1e-6);
        let f = bundle.s_u.transpose() * &q_s * &bundle.s_x * &x * 2.0;
        let b = &rhs - &bundle.h_xu * &bundle.s_x * &x;
        let Some(u_bf) = brute_force_qp(&hess, &f, &a_in, &b) else {
            return outcome(false, format!("no KKT point found by enumeration at x = {}", x[0]));
        };
        let sol = ctrl.solve_mpc(&x).expect("online problem");
        let u_ipm = Vector::from_iterator(bundle.n, sol.inputs.iter().map(|u| u[0]));
        worst_gap = worst_gap.max((&u_ipm - &u_bf).amax());

        let mut s = Vector::zeros(bundle.n_s());
        s[0] = x[0];
        s.rows_mut(1, bundle.n).copy_from(&u_bf);
        let w0 = Vector::zeros(1);
        let x1 = scalar.sys.step(&x, &u_bf.rows(0, 1).into_owned(), &w0, &scalar.sys.deltas[0]);
        let u1 = shifted_inputs(bundle, &cert.gains[0], &scalar.sys, &s, &w0);
        let mut next = Vector::zeros(bundle.n_s());
        next[0] = x1[0];
        next.rows_mut(1, bundle.n).copy_from(&u1);
        worst_shift = worst_shift.max((&bundle.constraint_matrix() * &next - &rhs).max());
        states += 1;
    }
    outcome(
        t_msd <= 1e-6 && t_scalar <= 1e-6 && worst_gap <= 1e-6 && worst_shift <= 1e-9,
        format!(
            "max t (blocks 1..N) {t_msd:.1e} on MSD, {t_scalar:.1e} on scalar; {states} scalar states: enumeration vs solver {worst_gap:.1e}, shifted candidate margin {worst_shift:.1e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_qp = 0.0_f64;
    let mut qp_fail = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let m = rng.random_range(1..n);
        let r = randn(&mut rng, n, n, 1.0);
        let h = r.transpose() * &r + Matrix::identity(n, n) * 0.1;
        let f = randv(&mut rng, n, 1.0);
        let a = randn(&mut rng, m, n, 1.0);
        let b = randv(&mut rng, m, 1.0);
        let mut kkt = Matrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        kkt.view_mut((n, 0), (m, n)).copy_from(&a);
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        let mut rhs = Vector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&-&f);
        rhs.rows_mut(n, m).copy_from(&b);
        let oracle = kkt.lu().solve(&rhs).expect("nonsingular KKT").rows(0, n).into_owned();
        let sol = solve_qp(&QpProblem::new(h, f).with_equalities(a, b)).expect("qp");
        if sol.status != QpStatus::Optimal {
            qp_fail += 1;
            continue;
        }
        let err = (&sol.x - &oracle).amax();
        worst_qp = worst_qp.max(err);
        if err > 1e-6 {
            qp_fail += 1;
        }
    }
    let (mut worst_gap, mut lp_fail, mut optimal) = (0.0_f64, 0, 0);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=2 * n);
        let x0 = randv(&mut rng, n, 1.0);
        let rows = randn(&mut rng, m, n, 1.0);
        let mut a = Matrix::zeros(m + 2 * n, n);
        let mut b = Vector::zeros(m + 2 * n);
        a.view_mut((0, 0), (m, n)).copy_from(&rows);
        for i in 0..m {
            b[i] = rows.row(i).dot(&x0.transpose()) + rng.random_range(0.1..1.0);
        }
        for i in 0..n {
            a[(m + 2 * i, i)] = 1.0;
            a[(m + 2 * i + 1, i)] = -1.0;
            b[m + 2 * i] = 10.0;
            b[m + 2 * i + 1] = 10.0;
        }
        let c = randv(&mut rng, n, 1.0);
        let sol = solve_qp(&QpProblem::lp(c.clone()).with_inequalities(a, b.clone())).expect("lp");
        if sol.status != QpStatus::Optimal {
            continue;
        }
        optimal += 1;
        let primal = c.dot(&sol.x);
        let dual = -b.dot(&sol.in_duals);
        let gap = (primal - dual).abs() / (1.0 + primal.abs());
        worst_gap = worst_gap.max(gap);
        if gap > 1e-6 {
            lp_fail += 1;
        }
    }
    outcome(
        qp_fail == 0 && lp_fail == 0 && optimal == 200,
        format!(
            "200 equality QPs: {qp_fail} mismatches (worst {worst_qp:.1e}); {optimal}/200 LPs optimal, worst relative duality gap {worst_gap:.1e}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0_f64;
    for _ in 0..500 {
        let nx = rng.random_range(1..=5);
        let nu = rng.random_range(1..=3);
        let n = rng.random_range(1..=6);
        let np = rng.random_range(1..=3);
        let nw = rng.random_range(1..=3);
        let nd = rng.random_range(1..=4);
        let sys = UncertainSystem {
            a: randn(&mut rng, nx, nx, 0.6 / (nx as f64).sqrt()),
            b: randn(&mut rng, nx, nu, 0.5),
            b_p: randn(&mut rng, nx, np, 0.3),
            b_w: randn(&mut rng, nx, nw, 0.3),
            d_x: randn(&mut rng, np, nx, 0.5),
            d_u: randn(&mut rng, np, nu, 0.5),
            d_w: randn(&mut rng, np, nw, 0.5),
            deltas: (0..nd).map(|_| randn(&mut rng, np, np, 0.5)).collect(),
        };
        let c = box_constraints(nx, nu, 1.0);
        let y = box_constraints(nx, 0, 1.0).f;
        let z = Vector::from_element(2 * nx, 1.0);
        let bundle = build_bundle(&sys, &c, &y, &z, n).expect("bundle");
        let j = rng.random_range(0..nd);
        let gains = GainSet::from_vec(&randv(&mut rng, GainSet::len(n, nx, nu), 0.5), n, nx, nu);
        let (c_k, c_m) = build_gain_matrices(&bundle, &gains, &sys, j).expect("gain matrices");
        let s = randv(&mut rng, bundle.n_s(), 1.0);
        let w = randv(&mut rng, nw, 1.0);

        let x1 = sys.step(&s.rows(0, nx).into_owned(), &s.rows(nx, nu).into_owned(), &w, &sys.deltas[j]);
        let u1 = shifted_inputs(&bundle, &gains, &sys, &s, &w);
        let mut next = Vector::zeros(bundle.n_s());
        next.rows_mut(0, nx).copy_from(&x1);
        next.rows_mut(nx, n * nu).copy_from(&u1);
        let lhs = &c_k * &s + &c_m * &w;
        let rhs = &bundle.s_mat * &next;
        worst = worst.max((&lhs - &rhs).amax() / (1.0 + rhs.amax()));
    }
    outcome(worst <= 1e-10, format!("500 random instances, worst relative mismatch {worst:.1e}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("7 (solver unit suite)", criterion_7());
    report("8 (shift identity)", criterion_8());

    let model = Model::msd();
    let start = Instant::now();
    let cert = synthesize(&model, SynthesisConfig::standard(4, 2)).expect("MSD synthesis").certificate;
    let seconds = start.elapsed().as_secs_f64();
    let ctrl = ControllerState::new(cert.clone(), &model).expect("controller");

    report("1 (certificate soundness)", criterion_1(&model, &cert, seconds));
    report("2 (sampled recursive feasibility)", criterion_2(&model, &cert));
    let (c3, c4) = criteria_3_4(&model, &ctrl);
    report("3 (closed-loop constraint satisfaction)", c3);
    report("4 (closed-loop cost)", c4);
    report("5 (Lyapunov decrease)", criterion_5(&model, &cert, &ctrl));
    report("6 (degenerate uncertainty)", criterion_6(&model));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
