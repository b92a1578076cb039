//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test --release -p pgmres --test acceptance`. Pass
//! criterion numbers after `--` to run a subset, e.g. `-- 1 4 7`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use pgmres::experiments::{self, ConvergenceParams, ConvergenceRun, SpeedupParams, Variant};
use pgmres::krylov::GmresWorkspace;
use pgmres::nonlinear::{mirror_asymmetry, z_variation};
use pgmres::sparse::{norm2, spmv_alloc};
use pgmres::{
    gmres_restarted, symbolic_pattern, Assembler, CsrMatrix, DeflationConfig, Deflator, Executor, GmresConfig,
    IdentityPreconditioner, NewtonConfig, ReductionMode, StructuredMesh,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA: f64 = 6.8;

// criterion 1
const TABLE1: [(usize, usize, f64, f64); 3] = [(15, 29791, 1.60e6, 19.0), (25, 132651, 7.72e6, 88.0), (30, 226981, 1.33e7, 153.0)];
const TABLE1_TOL: f64 = 0.05;
const SPARSITY_BUDGET_S: f64 = 60.0;
// criteria 2, 3, 8
const CONVERGENCE_SIZES: [usize; 3] = [8, 15, 25];
const EPSILON_BOUND: f64 = 1e-3;
const BENEFIT_RATIO: f64 = 0.1;
const ORTHONORMALITY_TOL: f64 = 1e-10;
const CONSISTENCY_TOL: f64 = 1e-10;
const R_MAX: usize = 20;
// criterion 4
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET_S: f64 = 1.0;
// criterion 5
const MONITORED_TOL: f64 = 1e-8;
// criterion 6
const FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
// criterion 7
const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 30;
const SYMMETRY_TOL: f64 = 1e-8;
const NEWTON_BUDGET_S: f64 = 60.0;
// criterion 9
const KERNEL_TOL: f64 = 1e-13;
const SPEEDUP_MIN: f64 = 2.0;
const SPEEDUP_CORES: usize = 4;
const SPEEDUP_RESTARTS: usize = 10;
const TREND_SIZES: [usize; 3] = [8, 15, 25];
// criterion 10
const SPECTRAL_GAP: f64 = 0.05;
const SPECTRAL_RESTARTS: usize = 5;
// small enough that the residual stays above zero for all five cycles
const SPECTRAL_M: usize = 20;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Deflated runs at every size, with per-restart deflator audits, and the
/// plain run at the largest size.
struct ConvergenceData {
    deflated: BTreeMap<usize, ConvergenceRun>,
    plain: ConvergenceRun,
}

fn convergence_data() -> &'static ConvergenceData {
    static DATA: OnceLock<ConvergenceData> = OnceLock::new();
    DATA.get_or_init(|| {
        let params = ConvergenceParams {
            lambda: LAMBDA,
            gmres: GmresConfig { m: 50, max_restarts: 100, tol: 1e-8, fixed_iterations: true },
            deflation: DeflationConfig { r_max: R_MAX, ..Default::default() },
            audit: true,
        };
        let mut deflated = BTreeMap::new();
        let mut plain = None;
        for &n_e in &CONVERGENCE_SIZES {
            let mesh = StructuredMesh::new(n_e).unwrap();
            let exec = Executor::sequential(mesh.n_nodes());
            let (j, b) = experiments::first_newton_system(&mesh, LAMBDA, &exec).unwrap();
            deflated.insert(n_e, experiments::run_variant(&j, &b, Variant::Deflated, &params, &exec).unwrap());
            if n_e == *CONVERGENCE_SIZES.last().unwrap() {
                plain = Some(experiments::run_variant(&j, &b, Variant::Plain, &params, &exec).unwrap());
            }
        }
        ConvergenceData { deflated, plain: plain.unwrap() }
    })
}

fn sparsity_reproduction() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (n_e, dof, nnz, mem) in TABLE1 {
        let row = experiments::sparsity_row(n_e).map_err(|e| e.to_string())?;
        let nnz_err = (row.nnz as f64 - nnz).abs() / nnz;
        let mem_err = (row.memory_mib - mem).abs() / mem;
        ok &= row.dof == dof && nnz_err <= TABLE1_TOL && mem_err <= TABLE1_TOL;
        parts.push(format!("dof {} nnz {} ({:+.1}%) {:.1} MiB ({:+.1}%)", row.dof, row.nnz, 100.0 * (row.nnz as f64 / nnz - 1.0), row.memory_mib, 100.0 * (row.memory_mib / mem - 1.0)));
    }
    // the closed-form count must agree with an explicit pattern
    let mesh = StructuredMesh::new(TABLE1[0].0).unwrap();
    let explicit = symbolic_pattern(&mesh).nnz();
    ok &= explicit == experiments::count_nnz(&mesh);
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < SPARSITY_BUDGET_S;
    check(ok, format!("{}; pattern check {explicit}; {secs:.1} s", parts.join("; ")))
}

fn relative_error_bound() -> Outcome {
    let data = convergence_data();
    let mut ok = true;
    let mut parts = Vec::new();
    for (n_e, run) in &data.deflated {
        let eps = run.relative_error();
        ok &= eps < EPSILON_BOUND && run.report.restarts_used == 100;
        parts.push(format!("n_e={n_e} eps={eps:.2e} ({:.0} s)", run.seconds));
    }
    check(ok, parts.join(", "))
}

fn preconditioner_benefit() -> Outcome {
    let data = convergence_data();
    let deflated = &data.deflated[CONVERGENCE_SIZES.last().unwrap()];
    let (d, p) = (&deflated.report.explicit, &data.plain.report.explicit);
    let ratio = d[100] / p[100];
    // first restart where the deflated run reaches its final level, for context
    let floor = d[100] * 10.0;
    let k = d.iter().position(|&r| r <= floor).unwrap_or(100);
    let detail = format!(
        "after 100 restarts deflated {:.2e} / plain {:.2e} = {ratio:.2} (limit {BENEFIT_RATIO}); \
         at restart {k} deflated {:.2e} vs plain {:.2e} ({:.1e}x)",
        d[100],
        p[100],
        d[k],
        p[k],
        p[k] / d[k]
    );
    check(ratio <= BENEFIT_RATIO, detail)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mesh = StructuredMesh::new(2).unwrap();
    let exec = Executor::sequential(mesh.n_nodes());
    let (j, b) = experiments::first_newton_system(&mesh, LAMBDA, &exec).unwrap();
    let n = j.n();
    let dense = DMatrix::from_fn(n, n, |r, c| j.get(r, c));
    let exact = dense.lu().solve(&DVector::from_column_slice(&b)).ok_or("dense LU failed")?;
    let cfg = GmresConfig { m: 50, max_restarts: 100, tol: 1e-13, fixed_iterations: false };
    let (x_plain, _) =
        gmres_restarted(&j, &mut IdentityPreconditioner, &b, &vec![0.0; n], &cfg, &exec).map_err(|e| e.to_string())?;
    let mut d = Deflator::new(DeflationConfig::default());
    let (x_defl, _) = gmres_restarted(&j, &mut d, &b, &vec![0.0; n], &cfg, &exec).map_err(|e| e.to_string())?;
    let rel = |x: &[f64]| (DVector::from_column_slice(x) - &exact).norm() / exact.norm();
    let (ep, ed) = (rel(&x_plain), rel(&x_defl));
    let secs = start.elapsed().as_secs_f64();
    check(ep < ORACLE_TOL && ed < ORACLE_TOL && secs < ORACLE_BUDGET_S, format!("plain {ep:.1e}, deflated {ed:.1e}, {secs:.2} s"))
}

fn monitored_identity() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for n_e in [2, 8] {
        let mesh = StructuredMesh::new(n_e).unwrap();
        let exec = Executor::sequential(mesh.n_nodes());
        let (j, b) = experiments::first_newton_system(&mesh, LAMBDA, &exec).unwrap();
        let cfg = GmresConfig::default();
        let mut ws = GmresWorkspace::new(j.n(), cfg.m);
        let r0 = ws.start(&b, &exec);
        let mut worst = 0.0f64;
        let mut worst_r0 = 0.0f64;
        let mut steps = 0;
        for k in 0..cfg.m {
            let step = ws.arnoldi_step(&j, &IdentityPreconditioner, k, &exec).map_err(|e| e.to_string())?;
            let gamma = ws.apply_rotations_and_update(k);
            let y = ws.solve_least_squares(k + 1).map_err(|e| e.to_string())?;
            let x = ws.correction(&y, &IdentityPreconditioner, &exec).map_err(|e| e.to_string())?;
            let ax = spmv_alloc(&j, &x).unwrap();
            let r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
            let explicit = norm2(&r);
            worst = worst.max((gamma - explicit).abs() / explicit);
            worst_r0 = worst_r0.max((gamma - explicit).abs() / r0);
            steps = k + 1;
            // the cycle ends where the solver would end it
            if step.breakdown || gamma <= cfg.tol * r0 {
                break;
            }
        }
        ok &= worst < MONITORED_TOL;
        parts.push(format!("n_e={n_e}: {steps} steps, worst relative {worst:.1e} (vs |r0| {worst_r0:.1e})"));
    }
    check(ok, parts.join(", "))
}

fn jacobian_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for n_e in 1..=3 {
        let mesh = StructuredMesh::new(n_e).unwrap();
        let exec = Executor::sequential(mesh.n_nodes());
        let asm = Assembler::new(&mesh);
        let u: Vec<f64> = (0..mesh.n_nodes()).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let jac = asm.jacobian(&u, LAMBDA, &exec).unwrap();
        let scale = jac.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut up = u.clone();
        let mut col_err = 0.0f64;
        for c in 0..mesh.n_nodes() {
            up[c] = u[c] + FD_STEP;
            let rp = asm.residual(&up, LAMBDA, &exec).unwrap();
            up[c] = u[c] - FD_STEP;
            let rm = asm.residual(&up, LAMBDA, &exec).unwrap();
            up[c] = u[c];
            for r in 0..mesh.n_nodes() {
                let fd = (rp[r] - rm[r]) / (2.0 * FD_STEP);
                col_err = col_err.max((fd - jac.get(r, c)).abs());
            }
        }
        worst = worst.max(col_err / scale);
    }
    check(worst < FD_TOL, format!("max |J - FD| / max |J| = {worst:.1e} over n_e = 1, 2, 3"))
}

fn newton_invariants() -> Outcome {
    let start = Instant::now();
    let mesh = StructuredMesh::new(8).unwrap();
    let cfg = NewtonConfig { lambda: LAMBDA, update_norm_tol: NEWTON_TOL, max_iterations: NEWTON_MAX_ITER, ..Default::default() };
    let sol = pgmres::newton_solve(&mesh, &cfg, &Executor::sequential(mesh.n_nodes())).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let zvar = z_variation(&mesh, &sol.u);
    let asym = mirror_asymmetry(&mesh, &sol.u);
    let dirichlet_exact = (0..mesh.n_nodes()).filter(|&i| mesh.is_dirichlet(i)).all(|i| sol.u[i] == 0.0);
    let max_u = sol.u.iter().cloned().fold(f64::MIN, f64::max);
    let ok = sol.converged
        && sol.trace.len() <= NEWTON_MAX_ITER
        && zvar < SYMMETRY_TOL
        && asym < SYMMETRY_TOL
        && dirichlet_exact
        && max_u > 0.0
        && max_u < 10.0
        && secs < NEWTON_BUDGET_S;
    let du: Vec<f64> = sol.trace.records.iter().map(|r| r.update_inf_norm).collect();
    let c = match du.len() {
        n if n >= 3 => format!(", last contraction {:.2}", du[n - 1] / (du[n - 2] * du[n - 2])),
        _ => String::new(),
    };
    check(
        ok,
        format!(
            "converged={} in {} iterations, max u {max_u:.4}, z-variation {zvar:.1e}, asymmetry {asym:.1e}, \
             Dirichlet exact={dirichlet_exact}{c}, {secs:.1} s",
            sol.converged,
            sol.trace.len()
        ),
    )
}

fn deflator_algebra() -> Outcome {
    let data = convergence_data();
    let mut ok = true;
    let mut parts = Vec::new();
    for (n_e, run) in &data.deflated {
        let orth = run.audits.iter().map(|a| a.orthonormality).fold(0.0, f64::max);
        let cons = run.audits.iter().map(|a| a.consistency / a.t_max.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        let rank = run.audits.iter().map(|a| a.rank).max().unwrap_or(0);
        ok &= run.audits.len() == run.report.restarts_used && orth < ORTHONORMALITY_TOL && cons < CONSISTENCY_TOL && rank <= R_MAX;
        parts.push(format!("n_e={n_e}: orth {orth:.1e}, T {cons:.1e}, max r {rank}"));
    }
    check(ok, parts.join("; "))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn parallel_equivalence() -> Outcome {
    let mesh = StructuredMesh::new(8).unwrap();
    let n = mesh.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = Executor::sequential(n);
    let asm = Assembler::new(&mesh);
    let j_seq = asm.jacobian(&u, LAMBDA, &seq).unwrap();
    let r_seq = asm.residual(&u, LAMBDA, &seq).unwrap();
    let y_seq = spmv_alloc(&j_seq, &v).unwrap();
    let dot_seq = pgmres::sparse::dot(&u, &v).unwrap();
    let solve = |exec: &Executor, j: &CsrMatrix| {
        let cfg = GmresConfig { m: 20, max_restarts: 3, tol: 1e-8, fixed_iterations: true };
        let mut d = Deflator::new(DeflationConfig::default());
        gmres_restarted(j, &mut d, &r_seq, &vec![0.0; n], &cfg, exec).unwrap().0
    };
    let x_seq = solve(&seq, &j_seq);
    let mut worst = 0.0f64;
    let mut identical = true;
    for mode in [ReductionMode::Deterministic, ReductionMode::FreeOrder] {
        for p in [2, 4] {
            let exec = Executor::for_mesh(&mesh, p, mode).unwrap();
            let j = asm.jacobian(&u, LAMBDA, &exec).unwrap();
            let r = asm.residual(&u, LAMBDA, &exec).unwrap();
            let mut y = vec![0.0; n];
            exec.spmv(&j_seq, &v, &mut y).unwrap();
            let dot = exec.dot(&u, &v).unwrap();
            let x = solve(&exec, &j);
            worst = worst
                .max(max_rel(j.values(), j_seq.values()))
                .max(max_rel(&r, &r_seq))
                .max(max_rel(&y, &y_seq))
                .max((dot - dot_seq).abs() / dot_seq.abs());
            if mode == ReductionMode::Deterministic {
                identical &= j.values() == j_seq.values() && r == r_seq && y == y_seq && dot == dot_seq && x == x_seq;
            }
        }
    }
    let kernels = worst < KERNEL_TOL && identical;
    let kernel_detail = format!("kernels max rel diff {worst:.1e}, deterministic bit-identical={identical}");

    let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(1);
    if cores < SPEEDUP_CORES {
        return Err(format!(
            "{kernel_detail}; speedup NOT VERIFIED: host has {cores} core(s), needs {SPEEDUP_CORES}"
        ));
    }
    let params = SpeedupParams {
        n_e: TREND_SIZES.to_vec(),
        threads: vec![1, 4],
        reps: 3,
        lambda: LAMBDA,
        gmres: GmresConfig { m: 50, max_restarts: SPEEDUP_RESTARTS, tol: 1e-8, fixed_iterations: true },
        deflation: Some(DeflationConfig::default()),
        mode: ReductionMode::Deterministic,
    };
    let rows = experiments::speedup(&params).map_err(|e| e.to_string())?;
    let p4: Vec<_> = rows.iter().filter(|r| r.p == 4).collect();
    let inversions = |xs: Vec<f64>, rising: bool| {
        xs.windows(2).filter(|w| if rising { w[1] < w[0] } else { w[1] > w[0] }).count()
    };
    let s_inv = inversions(p4.iter().map(|r| r.speedup).collect(), true);
    let c_inv = inversions(p4.iter().map(|r| r.local_comm_pct + r.global_comm_pct).collect(), false);
    let s25 = p4.last().map(|r| r.speedup).unwrap_or(0.0);
    check(
        kernels && s25 >= SPEEDUP_MIN && s_inv <= 1 && c_inv <= 1,
        format!("{kernel_detail}; speedup p=4 at n_e=25 {s25:.2}; trend inversions speedup {s_inv}, communication {c_inv}"),
    )
}

fn spectral_action() -> Outcome {
    let n = 50;
    let diag: Vec<f64> = (1..=n).map(|v| v as f64).collect();
    let a = CsrMatrix::new(n, (0..=n).collect(), (0..n as u32).collect(), diag.clone()).unwrap();
    let exec = Executor::sequential(n);
    let mut d = Deflator::new(DeflationConfig::default());
    let cfg = GmresConfig { m: SPECTRAL_M, max_restarts: SPECTRAL_RESTARTS, tol: 1e-30, fixed_iterations: true };
    gmres_restarted(&a, &mut d, &vec![1.0; n], &vec![0.0; n], &cfg, &exec).map_err(|e| e.to_string())?;
    let mu = d.mu().abs();
    let mut am = DMatrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        d.apply_to(&e, &mut col, &exec).unwrap();
        for r in 0..n {
            am[(r, c)] = diag[r] * col[r];
        }
    }
    // how far each of the five smallest eigendirections is from being sent to |μ| e_i
    let mapped = (0..5)
        .map(|i| (am.column(i) - DVector::from_fn(n, |r, _| if r == i { mu } else { 0.0 })).norm() / mu)
        .fold(0.0, f64::max);
    // dense-oracle spectrum: the five smallest eigenvalues move to |μ|, the rest stay
    let mut eig: Vec<f64> = am.complex_eigenvalues().iter().map(|z| z.re).collect();
    eig.sort_by(f64::total_cmp);
    let mut expect: Vec<f64> = diag[5..].to_vec();
    expect.extend([mu; 5]);
    expect.sort_by(f64::total_cmp);
    let gap = eig.iter().zip(&expect).map(|(x, y)| (x - y).abs() / y).fold(0.0, f64::max);
    check(
        d.rank() == 5 && gap < SPECTRAL_GAP,
        format!(
            "r={}, |mu|={mu:.4}, spectrum gap {gap:.1e}, smallest eigenvalue {:.3}, worst direction residual {mapped:.1e}",
            d.rank(),
            eig[0]
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("sparsity reproduction", sparsity_reproduction),
        ("relative-error bound", relative_error_bound),
        ("preconditioner benefit", preconditioner_benefit),
        ("oracle equivalence", oracle_equivalence),
        ("monitored-residual identity", monitored_identity),
        ("Jacobian consistency", jacobian_consistency),
        ("Newton solve invariants", newton_invariants),
        ("deflator algebra", deflator_algebra),
        ("parallel equivalence and speedup", parallel_equivalence),
        ("preconditioner spectral action", spectral_action),
    ];
    // `cargo test` forwards libtest flags; only bare numbers select criteria
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{status}] {id:>2} {name:<34} {detail} [{secs:.1} s]");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
