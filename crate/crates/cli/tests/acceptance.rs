//! Acceptance checks. Prints one `criterion N: PASS|FAIL (...)` line per
//! criterion and exits nonzero when any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use blo_core::linalg::{max_abs_diff, norm, sub, DenseMatrix};
use blo_core::{
    hypergrad_bgu, hypergrad_fgu, hypergrad_if, hypergrad_if_constrained, ihvp, run_deterministic, run_stochastic,
    solve_gd, solve_to_tolerance, solve_vf, woodbury_rank_one, BilevelProblem, Engine, FnHessian, IhvpBackend,
    LoopMode, RunReport, Stochastic, VfConfig, DEFAULT_ACTIVE_TOL,
};
use blo_testbed::kernels::{
    coreset_weight_ratio, fastbat_robust_accuracy, irm_invariant_dominance, maml_win_fraction, median, outer_config,
};
use blo_testbed::{
    build, make_bip_toy, make_example1, make_example2, make_ns_toy, make_quad_bilevel, one_sided_differences,
    reduced_objective, FdLowerSolve, ProblemSpec, QuadBilevel, TestProblem, REGISTRY,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(1e-300)
}

fn random_theta(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let q = make_quad_bilevel(10, 10, 1.0, seed);
        let theta = random_theta(&mut ChaCha8Rng::seed_from_u64(100 + seed), 10);
        let exact = q.exact_hypergrad(&theta);
        let l = q.lower_smoothness(&theta);
        let phi = solve_to_tolerance(&q, &theta, &q.initial_phi(), 1e-10, 100_000, 1.0 / (1.1 * l))
            .map_err(e2s)?
            .phi;
        let traj = solve_gd(&q, &theta, &q.initial_phi(), 50, 1.0 / l).map_err(e2s)?;
        let estimates = [
            hypergrad_if(&q, &theta, &phi, &IhvpBackend::cg(100, 1e-14)).map_err(e2s)?.grad,
            hypergrad_if(&q, &theta, &phi, &IhvpBackend::NeumannSum { terms: 200, smoothness: l }).map_err(e2s)?.grad,
            hypergrad_fgu(&q, &theta, &traj).map_err(e2s)?.grad,
            hypergrad_bgu(&q, &theta, &traj).map_err(e2s)?.grad,
        ];
        for g in &estimates {
            worst = worst.max(rel(g, &exact));
        }
    }
    ensure(worst <= 1e-6, format!("IF-CG, IF-NeumannSum(200), FGU, BGU on 5 seeds; worst relative error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for info in REGISTRY {
        let p = info.build(&ProblemSpec::new(info.name).seeded(3)).map_err(e2s)?;
        if !p.smooth() {
            continue;
        }
        names.push(info.name);
        let theta = p.theta0();
        let beta = 1.0 / p.lower_smoothness(&theta);
        for k in [1, 5, 50] {
            let traj = solve_gd(p.as_ref(), &theta, &p.initial_phi(), k, beta).map_err(e2s)?;
            let f = hypergrad_fgu(p.as_ref(), &theta, &traj).map_err(e2s)?.grad;
            let b = hypergrad_bgu(p.as_ref(), &theta, &traj).map_err(e2s)?.grad;
            let scale = norm(&b).max(1.0);
            worst = worst.max(max_abs_diff(&f, &b) / scale);
        }
    }
    ensure(
        worst <= 1e-10 && names.len() >= 4,
        format!("{} smooth problems ({}), K in {{1, 5, 50}}; worst coordinate gap {worst:.2e}", names.len(), names.join(", ")),
    )
}

fn criterion_3() -> Outcome {
    let q = make_quad_bilevel(10, 10, 1.0, 0);
    let theta = random_theta(&mut ChaCha8Rng::seed_from_u64(7), 10);
    let l = q.lower_smoothness(&theta);
    let phi = q.phi_star(&theta);
    let reference = hypergrad_if(&q, &theta, &phi, &IhvpBackend::cg(100, 1e-14)).map_err(e2s)?.grad;
    let beta = 0.1 / l;
    let gap = |k: usize| -> Result<f64, String> {
        let traj = solve_gd(&q, &theta, &q.initial_phi(), k, beta).map_err(e2s)?;
        Ok(norm(&sub(&hypergrad_bgu(&q, &theta, &traj).map_err(e2s)?.grad, &reference)))
    };
    let (g10, g500) = (gap(10)?, gap(500)?);
    ensure(g500 <= 1e-5 && g500 < g10, format!("beta = 0.1/L; gap K=10 {g10:.2e}, K=500 {g500:.2e}"))
}

fn criterion_4() -> Outcome {
    let p = make_example2();
    let mut worst_map: f64 = 0.0;
    for theta in [0.1, 0.25, 0.4, 0.6, 0.75, 0.9] {
        let phi = solve_to_tolerance(&p, &[theta], &p.initial_phi(), 1e-13, 1_000_000, 0.4).map_err(e2s)?.phi;
        let expected = if theta <= 0.5 { 0.5 } else { theta };
        worst_map = worst_map.max((phi[0] - expected).abs());
    }
    let sigd = |theta: f64| -> Result<f64, String> {
        let phi = solve_to_tolerance(&p, &[theta], &p.initial_phi(), 1e-13, 1_000_000, 0.4).map_err(e2s)?.phi;
        Ok(hypergrad_if_constrained(&p, &[theta], &phi, &IhvpBackend::cg(10, 1e-14), DEFAULT_ACTIVE_TOL)
            .map_err(e2s)?
            .grad[0])
    };
    let (active, inactive) = (sigd(0.25)?, sigd(0.75)?);
    let (left, right) = one_sided_differences(&p, &[0.5], 1e-4, 1e-12).map_err(e2s)?;
    let gap = (right[0] - left[0]).abs();
    ensure(
        worst_map <= 1e-9 && (active - 1.0).abs() <= 1e-8 && (inactive - 2.0).abs() <= 1e-8 && gap >= 0.5,
        format!(
            "map error {worst_map:.1e}; SIGD {active:.10} (active), {inactive:.10} (inactive); \
             one-sided at 1/2: {:.4} vs {:.4}",
            left[0], right[0]
        ),
    )
}

fn criterion_5() -> Outcome {
    let p = make_example1();
    let solve = FdLowerSolve { tol: 1e-12, beta: 0.5, max_iters: 1000 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let theta: f64 = rng.gen_range(-1.0..1.0);
        let (value, _) = reduced_objective(&p, &[theta], &[0.0], &solve).map_err(e2s)?;
        worst = worst.max((value + theta * theta).abs());
    }
    let mut finals = Vec::new();
    for start in [-0.9, -0.3, -0.01, 0.01, 0.1, 0.5, 1.0] {
        let cfg = outer_config(Engine::Analytic, 0.1, 200, LoopMode::Single { k_lower: 1, beta: 1.0 });
        let r = run_deterministic(&p, &cfg, &[start]).map_err(e2s)?;
        finals.push((r.theta_final().unwrap()[0], r.objective_final().unwrap()));
    }
    let reached = finals.iter().all(|&(t, f)| (t.abs() - 1.0).abs() <= 1e-9 && (f + 1.0).abs() <= 1e-9);
    ensure(
        worst <= 1e-12 && reached,
        format!("reduced value error {worst:.1e} at 20 points; 7 starts end at {:?}", finals.iter().map(|f| f.0).collect::<Vec<_>>()),
    )
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix<f64> {
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut a = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() / n as f64;
            a.set(i, j, v + if i == j { 0.2 } else { 0.0 });
        }
    }
    a
}

fn gershgorin(a: &DenseMatrix<f64>) -> f64 {
    (0..a.rows).map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut monotone = true;
    let mut worst_z: f64 = 0.0;
    for sys in 0..10 {
        let n = 6;
        let a = random_spd(&mut rng, n);
        let l = gershgorin(&a);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = a.solve(&v, 1e-14).map_err(e2s)?;
        let op = FnHessian::new(|x: &[f64]| a.matvec(x));
        let mut prev = f64::INFINITY;
        for k in 0..150 {
            let (x, _) = ihvp(&IhvpBackend::NeumannSum { terms: k, smoothness: l }, &op, &v).map_err(e2s)?;
            let err = norm(&sub(&x, &exact));
            monotone &= err <= prev * (1.0 + 1e-12);
            prev = err;
        }
        let k = 20;
        let (reference, _) = ihvp(&IhvpBackend::NeumannSum { terms: k - 1, smoothness: l }, &op, &v).map_err(e2s)?;
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let draws = 10_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for d in 0..draws {
            let backend = IhvpBackend::NeumannProduct { terms: k, smoothness: l, seed: 1_000_000 * sys + d };
            let (x, _) = ihvp(&backend, &op, &v).map_err(e2s)?;
            let proj: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
            s += proj;
            s2 += proj * proj;
        }
        let nd = draws as f64;
        let mean = s / nd;
        let se = ((s2 - nd * mean * mean) / (nd - 1.0) / nd).sqrt();
        let target: f64 = reference.iter().zip(&u).map(|(a, b)| a * b).sum();
        worst_z = worst_z.max((mean - target).abs() / se);
    }
    ensure(
        monotone && worst_z <= 3.0,
        format!("10 SPD systems; Neumann error monotone in K = 0..149: {monotone}; product vs sum(K-1), 1e4 draws: max |z| {worst_z:.2}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..12);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma = 10f64.powf(rng.gen_range(-2.0..1.0));
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.set(i, j, v[i] * v[j] + if i == j { gamma } else { 0.0 });
            }
        }
        let direct = m.solve(&rhs, 1e-15).map_err(e2s)?;
        let wf = woodbury_rank_one(&v, gamma, &rhs);
        worst = worst.max(rel(&wf, &direct));
    }
    ensure(worst <= 1e-10, format!("100 random (v, gamma, rhs); worst relative error {worst:.2e}"))
}

fn vf_config(mu1: f64, rounds: usize, steps: usize) -> VfConfig<f64> {
    VfConfig {
        mu1,
        mu2: 0.0,
        penalty_rho: 1.0,
        rho_growth: 10.0,
        inner_tol: 1e-12,
        outer_rounds: rounds,
        inner_step: 0.4,
        inner_max_iters: 100_000,
        step: 0.5,
        steps_per_round: steps,
    }
}

fn criterion_8() -> Outcome {
    let q = make_quad_bilevel(10, 10, 1.0, 0);
    let optimum = q.optimum();
    let r = solve_vf(&q, &vec![0.0; 10], &q.initial_phi(), &vf_config(1e-6, 8, 400)).map_err(e2s)?;
    let dist = norm(&sub(r.theta_final().unwrap(), &optimum));
    let violation = *r.violation_trace.last().unwrap();
    let ns = make_ns_toy();
    let r2 = solve_vf(&ns, &ns.theta0(), &ns.initial_phi(), &vf_config(1e-3, 6, 300)).map_err(e2s)?;
    let (theta, phi2) = (r2.theta_final().unwrap()[0], r2.phi_final[1]);
    ensure(
        dist <= 1e-2 && violation <= 1e-4 && theta.abs() <= 1e-2 && (phi2 - 1.0).abs() <= 1e-2,
        format!("quadratic: |theta - theta_IF| {dist:.1e}, violation {violation:.1e}; NS toy: theta {theta:.1e}, phi2 {phi2:.6}"),
    )
}

fn exact_stationarity(q: &QuadBilevel, r: &RunReport<f64>, upto: usize) -> f64 {
    let window = 10.min(upto);
    let start = upto - window;
    r.theta_trace[start..upto].iter().map(|t| norm(&q.exact_hypergrad(t)).powi(2)).sum::<f64>() / window as f64
}

fn criterion_9() -> Outcome {
    let build_q = |seed: u64| QuadBilevel::random(10, 10, 1.0, 64, seed);
    let q = build_q(0);
    let if_engine = Engine::If { backend: IhvpBackend::cg(100, 1e-14) };
    let double = LoopMode::Double { tol: 1e-10, max_iters: 100_000, beta: 0.5 };
    let det_cfg = outer_config(if_engine.clone(), 0.2, 40, double);
    let det = run_deterministic(&q, &det_cfg, &vec![0.5; 10]).map_err(e2s)?;
    let mut full_cfg = det_cfg.clone();
    full_cfg.stochastic = Some(Stochastic::Sgd { upper_batch: 64, lower_batch: 64 });
    let full = run_stochastic(&q, &full_cfg, &vec![0.5; 10]).map_err(e2s)?;
    let trace_gap = det
        .theta_trace
        .iter()
        .zip(&full.theta_trace)
        .map(|(a, b)| max_abs_diff(a, b))
        .fold(0.0, f64::max);
    let identical = det.len() == full.len() && trace_gap <= 1e-12;

    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let q = build_q(1000 + seed);
        let single = LoopMode::Single { k_lower: 5, beta: 0.5 };
        let mut vr_cfg = outer_config(if_engine.clone(), 0.1, 200, single);
        vr_cfg.seed = seed;
        vr_cfg.stochastic = Some(Stochastic::MomentumVr { a: 0.1, upper_batch: 4, lower_batch: 4 });
        let vr = run_stochastic(&q, &vr_cfg, &vec![0.5; 10]).map_err(e2s)?;
        let budget = vr.counters.total_gradients();
        let mut sgd_cfg = vr_cfg.clone();
        sgd_cfg.iterations = 600;
        sgd_cfg.stochastic = Some(Stochastic::Sgd { upper_batch: 4, lower_batch: 4 });
        let sgd = run_stochastic(&q, &sgd_cfg, &vec![0.5; 10]).map_err(e2s)?;
        let cut = sgd
            .counter_trace
            .iter()
            .position(|c| c.total_gradients() > budget)
            .unwrap_or(sgd.len());
        let s_vr = exact_stationarity(&q, &vr, vr.len());
        let s_sgd = exact_stationarity(&q, &sgd, cut);
        ratios.push(s_vr / s_sgd);
        if s_vr <= s_sgd {
            wins += 1;
        }
    }
    ensure(
        identical && wins >= 15,
        format!(
            "full batch vs deterministic: max theta gap {trace_gap:.1e}; momentum-VR <= SGD at equal gradient budget \
             in {wins}/20 seeds (median ratio {:.3})",
            median(ratios)
        ),
    )
}

fn criterion_10() -> Outcome {
    let seeds = 0..20u64;
    let coreset = median(seeds.clone().map(coreset_weight_ratio).collect::<Result<_, _>>().map_err(e2s)?);
    let maml = median(seeds.clone().map(maml_win_fraction).collect::<Result<_, _>>().map_err(e2s)?);
    let gains: Vec<f64> = seeds
        .clone()
        .map(|s| fastbat_robust_accuracy(s).map(|(robust, plain)| robust - plain))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let fastbat = median(gains);
    let irm = median(seeds.clone().map(irm_invariant_dominance).collect::<Result<_, _>>().map_err(e2s)?);
    let mut bip_gap: f64 = 0.0;
    for seed in 0..5 {
        let p = make_bip_toy(8, 0.5, seed).with_hessian_free(true);
        let m: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let phi = p.phi_star(&m);
        let hf = hypergrad_if(&p, &m, &phi, &IhvpBackend::HessianFree { lambda: 0.5 }).map_err(e2s)?.grad;
        bip_gap = bip_gap.max(max_abs_diff(&hf, &p.diagonal_ig_hypergrad(&m, &phi)));
    }
    ensure(
        coreset >= 2.0 && maml >= 0.8 && fastbat > 0.0 && irm > 1.0 && bip_gap <= 1e-10,
        format!(
            "20-seed medians: coreset ratio {coreset:.2}, MAML win fraction {maml:.2}, Fast-BAT robust gain {fastbat:+.3}, \
             IRM invariant/spurious {irm:.2}; BiP Hessian-free vs diagonal IG {bip_gap:.1e}"
        ),
    )
}

const RUN_CONFIG: &str = r#"
repeats = 3

[problem]
name = "quad_bilevel"
seed = 9
params = { samples = 16 }

[outer]
alpha = 0.1
iterations = 30
seed = 4
stationarity_tol = 0.0
stochastic = { kind = "momentum-vr", a = 0.3, upper_batch = 4, lower_batch = 4 }

[outer.engine]
kind = "gu"
mode = { kind = "bgu" }
k = 10
beta = 0.5

[outer.loop_mode]
kind = "single"
k_lower = 3
beta = 0.5
"#;

fn run_blo(dir: &Path, out: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_blo"))
        .args(["run", "--config", "exp.toml", "--out", out])
        .current_dir(dir)
        .env_remove("BLO_OUT_DIR")
        .output()
        .map_err(e2s)?;
    if !status.status.success() {
        return Err(format!("blo run failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    std::fs::write(tmp.path().join("exp.toml"), RUN_CONFIG).map_err(e2s)?;
    run_blo(tmp.path(), "first")?;
    run_blo(tmp.path(), "second")?;
    let mut compared = 0;
    for file in ["runs.csv", "run_0.json", "run_1.json", "run_2.json"] {
        let a = std::fs::read(tmp.path().join("first").join(file)).map_err(e2s)?;
        let b = std::fs::read(tmp.path().join("second").join(file)).map_err(e2s)?;
        if a != b {
            return Err(format!("{file} differs between runs"));
        }
        compared += 1;
    }

    let mut exact = true;
    let mut seen = Vec::new();
    for name in ["quad_bilevel", "maml_sinusoid", "mmo_toy"] {
        let p = build(&ProblemSpec::new(name)).map_err(e2s)?;
        let theta = p.theta0();
        let beta = 1.0 / p.lower_smoothness(&theta);
        for k in [1usize, 5, 50] {
            let traj = solve_gd(p.as_ref(), &theta, &p.initial_phi(), k, beta).map_err(e2s)?;
            let c = hypergrad_bgu(p.as_ref(), &theta, &traj).map_err(e2s)?.counters_delta;
            exact &= c.hvps == k as u64 && c.jvps == k as u64;
            seen.push(format!("{name}/K={k}: {}+{}", c.hvps, c.jvps));
        }
    }
    ensure(
        exact,
        format!("{compared} CLI output files byte-identical across re-runs; BGU HVPs+JVPs {}", seen.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, Option<f64>, fn() -> Outcome); 11] = [
        (1, "hypergradient correctness", Some(5.0), criterion_1),
        (2, "FGU equals BGU", Some(10.0), criterion_2),
        (3, "GU to IF limit", Some(5.0), criterion_3),
        (4, "Example 2 and SIGD", None, criterion_4),
        (5, "Example 1", Some(1.0), criterion_5),
        (6, "Neumann properties", Some(30.0), criterion_6),
        (7, "Woodbury backend", Some(2.0), criterion_7),
        (8, "value-function engine", Some(20.0), criterion_8),
        (9, "stochastic drivers", Some(60.0), criterion_9),
        (10, "application kernels", Some(300.0), criterion_10),
        (11, "determinism and accounting", None, criterion_11),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.map_or(true, |l| secs <= l);
        let budget = limit.map(|l| format!(" <= {l}s")).unwrap_or_default();
        let (pass, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {verdict} ({name}: {detail}; {secs:.2}s{budget})");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
