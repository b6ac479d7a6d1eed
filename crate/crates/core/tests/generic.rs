use blo_core::linalg::{dot, max_abs_diff};
use blo_core::{
    hypergrad_bgu, hypergrad_fgu, hypergrad_if, project_simplex, run_deterministic, solve_gd, solve_to_tolerance,
    BilevelProblem, ConstraintSet, Engine, IhvpBackend, LoopMode, OuterConfig, Scalar, UnrollMode,
};
use proptest::prelude::*;

/// Separable quartic lower level:
/// `g = Σ ½(1+a)φ_i² - θ_iφ_i + ¼cφ_i⁴`, `f = ½‖φ - t‖² + ½‖θ‖²`.
struct Quartic<T> {
    a: T,
    c: T,
    target: Vec<T>,
    free: ConstraintSet<T>,
}

impl<T: Scalar> Quartic<T> {
    fn new(target: &[f64]) -> Self {
        Self { a: T::lit(0.5), c: T::lit(0.8), target: target.iter().map(|&x| T::lit(x)).collect(), free: ConstraintSet::Unconstrained }
    }

    fn curvature(&self, p: T) -> T {
        T::one() + self.a + T::lit(3.0) * self.c * p * p
    }
}

impl<T: Scalar> BilevelProblem<T> for Quartic<T> {
    fn dim_theta(&self) -> usize {
        self.target.len()
    }
    fn dim_phi(&self) -> usize {
        self.target.len()
    }
    fn upper_value(&self, theta: &[T], phi: &[T]) -> T {
        let d: Vec<T> = phi.iter().zip(&self.target).map(|(&p, &t)| p - t).collect();
        T::lit(0.5) * (dot(&d, &d) + dot(theta, theta))
    }
    fn upper_grad_theta(&self, theta: &[T], _phi: &[T]) -> Vec<T> {
        theta.to_vec()
    }
    fn upper_grad_phi(&self, _theta: &[T], phi: &[T]) -> Vec<T> {
        phi.iter().zip(&self.target).map(|(&p, &t)| p - t).collect()
    }
    fn lower_value(&self, theta: &[T], phi: &[T]) -> T {
        let half = T::lit(0.5);
        let quarter = T::lit(0.25);
        theta
            .iter()
            .zip(phi)
            .map(|(&t, &p)| half * (T::one() + self.a) * p * p - t * p + quarter * self.c * p * p * p * p)
            .sum()
    }
    fn lower_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        theta.iter().zip(phi).map(|(&t, &p)| (T::one() + self.a) * p - t + self.c * p * p * p).collect()
    }
    fn lower_grad_theta(&self, _theta: &[T], phi: &[T]) -> Vec<T> {
        phi.iter().map(|&p| -p).collect()
    }
    fn lower_hvp(&self, _theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        phi.iter().zip(v).map(|(&p, &x)| self.curvature(p) * x).collect()
    }
    fn lower_cross_jvp(&self, _theta: &[T], _phi: &[T], v: &[T]) -> Vec<T> {
        v.iter().map(|&x| -x).collect()
    }
    fn upper_set(&self) -> &ConstraintSet<T> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<T> {
        &self.free
    }
}

const TARGET: [f64; 3] = [1.0, -0.5, 0.3];
const THETA: [f64; 3] = [0.7, -0.4, 1.1];

fn reduced(p: &Quartic<f64>, theta: &[f64]) -> f64 {
    let phi = solve_to_tolerance(p, theta, &[0.0; 3], 1e-14, 1_000_000, 0.1).unwrap().phi;
    p.upper_value(theta, &phi)
}

#[test]
fn implicit_hypergradient_matches_central_differences() {
    let p = Quartic::<f64>::new(&TARGET);
    let phi = solve_to_tolerance(&p, &THETA, &[0.0; 3], 1e-14, 1_000_000, 0.1).unwrap().phi;
    let g = hypergrad_if(&p, &THETA, &phi, &IhvpBackend::cg(50, 1e-14)).unwrap().grad;
    let h = 1e-5;
    for j in 0..3 {
        let mut up = THETA.to_vec();
        let mut down = THETA.to_vec();
        up[j] += h;
        down[j] -= h;
        let fd = (reduced(&p, &up) - reduced(&p, &down)) / (2.0 * h);
        assert!((fd - g[j]).abs() < 1e-7, "coordinate {j}: {fd} vs {}", g[j]);
    }
}

#[test]
fn single_precision_tracks_double() {
    let p64 = Quartic::<f64>::new(&TARGET);
    let p32 = Quartic::<f32>::new(&TARGET);
    let th32: Vec<f32> = THETA.iter().map(|&x| x as f32).collect();
    let phi64 = solve_to_tolerance(&p64, &THETA, &[0.0; 3], 1e-12, 100_000, 0.1).unwrap().phi;
    let phi32 = solve_to_tolerance(&p32, &th32, &[0.0; 3], 1e-5, 100_000, 0.1).unwrap().phi;
    let g64 = hypergrad_if(&p64, &THETA, &phi64, &IhvpBackend::cg(50, 1e-12)).unwrap().grad;
    let g32 = hypergrad_if(&p32, &th32, &phi32, &IhvpBackend::cg(50, 1e-6)).unwrap().grad;
    for (a, b) in g64.iter().zip(&g32) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn unrolled_modes_agree_and_count_oracles() {
    let p = Quartic::<f64>::new(&TARGET);
    for k in [1, 7, 30] {
        let traj = solve_gd(&p, &THETA, &[0.0; 3], k, 0.2).unwrap();
        let f = hypergrad_fgu(&p, &THETA, &traj).unwrap();
        let b = hypergrad_bgu(&p, &THETA, &traj).unwrap();
        assert!(max_abs_diff(&f.grad, &b.grad) < 1e-12);
        assert_eq!((b.counters_delta.hvps, b.counters_delta.jvps), (k as u64, k as u64));
        assert_eq!((f.counters_delta.hvps, f.counters_delta.jvps), (3 * k as u64, 3 * k as u64));
    }
}

#[test]
fn outer_loop_descends_in_single_precision() {
    let p = Quartic::<f32>::new(&TARGET);
    let cfg = OuterConfig {
        engine: Engine::Gu { mode: UnrollMode::Bgu, k: 40, beta: 0.2, warm_start: false },
        alpha: 0.2,
        iterations: 60,
        loop_mode: LoopMode::Single { k_lower: 1, beta: 0.2 },
        stochastic: None,
        seed: 0,
        stationarity_tol: 0.0,
        record_wall_time: false,
    };
    let r = run_deterministic(&p, &cfg, &[0.7, -0.4, 1.1]).unwrap();
    let trace = &r.objective_trace;
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{trace:?}");
    assert!(r.stationarity_final().unwrap() < 1e-6);

    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<OuterConfig<f32>>(&json).unwrap(), cfg);
}

proptest! {
    #[test]
    fn simplex_projection_is_feasible_and_idempotent(x in prop::collection::vec(-5.0f64..5.0, 1..12), r in 0.1f64..4.0) {
        let p = project_simplex(&x, r);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - r).abs() < 1e-10);
        prop_assert!(max_abs_diff(&project_simplex(&p, r), &p) < 1e-12);
    }

    #[test]
    fn box_projection_clamps(x in prop::collection::vec(-5.0f64..5.0, 4)) {
        let set = ConstraintSet::uniform_box(4, -1.0, 2.0).unwrap();
        let p = set.project(&x).unwrap();
        for (a, b) in x.iter().zip(&p) {
            prop_assert_eq!(*b, a.clamp(-1.0, 2.0));
        }
        prop_assert!(set.contains(&p, 1e-12));
    }
}
