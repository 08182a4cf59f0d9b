//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyreg::bregman::{
    bregman_poly, poly_subgradient, source_condition_residual, verify_subgradient,
    CertificateProtocol, ForwardContext, PolySubgradient, SourceConditionParams,
};
use polyreg::config::Config;
use polyreg::field::{discrete_jacobian, energy, random_smooth_field, MatrixField};
use polyreg::gradcheck::{run_suite, suite_integrands};
use polyreg::grid::Grid;
use polyreg::integrands::{
    check_coercivity, check_convexity, DetSquared, Integrand, RotationEnergy,
};
use polyreg::minors::{Mat, MinorsLayout};
use polyreg::rates::{run_rates, RateExperiment};
use polyreg::registration::{blob_image, default_blobs, rotation_field, warp};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    let v: Vec<f64> = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Mat::from_row_slice(rows, cols, &v)
}

// Brute-force enumerator: bitmask subsets and the Leibniz formula.

fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect();
    out.sort();
    out
}

fn permutations(k: usize) -> Vec<(Vec<usize>, f64)> {
    if k == 0 {
        return vec![(vec![], 1.0)];
    }
    let mut out = Vec::new();
    for (p, sign) in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            let s = if (k - 1 - pos).is_multiple_of(2) { sign } else { -sign };
            out.push((q, s));
        }
    }
    out
}

/// `(det, Σ|terms|)` of `A[rows, cols]`.
fn leibniz(a: &Mat, rows: &[usize], cols: &[usize]) -> (f64, f64) {
    let mut det = 0.0;
    let mut mag = 0.0;
    for (p, sign) in permutations(rows.len()) {
        let term: f64 = rows.iter().zip(&p).map(|(&r, &j)| a.get(r, cols[j])).product();
        det += sign * term;
        mag += term.abs();
    }
    (det, mag)
}

fn oracle_minors(a: &Mat, s: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in all_subsets(a.rows(), s) {
        for c in all_subsets(a.cols(), s) {
            out.push(leibniz(a, &r, &c));
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for n in [2, 3] {
        let layout = MinorsLayout::new(n, n).unwrap();
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let a = random_mat(&mut rng, n, n, scale);
            let t = layout.minors(&a).unwrap();
            let mut k = 0;
            for s in 1..=n {
                let adj = layout.adj(&a, s).unwrap();
                let want = oracle_minors(&a, s);
                assert_eq!(adj.len(), want.len());
                for (got, (det, mag)) in adj.iter().zip(&want) {
                    let scale = mag.max(f64::MIN_POSITIVE);
                    worst = worst.max((got - det).abs() / scale);
                    worst = worst.max((t.as_slice()[k] - det).abs() / scale);
                    k += 1;
                }
            }
            assert_eq!(k, t.len());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-14 && elapsed < Duration::from_secs(1),
        format!("worst relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let checks = run_suite(&suite_integrands().unwrap(), 20, 16, 0).unwrap();
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.relative_error).fold(0.0f64, f64::max);
    let failed = checks.iter().filter(|c| !c.passed).count();
    outcome(
        failed == 0 && checks.len() == 60 && elapsed < Duration::from_secs(30),
        format!("{} checks, worst relative error {worst:.2e}, {elapsed:.2?}", checks.len()),
    )
}

/// `F(ξ) = (ξ₁² − 1)²`, a double well in the first slot.
#[derive(Debug)]
struct DoubleWell(MinorsLayout);

impl Integrand for DoubleWell {
    fn name(&self) -> &str {
        "double-well"
    }

    fn layout(&self) -> &MinorsLayout {
        &self.0
    }

    fn density(&self, _x: &[f64], _u: &[f64], xi: &[f64]) -> f64 {
        (xi[0] * xi[0] - 1.0).powi(2)
    }

    fn gradient(&self, _x: &[f64], _u: &[f64], xi: &[f64], g_u: &mut [f64], g_xi: &mut [f64]) {
        g_u.fill(0.0);
        g_xi.fill(0.0);
        g_xi[0] = 4.0 * xi[0] * (xi[0] * xi[0] - 1.0);
    }
}

fn criterion_3() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in suite_integrands().unwrap() {
        let r = check_convexity(f.as_ref(), 10_000, 3);
        ok &= r.violations == 0 && r.skipped < r.samples;
        parts.push(format!("{} {}", f.name(), r.violations));
    }
    let control = DoubleWell(MinorsLayout::new(2, 2).unwrap());
    let r = check_convexity(&control, 10_000, 3);
    ok &= r.violations > 0;
    parts.push(format!("control {}", r.violations));
    outcome(ok, format!("violations: {}", parts.join(", ")))
}

fn criterion_4() -> Outcome {
    let f = RotationEnergy::new(4.0).unwrap();
    let r = check_coercivity(&f, 4.0, 0.5, 100_000, 4);
    outcome(
        r.violations_at_c == 0,
        format!("{} violations, smallest ratio {:.4}", r.violations_at_c, r.c_estimate),
    )
}

fn criterion_5() -> Outcome {
    let p = 4.0;
    let f = RotationEnergy::new(p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut below = 0;
    let mut min_value = f64::INFINITY;
    for _ in 0..10_000 {
        let scale = 10f64.powf(rng.random_range(-1.5..1.0));
        let a = random_mat(&mut rng, 2, 2, scale);
        let v = f.value_at_matrix(&a).unwrap();
        min_value = min_value.min(v);
        if v.is_nan() || v < 2.0 + p - 1e-12 {
            below += 1;
        }
    }
    let mut equality = 0.0f64;
    for _ in 0..100 {
        let r = Mat::rotation(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        equality = equality.max((f.value_at_matrix(&r).unwrap() - (2.0 + p)).abs());
    }
    let mut invariance = 0.0f64;
    for _ in 0..1000 {
        let a = random_mat(&mut rng, 2, 2, 1.0);
        let q = Mat::rotation(rng.random_range(-3.2..3.2));
        let r = Mat::rotation(rng.random_range(-3.2..3.2));
        let base = f.value_at_matrix(&a).unwrap();
        let moved = f.value_at_matrix(&q.matmul(&a).matmul(&r)).unwrap();
        invariance = invariance.max((moved - base).abs() / base.max(1.0));
    }
    outcome(
        below == 0 && equality <= 1e-12 && invariance <= 1e-12,
        format!(
            "min f {min_value:.6}, {below} below 2+p, equality error {equality:.1e}, invariance error {invariance:.1e}"
        ),
    )
}

fn disk(n: usize) -> Grid {
    Grid::new([-1.0, -1.0], [1.0, 1.0], n, n)
        .unwrap()
        .with_disk([0.0, 0.0], 1.0)
        .unwrap()
}

/// Five base points: identity, a rotation, a shear and two smooth perturbations.
fn base_points(grid: &Grid, seed: u64) -> Vec<MatrixField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = MatrixField::identity(grid);
    let shear = Mat::from_rows(&[[1.1, 0.2], [-0.1, 0.9]]);
    vec![
        id.clone(),
        rotation_field(0.4, grid).field,
        MatrixField::affine(grid, &shear, &[0.05, -0.02]).unwrap(),
        id.add_scaled(&random_smooth_field(grid, 2, 3, 0.1, &mut rng).unwrap(), 1.0).unwrap(),
        id.add_scaled(&random_smooth_field(grid, 2, 3, 0.2, &mut rng).unwrap(), 1.0).unwrap(),
    ]
}

fn perturbed(w: &PolySubgradient, seed: u64) -> PolySubgradient {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut broken = w.clone();
    for v in broken.v2_mut() {
        *v += if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    broken
}

fn criterion_6() -> Outcome {
    let grid = disk(16);
    let protocol = CertificateProtocol {
        trials: 1000,
        seed: 6,
        radius: 0.1,
    };
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut broken_failed = 0;
    let mut broken_total = 0;
    for f in suite_integrands().unwrap() {
        for u in base_points(&grid, 60) {
            let w = poly_subgradient(f.as_ref(), &u).unwrap();
            let r = verify_subgradient(f.as_ref(), &w, &protocol).unwrap();
            violations += r.violations;
            worst = worst.max(r.worst_gap);
            let b = verify_subgradient(f.as_ref(), &perturbed(&w, 7), &protocol).unwrap();
            broken_total += 1;
            if !b.passed() {
                broken_failed += 1;
            }
        }
    }
    outcome(
        violations == 0 && broken_failed == broken_total,
        format!(
            "15 certificates, {violations} violations, worst gap {worst:.2e}; {broken_failed}/{broken_total} perturbed certificates rejected"
        ),
    )
}

fn criterion_7() -> Outcome {
    let grid = disk(16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let integrands = suite_integrands().unwrap();

    let mut reflexive = 0.0f64;
    let mut negative = 0;
    let mut min_d = f64::INFINITY;
    for f in &integrands {
        for u in base_points(&grid, 70) {
            let w = poly_subgradient(f.as_ref(), &u).unwrap();
            reflexive = reflexive.max(bregman_poly(f.as_ref(), &u, &u, &w).unwrap().abs());
        }
    }
    let id = MatrixField::identity(&grid);
    for k in 0..1000 {
        let f = &integrands[k % integrands.len()];
        let u = id
            .add_scaled(&random_smooth_field(&grid, 2, 3, 0.15, &mut rng).unwrap(), 1.0)
            .unwrap();
        let v = u
            .add_scaled(&random_smooth_field(&grid, 2, 3, 0.3, &mut rng).unwrap(), 1.0)
            .unwrap();
        let w = poly_subgradient(f.as_ref(), &u).unwrap();
        let d = bregman_poly(f.as_ref(), &v, &u, &w).unwrap();
        min_d = min_d.min(d);
        let scale = energy(&v, f.as_ref()).unwrap().value.max(1.0);
        if d < -1e-12 * scale {
            negative += 1;
        }
    }

    let f = DetSquared::new();
    let area = grid.cell_area();
    let mut closed_form = 0.0f64;
    for _ in 0..50 {
        let u = id
            .add_scaled(&random_smooth_field(&grid, 2, 3, 0.2, &mut rng).unwrap(), 1.0)
            .unwrap();
        let v = id
            .add_scaled(&random_smooth_field(&grid, 2, 3, 0.2, &mut rng).unwrap(), 1.0)
            .unwrap();
        let (ju, jv) = (discrete_jacobian(&u), discrete_jacobian(&v));
        let want: f64 = grid
            .active_cells()
            .map(|c| area * (jv[c].det() - ju[c].det()).powi(2))
            .sum();
        let w = poly_subgradient(&f, &u).unwrap();
        let got = bregman_poly(&f, &v, &u, &w).unwrap();
        closed_form = closed_form.max((got - want).abs() / want);
    }
    outcome(
        reflexive <= 1e-12 && negative == 0 && closed_form < 1e-10,
        format!(
            "|D(u;u)| <= {reflexive:.1e}, {negative} negative of 1000 (min {min_d:.2e}), detsq closed form error {closed_form:.1e}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let grid = disk(32);
    let f: Arc<dyn Integrand> = Arc::new(RotationEnergy::new(4.0).unwrap());
    let reference = blob_image(&grid, &default_blobs());
    let u_r = rotation_field(std::f64::consts::FRAC_PI_6, &grid).field;
    let exact = warp(&reference, &u_r).unwrap();
    let r_dagger = energy(&u_r, f.as_ref()).unwrap().value;
    let w = PolySubgradient::zero(f.layout().clone(), u_r.clone(), r_dagger).unwrap();
    let params = SourceConditionParams::new(0.5, 1.0, 10.0 * 0.1 * r_dagger, 0.1).unwrap();
    let ctx = ForwardContext {
        reference: &reference,
        exact_data: &exact,
        q: 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut positive = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut in_set = 0;
    for _ in 0..1000 {
        // Perturbations damped by 1 − |x|² keep every node inside the disk.
        let phi = random_smooth_field(&grid, 2, 3, rng.random_range(0.01..0.1), &mut rng).unwrap();
        let damp = MatrixField::from_fn(&grid, 2, |x, out| {
            let s = (1.0 - x[0] * x[0] - x[1] * x[1]).max(0.0);
            out[0] = s;
            out[1] = s;
        })
        .unwrap();
        let mut u = u_r.clone();
        for ((v, p), d) in u.values_mut().iter_mut().zip(phi.values()).zip(damp.values()) {
            *v += p * d;
        }
        let s = source_condition_residual(f.as_ref(), ctx, &w, &u_r, &u, &params).unwrap();
        worst = worst.max(s.residual);
        if s.residual > 0.0 {
            positive += 1;
        }
        if s.in_sublevel_set {
            in_set += 1;
        }
    }
    outcome(
        positive == 0,
        format!("{positive} positive of 1000, worst residual {worst:.3e}, {in_set} in the sublevel set"),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let exp = RateExperiment::from_config(&Config::default()).unwrap();
    let report = run_rates(&exp).unwrap();
    let elapsed = start.elapsed();
    let slope = |fit: Option<polyreg::rates::SlopeFit>| fit.map_or(f64::NAN, |f| f.slope);
    let mut detail = format!(
        "D_poly slope {:.4}, residual slope {:.4}, {} unconverged rows, {elapsed:.1?}",
        slope(report.d_fit),
        slope(report.residual_fit),
        report.excluded_unconverged
    );
    if report.d_superlinear() {
        detail.push_str(" (warning: D_poly superlinear)");
    }
    outcome(
        report.d_rate_ok() && report.residual_rate_ok() && elapsed < Duration::from_secs(600),
        detail,
    )
}

fn run_cli(config: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_polyreg"))
        .arg("rates")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "polyreg rates failed: {status}");
    std::fs::read(out).unwrap()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "grid": {"nx": 24, "ny": 24},
  "experiment": {"levels": 4, "fit_levels": 3, "seeds": [1, 2]}
}
"#,
    )
    .unwrap();
    let a = run_cli(&config, &dir.path().join("a/report.csv"));
    let b = run_cli(&config, &dir.path().join("b/report.csv"));
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    outcome(a == b && rows > 1, format!("{} bytes, {rows} lines", a.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("minors oracle", criterion_1),
        ("gradient checks", criterion_2),
        ("convexity certificates", criterion_3),
        ("coercivity", criterion_4),
        ("rotation minimality", criterion_5),
        ("subgradient certificates", criterion_6),
        ("Bregman identities", criterion_7),
        ("source condition", criterion_8),
        ("rate experiment", criterion_9),
        ("determinism", criterion_10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!(
            "{} criterion {id} ({name}): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
