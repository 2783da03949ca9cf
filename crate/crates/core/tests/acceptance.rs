//! End-to-end acceptance checks. Runs without the libtest harness so that
//! each criterion prints exactly one PASS or FAIL line.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use varcomp::bootstrap::{bootstrap_test, bootstrap_test_rotated, sample_null_unnormalized, TestOptions, TestResult};
use varcomp::cli::report::RunReport;
use varcomp::designs::{crossed_design, nested_design, simulate_response, CrossedLayout, NestedLayout, SimulationConfig, XSpec};
use varcomp::likelihood::{nrll, nrll_gradient, nrll_hessian, precompute, DesignCache, LikelihoodCache};
use varcomp::model::{in_parameter_space, rotation_from_contrast, Alternative, ContrastSpec, DesignMatrices, RowConstraint};
use varcomp::optimizer::{fit_unconstrained, mom_start, FitStatus, NewtonOptions};
use varcomp::simharness::{power_table, CellResult, ExperimentGrid};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn origin_is_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = random_design(&mut rng);
        let y = random_response(&mut rng, d.n());
        let zero = vec![0.0; d.d()];
        let lik = precompute(d, y).map_err(|e| e.to_string())?;
        worst = worst.max(nrll(&lik, &vc(&zero)).map_err(|e| e.to_string())?.abs());
    }
    check(worst <= 1e-12, format!("max |L(0)| = {worst:.2e} over 20 designs"))
}

fn dense_oracle_agrees() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for _ in 0..50 {
        let d = random_design(&mut rng);
        let y = random_response(&mut rng, d.n());
        let tau = random_tau(&mut rng, &d, 1e-3);
        negative += tau.iter().any(|&t| t < 0.0) as usize;
        let dense = dense_nrll(&d, &y, &tau);
        let lik = precompute(d, y).map_err(|e| e.to_string())?;
        let fast = nrll(&lik, &vc(&tau)).map_err(|e| e.to_string())?;
        worst = worst.max((fast - dense).abs() / dense.abs().max(1e-300));
    }
    check(
        worst <= 1e-8 && negative > 0,
        format!("max relative error {worst:.2e} over 50 models, {negative} with a negative component"),
    )
}

fn derivatives_agree() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut g_worst, mut h_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let d = random_design(&mut rng);
        let y = random_response(&mut rng, d.n());
        let tau = random_tau(&mut rng, &d, 0.05);
        let lik = precompute(d, y).map_err(|e| e.to_string())?;
        let f = |t: &[f64]| nrll(&lik, &vc(t)).unwrap();
        let g = |t: &[f64]| nrll_gradient(&lik, &vc(t)).unwrap();
        let grad = g(&tau);
        let hess = nrll_hessian(&lik, &vc(&tau)).map_err(|e| e.to_string())?;
        let k = tau.len();
        let h = 1e-5;
        let g_scale = grad.amax().max(1.0);
        let h_scale = hess.amax().max(1.0);
        for j in 0..k {
            let mut up = tau.clone();
            let mut down = tau.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            g_worst = g_worst.max((fd - grad[j]).abs() / g_scale);
            let col = (g(&up) - g(&down)) / (2.0 * h);
            for i in 0..k {
                h_worst = h_worst.max((col[i] - hess[(i, j)]).abs() / h_scale);
            }
        }
    }
    check(
        g_worst <= 1e-4 && h_worst <= 1e-3,
        format!("gradient {g_worst:.2e}, Hessian {h_worst:.2e} (relative, 20 pairs)"),
    )
}

fn null_sampler_law() -> Outcome {
    let design = nested_design(&NestedLayout::balanced(5, 2, 2), &XSpec::InterceptOnly).map_err(|e| e.to_string())?;
    let cache = Arc::new(DesignCache::new(design).map_err(|e| e.to_string())?);
    let n = cache.n();
    let tau = [-0.08, 0.6];
    let l = cache.inner_factor(&vc(&tau)).map_err(|e| e.to_string())?;
    let rows: Vec<_> = (0..n)
        .map(|i| cache.residual_coordinates(&DVector::from_fn(n, |k, _| (k == i) as u8 as f64)).unwrap().transpose())
        .collect();
    // U_X with rows e_iᵀ U_X; checked to be a residual basis, then W formed densely.
    let u = DMatrix::from_rows(&rows);
    let basis_err = (u.transpose() * &u - DMatrix::identity(n - 1, n - 1)).amax().max((u.transpose() * cache.design().x()).amax());
    let w = u.transpose() * dense_sigma(cache.design(), &tau) * &u;
    let draws = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut acc = DMatrix::zeros(n - 1, n - 1);
    for _ in 0..draws {
        let z = sample_null_unnormalized(&cache, &l, &mut rng).map_err(|e| e.to_string())?;
        acc.ger(1.0, &z, &z, 1.0);
    }
    let emp = acc / draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let se = ((w[(i, i)] * w[(j, j)] + w[(i, j)].powi(2)) / draws as f64).sqrt();
            worst = worst.max((emp[(i, j)] - w[(i, j)]).abs() / se);
        }
    }
    check(
        n == 20 && basis_err < 1e-12 && worst < 5.0,
        format!("N = {n}, largest entrywise deviation {worst:.2} SE over {draws} draws"),
    )
}

fn mom_on(design: DesignMatrices, seed: u64) -> Result<(usize, f64, usize), String> {
    let cache = Arc::new(DesignCache::new(design.clone()).map_err(|e| e.to_string())?);
    let zqr = design.z_qr().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut interior, mut grad, mut iters) = (0, 0.0f64, 0);
    for _ in 0..50 {
        let cfg = SimulationConfig::standard(design.p(), vc(&[1.0, 0.5]));
        let y = simulate_response(&cache, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let lik = LikelihoodCache::new(Arc::clone(&cache), y).map_err(|e| e.to_string())?;
        let start = mom_start(&lik).map_err(|e| e.to_string())?;
        if !in_parameter_space(&design, &zqr, &start) {
            continue;
        }
        interior += 1;
        grad = grad.max(nrll_gradient(&lik, &start).map_err(|e| e.to_string())?.amax());
        let fit = fit_unconstrained(&lik, &NewtonOptions::default()).map_err(|e| e.to_string())?;
        if fit.status != FitStatus::Converged {
            return Err(format!("fit from an interior start ended with {:?}", fit.status));
        }
        iters = iters.max(fit.iterations);
    }
    Ok((interior, grad, iters))
}

fn mom_is_exact_on_balanced_designs() -> Outcome {
    let nested = nested_design(&NestedLayout::balanced(6, 3, 4), &XSpec::InterceptOnly).map_err(|e| e.to_string())?;
    let crossed = crossed_design(&CrossedLayout::balanced(10, 10, 1), &XSpec::InterceptOnly).map_err(|e| e.to_string())?;
    let (ni, ng, nit) = mom_on(nested, 105)?;
    let (ci, cg, cit) = mom_on(crossed, 106)?;
    check(
        ng < 1e-6 && cg < 1e-6 && nit <= 2 && cit <= 2 && ni > 0 && ci > 0,
        format!(
            "nested: {ni}/50 interior, max |grad| {ng:.1e}, max {nit} iterations; crossed: {ci}/50 interior, max |grad| {cg:.1e}, max {cit} iterations"
        ),
    )
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_string_lossy().into_owned()
}

fn cli_report(args: &[&str]) -> Result<RunReport, String> {
    let mut argv = vec!["varcomp"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = varcomp::cli::run(argv, &mut out, &mut err);
    if code != 0 {
        return Err(format!("exit {code}: {}", String::from_utf8_lossy(&err).trim()));
    }
    RunReport::from_json(std::str::from_utf8(&out).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn within_pct(got: f64, want: f64, pct: f64) -> bool {
    (got / want - 1.0).abs() <= pct / 100.0
}

fn pastes() -> Outcome {
    let path = fixture("pastes.csv");
    let r = cli_report(&[
        "test", &path, "--response", "strength", "--random", "batch:cask", "--random", "batch", "--contrast", "1,-1",
        "--alt", "greater", "--bootstrap", "1000", "--seed", "20240611",
    ])?;
    let t = r.test.ok_or("no test section")?;
    let tau: Vec<f64> = r.fit.tau.iter().map(|l| l.value).collect();
    let p_one = t.p_one.ok_or("no one-sided p-value")?;
    check(
        within_pct(tau[0], 12.49, 1.0)
            && within_pct(tau[1], 2.44, 1.0)
            && (t.p_two - 0.171).abs() <= 0.072
            && (p_one - 0.13).abs() <= 0.063
            && t.bootstrap_effective == 1000,
        format!(
            "tau = ({:.3}, {:.3}), p_two = {:.3}, p_one = {:.3}, B = {}",
            tau[0], tau[1], t.p_two, p_one, t.bootstrap_effective
        ),
    )
}

fn penicillin() -> Outcome {
    let path = fixture("penicillin.csv");
    let r = cli_report(&[
        "test", &path, "--response", "diameter", "--crossed", "sample,plate", "--contrast", "1,-1", "--alt", "greater",
        "--bootstrap", "1000", "--seed", "20240611",
    ])?;
    let t = r.test.ok_or("no test section")?;
    let tau: Vec<f64> = r.fit.tau.iter().map(|l| l.value).collect();
    let p_one = t.p_one.ok_or("no one-sided p-value")?;
    check(
        within_pct(tau[0], 12.34, 1.0) && within_pct(tau[1], 2.37, 1.0) && t.p_two < 0.01 && p_one < 0.01,
        format!("tau = ({:.3}, {:.3}), p_two = {:.3}, p_one = {:.3}", tau[0], tau[1], t.p_two, p_one),
    )
}

fn grid(sizes: &str, taus: &str, seed: u64) -> Result<Vec<CellResult>, String> {
    let grid = ExperimentGrid::from_json(&format!(
        r#"{{"family":"nested","sizes":{sizes},"taus":{taus},"s":200,"b":99,"seed":{seed}}}"#
    ))
    .map_err(|e| e.to_string())?;
    power_table(&grid, None, None).map_err(|e| e.to_string())
}

fn size_study() -> Outcome {
    let cells = grid("[[20,3,2]]", "[[0.5,0.5],[1.0,1.0]]", 108)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for c in &cells {
        ok &= (0.01..=0.11).contains(&c.reject05_two) && c.ks_two < 0.115;
        parts.push(format!(
            "tau = {:?}: reject {:.3}, KS {:.3}, {} failed",
            c.point.tau, c.reject05_two, c.ks_two, c.n_failed
        ));
    }
    check(ok && cells.len() == 2, parts.join("; "))
}

fn power_direction() -> Outcome {
    let cells = grid("[[30,4,3]]", "[[2.0,0.25],[2.0,2.0]]", 109)?;
    let (alt, null) = (&cells[0], &cells[1]);
    let (p1, p0) = (alt.reject05_two, null.reject05_two);
    let (s1, s0) = (alt.pvalues_two.len() as f64, null.pvalues_two.len() as f64);
    let se = (p1 * (1.0 - p1) / s1 + p0 * (1.0 - p0) / s0).sqrt();
    check(
        p1 - p0 >= 5.0 * se,
        format!("reject {p1:.3} at (2, 0.25) vs {p0:.3} at (2, 2); difference {:.1} SE", (p1 - p0) / se),
    )
}

fn counts(r: &TestResult) -> (u64, Option<u64>, Vec<u64>) {
    (r.p_two.to_bits(), r.p_one.map(f64::to_bits), r.draws.iter().map(|d| d.lambda_star.to_bits()).collect())
}

fn convention_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let design = DesignMatrices::new(
        DMatrix::from_element(48, 1, 1.0),
        vec![
            incidence(&(0..48).map(|i| i / 12).collect::<Vec<_>>(), 4),
            incidence(&(0..48).map(|i| i / 4).collect::<Vec<_>>(), 12),
            incidence(&(0..48).map(|i| i % 6).collect::<Vec<_>>(), 6),
        ],
    )
    .map_err(|e| e.to_string())?;
    let cache = Arc::new(DesignCache::new(design).map_err(|e| e.to_string())?);
    let y = simulate_response(&cache, &SimulationConfig::standard(1, vc(&[1.0, 0.7, 0.4])), &mut rng).map_err(|e| e.to_string())?;
    let contrast = ContrastSpec::new(
        DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0]),
        Alternative::OneSided(vec![RowConstraint::Greater]),
    )
    .map_err(|e| e.to_string())?;
    let rot = rotation_from_contrast(&contrast).map_err(|e| e.to_string())?;
    let with = |workers: usize| TestOptions {
        workers: Some(workers),
        ..TestOptions::default()
    };
    let base = bootstrap_test(&cache, &y, &contrast, 300, 42, &with(1)).map_err(|e| e.to_string())?;
    let eight = bootstrap_test(&cache, &y, &contrast, 300, 42, &with(8)).map_err(|e| e.to_string())?;
    let mut same = counts(&base) == counts(&eight);
    for flip in [[true, false], [false, true], [true, true]] {
        let flipped = rot.with_flipped_null_columns(&flip);
        let other = bootstrap_test_rotated(&cache, &y, &contrast, &flipped, 300, 42, &with(8)).map_err(|e| e.to_string())?;
        same &= counts(&base) == counts(&other);
    }
    check(
        same,
        format!("p_two = {} identical bitwise over workers 1/8 and three sign flips of Q_2", base.p_two),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("exactness at the origin", origin_is_exact),
        ("dense-oracle likelihood equivalence", dense_oracle_agrees),
        ("derivative correctness", derivatives_agree),
        ("null-sampler law", null_sampler_law),
        ("moment starts exact on balanced designs", mom_is_exact_on_balanced_designs),
        ("Pastes reproduction", pastes),
        ("Penicillin reproduction", penicillin),
        ("desk-scale size study", size_study),
        ("power direction", power_direction),
        ("convention invariance", convention_invariance),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}  {name}: {detail} [{secs:.1}s]", k + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
