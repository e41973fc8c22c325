//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any failed. Several criteria are
//! Monte-Carlo runs at full size and take minutes each on one core.

use std::fs;
use std::path::Path;
use std::time::Instant;

use latentci::factor::{fit_em, EmOptions};
use latentci::glm::{gradient, hessian, loss};
use latentci::lasso::{fit_lasso, kkt_violation, lambda_max, penalty_weights, LassoOptions};
use latentci::normal::{normal_cdf, normal_quantile, two_sided_p_value};
use latentci::parallel_analysis::{parallel_analysis_with_reference, NullReference};
use latentci::pipeline::{
    center_columns, estimate_confounder_step, full_pipeline_with_hooks, PipelineHooks, PipelineOptions,
};
use latentci::projection::{fit_w, projection_problem};
use latentci::seed::{derive_seed, rng_from};
use latentci::simulation::{
    diag_block_loadings, generate_dataset, run_method, run_replications, CoverageSummary, Loading, Method, SimConfig,
};
use latentci::{Coefficients, Dataset, Design, FactorCount, GlmFamily};
use latentci_cli::table::write_matrix_csv;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

const FAMILIES: [GlmFamily; 3] = [GlmFamily::Linear, GlmFamily::Logistic, GlmFamily::Poisson];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random GLM instance with `k` confounder columns and a moderate predictor.
fn random_design(family: GlmFamily, n: usize, p: usize, k: usize, seed: u64) -> Design {
    let mut rng = rng_from(seed);
    let x = normal_matrix(&mut rng, n, p);
    let u = normal_matrix(&mut rng, n, k);
    let y = DVector::from_fn(n, |i, _| {
        let mut t = 0.5 * x[(i, 0)] - 0.3 * x[(i, 1 % p)];
        for c in 0..k {
            t += 0.3 * u[(i, c)];
        }
        match family {
            GlmFamily::Linear => t + rng.sample::<f64, _>(StandardNormal),
            GlmFamily::Logistic => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-t).exp())),
            GlmFamily::Poisson => Poisson::new((0.5 * t).exp()).unwrap().sample(&mut rng),
        }
    });
    Design::new(&Dataset::new(y, x, 0).unwrap(), &u).unwrap()
}

fn coverage(summary: &CoverageSummary, method: Method) -> f64 {
    summary.method(method).and_then(|m| m.coverage).unwrap_or(f64::NAN)
}

fn mean_length(summary: &CoverageSummary, method: Method) -> f64 {
    summary.method(method).and_then(|m| m.mean_ci_length).unwrap_or(f64::NAN)
}

fn within(value: f64, low: f64, high: f64) -> bool {
    (low..=high).contains(&value)
}

fn coverage_run(family: GlmFamily, loading: Loading, methods: &[Method], seed: u64) -> CoverageSummary {
    let mut config = SimConfig::new(500, 300, family, loading);
    config.replications = 200;
    config.alpha = 0.05;
    config.seed = seed;
    config.methods = methods.to_vec();
    run_replications(&config).expect("coverage run")
}

fn failures_note(summary: &CoverageSummary) -> String {
    format!("valid={} failures={}", summary.valid, summary.failures.len())
}

fn criterion_1_and_4() -> (Verdict, Verdict) {
    let summary = coverage_run(GlmFamily::Linear, Loading::DiagBlocks, &Method::ALL, 1);
    let (prop, orac, naive) = (
        coverage(&summary, Method::Proposed),
        coverage(&summary, Method::Oracle),
        coverage(&summary, Method::Naive),
    );
    let first = verdict(
        summary.valid && within(prop, 0.91, 0.985) && within(orac, 0.91, 0.985) && naive <= 0.90,
        format!("linear coverage proposed {prop:.3} oracle {orac:.3} naive {naive:.3} ({})", failures_note(&summary)),
    );
    let (lp, lo) = (mean_length(&summary, Method::Proposed), mean_length(&summary, Method::Oracle));
    let ratio = lp / lo;
    let fourth = verdict(
        (ratio - 1.0).abs() <= 0.25,
        format!("mean CI length proposed {lp:.4} oracle {lo:.4} ratio {ratio:.3}"),
    );
    (first, fourth)
}

fn criterion_2() -> Verdict {
    let summary = coverage_run(GlmFamily::Logistic, Loading::DiagBlocks, &[Method::Proposed, Method::Naive], 2);
    let (prop, naive) = (coverage(&summary, Method::Proposed), coverage(&summary, Method::Naive));
    verdict(
        summary.valid && within(prop, 0.90, 0.985) && naive <= 0.90,
        format!("logistic coverage proposed {prop:.3} naive {naive:.3} ({})", failures_note(&summary)),
    )
}

fn criterion_3() -> Verdict {
    let summary = coverage_run(GlmFamily::Linear, Loading::Uniform, &[Method::Proposed], 3);
    let prop = coverage(&summary, Method::Proposed);
    verdict(
        summary.valid && within(prop, 0.90, 0.985),
        format!("uniform-loading coverage proposed {prop:.3} ({})", failures_note(&summary)),
    )
}

fn criterion_5() -> Verdict {
    let mut identical = 0;
    for instance in 0..20u64 {
        let family = FAMILIES[instance as usize % 3];
        let loading = if instance % 2 == 0 { Loading::DiagBlocks } else { Loading::Uniform };
        let mut config = SimConfig::new(100, 30, family, loading);
        config.seed = 500 + instance;
        let data = generate_dataset(&config, 0).unwrap();
        let oracle = run_method(Method::Oracle, &data, &config).unwrap().inference;
        let u = center_columns(data.u.as_ref().unwrap());
        let hooks = PipelineHooks { confounder_override: Some(&u), null_reference: None };
        let hooked = full_pipeline_with_hooks(family, &data.y, &data.x, 0, &config.pipeline_options(), &hooks)
            .unwrap()
            .inference;
        if hooked == oracle {
            identical += 1;
        }
    }
    verdict(identical == 20, format!("{identical}/20 instances bit-identical to the oracle baseline"))
}

fn criterion_6() -> Verdict {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for family in FAMILIES {
        for seed in 0..50u64 {
            let (p, k) = (3 + (seed % 6) as usize, (seed % 4) as usize);
            let design = random_design(family, 40, p, k, 6000 + seed);
            let mut rng = rng_from(7000 + seed);
            let eta = DVector::from_fn(p + k, |_, _| 0.4 * rng.random_range(-1.0..1.0));
            let at = |e: &DVector<f64>| Coefficients::from_vector(e, p, k).unwrap();
            let g = gradient(family, &design, &at(&eta)).unwrap();
            let h = hessian(family, &design, &at(&eta)).unwrap();
            let mut fd_g = DVector::zeros(p + k);
            let mut fd_h = DMatrix::zeros(p + k, p + k);
            for j in 0..p + k {
                let mut up = eta.clone();
                up[j] += step;
                let mut down = eta.clone();
                down[j] -= step;
                fd_g[j] = (loss(family, &design, &at(&up)).unwrap() - loss(family, &design, &at(&down)).unwrap()) / (2.0 * step);
                let col = (gradient(family, &design, &at(&up)).unwrap() - gradient(family, &design, &at(&down)).unwrap()) / (2.0 * step);
                fd_h.set_column(j, &col);
            }
            worst = worst.max((&fd_g - &g).norm() / g.norm()).max((&fd_h - &h).norm() / h.norm());
            count += 1;
        }
    }
    verdict(worst < 1e-6, format!("{count} instances, worst relative error {worst:.2e}"))
}

fn criterion_7() -> Verdict {
    let mut worst_lasso = 0.0f64;
    let mut worst_w = 0.0f64;
    for instance in 0..50u64 {
        let family = FAMILIES[instance as usize % 3];
        let design = random_design(family, 120, 25, 2, 8000 + instance);
        let opts = LassoOptions::default();
        let lambda = (0.05 + 0.9 * (instance as f64 / 50.0)) * lambda_max(family, &design, &opts).unwrap();
        let fit = fit_lasso(family, &design, lambda, &opts, None).unwrap();
        let g = gradient(family, &design, &fit.coeffs).unwrap();
        worst_lasso = worst_lasso.max(kkt_violation(&g, &fit.coeffs.to_vector(), lambda, &penalty_weights(&design, &opts)));
        let problem = projection_problem(family, &design, &fit.coeffs).unwrap();
        let lp = (0.02 + 0.5 * (instance as f64 / 50.0)) * problem.b.amax();
        let w = fit_w(family, &design, &fit.coeffs, lp).unwrap();
        worst_w = worst_w.max(problem.kkt_residual(&w.w, lp));
    }
    let mut worst_ls = 0.0f64;
    for instance in 0..20u64 {
        let design = random_design(GlmFamily::Linear, 40, 5, 1, 9000 + instance);
        let fit = fit_lasso(GlmFamily::Linear, &design, 0.0, &LassoOptions::default(), None).unwrap();
        let z = design.z();
        let ls = (z.transpose() * z).cholesky().unwrap().solve(&(z.transpose() * design.y()));
        worst_ls = worst_ls.max((fit.coeffs.to_vector() - ls).amax());
    }
    verdict(
        worst_lasso < 1e-6 && worst_w < 1e-6 && worst_ls < 1e-8,
        format!("KKT lasso {worst_lasso:.2e}, KKT projection {worst_w:.2e}, least-squares gap {worst_ls:.2e}"),
    )
}

fn criterion_8() -> Verdict {
    let mut worst_drop = 0.0f64;
    for instance in 0..100u64 {
        let n = 50 + 25 * (instance % 5) as usize;
        let p = 12 + 3 * (instance % 7) as usize;
        let k = 1 + (instance % 3) as usize;
        let mut rng = rng_from(10_000 + instance);
        let u = normal_matrix(&mut rng, n, k);
        let w = DMatrix::from_fn(k, p, |_, _| rng.random_range(-1.0..1.5));
        let scale = DVector::from_fn(p, |_, _| rng.random_range(0.3..2.0));
        let mut x = &u * &w;
        for i in 0..n {
            for j in 0..p {
                x[(i, j)] += scale[j] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let fit = fit_em(&x, k, &EmOptions::default()).unwrap();
        for pair in fit.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(pair[0] - pair[1]);
        }
    }
    verdict(worst_drop <= 1e-10, format!("100 instances, largest log-likelihood decrease {worst_drop:.2e}"))
}

/// Mean canonical correlation between the column spans of `a` and `b`.
fn mean_canonical_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = center_columns(a).qr().q();
    let qb = center_columns(b).qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let m = a.ncols().min(b.ncols());
    s.iter().take(m).sum::<f64>() / m as f64
}

fn criterion_9() -> Verdict {
    let mut config = SimConfig::new(500, 300, GlmFamily::Linear, Loading::DiagBlocks);
    config.seed = 9;
    let fixed = PipelineOptions { k: FactorCount::Fixed(3), ..Default::default() };
    let mut total_cc = 0.0;
    for rep in 0..50 {
        let data = generate_dataset(&config, rep).unwrap();
        let step = estimate_confounder_step(&data.x, &fixed, &PipelineHooks::default()).unwrap();
        total_cc += mean_canonical_correlation(&step.uhat, data.u.as_ref().unwrap());
    }
    let mean_cc = total_cc / 50.0;

    // each run draws its own null reference, so the 100 runs are independent
    let loadings = diag_block_loadings(300);
    let mut found_three = 0;
    let mut found_zero = 0;
    for rep in 0..100 {
        let opts = PipelineOptions { seed: derive_seed(config.seed, rep), ..Default::default() }.parallel_analysis();
        let reference = NullReference::compute(500, 300, &opts).unwrap();
        let data = generate_dataset(&config, 100 + rep as usize).unwrap();
        if parallel_analysis_with_reference(&data.x, &reference).unwrap().k == 3 {
            found_three += 1;
        }
        let noise = &data.x - data.u.as_ref().unwrap() * &loadings;
        if parallel_analysis_with_reference(&noise, &reference).unwrap().k == 0 {
            found_zero += 1;
        }
    }
    verdict(
        mean_cc > 0.95 && found_three >= 90 && found_zero >= 95,
        format!("mean canonical correlation {mean_cc:.4}; K=3 in {found_three}/100; K=0 on noise in {found_zero}/100"),
    )
}

fn criterion_10() -> Verdict {
    let p = two_sided_p_value(6.484);
    let rel = (p - 8.940e-11).abs() / 8.940e-11;
    let mut worst = 0.0f64;
    for i in 1..1000 {
        let q = i as f64 / 1000.0;
        worst = worst.max((normal_cdf(normal_quantile(q).unwrap()) - q).abs());
    }
    for q in [1e-10, 1e-6, 0.01, 0.5, 0.975, 1.0 - 1e-6] {
        worst = worst.max((normal_cdf(normal_quantile(q).unwrap()) - q).abs());
    }
    verdict(rel < 0.02 && worst < 1e-9, format!("p(6.484) = {p:.4e} (relative gap {rel:.2e}); worst round trip {worst:.2e}"))
}

/// `‖η̂ - η*‖₁` with the confounder coefficients mapped to the true-U
/// coordinates through the least-squares fit of `Û` on centered `U`.
fn estimation_error(config: &SimConfig, rep: usize) -> f64 {
    let data = generate_dataset(config, rep).unwrap();
    let opts = config.pipeline_options();
    let step = estimate_confounder_step(&data.x, &opts, &PipelineHooks::default()).unwrap();
    let hooks = PipelineHooks { confounder_override: Some(&step.uhat), null_reference: None };
    let out = full_pipeline_with_hooks(config.family, &data.y, &data.x, 0, &opts, &hooks).unwrap();
    let truth = config.true_coefficients();
    let p = config.p;
    let eta = out.lasso.coeffs.to_vector();
    let gamma_err: f64 = (0..p).map(|j| (eta[j] - truth[j]).abs()).sum();
    let u = center_columns(data.u.as_ref().unwrap());
    let beta_hat = DVector::from_fn(step.k, |c, _| eta[p + c]);
    let aligned = if step.k == 0 {
        DVector::zeros(3)
    } else {
        let map = (u.transpose() * &u).cholesky().unwrap().solve(&(u.transpose() * &step.uhat));
        map * beta_hat
    };
    let beta_err: f64 = (0..3).map(|c| (aligned[c] - truth[p + c]).abs()).sum();
    gamma_err + beta_err
}

fn criterion_11() -> Verdict {
    let mean_error = |n: usize| {
        let mut config = SimConfig::new(n, 300, GlmFamily::Linear, Loading::DiagBlocks);
        config.seed = 11;
        (0..100).map(|rep| estimation_error(&config, rep)).sum::<f64>() / 100.0
    };
    let small = mean_error(200);
    let large = mean_error(1000);
    verdict(large < small, format!("mean l1 error {small:.4} at n=200, {large:.4} at n=1000"))
}

fn cli_bytes(args: &[String], threads: usize) -> (i32, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["latentci".to_string()];
    full.extend_from_slice(args);
    let code = pool.install(|| latentci_cli::run(full, &mut out, &mut err));
    (code, out)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_12() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let config_path = root.path().join("config.json");
    fs::write(
        &config_path,
        r#"{"n": 120, "p": 30, "family": "logistic", "loading": "diag_blocks", "replications": 4, "seed": 12, "grid_size": 30, "pa_draws": 30}"#,
    )
    .unwrap();
    let mut config = SimConfig::new(150, 30, GlmFamily::Poisson, Loading::Uniform);
    config.seed = 12;
    let data = generate_dataset(&config, 0).unwrap();
    let mut names = vec!["y".to_string()];
    names.extend((1..=30).map(|j| format!("g{j}")));
    let mut table = DMatrix::zeros(150, 31);
    table.column_mut(0).copy_from(&data.y);
    table.columns_mut(1, 30).copy_from(&data.x);
    let data_path = root.path().join("data.csv");
    write_matrix_csv(&data_path, &names, &table).unwrap();
    let covariates_path = root.path().join("covariates.csv");
    write_matrix_csv(&covariates_path, &names[1..], &data.x).unwrap();

    let path = |p: &Path| p.to_string_lossy().into_owned();
    let mut mismatches = Vec::new();
    let mut runs = 0;
    for command in ["simulate", "infer", "select-k"] {
        let mut outputs = Vec::new();
        for (attempt, threads) in [1usize, 1, 8].into_iter().enumerate() {
            let out_dir = root.path().join(format!("{command}-{attempt}"));
            fs::create_dir_all(&out_dir).unwrap();
            let args: Vec<String> = match command {
                "simulate" => vec!["simulate".into(), "--config".into(), path(&config_path), "--out".into(), path(&out_dir)],
                "infer" => [
                    "infer", "--data", &path(&data_path), "--response", "y", "--exposures", "g1,g2,g3", "--family", "poisson",
                    "--k", "auto", "--alpha", "0.05", "--seed", "12", "--out", &path(&out_dir.join("report.csv")),
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
                _ => [
                    "select-k", "--data", &path(&covariates_path), "--draws", "50", "--quantile", "0.95", "--seed", "12",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            };
            let (code, stdout) = cli_bytes(&args, threads);
            runs += 1;
            if code != 0 {
                mismatches.push(format!("{command} exited {code}"));
            }
            outputs.push((stdout, snapshot(&out_dir)));
        }
        if outputs[0] != outputs[1] {
            mismatches.push(format!("{command}: two 1-thread runs differ"));
        }
        if outputs[0] != outputs[2] {
            mismatches.push(format!("{command}: 1 vs 8 threads differ"));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{runs} runs of simulate, infer and select-k byte-identical across repeats and thread counts")
    } else {
        mismatches.join("; ")
    };
    verdict(mismatches.is_empty(), detail)
}

fn report(results: &mut Vec<(usize, Verdict)>, number: usize, started: Instant, v: Verdict) {
    println!(
        "criterion {number:>2}: {} [{:.0}s] {}",
        if v.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        v.detail
    );
    results.push((number, v));
}

fn main() {
    // optional criterion numbers as arguments restrict the run, e.g. `-- 9 12`
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results = Vec::new();
    let cheap: [(usize, fn() -> Verdict); 7] = [
        (10, criterion_10),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (5, criterion_5),
        (12, criterion_12),
        (9, criterion_9),
    ];
    for (number, run) in cheap {
        if selected(number) {
            let started = Instant::now();
            let v = run();
            report(&mut results, number, started, v);
        }
    }
    if selected(1) || selected(4) {
        let started = Instant::now();
        let (first, fourth) = criterion_1_and_4();
        report(&mut results, 1, started, first);
        report(&mut results, 4, started, fourth);
    }
    for (number, run) in [(3, criterion_3 as fn() -> Verdict), (11, criterion_11), (2, criterion_2)] {
        if selected(number) {
            let started = Instant::now();
            let v = run();
            report(&mut results, number, started, v);
        }
    }

    results.sort_by_key(|(n, _)| *n);
    println!();
    for (number, v) in &results {
        println!("criterion {number:>2}: {}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
