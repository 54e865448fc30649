//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test --release --test acceptance`

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cellpop::charest::{sigma_moments, sigma_points, CharConfig, CharEstimator};
use cellpop::experiment::{
    error_series, repeat_dir_name, run_estimator, run_experiment, simulate_repeat, EstimatorKind,
    ExperimentConfig,
};
use cellpop::gmd::{fit_em, gaussian_kl_closed_form, kl_mc, Gmd};
use cellpop::gridpf::{build_advection_operator, propagate_particle, CsrMatrix, Grid, GridPf};
use cellpop::metrics::{l1_distance, ErrorSeries, Marginal1d, QUAD_NODES};
use cellpop::models::ModelSpec;
use cellpop::ode::{Dopri5, IntegratorConfig, OdeSystem};
use cellpop::plot::emit_plots;
use cellpop::rng::seeded;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = cellpop::Result<(bool, String)>;
/// `[repeat][dim]` L1 series.
type RepeatSeries = Vec<Vec<Vec<f64>>>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Charest and grid-PF results for one seed of the 2D benchmark.
struct Bench2dSeed {
    charest: Vec<ErrorSeries>,
    charest_secs: f64,
    gridpf: Option<(Vec<ErrorSeries>, f64)>,
}

fn bench2d_seed(seed: u64, with_gridpf: bool) -> cellpop::Result<Bench2dSeed> {
    let mut cfg = ExperimentConfig::builtin("bench2d")?;
    cfg.seed = seed;
    let data = simulate_repeat(&cfg, 0)?;
    let run = run_estimator(&cfg, EstimatorKind::Charest, 0, &data.snapshots)?;
    let charest = error_series(&cfg.model, &run, &data.ensembles, cfg.seed)?;
    let gridpf = if with_gridpf {
        let pf = run_estimator(&cfg, EstimatorKind::Gridpf, 0, &data.snapshots)?;
        let errs = error_series(&cfg.model, &pf, &data.ensembles, cfg.seed)?;
        Some((errs, pf.seconds))
    } else {
        None
    };
    Ok(Bench2dSeed {
        charest,
        charest_secs: run.seconds,
        gridpf,
    })
}

fn criterion1(runs: &[Bench2dSeed]) -> Outcome {
    let z: Vec<f64> = runs
        .iter()
        .map(|r| r.charest[0].last() / r.charest[0].first())
        .collect();
    let g: Vec<f64> = runs
        .iter()
        .map(|r| r.charest[1].last() / r.charest[1].first())
        .collect();
    let (mz, mg) = (median(z), median(g));
    Ok((
        mz < 0.4 && mg < 1.0,
        format!("median z last/first {mz:.3} (< 0.4), g last/first {mg:.3} (< 1)"),
    ))
}

fn criterion2(runs: &[Bench2dSeed]) -> Outcome {
    let mut avg = BTreeMap::<(&str, usize), Vec<f64>>::new();
    let mut ratios = Vec::new();
    for r in runs {
        let (pf, pf_secs) = r.gridpf.as_ref().expect("grid PF results");
        for (d, pf_d) in pf.iter().enumerate() {
            avg.entry(("charest", d))
                .or_default()
                .push(r.charest[d].time_average());
            avg.entry(("gridpf", d))
                .or_default()
                .push(pf_d.time_average());
        }
        ratios.push(pf_secs / r.charest_secs);
    }
    let med = |k: (&str, usize)| median(avg[&k].clone());
    let ratio = median(ratios);
    let mut ok = ratio >= 10.0;
    let mut parts = Vec::new();
    for (d, name) in ["z", "g"].iter().enumerate() {
        let (c, p) = (med(("charest", d)), med(("gridpf", d)));
        ok &= c <= p;
        parts.push(format!("{name}: charest {c:.3} <= gridpf {p:.3}"));
    }
    Ok((
        ok,
        format!(
            "{}; wall-clock ratio {ratio:.1} (>= 10, 80x30 grid, 120 particles)",
            parts.join(", ")
        ),
    ))
}

/// Per-repeat L1 series of one estimator, keyed by marginal name.
fn repeat_errors(run_dir: &Path, repeat: usize, dims: &[String]) -> cellpop::Result<Vec<Vec<f64>>> {
    let dir = run_dir.join(repeat_dir_name(repeat));
    dims.iter()
        .map(|d| {
            let text = fs::read_to_string(dir.join(format!("errors_{d}.csv")))?;
            Ok(text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .skip(1)
                .filter_map(|l| l.rsplit(',').next()?.parse().ok())
                .collect())
        })
        .collect()
}

/// Runs a 3D scenario and returns `[repeat][dim] -> series`.
fn bench3d(name: &str, dir: &Path) -> cellpop::Result<(Vec<String>, RepeatSeries)> {
    let cfg = ExperimentConfig::builtin(name)?;
    let manifest = run_experiment(&cfg, dir)?;
    let dims = cfg.model.dim_names();
    let series = manifest
        .repeats
        .iter()
        .map(|r| repeat_errors(dir, r.index, &dims))
        .collect::<cellpop::Result<Vec<_>>>()?;
    Ok((dims, series))
}

fn criterion3(dims: &[String], series: &[Vec<Vec<f64>>], panels: usize) -> Outcome {
    let mut ok = series.len() == 10 && panels > 0;
    let mut parts = Vec::new();
    for (d, name) in dims.iter().enumerate() {
        let first = mean(&series.iter().map(|r| r[d][0]).collect::<Vec<_>>());
        let last = mean(
            &series
                .iter()
                .map(|r| *r[d].last().unwrap())
                .collect::<Vec<_>>(),
        );
        ok &= last < first;
        parts.push(format!("{name} {first:.3} -> {last:.3}"));
    }
    Ok((
        ok,
        format!(
            "{} repeats, {}; {panels} panel figures",
            series.len(),
            parts.join(", ")
        ),
    ))
}

fn criterion4(dims: &[String], clean: &[Vec<Vec<f64>>], noisy: &[Vec<Vec<f64>>]) -> Outcome {
    let time_avgs =
        |s: &[Vec<Vec<f64>>], d: usize| -> Vec<f64> { s.iter().map(|r| mean(&r[d])).collect() };
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, name) in dims.iter().enumerate() {
        let (c, n) = (time_avgs(clean, d), time_avgs(noisy, d));
        let pooled = (0.5 * (sample_var(&c) + sample_var(&n))).sqrt();
        let (mc, mn) = (mean(&c), mean(&n));
        ok &= mn >= mc - pooled;
        parts.push(format!(
            "{name}: noisy {mn:.3} >= clean {mc:.3} - {pooled:.3}"
        ));
    }
    Ok((ok, parts.join(", ")))
}

fn transport_error(nz: usize, ng: usize) -> cellpop::Result<f64> {
    let dt = 0.33;
    let (mu, cov) = (dvector![1.5, 0.5], dmatrix![0.1, 0.0; 0.0, 0.01]);
    let model = ModelSpec::growth2d_default();
    let grid = Grid::growth2d(nz, ng)?;
    let adv = build_advection_operator(&model, &grid)?;
    let mut n = grid
        .discretize(&Gmd::single(mu.clone(), cov.clone())?)?
        .values;
    let mut stepper = Dopri5::new(grid.n_nodes(), IntegratorConfig::default());
    propagate_particle(
        &adv.matrix,
        &grid,
        &mut n,
        dt,
        0.0,
        &mut stepper,
        &mut seeded(0),
    )?;
    // Below the threshold (z, g) -> (z + g t, g).
    let exact = Gmd::single(
        dvector![mu[0] + dt * mu[1]],
        dmatrix![cov[(0, 0)] + dt * dt * cov[(1, 1)]],
    )?;
    l1_distance(
        &grid.marginal(&n, 0)?,
        &Marginal1d::Mixture(exact),
        QUAD_NODES,
    )
}

fn criterion5() -> Outcome {
    let coarse = transport_error(240, 90)?;
    let fine = transport_error(480, 180)?;
    let ratio = coarse / fine;
    Ok((
        coarse < 0.15 && ratio >= 1.5,
        format!(
            "L1 {coarse:.4} at 240x90 (< 0.15), {fine:.4} at 480x180, ratio {ratio:.2} (>= 1.5)"
        ),
    ))
}

fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let squarings = 8;
    let scaled = a / 2f64.powi(squarings);
    let (mut term, mut sum) = (DMatrix::identity(n, n), DMatrix::identity(n, n));
    for k in 1..20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn sigma_reproduction() -> cellpop::Result<f64> {
    let mean = dvector![1.0, -2.0, 0.5];
    let cov = dmatrix![0.5, 0.1, 0.0; 0.1, 0.3, -0.05; 0.0, -0.05, 0.2];
    let (pts, w) = sigma_points(&mean, &cov)?;
    let (m, c) = sigma_moments(&pts, &w);
    Ok((m - mean).amax().max((c - cov).amax()))
}

fn ut_linear_error() -> cellpop::Result<f64> {
    let a = vec![vec![-0.5, 0.3], vec![0.1, -0.2]];
    let dt = 1.5;
    let cfg = CharConfig {
        n_cand: 10,
        w0: 0.1,
        ..CharConfig::bench2d()
    };
    let tight = IntegratorConfig {
        rel_tol: 1e-11,
        abs_tol: 1e-13,
        max_step: None,
    };
    let est = CharEstimator::new(ModelSpec::linear(a.clone(), vec![0])?, cfg, tight)?;
    let n0 = Gmd::single(dvector![1.0, 2.0], DMatrix::identity(2, 2))?;
    let mut s = est.init(&n0, 0.0, &mut seeded(9))?;
    let before = s.candidates.clone();
    est.predict(&mut s, dt, &mut seeded(10))?;
    let phi = expm(&(DMatrix::from_fn(2, 2, |i, j| a[i][j]) * dt));
    Ok(before
        .iter()
        .zip(&s.candidates)
        .map(|(old, new)| {
            let m = (&new.mean - &phi * &old.mean).amax();
            let c = (&new.covariance - &phi * &old.covariance * phi.transpose()).amax();
            m.max(c)
        })
        .fold(0.0, f64::max))
}

fn kl_pairs_error() -> cellpop::Result<f64> {
    let pairs = [
        (dvector![0.0], dmatrix![1.0], dvector![1.0], dmatrix![2.0]),
        (
            dvector![0.0, 0.0],
            dmatrix![1.0, 0.3; 0.3, 0.5],
            dvector![0.5, -0.5],
            dmatrix![0.8, 0.0; 0.0, 1.0],
        ),
        (
            dvector![1.0, 2.0, 0.0],
            DMatrix::identity(3, 3) * 0.2,
            dvector![1.2, 1.8, 0.3],
            DMatrix::identity(3, 3) * 0.3,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (i, (mp, cp, mq, cq)) in pairs.into_iter().enumerate() {
        let p = Gmd::single(mp, cp)?;
        let q = Gmd::single(mq, cq)?;
        let samples = p.sample(100_000, &mut seeded(100 + i as u64))?;
        let est = kl_mc(&samples, &p, &q)?;
        worst = worst.max((est - gaussian_kl_closed_form(&p, &q)?).abs());
    }
    Ok(worst)
}

fn em_recovery_error() -> cellpop::Result<f64> {
    let truth = Gmd::new(
        vec![
            (0.4, dvector![-3.0, 0.0], DMatrix::identity(2, 2) * 0.3),
            (0.6, dvector![3.0, 1.0], DMatrix::identity(2, 2) * 0.5),
        ],
        1.0,
    )?;
    let points = truth.sample(2000, &mut seeded(21))?;
    let fit = fit_em(&points, 2, 500, &mut seeded(22))?;
    let mut means: Vec<DVector<f64>> = fit.components().iter().map(|c| c.mean().clone()).collect();
    means.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Ok(means
        .iter()
        .zip(truth.components())
        .map(|(m, c)| (m - c.mean()).amax())
        .fold(0.0, f64::max))
}

struct Flow<'a>(&'a CsrMatrix);

impl OdeSystem for Flow<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn rhs(&self, x: &[f64], dx: &mut [f64]) {
        self.0.mul_vec_into(x, dx);
    }
}

/// Largest mass defect over raw advection steps and full filter steps.
fn mass_defect() -> cellpop::Result<f64> {
    let cfg = ExperimentConfig::builtin("bench2d")?;
    let spec = cfg.gridpf.clone().expect("bench2d grid PF settings");
    let grid = Grid::new(spec.grid)?;
    let adv = build_advection_operator(&cfg.model, &grid)?;
    let n0 = cfg.estimate_n0()?;
    let mut worst: f64 = 0.0;

    let mut n = grid.discretize(&n0)?.values;
    let mut stepper = Dopri5::new(grid.n_nodes(), cfg.integrator);
    for _ in 0..5 {
        stepper.integrate(&Flow(&adv.matrix), &mut n, 0.0, cfg.time.dt)?;
        worst = worst.max((grid.mass(&n) - 1.0).abs());
    }

    let pf = GridPf::new(&cfg.model, grid.clone(), spec.filter, cfg.integrator)?;
    let mut rng = seeded(5);
    let mut s = pf.init(&n0, 0.0, &mut rng)?;
    let measured = Gmd::single(dvector![1.8], dmatrix![0.11])?;
    for k in 1..=3 {
        pf.step(&mut s, k as f64 * cfg.time.dt, &measured, &mut rng)?;
        for p in &s.particles {
            worst = worst.max((grid.mass(p) - 1.0).abs());
        }
    }
    Ok(worst)
}

fn criterion6() -> Outcome {
    let sigma = sigma_reproduction()?;
    let ut = ut_linear_error()?;
    let kl = kl_pairs_error()?;
    let em = em_recovery_error()?;
    let mass = mass_defect()?;
    let phi = Normal::new(0.0, 1.0).expect("standard normal").cdf(0.25);
    let expected = 2.0 * (2.0 * phi - 1.0);
    let normal = |m: f64| Gmd::single(dvector![m], dmatrix![1.0]).map(Marginal1d::Mixture);
    let l1 = (l1_distance(&normal(0.0)?, &normal(0.5)?, QUAD_NODES)? - expected).abs();
    let ok = sigma < 1e-10 && ut < 1e-6 && kl < 0.02 && em < 0.1 && mass < 1e-6 && l1 < 1e-3;
    Ok((
        ok,
        format!(
            "sigma {sigma:.1e}, UT vs expm {ut:.1e}, kl_mc {kl:.4}, EM means {em:.3}, \
             mass {mass:.1e}, shifted-Gaussian L1 {l1:.1e}"
        ),
    ))
}

fn error_csvs(dir: &Path) -> cellpop::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("errors_") && n.ends_with(".csv"))
            {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn criterion7(root: &Path) -> Outcome {
    let mut trees = Vec::new();
    for threads in [1, 3] {
        let out = root.join(format!("threads{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_cellpop"))
            .args([
                "run",
                "--seed",
                "42",
                "--threads",
                &threads.to_string(),
                "--out",
            ])
            .arg(&out)
            .output()?;
        if !status.status.success() {
            return Ok((
                false,
                format!(
                    "run exited with {:?}: {}",
                    status.status.code(),
                    String::from_utf8_lossy(&status.stderr)
                ),
            ));
        }
        trees.push(error_csvs(&out)?);
    }
    let identical = trees[0] == trees[1];
    Ok((
        identical && !trees[0].is_empty(),
        format!(
            "{} error CSVs compared across 1 and 3 threads, identical: {identical}",
            trees[0].len()
        ),
    ))
}

fn report(results: &mut Vec<bool>, id: usize, secs: f64, outcome: Outcome) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} criterion {id}: {detail} [{secs:.1} s]",
        if ok { "PASS" } else { "FAIL" }
    );
    results.push(ok);
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results = Vec::new();

    let (runs, secs) = timed(|| {
        (1..=5)
            .map(|seed| bench2d_seed(seed, seed <= 3))
            .collect::<cellpop::Result<Vec<_>>>()
    });
    match runs {
        Ok(runs) => {
            report(&mut results, 1, secs, criterion1(&runs));
            report(&mut results, 2, 0.0, criterion2(&runs[..3]));
        }
        Err(e) => {
            report(&mut results, 1, secs, Err(e));
            report(&mut results, 2, 0.0, Ok((false, "2D runs failed".into())));
        }
    }

    let clean_dir = tmp.path().join("bench3d_clean");
    let (clean, secs) = timed(|| bench3d("bench3d_clean", &clean_dir));
    let panels = emit_plots(&clean_dir)
        .map(|r| {
            r.files
                .iter()
                .filter(|f| f.to_string_lossy().contains("panel_t"))
                .count()
        })
        .unwrap_or(0);
    let (noisy, secs_noisy) = timed(|| bench3d("bench3d_noisy", &tmp.path().join("bench3d_noisy")));
    match (&clean, &noisy) {
        (Ok((dims, c)), Ok((_, n))) => {
            report(&mut results, 3, secs, criterion3(dims, c, panels));
            report(&mut results, 4, secs_noisy, criterion4(dims, c, n));
        }
        _ => {
            let why = |r: &cellpop::Result<_>| r.as_ref().err().map(|e| format!("{e}"));
            let msg = format!("3D runs failed: {:?} {:?}", why(&clean), why(&noisy));
            report(&mut results, 3, secs, Ok((false, msg.clone())));
            report(&mut results, 4, secs_noisy, Ok((false, msg)));
        }
    }

    let (o, secs) = timed(criterion5);
    report(&mut results, 5, secs, o);
    let (o, secs) = timed(criterion6);
    report(&mut results, 6, secs, o);
    let (o, secs) = timed(|| criterion7(tmp.path()));
    report(&mut results, 7, secs, o);

    let passed = results.iter().filter(|ok| **ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
