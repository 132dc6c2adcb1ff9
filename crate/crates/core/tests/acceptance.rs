//! Acceptance checks. Each test writes one `[PASS]`/`[FAIL]` line straight to
//! stderr (visible without `--nocapture`) and then asserts the same outcome.

use std::io::Write;
use std::time::Instant;

use chrono::NaiveDate;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use carbonvol::har::{self, HarSpec, ModelKind};
use carbonvol::indirect::{self, IIConfig, IIProblem};
use carbonvol::optim::NelderMead;
use carbonvol::pipeline::{self, Fixture, PipelineConfig, RunOptions, Stage};
use carbonvol::pricing::{self, OptionKind, OptionQuote, PricerConfig, RiskNeutralParams, RiskPremia};
use carbonvol::realized::{self, DayMeasures, MeasureConfig, ThresholdConfig, Units};
use carbonvol::sim::{self, Factor, SimConfig, StructuralParams};
use carbonvol::stats;

fn verdict(id: &str, pass: bool, detail: String) {
    let line = format!("\n[{}] {id}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "{id}: {detail}");
}

fn svj_premia() -> RiskPremia {
    RiskPremia { phi: -7.35e-3, psi1: 2.81e-3, psi2: 1.50e-2 }
}

fn quote(kind: OptionKind, strike: f64, futures: f64, tau_days: f64) -> OptionQuote {
    OptionQuote { date: None, kind, strike, futures, tau_days, price: f64::NAN, iv: None }
}

fn day(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).unwrap() + chrono::Days::new(i as u64)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn a01_characteristic_function_normalization_and_martingale() {
    let t0 = Instant::now();
    let (r, q) = (0.03, 0.01);
    let models = [
        risk_neutralize(&StructuralParams::two_sv(), &RiskPremia::zero()),
        risk_neutralize(&StructuralParams::two_sv(), &RiskPremia { phi: 0.0, ..svj_premia() }),
        risk_neutralize(&StructuralParams::two_svj(), &RiskPremia::zero()),
        risk_neutralize(&StructuralParams::two_svj(), &svj_premia()),
    ];
    let mut worst_norm: f64 = 0.0;
    let mut worst_mart: f64 = 0.0;
    let mut points = 0;
    for (m, qp) in models.iter().enumerate() {
        let qp = qp.clone().with_rates(r, q);
        for k in 0..25 {
            // log-spaced calendar days over [1, 365]
            let days = 365f64.powf(k as f64 / 24.0);
            let tau = days * pricing::TRADING_DAYS / pricing::CALENDAR_DAYS;
            let x = [0.0, 28f64.ln(), 3.0][(k + m) % 3];
            let c = [2e-4, 8.6e-4, 3e-3][k % 3];
            let v = pricing::split_state(c, &qp.factors);
            let one = pricing::char_fn(Complex64::new(0.0, 0.0), x, &v, &qp, tau).unwrap();
            let mart = pricing::char_fn(Complex64::new(0.0, -1.0), x, &v, &qp, tau).unwrap();
            worst_norm = worst_norm.max((one - 1.0).norm());
            worst_mart = worst_mart.max((mart - (x + (qp.r - qp.q) * tau).exp()).norm());
            points += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "A1 cf normalization and martingale",
        points == 100 && worst_norm == 0.0 && worst_mart < 1e-10 && secs < 1.0,
        format!("{points} points, max|cf(0)-1| = {worst_norm:.1e}, max|cf(-i)-e^(x+(r-q)tau)| = {worst_mart:.2e} (tol 1e-10), {secs:.3} s (limit 1 s)"),
    );
}

fn risk_neutralize(p: &StructuralParams, premia: &RiskPremia) -> RiskNeutralParams {
    pricing::risk_neutralize(p, premia).unwrap()
}

#[test]
fn a02_fourier_prices_against_black76_and_monte_carlo() {
    let t0 = Instant::now();
    let f = 28.0;
    let strikes = [0.8 * f, f, 1.2 * f];
    let maturities = [30.0, 90.0, 180.0];
    let r = 0.02;
    let cfg = PricerConfig { r, q: r, ..PricerConfig::default() };

    // constant-variance reduction
    let p = StructuralParams::two_svj();
    let (mean_var, _) = sim::stationary_moments(&p);
    let flat = RiskNeutralParams {
        factors: vec![Factor { kappa: 1.0, omega: mean_var, vol: 0.0, rho: 0.0 }],
        lambda: 0.0,
        mu_j: 0.0,
        sigma_j: 0.0,
        r: 0.0,
        q: 0.0,
    }
    .with_rates(r, r);
    let sigma = (mean_var * pricing::TRADING_DAYS).sqrt();
    let mut black_err: f64 = 0.0;
    for &tau in &maturities {
        for &k in &strikes {
            let qt = quote(OptionKind::Call, k, f, tau);
            let a = pricing::fourier_price(&qt, &flat, &[mean_var], &cfg).unwrap();
            let b = pricing::black76_price(OptionKind::Call, f, k, qt.year_fraction(), r, sigma);
            black_err = black_err.max((a - b).abs());
        }
    }

    // full model under the calibrated premia against risk-neutral simulation
    let q = risk_neutralize(&p, &svj_premia()).with_rates(r, r);
    let v0 = pricing::split_state(mean_var, &q.factors);
    let taus: Vec<f64> = maturities.iter().map(|&t| quote(OptionKind::Call, f, f, t).model_tau()).collect();
    let paths = 1_000_000;
    let terminal = sim::simulate_q_terminal(&q.q_dynamics(), f.ln(), &v0, &taus, 10, paths, 2024);
    let mut worst_z: f64 = 0.0;
    let mut cells = Vec::new();
    for (i, &tau) in maturities.iter().enumerate() {
        for &k in &strikes {
            let qt = quote(OptionKind::Call, k, f, tau);
            let fourier = pricing::fourier_price(&qt, &q, &v0, &cfg).unwrap();
            let disc = (-r * qt.year_fraction()).exp();
            let pay: Vec<f64> = terminal[i].iter().map(|x| disc * (x.exp() - k).max(0.0)).collect();
            let mc = stats::mean(&pay);
            let se = stats::std_dev(&pay) / (paths as f64).sqrt();
            let z = (fourier - mc) / se;
            worst_z = worst_z.max(z.abs());
            cells.push(format!("{:.0}d/K{:.1}:{z:+.2}", tau, k));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "A2 Fourier pricer vs Black-76 and Q Monte Carlo",
        black_err < 1e-6 && worst_z < 3.0 && secs < 300.0,
        format!(
            "max|Fourier-Black76| = {black_err:.2e} (tol 1e-6); MC 1e6 paths, max |z| = {worst_z:.2} (tol 3) [{}]; {secs:.0} s (limit 300 s)",
            cells.join(" ")
        ),
    );
}

#[test]
fn a03_risk_neutral_parameter_map() {
    let p = StructuralParams::two_svj();
    let q = risk_neutralize(&p, &svj_premia());
    let drift_gap = p
        .factors()
        .iter()
        .zip(&q.factors)
        .map(|(a, b)| ((b.kappa * b.omega) - (a.kappa * a.omega)).abs() / (a.kappa * a.omega))
        .fold(0.0f64, f64::max);
    let k1 = q.factors[0].kappa;
    let rel_k1 = (k1 / 3.9250e-2 - 1.0).abs();
    let rel_lambda = (q.lambda / 0.72004 - 1.0).abs();
    verdict(
        "A3 risk-neutral map",
        drift_gap <= 2.0 * f64::EPSILON && rel_k1 < 1e-6 && rel_lambda < 1e-6,
        format!(
            "max rel |k*w* - kw| = {drift_gap:.1e} (tol 2 ulp); kappa*_1 = {k1:.8e}, rel err {rel_k1:.2e} vs 3.9250e-2; lambda* = {:.8}, rel err {rel_lambda:.2e} vs 0.72004 (tol 1e-6)",
            q.lambda
        ),
    );
}

#[test]
fn a04_jump_test_size_and_power() {
    let t0 = Instant::now();
    let cfg = ThresholdConfig::default();
    let n = 120;
    let sd = (4.3e-4 / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let days = 100_000;
    let mut rejections = 0usize;
    let mut r = vec![0.0; n];
    for _ in 0..days {
        r.iter_mut().for_each(|x| *x = sd * normal(&mut rng));
        if realized::decompose_day(&r, &cfg).rejected {
            rejections += 1;
        }
    }
    let alpha = cfg.alpha;
    let rate = rejections as f64 / days as f64;
    let se = (alpha * (1.0 - alpha) / days as f64).sqrt();
    let size_ok = (rate - alpha).abs() <= 3.0 * se;

    let reps = 10_000;
    let mut exact_one = 0usize;
    for _ in 0..reps {
        r.iter_mut().for_each(|x| *x = sd * normal(&mut rng));
        let at = rng.random_range(0..n);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        r[at] += sign * 10.0 * sd;
        let m = realized::measure_day(day(0), &r, r.iter().sum(), &cfg);
        if m.n_jumps == 1 {
            exact_one += 1;
        }
    }
    let power = exact_one as f64 / reps as f64;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "A4 C-Tz size and single-jump detection",
        size_ok && power >= 0.9 && secs < 600.0,
        format!(
            "size {rejections}/{days} = {rate:.5} vs {alpha} +/- 3 s.e. ({:.5}..{:.5}); 10-sigma jump found with n=1 in {:.1}% (need 90%); {secs:.0} s (limit 600 s)",
            alpha - 3.0 * se,
            alpha + 3.0 * se,
            100.0 * power
        ),
    );
}

#[test]
fn a05_bipower_tracks_integrated_variance() {
    let p = StructuralParams::two_sv();
    let cfg = SimConfig { days: 10_000, intervals: 120, seed: 5, ..SimConfig::default() };
    let path = sim::simulate_replica(&p, &cfg, 0).unwrap();
    let bpv: Vec<f64> = (0..path.days()).map(|d| realized::bipower(path.day(d)).unwrap()).collect();
    let ratio = stats::mean(&bpv) / stats::mean(&path.integrated_variance);
    verdict(
        "A5 bipower variation vs integrated variance",
        (ratio - 1.0).abs() < 0.02,
        format!("mean BPV / mean IV = {ratio:.4} over {} jump-free days, 120 intervals (tol 2%)", path.days()),
    );
}

#[test]
fn a06_har_recovers_its_own_dgp() {
    // log RV_{t+1} = b0 + bd lv_t + bw mean5(lv)_t + bm mean22(lv)_t + e
    let beta = [0.46, 0.35, 0.35, 0.1];
    let (t_len, burn, reps) = (1283, 200, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut covered = [0usize; 4];
    for _ in 0..reps {
        let mut lv: Vec<f64> = vec![beta[0] / (1.0 - 0.8); 22];
        while lv.len() < t_len + burn {
            let t = lv.len() - 1;
            let w = lv[t - 4..=t].iter().sum::<f64>() / 5.0;
            let m = lv[t - 21..=t].iter().sum::<f64>() / 22.0;
            lv.push(beta[0] + beta[1] * lv[t] + beta[2] * w + beta[3] * m + 0.5 * normal(&mut rng));
        }
        let days: Vec<DayMeasures> = lv[burn..]
            .iter()
            .enumerate()
            .map(|(i, &y)| DayMeasures {
                date: day(i),
                rv: y.exp(),
                c: y.exp(),
                j: 0.0,
                ctz: 0.0,
                n_jumps: 0,
                jump_sizes: Vec::new(),
                r: 0.0,
                r_adj: 0.0,
                capped: false,
                cleaned: false,
            })
            .collect();
        let panel = realized::aggregate(&days, Units::Natural).unwrap();
        let fit = har::fit(&panel, &HarSpec::new(ModelKind::Har), None).unwrap();
        for (k, (b, se)) in fit.coef.iter().zip(fit.std_errors()).enumerate() {
            if (b - beta[k]).abs() <= 2.0 * se {
                covered[k] += 1;
            }
        }
    }
    let rates: Vec<f64> = covered.iter().map(|&c| c as f64 / reps as f64).collect();
    let q0 = har::qlike(3.7, 3.7);
    verdict(
        "A6 HAR DGP coverage and QLIKE identity",
        rates.iter().all(|&r| r >= 0.9) && q0 == 0.0,
        format!(
            "share within 2 HAC s.e. over {reps} reps: const {:.3}, d {:.3}, w {:.3}, m {:.3} (need 0.90); QLIKE(y,y) = {q0}",
            rates[0], rates[1], rates[2], rates[3]
        ),
    );
}

#[test]
fn a07_indirect_inference_closed_loop() {
    let t0 = Instant::now();
    let p = StructuralParams::two_sv();
    let truth = [("kappa1", p.kappa1), ("kappa2", p.kappa2), ("vol1", p.vol1)];
    let runs = 20;
    let mut ok_cover = 0;
    let mut ok_implied = 0;
    let mut ok_both = 0;
    let mut notes = Vec::new();
    for seed in 1..=runs as u64 {
        let data_cfg = SimConfig { days: 1283, seed: 1000 + seed, ..SimConfig::default() };
        let path = sim::simulate_replica(&p, &data_cfg, 0).unwrap();
        let days = indirect::replica_measures(&path, &MeasureConfig { no_rescale: true, ..MeasureConfig::default() });
        let optimizer = NelderMead { max_evals: 400, xtol: 3e-3, ftol_abs: 1e-3, ftol_rel: 1e-4, step: 0.4, restarts: 1 };
        let result = IIProblem::new(&days, IIConfig { replicas: 10, seed, optimizer, ..IIConfig::default() })
            .and_then(|pr| indirect::estimate(&pr));
        let r = match result {
            Ok(r) => r,
            Err(e) => {
                notes.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let worst_z = truth
            .iter()
            .map(|(name, t)| {
                let v = r.estimates.iter().find(|v| v.name == *name).unwrap();
                v.std_error.map_or(f64::INFINITY, |se| (v.value - t).abs() / se)
            })
            .fold(0.0f64, f64::max);
        let worst_gap = r.auxiliary.iter().zip(&r.implied).map(|(a, b)| (a.value - b.value).abs()).fold(0.0f64, f64::max);
        let cover = worst_z <= 3.0;
        let implied = worst_gap <= 0.05;
        ok_cover += cover as usize;
        ok_implied += implied as usize;
        ok_both += (cover && implied) as usize;
        notes.push(format!("seed {seed}: max|z| {worst_z:.2}, max|aux gap| {worst_gap:.3}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let _ = std::io::stderr().lock().write_all(format!("  {}\n", notes.join("; ")).as_bytes());
    verdict(
        "A7 indirect inference closed loop (2-SV)",
        ok_both as f64 >= 0.8 * runs as f64 && secs < 7200.0,
        format!(
            "{ok_both}/{runs} runs with every parameter within 3 s.e. and implied HAR within 0.05 (need 16); coverage alone {ok_cover}, implied alone {ok_implied}; {:.0} min (limit 120)",
            secs / 60.0
        ),
    );
}

fn synthetic_surface(p: &StructuralParams, premia: &RiskPremia, cfg: &PricerConfig) -> (Vec<OptionQuote>, Vec<Vec<f64>>) {
    let f = 28.0;
    let mut quotes = Vec::new();
    for tau in [30.0, 60.0, 90.0, 150.0, 240.0] {
        for m in [0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.2] {
            let kind = if m < 1.0 { OptionKind::Put } else { OptionKind::Call };
            quotes.push(quote(kind, m * f, f, tau));
        }
    }
    let (mean_var, _) = sim::stationary_moments(p);
    let q = risk_neutralize(p, premia).with_rates(cfg.r, cfg.q);
    let states = vec![pricing::split_state(mean_var, &p.factors()); quotes.len()];
    let prices = pricing::model_prices(&quotes, &q, &states, cfg).unwrap();
    for (qt, pr) in quotes.iter_mut().zip(prices) {
        qt.price = pr;
    }
    (quotes, states)
}

#[test]
fn a08_premia_calibration_recovers_generating_values() {
    let p = StructuralParams::two_svj();
    let cfg = PricerConfig { r: 0.02, q: 0.02, ..PricerConfig::default() };
    let cal_cfg = pricing::CalibrationConfig::default();

    // the surface premia read in daily-percent units
    let truth = RiskPremia::from_scaled(-7.35e-3, 2.81e-3, 1.50e-2, pricing::PremiaScale::DailyPercent);
    let (quotes, states) = synthetic_surface(&p, &truth, &cfg);
    let fit = pricing::calibrate_premia(&quotes, &p, &states, &cfg, &cal_cfg).unwrap();
    let got = fit.premia;
    let rel = [(got.phi, truth.phi), (got.psi1, truth.psi1), (got.psi2, truth.psi2)].map(|(a, b)| (a / b - 1.0).abs());

    let (quotes0, states0) = synthetic_surface(&p, &RiskPremia::zero(), &cfg);
    let fit0 = pricing::calibrate_premia(&quotes0, &p, &states0, &cfg, &cal_cfg).unwrap();
    let z = fit0.premia;
    let zero_err = z.phi.abs().max(z.psi1.abs()).max(z.psi2.abs());

    verdict(
        "A8 premia calibration on a synthetic surface",
        quotes.len() == 40 && fit.f_obj < 1e-4 && rel.iter().all(|&e| e < 0.05) && fit0.f_obj < 1e-4 && zero_err < 1e-6,
        format!(
            "{} quotes; f_obj = {:.2e} (tol 1e-4); phi {:.4e}, psi1 {:.4e}, psi2 {:.4e}, rel err {:.2e}/{:.2e}/{:.2e} (tol 5%); zero premia: f_obj {:.2e}, max|premium| {zero_err:.2e} natural units (tol 1e-6)",
            quotes.len(),
            fit.f_obj,
            got.phi,
            got.psi1,
            got.psi2,
            rel[0],
            rel[1],
            rel[2],
            fit0.f_obj
        ),
    );
}

#[test]
fn a09_pipeline_runs_are_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let path = Fixture::default().write(dir.path()).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        let m = pipeline::run_pipeline(&cfg, &Stage::ALL, RunOptions::default()).unwrap();
        m.output_hashes()
    };
    let (a, b) = (run(), run());
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(
        "A9 reproducible pipeline",
        a == b && a.len() >= 10,
        format!("{} artifacts hashed, {} differ between two seeded runs", a.len(), differing.len()),
    );
}

#[test]
fn a10_bucketed_rmse_matches_hand_computation() {
    // differences in multiples of 1/64 keep every sum of squares exact
    let u = 1.0 / 64.0;
    let rows = [
        // (K, tau, model - market)
        (80.0, 30.0, 1.0 * u),
        (80.0, 30.0, 7.0 * u),
        (100.0, 60.0, 1.0 * u),
        (110.0, 90.0, 1.0 * u),
        (85.0, 160.0, -1.0 * u),
        (120.0, 200.0, 8.0 * u),
    ];
    let quotes: Vec<OptionQuote> = rows.iter().map(|&(k, t, _)| quote(OptionKind::Call, k, 100.0, t)).collect();
    let market = vec![0.25; rows.len()];
    let model: Vec<f64> = rows.iter().map(|r| 0.25 + r.2).collect();
    let t = pricing::rmse_iv(&quotes, &model, &market);

    let h = |ss_in_units: f64, n: f64| Some(100.0 * ((ss_in_units * u * u) / n).sqrt());
    let expected_cells = vec![
        vec![Some(500.0 / 64.0), None, None],
        vec![None, Some(100.0 / 64.0), None],
        vec![None, Some(100.0 / 64.0), None],
        vec![None, None, Some(800.0 / 64.0)],
    ];
    let ok = t.cells == expected_cells
        && t.by_moneyness == vec![Some(500.0 / 64.0), Some(100.0 / 64.0), Some(800.0 / 64.0)]
        && t.by_maturity == vec![Some(500.0 / 64.0), Some(100.0 / 64.0), Some(100.0 / 64.0), Some(800.0 / 64.0)]
        && t.overall == h(117.0, 6.0)
        && t.counts == vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 1, 0], vec![0, 0, 1]];
    verdict(
        "A10 bucketed RMSE_IV",
        ok,
        format!("cells {:?}, overall {:?} vs hand {:?}", t.cells, t.overall, h(117.0, 6.0)),
    );
}
