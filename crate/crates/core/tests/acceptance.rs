//! Acceptance gate. Runs without the libtest harness so that every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use covrecon::estimator::{rate_study, synthetic_decay_covariance, RateRow};
use covrecon::field::{brownian_oracle, draw_batch, EigenSequence};
use covrecon::mercer::{build_kernel, Provenance};
use covrecon::planner::{self, g_of_l, h_of_l, l_epsilon, threshold_holds, ThresholdKind, SEARCH_LIMIT};
use covrecon::stats::{loglog_slope, mean};
use covrecon::study::{expected_error_study, reconstruct, write_rows, ExactSetup};
use covrecon::{
    AnalyticField, Calibration, EstimatorKind, FieldKind, SamplingMode, SpectralProfile, StudyConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn config(body: &str) -> StudyConfig {
    let cfg: StudyConfig = toml::from_str(body).expect("acceptance config parses");
    cfg.validate().expect("acceptance config is valid");
    cfg
}

fn mean_sq_by_m(rows: &[RateRow], ms: &[usize]) -> Vec<f64> {
    ms.iter()
        .map(|m| mean(&rows.iter().filter(|r| r.m == *m).map(|r| r.error_sq).collect::<Vec<_>>()))
        .collect()
}

fn brownian_eigenvalues() -> Outcome {
    let o = brownian_oracle(1);
    let l1 = o.eigenvalue(1);
    let l2 = o.eigenvalue(2);
    let d1 = o.gap(1);
    let e1 = (l1 - 4.0 / (PI * PI)).abs();
    let e2 = (l2 - 4.0 / (9.0 * PI * PI)).abs();
    let ratio = l1 / d1;
    let er = (ratio - 9.0 / 8.0).abs();
    outcome(
        e1 <= 1e-12 && e2 <= 1e-12 && er <= 1e-12,
        format!("|l1 - 4/pi^2| = {e1:.1e}, |l2 - 4/(9pi^2)| = {e2:.1e}, l1/d1 = {ratio:.15}"),
    )
}

fn galerkin_convergence() -> Outcome {
    let ns = [8usize, 16, 32, 64, 128];
    let oracle = brownian_oracle(1);
    let field = AnalyticField::new(FieldKind::BrownianMotion1D);
    let setups: Vec<ExactSetup> = ns.iter().map(|&n| ExactSetup::new(field.clone(), n).unwrap()).collect();
    let hs: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
    let mut pass = true;
    let mut min_order = f64::INFINITY;
    for l in 1..=5 {
        let errs: Vec<f64> = setups.iter().map(|s| (s.spectrum.eigenvalues[l - 1] - oracle.eigenvalue(l)).abs()).collect();
        pass &= errs.windows(2).all(|w| w[1] < w[0]);
        let order = loglog_slope(&hs, &errs);
        min_order = min_order.min(order);
        pass &= order >= 1.5;
    }
    let fine = (setups[4].spectrum.eigenvalues[0] - 4.0 / (PI * PI)).abs();
    pass &= fine <= 1e-4;
    outcome(pass, format!("min order over l <= 5: {min_order:.3}, |l1(h=1/128) - 4/pi^2| = {fine:.2e}"))
}

fn tapering_rate() -> Outcome {
    let sigma = synthetic_decay_covariance(256, 1.0);
    let ms = [250usize, 500, 1000, 2000, 4000];
    let rows = rate_study(&sigma, EstimatorKind::Tapered, 1.0, &ms, 20, 31).unwrap();
    let tapered = loglog_slope(&ms.iter().map(|m| *m as f64).collect::<Vec<_>>(), &mean_sq_by_m(&rows, &ms));

    let qs = [64usize, 128, 256, 512];
    let m = 4000;
    let mle: Vec<f64> = qs
        .iter()
        .map(|&q| {
            let rows = rate_study(&synthetic_decay_covariance(q, 1.0), EstimatorKind::Mle, 1.0, &[m], 20, 37).unwrap();
            mean_sq_by_m(&rows, &[m])[0]
        })
        .collect();
    let untapered = loglog_slope(&qs.iter().map(|q| *q as f64).collect::<Vec<_>>(), &mle);
    outcome(
        (tapered + 2.0 / 3.0).abs() <= 0.15 && (untapered - 1.0).abs() <= 0.2,
        format!("tapered slope in M = {tapered:.3} (target -0.667 +- 0.15), MLE slope in Q_h = {untapered:.3} (target 1 +- 0.2)"),
    )
}

fn weyl_inequality() -> Outcome {
    let cases: [(usize, FieldKind, usize, &[usize]); 2] = [
        (64, FieldKind::BrownianMotion1D, 30, &[20, 200, 2000]),
        (16, FieldKind::BrownianSheet2D, 15, &[50, 500]),
    ];
    let (mut comparisons, mut violations) = (0usize, 0usize);
    let calib = Calibration::default();
    for (n, kind, seeds, ms) in cases {
        let setup = ExactSetup::new(AnalyticField::new(kind), n).unwrap();
        for &m in ms {
            for seed in 0..seeds as u64 {
                for est in [EstimatorKind::Mle, EstimatorKind::Tapered] {
                    let rec = reconstruct(
                        &setup,
                        Some(m),
                        est,
                        1.0,
                        SamplingMode::NodalInterpolation,
                        seed,
                        &[1],
                        2,
                        &calib,
                        0.499,
                    )
                    .unwrap();
                    comparisons += rec[0].diagnostics.weyl_comparisons;
                    violations += rec[0].diagnostics.weyl_violations;
                }
            }
        }
    }
    outcome(
        violations == 0 && comparisons >= 10_000,
        format!("{violations} violations in {comparisons} eigenvalue comparisons"),
    )
}

fn spectral_gap_bound() -> Outcome {
    let n = 32;
    let l = 3;
    let s = 0.499;
    let setup = ExactSetup::new(AnalyticField::new(FieldKind::BrownianMotion1D), n).unwrap();
    let oracle = brownian_oracle(1);
    let h = setup.space.h();
    // Galerkin constant measured on this mesh.
    let c1 = (1..=l + 1)
        .map(|k| (oracle.eigenvalue(k) - setup.spectrum.eigenvalues[k - 1]).abs() * oracle.eigenvalue(k + 1) / h.powf(2.0 * s))
        .fold(0.0, f64::max);
    let calib = Calibration { c1, ..Default::default() };
    let (mut checked, mut violations) = (0usize, 0usize);
    for seed in 0..20u64 {
        let rec = reconstruct(
            &setup,
            Some(10_000),
            EstimatorKind::Mle,
            1.0,
            SamplingMode::NodalInterpolation,
            seed,
            &[l],
            2,
            &calib,
            s,
        )
        .unwrap();
        let d = &rec[0].diagnostics;
        checked += d.gap_bound_holds.iter().filter(|h| h.is_some()).count();
        violations += d.gap_bound_violations;
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{violations} violations; condition held in {checked} of {} (seed, l) pairs, C1 = {c1:.3e}", 20 * l),
    )
}

fn truncation_rate() -> Outcome {
    let o = brownian_oracle(1);
    let ls: Vec<f64> = (2..=32).map(|l| l as f64).collect();
    let e1: Vec<f64> = (2..=32).map(|l| o.tail_sq_sum(l).sqrt()).collect();
    let slope = loglog_slope(&ls, &e1);
    outcome((slope + 1.5).abs() <= 0.05, format!("slope of e1 in L over 2..=32 = {slope:.4}"))
}

fn g_and_h_asymptotics() -> Outcome {
    let seq = SpectralProfile::brownian(1).sequence();
    let ls: Vec<usize> = vec![8, 16, 32, 64, 128];
    let lf: Vec<f64> = ls.iter().map(|l| *l as f64).collect();
    let g2: Vec<f64> = ls.iter().map(|&l| g_of_l(&seq, l).unwrap().powi(2)).collect();
    let h: Vec<f64> = ls.iter().map(|&l| h_of_l(&seq, l).unwrap()).collect();
    let sg = loglog_slope(&lf, &g2);
    let sh = loglog_slope(&lf, &h);
    let g1 = g_of_l(&seq, 1).unwrap().powi(2);
    let e = (g1 - 81.0 / 64.0).abs();
    outcome(
        (sg - 3.0).abs() <= 0.2 && (sh + 6.0).abs() <= 0.3 && e <= 1e-12,
        format!("G^2 slope = {sg:.3}, H slope = {sh:.3}, |G(1)^2 - 81/64| = {e:.1e}"),
    )
}

fn planner_formulas() -> Outcome {
    let got: Vec<usize> = [0.5, 0.1, 0.01].iter().map(|&e| l_epsilon(e, 0.5, 1)).collect();
    let mut pass = got == [2, 5, 22];
    let (mut checked, mut beyond) = (0usize, 0usize);
    for dim in [1, 2] {
        let profile = SpectralProfile::brownian(dim);
        for eps in [0.5, 0.3, 0.1, 0.05, 0.01] {
            for kind in ThresholdKind::ALL {
                let plan = planner::plan(&profile, eps, Some(kind.regime())).unwrap();
                let holds = |m: f64| threshold_holds(&profile, eps, kind, m).unwrap();
                match kind.of(&plan.thresholds) {
                    Some(m) => {
                        pass &= holds(m as f64);
                        pass &= m == 1 || !holds((m - 1) as f64);
                        checked += 1;
                    }
                    // Either the search ran past its limit or an earlier threshold of the case did.
                    None if !plan.feasible && plan.reason.contains("2^53") => {
                        let missing = plan.reason.contains(match kind {
                            ThresholdKind::MBar => "M_bar",
                            ThresholdKind::MTilde => "M_tilde",
                            ThresholdKind::MHat => "M_hat",
                            ThresholdKind::MPrime => "M_prime",
                        });
                        pass &= !missing || !holds(SEARCH_LIMIT as f64);
                        beyond += 1;
                    }
                    None => pass = false,
                }
            }
        }
    }
    outcome(
        pass,
        format!("L_eps at 0.5, 0.1, 0.01 = {got:?}; {checked} thresholds exact, {beyond} beyond 2^53 samples"),
    )
}

fn end_to_end() -> Outcome {
    let cfg = config(
        r#"
field = "brownian_motion"
dim = 1
meshes = [32]
samples = [500, 2000, 8000]
truncations = [3]
n_rep = 20
seed = 2024
"#,
    );
    let out = expected_error_study(&cfg).unwrap();
    let e3: Vec<f64> = out.rows.iter().map(|r| r.mean_e3).collect();
    let slack = out.rows.iter().map(|r| r.max_triangle_slack).fold(f64::NEG_INFINITY, f64::max);
    let decreasing = e3.windows(2).all(|w| w[1] < w[0]);
    let ok_status = out.rows.iter().all(|r| r.status == "ok");
    outcome(
        decreasing && slack <= 1e-8 && ok_status && e3.len() == 3,
        format!("mean_e3 at M = 500, 2000, 8000: {e3:?}; max(total - e1 - e2 - e3) = {slack:.2e}"),
    )
}

fn reproducibility() -> Outcome {
    let cfg = config(
        r#"
field = "brownian_sheet"
dim = 2
meshes = [4, 8]
samples = [40, 80]
truncations = [1, 4]
n_rep = 3
seed = 77
estimator = "tapered"
"#,
    );
    let study = || {
        let mut buf = Vec::new();
        write_rows(&expected_error_study(&cfg).unwrap().rows, &mut buf).unwrap();
        buf
    };
    let field = cfg.analytic_field();
    let batch = || {
        let setup = ExactSetup::new(field.clone(), 8).unwrap();
        let mut buf = Vec::new();
        draw_batch(&field, &setup.space, 25, SamplingMode::NodalInterpolation, 5).unwrap().write_csv(&mut buf).unwrap();
        let rec = reconstruct(
            &setup,
            Some(25),
            EstimatorKind::Tapered,
            1.0,
            SamplingMode::NodalInterpolation,
            5,
            &[3],
            2,
            &Calibration::default(),
            0.499,
        )
        .unwrap();
        buf.extend(serde_json::to_vec(&rec).unwrap());
        let kernel = build_kernel(&setup.spectrum, 3, &setup.space, Provenance::ExactDiscrete { h: setup.space.h() }).unwrap();
        buf.extend(format!("{:?}", kernel.snapshot(9, &[0.5, 0.5]).unwrap().as_slice()).into_bytes());
        buf
    };
    let plan = || {
        let p = planner::plan(&SpectralProfile::brownian(2), 0.2, None).unwrap();
        serde_json::to_vec(&p).unwrap()
    };
    let same = study() == study() && batch() == batch() && plan() == plan();
    outcome(same, "study table, sample batch, reconstruction report, kernel snapshot and plan rerun byte-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("Brownian eigenvalue oracle", brownian_eigenvalues),
        ("Galerkin eigenvalue convergence", galerkin_convergence),
        ("tapering minimax rate", tapering_rate),
        ("Weyl inequality", weyl_inequality),
        ("spectral gap bound", spectral_gap_bound),
        ("truncation rate", truncation_rate),
        ("G and H asymptotics", g_and_h_asymptotics),
        ("planner formulas", planner_formulas),
        ("end-to-end sanity", end_to_end),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}: {name}: {} [{secs:.1}s]", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
