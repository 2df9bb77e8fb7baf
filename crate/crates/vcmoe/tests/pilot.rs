// Scratch calibration probes; not part of the suite. Run with --ignored.

use std::time::Instant;

use vcmoe::bandwidth::select_bandwidth;
use vcmoe::fit::FitConfig;
use vcmoe::inference::BandMethod;
use vcmoe::model::CoefId;
use vcmoe::simulate::{generate, run_study, BandStudy, ScenarioSpec, StudyConfig};

#[test]
#[ignore]
fn probe_cv_scale() {
    let scenario = ScenarioSpec::sim1(500, 914);
    let draw = generate(&scenario, 500, 914).unwrap();
    let spec = scenario.model_spec();
    let candidates = [0.12, 0.15, 0.18, 0.21, 0.24, 0.27, 0.30];
    let config = FitConfig::new(0.21);

    let t0 = Instant::now();
    let report = select_bandwidth(&spec, &draw.data, &candidates, &config).unwrap();
    println!("cv sweep: {:.1?}", t0.elapsed());
    for (h, (score, fails)) in candidates
        .iter()
        .zip(report.scores.iter().zip(report.per_fold_failures.iter()))
    {
        println!("  h={h:.2} score={score:?} skipped={fails}");
    }
    println!("  best_h={}", report.best_h);
}

#[test]
#[ignore]
fn probe_coverage() {
    let scenario = ScenarioSpec::sim1(500, 31);
    let mut config = StudyConfig::new();
    config.fit.grid = (0..50).map(|i| i as f64 / 49.0).collect();
    config.bands = Some(BandStudy {
        coefficients: vec![
            CoefId::LogDelta { class: 0 },
            CoefId::Alpha { class: 0, col: 0 },
        ],
        levels: vec![0.90, 0.95],
        methods: vec![BandMethod::Asymptotic, BandMethod::Bootstrap],
        m1: 100,
        m2: 100,
        debias: false,
    });

    let t0 = Instant::now();
    let report = run_study(&scenario, 10, &[0.18], &config).unwrap();
    println!("coverage probe 10 reps: {:.1?}", t0.elapsed());
    for e in &report.coverage {
        println!(
            "  {} {:?} level={} covered={}/{}",
            e.name, e.method, e.level, e.covered, e.counted
        );
    }
    for t in &report.rase {
        for e in &t.entries {
            println!("  rase {} mean={:.3} sd={:.3}", e.name, e.mean, e.sd);
        }
    }
}
