use layoutdiff_core::eval::EvalReport;
use layoutdiff_core::experiment::{
    guidance_verdict, localization_verdict, ordering_verdict, run, ExperimentConfig, VariantResult,
};
use layoutdiff_core::scenegen::QueryMode;

fn result(mode: QueryMode, s: f64, acc: f64, ap50: f64) -> VariantResult {
    VariantResult { mode, guidance_scale: s, report: EvalReport { object_accuracy: acc, ap50, ..Default::default() } }
}

#[test]
fn ordering_margins_are_inclusive() {
    let rs = |tok: f64, words: f64, cap: f64, ap: f64| {
        vec![
            result(QueryMode::CaptionOnly, 4.0, cap, 0.0),
            result(QueryMode::PositionWords, 4.0, words, 0.1),
            result(QueryMode::PositionTokens, 4.0, tok, ap),
        ]
    };
    assert!(ordering_verdict(&rs(60.0, 45.0, 40.0, 0.35)).pass);
    assert!(!ordering_verdict(&rs(60.0, 45.5, 40.0, 0.35)).pass);
    assert!(!ordering_verdict(&rs(60.0, 45.0, 40.5, 0.35)).pass);
    assert!(!ordering_verdict(&rs(60.0, 45.0, 40.0, 0.34)).pass);
    assert!(!ordering_verdict(&rs(60.0, 45.0, 40.0, 0.35)[1..]).pass);
}

#[test]
fn guidance_and_localization_thresholds() {
    let sweep = |a1: f64, a4: f64| {
        vec![result(QueryMode::PositionTokens, 1.0, a1, 0.0), result(QueryMode::PositionTokens, 4.0, a4, 0.0)]
    };
    assert!(guidance_verdict(&sweep(30.0, 35.0)).pass);
    assert!(!guidance_verdict(&sweep(30.0, 34.9)).pass);
    assert!(!guidance_verdict(&sweep(30.0, 35.0)[..1]).pass);

    assert!(localization_verdict(Some(2.0), Some(1.2)).pass);
    assert!(!localization_verdict(Some(1.99), Some(1.0)).pass);
    assert!(!localization_verdict(Some(3.0), Some(1.21)).pass);
    assert!(!localization_verdict(None, Some(1.0)).pass);
}

#[test]
fn smoke_run_completes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke();
    let mut lines = Vec::new();
    let report = run(&cfg, dir.path(), &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(report.variants.len(), 3);
    assert_eq!(report.sweep.len(), cfg.guidance_scales.len());
    assert_eq!(report.verdicts.len(), 3);
    assert_eq!(report.checkpoints.len(), 3);
    for v in report.variants.iter().chain(&report.sweep) {
        v.report.check_finite().unwrap();
        assert_eq!(v.report.counts.images, cfg.splits.test);
    }
    assert!(dir.path().join("report.json").exists());
    for mode in &cfg.modes {
        assert!(dir.path().join(format!("{}.safetensors", mode.name())).exists());
    }
    assert!(!lines.is_empty());
}

#[test]
fn mismatched_canvas_is_rejected() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.scene.width = 32;
    cfg.scene.height = 32;
    assert!(cfg.validate().is_err());
}
