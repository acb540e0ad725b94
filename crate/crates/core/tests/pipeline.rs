use std::fs;

use peg_core::dataset::{generate_synthetic, save_dataset, split_query_gallery, Encoding, SynthSpec};
use peg_core::game::strictly_increasing;
use peg_core::harness::{
    charts, emit_report, evaluate_checkpoint, latest_checkpoint, read_report, run_preset, write_outputs, ExperimentConfig, Format,
};

fn smoke(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::preset("smoke").unwrap()
    }
}

#[test]
fn report_round_trips_through_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke(tmp.path());
    let report = run_preset(&cfg, false).unwrap();
    assert!(!report.of_kind("final").is_empty());

    write_outputs(&cfg, &report).unwrap();
    assert_eq!(read_report(tmp.path()).unwrap(), report);

    let csv_only = tmp.path().join("csv");
    emit_report(&report, &csv_only, &[Format::Csv]).unwrap();
    let back = read_report(&csv_only).unwrap();
    assert_eq!(back.records, report.records);

    let saved: ExperimentConfig = serde_json::from_slice(&fs::read(tmp.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn charts_are_well_formed_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke(tmp.path());
    let report = run_preset(&cfg, false).unwrap();
    let written = emit_report(&report, tmp.path(), &[Format::Svg]).unwrap();
    let svgs: Vec<_> = written.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
    assert_eq!(svgs.len(), charts(&report).len());
    for path in svgs {
        let text = fs::read_to_string(path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn zero_generations_only_scores_the_initial_population() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke(tmp.path());
    cfg.preset = "peg".into();
    cfg.generation.generations = 0;
    let report = run_preset(&cfg, false).unwrap();
    assert_eq!(report.records.len(), cfg.models.len());
    assert!(report.records.iter().all(|r| r.kind == "initial" && r.map.is_some() && r.crs.is_some()));
    assert!(!tmp.path().join("checkpoints").exists());
}

#[test]
fn brd_trace_preset_reaches_equilibria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke(tmp.path());
    cfg.preset = "brd-trace".into();
    let report = run_preset(&cfg, false).unwrap();
    let results = report.of_kind("brd-result");
    assert!(!results.is_empty());
    for r in &results {
        assert_eq!(r.note.as_deref(), Some("equilibrium"));
    }
    assert!(!report.traces.is_empty());
    for trace in report.traces.values() {
        if let Some((first, rest)) = trace.split_first() {
            assert!(strictly_increasing(first.utility, rest));
        }
    }
}

#[test]
fn checkpoints_evaluate_against_a_saved_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke(tmp.path());
    run_preset(&cfg, false).unwrap();
    let (generation, dir) = latest_checkpoint(&tmp.path().join("checkpoints").join("peg")).unwrap().unwrap();
    assert_eq!(generation, cfg.generation.generations);

    let ds = generate_synthetic(&SynthSpec {
        num_identities: 6,
        samples_per_identity: 12,
        dim: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    let ds = split_query_gallery(&ds, 0.25, 1).unwrap();
    let path = tmp.path().join("eval.bin");
    save_dataset(&ds, &path, Encoding::Binary).unwrap();
    let rows = evaluate_checkpoint(&dir, &path).unwrap();
    assert_eq!(rows.len(), cfg.generation.l * (cfg.generation.h + 1));
    assert!(rows.iter().all(|r| r.map.is_some_and(|m| (0.0..=1.0).contains(&m))));
}

#[test]
fn mismatched_resume_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke(tmp.path());
    run_preset(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.generation.alpha = 0.5;
    assert!(run_preset(&other, true).is_err());
}
