// SPDX-License-Identifier: MIT OR Apache-2.0

use attnflow::dump::{attention_records, read_dump_file, saliency_matrices};
use attnflow::harness::ablate::{run as ablate, AblationMode};
use attnflow::harness::analyze::{cmd_analyze, tables_from_dumps};
use attnflow::harness::tools::{cmd_fixture, FixtureKind, FixtureRequest};
use attnflow::harness::{Overrides, RunSettings};
use attnflow::ModelConfig;

fn settings(dir: &std::path::Path, kind: FixtureKind, seed: u64) -> RunSettings {
    let files = cmd_fixture(
        &FixtureRequest {
            kind,
            seed,
            config: (kind == FixtureKind::Random).then(|| ModelConfig::new(3, 4, 32, 64, 64)),
            sys: 3,
            vis: 12,
            instr: 5,
            weights_name: "w.json".into(),
        },
        dir,
    )
    .unwrap();
    RunSettings::resolve(&Overrides {
        weights: Some(files.weights),
        prompt: Some(files.prompt),
        out: Some(dir.join("out")),
        max_new_tokens: Some(4),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn analyze_tables_replay_from_dumps() {
    for (kind, seed) in [(FixtureKind::Random, 1), (FixtureKind::Pathology, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let s = settings(dir.path(), kind, seed);
        let report = cmd_analyze(&s).unwrap();
        assert!(report.loss.unwrap().is_finite());
        let attention = attention_records(&read_dump_file(s.out.join("attention.atnd")).unwrap()).unwrap();
        let saliency = saliency_matrices(&read_dump_file(s.out.join("saliency.atnd")).unwrap()).unwrap();
        assert_eq!(attention.len(), s.weights.config.num_layers * s.weights.config.num_heads);
        assert_eq!(saliency.len(), s.weights.config.num_layers);
        let t = tables_from_dumps(
            &attention,
            &saliency,
            &s.segmentation,
            s.weights.config.num_heads,
            &Default::default(),
            &Default::default(),
            true,
        )
        .unwrap();
        let read = |n: &str| std::fs::read_to_string(s.out.join(n)).unwrap();
        assert_eq!(t.reception_csv, read("reception.csv"));
        assert_eq!(t.heads_csv, read("heads.csv"));
        assert_eq!(t.flow_csv.unwrap(), read("flow.csv"));
    }
}

#[test]
fn zero_head_ablations_match_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(dir.path(), FixtureKind::Random, 7);
    let r = ablate(&s, &AblationMode::ALL, 0).unwrap();
    assert_eq!(r.runs.len(), AblationMode::ALL.len());
    for run in &r.runs {
        assert!(run.heads.is_empty());
        assert!(run.same_as_baseline, "{}", run.mode);
    }
    let r = ablate(&s, &[AblationMode::MaskRandom, AblationMode::MaskTextShallow], 2).unwrap();
    assert_eq!(r.runs[0].heads.len(), 2 * 3);
    assert_eq!(r.runs[1].heads.len(), 2 * 3);
    assert!(ablate(&s, &[AblationMode::MaskVisual], 5).is_err());
}

#[test]
fn masking_the_visual_head_keeps_the_prior_token() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings(dir.path(), FixtureKind::Pathology, 3);
    let r = ablate(&s, &[AblationMode::MaskVisual], 1).unwrap();
    let fx: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fixture.json")).unwrap()).unwrap();
    let prior = fx["pathology"]["prior_token"].as_u64().unwrap() as u32;
    assert_eq!(r.baseline[0], prior);
    assert_eq!(r.runs[0].generated[0], prior);
}
