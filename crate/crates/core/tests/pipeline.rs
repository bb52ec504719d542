use hbu_core::eaws::DetectParams;
use hbu_core::manifest::load_manifest;
use hbu_core::pipeline::{analyze, ingest, merge_datasets, progress_windows, IngestParams, WindowParams};
use hbu_core::progress::{train, ModelConfig, SplitMode, TrainConfig};
use hbu_core::softdtw::ExemplarLibrary;
use hbu_core::synth::{generate, ScenarioSpec};

fn bundle(dir: &std::path::Path, spec: &ScenarioSpec) -> hbu_core::pipeline::Bundle {
    let m = load_manifest(&generate(spec).unwrap().write(dir).unwrap()).unwrap();
    ingest(&m, &IngestParams::default()).unwrap()
}

#[test]
fn library_file_round_trip_preserves_detection() {
    let t = tempfile::tempdir().unwrap();
    let p = DetectParams::default();
    let lib = bundle(&t.path().join("lib"), &ScenarioSpec::library(5)).exemplars(&p).unwrap();
    let path = t.path().join("exemplars.txt");
    lib.write(&path).unwrap();
    let back = ExemplarLibrary::read(&path).unwrap();
    let mut spec = ScenarioSpec {
        cycle_duration_s: 100.0,
        ..ScenarioSpec::standard(9)
    };
    spec.episodes.retain(|e| e.start_s + e.duration_s <= spec.cycle_duration_s);
    let run = bundle(&t.path().join("run"), &spec);
    let a = analyze(&run, &lib, &p).unwrap();
    let b = analyze(&run, &back, &p).unwrap();
    assert_eq!(a.detection.segments, b.detection.segments);
    assert_eq!(a.report.to_csv(), b.report.to_csv());
}

#[test]
fn cycle_split_training_on_synthetic_bundles() {
    let t = tempfile::tempdir().unwrap();
    let sets: Vec<_> = (0..5u64)
        .map(|c| {
            let spec = ScenarioSpec {
                seed: 20 + c,
                cycle_duration_s: 60.0,
                subgoal_count: Some(2),
                ..ScenarioSpec::default()
            };
            progress_windows(&bundle(&t.path().join(format!("c{c}")), &spec), c as usize, &WindowParams::default()).unwrap()
        })
        .collect();
    let ds = merge_datasets(&sets).unwrap();
    assert_eq!(ds.class_names.len(), 2);
    let mc = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        ..ModelConfig::with_io(ds.d_in, 2)
    };
    let tc = TrainConfig {
        epochs: 3,
        split: [0.6, 0.2, 0.2],
        split_mode: SplitMode::Cycle,
        ..TrainConfig::default()
    };
    let out = train(&ds, &mc, &tc).unwrap();
    let cycle_of = |i: &usize| ds.windows[*i].meta.cycle;
    for a in &out.split.train {
        assert!(out.split.test.iter().all(|b| cycle_of(a) != cycle_of(b)));
        assert!(out.split.val.iter().all(|b| cycle_of(a) != cycle_of(b)));
    }
    assert_eq!(out.trace.len(), 3);
}
