//! Public-API round trips: synthetic corpus on disk, manifest loading,
//! pipeline, report, and config files.

use std::fs;

use chord_refine::corpus::Manifest;
use chord_refine::refine::llm::Prompts;
use chord_refine::refine::rulebook::Rulebook;
use chord_refine::refine::{run_pipeline, Backend, RefinementConfig, StageId};
use chord_refine::report::build_report;
use chord_refine::synth::{generate_corpus, write_corpus, SynthConfig};
use chord_refine::{evaluate_corpus, Execution, Metric};

#[test]
fn corpus_on_disk_refines_like_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let songs = generate_corpus(&SynthConfig { songs: 4, ..SynthConfig::default() });
    let path = write_corpus(dir.path(), "disk", &songs).unwrap();
    let manifest = Manifest::load(&path).unwrap();
    assert_eq!(manifest.songs.len(), 4);

    let config = RefinementConfig::default();
    let rulebook = Rulebook::new(config.clone());
    let mut runs = Vec::new();
    for (entry, original) in manifest.songs.iter().zip(&songs) {
        let loaded = manifest.load_song(entry).unwrap();
        let from_disk = run_pipeline(&loaded, &config, &rulebook).unwrap();
        let in_memory = run_pipeline(original, &config, &rulebook).unwrap();
        // Lab files carry microsecond precision; labels must agree exactly.
        for (a, b) in from_disk.snapshots.iter().zip(&in_memory.snapshots) {
            let la: Vec<_> = a.segments().iter().map(|s| s.label).collect();
            let lb: Vec<_> = b.segments().iter().map(|s| s.label).collect();
            assert_eq!(la, lb);
        }
        runs.push((loaded.reference.unwrap(), from_disk));
    }

    let report = build_report("disk", &runs, Execution::Parallel).unwrap();
    let mirex: Vec<f64> = report.rows.iter().map(|r| r.score(Metric::Mirex).unwrap()).collect();
    assert!(mirex[5] > mirex[1], "{mirex:?}");
    assert_eq!(report.rows.len(), 1 + StageId::ALL.len());
}

#[test]
fn sequential_and_parallel_evaluation_agree() {
    let songs = generate_corpus(&SynthConfig { songs: 6, ..SynthConfig::default() });
    let pairs: Vec<_> = songs
        .iter()
        .map(|s| (s.reference.as_ref().unwrap(), s.acr_nodrums.as_ref().unwrap()))
        .collect();
    let seq = evaluate_corpus(&pairs, Execution::Sequential).unwrap();
    let par = evaluate_corpus(&pairs, Execution::Parallel).unwrap();
    for m in Metric::ALL {
        assert_eq!(seq.score(m), par.score(m), "{}", m.name());
    }
}

#[test]
fn config_file_with_prompt_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("prompts")).unwrap();
    fs::write(dir.path().join("prompts/select.txt"), "pick one of {{candidates}}").unwrap();
    let path = dir.path().join("pipeline.toml");
    fs::write(
        &path,
        "[pipeline]\nbackend = \"llm\"\nstages = \"1-3,5\"\n[llm]\nprompt_dir = \"prompts\"\n[beat_align]\nthreshold = 0.1\n",
    )
    .unwrap();

    let config = RefinementConfig::load(&path).unwrap();
    assert_eq!(config.pipeline.backend, Backend::Llm);
    assert!(!config.pipeline.stages.contains(StageId::AnomalyDetection));
    assert!(config.pipeline.stages.contains(StageId::BeatAlignment));
    assert_eq!(config.beat_align.threshold, 0.1);

    let prompts = Prompts::load(config.llm.prompt_dir.as_deref()).unwrap();
    assert_eq!(prompts.select, "pick one of {{candidates}}");
    assert_eq!(prompts.system, Prompts::default().system);
}

#[test]
fn invalid_config_values_are_rejected() {
    for text in [
        "[bass]\nmin_in_key_fraction = 1.5\n",
        "[pipeline]\nstages = \"0-2\"\n",
        "[pipeline]\nbackend = \"oracle\"\n",
        "[beat_align]\nthreshold = 0.0\n",
    ] {
        assert!(RefinementConfig::from_toml(text).is_err(), "{text}");
    }
}
