//! End-to-end runs of the synthetic guideline against recorded fixtures.
//!
//! `GUIDEGRAPH_BLESS=1 cargo test -p guidegraph-core --test pipeline`
//! re-records the oracle fixtures from the authored backend and rewrites
//! the golden run directory.

mod support;

use std::sync::Arc;

use guidegraph::aggregator;
use guidegraph::builder::TraceEvent;
use guidegraph::dot::to_dot;
use guidegraph::eval::{score, Matcher};
use guidegraph::graph::{NodeId, NodeKind};
use guidegraph::oracle::scripted::RecordingBackend;
use guidegraph::pipeline::{load_chunks, load_graph, read_file, write_file, Session};
use guidegraph::{Error, PipelineConfig};
use support::*;

fn bless() {
    let recorder = Arc::new(RecordingBackend::new(authored_backend()));
    let dir = tempfile::tempdir().unwrap();
    let session = Session::with_backend(synthetic_config(), recorder.clone(), dir.path()).unwrap();
    session.run(&synthetic_pages(), false).unwrap();
    let oracle_dir = synthetic_oracle_dir();
    if oracle_dir.exists() {
        std::fs::remove_dir_all(&oracle_dir).unwrap();
    }
    recorder.fixtures().write_dir(&oracle_dir).unwrap();

    // Replay from the fresh fixtures so the goldens come from the scripted path.
    let replay = tempfile::tempdir().unwrap();
    Session::open(synthetic_config(), replay.path())
        .unwrap()
        .run(&synthetic_pages(), false)
        .unwrap();
    let golden = synthetic_golden_dir();
    copy_golden_files(replay.path(), &golden);
    let merged = load_graph(&golden.join("merged.json")).unwrap();
    write_file(&synthetic_dir().join("merged.dot"), &to_dot(&merged)).unwrap();
    write_file(&synthetic_dir().join("reference.json"), &reference_graph().to_canonical_json()).unwrap();
}

fn replay_run() -> tempfile::TempDir {
    if bless_requested() {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(bless);
    }
    let dir = tempfile::tempdir().unwrap();
    Session::open(synthetic_config(), dir.path())
        .unwrap()
        .run(&synthetic_pages(), false)
        .unwrap();
    dir
}

#[test]
fn golden_run_matches_byte_for_byte() {
    let run = replay_run();
    let problems = diff_dirs(run.path(), &synthetic_golden_dir());
    assert!(problems.is_empty(), "{problems:#?}");
    let echoed = PipelineConfig::from_json(&read_file(&run.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, synthetic_config());
    assert!(!read_file(&run.path().join("audit.jsonl")).unwrap().is_empty());
}

#[test]
fn merged_graph_scores_perfectly_against_reference() {
    let run = replay_run();
    let merged = load_graph(&run.path().join("merged.json")).unwrap();
    let reference = load_graph(&synthetic_dir().join("reference.json")).unwrap();
    assert_eq!(reference, reference_graph());
    let report = score("complete", &merged, &reference, &Matcher::exact()).unwrap();
    for (name, cell) in report.cells() {
        assert_eq!(cell.supported, cell.total, "{name}: {cell}");
        assert_eq!(cell.percent_text(), "100.0", "{name}");
    }
}

/// Facts that follow from the authored scenario, checked independently of
/// the goldens.
#[test]
fn scenario_structure() {
    let run = replay_run();
    let chunks = load_chunks(&run.path().join("chunks.json")).unwrap();
    let spans: Vec<Vec<u32>> = chunks.iter().map(|c| c.page_span.clone()).collect();
    assert_eq!(spans, vec![vec![2, 3], vec![3, 4], vec![6, 7]]);
    assert_eq!(chunks[0].carried_pages, vec![3]);
    assert!(chunks[1].carried_pages.is_empty());
    // the unsupported terminal is dropped by refinement
    assert_eq!(chunks[1].terminal_labels, vec!["active surveillance", "radical prostatectomy"]);
    // the empty first answer is repaired by the re-request
    assert_eq!(chunks[2].terminal_labels, vec!["radiation therapy with adt", "radical prostatectomy"]);
    assert_eq!(chunks[0].terminal_labels, vec!["low-risk group", "high-risk group"]);

    let sizes: Vec<(usize, usize)> = (1..=3)
        .map(|i| {
            let g = load_graph(&run.path().join(format!("graphs/chunk-{i:03}.json"))).unwrap();
            (g.node_count(), g.edge_count())
        })
        .collect();
    assert_eq!(sizes, vec![(5, 5), (3, 3), (5, 4)]);

    let trace = read_file(&run.path().join("graphs/chunk-001.trace.jsonl")).unwrap();
    let events: Vec<TraceEvent> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let dups: Vec<(String, bool)> = events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Duplicate { label, exact, .. } => Some((label.clone(), *exact)),
            _ => None,
        })
        .collect();
    assert_eq!(
        dups,
        vec![("suspected prostate cancer".into(), true), ("low risk disease".into(), false), ("high-risk group".into(), true)]
    );

    let merged = load_graph(&run.path().join("merged.json")).unwrap();
    assert_eq!((merged.node_count(), merged.edge_count()), (10, 12));
    let log = aggregator::MergeLog::from_json(&read_file(&run.path().join("merge_log.json")).unwrap()).unwrap();
    let pairs: Vec<(&str, &str)> = log
        .decisions
        .iter()
        .map(|d| (d.primary.as_str(), d.secondary.as_str()))
        .collect();
    // terminals of chunk 1 fold into the entries of chunks 2 and 3; the
    // shared surgery terminal keeps the earlier chunk's node
    assert_eq!(
        pairs,
        vec![("c002.n0003", "c001.n0001"), ("c003.n0003", "c001.n0002"), ("c002.n0002", "c003.n0002")]
    );
    let low = merged.node(&NodeId::from("c002.n0003")).unwrap();
    assert_eq!(low.label, "low-risk group");
    assert_eq!(low.kind, NodeKind::Intermediate);
}

#[test]
fn stages_compose_to_the_full_run() {
    let full = replay_run();
    let staged = tempfile::tempdir().unwrap();
    let pages = synthetic_pages();
    let session = Session::open(synthetic_config(), staged.path()).unwrap();
    session.profile(&pages).unwrap();
    session.chunk(&pages).unwrap();
    drop(session);
    // each stage in a fresh session, reading only the previous files
    Session::open(synthetic_config(), staged.path()).unwrap().build(false).unwrap();
    Session::open(synthetic_config(), staged.path()).unwrap().aggregate().unwrap();
    let problems = diff_dirs(staged.path(), full.path());
    assert!(problems.is_empty(), "{problems:#?}");
}

#[test]
fn resume_reuses_existing_files() {
    let run = replay_run();
    let chunk_graph = run.path().join("graphs/chunk-002.json");
    let before = std::fs::metadata(&chunk_graph).unwrap().modified().unwrap();
    std::fs::remove_file(run.path().join("merged.json")).unwrap();
    std::fs::remove_file(run.path().join("graphs/chunk-003.json")).unwrap();
    Session::open(synthetic_config(), run.path())
        .unwrap()
        .run(&synthetic_pages(), true)
        .unwrap();
    assert_eq!(std::fs::metadata(&chunk_graph).unwrap().modified().unwrap(), before);
    assert!(diff_dirs(run.path(), &synthetic_golden_dir()).is_empty());
}

#[test]
fn golden_dot_export() {
    drop(replay_run());
    let merged = load_graph(&synthetic_golden_dir().join("merged.json")).unwrap();
    assert_eq!(to_dot(&merged), read_file(&synthetic_dir().join("merged.dot")).unwrap());
}

#[test]
fn cap_below_interface_is_a_config_error() {
    let run = replay_run();
    let mut config = synthetic_config();
    config.expansion_cap = 2;
    let err = Session::open(config, run.path()).unwrap().build(false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn tight_cap_leaves_partial_graph() {
    let run = replay_run();
    let mut config = synthetic_config();
    config.expansion_cap = 4;
    let err = Session::open(config, run.path()).unwrap().build(false).unwrap_err();
    assert!(matches!(err.root(), Error::ExpansionBudgetExceeded { cap: 4, .. }), "{err}");
    let partial = load_graph(&run.path().join("graphs/chunk-001.partial.json")).unwrap();
    assert_eq!(partial.node_count(), 4);
}

#[test]
fn missing_fixture_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut pages = synthetic_pages();
    pages[0].text.push_str("\nAmended.");
    let err = Session::open(synthetic_config(), dir.path())
        .unwrap()
        .run(&pages, false)
        .unwrap_err();
    assert_eq!(err.exit_code(), guidegraph::error::exit_code::ORACLE_PROTOCOL, "{err}");
}
