use std::fs;

use csg_topopt::mma::MmaConfig;
use csg_topopt::optimize::{optimize, OptimizeError, PartialRun, RunHistory};
use csg_topopt::output::*;
use csg_topopt::problem::ProblemSpec;
use csg_topopt::sweep::{apply, parse_values, pareto_csv, sweep, SweepParam, PARETO_FILE};

fn quick() -> ProblemSpec {
    ProblemSpec { nx: 16, ny: 8, tree_depth: 2, mma: MmaConfig { max_iter: 12, ..Default::default() }, ..Default::default() }
}

#[test]
fn run_artifacts_round_trip() {
    let spec = quick();
    let r = optimize(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &spec, &r, OutputOptions::default()).unwrap();

    let hist = parse_history_csv(&fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(hist.len(), r.history.len());
    for (row, rec) in hist.iter().zip(&r.history.records) {
        assert_eq!((row.iter, row.compliance, row.volume, row.kkt, row.step), (rec.iter, rec.compliance, rec.volume, rec.kkt, rec.step));
        assert!(row.times.iter().all(|t| *t >= 0.0));
    }

    let rows = parse_design_csv(&fs::read_to_string(dir.path().join(DESIGN_CSV_FILE)).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    let flat: Vec<f64> = rows.concat();
    assert_eq!(flat, r.snapped_density.values);

    let pgm = fs::read(dir.path().join(DESIGN_PGM_FILE)).unwrap();
    let header = b"P5\n16 8\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 128);
    // first pixel is the top-left cell
    let top_left = r.snapped_density.values[7 * 16];
    assert_eq!(pixels[0], (255.0 * top_left).round() as u8);

    let tree: TreeDocument = serde_json::from_str(&fs::read_to_string(dir.path().join(TREE_FILE)).unwrap()).unwrap();
    assert_eq!(tree.depth, 2);
    assert_eq!(tree.nodes.len(), 7);
    assert_eq!(tree.pruned_tree(), r.pruned);

    let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary, Summary::new(&r));

    let echoed = ProblemSpec::from_json(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(echoed, spec.effective());
    // no temp files left behind
    assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn rerun_from_echoed_config_is_byte_identical() {
    let spec = quick();
    let opts = OutputOptions { timings: false };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_run(a.path(), &spec, &optimize(&spec).unwrap(), opts).unwrap();
    let echoed = ProblemSpec::from_json(&fs::read_to_string(a.path().join(CONFIG_FILE)).unwrap()).unwrap();
    write_run(b.path(), &echoed, &optimize(&echoed).unwrap(), opts).unwrap();
    for f in [CONFIG_FILE, HISTORY_FILE, TREE_FILE, SUMMARY_FILE, DESIGN_CSV_FILE, DESIGN_PGM_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn partial_run_is_persisted() {
    let spec = quick();
    let r = optimize(&spec).unwrap();
    let partial = PartialRun {
        history: RunHistory { records: r.history.records[..3].to_vec() },
        z: Some(r.history.records[2].z.clone()),
    };
    let dir = tempfile::tempdir().unwrap();
    write_partial(dir.path(), &spec, &partial, "solver failure at iteration 3", OutputOptions::default()).unwrap();
    let report: FailureReport = serde_json::from_str(&fs::read_to_string(dir.path().join(FAILURE_FILE)).unwrap()).unwrap();
    assert_eq!(report.iterations_completed, 3);
    assert_eq!(report.last_good_z.as_deref(), Some(&r.history.records[2].z[..]));
    let hist = parse_history_csv(&fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(hist.len(), 3);
}

#[test]
fn invalid_config_fails_before_running() {
    let spec = ProblemSpec { vf_star: 1.5, ..quick() };
    match optimize(&spec) {
        Err(OptimizeError::Config(e)) => assert!(e.to_string().contains("vf_star"), "{e}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn sweep_values_are_applied_and_validated() {
    let base = quick();
    assert_eq!(apply(&base, SweepParam::Mesh, "20x10").unwrap().nx, 20);
    assert_eq!(apply(&base, SweepParam::TreeDepth, "3").unwrap().tree_depth, 3);
    assert_eq!(apply(&base, SweepParam::Seed, "9").unwrap().seed, 9);
    assert!(apply(&base, SweepParam::VfStar, "1.5").unwrap_err().to_string().contains("vf_star"));
    assert!(apply(&base, SweepParam::Mesh, "20").is_err());
    assert!("volume".parse::<SweepParam>().is_err());
    assert!(parse_values("0.3,,0.5").is_err());
    assert_eq!(parse_values("0.3, 0.4").unwrap(), vec!["0.3", "0.4"]);
}

#[test]
fn parallel_sweep_matches_sequential() {
    let base = quick();
    let values = parse_values("0.3,0.5").unwrap();
    let opts = OutputOptions { timings: false };
    let seq = tempfile::tempdir().unwrap();
    let par = tempfile::tempdir().unwrap();
    let rows = sweep(&base, SweepParam::VfStar, &values, seq.path(), 1, opts).unwrap();
    sweep(&base, SweepParam::VfStar, &values, par.path(), 2, opts).unwrap();
    let text = fs::read_to_string(seq.path().join(PARETO_FILE)).unwrap();
    assert_eq!(text, pareto_csv(&rows));
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("value,J_relaxed,J_snapped,g_v\n"));
    assert_eq!(text, fs::read_to_string(par.path().join(PARETO_FILE)).unwrap());
    for v in &values {
        let sub = format!("vf_star={v}");
        assert_eq!(
            fs::read(seq.path().join(&sub).join(HISTORY_FILE)).unwrap(),
            fs::read(par.path().join(&sub).join(HISTORY_FILE)).unwrap()
        );
    }
}
