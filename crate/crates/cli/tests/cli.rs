use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use caccsim_cli::compare::{compare_sets, SetComparison};
use caccsim_cli::io::{CsvRecorder, EVENT_COLUMNS, TRAJECTORY_COLUMNS};
use caccsim_cli::sweep::{sweep, SweepConfig, SweepRow};
use caccsim_cli::{cmd_analyze, cmd_compare, cmd_simulate};
use caccsim_core::engine::{run_scenario, Recorder, RunLog};
use caccsim_core::{ScenarioConfig, Strategy};
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn small(strategy: Strategy, mpr: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        strategy,
        mpr,
        seed,
        demand_vph: 3000.0,
        lane_count: 2,
        length_m: 1500.0,
        duration_s: 240.0,
        warmup_s: 60.0,
        ..ScenarioConfig::default()
    }
}

fn write_config(dir: &Path, name: &str, config: &impl serde::Serialize) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    path
}

fn simulate_small(root: &Path, name: &str, config: &ScenarioConfig) -> PathBuf {
    let cfg = write_config(root, &format!("{name}.json"), config);
    let out = root.join(name);
    cmd_simulate(&cfg, &out).unwrap();
    out
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn caccsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_caccsim"))
}

#[test]
fn simulate_writes_the_four_files_with_stable_headers() {
    let tmp = TempDir::new().unwrap();
    let run = simulate_small(tmp.path(), "run", &small(Strategy::Local, 0.3, 1));
    let mut names: Vec<String> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["events.csv", "manifest.json", "summary.json", "trajectories.csv"]);
    assert_eq!(
        first_line(&run.join("trajectories.csv")),
        "time_s,vehicle_id,class,lane,position_m,speed_mps,accel_mps2,platoon_id,role,leader_id,leader_class"
    );
    assert_eq!(first_line(&run.join("events.csv")), "time_s,vehicle_id,class,kind,from_lane,to_lane,platoon_id");
    assert_eq!(TRAJECTORY_COLUMNS.join(","), first_line(&run.join("trajectories.csv")));
    assert_eq!(EVENT_COLUMNS.join(","), first_line(&run.join("events.csv")));
}

#[test]
fn analyze_reproduces_golden_report_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    cmd_analyze(&run).unwrap();
    for name in ["report.json", "cdf_hard_brake_hv.csv", "cdf_hard_brake_cav.csv"] {
        let expected = fs::read(fixtures().join("golden_expected").join(name)).unwrap();
        let got = fs::read(run.join(name)).unwrap();
        assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(expected).unwrap(), "{name}");
    }
}

#[test]
fn golden_report_values_match_hand_computation() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    let r = cmd_analyze(&run).unwrap();
    // 150 m driven over 7.5 vehicle-seconds inside [2, 10] s.
    assert!((r.vmt_mi - 150.0 / 1609.344).abs() < 1e-15);
    assert!((r.vht_h - 7.5 / 3600.0).abs() < 1e-15);
    assert_eq!(r.throughput_vph, 450.0);
    assert_eq!((r.hard_brake_counts.total, r.hard_brake_counts.hv_partner, r.hard_brake_counts.cav_partner), (5, 2, 2));
    assert_eq!(r.lane_change_total, 1);
    assert_eq!(r.hv_count, 3);
    assert!((r.platoon_ratio - 4.0 / 7.0).abs() < 1e-15);
}

#[test]
fn tampered_config_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    let tampered = manifest.replace("\"demand_vph\": 1000.0", "\"demand_vph\": 1200.0");
    assert_ne!(manifest, tampered);
    fs::write(run.join("manifest.json"), tampered).unwrap();
    let err = cmd_analyze(&run).unwrap_err();
    assert!(format!("{err:#}").contains("digest mismatch"), "{err:#}");
    assert!(!run.join("report.json").exists());
}

#[test]
fn swapped_log_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let a = simulate_small(tmp.path(), "a", &small(Strategy::AdHoc, 0.2, 1));
    let b = simulate_small(tmp.path(), "b", &small(Strategy::AdHoc, 0.2, 2));
    fs::copy(b.join("trajectories.csv"), a.join("trajectories.csv")).unwrap();
    let err = cmd_analyze(&a).unwrap_err();
    assert!(format!("{err:#}").contains("digest mismatch for trajectories.csv"), "{err:#}");
}

#[test]
fn missing_log_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    fs::remove_file(run.join("events.csv")).unwrap();
    assert!(format!("{:#}", cmd_analyze(&run).unwrap_err()).contains("missing"));
}

#[test]
fn unwritable_output_leaves_nothing_behind() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "a file, not a directory").unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &small(Strategy::Base, 0.0, 1));
    let out = blocker.join("run");
    assert!(cmd_simulate(&cfg, &out).is_err());
    let status = caccsim().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(!status.success());
    let mut names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["blocker", "cfg.json"]);
}

#[test]
fn abandoned_logs_leave_nothing_behind() {
    let tmp = TempDir::new().unwrap();
    let mut log = RunLog::default();
    run_scenario(&small(Strategy::AdHoc, 0.5, 1), &mut log).unwrap();
    {
        // A run that errors drops its recorder before `finish`.
        let mut rec = CsvRecorder::create(tmp.path()).unwrap();
        log.samples.iter().for_each(|s| rec.sample(s));
        log.events.iter().for_each(|e| rec.event(e));
    }
    {
        let pending = CsvRecorder::create(tmp.path()).unwrap().finish().unwrap();
        assert_eq!(pending.digests().len(), 2);
    }
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn base_with_cavs_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &serde_json::json!({"strategy": "Base", "mpr": 0.2}));
    let err = cmd_simulate(&cfg, &tmp.path().join("run")).unwrap_err();
    assert!(format!("{err:#}").contains("Base requires mpr = 0"), "{err:#}");
    let out = caccsim().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("run")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));
}

#[test]
fn base_run_reports_no_cavs_and_cli_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &small(Strategy::Base, 0.0, 4));
    let run = tmp.path().join("run");
    assert!(caccsim().args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&run).status().unwrap().success());
    let status = caccsim().env("CACCSIM_LOG", "debug").args(["analyze", "--run"]).arg(&run).status().unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cav_count"], 0);
    assert_eq!(report["platoon_ratio"], 0.0);
}

#[test]
fn same_seed_same_bytes() {
    let tmp = TempDir::new().unwrap();
    let config = small(Strategy::Local, 0.3, 9);
    let a = simulate_small(tmp.path(), "a", &config);
    let b = simulate_small(tmp.path(), "b", &config);
    for name in ["trajectories.csv", "events.csv", "summary.json"] {
        assert!(fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn compare_identical_runs_and_insufficient_data() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    cmd_analyze(&run).unwrap();
    let out = tmp.path().join("compare.json");
    let c = cmd_compare(&run, &run, 0.05, &out).unwrap();
    for set in [&c.hv_partner, &c.cav_partner] {
        match set {
            SetComparison::Tested { d, reject, .. } => {
                assert_eq!(*d, 0.0);
                assert!(!reject);
            }
            other => panic!("{other:?}"),
        }
    }
    let written: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(written["hv_partner"]["status"], "tested");
    assert_eq!(written["hv_partner"]["d"], 0.0);
    assert_eq!(written["hv_partner"]["reject"], false);

    assert_eq!(compare_sets(&[-3.5], &[], 0.05), SetComparison::InsufficientData { n_a: 1, n_b: 0 });
    let empty = serde_json::to_value(compare_sets(&[], &[], 0.05)).unwrap();
    assert_eq!(empty["status"], "insufficient_data");
}

#[test]
fn compare_needs_analyzed_runs() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("golden");
    copy_dir(&fixtures().join("golden_run"), &run);
    assert!(cmd_compare(&run, &run, 0.05, &tmp.path().join("c.json")).is_err());
    let status = caccsim().args(["compare", "--a"]).arg(&run).arg("--b").arg(&run).status().unwrap();
    assert!(!status.success());
}

#[test]
fn empty_hard_brake_sets_give_header_only_cdfs() {
    let tmp = TempDir::new().unwrap();
    // Two vehicles far apart in free flow never brake.
    let config = ScenarioConfig { demand_vph: 60.0, ..small(Strategy::Base, 0.0, 2) };
    let run = simulate_small(tmp.path(), "run", &config);
    let r = cmd_analyze(&run).unwrap();
    assert_eq!(r.hard_brake_counts.total, 0);
    assert_eq!(fs::read_to_string(run.join("cdf_hard_brake_hv.csv")).unwrap(), "value,cdf\n");
    assert_eq!(fs::read_to_string(run.join("cdf_hard_brake_cav.csv")).unwrap(), "value,cdf\n");
}

fn read_rows(path: &Path) -> Vec<SweepRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn sweep_isolates_failing_runs() {
    let tmp = TempDir::new().unwrap();
    let config = SweepConfig {
        base: small(Strategy::Base, 0.0, 1),
        strategies: vec![Strategy::AdHoc, Strategy::Local],
        mprs: vec![0.2, 1.5],
        seeds: vec![1, 2],
        include_base: true,
        keep_logs: false,
    };
    let path = write_config(tmp.path(), "sweep.json", &config);
    let out = tmp.path().join("sweep");
    let status = caccsim().args(["sweep", "--parallel", "2", "--config"]).arg(&path).arg("--out").arg(&out).status().unwrap();
    assert!(!status.success());

    let rows = read_rows(&out.join("sweep_summary.csv"));
    assert_eq!(rows.len(), 2 + 2 * 2 * 2);
    let failed: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "failed").collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r.mpr == 1.5 && r.throughput_vph.is_none() && r.error.contains("mpr")));
    assert!(rows.iter().filter(|r| r.status == "ok").all(|r| r.q_mph.unwrap() > 0.0));

    let means = fs::read_to_string(out.join("sweep_means.csv")).unwrap();
    assert_eq!(means.lines().count(), 1 + 5);
    assert!(means.lines().next().unwrap().contains("mean_q_mph"));
    assert!(out.join("runs/AdHoc_mpr20.0_seed2/report.json").exists());
}

#[test]
fn single_cell_sweep_matches_simulate_then_analyze() {
    let tmp = TempDir::new().unwrap();
    let base = small(Strategy::Base, 0.0, 1);
    let config = SweepConfig {
        base: base.clone(),
        strategies: vec![Strategy::Local],
        mprs: vec![0.3],
        seeds: vec![5],
        include_base: false,
        keep_logs: false,
    };
    let outcome = sweep(&config, &tmp.path().join("sweep"), 1).unwrap();
    assert_eq!(outcome.outcomes.len(), 1);
    let (_, from_sweep) = outcome.outcomes[0].result.clone().unwrap();

    let run = simulate_small(tmp.path(), "single", &ScenarioConfig { strategy: Strategy::Local, mpr: 0.3, seed: 5, ..base });
    let from_logs = cmd_analyze(&run).unwrap();
    assert_eq!(from_sweep, from_logs);
}
