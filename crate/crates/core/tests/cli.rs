use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn phytosense(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phytosense")).args(args).current_dir(cwd).output().expect("spawn")
}

fn config(name: &str) -> String {
    format!("{}/configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_logs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = phytosense(&["run", "--config", &config("touch_led.toml")], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("cycles: 1200\n"), "{stdout}");
    assert!(stdout.contains("errors: 0"));
    let log = fs::read_to_string(dir.path().join("out/touch/log/log-000000.csv")).unwrap();
    assert!(log.starts_with("timestamp_ms,bio1,bio2,imp1,imp2,"));
    assert_eq!(log.lines().count(), 1201);
    let messages = fs::read_to_string(dir.path().join("out/touch/messages.log")).unwrap();
    let first = messages.lines().next().unwrap();
    let (ts, text) = first.split_once('\t').unwrap();
    assert!(ts.ends_with('Z') && ts.len() == 24, "{ts}");
    assert_eq!(text, "touch detected on bio1");
    assert!(dir.path().join("out/touch/plot.html").exists());
}

#[test]
fn seed_flag_changes_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let read = |d: &Path| fs::read(d.join("out/touch/log/log-000000.csv")).unwrap();
    assert!(phytosense(&["run", "--config", &config("touch_led.toml")], dir.path()).status.success());
    let a = read(dir.path());
    assert!(phytosense(&["run", "--config", &config("touch_led.toml"), "--seed", "99"], dir.path()).status.success());
    let b = read(dir.path());
    assert!(phytosense(&["run", "--config", &config("touch_led.toml")], dir.path()).status.success());
    assert_ne!(a, b);
    assert_eq!(a, read(dir.path()));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = phytosense(&["sweep", "--config", &config("sweep.toml"), "--out", "s.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "frequency_hz,re,im,magnitude,phase_deg,vi_rms,vv_rms,m_rms,c,p_c");
    assert_eq!(lines.count(), 25);
}

#[test]
fn simulate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = phytosense(&["simulate", "--scenario", &config("scenario.toml"), "--out", "sim.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert!(text.starts_with("timestamp_ms,bio1,bio2,imp1,air_temp,light,ext_temp\n"));
    assert_eq!(text.lines().count(), 901);

    assert!(phytosense(&["run", "--config", &config("touch_led.toml")], dir.path()).status.success());
    let out = phytosense(&["replay", "--log", "out/touch/log", "--config", &config("touch_led.toml")], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("cycles: 1200\n"));

    // a log with other channels is refused
    let out = phytosense(&["replay", "--log", "sim.csv", "--config", &config("touch_led.toml")], dir.path());
    assert!(!out.status.success());
}

#[test]
fn failures_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", "--config", "missing.toml"],
        vec!["sweep", "--config", "bad.toml", "--out", "x.csv"],
        vec!["sweep", "--config", "nosweep.toml", "--out", "x.csv"],
        vec!["run", "--config", "ghost.toml"],
    ];
    fs::write(dir.path().join("bad.toml"), "[sweep]\nf_min = 1000\nf_max = 10\npoints = 3\n").unwrap();
    fs::write(dir.path().join("nosweep.toml"), "seed = 1\n").unwrap();
    fs::write(
        dir.path().join("ghost.toml"),
        "[store]\ndir = \"never\"\n[actuator.led]\nkind = \"rgb_led\"\n[[binding]]\nid = \"b\"\nwhen = \"GHOST\"\nactuator = \"led\"\ncolor = \"red\"\n",
    )
    .unwrap();
    for args in cases {
        let out = phytosense(&args, dir.path());
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{err}");
    }
    assert!(!dir.path().join("never").exists());
}

#[test]
fn all_detectors_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = phytosense(&["run", "--config", &config("all_detectors.toml")], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("cycles: 6000\n"));
}
