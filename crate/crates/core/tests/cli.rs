use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const RAW: &str = "\
10\t09:00:00.000\tapp.exe:100\tOPEN\tC:\\data\\f0\tSUCCESS Options: Open NoBuffer Access: All
11\t09:00:00.000\tapp.exe:100\tWRITE\tC:\\data\\f0\tLCN: 5000 Offset: 0 Length: 65536
12\t09:00:00.010\tapp.exe:100\tREAD\tC:\\data\\f0\tLCN: 5000 Offset: 0 Length: 65536
13\t09:00:00.020\tapp.exe:100\tWRITE\tC:\\data\\f0\tLCN: 5016 Offset: 65536 Length: 4096
14\t09:00:00.030\tapp.exe:100\tCLOSE\tC:\\data\\f0\tSUCCESS
";

const CONFIG: &str = "[disk]\nprofile = toshiba_mk6012map\n[replay]\nmode = closed\n";

fn iosim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iosim")).args(args).current_dir(dir).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn convert_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("raw.log"), RAW).unwrap();
    fs::write(d.join("run.ini"), CONFIG).unwrap();
    ok(&iosim(&["convert", "--input", "raw.log", "--output", "trace.txt"], d));
    let canon = fs::read_to_string(d.join("trace.txt")).unwrap();
    assert!(canon.starts_with('#'), "versioned header");

    // raw and canonical inputs replay the same way
    for (input, out) in [("raw.log", "a"), ("trace.txt", "b")] {
        ok(&iosim(&["simulate", "--config", "run.ini", "--trace", input, "--output", out], d));
    }
    let a = fs::read(d.join("a/requests.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/requests.csv")).unwrap());
    let summary = fs::read_to_string(d.join("a/summary.txt")).unwrap();
    assert!(summary.starts_with(iosim::report::SUMMARY_HEADER));
    assert!(summary.contains("config.disk.profile=toshiba_mk6012map"));
    assert!(!d.join("a/events.log").exists());
}

#[test]
fn own_output_as_baseline_gives_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("raw.log"), RAW).unwrap();
    fs::write(d.join("run.ini"), CONFIG).unwrap();
    ok(&iosim(&["simulate", "--config", "run.ini", "--trace", "raw.log", "--output", "first"], d));

    let csv = fs::read_to_string(d.join("first/requests.csv")).unwrap();
    let mut base = format!("{}\n", iosim::report::BASELINE_HEADER);
    for line in csv.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        base.push_str(&format!("{},{}\n", f[0], f[3]));
    }
    fs::write(d.join("base.csv"), base).unwrap();
    let o = iosim(
        &["simulate", "--config", "run.ini", "--trace", "raw.log", "--output", "second", "--baseline", "base.csv", "--tolerance-us", "50"],
        d,
    );
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("error_percent=0.000"));
    let summary = fs::read_to_string(d.join("second/summary.txt")).unwrap();
    assert!(summary.contains("config.replay.tolerance_us=50"));
    assert!(summary.contains("error_percent=0.000"));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("raw.log"), RAW).unwrap();
    fs::write(d.join("bad.ini"), "[disk]\nrpm = -5\n").unwrap();
    let o = iosim(&["simulate", "--config", "bad.ini", "--trace", "raw.log", "--output", "x"], d);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("disk.rpm"), "{err}");
}

#[test]
fn generate_needs_a_workload() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.ini"), CONFIG).unwrap();
    let o = iosim(&["simulate", "--config", "run.ini", "--generate", "--output", "x"], d);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("[workload]"));
}
