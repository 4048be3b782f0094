use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use planar3d::model::{Network, NetworkSpec, WidthScale};
use planar3d::pipeline::{normalize_scan, read_mask, read_volume, write_mask, write_volume, MaskVolume, Volume};
use planar3d::Tensor;

fn planar3d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planar3d"))
        .args(args)
        .current_dir(cwd)
        .env("PLANAR3D_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = planar3d(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    planar3d(args, cwd).status.code().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect()
}

#[test]
fn convert_reports_counts_and_rejects_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-encoder", "--out", "enc", "--layers", "2"], d);
    let stdout = ok(&["convert", "--in", "enc", "--out", "enc3"], d);
    assert!(stdout.contains("params in = params out"), "{stdout}");
    assert!(d.join("enc3/run.toml").exists());
    assert_eq!(code(&["convert", "--in", "enc3", "--out", "again"], d), 2);

    let mut blobs: Vec<PathBuf> = fs::read_dir(d.join("enc"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    blobs.sort();
    let mut bytes = fs::read(&blobs[0]).unwrap();
    bytes[0] ^= 1;
    fs::write(&blobs[0], bytes).unwrap();
    assert_eq!(code(&["convert", "--in", "enc", "--out", "bad"], d), 3);
}

#[test]
fn identity_probe_returns_the_normalized_input() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let v = Volume::from_fn([256, 5, 6], |z, y, x| ((z * 31 + y * 7 + x * 3) % 97) as f32 * 0.1 - 2.0);
    write_volume(&d.join("v.pv3d"), &v).unwrap();
    let stdout = ok(&["segment", "--identity-probe", "--in", "v.pv3d", "--out", "m.pv3d", "--prob", "p.pv3d"], d);
    assert!(stdout.contains("31 windows"), "{stdout}");
    let p = read_volume(&d.join("p.pv3d")).unwrap();
    assert_eq!(p.data(), normalize_scan(&v).unwrap().data());
    assert!(d.join("m.pv3d.run.toml").exists());

    // A stride beyond the window leaves gaps: geometry error.
    assert_eq!(code(&["segment", "--identity-probe", "--in", "v.pv3d", "--out", "m.pv3d", "--stride", "20"], d), 2);
}

#[test]
fn toy_network_writes_a_binary_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-data", "--out", "data", "--count", "1", "--extents", "20", "64", "64", "--ratio", "0.004"], d);
    ok(&["init", "--out", "net", "--seed", "1"], d);
    let stdout = ok(&["segment", "--net", "net", "--in", "data/scan00.pv3d", "--out", "m.pv3d", "--prob", "p.pv3d"], d);
    assert!(stdout.contains("windows"));
    let bytes = fs::read(d.join("m.pv3d")).unwrap();
    assert_eq!(bytes[18], 1);
    assert_eq!(read_mask(&d.join("m.pv3d")).unwrap().extents(), [20, 64, 64]);
    let p = read_volume(&d.join("p.pv3d")).unwrap();
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn non_finite_network_output_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut net = Network::build(&NetworkSpec::vgg16_unet(WidthScale::new(1, 16), [16, 32, 32]), 0, None).unwrap();
    let last = net.parameters().len() - 1;
    let p = &mut net.parameters_mut()[last];
    p.value = Tensor::full(p.value.shape(), f32::NAN);
    net.save(&d.join("net")).unwrap();
    write_volume(&d.join("v.pv3d"), &Volume::from_fn([16, 32, 32], |z, y, x| (z + y + x) as f32)).unwrap();
    assert_eq!(code(&["segment", "--net", "net", "--in", "v.pv3d", "--out", "m.pv3d"], d), 4);
}

fn small_data(d: &Path) {
    ok(&["synth-data", "--out", "data", "--count", "2", "--extents", "16", "32", "32", "--ratio", "0.01", "--seed", "4"], d);
    fs::write(d.join("cfg.toml"), "width = \"1/16\"\nwindow = [16, 32, 32]\n\n[train]\nlearning_rate = 0.5\nmax_epochs = 2\npatience = 2\nseed = 9\n").unwrap();
}

#[test]
fn zero_learning_rate_keeps_the_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(&["train", "--config", "cfg.toml", "--data", "data", "--out", "run", "--lr", "0"], d);
    let resolved = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(resolved.contains("learning_rate = 0"), "{resolved}");
    ok(&["init", "--out", "init", "--width", "1/16", "--window", "16", "32", "32", "--seed", "9"], d);
    assert_eq!(dir_bytes(&d.join("run/net/weights")).iter().map(|x| &x.1).collect::<Vec<_>>(),
        dir_bytes(&d.join("init/weights")).iter().map(|x| &x.1).collect::<Vec<_>>());
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,train_dice,lr_t\n"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    for run in ["a", "b"] {
        ok(&["train", "--config", "cfg.toml", "--data", "data", "--out", run, "--lr", "1e-3"], d);
    }
    assert_eq!(fs::read(d.join("a/train_log.csv")).unwrap(), fs::read(d.join("b/train_log.csv")).unwrap());
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| v.into_iter().map(|x| x.1).collect::<Vec<_>>();
    assert_eq!(strip(dir_bytes(&d.join("a/net/weights"))), strip(dir_bytes(&d.join("b/net/weights"))));
}

#[test]
fn divergence_exits_with_five() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    let out = planar3d(&["train", "--config", "cfg.toml", "--data", "data", "--out", "run", "--lr", "1e30"], d);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn folds_train_one_network_per_fold() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth-data", "--out", "data", "--count", "4", "--extents", "16", "32", "32", "--ratio", "0.01"], d);
    fs::write(d.join("centers.toml"), "scan00 = \"a\"\nscan01 = \"a\"\nscan02 = \"b\"\nscan03 = \"b\"\n").unwrap();
    ok(&["train", "--data", "data", "--out", "run", "--folds", "--centers", "centers.toml", "--width", "1/16", "--epochs", "1", "--patience", "1", "--lr", "1e-3"], d);
    let plan = fs::read_to_string(d.join("run/folds.toml")).unwrap();
    assert!(plan.contains("[[folds]]"));
    // Default window width is 64, so every scan is resampled; both folds still complete.
    for k in 0..2 {
        assert!(d.join(format!("run/fold{k}/net/network.toml")).exists());
    }
}

fn band(len: usize, start: usize, count: usize) -> MaskVolume {
    MaskVolume::new([1, 1, len], (0..len).map(|i| (i >= start && i < start + count) as u8).collect()).unwrap()
}

#[test]
fn evaluate_reports_center_averages() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("pred")).unwrap();
    fs::create_dir_all(d.join("truth")).unwrap();
    // Truth occupies [0, 100); a shifted band of 100 overlaps k voxels, giving Dice k/100.
    for (name, k) in [("s1", 69), ("s2", 50), ("s3", 64)] {
        write_mask(&d.join(format!("truth/{name}.mask.pv3d")), &band(300, 0, 100)).unwrap();
        write_mask(&d.join(format!("pred/{name}.mask.pv3d")), &band(300, 100 - k, 100)).unwrap();
    }
    fs::write(d.join("centers.toml"), "s1 = \"c01\"\ns2 = \"c07\"\ns3 = \"c08\"\n").unwrap();
    let stdout = ok(&["evaluate", "--pred", "pred", "--truth", "truth", "--centers", "centers.toml", "--out", "rep"], d);
    assert!(stdout.contains("center average: dice 0.61"), "{stdout}");
    let summary = fs::read_to_string(d.join("rep/summary.csv")).unwrap();
    assert!(summary.starts_with("metric,c01_mean,c01_std,c07_mean"));
    assert_eq!(fs::read_to_string(d.join("rep/scans.csv")).unwrap().lines().count(), 4);

    assert!(ok(&["evaluate", "--pred", "truth", "--truth", "truth", "--out", "same"], d).contains("dice 1.0000 ± 0.0000, sensitivity 1.0000"));

    fs::remove_file(d.join("pred/s3.mask.pv3d")).unwrap();
    assert_eq!(code(&["evaluate", "--pred", "pred", "--truth", "truth", "--out", "x"], d), 2);
}

#[test]
fn swapping_prediction_and_truth_keeps_dice_only() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("a")).unwrap();
    fs::create_dir_all(d.join("b")).unwrap();
    write_mask(&d.join("a/s.mask.pv3d"), &band(100, 0, 40)).unwrap();
    write_mask(&d.join("b/s.mask.pv3d"), &band(100, 20, 10)).unwrap();
    ok(&["evaluate", "--pred", "a", "--truth", "b", "--out", "ab"], d);
    ok(&["evaluate", "--pred", "b", "--truth", "a", "--out", "ba"], d);
    let column = |dir: &str, i: usize| -> String {
        let text = fs::read_to_string(d.join(dir).join("scans.csv")).unwrap();
        text.lines().nth(1).unwrap().split(',').nth(i).unwrap().to_string()
    };
    assert_eq!(column("ab", 2), column("ba", 2));
    assert_ne!(column("ab", 3), column("ba", 3));
}

#[test]
fn selfcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["selfcheck"], tmp.path());
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["segment"], tmp.path()), 2);
    assert_eq!(code(&["bogus"], tmp.path()), 2);
}
