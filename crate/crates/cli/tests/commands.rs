use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn edptune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edptune")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().filter(|l| !l.starts_with('#')).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn total_row(text: &str) -> Vec<u64> {
    let r = rows(text).into_iter().find(|r| r[0] == "total").unwrap();
    r[2..].iter().map(|c| c.parse().unwrap()).collect()
}

#[test]
fn analyze_caffenet_totals() {
    let o = edptune(&["analyze", "--builtin", "caffenet"]);
    assert!(o.status.success());
    let totals = total_row(&stdout(&o));
    // total_ops column
    let ops = totals[6] as f64;
    assert!((ops / 727.20e6 - 1.0).abs() < 0.05, "{ops}");
    assert!(stdout(&o).contains("# network=caffenet batch=1 ops_millions=726.973"));
}

#[test]
fn analyze_batch_scales_every_count() {
    let one = total_row(&stdout(&edptune(&["analyze", "--builtin", "two_d_cnn"])));
    let many = total_row(&stdout(&edptune(&["analyze", "--builtin", "two_d_cnn", "--batch", "256"])));
    assert_eq!(many, one.iter().map(|v| v * 256).collect::<Vec<_>>());
}

#[test]
fn analyze_file_and_literal_weights() {
    let dir = TempDir::new().unwrap();
    let arch = write(&dir, "small.arch", "name small\ninput 8 8 3\nconv c1 filters=4 k=3 pad=1\nrelu r1\nfc f1 units=10\n");
    let o = edptune(&["analyze", &arch]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let physical = total_row(&stdout(&o));
    // macc: conv 8·8·4·27 + fc 256·10
    assert_eq!(physical[0], 8 * 8 * 4 * 27 + 256 * 10);
    let literal = total_row(&stdout(&edptune(&["analyze", &arch, "--literal-weights"])));
    assert_eq!(literal[0], physical[0]);
    assert!(literal[7] < physical[7], "literal conv weights read less");
}

#[test]
fn analyze_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.arch");
    let o = edptune(&["analyze", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let bad = write(&dir, "bad.arch", "input 4 4 1\nconv c filters=2 k=9\n");
    let o = edptune(&["analyze", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains('c'));

    assert_eq!(edptune(&["analyze", "--builtin", "vgg16"]).status.code(), Some(2));
    assert_eq!(edptune(&["analyze"]).status.code(), Some(2));
    assert_eq!(edptune(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn integrate_constant_power_and_markers() {
    let dir = TempDir::new().unwrap();
    let trace = write(&dir, "trace.csv", "t_s,slot_w,ext_w\n0,50,100\n1,50,100\n2,50,100\n4,50,100\n");
    let regions = write(
        &dir,
        "regions.csv",
        "id,label,t_start_s,t_end_s\nf1,forward,0,2\nb1,backward,1,4\nlate,update,9,10\n",
    );
    let o = edptune(&["integrate", &trace, &regions]);
    assert!(o.status.success());
    let r = rows(&stdout(&o));
    assert_eq!(r[0], ["id", "label", "duration_s", "joules_total", "mean_watts", "slot_j", "ext_j", "error"]);
    assert_eq!(r[1][..7], ["f1", "forward", "2", "300", "150", "100", "200"]);
    assert_eq!(r[2][..4], ["b1", "backward", "3", "450"]);
    assert_eq!(r[3][0], "late");
    assert_eq!(r[3][3], "NA");
    assert!(!r[3][7].is_empty());
}

#[test]
fn integrate_bad_trace_exit_2() {
    let dir = TempDir::new().unwrap();
    let trace = write(&dir, "trace.csv", "t_s,gpu_w\n0,50\n2,50\n1,50\n");
    let regions = write(&dir, "regions.csv", "id,label,t_start_s,t_end_s\nr,forward,0,1\n");
    let o = edptune(&["integrate", &trace, &regions]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_trace_round_trip() {
    let dir = TempDir::new().unwrap();
    let regions = dir.path().join("regions.csv");
    let trace = dir.path().join("trace.csv");
    let o = edptune(&[
        "gen-trace",
        "--segment",
        "0:1:100",
        "--segment",
        "1:3:200:100",
        "--rate",
        "50",
        "--channel",
        "slot:1",
        "--channel",
        "ext:3",
        "--regions-out",
        regions.to_str().unwrap(),
        "--output",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = edptune(&["integrate", trace.to_str().unwrap(), regions.to_str().unwrap()]);
    let r = rows(&stdout(&o));
    let joules: Vec<f64> = r[1..].iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(joules, [100.0, 300.0]);
    assert_eq!(r[1][5..7], ["25", "75"]);
}

#[test]
fn gen_trace_noise_is_seeded() {
    let args = ["gen-trace", "--segment", "0:1:100", "--rate", "20", "--noise", "5", "--seed", "7"];
    let a = stdout(&edptune(&args));
    assert_eq!(a, stdout(&edptune(&args)));
    let mut other = args;
    other[8] = "8";
    assert_ne!(a, stdout(&edptune(&other)));
}

const LINEAR: &str = "device,network,step,gpus,batch,seconds_per_batch,joules_per_batch
dev,net,forward,1,64,0.5,40
dev,net,forward,1,128,0.9,72
dev,net,forward,1,256,1.7,136
dev,net,backward,1,64,1,80
dev,net,backward,1,128,2,160
dev,net,backward,1,256,4,320
dev,lonely,forward,1,64,0.1,5
";

#[test]
fn calibrate_then_predict() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "m.csv", LINEAR);
    let models = dir.path().join("models.csv");
    let o = edptune(&["calibrate", "--measurements", &data, "--models-out", models.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("# fitted=4 skipped=1 excluded=0"), "{out}");
    assert!(out.contains("skipped dev/lonely/forward/1gpu"), "{out}");

    let o = edptune(&[
        "predict", "--models", models.to_str().unwrap(), "--device", "dev", "--network", "net", "--batch", "128,1000",
    ]);
    assert!(o.status.success());
    let r = rows(&stdout(&o));
    assert_eq!(r[1], ["dev", "net", "forward", "1", "128", "0.9", "72", "false"]);
    assert_eq!(r[2][7], "true");
    assert_eq!(r[3], ["dev", "net", "backward", "1", "128", "2", "160", "false"]);

    let o = edptune(&[
        "predict", "--models", models.to_str().unwrap(), "--device", "dev", "--network", "lonely", "--batch", "64",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rank_bundled_pascal_picks_single_gpu_256_for_resnet_gait() {
    let o = edptune(&["rank", "--metric", "edp", "--device", "pascal", "--bundled"]);
    assert!(o.status.success());
    let r = rows(&stdout(&o));
    let first = r.iter().find(|r| r[0] == "resnet_gait" && r[1] == "1").unwrap();
    assert_eq!(first[2..5], ["1xtitan_x_pascal", "1", "256"]);
    let infeasible = r.iter().find(|r| r[0] == "resnet_im" && r[13] == "false").unwrap();
    assert_eq!(infeasible[2..5], ["1xtitan_x_pascal", "1", "256"]);
}

#[test]
fn rank_nothing_feasible_exit_3() {
    let dir = TempDir::new().unwrap();
    let data = write(
        &dir,
        "m.csv",
        "device,network,step,gpus,batch,seconds_per_batch,joules_per_batch
titan_x_pascal,resnet_im,forward,1,256,0.2,30
titan_x_pascal,resnet_im,backward,1,256,0.4,60
",
    );
    let o = edptune(&["rank", "--measurements", &data, "--set", "pascal:1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("needs 18.50 GiB"));
}

#[test]
fn rank_missing_plan_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "m.csv", LINEAR);
    let o = edptune(&["rank", "--measurements", &data, "--network", "net"]);
    assert_eq!(o.status.code(), Some(2));
    let o = edptune(&["rank", "--measurements", &data, "--network", "net", "--dataset-samples", "6400", "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&stdout(&o));
    // B=64: 200 iterations of 1.5 s
    let row = r.iter().find(|r| r[2] == "1xdev" && r[4] == "64").unwrap();
    assert_eq!(row[5], "0.3");
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rank.csv");
    let args = ["rank", "--bundled", "--metric", "energy"];
    let a = edptune(&args);
    let b = edptune(&args);
    assert_eq!(a.stdout, b.stdout);
    let mut with_file = args.to_vec();
    with_file.extend(["--output", out.to_str().unwrap()]);
    assert!(edptune(&with_file).status.success());
    assert_eq!(fs::read(Path::new(&out)).unwrap(), a.stdout);
}

#[test]
fn table_format_aligns_columns() {
    let o = edptune(&["analyze", "--builtin", "caffenet", "--format", "table"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("layer"));
    assert!(lines.next().unwrap().starts_with("-----"));
}

#[test]
fn recommend_bundled() {
    let o = edptune(&["recommend", "--bundled", "--device", "pascal", "--network", "resnet_gait", "--network", "resnet_im"]);
    assert!(o.status.success());
    let r = rows(&stdout(&o));
    assert_eq!(r[1][..5], ["resnet_gait", "small", "residual", "64", "64"]);
    assert_eq!(r[2][..5], ["resnet_im", "large", "residual", "256", "256"]);
}
