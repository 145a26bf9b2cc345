use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tabdiff::checkpoint;
use tabdiff::cli::parse_condition_flags;
use tabdiff::export::{parse_histogram_tsv, parse_report_fields};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tabdiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// A three-column table with a few holes and a trained tiny model.
    fn trained() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut csv = String::from("income,rooms,value\n");
        for i in 0..240 {
            let inc = (i % 17) as f64 * 0.5 + 1.0;
            let rooms = if i % 11 == 0 { "NaN".to_string() } else { format!("{}", 3 + i % 5) };
            let value = if i % 13 == 0 { String::new() } else { format!("{}", inc * 0.4 + (i % 3) as f64 * 0.1) };
            csv.push_str(&format!("{inc},{rooms},{value}\n"));
        }
        std::fs::write(root.join("data.csv"), csv).unwrap();
        std::fs::write(
            root.join("run.cfg"),
            "# tiny run\npreset = housing\ncontext_length = 4\nepochs = 3\ncycle_length_epochs = 3\nbatch_size = 32\ntest_fraction = 0.2\n",
        )
        .unwrap();
        let f = Self { _dir: dir, root };
        let out = run(&[
            "train", "--config", s(&f.path("run.cfg")), "--dataset", s(&f.path("data.csv")), "--checkpoint",
            s(&f.path("m.ckpt")), "--seed", "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["density", "--checkpoint", "x", "--request", "y", "--nope"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_2() {
    let out = run(&["density", "--checkpoint", "/nonexistent/m.ckpt", "--request", "y", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn training_log_has_one_line_per_epoch() {
    let f = Fixture::trained();
    let first = std::fs::read(f.path("m.ckpt")).unwrap();
    let out = run(&[
        "train", "--config", s(&f.path("run.cfg")), "--dataset", s(&f.path("data.csv")), "--checkpoint",
        s(&f.path("m.ckpt")), "--seed", "5",
    ]);
    let log = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tlr\tmean_loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 3));
    assert!(std::fs::read(f.path("m.ckpt")).unwrap() == first, "retraining changed the checkpoint");
}

#[test]
fn omitted_seed_is_logged() {
    let f = Fixture::trained();
    let out = run(&["density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--n", "8", "--out", s(&f.path("h.tsv"))]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let seed: u64 = stderr.trim().strip_prefix("seed: ").unwrap().parse().unwrap();
    let again = run(&[
        "density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--n", "8", "--out",
        s(&f.path("h2.tsv")), "--seed", &seed.to_string(),
    ]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(f.path("h.tsv")).unwrap(), std::fs::read(f.path("h2.tsv")).unwrap());
}

#[test]
fn density_export_integrates_to_one() {
    let f = Fixture::trained();
    let out = run(&[
        "density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--cond", "income=8.0", "--n", "512",
        "--bins", "20", "--out", s(&f.path("d.tsv")), "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = parse_histogram_tsv(&std::fs::read_to_string(f.path("d.tsv")).unwrap()).unwrap();
    assert_eq!(h.densities.len(), 20);
    assert!((h.integral() - 1.0).abs() < 1e-9);
    let summary = String::from_utf8(out.stdout).unwrap();
    let fields = parse_report_fields(&summary);
    assert!(fields.iter().any(|(k, v)| k == "conditions" && v == "income=8.0"));
    assert!(fields.iter().any(|(k, _)| k == "robust_std"));
}

#[test]
fn explicit_range_is_honoured() {
    let f = Fixture::trained();
    let out = run(&[
        "density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--n", "256", "--bins", "4",
        "--range", "-10,10", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = parse_histogram_tsv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(h.edges, vec![-10.0, -5.0, 0.0, 5.0, 10.0]);
    let bad = run(&["density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--range", "3,1", "--seed", "1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn unknown_condition_lists_nearest_names() {
    let f = Fixture::trained();
    let out = run(&["density", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--cond", "incme=1", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown feature `incme`") && stderr.contains("nearest: income"), "{stderr}");
}

#[test]
fn condition_flags_parse_in_order() {
    let f = Fixture::trained();
    let ck = checkpoint::load(&f.path("m.ckpt")).unwrap();
    let reg = ck.model.registry();
    let got = parse_condition_flags(&["value=2.5".into(), "income = 8.0".into()], reg).unwrap();
    assert_eq!(got, vec![(reg.id("value").unwrap(), 2.5), (reg.id("income").unwrap(), 8.0)]);
    for bad in ["income", "income=abc", "income=1=2", "Bogus=1", "income=inf"] {
        let err = parse_condition_flags(&[bad.into()], reg).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{bad}");
    }
}

#[test]
fn joint_samples_have_one_column_per_request() {
    let f = Fixture::trained();
    let out = run(&[
        "sample-joint", "--checkpoint", s(&f.path("m.ckpt")), "--request", "income,value", "--request", "rooms",
        "--n", "25", "--seed", "2", "--threads", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "income\tvalue\trooms");
    assert_eq!(lines.len(), 26);
    let one = run(&[
        "sample-joint", "--checkpoint", s(&f.path("m.ckpt")), "--request", "income,value", "--request", "rooms",
        "--n", "25", "--seed", "2", "--threads", "1",
    ]);
    assert_eq!(String::from_utf8(one.stdout).unwrap(), text);
    let dup = run(&["sample-joint", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value,value", "--seed", "2"]);
    assert_eq!(dup.status.code(), Some(2));
}

#[test]
fn calibrate_reports_ks() {
    let f = Fixture::trained();
    let out = run(&[
        "calibrate", "--checkpoint", s(&f.path("m.ckpt")), "--trials", "40", "--n", "32", "--seed", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let fields = parse_report_fields(&text);
    for key in ["trials", "ks", "ks_critical_5pct", "central_mass", "over_concentrated"] {
        assert!(fields.iter().any(|(k, _)| k == key), "missing {key}");
    }
    let masses: f64 = text
        .split("\n\n")
        .nth(1)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((masses - 1.0).abs() < 1e-9);
}

#[test]
fn summarize_predicts_held_out_rows() {
    let f = Fixture::trained();
    let out = run(&[
        "summarize", "--checkpoint", s(&f.path("m.ckpt")), "--request", "value", "--trials", "5", "--n", "64",
        "--seed", "4", "--out", s(&f.path("s.tsv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(f.path("s.tsv")).unwrap();
    let fields = parse_report_fields(&text);
    assert!(fields.iter().any(|(k, v)| k == "rows" && v == "5"));
    let table = text.split("\n\n").nth(1).unwrap();
    assert_eq!(table.lines().next(), Some("row\ttruth\tmedian\trobust_std\tquantile"));
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn report_params_from_checkpoint_and_preset() {
    let f = Fixture::trained();
    let out = run(&["report-params", "--checkpoint", s(&f.path("m.ckpt"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let fields = parse_report_fields(&text);
    let get = |k: &str| fields.iter().find(|(key, _)| key == k).unwrap().1.clone();
    let total: usize = get("total").parse().unwrap();
    let per_tensor: usize = text
        .split("\n\n")
        .nth(1)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, per_tensor);
    let housing = run(&["report-params", "--preset", "housing"]);
    let fields = parse_report_fields(&String::from_utf8(housing.stdout).unwrap());
    let frac: f64 = fields.iter().find(|(k, _)| k == "head_fraction").unwrap().1.parse().unwrap();
    assert!((0.35..=0.65).contains(&frac), "{frac}");
    assert_eq!(run(&["report-params"]).status.code(), Some(1));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let f = Fixture::trained();
    let bytes = std::fs::read(f.path("m.ckpt")).unwrap();
    let ck = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::encode(&ck).unwrap(), bytes);
    assert_eq!(ck.epoch, 3);
    assert_eq!(ck.config.seed, 5);
    let mut truncated = bytes.clone();
    truncated.pop();
    assert!(checkpoint::decode(&truncated).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
}

#[test]
fn reloaded_checkpoint_gives_identical_inference() {
    let f = Fixture::trained();
    let ck = checkpoint::load(&f.path("m.ckpt")).unwrap();
    let copy = f.path("copy.ckpt");
    checkpoint::save(&ck, &copy).unwrap();
    let back = checkpoint::load(&copy).unwrap();
    assert_eq!(back, ck);
    let reg = ck.model.registry();
    let probe = [(reg.id("income").unwrap(), 4.0)];
    let a = tabdiff_core::eval::estimate_density(&ck.model, &probe, reg.id("value").unwrap(), 64, 1).unwrap();
    let b = tabdiff_core::eval::estimate_density(&back.model, &probe, reg.id("value").unwrap(), 64, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn commands_leave_the_dataset_untouched() {
    let f = Fixture::trained();
    let before = std::fs::read(f.path("data.csv")).unwrap();
    run(&["calibrate", "--checkpoint", s(&f.path("m.ckpt")), "--trials", "5", "--n", "8", "--seed", "1"]);
    run(&["summarize", "--checkpoint", s(&f.path("m.ckpt")), "--request", "income", "--trials", "2", "--n", "8", "--seed", "1"]);
    assert_eq!(std::fs::read(f.path("data.csv")).unwrap(), before);
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let f = Fixture::trained();
    std::fs::write(f.path("bad.cfg"), "epochz = 3\n").unwrap();
    let out = run(&["train", "--config", s(&f.path("bad.cfg")), "--dataset", s(&f.path("data.csv")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = run(&["train", "--dataset", s(&f.path("nope.csv")), "--seed", "1", "--checkpoint", s(&f.path("x.ckpt"))]);
    assert_eq!(missing.status.code(), Some(2));
}
