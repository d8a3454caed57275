use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use smoe_core::heat::Preset;
use smoe_core::train::{perfect_init, Model, TrainConfig};
use smoe_core::Rng;

fn smoe(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoe"))
        .args(args)
        .env("SMOE_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.smhd");
    let b = dir.path().join("b.smhd");
    let out = ok(smoe(
        &["gen-data", "--seed", "5", "--out", s(&a)],
        dir.path(),
    ));
    assert!(out.contains("10000 pairs"), "{out}");
    assert!(out.contains("diffusivity 0.25"), "{out}");
    ok(smoe(
        &["gen-data", "--seed", "5", "--out", s(&b)],
        dir.path(),
    ));
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
    let other = ok(smoe(
        &["gen-data", "--seed", "6", "--out", s(&b)],
        dir.path(),
    ));
    assert_ne!(other.lines().nth(1), out.lines().nth(1));
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.smhd");
    ok(smoe(
        &["gen-data", "--seed", "1", "--out", s(&data)],
        dir.path(),
    ));
    let run = dir.path().join("run");
    let out = ok(smoe(
        &[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--set",
            "max_epochs=1",
            "--set",
            "seed=2",
        ],
        dir.path(),
    ));
    assert!(out.contains("epoch   1"), "{out}");
    let test_pct = value(&out, "test_pct");

    let ck = run.join("model.smck");
    let eval = ok(smoe(
        &["eval", "--checkpoint", s(&ck), "--data", s(&data)],
        dir.path(),
    ));
    assert_eq!(value(&eval, "pct_within_1"), test_pct);

    let pgm = run.join("routing.pgm");
    ok(smoe(
        &["export-routing", "--checkpoint", s(&ck), "--out", s(&pgm)],
        dir.path(),
    ));
    assert!(std::fs::read(&pgm)
        .unwrap()
        .starts_with(b"P5\n32 32\n255\n"));
    let experts = run.join("experts");
    ok(smoe(
        &[
            "export-experts",
            "--checkpoint",
            s(&ck),
            "--out",
            s(&experts),
        ],
        dir.path(),
    ));
    assert!(experts.join("expert_2.csv").exists());

    let config = run.join("config.txt");
    let again = dir.path().join("again");
    let out2 = ok(smoe(
        &[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&again),
            "--quiet",
        ],
        dir.path(),
    ));
    assert_eq!(value(&out2, "test_pct"), test_pct);
    assert!(!out2.contains("epoch   1"));
}

#[test]
fn default_output_directory_uses_the_root() {
    let dir = tempfile::tempdir().unwrap();
    ok(smoe(
        &[
            "train",
            "--set",
            "max_epochs=1",
            "--set",
            "model=lcn",
            "--set",
            "seed=4",
            "--quiet",
        ],
        dir.path(),
    ));
    assert!(dir.path().join("lcn-seed4").join("report.txt").exists());
}

#[test]
fn eval_separates_perfect_and_random_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = Preset::Reduced.generate(3).unwrap();
    let data_path = dir.path().join("d.smhd");
    smoe::dataset::write(&data_path, &data).unwrap();
    let cfg = TrainConfig::default();
    let random = Model::build(&cfg, data.region_map(), &mut Rng::new(1)).unwrap();
    let mut perfect = Model::build(&cfg, data.region_map(), &mut Rng::new(1)).unwrap();
    if let Model::Smoe(l) = &mut perfect {
        perfect_init(l, data.region_map()).unwrap();
    }
    for (name, m, check) in [
        ("perfect", perfect, (|p: f64| p == 100.0) as fn(f64) -> bool),
        ("random", random, |p: f64| p < 50.0),
    ] {
        let ck = dir.path().join(format!("{name}.smck"));
        smoe::checkpoint::write(&ck, &m, &BTreeMap::new()).unwrap();
        let out = ok(smoe(
            &["eval", "--checkpoint", s(&ck), "--data", s(&data_path)],
            dir.path(),
        ));
        let pct = value(&out, "pct_within_1");
        assert!(check(pct), "{name}: {pct}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| smoe(args, dir.path()).status.code();

    assert_eq!(code(&["train", "--set", "no_such_key=1"]), Some(2));
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "q = 3\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg)]), Some(2));

    let data = dir.path().join("d.smhd");
    ok(smoe(
        &["gen-data", "--seed", "2", "--out", s(&data)],
        dir.path(),
    ));
    let mut bytes = std::fs::read(&data).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let broken = dir.path().join("broken.smhd");
    std::fs::write(&broken, bytes).unwrap();
    let o = smoe(&["train", "--data", s(&broken)], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    let run = dir.path().join("blowup");
    let o = smoe(
        &[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--set",
            "lr=1e30",
            "--set",
            "max_epochs=3",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    assert_eq!(
        code(&["eval", "--checkpoint", s(&data), "--data", s(&data)]),
        Some(3)
    );
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&dir.path().join("none")),
            "--data",
            s(&data)
        ]),
        Some(1)
    );
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(smoe(&["gradcheck", "--seed", "3"], dir.path()));
    assert!(out.contains("smoe.dkernels"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}
