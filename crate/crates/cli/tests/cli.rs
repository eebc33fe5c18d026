//! End-to-end runs of the `freqlens` binary on a tiny synthetic setup.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqlens::attacks::{self, AttackSpec};
use freqlens::cka::{self, LayerFilter};
use freqlens::data::{Dataset, SynthConfig};
use freqlens::export::Table;
use freqlens::nn::checkpoint::{self, CheckpointInfo};
use freqlens::nn::{build_resnet, Network, ResNetConfig, STEM};
use freqlens::spectral;

const CONFIG: &str = r#"
seed = 4

[model]
depth_blocks = 1

[synth]
size = 8
train_per_class = 16
test_per_class = 8

[train]
epochs = 2
batch_size = 16
monitor_size = 8
crop_pad = 1
lr_decay = []

[train.inner_attack]
kind = "pgd"
steps = 2

[eval]
attacks = ["natural", "fgsm", "bim-3"]
size = 0
probe_size = 16
"#;

fn synth() -> SynthConfig {
    SynthConfig {
        seed: 0,
        size: 8,
        train_per_class: 16,
        test_per_class: 8,
        ..SynthConfig::default()
    }
}

fn data() -> Dataset {
    synth().generate().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a subcommand with the test config, writing into `out`.
    fn run(&self, sub: &str, out: &str, args: &[&str]) -> Output {
        let config = self.config();
        let out = self.out(out);
        let mut full = vec![sub, "-c", config.to_str().unwrap(), "-o", out.to_str().unwrap()];
        full.extend_from_slice(args);
        freqlens(&full)
    }

    /// Trains into `out` and returns the checkpoint path.
    fn train(&self, out: &str) -> PathBuf {
        let o = self.run("train", out, &[]);
        assert_success(&o);
        find(&self.out(out), "model-", "fql")
    }

    /// Writes a freshly initialized network as a checkpoint.
    fn save(&self, name: &str, net: &Network) -> PathBuf {
        let p = self.out(name);
        checkpoint::save(&p, net, &CheckpointInfo::default()).unwrap();
        p
    }
}

fn freqlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqlens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn assert_success(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single file in `dir` named `<prefix><hash>.<ext>`.
fn find(dir: &Path, prefix: &str, ext: &str) -> PathBuf {
    let hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            let Some(rest) = name.strip_prefix(prefix) else {
                return false;
            };
            rest.strip_suffix(&format!(".{ext}"))
                .is_some_and(|h| h.len() == 16 && h.chars().all(|c| c.is_ascii_hexdigit()))
        })
        .collect();
    assert_eq!(hits.len(), 1, "{prefix}*.{ext} in {}: {hits:?}", dir.display());
    hits.into_iter().next().unwrap()
}

fn table(path: &Path) -> Table {
    Table::from_csv(&std::fs::read(path).unwrap()).unwrap()
}

fn floats(t: &Table, col: &str) -> Vec<f64> {
    let c = t
        .column(col)
        .unwrap_or_else(|| panic!("no column {col} in {:?}", t.header));
    t.rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

fn grid(t: &Table) -> Vec<f64> {
    t.rows.iter().flatten().map(|v| v.parse().unwrap()).collect()
}

fn micro(seed: u64) -> Network {
    build_resnet(
        &ResNetConfig {
            depth_blocks: 1,
            num_classes: 2,
            ..ResNetConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn train_writes_checkpoint_and_two_row_report() {
    let env = Env::new();
    let ck = env.train("run");
    let dir = env.out("run");
    let metrics = table(&find(&dir, "metrics-", "csv"));
    assert_eq!(metrics.rows.len(), 2);
    assert!(dir
        .join(format!("{}.meta", ck.file_name().unwrap().to_str().unwrap()))
        .exists());
    let ratio = table(&find(&dir, "ratio-", "csv"));
    assert_eq!(ratio.rows.len(), 3, "epoch 0 plus one row per epoch");
    let (net, info) = checkpoint::load(&ck).unwrap();
    assert_eq!(info.epoch, 2);
    assert_eq!(info.seed, 4);
    assert_eq!(net.num_classes, 2);
    let hash = ck
        .file_stem()
        .unwrap()
        .to_str()
        .unwrap()
        .strip_prefix("model-")
        .unwrap();
    assert_eq!(info.config_hash, hash);
}

#[test]
fn replaying_a_config_is_bitwise_identical() {
    let env = Env::new();
    let a = env.train("a");
    let b = env.train("b");
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ma = find(&env.out("a"), "metrics-", "csv");
    let mb = find(&env.out("b"), "metrics-", "csv");
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
}

#[test]
fn bad_configs_exit_1_with_a_line_number() {
    let env = Env::new();
    std::fs::write(env.config(), format!("{CONFIG}\nbogus = 1\n")).unwrap();
    let o = env.run("train", "x", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let env = Env::new();
    let o = env.run("train", "x", &["--set", "train.batch_size=0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = env.run("eval", "x", &["--checkpoint", "missing.fql"]);
    assert_eq!(o.status.code(), Some(1));
    let o = freqlens(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_cap_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_freqlens"))
        .args(["inspect-checkpoint", "x.fql"])
        .env("FREQLENS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FREQLENS_THREADS"));
}

#[test]
fn corrupt_checkpoints_exit_2() {
    let env = Env::new();
    let good = env.save("good.fql", &micro(0));
    let mut bytes = std::fs::read(&good).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = env.out("bad.fql");
    std::fs::write(&bad, &bytes).unwrap();
    let o = env.run("eval", "x", &["--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    std::fs::write(&bad, b"NOPE and then some").unwrap();
    let o = freqlens(&["inspect-checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn inspect_prints_metadata() {
    let env = Env::new();
    let ck = env.save("m.fql", &micro(0));
    let o = freqlens(&["inspect-checkpoint", ck.to_str().unwrap(), "--json"]);
    assert_success(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["num_classes"], 2);
    let o = freqlens(&["inspect-checkpoint", ck.to_str().unwrap()]);
    assert_success(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("parameters"));
}

#[test]
fn eval_matches_a_per_example_loop() {
    let env = Env::new();
    let net = micro(7);
    let ck = env.save("m.fql", &net);
    let o = env.run(
        "eval",
        "e",
        &["--checkpoint", ck.to_str().unwrap(), "--set", "synth.seed=0"],
    );
    assert_success(&o);
    let t = table(&find(&env.out("e"), "eval-", "csv"));
    let got = floats(&t, "accuracy");
    let test = data().test;
    let specs = [None, Some(AttackSpec::fgsm(8.0 / 255.0)), Some(AttackSpec::bim(3))];
    for (spec, acc) in specs.iter().zip(&got) {
        let mut correct = 0;
        for i in 0..test.len() {
            let one = test.select(&[i]);
            let x = match spec {
                Some(s) => attacks::attack(&net, &one, s, 4).unwrap().adv,
                None => one.clone(),
            };
            correct += (net.predict(&x.images).unwrap()[0] == one.labels[0]) as usize;
        }
        assert_eq!(*acc, correct as f64 / test.len() as f64, "{spec:?}");
    }
}

#[test]
fn gn_with_zero_sigma_equals_natural() {
    let env = Env::new();
    let ck = env.save("m.fql", &micro(1));
    let o = env.run(
        "eval",
        "e",
        &[
            "--checkpoint",
            ck.to_str().unwrap(),
            "--attacks",
            "natural,gn",
            "--set",
            "eval.sigma=0.0",
        ],
    );
    assert_success(&o);
    let acc = floats(&table(&find(&env.out("e"), "eval-", "csv")), "accuracy");
    assert_eq!(acc[0], acc[1]);
}

#[test]
fn full_passband_lpf_matches_no_filter() {
    let env = Env::new();
    let ck = env.train("t");
    let c = ck.to_str().unwrap();
    assert_success(&env.run("eval", "plain", &["--checkpoint", c]));
    assert_success(&env.run("eval", "lpf", &["--checkpoint", c, "--lpf-degree", "8"]));
    let a = floats(&table(&find(&env.out("plain"), "eval-", "csv")), "accuracy");
    let b = floats(&table(&find(&env.out("lpf"), "eval-", "csv")), "accuracy");
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 0.001, "{a:?} vs {b:?}");
    }
    let o = env.run("eval", "bad", &["--checkpoint", c, "--lpf-degree", "9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_value_sweep_equals_eval() {
    let env = Env::new();
    let ck = env.train("t");
    let c = ck.to_str().unwrap();
    assert_success(&env.run("eval", "e", &["--checkpoint", c, "--lpf-degree", "4"]));
    assert_success(&env.run(
        "sweep",
        "s",
        &["--checkpoint", c, "--axis", "lpf_degree", "--values", "4"],
    ));
    let e = floats(&table(&find(&env.out("e"), "eval-", "csv")), "accuracy");
    let s = table(&find(&env.out("s"), "sweep-lpf_degree-", "csv"));
    assert_eq!(s.header[0], "LPF");
    assert_eq!(s.rows.len(), 1);
    assert_eq!(s.rows[0].last().unwrap(), "ok");
    let row: Vec<f64> = s.rows[0][1..s.rows[0].len() - 1]
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row, e);
}

#[test]
fn partial_sweep_failure_exits_3() {
    let env = Env::new();
    let o = env.run(
        "sweep",
        "s",
        &["--axis", "batch_size", "--values", "16,0", "--set", "train.epochs=1"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let t = table(&find(&env.out("s"), "sweep-batch_size-", "csv"));
    assert_eq!(t.rows[0].last().unwrap(), "ok");
    assert!(t.rows[1].last().unwrap().starts_with("failed"));
    assert!(t.rows[1][1..t.rows[1].len() - 1].iter().all(String::is_empty));
}

#[test]
fn clean_against_clean_spectrum_diff_is_zero() {
    let env = Env::new();
    let o = env.run("spectra", "s", &["--mode", "input-diff", "--attack", "natural"]);
    assert_success(&o);
    let d = grid(&table(&find(&env.out("s"), "spectrum-diff-", "csv")));
    assert_eq!(d.len(), 64);
    assert!(d.iter().all(|&v| v == 0.0));
    find(&env.out("s"), "spectrum-diff-", "pgm");
    let o = env.run("spectra", "s2", &["--mode", "input-diff"]);
    assert_eq!(o.status.code(), Some(1), "input-diff without an attack");
}

#[test]
fn input_spectra_match_the_library() {
    let env = Env::new();
    let ck = env.save("m.fql", &micro(2));
    let o = env.run(
        "spectra",
        "s",
        &[
            "--mode",
            "input-diff",
            "--attack",
            "fgsm",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--set",
            "synth.seed=0",
        ],
    );
    assert_success(&o);
    let probe = data().test.take(16);
    let adv = attacks::attack(&micro(2), &probe, &AttackSpec::fgsm(8.0 / 255.0), 4)
        .unwrap()
        .adv;
    let norm = spectral::Normalization::Log1pMinMax;
    let want = spectral::spectrum_diff(&probe, &adv, spectral::DiffMode::OfDifference, norm).unwrap();
    let got = grid(&table(&find(&env.out("s"), "spectrum-diff-", "csv")));
    assert_eq!(got, want.values);
    let want = spectral::mean_spectrum(&probe, norm).unwrap();
    assert_eq!(
        grid(&table(&find(&env.out("s"), "spectrum-clean-", "csv"))),
        want.values
    );
}

#[test]
fn kernel_maps_match_the_library() {
    let env = Env::new();
    let net = micro(3);
    let ck = env.save("m.fql", &net);
    assert_success(&env.run(
        "spectra",
        "k",
        &["--mode", "kernel", "--checkpoint", ck.to_str().unwrap()],
    ));
    let dir = env.out("k");
    let hf = table(&find(&dir, "kernel-hf-", "csv"));
    let layers: Vec<&str> = hf.rows.iter().map(|r| r[0].as_str()).collect();
    assert!(!layers.contains(&"head"), "{layers:?}");
    assert_eq!(layers[0], STEM);
    for (row, frac) in hf.rows.iter().zip(floats(&hf, "hf_energy_fraction")) {
        let ks = spectral::kernel_spectrum(&net.effective_weight(&row[0]).unwrap()).unwrap();
        let got = grid(&table(&find(&dir, &format!("kernel-{}-", row[0]), "csv")));
        assert_eq!(got, ks.values, "{}", row[0]);
        assert_eq!(frac, spectral::mean_hf_energy(&ks).unwrap());
    }
}

#[test]
fn constant_kernels_have_dc_only_maps() {
    let env = Env::new();
    let mut net = micro(0);
    let w = &mut net.param_mut("stem.weight").unwrap().tensor;
    w.data_mut().iter_mut().for_each(|v| *v = 0.25);
    let ck = env.save("flat.fql", &net);
    assert_success(&env.run(
        "spectra",
        "k",
        &["--mode", "kernel", "--checkpoint", ck.to_str().unwrap()],
    ));
    let t = table(&find(&env.out("k"), "kernel-stem-", "csv"));
    let cols = t.header.len();
    for row in &t.rows {
        let v: Vec<f64> = row.iter().map(|c| c.parse().unwrap()).collect();
        assert!((v[0] - 0.25 * cols as f64).abs() < 1e-4);
        assert!(v[1..].iter().all(|x| x.abs() < 1e-5), "{v:?}");
    }
}

#[test]
fn activation_ratio_reads_each_checkpoint() {
    let env = Env::new();
    let a = env.save("a.fql", &micro(0));
    let b = env.save("b.fql", &micro(1));
    let o = env.run(
        "spectra",
        "r",
        &[
            "--mode",
            "activation-ratio",
            "--checkpoint",
            a.to_str().unwrap(),
            "--checkpoint",
            b.to_str().unwrap(),
        ],
    );
    assert_success(&o);
    let t = table(&find(&env.out("r"), "activation-ratio-", "csv"));
    assert_eq!(t.rows.len(), 2);
    let probe = freqlens::data::probe_batch(&data().train, 16);
    let want = freqlens::train::stem_ratio(&micro(1), &probe).unwrap();
    assert_eq!(floats(&t, "R")[1], want);
}

#[test]
fn cka_csv_matches_a_recomputation() {
    let env = Env::new();
    let net = micro(5);
    let ck = env.save("m.fql", &net);
    assert_success(&env.run(
        "cka",
        "c",
        &["--checkpoint", ck.to_str().unwrap(), "--set", "synth.seed=0"],
    ));
    let dir = env.out("c");
    let t = table(&find(&dir, "cka-", "csv"));
    let m = cka::cka_matrix(&net, &data().test.take(16), &LayerFilter::default()).unwrap();
    assert_eq!(t.rows.len(), m.len());
    for (i, row) in t.rows.iter().enumerate() {
        assert_eq!(row[0], m.layers[i]);
        for (j, v) in row[1..].iter().enumerate() {
            assert!((v.parse::<f64>().unwrap() - m.at(i, j)).abs() < 1e-6);
        }
    }
    let s = floats(&table(&find(&dir, "cka-summary-", "csv")), "shallow_deep_similarity");
    assert!((s[0] - cka::shallow_deep_similarity(&m, 0.5).unwrap()).abs() < 1e-12);
    let pgm = std::fs::read(find(&dir, "cka-", "pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));

    let o = env.run(
        "cka",
        "c2",
        &["--checkpoint", ck.to_str().unwrap(), "--layers", "stem,nope"],
    );
    assert_eq!(o.status.code(), Some(1));
}
