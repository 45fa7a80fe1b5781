//! End-to-end runs of the `gcr` binary on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcr_cli::output::{read_log, read_rows, ResultRow};
use gcr_cli::ExperimentConfig;

fn tiny(ablation: &str, episodes: u64) -> String {
    let synthesis = if ablation.contains("S1") || ablation == "FULL" {
        "[synthesis]\nk_t = 6\naugmenters = [\"feature_jitter\"]\njitter_std = 0.5\n"
    } else {
        "[synthesis]\nk_t = 6\n"
    };
    format!(
        r#"seed = 3

[dataset]
source = "synthetic"
n_few = 2

[dataset.synthetic]
n_base = 3
n_novel = 2
dim = 4
samples_per_base = 12
test_per_class = 4
class_separation = 3.0

[model]
extractor = {{ kind = "mlp", hidden = 4 }}
embedding = {{ kind = "mlp", width = 8 }}

[pretrain]
epochs = 2
batch_size = 8

[training]
n_train = 3
n_q = 2
ablation = "{ablation}"
total_episodes = {episodes}
checkpoint_every = 10
eval_every = 10

{synthesis}
[eval]
n_test = 3
n_q_test = 2
episodes = 10
classes = "all"

[ablate]
variants = ["B", "FULL"]

[extend]
synthetic_classes = 1
episodes = 20
"#
    )
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn gcr(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gcr"))
            .args(args)
            .arg("--config")
            .arg(self.path("cfg.toml"))
            .env_remove("GCR_DATASET_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.gcr(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

#[test]
fn unknown_keys_are_configuration_errors() {
    let run = Run::new(&tiny("FULL", 5).replace("n_q = 2", "n_q = 2\nn_querry = 3"));
    let out = run.gcr(&["train", "--out", run.path("out").to_str().unwrap()]);
    assert_eq!(code(&out), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_querry"));
    assert!(!run.path("out").exists());
}

#[test]
fn bad_command_lines_exit_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_gcr")).args(["train"]).output().unwrap();
    assert_eq!(code(&out), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_gcr")).args(["fly", "--config", "x"]).output().unwrap();
    assert_eq!(code(&out), Some(2));
}

#[test]
fn missing_dataset_root_fails_before_any_output() {
    let cfg = "seed = 0\n[dataset]\nsource = \"omniglot\"\nroot = \"nowhere\"\nn_few = 1\n[training]\nn_train = 5\nn_q = 5\nablation = \"B\"\ntotal_episodes = 1\n";
    let run = Run::new(cfg);
    let out = run.gcr(&["train", "--out", run.path("out").to_str().unwrap()]);
    assert_eq!(code(&out), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.path("out").exists());
}

#[test]
fn pretraining_is_reproducible() {
    let run = Run::new(&tiny("FULL", 5));
    let a = run.ok(&["pretrain", "--out", run.path("a").to_str().unwrap()]);
    let b = run.ok(&["pretrain", "--out", run.path("b").to_str().unwrap()]);
    let loss = |s: &str| s.lines().find(|l| l.contains("final loss")).unwrap().to_owned();
    assert_eq!(loss(&a), loss(&b));
    for f in
        ["pretrain_log.csv", "resolved_config.toml", "checkpoints/pretrain.safetensors", "checkpoints/pretrain.safetensors.manifest.json"]
    {
        assert!(run.path("a").join(f).exists(), "{f}");
    }
}

#[test]
fn training_writes_logs_checkpoints_results_and_plots() {
    let run = Run::new(&tiny("FULL", 20));
    run.ok(&["train", "--out", run.path("out").to_str().unwrap()]);
    let out = run.path("out");
    let log = read_log(&out.join("train_log.csv")).unwrap();
    assert_eq!(log.iter().map(|r| r.episode).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    assert!(log.iter().all(|r| r.l_total.is_finite() && (r.l_total - r.l_reg - r.l_fsl).abs() < 1e-9));
    for f in [
        "checkpoints/episode_0000010.safetensors",
        "checkpoints/episode_0000020.safetensors",
        "checkpoints/final.safetensors",
        "loss_curve.svg",
        "accuracy_vs_episode.svg",
        "accuracy_by_episode.csv",
        "resolved_config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let rows: Vec<ResultRow> = read_rows(&out.join("results.csv")).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["standard", "generalized"]);
    assert!(rows[0].mean_acc.is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert!(rows[1].acc_n.is_some() && rows[1].mean_acc.is_none());
    // the resolved config is a complete, loadable configuration
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&resolved).unwrap().training.n_s, Some(2));
}

#[test]
fn every_ablation_label_trains() {
    for label in ["B", "B+S1", "B+S1+S2", "B+R", "B+S1+R", "FULL"] {
        let run = Run::new(&tiny(label, 3));
        run.ok(&["train", "--out", run.path("out").to_str().unwrap()]);
        assert!(run.path("out/checkpoints/final.safetensors").exists(), "{label}");
    }
}

#[test]
fn resuming_reproduces_the_loss_trajectory() {
    let run = Run::new(&tiny("FULL", 20));
    let straight = run.path("straight");
    run.ok(&["train", "--out", straight.to_str().unwrap()]);
    let mid = straight.join("checkpoints/episode_0000010.safetensors");
    let resumed = run.path("resumed");
    let stdout = run.ok(&["train", "--checkpoint", mid.to_str().unwrap(), "--out", resumed.to_str().unwrap()]);
    assert!(stdout.contains("from episode 10"));
    let strip = |p: &Path| -> Vec<(u64, u64, u64, u64)> {
        read_log(&p.join("train_log.csv"))
            .unwrap()
            .into_iter()
            .filter(|r| r.episode >= 10)
            .map(|r| (r.episode, r.l_reg.to_bits(), r.l_fsl.to_bits(), r.lr.to_bits()))
            .collect()
    };
    assert_eq!(strip(&straight), strip(&resumed));
    // metadata key order inside the file is not fixed, so compare contents
    let state = |p: &Path| gcr_core::checkpoint::load_state(&p.join("checkpoints/final.safetensors")).unwrap();
    assert_eq!(state(&straight), state(&resumed));
}

#[test]
fn eval_reports_both_settings_for_a_checkpoint() {
    let run = Run::new(&tiny("B+R", 10));
    run.ok(&["train", "--out", run.path("t").to_str().unwrap()]);
    let ckpt = run.path("t/checkpoints/final.safetensors");
    run.ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", run.path("e").to_str().unwrap()]);
    let rows: Vec<ResultRow> = read_rows(&run.path("e/results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.checkpoint_id.ends_with("@10")));
    assert_eq!(
        rows,
        read_rows::<ResultRow>(&run.path("t/results.csv"))
            .unwrap()
            .into_iter()
            .map(|r| ResultRow { checkpoint_id: rows[0].checkpoint_id.clone(), ..r })
            .collect::<Vec<_>>()
    );
    assert!(run.path("e/eval_running_mean.svg").exists());

    // eval needs a training checkpoint, not a pretrained extractor
    run.ok(&["pretrain", "--out", run.path("p").to_str().unwrap()]);
    let out = run.gcr(&["eval", "--checkpoint", run.path("p/checkpoints/pretrain.safetensors").to_str().unwrap()]);
    assert_eq!(code(&out), Some(2));
    let out = run.gcr(&["eval", "--checkpoint", run.path("absent.safetensors").to_str().unwrap()]);
    assert_eq!(code(&out), Some(2));
}

#[test]
fn ablate_trains_each_variant_and_draws_bars() {
    let run = Run::new(&tiny("FULL", 5));
    run.ok(&["ablate", "--out", run.path("a").to_str().unwrap()]);
    let rows: Vec<ResultRow> = read_rows(&run.path("a/results.csv")).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert!(settings.contains(&"standard:B") && settings.contains(&"standard:FULL"), "{settings:?}");
    assert!(run.path("a/ablation_bars.svg").exists());
    assert!(run.path("a/ablate/B/checkpoints/final.safetensors").exists());
}

#[test]
fn extend_leaves_the_old_model_untouched() {
    let run = Run::new(&tiny("FULL", 10));
    run.ok(&["train", "--out", run.path("t").to_str().unwrap()]);
    let ckpt = run.path("t/checkpoints/final.safetensors");
    let stdout = run.ok(&["extend", "--checkpoint", ckpt.to_str().unwrap(), "--out", run.path("x").to_str().unwrap()]);
    let sum = |tag: &str| stdout.lines().find(|l| l.contains(tag)).unwrap().rsplit(' ').next().unwrap().to_owned();
    assert_eq!(sum("checksum before"), sum("checksum after"));
    assert_eq!(sum("checksum before").len(), 64);
    assert!(stdout.contains("acc_new"));
    assert!(run.path("x/checkpoints/extended.safetensors").exists());
    let rows: Vec<ResultRow> = read_rows(&run.path("x/results.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["generalized", "generalized-extended"]);
}

fn write_png_dataset(root: &Path, classes: &[(&str, &str)]) {
    let mut manifest = String::new();
    for (k, (name, part)) in classes.iter().enumerate() {
        manifest.push_str(&format!("{name}\t{part}\t{}\n", if *part == "base" { "train" } else { "test" }));
        std::fs::create_dir_all(root.join(name)).unwrap();
        for i in 0..4u32 {
            let img = image::ImageBuffer::from_fn(28, 28, |x, y| {
                image::Luma([if (x + y * (k as u32 + 1) + i).is_multiple_of(5) { 255u8 } else { 0 }])
            });
            img.save(root.join(name).join(format!("{i}.png"))).unwrap();
        }
    }
    std::fs::write(root.join("split.txt"), manifest).unwrap();
}

#[test]
fn extending_with_an_existing_class_is_a_contract_error() {
    let run = Run::new("");
    let data = run.path("data");
    write_png_dataset(&data, &[("a", "base"), ("b", "base"), ("c", "novel")]);
    let extra = run.path("extra");
    write_png_dataset(&extra, &[("c", "novel")]);
    let cfg = format!(
        "seed = 1\n[dataset]\nsource = \"omniglot\"\nroot = \"data\"\nn_few = 1\n\
         [model]\nextractor = {{ kind = \"conv4\", filters = 2 }}\nembedding = {{ kind = \"mlp\", width = 8 }}\n\
         [pretrain]\nepochs = 1\n[training]\nn_train = 3\nn_q = 2\nablation = \"B+R\"\ntotal_episodes = 2\n\
         [eval]\nstandard = false\n[extend]\nroot = \"{}\"\nepisodes = 2\n",
        extra.display()
    );
    std::fs::write(run.path("cfg.toml"), cfg).unwrap();
    run.ok(&["train", "--out", run.path("t").to_str().unwrap()]);
    let ckpt = run.path("t/checkpoints/final.safetensors");
    let out = run.gcr(&["extend", "--checkpoint", ckpt.to_str().unwrap(), "--out", run.path("x").to_str().unwrap()]);
    assert_eq!(code(&out), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c@rot0"));
    assert!(!run.path("x").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            // image datasets are not shipped; resolve against an empty directory
            let root = tempfile::tempdir().unwrap();
            cfg.resolve(Some(root.path().to_owned()), &dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
