//! The five subcommands. Everything that can fail on bad input (config,
//! dataset, checkpoint, class-id collisions) is checked before the output
//! directory is touched.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gcr_core::checkpoint::{self, CheckpointInfo};
use gcr_core::data::{
    load_class_pool, make_generalized_split, make_synthetic_gaussian, ClassId, ClassPool, DatasetSplit, LoadOptions, Partition,
    SyntheticSpec,
};
use gcr_core::error::{Error, Result};
use gcr_core::evaluation::{evaluate_generalized, evaluate_standard, GeneralizedMetrics, ModelPredictor};
use gcr_core::exec::Exec;
use gcr_core::features::{pretrain_base_classifier, Extractor, PretrainReport};
use gcr_core::model::Model;
use gcr_core::optim::Sgd;
use gcr_core::rng;
use gcr_core::trainer::{extend_new_classes, train, Ablation, TrainState, TrainingConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Setting, Source, ROOT_ENV};
use crate::output::{self, LogRow, ProgressRow, ResultRow, TrainLog};
use crate::plots;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Train,
    Eval,
    Ablate,
    Extend,
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const RESULTS: &str = "results.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PROGRESS: &str = "accuracy_by_episode.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

/// A checkpoint given with `--checkpoint`.
enum Loaded {
    Extractor(Extractor),
    State(Box<TrainState>, CheckpointInfo),
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    exec: Exec,
    split: DatasetSplit,
}

pub fn run(inv: &Invocation) -> Result<()> {
    let base = inv.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let root_override = std::env::var_os(ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = ExperimentConfig::load(&inv.config)?.resolve(root_override, &base)?;
    let out = inv.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let exec = if cfg.parallel { Exec::Parallel } else { Exec::Sequential };

    let loaded = match &inv.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    match (inv.command, &loaded) {
        (Command::Eval | Command::Extend, None) => {
            return Err(Error::Config("this command needs --checkpoint <file> from a training run".into()));
        }
        (Command::Eval | Command::Extend, Some(Loaded::Extractor(_))) => {
            return Err(Error::Config("the checkpoint holds only a pretrained extractor; train first".into()));
        }
        (Command::Pretrain, Some(_)) => {
            return Err(Error::Config("pretrain does not take --checkpoint".into()));
        }
        (Command::Ablate, Some(Loaded::State(..))) => {
            return Err(Error::Config("ablate starts every variant from a pretrained extractor, not a training checkpoint".into()));
        }
        _ => {}
    }
    if cfg.extend.is_none() && inv.command == Command::Extend {
        return Err(Error::Config("extend needs an [extend] section".into()));
    }

    let split = load_split(&cfg, exec)?;
    if let Some(Loaded::State(state, _)) = &loaded {
        state.model.check_split(&split)?;
    }
    if let Some(Loaded::Extractor(e)) = &loaded {
        if e.input != split.profile.image_shape() {
            return Err(Error::Contract("the checkpoint's extractor expects a different input shape".into()));
        }
    }
    let new_split = match inv.command {
        Command::Extend => {
            let s = load_new_classes(&cfg, &split, exec)?;
            for c in &s.classes {
                if split.class_index(&c.id).is_some() {
                    return Err(Error::Contract(format!("new class `{}` already exists in the model", c.id)));
                }
            }
            Some(s)
        }
        _ => None,
    };

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join(RESOLVED_CONFIG);
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;

    let ctx = Ctx { cfg, out, exec, split };
    match inv.command {
        Command::Pretrain => pretrain(&ctx).map(|_| ()),
        Command::Train => cmd_train(&ctx, loaded),
        Command::Eval => cmd_eval(&ctx, loaded, inv.checkpoint.as_deref().unwrap_or(Path::new(""))),
        Command::Ablate => cmd_ablate(&ctx, loaded),
        Command::Extend => {
            let Some(Loaded::State(state, info)) = loaded else { unreachable!("checked above") };
            cmd_extend(&ctx, *state, info, new_split.expect("loaded above"), inv.checkpoint.as_deref().unwrap_or(Path::new("")))
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let manifest = checkpoint::read_manifest(path)?;
    if manifest.embedding.is_none() {
        Ok(Loaded::Extractor(checkpoint::load_extractor(path)?))
    } else {
        let (state, info) = checkpoint::load_state(path)?;
        Ok(Loaded::State(Box::new(state), info))
    }
}

/// The configured dataset with its train/test allocation.
pub fn load_split(cfg: &ExperimentConfig, exec: Exec) -> Result<DatasetSplit> {
    let d = &cfg.dataset;
    if let (Source::Synthetic, Some(s)) = (d.source, d.synthetic) {
        return make_synthetic_gaussian(&SyntheticSpec {
            n_base: s.n_base,
            n_novel: s.n_novel,
            dim: s.dim,
            samples_per_base: s.samples_per_base,
            n_few: d.n_few,
            test_per_class: s.test_per_class,
            class_separation: s.class_separation,
            seed: cfg.seed,
        });
    }
    let root = d.root.as_ref().ok_or_else(|| Error::Config("dataset.root is not set".into()))?;
    let opts = LoadOptions { include_validation: d.include_validation, exec };
    let pool = limit_classes(load_class_pool(root, cfg.profile(), opts)?, d.max_base_classes, d.max_novel_classes);
    match d.setting {
        Setting::Standard => pool.standard_split(d.n_few, cfg.seed),
        Setting::Generalized => {
            make_generalized_split(&pool, d.n_few, d.per_base_train.unwrap_or(0), d.per_class_test.unwrap_or(0), cfg.seed)
        }
    }
}

/// Keeps the first `max` source classes of each partition; the rotated
/// copies of a kept omniglot character are kept with it.
pub fn limit_classes(pool: ClassPool, max_base: Option<usize>, max_novel: Option<usize>) -> ClassPool {
    if max_base.is_none() && max_novel.is_none() {
        return pool;
    }
    let source = |id: &ClassId| id.as_str().split('@').next().unwrap_or_default().to_owned();
    let mut kept_names: Vec<(Partition, String)> = Vec::new();
    let mut keep = Vec::new();
    for (i, c) in pool.classes.iter().enumerate() {
        let name = source(&c.id);
        let limit = match c.partition {
            Partition::Base => max_base,
            Partition::Novel => max_novel,
        };
        let known = kept_names.iter().any(|(p, n)| *p == c.partition && *n == name);
        let count = kept_names.iter().filter(|(p, _)| *p == c.partition).count();
        if known || limit.is_none_or(|m| count < m) {
            if !known {
                kept_names.push((c.partition, name));
            }
            keep.push(i);
        }
    }
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for i in keep {
        let label = classes.len();
        classes.push(pool.classes[i].clone());
        samples.push(pool.samples[i].iter().map(|s| gcr_core::data::LabeledSample { label, ..s.clone() }).collect());
    }
    ClassPool { profile: pool.profile, classes, samples }
}

/// New classes for `extend`, labelled from zero, all novel.
pub fn load_new_classes(cfg: &ExperimentConfig, split: &DatasetSplit, exec: Exec) -> Result<DatasetSplit> {
    let x = cfg.extend.as_ref().expect("checked by the caller");
    let n_few = cfg.dataset.n_few;
    if let Some(k) = x.synthetic_classes {
        let s = cfg.dataset.synthetic.expect("validated: synthetic source");
        // Separate seed so the new class means are fresh draws.
        let mut new = make_synthetic_gaussian(&SyntheticSpec {
            n_base: 0,
            n_novel: k,
            dim: s.dim,
            samples_per_base: 1,
            n_few,
            test_per_class: s.test_per_class,
            class_separation: s.class_separation,
            seed: cfg.seed ^ 0x6e65_772d_636c_6173,
        })?;
        for (i, c) in new.classes.iter_mut().enumerate() {
            c.id = ClassId(format!("new_{i:03}"));
        }
        for smp in new.train.iter_mut().chain(new.test.iter_mut()) {
            smp.sample_id = smp.sample_id.replacen("novel_", "new_", 1);
        }
        return Ok(new);
    }
    let root = x.root.as_ref().expect("validated: root or synthetic_classes");
    let mut pool = load_class_pool(root, split.profile, LoadOptions { include_validation: true, exec })?;
    for c in &mut pool.classes {
        c.partition = Partition::Novel;
    }
    pool.standard_split(n_few, cfg.seed)
}

fn rel(ctx: &Ctx, p: &Path) -> String {
    p.strip_prefix(&ctx.out).unwrap_or(p).display().to_string()
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    loss: f64,
}

/// Freshly initialized extractor of the configured kind, pretrained on the
/// base classes of `split`.
pub fn pretrained_extractor(cfg: &ExperimentConfig, split: &DatasetSplit, exec: Exec) -> Result<(Extractor, PretrainReport)> {
    let mut ext = Extractor::new(cfg.extractor(), split.profile.image_shape(), &mut rng::stream(cfg.seed, "init-extractor", 0))?;
    let report = pretrain_base_classifier(&mut ext, split, &cfg.pretrain_config(), exec)?;
    Ok((ext, report))
}

/// Model around `extractor` with embeddings and table initialized as the
/// `train` command does.
pub fn initial_model(cfg: &ExperimentConfig, split: &DatasetSplit, extractor: Extractor, exec: Exec) -> Result<Model> {
    Model::initialize(extractor, cfg.model.embedding, split, &mut rng::stream(cfg.seed, "init-embeddings", 0), exec)
}

fn pretrain(ctx: &Ctx) -> Result<Extractor> {
    let cfg = &ctx.cfg;
    let (ext, report) = pretrained_extractor(cfg, &ctx.split, ctx.exec)?;
    let rows: Vec<PretrainRow> = report.epoch_loss.iter().enumerate().map(|(i, &l)| PretrainRow { epoch: i + 1, loss: l }).collect();
    output::write_rows(&ctx.out.join("pretrain_log.csv"), &rows)?;
    if let Some(last) = report.epoch_loss.last() {
        if !last.is_finite() {
            return Err(Error::NonFinite { episode: report.epoch_loss.len() as u64, classes: Vec::new(), seed: cfg.seed });
        }
    }
    let path = ctx.out.join("checkpoints").join("pretrain.safetensors");
    checkpoint::save_extractor(&path, &ext, &CheckpointInfo { seed: cfg.seed, ablation: None, stage: "pretrain".into() })?;
    match report.epoch_loss.last() {
        Some(l) => println!("pretrain: {} epochs, final loss {l:.6}", report.epoch_loss.len()),
        None => println!("pretrain: 0 epochs"),
    }
    println!("pretrain: wrote {}", path.display());
    Ok(ext)
}

fn initial_state(ctx: &Ctx, extractor: Extractor, tcfg: &TrainingConfig) -> Result<TrainState> {
    let model = initial_model(&ctx.cfg, &ctx.split, extractor, ctx.exec)?;
    Ok(TrainState::new(model, &tcfg.optimizer))
}

fn predictor<'a>(ctx: &'a Ctx, model: &'a Model, tcfg: &'a TrainingConfig) -> ModelPredictor<'a> {
    ModelPredictor {
        model,
        split: &ctx.split,
        ablation: tcfg.ablation,
        synthesis: &tcfg.synthesis,
        selection: ctx.cfg.eval.selection,
        test_synthesis: ctx.cfg.eval.test_synthesis,
    }
}

/// Trains in `dir` (log, periodic checkpoints, optional progress evals) and
/// returns the final state with the path of its checkpoint.
fn train_in(ctx: &Ctx, dir: &Path, tcfg: &TrainingConfig, mut state: TrainState) -> Result<(TrainState, PathBuf)> {
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let start = state.episode;
    let mut log = TrainLog::open(&dir.join(TRAIN_LOG), start)?;
    let progress_path = dir.join(PROGRESS);
    let mut progress: Vec<ProgressRow> = if start > 0 && progress_path.exists() {
        output::read_rows(&progress_path)?.into_iter().filter(|r: &ProgressRow| r.episode <= start).collect()
    } else {
        Vec::new()
    };
    output::write_rows(&progress_path, &progress)?;
    let info = CheckpointInfo { seed: ctx.cfg.seed, ablation: Some(tcfg.ablation.label().into()), stage: "train".into() };
    let eval_cfg = ctx.cfg.standard_eval();
    let eval_every = ctx.cfg.training.eval_every;
    println!("train: {} from episode {start} to {}", tcfg.ablation, tcfg.total_episodes);

    let mut observer = |rec: &gcr_core::trainer::EpisodeRecord, st: &TrainState| -> Result<()> {
        log.push(&LogRow::from(rec))?;
        let done = rec.episode + 1;
        if done.is_multiple_of(tcfg.checkpoint_every) {
            log.flush()?;
            checkpoint::save_state(&ckpt_dir.join(format!("episode_{done:07}.safetensors")), st, &info)?;
        }
        if eval_every > 0 && done.is_multiple_of(eval_every) && ctx.cfg.eval.standard {
            let s = evaluate_standard(&predictor(ctx, &st.model, tcfg), &ctx.split, &eval_cfg, ctx.exec)?;
            println!("train: episode {done}: L_total {:.4}, accuracy {:.4} ± {:.4}", rec.losses.total, s.mean, s.ci95);
            let row = ProgressRow { episode: done, mean_acc: s.mean, ci95: s.ci95 };
            output::append_rows(&progress_path, std::slice::from_ref(&row))?;
            progress.push(row);
        }
        Ok(())
    };
    let result = train(&mut state, &ctx.split, tcfg, ctx.exec, &mut observer);
    log.flush()?;
    result?;
    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    checkpoint::save_state(&final_path, &state, &info)?;
    loss_plot(&dir.join(TRAIN_LOG), &dir.join("loss_curve.svg"), tcfg.ablation)?;
    Ok((state, final_path))
}

fn loss_plot(log: &Path, svg: &Path, ablation: Ablation) -> Result<()> {
    let rows = output::read_log(log)?;
    let series = |f: fn(&LogRow) -> f64| plots::bucket_means(&rows.iter().map(|r| (r.episode as f64, f(r))).collect::<Vec<_>>(), 400);
    plots::line_chart(
        svg,
        &format!("Training loss ({ablation})"),
        "episode",
        "loss (bucket mean)",
        &[("L_total", series(|r| r.l_total)), ("L_fsl", series(|r| r.l_fsl)), ("L_reg", series(|r| r.l_reg))],
    )
}

/// Standard and generalized evaluation of one model, as configured.
fn evaluate(ctx: &Ctx, model: &Model, tcfg: &TrainingConfig, checkpoint_id: &str) -> Result<(Vec<ResultRow>, Option<GeneralizedMetrics>)> {
    let cfg = &ctx.cfg;
    let mut rows = Vec::new();
    if cfg.eval.standard {
        let e = cfg.standard_eval();
        let s = evaluate_standard(&predictor(ctx, model, tcfg), &ctx.split, &e, ctx.exec)?;
        println!("eval: {} {}-way {}-shot over {} episodes: {:.4} ± {:.4}", tcfg.ablation, e.n_test, e.n_few, e.episodes, s.mean, s.ci95);
        rows.push(ResultRow::standard("standard".into(), e.n_test, e.n_few, &s, checkpoint_id.into(), cfg.seed));
    }
    let mut gen = None;
    if cfg.generalized_enabled() {
        let mode = cfg.eval.generalized_mode.mode_for(tcfg.ablation);
        let g = evaluate_generalized(model, &ctx.split, mode, ctx.exec)?;
        println!("eval: {} generalized ({mode:?}): acc_a {:.4}, acc_b {:.4}, acc_n {:.4}", tcfg.ablation, g.acc_a, g.acc_b, g.acc_n);
        let way = ctx.split.num_classes();
        rows.push(ResultRow::generalized("generalized".into(), way, cfg.dataset.n_few, &g, checkpoint_id.into(), cfg.seed));
        gen = Some(g);
    }
    Ok((rows, gen))
}

fn checkpoint_id(ctx: &Ctx, path: &Path, episode: u64) -> String {
    format!("{}@{episode}", rel(ctx, path))
}

fn cmd_train(ctx: &Ctx, loaded: Option<Loaded>) -> Result<()> {
    let ablation = ctx.cfg.training.ablation;
    let tcfg = ctx.cfg.training_config(ablation);
    let state = match loaded {
        Some(Loaded::State(state, info)) => {
            if info.ablation.as_deref() != Some(ablation.label()) {
                return Err(Error::Config(format!(
                    "checkpoint was trained as {}, but training.ablation is {ablation}",
                    info.ablation.as_deref().unwrap_or("(none)")
                )));
            }
            *state
        }
        Some(Loaded::Extractor(e)) => initial_state(ctx, e, &tcfg)?,
        None => initial_state(ctx, pretrain(ctx)?, &tcfg)?,
    };
    let (state, path) = train_in(ctx, &ctx.out, &tcfg, state)?;
    let id = checkpoint_id(ctx, &path, state.episode);
    let (rows, _) = evaluate(ctx, &state.model, &tcfg, &id)?;
    output::write_rows(&ctx.out.join(RESULTS), &rows)?;

    let mut points: Vec<(f64, f64)> =
        output::read_rows::<ProgressRow>(&ctx.out.join(PROGRESS))?.into_iter().map(|r| (r.episode as f64, r.mean_acc)).collect();
    if let Some(acc) = rows.iter().find(|r| r.setting == "standard").and_then(|r| r.mean_acc) {
        if points.last().map(|p| p.0) != Some(state.episode as f64) {
            points.push((state.episode as f64, acc));
        }
    }
    plots::line_chart(
        &ctx.out.join("accuracy_vs_episode.svg"),
        &format!("Standard accuracy during training ({ablation})"),
        "episode",
        "mean accuracy",
        &[("accuracy", points)],
    )?;
    println!("train: wrote {}", ctx.out.join(RESULTS).display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, loaded: Option<Loaded>, ckpt: &Path) -> Result<()> {
    let Some(Loaded::State(state, info)) = loaded else { unreachable!("checked by run") };
    let ablation = match info.ablation.as_deref() {
        Some(a) => a.parse()?,
        None => ctx.cfg.training.ablation,
    };
    let tcfg = ctx.cfg.training_config(ablation);
    let id = format!("{}@{}", ckpt.display(), state.episode);
    let (rows, _) = evaluate(ctx, &state.model, &tcfg, &id)?;
    output::write_rows(&ctx.out.join(RESULTS), &rows)?;
    if ctx.cfg.eval.standard {
        // Running mean over test episodes, to show the estimate settling.
        let s = evaluate_standard(&predictor(ctx, &state.model, &tcfg), &ctx.split, &ctx.cfg.standard_eval(), ctx.exec)?;
        let mut acc = 0.0;
        let running: Vec<(f64, f64)> = s
            .per_episode
            .iter()
            .enumerate()
            .map(|(i, a)| {
                acc += a;
                ((i + 1) as f64, acc / (i + 1) as f64)
            })
            .collect();
        plots::line_chart(
            &ctx.out.join("eval_running_mean.svg"),
            &format!("Running mean accuracy over test episodes ({ablation})"),
            "test episode",
            "mean accuracy so far",
            &[("accuracy", running)],
        )?;
    }
    println!("eval: wrote {}", ctx.out.join(RESULTS).display());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, loaded: Option<Loaded>) -> Result<()> {
    let extractor = match loaded {
        Some(Loaded::Extractor(e)) => e,
        _ => pretrain(ctx)?,
    };
    let mut rows = Vec::new();
    let mut standard = Vec::new();
    let mut acc_n = Vec::new();
    let mut acc_a = Vec::new();
    let variants = ctx.cfg.ablate.variants.clone();
    for &v in &variants {
        let tcfg = ctx.cfg.training_config(v);
        let dir = ctx.out.join("ablate").join(v.label());
        let state = initial_state(ctx, extractor.clone(), &tcfg)?;
        let (state, path) = train_in(ctx, &dir, &tcfg, state)?;
        let (mut r, gen) = evaluate(ctx, &state.model, &tcfg, &checkpoint_id(ctx, &path, state.episode))?;
        standard.push(r.iter().find(|x| x.setting == "standard").and_then(|x| x.mean_acc));
        acc_n.push(gen.as_ref().map(|g| g.acc_n));
        acc_a.push(gen.as_ref().map(|g| g.acc_a));
        for row in &mut r {
            row.setting = format!("{}:{}", row.setting, v.label());
        }
        rows.extend(r);
    }
    output::write_rows(&ctx.out.join(RESULTS), &rows)?;
    let groups: Vec<String> = variants.iter().map(|v| v.label().to_owned()).collect();
    let mut series: Vec<(&str, Vec<Option<f64>>)> = Vec::new();
    if ctx.cfg.eval.standard {
        series.push(("standard accuracy", standard));
    }
    if ctx.cfg.generalized_enabled() {
        series.push(("generalized acc_a", acc_a));
        series.push(("generalized acc_n", acc_n));
    }
    plots::grouped_bars(&ctx.out.join("ablation_bars.svg"), "Ablation study", "accuracy", &groups, &series)?;
    println!("ablate: wrote {}", ctx.out.join(RESULTS).display());
    Ok(())
}

/// SHA-256 over the little-endian bytes of `values`.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn frozen_checksum(m: &Model) -> String {
    let mut all = Vec::new();
    for (_, t) in m.extractor.params.iter().chain(m.embeddings.params.iter()).chain(m.buffers()) {
        all.extend_from_slice(t.data());
    }
    checksum(&all)
}

fn cmd_extend(ctx: &Ctx, state: TrainState, info: CheckpointInfo, new_split: DatasetSplit, ckpt: &Path) -> Result<()> {
    let ablation = match info.ablation.as_deref() {
        Some(a) => a.parse()?,
        None => ctx.cfg.training.ablation,
    };
    let x = ctx.cfg.extend.as_ref().expect("checked by run");
    let mut tcfg = ctx.cfg.training_config(ablation);
    tcfg.optimizer = x.optimizer.unwrap_or(tcfg.optimizer);
    let episodes = x.episodes;
    let model = &state.model;
    let n_old = model.table.len();
    let d = model.table.dim();
    let table_before = checksum(model.table.vectors.data());
    let frozen_before = frozen_checksum(model);
    println!("extend: old table checksum before: {table_before}");

    let id = format!("{}@{}", ckpt.display(), state.episode);
    let mode = ctx.cfg.eval.generalized_mode.mode_for(ablation);
    let before = evaluate_generalized(model, &ctx.split, mode, ctx.exec)?;

    let mut log = TrainLog::open(&ctx.out.join("extend_log.csv"), 0)?;
    let (extended, merged) =
        extend_new_classes(model, &ctx.split, &new_split, &tcfg, episodes, ctx.exec, &mut |rec| log.push(&LogRow::from(rec)))?;
    log.flush()?;

    let table_after = checksum(&extended.table.vectors.data()[..n_old * d]);
    let frozen_after = frozen_checksum(&extended);
    println!("extend: old table checksum after:  {table_after}");
    if table_before != table_after || frozen_before != frozen_after {
        return Err(Error::Contract("extension modified pre-existing parameters".into()));
    }
    println!("extend: pre-existing table rows, extractor and embeddings unchanged");

    let path = ctx.out.join("checkpoints").join("extended.safetensors");
    let ext_state =
        TrainState { model: extended, optimizer: Sgd::new(tcfg.optimizer.base_lr, tcfg.optimizer.momentum), episode: state.episode };
    let ext_info = CheckpointInfo { seed: ctx.cfg.seed, ablation: Some(ablation.label().into()), stage: "extend".into() };
    checkpoint::save_state(&path, &ext_state, &ext_info)?;
    let after = evaluate_generalized(&ext_state.model, &merged, mode, ctx.exec)?;

    let n_few = ctx.cfg.dataset.n_few;
    let rows = vec![
        ResultRow::generalized("generalized".into(), n_old, n_few, &before, id, ctx.cfg.seed),
        ResultRow::generalized(
            "generalized-extended".into(),
            merged.num_classes(),
            n_few,
            &after,
            checkpoint_id(ctx, &path, ext_state.episode),
            ctx.cfg.seed,
        ),
    ];
    output::write_rows(&ctx.out.join(RESULTS), &rows)?;
    let report = extension_report(&ctx.split, &merged, n_old, &before, &after, mode);
    print!("{report}");
    let rp = ctx.out.join("extend_report.txt");
    std::fs::write(&rp, report).map_err(|e| Error::io(&rp, e))?;
    println!("extend: wrote {}", path.display());
    Ok(())
}

/// Accuracy over test samples whose true class index is in `[from, to)`.
fn range_accuracy(g: &GeneralizedMetrics, from: usize, to: usize) -> Option<f64> {
    let (mut hit, mut total) = (0u64, 0u64);
    for (y, row) in g.confusion.iter().enumerate().take(to).skip(from) {
        hit += row[y];
        total += row.iter().sum::<u64>();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Generalized accuracy before and after adding the new classes, one row
/// per model and one column per class group.
pub fn extension_report(
    old: &DatasetSplit,
    merged: &DatasetSplit,
    n_old: usize,
    before: &GeneralizedMetrics,
    after: &GeneralizedMetrics,
    mode: gcr_core::evaluation::GeneralizedMode,
) -> String {
    let n_base = old.classes_in(Partition::Base).len();
    let n_seen = old.classes_in(Partition::Novel).len();
    let n_new = merged.num_classes() - n_old;
    let pct = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{:.2}", 100.0 * x));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Generalized FSL over {} classes: {n_base} base, {n_seen} seen novel, {n_new} new ({mode:?} prediction)",
        merged.num_classes()
    );
    let _ = writeln!(s, "{:<22}{:>10}{:>10}{:>10}{:>10}", "model", "acc_a", "acc_b", "acc_n", "acc_new");
    let _ = writeln!(
        s,
        "{:<22}{:>10}{:>10}{:>10}{:>10}",
        format!("before ({} classes)", old.num_classes()),
        pct(Some(before.acc_a)),
        pct(Some(before.acc_b)),
        pct(Some(before.acc_n)),
        "-"
    );
    let _ = writeln!(
        s,
        "{:<22}{:>10}{:>10}{:>10}{:>10}",
        format!("after ({} classes)", merged.num_classes()),
        pct(Some(after.acc_a)),
        pct(Some(after.acc_b)),
        pct(Some(after.acc_n)),
        pct(range_accuracy(after, n_old, merged.num_classes()))
    );
    s
}
