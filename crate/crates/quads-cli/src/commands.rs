//! The five subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use quads::io::corpus::{
    generate_synthetic_corpus, SyntheticCorpusSpec, TEST_MANIFEST, TRAIN_MANIFEST, VAL_MANIFEST,
};
use quads::io::packed::{load_checkpoint, load_packed, save_checkpoint, save_packed};
use quads::io::Manifest;
use quads::metrics::{count_gmacs, energy_proxy, model_size_mb, EfficiencyReport};
use quads::model::{initialize, InitMode, ModelGraph, Role};
use quads::quant::QuantizedModel;
use quads::train::{
    baseline_quantize_after_distill, distill_only, evaluate, mct_train, train_supervised, Dataset,
    History, MctSchedule, SupervisedOptions, TrainData,
};

use crate::config::RunConfig;
use crate::report::{append_csv_row, read_csv_rows, write_scatter_svg, ScatterPoint};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InitArg {
    Random,
    Pretrained,
}

impl InitArg {
    fn as_str(self) -> &'static str {
        match self {
            InitArg::Random => "random",
            InitArg::Pretrained => "pretrained",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StrategyArg {
    /// Distillation only, no quantization (full-precision artifact).
    Distill,
    /// All distillation first, then one k-means fit with no codebook training.
    QuantAfter,
    /// The alternating pipeline with a final quantization pass.
    Mct,
}

impl StrategyArg {
    fn as_str(self) -> &'static str {
        match self {
            StrategyArg::Distill => "distill",
            StrategyArg::QuantAfter => "quant-after",
            StrategyArg::Mct => "mct",
        }
    }
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

pub fn cmd_synth_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.paths.run_dir).map_err(|e| {
        CliError::user(format!(
            "cannot create run dir {}: {e}",
            cfg.paths.run_dir.display()
        ))
    })?;
    let out = &cfg.paths.corpus_dir;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            return Err(CliError::user(format!(
                "corpus directory parent does not exist: {}",
                parent.display()
            )));
        }
    }
    if out.exists() && !force {
        return Err(CliError::user(format!(
            "corpus directory {} already exists; pass --force to regenerate",
            out.display()
        )));
    }
    let spec = corpus_spec(cfg);
    let manifest = generate_synthetic_corpus(&spec, out)?;
    cfg.write_echo()?;
    println!(
        "corpus: {} classes x {} samples -> {} ({} rows)",
        spec.n_classes(),
        spec.samples_per_class,
        out.display(),
        manifest.rows.len()
    );
    Ok(())
}

fn corpus_spec(cfg: &RunConfig) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        sample_rate: cfg.corpus.sample_rate,
        duration_s: cfg.corpus.duration_s,
        snr_db: cfg.corpus.snr_db,
        seed: cfg.corpus.seed,
        ..SyntheticCorpusSpec::with_default_classes(
            cfg.corpus.n_classes,
            cfg.corpus.samples_per_class,
            cfg.corpus.snr_db,
            cfg.corpus.seed,
        )
    }
}

// ---------------------------------------------------------------------------
// data and checkpoint loading shared by the training commands
// ---------------------------------------------------------------------------

fn load_split(cfg: &RunConfig, name: &str, vocab: Option<&[String]>) -> Result<Dataset, CliError> {
    let path = cfg.paths.corpus_dir.join(name);
    if !path.exists() {
        return Err(CliError::user(format!(
            "manifest {} not found; run `quads synth-data` first",
            path.display()
        )));
    }
    let manifest = Manifest::load(&path)?;
    Ok(Dataset::load(&manifest, &cfg.mel, vocab)?)
}

struct LoadedData {
    train_val: TrainData,
    test: Dataset,
    vocab: Vec<String>,
}

fn load_corpus(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let train = load_split(cfg, TRAIN_MANIFEST, None)?;
    let vocab = train.vocab.clone();
    let val = load_split(cfg, VAL_MANIFEST, Some(&vocab))?;
    let test = load_split(cfg, TEST_MANIFEST, Some(&vocab))?;
    Ok(LoadedData {
        train_val: TrainData { train, val },
        test,
        vocab,
    })
}

fn load_teacher(cfg: &RunConfig) -> Result<ModelGraph, CliError> {
    let path = &cfg.paths.teacher_checkpoint;
    if !path.exists() {
        return Err(CliError::user(format!(
            "teacher checkpoint {} not found; run `quads train-teacher` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?.0)
}

/// Frames an utterance of the configured duration produces; the reference
/// input length for MAC accounting.
fn nominal_frames(cfg: &RunConfig) -> usize {
    let samples = (cfg.corpus.sample_rate as f64 * cfg.corpus.duration_s).round() as usize;
    (samples - cfg.mel.window_samples()) / cfg.mel.hop_samples() + 1
}

// ---------------------------------------------------------------------------
// train-teacher
// ---------------------------------------------------------------------------

pub fn cmd_train_teacher(cfg: &RunConfig, epochs_override: Option<usize>) -> Result<(), CliError> {
    let data = load_corpus(cfg)?;
    let teacher_cfg = cfg.teacher.encoder.to_config(cfg.mel.n_mels);
    let model = initialize(
        &teacher_cfg,
        data.vocab.len(),
        Role::Student, // trained with a head; frozen later for distillation
        InitMode::Random,
        cfg.teacher.seed,
    )?;
    let epochs = epochs_override.unwrap_or(cfg.teacher.epochs);
    let (trained, history) = if epochs == 0 {
        (model, History::default())
    } else {
        train_supervised(
            model,
            &data.train_val,
            &SupervisedOptions {
                epochs,
                patience: cfg.teacher.patience,
                lr: cfg.teacher.lr,
                batch_size: cfg.teacher.batch_size,
                seed: cfg.teacher.seed,
                optimizer: cfg.schedule.optimizer,
                progress: true,
            },
        )?
    };
    cfg.write_echo()?;
    save_checkpoint(&trained, Some(&data.vocab), &cfg.paths.teacher_checkpoint)?;
    history
        .write_csv(&cfg.paths.run_dir.join("teacher_history.csv"))
        .map_err(|e| CliError::user(format!("cannot write teacher history: {e}")))?;
    let (acc, f1) = evaluate(&trained, &data.train_val.val)?;
    println!(
        "teacher: {} params, val acc {acc:.4}, val macro-F1 {f1:.4} -> {}",
        trained.param_count(),
        cfg.paths.teacher_checkpoint.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mct
// ---------------------------------------------------------------------------

fn build_student(
    cfg: &RunConfig,
    init: InitArg,
    n_classes: usize,
    seed: u64,
    teacher_graph: &ModelGraph,
) -> Result<ModelGraph, CliError> {
    let student_cfg = cfg.student.to_config(cfg.mel.n_mels);
    match init {
        InitArg::Random => Ok(initialize(
            &student_cfg,
            n_classes,
            Role::Student,
            InitMode::Random,
            seed,
        )?),
        InitArg::Pretrained => {
            let source = match &cfg.paths.pretrained_checkpoint {
                Some(path) => {
                    if !path.exists() {
                        return Err(CliError::user(format!(
                            "pretrained checkpoint {} not found",
                            path.display()
                        )));
                    }
                    load_checkpoint(path)?.0
                }
                // fall back to a width-truncated slice of the teacher
                None => teacher_graph.clone(),
            };
            Ok(initialize(
                &student_cfg,
                n_classes,
                Role::Student,
                InitMode::Pretrained(&source),
                seed,
            )?)
        }
    }
}

/// Outcome of one pipeline run, uniform across strategies.
struct RunOutcome {
    artifact: QuantizedModel,
    history: History,
    /// Bit length for the size convention (32 marks full precision).
    reported_bits: u8,
}

fn run_strategy(
    strategy: StrategyArg,
    teacher: &ModelGraph,
    student: ModelGraph,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<RunOutcome, CliError> {
    let fp32 = sched.bit_length == 32;
    match (strategy, fp32) {
        (StrategyArg::Distill, _) | (_, true) => {
            let (model, history) = distill_only(teacher, student, data, sched)?;
            Ok(RunOutcome {
                artifact: QuantizedModel {
                    base: model,
                    codebooks: BTreeMap::new(),
                },
                history,
                reported_bits: 32,
            })
        }
        (StrategyArg::QuantAfter, false) => {
            let (artifact, history) =
                baseline_quantize_after_distill(teacher, student, data, sched)?;
            Ok(RunOutcome {
                artifact,
                history,
                reported_bits: sched.bit_length,
            })
        }
        (StrategyArg::Mct, false) => {
            let (artifact, history) = mct_train(teacher, student, data, sched)?;
            Ok(RunOutcome {
                artifact,
                history,
                reported_bits: sched.bit_length,
            })
        }
    }
}

const REPORT_HEADER: &str =
    "strategy,init,seed,bits,params,codebook_entries,size_paper_mb,size_serialized_mb,gmacs,acc,macro_f1,energy_proxy";

fn report_row(
    cfg: &RunConfig,
    strategy: StrategyArg,
    init: InitArg,
    outcome: &RunOutcome,
    test: &Dataset,
) -> Result<(String, EfficiencyReport, f64, f64), CliError> {
    let deployed = outcome.artifact.materialize();
    let (acc, f1) = evaluate(&deployed, test)?;
    let gmacs = count_gmacs(&deployed, nominal_frames(cfg))?;
    let eff = EfficiencyReport::new(
        deployed.param_count(),
        outcome.reported_bits,
        outcome.artifact.serialized_param_bytes(),
        gmacs,
    );
    let proxy = cfg
        .energy_table
        .get(&outcome.reported_bits)
        .map(|_| energy_proxy(gmacs, outcome.reported_bits, &cfg.energy_table))
        .transpose()?;
    let codebook_entries: usize = outcome
        .artifact
        .codebooks
        .values()
        .map(|cb| cb.centroids.len())
        .sum();
    let row = format!(
        "{},{},{},{},{},{},{:.2},{:.2},{:.6},{:.4},{:.4},{}",
        strategy.as_str(),
        init.as_str(),
        cfg.schedule.seed,
        outcome.reported_bits,
        eff.param_count,
        codebook_entries,
        eff.size_mb_paper_convention,
        eff.size_mb_serialized,
        eff.gmacs,
        acc,
        f1,
        proxy.map(|p| format!("{p:.6e}")).unwrap_or_default(),
    );
    Ok((row, eff, acc, f1))
}

fn refresh_scatter(run_dir: &Path, csv: &str, svg: &str) -> Result<(), CliError> {
    let rows = read_csv_rows(&run_dir.join(csv));
    let points: Vec<ScatterPoint> = rows
        .iter()
        .filter_map(|r| {
            Some(ScatterPoint {
                size_mb: r.get(6)?.parse().ok()?,
                f1: r.get(10)?.parse().ok()?,
                label: format!("{}-b{}", r.first()?, r.get(3)?),
            })
        })
        .collect();
    if points.is_empty() {
        return Ok(());
    }
    write_scatter_svg(&run_dir.join(svg), &points)
}

pub fn cmd_mct(cfg: &RunConfig, init: InitArg, strategy: StrategyArg) -> Result<(), CliError> {
    let data = load_corpus(cfg)?;
    let teacher_graph = load_teacher(cfg)?;
    let student = build_student(
        cfg,
        init,
        data.vocab.len(),
        cfg.schedule.seed,
        &teacher_graph,
    )?;
    let teacher = teacher_graph.into_teacher();

    let mut sched = cfg.schedule.clone();
    sched.progress = true;
    // a 32-bit run is the full-precision pipeline; clamp for the fitter
    let outcome = if sched.bit_length == 32 {
        let mut fp = sched.clone();
        fp.bit_length = 16; // never used, keeps the schedule valid
        run_strategy(
            StrategyArg::Distill,
            &teacher,
            student,
            &data.train_val,
            &fp,
        )?
    } else {
        run_strategy(strategy, &teacher, student, &data.train_val, &sched)?
    };

    cfg.write_echo()?;
    let stem = format!(
        "model_{}_{}_b{}_s{}",
        strategy.as_str(),
        init.as_str(),
        outcome.reported_bits,
        sched.seed
    );
    let model_path = cfg.paths.run_dir.join(format!("{stem}.qdsm"));
    save_packed(&outcome.artifact, Some(&data.vocab), &model_path)?;
    outcome
        .history
        .write_csv(&cfg.paths.run_dir.join(format!("{stem}_history.csv")))
        .map_err(|e| CliError::user(format!("cannot write history: {e}")))?;

    let (row, eff, acc, f1) = report_row(cfg, strategy, init, &outcome, &data.test)?;
    append_csv_row(&cfg.paths.run_dir.join("report.csv"), REPORT_HEADER, &row)?;
    refresh_scatter(&cfg.paths.run_dir, "report.csv", "plot.svg")?;
    println!(
        "{}: {} params, {:.2} MB ({} bits) / {:.2} MB packed, {:.6} GMACs, test acc {:.4}, macro-F1 {:.4}",
        stem,
        eff.param_count,
        eff.size_mb_paper_convention,
        outcome.reported_bits,
        eff.size_mb_serialized,
        eff.gmacs,
        acc,
        f1
    );
    println!("model -> {}", model_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

const ABLATION_HEADER: &str = REPORT_HEADER;

/// Runs {random, pretrained} x {distill, quant-after, mct}; quantized
/// strategies sweep the configured bit lengths. Completed rows found in
/// ablation.csv are skipped, so an interrupted grid resumes.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_corpus(cfg)?;
    let teacher_graph = load_teacher(cfg)?;
    let teacher = teacher_graph.clone().into_teacher();
    cfg.write_echo()?;
    let csv_path = cfg.paths.run_dir.join("ablation.csv");
    let done: Vec<(String, String, String, String)> = read_csv_rows(&csv_path)
        .into_iter()
        .filter_map(|r| {
            Some((
                r.first()?.clone(),
                r.get(1)?.clone(),
                r.get(2)?.clone(),
                r.get(3)?.clone(),
            ))
        })
        .collect();

    for &seed in &cfg.ablate.seeds {
        for init in [InitArg::Random, InitArg::Pretrained] {
            let mut run_cfg = cfg.clone();
            run_cfg.schedule.seed = seed;
            if init == InitArg::Pretrained {
                let ckpt = pretrain_student(&run_cfg, &data, seed)?;
                run_cfg.paths.pretrained_checkpoint = Some(ckpt);
            }
            let mut cells: Vec<(StrategyArg, u8)> = vec![(StrategyArg::Distill, 32)];
            for &b in &cfg.ablate.bits {
                cells.push((StrategyArg::QuantAfter, b));
                cells.push((StrategyArg::Mct, b));
            }
            for (strategy, bits) in cells {
                let key = (
                    strategy.as_str().to_string(),
                    init.as_str().to_string(),
                    seed.to_string(),
                    bits.to_string(),
                );
                if done.contains(&key) {
                    println!("skip {key:?} (already in ablation.csv)");
                    continue;
                }
                let student =
                    build_student(&run_cfg, init, data.vocab.len(), seed, &teacher_graph)?;
                let mut sched = run_cfg.schedule.clone();
                sched.bit_length = if bits == 32 { 16 } else { bits };
                let outcome = if bits == 32 {
                    run_strategy(
                        StrategyArg::Distill,
                        &teacher,
                        student,
                        &data.train_val,
                        &sched,
                    )?
                } else {
                    run_strategy(strategy, &teacher, student, &data.train_val, &sched)?
                };
                let (row, _, acc, f1) = report_row(&run_cfg, strategy, init, &outcome, &data.test)?;
                append_csv_row(&csv_path, ABLATION_HEADER, &row)?;
                println!(
                    "{} {} seed {} b{}: test acc {:.4}, macro-F1 {:.4}",
                    strategy.as_str(),
                    init.as_str(),
                    seed,
                    bits,
                    acc,
                    f1
                );
            }
        }
    }
    refresh_scatter(&cfg.paths.run_dir, "ablation.csv", "plot_ablation.svg")?;
    println!("ablation table -> {}", csv_path.display());
    Ok(())
}

/// Short supervised pretraining run of the student; the checkpoint is
/// cached per seed and reused on resume.
fn pretrain_student(cfg: &RunConfig, data: &LoadedData, seed: u64) -> Result<PathBuf, CliError> {
    let path = cfg.paths.run_dir.join(format!("pretrain_s{seed}.qdsm"));
    if path.exists() {
        return Ok(path);
    }
    std::fs::create_dir_all(&cfg.paths.run_dir)
        .map_err(|e| CliError::user(format!("cannot create run dir: {e}")))?;
    let student_cfg = cfg.student.to_config(cfg.mel.n_mels);
    let model = initialize(
        &student_cfg,
        data.vocab.len(),
        Role::Student,
        InitMode::Random,
        seed,
    )?;
    let (trained, _) = train_supervised(
        model,
        &data.train_val,
        &SupervisedOptions {
            epochs: cfg.ablate.pretrain_epochs,
            patience: cfg.ablate.pretrain_epochs,
            lr: cfg.ablate.pretrain_lr,
            batch_size: cfg.schedule.batch_size,
            seed: seed ^ 0x_9E37_79B9,
            optimizer: cfg.schedule.optimizer,
            progress: false,
        },
    )?;
    save_checkpoint(&trained, Some(&data.vocab), &path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    manifest_path: &Path,
) -> Result<(), CliError> {
    let (model, labels) = load_packed(model_path)?;
    let manifest = Manifest::load(manifest_path)?;
    let deployed = model.materialize();
    let n_classes = deployed
        .n_classes()
        .ok_or_else(|| CliError::user("model has no classifier head".to_string()))?;
    let vocab = match labels {
        Some(l) => l,
        None => manifest.vocab.clone(),
    };
    if vocab.len() != n_classes {
        return Err(CliError::user(format!(
            "vocab mismatch: model head has {n_classes} classes, vocabulary has {}",
            vocab.len()
        )));
    }
    let data = Dataset::load(&manifest, &cfg.mel, Some(&vocab))?;
    let (acc, f1) = evaluate(&deployed, &data)?;
    let frames = data.items[0].0.frames;
    let gmacs = count_gmacs(&deployed, frames)?;
    let bits = model.bit_length().unwrap_or(32);
    let size_paper = model_size_mb(deployed.param_count(), bits);
    let size_serialized = model.serialized_param_bytes() as f64 / (1024.0 * 1024.0);
    println!(
        "{}: {} rows, acc {:.4}, macro-F1 {:.4}, {:.6} GMACs @ {frames} frames, {:.2} MB ({bits} bits) / {:.2} MB packed",
        model_path.display(),
        data.len(),
        acc,
        f1,
        gmacs,
        size_paper,
        size_serialized,
    );
    std::fs::create_dir_all(&cfg.paths.run_dir)
        .map_err(|e| CliError::user(format!("cannot create run dir: {e}")))?;
    append_csv_row(
        &cfg.paths.run_dir.join("evaluate.csv"),
        "model,manifest,rows,acc,macro_f1,gmacs,bits,size_paper_mb,size_serialized_mb",
        &format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.2},{:.2}",
            model_path.display(),
            manifest_path.display(),
            data.len(),
            acc,
            f1,
            gmacs,
            bits,
            size_paper,
            size_serialized
        ),
    )?;
    Ok(())
}
