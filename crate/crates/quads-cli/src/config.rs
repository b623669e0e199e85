//! Run configuration: a flat key-value file with sections, every key
//! overridable from the command line. Unknown keys are rejected so a typo
//! never silently falls back to a default, and the fully-resolved
//! configuration is echoed into the run directory, where it reproduces
//! the run when fed back in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quads::dsp::MelConfig;
use quads::model::{Activation, ConvSpec, EncoderConfig};
use quads::quant::QuantPolicy;
use quads::train::{MctSchedule, OptimizerKind};

use crate::CliError;

/// Parsed INI-style text: `[section]` headers, `key = value` lines, `#`
/// comments. Every entry must be consumed by the typed extraction below.
struct Ini {
    entries: Vec<(String, String, String)>,
    consumed: Vec<bool>,
}

impl Ini {
    fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::user(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    origin.display(),
                    lineno + 1
                ))
            })?;
            entries.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
        }
        let consumed = vec![false; entries.len()];
        Ok(Self { entries, consumed })
    }

    /// All occurrences are consumed; the last value wins, so a later
    /// re-opened section overrides an earlier one.
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        let mut found = None;
        for (i, (s, k, v)) in self.entries.iter().enumerate() {
            if s == section && k == key {
                self.consumed[i] = true;
                found = Some(v.clone());
            }
        }
        found
    }

    fn take_section(&mut self, section: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, (s, k, v)) in self.entries.iter().enumerate() {
            if s == section {
                self.consumed[i] = true;
                out.push((k.clone(), v.clone()));
            }
        }
        out
    }

    fn reject_unknown(&self) -> Result<(), CliError> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .zip(&self.consumed)
            .filter(|(_, &c)| !c)
            .map(|((s, k, _), _)| format!("{s}.{k}"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::user(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

fn parse_val<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::user(format!("config {section}.{key}: cannot parse {v:?}")))
}

fn parse_conv(section: &str, v: &str) -> Result<Vec<ConvSpec>, CliError> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|part| {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 3 {
                return Err(CliError::user(format!(
                    "config {section}.conv: expected kernel:channels:stride, got {part:?}"
                )));
            }
            Ok(ConvSpec {
                kernel: parse_val(section, "conv", fields[0])?,
                out_channels: parse_val(section, "conv", fields[1])?,
                stride: parse_val(section, "conv", fields[2])?,
            })
        })
        .collect()
}

fn parse_list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>, CliError> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|p| parse_val(section, key, p.trim()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub teacher_checkpoint: PathBuf,
    pub pretrained_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// `none` in the file means noiseless.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EncoderSection {
    pub conv: Vec<ConvSpec>,
    pub ff: Vec<usize>,
    pub latent_dim: usize,
}

impl EncoderSection {
    pub fn to_config(&self, n_mels: usize) -> EncoderConfig {
        EncoderConfig {
            n_mels,
            conv_layers: self.conv.clone(),
            ff_layers: self.ff.clone(),
            latent_dim: self.latent_dim,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub encoder: EncoderSection,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AblateConfig {
    pub bits: Vec<u8>,
    pub seeds: Vec<u64>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub mel: MelConfig,
    pub teacher: TeacherConfig,
    pub student: EncoderSection,
    pub schedule: MctSchedule,
    pub ablate: AblateConfig,
    pub energy_table: BTreeMap<u8, f64>,
}

impl RunConfig {
    /// Defaults alone (no file).
    pub fn default_with_run_dir(run_dir: PathBuf) -> Self {
        let corpus_dir = run_dir.join("corpus");
        let teacher_checkpoint = run_dir.join("teacher.qdsm");
        Self {
            paths: PathsConfig {
                run_dir,
                corpus_dir,
                teacher_checkpoint,
                pretrained_checkpoint: None,
            },
            corpus: CorpusConfig {
                n_classes: 4,
                samples_per_class: 40,
                sample_rate: 16_000,
                duration_s: 1.0,
                snr_db: Some(10.0),
                seed: 1,
            },
            mel: MelConfig::default(),
            teacher: TeacherConfig {
                encoder: EncoderSection {
                    conv: vec![
                        ConvSpec {
                            kernel: 5,
                            out_channels: 24,
                            stride: 4,
                        },
                        ConvSpec {
                            kernel: 3,
                            out_channels: 32,
                            stride: 2,
                        },
                    ],
                    ff: vec![48],
                    latent_dim: 24,
                },
                epochs: 40,
                patience: 8,
                lr: 1e-3,
                batch_size: 16,
                seed: 7,
            },
            student: EncoderSection {
                conv: vec![
                    ConvSpec {
                        kernel: 5,
                        out_channels: 10,
                        stride: 4,
                    },
                    ConvSpec {
                        kernel: 3,
                        out_channels: 12,
                        stride: 2,
                    },
                ],
                ff: vec![24],
                latent_dim: 24,
            },
            schedule: MctSchedule::new(4),
            ablate: AblateConfig {
                bits: vec![16, 4],
                seeds: vec![0, 1, 2],
                pretrain_epochs: 12,
                pretrain_lr: 1e-3,
            },
            energy_table: BTreeMap::new(),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let run_dir = std::env::var_os("QUADS_RUN_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        let mut cfg = Self::default_with_run_dir(run_dir);
        let Some(path) = path else {
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut ini = Ini::parse(&text, path)?;

        if let Some(v) = ini.take("paths", "run_dir") {
            cfg.paths.run_dir = PathBuf::from(v);
            // dependent defaults follow the run dir unless set explicitly
            cfg.paths.corpus_dir = cfg.paths.run_dir.join("corpus");
            cfg.paths.teacher_checkpoint = cfg.paths.run_dir.join("teacher.qdsm");
        }
        if let Some(v) = ini.take("paths", "corpus_dir") {
            cfg.paths.corpus_dir = PathBuf::from(v);
        }
        if let Some(v) = ini.take("paths", "teacher_checkpoint") {
            cfg.paths.teacher_checkpoint = PathBuf::from(v);
        }
        if let Some(v) = ini.take("paths", "pretrained_checkpoint") {
            if !v.is_empty() && v != "none" {
                cfg.paths.pretrained_checkpoint = Some(PathBuf::from(v));
            }
        }

        if let Some(v) = ini.take("corpus", "n_classes") {
            cfg.corpus.n_classes = parse_val("corpus", "n_classes", &v)?;
        }
        if let Some(v) = ini.take("corpus", "samples_per_class") {
            cfg.corpus.samples_per_class = parse_val("corpus", "samples_per_class", &v)?;
        }
        if let Some(v) = ini.take("corpus", "sample_rate") {
            cfg.corpus.sample_rate = parse_val("corpus", "sample_rate", &v)?;
        }
        if let Some(v) = ini.take("corpus", "duration_s") {
            cfg.corpus.duration_s = parse_val("corpus", "duration_s", &v)?;
        }
        if let Some(v) = ini.take("corpus", "snr_db") {
            cfg.corpus.snr_db = if v == "none" {
                None
            } else {
                Some(parse_val("corpus", "snr_db", &v)?)
            };
        }
        if let Some(v) = ini.take("corpus", "seed") {
            cfg.corpus.seed = parse_val("corpus", "seed", &v)?;
        }

        if let Some(v) = ini.take("mel", "n_mels") {
            cfg.mel.n_mels = parse_val("mel", "n_mels", &v)?;
        }
        if let Some(v) = ini.take("mel", "window_ms") {
            cfg.mel.window_ms = parse_val("mel", "window_ms", &v)?;
        }
        if let Some(v) = ini.take("mel", "hop_ms") {
            cfg.mel.hop_ms = parse_val("mel", "hop_ms", &v)?;
        }
        if let Some(v) = ini.take("mel", "fmin") {
            cfg.mel.fmin = parse_val("mel", "fmin", &v)?;
        }
        if let Some(v) = ini.take("mel", "fmax") {
            cfg.mel.fmax = parse_val("mel", "fmax", &v)?;
        }
        if let Some(v) = ini.take("mel", "log_floor") {
            cfg.mel.log_floor = parse_val("mel", "log_floor", &v)?;
        }

        for (section, enc) in [
            ("teacher", &mut cfg.teacher.encoder),
            ("student", &mut cfg.student),
        ] {
            if let Some(v) = ini.take(section, "conv") {
                enc.conv = parse_conv(section, &v)?;
            }
            if let Some(v) = ini.take(section, "ff") {
                enc.ff = parse_list(section, "ff", &v)?;
            }
            if let Some(v) = ini.take(section, "latent_dim") {
                enc.latent_dim = parse_val(section, "latent_dim", &v)?;
            }
        }
        if let Some(v) = ini.take("teacher", "epochs") {
            cfg.teacher.epochs = parse_val("teacher", "epochs", &v)?;
        }
        if let Some(v) = ini.take("teacher", "patience") {
            cfg.teacher.patience = parse_val("teacher", "patience", &v)?;
        }
        if let Some(v) = ini.take("teacher", "lr") {
            cfg.teacher.lr = parse_val("teacher", "lr", &v)?;
        }
        if let Some(v) = ini.take("teacher", "batch_size") {
            cfg.teacher.batch_size = parse_val("teacher", "batch_size", &v)?;
        }
        if let Some(v) = ini.take("teacher", "seed") {
            cfg.teacher.seed = parse_val("teacher", "seed", &v)?;
        }

        let s = &mut cfg.schedule;
        if let Some(v) = ini.take("schedule", "cycles") {
            s.cycles = parse_val("schedule", "cycles", &v)?;
        }
        if let Some(v) = ini.take("schedule", "distill_epochs") {
            s.distill_epochs = parse_val("schedule", "distill_epochs", &v)?;
        }
        if let Some(v) = ini.take("schedule", "quant_epochs") {
            s.quant_epochs = parse_val("schedule", "quant_epochs", &v)?;
        }
        if let Some(v) = ini.take("schedule", "final_quant_epochs") {
            s.final_quant_epochs = parse_val("schedule", "final_quant_epochs", &v)?;
        }
        if let Some(v) = ini.take("schedule", "alpha") {
            s.alpha = parse_val("schedule", "alpha", &v)?;
        }
        if let Some(v) = ini.take("schedule", "bits") {
            s.bit_length = parse_val("schedule", "bits", &v)?;
        }
        if let Some(v) = ini.take("schedule", "lr_encoder") {
            s.lr_encoder = parse_val("schedule", "lr_encoder", &v)?;
        }
        if let Some(v) = ini.take("schedule", "lr_classifier") {
            s.lr_classifier = parse_val("schedule", "lr_classifier", &v)?;
        }
        if let Some(v) = ini.take("schedule", "lr_codebook") {
            s.lr_codebook = parse_val("schedule", "lr_codebook", &v)?;
        }
        if let Some(v) = ini.take("schedule", "optimizer") {
            s.optimizer = match v.as_str() {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                other => {
                    return Err(CliError::user(format!(
                        "config schedule.optimizer: expected adam or sgd, got {other:?}"
                    )))
                }
            };
        }
        if let Some(v) = ini.take("schedule", "batch_size") {
            s.batch_size = parse_val("schedule", "batch_size", &v)?;
        }
        if let Some(v) = ini.take("schedule", "seed") {
            s.seed = parse_val("schedule", "seed", &v)?;
        }
        if let Some(v) = ini.take("schedule", "gt_double_count") {
            s.gt_double_count = parse_val("schedule", "gt_double_count", &v)?;
        }
        if let Some(v) = ini.take("schedule", "refit_codebooks") {
            s.refit_codebooks = parse_val("schedule", "refit_codebooks", &v)?;
        }
        let mut policy = QuantPolicy::default();
        if let Some(v) = ini.take("schedule", "quantize_biases") {
            policy.include_biases = parse_val("schedule", "quantize_biases", &v)?;
        }
        if let Some(v) = ini.take("schedule", "quantize_head") {
            policy.include_head = parse_val("schedule", "quantize_head", &v)?;
        }
        if let Some(v) = ini.take("schedule", "kmeans_max_iters") {
            policy.max_iters = parse_val("schedule", "kmeans_max_iters", &v)?;
        }
        if let Some(v) = ini.take("schedule", "kmeans_restarts") {
            policy.restarts = parse_val("schedule", "kmeans_restarts", &v)?;
        }
        s.policy = policy;

        if let Some(v) = ini.take("ablate", "bits") {
            cfg.ablate.bits = parse_list("ablate", "bits", &v)?;
        }
        if let Some(v) = ini.take("ablate", "seeds") {
            cfg.ablate.seeds = parse_list("ablate", "seeds", &v)?;
        }
        if let Some(v) = ini.take("ablate", "pretrain_epochs") {
            cfg.ablate.pretrain_epochs = parse_val("ablate", "pretrain_epochs", &v)?;
        }
        if let Some(v) = ini.take("ablate", "pretrain_lr") {
            cfg.ablate.pretrain_lr = parse_val("ablate", "pretrain_lr", &v)?;
        }

        for (k, v) in ini.take_section("energy") {
            let bits: u8 = parse_val("energy", &k, &k)?;
            cfg.energy_table.insert(bits, parse_val("energy", &k, &v)?);
        }

        ini.reject_unknown()?;
        Ok(cfg)
    }

    /// Serializes every resolved value; feeding the result back reproduces
    /// the run without the original flags.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let conv = |c: &[ConvSpec]| {
            c.iter()
                .map(|s| format!("{}:{}:{}", s.kernel, s.out_channels, s.stride))
                .collect::<Vec<_>>()
                .join(",")
        };
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(out, "[paths]");
        let _ = writeln!(out, "run_dir = {}", self.paths.run_dir.display());
        let _ = writeln!(out, "corpus_dir = {}", self.paths.corpus_dir.display());
        let _ = writeln!(
            out,
            "teacher_checkpoint = {}",
            self.paths.teacher_checkpoint.display()
        );
        if let Some(p) = &self.paths.pretrained_checkpoint {
            let _ = writeln!(out, "pretrained_checkpoint = {}", p.display());
        }
        let _ = writeln!(out, "\n[corpus]");
        let _ = writeln!(out, "n_classes = {}", self.corpus.n_classes);
        let _ = writeln!(out, "samples_per_class = {}", self.corpus.samples_per_class);
        let _ = writeln!(out, "sample_rate = {}", self.corpus.sample_rate);
        let _ = writeln!(out, "duration_s = {}", self.corpus.duration_s);
        let _ = writeln!(
            out,
            "snr_db = {}",
            self.corpus
                .snr_db
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(out, "seed = {}", self.corpus.seed);
        let _ = writeln!(out, "\n[mel]");
        let _ = writeln!(out, "n_mels = {}", self.mel.n_mels);
        let _ = writeln!(out, "window_ms = {}", self.mel.window_ms);
        let _ = writeln!(out, "hop_ms = {}", self.mel.hop_ms);
        let _ = writeln!(out, "fmin = {}", self.mel.fmin);
        let _ = writeln!(out, "fmax = {}", self.mel.fmax);
        let _ = writeln!(out, "log_floor = {}", self.mel.log_floor);
        let _ = writeln!(out, "\n[teacher]");
        let _ = writeln!(out, "conv = {}", conv(&self.teacher.encoder.conv));
        let _ = writeln!(out, "ff = {}", list(&self.teacher.encoder.ff));
        let _ = writeln!(out, "latent_dim = {}", self.teacher.encoder.latent_dim);
        let _ = writeln!(out, "epochs = {}", self.teacher.epochs);
        let _ = writeln!(out, "patience = {}", self.teacher.patience);
        let _ = writeln!(out, "lr = {}", self.teacher.lr);
        let _ = writeln!(out, "batch_size = {}", self.teacher.batch_size);
        let _ = writeln!(out, "seed = {}", self.teacher.seed);
        let _ = writeln!(out, "\n[student]");
        let _ = writeln!(out, "conv = {}", conv(&self.student.conv));
        let _ = writeln!(out, "ff = {}", list(&self.student.ff));
        let _ = writeln!(out, "latent_dim = {}", self.student.latent_dim);
        let s = &self.schedule;
        let _ = writeln!(out, "\n[schedule]");
        let _ = writeln!(out, "cycles = {}", s.cycles);
        let _ = writeln!(out, "distill_epochs = {}", s.distill_epochs);
        let _ = writeln!(out, "quant_epochs = {}", s.quant_epochs);
        let _ = writeln!(out, "final_quant_epochs = {}", s.final_quant_epochs);
        let _ = writeln!(out, "alpha = {}", s.alpha);
        let _ = writeln!(out, "bits = {}", s.bit_length);
        let _ = writeln!(out, "lr_encoder = {}", s.lr_encoder);
        let _ = writeln!(out, "lr_classifier = {}", s.lr_classifier);
        let _ = writeln!(out, "lr_codebook = {}", s.lr_codebook);
        let _ = writeln!(
            out,
            "optimizer = {}",
            match s.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
        );
        let _ = writeln!(out, "batch_size = {}", s.batch_size);
        let _ = writeln!(out, "seed = {}", s.seed);
        let _ = writeln!(out, "gt_double_count = {}", s.gt_double_count);
        let _ = writeln!(out, "refit_codebooks = {}", s.refit_codebooks);
        let _ = writeln!(out, "quantize_biases = {}", s.policy.include_biases);
        let _ = writeln!(out, "quantize_head = {}", s.policy.include_head);
        let _ = writeln!(out, "kmeans_max_iters = {}", s.policy.max_iters);
        let _ = writeln!(out, "kmeans_restarts = {}", s.policy.restarts);
        let _ = writeln!(out, "\n[ablate]");
        let _ = writeln!(
            out,
            "bits = {}",
            self.ablate
                .bits
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(
            out,
            "seeds = {}",
            self.ablate
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(out, "pretrain_epochs = {}", self.ablate.pretrain_epochs);
        let _ = writeln!(out, "pretrain_lr = {}", self.ablate.pretrain_lr);
        if !self.energy_table.is_empty() {
            let _ = writeln!(out, "\n[energy]");
            for (bits, j) in &self.energy_table {
                let _ = writeln!(out, "{bits} = {j}");
            }
        }
        out
    }

    /// Writes the resolved echo into the run directory.
    pub fn write_echo(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.paths.run_dir).map_err(|e| {
            CliError::user(format!(
                "cannot create run dir {}: {e}",
                self.paths.run_dir.display()
            ))
        })?;
        let path = self.paths.run_dir.join("config.resolved.ini");
        std::fs::write(&path, self.echo())
            .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
    }
}
