//! The alternating trainer.
//!
//! Training runs in cycles. Each cycle first distills (gate = 1): the
//! full-precision student trains on the blended feature-alignment /
//! cross-entropy objective against the frozen teacher. The cycle then
//! quantizes (gate = 0): codebooks are re-fitted to the freshly distilled
//! weights (warm-started from the previous codebooks), every forward pass
//! runs through the reconstructed weights, and the task-loss gradient
//! flows into the shared centroids (the indicator sum over each
//! centroid's assigned weights) and into the exempt full-precision
//! tensors. After the last cycle a final quantization phase trains the
//! codebooks once more, and the result ships as centroids plus indices.
//!
//! Phase gating is structural, not arithmetical: the distillation phase
//! never touches a centroid and the quantization phase never writes a
//! full-precision weight matrix. Between a quantization phase and the
//! next distillation phase the reconstructed weights are materialized
//! back into the student, so each distillation run resumes from exactly
//! what the previous phase would deploy.
//!
//! Everything is driven by one seed: batch order, codebook restarts and
//! initialization are all substreams of it, so a `(seed, schedule, data)`
//! triple fixes the whole history bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{backward, AutodiffError, Tape, Tensor};
use crate::dsp::{log_mel, MelConfig, MelSpectrogram};
use crate::io::{wav::read_wav, IoError, Manifest};
use crate::loss::{
    combined_loss, cross_entropy, distillation_loss, l1_feature_loss, LossBreakdown, LossError,
    Reduction,
};
use crate::metrics::{accuracy, macro_f1, MetricsError};
use crate::model::{BoundLayer, BoundModel, ModelError, ModelGraph, Role};
use crate::quant::{
    kmeans_fit, kmeans_fit_warm, quantized_by_policy, QuantError, QuantPolicy, QuantizedModel,
};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in {phase} phase, cycle {cycle}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: Phase,
        cycle: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("the teacher must be a frozen teacher-role graph")]
    TeacherNotFrozen,
    #[error("teacher latent dim {teacher} does not match student latent dim {student}")]
    LatentDimMismatch { teacher: usize, student: usize },
    #[error("schedule invalid: {0}")]
    BadSchedule(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {0:?} is not in the training vocabulary")]
    UnknownLabel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Distill,
    Quantize,
    FinalQuantize,
}

impl Phase {
    pub fn gamma(self) -> f64 {
        match self {
            Phase::Distill => 1.0,
            Phase::Quantize | Phase::FinalQuantize => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Distill => "distill",
            Phase::Quantize => "quantize",
            Phase::FinalQuantize => "final_quantize",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// The full training schedule. Defaults: five cycles of five distillation
/// and five quantization epochs, a five-epoch final quantization pass,
/// an even blend (`alpha = 0.5`), adam, and the split learning rates
/// (1e-6 encoder, 1e-3 classifier, 1e-3 codebook).
#[derive(Debug, Clone)]
pub struct MctSchedule {
    pub cycles: usize,
    pub distill_epochs: usize,
    pub quant_epochs: usize,
    pub final_quant_epochs: usize,
    pub alpha: f64,
    pub bit_length: u8,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub lr_codebook: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    /// When set, the scalar pushed through backprop in quantization phases
    /// is `l_centroid + l_gt` (the task loss counted twice); by default the
    /// task loss is evaluated once and its gradient routed to both the
    /// codebooks and the exempt tensors. The history reports both scalar
    /// conventions either way.
    pub gt_double_count: bool,
    /// Re-fit codebooks (warm-started) at each quantization phase entry;
    /// disable to freeze the assignment maps after the first fit.
    pub refit_codebooks: bool,
    pub policy: QuantPolicy,
    /// Print one line per epoch (phase, cycle, losses, metrics) to stdout.
    pub progress: bool,
}

impl MctSchedule {
    pub fn new(bit_length: u8) -> Self {
        Self {
            cycles: 5,
            distill_epochs: 5,
            quant_epochs: 5,
            final_quant_epochs: 5,
            alpha: 0.5,
            bit_length,
            lr_encoder: 1e-6,
            lr_classifier: 1e-3,
            lr_codebook: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
            seed: 0,
            gt_double_count: false,
            refit_codebooks: true,
            policy: QuantPolicy::default(),
            progress: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.cycles < 1 {
            return Err(TrainError::BadSchedule("cycles must be >= 1".into()));
        }
        if self.distill_epochs < 1 || self.quant_epochs < 1 || self.final_quant_epochs < 1 {
            return Err(TrainError::BadSchedule("epoch counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::BadSchedule(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadSchedule("batch_size must be >= 1".into()));
        }
        if !(1..=16).contains(&self.bit_length) {
            return Err(TrainError::BadSchedule(format!(
                "bit length {} outside 1..=16",
                self.bit_length
            )));
        }
        Ok(())
    }

    /// The gate sequence the history must record: `[1] * distill_epochs,
    /// [0] * quant_epochs`, repeated `cycles` times, then
    /// `[0] * final_quant_epochs`.
    pub fn expected_gamma_sequence(&self) -> Vec<u8> {
        let mut seq = Vec::new();
        for _ in 0..self.cycles {
            seq.extend(std::iter::repeat_n(1u8, self.distill_epochs));
            seq.extend(std::iter::repeat_n(0u8, self.quant_epochs));
        }
        seq.extend(std::iter::repeat_n(0u8, self.final_quant_epochs));
        seq
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// In-memory dataset: one mel spectrogram and class index per utterance.
pub struct Dataset {
    pub items: Vec<(MelSpectrogram, usize)>,
    pub vocab: Vec<String>,
}

impl Dataset {
    /// Loads every manifest row, decoding audio and computing features.
    /// `vocab` overrides the manifest-derived vocabulary (pass the training
    /// vocabulary when loading validation or test splits so indices agree).
    pub fn load(
        manifest: &Manifest,
        mel_cfg: &MelConfig,
        vocab: Option<&[String]>,
    ) -> Result<Self, TrainError> {
        let vocab: Vec<String> = match vocab {
            Some(v) => v.to_vec(),
            None => manifest.vocab.clone(),
        };
        let mut items = Vec::with_capacity(manifest.rows.len());
        for (row, (_, label)) in manifest.rows.iter().enumerate() {
            let class = vocab
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| TrainError::UnknownLabel(label.clone()))?;
            let (wave, _) = read_wav(&manifest.audio_path(row))?;
            items.push((log_mel(&wave, mel_cfg)?, class));
        }
        if items.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self { items, vocab })
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Train and validation splits used by one run.
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub cycle: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

impl EpochRecord {
    /// One-line progress summary.
    pub fn progress_line(&self) -> String {
        format!(
            "cycle {} {} epoch {}: l1 {:.5} l_gt {:.5} l_dis {:.5} l_centroid {:.5} l_quant {:.5} total {:.5} | val acc {:.4} f1 {:.4}",
            self.cycle,
            self.phase,
            self.epoch,
            self.losses.l1,
            self.losses.l_gt,
            self.losses.l_dis,
            self.losses.l_centroid,
            self.losses.l_quant,
            self.losses.total,
            self.val_accuracy,
            self.val_macro_f1
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn gamma_sequence(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.losses.gamma as u8).collect()
    }

    /// `cycle,phase,epoch,l1,l_gt,l_dis,l_centroid,l_quant,total,acc,f1`
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out =
            String::from("cycle,phase,epoch,l1,l_gt,l_dis,l_centroid,l_quant,total,acc,f1\n");
        for r in &self.records {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.cycle,
                r.phase,
                r.epoch,
                l.l1,
                l.l_gt,
                l.l_dis,
                l.l_centroid,
                l.l_quant,
                l.total,
                r.val_accuracy,
                r.val_macro_f1
            ));
        }
        std::fs::write(path, out)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<String, AdamSlot>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: BTreeMap::new(),
        }
    }

    fn step(&mut self, key: &str, data: &mut [f32], grad: &[f32], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (d, &g) in data.iter_mut().zip(grad) {
                    *d -= (lr * g as f64) as f32;
                }
            }
            OptimizerKind::Adam => {
                let slot = self
                    .slots
                    .entry(key.to_string())
                    .or_insert_with(|| AdamSlot {
                        m: vec![0.0; data.len()],
                        v: vec![0.0; data.len()],
                        t: 0,
                    });
                slot.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
                for i in 0..data.len() {
                    let g = grad[i] as f64;
                    slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                    slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    data[i] -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
                }
            }
        }
    }

    fn drop_codebook_slots(&mut self) {
        self.slots.retain(|k, _| !k.starts_with("cb:"));
    }
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

/// Mutable state threaded through the phases.
pub struct TrainState {
    pub student: ModelGraph,
    pub codebooks: Option<QuantizedModel>,
    pub phase: Phase,
    pub cycle_index: usize,
    pub history: History,
    optimizer: Optimizer,
    /// Set when distillation has moved the weights since the last fit.
    weights_stale: bool,
}

impl TrainState {
    pub fn new(student: ModelGraph, sched: &MctSchedule) -> Self {
        Self {
            student,
            codebooks: None,
            phase: Phase::Distill,
            cycle_index: 0,
            history: History::default(),
            optimizer: Optimizer::new(sched.optimizer),
            weights_stale: true,
        }
    }

    /// The model as it would deploy right now: reconstructed weights if
    /// codebooks exist, the plain student otherwise.
    pub fn deployed_view(&self) -> ModelGraph {
        match &self.codebooks {
            Some(q) => with_current_base(q, &self.student).materialize(),
            None => self.student.clone(),
        }
    }
}

/// Codebooks always shadow the *current* student (exempt tensors update
/// during quantization phases).
fn with_current_base(q: &QuantizedModel, student: &ModelGraph) -> QuantizedModel {
    QuantizedModel {
        base: student.clone(),
        codebooks: q.codebooks.clone(),
    }
}

fn lr_for(name: &str, sched: &MctSchedule) -> f64 {
    if name.starts_with("head.") {
        sched.lr_classifier
    } else {
        sched.lr_encoder
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn shuffle_stream(phase: Phase, cycle: usize, epoch: usize) -> u64 {
    let tag = match phase {
        Phase::Distill => 1u64,
        Phase::Quantize => 2,
        Phase::FinalQuantize => 3,
    };
    (tag << 60) | ((cycle as u64) << 30) | epoch as u64
}

/// Weighted running mean of per-batch scalars.
#[derive(Default)]
struct Averager {
    sum: f64,
    weight: f64,
}

impl Averager {
    fn add(&mut self, value: f64, weight: f64) {
        self.sum += value * weight;
        self.weight += weight;
    }

    fn mean(&self) -> f64 {
        if self.weight > 0.0 {
            self.sum / self.weight
        } else {
            0.0
        }
    }
}

/// Divergence guard: a non-finite value anywhere in a forward output means
/// the step blew up, and the report must name the batch.
fn ensure_finite(
    t: &Tensor<f32>,
    phase: Phase,
    cycle: usize,
    epoch: usize,
    batch: usize,
) -> Result<(), TrainError> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss {
            phase,
            cycle,
            epoch,
            batch,
        })
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Argmax class predictions of a model over a dataset.
pub fn predict(model: &ModelGraph, data: &Dataset) -> Result<Vec<usize>, TrainError> {
    let bound = model.bind(None);
    let mut preds = Vec::with_capacity(data.len());
    for (mel, _) in &data.items {
        let logits = bound.logits(mel)?;
        let mut best = 0usize;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// `(accuracy, macro_f1)` of a model over a dataset.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<(f64, f64), TrainError> {
    let preds = predict(model, data)?;
    let labels: Vec<usize> = data.items.iter().map(|(_, l)| *l).collect();
    Ok((
        accuracy(&preds, &labels)?,
        macro_f1(&preds, &labels, data.n_classes())?,
    ))
}

// ---------------------------------------------------------------------------
// Distillation phase
// ---------------------------------------------------------------------------

/// One distillation phase (`gamma = 1`): full-precision forward, blended
/// objective, updates to encoder and classifier. Codebooks are untouched.
pub fn run_distill_phase(
    state: &mut TrainState,
    teacher: &ModelGraph,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<(), TrainError> {
    if teacher.role != Role::Teacher {
        return Err(TrainError::TeacherNotFrozen);
    }
    state.phase = Phase::Distill;
    let teacher_bound = teacher.bind(None);

    for epoch in 0..sched.distill_epochs {
        let mut rng = SplitMix64::substream(
            sched.seed,
            shuffle_stream(Phase::Distill, state.cycle_index, epoch),
        );
        let mut l1_avg = Averager::default();
        let mut gt_avg = Averager::default();
        for (batch_idx, batch) in batches(data.train.len(), sched.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let tape = Tape::new();
            let bound = state.student.bind(Some(&tape));
            let mut z_teacher = Vec::with_capacity(batch.len());
            let mut z_student = Vec::with_capacity(batch.len());
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (mel, label) = &data.train.items[i];
                z_teacher.push(teacher_bound.features(mel)?);
                let z = bound.features(mel)?;
                logit_rows.push(bound.logits_from_features(&z)?);
                z_student.push(z);
                labels.push(*label);
            }
            let zt = Tensor::stack_rows(&z_teacher)?;
            let zs = Tensor::stack_rows(&z_student)?;
            let logits = Tensor::stack_rows(&logit_rows)?;
            ensure_finite(&zs, Phase::Distill, state.cycle_index, epoch, batch_idx)?;
            ensure_finite(&logits, Phase::Distill, state.cycle_index, epoch, batch_idx)?;

            let l1 = l1_feature_loss(&zt, &zs, Reduction::Mean)?;
            let l_gt = cross_entropy(&logits, &labels)?;
            let l_dis = distillation_loss(&l1, &l_gt, sched.alpha)?;
            let total = combined_loss(Some(&l_dis), None, Phase::Distill.gamma())?;
            ensure_finite(&total, Phase::Distill, state.cycle_index, epoch, batch_idx)?;
            backward(&total)?;

            apply_full_precision_grads(state, &bound, sched);

            let w = batch.len() as f64;
            l1_avg.add(l1.item() as f64, w);
            gt_avg.add(l_gt.item() as f64, w);
        }

        let (val_acc, val_f1) = evaluate(&state.student, &data.val)?;
        let (l1, l_gt) = (l1_avg.mean(), gt_avg.mean());
        // the blend identities are re-applied to the epoch means so the
        // stored record satisfies them exactly
        let l_dis = sched.alpha * l1 + (1.0 - sched.alpha) * l_gt;
        let record = EpochRecord {
            cycle: state.cycle_index,
            phase: Phase::Distill,
            epoch,
            losses: LossBreakdown {
                l1,
                l_gt,
                l_dis,
                l_centroid: 0.0,
                l_quant: l_gt,
                total: l_dis,
                alpha: sched.alpha,
                gamma: 1.0,
            },
            val_accuracy: val_acc,
            val_macro_f1: val_f1,
        };
        if sched.progress {
            println!("{}", record.progress_line());
        }
        state.history.records.push(record);
        state.weights_stale = true;
    }
    Ok(())
}

fn apply_full_precision_grads(state: &mut TrainState, bound: &BoundModel, sched: &MctSchedule) {
    let mut updates: Vec<(String, Vec<f32>)> = Vec::new();
    for layer in &bound.layers {
        if let Some(g) = layer.weight.grad() {
            updates.push((layer.weight_name.clone(), g));
        }
        if let Some(g) = layer.bias.grad() {
            updates.push((layer.bias_name.clone(), g));
        }
    }
    if let Some((w, b)) = &bound.head {
        if let Some(g) = w.grad() {
            updates.push(("head.weight".into(), g));
        }
        if let Some(g) = b.grad() {
            updates.push(("head.bias".into(), g));
        }
    }
    for (name, grad) in updates {
        let lr = lr_for(&name, sched);
        let param = state.student.param_mut(&name).expect("bound param exists");
        state.optimizer.step(&name, &mut param.data, &grad, lr);
    }
}

// ---------------------------------------------------------------------------
// Quantization phase
// ---------------------------------------------------------------------------

/// Fits or re-fits codebooks against the current student weights, warm-
/// starting from existing centroids when available.
fn fit_codebooks(state: &mut TrainState, sched: &MctSchedule) -> Result<(), TrainError> {
    let existing = state.codebooks.take();
    let mut codebooks = BTreeMap::new();
    for (i, p) in state.student.named_params().enumerate() {
        if !quantized_by_policy(&p.name, &sched.policy) {
            continue;
        }
        let fit = match existing.as_ref().and_then(|q| q.codebooks.get(&p.name)) {
            Some(prev) => kmeans_fit_warm(
                &p.data,
                sched.bit_length,
                sched.policy.max_iters,
                &prev.centroids,
            )?,
            None => kmeans_fit(
                &p.data,
                sched.bit_length,
                sched.policy.max_iters,
                SplitMix64::substream(sched.seed, 0x_C0DE_0000 + i as u64).next_u64(),
                sched.policy.restarts,
            )?,
        };
        codebooks.insert(p.name.clone(), fit.codebook);
    }
    state.codebooks = Some(QuantizedModel {
        base: state.student.clone(),
        codebooks,
    });
    state.optimizer.drop_codebook_slots();
    state.weights_stale = false;
    Ok(())
}

/// Bound model plus the watched centroid leaves, keyed by tensor name.
type QuantizedBinding = (BoundModel, Vec<(String, Tensor<f32>)>);

/// Binds the student with quantized tensors expressed as gathers from
/// watched centroid leaves.
fn bind_quantized(
    student: &ModelGraph,
    q: &QuantizedModel,
    tape: &Tape<f32>,
) -> Result<QuantizedBinding, TrainError> {
    let mut centroid_leaves = Vec::new();
    let mut tensor_for =
        |name: &str, data: &[f32], shape: &[usize]| -> Result<Tensor<f32>, TrainError> {
            match q.codebooks.get(name) {
                Some(cb) => {
                    let leaf = tape.watch(cb.centroids.clone(), &[cb.k()])?;
                    let idx: Vec<usize> = cb.indices.iter().map(|&i| i as usize).collect();
                    let w = leaf.gather_rows(&idx)?.reshape(shape)?;
                    centroid_leaves.push((name.to_string(), leaf));
                    Ok(w)
                }
                None => Ok(tape.watch(data.to_vec(), shape)?),
            }
        };
    let mut layers = Vec::with_capacity(student.layers.len());
    for l in &student.layers {
        layers.push(BoundLayer {
            kind: l.kind,
            weight_name: l.weight.name.clone(),
            bias_name: l.bias.name.clone(),
            weight: tensor_for(&l.weight.name, &l.weight.data, &l.weight.shape)?,
            bias: tensor_for(&l.bias.name, &l.bias.data, &l.bias.shape)?,
        });
    }
    let head = match &student.head {
        Some(h) => Some((
            tensor_for(&h.weight.name, &h.weight.data, &h.weight.shape)?,
            tensor_for(&h.bias.name, &h.bias.data, &h.bias.shape)?,
        )),
        None => None,
    };
    Ok((
        BoundModel {
            activation: student.config.activation,
            n_mels: student.config.n_mels,
            layers,
            head,
        },
        centroid_leaves,
    ))
}

/// One quantization phase (`gamma = 0`): forward through reconstructed
/// weights, task-loss gradients into centroids (at the codebook rate) and
/// exempt tensors; assignment maps frozen; weight matrices untouched.
pub fn run_quant_phase(
    state: &mut TrainState,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<(), TrainError> {
    if state.phase == Phase::Distill {
        state.phase = Phase::Quantize;
    }
    let phase = state.phase;
    let epochs = match phase {
        Phase::FinalQuantize => sched.final_quant_epochs,
        _ => sched.quant_epochs,
    };
    if state.codebooks.is_none() || (sched.refit_codebooks && state.weights_stale) {
        fit_codebooks(state, sched)?;
    }

    for epoch in 0..epochs {
        let mut rng =
            SplitMix64::substream(sched.seed, shuffle_stream(phase, state.cycle_index, epoch));
        let mut gt_avg = Averager::default();
        for (batch_idx, batch) in batches(data.train.len(), sched.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let tape = Tape::new();
            let q = state.codebooks.as_ref().expect("fitted above");
            let (bound, centroid_leaves) = bind_quantized(&state.student, q, &tape)?;
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (mel, label) = &data.train.items[i];
                logit_rows.push(bound.logits(mel)?);
                labels.push(*label);
            }
            let logits = Tensor::stack_rows(&logit_rows)?;
            ensure_finite(&logits, phase, state.cycle_index, epoch, batch_idx)?;
            let l_task = cross_entropy(&logits, &labels)?;

            // the centroid-path loss and the ground-truth loss are the same
            // task evaluation; optionally backprop their sum instead
            let backprop_target = if sched.gt_double_count {
                crate::loss::quantization_loss(&l_task, &l_task)?
            } else {
                l_task.clone()
            };
            let total = combined_loss(None, Some(&backprop_target), phase.gamma())?;
            ensure_finite(&total, phase, state.cycle_index, epoch, batch_idx)?;
            backward(&total)?;

            // centroid updates
            let mut centroid_updates: Vec<(String, Vec<f32>)> = Vec::new();
            for (name, leaf) in &centroid_leaves {
                if let Some(g) = leaf.grad() {
                    centroid_updates.push((name.clone(), g));
                }
            }
            {
                let q = state.codebooks.as_mut().expect("fitted above");
                for (name, grad) in centroid_updates {
                    let cb = q.codebooks.get_mut(&name).expect("leaf from codebook");
                    state.optimizer.step(
                        &format!("cb:{name}"),
                        &mut cb.centroids,
                        &grad,
                        sched.lr_codebook,
                    );
                }
            }
            // exempt tensor updates
            let mut exempt_updates: Vec<(String, Vec<f32>)> = Vec::new();
            for layer in &bound.layers {
                if !state
                    .codebooks
                    .as_ref()
                    .unwrap()
                    .codebooks
                    .contains_key(&layer.weight_name)
                {
                    if let Some(g) = layer.weight.grad() {
                        exempt_updates.push((layer.weight_name.clone(), g));
                    }
                }
                if let Some(g) = layer.bias.grad() {
                    exempt_updates.push((layer.bias_name.clone(), g));
                }
            }
            if let Some((w, b)) = &bound.head {
                if !state
                    .codebooks
                    .as_ref()
                    .unwrap()
                    .codebooks
                    .contains_key("head.weight")
                {
                    if let Some(g) = w.grad() {
                        exempt_updates.push(("head.weight".into(), g));
                    }
                }
                if let Some(g) = b.grad() {
                    exempt_updates.push(("head.bias".into(), g));
                }
            }
            for (name, grad) in exempt_updates {
                let lr = lr_for(&name, sched);
                let param = state.student.param_mut(&name).expect("bound param exists");
                state.optimizer.step(&name, &mut param.data, &grad, lr);
            }

            gt_avg.add(l_task.item() as f64, batch.len() as f64);
        }

        let deployed = state.deployed_view();
        let (val_acc, val_f1) = evaluate(&deployed, &data.val)?;
        let l_task = gt_avg.mean();
        let record = EpochRecord {
            cycle: state.cycle_index,
            phase,
            epoch,
            losses: LossBreakdown {
                l1: 0.0,
                l_gt: l_task,
                l_dis: (1.0 - sched.alpha) * l_task,
                l_centroid: l_task,
                l_quant: l_task + l_task,
                total: l_task + l_task,
                alpha: sched.alpha,
                gamma: 0.0,
            },
            val_accuracy: val_acc,
            val_macro_f1: val_f1,
        };
        if sched.progress {
            println!("{}", record.progress_line());
        }
        state.history.records.push(record);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole pipelines
// ---------------------------------------------------------------------------

fn check_pairing(teacher: &ModelGraph, student: &ModelGraph) -> Result<(), TrainError> {
    if teacher.role != Role::Teacher {
        return Err(TrainError::TeacherNotFrozen);
    }
    if teacher.config.latent_dim != student.config.latent_dim {
        return Err(TrainError::LatentDimMismatch {
            teacher: teacher.config.latent_dim,
            student: student.config.latent_dim,
        });
    }
    Ok(())
}

/// The full alternating pipeline: `cycles` rounds of distillation then
/// quantization, weights materialized from the codebooks between cycles,
/// closed by the final quantization phase.
pub fn mct_train(
    teacher: &ModelGraph,
    student: ModelGraph,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<(QuantizedModel, History), TrainError> {
    sched.validate()?;
    check_pairing(teacher, &student)?;
    let mut state = TrainState::new(student, sched);

    for cycle in 0..sched.cycles {
        state.cycle_index = cycle;
        if cycle > 0 {
            // resume distillation from exactly what the codebooks deploy
            let q = state.codebooks.as_ref().expect("previous cycle fitted");
            state.student = with_current_base(q, &state.student).materialize();
        }
        state.phase = Phase::Distill;
        run_distill_phase(&mut state, teacher, data, sched)?;
        state.phase = Phase::Quantize;
        run_quant_phase(&mut state, data, sched)?;
    }
    state.phase = Phase::FinalQuantize;
    run_quant_phase(&mut state, data, sched)?;

    let q = state.codebooks.take().expect("quant phases ran");
    let result = with_current_base(&q, &state.student);
    Ok((result, state.history))
}

/// Ablation comparator: all distillation epochs up front, then a single
/// k-means fit and reconstruction with no codebook training.
pub fn baseline_quantize_after_distill(
    teacher: &ModelGraph,
    student: ModelGraph,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<(QuantizedModel, History), TrainError> {
    sched.validate()?;
    check_pairing(teacher, &student)?;
    let mut state = TrainState::new(student, sched);
    for cycle in 0..sched.cycles {
        state.cycle_index = cycle;
        state.phase = Phase::Distill;
        run_distill_phase(&mut state, teacher, data, sched)?;
    }
    fit_codebooks(&mut state, sched)?;
    let q = state.codebooks.take().expect("just fitted");
    let result = with_current_base(&q, &state.student);
    let (val_acc, val_f1) = evaluate(&result.materialize(), &data.val)?;
    state.history.records.push(EpochRecord {
        cycle: sched.cycles.saturating_sub(1),
        phase: Phase::FinalQuantize,
        epoch: 0,
        losses: LossBreakdown {
            l1: 0.0,
            l_gt: 0.0,
            l_dis: 0.0,
            l_centroid: 0.0,
            l_quant: 0.0,
            total: 0.0,
            alpha: sched.alpha,
            gamma: 0.0,
        },
        val_accuracy: val_acc,
        val_macro_f1: val_f1,
    });
    Ok((result, state.history))
}

/// Ablation comparator: distillation only, never quantized.
pub fn distill_only(
    teacher: &ModelGraph,
    student: ModelGraph,
    data: &TrainData,
    sched: &MctSchedule,
) -> Result<(ModelGraph, History), TrainError> {
    sched.validate()?;
    check_pairing(teacher, &student)?;
    let mut state = TrainState::new(student, sched);
    for cycle in 0..sched.cycles {
        state.cycle_index = cycle;
        state.phase = Phase::Distill;
        run_distill_phase(&mut state, teacher, data, sched)?;
    }
    Ok((state.student, state.history))
}

/// Options of the plain supervised trainer.
#[derive(Debug, Clone)]
pub struct SupervisedOptions {
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub progress: bool,
}

/// Plain supervised training with a classifier head; patience-based early
/// stop on validation accuracy, returning the best checkpoint seen.
pub fn train_supervised(
    mut model: ModelGraph,
    data: &TrainData,
    opts: &SupervisedOptions,
) -> Result<(ModelGraph, History), TrainError> {
    assert_eq!(
        model.role,
        Role::Student,
        "supervised training needs a head"
    );
    let mut history = History::default();
    let mut optim = Optimizer::new(opts.optimizer);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    let mut since_best = 0usize;

    for epoch in 0..opts.epochs {
        let mut rng = SplitMix64::substream(opts.seed, 0x_5000_0000_0000 + epoch as u64);
        let mut gt_avg = Averager::default();
        for (batch_idx, batch) in batches(data.train.len(), opts.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let tape = Tape::new();
            let bound = model.bind(Some(&tape));
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (mel, label) = &data.train.items[i];
                logit_rows.push(bound.logits(mel)?);
                labels.push(*label);
            }
            let logits = Tensor::stack_rows(&logit_rows)?;
            ensure_finite(&logits, Phase::Distill, 0, epoch, batch_idx)?;
            let l_gt = cross_entropy(&logits, &labels)?;
            ensure_finite(&l_gt, Phase::Distill, 0, epoch, batch_idx)?;
            backward(&l_gt)?;
            let mut updates: Vec<(String, Vec<f32>)> = Vec::new();
            for layer in &bound.layers {
                if let Some(g) = layer.weight.grad() {
                    updates.push((layer.weight_name.clone(), g));
                }
                if let Some(g) = layer.bias.grad() {
                    updates.push((layer.bias_name.clone(), g));
                }
            }
            if let Some((w, b)) = &bound.head {
                if let Some(g) = w.grad() {
                    updates.push(("head.weight".into(), g));
                }
                if let Some(g) = b.grad() {
                    updates.push(("head.bias".into(), g));
                }
            }
            for (name, grad) in updates {
                let param = model.param_mut(&name).expect("bound param exists");
                optim.step(&name, &mut param.data, &grad, opts.lr);
            }
            gt_avg.add(l_gt.item() as f64, batch.len() as f64);
        }
        let (val_acc, val_f1) = evaluate(&model, &data.val)?;
        let l_gt = gt_avg.mean();
        let record = EpochRecord {
            cycle: 0,
            phase: Phase::Distill,
            epoch,
            losses: LossBreakdown {
                l1: 0.0,
                l_gt,
                l_dis: l_gt,
                l_centroid: 0.0,
                l_quant: l_gt,
                total: l_gt,
                alpha: 0.0,
                gamma: 1.0,
            },
            val_accuracy: val_acc,
            val_macro_f1: val_f1,
        };
        if opts.progress {
            println!("{}", record.progress_line());
        }
        history.records.push(record);
        if val_acc > best_acc {
            best_acc = val_acc;
            best_model = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{initialize, Activation, ConvSpec, EncoderConfig, InitMode};

    fn student_config() -> EncoderConfig {
        EncoderConfig {
            n_mels: 6,
            conv_layers: vec![ConvSpec {
                kernel: 3,
                out_channels: 5,
                stride: 2,
            }],
            ff_layers: vec![8],
            latent_dim: 6,
            activation: Activation::Gelu,
        }
    }

    fn teacher_config() -> EncoderConfig {
        EncoderConfig {
            n_mels: 6,
            conv_layers: vec![ConvSpec {
                kernel: 3,
                out_channels: 10,
                stride: 2,
            }],
            ff_layers: vec![16],
            latent_dim: 6,
            activation: Activation::Gelu,
        }
    }

    /// Separable in-memory toy task: class c boosts mel rows around c.
    fn toy_data(per_class: usize, n_classes: usize, seed: u64) -> TrainData {
        let make = |count: usize, stream: u64| -> Dataset {
            let mut rng = SplitMix64::substream(seed, stream);
            let mut items = Vec::new();
            let (n_mels, frames) = (6usize, 12usize);
            for c in 0..n_classes {
                for _ in 0..count {
                    let mut values = vec![0.0f32; n_mels * frames];
                    for m in 0..n_mels {
                        for t in 0..frames {
                            let base = if m == c { 2.0 } else { -1.0 };
                            values[m * frames + t] = base as f32 + 0.3 * rng.next_normal() as f32;
                        }
                    }
                    items.push((
                        MelSpectrogram {
                            values,
                            n_mels,
                            frames,
                            config: MelConfig {
                                n_mels,
                                ..MelConfig::default()
                            },
                        },
                        c,
                    ));
                }
            }
            Dataset {
                items,
                vocab: (0..n_classes).map(|c| format!("w{c}")).collect(),
            }
        };
        TrainData {
            train: make(per_class, 1),
            val: make(3, 2),
        }
    }

    fn quick_schedule(bits: u8, seed: u64) -> MctSchedule {
        MctSchedule {
            cycles: 2,
            distill_epochs: 2,
            quant_epochs: 2,
            final_quant_epochs: 2,
            lr_encoder: 1e-3,
            lr_classifier: 1e-3,
            lr_codebook: 1e-3,
            batch_size: 8,
            seed,
            ..MctSchedule::new(bits)
        }
    }

    fn models(seed: u64) -> (ModelGraph, ModelGraph) {
        let teacher =
            initialize(&teacher_config(), 3, Role::Teacher, InitMode::Random, seed).unwrap();
        let student = initialize(
            &student_config(),
            3,
            Role::Student,
            InitMode::Random,
            seed + 1,
        )
        .unwrap();
        (teacher, student)
    }

    #[test]
    fn zero_learning_rates_leave_parameters_bit_unchanged() {
        let (teacher, student) = models(10);
        let data = toy_data(4, 3, 0);
        let mut sched = quick_schedule(4, 1);
        sched.distill_epochs = 1;
        sched.lr_encoder = 0.0;
        sched.lr_classifier = 0.0;
        let before = student.clone();
        let mut state = TrainState::new(student, &sched);
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        assert_eq!(state.student, before);
    }

    #[test]
    fn alpha_zero_matches_plain_supervised_updates() {
        // the feature term is evaluated but its gradient is exactly zero
        let (teacher, student) = models(11);
        let data = toy_data(4, 3, 1);
        let mut sched = quick_schedule(4, 2);
        sched.distill_epochs = 1;
        sched.alpha = 0.0;
        let mut with_blend = TrainState::new(student.clone(), &sched);
        run_distill_phase(&mut with_blend, &teacher, &data, &sched).unwrap();

        // reference: identical loop without any feature term
        let (reference, _) = train_supervised_like(&student, &data, &sched);
        assert_eq!(with_blend.student, reference);
        // and the feature loss was still measured
        assert!(with_blend.history.records[0].losses.l1 > 0.0);
    }

    /// Re-runs the distill loop arithmetic with the L1 branch absent.
    fn train_supervised_like(
        student: &ModelGraph,
        data: &TrainData,
        sched: &MctSchedule,
    ) -> (ModelGraph, History) {
        let mut model = student.clone();
        let mut optim = Optimizer::new(sched.optimizer);
        for epoch in 0..sched.distill_epochs {
            let mut rng =
                SplitMix64::substream(sched.seed, shuffle_stream(Phase::Distill, 0, epoch));
            for batch in batches(data.train.len(), sched.batch_size, &mut rng) {
                let tape = Tape::new();
                let bound = model.bind(Some(&tape));
                let mut logit_rows = Vec::new();
                let mut labels = Vec::new();
                for &i in &batch {
                    let (mel, label) = &data.train.items[i];
                    logit_rows.push(bound.logits(mel).unwrap());
                    labels.push(*label);
                }
                let logits = Tensor::stack_rows(&logit_rows).unwrap();
                let l_gt = cross_entropy(&logits, &labels).unwrap();
                backward(&l_gt).unwrap();
                let mut updates: Vec<(String, Vec<f32>)> = Vec::new();
                for layer in &bound.layers {
                    if let Some(g) = layer.weight.grad() {
                        updates.push((layer.weight_name.clone(), g));
                    }
                    if let Some(g) = layer.bias.grad() {
                        updates.push((layer.bias_name.clone(), g));
                    }
                }
                if let Some((w, b)) = &bound.head {
                    if let Some(g) = w.grad() {
                        updates.push(("head.weight".into(), g));
                    }
                    if let Some(g) = b.grad() {
                        updates.push(("head.bias".into(), g));
                    }
                }
                for (name, grad) in updates {
                    let lr = lr_for(&name, sched);
                    let param = model.param_mut(&name).unwrap();
                    optim.step(&name, &mut param.data, &grad, lr);
                }
            }
        }
        (model, History::default())
    }

    #[test]
    fn distillation_loss_decreases_over_epochs() {
        let (teacher, student) = models(12);
        let data = toy_data(6, 3, 2);
        let mut sched = quick_schedule(4, 3);
        sched.distill_epochs = 2;
        let mut state = TrainState::new(student, &sched);
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        let r = &state.history.records;
        assert!(
            r[1].losses.l_dis < r[0].losses.l_dis,
            "{} !< {}",
            r[1].losses.l_dis,
            r[0].losses.l_dis
        );
    }

    #[test]
    fn zero_codebook_rate_freezes_centroids() {
        let (teacher, student) = models(13);
        let data = toy_data(4, 3, 3);
        let mut sched = quick_schedule(4, 4);
        sched.lr_codebook = 0.0;
        sched.lr_encoder = 0.0;
        sched.lr_classifier = 0.0;
        let mut state = TrainState::new(student, &sched);
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        state.phase = Phase::Quantize;
        run_quant_phase(&mut state, &data, &sched).unwrap();
        let q = state.codebooks.as_ref().unwrap();
        // refit from identical weights reproduces identical codebooks, and
        // zero-rate training cannot move them
        let refit = kmeans_fit_warm(
            &state.student.param("conv0.weight").unwrap().data,
            4,
            sched.policy.max_iters,
            &q.codebooks["conv0.weight"].centroids,
        )
        .unwrap();
        assert_eq!(
            refit.codebook.centroids,
            q.codebooks["conv0.weight"].centroids
        );
    }

    #[test]
    fn quant_steps_respect_the_distinct_value_bound() {
        let (teacher, student) = models(14);
        let data = toy_data(4, 3, 4);
        let sched = quick_schedule(3, 5);
        let mut state = TrainState::new(student, &sched);
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        state.phase = Phase::Quantize;
        run_quant_phase(&mut state, &data, &sched).unwrap();
        for cb in state.codebooks.as_ref().unwrap().codebooks.values() {
            assert!(cb.distinct_reconstructed() <= 8);
        }
    }

    #[test]
    fn distill_never_touches_centroids_quant_never_touches_weights() {
        let (teacher, student) = models(15);
        let data = toy_data(4, 3, 5);
        let sched = quick_schedule(4, 6);
        let mut state = TrainState::new(student, &sched);

        // first cycle to get codebooks on the state
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        state.phase = Phase::Quantize;
        run_quant_phase(&mut state, &data, &sched).unwrap();

        // quant phases must leave the full-precision weight matrices alone
        let weights_before: Vec<Vec<f32>> = state
            .student
            .named_params()
            .filter(|p| !p.name.ends_with(".bias"))
            .map(|p| p.data.clone())
            .collect();
        state.phase = Phase::FinalQuantize;
        run_quant_phase(&mut state, &data, &sched).unwrap();
        let weights_after: Vec<Vec<f32>> = state
            .student
            .named_params()
            .filter(|p| !p.name.ends_with(".bias"))
            .map(|p| p.data.clone())
            .collect();
        assert_eq!(weights_before, weights_after);

        // a distill phase must leave the centroids alone
        let centroids_before: Vec<Vec<f32>> = state
            .codebooks
            .as_ref()
            .unwrap()
            .codebooks
            .values()
            .map(|cb| cb.centroids.clone())
            .collect();
        state.cycle_index += 1;
        state.phase = Phase::Distill;
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        let centroids_after: Vec<Vec<f32>> = state
            .codebooks
            .as_ref()
            .unwrap()
            .codebooks
            .values()
            .map(|cb| cb.centroids.clone())
            .collect();
        assert_eq!(centroids_before, centroids_after);
    }

    #[test]
    fn gamma_sequence_follows_the_schedule_law() {
        let (teacher, student) = models(16);
        let data = toy_data(3, 3, 6);
        let sched = quick_schedule(4, 7);
        let (_, history) = mct_train(&teacher, student, &data, &sched).unwrap();
        assert_eq!(history.gamma_sequence(), sched.expected_gamma_sequence());
        for r in &history.records {
            assert!(r.losses.check(), "identities broken at {:?}", r);
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_whole_history() {
        let data = toy_data(3, 3, 7);
        let run = || {
            let (teacher, student) = models(17);
            let sched = quick_schedule(4, 8);
            mct_train(&teacher, student, &data, &sched).unwrap()
        };
        let (qa, ha) = run();
        let (qb, hb) = run();
        for (a, b) in ha.records.iter().zip(&hb.records) {
            assert_eq!(a.losses.total.to_bits(), b.losses.total.to_bits());
            assert_eq!(a.val_accuracy.to_bits(), b.val_accuracy.to_bits());
        }
        for (name, cb) in &qa.codebooks {
            assert_eq!(cb.centroids, qb.codebooks[name].centroids);
            assert_eq!(cb.indices, qb.codebooks[name].indices);
        }
    }

    #[test]
    fn pure_quantization_run_reconstructs_initial_weights() {
        // one cycle, one epoch everywhere, zero learning rates: the output
        // must be the k-means reconstruction of the initial weights
        let (teacher, student) = models(18);
        let data = toy_data(3, 3, 8);
        let mut sched = quick_schedule(4, 9);
        sched.cycles = 1;
        sched.distill_epochs = 1;
        sched.quant_epochs = 1;
        sched.final_quant_epochs = 1;
        sched.lr_encoder = 0.0;
        sched.lr_classifier = 0.0;
        sched.lr_codebook = 0.0;
        let initial = student.clone();
        let (q, _) = mct_train(&teacher, student, &data, &sched).unwrap();
        let out = q.materialize();
        for (i, p) in initial.named_params().enumerate() {
            match q.codebooks.get(&p.name) {
                Some(cb) => {
                    // an independent fit of the *initial* weights down the
                    // same seed path must give the identical reconstruction
                    let fit = kmeans_fit(
                        &p.data,
                        4,
                        sched.policy.max_iters,
                        SplitMix64::substream(sched.seed, 0x_C0DE_0000 + i as u64).next_u64(),
                        sched.policy.restarts,
                    )
                    .unwrap();
                    assert_eq!(fit.codebook.centroids, cb.centroids, "{}", p.name);
                    assert_eq!(fit.codebook.indices, cb.indices, "{}", p.name);
                    assert_eq!(
                        out.param(&p.name).unwrap().data,
                        cb.reconstruct_values(),
                        "{}",
                        p.name
                    );
                }
                None => {
                    assert_eq!(&p.data, &out.param(&p.name).unwrap().data, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn materialization_matches_previous_codebooks_exactly() {
        let (teacher, student) = models(19);
        let data = toy_data(3, 3, 9);
        let mut sched = quick_schedule(4, 10);
        sched.cycles = 2;
        // instrumented replay of mct_train's cycle loop
        let mut state = TrainState::new(student, &sched);
        state.cycle_index = 0;
        run_distill_phase(&mut state, &teacher, &data, &sched).unwrap();
        state.phase = Phase::Quantize;
        run_quant_phase(&mut state, &data, &sched).unwrap();
        let expect: BTreeMap<String, Vec<f32>> = state
            .codebooks
            .as_ref()
            .unwrap()
            .codebooks
            .iter()
            .map(|(n, cb)| (n.clone(), cb.reconstruct_values()))
            .collect();
        // entering the next distill phase
        let q = state.codebooks.as_ref().unwrap();
        state.student = with_current_base(q, &state.student).materialize();
        for (name, values) in expect {
            assert_eq!(state.student.param(&name).unwrap().data, values, "{name}");
        }
    }

    #[test]
    fn baseline_runs_all_distillation_then_one_fit() {
        let (teacher, student) = models(20);
        let data = toy_data(3, 3, 10);
        let sched = quick_schedule(4, 11);
        let (q, history) =
            baseline_quantize_after_distill(&teacher, student, &data, &sched).unwrap();
        let gammas = history.gamma_sequence();
        let distill_count = gammas.iter().filter(|&&g| g == 1).count();
        assert_eq!(distill_count, sched.cycles * sched.distill_epochs);
        // codebooks satisfy the k-means fixed point on the distilled weights
        for (name, cb) in &q.codebooks {
            let weights = &q.base.param(name).unwrap().data;
            for (&w, &i) in weights.iter().zip(&cb.indices) {
                let assigned = (w - cb.centroids[i as usize]).abs();
                for &c in &cb.centroids {
                    assert!(assigned <= (w - c).abs() + 1e-6);
                }
            }
        }
    }

    #[test]
    fn sixteen_bit_baseline_is_lossless_against_the_distilled_model() {
        let (teacher, student) = models(21);
        let data = toy_data(4, 3, 11);
        let mut sched = quick_schedule(16, 12);
        sched.cycles = 1;
        let (distilled, _) = distill_only(&teacher, student.clone(), &data, &sched).unwrap();
        let (q, _) = baseline_quantize_after_distill(&teacher, student, &data, &sched).unwrap();
        let (acc_fp, _) = evaluate(&distilled, &data.val).unwrap();
        let (acc_q, _) = evaluate(&q.materialize(), &data.val).unwrap();
        assert!((acc_fp - acc_q).abs() <= 0.005, "{acc_fp} vs {acc_q}");
    }

    #[test]
    fn latent_dim_mismatch_is_rejected() {
        let teacher = initialize(
            &EncoderConfig {
                latent_dim: 12,
                ..teacher_config()
            },
            3,
            Role::Teacher,
            InitMode::Random,
            0,
        )
        .unwrap();
        let student = initialize(&student_config(), 3, Role::Student, InitMode::Random, 1).unwrap();
        let data = toy_data(2, 3, 12);
        let sched = quick_schedule(4, 13);
        assert!(matches!(
            mct_train(&teacher, student, &data, &sched),
            Err(TrainError::LatentDimMismatch { .. })
        ));
    }

    #[test]
    fn supervised_training_reaches_high_accuracy_on_the_toy_task() {
        let student = initialize(&student_config(), 3, Role::Student, InitMode::Random, 5).unwrap();
        let data = toy_data(8, 3, 13);
        let (trained, history) = train_supervised(
            student,
            &data,
            &SupervisedOptions {
                epochs: 30,
                patience: 8,
                lr: 1e-2,
                batch_size: 8,
                seed: 99,
                optimizer: OptimizerKind::Adam,
                progress: false,
            },
        )
        .unwrap();
        let (acc, _) = evaluate(&trained, &data.val).unwrap();
        assert!(
            acc >= 0.9,
            "accuracy {acc}, history {:?}",
            history.records.last().map(|r| r.val_accuracy)
        );
    }

    #[test]
    fn one_bit_quantization_degrades_against_sixteen_bits() {
        let (teacher, student) = models(22);
        let data = toy_data(8, 3, 14);
        // train the student well first so quantization damage is visible
        let (strong, _) = train_supervised(
            student,
            &data,
            &SupervisedOptions {
                epochs: 25,
                patience: 25,
                lr: 1e-2,
                batch_size: 8,
                seed: 14,
                optimizer: OptimizerKind::Adam,
                progress: false,
            },
        )
        .unwrap();
        let mut sched = quick_schedule(16, 15);
        sched.cycles = 1;
        sched.distill_epochs = 1;
        sched.lr_encoder = 0.0;
        sched.lr_classifier = 0.0;
        sched.alpha = 0.0;
        let (q16, _) =
            baseline_quantize_after_distill(&teacher, strong.clone(), &data, &sched).unwrap();
        sched.bit_length = 1;
        let (q1, _) = baseline_quantize_after_distill(&teacher, strong, &data, &sched).unwrap();
        let (acc16, _) = evaluate(&q16.materialize(), &data.val).unwrap();
        let (acc1, _) = evaluate(&q1.materialize(), &data.val).unwrap();
        assert!(
            acc1 < acc16,
            "two-value weights should hurt: {acc1} vs {acc16}"
        );
    }

    #[test]
    fn divergence_reports_the_offending_batch() {
        let (teacher, student) = models(23);
        let data = toy_data(4, 3, 15);
        let mut sched = quick_schedule(4, 16);
        sched.optimizer = OptimizerKind::Sgd;
        sched.lr_encoder = 1e18; // blows up within an epoch
        sched.lr_classifier = 1e18;
        let err = mct_train(&teacher, student, &data, &sched).unwrap_err();
        match err {
            TrainError::NonFiniteLoss {
                phase,
                cycle,
                epoch,
                batch,
            } => {
                assert_eq!(phase, Phase::Distill);
                assert_eq!(cycle, 0);
                let _ = (epoch, batch);
            }
            other => panic!("expected a non-finite loss report, got {other}"),
        }
    }
}
