//! The session runner: base training, incremental sessions with a frozen
//! vision block and a class memory, the optimizer and its schedule.
//!
//! Session-specific prompts (`ssp`) change how earlier classes enter later
//! sessions. With `ssp` on, the text feature of every finished class is a
//! frozen snapshot taken at the end of its session, and only the current
//! session's classes are computed live. With `ssp` off, every seen class is
//! computed live through the text adapter and keeps being trained. The
//! memory stores one snapshot and one image prototype per class either way.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, EmbeddingDataset, Sample, SessionData};
use crate::encoder::{self, AdapterParams, BlockGrad, Phase};
use crate::error::{Error, Result};
use crate::hyperbolic::Curvature;
use crate::linalg;
use crate::metrics::{self, Classifier, Heatmap, RunReport, SessionReport};
use crate::objective::{AdapterGrads, LossConfig, SimMode, TrainingProblem};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const MIN_WARMUP: usize = 5;

/// `max(5, total/10)`, kept below `total`.
pub fn default_warmup(total_steps: usize) -> usize {
    MIN_WARMUP
        .max(total_steps / 10)
        .min(total_steps.saturating_sub(1))
}

/// Linear warmup to `base_lr`, then half-cosine decay towards zero.
pub fn cosine_warmup_lr(step: usize, warmup: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step >= total || warmup >= total {
        return Err(Error::InvalidConfig(format!(
            "schedule needs step < total and warmup < total (step {step}, warmup {warmup}, total {total})"
        )));
    }
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Momentum buffers for the trainable blocks plus the schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub vision: Option<BlockGrad>,
    pub text: Option<BlockGrad>,
    pub step: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(
        params: &AdapterParams,
        base_lr: f64,
        total_steps: usize,
        momentum: f64,
    ) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "lr {base_lr} / momentum {momentum} out of range"
            )));
        }
        Ok(Self {
            vision: params
                .vision
                .trainable
                .then(|| BlockGrad::zeros_like(&params.vision)),
            text: params
                .text
                .trainable
                .then(|| BlockGrad::zeros_like(&params.text)),
            step: 0,
            base_lr,
            warmup_steps: default_warmup(total_steps),
            total_steps,
            momentum,
        })
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_warmup_lr(self.step, self.warmup_steps, self.total_steps, self.base_lr)
    }
}

fn step_block(theta: &mut [f64], v: &mut [f64], g: &[f64], mu: f64, lr: f64) {
    for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g;
        *t -= lr * *v;
    }
}

/// `v ← μv + g; θ ← θ − lr·v` on every trainable scalar; returns the lr used.
pub fn sgd_momentum_step(
    params: &mut AdapterParams,
    grads: &AdapterGrads,
    state: &mut OptimizerState,
) -> Result<f64> {
    let lr = state.current_lr()?;
    let mu = state.momentum;
    let pairs = [
        (&mut params.vision, &grads.vision, &mut state.vision),
        (&mut params.text, &grads.text, &mut state.text),
    ];
    for (block, grad, vel) in pairs {
        match (block.trainable, grad, vel) {
            (true, Some(g), Some(v)) => {
                if g.down.len() != block.down.len() || g.up.len() != block.up.len() {
                    return Err(Error::DimensionMismatch {
                        expected: block.scalar_count(),
                        got: g.iter().count(),
                    });
                }
                step_block(&mut block.down, &mut v.down, &g.down, mu, lr);
                step_block(&mut block.up, &mut v.up, &g.up, mu, lr);
            }
            (false, None, None) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "gradients do not match the trainable blocks".into(),
                ))
            }
        }
    }
    state.step += 1;
    Ok(lr)
}

/// Frozen per-class entries kept across sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub ssp_text: Vec<f64>,
    pub prototype: Vec<f64>,
}

/// One text snapshot and one image prototype per seen class. Entries are
/// never modified after insertion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    entries: BTreeMap<u32, MemoryEntry>,
}

impl MemoryBuffer {
    pub fn insert(&mut self, class_id: u32, ssp_text: Vec<f64>, prototype: Vec<f64>) -> Result<()> {
        if self.entries.contains_key(&class_id) {
            return Err(Error::DuplicateSnapshot(class_id));
        }
        self.entries.insert(
            class_id,
            MemoryEntry {
                ssp_text,
                prototype,
            },
        );
        Ok(())
    }

    pub fn get(&self, class_id: u32) -> Option<&MemoryEntry> {
        self.entries.get(&class_id)
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Two vectors per class.
    pub fn stored_vectors(&self) -> usize {
        2 * self.entries.len()
    }

    pub fn prototypes(&self) -> BTreeMap<u32, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, e)| (*k, e.prototype.clone()))
            .collect()
    }

    pub fn ssp_texts(&self) -> BTreeMap<u32, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, e)| (*k, e.ssp_text.clone()))
            .collect()
    }

    /// Hash of the exact bits of every entry, per class.
    pub fn fingerprints(&self) -> BTreeMap<u32, u64> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let mut h = DefaultHasher::new();
                for v in e.ssp_text.iter().chain(&e.prototype) {
                    v.to_bits().hash(&mut h);
                }
                (*k, h.finish())
            })
            .collect()
    }
}

/// Mean prompted image feature per class (unit-norm features averaged,
/// before any exp map).
pub fn compute_prototypes(
    samples: &[Sample],
    params: &AdapterParams,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut groups: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.class_id)
            .or_default()
            .push(encoder::encode_image(&s.feature, params)?);
    }
    if groups.is_empty() {
        return Err(Error::Empty("prototype samples"));
    }
    Ok(groups
        .into_iter()
        .map(|(c, feats)| {
            let dim = feats[0].len();
            (
                c,
                linalg::mean_of(feats.iter().map(Vec::as_slice), dim).expect("non-empty group"),
            )
        })
        .collect())
}

/// Current prompted text features of `classes`, detached copies.
pub fn snapshot_ssp(
    classes: &[u32],
    text_means: &BTreeMap<u32, Vec<f64>>,
    params: &AdapterParams,
    buffer: &MemoryBuffer,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        if buffer.contains(c) || out.contains_key(&c) {
            return Err(Error::DuplicateSnapshot(c));
        }
        let mean = text_means.get(&c).ok_or(Error::UnknownLabel(c))?;
        out.insert(c, params.text.forward(mean)?.output);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Everything the runner needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub ssp: bool,
    pub hyp: bool,
    pub curvature: Curvature,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rank: usize,
    pub momentum: f64,
    pub base: PhaseSchedule,
    pub incremental: PhaseSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn sim_mode(&self) -> SimMode {
        SimMode::from_flags(self.hyp, self.curvature)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            sim: self.sim_mode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, s) in [("base", self.base), ("incremental", self.incremental)] {
            if s.batch_size == 0 || !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} schedule needs batch_size >= 1 and lr >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Class set, sample ids and schedule of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    pub classes: Vec<u32>,
    pub sample_ids: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl SessionSpec {
    pub fn of(session: &SessionData, cfg: &TrainConfig) -> Self {
        let s = if session.index == 0 {
            cfg.base
        } else {
            cfg.incremental
        };
        Self {
            index: session.index,
            classes: session.classes.clone(),
            sample_ids: session.train.iter().map(|x| x.id).collect(),
            epochs: s.epochs,
            learning_rate: s.lr,
            batch_size: s.batch_size,
        }
    }
}

/// Sessions and class text means of a dataset, ready to run.
#[derive(Clone, Debug)]
pub struct StreamContext {
    pub sessions: Vec<SessionData>,
    pub text_means: BTreeMap<u32, Vec<f64>>,
    pub k_shot: usize,
}

impl StreamContext {
    pub fn from_dataset(dataset: &EmbeddingDataset) -> Result<Self> {
        if dataset.d_img != dataset.d_txt {
            return Err(Error::Data(format!(
                "image ({}) and text ({}) features must share a dimension",
                dataset.d_img, dataset.d_txt
            )));
        }
        let sessions = data::session_plan(dataset)?;
        let mut text_means = BTreeMap::new();
        for (c, templates) in data::class_templates(dataset) {
            text_means.insert(c, encoder::mean_template(&templates)?);
        }
        Ok(Self {
            sessions,
            text_means,
            k_shot: dataset.k_shot,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_means.values().next().map_or(0, Vec::len)
    }
}

/// Parameters and memory between sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub params: AdapterParams,
    pub buffer: MemoryBuffer,
    pub seen: BTreeSet<u32>,
    pub next_session: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutcome {
    pub report: SessionReport,
    pub heatmap: Heatmap,
}

fn session_rng(seed: u64, session: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(session as u64 + 1))
}

struct Trained {
    lr_final: f64,
    loss_final: f64,
}

/// Mini-batch SGD over `train`; `template` supplies everything but the batch.
fn train(
    params: &mut AdapterParams,
    mut template: TrainingProblem,
    train: &[Sample],
    spec: &SessionSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let per_epoch = train.len().div_ceil(spec.batch_size);
    let total = spec.epochs * per_epoch;
    if total == 0 {
        return Ok(Trained {
            lr_final: 0.0,
            loss_final: f64::NAN,
        });
    }
    let mut state = OptimizerState::new(params, spec.learning_rate, total, cfg.momentum)?;
    let mut rng = session_rng(cfg.seed, spec.index);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr_final = 0.0;
    let mut loss_final = 0.0;
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            template.batch = chunk
                .iter()
                .map(|&i| (train[i].feature.clone(), train[i].class_id))
                .collect();
            let (loss, grads) = template.loss_and_gradients(params)?;
            lr_final = sgd_momentum_step(params, &grads, &mut state)?;
            epoch_loss += loss.total;
        }
        loss_final = epoch_loss / per_epoch as f64;
    }
    linalg::check_finite(&params.text.up, "text adapter")?;
    linalg::check_finite(&params.vision.up, "vision adapter")?;
    Ok(Trained {
        lr_final,
        loss_final,
    })
}

fn means_of(
    ctx: &StreamContext,
    classes: impl IntoIterator<Item = u32>,
) -> Result<Vec<(u32, Vec<f64>)>> {
    classes
        .into_iter()
        .map(|c| {
            ctx.text_means
                .get(&c)
                .map(|m| (c, m.clone()))
                .ok_or(Error::UnknownLabel(c))
        })
        .collect()
}

/// Accuracy, zero-shot accuracy and heatmap over every class seen so far.
fn evaluate(
    ctx: &StreamContext,
    cfg: &TrainConfig,
    state: &StreamState,
    upto: usize,
) -> Result<(f64, f64, usize, Heatmap)> {
    let texts: BTreeMap<u32, Vec<f64>> = if cfg.ssp {
        state.buffer.ssp_texts()
    } else {
        state
            .seen
            .iter()
            .map(|&c| Ok((c, state.params.text.forward(&ctx.text_means[&c])?.output)))
            .collect::<Result<_>>()?
    };
    let sim = cfg.sim_mode();
    let clf = Classifier::new(texts.iter().map(|(c, h)| (*c, h.as_slice())), sim)?;
    let test: Vec<&Sample> = ctx.sessions[..=upto].iter().flat_map(|s| &s.test).collect();
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for s in &test {
        let z = encoder::encode_image(&s.feature, &state.params)?;
        preds.push(clf.predict(&z)?);
        labels.push(s.class_id);
    }
    let acc = metrics::session_accuracy(&preds, &labels)?;
    let frozen: BTreeMap<u32, Vec<f64>> = state
        .seen
        .iter()
        .map(|c| (*c, ctx.text_means[c].clone()))
        .collect();
    let zero_shot = metrics::zero_shot_accuracy(
        test.iter().map(|s| (s.feature.as_slice(), s.class_id)),
        &frozen,
    )?;
    let heatmap = metrics::prototype_text_heatmap(&state.buffer.prototypes(), &texts, sim)?;
    Ok((acc, zero_shot, test.len(), heatmap))
}

fn store_session(
    ctx: &StreamContext,
    session: &SessionData,
    state: &mut StreamState,
) -> Result<()> {
    let protos = compute_prototypes(&session.train, &state.params)?;
    let snaps = snapshot_ssp(
        &session.classes,
        &ctx.text_means,
        &state.params,
        &state.buffer,
    )?;
    for &c in &session.classes {
        let proto = protos
            .get(&c)
            .ok_or(Error::Empty("class without training samples"))?;
        state.buffer.insert(c, snaps[&c].clone(), proto.clone())?;
        state.seen.insert(c);
    }
    Ok(())
}

fn outcome(
    ctx: &StreamContext,
    cfg: &TrainConfig,
    state: &StreamState,
    index: usize,
    trained: Trained,
    trainable_params: usize,
) -> Result<SessionOutcome> {
    let (accuracy, zero_shot_accuracy, test_samples, heatmap) = evaluate(ctx, cfg, state, index)?;
    let report = SessionReport {
        session: index,
        classes_seen: state.seen.len(),
        train_samples: ctx.sessions[index].train.len(),
        test_samples,
        accuracy,
        zero_shot_accuracy,
        trainable_params,
        lr_final: trained.lr_final,
        loss_final: trained.loss_final,
        buffer_vectors: state.buffer.stored_vectors(),
    };
    Ok(SessionOutcome { report, heatmap })
}

/// Trains both blocks on session 0, then stores its prototypes and snapshots.
pub fn run_base_session(
    ctx: &StreamContext,
    cfg: &TrainConfig,
) -> Result<(StreamState, SessionOutcome)> {
    cfg.validate()?;
    let base = ctx
        .sessions
        .first()
        .ok_or(Error::Data("no base session".into()))?;
    let dim = ctx.dim();
    let mut params = encoder::init_params(dim, dim, cfg.rank, cfg.seed)?.with_phase(Phase::Base);
    let spec = SessionSpec::of(base, cfg);
    let template = TrainingProblem {
        phase: Phase::Base,
        batch: Vec::new(),
        live_text: means_of(ctx, base.classes.iter().copied())?,
        frozen_text: Vec::new(),
        prototypes: Vec::new(),
        cfg: cfg.loss_config(),
    };
    let trained = train(&mut params, template, &base.train, &spec, cfg)?;
    let trainable = params.trainable_count();
    let mut state = StreamState {
        params,
        buffer: MemoryBuffer::default(),
        seen: BTreeSet::new(),
        next_session: 1,
    };
    store_session(ctx, base, &mut state)?;
    let out = outcome(ctx, cfg, &state, 0, trained, trainable)?;
    Ok((state, out))
}

/// Trains the text block on session `t` with the vision block frozen, then
/// stores the session's prototypes and snapshots.
pub fn run_incremental_session(
    t: usize,
    ctx: &StreamContext,
    cfg: &TrainConfig,
    state: &mut StreamState,
) -> Result<SessionOutcome> {
    cfg.validate()?;
    if t == 0 || t != state.next_session {
        return Err(Error::InvalidConfig(format!(
            "session {t} cannot follow session {}",
            state.next_session - 1
        )));
    }
    let session = ctx
        .sessions
        .get(t)
        .ok_or(Error::Data(format!("no session {t}")))?;
    if let Some(&c) = session.classes.iter().find(|c| state.buffer.contains(**c)) {
        return Err(Error::ClassCollision(c));
    }
    let expected = session.classes.len() * ctx.k_shot;
    if session.train.len() != expected {
        return Err(Error::Data(format!(
            "session {t} has {} training samples, expected {expected}",
            session.train.len()
        )));
    }

    state.params.set_phase(Phase::Incremental);
    let vision_before = state.params.vision.fingerprint();
    let memory_before = state.buffer.fingerprints();

    let buffered: Vec<(u32, Vec<f64>)> = state.buffer.prototypes().into_iter().collect();
    let (live, frozen) = if cfg.ssp {
        (
            means_of(ctx, session.classes.iter().copied())?,
            state.buffer.ssp_texts().into_iter().collect(),
        )
    } else {
        (
            means_of(
                ctx,
                state
                    .seen
                    .iter()
                    .copied()
                    .chain(session.classes.iter().copied()),
            )?,
            Vec::new(),
        )
    };
    let template = TrainingProblem {
        phase: Phase::Incremental,
        batch: Vec::new(),
        live_text: live,
        frozen_text: frozen,
        prototypes: buffered,
        cfg: cfg.loss_config(),
    };
    let spec = SessionSpec::of(session, cfg);
    let trained = train(&mut state.params, template, &session.train, &spec, cfg)?;

    if state.params.vision.fingerprint() != vision_before
        || state.buffer.fingerprints() != memory_before
    {
        return Err(Error::Data(format!(
            "frozen state changed during session {t}"
        )));
    }
    let trainable = state.params.trainable_count();
    store_session(ctx, session, state)?;
    state.next_session = t + 1;
    outcome(ctx, cfg, state, t, trained, trainable)
}

/// Base session plus every incremental session of the dataset.
pub fn run_full_stream(dataset: &EmbeddingDataset, cfg: &TrainConfig) -> Result<RunReport> {
    let ctx = StreamContext::from_dataset(dataset)?;
    let (mut state, first) = run_base_session(&ctx, cfg)?;
    let base_params = first.report.trainable_params;
    let mut outcomes = vec![first];
    for t in 1..ctx.sessions.len() {
        outcomes.push(run_incremental_session(t, &ctx, cfg, &mut state)?);
    }
    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.report.accuracy).collect();
    let agg = metrics::aggregate(&accuracies)?;
    let incremental_params = state
        .params
        .with_phase(Phase::Incremental)
        .trainable_count();
    let (sessions, heatmaps) = outcomes.into_iter().map(|o| (o.report, o.heatmap)).unzip();
    Ok(RunReport {
        ssp: cfg.ssp,
        hyp: cfg.hyp,
        sim_mode: cfg.sim_mode().name().into(),
        curvature: cfg.curvature.value(),
        seed: cfg.seed,
        sessions,
        accuracies,
        avg: agg.avg,
        pd: agg.pd,
        trainable_params_base: base_params,
        trainable_params_incremental: incremental_params,
        heatmaps,
    })
}
