//! Similarities, class probabilities and the training losses.
//!
//! Similarity is oriented so that larger means closer in both modes: the
//! negative geodesic distance between exp-mapped features in hyperbolic mode,
//! plain cosine similarity otherwise. Class probabilities are a temperature
//! softmax over the similarities to every class text feature in a
//! [`ClassBank`]. The bank splits classes into `past` entries, frozen copies
//! that never receive gradient, and `current` entries, which are live.
//!
//! The base-session objective is
//! `CE + α·image_reg + β·text_reg` and the incremental objective is
//! `CE_current + γ·CE_prototypes + α·image_reg + β·text_reg`, where the
//! regularizers are L1 distances between prompted features and normalized
//! frozen features.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AdapterForward, AdapterParams, BlockGrad, Phase};
use crate::error::{Error, Result};
use crate::hyperbolic::{self, Curvature, PairGrad};
use crate::linalg::{self, check_dims, dot, norm};

/// How image and text features are compared.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "c", rename_all = "lowercase")]
pub enum SimMode {
    Hyperbolic(Curvature),
    Cosine,
}

impl SimMode {
    /// Hyperbolic only when requested and `c > 0`; `c = 0` selects cosine.
    pub fn from_flags(hyp: bool, c: Curvature) -> Self {
        if hyp && !c.is_euclidean() {
            SimMode::Hyperbolic(c)
        } else {
            SimMode::Cosine
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SimMode::Hyperbolic(_) => "hyperbolic",
            SimMode::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sim: SimMode,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if let SimMode::Hyperbolic(c) = self.sim {
            if c.is_euclidean() {
                return Err(Error::InvalidConfig("hyperbolic mode needs c > 0".into()));
            }
        }
        Ok(())
    }
}

/// Maps a Euclidean feature to the space the similarity is computed in.
pub fn lift(v: &[f64], sim: SimMode) -> Result<Vec<f64>> {
    match sim {
        SimMode::Hyperbolic(c) => Ok(hyperbolic::exp_map_zero(v, c)?.into_inner()),
        SimMode::Cosine => Ok(v.to_vec()),
    }
}

fn lift_vjp(v: &[f64], sim: SimMode, upstream: &[f64]) -> Vec<f64> {
    match sim {
        SimMode::Hyperbolic(c) => hyperbolic::exp_map_zero_vjp(v, c, upstream),
        SimMode::Cosine => upstream.to_vec(),
    }
}

/// Similarity of two already-lifted features.
pub fn lifted_similarity(z: &[f64], h: &[f64], sim: SimMode) -> Result<f64> {
    match sim {
        SimMode::Hyperbolic(c) => Ok(-hyperbolic::hyperbolic_distance(z, h, c)?),
        SimMode::Cosine => hyperbolic::cosine_similarity(z, h),
    }
}

fn lifted_similarity_grad(z: &[f64], h: &[f64], sim: SimMode) -> Result<PairGrad> {
    match sim {
        SimMode::Hyperbolic(c) => {
            let (g, _) = hyperbolic::distance_grad_or_zero(z, h, c)?;
            Ok(PairGrad {
                dx: g.dx.iter().map(|v| -v).collect(),
                dy: g.dy.iter().map(|v| -v).collect(),
            })
        }
        SimMode::Cosine => {
            let (nz, nh) = (norm(z), norm(h));
            if nz == 0.0 || nh == 0.0 {
                return Err(Error::ZeroNorm);
            }
            let s = dot(z, h) / (nz * nh);
            let dx = z
                .iter()
                .zip(h)
                .map(|(a, b)| b / (nz * nh) - s * a / (nz * nz))
                .collect();
            let dy = h
                .iter()
                .zip(z)
                .map(|(b, a)| a / (nz * nh) - s * b / (nh * nh))
                .collect();
            Ok(PairGrad { dx, dy })
        }
    }
}

/// `sim(z, h)`: `−d_c(exp₀(z), exp₀(h))` or `cos(z, h)`.
pub fn similarity(z: &[f64], h: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_dims(z, h)?;
    lifted_similarity(&lift(z, cfg.sim)?, &lift(h, cfg.sim)?, cfg.sim)
}

/// Text features per class: frozen snapshots of earlier sessions plus live
/// features of the classes being learned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassBank {
    past: Vec<(u32, Vec<f64>)>,
    current: Vec<(u32, Vec<f64>)>,
}

impl ClassBank {
    pub fn new(past: Vec<(u32, Vec<f64>)>, current: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in past.iter().chain(&current) {
            if !seen.insert(*id) {
                return Err(Error::ClassCollision(*id));
            }
        }
        Ok(Self { past, current })
    }

    pub fn current_only(current: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        Self::new(Vec::new(), current)
    }

    pub fn past(&self) -> &[(u32, Vec<f64>)] {
        &self.past
    }

    pub fn current(&self) -> &[(u32, Vec<f64>)] {
        &self.current
    }

    pub fn len(&self) -> usize {
        self.past.len() + self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in softmax order: past first, then current.
    pub fn entries(&self) -> impl Iterator<Item = &(u32, Vec<f64>)> {
        self.past.iter().chain(&self.current)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.entries().map(|(id, _)| *id).collect()
    }

    pub fn position(&self, class_id: u32) -> Option<usize> {
        self.entries().position(|(id, _)| *id == class_id)
    }

    fn is_current(&self, class_id: u32) -> bool {
        self.current.iter().any(|(id, _)| *id == class_id)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

fn logits(z: &[f64], bank: &ClassBank, cfg: &LossConfig) -> Result<Vec<f64>> {
    let zl = lift(z, cfg.sim)?;
    bank.entries()
        .map(|(_, h)| {
            check_dims(z, h)?;
            Ok(lifted_similarity(&zl, &lift(h, cfg.sim)?, cfg.sim)? / cfg.tau)
        })
        .collect()
}

/// Softmax over the current classes only; the bank must have no past entries.
pub fn class_probabilities(z: &[f64], bank: &ClassBank, cfg: &LossConfig) -> Result<Vec<f64>> {
    if !bank.past.is_empty() {
        return Err(Error::InvalidConfig(
            "base-session probabilities take no past classes".into(),
        ));
    }
    class_probabilities_ssp(z, bank, cfg)
}

/// Softmax over past (frozen) and current (live) classes, in
/// [`ClassBank::entries`] order.
pub fn class_probabilities_ssp(z: &[f64], bank: &ClassBank, cfg: &LossConfig) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::Empty("class bank"));
    }
    Ok(softmax(&logits(z, bank, cfg)?))
}

/// Mean negative log-likelihood of the labels under the bank's softmax.
fn mean_cross_entropy(
    samples: &[(Vec<f64>, u32)],
    bank: &ClassBank,
    cfg: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if bank.is_empty() {
        return Err(Error::Empty("class bank"));
    }
    let mut total = 0.0;
    for (z, y) in samples {
        let idx = bank.position(*y).ok_or(Error::UnknownLabel(*y))?;
        total -= log_softmax_at(&logits(z, bank, cfg)?, idx);
    }
    Ok(total / samples.len() as f64)
}

fn require_current_labels(samples: &[(Vec<f64>, u32)], bank: &ClassBank) -> Result<()> {
    match samples.iter().find(|(_, y)| !bank.is_current(*y)) {
        Some((_, y)) => Err(Error::UnknownLabel(*y)),
        None => Ok(()),
    }
}

/// Base-session cross-entropy; labels must be current classes and the bank has no past.
pub fn ce_base_loss(batch: &[(Vec<f64>, u32)], bank: &ClassBank, cfg: &LossConfig) -> Result<f64> {
    if !bank.past.is_empty() {
        return Err(Error::InvalidConfig(
            "base-session loss takes no past classes".into(),
        ));
    }
    require_current_labels(batch, bank)?;
    mean_cross_entropy(batch, bank, cfg)
}

/// Cross-entropy of the current session's samples against past and current classes.
pub fn ce_current_loss(
    batch: &[(Vec<f64>, u32)],
    bank: &ClassBank,
    cfg: &LossConfig,
) -> Result<f64> {
    require_current_labels(batch, bank)?;
    mean_cross_entropy(batch, bank, cfg)
}

/// Cross-entropy of stored class prototypes against past and current classes.
pub fn ce_past_loss(
    prototypes: &[(Vec<f64>, u32)],
    bank: &ClassBank,
    cfg: &LossConfig,
) -> Result<f64> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype buffer"));
    }
    mean_cross_entropy(prototypes, bank, cfg)
}

/// `Σ_i |prompted_i − frozen_i|`.
pub fn reg_loss(prompted: &[f64], frozen: &[f64]) -> Result<f64> {
    check_dims(prompted, frozen)?;
    Ok(prompted
        .iter()
        .zip(frozen)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

fn mean_reg(prompted: &[&[f64]], frozen: &[Vec<f64>]) -> Result<f64> {
    if prompted.len() != frozen.len() {
        return Err(Error::DimensionMismatch {
            expected: prompted.len(),
            got: frozen.len(),
        });
    }
    if prompted.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, f) in prompted.iter().zip(frozen) {
        total += reg_loss(p, f)?;
    }
    Ok(total / prompted.len() as f64)
}

/// Normalized frozen features the regularizers pull towards: one per batch
/// sample and one per current class of the bank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegTargets {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub past_ce: f64,
    pub image_reg: f64,
    pub text_reg: f64,
    pub total: f64,
}

fn regs(batch: &[(Vec<f64>, u32)], bank: &ClassBank, refs: &RegTargets) -> Result<(f64, f64)> {
    let images: Vec<&[f64]> = batch.iter().map(|(z, _)| z.as_slice()).collect();
    let texts: Vec<&[f64]> = bank.current.iter().map(|(_, h)| h.as_slice()).collect();
    Ok((
        mean_reg(&images, &refs.image)?,
        mean_reg(&texts, &refs.text)?,
    ))
}

/// `CE + α·image_reg + β·text_reg`.
pub fn total_base_loss(
    batch: &[(Vec<f64>, u32)],
    bank: &ClassBank,
    refs: &RegTargets,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ce = ce_base_loss(batch, bank, cfg)?;
    let (image_reg, text_reg) = regs(batch, bank, refs)?;
    let total = ce + cfg.alpha * image_reg + cfg.beta * text_reg;
    Ok(LossBreakdown {
        ce,
        past_ce: 0.0,
        image_reg,
        text_reg,
        total,
    })
}

/// `CE_current + γ·CE_prototypes + α·image_reg + β·text_reg`. An empty
/// prototype set contributes zero.
pub fn total_incremental_loss(
    batch: &[(Vec<f64>, u32)],
    prototypes: &[(Vec<f64>, u32)],
    bank: &ClassBank,
    refs: &RegTargets,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let ce = ce_current_loss(batch, bank, cfg)?;
    let past_ce = if prototypes.is_empty() {
        0.0
    } else {
        ce_past_loss(prototypes, bank, cfg)?
    };
    let (image_reg, text_reg) = regs(batch, bank, refs)?;
    let total = ce + cfg.gamma * past_ce + cfg.alpha * image_reg + cfg.beta * text_reg;
    Ok(LossBreakdown {
        ce,
        past_ce,
        image_reg,
        text_reg,
        total,
    })
}

/// Gradients for the trainable blocks; frozen blocks are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub vision: Option<BlockGrad>,
    pub text: Option<BlockGrad>,
}

impl AdapterGrads {
    /// All entries in block order (vision down, up, then text down, up).
    pub fn flatten(&self) -> Vec<f64> {
        self.vision
            .iter()
            .chain(&self.text)
            .flat_map(|g| g.iter().copied())
            .collect()
    }
}

/// One optimization step's worth of frozen inputs, from which the loss is
/// a function of the adapter parameters alone.
#[derive(Clone, Debug)]
pub struct TrainingProblem {
    pub phase: Phase,
    /// Frozen image features and labels.
    pub batch: Vec<(Vec<f64>, u32)>,
    /// Template means of the classes whose text feature is computed live.
    pub live_text: Vec<(u32, Vec<f64>)>,
    /// Frozen text features of earlier classes.
    pub frozen_text: Vec<(u32, Vec<f64>)>,
    /// Stored class prototypes (incremental phase only).
    pub prototypes: Vec<(u32, Vec<f64>)>,
    pub cfg: LossConfig,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl TrainingProblem {
    fn reg_targets(&self) -> Result<RegTargets> {
        Ok(RegTargets {
            image: self
                .batch
                .iter()
                .map(|(f, _)| encoder::frozen_target(f))
                .collect::<Result<_>>()?,
            text: self
                .live_text
                .iter()
                .map(|(_, g)| encoder::frozen_target(g))
                .collect::<Result<_>>()?,
        })
    }

    fn prototype_samples(&self) -> Vec<(Vec<f64>, u32)> {
        self.prototypes
            .iter()
            .map(|(id, p)| (p.clone(), *id))
            .collect()
    }

    /// Loss value, computed through the public encode and loss functions.
    pub fn loss(&self, params: &AdapterParams) -> Result<LossBreakdown> {
        let batch: Vec<(Vec<f64>, u32)> = self
            .batch
            .iter()
            .map(|(f, y)| Ok((encoder::encode_image(f, params)?, *y)))
            .collect::<Result<_>>()?;
        let current: Vec<(u32, Vec<f64>)> = self
            .live_text
            .iter()
            .map(|(id, g)| Ok((*id, encoder::encode_text(std::slice::from_ref(g), params)?)))
            .collect::<Result<_>>()?;
        let bank = ClassBank::new(self.frozen_text.clone(), current)?;
        let refs = self.reg_targets()?;
        let out = match self.phase {
            Phase::Base => total_base_loss(&batch, &bank, &refs, &self.cfg)?,
            Phase::Incremental => {
                total_incremental_loss(&batch, &self.prototype_samples(), &bank, &refs, &self.cfg)?
            }
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(out)
    }

    /// Loss value and exact gradients with respect to every trainable scalar.
    pub fn loss_and_gradients(
        &self,
        params: &AdapterParams,
    ) -> Result<(LossBreakdown, AdapterGrads)> {
        let cfg = &self.cfg;
        cfg.validate()?;
        if self.batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.phase == Phase::Base && !(self.frozen_text.is_empty() && self.prototypes.is_empty())
        {
            return Err(Error::InvalidConfig(
                "base-session loss takes no past classes".into(),
            ));
        }
        // Collision checks on the class sets.
        let bank_ids = ClassBank::new(
            self.frozen_text
                .iter()
                .map(|(id, _)| (*id, Vec::new()))
                .collect(),
            self.live_text
                .iter()
                .map(|(id, _)| (*id, Vec::new()))
                .collect(),
        )?;
        let refs = self.reg_targets()?;

        let images: Vec<AdapterForward> = self
            .batch
            .iter()
            .map(|(f, _)| params.vision.forward(f))
            .collect::<Result<_>>()?;
        let texts: Vec<AdapterForward> = self
            .live_text
            .iter()
            .map(|(_, g)| params.text.forward(g))
            .collect::<Result<_>>()?;

        let z_lift: Vec<Vec<f64>> = images
            .iter()
            .map(|a| lift(&a.output, cfg.sim))
            .collect::<Result<_>>()?;
        // Bank points in softmax order: frozen, then live.
        let mut h_lift: Vec<Vec<f64>> = self
            .frozen_text
            .iter()
            .map(|(_, h)| lift(h, cfg.sim))
            .collect::<Result<_>>()?;
        for t in &texts {
            h_lift.push(lift(&t.output, cfg.sim)?);
        }
        let n_frozen = self.frozen_text.len();
        if h_lift.is_empty() {
            return Err(Error::Empty("class bank"));
        }
        for h in h_lift.iter().chain(self.prototypes.iter().map(|(_, p)| p)) {
            check_dims(&z_lift[0], h)?;
        }

        let mut g_zl = vec![vec![0.0; z_lift[0].len()]; z_lift.len()];
        let mut g_hl = vec![vec![0.0; h_lift[0].len()]; texts.len()];

        // Softmax cross-entropy over one query point; returns −log p(y).
        let mut ce_term = |query: &[f64],
                           label: u32,
                           weight: f64,
                           g_query: Option<&mut Vec<f64>>|
         -> Result<f64> {
            let idx = bank_ids.position(label).ok_or(Error::UnknownLabel(label))?;
            let sims: Vec<f64> = h_lift
                .iter()
                .map(|h| lifted_similarity(query, h, cfg.sim))
                .collect::<Result<_>>()?;
            let logits: Vec<f64> = sims.iter().map(|s| s / cfg.tau).collect();
            let nll = -log_softmax_at(&logits, idx);
            let probs = softmax(&logits);
            let mut g_query = g_query;
            for (j, h) in h_lift.iter().enumerate() {
                let d_sim = weight * (probs[j] - if j == idx { 1.0 } else { 0.0 }) / cfg.tau;
                if d_sim == 0.0 {
                    continue;
                }
                let pg = lifted_similarity_grad(query, h, cfg.sim)?;
                if let Some(gq) = g_query.as_deref_mut() {
                    linalg::axpy(gq, d_sim, &pg.dx);
                }
                if j >= n_frozen {
                    linalg::axpy(&mut g_hl[j - n_frozen], d_sim, &pg.dy);
                }
            }
            Ok(nll)
        };

        let n = self.batch.len() as f64;
        let mut ce = 0.0;
        for (i, (_, y)) in self.batch.iter().enumerate() {
            let live = self.live_text.iter().any(|(id, _)| id == y);
            if !live {
                return Err(Error::UnknownLabel(*y));
            }
            ce += ce_term(&z_lift[i], *y, 1.0 / n, Some(&mut g_zl[i]))?;
        }
        ce /= n;

        let mut past_ce = 0.0;
        if self.phase == Phase::Incremental && !self.prototypes.is_empty() {
            let w = cfg.gamma / self.prototypes.len() as f64;
            for (id, proto) in &self.prototypes {
                let pl = lift(proto, cfg.sim)?;
                past_ce += ce_term(&pl, *id, w, None)?;
            }
            past_ce /= self.prototypes.len() as f64;
        }

        // Regularizers act on the normalized prompted features.
        let mut image_reg = 0.0;
        let mut g_img: Vec<Vec<f64>> = Vec::with_capacity(images.len());
        for (i, fwd) in images.iter().enumerate() {
            let mut g = lift_vjp(&fwd.output, cfg.sim, &g_zl[i]);
            image_reg += reg_loss(&fwd.output, &refs.image[i])?;
            for (gk, (p, f)) in g.iter_mut().zip(fwd.output.iter().zip(&refs.image[i])) {
                *gk += cfg.alpha / n * sign(p - f);
            }
            g_img.push(g);
        }
        image_reg /= n;

        let n_live = texts.len().max(1) as f64;
        let mut text_reg = 0.0;
        let mut g_txt: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
        for (j, fwd) in texts.iter().enumerate() {
            let mut g = lift_vjp(&fwd.output, cfg.sim, &g_hl[j]);
            text_reg += reg_loss(&fwd.output, &refs.text[j])?;
            for (gk, (p, f)) in g.iter_mut().zip(fwd.output.iter().zip(&refs.text[j])) {
                *gk += cfg.beta / n_live * sign(p - f);
            }
            g_txt.push(g);
        }
        if !texts.is_empty() {
            text_reg /= n_live;
        }

        let vision = params.vision.trainable.then(|| {
            let mut g = BlockGrad::zeros_like(&params.vision);
            for (fwd, up) in images.iter().zip(&g_img) {
                fwd.backward(&params.vision, up, &mut g);
            }
            g
        });
        let text = params.text.trainable.then(|| {
            let mut g = BlockGrad::zeros_like(&params.text);
            for (fwd, up) in texts.iter().zip(&g_txt) {
                fwd.backward(&params.text, up, &mut g);
            }
            g
        });

        let gamma_term = if self.phase == Phase::Incremental {
            cfg.gamma * past_ce
        } else {
            0.0
        };
        let total = ce + gamma_term + cfg.alpha * image_reg + cfg.beta * text_reg;
        if !total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let grads = AdapterGrads { vision, text };
        if grads.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok((
            LossBreakdown {
                ce,
                past_ce,
                image_reg,
                text_reg,
                total,
            },
            grads,
        ))
    }
}

fn slot(w: &mut AdapterParams, vision: bool, down: bool, k: usize) -> &mut f64 {
    let b = if vision { &mut w.vision } else { &mut w.text };
    if down {
        &mut b.down[k]
    } else {
        &mut b.up[k]
    }
}

/// Central-difference gradient of [`TrainingProblem::loss`] over the
/// trainable blocks, for checking [`TrainingProblem::loss_and_gradients`].
pub fn numerical_gradient(
    problem: &TrainingProblem,
    params: &AdapterParams,
    h: f64,
) -> Result<AdapterGrads> {
    let mut work = params.clone();
    let mut out = AdapterGrads {
        vision: None,
        text: None,
    };
    for vision in [true, false] {
        let block = if vision { &params.vision } else { &params.text };
        if !block.trainable {
            continue;
        }
        let mut g = BlockGrad::zeros_like(block);
        for down in [true, false] {
            let len = if down { g.down.len() } else { g.up.len() };
            for k in 0..len {
                let orig = *slot(&mut work, vision, down, k);
                *slot(&mut work, vision, down, k) = orig + h;
                let plus = problem.loss(&work)?.total;
                *slot(&mut work, vision, down, k) = orig - h;
                let minus = problem.loss(&work)?.total;
                *slot(&mut work, vision, down, k) = orig;
                let d = (plus - minus) / (2.0 * h);
                if down {
                    g.down[k] = d;
                } else {
                    g.up[k] = d;
                }
            }
        }
        if vision {
            out.vision = Some(g);
        } else {
            out.text = Some(g);
        }
    }
    Ok(out)
}

/// `max|a − b| / max(max|a|, max|b|)` over all entries; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
