//! Classification, accuracy aggregation, the zero-shot baseline and
//! prototype–text distance heatmaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic;
use crate::linalg::check_dims;
use crate::objective::{lift, lifted_similarity, ClassBank, LossConfig, SimMode};

/// Index of the largest score; ties go to the lowest class id.
pub fn argmax_lowest_id(ids: &[u32], scores: &[f64]) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&id, &s) in ids.iter().zip(scores) {
        best = match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < id) => Some((bid, bs)),
            _ => Some((id, s)),
        };
    }
    best.map(|(id, _)| id)
}

/// Nearest-text classifier with the class features lifted once.
#[derive(Clone, Debug)]
pub struct Classifier {
    ids: Vec<u32>,
    points: Vec<Vec<f64>>,
    sim: SimMode,
}

impl Classifier {
    pub fn new<'a, I>(classes: I, sim: SimMode) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, &'a [f64])>,
    {
        let mut ids = Vec::new();
        let mut points: Vec<Vec<f64>> = Vec::new();
        for (id, h) in classes {
            if let Some(first) = points.first() {
                check_dims(first, h)?;
            }
            ids.push(id);
            points.push(lift(h, sim)?);
        }
        if ids.is_empty() {
            return Err(Error::Empty("class bank"));
        }
        Ok(Self { ids, points, sim })
    }

    pub fn from_bank(bank: &ClassBank, sim: SimMode) -> Result<Self> {
        Self::new(bank.entries().map(|(id, h)| (*id, h.as_slice())), sim)
    }

    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dims(&self.points[0], z)?;
        let zl = lift(z, self.sim)?;
        self.points
            .iter()
            .map(|h| lifted_similarity(&zl, h, self.sim))
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> Result<u32> {
        let scores = self.scores(z)?;
        Ok(argmax_lowest_id(&self.ids, &scores).expect("non-empty bank"))
    }

    /// Percentage of samples whose prediction equals the label.
    pub fn accuracy<'a, I>(&self, samples: I) -> Result<f64>
    where
        I: IntoIterator<Item = (&'a [f64], u32)>,
    {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (z, y) in samples {
            preds.push(self.predict(z)?);
            labels.push(y);
        }
        session_accuracy(&preds, &labels)
    }
}

/// Argmax of the similarity to every text feature in the bank.
pub fn classify(z: &[f64], bank: &ClassBank, cfg: &LossConfig) -> Result<u32> {
    Classifier::from_bank(bank, cfg.sim)?.predict(z)
}

/// `100 · correct / total`.
pub fn session_accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over every session, base included.
    pub avg: f64,
    /// First minus last accuracy.
    pub pd: f64,
}

pub fn aggregate(accuracies: &[f64]) -> Result<Aggregate> {
    let (first, last) = match (accuracies.first(), accuracies.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Empty("accuracy sequence")),
    };
    let avg = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(Aggregate {
        avg,
        pd: first - last,
    })
}

/// One-decimal display form used in tables.
pub fn display(v: f64) -> String {
    format!("{v:.1}")
}

/// Cosine nearest-text accuracy on frozen features, without adapters or
/// projection.
pub fn zero_shot_accuracy<'a, I>(samples: I, text_means: &BTreeMap<u32, Vec<f64>>) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], u32)>,
{
    let clf = Classifier::new(
        text_means.iter().map(|(id, h)| (*id, h.as_slice())),
        SimMode::Cosine,
    )?;
    clf.accuracy(samples)
}

/// Distance matrix between class prototypes (rows) and class text features
/// (columns), both in ascending class-id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub classes: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn diagonal_mean(&self) -> f64 {
        let n = self.classes.len();
        (0..n).map(|i| self.values[i][i]).sum::<f64>() / n as f64
    }

    /// NaN for a 1×1 matrix.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.classes.len();
        let mut total = 0.0;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    total += v;
                }
            }
        }
        total / (n * n - n) as f64
    }

    /// Header row of class ids, then one row per prototype class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for c in &self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.values) {
            out.push_str(&c.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Hyperbolic distance between exp-mapped features, or cosine distance.
pub fn feature_distance(a: &[f64], b: &[f64], sim: SimMode) -> Result<f64> {
    match sim {
        SimMode::Hyperbolic(c) => {
            hyperbolic::hyperbolic_distance(&lift(a, sim)?, &lift(b, sim)?, c)
        }
        SimMode::Cosine => hyperbolic::cosine_distance(a, b),
    }
}

pub fn prototype_text_heatmap(
    prototypes: &BTreeMap<u32, Vec<f64>>,
    texts: &BTreeMap<u32, Vec<f64>>,
    sim: SimMode,
) -> Result<Heatmap> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype buffer"));
    }
    if !prototypes.keys().eq(texts.keys()) {
        return Err(Error::Data("prototype and text class sets differ".into()));
    }
    let values = prototypes
        .values()
        .map(|p| {
            texts
                .values()
                .map(|h| feature_distance(p, h, sim))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Heatmap {
        classes: prototypes.keys().copied().collect(),
        values,
    })
}

/// Per-session evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub classes_seen: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub trainable_params: usize,
    pub lr_final: f64,
    pub loss_final: f64,
    pub buffer_vectors: usize,
}

/// Everything a full stream produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ssp: bool,
    pub hyp: bool,
    pub sim_mode: String,
    pub curvature: f64,
    pub seed: u64,
    pub sessions: Vec<SessionReport>,
    pub accuracies: Vec<f64>,
    pub avg: f64,
    pub pd: f64,
    pub trainable_params_base: usize,
    pub trainable_params_incremental: usize,
    pub heatmaps: Vec<Heatmap>,
}

impl RunReport {
    /// Recomputes Avg and PD from the stored accuracies.
    pub fn check_aggregates(&self) -> Result<()> {
        let agg = aggregate(&self.accuracies)?;
        if agg.avg != self.avg || agg.pd != self.pd {
            return Err(Error::Data(format!(
                "stored avg/pd {}/{} disagree with accuracies ({}/{})",
                self.avg, self.pd, agg.avg, agg.pd
            )));
        }
        let per_session: Vec<f64> = self.sessions.iter().map(|s| s.accuracy).collect();
        if !per_session.is_empty() && per_session != self.accuracies {
            return Err(Error::Data(
                "session records disagree with accuracy list".into(),
            ));
        }
        Ok(())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accuracies.last().copied().unwrap_or(f64::NAN)
    }
}
