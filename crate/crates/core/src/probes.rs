//! Contrastive concept probes.
//!
//! A probe is a per-layer unit direction: the normalized difference between
//! the mean pooled representations of completions under two opposing system
//! prompts. Layer selection maximizes Cohen's d on held-out evaluation texts
//! inside the middle band of layers, and scoring averages dot products over
//! a window of layers around the selected one.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};
use crate::stats;
use crate::tensorio::{random_unit_vector, ActivationTensor, RoleFilter};

/// Mean-difference norms below this are treated as no direction at all.
pub const DEGENERATE_DIRECTION_NORM: f64 = 1e-12;
pub const DEGENERATE_SD: f64 = 1e-12;
/// Layers on either side of the best layer that join the scoring window.
pub const WINDOW_HALF_WIDTH: usize = 2;

/// Training and evaluation material for one concept, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub positive_label: String,
    pub negative_label: String,
    /// Set when the positive training pole sits at the low end of the rating scale.
    #[serde(default)]
    pub sign_correction: bool,
    pub positive_system_prompt: String,
    pub negative_system_prompt: String,
    pub training_questions: Vec<String>,
    pub eval_texts_pos: Vec<String>,
    pub eval_texts_neg: Vec<String>,
    /// Wording inserted into the rating query, e.g. `happy you are right now`.
    #[serde(default)]
    pub rating_phrase: Option<String>,
}

impl ConceptSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: ConceptSpec = toml::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidConfig("concept name is empty".into()));
        }
        if self.training_questions.is_empty() {
            return Err(Error::InvalidConfig(format!("concept `{}` has no training questions", self.name)));
        }
        if self.eval_texts_pos.is_empty() || self.eval_texts_neg.is_empty() {
            return Err(Error::InvalidConfig(format!("concept `{}` needs evaluation texts for both poles", self.name)));
        }
        Ok(())
    }
}

/// Per-layer contrastive directions, before any layer is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainedDirections<T> {
    pub vectors: Vec<Vec<T>>,
}

/// A trained probe with its selected layer and scoring window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConceptVectorSet<T> {
    pub concept_name: String,
    /// Unit direction per layer, zero-based.
    pub vectors: Vec<Vec<T>>,
    pub best_layer: usize,
    /// Ascending layers `best_layer ± 2`, clipped to the valid range.
    pub window: Vec<usize>,
    pub per_layer_d: Vec<f64>,
    pub sign_correction: bool,
}

impl<T: Scalar> ConceptVectorSet<T> {
    pub fn layer_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Same unit direction at every layer; used for constructed backends
    /// whose state lives along one known axis.
    pub fn uniform(
        concept_name: impl Into<String>,
        direction: &[T],
        layer_count: usize,
        best_layer: usize,
        sign_correction: bool,
    ) -> Result<Self> {
        let n = norm(direction);
        if n.as_f64() < DEGENERATE_DIRECTION_NORM {
            return Err(Error::DegenerateDirection { layer: best_layer });
        }
        let unit: Vec<T> = direction.iter().map(|&x| x / n).collect();
        Ok(Self {
            concept_name: concept_name.into(),
            vectors: vec![unit; layer_count],
            best_layer,
            window: scoring_window(best_layer, layer_count),
            per_layer_d: vec![0.0; layer_count],
            sign_correction,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.layer_count();
        if layers == 0 || self.hidden_dim() == 0 {
            return Err(Error::InvalidConfig("empty concept vector set".into()));
        }
        for (l, v) in self.vectors.iter().enumerate() {
            if v.len() != self.hidden_dim() {
                return Err(Error::DimensionMismatch(format!("vector at layer {l} has length {}", v.len())));
            }
            if (norm(v).as_f64() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("vector at layer {l} is not unit norm")));
            }
        }
        if self.best_layer >= layers
            || self.window.is_empty()
            || self.window.len() > 2 * WINDOW_HALF_WIDTH + 1
            || !self.window.contains(&self.best_layer)
            || self.window.iter().any(|&l| l >= layers)
        {
            return Err(Error::InvalidConfig(format!(
                "inconsistent window {:?} for best layer {}",
                self.window, self.best_layer
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepResult {
    /// Cohen's d per layer; `NaN` where the evaluation scores had no spread.
    pub per_layer_d: Vec<f64>,
    pub welch_t: Vec<f64>,
    pub welch_p: Vec<f64>,
    /// Inclusive zero-based search band.
    pub band: (usize, usize),
}

/// Zero-based inclusive band covering one-based layers
/// `ceil(0.2 L) ..= floor(0.8 L)`.
pub fn search_band(layer_count: usize) -> Result<(usize, usize)> {
    if layer_count < 4 {
        return Err(Error::BandTooSmall { layer_count });
    }
    let lo = (layer_count * 2).div_ceil(10).max(1);
    let hi = (layer_count * 8) / 10;
    if lo > hi {
        return Err(Error::BandTooSmall { layer_count });
    }
    Ok((lo - 1, hi - 1))
}

pub fn scoring_window(best_layer: usize, layer_count: usize) -> Vec<usize> {
    let lo = best_layer.saturating_sub(WINDOW_HALF_WIDTH);
    let hi = (best_layer + WINDOW_HALF_WIDTH).min(layer_count.saturating_sub(1));
    (lo..=hi).collect()
}

/// Per-layer mean of the hidden states at tokens selected by `filter`.
pub fn pooled_representation<T: Scalar>(tensor: &ActivationTensor<T>, filter: RoleFilter) -> Result<Vec<Vec<T>>> {
    let tokens = filter.select(tensor.token_roles());
    if tokens.is_empty() {
        return Err(Error::EmptyPool);
    }
    let count = T::from_usize_lossy(tokens.len());
    Ok((0..tensor.layer_count())
        .map(|layer| {
            let mut acc = vec![T::zero(); tensor.hidden_dim()];
            for &t in &tokens {
                for (a, &h) in acc.iter_mut().zip(tensor.hidden(layer, t)) {
                    *a += h;
                }
            }
            acc.into_iter().map(|a| a / count).collect()
        })
        .collect())
}

fn mean_vector<T: Scalar>(rows: &[&[T]]) -> Vec<T> {
    let dim = rows[0].len();
    let count = T::from_usize_lossy(rows.len());
    let mut acc = vec![T::zero(); dim];
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(*r) {
            *a += x;
        }
    }
    acc.into_iter().map(|a| a / count).collect()
}

/// `normalize(mean(pos) - mean(neg))` for one layer.
pub fn contrastive_direction<T: Scalar>(pos: &[&[T]], neg: &[&[T]], layer: usize) -> Result<Vec<T>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("both poles need at least one representation".into()));
    }
    let dim = pos[0].len();
    if pos.iter().chain(neg).any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch(format!("inconsistent hidden sizes at layer {layer}")));
    }
    let diff: Vec<T> = mean_vector(pos).into_iter().zip(mean_vector(neg)).map(|(p, n)| p - n).collect();
    let n = norm(&diff);
    if n.as_f64() < DEGENERATE_DIRECTION_NORM {
        return Err(Error::DegenerateDirection { layer });
    }
    Ok(diff.into_iter().map(|x| x / n).collect())
}

/// Trains one unit direction per layer from pooled pole representations,
/// each given as `[layer][dim]`.
pub fn train_concept_vectors<T: Scalar>(
    pos_reps: &[Vec<Vec<T>>],
    neg_reps: &[Vec<Vec<T>>],
) -> Result<TrainedDirections<T>> {
    if pos_reps.is_empty() || neg_reps.is_empty() {
        return Err(Error::InvalidArgument("both poles need at least one representation".into()));
    }
    let layers = pos_reps[0].len();
    if pos_reps.iter().chain(neg_reps).any(|r| r.len() != layers) {
        return Err(Error::DimensionMismatch("inconsistent layer counts".into()));
    }
    let vectors = (0..layers)
        .map(|l| {
            let p: Vec<&[T]> = pos_reps.iter().map(|r| r[l].as_slice()).collect();
            let n: Vec<&[T]> = neg_reps.iter().map(|r| r[l].as_slice()).collect();
            contrastive_direction(&p, &n, l)
        })
        .collect::<Result<_>>()?;
    Ok(TrainedDirections { vectors })
}

/// Effect size with the Bessel-corrected pooled standard deviation.
pub fn cohens_d<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("Cohen's d needs at least two values per group".into()));
    }
    let a: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
    let b: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    let (ma, va) = stats::mean_var(&a);
    let (mb, vb) = stats::mean_var(&b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled < DEGENERATE_SD {
        return Err(Error::DegenerateVariance("pooled standard deviation is zero".into()));
    }
    Ok((ma - mb) / pooled)
}

/// Scores evaluation texts at every layer, then picks the layer with the
/// largest Cohen's d inside the search band (lowest index on ties).
pub fn sweep_and_select<T: Scalar>(
    concept_name: &str,
    directions: &TrainedDirections<T>,
    eval_pos: &[ActivationTensor<T>],
    eval_neg: &[ActivationTensor<T>],
    filter: RoleFilter,
    sign_correction: bool,
) -> Result<(LayerSweepResult, ConceptVectorSet<T>)> {
    let layers = directions.vectors.len();
    let band = search_band(layers)?;
    let project = |tensors: &[ActivationTensor<T>]| -> Result<Vec<Vec<T>>> {
        tensors
            .iter()
            .map(|t| {
                if t.layer_count() != layers || t.hidden_dim() != directions.vectors[0].len() {
                    return Err(Error::DimensionMismatch("evaluation tensor does not match the probe".into()));
                }
                let pooled = pooled_representation(t, filter)?;
                Ok(pooled.iter().zip(&directions.vectors).map(|(h, v)| dot(h, v)).collect())
            })
            .collect()
    };
    let pos_scores = project(eval_pos)?;
    let neg_scores = project(eval_neg)?;

    let mut per_layer_d = Vec::with_capacity(layers);
    let mut welch_t = Vec::with_capacity(layers);
    let mut welch_p = Vec::with_capacity(layers);
    for l in 0..layers {
        let a: Vec<f64> = pos_scores.iter().map(|s| s[l].as_f64()).collect();
        let b: Vec<f64> = neg_scores.iter().map(|s| s[l].as_f64()).collect();
        per_layer_d.push(cohens_d(&a, &b).unwrap_or(f64::NAN));
        match stats::welch_t(&a, &b) {
            Ok(w) => {
                welch_t.push(w.t);
                welch_p.push(w.p);
            }
            Err(_) => {
                welch_t.push(f64::NAN);
                welch_p.push(f64::NAN);
            }
        }
    }

    let mut best: Option<usize> = None;
    for l in band.0..=band.1 {
        let d = per_layer_d[l];
        if d.is_nan() {
            continue;
        }
        if best.is_none_or(|b| d > per_layer_d[b]) {
            best = Some(l);
        }
    }
    let best_layer =
        best.ok_or_else(|| Error::DegenerateVariance("evaluation scores have no spread at any band layer".into()))?;

    let sweep = LayerSweepResult { per_layer_d: per_layer_d.clone(), welch_t, welch_p, band };
    let set = ConceptVectorSet {
        concept_name: concept_name.to_string(),
        vectors: directions.vectors.clone(),
        best_layer,
        window: scoring_window(best_layer, layers),
        // degenerate layers are stored as no separation
        per_layer_d: per_layer_d.iter().map(|d| if d.is_nan() { 0.0 } else { *d }).collect(),
        sign_correction,
    };
    Ok((sweep, set))
}

/// Negates a raw score when the concept is sign-corrected.
#[inline]
pub fn apply_sign<T: Scalar>(raw: T, sign_correction: bool) -> T {
    if sign_correction {
        -raw
    } else {
        raw
    }
}

/// Window-averaged dot product before sign correction.
pub fn raw_probe_score<T: Scalar>(
    tensor: &ActivationTensor<T>,
    set: &ConceptVectorSet<T>,
    filter: RoleFilter,
) -> Result<T> {
    if tensor.layer_count() != set.layer_count() || tensor.hidden_dim() != set.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "tensor {}x{} vs probe {}x{}",
            tensor.layer_count(),
            tensor.hidden_dim(),
            set.layer_count(),
            set.hidden_dim()
        )));
    }
    let tokens = filter.select(tensor.token_roles());
    if tokens.is_empty() {
        return Err(Error::EmptyPool);
    }
    let window = T::from_usize_lossy(set.window.len());
    let total: T = tokens
        .iter()
        .map(|&t| set.window.iter().map(|&l| dot(tensor.hidden(l, t), &set.vectors[l])).sum::<T>() / window)
        .sum();
    Ok(total / T::from_usize_lossy(tokens.len()))
}

/// Sign-corrected probe score over the tokens selected by `filter`.
pub fn probe_score<T: Scalar>(
    tensor: &ActivationTensor<T>,
    set: &ConceptVectorSet<T>,
    filter: RoleFilter,
) -> Result<T> {
    Ok(apply_sign(raw_probe_score(tensor, set, filter)?, set.sign_correction))
}

/// Control probe: every layer's direction replaced by an independent
/// isotropic unit vector; window and selection metadata are kept.
pub fn random_direction_set<T: Scalar>(set: &ConceptVectorSet<T>, seed: u64) -> ConceptVectorSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = set.hidden_dim();
    let vectors =
        (0..set.layer_count()).map(|_| random_unit_vector(&mut rng, dim).into_iter().map(T::lit).collect()).collect();
    ConceptVectorSet { concept_name: format!("{}#random", set.concept_name), vectors, ..set.clone() }
}
