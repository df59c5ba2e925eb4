//! Anatomical descriptor sets and the prior distributions over them.
//!
//! A prior is a probability vector aligned with a [`DescriptorSet`]; entry `n`
//! weights the attention map for descriptor `n`. Priors are usually produced
//! offline by a vision-language model and handed over as a JSON prior file,
//! but uniform and random weightings are available for ablations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::autodiff::softmax;
use crate::error::{Error, Result};

/// Descriptors shipped by default. The first eight are the structures shown in
/// published attention-map figures; the remainder are common thoraco-abdominal
/// CT structures.
pub const DEFAULT_DESCRIPTORS: [&str; 17] = [
    "lungs",
    "mediastinum",
    "spleen",
    "ventricles",
    "spine",
    "liver",
    "kidneys",
    "abdominal aorta",
    "heart",
    "trachea",
    "esophagus",
    "stomach",
    "pancreas",
    "gallbladder",
    "ribs",
    "colon",
    "urinary bladder",
];

/// Tolerance on the sum of a stored or constructed distribution.
pub const SUM_TOLERANCE: f64 = 1e-6;
/// Tolerance on the sum of a distribution read from a prior file.
pub const FILE_SUM_TOLERANCE: f64 = 1e-4;

/// Ordered, unique anatomical descriptor names. Order defines the attention
/// channel index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorSet {
    names: Arc<[String]>,
}

impl DescriptorSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Prior("descriptor list is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Prior(format!("descriptor {i} is blank")));
            }
            if names[..i].contains(n) {
                return Err(Error::Prior(format!("duplicate descriptor {n:?}")));
            }
        }
        Ok(Self {
            names: names.into(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for DescriptorSet {
    fn default() -> Self {
        Self::new(DEFAULT_DESCRIPTORS).expect("default descriptors are valid")
    }
}

/// Raw image-text similarity scores, one per descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores(pub Vec<f64>);

/// Probability vector over a descriptor set.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDistribution {
    probs: Vec<f64>,
    descriptors: DescriptorSet,
}

impl PriorDistribution {
    /// Validates `probs` against `descriptors`: matching length, entries in
    /// `[0, 1]` and a sum within [`SUM_TOLERANCE`] of one.
    pub fn new(probs: Vec<f64>, descriptors: DescriptorSet) -> Result<Self> {
        Self::with_tolerance(probs, descriptors, SUM_TOLERANCE)
    }

    fn with_tolerance(probs: Vec<f64>, descriptors: DescriptorSet, tol: f64) -> Result<Self> {
        if probs.len() != descriptors.len() {
            return Err(Error::Prior(format!(
                "{} probabilities for {} descriptors",
                probs.len(),
                descriptors.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Prior(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Prior(format!(
                "probabilities sum to {sum}, expected 1 (tolerance {tol})"
            )));
        }
        Ok(Self { probs, descriptors })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn descriptors(&self) -> &DescriptorSet {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability of the named descriptor.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.descriptors.index_of(name).map(|i| self.probs[i])
    }

    /// Descriptor indices sorted by descending probability; ties keep
    /// descriptor order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]));
        idx
    }
}

/// Softmax of similarity scores into a prior.
pub fn compute_priors(scores: &SimilarityScores, descriptors: &DescriptorSet) -> Result<PriorDistribution> {
    if scores.0.len() != descriptors.len() {
        return Err(Error::Prior(format!(
            "{} scores for {} descriptors",
            scores.0.len(),
            descriptors.len()
        )));
    }
    if let Some(s) = scores.0.iter().find(|s| !s.is_finite()) {
        return Err(Error::Prior(format!("non-finite similarity score {s}")));
    }
    let probs = softmax(&scores.0)?;
    PriorDistribution::new(probs, descriptors.clone())
}

/// Equal weight on every descriptor.
pub fn uniform_priors(descriptors: &DescriptorSet) -> PriorDistribution {
    let n = descriptors.len();
    PriorDistribution {
        probs: vec![1.0 / n as f64; n],
        descriptors: descriptors.clone(),
    }
}

/// I.i.d. uniform(0, 1) draws normalized by their sum; deterministic in `seed`.
pub fn random_priors(descriptors: &DescriptorSet, seed: u64) -> PriorDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..descriptors.len())
        .map(|_| {
            // Open interval so the sum can never be zero.
            loop {
                let v: f64 = rng.random();
                if v > 0.0 {
                    break v;
                }
            }
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|v| *v /= sum);
    PriorDistribution {
        probs: draws,
        descriptors: descriptors.clone(),
    }
}

/// Uniform prior over a fresh descriptor list of length `n` (names are
/// `organ_0`..). Fails for `n = 0`.
pub fn uniform_priors_n(n: usize) -> Result<PriorDistribution> {
    Ok(uniform_priors(&numbered_descriptors(n)?))
}

/// Random prior over `n` numbered descriptors. Fails for `n = 0`.
pub fn random_priors_n(n: usize, seed: u64) -> Result<PriorDistribution> {
    Ok(random_priors(&numbered_descriptors(n)?, seed))
}

fn numbered_descriptors(n: usize) -> Result<DescriptorSet> {
    if n == 0 {
        return Err(Error::Prior("a prior needs at least one descriptor".into()));
    }
    DescriptorSet::new((0..n).map(|i| format!("organ_{i}")))
}

/// Priors keyed by image id, all over the same descriptor set.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTable {
    descriptors: DescriptorSet,
    priors: BTreeMap<String, PriorDistribution>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    descriptors: Vec<String>,
    priors: BTreeMap<String, Vec<f64>>,
}

/// How [`PriorTable::load`] treats vectors whose sum is off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Reject vectors whose sum deviates from one by more than
    /// [`FILE_SUM_TOLERANCE`].
    #[default]
    Strict,
    /// Divide every vector by its sum before validation.
    Renormalize,
}

impl PriorTable {
    pub fn new(descriptors: DescriptorSet) -> Self {
        Self {
            descriptors,
            priors: BTreeMap::new(),
        }
    }

    pub fn descriptors(&self) -> &DescriptorSet {
        &self.descriptors
    }

    pub fn insert(&mut self, id: impl Into<String>, prior: PriorDistribution) -> Result<()> {
        if prior.descriptors() != &self.descriptors {
            return Err(Error::Prior("prior uses a different descriptor set".into()));
        }
        self.priors.insert(id.into(), prior);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PriorDistribution)> {
        self.priors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Looks up an image id. A CTV stem such as `case7_ld` also matches the
    /// pair id `case7`.
    pub fn get(&self, id: &str) -> Option<&PriorDistribution> {
        self.priors.get(id).or_else(|| {
            let pair = id.strip_suffix("_ld").or_else(|| id.strip_suffix("_nd"))?;
            self.priors.get(pair)
        })
    }

    /// Parses a prior file and checks it against `expected` descriptors.
    pub fn from_json(text: &str, expected: &DescriptorSet, norm: Normalization) -> Result<Self> {
        let file: PriorFile = serde_json::from_str(text)
            .map_err(|e| Error::Prior(format!("prior file does not match the schema: {e}")))?;
        if file.descriptors.is_empty() {
            return Err(Error::Prior("prior file has an empty descriptor list".into()));
        }
        if let Some(unknown) = file.descriptors.iter().find(|d| expected.index_of(d).is_none()) {
            return Err(Error::Prior(format!("unknown descriptor {unknown:?}")));
        }
        if file.descriptors != expected.names() {
            return Err(Error::Prior(format!(
                "descriptor order {:?} differs from the configured set {:?}",
                file.descriptors,
                expected.names()
            )));
        }
        let mut table = Self::new(expected.clone());
        for (id, mut probs) in file.priors {
            if norm == Normalization::Renormalize {
                let sum: f64 = probs.iter().sum();
                if sum > 0.0 && sum.is_finite() {
                    probs.iter_mut().for_each(|p| *p /= sum);
                }
            }
            let prior = PriorDistribution::with_tolerance(probs, expected.clone(), FILE_SUM_TOLERANCE)
                .map_err(|e| Error::Prior(format!("image {id:?}: {e}")))?;
            table.priors.insert(id, prior);
        }
        Ok(table)
    }

    pub fn load(path: &Path, expected: &DescriptorSet, norm: Normalization) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text, expected, norm)
    }

    /// Serializes to the prior-file schema. Probabilities are written with 17
    /// significant digits so they survive a round trip exactly.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"descriptors\": [");
        for (i, n) in self.descriptors.names().iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&serde_json::to_string(n).expect("string serializes"));
        }
        out.push_str("],\n  \"priors\": {");
        for (i, (id, p)) in self.priors.iter().enumerate() {
            out.push_str(if i == 0 { "\n    " } else { ",\n    " });
            out.push_str(&serde_json::to_string(id).expect("string serializes"));
            out.push_str(": [");
            for (j, v) in p.probs().iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                out.push_str(&format!("{v:.16e}"));
            }
            out.push(']');
        }
        if !self.priors.is_empty() {
            out.push_str("\n  ");
        }
        out.push_str("}\n}\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsio::write_atomic(path, self.to_json().as_bytes())
    }
}

/// HU centre and width of the intensity window a fixture descriptor
/// responds to.
const FIXTURE_WINDOWS: [(&str, f64, f64); 17] = [
    ("lungs", -700.0, 150.0),
    ("mediastinum", 20.0, 60.0),
    ("spleen", 50.0, 20.0),
    ("ventricles", 40.0, 20.0),
    ("spine", 400.0, 150.0),
    ("liver", 60.0, 20.0),
    ("kidneys", 30.0, 20.0),
    ("abdominal aorta", 45.0, 15.0),
    ("heart", 35.0, 25.0),
    ("trachea", -850.0, 60.0),
    ("esophagus", 10.0, 30.0),
    ("stomach", 0.0, 40.0),
    ("pancreas", 40.0, 20.0),
    ("gallbladder", 10.0, 15.0),
    ("ribs", 500.0, 200.0),
    ("colon", -50.0, 60.0),
    ("urinary bladder", 5.0, 15.0),
];

/// Score gain applied to window affinities before the softmax.
pub const FIXTURE_TEMPERATURE: f64 = 20.0;

/// Stand-in for vision-language scoring: descriptor `n` scores
/// `FIXTURE_TEMPERATURE` times the mean Gaussian affinity of the image's
/// in-body pixels (HU > -950) to its intensity window. Descriptors without a
/// window score 0. Deterministic in the pixel values.
pub fn fixture_priors(hu: &[f32], descriptors: &DescriptorSet) -> Result<PriorDistribution> {
    let body: Vec<f64> = hu.iter().map(|&v| v as f64).filter(|&v| v > -950.0).collect();
    let scores = descriptors
        .names()
        .iter()
        .map(|name| {
            let Some(&(_, centre, width)) = FIXTURE_WINDOWS.iter().find(|(n, _, _)| n == name) else {
                return 0.0;
            };
            if body.is_empty() {
                return 0.0;
            }
            let affinity: f64 = body
                .iter()
                .map(|v| (-0.5 * ((v - centre) / width).powi(2)).exp())
                .sum::<f64>()
                / body.len() as f64;
            FIXTURE_TEMPERATURE * affinity
        })
        .collect();
    compute_priors(&SimilarityScores(scores), descriptors)
}

/// Similarity scores whose softmax reproduces `probs` exactly (up to rounding):
/// `S_i = ln p_i`. Zero entries get a score far below the rest.
pub fn scores_for(probs: &[f64]) -> SimilarityScores {
    SimilarityScores(
        probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { -1e3 })
            .collect(),
    )
}
