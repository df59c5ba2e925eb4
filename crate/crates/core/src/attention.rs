//! Attention blocks inserted into the encoder.
//!
//! [`BioAttBlock`] pools a feature map over channels (mean and max), turns the
//! two pooled planes into one sigmoid map per anatomical descriptor with a
//! same-padded convolution, weights each map by the image's prior probability
//! for that descriptor and sums them into a single spatial gate:
//!
//! ```text
//! C  = [mean_c(x), max_c(x)]            [B, 2, H, W]
//! A  = sigmoid(conv_k(C))               [B, N, H, W]
//! A' = sum_n p_n * A_n                  [B, 1, H, W]
//! x' = x * A'
//! ```
//!
//! [`SpatialBlock`] is the same construction with a single map and no prior
//! (the CBAM spatial gate); [`SeBlock`] is squeeze-and-excitation channel
//! gating. Priors are constants: no gradient flows into them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamSet};
use crate::pgm;
use crate::priors::PriorDistribution;
use crate::tensor::{cst, Element, Tensor};

/// Per-descriptor sigmoid maps and their prior-weighted sum, kept for
/// inspection and export.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedAttentionMap<T = f32> {
    /// `A`, shape `[B, N, H, W]`, every element in `(0, 1)`.
    pub maps: Tensor<T>,
    /// `A'`, shape `[B, 1, H, W]`.
    pub fused: Tensor<T>,
}

/// Builds the constant `[B, N, 1, 1]` prior tensor. A single prior is
/// broadcast to the whole batch.
pub fn prior_tensor<T: Element>(priors: &[PriorDistribution], batch: usize, n: usize) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Prior("attention block has no descriptors".into()));
    }
    if priors.len() != 1 && priors.len() != batch {
        return Err(Error::Prior(format!(
            "{} priors for a batch of {}",
            priors.len(),
            batch
        )));
    }
    let mut data = Vec::with_capacity(batch * n);
    for b in 0..batch {
        let p = &priors[if priors.len() == 1 { 0 } else { b }];
        if p.len() != n {
            return Err(Error::Prior(format!(
                "prior has {} entries, block expects {}",
                p.len(),
                n
            )));
        }
        data.extend(p.probs().iter().map(|&v| cst::<T>(v)));
    }
    Tensor::new(vec![batch, n, 1, 1], data)
}

/// `[mean_c(x), max_c(x)]` along the channel axis.
fn pooled_descriptors<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let avg = tape.channel_mean(x)?;
    let max = tape.channel_max(x)?;
    tape.concat_channels(&[avg, max])
}

/// Prior-weighted spatial attention with one map per anatomical descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct BioAttBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_descriptors: usize,
    pub kernel: usize,
}

impl BioAttBlock {
    /// Registers `<prefix>.weight` `[N, 2, k, k]` (uniform He init) and
    /// `<prefix>.bias` `[N]` (zeros).
    pub fn new<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        n_descriptors: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_descriptors == 0 {
            return Err(Error::Config("attention block needs at least one descriptor".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("attention kernel must be odd, got {kernel}")));
        }
        let weight = params.add(
            format!("{prefix}.weight"),
            kaiming_uniform(vec![n_descriptors, 2, kernel, kernel], 2 * kernel * kernel, rng),
        );
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(vec![n_descriptors]));
        Ok(Self {
            weight,
            bias,
            n_descriptors,
            kernel,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        priors: &[PriorDistribution],
        capture: bool,
    ) -> Result<(Var, Option<FusedAttentionMap<T>>)> {
        let (b, _, _, _) = tape.value(x).dims4()?;
        let p = tape.constant(prior_tensor(priors, b, self.n_descriptors)?);
        let pooled = pooled_descriptors(tape, x)?;
        let logits = tape.conv2d_same(pooled, bound.var(self.weight), bound.var(self.bias))?;
        let maps = tape.sigmoid(logits)?;
        let weighted = tape.mul(maps, p)?;
        let fused = tape.sum_axis_sorted(weighted, 1)?;
        let out = tape.mul(x, fused)?;
        let diag = capture.then(|| FusedAttentionMap {
            maps: tape.value(maps).clone(),
            fused: tape.value(fused).clone(),
        });
        Ok((out, diag))
    }
}

/// CBAM spatial gate: one sigmoid map from pooled channel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl SpatialBlock {
    pub fn new<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("attention kernel must be odd, got {kernel}")));
        }
        let weight = params.add(
            format!("{prefix}.weight"),
            kaiming_uniform(vec![1, 2, kernel, kernel], 2 * kernel * kernel, rng),
        );
        let bias = params.add(format!("{prefix}.bias"), Tensor::zeros(vec![1]));
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Option<FusedAttentionMap<T>>)> {
        let pooled = pooled_descriptors(tape, x)?;
        let logits = tape.conv2d_same(pooled, bound.var(self.weight), bound.var(self.bias))?;
        let gate = tape.sigmoid(logits)?;
        let out = tape.mul(x, gate)?;
        let diag = capture.then(|| {
            let g = tape.value(gate).clone();
            FusedAttentionMap {
                maps: g.clone(),
                fused: g,
            }
        });
        Ok((out, diag))
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    /// Bottleneck width is `channels / reduction`, at least one.
    pub fn new<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Config("SE block needs channels and reduction >= 1".into()));
        }
        let hidden = (channels / reduction).max(1);
        let fc1_weight = params.add(
            format!("{prefix}.fc1.weight"),
            kaiming_uniform(vec![hidden, channels, 1, 1], channels, rng),
        );
        let fc1_bias = params.add(format!("{prefix}.fc1.bias"), Tensor::zeros(vec![hidden]));
        let fc2_weight = params.add(
            format!("{prefix}.fc2.weight"),
            kaiming_uniform(vec![channels, hidden, 1, 1], hidden, rng),
        );
        let fc2_bias = params.add(format!("{prefix}.fc2.bias"), Tensor::zeros(vec![channels]));
        Ok(Self {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            channels,
            hidden,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.channels {
            return Err(shape_err!("SE block for {} channels got {}", self.channels, c));
        }
        let s = tape.mean_axis(x, 3)?;
        let s = tape.mean_axis(s, 2)?;
        let z = tape.conv2d(s, bound.var(self.fc1_weight), bound.var(self.fc1_bias), 0)?;
        let z = tape.relu(z)?;
        let z = tape.conv2d(z, bound.var(self.fc2_weight), bound.var(self.fc2_bias), 0)?;
        let gate = tape.sigmoid(z)?;
        tape.mul(x, gate)
    }
}

/// File-name friendly form of a descriptor.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes one min-max normalized PGM per descriptor map of batch element
/// `batch`, named `rank_<r>_<descriptor>.pgm` with rank 1 for the most
/// probable descriptor, plus the fused map as `rank_00_fused.pgm`.
pub fn export_attention_maps<T: Element>(
    diag: &FusedAttentionMap<T>,
    batch: usize,
    prior: &PriorDistribution,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (b, n, h, w) = diag.maps.dims4()?;
    if batch >= b {
        return Err(shape_err!("batch element {} of {}", batch, b));
    }
    if prior.len() != n {
        return Err(Error::Prior(format!(
            "prior has {} entries for {} attention maps",
            prior.len(),
            n
        )));
    }
    fs::create_dir_all(out_dir)?;
    let plane = h * w;
    let mut written = Vec::with_capacity(n + 1);
    let fused = &diag.fused.data()[batch * plane..(batch + 1) * plane];
    let path = out_dir.join("rank_00_fused.pgm");
    pgm::write_normalized(&path, w, h, fused)?;
    written.push(path);
    let names = prior.descriptors().names();
    for (rank, idx) in prior.ranking().into_iter().enumerate() {
        let start = (batch * n + idx) * plane;
        let map = &diag.maps.data()[start..start + plane];
        let path = out_dir.join(format!("rank_{:02}_{}.pgm", rank + 1, slug(&names[idx])));
        pgm::write_normalized(&path, w, h, map)?;
        written.push(path);
    }
    Ok(written)
}
