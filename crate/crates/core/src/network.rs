//! RED-CNN encoder-decoder with optional attention after the third and fifth
//! encoder convolutions.
//!
//! ```text
//! e1 = relu(conv1(x))           e2 = relu(conv2(e1))
//! e3 = middle(relu(conv3(e2)))  e4 = relu(conv4(e3))
//! e5 = last(relu(conv5(e4)))
//! d1 = relu(deconv1(e5) + e4)   d2 = relu(deconv2(d1))
//! d3 = relu(deconv3(d2) + e2)   d4 = relu(deconv4(d3))
//! y  = deconv5(d4) + x
//! ```
//!
//! All convolutions are valid (no padding) with stride 1. The output is not
//! rectified: standardized targets are negative wherever tissue is below
//! -500 HU.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{BioAttBlock, FusedAttentionMap, SeBlock, SpatialBlock};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::priors::PriorDistribution;
use crate::tensor::{cst, Element, Tensor};

/// Which attention block, if any, sits at the two insertion points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    /// Squeeze-and-excitation.
    Channel,
    /// CBAM spatial gate.
    Spatial,
    BioAtt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Channel, Variant::Spatial, Variant::BioAtt];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Channel => "channel",
            Variant::Spatial => "spatial",
            Variant::BioAtt => "bioatt",
        }
    }

    pub fn uses_priors(self) -> bool {
        self == Variant::BioAtt
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (base, channel, spatial, bioatt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub kernel: usize,
    pub n_descriptors: usize,
    pub patch_size: usize,
    pub attention_kernel: usize,
    pub se_reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BioAtt,
            channels: 96,
            kernel: 5,
            n_descriptors: 17,
            patch_size: 55,
            attention_kernel: 7,
            se_reduction: 16,
            seed: 0,
        }
    }
}

/// Number of encoder (and decoder) stages.
pub const DEPTH: usize = 5;

impl ModelConfig {
    /// Smallest spatial extent that survives all five valid convolutions.
    pub fn min_extent(&self) -> usize {
        DEPTH * (self.kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 {
            return Err(Error::Config("channels and kernel must be positive".into()));
        }
        if self.patch_size < self.min_extent() {
            return Err(Error::Config(format!(
                "patch size {} is below the minimum {} for kernel {}",
                self.patch_size,
                self.min_extent(),
                self.kernel
            )));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "attention kernel must be odd, got {}",
                self.attention_kernel
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("SE reduction must be positive".into()));
        }
        if self.variant.uses_priors() && self.n_descriptors == 0 {
            return Err(Error::Config("bioatt needs at least one descriptor".into()));
        }
        Ok(())
    }

    /// Spatial extents after every layer for an input of extent `input`.
    pub fn extent_trace(&self, input: usize) -> Vec<usize> {
        let k1 = self.kernel - 1;
        let mut trace = vec![input];
        for i in 1..=DEPTH {
            trace.push(input - i * k1);
        }
        for i in (0..DEPTH).rev() {
            trace.push(input - i * k1);
        }
        trace
    }
}

/// Attention block at one insertion point.
#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    None,
    Channel(SeBlock),
    Spatial(SpatialBlock),
    BioAtt(BioAttBlock),
}

impl Attention {
    fn build<T: Element>(
        config: &ModelConfig,
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match config.variant {
            Variant::Base => Attention::None,
            Variant::Channel => {
                Attention::Channel(SeBlock::new(params, prefix, config.channels, config.se_reduction, rng)?)
            }
            Variant::Spatial => Attention::Spatial(SpatialBlock::new(params, prefix, config.attention_kernel, rng)?),
            Variant::BioAtt => Attention::BioAtt(BioAttBlock::new(
                params,
                prefix,
                config.n_descriptors,
                config.attention_kernel,
                rng,
            )?),
        })
    }

    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        priors: &[PriorDistribution],
        capture: bool,
    ) -> Result<(Var, Option<FusedAttentionMap<T>>)> {
        match self {
            Attention::None => Ok((x, None)),
            Attention::Channel(b) => Ok((b.forward(tape, bound, x)?, None)),
            Attention::Spatial(b) => b.forward(tape, bound, x, capture),
            Attention::BioAtt(b) => b.forward(tape, bound, x, priors, capture),
        }
    }
}

/// Attention maps captured during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionDiagnostics<T = f32> {
    pub middle: Option<FusedAttentionMap<T>>,
    pub last: Option<FusedAttentionMap<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    encoder: [Layer; DEPTH],
    decoder: [Layer; DEPTH],
    middle: Attention,
    last: Attention,
}

/// Factor applied to the default init of the output layer, whose bias starts
/// at zero. The untrained network is then within a small perturbation of the
/// identity map.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

/// PyTorch's default convolution initialization: weights and biases
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn default_init<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand::Rng;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let (lo, hi): (T, T) = (cst(-bound), cst(bound));
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

impl<T: Element> Network<T> {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (c, k) = (config.channels, config.kernel);
        let mut layer = |params: &mut ParamSet<T>, name: String, shape: Vec<usize>, fan_in: usize, out: usize| Layer {
            weight: params.add(format!("{name}.weight"), default_init(shape, fan_in, &mut rng)),
            bias: params.add(format!("{name}.bias"), default_init(vec![out], fan_in, &mut rng)),
        };
        let mut encoder = Vec::with_capacity(DEPTH);
        for i in 0..DEPTH {
            let cin = if i == 0 { 1 } else { c };
            encoder.push(layer(&mut params, format!("conv{}", i + 1), vec![c, cin, k, k], cin * k * k, c));
        }
        let mut decoder = Vec::with_capacity(DEPTH);
        for i in 0..DEPTH {
            let cout = if i == DEPTH - 1 { 1 } else { c };
            // transposed weights are [in, out, k, k]; fan-in follows PyTorch (out * k * k)
            decoder.push(layer(&mut params, format!("deconv{}", i + 1), vec![c, cout, k, k], cout * k * k, cout));
        }
        let out = &decoder[DEPTH - 1];
        params.get_mut(out.weight).data_mut().iter_mut().for_each(|v| *v = *v * cst(OUTPUT_INIT_SCALE));
        params.get_mut(out.bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
        let middle = Attention::build(&config, &mut params, "att_middle", &mut rng)?;
        let last = Attention::build(&config, &mut params, "att_last", &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder: encoder.try_into().unwrap(),
            decoder: decoder.try_into().unwrap(),
            middle,
            last,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Scalars belonging to the attention blocks.
    pub fn num_attention_parameters(&self) -> usize {
        self.params.count_with_prefix("att_")
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder,
            decoder: self.decoder,
            middle: self.middle.clone(),
            last: self.last.clone(),
        }
    }

    fn check_input(&self, shape: &[usize], priors: &[PriorDistribution]) -> Result<()> {
        let (_, c, h, w) = match shape {
            &[b, c, h, w] => (b, c, h, w),
            _ => return Err(shape_err!("network input must be [B, 1, H, W], got {:?}", shape)),
        };
        if c != 1 {
            return Err(shape_err!("network input has {} channels, expected 1", c));
        }
        let min = self.config.min_extent();
        if h < min || w < min {
            return Err(shape_err!("input extent {}x{} is below the minimum {}", h, w, min));
        }
        if self.config.variant.uses_priors() && priors.is_empty() {
            return Err(Error::Prior("bioatt forward needs a prior".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `priors` holds one distribution
    /// for the whole batch or one per batch element; only bioatt reads it.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        priors: &[PriorDistribution],
        capture: bool,
    ) -> Result<(Var, AttentionDiagnostics<T>)> {
        self.check_input(tape.value(x).shape(), priors)?;
        let mut diag = AttentionDiagnostics::default();
        let conv = |tape: &mut Tape<T>, l: &Layer, v: Var| -> Result<Var> {
            let y = tape.conv2d(v, bound.var(l.weight), bound.var(l.bias), 0)?;
            tape.relu(y)
        };
        let deconv = |tape: &mut Tape<T>, l: &Layer, v: Var| tape.conv_transpose2d(v, bound.var(l.weight), bound.var(l.bias));

        let e1 = conv(tape, &self.encoder[0], x)?;
        let e2 = conv(tape, &self.encoder[1], e1)?;
        let e3 = conv(tape, &self.encoder[2], e2)?;
        let (e3, m) = self.middle.apply(tape, bound, e3, priors, capture)?;
        diag.middle = m;
        let e4 = conv(tape, &self.encoder[3], e3)?;
        let e5 = conv(tape, &self.encoder[4], e4)?;
        let (e5, l) = self.last.apply(tape, bound, e5, priors, capture)?;
        diag.last = l;

        let d1 = deconv(tape, &self.decoder[0], e5)?;
        let d1 = tape.add(d1, e4)?;
        let d1 = tape.relu(d1)?;
        let d2 = deconv(tape, &self.decoder[1], d1)?;
        let d2 = tape.relu(d2)?;
        let d3 = deconv(tape, &self.decoder[2], d2)?;
        let d3 = tape.add(d3, e2)?;
        let d3 = tape.relu(d3)?;
        let d4 = deconv(tape, &self.decoder[3], d3)?;
        let d4 = tape.relu(d4)?;
        let d5 = deconv(tape, &self.decoder[4], d4)?;
        let y = tape.add(d5, x)?;
        Ok((y, diag))
    }

    /// Inference on a `[B, 1, H, W]` batch.
    pub fn predict(&self, x: &Tensor<T>, priors: &[PriorDistribution]) -> Result<Tensor<T>> {
        Ok(self.predict_with_maps(x, priors, false)?.0)
    }

    pub fn predict_with_maps(
        &self,
        x: &Tensor<T>,
        priors: &[PriorDistribution],
        capture: bool,
    ) -> Result<(Tensor<T>, AttentionDiagnostics<T>)> {
        self.check_input(x.shape(), priors)?;
        let mut tape = Tape::new();
        let bound = self.params.attach(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, diag) = self.forward_on_tape(&mut tape, &bound, xv, priors, capture)?;
        Ok((tape.value(y).clone(), diag))
    }

    /// Replaces all parameters, e.g. from a checkpoint.
    pub fn load_params(&mut self, params: &ParamSet<T>) -> Result<()> {
        self.params.assign(params)
    }
}

#[cfg(test)]
mod tests;
