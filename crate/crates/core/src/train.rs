//! Training loop, evaluation and the prior sources they draw from.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{derive_seed, rotate_augment, CtImage, ImagePair, PatchGrid};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, image_metrics, MetricsReport};
use crate::network::Network;
use crate::optim::Adam;
use crate::priors::{
    random_priors, random_priors_n, uniform_priors, uniform_priors_n, DescriptorSet, PriorDistribution, PriorTable,
};
use crate::tensor::Tensor;

/// `lr(epoch) = max(lr0 · 0.5^floor((epoch − 1) / halve_every), lr_min)`,
/// epochs counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr0: f64,
    pub halve_every: usize,
    pub lr_min: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-5,
            halve_every: 5,
            lr_min: 1e-10,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(1) / self.halve_every.max(1);
        let lr = self.lr0 * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32);
        lr.max(self.lr_min)
    }
}

/// Stops once `patience` consecutive evaluations fail to improve on the best
/// value seen.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn since_best(&self) -> usize {
        self.since_best
    }

    /// Records one evaluation; lower is better.
    pub fn observe(&mut self, value: f64) -> StopDecision {
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

/// How bioatt obtains its per-image prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Per-image priors from a prior file.
    ClipFile,
    /// `1/N` for every descriptor.
    Uniform,
    /// One normalized random vector per run.
    Random,
}

impl Weighting {
    pub const ALL: [Weighting; 3] = [Weighting::ClipFile, Weighting::Uniform, Weighting::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::ClipFile => "clip-file",
            Weighting::Uniform => "uniform",
            Weighting::Random => "random",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Weighting::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown weighting {s:?} (clip-file, uniform, random)")))
    }
}

/// Priors handed to the network for each image.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSource {
    /// The variant takes no prior.
    None,
    Shared(PriorDistribution),
    PerImage(PriorTable),
}

impl PriorSource {
    /// Picks the source for a run. Only bioatt uses priors; `clip-file`
    /// requires `table`.
    pub fn resolve(
        uses_priors: bool,
        n_descriptors: usize,
        weighting: Weighting,
        table: Option<PriorTable>,
        seed: u64,
    ) -> Result<Self> {
        if !uses_priors {
            return Ok(PriorSource::None);
        }
        let defaults = DescriptorSet::default();
        let source = match weighting {
            Weighting::ClipFile => PriorSource::PerImage(
                table.ok_or_else(|| Error::Prior("clip-file weighting needs a prior file".into()))?,
            ),
            Weighting::Uniform if n_descriptors == defaults.len() => PriorSource::Shared(uniform_priors(&defaults)),
            Weighting::Uniform => PriorSource::Shared(uniform_priors_n(n_descriptors)?),
            Weighting::Random if n_descriptors == defaults.len() => {
                PriorSource::Shared(random_priors(&defaults, seed))
            }
            Weighting::Random => PriorSource::Shared(random_priors_n(n_descriptors, seed)?),
        };
        let n = match &source {
            PriorSource::PerImage(t) => t.descriptors().len(),
            PriorSource::Shared(p) => p.len(),
            PriorSource::None => n_descriptors,
        };
        if n != n_descriptors {
            return Err(Error::Prior(format!(
                "priors have {n} descriptors, the model expects {n_descriptors}"
            )));
        }
        Ok(source)
    }

    /// The prior for image `id`; `None` for prior-free variants.
    pub fn for_image(&self, id: &str) -> Result<Option<&PriorDistribution>> {
        match self {
            PriorSource::None => Ok(None),
            PriorSource::Shared(p) => Ok(Some(p)),
            PriorSource::PerImage(t) => t
                .get(id)
                .map(Some)
                .ok_or_else(|| Error::Prior(format!("no prior for image {id}"))),
        }
    }

    /// Checks that every listed image has a prior.
    pub fn check_covers(&self, ids: &[String]) -> Result<()> {
        ids.iter().try_for_each(|id| self.for_image(id).map(|_| ()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub patience: usize,
    /// Patches per step; whole-image mode always uses 1.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub weighting: Weighting,
    /// Train on full images instead of patches.
    pub whole_image: bool,
    pub rotate_prob: f64,
    /// Patches per inference call during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            patience: 7,
            batch_size: 16,
            max_epochs: 20,
            seed: 0,
            weighting: Weighting::ClipFile,
            whole_image: false,
            rotate_prob: 0.5,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.lr0 > s.lr_min && s.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "learning rates need lr0 > lr_min > 0 (got {} and {})",
                s.lr0, s.lr_min
            )));
        }
        if s.halve_every == 0 || self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch == 0
        {
            return Err(Error::Config(
                "halve_every, patience, batch_size, max_epochs and eval_batch must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rotate_prob) {
            return Err(Error::Config(format!("rotate_prob {} outside [0, 1]", self.rotate_prob)));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        if self.whole_image {
            1
        } else {
            self.batch_size
        }
    }
}

/// Inference settings shared by evaluation and denoising.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Run the network on the whole image instead of stitching patches.
    pub whole_image: bool,
    pub batch: usize,
    /// PSNR/SSIM range; `None` uses each reference's dynamic range.
    pub data_range: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            whole_image: false,
            batch: 16,
            data_range: None,
        }
    }
}

/// Denoises one image. Returns standardized values as `[1, 1, H, W]`.
pub fn denoise_standardized(
    net: &Network,
    img: &CtImage,
    prior: Option<&PriorDistribution>,
    opts: &EvalOptions,
) -> Result<Tensor<f32>> {
    let input = img.standardized();
    let priors: Vec<PriorDistribution> = prior.into_iter().cloned().collect();
    if opts.whole_image {
        return net.predict(&input, &priors);
    }
    let grid = PatchGrid::for_image(img, net.config().patch_size)?;
    let patches = grid.patchify(&input)?;
    let p = grid.patch;
    let per = p * p;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.data().chunks(opts.batch.max(1) * per) {
        let batch = Tensor::new(vec![chunk.len() / per, 1, p, p], chunk.to_vec())?;
        out.extend_from_slice(net.predict(&batch, &priors)?.data());
    }
    grid.depatchify(&Tensor::new(patches.shape().to_vec(), out)?, &input)
}

/// Denoises one image back to HU.
pub fn denoise(net: &Network, img: &CtImage, prior: Option<&PriorDistribution>, opts: &EvalOptions) -> Result<CtImage> {
    CtImage::from_standardized(img.id.clone(), &denoise_standardized(net, img, prior, opts)?)
}

/// Denoises every low-dose image and scores it against its normal-dose
/// reference in standardized units.
pub fn evaluate(
    net: &Network,
    pairs: &[&ImagePair],
    priors: &PriorSource,
    opts: &EvalOptions,
    label: &str,
) -> Result<MetricsReport> {
    let mut images = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let out = denoise_standardized(net, &pair.ldct, priors.for_image(&pair.id)?, opts)?;
        let reference = pair.ndct.standardized();
        images.push(image_metrics(
            &pair.id,
            reference.data(),
            out.data(),
            pair.ndct.height(),
            pair.ndct.width(),
            opts.data_range,
        )?);
    }
    aggregate(label, images)
}

/// Scores the low-dose inputs themselves, the no-denoising baseline.
pub fn evaluate_identity(pairs: &[&ImagePair], opts: &EvalOptions, label: &str) -> Result<MetricsReport> {
    let images = pairs
        .iter()
        .map(|pair| {
            image_metrics(
                &pair.id,
                pair.ndct.standardized().data(),
                pair.ldct.standardized().data(),
                pair.ndct.height(),
                pair.ndct.width(),
                opts.data_range,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(label, images)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_rmse: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub best_val_rmse: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_mse,val_rmse,val_psnr,val_ssim";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{},{},{},{}\n",
            r.epoch, r.lr, r.train_mse, r.val_rmse, r.val_psnr, r.val_ssim
        ));
    }
    out
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation RMSE.
    pub best: Network,
    pub best_epoch: usize,
    /// Optimizer state at `best_epoch`.
    pub best_optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Distinct input tensor shapes fed to the network during training, in
    /// order of first use.
    pub input_shapes: Vec<Vec<usize>>,
}

/// A training example: standardized low-dose input and normal-dose target.
struct Example {
    id: String,
    side: Option<usize>,
    input: Vec<f32>,
    target: Vec<f32>,
    shape: [usize; 2],
}

fn examples(pairs: &[&ImagePair], patch: usize, whole_image: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for pair in pairs {
        let (ld, nd) = (pair.ldct.standardized(), pair.ndct.standardized());
        if whole_image {
            let (h, w) = (pair.ldct.height(), pair.ldct.width());
            out.push(Example {
                id: pair.id.clone(),
                side: (h == w).then_some(h),
                input: ld.into_data(),
                target: nd.into_data(),
                shape: [h, w],
            });
            continue;
        }
        let grid = PatchGrid::for_image(&pair.ldct, patch)?;
        let (lp, np) = (grid.patchify(&ld)?, grid.patchify(&nd)?);
        let per = patch * patch;
        for (i, (a, b)) in lp.data().chunks(per).zip(np.data().chunks(per)).enumerate() {
            out.push(Example {
                id: format!("{}#{i}", pair.id),
                side: Some(patch),
                input: a.to_vec(),
                target: b.to_vec(),
                shape: [patch, patch],
            });
        }
    }
    Ok(out)
}

/// Single-image priors for a batch: one entry if every element shares the
/// same prior, otherwise one per element.
fn batch_priors(priors: &PriorSource, ids: &[&str]) -> Result<Vec<PriorDistribution>> {
    match priors {
        PriorSource::None => Ok(Vec::new()),
        PriorSource::Shared(p) => Ok(vec![p.clone()]),
        PriorSource::PerImage(_) => ids
            .iter()
            .map(|id| Ok(priors.for_image(id)?.expect("per-image source").clone()))
            .collect(),
    }
}

/// One Adam update on a fixed batch; returns the batch loss before the
/// update.
pub fn train_step(
    net: &mut Network,
    adam: &mut Adam,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    priors: &[PriorDistribution],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.params().attach(&mut tape, true);
    let x = tape.constant(input.clone());
    let y = tape.constant(target.clone());
    let (out, _) = net.forward_on_tape(&mut tape, &bound, x, priors, false)?;
    let loss = tape.mse_loss(out, y)?;
    let value = tape.value(loss).item()? as f64;
    let mut grads = tape.backward(loss)?;
    let grads = bound.collect_grads(net.params(), &mut grads);
    adam.step(net.params_mut(), &grads, lr)?;
    Ok(value)
}

/// Trains `net` on `train_pairs`, validating once per epoch on
/// `val_pairs`. `on_epoch` sees every history row as it is produced.
pub fn train(
    mut net: Network,
    cfg: &TrainConfig,
    train_pairs: &[&ImagePair],
    val_pairs: &[&ImagePair],
    priors: &PriorSource,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Data("training needs at least one training and one validation image".into()));
    }
    let ids: Vec<String> = train_pairs.iter().chain(val_pairs).map(|p| p.id.clone()).collect();
    priors.check_covers(&ids)?;
    let examples = examples(train_pairs, net.config().patch_size, cfg.whole_image)?;
    let eval_opts = EvalOptions {
        whole_image: cfg.whole_image,
        batch: cfg.eval_batch,
        data_range: None,
    };
    let mut adam = Adam::new(net.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = (net.clone(), 0usize, adam.clone());
    let mut history = Vec::new();
    let mut input_shapes: Vec<Vec<usize>> = Vec::new();
    let mut stopped_early = false;
    let batch_size = cfg.effective_batch();

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch/{epoch}"))));
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(batch_size) {
            let shape = examples[chunk[0]].shape;
            let mut xs = Vec::with_capacity(chunk.len() * shape[0] * shape[1]);
            let mut ys = Vec::with_capacity(xs.capacity());
            let mut ids = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &examples[i];
                if ex.shape != shape {
                    return Err(Error::Data("whole-image batches need equal image sizes".into()));
                }
                let (mut x, mut y) = (ex.input.clone(), ex.target.clone());
                if let Some(side) = ex.side {
                    let seed = derive_seed(cfg.seed, &format!("{}/{epoch}", ex.id));
                    let k = rotate_augment(&mut x, side, cfg.rotate_prob, &mut ChaCha8Rng::seed_from_u64(seed));
                    if k > 0 {
                        y = crate::data::rot90(&y, side, k);
                    }
                }
                xs.extend(x);
                ys.extend(y);
                ids.push(ex.id.split('#').next().unwrap_or(&ex.id));
            }
            let dims = vec![chunk.len(), 1, shape[0], shape[1]];
            if !input_shapes.contains(&dims) {
                input_shapes.push(dims.clone());
            }
            let bp = batch_priors(priors, &ids)?;
            let loss = train_step(
                &mut net,
                &mut adam,
                &Tensor::new(dims.clone(), xs)?,
                &Tensor::new(dims, ys)?,
                &bp,
                lr,
            )?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val = evaluate(&net, val_pairs, priors, &eval_opts, "validation")?;
        let decision = stopper.observe(val.rmse.mean);
        if decision.improved {
            best = (net.clone(), epoch, adam.clone());
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_mse: loss_sum / seen.max(1) as f64,
            val_rmse: val.rmse.mean,
            val_psnr: val.psnr.mean,
            val_ssim: val.ssim.mean,
            best_val_rmse: stopper.best(),
        };
        on_epoch(&record);
        history.push(record);
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_optimizer: best.2,
        history,
        stopped_early,
        input_shapes,
    })
}

#[cfg(test)]
mod tests;
