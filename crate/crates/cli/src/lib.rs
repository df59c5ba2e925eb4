//! The `bioatt` command-line tool.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use bioatt_core::checkpoint;
use bioatt_core::data::{gen_phantom, read_ctv, split_dataset, write_ctv, Dataset, ImagePair, PhantomSpec};
use bioatt_core::experiment::{plan, run_experiment, ExperimentConfig, ExperimentName};
use bioatt_core::fsio::write_atomic;
use bioatt_core::metrics::{reports_csv, reports_table};
use bioatt_core::network::{ModelConfig, Network, Variant};
use bioatt_core::priors::{
    fixture_priors, random_priors, uniform_priors, DescriptorSet, Normalization, PriorDistribution, PriorTable,
};
use bioatt_core::train::{denoise, evaluate, evaluate_identity, history_csv, train, EvalOptions, PriorSource, Weighting};
use bioatt_core::{attention, data, Error, ErrorClass, Result};
use clap::Parser;

pub mod args;
pub mod manifest;

use args::*;
use manifest::Recorder;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.batt";
pub const HISTORY_FILE: &str = "history.csv";

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Invariant => EXIT_INVARIANT,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("BIOATT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BIOATT_THREADS={value:?} is not a positive integer")))?;
    // a pool built earlier in this process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenPhantom(a) => gen_phantom_cmd(a, Recorder::new("gen-phantom", args)),
        Command::Train(a) => train_cmd(a, Recorder::new("train", args)),
        Command::Eval(a) => eval_cmd(a, Recorder::new("eval", args)),
        Command::Denoise(a) => denoise_cmd(a, Recorder::new("denoise", args)),
        Command::AttentionMaps(a) => attention_maps_cmd(a, Recorder::new("attention-maps", args)),
        Command::Experiment(a) => experiment_cmd(a, Recorder::new("experiment", args)),
        Command::PriorsStub(a) => priors_stub_cmd(a, Recorder::new("priors-stub", args)),
    }
}

/// Config file first, then flags.
pub fn resolve_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => toml::from_str(&at(path, fs::read_to_string(path).map_err(Error::from))?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.split.seed = seed;
    }
    if let Some(v) = o.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = o.channels {
        cfg.model.channels = v;
    }
    if let Some(v) = o.patch_size {
        cfg.model.patch_size = v;
    }
    if let Some(v) = o.lr0 {
        cfg.train.schedule.lr0 = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.patience {
        cfg.train.patience = v;
    }
    Ok(cfg)
}

/// Prefixes I/O errors with the path involved.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn descriptor_set(path: Option<&Path>) -> Result<DescriptorSet> {
    match path {
        None => Ok(DescriptorSet::default()),
        Some(p) => DescriptorSet::new(
            at(p, fs::read_to_string(p).map_err(Error::from))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect::<Vec<_>>(),
        ),
    }
}

fn load_table(pa: &PriorArgs, rec: &mut Recorder) -> Result<Option<PriorTable>> {
    let Some(path) = &pa.priors else {
        return Ok(None);
    };
    let norm = if pa.renormalize {
        Normalization::Renormalize
    } else {
        Normalization::Strict
    };
    rec.input(path);
    at(path, PriorTable::load(path, &descriptor_set(pa.descriptors.as_deref())?, norm)).map(Some)
}

/// Priors for a model, or [`PriorSource::None`] if the variant takes none.
fn prior_source(
    model: &ModelConfig,
    weighting: Weighting,
    pa: &PriorArgs,
    seed: u64,
    rec: &mut Recorder,
) -> Result<PriorSource> {
    if !model.variant.uses_priors() {
        if pa.priors.is_some() {
            rec.note(format!("variant {} takes no priors; --priors ignored", model.variant));
        }
        return Ok(PriorSource::None);
    }
    if weighting == Weighting::ClipFile && pa.priors.is_none() {
        return Err(Error::Config(
            "bioatt with clip-file weighting needs --priors FILE (or --weighting uniform|random)".into(),
        ));
    }
    let table = if weighting == Weighting::ClipFile {
        load_table(pa, rec)?
    } else {
        None
    };
    PriorSource::resolve(true, model.n_descriptors, weighting, table, seed)
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.{}", manifest::FILE_NAME))
}

fn write_text(path: &Path, text: &str, rec: &mut Recorder) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    rec.output(path);
    Ok(())
}

fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_phantom_cmd(a: GenPhantomArgs, mut rec: Recorder) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let spec = PhantomSpec {
        height: a.dims,
        width: a.dims,
        sigma: a.sigma,
    };
    rec.config(serde_json::json!({"count": a.count, "dims": a.dims, "sigma": a.sigma, "prefix": a.prefix}))?;
    rec.seed(a.seed);
    let width = a.count.saturating_sub(1).to_string().len().max(4);
    let pairs = (0..a.count)
        .map(|i| {
            let id = format!("{}{i:0width$}", a.prefix);
            let (ndct, ldct) = gen_phantom(&spec, &id, a.seed)?;
            Ok(ImagePair { id, ldct, ndct })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset { pairs };
    dataset.save_dir(&a.out)?;
    for id in dataset.ids() {
        rec.output(&a.out.join(format!("{id}{}", data::LD_SUFFIX)));
        rec.output(&a.out.join(format!("{id}{}", data::ND_SUFFIX)));
    }
    rec.finish(&a.out.join(manifest::FILE_NAME))?;
    println!("wrote {} phantom pairs to {}", a.count, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, mut rec: Recorder) -> Result<()> {
    let mut cfg = resolve_config(&a.overrides)?;
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(w) = a.weighting {
        cfg.train.weighting = w.into();
    }
    cfg.train.whole_image |= a.whole_image;
    cfg.model.validate()?;
    cfg.train.validate()?;
    rec.config(&cfg)?;
    rec.seed(cfg.train.seed);
    rec.input(&a.data);

    let dataset = at(&a.data, Dataset::load_dir(&a.data))?;
    let split = split_dataset(&dataset.ids(), &cfg.split)?;
    let source = prior_source(&cfg.model, cfg.train.weighting, &a.priors, cfg.train.seed, &mut rec)?;
    let net = Network::new(cfg.model.clone())?;
    eprintln!(
        "training {} on {} images ({} validation), {} parameters",
        cfg.model.variant,
        split.train.len(),
        split.val.len(),
        net.num_parameters()
    );
    let outcome = train(
        net,
        &cfg.train,
        &dataset.subset(&split.train)?,
        &dataset.subset(&split.val)?,
        &source,
        |r| {
            eprintln!(
                "epoch {:>3}  lr {:.3e}  train_mse {:.6}  val_rmse {:.6}  val_psnr {:.3}  val_ssim {:.4}",
                r.epoch, r.lr, r.train_mse, r.val_rmse, r.val_psnr, r.val_ssim
            )
        },
    )?;

    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &outcome.best, outcome.best_epoch as u64, Some(&outcome.best_optimizer))?;
    rec.output(&ckpt);
    write_text(&a.out.join(HISTORY_FILE), &history_csv(&outcome.history), &mut rec)?;
    write_text(
        &a.out.join("split.json"),
        &(serde_json::to_string_pretty(&split)? + "\n"),
        &mut rec,
    )?;
    if outcome.stopped_early {
        rec.note(format!("early stop after epoch {}", outcome.history.len()));
    }
    rec.finish(&a.out.join(manifest::FILE_NAME))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {} val_rmse {:.6} val_psnr {:.3} val_ssim {:.4}; checkpoint {}",
        outcome.best_epoch,
        best.val_rmse,
        best.val_psnr,
        best.val_ssim,
        ckpt.display()
    );
    Ok(())
}

fn load_network(path: &Path, rec: &mut Recorder) -> Result<Network> {
    rec.input(path);
    Ok(at(path, checkpoint::load(path))?.network)
}

fn eval_cmd(a: EvalArgs, mut rec: Recorder) -> Result<()> {
    let net = load_network(&a.checkpoint, &mut rec)?;
    rec.input(&a.data);
    let weighting: Weighting = a.weighting.into();
    rec.config(serde_json::json!({"model": net.config(), "weighting": weighting, "whole_image": a.whole_image}))?;
    rec.seed(a.seed);
    let source = prior_source(net.config(), weighting, &a.priors, a.seed, &mut rec)?;
    let dataset = at(&a.data, Dataset::load_dir(&a.data))?;
    let pairs: Vec<&ImagePair> = dataset.pairs.iter().collect();
    let opts = EvalOptions {
        whole_image: a.whole_image,
        ..EvalOptions::default()
    };
    let model = evaluate(&net, &pairs, &source, &opts, net.config().variant.as_str())?;
    let ldct = evaluate_identity(&pairs, &opts, "ldct")?;
    fs::create_dir_all(&a.out)?;
    let reports = [model.clone(), ldct];
    let table = reports_table(&reports);
    write_text(&a.out.join("metrics.csv"), &reports_csv(&reports), &mut rec)?;
    write_text(&a.out.join("metrics.txt"), &table, &mut rec)?;
    write_text(&a.out.join("per_image.csv"), &model.per_image_csv(), &mut rec)?;
    rec.finish(&a.out.join(manifest::FILE_NAME))?;
    print!("{table}");
    Ok(())
}

fn single_prior<'a>(source: &'a PriorSource, id: &str) -> Result<Option<&'a PriorDistribution>> {
    source.for_image(id)
}

fn denoise_cmd(a: DenoiseArgs, mut rec: Recorder) -> Result<()> {
    let net = load_network(&a.checkpoint, &mut rec)?;
    rec.input(&a.input);
    let weighting: Weighting = a.weighting.into();
    rec.config(serde_json::json!({"model": net.config(), "weighting": weighting, "whole_image": a.whole_image}))?;
    rec.seed(a.seed);
    let source = prior_source(net.config(), weighting, &a.priors, a.seed, &mut rec)?;
    let id = image_id(&a.input);
    let img = at(&a.input, read_ctv(&a.input, &id))?;
    let opts = EvalOptions {
        whole_image: a.whole_image,
        ..EvalOptions::default()
    };
    let out = denoise(&net, &img, single_prior(&source, &id)?, &opts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_ctv(&out, &a.out)?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn attention_maps_cmd(a: AttentionMapsArgs, mut rec: Recorder) -> Result<()> {
    let net = load_network(&a.checkpoint, &mut rec)?;
    if net.config().variant != Variant::BioAtt {
        return Err(Error::Config(format!(
            "attention maps need a bioatt checkpoint, {} is {}",
            a.checkpoint.display(),
            net.config().variant
        )));
    }
    if a.epoch_tag.is_empty() || a.epoch_tag.contains(['/', '\\']) || a.epoch_tag.starts_with('.') {
        return Err(Error::Config(format!("--epoch-tag {:?} is not a plain name", a.epoch_tag)));
    }
    rec.input(&a.input);
    let weighting: Weighting = a.weighting.into();
    rec.config(serde_json::json!({"model": net.config(), "weighting": weighting, "epoch_tag": a.epoch_tag}))?;
    rec.seed(a.seed);
    let source = prior_source(net.config(), weighting, &a.priors, a.seed, &mut rec)?;
    let id = image_id(&a.input);
    let img = at(&a.input, read_ctv(&a.input, &id))?;
    let prior = single_prior(&source, &id)?
        .cloned()
        .ok_or_else(|| Error::Prior(format!("no prior for {id}")))?;
    let (_, diag) = net.predict_with_maps(&img.standardized(), std::slice::from_ref(&prior), true)?;
    let root = a.out.join(&a.epoch_tag);
    for (block, maps) in [("middle", &diag.middle), ("last", &diag.last)] {
        let maps = maps
            .as_ref()
            .ok_or_else(|| Error::Autodiff(format!("{block} block produced no attention maps")))?;
        for path in attention::export_attention_maps(maps, 0, &prior, &root.join(block))? {
            rec.output(&path);
        }
    }
    rec.finish(&root.join(manifest::FILE_NAME))?;
    println!("wrote attention maps for {id} to {}", root.display());
    Ok(())
}

/// Fixture priors for every image in `dataset`.
fn fixture_table(dataset: &Dataset, descriptors: &DescriptorSet) -> Result<PriorTable> {
    let mut table = PriorTable::new(descriptors.clone());
    for p in &dataset.pairs {
        table.insert(p.id.clone(), fixture_priors(p.ldct.pixels(), descriptors)?)?;
    }
    Ok(table)
}

fn experiment_cmd(a: ExperimentArgs, mut rec: Recorder) -> Result<()> {
    let cfg = resolve_config(&a.overrides)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let name: ExperimentName = a.name.into();
    rec.config(serde_json::json!({"experiment": name, "settings": &cfg}))?;
    rec.seed(cfg.train.seed);
    rec.input(&a.data);
    let dataset = at(&a.data, Dataset::load_dir(&a.data))?;
    let needs_file = plan(name, &cfg)
        .iter()
        .any(|r| r.model.variant.uses_priors() && r.train.weighting == Weighting::ClipFile);
    let table = match load_table(&a.priors, &mut rec)? {
        Some(t) => Some(t),
        None if needs_file => {
            rec.note("no --priors given; clip-file runs use fixture priors computed from the low-dose images");
            Some(fixture_table(&dataset, &descriptor_set(a.priors.descriptors.as_deref())?)?)
        }
        None => None,
    };
    let report = run_experiment(name, &cfg, &dataset, table.as_ref(), |label, r| {
        eprintln!(
            "[{label}] epoch {:>3}  lr {:.3e}  train_mse {:.6}  val_rmse {:.6}",
            r.epoch, r.lr, r.train_mse, r.val_rmse
        )
    })?;
    for path in report.write(&a.out)? {
        rec.output(&path);
    }
    rec.finish(&a.out.join(format!("{name}_{}", manifest::FILE_NAME)))?;
    print!("{}", reports_table(&report.reports()));
    Ok(())
}

fn priors_stub_cmd(a: PriorsStubArgs, mut rec: Recorder) -> Result<()> {
    let descriptors = descriptor_set(a.descriptors.as_deref())?;
    if let Some(d) = &a.descriptors {
        rec.input(d);
    }
    rec.input(&a.data);
    rec.config(serde_json::json!({"mode": format!("{:?}", a.mode).to_lowercase(), "descriptors": descriptors.names()}))?;
    rec.seed(a.seed);
    let dataset = at(&a.data, Dataset::load_dir(&a.data))?;
    let table = match a.mode {
        StubMode::Fixture => fixture_table(&dataset, &descriptors)?,
        StubMode::Uniform | StubMode::Random => {
            let mut table = PriorTable::new(descriptors.clone());
            for id in dataset.ids() {
                let prior = if a.mode == StubMode::Uniform {
                    uniform_priors(&descriptors)
                } else {
                    random_priors(&descriptors, data::derive_seed(a.seed, &id))
                };
                table.insert(id, prior)?;
            }
            table
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.save(&a.out)?;
    rec.output(&a.out);
    rec.finish(&sibling_manifest(&a.out))?;
    println!("wrote priors for {} images to {}", table.len(), a.out.display());
    Ok(())
}
