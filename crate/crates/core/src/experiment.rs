//! Ablation experiments: several training runs over one shared split,
//! scored on the shared test images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, ImagePair, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::metrics::{reports_csv, reports_table, MetricsReport};
use crate::network::{ModelConfig, Network, Variant};
use crate::priors::PriorTable;
use crate::train::{evaluate, history_csv, train, EpochRecord, EvalOptions, PriorSource, TrainConfig, Weighting};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentName {
    /// base, channel, spatial and bioatt under one protocol.
    Attention,
    /// Whole-image training against patch training.
    Patching,
    /// bioatt with file, uniform and random priors.
    Weighting,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 3] = [ExperimentName::Attention, ExperimentName::Patching, ExperimentName::Weighting];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Attention => "attention",
            ExperimentName::Patching => "patching",
            ExperimentName::Weighting => "weighting",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?} (attention, patching, weighting)")))
    }
}

/// Settings shared by every run of an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

/// One training run within an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The runs of `name`, all derived from `cfg`.
pub fn plan(name: ExperimentName, cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let run = |label: &str, variant: Variant, f: &dyn Fn(&mut TrainConfig)| {
        let mut train = cfg.train.clone();
        f(&mut train);
        RunSpec {
            label: label.to_string(),
            model: ModelConfig {
                variant,
                ..cfg.model.clone()
            },
            train,
        }
    };
    match name {
        ExperimentName::Attention => Variant::ALL
            .into_iter()
            .map(|v| run(v.as_str(), v, &|_| {}))
            .collect(),
        ExperimentName::Patching => vec![
            run("whole-image", cfg.model.variant, &|t| t.whole_image = true),
            run("patch", cfg.model.variant, &|t| t.whole_image = false),
        ],
        ExperimentName::Weighting => Weighting::ALL
            .into_iter()
            .map(|w| run(w.as_str(), Variant::BioAtt, &|t| t.weighting = w))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub test: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub input_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: ExperimentName,
    pub split: Split,
    pub runs: Vec<RunResult>,
}

/// Trains and tests every run of `name`. `priors` is required whenever a
/// run uses file priors. `progress` receives `(run label, epoch record)`.
pub fn run_experiment(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    priors: Option<&PriorTable>,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<ExperimentReport> {
    let split = split_dataset(&dataset.ids(), &cfg.split)?;
    let (tr, va, te) = (
        dataset.subset(&split.train)?,
        dataset.subset(&split.val)?,
        dataset.subset(&split.test)?,
    );
    let runs = plan(name, cfg)
        .into_iter()
        .map(|spec| {
            let r = run_one(spec, priors, &tr, &va, &te, &mut progress)?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { name, split, runs })
}

fn run_one(
    spec: RunSpec,
    priors: Option<&PriorTable>,
    tr: &[&ImagePair],
    va: &[&ImagePair],
    te: &[&ImagePair],
    progress: &mut impl FnMut(&str, &EpochRecord),
) -> Result<RunResult> {
    let source = PriorSource::resolve(
        spec.model.variant.uses_priors(),
        spec.model.n_descriptors,
        spec.train.weighting,
        priors.cloned(),
        spec.train.seed,
    )?;
    let net = Network::new(spec.model.clone())?;
    let label = spec.label.clone();
    let out = train(net, &spec.train, tr, va, &source, |r| progress(&label, r))?;
    let opts = EvalOptions {
        whole_image: spec.train.whole_image,
        batch: spec.train.eval_batch,
        data_range: None,
    };
    let test = evaluate(&out.best, te, &source, &opts, &spec.label)?;
    Ok(RunResult {
        spec,
        test,
        history: out.history,
        best_epoch: out.best_epoch,
        input_shapes: out.input_shapes,
    })
}

impl ExperimentReport {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.runs.iter().map(|r| r.test.clone()).collect()
    }

    /// Shape log: one line per run listing the distinct training input
    /// shapes.
    pub fn shape_log(&self) -> String {
        let mut out = String::from("run,input_shapes\n");
        for r in &self.runs {
            let shapes: Vec<String> = r
                .input_shapes
                .iter()
                .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join("x"))
                .collect();
            out.push_str(&format!("{},{}\n", r.spec.label, shapes.join(" ")));
        }
        out
    }

    /// Writes `<name>.csv`, `<name>.txt`, `<name>_shapes.csv`,
    /// `<name>_split.json` and `history_<label>.csv` per run. Contents depend
    /// only on the inputs, so reruns are byte-identical.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let name = self.name.as_str();
        let reports = self.reports();
        let mut files = vec![
            (format!("{name}.csv"), reports_csv(&reports)),
            (format!("{name}.txt"), reports_table(&reports)),
            (format!("{name}_shapes.csv"), self.shape_log()),
            (
                format!("{name}_split.json"),
                serde_json::to_string_pretty(&self.split)? + "\n",
            ),
        ];
        for r in &self.runs {
            files.push((format!("history_{}.csv", r.spec.label), history_csv(&r.history)));
        }
        files
            .into_iter()
            .map(|(file, text)| {
                let path = dir.join(file);
                write_atomic(&path, text.as_bytes())?;
                Ok(path)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_phantom, PhantomSpec};
    use crate::priors::{fixture_priors, DescriptorSet};
    use crate::train::LrSchedule;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                channels: 3,
                kernel: 3,
                patch_size: 11,
                attention_kernel: 3,
                se_reduction: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                schedule: LrSchedule {
                    lr0: 1e-3,
                    ..LrSchedule::default()
                },
                max_epochs: 1,
                ..TrainConfig::default()
            },
            split: SplitSpec::default(),
        }
    }

    fn phantoms(n: usize) -> (Dataset, PriorTable) {
        let spec = PhantomSpec {
            height: 64,
            width: 64,
            sigma: 0.06,
        };
        let mut table = PriorTable::new(DescriptorSet::default());
        let pairs = (0..n)
            .map(|i| {
                let id = format!("p{i}");
                let (ndct, ldct) = gen_phantom(&spec, &id, 1).unwrap();
                table
                    .insert(&id, fixture_priors(ldct.pixels(), &DescriptorSet::default()).unwrap())
                    .unwrap();
                ImagePair { id, ldct, ndct }
            })
            .collect();
        (Dataset { pairs }, table)
    }

    #[test]
    fn names_round_trip() {
        for e in ExperimentName::ALL {
            assert_eq!(e.as_str().parse::<ExperimentName>().unwrap(), e);
        }
        assert!(matches!("table1".parse::<ExperimentName>(), Err(Error::Config(_))));
    }

    #[test]
    fn plans_enumerate_the_runs() {
        let cfg = ExperimentConfig::default();
        let labels = |e| plan(e, &cfg).into_iter().map(|r| r.label).collect::<Vec<_>>();
        assert_eq!(labels(ExperimentName::Attention), ["base", "channel", "spatial", "bioatt"]);
        assert_eq!(labels(ExperimentName::Patching), ["whole-image", "patch"]);
        assert_eq!(labels(ExperimentName::Weighting), ["clip-file", "uniform", "random"]);
        let p = plan(ExperimentName::Patching, &cfg);
        assert!(p[0].train.whole_image && p[0].train.effective_batch() == 1);
        assert_eq!(p[1].train.effective_batch(), 16);
        assert!(plan(ExperimentName::Weighting, &cfg)
            .iter()
            .all(|r| r.model.variant == Variant::BioAtt && r.model.seed == cfg.model.seed));
    }

    #[test]
    fn weighting_runs_and_reruns_identically() {
        let (data, table) = phantoms(7);
        let cfg = tiny();
        let a = run_experiment(ExperimentName::Weighting, &cfg, &data, Some(&table), |_, _| {}).unwrap();
        assert_eq!(a.runs.len(), 3);
        assert_eq!(a.split.test.len(), 2);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        a.write(dirs[0].path()).unwrap();
        let b = run_experiment(ExperimentName::Weighting, &cfg, &data, Some(&table), |_, _| {}).unwrap();
        let files = b.write(dirs[1].path()).unwrap();
        assert_eq!(files.len(), 7);
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(
                std::fs::read(dirs[0].path().join(name)).unwrap(),
                std::fs::read(f).unwrap(),
                "{name:?}"
            );
        }
        let csv = std::fs::read_to_string(dirs[0].path().join("weighting.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn file_weighting_needs_priors() {
        let (data, _) = phantoms(7);
        assert!(matches!(
            run_experiment(ExperimentName::Weighting, &tiny(), &data, None, |_, _| {}),
            Err(Error::Prior(_))
        ));
    }

    #[test]
    fn random_weighting_depends_on_the_seed() {
        let (data, _) = phantoms(7);
        let mut cfg = tiny();
        cfg.train.weighting = Weighting::Random;
        let one = |seed| {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let run = plan(ExperimentName::Weighting, &c).remove(2);
            let split = split_dataset(&data.ids(), &c.split).unwrap();
            let (tr, va, te) = (
                data.subset(&split.train).unwrap(),
                data.subset(&split.val).unwrap(),
                data.subset(&split.test).unwrap(),
            );
            run_one(run, None, &tr, &va, &te, &mut |_, _| {}).unwrap().test.rmse.mean
        };
        assert_eq!(one(1), one(1));
        assert_ne!(one(1), one(2));
    }
}
