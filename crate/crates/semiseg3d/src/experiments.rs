//! Experiment harness: Shuffle&Split cross-validation over a phantom
//! corpus, the four training settings (full labeled, half labeled,
//! semi-supervised, semi-supervised with labeled augmentation), the
//! unlabeled-start-epoch sweep and CSV/plain-text report emission.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::network::{build_model, NetworkConfig};
use crate::phantom::{generate_corpus, PhantomParams};
use crate::preprocess::{preprocess_pipeline, PreprocessConfig};
use crate::seed;
use crate::trainer::{train, TrainConfig, TrainHistory};
use crate::volume::{
    default_class_spec, labels_to_masks, DatasetSplit, Dims, LabeledSample, UnlabeledSample,
};

const STREAM_SPLIT: u64 = 0x51;
const STREAM_REPEAT: u64 = 0x52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    FullLabeled,
    HalfLabeled,
    SslHalf,
    SslHalfAug,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::FullLabeled,
        Setting::HalfLabeled,
        Setting::SslHalf,
        Setting::SslHalfAug,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Setting::FullLabeled => "full_labeled",
            Setting::HalfLabeled => "half_labeled",
            Setting::SslHalf => "ssl_half",
            Setting::SslHalfAug => "ssl_half_aug",
        }
    }

    pub fn uses_unlabeled(&self) -> bool {
        matches!(self, Setting::SslHalf | Setting::SslHalfAug)
    }

    pub fn augment_labeled(&self) -> bool {
        matches!(self, Setting::SslHalfAug)
    }

    /// Full-labeled keeps the whole training side.
    pub fn labeled_fraction(&self, configured: f64) -> f64 {
        match self {
            Setting::FullLabeled => 1.0,
            _ => configured,
        }
    }
}

/// Synthetic data source for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomDataSpec {
    pub count: usize,
    /// Cubic side of the generated grids.
    pub side: usize,
    pub seed: u64,
    pub params: Option<PhantomParams>,
    /// Intensity/geometry preprocessing; identity-geometry at `side` when
    /// omitted.
    pub preprocess: Option<PreprocessConfig>,
}

impl Default for PhantomDataSpec {
    fn default() -> Self {
        PhantomDataSpec {
            count: 50,
            side: 32,
            seed: 0,
            params: None,
            preprocess: None,
        }
    }
}

impl PhantomDataSpec {
    pub fn build(&self) -> Result<Vec<LabeledSample>> {
        let params = self
            .params
            .clone()
            .unwrap_or_else(|| PhantomParams::for_side(self.side));
        let pre = self
            .preprocess
            .clone()
            .unwrap_or_else(|| PreprocessConfig::identity_geometry(self.side));
        let dims = Dims::cubic(self.side);
        let spec = default_class_spec();
        generate_corpus(self.count, dims, &params, self.seed)?
            .into_iter()
            .map(|(id, vol, labels)| {
                Ok(LabeledSample {
                    id,
                    volume: preprocess_pipeline(&vol, &pre)?,
                    mask: labels_to_masks(&labels, &spec)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// Settings to run; each repeat shares its split across settings, so
    /// comparisons are controlled.
    pub settings: Vec<Setting>,
    /// Fraction of the training side kept labeled in settings 2-4.
    pub labeled_fraction: f64,
    pub n_repeats: usize,
    pub train_fraction: f64,
    pub base_seed: u64,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub data: PhantomDataSpec,
    /// Optional Table-2 style sweep: rows differ only in the unlabeled
    /// start epoch.
    pub start_epoch_sweep: Option<Vec<usize>>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            settings: Setting::ALL.to_vec(),
            labeled_fraction: 0.5,
            n_repeats: 4,
            train_fraction: 0.8,
            base_seed: 0,
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            data: PhantomDataSpec::default(),
            start_epoch_sweep: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() {
            return Err(SegError::InvalidConfig("no settings to run".into()));
        }
        if !(0.0 < self.labeled_fraction && self.labeled_fraction <= 1.0) {
            return Err(SegError::InvalidConfig(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(SegError::InvalidConfig("n_repeats must be >= 1".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(SegError::InvalidConfig(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        self.train.validate()?;
        self.network.validate()?;
        if let Some(sweep) = &self.start_epoch_sweep {
            if sweep.is_empty() {
                return Err(SegError::InvalidConfig("empty start_epoch_sweep".into()));
            }
            for &e in sweep {
                if e > self.train.epochs {
                    return Err(SegError::InvalidConfig(format!(
                        "sweep start epoch {e} exceeds epochs {}",
                        self.train.epochs
                    )));
                }
            }
        }
        if self.network.input_size != self.data.side {
            return Err(SegError::InvalidConfig(format!(
                "network input size {} vs data side {}",
                self.network.input_size, self.data.side
            )));
        }
        Ok(())
    }
}

/// Random permutation then split at `floor(n * train_fraction)`,
/// deterministic per `(base_seed, repeat_index)`.
pub fn shuffle_split<T: Clone>(
    items: &[T],
    train_fraction: f64,
    repeat_index: usize,
    base_seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(SegError::EmptyDataset(
            "shuffle_split needs at least 2 items".into(),
        ));
    }
    let cut = (items.len() as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == items.len() {
        return Err(SegError::InvalidArgument(format!(
            "degenerate split: {} of {} items on the training side",
            cut,
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(
        seed::mix(base_seed, STREAM_SPLIT),
        STREAM_REPEAT ^ repeat_index as u64,
    ));
    order.shuffle(&mut rng);
    let train = order[..cut].iter().map(|&i| items[i].clone()).collect();
    let val = order[cut..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

/// Builds the labeled/unlabeled pools for one setting from the training
/// side of a split. The labeled prefix is shared across settings, so the
/// half-labeled baseline and the SSL settings train on identical labels.
pub fn make_setting(
    setting: Setting,
    train_set: &[LabeledSample],
    labeled_fraction: f64,
    split_seed: u64,
) -> Result<DatasetSplit> {
    if train_set.is_empty() {
        return Err(SegError::EmptyDataset("training side".into()));
    }
    let frac = setting.labeled_fraction(labeled_fraction);
    let n_labeled = ((train_set.len() as f64 * frac).floor() as usize).max(1);
    let labeled: Vec<LabeledSample> = train_set[..n_labeled].to_vec();
    let unlabeled: Vec<UnlabeledSample> = if setting.uses_unlabeled() {
        train_set[n_labeled..]
            .iter()
            .map(|s| UnlabeledSample {
                id: s.id.clone(),
                volume: s.volume.clone(),
            })
            .collect()
    } else {
        Vec::new()
    };
    let split = DatasetSplit {
        labeled,
        unlabeled,
        split_seed,
    };
    split.validate()?;
    Ok(split)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub start_epoch: usize,
    pub stats: Vec<ClassStat>,
    pub failed_repeats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: String,
    pub start_epoch: usize,
    pub repeat: usize,
    pub rng_seed: u64,
    pub train_config: TrainConfig,
    pub final_dice: Option<Vec<f64>>,
    pub error: Option<String>,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub classes: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every (setting, sweep row, repeat) combination and aggregates
/// mean and standard deviation per class over repeats.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let corpus = spec.data.build()?;
    let classes = spec.network.class_names.clone();
    let start_epochs: Vec<usize> = spec
        .start_epoch_sweep
        .clone()
        .unwrap_or_else(|| vec![spec.train.unlab_start_epoch]);

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &setting in &spec.settings {
        for &start_epoch in &start_epochs {
            let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes.len()];
            let mut failed = 0usize;
            for repeat in 0..spec.n_repeats {
                let split_seed = seed::mix(spec.base_seed, repeat as u64);
                let (train_set, val_set) =
                    shuffle_split(&corpus, spec.train_fraction, repeat, spec.base_seed)?;
                let split = make_setting(setting, &train_set, spec.labeled_fraction, split_seed)?;
                let run_seed = seed::mix(spec.train.rng_seed, repeat as u64);
                let cfg = TrainConfig {
                    unlab_start_epoch: start_epoch,
                    augment_labeled: setting.augment_labeled(),
                    rng_seed: run_seed,
                    ..spec.train.clone()
                };
                let model = build_model(&spec.network, run_seed)?;
                let mut record = RunRecord {
                    setting: setting.name().to_string(),
                    start_epoch,
                    repeat,
                    rng_seed: run_seed,
                    train_config: cfg.clone(),
                    final_dice: None,
                    error: None,
                    history: None,
                };
                match train(model, &split, &val_set, cfg) {
                    Ok((_, history)) => {
                        let dice = history
                            .final_val_dice()
                            .expect("training ran at least one epoch")
                            .to_vec();
                        for (acc, &d) in per_class.iter_mut().zip(dice.iter()) {
                            acc.push(d);
                        }
                        record.final_dice = Some(dice);
                        record.history = Some(history);
                    }
                    Err(e) => {
                        failed += 1;
                        record.error = Some(e.to_string());
                    }
                }
                runs.push(record);
            }
            let stats = classes
                .iter()
                .zip(per_class.iter())
                .map(|(class, values)| {
                    let (mean, std) = if values.is_empty() {
                        (f64::NAN, f64::NAN)
                    } else {
                        mean_std(values)
                    };
                    ClassStat {
                        class: class.clone(),
                        mean,
                        std,
                    }
                })
                .collect();
            rows.push(ReportRow {
                setting: setting.name().to_string(),
                start_epoch,
                stats,
                failed_repeats: failed,
            });
        }
    }
    Ok(ExperimentReport {
        classes,
        rows,
        runs,
    })
}

/// Writes `table.csv`, per-run curve CSVs and a plain-text summary.
/// Deterministic: re-emitting the same report reproduces identical bytes.
pub fn emit_report(report: &ExperimentReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| SegError::io(out_dir, e))?;

    let mut table = String::from("setting,start_epoch,class,mean,std\n");
    for row in &report.rows {
        for s in &row.stats {
            table.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                row.setting, row.start_epoch, s.class, s.mean, s.std
            ));
        }
    }
    let table_path = out_dir.join("table.csv");
    fs::write(&table_path, table).map_err(|e| SegError::io(&table_path, e))?;

    let curves = out_dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| SegError::io(&curves, e))?;
    for run in &report.runs {
        if let Some(history) = &run.history {
            let name = format!(
                "{}_start{:03}_rep{}.csv",
                run.setting, run.start_epoch, run.repeat
            );
            let path = curves.join(name);
            fs::write(&path, history.to_csv()).map_err(|e| SegError::io(&path, e))?;
        }
    }

    let mut summary = String::from("Per-class validation Dice (mean +/- std over repeats)\n\n");
    for row in &report.rows {
        summary.push_str(&format!(
            "{} (unlabeled start epoch {})\n",
            row.setting, row.start_epoch
        ));
        for s in &row.stats {
            summary.push_str(&format!("  {:<4} {:.4} +/- {:.4}\n", s.class, s.mean, s.std));
        }
        if row.failed_repeats > 0 {
            summary.push_str(&format!("  ({} failed repeats)\n", row.failed_repeats));
        }
    }
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, summary).map_err(|e| SegError::io(&summary_path, e))?;
    Ok(())
}

/// Serializes the full report (with histories) next to the emitted tables.
pub fn save_report_json(report: &ExperimentReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let path = out_dir.as_ref().join("report.json");
    let json = serde_json::to_string(report)?;
    fs::write(&path, json).map_err(|e| SegError::io(&path, e))
}

pub fn load_report_json(dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = dir.as_ref().join("report.json");
    let bytes = fs::read(&path).map_err(|e| SegError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
