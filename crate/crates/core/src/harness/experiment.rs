//! Config-driven experiment runner: builds the dataset, trains every
//! requested variant in parallel, measures, attacks, correlates, and
//! persists the whole record. A failing (variant, dataset) cell never takes
//! the others down with it.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::robustness::evaluate_robustness;
use super::stats::Correlation;
use super::train::{train_model, EpochRecord, TrackingConfig};
use super::{
    generate_synthetic, mnist_dataset, DataSource, Dataset, DatasetSpec, HarnessError,
    HarnessResult, RobustnessRecord, SyntheticFactors,
};
use crate::attacks::AttackConfig;
use crate::metrics::{measure_all, IobConfig, MeasureConfig, MeasurementRecord};
use crate::modelzoo::{derive_seed, ModelConfig, Variant};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub source: DataSource,
    pub side: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rho: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub take_train: Option<usize>,
    pub take_test: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            side: 16,
            classes: 4,
            train: 400,
            val: 100,
            test: 200,
            rho: 0.9,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            take_train: None,
            take_test: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelsSection {
    pub variants: Vec<String>,
    pub epochs: usize,
    pub tracking: bool,
    pub tracking_samples: usize,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            variants: vec![
                "cama".to_string(),
                "caam".to_string(),
                "causaladv".to_string(),
                "dice".to_string(),
            ],
            epochs: 30,
            tracking: false,
            tracking_samples: 32,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttacksSection {
    /// labels from the standard suite; absent means the full suite, an
    /// explicitly empty list disables the robustness stage
    pub suite: Option<Vec<String>>,
    pub eval_samples: usize,
}

impl Default for AttacksSection {
    fn default() -> Self {
        Self { suite: None, eval_samples: 200 }
    }
}

impl AttacksSection {
    pub fn resolve(&self) -> HarnessResult<Vec<AttackConfig>> {
        let all = AttackConfig::standard_suite();
        match &self.suite {
            None => Ok(all),
            Some(labels) => labels
                .iter()
                .map(|want| {
                    all.iter()
                        .find(|cfg| &cfg.label() == want)
                        .cloned()
                        .ok_or_else(|| {
                            HarnessError::Config(format!(
                                "unknown attack label '{want}'; known: {}",
                                all.iter().map(|c| c.label()).collect::<Vec<_>>().join(", ")
                            ))
                        })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub dc_samples: usize,
    pub iob_train: usize,
    /// "full" or "tracking" decoder budget
    pub iob_mode: String,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { dc_samples: 256, iob_train: 256, iob_mode: "full".to_string() }
    }
}

impl MetricsSection {
    pub fn resolve(&self) -> HarnessResult<MeasureConfig> {
        let iob = match self.iob_mode.as_str() {
            "full" => IobConfig::full(),
            "tracking" => IobConfig::tracking(),
            other => {
                return Err(HarnessError::Config(format!(
                    "iob_mode must be 'full' or 'tracking', got '{other}'"
                )))
            }
        };
        Ok(MeasureConfig {
            dc_max_samples: self.dc_samples,
            iob_train_max: self.iob_train,
            iob,
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub models: ModelsSection,
    pub attacks: AttacksSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

pub fn load_config(path: &Path) -> HarnessResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CellResult {
    pub model: String,
    pub dataset: String,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub clean_test_acc: f64,
    pub measurements: MeasurementRecord,
    pub robustness: Option<RobustnessRecord>,
    pub epoch_log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CellFailure {
    pub model: String,
    pub dataset: String,
    pub error: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SkippedCorrelation {
    pub measurement: String,
    pub target: String,
    pub reason: String,
}

#[derive(serde::Serialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub correlations: Vec<Correlation>,
    pub skipped_correlations: Vec<SkippedCorrelation>,
}

/// Materializes the dataset a config describes, seeding from the master seed.
pub fn build_dataset(cfg: &ExperimentConfig) -> HarnessResult<Dataset> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic => {
            let spec = DatasetSpec {
                source: DataSource::Synthetic,
                side: d.side,
                classes: d.classes,
                train: d.train,
                val: d.val,
                test: d.test,
                seed: derive_seed(cfg.seed, "data", 0, 0),
            };
            generate_synthetic(&spec, &SyntheticFactors { rho: d.rho })
        }
        DataSource::MnistIdx => {
            let need = |field: &Option<PathBuf>, name: &str| {
                field.clone().ok_or_else(|| {
                    HarnessError::Config(format!("dataset.{name} is required for mnist_idx"))
                })
            };
            mnist_dataset(
                &need(&d.train_images, "train_images")?,
                &need(&d.train_labels, "train_labels")?,
                &need(&d.test_images, "test_images")?,
                &need(&d.test_labels, "test_labels")?,
                d.take_train,
                d.take_test,
                derive_seed(cfg.seed, "data", 0, 0),
            )
        }
    }
}

fn run_cell(
    variant: Variant,
    index: u64,
    cfg: &ExperimentConfig,
    data: &Dataset,
    attacks: &[AttackConfig],
    measure_cfg: &MeasureConfig,
) -> HarnessResult<CellResult> {
    let cell_seed = derive_seed(cfg.seed, "cell", index, 0);
    let tracking = if cfg.models.tracking {
        Some(TrackingConfig { samples: cfg.models.tracking_samples })
    } else {
        None
    };
    let trained = train_model(
        variant,
        &cfg.models.model,
        data,
        cfg.models.epochs,
        cell_seed,
        tracking.as_ref(),
    )?;
    let name = variant.to_string();

    let measurements = measure_all(
        &trained.model,
        &data.train_x,
        &data.train_y,
        &data.test_x,
        &data.test_y,
        measure_cfg,
        &name,
        &data.name,
        derive_seed(cell_seed, "measure", 0, 0),
    )?;

    let robustness = if attacks.is_empty() {
        None
    } else {
        Some(evaluate_robustness(
            &trained.model,
            &data.test_x,
            &data.test_y,
            attacks,
            &name,
            &data.name,
            derive_seed(cell_seed, "robust", 0, 0),
            cfg.attacks.eval_samples,
        )?)
    };
    let clean_test_acc = match &robustness {
        Some(r) => r.clean_acc,
        None => trained.model.accuracy(&data.test_x, &data.test_y)?,
    };

    Ok(CellResult {
        model: name,
        dataset: data.name.clone(),
        best_epoch: trained.best_epoch,
        best_val_acc: trained.best_val_acc,
        clean_test_acc,
        measurements,
        robustness,
        epoch_log: trained.log,
    })
}

fn correlate_cells(
    cells: &[CellResult],
) -> (Vec<Correlation>, Vec<SkippedCorrelation>) {
    let mut correlations = Vec::new();
    let mut skipped = Vec::new();
    if cells.len() < 3 {
        skipped.push(SkippedCorrelation {
            measurement: "*".to_string(),
            target: "*".to_string(),
            reason: format!("needs at least 3 completed cells, have {}", cells.len()),
        });
        return (correlations, skipped);
    }
    let with_robustness = cells.iter().all(|c| c.robustness.is_some());
    let target = |name: &str| -> Vec<f64> {
        cells
            .iter()
            .map(|c| match (name, &c.robustness) {
                ("clean_acc", _) => c.clean_test_acc,
                ("mean_adv_acc", Some(r)) => r.mean_adv_acc,
                ("delta_abs", Some(r)) => r.delta_abs,
                ("delta_rel", Some(r)) => r.delta_rel,
                _ => unreachable!("robustness targets only used when present"),
            })
            .collect()
    };
    let targets: &[&str] = if with_robustness {
        &["clean_acc", "mean_adv_acc", "delta_abs", "delta_rel"]
    } else {
        &["clean_acc"]
    };
    for (mi, mname) in super::MEASUREMENT_NAMES.iter().enumerate() {
        let xs: Vec<f64> = cells.iter().map(|c| c.measurements.values()[mi]).collect();
        for tname in targets {
            match super::stats::pearson(mname, tname, &xs, &target(tname)) {
                Ok(c) => correlations.push(c),
                Err(e) => skipped.push(SkippedCorrelation {
                    measurement: mname.to_string(),
                    target: tname.to_string(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    (correlations, skipped)
}

/// Runs the whole pipeline. Cell failures are isolated and reported in the
/// outcome; the statistics stage runs over whatever cells completed.
pub fn run_experiment(cfg: &ExperimentConfig) -> HarnessResult<ExperimentOutcome> {
    let variants: Vec<Variant> = cfg
        .models
        .variants
        .iter()
        .map(|s| s.parse::<Variant>().map_err(HarnessError::Model))
        .collect::<HarnessResult<_>>()?;
    let attacks = cfg.attacks.resolve()?;
    let measure_cfg = cfg.metrics.resolve()?;
    let data = build_dataset(cfg)?;

    let results: Vec<Result<CellResult, CellFailure>> = variants
        .par_iter()
        .enumerate()
        .map(|(i, &variant)| {
            run_cell(variant, i as u64, cfg, &data, &attacks, &measure_cfg).map_err(|e| {
                CellFailure {
                    model: variant.to_string(),
                    dataset: data.name.clone(),
                    error: e.to_string(),
                }
            })
        })
        .collect();

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    let (correlations, skipped_correlations) = correlate_cells(&cells);

    let outcome = ExperimentOutcome {
        config: cfg.clone(),
        cells,
        failures,
        correlations,
        skipped_correlations,
    };
    super::reports::write_reports(&outcome, &cfg.output.dir)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_parse_from_an_empty_table() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.models.variants.len(), 4);
        assert_eq!(cfg.models.epochs, 30);
        assert_eq!(cfg.dataset.train, 400);
        assert_eq!(cfg.attacks.eval_samples, 200);
        assert!(cfg.attacks.resolve().unwrap().len() == 7);
    }

    #[test]
    fn attack_subsets_resolve_by_label() {
        let section = AttacksSection {
            suite: Some(vec!["fgsm_linf".to_string(), "pgd40_l2".to_string()]),
            eval_samples: 50,
        };
        let cfgs = section.resolve().unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0].label(), "fgsm_linf");
        assert_eq!(cfgs[1].label(), "pgd40_l2");

        let bad = AttacksSection { suite: Some(vec!["pgd99_l7".to_string()]), eval_samples: 1 };
        assert!(matches!(bad.resolve(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn metrics_section_resolves_both_modes() {
        let full = MetricsSection::default().resolve().unwrap();
        assert_eq!(full.iob.epoch_cap, 150);
        let tracking = MetricsSection { iob_mode: "tracking".to_string(), ..Default::default() }
            .resolve()
            .unwrap();
        assert_eq!(tracking.iob.epoch_cap, 50);
        assert_eq!(tracking.iob.patience, 5);
        let bad = MetricsSection { iob_mode: "warp".to_string(), ..Default::default() };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn a_real_toml_stanza_overrides_defaults() {
        let text = r#"
            seed = 7
            [dataset]
            classes = 3
            train = 80
            val = 20
            test = 40
            rho = 0.25
            [models]
            variants = ["caam"]
            epochs = 2
            lr = 0.005
            [attacks]
            suite = ["fgsm_linf"]
            eval_samples = 16
            [output]
            dir = "artifacts"
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dataset.classes, 3);
        assert_eq!(cfg.dataset.rho, 0.25);
        assert_eq!(cfg.models.variants, vec!["caam"]);
        assert_eq!(cfg.models.model.lr, 0.005);
        assert_eq!(cfg.attacks.resolve().unwrap().len(), 1);
        assert_eq!(cfg.output.dir, PathBuf::from("artifacts"));
    }

    #[test]
    fn unknown_variants_fail_before_any_training() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.train = 8;
        cfg.dataset.val = 2;
        cfg.dataset.test = 4;
        cfg.models.variants = vec!["resnet".to_string()];
        assert!(run_experiment(&cfg).is_err());
    }
}
