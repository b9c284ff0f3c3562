//! Command-line front end. Every stage of the pipeline is its own
//! subcommand; `run` chains them all. Machine-readable data goes only to
//! files, stdout carries human-readable summaries, and a fixed `--seed`
//! makes any invocation bit-reproducible.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 partial
//! experiment failure (some cells completed, some did not).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdlab::harness::{
    build_dataset, check_reference_tables, correlations_csv, evaluate_robustness, format_p,
    load_config, measurements_csv, pearson, robustness_csv, run_experiment, summary_tables,
    tracking_csv, train_model, write_atomic, write_idx_images, write_idx_labels, Correlation,
    DataSource, ExperimentConfig, HarnessError, HarnessResult, RobustnessRecord,
    TrackingConfig, TrackingRow,
};
use cdlab::metrics::{measure_all, MeasurementRecord};
use cdlab::modelzoo::{derive_seed, Variant};

#[derive(Parser)]
#[command(
    name = "cdlab",
    version,
    about = "Measures causal disentanglement in small classifiers and correlates it with adversarial robustness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset and write it as IDX files
    ///
    /// Writes train-images.idx, train-labels.idx, test-images.idx and
    /// test-labels.idx (standard IDX layout: big-endian magic and dims,
    /// then u8 payload). The train files hold the train+validation pool;
    /// loaders re-derive the 4:1 split from the seed.
    GenData(ConfigArgs),
    /// Train model variants and save checkpoints
    ///
    /// Writes one <variant>.ckpt per trained variant, and tracking.csv
    /// (model,dataset,epoch,m1,clean_acc,pgd40_acc) when the config enables
    /// per-epoch tracking.
    Train(StageArgs),
    /// Train variants and record their five disentanglement measurements
    ///
    /// Writes measurements.csv with columns model,dataset,n,m1,m2,m3,m4,m5.
    Measure(StageArgs),
    /// Train variants and evaluate accuracy under the attack suite
    ///
    /// Writes robustness.csv with columns model,dataset,n,clean_acc, one
    /// column per attack label, mean_adv_acc,delta_abs,delta_rel.
    Attack(AttackArgs),
    /// Correlate recorded measurements with recorded robustness
    ///
    /// Reads measurements.csv and robustness.csv from the output directory,
    /// joins rows on (model,dataset), and writes correlations.csv with
    /// columns measurement,target,n,r,p.
    Correlate(ConfigArgs),
    /// Full pipeline: train, measure, attack, correlate, report
    ///
    /// Runs every (variant, dataset) cell in parallel and writes
    /// measurements.csv, robustness.csv, correlations.csv, tracking.csv,
    /// experiment.json and per-cell JSON records.
    Run(ConfigArgs),
    /// Verify the statistics stack against the embedded reference tables
    ///
    /// Recomputes all twenty published measurement/robustness correlations
    /// from the embedded reference values and checks agreement in both the
    /// coefficients and their significance classifications.
    PaperCheck,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's [output] dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Directory of IDX files from gen-data; omitted means synthetic in memory
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Restrict to one variant: cama, caam, causaladv or dice
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Restrict to one attack label from the standard suite
    #[arg(long)]
    attack: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Measure(a) => measure(a),
        Command::Attack(a) => attack(a),
        Command::Correlate(a) => correlate(a),
        Command::Run(a) => run(a),
        Command::PaperCheck => paper_check(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn effective_config(args: &ConfigArgs) -> HarnessResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_dataset_dir(cfg: &mut ExperimentConfig, dir: &Option<PathBuf>) {
    if let Some(d) = dir {
        cfg.dataset.source = DataSource::MnistIdx;
        cfg.dataset.train_images = Some(d.join("train-images.idx"));
        cfg.dataset.train_labels = Some(d.join("train-labels.idx"));
        cfg.dataset.test_images = Some(d.join("test-images.idx"));
        cfg.dataset.test_labels = Some(d.join("test-labels.idx"));
    }
}

/// Variants to run, each with its position in the config's list. Keeping
/// the position means a single-variant invocation derives the same seeds as
/// the matching cell of a full run, so their records agree byte for byte.
fn selected_variants(
    cfg: &ExperimentConfig,
    only: &Option<String>,
) -> HarnessResult<Vec<(u64, Variant)>> {
    let parse = |s: &str| s.parse::<Variant>().map_err(HarnessError::Model);
    match only {
        None => cfg
            .models
            .variants
            .iter()
            .enumerate()
            .map(|(i, s)| Ok((i as u64, parse(s)?)))
            .collect(),
        Some(name) => {
            let v = parse(name)?;
            let index = cfg
                .models
                .variants
                .iter()
                .position(|s| s.parse::<Variant>().ok() == Some(v))
                .unwrap_or(0);
            Ok(vec![(index as u64, v)])
        }
    }
}

fn gen_data(args: ConfigArgs) -> HarnessResult<ExitCode> {
    let cfg = effective_config(&args)?;
    if !matches!(cfg.dataset.source, DataSource::Synthetic) {
        return Err(HarnessError::Config(
            "gen-data only writes the synthetic source; the config selects another".into(),
        ));
    }
    let data = build_dataset(&cfg)?;
    let dir = cfg.output.dir.clone();

    let mut pool_x = data.train_x.clone();
    pool_x.extend(data.val_x.iter().cloned());
    let mut pool_y = data.train_y.clone();
    pool_y.extend(data.val_y.iter().cloned());
    write_idx_images(&dir.join("train-images.idx"), &pool_x)?;
    write_idx_labels(&dir.join("train-labels.idx"), &pool_y)?;
    write_idx_images(&dir.join("test-images.idx"), &data.test_x)?;
    write_idx_labels(&dir.join("test-labels.idx"), &data.test_y)?;

    println!(
        "wrote {} train and {} test images ({}x{} px, {} classes, confounder rho {:.2}) to {}",
        pool_x.len(),
        data.test_x.len(),
        cfg.dataset.side,
        cfg.dataset.side,
        data.classes,
        cfg.dataset.rho,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(args: StageArgs) -> HarnessResult<ExitCode> {
    let mut cfg = effective_config(&args.common)?;
    apply_dataset_dir(&mut cfg, &args.dataset);
    let selected = selected_variants(&cfg, &args.model)?;
    let data = build_dataset(&cfg)?;
    let tracking = cfg
        .models
        .tracking
        .then(|| TrackingConfig { samples: cfg.models.tracking_samples });
    std::fs::create_dir_all(&cfg.output.dir)?;

    let mut rows: Vec<TrackingRow> = Vec::new();
    for &(index, variant) in &selected {
        let cell_seed = derive_seed(cfg.seed, "cell", index, 0);
        let outcome = train_model(
            variant,
            &cfg.models.model,
            &data,
            cfg.models.epochs,
            cell_seed,
            tracking.as_ref(),
        )?;
        let path = cfg.output.dir.join(format!("{variant}.ckpt"));
        outcome.model.save(&path)?;
        println!(
            "{variant}: best val acc {:.3} at epoch {} of {}; checkpoint {}",
            outcome.best_val_acc,
            outcome.best_epoch,
            cfg.models.epochs,
            path.display()
        );
        for rec in &outcome.log {
            if let (Some(m1), Some(adv)) = (rec.m1, rec.adv_acc) {
                rows.push(TrackingRow {
                    model: variant.to_string(),
                    dataset: data.name.clone(),
                    epoch: rec.epoch,
                    m1,
                    clean_acc: rec.val_acc,
                    pgd40_acc: adv,
                });
            }
        }
    }
    if tracking.is_some() {
        let path = cfg.output.dir.join("tracking.csv");
        write_atomic(&path, tracking_csv(&rows).as_bytes())?;
        println!("tracking series in {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn measure(args: StageArgs) -> HarnessResult<ExitCode> {
    let mut cfg = effective_config(&args.common)?;
    apply_dataset_dir(&mut cfg, &args.dataset);
    let selected = selected_variants(&cfg, &args.model)?;
    let measure_cfg = cfg.metrics.resolve()?;
    let data = build_dataset(&cfg)?;

    println!(
        "{:<12} {:<10} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model", "dataset", "n", "m1", "m2", "m3", "m4", "m5"
    );
    let mut records = Vec::new();
    for &(index, variant) in &selected {
        let cell_seed = derive_seed(cfg.seed, "cell", index, 0);
        let trained = train_model(
            variant,
            &cfg.models.model,
            &data,
            cfg.models.epochs,
            cell_seed,
            None,
        )?;
        let rec = measure_all(
            &trained.model,
            &data.train_x,
            &data.train_y,
            &data.test_x,
            &data.test_y,
            &measure_cfg,
            &variant.to_string(),
            &data.name,
            derive_seed(cell_seed, "measure", 0, 0),
        )?;
        println!(
            "{:<12} {:<10} {:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            rec.model, rec.dataset, rec.n, rec.m1, rec.m2, rec.m3, rec.m4, rec.m5
        );
        records.push(rec);
    }
    let refs: Vec<&MeasurementRecord> = records.iter().collect();
    let path = cfg.output.dir.join("measurements.csv");
    write_atomic(&path, measurements_csv(&refs).as_bytes())?;
    println!("rows in {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn attack(args: AttackArgs) -> HarnessResult<ExitCode> {
    let mut cfg = effective_config(&args.stage.common)?;
    apply_dataset_dir(&mut cfg, &args.stage.dataset);
    if let Some(label) = &args.attack {
        cfg.attacks.suite = Some(vec![label.clone()]);
    }
    let attacks = cfg.attacks.resolve()?;
    if attacks.is_empty() {
        return Err(HarnessError::NoAttacks);
    }
    let selected = selected_variants(&cfg, &args.stage.model)?;
    let data = build_dataset(&cfg)?;

    let mut records = Vec::new();
    for &(index, variant) in &selected {
        let cell_seed = derive_seed(cfg.seed, "cell", index, 0);
        let trained = train_model(
            variant,
            &cfg.models.model,
            &data,
            cfg.models.epochs,
            cell_seed,
            None,
        )?;
        let rec = evaluate_robustness(
            &trained.model,
            &data.test_x,
            &data.test_y,
            &attacks,
            &variant.to_string(),
            &data.name,
            derive_seed(cell_seed, "robust", 0, 0),
            cfg.attacks.eval_samples,
        )?;
        println!(
            "{}: clean {:.3}, mean attacked {:.3}, relative drop {:.3}",
            rec.model, rec.clean_acc, rec.mean_adv_acc, rec.delta_rel
        );
        for a in &rec.per_attack {
            println!("  {:<10} {:.3}", a.label, a.accuracy);
        }
        records.push(rec);
    }
    let refs: Vec<&RobustnessRecord> = records.iter().collect();
    let path = cfg.output.dir.join("robustness.csv");
    write_atomic(&path, robustness_csv(&refs).as_bytes())?;
    println!("rows in {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Simple comma-split CSV reader for the files this tool writes itself
/// (no quoting in any of them).
fn read_csv(path: &Path, hint: &str) -> HarnessResult<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}; {hint}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn field(row: &[String], idx: usize, path: &Path) -> HarnessResult<f64> {
    row.get(idx)
        .and_then(|s| s.parse::<f64>().ok())
        .ok_or_else(|| {
            HarnessError::Config(format!("{}: bad numeric field in row {row:?}", path.display()))
        })
}

fn correlate(args: ConfigArgs) -> HarnessResult<ExitCode> {
    let cfg = effective_config(&args)?;
    let dir = &cfg.output.dir;
    let meas_path = dir.join("measurements.csv");
    let robust_path = dir.join("robustness.csv");
    let (_, meas_rows) = read_csv(&meas_path, "run `cdlab measure` first")?;
    let (robust_header, robust_rows) = read_csv(&robust_path, "run `cdlab attack` first")?;

    let col = |name: &str| -> HarnessResult<usize> {
        robust_header.iter().position(|h| h == name).ok_or_else(|| {
            HarnessError::Config(format!(
                "{}: missing column '{name}'",
                robust_path.display()
            ))
        })
    };
    let target_cols =
        [col("clean_acc")?, col("mean_adv_acc")?, col("delta_abs")?, col("delta_rel")?];

    // join on (model, dataset)
    let mut measurements: Vec<[f64; 5]> = Vec::new();
    let mut targets: Vec<[f64; 4]> = Vec::new();
    for row in &meas_rows {
        let Some(partner) = robust_rows.iter().find(|r| r[..2] == row[..2]) else {
            continue;
        };
        let mut ms = [0.0; 5];
        for (j, m) in ms.iter_mut().enumerate() {
            *m = field(row, 3 + j, &meas_path)?;
        }
        let mut ts = [0.0; 4];
        for (j, t) in ts.iter_mut().enumerate() {
            *t = field(partner, target_cols[j], &robust_path)?;
        }
        measurements.push(ms);
        targets.push(ts);
    }
    if measurements.len() < 3 {
        return Err(HarnessError::TooFewPoints { n: measurements.len() });
    }
    println!("joined {} (model, dataset) rows", measurements.len());

    let measurement_names = ["m1", "m2", "m3", "m4", "m5"];
    let target_names = ["clean_acc", "mean_adv_acc", "delta_abs", "delta_rel"];
    let mut correlations: Vec<Correlation> = Vec::new();
    for (mi, mname) in measurement_names.iter().enumerate() {
        for (ti, tname) in target_names.iter().enumerate() {
            let xs: Vec<f64> = measurements.iter().map(|m| m[mi]).collect();
            let ys: Vec<f64> = targets.iter().map(|t| t[ti]).collect();
            match pearson(mname, tname, &xs, &ys) {
                Ok(c) => {
                    let star = if c.p <= 0.05 { " *" } else { "" };
                    println!("  {mname} vs {tname}: r {:+.3}, p {}{star}", c.r, format_p(c.p));
                    correlations.push(c);
                }
                Err(e) => println!("  {mname} vs {tname}: skipped ({e})"),
            }
        }
    }
    let path = dir.join("correlations.csv");
    write_atomic(&path, correlations_csv(&correlations).as_bytes())?;
    println!("rows in {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run(args: ConfigArgs) -> HarnessResult<ExitCode> {
    let cfg = effective_config(&args)?;
    let outcome = run_experiment(&cfg)?;
    print!("{}", summary_tables(&outcome));
    println!("\nartifacts in {}", cfg.output.dir.display());
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else if outcome.cells.is_empty() {
        Err(HarnessError::Config(format!(
            "all {} cells failed; first failure: {}",
            outcome.failures.len(),
            outcome.failures[0].error
        )))
    } else {
        Ok(ExitCode::from(3))
    }
}

fn paper_check() -> HarnessResult<ExitCode> {
    let check = check_reference_tables(0.03)?;
    println!(
        "{:<14} {:<12} {:>9} {:>11} {:>10} {:>8}  sig",
        "target", "measurement", "reported", "recomputed", "deviation", "p"
    );
    for row in &check.rows {
        let sig = match (row.significant_reported, row.significant_recomputed) {
            (true, true) => "*",
            (false, false) => " ",
            _ => "MISMATCH",
        };
        println!(
            "{:<14} {:<12} {:>+9.3} {:>+11.3} {:>10.4} {:>8}  {}",
            row.target,
            row.measurement,
            row.r_reported,
            row.r_recomputed,
            row.deviation,
            format_p(row.p_recomputed),
            sig
        );
    }
    println!(
        "\nmax deviation {:.4} against tolerance {:.2}; significance classes {}",
        check.max_deviation,
        check.tolerance,
        if check.significance_matches { "match" } else { "MISMATCH" }
    );
    if check.all_within_tolerance && check.significance_matches {
        println!("all {} correlations reproduce", check.rows.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("reference table check FAILED");
        Ok(ExitCode::from(1))
    }
}
