use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use adau_core::adau::{train_adau, AdauConfig, AdauModel};
use adau_core::data::{
    preprocess_signal, read_dataset, read_signal, split_train_val, subsample, synth_generate, write_dataset, Dataset,
    Domain, FeatureKind, Label, SyntheticSpec,
};
use adau_core::elm::{helm_detect, helm_train, HelmModel, DEFAULT_RIDGE_LAMBDA};
use adau_core::harness::{
    aggregate, emit_plotdata, evaluate_groups, format_table, read_runs, read_summary, run_experiment,
    significance_report, write_outputs, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "adau", version, about = "Domain-adapted one-class anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Helm,
    MixedHelm,
    Adau,
}

#[derive(Subcommand)]
enum Command {
    /// Write source, target-train and target-test CSVs from a synthetic spec.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a raw vibration recording into an FFT feature CSV.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        #[arg(long, default_value_t = 1024)]
        window_length: usize,
        #[arg(long, default_value_t = 200)]
        window_count: usize,
        #[arg(long, value_parser = ["source", "target"], default_value = "source")]
        domain: String,
        /// Label every window (evaluation sets only).
        #[arg(long, value_parser = ["healthy", "anomalous"])]
        label: Option<String>,
    },
    /// Train one detector and save it as JSON.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Healthy target data.
        #[arg(long)]
        target: PathBuf,
        /// Healthy source data (mixed-helm and adau).
        #[arg(long)]
        source: Option<PathBuf>,
        /// JSON model settings (AdauConfig fields plus n_ae).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        target_fraction: Option<f64>,
        #[arg(long)]
        source_fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a labelled dataset with a saved model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment sweep.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        source_fraction: Option<Vec<f64>>,
        #[arg(long)]
        target_fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Recompute significance tests from the run files of an experiment.
    Stats {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the BA/FP table and write plot data from a summary.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
struct TrainSettings {
    #[serde(default)]
    n_ae: Option<usize>,
    #[serde(flatten)]
    adau: AdauConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "kebab-case")]
enum SavedModel {
    Helm(HelmModel),
    MixedHelm(HelmModel),
    Adau(Box<AdauModel>),
}

impl SavedModel {
    fn detect(&self, x: &nalgebra::DMatrix<f64>) -> adau_core::Result<Vec<Label>> {
        match self {
            SavedModel::Helm(m) | SavedModel::MixedHelm(m) => helm_detect(m, x),
            SavedModel::Adau(m) => m.detect(x),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn maybe_subsample(d: Dataset, fraction: Option<f64>, seed: u64) -> anyhow::Result<Dataset> {
    Ok(match fraction {
        Some(f) => subsample(&d, f, seed)?,
        None => d,
    })
}

fn train(
    model: ModelArg,
    target: &Path,
    source: Option<&Path>,
    mut settings: TrainSettings,
    seed: u64,
    fractions: (Option<f64>, Option<f64>),
) -> anyhow::Result<SavedModel> {
    let target = maybe_subsample(read_dataset(target)?.with_domain(Domain::Target), fractions.0, seed)?;
    let (tt, tv) = split_train_val(&target, seed)?;
    let source = match source {
        Some(p) => Some(maybe_subsample(read_dataset(p)?.with_domain(Domain::Source), fractions.1, seed)?),
        None => None,
    };
    let n_ae = settings.n_ae.unwrap_or(20);
    let cfg = &mut settings.adau;
    cfg.seed = seed;
    Ok(match (model, source) {
        (ModelArg::Helm, _) => SavedModel::Helm(helm_train(&tt, &tv, n_ae, cfg.n_oc, cfg.ridge_lambda, seed)?),
        (ModelArg::MixedHelm, Some(src)) => {
            let (st, sv) = split_train_val(&src, seed)?;
            SavedModel::MixedHelm(helm_train(&st.concat(&tt)?, &sv.concat(&tv)?, n_ae, cfg.n_oc, cfg.ridge_lambda, seed)?)
        }
        (ModelArg::Adau, Some(src)) => {
            let (st, _) = split_train_val(&src, seed)?;
            let (m, log) = train_adau(&st, &tt, &tv, cfg)?;
            let last = log.records.last();
            if let Some(r) = last {
                eprintln!("final epoch: mds {:.6} disc {:.6} eta {:.6}", r.mds_loss, r.disc_loss, r.eta_target);
            }
            SavedModel::Adau(Box::new(m))
        }
        (_, None) => bail!("--source is required for this model"),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(&config)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let d = synth_generate(&spec)?;
            let seed = Some(spec.seed);
            write_dataset(&out.join("source.csv"), &d.source, seed)?;
            write_dataset(&out.join("target_train.csv"), &d.target_train, seed)?;
            write_dataset(&out.join("target_test.csv"), &d.target_test()?, seed)?;
            println!("wrote datasets to {}", out.display());
        }
        Command::Preprocess { input, out, factor, window_length, window_count, domain, label } => {
            let signal = read_signal(&input)?;
            let x = preprocess_signal(&signal, factor, window_length, window_count)?;
            let domain = if domain == "target" { Domain::Target } else { Domain::Source };
            let labels = label.and_then(|l| Label::parse(&l)).map(|l| vec![l; x.nrows()]);
            let d = Dataset::new(x, domain, labels, FeatureKind::FftMagnitude)?;
            write_dataset(&out, &d, None)?;
            println!("{} windows x {} coefficients -> {}", d.n_samples(), d.n_features(), out.display());
        }
        Command::Train { model, target, source, config, seed, target_fraction, source_fraction, epochs, alpha, out } => {
            let mut settings: TrainSettings = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => TrainSettings { n_ae: None, adau: AdauConfig { ridge_lambda: DEFAULT_RIDGE_LAMBDA, ..Default::default() } },
            };
            if let Some(e) = epochs {
                settings.adau.epochs = e;
            }
            if let Some(a) = alpha {
                settings.adau.alpha = a;
            }
            let saved = train(model, &target, source.as_deref(), settings, seed, (target_fraction, source_fraction))?;
            write_json(&out, &saved)?;
            println!("saved model to {}", out.display());
        }
        Command::Evaluate { model, data, out } => {
            let saved: SavedModel = serde_json::from_str(&fs::read_to_string(&model)?)?;
            let d = read_dataset(&data)?;
            let pred = saved.detect(d.samples())?;
            let groups = evaluate_groups(&d, &pred, &[])?;
            for g in &groups {
                let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
                println!("{:<6} BA {:>7} FP {:>7}  {:?}", g.group, pct(g.ba), pct(g.fpr), g.counts);
            }
            if let Some(p) = out {
                write_json(&p, &groups)?;
            }
        }
        Command::Experiment { config, out, seed, source_fraction, target_fraction, epochs, alpha } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(f) = source_fraction {
                cfg.source_fractions = f;
            }
            if let Some(f) = target_fraction {
                cfg.target_train_fraction = f;
            }
            if let Some(e) = epochs {
                cfg.architecture.epochs = e;
            }
            if let Some(a) = alpha {
                cfg.architecture.alpha = a;
            }
            let results = run_experiment(&cfg)?;
            for r in results.iter().filter(|r| r.failed()) {
                eprintln!("{} seed {} failed: {}", r.model.as_str(), r.seed, r.failure.as_deref().unwrap_or(""));
            }
            write_outputs(&out, &results)?;
            write_json(&out.join("config.json"), &cfg)?;
            print!("{}", format_table(&aggregate(&results)?));
        }
        Command::Stats { out } => {
            let records = significance_report(&read_runs(&out)?)?;
            for r in &records {
                println!("{:<12} {:<12} {:<14} p = {:.3e} {}", r.model_a, r.model_b, r.test, r.p_value, r.flags.join(";"));
            }
            write_json(&out.join("significance.json"), &records)?;
        }
        Command::Report { out } => {
            let rows = read_summary(&out.join("summary.csv"))?;
            fs::write(out.join("plotdata.csv"), emit_plotdata(&rows))?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}
