//! Experiment orchestration: seeded repetitions comparing a target-only HELM,
//! a HELM trained on mixed source and target data, and the aligned detector;
//! aggregation into mean/std tables, significance tests and plot data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adau::{train_adau, AdauConfig, DomainWeighting, TrainingLog};
use crate::data::{
    read_dataset, split_train_val, subsample, synth_generate, Dataset, Domain, Label, Standardizer, SyntheticSpec,
};
use crate::elm::{helm_detect, helm_train, select_sizes, DEFAULT_RIDGE_LAMBDA};
use crate::metrics::{
    balanced_accuracy, confusion, fpr, glm_model_factor, mcnemar, successes, ConfusionCounts, McNemarMode,
    PairedOutcomes, TestRecord,
};
use crate::par::{map_items, Execution};
use crate::{AdauError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "helm")]
    TargetOnlyHelm,
    MixedHelm,
    Adau,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::TargetOnlyHelm, ModelKind::MixedHelm, ModelKind::Adau];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TargetOnlyHelm => "helm",
            ModelKind::MixedHelm => "mixed-helm",
            ModelKind::Adau => "adau",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn is_aligned(self) -> bool {
        self == ModelKind::Adau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Regenerated per repetition with the repetition seed.
    Synthetic(SyntheticSpec),
    /// CSV datasets written by `write_dataset`. The test file carries labels.
    Files {
        source: PathBuf,
        target_train: PathBuf,
        target_test: PathBuf,
    },
}

/// Candidate sizes for the elbow search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowGrid {
    pub ae_sizes: Vec<usize>,
    pub oc_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub n_ae: usize,
    pub n_oc: usize,
    pub width: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub ridge_lambda: f64,
    pub batch_size: Option<usize>,
    pub disc_steps: usize,
    pub weighting: DomainWeighting,
    /// When set, `n_ae` and `n_oc` are chosen per repetition on the target
    /// training data and the fixed values are ignored.
    pub elbow: Option<ElbowGrid>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            n_ae: 20,
            n_oc: 50,
            width: 16,
            alpha: 0.1,
            epochs: 2000,
            learning_rate: 1e-3,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            batch_size: None,
            disc_steps: 1,
            weighting: DomainWeighting::Balanced,
            elbow: None,
        }
    }
}

/// Input scaling fitted on the source training rows of each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    ZScore,
    /// Per-column centring with one shared scale.
    Isotropic,
    None,
}

fn default_repetitions() -> usize {
    5
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn default_fraction() -> f64 {
    1.0
}

fn default_source_fractions() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_fraction")]
    pub target_train_fraction: f64,
    #[serde(default = "default_source_fractions")]
    pub source_fractions: Vec<f64>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub scaling: Scaling,
}

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(AdauError::invalid(format!("{what} must lie in (0, 1], got {f}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.target_train_fraction, "target_train_fraction")?;
        if self.source_fractions.is_empty() {
            return Err(AdauError::invalid("source_fractions is empty"));
        }
        for &f in &self.source_fractions {
            check_fraction(f, "source fraction")?;
        }
        if self.repetitions == 0 {
            return Err(AdauError::invalid("repetitions must be >= 1"));
        }
        if self.models.is_empty() {
            return Err(AdauError::invalid("no models requested"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.adau_config(0).validate()
    }

    pub fn from_json_file(path: &Path) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn adau_config(&self, seed: u64) -> AdauConfig {
        let a = &self.architecture;
        AdauConfig {
            width: a.width,
            alpha: a.alpha,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            n_oc: a.n_oc,
            ridge_lambda: a.ridge_lambda,
            seed,
            weighting: a.weighting,
            batch_size: a.batch_size,
            disc_steps: a.disc_steps,
            ..AdauConfig::default()
        }
    }
}

/// Confusion counts for one slice of the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    /// `all`, `unseen`, or a mode number.
    pub group: String,
    pub counts: ConfusionCounts,
    /// `None` when the slice lacks one of the two classes.
    pub ba: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelKind,
    pub seed: u64,
    pub repetition: usize,
    pub source_fraction: f64,
    pub n_ae: usize,
    pub n_oc: usize,
    pub groups: Vec<GroupResult>,
    /// Per test sample: was the prediction correct.
    pub outcomes: Vec<bool>,
    /// Fingerprint of the evaluated test set.
    pub test_digest: String,
    pub duration_secs: f64,
    pub failure: Option<String>,
    #[serde(skip)]
    pub log: Option<TrainingLog>,
}

impl RunResult {
    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

struct Pools {
    source: Dataset,
    target_train: Dataset,
    test: Dataset,
    unseen: Vec<usize>,
}

fn load_pools(config: &ExperimentConfig, seed: u64) -> Result<Pools> {
    match &config.data {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticSpec { seed, ..spec.clone() };
            let d = synth_generate(&spec)?;
            Ok(Pools {
                test: d.target_test()?,
                source: d.source,
                target_train: d.target_train,
                unseen: spec.unseen_modes(),
            })
        }
        DataSource::Files { source, target_train, target_test } => {
            let source = read_dataset(source)?.with_domain(Domain::Source);
            let target_train = read_dataset(target_train)?.with_domain(Domain::Target);
            let test = read_dataset(target_test)?.with_domain(Domain::Target);
            if test.labels().is_none() {
                return Err(AdauError::invalid("target test set needs a label column"));
            }
            let seen: BTreeSet<usize> = target_train.modes().unwrap_or(&[]).iter().copied().collect();
            let unseen = match (test.modes(), seen.is_empty()) {
                (Some(m), false) => {
                    let all: BTreeSet<usize> = m.iter().copied().collect();
                    all.difference(&seen).copied().collect()
                }
                _ => Vec::new(),
            };
            Ok(Pools { source, target_train, test, unseen })
        }
    }
}

/// Everything the models of one (repetition, source fraction) cell share.
struct Cell {
    repetition: usize,
    seed: u64,
    source_fraction: f64,
    source_train: Dataset,
    source_val: Dataset,
    target_train: Dataset,
    target_val: Dataset,
    test: Dataset,
    unseen: Vec<usize>,
    n_ae: usize,
    n_oc: usize,
}

const SOURCE_STREAM: u64 = 0x5EED_0001;
const TARGET_STREAM: u64 = 0x5EED_0002;

fn prepare_cells(config: &ExperimentConfig, repetition: usize) -> Result<Vec<Cell>> {
    let seed = config.base_seed + repetition as u64;
    let pools = load_pools(config, seed)?;
    let target = subsample(&pools.target_train, config.target_train_fraction, seed ^ TARGET_STREAM)?;
    let (target_train, target_val) = split_train_val(&target, seed)?;
    let arch = &config.architecture;
    let mut cells = Vec::new();
    for &fraction in &config.source_fractions {
        let source = subsample(&pools.source, fraction, seed ^ SOURCE_STREAM)?;
        let (source_train, source_val) = split_train_val(&source, seed)?;
        let scaler = match config.scaling {
            Scaling::ZScore => Some(Standardizer::fit(source_train.samples())),
            Scaling::Isotropic => Some(Standardizer::fit_isotropic(source_train.samples())),
            Scaling::None => None,
        };
        let scale = |d: &Dataset| match &scaler {
            Some(s) => s.transform_dataset(d),
            None => Ok(d.clone()),
        };
        let (tt, tv) = (scale(&target_train)?, scale(&target_val)?);
        let (n_ae, n_oc) = match &arch.elbow {
            Some(grid) => {
                let sel = select_sizes(&tt, &tv, &grid.ae_sizes, &grid.oc_sizes, arch.ridge_lambda, seed)?;
                (sel.n_ae, sel.n_oc)
            }
            None => (arch.n_ae, arch.n_oc),
        };
        cells.push(Cell {
            repetition,
            seed,
            source_fraction: fraction,
            source_train: scale(&source_train)?,
            source_val: scale(&source_val)?,
            target_train: tt,
            target_val: tv,
            test: scale(&pools.test)?,
            unseen: pools.unseen.clone(),
            n_ae,
            n_oc,
        });
    }
    Ok(cells)
}

/// Hex fingerprint of a labelled dataset, stable within one build.
pub fn dataset_digest(d: &Dataset) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    d.samples().shape().hash(&mut h);
    for v in d.samples().iter() {
        v.to_bits().hash(&mut h);
    }
    d.labels().hash(&mut h);
    d.modes().hash(&mut h);
    format!("{:016x}", h.finish())
}

fn predict(model: ModelKind, cell: &Cell, config: &ExperimentConfig) -> Result<(Vec<Label>, Option<TrainingLog>)> {
    let lambda = config.architecture.ridge_lambda;
    let x = cell.test.samples();
    match model {
        ModelKind::TargetOnlyHelm => {
            let m = helm_train(&cell.target_train, &cell.target_val, cell.n_ae, cell.n_oc, lambda, cell.seed)?;
            Ok((helm_detect(&m, x)?, None))
        }
        ModelKind::MixedHelm => {
            let train = cell.source_train.concat(&cell.target_train)?;
            let val = cell.source_val.concat(&cell.target_val)?;
            let m = helm_train(&train, &val, cell.n_ae, cell.n_oc, lambda, cell.seed)?;
            Ok((helm_detect(&m, x)?, None))
        }
        ModelKind::Adau => {
            let cfg = AdauConfig { n_oc: cell.n_oc, ..config.adau_config(cell.seed) };
            let (m, log) = train_adau(&cell.source_train, &cell.target_train, &cell.target_val, &cfg)?;
            Ok((m.detect(x)?, Some(log)))
        }
    }
}

fn group_order(name: &str) -> (u8, usize, String) {
    match name {
        "all" => (0, 0, String::new()),
        "unseen" => (1, 0, String::new()),
        _ => match name.parse::<usize>() {
            Ok(m) => (2, m, String::new()),
            Err(_) => (3, 0, name.to_string()),
        },
    }
}

fn group_result(name: String, truth: &[Label], pred: &[Label]) -> Result<GroupResult> {
    let counts = confusion(truth, pred)?;
    Ok(GroupResult { group: name, ba: balanced_accuracy(&counts).ok(), fpr: fpr(&counts).ok(), counts })
}

/// Confusion counts for the whole test set, the unseen modes and each mode.
pub fn evaluate_groups(test: &Dataset, pred: &[Label], unseen: &[usize]) -> Result<Vec<GroupResult>> {
    let truth = test
        .labels()
        .ok_or_else(|| AdauError::invalid("test set has no labels"))?;
    let mut out = vec![group_result("all".into(), truth, pred)?];
    if let Some(modes) = test.modes() {
        let slice = |keep: &dyn Fn(usize) -> bool| -> (Vec<Label>, Vec<Label>) {
            (0..truth.len()).filter(|&i| keep(modes[i])).map(|i| (truth[i], pred[i])).unzip()
        };
        if !unseen.is_empty() {
            let (t, p) = slice(&|m| unseen.contains(&m));
            if !t.is_empty() {
                out.push(group_result("unseen".into(), &t, &p)?);
            }
        }
        let distinct: BTreeSet<usize> = modes.iter().copied().collect();
        for m in distinct {
            let (t, p) = slice(&|k| k == m);
            out.push(group_result(m.to_string(), &t, &p)?);
        }
    }
    Ok(out)
}

fn run_cell(model: ModelKind, cell: &Cell, config: &ExperimentConfig) -> RunResult {
    let start = Instant::now();
    let mut result = RunResult {
        model,
        seed: cell.seed,
        repetition: cell.repetition,
        source_fraction: cell.source_fraction,
        n_ae: cell.n_ae,
        n_oc: cell.n_oc,
        groups: Vec::new(),
        outcomes: Vec::new(),
        test_digest: dataset_digest(&cell.test),
        duration_secs: 0.0,
        failure: None,
        log: None,
    };
    let evaluated = predict(model, cell, config).and_then(|(pred, log)| {
        let truth = cell.test.labels().expect("test labels checked at load");
        let outcomes = successes(truth, &pred)?;
        Ok((evaluate_groups(&cell.test, &pred, &cell.unseen)?, outcomes, log))
    });
    match evaluated {
        Ok((groups, outcomes, log)) => {
            assert_eq!(outcomes.len(), cell.test.n_samples());
            result.groups = groups;
            result.outcomes = outcomes;
            result.log = log;
        }
        Err(e) => result.failure = Some(e.to_string()),
    }
    result.duration_secs = start.elapsed().as_secs_f64();
    result
}

/// Runs every repetition × source fraction × model cell. Model failures are
/// recorded in the result; data errors abort.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    run_experiment_with(config, Execution::Parallel)
}

pub fn run_experiment_with(config: &ExperimentConfig, exec: Execution) -> Result<Vec<RunResult>> {
    config.validate()?;
    let mut models = config.models.clone();
    models.sort();
    models.dedup();
    let mut cells = Vec::new();
    for r in 0..config.repetitions {
        cells.extend(prepare_cells(config, r)?);
    }
    let jobs: Vec<(usize, ModelKind)> = (0..cells.len())
        .flat_map(|c| models.iter().map(move |&m| (c, m)))
        .collect();
    let results = map_items(&jobs, exec, |&(c, m)| run_cell(m, &cells[c], config));
    for pair in results.windows(2) {
        if (pair[0].repetition, pair[0].source_fraction.to_bits())
            == (pair[1].repetition, pair[1].source_fraction.to_bits())
        {
            assert_eq!(pair[0].test_digest, pair[1].test_digest, "models saw different test sets");
        }
    }
    Ok(results)
}

/// One line of the aggregate table. Values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub source_fraction: f64,
    pub mode: String,
    pub ba_mean: Option<f64>,
    pub ba_std: Option<f64>,
    pub fpr_mean: Option<f64>,
    pub fpr_std: Option<f64>,
    pub runs: usize,
    pub failed: usize,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Mean and population std in percent, summed in sorted order so the result
/// does not depend on input order.
fn mean_std(values: &mut [f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / n;
    (Some(round2(100.0 * mean)), Some(round2(100.0 * var.sqrt())))
}

pub fn aggregate(results: &[RunResult]) -> Result<Vec<SummaryRow>> {
    if results.is_empty() {
        return Err(AdauError::invalid("no results to aggregate"));
    }
    type Key = (ModelKind, u64, (u8, usize, String));
    let mut cells: BTreeMap<Key, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut counts: BTreeMap<(ModelKind, u64), (usize, usize)> = BTreeMap::new();
    for r in results {
        let frac = r.source_fraction.to_bits();
        let c = counts.entry((r.model, frac)).or_default();
        c.0 += 1;
        c.1 += usize::from(r.failed());
        for g in &r.groups {
            let e = cells
                .entry((r.model, frac, group_order(&g.group)))
                .or_insert_with(|| (g.group.clone(), Vec::new(), Vec::new()));
            e.1.extend(g.ba);
            e.2.extend(g.fpr);
        }
    }
    let mut rows: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((model, frac, _), (mode, mut ba, mut fp))| {
            let (ba_mean, ba_std) = mean_std(&mut ba);
            let (fpr_mean, fpr_std) = mean_std(&mut fp);
            let (runs, failed) = counts[&(model, frac)];
            SummaryRow { model, source_fraction: f64::from_bits(frac), mode, ba_mean, ba_std, fpr_mean, fpr_std, runs, failed }
        })
        .collect();
    // models whose every run failed still get a row
    for (&(model, frac), &(runs, failed)) in &counts {
        if !rows.iter().any(|r| r.model == model && r.source_fraction.to_bits() == frac) {
            rows.push(SummaryRow {
                model,
                source_fraction: f64::from_bits(frac),
                mode: "all".into(),
                ba_mean: None,
                ba_std: None,
                fpr_mean: None,
                fpr_std: None,
                runs,
                failed,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.source_fraction.total_cmp(&b.source_fraction))
            .then_with(|| group_order(&a.mode).cmp(&group_order(&b.mode)))
    });
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str = "model,source_fraction,mode,ba_mean,ba_std,fpr_mean,fpr_std,runs,failed";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.model.as_str(),
            r.source_fraction,
            r.mode,
            fmt_opt(r.ba_mean),
            fmt_opt(r.ba_std),
            fmt_opt(r.fpr_mean),
            fmt_opt(r.fpr_std),
            r.runs,
            r.failed
        );
    }
    s
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(AdauError::from)).collect()
}

/// Text table with BA / Std / FP / Std rows per model and one column per mode.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    modes.sort_by_key(|m| group_order(m));
    modes.dedup();
    let mut out = format!("{:<12} {:>8} {:<4}", "model", "source", "");
    for m in &modes {
        let _ = write!(out, " {m:>8}");
    }
    out.push('\n');
    let mut keys: Vec<(ModelKind, f64)> = rows.iter().map(|r| (r.model, r.source_fraction)).collect();
    keys.dedup_by(|a, b| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
    for (model, frac) in keys {
        let get = |mode: &str| rows.iter().find(|r| r.model == model && r.source_fraction == frac && r.mode == mode);
        let lines: [(&str, fn(&SummaryRow) -> Option<f64>); 4] = [
            ("BA", |r| r.ba_mean),
            ("Std", |r| r.ba_std),
            ("FP", |r| r.fpr_mean),
            ("Std", |r| r.fpr_std),
        ];
        for (i, (label, pick)) in lines.iter().enumerate() {
            let head = if i == 0 { (model.as_str().to_string(), frac.to_string()) } else { (String::new(), String::new()) };
            let _ = write!(out, "{:<12} {:>8} {label:<4}", head.0, head.1);
            for m in &modes {
                let cell = get(m).and_then(pick).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>8}");
            }
            out.push('\n');
        }
    }
    out
}

/// McNemar (exact) and GLM records for two paired outcome vectors.
pub fn compare_outcomes(name_a: &str, name_b: &str, a: &[bool], b: &[bool]) -> Result<Vec<TestRecord>> {
    let paired = PairedOutcomes::new(a, b)?;
    let mc = mcnemar(&paired, McNemarMode::Exact);
    let mut records = vec![TestRecord {
        model_a: name_a.into(),
        model_b: name_b.into(),
        test: "mcnemar_exact".into(),
        statistic: mc.statistic,
        p_value: mc.p_value,
        n: a.len(),
        flags: if mc.flagged { vec!["no_discordant_pairs".into()] } else { Vec::new() },
    }];
    let glm = match glm_model_factor(&[a.to_vec(), b.to_vec()]) {
        Ok(t) => TestRecord {
            model_a: name_a.into(),
            model_b: name_b.into(),
            test: "glm_lrt".into(),
            statistic: t.statistic,
            p_value: t.p_value,
            n: a.len() + b.len(),
            flags: if t.flagged { vec!["separation".into()] } else { Vec::new() },
        },
        Err(e) => TestRecord {
            model_a: name_a.into(),
            model_b: name_b.into(),
            test: "glm_lrt".into(),
            statistic: f64::NAN,
            p_value: f64::NAN,
            n: a.len() + b.len(),
            flags: vec![format!("failed: {e}")],
        },
    };
    records.push(glm);
    Ok(records)
}

type CellKey = (usize, u64);

fn by_cell(results: &[RunResult], model: ModelKind) -> BTreeMap<CellKey, &RunResult> {
    results
        .iter()
        .filter(|r| r.model == model && !r.failed())
        .map(|r| ((r.repetition, r.source_fraction.to_bits()), r))
        .collect()
}

/// Concatenated outcomes of two models over the cells both completed.
fn paired_outcomes(a: &BTreeMap<CellKey, &RunResult>, b: &BTreeMap<CellKey, &RunResult>) -> Result<(Vec<bool>, Vec<bool>)> {
    let (mut oa, mut ob) = (Vec::new(), Vec::new());
    for (key, ra) in a {
        if let Some(rb) = b.get(key) {
            if ra.test_digest != rb.test_digest || ra.outcomes.len() != rb.outcomes.len() {
                return Err(AdauError::invalid(format!(
                    "repetition {} was evaluated on different test sets",
                    key.0
                )));
            }
            oa.extend(&ra.outcomes);
            ob.extend(&rb.outcomes);
        }
    }
    if oa.is_empty() {
        return Err(AdauError::invalid("no paired runs to compare"));
    }
    Ok((oa, ob))
}

/// Pairwise tests between all models, pooled over repetitions and source
/// fractions, plus every non-aligned model against the aligned one.
pub fn significance_report(results: &[RunResult]) -> Result<Vec<TestRecord>> {
    let models: Vec<ModelKind> = results.iter().map(|r| r.model).collect::<BTreeSet<_>>().into_iter().collect();
    if models.len() < 2 {
        return Err(AdauError::invalid("significance tests need at least 2 models"));
    }
    let cells: BTreeMap<ModelKind, _> = models.iter().map(|&m| (m, by_cell(results, m))).collect();
    let mut records = Vec::new();
    for (i, &a) in models.iter().enumerate() {
        for &b in &models[i + 1..] {
            let (oa, ob) = paired_outcomes(&cells[&a], &cells[&b])?;
            records.extend(compare_outcomes(a.as_str(), b.as_str(), &oa, &ob)?);
        }
    }
    let non_aligned: Vec<ModelKind> = models.iter().copied().filter(|m| !m.is_aligned()).collect();
    if models.contains(&ModelKind::Adau) && !non_aligned.is_empty() {
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        for m in non_aligned {
            let (oa, ob) = paired_outcomes(&cells[&m], &cells[&ModelKind::Adau])?;
            pa.extend(oa);
            pb.extend(ob);
        }
        records.extend(compare_outcomes("non_aligned", "adau", &pa, &pb)?);
    }
    Ok(records)
}

/// A line of the long-format plot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub model: String,
    pub source_fraction: f64,
    pub mode: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub const PLOT_HEADER: &str = "model,source_fraction,mode,metric,mean,std";

/// Long-format CSV with one line per summary row and metric.
pub fn emit_plotdata(rows: &[SummaryRow]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for r in rows {
        for (metric, mean, std) in [("ba", r.ba_mean, r.ba_std), ("fpr", r.fpr_mean, r.fpr_std)] {
            let _ = writeln!(
                s,
                "{},{},{},{metric},{},{}",
                r.model.as_str(),
                r.source_fraction,
                r.mode,
                fmt_opt(mean),
                fmt_opt(std)
            );
        }
    }
    s
}

pub fn parse_plotdata(text: &str) -> Result<Vec<PlotRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(AdauError::from)).collect()
}

/// File names of everything `write_outputs` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub summary: PathBuf,
    pub significance: PathBuf,
    pub plotdata: PathBuf,
    pub table: PathBuf,
    pub runs: Vec<PathBuf>,
    pub logs: Vec<PathBuf>,
}

fn run_stem(model: ModelKind, seed: u64) -> String {
    format!("{}_{seed}", model.as_str())
}

/// Writes `summary.csv`, `significance.json`, `plotdata.csv`, `table.txt`,
/// `runs/<model>_<seed>.json` and `logs/<model>_<seed>_<fraction>.csv`.
pub fn write_outputs(dir: &Path, results: &[RunResult]) -> Result<OutputPaths> {
    fs::create_dir_all(dir.join("runs"))?;
    let summary = aggregate(results)?;
    let paths = OutputPaths {
        summary: dir.join("summary.csv"),
        significance: dir.join("significance.json"),
        plotdata: dir.join("plotdata.csv"),
        table: dir.join("table.txt"),
        runs: Vec::new(),
        logs: Vec::new(),
    };
    let mut paths = paths;
    fs::write(&paths.summary, summary_csv(&summary))?;
    fs::write(&paths.plotdata, emit_plotdata(&summary))?;
    fs::write(&paths.table, format_table(&summary))?;
    let significance = match significance_report(results) {
        Ok(records) => records,
        Err(_) if results.iter().map(|r| r.model).collect::<BTreeSet<_>>().len() < 2 => Vec::new(),
        Err(e) => return Err(e),
    };
    fs::write(&paths.significance, serde_json::to_string_pretty(&significance)?)?;

    let mut grouped: BTreeMap<(ModelKind, u64), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        grouped.entry((r.model, r.seed)).or_default().push(r);
    }
    for ((model, seed), runs) in grouped {
        let p = dir.join("runs").join(format!("{}.json", run_stem(model, seed)));
        fs::write(&p, serde_json::to_string_pretty(&runs)?)?;
        paths.runs.push(p);
        for r in runs {
            if let Some(log) = &r.log {
                fs::create_dir_all(dir.join("logs"))?;
                let p = dir.join("logs").join(format!("{}_{}.csv", run_stem(model, seed), r.source_fraction));
                log.write_csv(&p)?;
                paths.logs.push(p);
            }
        }
    }
    Ok(paths)
}

/// Reads every `runs/*.json` file under `dir`, in file-name order.
pub fn read_runs(dir: &Path) -> Result<Vec<RunResult>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("runs"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let runs: Vec<RunResult> = serde_json::from_str(&fs::read_to_string(&f)?)?;
        out.extend(runs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AffineShift;
    use proptest::prelude::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_modes: 3,
            modes_in_target_training: vec![1],
            dim: 4,
            mode_dims: 2,
            mode_separation: 8.0,
            mode_std: 1.0,
            latent_dims: 1,
            noise_floor: 0.05,
            nuisance_dims: 0,
            shift: AffineShift::identity(),
            anomaly_offset: 5.0,
            samples_per_mode: 40,
            test_samples_per_mode: 10,
            seed: 0,
        }
    }

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(spec()),
            target_train_fraction: 1.0,
            source_fractions: vec![0.5, 1.0],
            architecture: Architecture { n_ae: 10, n_oc: 20, width: 8, epochs: 5, ..Architecture::default() },
            repetitions: 2,
            base_seed: 3,
            models: ModelKind::ALL.to_vec(),
            scaling: Scaling::ZScore,
        }
    }

    fn fake(model: ModelKind, rep: usize, ba: f64) -> RunResult {
        RunResult {
            model,
            seed: rep as u64,
            repetition: rep,
            source_fraction: 1.0,
            n_ae: 1,
            n_oc: 1,
            groups: vec![GroupResult {
                group: "all".into(),
                counts: ConfusionCounts::default(),
                ba: Some(ba),
                fpr: Some(1.0 - ba),
            }],
            outcomes: vec![true, false, true],
            test_digest: "d".into(),
            duration_secs: 0.0,
            failure: None,
            log: None,
        }
    }

    #[test]
    fn cardinality_and_seeds() {
        let res = run_experiment(&config()).unwrap();
        assert_eq!(res.len(), 2 * 3 * 2);
        let seeds: BTreeSet<u64> = res.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, BTreeSet::from([3, 4]));
        for r in &res {
            assert!(r.failure.is_none(), "{:?}", r.failure);
            assert_eq!(r.outcomes.len(), 3 * 20);
            assert!(r.group("unseen").is_some());
        }
    }

    #[test]
    fn repeated_runs_give_identical_tables() {
        let cfg = config();
        let a = aggregate(&run_experiment(&cfg).unwrap()).unwrap();
        let b = aggregate(&run_experiment_with(&cfg, Execution::Sequential).unwrap()).unwrap();
        assert_eq!(summary_csv(&a), summary_csv(&b));
    }

    #[test]
    fn failures_are_recorded() {
        let mut cfg = config();
        cfg.models = vec![ModelKind::TargetOnlyHelm, ModelKind::Adau];
        cfg.architecture.learning_rate = 1e300;
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.len(), 8);
        let failed: Vec<_> = res.iter().filter(|r| r.failed()).collect();
        assert_eq!(failed.len(), 4);
        assert!(failed.iter().all(|r| r.model == ModelKind::Adau && r.outcomes.is_empty()));
        let rows = aggregate(&res).unwrap();
        let adau = rows.iter().find(|r| r.model == ModelKind::Adau).unwrap();
        assert_eq!((adau.runs, adau.failed, adau.ba_mean), (2, 2, None));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = config();
        c.source_fractions = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = config();
        c.repetitions = 0;
        assert!(c.validate().is_err());
        let mut c = config();
        c.target_train_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let json = format!(r#"{{"data": {{"synthetic": {}}}}}"#, serde_json::to_string(&spec()).unwrap());
        let c: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(c.repetitions, 5);
        assert_eq!(c.models, ModelKind::ALL.to_vec());
        assert_eq!(c.architecture.alpha, 0.1);
        assert_eq!(c.architecture.epochs, 2000);
    }

    #[test]
    fn aggregate_arithmetic() {
        let rows = aggregate(&[fake(ModelKind::Adau, 0, 0.9), fake(ModelKind::Adau, 1, 1.0)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].ba_mean, rows[0].ba_std), (Some(95.0), Some(5.0)));
        assert_eq!((rows[0].fpr_mean, rows[0].fpr_std), (Some(5.0), Some(5.0)));
        let single = aggregate(&[fake(ModelKind::Adau, 0, 0.9)]).unwrap();
        assert_eq!(single[0].ba_std, Some(0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let rows = aggregate(&[fake(ModelKind::Adau, 0, 0.9), fake(ModelKind::TargetOnlyHelm, 0, 0.5)]).unwrap();
        let t = format_table(&rows);
        let labels: Vec<&str> = t.lines().skip(1).map(|l| l.split_whitespace().rev().nth(1).unwrap()).collect();
        assert_eq!(labels, ["BA", "Std", "FP", "Std", "BA", "Std", "FP", "Std"]);
        assert!(t.contains("90.00") && t.contains("50.00"));
    }

    #[test]
    fn self_comparison() {
        let o = vec![true, false, true, true, false];
        let recs = compare_outcomes("a", "a", &o, &o).unwrap();
        assert_eq!(recs[0].p_value, 1.0);
        assert!((recs[1].p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_needs_two_models_and_pairing() {
        assert!(significance_report(&[fake(ModelKind::Adau, 0, 0.9)]).is_err());
        let mut other = fake(ModelKind::MixedHelm, 0, 0.5);
        other.test_digest = "e".into();
        assert!(significance_report(&[fake(ModelKind::Adau, 0, 0.9), other]).is_err());
        let recs = significance_report(&[
            fake(ModelKind::Adau, 0, 0.9),
            fake(ModelKind::MixedHelm, 0, 0.9),
            fake(ModelKind::TargetOnlyHelm, 0, 0.9),
        ])
        .unwrap();
        // three pairs plus the pooled comparison, two tests each
        assert_eq!(recs.len(), 8);
        assert_eq!(recs[6].model_a, "non_aligned");
        assert_eq!(recs[6].n, 6);
    }

    #[test]
    fn plotdata_cases() {
        assert_eq!(emit_plotdata(&[]), format!("{PLOT_HEADER}\n"));
        assert!(parse_plotdata(&emit_plotdata(&[])).unwrap().is_empty());
        let rows = aggregate(&[fake(ModelKind::Adau, 0, 0.9)]).unwrap();
        let text = emit_plotdata(&rows);
        assert_eq!(text.lines().count(), 3);
        let parsed = parse_plotdata(&text).unwrap();
        assert_eq!(parsed[0].metric, "ba");
        assert_eq!(parsed[0].mean, rows[0].ba_mean);
        assert_eq!(parsed[1].std, rows[0].fpr_std);
    }

    #[test]
    fn outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_experiment(&config()).unwrap();
        let paths = write_outputs(dir.path(), &res).unwrap();
        assert_eq!(paths.runs.len(), 3 * 2);
        assert_eq!(paths.logs.len(), 2 * 2);
        let back = read_runs(dir.path()).unwrap();
        assert_eq!(back.len(), res.len());
        assert_eq!(aggregate(&back).unwrap(), aggregate(&res).unwrap());
        assert_eq!(read_summary(&paths.summary).unwrap(), aggregate(&res).unwrap());
        let sig: Vec<TestRecord> = serde_json::from_str(&fs::read_to_string(&paths.significance).unwrap()).unwrap();
        assert_eq!(sig.len(), 8);
    }

    proptest! {
        #[test]
        fn aggregate_is_order_invariant(bas in prop::collection::vec(0.0f64..1.0, 1..8), rot in 0usize..8) {
            let runs: Vec<RunResult> = bas.iter().enumerate()
                .flat_map(|(i, &b)| [fake(ModelKind::Adau, i, b), fake(ModelKind::MixedHelm, i, b / 2.0)])
                .collect();
            let mut shuffled = runs.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            prop_assert_eq!(aggregate(&runs).unwrap(), aggregate(&shuffled).unwrap());
        }

        #[test]
        fn plotdata_round_trips(bas in prop::collection::vec(0.0f64..1.0, 1..6)) {
            let runs: Vec<RunResult> = bas.iter().enumerate().map(|(i, &b)| fake(ModelKind::Adau, i, b)).collect();
            let rows = aggregate(&runs).unwrap();
            let parsed = parse_plotdata(&emit_plotdata(&rows)).unwrap();
            prop_assert_eq!(parsed.len(), 2 * rows.len());
            for (p, r) in parsed.chunks(2).zip(&rows) {
                prop_assert_eq!(p[0].mean, r.ba_mean);
                prop_assert_eq!(p[0].std, r.ba_std);
                prop_assert_eq!(p[1].mean, r.fpr_mean);
                prop_assert_eq!(p[1].std, r.fpr_std);
                prop_assert_eq!(&p[0].mode, &r.mode);
            }
        }
    }
}
