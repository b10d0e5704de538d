//! Experiment configs, command orchestration and persisted reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analyze::{run_sweep, write_records_csv, QprDataConfig, QprExperiment, SweepConfig};
use crate::ansatz::{build, readout_measurements, AnsatzSpec, Family};
use crate::discrim::{margin_mean_certificate, MarginCertificate};
use crate::embed::{
    embedded_trace_distance, train_embedding, EmbedTrainConfig, EmbeddingModel, EmbeddingSpec, Scheme,
    DEFAULT_MLP_DIMS, DEFAULT_TQE_LAYERS, DEFAULT_ZZ_LAYERS,
};
use crate::error::{Error, Result};
use crate::ingest::{
    apply_pca, filter_binary, fit_pca, load_idx_pair, save_classical, subsample_per_class, ClassicalDataset,
};
use crate::margin::{
    distance_bound, evaluate_margin_bound, margin_loss_from_margins, margin_report, measurement_lipschitz,
    BoundInputs, BoundReport, DistanceMode, MarginReport, StateMode,
};
use crate::qpr::{
    default_regions, load_dataset, save_dataset, write_csv, DatasetManifest, LabeledQuantumDataset, PhaseRegion,
};
use crate::qsim::Statevector;
use crate::train::{accuracy, fit, write_loss_csv, Batch, RunRecord, TrainConfig};

/// Relative dataset paths in configs resolve against this directory.
pub const DATA_ROOT_ENV: &str = "QMARGIN_DATA_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numerical(_) | Error::Capacity(_) => EXIT_NUMERICAL,
        Error::Domain(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_DATA,
    }
}

fn config_err<T>(field: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field: field.into(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSection {
    Qpr(QprSection),
    Mnist(MnistSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QprSection {
    pub n_qubits: usize,
    pub m: usize,
    pub noise_fraction: f64,
    pub pool_per_class: usize,
    pub pool_seed: u64,
    /// Held-out samples for `train`; 0 skips the evaluation.
    pub test_size: usize,
    pub test_seed: u64,
    pub regions: Vec<PhaseRegion>,
    /// Previously generated dataset directory; `train` loads it instead of
    /// sampling.
    pub path: Option<PathBuf>,
}

impl Default for QprSection {
    fn default() -> Self {
        let d = QprDataConfig::default();
        Self {
            n_qubits: d.n_qubits,
            m: d.m,
            noise_fraction: 0.0,
            pool_per_class: d.pool_per_class,
            pool_seed: d.pool_seed,
            test_size: d.test_size,
            test_seed: d.test_seed,
            regions: default_regions(),
            path: None,
        }
    }
}

impl QprSection {
    pub fn data_config(&self) -> QprDataConfig {
        QprDataConfig {
            n_qubits: self.n_qubits,
            m: self.m,
            test_size: self.test_size,
            pool_per_class: self.pool_per_class,
            pool_seed: self.pool_seed,
            test_seed: self.test_seed,
            regions: self.regions.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return config_err("dataset.noise_fraction", format!("{} outside [0, 1]", self.noise_fraction));
        }
        if self.m == 0 {
            return config_err("dataset.m", "must be positive");
        }
        if self.m > 4 * self.pool_per_class {
            return config_err("dataset.m", "exceeds the sampling pool");
        }
        if !self.test_size.is_multiple_of(4) {
            return config_err("dataset.test_size", "must be a multiple of 4");
        }
        Ok(())
    }
}

/// Two-class image subset reduced by PCA onto `[0, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistSection {
    /// Directory holding the four IDX files, gzipped or not.
    pub dir: PathBuf,
    pub classes: [i64; 2],
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pca_dim: usize,
}

impl Default for MnistSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("mnist"),
            classes: [0, 1],
            train_per_class: 250,
            test_per_class: 250,
            pca_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginSection {
    /// Margin level for the bound; unset uses `max(median margin, 1e-3)`.
    pub gamma: Option<f64>,
    pub delta: f64,
    /// Levels at which the empirical margin loss is tabulated.
    pub gammas: Vec<f64>,
    pub distance: DistanceMode,
    pub state_mode: StateMode,
}

impl Default for MarginSection {
    fn default() -> Self {
        Self {
            gamma: None,
            delta: 0.1,
            gammas: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            distance: DistanceMode::Analytic,
            state_mode: StateMode::Pure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub family: Family,
    pub layers: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            family: Family::Qcnn,
            layers: 1,
            train: TrainConfig {
                batch: Batch::Size(16),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub schemes: Vec<Scheme>,
    pub data: MnistSection,
    pub zz_layers: usize,
    pub tqe_layers: usize,
    pub mlp_dims: Vec<usize>,
    pub train: EmbedTrainConfig,
    pub classifier: ClassifierSection,
    pub gammas: Vec<f64>,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::ZzFixed, Scheme::Tqe, Scheme::Nqe],
            data: MnistSection::default(),
            zz_layers: DEFAULT_ZZ_LAYERS,
            tqe_layers: DEFAULT_TQE_LAYERS,
            mlp_dims: DEFAULT_MLP_DIMS.to_vec(),
            train: EmbedTrainConfig::default(),
            classifier: ClassifierSection::default(),
            gammas: MarginSection::default().gammas,
        }
    }
}

/// One JSON document per experiment. Sections a command does not use may
/// be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    pub dataset: Option<DatasetSection>,
    pub ansatz: Option<AnsatzSpec>,
    pub train: Option<TrainConfig>,
    pub margin: Option<MarginSection>,
    pub sweep: Option<SweepConfig>,
    pub embed: Option<EmbedSection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).or_else(|e| config_err("<document>", e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).or_else(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn qpr(&self) -> Result<QprSection> {
        match &self.dataset {
            None => Ok(QprSection::default()),
            Some(DatasetSection::Qpr(q)) => Ok(q.clone()),
            Some(DatasetSection::Mnist(_)) => config_err("dataset.kind", "this command needs a qpr dataset"),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone().unwrap_or_default()
        }
    }

    fn ansatz(&self) -> Result<AnsatzSpec> {
        match &self.ansatz {
            Some(a) => {
                a.validate().or_else(|e| config_err("ansatz", e.to_string()))?;
                Ok(a.clone())
            }
            None => AnsatzSpec::new(Family::Qcnn, self.qpr()?.n_qubits, 1, 4),
        }
    }

    fn margin(&self) -> MarginSection {
        self.margin.clone().unwrap_or_default()
    }

    fn embed(&self) -> EmbedSection {
        let mut e = self.embed.clone().unwrap_or_default();
        e.train.seed = self.seed;
        e.classifier.train.seed = self.seed;
        e
    }

    /// Checks the sections `command` reads.
    pub fn validate(&self, command: &str) -> Result<()> {
        match command {
            "generate" => match &self.dataset {
                Some(DatasetSection::Qpr(q)) => q.validate(),
                Some(DatasetSection::Mnist(m)) => validate_mnist(m, "dataset"),
                None => config_err("dataset", "generate needs a dataset section"),
            },
            "train" => {
                self.qpr()?.validate()?;
                self.train_config().validate().or_else(|e| config_err("train", e.to_string()))?;
                self.ansatz()?;
                let m = self.margin();
                if !(m.delta > 0.0 && m.delta < 1.0) {
                    return config_err("margin.delta", "must lie in (0, 1)");
                }
                if let Some(g) = m.gamma {
                    if !(g > 0.0 && g <= 2.0) {
                        return config_err("margin.gamma", "must lie in (0, 2]");
                    }
                }
                Ok(())
            }
            "sweep" => match &self.sweep {
                Some(s) => s.validate(),
                None => config_err("sweep", "sweep needs a sweep section"),
            },
            "embed" => {
                let e = self.embed();
                if e.schemes.is_empty() {
                    return config_err("embed.schemes", "needs at least one scheme");
                }
                validate_mnist(&e.data, "embed.data")?;
                e.train.validate()?;
                e.classifier.train.validate().or_else(|err| config_err("embed.classifier.train", err.to_string()))
            }
            other => config_err("command", format!("unknown command {other}")),
        }
    }
}

fn validate_mnist(m: &MnistSection, at: &str) -> Result<()> {
    if m.classes[0] == m.classes[1] {
        return config_err(&format!("{at}.classes"), "classes must differ");
    }
    if m.train_per_class == 0 || m.pca_dim == 0 {
        return config_err(&format!("{at}.train_per_class"), "sizes must be positive");
    }
    Ok(())
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Joins relative paths onto the dataset root when it is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    match data_root() {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

/// Output files held in memory until the command has finished.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    seeds: BTreeMap<String, u64>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    /// Writes every file, then the manifest, each through a temporary file
    /// and a rename.
    pub fn commit(self, out: &Path, command: &str, config: &ExperimentConfig, extra: Vec<FileEntry>) -> Result<RunManifest> {
        fs::create_dir_all(out)?;
        let mut entries = extra;
        for (name, bytes) in &self.files {
            write_atomic(&out.join(name), bytes)?;
            entries.push(FileEntry {
                path: name.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            seeds: self.seeds,
            files: entries,
        };
        write_atomic(&out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Inventory entries for files already on disk under `out`.
fn existing_entries(out: &Path, rel: &[&str]) -> Result<Vec<FileEntry>> {
    rel.iter()
        .map(|r| {
            let bytes = fs::read(out.join(r))?;
            Ok(FileEntry {
                path: r.to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} not found in {}", stem, dir.display()),
    )))
}

/// Train and test splits: two classes, per-class subsample, PCA fitted on
/// the training split and applied to both.
pub fn prepare_mnist(section: &MnistSection, seed: u64) -> Result<(ClassicalDataset, ClassicalDataset)> {
    let dir = resolve_data_path(&section.dir);
    let load = |split: &str, per_class: usize, s: u64| -> Result<ClassicalDataset> {
        let raw = load_idx_pair(
            &find_idx(&dir, &format!("{split}-images-idx3-ubyte"))?,
            &find_idx(&dir, &format!("{split}-labels-idx1-ubyte"))?,
        )?;
        let binary = filter_binary(&raw, section.classes[0], section.classes[1])?;
        Ok(subsample_per_class(&binary, per_class, s))
    };
    let train = load("train", section.train_per_class, seed)?;
    let test = load("t10k", section.test_per_class, seed.wrapping_add(1))
        .or_else(|_| load("test", section.test_per_class, seed.wrapping_add(1)))?;
    let pca = fit_pca(&train, section.pca_dim)?;
    Ok((apply_pca(&train, &pca)?, apply_pca(&test, &pca)?))
}

/// Writes a QPR or reduced classical dataset.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate("generate")?;
    let mut outputs = Outputs::default();
    outputs.seed("sample", config.seed);
    match config.dataset.as_ref().expect("validated") {
        DatasetSection::Qpr(q) => {
            let exp = QprExperiment::new(QprDataConfig { test_size: 0, ..q.data_config() })?;
            outputs.seed("noise", config.seed.wrapping_add(1));
            outputs.seed("pool", q.pool_seed);
            let d = exp.training_set(q.noise_fraction, config.seed)?;
            let mut table = Vec::new();
            write_csv(&d, &mut table)?;
            outputs.add("dataset.csv", table);
            let randomized: Vec<usize> = (0..d.len()).filter(|&i| d.randomized[i]).collect();
            outputs.add_json("summary.json", &serde_json::json!({ "m": d.len(), "randomized_indices": randomized }))?;
            save_dataset(&d, &out.join("dataset"))?;
            let extra = existing_entries(out, &["dataset/amplitudes.bin", "dataset/dataset.json"])?;
            outputs.commit(out, "generate", config, extra)
        }
        DatasetSection::Mnist(m) => {
            let (train, test) = prepare_mnist(m, config.seed)?;
            outputs.seed("test_subsample", config.seed.wrapping_add(1));
            save_classical(&train, &out.join("train"))?;
            save_classical(&test, &out.join("test"))?;
            let extra = existing_entries(
                out,
                &["train/features.bin", "train/classical.json", "test/features.bin", "test/classical.json"],
            )?;
            outputs.commit(out, "generate", config, extra)
        }
    }
}

/// Bound at `γ = max(median, 1e-3)` unless a level is configured.
pub fn bound_for(
    spec: &AnsatzSpec,
    report: &MarginReport,
    section: &MarginSection,
    m: usize,
) -> Result<(BoundInputs, BoundReport)> {
    let c = build(spec)?;
    let meas = readout_measurements(spec)?;
    let gamma = section.gamma.unwrap_or(report.median.max(1e-3));
    let inputs = BoundInputs {
        m,
        gamma,
        delta: section.delta,
        b: distance_bound(&c, section.distance, None)?.value,
        e: measurement_lipschitz(&meas, section.state_mode)?,
        n_qubits: spec.n_qubits,
    };
    let emp = margin_loss_from_margins(&report.margins, gamma)?;
    Ok((inputs, evaluate_margin_bound(&inputs, emp)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFile {
    pub inputs: BoundInputs,
    pub report: BoundReport,
    /// `1 − test accuracy` on the held-out set, when evaluated.
    pub held_out_error: Option<f64>,
}

/// Trains one classifier and writes its run, margin and bound reports.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate("train")?;
    let q = config.qpr()?;
    let spec = config.ansatz()?;
    let train = config.train_config();
    let margin = config.margin();
    let (dataset, manifest_sha): (LabeledQuantumDataset, Option<String>) = match &q.path {
        Some(p) => {
            let dir = resolve_data_path(p);
            let d = load_dataset(&dir)?;
            let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
            (d, Some(m.amplitudes_sha256))
        }
        None => (QprExperiment::new(QprDataConfig { test_size: 0, ..q.data_config() })?.training_set(q.noise_fraction, config.seed)?, None),
    };
    if dataset.n_qubits() != spec.n_qubits {
        return config_err("ansatz.n_qubits", "does not match the dataset");
    }
    let exp = QprExperiment::new(QprDataConfig {
        pool_per_class: 0,
        ..q.data_config()
    })?;
    let mut run = exp.run_on(&spec, dataset, config.seed, &train)?;
    run.record.dataset_manifest = manifest_sha;
    let report = MarginReport::from_margins(run.margins.margins.clone(), &margin.gammas)?;
    let (inputs, bound) = bound_for(&spec, &report, &margin, run.dataset.len())?;

    let mut outputs = Outputs::default();
    outputs.seed("train", config.seed);
    outputs.seed("sample", run.dataset.sample_seed);
    if let Some(s) = run.dataset.noise_seed {
        outputs.seed("noise", s);
    }
    outputs.add_json("run.json", &run.record)?;
    let mut loss = Vec::new();
    write_loss_csv(&run.record, &mut loss)?;
    outputs.add("loss.csv", loss);
    outputs.add_json("margin_report.json", &report)?;
    let mut margins = Vec::new();
    report.write_csv(&mut margins)?;
    outputs.add("margins.csv", margins);
    outputs.add_json(
        "bound.json",
        &BoundFile {
            inputs,
            report: bound,
            held_out_error: run.record.test_accuracy.map(|a| 1.0 - a),
        },
    )?;
    outputs.commit(out, "train", config, vec![])
}

/// Runs (or resumes) a sweep and writes records plus correlation summary.
pub fn cmd_sweep(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate("sweep")?;
    let mut sweep = config.sweep.clone().expect("validated");
    sweep.base_seed = config.seed;
    fs::create_dir_all(out)?;
    let outcome = run_sweep(&sweep, Some(&out.join("sweep.jsonl")))?;
    let mut outputs = Outputs::default();
    outputs.seed("base", sweep.base_seed);
    let mut records = Vec::new();
    write_records_csv(&outcome.records, &mut records)?;
    outputs.add("records.csv", records);
    let mut summary = Vec::new();
    outcome.summary.write_csv(&mut summary)?;
    outputs.add("summary.csv", summary);
    outputs.add_json("summary.json", &outcome.summary)?;
    // The log is append-ordered by completion; the manifest lists the
    // canonical records instead.
    outputs.add_json("records.json", &outcome.records)?;
    outputs.commit(out, "sweep", config, vec![])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: Scheme,
    pub seed: u64,
    /// Training-set trace distance of the embedded classes.
    pub trace_distance: f64,
    pub initial_trace_distance: f64,
    pub margin_mean: f64,
    pub margin_median: f64,
    pub certificate: MarginCertificate,
    pub certificate_holds: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Everything produced for one embedding scheme.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub report: SchemeReport,
    pub model: EmbeddingModel,
    pub record: RunRecord,
    pub margins: MarginReport,
    pub history: crate::embed::EmbedTrainResult,
}

/// Trains the embedding, then a binary classifier on the embedded states.
pub fn run_embed_scheme(
    scheme: Scheme,
    section: &EmbedSection,
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    seed: u64,
) -> Result<SchemeRun> {
    let n = train.first().map_or(0, |(x, _)| x.len());
    let spec = EmbeddingSpec {
        zz_layers: section.zz_layers,
        tqe_layers: section.tqe_layers,
        mlp_dims: section.mlp_dims.clone(),
        ..EmbeddingSpec::new(scheme, n)?
    };
    let model = EmbeddingModel::new(spec, seed)?;
    let cfg = EmbedTrainConfig { seed, ..section.train };
    let history = train_embedding(&model, train, &cfg)?;
    let model = history.model.clone();
    let embed = |d: &[(Vec<f64>, usize)]| -> Result<Vec<(Statevector, usize)>> {
        let xs: Vec<Vec<f64>> = d.iter().map(|(x, _)| x.clone()).collect();
        Ok(model.embed_all(&xs)?.into_iter().zip(d.iter().map(|(_, y)| *y)).collect())
    };
    let (train_states, test_states) = (embed(train)?, embed(test)?);
    let clf = AnsatzSpec::new(section.classifier.family, n, section.classifier.layers, 2)?;
    let c = build(&clf)?;
    let meas = readout_measurements(&clf)?;
    let tcfg = TrainConfig { seed, ..section.classifier.train.clone() };
    let mut record = fit(&c, &meas, &train_states, &tcfg)?;
    record.test_accuracy = Some(accuracy(&c, &meas, &record.theta_final, &test_states)?);
    let margins = margin_report(&c, &meas, &record.theta_final, &train_states, &section.gammas)?;
    let certificate = margin_mean_certificate(&c, &meas, &record.theta_final, &train_states)?;
    let report = SchemeReport {
        scheme,
        seed,
        trace_distance: embedded_trace_distance(&model, train)?,
        initial_trace_distance: history.trace_distance_history[0],
        margin_mean: margins.mean,
        margin_median: margins.median,
        certificate,
        certificate_holds: certificate.margin_mean <= certificate.trace_distance + 1e-8,
        train_accuracy: record.train_accuracy,
        test_accuracy: record.test_accuracy.unwrap_or(f64::NAN),
    };
    Ok(SchemeRun {
        report,
        model,
        record,
        margins,
        history,
    })
}

fn scheme_name(s: Scheme) -> Result<String> {
    Ok(serde_json::to_value(s)?.as_str().unwrap_or_default().to_string())
}

/// Compares embedding schemes on a reduced two-class image task.
pub fn cmd_embed(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    config.validate("embed")?;
    let section = config.embed();
    let (train, test) = prepare_mnist(&section.data, config.seed)?;
    let (train, test) = (train.binary_pairs()?, test.binary_pairs()?);
    let mut outputs = Outputs::default();
    outputs.seed("embedding", config.seed);
    outputs.seed("classifier", config.seed);
    outputs.seed("test_subsample", config.seed.wrapping_add(1));
    let mut reports = Vec::new();
    for &scheme in &section.schemes {
        let run = run_embed_scheme(scheme, &section, &train, &test, config.seed)?;
        let name = scheme_name(scheme)?;
        let mut margins = Vec::new();
        run.margins.write_csv(&mut margins)?;
        outputs.add(format!("margins_{name}.csv"), margins);
        let mut hist = Vec::new();
        run.history.write_history_csv(&mut hist)?;
        outputs.add(format!("embedding_history_{name}.csv"), hist);
        outputs.add(format!("embedding_{name}.json"), run.model.to_json()?.into_bytes());
        outputs.add_json(&format!("classifier_{name}.json"), &run.record)?;
        reports.push(run.report);
    }
    outputs.add_json("embed_report.json", &reports)?;
    outputs.commit(out, "embed", config, vec![])
}

#[derive(Debug, Parser)]
#[command(name = "qmargin", version, about = "Margin-based generalization experiments for quantum classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a QPR or reduced image dataset.
    Generate(CommonArgs),
    /// Train one classifier and write run, margin and bound reports.
    Train(CommonArgs),
    /// Run the layer/noise/family sweep and its correlation summary.
    Sweep(CommonArgs),
    /// Compare embedding schemes.
    Embed(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses the config, applies flag overrides and runs the command in a
/// pool of `--workers` threads.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let (name, args) = match &cli.command {
        Command::Generate(a) => ("generate", a),
        Command::Train(a) => ("train", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Embed(a) => ("embed", a),
    };
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let Some(out) = args.out.clone().or_else(|| config.out.clone()) else {
        return config_err("out", "no output directory given");
    };
    if args.workers == Some(0) {
        return config_err("--workers", "must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(0))
        .build()
        .or_else(|e| config_err("--workers", e.to_string()))?;
    pool.install(|| match name {
        "generate" => cmd_generate(&config, &out),
        "train" => cmd_train(&config, &out),
        "sweep" => cmd_sweep(&config, &out),
        _ => cmd_embed(&config, &out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        assert!(e.to_string().contains("bogus"));
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn invalid_noise_names_field() {
        let c = ExperimentConfig::from_json(r#"{"dataset": {"kind": "qpr", "noise_fraction": 1.5}}"#).unwrap();
        let e = c.validate("generate").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        assert!(e.to_string().contains("dataset.noise_fraction"));
    }

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Format { offset: 0, message: "x".into() }), EXIT_DATA);
    }

    #[test]
    fn commit_lists_every_file_and_writes_manifest_last() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = Outputs::default();
        o.add("a.txt", b"alpha".to_vec());
        o.add("sub/b.txt", b"beta".to_vec());
        o.seed("train", 3);
        let m = o.commit(dir.path(), "train", &ExperimentConfig::default(), vec![]).unwrap();
        assert_eq!(m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
        assert_eq!(m.files[0].sha256, hex::encode(Sha256::digest(b"alpha")));
        let on_disk: RunManifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(on_disk, m);
        assert!(!dir.path().join("a.txt.tmp").exists());
    }

    #[test]
    fn sections_round_trip() {
        let c = ExperimentConfig {
            seed: 4,
            out: None,
            dataset: Some(DatasetSection::Qpr(QprSection::default())),
            ansatz: None,
            train: Some(TrainConfig::default()),
            margin: Some(MarginSection::default()),
            sweep: Some(SweepConfig::reduced()),
            embed: Some(EmbedSection::default()),
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }
}
