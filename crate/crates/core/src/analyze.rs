//! Generalization gaps, rank correlation and mutual information between gaps
//! and complexity metrics, and the hyperparameter sweep over QPR classifiers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ansatz::{build, readout_measurements, AnsatzSpec, Family, DEFAULT_BLOCK};
use crate::error::{domain, Error, Result};
use crate::margin::{effective_parameters, margin_report, MarginReport};
use crate::qpr::{
    default_regions, grid_from_regions, randomize_labels, sample_dataset, solve_points, GridPoint,
    LabeledQuantumDataset, PhaseRegion, N_PHASES,
};
use crate::qsim::Statevector;
use crate::train::{accuracy, fit, RunRecord, TrainConfig};

/// Lower clamp applied before inverting a margin statistic.
pub const INVERSE_MARGIN_FLOOR: f64 = 1e-6;
pub const DEFAULT_MI_BINS: usize = 4;

pub const METRICS: [&str; 6] = [
    "inv_q1",
    "inv_median",
    "inv_mean",
    "sqrt_total_params",
    "sqrt_eff_params_1e-1",
    "sqrt_eff_params_1e-2",
];

/// `train_acc − test_acc`, i.e. held-out risk minus empirical risk.
pub fn generalization_gap(run: &RunRecord) -> Result<f64> {
    match run.test_accuracy {
        Some(t) => Ok(run.train_accuracy - t),
        None => domain("run has no held-out evaluation"),
    }
}

/// Ranks of `v` with ties ordered by seeded random keys.
fn tie_broken_ranks(v: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keys: Vec<f64> = v.iter().map(|_| rng.gen()).collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(keys[a].total_cmp(&keys[b])));
    let mut rank = vec![0; v.len()];
    for (r, i) in idx.into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Concordance fraction `(1/(n(n−1)))·Σ_{i<j}[1 + sgn(Δg)·sgn(Δμ)]`, in
/// `[0, 1]`. Ties are broken by a seeded random ranking.
pub fn kendall_tau(g: &[f64], m: &[f64], seed: u64) -> Result<f64> {
    let n = g.len();
    if n != m.len() {
        return domain("lists differ in length");
    }
    if n < 2 {
        return domain("Kendall τ needs at least two points");
    }
    if g.iter().chain(m).any(|v| !v.is_finite()) {
        return domain("non-finite value in Kendall τ input");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rg = tie_broken_ranks(g, &mut rng);
    let rm = tie_broken_ranks(m, &mut rng);
    let mut concordant = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if (rg[i] < rg[j]) == (rm[i] < rm[j]) {
                concordant += 1;
            }
        }
    }
    Ok(2.0 * concordant as f64 / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    /// Nats.
    pub value: f64,
    pub bins: usize,
    /// Set when either list has a single distinct value.
    pub degenerate: bool,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in `H(g) + H(μ) − H(g, μ)` over equal-width bins spanning the
/// observed ranges.
pub fn mutual_information(g: &[f64], m: &[f64], bins: usize) -> Result<MutualInformation> {
    if g.len() != m.len() {
        return domain("lists differ in length");
    }
    if g.is_empty() {
        return domain("mutual information of empty lists");
    }
    if bins < 2 {
        return domain("at least two bins are required");
    }
    if g.iter().chain(m).any(|v| !v.is_finite()) {
        return domain("non-finite value in mutual information input");
    }
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (glo, ghi) = range(g);
    let (mlo, mhi) = range(m);
    if glo == ghi || mlo == mhi {
        return Ok(MutualInformation { value: 0.0, bins, degenerate: true });
    }
    let mut cg = vec![0usize; bins];
    let mut cm = vec![0usize; bins];
    let mut joint = vec![0usize; bins * bins];
    for (&a, &b) in g.iter().zip(m) {
        let (i, j) = (bin_index(a, glo, ghi, bins), bin_index(b, mlo, mhi, bins));
        cg[i] += 1;
        cm[j] += 1;
        joint[i * bins + j] += 1;
    }
    let n = g.len() as f64;
    let value = entropy(cg.iter(), n) + entropy(cm.iter(), n) - entropy(joint.iter(), n);
    Ok(MutualInformation { value, bins, degenerate: false })
}

/// The six complexity metrics of one trained model.
pub fn metrics(report: &MarginReport, run: &RunRecord) -> Result<BTreeMap<String, f64>> {
    let inv = |x: f64| 1.0 / x.max(INVERSE_MARGIN_FLOOR);
    let eff = |t| effective_parameters(&run.theta_init, &run.theta_final, t).map(|c| (c as f64).sqrt());
    let values = [
        inv(report.q1),
        inv(report.median),
        inv(report.mean),
        (run.theta_final.len() as f64).sqrt(),
        eff(1e-1)?,
        eff(1e-2)?,
    ];
    Ok(METRICS.iter().map(|k| k.to_string()).zip(values).collect())
}

/// Where the QPR training pools and the held-out set come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QprDataConfig {
    pub n_qubits: usize,
    pub m: usize,
    pub test_size: usize,
    pub pool_per_class: usize,
    pub pool_seed: u64,
    pub test_seed: u64,
    pub regions: Vec<PhaseRegion>,
}

impl Default for QprDataConfig {
    fn default() -> Self {
        Self {
            n_qubits: 8,
            m: 20,
            test_size: 1000,
            pool_per_class: 100,
            pool_seed: 0,
            test_seed: 1,
            regions: default_regions(),
        }
    }
}

/// Shared training pool and solved held-out set.
#[derive(Debug, Clone)]
pub struct QprExperiment {
    pub config: QprDataConfig,
    pub pool: Vec<GridPoint>,
    pub test: Vec<(Statevector, usize)>,
}

/// One trained QPR classifier.
#[derive(Debug, Clone)]
pub struct QprRun {
    pub spec: AnsatzSpec,
    pub dataset: LabeledQuantumDataset,
    pub record: RunRecord,
    pub margins: MarginReport,
}

impl QprExperiment {
    pub fn new(config: QprDataConfig) -> Result<Self> {
        if !config.test_size.is_multiple_of(N_PHASES) {
            return domain(format!("test_size must be a multiple of {N_PHASES}"));
        }
        let pool = grid_from_regions(&config.regions, config.pool_per_class, config.pool_seed)?;
        let test = if config.test_size == 0 {
            Vec::new()
        } else {
            let grid = grid_from_regions(&config.regions, config.test_size / N_PHASES, config.test_seed)?;
            solve_points(config.n_qubits, &grid)?
                .into_iter()
                .map(|p| (p.ground_state, p.label))
                .collect()
        };
        Ok(Self { config, pool, test })
    }

    /// Training set for `seed`: sample seed `seed`, noise seed `seed + 1`.
    pub fn training_set(&self, noise_fraction: f64, seed: u64) -> Result<LabeledQuantumDataset> {
        let d = sample_dataset(self.config.n_qubits, &self.pool, self.config.m, seed)?;
        randomize_labels(&d, noise_fraction, seed.wrapping_add(1))
    }

    /// Trains `spec` on the seeded training set and scores it on the
    /// held-out set with its original labels.
    pub fn run(&self, spec: &AnsatzSpec, noise_fraction: f64, seed: u64, train: &TrainConfig) -> Result<QprRun> {
        let dataset = self.training_set(noise_fraction, seed)?;
        self.run_on(spec, dataset, seed, train)
    }

    /// As [`QprExperiment::run`] on a given training set.
    pub fn run_on(&self, spec: &AnsatzSpec, dataset: LabeledQuantumDataset, seed: u64, train: &TrainConfig) -> Result<QprRun> {
        let c = build(spec)?;
        let meas = readout_measurements(spec)?;
        let cfg = TrainConfig { seed, ..train.clone() };
        let mut record = fit(&c, &meas, &dataset.samples, &cfg)?;
        if !self.test.is_empty() {
            record.test_accuracy = Some(accuracy(&c, &meas, &record.theta_final, &self.test)?);
        }
        let margins = margin_report(&c, &meas, &record.theta_final, &dataset.samples, &[])?;
        Ok(QprRun {
            spec: spec.clone(),
            dataset,
            record,
            margins,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub noise_fractions: Vec<f64>,
    pub families: Vec<Family>,
    pub seeds_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: QprDataConfig,
    #[serde(default = "default_bins")]
    pub mi_bins: usize,
    #[serde(default = "default_block")]
    pub two_qubit_block: String,
}

fn default_bins() -> usize {
    DEFAULT_MI_BINS
}

fn default_block() -> String {
    DEFAULT_BLOCK.to_string()
}

impl SweepConfig {
    /// Layers {1,5,9} × noise {0,0.5,1} × {qcnn, qcnn-shared}, 3 seeds.
    pub fn reduced() -> Self {
        Self {
            layers: vec![1, 5, 9],
            noise_fractions: vec![0.0, 0.5, 1.0],
            families: vec![Family::Qcnn, Family::QcnnShared],
            seeds_per_cell: 3,
            base_seed: 0,
            train: TrainConfig::default(),
            data: QprDataConfig::default(),
            mi_bins: DEFAULT_MI_BINS,
            two_qubit_block: default_block(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::Config { field: f.into(), message: m.into() });
        if self.layers.is_empty() || self.layers.contains(&0) {
            return field("layers", "needs at least one positive layer count");
        }
        if self.noise_fractions.is_empty() || self.noise_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return field("noise_fractions", "needs at least one fraction in [0, 1]");
        }
        if self.families.is_empty() {
            return field("families", "needs at least one ansatz family");
        }
        if self.seeds_per_cell == 0 {
            return field("seeds_per_cell", "must be positive");
        }
        if self.mi_bins < 2 {
            return field("mi_bins", "must be at least 2");
        }
        self.train.validate()
    }

    /// Cells in family, layer, noise, seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &family in &self.families {
            for &layers in &self.layers {
                for &noise_fraction in &self.noise_fractions {
                    for s in 0..self.seeds_per_cell {
                        out.push(Cell {
                            index: out.len(),
                            family,
                            layers,
                            noise_fraction,
                            seed: self.base_seed + s as u64,
                        });
                    }
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form; resumed records must match.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub family: Family,
    pub layers: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub cell: Cell,
    pub gap: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub failed: Option<String>,
    pub fingerprint: String,
}

impl SweepRecord {
    pub fn from_run(cell: Cell, run: &RunRecord, report: &MarginReport, fingerprint: &str) -> Result<Self> {
        Ok(Self {
            cell,
            gap: generalization_gap(run)?,
            train_accuracy: run.train_accuracy,
            test_accuracy: run.test_accuracy.unwrap_or(f64::NAN),
            metrics: metrics(report, run)?,
            failed: None,
            fingerprint: fingerprint.to_string(),
        })
    }

    fn failure(cell: Cell, err: &Error, fingerprint: &str) -> Self {
        Self {
            cell,
            gap: f64::NAN,
            train_accuracy: f64::NAN,
            test_accuracy: f64::NAN,
            metrics: BTreeMap::new(),
            failed: Some(err.to_string()),
            fingerprint: fingerprint.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    pub kendall_tau: f64,
    pub mutual_information: MutualInformation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub n_runs: usize,
    pub n_failed: usize,
    /// Set when fewer than two usable runs remain.
    pub degenerate: bool,
    pub correlations: Vec<MetricCorrelation>,
}

/// τ and MI between the gap and every metric over the successful records.
pub fn summarize(records: &[SweepRecord], bins: usize, seed: u64) -> Result<CorrelationSummary> {
    let ok: Vec<&SweepRecord> = records.iter().filter(|r| r.failed.is_none()).collect();
    let n_failed = records.len() - ok.len();
    if ok.len() < 2 {
        return Ok(CorrelationSummary {
            n_runs: ok.len(),
            n_failed,
            degenerate: true,
            correlations: vec![],
        });
    }
    let gaps: Vec<f64> = ok.iter().map(|r| r.gap).collect();
    let mut correlations = Vec::new();
    for name in METRICS {
        let values: Vec<f64> = ok
            .iter()
            .map(|r| r.metrics.get(name).copied().ok_or_else(|| Error::Domain(format!("record lacks metric {name}"))))
            .collect::<Result<_>>()?;
        correlations.push(MetricCorrelation {
            metric: name.to_string(),
            kendall_tau: kendall_tau(&gaps, &values, seed)?,
            mutual_information: mutual_information(&gaps, &values, bins)?,
        });
    }
    Ok(CorrelationSummary {
        n_runs: ok.len(),
        n_failed,
        degenerate: false,
        correlations,
    })
}

impl CorrelationSummary {
    pub fn get(&self, metric: &str) -> Option<&MetricCorrelation> {
        self.correlations.iter().find(|c| c.metric == metric)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "kendall_tau", "mutual_information", "bins", "degenerate", "n_runs", "n_failed"])?;
        for c in &self.correlations {
            out.write_record([
                c.metric.clone(),
                c.kendall_tau.to_string(),
                c.mutual_information.value.to_string(),
                c.mutual_information.bins.to_string(),
                c.mutual_information.degenerate.to_string(),
                self.n_runs.to_string(),
                self.n_failed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One row per record: cell, gap, accuracies and the six metric columns.
pub fn write_records_csv(records: &[SweepRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["index", "family", "layers", "noise_fraction", "seed", "gap", "train_accuracy", "test_accuracy"];
    header.extend(METRICS);
    out.write_record(&header)?;
    for r in records.iter().filter(|r| r.failed.is_none()) {
        let family = serde_json::to_value(r.cell.family)?.as_str().unwrap_or_default().to_string();
        let mut row = vec![
            r.cell.index.to_string(),
            family,
            r.cell.layers.to_string(),
            r.cell.noise_fraction.to_string(),
            r.cell.seed.to_string(),
            r.gap.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.to_string(),
        ];
        row.extend(METRICS.iter().map(|m| r.metrics[*m].to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Records already present in a JSON-lines file with a matching fingerprint.
pub fn read_jsonl(path: &Path, fingerprint: &str) -> Result<HashMap<usize, SweepRecord>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted run is skipped.
        let Ok(rec) = serde_json::from_str::<SweepRecord>(&line) else {
            if i > 0 {
                continue;
            }
            return Err(Error::Format { offset: 0, message: "sweep log is not JSON lines".into() });
        };
        if rec.fingerprint == fingerprint && rec.failed.is_none() {
            done.insert(rec.cell.index, rec);
        }
    }
    Ok(done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub summary: CorrelationSummary,
    /// Cells taken from an earlier log instead of being recomputed.
    pub resumed: usize,
}

/// Runs every cell not already in `log` through `runner`, appending each
/// finished record to `log`, and returns all records in cell order.
pub fn run_cells<F>(config: &SweepConfig, log: Option<&Path>, runner: F) -> Result<SweepOutcome>
where
    F: Fn(&Cell) -> Result<SweepRecord> + Sync,
{
    config.validate()?;
    let fp = config.fingerprint()?;
    let cells = config.cells();
    let done = match log {
        Some(p) => read_jsonl(p, &fp)?,
        None => HashMap::new(),
    };
    let todo: Vec<Cell> = cells.iter().filter(|c| !done.contains_key(&c.index)).copied().collect();
    let writer = match log {
        Some(p) => Some(std::sync::Mutex::new(
            fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    let fresh: Vec<SweepRecord> = todo
        .par_iter()
        .map(|cell| {
            let rec = runner(cell).unwrap_or_else(|e| SweepRecord::failure(*cell, &e, &fp));
            if let Some(w) = &writer {
                let line = serde_json::to_string(&rec)?;
                let mut f = w.lock().expect("sweep log lock");
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let resumed = done.len();
    let mut records: Vec<SweepRecord> = done.into_values().chain(fresh).collect();
    records.sort_by_key(|r| r.cell.index);
    let summary = summarize(&records, config.mi_bins, config.base_seed)?;
    Ok(SweepOutcome { records, summary, resumed })
}

/// The QPR sweep: one fit per cell on a shared pool and held-out set.
pub fn run_sweep(config: &SweepConfig, log: Option<&Path>) -> Result<SweepOutcome> {
    config.validate()?;
    let experiment = QprExperiment::new(config.data.clone())?;
    let fp = config.fingerprint()?;
    run_cells(config, log, |cell| {
        let mut spec = AnsatzSpec::new(cell.family, config.data.n_qubits, cell.layers, N_PHASES)?;
        spec.two_qubit_block = config.two_qubit_block.clone();
        let run = experiment.run(&spec, cell.noise_fraction, cell.seed, &config.train)?;
        SweepRecord::from_run(*cell, &run.record, &run.margins, &fp)
    })
}
