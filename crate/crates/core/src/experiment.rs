//! Configuration-driven experiment matrices. Every (data mode, adversarial
//! rate, method, attack, seed) cell is one training run persisted as a
//! line-oriented JSON log; cells are summarized into accuracy tables with a
//! per-method worst case over attacks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregators::AggregatorSpec;
use crate::attacks::AttackSpec;
use crate::error::{Error, Result};
use crate::sim::data::{DataMode, TaskSpec};
use crate::sim::model::ModelSpec;
use crate::sim::protocol::{LrSchedule, Proposal, RoundRecord};
use crate::sim::{run, Method, RunRecord, SimConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "CLUSTERGUARD_OUT";

/// Per-run training settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Training {
    pub rounds: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    pub vote_batch_size: usize,
    pub train_per_worker: usize,
    pub test_per_worker: usize,
    pub eval_every: usize,
    pub task: TaskSpec,
    pub model: ModelSpec,
}

impl Default for Training {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            rounds: s.rounds,
            learning_rate: s.learning_rate,
            lr_schedule: s.lr_schedule,
            momentum: s.momentum,
            batch_size: s.batch_size,
            vote_batch_size: s.vote_batch_size,
            train_per_worker: s.train_per_worker,
            test_per_worker: s.test_per_worker,
            eval_every: s.eval_every,
            task: s.task,
            model: s.model,
        }
    }
}

/// A method together with the label used for it in tables and file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMethod {
    pub name: String,
    pub method: Method,
}

impl NamedMethod {
    pub fn new(method: Method) -> Self {
        Self {
            name: method.name(),
            method,
        }
    }
}

fn methods_de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<NamedMethod>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Short(String),
        Full(NamedMethod),
    }
    Vec::<Repr>::deserialize(d)?
        .into_iter()
        .map(|r| match r {
            Repr::Short(s) => s.parse().map(NamedMethod::new).map_err(serde::de::Error::custom),
            Repr::Full(m) => Ok(m),
        })
        .collect()
}

fn attacks_de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<AttackSpec>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Short(String),
        Full(AttackSpec),
    }
    Vec::<Repr>::deserialize(d)?
        .into_iter()
        .map(|r| match r {
            Repr::Short(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Full(a) => Ok(a),
        })
        .collect()
}

/// The experiment matrix. Every key is optional; omitted keys take the
/// default matrix (35 workers, rates 0.1/0.2/0.4, ten methods, six attacks,
/// uniform and Dirichlet(0.1) data, five seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Name of the run directory under the output root.
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub n_workers: usize,
    /// Byzantine share of the workers; `f = floor(rate * n_workers)`.
    pub rates: Vec<f64>,
    #[serde(deserialize_with = "methods_de")]
    pub methods: Vec<NamedMethod>,
    #[serde(deserialize_with = "attacks_de")]
    pub attacks: Vec<AttackSpec>,
    /// Adds the data-level label-flipping attack to the matrix.
    pub label_flip: bool,
    pub data: Vec<DataMode>,
    pub seeds: Vec<u64>,
    pub training: Training,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut methods: Vec<NamedMethod> = [
            AggregatorSpec::Avg,
            AggregatorSpec::gm(),
            AggregatorSpec::cclip(),
            AggregatorSpec::Cwm,
            AggregatorSpec::Cwtm,
            AggregatorSpec::Krum,
            AggregatorSpec::CenterWo,
            AggregatorSpec::MeanWo,
        ]
        .into_iter()
        .map(|aggregator| NamedMethod::new(Method::Single { aggregator }))
        .collect();
        methods.push(NamedMethod::new(Method::cent2p()));
        methods.push(NamedMethod::new(Method::mean2p()));
        Self {
            name: "matrix".into(),
            output: None,
            n_workers: 35,
            rates: vec![0.1, 0.2, 0.4],
            methods,
            attacks: vec![
                AttackSpec::Sf,
                AttackSpec::gauss(),
                AttackSpec::omn(),
                AttackSpec::empire(),
                AttackSpec::sv(),
                AttackSpec::pga(),
            ],
            label_flip: false,
            data: vec![DataMode::Uniform, DataMode::Dirichlet { alpha: 0.1 }],
            seeds: (0..5).collect(),
            training: Training::default(),
        }
    }
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables.
/// The value is read as a TOML literal, falling back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    /// Parses `text` and then applies `KEY=VALUE` overrides such as
    /// `training.rounds=50` or `seeds=[1,2]`.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg = Self::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file at `path` (or starts from the default matrix) and
    /// applies overrides.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn byzantine_for(&self, rate: f64) -> usize {
        (rate * self.n_workers as f64 + 1e-9).floor() as usize
    }

    /// Attacks actually run, including label flipping when enabled.
    pub fn attack_list(&self) -> Vec<AttackSpec> {
        let mut out = self.attacks.clone();
        if self.label_flip && !out.iter().any(AttackSpec::is_data_level) {
            out.push(AttackSpec::label_flip());
        }
        out
    }

    pub fn sim_config(&self, byzantine: usize, data: &DataMode, seed: u64) -> SimConfig {
        let t = &self.training;
        SimConfig {
            n_workers: self.n_workers,
            byzantine,
            rounds: t.rounds,
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule.clone(),
            momentum: t.momentum,
            batch_size: t.batch_size,
            vote_batch_size: t.vote_batch_size,
            train_per_worker: t.train_per_worker,
            test_per_worker: t.test_per_worker,
            task: t.task.clone(),
            data: data.clone(),
            model: t.model.clone(),
            seed,
            eval_every: t.eval_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.is_empty() || sanitize(&self.name) != self.name {
            return bad(format!("name '{}' must be non-empty and use only [A-Za-z0-9.]", self.name));
        }
        for (what, empty) in [
            ("rates", self.rates.is_empty()),
            ("methods", self.methods.is_empty()),
            ("attacks", self.attack_list().is_empty()),
            ("data", self.data.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return bad(format!("{what} must not be empty"));
            }
        }
        for &rate in &self.rates {
            if !(rate.is_finite() && (0.0..0.5).contains(&rate)) {
                return bad(format!("adversarial rate {rate} must lie in [0, 0.5)"));
            }
            let f = self.byzantine_for(rate);
            if 2 * f >= self.n_workers {
                return bad(format!("rate {rate} gives f={f}, not a minority of {}", self.n_workers));
            }
        }
        if self.attacks.iter().any(AttackSpec::is_data_level) && !self.label_flip {
            return bad("label flipping is a data-level attack; enable it with label_flip = true".into());
        }
        let unique = |names: Vec<String>, what: &str| -> Result<()> {
            let mut seen = std::collections::BTreeSet::new();
            for n in names {
                if !seen.insert(sanitize(&n)) {
                    return Err(Error::Config(format!("duplicate {what} '{n}'")));
                }
            }
            Ok(())
        };
        unique(self.methods.iter().map(|m| m.name.clone()).collect(), "method name")?;
        unique(self.attack_list().iter().map(|a| a.name().to_string()).collect(), "attack")?;
        unique(self.data.iter().map(DataMode::label).collect(), "data mode")?;
        unique(self.seeds.iter().map(u64::to_string).collect(), "seed")?;
        for m in &self.methods {
            m.method.validate()?;
        }
        for a in self.attack_list() {
            a.validate()?;
        }
        for &rate in &self.rates {
            for d in &self.data {
                self.sim_config(self.byzantine_for(rate), d, 0).validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    /// Every cell of the matrix in config order.
    pub fn plan(&self) -> Vec<CellPlan> {
        let mut out = Vec::new();
        for d in &self.data {
            for &rate in &self.rates {
                let f = self.byzantine_for(rate);
                for m in &self.methods {
                    for a in self.attack_list() {
                        for &seed in &self.seeds {
                            out.push(CellPlan {
                                cell: Cell {
                                    data: d.label(),
                                    rate,
                                    byzantine: f,
                                    method: m.name.clone(),
                                    attack: a.name().to_string(),
                                    seed,
                                },
                                sim: self.sim_config(f, d, seed),
                                method: m.method.clone(),
                                attack: a.clone(),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Identity of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub data: String,
    pub rate: f64,
    pub byzantine: usize,
    pub method: String,
    pub attack: String,
    pub seed: u64,
}

impl Cell {
    /// File stem of the cell's log.
    pub fn id(&self) -> String {
        sanitize(&format!(
            "{}_f{}_{}_{}_s{}",
            self.data, self.byzantine, self.method, self.attack, self.seed
        ))
    }
}

#[derive(Debug, Clone)]
pub struct CellPlan {
    pub cell: Cell,
    pub sim: SimConfig,
    pub method: Method,
    pub attack: AttackSpec,
}

/// Final line of a successful cell log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub averaged_accuracy: f64,
    pub final_train_loss: f64,
    pub res_t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_commit_fraction: Option<f64>,
    pub final_model: Vec<f64>,
    pub averaged_model: Vec<f64>,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        Self {
            final_accuracy: r.final_accuracy,
            averaged_accuracy: r.averaged_accuracy,
            final_train_loss: r.final_train_loss,
            res_t: r.res_t,
            inner_commit_fraction: r.commit_fraction(Proposal::Inner),
            final_model: r.final_model.clone(),
            averaged_model: r.averaged_model.clone(),
        }
    }
}

/// One line of a cell log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header {
        cell: Cell,
        config_hash: String,
        sim: SimConfig,
        method: Method,
        attack: AttackSpec,
    },
    Round(RoundRecord),
    Summary(RunSummary),
    Error { message: String },
}

/// Writes via a temporary sibling and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn json_line(line: &LogLine) -> String {
    let mut s = serde_json::to_string(line).expect("log lines serialize");
    s.push('\n');
    s
}

/// Outcome of one cell as used by the tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<RunSummary, String>,
}

fn run_cell(plan: &CellPlan, config_hash: &str, dir: &Path) -> Result<CellResult> {
    let mut text = json_line(&LogLine::Header {
        cell: plan.cell.clone(),
        config_hash: config_hash.to_string(),
        sim: plan.sim.clone(),
        method: plan.method.clone(),
        attack: plan.attack.clone(),
    });
    let outcome = match run(&plan.sim, &plan.method, &plan.attack) {
        Ok(record) => {
            for r in &record.rounds {
                text.push_str(&json_line(&LogLine::Round(r.clone())));
            }
            let summary = RunSummary::from(&record);
            text.push_str(&json_line(&LogLine::Summary(summary.clone())));
            Ok(summary)
        }
        Err(e) => {
            let message = e.to_string();
            text.push_str(&json_line(&LogLine::Error {
                message: message.clone(),
            }));
            Err(message)
        }
    };
    write_atomic(&dir.join(format!("{}.jsonl", plan.cell.id())), text.as_bytes())?;
    Ok(CellResult {
        cell: plan.cell.clone(),
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub data: String,
    pub rate: f64,
    pub byzantine: usize,
    pub method: String,
    pub attack: String,
    /// Seeds that completed.
    pub seeds: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstRow {
    pub data: String,
    pub rate: f64,
    pub byzantine: usize,
    pub method: String,
    pub worst: Option<f64>,
    pub worst_attack: Option<String>,
}

/// Final test accuracy per (data, rate, method, attack), averaged over seeds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
    pub worst: Vec<WorstRow>,
}

pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

type GroupKey = (String, usize, String);

impl ResultTable {
    pub fn from_results(results: &[CellResult]) -> Self {
        // (data, f, method, attack) -> (rate, accuracies, failures)
        let mut cells: BTreeMap<(String, usize, String, String), (f64, Vec<f64>, usize)> = BTreeMap::new();
        for r in results {
            let c = &r.cell;
            let e = cells
                .entry((c.data.clone(), c.byzantine, c.method.clone(), c.attack.clone()))
                .or_insert((c.rate, Vec::new(), 0));
            match &r.outcome {
                Ok(s) => e.1.push(s.final_accuracy),
                Err(_) => e.2 += 1,
            }
        }
        let rows: Vec<TableRow> = cells
            .into_iter()
            .map(|((data, byzantine, method, attack), (rate, accs, failures))| {
                let (mean, std) = mean_std(&accs);
                TableRow {
                    data,
                    rate,
                    byzantine,
                    method,
                    attack,
                    seeds: accs.len(),
                    failures,
                    mean,
                    std,
                }
            })
            .collect();
        let mut groups: BTreeMap<GroupKey, WorstRow> = BTreeMap::new();
        for r in &rows {
            let w = groups
                .entry((r.data.clone(), r.byzantine, r.method.clone()))
                .or_insert_with(|| WorstRow {
                    data: r.data.clone(),
                    rate: r.rate,
                    byzantine: r.byzantine,
                    method: r.method.clone(),
                    worst: None,
                    worst_attack: None,
                });
            if let Some(m) = r.mean {
                if w.worst.is_none_or(|cur| m < cur) {
                    w.worst = Some(m);
                    w.worst_attack = Some(r.attack.clone());
                }
            }
        }
        Self {
            rows,
            worst: groups.into_values().collect(),
        }
    }

    pub fn rows_tsv(&self) -> String {
        let mut s = String::from("data\trate\tf\tmethod\tattack\tseeds\tfailures\tmean_accuracy\tstd_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.data,
                r.rate,
                r.byzantine,
                r.method,
                r.attack,
                r.seeds,
                r.failures,
                fmt_opt(r.mean),
                fmt_opt(r.std)
            ));
        }
        s
    }

    pub fn worst_tsv(&self) -> String {
        let mut s = String::from("data\trate\tf\tmethod\tworst_accuracy\tworst_attack\n");
        for w in &self.worst {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                w.data,
                w.rate,
                w.byzantine,
                w.method,
                fmt_opt(w.worst),
                w.worst_attack.as_deref().unwrap_or("NA")
            ));
        }
        s
    }

    /// Methods ordered by worst-case accuracy (best first) within each
    /// (data, f) block; methods without any completed cell come last.
    pub fn ranking(&self) -> Vec<(usize, &WorstRow)> {
        let mut blocks: BTreeMap<(String, usize), Vec<&WorstRow>> = BTreeMap::new();
        for w in &self.worst {
            blocks.entry((w.data.clone(), w.byzantine)).or_default().push(w);
        }
        let mut out = Vec::new();
        for (_, mut ws) in blocks {
            ws.sort_by(|a, b| {
                let key = |w: &WorstRow| w.worst.unwrap_or(f64::NEG_INFINITY);
                key(b).total_cmp(&key(a)).then_with(|| a.method.cmp(&b.method))
            });
            out.extend(ws.into_iter().enumerate().map(|(i, w)| (i + 1, w)));
        }
        out
    }

    pub fn ranking_tsv(&self) -> String {
        let mut s = String::from("data\trate\tf\trank\tmethod\tworst_accuracy\tworst_attack\n");
        for (rank, w) in self.ranking() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                w.data,
                w.rate,
                w.byzantine,
                rank,
                w.method,
                fmt_opt(w.worst),
                w.worst_attack.as_deref().unwrap_or("NA")
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub created_unix: u64,
    pub config_hash: String,
    pub cells: usize,
    pub failed: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub dir: PathBuf,
    pub table: ResultTable,
    pub results: Vec<CellResult>,
}

impl MatrixOutcome {
    pub fn failures(&self) -> impl Iterator<Item = (&Cell, &str)> {
        self.results
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (&r.cell, e.as_str())))
    }
}

/// Output root: explicit argument, then the config's `output`, then
/// `$CLUSTERGUARD_OUT`, then `./results`.
pub fn output_root(explicit: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Runs every cell under `root/<name>/`. Cells run in parallel; a failing
/// cell is logged and the matrix continues. With `force`, results of an
/// earlier run in the same directory are replaced.
pub fn run_matrix(config: &ExperimentConfig, root: &Path, force: bool) -> Result<MatrixOutcome> {
    config.validate()?;
    let dir = root.join(&config.name);
    let cells_dir = dir.join("cells");
    if dir.join("manifest.json").exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds results; pass force to overwrite",
                dir.display()
            )));
        }
        if cells_dir.exists() {
            fs::remove_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
        }
    }
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let hash = config.hash();
    let results: Vec<CellResult> = config
        .plan()
        .par_iter()
        .map(|p| run_cell(p, &hash, &cells_dir))
        .collect::<Result<_>>()?;
    let table = ResultTable::from_results(&results);
    write_atomic(&dir.join("table.tsv"), table.rows_tsv().as_bytes())?;
    write_atomic(&dir.join("worst.tsv"), table.worst_tsv().as_bytes())?;
    let mut failures = String::from("cell\tmessage\n");
    for r in &results {
        if let Err(e) = &r.outcome {
            failures.push_str(&format!("{}\t{}\n", r.cell.id(), e.replace(['\t', '\n'], " ")));
        }
    }
    write_atomic(&dir.join("failures.tsv"), failures.as_bytes())?;
    let manifest = Manifest {
        name: config.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config_hash: hash,
        cells: results.len(),
        failed: results.iter().filter(|r| r.outcome.is_err()).count(),
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(MatrixOutcome { dir, table, results })
}

/// A parsed cell log.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLog {
    pub cell: Cell,
    pub config_hash: String,
    pub rounds: Vec<RoundRecord>,
    pub outcome: std::result::Result<RunSummary, String>,
}

pub fn read_cell_log(path: &Path) -> Result<CellLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut rounds = Vec::new();
    let mut outcome = None;
    for (k, line) in text.lines().enumerate() {
        let parsed: LogLine =
            serde_json::from_str(line).map_err(|e| Error::io(path, format!("line {}: {e}", k + 1)))?;
        match parsed {
            LogLine::Header { cell, config_hash, .. } if header.is_none() && k == 0 => {
                header = Some((cell, config_hash))
            }
            LogLine::Round(r) if header.is_some() && outcome.is_none() => rounds.push(r),
            LogLine::Summary(s) if header.is_some() && outcome.is_none() => outcome = Some(Ok(s)),
            LogLine::Error { message } if header.is_some() && outcome.is_none() => outcome = Some(Err(message)),
            _ => return Err(Error::io(path, format!("line {}: unexpected record", k + 1))),
        }
    }
    let (cell, config_hash) = header.ok_or_else(|| Error::io(path, "missing header"))?;
    let outcome = outcome.ok_or_else(|| Error::io(path, "truncated log: no summary"))?;
    Ok(CellLog {
        cell,
        config_hash,
        rounds,
        outcome,
    })
}

/// Mean test accuracy across seeds after one step, for one (data, f,
/// attack, method) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub data: String,
    pub rate: f64,
    pub byzantine: usize,
    pub attack: String,
    pub method: String,
    pub step: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub table: ResultTable,
    pub series: Vec<SeriesPoint>,
    /// Files that could not be read, with the reason.
    pub problems: Vec<String>,
}

impl Summary {
    pub fn series_tsv(&self) -> String {
        let mut s = String::from("data\trate\tf\tattack\tmethod\tstep\taccuracy_mean\taccuracy_std\tseeds\n");
        for p in &self.series {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\n",
                p.data,
                p.rate,
                p.byzantine,
                p.attack,
                p.method,
                p.step,
                p.mean,
                fmt_opt(p.std),
                p.seeds
            ));
        }
        s
    }
}

/// Reads every cell log under `dir/cells`, then writes
/// `dir/summary/{ranking,series,table}.tsv`. Unreadable logs are reported in
/// `problems` and skipped.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let cells_dir = dir.join("cells");
    let mut paths: Vec<PathBuf> = fs::read_dir(&cells_dir)
        .map_err(|e| Error::io(&cells_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut problems = Vec::new();
    let mut logs = Vec::new();
    for p in &paths {
        match read_cell_log(p) {
            Ok(l) => logs.push(l),
            Err(e) => problems.push(e.to_string()),
        }
    }
    let results: Vec<CellResult> = logs
        .iter()
        .map(|l| CellResult {
            cell: l.cell.clone(),
            outcome: l.outcome.clone(),
        })
        .collect();
    let table = ResultTable::from_results(&results);

    let mut acc: BTreeMap<(String, usize, String, String, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for l in logs.iter().filter(|l| l.outcome.is_ok()) {
        let c = &l.cell;
        for r in &l.rounds {
            if let Some(a) = r.test_accuracy {
                acc.entry((c.data.clone(), c.byzantine, c.attack.clone(), c.method.clone(), r.round + 1))
                    .or_insert((c.rate, Vec::new()))
                    .1
                    .push(a);
            }
        }
    }
    let series = acc
        .into_iter()
        .map(|((data, byzantine, attack, method, step), (rate, xs))| {
            let (mean, std) = mean_std(&xs);
            SeriesPoint {
                data,
                rate,
                byzantine,
                attack,
                method,
                step,
                mean: mean.expect("non-empty"),
                std,
                seeds: xs.len(),
            }
        })
        .collect();
    let summary = Summary {
        table,
        series,
        problems,
    };
    let out = dir.join("summary");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_atomic(&out.join("ranking.tsv"), summary.table.ranking_tsv().as_bytes())?;
    write_atomic(&out.join("series.tsv"), summary.series_tsv().as_bytes())?;
    write_atomic(&out.join("table.tsv"), summary.table.rows_tsv().as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
            name = "tiny"
            n_workers = 7
            rates = [0.2]
            methods = ["avg", "cent2p"]
            attacks = ["sf", { kind = "empire", factor = -0.5 }]
            data = [{ mode = "uniform" }]
            seeds = [1, 2]
            [training]
            rounds = 6
            train_per_worker = 20
            test_per_worker = 10
            batch_size = 4
            vote_batch_size = 8
            eval_every = 2
            "#,
        )
        .unwrap()
    }

    #[test]
    fn default_matrix_mirrors_the_evaluation_grid() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let fs: Vec<usize> = c.rates.iter().map(|&r| c.byzantine_for(r)).collect();
        assert_eq!(fs, vec![3, 7, 14]);
        assert_eq!(c.methods.len(), 10);
        let names: Vec<&str> = c.attack_list().iter().map(|a| a.name()).collect();
        assert_eq!(names, ["SF", "Gauss", "Omn", "Empire", "SV", "PGA"]);
        let with_lf = ExperimentConfig::from_toml("label_flip = true").unwrap();
        assert_eq!(with_lf.attack_list().last().unwrap().name(), "LF");
        // round trip through the config format
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("seeds = [1]\nsed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[training]\nround = 3").is_err());
        assert!(ExperimentConfig::from_toml("methods = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("attacks = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml("rates = [0.5]").is_err());
        assert!(ExperimentConfig::from_toml("attacks = [\"lf\"]").is_err());
        assert!(ExperimentConfig::from_toml("attacks = [\"lf\"]\nlabel_flip = true").is_ok());
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
        assert!(ExperimentConfig::from_toml("name = \"a/b\"").is_err());
    }

    #[test]
    fn overrides_replace_nested_keys() {
        let c = ExperimentConfig::from_toml_with_overrides(
            "seeds = [0]",
            &["training.rounds=7", "seeds=[3,4]", "name=other", "training.task.classes=4"],
        )
        .unwrap();
        assert_eq!(c.training.rounds, 7);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.name, "other");
        assert_eq!(c.training.task.classes, 4);
        assert!(ExperimentConfig::from_toml_with_overrides("", &["rounds"]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["training.bogus=1"]).is_err());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = tiny();
        let mut b = a.clone();
        b.output = Some("/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn matrix_counts_and_round_trips() {
        let c = tiny();
        let tmp = tempfile::tempdir().unwrap();
        let out = run_matrix(&c, tmp.path(), false).unwrap();
        // 2 methods x 2 attacks x 2 seeds
        assert_eq!(out.results.len(), 8);
        assert_eq!(out.table.rows.len(), 4);
        assert_eq!(out.table.worst.len(), 2);
        assert_eq!(out.failures().count(), 0);
        for r in &out.table.rows {
            assert_eq!(r.seeds, 2);
            assert!(r.std.is_some());
        }
        for w in &out.table.worst {
            let row_min = out
                .table
                .rows
                .iter()
                .filter(|r| r.method == w.method)
                .map(|r| r.mean.unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(w.worst, Some(row_min));
        }
        // refuses to clobber without force
        assert!(run_matrix(&c, tmp.path(), false).is_err());
        let again = run_matrix(&c, tmp.path(), true).unwrap();
        assert_eq!(again.table, out.table);

        let s = summarize(&out.dir).unwrap();
        assert!(s.problems.is_empty());
        assert_eq!(s.table, out.table);
        // one series per (attack, method); the last point is the final accuracy
        let last: Vec<&SeriesPoint> = s.series.iter().filter(|p| p.step == 6).collect();
        assert_eq!(last.len(), 4);
        for p in last {
            let row = out
                .table
                .rows
                .iter()
                .find(|r| r.method == p.method && r.attack == p.attack)
                .unwrap();
            assert!((p.mean - row.mean.unwrap()).abs() < 1e-12);
            assert_eq!(p.seeds, 2);
        }
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(out.dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.config_hash, c.hash());
        assert_eq!(manifest.cells, 8);
    }

    #[test]
    fn single_seed_has_no_std_and_corrupt_logs_are_reported() {
        let mut c = tiny();
        c.seeds = vec![5];
        let tmp = tempfile::tempdir().unwrap();
        let out = run_matrix(&c, tmp.path(), false).unwrap();
        assert!(out.table.rows.iter().all(|r| r.std.is_none()));
        let cells = out.dir.join("cells");
        fs::write(cells.join("broken.jsonl"), "{not json\n").unwrap();
        let first = fs::read_dir(&cells)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| !p.ends_with("broken.jsonl"))
            .unwrap();
        let text = fs::read_to_string(&first).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        fs::write(&first, truncated).unwrap();
        let s = summarize(&out.dir).unwrap();
        assert_eq!(s.problems.len(), 2, "{:?}", s.problems);
        assert_eq!(s.table.rows.iter().map(|r| r.seeds).sum::<usize>(), 3);
    }

    #[test]
    fn failing_cells_are_recorded_and_the_matrix_continues() {
        let mut c = tiny();
        // Krum needs n >= f + 3, which only shows up when the cell runs
        c.n_workers = 3;
        c.rates = vec![0.34];
        c.methods = vec![
            NamedMethod::new(Method::Single {
                aggregator: AggregatorSpec::Avg,
            }),
            NamedMethod::new(Method::Single {
                aggregator: AggregatorSpec::Krum,
            }),
        ];
        let tmp = tempfile::tempdir().unwrap();
        let out = run_matrix(&c, tmp.path(), false).unwrap();
        assert_eq!(out.results.len(), 8);
        assert_eq!(out.failures().count(), 4);
        assert!(out.failures().all(|(cell, _)| cell.method == "Krum"));
        let failures = fs::read_to_string(out.dir.join("failures.tsv")).unwrap();
        assert_eq!(failures.lines().count(), 1 + out.failures().count());
        let s = summarize(&out.dir).unwrap();
        assert!(s.problems.is_empty());
        assert!(s.table.rows.iter().any(|r| r.failures > 0));
    }
}
