//! Experiment driver behind the `cospec` binary: configuration, method
//! matrices, training entry points, diagnostics and report merging.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arbitration::{
    read_policy, run_cospec, write_policy, ArbitrationPolicy, DecisionMode, PolicyFile,
    PolicyParams,
};
use crate::diagnostics::{
    branch_utilities, complementarity_report, mismatch_breakdown, reached_states,
    write_breakdown_csv, write_report_csv, UtilityMode,
};
use crate::error::{Error, Result};
use crate::lm::{
    generate_autoregressive, make_noisy_expert, make_suite, read_model, read_suite, score,
    write_suite, ChainFamily, DecodeConfig, TabularModel, TaskInstance, Temperature,
};
use crate::rl::{
    train_rl, train_sft, write_rl_log, write_rollouts, RewardConfig, SftConfig, TrainConfig,
};
use crate::rng::run_stream;
use crate::spd::{
    cost_model_speedup, mean_accepted_length, run_speculative_sampling, run_vanilla_spd,
    CostWeights, RunStats, TraceLine,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub path: PathBuf,
    pub n: usize,
    pub seed: u64,
    pub chain_length: usize,
    pub benchmark: String,
}

/// Either model files or the noisy-expert recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub p_target: f64,
    pub p_draft: f64,
    pub target_seed: u64,
    pub draft_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub temperature: Temperature,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitrationSpec {
    pub lambda: f64,
    /// `threshold` or `sample`.
    pub mode: String,
    /// Policy used by `cospec:learned`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    /// Warm-up policy used as the RL starting point and KL reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSpec {
    /// `exact` or `monte-carlo`.
    pub utility: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub methods: Vec<String>,
    pub suite: SuiteSpec,
    pub models: ModelSpec,
    pub engine: EngineSpec,
    pub arbitration: ArbitrationSpec,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub sft: SftConfig,
    pub cost: CostWeights,
    pub diagnose: DiagnoseSpec,
}

pub const DEFAULT_CONFIG: &str = r#"seed = 1
seeds = [0]
out_dir = "out"
methods = ["target-only", "vanilla-spd", "cospec:reject", "cospec:oracle"]

[suite]
path = "out/suite.jsonl"
n = 200
seed = 1
chain_length = 4
benchmark = "chain4"

[models]
p_target = 0.97
p_draft = 0.90
target_seed = 0
draft_seed = 1

[engine]
K = 25
T = 0
max_len = 64

[arbitration]
lambda = 0.6
mode = "threshold"

[reward]
alpha = 1.0
beta = 0.25
eta_fail = 0.5
epsilon = 1e-8

[train]
group_size = 12
prompts_per_update = 16
updates = 200
lr = 5e-5
weight_decay = 0.0
clip = 0.2
entropy_coef = 0.01
kl_coef = 0.02
epochs = 4
grad_clip = 1.0
K = 25
temperature = 1.0

[sft]
K = 25
steps = 500
lr = 0.05
weight_decay = 0.0
sharpness = 5.0

[cost]
draft = 0.05
arbitrator = 0.05

[diagnose]
utility = "exact"
samples = 32
"#;

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a parsed document; the key must already exist.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        table = table
            .get_mut(*part)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
    }
    let leaf = parts[parts.len() - 1];
    table.insert(leaf.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Loads `path` (or the built-in defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = DEFAULT_CONFIG.parse().expect("default config parses");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, user);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.engine.k == 0 {
            return Err(Error::Config("engine.K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.arbitration.lambda) {
            return Err(Error::Config("arbitration.lambda must lie in [0, 1]".into()));
        }
        if self.engine.max_len == 0 {
            return Err(Error::Config("engine.max_len must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.decision_mode()?;
        self.utility_mode()?;
        for m in &self.methods {
            Method::parse(m)?;
        }
        self.reward.validate()?;
        self.train.validate()
    }

    pub fn decision_mode(&self) -> Result<DecisionMode> {
        match self.arbitration.mode.as_str() {
            "threshold" => Ok(DecisionMode::Threshold(self.arbitration.lambda)),
            "sample" => Ok(DecisionMode::Sample),
            other => Err(Error::Config(format!("unknown arbitration.mode `{other}`"))),
        }
    }

    pub fn utility_mode(&self) -> Result<UtilityMode> {
        match self.diagnose.utility.as_str() {
            "exact" => Ok(UtilityMode::Exact),
            "monte-carlo" => Ok(UtilityMode::MonteCarlo(self.diagnose.samples)),
            other => Err(Error::Config(format!("unknown diagnose.utility `{other}`"))),
        }
    }

    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig { temperature: self.engine.temperature, max_len: self.engine.max_len, seed }
    }

    /// Canonical serialization; hashes of it identify trained artifacts.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_models(&self) -> Result<(TabularModel, TabularModel)> {
        let family = ChainFamily::new(self.suite.chain_length);
        let m = &self.models;
        let target = match &m.target_path {
            Some(p) => read_model(p)?,
            None => make_noisy_expert(&family, m.p_target, m.target_seed)?,
        };
        let draft = match &m.draft_path {
            Some(p) => read_model(p)?,
            None => make_noisy_expert(&family, m.p_draft, m.draft_seed)?,
        };
        if draft.vocab() != target.vocab() {
            return Err(Error::Config("draft and target vocabularies differ".into()));
        }
        Ok((draft, target))
    }

    pub fn load_suite(&self) -> Result<Vec<TaskInstance>> {
        read_suite(&self.suite.path)
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A row of the method matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    TargetOnly,
    VanillaSpd,
    SpecSampling,
    /// `reject`, `accept`, `oracle`, `learned`, or a policy file path.
    Cospec(String),
}

impl Method {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "target-only" => Ok(Method::TargetOnly),
            "vanilla-spd" => Ok(Method::VanillaSpd),
            "spec-sampling" => Ok(Method::SpecSampling),
            t => match t.strip_prefix("cospec:") {
                Some(p) if !p.is_empty() => Ok(Method::Cospec(p.to_string())),
                _ => Err(Error::Config(format!("unknown method `{t}`"))),
            },
        }
    }
}

/// Resolves a `cospec:` policy name.
pub fn resolve_policy(name: &str, cfg: &ExperimentConfig) -> Result<ArbitrationPolicy> {
    let mode = cfg.decision_mode()?;
    match name {
        "reject" => Ok(ArbitrationPolicy::AlwaysReject),
        "accept" => Ok(ArbitrationPolicy::AlwaysAccept),
        "oracle" => Ok(ArbitrationPolicy::oracle(ArbitrationPolicy::AlwaysReject, mode)),
        "learned" => {
            let p = cfg.arbitration.policy.as_ref().ok_or_else(|| {
                Error::Config("cospec:learned needs arbitration.policy".into())
            })?;
            Ok(ArbitrationPolicy::Learned(read_policy(p)?.params()))
        }
        path => Ok(ArbitrationPolicy::Learned(read_policy(Path::new(path))?.params())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub benchmark: String,
    pub speed: f64,
    pub tau: f64,
    pub score: f64,
    pub n_seeds: usize,
    pub wall_s: f64,
}

#[derive(Serialize)]
struct TaskTrace {
    task_id: u64,
    seed: u64,
    corr: u8,
    rounds: Vec<TraceLine>,
}

fn file_name_of(method: &str) -> String {
    method.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Evaluates one method over every seed and task.
pub fn evaluate_method(
    method: &str,
    cfg: &ExperimentConfig,
    suite: &[TaskInstance],
    draft: &TabularModel,
    target: &TabularModel,
    trace_path: Option<&Path>,
) -> Result<(ResultRow, Vec<(u64, u8)>)> {
    let parsed = Method::parse(method)?;
    let policy = match &parsed {
        Method::Cospec(name) => Some(resolve_policy(name, cfg)?),
        _ => None,
    };
    let mode = cfg.decision_mode()?;
    let k = cfg.engine.k;
    let started = Instant::now();
    let mut stats = RunStats::default();
    let mut correct = 0usize;
    let mut runs = 0usize;
    let mut per_task = Vec::new();
    let mut traces = Vec::new();
    for &seed in &cfg.seeds {
        let config = cfg.decode_config(seed);
        for task in suite {
            let mut rng = run_stream(method, task.id(), seed);
            let (output, run_stats, rounds) = match &parsed {
                Method::TargetOnly => {
                    let (out, calls) = generate_autoregressive(target, task, &config, &mut rng)?;
                    (out, RunStats::autoregressive(calls), Vec::new())
                }
                Method::VanillaSpd => {
                    let r = run_vanilla_spd(draft, target, task, k, &config, &mut rng)?;
                    (r.output, r.stats, r.records)
                }
                Method::SpecSampling => {
                    let r = run_speculative_sampling(draft, target, task, k, &config, &mut rng)?;
                    (r.output, r.stats, r.records)
                }
                Method::Cospec(_) => {
                    let p = policy.as_ref().expect("resolved above");
                    let r = run_cospec(draft, target, p, task, k, mode, &config, &mut rng)?;
                    (r.output, r.stats, r.rollout.rounds)
                }
            };
            let s = score(task, &output);
            correct += s as usize;
            runs += 1;
            if seed == cfg.seeds[0] {
                per_task.push((task.id(), s));
            }
            stats.absorb(&run_stats);
            if trace_path.is_some() && !rounds.is_empty() {
                traces.push(TaskTrace {
                    task_id: task.id(),
                    seed,
                    corr: s,
                    rounds: rounds.iter().map(|r| r.trace_line()).collect(),
                });
            }
        }
    }
    if let Some(path) = trace_path {
        let mut text = String::new();
        for t in &traces {
            text.push_str(&serde_json::to_string(t)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let (speed, tau) = if runs == 0 || stats.rounds == 0 {
        (1.0, 1.0)
    } else {
        (cost_model_speedup(&stats, &cfg.cost)?, mean_accepted_length(&stats)?)
    };
    let row = ResultRow {
        method: method.to_string(),
        benchmark: cfg.suite.benchmark.clone(),
        speed,
        tau,
        score: if runs == 0 { 0.0 } else { correct as f64 / runs as f64 },
        n_seeds: cfg.seeds.len(),
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok((row, per_task))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.method, &a.benchmark).cmp(&(&b.method, &b.benchmark)));
    let mut w = csv::Writer::from_path(path)?;
    for r in &sorted {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen_tasks(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let suite = make_suite(cfg.suite.seed, cfg.suite.n, cfg.suite.chain_length);
    if let Some(parent) = cfg.suite.path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_suite(&cfg.suite.path, &suite)?;
    info!("wrote {} tasks to {}", suite.len(), cfg.suite.path.display());
    Ok(cfg.suite.path.clone())
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let suite = cfg.load_suite()?;
    let (draft, target) = cfg.load_models()?;
    let traces = cfg.out_dir.join("traces");
    ensure_dir(&traces)?;
    let mut rows = Vec::new();
    for m in &cfg.methods {
        let path = traces.join(format!("{}.jsonl", file_name_of(m)));
        let (row, _) = evaluate_method(m, cfg, &suite, &draft, &target, Some(&path))?;
        info!("{m}: score {:.3} tau {:.3} speed {:.3}", row.score, row.tau, row.speed);
        rows.push(row);
    }
    write_results(&cfg.out_dir.join("results.csv"), &rows)?;
    Ok(rows)
}

fn policy_metadata(stage: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "stage": stage,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "details": extra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sft,
    Rl,
}

/// Trains one stage and writes the policy file; returns its path.
pub fn cmd_train(cfg: &ExperimentConfig, stage: Stage, no_warmup: bool) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let suite = cfg.load_suite()?;
    let (draft, target) = cfg.load_models()?;
    match stage {
        Stage::Sft => {
            let out = train_sft(&PolicyParams::zeros(), &suite, &draft, &target, &cfg.sft)?;
            let log_path = cfg.out_dir.join("sft_log.csv");
            let mut w = csv::Writer::from_path(&log_path)?;
            for row in &out.log {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(&log_path, e))?;
            let meta = policy_metadata("sft", cfg, serde_json::json!({ "samples": out.samples.len() }));
            let path = cfg.out_dir.join("policy_sft.json");
            write_policy(&path, &PolicyFile::new(&out.policy, Some(meta)))?;
            Ok(path)
        }
        Stage::Rl => {
            let reference = if no_warmup {
                PolicyParams::reject_all()
            } else {
                let p = cfg.arbitration.reference.as_ref().ok_or_else(|| {
                    Error::Config(
                        "RL needs a warm-up policy (arbitration.reference) or --no-warmup".into(),
                    )
                })?;
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "warm-up policy {} does not exist",
                        p.display()
                    )));
                }
                read_policy(p)?.params()
            };
            let out = train_rl(
                &reference,
                &reference,
                &suite,
                &draft,
                &target,
                &cfg.reward,
                &cfg.train,
                cfg.seed,
            )?;
            write_rl_log(&cfg.out_dir.join("rl_log.csv"), &out.log)?;
            write_rollouts(&cfg.out_dir.join("rollouts.jsonl"), &out.rollouts)?;
            let meta = policy_metadata("rl", cfg, serde_json::json!({ "no_warmup": no_warmup }));
            let path = cfg.out_dir.join("policy_rl.json");
            write_policy(&path, &PolicyFile::new(&out.policy, Some(meta)))?;
            Ok(path)
        }
    }
}

/// Mismatch breakdown and complementarity report for one cospec policy.
pub fn cmd_diagnose(cfg: &ExperimentConfig, policy_name: &str) -> Result<PathBuf> {
    ensure_dir(&cfg.out_dir)?;
    let suite = cfg.load_suite()?;
    let (draft, target) = cfg.load_models()?;
    let policy = resolve_policy(policy_name, cfg)?;
    let mode = cfg.decision_mode()?;
    let (cont, cont_mode) = policy.continuation(mode);
    let k = cfg.engine.k;
    let seed = cfg.seeds[0];
    let config = cfg.decode_config(seed);
    let utility_mode = cfg.utility_mode()?;
    let method = format!("cospec:{policy_name}");

    let mut items = Vec::new();
    let mut cospec_scores = Vec::new();
    for task in &suite {
        let mut rng = run_stream(&method, task.id(), seed);
        let run = run_cospec(&draft, &target, &policy, task, k, mode, &config, &mut rng)?;
        cospec_scores.push((task.id(), run.rollout.corr));
        for (state, action) in reached_states(task, &run.rollout) {
            let u = branch_utilities(
                &state, &draft, &target, &cont, cont_mode, k, &config, utility_mode,
            )?;
            items.push((u, action));
        }
    }
    let single = |model: &TabularModel, label: &str| -> Result<Vec<(u64, u8)>> {
        suite
            .iter()
            .map(|t| {
                let mut rng = run_stream(label, t.id(), seed);
                let (out, _) = generate_autoregressive(model, t, &config, &mut rng)?;
                Ok((t.id(), score(t, &out)))
            })
            .collect()
    };
    let target_scores = single(&target, "target-only")?;
    let draft_scores = single(&draft, "draft-only")?;
    let report = complementarity_report(
        &cfg.suite.benchmark,
        &target_scores,
        &draft_scores,
        &cospec_scores,
    )?;
    let breakdown = mismatch_breakdown(&items)?;
    write_breakdown_csv(&cfg.out_dir.join("breakdown.csv"), &breakdown)?;
    write_report_csv(&cfg.out_dir.join("report.csv"), std::slice::from_ref(&report))?;
    let summary = serde_json::json!({
        "policy": policy_name,
        "breakdown": breakdown,
        "report": report,
    });
    let path = cfg.out_dir.join("diagnostics.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub method: String,
    pub benchmark: String,
    pub speed: f64,
    pub tau: f64,
    pub score: f64,
    pub count: usize,
}

const RESULT_HEADER: [&str; 7] = ["method", "benchmark", "speed", "tau", "score", "n_seeds", "wall_s"];

fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::input(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RESULT_HEADER) {
        return Err(Error::input(format!(
            "{}: expected columns {}",
            path.display(),
            RESULT_HEADER.join(",")
        )));
    }
    let rows: Vec<ResultRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::input(format!("{}: no result rows", path.display())));
    }
    Ok(rows)
}

/// Averages duplicate (method, benchmark) rows across result files.
pub fn merge_results(files: &[PathBuf]) -> Result<Vec<MergedRow>> {
    if files.is_empty() {
        return Err(Error::input("report needs at least one result file"));
    }
    let mut groups: BTreeMap<(String, String), Vec<ResultRow>> = BTreeMap::new();
    for f in files {
        for row in read_results(f)? {
            groups.entry((row.method.clone(), row.benchmark.clone())).or_default().push(row);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((method, benchmark), rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            MergedRow {
                method,
                benchmark,
                speed: mean(|r| r.speed),
                tau: mean(|r| r.tau),
                score: mean(|r| r.score),
                count: rows.len(),
            }
        })
        .collect())
}

pub fn format_table(rows: &[MergedRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.benchmark.clone(),
                format!("{:.3}", r.speed),
                format!("{:.3}", r.tau),
                format!("{:.4}", r.score),
                r.count.to_string(),
            ]
        })
        .collect();
    let header = ["method", "benchmark", "speed", "tau", "score", "count"];
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: Vec<&str>| -> String {
        let parts: Vec<String> = fields
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (f, w))| if i < 2 { format!("{f:<w$}") } else { format!("{f:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Writes the merged CSV and returns the aligned text table.
pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<String> {
    let rows = merge_results(files)?;
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let table = format_table(&rows);
    let txt = out.with_extension("txt");
    let mut f = fs::File::create(&txt).map_err(|e| Error::io(&txt, e))?;
    f.write_all(table.as_bytes()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.engine.k, 25);
        assert_eq!(cfg.arbitration.lambda, 0.6);
        assert_eq!(cfg.train.group_size, 12);
        assert_eq!(cfg.train.prompts_per_update, 16);
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::load(
            None,
            &["engine.K=5".into(), "arbitration.lambda=0.8".into(), "suite.benchmark=abc".into()],
        )
        .unwrap();
        assert_eq!(cfg.engine.k, 5);
        assert_eq!(cfg.arbitration.lambda, 0.8);
        assert_eq!(cfg.suite.benchmark, "abc");
        assert!(ExperimentConfig::load(None, &["engine.K=0".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["nosuch.key=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["engine.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["engine.T=0.5".into()]).is_err());
    }

    #[test]
    fn methods_parse() {
        assert_eq!(Method::parse("target-only").unwrap(), Method::TargetOnly);
        assert_eq!(Method::parse("cospec:oracle").unwrap(), Method::Cospec("oracle".into()));
        let err = Method::parse("beam-search").unwrap_err().to_string();
        assert!(err.contains("beam-search"));
        assert!(Method::parse("cospec:").is_err());
    }

    #[test]
    fn digest_is_stable() {
        let a = ExperimentConfig::load(None, &[]).unwrap();
        let b = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::load(None, &["seed=2".into()]).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn table_layout() {
        let rows = vec![MergedRow {
            method: "vanilla-spd".into(),
            benchmark: "chain4".into(),
            speed: 2.0,
            tau: 4.0,
            score: 0.8,
            count: 2,
        }];
        let t = format_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("method"));
        assert!(lines[1].contains("vanilla-spd") && lines[1].ends_with('2'));
    }
}
