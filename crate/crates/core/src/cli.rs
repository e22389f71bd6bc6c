//! Command-line driver.
//!
//! Every subcommand reads a [`RunConfig`] (JSON file and/or flags, flags win)
//! and writes its results under the output directory. The `cmd_*` functions
//! are usable directly from code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::decompose::{plan_decomposition, Granularity};
use crate::error::{Error, Result};
use crate::features::{collect_base_features, compute_delta_outputs, read_jsonl, TaskDataset};
use crate::fixture::{gen_fixture, FixtureSpec, DEFAULT_INIT_SCALE};
use crate::merge::{
    merge_dare, merge_linear_solve, merge_task_arithmetic, merge_weight_average, run_merge, task_vectors, MergeMethod,
    MergeRequest,
};
use crate::metrics::{
    cosine_base, mean_std, metric_sweep, non_linearity_score, pooled_deltas, AlphaGrid, LinearityRecord, DEFAULT_N,
};
use crate::model::{bind_weights, eval_cross_entropy, ModelConfig};
use crate::solver::MergeWeights;

/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when `--strict` is set and any group fell back.
pub const EXIT_DEGRADED: i32 = 3;

pub const TASK_ARITHMETIC_ALPHAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DARE_DROP_PS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];
pub const DARE_ALPHAS: [f64; 3] = [0.6, 0.8, 1.0];

/// Everything a command may need. Unset paths are resolved from `fixture_dir`
/// when one is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `gen-fixture`.
    pub fixture_dir: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub fine_tuned: Vec<PathBuf>,
    /// JSONL files; tasks are taken in first-seen order and must line up
    /// with `fine_tuned`.
    pub datasets: Vec<PathBuf>,
    /// Archive scored by `eval`.
    pub archive: Option<PathBuf>,
    pub out: PathBuf,

    pub method: Option<MergeMethod>,
    pub level: Option<Granularity>,
    pub alpha: Option<f64>,
    pub drop_p: Option<f64>,
    pub seed: u64,
    pub normalized: bool,
    pub samples_per_task: usize,

    /// Levels covered by `analyze`; all of them when empty.
    pub levels: Vec<Granularity>,
    /// Interpolation steps for the Non-linearity Score.
    pub points: usize,
    pub emit_plan: bool,
    pub strict: bool,

    pub fixture: Option<FixtureSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fixture_dir: None,
            base: None,
            fine_tuned: Vec::new(),
            datasets: Vec::new(),
            archive: None,
            out: PathBuf::from("out"),
            method: None,
            level: None,
            alpha: None,
            drop_p: None,
            seed: 0,
            normalized: true,
            samples_per_task: 30,
            levels: Vec::new(),
            points: DEFAULT_N,
            emit_plan: false,
            strict: false,
            fixture: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills unset input paths from `fixture_dir`.
    pub fn resolve(&mut self) -> Result<()> {
        let Some(dir) = self.fixture_dir.clone() else {
            return Ok(());
        };
        if self.base.is_none() {
            self.base = Some(dir.join("base.tza"));
        }
        if self.fine_tuned.is_empty() {
            let manifest = dir.join("fixture.json");
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let body: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            let tasks = body["spec"]["tasks"]
                .as_u64()
                .ok_or_else(|| Error::Config(format!("{} has no spec.tasks", manifest.display())))?;
            self.fine_tuned = (0..tasks).map(|t| dir.join(format!("ft_{t}.tza"))).collect();
        }
        if self.datasets.is_empty() {
            self.datasets = vec![dir.join("data.jsonl")];
        }
        Ok(())
    }

    fn base_path(&self) -> Result<&Path> {
        self.base
            .as_deref()
            .ok_or_else(|| Error::Config("no base archive given (--base or --fixture)".into()))
    }

    fn load_models(&self) -> Result<(TensorArchive, Vec<TensorArchive>)> {
        let base = TensorArchive::read(self.base_path()?)?;
        if self.fine_tuned.is_empty() {
            return Err(Error::Config(
                "no fine-tuned archives given (--fine-tuned or --fixture)".into(),
            ));
        }
        let ft = self
            .fine_tuned
            .iter()
            .map(TensorArchive::read)
            .collect::<Result<Vec<_>>>()?;
        Ok((base, ft))
    }

    fn load_datasets(&self) -> Result<Vec<TaskDataset>> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets given (--datasets or --fixture)".into()));
        }
        let mut all: Vec<TaskDataset> = Vec::new();
        for p in &self.datasets {
            for d in read_jsonl(p)? {
                match all.iter_mut().find(|x| x.task == d.task) {
                    Some(x) => x.sequences.extend(d.sequences),
                    None => all.push(d),
                }
            }
        }
        if all.is_empty() {
            return Err(Error::Input("datasets contain no sequences".into()));
        }
        Ok(all)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Some solved group fell back to ridge or uniform weights.
    pub fallback: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest_entry(path: &Path) -> Result<Value> {
    Ok(json!({"path": path.display().to_string(), "sha256": sha256_file(path)?}))
}

fn model_config(archive: &TensorArchive, fallback: Option<&TensorArchive>) -> Result<ModelConfig> {
    match (ModelConfig::from_archive(archive), fallback) {
        (Ok(c), _) => Ok(c),
        (Err(_), Some(b)) => ModelConfig::from_archive(b),
        (Err(e), None) => Err(e),
    }
}

/// Writes a fixture; the spec comes from `config.fixture` or a small default.
pub fn cmd_gen_fixture(config: &RunConfig) -> Result<Outcome> {
    let spec = config.fixture.clone().unwrap_or_else(|| default_fixture(config.seed));
    let paths = gen_fixture(&spec, &config.out)?;
    let mut files = vec![paths.base, paths.datasets, paths.manifest];
    files.extend(paths.fine_tuned);
    Ok(Outcome { files, fallback: false })
}

pub fn default_fixture(seed: u64) -> FixtureSpec {
    FixtureSpec {
        config: ModelConfig::new(32, 4, 2, 64, 64, 32),
        tasks: 2,
        tau_scale: 0.05,
        dataset_size: 40,
        seq_len: 16,
        seed,
        init_scale: DEFAULT_INIT_SCALE,
        trained: false,
    }
}

/// Groups that stand for real submodules; `embed` and `lm_head` are excluded
/// from level summaries.
fn is_core_group(id: &str) -> bool {
    id != "embed" && id != "lm_head"
}

const SUMMARY_METRICS: [&str; 4] = [
    "non_linearity_score",
    "cosine_base",
    "cosine_merge_grid_mean",
    "projection_distance_grid_mean",
];

fn ratio_csv(matrix: &[Vec<f64>]) -> String {
    let n = matrix.len();
    let mut s = String::from("i");
    for j in 0..n {
        s.push_str(&format!(",{j}"));
    }
    s.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

/// Linearity report for every requested level.
pub fn cmd_analyze(config: &RunConfig) -> Result<Outcome> {
    let (base, fine_tuned) = config.load_models()?;
    let datasets = config.load_datasets()?;
    let cfg = model_config(&base, None)?;
    let taus = task_vectors(&base, &fine_tuned)?;
    let grid = AlphaGrid::default_for(fine_tuned.len())?;
    let levels = if config.levels.is_empty() {
        Granularity::ALL.to_vec()
    } else {
        config.levels.clone()
    };
    let mut files = Vec::new();
    let mut level_reports = Vec::new();
    let mut summary_csv = String::from("level,metric,mean,std,count,within_group_std\n");
    let mut total = 0usize;
    let mut failed = 0usize;

    for level in levels {
        let plan = plan_decomposition(&cfg, level)?;
        if config.emit_plan {
            let p = config.out_file(&format!("plan_{level}.json"))?;
            write_json(&p, &plan)?;
            files.push(p);
        }
        let store = collect_base_features(&base, &datasets, &plan, config.samples_per_task, config.seed)?;
        let deltas = compute_delta_outputs(&store, &base, &fine_tuned, &plan)?;

        let per_group: Vec<(Vec<LinearityRecord>, Vec<(String, Vec<Vec<f64>>)>)> = plan
            .groups
            .par_iter()
            .map(|g| {
                let mut records = Vec::new();
                let mut heatmaps = Vec::new();
                for (t, tau) in taus.iter().enumerate() {
                    let rec = match non_linearity_score(&store, &base, tau, g, config.points) {
                        Ok(r) => {
                            heatmaps.push((format!("{}_task{t}", g.id), r.ratio_matrix));
                            LinearityRecord::new(&g.id, "non_linearity_score", r.mean)
                                .with("sample_std", r.std)
                                .with("samples", r.samples)
                                .with("skipped", r.skipped)
                                .with("n", r.n)
                        }
                        Err(e) => LinearityRecord::failed(&g.id, "non_linearity_score", &e),
                    };
                    records.push(rec.with("task", t));
                }
                let gd = deltas.group(&g.id);
                records.push(match gd.and_then(|gd| cosine_base(&pooled_deltas(gd))) {
                    Ok(v) => LinearityRecord::new(&g.id, "cosine_base", v),
                    Err(e) => LinearityRecord::failed(&g.id, "cosine_base", &e),
                });
                match deltas
                    .group(&g.id)
                    .and_then(|gd| metric_sweep(&store, &base, &taus, g, gd, &grid))
                {
                    Ok(r) => records.extend(r),
                    Err(e) => records.push(LinearityRecord::failed(&g.id, "metric_sweep", &e)),
                }
                (records, heatmaps)
            })
            .collect();

        let heat_dir = config.out.join("heatmaps").join(level.as_str());
        std::fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
        let mut sweep_csv = String::from("group,alpha,cosine_merge,projection_distance\n");
        let mut records = Vec::new();
        for (recs, heatmaps) in per_group {
            for (name, m) in heatmaps {
                let p = heat_dir.join(format!("{name}.csv"));
                write_text(&p, &ratio_csv(&m))?;
                files.push(p);
            }
            let mut by_alpha: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
            let mut order = Vec::new();
            for r in &recs {
                if let Some(a) = r.aux.get("alpha") {
                    let key = a.as_array().map(|v| {
                        v.iter()
                            .map(|x| x.as_f64().unwrap_or(f64::NAN).to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    });
                    let key = key.unwrap_or_default();
                    if !by_alpha.contains_key(&key) {
                        order.push(key.clone());
                    }
                    let e = by_alpha.entry(key).or_default();
                    match r.metric.as_str() {
                        "cosine_merge" => e.0 = r.value,
                        "projection_distance" => e.1 = r.value,
                        _ => {}
                    }
                }
            }
            if let Some(first) = recs.first() {
                for key in order {
                    let (c, p) = by_alpha[&key];
                    sweep_csv.push_str(&format!("{},{key},{},{}\n", first.group, fmt_value(c), fmt_value(p)));
                }
            }
            records.extend(recs);
        }
        let p = config.out_file(&format!("sweep_{level}.csv"))?;
        write_text(&p, &sweep_csv)?;
        files.push(p);

        total += records.len();
        failed += records.iter().filter(|r| r.value.is_none()).count();

        let mut summary = serde_json::Map::new();
        for metric in SUMMARY_METRICS {
            let picked: Vec<&LinearityRecord> = records
                .iter()
                .filter(|r| r.metric == metric && is_core_group(&r.group) && r.value.is_some())
                .collect();
            if picked.is_empty() {
                continue;
            }
            let vals: Vec<f64> = picked.iter().map(|r| r.value.unwrap()).collect();
            let (mean, std) = mean_std(&vals);
            let within: Vec<f64> = picked
                .iter()
                .filter_map(|r| r.aux.get("sample_std").and_then(Value::as_f64))
                .collect();
            let within_mean = (!within.is_empty()).then(|| within.iter().sum::<f64>() / within.len() as f64);
            summary_csv.push_str(&format!(
                "{level},{metric},{mean:.8},{std:.8},{},{}\n",
                vals.len(),
                fmt_value(within_mean)
            ));
            summary.insert(
                metric.to_string(),
                json!({"mean": mean, "std": std, "count": vals.len(), "within_group_std": within_mean}),
            );
        }
        level_reports.push(json!({
            "level": level,
            "groups": plan.ids().collect::<Vec<_>>(),
            "summary": summary,
            "records": records,
        }));
    }
    if total > 0 && failed == total {
        return Err(Error::Degenerate("every linearity record failed".into()));
    }
    let report = json!({
        "tasks": datasets.iter().map(|d| d.task.clone()).collect::<Vec<_>>(),
        "samples_per_task": config.samples_per_task,
        "seed": config.seed,
        "points": config.points,
        "alpha_grid": grid.vectors,
        "summary_scope": "all groups except embed and lm_head",
        "levels": level_reports,
    });
    let p = config.out_file("report.json")?;
    write_json(&p, &report)?;
    files.push(p);
    let p = config.out_file("summary.csv")?;
    write_text(&p, &summary_csv)?;
    files.push(p);
    Ok(Outcome { files, fallback: false })
}

fn level_or_default(config: &RunConfig) -> Granularity {
    config.level.unwrap_or(Granularity::AttnMlp)
}

/// Solved per-group weights, no merge.
pub fn cmd_solve(config: &RunConfig) -> Result<Outcome> {
    let (base, fine_tuned) = config.load_models()?;
    let datasets = config.load_datasets()?;
    let (_, weights) = crate::merge::solve_weights(
        &base,
        &fine_tuned,
        level_or_default(config),
        &datasets,
        config.samples_per_task,
        config.seed,
        config.normalized,
    )?;
    let p = config.out_file("weights.json")?;
    write_json(&p, &weights)?;
    Ok(Outcome {
        files: vec![p],
        fallback: weights.any_fallback(),
    })
}

fn merge_request(config: &RunConfig) -> Result<MergeRequest> {
    let method = config
        .method
        .ok_or_else(|| Error::Config("merge needs a method".into()))?;
    let request = MergeRequest {
        method,
        level: (method == MergeMethod::LinearSolve).then(|| level_or_default(config)),
        alpha: config.alpha,
        drop_p: config.drop_p,
        seed: config.seed,
        normalized: config.normalized,
        samples_per_task: config.samples_per_task,
    };
    request.validate()?;
    Ok(request)
}

/// Merged archive plus a manifest of inputs, flags and digests.
pub fn cmd_merge(config: &RunConfig) -> Result<Outcome> {
    let request = merge_request(config)?;
    let (base, fine_tuned) = config.load_models()?;
    let datasets = if request.method == MergeMethod::LinearSolve {
        config.load_datasets()?
    } else {
        Vec::new()
    };
    let (merged, weights) = run_merge(&request, &base, &fine_tuned, &datasets)?;
    let merged_path = config.out_file("merged.tza")?;
    merged.write(&merged_path)?;
    let mut files = vec![merged_path.clone()];
    let mut outputs = json!({"merged": digest_entry(&merged_path)?});
    if let Some(w) = &weights {
        let p = config.out_file("weights.json")?;
        write_json(&p, w)?;
        outputs["weights"] = digest_entry(&p)?;
        files.push(p);
    }
    let manifest = json!({
        "command": "merge",
        "request": request,
        "inputs": {
            "base": digest_entry(config.base_path()?)?,
            "fine_tuned": config.fine_tuned.iter().map(|p| digest_entry(p)).collect::<Result<Vec<_>>>()?,
            "datasets": if request.method == MergeMethod::LinearSolve {
                config.datasets.iter().map(|p| digest_entry(p)).collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            },
        },
        "outputs": outputs,
    });
    let p = config.out_file("manifest.json")?;
    write_json(&p, &manifest)?;
    files.push(p);
    Ok(Outcome {
        files,
        fallback: weights.as_ref().is_some_and(MergeWeights::any_fallback),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: String,
    pub sequences: usize,
    pub loss: f64,
}

/// Mean next-token loss of `archive` on every task.
pub fn evaluate_tasks(archive: &TensorArchive, cfg: &ModelConfig, datasets: &[TaskDataset]) -> Result<Vec<TaskLoss>> {
    let model = bind_weights(archive, cfg)?;
    datasets
        .iter()
        .map(|d| {
            Ok(TaskLoss {
                task: d.task.clone(),
                sequences: d.sequences.len(),
                loss: eval_cross_entropy(&model, &d.sequences)?,
            })
        })
        .collect()
}

/// Per-task and mean loss of one archive (`archive`, or `base` when unset).
pub fn cmd_eval(config: &RunConfig) -> Result<Outcome> {
    let path = match (&config.archive, &config.base) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("eval needs --archive".into())),
    };
    let archive = TensorArchive::read(&path)?;
    let base = match &config.base {
        Some(b) if *b != path => Some(TensorArchive::read(b)?),
        _ => None,
    };
    let cfg = model_config(&archive, base.as_ref())?;
    let datasets = config.load_datasets()?;
    let losses = evaluate_tasks(&archive, &cfg, &datasets)?;
    let mean = losses.iter().map(|l| l.loss).sum::<f64>() / losses.len() as f64;
    let p = config.out_file("eval.json")?;
    write_json(
        &p,
        &json!({"archive": digest_entry(&path)?, "tasks": losses, "mean": mean}),
    )?;
    Ok(Outcome {
        files: vec![p],
        fallback: false,
    })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: MergeMethod,
    pub params: BTreeMap<String, Value>,
    pub losses: Vec<f64>,
    pub mean: f64,
}

impl CompareRow {
    pub fn label(&self) -> String {
        let p: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if p.is_empty() {
            self.method.to_string()
        } else {
            format!("{} {}", self.method, p.join(" ").replace('"', ""))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub tasks: Vec<String>,
    pub rows: Vec<CompareRow>,
    /// Row index with the lowest loss per task, then for the mean.
    pub best: Vec<usize>,
    pub fallback: bool,
}

impl Comparison {
    /// Lowest mean loss among rows of `method`.
    pub fn best_mean(&self, method: MergeMethod) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.mean)
            .min_by(f64::total_cmp)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,params");
        for t in &self.tasks {
            s.push_str(&format!(",{t}"));
        }
        s.push_str(",mean\n");
        for (i, r) in self.rows.iter().enumerate() {
            let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(&format!("{},{}", r.method, params.join(";").replace('"', "")));
            for (c, v) in r.losses.iter().chain(std::iter::once(&r.mean)).enumerate() {
                let mark = if self.best[c] == i { "*" } else { "" };
                s.push_str(&format!(",{v:.6}{mark}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Every baseline over its hyperparameter grid plus the closed-form merge,
/// each scored on every task.
pub fn compare_methods(
    base: &TensorArchive,
    fine_tuned: &[TensorArchive],
    datasets: &[TaskDataset],
    level: Granularity,
    samples_per_task: usize,
    seed: u64,
    normalized: bool,
) -> Result<Comparison> {
    let cfg = model_config(base, None)?;
    let mut jobs: Vec<(MergeMethod, BTreeMap<String, Value>)> = vec![(MergeMethod::WeightAvg, BTreeMap::new())];
    for a in TASK_ARITHMETIC_ALPHAS {
        jobs.push((
            MergeMethod::TaskArithmetic,
            BTreeMap::from([("alpha".into(), json!(a))]),
        ));
    }
    for p in DARE_DROP_PS {
        for a in DARE_ALPHAS {
            jobs.push((
                MergeMethod::Dare,
                BTreeMap::from([("drop_p".into(), json!(p)), ("alpha".into(), json!(a))]),
            ));
        }
    }
    jobs.push((
        MergeMethod::LinearSolve,
        BTreeMap::from([("level".into(), json!(level))]),
    ));

    let results = jobs
        .into_par_iter()
        .map(|(method, params)| {
            let f = |k: &str| params[k].as_f64().unwrap();
            let (merged, fallback) = match method {
                MergeMethod::WeightAvg => (merge_weight_average(base, fine_tuned)?, false),
                MergeMethod::TaskArithmetic => (merge_task_arithmetic(base, fine_tuned, f("alpha"))?, false),
                MergeMethod::Dare => (merge_dare(base, fine_tuned, f("alpha"), f("drop_p"), seed)?, false),
                MergeMethod::LinearSolve => {
                    let out =
                        merge_linear_solve(base, fine_tuned, level, datasets, samples_per_task, seed, normalized)?;
                    let fb = out.weights.any_fallback();
                    (out.merged, fb)
                }
            };
            let losses: Vec<f64> = evaluate_tasks(&merged, &cfg, datasets)?
                .into_iter()
                .map(|l| l.loss)
                .collect();
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            Ok((
                CompareRow {
                    method,
                    params,
                    losses,
                    mean,
                },
                fallback,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallback = results.iter().any(|(_, f)| *f);
    let rows: Vec<CompareRow> = results.into_iter().map(|(r, _)| r).collect();
    let best = (0..=datasets.len())
        .map(|c| {
            let col = |r: &CompareRow| if c < r.losses.len() { r.losses[c] } else { r.mean };
            (0..rows.len())
                .min_by(|&a, &b| col(&rows[a]).total_cmp(&col(&rows[b])))
                .unwrap()
        })
        .collect();
    Ok(Comparison {
        tasks: datasets.iter().map(|d| d.task.clone()).collect(),
        rows,
        best,
        fallback,
    })
}

/// Methods × tasks loss table as JSON and CSV.
pub fn cmd_compare(config: &RunConfig) -> Result<Outcome> {
    let (base, fine_tuned) = config.load_models()?;
    let datasets = config.load_datasets()?;
    let cmp = compare_methods(
        &base,
        &fine_tuned,
        &datasets,
        level_or_default(config),
        config.samples_per_task,
        config.seed,
        config.normalized,
    )?;
    let json_path = config.out_file("compare.json")?;
    write_json(&json_path, &cmp)?;
    let csv_path = config.out_file("compare.csv")?;
    write_text(&csv_path, &cmp.to_csv())?;
    Ok(Outcome {
        files: vec![json_path, csv_path],
        fallback: cmp.fallback,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "linmerge",
    version,
    about = "Submodule-level model merging and linearity analysis"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON file with a RunConfig object; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampling, DARE masks and generated fixtures.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sequences drawn from each task's data to fit the weights (default 30).
    #[arg(long, global = true)]
    pub samples_per_task: Option<usize>,
    /// model, layer, attn_mlp (default) or head_mlp.
    #[arg(long, global = true)]
    pub level: Option<Granularity>,
    /// Energy-normalized Gram tensor (the default).
    #[arg(long, global = true, conflicts_with = "plain_gram")]
    pub normalized: bool,
    /// Plain Gram tensor without per-sample normalization.
    #[arg(long, global = true)]
    pub plain_gram: bool,
    /// Exit with status 3 if any group fell back to ridge or uniform weights.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Fixture directory written by gen-fixture; supplies base, fine-tuned and data paths.
    #[arg(long, global = true)]
    pub fixture: Option<PathBuf>,
    /// Base model archive.
    #[arg(long, global = true)]
    pub base: Option<PathBuf>,
    /// Fine-tuned archives, one per task, in task order.
    #[arg(long = "fine-tuned", global = true, num_args = 1..)]
    pub fine_tuned: Vec<PathBuf>,
    /// JSONL files of `{"task": .., "tokens": [..]}` lines.
    #[arg(long, global = true, num_args = 1..)]
    pub datasets: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic base model, fine-tunes and datasets.
    GenFixture(FixtureArgs),
    /// Linearity report at one or more levels.
    Analyze {
        /// Comma-separated levels; all when omitted.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<Granularity>,
        /// Interpolation steps for the Non-linearity Score.
        #[arg(long)]
        points: Option<usize>,
        /// Also write each level's decomposition plan.
        #[arg(long)]
        emit_plan: bool,
    },
    /// Solve per-group merging weights without merging.
    Solve,
    /// Produce a merged archive.
    Merge {
        #[arg(long)]
        method: Option<MergeMethod>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        drop_p: Option<f64>,
    },
    /// Per-task loss of one archive.
    Eval {
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Loss table for every method and baseline grid point.
    Compare,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub tau_scale: Option<f32>,
    #[arg(long)]
    pub init_scale: Option<f32>,
    /// Point each task's unembedding down its own loss.
    #[arg(long)]
    pub trained: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

impl Cli {
    /// Config file (if any) overlaid with the flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let g = &self.global;
        let mut c = match &g.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = g.seed {
            c.seed = v;
        }
        if let Some(v) = g.samples_per_task {
            c.samples_per_task = v;
        }
        if g.level.is_some() {
            c.level = g.level;
        }
        if g.normalized {
            c.normalized = true;
        }
        if g.plain_gram {
            c.normalized = false;
        }
        c.strict |= g.strict;
        if let Some(v) = &g.out {
            c.out = v.clone();
        }
        if g.fixture.is_some() {
            c.fixture_dir = g.fixture.clone();
        }
        if g.base.is_some() {
            c.base = g.base.clone();
        }
        if !g.fine_tuned.is_empty() {
            c.fine_tuned = g.fine_tuned.clone();
        }
        if !g.datasets.is_empty() {
            c.datasets = g.datasets.clone();
        }
        match &self.command {
            Command::GenFixture(a) => {
                let mut spec = c.fixture.clone().unwrap_or_else(|| default_fixture(c.seed));
                if g.seed.is_some() {
                    spec.seed = c.seed;
                }
                let m = &mut spec.config;
                for (dst, src) in [
                    (&mut m.d_model, a.d_model),
                    (&mut m.n_heads, a.n_heads),
                    (&mut m.n_layers, a.n_layers),
                    (&mut m.d_ff, a.d_ff),
                    (&mut m.vocab_size, a.vocab_size),
                    (&mut m.max_seq, a.max_seq),
                    (&mut spec.tasks, a.tasks),
                    (&mut spec.dataset_size, a.dataset_size),
                    (&mut spec.seq_len, a.seq_len),
                ] {
                    if let Some(v) = src {
                        *dst = v;
                    }
                }
                if let Some(v) = a.tau_scale {
                    spec.tau_scale = v;
                }
                if let Some(v) = a.init_scale {
                    spec.init_scale = v;
                }
                spec.trained |= a.trained;
                c.fixture = Some(spec);
            }
            Command::Analyze {
                levels,
                points,
                emit_plan,
            } => {
                if !levels.is_empty() {
                    c.levels = levels.clone();
                }
                if let Some(p) = points {
                    c.points = *p;
                }
                c.emit_plan |= emit_plan;
            }
            Command::Merge { method, alpha, drop_p } => {
                if method.is_some() {
                    c.method = *method;
                }
                if alpha.is_some() {
                    c.alpha = *alpha;
                }
                if drop_p.is_some() {
                    c.drop_p = *drop_p;
                }
            }
            Command::Eval { archive } => {
                if archive.is_some() {
                    c.archive = archive.clone();
                }
            }
            Command::Solve | Command::Compare => {}
        }
        c.resolve()?;
        Ok(c)
    }

    pub fn execute(&self) -> Result<(RunConfig, Outcome)> {
        let config = self.run_config()?;
        let outcome = match self.command {
            Command::GenFixture(_) => cmd_gen_fixture(&config),
            Command::Analyze { .. } => cmd_analyze(&config),
            Command::Solve => cmd_solve(&config),
            Command::Merge { .. } => cmd_merge(&config),
            Command::Eval { .. } => cmd_eval(&config),
            Command::Compare => cmd_compare(&config),
        }?;
        Ok((config, outcome))
    }
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Param(_) => EXIT_CONFIG,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match cli.execute() {
        Ok((config, outcome)) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if config.strict && outcome.fallback {
                eprintln!("error: some groups fell back to ridge or uniform weights");
                EXIT_DEGRADED
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
