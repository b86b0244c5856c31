//! Subcommands over a run directory. Each command writes its outputs under
//! `<output_dir>/<section>/` together with a `manifest.json` holding the full
//! config, the hashes of the inputs it read and of every file it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use glyrl_agents::train::write_curve;
use glyrl_agents::{train, Algorithm, EstimateRecord, PolicyArtifact, Transitions};
use glyrl_core::{Dataset, EpisodeLog, Normalizer, RewardKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{correlation_matrix, BasalBins, BasalComparison};
use crate::cohort::{behavior_logs, build_dataset, build_eval_dataset, summarize, CohortSummary};
use crate::config::{RunConfig, METRIC_KINDS};
use crate::evaluation::{fqe_estimates, BolusOverride, LoggedPolicy};
use crate::personalize::{personalize, AuditLog, PatientSegments, PersonalizationReport, TEST_SEGMENT};
use crate::rollout::{evaluate_cohort, mean_row, Candidate, MetricRow};
use crate::{PipelineError, Result};

pub const DATASET: &str = "data/dataset.bin";
pub const DATASET_EVAL: &str = "data/dataset_eval.bin";
pub const PERSONAL_DATASET: &str = "data/personal_dataset.bin";
pub const PERSONAL_DATASET_EVAL: &str = "data/personal_dataset_eval.bin";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// Run-relative path → sha256 of the inputs read.
    pub inputs: BTreeMap<String, String>,
    /// Section-relative path → sha256 of the files written.
    pub outputs: BTreeMap<String, String>,
}

/// The run directory rooted at the config's `output_dir`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    fn section(&self, name: &str, command: &str) -> Result<Section> {
        let dir = self.path(name);
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        Ok(Section {
            root: self.root.clone(),
            dir,
            command: command.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(PipelineError::Missing(format!("{} (run the producing command first)", p.display())));
        }
        fs::read(&p).map_err(|e| PipelineError::io(&p, e))
    }
}

struct Section {
    root: PathBuf,
    dir: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Section {
    fn input(&mut self, rel: &str) -> Result<Vec<u8>> {
        let bytes = RunDir::new(&self.root).read(rel)?;
        self.inputs.insert(rel.into(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| PipelineError::io(&p, e))?;
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn finish(self, cfg: &RunConfig) -> Result<Manifest> {
        let m = Manifest {
            command: self.command,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let p = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        fs::write(&p, bytes).map_err(|e| PipelineError::io(&p, e))?;
        Ok(m)
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| PipelineError::Policy(e.to_string()))
}

fn log_bytes(log: &EpisodeLog) -> Result<Vec<u8>> {
    Ok(log.to_csv_string()?.into_bytes())
}

// ---------------------------------------------------------------- gen-data

pub struct GenDataOutcome {
    pub summary: CohortSummary,
    pub personal_summary: CohortSummary,
    pub manifest: Manifest,
}

/// Simulate the training cohort and the personalization cohort under the
/// behavior policy and save their datasets, logs and summaries.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<GenDataOutcome> {
    cfg.validate()?;
    let mut s = run.section("data", "gen-data")?;
    log::info!("simulating {} patients x {} days", cfg.cohort.n_patients, cfg.cohort.days);
    let logs = behavior_logs(cfg, &cfg.cohort)?;
    let ds = build_dataset(cfg, &cfg.cohort, &logs)?;
    let eval = build_eval_dataset(cfg, &cfg.cohort, &logs)?;
    let summary = summarize(&logs, &ds)?;
    for log in &logs {
        let id = log.meta.patient_id;
        s.write(&format!("logs/patient_{id}.csv"), &log_bytes(log)?)?;
        s.write(&format!("logs/patient_{id}.json"), log.sidecar_json()?.as_bytes())?;
    }
    s.write("dataset.bin", &ds.to_bytes()?)?;
    s.write("dataset_eval.bin", &eval.to_bytes()?)?;
    s.write_json("cohort_summary.json", &summary)?;

    let pc = &cfg.personalization.cohort;
    let plogs = behavior_logs(cfg, pc)?;
    let pds = build_dataset(cfg, pc, &plogs)?;
    let peval = build_eval_dataset(cfg, pc, &plogs)?;
    let personal_summary = summarize(&plogs, &pds)?;
    s.write("personal_dataset.bin", &pds.to_bytes()?)?;
    s.write("personal_dataset_eval.bin", &peval.to_bytes()?)?;
    s.write_json("personal_cohort_summary.json", &personal_summary)?;
    let manifest = s.finish(cfg)?;
    Ok(GenDataOutcome {
        summary,
        personal_summary,
        manifest,
    })
}

fn load_dataset(s: &mut Section, rel: &str) -> Result<Dataset> {
    Ok(Dataset::from_bytes(&s.input(rel)?)?)
}

// ---------------------------------------------------------------- train

pub fn policy_path(algorithm: Algorithm) -> String {
    format!("train/{}/policy.bin", algorithm.tag())
}

pub struct TrainCmdOutcome {
    pub artifact: PolicyArtifact,
    pub manifest: Manifest,
}

/// Train the population model with `algorithm` on the full training dataset.
pub fn train_population(cfg: &RunConfig, run: &RunDir, algorithm: Algorithm) -> Result<TrainCmdOutcome> {
    cfg.validate()?;
    let mut s = run.section(&format!("train/{}", algorithm.tag()), "train")?;
    let ds = load_dataset(&mut s, DATASET)?;
    let mut c = cfg.agent.clone();
    c.algorithm = algorithm;
    let data = Transitions::from_dataset(&ds, c.reward)?;
    let norm = Normalizer::fit_states(&ds.states, &ds.config.features, ds.content_hash())?;
    log::info!("training {algorithm} on {} transitions for {} steps", data.len(), cfg.agent.steps);
    let mut checkpoints = Vec::new();
    let out = train(&data, c, norm, Some(ds.config.features), &mut |a| {
        checkpoints.push((a.steps, a.to_bytes()?));
        Ok(())
    })?;
    for (step, bytes) in &checkpoints {
        s.write(&format!("checkpoints/step_{step:08}.bin"), bytes)?;
    }
    s.write("policy.bin", &out.artifact.to_bytes()?)?;
    let curve = run.path(&format!("train/{}/curve.csv", algorithm.tag()));
    write_curve(&curve, &out.curve)?;
    let bytes = fs::read(&curve).map_err(|e| PipelineError::io(&curve, e))?;
    s.outputs.insert("curve.csv".into(), sha256_hex(&bytes));
    let manifest = s.finish(cfg)?;
    Ok(TrainCmdOutcome {
        artifact: out.artifact,
        manifest,
    })
}

fn load_policy(s: &mut Section, algorithm: Algorithm) -> Result<PolicyArtifact> {
    Ok(PolicyArtifact::from_bytes(&s.input(&policy_path(algorithm))?)?)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenario: String,
    pub behavior: MetricRow,
    pub policy: MetricRow,
    pub delta_tir: f64,
    pub delta_mean_glycemia: f64,
    /// Patients on which the policy's TIR is at least the behavior policy's.
    pub patients_at_least_behavior: usize,
    pub n_patients: usize,
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow<'a> {
    patient: u32,
    policy: &'a str,
    day: u32,
    minute_of_day: u32,
    glycemia: f64,
}

pub struct EvalCmdOutcome {
    pub summary: EvalSummary,
    pub rows: Vec<MetricRow>,
    pub manifest: Manifest,
}

pub fn eval_label(algorithm: Algorithm, cfg: &RunConfig) -> String {
    format!("{}_{}", algorithm.tag(), cfg.scenario.tag())
}

/// Paired in-silico evaluation of the behavior policy and the trained
/// population model under the configured scenario.
pub fn eval_insilico(cfg: &RunConfig, run: &RunDir, algorithm: Algorithm) -> Result<EvalCmdOutcome> {
    cfg.validate()?;
    let label = eval_label(algorithm, cfg);
    let mut s = run.section(&format!("eval/{label}"), "eval")?;
    let policy = load_policy(&mut s, algorithm)?;
    let features = policy
        .features
        .ok_or_else(|| PipelineError::Policy("policy artifact has no feature config".into()))?;
    let b = evaluate_cohort(cfg, &cfg.cohort, Candidate::Behavior, &cfg.scenario)?;
    let p = evaluate_cohort(cfg, &cfg.cohort, Candidate::Learned { policy: &policy, features }, &cfg.scenario)?;
    let mut rows = b.rows.clone();
    let mut named = p.rows.clone();
    for r in &mut named {
        r.policy = algorithm.tag().into();
    }
    rows.extend(named.iter().cloned());
    let (mb, mut mp) = (
        mean_row(&b.rows).expect("non-empty cohort"),
        mean_row(&named).expect("non-empty cohort"),
    );
    mp.policy = algorithm.tag().into();
    let summary = EvalSummary {
        scenario: cfg.scenario.tag(),
        delta_tir: mp.tir - mb.tir,
        delta_mean_glycemia: mp.mean_glycemia - mb.mean_glycemia,
        patients_at_least_behavior: b.rows.iter().zip(&p.rows).filter(|(x, y)| y.tir >= x.tir).count(),
        n_patients: b.rows.len(),
        behavior: mb,
        policy: mp,
    };
    let mut traces = Vec::new();
    for (name, logs) in [("behavior", &b.logs), (algorithm.tag(), &p.logs)] {
        for log in logs.iter() {
            for r in &log.records {
                traces.push(TraceRow {
                    patient: log.meta.patient_id,
                    policy: name,
                    day: r.day,
                    minute_of_day: r.minute_of_day(),
                    glycemia: r.cgm,
                });
            }
        }
    }
    s.write("metrics.csv", &csv_bytes(&rows)?)?;
    s.write("traces.csv", &csv_bytes(&traces)?)?;
    s.write_json("summary.json", &summary)?;
    let manifest = s.finish(cfg)?;
    Ok(EvalCmdOutcome { summary, rows, manifest })
}

// ---------------------------------------------------------------- fqe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeRow {
    pub candidate: String,
    pub record: EstimateRecord,
    /// Quantiles (5, 25, 50, 75, 95 %) of the per-state read-out.
    pub quantiles: [f64; 5],
}

pub struct FqeCmdOutcome {
    pub rows: Vec<FqeRow>,
    pub manifest: Manifest,
}

fn quantiles(v: &[f64]) -> [f64; 5] {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
    [q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)]
}

/// FQE of the behavior policy (logged actions) and the trained model on the
/// held-out last chronological segment, for the training reward and
/// TIR/TBR/TAR.
pub fn fqe_cmd(cfg: &RunConfig, run: &RunDir, algorithm: Algorithm) -> Result<FqeCmdOutcome> {
    cfg.validate()?;
    let mut s = run.section(&format!("fqe/{}", algorithm.tag()), "fqe")?;
    let eval = load_dataset(&mut s, DATASET_EVAL)?;
    let policy = load_policy(&mut s, algorithm)?;
    let (parts, _) = eval.chronological_split(&cfg.split)?;
    let test = &parts[TEST_SEGMENT];
    let fallback = PolicyArtifact::constant(glyrl_agents::MAX_RATE, policy.normalizer.clone(), policy.features)?;
    let logged = LoggedPolicy::new(test, &fallback);
    let learned = BolusOverride::new(&policy, test);
    let kinds: Vec<RewardKind> = std::iter::once(policy.config.reward).chain(METRIC_KINDS).collect();
    let fcfg = glyrl_agents::FqeConfig {
        seed: cfg.derive_seed("fqe"),
        ..cfg.fqe.clone()
    };
    log::info!("FQE on {} held-out transitions", test.len());
    let mut rows = Vec::new();
    for (name, p) in [("behavior", &logged as &dyn glyrl_agents::Policy), (algorithm.tag(), &learned)] {
        for (m, model) in fqe_estimates(p, test, test, &kinds, &fcfg)? {
            let est = glyrl_agents::estimate_metric(&model, &test.states, p)?;
            rows.push(FqeRow {
                candidate: name.into(),
                record: m.record,
                quantiles: quantiles(&est.per_state),
            });
        }
    }
    s.write_json("estimates.json", &rows.iter().map(|r| &r.record).collect::<Vec<_>>())?;
    s.write_json("fqe_rows.json", &rows)?;
    let manifest = s.finish(cfg)?;
    Ok(FqeCmdOutcome { rows, manifest })
}

// ---------------------------------------------------------------- personalize

pub struct PersonalizeCmdOutcome {
    pub report: PersonalizationReport,
    pub manifest: Manifest,
}

pub fn personalize_cmd(cfg: &RunConfig, run: &RunDir, algorithm: Algorithm) -> Result<PersonalizeCmdOutcome> {
    cfg.validate()?;
    let mut s = run.section("personalize", "personalize")?;
    let population = load_policy(&mut s, algorithm)?;
    let train_ds = load_dataset(&mut s, PERSONAL_DATASET)?;
    let eval_ds = load_dataset(&mut s, PERSONAL_DATASET_EVAL)?;
    let segments = PatientSegments::split_cohort(&train_ds, &eval_ds, &cfg.split)?;
    log::info!("personalizing {} patients", segments.len());
    let audit = AuditLog::new();
    let out = personalize(cfg, &population, &segments, &audit)?;
    for (id, model) in &out.models {
        s.write(&format!("models/patient_{id}.bin"), &model.to_bytes()?)?;
    }
    s.write_json("report.json", &out.report)?;
    s.write_json("audit.json", &out.report.audit)?;
    let csv_path = run.path("personalize/report.csv");
    out.report.write_csv(&csv_path)?;
    let bytes = fs::read(&csv_path).map_err(|e| PipelineError::io(&csv_path, e))?;
    s.outputs.insert("report.csv".into(), sha256_hex(&bytes));
    let manifest = s.finish(cfg)?;
    Ok(PersonalizeCmdOutcome {
        report: out.report,
        manifest,
    })
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub correlation_days: usize,
    pub tir_indicator_vs_tir: Option<f64>,
    pub tbr_indicator_vs_tbr: Option<f64>,
    /// Personalized-minus-population mean rate below / above 200 mg/dL.
    pub basal_delta_below_200: Option<f64>,
    pub basal_delta_above_200: Option<f64>,
    pub missing: Vec<String>,
}

pub struct AnalyzeCmdOutcome {
    pub summary: AnalyzeSummary,
    pub basal: Option<BasalComparison>,
    pub manifest: Manifest,
}

/// The reward/metric correlation matrix, and, when personalized models exist,
/// the basal-vs-future comparison of personalized and population models on
/// each patient's test segment.
pub fn analyze_cmd(cfg: &RunConfig, run: &RunDir, algorithm: Algorithm) -> Result<AnalyzeCmdOutcome> {
    cfg.validate()?;
    let mut s = run.section("analyze", "analyze")?;
    let (n_days, table) = correlation_matrix(cfg)?;
    s.write("correlation.csv", table.to_csv().as_bytes())?;
    s.write_json("correlation.json", &table)?;
    let mut summary = AnalyzeSummary {
        correlation_days: n_days,
        tir_indicator_vs_tir: table.get(RewardKind::TirIndicator, "tir"),
        tbr_indicator_vs_tbr: table.get(RewardKind::TbrIndicator, "tbr"),
        basal_delta_below_200: None,
        basal_delta_above_200: None,
        missing: Vec::new(),
    };
    let mut basal = None;
    if run.exists("personalize/report.json") && run.exists(&policy_path(algorithm)) {
        let population = load_policy(&mut s, algorithm)?;
        let report: PersonalizationReport = serde_json::from_slice(&s.input("personalize/report.json")?)?;
        let train_ds = load_dataset(&mut s, PERSONAL_DATASET)?;
        let eval_ds = load_dataset(&mut s, PERSONAL_DATASET_EVAL)?;
        let mut bins = BasalBins::new(&cfg.analysis);
        for p in report.evaluated() {
            let model = PolicyArtifact::from_bytes(&s.input(&format!("personalize/models/patient_{}.bin", p.patient))?)?;
            let seg = PatientSegments::new(p.patient, &train_ds, &eval_ds, &cfg.split)?;
            let audit = AuditLog::new();
            audit.begin_reporting();
            bins.add_dataset(seg.eval_segment(TEST_SEGMENT, "basal analysis", &audit)?, &population, &model)?;
        }
        let cmp = bins.finish("population".into(), "personalized".into());
        let (below, above) = cmp.mean_delta_split(200.0);
        summary.basal_delta_below_200 = below;
        summary.basal_delta_above_200 = above;
        s.write("basal_vs_future.csv", cmp.to_csv().as_bytes())?;
        s.write_json("basal_vs_future.json", &cmp)?;
        basal = Some(cmp);
    } else {
        summary.missing.push("basal_vs_future (needs train and personalize outputs)".into());
    }
    s.write_json("summary.json", &summary)?;
    let manifest = s.finish(cfg)?;
    Ok(AnalyzeCmdOutcome { summary, basal, manifest })
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub sections: Vec<String>,
    pub missing: Vec<String>,
}

fn list_dirs(p: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(p)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Option<T> {
    serde_json::from_slice(&fs::read(p).ok()?).ok()
}

/// Merge everything present in the run directory into `report/report.md`
/// and machine-readable tables. Missing sections are listed, not fatal.
/// Regeneration is idempotent: the output depends only on the inputs.
pub fn report_cmd(run: &RunDir) -> Result<ReportOutcome> {
    let dir = run.path("report");
    fs::create_dir_all(dir.join("tables")).map_err(|e| PipelineError::io(&dir, e))?;
    let mut md = String::from("# Run report\n\n");
    let mut sections = Vec::new();
    let mut missing = Vec::new();
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| PipelineError::io(&p, e))
    };

    match read_json::<Manifest>(&run.path("data/manifest.json")) {
        Some(m) => {
            md.push_str(&format!("Config hash `{}`, master seed {}.\n\n", m.config_hash, m.config.seed));
        }
        None => md.push_str("No data manifest; config unknown.\n\n"),
    }

    md.push_str("## Cohort\n\n");
    match read_json::<CohortSummary>(&run.path("data/cohort_summary.json")) {
        Some(c) => {
            sections.push("cohort".to_string());
            md.push_str(&format!("{c}\n\n"));
        }
        None => {
            missing.push("cohort".to_string());
            md.push_str("MISSING: run `gen-data`.\n\n");
        }
    }

    md.push_str("## In-silico evaluation\n\n");
    let evals = list_dirs(&run.path("eval"));
    let mut all_rows: Vec<MetricRow> = Vec::new();
    if evals.is_empty() {
        missing.push("eval".to_string());
        md.push_str("MISSING: run `eval`.\n\n");
    } else {
        sections.push("eval".to_string());
        md.push_str("| run | scenario | behavior TIR | policy TIR | ΔTIR | behavior mean | policy mean | Δmean | patients ≥ behavior |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for e in &evals {
            if let Some(s) = read_json::<EvalSummary>(&run.path(&format!("eval/{e}/summary.json"))) {
                md.push_str(&format!(
                    "| {e} | {} | {:.2} | {:.2} | {:+.2} | {:.1} | {:.1} | {:+.1} | {}/{} |\n",
                    s.scenario,
                    s.behavior.tir,
                    s.policy.tir,
                    s.delta_tir,
                    s.behavior.mean_glycemia,
                    s.policy.mean_glycemia,
                    s.delta_mean_glycemia,
                    s.patients_at_least_behavior,
                    s.n_patients
                ));
            }
            if let Ok(mut r) = csv::Reader::from_path(run.path(&format!("eval/{e}/metrics.csv"))) {
                all_rows.extend(r.deserialize().filter_map(|x| x.ok()));
            }
        }
        md.push('\n');
        write("tables/metrics.csv", &csv_bytes(&all_rows)?)?;
    }

    md.push_str("## FQE estimates\n\n");
    let fqes = list_dirs(&run.path("fqe"));
    let mut fqe_rows: Vec<(String, FqeRow)> = Vec::new();
    for f in &fqes {
        if let Some(rows) = read_json::<Vec<FqeRow>>(&run.path(&format!("fqe/{f}/fqe_rows.json"))) {
            fqe_rows.extend(rows.into_iter().map(|r| (f.clone(), r)));
        }
    }
    if fqe_rows.is_empty() {
        missing.push("fqe".to_string());
        md.push_str("MISSING: run `fqe`.\n\n");
    } else {
        sections.push("fqe".to_string());
        md.push_str("| run | candidate | metric | estimate | p5 | p50 | p95 | states |\n|---|---|---|---|---|---|---|---|\n");
        let mut flat = Vec::new();
        for (run_name, r) in &fqe_rows {
            md.push_str(&format!(
                "| {run_name} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
                r.candidate, r.record.metric, r.record.estimate, r.quantiles[0], r.quantiles[2], r.quantiles[4], r.record.n_states
            ));
            flat.push(serde_json::json!({
                "run": run_name, "candidate": r.candidate, "metric": r.record.metric,
                "estimate": r.record.estimate, "n_states": r.record.n_states,
                "policy_hash": r.record.policy_hash, "dataset_id": r.record.dataset_id,
            }));
        }
        md.push('\n');
        let mut bytes = serde_json::to_vec_pretty(&flat)?;
        bytes.push(b'\n');
        write("tables/fqe.json", &bytes)?;
    }

    md.push_str("## Personalization\n\n");
    match read_json::<PersonalizationReport>(&run.path("personalize/report.json")) {
        Some(r) => {
            sections.push("personalization".to_string());
            let (m, u) = r.improved();
            let n = r.evaluated().count();
            md.push_str(&format!(
                "Reward `{}`. Personalized reward estimate above the population model's: {m}/{n} (patient FQE), {u}/{n} (population FQE on the union of second segments).\n\n",
                r.reward.tag()
            ));
            md.push_str("| patient | selected step | Δreward | ΔTIR | ΔTBR | ΔTAR | Δreward (union) | skipped |\n|---|---|---|---|---|---|---|---|\n");
            for p in &r.patients {
                let d = p.delta_matched();
                md.push_str(&format!(
                    "| {} | {} | {:+.4} | {:+.2} | {:+.2} | {:+.2} | {:+.4} | {} |\n",
                    p.patient,
                    p.selected_step.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                    d.reward,
                    d.tir,
                    d.tbr,
                    d.tar,
                    p.delta_union().reward,
                    p.skipped.clone().unwrap_or_default()
                ));
            }
            let late = r.audit.iter().filter(|a| a.segment == TEST_SEGMENT).all(|a| a.phase == crate::personalize::Phase::Reporting);
            md.push_str(&format!("\nTest-segment reads only during final reporting: {late}.\n\n"));
        }
        None => {
            missing.push("personalization".to_string());
            md.push_str("MISSING: run `personalize`.\n\n");
        }
    }

    md.push_str("## Analyses\n\n");
    match read_json::<AnalyzeSummary>(&run.path("analyze/summary.json")) {
        Some(a) => {
            sections.push("analysis".to_string());
            let f = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
            md.push_str(&format!(
                "Correlation corpus: {} patient-days. corr(tir_indicator, TIR) = {}, corr(tbr_indicator, TBR) = {}.\n\n",
                a.correlation_days,
                f(a.tir_indicator_vs_tir),
                f(a.tbr_indicator_vs_tbr)
            ));
            if let Ok(c) = fs::read_to_string(run.path("analyze/correlation.csv")) {
                write("tables/correlation.csv", c.as_bytes())?;
                md.push_str("```\n");
                md.push_str(&c);
                md.push_str("```\n\n");
            }
            match fs::read_to_string(run.path("analyze/basal_vs_future.csv")) {
                Ok(c) => {
                    write("tables/basal_vs_future.csv", c.as_bytes())?;
                    md.push_str(&format!(
                        "Personalized − population rate: {} U/h below 200 mg/dL, {} U/h above.\n\n```\n{c}```\n\n",
                        f(a.basal_delta_below_200),
                        f(a.basal_delta_above_200)
                    ));
                }
                Err(_) => {
                    missing.push("basal_vs_future".to_string());
                    md.push_str("MISSING: basal-vs-future comparison (run `personalize`, then `analyze`).\n\n");
                }
            }
        }
        None => {
            missing.push("analysis".to_string());
            md.push_str("MISSING: run `analyze`.\n\n");
        }
    }

    if !missing.is_empty() {
        md.push_str(&format!("## Missing sections\n\n{}\n", missing.iter().map(|m| format!("- {m}\n")).collect::<String>()));
    }
    write("report.md", md.as_bytes())?;
    let outcome = ReportOutcome { sections, missing };
    let mut bytes = serde_json::to_vec_pretty(&outcome)?;
    bytes.push(b'\n');
    write("sections.json", &bytes)?;
    Ok(outcome)
}
