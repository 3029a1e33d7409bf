//! Run configuration, the per-seed training and evaluation schedule, artifact
//! files, and the report and probe commands built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::action_repr::{self, collect_transitions, EncoderDecoder, ReprConfig, UniformExploration};
use crate::agent::{
    self, A2CConfig, AaclAgent, AaclConfig, ActorCritic, LogRecord, OutputHead, TaskReport, TrainHooks,
};
use crate::baselines::{BaselineAgent, BaselineConfig, BaselineKind};
use crate::envs::{self, build_sequence, Budgets, Family, GoalRule, GridConfig, Situation, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, PerfMatrix, SeedMetrics, Summary};
use crate::{io, rng};

/// Environment variable that replaces the configured output root.
pub const OUT_ENV: &str = "CLDC_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aacl,
    AaclO,
    AaclE,
    AaclOe,
    Ind,
    Ft,
    Ewc,
    OnlineEwc,
    ReplayBc,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Aacl => "AACL",
            Method::AaclO => "AACL-O",
            Method::AaclE => "AACL-E",
            Method::AaclOe => "AACL-OE",
            Method::Ind => "IND",
            Method::Ft => "FT",
            Method::Ewc => "EWC",
            Method::OnlineEwc => "onlineEWC",
            Method::ReplayBc => "replayBC",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Aacl => "aacl",
            Method::AaclO => "aacl_o",
            Method::AaclE => "aacl_e",
            Method::AaclOe => "aacl_oe",
            Method::Ind => "ind",
            Method::Ft => "ft",
            Method::Ewc => "ewc",
            Method::OnlineEwc => "online_ewc",
            Method::ReplayBc => "replay_bc",
        }
    }

    fn anchor_target(self) -> Option<action_repr::AnchorTarget> {
        use action_repr::AnchorTarget as T;
        match self {
            Method::Aacl => Some(T::Decoder),
            Method::AaclO => Some(T::None),
            Method::AaclE => Some(T::Both),
            Method::AaclOe => Some(T::Encoder),
            _ => None,
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Ind => Some(BaselineKind::Ind),
            Method::Ft => Some(BaselineKind::Ft),
            Method::Ewc => Some(BaselineKind::Ewc),
            Method::OnlineEwc => Some(BaselineKind::OnlineEwc),
            Method::ReplayBc => Some(BaselineKind::ReplayBc),
            _ => None,
        }
    }

    pub fn has_transfer(self) -> bool {
        self != Method::Ind
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub situation: Situation,
    pub family: Family,
    pub width: usize,
    pub height: usize,
    /// Per-task budgets; the last value repeats. Empty means the family default.
    pub steps_per_task: Vec<u64>,
    pub max_steps: Option<u32>,
    pub goal_rule: Option<GoalRule>,
    /// Action-name lists, one per task, for the custom situation.
    pub custom_tasks: Option<Vec<Vec<String>>>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            situation: Situation::Expansion,
            family: Family::Oriented,
            width: 8,
            height: 8,
            steps_per_task: Vec::new(),
            max_steps: None,
            goal_rule: None,
            custom_tasks: None,
        }
    }
}

pub fn default_steps(family: Family) -> u64 {
    match family {
        Family::Oriented => 150_000,
        Family::Omni => 300_000,
    }
}

impl SequenceConfig {
    pub fn grid(&self) -> GridConfig {
        let mut g = GridConfig::new(self.width, self.height, self.family);
        if let Some(h) = self.max_steps {
            g.max_steps = h;
        }
        if let Some(r) = self.goal_rule {
            g.goal_rule = r;
        }
        g
    }

    pub fn build(&self, seed: u64) -> Result<envs::SequenceSpec> {
        build_sequence(
            self.situation,
            self.family,
            self.grid(),
            &Budgets(self.steps_per_task.clone()),
            seed,
            self.custom_tasks.as_deref(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub interval: u64,
    pub episodes: usize,
    /// Transitions encoded for each embeddings dump.
    pub probe_transitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { interval: 10_000, episodes: 10, probe_transitions: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub sequence: SequenceConfig,
    pub eval: EvalConfig,
    pub a2c: A2CConfig,
    pub repr: ReprConfig,
    pub aacl: AaclConfig,
    pub baseline: BaselineConfig,
    pub output_dir: String,
    /// Run directory name under the output root; derived from method and
    /// sequence when absent.
    pub name: Option<String>,
    /// Save the encoder-decoder after every task (needed by `probe`).
    pub snapshots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Aacl,
            seeds: vec![0],
            sequence: SequenceConfig::default(),
            eval: EvalConfig::default(),
            a2c: A2CConfig::default(),
            repr: ReprConfig::default(),
            aacl: AaclConfig::default(),
            baseline: BaselineConfig::default(),
            output_dir: "runs".into(),
            name: None,
            snapshots: true,
        }
    }
}

impl RunConfig {
    /// Fills every value left to a default so the snapshot is self-contained.
    pub fn resolved(mut self) -> Self {
        if self.sequence.steps_per_task.is_empty() {
            self.sequence.steps_per_task = vec![default_steps(self.sequence.family)];
        }
        let grid = self.sequence.grid();
        self.sequence.max_steps = Some(grid.max_steps);
        self.sequence.goal_rule = Some(grid.goal_rule);
        if self.name.is_none() {
            self.name = Some(format!(
                "{}_{}_{}",
                self.method.as_str(),
                self.sequence.situation.as_str(),
                family_str(self.sequence.family)
            ));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sequence;
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.eval.interval == 0 {
            return Err(Error::Config("`eval.interval` must be >= 1".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("`eval.episodes` must be >= 1".into()));
        }
        if s.width < 2 || s.height < 2 {
            return Err(Error::Config("`sequence.width` and `sequence.height` must be >= 2".into()));
        }
        if s.max_steps == Some(0) {
            return Err(Error::Config("`sequence.max_steps` must be >= 1".into()));
        }
        if s.situation == Situation::Custom && s.custom_tasks.is_none() {
            return Err(Error::Config("`sequence.custom_tasks` is required for the custom situation".into()));
        }
        if self.repr.dim == 0 || self.repr.batch_size == 0 {
            return Err(Error::Config("`repr.dim` and `repr.batch_size` must be >= 1".into()));
        }
        if self.aacl.lambda < 0.0 {
            return Err(Error::Config("`aacl.lambda` must be >= 0".into()));
        }
        if self.method.anchor_target().is_some() && self.aacl.exploration_steps == 0 {
            return Err(Error::Config("`aacl.exploration_steps` must be >= 1".into()));
        }
        self.a2c.validate()?;
        self.baseline.validate()?;
        s.build(self.seeds[0]).map(|_| ())
    }

    /// Identity of the task sequence, used to refuse mixing runs in a report.
    pub fn sequence_key(&self) -> String {
        let s = &self.sequence;
        format!(
            "{} {} {}x{} H={:?} goal={:?} steps={:?} custom={:?}",
            s.situation.as_str(),
            family_str(s.family),
            s.width,
            s.height,
            s.max_steps,
            s.goal_rule,
            s.steps_per_task,
            s.custom_tasks
        )
    }
}

fn family_str(f: Family) -> &'static str {
    match f {
        Family::Oriented => "oriented",
        Family::Omni => "omni",
    }
}

fn json_error_message(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.find(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}

/// Line of the first occurrence of `"key"` in the config text.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(Error::Config(format!("override `{key}` is empty")))
}

/// Defaults, then the file, then `key=value` overrides (values parsed as JSON,
/// falling back to a plain string). The result is resolved and validated.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let (text, origin) = match path {
        Some(p) => (io::read_to_string(p)?, p.display().to_string()),
        None => ("{}".to_string(), "<defaults>".to_string()),
    };
    let base: RunConfig = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("{origin}:{}:{}: {}", e.line(), e.column(), json_error_message(&e)))
    })?;
    let mut value = serde_json::to_value(&base).map_err(|e| Error::Internal(e.to_string()))?;
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_dotted(&mut value, k.trim(), parsed)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("overrides {overrides:?}: {}", json_error_message(&e))))?;
    let cfg = cfg.resolved();
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => {
            let key = msg.split('`').nth(1).and_then(|k| k.rsplit('.').next()).unwrap_or("");
            match key_line(&text, key) {
                Some(line) if !key.is_empty() => Error::Config(format!("{origin}:{line}: {msg}")),
                _ => Error::Config(format!("{origin}: {msg}")),
            }
        }
        other => other,
    })?;
    Ok(cfg)
}

/// One method's agent behind a common interface.
pub enum Learner {
    Aacl(Box<AaclAgent>),
    Baseline(Box<BaselineAgent>),
}

impl Learner {
    pub fn new(cfg: &RunConfig, obs_len: usize, catalog_len: usize, seed: u64) -> Self {
        match (cfg.method.anchor_target(), cfg.method.baseline()) {
            (Some(target), _) => {
                let aacl = AaclConfig { anchor_target: target, ..cfg.aacl.clone() };
                Learner::Aacl(Box::new(AaclAgent::new(
                    obs_len,
                    catalog_len,
                    cfg.repr.clone(),
                    cfg.a2c.clone(),
                    aacl,
                    seed,
                )))
            }
            (None, Some(kind)) => Learner::Baseline(Box::new(BaselineAgent::new(
                kind,
                obs_len,
                catalog_len,
                cfg.a2c.clone(),
                cfg.baseline.clone(),
                seed,
            ))),
            (None, None) => unreachable!("every method is either a representation agent or a baseline"),
        }
    }

    pub fn run_task(&mut self, task: &TaskSpec, offset: u64, hooks: &mut dyn TrainHooks) -> Result<Option<TaskReport>> {
        match self {
            Learner::Aacl(a) => a.run_task(task, offset, hooks).map(Some),
            Learner::Baseline(b) => b.run_task(task, offset, hooks).map(|_| None),
        }
    }

    pub fn evaluate(&self, task: &TaskSpec, episodes: usize, seed: u64) -> Result<f64> {
        match self {
            Learner::Aacl(a) => a.evaluate(task, episodes, seed),
            Learner::Baseline(b) => b.evaluate(task, episodes, seed),
        }
    }

    pub fn encoder_decoder(&self) -> Option<&EncoderDecoder> {
        match self {
            Learner::Aacl(a) => Some(&a.encdec),
            Learner::Baseline(_) => None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header { trainer: String, method: String, seed: u64, sequence: String },
    Representation { task_index: usize, transitions: usize, initial_loss: f64, final_loss: f64, anchors: usize },
    Train(LogRecord),
}

pub const PERF_HEADER: &str = "seed,trained_after_task,eval_task,mean_return,global_step,kind";

fn perf_line(seed: u64, after: usize, task: usize, value: f64, step: u64, kind: &str) -> String {
    format!("{seed},{after},{task},{value},{step},{kind}")
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("log records serialize")
}

struct Recorder<'a> {
    seed: u64,
    eval_seed: u64,
    tasks: &'a [TaskSpec],
    eval: &'a EvalConfig,
    training: usize,
    offset: u64,
    perf: Vec<String>,
    log: Vec<String>,
}

impl TrainHooks for Recorder<'_> {
    fn on_log(&mut self, record: LogRecord) -> Result<()> {
        self.log.push(json_line(&LogLine::Train(record)));
        Ok(())
    }

    fn on_interval(&mut self, task_step: u64, ac: &ActorCritic, head: &dyn OutputHead) -> Result<()> {
        for t in self.tasks {
            let v = agent::evaluate_policy(ac, head, t, self.eval.episodes, self.eval_seed)?;
            self.perf
                .push(perf_line(self.seed, self.training, t.index, v, self.offset + task_step, "periodic"));
        }
        Ok(())
    }

    fn interval(&self) -> u64 {
        self.eval.interval
    }
}

fn perf_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("perf_seed{seed}.csv"))
}

fn log_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("log_seed{seed}.jsonl"))
}

fn snapshot_path(dir: &Path, seed: u64, task: usize) -> PathBuf {
    dir.join(format!("encdec_seed{seed}_task{task}.json"))
}

fn probe_buffer(task: &TaskSpec, seed: u64, count: usize) -> Result<Vec<action_repr::Transition>> {
    let mut policy = UniformExploration::new(rng::substream(seed, "probe", task.index as u64));
    collect_transitions(task, &mut policy, count, rng::derive_seed(seed, "probe-env", task.index as u64))
}

/// Trains one seed through the whole sequence, writing its matrix and log
/// even when training stops on an error.
pub fn run_seed(cfg: &RunConfig, dir: &Path, seed: u64) -> Result<PerfMatrix> {
    let seq = cfg.sequence.build(seed)?;
    let n = seq.len();
    let first = &seq.tasks[0];
    let mut learner = Learner::new(cfg, first.obs_len(), first.catalog().len(), seed);
    let mut matrix = PerfMatrix::new(n);
    let mut rec = Recorder {
        seed,
        eval_seed: rng::derive_seed(seed, "evaluation", 0),
        tasks: &seq.tasks,
        eval: &cfg.eval,
        training: 0,
        offset: 0,
        perf: vec![PERF_HEADER.to_string()],
        log: vec![json_line(&LogLine::Header {
            trainer: agent::TRAINER_NOTE.into(),
            method: cfg.method.label().into(),
            seed,
            sequence: cfg.sequence_key(),
        })],
    };
    let outcome = (|| -> Result<()> {
        for t in &seq.tasks {
            let v = learner.evaluate(t, cfg.eval.episodes, rec.eval_seed)?;
            matrix.set(0, t.index, v)?;
            rec.perf.push(perf_line(seed, 0, t.index, v, 0, "boundary"));
        }
        for task in &seq.tasks {
            log::info!("{} seed {seed}: task {}/{n} ({} actions)", cfg.method.label(), task.index, task.space.size());
            rec.training = task.index;
            if let Some(r) = learner.run_task(task, rec.offset, &mut rec)? {
                if let Some(trace) = &r.ssl {
                    rec.log.push(json_line(&LogLine::Representation {
                        task_index: task.index,
                        transitions: r.exploration_transitions,
                        initial_loss: trace.initial,
                        final_loss: trace.last(),
                        anchors: r.anchors,
                    }));
                }
            }
            rec.offset += task.train_steps;
            for t in &seq.tasks {
                let v = learner.evaluate(t, cfg.eval.episodes, rec.eval_seed)?;
                matrix.set(task.index, t.index, v)?;
                rec.perf.push(perf_line(seed, task.index, t.index, v, rec.offset, "boundary"));
            }
            if let Some(encdec) = learner.encoder_decoder() {
                if cfg.snapshots {
                    io::write_json(&snapshot_path(dir, seed, task.index), encdec)?;
                }
                if cfg.eval.probe_transitions > 0 {
                    let probes = probe_buffer(task, seed, cfg.eval.probe_transitions)?;
                    action_repr::dump_embeddings(
                        encdec,
                        &probes,
                        &dir.join(format!("embeddings_seed{seed}_task{}.csv", task.index)),
                    )?;
                }
            }
        }
        Ok(())
    })();
    let mut perf = rec.perf.join("\n");
    perf.push('\n');
    let mut log = rec.log.join("\n");
    log.push('\n');
    io::write_atomic(&perf_path(dir, seed), perf.as_bytes())?;
    io::write_atomic(&log_path(dir, seed), log.as_bytes())?;
    outcome.map(|_| matrix)
}

pub fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: MetricReport,
}

/// Runs every configured seed (up to `jobs` at a time) and writes the
/// resolved config and the aggregated report.
pub fn run(cfg: &RunConfig, jobs: usize) -> Result<RunOutcome> {
    let dir = output_root(cfg).join(cfg.name.clone().unwrap_or_else(|| "run".into()));
    io::write_json(&dir.join("config.json"), cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PerfMatrix>>>> = Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfg.seeds.len() {
                    break;
                }
                let r = run_seed(cfg, &dir, cfg.seeds[i]);
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    let mut per_seed = Vec::new();
    let mut first_err = None;
    for (seed, r) in cfg.seeds.iter().zip(results.into_inner().expect("result slots")) {
        match r.expect("every seed ran") {
            Ok(m) => per_seed.push(SeedMetrics::compute(*seed, &m, cfg.method.has_transfer())?),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let report = MetricReport::build(cfg.method.label(), &cfg.sequence_key(), per_seed)?;
    io::write_json(&dir.join("report.json"), &report)?;
    Ok(RunOutcome { dir, report })
}

/// Boundary rows of a matrix CSV, keyed by seed.
pub fn read_perf_csv(path: &Path, n: usize) -> Result<(u64, PerfMatrix)> {
    let text = io::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PERF_HEADER) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let mut matrix = PerfMatrix::new(n);
    let mut seed = None;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("{}:{}: malformed row", path.display(), i + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        if f[5] != "boundary" {
            continue;
        }
        seed = Some(f[0].parse::<u64>().map_err(|_| bad())?);
        let after: usize = f[1].parse().map_err(|_| bad())?;
        let task: usize = f[2].parse().map_err(|_| bad())?;
        let v: f64 = f[3].parse().map_err(|_| bad())?;
        matrix.set(after, task, v)?;
    }
    let seed = seed.ok_or_else(|| Error::Data(format!("{}: no boundary rows", path.display())))?;
    Ok((seed, matrix))
}

fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("config.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no run directories under {}", root.display())));
    }
    Ok(dirs)
}

/// Aggregated Return/Forgetting/Transfer table over a directory of runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub sequence: String,
    pub rows: Vec<MetricReport>,
    pub matrices: usize,
}

fn cell(s: Option<&Summary>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.ci95),
        None => "--".into(),
    }
}

impl ReportTable {
    pub fn text(&self) -> String {
        let mut out = format!("sequence: {}\n", self.sequence);
        let _ = writeln!(out, "{:<10} {:>4}  {:<16} {:<16} {:<16}", "method", "n", "Return", "Forgetting", "Transfer");
        for r in &self.rows {
            let flag = if r.continual_return.single { " (n=1)" } else { "" };
            let _ = writeln!(
                out,
                "{:<10} {:>4}  {:<16} {:<16} {:<16}{flag}",
                r.method,
                r.continual_return.n,
                cell(Some(&r.continual_return)),
                cell(r.forgetting.as_ref()),
                cell(r.forward_transfer.as_ref()),
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("method,n,return_mean,return_ci95,forgetting_mean,forgetting_ci95,transfer_mean,transfer_ci95\n");
        let pair = |s: Option<&Summary>| match s {
            Some(s) => format!("{},{}", s.mean, s.ci95),
            None => "--,--".into(),
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method,
                r.continual_return.n,
                pair(Some(&r.continual_return)),
                pair(r.forgetting.as_ref()),
                pair(r.forward_transfer.as_ref())
            );
        }
        out
    }
}

/// Reads every run under `root`, refuses mixed sequences, and writes
/// `report.csv` and `report.txt` next to them.
pub fn report(root: &Path) -> Result<ReportTable> {
    let mut by_method: BTreeMap<Method, Vec<SeedMetrics>> = BTreeMap::new();
    let mut keys: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut matrices = 0;
    for dir in run_dirs(root)? {
        let cfg: RunConfig = serde_json::from_str(&io::read_to_string(&dir.join("config.json"))?)
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("config.json").display())))?;
        keys.entry(cfg.sequence_key()).or_default().push(dir.display().to_string());
        let n = cfg.sequence.build(cfg.seeds[0])?.len();
        for seed in &cfg.seeds {
            let path = perf_path(&dir, *seed);
            if !path.is_file() {
                continue;
            }
            let (s, m) = read_perf_csv(&path, n)?;
            if !m.is_complete() {
                log::warn!("{}: incomplete matrix skipped", path.display());
                continue;
            }
            by_method.entry(cfg.method).or_default().push(SeedMetrics::compute(s, &m, cfg.method.has_transfer())?);
            matrices += 1;
        }
    }
    if keys.len() > 1 {
        let mut msg = String::from("runs use different task sequences:");
        for (k, dirs) in &keys {
            let _ = write!(msg, "\n  [{k}] {}", dirs.join(", "));
        }
        return Err(Error::Data(msg));
    }
    let sequence = keys.into_keys().next().unwrap_or_default();
    let rows = by_method
        .into_iter()
        .map(|(m, seeds)| MetricReport::build(m.label(), &sequence, seeds))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("no complete performance matrices under {}", root.display())));
    }
    let table = ReportTable { sequence, rows, matrices };
    io::write_atomic(&root.join("report.csv"), table.csv().as_bytes())?;
    io::write_atomic(&root.join("report.txt"), table.text().as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub seed: u64,
    pub task: usize,
    pub transitions: usize,
    pub unambiguous: usize,
    pub overall: f64,
    /// Absent when no probe transition has a unique explaining action.
    pub unambiguous_only: Option<f64>,
}

/// Re-encodes a fresh probe buffer with the encoder-decoder saved after
/// `task` and scores its action predictions.
pub fn probe(run_dir: &Path, task: usize, seed: Option<u64>, transitions: usize) -> Result<ProbeSummary> {
    let cfg: RunConfig = serde_json::from_str(&io::read_to_string(&run_dir.join("config.json"))?)
        .map_err(|e| Error::Data(format!("config.json: {e}")))?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let snap = snapshot_path(run_dir, seed, task);
    if !snap.is_file() {
        return Err(Error::Data(format!("no saved encoder-decoder at {}", snap.display())));
    }
    let encdec: EncoderDecoder = serde_json::from_str(&io::read_to_string(&snap)?)
        .map_err(|e| Error::Data(format!("{}: {e}", snap.display())))?;
    let seq = cfg.sequence.build(seed)?;
    let spec = seq
        .tasks
        .get(task.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("task {task} outside 1..={}", seq.len())))?;
    if transitions == 0 {
        return Err(Error::Data("probe buffer is empty".into()));
    }
    let buffer = probe_buffer(spec, seed, transitions)?;
    let summary = score_probe(&encdec, spec, &buffer, seed)?;
    action_repr::dump_embeddings(&encdec, &buffer, &run_dir.join(format!("probe_seed{seed}_task{task}.csv")))?;
    io::write_json(&run_dir.join(format!("probe_seed{seed}_task{task}.json")), &summary)?;
    Ok(summary)
}

/// Decode accuracy over all transitions and over those whose action is the
/// only one producing the observed change.
pub fn score_probe(
    encdec: &EncoderDecoder,
    task: &TaskSpec,
    buffer: &[action_repr::Transition],
    seed: u64,
) -> Result<ProbeSummary> {
    if buffer.is_empty() {
        return Err(Error::Data("probe buffer is empty".into()));
    }
    let active = &task.space.mask;
    let overall = action_repr::decode_accuracy(encdec, buffer, active)?;
    let mut unique = Vec::new();
    for t in buffer {
        if envs::actions_explaining(task, &t.s, &t.s_next)? == [t.a] {
            unique.push(t);
        }
    }
    let unambiguous_only = if unique.is_empty() {
        None
    } else {
        Some(action_repr::decode_accuracy(encdec, unique.iter().copied(), active)?)
    };
    Ok(ProbeSummary {
        seed,
        task: task.index,
        transitions: buffer.len(),
        unambiguous: unique.len(),
        overall,
        unambiguous_only,
    })
}
