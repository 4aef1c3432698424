//! Experiment configuration, multi-seed execution, aggregation, and result
//! persistence. The `clbench` binary is a thin shell over this module.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::{
    acc_metric, bwt_metric, ema_drift_probe, evaluate_task, export_activations, AccuracyMatrix,
    ClassMeans, Classifier, DriftReport,
};
use crate::model::MlpModel;
use crate::replay::ReplayBuffer;
use crate::scenario::{import_csv, make_gaussian_stream, LabeledSample, StreamConfig, TaskStream};
use crate::strategies::{Method, Strategy, StrategyConfig};

pub const EVAL_BATCH: usize = 128;
const DRIFT_PROBE_BATCHES: usize = 100;

/// Backbone shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64, 64],
        }
    }
}

/// Diagnostic toggles evaluated per seed at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProbeConfig {
    pub ema_drift: bool,
    pub export_activations: bool,
    pub save_checkpoint: bool,
}

/// Everything one experiment needs: data, backbone, strategy, buffer,
/// schedule, seeds, outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    /// When set, load the stream from this CSV instead of generating it.
    pub stream_csv: Option<PathBuf>,
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub buffer_capacity: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub probes: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: desk_stream_config(),
            stream_csv: None,
            model: ModelConfig::default(),
            strategy: StrategyConfig::default(),
            buffer_capacity: 200,
            epochs: 5,
            seeds: (1..=10).collect(),
            out_dir: None,
            probes: ProbeConfig::default(),
        }
    }
}

/// The desk-scale benchmark: 5 tasks x 2 Gaussian classes in 32 dimensions,
/// sized so a full multi-seed run of any method takes seconds.
pub fn desk_stream_config() -> StreamConfig {
    StreamConfig {
        num_tasks: 5,
        classes_per_task: 2,
        input_dim: 32,
        train_per_class: 200,
        test_per_class: 100,
        mean_spread: 3.0,
        within_scale: 1.5,
        overlap: 0.55,
        seed: 7,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.strategy.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.strategy.method.is_icarl_family()
            && self.buffer_capacity < self.stream.total_classes()
        {
            return Err(Error::Config(format!(
                "buffer capacity {} leaves no quota for {} classes",
                self.buffer_capacity,
                self.stream.total_classes()
            )));
        }
        Ok(())
    }

    /// Canonical flat key-value serialization; [`parse_config`] inverts it.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let w = &mut s;
        writeln!(w, "stream.num_tasks = {}", self.stream.num_tasks).unwrap();
        writeln!(w, "stream.classes_per_task = {}", self.stream.classes_per_task).unwrap();
        writeln!(w, "stream.input_dim = {}", self.stream.input_dim).unwrap();
        writeln!(w, "stream.train_per_class = {}", self.stream.train_per_class).unwrap();
        writeln!(w, "stream.test_per_class = {}", self.stream.test_per_class).unwrap();
        writeln!(w, "stream.mean_spread = {}", self.stream.mean_spread).unwrap();
        writeln!(w, "stream.within_scale = {}", self.stream.within_scale).unwrap();
        writeln!(w, "stream.overlap = {}", self.stream.overlap).unwrap();
        writeln!(w, "stream.seed = {}", self.stream.seed).unwrap();
        if let Some(p) = &self.stream_csv {
            writeln!(w, "stream.csv = {}", p.display()).unwrap();
        }
        writeln!(w, "model.hidden = {}", join_usize(&self.model.hidden_dims)).unwrap();
        writeln!(w, "strategy.method = {}", self.strategy.method).unwrap();
        writeln!(w, "strategy.lr = {}", self.strategy.lr).unwrap();
        writeln!(w, "strategy.batch_size = {}", self.strategy.batch_size).unwrap();
        writeln!(w, "strategy.derpp_alpha = {}", self.strategy.derpp_alpha).unwrap();
        writeln!(w, "strategy.derpp_beta = {}", self.strategy.derpp_beta).unwrap();
        writeln!(w, "strategy.icarl_weight_decay = {}", self.strategy.icarl_weight_decay).unwrap();
        writeln!(
            w,
            "strategy.bnt_param_stats = {}",
            match self.strategy.bnt_param_stats {
                crate::normalization::StatsSource::BatchMoments => "batch_moments",
                crate::normalization::StatsSource::RunningEma => "running_ema",
            }
        )
        .unwrap();
        writeln!(w, "strategy.icarl_lb_ema_update = {}", self.strategy.icarl_lb_ema_update)
            .unwrap();
        writeln!(w, "buffer.capacity = {}", self.buffer_capacity).unwrap();
        writeln!(w, "epochs = {}", self.epochs).unwrap();
        writeln!(w, "seeds = {}", join_u64(&self.seeds)).unwrap();
        if let Some(p) = &self.out_dir {
            writeln!(w, "out_dir = {}", p.display()).unwrap();
        }
        writeln!(w, "probes.ema_drift = {}", self.probes.ema_drift).unwrap();
        writeln!(w, "probes.export_activations = {}", self.probes.export_activations).unwrap();
        writeln!(w, "probes.save_checkpoint = {}", self.probes.save_checkpoint).unwrap();
        s
    }

    /// Hash of the canonical serialization with the output directory dropped
    /// and the seed list sorted, so relocation or seed reordering never
    /// changes the fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        canonical.seeds.sort_unstable();
        let digest = Sha256::digest(canonical.serialize().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_u64(v: &[u64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parse the flat `key = value` format ('#' comments, blank lines allowed).
/// Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config(format!("line {}: bad {what}: {value:?}", lineno + 1));
        match key {
            "stream.num_tasks" => cfg.stream.num_tasks = value.parse().map_err(|_| bad(key))?,
            "stream.classes_per_task" => {
                cfg.stream.classes_per_task = value.parse().map_err(|_| bad(key))?
            }
            "stream.input_dim" => cfg.stream.input_dim = value.parse().map_err(|_| bad(key))?,
            "stream.train_per_class" => {
                cfg.stream.train_per_class = value.parse().map_err(|_| bad(key))?
            }
            "stream.test_per_class" => {
                cfg.stream.test_per_class = value.parse().map_err(|_| bad(key))?
            }
            "stream.mean_spread" => cfg.stream.mean_spread = value.parse().map_err(|_| bad(key))?,
            "stream.within_scale" => {
                cfg.stream.within_scale = value.parse().map_err(|_| bad(key))?
            }
            "stream.overlap" => cfg.stream.overlap = value.parse().map_err(|_| bad(key))?,
            "stream.seed" => cfg.stream.seed = value.parse().map_err(|_| bad(key))?,
            "stream.csv" => cfg.stream_csv = Some(PathBuf::from(value)),
            "model.hidden" => {
                cfg.model.hidden_dims = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?
            }
            "strategy.method" => cfg.strategy.method = Method::parse(value)?,
            "strategy.lr" => cfg.strategy.lr = value.parse().map_err(|_| bad(key))?,
            "strategy.batch_size" => {
                cfg.strategy.batch_size = value.parse().map_err(|_| bad(key))?
            }
            "strategy.derpp_alpha" => {
                cfg.strategy.derpp_alpha = value.parse().map_err(|_| bad(key))?
            }
            "strategy.derpp_beta" => {
                cfg.strategy.derpp_beta = value.parse().map_err(|_| bad(key))?
            }
            "strategy.icarl_weight_decay" => {
                cfg.strategy.icarl_weight_decay = value.parse().map_err(|_| bad(key))?
            }
            "strategy.bnt_param_stats" => {
                cfg.strategy.bnt_param_stats = match value {
                    "batch_moments" => crate::normalization::StatsSource::BatchMoments,
                    "running_ema" => crate::normalization::StatsSource::RunningEma,
                    _ => return Err(bad(key)),
                }
            }
            "strategy.icarl_lb_ema_update" => {
                cfg.strategy.icarl_lb_ema_update = value.parse().map_err(|_| bad(key))?
            }
            "buffer.capacity" => cfg.buffer_capacity = value.parse().map_err(|_| bad(key))?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key))?,
            "seeds" => {
                cfg.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?
            }
            "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
            "probes.ema_drift" => cfg.probes.ema_drift = value.parse().map_err(|_| bad(key))?,
            "probes.export_activations" => {
                cfg.probes.export_activations = value.parse().map_err(|_| bad(key))?
            }
            "probes.save_checkpoint" => {
                cfg.probes.save_checkpoint = value.parse().map_err(|_| bad(key))?
            }
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Resolve an output path under `CLBENCH_OUT_DIR` when that root is set and
/// the path is relative.
pub fn resolve_out_dir(path: &Path) -> PathBuf {
    match std::env::var_os("CLBENCH_OUT_DIR") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// One seed's outcome.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub drift: Option<(DriftReport, DriftReport)>,
}

/// Aggregated outcome of a multi-seed experiment.
#[derive(Debug, Clone)]
pub struct ResultRecord {
    pub method: Method,
    pub seed_results: Vec<SeedResult>,
    pub failed_seeds: Vec<(u64, String)>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    pub fingerprint: String,
    pub wall_clock: Duration,
}

impl ResultRecord {
    pub fn is_failure(&self) -> bool {
        self.seed_results.is_empty()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent sub-streams per role, all derived from the experiment seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

const TAG_MODEL: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_PROBE: u64 = 3;

pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    match &config.stream_csv {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot read stream {}: {e}", path.display())))?;
            import_csv(&mut std::io::BufReader::new(file))
        }
        None => make_gaussian_stream(&config.stream),
    }
}

fn classifier_for<'a>(
    method: Method,
    model: &MlpModel,
    buffer: &ReplayBuffer,
    means_slot: &'a mut Option<ClassMeans>,
) -> Result<Classifier<'a>> {
    if method.is_icarl_family() {
        *means_slot = Some(ClassMeans::from_buffer(model, buffer)?);
        Ok(Classifier::Ncm(means_slot.as_ref().expect("just set")))
    } else {
        Ok(Classifier::LinearHead)
    }
}

/// Train one seed through the whole stream, evaluating all seen tasks after
/// each one.
pub fn run_seed(
    config: &ExperimentConfig,
    stream: &TaskStream,
    seed: u64,
) -> Result<(SeedResult, MlpModel, ReplayBuffer)> {
    let mut model = MlpModel::new(
        stream.input_dim,
        &config.model.hidden_dims,
        stream.num_classes,
        sub_seed(seed, TAG_MODEL),
    );
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut strategy = Strategy::new(config.strategy.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_TRAIN));
    let t_total = stream.num_tasks();
    let mut matrix = AccuracyMatrix::new(t_total);

    for t in 0..t_total {
        strategy.run_task(&mut model, stream, t, &mut buffer, config.epochs, &mut rng)?;
        let mut means_slot = None;
        let classifier =
            classifier_for(config.strategy.method, &model, &buffer, &mut means_slot)?;
        for j in 0..=t {
            let acc = evaluate_task(&model, &stream.tasks[j].test, &classifier, EVAL_BATCH)?;
            matrix.set(t, j, acc);
        }
    }

    let acc = acc_metric(&matrix)?;
    let bwt = bwt_metric(&matrix)?;

    let drift = if config.probes.ema_drift {
        Some(run_drift_probe(config, stream, &mut model, &buffer, seed)?)
    } else {
        None
    };

    Ok((
        SeedResult {
            seed,
            matrix,
            acc,
            bwt,
            drift,
        },
        model,
        buffer,
    ))
}

/// Build `n` refresh batches by cycling shuffled passes over the given
/// samples.
pub fn refresh_batches_from(
    samples: &[LabeledSample],
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    while out.len() < n {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if out.len() == n || chunk.len() < 2 {
                break;
            }
            out.push(Tensor::from_rows(
                &chunk.iter().map(|&i| samples[i].input.clone()).collect::<Vec<_>>(),
            ));
        }
    }
    out
}

/// Build `n` refresh batches by sampling the buffer.
pub fn refresh_batches_from_buffer(
    buffer: &ReplayBuffer,
    n: usize,
    batch_size: usize,
    input_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Tensor> {
    (0..n)
        .map(|_| buffer.sample_buffer(batch_size, input_dim, rng).inputs)
        .collect()
}

/// The EMA drift probe pair: refresh with last-task-only batches, then
/// (separately, from the same starting point) with balanced buffer batches.
pub fn run_drift_probe(
    config: &ExperimentConfig,
    stream: &TaskStream,
    model: &mut MlpModel,
    buffer: &ReplayBuffer,
    seed: u64,
) -> Result<(DriftReport, DriftReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_PROBE));
    let last = stream.num_tasks() - 1;
    let last_batches = refresh_batches_from(
        &stream.tasks[last].train,
        DRIFT_PROBE_BATCHES,
        config.strategy.batch_size,
        &mut rng,
    );
    let buffer_batches = refresh_batches_from_buffer(
        buffer,
        DRIFT_PROBE_BATCHES,
        config.strategy.batch_size,
        stream.input_dim,
        &mut rng,
    );
    let sets: Vec<&[LabeledSample]> = stream.tasks.iter().map(|t| t.test.as_slice()).collect();

    let mut means_slot = None;
    let classifier = classifier_for(config.strategy.method, model, buffer, &mut means_slot)?;
    let last_report = ema_drift_probe(model, &last_batches, &sets, &classifier, EVAL_BATCH)?;
    let buffer_report = ema_drift_probe(model, &buffer_batches, &sets, &classifier, EVAL_BATCH)?;
    Ok((last_report, buffer_report))
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Run every seed (failures recorded, remaining seeds proceed), aggregate in
/// sorted-seed order, and persist when an output directory is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    let started = Instant::now();
    let stream = load_stream(config)?;
    let fingerprint = config.fingerprint();

    let mut seed_results: Vec<SeedResult> = Vec::new();
    let mut failed: Vec<(u64, String)> = Vec::new();
    let mut extras: Vec<(u64, MlpModel, ReplayBuffer)> = Vec::new();
    for &seed in &config.seeds {
        match run_seed(config, &stream, seed) {
            Ok((result, model, buffer)) => {
                seed_results.push(result);
                extras.push((seed, model, buffer));
            }
            Err(e) => failed.push((seed, e.to_string())),
        }
    }

    // Aggregate in sorted-seed order so seed-list permutations cannot change
    // the floating-point accumulation.
    let mut ordered: Vec<&SeedResult> = seed_results.iter().collect();
    ordered.sort_by_key(|r| r.seed);
    let accs: Vec<f64> = ordered.iter().map(|r| r.acc).collect();
    let bwts: Vec<f64> = ordered.iter().filter_map(|r| r.bwt).collect();
    let (acc_mean, acc_std) = if accs.is_empty() {
        (None, None)
    } else {
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        (Some(m), Some(sample_std(&accs, m)))
    };
    let (bwt_mean, bwt_std) = if bwts.len() == accs.len() && !bwts.is_empty() {
        let m = bwts.iter().sum::<f64>() / bwts.len() as f64;
        (Some(m), Some(sample_std(&bwts, m)))
    } else {
        (None, None)
    };

    let record = ResultRecord {
        method: config.strategy.method,
        seed_results,
        failed_seeds: failed,
        acc_mean,
        acc_std,
        bwt_mean,
        bwt_std,
        fingerprint,
        wall_clock: started.elapsed(),
    };

    if let Some(dir) = &config.out_dir {
        persist(config, &stream, &record, &extras, &resolve_out_dir(dir))?;
    }
    Ok(record)
}

/// Serialized model + buffer state for the drift-probe command.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub fingerprint: String,
    pub model: MlpModel,
    pub buffer: ReplayBuffer,
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), cp)
        .map_err(|e| Error::Parse(format!("checkpoint write: {e}")))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Parse(format!("checkpoint parse: {e}")))
}

fn persist(
    config: &ExperimentConfig,
    stream: &TaskStream,
    record: &ResultRecord,
    extras: &[(u64, MlpModel, ReplayBuffer)],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(record, &mut std::fs::File::create(dir.join("results.csv"))?)?;
    let mut summary = std::fs::File::create(dir.join("summary.json"))?;
    summary.write_all(summary_json(record).as_bytes())?;

    for sr in &record.seed_results {
        if let Some((last, buf)) = &sr.drift {
            let mut f = std::fs::File::create(dir.join(format!("drift_seed{}.csv", sr.seed)))?;
            writeln!(f, "variant,task,acc_before,acc_after")?;
            for (variant, report) in [("last_task", last), ("buffer_balanced", buf)] {
                for (t, (b, a)) in report.acc_before.iter().zip(&report.acc_after).enumerate() {
                    writeln!(f, "{variant},{},{b},{a}", t + 1)?;
                }
            }
        }
    }

    if config.probes.export_activations || config.probes.save_checkpoint {
        for (seed, model, buffer) in extras {
            if config.probes.export_activations {
                let all_test: Vec<LabeledSample> = stream
                    .tasks
                    .iter()
                    .flat_map(|t| t.test.iter().cloned())
                    .collect();
                let mut means_slot = None;
                let classifier =
                    classifier_for(config.strategy.method, model, buffer, &mut means_slot)?;
                let mut f =
                    std::fs::File::create(dir.join(format!("activations_seed{seed}.csv")))?;
                export_activations(model, &all_test, &classifier, &mut f)?;
            }
            if config.probes.save_checkpoint {
                write_checkpoint(
                    &dir.join(format!("checkpoint_seed{seed}.json")),
                    &Checkpoint {
                        seed: *seed,
                        fingerprint: record.fingerprint.clone(),
                        model: model.clone(),
                        buffer: buffer.clone(),
                    },
                )?;
            }
        }
    }
    Ok(())
}

/// Long-form accuracy matrix dump, one row per defined entry, task indices
/// 1-based.
pub fn write_results_csv(record: &ResultRecord, w: &mut impl Write) -> Result<()> {
    writeln!(w, "seed,method,after_task,eval_task,accuracy")?;
    for sr in &record.seed_results {
        for (i, j, acc) in sr.matrix.defined() {
            writeln!(
                w,
                "{},{},{},{},{}",
                sr.seed,
                record.method,
                i + 1,
                j + 1,
                acc
            )?;
        }
    }
    Ok(())
}

/// The aggregate summary as JSON (keys sorted by serde_json's map order).
pub fn summary_json(record: &ResultRecord) -> String {
    let mut map = serde_json::Map::new();
    map.insert("method".into(), record.method.name().into());
    map.insert("acc_mean".into(), json_opt(record.acc_mean));
    map.insert("acc_std".into(), json_opt(record.acc_std));
    map.insert("bwt_mean".into(), json_opt(record.bwt_mean));
    map.insert("bwt_std".into(), json_opt(record.bwt_std));
    map.insert(
        "seeds".into(),
        serde_json::Value::Array(
            record
                .seed_results
                .iter()
                .map(|r| serde_json::Value::from(r.seed))
                .collect(),
        ),
    );
    map.insert("fingerprint".into(), record.fingerprint.clone().into());
    if !record.failed_seeds.is_empty() {
        let mut failures = serde_json::Map::new();
        for (seed, msg) in &record.failed_seeds {
            failures.insert(seed.to_string(), msg.clone().into());
        }
        map.insert("failed_seeds".into(), serde_json::Value::Object(failures));
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializable")
}

fn json_opt(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(x) => serde_json::Value::from(x),
        None => serde_json::Value::Null,
    }
}

/// One row of a method comparison.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub method: String,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
}

/// Comparison across methods; `wins[a][b]` counts seeds where method `a`
/// beats method `b` on accuracy (ties count one half).
#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<ResultRecord>,
    pub wins: Option<Vec<Vec<f64>>>,
}

/// Run each config and tabulate. With `paired`, every config must share the
/// stream definition and seed list; per-seed accuracy then supports the
/// pairwise win counts.
pub fn compare_methods(configs: &[ExperimentConfig], paired: bool) -> Result<Comparison> {
    if configs.is_empty() {
        return Err(Error::Config("compare needs at least one config".into()));
    }
    if paired {
        let first = &configs[0];
        for c in &configs[1..] {
            if c.stream != first.stream
                || c.stream_csv != first.stream_csv
                || c.seeds != first.seeds
            {
                return Err(Error::Config(
                    "paired comparison requires identical streams and seed lists".into(),
                ));
            }
        }
    }
    let mut records = Vec::with_capacity(configs.len());
    for c in configs {
        records.push(run_experiment(c)?);
    }
    let rows = records
        .iter()
        .map(|r| ComparisonRow {
            method: r.method.name().to_string(),
            acc_mean: r.acc_mean,
            acc_std: r.acc_std,
            bwt_mean: r.bwt_mean,
            bwt_std: r.bwt_std,
        })
        .collect();

    let wins = if paired {
        let n = records.len();
        let mut table = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                table[a][b] = paired_wins(&records[a], &records[b]);
            }
        }
        Some(table)
    } else {
        None
    };

    Ok(Comparison {
        rows,
        records,
        wins,
    })
}

/// Seeds where `a` strictly beats `b` on final accuracy, plus half for ties.
pub fn paired_wins(a: &ResultRecord, b: &ResultRecord) -> f64 {
    let by_seed: BTreeMap<u64, f64> = b.seed_results.iter().map(|r| (r.seed, r.acc)).collect();
    let mut wins = 0.0;
    for ra in &a.seed_results {
        if let Some(&acc_b) = by_seed.get(&ra.seed) {
            if ra.acc > acc_b {
                wins += 1.0;
            } else if ra.acc == acc_b {
                wins += 0.5;
            }
        }
    }
    wins
}

/// Render the five-column comparison table as CSV text.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("method,acc_mean,acc_std,bwt_mean,bwt_std\n");
    for row in &cmp.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method,
            fmt_opt(row.acc_mean),
            fmt_opt(row.acc_std),
            fmt_opt(row.bwt_mean),
            fmt_opt(row.bwt_std),
        ));
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => String::new(),
    }
}

/// Recompute aggregates from a results.csv payload and compare with a
/// summary.json payload; used by the self-check path and tests.
pub fn verify_persisted(results_csv: &str, summary: &str) -> Result<bool> {
    let mut lines = results_csv.lines();
    let header = lines.next().unwrap_or("");
    if header != "seed,method,after_task,eval_task,accuracy" {
        return Err(Error::Parse(format!("unexpected results header {header:?}")));
    }
    #[allow(clippy::type_complexity)]
    let mut by_seed: BTreeMap<u64, Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut num_tasks = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("bad results row {line:?}")));
        }
        let seed: u64 = f[0].parse().map_err(|_| Error::Parse("bad seed".into()))?;
        let i: usize = f[2].parse().map_err(|_| Error::Parse("bad task".into()))?;
        let j: usize = f[3].parse().map_err(|_| Error::Parse("bad task".into()))?;
        let acc: f64 = f[4].parse().map_err(|_| Error::Parse("bad accuracy".into()))?;
        num_tasks = num_tasks.max(i);
        by_seed.entry(seed).or_default().push((i - 1, j - 1, acc));
    }
    let parsed: serde_json::Value =
        serde_json::from_str(summary).map_err(|e| Error::Parse(format!("summary: {e}")))?;

    let mut accs = Vec::new();
    let mut bwts = Vec::new();
    for entries in by_seed.values() {
        let mut m = AccuracyMatrix::new(num_tasks);
        for &(i, j, acc) in entries {
            m.set(i, j, acc);
        }
        accs.push(acc_metric(&m)?);
        if let Some(b) = bwt_metric(&m)? {
            bwts.push(b);
        }
    }
    if accs.is_empty() {
        return Ok(parsed["acc_mean"].is_null());
    }
    let acc_mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let ok_acc = (parsed["acc_mean"].as_f64().unwrap_or(f64::NAN) - acc_mean).abs() < 1e-12;
    let ok_bwt = if bwts.is_empty() {
        parsed["bwt_mean"].is_null()
    } else {
        let bwt_mean = bwts.iter().sum::<f64>() / bwts.len() as f64;
        (parsed["bwt_mean"].as_f64().unwrap_or(f64::NAN) - bwt_mean).abs() < 1e-12
    };
    Ok(ok_acc && ok_bwt)
}
