//! Class-incremental task streams: synthetic Gaussian benchmarks, task
//! splitting with disjoint class sets, and batch iteration.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// A training batch: inputs `[B, D]`, labels, and (for replay entries that
/// carry them) the logits recorded when the entries were stored.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub stored_logits: Option<Tensor>,
}

impl Batch {
    pub fn empty(input_dim: usize) -> Self {
        Batch {
            inputs: Tensor::zeros(vec![0, input_dim]),
            labels: Vec::new(),
            stored_logits: None,
        }
    }

    pub fn from_samples(samples: &[&LabeledSample]) -> Self {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.input.clone()).collect();
        Batch {
            inputs: Tensor::from_rows(&rows),
            labels: samples.iter().map(|s| s.label).collect(),
            stored_logits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenate batches row-wise. Stored logits survive only if every
    /// non-empty part carries them.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let non_empty: Vec<&&Batch> = parts.iter().filter(|b| !b.is_empty()).collect();
        let inputs = Tensor::vcat(&non_empty.iter().map(|b| &b.inputs).collect::<Vec<_>>())?;
        let labels = non_empty
            .iter()
            .flat_map(|b| b.labels.iter().copied())
            .collect();
        let stored_logits = if !non_empty.is_empty()
            && non_empty.iter().all(|b| b.stored_logits.is_some())
        {
            let parts: Vec<&Tensor> = non_empty
                .iter()
                .map(|b| b.stored_logits.as_ref().expect("checked"))
                .collect();
            Some(Tensor::vcat(&parts)?)
        } else {
            None
        };
        Ok(Batch {
            inputs,
            labels,
            stored_logits,
        })
    }
}

/// One task: a labeled train/test split over a class set disjoint from every
/// other task's.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Ordered tasks with disjoint class sets. Immutable after generation.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks strictly before `task_idx` (0-based), ascending.
    pub fn classes_before(&self, task_idx: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..task_idx]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Classes of tasks up to and including `task_idx`, ascending.
    pub fn classes_through(&self, task_idx: usize) -> Vec<usize> {
        self.classes_before(task_idx + 1)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Geometry and size of a synthetic Gaussian stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class-mean distribution.
    pub mean_spread: f64,
    /// Within-class standard deviation.
    pub within_scale: f64,
    /// Pull of each new class mean toward a random previous-task class mean,
    /// in [0, 1]: 0 = independent placement, 1 = full collision.
    pub overlap: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0
            || self.classes_per_task == 0
            || self.input_dim == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
        {
            return Err(Error::Config("stream counts must be positive".into()));
        }
        if self.overlap < 0.0 {
            return Err(Error::Config("overlap must be >= 0".into()));
        }
        if self.mean_spread == 0.0 && self.overlap > 0.0 {
            return Err(Error::Config(
                "zero mean spread cannot produce partial overlap".into(),
            ));
        }
        if !(self.mean_spread.is_finite() && self.within_scale.is_finite()) {
            return Err(Error::Config("geometry parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Distance from a task center to each of its class means, in units of the
/// within-class standard deviation.
const CLASS_OFFSET_SIGMA: f64 = 2.0;

/// Generate a stream of isotropic Gaussian class blobs. Classes are labeled
/// `0..total` in task order. Each task's classes form a tight constellation
/// around a task center; centers scatter with `mean_spread` and consecutive
/// centers are pulled together by the overlap factor, so successive tasks
/// contend for the same region of input space.
pub fn make_gaussian_stream(config: &StreamConfig) -> Result<TaskStream> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.input_dim;
    let normal = StandardNormal;
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| normal.sample(rng)).collect()
    };

    // Each task occupies a region around a task center; its classes sit on
    // a tight constellation inside that region, so between-task scatter
    // (mean_spread) dwarfs within-task class separation. Consecutive task
    // centers are pulled together by the overlap factor, putting successive
    // tasks' classes into contention for the same region.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(config.total_classes());
    let mut prev_center: Option<Vec<f64>> = None;
    for _task in 0..config.num_tasks {
        let fresh: Vec<f64> = draw(&mut rng, d)
            .into_iter()
            .map(|v| v * config.mean_spread)
            .collect();
        let center: Vec<f64> = match (&prev_center, config.overlap) {
            (Some(prev), o) if o > 0.0 => fresh
                .iter()
                .zip(prev)
                .map(|(&f, &p)| o * p + (1.0 - o) * f)
                .collect(),
            _ => fresh,
        };
        for _ in 0..config.classes_per_task {
            // Unit direction times a fixed multiple of the sample noise:
            // classes are separable at close range no matter how far apart
            // the task regions sit.
            let dir = draw(&mut rng, d);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let offset = CLASS_OFFSET_SIGMA * config.within_scale;
            means.push(
                center
                    .iter()
                    .zip(&dir)
                    .map(|(&c, &u)| c + offset * u / norm)
                    .collect(),
            );
        }
        prev_center = Some(center);
    }

    let mut tasks = Vec::with_capacity(config.num_tasks);
    for task in 0..config.num_tasks {
        let classes: Vec<usize> = (task * config.classes_per_task
            ..(task + 1) * config.classes_per_task)
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &class in &classes {
            let mean = &means[class];
            let sample = |rng: &mut ChaCha8Rng| LabeledSample {
                input: draw(rng, d)
                    .into_iter()
                    .zip(mean)
                    .map(|(g, &m)| m + config.within_scale * g)
                    .collect(),
                label: class,
            };
            for _ in 0..config.train_per_class {
                train.push(sample(&mut rng));
            }
            for _ in 0..config.test_per_class {
                test.push(sample(&mut rng));
            }
        }
        tasks.push(TaskData {
            task_id: task,
            classes,
            train,
            test,
        });
    }

    let stream = TaskStream {
        tasks,
        input_dim: d,
        num_classes: config.total_classes(),
    };
    stream.validate()?;
    Ok(stream)
}

/// One shuffled pass over a task's training data; every sample appears
/// exactly once and the final short batch is kept.
pub fn iterate_online(task: &TaskData, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    batches_of(&task.train, batch_size, rng)
}

/// One shuffled pass over the union of the task's training data and the
/// current buffer contents; the per-batch share of previous classes is
/// whatever the mixture yields.
pub fn iterate_offline_mixed(
    task: &TaskData,
    buffer: &crate::replay::ReplayBuffer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    let mut pool: Vec<LabeledSample> = task.train.clone();
    pool.extend(buffer.entries().iter().map(|e| LabeledSample {
        input: e.input.clone(),
        label: e.label,
    }));
    batches_of(&pool, batch_size, rng)
}

fn batches_of(samples: &[LabeledSample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples(&refs)
        })
        .collect()
}

/// Write a stream as CSV with header `split,task_id,label,x_0..x_{D-1}`.
/// Values carry 17 significant digits, enough to round-trip `f64` exactly.
pub fn export_csv(stream: &TaskStream, w: &mut impl Write) -> Result<()> {
    write!(w, "split,task_id,label")?;
    for j in 0..stream.input_dim {
        write!(w, ",x_{j}")?;
    }
    writeln!(w)?;
    for task in &stream.tasks {
        for (split, samples) in [("train", &task.train), ("test", &task.test)] {
            for s in samples {
                write!(w, "{split},{},{}", task.task_id, s.label)?;
                for v in &s.input {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

/// Read a stream from the CSV schema written by [`export_csv`].
pub fn import_csv(r: &mut impl BufRead) -> Result<TaskStream> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty stream csv".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "split" || cols[1] != "task_id" || cols[2] != "label" {
        return Err(Error::Parse(format!("unexpected stream header: {header}")));
    }
    let input_dim = cols.len() - 3;

    struct Acc {
        train: Vec<LabeledSample>,
        test: Vec<LabeledSample>,
        classes: BTreeSet<usize>,
    }
    let mut by_task: std::collections::BTreeMap<usize, Acc> = Default::default();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let task_id: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad task_id", lineno + 2)))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label", lineno + 2)))?;
        let input: Vec<f64> = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad feature", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        let acc = by_task.entry(task_id).or_insert_with(|| Acc {
            train: Vec::new(),
            test: Vec::new(),
            classes: BTreeSet::new(),
        });
        acc.classes.insert(label);
        let sample = LabeledSample { input, label };
        match fields[0] {
            "train" => acc.train.push(sample),
            "test" => acc.test.push(sample),
            other => {
                return Err(Error::Parse(format!(
                    "line {}: unknown split {other:?}",
                    lineno + 2
                )))
            }
        }
    }

    let mut tasks = Vec::new();
    let mut num_classes = 0;
    for (task_id, acc) in by_task {
        let classes: Vec<usize> = acc.classes.into_iter().collect();
        num_classes = num_classes.max(classes.iter().max().map_or(0, |&c| c + 1));
        tasks.push(TaskData {
            task_id,
            classes,
            train: acc.train,
            test: acc.test,
        });
    }
    let stream = TaskStream {
        tasks,
        input_dim,
        num_classes,
    };
    stream.validate()?;
    Ok(stream)
}
