//! Accuracy-matrix construction, the average-accuracy and backward-transfer
//! metrics, linear-head and nearest-class-mean inference, and diagnostic
//! probes (EMA drift, activation export).

use std::collections::BTreeMap;
use std::io::Write;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::normalization::ema_refresh_pass;
use crate::replay::{normalized_features, ReplayBuffer};
use crate::scenario::LabeledSample;

/// Lower-triangular record `R[i][j]`: accuracy on task `j` after training
/// task `i` (0-based indices).
#[derive(Debug, Clone)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            entries: vec![vec![None; num_tasks]; num_tasks],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, after_task: usize, eval_task: usize, accuracy: f64) {
        assert!(
            (0.0..=1.0).contains(&accuracy),
            "accuracy {accuracy} outside [0, 1]"
        );
        self.entries[after_task][eval_task] = Some(accuracy);
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.entries[after_task][eval_task]
    }

    /// Defined entries as `(after_task, eval_task, accuracy)` rows.
    pub fn defined(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.entries.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(a) = v {
                    out.push((i, j, *a));
                }
            }
        }
        out
    }
}

/// Mean of the final row: overall accuracy across all tasks after the last
/// one was trained.
pub fn acc_metric(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.num_tasks();
    let last = t - 1;
    let mut sum = 0.0;
    for j in 0..t {
        sum += r.get(last, j).ok_or_else(|| {
            Error::Contract(format!("accuracy matrix row {last} is missing entry {j}"))
        })?;
    }
    Ok(sum / t as f64)
}

/// Mean over earlier tasks of (final accuracy - accuracy when trained).
/// Undefined for a single task: that is an explicit absent value, never 0.
pub fn bwt_metric(r: &AccuracyMatrix) -> Result<Option<f64>> {
    let t = r.num_tasks();
    if t == 1 {
        return Ok(None);
    }
    let last = t - 1;
    let mut sum = 0.0;
    for j in 0..t - 1 {
        let final_acc = r
            .get(last, j)
            .ok_or_else(|| Error::Contract(format!("missing final-row entry {j}")))?;
        let at_training = r
            .get(j, j)
            .ok_or_else(|| Error::Contract(format!("missing diagonal entry {j}")))?;
        sum += final_acc - at_training;
    }
    Ok(Some(sum / (t - 1) as f64))
}

/// Per-class mean of L2-normalized penultimate features, computed from each
/// class's buffer exemplars.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    means: BTreeMap<usize, Vec<f64>>,
}

impl ClassMeans {
    /// Build from the buffer contents under the current model.
    pub fn from_buffer(model: &MlpModel, buffer: &ReplayBuffer) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in buffer.entries().iter().enumerate() {
            by_class.entry(e.label).or_default().push(i);
        }
        let mut means = BTreeMap::new();
        for (class, idxs) in by_class {
            let rows: Vec<Vec<f64>> = idxs
                .iter()
                .map(|&i| buffer.entries()[i].input.clone())
                .collect();
            let feats = normalized_features(model, &Tensor::from_rows(&rows))?;
            let d = feats[0].len();
            let mut mean = vec![0.0; d];
            for f in &feats {
                for (m, &v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= feats.len() as f64);
            means.insert(class, mean);
        }
        Ok(ClassMeans { means })
    }

    pub fn from_means(means: BTreeMap<usize, Vec<f64>>) -> Self {
        ClassMeans { means }
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.means.keys().copied()
    }

    /// Nearest mean by Euclidean distance; ties go to the lowest class id.
    pub fn nearest(&self, feature: &[f64]) -> usize {
        let mut best_class = usize::MAX;
        let mut best_dist = f64::INFINITY;
        for (&class, mean) in &self.means {
            let dist: f64 = mean
                .iter()
                .zip(feature)
                .map(|(&m, &f)| (m - f) * (m - f))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best_class = class;
            }
        }
        best_class
    }
}

/// How test predictions are produced.
#[derive(Debug, Clone)]
pub enum Classifier<'a> {
    /// Argmax over the full head (ties to the lowest class index).
    LinearHead,
    /// Nearest class mean on L2-normalized penultimate features.
    Ncm(&'a ClassMeans),
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn l2_normalize(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter().map(|v| v / norm).collect()
    } else {
        row.to_vec()
    }
}

/// Predictions for a set of samples, batched for throughput; inference uses
/// the running statistics so results are independent of batch composition.
pub fn predict(
    model: &MlpModel,
    samples: &[LabeledSample],
    classifier: &Classifier,
    eval_batch: usize,
) -> Result<Vec<usize>> {
    if let Classifier::Ncm(means) = classifier {
        if means.is_empty() {
            return Err(Error::Contract(
                "NCM inference requested without any class means".into(),
            ));
        }
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval_batch.max(1)) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|s| s.input.clone()).collect();
        let inputs = Tensor::from_rows(&rows);
        let (penult, logits) = model.infer(&inputs)?;
        for i in 0..chunk.len() {
            let pred = match classifier {
                Classifier::LinearHead => argmax(logits.row(i)),
                Classifier::Ncm(means) => means.nearest(&l2_normalize(penult.row(i))),
            };
            predictions.push(pred);
        }
    }
    Ok(predictions)
}

/// Fraction of test samples predicted correctly.
pub fn evaluate_task(
    model: &MlpModel,
    test_set: &[LabeledSample],
    classifier: &Classifier,
    eval_batch: usize,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyBatch("evaluate_task"));
    }
    let predictions = predict(model, test_set, classifier, eval_batch)?;
    let correct = predictions
        .iter()
        .zip(test_set)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / test_set.len() as f64)
}

/// Outcome of an EMA drift probe: per-task accuracy before and after the
/// refresh sequence.
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub acc_before: Vec<f64>,
    pub acc_after: Vec<f64>,
}

/// Snapshot the running statistics, evaluate all given test sets, apply an
/// EMA refresh with each batch in turn, re-evaluate, and restore the
/// snapshot. Model parameters are never touched; the model leaves the probe
/// bit-identical to how it entered.
pub fn ema_drift_probe(
    model: &mut MlpModel,
    refresh_batches: &[Tensor],
    test_sets: &[&[LabeledSample]],
    classifier: &Classifier,
    eval_batch: usize,
) -> Result<DriftReport> {
    let snapshot = model.bn_snapshot();
    let acc_before = test_sets
        .iter()
        .map(|set| evaluate_task(model, set, classifier, eval_batch))
        .collect::<Result<Vec<f64>>>()?;
    for batch in refresh_batches {
        ema_refresh_pass(model, batch)?;
    }
    let acc_after = test_sets
        .iter()
        .map(|set| evaluate_task(model, set, classifier, eval_batch))
        .collect::<Result<Vec<f64>>>()?;
    model.bn_restore(&snapshot);
    Ok(DriftReport {
        acc_before,
        acc_after,
    })
}

/// Write `label,prediction,f0..f{d-1}` rows: the penultimate features (input
/// to the head) in inference mode, with 17 significant digits so values
/// round-trip exactly.
pub fn export_activations(
    model: &MlpModel,
    samples: &[LabeledSample],
    classifier: &Classifier,
    w: &mut impl Write,
) -> Result<()> {
    let d = model.feature_dim();
    write!(w, "label,prediction")?;
    for j in 0..d {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    if samples.is_empty() {
        return Ok(());
    }
    let predictions = predict(model, samples, classifier, 128)?;
    for (s, pred) in samples.iter().zip(&predictions) {
        let inputs = Tensor::from_rows(&[s.input.clone()]);
        let (penult, _) = model.infer(&inputs)?;
        write!(w, "{},{pred}", s.label)?;
        for v in penult.row(0) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{make_gaussian_stream, StreamConfig};

    fn hand_matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let t = rows.len();
        let mut m = AccuracyMatrix::new(t);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v >= 0.0 {
                    m.set(i, j, v);
                }
            }
        }
        m
    }

    #[test]
    fn acc_of_hand_matrices() {
        let m = hand_matrix(&[&[0.9, -1.0], &[0.5, 0.8]]);
        assert_eq!(acc_metric(&m).unwrap(), 0.65);
        let ones = hand_matrix(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(acc_metric(&ones).unwrap(), 1.0);
        let single = hand_matrix(&[&[0.7]]);
        assert_eq!(acc_metric(&single).unwrap(), 0.7);
    }

    #[test]
    fn acc_requires_complete_last_row() {
        let m = hand_matrix(&[&[0.9, -1.0], &[0.5, -1.0]]);
        assert!(acc_metric(&m).is_err());
    }

    #[test]
    fn bwt_of_hand_matrices() {
        let m = hand_matrix(&[&[0.9, -1.0], &[0.5, 0.8]]);
        assert!((bwt_metric(&m).unwrap().unwrap() - (-0.4)).abs() < 1e-15);

        // No forgetting: last row equals the diagonal.
        let m = hand_matrix(&[&[0.6, -1.0], &[0.6, 0.9]]);
        assert_eq!(bwt_metric(&m).unwrap().unwrap(), 0.0);
    }

    #[test]
    fn bwt_rewards_stability_without_plasticity() {
        // Low diagonal, equal final row: zero transfer despite low accuracy.
        let m = hand_matrix(&[&[0.3, -1.0], &[0.3, 0.3]]);
        assert_eq!(bwt_metric(&m).unwrap().unwrap(), 0.0);
        assert!((acc_metric(&m).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bwt_absent_for_single_task() {
        let m = hand_matrix(&[&[0.7]]);
        assert_eq!(bwt_metric(&m).unwrap(), None);
    }

    #[test]
    fn metrics_match_compensated_summation() {
        // Kahan summation as the independent accumulation route.
        fn kahan_mean(values: &[f64]) -> f64 {
            let mut sum = 0.0;
            let mut c = 0.0;
            for &v in values {
                let y = v - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum / values.len() as f64
        }
        let vals = [0.123456789, 0.987654321, 0.5, 0.3333333333333333, 0.9999999];
        let mut m = AccuracyMatrix::new(5);
        for (j, &v) in vals.iter().enumerate() {
            m.set(4, j, v);
        }
        let acc = acc_metric(&m).unwrap();
        assert!((acc - kahan_mean(&vals)).abs() <= 1e-15);
    }

    #[test]
    fn ncm_ignores_head_weights() {
        let means = ClassMeans::from_means(BTreeMap::from([
            (0, vec![1.0, 0.0]),
            (1, vec![0.0, 1.0]),
        ]));
        assert_eq!(means.nearest(&[1.0, 0.0]), 0);
        assert_eq!(means.nearest(&[0.0, 1.0]), 1);
        // Equidistant point: lowest class id wins.
        assert_eq!(means.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn ncm_without_means_is_an_error() {
        let model = MlpModel::new(4, &[8], 3, 1);
        let means = ClassMeans::from_means(BTreeMap::new());
        let samples = vec![LabeledSample {
            input: vec![0.0; 4],
            label: 0,
        }];
        assert!(matches!(
            evaluate_task(&model, &samples, &Classifier::Ncm(&means), 16),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predictions_independent_of_eval_batching() {
        let stream = make_gaussian_stream(&StreamConfig {
            num_tasks: 2,
            classes_per_task: 2,
            input_dim: 6,
            train_per_class: 20,
            test_per_class: 15,
            mean_spread: 3.0,
            within_scale: 1.0,
            overlap: 0.3,
            seed: 5,
        })
        .unwrap();
        let mut model = MlpModel::new(6, &[10], 4, 2);
        // Move the EMA somewhere non-trivial.
        let warm: Vec<&LabeledSample> = stream.tasks[0].train.iter().collect();
        let batch = crate::scenario::Batch::from_samples(&warm);
        model
            .forward_values(&batch.inputs, crate::normalization::NormMode::BatchUpdate)
            .unwrap();

        let test = &stream.tasks[0].test;
        let p1 = predict(&model, test, &Classifier::LinearHead, 1).unwrap();
        let p7 = predict(&model, test, &Classifier::LinearHead, 7).unwrap();
        let p128 = predict(&model, test, &Classifier::LinearHead, 128).unwrap();
        assert_eq!(p1, p7);
        assert_eq!(p1, p128);
    }

    #[test]
    fn drift_probe_restores_model_bit_exactly() {
        let stream = make_gaussian_stream(&StreamConfig {
            num_tasks: 2,
            classes_per_task: 2,
            input_dim: 6,
            train_per_class: 20,
            test_per_class: 10,
            mean_spread: 3.0,
            within_scale: 1.0,
            overlap: 0.3,
            seed: 6,
        })
        .unwrap();
        let mut model = MlpModel::new(6, &[10], 4, 3);
        let before = model.clone();

        let batches: Vec<Tensor> = stream.tasks[1]
            .train
            .chunks(8)
            .map(|c| {
                Tensor::from_rows(&c.iter().map(|s| s.input.clone()).collect::<Vec<_>>())
            })
            .collect();
        let sets: Vec<&[LabeledSample]> = stream.tasks.iter().map(|t| t.test.as_slice()).collect();
        let report =
            ema_drift_probe(&mut model, &batches, &sets, &Classifier::LinearHead, 64).unwrap();
        assert_eq!(report.acc_before.len(), 2);
        assert_eq!(report.acc_after.len(), 2);
        assert!(model.params_bits_eq(&before));
        assert!(model.bn_bits_eq(&before.bn_snapshot()));
    }

    #[test]
    fn drift_probe_with_no_batches_is_identity() {
        let mut model = MlpModel::new(4, &[6], 2, 7);
        let samples = vec![
            LabeledSample {
                input: vec![0.5, -0.5, 1.0, 0.0],
                label: 0,
            },
            LabeledSample {
                input: vec![-0.5, 0.5, 0.0, 1.0],
                label: 1,
            },
        ];
        let sets: Vec<&[LabeledSample]> = vec![&samples];
        let report =
            ema_drift_probe(&mut model, &[], &sets, &Classifier::LinearHead, 16).unwrap();
        assert_eq!(report.acc_before, report.acc_after);
    }

    #[test]
    fn activation_export_shape_and_determinism() {
        let model = MlpModel::new(4, &[6], 2, 7);
        let samples: Vec<LabeledSample> = (0..5)
            .map(|i| LabeledSample {
                input: vec![i as f64 * 0.25, 0.1, -0.3, 0.7],
                label: i % 2,
            })
            .collect();
        let mut out1 = Vec::new();
        export_activations(&model, &samples, &Classifier::LinearHead, &mut out1).unwrap();
        let mut out2 = Vec::new();
        export_activations(&model, &samples, &Classifier::LinearHead, &mut out2).unwrap();
        assert_eq!(out1, out2);

        let text = String::from_utf8(out1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0].split(',').count(), 2 + 6);
        // Round-trip one feature value.
        let field = lines[1].split(',').nth(2).unwrap();
        let parsed: f64 = field.parse().unwrap();
        assert_eq!(format!("{parsed:.16e}"), field);
    }
}
