//! Masked-verbalizer scorer, its cross-entropy loss and gradients, mini-batch
//! training and F1 evaluation.
//!
//! The representation at the mask is modeled as
//! `z = h + t_subject + t_object`, and class `y` scores
//! `<z, l_y> / temperature + bias_y` against its label prompt `l_y`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::prompt_synthesis::{draw_type_prompts, PromptPack, TypePromptInit, TypePrompts};
use crate::seed::{derive_seed, rng_from_seed};

/// Probability floor inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub temperature: f64,
    #[serde(with = "crate::serde_matrix")]
    pub label_prompts: Array2<f64>,
    pub type_prompts: Option<TypePrompts>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub bias: Array1<f64>,
}

impl ScorerParams {
    pub fn from_pack(pack: &PromptPack, temperature: f64) -> Result<Self> {
        let params = Self {
            temperature,
            label_prompts: pack.label_prompts.clone(),
            type_prompts: pack.type_prompts.clone(),
            bias: Array1::zeros(pack.n_relations()),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.bias.len() != self.n_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes(),
                got: self.bias.len(),
            });
        }
        let mut all = self.label_prompts.iter().chain(self.bias.iter());
        if !all.all(|v| v.is_finite()) {
            return Err(Error::Inconsistent("non-finite scorer parameter".into()));
        }
        if let Some(t) = &self.type_prompts {
            if t.subject.len() != self.dim() || t.object.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: t.subject.len(),
                });
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.label_prompts.nrows()
    }

    pub fn dim(&self) -> usize {
        self.label_prompts.ncols()
    }

    fn shift(&self) -> Option<Array1<f64>> {
        self.type_prompts.as_ref().map(|t| &t.subject + &t.object)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Mask representations `z_i` for a batch of example embeddings.
    fn mask_states(&self, h: ArrayView2<f64>) -> Array2<f64> {
        let mut z = h.to_owned();
        if let Some(shift) = self.shift() {
            z += &shift;
        }
        z
    }

    /// Row-wise softmax over `z L^T / T + b`.
    fn probabilities(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut logits = z.dot(&self.label_prompts.t()) / self.temperature;
        logits += &self.bias;
        for mut row in logits.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        logits
    }
}

/// Class distribution at the mask for one example embedding.
pub fn predict_distribution(params: &ScorerParams, h: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.check_dim(h.len())?;
    let z = params.mask_states(h.insert_axis(Axis(0)));
    Ok(params.probabilities(&z).row(0).to_owned())
}

pub fn predict_batch(params: &ScorerParams, h: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check_dim(h.ncols())?;
    Ok(params.probabilities(&params.mask_states(h)))
}

fn check_batch(params: &ScorerParams, h: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != h.nrows() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: labels.len(),
        });
    }
    params.check_dim(h.ncols())?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.n_classes()) {
        return Err(Error::LabelSpaceMismatch(format!(
            "label {bad} outside {} classes",
            params.n_classes()
        )));
    }
    Ok(())
}

/// Mean negative log-probability of the true labels.
pub fn loss(params: &ScorerParams, h: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_batch(params, h, labels)?;
    let probs = params.probabilities(&params.mask_states(h));
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradients of [`loss`], laid out like [`ScorerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub label_prompts: Array2<f64>,
    pub type_subject: Option<Array1<f64>>,
    pub type_object: Option<Array1<f64>>,
    pub bias: Array1<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let sq = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v * v).sum::<f64>();
        let mut total = sq(&mut self.label_prompts.iter()) + sq(&mut self.bias.iter());
        for t in [&self.type_subject, &self.type_object]
            .into_iter()
            .flatten()
        {
            total += sq(&mut t.iter());
        }
        total.sqrt()
    }
}

pub fn loss_gradients(
    params: &ScorerParams,
    h: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Gradients> {
    check_batch(params, h, labels)?;
    let z = params.mask_states(h);
    let mut g = params.probabilities(&z);
    let n = labels.len() as f64;
    for (i, &y) in labels.iter().enumerate() {
        let mut row = g.row_mut(i);
        if row[y] < PROB_FLOOR {
            // the clamped log is flat here
            row.fill(0.0);
        } else {
            row[y] -= 1.0;
            row /= n;
        }
    }
    let inv_t = 1.0 / params.temperature;
    let label_prompts = g.t().dot(&z) * inv_t;
    let bias = g.sum_axis(Axis(0));
    let (type_subject, type_object) = if params.type_prompts.is_some() {
        let dz = g.dot(&params.label_prompts) * inv_t;
        let dt = dz.sum_axis(Axis(0));
        (Some(dt.clone()), Some(dt))
    } else {
        (None, None)
    };
    Ok(Gradients {
        label_prompts,
        type_subject,
        type_object,
        bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Redraw both type prompts from the particles before every mini-batch.
    pub resample_omega_each_iter: bool,
    /// Fraction of every class held out for the final test split.
    pub eval_split: f64,
    pub temperature: f64,
    pub train_bias: bool,
    /// Class excluded from the positive classes when scoring F1.
    pub null_label: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 0.01,
            seed: 0,
            resample_omega_each_iter: false,
            eval_split: 0.3,
            temperature: 1.0,
            train_bias: true,
            null_label: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_split) {
            return Err(Error::InvalidConfig("eval_split must be in [0, 1)".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPromptModel {
    pub relation_names: Vec<String>,
    pub verbalizer: Vec<usize>,
    pub omega_seed: u64,
    pub type_init: TypePromptInit,
    /// Parameters of the best validation checkpoint.
    pub scorer: ScorerParams,
    /// Mean training loss after each epoch.
    pub loss_trace: Vec<f64>,
    /// Validation micro-F1 after each epoch.
    pub val_f1_trace: Vec<f64>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_val_metrics: Metrics,
}

impl TrainedPromptModel {
    pub fn pack(&self) -> PromptPack {
        PromptPack {
            relation_names: self.relation_names.clone(),
            label_prompts: self.scorer.label_prompts.clone(),
            type_prompts: self.scorer.type_prompts.clone(),
            verbalizer: self.verbalizer.clone(),
            omega_seed: self.omega_seed,
            type_init: self.type_init,
        }
    }

    /// Scorer built from an untrained pack, for evaluating it as-is.
    pub fn untrained(pack: &PromptPack, temperature: f64) -> Result<Self> {
        Ok(Self {
            relation_names: pack.relation_names.clone(),
            verbalizer: pack.verbalizer.clone(),
            omega_seed: pack.omega_seed,
            type_init: pack.type_init,
            scorer: ScorerParams::from_pack(pack, temperature)?,
            loss_trace: Vec::new(),
            val_f1_trace: Vec::new(),
            best_epoch: 0,
            best_val_metrics: Metrics::default(),
        })
    }
}

fn apply(
    params: &mut ScorerParams,
    grads: &Gradients,
    lr: f64,
    train_bias: bool,
    train_types: bool,
) {
    params.label_prompts.scaled_add(-lr, &grads.label_prompts);
    if train_bias {
        params.bias.scaled_add(-lr, &grads.bias);
    }
    if !train_types {
        return;
    }
    if let (Some(t), Some(gs), Some(go)) = (
        params.type_prompts.as_mut(),
        grads.type_subject.as_ref(),
        grads.type_object.as_ref(),
    ) {
        t.subject.scaled_add(-lr, gs);
        t.object.scaled_add(-lr, go);
    }
}

fn check_label_space(set: &EmbeddingSet, pack: &PromptPack, what: &str) -> Result<()> {
    if set.relation_names() != pack.relation_names.as_slice() {
        return Err(Error::LabelSpaceMismatch(format!(
            "{what} relations differ from the prompt pack's"
        )));
    }
    if set.dim() != pack.dim() {
        return Err(Error::DimensionMismatch {
            expected: pack.dim(),
            got: set.dim(),
        });
    }
    Ok(())
}

/// Mini-batch gradient descent on the prompt parameters; returns the
/// checkpoint with the best validation micro-F1 (earliest on ties).
///
/// `particles` is only read when `config.resample_omega_each_iter` is set.
pub fn train(
    train_set: &EmbeddingSet,
    val_set: &EmbeddingSet,
    pack: &PromptPack,
    config: &TrainConfig,
    particles: Option<ArrayView2<f64>>,
) -> Result<TrainedPromptModel> {
    config.validate()?;
    pack.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_label_space(train_set, pack, "training set")?;
    check_label_space(val_set, pack, "validation set")?;
    let resample_from = match (config.resample_omega_each_iter, particles) {
        (false, _) => None,
        (true, Some(p)) if pack.type_prompts.is_some() => Some(p),
        (true, Some(_)) => None,
        (true, None) => {
            return Err(Error::InvalidConfig(
                "per-iteration omega resampling needs the particle set".into(),
            ))
        }
    };

    let mut params = ScorerParams::from_pack(pack, config.temperature)?;
    let mut rng = rng_from_seed(config.seed);
    let mut omega_rng = rng_from_seed(derive_seed(config.seed, "omega-resample"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let x = train_set.vectors();
    let labels = train_set.labels();

    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut val_f1_trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, Metrics, ScorerParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if let Some(p) = resample_from {
                params.type_prompts = draw_type_prompts(pack.type_init, p, &mut omega_rng)?;
            }
            let hb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = loss_gradients(&params, hb.view(), &yb)?;
            // resampled type prompts are drawn fresh each step, not learned
            let train_types = resample_from.is_none();
            apply(
                &mut params,
                &grads,
                config.learning_rate,
                config.train_bias,
                train_types,
            );
        }
        let epoch_loss = loss(&params, x.view(), labels)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Inconsistent(format!(
                "training loss diverged at epoch {epoch}"
            )));
        }
        loss_trace.push(epoch_loss);
        let metrics = evaluate_scorer(&params, val_set, config.null_label)?;
        val_f1_trace.push(metrics.micro_f1);
        if best
            .as_ref()
            .is_none_or(|(_, m, _)| metrics.micro_f1 > m.micro_f1)
        {
            best = Some((epoch, metrics, params.clone()));
        }
    }

    let (best_epoch, best_val_metrics, scorer) = best.expect("at least one epoch");
    Ok(TrainedPromptModel {
        relation_names: pack.relation_names.clone(),
        verbalizer: pack.verbalizer.clone(),
        omega_seed: pack.omega_seed,
        type_init: pack.type_init,
        scorer,
        loss_trace,
        val_f1_trace,
        best_epoch,
        best_val_metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassMetrics {
    pub relation: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 scores from gold and predicted class indices.
///
/// With a null label, micro-F1 counts only non-null predictions and gold
/// labels as positives, and macro-F1 averages over the other classes.
/// Without one, micro-F1 is accuracy. Classes that are neither gold nor
/// predicted anywhere are left out of the macro average.
pub fn f1_from_predictions(
    gold: &[usize],
    pred: &[usize],
    relation_names: &[String],
    null_label: Option<usize>,
) -> Metrics {
    let k = relation_names.len();
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&g, &p) in gold.iter().zip(pred) {
        support[g] += 1;
        predicted[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let positive = |c: usize| Some(c) != null_label;
    let mut per_class = Vec::with_capacity(k);
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for c in 0..k {
        let precision = ratio(tp[c], predicted[c]);
        let recall = ratio(tp[c], support[c]);
        let f1 = harmonic(precision, recall);
        if positive(c) && (support[c] > 0 || predicted[c] > 0) {
            macro_sum += f1;
            macro_n += 1;
        }
        per_class.push(ClassMetrics {
            relation: relation_names[c].clone(),
            precision,
            recall,
            f1,
            support: support[c],
        });
    }
    let sum_over = |v: &[usize]| (0..k).filter(|&c| positive(c)).map(|c| v[c]).sum::<usize>();
    let micro_p = ratio(sum_over(&tp), sum_over(&predicted));
    let micro_r = ratio(sum_over(&tp), sum_over(&support));
    Metrics {
        micro_f1: harmonic(micro_p, micro_r),
        macro_f1: if macro_n == 0 {
            0.0
        } else {
            macro_sum / macro_n as f64
        },
        per_class,
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn evaluate_scorer(
    params: &ScorerParams,
    set: &EmbeddingSet,
    null_label: Option<usize>,
) -> Result<Metrics> {
    let probs = predict_batch(params, set.vectors().view())?;
    let pred: Vec<usize> = probs.outer_iter().map(argmax).collect();
    Ok(f1_from_predictions(
        set.labels(),
        &pred,
        set.relation_names(),
        null_label,
    ))
}

/// Argmax predictions of the model on `test`, scored by F1.
pub fn evaluate_f1(
    model: &TrainedPromptModel,
    test: &EmbeddingSet,
    null_label: Option<usize>,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if test.relation_names() != model.relation_names.as_slice() {
        return Err(Error::LabelSpaceMismatch(
            "test relations differ from the model's".into(),
        ));
    }
    evaluate_scorer(&model.scorer, test, null_label)
}

/// Mean and population standard deviation (n divisor).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{generate_synthetic_set, SynthConfig};
    use crate::prompt_synthesis::{synthesize_prompts, WordEmbeddingTable};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn scorer(labels: Array2<f64>, types: Option<(Array1<f64>, Array1<f64>)>) -> ScorerParams {
        let k = labels.nrows();
        ScorerParams {
            temperature: 1.0,
            label_prompts: labels,
            type_prompts: types.map(|(subject, object)| TypePrompts { subject, object }),
            bias: Array1::zeros(k),
        }
    }

    fn random_instance(seed: u64) -> (ScorerParams, Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut normal = |shape: (usize, usize)| {
            Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
        };
        let labels = normal((3, 4));
        let t = normal((2, 4));
        let h = normal((5, 4));
        let bias = normal((1, 3)).row(0).to_owned();
        let mut p = scorer(labels, Some((t.row(0).to_owned(), t.row(1).to_owned())));
        p.bias = bias;
        p.temperature = 0.7;
        (p, h, vec![0, 2, 1, 1, 2])
    }

    #[test]
    fn tied_prompts_give_uniform() {
        let p = scorer(
            Array2::from_elem((4, 3), 0.5),
            Some((array![1.0, 2.0, 3.0], array![0.0, 1.0, 0.0])),
        );
        for h in [array![0.0, 0.0, 0.0], array![5.0, -3.0, 1.0]] {
            let d = predict_distribution(&p, h.view()).unwrap();
            assert!(d.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn closed_form_softmax() {
        let p = scorer(array![[1.0, 0.0], [0.0, 1.0]], None);
        let d = predict_distribution(&p, array![1.0, 0.0].view()).unwrap();
        let e = 1.0f64.exp();
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((d[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((d[0] - 0.731059).abs() < 1e-6);
        assert!(matches!(
            predict_distribution(&p, array![1.0].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loss_values() {
        let uniform = scorer(Array2::zeros((19, 3)), None);
        let h = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64);
        let l = loss(&uniform, h.view(), &[0, 3, 5, 18, 2, 2, 9]).unwrap();
        assert!((l - 19f64.ln()).abs() < 1e-12);

        // probabilities 0.5 and 0.25 via bias-only scorers
        let mut half = scorer(Array2::zeros((2, 1)), None);
        half.bias = array![0.0, 0.0];
        let mut quarter = scorer(Array2::zeros((4, 1)), None);
        quarter.bias = array![0.0, 0.0, 0.0, 0.0];
        let a = loss(&half, array![[0.0]].view(), &[0]).unwrap();
        let b = loss(&quarter, array![[0.0]].view(), &[1]).unwrap();
        assert!(((a + b) / 2.0 - 1.039721).abs() < 1e-6);

        let confident = scorer(array![[100.0], [-100.0]], None);
        let perfect = loss(&confident, array![[1.0], [2.0]].view(), &[0, 0]).unwrap();
        assert!(perfect.abs() < 1e-12);
        let wrong = loss(&confident, array![[10.0]].view(), &[1]).unwrap();
        assert!((wrong + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(matches!(
            loss(&confident, Array2::zeros((0, 1)).view(), &[]),
            Err(Error::EmptyBatch)
        ));
    }

    fn fd_check(p: &ScorerParams, h: &Array2<f64>, y: &[usize]) {
        let g = loss_gradients(p, h.view(), y).unwrap();
        let step = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / an.abs().max(1e-6);
        let central = |f: &dyn Fn(&mut ScorerParams, f64)| {
            let mut up = p.clone();
            f(&mut up, step);
            let mut dn = p.clone();
            f(&mut dn, -step);
            (loss(&up, h.view(), y).unwrap() - loss(&dn, h.view(), y).unwrap()) / (2.0 * step)
        };
        for c in 0..p.n_classes() {
            for j in 0..p.dim() {
                let fd = central(&|q, s| q.label_prompts[[c, j]] += s);
                assert!(rel(fd, g.label_prompts[[c, j]]) < 1e-5);
            }
            let fd = central(&|q, s| q.bias[c] += s);
            assert!(rel(fd, g.bias[c]) < 1e-5);
        }
        for j in 0..p.dim() {
            let fd = central(&|q, s| q.type_prompts.as_mut().unwrap().subject[j] += s);
            assert!(rel(fd, g.type_subject.as_ref().unwrap()[j]) < 1e-5);
            let fd = central(&|q, s| q.type_prompts.as_mut().unwrap().object[j] += s);
            assert!(rel(fd, g.type_object.as_ref().unwrap()[j]) < 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (p, h, y) = random_instance(seed);
            fd_check(&p, &h, &y);
        }
    }

    #[test]
    fn gradients_vanish_at_perfect_fit() {
        let p = scorer(array![[50.0, 0.0], [0.0, 50.0]], None);
        let g = loss_gradients(&p, array![[1.0, 0.0], [0.0, 1.0]].view(), &[0, 1]).unwrap();
        assert!(g.norm() < 1e-6);
    }

    #[test]
    fn duplicated_batch_gives_same_gradients() {
        let (p, h, y) = random_instance(9);
        let g1 = loss_gradients(&p, h.view(), &y).unwrap();
        let h2 = ndarray::concatenate![Axis(0), h, h];
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let g2 = loss_gradients(&p, h2.view(), &y2).unwrap();
        for (a, b) in g1.label_prompts.iter().zip(&g2.label_prompts) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g1.bias.iter().zip(&g2.bias) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn f1_hand_arithmetic() {
        let names = vec!["Other".to_string(), "Pos".to_string()];
        let gold = [1, 1, 1, 0];
        let pred = [1, 1, 0, 1];
        let m = f1_from_predictions(&gold, &pred, &names, Some(0));
        assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[1].f1 - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);

        let all_null = f1_from_predictions(&gold, &[0, 0, 0, 0], &names, Some(0));
        assert_eq!(all_null.micro_f1, 0.0);

        let perfect = f1_from_predictions(&gold, &gold, &names, None);
        assert_eq!((perfect.micro_f1, perfect.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[0.5; 5]).1, 0.0);
        let (m, s) = mean_std(&[0.2, 0.4]);
        assert!((m - 0.3).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
    }

    fn separable() -> (EmbeddingSet, PromptPack) {
        let set = generate_synthetic_set(&SynthConfig {
            n_classes: 3,
            per_class: 20,
            dim: 4,
            class_separation: 10.0,
            within_class_stddev: 0.5,
            seed: 4,
        })
        .unwrap();
        let pack = synthesize_prompts::<Vec<&str>>(
            set.relation_names(),
            None,
            &WordEmbeddingTable::hashed(4),
            set.vectors().view(),
            TypePromptInit::Latent,
            2,
        )
        .unwrap();
        (set, pack)
    }

    #[test]
    fn trains_on_separable_data() {
        let (set, pack) = separable();
        let model = train(&set, &set, &pack, &TrainConfig::default(), None).unwrap();
        assert_eq!(model.loss_trace.len(), 50);
        assert!(
            *model.loss_trace.last().unwrap() < 0.1,
            "{:?}",
            model.loss_trace
        );
        let m = evaluate_f1(&model, &set, None).unwrap();
        assert_eq!(m.micro_f1, 1.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (set, pack) = separable();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let model = train(&set, &set, &pack, &config, None).unwrap();
        assert!(model.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic() {
        let (set, pack) = separable();
        let config = TrainConfig {
            epochs: 8,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train(&set, &set, &pack, &config, None).unwrap();
        let b = train(&set, &set, &pack, &config, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampling_needs_particles() {
        let (set, pack) = separable();
        let config = TrainConfig {
            resample_omega_each_iter: true,
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&set, &set, &pack, &config, None),
            Err(Error::InvalidConfig(_))
        ));
        let model = train(&set, &set, &pack, &config, Some(set.vectors().view())).unwrap();
        let t = model.scorer.type_prompts.unwrap();
        assert!(set.vectors().outer_iter().any(|r| r == t.subject));
    }

    #[test]
    fn label_space_mismatch() {
        let (set, mut pack) = separable();
        pack.relation_names[0] = "renamed".into();
        assert!(matches!(
            train(&set, &set, &pack, &TrainConfig::default(), None),
            Err(Error::LabelSpaceMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn bias_shift_invariance(c in -20.0f64..20.0, seed in 0u64..200) {
            let (p, h, _) = random_instance(seed);
            let mut shifted = p.clone();
            shifted.bias += c;
            let a = predict_batch(&p, h.view()).unwrap();
            let b = predict_batch(&shifted, h.view()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for row in a.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn temperature_preserves_argmax(t in 0.05f64..20.0, seed in 0u64..200) {
            let (mut p, h, _) = random_instance(seed);
            p.bias.fill(0.0);
            let mut q = p.clone();
            q.temperature = t;
            let a = predict_batch(&p, h.view()).unwrap();
            let b = predict_batch(&q, h.view()).unwrap();
            for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
                prop_assert_eq!(argmax(ra), argmax(rb));
            }
        }

        #[test]
        fn micro_f1_matches_confusion_expression(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..30)
        ) {
            let names: Vec<String> = ["none", "a", "b"].iter().map(|s| s.to_string()).collect();
            let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = f1_from_predictions(&gold, &pred, &names, Some(0));
            let tp = pairs.iter().filter(|(g, p)| g == p && *g != 0).count() as f64;
            let fp = pairs.iter().filter(|(g, p)| *p != 0 && g != p).count() as f64;
            let fn_ = pairs.iter().filter(|(g, p)| *g != 0 && g != p).count() as f64;
            let expected = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            prop_assert!((m.micro_f1 - expected).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.micro_f1) && (0.0..=1.0).contains(&m.macro_f1));
        }
    }
}
