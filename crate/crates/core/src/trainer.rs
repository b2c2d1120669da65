//! Post-training and fine-tuning loops.
//!
//! A step draws a mini-batch from the epoch's permutation, evaluates every
//! instance's loss on its own tape (in parallel), sums the gradients in
//! batch order and applies one Adam update. All randomness is derived from
//! the run seed and the step counters, which makes any run resumable from
//! a checkpoint.

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_single_input, Conversation, ModelInput, Vocabulary};
use crate::encoder::{Model, Teacher};
use crate::error::{Error, Result};
use crate::objectives::{loss_final, LossReport, LossWeights, TaskMask};
use crate::rng;
use crate::tape::{Gradients, Matrix, ParamSet, Tape, Var};
use crate::tasks::{build_dataset, TaskConfig, TrainingInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub post_train_epochs: usize,
    pub fine_tune_epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Use sums of squares instead of Euclidean norms for L_WR and L_KD.
    pub squared_norms: bool,
    /// Run-level task switches, intersected with each instance's mask.
    pub tasks: TaskMask,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 64,
            post_train_epochs: 2,
            fine_tune_epochs: 2,
            seed: 0,
            weights: LossWeights::default(),
            grad_clip: None,
            squared_norms: false,
            tasks: TaskMask::ALL,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_clip {c}")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("serializable config");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PostTrain,
    FineTune,
    Teacher,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::PostTrain => 1,
            Phase::FineTune => 2,
            Phase::Teacher => 3,
        }
    }
}

/// A training instance with its teacher target resolved.
#[derive(Debug, Clone)]
pub struct Example {
    pub instance: TrainingInstance,
    pub teacher_cls: Option<Vec<f64>>,
}

/// Encodes every instance's teacher input with the frozen teacher.
pub fn prepare_examples(instances: Vec<TrainingInstance>, teacher: &Teacher) -> Result<Vec<Example>> {
    instances
        .into_par_iter()
        .map(|instance| {
            let teacher_cls = instance
                .teacher_input
                .as_ref()
                .map(|t| teacher.encode_input(t).map(|o| o.cls_vector))
                .transpose()?;
            Ok(Example {
                instance,
                teacher_cls,
            })
        })
        .collect()
}

/// Options shared by the loss assembly and the gradient check.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub tasks: TaskMask,
    pub squared_norms: bool,
}

impl From<&TrainConfig> for LossOptions {
    fn from(c: &TrainConfig) -> Self {
        LossOptions {
            weights: c.weights,
            tasks: c.tasks,
            squared_norms: c.squared_norms,
        }
    }
}

/// Records `L_final` for one instance on `tape` and returns its node
/// together with the per-term report.
pub fn instance_loss(
    model: &Model,
    tape: &mut Tape,
    example: &Example,
    options: &LossOptions,
    dropout_rng: Option<&mut rng::StreamRng>,
) -> Result<(Var, LossReport)> {
    let inst = &example.instance;
    let mask = inst.loss_mask.intersect(options.tasks);
    let vars = model.forward(tape, &inst.model_input, dropout_rng)?;
    let distance = |tape: &mut Tape, v: Var| {
        if options.squared_norms {
            tape.sum_squares(v)
        } else {
            tape.norm(v)
        }
    };

    let mut terms: Vec<(Var, f64)> = Vec::with_capacity(4);
    let mut values = [0.0f64; 4]; // ts, ci, wr, kd

    if mask.kd {
        let target = example
            .teacher_cls
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: kd enabled without teacher target", inst.conv_id)))?;
        let t = tape.constant(Matrix::from_shape_vec((1, target.len()), target.clone()).map_err(|e| Error::Shape(e.to_string()))?);
        let diff = tape.sub(vars.cls, t);
        let kd = distance(tape, diff);
        values[3] = tape.scalar(kd);
        terms.push((kd, 1.0));
    }
    if mask.topic {
        let labels = inst.topic_labels.as_ref().expect("topic mask implies labels");
        let probs = model.topic_probs(tape, vars.seps)?;
        let labels: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        if labels.len() != tape.value(probs).nrows() {
            return Err(Error::Shape(format!("{}: topic labels vs utterances", inst.conv_id)));
        }
        let ts = tape.bce(probs, &labels);
        values[0] = tape.scalar(ts);
        terms.push((ts, options.weights.alpha));
    }
    if mask.coref {
        let label = inst.coref_label.as_ref().expect("coref mask implies label");
        let n_context = inst.model_input.num_utterances() - 1;
        if label.label.len() != n_context {
            return Err(Error::Shape(format!("{}: coref label vs context", inst.conv_id)));
        }
        let rows: Vec<usize> = (0..n_context).collect();
        let context = tape.rows(vars.seps, &rows);
        let probs = model.coref_probs(tape, context)?;
        let labels: Vec<f64> = label.label.iter().map(|&l| f64::from(l)).collect();
        let ci = tape.bce(probs, &labels);
        values[1] = tape.scalar(ci);
        terms.push((ci, options.weights.beta));
    }
    if mask.wr {
        let source = model.word_source(tape, &vars);
        let probs = model.word_probs(tape, source)?;
        let target: Vec<f64> = inst.bow_target.vector.iter().map(|&v| f64::from(v)).collect();
        let t = tape.constant(Matrix::from_shape_vec((1, target.len()), target).map_err(|e| Error::Shape(e.to_string()))?);
        let diff = tape.sub(probs, t);
        let wr = distance(tape, diff);
        values[2] = tape.scalar(wr);
        terms.push((wr, options.weights.gamma));
    }
    let root = tape.combine(&terms);
    let report = loss_final(values[0], values[1], values[2], values[3], &options.weights, mask);
    Ok((root, report))
}

/// Loss report without building gradients (inference mode).
pub fn evaluate_loss(model: &Model, example: &Example, options: &LossOptions) -> Result<LossReport> {
    let mut tape = Tape::new(model.params());
    instance_loss(model, &mut tape, example, options, None).map(|(_, r)| r)
}

/// Mean loss and gradient over a batch. Gradients are summed in batch
/// order regardless of how the work was scheduled.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Example],
    options: &LossOptions,
    dropout_seed: Option<(u64, &[u64])>,
) -> Result<(Gradients, LossReport)> {
    let parts: Vec<(Gradients, LossReport)> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, ex)| {
            let mut tape = Tape::new(model.params());
            let mut drop_rng = dropout_seed.map(|(seed, path)| {
                let mut p = path.to_vec();
                p.push(slot as u64);
                rng::stream(seed, &p)
            });
            let (root, report) = instance_loss(model, &mut tape, ex, options, drop_rng.as_mut())?;
            Ok((tape.backward(root), report))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.params().zeros_like();
    let mut report = LossReport::default();
    for (g, r) in &parts {
        grads.add_assign(g);
        report.accumulate(r);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    grads.scale(inv);
    Ok((grads, report.scaled(inv)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.raw_dim())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Position inside a run; the next step to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub report: LossReport,
}

/// Student training loop over prepared examples.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub phase: Phase,
    pub progress: Progress,
    pub log: Vec<StepLog>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Trainer {
            model,
            optimizer,
            config,
            phase,
            progress: Progress::default(),
            log: Vec::new(),
        })
    }

    /// Epoch permutation drawn from the run seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[self.phase.tag(), 0x5f, epoch as u64]));
        order
    }

    /// Trains until `epochs` are complete or `max_steps` more steps ran.
    pub fn run(&mut self, data: &[Example], epochs: usize, max_steps: Option<usize>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("training dataset".into()));
        }
        let options = LossOptions::from(&self.config);
        let bs = self.config.batch_size;
        let batches_per_epoch = data.len().div_ceil(bs);
        let mut budget = max_steps.unwrap_or(usize::MAX);
        while self.progress.epoch < epochs && budget > 0 {
            let order = self.epoch_order(self.progress.epoch, data.len());
            while self.progress.batch_in_epoch < batches_per_epoch && budget > 0 {
                let b = self.progress.batch_in_epoch;
                let batch: Vec<&Example> = order[b * bs..((b + 1) * bs).min(data.len())]
                    .iter()
                    .map(|&i| &data[i])
                    .collect();
                let step = self.progress.step;
                let path = [self.phase.tag(), 0xd0, step as u64];
                let (mut grads, report) =
                    batch_gradient(&self.model, &batch, &options, Some((self.config.seed, &path)))?;
                if let Some(term) = report.first_non_finite() {
                    return Err(Error::NonFiniteLoss { term, step });
                }
                if let Some(clip) = self.config.grad_clip {
                    let norm = grads.global_norm();
                    if norm > clip {
                        grads.scale(clip / norm);
                    }
                }
                self.optimizer
                    .step(self.model.params_mut(), &grads, self.config.learning_rate);
                self.log.push(StepLog { step, report });
                self.progress.step += 1;
                self.progress.batch_in_epoch += 1;
                budget -= 1;
            }
            if self.progress.batch_in_epoch >= batches_per_epoch {
                self.progress.epoch += 1;
                self.progress.batch_in_epoch = 0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Joint optimization of `L_final` over the self-supervised instances.
pub fn post_train(model: Model, data: &[Example], teacher: &Teacher, config: &TrainConfig) -> Result<TrainOutcome> {
    let before = teacher.checksum();
    let mut trainer = Trainer::new(model, config.clone(), Phase::PostTrain)?;
    trainer.run(data, config.post_train_epochs, None)?;
    debug_assert_eq!(before, teacher.checksum());
    Ok(TrainOutcome {
        model: trainer.model,
        log: trainer.log,
    })
}

/// Instances for the distillation-only fine-tuning stage: raw
/// conversations, no noise prefix.
pub fn fine_tune_examples(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    teacher: &Teacher,
    max_len: usize,
) -> Result<Vec<Example>> {
    if let Some(c) = conversations.iter().find(|c| c.reformulated_last.is_none()) {
        return Err(Error::InvalidConversation {
            conv_id: c.conv_id.clone(),
            reason: "fine-tuning requires reformulated_last".into(),
        });
    }
    let cfg = TaskConfig {
        max_len,
        perturb_prob: 0.0,
        min_noise_pool: 0,
    };
    let instances = build_dataset(conversations, &[], vocab, &cfg, 0)?;
    prepare_examples(instances, teacher)
}

/// Distillation-only training on target-task conversations.
pub fn fine_tune(model: Model, data: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.tasks = TaskMask {
        topic: false,
        coref: false,
        wr: false,
        kd: true,
    };
    let mut trainer = Trainer::new(model, cfg, Phase::FineTune)?;
    if config.fine_tune_epochs > 0 {
        trainer.run(data, config.fine_tune_epochs, None)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log: trainer.log,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous K-fold partition of `n` conversations.
pub fn k_fold(n: usize, k: usize) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} conversations into {k} folds")));
    }
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<usize> = (start..start + size).collect();
        let train: Vec<usize> = (0..n).filter(|i| !(start..start + size).contains(i)).collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Scores are divided by this before the in-batch softmax.
    pub temperature: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 4,
            seed: 0,
            temperature: 1.0,
        }
    }
}

/// Query / relevant-document input pair for teacher pre-training.
#[derive(Debug, Clone)]
pub struct Pair {
    pub query: ModelInput,
    pub doc: ModelInput,
}

pub fn make_pairs(pairs: &[(String, String)], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Pair>> {
    pairs
        .iter()
        .map(|(q, d)| {
            Ok(Pair {
                query: build_single_input(q, vocab, max_len)?,
                doc: build_single_input(d, vocab, max_len)?,
            })
        })
        .collect()
}

/// In-batch contrastive loss between query and document `[CLS]` vectors,
/// recorded on a single tape.
pub fn contrastive_loss(model: &Model, tape: &mut Tape, batch: &[&Pair], temperature: f64) -> Result<Var> {
    let mut qs = Vec::with_capacity(batch.len());
    let mut ds = Vec::with_capacity(batch.len());
    for p in batch {
        qs.push(model.forward(tape, &p.query, None)?.cls);
        ds.push(model.forward(tape, &p.doc, None)?.cls);
    }
    let q = tape.vconcat(&qs);
    let d = tape.vconcat(&ds);
    Ok(score_loss(tape, q, d, temperature, batch.len()))
}

fn score_loss(tape: &mut Tape, q: Var, d: Var, temperature: f64, n: usize) -> Var {
    let scores = tape.matmul_t(q, d);
    let scores = tape.scale(scores, 1.0 / temperature);
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy_rows(scores, &targets)
}

/// Same value and gradient as [`contrastive_loss`], computed in three
/// passes so the per-sequence work runs in parallel: encode every
/// sequence, differentiate the loss with respect to the `[CLS]` vectors,
/// then back-propagate each vector's gradient through its own tape.
pub fn contrastive_gradient(
    model: &Model,
    batch: &[&Pair],
    temperature: f64,
) -> Result<(Gradients, f64)> {
    let inputs: Vec<&ModelInput> = batch.iter().flat_map(|p| [&p.query, &p.doc]).collect();
    let cls: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|inp| model.encode_cls(inp))
        .collect::<Result<_>>()?;
    let h = model.hidden_size();
    let n = batch.len();
    let stack = |offset: usize| {
        Matrix::from_shape_fn((n, h), |(i, j)| cls[2 * i + offset][j])
    };
    let mut vectors = ParamSet::new();
    let qid = vectors.add("q", stack(0));
    let did = vectors.add("d", stack(1));
    let (loss, upstream) = {
        let mut tape = Tape::new(&vectors);
        let q = tape.param(qid);
        let d = tape.param(did);
        let root = score_loss(&mut tape, q, d, temperature, n);
        (tape.scalar(root), tape.backward(root))
    };
    let parts: Vec<Gradients> = inputs
        .par_iter()
        .enumerate()
        .map(|(idx, inp)| {
            let (src, row) = if idx % 2 == 0 { (qid, idx / 2) } else { (did, idx / 2) };
            let g = upstream.get(src).row(row).to_owned().insert_axis(Axis(0));
            let mut tape = Tape::new(model.params());
            let vars = model.forward(&mut tape, inp, None)?;
            let gv = tape.constant(g);
            let root = tape.matmul_t(vars.cls, gv);
            Ok(tape.backward(root))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.params().zeros_like();
    for g in &parts {
        grads.add_assign(g);
    }
    Ok((grads, loss))
}

/// Pre-trains a teacher encoder on ad-hoc query/document pairs and returns
/// the per-step losses.
pub fn pretrain_teacher(mut model: Model, pairs: &[Pair], config: &TeacherTrainConfig) -> Result<(Model, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("teacher pairs".into()));
    }
    let mut adam = Adam::new(model.params(), 0.9, 0.999, 1e-8);
    let mut losses = Vec::new();
    let bs = config.batch_size.max(2);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[Phase::Teacher.tag(), epoch as u64]));
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (grads, loss) = contrastive_gradient(&model, &batch, config.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "contrastive",
                    step: losses.len(),
                });
            }
            adam.step(model.params_mut(), &grads, config.learning_rate);
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

pub fn write_metrics_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,l_ts,l_ci,l_wr,l_kd,l_final\n");
    for entry in log {
        let r = &entry.report;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            entry.step, r.l_ts, r.l_ci, r.l_wr, r.l_kd, r.l_final
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |m: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: m.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err("bad number"));
        out.push(StepLog {
            step: fields[0].parse().map_err(|_| parse_err("bad step"))?,
            report: LossReport {
                l_ts: num(fields[1])?,
                l_ci: num(fields[2])?,
                l_wr: num(fields[3])?,
                l_kd: num(fields[4])?,
                l_final: num(fields[5])?,
            },
        });
    }
    Ok(out)
}

/// Mean of each logged term over a window of steps.
pub fn mean_report(log: &[StepLog]) -> LossReport {
    let mut acc = LossReport::default();
    for e in log {
        acc.accumulate(&e.report);
    }
    acc.scaled(1.0 / log.len().max(1) as f64)
}

/// Central-difference gradient of `f` with respect to every scalar of
/// every tensor, in `ParamSet` order.
pub fn finite_difference<F>(params: &mut ParamSet, eps: f64, mut f: F) -> Vec<Matrix>
where
    F: FnMut(&ParamSet) -> f64,
{
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = params.get(id).raw_dim();
        let mut g = Matrix::zeros(shape);
        let cols = g.len_of(Axis(1));
        for idx in 0..g.len() {
            let (r, c) = (idx / cols, idx % cols);
            let orig = params.get(id)[[r, c]];
            params.get_mut(id)[[r, c]] = orig + eps;
            let up = f(params);
            params.get_mut(id)[[r, c]] = orig - eps;
            let down = f(params);
            params.get_mut(id)[[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Conversation;
    use crate::encoder::{EncoderConfig, HeadParam, WordHeadInput};

    fn toy() -> (Vocabulary, Vec<Conversation>) {
        let convs = vec![
            Conversation::new("c1", vec!["tell me about rust".into(), "is it fast".into()])
                .unwrap()
                .with_reformulation("is rust fast"),
            Conversation::new("c2", vec!["what is tea".into(), "how is it brewed".into(), "is it hot".into()])
                .unwrap()
                .with_reformulation("is tea hot"),
            Conversation::new("c3", vec!["what is go".into(), "who made it".into()])
                .unwrap()
                .with_reformulation("who made go"),
        ];
        let texts: Vec<String> = convs
            .iter()
            .flat_map(|c| c.queries.iter().cloned().chain(c.reformulated_last.clone()))
            .collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1).unwrap();
        (vocab, convs)
    }

    fn cfg(v: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_size: 8,
            layers: 1,
            heads: 2,
            ff_size: 16,
            max_positions: 32,
            vocab_size: v,
            dropout: 0.1,
            word_head_input: WordHeadInput::Cls,
        }
    }

    fn setup() -> (Model, Teacher, Vec<Example>) {
        let (vocab, convs) = toy();
        let teacher = Teacher::freeze(Model::new(cfg(vocab.len()), false, &mut rng::stream(9, &[])).unwrap(), 32);
        let student = Model::new(cfg(vocab.len()), true, &mut rng::stream(1, &[])).unwrap();
        let tc = TaskConfig {
            max_len: 32,
            ..TaskConfig::default()
        };
        let instances = build_dataset(&convs, &convs, &vocab, &tc, 5).unwrap();
        let examples = prepare_examples(instances, &teacher).unwrap();
        (student, teacher, examples)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (student, _, examples) = setup();
        let before = student.params().checksum();
        let config = TrainConfig {
            learning_rate: 0.0,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(student, config, Phase::PostTrain).unwrap();
        t.run(&examples[..1], 1, Some(1)).unwrap();
        assert_eq!(t.log.len(), 1);
        assert_eq!(t.model.params().checksum(), before);
    }

    #[test]
    fn same_seed_same_result() {
        let (student, teacher, examples) = setup();
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = post_train(student.clone(), &examples, &teacher, &config).unwrap();
        let b = post_train(student, &examples, &teacher, &config).unwrap();
        assert_eq!(a.model.params().checksum(), b.model.params().checksum());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (student, _, examples) = setup();
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            post_train_epochs: 3,
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(student.clone(), config.clone(), Phase::PostTrain).unwrap();
        full.run(&examples, 3, None).unwrap();

        let mut first = Trainer::new(student, config.clone(), Phase::PostTrain).unwrap();
        first.run(&examples, 3, Some(3)).unwrap();
        assert_eq!(first.progress.epoch, 1);
        assert_eq!(first.progress.batch_in_epoch, 1);
        let mut resumed = Trainer {
            log: Vec::new(),
            ..first.clone()
        };
        resumed.run(&examples, 3, None).unwrap();
        assert_eq!(resumed.model.params().checksum(), full.model.params().checksum());
    }

    #[test]
    fn masked_coref_gives_zero_head_gradient() {
        let (student, _, mut examples) = setup();
        for ex in &mut examples {
            ex.instance.loss_mask.coref = false;
        }
        let batch: Vec<&Example> = examples.iter().collect();
        let opts = LossOptions::from(&TrainConfig::default());
        let (grads, report) = batch_gradient(&student, &batch, &opts, None).unwrap();
        assert_eq!(report.l_ci, 0.0);
        for hp in [HeadParam::CorefW, HeadParam::CorefB] {
            let id = student.head_param(hp).unwrap();
            assert!(grads.get(id).iter().all(|&v| v == 0.0));
        }
        let topic = student.head_param(HeadParam::TopicW).unwrap();
        assert!(grads.get(topic).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn teacher_untouched_by_training() {
        let (student, teacher, examples) = setup();
        let before = teacher.checksum();
        let config = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        post_train(student, &examples, &teacher, &config).unwrap();
        assert_eq!(teacher.checksum(), before);
    }

    #[test]
    fn fine_tune_zero_epochs_is_identity() {
        let (student, teacher, _) = setup();
        let (vocab, convs) = toy();
        let data = fine_tune_examples(&convs, &vocab, &teacher, 32).unwrap();
        assert!(data.iter().all(|e| e.instance.topic_labels.is_none()));
        let config = TrainConfig {
            fine_tune_epochs: 0,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let before = student.params().checksum();
        let out = fine_tune(student, &data, &config).unwrap();
        assert_eq!(out.model.params().checksum(), before);
    }

    #[test]
    fn fine_tune_requires_reformulations() {
        let (vocab, mut convs) = toy();
        convs[1].reformulated_last = None;
        let teacher = Teacher::freeze(Model::new(cfg(vocab.len()), false, &mut rng::stream(9, &[])).unwrap(), 32);
        assert!(fine_tune_examples(&convs, &vocab, &teacher, 32).is_err());
    }

    #[test]
    fn k_fold_partitions() {
        let folds = k_fold(25, 5).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.len(), 5);
            assert_eq!(f.train.len(), 20);
            assert!(f.test.iter().all(|i| !f.train.contains(i)));
        }
        assert!(k_fold(3, 5).is_err());
        assert_eq!(k_fold(7, 3).unwrap().iter().map(|f| f.test.len()).collect::<Vec<_>>(), [3, 2, 2]);
    }

    #[test]
    fn non_finite_loss_aborts_with_term() {
        let (mut student, _, examples) = setup();
        let tok = student.params().find("embeddings.token").unwrap();
        student.params_mut().get_mut(tok).fill(f64::NAN);
        let mut t = Trainer::new(student, TrainConfig::default(), Phase::PostTrain).unwrap();
        match t.run(&examples, 1, None) {
            Err(Error::NonFiniteLoss { term, step: 0 }) => assert_eq!(term, "l_ts"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn teacher_pretraining_reduces_loss() {
        let (vocab, convs) = toy();
        let raw: Vec<(String, String)> = convs
            .iter()
            .map(|c| (c.reformulated_last.clone().unwrap(), c.queries[0].clone()))
            .collect();
        let pairs = make_pairs(&raw, &vocab, 32).unwrap();
        let model = Model::new(cfg(vocab.len()), false, &mut rng::stream(2, &[])).unwrap();
        let config = TeacherTrainConfig {
            epochs: 60,
            batch_size: 3,
            learning_rate: 5e-3,
            ..TeacherTrainConfig::default()
        };
        let (_, losses) = pretrain_teacher(model, &pairs, &config).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let log = vec![StepLog {
            step: 3,
            report: LossReport {
                l_ts: 0.1,
                l_ci: 0.2,
                l_wr: 1.0 / 3.0,
                l_kd: 4.0,
                l_final: 5.5,
            },
        }];
        write_metrics_csv(&path, &log).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("step,l_ts,l_ci,l_wr,l_kd,l_final\n3,"));
        assert_eq!(read_metrics_csv(&path).unwrap(), log);
    }

    #[test]
    fn parallel_contrastive_gradient_matches_single_tape() {
        let (vocab, convs) = toy();
        let raw: Vec<(String, String)> = convs
            .iter()
            .map(|c| (c.reformulated_last.clone().unwrap(), c.queries[0].clone()))
            .collect();
        let pairs = make_pairs(&raw, &vocab, 32).unwrap();
        let model = Model::new(cfg(vocab.len()), false, &mut rng::stream(2, &[])).unwrap();
        let batch: Vec<&Pair> = pairs.iter().collect();
        let mut tape = Tape::new(model.params());
        let root = contrastive_loss(&model, &mut tape, &batch, 0.5).unwrap();
        let single = tape.backward(root);
        let (split, loss) = contrastive_gradient(&model, &batch, 0.5).unwrap();
        assert!((loss - tape.scalar(root)).abs() < 1e-12);
        for (a, b) in single.tensors().iter().zip(split.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
