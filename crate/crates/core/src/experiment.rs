//! End-to-end desk experiment on synthetic data: teacher pre-training,
//! post-training variants, distillation fine-tuning and evaluation.
//!
//! Conversation sets drawn from one world:
//! - post-training corpus (the self-supervised stage),
//! - a held-out post-training-style set for probing the heads,
//! - target-task train/test conversations with qrels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Vocabulary};
use crate::encoder::{EncoderConfig, Model, Teacher};
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, TaskMask};
use crate::retrieval::{
    evaluate_run, index_corpus, retrieve, robustness_eval, CurvePoint, DenseIndex, Evaluation, MetricOptions, Qrels,
    RobustnessSetup,
};
use crate::rng;
use crate::synthetic::{build_world, generate_conversations, PlantedTruth, SyntheticSpec, World};
use crate::tasks::{build_dataset, TaskConfig};
use crate::trainer::{
    evaluate_loss, fine_tune, fine_tune_examples, make_pairs, post_train, pretrain_teacher, prepare_examples, Example,
    LossOptions, StepLog, TeacherTrainConfig, TrainConfig,
};

/// Which self-supervised pieces a post-training run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// All three tasks plus distillation, noise prefixes on.
    Full,
    /// No topic task; without it the noise prefix has no purpose and is off.
    NoTopic,
    NoCoref,
    NoWord,
    /// Distillation only on the same data, no noise: the warm-up baseline.
    KdOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoTopic, Variant::NoCoref, Variant::NoWord, Variant::KdOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "ssp",
            Variant::NoTopic => "w/o ts",
            Variant::NoCoref => "w/o ci",
            Variant::NoWord => "w/o wr",
            Variant::KdOnly => "kd-only",
        }
    }

    pub fn tasks(self) -> TaskMask {
        let mut m = TaskMask::ALL;
        match self {
            Variant::Full => {}
            Variant::NoTopic => m.topic = false,
            Variant::NoCoref => m.coref = false,
            Variant::NoWord => m.wr = false,
            Variant::KdOnly => {
                m = TaskMask {
                    topic: false,
                    coref: false,
                    wr: false,
                    kd: true,
                }
            }
        }
        m
    }

    pub fn perturb(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCoref | Variant::NoWord)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub spec: SyntheticSpec,
    pub n_post: usize,
    pub n_heldout: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub teacher: TeacherTrainConfig,
    /// Post-training settings; `fine_tune_epochs` drives the second stage.
    pub train: TrainConfig,
    pub fine_tune_learning_rate: f64,
    /// Start the student's encoder body from the teacher's weights.
    pub student_from_teacher: bool,
    pub metrics: MetricOptions,
}

impl Default for DeskSetup {
    /// Desk-scale optimization: the reference learning rate and batch size
    /// need far more steps than a few hundred conversations provide, and the
    /// reference task weights leave the freshly initialized heads too weak
    /// to pull the shared encoder away from the distillation target.
    fn default() -> Self {
        DeskSetup {
            spec: SyntheticSpec::default(),
            n_post: 500,
            n_heldout: 100,
            n_target_train: 100,
            n_target_test: 100,
            encoder: EncoderConfig::new(0),
            task: TaskConfig::default(),
            teacher: TeacherTrainConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 2,
                post_train_epochs: 2,
                fine_tune_epochs: 2,
                weights: LossWeights { alpha: 10.0, beta: 10.0, gamma: 1.0 },
                ..TrainConfig::default()
            },
            fine_tune_learning_rate: 3e-4,
            student_from_teacher: true,
            metrics: MetricOptions::default(),
        }
    }
}

/// Everything shared between variants and seeds.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub setup: DeskSetup,
    pub world: World,
    pub vocab: Vocabulary,
    pub teacher: Teacher,
    pub teacher_losses: Vec<f64>,
    pub post: Vec<Conversation>,
    pub heldout: Vec<Conversation>,
    pub heldout_truth: Vec<PlantedTruth>,
    pub target_train: Vec<Conversation>,
    pub target_test: Vec<Conversation>,
    pub test_qrels: Qrels,
    pub index: DenseIndex,
}

impl Workbench {
    pub fn build(setup: DeskSetup) -> Result<Self> {
        let spec = &setup.spec;
        let world = build_world(spec)?;
        let (post, _, _) = generate_conversations(&world, spec, setup.n_post, 0, "p")?;
        let (heldout, heldout_truth, _) = generate_conversations(&world, spec, setup.n_heldout, 1, "h")?;
        let (target_train, _, _) = generate_conversations(&world, spec, setup.n_target_train, 2, "s")?;
        let (target_test, _, test_qrels) = generate_conversations(&world, spec, setup.n_target_test, 3, "q")?;

        let pairs_text = world.teacher_pairs();
        let texts = post
            .iter()
            .chain(&heldout)
            .chain(&target_train)
            .chain(&target_test)
            .flat_map(|c| c.queries.iter().chain(c.reformulated_last.iter()))
            .map(String::as_str)
            .chain(world.corpus.iter().map(|d| d.text.as_str()));
        let vocab = Vocabulary::build(texts, 1)?;

        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            ..setup.encoder.clone()
        };
        let max_len = setup.task.max_len;
        let pairs = make_pairs(&pairs_text, &vocab, max_len)?;
        let init = Model::new(encoder, false, &mut rng::stream(setup.teacher.seed, &[0x7e, 0]))?;
        let (teacher_model, teacher_losses) = pretrain_teacher(init, &pairs, &setup.teacher)?;
        let teacher = Teacher::freeze(teacher_model, max_len);
        let index = index_corpus(&world.corpus, &teacher, &vocab)?;
        Ok(Workbench {
            setup,
            world,
            vocab,
            teacher,
            teacher_losses,
            post,
            heldout,
            heldout_truth,
            target_train,
            target_test,
            test_qrels,
            index,
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.teacher.model().config().clone()
    }

    /// Student initialization; shared by every variant at a given seed.
    pub fn init_student(&self, seed: u64) -> Result<Model> {
        let mut model = Model::new(self.encoder_config(), true, &mut rng::stream(seed, &[0x57, 0]))?;
        if self.setup.student_from_teacher {
            model.copy_body_from(self.teacher.model())?;
        }
        Ok(model)
    }

    fn task_config(&self, perturb: bool) -> TaskConfig {
        TaskConfig {
            perturb_prob: if perturb { self.setup.task.perturb_prob } else { 0.0 },
            ..self.setup.task.clone()
        }
    }

    /// Post-training instances for `variant` (the noise pool is the
    /// post-training corpus itself).
    pub fn post_examples(&self, variant: Variant, seed: u64) -> Result<Vec<Example>> {
        let instances = build_dataset(&self.post, &self.post, &self.vocab, &self.task_config(variant.perturb()), seed)?;
        prepare_examples(instances, &self.teacher)
    }

    /// Perturbed held-out instances for probing the heads.
    pub fn heldout_examples(&self, seed: u64) -> Result<Vec<Example>> {
        let instances = build_dataset(&self.heldout, &self.heldout, &self.vocab, &self.task_config(true), seed ^ 0x4e1d)?;
        prepare_examples(instances, &self.teacher)
    }

    pub fn post_train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            tasks: variant.tasks(),
            ..self.setup.train.clone()
        }
    }

    pub fn post_train(&self, variant: Variant, seed: u64) -> Result<(Model, Vec<StepLog>)> {
        let data = self.post_examples(variant, seed)?;
        let out = post_train(self.init_student(seed)?, &data, &self.teacher, &self.post_train_config(variant, seed))?;
        Ok((out.model, out.log))
    }

    pub fn fine_tune(&self, model: Model, seed: u64) -> Result<Model> {
        let data = fine_tune_examples(&self.target_train, &self.vocab, &self.teacher, self.setup.task.max_len)?;
        let cfg = TrainConfig {
            seed,
            learning_rate: self.setup.fine_tune_learning_rate,
            ..self.setup.train.clone()
        };
        Ok(fine_tune(model, &data, &cfg)?.model)
    }

    pub fn evaluate(&self, model: &Model) -> Result<Evaluation> {
        let run = retrieve(model, &self.target_test, &self.vocab, &self.index, self.setup.task.max_len, 10)?;
        evaluate_run(&run, &self.test_qrels, &self.setup.metrics)
    }

    /// Ceiling: the teacher retrieving with the reformulated queries.
    pub fn teacher_ceiling(&self) -> Result<Evaluation> {
        let rewritten: Vec<Conversation> = self
            .target_test
            .iter()
            .map(|c| {
                Conversation::new(c.conv_id.clone(), vec![c.reformulated_last.clone().unwrap_or_default()])
            })
            .collect::<Result<_>>()?;
        let run = retrieve(self.teacher.model(), &rewritten, &self.vocab, &self.index, self.setup.task.max_len, 10)?;
        evaluate_run(&run, &self.test_qrels, &self.setup.metrics)
    }

    pub fn robustness(&self, model: &Model, max_added: usize, seed: u64) -> Result<Vec<CurvePoint>> {
        let setup = RobustnessSetup {
            vocab: &self.vocab,
            index: &self.index,
            qrels: &self.test_qrels,
            noise_pool: &self.target_test,
            max_len: self.setup.task.max_len,
            top_k: 10,
            seed,
            metrics: self.setup.metrics,
        };
        robustness_eval(model, &self.target_test, &setup, max_added)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadProbe {
    /// Fraction of `[SEP]` positions whose thresholded topic prediction is right.
    pub topic_accuracy: f64,
    /// Top-1 accuracy of the coreference argmax over instances with a label.
    pub coref_accuracy: f64,
    pub coref_instances: usize,
    pub mean_l_wr: f64,
}

pub fn probe_heads(model: &Model, examples: &[Example]) -> Result<HeadProbe> {
    if examples.is_empty() {
        return Err(Error::Empty("probe examples".into()));
    }
    let opts = LossOptions {
        weights: LossWeights::default(),
        tasks: TaskMask::ALL,
        squared_norms: false,
    };
    let rows: Vec<(usize, usize, Option<bool>, f64)> = examples
        .par_iter()
        .map(|ex| {
            let inst = &ex.instance;
            let out = model.encode(&inst.model_input)?;
            let (mut right, mut total) = (0, 0);
            if let Some(labels) = &inst.topic_labels {
                let p = model.predict_topic(&out.sep_vectors)?;
                for (p, &l) in p.iter().zip(labels) {
                    right += usize::from((*p >= 0.5) == (l == 1));
                    total += 1;
                }
            }
            let coref = match &inst.coref_label {
                Some(c) if inst.loss_mask.coref => {
                    let p = model.predict_coref(&out.sep_vectors)?;
                    let arg = p
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                        .0;
                    Some(c.target() == Some(arg))
                }
                _ => None,
            };
            let wr = evaluate_loss(model, ex, &opts)?.l_wr;
            Ok((right, total, coref, wr))
        })
        .collect::<Result<_>>()?;
    let (right, total) = rows.iter().fold((0, 0), |a, r| (a.0 + r.0, a.1 + r.1));
    let corefs: Vec<bool> = rows.iter().filter_map(|r| r.2).collect();
    Ok(HeadProbe {
        topic_accuracy: right as f64 / total.max(1) as f64,
        coref_accuracy: corefs.iter().filter(|&&b| b).count() as f64 / corefs.len().max(1) as f64,
        coref_instances: corefs.len(),
        mean_l_wr: rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64,
    })
}
