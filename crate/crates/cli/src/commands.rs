use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ssp_core::checkpoint::Checkpoint;
use ssp_core::config::{default_config_text, FlatConfig};
use ssp_core::data::{read_conversations, read_corpus, read_jsonl, write_jsonl};
use ssp_core::experiment::DeskSetup;
use ssp_core::objectives::TaskMask;
use ssp_core::retrieval::{
    curve_to_csv, evaluate_run, index_corpus, read_qrels, retrieve, robustness_eval, write_qrels, write_run,
    DenseIndex, RobustnessSetup,
};
use ssp_core::synthetic::{build_world, generate_conversations};
use ssp_core::tasks::{
    build_dataset, noise_length_distribution, read_instance_cache, write_instance_cache, TrainingInstance,
};
use ssp_core::trainer::{
    fine_tune_examples, make_pairs, prepare_examples, pretrain_teacher as train_teacher, write_metrics_csv, Phase,
    Trainer,
};
use ssp_core::{rng, Conversation, Model, Teacher, Vocabulary};

use crate::manifest::ManifestBuilder;
use crate::{plot, ConfigArgs, EvalArgs, Preset, TrainArgs};

/// Malformed or missing user input; exits with status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use ssp_core::Error as E;
    for cause in e.chain() {
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Parse { .. }
                | E::InvalidConversation { .. }
                | E::Config(_)
                | E::MissingConfigKey(_)
                | E::Empty(_)
                | E::VocabMismatch { .. }
                | E::InvalidArgument(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

struct Loaded {
    cfg: FlatConfig,
    seed: u64,
    path: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<Loaded> {
    let mut cfg = match &args.config {
        Some(p) => FlatConfig::load(p)?,
        None => {
            let mut c = FlatConfig::parse(&default_config_text(), "<defaults>")?;
            c.remove("seed");
            c
        }
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| InputError(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim());
    }
    let seed = match cfg.resolve_seed(args.seed) {
        Ok(s) => s,
        Err(ssp_core::Error::MissingConfigKey(_)) => 0,
        Err(e) => return Err(e.into()),
    };
    Ok(Loaded {
        cfg,
        seed,
        path: args.config.clone(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_teacher_checkpoint(path: &Path, vocab: Option<&Vocabulary>) -> Result<(Checkpoint, Teacher)> {
    let hash = vocab.map(Vocabulary::hash);
    let mut ckpt = Checkpoint::load(path, hash.as_deref())?;
    let teacher = ckpt
        .teacher
        .take()
        .ok_or_else(|| InputError(format!("{} holds no teacher", path.display())))?;
    Ok((ckpt, teacher))
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    query: String,
    doc: String,
}

pub fn generate(args: &ConfigArgs, out: &Path) -> Result<()> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("generate", path.as_deref(), Some(seed));
    let spec = cfg.synthetic_spec(seed)?;
    let world = build_world(&spec)?;
    create_dir(out)?;
    let splits = [
        ("post", spec.n_conversations, 0, "p"),
        ("heldout", cfg.get_or("synthetic_heldout", 100)?, 1, "h"),
        ("train", cfg.get_or("synthetic_train", 100)?, 2, "s"),
        ("test", cfg.get_or("synthetic_test", 100)?, 3, "q"),
    ];
    for (name, n, stream, prefix) in splits {
        let (convs, truth, qrels) = generate_conversations(&world, &spec, n, stream, prefix)?;
        write_jsonl(&out.join(format!("{name}.jsonl")), &convs)?;
        write_jsonl(&out.join(format!("{name}_truth.jsonl")), &truth)?;
        write_qrels(&out.join(format!("{name}.qrels")), &qrels)?;
        for file in [format!("{name}.jsonl"), format!("{name}_truth.jsonl"), format!("{name}.qrels")] {
            manifest.output(&file);
        }
        println!("{name}: {} conversations", convs.len());
    }
    write_jsonl(&out.join("corpus.jsonl"), &world.corpus)?;
    let pairs: Vec<PairRow> = world
        .teacher_pairs()
        .into_iter()
        .map(|(query, doc)| PairRow { query, doc })
        .collect();
    write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
    println!("corpus: {} documents, {} teacher pairs", world.corpus.len(), pairs.len());
    manifest.output("corpus.jsonl").output("pairs.jsonl");
    manifest.finish(out)
}

pub fn vocab(args: &ConfigArgs, conversations: &[PathBuf], corpus: &[PathBuf], out: &Path) -> Result<()> {
    let Loaded { cfg, path, .. } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("vocab", path.as_deref(), None);
    let mut texts = Vec::new();
    for (i, p) in conversations.iter().enumerate() {
        manifest.input(&format!("conversations{i}"), p);
        for c in read_conversations(p)? {
            texts.extend(c.queries);
            texts.extend(c.reformulated_last);
        }
    }
    for (i, p) in corpus.iter().enumerate() {
        manifest.input(&format!("corpus{i}"), p);
        texts.extend(read_corpus(p)?.into_iter().map(|d| d.text));
    }
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), cfg.get_or("min_vocab_freq", 1)?)?;
    create_dir(out)?;
    vocab.save(&out.join("vocab.txt"))?;
    println!("vocabulary: {} entries ({})", vocab.len(), vocab.hash());
    manifest.output("vocab.txt");
    manifest.finish(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KBin {
    pub k: usize,
    pub count: usize,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataStats {
    pub instances: usize,
    pub perturbed: usize,
    pub with_reformulation: usize,
    pub coref_found: usize,
    pub coref_found_fraction: f64,
    pub truncated: usize,
    pub vocab_hash: String,
    /// Noise-prefix lengths against the mixture of `p_k` over the pool's
    /// session lengths.
    pub k_histogram: Vec<KBin>,
}

fn data_stats(instances: &[TrainingInstance], pool: &[Conversation], vocab: &Vocabulary) -> DataStats {
    let perturbed: Vec<usize> = instances.iter().filter(|i| i.topic_labels.is_some()).map(|i| i.noise_k).collect();
    let m_max = pool.iter().map(Conversation::len).max().unwrap_or(0);
    let mut expected = vec![0.0; m_max + 1];
    for c in pool {
        for (k, p) in noise_length_distribution(c.len()).into_iter().enumerate() {
            expected[k + 1] += p / pool.len() as f64;
        }
    }
    let mut counts = vec![0usize; m_max + 1];
    for &k in &perturbed {
        counts[k.min(m_max)] += 1;
    }
    let with_reformulation = instances.iter().filter(|i| i.coref_label.is_some()).count();
    let coref_found = instances
        .iter()
        .filter(|i| i.coref_label.as_ref().is_some_and(|c| c.found))
        .count();
    DataStats {
        instances: instances.len(),
        perturbed: perturbed.len(),
        with_reformulation,
        coref_found,
        coref_found_fraction: coref_found as f64 / with_reformulation.max(1) as f64,
        truncated: instances.iter().filter(|i| i.model_input.truncated).count(),
        vocab_hash: vocab.hash(),
        k_histogram: (1..=m_max)
            .map(|k| KBin {
                k,
                count: counts[k],
                observed: counts[k] as f64 / perturbed.len().max(1) as f64,
                expected: expected[k],
            })
            .collect(),
    }
}

pub fn build_data(
    args: &ConfigArgs,
    conversations: &Path,
    noise_pool: Option<&Path>,
    vocab_path: &Path,
    out: &Path,
) -> Result<()> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("build-data", path.as_deref(), Some(seed));
    manifest.input("conversations", conversations).input("vocab", vocab_path);
    let convs = read_conversations(conversations)?;
    if convs.is_empty() {
        bail!(InputError(format!("no conversations in {}", conversations.display())));
    }
    let pool = match noise_pool {
        Some(p) => {
            manifest.input("noise_pool", p);
            read_conversations(p)?
        }
        None => convs.clone(),
    };
    let vocab = Vocabulary::load(vocab_path)?;
    let task = cfg.task_config()?;
    let instances = build_dataset(&convs, &pool, &vocab, &task, seed)?;
    let stats = data_stats(&instances, &pool, &vocab);
    create_dir(out)?;
    write_jsonl(&out.join("instances.jsonl"), &instances)?;
    write_instance_cache(&out.join("instances.bin"), &instances)?;
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    println!(
        "{} instances, {} perturbed, coref found on {}/{} ({:.3})",
        stats.instances, stats.perturbed, stats.coref_found, stats.with_reformulation, stats.coref_found_fraction
    );
    println!("k\tcount\tobserved\texpected");
    for b in &stats.k_histogram {
        println!("{}\t{}\t{:.4}\t{:.4}", b.k, b.count, b.observed, b.expected);
    }
    manifest.output("instances.jsonl").output("instances.bin").output("stats.json");
    manifest.finish(out)
}

pub fn pretrain_teacher(args: &ConfigArgs, pairs_path: &Path, vocab_path: &Path, out: &Path) -> Result<()> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("pretrain-teacher", path.as_deref(), Some(seed));
    manifest.input("pairs", pairs_path).input("vocab", vocab_path);
    let rows: Vec<PairRow> = read_jsonl(pairs_path)?;
    if rows.is_empty() {
        bail!(InputError(format!("no pairs in {}", pairs_path.display())));
    }
    let vocab = Vocabulary::load(vocab_path)?;
    let encoder = cfg.encoder_config(vocab.len())?;
    let max_len = cfg.task_config()?.max_len;
    let text: Vec<(String, String)> = rows.into_iter().map(|r| (r.query, r.doc)).collect();
    let pairs = make_pairs(&text, &vocab, max_len)?;
    let init = Model::new(encoder, false, &mut rng::stream(seed, &[0x7e, 0]))?;
    let (model, losses) = train_teacher(init, &pairs, &cfg.teacher_config(seed)?)?;
    let teacher = Teacher::freeze(model, max_len);
    create_dir(out)?;
    let ckpt = Checkpoint::weights(Phase::Teacher, vocab.hash(), None, Some(teacher));
    ckpt.save(&out.join("teacher.ckpt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(out.join("losses.csv"), csv)?;
    println!(
        "teacher: {} steps, loss {:.4} -> {:.4}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    manifest.output("teacher.ckpt").output("losses.csv");
    manifest.finish(out)
}

fn load_instances(data: &Path) -> Result<(Vec<TrainingInstance>, Option<String>)> {
    if data.is_dir() {
        let stats: DataStats = serde_json::from_str(
            &std::fs::read_to_string(data.join("stats.json")).with_context(|| format!("reading {}/stats.json", data.display()))?,
        )?;
        return Ok((read_instance_cache(&data.join("instances.bin"))?, Some(stats.vocab_hash)));
    }
    let instances = match data.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_instance_cache(data)?,
        _ => read_jsonl(data)?,
    };
    Ok((instances, None))
}

fn finish_training(trainer: &Trainer, vocab_hash: String, teacher: Teacher, mut manifest: ManifestBuilder, out: &Path) -> Result<()> {
    create_dir(out)?;
    let ckpt = Checkpoint::from_trainer(trainer, vocab_hash, Some(teacher));
    ckpt.save(&out.join("checkpoint.ckpt"))?;
    write_metrics_csv(&out.join("metrics.csv"), &trainer.log)?;
    match ckpt.meta.metrics {
        Some(r) => println!(
            "{} steps (epoch {}); mean L_TS {:.4} L_CI {:.4} L_WR {:.4} L_KD {:.4} L_final {:.4}",
            trainer.progress.step, trainer.progress.epoch, r.l_ts, r.l_ci, r.l_wr, r.l_kd, r.l_final
        ),
        None => println!("0 steps"),
    }
    println!("student checksum {}", ckpt.student_checksum().unwrap_or_default());
    manifest.output("checkpoint.ckpt").output("metrics.csv");
    manifest.finish(out)
}

pub fn post_train(args: &ConfigArgs, train: &TrainArgs, data: &Path, teacher_path: &Path) -> Result<()> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("post-train", path.as_deref(), Some(seed));
    manifest.input("data", data).input("teacher", teacher_path);
    let mut config = cfg.train_config(seed)?;
    if let Some(e) = train.epochs {
        config.post_train_epochs = e;
    }
    let (teacher_ckpt, teacher) = load_teacher_checkpoint(teacher_path, None)?;
    let vocab_hash = teacher_ckpt.vocab_hash;
    let (instances, data_hash) = load_instances(data)?;
    if let Some(h) = data_hash.filter(|h| *h != vocab_hash) {
        bail!(ssp_core::Error::VocabMismatch {
            expected: vocab_hash,
            found: h
        });
    }
    let examples = prepare_examples(instances, &teacher)?;

    let mut trainer = match &train.checkpoint {
        Some(p) if train.resume => {
            manifest.input("checkpoint", p);
            let ckpt = Checkpoint::load(p, Some(&vocab_hash))?;
            if ckpt.meta.phase != Phase::PostTrain {
                bail!(InputError(format!("{} is not a post-training checkpoint", p.display())));
            }
            let (mut t, _) = ckpt.into_trainer(None)?;
            if let Some(e) = train.epochs {
                t.config.post_train_epochs = e;
            }
            t
        }
        Some(p) => {
            manifest.input("checkpoint", p);
            let student = Checkpoint::load(p, Some(&vocab_hash))?
                .student
                .ok_or_else(|| InputError(format!("{} holds no student", p.display())))?;
            Trainer::new(student, config, Phase::PostTrain)?
        }
        None => {
            let mut student = Model::new(teacher.model().config().clone(), true, &mut rng::stream(seed, &[0x57, 0]))?;
            match cfg.raw("student_init").unwrap_or("teacher") {
                "teacher" => student.copy_body_from(teacher.model())?,
                "random" => {}
                other => bail!(InputError(format!("student_init = {other:?}; expected teacher or random"))),
            }
            Trainer::new(student, config, Phase::PostTrain)?
        }
    };
    let epochs = trainer.config.post_train_epochs;
    let before = teacher.checksum();
    trainer.run(&examples, epochs, train.max_steps)?;
    anyhow::ensure!(before == teacher.checksum(), "teacher parameters changed during post-training");
    finish_training(&trainer, vocab_hash, teacher, manifest, &train.out)
}

pub fn fine_tune(args: &ConfigArgs, train: &TrainArgs, data: &Path, vocab_path: &Path) -> Result<()> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("fine-tune", path.as_deref(), Some(seed));
    manifest.input("data", data).input("vocab", vocab_path);
    let ckpt_path = train
        .checkpoint
        .as_ref()
        .ok_or_else(|| InputError("fine-tune needs --checkpoint with a student and a teacher".into()))?;
    manifest.input("checkpoint", ckpt_path);
    let mut config = cfg.train_config(seed)?;
    config.learning_rate = cfg.get_or("fine_tune_learning_rate", config.learning_rate)?;
    config.tasks = TaskMask {
        topic: false,
        coref: false,
        wr: false,
        kd: true,
    };
    let vocab = Vocabulary::load(vocab_path)?;
    let (ckpt, teacher) = load_teacher_checkpoint(ckpt_path, Some(&vocab))?;
    let convs = read_conversations(data)?;
    if convs.is_empty() {
        bail!(InputError(format!("no conversations in {}", data.display())));
    }
    let examples = fine_tune_examples(&convs, &vocab, &teacher, teacher.max_len())?;

    let mut trainer = if train.resume {
        if ckpt.meta.phase != Phase::FineTune {
            bail!(InputError(format!("{} is not a fine-tuning checkpoint", ckpt_path.display())));
        }
        ckpt.into_trainer(None)?.0
    } else {
        let student = ckpt
            .student
            .ok_or_else(|| InputError(format!("{} holds no student", ckpt_path.display())))?;
        Trainer::new(student, config, Phase::FineTune)?
    };
    if let Some(e) = train.epochs {
        trainer.config.fine_tune_epochs = e;
    }
    let epochs = trainer.config.fine_tune_epochs;
    trainer.run(&examples, epochs, train.max_steps)?;
    finish_training(&trainer, vocab.hash(), teacher, manifest, &train.out)
}

pub fn index(args: &ConfigArgs, corpus: &Path, checkpoint: &Path, vocab_path: &Path, out: &Path) -> Result<()> {
    let Loaded { path, .. } = load_config(args)?;
    let mut manifest = ManifestBuilder::new("index", path.as_deref(), None);
    manifest.input("corpus", corpus).input("checkpoint", checkpoint).input("vocab", vocab_path);
    let vocab = Vocabulary::load(vocab_path)?;
    let (_, teacher) = load_teacher_checkpoint(checkpoint, Some(&vocab))?;
    let docs = read_corpus(corpus)?;
    if docs.is_empty() {
        bail!(InputError(format!("no documents in {}", corpus.display())));
    }
    let index = index_corpus(&docs, &teacher, &vocab)?;
    create_dir(out)?;
    index.save(&out.join("index.bin"))?;
    println!("indexed {} documents ({} dims)", index.len(), index.dim());
    manifest.output("index.bin");
    manifest.finish(out)
}

struct EvalInputs {
    cfg: FlatConfig,
    seed: u64,
    path: Option<PathBuf>,
    convs: Vec<Conversation>,
    vocab: Vocabulary,
    index: DenseIndex,
    qrels: ssp_core::Qrels,
    model: Model,
}

fn load_eval(args: &ConfigArgs, eval: &EvalArgs, manifest_inputs: &mut BTreeMap<String, PathBuf>) -> Result<EvalInputs> {
    let Loaded { cfg, seed, path } = load_config(args)?;
    for (k, v) in [
        ("conversations", &eval.conversations),
        ("index", &eval.index),
        ("checkpoint", &eval.checkpoint),
        ("vocab", &eval.vocab),
        ("qrels", &eval.qrels),
    ] {
        manifest_inputs.insert(k.to_string(), v.clone());
    }
    let vocab = Vocabulary::load(&eval.vocab)?;
    let (ckpt, teacher) = load_teacher_checkpoint(&eval.checkpoint, Some(&vocab))?;
    let model = if eval.use_teacher {
        teacher.into_model()
    } else {
        ckpt.student
            .ok_or_else(|| InputError(format!("{} holds no student; pass --use-teacher", eval.checkpoint.display())))?
    };
    let convs = read_conversations(&eval.conversations)?;
    if convs.is_empty() {
        bail!(InputError(format!("no conversations in {}", eval.conversations.display())));
    }
    Ok(EvalInputs {
        cfg,
        seed,
        path,
        convs,
        vocab,
        index: DenseIndex::load(&eval.index)?,
        qrels: read_qrels(&eval.qrels)?,
        model,
    })
}

pub fn eval(args: &ConfigArgs, eval: &EvalArgs) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let e = load_eval(args, eval, &mut inputs)?;
    let mut manifest = ManifestBuilder::new("eval", e.path.as_deref(), None);
    for (k, v) in &inputs {
        manifest.input(k, v);
    }
    let max_len = e.cfg.task_config()?.max_len;
    let top_k = e.cfg.get_or("top_k", 100)?;
    let run = retrieve(&e.model, &e.convs, &e.vocab, &e.index, max_len, top_k)?;
    let metrics = evaluate_run(&run, &e.qrels, &e.cfg.metric_options()?)?;
    create_dir(&eval.out)?;
    write_run(&run, &eval.out.join("run.trec"), "ssp")?;
    std::fs::write(eval.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    println!("MRR {:.4}\tNDCG@3 {:.4}", metrics.mrr, metrics.ndcg3);
    manifest.output("run.trec").output("metrics.json");
    manifest.finish(&eval.out)
}

pub fn robustness(args: &ConfigArgs, eval: &EvalArgs, noise_pool: Option<&Path>, max_added: usize) -> Result<()> {
    let mut inputs = BTreeMap::new();
    let e = load_eval(args, eval, &mut inputs)?;
    let mut manifest = ManifestBuilder::new("robustness", e.path.as_deref(), Some(e.seed));
    for (k, v) in &inputs {
        manifest.input(k, v);
    }
    let pool = match noise_pool {
        Some(p) => {
            manifest.input("noise_pool", p);
            read_conversations(p)?
        }
        None => e.convs.clone(),
    };
    let setup = RobustnessSetup {
        vocab: &e.vocab,
        index: &e.index,
        qrels: &e.qrels,
        noise_pool: &pool,
        max_len: e.cfg.task_config()?.max_len,
        top_k: e.cfg.get_or("top_k", 100)?,
        seed: e.seed,
        metrics: e.cfg.metric_options()?,
    };
    let curve = robustness_eval(&e.model, &e.convs, &setup, max_added)?;
    create_dir(&eval.out)?;
    std::fs::write(eval.out.join("curve.csv"), curve_to_csv(&curve))?;
    plot::robustness_svg(&eval.out.join("curve.svg"), &curve)?;
    println!("j\tMRR\tNDCG@3");
    for p in &curve {
        println!("{}\t{:.4}\t{:.4}", p.added, p.mrr, p.ndcg3);
    }
    manifest.output("curve.csv").output("curve.svg");
    manifest.finish(&eval.out)
}

pub fn plot(input: &Path, out: &Path) -> Result<()> {
    let mut manifest = ManifestBuilder::new("plot", None, None);
    manifest.input("input", input);
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("cannot name a plot for {}", input.display()))?;
    let name = format!("{stem}.svg");
    create_dir(out)?;
    plot::csv_svg(&out.join(&name), &text, &input.display().to_string())?;
    manifest.output(&name);
    manifest.finish(out)
}

/// The reference file with the desk-scale optimization settings swapped in.
fn desk_config_text() -> String {
    let desk = DeskSetup::default();
    let t = &desk.train;
    let replace: BTreeMap<&str, String> = [
        ("learning_rate", t.learning_rate.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("fine_tune_learning_rate", desk.fine_tune_learning_rate.to_string()),
        ("alpha", t.weights.alpha.to_string()),
        ("beta", t.weights.beta.to_string()),
        ("gamma", t.weights.gamma.to_string()),
        ("top_k", "10".to_string()),
    ]
    .into_iter()
    .collect();
    default_config_text()
        .lines()
        .map(|line| {
            let key = line.split_once('=').map(|(k, _)| k.trim());
            match key.and_then(|k| replace.get(k).map(|v| (k, v))) {
                Some((k, v)) => format!("{k} = {v}\n"),
                None => format!("{line}\n"),
            }
        })
        .collect()
}

pub fn init_config(preset: Preset, out: &Path) -> Result<()> {
    let text = match preset {
        Preset::Reference => default_config_text(),
        Preset::Desk => desk_config_text(),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_parses_to_desk_training() {
        let cfg = FlatConfig::parse(&desk_config_text(), "desk").unwrap();
        let desk = DeskSetup::default();
        let t = cfg.train_config(0).unwrap();
        assert_eq!(t.learning_rate, desk.train.learning_rate);
        assert_eq!(t.batch_size, desk.train.batch_size);
        assert_eq!(t.weights, desk.train.weights);
        assert_eq!(cfg.require::<f64>("fine_tune_learning_rate").unwrap(), desk.fine_tune_learning_rate);
    }

    #[test]
    fn exit_codes_separate_input_errors() {
        assert_eq!(exit_code(&anyhow!(InputError("no conversations".into()))), 2);
        assert_eq!(exit_code(&ssp_core::Error::MissingConfigKey("alpha".into()).into()), 2);
        assert_eq!(exit_code(&ssp_core::Error::Checkpoint("bad".into()).into()), 1);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }
}
