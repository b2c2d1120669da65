//! Construction of self-supervised training instances: noise-prefixed
//! conversations with topic labels, coreference labels derived from the
//! manual reformulation, and bag-of-words reconstruction targets.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_from_ids, build_single_input, tokenize, to_word_set, Conversation, ModelInput, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::TaskMask;

/// Draws `k ∈ [1, m]` with probability `(1/k) / H_m`.
pub fn sample_noise_length<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<usize> {
    if m == 0 {
        return Err(Error::InvalidArgument("noise session length must be at least 1".into()));
    }
    let harmonic: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.random::<f64>() * harmonic;
    for k in 1..=m {
        u -= 1.0 / k as f64;
        if u < 0.0 {
            return Ok(k);
        }
    }
    Ok(m)
}

/// `p_k` for `k = 1..=m`.
pub fn noise_length_distribution(m: usize) -> Vec<f64> {
    let harmonic: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    (1..=m).map(|k| 1.0 / k as f64 / harmonic).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedConversation {
    pub conversation: Conversation,
    pub topic_labels: Vec<u8>,
    pub k: usize,
    pub noise_source_id: String,
}

pub fn build_perturbed_conversation<R: Rng + ?Sized>(
    raw: &Conversation,
    noise: &Conversation,
    rng: &mut R,
) -> Result<PerturbedConversation> {
    let k = sample_noise_length(noise.len(), rng)?;
    perturb_with_k(raw, noise, k)
}

/// Prepends the first `k` queries of `noise` to `raw`.
pub fn perturb_with_k(raw: &Conversation, noise: &Conversation, k: usize) -> Result<PerturbedConversation> {
    if noise.conv_id == raw.conv_id {
        return Err(Error::InvalidArgument(format!(
            "noise session {} is the raw conversation itself",
            noise.conv_id
        )));
    }
    if k == 0 || k > noise.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            noise.len()
        )));
    }
    let mut queries: Vec<String> = noise.queries[..k].to_vec();
    queries.extend(raw.queries.iter().cloned());
    let mut topic_labels = vec![1u8; k];
    topic_labels.resize(k + raw.len(), 0);
    Ok(PerturbedConversation {
        conversation: Conversation {
            conv_id: raw.conv_id.clone(),
            queries,
            reformulated_last: raw.reformulated_last.clone(),
            source_tag: raw.source_tag.clone(),
        },
        topic_labels,
        k,
        noise_source_id: noise.conv_id.clone(),
    })
}

/// `r = S(tokenize(q*_n)) − S(tokenize(q_n))`.
pub fn derive_reformulation_terms(last_query: &str, reformulated: &str) -> BTreeSet<String> {
    let raw = to_word_set(&tokenize(last_query));
    to_word_set(&tokenize(reformulated))
        .into_iter()
        .filter(|t| !raw.contains(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreferenceLabel {
    /// One entry per context utterance `1..n-1`.
    pub label: Vec<u8>,
    pub reformulation_terms: BTreeSet<String>,
    pub found: bool,
}

impl CoreferenceLabel {
    pub fn target(&self) -> Option<usize> {
        self.label.iter().position(|&v| v == 1)
    }
}

/// Scans the context utterances from the latest to the earliest and marks
/// the first one whose word set intersects `terms`.
pub fn locate_referred_query(conversation: &Conversation, terms: &BTreeSet<String>) -> CoreferenceLabel {
    let n_context = conversation.len().saturating_sub(1);
    let mut label = vec![0u8; n_context];
    let hit = if terms.is_empty() {
        None
    } else {
        (0..n_context).rev().find(|&j| {
            tokenize(&conversation.queries[j])
                .iter()
                .any(|t| terms.contains(t))
        })
    };
    if let Some(j) = hit {
        label[j] = 1;
    }
    CoreferenceLabel {
        label,
        reformulation_terms: terms.clone(),
        found: hit.is_some(),
    }
}

/// Binary bag-of-words over the vocabulary. Specials, including `[UNK]`,
/// are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowTarget {
    pub vector: Vec<u8>,
}

impl BowTarget {
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.vector.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }
}

pub fn build_bow_target(conversation: &Conversation, vocab: &Vocabulary) -> BowTarget {
    let mut vector = vec![0u8; vocab.len()];
    for q in &conversation.queries {
        for id in vocab.encode(q) {
            if !Vocabulary::is_special(id) {
                vector[id] = 1;
            }
        }
    }
    BowTarget { vector }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub max_len: usize,
    /// Probability that an instance receives a noise prefix.
    pub perturb_prob: f64,
    /// Minimum number of candidate noise sessions after excluding the raw
    /// conversation.
    pub min_noise_pool: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            max_len: 256,
            perturb_prob: 1.0,
            min_noise_pool: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub conv_id: String,
    pub model_input: ModelInput,
    /// One label per utterance surviving in `model_input`.
    pub topic_labels: Option<Vec<u8>>,
    /// Label over the context utterances of `model_input` (all but the last).
    pub coref_label: Option<CoreferenceLabel>,
    pub bow_target: BowTarget,
    pub teacher_input: Option<ModelInput>,
    pub loss_mask: TaskMask,
    #[serde(default)]
    pub noise_k: usize,
}

/// Assembles one instance. Labels are computed on the raw conversation and
/// re-indexed into the (possibly noise-prefixed, possibly truncated) input.
pub fn build_training_instance<R: Rng + ?Sized>(
    raw: &Conversation,
    noise_pool: &[Conversation],
    vocab: &Vocabulary,
    config: &TaskConfig,
    rng: &mut R,
) -> Result<TrainingInstance> {
    raw.validate()?;
    let perturbed = if config.perturb_prob > 0.0 && rng.random::<f64>() < config.perturb_prob {
        let candidates: Vec<&Conversation> = noise_pool
            .iter()
            .filter(|c| c.conv_id != raw.conv_id)
            .collect();
        if candidates.len() < config.min_noise_pool.max(1) {
            return Err(Error::NoisePoolTooSmall(format!(
                "{} candidate sessions for {}, need {}",
                candidates.len(),
                raw.conv_id,
                config.min_noise_pool.max(1)
            )));
        }
        let noise = candidates[rng.random_range(0..candidates.len())];
        Some(build_perturbed_conversation(raw, noise, rng)?)
    } else {
        None
    };

    let (input_conv, k) = match &perturbed {
        Some(p) => (&p.conversation, p.k),
        None => (raw, 0),
    };
    let utterances: Vec<Vec<usize>> = input_conv.queries.iter().map(|q| vocab.encode(q)).collect();
    let model_input = build_from_ids(&utterances, config.max_len)?;
    let dropped = model_input.dropped_utterances;

    let topic_labels = perturbed.as_ref().map(|p| p.topic_labels[dropped..].to_vec());

    let coref_label = raw.reformulated_last.as_ref().map(|reform| {
        let terms = derive_reformulation_terms(raw.last_query(), reform);
        let located = locate_referred_query(raw, &terms);
        let n_context = model_input.num_utterances() - 1;
        let mut label = vec![0u8; n_context];
        let mut found = false;
        if let Some(j) = located.target() {
            // shift into the perturbed input, then account for truncation
            let idx = j + k;
            if idx >= dropped {
                label[idx - dropped] = 1;
                found = true;
            }
        }
        CoreferenceLabel {
            label,
            reformulation_terms: located.reformulation_terms,
            found,
        }
    });

    let teacher_input = raw
        .reformulated_last
        .as_ref()
        .map(|q| build_single_input(q, vocab, config.max_len))
        .transpose()?;

    let loss_mask = TaskMask {
        topic: topic_labels.is_some(),
        coref: coref_label.as_ref().is_some_and(|c| c.found),
        wr: true,
        kd: teacher_input.is_some(),
    };

    Ok(TrainingInstance {
        conv_id: raw.conv_id.clone(),
        model_input,
        topic_labels,
        coref_label,
        bow_target: build_bow_target(raw, vocab),
        teacher_input,
        loss_mask,
        noise_k: k,
    })
}

/// Builds one instance per conversation. Instance `i` draws from its own
/// rng stream derived from `seed` and `i`, so the result does not depend
/// on evaluation order.
pub fn build_dataset(
    conversations: &[Conversation],
    noise_pool: &[Conversation],
    vocab: &Vocabulary,
    config: &TaskConfig,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    use rayon::prelude::*;
    conversations
        .par_iter()
        .enumerate()
        .map(|(i, conv)| {
            let mut rng = crate::rng::stream(seed, &[0x7a5c, i as u64]);
            build_training_instance(conv, noise_pool, vocab, config, &mut rng)
        })
        .collect()
}

const CACHE_MAGIC: &[u8; 8] = b"SSPINST1";

/// Binary instance cache: magic, then a bincode-encoded instance vector.
pub fn write_instance_cache(path: &std::path::Path, instances: &[TrainingInstance]) -> Result<()> {
    let mut bytes = CACHE_MAGIC.to_vec();
    bincode::serialize_into(&mut bytes, instances).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_instance_cache(path: &std::path::Path) -> Result<Vec<TrainingInstance>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let body = bytes
        .strip_prefix(CACHE_MAGIC.as_slice())
        .ok_or_else(|| Error::Checkpoint(format!("{} is not an instance cache", path.display())))?;
    bincode::deserialize(body).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn conv(id: &str, queries: &[&str]) -> Conversation {
        Conversation::new(id, queries.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn topic_31() -> Conversation {
        conv(
            "31",
            &[
                "What is throat cancer?",
                "Is it treatable?",
                "Tell me about lung cancer.",
                "What are its symptoms?",
                "Can it spread to the throat?",
                "What causes throat cancer?",
                "What is the first sign of it?",
                "Is it the same as esophageal cancer?",
            ],
        )
        .with_reformulation("Is throat cancer the same as esophageal cancer?")
    }

    fn topic_58() -> Conversation {
        conv(
            "58",
            &[
                "What is a real-time database?",
                "How does it differ from traditional ones?",
                "What are the advantages of real-time processing?",
                "What are examples of important ones?",
            ],
        )
        .with_reformulation("What are examples of important real-time databases?")
    }

    #[test]
    fn sampler_rejects_zero() {
        assert!(sample_noise_length(0, &mut rng::stream(1, &[])).is_err());
    }

    #[test]
    fn sampler_single_outcome() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..100 {
            assert_eq!(sample_noise_length(1, &mut r).unwrap(), 1);
        }
    }

    #[test]
    fn distribution_values() {
        let p = noise_length_distribution(3);
        for (got, want) in p.iter().zip([6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let p = noise_length_distribution(5);
        assert!((p[0] - 60.0 / 137.0).abs() < 1e-12);
        assert!((p[0] - 0.4380).abs() < 1e-4);
        assert!((p[4] - 0.0876).abs() < 1e-4);
    }

    #[test]
    fn forced_perturbation_labels() {
        let raw = conv("r", &["a", "b"]);
        let noise = conv("n", &["x", "y", "z"]);
        let p = perturb_with_k(&raw, &noise, 2).unwrap();
        assert_eq!(p.conversation.queries, ["x", "y", "a", "b"]);
        assert_eq!(p.topic_labels, [1, 1, 0, 0]);
        let single = conv("n1", &["x"]);
        let p = perturb_with_k(&raw, &single, 1).unwrap();
        assert_eq!(p.topic_labels, [1, 0, 0]);
        assert!(perturb_with_k(&raw, &raw, 1).is_err());
        assert!(perturb_with_k(&raw, &noise, 4).is_err());
    }

    #[test]
    fn reformulation_terms_from_examples() {
        let c = topic_31();
        let r = derive_reformulation_terms(c.last_query(), c.reformulated_last.as_deref().unwrap());
        assert_eq!(r, set(&["throat"]));
        assert!(derive_reformulation_terms("same text", "same text").is_empty());
        let c = topic_58();
        let r = derive_reformulation_terms(c.last_query(), c.reformulated_last.as_deref().unwrap());
        assert_eq!(r, set(&["real-time", "databases"]));
    }

    #[test]
    fn locate_topic_31_referent() {
        let c = topic_31();
        let label = locate_referred_query(&c, &set(&["throat"]));
        assert!(label.found);
        assert_eq!(label.label.len(), 7);
        // utterance 6, "What causes throat cancer?"
        assert_eq!(label.target(), Some(5));
        let none = locate_referred_query(&c, &BTreeSet::new());
        assert!(!none.found);
        assert!(none.label.iter().all(|&v| v == 0));
        assert!(!locate_referred_query(&c, &set(&["zzz"])).found);
    }

    #[test]
    fn locate_topic_58_uses_intersection() {
        // "databases" never occurs; "real-time" does in utterances 1 and 3
        let label = locate_referred_query(&topic_58(), &set(&["real-time", "databases"]));
        assert_eq!(label.target(), Some(2));
    }

    #[test]
    fn bow_targets() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let bow = build_bow_target(&conv("x", &["a b", "a ?? zzz"]), &vocab);
        assert_eq!(bow.vector, [0, 0, 0, 0, 1, 1, 0]);

        let c = topic_58();
        let all_text: Vec<&str> = c.queries.iter().map(String::as_str).chain(["unrelated words here"]).collect();
        let vocab = Vocabulary::build(all_text, 1).unwrap();
        let bow = build_bow_target(&c, &vocab);
        let expected: BTreeSet<String> = c.queries.iter().flat_map(|q| tokenize(q)).collect();
        let got: BTreeSet<String> = bow.ones().map(|i| vocab.id_to_token(i).unwrap().to_string()).collect();
        assert_eq!(got, expected);
        assert!(got.contains("real-time") && got.contains("database"));
        assert_eq!(bow.vector[vocab.token_to_id("unrelated").unwrap()], 0);
    }

    fn toy_pool() -> (Vocabulary, Conversation, Conversation) {
        let raw = conv("raw", &["tell me about rust", "is it fast", "why is it safe"])
            .with_reformulation("why is rust safe");
        let noise = conv("noise", &["what is tea", "how is it brewed"]);
        let texts: Vec<&str> = raw
            .queries
            .iter()
            .chain(&noise.queries)
            .map(String::as_str)
            .chain(["why is rust safe"])
            .collect();
        (Vocabulary::build(texts, 1).unwrap(), raw, noise)
    }

    #[test]
    fn instance_shifts_coref_by_k() {
        let (vocab, raw, noise) = toy_pool();
        let cfg = TaskConfig {
            max_len: 64,
            ..TaskConfig::default()
        };
        for seed in 0..50 {
            let inst =
                build_training_instance(&raw, std::slice::from_ref(&noise), &vocab, &cfg, &mut rng::stream(seed, &[]))
                    .unwrap();
            let k = inst.noise_k;
            assert!(k == 1 || k == 2);
            let coref = inst.coref_label.as_ref().unwrap();
            // raw referent is utterance 1 ("rust"); shifted by k
            assert_eq!(coref.target(), Some(k));
            assert_eq!(coref.label.len(), k + 2);
            assert_eq!(inst.topic_labels.as_ref().unwrap().iter().map(|&v| v as usize).sum::<usize>(), k);
            assert_eq!(inst.loss_mask, TaskMask::ALL);
            let teacher = inst.teacher_input.as_ref().unwrap();
            assert_eq!(teacher.num_utterances(), 1);
        }
    }

    #[test]
    fn instance_without_reformulation_masks_coref_and_kd() {
        let (vocab, mut raw, noise) = toy_pool();
        raw.reformulated_last = None;
        let inst = build_training_instance(&raw, &[noise], &vocab, &TaskConfig::default(), &mut rng::stream(0, &[]))
            .unwrap();
        assert_eq!(
            inst.loss_mask,
            TaskMask {
                topic: true,
                coref: false,
                wr: true,
                kd: false
            }
        );
        assert!(inst.teacher_input.is_none());
    }

    #[test]
    fn perturbation_disabled() {
        let (vocab, raw, noise) = toy_pool();
        let cfg = TaskConfig {
            perturb_prob: 0.0,
            ..TaskConfig::default()
        };
        let inst = build_training_instance(&raw, &[noise], &vocab, &cfg, &mut rng::stream(0, &[])).unwrap();
        assert!(inst.topic_labels.is_none());
        assert!(!inst.loss_mask.topic);
        assert_eq!(inst.coref_label.unwrap().target(), Some(0));
    }

    #[test]
    fn noise_pool_must_exclude_self() {
        let (vocab, raw, _) = toy_pool();
        let err = build_training_instance(&raw, std::slice::from_ref(&raw), &vocab, &TaskConfig::default(), &mut rng::stream(0, &[]));
        assert!(matches!(err, Err(Error::NoisePoolTooSmall(_))));
    }

    #[test]
    fn truncated_referent_is_masked() {
        let (vocab, raw, noise) = toy_pool();
        // [CLS] + "is it fast"(3+1) + "why is it safe"(4+1) = 10 tokens survive
        let cfg = TaskConfig {
            max_len: 10,
            perturb_prob: 0.0,
            min_noise_pool: 1,
        };
        let inst = build_training_instance(&raw, &[noise], &vocab, &cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(inst.model_input.num_utterances(), 2);
        let coref = inst.coref_label.unwrap();
        assert!(!coref.found);
        assert!(!inst.loss_mask.coref);
    }

    fn arb_utterance() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..5)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn reformulation_terms_disjoint_from_query(q in arb_utterance(), qs in arb_utterance()) {
            let r = derive_reformulation_terms(&q, &qs);
            let raw = to_word_set(&tokenize(&q));
            prop_assert!(r.is_disjoint(&raw));
        }

        #[test]
        fn locate_matches_brute_force(utts in proptest::collection::vec(arb_utterance(), 2..8),
                                      terms in proptest::collection::btree_set(proptest::sample::select(vec!["a", "c", "f", "z"]), 0..3)) {
            let c = Conversation::new("p", utts.clone()).unwrap();
            let terms: BTreeSet<String> = terms.into_iter().map(String::from).collect();
            let label = locate_referred_query(&c, &terms);
            let mut brute = None;
            for (j, u) in utts[..utts.len() - 1].iter().enumerate() {
                if tokenize(u).iter().any(|t| terms.contains(t)) {
                    brute = Some(j);
                }
            }
            prop_assert_eq!(label.target(), brute);
            prop_assert_eq!(label.found, brute.is_some());
            prop_assert!(label.label.iter().map(|&v| v as usize).sum::<usize>() <= 1);
        }

        #[test]
        fn bow_ignores_order_and_repetition(utts in proptest::collection::vec(arb_utterance(), 1..5)) {
            let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f"]).unwrap();
            let fwd = Conversation::new("x", utts.clone()).unwrap();
            let mut rev = utts.clone();
            rev.reverse();
            rev.extend(utts.iter().cloned());
            let rev = Conversation::new("y", rev).unwrap();
            prop_assert_eq!(build_bow_target(&fwd, &vocab), build_bow_target(&rev, &vocab));
        }
    }

    #[test]
    fn instance_cache_roundtrip() {
        let vocab = Vocabulary::build(
            topic_31().queries.iter().chain(topic_31().reformulated_last.iter()).map(String::as_str),
            1,
        )
        .unwrap();
        let pool = vec![conv("x", &["what is jazz", "who invented it"])];
        let instances = build_dataset(&[topic_31()], &pool, &vocab, &TaskConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.bin");
        write_instance_cache(&path, &instances).unwrap();
        assert_eq!(read_instance_cache(&path).unwrap(), instances);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_instance_cache(&path).is_err());
    }
}
