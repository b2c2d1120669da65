//! Deterministic toy conversational-search world. Each conversation follows
//! one entity; later turns may replace the entity with "it", and the
//! reformulated last query restores it. The generator records the planted
//! referent so the coreference labeling can be checked exactly.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Document};
use crate::error::{Error, Result};
use crate::retrieval::Qrels;
use crate::rng;

pub const PRONOUN: &str = "it";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const INTROS: &[&str] = &["i want to learn about {e}", "let us talk about {e}", "what do you know about {e}"];
const FOLLOW_UPS: &[&str] = &[
    "what is the {a} of {e}",
    "how about the {a} of {e}",
    "and the {a} of {e}",
    "tell me the {a} of {e}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub entities_per_topic: usize,
    pub n_conversations: usize,
    /// Mean number of queries per conversation, at least 2.
    pub queries_per_conversation: f64,
    /// One document per (entity, aspect); also the number of aspects per topic.
    pub docs_per_entity: usize,
    /// Probability that the last query says "it" instead of the entity.
    pub omission_rate: f64,
    /// Probability that a middle follow-up names the entity again rather
    /// than saying "it".
    pub remention_rate: f64,
    /// Attribute words per topic used in document bodies.
    pub attributes_per_topic: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_topics: 8,
            entities_per_topic: 6,
            n_conversations: 500,
            queries_per_conversation: 6.9,
            docs_per_entity: 5,
            omission_rate: 0.9,
            remention_rate: 0.1,
            attributes_per_topic: 14,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entities_per_topic == 0 || self.n_topics == 0 {
            return Err(Error::InvalidArgument("synthetic spec has zero entities".into()));
        }
        if self.n_conversations == 0 || self.docs_per_entity == 0 || self.attributes_per_topic < 2 {
            return Err(Error::InvalidArgument(
                "n_conversations and docs_per_entity must be positive, attributes_per_topic at least 2".into(),
            ));
        }
        if self.queries_per_conversation.is_nan() || self.queries_per_conversation < 2.0 {
            return Err(Error::InvalidArgument("queries_per_conversation must be at least 2".into()));
        }
        for (name, v) in [("omission_rate", self.omission_rate), ("remention_rate", self.remention_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub entities: Vec<String>,
    pub aspects: Vec<String>,
    pub attributes: Vec<String>,
}

/// The fixed part of the world: topics, entities and the document collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub topics: Vec<Topic>,
    pub corpus: Vec<Document>,
}

impl World {
    pub fn doc_id(topic: usize, entity: usize, aspect: usize) -> String {
        format!("t{topic}e{entity}a{aspect}")
    }

    pub fn doc_text(&self, topic: usize, entity: usize, aspect: usize) -> &str {
        let a = self.topics[topic].aspects.len();
        let e = self.topics[topic].entities.len();
        let offset: usize = self.topics[..topic].iter().map(|t| t.entities.len() * t.aspects.len()).sum();
        debug_assert!(entity < e);
        &self.corpus[offset + entity * a + aspect].text
    }

    /// Self-contained query/document pairs for training the teacher.
    pub fn teacher_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for (ti, topic) in self.topics.iter().enumerate() {
            for (ei, e) in topic.entities.iter().enumerate() {
                for (ai, a) in topic.aspects.iter().enumerate() {
                    let doc = self.doc_text(ti, ei, ai).to_string();
                    for t in FOLLOW_UPS {
                        pairs.push((fill(t, e, a), doc.clone()));
                    }
                }
            }
        }
        pairs
    }
}

/// What the generator planted in one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub conv_id: String,
    pub topic: usize,
    pub entity: usize,
    pub last_aspect: usize,
    /// Whether the last query uses the pronoun.
    pub omitted: bool,
    /// Index of the latest context query naming the entity, when omitted.
    pub referent: Option<usize>,
    pub relevant_doc: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub world: World,
    pub conversations: Vec<Conversation>,
    pub truth: Vec<PlantedTruth>,
    pub qrels: Qrels,
}

impl SyntheticData {
    pub fn corpus(&self) -> &[Document] {
        &self.world.corpus
    }
}

fn fill(template: &str, entity: &str, aspect: &str) -> String {
    template.replace("{e}", entity).replace("{a}", aspect)
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, syllables: usize, taken: &mut std::collections::BTreeSet<String>) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if w != PRONOUN && taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn build_world(spec: &SyntheticSpec) -> Result<World> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[0x5e, 0]);
    // Reserve every template word so pseudo-words never collide with them.
    let mut taken: std::collections::BTreeSet<String> = INTROS
        .iter()
        .chain(FOLLOW_UPS)
        .flat_map(|t| t.split_whitespace().map(str::to_string))
        .chain(["is", "and"].map(String::from))
        .collect();
    let mut topics = Vec::with_capacity(spec.n_topics);
    for _ in 0..spec.n_topics {
        let entities = (0..spec.entities_per_topic).map(|_| pseudo_word(&mut r, 3, &mut taken)).collect();
        let aspects = (0..spec.docs_per_entity).map(|_| pseudo_word(&mut r, 2, &mut taken)).collect();
        let attributes = (0..spec.attributes_per_topic).map(|_| pseudo_word(&mut r, 2, &mut taken)).collect();
        topics.push(Topic {
            entities,
            aspects,
            attributes,
        });
    }
    let mut corpus = Vec::new();
    for (ti, topic) in topics.iter().enumerate() {
        for (ei, e) in topic.entities.iter().enumerate() {
            for (ai, a) in topic.aspects.iter().enumerate() {
                let picks: Vec<&String> = topic.attributes.choose_multiple(&mut r, 2).collect();
                corpus.push(Document {
                    doc_id: World::doc_id(ti, ei, ai),
                    text: format!("the {a} of {e} is {} and {}", picks[0], picks[1]),
                });
            }
        }
    }
    Ok(World { topics, corpus })
}

/// Queries per conversation: uniform on `2..=hi`, with `hi` randomized
/// between its two nearest integers so the mean is exact.
fn conversation_length<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    let span = 2.0 * mean - 2.0;
    let lo_hi = span.floor() as usize;
    let hi = if rng.random::<f64>() < span - span.floor() { lo_hi + 1 } else { lo_hi };
    rng.random_range(2..=hi.max(2))
}

/// Generates `n` conversations over `world`. `stream` separates independent
/// conversation sets drawn from the same world.
pub fn generate_conversations(
    world: &World,
    spec: &SyntheticSpec,
    n: usize,
    stream: u64,
    id_prefix: &str,
) -> Result<(Vec<Conversation>, Vec<PlantedTruth>, Qrels)> {
    spec.validate()?;
    let mut convs = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut qrels = Qrels::new();
    for i in 0..n {
        let mut r = rng::stream(spec.seed, &[0x5e, 1, stream, i as u64]);
        let ti = r.random_range(0..world.topics.len());
        let topic = &world.topics[ti];
        let ei = r.random_range(0..topic.entities.len());
        let entity = &topic.entities[ei];
        let n_queries = conversation_length(spec.queries_per_conversation, &mut r);

        let mut queries = vec![fill(INTROS.choose(&mut r).expect("non-empty"), entity, "")];
        let mut last_named = 0usize;
        let mut last_aspect = 0usize;
        let mut omitted = false;
        let mut reformulated = String::new();
        for q in 1..n_queries {
            let ai = r.random_range(0..topic.aspects.len());
            let template = FOLLOW_UPS.choose(&mut r).expect("non-empty");
            let last = q + 1 == n_queries;
            let pronoun = if last {
                r.random::<f64>() < spec.omission_rate
            } else {
                r.random::<f64>() >= spec.remention_rate
            };
            let explicit = fill(template, entity, &topic.aspects[ai]);
            queries.push(if pronoun { fill(template, PRONOUN, &topic.aspects[ai]) } else { explicit.clone() });
            if last {
                last_aspect = ai;
                omitted = pronoun;
                reformulated = explicit;
            } else if !pronoun {
                last_named = q;
            }
        }
        let conv_id = format!("{id_prefix}{i}");
        let relevant_doc = World::doc_id(ti, ei, last_aspect);
        qrels.insert(&conv_id, &relevant_doc, 2)?;
        for aj in (0..topic.aspects.len()).filter(|&a| a != last_aspect) {
            qrels.insert(&conv_id, &World::doc_id(ti, ei, aj), 0)?;
        }
        for ej in (0..topic.entities.len()).filter(|&e| e != ei) {
            qrels.insert(&conv_id, &World::doc_id(ti, ej, last_aspect), 0)?;
        }
        convs.push(Conversation::new(conv_id.clone(), queries)?.with_reformulation(reformulated));
        truth.push(PlantedTruth {
            conv_id,
            topic: ti,
            entity: ei,
            last_aspect,
            omitted,
            referent: omitted.then_some(last_named),
            relevant_doc,
        });
    }
    Ok((convs, truth, qrels))
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let world = build_world(spec)?;
    let (conversations, truth, qrels) = generate_conversations(&world, spec, spec.n_conversations, 0, "c")?;
    Ok(SyntheticData {
        world,
        conversations,
        truth,
        qrels,
    })
}
