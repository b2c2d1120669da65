//! Exact dense retrieval, MRR / NDCG@3, TREC run and qrels I/O, and the
//! off-topic robustness protocol.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_model_input, build_single_input, Conversation, Document, Vocabulary};
use crate::encoder::{Model, Teacher};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Matrix;

/// Document vectors produced by the frozen teacher. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Matrix,
}

impl DenseIndex {
    pub fn from_vectors(doc_ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(Error::Empty("corpus".into()));
        }
        if doc_ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} doc ids vs {} vectors",
                doc_ids.len(),
                vectors.nrows()
            )));
        }
        Ok(DenseIndex { doc_ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Exact inner-product top-k; ties broken by ascending doc id. A
    /// `top_k` larger than the corpus returns the full ranking.
    pub fn search(&self, query: &[f64], top_k: usize) -> Result<Vec<(String, f64)>> {
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query of {} vs index dim {}", query.len(), self.dim())));
        }
        let q = ndarray::ArrayView1::from(query);
        let scores = self.vectors.dot(&q);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| -> Ordering {
            scores[*b]
                .partial_cmp(&scores[*a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.doc_ids[*a].cmp(&self.doc_ids[*b]))
        };
        let k = top_k.min(idx.len());
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        Ok(idx.into_iter().map(|i| (self.doc_ids[i].clone(), scores[i])).collect())
    }

    /// Binary form: `u64` rows, `u64` cols, ids as length-prefixed UTF-8,
    /// then row-major little-endian `f64` values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SSPINDX1");
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for id in &self.doc_ids {
            buf.extend_from_slice(&(id.len() as u64).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in self.vectors.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: m.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated index file"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != b"SSPINDX1" {
            return Err(bad("not an index file"));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let rows = u64_at(take(8)?);
        let cols = u64_at(take(8)?);
        let mut doc_ids = Vec::with_capacity(rows.min(1 << 20));
        for _ in 0..rows {
            let len = u64_at(take(8)?);
            let id = std::str::from_utf8(take(len)?).map_err(|_| bad("doc id not UTF-8"))?;
            doc_ids.push(id.to_string());
        }
        let data = take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("size overflow"))?)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let vectors = Matrix::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
        DenseIndex::from_vectors(doc_ids, vectors)
    }
}

/// Each document is encoded as the teacher's `[CLS]` over `[CLS] text [SEP]`.
pub fn index_corpus(documents: &[Document], teacher: &Teacher, vocab: &Vocabulary) -> Result<DenseIndex> {
    if documents.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let rows: Vec<Vec<f64>> = documents
        .par_iter()
        .map(|d| {
            let input = build_single_input(&d.text, vocab, teacher.max_len())?;
            teacher.encode_input(&input).map(|o| o.cls_vector)
        })
        .collect::<Result<_>>()?;
    let h = rows[0].len();
    let vectors = Matrix::from_shape_fn((rows.len(), h), |(i, j)| rows[i][j]);
    DenseIndex::from_vectors(documents.iter().map(|d| d.doc_id.clone()).collect(), vectors)
}

/// Graded judgments keyed by query id, then doc id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment; a second grade for the same pair is an error.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let entry = self.grades.entry(query_id.to_string()).or_default();
        if entry.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate judgment ({query_id}, {doc_id})")));
        }
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(query_id)?.get(doc_id).copied()
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.grades.contains_key(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn judgments(&self, query_id: &str) -> impl Iterator<Item = (&str, u32)> {
        self.grades
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, &g)| (d.as_str(), g)))
    }

    /// `query_id 0 doc_id grade` lines.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.grades {
            for (d, g) in docs {
                let _ = writeln!(out, "{q} 0 {d} {g}");
            }
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: m,
            };
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let grade: i64 = fields[3]
                .parse()
                .map_err(|_| err(format!("grade {:?} is not an integer", fields[3])))?;
            if grade < 0 {
                return Err(err(format!("negative grade {grade}")));
            }
            qrels
                .insert(fields[0], fields[2], grade as u32)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(qrels)
    }
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Qrels::parse(&text, &path.display().to_string())
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    std::fs::write(path, qrels.to_trec()).map_err(|e| Error::io(path, e))
}

/// Ranked results per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    runs: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a ranking after sorting it by descending score, then doc id.
    pub fn insert(&mut self, query_id: impl Into<String>, mut ranking: Vec<(String, f64)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        if let Some((dup, _)) = ranking.iter().find(|(d, _)| !seen.insert(d.clone())) {
            return Err(Error::InvalidArgument(format!("duplicate doc {dup} in ranking")));
        }
        ranking.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        self.runs.insert(query_id.into(), ranking);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.runs.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.runs.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    /// `query_id Q0 doc_id rank score tag` lines, rank 1-based.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, ranking) in &self.runs {
            for (rank, (d, s)) in ranking.iter().enumerate() {
                let _ = writeln!(out, "{q} Q0 {d} {} {s} {tag}", rank + 1);
            }
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lists: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: m,
            };
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let rank: usize = fields[3].parse().map_err(|_| err(format!("bad rank {:?}", fields[3])))?;
            let score: f64 = fields[4].parse().map_err(|_| err(format!("bad score {:?}", fields[4])))?;
            lists
                .entry(fields[0].to_string())
                .or_default()
                .push((rank, fields[2].to_string(), score));
        }
        let mut run = RankedRun::new();
        for (q, mut entries) in lists {
            entries.sort_by_key(|e| e.0);
            run.insert(q, entries.into_iter().map(|(_, d, s)| (d, s)).collect())?;
        }
        Ok(run)
    }
}

pub fn write_run(run: &RankedRun, path: &Path, tag: &str) -> Result<()> {
    std::fs::write(path, run.to_trec(tag)).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<RankedRun> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RankedRun::parse(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    #[default]
    Exponential,
    Linear,
}

impl Gain {
    fn apply(self, grade: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => f64::from(grade),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Minimum grade counted as relevant by MRR.
    pub positive_threshold: u32,
    pub gain: Gain,
    /// Count run queries without judgments as zero instead of skipping them.
    pub missing_as_zero: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            positive_threshold: 2,
            gain: Gain::Exponential,
            missing_as_zero: false,
        }
    }
}

/// Query id, ranking, and whether the query has judgments.
type JudgedQuery<'a> = (&'a str, &'a [(String, f64)], bool);

fn judged_queries<'a>(run: &'a RankedRun, qrels: &'a Qrels, missing_as_zero: bool) -> Result<Vec<JudgedQuery<'a>>> {
    if run.is_empty() {
        return Err(Error::Empty("run".into()));
    }
    Ok(run
        .iter()
        .filter_map(|(q, r)| {
            let judged = qrels.contains_query(q);
            (judged || missing_as_zero).then_some((q, r, judged))
        })
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn reciprocal_rank(ranking: &[(String, f64)], qrels: &Qrels, query_id: &str, threshold: u32) -> f64 {
    ranking
        .iter()
        .position(|(d, _)| qrels.grade(query_id, d).is_some_and(|g| g >= threshold))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn mrr(run: &RankedRun, qrels: &Qrels, options: &MetricOptions) -> Result<f64> {
    let per: Vec<f64> = judged_queries(run, qrels, options.missing_as_zero)?
        .into_iter()
        .map(|(q, r, judged)| {
            if judged {
                reciprocal_rank(r, qrels, q, options.positive_threshold)
            } else {
                0.0
            }
        })
        .collect();
    Ok(mean(&per))
}

pub fn ndcg_at_k(ranking: &[(String, f64)], qrels: &Qrels, query_id: &str, k: usize, gain: Gain) -> f64 {
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (d, _))| gain.apply(qrels.grade(query_id, d).unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = qrels.judgments(query_id).map(|(_, g)| g).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.apply(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

pub fn ndcg_at_3(run: &RankedRun, qrels: &Qrels, options: &MetricOptions) -> Result<f64> {
    let per: Vec<f64> = judged_queries(run, qrels, options.missing_as_zero)?
        .into_iter()
        .map(|(q, r, judged)| if judged { ndcg_at_k(r, qrels, q, 3, options.gain) } else { 0.0 })
        .collect();
    Ok(mean(&per))
}

/// Encodes each conversation with the student (query id = conversation id)
/// and searches the index.
pub fn retrieve(
    model: &Model,
    conversations: &[Conversation],
    vocab: &Vocabulary,
    index: &DenseIndex,
    max_len: usize,
    top_k: usize,
) -> Result<RankedRun> {
    let rankings: Vec<(String, Vec<(String, f64)>)> = conversations
        .par_iter()
        .map(|c| {
            let input = build_model_input(c, vocab, max_len)?;
            let cls = model.encode_cls(&input)?;
            Ok((c.conv_id.clone(), index.search(&cls, top_k)?))
        })
        .collect::<Result<_>>()?;
    let mut run = RankedRun::new();
    for (q, r) in rankings {
        run.insert(q, r)?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mrr: f64,
    pub ndcg3: f64,
}

pub fn evaluate_run(run: &RankedRun, qrels: &Qrels, options: &MetricOptions) -> Result<Evaluation> {
    Ok(Evaluation {
        mrr: mrr(run, qrels, options)?,
        ndcg3: ndcg_at_3(run, qrels, options)?,
    })
}

/// Prepends `added` utterances drawn without replacement from sessions
/// other than the conversation's own. The draw depends only on `seed`,
/// `added` and the conversation's position.
pub fn add_off_topic(
    conversation: &Conversation,
    position: usize,
    pool: &[Conversation],
    added: usize,
    seed: u64,
) -> Result<Conversation> {
    if added == 0 {
        return Ok(conversation.clone());
    }
    let candidates: Vec<&str> = pool
        .iter()
        .filter(|c| c.conv_id != conversation.conv_id)
        .flat_map(|c| c.queries.iter().map(String::as_str))
        .collect();
    if candidates.len() < added {
        return Err(Error::NoisePoolTooSmall(format!(
            "{} off-topic utterances available for {}, need {added}",
            candidates.len(),
            conversation.conv_id
        )));
    }
    let mut r = rng::stream(seed, &[0x0b, added as u64, position as u64]);
    let picked = sample(&mut r, candidates.len(), added);
    let mut queries: Vec<String> = picked.iter().map(|i| candidates[i].to_string()).collect();
    queries.extend(conversation.queries.iter().cloned());
    Ok(Conversation {
        queries,
        ..conversation.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub added: usize,
    pub mrr: f64,
    pub ndcg3: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessSetup<'a> {
    pub vocab: &'a Vocabulary,
    pub index: &'a DenseIndex,
    pub qrels: &'a Qrels,
    pub noise_pool: &'a [Conversation],
    pub max_len: usize,
    pub top_k: usize,
    pub seed: u64,
    pub metrics: MetricOptions,
}

/// Metric curve for `0..=max_added` prepended off-topic utterances.
pub fn robustness_eval(
    model: &Model,
    conversations: &[Conversation],
    setup: &RobustnessSetup<'_>,
    max_added: usize,
) -> Result<Vec<CurvePoint>> {
    (0..=max_added)
        .map(|added| {
            let noisy: Vec<Conversation> = conversations
                .iter()
                .enumerate()
                .map(|(i, c)| add_off_topic(c, i, setup.noise_pool, added, setup.seed))
                .collect::<Result<_>>()?;
            let run = retrieve(model, &noisy, setup.vocab, setup.index, setup.max_len, setup.top_k)?;
            let e = evaluate_run(&run, setup.qrels, &setup.metrics)?;
            Ok(CurvePoint {
                added,
                mrr: e.mrr,
                ndcg3: e.ndcg3,
            })
        })
        .collect()
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("j,mrr,ndcg3\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.added, p.mrr, p.ndcg3);
    }
    out
}

/// `(mrr(0) - mrr(last)) / mrr(0)`.
pub fn relative_mrr_drop(curve: &[CurvePoint]) -> f64 {
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) if a.mrr > 0.0 => (a.mrr - b.mrr) / a.mrr,
        _ => 0.0,
    }
}

/// Map from doc id to row, for callers that need random access.
pub fn doc_positions(index: &DenseIndex) -> HashMap<&str, usize> {
    index.doc_ids().iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn run_of(q: &str, docs: &[&str]) -> RankedRun {
        let mut run = RankedRun::new();
        let n = docs.len();
        run.insert(q, docs.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)).collect())
            .unwrap();
        run
    }

    #[test]
    fn self_similarity_ranks_first() {
        let s = 0.5f64.sqrt();
        let idx = DenseIndex::from_vectors(ids(3), array![[1.0, 0.0], [0.0, 1.0], [s, s]]).unwrap();
        let top = idx.search(&[s, s], 1).unwrap();
        assert_eq!(top[0].0, "d2");
    }

    #[test]
    fn orthogonal_query_ties_break_by_doc_id() {
        let idx = DenseIndex::from_vectors(
            vec!["b".into(), "c".into(), "a".into()],
            array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]],
        )
        .unwrap();
        let top = idx.search(&[0.0, 1.0], 10).unwrap();
        let order: Vec<&str> = top.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert!(top.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn hand_computed_two_dimensional_ranking() {
        let idx = DenseIndex::from_vectors(
            ids(5),
            array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 4.0], [2.0, 2.0]],
        )
        .unwrap();
        // q = (1, 0.5): 2.0, 2.5, 0.75, 0.0, 3.0
        let top = idx.search(&[1.0, 0.5], 5).unwrap();
        let order: Vec<&str> = top.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(order, ["d4", "d1", "d0", "d2", "d3"]);
        assert_eq!(top[0].1, 3.0);
        assert!(idx.search(&[1.0, 0.5], 0).is_err());
        assert!(idx.search(&[1.0], 1).is_err());
    }

    #[test]
    fn empty_index_rejected() {
        assert!(DenseIndex::from_vectors(vec![], Matrix::zeros((0, 2))).is_err());
    }

    #[test]
    fn mrr_cases() {
        let mut q = Qrels::new();
        q.insert("q1", "d1", 2).unwrap();
        q.insert("q2", "d9", 2).unwrap();
        let opts = MetricOptions::default();
        assert_eq!(mrr(&run_of("q1", &["d1", "d2"]), &q, &opts).unwrap(), 1.0);
        assert_eq!(mrr(&run_of("q1", &["d5", "d6", "d7", "d1"]), &q, &opts).unwrap(), 0.25);
        let mut run = run_of("q1", &["d0", "d1"]);
        run.insert("q2", (0..5).map(|i| (format!("d{}", 5 + i), 10.0 - i as f64)).collect())
            .unwrap();
        assert!((mrr(&run, &q, &opts).unwrap() - 0.35).abs() < 1e-12);
        assert!(mrr(&RankedRun::new(), &q, &opts).is_err());
        // nothing relevant retrieved
        assert_eq!(mrr(&run_of("q1", &["d5"]), &q, &opts).unwrap(), 0.0);
    }

    #[test]
    fn grade_threshold_applies() {
        let mut q = Qrels::new();
        q.insert("q", "a", 1).unwrap();
        q.insert("q", "b", 2).unwrap();
        let run = run_of("q", &["a", "b"]);
        assert_eq!(mrr(&run, &q, &MetricOptions::default()).unwrap(), 0.5);
        let lenient = MetricOptions {
            positive_threshold: 1,
            ..MetricOptions::default()
        };
        assert_eq!(mrr(&run, &q, &lenient).unwrap(), 1.0);
    }

    #[test]
    fn missing_queries_skipped_or_zero() {
        let mut q = Qrels::new();
        q.insert("q1", "d1", 2).unwrap();
        let mut run = run_of("q1", &["d1"]);
        run.insert("q2", vec![("d1".into(), 1.0)]).unwrap();
        assert_eq!(mrr(&run, &q, &MetricOptions::default()).unwrap(), 1.0);
        let strict = MetricOptions {
            missing_as_zero: true,
            ..MetricOptions::default()
        };
        assert_eq!(mrr(&run, &q, &strict).unwrap(), 0.5);
    }

    #[test]
    fn ndcg_cases() {
        let mut q = Qrels::new();
        q.insert("q", "a", 3).unwrap();
        q.insert("q", "b", 1).unwrap();
        q.insert("q", "c", 0).unwrap();
        let opts = MetricOptions::default();
        assert!((ndcg_at_3(&run_of("q", &["a", "b", "c"]), &q, &opts).unwrap() - 1.0).abs() < 1e-12);
        let v = ndcg_at_3(&run_of("q", &["a", "c", "b"]), &q, &opts).unwrap();
        let oracle = (7.0 + 0.0 + 1.0 / 2.0) / (7.0 + 1.0 / 3f64.log2());
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.98285).abs() < 1e-5);
        let mut empty = Qrels::new();
        empty.insert("q", "z", 0).unwrap();
        assert_eq!(ndcg_at_3(&run_of("q", &["a"]), &empty, &opts).unwrap(), 0.0);
        let linear = MetricOptions {
            gain: Gain::Linear,
            ..MetricOptions::default()
        };
        let v = ndcg_at_3(&run_of("q", &["a", "c", "b"]), &q, &linear).unwrap();
        assert!((v - (3.0 + 0.5) / (3.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
    }

    #[test]
    fn qrels_parsing() {
        let q = Qrels::parse("q1 0 d7 2\n\nq1   0\td8  0\n", "x").unwrap();
        assert_eq!(q.grade("q1", "d7"), Some(2));
        assert_eq!(q.grade("q1", "d8"), Some(0));
        match Qrels::parse("q1 0 d7 2\nq1 0 d8\n", "f.txt") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(Qrels::parse("q 0 d x", "f").is_err());
        assert!(Qrels::parse("q 0 d -1", "f").is_err());
        assert!(Qrels::parse("q 0 d 1\nq 0 d 2", "f").is_err());
    }

    #[test]
    fn run_format_roundtrip() {
        let mut run = RankedRun::new();
        run.insert("q1", vec![("d2".into(), 0.1), ("d1".into(), 0.123456789012345)]).unwrap();
        run.insert("q2", vec![("d3".into(), -1.5)]).unwrap();
        let text = run.to_trec("ssp");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "q1 Q0 d1 1 0.123456789012345 ssp");
        assert_eq!(lines[1], "q1 Q0 d2 2 0.1 ssp");
        assert_eq!(lines[2], "q2 Q0 d3 1 -1.5 ssp");
        assert_eq!(RankedRun::parse(&text, "t").unwrap(), run);
        assert!(RankedRun::parse("q1 Q0 d1 one 0.5 t", "t").is_err());
    }

    #[test]
    fn off_topic_prefix() {
        let c = Conversation::new("a", vec!["x".into(), "y".into()]).unwrap();
        let pool = vec![
            c.clone(),
            Conversation::new("b", vec!["p".into(), "q".into(), "r".into()]).unwrap(),
        ];
        assert_eq!(add_off_topic(&c, 0, &pool, 0, 1).unwrap(), c);
        let noisy = add_off_topic(&c, 0, &pool, 2, 1).unwrap();
        assert_eq!(noisy.len(), 4);
        assert!(noisy.queries[..2].iter().all(|q| ["p", "q", "r"].contains(&q.as_str())));
        assert_eq!(&noisy.queries[2..], &c.queries[..]);
        assert_eq!(noisy, add_off_topic(&c, 0, &pool, 2, 1).unwrap());
        assert!(matches!(add_off_topic(&c, 0, &pool, 4, 1), Err(Error::NoisePoolTooSmall(_))));
    }

    #[test]
    fn index_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        let idx = DenseIndex::from_vectors(ids(2), array![[1.0, -0.5], [0.25, 3.0]]).unwrap();
        idx.save(&path).unwrap();
        assert_eq!(DenseIndex::load(&path).unwrap(), idx);
        std::fs::write(&path, b"SSPINDX1\x02").unwrap();
        assert!(DenseIndex::load(&path).is_err());
    }

    fn arb_index() -> impl Strategy<Value = (Matrix, Vec<f64>, usize)> {
        (1usize..40, 1usize..5).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(-3i32..4, n * d)
                    .prop_map(move |v| Matrix::from_shape_vec((n, d), v.into_iter().map(f64::from).collect()).unwrap()),
                proptest::collection::vec(-3i32..4, d).prop_map(|v| v.into_iter().map(f64::from).collect()),
                1usize..50,
            )
        })
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort((m, q, k) in arb_index()) {
            let n = m.nrows();
            let idx = DenseIndex::from_vectors(ids(n), m.clone()).unwrap();
            let got = idx.search(&q, k).unwrap();
            let mut all: Vec<(String, f64)> = (0..n)
                .map(|i| (format!("d{i}"), m.row(i).iter().zip(&q).map(|(a, b)| a * b).sum()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(got, all);
        }

        #[test]
        fn positive_scaling_keeps_ranking((m, q, k) in arb_index(), e in -4i32..5) {
            // powers of two keep ties exact
            let c = 2f64.powi(e);
            let idx = DenseIndex::from_vectors(ids(m.nrows()), m).unwrap();
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            let a: Vec<String> = idx.search(&q, k).unwrap().into_iter().map(|x| x.0).collect();
            let b: Vec<String> = idx.search(&scaled, k).unwrap().into_iter().map(|x| x.0).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn metrics_ignore_trailing_irrelevant(grades in proptest::collection::vec(0u32..4, 1..6), extra in 1usize..5) {
            let mut q = Qrels::new();
            for (i, &g) in grades.iter().enumerate() {
                q.insert("q", &format!("d{i}"), g).unwrap();
            }
            let docs: Vec<String> = (0..grades.len()).map(|i| format!("d{i}")).collect();
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let base = run_of("q", &refs);
            let mut longer: Vec<String> = docs.clone();
            longer.extend((0..extra).map(|i| format!("x{i}")));
            let refs2: Vec<&str> = longer.iter().map(String::as_str).collect();
            let ext = run_of("q", &refs2);
            let opts = MetricOptions::default();
            let n = ndcg_at_3(&base, &q, &opts).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert_eq!(n, ndcg_at_3(&ext, &q, &opts).unwrap());
            prop_assert_eq!(mrr(&base, &q, &opts).unwrap(), mrr(&ext, &q, &opts).unwrap());
        }
    }
}
