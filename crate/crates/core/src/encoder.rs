//! Toy post-LN transformer encoder with the topic, coreference and word
//! reconstruction heads, plus the frozen teacher wrapper.

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{build_single_input, ModelInput, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::sigmoid;
use crate::rng::StreamRng;
use crate::tape::{Matrix, ParamId, ParamSet, Tape, Var};

const LN_EPS: f64 = 1e-12;

/// Which hidden state feeds the word reconstruction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WordHeadInput {
    #[default]
    Cls,
    /// The `[SEP]` closing the final utterance.
    LastSep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    #[serde(default)]
    pub word_head_input: WordHeadInput,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            hidden_size: 64,
            layers: 2,
            heads: 4,
            ff_size: 128,
            max_positions: 512,
            vocab_size,
            dropout: 0.1,
            word_head_input: WordHeadInput::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_size", self.ff_size),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden_size {} not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
struct HeadIds {
    topic_w: ParamId,
    topic_b: ParamId,
    coref_w: ParamId,
    coref_b: ParamId,
    word_w: ParamId,
    word_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    heads: Option<HeadIds>,
}

/// Parameters live in one [`ParamSet`]; the layout only names them.
#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    params: ParamSet,
    layout: Layout,
}

/// Hidden states of the last layer with the `[CLS]` row and the `[SEP]`
/// rows gathered.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden_states: Matrix,
    pub cls_vector: Vec<f64>,
    pub sep_vectors: Matrix,
}

/// Tape handles for one encoded input.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub hidden: Var,
    pub cls: Var,
    pub seps: Var,
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    Matrix::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Sinusoidal table scaled to the RMS of the token embeddings. Learned
/// positions from a random start cannot pick up token order from a few
/// hundred conversations; this start makes relative offsets linear.
fn sinusoidal_positions(n: usize, h: usize, rms: f64) -> Matrix {
    let amp = rms * std::f64::consts::SQRT_2;
    Matrix::from_shape_fn((n, h), |(p, j)| {
        let freq = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / h as f64);
        let a = p as f64 * freq;
        amp * if j % 2 == 0 { a.sin() } else { a.cos() }
    })
}

impl Model {
    /// Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm
    /// gains. `with_heads` adds the three prediction heads.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, with_heads: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut p = ParamSet::new();
        let w = |p: &mut ParamSet, name: String, r: usize, c: usize, rng: &mut R| {
            p.add(name, trunc_normal(rng, r, c, 0.02))
        };
        let tok = w(&mut p, "embeddings.token".into(), config.vocab_size, h, rng);
        let pos = p.add("embeddings.position", sinusoidal_positions(config.max_positions, h, 0.02));
        let emb_ln_g = p.add("embeddings.ln.gamma", Matrix::ones((1, h)));
        let emb_ln_b = p.add("embeddings.ln.beta", Matrix::zeros((1, h)));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                wq: w(&mut p, n("attn.wq"), h, h, rng),
                bq: p.add(n("attn.bq"), Matrix::zeros((1, h))),
                wk: w(&mut p, n("attn.wk"), h, h, rng),
                bk: p.add(n("attn.bk"), Matrix::zeros((1, h))),
                wv: w(&mut p, n("attn.wv"), h, h, rng),
                bv: p.add(n("attn.bv"), Matrix::zeros((1, h))),
                wo: w(&mut p, n("attn.wo"), h, h, rng),
                bo: p.add(n("attn.bo"), Matrix::zeros((1, h))),
                ln1_g: p.add(n("ln1.gamma"), Matrix::ones((1, h))),
                ln1_b: p.add(n("ln1.beta"), Matrix::zeros((1, h))),
                w1: w(&mut p, n("ff.w1"), h, config.ff_size, rng),
                b1: p.add(n("ff.b1"), Matrix::zeros((1, config.ff_size))),
                w2: w(&mut p, n("ff.w2"), config.ff_size, h, rng),
                b2: p.add(n("ff.b2"), Matrix::zeros((1, h))),
                ln2_g: p.add(n("ln2.gamma"), Matrix::ones((1, h))),
                ln2_b: p.add(n("ln2.beta"), Matrix::zeros((1, h))),
            });
        }
        let heads = with_heads.then(|| HeadIds {
            topic_w: w(&mut p, "heads.topic.w".into(), h, 1, rng),
            topic_b: p.add("heads.topic.b", Matrix::zeros((1, 1))),
            coref_w: w(&mut p, "heads.coref.w".into(), h, 1, rng),
            coref_b: p.add("heads.coref.b", Matrix::zeros((1, 1))),
            word_w: w(&mut p, "heads.word.w".into(), h, config.vocab_size, rng),
            word_b: p.add("heads.word.b", Matrix::zeros((1, config.vocab_size))),
        });
        Ok(Model {
            config,
            params: p,
            layout: Layout {
                tok,
                pos,
                emb_ln_g,
                emb_ln_b,
                layers,
                heads,
            },
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the architecture implied by `config`.
    pub fn from_params(config: EncoderConfig, with_heads: bool, params: ParamSet) -> Result<Self> {
        let mut model = Model::new(config, with_heads, &mut crate::rng::stream(0, &[]))?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, expect), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || expect.dim() != got.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {:?}",
                    got.dim(),
                    expect.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Overwrites every non-head parameter with `other`'s value.
    pub fn copy_body_from(&mut self, other: &Model) -> Result<()> {
        if other.config.hidden_size != self.config.hidden_size || other.config.vocab_size != self.config.vocab_size {
            return Err(Error::Shape("encoder bodies differ in shape".into()));
        }
        for (name, value) in other.params.iter() {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Shape(format!("parameter {name} missing")))?;
            if self.params.get(id).dim() != value.dim() {
                return Err(Error::Shape(format!("parameter {name} differs in shape")));
            }
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_heads(&self) -> bool {
        self.layout.heads.is_some()
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn check_input(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("encoder input".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "input of {} tokens exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut StreamRng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = tape.value(x).dim();
                let keep = 1.0 - p;
                let mask = Matrix::from_shape_fn((r, c), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mask(x, mask)
            }
            _ => x,
        }
    }

    /// Records the encoder forward pass. Dropout is active only when an rng
    /// is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<EncodedVars> {
        let ids = &input.token_ids;
        self.check_input(ids)?;
        if let Some(&bad) = input.sep_positions.iter().find(|&&p| p >= ids.len()) {
            return Err(Error::InvalidArgument(format!("sep position {bad} out of range")));
        }
        let h = self.config.hidden_size;
        let heads = self.config.heads;
        let dh = h / heads;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.embed(self.layout.tok, ids);
        let pos = tape.embed(self.layout.pos, &positions);
        let emb = tape.add(tok, pos);
        let emb = tape.layer_norm(emb, self.layout.emb_ln_g, self.layout.emb_ln_b, LN_EPS);
        let mut x = self.dropout(tape, emb, &mut dropout_rng);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in &self.layout.layers {
            let q = tape.linear(x, layer.wq, layer.bq);
            let k = tape.linear(x, layer.wk, layer.bk);
            let v = tape.linear(x, layer.wv, layer.bv);
            let mut contexts = Vec::with_capacity(heads);
            for head in 0..heads {
                let (a, b) = (head * dh, (head + 1) * dh);
                let qh = tape.cols(q, a, b);
                let kh = tape.cols(k, a, b);
                let vh = tape.cols(v, a, b);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax_rows(scores);
                contexts.push(tape.matmul(attn, vh));
            }
            let ctx = if heads == 1 { contexts[0] } else { tape.hconcat(&contexts) };
            let attn_out = tape.linear(ctx, layer.wo, layer.bo);
            let attn_out = self.dropout(tape, attn_out, &mut dropout_rng);
            let res = tape.add(x, attn_out);
            let x1 = tape.layer_norm(res, layer.ln1_g, layer.ln1_b, LN_EPS);
            let ff = tape.linear(x1, layer.w1, layer.b1);
            let ff = tape.gelu(ff);
            let ff = tape.linear(ff, layer.w2, layer.b2);
            let ff = self.dropout(tape, ff, &mut dropout_rng);
            let res = tape.add(x1, ff);
            x = tape.layer_norm(res, layer.ln2_g, layer.ln2_b, LN_EPS);
        }
        let cls = tape.rows(x, &[input.cls_position]);
        let seps = tape.rows(x, &input.sep_positions);
        Ok(EncodedVars { hidden: x, cls, seps })
    }

    fn heads(&self) -> Result<&HeadIds> {
        self.layout
            .heads
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no prediction heads".into()))
    }

    /// Per-row sigmoid probabilities of the topic head on the tape.
    pub fn topic_probs(&self, tape: &mut Tape, seps: Var) -> Result<Var> {
        let heads = self.heads()?;
        let logits = tape.linear(seps, heads.topic_w, heads.topic_b);
        Ok(tape.sigmoid(logits))
    }

    pub fn coref_probs(&self, tape: &mut Tape, context_seps: Var) -> Result<Var> {
        let heads = self.heads()?;
        let logits = tape.linear(context_seps, heads.coref_w, heads.coref_b);
        Ok(tape.sigmoid(logits))
    }

    pub fn word_probs(&self, tape: &mut Tape, source: Var) -> Result<Var> {
        let heads = self.heads()?;
        let logits = tape.linear(source, heads.word_w, heads.word_b);
        Ok(tape.sigmoid(logits))
    }

    /// The row feeding the word head per `word_head_input`.
    pub fn word_source(&self, tape: &mut Tape, vars: &EncodedVars) -> Var {
        match self.config.word_head_input {
            WordHeadInput::Cls => vars.cls,
            WordHeadInput::LastSep => {
                let n = tape.value(vars.seps).nrows();
                tape.rows(vars.seps, &[n - 1])
            }
        }
    }

    /// Inference-mode forward pass.
    pub fn encode(&self, input: &ModelInput) -> Result<EncoderOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, input, None)?;
        Ok(EncoderOutput {
            hidden_states: tape.value(vars.hidden).to_owned(),
            cls_vector: tape.value(vars.cls).iter().copied().collect(),
            sep_vectors: tape.value(vars.seps).to_owned(),
        })
    }

    /// `[CLS]` vector only.
    pub fn encode_cls(&self, input: &ModelInput) -> Result<Vec<f64>> {
        self.encode(input).map(|o| o.cls_vector)
    }

    pub fn predict_topic(&self, sep_vectors: &Matrix) -> Result<Vec<f64>> {
        let heads = self.heads()?;
        Ok(linear_sigmoid(
            sep_vectors.view(),
            self.params.get(heads.topic_w),
            self.params.get(heads.topic_b)[[0, 0]],
        ))
    }

    /// Probabilities over the context utterances (every `[SEP]` but the last).
    pub fn predict_coref(&self, sep_vectors: &Matrix) -> Result<Vec<f64>> {
        let heads = self.heads()?;
        let n = sep_vectors.nrows().saturating_sub(1);
        Ok(linear_sigmoid(
            sep_vectors.slice(ndarray::s![..n, ..]),
            self.params.get(heads.coref_w),
            self.params.get(heads.coref_b)[[0, 0]],
        ))
    }

    pub fn reconstruct_words(&self, output: &EncoderOutput) -> Result<Vec<f64>> {
        let heads = self.heads()?;
        let source: Vec<f64> = match self.config.word_head_input {
            WordHeadInput::Cls => output.cls_vector.clone(),
            WordHeadInput::LastSep => output
                .sep_vectors
                .row(output.sep_vectors.nrows() - 1)
                .to_vec(),
        };
        let w = self.params.get(heads.word_w);
        let b = self.params.get(heads.word_b);
        Ok((0..w.ncols())
            .map(|j| {
                let z: f64 = source.iter().zip(w.column(j)).map(|(x, w)| x * w).sum();
                sigmoid(z + b[[0, j]])
            })
            .collect())
    }

    /// Test and tooling access to the head parameters.
    pub fn head_param(&self, name: HeadParam) -> Result<ParamId> {
        let h = self.heads()?;
        Ok(match name {
            HeadParam::TopicW => h.topic_w,
            HeadParam::TopicB => h.topic_b,
            HeadParam::CorefW => h.coref_w,
            HeadParam::CorefB => h.coref_b,
            HeadParam::WordW => h.word_w,
            HeadParam::WordB => h.word_b,
        })
    }

    pub fn position_embeddings(&self) -> ParamId {
        self.layout.pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadParam {
    TopicW,
    TopicB,
    CorefW,
    CorefB,
    WordW,
    WordB,
}

/// `sigmoid(w · row + b)` for every row.
pub fn linear_sigmoid(rows: ArrayView2<'_, f64>, w: &Matrix, b: f64) -> Vec<f64> {
    rows.dot(w)
        .index_axis(Axis(1), 0)
        .iter()
        .map(|&z| sigmoid(z + b))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub cls_vector: Vec<f64>,
}

/// A frozen encoder. It exposes no mutable access to its parameters and
/// is never placed on a tape that is differentiated.
#[derive(Debug, Clone)]
pub struct Teacher {
    model: Model,
    max_len: usize,
}

impl Teacher {
    pub fn freeze(model: Model, max_len: usize) -> Self {
        Teacher { model, max_len }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn encode_teacher(&self, q_star: &str, vocab: &Vocabulary) -> Result<TeacherOutput> {
        let input = build_single_input(q_star, vocab, self.max_len)?;
        self.encode_input(&input)
    }

    pub fn encode_input(&self, input: &ModelInput) -> Result<TeacherOutput> {
        Ok(TeacherOutput {
            cls_vector: self.model.encode_cls(input)?,
        })
    }

    pub fn checksum(&self) -> String {
        self.model.params().checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_model_input, Conversation};
    use crate::rng;
    use ndarray::array;

    fn small_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_size: 8,
            layers: 2,
            heads: 2,
            ff_size: 16,
            max_positions: 32,
            vocab_size: vocab,
            dropout: 0.0,
            word_head_input: WordHeadInput::Cls,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f", "g", "h"]).unwrap()
    }

    fn input(queries: &[&str]) -> ModelInput {
        let c = Conversation::new("t", queries.iter().map(|s| s.to_string()).collect()).unwrap();
        build_model_input(&c, &vocab(), 32).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(12);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_and_determinism() {
        let m = Model::new(small_config(12), true, &mut rng::stream(1, &[])).unwrap();
        let inp = input(&["a b c", "d e"]);
        let out = m.encode(&inp).unwrap();
        assert_eq!(out.hidden_states.dim(), (inp.len(), 8));
        assert_eq!(out.cls_vector, out.hidden_states.row(0).to_vec());
        assert_eq!(out.sep_vectors.row(1), out.hidden_states.row(inp.sep_positions[1]));
        assert!(out.hidden_states.iter().all(|v| v.is_finite()));
        assert_eq!(m.encode(&inp).unwrap(), out);
    }

    #[test]
    fn swapping_middle_tokens_changes_output() {
        let m = Model::new(small_config(12), false, &mut rng::stream(7, &[])).unwrap();
        let a = m.encode(&input(&["a b c d"])).unwrap();
        let b = m.encode(&input(&["a c b d"])).unwrap();
        let diff: f64 = (&a.hidden_states - &b.hidden_states).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn without_positions_single_layer_is_permutation_covariant() {
        let mut cfg = small_config(12);
        cfg.layers = 1;
        let mut m = Model::new(cfg, false, &mut rng::stream(7, &[])).unwrap();
        let pos = m.position_embeddings();
        m.params_mut().get_mut(pos).fill(0.0);
        let a = m.encode(&input(&["a b c d"])).unwrap().hidden_states;
        let b = m.encode(&input(&["a c b d"])).unwrap().hidden_states;
        // tokens b and c sit at positions 2 and 3
        for (ra, rb) in [(2, 3), (3, 2), (1, 1), (0, 0), (4, 4), (5, 5)] {
            for (x, y) in a.row(ra).iter().zip(b.row(rb).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(small_config(6), false, &mut rng::stream(1, &[])).unwrap();
        let inp = input(&["a h"]);
        assert!(matches!(m.encode(&inp), Err(Error::TokenOutOfRange { .. })));
        let mut long = input(&["a"]);
        long.token_ids = vec![0; 40];
        assert!(m.encode(&long).is_err());
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut m = Model::new(small_config(12), true, &mut rng::stream(2, &[])).unwrap();
        for hp in [HeadParam::TopicW, HeadParam::CorefW, HeadParam::WordW, HeadParam::WordB] {
            let id = m.head_param(hp).unwrap();
            m.params_mut().get_mut(id).fill(0.0);
        }
        let out = m.encode(&input(&["a b", "c", "d"])).unwrap();
        assert_eq!(m.predict_topic(&out.sep_vectors).unwrap(), vec![0.5; 3]);
        assert_eq!(m.predict_coref(&out.sep_vectors).unwrap(), vec![0.5; 2]);
        let words = m.reconstruct_words(&out).unwrap();
        assert_eq!(words.len(), 12);
        assert!(words.iter().all(|&p| p == 0.5));

        let tb = m.head_param(HeadParam::TopicB).unwrap();
        m.params_mut().get_mut(tb).fill(10.0);
        assert!(m.predict_topic(&out.sep_vectors).unwrap().iter().all(|&p| p > 0.99));
    }

    #[test]
    fn single_context_utterance_has_one_coref_probability() {
        let m = Model::new(small_config(12), true, &mut rng::stream(2, &[])).unwrap();
        let out = m.encode(&input(&["a b", "c"])).unwrap();
        assert_eq!(m.predict_coref(&out.sep_vectors).unwrap().len(), 1);
    }

    #[test]
    fn head_dot_products_by_hand() {
        let seps = array![[0.5, -1.0, 2.0, 0.25], [1.0, 0.0, -0.5, 4.0]];
        let w = array![[0.2], [0.1], [-0.3], [0.05]];
        let probs = linear_sigmoid(seps.view(), &w, 0.1);
        // 0.1 - 0.1 - 0.6 + 0.0125 + 0.1 = -0.4875 ; 0.2 + 0.15 + 0.2 + 0.1 = 0.65
        let z = [-0.4875, 0.65];
        for (p, z) in probs.iter().zip(z) {
            assert!((p - 1.0 / (1.0 + f64::exp(-z))).abs() < 1e-12);
        }
    }

    #[test]
    fn word_head_matches_matrix_vector_product() {
        let mut cfg = small_config(6);
        cfg.hidden_size = 4;
        let mut m = Model::new(cfg, true, &mut rng::stream(4, &[])).unwrap();
        let ww = m.head_param(HeadParam::WordW).unwrap();
        let wb = m.head_param(HeadParam::WordB).unwrap();
        *m.params_mut().get_mut(ww) = Matrix::from_shape_fn((4, 6), |(i, j)| (i as f64 - 1.5) * 0.1 + j as f64 * 0.05);
        *m.params_mut().get_mut(wb) = Matrix::from_shape_fn((1, 6), |(_, j)| -0.1 * j as f64);
        let out = EncoderOutput {
            hidden_states: Matrix::zeros((1, 4)),
            cls_vector: vec![1.0, -2.0, 0.5, 3.0],
            sep_vectors: Matrix::zeros((1, 4)),
        };
        let got = m.reconstruct_words(&out).unwrap();
        for (j, g) in got.iter().enumerate() {
            let mut z = -0.1 * j as f64;
            for (i, x) in out.cls_vector.iter().enumerate() {
                z += x * ((i as f64 - 1.5) * 0.1 + j as f64 * 0.05);
            }
            assert!((g - sigmoid(z)).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_is_deterministic() {
        let v = vocab();
        let t = Teacher::freeze(Model::new(small_config(v.len()), false, &mut rng::stream(3, &[])).unwrap(), 32);
        let a = t.encode_teacher("a b c", &v).unwrap();
        assert_eq!(a.cls_vector.len(), 8);
        assert_eq!(a, t.encode_teacher("a b c", &v).unwrap());
    }
}
