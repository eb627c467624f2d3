//! Embedding + BiLSTM tagger with a softmax or CRF head and Gaussian
//! projection heads used for consistency regularization.

mod checkpoint;
mod crf;
mod lstm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use crf::{crf_log_partition, crf_log_partition_on_tape, crf_path_score, crf_token_marginals, crf_viterbi};

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LabelScheme, Sentence};
use crate::numerics::tape::{matmul, softplus};
use crate::numerics::{softmax, Tape, Tensor, Var};
use crate::Scalar;
use lstm::{lstm_forward, LstmOp};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Softmax,
    Crf,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "crf" => Ok(Self::Crf),
            other => Err(format!("unknown head {other:?} (expected softmax or crf)")),
        }
    }
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Crf => "crf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub emb_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub dropout: f64,
    pub head: HeadKind,
    /// Embedding rows start uniform in `(-embedding_scale, embedding_scale)`.
    pub embedding_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb_dim: 32,
            hidden: 32,
            dropout: 0.1,
            head: HeadKind::Softmax,
            embedding_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.emb_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("emb_dim and hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if !(self.embedding_scale > 0.0) || !self.embedding_scale.is_finite() {
            return Err(ModelError::Config(format!("embedding_scale = {} must be positive", self.embedding_scale)));
        }
        Ok(())
    }

    /// Width of the concatenated bidirectional state.
    pub fn state_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Token vocabulary; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;

impl Vocab {
    /// Sorted, de-duplicated token set of `sentences`.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let set: BTreeSet<&str> = sentences
            .into_iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
            .filter(|t| *t != UNK_TOKEN)
            .collect();
        Self::from_tokens(set.into_iter().map(str::to_owned))
    }

    /// `tokens` excludes the unknown token, which is prepended.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![UNK_TOKEN.to_owned()];
        all.extend(tokens.into_iter().filter(|t| t != UNK_TOKEN));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Known tokens in id order, without the unknown token.
    pub fn known_tokens(&self) -> &[String] {
        &self.tokens[1..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    Embedding,
    FwdInput,
    FwdRecurrent,
    FwdBias,
    BwdInput,
    BwdRecurrent,
    BwdBias,
    OutWeight,
    OutBias,
    MuHidden,
    MuHiddenBias,
    MuOut,
    MuOutBias,
    SigmaHidden,
    SigmaHiddenBias,
    SigmaOut,
    SigmaOutBias,
    Transitions,
}

impl ParamId {
    pub const ALL: [ParamId; 18] = [
        ParamId::Embedding,
        ParamId::FwdInput,
        ParamId::FwdRecurrent,
        ParamId::FwdBias,
        ParamId::BwdInput,
        ParamId::BwdRecurrent,
        ParamId::BwdBias,
        ParamId::OutWeight,
        ParamId::OutBias,
        ParamId::MuHidden,
        ParamId::MuHiddenBias,
        ParamId::MuOut,
        ParamId::MuOutBias,
        ParamId::SigmaHidden,
        ParamId::SigmaHiddenBias,
        ParamId::SigmaOut,
        ParamId::SigmaOutBias,
        ParamId::Transitions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Embedding => "embedding",
            ParamId::FwdInput => "encoder.forward.input",
            ParamId::FwdRecurrent => "encoder.forward.recurrent",
            ParamId::FwdBias => "encoder.forward.bias",
            ParamId::BwdInput => "encoder.backward.input",
            ParamId::BwdRecurrent => "encoder.backward.recurrent",
            ParamId::BwdBias => "encoder.backward.bias",
            ParamId::OutWeight => "head.weight",
            ParamId::OutBias => "head.bias",
            ParamId::MuHidden => "mu.hidden.weight",
            ParamId::MuHiddenBias => "mu.hidden.bias",
            ParamId::MuOut => "mu.out.weight",
            ParamId::MuOutBias => "mu.out.bias",
            ParamId::SigmaHidden => "sigma.hidden.weight",
            ParamId::SigmaHiddenBias => "sigma.hidden.bias",
            ParamId::SigmaOut => "sigma.out.weight",
            ParamId::SigmaOutBias => "sigma.out.bias",
            ParamId::Transitions => "crf.transitions",
        }
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            ParamId::FwdBias
                | ParamId::BwdBias
                | ParamId::OutBias
                | ParamId::MuHiddenBias
                | ParamId::MuOutBias
                | ParamId::SigmaHiddenBias
                | ParamId::SigmaOutBias
                | ParamId::Transitions
        )
    }

    pub fn for_head(head: HeadKind) -> &'static [ParamId] {
        match head {
            HeadKind::Softmax => &Self::ALL[..17],
            HeadKind::Crf => &Self::ALL[..],
        }
    }
}

/// Per-token outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSentence<T: Scalar> {
    /// `[L, h']`
    pub hidden: Tensor<T>,
    /// `[L, |Y|]` emission scores.
    pub logits: Tensor<T>,
    /// `[L, |Y|]` softmax rows or CRF marginals.
    pub probs: Tensor<T>,
}

/// Tape handles produced by [`SequenceLabeler::forward_tape`].
pub struct TapeForward {
    /// One handle per entry of [`SequenceLabeler::param_ids`].
    pub params: Vec<Var>,
    pub hidden: Var,
    pub emissions: Var,
}

impl TapeForward {
    pub fn param(&self, ids: &[ParamId], id: ParamId) -> Var {
        let pos = ids.iter().position(|&p| p == id).expect("parameter present for this head");
        self.params[pos]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLabeler<T: Scalar> {
    config: ModelConfig,
    scheme: LabelScheme,
    vocab: Vocab,
    params: Vec<Tensor<T>>,
}

/// Inverted-dropout mask of `n` entries: kept entries hold `1 / (1 - rate)`.
fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn add_bias_rows<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn concat_rows<T: Scalar>(a: &[T], b: &[T], rows: usize, ca: usize, cb: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}

/// softplus(-2.25) is about 0.1.
const INIT_SIGMA_PRE: f64 = -2.25;

impl<T: Scalar> SequenceLabeler<T> {
    /// Fresh model: weights uniform in (-0.1, 0.1), embeddings uniform in
    /// `(-embedding_scale, embedding_scale)`, biases and transitions zero.
    /// The Gaussian heads start near the multiplicative identity: the mean
    /// bias is 1 and the scale bias puts the noise scale near 0.1.
    pub fn new(config: ModelConfig, scheme: LabelScheme, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for &id in ParamId::for_head(config.head) {
            let shape = Self::shape_of(&config, &scheme, &vocab, id);
            let n: usize = shape.iter().product();
            let values = if id == ParamId::MuOutBias {
                vec![T::one(); n]
            } else if id == ParamId::SigmaOutBias {
                vec![T::of(INIT_SIGMA_PRE); n]
            } else if id.is_bias() {
                vec![T::zero(); n]
            } else if id == ParamId::Embedding {
                let a = config.embedding_scale;
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            } else {
                (0..n).map(|_| T::of(rng.gen_range(-0.1..0.1))).collect()
            };
            params.push(Tensor::new(shape, values).expect("shape matches"));
        }
        Ok(Self {
            config,
            scheme,
            vocab,
            params,
        })
    }

    fn shape_of(config: &ModelConfig, scheme: &LabelScheme, vocab: &Vocab, id: ParamId) -> Vec<usize> {
        let (d, h, s, y) = (config.emb_dim, config.hidden, config.state_dim(), scheme.num_tags());
        match id {
            ParamId::Embedding => vec![vocab.len(), d],
            ParamId::FwdInput | ParamId::BwdInput => vec![d, 4 * h],
            ParamId::FwdRecurrent | ParamId::BwdRecurrent => vec![h, 4 * h],
            ParamId::FwdBias | ParamId::BwdBias => vec![4 * h],
            ParamId::OutWeight => vec![s, y],
            ParamId::OutBias => vec![y],
            ParamId::MuHidden | ParamId::MuOut | ParamId::SigmaHidden | ParamId::SigmaOut => vec![s, s],
            ParamId::MuHiddenBias | ParamId::MuOutBias | ParamId::SigmaHiddenBias | ParamId::SigmaOutBias => vec![s],
            ParamId::Transitions => vec![y, y],
        }
    }

    /// Assembles a model from explicit tensors, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        scheme: LabelScheme,
        vocab: Vocab,
        params: Vec<Tensor<T>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let ids = ParamId::for_head(config.head);
        if params.len() != ids.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                ids.len(),
                params.len()
            )));
        }
        for (&id, p) in ids.iter().zip(&params) {
            let want = Self::shape_of(&config, &scheme, &vocab, id);
            if p.shape() != want.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    id.name(),
                    p.shape(),
                    want
                )));
            }
            if !p.is_finite() {
                return Err(ModelError::Checkpoint(format!("{} holds non-finite values", id.name())));
            }
        }
        Ok(Self {
            config,
            scheme,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn num_tags(&self) -> usize {
        self.scheme.num_tags()
    }

    pub fn param_ids(&self) -> &'static [ParamId] {
        ParamId::for_head(self.config.head)
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        let pos = self.param_ids().iter().position(|&p| p == id).expect("parameter present for this head");
        &self.params[pos]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let pos = self.param_ids().iter().position(|&p| p == id).expect("parameter present for this head");
        &mut self.params[pos]
    }

    /// Sets the dropout rate used by stochastic passes.
    pub fn set_dropout(&mut self, rate: f64) -> Result<(), ModelError> {
        let mut c = self.config.clone();
        c.dropout = rate;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in [`Self::param_ids`] order.
    pub fn flat_params(&self) -> Tensor<T> {
        Tensor::vector(self.params.iter().flat_map(|p| p.values().iter().copied()).collect())
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn token_ids(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    fn masks(&self, rng: Option<&mut ChaCha8Rng>, len: usize) -> Option<(Vec<T>, Vec<T>)> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let emb = dropout_mask(rng, len * self.config.emb_dim, rate);
                let out = dropout_mask(rng, len * self.config.state_dim(), rate);
                Some((emb, out))
            }
            _ => None,
        }
    }

    /// Hidden states and emission scores; `rng` enables dropout.
    fn run(&self, ids: &[usize], rng: Option<&mut ChaCha8Rng>) -> (Vec<T>, Vec<T>) {
        let (d, h, s, y) = (self.config.emb_dim, self.config.hidden, self.config.state_dim(), self.num_tags());
        let len = ids.len();
        let masks = self.masks(rng, len);
        let table = self.param(ParamId::Embedding).values();
        let mut x: Vec<T> = ids.iter().flat_map(|&i| table[i * d..(i + 1) * d].iter().copied()).collect();
        if let Some((m, _)) = &masks {
            x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let p = |id| self.param(id).values();
        let fwd = lstm_forward(&x, len, d, p(ParamId::FwdInput), p(ParamId::FwdRecurrent), p(ParamId::FwdBias), h, false);
        let bwd = lstm_forward(&x, len, d, p(ParamId::BwdInput), p(ParamId::BwdRecurrent), p(ParamId::BwdBias), h, true);
        let mut hidden = concat_rows(&fwd.out, &bwd.out, len, h, h);
        if let Some((_, m)) = &masks {
            hidden.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let mut logits = matmul(&hidden, p(ParamId::OutWeight), len, s, y);
        add_bias_rows(&mut logits, p(ParamId::OutBias));
        (hidden, logits)
    }

    /// Per-token distributions from emission scores under this head.
    pub fn distributions(&self, logits: &Tensor<T>) -> Tensor<T> {
        match self.config.head {
            HeadKind::Softmax => {
                let (rows, cols) = (logits.rows(), logits.cols());
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend(softmax(logits.row(r)));
                }
                Tensor::matrix(rows, cols, out)
            }
            HeadKind::Crf => crf_token_marginals(logits, self.param(ParamId::Transitions)),
        }
    }

    /// One forward pass. With `dropout_active`, masks are drawn from `noise_seed`.
    pub fn encode(&self, sentence: &Sentence, dropout_active: bool, noise_seed: u64) -> EncodedSentence<T> {
        let ids = self.token_ids(sentence);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (hidden, logits) = self.run(&ids, dropout_active.then_some(&mut rng));
        let len = ids.len();
        let hidden = Tensor::matrix(len, self.config.state_dim(), hidden);
        let logits = Tensor::matrix(len, self.num_tags(), logits);
        let probs = self.distributions(&logits);
        EncodedSentence { hidden, logits, probs }
    }

    /// Deterministic decoding: per-token argmax or Viterbi.
    pub fn predict_tags(&self, sentence: &Sentence) -> Vec<usize> {
        let enc = self.encode(sentence, false, 0);
        match self.config.head {
            HeadKind::Softmax => (0..enc.logits.rows()).map(|r| argmax(enc.logits.row(r))).collect(),
            HeadKind::Crf => crf_viterbi(&enc.logits, self.param(ParamId::Transitions)).0,
        }
    }

    /// Softmax of the emission affine applied to one hidden vector.
    pub fn softmax_head(&self, hidden: &[T]) -> Vec<T> {
        let (s, y) = (self.config.state_dim(), self.num_tags());
        assert_eq!(hidden.len(), s);
        let mut logits = matmul(hidden, self.param(ParamId::OutWeight).values(), 1, s, y);
        add_bias_rows(&mut logits, self.param(ParamId::OutBias).values());
        softmax(&logits)
    }

    fn mlp(&self, hidden: &[T], w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Vec<T> {
        let s = self.config.state_dim();
        let mut a = matmul(hidden, self.param(w1).values(), 1, s, s);
        add_bias_rows(&mut a, self.param(b1).values());
        a.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mut o = matmul(&a, self.param(w2).values(), 1, s, s);
        add_bias_rows(&mut o, self.param(b2).values());
        o
    }

    /// Gaussian heads: mean and non-negative scale vectors of width h'.
    pub fn gaussian_project(&self, hidden: &[T]) -> (Vec<T>, Vec<T>) {
        assert_eq!(hidden.len(), self.config.state_dim());
        let mu = self.mlp(hidden, ParamId::MuHidden, ParamId::MuHiddenBias, ParamId::MuOut, ParamId::MuOutBias);
        let sigma = self
            .mlp(hidden, ParamId::SigmaHidden, ParamId::SigmaHiddenBias, ParamId::SigmaOut, ParamId::SigmaOutBias)
            .into_iter()
            .map(softplus)
            .collect();
        (mu, sigma)
    }

    /// Records a forward pass on `tape`. Parameters become leaves that
    /// require gradients iff `train`. Values equal [`Self::encode`] for the
    /// same dropout stream.
    pub fn forward_tape(&self, tape: &mut Tape<T>, ids: &[usize], rng: Option<&mut ChaCha8Rng>, train: bool) -> TapeForward {
        let (d, h) = (self.config.emb_dim, self.config.hidden);
        let len = ids.len();
        let masks = self.masks(rng, len);
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), train)).collect();
        let ids_list = self.param_ids();
        let v = |id: ParamId| params[ids_list.iter().position(|&p| p == id).unwrap()];

        let mut x = tape.gather(v(ParamId::Embedding), ids);
        if let Some((m, _)) = &masks {
            let mv = tape.constant(Tensor::matrix(len, d, m.clone()));
            x = tape.mul(x, mv);
        }
        let mut dirs = Vec::with_capacity(2);
        for (wi, wh, b, reverse) in [
            (ParamId::FwdInput, ParamId::FwdRecurrent, ParamId::FwdBias, false),
            (ParamId::BwdInput, ParamId::BwdRecurrent, ParamId::BwdBias, true),
        ] {
            let trace = lstm_forward(
                tape.value(x).values(),
                len,
                d,
                self.param(wi).values(),
                self.param(wh).values(),
                self.param(b).values(),
                h,
                reverse,
            );
            let op = LstmOp {
                len,
                d,
                h,
                reverse,
                gates: trace.gates,
                cells: trace.cells,
            };
            dirs.push(tape.custom(
                vec![x, v(wi), v(wh), v(b)],
                Tensor::matrix(len, h, trace.out),
                Box::new(op),
            ));
        }
        let mut hidden = tape.concat_cols(dirs[0], dirs[1]);
        if let Some((_, m)) = &masks {
            let mv = tape.constant(Tensor::matrix(len, self.config.state_dim(), m.clone()));
            hidden = tape.mul(hidden, mv);
        }
        let lin = tape.matmul(hidden, v(ParamId::OutWeight));
        let emissions = tape.add_bias(lin, v(ParamId::OutBias));
        TapeForward {
            params,
            hidden,
            emissions,
        }
    }

    /// Emission affine on arbitrary hidden rows, recorded on `tape`.
    pub fn emissions_on_tape(&self, tape: &mut Tape<T>, fwd: &TapeForward, hidden: Var) -> Var {
        let ids = self.param_ids();
        let lin = tape.matmul(hidden, fwd.param(ids, ParamId::OutWeight));
        tape.add_bias(lin, fwd.param(ids, ParamId::OutBias))
    }

    /// Gaussian heads on `[L, h']` hidden rows, recorded on `tape`.
    pub fn gaussian_on_tape(&self, tape: &mut Tape<T>, fwd: &TapeForward, hidden: Var) -> (Var, Var) {
        let ids = self.param_ids();
        let mut mlp = |w1, b1, w2, b2| {
            let a = tape.matmul(hidden, fwd.param(ids, w1));
            let a = tape.add_bias(a, fwd.param(ids, b1));
            let a = tape.relu(a);
            let o = tape.matmul(a, fwd.param(ids, w2));
            tape.add_bias(o, fwd.param(ids, b2))
        };
        let mu = mlp(ParamId::MuHidden, ParamId::MuHiddenBias, ParamId::MuOut, ParamId::MuOutBias);
        let pre = mlp(ParamId::SigmaHidden, ParamId::SigmaHiddenBias, ParamId::SigmaOut, ParamId::SigmaOutBias);
        let sigma = tape.softplus(pre);
        (mu, sigma)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad_check;

    pub(crate) fn toy_model(head: HeadKind, dropout: f64, seed: u64) -> (SequenceLabeler<f64>, Sentence) {
        let scheme = LabelScheme::new(["A".to_string(), "B".to_string()]).unwrap();
        let sentence = Sentence::new(
            ["x", "y", "z", "x"].iter().map(|s| s.to_string()).collect(),
            Some(vec![1, 2, 0, 3]),
        )
        .unwrap();
        let vocab = Vocab::build([&sentence]);
        let config = ModelConfig {
            emb_dim: 4,
            hidden: 3,
            dropout,
            head,
            ..Default::default()
        };
        (SequenceLabeler::new(config, scheme, vocab, seed).unwrap(), sentence)
    }

    #[test]
    fn vocab_maps_unknown_to_zero() {
        let (m, _) = toy_model(HeadKind::Softmax, 0.0, 1);
        assert_eq!(m.vocab().id("nope"), UNK_ID);
        assert_eq!(m.vocab().id("x"), 1);
        assert_eq!(m.vocab().len(), 4);
    }

    #[test]
    fn dropout_behaviour() {
        let (m, s) = toy_model(HeadKind::Softmax, 0.0, 1);
        assert_eq!(m.encode(&s, true, 7), m.encode(&s, false, 0));
        let (m, s) = toy_model(HeadKind::Softmax, 0.5, 1);
        assert_eq!(m.encode(&s, true, 3), m.encode(&s, true, 3));
        assert_ne!(m.encode(&s, true, 1).hidden, m.encode(&s, true, 2).hidden);
    }

    #[test]
    fn rows_are_distributions() {
        for head in [HeadKind::Softmax, HeadKind::Crf] {
            let (m, s) = toy_model(head, 0.3, 2);
            let enc = m.encode(&s, true, 9);
            for r in 0..enc.probs.rows() {
                let sum: f64 = enc.probs.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tape_matches_inference_bitwise() {
        for head in [HeadKind::Softmax, HeadKind::Crf] {
            let (m, s) = toy_model(head, 0.4, 3);
            let enc = m.encode(&s, true, 11);
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let f = m.forward_tape(&mut tape, &m.token_ids(&s), Some(&mut rng), false);
            assert_eq!(tape.value(f.hidden).values(), enc.hidden.values());
            assert_eq!(tape.value(f.emissions).values(), enc.logits.values());
        }
    }

    #[test]
    fn softmax_head_cases() {
        let (mut m, _) = toy_model(HeadKind::Softmax, 0.0, 1);
        m.param_mut(ParamId::OutWeight).values_mut().iter_mut().for_each(|v| *v = 0.0);
        let p = m.softmax_head(&[0.3; 6]);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-12));

        let scheme = LabelScheme::new(["A".to_string()]).unwrap();
        let mut m2 = SequenceLabeler::<f64>::new(
            ModelConfig { emb_dim: 2, hidden: 1, dropout: 0.0, head: HeadKind::Softmax, ..Default::default() },
            scheme,
            Vocab::from_tokens(vec![]),
            1,
        )
        .unwrap();
        // Three tags; push tag 2 to -inf-ish and set logits [ln 3, 0].
        m2.param_mut(ParamId::OutWeight).values_mut().iter_mut().for_each(|v| *v = 0.0);
        m2.param_mut(ParamId::OutBias).values_mut().copy_from_slice(&[3f64.ln(), 0.0, -1e9]);
        let p = m2.softmax_head(&[1.0, -1.0]);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        m2.param_mut(ParamId::OutBias).values_mut().iter_mut().for_each(|v| *v += 5.0);
        let q = m2.softmax_head(&[1.0, -1.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_heads() {
        let (mut m, _) = toy_model(HeadKind::Softmax, 0.0, 1);
        for id in [ParamId::MuHidden, ParamId::MuOut, ParamId::SigmaHidden, ParamId::SigmaOut] {
            m.param_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (mu, sigma) = m.gaussian_project(&[0.5, -0.2, 0.1, 0.9, 0.0, 1.0]);
        assert_eq!((mu.len(), sigma.len()), (6, 6));
        // Only the output biases remain: the mean starts at 1, the scale near 0.1.
        assert!(mu.iter().all(|&v| v == 1.0));
        let expected = (1.0 + INIT_SIGMA_PRE.exp()).ln();
        assert!(sigma.iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.1).abs() < 0.01);
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        let (m, _) = toy_model(HeadKind::Softmax, 0.0, 4);
        let hidden = Tensor::matrix(1, 6, vec![0.5, -0.2, 0.1, 0.9, -0.7, 1.0]);
        let w = m.param(ParamId::SigmaHidden).clone();
        let err = finite_diff_grad_check(|wt: &Tensor<f64>| {
            let mut mm = m.clone();
            *mm.param_mut(ParamId::SigmaHidden) = wt.clone();
            let mut tape = Tape::new();
            let f = mm.forward_tape(&mut tape, &[1], None, true);
            let hv = tape.constant(hidden.clone());
            let (_, sigma) = mm.gaussian_on_tape(&mut tape, &f, hv);
            let loss = tape.sum(sigma);
            let g = tape.backward(loss);
            let wv = f.param(mm.param_ids(), ParamId::SigmaHidden);
            (tape.value(loss).item(), g.get(wv).unwrap().to_vec())
        }, &w, 1e-5)
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for head in [HeadKind::Softmax, HeadKind::Crf] {
            let (m, s) = toy_model(head, 0.3, 5);
            let ids = m.token_ids(&s);
            let flat = m.flat_params();
            let err = finite_diff_grad_check(|p: &Tensor<f64>| {
                let mut mm = m.clone();
                mm.set_flat_params(p.values());
                let mut tape = Tape::new();
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let f = mm.forward_tape(&mut tape, &ids, Some(&mut rng), true);
                let ls = tape.log_softmax(f.emissions);
                let picked = tape.pick(ls, vec![(0, 1), (1, 2), (2, 0), (3, 3)]);
                let loss = tape.sum(picked);
                let g = tape.backward(loss);
                let grad = f.params.iter().flat_map(|&v| g.get(v).unwrap().to_vec()).collect();
                (tape.value(loss).item(), grad)
            }, &flat, 1e-5)
            .unwrap();
            assert!(err < 1e-4, "{head:?}: {err}");
        }
    }
}
