//! Model assembly: configuration, the named parameter store, and the shared
//! encode pipeline feeding the three task heads.

mod attention;
mod embedding;
mod encoder;
mod heads;

pub use attention::{c2q_attention, fuse, q2c_attention, similarity_matrix};
pub use embedding::{embed_tokens, highway};
pub use encoder::{
    depthwise_separable_conv, encoder_forward, multi_head_self_attention, positional_encoding,
    EncoderStack,
};
pub use heads::{
    classification_head, decode_span, masked_mean_rows, multichoice_head, pooled_query_vector,
    span_head, span_loss, ClassOutputs, SpanOutputs, SpanPrediction,
};

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::text::{AnswerClasses, EmbeddingTable, QAExample, TokenizedText, Vocabulary};

/// Which head the model is trained and evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    OpenEnded,
    MultipleChoice,
    Span,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::OpenEnded => "open_ended",
            TaskMode::MultipleChoice => "multiple_choice",
            TaskMode::Span => "span",
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open_ended" => Ok(TaskMode::OpenEnded),
            "multiple_choice" => Ok(TaskMode::MultipleChoice),
            "span" => Ok(TaskMode::Span),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Model hyperparameters. `full` mirrors the reference encoder defaults;
/// `desk` is the small profile every bundled run and test uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_word_len: usize,
    pub emb_blocks: usize,
    pub emb_conv_layers: usize,
    pub model_blocks: usize,
    pub model_conv_layers: usize,
    pub kernel: usize,
    pub ff_hidden: usize,
    /// Dropout on embedding and residual branches; the multiple-choice MLP
    /// always uses its own fixed 0.5.
    pub dropout: f64,
    pub max_span: usize,
    /// When set, the model-encoder passes reuse the embedding-encoder
    /// parameters (and its block structure) instead of a dedicated set.
    pub share_encoder_params: bool,
    pub mc_hidden: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            word_dim: 300,
            char_dim: 64,
            model_dim: 128,
            heads: 4,
            max_word_len: 16,
            emb_blocks: 1,
            emb_conv_layers: 4,
            model_blocks: 7,
            model_conv_layers: 2,
            kernel: 7,
            ff_hidden: 128,
            dropout: 0.1,
            max_span: 30,
            share_encoder_params: false,
            mc_hidden: 128,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            word_dim: 16,
            char_dim: 8,
            model_dim: 32,
            heads: 4,
            max_word_len: 16,
            emb_blocks: 1,
            emb_conv_layers: 4,
            model_blocks: 2,
            model_conv_layers: 2,
            kernel: 7,
            ff_hidden: 32,
            dropout: 0.0,
            max_span: 30,
            share_encoder_params: false,
            mc_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model width must be even for positional encoding, got {}",
                self.model_dim
            )));
        }
        if self.emb_blocks == 0 || self.model_blocks == 0 || self.max_span == 0 {
            return Err(Error::Config("block counts and max_span must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embedding_stack(&self) -> EncoderStack {
        EncoderStack {
            prefix: "emb_enc",
            blocks: self.emb_blocks,
            conv_layers: self.emb_conv_layers,
            kernel: self.kernel,
            heads: self.heads,
            dim: self.model_dim,
            ff_hidden: self.ff_hidden,
            dropout: self.dropout,
        }
    }

    pub fn model_stack(&self) -> EncoderStack {
        if self.share_encoder_params {
            return self.embedding_stack();
        }
        EncoderStack {
            prefix: "model_enc",
            blocks: self.model_blocks,
            conv_layers: self.model_conv_layers,
            kernel: self.kernel,
            heads: self.heads,
            dim: self.model_dim,
            ff_hidden: self.ff_hidden,
            dropout: self.dropout,
        }
    }
}

/// Ordered, named parameter tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone)]
pub struct Parameters<T> {
    entries: IndexMap<String, Tensor<T>>,
    /// Per-row trainability for embedding tables; absent means fully trainable.
    row_trainable: HashMap<String, Vec<bool>>,
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Parameters<T> {
    pub fn new() -> Self {
        Parameters {
            entries: IndexMap::new(),
            row_trainable: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn set_row_trainable(&mut self, name: impl Into<String>, rows: Vec<bool>) {
        self.row_trainable.insert(name.into(), rows);
    }

    pub fn row_trainable(&self, name: &str) -> Option<&[bool]> {
        self.row_trainable.get(name).map(Vec::as_slice)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            row_trainable: self.row_trainable.clone(),
        }
    }
}

/// Parameters bound into a graph as differentiable leaves for one forward pass.
pub struct Bound<'g, T: Real> {
    graph: &'g Graph<T>,
    ids: IndexMap<String, NodeId>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn bind(graph: &'g Graph<T>, params: &Parameters<T>) -> Self {
        let ids = params
            .iter()
            .map(|(name, tensor)| (name.clone(), graph.var(tensor.clone())))
            .collect();
        Bound { graph, ids }
    }

    /// Bind existing graph nodes under parameter names, e.g. to drive a block
    /// with externally created differentiation leaves.
    pub fn from_named<I>(graph: &'g Graph<T>, entries: I) -> Self
    where
        I: IntoIterator<Item = (String, NodeId)>,
    {
        Bound {
            graph,
            ids: entries.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Gradients accumulated by backward, zeros where none flowed.
    pub fn grads(&self, params: &Parameters<T>) -> IndexMap<String, Tensor<T>> {
        self.ids
            .iter()
            .map(|(name, id)| {
                let g = self
                    .graph
                    .grad(*id)
                    .unwrap_or_else(|| Tensor::zeros(params.get(name).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn glorot<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(
        vec![rows, cols],
        T::from_f64(-limit),
        T::from_f64(limit),
        rng,
    )
}

/// Residual-branch output weights start 10x smaller so the freshly
/// initialized stack is close to the identity map; token-level structure
/// then survives to the heads instead of being scrambled by random mixing.
const BRANCH_OUT_SCALE: f64 = 0.1;

fn glorot_branch_out<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let limit = BRANCH_OUT_SCALE * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(
        vec![rows, cols],
        T::from_f64(-limit),
        T::from_f64(limit),
        rng,
    )
}

fn init_stack<R: Rng>(params: &mut Parameters<f32>, stack: &EncoderStack, rng: &mut R) {
    let d = stack.dim;
    for b in 0..stack.blocks {
        for l in 0..stack.conv_layers {
            let p = format!("{}.b{b}.conv{l}", stack.prefix);
            params.insert(format!("{p}.ln.gain"), Tensor::filled(vec![d], 1.0));
            params.insert(format!("{p}.ln.bias"), Tensor::zeros(vec![d]));
            params.insert(format!("{p}.depthwise"), glorot(stack.kernel, d, rng));
            params.insert(format!("{p}.pointwise"), glorot_branch_out(d, d, rng));
            params.insert(format!("{p}.bias"), Tensor::zeros(vec![d]));
        }
        let p = format!("{}.b{b}.attn", stack.prefix);
        params.insert(format!("{p}.ln.gain"), Tensor::filled(vec![d], 1.0));
        params.insert(format!("{p}.ln.bias"), Tensor::zeros(vec![d]));
        for w in ["wq", "wk", "wv"] {
            params.insert(format!("{p}.{w}"), glorot(d, d, rng));
        }
        params.insert(format!("{p}.wo"), glorot_branch_out(d, d, rng));
        let p = format!("{}.b{b}.ff", stack.prefix);
        params.insert(format!("{p}.ln.gain"), Tensor::filled(vec![d], 1.0));
        params.insert(format!("{p}.ln.bias"), Tensor::zeros(vec![d]));
        params.insert(format!("{p}.w1"), glorot(d, stack.ff_hidden, rng));
        params.insert(format!("{p}.b1"), Tensor::zeros(vec![stack.ff_hidden]));
        params.insert(format!("{p}.w2"), glorot_branch_out(stack.ff_hidden, d, rng));
        params.insert(format!("{p}.b2"), Tensor::zeros(vec![d]));
    }
}

/// Create the full parameter set for a mode. `word_table` is the loaded or
/// fallback word embedding table; the character table is always trainable.
pub fn init_parameters<R: Rng>(
    mode: TaskMode,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    word_table: EmbeddingTable,
    num_classes: usize,
    rng: &mut R,
) -> Parameters<f32> {
    let d = cfg.model_dim;
    let mut params = Parameters::new();

    params.insert("embed.word_table", word_table.rows().clone());
    params.set_row_trainable("embed.word_table", word_table.trainable_rows().to_vec());
    let char_table = EmbeddingTable::random(vocab.char_count(), cfg.char_dim, rng);
    params.insert("embed.char_table", char_table.rows().clone());
    params.set_row_trainable("embed.char_table", char_table.trainable_rows().to_vec());

    let joint = cfg.word_dim + cfg.char_dim;
    params.insert("embed.proj.w", glorot(joint, d, rng));
    params.insert("embed.proj.b", Tensor::zeros(vec![d]));
    for layer in 0..2 {
        let p = format!("embed.highway{layer}");
        params.insert(format!("{p}.transform.w"), glorot(d, d, rng));
        params.insert(format!("{p}.transform.b"), Tensor::zeros(vec![d]));
        params.insert(format!("{p}.gate.w"), glorot(d, d, rng));
        params.insert(format!("{p}.gate.b"), Tensor::zeros(vec![d]));
    }

    init_stack(&mut params, &cfg.embedding_stack(), rng);
    if !cfg.share_encoder_params {
        init_stack(&mut params, &cfg.model_stack(), rng);
    }

    // The product slice of the trilinear weight starts positive so matching
    // tokens attract attention before any embedding structure is learned.
    let w0_limit = (6.0 / (3 * d + 1) as f64).sqrt();
    let mut w0 = Tensor::uniform(
        vec![3 * d],
        (-w0_limit) as f32,
        w0_limit as f32,
        rng,
    )
    .into_data();
    for v in w0.iter_mut().skip(2 * d) {
        *v = v.abs();
    }
    params.insert("cq.w0", Tensor::new(vec![3 * d], w0).expect("w0 shape"));
    params.insert("cq.proj.w", glorot(4 * d, d, rng));
    params.insert("cq.proj.b", Tensor::zeros(vec![d]));

    match mode {
        TaskMode::Span => {
            params.insert("span.start.w", glorot(2 * d, 1, rng));
            params.insert("span.end.w", glorot(2 * d, 1, rng));
        }
        TaskMode::OpenEnded => {
            params.insert("class.w", glorot(num_classes, 3 * d, rng));
        }
        TaskMode::MultipleChoice => {
            params.insert("mc.w1", glorot(4 * d, cfg.mc_hidden, rng));
            params.insert("mc.b1", Tensor::zeros(vec![cfg.mc_hidden]));
            params.insert("mc.w2", glorot(cfg.mc_hidden, 1, rng));
            params.insert("mc.b2", Tensor::zeros(vec![1]));
        }
    }
    params
}

/// Context encodings after the three model-encoder passes.
pub struct PipelineOutputs {
    pub m0: NodeId,
    pub m1: NodeId,
    pub m2: NodeId,
}

/// The shared encode path: embed context and query, run the embedding
/// encoder over both, cross-attend, project, then apply the model encoder
/// three times over the fused context representation.
pub fn run_pipeline<T: Real, R: Rng>(
    g: &Graph<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    ctx: &TokenizedText,
    query: &TokenizedText,
    training: bool,
    rng: &mut R,
) -> Result<PipelineOutputs> {
    let ctx_emb = embed_and_encode(g, bound, cfg, ctx, training, rng)?;
    let q_emb = embed_and_encode(g, bound, cfg, query, training, rng)?;

    let w0 = bound.id("cq.w0");
    let s = similarity_matrix(g, ctx_emb, q_emb, w0)?;
    let a = c2q_attention(g, s, q_emb, &query.mask)?;
    let b = q2c_attention(g, s, ctx_emb, &ctx.mask, &query.mask)?;
    let fused = fuse(g, ctx_emb, a, b)?;
    let projected = g.add(
        g.matmul(fused, bound.id("cq.proj.w"))?,
        bound.id("cq.proj.b"),
    )?;

    let stack = cfg.model_stack();
    let m0 = encoder_forward(g, bound, &stack, projected, &ctx.mask, training, rng)?;
    let m1 = encoder_forward(g, bound, &stack, m0, &ctx.mask, training, rng)?;
    let m2 = encoder_forward(g, bound, &stack, m1, &ctx.mask, training, rng)?;
    Ok(PipelineOutputs { m0, m1, m2 })
}

fn embed_and_encode<T: Real, R: Rng>(
    g: &Graph<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    text: &TokenizedText,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let embedded = embed_tokens(g, bound, text)?;
    let projected = g.add(
        g.matmul(embedded, bound.id("embed.proj.w"))?,
        bound.id("embed.proj.b"),
    )?;
    let hw = highway(g, bound, projected)?;
    let hw = g.dropout(hw, cfg.dropout, training, rng)?;
    encoder_forward(g, bound, &cfg.embedding_stack(), hw, &text.mask, training, rng)
}

/// A trained (or freshly initialized) model with everything needed to run
/// predictions: parameters, vocabulary, and the answer-class map when in
/// open-ended mode.
pub struct Model {
    pub mode: TaskMode,
    pub config: ModelConfig,
    pub context_limit: usize,
    pub vocab: Vocabulary,
    pub classes: Option<AnswerClasses>,
    pub params: Parameters<f32>,
}

impl Model {
    pub fn new(
        mode: TaskMode,
        config: ModelConfig,
        context_limit: usize,
        vocab: Vocabulary,
        classes: Option<AnswerClasses>,
        word_table: EmbeddingTable,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if mode == TaskMode::OpenEnded && classes.as_ref().map_or(true, AnswerClasses::is_empty) {
            return Err(Error::Config(
                "open-ended mode needs a non-empty answer-class map".into(),
            ));
        }
        let num_classes = classes.as_ref().map_or(0, AnswerClasses::len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_parameters(mode, &config, &vocab, word_table, num_classes, &mut rng);
        Ok(Model {
            mode,
            config,
            context_limit,
            vocab,
            classes,
            params,
        })
    }

    pub fn tokenize_context(&self, ex: &QAExample) -> Result<TokenizedText> {
        let sentences: Vec<String> = ex
            .description_sentences
            .iter()
            .chain(&ex.facts)
            .cloned()
            .collect();
        TokenizedText::from_sentences(
            &sentences,
            &self.vocab,
            self.context_limit,
            self.config.max_word_len,
        )
    }

    pub fn tokenize_query(&self, text: &str) -> Result<TokenizedText> {
        TokenizedText::from_text(text, &self.vocab, self.config.max_word_len)
    }

    /// Ranked (class id, probability) pairs for the open-ended head.
    pub fn predict_open(&self, ctx: &TokenizedText, question: &TokenizedText) -> Result<Vec<(usize, f32)>> {
        let g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&g, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_pipeline(&g, &bound, &self.config, ctx, question, false, &mut rng)?;
        let head = classification_head(
            &g,
            out.m0,
            out.m1,
            out.m2,
            &ctx.mask,
            bound.id("class.w"),
        )?;
        let probs = g.value(head.probs);
        let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    /// Per-choice correctness probability for the multiple-choice head. The
    /// question and each candidate answer take the attention's context role
    /// and attend over the scene; the pooled vectors live on their side.
    pub fn predict_choices(
        &self,
        ctx: &TokenizedText,
        question: &TokenizedText,
        choices: &[String],
    ) -> Result<Vec<f32>> {
        let g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&g, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qp = run_pipeline(&g, &bound, &self.config, question, ctx, false, &mut rng)?;
        let v0q = pooled_query_vector(&g, qp.m0, &question.mask)?;
        let v1q = pooled_query_vector(&g, qp.m1, &question.mask)?;
        let mut probs = Vec::with_capacity(choices.len());
        for choice in choices {
            let answer = self.tokenize_query(choice)?;
            let ap = run_pipeline(&g, &bound, &self.config, &answer, ctx, false, &mut rng)?;
            let v0a = pooled_query_vector(&g, ap.m0, &answer.mask)?;
            let v1a = pooled_query_vector(&g, ap.m1, &answer.mask)?;
            let e = multichoice_head(
                &g, &bound, v0q, v1q, v0a, v1a, false, &mut rng,
            )?;
            let p = g.sigmoid(e)?;
            probs.push(g.value(p).data()[0]);
        }
        Ok(probs)
    }

    /// Decoded answer span for the span head.
    pub fn predict_span(
        &self,
        ctx: &TokenizedText,
        question: &TokenizedText,
    ) -> Result<SpanPrediction> {
        let g: Graph<f32> = Graph::new();
        let bound = Bound::bind(&g, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_pipeline(&g, &bound, &self.config, ctx, question, false, &mut rng)?;
        let head = span_head(
            &g,
            out.m0,
            out.m1,
            out.m2,
            &ctx.mask,
            bound.id("span.start.w"),
            bound.id("span.end.w"),
        )?;
        let p_start = g.value(head.p_start);
        let p_end = g.value(head.p_end);
        Ok(decode_span(
            p_start.data(),
            p_end.data(),
            self.config.max_span,
        ))
    }
}
