//! A deterministic toy text encoder.
//!
//! Tokens map to word embeddings, a fixed projection lifts them to encoder
//! space, and a causal row-stochastic mixing matrix lets every encoding
//! absorb part of the encodings before it. Mixing is what makes a concept's
//! energy leak into neighboring tokens.
//!
//! The vocabulary is split into context words and object words whose
//! embeddings occupy disjoint coordinate blocks, and the projection is block
//! diagonal. Without mixing, context encodings are therefore exactly
//! orthogonal to object encodings under any covariance estimated from them.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::rng::{normal_matrix, normal_vector, stream, stream_rng};
use crate::{Matrix, Vector};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Placeholder for a single personalized concept.
pub const PLACEHOLDER: &str = "S*";

/// Neutral training templates; `S*` marks the concept word.
pub const TRAINING_TEMPLATES: [&str; 9] = [
    "a photo of a S*",
    "a good photo of a S*",
    "the photo of a S*",
    "a good photo of the S*",
    "image of a S*",
    "image of the S*",
    "A photograph of S*",
    "A S* shown in a photo,",
    "A photo of S*",
];

/// Template whose superclass encoding defines the frozen key targets.
pub const INIT_TEMPLATE: &str = "a photo of a S*";

const DEFAULT_CONTEXT: &[&str] = &[
    BOS, EOS, "a", "A", "an", "the", "of", "photo", "photo,", "photograph", "good", "image", "shown", "in",
    "on", "and", "with", "next", "to", "beach", "table", "grass", "snow", "wearing", "hat", "red", "blue",
    "sitting", "under", "tree", "city", "street", "painting", "style",
];

const DEFAULT_OBJECTS: &[&str] = &[
    "teddy", "cat", "dog", "chair", "teapot", "toy", "sculpture", "pot", "puppy", "sunglasses", "tortoise",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Context,
    Object,
}

/// Known tokens and their kinds. Embeddings are generated from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(context: &[&str], objects: &[&str]) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
        };
        for t in context {
            v.insert(t, TokenKind::Context)?;
        }
        for t in objects {
            v.insert(t, TokenKind::Object)?;
        }
        for required in [BOS, EOS] {
            ensure(v.index.contains_key(required), || format!("vocabulary lacks {required}"))?;
        }
        Ok(v)
    }

    fn insert(&mut self, token: &str, kind: TokenKind) -> Result<()> {
        ensure(!token.is_empty() && !token.chars().any(char::is_whitespace), || {
            format!("invalid token {token:?}")
        })?;
        ensure(!self.index.contains_key(token), || format!("duplicate token {token:?}"))?;
        ensure(!is_placeholder(token), || format!("{token:?} is reserved for concepts"))?;
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.kinds.push(kind);
        Ok(())
    }

    /// Parses the plain-text format: one token per line, context words
    /// first, then a `[objects]` line followed by object words. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut context = Vec::new();
        let mut objects = Vec::new();
        let mut in_objects = false;
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[objects]" {
                in_objects = true;
            } else if in_objects {
                objects.push(line);
            } else {
                context.push(line);
            }
        }
        Self::new(&context, &objects)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, k) in self.tokens.iter().zip(&self.kinds) {
            if *k == TokenKind::Context {
                out.push_str(t);
                out.push('\n');
            }
        }
        out.push_str("[objects]\n");
        for (t, k) in self.tokens.iter().zip(&self.kinds) {
            if *k == TokenKind::Object {
                out.push_str(t);
                out.push('\n');
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        self.kinds[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn objects(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == TokenKind::Object)
            .map(|(t, _)| t.as_str())
    }

    pub fn context_words(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == TokenKind::Context)
            .map(|(t, _)| t.as_str())
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_CONTEXT, DEFAULT_OBJECTS).expect("built-in vocabulary is valid")
    }
}

/// Placeholder tokens: `S*` and the numbered `S1`, `S2`, ... used when
/// several concepts share a prompt.
pub fn is_placeholder(token: &str) -> bool {
    token == PLACEHOLDER
        || (token.len() > 1 && token.starts_with('S') && token[1..].chars().all(|c| c.is_ascii_digit()))
}

/// Splits on whitespace and brackets the result with `<bos>`/`<eos>`.
pub fn tokenize(text: &str) -> Vec<String> {
    std::iter::once(BOS.to_string())
        .chain(text.split_whitespace().map(str::to_string))
        .chain(std::iter::once(EOS.to_string()))
        .collect()
}

/// Replaces every occurrence of `from` with `to`.
pub fn substitute(tokens: &[String], from: &str, to: &str) -> Vec<String> {
    tokens
        .iter()
        .map(|t| if t == from { to.to_string() } else { t.clone() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_w: usize,
    pub d_e: usize,
    /// Width of the object block in both embedding and encoding space.
    pub object_dims: usize,
    /// Mixing strength: `Mix = (1 − α) I + α·CausalStochastic`.
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_w: 32,
            d_e: 32,
            object_dims: 8,
            alpha: 0.3,
            max_len: 16,
        }
    }
}

/// Per-token encodings of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrompt {
    /// `M × d_e`, one encoding per row.
    pub encodings: Matrix,
    pub tokens: Vec<String>,
    /// Position of `S*`, if present.
    pub concept_index: Option<usize>,
    pub prompt_text: String,
}

impl EncodedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, m: usize) -> Vector {
        self.encodings.row(m).transpose()
    }

    pub fn position_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vocabulary,
    cfg: EncoderConfig,
    embeddings: Vec<Vector>,
    projection: Matrix,
    causal_weights: Matrix,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        ensure(cfg.d_w > cfg.object_dims && cfg.d_e > cfg.object_dims && cfg.object_dims > 0, || {
            format!("object block of {} dims does not fit d_w = {}, d_e = {}", cfg.object_dims, cfg.d_w, cfg.d_e)
        })?;
        ensure((0.0..=1.0).contains(&cfg.alpha), || format!("mixing strength {} outside [0, 1]", cfg.alpha))?;
        ensure(cfg.max_len >= 2, || "max_len must admit <bos> and <eos>".into())?;

        let (ctx_w, ctx_e) = (cfg.d_w - cfg.object_dims, cfg.d_e - cfg.object_dims);
        let mut rng = stream_rng(seed, stream::VOCAB);
        let embeddings = (0..vocab.len())
            .map(|id| {
                let mut v = Vector::zeros(cfg.d_w);
                let (start, width) = match vocab.kind(id) {
                    TokenKind::Context => (0, ctx_w),
                    TokenKind::Object => (ctx_w, cfg.object_dims),
                };
                v.rows_mut(start, width).copy_from(&normal_vector(&mut rng, width, 1.0));
                v
            })
            .collect();

        let mut rng = stream_rng(seed, stream::ENCODER);
        let mut projection = Matrix::zeros(cfg.d_e, cfg.d_w);
        projection
            .view_mut((0, 0), (ctx_e, ctx_w))
            .copy_from(&normal_matrix(&mut rng, ctx_e, ctx_w, 1.0 / (ctx_w as f64).sqrt()));
        projection.view_mut((ctx_e, ctx_w), (cfg.object_dims, cfg.object_dims)).copy_from(&normal_matrix(
            &mut rng,
            cfg.object_dims,
            cfg.object_dims,
            1.0 / (cfg.object_dims as f64).sqrt(),
        ));
        let causal_weights = Matrix::from_fn(cfg.max_len, cfg.max_len, |i, j| {
            let w: f64 = rng.random_range(0.5..1.5);
            if j <= i {
                w
            } else {
                0.0
            }
        });

        Ok(Self {
            vocab,
            cfg,
            embeddings,
            projection,
            causal_weights,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_w(&self) -> usize {
        self.cfg.d_w
    }

    pub fn d_e(&self) -> usize {
        self.cfg.d_e
    }

    /// `d_e × d_w` lift from embeddings to encoder space.
    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn embedding(&self, token: &str) -> Result<&Vector> {
        Ok(&self.embeddings[self.vocab.id(token)?])
    }

    /// `M × M` row-stochastic mixing matrix for an `M`-token prompt.
    pub fn mix_matrix(&self, m: usize) -> Result<Matrix> {
        ensure(m <= self.cfg.max_len, || format!("prompt of {m} tokens exceeds maximum {}", self.cfg.max_len))?;
        let alpha = self.cfg.alpha;
        let mut mix = Matrix::zeros(m, m);
        for i in 0..m {
            let total: f64 = (0..=i).map(|j| self.causal_weights[(i, j)]).sum();
            for j in 0..=i {
                let causal = alpha * self.causal_weights[(i, j)] / total;
                mix[(i, j)] = if i == j { (1.0 - alpha) + causal } else { causal };
            }
        }
        Ok(mix)
    }

    /// Word embeddings of a token sequence; overrides take precedence and are
    /// the only way to supply placeholder tokens.
    pub fn embed(&self, tokens: &[String], overrides: &HashMap<String, Vector>) -> Result<Matrix> {
        let mut x = Matrix::zeros(tokens.len(), self.cfg.d_w);
        for (m, t) in tokens.iter().enumerate() {
            let emb = match overrides.get(t) {
                Some(v) => {
                    ensure(v.len() == self.cfg.d_w, || {
                        format!("override for {t:?} has length {}, expected {}", v.len(), self.cfg.d_w)
                    })?;
                    v
                }
                None => self.embedding(t)?,
            };
            x.set_row(m, &emb.transpose());
        }
        Ok(x)
    }

    pub fn encode(&self, tokens: &[String], overrides: &HashMap<String, Vector>) -> Result<EncodedPrompt> {
        ensure(!tokens.is_empty(), || "empty token sequence".into())?;
        let mix = self.mix_matrix(tokens.len())?;
        let x = self.embed(tokens, overrides)?;
        let lifted = x * self.projection.transpose();
        let encodings = if self.cfg.alpha == 0.0 { lifted } else { mix * lifted };
        Ok(EncodedPrompt {
            encodings,
            tokens: tokens.to_vec(),
            concept_index: tokens.iter().position(|t| t == PLACEHOLDER),
            prompt_text: tokens
                .iter()
                .filter(|t| *t != BOS && *t != EOS)
                .cloned()
                .collect::<Vec<_>>()
                .join(" "),
        })
    }

    /// Encodes whitespace-tokenized text.
    pub fn encode_text(&self, text: &str, overrides: &HashMap<String, Vector>) -> Result<EncodedPrompt> {
        self.encode(&tokenize(text), overrides)
    }

    /// Encoding of `superclass` inside `template` (with `S*` replaced by it).
    pub fn superclass_encoding(&self, template: &str, superclass: &str) -> Result<Vector> {
        self.vocab.id(superclass)?;
        let tokens = tokenize(template);
        let idx = tokens
            .iter()
            .position(|t| t == PLACEHOLDER)
            .ok_or_else(|| Error::Contract(format!("template {template:?} has no {PLACEHOLDER}")))?;
        let tokens = substitute(&tokens, PLACEHOLDER, superclass);
        Ok(self.encode(&tokens, &HashMap::new())?.row(idx))
    }

    /// Random token sequences, bracketed like real prompts, for covariance
    /// estimation.
    pub fn random_prompts(&self, count: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = stream_rng(seed, stream::COVARIANCE);
        let context: Vec<&str> = self.vocab.context_words().filter(|t| *t != BOS && *t != EOS).collect();
        let objects: Vec<&str> = self.vocab.objects().collect();
        (0..count)
            .map(|_| {
                let len = rng.random_range(2..=self.cfg.max_len - 2);
                let body = (0..len).map(|_| {
                    let pick_object = !objects.is_empty() && rng.random_bool(0.3);
                    let pool = if pick_object { &objects } else { &context };
                    pool[rng.random_range(0..pool.len())].to_string()
                });
                std::iter::once(BOS.to_string())
                    .chain(body.collect::<Vec<_>>())
                    .chain(std::iter::once(EOS.to_string()))
                    .collect()
            })
            .collect()
    }
}

/// `W_K · e_superclass`: the frozen key target of a key-locked concept.
pub fn superclass_target(encoder: &TextEncoder, template: &str, superclass: &str, w_k: &Matrix) -> Result<Vector> {
    let e = encoder.superclass_encoding(template, superclass)?;
    ensure(w_k.ncols() == e.len(), || format!("key projection has {} columns, encodings have {}", w_k.ncols(), e.len()))?;
    Ok(w_k * e)
}
