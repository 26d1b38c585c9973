//! Closed word vocabulary with reserved rare tokens, prompt tokenization, and
//! the text encoder: an embedding table followed by one residual
//! self-attention layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const FUNCTION_WORDS: [&str; 4] = ["a", "an", "photo", "of"];
pub const DEFAULT_PROMPT_LEN: usize = 8;
pub const DEFAULT_TEXT_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    n_rare: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    n_rare: usize,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocab::from_tokens(f.tokens, f.n_rare)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            n_rare: v.n_rare,
        }
    }
}

pub fn rare_token_name(i: usize) -> String {
    format!("rare{i}")
}

/// `[<pad>, <bos>, a, an, photo, of, categories..., rare0..]`.
pub fn build_vocab<S: AsRef<str>>(categories: &[S], n_rare: usize) -> Result<Vocab> {
    if categories.is_empty() {
        return Err(Error::InvalidArgument("vocabulary needs at least one category".into()));
    }
    if n_rare == 0 {
        return Err(Error::InvalidArgument("vocabulary needs at least one rare token".into()));
    }
    let mut tokens: Vec<String> = [PAD, BOS]
        .into_iter()
        .chain(FUNCTION_WORDS)
        .map(String::from)
        .collect();
    tokens.extend(categories.iter().map(|c| c.as_ref().to_string()));
    tokens.extend((0..n_rare).map(rare_token_name));
    Vocab::from_tokens(tokens, n_rare)
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, n_rare: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("token {t:?} must be one word")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateToken(t.clone()));
            }
        }
        if tokens.len() < 2 + FUNCTION_WORDS.len() + n_rare + 1
            || tokens[0] != PAD
            || tokens[1] != BOS
        {
            return Err(Error::schema("vocab.tokens", "missing reserved or category entries"));
        }
        Ok(Self {
            tokens,
            n_rare,
            index,
        })
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

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn first_rare(&self) -> usize {
        self.tokens.len() - self.n_rare
    }

    pub fn categories(&self) -> &[String] {
        &self.tokens[2 + FUNCTION_WORDS.len()..self.first_rare()]
    }

    pub fn rare_tokens(&self) -> &[String] {
        &self.tokens[self.first_rare()..]
    }

    pub fn is_rare(&self, id: usize) -> bool {
        id >= self.first_rare() && id < self.tokens.len()
    }

    pub fn is_category(&self, word: &str) -> bool {
        self.categories().iter().any(|c| c == word)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub token_ids: Vec<usize>,
}

impl Prompt {
    /// `<bos>` followed by the words, padded to `len`.
    pub fn tokenize(vocab: &Vocab, text: &str, len: usize) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() + 1 > len {
            return Err(Error::InvalidArgument(format!(
                "prompt {text:?} has {} words; at most {} fit",
                words.len(),
                len.saturating_sub(1)
            )));
        }
        let mut ids = vec![vocab.bos_id()];
        for w in &words {
            ids.push(vocab.id(w)?);
        }
        ids.resize(len, vocab.pad_id());
        Ok(Self {
            text: words.join(" "),
            token_ids: ids,
        })
    }

    pub fn decode(&self, vocab: &Vocab) -> String {
        self.token_ids
            .iter()
            .filter(|&&id| id != vocab.pad_id() && id != vocab.bos_id())
            .filter_map(|&id| vocab.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn contains(&self, id: usize) -> bool {
        self.token_ids.contains(&id)
    }
}

/// `"a <rare> <category>"`.
pub fn make_subject_prompt(vocab: &Vocab, rare_token: &str, category: &str) -> Result<Prompt> {
    let rid = vocab.id(rare_token)?;
    if !vocab.is_rare(rid) {
        return Err(Error::InvalidArgument(format!("{rare_token:?} is not a rare token")));
    }
    if !vocab.is_category(category) {
        return Err(Error::UnknownToken(category.to_string()));
    }
    Prompt::tokenize(vocab, &format!("a {rare_token} {category}"), DEFAULT_PROMPT_LEN)
}

/// `"a <category>"`, the prompt used for category-level pretraining.
pub fn make_class_prompt(vocab: &Vocab, category: &str) -> Result<Prompt> {
    if !vocab.is_category(category) {
        return Err(Error::UnknownToken(category.to_string()));
    }
    Prompt::tokenize(vocab, &format!("a {category}"), DEFAULT_PROMPT_LEN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, vocab_size: usize, dim: usize) -> Result<Self> {
        pb.scoped("text", |pb| {
            Ok(Self {
                embed: pb.tensor("embed", &[vocab_size, dim], Init::Normal(1.0))?,
                wq: Linear::new(pb, "wq", dim, dim, false)?,
                wk: Linear::new(pb, "wk", dim, dim, false)?,
                wv: Linear::new(pb, "wv", dim, dim, false)?,
                wo: Linear::new(pb, "wo", dim, dim, false)?,
                dim,
            })
        })
    }

    /// Encodes equally long token sequences to `[N, L, dim]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        prompts: &[&[usize]],
    ) -> Result<Var> {
        let n = prompts.len();
        let l = prompts.first().map_or(0, |p| p.len());
        if n == 0 || l == 0 || prompts.iter().any(|p| p.len() != l) {
            return Err(Error::ShapeMismatch("prompts must be non-empty and equally long".into()));
        }
        let ids: Vec<usize> = prompts.iter().flat_map(|p| p.iter().copied()).collect();
        let table = g.param(s, self.embed);
        let x = g.embedding(table, &ids)?;
        let q = self.wq.forward(g, s, x)?;
        let k = self.wk.forward(g, s, x)?;
        let v = self.wv.forward(g, s, x)?;
        let q = g.reshape(q, &[n, l, self.dim])?;
        let k = g.reshape(k, &[n, l, self.dim])?;
        let v = g.reshape(v, &[n, l, self.dim])?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, T::of(1.0 / (self.dim as f64).sqrt()));
        let attn = g.softmax(scores);
        let mixed = g.bmm(attn, v)?;
        let mixed = g.reshape(mixed, &[n * l, self.dim])?;
        let o = self.wo.forward(g, s, mixed)?;
        let out = g.add(x, o)?;
        g.reshape(out, &[n, l, self.dim])
    }

    /// Inference-only encoding of one prompt to `[L, dim]`.
    pub fn encode<T: Real>(&self, s: &ParamStore<T>, p: &Prompt) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, s, &[&p.token_ids])?;
        let l = p.token_ids.len();
        g.value(out).clone().reshape(&[l, self.dim])
    }
}
