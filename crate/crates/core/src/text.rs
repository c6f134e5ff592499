//! Tokenization, pseudo-word registry, prompt templates, and the small
//! frozen text encoder that produces the condition sequence.
//!
//! The encoder is a token-embedding lookup plus fixed sinusoidal positions
//! and one frozen randomly-initialized self-attention block. A lookup-only
//! mode (no mixing) exists so tests can reason about exact per-position
//! effects.

use crate::data::{class_is_living, CLASS_WORDS};
use crate::error::{DecalError, Result};
use crate::params::{init_normal, Binder, ParamStore};
use crate::tensor::{Arr, Var};
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD_WORD: &str = "<pad>";
pub const TEMPLATE_WORDS: &[&str] = &["photo", "of", "a", "with", "in", "pose", "view", "background"];

pub const BASE_TABLE: &str = "text.embed.base";
pub const MIXER_WQ: &str = "text.mixer.wq";
pub const MIXER_WK: &str = "text.mixer.wk";
pub const MIXER_WV: &str = "text.mixer.wv";
pub const MIXER_WO: &str = "text.mixer.wo";

pub fn pseudo_row_name(word: &str) -> String {
    format!("text.embed.pseudo.{word}")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoWord {
    pub name: String,
    /// true when the word owns a trainable embedding row; false when the
    /// slot must be filled by an override at encode time (mapper output).
    pub has_row: bool,
    pub init_from: Option<String>,
}

/// Word <-> id map. Ids are dense and stable within a run: base words first,
/// pseudo-words appended in registration order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    base_len: usize,
    pseudo: Vec<PseudoWord>,
}

impl Vocabulary {
    pub fn base() -> Self {
        let mut words = vec![PAD_WORD.to_string()];
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend(CLASS_WORDS.iter().map(|(w, _)| w.to_string()));
        let base_len = words.len();
        Vocabulary { words, base_len, pseudo: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn is_pseudo(&self, id: usize) -> bool {
        id >= self.base_len
    }

    pub fn pseudo_entry(&self, id: usize) -> Option<&PseudoWord> {
        id.checked_sub(self.base_len).and_then(|i| self.pseudo.get(i))
    }

    pub fn pseudo_words(&self) -> &[PseudoWord] {
        &self.pseudo
    }

    fn register(&mut self, entry: PseudoWord) -> Result<usize> {
        if self.id(&entry.name).is_some() {
            return Err(DecalError::Vocab(format!("word already registered: {}", entry.name)));
        }
        self.words.push(entry.name.clone());
        self.pseudo.push(entry);
        Ok(self.words.len() - 1)
    }

    /// Restore pseudo entries from checkpoint metadata.
    pub fn with_pseudo(entries: Vec<PseudoWord>) -> Self {
        let mut v = Self::base();
        for e in entries {
            v.register(e).expect("duplicate pseudo word in checkpoint");
        }
        v
    }
}

/// Initialization for a new pseudo-word row.
pub enum PseudoInit {
    /// Copy the embedding row of an existing base word.
    FromWord(String),
    /// Explicit vector.
    Vector(Array1<f64>),
    /// No row: the slot is filled at encode time (mapper output).
    Slot,
}

/// Register a pseudo-word, creating its embedding row unless it is a slot word.
pub fn register_pseudo_word(
    vocab: &mut Vocabulary,
    store: &mut ParamStore,
    name: &str,
    init: PseudoInit,
) -> Result<usize> {
    match init {
        PseudoInit::FromWord(src) => {
            let src_id = vocab
                .id(&src)
                .filter(|&id| !vocab.is_pseudo(id))
                .ok_or_else(|| DecalError::Vocab(format!("unknown init word: {src}")))?;
            let table = store.get(BASE_TABLE)?;
            let row = table
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .row(src_id)
                .to_owned();
            let id = vocab.register(PseudoWord {
                name: name.to_string(),
                has_row: true,
                init_from: Some(src),
            })?;
            store.insert(&pseudo_row_name(name), row.into_dyn());
            Ok(id)
        }
        PseudoInit::Vector(v) => {
            let id = vocab.register(PseudoWord {
                name: name.to_string(),
                has_row: true,
                init_from: None,
            })?;
            store.insert(&pseudo_row_name(name), v.into_dyn());
            Ok(id)
        }
        PseudoInit::Slot => vocab.register(PseudoWord {
            name: name.to_string(),
            has_row: false,
            init_from: None,
        }),
    }
}

// ---------------------------------------------------------------------------
// prompts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    SubjectOnly,
    SubjectPose,
    SubjectPoseBg,
    ClassOnly,
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeWord {
    Pose,
    View,
}

impl AttributeWord {
    /// Default policy: "pose" for living subjects, "view" otherwise.
    pub fn for_living(is_living: bool) -> Self {
        if is_living {
            AttributeWord::Pose
        } else {
            AttributeWord::View
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeWord::Pose => "pose",
            AttributeWord::View => "view",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: Template,
    pub class_word: String,
    pub attribute_word: AttributeWord,
    pub image_index: Option<usize>,
}

impl PromptSpec {
    pub fn new(template: Template, class_word: &str, image_index: Option<usize>) -> Self {
        let living = class_is_living(class_word).unwrap_or(true);
        PromptSpec {
            template,
            class_word: class_word.to_string(),
            attribute_word: AttributeWord::for_living(living),
            image_index,
        }
    }
}

/// Exact word sequence for a prompt spec.
pub fn prompt_words(spec: &PromptSpec) -> Result<Vec<String>> {
    let need_index = matches!(spec.template, Template::SubjectPose | Template::SubjectPoseBg);
    let idx = match (need_index, spec.image_index) {
        (true, None) => {
            return Err(DecalError::Prompt(
                "template requires an image index for [P_i]/[B_i]".into(),
            ))
        }
        (_, i) => i.unwrap_or(0),
    };
    let s = |t: &str| t.to_string();
    let attr = spec.attribute_word.as_str();
    let class = spec.class_word.clone();
    Ok(match spec.template {
        Template::ClassOnly | Template::Prior => {
            vec![s("photo"), s("of"), s("a"), class]
        }
        Template::SubjectOnly => {
            vec![s("photo"), s("of"), s("a"), s("[V]"), class]
        }
        Template::SubjectPose => vec![
            s("photo"), s("of"), s("a"), s("[V]"), class,
            s("with"), format!("[P_{idx}]"), s(attr),
        ],
        Template::SubjectPoseBg => vec![
            s("photo"), s("of"), s("a"), s("[V]"), class,
            s("with"), format!("[P_{idx}]"), s(attr),
            s("in"), format!("[B_{idx}]"), s("background"),
        ],
    })
}

/// Token ids for a prompt spec.
pub fn build_prompt(spec: &PromptSpec, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let words = prompt_words(spec)?;
    words
        .iter()
        .map(|w| {
            vocab
                .id(w)
                .ok_or_else(|| DecalError::Prompt(format!("word not in vocabulary: {w}")))
        })
        .collect()
}

/// Tokenize a free-form prompt: whitespace split, non-bracketed words lowercased.
pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    prompt
        .split_whitespace()
        .map(|raw| {
            let w = if raw.starts_with('[') { raw.to_string() } else { raw.to_lowercase() };
            vocab
                .id(&w)
                .ok_or_else(|| DecalError::Prompt(format!("word not in vocabulary: {w}")))
        })
        .collect()
}

/// Strip pseudo-words from a prompt string, keeping everything else
/// (the rule used when scoring text alignment).
pub fn strip_pseudo_words(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .filter(|w| !(w.starts_with('[') && w.ends_with(']')))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Where each semantic slot sits in a token sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotPositions {
    pub subject: Option<usize>,
    pub pose: Option<usize>,
    pub background: Option<usize>,
    pub class_word: Option<usize>,
    pub n_tokens: usize,
}

pub fn slot_positions(tokens: &[usize], vocab: &Vocabulary) -> SlotPositions {
    let mut out = SlotPositions { n_tokens: tokens.len(), ..Default::default() };
    for (i, &id) in tokens.iter().enumerate() {
        let w = vocab.word(id);
        if w == "[V]" {
            out.subject = Some(i);
        } else if w.starts_with("[P_") {
            out.pose = Some(i);
        } else if w.starts_with("[B_") {
            out.background = Some(i);
        } else if out.class_word.is_none() && class_is_living(w).is_some() {
            out.class_word = Some(i);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

/// Condition sequence fed to the denoiser's cross-attention layers.
#[derive(Debug, Clone)]
pub struct ConditionSequence {
    /// [seq_len, d_text]
    pub data: Array2<f64>,
    pub positions: SlotPositions,
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub d_text: usize,
    pub seq_len: usize,
    pub lookup_only: bool,
    /// bind the base embedding table with gradient tracking (pretraining)
    pub train_embeddings: bool,
}

impl TextEncoder {
    pub fn new(d_text: usize, seq_len: usize) -> Self {
        TextEncoder { d_text, seq_len, lookup_only: false, train_embeddings: false }
    }

    /// Create base table and frozen mixer weights.
    pub fn init_params(&self, store: &mut ParamStore, vocab: &Vocabulary, rng: &mut ChaCha8Rng) {
        let d = self.d_text;
        store.insert(BASE_TABLE, init_normal(rng, &[vocab.base_len(), d], 0.02));
        let std = (1.0 / d as f64).sqrt();
        store.insert(MIXER_WQ, init_normal(rng, &[d, d], std));
        store.insert(MIXER_WK, init_normal(rng, &[d, d], std));
        store.insert(MIXER_WV, init_normal(rng, &[d, d], std));
        store.insert(MIXER_WO, init_normal(rng, &[d, d], std));
    }

    /// Fixed sinusoidal position encodings, [seq_len, d_text].
    pub fn position_encodings(&self) -> Array2<f64> {
        let mut p = Array2::<f64>::zeros((self.seq_len, self.d_text));
        for pos in 0..self.seq_len {
            for i in 0..self.d_text {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / self.d_text as f64);
                let v = pos as f64 * rate;
                p[[pos, i]] = if i % 2 == 0 { v.sin() } else { v.cos() };
            }
        }
        p
    }

    /// Encode inside a graph. `overrides` maps a sequence position to the
    /// variable that fills it (mapper outputs). Every pseudo token must be
    /// resolved by a table row or an override.
    pub fn encode_graph(
        &self,
        b: &mut Binder,
        vocab: &Vocabulary,
        tokens: &[usize],
        overrides: &BTreeMap<usize, Var>,
    ) -> Result<(Var, SlotPositions)> {
        if tokens.len() > self.seq_len {
            return Err(DecalError::Prompt(format!(
                "prompt length {} exceeds sequence length {}",
                tokens.len(),
                self.seq_len
            )));
        }
        let mut padded = vec![0usize; self.seq_len];
        padded[..tokens.len()].copy_from_slice(tokens);

        // placeholder gather: pseudo ids use the pad row, then get overwritten
        let gather_ids: Vec<usize> =
            padded.iter().map(|&id| if vocab.is_pseudo(id) { 0 } else { id }).collect();
        let table = if self.train_embeddings {
            b.bind(BASE_TABLE)
        } else {
            let v = b.store().get(BASE_TABLE)?.clone();
            b.graph.constant(v)
        };
        let mut seq = b.graph.gather_rows(table, &gather_ids);

        for (pos, &id) in padded.iter().enumerate() {
            if !vocab.is_pseudo(id) {
                continue;
            }
            if let Some(&ov) = overrides.get(&pos) {
                seq = b.graph.assign_row(seq, ov, pos);
                continue;
            }
            let entry = vocab.pseudo_entry(id).unwrap();
            if entry.has_row {
                let row = b.bind(&pseudo_row_name(&entry.name));
                seq = b.graph.assign_row(seq, row, pos);
            } else {
                return Err(DecalError::Prompt(format!(
                    "pseudo slot {} not resolved by table or override",
                    entry.name
                )));
            }
        }

        let pos_enc = b.graph.constant(self.position_encodings().into_dyn());
        let mut h = b.graph.add(seq, pos_enc);

        if !self.lookup_only {
            // single frozen self-attention block
            let wq = frozen(b, MIXER_WQ)?;
            let wk = frozen(b, MIXER_WK)?;
            let wv = frozen(b, MIXER_WV)?;
            let wo = frozen(b, MIXER_WO)?;
            let q = b.graph.matmul(h, wq);
            let k = b.graph.matmul(h, wk);
            let v = b.graph.matmul(h, wv);
            let kt = b.graph.transpose2(k);
            let scores = b.graph.matmul(q, kt);
            let scaled = b.graph.scale(scores, 1.0 / (self.d_text as f64).sqrt());
            let attn = b.graph.softmax_rows(scaled);
            let ctx = b.graph.matmul(attn, v);
            let mixed = b.graph.matmul(ctx, wo);
            h = b.graph.add(h, mixed);
        }

        Ok((h, slot_positions(tokens, vocab)))
    }

    /// Numeric encode (no gradients).
    pub fn encode(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        tokens: &[usize],
        overrides: &BTreeMap<usize, Array1<f64>>,
    ) -> Result<ConditionSequence> {
        let mut g = crate::tensor::Graph::new();
        let mut b = Binder::new(&mut g, store);
        let ov: BTreeMap<usize, Var> = overrides
            .iter()
            .map(|(&pos, v)| (pos, b.graph.constant(v.clone().into_dyn())))
            .collect();
        let (var, positions) = self.encode_graph(&mut b, vocab, tokens, &ov)?;
        let data = g
            .value(var)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        Ok(ConditionSequence { data, positions })
    }

    /// The unconditional (empty-prompt) sequence used for guidance.
    pub fn encode_empty(&self, store: &ParamStore, vocab: &Vocabulary) -> Result<ConditionSequence> {
        self.encode(store, vocab, &[], &BTreeMap::new())
    }
}

fn frozen(b: &mut Binder, name: &str) -> Result<Var> {
    let v = b.store().get(name)?.clone();
    Ok(b.graph.constant(v))
}

/// Convenience: ids of a prompt spec rendered against a vocabulary.
pub fn words_to_string(words: &[String]) -> String {
    words.join(" ")
}

pub type Overrides = BTreeMap<usize, Array1<f64>>;

#[allow(unused)]
fn arr_unused(_a: Arr) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn setup() -> (Vocabulary, ParamStore, TextEncoder) {
        let vocab = Vocabulary::base();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(16, 16);
        let mut rng = stream(0, "init");
        enc.init_params(&mut store, &vocab, &mut rng);
        (vocab, store, enc)
    }

    #[test]
    fn register_copies_class_row() {
        let (mut vocab, mut store, _) = setup();
        let dog_id = vocab.id("dog").unwrap();
        let table = store.get(BASE_TABLE).unwrap().clone();
        let dog_row = table
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(dog_id)
            .to_owned();
        let id = register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::FromWord("dog".into())).unwrap();
        assert!(vocab.is_pseudo(id));
        let row = store.get(&pseudo_row_name("[V]")).unwrap();
        assert_eq!(row.view().into_dimensionality::<ndarray::Ix1>().unwrap(), dog_row);
    }

    #[test]
    fn duplicate_registration_fails_and_ids_distinct() {
        let (mut vocab, mut store, _) = setup();
        let a = register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::FromWord("dog".into())).unwrap();
        let b = register_pseudo_word(&mut vocab, &mut store, "[P_0]", PseudoInit::Slot).unwrap();
        assert_ne!(a, b);
        assert!(register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::Slot).is_err());
    }

    #[test]
    fn template_word_order() {
        let spec = PromptSpec::new(Template::SubjectPoseBg, "dog", Some(2));
        let words = prompt_words(&spec).unwrap();
        assert_eq!(
            words,
            vec!["photo", "of", "a", "[V]", "dog", "with", "[P_2]", "pose", "in", "[B_2]", "background"]
        );
        // non-living default attribute word
        let spec = PromptSpec::new(Template::SubjectPose, "backpack", Some(0));
        let words = prompt_words(&spec).unwrap();
        assert_eq!(words, vec!["photo", "of", "a", "[V]", "backpack", "with", "[P_0]", "view"]);
        // prior prompt
        let spec = PromptSpec::new(Template::Prior, "dog", None);
        assert_eq!(prompt_words(&spec).unwrap(), vec!["photo", "of", "a", "dog"]);
    }

    #[test]
    fn missing_index_is_an_error() {
        let spec = PromptSpec::new(Template::SubjectPoseBg, "dog", None);
        assert!(prompt_words(&spec).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_position_sensitive() {
        let (vocab, store, enc) = setup();
        let t1 = tokenize("photo of a dog", &vocab).unwrap();
        let a = enc.encode(&store, &vocab, &t1, &BTreeMap::new()).unwrap();
        let b = enc.encode(&store, &vocab, &t1, &BTreeMap::new()).unwrap();
        assert_eq!(a.data, b.data);
        // permute two non-pseudo words
        let t2 = tokenize("photo of dog a", &vocab).unwrap();
        let c = enc.encode(&store, &vocab, &t2, &BTreeMap::new()).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn override_in_lookup_only_mode_changes_exactly_one_position() {
        let (mut vocab, mut store, mut enc) = setup();
        enc.lookup_only = true;
        register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::FromWord("dog".into())).unwrap();
        register_pseudo_word(&mut vocab, &mut store, "[P_0]", PseudoInit::Slot).unwrap();
        let spec = PromptSpec::new(Template::SubjectPose, "dog", Some(0));
        let tokens = build_prompt(&spec, &vocab).unwrap();
        let pos = slot_positions(&tokens, &vocab);
        let p = pos.pose.unwrap();

        let mut ov = BTreeMap::new();
        ov.insert(p, Array1::<f64>::zeros(16));
        let a = enc.encode(&store, &vocab, &tokens, &ov).unwrap();
        let mut ov2 = BTreeMap::new();
        ov2.insert(p, Array1::<f64>::from_elem(16, 0.5));
        let b = enc.encode(&store, &vocab, &tokens, &ov2).unwrap();
        for i in 0..16 {
            let differ = a.data.row(i) != b.data.row(i);
            assert_eq!(differ, i == p, "row {i}");
        }
    }

    #[test]
    fn unresolved_slot_errors() {
        let (mut vocab, mut store, enc) = setup();
        register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::FromWord("dog".into())).unwrap();
        register_pseudo_word(&mut vocab, &mut store, "[P_0]", PseudoInit::Slot).unwrap();
        let spec = PromptSpec::new(Template::SubjectPose, "dog", Some(0));
        let tokens = build_prompt(&spec, &vocab).unwrap();
        let err = enc.encode(&store, &vocab, &tokens, &BTreeMap::new());
        assert!(err.is_err());
    }

    #[test]
    fn slots_are_accounted() {
        let (mut vocab, mut store, _) = setup();
        register_pseudo_word(&mut vocab, &mut store, "[V]", PseudoInit::FromWord("cat".into())).unwrap();
        register_pseudo_word(&mut vocab, &mut store, "[P_1]", PseudoInit::Slot).unwrap();
        register_pseudo_word(&mut vocab, &mut store, "[B_1]", PseudoInit::Slot).unwrap();
        let spec = PromptSpec::new(Template::SubjectPoseBg, "cat", Some(1));
        let tokens = build_prompt(&spec, &vocab).unwrap();
        let pos = slot_positions(&tokens, &vocab);
        assert_eq!(pos.subject, Some(3));
        assert_eq!(pos.class_word, Some(4));
        assert_eq!(pos.pose, Some(6));
        assert_eq!(pos.background, Some(9));
    }

    #[test]
    fn strip_rule_keeps_class_word() {
        assert_eq!(strip_pseudo_words("a [V] dog on the beach"), "a dog on the beach");
        assert_eq!(strip_pseudo_words("photo of a [V] dog with [P_1] pose"), "photo of a dog with pose");
    }
}
