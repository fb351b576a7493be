//! Caption data: vocabulary, dataset files, the synthetic generator, and the
//! encoded training examples built from them.

mod dataset;
mod synth;
mod vocab;

pub use dataset::{
    parse_dataset, read_dataset, to_jsonl, write_dataset, CaptionRecord, DEFAULT_MAX_LEN,
};
pub use synth::{
    generate_synthetic_corpus, scene_regions, SceneSpec, SynthConfig, Template, ATTRIBUTES,
    CATEGORIES, DEFAULT_TEMPLATES, RELATIONS,
};
pub use vocab::{build_vocab, encode_tokens, Vocab, BOS, EOS, MASK, PAD, RESERVED, UNK};

use crate::boxes::{extract_boxes, parse_bracketed, BoundingSequence, Level};

/// A record ready for the model: token ids, gold boxes when the record has a
/// usable tree, regions and references.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    pub boxes: Option<BoundingSequence>,
    pub regions: Vec<Vec<f64>>,
    pub refs: Vec<Vec<String>>,
}

impl Example {
    pub fn from_record(rec: &CaptionRecord, vocab: &Vocab, level: Level) -> Example {
        let boxes = rec
            .tree
            .as_deref()
            .and_then(|t| parse_bracketed(t).ok())
            .filter(|t| t.leaves() == rec.tokens)
            .and_then(|t| extract_boxes(&t, level).ok())
            .map(|(b, _)| b);
        let refs = if rec.refs.is_empty() {
            vec![rec.tokens.clone()]
        } else {
            rec.refs.clone()
        };
        Example {
            id: rec.id.clone(),
            tokens: encode_tokens(&rec.tokens, vocab),
            boxes,
            regions: rec.regions.clone(),
            refs,
        }
    }
}

pub fn prepare_examples(records: &[CaptionRecord], vocab: &Vocab, level: Level) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example::from_record(r, vocab, level))
        .collect()
}
