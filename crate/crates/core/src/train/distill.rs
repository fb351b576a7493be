use crate::boxes::parse_bracketed;
use crate::corpus::{CaptionRecord, Vocab};
use crate::decode::{generate, GenerateOptions, Manner};
use crate::error::Result;
use crate::model::Model;

/// Produces target captions for distillation.
pub trait Teacher {
    fn caption(&self, record: &CaptionRecord) -> Result<Vec<String>>;
}

/// Left-to-right teacher decoding with beam search.
pub struct ArTeacher<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub beam: usize,
}

impl Teacher for ArTeacher<'_> {
    fn caption(&self, record: &CaptionRecord) -> Result<Vec<String>> {
        let opts = GenerateOptions {
            beam: self.beam,
            ..GenerateOptions::default()
        };
        let trace = generate(self.model, &record.regions, Manner::Ar, &opts)?;
        Ok(self.vocab.decode(&trace.tokens))
    }
}

/// Replace every record's caption with the teacher's. The tree is carried
/// over by relabelling its leaves when the teacher caption has the same
/// length; otherwise the record keeps no tree and drops out of
/// box-supervised training. Records whose teacher caption is empty are
/// removed. The original caption becomes the reference when the record had
/// none.
pub fn distill_corpus(teacher: &dyn Teacher, records: &[CaptionRecord]) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let words = teacher.caption(rec)?;
        if words.is_empty() {
            log::debug!("{}: empty teacher caption, record dropped", rec.id);
            continue;
        }
        if words == rec.tokens {
            out.push(rec.clone());
            continue;
        }
        let tree = rec
            .tree
            .as_deref()
            .and_then(|t| parse_bracketed(t).ok())
            .and_then(|t| t.with_leaves(&words))
            .map(|t| t.to_bracketed());
        let refs = if rec.refs.is_empty() {
            vec![rec.tokens.clone()]
        } else {
            rec.refs.clone()
        };
        out.push(CaptionRecord {
            id: rec.id.clone(),
            tokens: words,
            tree,
            regions: rec.regions.clone(),
            refs,
        });
    }
    Ok(out)
}
