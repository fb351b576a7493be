//! Corpus BLEU and CIDEr-D over token sequences.
//!
//! N-gram tables are ordered maps so that every sum runs in a fixed order
//! and scores are bit-reproducible.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

type Counts<T> = BTreeMap<Vec<T>, usize>;

fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> Counts<T> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

fn check_shapes<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Data("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: candidates.len(),
            actual: references.len(),
        });
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("a candidate has no references".into()));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over 1..=n, clipped counts, and the
/// brevity penalty against the closest reference length (shorter on ties).
/// Zero whenever some order has no matching n-gram.
pub fn bleu<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], n: usize) -> Result<f64> {
    check_shapes(candidates, references)?;
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references checked non-empty");
        for k in 1..=n {
            let c = ngrams(cand, k);
            let mut max_ref: Counts<T> = BTreeMap::new();
            for r in refs {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &c {
                matched[k - 1] += (*cnt).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D scorer with document frequencies taken from a fixed reference
/// corpus (one reference set per image).
#[derive(Debug, Clone)]
pub struct CiderD<T: Ord + Clone> {
    df: BTreeMap<Vec<T>, f64>,
    ref_len: f64,
}

struct TfIdf {
    vec: Vec<BTreeMap<usize, f64>>,
    norm: [f64; CIDER_N],
    length: f64,
}

impl<T: Ord + Clone> CiderD<T> {
    pub fn new(references: &[Vec<Vec<T>>]) -> Result<Self> {
        if references.is_empty() || references.iter().any(|r| r.is_empty()) {
            return Err(Error::Data("CIDEr-D needs at least one reference per image".into()));
        }
        let mut df: BTreeMap<Vec<T>, f64> = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeSet<Vec<T>> = BTreeSet::new();
            for r in refs {
                for k in 1..=CIDER_N {
                    seen.extend(ngrams(r, k).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderD {
            df,
            ref_len: (references.len() as f64).ln(),
        })
    }

    fn vectorize(&self, tokens: &[T], index: &mut BTreeMap<Vec<T>, usize>) -> TfIdf {
        let mut vec = vec![BTreeMap::new(); CIDER_N];
        let mut norm = [0.0; CIDER_N];
        let mut length = 0.0;
        for k in 1..=CIDER_N {
            for (g, tf) in ngrams(tokens, k) {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
                let v = tf as f64 * (self.ref_len - df);
                norm[k - 1] += v * v;
                if k == 2 {
                    length += tf as f64;
                }
                let next = index.len();
                let id = *index.entry(g).or_insert(next);
                vec[k - 1].insert(id, v);
            }
        }
        for x in &mut norm {
            *x = x.sqrt();
        }
        TfIdf { vec, norm, length }
    }

    fn sim(hyp: &TfIdf, r: &TfIdf) -> [f64; CIDER_N] {
        let delta = hyp.length - r.length;
        let mut val = [0.0; CIDER_N];
        for k in 0..CIDER_N {
            for (g, &vh) in &hyp.vec[k] {
                if let Some(&vr) = r.vec[k].get(g) {
                    val[k] += vh.min(vr) * vr;
                }
            }
            if hyp.norm[k] != 0.0 && r.norm[k] != 0.0 {
                val[k] /= hyp.norm[k] * r.norm[k];
            }
            val[k] *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
        val
    }

    /// Score of one candidate against its references.
    pub fn score(&self, candidate: &[T], refs: &[Vec<T>]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let mut index = BTreeMap::new();
        let hyp = self.vectorize(candidate, &mut index);
        let mut acc = [0.0; CIDER_N];
        for r in refs {
            let rv = self.vectorize(r, &mut index);
            for (a, s) in acc.iter_mut().zip(Self::sim(&hyp, &rv)) {
                *a += s;
            }
        }
        let mean = acc.iter().sum::<f64>() / CIDER_N as f64;
        mean / refs.len() as f64 * 10.0
    }
}

/// Corpus CIDEr-D (document frequencies from `references`) and the
/// per-candidate scores.
pub fn cider_d_scores<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<(f64, Vec<f64>)> {
    check_shapes(candidates, references)?;
    let scorer = CiderD::new(references)?;
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

pub fn cider_d<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    Ok(cider_d_scores(candidates, references)?.0)
}
