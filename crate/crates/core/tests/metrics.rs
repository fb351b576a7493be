//! Metric values frozen from `tests/oracles/metrics_oracle.py`, which
//! recomputes them by brute force over `tests/oracles/toy_corpus.json`.

use bofi::eval::{bleu, cider_d, cider_d_scores};
use proptest::prelude::*;
use serde_json::Value;

const TOL: f64 = 1e-6;

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn toy(name: &str) -> Corpus {
    let all: Value = serde_json::from_str(include_str!("oracles/toy_corpus.json")).unwrap();
    let c = &all[name];
    let cands = c["candidates"].as_array().unwrap().iter().map(|s| words(s.as_str().unwrap())).collect();
    let refs = c["references"]
        .as_array()
        .unwrap()
        .iter()
        .map(|rs| rs.as_array().unwrap().iter().map(|s| words(s.as_str().unwrap())).collect())
        .collect();
    (cands, refs)
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < TOL, "{a} vs {b}");
}

#[test]
fn two_sentence_bleu() {
    let (c, r) = toy("two");
    let expected = [0.933333333333, 0.708917556959, 0.450411625625, 0.0];
    for (n, e) in (1..=4).zip(expected) {
        close(bleu(&c, &r, n).unwrap(), e);
    }
    close(cider_d(&c, &r).unwrap(), 3.564350453654);
}

#[test]
fn five_record_bleu() {
    let (c, r) = toy("five");
    let expected = [0.871498247797, 0.833381336411, 0.797578308116, 0.777415277899];
    for (n, e) in (1..=4).zip(expected) {
        close(bleu(&c, &r, n).unwrap(), e);
    }
}

#[test]
fn five_record_cider() {
    let (c, r) = toy("five");
    let (mean, per) = cider_d_scores(&c, &r).unwrap();
    close(mean, 4.125140919057);
    let expected = [5.874912499548, 6.779867845388, 3.434811341256, 1.837954816491, 2.698158092602];
    assert_eq!(per.len(), expected.len());
    for (a, e) in per.iter().zip(expected) {
        close(*a, e);
    }
}

#[test]
fn single_record_self_similarity_is_maximal() {
    let refs = vec![vec![words("a red cube next to a blue ball")]];
    let same = cider_d(&[words("a red cube next to a blue ball")], &refs).unwrap();
    for other in ["a red cube", "a red cube next to a blue", "the blue ball next to a red cube"] {
        assert!(cider_d(&[words(other)], &refs).unwrap() <= same);
    }
}

#[test]
fn shape_errors() {
    let (c, r) = toy("five");
    assert!(bleu(&c, &r[..4], 4).is_err());
    assert!(cider_d(&c[..0], &r[..0]).is_err());
    let empty_ref: Vec<Vec<Vec<String>>> = vec![vec![]];
    assert!(cider_d(&c[..1], &empty_ref).is_err());
}

#[test]
fn adding_a_matching_ngram_never_lowers_the_numerator() {
    let refs = vec![vec![words("a red cube lying next to the blue ball")]];
    let base = vec![words("a red cube")];
    let longer = vec![words("a red cube lying")];
    // With equal brevity penalties removed by comparing unigram precision
    // times length: matched counts can only grow.
    let p = |c: &Vec<Vec<String>>| {
        let len = c[0].len() as f64;
        let bp = (1.0 - 9.0 / len).exp();
        bleu(c, &refs, 1).unwrap() / bp * len
    };
    assert!(p(&longer) >= p(&base));
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    let word = prop::sample::select(vec!["a", "red", "cube", "the", "ball", "on", "next", "to", "blue"]);
    let sentence = prop::collection::vec(word, 1..8).prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
    let item = (sentence.clone(), prop::collection::vec(sentence, 1..4));
    prop::collection::vec(item, 1..6).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_record_order((c, r) in corpus_strategy(), rot in 0usize..6) {
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        for n in 1..=4 {
            prop_assert!((bleu(&c, &r, n).unwrap() - bleu(&c2, &r2, n).unwrap()).abs() < 1e-12);
        }
        prop_assert!((cider_d(&c, &r).unwrap() - cider_d(&c2, &r2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn metric_ranges((c, r) in corpus_strategy()) {
        for n in 1..=4 {
            let b = bleu(&c, &r, n).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
        prop_assert!(cider_d(&c, &r).unwrap() >= 0.0);
    }
}
