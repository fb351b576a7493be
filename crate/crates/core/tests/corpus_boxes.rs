//! Box histograms of the default synthetic corpus. The expected numbers come
//! from `tests/oracles/box_hist.py`, run on the output of
//! `bofi gen-data --seed 7`:
//!
//! ```text
//! python3 tests/oracles/box_hist.py out/data.jsonl
//! ```

use std::collections::BTreeMap;

use bofi::boxes::{box_statistics, BoxType, Level};
use bofi::corpus::{generate_synthetic_corpus, prepare_examples, SynthConfig, Vocab};

fn hist(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
    pairs.iter().copied().collect()
}

#[test]
fn seed_seven_matches_independent_recount() {
    let records = generate_synthetic_corpus(&SynthConfig::default(), 7).unwrap();
    assert_eq!(records.len(), 2000);
    let ex = prepare_examples(&records, &Vocab::reserved_only(), Level::Finest);
    let stats = box_statistics(ex.iter().filter_map(|e| e.boxes.as_ref()));

    assert_eq!(stats.count_hist, hist(&[(5, 1344), (6, 656)]));
    assert_eq!(stats.len_hist, hist(&[(1, 2000), (3, 7312), (4, 1344)]));
    let types: BTreeMap<BoxType, usize> = [(BoxType::Np, 6000), (BoxType::Vp, 2656), (BoxType::Cp, 2000)].into();
    assert_eq!(stats.type_freq, types);
}

#[test]
fn histograms_follow_template_arithmetic() {
    // Every template has three 3-word noun phrases and one conjunction. A
    // single relation is a 4-word verb phrase; a coordinated pair of
    // relations is two 3-word verb phrases.
    for seed in [1, 2, 3] {
        let cfg = SynthConfig {
            n_scenes: 300,
            ..SynthConfig::default()
        };
        let records = generate_synthetic_corpus(&cfg, seed).unwrap();
        let ex = prepare_examples(&records, &Vocab::reserved_only(), Level::Finest);
        let s = box_statistics(ex.iter().filter_map(|e| e.boxes.as_ref()));
        let n = ex.len();
        let five = s.count_hist.get(&5).copied().unwrap_or(0);
        let six = s.count_hist.get(&6).copied().unwrap_or(0);
        assert_eq!(five + six, n);
        assert_eq!(s.type_freq[&BoxType::Np], 3 * n);
        assert_eq!(s.type_freq[&BoxType::Cp], n);
        assert_eq!(s.type_freq[&BoxType::Vp], five + 2 * six);
        assert_eq!(s.len_hist[&1], n);
        assert_eq!(s.len_hist.get(&4).copied().unwrap_or(0), five);
        assert_eq!(s.len_hist[&3], 3 * n + 2 * six);
    }
}
