use std::collections::HashSet;

use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::error::Error;

fn small() -> GenConfig {
    GenConfig {
        n_entities: 30,
        ..GenConfig::default()
    }
}

#[test]
fn forget_count_follows_fraction() {
    let c = generate_corpus(&GenConfig::default(), 1).unwrap();
    let forget: HashSet<&str> = c
        .split(Split::Forget)
        .iter()
        .map(|r| r.id.split('-').next().unwrap())
        .collect();
    assert_eq!(forget.len(), 20);
    assert_eq!(c.records.len(), 200 * 2);
}

#[test]
fn records_have_paraphrases_and_perturbations() {
    let c = generate_corpus(&GenConfig::default(), 2).unwrap();
    for r in &c.records {
        assert!(!r.paraphrases.is_empty());
        assert!(r.perturbed_answers.len() >= 3);
        let distinct: HashSet<_> = r.perturbed_answers.iter().collect();
        assert_eq!(distinct.len(), r.perturbed_answers.len());
        assert!(!r.perturbed_answers.contains(&r.answer));
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = generate_corpus(&small(), 7).unwrap();
    let b = generate_corpus(&small(), 7).unwrap();
    assert_eq!(a.records_jsonl().unwrap(), b.records_jsonl().unwrap());
    assert_eq!(a.vocab.to_json().unwrap(), b.vocab.to_json().unwrap());
    assert_ne!(
        a.records_jsonl().unwrap(),
        generate_corpus(&small(), 8).unwrap().records_jsonl().unwrap()
    );
}

#[test]
fn splits_are_entity_scoped() {
    let c = generate_corpus(&GenConfig::default(), 3).unwrap();
    let mut split_of = std::collections::HashMap::new();
    for r in &c.records {
        let entity = r.id.split('-').next().unwrap();
        let prev = split_of.insert(entity, r.split);
        assert!(prev.is_none() || prev == Some(r.split));
    }
    let ids: HashSet<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids.len(), c.records.len());
}

#[test]
fn unknown_slot_is_config_error() {
    let mut cfg = small();
    cfg.template_set.attributes[0].answers[0] = "{name} lives in {city} .".into();
    assert!(matches!(generate_corpus(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.forget_fraction = 1.0;
    assert!(matches!(generate_corpus(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.n_perturbed = 2;
    assert!(matches!(generate_corpus(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn perturbed_answers_differ_only_at_value_slot() {
    let c = generate_corpus(&GenConfig::default(), 4).unwrap();
    for r in &c.records {
        let a = c.vocab.encode(&r.answer).unwrap();
        for p in &r.perturbed_answers {
            let b = c.vocab.encode(p).unwrap();
            assert_eq!(a.len(), b.len());
            let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(diffs, 1, "{} vs {}", r.answer, p);
        }
    }
}

#[test]
fn vocabulary_covers_corpus_and_ids_in_range() {
    let c = generate_corpus(&GenConfig::default(), 5).unwrap();
    c.validate().unwrap();
    for r in &c.records {
        for t in r.texts() {
            let ids = c.vocab.encode(t).unwrap();
            assert!(ids.iter().all(|&i| (i as usize) < c.vocab.len()));
            assert_eq!(c.vocab.decode_text(&ids).unwrap(), normalize(t));
        }
    }
    assert!(c.vocab.len() < 700, "vocab {}", c.vocab.len());
}

#[test]
fn encode_edge_cases() {
    let c = generate_corpus(&small(), 0).unwrap();
    assert_eq!(c.vocab.encode("").unwrap(), vec![c.vocab.specials.eos]);
    match c.vocab.encode("where was zzzz born") {
        Err(Error::UnknownWord(w)) => assert_eq!(w, "zzzz"),
        other => panic!("{other:?}"),
    }
    let s = c.vocab.specials;
    assert_eq!((s.bos, s.eos, s.pad, s.sep), (0, 1, 2, 3));
    let q = &c.records[0].question;
    let p = c.vocab.encode_prompt(q).unwrap();
    assert_eq!(p[0], s.bos);
    assert_eq!(*p.last().unwrap(), s.sep);
}

#[test]
fn save_load_round_trip() {
    let c = generate_corpus(&small(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back, c);
    let vocab: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("vocab.json")).unwrap()).unwrap();
    assert_eq!(vocab["tokens"][1], "<eos>");
    assert_eq!(vocab["specials"]["sep"], 3);
    let line = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        ["answer", "id", "paraphrases", "perturbed_answers", "question", "split"]
    );
}

#[test]
fn mismatched_vocab_is_data_error() {
    let c = generate_corpus(&small(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let other = Vocabulary::from_words(["a", "b"]).unwrap();
    other.save(dir.path().join("vocab.json")).unwrap();
    assert!(matches!(Corpus::load(dir.path()), Err(Error::Data(_))));
}

#[test]
fn batches_partition_and_are_deterministic() {
    let c = generate_corpus(&small(), 1).unwrap();
    let splits = [Split::Retain];
    let b = batches(&c, &splits, 7, 3, 0).unwrap();
    let n = c.split(Split::Retain).len();
    assert_eq!(b.len(), n.div_ceil(7));
    let mut seen: Vec<&str> = b.iter().flatten().map(|r| r.id.as_str()).collect();
    seen.sort();
    let mut expect: Vec<&str> = c.split(Split::Retain).iter().map(|r| r.id.as_str()).collect();
    expect.sort();
    assert_eq!(seen, expect);
    assert_eq!(b, batches(&c, &splits, 7, 3, 0).unwrap());
    assert_ne!(b, batches(&c, &splits, 7, 3, 1).unwrap());
    assert!(matches!(batches(&c, &splits, 0, 3, 0), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.holdout_fraction = 0.0;
    let c0 = generate_corpus(&cfg, 1).unwrap();
    assert!(matches!(batches(&c0, &[Split::Holdout], 4, 0, 0), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_partition_records(seed in 0u64..10_000, n in 10usize..60, ff in 0.05f64..0.5) {
        let cfg = GenConfig { n_entities: n, forget_fraction: ff, ..GenConfig::default() };
        let c = generate_corpus(&cfg, seed).unwrap();
        let total: usize = Split::ALL.iter().map(|&s| c.split(s).len()).sum();
        prop_assert_eq!(total, c.records.len());
        let (f, _, _) = cfg.split_counts();
        prop_assert_eq!(c.split(Split::Forget).len(), f * cfg.attributes_per_entity);
        for r in &c.records {
            for t in r.texts() {
                prop_assert!(c.vocab.encode(t).is_ok());
            }
        }
    }
}
