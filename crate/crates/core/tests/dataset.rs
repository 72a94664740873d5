use std::collections::BTreeSet;

use mmsbr::dataset::{
    build_sessions, encode_price_level, items_of, make_cold_start_variant, read_interactions, split_chronological,
    write_interactions, CategoryPriceRange, CorpusConfig, Interaction, Session, SessionCorpus,
};
use mmsbr::embedding::{synthesize, SynthConfig};
use mmsbr::Error;
use proptest::prelude::*;

fn range(min: f64, max: f64) -> CategoryPriceRange {
    CategoryPriceRange {
        category_id: 0,
        min,
        max,
    }
}

fn event(user: &str, item: u32, ts: f64) -> Interaction {
    Interaction {
        user_tag: user.into(),
        item_id: item,
        timestamp: ts,
        price: 10.0,
        category_id: 0,
    }
}

#[test]
fn price_level_rejects_out_of_range() {
    let err = encode_price_level(101.0, &range(0.0, 100.0), 100).unwrap_err();
    assert!(matches!(err, Error::PriceOutOfRange { .. }));
    assert_eq!(encode_price_level(3.0, &range(3.0, 3.0), 100).unwrap(), 0);
}

proptest! {
    #[test]
    fn price_level_is_monotone(a in 0.0..100.0f64, b in 0.0..100.0f64, rho in 1usize..200) {
        let r = range(0.0, 100.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (l1, l2) = (encode_price_level(lo, &r, rho).unwrap(), encode_price_level(hi, &r, rho).unwrap());
        prop_assert!(l1 <= l2);
        prop_assert!(l2 < rho);
    }
}

#[test]
fn day_boundary_is_utc_midnight() {
    let log = vec![
        event("a", 1, 86_398.0),
        event("a", 2, 86_399.0),
        event("a", 1, 86_400.0),
        event("a", 2, 86_401.0),
    ];
    let s = build_sessions(&log, 1).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].items, vec![1, 2]);
}

#[test]
fn empty_input_is_an_error() {
    assert!(matches!(build_sessions(&[], 1), Err(Error::EmptyCorpus)));
    // every session collapses to length one
    let log = vec![event("a", 1, 0.0), event("b", 2, 0.0)];
    assert!(matches!(build_sessions(&log, 1), Err(Error::EmptyCorpus)));
}

#[test]
fn rebuilding_is_identical() {
    let log: Vec<Interaction> = (0..60)
        .map(|i| event(&format!("u{}", i % 7), (i * 13 % 5) as u32, i as f64 * 1000.0))
        .collect();
    assert_eq!(build_sessions(&log, 2).unwrap(), build_sessions(&log, 2).unwrap());
}

#[test]
fn too_few_sessions_to_split() {
    let s: Vec<Session> = (0..2).map(|i| Session::new(vec![1, 2], i as f64)).collect();
    assert!(matches!(split_chronological(&s, [7, 2, 1]), Err(Error::TooFewSessions(2))));
}

#[test]
fn unseen_test_items_drop_exactly_those_sessions() {
    // 100 sessions over items 0..10; five of the last ten use item 99
    let mut sessions: Vec<Session> = (0..100)
        .map(|i| Session::new(vec![(i % 10) as u32, ((i + 1) % 10) as u32], i as f64))
        .collect();
    for k in [90, 92, 94, 96, 98] {
        sessions[k].items[k % 2] = 99;
    }
    let split = split_chronological(&sessions, [7, 2, 1]).unwrap();
    let seen = items_of(&split.train);
    let brute = split
        .test_raw
        .iter()
        .filter(|s| s.items.iter().any(|i| !seen.contains(i)))
        .count();
    assert_eq!(brute, 5);
    assert_eq!(split.test.len(), split.test_raw.len() - brute);
    assert_eq!(split.test.len(), 5);
}

#[test]
fn cold_variant_flags_unseen_items() {
    let train = vec![Session::new(vec![1, 2], 0.0)];
    let test_raw = vec![Session::new(vec![1, 7], 1.0), Session::new(vec![2, 1], 2.0)];
    let cold = make_cold_start_variant(&train, &test_raw);
    assert_eq!(cold.sessions, test_raw);
    assert_eq!(cold.cold_items, BTreeSet::from([7]));
}

fn check_corpus_invariants(corpus: &SessionCorpus, interactions: &[Interaction]) {
    let end = |s: &[Session]| s.iter().map(|x| x.end_time).fold(f64::NEG_INFINITY, f64::max);
    let start = |s: &[Session]| s.iter().map(|x| x.end_time).fold(f64::INFINITY, f64::min);
    assert!(end(&corpus.sessions_train) <= start(&corpus.sessions_val));
    assert!(end(&corpus.sessions_val) <= start(&corpus.sessions_test_plus));

    let train = items_of(&corpus.sessions_train);
    assert!(corpus.sessions_test.iter().flat_map(|s| &s.items).all(|i| train.contains(i)));

    let mut freq = std::collections::HashMap::new();
    for it in interactions {
        *freq.entry(it.item_id).or_insert(0usize) += 1;
    }
    for s in corpus.sessions_train.iter().chain(&corpus.sessions_val) {
        assert!(s.len() >= 2);
        assert!(s.items.iter().all(|i| freq[i] >= 5));
    }
    for r in &corpus.items {
        assert!(r.price_level < corpus.rho);
    }
}

#[test]
fn synthetic_cold_start_count_matches_brute_force() {
    let cfg = SynthConfig {
        n_sessions: 2000,
        cold_fraction: 0.1,
        ..SynthConfig::default()
    };
    let s = synthesize(&cfg, &CorpusConfig::default()).unwrap();
    let c = &s.corpus;
    check_corpus_invariants(c, &s.interactions);

    let train = items_of(&c.sessions_train);
    let touching = c
        .sessions_test_plus
        .iter()
        .filter(|x| x.items.iter().any(|i| !train.contains(i)))
        .count();
    assert!(touching > 0, "the generator should emit cold sessions");
    assert_eq!(c.sessions_test_plus.len() - c.sessions_test.len(), touching);
    // every cold item comes from the held-out set
    let held: BTreeSet<u32> = s.world.cold.iter().map(|&i| i as u32).collect();
    assert!(c.cold_items.is_subset(&held));
}

#[test]
fn corpus_round_trips_through_files() {
    let cfg = SynthConfig {
        n_sessions: 600,
        ..SynthConfig::default()
    };
    let s = synthesize(&cfg, &CorpusConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.corpus.write_dir(dir.path()).unwrap();
    let back = SessionCorpus::read_dir(dir.path()).unwrap();
    assert_eq!(back.items, s.corpus.items);
    assert_eq!(back.categories, s.corpus.categories);
    assert_eq!(back.rho, s.corpus.rho);
    let ids = |v: &[Session]| v.iter().map(|x| x.items.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&back.sessions_train), ids(&s.corpus.sessions_train));
    assert_eq!(ids(&back.sessions_test_plus), ids(&s.corpus.sessions_test_plus));
    assert_eq!(back.cold_items, s.corpus.cold_items);

    let log = dir.path().join("log.csv");
    write_interactions(&log, &s.interactions).unwrap();
    assert_eq!(read_interactions(&log).unwrap(), s.interactions);
}

#[test]
fn interaction_reader_names_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    std::fs::write(&p, "user_tag,item_id,timestamp,price,category_id\na,1,0,2.5,0\na,2,5,-1,0\n").unwrap();
    let err = read_interactions(&p).unwrap_err();
    assert!(matches!(err, Error::BadInteraction { line: 3, .. }), "{err}");

    std::fs::write(&p, "user,item\na,1\n").unwrap();
    assert!(matches!(read_interactions(&p), Err(Error::BadFile { .. })));
}

#[test]
fn corpus_config_defaults() {
    let c = CorpusConfig::default();
    assert_eq!((c.min_item_freq, c.rho, c.ratios), (5, 100, [7, 2, 1]));
}
