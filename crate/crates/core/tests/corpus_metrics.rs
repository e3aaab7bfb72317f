//! BM25 mining and the ranking metrics against brute force, and the
//! synthetic corpus's structural guarantees.

use std::collections::{HashMap, HashSet};

use patchfed_core::corpus::bm25::{B, K1};
use patchfed_core::corpus::generator::build_corpus;
use patchfed_core::corpus::{self, min_pairwise_divergence, Bm25Index, CorpusConfig};
use patchfed_core::evaluation::{
    average_precision, metrics_from_lists, reciprocal_rank, Ranked, RankedList,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_bm25(docs: &[(u64, Vec<u32>)], query: &[u32], doc: usize) -> f64 {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|(_, d)| d.len()).sum::<usize>() as f64 / n;
    let d = &docs[doc].1;
    let mut total = 0.0;
    for term in query {
        let tf = d.iter().filter(|t| *t == term).count();
        if tf == 0 {
            continue;
        }
        let df = docs.iter().filter(|(_, x)| x.contains(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let tf = tf as f64;
        let norm = 1.0 - B + B * d.len() as f64 / avg;
        total += idf * tf * (K1 + 1.0) / (tf + K1 * norm);
    }
    total
}

#[test]
fn top_negatives_match_brute_force_ranking() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.gen_range(5..30u32);
        let docs: Vec<(u64, Vec<u32>)> = (0..rng.gen_range(6..40u64))
            .map(|i| {
                let len = rng.gen_range(1..15);
                (
                    1000 + i * 7,
                    (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
                )
            })
            .collect();
        let index = Bm25Index::build(docs.iter().map(|(id, t)| (*id, t.as_slice())));
        for _ in 0..10 {
            let query: Vec<u32> = (0..rng.gen_range(1..6))
                .map(|_| rng.gen_range(0..vocab))
                .collect();
            let truth: HashSet<u64> = docs
                .iter()
                .filter(|_| rng.gen_bool(0.2))
                .map(|(id, _)| *id)
                .collect();
            let scored: Vec<(u64, f64)> = docs
                .iter()
                .enumerate()
                .filter(|(_, (id, _))| !truth.contains(id))
                .map(|(i, (id, _))| (*id, brute_bm25(&docs, &query, i)))
                .collect();
            for &(id, s) in &scored {
                let got = index.score(&query, id).unwrap();
                assert!(
                    (got - s).abs() <= 1e-12 * s.abs().max(1.0),
                    "seed {seed}: {got} vs {s}"
                );
            }
            // rank by (score desc, id asc) via pairwise comparison counts
            let beats = |a: &(u64, f64), b: &(u64, f64)| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0);
            let ranks: Vec<usize> = scored
                .iter()
                .map(|x| scored_rank(x, &scored, beats))
                .collect();
            let mut want: Vec<(usize, u64)> = ranks
                .into_iter()
                .zip(scored.iter().map(|(id, _)| *id))
                .collect();
            want.sort_unstable();
            let want: Vec<u64> = want.into_iter().take(5).map(|(_, id)| id).collect();
            assert_eq!(index.top_negatives(&query, &truth, 5), want, "seed {seed}");
        }
    }
}

fn scored_rank(
    x: &(u64, f64),
    all: &[(u64, f64)],
    beats: impl Fn(&(u64, f64), &(u64, f64)) -> bool,
) -> usize {
    all.iter().filter(|y| beats(y, x)).count()
}

fn random_list(rng: &mut ChaCha8Rng) -> Vec<Ranked> {
    let n = rng.gen_range(1..9);
    let mut items: Vec<Ranked> = (0..n)
        .map(|i| Ranked {
            aid: i * 3 + rng.gen_range(0..3),
            // coarse scores so ties are common
            score: rng.gen_range(0..5) as f64 * 0.5,
            label: rng.gen_bool(0.35),
        })
        .collect();
    if !items.iter().any(|r| r.label) {
        let k = rng.gen_range(0..items.len());
        items[k].label = true;
    }
    items
}

/// Position of each item under (score desc, aid asc), found by counting
/// the items that precede it.
fn brute_order(items: &[Ranked]) -> Vec<Ranked> {
    let mut out = vec![None; items.len()];
    for x in items {
        let rank = items
            .iter()
            .filter(|y| y.score > x.score || (y.score == x.score && y.aid < x.aid))
            .count();
        out[rank] = Some(*x);
    }
    out.into_iter().map(Option::unwrap).collect()
}

#[test]
fn map_and_mrr_match_brute_force_on_random_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut lists = Vec::new();
    let (mut ap_sum, mut rr_sum) = (0.0, 0.0);
    for qid in 0..1000u64 {
        let items = random_list(&mut rng);
        let ordered = brute_order(&items);
        let list = RankedList::new(qid, items).unwrap();
        assert_eq!(list.items(), ordered.as_slice());

        // precision at every relevant cut-off, counted from scratch
        let relevant = ordered.iter().filter(|r| r.label).count();
        let mut ap = 0.0;
        for k in 0..ordered.len() {
            if ordered[k].label {
                let hits = ordered[..=k].iter().filter(|r| r.label).count();
                ap += hits as f64 / (k + 1) as f64;
            }
        }
        ap /= relevant as f64;
        let first = (0..ordered.len()).find(|&k| ordered[k].label).unwrap();
        let rr = 1.0 / (first + 1) as f64;
        assert_eq!(
            average_precision(&list).to_bits(),
            ap.to_bits(),
            "qid {qid}"
        );
        assert_eq!(reciprocal_rank(&list).to_bits(), rr.to_bits(), "qid {qid}");
        ap_sum += ap;
        rr_sum += rr;
        lists.push(list);
    }
    let m = metrics_from_lists("p", &lists, 0).unwrap();
    assert_eq!(m.map.to_bits(), (ap_sum / 1000.0).to_bits());
    assert_eq!(m.mrr.to_bits(), (rr_sum / 1000.0).to_bits());
}

#[test]
fn lists_without_a_positive_are_excluded() {
    let items = vec![Ranked {
        aid: 1,
        score: 0.5,
        label: false,
    }];
    assert!(RankedList::new(0, items).is_none());
    assert!(metrics_from_lists("p", &[], 3).is_err());
}

#[test]
fn generator_is_a_pure_function_of_its_config() {
    let config = CorpusConfig::desk(0.03, 8);
    let a = build_corpus(&config).unwrap();
    assert_eq!(a, build_corpus(&config).unwrap());
    let other = build_corpus(&CorpusConfig::desk(0.03, 9)).unwrap();
    assert_ne!(a, other);
}

#[test]
fn non_iid_corpus_clears_the_divergence_floor_and_iid_does_not() {
    let config = CorpusConfig::desk(0.05, 1);
    let jsd = min_pairwise_divergence(&build_corpus(&config).unwrap());
    assert!(jsd > config.jsd_floor, "non-IID minimum divergence {jsd}");
    let mut iid = config.clone();
    iid.iid = true;
    let jsd_iid = min_pairwise_divergence(&build_corpus(&iid).unwrap());
    assert!(
        jsd_iid < config.jsd_floor,
        "IID minimum divergence {jsd_iid}"
    );
    assert!(jsd_iid < jsd);
}

#[test]
fn splits_partition_questions_in_the_configured_proportions() {
    let config = CorpusConfig::desk(0.2, 4);
    let c = build_corpus(&config).unwrap();
    assert_eq!(c.participants.len(), 5);
    for (p, profile) in c.participants.iter().zip({
        let mut ps = config.profiles.clone();
        ps.sort_by(|a, b| a.name.cmp(&b.name));
        ps
    }) {
        assert_eq!(p.name, profile.name);
        let qids = |rows: &[corpus::QAExample]| rows.iter().map(|e| e.qid).collect::<HashSet<_>>();
        let (tr, dv, te) = (
            qids(&p.splits.train),
            qids(&p.splits.dev),
            qids(&p.splits.test),
        );
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
        let n = tr.len() + dv.len() + te.len();
        assert_eq!(n, profile.questions, "{}", p.name);
        let (want_tr, want_dv, want_te) = corpus::split_sizes(n, config.ratios).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (want_tr, want_dv, want_te));
        assert!((dv.len() as f64 / n as f64 - 0.1).abs() < 0.5 / n as f64 + 1e-9);

        // no dev/test candidate repeats a training answer text
        let train_answers: HashSet<&Vec<String>> =
            p.splits.train.iter().map(|e| &e.answer).collect();
        for e in p.splits.dev.iter().chain(&p.splits.test) {
            assert!(
                !train_answers.contains(&e.answer),
                "{} answer {} leaks",
                p.name,
                e.aid
            );
        }
        // every question has a positive and a negative candidate
        let mut labels: HashMap<u64, (bool, bool)> = HashMap::new();
        for e in p.splits.all() {
            let s = labels.entry(e.qid).or_default();
            s.0 |= e.label == 1;
            s.1 |= e.label == 0;
        }
        assert!(labels.values().all(|&(pos, neg)| pos && neg), "{}", p.name);
    }
}

#[test]
fn participants_keep_their_size_ordering() {
    let c = build_corpus(&CorpusConfig::desk(0.2, 1)).unwrap();
    let questions: HashMap<&str, usize> = c
        .participants
        .iter()
        .map(|p| {
            (
                p.name.as_str(),
                p.splits.all().map(|e| e.qid).collect::<HashSet<_>>().len(),
            )
        })
        .collect();
    assert!(questions["medical"] < questions["insurance"]);
    assert!(questions["insurance"] < questions["law"]);
    assert!(questions["law"] < questions["biomedical"]);
    assert!(questions["biomedical"] < questions["financial"]);
}
