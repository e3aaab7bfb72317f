//! Question-answer corpora: examples, splits, vocabulary, negatives.

pub mod bm25;
pub mod generator;
pub mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RESERVED_TOKENS, UNK_ID};

pub use bm25::Bm25Index;
pub use generator::{generate_synthetic, CorpusConfig, ParticipantProfile};

/// One labelled (question, answer) row of a participant's data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: u64,
    pub question: Vec<String>,
    pub aid: u64,
    pub answer: Vec<String>,
    pub label: u8,
    pub participant: String,
}

/// A participant's examples divided by question id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<QAExample>,
    pub dev: Vec<QAExample>,
    pub test: Vec<QAExample>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &QAExample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantCorpus {
    pub profile: Option<ParticipantProfile>,
    pub name: String,
    pub splits: Splits,
}

/// Participants in ascending name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub participants: Vec<ParticipantCorpus>,
}

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Default split ratios for train, dev and test.
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

fn distinct_qids(examples: &[QAExample]) -> Vec<u64> {
    examples
        .iter()
        .map(|e| e.qid)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Question counts `(train, dev, test)` for `n` questions.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(
            "corpus.ratios",
            "ratios must lie in [0, 1] and sum to 1",
        ));
    }
    if n < 3 {
        return Err(Error::config(
            "corpus.questions",
            format!("{n} questions cannot fill train, dev and test"),
        ));
    }
    let dev = ((ratios[1] * n as f64).round() as usize).max(1);
    let test = ((ratios[2] * n as f64).round() as usize).max(1);
    if dev + test >= n {
        return Err(Error::config(
            "corpus.ratios",
            format!("{n} questions leave no training question"),
        ));
    }
    Ok((n - dev - test, dev, test))
}

/// Which split a question lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

/// Split of every id in `qids`. Ids are sorted, then shuffled with `rng`;
/// the first block becomes test, the next dev, the rest train.
pub fn assign_splits<R: Rng>(
    qids: &[u64],
    ratios: [f64; 3],
    rng: &mut R,
) -> Result<HashMap<u64, SplitName>> {
    let mut qids: Vec<u64> = qids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (_, dev, test) = split_sizes(qids.len(), ratios)?;
    qids.shuffle(rng);
    Ok(qids
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let name = if i < test {
                SplitName::Test
            } else if i < test + dev {
                SplitName::Dev
            } else {
                SplitName::Train
            };
            (q, name)
        })
        .collect())
}

/// Partitions examples by question id as [`assign_splits`] decides.
pub fn split<R: Rng>(examples: &[QAExample], ratios: [f64; 3], rng: &mut R) -> Result<Splits> {
    let assignment = assign_splits(&distinct_qids(examples), ratios, rng)?;
    let mut out = Splits::default();
    for e in examples {
        match assignment[&e.qid] {
            SplitName::Train => out.train.push(e.clone()),
            SplitName::Dev => out.dev.push(e.clone()),
            SplitName::Test => out.test.push(e.clone()),
        }
    }
    Ok(out)
}

/// Keeps `round(ratio * n)` (at least one) of the training questions, chosen
/// uniformly by `rng`, with every row of a kept question.
pub fn subsample<R: Rng>(train: &[QAExample], ratio: f64, rng: &mut R) -> Vec<QAExample> {
    if ratio >= 1.0 {
        return train.to_vec();
    }
    let mut qids = distinct_qids(train);
    let keep = ((ratio * qids.len() as f64).round() as usize).clamp(1, qids.len().max(1));
    qids.shuffle(rng);
    let kept: HashSet<u64> = qids[..keep.min(qids.len())].iter().copied().collect();
    train
        .iter()
        .filter(|e| kept.contains(&e.qid))
        .cloned()
        .collect()
}

/// Token-to-id map with the reserved ids first, then words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<'a, I: IntoIterator<Item = &'a String>>(tokens: I) -> Self {
        let words: BTreeSet<&String> = tokens.into_iter().collect();
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(
            words
                .into_iter()
                .filter(|w| !RESERVED_TOKENS.contains(&w.as_str()))
                .cloned(),
        );
        Self::from_list(all)
    }

    /// Vocabulary over the training questions and answers of every participant.
    pub fn from_training(corpus: &Corpus) -> Self {
        Self::from_tokens(
            corpus
                .participants
                .iter()
                .flat_map(|p| &p.splits.train)
                .flat_map(|e| e.question.iter().chain(&e.answer)),
        )
    }

    pub fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("token list serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> =
            serde_json::from_str(text).map_err(|e| Error::config("vocab", e.to_string()))?;
        Ok(Self::from_list(tokens))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub aid: u64,
    pub tokens: Vec<usize>,
    pub label: bool,
}

/// One question with its labelled candidates, as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionGroup {
    pub qid: u64,
    pub question: Vec<usize>,
    pub candidates: Vec<Candidate>,
}

impl QuestionGroup {
    pub fn positives(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.label)
    }
}

/// Groups rows by question id in ascending id order; candidates keep row order.
pub fn group(examples: &[QAExample], vocab: &Vocabulary) -> Vec<QuestionGroup> {
    let mut map: BTreeMap<u64, QuestionGroup> = BTreeMap::new();
    for e in examples {
        let g = map.entry(e.qid).or_insert_with(|| QuestionGroup {
            qid: e.qid,
            question: vocab.encode(&e.question),
            candidates: Vec::new(),
        });
        g.candidates.push(Candidate {
            aid: e.aid,
            tokens: vocab.encode(&e.answer),
            label: e.label == 1,
        });
    }
    map.into_values().collect()
}

/// Index over every distinct answer appearing in `groups`.
pub fn answer_index(groups: &[QuestionGroup]) -> Bm25Index<usize> {
    Bm25Index::build(
        groups
            .iter()
            .flat_map(|g| g.candidates.iter().map(|c| (c.aid, c.tokens.as_slice()))),
    )
}

/// Answer tokens by id, for turning negative ids back into inputs.
pub fn answer_lookup(groups: &[QuestionGroup]) -> HashMap<u64, Vec<usize>> {
    let mut out = HashMap::new();
    for c in groups.iter().flat_map(|g| &g.candidates) {
        out.entry(c.aid).or_insert_with(|| c.tokens.clone());
    }
    out
}

/// BM25 negatives for each question: the top `k` answers of the pool that
/// are not one of its positives.
pub fn mine_negatives(
    groups: &[QuestionGroup],
    index: &Bm25Index<usize>,
    k: usize,
) -> Vec<Vec<u64>> {
    groups
        .iter()
        .map(|g| {
            let gt: HashSet<u64> = g.positives().map(|c| c.aid).collect();
            index.top_negatives(&g.question, &gt, k)
        })
        .collect()
}

/// Unigram distribution of every question and answer token of a participant.
pub fn unigram(examples: &[QAExample]) -> HashMap<String, f64> {
    let mut counts: HashMap<String, f64> = HashMap::new();
    let mut seen_answers = HashSet::new();
    let mut seen_questions = HashSet::new();
    for e in examples {
        if seen_questions.insert(e.qid) {
            for t in &e.question {
                *counts.entry(t.clone()).or_default() += 1.0;
            }
        }
        if seen_answers.insert(e.aid) {
            for t in &e.answer {
                *counts.entry(t.clone()).or_default() += 1.0;
            }
        }
    }
    let total: f64 = counts.values().sum();
    counts.values_mut().for_each(|v| *v /= total);
    counts
}

/// Jensen-Shannon divergence in bits, so the value lies in [0, 1].
pub fn jensen_shannon(p: &HashMap<String, f64>, q: &HashMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let mut total = 0.0;
    for k in keys {
        let a = p.get(k).copied().unwrap_or(0.0);
        let b = q.get(k).copied().unwrap_or(0.0);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).log2();
        }
    }
    total.max(0.0)
}

/// Smallest pairwise divergence between participants' unigram distributions.
pub fn min_pairwise_divergence(corpus: &Corpus) -> f64 {
    let dists: Vec<_> = corpus
        .participants
        .iter()
        .map(|p| unigram(&p.splits.all().cloned().collect::<Vec<_>>()))
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            best = best.min(jensen_shannon(&dists[i], &dists[j]));
        }
    }
    best
}
