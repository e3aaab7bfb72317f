//! On-disk corpus layout.
//!
//! ```text
//! <root>/corpus.json                  generator config, when generated
//! <root>/<participant>/profile.json
//! <root>/<participant>/{train,dev,test}.jsonl
//! <root>/<participant>/negatives.jsonl   BM25 negatives of train questions
//! ```
//!
//! Each JSONL row is `{"qid", "question", "aid", "answer", "label"}` with
//! whitespace-joined text.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bm25::Bm25Index;
use super::generator::{CorpusConfig, ParticipantProfile};
use super::{tokenize, Corpus, ParticipantCorpus, QAExample, Splits};
use crate::error::{Error, Result};

/// Largest tolerated share of malformed lines in one file.
pub const MAX_MALFORMED_FRACTION: f64 = 0.1;

const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    qid: u64,
    question: String,
    aid: u64,
    answer: String,
    label: u8,
}

#[derive(Debug, Serialize)]
struct NegativesRow<'a> {
    qid: u64,
    negatives: &'a [u64],
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_jsonl(rows: &[QAExample]) -> String {
    let mut out = String::new();
    for e in rows {
        let row = Row {
            qid: e.qid,
            question: e.question.join(" "),
            aid: e.aid,
            answer: e.answer.join(" "),
            label: e.label,
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// BM25 negatives of every training question over the training answer pool.
pub fn train_negatives(train: &[QAExample], k: usize) -> BTreeMap<u64, Vec<u64>> {
    let mut seen = HashSet::new();
    let docs: Vec<(u64, &[String])> = train
        .iter()
        .filter(|e| seen.insert(e.aid))
        .map(|e| (e.aid, e.answer.as_slice()))
        .collect();
    let index = Bm25Index::build(docs);
    let mut questions: BTreeMap<u64, (&[String], HashSet<u64>)> = BTreeMap::new();
    for e in train {
        let entry = questions
            .entry(e.qid)
            .or_insert((e.question.as_slice(), HashSet::new()));
        if e.label == 1 {
            entry.1.insert(e.aid);
        }
    }
    questions
        .into_iter()
        .map(|(qid, (q, gt))| (qid, index.top_negatives(q, &gt, k)))
        .collect()
}

pub fn write_corpus(root: &Path, corpus: &Corpus, config: Option<&CorpusConfig>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    if let Some(c) = config {
        let json = serde_json::to_string_pretty(c).expect("config serializes");
        write_file(&root.join("corpus.json"), json.as_bytes())?;
    }
    for p in &corpus.participants {
        let dir = root.join(&p.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Some(profile) = &p.profile {
            let json = serde_json::to_string_pretty(profile).expect("profile serializes");
            write_file(&dir.join("profile.json"), json.as_bytes())?;
        }
        for (name, rows) in SPLITS
            .iter()
            .zip([&p.splits.train, &p.splits.dev, &p.splits.test])
        {
            write_file(
                &dir.join(format!("{name}.jsonl")),
                to_jsonl(rows).as_bytes(),
            )?;
        }
        let mut neg = String::new();
        for (qid, negatives) in train_negatives(&p.splits.train, 5) {
            neg.push_str(
                &serde_json::to_string(&NegativesRow {
                    qid,
                    negatives: &negatives,
                })
                .expect("row serializes"),
            );
            neg.push('\n');
        }
        write_file(&dir.join("negatives.jsonl"), neg.as_bytes())?;
    }
    Ok(())
}

/// Reads one JSONL file, skipping malformed lines. Fails when more than
/// [`MAX_MALFORMED_FRACTION`] of the non-blank lines are malformed.
pub fn read_jsonl(path: &Path, participant: &str) -> Result<Vec<QAExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut lines = 0usize;
    let mut malformed = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        lines += 1;
        let parsed = serde_json::from_str::<Row>(line).ok().and_then(|r| {
            let question = tokenize(&r.question);
            let answer = tokenize(&r.answer);
            let ok = r.label <= 1 && !question.is_empty() && !answer.is_empty();
            ok.then(|| QAExample {
                qid: r.qid,
                question,
                aid: r.aid,
                answer,
                label: r.label,
                participant: participant.to_string(),
            })
        });
        match parsed {
            Some(e) => out.push(e),
            None => malformed += 1,
        }
    }
    if lines > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            message: format!("{malformed} of {lines} lines are malformed"),
        });
    }
    Ok(out)
}

/// Loads every participant directory under `root`, in name order.
pub fn ingest(root: &Path) -> Result<Corpus> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    let mut participants = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Ingest {
                path: dir.clone(),
                message: "participant directory name is not valid UTF-8".into(),
            })?
            .to_string();
        let mut splits = Splits::default();
        for (split, slot) in
            SPLITS
                .iter()
                .zip([&mut splits.train, &mut splits.dev, &mut splits.test])
        {
            *slot = read_jsonl(&dir.join(format!("{split}.jsonl")), &name)?;
        }
        let profile_path = dir.join("profile.json");
        let profile = if profile_path.exists() {
            let text =
                fs::read_to_string(&profile_path).map_err(|e| Error::io(&profile_path, e))?;
            let p: ParticipantProfile = serde_json::from_str(&text).map_err(|e| Error::Ingest {
                path: profile_path.clone(),
                message: e.to_string(),
            })?;
            Some(p)
        } else {
            None
        };
        participants.push(ParticipantCorpus {
            profile,
            name,
            splits,
        });
    }
    Ok(Corpus { participants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generator::build_corpus;

    #[test]
    fn write_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = CorpusConfig::desk(0.02, 4);
        let corpus = build_corpus(&config).unwrap();
        write_corpus(dir.path(), &corpus, Some(&config)).unwrap();
        assert_eq!(ingest(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn empty_directory_is_an_empty_federation() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest(dir.path()).unwrap().participants.is_empty());
    }

    #[test]
    fn single_line_is_parsed_and_lowercased() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(
            &path,
            r#"{"qid": 7, "question": "What IS it", "aid": 9, "answer": "An  answer", "label": 1}"#,
        )
        .unwrap();
        let rows = read_jsonl(&path, "p").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].question, vec!["what", "is", "it"]);
        assert_eq!(rows[0].answer, vec!["an", "answer"]);
        assert_eq!((rows[0].qid, rows[0].aid, rows[0].label), (7, 9, 1));
    }

    #[test]
    fn malformed_share_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let good = r#"{"qid": 1, "question": "q", "aid": 2, "answer": "a", "label": 0}"#;
        let path = dir.path().join("x.jsonl");
        let mut lines = vec![good; 10];
        lines.push("not json");
        fs::write(&path, lines.join("\n")).unwrap();
        assert_eq!(read_jsonl(&path, "p").unwrap().len(), 10);
        lines.push(r#"{"qid": 1, "question": "q", "aid": 2, "answer": "a", "label": 3}"#);
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_jsonl(&path, "p"), Err(Error::Ingest { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error_with_path() {
        let err = read_jsonl(Path::new("/nonexistent/x.jsonl"), "p").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }
}
