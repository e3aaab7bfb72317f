//! The `generate`, `run` and `eval` commands as library functions.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml                      resolved run config (vocab_size filled in)
//! metrics.jsonl                    one line per (round, client), then one per round
//! checkpoints/theta-round-NNN.ckpt server θ after each round
//! checkpoints/final/<name>.ckpt    each client's final Θ_t, with the model config
//! checkpoints/final/vocab.json     token list the checkpoints were trained with
//! report.json                      final test MetricsReport
//! summary.txt                      plain-text summary table
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use patchfed_core::checkpoint;
use patchfed_core::corpus::generator::build_corpus;
use patchfed_core::corpus::{self, Corpus, CorpusConfig, Vocabulary};
use patchfed_core::evaluation::{evaluate_participant, MetricsReport};
use patchfed_core::federation::{ClientRoundReport, Federation, RoundReport};
use patchfed_core::model::{parameter_count, patch_parameter_count, Model};
use patchfed_core::Error;

use crate::config::RunConfig;
use crate::error::Result;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Validates `config`, generates the corpus and writes it under `out`.
pub fn generate(config: &CorpusConfig, out: &Path) -> Result<Corpus> {
    config.validate()?;
    let corpus = build_corpus(config)?;
    corpus::io::write_corpus(out, &corpus, Some(config))?;
    Ok(corpus)
}

/// Loads the corpus named by a run config.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    if !path.is_dir() {
        return Err(Error::config(
            "corpus",
            format!("{} is not a corpus directory", path.display()),
        )
        .into());
    }
    Ok(corpus::io::ingest(path)?)
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn final_checkpoint_dir(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("final")
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub rounds: Vec<RoundReport>,
    pub report: MetricsReport,
    pub parameters: usize,
    pub patch_parameters: usize,
    pub summary: String,
}

#[derive(Serialize)]
struct ClientLine<'a> {
    round: usize,
    #[serde(flatten)]
    client: &'a ClientRoundReport,
}

#[derive(Serialize)]
struct RoundLine<'a> {
    round: usize,
    overall_map: f64,
    overall_mrr: f64,
    sampled: &'a [u64],
    truncated_inputs: usize,
}

/// JSON lines for one round: every client, then the round's overall line.
pub fn metrics_lines(r: &RoundReport) -> String {
    let mut out = String::new();
    for c in &r.clients {
        let line = ClientLine {
            round: r.round,
            client: c,
        };
        out.push_str(&serde_json::to_string(&line).expect("metrics line serializes"));
        out.push('\n');
    }
    let line = RoundLine {
        round: r.round,
        overall_map: r.overall_map,
        overall_mrr: r.overall_mrr,
        sampled: &r.sampled,
        truncated_inputs: r.truncated_inputs,
    };
    out.push_str(&serde_json::to_string(&line).expect("metrics line serializes"));
    out.push('\n');
    out
}

/// Runs the experiment described by `config` on `corpus`, writing every
/// artefact under `out`. The metrics log is appended round by round.
pub fn run(config: &RunConfig, corpus: &Corpus, out: &Path, label: &str) -> Result<RunOutcome> {
    config.validate(Some(corpus.participants.len()))?;
    let mut fed = Federation::new(config.spec(), corpus)?;
    let mut resolved = config.clone();
    resolved.model = fed.spec.model.clone();
    if let Ok(abs) = fs::canonicalize(&config.corpus) {
        resolved.corpus = abs;
    }

    let ckpt = checkpoint_dir(out);
    let final_dir = final_checkpoint_dir(out);
    create_dir(&final_dir)?;
    write(&out.join(CONFIG_FILE), resolved.to_toml())?;

    let metrics_path = out.join(METRICS_FILE);
    let mut log = String::new();
    let mut rounds = Vec::with_capacity(config.federation.rounds);
    for _ in 0..config.federation.rounds {
        let r = fed.run_round()?;
        log.push_str(&metrics_lines(&r));
        write(&metrics_path, &log)?;
        let path = ckpt.join(format!("theta-round-{:03}.ckpt", r.round + 1));
        checkpoint::write(&path, None, &fed.server.theta)?;
        rounds.push(r);
    }
    write(&metrics_path, &log)?;
    let report = fed.finish()?;

    write(&final_dir.join(VOCAB_FILE), fed.vocab.to_json())?;
    for c in &fed.clients {
        let path = final_dir.join(format!("{}.ckpt", c.name));
        checkpoint::write(&path, Some(&fed.spec.model), &c.params)?;
    }
    write(&out.join(REPORT_FILE), report.to_json())?;

    let model = &fed.spec.model;
    let parameters = parameter_count(model);
    let patch_parameters = patch_parameter_count(model);
    let summary = summary_text(
        label,
        &resolved,
        &rounds,
        &report,
        parameters,
        patch_parameters,
    );
    write(&out.join(SUMMARY_FILE), &summary)?;
    Ok(RunOutcome {
        config: resolved,
        rounds,
        report,
        parameters,
        patch_parameters,
        summary,
    })
}

fn summary_text(
    label: &str,
    config: &RunConfig,
    rounds: &[RoundReport],
    report: &MetricsReport,
    parameters: usize,
    patch_parameters: usize,
) -> String {
    let m = &config.model;
    let f = &config.federation;
    let mut s = String::new();
    let _ = writeln!(s, "run {label}: seed {}, {} rounds", config.seed, f.rounds);
    let _ = writeln!(
        s,
        "model: d_model {}, {} layers ({} shared), insertion {}, patch {} (d_patch {})",
        m.d_model,
        m.n_layers,
        m.n_shared_layers,
        m.insertion_mode.as_str(),
        m.patch_kind.as_str(),
        m.d_patch
    );
    let sampling = f.sample_size.map_or("all".to_string(), |k| k.to_string());
    let _ = writeln!(
        s,
        "federation: aggregate {}, every {} epoch(s), clients per round {sampling}, train ratio {}",
        f.aggregate, f.aggregate_every_k_epochs, f.train_ratio
    );
    let _ = writeln!(
        s,
        "parameters per client: {parameters} total, {patch_parameters} in patches"
    );
    if let Some(last) = rounds.last() {
        let _ = writeln!(
            s,
            "last round dev: overall MAP {:.4}, MRR {:.4}",
            last.overall_map, last.overall_mrr
        );
    }
    let flagged: usize = rounds
        .iter()
        .map(|r| r.clients.iter().filter(|c| c.flagged).count())
        .sum();
    let truncated: usize = rounds.iter().map(|r| r.truncated_inputs).sum();
    let _ = writeln!(
        s,
        "flagged client updates: {flagged}, truncated inputs: {truncated}"
    );
    let excluded: usize = report.participants.iter().map(|p| p.excluded).sum();
    let _ = writeln!(
        s,
        "test questions without a positive (excluded): {excluded}"
    );
    s.push('\n');
    s.push_str(&report.table(label));
    s
}

/// Result of evaluating a checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Patch values loaded per participant; zero for the FedAvg configuration.
    pub patch_parameters: usize,
}

/// Scores every participant's test split with `<dir>/<participant>.ckpt`.
///
/// The vocabulary comes from `<dir>/vocab.json` when present and is rebuilt
/// from the corpus otherwise.
pub fn eval(dir: &Path, corpus: &Corpus) -> Result<EvalOutcome> {
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        Vocabulary::from_json(&crate::config::read(&vocab_path)?)?
    } else {
        Vocabulary::from_training(corpus)
    };
    let mut per = Vec::with_capacity(corpus.participants.len());
    let mut patch_parameters = 0;
    for p in &corpus.participants {
        let path = dir.join(format!("{}.ckpt", p.name));
        let ck = checkpoint::read(&path)?;
        let config = ck.config.ok_or_else(|| {
            Error::Checkpoint(format!("{} carries no model config", path.display()))
        })?;
        let rows = ck.params.get("embed.token").map_or(0, |t| t.rows());
        if rows != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `embed.token` of {} has {rows} rows but the vocabulary has {} tokens",
                path.display(),
                vocab.len()
            ))
            .into());
        }
        let model = Model::new(&config, &ck.params)?;
        patch_parameters = patch_parameter_count(&config);
        let test = corpus::group(&p.splits.test, &vocab);
        per.push(evaluate_participant(&p.name, &model, &ck.params, &test)?.0);
    }
    Ok(EvalOutcome {
        report: MetricsReport::new(per),
        patch_parameters,
    })
}
