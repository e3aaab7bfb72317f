//! The federated protocol, simulated in one process.
//!
//! The server keeps only the shared segment θ. Each round it samples
//! clients, sends them θ as checkpoint bytes, lets each run its local
//! epochs, receives their shared segments back as bytes and replaces θ with
//! the unweighted mean. Private entries (patches and any private top
//! layers) are refused by the message encoder, so they cannot reach the
//! server even by mistake.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{self, Corpus, QuestionGroup, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_participant, MetricsReport, ParticipantMetrics};
use crate::model::config::issues_to_result;
use crate::model::{init_parameters, Model, ModelConfig};
use crate::params::ParameterSet;
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::Tensor;
use crate::trainer::{self, batches_per_epoch, build_pairs, AdamConfig, OptimizerState, TrainPair};

fn default_batch_size() -> usize {
    8
}

fn default_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_ratio() -> f64 {
    1.0
}

fn default_negatives() -> usize {
    trainer::NEGATIVES_PER_QUESTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    /// Local epochs between two aggregations.
    #[serde(default = "default_every")]
    pub aggregate_every_k_epochs: usize,
    /// Clients drawn per round; all clients when absent.
    #[serde(default)]
    pub sample_size: Option<usize>,
    /// When false every client trains alone on its own copy and nothing is
    /// averaged: the isolated reference.
    #[serde(default = "default_true")]
    pub aggregate: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Per-participant batch sizes overriding `batch_size`.
    #[serde(default)]
    pub batch_sizes: BTreeMap<String, usize>,
    /// Share of each participant's training questions kept.
    #[serde(default = "default_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_negatives")]
    pub negatives_per_question: usize,
    pub optimizer: AdamConfig,
}

impl FederationConfig {
    pub fn new(rounds: usize, lr: f64) -> Self {
        Self {
            rounds,
            aggregate_every_k_epochs: 1,
            sample_size: None,
            aggregate: true,
            batch_size: default_batch_size(),
            batch_sizes: BTreeMap::new(),
            train_ratio: 1.0,
            negatives_per_question: default_negatives(),
            optimizer: AdamConfig::with_lr(lr),
        }
    }

    pub fn issues(&self, prefix: &str, clients: Option<usize>) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |f: &str, m: String| out.push((format!("{prefix}{f}"), m));
        if !(1..=3).contains(&self.aggregate_every_k_epochs) {
            bad("aggregate_every_k_epochs", "must be 1, 2 or 3".into());
        }
        if let Some(k) = self.sample_size {
            if k == 0 || clients.is_some_and(|t| k > t) {
                bad(
                    "sample_size",
                    format!(
                        "must be in [1, {}]",
                        clients.map_or("T".into(), |t| t.to_string())
                    ),
                );
            }
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive".into());
        }
        for (name, &b) in &self.batch_sizes {
            if b == 0 {
                bad(&format!("batch_sizes.{name}"), "must be positive".into());
            }
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            bad("train_ratio", "must be in (0, 1]".into());
        }
        if self.negatives_per_question == 0 {
            bad("negatives_per_question", "must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            bad("optimizer.lr", "must be a finite non-negative rate".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            bad("optimizer.beta1", "moment decays must be in [0, 1)".into());
        }
        if o.eps.is_nan() || o.eps <= 0.0 {
            bad("optimizer.eps", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            bad("optimizer.warmup_fraction", "must be in [0, 1]".into());
        }
        out
    }

    pub fn batch_size_for(&self, participant: &str) -> usize {
        self.batch_sizes
            .get(participant)
            .copied()
            .unwrap_or(self.batch_size)
    }
}

/// Encodes a parameter set as message bytes. Any private entry is refused.
pub fn encode_message(params: &ParameterSet) -> Result<Vec<u8>> {
    if let Some(e) = params.entries().iter().find(|e| e.private) {
        return Err(Error::Privacy(e.name.clone()));
    }
    Ok(checkpoint::encode(None, params))
}

pub fn decode_message(bytes: &[u8]) -> Result<ParameterSet> {
    let params = checkpoint::decode(bytes)?.params;
    if let Some(e) = params.entries().iter().find(|e| e.private) {
        return Err(Error::Privacy(e.name.clone()));
    }
    Ok(params)
}

/// A client's upload as it crosses to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client: u64,
    pub round: usize,
    pub bytes: Vec<u8>,
}

pub struct ServerState {
    pub theta: ParameterSet,
    pub round: usize,
    pub config: FederationConfig,
    pub clients: Vec<u64>,
}

pub struct ClientState {
    pub id: u64,
    pub name: String,
    /// Θ_t: shared entries θ_t followed by the private β_t, in manifest order.
    pub params: ParameterSet,
    pub opt: OptimizerState,
    pub pairs: Vec<TrainPair>,
    pub pair_warnings: usize,
    pub train: Vec<QuestionGroup>,
    pub dev: Vec<QuestionGroup>,
    pub test: Vec<QuestionGroup>,
}

/// First shared entry of `params` whose name or shape differs from `theta`.
fn shared_divergence(params: &ParameterSet, theta: &ParameterSet) -> Option<String> {
    let shared: Vec<_> = params.entries().iter().filter(|e| !e.private).collect();
    for (a, b) in shared.iter().zip(theta.entries()) {
        if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
            return Some(b.name.clone());
        }
    }
    match shared.len().cmp(&theta.len()) {
        std::cmp::Ordering::Less => Some(theta.entries()[shared.len()].name.clone()),
        std::cmp::Ordering::Greater => Some(shared[theta.len()].name.clone()),
        std::cmp::Ordering::Equal => None,
    }
}

/// Sends θ to each selected client: θ_t becomes a deep copy of θ, β_t is
/// left alone. Every schema is checked before any client is touched.
pub fn distribute(
    theta: &ParameterSet,
    clients: &mut [ClientState],
    selected: &[u64],
) -> Result<()> {
    for c in clients.iter().filter(|c| selected.contains(&c.id)) {
        if let Some(name) = shared_divergence(&c.params, theta) {
            return Err(Error::Protocol(format!(
                "client {} diverges from the server at `{name}`",
                c.id
            )));
        }
    }
    let bytes = encode_message(theta)?;
    for c in clients.iter_mut().filter(|c| selected.contains(&c.id)) {
        let received = decode_message(&bytes)?;
        c.params.overwrite_from(&received)?;
    }
    Ok(())
}

/// Elementwise mean of the uploads, summed in ascending client id. Values on
/// which every update agrees bitwise are copied through unchanged.
pub fn aggregate(updates: &[(u64, ParameterSet)]) -> Result<ParameterSet> {
    let mut order: Vec<&(u64, ParameterSet)> = updates.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let (_, first) = order
        .first()
        .ok_or_else(|| Error::Protocol("no updates to aggregate".into()))?;
    for (id, u) in &order[1..] {
        if let Some(name) = first.schema_divergence(u) {
            return Err(Error::Protocol(format!(
                "update from client {id} diverges at `{name}`"
            )));
        }
    }
    let n = order.len() as f64;
    let mut out = ParameterSet::new();
    for (pid, e) in first.entries().iter().enumerate() {
        let len = e.tensor.len();
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let x0 = e.tensor.data()[i];
            if order
                .iter()
                .all(|(_, u)| u.tensor(pid).data()[i].to_bits() == x0.to_bits())
            {
                data.push(x0);
                continue;
            }
            let mut sum = 0.0;
            for (_, u) in &order {
                sum += u.tensor(pid).data()[i];
            }
            data.push(sum / n);
        }
        out.push(
            e.name.clone(),
            Tensor::new(e.tensor.shape().to_vec(), data)?,
            false,
        )?;
    }
    Ok(out)
}

/// Uniform draw of `size` distinct client ids, returned in ascending order.
pub fn sample_clients<R: Rng>(clients: &[u64], size: usize, rng: &mut R) -> Vec<u64> {
    let mut picked: Vec<u64> = index::sample(rng, clients.len(), size.min(clients.len()))
        .into_iter()
        .map(|i| clients[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client: u64,
    pub participant: String,
    pub sampled: bool,
    /// Mean hinge loss of each local epoch run this round.
    pub epoch_losses: Vec<f64>,
    pub dev_map: f64,
    pub dev_mrr: f64,
    /// Excluded from aggregation because training produced non-finite values.
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<u64>,
    pub clients: Vec<ClientRoundReport>,
    pub overall_map: f64,
    pub overall_mrr: f64,
    pub truncated_inputs: usize,
}

/// Everything needed to run one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub model: ModelConfig,
    pub federation: FederationConfig,
}

impl ExperimentSpec {
    pub fn validate(&self, clients: usize) -> Result<()> {
        let mut issues = self.model.issues("model.");
        issues.extend(self.federation.issues("federation.", Some(clients)));
        issues_to_result(issues)
    }
}

/// A federation in progress: server, clients and the shared model layout.
pub struct Federation {
    pub spec: ExperimentSpec,
    pub model: Model,
    pub vocab: Vocabulary,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    record_uploads: bool,
    uploads: Vec<Upload>,
}

fn dev_metrics(
    name: &str,
    model: &Model,
    params: &ParameterSet,
    groups: &[QuestionGroup],
) -> Result<(ParticipantMetrics, usize)> {
    evaluate_participant(name, model, params, groups)
}

impl Federation {
    /// Builds the vocabulary from every training split, then the server and
    /// one client per participant (ids in participant order).
    pub fn new(spec: ExperimentSpec, corpus: &Corpus) -> Result<Self> {
        if corpus.participants.is_empty() {
            return Err(Error::config("corpus", "the corpus holds no participant"));
        }
        let vocab = Vocabulary::from_training(corpus);
        let mut spec = spec;
        spec.model.vocab_size = vocab.len();
        spec.validate(corpus.participants.len())?;
        for (i, p) in corpus.participants.iter().enumerate() {
            for (split, rows) in [
                ("train", &p.splits.train),
                ("dev", &p.splits.dev),
                ("test", &p.splits.test),
            ] {
                if rows.is_empty() {
                    return Err(Error::config(
                        format!("corpus.{}.{split}", p.name),
                        format!("participant {i} has an empty {split} split"),
                    ));
                }
            }
        }

        let seed = spec.seed;
        let config = &spec.model;
        let mut server_rng = stream(seed, Purpose::ServerInit, 0, 0);
        let mut unused = stream(seed, Purpose::PatchInit, u64::MAX, 0);
        let template = init_parameters(config, &mut server_rng, &mut unused);
        let model = Model::new(config, &template)?;
        let theta = template.shared_segment();

        let fed = &spec.federation;
        let rounds = fed.rounds as u64;
        let mut clients = Vec::with_capacity(corpus.participants.len());
        for (i, p) in corpus.participants.iter().enumerate() {
            let id = i as u64;
            let mut backbone_rng = stream(seed, Purpose::ServerInit, 0, 0);
            let mut patch_rng = stream(seed, Purpose::PatchInit, id, 0);
            let params = init_parameters(config, &mut backbone_rng, &mut patch_rng);

            let mut sub_rng = stream(seed, Purpose::Split, id, 1);
            let train_rows = corpus::subsample(&p.splits.train, fed.train_ratio, &mut sub_rng);
            let train = corpus::group(&train_rows, &vocab);
            let mut pair_rng = stream(seed, Purpose::Shuffle, id, u64::MAX);
            let set = build_pairs(&train, fed.negatives_per_question, &p.name, &mut pair_rng);

            let per_epoch = batches_per_epoch(set.pairs.len(), fed.batch_size_for(&p.name)) as u64;
            let total = fed.aggregate_every_k_epochs as u64 * rounds * per_epoch;
            let opt = OptimizerState::new(fed.optimizer, &params, total);
            clients.push(ClientState {
                id,
                name: p.name.clone(),
                params,
                opt,
                pairs: set.pairs,
                pair_warnings: set.warnings,
                train,
                dev: corpus::group(&p.splits.dev, &vocab),
                test: corpus::group(&p.splits.test, &vocab),
            });
        }
        let server = ServerState {
            theta,
            round: 0,
            config: fed.clone(),
            clients: clients.iter().map(|c| c.id).collect(),
        };
        let mut fed = Self {
            spec,
            model,
            vocab,
            server,
            clients,
            record_uploads: false,
            uploads: Vec::new(),
        };
        if !fed.spec.federation.aggregate {
            // isolated clients start from the same θ once and never sync again
            let all = fed.server.clients.clone();
            distribute(&fed.server.theta, &mut fed.clients, &all)?;
        }
        Ok(fed)
    }

    /// Keeps a copy of every upload's bytes for inspection.
    pub fn record_uploads(&mut self, on: bool) {
        self.record_uploads = on;
    }

    pub fn uploads(&self) -> &[Upload] {
        &self.uploads
    }

    fn shuffle_rng(&self, client: u64, round: usize, epoch: usize) -> StreamRng {
        stream(
            self.spec.seed,
            Purpose::Shuffle,
            client,
            (round * 4 + epoch) as u64,
        )
    }

    /// Parameters a client would be evaluated with: its own Θ_t in isolation,
    /// otherwise the current θ combined with its β_t.
    pub fn evaluation_params(&self, client: &ClientState) -> Result<ParameterSet> {
        let mut p = client.params.clone();
        if self.spec.federation.aggregate {
            p.overwrite_from(&self.server.theta)?;
        }
        Ok(p)
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.server.round;
        let fed = self.spec.federation.clone();
        let sampled = match fed.sample_size {
            Some(k) if fed.aggregate => {
                let mut rng = stream(self.spec.seed, Purpose::Sampling, 0, round as u64);
                sample_clients(&self.server.clients, k, &mut rng)
            }
            _ => self.server.clients.clone(),
        };
        if fed.aggregate {
            distribute(&self.server.theta, &mut self.clients, &sampled)?;
        }

        let mut reports = Vec::with_capacity(self.clients.len());
        let mut updates = Vec::new();
        let mut truncated = 0;
        for idx in 0..self.clients.len() {
            let id = self.clients[idx].id;
            let is_sampled = sampled.contains(&id);
            let mut losses = Vec::new();
            let mut flag_reason = None;
            if is_sampled {
                for epoch in 0..fed.aggregate_every_k_epochs {
                    let mut rng = self.shuffle_rng(id, round, epoch);
                    let c = &mut self.clients[idx];
                    let batch = fed.batch_size_for(&c.name);
                    match trainer::train_epoch(
                        &self.model,
                        &mut c.params,
                        &mut c.opt,
                        &c.pairs,
                        batch,
                        &mut rng,
                    ) {
                        Ok(stats) => {
                            truncated += stats.truncated;
                            losses.push(stats.mean_loss);
                        }
                        Err(Error::NonFiniteGradient(name)) => {
                            flag_reason = Some(format!("non-finite gradient in `{name}`"));
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                let c = &self.clients[idx];
                if flag_reason.is_none() && !c.params.is_finite() {
                    flag_reason = Some("non-finite parameters".into());
                }
                if fed.aggregate && flag_reason.is_none() {
                    let bytes = encode_message(&c.params.shared_segment())?;
                    let received = decode_message(&bytes)?;
                    if self.record_uploads {
                        self.uploads.push(Upload {
                            client: id,
                            round,
                            bytes,
                        });
                    }
                    updates.push((id, received));
                }
            }
            reports.push(ClientRoundReport {
                client: id,
                participant: self.clients[idx].name.clone(),
                sampled: is_sampled,
                epoch_losses: losses,
                dev_map: f64::NAN,
                dev_mrr: f64::NAN,
                flagged: flag_reason.is_some(),
                flag_reason,
            });
        }
        if fed.aggregate && !updates.is_empty() {
            self.server.theta = aggregate(&updates)?;
        }
        self.server.round += 1;

        let mut metrics = Vec::with_capacity(self.clients.len());
        for (c, r) in self.clients.iter().zip(reports.iter_mut()) {
            let params = self.evaluation_params(c)?;
            let (m, cut) = dev_metrics(&c.name, &self.model, &params, &c.dev)?;
            truncated += cut;
            r.dev_map = m.map;
            r.dev_mrr = m.mrr;
            metrics.push(m);
        }
        let report = MetricsReport::new(metrics);
        Ok(RoundReport {
            round,
            sampled,
            clients: reports,
            overall_map: report.overall_map,
            overall_mrr: report.overall_mrr,
            truncated_inputs: truncated,
        })
    }

    /// Sends θ to every client one last time (unless isolated) and scores each
    /// client's test split with its own Θ_t.
    pub fn finish(&mut self) -> Result<MetricsReport> {
        if self.spec.federation.aggregate {
            let all = self.server.clients.clone();
            distribute(&self.server.theta, &mut self.clients, &all)?;
        }
        self.test_report()
    }

    /// Test metrics of every client with its current Θ_t.
    pub fn test_report(&self) -> Result<MetricsReport> {
        let mut per = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            per.push(evaluate_participant(&c.name, &self.model, &c.params, &c.test)?.0);
        }
        Ok(MetricsReport::new(per))
    }

    pub fn client(&self, name: &str) -> Option<&ClientState> {
        self.clients.iter().find(|c| c.name == name)
    }
}

/// Result of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundReport>,
    pub test: MetricsReport,
}

/// Runs every round then the final test evaluation.
pub fn run_experiment(
    spec: ExperimentSpec,
    corpus: &Corpus,
) -> Result<(Federation, ExperimentResult)> {
    let mut fed = Federation::new(spec, corpus)?;
    let mut rounds = Vec::with_capacity(fed.spec.federation.rounds);
    for _ in 0..fed.spec.federation.rounds {
        rounds.push(fed.run_round()?);
    }
    let test = fed.finish()?;
    Ok((fed, ExperimentResult { rounds, test }))
}
