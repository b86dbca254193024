//! Server-side orchestration: initialization, distribution, local training,
//! sharpness-aware scoring and hierarchical aggregation, plus the
//! leave-one-domain-out harness.
//!
//! Distribution sends the global task model to each client's student and the
//! global generator to its generator. The teacher stays on the client: it is
//! seeded from the student once, when warmup ends, and afterwards changes
//! only through EMA and within-client dense averaging.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, EvalResult};
use crate::model::{ModelSpec, Networks};
use crate::ndag::{self, BatchTrace, ClientModels, NdagHyper};
use crate::params::{param_mean, ParamVector};
use crate::rng::{self, derive_seed, stream};
use crate::sha::{self, AggregationWeights, ScoredSnapshot, ShaHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Feddag,
    NoNdag,
    NoSha,
    Fedavg,
}

impl Mode {
    /// Ablation order: full method, each component removed, both removed.
    pub const ALL: [Mode; 4] = [Mode::Feddag, Mode::NoNdag, Mode::NoSha, Mode::Fedavg];

    pub fn ndag(self) -> bool {
        matches!(self, Mode::Feddag | Mode::NoSha)
    }

    pub fn sha(self) -> bool {
        matches!(self, Mode::Feddag | Mode::NoNdag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Feddag => "feddag",
            Mode::NoNdag => "no_ndag",
            Mode::NoSha => "no_sha",
            Mode::Fedavg => "fedavg",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Feddag => "FedDAG",
            Mode::NoNdag => "w/o NDAG",
            Mode::NoSha => "w/o SHA",
            Mode::Fedavg => "w/o Both",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode `{s}` (expected feddag, no_ndag, no_sha or fedavg)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub ndag: NdagHyper,
    pub sha: ShaHyper,
    pub mode: Mode,
    pub seed: u64,
    /// Evaluate the global model on the held-out domain after every round.
    /// Analysis only; never feeds back into training.
    pub probe_every_round: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be positive".into()));
        }
        if self.warmup_rounds >= self.rounds {
            return Err(Error::InvalidArgument(format!(
                "warmup_rounds ({}) must be smaller than rounds ({})",
                self.warmup_rounds, self.rounds
            )));
        }
        self.ndag.validate()?;
        self.sha.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global_task: ParamVector,
    pub global_gen: ParamVector,
    /// Rounds completed so far.
    pub round: usize,
    /// Raw scored uploads per client, oldest first.
    pub history: Vec<Vec<ScoredSnapshot>>,
}

/// Seeded initialization of the global task model and generator.
pub fn init(config: &FederationConfig, nets: &Networks, n_clients: usize) -> ServerState {
    ServerState {
        global_task: nets.task.init(&mut stream(config.seed, &[rng::TAG_INIT_TASK])),
        global_gen: nets.gen.init(&mut stream(config.seed, &[rng::TAG_INIT_GEN])),
        round: 0,
        history: vec![Vec::new(); n_clients],
    }
}

pub struct Client<'a> {
    /// Domain id of the client's data.
    pub id: usize,
    pub data: &'a DomainDataset,
    pub models: ClientModels,
}

pub fn make_clients<'a>(server: &ServerState, datasets: &[&'a DomainDataset]) -> Vec<Client<'a>> {
    datasets
        .iter()
        .map(|d| Client {
            id: d.domain,
            data: d,
            models: ClientModels::new(server.global_task.clone(), server.global_gen.clone()),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub l_cls_g: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_cls_s: f64,
    pub l_sim: Option<f64>,
    pub raw_score: Option<f64>,
    pub post_dense_score: Option<f64>,
    pub weight: f64,
    pub degenerate_samples: usize,
    #[serde(skip)]
    pub trace: Vec<BatchTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    pub warmup: bool,
    pub clients: Vec<ClientRoundMetrics>,
    /// Mean cross-entropy of the new global model over all source validation samples.
    pub source_val_loss: f64,
    pub source_val_acc: f64,
    pub target: Option<EvalResult>,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Validation sets client `i` is scored against this round.
fn scoring_sets<'c>(clients: &[Client<'c>], i: usize, sha: &ShaHyper, subset: &[usize]) -> Vec<&'c [Sample]> {
    let mut sets: Vec<&[Sample]> = subset
        .iter()
        .filter(|&&j| sha.include_self || j != i)
        .map(|&j| clients[j].data.val.as_slice())
        .collect();
    if sets.is_empty() {
        // A lone client with include_self disabled still needs a referee.
        sets.push(clients[i].data.val.as_slice());
    }
    sets
}

fn eval_subset(n: usize, sha: &ShaHyper, seed: u64, round: usize) -> Vec<usize> {
    use rand::seq::index::sample;
    let k = sha.eval_clients_per_round;
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let mut picked = sample(&mut stream(seed, &[rng::TAG_EVAL_SUBSET, round as u64]), n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Executes one communication round and advances `server.round`.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [Client<'_>],
    config: &FederationConfig,
    nets: &Networks,
) -> Result<RoundMetrics> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("federation has no clients".into()));
    }
    let t = server.round;
    let warmup = t < config.warmup_rounds;
    let ndag_active = !warmup && config.mode.ndag();
    let sha_active = !warmup && config.mode.sha();

    // Distribution: F -> student, G -> generator. The teacher is seeded from
    // the student exactly once, on the first round after warmup.
    for c in clients.iter_mut() {
        c.models.student = server.global_task.clone();
        c.models.generator = server.global_gen.clone();
        c.models.student_opt.reset();
        c.models.gen_opt.reset();
        if !warmup && t == config.warmup_rounds {
            c.models.teacher = c.models.student.clone();
        }
    }

    // Local training.
    let outputs = config.exec.map_mut(clients, |_, c| {
        let seed = derive_seed(config.seed, &[rng::TAG_BATCHES, t as u64, c.id as u64]);
        ndag::client_round(nets, &mut c.models, &c.data.train, &config.ndag, ndag_active, seed).map_err(|e| {
            Error::Client {
                client: c.id,
                source: Box::new(e),
            }
        })
    });
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = clients.len();
    let mut raw_scores = vec![None; n];
    let mut dense_scores = vec![None; n];
    let weights = if sha_active {
        let subset = eval_subset(n, &config.sha, config.seed, t);
        let clients_ref: &[Client<'_>] = clients;
        let scores = config.exec.map(clients_ref, |i, c| -> Result<f64> {
            let perturbed = sha::perturb_model(&c.models.teacher, &outputs[i].last_batch_grad, config.sha.rho)?;
            let sets = scoring_sets(clients_ref, i, &config.sha, &subset);
            let score = sha::evaluate_score(&nets.task, &perturbed.params, &sets)?;
            if score.near_perfect {
                log::warn!("client {} scored near-perfect; score capped", c.id);
            }
            Ok(score.value)
        });
        let mut post = Vec::with_capacity(n);
        for (i, (c, s)) in clients.iter_mut().zip(scores).enumerate() {
            let s = s.map_err(|e| Error::Client {
                client: c.id,
                source: Box::new(e),
            })?;
            let current = ScoredSnapshot {
                params: c.models.teacher.clone(),
                score: s,
                round: t,
            };
            let merged =
                sha::within_client_aggregate(current, &mut server.history[i], config.sha.k, config.sha.history_cap)?;
            c.models.teacher = merged.params;
            raw_scores[i] = Some(s);
            dense_scores[i] = Some(merged.score);
            post.push(merged.score);
        }
        let w = sha::softmax_weights(&post, config.sha.beta)?;
        let teachers: Vec<&ParamVector> = clients.iter().map(|c| &c.models.teacher).collect();
        let gens: Vec<&ParamVector> = clients.iter().map(|c| &c.models.generator).collect();
        let (task, gen) = sha::across_client_aggregate(&teachers, &gens, &w)?;
        server.global_task = task;
        if ndag_active {
            server.global_gen = gen;
        }
        w
    } else {
        server.global_task = param_mean(clients.iter().map(|c| &c.models.teacher))?;
        if ndag_active {
            server.global_gen = param_mean(clients.iter().map(|c| &c.models.generator))?;
        }
        AggregationWeights::uniform(n)
    };
    server.round += 1;

    let (source_val_loss, source_val_acc) = source_validation(nets, &server.global_task, clients)?;
    let clients_metrics = clients
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (c, out))| ClientRoundMetrics {
            client: c.id,
            l_cls_g: mean_of(out.trace.iter().filter_map(|b| b.l_cls_g)),
            l_dis: mean_of(out.trace.iter().filter_map(|b| b.l_dis)),
            l_cls_s: mean_of(out.trace.iter().map(|b| b.l_cls_s)).unwrap_or(0.0),
            l_sim: mean_of(out.trace.iter().filter_map(|b| b.l_sim)),
            raw_score: raw_scores[i],
            post_dense_score: dense_scores[i],
            weight: weights.as_slice()[i],
            degenerate_samples: out.degenerate_samples,
            trace: out.trace,
        })
        .collect();
    Ok(RoundMetrics {
        round: server.round,
        warmup,
        clients: clients_metrics,
        source_val_loss,
        source_val_acc,
        target: None,
    })
}

fn source_validation(nets: &Networks, params: &ParamVector, clients: &[Client<'_>]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for c in clients {
        for s in &c.data.val {
            let out = nets.task.forward(params, &s.x)?;
            loss += crate::losses::loss_cls(&out.logits, s.y)?;
            let pred = out
                .logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(pred == s.y);
            n += 1;
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// A server with its clients, trained round by round.
pub struct Federation<'a> {
    pub config: FederationConfig,
    pub nets: Networks,
    pub server: ServerState,
    pub clients: Vec<Client<'a>>,
}

impl<'a> Federation<'a> {
    pub fn new(config: FederationConfig, spec: &ModelSpec, datasets: &[&'a DomainDataset]) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if datasets.is_empty() {
            return Err(Error::InvalidArgument("federation needs at least one client".into()));
        }
        for d in datasets {
            if d.train.is_empty() || d.val.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "domain {} has an empty split",
                    d.domain
                )));
            }
            if let Some(s) = d
                .all()
                .find(|s| s.x.len() != spec.task.input_dim || s.y >= spec.task.num_classes)
            {
                return Err(Error::InvalidArgument(format!(
                    "domain {} sample (dim {}, label {}) does not fit the architecture",
                    d.domain,
                    s.x.len(),
                    s.y
                )));
            }
        }
        let nets = spec.build();
        let server = init(&config, &nets, datasets.len());
        let clients = make_clients(&server, datasets);
        Ok(Federation {
            config,
            nets,
            server,
            clients,
        })
    }

    pub fn step(&mut self) -> Result<RoundMetrics> {
        run_round(&mut self.server, &mut self.clients, &self.config, &self.nets)
    }

    /// Runs all configured rounds. `target`, when given together with
    /// `probe_every_round`, is evaluated after each round; otherwise it is
    /// evaluated after the final round only.
    pub fn run(&mut self, target: Option<&[Sample]>) -> Result<Vec<RoundMetrics>> {
        let mut log = Vec::with_capacity(self.config.rounds);
        while self.server.round < self.config.rounds {
            let mut m = self.step()?;
            let last = self.server.round == self.config.rounds;
            if let Some(t) = target {
                if self.config.probe_every_round || last {
                    m.target = Some(metrics::evaluate(&self.nets.task, &self.server.global_task, t)?);
                }
            }
            log.push(m);
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldReport {
    pub held_out: usize,
    pub rounds: Vec<RoundMetrics>,
    pub final_metrics: EvalResult,
    #[serde(skip)]
    pub global_task: ParamVector,
    #[serde(skip)]
    pub global_gen: ParamVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    /// Fully resolved configuration of the run, filled in by the caller.
    pub config: serde_json::Value,
    pub mode: Mode,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub per_domain: Vec<DomainMetrics>,
    pub average: AverageMetrics,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains on every domain but one and tests on the one left out, for each
/// domain in turn. Each source domain becomes one client.
pub fn run_lodo(benchmark: &[DomainDataset], config: &FederationConfig, spec: &ModelSpec) -> Result<RunReport> {
    if benchmark.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            benchmark.len()
        )));
    }
    config.validate()?;
    let folds = config.exec.map(benchmark, |h, held| -> Result<FoldReport> {
        let sources: Vec<&DomainDataset> = benchmark
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != h)
            .map(|(_, d)| d)
            .collect();
        let mut fold_config = config.clone();
        fold_config.seed = derive_seed(config.seed, &[rng::TAG_FOLD, h as u64]);
        let target: Vec<Sample> = held.all().cloned().collect();
        let mut fed = Federation::new(fold_config, spec, &sources)?;
        let rounds = fed.run(Some(&target))?;
        let final_metrics = rounds
            .last()
            .and_then(|r| r.target.clone())
            .expect("final round is always probed");
        Ok(FoldReport {
            held_out: held.domain,
            rounds,
            final_metrics,
            global_task: fed.server.global_task,
            global_gen: fed.server.global_gen,
        })
    });
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    let per_domain: Vec<DomainMetrics> = folds
        .iter()
        .map(|f| DomainMetrics {
            domain: f.held_out,
            acc: f.final_metrics.acc,
            f1: f.final_metrics.f1,
            auc: f.final_metrics.auc,
        })
        .collect();
    let average = AverageMetrics {
        acc: mean_of(per_domain.iter().map(|d| d.acc)).unwrap_or(0.0),
        f1: mean_of(per_domain.iter().map(|d| d.f1)).unwrap_or(0.0),
        auc: mean_of(per_domain.iter().filter_map(|d| d.auc)),
    };
    Ok(RunReport {
        config: serde_json::Value::Null,
        mode: config.mode,
        seed: config.seed,
        folds,
        per_domain,
        average,
    })
}
