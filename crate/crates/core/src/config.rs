//! Flat JSON run configuration. Every knob has a default, so `{}` is a valid
//! document; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchSpec, DomainDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::CapM;
use crate::model::{Activation, GenArch, ModelSpec, TaskArch};
use crate::ndag::NdagHyper;
use crate::params::SgdConfig;
use crate::protocol::{FederationConfig, Mode};
use crate::sha::ShaHyper;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Seeds used by `ablate`; `run` and `sweep` use `seed`.
    pub seeds: Vec<u64>,

    pub rounds: usize,
    pub warmup_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub probe_every_round: bool,

    pub alpha: f64,
    pub m: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub gen_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub input_lo: f64,
    pub input_hi: f64,

    pub rho: f64,
    pub beta: f64,
    pub k: usize,
    pub history_cap: usize,
    pub include_self: bool,
    pub eval_clients_per_round: usize,

    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub gen_hidden_dims: Vec<usize>,

    pub n_domains: usize,
    /// When set, overrides `n_domains` with `n_clients + 1` so every fold
    /// has exactly `n_clients` source clients.
    pub n_clients: Option<usize>,
    pub n_classes: usize,
    pub input_dim: usize,
    pub samples_per_domain: usize,
    pub style_strength: f64,
    pub label_noise: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    pub bench_seed: u64,
    /// Load domains from a CSV file instead of generating them.
    pub data_csv: Option<PathBuf>,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchSpec::default();
        RunConfig {
            mode: Mode::Feddag,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            rounds: 35,
            warmup_rounds: 5,
            local_epochs: 1,
            batch_size: 32,
            probe_every_round: false,
            alpha: 0.3,
            m: 0.1,
            ema_decay: 0.9,
            lr: 0.05,
            gen_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            input_lo: 0.0,
            input_hi: 1.0,
            rho: 1e-7,
            beta: 0.3,
            k: 4,
            history_cap: 8,
            include_self: true,
            eval_clients_per_round: 0,
            hidden_dims: vec![32, 32],
            feature_dim: 16,
            gen_hidden_dims: vec![32],
            n_domains: bench.n_domains,
            n_clients: None,
            n_classes: bench.n_classes,
            input_dim: bench.input_dim,
            samples_per_domain: bench.samples_per_domain,
            style_strength: bench.style_strength,
            label_noise: bench.label_noise,
            class_separation: bench.class_separation,
            noise_std: bench.noise_std,
            bench_seed: bench.seed,
            data_csv: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.n_clients == Some(0) {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        self.federation(self.seed).and_then(|f| f.validate()).map_err(wrap)?;
        self.model_spec().validate().map_err(wrap)?;
        if self.data_csv.is_none() {
            self.bench_spec().validate().map_err(wrap)?;
        }
        Ok(())
    }

    pub fn federation(&self, seed: u64) -> Result<FederationConfig> {
        Ok(FederationConfig {
            rounds: self.rounds,
            warmup_rounds: self.warmup_rounds,
            ndag: NdagHyper {
                alpha: self.alpha,
                m: CapM::new(self.m)?,
                ema_decay: self.ema_decay,
                task_opt: SgdConfig {
                    lr: self.lr,
                    momentum: self.momentum,
                    weight_decay: self.weight_decay,
                },
                gen_opt: SgdConfig {
                    lr: self.gen_lr,
                    momentum: self.momentum,
                    weight_decay: self.weight_decay,
                },
                batch_size: self.batch_size,
                local_epochs: self.local_epochs,
                input_range: (self.input_lo, self.input_hi),
            },
            sha: ShaHyper {
                rho: self.rho,
                beta: self.beta,
                k: self.k,
                history_cap: self.history_cap,
                include_self: self.include_self,
                eval_clients_per_round: self.eval_clients_per_round,
            },
            mode: self.mode,
            seed,
            probe_every_round: self.probe_every_round,
            exec: Execution::default(),
        })
    }

    pub fn bench_spec(&self) -> BenchSpec {
        BenchSpec {
            n_domains: self.n_clients.map_or(self.n_domains, |n| n + 1),
            n_classes: self.n_classes,
            input_dim: self.input_dim,
            samples_per_domain: self.samples_per_domain,
            style_strength: self.style_strength,
            label_noise: self.label_noise,
            class_separation: self.class_separation,
            noise_std: self.noise_std,
            seed: self.bench_seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            task: TaskArch {
                input_dim: self.input_dim,
                hidden_dims: self.hidden_dims.clone(),
                feature_dim: self.feature_dim,
                num_classes: self.n_classes,
                activation: Activation::Relu,
            },
            gen: GenArch {
                input_dim: self.input_dim,
                hidden_dims: self.gen_hidden_dims.clone(),
            },
        }
    }

    /// The benchmark this config trains on: the CSV file if given, else the
    /// synthetic generator.
    pub fn load_benchmark(&self) -> Result<Vec<DomainDataset>> {
        match &self.data_csv {
            Some(path) => bench::load_csv(path, self.bench_seed),
            None => bench::make_benchmark(&self.bench_spec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.alpha, cfg.beta, cfg.k, cfg.rho, cfg.m), (0.3, 0.3, 4, 1e-7, 0.1));
    }

    #[test]
    fn unknown_key_rejected_with_position() {
        let err = RunConfig::from_json("{\n  \"alpah\": 0.2\n}").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("alpah") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn range_checks() {
        for doc in [
            r#"{"alpha": 1.5}"#,
            r#"{"m": 0}"#,
            r#"{"warmup_rounds": 35}"#,
            r#"{"lr": -1}"#,
            r#"{"feature_dim": 1}"#,
            r#"{"n_domains": 1}"#,
            r#"{"label_noise": 0.5}"#,
            r#"{"seeds": []}"#,
            r#"{"n_clients": 0}"#,
            r#"{"ema_decay": 2}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn round_trip_echo() {
        let cfg = RunConfig {
            mode: Mode::NoSha,
            n_clients: Some(2),
            ..RunConfig::default()
        };
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.bench_spec().n_domains, 3);
    }

    #[test]
    fn missing_file_names_path() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }
}
