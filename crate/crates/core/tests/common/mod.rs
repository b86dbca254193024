#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng as _;

use feddag::bench::{DomainDataset, Sample};
use feddag::config::RunConfig;
use feddag::losses::{loss_cls_grad, CapM};
use feddag::model::{Activation, GenArch, ModelSpec, Networks, TaskArch};
use feddag::ndag::NdagHyper;
use feddag::params::{ParamVector, SgdConfig};
use feddag::protocol::FederationConfig;
use feddag::rng::{derive_seed, stream, Rng, TAG_BATCHES, TAG_INIT_TASK};

pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        task: TaskArch {
            input_dim: 5,
            hidden_dims: vec![10],
            feature_dim: 8,
            num_classes: 3,
            activation: Activation::Relu,
        },
        gen: GenArch {
            input_dim: 5,
            hidden_dims: vec![6],
        },
    }
}

pub fn tiny_hyper(alpha: f64, m: f64, lr: f64) -> NdagHyper {
    let opt = SgdConfig {
        lr,
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    NdagHyper {
        alpha,
        m: CapM::new(m).unwrap(),
        ema_decay: 0.9,
        task_opt: opt,
        gen_opt: opt,
        batch_size: 4,
        local_epochs: 1,
        input_range: (0.0, 1.0),
    }
}

pub fn random_samples(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            x: (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            y: rng.gen_range(0..classes),
            domain: 0,
        })
        .collect()
}

pub fn jitter(p: &ParamVector, rng: &mut Rng, scale: f64) -> ParamVector {
    ParamVector::new(p.as_slice().iter().map(|v| v + rng.gen_range(-scale..scale)).collect())
}

/// A small but complete leave-one-domain-out config.
pub fn small_config() -> RunConfig {
    RunConfig {
        rounds: 4,
        warmup_rounds: 1,
        samples_per_domain: 120,
        n_domains: 3,
        ..RunConfig::default()
    }
}

/// Plain federated averaging written out from scratch: every client runs
/// momentum SGD on mean cross-entropy over its own shuffled mini-batches,
/// then the server takes the unweighted mean. Batch seeds follow the
/// simulator's stream layout so both see the same batches.
pub fn fedavg_reference(
    nets: &Networks,
    config: &FederationConfig,
    clients: &[&DomainDataset],
    rounds: usize,
) -> ParamVector {
    let opt = &config.ndag.task_opt;
    let mut global = nets.task.init(&mut stream(config.seed, &[TAG_INIT_TASK])).into_vec();
    for t in 0..rounds {
        let mut locals: Vec<Vec<f64>> = Vec::new();
        for c in clients {
            let mut p = global.clone();
            let mut vel = vec![0.0; p.len()];
            let seed = derive_seed(config.seed, &[TAG_BATCHES, t as u64, c.domain as u64]);
            for epoch in 0..config.ndag.local_epochs {
                let mut idx: Vec<usize> = (0..c.train.len()).collect();
                idx.shuffle(&mut stream(seed, &[TAG_BATCHES, epoch as u64]));
                for chunk in idx.chunks(config.ndag.batch_size) {
                    let inv_b = 1.0 / chunk.len() as f64;
                    let pv = ParamVector::new(p.clone());
                    let mut g = vec![0.0; p.len()];
                    for &i in chunk {
                        let s = &c.train[i];
                        let tr = nets.task.forward_traced(&pv, &s.x).unwrap();
                        let (_, mut d) = loss_cls_grad(tr.logits(), s.y).unwrap();
                        d.iter_mut().for_each(|v| *v *= inv_b);
                        nets.task.backward(&pv, &tr, None, Some(&d), Some(&mut g));
                    }
                    for j in 0..p.len() {
                        let gj = g[j] + opt.weight_decay * p[j];
                        vel[j] = opt.momentum * vel[j] + gj;
                        p[j] -= opt.lr * vel[j];
                    }
                }
            }
            locals.push(p);
        }
        let n = locals.len() as f64;
        global = (0..global.len())
            .map(|j| locals.iter().map(|l| l[j]).sum::<f64>() / n)
            .collect();
    }
    ParamVector::new(global)
}
