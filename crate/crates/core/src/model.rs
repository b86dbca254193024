//! Small dense networks over flat parameter vectors.
//!
//! The task network is an MLP feature extractor followed by a linear
//! classifier; the generator is a same-shape MLP whose tanh output is the
//! perturbation field added to the input. Both expose a traced forward pass
//! and an exact reverse pass that accumulates parameter gradients and returns
//! the gradient with respect to the input.
//!
//! Parameter layout, per layer in order: weights row-major `(fan_out, fan_in)`
//! followed by `fan_out` biases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::params::ParamVector;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    act: Activation,
    offset: usize,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.fan_out * self.fan_in
    }
}

/// A stack of dense layers addressed inside a flat parameter slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Layer>,
    n_params: usize,
}

/// Pre- and post-activation values of every layer for one input.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

impl Mlp {
    /// `dims` lists every layer width including input and output;
    /// `acts[i]` is applied after layer `i`.
    pub fn new(dims: &[usize], acts: &[Activation]) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output dims");
        assert_eq!(acts.len(), dims.len() - 1, "one activation per layer");
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &act)| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    act,
                    offset,
                };
                offset += layer.n_params();
                layer
            })
            .collect();
        Mlp {
            layers,
            n_params: offset,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.fan_out];
            dense(params, layer, &a, &mut z);
            for v in z.iter_mut() {
                *v = layer.act.apply(*v);
            }
            a = z;
        }
        a
    }

    pub fn forward_traced(&self, params: &[f64], x: &[f64]) -> MlpTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map(Vec::as_slice).unwrap_or(x);
            let mut z = vec![0.0; layer.fan_out];
            dense(params, layer, input, &mut z);
            let a: Vec<f64> = z.iter().map(|&v| layer.act.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        MlpTrace {
            input: x.to_vec(),
            pre,
            post,
        }
    }

    /// Reverse pass. Adds dL/dparams into `param_grad` when given and returns
    /// dL/dinput.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        d_output: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut delta = d_output.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[li];
            let a = &trace.post[li];
            for j in 0..layer.fan_out {
                delta[j] *= layer.act.derivative(z[j], a[j]);
            }
            let input = if li == 0 { &trace.input } else { &trace.post[li - 1] };
            if let Some(g) = param_grad.as_deref_mut() {
                for j in 0..layer.fan_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    let row = layer.offset + j * layer.fan_in;
                    for (gw, &xi) in g[row..row + layer.fan_in].iter_mut().zip(input) {
                        *gw += dj * xi;
                    }
                    g[layer.bias_offset() + j] += dj;
                }
            }
            let mut d_input = vec![0.0; layer.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = layer.offset + j * layer.fan_in;
                for (di, &w) in d_input.iter_mut().zip(&params[row..row + layer.fan_in]) {
                    *di += dj * w;
                }
            }
            delta = d_input;
        }
        delta
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for layer in &self.layers {
            let s = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut p[layer.offset..layer.bias_offset()] {
                *w = rng.gen_range(-s..=s);
            }
        }
        p
    }
}

#[inline]
fn dense(params: &[f64], layer: &Layer, input: &[f64], out: &mut [f64]) {
    let bias = &params[layer.bias_offset()..layer.bias_offset() + layer.fan_out];
    for (j, o) in out.iter_mut().enumerate() {
        let row = layer.offset + j * layer.fan_in;
        let w = &params[row..row + layer.fan_in];
        *o = bias[j] + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Feature extractor plus linear classifier. Hidden and feature layers use
/// `activation`; the classifier is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl TaskArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("task architecture dims must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn build(&self) -> TaskNet {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        let acts = vec![self.activation; dims.len() - 1];
        let backbone = Mlp::new(&dims, &acts);
        let classifier = Mlp::new(&[self.feature_dim, self.num_classes], &[Activation::Identity]);
        TaskNet { backbone, classifier }
    }
}

/// Compiled task network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskNet {
    backbone: Mlp,
    classifier: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskTrace {
    backbone: MlpTrace,
    classifier: MlpTrace,
}

impl TaskTrace {
    pub fn features(&self) -> &[f64] {
        self.backbone.output()
    }

    pub fn logits(&self) -> &[f64] {
        self.classifier.output()
    }
}

impl TaskNet {
    pub fn n_params(&self) -> usize {
        self.backbone.n_params() + self.classifier.n_params()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params.split_at(self.backbone.n_params())
    }

    fn check(&self, params: &ParamVector, x: &[f64]) -> Result<()> {
        check_dim("task params", self.n_params(), params.dim())?;
        check_dim("task input", self.input_dim(), x.len())
    }

    pub fn forward(&self, params: &ParamVector, x: &[f64]) -> Result<TaskOutput> {
        self.check(params, x)?;
        let (pb, pc) = self.split(params.as_slice());
        let features = self.backbone.forward(pb, x);
        let logits = self.classifier.forward(pc, &features);
        Ok(TaskOutput { features, logits })
    }

    /// Features only; skips the classifier.
    pub fn features(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        Ok(self.backbone.forward(self.split(params.as_slice()).0, x))
    }

    pub fn forward_traced(&self, params: &ParamVector, x: &[f64]) -> Result<TaskTrace> {
        self.check(params, x)?;
        let (pb, pc) = self.split(params.as_slice());
        let backbone = self.backbone.forward_traced(pb, x);
        let classifier = self.classifier.forward_traced(pc, backbone.output());
        Ok(TaskTrace { backbone, classifier })
    }

    /// Backpropagates upstream gradients on the features and logits. Either
    /// may be omitted (treated as zero). Returns dL/dx.
    pub fn backward(
        &self,
        params: &ParamVector,
        trace: &TaskTrace,
        d_features: Option<&[f64]>,
        d_logits: Option<&[f64]>,
        param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (pb, pc) = self.split(params.as_slice());
        let nb = self.backbone.n_params();
        let (gb, gc) = match param_grad {
            Some(g) => {
                let (a, b) = g.split_at_mut(nb);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let mut d_feat = match d_features {
            Some(d) => d.to_vec(),
            None => vec![0.0; self.backbone.output_dim()],
        };
        if let Some(dl) = d_logits {
            let through = self.classifier.backward(pc, &trace.classifier, dl, gc);
            for (a, b) in d_feat.iter_mut().zip(through) {
                *a += b;
            }
        }
        self.backbone.backward(pb, &trace.backbone, &d_feat, gb)
    }

    pub fn init(&self, rng: &mut Rng) -> ParamVector {
        let mut p = self.backbone.init(rng);
        p.extend(self.classifier.init(rng));
        ParamVector::new(p)
    }
}

/// Same-shape perturbation generator: ReLU hidden layers, tanh output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl GenArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "generator architecture dims must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.input_dim);
        dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn build(&self) -> GenNet {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.input_dim);
        let mut acts = vec![Activation::Relu; dims.len() - 1];
        *acts.last_mut().unwrap() = Activation::Tanh;
        GenNet {
            mlp: Mlp::new(&dims, &acts),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenNet {
    mlp: Mlp,
}

impl GenNet {
    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn check(&self, params: &ParamVector, x: &[f64]) -> Result<()> {
        check_dim("generator params", self.n_params(), params.dim())?;
        check_dim("generator input", self.input_dim(), x.len())
    }

    pub fn forward(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        Ok(self.mlp.forward(params.as_slice(), x))
    }

    pub fn forward_traced(&self, params: &ParamVector, x: &[f64]) -> Result<MlpTrace> {
        self.check(params, x)?;
        Ok(self.mlp.forward_traced(params.as_slice(), x))
    }

    /// Accumulates dL/dphi given dL/ddelta.
    pub fn backward(&self, params: &ParamVector, trace: &MlpTrace, d_delta: &[f64], param_grad: &mut [f64]) {
        self.mlp.backward(params.as_slice(), trace, d_delta, Some(param_grad));
    }

    pub fn init(&self, rng: &mut Rng) -> ParamVector {
        ParamVector::new(self.mlp.init(rng))
    }
}

/// The pair of architectures every client shares.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskArch,
    pub gen: GenArch,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.gen.validate()?;
        check_dim("generator input vs task input", self.task.input_dim, self.gen.input_dim)
    }

    pub fn build(&self) -> Networks {
        Networks {
            task: self.task.build(),
            gen: self.gen.build(),
        }
    }
}

/// Compiled task and generator networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Networks {
    pub task: TaskNet,
    pub gen: GenNet,
}
