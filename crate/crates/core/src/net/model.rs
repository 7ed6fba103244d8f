use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{BranchConfig, Modality};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BatchNormState, ParamId, Real, Tape, Tensor, Var};

pub const CLASS_NAMES: [&str; 3] = ["normal", "dryAMD", "wetAMD"];

/// Which branch of a model to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Fundus,
    Oct,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Fundus => "fundus",
            Stream::Oct => "oct",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Index layout of one residual branch inside a model's parameter list.
#[derive(Clone, Debug, PartialEq)]
struct Branch {
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
}

/// Pre-pooling feature maps and the pooled vector of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// `[N, C, m, m]`
    pub maps: Var,
    /// `[N, C]`
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub fundus: Option<BranchOutput>,
    pub oct: Option<BranchOutput>,
    /// `[N, K]` class scores.
    pub scores: Var,
}

/// Metadata echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub branch: BranchConfig,
    pub num_classes: usize,
    pub modality: Modality,
    pub class_names: Vec<String>,
    pub seed: u64,
}

/// Two residual branches fused after global average pooling by a bias-free
/// linear head. Single-modal baselines are the same structure with one
/// branch and a head of width `C` instead of `2C`.
#[derive(Clone, Debug)]
pub struct TwoStreamModel<T: Real = f32> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    bn_states: Vec<BatchNormState>,
    bn_names: Vec<String>,
    fundus: Option<Branch>,
    oct: Option<Branch>,
    head: ParamId,
}

struct Builder<'a, T: Real> {
    params: &'a mut Vec<Tensor<T>>,
    names: &'a mut Vec<String>,
    bn_states: &'a mut Vec<BatchNormState>,
    bn_names: &'a mut Vec<String>,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.params.push(t);
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn conv_bn(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut rng::Stream,
    ) -> ConvBn {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let kernel = Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64(normal.sample(rng)));
        let conv = self.add(format!("{prefix}.conv"), kernel);
        let gamma = self.add(
            format!("{prefix}.bn.gamma"),
            Tensor::full(&[cout], T::one()),
        );
        let beta = self.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]));
        self.bn_states.push(BatchNormState::new(cout));
        self.bn_names.push(format!("{prefix}.bn"));
        ConvBn {
            conv,
            gamma,
            beta,
            bn: self.bn_states.len() - 1,
            stride,
            pad: k / 2,
        }
    }

    fn branch(&mut self, cfg: &BranchConfig, prefix: &str, rng: &mut rng::Stream) -> Branch {
        let stem = self.conv_bn(
            &format!("{prefix}.stem"),
            cfg.in_channels,
            cfg.stem_channels,
            3,
            1,
            rng,
        );
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        for (s, (&cout, &stride)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_strides)
            .enumerate()
        {
            for b in 0..cfg.blocks_per_stage {
                let p = format!("{prefix}.stage{s}.block{b}");
                let stride = if b == 0 { stride } else { 1 };
                let conv1 = self.conv_bn(&format!("{p}.conv1"), cin, cout, 3, stride, rng);
                let conv2 = self.conv_bn(&format!("{p}.conv2"), cout, cout, 3, 1, rng);
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| self.conv_bn(&format!("{p}.shortcut"), cin, cout, 1, stride, rng));
                blocks.push(BasicBlock {
                    conv1,
                    conv2,
                    shortcut,
                });
                cin = cout;
            }
        }
        Branch { stem, blocks }
    }
}

impl<T: Real> TwoStreamModel<T> {
    /// Two-branch model with a `[K, 2C]` fusion head.
    pub fn new(cfg: &BranchConfig, num_classes: usize, seed: u64) -> Result<Self> {
        Self::build(cfg, num_classes, seed, Modality::Multimodal)
    }

    /// One-branch baseline with a `[K, C]` head.
    pub fn single_modal(
        cfg: &BranchConfig,
        num_classes: usize,
        seed: u64,
        stream: Stream,
    ) -> Result<Self> {
        let modality = match stream {
            Stream::Fundus => Modality::Fundus,
            Stream::Oct => Modality::Oct,
        };
        Self::build(cfg, num_classes, seed, modality)
    }

    pub fn build(
        cfg: &BranchConfig,
        num_classes: usize,
        seed: u64,
        modality: Modality,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let class_names = if num_classes == CLASS_NAMES.len() {
            CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..num_classes).map(|c| format!("class{c}")).collect()
        };
        let spec = ModelSpec {
            branch: cfg.clone(),
            num_classes,
            modality,
            class_names,
            seed,
        };
        let (mut params, mut names, mut bn_states, mut bn_names) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut b = Builder {
            params: &mut params,
            names: &mut names,
            bn_states: &mut bn_states,
            bn_names: &mut bn_names,
        };
        let fundus = modality
            .uses_fundus()
            .then(|| b.branch(cfg, "fundus", &mut rng::stream(seed, "init.fundus", 0)));
        let oct = modality
            .uses_oct()
            .then(|| b.branch(cfg, "oct", &mut rng::stream(seed, "init.oct", 0)));
        let width = cfg.out_channels() * usize::from(fundus.is_some())
            + cfg.out_channels() * usize::from(oct.is_some());
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut head_rng = rng::stream(seed, "init.head", 0);
        let head_w = Tensor::from_fn(&[num_classes, width], |_| {
            T::from_f64(normal.sample(&mut head_rng))
        });
        let head = b.add("head.weight".into(), head_w);
        Ok(TwoStreamModel {
            spec,
            params,
            names,
            bn_states,
            bn_names,
            fundus,
            oct,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &BranchConfig {
        &self.spec.branch
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn_states
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub(crate) fn from_parts(
        spec: ModelSpec,
        named_params: Vec<(String, Tensor<T>)>,
        named_bn: Vec<(String, BatchNormState)>,
    ) -> Result<Self> {
        let mut model = Self::build(&spec.branch, spec.num_classes, spec.seed, spec.modality)?;
        if named_params.len() != model.params.len() || named_bn.len() != model.bn_states.len() {
            return Err(Error::dim(format!(
                "expected {} parameters and {} norm states, got {} and {}",
                model.params.len(),
                model.bn_states.len(),
                named_params.len(),
                named_bn.len()
            )));
        }
        for (i, (name, t)) in named_params.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::dim(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    t.shape()
                )));
            }
            model.params[i] = t;
        }
        for (i, (name, st)) in named_bn.into_iter().enumerate() {
            if name != model.bn_names[i] || st.channels() != model.bn_states[i].channels() {
                return Err(Error::dim(format!(
                    "norm state {i}: expected {}, got {name}",
                    model.bn_names[i]
                )));
            }
            model.bn_states[i] = st;
        }
        model.spec = spec;
        Ok(model)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameter count of one branch.
    pub fn branch_parameters(&self, stream: Stream) -> usize {
        let prefix = format!("{}.", stream.as_str());
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Fusion weights `[K, width]`; columns `0..C` belong to the first present
    /// branch (fundus when present), the rest to the OCT branch.
    pub fn head_weights(&self) -> &Tensor<T> {
        &self.params[self.head.0]
    }

    pub fn head_weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.params[self.head.0]
    }

    /// Column range of the head belonging to `stream`.
    pub fn head_columns(&self, stream: Stream) -> Option<std::ops::Range<usize>> {
        let c = self.spec.branch.out_channels();
        match (stream, self.fundus.is_some(), self.oct.is_some()) {
            (Stream::Fundus, true, _) => Some(0..c),
            (Stream::Oct, true, true) => Some(c..2 * c),
            (Stream::Oct, false, true) => Some(0..c),
            _ => None,
        }
    }

    /// Class-`class` weights of `stream`, i.e. the `w^c` row restricted to that
    /// branch's columns.
    pub fn class_weights(&self, stream: Stream, class: usize) -> Result<Vec<T>> {
        let cols = self
            .head_columns(stream)
            .ok_or_else(|| Error::config(format!("model has no {} branch", stream.as_str())))?;
        if class >= self.spec.num_classes {
            return Err(Error::config(format!("class {class} out of range")));
        }
        let w = self.head_weights();
        let width = w.shape()[1];
        Ok(w.data()[class * width + cols.start..class * width + cols.end].to_vec())
    }

    fn branch(&self, stream: Stream) -> Result<&Branch> {
        match stream {
            Stream::Fundus => self.fundus.as_ref(),
            Stream::Oct => self.oct.as_ref(),
        }
        .ok_or_else(|| Error::config(format!("model has no {} branch", stream.as_str())))
    }

    /// Runs one branch on `image [N, in_channels, S, S]`.
    ///
    /// In train mode batch statistics are used and the running statistics are
    /// updated; otherwise the running statistics are read.
    pub fn forward_branch(
        &mut self,
        tape: &mut Tape<T>,
        stream: Stream,
        image: Var,
        train: bool,
    ) -> Result<BranchOutput> {
        let branch = self.branch(stream)?.clone();
        run_branch(
            &self.params,
            &mut self.bn_states,
            &branch,
            &self.spec.branch,
            tape,
            image,
            train,
        )
    }

    /// Full forward pass. Inputs for absent branches must be `None`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        fundus: Option<Var>,
        oct: Option<Var>,
        train: bool,
    ) -> Result<ForwardOutput> {
        let mut states = std::mem::take(&mut self.bn_states);
        let out = self.forward_with(tape, fundus, oct, train, &mut states);
        self.bn_states = states;
        out
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        fundus: Option<Var>,
        oct: Option<Var>,
    ) -> Result<ForwardOutput> {
        let mut states = self.bn_states.clone();
        self.forward_with(tape, fundus, oct, false, &mut states)
    }

    fn forward_with(
        &self,
        tape: &mut Tape<T>,
        fundus: Option<Var>,
        oct: Option<Var>,
        train: bool,
        states: &mut [BatchNormState],
    ) -> Result<ForwardOutput> {
        let run = |tape: &mut Tape<T>,
                   states: &mut [BatchNormState],
                   branch: &Option<Branch>,
                   input: Option<Var>,
                   name: &str|
         -> Result<Option<BranchOutput>> {
            match (branch, input) {
                (Some(b), Some(x)) => {
                    run_branch(&self.params, states, b, &self.spec.branch, tape, x, train).map(Some)
                }
                (None, None) => Ok(None),
                (Some(_), None) => Err(Error::config(format!(
                    "{} model needs a {name} input",
                    self.spec.modality
                ))),
                (None, Some(_)) => Err(Error::config(format!(
                    "{} model takes no {name} input",
                    self.spec.modality
                ))),
            }
        };
        let f = run(tape, states, &self.fundus, fundus, "fundus")?;
        let o = run(tape, states, &self.oct, oct, "oct")?;
        let features = match (f, o) {
            (Some(f), Some(o)) => {
                let (nf, no) = (
                    tape.value(f.pooled).shape()[0],
                    tape.value(o.pooled).shape()[0],
                );
                if nf != no {
                    return Err(Error::dim(format!(
                        "batch mismatch: {nf} fundus vs {no} oct images"
                    )));
                }
                tape.concat(f.pooled, o.pooled)?
            }
            (Some(x), None) | (None, Some(x)) => x.pooled,
            (None, None) => unreachable!("a model has at least one branch"),
        };
        let head = tape.param(self.head, &self.params[self.head.0]);
        let scores = tape.linear(features, head, None)?;
        Ok(ForwardOutput {
            fundus: f,
            oct: o,
            scores,
        })
    }

    /// Eval-mode class scores `[N, K]` for plain tensors.
    pub fn scores(&self, fundus: Option<&Tensor<T>>, oct: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = fundus.map(|t| tape.constant(t.clone()));
        let o = oct.map(|t| tape.constant(t.clone()));
        let out = self.forward_eval(&mut tape, f, o)?;
        Ok(tape.value(out.scores).clone())
    }

    /// Highest-scoring class per batch element.
    pub fn predict(
        &self,
        fundus: Option<&Tensor<T>>,
        oct: Option<&Tensor<T>>,
    ) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(fundus, oct)?))
    }
}

fn conv_bn<T: Real>(
    params: &[Tensor<T>],
    states: &mut [BatchNormState],
    layer: &ConvBn,
    tape: &mut Tape<T>,
    x: Var,
    train: bool,
) -> Result<Var> {
    let k = tape.param(layer.conv, &params[layer.conv.0]);
    let y = tape.conv2d(x, k, layer.stride, layer.pad)?;
    let g = tape.param(layer.gamma, &params[layer.gamma.0]);
    let b = tape.param(layer.beta, &params[layer.beta.0]);
    tape.batch_norm(y, g, b, &mut states[layer.bn], train)
}

fn run_branch<T: Real>(
    params: &[Tensor<T>],
    states: &mut [BatchNormState],
    branch: &Branch,
    cfg: &BranchConfig,
    tape: &mut Tape<T>,
    image: Var,
    train: bool,
) -> Result<BranchOutput> {
    let shape = tape.value(image).shape();
    let expected = [cfg.in_channels, cfg.input_size, cfg.input_size];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::dim(format!(
            "branch expects [N, {expected:?}], got {shape:?}"
        )));
    }
    let stem = conv_bn(params, states, &branch.stem, tape, image, train)?;
    let mut x = tape.relu(stem);
    for block in &branch.blocks {
        let h = conv_bn(params, states, &block.conv1, tape, x, train)?;
        let h = tape.relu(h);
        let h = conv_bn(params, states, &block.conv2, tape, h, train)?;
        let skip = match &block.shortcut {
            Some(sc) => conv_bn(params, states, sc, tape, x, train)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        x = tape.relu(sum);
    }
    let pooled = tape.global_avg_pool(x)?;
    Ok(BranchOutput { maps: x, pooled })
}

/// Row-wise argmax of `[N, K]`; ties go to the lowest index.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape()[scores.ndim() - 1];
    scores
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, row[0]),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Draws a batch of standard-normal images, used by tests and benches.
pub fn random_images<T: Real>(n: usize, cfg: &BranchConfig, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("finite std");
    Tensor::from_fn(
        &[n, cfg.in_channels, cfg.input_size, cfg.input_size],
        |_| T::from_f64(normal.sample(rng)),
    )
}
