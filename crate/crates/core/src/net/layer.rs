use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One step of a body or head. Parameter and buffer fields are indices into the
/// owning component's `params` / `buffers`.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear { weight: usize, bias: usize },
    Conv2d { weight: usize, padding: usize, stride: usize },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    /// `x + inner(x)`.
    Residual(Vec<Layer>),
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub id: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnBuffer {
    pub fn new(id: impl Into<String>, channels: usize) -> Self {
        BnBuffer { id: id.into(), mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving update; the running variance uses the unbiased estimate.
    pub fn update(&mut self, stats: &BatchStats) {
        let unbias = stats.count as f64 / (stats.count.max(2) - 1) as f64;
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * stats.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * stats.var[c] * unbias;
        }
    }
}

/// Batch statistics gathered during a train-mode forward, keyed by buffer index.
pub type StatsLog = Vec<(usize, BatchStats)>;

impl Layer {
    pub(crate) fn shift(&mut self, params: usize, buffers: usize) {
        match self {
            Layer::Linear { weight, bias } => {
                *weight += params;
                *bias += params;
            }
            Layer::Conv2d { weight, .. } => *weight += params,
            Layer::BatchNorm { gamma, beta, stats } => {
                *gamma += params;
                *beta += params;
                *stats += buffers;
            }
            Layer::Residual(inner) => inner.iter_mut().for_each(|l| l.shift(params, buffers)),
            Layer::Relu | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub(crate) fn output_shape(&self, input: &[usize], param_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::Config(detail);
        match self {
            Layer::Linear { weight, .. } => {
                let w = &param_shapes[*weight];
                if input != [w[0]] {
                    return Err(bad(format!("linear expects [{}] input, got {input:?}", w[0])));
                }
                Ok(vec![w[1]])
            }
            Layer::Conv2d { weight, padding, stride } => {
                let w = &param_shapes[*weight];
                if input.len() != 3 || input[0] != w[1] {
                    return Err(bad(format!("conv2d with {} input channels got {input:?}", w[1])));
                }
                let out = |d: usize, k: usize| -> Result<usize> {
                    let padded = d + 2 * padding;
                    if k > padded || (padded - k) % stride != 0 {
                        return Err(bad(format!("conv2d kernel {k} stride {stride} does not tile size {d}")));
                    }
                    Ok((padded - k) / stride + 1)
                };
                Ok(vec![w[0], out(input[1], w[2])?, out(input[2], w[3])?])
            }
            Layer::BatchNorm { gamma, .. } => {
                let c = param_shapes[*gamma][0];
                if input.is_empty() || input[0] != c {
                    return Err(bad(format!("batchnorm over {c} channels got {input:?}")));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { kernel, stride } => {
                if input.len() != 3 || input[1] < *kernel || input[2] < *kernel {
                    return Err(bad(format!("maxpool kernel {kernel} does not fit {input:?}")));
                }
                Ok(vec![input[0], (input[1] - kernel) / stride + 1, (input[2] - kernel) / stride + 1])
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(bad(format!("global average pool needs [C,H,W], got {input:?}")));
                }
                Ok(vec![input[0]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Residual(inner) => {
                let out = shapes_through(inner, input, param_shapes)?;
                if out != input {
                    return Err(bad(format!("residual branch maps {input:?} to {out:?}")));
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        buffers: &[BnBuffer],
        mode: Mode,
        log: &mut StatsLog,
    ) -> Result<Var> {
        match self {
            Layer::Linear { weight, bias } => {
                let y = tape.matmul(x, params[*weight])?;
                tape.add_bias(y, params[*bias])
            }
            Layer::Conv2d { weight, padding, stride } => tape.conv2d(x, params[*weight], *padding, *stride),
            Layer::BatchNorm { gamma, beta, stats } => match mode {
                Mode::Train => {
                    let (y, s) = tape.batchnorm_train(x, params[*gamma], params[*beta])?;
                    log.push((*stats, s));
                    Ok(y)
                }
                Mode::Eval => {
                    let b = &buffers[*stats];
                    tape.batchnorm_eval(x, params[*gamma], params[*beta], &b.mean, &b.var)
                }
            },
            Layer::Relu => Ok(tape.relu(x)),
            Layer::MaxPool2d { kernel, stride } => tape.maxpool2d(x, *kernel, *stride),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten => tape.flatten(x),
            Layer::Residual(inner) => {
                let y = forward_layers(inner, tape, x, params, buffers, mode, log)?;
                tape.add(x, y)
            }
        }
    }
}

pub(crate) fn shapes_through(layers: &[Layer], input: &[usize], param_shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
    layers.iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s, param_shapes))
}

pub(crate) fn forward_layers(
    layers: &[Layer],
    tape: &mut Tape,
    mut x: Var,
    params: &[Var],
    buffers: &[BnBuffer],
    mode: Mode,
    log: &mut StatsLog,
) -> Result<Var> {
    for l in layers {
        x = l.forward(tape, x, params, buffers, mode, log)?;
    }
    Ok(x)
}
