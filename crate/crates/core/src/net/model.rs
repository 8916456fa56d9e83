use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::arch::{ArchitectureSpec, AuxHead, Preset};
use crate::net::layer::{forward_layers, shapes_through, BnBuffer, Layer, Mode, StatsLog};
use crate::param::Parameter;
use crate::seed;
use crate::tensor::Tensor;

/// A contiguous slice of the network plus its auxiliary head.
///
/// `params[..body_params]` belong to the body, the rest to the head.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// 1-based position in the model.
    pub index: usize,
    pub body: Vec<Layer>,
    /// `None` on the final component, whose body ends in the task head.
    pub head: Option<Vec<Layer>>,
    pub params: Vec<Parameter>,
    pub body_params: usize,
    pub buffers: Vec<BnBuffer>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl Component {
    pub fn is_final(&self) -> bool {
        self.head.is_none()
    }

    pub fn body_range(&self) -> std::ops::Range<usize> {
        0..self.body_params
    }

    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.body_params..self.params.len()
    }

    /// Records one leaf per parameter.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn forward_body(&self, tape: &mut Tape, x: Var, params: &[Var], mode: Mode, log: &mut StatsLog) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "component forward",
                format!("component {} expects per-example {:?}, got batch {:?}", self.index, self.input_shape, shape),
            ));
        }
        forward_layers(&self.body, tape, x, params, &self.buffers, mode, log)
    }

    /// Aux-head logits, or `Ok(None)` on the final component.
    pub fn forward_head(
        &self,
        tape: &mut Tape,
        a: Var,
        params: &[Var],
        mode: Mode,
        log: &mut StatsLog,
    ) -> Result<Option<Var>> {
        match &self.head {
            Some(h) => forward_layers(h, tape, a, params, &self.buffers, mode, log).map(Some),
            None => Ok(None),
        }
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, log: &StatsLog) {
        for (i, s) in log {
            self.buffers[*i].update(s);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedModel {
    pub components: Vec<Component>,
    pub num_classes: usize,
    pub spec: ArchitectureSpec,
}

/// Tape nodes produced by [`PartitionedModel::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    /// Leaves for each component's parameters.
    pub params: Vec<Vec<Var>>,
    pub activations: Vec<Var>,
    /// `stop_gradient` of each activation.
    pub detached: Vec<Var>,
    /// Aux-head logits for components `1..n`, task logits for component `n`.
    pub logits: Vec<Var>,
    pub stats: Vec<StatsLog>,
}

impl PartitionedModel {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.components.iter().flat_map(|c| &c.params).map(Parameter::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.components.iter().flat_map(|c| &c.params)
    }

    /// The fully connected forward pass: every component consumes the live
    /// output of the one below and every head reads its component's live output.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let mut pass = ForwardPass {
            params: Vec::new(),
            activations: Vec::new(),
            detached: Vec::new(),
            logits: Vec::new(),
            stats: Vec::new(),
        };
        let mut h = tape.leaf(x.clone());
        for c in &self.components {
            let vars = c.bind(tape);
            let mut log = StatsLog::new();
            h = c.forward_body(tape, h, &vars, mode, &mut log)?;
            let logits = c.forward_head(tape, h, &vars, mode, &mut log)?.unwrap_or(h);
            pass.detached.push(tape.stop_gradient(h));
            pass.activations.push(h);
            pass.logits.push(logits);
            pass.params.push(vars);
            pass.stats.push(log);
        }
        Ok(pass)
    }

    /// Task logits only, with no head evaluation.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut h = tape.leaf(x.clone());
        let mut log = StatsLog::new();
        for c in &self.components {
            let vars = c.bind(&mut tape);
            h = c.forward_body(&mut tape, h, &vars, mode, &mut log)?;
        }
        Ok(tape.value(h).clone())
    }

    pub fn apply_stats(&mut self, stats: &[StatsLog]) {
        for (c, s) in self.components.iter_mut().zip(stats) {
            c.apply_stats(s);
        }
    }

    /// Merges runs of `g` adjacent components into one, keeping layers and
    /// parameter values. Blocks are aligned to the top, so when `g` does not
    /// divide `n` the bottom block is the short one. Each merged component keeps
    /// the head of its topmost member.
    pub fn merged(&self, g: usize) -> Result<PartitionedModel> {
        if g == 0 {
            return Err(Error::Config("group size must be >= 1".into()));
        }
        let mut out = Vec::new();
        for (bi, (lo, hi)) in group_blocks(self.len(), g).into_iter().enumerate() {
            let members = &self.components[lo - 1..hi];
            let top = members.last().unwrap();
            let mut merged = Component {
                index: bi + 1,
                body: Vec::new(),
                head: None,
                params: Vec::new(),
                body_params: 0,
                buffers: Vec::new(),
                input_shape: members[0].input_shape.clone(),
                output_shape: top.output_shape.clone(),
            };
            for c in members {
                let (p, b) = (merged.params.len(), merged.buffers.len());
                merged.body.extend(c.body.iter().cloned().map(|mut l| {
                    l.shift(p, b);
                    l
                }));
                merged.params.extend(c.params[c.body_range()].iter().cloned());
                merged.buffers.extend(c.buffers.iter().cloned());
            }
            merged.body_params = merged.params.len();
            // Head layers index into the top member's param list past its body.
            let (p, b) = (merged.params.len() - top.body_params, merged.buffers.len() - top.buffers.len());
            merged.head = top.head.as_ref().map(|h| {
                h.iter()
                    .cloned()
                    .map(|mut l| {
                        l.shift(p, b);
                        l
                    })
                    .collect()
            });
            merged.params.extend(top.params[top.head_range()].iter().cloned());
            out.push(merged);
        }
        Ok(PartitionedModel { components: out, num_classes: self.num_classes, spec: self.spec.clone() })
    }
}

/// 1-based inclusive `(first, last)` component ranges of size `g`, aligned so
/// the last block ends at `n`.
pub fn group_blocks(n: usize, g: usize) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut hi = n;
    while hi > 0 {
        let lo = hi.saturating_sub(g) + 1;
        blocks.push((lo, hi));
        hi = lo - 1;
    }
    blocks.reverse();
    blocks
}

/// Cross-entropy of every head's logits against the same targets.
pub fn component_losses(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Vec<Var>> {
    logits.iter().map(|&l| tape.softmax_cross_entropy(l, targets)).collect()
}

/// Accumulates layers and their parameters while tracking the per-example shape.
struct StackBuilder<'a> {
    prefix: String,
    layers: Vec<Layer>,
    params: &'a mut Vec<Parameter>,
    buffers: &'a mut Vec<BnBuffer>,
    shape: Vec<usize>,
    rng: &'a mut seed::Rng,
    counter: usize,
}

impl<'a> StackBuilder<'a> {
    fn name(&mut self, suffix: &str) -> String {
        format!("{}.{}.{suffix}", self.prefix, self.counter)
    }

    fn param(&mut self, suffix: &str, value: Tensor) -> usize {
        let id = self.name(suffix);
        self.params.push(Parameter::new(id, value));
        self.params.len() - 1
    }

    fn push(&mut self, l: Layer) {
        self.layers.push(l);
        self.counter += 1;
    }

    fn linear(&mut self, out: usize) {
        let fan_in = self.shape[0];
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, out], bound, self.rng);
        let weight = self.param("weight", w);
        let bias = self.param("bias", Tensor::zeros(&[out]));
        self.push(Layer::Linear { weight, bias });
        self.shape = vec![out];
    }

    fn conv(&mut self, out: usize) {
        let c = self.shape[0];
        let bound = (1.0 / (c * 9) as f64).sqrt();
        let w = Tensor::uniform(&[out, c, 3, 3], bound, self.rng);
        let weight = self.param("weight", w);
        self.push(Layer::Conv2d { weight, padding: 1, stride: 1 });
        self.shape[0] = out;
    }

    fn bn(&mut self) {
        let c = self.shape[0];
        let gamma = self.param("gamma", Tensor::full(&[c], 1.0));
        let beta = self.param("beta", Tensor::zeros(&[c]));
        let id = self.name("running");
        self.buffers.push(BnBuffer::new(id, c));
        let stats = self.buffers.len() - 1;
        self.push(Layer::BatchNorm { gamma, beta, stats });
    }

    fn conv_bn_relu(&mut self, out: usize) {
        self.conv(out);
        self.bn();
        self.push(Layer::Relu);
    }

    fn relu(&mut self) {
        self.push(Layer::Relu);
    }

    fn maxpool(&mut self) {
        self.push(Layer::MaxPool2d { kernel: 2, stride: 1 });
        self.shape = vec![self.shape[0], self.shape[1] - 1, self.shape[2] - 1];
    }

    fn flatten(&mut self) {
        self.push(Layer::Flatten);
        self.shape = vec![self.shape.iter().product()];
    }

    fn gap(&mut self) {
        self.push(Layer::GlobalAvgPool);
        self.shape = vec![self.shape[0]];
    }

    fn residual_block(&mut self) {
        let width = self.shape[0];
        let mut inner = StackBuilder {
            prefix: format!("{}.{}", self.prefix, self.counter),
            layers: Vec::new(),
            params: self.params,
            buffers: self.buffers,
            shape: self.shape.clone(),
            rng: self.rng,
            counter: 0,
        };
        inner.conv_bn_relu(width);
        inner.conv(width);
        inner.bn();
        let layers = inner.layers;
        self.push(Layer::Residual(layers));
        self.relu();
    }
}

/// Builds the model described by `spec`. Each component draws its initial
/// weights from its own seeded stream, so construction is deterministic.
pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<PartitionedModel> {
    spec.validate()?;
    let n = spec.num_components();
    let mut shape = spec.input_shape.clone();
    let mut components = Vec::with_capacity(n);
    for k in 1..=n {
        let mut rng = seed::rng(seed, &format!("init/c{k}"));
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let is_final = k == n;
        let mut body = StackBuilder {
            prefix: format!("c{k}.body"),
            layers: Vec::new(),
            params: &mut params,
            buffers: &mut buffers,
            shape: shape.clone(),
            rng: &mut rng,
            counter: 0,
        };
        match &spec.preset {
            Preset::ToyConv { narrow, wide, .. } => {
                if k + 2 <= n {
                    body.conv_bn_relu(*narrow);
                } else {
                    body.conv_bn_relu(*wide);
                    body.maxpool();
                }
                if is_final {
                    body.flatten();
                    body.linear(spec.num_classes);
                }
            }
            Preset::Mlp { widths } => {
                body.linear(widths[k - 1]);
                body.relu();
                if is_final {
                    body.linear(spec.num_classes);
                }
            }
            Preset::ResnetLite { width, .. } => {
                if k == 1 {
                    body.conv_bn_relu(*width);
                }
                body.residual_block();
                if is_final {
                    body.gap();
                    body.linear(spec.num_classes);
                }
            }
        }
        let body_layers = std::mem::take(&mut body.layers);
        let out_shape = body.shape.clone();
        let body_params = params.len();

        let head = if is_final {
            None
        } else {
            let mut hb = StackBuilder {
                prefix: format!("c{k}.head"),
                layers: Vec::new(),
                params: &mut params,
                buffers: &mut buffers,
                shape: out_shape.clone(),
                rng: &mut rng,
                counter: 0,
            };
            match spec.aux_head {
                AuxHead::Linear => {
                    if hb.shape.len() > 1 {
                        hb.flatten();
                    }
                }
                AuxHead::ConvHead { first, second } => {
                    hb.conv_bn_relu(first);
                    hb.conv_bn_relu(second);
                    hb.gap();
                }
            }
            hb.linear(spec.num_classes);
            Some(hb.layers)
        };

        let component = Component {
            index: k,
            body: body_layers,
            head,
            params,
            body_params,
            buffers,
            input_shape: shape.clone(),
            output_shape: out_shape.clone(),
        };
        check_shapes(&component, spec.num_classes)?;
        components.push(component);
        shape = out_shape;
    }
    Ok(PartitionedModel { components, num_classes: spec.num_classes, spec: spec.clone() })
}

/// Re-derives shapes symbolically from the layer list.
fn check_shapes(c: &Component, classes: usize) -> Result<()> {
    let shapes: Vec<Vec<usize>> = c.params.iter().map(|p| p.value.shape().to_vec()).collect();
    let out = shapes_through(&c.body, &c.input_shape, &shapes)?;
    if out != c.output_shape {
        return Err(Error::Config(format!("component {} body emits {out:?}, expected {:?}", c.index, c.output_shape)));
    }
    if c.is_final() && out != [classes] {
        return Err(Error::Config(format!("task head emits {out:?}, expected [{classes}]")));
    }
    if let Some(h) = &c.head {
        let logits = shapes_through(h, &out, &shapes)?;
        if logits != [classes] {
            return Err(Error::Config(format!("aux head {} emits {logits:?}, expected [{classes}]", c.index)));
        }
    }
    Ok(())
}
