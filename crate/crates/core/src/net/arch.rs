use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `depth` components: `depth - 2` narrow conv blocks, then two wide conv
    /// blocks with 2x2 stride-1 max pooling, the last carrying the task head.
    ToyConv { depth: usize, narrow: usize, wide: usize },
    /// One linear + ReLU component per entry of `widths`; the last component
    /// also carries the task head.
    Mlp { widths: Vec<usize> },
    /// One residual block per component, with a stem conv in the first.
    ResnetLite { blocks: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuxHead {
    /// Flatten, then a single linear layer.
    Linear,
    /// Two conv + BN + ReLU layers, global average pool, linear.
    ConvHead { first: usize, second: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub preset: Preset,
    pub aux_head: AuxHead,
    /// Per-example input shape: `[C, H, W]` for conv presets, `[D]` for mlp.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn toy_conv(depth: usize, input_shape: Vec<usize>, num_classes: usize) -> Self {
        ArchitectureSpec {
            preset: Preset::ToyConv { depth, narrow: 32, wide: 64 },
            aux_head: AuxHead::Linear,
            input_shape,
            num_classes,
        }
    }

    pub fn mlp(widths: Vec<usize>, input_dim: usize, num_classes: usize) -> Self {
        ArchitectureSpec {
            preset: Preset::Mlp { widths },
            aux_head: AuxHead::Linear,
            input_shape: vec![input_dim],
            num_classes,
        }
    }

    pub fn resnet_lite(input_shape: Vec<usize>, num_classes: usize) -> Self {
        ArchitectureSpec {
            preset: Preset::ResnetLite { blocks: 4, width: 16 },
            aux_head: AuxHead::ConvHead { first: 128, second: 64 },
            input_shape,
            num_classes,
        }
    }

    pub fn num_components(&self) -> usize {
        match &self.preset {
            Preset::ToyConv { depth, .. } => *depth,
            Preset::Mlp { widths } => widths.len(),
            Preset::ResnetLite { blocks, .. } => *blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        let image = self.input_shape.len() == 3;
        match &self.preset {
            Preset::ToyConv { depth, narrow, wide } => {
                if *depth < 3 {
                    return fail(format!("toy-conv needs depth >= 3, got {depth}"));
                }
                if *narrow == 0 || *wide == 0 {
                    return fail("toy-conv widths must be >= 1".into());
                }
                if !image || self.input_shape[1] < 3 || self.input_shape[2] < 3 {
                    return fail(format!(
                        "toy-conv needs a [C, H, W] input with H, W >= 3, got {:?}",
                        self.input_shape
                    ));
                }
            }
            Preset::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return fail(format!("mlp needs at least one nonzero width, got {widths:?}"));
                }
                if self.input_shape.len() != 1 {
                    return fail(format!("mlp needs a flat [D] input, got {:?}", self.input_shape));
                }
            }
            Preset::ResnetLite { blocks, width } => {
                if *blocks == 0 || *width == 0 {
                    return fail("resnet-lite needs blocks >= 1 and width >= 1".into());
                }
                if !image {
                    return fail(format!("resnet-lite needs a [C, H, W] input, got {:?}", self.input_shape));
                }
            }
        }
        match (&self.aux_head, &self.preset) {
            (AuxHead::ConvHead { .. }, Preset::Mlp { .. }) => fail("conv-head aux heads need an image model".into()),
            (AuxHead::ConvHead { first, second }, _) if *first == 0 || *second == 0 => {
                fail("conv-head widths must be >= 1".into())
            }
            _ => Ok(()),
        }
    }
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::ToyConv { depth, narrow, wide } => write!(f, "toy-conv({depth},{narrow},{wide})"),
            Preset::Mlp { widths } => write!(f, "mlp({})", join(widths, ",")),
            Preset::ResnetLite { blocks, width } => write!(f, "resnet-lite({blocks},{width})"),
        }
    }
}

impl fmt::Display for AuxHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuxHead::Linear => write!(f, "linear"),
            AuxHead::ConvHead { first, second } => write!(f, "conv-head({first},{second})"),
        }
    }
}

/// `name(a,b,...)` or bare `name`.
fn split_call(s: &str) -> Result<(&str, Vec<usize>)> {
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s, Vec::new()));
    };
    let inner = s[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| Error::Config(format!("missing `)` in `{s}`")))?;
    let args = inner
        .split(',')
        .filter(|a| !a.trim().is_empty())
        .map(|a| a.trim().parse::<usize>().map_err(|_| Error::Config(format!("`{a}` is not a count in `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((s[..open].trim(), args))
}

impl FromStr for Preset {
    type Err = Error;

    /// `toy-conv(d)`, `toy-conv(d,narrow,wide)`, `mlp(w1,w2,...)`,
    /// `resnet-lite`, `resnet-lite(blocks)`, `resnet-lite(blocks,width)`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = split_call(s)?;
        let bad = || Error::Config(format!("cannot parse architecture `{s}`"));
        match (name, args.as_slice()) {
            ("toy-conv", [d]) => Ok(Preset::ToyConv { depth: *d, narrow: 32, wide: 64 }),
            ("toy-conv", [d, n, w]) => Ok(Preset::ToyConv { depth: *d, narrow: *n, wide: *w }),
            ("mlp", ws) if !ws.is_empty() => Ok(Preset::Mlp { widths: ws.to_vec() }),
            ("resnet-lite", []) => Ok(Preset::ResnetLite { blocks: 4, width: 16 }),
            ("resnet-lite", [b]) => Ok(Preset::ResnetLite { blocks: *b, width: 16 }),
            ("resnet-lite", [b, w]) => Ok(Preset::ResnetLite { blocks: *b, width: *w }),
            _ => Err(bad()),
        }
    }
}

impl FromStr for AuxHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match split_call(s)? {
            ("linear", a) if a.is_empty() => Ok(AuxHead::Linear),
            ("conv-head", a) if a.is_empty() => Ok(AuxHead::ConvHead { first: 128, second: 64 }),
            ("conv-head", a) if a.len() == 2 => Ok(AuxHead::ConvHead { first: a[0], second: a[1] }),
            _ => Err(Error::Config(format!("cannot parse aux head `{s}`"))),
        }
    }
}

/// Parses `3x32x32` style shapes.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Config(format!("cannot parse shape `{s}`"))))
        .collect()
}

pub fn format_shape(shape: &[usize]) -> String {
    join(shape, "x")
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} aux={} input={} classes={}",
            self.preset,
            self.aux_head,
            format_shape(&self.input_shape),
            self.num_classes
        )
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let preset = parts.next().ok_or_else(|| Error::Config("empty architecture".into()))?.parse()?;
        let (mut aux, mut input, mut classes) = (None, None, None);
        for p in parts {
            match p.split_once('=') {
                Some(("aux", v)) => aux = Some(v.parse()?),
                Some(("input", v)) => input = Some(parse_shape(v)?),
                Some(("classes", v)) => {
                    classes = Some(v.parse().map_err(|_| Error::Config(format!("bad class count `{v}`")))?)
                }
                _ => return Err(Error::Config(format!("unexpected architecture token `{p}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("architecture is missing `{k}=`"));
        Ok(ArchitectureSpec {
            preset,
            aux_head: aux.unwrap_or(AuxHead::Linear),
            input_shape: input.ok_or_else(|| missing("input"))?,
            num_classes: classes.ok_or_else(|| missing("classes"))?,
        })
    }
}
