use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::group_blocks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    EndToEnd,
    /// Gradients from a loss travel `N - 1` component boundaries.
    NWise(usize),
    /// Blocks of `g` adjacent components, each trained locally by its top head.
    GroupedLocal(usize),
    /// End-to-end gradients applied by a fully pipelined, non-blocking schedule.
    Hogwild,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::NWise(0) => Err(Error::Config("n_wise needs N >= 1".into())),
            Strategy::GroupedLocal(0) => Err(Error::Config("grouped_local needs g >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Short label used in tables: `e2e`, `2-wise`, `grouped-2`, `hogwild`.
    pub fn label(&self) -> String {
        match self {
            Strategy::EndToEnd => "e2e".into(),
            Strategy::NWise(n) => format!("{n}-wise"),
            Strategy::GroupedLocal(g) => format!("grouped-{g}"),
            Strategy::Hogwild => "hogwild".into(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::EndToEnd => write!(f, "end_to_end"),
            Strategy::NWise(n) => write!(f, "n_wise({n})"),
            Strategy::GroupedLocal(g) => write!(f, "grouped_local({g})"),
            Strategy::Hogwild => write!(f, "hogwild"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts the `Display` form plus the `e2e`, `N-wise` and `grouped-g` labels.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unknown strategy `{s}`"));
        let arg = |body: &str| -> Result<usize> {
            let v = body.strip_suffix(')').ok_or_else(bad)?;
            v.trim().parse().map_err(|_| bad())
        };
        let st = match s {
            "end_to_end" | "e2e" | "end-to-end" => Strategy::EndToEnd,
            "hogwild" => Strategy::Hogwild,
            _ => {
                if let Some(rest) = s.strip_prefix("n_wise(") {
                    Strategy::NWise(arg(rest)?)
                } else if let Some(rest) = s.strip_prefix("grouped_local(") {
                    Strategy::GroupedLocal(arg(rest)?)
                } else if let Some(n) = s.strip_suffix("-wise") {
                    Strategy::NWise(n.parse().map_err(|_| bad())?)
                } else if let Some(g) = s.strip_prefix("grouped-") {
                    Strategy::GroupedLocal(g.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        };
        st.validate()?;
        Ok(st)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingPolicy {
    pub strategy: Strategy,
    /// For `n_wise`: also update each body with every loss between it and its
    /// source loss, not just the source loss itself.
    pub mix_local: bool,
}

impl RoutingPolicy {
    pub fn new(strategy: Strategy) -> Self {
        RoutingPolicy { strategy, mix_local: false }
    }

    pub fn mixed(strategy: Strategy) -> Self {
        RoutingPolicy { strategy, mix_local: true }
    }
}

/// Which losses drive which component bodies. Components and losses are
/// numbered `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientAssignment {
    n: usize,
    /// `sources[k - 1]`: losses whose gradients update body `k`.
    sources: Vec<Vec<usize>>,
}

pub fn assignment(policy: &RoutingPolicy, n: usize) -> GradientAssignment {
    let sources = (1..=n)
        .map(|k| match policy.strategy {
            Strategy::EndToEnd | Strategy::Hogwild => vec![n],
            Strategy::NWise(big_n) => {
                let src = (k + big_n.max(1) - 1).min(n);
                if policy.mix_local {
                    (k..=src).collect()
                } else {
                    vec![src]
                }
            }
            Strategy::GroupedLocal(g) => {
                let top = group_blocks(n, g.max(1)).into_iter().find(|&(lo, hi)| lo <= k && k <= hi).unwrap().1;
                vec![top]
            }
        })
        .collect();
    GradientAssignment { n, sources }
}

impl GradientAssignment {
    pub fn n(&self) -> usize {
        self.n
    }

    /// The highest loss feeding body `k`; the only one unless `mix_local`.
    pub fn source_loss(&self, k: usize) -> usize {
        *self.sources[k - 1].last().unwrap()
    }

    pub fn source_losses(&self) -> Vec<usize> {
        (1..=self.n).map(|k| self.source_loss(k)).collect()
    }

    /// Losses that update body `k`, ascending.
    pub fn sources(&self, k: usize) -> &[usize] {
        &self.sources[k - 1]
    }

    /// Bodies updated by loss `j`, ascending.
    pub fn reach(&self, j: usize) -> Vec<usize> {
        (1..=self.n).filter(|&k| self.sources[k - 1].contains(&j)).collect()
    }

    /// Losses whose gradient must pass backward through component `k`: those
    /// updating body `k` or any body below it. Ascending.
    pub fn traverse(&self, k: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = (1..=k).flat_map(|kk| self.sources[kk - 1].iter().copied()).filter(|&j| j >= k).collect();
        set.into_iter().collect()
    }

    /// Lowest component whose body is touched by loss `j`, or `j` itself when
    /// the loss only trains its head.
    pub fn branch_start(&self, j: usize) -> usize {
        self.reach(j).first().copied().unwrap_or(j).min(j)
    }
}
