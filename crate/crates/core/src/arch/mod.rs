//! Declarative network descriptions built from stacked bundles, the three
//! detector variants, shape inference, parameter counting and evaluation.

mod forward;
mod shape;
mod weights;

pub use forward::{forward, forward_observed, forward_tape, Tape};
pub use shape::{count_params, infer_shapes, validate, LayerShape, ParamCount, Site, Violation};
pub(crate) use shape::{plan, Step};
pub use weights::{LayerKey, LayerWeights, Stage, WeightSet};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{TensorError, DEFAULT_BN_EPS};

/// Output channels of the head: two anchors times `(tx, ty, tw, th, conf)`.
pub const HEAD_CHANNELS: usize = 10;

/// Default `(C, H, W)` of the network input.
pub const DEFAULT_INPUT: [usize; 3] = [3, 160, 320];

/// Pointwise widths of the five backbone bundles.
pub const BACKBONE_WIDTHS: [usize; 5] = [48, 96, 192, 384, 512];

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid network: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("{site}: {source}")]
    Layer {
        site: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weights: {0}")]
    Weights(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    DwConv3,
    PwConv1 {
        out_channels: usize,
    },
    BatchNorm,
    Relu,
    Relu6,
    MaxPool2,
    SpaceToDepth,
    /// Only appears in shape traces; bypasses are declared on [`NetSpec::bypass`].
    BypassConcat {
        source: usize,
    },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::DwConv3 | LayerSpec::PwConv1 { .. })
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::Relu6)
    }

    pub fn has_weights(&self) -> bool {
        self.is_conv() || *self == LayerSpec::BatchNorm
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::DwConv3 => write!(f, "DW-Conv3"),
            LayerSpec::PwConv1 { out_channels } => write!(f, "PW-Conv1({})", out_channels),
            LayerSpec::BatchNorm => write!(f, "BN"),
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::Relu6 => write!(f, "ReLU6"),
            LayerSpec::MaxPool2 => write!(f, "MaxPool2"),
            LayerSpec::SpaceToDepth => write!(f, "Reorder"),
            LayerSpec::BypassConcat { source } => write!(f, "Concat(bypass from {})", source),
        }
    }
}

/// A short sequence of layers that is stacked to form a network.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bundle {
    pub layers: Vec<LayerSpec>,
}

impl Bundle {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Bundle { layers }
    }

    /// DW-Conv3, BN, ReLU6, PW-Conv1(`out`), BN, ReLU6.
    pub fn separable(out_channels: usize) -> Self {
        Bundle::new(separable_layers(out_channels, LayerSpec::Relu6))
    }

    /// Output width of the last pointwise layer, if the bundle has one.
    pub fn width(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::PwConv1 { out_channels } => Some(*out_channels),
            _ => None,
        })
    }
}

fn separable_layers(out_channels: usize, act: LayerSpec) -> Vec<LayerSpec> {
    vec![
        LayerSpec::DwConv3,
        LayerSpec::BatchNorm,
        act,
        LayerSpec::PwConv1 { out_channels },
        LayerSpec::BatchNorm,
        act,
    ]
}

/// Skip connection: the output of bundle `source` is reordered with
/// space-to-depth and appended to the channels leaving bundle `dest`
/// (after its pool, if any).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bypass {
    pub source: usize,
    pub dest: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_shape: [usize; 3],
    pub bundles: Vec<Bundle>,
    /// Bundle indices followed by a 2x2 max-pool.
    pub pool_after: BTreeSet<usize>,
    pub bypass: Option<Bypass>,
    pub head: Vec<LayerSpec>,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

impl NetSpec {
    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_shape = [self.input_shape[0], h, w];
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("NetSpec serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => Err(format!("unknown variant '{}', expected A, B or C", other)),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// The detector topology: five separable bundles (48, 96, 192, 384, 512
/// wide) with pools after the first three. B and C add the reordered bypass
/// from the third bundle and a DW + PW fusion stage (48 or 96 wide) before
/// the final PW-Conv1(10).
pub fn build_skynet(variant: Variant) -> NetSpec {
    let backbone = NetSpec {
        input_shape: DEFAULT_INPUT,
        bundles: BACKBONE_WIDTHS
            .iter()
            .map(|&w| Bundle::separable(w))
            .collect(),
        pool_after: [0, 1, 2].into_iter().collect(),
        bypass: None,
        head: vec![LayerSpec::PwConv1 {
            out_channels: HEAD_CHANNELS,
        }],
        bn_eps: DEFAULT_BN_EPS,
    };
    let head_width = match variant {
        Variant::A => return backbone,
        Variant::B => 48,
        Variant::C => 96,
    };
    let features = Features {
        bypass: Some(BypassFeature {
            source: 2,
            dest: 4,
            head_width: Some(head_width),
        }),
        relu6: false,
    };
    add_features(&backbone, &features).expect("backbone accepts the reference bypass")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BypassFeature {
    pub source: usize,
    pub dest: usize,
    /// When set, a DW-Conv3 + PW-Conv1(`width`) fusion stage (each followed
    /// by BN and activation) is prepended to the head to mix the
    /// concatenated channels.
    pub head_width: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Features {
    pub bypass: Option<BypassFeature>,
    /// Replace every plain ReLU with ReLU6.
    pub relu6: bool,
}

/// Returns a copy of `net` with the requested features inserted.
pub fn add_features(net: &NetSpec, features: &Features) -> Result<NetSpec> {
    let mut out = net.clone();
    if let Some(b) = features.bypass {
        if out.bypass.is_some() {
            return Err(ArchError::Invalid(vec![Violation::new(
                "bypass",
                "single bypass supported",
            )]));
        }
        out.bypass = Some(Bypass {
            source: b.source,
            dest: b.dest,
        });
        if let Some(width) = b.head_width {
            let act = net
                .bundles
                .iter()
                .flat_map(|bd| bd.layers.iter())
                .rev()
                .find(|l| l.is_activation())
                .copied()
                .unwrap_or(LayerSpec::Relu6);
            let mut head = separable_layers(width, act);
            head.extend(out.head.iter().copied());
            out.head = head;
        }
    }
    if features.relu6 {
        let swap = |l: &mut LayerSpec| {
            if *l == LayerSpec::Relu {
                *l = LayerSpec::Relu6;
            }
        };
        out.bundles
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut())
            .for_each(swap);
        out.head.iter_mut().for_each(swap);
    }
    validate(&out).map_err(ArchError::Invalid)?;
    Ok(out)
}
