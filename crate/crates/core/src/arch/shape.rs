use std::fmt;

use serde::Serialize;

use super::{ArchError, LayerSpec, NetSpec, Result, HEAD_CHANNELS};

/// Position of a layer inside a [`NetSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum Site {
    Bundle { bundle: usize, layer: usize },
    Pool { after: usize },
    BypassReorder { source: usize },
    BypassConcat { dest: usize },
    Head { layer: usize },
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Bundle { bundle, layer } => write!(f, "bundle {} layer {}", bundle, layer),
            Site::Pool { after } => write!(f, "pool after bundle {}", after),
            Site::BypassReorder { source } => write!(f, "bypass reorder of bundle {}", source),
            Site::BypassConcat { dest } => write!(f, "bypass concat after bundle {}", dest),
            Site::Head { layer } => write!(f, "head layer {}", layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub site: String,
    pub message: String,
}

impl Violation {
    pub fn new(site: impl ToString, message: impl Into<String>) -> Self {
        Violation {
            site: site.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.site, self.message)
    }
}

/// Input and output shape of one evaluated layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub site: Site,
    pub layer: LayerSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// One step of evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    Layer {
        site: Site,
        spec: LayerSpec,
    },
    Pool {
        after: usize,
    },
    /// Stash space-to-depth of the current activation for the bypass.
    Reorder {
        source: usize,
    },
    /// Append the stashed bypass channels to the current activation.
    Concat {
        dest: usize,
        source: usize,
    },
}

impl Step {
    pub(crate) fn site(&self) -> Site {
        match *self {
            Step::Layer { site, .. } => site,
            Step::Pool { after } => Site::Pool { after },
            Step::Reorder { source } => Site::BypassReorder { source },
            Step::Concat { dest, .. } => Site::BypassConcat { dest },
        }
    }

    pub(crate) fn spec(&self) -> LayerSpec {
        match *self {
            Step::Layer { spec, .. } => spec,
            Step::Pool { .. } => LayerSpec::MaxPool2,
            Step::Reorder { .. } => LayerSpec::SpaceToDepth,
            Step::Concat { source, .. } => LayerSpec::BypassConcat { source },
        }
    }
}

pub(crate) fn plan(net: &NetSpec) -> Vec<Step> {
    let mut steps = Vec::new();
    for (b, bundle) in net.bundles.iter().enumerate() {
        for (l, &spec) in bundle.layers.iter().enumerate() {
            steps.push(Step::Layer {
                site: Site::Bundle {
                    bundle: b,
                    layer: l,
                },
                spec,
            });
        }
        if let Some(bp) = net.bypass {
            if bp.source == b {
                steps.push(Step::Reorder { source: b });
            }
        }
        if net.pool_after.contains(&b) {
            steps.push(Step::Pool { after: b });
        }
        if let Some(bp) = net.bypass {
            if bp.dest == b {
                steps.push(Step::Concat {
                    dest: b,
                    source: bp.source,
                });
            }
        }
    }
    for (l, &spec) in net.head.iter().enumerate() {
        steps.push(Step::Layer {
            site: Site::Head { layer: l },
            spec,
        });
    }
    steps
}

fn layer_output(spec: LayerSpec, [c, h, w]: [usize; 3]) -> std::result::Result<[usize; 3], String> {
    let even = |what: &str| {
        if h % 2 != 0 || w % 2 != 0 {
            Err(format!("{} needs even spatial dims, got {}x{}", what, h, w))
        } else {
            Ok(())
        }
    };
    match spec {
        LayerSpec::DwConv3 | LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Relu6 => {
            Ok([c, h, w])
        }
        LayerSpec::PwConv1 { out_channels } => {
            if out_channels == 0 {
                Err("PW-Conv1 needs at least one output channel".into())
            } else {
                Ok([out_channels, h, w])
            }
        }
        LayerSpec::MaxPool2 => even("2x2 max-pool").map(|_| [c, h / 2, w / 2]),
        LayerSpec::SpaceToDepth => even("reorder").map(|_| [4 * c, h / 2, w / 2]),
        LayerSpec::BypassConcat { .. } => {
            Err("bypass concatenation must be declared through the bypass field".into())
        }
    }
}

fn structural_checks(net: &NetSpec) -> Vec<Violation> {
    let mut v = Vec::new();
    if net.input_shape.contains(&0) {
        v.push(Violation::new("input", "input extents must be positive"));
    }
    if !(net.bn_eps > 0.0) {
        v.push(Violation::new("input", "bn_eps must be positive"));
    }
    if net.bundles.is_empty() {
        v.push(Violation::new(
            "network",
            "network needs at least one bundle",
        ));
    }
    for (b, bundle) in net.bundles.iter().enumerate() {
        if bundle.layers.is_empty() {
            v.push(Violation::new(format!("bundle {}", b), "bundle is empty"));
        } else if !bundle.layers.iter().any(|l| l.is_conv()) {
            v.push(Violation::new(
                format!("bundle {}", b),
                "bundle needs at least one convolution",
            ));
        }
    }
    for &p in &net.pool_after {
        if p >= net.bundles.len() {
            v.push(Violation::new(
                format!("pool after bundle {}", p),
                "pool refers to a missing bundle",
            ));
        }
    }
    if let Some(bp) = net.bypass {
        if bp.dest <= bp.source {
            v.push(Violation::new("bypass", "bypass must be forward"));
        }
        if bp.source >= net.bundles.len() || bp.dest >= net.bundles.len() {
            v.push(Violation::new(
                "bypass",
                "bypass refers to a missing bundle",
            ));
        }
    }
    match net.head.last() {
        Some(LayerSpec::PwConv1 { out_channels }) if *out_channels == HEAD_CHANNELS => {}
        _ => v.push(Violation::new(
            "head",
            format!("head must emit {} channels", HEAD_CHANNELS),
        )),
    }
    v
}

/// Propagates shapes through the plan, collecting every violation found.
fn walk(net: &NetSpec) -> (Vec<LayerShape>, Vec<Violation>) {
    let mut violations = structural_checks(net);
    let mut trace = Vec::new();
    if violations
        .iter()
        .any(|v| v.site == "bypass" || v.site == "network" || v.site == "input")
    {
        return (trace, violations);
    }
    let mut cur = net.input_shape;
    let mut stash: Option<[usize; 3]> = None;
    for step in plan(net) {
        let site = step.site();
        let spec = step.spec();
        let out = match step {
            Step::Layer { spec, .. } => layer_output(spec, cur),
            Step::Pool { .. } => layer_output(LayerSpec::MaxPool2, cur),
            Step::Reorder { .. } => match layer_output(LayerSpec::SpaceToDepth, cur) {
                Ok(s) => {
                    stash = Some(s);
                    Ok(s)
                }
                Err(e) => Err(e),
            },
            Step::Concat { .. } => match stash {
                Some([sc, sh, sw]) if [sh, sw] == [cur[1], cur[2]] => {
                    Ok([cur[0] + sc, cur[1], cur[2]])
                }
                Some([sc, sh, sw]) => Err(format!(
                    "bypass spatial mismatch: reordered source is {}x{}x{} but destination is {}x{}x{}",
                    sc, sh, sw, cur[0], cur[1], cur[2]
                )),
                None => Err("bypass source was never evaluated".into()),
            },
        };
        match out {
            Ok(o) => {
                trace.push(LayerShape {
                    site,
                    layer: spec,
                    input: cur,
                    output: o,
                });
                if !matches!(step, Step::Reorder { .. }) {
                    cur = o;
                }
            }
            Err(msg) => {
                violations.push(Violation::new(site, msg));
                break;
            }
        }
    }
    (trace, violations)
}

/// Checks channel continuity, pool parity, bypass direction and spatial
/// compatibility, and the ten-channel head.
pub fn validate(net: &NetSpec) -> std::result::Result<(), Vec<Violation>> {
    let (_, v) = walk(net);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Per-layer shapes in evaluation order. The bypass reorder entry does not
/// change the running activation; its output is what the concat appends.
pub fn infer_shapes(net: &NetSpec) -> Result<Vec<LayerShape>> {
    let (trace, v) = walk(net);
    if v.is_empty() {
        Ok(trace)
    } else {
        Err(ArchError::Invalid(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub conv_layers: usize,
    pub conv_weights: usize,
    pub bn_params: usize,
    pub total: usize,
    pub bytes_f32: usize,
}

/// Exact scalar counts: 9C per DW-Conv3, Cout*Cin per PW-Conv1, 4C per
/// batch-norm (gamma, beta, running mean and variance). No conv biases.
pub fn count_params(net: &NetSpec) -> Result<ParamCount> {
    let mut conv_layers = 0;
    let mut conv_weights = 0;
    let mut bn_params = 0;
    for s in infer_shapes(net)? {
        match s.layer {
            LayerSpec::DwConv3 => {
                conv_layers += 1;
                conv_weights += 9 * s.input[0];
            }
            LayerSpec::PwConv1 { out_channels } => {
                conv_layers += 1;
                conv_weights += out_channels * s.input[0];
            }
            LayerSpec::BatchNorm => bn_params += 4 * s.input[0],
            _ => {}
        }
    }
    let total = conv_weights + bn_params;
    Ok(ParamCount {
        conv_layers,
        conv_weights,
        bn_params,
        total,
        bytes_f32: 4 * total,
    })
}
