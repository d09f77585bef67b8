//! Analytical latency and resource estimates.
//!
//! Each layer is costed with a roofline: the larger of its compute time
//! (`macs / macs_per_cycle`) and its memory time (`bytes / bytes_per_cycle`
//! plus a fixed per-op overhead). Layers run back to back, so network
//! latency is the sum of layer latencies. Weight memory accumulates across
//! layers; activation memory (input and output, double buffered) peaks at
//! the largest layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{infer_shapes, ArchError, LayerShape, LayerSpec, NetSpec};

pub const RES_COMPUTE: &str = "compute_units";
pub const RES_MEMORY: &str = "on_chip_memory_bytes";

#[derive(Debug, Error)]
pub enum CostError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid hardware profile: {0}")]
    Profile(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

pub type Result<T> = std::result::Result<T, CostError>;

/// Fixed cycles charged to the memory side of each op kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverheadCycles {
    pub dw_conv3: u64,
    pub pw_conv1: u64,
    pub batchnorm: u64,
    pub activation: u64,
    pub pool: u64,
    pub reorder: u64,
    pub concat: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    #[serde(default)]
    pub name: String,
    pub macs_per_cycle: u64,
    pub clock_mhz: f64,
    /// Off-chip bandwidth.
    pub bytes_per_cycle: f64,
    /// Available `compute_units` and `on_chip_memory_bytes`.
    pub resource_capacity: BTreeMap<String, f64>,
    #[serde(default)]
    pub overhead_cycles: OverheadCycles,
    #[serde(default = "default_bytes_per_value")]
    pub bytes_per_value: u64,
}

fn default_bytes_per_value() -> u64 {
    4
}

impl HardwareProfile {
    /// Placeholder embedded accelerator: 512 MAC/cycle at 200 MHz with
    /// 16 B/cycle of bandwidth. Activation buffers are whole feature maps
    /// (no tiling), so the memory capacity is sized for that.
    pub fn reference() -> Self {
        HardwareProfile {
            name: "reference-embedded".into(),
            macs_per_cycle: 512,
            clock_mhz: 200.0,
            bytes_per_cycle: 16.0,
            resource_capacity: [
                (RES_COMPUTE.to_string(), 1024.0),
                (RES_MEMORY.to_string(), 64.0 * 1024.0 * 1024.0),
            ]
            .into_iter()
            .collect(),
            overhead_cycles: OverheadCycles {
                dw_conv3: 64,
                pw_conv1: 64,
                batchnorm: 16,
                activation: 16,
                pool: 16,
                reorder: 16,
                concat: 16,
            },
            bytes_per_value: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CostError::Profile(m));
        if self.macs_per_cycle == 0 {
            return bad("macs_per_cycle must be positive".into());
        }
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) {
            return bad(format!(
                "clock_mhz must be positive, got {}",
                self.clock_mhz
            ));
        }
        if !(self.bytes_per_cycle > 0.0 && self.bytes_per_cycle.is_finite()) {
            return bad(format!(
                "bytes_per_cycle must be positive, got {}",
                self.bytes_per_cycle
            ));
        }
        if self.bytes_per_value == 0 {
            return bad("bytes_per_value must be positive".into());
        }
        if self.resource_capacity.is_empty() {
            return bad("resource_capacity is empty".into());
        }
        if let Some((k, v)) = self.resource_capacity.iter().find(|(_, &v)| !(v > 0.0)) {
            return bad(format!("capacity {} must be positive, got {}", k, v));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| CostError::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CostError::Profile(format!("{}: {}", path.display(), e)))?;
        Self::from_json(&s)
    }

    fn overhead(&self, layer: &LayerSpec) -> u64 {
        let o = &self.overhead_cycles;
        match layer {
            LayerSpec::DwConv3 => o.dw_conv3,
            LayerSpec::PwConv1 { .. } => o.pw_conv1,
            LayerSpec::BatchNorm => o.batchnorm,
            LayerSpec::Relu | LayerSpec::Relu6 => o.activation,
            LayerSpec::MaxPool2 => o.pool,
            LayerSpec::SpaceToDepth => o.reorder,
            LayerSpec::BypassConcat { .. } => o.concat,
        }
    }

    fn cycles_per_ms(&self) -> f64 {
        self.clock_mhz * 1e3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub latency_ms: f64,
    pub resources: BTreeMap<String, f64>,
    pub macs: u64,
    pub bytes_moved: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
}

impl CostEstimate {
    pub fn zero() -> Self {
        CostEstimate {
            latency_ms: 0.0,
            resources: [
                (RES_COMPUTE.to_string(), 0.0),
                (RES_MEMORY.to_string(), 0.0),
            ]
            .into_iter()
            .collect(),
            macs: 0,
            bytes_moved: 0,
            weight_bytes: 0,
            activation_bytes: 0,
        }
    }
}

fn elems(s: [usize; 3]) -> u64 {
    s.iter().map(|&e| e as u64).product()
}

/// Cost of one layer given both its operand shapes. `extra_input` is the
/// bypass operand of a concat.
fn estimate_shaped(
    layer: &LayerSpec,
    input: [usize; 3],
    extra_input: Option<[usize; 3]>,
    output: [usize; 3],
    profile: &HardwareProfile,
) -> CostEstimate {
    let [c, h, w] = input;
    let pixels = (h * w) as u64;
    let (macs, weights, per_pixel) = match *layer {
        LayerSpec::DwConv3 => (9 * c as u64 * pixels, 9 * c as u64, 9 * c as u64),
        LayerSpec::PwConv1 { out_channels } => {
            let k = (c * out_channels) as u64;
            (k * pixels, k, k)
        }
        LayerSpec::BatchNorm => (0, 4 * c as u64, 0),
        _ => (0, 0, 0),
    };
    let bpv = profile.bytes_per_value;
    let act_elems = elems(input) + extra_input.map(elems).unwrap_or(0) + elems(output);
    let bytes_moved = (act_elems + weights) * bpv;
    let weight_bytes = weights * bpv;
    let activation_bytes = 2 * act_elems * bpv;

    let compute = macs as f64 / profile.macs_per_cycle as f64;
    let memory = bytes_moved as f64 / profile.bytes_per_cycle + profile.overhead(layer) as f64;
    let latency_ms = if macs == 0 && bytes_moved == 0 {
        0.0
    } else {
        compute.max(memory) / profile.cycles_per_ms()
    };
    let compute_units = per_pixel.min(profile.macs_per_cycle) as f64;
    CostEstimate {
        latency_ms,
        resources: [
            (RES_COMPUTE.to_string(), compute_units),
            (
                RES_MEMORY.to_string(),
                (weight_bytes + activation_bytes) as f64,
            ),
        ]
        .into_iter()
        .collect(),
        macs,
        bytes_moved,
        weight_bytes,
        activation_bytes,
    }
}

/// Cost of a single layer applied to `in_shape`.
///
/// MACs are `9*C*H*W` for DW-Conv3 and `Cin*Cout*H*W` for PW-Conv1; every
/// other kind only moves bytes. A bypass concat has two operands and can only
/// be costed as part of a network.
pub fn estimate_layer(
    layer: &LayerSpec,
    in_shape: [usize; 3],
    profile: &HardwareProfile,
) -> Result<CostEstimate> {
    if in_shape.contains(&0) {
        return Err(CostError::Domain(format!(
            "empty input shape {:?}",
            in_shape
        )));
    }
    let [c, h, w] = in_shape;
    let out = match *layer {
        LayerSpec::DwConv3 | LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Relu6 => in_shape,
        LayerSpec::PwConv1 { out_channels } if out_channels > 0 => [out_channels, h, w],
        LayerSpec::MaxPool2 | LayerSpec::SpaceToDepth if h % 2 == 0 && w % 2 == 0 => {
            let oc = if *layer == LayerSpec::MaxPool2 {
                c
            } else {
                4 * c
            };
            [oc, h / 2, w / 2]
        }
        LayerSpec::BypassConcat { .. } => {
            return Err(CostError::Domain(
                "bypass concat has two operands; cost it through estimate_net".into(),
            ))
        }
        _ => {
            return Err(CostError::Domain(format!(
                "{} cannot be applied to {:?}",
                layer, in_shape
            )))
        }
    };
    Ok(estimate_shaped(layer, in_shape, None, out, profile))
}

/// Per-layer estimates in evaluation order.
pub fn estimate_layers(
    net: &NetSpec,
    profile: &HardwareProfile,
) -> Result<Vec<(LayerShape, CostEstimate)>> {
    profile.validate()?;
    let shapes = infer_shapes(net)?;
    let mut stash = None;
    let mut out = Vec::with_capacity(shapes.len());
    for s in shapes {
        let extra = match s.layer {
            LayerSpec::BypassConcat { .. } => stash,
            _ => None,
        };
        if matches!(s.site, crate::arch::Site::BypassReorder { .. }) {
            stash = Some(s.output);
        }
        let est = estimate_shaped(&s.layer, s.input, extra, s.output, profile);
        out.push((s, est));
    }
    Ok(out)
}

/// Whole-network estimate: latencies, MACs and bytes add up; weight memory
/// adds up; activation memory and compute units take the per-layer maximum.
pub fn estimate_net(net: &NetSpec, profile: &HardwareProfile) -> Result<CostEstimate> {
    let layers = estimate_layers(net, profile)?;
    let mut total = CostEstimate::zero();
    let mut compute: f64 = 0.0;
    for (_, e) in &layers {
        total.latency_ms += e.latency_ms;
        total.macs += e.macs;
        total.bytes_moved += e.bytes_moved;
        total.weight_bytes += e.weight_bytes;
        total.activation_bytes = total.activation_bytes.max(e.activation_bytes);
        compute = compute.max(e.resources[RES_COMPUTE]);
    }
    total.resources.insert(RES_COMPUTE.into(), compute);
    total.resources.insert(
        RES_MEMORY.into(),
        (total.weight_bytes + total.activation_bytes) as f64,
    );
    Ok(total)
}

/// True iff every resource component is strictly below its cap.
pub fn within_budget(est: &CostEstimate, res_max: &BTreeMap<String, f64>) -> Result<bool> {
    for k in est.resources.keys() {
        if !res_max.contains_key(k) {
            return Err(CostError::Domain(format!(
                "no cap given for resource '{}'",
                k
            )));
        }
    }
    let mut ok = true;
    for (k, cap) in res_max {
        let used = est
            .resources
            .get(k)
            .ok_or_else(|| CostError::Domain(format!("estimate has no resource '{}'", k)))?;
        ok &= *used < *cap;
    }
    Ok(ok)
}

/// Anything that can price a whole network.
pub trait CostModel {
    fn estimate(&self, net: &NetSpec) -> Result<CostEstimate>;
}

impl CostModel for HardwareProfile {
    fn estimate(&self, net: &NetSpec) -> Result<CostEstimate> {
        estimate_net(net, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_skynet, Bundle, Variant};

    fn caps(c: f64, m: f64) -> BTreeMap<String, f64> {
        [(RES_COMPUTE.to_string(), c), (RES_MEMORY.to_string(), m)]
            .into_iter()
            .collect()
    }

    #[test]
    fn pointwise_macs() {
        let p = HardwareProfile::reference();
        let e = estimate_layer(&LayerSpec::PwConv1 { out_channels: 8 }, [4, 2, 2], &p).unwrap();
        assert_eq!(e.macs, 128);
        let dw = estimate_layer(&LayerSpec::DwConv3, [4, 2, 2], &p).unwrap();
        assert_eq!(dw.macs, 9 * 4 * 4);
        assert!(e.latency_ms > 0.0 && dw.latency_ms > 0.0);
    }

    #[test]
    fn doubling_height_doubles_macs_and_compute_term() {
        let mut p = HardwareProfile::reference();
        // make the layer compute bound
        p.bytes_per_cycle = 1e12;
        p.overhead_cycles = OverheadCycles::default();
        let l = LayerSpec::PwConv1 { out_channels: 64 };
        let a = estimate_layer(&l, [32, 8, 8], &p).unwrap();
        let b = estimate_layer(&l, [32, 16, 8], &p).unwrap();
        assert_eq!(b.macs, 2 * a.macs);
        assert!((b.latency_ms - 2.0 * a.latency_ms).abs() <= 1e-12 * b.latency_ms);
    }

    #[test]
    fn zero_extent_and_concat_rejected() {
        let p = HardwareProfile::reference();
        assert!(estimate_layer(&LayerSpec::DwConv3, [4, 0, 2], &p).is_err());
        assert!(matches!(
            estimate_layer(&LayerSpec::BypassConcat { source: 0 }, [4, 2, 2], &p),
            Err(CostError::Domain(_))
        ));
        assert!(estimate_layer(&LayerSpec::MaxPool2, [4, 3, 2], &p).is_err());
    }

    #[test]
    fn net_latency_is_sum_of_layers() {
        let p = HardwareProfile::reference();
        let net = build_skynet(Variant::C);
        let layers = estimate_layers(&net, &p).unwrap();
        let total = estimate_net(&net, &p).unwrap();
        let sum: f64 = layers.iter().map(|(_, e)| e.latency_ms).sum();
        assert_eq!(total.latency_ms, sum);
        let w: u64 = layers.iter().map(|(_, e)| e.weight_bytes).sum();
        assert_eq!(total.weight_bytes, w);
        assert_eq!(
            total.activation_bytes,
            layers
                .iter()
                .map(|(_, e)| e.activation_bytes)
                .max()
                .unwrap()
        );
    }

    #[test]
    fn skynet_c_macs() {
        // per-layer sum done by hand over the five bundles and the head
        let total = estimate_net(&build_skynet(Variant::C), &HardwareProfile::reference()).unwrap();
        assert_eq!(total.macs, 463_718_400);
    }

    #[test]
    fn single_bundle_net_matches_its_layers() {
        let p = HardwareProfile::reference();
        let net = NetSpec {
            input_shape: [3, 8, 8],
            bundles: vec![Bundle::separable(8)],
            pool_after: Default::default(),
            bypass: None,
            head: vec![LayerSpec::PwConv1 { out_channels: 10 }],
            bn_eps: 1e-5,
        };
        let total = estimate_net(&net, &p).unwrap();
        let mut shape = [3, 8, 8];
        let mut sum = 0.0;
        for l in net.bundles[0].layers.iter().chain(&net.head) {
            let e = estimate_layer(l, shape, &p).unwrap();
            sum += e.latency_ms;
            if let LayerSpec::PwConv1 { out_channels } = l {
                shape[0] = *out_channels;
            }
        }
        assert_eq!(total.latency_ms, sum);
    }

    #[test]
    fn faster_profile_never_slower() {
        let p = HardwareProfile::reference();
        let mut fast = p.clone();
        fast.macs_per_cycle *= 2;
        for v in [Variant::A, Variant::B, Variant::C] {
            let net = build_skynet(v);
            assert!(
                estimate_net(&net, &fast).unwrap().latency_ms
                    <= estimate_net(&net, &p).unwrap().latency_ms
            );
        }
    }

    #[test]
    fn budget_is_strict() {
        let zero = CostEstimate::zero();
        assert!(within_budget(&zero, &caps(1.0, 1.0)).unwrap());
        let mut e = CostEstimate::zero();
        e.resources.insert(RES_COMPUTE.into(), 4.0);
        e.resources.insert(RES_MEMORY.into(), 10.0);
        assert!(!within_budget(&e, &caps(4.0, 100.0)).unwrap());
        assert!(!within_budget(&e, &caps(8.0, 10.0 - 1e-9)).unwrap());
        assert!(within_budget(&e, &caps(4.0 + 1e-9, 10.0 + 1e-9)).unwrap());
        let mut missing = caps(8.0, 100.0);
        missing.remove(RES_MEMORY);
        assert!(within_budget(&e, &missing).is_err());
    }

    #[test]
    fn profile_json_round_trip_and_validation() {
        let p = HardwareProfile::reference();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(HardwareProfile::from_json(&s).unwrap(), p);
        let mut bad = p.clone();
        bad.clock_mhz = 0.0;
        assert!(HardwareProfile::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
        // numbers parse exactly
        let exact = r#"{"macs_per_cycle": 3, "clock_mhz": 0.1, "bytes_per_cycle": 1.7976931348623157e308,
            "resource_capacity": {"compute_units": 5e-324}}"#;
        let q = HardwareProfile::from_json(exact).unwrap();
        assert_eq!(q.clock_mhz, 0.1);
        assert_eq!(q.bytes_per_cycle, f64::MAX);
        assert_eq!(q.resource_capacity["compute_units"], 5e-324);
    }
}
