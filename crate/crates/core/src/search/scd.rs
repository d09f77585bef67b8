//! Stochastic coordinate descent over bundle replication, pooling placement
//! and channel widths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SearchError};
use crate::arch::{validate, Bypass, LayerSpec, NetSpec};
use crate::costmodel::{within_budget, CostEstimate, CostModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    BundleReplications,
    DownsamplingConfig,
    ChannelExpansionConfig,
}

impl Coordinate {
    pub const ALL: [Coordinate; 3] = [
        Coordinate::BundleReplications,
        Coordinate::DownsamplingConfig,
        Coordinate::ChannelExpansionConfig,
    ];
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Coordinate::BundleReplications => "bundle_replications",
            Coordinate::DownsamplingConfig => "downsampling_config",
            Coordinate::ChannelExpansionConfig => "channel_expansion_config",
        })
    }
}

/// Consecutive iterations without an accepted move before giving up.
pub const STALL_ROUNDS: usize = 3 * Coordinate::ALL.len();

/// Width step of a channel-expansion move.
const CHANNEL_FACTOR: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lat_targ_ms: f64,
    pub epsilon_ms: f64,
    pub res_max: BTreeMap<String, f64>,
    pub max_iters: usize,
    pub rng_seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SearchError::Config(m));
        if !(self.lat_targ_ms > 0.0 && self.lat_targ_ms.is_finite()) {
            return bad(format!(
                "lat_targ_ms must be positive, got {}",
                self.lat_targ_ms
            ));
        }
        if !(self.epsilon_ms > 0.0) {
            return bad(format!(
                "epsilon_ms must be positive, got {}",
                self.epsilon_ms
            ));
        }
        if self.epsilon_ms >= self.lat_targ_ms {
            return bad("epsilon_ms must be smaller than lat_targ_ms".into());
        }
        if self.res_max.is_empty() {
            return bad("res_max is empty".into());
        }
        if let Some((k, v)) = self.res_max.iter().find(|(_, v)| !(**v > 0.0)) {
            return bad(format!("res_max.{} must be positive, got {}", k, v));
        }
        Ok(())
    }

    /// Latency distance outside the tolerance band.
    pub fn distance(&self, latency_ms: f64) -> f64 {
        ((latency_ms - self.lat_targ_ms).abs() - self.epsilon_ms).max(0.0)
    }

    fn satisfied(&self, est: &CostEstimate) -> Result<bool> {
        Ok((est.latency_ms - self.lat_targ_ms).abs() < self.epsilon_ms
            && within_budget(est, &self.res_max)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Satisfied,
    /// No move was accepted for [`STALL_ROUNDS`] iterations in a row.
    Stalled,
    /// Ran out of iterations without meeting the objective.
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// `null` for the initial record.
    pub coordinate: Option<Coordinate>,
    #[serde(rename = "move")]
    pub mv: String,
    pub lat_ms: f64,
    pub res: BTreeMap<String, f64>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: NetSpec,
    pub estimate: CostEstimate,
    pub status: SearchStatus,
    pub iterations: usize,
    pub trace: Vec<TraceRecord>,
}

impl SearchOutcome {
    pub fn trace_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            s.push('\n');
        }
        s
    }
}

/// Ordering key: resource-feasible first, then smaller resource excess,
/// then smaller latency distance.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct Key {
    infeasible: bool,
    excess: f64,
    distance: f64,
}

fn key(cfg: &SearchConfig, est: &CostEstimate) -> Result<Key> {
    let feasible = within_budget(est, &cfg.res_max)?;
    let excess = cfg
        .res_max
        .iter()
        .map(|(k, cap)| ((est.resources.get(k).copied().unwrap_or(0.0) - cap) / cap).max(0.0))
        .sum();
    Ok(Key {
        infeasible: !feasible,
        excess,
        distance: cfg.distance(est.latency_ms),
    })
}

fn better(a: &Key, b: &Key) -> bool {
    (a.infeasible, a.excess, a.distance) < (b.infeasible, b.excess, b.distance)
}

/// Index remap after inserting a bundle at `at`.
fn shift_up(i: usize, at: usize) -> usize {
    if i >= at {
        i + 1
    } else {
        i
    }
}

fn duplicate(net: &NetSpec, i: usize) -> NetSpec {
    let mut n = net.clone();
    n.bundles.insert(i + 1, net.bundles[i].clone());
    // the copy goes after the original, so anything attached to the end of
    // bundle i moves to the end of the copy
    n.pool_after = net.pool_after.iter().map(|&p| shift_up(p, i)).collect();
    n.bypass = net.bypass.map(|b| Bypass {
        source: shift_up(b.source, i),
        dest: shift_up(b.dest, i),
    });
    n
}

fn remove(net: &NetSpec, i: usize) -> Option<NetSpec> {
    if net.bundles.len() < 2 {
        return None;
    }
    let mut n = net.clone();
    n.bundles.remove(i);
    // a pool after bundle i now follows bundle i-1 (or the new bundle i)
    let down = |p: usize| if p > i || (p == i && i > 0) { p - 1 } else { p };
    let mut pools = BTreeSet::new();
    for &p in &net.pool_after {
        if !pools.insert(down(p)) {
            return None;
        }
    }
    n.pool_after = pools;
    if let Some(b) = net.bypass {
        let (s, d) = (down(b.source), down(b.dest));
        if s >= d {
            return None;
        }
        n.bypass = Some(Bypass { source: s, dest: d });
    }
    Some(n)
}

fn proposals(net: &NetSpec, c: Coordinate) -> Vec<(String, NetSpec)> {
    let mut out = Vec::new();
    let nb = net.bundles.len();
    match c {
        Coordinate::BundleReplications => {
            for i in 0..nb {
                out.push((format!("duplicate bundle {}", i), duplicate(net, i)));
                if let Some(n) = remove(net, i) {
                    out.push((format!("remove bundle {}", i), n));
                }
            }
        }
        Coordinate::DownsamplingConfig => {
            for i in 0..nb {
                let mut n = net.clone();
                if net.pool_after.contains(&i) {
                    n.pool_after.remove(&i);
                    out.push((format!("remove pool after bundle {}", i), n));
                    for j in [i.wrapping_sub(1), i + 1] {
                        if j < nb && !net.pool_after.contains(&j) {
                            let mut m = net.clone();
                            m.pool_after.remove(&i);
                            m.pool_after.insert(j);
                            out.push((format!("move pool from bundle {} to {}", i, j), m));
                        }
                    }
                } else {
                    n.pool_after.insert(i);
                    out.push((format!("insert pool after bundle {}", i), n));
                }
            }
        }
        Coordinate::ChannelExpansionConfig => {
            for (i, b) in net.bundles.iter().enumerate() {
                for (l, layer) in b.layers.iter().enumerate() {
                    if let LayerSpec::PwConv1 { out_channels } = *layer {
                        let mut wide = net.clone();
                        wide.bundles[i].layers[l] = LayerSpec::PwConv1 {
                            out_channels: out_channels * CHANNEL_FACTOR,
                        };
                        out.push((
                            format!(
                                "widen bundle {} layer {} to {}",
                                i,
                                l,
                                out_channels * CHANNEL_FACTOR
                            ),
                            wide,
                        ));
                        if out_channels >= CHANNEL_FACTOR {
                            let mut narrow = net.clone();
                            narrow.bundles[i].layers[l] = LayerSpec::PwConv1 {
                                out_channels: out_channels / CHANNEL_FACTOR,
                            };
                            out.push((
                                format!(
                                    "narrow bundle {} layer {} to {}",
                                    i,
                                    l,
                                    out_channels / CHANNEL_FACTOR
                                ),
                                narrow,
                            ));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Moves the network toward `|lat - lat_targ| < epsilon` under strict
/// resource caps. Each iteration draws one coordinate from the seeded
/// generator, prices every single-step move along it, and keeps the best
/// move only if it strictly improves the objective.
pub fn scd_search(
    initial: &NetSpec,
    cfg: &SearchConfig,
    model: &dyn CostModel,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if let Err(v) = validate(initial) {
        return Err(crate::arch::ArchError::Invalid(v).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut cur = initial.clone();
    let mut est = model.estimate(&cur)?;
    let mut cur_key = key(cfg, &est)?;
    let mut trace = vec![TraceRecord {
        iter: 0,
        coordinate: None,
        mv: "initial".into(),
        lat_ms: est.latency_ms,
        res: est.resources.clone(),
        accepted: true,
    }];
    let mut rejected_run = 0;
    let mut iter = 0;
    let status = loop {
        if cfg.satisfied(&est)? {
            break SearchStatus::Satisfied;
        }
        if rejected_run >= STALL_ROUNDS {
            break SearchStatus::Stalled;
        }
        if iter >= cfg.max_iters {
            break SearchStatus::Exhausted;
        }
        iter += 1;
        let coord = Coordinate::ALL[rng.gen_range(0..Coordinate::ALL.len())];
        let mut best: Option<(String, NetSpec, CostEstimate, Key)> = None;
        for (mv, net) in proposals(&cur, coord) {
            if validate(&net).is_err() {
                continue;
            }
            let Ok(e) = model.estimate(&net) else {
                continue;
            };
            let k = key(cfg, &e)?;
            if best.as_ref().is_none_or(|(.., bk)| better(&k, bk)) {
                best = Some((mv, net, e, k));
            }
        }
        match best {
            Some((mv, net, e, k)) => {
                let accepted = better(&k, &cur_key);
                trace.push(TraceRecord {
                    iter,
                    coordinate: Some(coord),
                    mv,
                    lat_ms: e.latency_ms,
                    res: e.resources.clone(),
                    accepted,
                });
                if accepted {
                    cur = net;
                    est = e;
                    cur_key = k;
                    rejected_run = 0;
                } else {
                    rejected_run += 1;
                }
            }
            None => {
                trace.push(TraceRecord {
                    iter,
                    coordinate: Some(coord),
                    mv: "none".into(),
                    lat_ms: est.latency_ms,
                    res: est.resources.clone(),
                    accepted: false,
                });
                rejected_run += 1;
            }
        }
    };
    Ok(SearchOutcome {
        best: cur,
        estimate: est,
        status,
        iterations: iter,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_skynet, Bundle, Variant};
    use crate::costmodel::{CostError, RES_COMPUTE, RES_MEMORY};

    /// Fixed latency per bundle; one compute unit per bundle.
    struct PerBundle(f64);

    impl CostModel for PerBundle {
        fn estimate(&self, net: &NetSpec) -> std::result::Result<CostEstimate, CostError> {
            let n = net.bundles.len() as f64;
            let mut e = CostEstimate::zero();
            e.latency_ms = self.0 * n;
            e.resources.insert(RES_COMPUTE.into(), n);
            Ok(e)
        }
    }

    fn one_bundle() -> NetSpec {
        NetSpec {
            input_shape: [3, 32, 64],
            bundles: vec![Bundle::new(vec![LayerSpec::DwConv3])],
            pool_after: Default::default(),
            bypass: None,
            head: vec![LayerSpec::PwConv1 { out_channels: 10 }],
            bn_eps: 1e-5,
        }
    }

    fn cfg(seed: u64, max_iters: usize) -> SearchConfig {
        SearchConfig {
            lat_targ_ms: 40.0,
            epsilon_ms: 5.0,
            res_max: [
                (RES_COMPUTE.to_string(), 100.0),
                (RES_MEMORY.to_string(), 1.0),
            ]
            .into_iter()
            .collect(),
            max_iters,
            rng_seed: seed,
        }
    }

    #[test]
    fn reaches_four_bundles() {
        let out = scd_search(&one_bundle(), &cfg(42, 20), &PerBundle(10.0)).unwrap();
        assert_eq!(out.status, SearchStatus::Satisfied);
        assert_eq!(out.best.bundles.len(), 4);
        assert!(out.iterations <= 20);
        let again = scd_search(&one_bundle(), &cfg(42, 20), &PerBundle(10.0)).unwrap();
        assert_eq!(out.trace_jsonl(), again.trace_jsonl());
    }

    #[test]
    fn seeds_either_converge_or_stall_cleanly() {
        let mut satisfied = 0;
        for seed in 0..50 {
            let out = scd_search(&one_bundle(), &cfg(seed, 60), &PerBundle(10.0)).unwrap();
            match out.status {
                SearchStatus::Satisfied => {
                    assert_eq!(out.best.bundles.len(), 4, "seed {}", seed);
                    satisfied += 1;
                }
                SearchStatus::Stalled => {
                    let tail = &out.trace[out.trace.len() - STALL_ROUNDS..];
                    assert!(tail.iter().all(|r| !r.accepted), "seed {}", seed);
                }
                SearchStatus::Exhausted => panic!("seed {} ran out of iterations", seed),
            }
        }
        // three replication draws are needed before nine misses in a row
        assert!(satisfied >= 40, "{} of 50", satisfied);
    }

    #[test]
    fn satisfied_initial_is_returned_unchanged() {
        let mut net = one_bundle();
        net.bundles = vec![net.bundles[0].clone(); 4];
        let out = scd_search(&net, &cfg(1, 20), &PerBundle(10.0)).unwrap();
        assert_eq!(out.status, SearchStatus::Satisfied);
        assert_eq!(out.best, net);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn zero_iterations_exhaust() {
        let out = scd_search(&one_bundle(), &cfg(1, 0), &PerBundle(10.0)).unwrap();
        assert_eq!(out.status, SearchStatus::Exhausted);
        assert_eq!(out.best, one_bundle());
    }

    #[test]
    fn unreachable_budget_stalls() {
        let mut c = cfg(3, 1000);
        // every network needs at least one compute unit
        c.res_max.insert(RES_COMPUTE.into(), 0.5);
        let out = scd_search(&one_bundle(), &c, &PerBundle(10.0)).unwrap();
        assert_eq!(out.status, SearchStatus::Stalled);
        assert!(out.trace.iter().skip(1).all(|r| !r.accepted));
        assert_eq!(out.trace.len(), 1 + STALL_ROUNDS);
    }

    #[test]
    fn trace_specs_stay_valid_and_objective_never_worsens() {
        let c = SearchConfig {
            lat_targ_ms: 3.0,
            epsilon_ms: 0.1,
            res_max: [
                (RES_COMPUTE.to_string(), 1e6),
                (RES_MEMORY.to_string(), 1e12),
            ]
            .into_iter()
            .collect(),
            max_iters: 30,
            rng_seed: 9,
        };
        let p = crate::costmodel::HardwareProfile::reference();
        let net = build_skynet(Variant::A).with_input(32, 64);
        let out = scd_search(&net, &c, &p).unwrap();
        assert!(validate(&out.best).is_ok());
        let mut last = f64::INFINITY;
        for r in out.trace.iter().filter(|r| r.accepted) {
            let d = c.distance(r.lat_ms);
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn replication_remaps_pools_and_bypass() {
        let net = build_skynet(Variant::C);
        let d = duplicate(&net, 2);
        assert_eq!(d.pool_after, [0, 1, 3].into_iter().collect());
        assert_eq!(d.bypass, Some(Bypass { source: 3, dest: 5 }));
        assert!(validate(&d).is_ok());
        // pools after bundles 0 and 1 would merge
        assert!(remove(&net, 1).is_none());
        let r = remove(&net, 3).unwrap();
        assert_eq!(r.bypass, Some(Bypass { source: 2, dest: 3 }));
        assert!(validate(&r).is_ok());
        assert!(remove(&one_bundle(), 0).is_none());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = cfg(1, 5);
        c.epsilon_ms = 40.0;
        assert!(scd_search(&one_bundle(), &c, &PerBundle(10.0)).is_err());
        let mut c = cfg(1, 5);
        c.res_max.clear();
        assert!(scd_search(&one_bundle(), &c, &PerBundle(10.0)).is_err());
    }

    #[test]
    fn trace_json_shape() {
        let out = scd_search(&one_bundle(), &cfg(42, 20), &PerBundle(10.0)).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(out.trace_jsonl().lines().nth(1).unwrap()).unwrap();
        for k in ["iter", "coordinate", "move", "lat_ms", "res", "accepted"] {
            assert!(first.get(k).is_some(), "missing {}", k);
        }
    }
}
