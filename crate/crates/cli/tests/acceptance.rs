//! End-to-end acceptance checks. Runs without the libtest harness so the
//! verdict lines are always printed; exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use skynet_core::arch::{
    build_skynet, count_params, forward, infer_shapes, Bundle, LayerSpec, NetSpec, Site, Variant,
    WeightSet,
};
use skynet_core::costmodel::{CostError, CostEstimate, CostModel, RES_COMPUTE, RES_MEMORY};
use skynet_core::detect::{
    analyze_size_distribution, energy_score, synthetic_manifest, total_score, Track,
};
use skynet_core::quant::{quantized_forward, FixedPointFormat, QuantConfig};
use skynet_core::search::{scd_search, SearchConfig, SearchStatus};
use skynet_core::tensor::{
    batchnorm_infer, depth_to_space, dw_conv3, gradcheck_all, maxpool2, pw_conv1, space_to_depth,
    BatchNormParams, Tensor, GRADCHECK_STEP,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter budget", parameter_budget),
        ("shape trace", shape_trace),
        ("operator oracles", operator_oracles),
        ("gradient suite", gradient_suite),
        ("reorder losslessness", reorder_lossless),
        ("scoring algebra", scoring_algebra),
        ("quantization", quantization),
        ("search convergence", search_convergence),
        ("size distribution", size_distribution),
        ("end-to-end smoke", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {}", msg))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {:2} {}: {} ({:.2} s)", i + 1, name, detail, secs),
            Err(why) => {
                failed += 1;
                println!("FAIL {:2} {}: {} ({:.2} s)", i + 1, name, why, secs);
            }
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    if e > limit {
        return Err(format!("took {:.2?}, limit {:.0?}", e, limit));
    }
    Ok(())
}

// ---------------------------------------------------------------- 1

/// Scalars of one separable bundle: dw 9C, bn 4C, pw C*K, bn 4K.
fn separable_scalars(cin: usize, cout: usize) -> usize {
    9 * cin + 4 * cin + cin * cout + 4 * cout
}

fn parameter_budget() -> Outcome {
    let t = Instant::now();
    let widths = [48, 96, 192, 384, 512];
    let mut scalars = 0;
    let mut cin = 3;
    for w in widths {
        scalars += separable_scalars(cin, w);
        cin = w;
    }
    // bypass concat: 512 + 4*192 channels, then DW + PW96 fusion and PW10
    let fused = 512 + 4 * 192;
    scalars += separable_scalars(fused, 96) + 96 * 10;
    let counted = count_params(&build_skynet(Variant::C)).map_err(|e| e.to_string())?;
    within(t, Duration::from_secs(1))?;
    ensure!(
        counted.total == scalars,
        "counted {} scalars, oracle {}",
        counted.total,
        scalars
    );
    ensure!(
        counted.bytes_f32 == 4 * scalars,
        "bytes {} != 4 * {}",
        counted.bytes_f32,
        scalars
    );
    let rel = counted.bytes_f32 as f64 / 1.82e6 - 1.0;
    ensure!(
        rel.abs() <= 0.05,
        "{} bytes is {:+.2}% off 1.82 MB",
        counted.bytes_f32,
        100.0 * rel
    );
    Ok(format!(
        "{} scalars, {} bytes ({:+.2}% vs 1.82 MB)",
        scalars,
        counted.bytes_f32,
        100.0 * rel
    ))
}

// ---------------------------------------------------------------- 2

fn shape_trace() -> Outcome {
    let net = build_skynet(Variant::C);
    let shapes = infer_shapes(&net).map_err(|e| e.to_string())?;
    let last_layer = |b: usize| net.bundles[b].layers.len() - 1;
    let find = |site: Site| {
        shapes
            .iter()
            .find(|s| s.site == site)
            .map(|s| s.output)
            .ok_or_else(|| format!("no layer at {}", site))
    };
    let bundles = [
        [48, 160, 320],
        [96, 80, 160],
        [192, 40, 80],
        [384, 20, 40],
        [512, 20, 40],
    ];
    for (b, want) in bundles.iter().enumerate() {
        let got = find(Site::Bundle {
            bundle: b,
            layer: last_layer(b),
        })?;
        ensure!(
            got == *want,
            "bundle {} output {:?}, expected {:?}",
            b,
            got,
            want
        );
    }
    let pools = [[48, 80, 160], [96, 40, 80], [192, 20, 40]];
    for (b, want) in pools.iter().enumerate() {
        let got = find(Site::Pool { after: b })?;
        ensure!(
            got == *want,
            "pool after {} output {:?}, expected {:?}",
            b,
            got,
            want
        );
    }
    ensure!(
        shapes
            .iter()
            .filter(|s| matches!(s.site, Site::Pool { .. }))
            .count()
            == 3,
        "expected exactly three pools"
    );
    let bypass = find(Site::BypassReorder { source: 2 })?;
    ensure!(bypass == [768, 20, 40], "bypass {:?}", bypass);
    let concat = find(Site::BypassConcat { dest: 4 })?;
    ensure!(concat == [1280, 20, 40], "concat {:?}", concat);
    let head = shapes.last().unwrap();
    ensure!(
        matches!(head.site, Site::Head { .. }),
        "last layer is {}",
        head.site
    );
    ensure!(head.output == [10, 20, 40], "head {:?}", head.output);
    Ok("bundles, pools, bypass (768,20,40), concat (1280,20,40), head (10,20,40)".into())
}

// ---------------------------------------------------------------- 3

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0)).unwrap()
}

fn worst_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64, String> {
    ensure!(
        a.shape() == b.shape(),
        "shape {:?} vs oracle {:?}",
        a.shape(),
        b.shape()
    );
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max))
}

fn naive_dw(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for u in 0..3 {
                    for v in 0..3 {
                        let (si, sj) = (i as isize + u as isize - 1, j as isize + v as isize - 1);
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                            s += k.data()[ch * 9 + u * 3 + v] * x.at3(ch, si as usize, sj as usize);
                        }
                    }
                }
                out[(ch * h + i) * w + j] = s;
            }
        }
    }
    Tensor::new(&[c, h, w], out).unwrap()
}

fn naive_pw(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    let o = k.shape()[0];
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for i in 0..h {
            for j in 0..w {
                out[(oc * h + i) * w + j] = (0..c)
                    .map(|ch| k.data()[oc * c + ch] * x.at3(ch, i, j))
                    .sum();
            }
        }
    }
    Tensor::new(&[o, h, w], out).unwrap()
}

fn naive_bn(x: &Tensor<f64>, p: &BatchNormParams<f64>, eps: f64) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    Tensor::from_fn(&[c, h, w], |k| {
        let ch = k / (h * w);
        (x.data()[k] - p.mean[ch]) / (p.var[ch] + eps).sqrt() * p.gamma[ch] + p.beta[ch]
    })
    .unwrap()
}

fn naive_pool(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    Tensor::from_fn(&[c, h / 2, w / 2], |k| {
        let (ch, r) = (k / (h * w / 4), k % (h * w / 4));
        let (i, j) = (r / (w / 2), r % (w / 2));
        let mut m = f64::NEG_INFINITY;
        for di in 0..2 {
            for dj in 0..2 {
                m = m.max(x.at3(ch, 2 * i + di, 2 * j + dj));
            }
        }
        m
    })
    .unwrap()
}

/// Output channel `4c + 2a + b` at `(i, j)` is input `(c, 2i + a, 2j + b)`.
fn naive_s2d(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..oh {
                    for j in 0..ow {
                        out[((4 * ch + 2 * a + b) * oh + i) * ow + j] =
                            x.at3(ch, 2 * i + a, 2 * j + b);
                    }
                }
            }
        }
    }
    Tensor::new(&[4 * c, oh, ow], out).unwrap()
}

fn operator_oracles() -> Outcome {
    let t = Instant::now();
    let cases = 100;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..cases {
        let c = rng.gen_range(1..7);
        let h = 2 * rng.gen_range(1..7);
        let w = 2 * rng.gen_range(1..7);
        let x = random(&mut rng, &[c, h, w]);
        let k = random(&mut rng, &[c, 3, 3]);
        let o = rng.gen_range(1..9);
        let p = random(&mut rng, &[o, c]);
        let bn = BatchNormParams {
            gamma: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
            beta: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            mean: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.1..3.0)).collect(),
        };
        let e = |a: Result<Tensor<f64>, _>, b: Tensor<f64>| -> Result<f64, String> {
            worst_error(
                &a.map_err(|e: skynet_core::tensor::TensorError| e.to_string())?,
                &b,
            )
        };
        for (name, err) in [
            ("dw_conv3", e(dw_conv3(&x, &k), naive_dw(&x, &k))?),
            ("pw_conv1", e(pw_conv1(&x, &p), naive_pw(&x, &p))?),
            (
                "batchnorm_infer",
                e(batchnorm_infer(&x, &bn, 1e-5), naive_bn(&x, &bn, 1e-5))?,
            ),
            ("maxpool2", e(maxpool2(&x), naive_pool(&x))?),
            ("space_to_depth", e(space_to_depth(&x), naive_s2d(&x))?),
        ] {
            let slot = worst.entry(name).or_insert(0.0);
            *slot = slot.max(err);
        }
    }
    within(t, Duration::from_secs(30))?;
    for (name, err) in &worst {
        ensure!(
            *err <= 1e-12,
            "{} error {:e} over {} cases",
            name,
            err,
            cases
        );
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    Ok(format!(
        "5 operators x {} tensors, worst relative error {:.1e}",
        cases, max
    ))
}

// ---------------------------------------------------------------- 4

fn gradient_suite() -> Outcome {
    let trials = 20;
    let r = gradcheck_all(99, trials).map_err(|e| e.to_string())?;
    ensure!(
        r.step == GRADCHECK_STEP && GRADCHECK_STEP == 1e-5,
        "step {}",
        r.step
    );
    for op in &r.ops {
        ensure!(op.trials >= 20, "{} ran {} trials", op.op, op.trials);
        ensure!(
            op.max_rel_error <= 1e-4,
            "{} error {:e}",
            op.op,
            op.max_rel_error
        );
    }
    let worst = r.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} ops x {} trials, worst relative error {:.1e}",
        r.ops.len(),
        trials,
        worst
    ))
}

// ---------------------------------------------------------------- 5

fn reorder_lossless() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = 100;
    for n in 0..cases {
        let shape = [
            rng.gen_range(1..9),
            2 * rng.gen_range(1..9),
            2 * rng.gen_range(1..9),
        ];
        let x = Tensor::from_fn(&shape, |_| rng.gen::<f64>() * 1e6 - 5e5).unwrap();
        let back = depth_to_space(&space_to_depth(&x).unwrap()).unwrap();
        ensure!(
            back.shape() == x.shape()
                && back
                    .data()
                    .iter()
                    .zip(x.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
            "case {} with shape {:?} is not restored bit for bit",
            n,
            shape
        );
    }
    Ok(format!("{} tensors restored bit for bit", cases))
}

// ---------------------------------------------------------------- 6

fn scoring_algebra() -> Outcome {
    let es = |e: f64, m: f64, t: Track| energy_score(e, m, t).map_err(|e| e.to_string());
    ensure!(es(3.7, 3.7, Track::Gpu)? == 1.0, "gpu es at mean");
    ensure!(es(3.7, 3.7, Track::Fpga)? == 1.0, "fpga es at mean");
    let ten = es(1.0, 10.0, Track::Gpu)?;
    ensure!((ten - 1.2).abs() < 1e-12, "gpu es at ratio 10 = {}", ten);
    // 1 + 0.2 log10(1e-6) < 0
    ensure!(es(1e6, 1.0, Track::Gpu)? == 0.0, "es not clamped at 0");
    ensure!(
        es(1e6, 1.0, Track::Fpga)? == 0.0,
        "fpga es not clamped at 0"
    );
    let a = total_score(0.731, 1.0575);
    let b = total_score(0.716, 1.1313);
    ensure!(format!("{:.3}", a) == "1.504", "ts(0.731, 1.0575) = {}", a);
    ensure!(format!("{:.3}", b) == "1.526", "ts(0.716, 1.1313) = {}", b);
    Ok(format!("ts = {:.3} and {:.3}", a, b))
}

// ---------------------------------------------------------------- 7

/// Mean |float - quantized| on SkyNet C, fan-in scaled weights (seed 7),
/// uniform [0, 1) input (seed 1), default 11/9-bit configuration. Generated
/// by the float-emulation oracle in the core crate's tests.
const SKYNET_C_MAD: f64 = 9.994_631_947_701_898e-3;

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let mut worst_ratio = 0.0f64;
    for (bits, frac) in [(9u8, 6), (11, 10)] {
        for signed in [false, true] {
            let f = FixedPointFormat::new(bits, frac, signed).map_err(|e| e.to_string())?;
            for _ in 0..n {
                let x = rng.gen_range(f.min_value()..=f.max_value());
                let err = (f.dequantize_scalar(f.quantize_scalar(x)) - x).abs();
                ensure!(err <= f.step() / 2.0, "{} at {}: error {:e}", f, x, err);
                worst_ratio = worst_ratio.max(err / f.step());
            }
        }
    }

    let net = build_skynet(Variant::C);
    let w = WeightSet::random_he(&net, 7).map_err(|e| e.to_string())?;
    let mut irng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&net.input_shape, |_| irng.gen_range(0.0..1.0)).unwrap();
    let cfg = QuantConfig::default();
    let q1 = quantized_forward(&net, &w, &x, cfg).map_err(|e| e.to_string())?;
    let q2 = quantized_forward(&net, &w, &x, cfg).map_err(|e| e.to_string())?;
    ensure!(q1 == q2, "quantized forward is not deterministic");
    let f = forward(&net, &w, &x).map_err(|e| e.to_string())?;
    let mad = f.zip_with(&q1, |a, b| (a - b).abs()).unwrap().sum() / f.len() as f64;
    ensure!(
        (mad - SKYNET_C_MAD).abs() <= 1e-9,
        "deviation {:e}, fixture {:e}",
        mad,
        SKYNET_C_MAD
    );
    Ok(format!(
        "worst round-trip {:.3} step over 4x{} scalars; deviation {:.6e} matches fixture",
        worst_ratio, n, mad
    ))
}

// ---------------------------------------------------------------- 8

struct PerBundle(f64);

impl CostModel for PerBundle {
    fn estimate(&self, net: &NetSpec) -> Result<CostEstimate, CostError> {
        let n = net.bundles.len() as f64;
        let mut e = CostEstimate::zero();
        e.latency_ms = self.0 * n;
        e.resources.insert(RES_COMPUTE.into(), n);
        Ok(e)
    }
}

fn search_convergence() -> Outcome {
    let initial = NetSpec {
        input_shape: [3, 32, 64],
        bundles: vec![Bundle::new(vec![LayerSpec::DwConv3])],
        pool_after: Default::default(),
        bypass: None,
        head: vec![LayerSpec::PwConv1 { out_channels: 10 }],
        bn_eps: 1e-5,
    };
    let cfg = SearchConfig {
        lat_targ_ms: 40.0,
        epsilon_ms: 5.0,
        res_max: [
            (RES_COMPUTE.to_string(), 100.0),
            (RES_MEMORY.to_string(), 1.0),
        ]
        .into_iter()
        .collect(),
        max_iters: 20,
        rng_seed: 42,
    };
    let a = scd_search(&initial, &cfg, &PerBundle(10.0)).map_err(|e| e.to_string())?;
    let b = scd_search(&initial, &cfg, &PerBundle(10.0)).map_err(|e| e.to_string())?;
    ensure!(a.status == SearchStatus::Satisfied, "status {:?}", a.status);
    ensure!(
        a.best.bundles.len() == 4,
        "{} bundles",
        a.best.bundles.len()
    );
    ensure!(a.iterations <= 20, "{} iterations", a.iterations);
    ensure!(
        a.trace_jsonl().as_bytes() == b.trace_jsonl().as_bytes(),
        "traces differ"
    );
    Ok(format!(
        "satisfied with 4 bundles after {} iterations, trace reproducible",
        a.iterations
    ))
}

// ---------------------------------------------------------------- 9

fn size_distribution() -> Outcome {
    let m = synthetic_manifest(100_000, 2019);
    let d = analyze_size_distribution(&m, &[0.0, 0.01, 0.09, 1.0]).map_err(|e| e.to_string())?;
    let c = d.cdf_at(0.09).ok_or("0.09 is not a bin edge")?;
    ensure!((c - 0.91).abs() <= 0.01, "CDF(0.09) = {}", c);
    Ok(format!("CDF(0.09) = {:.4} over {} boxes", c, d.total))
}

// ---------------------------------------------------------------- 10

fn skynet(args: &[&str]) -> Result<Value, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_skynet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        o.status.success(),
        "`skynet {}` exited with {:?}: {}",
        args.join(" "),
        o.status.code(),
        String::from_utf8_lossy(&o.stderr).trim()
    );
    serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let model = root.join("model");
    let data = root.join("data");
    skynet(&["build", "--variant", "C", "--seed", "1", "--out", s(&model)])?;
    skynet(&[
        "synth",
        "--count",
        "10",
        "--seed",
        "3",
        "--width",
        "320",
        "--height",
        "160",
        "--out",
        s(&data),
    ])?;
    let energy = root.join("energy.json");
    std::fs::write(
        &energy,
        r#"{"energy_j": 2.0, "all_entries_j": [1.0, 2.0, 4.0, 8.0]}"#,
    )
    .map_err(|e| e.to_string())?;
    let manifest = data.join("manifest.jsonl");
    let ids: Vec<String> = std::fs::read_to_string(&manifest)
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["image_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    ensure!(ids.len() == 10, "{} images in the manifest", ids.len());

    let mut summary = Vec::new();
    for (mode, extra) in [("float", None), ("quantized", Some("--quantized"))] {
        let mut lines = String::new();
        for id in &ids {
            let img = data.join("images").join(format!("{}.ppm", id));
            let mut args = vec!["infer", "--model", s(&model), "--image", s(&img)];
            args.extend(extra);
            lines.push_str(&skynet(&args)?.to_string());
            lines.push('\n');
        }
        let preds = root.join(format!("{}.jsonl", mode));
        std::fs::write(&preds, lines).map_err(|e| e.to_string())?;
        let report = skynet(&[
            "score",
            "--predictions",
            s(&preds),
            "--ground-truth",
            s(&manifest),
            "--energy-report",
            s(&energy),
            "--track",
            "fpga",
        ])?;
        let f = |k: &str| report[k].as_f64().ok_or(format!("report has no {}", k));
        let (r, es, ts) = (f("r_iou")?, f("es")?, f("ts")?);
        ensure!(
            ts == r * (1.0 + es),
            "{}: ts {} != {} * (1 + {})",
            mode,
            ts,
            r,
            es
        );
        ensure!(
            report["images"] == 10,
            "{}: {} images scored",
            mode,
            report["images"]
        );
        summary.push(format!("{} ts {:.4}", mode, ts));
    }
    within(t, Duration::from_secs(60))?;
    Ok(summary.join(", "))
}
