//! Acceptance suite. Criteria run one after another in a single test so the
//! timing criterion is not disturbed by concurrent work; each prints one
//! PASS/FAIL line straight to stdout.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use mixprec::inference::{convnet_blueprint, qe_accuracy_correlation, random_batch, ConvNetConfig};
use mixprec::model::{generate_synthetic_model, load_quantized, save_quantized, SyntheticSpec};
use mixprec::quant::{roundtrip, QuantParams};
use mixprec::search::build_error_table_with;
use mixprec::sensitivity::check_sweep_isolation;
use mixprec::{
    dequantize, oracle_select, quantize, select_bitwidths, sweep_qems, AffineQuantizer,
    BitAllocation32, BitWidth, ErrorTable32, LayerRecord, LayerType, ModelWeights32,
    QuantizedTensor32, Quantizer, Real, Tensor, Tensor32,
};
use mixprec_cli::runtime::qem_grid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Four significant decimals with a signed two-digit exponent: `-4.9900e-03`.
fn sci4(v: f32) -> String {
    let s = format!("{v:.4e}");
    let (mantissa, exp) = s.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn ulps_apart(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    key(a).abs_diff(key(b))
}

fn criterion_1() -> Outcome {
    let input = [0.005f32, 0.0002, 0.01, 0.003];
    let bias = 0.00001f32;
    let weight = Tensor32::from_vec(vec![-1.0, 0.01, 1.0, 2.0]).unwrap();
    let b2 = BitWidth::new(2).unwrap();

    let run = || {
        let q = quantize(&weight, b2).unwrap();
        let dq = dequantize(&q);
        let sim: Vec<f32> = input
            .iter()
            .zip(dq.values())
            .map(|(&x, &w)| x * w + bias)
            .collect();
        (q, dq, sim)
    };
    let t0 = Instant::now();
    let (q, dq, sim) = run();
    let elapsed = t0.elapsed();

    ensure(q.codes() == [-2, -1, 0, 1], || {
        format!("codes {:?}", q.codes())
    })?;
    ensure(dq.values() == [-1.0, 0.0, 1.0, 2.0], || {
        format!("dequantized {:?}", dq.values())
    })?;

    let printed = ["-4.9900e-03", "1.0000e-05", "1.0010e-02", "6.0100e-03"];
    let expected_bits = [0xbba38327u32, 0x3727c5ac, 0x3c2400fb, 0x3bc4ef89];
    let reference: Vec<f32> = input
        .iter()
        .zip(weight.values())
        .map(|(&x, &w)| x * w + bias)
        .collect();
    ensure(sci4(reference[1]) == "1.2000e-05", || {
        format!("f32 result {}", sci4(reference[1]))
    })?;
    let mut max_ulps = 0;
    for i in 0..4 {
        ensure(sim[i].to_bits() == expected_bits[i], || {
            format!(
                "element {i}: bits {:#x} != {:#x}",
                sim[i].to_bits(),
                expected_bits[i]
            )
        })?;
        ensure(sci4(sim[i]) == printed[i], || {
            format!("element {i}: printed {}", sci4(sim[i]))
        })?;
        let u = ulps_apart(sim[i], printed[i].parse().unwrap());
        ensure(u <= 1, || {
            format!("element {i}: {u} ulps from printed value")
        })?;
        max_ulps = max_ulps.max(u);
    }
    ensure(elapsed < Duration::from_millis(1), || {
        format!("runtime {elapsed:?}")
    })?;
    Ok(format!("codes/dequant exact, simulated result bit-exact, max {max_ulps} ulp to printed decimals, {elapsed:?}"))
}

fn slack(a: f32, b: f32) -> f64 {
    4.0 * a.abs().max(b.abs()).ulp() as f64
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut elements, mut unclamped) = (0u64, 0u64);
    for case in 0..10_000 {
        let n = rng.random_range(1..=4096);
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(-10.0f32..=10.0)).collect();
        let t = Tensor32::from_vec(values).unwrap();
        for b in BitWidth::ALL {
            let q = quantize(&t, b).unwrap();
            let p: QuantParams<f32> = *q.params();
            let s = p.scale() as f64;
            let back = dequantize(&q);
            for (&v, &r) in t.values().iter().zip(back.values()) {
                let err = (v as f64 - r as f64).abs();
                ensure(err <= 1.5 * s + slack(v, r), || {
                    format!("case {case} b={b}: |{v} - {r}| = {err} > 1.5*{s}")
                })?;
                let raw = p.raw_code(v);
                if raw >= b.qmin() as i64 && raw <= b.qmax() as i64 {
                    unclamped += 1;
                    ensure(err <= 0.5 * s + slack(v, r), || {
                        format!("case {case} b={b}: unclamped |{v} - {r}| = {err} > {s}/2")
                    })?;
                }
            }
            elements += n as u64;
        }
    }
    Ok(format!(
        "10000 tensors x 7 widths, {elements} elements ({unclamped} unclamped), 0 violations"
    ))
}

/// Random error tables: mostly error-decreasing-with-width rows, plus
/// arbitrary rows, ties and zero baselines; random width subsets containing 8.
fn random_table(rng: &mut ChaCha8Rng) -> ErrorTable32 {
    let layers = rng.random_range(1..=200);
    let mut bits: Vec<BitWidth> = BitWidth::ALL.to_vec();
    if rng.random_bool(0.3) {
        bits.retain(|b| *b == BitWidth::INT8 || rng.random_bool(0.6));
    }
    bits.shuffle(rng);
    let rows = (0..layers)
        .map(|_| {
            let kind = rng.random_range(0..10);
            let base: f32 = 10f32.powf(rng.random_range(-8.0..-1.0));
            bits.iter()
                .map(|b| match kind {
                    0 => rng.random_range(0.0f32..1.0),
                    1 => 0.0,
                    2 => (rng.random_range(0..4) as f32) * 0.25,
                    _ => base * 4f32.powi(8 - b.bits() as i32) * rng.random_range(0.5f32..2.0),
                })
                .collect()
        })
        .collect();
    let names = (0..layers).map(|i| format!("layer{i}")).collect();
    ErrorTable32::new(names, bits, rows).unwrap()
}

fn corpus() -> Vec<(ErrorTable32, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..1000)
        .map(|_| {
            let t = random_table(&mut rng);
            let qem = rng.random_range(0.5f32..=10.0);
            (t, qem)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut fallbacks = 0;
    for (i, (t, qem)) in corpus().iter().enumerate() {
        let got = select_bitwidths(t, *qem).unwrap();
        let want = oracle_select(t, *qem).unwrap();
        ensure(got == want, || {
            format!("table {i} qem {qem}: {got:?} != {want:?}")
        })?;
        fallbacks += got.fallback_layers().len();
    }
    Ok(format!(
        "1000 tables, all equal to the oracle ({fallbacks} fallback layers compared)"
    ))
}

fn criterion_4() -> Outcome {
    let mut checked = 0;
    for (i, (t, qem)) in corpus().iter().enumerate() {
        let a = select_bitwidths(t, *qem).unwrap();
        for (l, name) in t.layer_names().iter().enumerate() {
            let limit = t.baseline_qe()[l] * qem;
            let chosen = a.bits_for(name).unwrap();
            let feasible = |b: BitWidth| t.qe(l, b).unwrap() <= limit;
            if a.is_fallback(name) {
                ensure(chosen == BitWidth::INT8, || {
                    format!("table {i} {name}: fallback at {chosen}")
                })?;
                ensure(!t.bit_widths().iter().any(|&b| feasible(b)), || {
                    format!("table {i} {name}: flagged infeasible but a width fits")
                })?;
            } else {
                ensure(feasible(chosen), || {
                    format!("table {i} {name}: {chosen} violates the constraint")
                })?;
                ensure(
                    !t.bit_widths().iter().any(|&b| b < chosen && feasible(b)),
                    || format!("table {i} {name}: a width below {chosen} is feasible"),
                )?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} layer choices feasible and minimal"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for sweep in 0..200 {
        let t = random_table(&mut rng);
        let m = rng.random_range(2..=12);
        let mut qems: Vec<f32> = (0..m).map(|_| rng.random_range(0.5f32..=10.0)).collect();
        qems.sort_by(f32::total_cmp);
        let allocs = sweep_qems(&t, &qems).unwrap();
        for w in allocs.windows(2) {
            for name in t.layer_names() {
                let (lo, hi) = (w[0].bits_for(name).unwrap(), w[1].bits_for(name).unwrap());
                ensure(hi <= lo, || {
                    format!(
                        "sweep {sweep} {name}: {lo} at qem {} then {hi} at qem {}",
                        w[0].qem(),
                        w[1].qem()
                    )
                })?;
            }
        }
    }
    Ok("200 sweeps, 0 violations".into())
}

#[derive(Default)]
struct Counting {
    calls: AtomicUsize,
}

impl Quantizer<f32> for Counting {
    fn quantize(&self, t: &Tensor32, bits: BitWidth) -> mixprec::Result<QuantizedTensor32> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        AffineQuantizer.quantize(t, bits)
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let sizes = [50usize, 100, 200, 400];
    let qems = qem_grid(10);
    let bits = BitWidth::ALL;
    let mut models = Vec::with_capacity(sizes.len());
    for &l in &sizes {
        let model: ModelWeights32 = generate_synthetic_model(&SyntheticSpec::dense_stack(
            &format!("dense{l}"),
            6,
            l,
            64,
            128,
        ))
        .unwrap();

        let counter = Counting::default();
        let table = build_error_table_with(&model, &bits, &counter).unwrap();
        sweep_qems(&table, &qems).unwrap();
        let calls = counter.calls.load(Ordering::Relaxed);
        ensure(calls == l * bits.len(), || {
            format!("L={l}: {calls} quantize calls, expected {}", l * bits.len())
        })?;
        models.push(model);
    }

    // Repeats are interleaved across sizes so a burst of background load
    // does not land on a single size; the minimum per size is kept.
    let mut times = vec![Duration::MAX; sizes.len()];
    for _ in 0..7 {
        for (t, model) in times.iter_mut().zip(&models) {
            let d = mixprec_cli::time_search(model, &bits, &qems).unwrap().0;
            *t = (*t).min(d);
        }
    }
    let ratios: Vec<f64> = times
        .windows(2)
        .map(|w| w[1].as_secs_f64() / w[0].as_secs_f64())
        .collect();
    let total = start.elapsed();
    let detail = format!(
        "times {:?}, ratios [{}], total {total:.2?}",
        times,
        ratios
            .iter()
            .map(|r| format!("{r:.2}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(ratios.iter().all(|r| (1.5..=3.0).contains(r)), || {
        format!("ratio out of [1.5, 3.0]: {detail}")
    })?;
    ensure(total < Duration::from_secs(60), || {
        format!("harness too slow: {detail}")
    })?;
    Ok(format!("calls = L x 7 for every L; {detail}"))
}

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..8u64 {
        let layers = 3 + (seed as usize % 4);
        let cfg = ConvNetConfig {
            layers,
            classes: 10,
            seed,
            ..ConvNetConfig::default()
        };
        let (spec, net) = convnet_blueprint(&format!("net{seed}"), &cfg).unwrap();
        let model: ModelWeights32 = generate_synthetic_model(&spec).unwrap();
        let batch = random_batch(&net, 512, 1000 + seed);
        let r = qe_accuracy_correlation(&net, &model, &batch, &BitWidth::ALL).unwrap();
        let top1 = |b: u8| {
            r.points
                .iter()
                .find(|p| p.bits.bits() == b)
                .unwrap()
                .top1_agreement
        };
        ensure(r.rank_correlation < 0.0, || {
            format!(
                "seed {seed}: correlation {} ({:?})",
                r.rank_correlation, r.warning
            )
        })?;
        ensure(top1(8) >= top1(2), || {
            format!("seed {seed}: top1(8) {} < top1(2) {}", top1(8), top1(2))
        })?;
        lines.push(format!("{layers}L rho={:.3}", r.rank_correlation));
    }
    Ok(format!("8 seeds negative: {}", lines.join(", ")))
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Outcome {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let code = mixprec_cli::run([
                "mixprec",
                "ablate",
                "--synthetic",
                "12",
                "--seed",
                "8",
                "--out",
                dir.path().to_str().unwrap(),
            ]);
            (code, dir_contents(dir.path()))
        })
        .collect();
    ensure(runs.iter().all(|r| r.0 == 0), || {
        "ablate exited non-zero".into()
    })?;
    ensure(runs[0].1 == runs[1].1, || {
        "outputs differ between runs".into()
    })?;
    let names: Vec<&str> = runs[0].1.iter().map(|f| f.0.as_str()).collect();
    ensure(names.len() == 3, || format!("files {names:?}"))?;

    let summary = runs[0]
        .1
        .iter()
        .find(|f| f.0 == "ablate_synthetic12_most_sensitive.csv")
        .ok_or("no summary")?;
    let mut rdr = csv::Reader::from_reader(summary.1.as_slice());
    let mut widths: Vec<u8> = rdr
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    widths.sort();
    ensure(widths == [2, 3, 4, 5, 6, 7, 8], || {
        format!("summary widths {widths:?}")
    })?;

    let cfg = ConvNetConfig {
        layers: 12,
        seed: 8,
        ..ConvNetConfig::default()
    };
    let (spec, _) = convnet_blueprint("synthetic12", &cfg).unwrap();
    let model: ModelWeights32 = generate_synthetic_model(&spec).unwrap();
    let iso = check_sweep_isolation(&model, &BitWidth::ALL).unwrap();
    ensure(iso.passed(), || {
        format!("isolation violations {:?}", iso.violations)
    })?;
    Ok(format!(
        "{} files byte-identical across runs, one position per width, isolation held on {} sweep points",
        names.len(),
        iso.points_checked
    ))
}

fn random_model(rng: &mut ChaCha8Rng, i: usize) -> ModelWeights32 {
    let n = rng.random_range(1..=6);
    let layers = (0..n)
        .map(|p| {
            let dims = rng.random_range(1..=3);
            let shape: Vec<usize> = (0..dims).map(|_| rng.random_range(1..=9)).collect();
            let len: usize = shape.iter().product();
            let mode = rng.random_range(0..4);
            let scale = 10f32.powf(rng.random_range(-4.0..2.0));
            let values: Vec<f32> = (0..len)
                .map(|_| match mode {
                    0 => scale,
                    1 => rng.random_range(0.0f32..1.0) * scale,
                    _ => rng.random_range(-1.0f32..1.0) * scale,
                })
                .collect();
            LayerRecord {
                name: format!("m{i}.layer{p}"),
                position: p,
                layer_type: LayerType::ALL[rng.random_range(0..LayerType::ALL.len())],
                weights: Tensor::new(values, shape).unwrap(),
            }
        })
        .collect();
    ModelWeights32::new(format!("model{i}"), layers).unwrap()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut layers_checked = 0;
    for i in 0..100 {
        let model = random_model(&mut rng, i);
        let per_layer: Vec<(String, BitWidth)> = model
            .layers()
            .iter()
            .map(|l| (l.name.clone(), BitWidth::ALL[rng.random_range(0..7)]))
            .collect();
        let alloc =
            BitAllocation32::from_layer_bits(rng.random_range(0.5f32..10.0), per_layer, Vec::new())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_quantized(&model, &alloc, dir.path()).unwrap();
        let back = load_quantized(&manifest).unwrap();
        ensure(back.model_name == model.model_name(), || {
            format!("model {i}: name")
        })?;
        ensure(back.allocation == alloc, || {
            format!("model {i}: allocation")
        })?;
        ensure(back.layers.len() == model.len(), || {
            format!("model {i}: layer count")
        })?;
        for (l, q) in model.layers().iter().zip(&back.layers) {
            let want = AffineQuantizer
                .quantize(&l.weights, alloc.bits_for(&l.name).unwrap())
                .unwrap();
            ensure(
                q.name == l.name && q.position == l.position && q.layer_type == l.layer_type,
                || format!("model {i} {}: metadata", l.name),
            )?;
            ensure(q.tensor == want, || {
                format!("model {i} {}: codes or params", l.name)
            })?;
            ensure(
                q.tensor.params().scale().to_bits() == want.params().scale().to_bits(),
                || format!("model {i} {}: scale bits", l.name),
            )?;
            let deq = roundtrip(&l.weights, want.bit_width()).unwrap();
            let bits = |t: &Tensor32| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(bits(&dequantize(&q.tensor)) == bits(&deq), || {
                format!("model {i} {}: dequantized", l.name)
            })?;
            layers_checked += 1;
        }
    }
    Ok(format!(
        "100 models, {layers_checked} layers bit-exact after reload"
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("int2 worked example", criterion_1),
        ("roundtrip error bound", criterion_2),
        ("search oracle equivalence", criterion_3),
        ("feasibility and minimality", criterion_4),
        ("QEM monotonicity", criterion_5),
        ("linear scaling in layers", criterion_6),
        ("quantization error vs agreement", criterion_7),
        ("ablation determinism and shape", criterion_8),
        ("persistence roundtrip", criterion_9),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let line = match &outcome {
            Ok(d) => format!("criterion {}: PASS {name}: {d}", i + 1),
            Err(d) => {
                failed.push(i + 1);
                format!("criterion {}: FAIL {name}: {d}", i + 1)
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
