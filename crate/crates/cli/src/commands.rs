use std::path::PathBuf;

use mixprec::inference::{
    convnet_blueprint, evaluate_agreement, load_batch, qe_accuracy_correlation, random_batch,
    ConvNetConfig, NetworkSpec,
};
use mixprec::model::{generate_synthetic_model, load_model, save_model, save_quantized};
use mixprec::search::theoretical_size_bytes;
use mixprec::sensitivity::{
    check_sweep_isolation, layer_position_rqe, layer_type_sweep, SweepMetrics,
};
use mixprec::{select_bitwidths, AffineQuantizer, BitAllocation32, ModelWeights32, Tensor};

use crate::args::{CommandKind, GenerateArgs, ModelSource, RunConfig};
use crate::output::{
    write_json, write_rows, CorrelationSummaryRow, QuantizeRow, RqeRow, SensitiveRow, SummaryRow,
    TypeSweepRow,
};
use crate::runtime::{materialize, measure_runtime, time_search, RuntimeReport};
use crate::{CliError, CliResult, Command};

pub fn dispatch(command: Command) -> CliResult<()> {
    let (kind, args) = match command {
        Command::Generate(g) => return cmd_generate(&g).map(|_| ()),
        Command::Quantize(a) => (CommandKind::Quantize, a),
        Command::Search(a) => (CommandKind::Search, a),
        Command::Sweep(a) => (CommandKind::Sweep, a),
        Command::Ablate(a) => (CommandKind::Ablate, a),
        Command::Correlate(a) => (CommandKind::Correlate, a),
        Command::Report(a) => (CommandKind::Report, a),
    };
    let cfg = RunConfig::from_args(kind, args)?;
    let written = run_config(&cfg)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Runs a validated configuration and returns the files written.
pub fn run_config(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    match cfg.command {
        CommandKind::Quantize => cmd_quantize(cfg),
        CommandKind::Search => cmd_search(cfg),
        CommandKind::Sweep => cmd_sweep(cfg),
        CommandKind::Ablate => cmd_ablate(cfg),
        CommandKind::Correlate => cmd_correlate(cfg),
        CommandKind::Report => cmd_report(cfg),
    }
}

pub struct Workload {
    pub model: ModelWeights32,
    pub network: Option<NetworkSpec>,
}

pub fn synthetic_name(layers: usize) -> String {
    format!("synthetic{layers}")
}

pub fn load_workload(cfg: &RunConfig) -> CliResult<Workload> {
    let (model, mut network) = match &cfg.model {
        ModelSource::Manifest(p) => (load_model(p)?, None),
        ModelSource::Synthetic(n) => {
            let conv = ConvNetConfig {
                layers: *n,
                seed: cfg.seed,
                ..ConvNetConfig::default()
            };
            let (spec, net) = convnet_blueprint(&synthetic_name(*n), &conv)?;
            (generate_synthetic_model(&spec)?, Some(net))
        }
    };
    if let Some(p) = &cfg.network {
        network = Some(NetworkSpec::load(p)?);
    }
    if let Some(net) = &network {
        net.validate(&model)?;
    }
    warn_degenerate(&model);
    Ok(Workload { model, network })
}

fn warn_degenerate(model: &ModelWeights32) {
    for l in model.layers() {
        if let Some((lo, hi)) = l.weights.min_max() {
            if lo == hi {
                eprintln!(
                    "warning: layer {} has a constant range ({lo}); scale falls back to 1.0",
                    l.name
                );
            }
        }
    }
}

fn require_network<'a>(w: &'a Workload, what: &str) -> CliResult<&'a NetworkSpec> {
    w.network
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{what} needs --network (or --synthetic)")))
}

fn batch_for(cfg: &RunConfig, net: &NetworkSpec) -> CliResult<Tensor<f32>> {
    match &cfg.batch {
        Some(p) => Ok(load_batch(p, net)?),
        None => Ok(random_batch(net, cfg.batch_size, cfg.seed)),
    }
}

fn f32_bytes(model: &ModelWeights32) -> f64 {
    4.0 * model.total_elements() as f64
}

fn stem(cfg: &RunConfig, model: &ModelWeights32, suffix: &str) -> String {
    format!("{}_{}{suffix}", cfg.command.name(), model.model_name())
}

fn summary_rows(
    cfg: &RunConfig,
    w: &Workload,
    table: &mixprec::ErrorTable32,
    allocations: &[BitAllocation32],
) -> CliResult<Vec<SummaryRow>> {
    let eval = if cfg.eval {
        let net = require_network(w, "--eval")?;
        Some((net, batch_for(cfg, net)?))
    } else {
        None
    };
    allocations
        .iter()
        .map(|a| {
            let mut row = SummaryRow {
                architecture: w.model.model_name().to_string(),
                qem: a.qem(),
                layers_bit_widths: a.bit_set_label(),
                model_qmse: table.allocation_qmse(a)?,
                fallback_layers: a.fallback_layers().len(),
                f32_bytes: f32_bytes(&w.model),
                theoretical_bytes: theoretical_size_bytes(&w.model, a)?,
                top1_agreement: None,
                topk_agreement: None,
                avg_loss: None,
            };
            if let Some((net, batch)) = &eval {
                let q = w
                    .model
                    .fake_quantize(&AffineQuantizer, |l| a.bits_for(&l.name).unwrap())?;
                let r = evaluate_agreement(net, &w.model, &q, batch, cfg.topk)?;
                row.top1_agreement = Some(r.top1_agreement);
                row.topk_agreement = Some(r.topk_agreement);
                row.avg_loss = Some(r.avg_loss);
            }
            for f in a.fallback_layers() {
                eprintln!(
                    "warning: qem {} unreachable for layer {f}; kept at 8 bits",
                    a.qem()
                );
            }
            Ok(row)
        })
        .collect()
}

fn search_outputs(cfg: &RunConfig, w: &Workload, qems: &[f32]) -> CliResult<Vec<PathBuf>> {
    let t0 = std::time::Instant::now();
    let (search, table, allocations) = time_search(&w.model, &cfg.bits, qems)?;
    materialize(&w.model, &allocations)?;
    let runtime = RuntimeReport {
        architecture: w.model.model_name().to_string(),
        search_seconds: search.as_secs_f32(),
        search_plus_quantization_seconds: t0.elapsed().as_secs_f32(),
        layer_count: w.model.len(),
        qem_count: qems.len(),
    };
    let rows = summary_rows(cfg, w, &table, &allocations)?;
    for r in &rows {
        println!(
            "{}\tqem={}\tbits=[{}]\tqmse={:e}",
            r.architecture, r.qem, r.layers_bit_widths, r.model_qmse
        );
    }
    let alloc_path = cfg
        .out
        .join(format!("{}.json", stem(cfg, &w.model, "_allocations")));
    write_json(&alloc_path, &allocations)?;
    Ok(vec![
        write_rows(&cfg.out, &stem(cfg, &w.model, ""), cfg.format, &rows)?,
        alloc_path,
        write_rows(
            &cfg.out,
            &stem(cfg, &w.model, "_runtime"),
            cfg.format,
            &[runtime],
        )?,
    ])
}

pub fn cmd_search(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    search_outputs(cfg, &w, &cfg.qems)
}

/// Ascending, duplicates removed.
pub fn dedupe_qems(qems: &[f32]) -> (Vec<f32>, usize) {
    let mut v = qems.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    let dropped = qems.len() - v.len();
    (v, dropped)
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    let (qems, dropped) = dedupe_qems(&cfg.qems);
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} duplicate qem value(s)");
    }
    search_outputs(cfg, &w, &qems)
}

pub fn cmd_quantize(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    let (allocation, qem, uniform) = match (cfg.qems.first(), cfg.uniform) {
        (Some(&q), _) => {
            if cfg.qems.len() > 1 {
                eprintln!("warning: quantize uses only the first qem ({q})");
            }
            let table = mixprec::build_error_table(&w.model, &cfg.bits)?;
            (select_bitwidths(&table, q)?, Some(q), None)
        }
        (None, Some(b)) => (BitAllocation32::uniform(&w.model, b), None, Some(b)),
        (None, None) => return Err(CliError::Usage("quantize needs --qem or --uniform".into())),
    };
    let dir = cfg.out.join(stem(cfg, &w.model, ""));
    let manifest = save_quantized(&w.model, &allocation, &dir)?;
    let q = w
        .model
        .fake_quantize(&AffineQuantizer, |l| allocation.bits_for(&l.name).unwrap())?;
    let row = QuantizeRow {
        architecture: w.model.model_name().to_string(),
        qem,
        uniform_bits: uniform,
        layers_bit_widths: allocation.bit_set_label(),
        model_qmse: mixprec::model::model_qmse(&w.model, &q)?,
        f32_bytes: f32_bytes(&w.model),
        theoretical_bytes: theoretical_size_bytes(&w.model, &allocation)?,
        stored_bytes: w.model.total_elements() as u64,
        manifest: manifest.display().to_string(),
    };
    println!(
        "{}: {} bytes f32 -> {} bytes packed ({} bytes stored as int8)",
        row.architecture, row.f32_bytes, row.theoretical_bytes, row.stored_bytes
    );
    Ok(vec![
        manifest,
        write_rows(&cfg.out, &stem(cfg, &w.model, ""), cfg.format, &[row])?,
    ])
}

pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    let mut written = Vec::new();

    let isolation = check_sweep_isolation(&w.model, &cfg.bits)?;
    if !isolation.passed() {
        return Err(CliError::Data(format!(
            "sweep isolation violated: {:?}",
            isolation.violations
        )));
    }

    match &w.network {
        Some(net) => {
            let batch = batch_for(cfg, net)?;
            let results = layer_type_sweep(&w.model, &cfg.bits, |q| {
                let r = evaluate_agreement(net, &w.model, q, &batch, 1)?;
                Ok(SweepMetrics {
                    top1_agreement: r.top1_agreement,
                    avg_loss: r.avg_loss,
                })
            })?;
            let rows: Vec<TypeSweepRow> = results
                .iter()
                .map(|r| TypeSweepRow {
                    layer_type: r.layer_type,
                    bits: r.bit_width,
                    top1_agreement: r.metrics.top1_agreement,
                    avg_loss: r.metrics.avg_loss,
                    model_qmse: r.metrics.model_qmse,
                })
                .collect();
            written.push(write_rows(
                &cfg.out,
                &stem(cfg, &w.model, "_types"),
                cfg.format,
                &rows,
            )?);
        }
        None => eprintln!("warning: no --network given; skipping the layer-type sweep"),
    }

    let table = layer_position_rqe(&w.model, &cfg.bits)?;
    let mut rows = Vec::with_capacity(w.model.len() * cfg.bits.len());
    for (l, per_bits) in w.model.layers().iter().zip(&table.rqe) {
        for (&b, &rqe) in table.bit_widths.iter().zip(per_bits) {
            rows.push(RqeRow {
                position: l.position,
                layer: l.name.clone(),
                bits: b,
                rqe,
                excluded: table.excluded[l.position],
            });
        }
    }
    written.push(write_rows(
        &cfg.out,
        &stem(cfg, &w.model, "_rqe"),
        cfg.format,
        &rows,
    )?);
    let sensitive: Vec<SensitiveRow> = table
        .most_sensitive
        .iter()
        .map(|s| SensitiveRow {
            bits: s.bits,
            most_sensitive_position: s.position,
        })
        .collect();
    written.push(write_rows(
        &cfg.out,
        &stem(cfg, &w.model, "_most_sensitive"),
        cfg.format,
        &sensitive,
    )?);
    Ok(written)
}

pub fn cmd_correlate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    let net = require_network(&w, "correlate")?;
    let batch = batch_for(cfg, net)?;
    let report = qe_accuracy_correlation(net, &w.model, &batch, &cfg.bits)?;
    if let Some(msg) = &report.warning {
        eprintln!("warning: {msg}");
    }
    println!(
        "{}: rank correlation {}",
        w.model.model_name(),
        report.rank_correlation
    );
    let summary = CorrelationSummaryRow {
        architecture: w.model.model_name().to_string(),
        points: report.points.len(),
        rank_correlation: report.rank_correlation,
        warning: report.warning.clone().unwrap_or_default(),
    };
    Ok(vec![
        write_rows(
            &cfg.out,
            &stem(cfg, &w.model, ""),
            cfg.format,
            &report.points,
        )?,
        write_rows(
            &cfg.out,
            &stem(cfg, &w.model, "_summary"),
            cfg.format,
            &[summary],
        )?,
    ])
}

pub fn cmd_report(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let w = load_workload(cfg)?;
    let table = mixprec::build_error_table(&w.model, &cfg.bits)?;
    let table_path = cfg
        .out
        .join(format!("{}.json", stem(cfg, &w.model, "_error_table")));
    write_json(&table_path, &table)?;
    let runtime = measure_runtime(&w.model, &cfg.bits, &[1, 10])?;
    for r in &runtime {
        println!(
            "{}\tlayers={}\tqems={}\tsearch={:.6}s\tsearch+quantize={:.6}s",
            r.architecture,
            r.layer_count,
            r.qem_count,
            r.search_seconds,
            r.search_plus_quantization_seconds
        );
    }
    Ok(vec![
        table_path,
        write_rows(
            &cfg.out,
            &stem(cfg, &w.model, "_runtime"),
            cfg.format,
            &runtime,
        )?,
    ])
}

/// Writes the synthetic model (manifest and blobs) and its `network.json`.
pub fn cmd_generate(g: &GenerateArgs) -> CliResult<(PathBuf, PathBuf)> {
    let conv = ConvNetConfig {
        layers: g.layers,
        classes: g.classes,
        width: g.width,
        spatial: g.spatial,
        seed: g.seed,
        ..ConvNetConfig::default()
    };
    if g.layers < 2 || g.classes == 0 || g.width == 0 || g.spatial == 0 {
        return Err(CliError::Usage(
            "generate needs --layers >= 2 and positive sizes".into(),
        ));
    }
    let (spec, net) = convnet_blueprint(&synthetic_name(g.layers), &conv)?;
    let model: ModelWeights32 = generate_synthetic_model(&spec)?;
    let manifest = save_model(&model, &g.out)?;
    let net_path = g.out.join("network.json");
    net.save(&net_path)?;
    println!("wrote {}\nwrote {}", manifest.display(), net_path.display());
    Ok((manifest, net_path))
}
