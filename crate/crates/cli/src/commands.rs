use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use d2q_core::eval::{kl_divergence, perplexity, reconstruction_table};
use d2q_core::io::report::write_report;
use d2q_core::io::{load_calibration, load_model, read_artifact, save_model, CalibrationSet};
use d2q_core::model::{ColScale, ModelConfig, BYTE_VOCAB};
use d2q_core::pipeline::{ablation_matrix, diagnose, run_d2quant, AblationGrid, PipelineConfig};
use d2q_core::quant::{GROUP_OVERHEAD_BITS, PER_CHANNEL};
use d2q_core::{init_random, Error, ModelBundle, QuantConfig, Quantizer};

use crate::{AblateArgs, CalibArgs, Cli, CliError, Command, DiagnoseArgs, EvalArgs, InitArgs, InspectArgs, QuantArgs, QuantizeArgs};

/// Runs one parsed command and returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Init(a) => init(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Refuses to write over an input file.
fn check_distinct(input: &Path, output: &Path) -> Result<(), CliError> {
    let same = match (input.canonicalize(), output.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    if same {
        return Err(CliError::Usage(format!("output {} would overwrite an input", output.display())));
    }
    Ok(())
}

fn read_model(path: &Path) -> Result<ModelBundle, CliError> {
    load_model(path).map_err(CliError::artifact)
}

fn read_text(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Calibration(format!("{}: {e}", path.display())))
}

fn resolve_quantizer(q: &QuantArgs, cfg: &ModelConfig) -> Result<Quantizer, CliError> {
    if q.identity {
        return Ok(Quantizer::Identity);
    }
    let group = q
        .group
        .unwrap_or(if cfg.check_group_size(128).is_ok() { 128 } else { 32 });
    let qc = QuantConfig::new(q.bits, group).map_err(CliError::run)?;
    cfg.check_group_size(group).map_err(CliError::run)?;
    Ok(Quantizer::Rtn(qc))
}

fn quantizer_label(q: &Quantizer) -> String {
    match q {
        Quantizer::Identity => "identity".into(),
        Quantizer::Rtn(c) if c.group_size == PER_CHANNEL => format!("{}-bit per-channel", c.bits),
        Quantizer::Rtn(c) => format!("{}-bit group {}", c.bits, c.group_size),
    }
}

fn load_calib(path: &Path, c: &CalibArgs) -> Result<CalibrationSet, CliError> {
    load_calibration(path, c.calib_samples, c.seq_len).map_err(CliError::calibration)
}

fn init(a: &InitArgs) -> Result<String, CliError> {
    let cfg = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_ffn: a.d_ffn,
        vocab: BYTE_VOCAB,
        max_seq: a.max_seq,
        rope_enabled: !a.no_rope,
        ..ModelConfig::toy()
    };
    let m = init_random(&cfg, a.seed).map_err(CliError::run)?;
    save_model(&m, &a.out).map_err(CliError::write)?;
    Ok(format!(
        "wrote {} ({} layers, d_model {}, seed {})",
        a.out.display(),
        cfg.n_layers,
        cfg.d_model,
        a.seed
    ))
}

fn default_report_path(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

fn quantize(a: &QuantizeArgs) -> Result<String, CliError> {
    let report_path = a.report.clone().unwrap_or_else(|| default_report_path(&a.out));
    for input in [&a.model, &a.calib] {
        check_distinct(input, &a.out)?;
        check_distinct(input, &report_path)?;
    }
    if a.out == report_path {
        return Err(CliError::Usage("--out and --report must differ".into()));
    }
    let model = read_model(&a.model)?;
    let quantizer = resolve_quantizer(&a.quant, &model.config)?;
    let calib = load_calib(&a.calib, &a.calib_args)?;
    let cfg = PipelineConfig {
        quantizer,
        dsq_iters: a.dsq_iters,
        dac_enabled: !a.no_dac,
        dsq_enabled: !a.no_dsq && !a.static_smooth,
        static_smooth_enabled: a.static_smooth,
        calib_samples: a.calib_args.calib_samples,
        calib_seq_len: a.calib_args.seq_len,
        fold_col_scale: !a.no_fold,
    };
    let mut out = run_d2quant(&model, &calib, &cfg).map_err(CliError::run)?;
    out.report.seed = a.seed;
    save_model(&out.model, &a.out).map_err(CliError::write)?;
    write_report(&out.report, &report_path).map_err(CliError::write)?;
    let s = &out.report.summary;
    Ok(format!(
        "quantized {} blocks at {}: mean predicted reduction {:.4}, realized {:.4}; wrote {} and {}",
        out.report.blocks.len(),
        quantizer_label(&quantizer),
        s.mean_predicted_reduction.unwrap_or(0.0),
        s.mean_realized_reduction.unwrap_or(0.0),
        a.out.display(),
        report_path.display()
    ))
}

fn eval(a: &EvalArgs) -> Result<String, CliError> {
    let model = read_model(&a.model)?;
    let text = read_text(&a.text)?;
    let mut result = perplexity(&model, &text, a.seq_len).map_err(CliError::run)?;
    if let Some(path) = &a.reference {
        let reference = read_model(path)?;
        result.kl_to_reference = Some(kl_divergence(&reference, &model, &text, a.seq_len).map_err(CliError::run)?);
        result.reconstruction = reconstruction_table(&reference, &model).map_err(CliError::run)?;
    }
    let mut line = format!(
        "perplexity {:.6} mean_nll {:.6} nats over {} tokens",
        result.perplexity, result.mean_nll, result.token_count
    );
    if let Some(kl) = result.kl_to_reference {
        let _ = write!(line, "; kl to reference {kl:.6}");
    }
    if let Some(path) = &a.json {
        let json = serde_json::to_string_pretty(&result).map_err(CliError::write)?;
        if path.as_os_str() == "-" {
            return Ok(json);
        }
        check_distinct(&a.model, path)?;
        d2q_core::io::artifact::write_atomic(path, json.as_bytes()).map_err(CliError::write)?;
    }
    Ok(line)
}

fn diagnose_cmd(a: &DiagnoseArgs) -> Result<String, CliError> {
    for input in [&a.model, &a.calib] {
        check_distinct(input, &a.out)?;
    }
    let model = read_model(&a.model)?;
    let quantizer = resolve_quantizer(&a.quant, &model.config)?;
    let calib = load_calib(&a.calib, &a.calib_args)?;
    let mut report = diagnose(&model, &calib, quantizer).map_err(CliError::run)?;
    report.seed = a.seed;
    write_report(&report, &a.out).map_err(CliError::write)?;
    let mut text = String::new();
    for b in &report.blocks {
        let snr = |s: &Option<d2q_core::io::report::SiteStats>| s.as_ref().map_or(0.0, |s| s.mean_snr());
        let _ = writeln!(
            text,
            "block {}: post-attn snr {:.4}, pre-norm snr {:.4}",
            b.block,
            snr(&b.post_attn),
            snr(&b.pre_norm)
        );
    }
    let _ = write!(
        text,
        "mean post-attn snr {:.4}, mean pre-norm snr {:.4}; wrote {}",
        report.summary.mean_post_attn_snr.unwrap_or(0.0),
        report.summary.mean_pre_norm_snr.unwrap_or(0.0),
        a.out.display()
    );
    Ok(text)
}

fn inspect(a: &InspectArgs) -> Result<String, CliError> {
    let art = read_artifact(&a.model).map_err(CliError::artifact)?;
    let bundle = art.to_bundle().map_err(CliError::artifact)?;
    if a.json {
        return serde_json::to_string_pretty(&art.manifest).map_err(CliError::write);
    }
    let c = &art.manifest.config;
    let mut settings = BTreeSet::new();
    let (mut quantized, mut dense) = (0usize, 0usize);
    for b in &bundle.blocks {
        for name in d2q_core::model::PROJECTIONS {
            match b.projection(name).and_then(|w| w.as_quantized()) {
                Some(q) => {
                    quantized += 1;
                    settings.insert((q.bits(), q.group_size()));
                }
                None => dense += 1,
            }
        }
    }
    let count = |f: fn(&ColScale) -> bool| bundle.blocks.iter().filter(|b| f(&b.down_col_scale)).count();
    let folded = count(|c| matches!(c, ColScale::Folded(_)));
    let explicit = count(|c| matches!(c, ColScale::Explicit(_)));

    let mut out = String::new();
    let _ = writeln!(out, "format     {} ({}, {}-byte aligned)", art.manifest.format_version, art.manifest.byte_order, art.manifest.alignment);
    let _ = writeln!(
        out,
        "config     layers {}, d_model {}, heads {}, d_ffn {}, vocab {}, max_seq {}, rope {}",
        c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab, c.max_seq, c.rope_enabled
    );
    let _ = writeln!(out, "tensors    {} ({} payload bytes)", art.manifest.tensors.len(), art.manifest.payload_length);
    let settings_text: Vec<String> = settings
        .iter()
        .map(|&(b, g)| if g == PER_CHANNEL { format!("{b}-bit per-channel") } else { format!("{b}-bit group {g}") })
        .collect();
    let _ = writeln!(
        out,
        "weights    {quantized} quantized projections{}, {dense} dense",
        if settings_text.is_empty() { String::new() } else { format!(" ({})", settings_text.join(", ")) }
    );
    let _ = writeln!(out, "col scale  folded in {folded} blocks, explicit in {explicit}");
    let ratio = art.theoretical_ratio();
    let _ = write!(out, "ratio      {ratio:.4} (projection payload vs 16-bit dense)");
    if let (0, [(b, g)]) = (dense, settings.iter().copied().collect::<Vec<_>>().as_slice()) {
        if *g != PER_CHANNEL {
            let formula = 16.0 / (*b as f64 + GROUP_OVERHEAD_BITS as f64 / *g as f64);
            let _ = write!(out, "; 16/({b} + {GROUP_OVERHEAD_BITS}/{g}) = {formula:.4}");
        }
    }
    Ok(out)
}

fn ablate(a: &AblateArgs) -> Result<String, CliError> {
    for input in [Some(&a.model), Some(&a.calib), a.holdout.as_ref()].into_iter().flatten() {
        check_distinct(input, &a.out)?;
    }
    let model = read_model(&a.model)?;
    let quantizer = resolve_quantizer(&a.quant, &model.config)?;
    let text = read_text(&a.calib)?;
    let (calib_bytes, holdout) = match &a.holdout {
        Some(p) => (text.clone(), read_text(p)?),
        None => {
            let split = text.len() * 4 / 5;
            (text[..split].to_vec(), text[split..].to_vec())
        }
    };
    let samples = a.calib_grid.iter().copied().chain([a.calib_args.calib_samples]).max().unwrap_or(1);
    let calib = CalibrationSet::from_bytes(&calib_bytes, samples, a.calib_args.seq_len).map_err(CliError::calibration)?;
    let base = PipelineConfig {
        quantizer,
        dsq_iters: a.dsq_iters,
        calib_samples: a.calib_args.calib_samples,
        calib_seq_len: a.calib_args.seq_len,
        ..PipelineConfig::default()
    };
    let grid = AblationGrid {
        components: true,
        static_smooth: !a.no_static_smooth,
        dsq_iters: a.iters_grid.clone(),
        calib_sizes: a.calib_grid.clone(),
        eval_seq_len: a.eval_seq_len,
        holdout_sequences: a.holdout_sequences,
    };
    let mut report = ablation_matrix(&model, &calib, &holdout, &base, &grid).map_err(|e| match e {
        // The held-out text is chunked into sequences inside the grid run.
        Error::Calibration(m) => CliError::Calibration(format!("held-out text: {m}")),
        other => CliError::run(other),
    })?;
    report.seed = a.seed;
    write_report(&report, &a.out).map_err(CliError::write)?;

    let mut out = format!("full precision perplexity {:.4}\n", report.full_precision_perplexity);
    let _ = writeln!(out, "{:<12} {:<22} {:>12} {:>10} {:>10} {:>10}", "group", "cell", "perplexity", "rel_err", "down_err", "realized");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<12} {:<22} {:>12.4} {:>10.5} {:>10.5} {:>10.4}",
            r.group, r.label, r.perplexity, r.mean_rel_err, r.down_rel_err, r.realized_reduction
        );
    }
    let _ = write!(out, "wrote {} ({} rows)", a.out.display(), report.rows.len());
    Ok(out)
}
