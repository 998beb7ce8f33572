//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p d2q-cli --test acceptance`. The process exits
//! non-zero if any criterion fails, except those listed in [`BLOCKED`],
//! whose failure is reported but does not fail the run.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use d2q_core::dac::{deviation_stats, predict_reduction, realized_reduction, ReductionAccumulator};
use d2q_core::dsq::{apply_updown_scaling, dsq_quantize, dual_scale_objective, fold_scale, s_step, UpDownScaling};
use d2q_core::eval::{kl_divergence, perplexity};
use d2q_core::io::artifact::ModelArtifact;
use d2q_core::io::report::{read_report, write_report, SnrReport};
use d2q_core::model::{attention_residual, mlp_forward, mlp_forward_explicit, model_forward, post_attn_norm, ColScale};
use d2q_core::pipeline::{diagnose, run_d2quant, PipelineConfig};
use d2q_core::quant::{QuantConfig, Quantizer, Weight, PER_CHANNEL};
use d2q_core::{init_random, quantize, CalibrationSet, Matrix, ModelBundle, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

mod tol {
    /// Dequantized value agreement with the scalar oracle.
    pub const DEQUANT_ABS: f64 = 1e-6;
    /// Forward agreement for transforms that are exact in real arithmetic.
    pub const FORWARD_RTOL: f64 = 1e-5;
    /// End-to-end folded vs explicit model logits.
    pub const PIPELINE_RTOL: f64 = 1e-4;
    /// Objective increase allowed after an s-step.
    pub const S_STEP_SLACK: f64 = 1e-9;
    /// Closed-form column scale vs scalar least squares.
    pub const LSQ_REL: f64 = 1e-6;
    /// Realized vs predicted reduction on calibration data.
    pub const REALIZED_ABS: f64 = 1e-6;
    /// Predicted reduction vs `snr / (1 + snr)`.
    pub const IDENTITY_ABS: f64 = 1e-9;
    /// Per-feature MSE after correction may exceed MSE before only by
    /// f64 summation noise.
    pub const MSE_SLACK: f64 = 1e-12;
}

/// Criteria that cannot pass at desk scale; see the project notes. A
/// blocked criterion is still run and reported.
const BLOCKED: &[u32] = &[7];

const SEEDS: u64 = 20;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn max_abs(m: &Matrix) -> f64 {
    m.data().iter().fold(0.0f64, |a, &v| a.max(v.abs() as f64))
}

/// `max|a − b| ≤ rtol · max|b|`.
fn close(a: &Matrix, b: &Matrix, rtol: f64) -> bool {
    a.max_abs_diff(b).unwrap() as f64 <= rtol * max_abs(b).max(f64::MIN_POSITIVE)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Scalar min-max affine quantization of one group, written directly from
/// the definition: range widened to include zero, `2^b − 1` steps,
/// half-away-from-zero rounding, codes clipped to `[0, 2^b − 1]`.
fn oracle_group(values: &[f32], bits: u8) -> (Vec<u8>, f32, u8) {
    let qmax = ((1u32 << bits) - 1) as f32;
    let lo = values.iter().copied().fold(0.0f32, f32::min);
    let hi = values.iter().copied().fold(0.0f32, f32::max);
    let s = if hi == lo { 1.0 } else { (hi - lo) / qmax };
    let z = (-lo / s).round().clamp(0.0, qmax);
    let codes = values.iter().map(|&w| ((w / s).round() + z).clamp(0.0, qmax) as u8).collect();
    (codes, s, z as u8)
}

fn random_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    match rng.random_range(0..5) {
        0 => gaussian(rng, rows, cols, 1.0),
        1 => {
            let data = (0..rows * cols).map(|_| rng.random_range(0.1f32..3.0)).collect();
            Matrix::new(rows, cols, data).unwrap()
        }
        2 => {
            let data = (0..rows * cols).map(|_| -rng.random_range(0.0f32..2.0)).collect();
            Matrix::new(rows, cols, data).unwrap()
        }
        3 => {
            let c = rng.random_range(-1.0f32..1.0);
            let data = (0..rows * cols).map(|i| if i % 3 == 0 { 0.0 } else { c }).collect();
            Matrix::new(rows, cols, data).unwrap()
        }
        _ => {
            let std = rng.random_range(1e-3f32..1e2);
            gaussian(rng, rows, cols, std)
        }
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> (usize, usize, QuantConfig) {
    let bits = [2u8, 3, 4, 8][rng.random_range(0..4)];
    let group = [PER_CHANNEL, 1, 4, 8, 16, 32][rng.random_range(0..6)];
    let rows = rng.random_range(1..9);
    let cols = if group == PER_CHANNEL { rng.random_range(1..65) } else { group * rng.random_range(1..5) };
    (rows, cols, QuantConfig::new(bits, group).unwrap())
}

fn c1_quantizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for _ in 0..1000 {
        let (rows, cols, cfg) = random_config(&mut rng);
        let w = random_weights(&mut rng, rows, cols);
        let q = quantize(&w, &cfg).unwrap();
        let deq = q.dequantize();
        let group = if cfg.group_size == PER_CHANNEL { cols } else { cfg.group_size };
        let mut ok = true;
        for r in 0..rows {
            for (g, chunk) in w.row(r).chunks(group).enumerate() {
                let (codes, s, z) = oracle_group(chunk, cfg.bits);
                ok &= q.scale(r, g).to_bits() == s.to_bits() && q.zero_point(r, g) == z;
                for (j, (&code, &wv)) in codes.iter().zip(chunk).enumerate() {
                    let c = g * group + j;
                    ok &= q.codes()[r * cols + c] == code;
                    let ref_deq = (code as f64 - z as f64) * s as f64;
                    let got = deq.get(r, c) as f64;
                    ok &= (got - ref_deq).abs() <= tol::DEQUANT_ABS.max(ref_deq.abs() * f32::EPSILON as f64);
                    ok &= (wv as f64 - got).abs() <= s as f64;
                }
            }
        }
        failures += usize::from(!ok);
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!("1000 cases, {failures} failures, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn c2_row_scaling_covariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..200 {
        let (rows, cols, cfg) = random_config(&mut rng);
        let w = gaussian(&mut rng, rows, cols, 1.0);
        let k: Vec<f32> = (0..rows).map(|_| 2f32.powi(rng.random_range(-6..7))).collect();
        let q = quantize(&w, &cfg).unwrap();
        let qs = quantize(&w.scale_rows(&k).unwrap(), &cfg).unwrap();
        let ng = q.n_groups();
        let scales_ok = (0..rows).all(|r| (0..ng).all(|g| qs.scale(r, g) == q.scale(r, g) * k[r]));
        if q.codes() != qs.codes() || q.zero_points() != qs.zero_points() || !scales_ok {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("200 cases, {failures} failures"))
}

fn c3_transform_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(2..17);
        let h = rng.random_range(2..33);
        let t = rng.random_range(1..9);
        let up = gaussian(&mut rng, h, d, 1.0 / (d as f32).sqrt());
        let gate = gaussian(&mut rng, h, d, 1.0 / (d as f32).sqrt());
        let down = gaussian(&mut rng, d, h, 1.0 / (h as f32).sqrt());
        let x = gaussian(&mut rng, t, d, 1.0);
        let eta = UpDownScaling::new((0..h).map(|_| rng.random_range(0.5f32..2.0)).collect()).unwrap();
        let (up2, down2) = apply_updown_scaling(&up, &gate, &down, &eta).unwrap();
        let a = mlp_forward(&x, &gate, &up, &down).unwrap();
        let b = mlp_forward(&x, &gate, &up2, &down2).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap() as f64 / max_abs(&a).max(f64::MIN_POSITIVE));
        failures += usize::from(!close(&b, &a, tol::FORWARD_RTOL));
    }
    outcome(failures == 0, format!("200 draws, {failures} failures, worst rel {worst:.2e}"))
}

fn c4_dsq() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut step_fail, mut dom_fail, mut lsq_fail) = (0, 0, 0);
    for i in 0..500 {
        let bits = [2u8, 3, 4][i % 3];
        let group = [8usize, 16, 32][rng.random_range(0..3)];
        let rows = rng.random_range(2..17);
        let cols = group * rng.random_range(1..5);
        let cfg = QuantConfig::new(bits, group).unwrap();
        let w = gaussian(&mut rng, rows, cols, 1.0);
        let res = dsq_quantize(&w, &cfg, 15).unwrap();
        step_fail += res
            .steps
            .iter()
            .filter(|s| s.after_s > s.after_q + tol::S_STEP_SLACK * s.after_q.max(1.0))
            .count();
        let rtn = quantize(&w, &cfg).unwrap().dequantize();
        let rtn_obj = w.diff_frobenius_sq(&rtn).unwrap();
        dom_fail += usize::from(res.objective() > rtn_obj);

        // Closed-form column scales against a scalar least-squares fit.
        let q_tilde = quantize(&w, &cfg).unwrap().dequantize();
        let c = s_step(&w, &q_tilde).unwrap();
        for (j, &cj) in c.iter().enumerate() {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for r in 0..rows {
                num += w.get(r, j) as f64 * q_tilde.get(r, j) as f64;
                den += q_tilde.get(r, j) as f64 * q_tilde.get(r, j) as f64;
            }
            let expect = if den < 1e-12 { 1.0 } else { num / den };
            if (cj as f64 - expect).abs() > tol::LSQ_REL * expect.abs().max(1.0) {
                lsq_fail += 1;
            }
        }
        let _ = dual_scale_objective(&w, &q_tilde, &c).unwrap();
    }
    outcome(
        step_fail + dom_fail + lsq_fail == 0,
        format!("500 matrices: s-step increases {step_fail}, worse than RTN {dom_fail}, lsq mismatches {lsq_fail}"),
    )
}

fn toy_calibration(samples: usize) -> CalibrationSet {
    let text = std::fs::read(fixture("calibration.txt")).unwrap();
    CalibrationSet::from_bytes(&text, samples, 128).unwrap()
}

fn heldout() -> Vec<u8> {
    std::fs::read(fixture("heldout.txt")).unwrap()
}

fn c5_fold_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..100 {
        let group = [8usize, 16][rng.random_range(0..2)];
        let d = group * rng.random_range(1..4);
        let h = group * rng.random_range(1..5);
        let cfg = QuantConfig::new([2u8, 3, 4][rng.random_range(0..3)], group).unwrap();
        let up = gaussian(&mut rng, h, d, 1.0 / (d as f32).sqrt());
        let gate = gaussian(&mut rng, h, d, 1.0 / (d as f32).sqrt());
        let down = gaussian(&mut rng, d, h, 1.0 / (h as f32).sqrt());
        let t = rng.random_range(1..9);
        let x = gaussian(&mut rng, t, d, 1.0);
        let q_up = quantize(&up, &cfg).unwrap();
        let q_gate = quantize(&gate, &cfg).unwrap().dequantize();
        let res = dsq_quantize(&down, &cfg, 15).unwrap();
        let q_down = res.q_down.dequantize();
        let folded = fold_scale(&q_up, &res.col_scale).unwrap().dequantize();
        let a = mlp_forward(&x, &q_gate, &folded, &q_down).unwrap();
        let b = mlp_forward_explicit(&x, &q_gate, &q_up.dequantize(), &q_down, &res.col_scale).unwrap();
        failures += usize::from(!close(&a, &b, tol::FORWARD_RTOL));
    }

    let calib = toy_calibration(8);
    let tokens: Vec<u32> = heldout().iter().take(128).map(|&b| b as u32).collect();
    let mut e2e_fail = 0;
    for seed in 0..3 {
        let m = init_random(&ModelConfig::toy(), seed).unwrap();
        let cfg = PipelineConfig { calib_samples: 8, ..PipelineConfig::toy() };
        let folded = run_d2quant(&m, &calib, &cfg).unwrap().model;
        let explicit = run_d2quant(&m, &calib, &PipelineConfig { fold_col_scale: false, ..cfg }).unwrap().model;
        let kinds_ok = folded.blocks.iter().all(|b| matches!(b.down_col_scale, ColScale::Folded(_)))
            && explicit.blocks.iter().all(|b| matches!(b.down_col_scale, ColScale::Explicit(_)));
        let a = model_forward(&folded, &tokens).unwrap();
        let b = model_forward(&explicit, &tokens).unwrap();
        e2e_fail += usize::from(!kinds_ok || !close(&a, &b, tol::PIPELINE_RTOL));
    }
    outcome(
        failures + e2e_fail == 0,
        format!("100 MLPs: {failures} failures; 3 toy models end to end: {e2e_fail} failures"),
    )
}

fn c6_dac_identities() -> Outcome {
    let calib = toy_calibration(16);
    let cfg = QuantConfig::new(2, 32).unwrap();
    let (mut realized_fail, mut identity_fail, mut mse_fail) = (0, 0, 0);
    let mut checked = 0;
    for seed in 0..5 {
        let m = init_random(&ModelConfig::toy(), seed).unwrap();
        for l in 0..m.config.n_layers {
            let fp = &m.blocks[l];
            let mut q = fp.clone();
            for name in ["w_q", "w_k", "w_v", "w_o"] {
                let w = fp.projection(name).unwrap().materialize().into_owned();
                *q.projection_mut(name).unwrap() = Weight::Quantized(quantize(&w, &cfg).unwrap());
            }
            // Stack post-attention activations over all calibration tokens.
            let (mut y_fp, mut y_q) = (Vec::new(), Vec::new());
            for s in calib.sequences() {
                let mut x = m.embed(s).unwrap();
                for prev in &m.blocks[..l] {
                    x = d2q_core::model::block_forward(prev, &x, &m.config, d2q_core::model::Capture::None).unwrap().0;
                }
                y_fp.extend_from_slice(post_attn_norm(fp, &attention_residual(fp, &x, &m.config).unwrap(), &m.config).unwrap().data());
                y_q.extend_from_slice(post_attn_norm(&q, &attention_residual(&q, &x, &m.config).unwrap(), &m.config).unwrap().data());
            }
            let d = m.config.d_model;
            let y_fp = Matrix::new(y_fp.len() / d, d, y_fp).unwrap();
            let y_q = Matrix::new(y_q.len() / d, d, y_q).unwrap();
            let stats = deviation_stats(&y_fp, &y_q).unwrap();
            let predicted = predict_reduction(&stats);
            let realized = realized_reduction(&y_fp, &y_q, &stats.bias()).unwrap();
            for ((r, p), snr) in realized.iter().zip(&predicted).zip(stats.snr_squared()) {
                realized_fail += usize::from((r - p).abs() > tol::REALIZED_ABS);
                if snr.is_finite() {
                    identity_fail += usize::from((p - snr / (1.0 + snr)).abs() > tol::IDENTITY_ABS);
                }
            }
            let mut acc = ReductionAccumulator::new(d);
            acc.push(&y_fp, &y_q, &stats.bias()).unwrap();
            for (after, before) in acc.mse_after().iter().zip(acc.mse_before()) {
                mse_fail += usize::from(*after > before + tol::MSE_SLACK * before.max(1.0));
            }
            checked += d;
        }
        // The pipeline's own measurement on its propagated calibration inputs.
        let out = run_d2quant(&m, &calib, &PipelineConfig { calib_samples: 16, ..PipelineConfig::toy() }).unwrap();
        for b in &out.report.blocks {
            let site = b.post_attn.as_ref().unwrap();
            for (r, p) in site.realized_reduction.as_ref().unwrap().iter().zip(&site.predicted_reduction) {
                realized_fail += usize::from((r - p).abs() > tol::REALIZED_ABS);
            }
        }
    }
    outcome(
        realized_fail + identity_fail + mse_fail == 0,
        format!(
            "{checked} features: realized!=predicted {realized_fail}, identity {identity_fail}, mse increases {mse_fail}"
        ),
    )
}

fn c7_ablation_direction() -> Outcome {
    let start = Instant::now();
    let calib = toy_calibration(16);
    let text = heldout();
    let cfg = PipelineConfig { calib_samples: 16, ..PipelineConfig::toy() };
    let (mut ppl_wins, mut down_wins, mut kl_wins) = (0, 0, 0);
    for seed in 0..SEEDS {
        let m = init_random(&ModelConfig::toy(), seed).unwrap();
        let base = run_d2quant(&m, &calib, &cfg.clone().baseline()).unwrap();
        let dsq = run_d2quant(&m, &calib, &PipelineConfig { dac_enabled: false, ..cfg.clone() }).unwrap();
        let full = run_d2quant(&m, &calib, &cfg).unwrap();
        let p_base = perplexity(&base.model, &text, 128).unwrap().perplexity;
        let p_full = perplexity(&full.model, &text, 128).unwrap().perplexity;
        ppl_wins += usize::from(p_full <= p_base);
        // Supplementary: divergence from the full-precision model, which
        // does not depend on how well the untrained model predicts text.
        let kl = |o: &d2q_core::pipeline::PipelineOutput| kl_divergence(&m, &o.model, &text, 128).unwrap();
        kl_wins += usize::from(kl(&full) <= kl(&base));
        let down = |o: &d2q_core::pipeline::PipelineOutput| o.report.summary.mean_down_rel_err.unwrap();
        down_wins += usize::from(down(&dsq) < down(&base));
    }
    let elapsed = start.elapsed();
    let need = (SEEDS as usize * 4).div_ceil(5);
    outcome(
        ppl_wins >= need && down_wins == SEEDS as usize && elapsed < Duration::from_secs(300),
        format!(
            "ppl(+dsq+dac) <= ppl(baseline) on {ppl_wins}/{SEEDS} (need {need}); down err +dsq < baseline on {down_wins}/{SEEDS}; [info] kl(+dsq+dac) <= kl(baseline) on {kl_wins}/{SEEDS}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c8_snr_ordering() -> Outcome {
    let calib = toy_calibration(16);
    let mut wins = 0;
    for seed in 0..SEEDS {
        let m = init_random(&ModelConfig::toy(), seed).unwrap();
        let r = diagnose(&m, &calib, Quantizer::Rtn(QuantConfig::new(2, 32).unwrap())).unwrap();
        wins += usize::from(r.summary.mean_post_attn_snr.unwrap() > r.summary.mean_pre_norm_snr.unwrap());
    }
    let need = (SEEDS as usize * 4).div_ceil(5);
    outcome(wins >= need, format!("post-attn > pre-norm on {wins}/{SEEDS} seeds (need {need})"))
}

fn same_logits(a: &ModelBundle, b: &ModelBundle, tokens: &[u32]) -> bool {
    let (x, y) = (model_forward(a, tokens).unwrap(), model_forward(b, tokens).unwrap());
    x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

fn c9_noop_and_round_trips() -> Outcome {
    let calib = toy_calibration(8);
    let tokens: Vec<u32> = heldout().iter().take(128).map(|&b| b as u32).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for seed in 0..3 {
        let m = init_random(&ModelConfig::toy(), seed).unwrap();
        let cfg = PipelineConfig {
            quantizer: Quantizer::Identity,
            calib_samples: 8,
            ..PipelineConfig::toy()
        };
        let out = run_d2quant(&m, &calib, &cfg).unwrap();
        if !same_logits(&m, &out.model, &tokens) {
            problems.push(format!("seed {seed}: identity logits differ"));
        }
        let quantized = run_d2quant(&m, &calib, &PipelineConfig { calib_samples: 8, ..PipelineConfig::toy() }).unwrap();
        for (name, bundle) in [("fp", &m), ("quantized", &quantized.model)] {
            let bytes = ModelArtifact::from_bundle(bundle).unwrap().to_bytes();
            let back = ModelArtifact::from_bytes(&bytes).unwrap().to_bundle().unwrap();
            if ModelArtifact::from_bundle(&back).unwrap().to_bytes() != bytes || !same_logits(bundle, &back, &tokens) {
                problems.push(format!("seed {seed}: {name} artifact round trip"));
            }
        }
        let path = dir.path().join(format!("r{seed}.json"));
        write_report(&quantized.report, &path).unwrap();
        let back: SnrReport = read_report(&path).unwrap();
        let again = dir.path().join(format!("r{seed}b.json"));
        write_report(&back, &again).unwrap();
        if back != quantized.report || std::fs::read(&again).unwrap() != std::fs::read(&path).unwrap() {
            problems.push(format!("seed {seed}: report round trip"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "identity logits bit-exact; artifact and report round trips byte-identical (3 seeds)".into()
        } else {
            problems.join("; ")
        },
    )
}

fn d2q(args: &[&str], threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_d2q"))
        .args(args)
        .env("D2Q_THREADS", threads)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let calib = fixture("calibration.txt");
    let calib = calib.to_str().unwrap();
    if !d2q(&["init", "--seed", "7", "--out", &p("m.d2q")], "0") {
        return outcome(false, "init failed".into());
    }
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "4", "0"].iter().enumerate() {
        let out = p(&format!("q{i}.d2q"));
        let ok = d2q(
            &["quantize", &p("m.d2q"), calib, "--out", &out, "--seed", "7", "--calib-samples", "16"],
            threads,
        );
        if !ok {
            return outcome(false, format!("quantize with D2Q_THREADS={threads} failed"));
        }
        outputs.push((std::fs::read(&out).unwrap(), std::fs::read(p(&format!("q{i}.report.json"))).unwrap()));
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!(
            "4 runs (threads 1, 1, 4, auto): artifacts and reports {}",
            if identical { "byte-identical" } else { "differ" }
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "quantizer oracle equivalence", c1_quantizer_oracle),
        (2, "row-scaling covariance", c2_row_scaling_covariance),
        (3, "full-precision transform invariance", c3_transform_invariance),
        (4, "DSQ s-step optimality and dominance", c4_dsq),
        (5, "fold equivalence", c5_fold_equivalence),
        (6, "DAC identities", c6_dac_identities),
        (7, "ablation direction", c7_ablation_direction),
        (8, "SNR ordering", c8_snr_ordering),
        (9, "pipeline no-op and round trips", c9_noop_and_round_trips),
        (10, "determinism across runs and threads", c10_determinism),
    ];
    let mut hard_failures = 0;
    for (id, name, run) in criteria {
        let o = run();
        let status = match (o.pass, BLOCKED.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (blocked)",
            (false, false) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!("criterion {id:>2} {status:<14} {name}: {}", o.detail);
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
