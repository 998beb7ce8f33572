use d2q_core::io::report::{to_json, SnrReport};
use d2q_core::pipeline::{run_d2quant, PipelineConfig};
use d2q_core::{init_random, CalibrationSet, ModelConfig};
use serde_json::Value;

fn report() -> SnrReport {
    let text = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/calibration.txt")).unwrap();
    let calib = CalibrationSet::from_bytes(&text, 4, 128).unwrap();
    let m = init_random(&ModelConfig::toy(), 3).unwrap();
    run_d2quant(&m, &calib, &PipelineConfig { calib_samples: 4, ..PipelineConfig::toy() })
        .unwrap()
        .report
}

fn keys(v: &Value) -> Vec<&str> {
    v.as_object().unwrap().keys().map(String::as_str).collect()
}

#[test]
fn quantize_report_has_stable_field_set() {
    let json: Value = serde_json::from_str(&to_json(&report()).unwrap()).unwrap();
    assert_eq!(keys(&json), ["blocks", "format_version", "kind", "model", "pipeline", "seed", "summary"]);
    assert_eq!(json["kind"], "quantize");
    let block = &json["blocks"][0];
    assert_eq!(keys(block), ["block", "dac_applied", "dsq", "post_attn", "tensors"]);
    assert_eq!(
        keys(&block["post_attn"]),
        ["mu", "predicted_reduction", "realized_reduction", "sigma2", "snr_diag", "token_count"]
    );
    assert_eq!(
        keys(&block["tensors"]),
        ["w_down", "w_gate", "w_k", "w_o", "w_q", "w_up", "w_v"]
    );
    assert_eq!(keys(&block["dsq"]), ["iterations_run", "objective_trace"]);
    assert_eq!(block["post_attn"]["mu"].as_array().unwrap().len(), 64);
    assert_eq!(json["blocks"].as_array().unwrap().len(), 4);
}

#[test]
fn summary_agrees_with_blocks() {
    let r = report();
    let mean = |f: &dyn Fn(&d2q_core::io::report::BlockReport) -> f64| {
        r.blocks.iter().map(f).sum::<f64>() / r.blocks.len() as f64
    };
    let down = mean(&|b| b.tensors["w_down"].frobenius_rel_err);
    assert!((r.summary.mean_down_rel_err.unwrap() - down).abs() < 1e-12);
    let snr = mean(&|b| b.post_attn.as_ref().unwrap().mean_snr());
    assert!((r.summary.mean_post_attn_snr.unwrap() - snr).abs() < 1e-12);
}
