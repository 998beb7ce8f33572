use d2q_core::dsq::{dsq_quantize, fold_scale};
use d2q_core::quant::QuantConfig;
use d2q_core::{quantize, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-4.0f32..4.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn case() -> impl Strategy<Value = (Matrix, QuantConfig, usize)> {
    (1usize..9, 1usize..4, prop::sample::select(vec![2u8, 3, 4]), prop::sample::select(vec![4usize, 8, 16]), 0usize..8)
        .prop_flat_map(|(rows, k, bits, group, iters)| {
            (matrix(rows, group * k), Just(QuantConfig::new(bits, group).unwrap()), Just(iters))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trace_is_non_increasing_and_bounded_by_rtn((w, cfg, iters) in case()) {
        let res = dsq_quantize(&w, &cfg, iters).unwrap();
        let rtn = w.diff_frobenius_sq(&quantize(&w, &cfg).unwrap().dequantize()).unwrap();
        prop_assert!(res.objective() <= rtn);
        for pair in res.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
        prop_assert_eq!(res.col_scale.len(), w.cols());
    }

    #[test]
    fn fold_only_touches_row_scales((w, cfg, _iters) in case()) {
        let q = quantize(&w, &cfg).unwrap();
        let c: Vec<f32> = (0..w.rows()).map(|i| 0.5 + i as f32 * 0.25).collect();
        let folded = fold_scale(&q, &c).unwrap();
        prop_assert_eq!(folded.codes(), q.codes());
        prop_assert_eq!(folded.zero_points(), q.zero_points());
        let (a, b) = (q.dequantize(), folded.dequantize());
        for r in 0..w.rows() {
            for j in 0..w.cols() {
                prop_assert!((b.get(r, j) - a.get(r, j) * c[r]).abs() <= 1e-5 * a.get(r, j).abs().max(1.0));
            }
        }
    }
}
