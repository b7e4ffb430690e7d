//! File formats parse back to what was written.

use gdr2_cli::report::{read_series, write_series, BenchRow, Bound, Report, Status};
use gdr2_cli::tensor_io::{Tensor, TensorData, TensorError, TensorFile};
use gdr2_cli::RunConfig;
use gdr2_core::layer::GateMode;
use gdr2_core::math::SolvePrecision;
use gdr2_core::Precision;
use proptest::prelude::*;

fn finite64() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

fn finite32() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(0u64..5, 0..4), any::<bool>(), "[a-z.0-9]{0,12}").prop_flat_map(|(dims, wide, name)| {
        let n = dims.iter().product::<u64>() as usize;
        let data = if wide {
            prop::collection::vec(finite64(), n).prop_map(TensorData::F64).boxed()
        } else {
            prop::collection::vec(finite32(), n).prop_map(TensorData::F32).boxed()
        };
        data.prop_map(move |data| Tensor {
            name: name.clone(),
            dims: dims.clone(),
            data,
        })
    })
}

fn bits(t: &TensorData) -> Vec<u64> {
    match t {
        TensorData::F32(v) => v.iter().map(|x| u64::from(x.to_bits())).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tensor_files_round_trip_bitwise(tensors in prop::collection::vec(tensor(), 0..5)) {
        let mut file = TensorFile::new();
        for (i, mut t) in tensors.into_iter().enumerate() {
            t.name = format!("{i}:{}", t.name);
            file.push(t);
        }
        let bytes = file.to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.tensors.len(), file.tensors.len());
        for (a, b) in file.tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            prop_assert_eq!(a.precision(), b.precision());
            prop_assert_eq!(bits(&a.data), bits(&b.data));
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_an_error(t in tensor(), cut in any::<prop::sample::Index>()) {
        let mut file = TensorFile::new();
        file.push(t);
        let bytes = file.to_bytes().unwrap();
        let at = cut.index(bytes.len());
        match TensorFile::from_bytes(&bytes[..at]) {
            Ok(f) => prop_assert!(at == 0 && f.tensors.is_empty()),
            Err(TensorError::Truncated { offset, .. }) => prop_assert!(offset <= at),
            Err(e) => prop_assert!(false, "unexpected {}", e),
        }
    }

    #[test]
    fn reports_round_trip(rows in prop::collection::vec(
        ("[a-z-]{1,8}", "[ -~]{0,20}", "[a-z_]{1,8}", finite64(), prop::option::of((any::<bool>(), finite64())), 0u8..4),
        0..20,
    )) {
        let mut r = Report::new();
        for (suite, case, metric, value, bound, kind) in rows {
            let bound = bound.map(|(le, t)| if le { Bound::Le(t) } else { Bound::Ge(t) });
            match (kind, bound) {
                (0, Some(b)) => r.check(&suite, &case, &metric, value, b),
                (1, Some(b)) => r.expect_fail(&suite, &case, &metric, value, b),
                _ => r.info(&suite, &case, &metric, value),
            }
        }
        let text = r.to_string();
        prop_assert_eq!(text.parse::<Report>().unwrap(), r);
    }
}

#[test]
fn report_file_round_trip_and_status_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report::new();
    r.check("equivalence", "L=1", "max_abs_diff", 0.0, Bound::Le(1e-10));
    r.check("throughput", "L=4096", "speedup", 1.3, Bound::Ge(5.0));
    r.expect_fail("negative-control", "untied", "max_rel_err", 0.4, Bound::Ge(1e-3));
    let path = dir.path().join("r.txt");
    r.write(&path).unwrap();
    let back: Report = std::fs::read_to_string(&path).unwrap().parse().unwrap();
    assert_eq!(back, r);
    assert_eq!((back.count(Status::Pass), back.count(Status::Fail), back.count(Status::Xfail)), (1, 1, 1));
    assert_eq!(back.failures().count(), 1);
}

#[test]
fn bench_series_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        BenchRow {
            engine: "tokenwise".into(),
            pass: "fwd".into(),
            precision: "f32".into(),
            len: 4096,
            chunk: None,
            d_k: 64,
            d_v: 64,
            seconds: 0.0123456789,
            tokens_per_second: 4096.0 / 0.0123456789,
        },
        BenchRow {
            engine: "chunked".into(),
            pass: "fwd+bwd".into(),
            precision: "f64".into(),
            len: 1024,
            chunk: Some(64),
            d_k: 64,
            d_v: 64,
            seconds: 1e-3,
            tokens_per_second: 1.024e6,
        },
    ];
    let path = dir.path().join("bench.csv");
    write_series(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("engine,pass,precision,L,C,d_k,d_v,seconds,tokens_per_second\n"));
    assert_eq!(read_series(&path).unwrap(), rows);
}

#[test]
fn configs_round_trip() {
    let full = RunConfig {
        seed: 99,
        precision: Some(Precision::Binary32),
        len: Some(64),
        chunk: Some(7),
        d_model: Some(24),
        heads: Some(2),
        value_heads: Some(4),
        d_k: Some(6),
        d_v: Some(5),
        conv_width: Some(3),
        neg_eig: true,
        solve: SolvePrecision::Input,
        gate_mode: Some(GateMode::Gdn),
        vocab: 20,
        pairs: 9,
        steps: 10,
        lr: Some(0.03),
        batch: 4,
        reps: 1,
    };
    for cfg in [RunConfig::default(), full] {
        assert_eq!(cfg.to_string().parse::<RunConfig>().unwrap(), cfg);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# toy\nseed = 3\n\nsteps = 5 # quick\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.seed, cfg.steps), (3, 5));
}
