use emerge::checkpoint::{self, Container};
use emerge::{CliError, ErrorClass};
use emerge_core::chunked::{compute_importance, ChunkCoefficients, ChunkPlan};
use emerge_core::task_vector::{compute_task_vector, unit_stats};
use emerge_core::{LayerCoefficients, ModelConfig, ModelParams};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 4,
        n_heads: 2,
        n_blocks: 1,
        d_mlp: 4,
        max_seq_len: 8,
    }
}

fn layer(units: usize) -> LayerCoefficients {
    LayerCoefficients {
        alpha: (0..2)
            .map(|k| {
                (0..units)
                    .map(|u| 0.1 * u as f64 - 0.7 * k as f64 + 1e-17)
                    .collect()
            })
            .collect(),
        prior: vec![0.3, 0.1],
    }
}

fn artifacts() -> (
    ModelParams,
    LayerCoefficients,
    ChunkPlan,
    ChunkCoefficients,
    emerge_core::ImportanceReport,
) {
    let cfg = small();
    let base = ModelParams::init(cfg, 1).unwrap();
    let experts = [
        ModelParams::init(cfg, 2).unwrap(),
        ModelParams::init(cfg, 3).unwrap(),
    ];
    let stats: Vec<_> = experts
        .iter()
        .enumerate()
        .map(|(k, e)| unit_stats(&compute_task_vector(&base, e, k).unwrap()).unwrap())
        .collect();
    let units = cfg.unit_count();
    let l = layer(units);
    let report = compute_importance(&cfg, &l, &stats).unwrap();
    let counts: Vec<usize> = (0..units).map(|u| u % 3).collect();
    let plan = ChunkPlan::new(20.0, 1.2, counts, report.param_counts.clone()).unwrap();
    let mut chunks = ChunkCoefficients::from_layer(&plan, &l).unwrap();
    let flat: Vec<f64> = (0..chunks.flatten().len())
        .map(|i| (i as f64).sin())
        .collect();
    chunks = chunks.with_flat(&flat);
    (base, l, plan, chunks, report)
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn every_artifact_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (model, l, plan, chunks, report) = artifacts();
    let cfg = *model.config();

    let p = dir.path().join("m.emck");
    checkpoint::save_model(&model, &p).unwrap();
    let back = checkpoint::load_model(&p).unwrap();
    for (a, b) in model.tensors().iter().zip(back.tensors()) {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    assert_eq!(back, model);

    let p = dir.path().join("l.emck");
    checkpoint::save_layer(cfg, &l, &p).unwrap();
    let (c2, l2) = checkpoint::load_layer(&p).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(bits(&l2.flatten()), bits(&l.flatten()));
    assert_eq!(l2, l);

    let p = dir.path().join("c.emck");
    checkpoint::save_chunk(cfg, &plan, &chunks, &p).unwrap();
    let (_, plan2, chunks2) = checkpoint::load_chunk(&p).unwrap();
    assert_eq!(plan2, plan);
    assert_eq!(bits(&chunks2.flatten()), bits(&chunks.flatten()));
    assert_eq!(chunks2, chunks);

    let p = dir.path().join("i.emck");
    checkpoint::save_importance(&report, &p).unwrap();
    let r2 = checkpoint::load_importance(&p).unwrap();
    assert_eq!(bits(&r2.importance), bits(&report.importance));
    assert_eq!(r2, report);

    // saving again yields identical bytes
    let bytes = std::fs::read(&p).unwrap();
    checkpoint::save_importance(&r2, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn any_flipped_byte_is_rejected() {
    let (model, l, ..) = artifacts();
    for bytes in [
        checkpoint::model_container(&model).to_bytes(),
        checkpoint::layer_container(*model.config(), &l).to_bytes(),
    ] {
        assert!(Container::from_bytes(&bytes).is_ok());
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                Container::from_bytes(&bad).is_err(),
                "flip at byte {i} accepted"
            );
        }
    }
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let (model, ..) = artifacts();
    let bytes = checkpoint::model_container(&model).to_bytes();
    for len in 0..bytes.len() {
        assert!(
            Container::from_bytes(&bytes[..len]).is_err(),
            "prefix of {len} bytes accepted"
        );
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Container::from_bytes(&longer).is_err());
}

#[test]
fn load_errors_are_classified_io() {
    let dir = tempfile::tempdir().unwrap();
    let (model, l, ..) = artifacts();
    let p = dir.path().join("m.emck");
    checkpoint::save_model(&model, &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    std::fs::write(&p, &bytes).unwrap();
    let e: CliError = checkpoint::load_model(&p).unwrap_err().into();
    assert_eq!(e.class, ErrorClass::Io);
    assert!(e.line().starts_with("IO: "));

    let missing: CliError = checkpoint::load_model(&dir.path().join("absent.emck"))
        .unwrap_err()
        .into();
    assert_eq!(missing.class, ErrorClass::Io);

    let lp = dir.path().join("l.emck");
    checkpoint::save_layer(*model.config(), &l, &lp).unwrap();
    let wrong: CliError = checkpoint::load_model(&lp).unwrap_err().into();
    assert_eq!(wrong.class, ErrorClass::Io);
    assert!(wrong.message.contains("layer_coefficients"));
}
