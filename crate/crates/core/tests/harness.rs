use std::fs;
use std::path::{Path, PathBuf};

use bicnet::harness::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use bicnet::harness::eval::{embed_dataset, text_to_video_scores, video_to_text_scores};
use bicnet::harness::gradcheck::parameter_group;
use bicnet::harness::{
    ablate, evaluate, evaluate_model, generate_synthetic, grad_check, load_checkpoint, load_dataset, read_blob,
    save_checkpoint, train, write_blob, DatasetManifest, GradCheckConfig, SyntheticSpec, TrainConfig,
};
use bicnet::numerics::{kernels, ScalarKind, Tensor};
use bicnet::retrieval::FusionConfig;
use bicnet::{BiCNet, Dims, Error, Parallelism, SrtVariant};
use nalgebra::DMatrix;
use tempfile::TempDir;

fn tiny_dims() -> Dims {
    Dims {
        frames: 3,
        proposals: 3,
        region_dim: 6,
        appearance_dim: 4,
        motion_dim: 3,
        token_dim: 5,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        layers: 1,
        heads: 2,
        joint_dim: 8,
        global_dim: 8,
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn synth_into(dir: &Path, pairs: usize, seed: u64, noise: f32) -> PathBuf {
    let spec = SyntheticSpec {
        pairs,
        latent_dim: 4,
        noise_scale: noise,
        dims: tiny_dims(),
        seed,
        min_tokens: 2,
        max_tokens: 4,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn empty_manifest_is_a_valid_dataset() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("manifest.toml");
    DatasetManifest {
        dims: tiny_dims(),
        items: vec![],
    }
    .write(&path)
    .unwrap();
    let data = load_dataset(&path).unwrap();
    assert!(data.is_empty());

    let cfg = tiny_config();
    let (model, store) = BiCNet::build::<f32>(cfg.model_spec(data.dims), cfg.variant, 0).unwrap();
    let err = evaluate_model(&model, &store, &data, cfg.fusion(), Parallelism::Sequential).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn blob_round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let values = vec![0.0f32, -0.0, 1.5e-45, f32::MAX, -f32::MIN_POSITIVE, 0.1, -7.25];
    let t = Tensor::new(vec![7, 1], values).unwrap();
    let path = dir.path().join("x.bicf");
    write_blob(&path, &t).unwrap();
    let back = read_blob(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    for (a, b) in back.data().iter().zip(t.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn synthetic_dataset_loads_exactly_what_was_written() {
    let dir = TempDir::new().unwrap();
    let manifest_path = synth_into(dir.path(), 5, 1, 0.3);
    let manifest = DatasetManifest::read(&manifest_path).unwrap();
    let data = load_dataset(&manifest_path).unwrap();
    assert_eq!(data.len(), 5);
    for (item, video) in manifest.items.iter().zip(&data.videos) {
        assert_eq!(item.id, video.id);
        assert_eq!(
            &read_blob(&dir.path().join(&item.region_file)).unwrap(),
            video.regions.tensor()
        );
        assert_eq!(
            &read_blob(&dir.path().join(&item.frame_file)).unwrap(),
            video.frames.tensor()
        );
        for (entry, caption) in item.captions.iter().zip(&video.captions) {
            assert_eq!(
                &read_blob(&dir.path().join(&entry.token_file)).unwrap(),
                caption.tokens.tensor()
            );
        }
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    synth_into(a.path(), 6, 42, 0.3);
    synth_into(b.path(), 6, 42, 0.3);
    synth_into(c.path(), 6, 43, 0.3);
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn single_pair_dataset() {
    let dir = TempDir::new().unwrap();
    let data = load_dataset(&synth_into(dir.path(), 1, 5, 0.3)).unwrap();
    assert_eq!(data.len(), 1);
    assert_eq!(data.caption_count(), 1);

    let cfg = tiny_config();
    let (model, store) = BiCNet::build::<f32>(cfg.model_spec(data.dims), cfg.variant, 0).unwrap();
    let m = evaluate_model(&model, &store, &data, cfg.fusion(), Parallelism::Sequential).unwrap();
    for dir in [&m.text_to_video, &m.video_to_text] {
        assert_eq!(dir.recall(1), 1.0);
        assert_eq!(dir.med_r, 1);
    }
}

/// Least-squares map from token features to frame features, fitted over
/// the whole dataset, then nearest-video matching of every caption.
#[test]
fn noiseless_features_admit_a_perfect_linear_probe() {
    let dir = TempDir::new().unwrap();
    let data = load_dataset(&synth_into(dir.path(), 24, 9, 0.0)).unwrap();
    let n = data.len();
    let (dt, df) = (data.dims.token_dim, data.dims.frame_dim());
    let x = DMatrix::from_fn(n, dt, |i, k| {
        f64::from(data.videos[i].captions[0].tokens.tensor().get2(0, k))
    });
    let y = DMatrix::from_fn(n, df, |i, k| f64::from(data.videos[i].frames.tensor().get2(0, k)));
    let w = x.clone().svd(true, true).solve(&y, 1e-9).unwrap();
    let predicted = &x * &w;
    for i in 0..n {
        let nearest = (0..n)
            .min_by(|&a, &b| {
                let da = (predicted.row(i) - y.row(a)).norm();
                let db = (predicted.row(i) - y.row(b)).norm();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert_eq!(nearest, i);
    }
    // Every token of a noiseless caption is the same image of the latent.
    let tokens = data.videos[0].captions[0].tokens.tensor();
    for s in 1..tokens.shape()[0] {
        assert_eq!(tokens.row(s), tokens.row(0));
    }
}

fn rewrite_blob(path: &Path, shape: &[usize]) {
    write_blob(path, &Tensor::full(shape, 0.5f32)).unwrap();
}

#[test]
fn ingest_rejects_every_mismatched_blob_kind() {
    let d = tiny_dims();
    let cases: [(&str, Vec<usize>); 5] = [
        ("region", vec![d.frames, d.proposals + 1, d.region_dim]),
        ("region", vec![d.frames, d.proposals, d.region_dim - 1]),
        ("frame", vec![d.frames + 1, d.frame_dim()]),
        ("frame", vec![d.frames, d.frame_dim() + 2]),
        ("token", vec![3, d.token_dim + 1]),
    ];
    for (kind, shape) in cases {
        let dir = TempDir::new().unwrap();
        let manifest_path = synth_into(dir.path(), 3, 11, 0.3);
        let item = &DatasetManifest::read(&manifest_path).unwrap().items[1];
        let target = dir.path().join(match kind {
            "region" => &item.region_file,
            "frame" => &item.frame_file,
            _ => &item.captions[0].token_file,
        });
        rewrite_blob(&target, &shape);
        match load_dataset(&manifest_path) {
            Err(Error::Ingest { path, detail }) => {
                assert_eq!(path, target);
                assert!(detail.contains(&format!("{shape:?}")), "{detail}");
                assert!(detail.contains("expected"), "{detail}");
            }
            other => panic!("{kind} {shape:?}: expected an ingest error, got {other:?}"),
        }
    }
}

#[test]
fn ingest_rejects_missing_and_corrupt_files() {
    let dir = TempDir::new().unwrap();
    let manifest_path = synth_into(dir.path(), 2, 12, 0.3);
    let item = DatasetManifest::read(&manifest_path).unwrap().items[0].clone();
    let frame = dir.path().join(&item.frame_file);

    let good = fs::read(&frame).unwrap();
    fs::write(&frame, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_dataset(&manifest_path), Err(Error::Ingest { .. })));
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    fs::write(&frame, &bad_magic).unwrap();
    assert!(matches!(load_dataset(&manifest_path), Err(Error::Ingest { .. })));

    fs::remove_file(&frame).unwrap();
    match load_dataset(&manifest_path) {
        Err(Error::Ingest { path, .. }) => assert_eq!(path, frame),
        other => panic!("expected an ingest error, got {other:?}"),
    }
    assert!(matches!(
        load_dataset(&dir.path().join("absent.toml")),
        Err(Error::Ingest { .. })
    ));
}

#[test]
fn manifest_rejects_duplicate_caption_owners() {
    let dir = TempDir::new().unwrap();
    let manifest_path = synth_into(dir.path(), 2, 13, 0.3);
    let mut manifest = DatasetManifest::read(&manifest_path).unwrap();
    let shared = manifest.items[0].captions[0].clone();
    manifest.items[1].captions.push(shared);
    manifest.write(&manifest_path).unwrap();
    assert!(matches!(load_dataset(&manifest_path), Err(Error::Ingest { .. })));
}

fn small_run(dir: &Path) -> bicnet::harness::Dataset {
    load_dataset(&synth_into(dir, 8, 21, 0.3)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny_config()
    };
    let (_, initial) = BiCNet::build::<f32>(cfg.model_spec(data.dims), cfg.variant, cfg.seed).unwrap();
    let outcome = train::<f32>(&cfg, &data).unwrap();
    assert_eq!(outcome.trace.len(), 4);
    for (a, b) in initial.iter().zip(outcome.checkpoint.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_is_deterministic_and_mode_independent() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let seq = TrainConfig {
        parallel: false,
        ..tiny_config()
    };
    let first = train::<f32>(&seq, &data).unwrap();
    let second = train::<f32>(&seq, &data).unwrap();
    assert_eq!(first.trace, second.trace);
    assert_eq!(first.checkpoint.encode(), second.checkpoint.encode());

    let par = TrainConfig {
        parallel: true,
        ..tiny_config()
    };
    let parallel = train::<f32>(&par, &data).unwrap();
    assert_eq!(first.trace, parallel.trace);
    assert_eq!(first.checkpoint.params, parallel.checkpoint.params);

    let reseeded = train::<f32>(&TrainConfig { seed: 4, ..seq }, &data).unwrap();
    assert_ne!(first.trace, reseeded.trace);
}

#[test]
fn training_preconditions() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let too_big = TrainConfig {
        batch_size: 9,
        ..tiny_config()
    };
    assert!(matches!(train::<f32>(&too_big, &data), Err(Error::Usage(_))));
    assert!(matches!(train::<f64>(&tiny_config(), &data), Err(Error::Config(_))));
    let capped = TrainConfig {
        max_steps: 3,
        epochs: 10,
        ..tiny_config()
    };
    let outcome = train::<f32>(&capped, &data).unwrap();
    assert_eq!(outcome.trace.len(), 3);
    assert_eq!(outcome.checkpoint.step, 3);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let cfg = TrainConfig {
        scalar_kind: ScalarKind::Verification64,
        ..tiny_config()
    };
    let ckpt = train::<f64>(&cfg, &data).unwrap().checkpoint;
    let path = dir.path().join("out").join("model.bicc");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(loaded, ckpt);
    for (a, b) in loaded.params.iter().zip(ckpt.params.iter()) {
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    for lambda in [None, Some(0.0), Some(1.0)] {
        assert_eq!(
            evaluate(&loaded, &data, lambda, Parallelism::Sequential).unwrap(),
            evaluate(&ckpt, &data, lambda, Parallelism::Sequential).unwrap()
        );
    }
    assert_eq!(
        evaluate(&ckpt, &data, None, Parallelism::Rayon).unwrap(),
        evaluate(&ckpt, &data, None, Parallelism::Sequential).unwrap()
    );
}

#[test]
fn checkpoint_format_errors() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let cfg = TrainConfig {
        max_steps: 1,
        ..tiny_config()
    };
    let bytes = train::<f32>(&cfg, &data).unwrap().checkpoint.encode();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert!(Checkpoint::<f32>::decode(&bytes).is_ok());

    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(matches!(Checkpoint::<f32>::decode(&magic), Err(Error::Format(_))));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let err = Checkpoint::<f32>::decode(&version).unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("version 99")), "{err}");

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::<f32>::decode(&bytes[..cut]), Err(Error::Format(_))),
            "cut {cut}"
        );
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::<f32>::decode(&trailing), Err(Error::Format(_))));

    assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(Error::Format(_))));
}

#[test]
fn evaluation_errors() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let ckpt = train::<f32>(
        &TrainConfig {
            max_steps: 1,
            ..tiny_config()
        },
        &data,
    )
    .unwrap()
    .checkpoint;

    let other = TempDir::new().unwrap();
    let spec = SyntheticSpec {
        pairs: 2,
        dims: Dims {
            proposals: 4,
            ..tiny_dims()
        },
        ..SyntheticSpec::default()
    };
    let mismatched = load_dataset(&generate_synthetic(&spec, other.path()).unwrap()).unwrap();
    assert!(matches!(
        evaluate(&ckpt, &mismatched, None, Parallelism::Sequential),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        evaluate(&ckpt, &data.split("val"), None, Parallelism::Sequential),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        evaluate(&ckpt, &data, Some(1.5), Parallelism::Sequential),
        Err(Error::Config(_))
    ));
}

#[test]
fn lambda_endpoints_score_one_space_only() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let cfg = tiny_config();
    let (model, store) = BiCNet::build::<f32>(cfg.model_spec(data.dims), cfg.variant, 1).unwrap();
    let set = embed_dataset(&model, &store, &data.cast().unwrap(), Parallelism::Sequential).unwrap();
    let only = |space: &[Tensor<f32>]| {
        Tensor::from_fn(&[set.text.len(), space.len()], |k| {
            let (q, i) = (k / space.len(), k % space.len());
            kernels::cosine(set.text[q].data(), space[i].data()).unwrap()
        })
    };
    let global = text_to_video_scores(&set, FusionConfig::new(0.0).unwrap(), Parallelism::Sequential).unwrap();
    assert_eq!(global.scores(), &only(&set.video));
    let relation = text_to_video_scores(&set, FusionConfig::new(1.0).unwrap(), Parallelism::Rayon).unwrap();
    assert_eq!(relation.scores(), &only(&set.relation));

    let v2t = video_to_text_scores(&set, FusionConfig::new(0.0).unwrap(), Parallelism::Sequential).unwrap();
    assert_eq!(v2t.scores(), &kernels::transpose(&only(&set.video)).unwrap());
}

#[test]
fn ablation_table_shape() {
    let dir = TempDir::new().unwrap();
    let data = small_run(dir.path());
    let cfg = TrainConfig {
        max_steps: 2,
        ..tiny_config()
    };
    let table = ablate::<f32>(&cfg, &data, &data).unwrap();
    let names: Vec<_> = table.rows.iter().map(|r| r.variant).collect();
    assert_eq!(names, SrtVariant::ALL);
    let text = table.to_string();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].contains("Text-to-Video") && lines[0].contains("Video-to-Text"));
    assert_eq!(
        lines[1].split_whitespace().filter(|t| *t != "|").collect::<Vec<_>>(),
        ["Method", "R@1", "R@5", "R@10", "MedR", "R@1", "R@5", "R@10", "MedR"]
    );
    for (line, variant) in lines[2..].iter().zip(SrtVariant::ALL) {
        let cells: Vec<&str> = line.split_whitespace().filter(|t| *t != "|").collect();
        assert_eq!(cells[0], variant.name());
        assert_eq!(cells.len(), 9);
    }
}

#[test]
fn gradient_groups_and_fault_injection() {
    assert_eq!(
        parameter_group("relation.spatial.layer0.attn.head1.query"),
        "relation.spatial.layer0.attn"
    );
    let cfg = GradCheckConfig {
        variants: vec![SrtVariant::NonSRT],
        corrupt_group: Some("text.projection".into()),
        ..GradCheckConfig::default()
    };
    let report = grad_check(&cfg).unwrap();
    assert!(!report.passed());
    let failures = report.failures();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].0, SrtVariant::NonSRT);
    assert_eq!(failures[0].1.group, "text.projection");
    let others = &report.variants[0].groups;
    assert!(others
        .iter()
        .filter(|g| g.group != "text.projection")
        .all(|g| g.max_rel_error < 1e-4));
}
