use dotresize::linalg::Matrix;
use dotresize::model::{
    expected_tensors, fold_rmsnorm, generate_toy, load_container, read_container, save_container, write_container,
    ContainerError, ModelConfig, Precision, FORMAT_VERSION, MAGIC,
};
use proptest::prelude::*;

fn config(d: usize, layers: usize, kv: usize, precision: Precision) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        n_kv_heads: kv,
        d_head: 4,
        d_ff: 2 * d,
        vocab_size: 11,
        precision,
        ..ModelConfig::toy()
    }
}

fn bytes_of(model: &dotresize::model::Model) -> Vec<u8> {
    let mut buf = Vec::new();
    write_container(model, &mut buf).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_is_exact(
        d in 1usize..9,
        layers in 1usize..3,
        kv in prop::sample::select(vec![1usize, 2]),
        f64_storage in any::<bool>(),
        folded in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let precision = if f64_storage { Precision::F64 } else { Precision::F32 };
        let mut model = generate_toy(&config(d, layers, kv, precision), seed).unwrap();
        if folded {
            model = fold_rmsnorm(&model).unwrap();
        }
        let back = read_container(bytes_of(&model).as_slice()).unwrap();
        prop_assert_eq!(back, model);
    }
}

#[test]
fn compressed_layout_round_trips() {
    let mut model = fold_rmsnorm(&generate_toy(&config(6, 2, 2, Precision::F64), 3).unwrap()).unwrap();
    // Narrow the residual stream to 4 by hand.
    let keep = [0usize, 2, 3, 5];
    model.config.residual_width = Some(4);
    model.embed = model.embed.select_columns(&keep);
    model.head = model.head.select_rows(&keep);
    for l in &mut model.layers {
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wup, &mut l.wgate] {
            *w = w.select_rows(&keep);
        }
        l.wo = l.wo.select_columns(&keep);
        l.wdown = l.wdown.select_columns(&keep);
        l.adapter_attn = Some(Matrix::identity(4));
        l.adapter_ffn = Some(Matrix::identity(4));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_container(&model, &path).unwrap();
    assert_eq!(load_container(&path).unwrap(), model);
    let names: Vec<String> = expected_tensors(&model.config).into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"layers.1.adapter_ffn".to_string()));
    assert!(!names.iter().any(|n| n.contains("norm")));
}

#[test]
fn header_layout() {
    let model = generate_toy(&config(4, 1, 1, Precision::F32), 0).unwrap();
    let bytes = bytes_of(&model);
    assert_eq!(&bytes[..8], MAGIC);
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    assert_eq!(header["format_version"], FORMAT_VERSION);
    assert_eq!(header["d_model"], 4);
    assert_eq!(header["precision"], "f32");
    // First tensor record follows the header.
    let name_len = u16::from_le_bytes(bytes[12 + len..14 + len].try_into().unwrap()) as usize;
    assert_eq!(&bytes[14 + len..14 + len + name_len], b"embed");
}

#[test]
fn f64_storage_adds_four_bytes_per_scalar() {
    let m32 = generate_toy(&config(8, 2, 2, Precision::F32), 0).unwrap();
    let m64 = m32.clone().with_precision(Precision::F64);
    let (a, b) = (bytes_of(&m32).len(), bytes_of(&m64).len());
    let scalars = m32.n_params();
    // Headers differ only in "f32" vs "f64", which have the same length.
    assert_eq!(b - a, 4 * scalars);
}

#[test]
fn corrupt_files_rejected() {
    let model = generate_toy(&config(4, 1, 1, Precision::F32), 0).unwrap();
    let good = bytes_of(&model);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(read_container(bad.as_slice()), Err(ContainerError::BadMagic)));

    let mut bad = good.clone();
    bad[6..8].copy_from_slice(b"99");
    assert!(matches!(
        read_container(bad.as_slice()),
        Err(ContainerError::VersionMismatch { found }) if found == "99"
    ));

    for cut in [4, 10, 20, good.len() - 1] {
        let r = read_container(&good[..cut]);
        assert!(
            matches!(r, Err(ContainerError::TruncatedFile | ContainerError::BadMagic | ContainerError::InvalidHeader(_))),
            "cut {cut}: {r:?}"
        );
    }

    let mut extra = good.clone();
    extra.extend_from_slice(&good[12 + u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize..]);
    assert!(matches!(read_container(extra.as_slice()), Err(ContainerError::DuplicateTensor(_))));
}

#[test]
fn layout_checked_on_write() {
    let mut model = generate_toy(&config(4, 1, 1, Precision::F32), 0).unwrap();
    model.layers[0].wq = Matrix::zeros(3, 8);
    assert!(matches!(
        write_container(&model, Vec::new()),
        Err(ContainerError::DimMismatch { .. })
    ));
    let mut model = generate_toy(&config(4, 1, 1, Precision::F32), 0).unwrap();
    model.layers[0].norm_ffn = None;
    assert!(matches!(write_container(&model, Vec::new()), Err(ContainerError::MissingTensor(_))));
    let mut model = generate_toy(&config(4, 1, 1, Precision::F32), 0).unwrap();
    model.layers[0].adapter_attn = Some(Matrix::identity(4));
    assert!(matches!(write_container(&model, Vec::new()), Err(ContainerError::UnexpectedTensor(_))));
}
