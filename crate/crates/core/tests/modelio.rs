// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rotatelab::modelio::{
    config_hash, load_bundle, load_config, load_glitch_list, read_archive, tensor_name, write_bundle,
    write_decompositions, ArchiveHeader, Matrix,
};
use rotatelab::rotate::{decompose, init_mask};
use rotatelab::synthbench::{plant, PlantSpec};
use rotatelab::{Depletion, ModelBundle, NeuronId, Role, RotateConfig, RotateError, Unembedding, Vocab, WeightVector};
use safetensors::tensor::TensorView;
use safetensors::Dtype;

fn tiny_bundle() -> ModelBundle {
    let (d, v, d_a) = (8, 16, 5);
    let u: Vec<f32> = (0..v * d).map(|i| ((i * 37 % 23) as f32 - 11.0) / 7.0).collect();
    let mut weights = BTreeMap::new();
    for layer in [0u32, 2] {
        let gate: Vec<f32> = (0..d_a * d).map(|i| (i as f32 * 0.1 + layer as f32).sin()).collect();
        let up: Vec<f32> = (0..d_a * d).map(|i| (i as f32 * 0.2 - layer as f32).cos()).collect();
        let down: Vec<f32> = (0..d * d_a).map(|i| (i as f32 * 0.3).sin() * 1e-3).collect();
        weights.insert((layer, Role::Gate), Matrix::new(d_a, d, gate).unwrap());
        weights.insert((layer, Role::In), Matrix::new(d_a, d, up).unwrap());
        weights.insert((layer, Role::Out), Matrix::new(d, d_a, down).unwrap());
    }
    ModelBundle {
        model_id: "tiny".into(),
        unembedding: Unembedding::new(v, d, u).unwrap(),
        weights,
        vocab: Vocab::new((0..v).map(|i| format!("tok_{i}\u{0120}")).collect()),
        tied_embeddings: false,
        glitch_ids: vec![1, 9],
    }
}

fn assert_same_bundle(a: &ModelBundle, b: &ModelBundle) {
    assert_eq!(a.model_id, b.model_id);
    assert_eq!(a.unembedding, b.unembedding);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.vocab, b.vocab);
    assert_eq!(a.tied_embeddings, b.tied_embeddings);
    assert_eq!(a.glitch_ids, b.glitch_ids);
}

#[test]
fn bundle_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle();
    write_bundle(dir.path(), &bundle).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_same_bundle(&bundle, &loaded);
    assert_eq!(loaded.layers().into_iter().collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(loaded.neuron_count(2, Role::Out).unwrap(), 5);

    // Out-role neurons are columns of the down projection.
    let n = loaded.neuron(0, Role::Out, 3).unwrap();
    let m = &bundle.weights[&(0, Role::Out)];
    let expected: Vec<f64> = (0..m.rows).map(|r| f64::from(m.data[r * m.cols + 3])).collect();
    assert_eq!(n.values, expected);
    assert!(loaded.neuron(0, Role::Gate, 5).is_err());
    assert!(matches!(loaded.neuron(1, Role::Gate, 0), Err(RotateError::Tensor { .. })));
}

#[test]
fn loading_does_not_modify_files() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &tiny_bundle()).unwrap();
    let snapshot = |p: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(p)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let before = snapshot(dir.path());
    load_bundle(dir.path()).unwrap();
    assert_eq!(before, snapshot(dir.path()));
}

#[test]
fn vocab_size_mismatch_names_both_sizes() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &tiny_bundle()).unwrap();
    let ids = Vocab::synthetic(14).to_token_ids();
    fs::write(dir.path().join("vocab.json"), serde_json::to_string(&ids).unwrap()).unwrap();
    let msg = load_bundle(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("14") && msg.contains("16"), "{msg}");
}

#[test]
fn unembedding_shape_mismatch_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &tiny_bundle()).unwrap();
    let meta = r#"{"model_id":"tiny","d":8,"V":12,"tied_embeddings":false}"#;
    fs::write(dir.path().join("meta.json"), meta).unwrap();
    let ids = Vocab::synthetic(12).to_token_ids();
    fs::write(dir.path().join("vocab.json"), serde_json::to_string(&ids).unwrap()).unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("lm_head.weight") && msg.contains("16") && msg.contains("12"), "{msg}");
}

fn write_raw_bundle(dir: &Path, tensors: Vec<(&str, Dtype, Vec<usize>, Vec<u8>)>, d: usize, v: usize, tied: bool) {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, dt, shape, bytes)| (n.to_string(), TensorView::new(*dt, shape.clone(), bytes).unwrap()))
        .collect();
    fs::write(dir.join("weights.safetensors"), safetensors::serialize(views, None).unwrap()).unwrap();
    fs::write(
        dir.join("meta.json"),
        format!(r#"{{"d":{d},"vocab_size":{v},"tied":{tied}}}"#),
    )
    .unwrap();
    fs::write(dir.join("vocab.json"), serde_json::to_string(&Vocab::synthetic(v).to_token_ids()).unwrap()).unwrap();
}

#[test]
fn half_precision_payloads_are_widened() {
    let dir = tempfile::tempdir().unwrap();
    let values = [0.5f32, -1.25, 3.0, 0.0, 2.5, -0.75];
    let f16: Vec<u8> = values.iter().flat_map(|&x| half::f16::from_f32(x).to_le_bytes()).collect();
    let bf16: Vec<u8> = values.iter().flat_map(|&x| half::bf16::from_f32(x).to_le_bytes()).collect();
    write_raw_bundle(
        dir.path(),
        vec![
            ("model.embed_tokens.weight", Dtype::BF16, vec![3, 2], bf16),
            (&tensor_name(4, Role::Gate), Dtype::F16, vec![3, 2], f16),
        ],
        2,
        3,
        true,
    );
    let b = load_bundle(dir.path()).unwrap();
    assert!(b.tied_embeddings);
    assert_eq!(b.unembedding.as_slice(), &values);
    assert_eq!(b.weights[&(4, Role::Gate)].data, values);
    // The model id falls back to the directory name.
    assert_eq!(b.model_id, dir.path().file_name().unwrap().to_string_lossy());
}

#[test]
fn unsupported_dtype_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let ints: Vec<u8> = (0..6i32).flat_map(|x| x.to_le_bytes()).collect();
    write_raw_bundle(dir.path(), vec![("lm_head.weight", Dtype::I32, vec![3, 2], ints)], 2, 3, false);
    let msg = load_bundle(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("lm_head.weight") && msg.contains("I32"), "{msg}");
}

#[test]
fn missing_unembedding_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<u8> = (0..6).flat_map(|x| (x as f32).to_le_bytes()).collect();
    write_raw_bundle(dir.path(), vec![(&tensor_name(0, Role::In), Dtype::F32, vec![3, 2], bytes)], 2, 3, false);
    let msg = load_bundle(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("lm_head.weight"), "{msg}");
}

#[test]
fn glitch_lists() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.txt");
    fs::write(&p, "").unwrap();
    assert!(load_glitch_list(&p).unwrap().is_empty());
    fs::write(&p, "3\n3\n7").unwrap();
    assert_eq!(load_glitch_list(&p).unwrap(), vec![3, 7]);
    fs::write(&p, "[12, 4]").unwrap();
    assert_eq!(load_glitch_list(&p).unwrap(), vec![4, 12]);
    fs::write(&p, "3\nseven\n").unwrap();
    assert!(load_glitch_list(&p).unwrap_err().to_string().contains("line 2"));
    // Range is checked when the mask is built.
    fs::write(&p, "10").unwrap();
    let ids = load_glitch_list(&p).unwrap();
    assert!(matches!(init_mask(10, &ids), Err(RotateError::TokenOutOfRange { id: 10, vocab_size: 10 })));
}

#[test]
fn config_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("run.toml");
    fs::write(&toml_path, "lambda = 0.5\nn_iter = 7\ndepletion = \"subtraction\"\ntau = 2.0\n").unwrap();
    let c = load_config(&toml_path).unwrap();
    assert_eq!(
        c,
        RotateConfig { lambda: 0.5, n_iter: 7, depletion: Depletion::Subtraction, tau: Some(2.0), ..RotateConfig::default() }
    );
    let json_path = dir.path().join("run.json");
    fs::write(&json_path, r#"{"k_sigma": 6.0, "moment_mode": "exclude"}"#).unwrap();
    let c = load_config(&json_path).unwrap();
    assert_eq!(c.k_sigma, 6.0);
    assert_eq!(c.moment_mode, rotatelab::MomentMode::Exclude);

    let base = RotateConfig { n_step: 500, ..RotateConfig::default() };
    let layered = rotatelab::modelio::load_config_over(&json_path, base).unwrap();
    assert_eq!((layered.n_step, layered.k_sigma), (500, 6.0));

    fs::write(&toml_path, "lamda = 0.5\n").unwrap();
    assert!(load_config(&toml_path).is_err(), "unknown keys rejected");
    fs::write(&toml_path, "eta = -1.0\n").unwrap();
    assert!(matches!(load_config(&toml_path), Err(RotateError::InvalidConfig(_))));
}

fn sample_decompositions(config: &RotateConfig, count: u32) -> (Vec<rotatelab::Decomposition>, Vocab) {
    let (p, u) = plant(&PlantSpec::standard(4)).unwrap();
    let vocab = Vocab::synthetic(u.vocab_size());
    let ds = (0..count)
        .map(|i| {
            let w = WeightVector { id: NeuronId { layer: 3, role: Role::Out, index: i }, values: p.w.clone() };
            decompose(&w, &u, &RotateConfig { ..*config }, &[]).unwrap()
        })
        .collect();
    (ds, vocab)
}

#[test]
fn archive_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = RotateConfig { n_iter: 3, n_step: 200, top_k: 5, ..RotateConfig::default() };
    let (ds, vocab) = sample_decompositions(&config, 2);
    let header = ArchiveHeader::new("planted", Some(3), Some(Role::Out), config);
    let first = dir.path().join("a.jsonl");
    write_decompositions(&first, &header, &ds, Some(&vocab)).unwrap();

    let archive = read_archive(&first).unwrap();
    assert_eq!(archive.header, header);
    assert_eq!(archive.header.config_hash, config_hash(&config));
    assert_eq!(archive.records.len(), 2);
    let token = &archive.records[0].channels[0].top_tokens[0];
    assert_eq!(token.token, format!("<tok{}>", token.id));
    assert_eq!(archive.records[1].channels[0].v, ds[1].channels[0].v);

    let second = dir.path().join("b.jsonl");
    write_decompositions(&second, &archive.header, &archive.records, None).unwrap();
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn empty_archive_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.jsonl");
    let header = ArchiveHeader::new("m", None, None, RotateConfig::default());
    write_decompositions(&path, &header, &[], None).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with(r#"{"kind":"rotate-archive","version":1,"#), "{text}");
    assert!(read_archive(&path).unwrap().records.is_empty());
}

#[test]
fn archive_rejects_foreign_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = RotateConfig { n_iter: 1, n_step: 50, ..RotateConfig::default() };
    let (ds, _) = sample_decompositions(&config, 1);
    let other = RotateConfig { seed: 9, ..config };
    let header = ArchiveHeader::new("m", None, None, other);
    assert!(write_decompositions(dir.path().join("x.jsonl"), &header, &ds, None).is_err());

    // A tampered header hash is caught on read.
    let path = dir.path().join("y.jsonl");
    let good = ArchiveHeader::new("m", None, None, config);
    write_decompositions(&path, &good, &ds, None).unwrap();
    let text = fs::read_to_string(&path).unwrap().replacen(&good.config_hash, &"0".repeat(64), 1);
    fs::write(&path, text).unwrap();
    assert!(read_archive(&path).unwrap_err().to_string().contains("line 1"));
}

#[test]
fn large_archive_parses_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let config = RotateConfig { n_iter: 50, n_step: 1, ..RotateConfig::default() };
    let (mut ds, vocab) = sample_decompositions(&config, 1);
    let template = ds.pop().unwrap();
    assert_eq!(template.channels.len(), 50);
    let records: Vec<_> = (0..100)
        .map(|i| {
            let mut d = template.clone();
            d.neuron.index = i;
            d
        })
        .collect();
    let path = dir.path().join("big.jsonl");
    write_decompositions(&path, &ArchiveHeader::new("m", Some(3), Some(Role::Out), config), &records, Some(&vocab))
        .unwrap();
    let start = Instant::now();
    let archive = read_archive(&path).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(archive.records.len(), 100);
    assert!(elapsed < 2.0, "parse took {elapsed:.2}s");
}
