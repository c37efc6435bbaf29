#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use dips_core::config::RunConfig;
use dips_core::data::{generate_synthetic_dataset, SyntheticDatasetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::Dtype;

pub fn make_dataset(dir: &Path, train: usize, val: usize, test: usize, classes: usize, seed: u64) {
    let spec = SyntheticDatasetSpec::with_counts(train, val, test, classes, seed);
    generate_synthetic_dataset(&spec, dir, false).expect("dataset generation");
}

/// The laptop preset pointed at `data_dir`.
pub fn desk_config(data_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.dir = data_dir.to_path_buf();
    cfg
}

/// Writes a randomly initialized ViT in timm naming to `path`.
pub fn write_tiny_vit(path: &Path, seed: u64, dim: usize, patch: usize, grid: usize, classes: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: BTreeMap<String, (Vec<f32>, Vec<usize>)> = BTreeMap::new();
    let mut add = |name: &str, shape: Vec<usize>, scale: f32, offset: f32| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| offset + scale * rng.random_range(-1.0f32..1.0))
            .collect();
        tensors.insert(name.to_string(), (data, shape));
    };
    add("patch_embed.proj.weight", vec![dim, 3, patch, patch], 0.3, 0.0);
    add("patch_embed.proj.bias", vec![dim], 0.1, 0.0);
    add("cls_token", vec![1, 1, dim], 0.5, 0.0);
    add("pos_embed", vec![1, grid * grid + 1, dim], 0.5, 0.0);
    for (name, shape, scale, offset) in [
        ("norm1.weight", vec![dim], 0.1, 1.0),
        ("norm1.bias", vec![dim], 0.1, 0.0),
        ("attn.qkv.weight", vec![3 * dim, dim], 0.5, 0.0),
        ("attn.qkv.bias", vec![3 * dim], 0.1, 0.0),
        ("attn.proj.weight", vec![dim, dim], 0.3, 0.0),
        ("attn.proj.bias", vec![dim], 0.1, 0.0),
        ("norm2.weight", vec![dim], 0.1, 1.0),
        ("norm2.bias", vec![dim], 0.1, 0.0),
        ("mlp.fc1.weight", vec![2 * dim, dim], 0.3, 0.0),
        ("mlp.fc1.bias", vec![2 * dim], 0.1, 0.0),
        ("mlp.fc2.weight", vec![dim, 2 * dim], 0.3, 0.0),
        ("mlp.fc2.bias", vec![dim], 0.1, 0.0),
    ] {
        add(&format!("blocks.0.{name}"), shape, scale, offset);
    }
    add("norm.weight", vec![dim], 0.1, 1.0);
    add("norm.bias", vec![dim], 0.1, 0.0);
    add("head.weight", vec![classes, dim], 0.5, 0.0);
    add("head.bias", vec![classes], 0.1, 0.0);

    let bytes: BTreeMap<&String, Vec<u8>> = tensors
        .iter()
        .map(|(k, (d, _))| (k, d.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(k, (_, s))| (k.clone(), TensorView::new(Dtype::F32, s.clone(), &bytes[k]).unwrap()))
        .collect();
    safetensors::serialize_to_file(views, None, path).unwrap();
}
