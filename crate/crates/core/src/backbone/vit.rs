//! Read-only adapter for pretrained self-supervised ViT checkpoints.
//!
//! Expects a safetensors file with timm/DINO parameter names
//! (`patch_embed.proj.weight`, `cls_token`, `pos_embed`, `blocks.{i}.…`,
//! `norm.weight`, optionally `head.weight`). Per-head maps are the
//! class-token row of the last block's attention over the patch tokens.

use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::{AttentionInput, AttentionProvider, AttentionStack, BackboneConfig, Classifier};
use crate::error::{invalid_input, DipsError, Result};
use crate::image::{Map, RgbImage};
use crate::linalg::matmul_bt;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f32 = 1e-6;

/// Relative checkpoint paths are looked up under `DIPS_CACHE_DIR` when set.
pub fn resolve_checkpoint_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(dir) = std::env::var_os("DIPS_CACHE_DIR") {
            return PathBuf::from(dir).join(path);
        }
    }
    path.to_path_buf()
}

struct Linear {
    weight: Vec<f32>,
    bias: Vec<f32>,
    out_dim: usize,
    in_dim: usize,
}

impl Linear {
    fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y = matmul_bt(x, &self.weight, rows, self.in_dim, self.out_dim);
        for row in y.chunks_exact_mut(self.out_dim) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

struct LayerNorm {
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl LayerNorm {
    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let d = self.weight.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            out.extend(
                row.iter()
                    .zip(self.weight.iter().zip(&self.bias))
                    .map(|(v, (w, b))| (v - mean) * inv * w + b),
            );
        }
        out
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct VitWeights {
    patch: Linear,
    patch_size: usize,
    cls_token: Vec<f32>,
    pos_embed: Vec<f32>,
    pos_grid: usize,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Option<Linear>,
    embed_dim: usize,
}

struct TensorSource<'a> {
    tensors: SafeTensors<'a>,
}

impl TensorSource<'_> {
    fn get(&self, name: &str) -> Result<(Vec<f32>, Vec<usize>)> {
        let view = self
            .tensors
            .tensor(name)
            .map_err(|_| DipsError::Config(format!("checkpoint is missing tensor `{name}`")))?;
        let bytes = view.data();
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            other => {
                return Err(DipsError::Config(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        Ok((data, view.shape().to_vec()))
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.tensor(name).is_ok()
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        let (weight, shape) = self.get(&format!("{prefix}.weight"))?;
        let (bias, _) = self.get(&format!("{prefix}.bias"))?;
        if shape.len() != 2 || bias.len() != shape[0] {
            return Err(DipsError::Config(format!("`{prefix}` has malformed shape {shape:?}")));
        }
        Ok(Linear {
            weight,
            bias,
            out_dim: shape[0],
            in_dim: shape[1],
        })
    }

    fn layer_norm(&self, prefix: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.get(&format!("{prefix}.weight"))?.0,
            bias: self.get(&format!("{prefix}.bias"))?.0,
        })
    }
}

impl VitWeights {
    fn load(path: &Path) -> Result<Self> {
        let path = resolve_checkpoint_path(path);
        let bytes = std::fs::read(&path)
            .map_err(|e| DipsError::Config(format!("cannot read backbone checkpoint {}: {e}", path.display())))?;
        let tensors = SafeTensors::deserialize(&bytes)
            .map_err(|e| DipsError::Config(format!("invalid safetensors file {}: {e}", path.display())))?;
        let src = TensorSource { tensors };

        let (pw, pshape) = src.get("patch_embed.proj.weight")?;
        if pshape.len() != 4 || pshape[1] != 3 || pshape[2] != pshape[3] {
            return Err(DipsError::Config(format!("patch embedding has shape {pshape:?}")));
        }
        let (embed_dim, patch_size) = (pshape[0], pshape[2]);
        let patch = Linear {
            weight: pw,
            bias: src.get("patch_embed.proj.bias")?.0,
            out_dim: embed_dim,
            in_dim: 3 * patch_size * patch_size,
        };
        let cls_token = src.get("cls_token")?.0;
        let pos_embed = src.get("pos_embed")?.0;
        if cls_token.len() != embed_dim || pos_embed.len() % embed_dim != 0 {
            return Err(DipsError::Config(
                "class token or position embedding has wrong width".into(),
            ));
        }
        let n_pos = pos_embed.len() / embed_dim - 1;
        let pos_grid = (n_pos as f64).sqrt().round() as usize;
        if pos_grid * pos_grid != n_pos {
            return Err(DipsError::Config("position embedding grid is not square".into()));
        }

        let mut blocks = Vec::new();
        while src.has(&format!("blocks.{}.norm1.weight", blocks.len())) {
            let p = format!("blocks.{}", blocks.len());
            blocks.push(Block {
                norm1: src.layer_norm(&format!("{p}.norm1"))?,
                qkv: src.linear(&format!("{p}.attn.qkv"))?,
                proj: src.linear(&format!("{p}.attn.proj"))?,
                norm2: src.layer_norm(&format!("{p}.norm2"))?,
                fc1: src.linear(&format!("{p}.mlp.fc1"))?,
                fc2: src.linear(&format!("{p}.mlp.fc2"))?,
            });
        }
        if blocks.is_empty() {
            return Err(DipsError::Config("checkpoint contains no transformer blocks".into()));
        }
        let head = if src.has("head.weight") {
            Some(src.linear("head")?)
        } else {
            None
        };
        Ok(Self {
            patch,
            patch_size,
            cls_token,
            pos_embed,
            pos_grid,
            blocks,
            norm: src.layer_norm("norm")?,
            head,
            embed_dim,
        })
    }

    /// SHA-256 over every parameter buffer as currently held in memory.
    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut feed = |v: &[f32]| {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        let linear = |l: &Linear, feed: &mut dyn FnMut(&[f32])| {
            feed(&l.weight);
            feed(&l.bias);
        };
        linear(&self.patch, &mut feed);
        feed(&self.cls_token);
        feed(&self.pos_embed);
        for b in &self.blocks {
            for n in [&b.norm1, &b.norm2] {
                feed(&n.weight);
                feed(&n.bias);
            }
            for l in [&b.qkv, &b.proj, &b.fc1, &b.fc2] {
                linear(l, &mut feed);
            }
        }
        feed(&self.norm.weight);
        feed(&self.norm.bias);
        if let Some(head) = &self.head {
            linear(head, &mut feed);
        }
        h.finalize().into()
    }

    /// Position embeddings for a `gw×gh` grid, bilinearly resampled when the
    /// checkpoint was trained at another resolution.
    fn positions(&self, gw: usize, gh: usize) -> Vec<f32> {
        let d = self.embed_dim;
        let g = self.pos_grid;
        if gw == g && gh == g {
            return self.pos_embed.clone();
        }
        let mut out = self.pos_embed[..d].to_vec();
        let channels: Vec<Map> = (0..d)
            .map(|c| Map::from_fn(g, g, |x, y| self.pos_embed[(1 + y * g + x) * d + c] as f64).resize_bilinear(gw, gh))
            .collect();
        for i in 0..gw * gh {
            out.extend(channels.iter().map(|m| m.data()[i] as f32));
        }
        out
    }

    fn embed(&self, image: &RgbImage) -> Vec<f32> {
        let s = self.patch_size;
        let (gw, gh) = (image.width() / s, image.height() / s);
        let n = gw * gh;
        let mut patches = Vec::with_capacity(n * 3 * s * s);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for ky in 0..s {
                        for kx in 0..s {
                            let v = image.pixel(px * s + kx, py * s + ky)[c] as f32;
                            patches.push((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
                        }
                    }
                }
            }
        }
        let tokens = self.patch.forward(&patches, n);
        let pos = self.positions(gw, gh);
        let mut x = Vec::with_capacity((n + 1) * self.embed_dim);
        x.extend_from_slice(&self.cls_token);
        x.extend_from_slice(&tokens);
        for (v, p) in x.iter_mut().zip(&pos) {
            *v += p;
        }
        x
    }

    /// Runs one block in place; returns the attention probabilities
    /// `[heads][tokens][tokens]` when requested.
    fn block(&self, block: &Block, x: &mut [f32], heads: usize, keep_attention: bool) -> Option<Vec<f32>> {
        let d = self.embed_dim;
        let n = x.len() / d;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let h = block.norm1.forward(x);
        let qkv = block.qkv.forward(&h, n);
        let mut attn_out = vec![0.0f32; n * d];
        let mut kept = keep_attention.then(|| vec![0.0f32; heads * n * n]);
        let mut scores = vec![0.0f32; n];
        for head in 0..heads {
            for i in 0..n {
                let q = &qkv[i * 3 * d + head * dh..i * 3 * d + (head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &qkv[j * 3 * d + d + head * dh..j * 3 * d + d + (head + 1) * dh];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in scores.iter_mut() {
                    *s /= total;
                }
                if let Some(kept) = kept.as_mut() {
                    kept[(head * n + i) * n..(head * n + i + 1) * n].copy_from_slice(&scores);
                }
                let out = &mut attn_out[i * d + head * dh..i * d + (head + 1) * dh];
                for (j, &a) in scores.iter().enumerate() {
                    let v = &qkv[j * 3 * d + 2 * d + head * dh..j * 3 * d + 2 * d + (head + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += a * vv;
                    }
                }
            }
        }
        let projected = block.proj.forward(&attn_out, n);
        for (v, p) in x.iter_mut().zip(&projected) {
            *v += p;
        }
        let h2 = block.norm2.forward(x);
        let mut hidden = block.fc1.forward(&h2, n);
        for v in hidden.iter_mut() {
            *v = 0.5 * *v * (1.0 + libm::erff(*v / std::f32::consts::SQRT_2));
        }
        let mlp = block.fc2.forward(&hidden, n);
        for (v, m) in x.iter_mut().zip(&mlp) {
            *v += m;
        }
        kept
    }
}

fn check_image(cfg: &BackboneConfig, image: &RgbImage) -> Result<()> {
    if image.width() != cfg.input_width || image.height() != cfg.input_height {
        return Err(invalid_input(format!(
            "image {}x{} does not match backbone input {}x{}",
            image.width(),
            image.height(),
            cfg.input_width,
            cfg.input_height
        )));
    }
    Ok(())
}

/// Attention provider backed by a pretrained ViT checkpoint.
pub struct VitBackbone {
    weights: VitWeights,
    cfg: BackboneConfig,
    selected_heads: usize,
}

impl VitBackbone {
    /// Loads a checkpoint read-only. `num_heads` cannot be inferred from the
    /// tensors and must match how the checkpoint was trained.
    pub fn load(path: &Path, num_heads: usize, selected_heads: usize, width: usize, height: usize) -> Result<Self> {
        let weights = VitWeights::load(path)?;
        if num_heads == 0 || weights.embed_dim % num_heads != 0 {
            return Err(DipsError::Config(format!(
                "embed dim {} is not divisible by {num_heads} heads",
                weights.embed_dim
            )));
        }
        if selected_heads == 0 || selected_heads > num_heads {
            return Err(DipsError::Config("selected heads must be in 1..=num_heads".into()));
        }
        let cfg = BackboneConfig {
            patch_size: weights.patch_size,
            num_blocks: weights.blocks.len(),
            embed_dim: weights.embed_dim,
            num_heads,
            input_width: width,
            input_height: height,
            temperature: 1.0,
        };
        cfg.validate().map_err(|e| DipsError::Config(e.to_string()))?;
        Ok(Self {
            weights,
            cfg,
            selected_heads,
        })
    }

    /// Class-token attention over patch tokens, one grid per head, at patch
    /// resolution.
    pub fn head_grids(&self, image: &RgbImage) -> Result<Vec<Map>> {
        check_image(&self.cfg, image)?;
        let w = &self.weights;
        let heads = self.cfg.num_heads;
        let mut x = w.embed(image);
        let (last, rest) = w.blocks.split_last().expect("at least one block");
        for block in rest {
            w.block(block, &mut x, heads, false);
        }
        let attn = w.block(last, &mut x, heads, true).expect("attention kept");
        let (gw, gh) = (self.cfg.grid_width(), self.cfg.grid_height());
        let n = gw * gh + 1;
        Ok((0..heads)
            .map(|h| Map::from_fn(gw, gh, |px, py| attn[(h * n) * n + 1 + py * gw + px] as f64))
            .collect())
    }
}

impl AttentionProvider for VitBackbone {
    fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn attention_stack(&self, input: &AttentionInput<'_>) -> Result<AttentionStack> {
        let grids = self.head_grids(input.image)?;
        let (w, h) = (self.cfg.input_width, self.cfg.input_height);
        let upsampled: Vec<Map> = grids.iter().map(|g| g.resize_bilinear(w, h)).collect();
        let mut average = Map::filled(w, h, 0.0);
        for m in &upsampled {
            for (a, v) in average.data_mut().iter_mut().zip(m.data()) {
                *a += v / upsampled.len() as f64;
            }
        }
        let mut source_ids: Vec<String> = (0..self.selected_heads).map(|i| format!("head{i}")).collect();
        source_ids.push("mean".into());
        Ok(AttentionStack {
            maps: upsampled.into_iter().take(self.selected_heads).collect(),
            average,
            source_ids,
        })
    }

    fn weights_digest(&self) -> [u8; 32] {
        self.weights.digest()
    }
}

/// Frozen classifier: the ViT class-token features through its linear head.
pub struct VitClassifier {
    weights: VitWeights,
    cfg: BackboneConfig,
    num_classes: usize,
}

impl VitClassifier {
    pub fn load(path: &Path, num_heads: usize, width: usize, height: usize) -> Result<Self> {
        let weights = VitWeights::load(path)?;
        let Some(head) = weights.head.as_ref() else {
            return Err(DipsError::Config("checkpoint has no classification head".into()));
        };
        let num_classes = head.out_dim;
        if num_heads == 0 || weights.embed_dim % num_heads != 0 {
            return Err(DipsError::Config("embed dim is not divisible by head count".into()));
        }
        let cfg = BackboneConfig {
            patch_size: weights.patch_size,
            num_blocks: weights.blocks.len(),
            embed_dim: weights.embed_dim,
            num_heads,
            input_width: width,
            input_height: height,
            temperature: 1.0,
        };
        cfg.validate().map_err(|e| DipsError::Config(e.to_string()))?;
        Ok(Self {
            weights,
            cfg,
            num_classes,
        })
    }
}

impl Classifier for VitClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn temperature(&self) -> f64 {
        self.cfg.temperature
    }

    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>> {
        check_image(&self.cfg, image)?;
        let w = &self.weights;
        let mut x = w.embed(image);
        for block in &w.blocks {
            w.block(block, &mut x, self.cfg.num_heads, false);
        }
        let cls = w.norm.forward(&x[..w.embed_dim]);
        let head = w.head.as_ref().expect("checked at load");
        Ok(head.forward(&cls, 1).into_iter().map(f64::from).collect())
    }

    fn weights_digest(&self) -> [u8; 32] {
        self.weights.digest()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use safetensors::tensor::TensorView;
    use std::collections::BTreeMap;

    pub(crate) struct TinyVit {
        pub dim: usize,
        pub patch: usize,
        pub tensors: BTreeMap<String, (Vec<f32>, Vec<usize>)>,
    }

    impl TinyVit {
        pub(crate) fn random(seed: u64, dim: usize, patch: usize, grid: usize, blocks: usize, classes: usize) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tensors = BTreeMap::new();
            let mut add = |name: String, shape: Vec<usize>, scale: f32, offset: f32| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| offset + scale * rng.random_range(-1.0f32..1.0))
                    .collect();
                tensors.insert(name, (data, shape));
            };
            add("patch_embed.proj.weight".into(), vec![dim, 3, patch, patch], 0.3, 0.0);
            add("patch_embed.proj.bias".into(), vec![dim], 0.1, 0.0);
            add("cls_token".into(), vec![1, 1, dim], 0.5, 0.0);
            add("pos_embed".into(), vec![1, grid * grid + 1, dim], 0.5, 0.0);
            for b in 0..blocks {
                let p = format!("blocks.{b}");
                add(format!("{p}.norm1.weight"), vec![dim], 0.1, 1.0);
                add(format!("{p}.norm1.bias"), vec![dim], 0.1, 0.0);
                add(format!("{p}.attn.qkv.weight"), vec![3 * dim, dim], 0.5, 0.0);
                add(format!("{p}.attn.qkv.bias"), vec![3 * dim], 0.1, 0.0);
                add(format!("{p}.attn.proj.weight"), vec![dim, dim], 0.3, 0.0);
                add(format!("{p}.attn.proj.bias"), vec![dim], 0.1, 0.0);
                add(format!("{p}.norm2.weight"), vec![dim], 0.1, 1.0);
                add(format!("{p}.norm2.bias"), vec![dim], 0.1, 0.0);
                add(format!("{p}.mlp.fc1.weight"), vec![2 * dim, dim], 0.3, 0.0);
                add(format!("{p}.mlp.fc1.bias"), vec![2 * dim], 0.1, 0.0);
                add(format!("{p}.mlp.fc2.weight"), vec![dim, 2 * dim], 0.3, 0.0);
                add(format!("{p}.mlp.fc2.bias"), vec![dim], 0.1, 0.0);
            }
            add("norm.weight".into(), vec![dim], 0.1, 1.0);
            add("norm.bias".into(), vec![dim], 0.1, 0.0);
            add("head.weight".into(), vec![classes, dim], 0.5, 0.0);
            add("head.bias".into(), vec![classes], 0.1, 0.0);
            Self { dim, patch, tensors }
        }

        pub(crate) fn write(&self, path: &Path) {
            let bytes: BTreeMap<String, Vec<u8>> = self
                .tensors
                .iter()
                .map(|(k, (d, _))| (k.clone(), d.iter().flat_map(|v| v.to_le_bytes()).collect()))
                .collect();
            let views: Vec<(String, TensorView<'_>)> = self
                .tensors
                .iter()
                .map(|(k, (_, s))| (k.clone(), TensorView::new(Dtype::F32, s.clone(), &bytes[k]).unwrap()))
                .collect();
            safetensors::serialize_to_file(views, None, path).unwrap();
        }
    }

    fn test_image(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| ((i * 31 % 17) as f64) / 17.0).collect();
        RgbImage::from_vec(w, h, data).unwrap()
    }

    /// Independent f64 re-derivation of the class-token attention for a
    /// single-block model: embed, layer norm, q·k softmax.
    fn naive_cls_attention(t: &TinyVit, image: &RgbImage, heads: usize) -> Vec<Vec<f64>> {
        let get = |k: &str| t.tensors[k].0.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (d, s) = (t.dim, t.patch);
        let (gw, gh) = (image.width() / s, image.height() / s);
        let pw = get("patch_embed.proj.weight");
        let pb = get("patch_embed.proj.bias");
        let pos = get("pos_embed");
        let mut tokens = vec![get("cls_token")];
        for py in 0..gh {
            for px in 0..gw {
                let mut tok = vec![0.0; d];
                for (o, t) in tok.iter_mut().enumerate() {
                    let mut acc = pb[o];
                    for c in 0..3 {
                        for ky in 0..s {
                            for kx in 0..s {
                                let v = (image.pixel(px * s + kx, py * s + ky)[c] - IMAGENET_MEAN[c] as f64)
                                    / IMAGENET_STD[c] as f64;
                                acc += pw[((o * 3 + c) * s + ky) * s + kx] * v;
                            }
                        }
                    }
                    *t = acc;
                }
                tokens.push(tok);
            }
        }
        for (i, tok) in tokens.iter_mut().enumerate() {
            for (c, v) in tok.iter_mut().enumerate() {
                *v += pos[i * d + c];
            }
        }
        let (g, b) = (get("blocks.0.norm1.weight"), get("blocks.0.norm1.bias"));
        let normed: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| {
                let mean = t.iter().sum::<f64>() / d as f64;
                let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                t.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / (var + 1e-6).sqrt() * g[c] + b[c])
                    .collect()
            })
            .collect();
        let (qw, qb) = (get("blocks.0.attn.qkv.weight"), get("blocks.0.attn.qkv.bias"));
        let project = |t: &[f64], row: usize| -> f64 { qb[row] + (0..d).map(|c| qw[row * d + c] * t[c]).sum::<f64>() };
        let dh = d / heads;
        (0..heads)
            .map(|h| {
                let q: Vec<f64> = (0..dh).map(|j| project(&normed[0], h * dh + j)).collect();
                let scores: Vec<f64> = normed
                    .iter()
                    .map(|t| (0..dh).map(|j| q[j] * project(t, d + h * dh + j)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let tot: f64 = e.iter().sum();
                e[1..].iter().map(|v| v / tot).collect()
            })
            .collect()
    }

    #[test]
    fn class_token_attention_matches_naive_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let tiny = TinyVit::random(3, 8, 4, 4, 1, 3);
        tiny.write(&path);
        let vit = VitBackbone::load(&path, 2, 2, 16, 16).unwrap();
        let img = test_image(16, 16);
        let grids = vit.head_grids(&img).unwrap();
        let oracle = naive_cls_attention(&tiny, &img, 2);
        for (grid, want) in grids.iter().zip(&oracle) {
            for (a, b) in grid.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stack_contract_and_frozen_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        TinyVit::random(5, 8, 4, 4, 2, 3).write(&path);
        let vit = VitBackbone::load(&path, 2, 1, 32, 16).unwrap();
        let before = vit.weights_digest();
        let img = test_image(32, 16);
        let a = vit.attention_stack(&AttentionInput::image_only(&img)).unwrap();
        let b = vit.attention_stack(&AttentionInput::image_only(&img)).unwrap();
        a.validate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|m| m.width() == 32 && m.height() == 16));
        assert_eq!(before, vit.weights_digest());

        let clf = VitClassifier::load(&path, 2, 32, 16).unwrap();
        let p = clf.output(&img).unwrap();
        assert_eq!(p.probabilities.len(), 3);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(clf.classify(&img, 1).unwrap(), clf.classify(&img, 1).unwrap());
        assert!(matches!(
            clf.cross_entropy_with_input_grad(&img, 0),
            Err(DipsError::Unsupported(_))
        ));
    }

    #[test]
    fn missing_or_broken_checkpoint_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.safetensors");
        assert!(matches!(
            VitBackbone::load(&missing, 6, 4, 224, 224),
            Err(DipsError::Config(_))
        ));
        let junk = dir.path().join("junk.safetensors");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(matches!(
            VitBackbone::load(&junk, 6, 4, 224, 224),
            Err(DipsError::Config(_))
        ));

        let mut tiny = TinyVit::random(1, 8, 4, 4, 1, 3);
        tiny.tensors.remove("blocks.0.attn.qkv.weight");
        let partial = dir.path().join("partial.safetensors");
        tiny.write(&partial);
        let err = VitBackbone::load(&partial, 2, 2, 16, 16).err().unwrap();
        assert!(err.to_string().contains("blocks.0.attn.qkv.weight"));
    }

    #[test]
    fn wrong_image_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        TinyVit::random(2, 8, 4, 4, 1, 3).write(&path);
        let vit = VitBackbone::load(&path, 2, 2, 16, 16).unwrap();
        let img = test_image(20, 16);
        assert!(matches!(
            vit.attention_stack(&AttentionInput::image_only(&img)),
            Err(DipsError::InvalidInput(_))
        ));
    }
}
