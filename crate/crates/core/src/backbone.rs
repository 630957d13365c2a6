//! Frozen ViT feature extractor.
//!
//! The network follows the DINOv3 ViT layout: a strided patch-embedding
//! convolution, one class token plus storage (register) tokens, pre-norm
//! Transformer blocks with 2D rotary position embeddings on the patch tokens
//! and layer-scale on both residual branches. Intermediate features are read
//! from the residual stream after a block, before the final norm.
//!
//! All weights are plain tensors, never `Var`s: the optimizer cannot see
//! them and autograd never produces a gradient for them, while gradients
//! still flow through the activations back to the input image.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};

/// Per-channel statistics the pretrained encoder expects on [0, 1] inputs.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const ROPE_BASE: f64 = 100.0;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneGeometry {
    pub block_count: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub storage_tokens: usize,
}

impl Default for BackboneGeometry {
    fn default() -> Self {
        Self::vit_b16()
    }
}

impl BackboneGeometry {
    /// ViT-B/16: 12 blocks, width 768, 12 heads, 4 storage tokens.
    pub const fn vit_b16() -> Self {
        Self {
            block_count: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_hidden: 3072,
            patch_size: 16,
            storage_tokens: 4,
        }
    }

    /// Reduced stand-in with the same layout, for desk-scale runs.
    pub const fn tiny(block_count: usize, embed_dim: usize, patch_size: usize) -> Self {
        Self {
            block_count,
            embed_dim,
            num_heads: 2,
            mlp_hidden: 2 * embed_dim,
            patch_size,
            storage_tokens: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 || self.embed_dim == 0 || self.patch_size == 0 {
            return Err(config_err!("backbone geometry has a zero dimension: {self:?}"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(config_err!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if self.head_dim() % 4 != 0 {
            return Err(config_err!("head dim {} must be a multiple of 4 for 2D RoPE", self.head_dim()));
        }
        Ok(())
    }

    /// Expected tensor names and shapes, in load/validation order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let m = self.mlp_hidden;
        let mut out = vec![
            ("patch_embed.proj.weight".to_string(), vec![d, 3, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, 1, d]),
        ];
        if self.storage_tokens > 0 {
            out.push(("storage_tokens".to_string(), vec![1, self.storage_tokens, d]));
        }
        for i in 0..self.block_count {
            let b = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (b("norm1.weight"), vec![d]),
                (b("norm1.bias"), vec![d]),
                (b("attn.qkv.weight"), vec![3 * d, d]),
                (b("attn.qkv.bias"), vec![3 * d]),
                (b("attn.proj.weight"), vec![d, d]),
                (b("attn.proj.bias"), vec![d]),
                (b("ls1.gamma"), vec![d]),
                (b("norm2.weight"), vec![d]),
                (b("norm2.bias"), vec![d]),
                (b("mlp.fc1.weight"), vec![m, d]),
                (b("mlp.fc1.bias"), vec![m]),
                (b("mlp.fc2.weight"), vec![d, m]),
                (b("mlp.fc2.bias"), vec![d]),
                (b("ls2.gamma"), vec![d]),
            ]);
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsSource {
    PretrainedFile,
    #[serde(alias = "standin")]
    DeterministicStandin,
}

impl std::fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightsSource::PretrainedFile => f.write_str("pretrained-file"),
            WeightsSource::DeterministicStandin => f.write_str("deterministic-standin"),
        }
    }
}

/// Block indices (1-based) whose outputs are tapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TapSpec(Vec<usize>);

impl TapSpec {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err!("tap list is empty"));
        }
        if layers[0] == 0 {
            return Err(config_err!("tap indices are 1-based, got 0"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("tap indices must be strictly increasing: {layers:?}"));
        }
        Ok(Self(layers))
    }

    /// Taps after every `block_count / levels`-th block, e.g. 3, 6, 9, 12.
    pub fn evenly_spaced(block_count: usize, levels: usize) -> Result<Self> {
        if levels == 0 || block_count < levels {
            return Err(config_err!("cannot place {levels} taps in {block_count} blocks"));
        }
        let stride = block_count / levels;
        Self::new((1..=levels).map(|i| i * stride).collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_against(&self, block_count: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l > block_count) {
            Some(l) => Err(config_err!("tap {l} out of range 1..={block_count}")),
            None => Ok(()),
        }
    }
}

impl Default for TapSpec {
    fn default() -> Self {
        Self(vec![3, 6, 9, 12])
    }
}

impl TryFrom<Vec<usize>> for TapSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TapSpec> for Vec<usize> {
    fn from(t: TapSpec) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Cnn,
    Dino,
    Fused,
}

/// A `[batch, channels, height, width]` feature map at one hierarchy level.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub data: Tensor,
    pub level: usize,
    pub source: FeatureSource,
}

impl FeatureGrid {
    pub fn new(data: Tensor, level: usize, source: FeatureSource) -> Self {
        Self {
            data,
            level,
            source,
        }
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }

    pub fn is_finite(&self) -> Result<bool> {
        crate::nn::all_finite(&self.data)
    }
}

/// Settings for obtaining a backbone. Keys map to `backbone.*` in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub mode: WeightsSource,
    pub weights_path: Option<PathBuf>,
    pub taps: TapSpec,
    pub seed: u64,
    pub geometry: BackboneGeometry,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: WeightsSource::DeterministicStandin,
            weights_path: None,
            taps: TapSpec::default(),
            seed: 0,
            geometry: BackboneGeometry::vit_b16(),
        }
    }
}

impl BackboneConfig {
    pub fn load(&self, dtype: DType, device: &Device) -> Result<BackboneHandle> {
        self.taps.check_against(self.geometry.block_count)?;
        let source = match self.mode {
            WeightsSource::PretrainedFile => {
                let path = self
                    .weights_path
                    .as_deref()
                    .ok_or_else(|| config_err!("backbone.mode = pretrained-file needs backbone.weights_path"))?;
                WeightsInit::File(path)
            }
            WeightsSource::DeterministicStandin => WeightsInit::Standin { seed: self.seed },
        };
        load_backbone(self.geometry, source, dtype, device)
    }
}

pub enum WeightsInit<'a> {
    File(&'a Path),
    Standin { seed: u64 },
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ls1: Tensor,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ls2: Tensor,
}

pub struct BackboneHandle {
    geometry: BackboneGeometry,
    source: WeightsSource,
    weights: BTreeMap<String, Tensor>,
    patch_embed: Conv2d,
    prefix: Tensor,
    blocks: Vec<Block>,
    checksum: String,
    calls: AtomicUsize,
}

impl std::fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneHandle")
            .field("geometry", &self.geometry)
            .field("source", &self.source)
            .field("checksum", &self.checksum)
            .finish()
    }
}

/// Loads a frozen backbone, either from a safetensors file whose tensors must
/// match `geometry`'s manifest, or as a seeded stand-in.
pub fn load_backbone(
    geometry: BackboneGeometry,
    init: WeightsInit<'_>,
    dtype: DType,
    device: &Device,
) -> Result<BackboneHandle> {
    geometry.validate()?;
    let manifest = geometry.manifest();
    let (weights, source) = match init {
        WeightsInit::File(path) => (read_weight_file(path, &manifest, dtype, device)?, WeightsSource::PretrainedFile),
        WeightsInit::Standin { seed } => (
            standin_weights(&manifest, seed, dtype, device)?,
            WeightsSource::DeterministicStandin,
        ),
    };
    BackboneHandle::assemble(geometry, source, weights)
}

fn read_weight_file(
    path: &Path,
    manifest: &[(String, Vec<usize>)],
    dtype: DType,
    device: &Device,
) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "weight file not found"),
        ));
    }
    let mut raw: HashMap<String, Tensor> =
        candle_core::safetensors::load(path, device).map_err(|e| Error::WeightLoad {
            path: path.to_path_buf(),
            tensor: "<container header>".into(),
            reason: e.to_string(),
        })?;
    let mut out = BTreeMap::new();
    for (name, shape) in manifest {
        let t = raw.remove(name).ok_or_else(|| Error::WeightLoad {
            path: path.to_path_buf(),
            tensor: name.clone(),
            reason: "missing from file".into(),
        })?;
        if t.dims() != shape.as_slice() {
            return Err(config_err!(
                "tensor `{name}` in {} has shape {:?}, expected {:?}",
                path.display(),
                t.dims(),
                shape
            ));
        }
        out.insert(name.clone(), t.to_dtype(dtype)?);
    }
    Ok(out)
}

fn standin_weights(
    manifest: &[(String, Vec<usize>)],
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let fill = |v: f64| vec![v; n];
        let values = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
            fill(1.0)
        } else if name.ends_with("norm1.bias") || name.ends_with("norm2.bias") || name == "norm.bias" {
            fill(0.0)
        } else if name.ends_with(".gamma") {
            fill(0.5)
        } else {
            let bound = if name == "cls_token" || name == "storage_tokens" {
                3f64.sqrt()
            } else if name.ends_with(".bias") {
                0.02
            } else {
                let fan_in: usize = shape[1..].iter().product();
                (3.0 / fan_in as f64).sqrt()
            };
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let t = Tensor::from_vec(values, shape.as_slice(), device)?.to_dtype(dtype)?;
        out.insert(name.clone(), t);
    }
    Ok(out)
}

fn checksum_of(weights: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in weights {
        hasher.update(name.as_bytes());
        hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Checksum of every backbone parameter; equal before and after training.
pub fn parameter_checksum(handle: &BackboneHandle) -> Result<String> {
    checksum_of(&handle.weights)
}

impl BackboneHandle {
    fn assemble(
        geometry: BackboneGeometry,
        source: WeightsSource,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let w = |name: &str| weights[name].clone();
        let patch_embed = Conv2d::from_tensors(
            w("patch_embed.proj.weight"),
            Some(w("patch_embed.proj.bias")),
            geometry.patch_size,
            0,
        );
        let prefix = if geometry.storage_tokens > 0 {
            Tensor::cat(&[w("cls_token"), w("storage_tokens")], 1)?
        } else {
            w("cls_token")
        };
        let blocks = (0..geometry.block_count)
            .map(|i| {
                let b = |s: &str| w(&format!("blocks.{i}.{s}"));
                Block {
                    norm1: LayerNorm::from_tensors(b("norm1.weight"), b("norm1.bias"), LN_EPS),
                    qkv: Linear::from_tensors(b("attn.qkv.weight"), Some(b("attn.qkv.bias"))),
                    proj: Linear::from_tensors(b("attn.proj.weight"), Some(b("attn.proj.bias"))),
                    ls1: b("ls1.gamma"),
                    norm2: LayerNorm::from_tensors(b("norm2.weight"), b("norm2.bias"), LN_EPS),
                    fc1: Linear::from_tensors(b("mlp.fc1.weight"), Some(b("mlp.fc1.bias"))),
                    fc2: Linear::from_tensors(b("mlp.fc2.weight"), Some(b("mlp.fc2.bias"))),
                    ls2: b("ls2.gamma"),
                }
            })
            .collect();
        let checksum = checksum_of(&weights)?;
        Ok(Self {
            geometry,
            source,
            weights,
            patch_embed,
            prefix,
            blocks,
            checksum,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn geometry(&self) -> &BackboneGeometry {
        &self.geometry
    }

    pub fn block_count(&self) -> usize {
        self.geometry.block_count
    }

    pub fn embed_dim(&self) -> usize {
        self.geometry.embed_dim
    }

    pub fn patch_size(&self) -> usize {
        self.geometry.patch_size
    }

    pub fn source(&self) -> WeightsSource {
        self.source
    }

    /// Always true: weights are immutable tensors after load.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn dtype(&self) -> DType {
        self.prefix.dtype()
    }

    pub fn device(&self) -> &Device {
        self.prefix.device()
    }

    /// Checksum computed at load time.
    pub fn load_checksum(&self) -> &str {
        &self.checksum
    }

    /// Short identifier stored in generator checkpoints.
    pub fn identifier(&self) -> String {
        format!(
            "vit-{}x{}-p{}/{}/{}",
            self.geometry.block_count,
            self.geometry.embed_dim,
            self.geometry.patch_size,
            self.source,
            &self.checksum[..16]
        )
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of `extract_features` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// `[B, 1, H, W]` slices in [-1, 1] to `[B, 3, H, W]` encoder input.
    pub fn prepare_input(&self, slices: &Tensor) -> Result<Tensor> {
        prepare_backbone_input(slices, self.geometry.patch_size)
    }

    /// Runs the blocks up to the deepest tap and returns one
    /// `[B, embed_dim, H/p, W/p]` grid per tap.
    pub fn extract_features(&self, images: &Tensor, taps: &TapSpec) -> Result<Vec<FeatureGrid>> {
        taps.check_against(self.geometry.block_count)?;
        let (b, c, h, w) = images.dims4()?;
        let p = self.geometry.patch_size;
        if c != 3 {
            return Err(shape_err!("backbone expects 3 input channels, got {c}"));
        }
        if h % p != 0 || w % p != 0 {
            return Err(shape_err!("input {h}x{w} not divisible by patch size {p}"));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (gh, gw) = (h / p, w / p);
        let patches = self.patch_embed.forward(images)?.flatten_from(2)?.transpose(1, 2)?;
        let prefix = self.prefix.broadcast_as((b, self.prefix.dims()[1], self.geometry.embed_dim))?;
        let mut x = Tensor::cat(&[&prefix, &patches.contiguous()?], 1)?;
        let (sin, cos) = self.rope_tables(gh, gw, images.dtype(), images.device())?;
        let n_prefix = self.prefix.dims()[1];
        let deepest = *taps.layers().last().unwrap_or(&0);
        let mut grids = Vec::with_capacity(taps.len());
        for (i, block) in self.blocks.iter().take(deepest).enumerate() {
            x = self.block_forward(block, &x, &sin, &cos, n_prefix)?;
            if let Some(pos) = taps.layers().iter().position(|&l| l == i + 1) {
                let grid = tokens_to_grid(&x, (gh, gw))?;
                grids.push(FeatureGrid::new(grid, pos + 1, FeatureSource::Dino));
            }
        }
        Ok(grids)
    }

    fn rope_tables(&self, gh: usize, gw: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
        let hd = self.geometry.head_dim();
        let (sin, cos) = rope_sin_cos(gh, gw, hd);
        let sin = Tensor::from_vec(sin, (gh * gw, hd), dev)?.to_dtype(dtype)?;
        let cos = Tensor::from_vec(cos, (gh * gw, hd), dev)?.to_dtype(dtype)?;
        Ok((sin, cos))
    }

    fn block_forward(&self, blk: &Block, x: &Tensor, sin: &Tensor, cos: &Tensor, n_prefix: usize) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let heads = self.geometry.num_heads;
        let hd = d / heads;
        let qkv = blk
            .qkv
            .forward(&blk.norm1.forward(x)?)?
            .reshape((b, t, 3, heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = apply_rope(&qkv.get(0)?, sin, cos, n_prefix)?;
        let k = apply_rope(&qkv.get(1)?, sin, cos, n_prefix)?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        let x = (x + blk.proj.forward(&out)?.broadcast_mul(&blk.ls1)?)?;
        let h = crate::nn::gelu(&blk.fc1.forward(&blk.norm2.forward(&x)?)?)?;
        Ok((&x + blk.fc2.forward(&h)?.broadcast_mul(&blk.ls2)?)?)
    }
}

/// Axial 2D rotary tables for a `gh x gw` patch grid, each `[gh*gw, head_dim]`
/// (row-major). Coordinates are patch centers normalized to [-1, 1] per axis.
pub fn rope_sin_cos(gh: usize, gw: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let quarter = head_dim / 4;
    let periods: Vec<f64> = (0..quarter)
        .map(|k| ROPE_BASE.powf(2.0 * k as f64 / (head_dim / 2) as f64))
        .collect();
    let mut sin = Vec::with_capacity(gh * gw * head_dim);
    let mut cos = Vec::with_capacity(gh * gw * head_dim);
    for y in 0..gh {
        for x in 0..gw {
            let cy = 2.0 * (y as f64 + 0.5) / gh as f64 - 1.0;
            let cx = 2.0 * (x as f64 + 0.5) / gw as f64 - 1.0;
            let half: Vec<f64> = periods
                .iter()
                .map(|p| 2.0 * std::f64::consts::PI * cy / p)
                .chain(periods.iter().map(|p| 2.0 * std::f64::consts::PI * cx / p))
                .collect();
            for _ in 0..2 {
                sin.extend(half.iter().map(|a| a.sin()));
                cos.extend(half.iter().map(|a| a.cos()));
            }
        }
    }
    (sin, cos)
}

fn apply_rope(x: &Tensor, sin: &Tensor, cos: &Tensor, n_prefix: usize) -> Result<Tensor> {
    let t = x.dim(2)?;
    let hd = x.dim(3)?;
    let prefix = x.narrow(2, 0, n_prefix)?;
    let patches = x.narrow(2, n_prefix, t - n_prefix)?;
    let x1 = patches.narrow(3, 0, hd / 2)?;
    let x2 = patches.narrow(3, hd / 2, hd / 2)?;
    let rotated = Tensor::cat(&[&x2.neg()?, &x1], 3)?;
    let roped = (patches.broadcast_mul(cos)? + rotated.broadcast_mul(sin)?)?;
    Ok(Tensor::cat(&[&prefix, &roped], 2)?.contiguous()?)
}

/// Replicates a single-channel `[B, 1, H, W]` batch in [-1, 1] to three
/// channels and applies the encoder's per-channel mean/std remap on the
/// [0, 1] scale. `H` and `W` must be multiples of `patch_size`.
pub fn prepare_backbone_input(slices: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (_, c, h, w) = slices.dims4()?;
    if c != 1 {
        return Err(shape_err!("expected single-channel slices, got {c} channels"));
    }
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(shape_err!("slice {h}x{w} not divisible by patch size {patch_size}"));
    }
    let rgb = Tensor::cat(&[slices, slices, slices], 1)?;
    let dev = slices.device();
    // (x + 1) / 2 then (v - mean) / std, folded into one affine map per channel
    let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 0.5 / s).collect();
    let shift: Vec<f64> = IMAGENET_MEAN
        .iter()
        .zip(IMAGENET_STD)
        .map(|(m, s)| (0.5 - m) / s)
        .collect();
    let scale = Tensor::from_vec(scale, (1, 3, 1, 1), dev)?.to_dtype(slices.dtype())?;
    let shift = Tensor::from_vec(shift, (1, 3, 1, 1), dev)?.to_dtype(slices.dtype())?;
    Ok(rgb.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

/// `[B, T, D]` tokens to a `[B, D, h, w]` grid from the last `h*w` tokens
/// (row-major patch order); leading class/storage tokens are dropped.
pub fn tokens_to_grid(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    let (h, w) = grid;
    if t < h * w {
        return Err(shape_err!("{t} tokens cannot fill a {h}x{w} grid"));
    }
    Ok(tokens
        .narrow(1, t - h * w, h * w)?
        .transpose(1, 2)?
        .reshape((b, d, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    fn tiny() -> BackboneHandle {
        load_backbone(
            BackboneGeometry::tiny(4, 16, 8),
            WeightsInit::Standin { seed: 3 },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn tap_spec_rules() {
        assert!(TapSpec::new(vec![3, 6, 9, 12]).is_ok());
        assert!(TapSpec::new(vec![3, 3]).is_err());
        assert!(TapSpec::new(vec![6, 3]).is_err());
        assert!(TapSpec::new(vec![0, 3]).is_err());
        assert!(TapSpec::new(vec![]).is_err());
        assert!(TapSpec::new(vec![3, 13]).unwrap().check_against(12).is_err());
        assert_eq!(TapSpec::evenly_spaced(12, 4).unwrap(), TapSpec::default());
    }

    #[test]
    fn vit_b16_manifest_size() {
        // ViT-B/16 without classifier head is roughly 86M parameters.
        let n = BackboneGeometry::vit_b16().param_count();
        assert!((85_000_000..87_000_000).contains(&n), "{n}");
    }

    #[test]
    fn prepare_input_constant_zero_golden() {
        let x = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let y = prepare_backbone_input(&x, 16).unwrap();
        assert_eq!(y.dims(), &[1, 3, 16, 16]);
        let v = to_f64_vec(&y).unwrap();
        let golden = [0.0655021834061135, 0.19642857142857142, 0.41777777777777775];
        for c in 0..3 {
            for &val in &v[c * 256..(c + 1) * 256] {
                assert!((val - golden[c]).abs() < 1e-12, "{c}: {val}");
            }
        }
    }

    #[test]
    fn prepare_input_rejects_non_multiple() {
        let x = Tensor::zeros((1, 1, 250, 250), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(prepare_backbone_input(&x, 16), Err(Error::Shape(_))));
    }

    #[test]
    fn tokens_to_grid_index_law() {
        let (b, t, d, h, w) = (2, 7, 3, 2, 3);
        let tokens = Tensor::arange(0f64, (b * t * d) as f64, &Device::Cpu)
            .unwrap()
            .reshape((b, t, d))
            .unwrap();
        let g = tokens_to_grid(&tokens, (h, w)).unwrap();
        assert_eq!(g.dims(), &[b, d, h, w]);
        let gv = to_f64_vec(&g).unwrap();
        for bi in 0..b {
            for c in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let tok = t - h * w + y * w + x;
                        let expect = (bi * t * d + tok * d + c) as f64;
                        assert_eq!(gv[((bi * d + c) * h + y) * w + x], expect);
                    }
                }
            }
        }
        assert!(matches!(tokens_to_grid(&tokens.narrow(1, 0, 5).unwrap(), (2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn extract_shapes_and_determinism() {
        let bb = tiny();
        let x = Tensor::rand(-1f32, 1., (2, 1, 32, 32), &Device::Cpu).unwrap();
        let img = bb.prepare_input(&x).unwrap();
        let taps = TapSpec::new(vec![1, 2, 3, 4]).unwrap();
        let a = bb.extract_features(&img, &taps).unwrap();
        let b = bb.extract_features(&img, &taps).unwrap();
        assert_eq!(a.len(), 4);
        for (ga, gb) in a.iter().zip(&b) {
            assert_eq!(ga.dims(), &[2, 16, 4, 4]);
            assert!(ga.is_finite().unwrap());
            assert_eq!(to_f64_vec(&ga.data).unwrap(), to_f64_vec(&gb.data).unwrap());
        }
        assert_eq!(bb.calls(), 2);
        let bad = TapSpec::new(vec![5]).unwrap();
        assert!(matches!(bb.extract_features(&img, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn rope_tables_are_rotations() {
        let (s, c) = rope_sin_cos(3, 5, 8);
        assert_eq!(s.len(), 15 * 8);
        for (a, b) in s.iter().zip(&c) {
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }
}
