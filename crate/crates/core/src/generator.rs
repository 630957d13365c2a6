//! DGCN generator: a trainable UNet-style CNN encoder/decoder whose skip
//! features are fused, level by level, with projected features from the
//! frozen backbone.
//!
//! Per level `i` with CNN width `C`:
//!
//! ```text
//! aligned = bilinear(conv1x1(f_dino))                  768 -> C, resized to f_cnn
//! fused   = gelu(bn(conv3x3(cat[f_cnn, aligned])))     2C -> C
//! out     = fused + conv3x3(fused)                     residual refinement
//! ```
//!
//! The decoder starts from the deepest fused grid and, for each shallower
//! level, upsamples x2 with a transposed convolution, concatenates that
//! level's fused grid and applies a conv block. A 1x1 head emits one channel
//! with no output activation.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, FeatureGrid, FeatureSource, TapSpec};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{gelu, resize_bilinear, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, ParamStore, ResizeConvention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    CrossFusion,
    Concat,
    CnnOnly,
    VitOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::VitOnly, Variant::CnnOnly, Variant::Concat, Variant::CrossFusion];

    pub fn uses_backbone(self) -> bool {
        !matches!(self, Variant::CnnOnly)
    }

    pub fn uses_cnn_encoder(self) -> bool {
        !matches!(self, Variant::VitOnly)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::CrossFusion => "DGCN (cross fusion)",
            Variant::Concat => "DGCN (concat)",
            Variant::CnnOnly => "CNN only",
            Variant::VitOnly => "ViT only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::CrossFusion => "cross-fusion",
            Variant::Concat => "concat",
            Variant::CnnOnly => "cnn-only",
            Variant::VitOnly => "vit-only",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-fusion" => Ok(Variant::CrossFusion),
            "concat" => Ok(Variant::Concat),
            "cnn-only" => Ok(Variant::CnnOnly),
            "vit-only" => Ok(Variant::VitOnly),
            other => Err(config_err!("unknown variant `{other}`")),
        }
    }
}

/// Keys map to `model.*` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub variant: Variant,
    #[serde(rename = "channels")]
    pub encoder_channels: Vec<usize>,
    pub input_size: usize,
    pub levels: usize,
    pub resize: ResizeConvention,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CrossFusion,
            encoder_channels: vec![64, 128, 256, 512],
            input_size: 256,
            levels: 4,
            resize: ResizeConvention::HalfPixel,
        }
    }
}

impl GeneratorConfig {
    pub fn new(variant: Variant, encoder_channels: Vec<usize>, input_size: usize) -> Self {
        let levels = encoder_channels.len();
        Self {
            variant,
            encoder_channels,
            input_size,
            levels,
            resize: ResizeConvention::HalfPixel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(config_err!("generator needs at least one level"));
        }
        if self.encoder_channels.len() != self.levels {
            return Err(config_err!(
                "{} encoder channel entries for {} levels",
                self.encoder_channels.len(),
                self.levels
            ));
        }
        if self.encoder_channels.contains(&0) {
            return Err(config_err!("zero-width level in {:?}", self.encoder_channels));
        }
        let stride = 1 << (self.levels - 1);
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(config_err!(
                "input size {} not divisible by 2^(levels-1) = {stride}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Spatial size of level `i` (0-based).
    pub fn level_size(&self, i: usize) -> usize {
        self.input_size >> i
    }
}

/// Two (3x3 conv, batch norm, GELU) layers.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = gelu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?)?;
        gelu(&self.bn2.forward(&self.conv2.forward(&x)?, mode)?)
    }
}

/// Cross Fusion block: projection + bilinear alignment, concat + 3x3 conv +
/// BN + GELU, then a zero-initialized residual 3x3 refinement.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    pub proj: Conv2d,
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
    pub residual: Conv2d,
    channels: usize,
    resize: ResizeConvention,
}

/// Intermediate and final results of one cross-fusion pass.
pub struct FusionParts {
    pub aligned: Tensor,
    pub fused: Tensor,
    pub refined: Tensor,
}

impl CrossFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dino_dim: usize,
        channels: usize,
        resize: ResizeConvention,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), dino_dim, channels, 1, 1, 0)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), 2 * channels, channels, 3, 1, 1)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels)?,
            residual: Conv2d::zeros(store, &format!("{name}.residual"), channels, channels, 3, 1)?,
            channels,
            resize,
        })
    }

    pub fn forward_parts(&self, f_cnn: &Tensor, f_dino: &Tensor, mode: Mode) -> Result<FusionParts> {
        let (_, _, h, w) = f_cnn.dims4()?;
        let aligned = resize_bilinear(&self.proj.forward(f_dino)?, (h, w), self.resize)?;
        let cat = Tensor::cat(&[f_cnn, &aligned], 1)?;
        let fused = gelu(&self.bn.forward(&self.fuse.forward(&cat)?, mode)?)?;
        let refined = (&fused + self.residual.forward(&fused)?)?;
        Ok(FusionParts {
            aligned,
            fused,
            refined,
        })
    }
}

/// Ablation fusion: alignment, concatenation and a 1x1 channel reducer.
#[derive(Debug, Clone)]
pub struct ConcatFusion {
    pub proj: Conv2d,
    pub reduce: Conv2d,
    channels: usize,
    resize: ResizeConvention,
}

impl ConcatFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dino_dim: usize,
        channels: usize,
        resize: ResizeConvention,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(store, &format!("{name}.proj"), dino_dim, channels, 1, 1, 0)?,
            reduce: Conv2d::new(store, &format!("{name}.reduce"), 2 * channels, channels, 1, 1, 0)?,
            channels,
            resize,
        })
    }

    fn forward(&self, f_cnn: &Tensor, f_dino: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = f_cnn.dims4()?;
        let aligned = resize_bilinear(&self.proj.forward(f_dino)?, (h, w), self.resize)?;
        self.reduce.forward(&Tensor::cat(&[f_cnn, &aligned], 1)?)
    }
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Cross(CrossFusion),
    Concat(ConcatFusion),
}

impl Fusion {
    pub fn channels(&self) -> usize {
        match self {
            Fusion::Cross(f) => f.channels,
            Fusion::Concat(f) => f.channels,
        }
    }

    fn dino_dim(&self) -> usize {
        let proj = match self {
            Fusion::Cross(f) => &f.proj,
            Fusion::Concat(f) => &f.proj,
        };
        proj.weight.dims()[1]
    }
}

/// Fuses one level's CNN and backbone grids; output keeps the CNN grid's
/// channel count and spatial size.
pub fn cross_fuse(fusion: &Fusion, f_cnn: &FeatureGrid, f_dino: &FeatureGrid, mode: Mode) -> Result<FeatureGrid> {
    if f_cnn.channels() != fusion.channels() {
        return Err(shape_err!(
            "level {} CNN grid has {} channels, fusion expects {}",
            f_cnn.level,
            f_cnn.channels(),
            fusion.channels()
        ));
    }
    if f_dino.channels() != fusion.dino_dim() {
        return Err(shape_err!(
            "level {} backbone grid has {} channels, fusion expects {}",
            f_dino.level,
            f_dino.channels(),
            fusion.dino_dim()
        ));
    }
    if f_cnn.dims()[0] != f_dino.dims()[0] {
        return Err(shape_err!("batch mismatch between CNN and backbone grids"));
    }
    let out = match fusion {
        Fusion::Cross(f) => f.forward_parts(&f_cnn.data, &f_dino.data, mode)?.refined,
        Fusion::Concat(f) => f.forward(&f_cnn.data, &f_dino.data)?,
    };
    Ok(FeatureGrid::new(out, f_cnn.level, FeatureSource::Fused))
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: ConvTranspose2d,
    block: ConvBlock,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// `levels[i]` lifts level `i + 1` up to level `i`.
    levels: Vec<DecoderLevel>,
    head: Conv2d,
}

pub struct ForwardTrace {
    pub dino: Vec<FeatureGrid>,
    pub cnn: Vec<FeatureGrid>,
    pub fused: Vec<FeatureGrid>,
    pub output: Tensor,
}

/// Options that do not belong in the serialized generator config.
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    pub dtype: DType,
    pub device: Device,
    /// Backbone taps, one per level; `None` spaces them evenly over the
    /// backbone depth (3/6/9/12 for a 12-block encoder).
    pub taps: Option<TapSpec>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            device: Device::Cpu,
            taps: None,
        }
    }
}

pub struct DgcnModel {
    config: GeneratorConfig,
    store: ParamStore,
    encoder: Vec<ConvBlock>,
    fusions: Vec<Fusion>,
    vit_proj: Vec<Conv2d>,
    decoder: Decoder,
    backbone: Option<Arc<BackboneHandle>>,
    taps: Option<TapSpec>,
}

pub fn build_generator(
    config: &GeneratorConfig,
    backbone: Option<Arc<BackboneHandle>>,
    opts: &BuildOptions,
) -> Result<DgcnModel> {
    config.validate()?;
    let variant = config.variant;
    let taps = match (&backbone, variant.uses_backbone()) {
        (None, true) => {
            return Err(config_err!("variant {variant} needs a backbone"));
        }
        (Some(bb), true) => {
            let p = bb.patch_size();
            if config.input_size % p != 0 {
                return Err(config_err!(
                    "input size {} not divisible by backbone patch size {p}",
                    config.input_size
                ));
            }
            if bb.dtype() != opts.dtype {
                return Err(config_err!("backbone dtype {:?} differs from model dtype {:?}", bb.dtype(), opts.dtype));
            }
            let taps = match &opts.taps {
                Some(t) => t.clone(),
                None => TapSpec::evenly_spaced(bb.block_count(), config.levels)?,
            };
            taps.check_against(bb.block_count())?;
            if taps.len() != config.levels {
                return Err(config_err!("{} taps for {} levels", taps.len(), config.levels));
            }
            Some(taps)
        }
        (_, false) => None,
    };

    let mut store = ParamStore::new(opts.seed, opts.dtype, &opts.device);
    let ch = &config.encoder_channels;
    let dino_dim = backbone.as_ref().map(|b| b.embed_dim()).unwrap_or(0);

    let mut encoder = Vec::new();
    if variant.uses_cnn_encoder() {
        let mut in_ch = 1;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut store, &format!("encoder.{i}"), in_ch, c)?);
            in_ch = c;
        }
    }

    let mut fusions = Vec::new();
    let mut vit_proj = Vec::new();
    for (i, &c) in ch.iter().enumerate() {
        let name = format!("fusion.{i}");
        match variant {
            Variant::CrossFusion => fusions.push(Fusion::Cross(CrossFusion::new(
                &mut store,
                &name,
                dino_dim,
                c,
                config.resize,
            )?)),
            Variant::Concat => fusions.push(Fusion::Concat(ConcatFusion::new(
                &mut store,
                &name,
                dino_dim,
                c,
                config.resize,
            )?)),
            Variant::VitOnly => vit_proj.push(Conv2d::new(&mut store, &format!("vit_proj.{i}"), dino_dim, c, 1, 1, 0)?),
            Variant::CnnOnly => {}
        }
    }

    let mut levels = Vec::new();
    for i in 0..config.levels - 1 {
        levels.push(DecoderLevel {
            up: ConvTranspose2d::new(&mut store, &format!("decoder.{i}.up"), ch[i + 1], ch[i])?,
            block: ConvBlock::new(&mut store, &format!("decoder.{i}.block"), 2 * ch[i], ch[i])?,
        });
    }
    let head = Conv2d::new(&mut store, "head", ch[0], 1, 1, 1, 0)?;

    Ok(DgcnModel {
        config: config.clone(),
        store,
        encoder,
        fusions,
        vit_proj,
        decoder: Decoder { levels, head },
        backbone: if variant.uses_backbone() { backbone } else { None },
        taps,
    })
}

impl DgcnModel {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn backbone(&self) -> Option<&Arc<BackboneHandle>> {
        self.backbone.as_ref()
    }

    pub fn taps(&self) -> Option<&TapSpec> {
        self.taps.as_ref()
    }

    pub fn fusions(&self) -> &[Fusion] {
        &self.fusions
    }

    pub fn fusions_mut(&mut self) -> &mut [Fusion] {
        &mut self.fusions
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Trainable parameters whose names start with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .params()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn check_input(&self, slices: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = slices.dims4()?;
        let s = self.config.input_size;
        if c != 1 || h != s || w != s {
            return Err(shape_err!("expected [B, 1, {s}, {s}] slices, got {:?}", slices.dims()));
        }
        Ok(slices.to_dtype(self.dtype())?)
    }

    /// CNN encoder features, level 1 at full resolution, each deeper level
    /// after a 2x2 max-pool.
    pub fn cnn_encode(&self, slices: &Tensor, mode: Mode) -> Result<Vec<FeatureGrid>> {
        if self.encoder.is_empty() {
            return Err(config_err!("variant {} has no CNN encoder", self.variant()));
        }
        let mut x = self.check_input(slices)?;
        let mut out = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            x = block.forward(&x, mode)?;
            out.push(FeatureGrid::new(x.clone(), i + 1, FeatureSource::Cnn));
        }
        Ok(out)
    }

    pub fn backbone_features(&self, slices: &Tensor) -> Result<Vec<FeatureGrid>> {
        let (bb, taps) = match (&self.backbone, &self.taps) {
            (Some(bb), Some(taps)) => (bb, taps),
            _ => return Err(config_err!("variant {} has no backbone path", self.variant())),
        };
        let x = self.check_input(slices)?;
        bb.extract_features(&bb.prepare_input(&x)?, taps)
    }

    /// Decodes fused grids ordered level 1..L into `[B, 1, S, S]`.
    pub fn decode(&self, fused: &[FeatureGrid], mode: Mode) -> Result<Tensor> {
        let l = self.config.levels;
        if fused.len() != l {
            return Err(shape_err!("decoder expects {l} grids, got {}", fused.len()));
        }
        let batch = fused[0].dims()[0];
        for (i, g) in fused.iter().enumerate() {
            let c = self.config.encoder_channels[i];
            let s = self.config.level_size(i);
            if g.dims() != [batch, c, s, s] {
                return Err(shape_err!(
                    "level {} grid {:?} does not match expected {:?}",
                    i + 1,
                    g.dims(),
                    [batch, c, s, s]
                ));
            }
        }
        let mut x = fused[l - 1].data.clone();
        for i in (0..l - 1).rev() {
            let level = &self.decoder.levels[i];
            let up = level.up.forward(&x)?;
            x = level.block.forward(&Tensor::cat(&[&up, &fused[i].data], 1)?, mode)?;
        }
        self.decoder.head.forward(&x)
    }

    pub fn forward_traced(&self, slices: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        let x = self.check_input(slices)?;
        let dino = if self.variant().uses_backbone() {
            self.backbone_features(&x)?
        } else {
            Vec::new()
        };
        let cnn = if self.variant().uses_cnn_encoder() {
            self.cnn_encode(&x, mode)?
        } else {
            Vec::new()
        };
        let fused = match self.variant() {
            Variant::CnnOnly => cnn.clone(),
            Variant::CrossFusion | Variant::Concat => cnn
                .iter()
                .zip(&dino)
                .zip(&self.fusions)
                .map(|((c, d), f)| cross_fuse(f, c, d, mode))
                .collect::<Result<Vec<_>>>()?,
            Variant::VitOnly => dino
                .iter()
                .zip(&self.vit_proj)
                .enumerate()
                .map(|(i, (d, proj))| {
                    let s = self.config.level_size(i);
                    let g = resize_bilinear(&proj.forward(&d.data)?, (s, s), self.config.resize)?;
                    Ok(FeatureGrid::new(g, i + 1, FeatureSource::Fused))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let output = self.decode(&fused, mode)?;
        Ok(ForwardTrace {
            dino,
            cnn,
            fused,
            output,
        })
    }

    /// `Y' = f(X)` for a normalized `[B, 1, S, S]` batch.
    pub fn forward(&self, slices: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(slices, mode)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneGeometry, WeightsInit};
    use crate::nn::to_f64_vec;

    fn tiny_backbone() -> Arc<BackboneHandle> {
        Arc::new(
            load_backbone(
                BackboneGeometry::tiny(4, 16, 8),
                WeightsInit::Standin { seed: 1 },
                DType::F32,
                &Device::Cpu,
            )
            .unwrap(),
        )
    }

    fn tiny_config(variant: Variant) -> GeneratorConfig {
        GeneratorConfig::new(variant, vec![4, 8, 16, 32], 32)
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let mut c = GeneratorConfig::default();
        c.levels = 3;
        assert!(c.validate().is_err());
        let c = GeneratorConfig::new(Variant::CnnOnly, vec![4, 8, 16, 32], 36);
        assert!(c.validate().is_err());
    }

    #[test]
    fn backbone_required_unless_cnn_only() {
        let opts = BuildOptions::default();
        for v in [Variant::CrossFusion, Variant::Concat, Variant::VitOnly] {
            assert!(matches!(
                build_generator(&tiny_config(v), None, &opts),
                Err(crate::Error::Config(_))
            ));
        }
        let m = build_generator(&tiny_config(Variant::CnnOnly), None, &opts).unwrap();
        assert_eq!(m.param_count_with_prefix("fusion."), 0);
    }

    #[test]
    fn cnn_encode_shapes() {
        let m = build_generator(&tiny_config(Variant::CnnOnly), None, &BuildOptions::default()).unwrap();
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let grids = m.cnn_encode(&x, Mode::Train).unwrap();
        let dims: Vec<_> = grids.iter().map(|g| g.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![1, 4, 32, 32], vec![1, 8, 16, 16], vec![1, 16, 8, 8], vec![1, 32, 4, 4]]
        );
        assert!(grids.iter().all(|g| g.is_finite().unwrap()));
        let bad = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.cnn_encode(&bad, Mode::Eval), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn cnn_only_never_calls_backbone() {
        let bb = tiny_backbone();
        let m = build_generator(&tiny_config(Variant::CnnOnly), Some(bb.clone()), &BuildOptions::default()).unwrap();
        let x = Tensor::rand(-1f32, 1., (2, 1, 32, 32), &Device::Cpu).unwrap();
        let y = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims(), &[2, 1, 32, 32]);
        assert_eq!(bb.calls(), 0);
    }

    #[test]
    fn fused_and_dino_shapes() {
        let bb = tiny_backbone();
        let opts = BuildOptions {
            taps: Some(TapSpec::new(vec![1, 2, 3, 4]).unwrap()),
            ..Default::default()
        };
        for v in [Variant::CrossFusion, Variant::Concat, Variant::VitOnly] {
            let m = build_generator(&tiny_config(v), Some(bb.clone()), &opts).unwrap();
            let x = Tensor::rand(-1f32, 1., (2, 1, 32, 32), &Device::Cpu).unwrap();
            let t = m.forward_traced(&x, Mode::Train).unwrap();
            assert!(t.dino.iter().all(|g| g.dims() == [2, 16, 4, 4]));
            for (i, g) in t.fused.iter().enumerate() {
                let s = 32 >> i;
                assert_eq!(g.dims(), &[2, [4, 8, 16, 32][i], s, s]);
            }
            assert_eq!(t.output.dims(), &[2, 1, 32, 32]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let bb = tiny_backbone();
        let m = build_generator(&tiny_config(Variant::CrossFusion), Some(bb), &BuildOptions::default()).unwrap();
        let x = Tensor::rand(-1f32, 1., (1, 1, 32, 32), &Device::Cpu).unwrap();
        let a = to_f64_vec(&m.forward(&x, Mode::Eval).unwrap()).unwrap();
        let b = to_f64_vec(&m.forward(&x, Mode::Eval).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny_config(Variant::CnnOnly);
        let a = build_generator(&cfg, None, &BuildOptions::default()).unwrap();
        let b = build_generator(&cfg, None, &BuildOptions::default()).unwrap();
        for ((ka, va), (kb, vb)) in a.store().params().iter().zip(b.store().params()) {
            assert_eq!(ka, kb);
            assert_eq!(to_f64_vec(va.as_tensor()).unwrap(), to_f64_vec(vb.as_tensor()).unwrap());
        }
    }
}
