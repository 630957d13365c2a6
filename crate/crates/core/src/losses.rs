//! Training objective: pixel L1 plus a multi-level perceptual term measured
//! in the frozen backbone's feature space.
//!
//! Every `||.||_1` is a per-element mean, so the perceptual weight keeps the
//! same meaning at any resolution. The perceptual term is a plain sum over
//! taps with equal weights.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, TapSpec};
use crate::error::{config_err, shape_err, Result};
use crate::nn::scalar_f64;

/// Anything that maps `[B, 1, H, W]` slices in [-1, 1] to one feature tensor
/// per requested tap. The backbone implements it; other extractors (for
/// example a VGG trunk) can be plugged into [`mldp_loss`] the same way.
pub trait FeatureExtractor {
    fn tapped_features(&self, slices: &Tensor, taps: &TapSpec) -> Result<Vec<Tensor>>;
}

impl FeatureExtractor for BackboneHandle {
    fn tapped_features(&self, slices: &Tensor, taps: &TapSpec) -> Result<Vec<Tensor>> {
        let images = self.prepare_input(slices)?;
        Ok(self
            .extract_features(&images, taps)?
            .into_iter()
            .map(|g| g.data)
            .collect())
    }
}

/// Keys map to `loss.*` in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_mldp: f64,
    pub taps: TapSpec,
    pub perceptual_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mldp: 1.0,
            taps: TapSpec::default(),
            perceptual_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mldp.is_finite() && self.lambda_mldp >= 0.0) {
            return Err(config_err!("lambda_mldp must be finite and >= 0, got {}", self.lambda_mldp));
        }
        Ok(())
    }

    fn perceptual_active(&self) -> bool {
        self.perceptual_enabled
    }
}

/// Scalar loss values; `total == l1 + lambda * mldp` by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub mldp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.mldp.is_finite() && self.total.is_finite()
    }
}

/// Differentiable loss tensors with their scalar breakdown.
pub struct LossTerms {
    pub l1: Tensor,
    pub mldp: Option<Tensor>,
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(shape_err!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        ));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_pair(pred, target)?;
    mean_abs_diff(pred, &target.to_dtype(pred.dtype())?)
}

/// Sum over taps of the mean absolute feature difference. Target features
/// are detached; gradients reach `pred` through the frozen extractor.
pub fn mldp_loss<E: FeatureExtractor + ?Sized>(
    pred: &Tensor,
    target: &Tensor,
    extractor: &E,
    taps: &TapSpec,
) -> Result<Tensor> {
    check_pair(pred, target)?;
    let target = target.to_dtype(pred.dtype())?.detach();
    let fp = extractor.tapped_features(pred, taps)?;
    let ft = extractor.tapped_features(&target, taps)?;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let term = mean_abs_diff(a, &b.detach())?;
        acc = Some(match acc {
            None => term,
            Some(prev) => (prev + term)?,
        });
    }
    acc.ok_or_else(|| config_err!("perceptual loss with no taps"))
}

/// `L = L1 + lambda * MLDP`. With the perceptual term disabled, or without
/// a backbone, the total is the L1 tensor itself.
pub fn total_loss<E: FeatureExtractor + ?Sized>(
    pred: &Tensor,
    target: &Tensor,
    extractor: Option<&E>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let l1 = l1_loss(pred, target)?;
    let l1_val = scalar_f64(&l1)?;
    let mldp = match (cfg.perceptual_active(), extractor) {
        (true, Some(e)) => Some(mldp_loss(pred, target, e, &cfg.taps)?),
        (true, None) => return Err(config_err!("perceptual loss enabled but no backbone attached")),
        (false, _) => None,
    };
    let lambda = cfg.lambda_mldp;
    let (total, mldp_val) = match &mldp {
        Some(m) => {
            let mv = scalar_f64(m)?;
            let total = if lambda == 0.0 {
                l1.clone()
            } else {
                (&l1 + m.affine(lambda, 0.0)?)?
            };
            (total, mv)
        }
        None => (l1.clone(), 0.0),
    };
    let total_val = if mldp.is_some() && lambda != 0.0 {
        l1_val + lambda * mldp_val
    } else {
        l1_val
    };
    Ok(LossTerms {
        l1,
        mldp,
        total,
        breakdown: LossBreakdown {
            l1: l1_val,
            mldp: mldp_val,
            total: total_val,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneGeometry, WeightsInit};
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn l1_basics() {
        let a = rand((2, 1, 8, 8), 1);
        assert_eq!(scalar_f64(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let b = (&a + 0.5).unwrap();
        assert!((scalar_f64(&l1_loss(&b, &a).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        let c = rand((2, 1, 8, 8), 2);
        let av = crate::nn::to_f64_vec(&a).unwrap();
        let cv = crate::nn::to_f64_vec(&c).unwrap();
        let oracle = av.iter().zip(&cv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        assert!((scalar_f64(&l1_loss(&a, &c).unwrap()).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(
            scalar_f64(&l1_loss(&a, &c).unwrap()).unwrap(),
            scalar_f64(&l1_loss(&c, &a).unwrap()).unwrap()
        );
        assert!(matches!(
            l1_loss(&a, &rand((2, 1, 8, 4), 3)),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn mldp_zero_and_symmetric() {
        let bb = load_backbone(BackboneGeometry::tiny(2, 8, 4), WeightsInit::Standin { seed: 0 }, DType::F64, &Device::Cpu)
            .unwrap();
        let taps = TapSpec::new(vec![1, 2]).unwrap();
        let a = rand((1, 1, 8, 8), 4);
        let b = rand((1, 1, 8, 8), 5);
        assert_eq!(scalar_f64(&mldp_loss(&a, &a, &bb, &taps).unwrap()).unwrap(), 0.0);
        let ab = scalar_f64(&mldp_loss(&a, &b, &bb, &taps).unwrap()).unwrap();
        let ba = scalar_f64(&mldp_loss(&b, &a, &bb, &taps).unwrap()).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = LossConfig {
            lambda_mldp: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
