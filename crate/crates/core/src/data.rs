//! Volume ingestion and the slice-wise data protocol: HU clipping and
//! scaling for CT/CBCT, 99th-percentile scaling for MRI, axial slicing with
//! resize to the network size, HU-space reassembly, and case-level splits.

mod io;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{interp_matrix, ResizeConvention};

pub use io::{load_volume, load_volume_with, save_volume, read_nifti, write_nifti, read_raw, write_raw};

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 2000.0;
/// Width of the HU clip window, also the PSNR data range.
pub const HU_RANGE: f64 = HU_MAX - HU_MIN;
const HU_CENTER: f64 = (HU_MAX + HU_MIN) / 2.0;
const HU_HALF_SPAN: f64 = HU_RANGE / 2.0;

/// Slice resampling grid: corner-aligned, so affine intensity ramps survive
/// an up/down round trip exactly.
pub const SLICE_RESIZE: ResizeConvention = ResizeConvention::AlignCorners;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "CBCT")]
    Cbct,
    #[serde(rename = "MRI")]
    Mri,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Cbct => "CBCT",
            Modality::Mri => "MRI",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "CBCT" => Ok(Modality::Cbct),
            "MRI" | "MR" => Ok(Modality::Mri),
            other => Err(contract_err!("unknown modality `{other}`")),
        }
    }
}

/// A 3D scalar field indexed `[z, y, x]`, with spacing and origin in mm
/// listed in the same axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub modality: Modality,
    pub case_id: String,
}

impl Volume {
    pub fn new(
        voxels: Array3<f32>,
        spacing: [f64; 3],
        origin: [f64; 3],
        modality: Modality,
        case_id: impl Into<String>,
    ) -> Result<Self> {
        let v = Self {
            voxels,
            spacing,
            origin,
            modality,
            case_id: case_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(contract_err!("volume `{}` has non-finite voxels", self.case_id));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(contract_err!("volume `{}` has non-positive spacing {:?}", self.case_id, self.spacing));
        }
        if self.voxels.is_empty() {
            return Err(contract_err!("volume `{}` is empty", self.case_id));
        }
        Ok(())
    }

    /// `(depth, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    /// Copy with the same geometry and new voxels.
    pub fn with_voxels(&self, voxels: Array3<f32>, modality: Modality) -> Result<Self> {
        if voxels.dim() != self.voxels.dim() {
            return Err(shape_err!("voxel shape {:?} != reference {:?}", voxels.dim(), self.voxels.dim()));
        }
        Volume::new(voxels, self.spacing, self.origin, modality, self.case_id.clone())
    }
}

/// Parameters needed to undo (CT/CBCT) or re-apply (MRI) a normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NormRecord {
    Hu { lo: f64, hi: f64 },
    Percentile { p99: f64 },
}

#[derive(Debug, Clone)]
pub struct NormalizedVolume {
    pub voxels: Array3<f32>,
    pub record: NormRecord,
    pub source: Arc<Volume>,
}

pub fn ct_to_unit(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_CENTER) / HU_HALF_SPAN
}

pub fn unit_to_ct(x: f64) -> f64 {
    (HU_HALF_SPAN * x + HU_CENTER).clamp(HU_MIN, HU_MAX)
}

/// Clip to [-1024, 2000] HU and map affinely onto [-1, 1].
pub fn normalize_ct(v: &Volume) -> Result<NormalizedVolume> {
    if !matches!(v.modality, Modality::Ct | Modality::Cbct) {
        return Err(contract_err!("normalize_ct on {} volume `{}`", v.modality, v.case_id));
    }
    let voxels = v.voxels.mapv(|x| ct_to_unit(x as f64) as f32);
    Ok(NormalizedVolume {
        voxels,
        record: NormRecord::Hu { lo: HU_MIN, hi: HU_MAX },
        source: Arc::new(v.clone()),
    })
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// data at or below it.
pub fn percentile_nearest_rank(values: &[f32], p: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank.min(n) - 1, |a, b| a.total_cmp(b));
    Some(*v)
}

/// Scale by the volume's own 99th percentile, clip to [0, 1], map to [-1, 1].
pub fn normalize_mri(v: &Volume) -> Result<NormalizedVolume> {
    if v.modality != Modality::Mri {
        return Err(contract_err!("normalize_mri on {} volume `{}`", v.modality, v.case_id));
    }
    let flat: Vec<f32> = v.voxels.iter().copied().collect();
    let p99 = percentile_nearest_rank(&flat, 99.0).unwrap_or(0.0) as f64;
    if p99 <= 0.0 {
        return Err(Error::Degenerate(format!(
            "MRI volume `{}` has 99th percentile {p99}",
            v.case_id
        )));
    }
    let voxels = v
        .voxels
        .mapv(|x| ((x as f64 / p99).clamp(0.0, 1.0) * 2.0 - 1.0) as f32);
    Ok(NormalizedVolume {
        voxels,
        record: NormRecord::Percentile { p99 },
        source: Arc::new(v.clone()),
    })
}

pub fn normalize(v: &Volume) -> Result<NormalizedVolume> {
    match v.modality {
        Modality::Ct | Modality::Cbct => normalize_ct(v),
        Modality::Mri => normalize_mri(v),
    }
}

/// Separable bilinear resize of one plane.
pub fn resize_plane(img: ArrayView2<'_, f32>, size: (usize, usize), convention: ResizeConvention) -> Array2<f32> {
    let (h, w) = img.dim();
    let (oh, ow) = size;
    if (h, w) == (oh, ow) {
        return img.to_owned();
    }
    let ry = Array2::from_shape_vec((oh, h), interp_matrix(h, oh, convention)).expect("interp rows");
    let rx = Array2::from_shape_vec((ow, w), interp_matrix(w, ow, convention)).expect("interp cols");
    let img = img.mapv(|v| v as f64);
    ry.dot(&img).dot(&rx.t()).mapv(|v| v as f32)
}

/// Axial slices of one normalized volume, resized to `size x size`.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub slices: Vec<Array2<f32>>,
    pub original_hw: (usize, usize),
    pub size: usize,
    pub convention: ResizeConvention,
}

pub fn extract_slices(nv: &NormalizedVolume, size: usize) -> Result<SliceSet> {
    if size == 0 || size % 16 != 0 {
        return Err(shape_err!("slice size {size} must be a positive multiple of 16"));
    }
    let (_, h, w) = nv.voxels.dim();
    let slices = nv
        .voxels
        .axis_iter(Axis(0))
        .map(|plane| resize_plane(plane, (size, size), SLICE_RESIZE))
        .collect();
    Ok(SliceSet {
        slices,
        original_hw: (h, w),
        size,
        convention: SLICE_RESIZE,
    })
}

/// Resizes predicted slices back to the reference grid, stacks them in z
/// order, inverts the CT map and clips to the HU window. Geometry is copied
/// from `reference`; the result is tagged CT.
pub fn reassemble(pred_slices: &[Array2<f32>], reference: &Volume) -> Result<Volume> {
    let (d, h, w) = reference.shape();
    if pred_slices.len() != d {
        return Err(contract_err!(
            "{} predicted slices for a reference with {d} slices",
            pred_slices.len()
        ));
    }
    let mut voxels = Array3::<f32>::zeros((d, h, w));
    for (z, slice) in pred_slices.iter().enumerate() {
        let plane = resize_plane(slice.view(), (h, w), SLICE_RESIZE);
        voxels
            .index_axis_mut(Axis(0), z)
            .assign(&plane.mapv(|x| unit_to_ct(x as f64) as f32));
    }
    reference.with_voxels(voxels, Modality::Ct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mri2ct,
    Cbct2ct,
}

impl Task {
    pub fn source_modality(self) -> Modality {
        match self {
            Task::Mri2ct => Modality::Mri,
            Task::Cbct2ct => Modality::Cbct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> &[String] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Seeded case-level shuffle and split. Train and val sizes are
/// `round(n * r / sum(r))`; test takes the remainder. Fewer than ten cases
/// all go to train.
pub fn split_dataset(case_ids: &[String], ratios: (u32, u32, u32), seed: u64) -> Result<Split> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = case_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(contract_err!("duplicate case id `{dup}`"));
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as f64;
    if total == 0.0 {
        return Err(contract_err!("split ratios sum to zero"));
    }
    let mut ids = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    if n < 10 {
        log::warn!("only {n} cases; assigning all of them to the training split");
        return Ok(Split {
            train: ids,
            val: Vec::new(),
            test: Vec::new(),
        });
    }
    let n_train = ((n as f64) * ratios.0 as f64 / total).round() as usize;
    let n_val = (((n as f64) * ratios.1 as f64 / total).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split { train: ids, val, test })
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for e in entries {
        writer.serialize(e).map_err(|err| Error::format(path, err.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// A case with both volumes normalized.
#[derive(Debug, Clone)]
pub struct PairedCase {
    pub case_id: String,
    pub source: NormalizedVolume,
    pub target: NormalizedVolume,
}

impl PairedCase {
    pub fn new(source: &Volume, target: &Volume) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(contract_err!(
                "case `{}`: source {:?} and target {:?} differ in shape",
                target.case_id,
                source.shape(),
                target.shape()
            ));
        }
        if target.modality != Modality::Ct {
            return Err(contract_err!("case `{}`: target must be CT, got {}", target.case_id, target.modality));
        }
        Ok(Self {
            case_id: target.case_id.clone(),
            source: normalize(source)?,
            target: normalize_ct(target)?,
        })
    }

    pub fn target_volume(&self) -> &Volume {
        &self.target.source
    }
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub cases: Vec<PairedCase>,
    pub split: SplitKind,
}

impl PairedDataset {
    /// Loads the manifest rows listed in `ids`, resolving relative paths
    /// against `root`.
    pub fn load(root: &Path, manifest: &[ManifestEntry], ids: &[String], task: Task, split: SplitKind) -> Result<Self> {
        let mut cases = Vec::with_capacity(ids.len());
        for id in ids {
            let entry = manifest
                .iter()
                .find(|e| &e.case_id == id)
                .ok_or_else(|| contract_err!("case `{id}` not in manifest"))?;
            let mut source = load_volume_with(&root.join(&entry.source_path), task.source_modality())?;
            let mut target = load_volume_with(&root.join(&entry.target_path), Modality::Ct)?;
            source.case_id = id.clone();
            target.case_id = id.clone();
            cases.push(PairedCase::new(&source, &target)?);
        }
        Ok(Self { cases, split })
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Flattened slice pairs at `size x size`, in (case, z) order.
    pub fn slice_pairs(&self, size: usize) -> Result<SlicePairs> {
        let mut pairs = SlicePairs {
            size,
            source: Vec::new(),
            target: Vec::new(),
            index: Vec::new(),
        };
        for (ci, case) in self.cases.iter().enumerate() {
            let s = extract_slices(&case.source, size)?;
            let t = extract_slices(&case.target, size)?;
            for (z, (a, b)) in s.slices.into_iter().zip(t.slices).enumerate() {
                pairs.source.push(a);
                pairs.target.push(b);
                pairs.index.push((ci, z));
            }
        }
        Ok(pairs)
    }
}

/// Training view: all slices of a dataset as parallel source/target lists.
#[derive(Debug, Clone)]
pub struct SlicePairs {
    pub size: usize,
    pub source: Vec<Array2<f32>>,
    pub target: Vec<Array2<f32>>,
    /// `(case position, z)` for each slice.
    pub index: Vec<(usize, usize)>,
}

impl SlicePairs {
    pub fn from_slices(source: Vec<Array2<f32>>, target: Vec<Array2<f32>>) -> Result<Self> {
        if source.len() != target.len() || source.is_empty() {
            return Err(contract_err!("need equal, non-zero numbers of source and target slices"));
        }
        let size = source[0].nrows();
        if source.iter().chain(&target).any(|s| s.dim() != (size, size)) {
            return Err(shape_err!("all slices must be {size}x{size}"));
        }
        let index = (0..source.len()).map(|i| (i, 0)).collect();
        Ok(Self {
            size,
            source,
            target,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// `[B, 1, S, S]` source and target tensors for the given slice indices.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        Ok((
            stack_slices(indices.iter().map(|&i| &self.source[i]), dtype, device)?,
            stack_slices(indices.iter().map(|&i| &self.target[i]), dtype, device)?,
        ))
    }
}

/// Stacks equally sized planes into a `[B, 1, H, W]` tensor.
pub fn stack_slices<'a>(
    slices: impl IntoIterator<Item = &'a Array2<f32>>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut count = 0;
    for s in slices {
        match shape {
            None => shape = Some(s.dim()),
            Some(d) if d != s.dim() => return Err(shape_err!("slice {:?} != {:?}", s.dim(), d)),
            _ => {}
        }
        data.extend(s.iter().copied());
        count += 1;
    }
    let (h, w) = shape.ok_or_else(|| shape_err!("empty slice batch"))?;
    Ok(Tensor::from_vec(data, (count, 1, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `[B, 1, H, W]` tensor back into planes.
pub fn unstack_slices(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(shape_err!("expected one channel, got {c}"));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("plane"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ct(voxels: Array3<f32>) -> Volume {
        Volume::new(voxels, [1.0; 3], [0.0; 3], Modality::Ct, "c").unwrap()
    }

    #[test]
    fn ct_map_anchors() {
        assert_eq!(ct_to_unit(-1024.0), -1.0);
        assert_eq!(ct_to_unit(2000.0), 1.0);
        assert_eq!(ct_to_unit(488.0), 0.0);
        assert_eq!(ct_to_unit(3000.0), 1.0);
        assert_eq!(ct_to_unit(-5000.0), -1.0);
    }

    #[test]
    fn normalize_rejects_wrong_modality() {
        let mut v = ct(Array3::zeros((1, 2, 2)));
        v.modality = Modality::Mri;
        assert!(matches!(normalize_ct(&v), Err(Error::Contract(_))));
        v.modality = Modality::Ct;
        assert!(matches!(normalize_mri(&v), Err(Error::Contract(_))));
    }

    #[test]
    fn mri_percentile_and_mapping() {
        let vals: Vec<f32> = (1..=1000).map(|v| v as f32).collect();
        let v = Volume::new(
            Array3::from_shape_vec((10, 10, 10), vals.clone()).unwrap(),
            [1.0; 3],
            [0.0; 3],
            Modality::Mri,
            "m",
        )
        .unwrap();
        let n = normalize_mri(&v).unwrap();
        // sort-based oracle: rank ceil(0.99 * 1000) = 990
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let oracle = sorted[(0.99f64 * 1000.0).ceil() as usize - 1];
        assert_eq!(n.record, NormRecord::Percentile { p99: oracle as f64 });
        assert_eq!(oracle, 990.0);
        let flat: Vec<f32> = n.voxels.iter().copied().collect();
        assert_eq!(flat[989], 1.0);
        assert_eq!(flat[999], 1.0);
        let mut z = v.clone();
        z.voxels[[0, 0, 0]] = 0.0;
        assert_eq!(normalize_mri(&z).unwrap().voxels[[0, 0, 0]], -1.0);
    }

    #[test]
    fn mri_all_zero_is_degenerate() {
        let v = Volume::new(Array3::zeros((2, 4, 4)), [1.0; 3], [0.0; 3], Modality::Mri, "z").unwrap();
        assert!(matches!(normalize_mri(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn slices_identity_and_anisotropic() {
        let v = ct(Array3::from_elem((4, 32, 32), 100.0));
        let s = extract_slices(&normalize_ct(&v).unwrap(), 32).unwrap();
        assert_eq!(s.slices.len(), 4);
        let v = ct(Array3::from_elem((1, 300, 200), 100.0));
        let s = extract_slices(&normalize_ct(&v).unwrap(), 256).unwrap();
        assert_eq!(s.slices[0].dim(), (256, 256));
        assert_eq!(s.original_hw, (300, 200));
        assert!(extract_slices(&normalize_ct(&v).unwrap(), 250).is_err());
    }

    #[test]
    fn affine_plane_round_trip() {
        let (h, w) = (128, 128);
        let plane = Array2::from_shape_fn((h, w), |(y, x)| (0.003 * y as f64 - 0.002 * x as f64 + 0.1) as f32);
        let up = resize_plane(plane.view(), (256, 256), SLICE_RESIZE);
        let down = resize_plane(up.view(), (h, w), SLICE_RESIZE);
        let err = plane
            .iter()
            .zip(down.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reassemble_inverts_ct_map() {
        let vox = Array3::from_shape_fn((3, 32, 32), |(z, y, x)| (z as f32 * 500.0 + y as f32 * 40.0 - x as f32 * 30.0) - 900.0);
        let v = ct(vox.clone());
        let nv = normalize_ct(&v).unwrap();
        let s = extract_slices(&nv, 32).unwrap();
        let back = reassemble(&s.slices, &v).unwrap();
        for (a, b) in vox.iter().zip(back.voxels.iter()) {
            let clipped = (*a as f64).clamp(HU_MIN, HU_MAX);
            assert!((clipped - *b as f64).abs() < 1e-4, "{a} {b}");
        }
        let zeros = vec![Array2::zeros((32, 32)); 3];
        assert!(reassemble(&zeros, &v).unwrap().voxels.iter().all(|&x| x == 488.0));
        let over = vec![Array2::from_elem((32, 32), 1.2f32); 3];
        assert!(reassemble(&over, &v).unwrap().voxels.iter().all(|&x| x == 2000.0));
        assert!(matches!(reassemble(&zeros[..2], &v), Err(Error::Contract(_))));
    }

    #[test]
    fn split_sizes() {
        let ids = |n: usize| (0..n).map(|i| format!("case{i:03}")).collect::<Vec<_>>();
        let s = split_dataset(&ids(180), (7, 1, 2), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (126, 18, 36));
        let s = split_dataset(&ids(10), (7, 1, 2), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split_dataset(&ids(4), (7, 1, 2), 0).unwrap();
        assert_eq!(s.train.len(), 4);
        let mut dup = ids(12);
        dup[3] = dup[5].clone();
        assert!(matches!(split_dataset(&dup, (7, 1, 2), 0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 0usize..300, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let s = split_dataset(&ids, (7, 1, 2), seed).unwrap();
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            let mut sorted = ids.clone();
            sorted.sort();
            prop_assert_eq!(all, sorted);
            prop_assert_eq!(split_dataset(&ids, (7, 1, 2), seed).unwrap(), s);
        }

        #[test]
        fn normalized_values_in_unit_range(
            vals in proptest::collection::vec(-5000.0f32..5000.0, 8..200),
            mri in any::<bool>(),
        ) {
            let n = vals.len();
            let modality = if mri { Modality::Mri } else { Modality::Ct };
            let v = Volume::new(Array3::from_shape_vec((1, 1, n), vals).unwrap(), [1.0; 3], [0.0; 3], modality, "p").unwrap();
            match normalize(&v) {
                Ok(nv) => prop_assert!(nv.voxels.iter().all(|x| (-1.0..=1.0).contains(x))),
                Err(Error::Degenerate(_)) => prop_assert!(mri),
                Err(e) => prop_assert!(false, "{}", e),
            }
        }

        #[test]
        fn percentile_matches_sort(vals in proptest::collection::vec(-1e4f32..1e4, 1..2000), p in 1.0f64..100.0) {
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let rank = ((p / 100.0) * vals.len() as f64).ceil().max(1.0) as usize;
            prop_assert_eq!(percentile_nearest_rank(&vals, p), Some(sorted[rank - 1]));
        }
    }
}
