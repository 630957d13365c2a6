//! Metric suite on HU volumes: multi-scale SSIM, PSNR, organ Dice /
//! SegScore, the paired t-test, and report assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{extract_slices, reassemble, stack_slices, unstack_slices, Modality, PairedCase, Volume, HU_RANGE};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::generator::DgcnModel;
use crate::nn::Mode;

/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract_err!("volume shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| win[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| win[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(x: &Array2<f64>, y: &Array2<f64>, win: &[f64], data_range: f64) -> (f64, f64) {
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mu_x = filter_valid(x, win);
    let mu_y = filter_valid(y, win);
    let xx = filter_valid(&(x * x), win);
    let yy = filter_valid(&(y * y), win);
    let xy = filter_valid(&(x * y), win);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let n = mu_x.len() as f64;
    Zip::from(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            cs_sum += cs;
            ssim_sum += lum * cs;
        });
    (ssim_sum / n, cs_sum / n)
}

/// 2x2 mean pooling; a trailing odd row/column is dropped.
fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (img[[2 * y, 2 * x]] + img[[2 * y + 1, 2 * x]] + img[[2 * y, 2 * x + 1]] + img[[2 * y + 1, 2 * x + 1]])
    })
}

/// Largest scale count (up to `requested`) whose coarsest level still fits
/// the 11-tap window.
pub fn usable_scales(h: usize, w: usize, requested: usize) -> usize {
    let mut scales = 0;
    let (mut h, mut w) = (h, w);
    while scales < requested && h >= SSIM_WIN && w >= SSIM_WIN {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    scales
}

/// MS-SSIM of one plane pair. Contrast-structure terms come from scales
/// `1..M-1`, the full SSIM (with luminance) from the coarsest scale `M`;
/// negative terms are clamped to zero before exponentiation.
pub fn ms_ssim_2d(pred: ArrayView2<'_, f32>, gt: ArrayView2<'_, f32>, data_range: f64, scales: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(contract_err!("plane shapes differ: {:?} vs {:?}", pred.dim(), gt.dim()));
    }
    let (h, w) = pred.dim();
    let m = usable_scales(h, w, scales.min(MS_SSIM_WEIGHTS.len()));
    if m == 0 {
        return Err(shape_err!("plane {h}x{w} is smaller than the {SSIM_WIN}-tap SSIM window"));
    }
    let weights = &MS_SSIM_WEIGHTS[..m];
    let wsum: f64 = weights.iter().sum();
    let win = gaussian_window();
    let mut x = pred.mapv(|v| v as f64);
    let mut y = gt.mapv(|v| v as f64);
    let mut value = 1.0;
    for (j, wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, &win, data_range);
        let term = if j + 1 == m { ssim } else { cs };
        value *= term.max(0.0).powf(wj / wsum);
        if j + 1 < m {
            x = downsample2(&x);
            y = downsample2(&y);
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Slice-wise MS-SSIM averaged over axial slices. Falls back to fewer
/// scales (with a warning) when slices are too small for `scales`.
pub fn ms_ssim(pred: &Volume, gt: &Volume, scales: usize, data_range: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (d, h, w) = gt.shape();
    let usable = usable_scales(h, w, scales);
    if usable < scales {
        log::warn!("{h}x{w} slices support {usable} MS-SSIM scales, not {scales}");
    }
    let mut total = 0.0;
    for z in 0..d {
        total += ms_ssim_2d(
            pred.voxels.index_axis(Axis(0), z),
            gt.voxels.index_axis(Axis(0), z),
            data_range,
            usable,
        )?;
    }
    Ok(total / d as f64)
}

fn mse(pred: &Volume, gt: &Volume, mask: Option<&Array3<bool>>) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    match mask {
        Some(m) => {
            if m.dim() != gt.voxels.dim() {
                return Err(contract_err!("mask shape {:?} != volume {:?}", m.dim(), gt.voxels.dim()));
            }
            Zip::from(&pred.voxels).and(&gt.voxels).and(m).for_each(|&p, &g, &keep| {
                if keep {
                    let d = p as f64 - g as f64;
                    sum += d * d;
                    n += 1;
                }
            });
        }
        None => {
            Zip::from(&pred.voxels).and(&gt.voxels).for_each(|&p, &g| {
                let d = p as f64 - g as f64;
                sum += d * d;
            });
            n = gt.voxels.len();
        }
    }
    if n == 0 {
        return Err(contract_err!("empty evaluation mask"));
    }
    Ok(sum / n as f64)
}

/// `10 log10(range^2 / MSE)`; identical volumes give `f64::INFINITY`.
pub fn psnr(pred: &Volume, gt: &Volume, data_range: f64) -> Result<f64> {
    psnr_masked(pred, gt, data_range, None)
}

pub fn psnr_masked(pred: &Volume, gt: &Volume, data_range: f64, mask: Option<&Array3<bool>>) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(contract_err!("data range must be positive, got {data_range}"));
    }
    let e = mse(pred, gt, mask)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / e).log10())
}

/// `2|A and B| / (|A| + |B|)`; two empty masks score 1.0.
pub fn dice(a: &Array3<bool>, b: &Array3<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(contract_err!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    Zip::from(a).and(b).for_each(|&x, &y| {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    });
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub type LabelMap = Array3<u16>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Organ {
    pub name: String,
    pub label: u16,
}

impl Organ {
    pub fn new(name: impl Into<String>, label: u16) -> Self {
        Self {
            name: name.into(),
            label,
        }
    }
}

/// Pelvic organs scored by default, with their TotalSegmentator `total` task labels.
pub fn default_pelvic_organs() -> Vec<Organ> {
    vec![Organ::new("urinary_bladder", 21), Organ::new("prostate", 22)]
}

/// Maps an HU volume to an integer label map of the same shape.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    fn segment(&self, volume: &Volume) -> Result<LabelMap>;
}

/// Labels each voxel with the first organ whose `[lo, hi)` HU band contains
/// it. Deterministic, for phantoms and pipeline checks.
#[derive(Debug, Clone)]
pub struct ThresholdBandSegmenter {
    pub bands: Vec<(Organ, f32, f32)>,
}

impl ThresholdBandSegmenter {
    pub fn new(bands: Vec<(Organ, f32, f32)>) -> Self {
        Self { bands }
    }

    pub fn organs(&self) -> Vec<Organ> {
        self.bands.iter().map(|(o, _, _)| o.clone()).collect()
    }
}

impl Segmenter for ThresholdBandSegmenter {
    fn name(&self) -> &str {
        "threshold-band"
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        Ok(volume.voxels.mapv(|v| {
            self.bands
                .iter()
                .find(|(_, lo, hi)| v >= *lo && v < *hi)
                .map(|(o, _, _)| o.label)
                .unwrap_or(0)
        }))
    }
}

/// Runs an external tool as `<program> <args..> <input.nii.gz> <output.nii.gz>`
/// and reads back the label volume it writes.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub workdir: PathBuf,
}

impl ExternalSegmenter {
    /// TotalSegmentator restricted to the default pelvic organs, writing a
    /// single multi-label file.
    pub fn total_segmentator(workdir: impl Into<PathBuf>) -> Self {
        Self {
            program: "TotalSegmentator".into(),
            args: vec![
                "--ml".into(),
                "--roi_subset".into(),
                "urinary_bladder".into(),
                "prostate".into(),
                "-i".into(),
            ],
            workdir: workdir.into(),
        }
    }
}

impl Segmenter for ExternalSegmenter {
    fn name(&self) -> &str {
        self.program.to_str().unwrap_or("external")
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        let input = self.workdir.join(format!("{}_in.nii.gz", volume.case_id));
        let output = self.workdir.join(format!("{}_seg.nii.gz", volume.case_id));
        crate::data::write_nifti(&input, volume)?;
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args).arg(&input);
        if self.args.last().map(|a| a == "-i").unwrap_or(false) {
            cmd.arg("-o");
        }
        let status = cmd.arg(&output).status().map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(contract_err!("segmenter {} exited with {status}", self.program.display()));
        }
        let labels = crate::data::load_volume_with(&output, crate::data::Modality::Ct)?;
        if labels.shape() != volume.shape() {
            return Err(shape_err!("label map {:?} != volume {:?}", labels.shape(), volume.shape()));
        }
        Ok(labels.voxels.mapv(|v| v.round().max(0.0) as u16))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegOutcome {
    /// Mean Dice over scored organs; `None` when every organ was skipped.
    pub score: Option<f64>,
    pub dice: BTreeMap<String, f64>,
    /// Organs absent from both segmentations.
    pub skipped: Vec<String>,
}

/// Mean organ Dice between segmentations of `pred` and `gt`. Organs missing
/// from both label maps are skipped; one-sided absence scores 0.
pub fn seg_score(pred: &Volume, gt: &Volume, seg: &dyn Segmenter, organs: &[Organ]) -> Result<SegOutcome> {
    check_same_shape(pred, gt)?;
    let lp = seg.segment(pred)?;
    let lg = seg.segment(gt)?;
    if lp.dim() != pred.voxels.dim() || lg.dim() != gt.voxels.dim() {
        return Err(shape_err!("segmenter returned a label map of the wrong shape"));
    }
    let mut out = SegOutcome {
        score: None,
        dice: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for organ in organs {
        let a = lp.mapv(|l| l == organ.label);
        let b = lg.mapv(|l| l == organ.label);
        if !a.iter().any(|&v| v) && !b.iter().any(|&v| v) {
            out.skipped.push(organ.name.clone());
            continue;
        }
        out.dice.insert(organ.name.clone(), dice(&a, &b)?);
    }
    if !out.dice.is_empty() {
        out.score = Some(out.dice.values().sum::<f64>() / out.dice.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value; `None` when the differences have zero variance.
    pub p_value: Option<f64>,
}

impl TTest {
    pub fn degenerate(&self) -> bool {
        self.p_value.is_none()
    }
}

/// Two-sided paired Student's t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(contract_err!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(contract_err!("paired t-test needs at least 2 pairs, got {n}"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: f64::NAN,
            p_value: None,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| contract_err!("t distribution: {e}"))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        n,
        mean_diff: mean,
        t,
        p_value: Some(p),
    })
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "+inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "+inf" | "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub case_id: String,
    pub ms_ssim: f64,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub seg_score: Option<f64>,
    pub dice: BTreeMap<String, f64>,
    pub skipped_organs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ms_ssim: f64,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub seg_score: Option<f64>,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub metric: String,
    pub baseline: String,
    pub test: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub cases: Vec<MetricResult>,
    pub failures: Vec<CaseFailure>,
    pub aggregate: Aggregate,
    pub segmenter: Option<String>,
    pub significance: Vec<Significance>,
    pub notes: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Sorts rows by case id and recomputes aggregates.
    pub fn new(name: impl Into<String>, mut cases: Vec<MetricResult>, failures: Vec<CaseFailure>, segmenter: Option<String>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let seg: Vec<f64> = cases.iter().filter_map(|c| c.seg_score).collect();
        let aggregate = Aggregate {
            ms_ssim: mean(cases.iter().map(|c| c.ms_ssim)),
            psnr: mean(cases.iter().map(|c| c.psnr)),
            seg_score: if seg.is_empty() { None } else { Some(mean(seg.into_iter())) },
            cases: cases.len(),
        };
        let mut notes = vec![
            format!("PSNR data range: {HU_RANGE} HU; identical volumes report +inf"),
            "MS-SSIM: 5 scales, 11-tap Gaussian window (sigma 1.5), per axial slice, averaged".to_string(),
            "Dice of two empty masks is 1.0; organs absent from both segmentations are skipped".to_string(),
        ];
        if segmenter.is_none() {
            notes.push("no segmenter configured: SegScore not computed".to_string());
        }
        for f in &failures {
            log::warn!("case {} excluded from aggregates: {}", f.case_id, f.error);
        }
        Self {
            name: name.into(),
            cases,
            failures,
            aggregate,
            segmenter,
            significance: Vec::new(),
            notes,
        }
    }

    /// Paired t-tests of this report against `baseline` on the cases both share.
    pub fn compare_to(&mut self, baseline: &EvalReport) -> Result<()> {
        let base: BTreeMap<&str, &MetricResult> = baseline.cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let pairs: Vec<(&MetricResult, &MetricResult)> = self
            .cases
            .iter()
            .filter_map(|c| base.get(c.case_id.as_str()).map(|b| (c, *b)))
            .collect();
        type Getter = fn(&MetricResult) -> Option<f64>;
        let metrics: [(&str, Getter); 3] = [
            ("ms_ssim", |m| Some(m.ms_ssim)),
            ("psnr", |m| Some(m.psnr).filter(|v| v.is_finite())),
            ("seg_score", |m| m.seg_score),
        ];
        self.significance.clear();
        for (name, get) in metrics {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().filter_map(|(x, y)| Some((get(x)?, get(y)?))).unzip();
            if a.len() < 2 {
                continue;
            }
            self.significance.push(Significance {
                metric: name.to_string(),
                baseline: baseline.name.clone(),
                test: paired_t_test(&a, &b)?,
            });
        }
        Ok(())
    }

    /// Table with SSIM (%), PSNR (dB) and SegScore (%) columns.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let db = |v: f64| if v.is_infinite() { "+inf".to_string() } else { format!("{v:.2}") };
        let mut out = String::from("| Case | SSIM (%) | PSNR (dB) | SegScore (%) |\n|---|---|---|---|\n");
        for c in &self.cases {
            out += &format!("| {} | {} | {} | {} |\n", c.case_id, pct(Some(c.ms_ssim)), db(c.psnr), pct(c.seg_score));
        }
        let a = &self.aggregate;
        out += &format!("| mean | {} | {} | {} |\n", pct(Some(a.ms_ssim)), db(a.psnr), pct(a.seg_score));
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Produces normalized predicted slices (any square size) for one case.
pub trait VolumeTranslator {
    fn translate(&self, case: &PairedCase) -> Result<Vec<Array2<f32>>>;

    /// Predicted volume in HU on the target grid.
    fn translate_hu(&self, case: &PairedCase) -> Result<Volume> {
        reassemble(&self.translate(case)?, case.target_volume())
    }
}

/// Runs a generator in eval mode over a case's source slices.
pub struct ModelTranslator<'a> {
    pub model: &'a DgcnModel,
    pub batch_size: usize,
}

impl VolumeTranslator for ModelTranslator<'_> {
    fn translate(&self, case: &PairedCase) -> Result<Vec<Array2<f32>>> {
        let size = self.model.config().input_size;
        let slices = extract_slices(&case.source, size)?.slices;
        let mut out = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(self.batch_size.max(1)) {
            let x = stack_slices(chunk, self.model.dtype(), self.model.device())?;
            let y = self.model.forward(&x, Mode::Eval)?;
            out.extend(unstack_slices(&y)?);
        }
        Ok(out)
    }
}

/// A perfect translator. Its slices are the case's own normalized CT; its
/// HU volume is the window-clipped ground truth itself, so metrics see an
/// exact match rather than an f32 normalization round trip.
pub struct TargetEcho {
    pub size: usize,
}

impl VolumeTranslator for TargetEcho {
    fn translate(&self, case: &PairedCase) -> Result<Vec<Array2<f32>>> {
        Ok(extract_slices(&case.target, self.size)?.slices)
    }

    fn translate_hu(&self, case: &PairedCase) -> Result<Volume> {
        clip_hu(case.target_volume())
    }
}

fn clip_hu(v: &Volume) -> Result<Volume> {
    v.with_voxels(
        v.voxels.mapv(|x| x.clamp(crate::data::HU_MIN as f32, crate::data::HU_MAX as f32)),
        Modality::Ct,
    )
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub scales: usize,
    pub data_range: f64,
    pub organs: Vec<Organ>,
    /// When set, PSNR only counts voxels whose ground-truth HU exceeds it.
    pub body_threshold_hu: Option<f32>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scales: 5,
            data_range: HU_RANGE,
            organs: default_pelvic_organs(),
            body_threshold_hu: None,
        }
    }
}

fn evaluate_case(
    translator: &dyn VolumeTranslator,
    case: &PairedCase,
    seg: Option<&dyn Segmenter>,
    opts: &EvalOptions,
) -> Result<(MetricResult, Volume)> {
    let gt = case.target_volume();
    let pred = translator.translate_hu(case)?;
    // metrics compare against the clipped ground truth, the range the network can reach
    let gt_clipped = clip_hu(gt)?;
    let mask = opts.body_threshold_hu.map(|t| gt_clipped.voxels.mapv(|v| v > t));
    let ms = ms_ssim(&pred, &gt_clipped, opts.scales, opts.data_range)?;
    let ps = psnr_masked(&pred, &gt_clipped, opts.data_range, mask.as_ref())?;
    let (seg_score, dice, skipped) = match seg {
        Some(s) => {
            let o = seg_score(&pred, &gt_clipped, s, &opts.organs)?;
            (o.score, o.dice, o.skipped)
        }
        None => (None, BTreeMap::new(), Vec::new()),
    };
    Ok((
        MetricResult {
            case_id: case.case_id.clone(),
            ms_ssim: ms,
            psnr: ps,
            seg_score,
            dice,
            skipped_organs: skipped,
        },
        pred,
    ))
}

/// Translates, reassembles and scores every case. Failing cases are
/// recorded in `failures` and left out of the aggregates.
pub fn evaluate_cases(
    name: &str,
    translator: &dyn VolumeTranslator,
    cases: &[PairedCase],
    seg: Option<&dyn Segmenter>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(contract_err!("no cases to evaluate"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for case in cases {
        match evaluate_case(translator, case, seg, opts) {
            Ok((row, _)) => rows.push(row),
            Err(e) => failures.push(CaseFailure {
                case_id: case.case_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(EvalReport::new(name, rows, failures, seg.map(|s| s.name().to_string())))
}

/// Translates one case's source volume into an sCT volume in HU.
pub fn translate_case(translator: &dyn VolumeTranslator, case: &PairedCase) -> Result<Volume> {
    translator.translate_hu(case)
}

/// Translates a lone source volume (no ground truth) into HU.
pub fn translate_volume(model: &DgcnModel, source: &Volume, batch_size: usize) -> Result<Volume> {
    let nv = crate::data::normalize(source)?;
    let size = model.config().input_size;
    let slices = extract_slices(&nv, size)?.slices;
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let x = stack_slices(chunk, model.dtype(), model.device())?;
        out.extend(unstack_slices(&model.forward(&x, Mode::Eval)?)?);
    }
    reassemble(&out, source)
}

/// Central crop helper used by phantom tests: HU volume restricted to rows
/// and columns `[m, len - m)`.
pub fn crop_border(v: &Volume, margin: usize) -> Result<Volume> {
    let (_, h, w) = v.shape();
    if 2 * margin >= h.min(w) {
        return Err(shape_err!("margin {margin} too large for {h}x{w}"));
    }
    let vox = v.voxels.slice(s![.., margin..h - margin, margin..w - margin]).to_owned();
    Volume::new(vox, v.spacing, v.origin, v.modality, v.case_id.clone())
}
