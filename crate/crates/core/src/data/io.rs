//! Volume containers: single-file NIfTI-1 (`.nii`, `.nii.gz`) and a raw
//! little-endian f32 array with a TOML sidecar (`<stem>.raw` + `<stem>.toml`).
//!
//! NIfTI stores x fastest, so `dim[1..=3] = (W, H, D)` maps directly onto our
//! `[z, y, x]` standard-layout arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Modality, Volume};
use crate::error::{Error, Result};

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

fn case_id_of(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".raw")
        .to_string()
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Loads a volume; modality must be recorded in the file's metadata.
pub fn load_volume(path: &Path) -> Result<Volume> {
    load_any(path, None)
}

/// Loads a volume, using `fallback` when the container records no modality.
pub fn load_volume_with(path: &Path, fallback: Modality) -> Result<Volume> {
    load_any(path, Some(fallback))
}

fn load_any(path: &Path, fallback: Option<Modality>) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path, fallback)
    } else {
        read_raw(path)
    }
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    if is_nifti(path) {
        write_nifti(path, v)
    } else {
        write_raw(path, v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    modality: Modality,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("toml")
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RawSidecar = toml::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = meta.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("expected {} bytes for dims {:?}, found {}", n * 4, meta.dims, bytes.len()),
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec(meta.dims, data).map_err(|e| Error::format(path, e.to_string()))?;
    Volume::new(voxels, meta.spacing, meta.origin, meta.modality, case_id_of(path))
}

pub fn write_raw(path: &Path, v: &Volume) -> Result<()> {
    let (d, h, w) = v.shape();
    let meta = RawSidecar {
        dims: [d, h, w],
        spacing: v.spacing,
        origin: v.origin,
        modality: v.modality,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::format(path, e.to_string()))?;
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in v.voxels.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path, fallback: Option<Modality>) -> Result<Volume> {
    let bytes = read_all(path)?;
    let truncated = |what: &str| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, what.to_string()),
        )
    };
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(truncated("file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 => true,
        _ => return Err(Error::format(path, "not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    let c = Cursor {
        bytes: &bytes,
        big_endian,
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("invalid dim[0] = {ndim}")));
    }
    let dim = |i: usize| -> usize {
        if i as i16 <= ndim {
            c.i16(40 + 2 * i).max(1) as usize
        } else {
            1
        }
    };
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if (4..=7).any(|i| dim(i) > 1) {
        return Err(Error::format(path, "only 3D volumes are supported"));
    }
    let datatype = c.i16(70);
    let pix = |i: usize| c.f32(76 + 4 * i) as f64;
    let spacing = [pix(3).abs(), pix(2).abs(), pix(1).abs()];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    let vox_offset = c.f32(108) as usize;
    let slope = c.f32(112) as f64;
    let inter = c.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    let qform = c.i16(252);
    let sform = c.i16(254);
    let origin = if qform > 0 {
        [c.f32(276) as f64, c.f32(272) as f64, c.f32(268) as f64]
    } else if sform > 0 {
        [c.f32(340) as f64, c.f32(324) as f64, c.f32(308) as f64]
    } else {
        [0.0; 3]
    };
    let descrip = String::from_utf8_lossy(&bytes[148..228]);
    let modality = descrip
        .trim_end_matches('\0')
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("modality="))
        .map(|m| m.parse::<Modality>())
        .transpose()?
        .or(fallback)
        .ok_or_else(|| Error::format(path, "modality not recorded in header and no fallback given"))?;

    let n = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(Error::format(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let start = vox_offset.max(NIFTI_HEADER_LEN);
    if bytes.len() < start + n * width {
        return Err(truncated("voxel data shorter than header dimensions"));
    }
    let data = &bytes[start..start + n * width];
    let value = |i: usize| -> f64 {
        let at = i * width;
        let cur = Cursor {
            bytes: data,
            big_endian,
        };
        match datatype {
            2 => data[at] as f64,
            256 => data[at] as i8 as f64,
            4 => cur.i16(at) as f64,
            512 => u16::from_le_bytes(cur.arr(at)) as f64,
            8 => cur.i32(at) as f64,
            768 => u32::from_le_bytes(cur.arr(at)) as f64,
            16 => cur.f32(at) as f64,
            _ => f64::from_le_bytes(cur.arr(at)),
        }
    };
    let voxels: Vec<f32> = (0..n).map(|i| (value(i) * slope + inter) as f32).collect();
    let voxels = Array3::from_shape_vec((nz, ny, nx), voxels).map_err(|e| Error::format(path, e.to_string()))?;
    Volume::new(voxels, spacing, origin, modality, case_id_of(path))
}

/// Writes a float32 NIfTI-1 file (gzip-compressed when the name ends in
/// `.gz`), with the modality recorded in `descrip`.
pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let (d, h, w) = v.shape();
    let mut hdr = vec![0u8; NIFTI_VOX_OFFSET];
    let put = |hdr: &mut Vec<u8>, at: usize, b: &[u8]| hdr[at..at + b.len()].copy_from_slice(b);
    put(&mut hdr, 0, &348i32.to_le_bytes());
    let dims: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, x) in dims.iter().enumerate() {
        put(&mut hdr, 40 + 2 * i, &x.to_le_bytes());
    }
    put(&mut hdr, 70, &16i16.to_le_bytes());
    put(&mut hdr, 72, &32i16.to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        v.spacing[2] as f32,
        v.spacing[1] as f32,
        v.spacing[0] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, x) in pixdim.iter().enumerate() {
        put(&mut hdr, 76 + 4 * i, &x.to_le_bytes());
    }
    put(&mut hdr, 108, &(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    put(&mut hdr, 112, &1f32.to_le_bytes());
    let descrip = format!("modality={}", v.modality);
    put(&mut hdr, 148, descrip.as_bytes());
    put(&mut hdr, 252, &1i16.to_le_bytes());
    put(&mut hdr, 254, &1i16.to_le_bytes());
    put(&mut hdr, 268, &(v.origin[2] as f32).to_le_bytes());
    put(&mut hdr, 272, &(v.origin[1] as f32).to_le_bytes());
    put(&mut hdr, 276, &(v.origin[0] as f32).to_le_bytes());
    let srow = [
        [v.spacing[2] as f32, 0.0, 0.0, v.origin[2] as f32],
        [0.0, v.spacing[1] as f32, 0.0, v.origin[1] as f32],
        [0.0, 0.0, v.spacing[0] as f32, v.origin[0] as f32],
    ];
    for (r, row) in srow.iter().enumerate() {
        for (k, x) in row.iter().enumerate() {
            put(&mut hdr, 280 + 16 * r + 4 * k, &x.to_le_bytes());
        }
    }
    put(&mut hdr, 344, b"n+1\0");
    let mut bytes = hdr;
    bytes.reserve(v.voxels.len() * 4);
    for x in v.voxels.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let out = if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Volume {
        let vox = Array3::from_shape_fn((4, 8, 8), |(z, y, x)| (z * 100 + y * 10 + x) as f32 - 300.5);
        Volume::new(vox, [2.5, 1.0, 1.0], [-10.0, 5.0, 7.5], Modality::Ct, "fixture").unwrap()
    }

    #[test]
    fn raw_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fixture.raw");
        write_raw(&p, &fixture()).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.shape(), (4, 8, 8));
        assert_eq!(v.spacing, [2.5, 1.0, 1.0]);
        assert_eq!(v.origin, [-10.0, 5.0, 7.5]);
        assert_eq!(v.case_id, "fixture");
        assert_eq!(v, fixture());
    }

    #[test]
    fn nifti_and_raw_agree() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("a.raw");
        let nii = dir.path().join("a.nii");
        let gz = dir.path().join("a.nii.gz");
        write_raw(&raw, &fixture()).unwrap();
        write_nifti(&nii, &fixture()).unwrap();
        write_nifti(&gz, &fixture()).unwrap();
        let r = load_volume(&raw).unwrap();
        for p in [&nii, &gz] {
            let n = load_volume(p).unwrap();
            assert_eq!(n.voxels, r.voxels);
            assert_eq!(n.spacing, r.spacing);
            assert_eq!(n.origin, r.origin);
            assert_eq!(n.modality, Modality::Ct);
        }
    }

    #[test]
    fn truncated_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("t.raw");
        write_raw(&raw, &fixture()).unwrap();
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_volume(&raw), Err(Error::Io { .. })));

        let nii = dir.path().join("t.nii");
        write_nifti(&nii, &fixture()).unwrap();
        let bytes = fs::read(&nii).unwrap();
        fs::write(&nii, &bytes[..400]).unwrap();
        assert!(matches!(load_volume(&nii), Err(Error::Io { .. })));
        fs::write(&nii, &bytes[..100]).unwrap();
        assert!(matches!(load_volume(&nii), Err(Error::Io { .. })));
    }

    #[test]
    fn missing_sidecar_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("m.raw");
        fs::write(&raw, [0u8; 16]).unwrap();
        assert!(matches!(load_volume(&raw), Err(Error::Io { .. })));
    }

    #[test]
    fn int16_nifti_with_scaling() {
        // hand-built header: 2x2x1 int16, slope 2, intercept -1024
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, x) in [3i16, 2, 2, 1, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&x.to_le_bytes());
        }
        b[70..72].copy_from_slice(&4i16.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        for i in 0..4 {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[112..116].copy_from_slice(&2f32.to_le_bytes());
        b[116..120].copy_from_slice(&(-1024f32).to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for v in [0i16, 1, 2, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.nii");
        fs::write(&p, b).unwrap();
        assert!(load_volume(&p).is_err());
        let v = load_volume_with(&p, Modality::Cbct).unwrap();
        assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), vec![-1024.0, -1022.0, -1020.0, -1018.0]);
        assert_eq!(v.modality, Modality::Cbct);
    }
}
