//! Volume storage: the VOL1 container plus a small uncompressed NIfTI-1
//! reader for real-data ingestion.
//!
//! VOL1 layout: a 64-byte header — magic `VOL1`, one dtype byte
//! (0 = float32, 1 = int16), 3 x u32 little-endian dims, 3 x f32 spacing,
//! zero padding — followed by the raw little-endian voxel payload with the
//! x index fastest. Spacing of all zeros means "unknown".

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SegError};
use crate::volume::{Dims, LabelSidecar, LabelVolume, Volume, MAX_LABEL};

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";
pub const VOL1_HEADER_LEN: usize = 64;

const DTYPE_F32: u8 = 0;
const DTYPE_I16: u8 = 1;

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_DT_INT16: i16 = 4;
const NIFTI_DT_FLOAT32: i16 = 16;

fn write_vol1(path: &Path, dtype: u8, dims: Dims, spacing: Option<[f32; 3]>, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = [0u8; VOL1_HEADER_LEN];
    header[..4].copy_from_slice(VOL1_MAGIC);
    header[4] = dtype;
    for (i, n) in [dims.nx, dims.ny, dims.nz].into_iter().enumerate() {
        header[5 + 4 * i..9 + 4 * i].copy_from_slice(&(n as u32).to_le_bytes());
    }
    let sp = spacing.unwrap_or([0.0; 3]);
    for (i, s) in sp.into_iter().enumerate() {
        header[17 + 4 * i..21 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    w.write_all(&header).map_err(|e| SegError::io(path, e))?;
    w.write_all(payload).map_err(|e| SegError::io(path, e))?;
    w.flush().map_err(|e| SegError::io(path, e))?;
    Ok(())
}

struct Vol1Raw {
    dtype: u8,
    dims: Dims,
    spacing: Option<[f32; 3]>,
    payload: Vec<u8>,
}

fn read_vol1(path: &Path, bytes: &[u8]) -> Result<Vol1Raw> {
    if bytes.len() < VOL1_HEADER_LEN {
        return Err(SegError::format(path, "file shorter than VOL1 header"));
    }
    let dtype = bytes[4];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_I16 => 2,
        other => {
            return Err(SegError::format(
                path,
                format!("unsupported VOL1 dtype code {other}"),
            ))
        }
    };
    let mut d = [0usize; 3];
    for (i, v) in d.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[5 + 4 * i..9 + 4 * i]);
        *v = u32::from_le_bytes(b) as usize;
    }
    let dims = Dims::new(d[0], d[1], d[2]);
    dims.validate()?;
    let mut sp = [0f32; 3];
    for (i, v) in sp.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[17 + 4 * i..21 + 4 * i]);
        *v = f32::from_le_bytes(b);
    }
    let spacing = if sp == [0.0; 3] { None } else { Some(sp) };
    let expected = dims.len() * elem;
    let payload = &bytes[VOL1_HEADER_LEN..];
    if payload.len() != expected {
        return Err(SegError::format(
            path,
            format!(
                "payload size mismatch: header declares {} voxels ({} bytes), found {} bytes",
                dims.len(),
                expected,
                payload.len()
            ),
        ));
    }
    Ok(Vol1Raw {
        dtype,
        dims,
        spacing,
        payload: payload.to_vec(),
    })
}

fn payload_to_f32(payload: &[u8], dtype: u8) -> Vec<f32> {
    match dtype {
        DTYPE_F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        _ => payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
    }
}

/// Loads a scalar volume from a VOL1 file or an uncompressed NIfTI-1 file.
///
/// Integer payloads are widened to f32; voxel order is x fastest.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SegError::io(path, e))?;
    if bytes.len() >= 4 && &bytes[..4] == VOL1_MAGIC {
        let raw = read_vol1(path, &bytes)?;
        let mut v = Volume::new(raw.dims, payload_to_f32(&raw.payload, raw.dtype))?;
        v.spacing = raw.spacing;
        Ok(v)
    } else {
        read_nifti(path, &bytes)
    }
}

/// Writes a volume as VOL1 with a float32 payload.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_vol1(path, DTYPE_F32, v.dims, v.spacing, &payload)
}

/// Loads an integer label volume (VOL1 int16 or NIfTI int16).
pub fn load_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SegError::io(path, e))?;
    let (dims, raw): (Dims, Vec<i64>) = if bytes.len() >= 4 && &bytes[..4] == VOL1_MAGIC {
        let raw = read_vol1(path, &bytes)?;
        if raw.dtype != DTYPE_I16 {
            return Err(SegError::format(path, "label volume must use int16 payload"));
        }
        (
            raw.dims,
            raw.payload
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as i64)
                .collect(),
        )
    } else {
        let (dims, datatype, payload) = read_nifti_raw(path, &bytes)?;
        if datatype != NIFTI_DT_INT16 {
            return Err(SegError::format(path, "label volume must use int16 payload"));
        }
        (
            dims,
            payload
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]])  as i64)
                .collect(),
        )
    };
    let mut labels = Vec::with_capacity(raw.len());
    for (i, v) in raw.into_iter().enumerate() {
        if v < 0 || v > MAX_LABEL as i64 {
            return Err(SegError::InvalidLabel { label: v, index: i });
        }
        labels.push(v as u8);
    }
    LabelVolume::new(dims, labels)
}

/// Writes a label volume as VOL1 with an int16 payload.
pub fn save_label_volume(lv: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(lv.labels.len() * 2);
    for &l in &lv.labels {
        payload.extend_from_slice(&(l as i16).to_le_bytes());
    }
    write_vol1(path, DTYPE_I16, lv.dims, None, &payload)
}

fn read_i16_le(bytes: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([bytes[off], bytes[off + 1]])
}

fn read_f32_le(bytes: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn read_nifti_raw(path: &Path, bytes: &[u8]) -> Result<(Dims, i16, Vec<u8>)> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(SegError::format(path, "not a VOL1 file and too short for NIfTI-1"));
    }
    let sizeof_hdr = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != NIFTI_HEADER_LEN as u32 {
        return Err(SegError::format(
            path,
            "unrecognized format (neither VOL1 nor little-endian NIfTI-1)",
        ));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(SegError::format(
            path,
            "only single-file (n+1) uncompressed NIfTI-1 is supported",
        ));
    }
    let ndim = read_i16_le(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(SegError::format(path, format!("bad NIfTI dim[0] = {ndim}")));
    }
    let mut dim = [1i16; 7];
    for (i, v) in dim.iter_mut().enumerate() {
        if (i as i16) < ndim {
            *v = read_i16_le(bytes, 42 + 2 * i);
        }
    }
    if dim.iter().skip(3).any(|&d| d > 1) {
        return Err(SegError::format(path, "only 3D NIfTI volumes are supported"));
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(SegError::format(path, "non-positive NIfTI dims"));
    }
    let dims = Dims::new(dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let datatype = read_i16_le(bytes, 70);
    let elem = match datatype {
        NIFTI_DT_INT16 => 2,
        NIFTI_DT_FLOAT32 => 4,
        other => {
            return Err(SegError::format(
                path,
                format!("unsupported NIfTI datatype {other} (want 4=int16 or 16=float32)"),
            ))
        }
    };
    let vox_offset = read_f32_le(bytes, 108) as usize;
    if vox_offset < NIFTI_HEADER_LEN {
        return Err(SegError::format(path, "NIfTI vox_offset inside the header"));
    }
    let expected = dims.len() * elem;
    if bytes.len() < vox_offset + expected {
        return Err(SegError::format(
            path,
            format!(
                "NIfTI payload size mismatch: need {} bytes at offset {}, file has {}",
                expected,
                vox_offset,
                bytes.len()
            ),
        ));
    }
    Ok((dims, datatype, bytes[vox_offset..vox_offset + expected].to_vec()))
}

fn read_nifti(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let (dims, datatype, payload) = read_nifti_raw(path, bytes)?;
    let data = match datatype {
        NIFTI_DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        _ => payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
    };
    let mut v = Volume::new(dims, data)?;
    let pixdim = [
        read_f32_le(bytes, 80),
        read_f32_le(bytes, 84),
        read_f32_le(bytes, 88),
    ];
    if pixdim.iter().all(|&p| p > 0.0) {
        v.spacing = Some(pixdim);
    }
    Ok(v)
}

/// One entry discovered in a dataset directory.
#[derive(Debug)]
pub struct DatasetEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
}

/// Scans `dir/images` and `dir/labels`, pairing files by stem.
///
/// Images without a matching label file form the unlabeled pool.
pub fn scan_data_dir(dir: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let labels = dir.join("labels");
    let mut entries = Vec::new();
    let rd = fs::read_dir(&images).map_err(|e| SegError::io(&images, e))?;
    for item in rd {
        let item = item.map_err(|e| SegError::io(&images, e))?;
        let path = item.path();
        if !path.is_file() {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "vol1" && ext != "nii" {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| SegError::format(&path, "non-utf8 file name"))?
            .to_string();
        let mut label_path = None;
        for label_ext in ["vol1", "nii"] {
            let candidate = labels.join(format!("{stem}.{label_ext}"));
            if candidate.is_file() {
                label_path = Some(candidate);
                break;
            }
        }
        entries.push(DatasetEntry {
            id: stem,
            image_path: path,
            label_path,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Writes one sample into the `images/` / `labels/` layout used by the CLI.
pub fn save_sample(
    dir: impl AsRef<Path>,
    id: &str,
    volume: &Volume,
    labels: Option<&LabelVolume>,
) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| SegError::io(&images, e))?;
    save_volume(volume, images.join(format!("{id}.vol1")))?;
    if let Some(lv) = labels {
        let labels_dir = dir.join("labels");
        fs::create_dir_all(&labels_dir).map_err(|e| SegError::io(&labels_dir, e))?;
        save_label_volume(lv, labels_dir.join(format!("{id}.vol1")))?;
    }
    Ok(())
}

/// Writes the optional label-name sidecar next to a dataset.
pub fn save_label_sidecar(dir: impl AsRef<Path>, sidecar: &LabelSidecar) -> Result<()> {
    let path = dir.as_ref().join("labels.json");
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(&path, json).map_err(|e| SegError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn vol1_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.vol1");
        let dims = Dims::new(2, 2, 2);
        let data = vec![1.5, -2.25, 0.1, 4.0, 1e-7, -3.75e8, 0.0, 42.0];
        let v = Volume::new(dims, data.clone()).unwrap().with_spacing([0.5, 0.5, 1.0]);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.data, data);
        assert_eq!(back.spacing, Some([0.5, 0.5, 1.0]));
    }

    #[test]
    fn vol1_declared_order_is_x_fastest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.vol1");
        let dims = Dims::new(2, 2, 2);
        let data: Vec<f32> = (0..8).map(|i| i as f32).collect();
        save_volume(&Volume::new(dims, data).unwrap(), &path).unwrap();
        let v = load_volume(&path).unwrap();
        assert_eq!(v.at(1, 0, 0), 1.0);
        assert_eq!(v.at(0, 1, 0), 2.0);
        assert_eq!(v.at(0, 0, 1), 4.0);
    }

    #[test]
    fn single_voxel_file_length() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.vol1");
        let v = Volume::new(Dims::new(1, 1, 1), vec![7.0]).unwrap();
        save_volume(&v, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, VOL1_HEADER_LEN as u64 + 4);
        assert_eq!(load_volume(&path).unwrap().data, vec![7.0]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.vol1");
        let v = Volume::new(Dims::new(2, 2, 2), vec![0.0; 8]).unwrap();
        save_volume(&v, &path).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 4]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert!(matches!(err, SegError::Format { .. }), "got {err:?}");
    }

    #[test]
    fn unwritable_destination_is_an_io_error() {
        let v = Volume::new(Dims::new(1, 1, 1), vec![0.0]).unwrap();
        let err = save_volume(&v, "/nonexistent-dir/deep/v.vol1").unwrap_err();
        assert!(matches!(err, SegError::Io { .. }));
    }

    #[test]
    fn label_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.vol1");
        let lv = LabelVolume::new(Dims::new(2, 2, 1), vec![0, 1, 2, 3]).unwrap();
        save_label_volume(&lv, &path).unwrap();
        assert_eq!(load_label_volume(&path).unwrap(), lv);

        // Corrupt one label value beyond the valid range.
        let mut bytes = fs::read(&path).unwrap();
        let off = VOL1_HEADER_LEN;
        bytes[off..off + 2].copy_from_slice(&9i16.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_label_volume(&path).unwrap_err(),
            SegError::InvalidLabel { label: 9, index: 0 }
        ));
    }

    fn write_test_nifti(path: &Path, dims: Dims, datatype: i16, payload: &[u8]) {
        let mut h = vec![0u8; NIFTI_HEADER_LEN];
        h[0..4].copy_from_slice(&348u32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        h[42..44].copy_from_slice(&(dims.nx as i16).to_le_bytes());
        h[44..46].copy_from_slice(&(dims.ny as i16).to_le_bytes());
        h[46..48].copy_from_slice(&(dims.nz as i16).to_le_bytes());
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[80..84].copy_from_slice(&1.0f32.to_le_bytes());
        h[84..88].copy_from_slice(&1.0f32.to_le_bytes());
        h[88..92].copy_from_slice(&2.5f32.to_le_bytes());
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&[0u8; 4]); // extension bytes up to vox_offset 352
        h.extend_from_slice(payload);
        fs::write(path, h).unwrap();
    }

    #[test]
    fn nifti_float32_subset_reads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let dims = Dims::new(2, 2, 2);
        let data: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        let mut payload = Vec::new();
        for &x in &data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        write_test_nifti(&path, dims, NIFTI_DT_FLOAT32, &payload);
        let v = load_volume(&path).unwrap();
        assert_eq!(v.dims, dims);
        assert_eq!(v.data, data);
        assert_eq!(v.spacing, Some([1.0, 1.0, 2.5]));
    }

    #[test]
    fn nifti_int16_labels_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("l.nii");
        let dims = Dims::new(2, 1, 1);
        let mut payload = Vec::new();
        for l in [1i16, 3] {
            payload.extend_from_slice(&l.to_le_bytes());
        }
        write_test_nifti(&path, dims, NIFTI_DT_INT16, &payload);
        let lv = load_label_volume(&path).unwrap();
        assert_eq!(lv.labels, vec![1, 3]);
    }

    #[test]
    fn nifti_unsupported_datatype_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_test_nifti(&path, Dims::new(1, 1, 1), 64, &[0u8; 8]); // float64
        assert!(matches!(load_volume(&path).unwrap_err(), SegError::Format { .. }));
    }

    #[test]
    fn scan_pairs_images_with_labels() {
        let dir = tempdir().unwrap();
        let dims = Dims::cubic(2);
        let v = Volume::zeros(dims);
        let lv = LabelVolume::new(dims, vec![0; 8]).unwrap();
        save_sample(dir.path(), "b", &v, Some(&lv)).unwrap();
        save_sample(dir.path(), "a", &v, None).unwrap();
        let entries = scan_data_dir(dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].id, "a");
        assert!(entries[0].label_path.is_none());
        assert_eq!(entries[1].id, "b");
        assert!(entries[1].label_path.is_some());
    }
}
