//! Binary file formats and atomic writes.
//!
//! All integers and floats are little-endian.
//!
//! * velodyne `.bin` — consecutive 16-byte records of four `f32`
//!   (x, y, z, reflectance);
//! * `MMFF` — feature map: magic, `u16` version, `u8` rank (= 3),
//!   3 x `u32` dims (C, H, W), row-major `f32` payload;
//! * `MMVX` — voxel batch: magic, `u16` version, grid dims, voxel
//!   count, padded row count, then indices / counts / means / points;
//! * `MMCK` — checkpoint: magic, `u16` version, `u32` entry count,
//!   per entry a `u16`-length UTF-8 name, `u8` rank, dims and `f32`
//!   data. Files round-trip bit-exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use mmfusion_core::cloud::PointCloud;
use mmfusion_core::params::ParamStore;
use mmfusion_core::tensor::{FeatureMap, Frame, Tensor};
use mmfusion_core::voxel::VoxelBatch;
use mmfusion_core::Scalar;

use crate::errors::{CliError, CliResult};

pub const MMFF_MAGIC: &[u8; 4] = b"MMFF";
pub const MMVX_MAGIC: &[u8; 4] = b"MMVX";
pub const MMCK_MAGIC: &[u8; 4] = b"MMCK";
pub const FORMAT_VERSION: u16 = 1;

/// Writes via a temporary file in the target directory plus an atomic
/// rename, so interrupted runs never leave truncated artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

// ---- KITTI velodyne ------------------------------------------------------

/// Decodes a velodyne point dump; the length must be a multiple of the
/// 16-byte point stride and every value must be finite.
pub fn decode_kitti_points(bytes: &[u8]) -> CliResult<PointCloud> {
    if bytes.len() % 16 != 0 {
        let offset = bytes.len() - bytes.len() % 16;
        return Err(CliError::Format(format!(
            "point dump length {} is not a multiple of 16; trailing bytes start at offset {offset}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let mut p = [0.0f32; 4];
        for c in 0..4 {
            p[c] = f32::from_le_bytes(rec[c * 4..c * 4 + 4].try_into().unwrap());
            if !p[c].is_finite() {
                return Err(CliError::Format(format!(
                    "non-finite value in point {i}, channel {c}"
                )));
            }
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn read_kitti_bin(path: &Path) -> CliResult<PointCloud> {
    decode_kitti_points(&read_file(path)?)
}

pub fn encode_kitti_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for c in 0..4 {
            out.extend_from_slice(&p[c].to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: &Path, pc: &PointCloud) -> CliResult<()> {
    write_atomic(path, &encode_kitti_points(pc))
}

// ---- MMFF feature maps -----------------------------------------------------

fn check_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], what: &str) -> CliResult<()> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)
        .map_err(|_| CliError::Format(format!("{what}: file too short for magic")))?;
    if &got != magic {
        return Err(CliError::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| CliError::Format(format!("{what}: truncated version")))?;
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!(
            "{what}: unsupported version {version}"
        )));
    }
    Ok(())
}

pub fn encode_feature_map(map: &FeatureMap<f32>) -> Vec<u8> {
    let dims = map.dims();
    let mut out = Vec::with_capacity(11 + 4 * dims.len() + 4 * map.tensor().numel());
    out.extend_from_slice(MMFF_MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u8(3).unwrap();
    for &d in dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for v in map.tensor().data() {
        out.write_f32::<LittleEndian>(*v).unwrap();
    }
    out
}

pub fn decode_feature_map(bytes: &[u8], frame: Frame) -> CliResult<FeatureMap<f32>> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, MMFF_MAGIC, "feature map")?;
    let rank = cur
        .read_u8()
        .map_err(|_| CliError::Format("feature map: truncated rank".into()))?;
    if rank != 3 {
        return Err(CliError::Format(format!(
            "feature map: rank must be 3, got {rank}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| CliError::Format("feature map: truncated dims".into()))?
            as usize;
    }
    let numel = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .ok_or_else(|| CliError::Format(format!("feature map: dims {dims:?} overflow")))?;
    let mut data = vec![0.0f32; numel];
    cur.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| CliError::Format(format!("feature map: truncated payload, wanted {numel} floats")))?;
    let tensor = Tensor::new(dims.to_vec(), data)
        .map_err(|e| CliError::Format(e.to_string()))?;
    FeatureMap::new(tensor, frame).map_err(|e| CliError::Format(e.to_string()))
}

pub fn save_feature_map(path: &Path, map: &FeatureMap<f32>) -> CliResult<()> {
    write_atomic(path, &encode_feature_map(map))
}

pub fn load_feature_map(path: &Path, frame: Frame) -> CliResult<FeatureMap<f32>> {
    decode_feature_map(&read_file(path)?, frame)
}

/// Casts a generic tensor down to the `f32` the file formats carry.
pub fn to_f32_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<f32> {
    Tensor::new(
        t.dims().to_vec(),
        t.data().iter().map(|v| v.to_f64().unwrap() as f32).collect(),
    )
    .unwrap()
}

pub fn from_f32_tensor<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(
        t.dims().to_vec(),
        t.data().iter().map(|v| T::from(*v).unwrap()).collect(),
    )
    .unwrap()
}

// ---- MMVX voxel batches ----------------------------------------------------

pub fn encode_voxel_batch(batch: &VoxelBatch) -> Vec<u8> {
    let k = batch.len();
    let mut out = Vec::new();
    out.extend_from_slice(MMVX_MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    for d in batch.grid {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    out.write_u32::<LittleEndian>(k as u32).unwrap();
    out.write_u32::<LittleEndian>(batch.max_points as u32).unwrap();
    for idx in &batch.indices {
        for &c in idx {
            out.write_u32::<LittleEndian>(c).unwrap();
        }
    }
    for &c in &batch.counts {
        out.write_u32::<LittleEndian>(c).unwrap();
    }
    for m in &batch.means {
        for &v in m {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    for &v in &batch.points {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode_voxel_batch(bytes: &[u8]) -> CliResult<VoxelBatch> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, MMVX_MAGIC, "voxel batch")?;
    let read_u32 = |cur: &mut Cursor<&[u8]>, what: &str| -> CliResult<usize> {
        cur.read_u32::<LittleEndian>()
            .map(|v| v as usize)
            .map_err(|_| CliError::Format(format!("voxel batch: truncated {what}")))
    };
    let grid = [
        read_u32(&mut cur, "grid")?,
        read_u32(&mut cur, "grid")?,
        read_u32(&mut cur, "grid")?,
    ];
    let k = read_u32(&mut cur, "voxel count")?;
    let max_points = read_u32(&mut cur, "row count")?;
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        let mut idx = [0u32; 3];
        for c in idx.iter_mut() {
            *c = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| CliError::Format("voxel batch: truncated indices".into()))?;
        }
        indices.push(idx);
    }
    let mut counts = vec![0u32; k];
    cur.read_u32_into::<LittleEndian>(&mut counts)
        .map_err(|_| CliError::Format("voxel batch: truncated counts".into()))?;
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        let mut m = [0.0f32; 4];
        cur.read_f32_into::<LittleEndian>(&mut m)
            .map_err(|_| CliError::Format("voxel batch: truncated means".into()))?;
        means.push(m);
    }
    let wanted = k
        .checked_mul(max_points)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CliError::Format("voxel batch: size overflow".into()))?;
    let mut points = vec![0.0f32; wanted];
    cur.read_f32_into::<LittleEndian>(&mut points)
        .map_err(|_| CliError::Format("voxel batch: truncated points".into()))?;
    Ok(VoxelBatch {
        indices,
        points,
        counts,
        means,
        grid,
        max_points,
    })
}

pub fn save_voxel_batch(path: &Path, batch: &VoxelBatch) -> CliResult<()> {
    write_atomic(path, &encode_voxel_batch(batch))
}

pub fn load_voxel_batch(path: &Path) -> CliResult<VoxelBatch> {
    decode_voxel_batch(&read_file(path)?)
}

// ---- MMCK checkpoints --------------------------------------------------------

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MMCK_MAGIC);
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(store.len() as u32).unwrap();
    for (name, entry) in store.iter() {
        if name.len() > u16::MAX as usize {
            return Err(CliError::Format(format!("parameter name too long: {name}")));
        }
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        let dims = entry.value.dims();
        out.write_u8(dims.len() as u8).unwrap();
        for &d in dims {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for v in entry.value.data() {
            out.write_f32::<LittleEndian>(v.to_f64().unwrap() as f32)
                .unwrap();
        }
    }
    Ok(out)
}

/// Loads checkpoint values into an already-registered store; names and
/// dims must match exactly.
pub fn decode_checkpoint_into<T: Scalar>(
    bytes: &[u8],
    store: &mut ParamStore<T>,
) -> CliResult<()> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, MMCK_MAGIC, "checkpoint")?;
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| CliError::Format("checkpoint: truncated entry count".into()))?;
    let mut seen = 0usize;
    for _ in 0..count {
        let name_len = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| CliError::Format("checkpoint: truncated name length".into()))?
            as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| CliError::Format("checkpoint: truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CliError::Format("checkpoint: name is not UTF-8".into()))?;
        let rank = cur
            .read_u8()
            .map_err(|_| CliError::Format("checkpoint: truncated rank".into()))?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(
                cur.read_u32::<LittleEndian>()
                    .map_err(|_| CliError::Format("checkpoint: truncated dims".into()))?
                    as usize,
            );
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0f32; numel];
        cur.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| CliError::Format(format!("checkpoint: truncated data for {name}")))?;
        let tensor: Tensor<T> = Tensor::new(
            dims,
            data.into_iter().map(|v| T::from(v).unwrap()).collect(),
        )
        .map_err(|e| CliError::Format(e.to_string()))?;
        store
            .set_value(&name, tensor)
            .map_err(|e| CliError::Format(format!("checkpoint entry {name}: {e}")))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(CliError::Format(format!(
            "checkpoint holds {seen} entries, configuration expects {}",
            store.len()
        )));
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> CliResult<()> {
    write_atomic(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> CliResult<()> {
    decode_checkpoint_into(&read_file(path)?, store)
}

// ---- raw images -------------------------------------------------------------

/// Loads an image file and nearest-neighbor resizes it to the
/// configured `[3, d1, d2]` input tensor (d1 along image width).
pub fn load_image_tensor(path: &Path, input_hw: [usize; 2]) -> CliResult<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (d1, d2) = (input_hw[0], input_hw[1]);
    let resized = image::imageops::resize(
        &img,
        d1 as u32,
        d2 as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut data = vec![0.0f32; 3 * d1 * d2];
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[c * d1 * d2 + x as usize * d2 + y as usize] = pixel.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, d1, d2], data).map_err(|e| CliError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_single_point_decodes_by_hand() {
        // 1.0, 2.0, 3.0, 0.5 as LE f32
        let bytes = [
            0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40, 0x00, 0x00,
            0x00, 0x3F,
        ];
        let pc = decode_kitti_points(&bytes).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0, 0.5]]);
    }

    #[test]
    fn kitti_empty_and_ragged_files() {
        assert_eq!(decode_kitti_points(&[]).unwrap().len(), 0);
        let err = decode_kitti_points(&[0u8; 17]).unwrap_err();
        assert!(err.to_string().contains("offset 16"), "{err}");
    }

    #[test]
    fn kitti_rejects_non_finite() {
        let mut bytes = vec![0u8; 16];
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_kitti_points(&bytes).is_err());
    }

    #[test]
    fn feature_map_roundtrip_is_bit_exact() {
        let mut rng = mmfusion_core::rng::named_rng(0, "ff");
        let data: Vec<f32> = mmfusion_core::rng::uniform_vec(&mut rng, 2 * 3 * 4, -5.0, 5.0)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let map = FeatureMap::new(Tensor::new(vec![2, 3, 4], data).unwrap(), Frame::Image).unwrap();
        let bytes = encode_feature_map(&map);
        let back = decode_feature_map(&bytes, Frame::Image).unwrap();
        assert_eq!(map, back);
        assert_eq!(bytes, encode_feature_map(&back));
    }

    #[test]
    fn feature_map_bad_magic_and_truncation() {
        let map = FeatureMap::new(Tensor::<f32>::zeros(vec![1, 2, 2]), Frame::Bev).unwrap();
        let mut bytes = encode_feature_map(&map);
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(decode_feature_map(&bytes, Frame::Bev).is_err());

        let bytes = encode_feature_map(&map);
        assert!(decode_feature_map(&bytes[..bytes.len() - 2], Frame::Bev).is_err());
    }

    #[test]
    fn published_image_feature_dims_survive_roundtrip() {
        let map = FeatureMap::new(Tensor::<f32>::zeros(vec![256, 39, 11]), Frame::Image).unwrap();
        let back = decode_feature_map(&encode_feature_map(&map), Frame::Image).unwrap();
        assert_eq!(back.dims(), &[256, 39, 11]);
    }

    #[test]
    fn voxel_batch_roundtrip() {
        use mmfusion_core::cloud::PointCloud;
        use mmfusion_core::voxel::{voxelize, VoxelConfig};
        let cfg = VoxelConfig {
            voxel_size: [8.8, 10.0, 1.0],
            ..VoxelConfig::default()
        };
        let pc = PointCloud::new(vec![
            [1.0, 2.0, -1.0, 0.5],
            [50.0, -30.0, 0.5, 0.1],
            [1.1, 2.1, -1.1, 0.9],
        ]);
        let (batch, _) = voxelize(&pc, &cfg).unwrap();
        let bytes = encode_voxel_batch(&batch);
        let back = decode_voxel_batch(&bytes).unwrap();
        assert_eq!(batch, back);
    }

    #[test]
    fn checkpoint_roundtrip_restores_values() {
        let mut store: ParamStore<f32> = ParamStore::new(3);
        store.register_weight("a.w", vec![3, 2], 2).unwrap();
        store.register_weight("b.w", vec![4], 4).unwrap();
        let bytes = encode_checkpoint(&store).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new(99);
        other.register_weight("a.w", vec![3, 2], 2).unwrap();
        other.register_weight("b.w", vec![4], 4).unwrap();
        decode_checkpoint_into(&bytes, &mut other).unwrap();
        assert_eq!(store.get("a.w").unwrap(), other.get("a.w").unwrap());
        assert_eq!(store.get("b.w").unwrap(), other.get("b.w").unwrap());
        // byte-level round trip
        assert_eq!(bytes, encode_checkpoint(&other).unwrap());
    }

    #[test]
    fn checkpoint_name_mismatch_is_format_error() {
        let mut store: ParamStore<f32> = ParamStore::new(0);
        store.register_weight("a.w", vec![2], 2).unwrap();
        let bytes = encode_checkpoint(&store).unwrap();
        let mut other: ParamStore<f32> = ParamStore::new(0);
        other.register_weight("different", vec![2], 2).unwrap();
        assert!(decode_checkpoint_into(&bytes, &mut other).is_err());
    }
}
