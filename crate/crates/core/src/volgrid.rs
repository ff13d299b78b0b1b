//! Dense volume grids, VXG1 file I/O, normalization and patch extraction.
//!
//! Linear memory order is fixed crate-wide: z-major, x-fastest, i.e.
//! `data[(z * ny + y) * nx + x]`. Gray volumes store one `f32` per voxel,
//! label volumes one `u8` in `{0, 1}`. Volumes are immutable after
//! construction; every operation returns a new volume.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Voxel counts along (z, y, x).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Dims {
    pub fn new(nz: usize, ny: usize, nx: usize) -> Dims {
        Dims { nz, ny, nx }
    }

    pub fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel (z, y, x).
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        debug_assert!(z < self.nz && y < self.ny && x < self.nx);
        (z * self.ny + y) * self.nx + x
    }

    /// Physical extent in micrometers along (z, y, x) for a given pitch.
    pub fn extent_um(&self, voxel_size_um: f32) -> [f64; 3] {
        let p = voxel_size_um as f64;
        [
            self.nz as f64 * p,
            self.ny as f64 * p,
            self.nx as f64 * p,
        ]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nz, self.ny, self.nx)
    }
}

/// A rectangular voxel block: origin and shape in (z, y, x). 2D slices use
/// `shape.0 == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub origin: (usize, usize, usize),
    pub shape: (usize, usize, usize),
}

impl PatchRef {
    pub fn new(origin: (usize, usize, usize), shape: (usize, usize, usize)) -> PatchRef {
        PatchRef { origin, shape }
    }

    /// Does the block lie fully inside `dims`?
    pub fn fits(&self, dims: Dims) -> bool {
        self.shape.0 >= 1
            && self.shape.1 >= 1
            && self.shape.2 >= 1
            && self.origin.0 + self.shape.0 <= dims.nz
            && self.origin.1 + self.shape.1 <= dims.ny
            && self.origin.2 + self.shape.2 <= dims.nx
    }
}

/// Dense gray-value volume with isotropic voxel pitch in micrometers.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub voxel_size_um: f32,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxel_size_um: f32, data: Vec<f32>) -> Result<Volume> {
        if dims.nz == 0 || dims.ny == 0 || dims.nx == 0 {
            return Err(Error::InvalidConfig(format!("empty dims {dims}")));
        }
        if !(voxel_size_um > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "voxel pitch must be positive, got {voxel_size_um}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "data length {} does not match dims {dims}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            voxel_size_um,
            data,
        })
    }

    /// Constant-filled volume.
    pub fn filled(dims: Dims, voxel_size_um: f32, value: f32) -> Volume {
        Volume {
            dims,
            voxel_size_um,
            data: vec![value; dims.len()],
        }
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Copy out the block described by `p`; pitch is preserved.
    pub fn patch(&self, p: PatchRef) -> Result<Volume> {
        let data = copy_patch(&self.data, self.dims, p)?;
        Ok(Volume {
            dims: Dims::new(p.shape.0, p.shape.1, p.shape.2),
            voxel_size_um: self.voxel_size_um,
            data,
        })
    }

    /// The (1, ny, nx) sub-volume at constant z.
    pub fn slice2d(&self, z: usize) -> Result<Volume> {
        if z >= self.dims.nz {
            return Err(Error::OutOfRange {
                what: format!("slice z={} of {}", z, self.dims),
            });
        }
        self.patch(PatchRef::new((z, 0, 0), (1, self.dims.ny, self.dims.nx)))
    }
}

/// Binary fiber/background mask paired with a gray volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub voxel_size_um: f32,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, voxel_size_um: f32, data: Vec<u8>) -> Result<LabelVolume> {
        if data.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidConfig(format!(
                "label volume contains value {v} outside {{0,1}}"
            )));
        }
        Ok(LabelVolume {
            dims,
            voxel_size_um,
            data,
        })
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn patch(&self, p: PatchRef) -> Result<LabelVolume> {
        let data = copy_patch(&self.data, self.dims, p)?;
        Ok(LabelVolume {
            dims: Dims::new(p.shape.0, p.shape.1, p.shape.2),
            voxel_size_um: self.voxel_size_um,
            data,
        })
    }

    /// Fraction of voxels labeled fiber.
    pub fn fiber_fraction(&self) -> f64 {
        let ones = self.data.iter().filter(|&&v| v == 1).count();
        ones as f64 / self.data.len() as f64
    }
}

fn copy_patch<T: Copy>(data: &[T], dims: Dims, p: PatchRef) -> Result<Vec<T>> {
    if !p.fits(dims) {
        return Err(Error::OutOfRange {
            what: format!(
                "patch origin {:?} shape {:?} in volume {dims}",
                p.origin, p.shape
            ),
        });
    }
    let (dz, dy, dx) = p.shape;
    let mut out = Vec::with_capacity(dz * dy * dx);
    for z in 0..dz {
        for y in 0..dy {
            let row = dims.index(p.origin.0 + z, p.origin.1 + y, p.origin.2);
            out.extend_from_slice(&data[row..row + dx]);
        }
    }
    Ok(out)
}

/// Either payload kind a VXG1 file can hold.
#[derive(Clone, Debug)]
pub enum AnyVolume {
    Gray(Volume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn into_gray(self) -> Result<Volume> {
        match self {
            AnyVolume::Gray(v) => Ok(v),
            AnyVolume::Label(_) => Err(Error::InvalidConfig(
                "expected an f32 gray volume, found a u8 label volume".into(),
            )),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            AnyVolume::Gray(_) => Err(Error::InvalidConfig(
                "expected a u8 label volume, found an f32 gray volume".into(),
            )),
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyVolume::Gray(v) => v.dims,
            AnyVolume::Label(v) => v.dims,
        }
    }
}

/// Write a gray volume in the VXG1 format: one UTF-8 header line
/// `VXG1 dtype=f32 dims=<nz>,<ny>,<nx> pitch_um=<decimal>\n` followed by the
/// raw little-endian payload.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let header = format!(
        "VXG1 dtype=f32 dims={},{},{} pitch_um={}\n",
        v.dims.nz, v.dims.ny, v.dims.nx, v.voxel_size_um
    );
    w.write_all(header.as_bytes())
        .and_then(|_| {
            for val in &v.data {
                w.write_all(&val.to_le_bytes())?;
            }
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

/// Write a label volume (dtype tag `u8`, one byte per voxel).
pub fn save_label_volume(v: &LabelVolume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let header = format!(
        "VXG1 dtype=u8 dims={},{},{} pitch_um={}\n",
        v.dims.nz, v.dims.ny, v.dims.nx, v.voxel_size_um
    );
    w.write_all(header.as_bytes())
        .and_then(|_| {
            w.write_all(&v.data)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

/// Load a VXG1 file; the dtype tag decides whether a gray or a label volume
/// comes back.
pub fn load_volume(path: &Path) -> Result<AnyVolume> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header newline"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let payload = &bytes[nl + 1..];

    let mut fields = header.split_whitespace();
    if fields.next() != Some("VXG1") {
        return Err(Error::format(path, "missing VXG1 magic"));
    }
    let mut dtype = None;
    let mut dims = None;
    let mut pitch = None;
    for field in fields {
        match field.split_once('=') {
            Some(("dtype", v)) => dtype = Some(v.to_string()),
            Some(("dims", v)) => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(path, format!("bad dims field `{v}`")))?;
                if parts.len() != 3 {
                    return Err(Error::format(path, format!("dims needs 3 entries, got `{v}`")));
                }
                dims = Some(Dims::new(parts[0], parts[1], parts[2]));
            }
            Some(("pitch_um", v)) => {
                pitch = Some(
                    v.parse::<f32>()
                        .map_err(|_| Error::format(path, format!("bad pitch field `{v}`")))?,
                );
            }
            _ => return Err(Error::format(path, format!("unknown header field `{field}`"))),
        }
    }
    let dtype = dtype.ok_or_else(|| Error::format(path, "missing dtype"))?;
    let dims = dims.ok_or_else(|| Error::format(path, "missing dims"))?;
    let pitch = pitch.ok_or_else(|| Error::format(path, "missing pitch_um"))?;
    if !(pitch > 0.0) {
        return Err(Error::format(path, format!("non-positive pitch {pitch}")));
    }

    match dtype.as_str() {
        "f32" => {
            let want = dims.len() * 4;
            if payload.len() != want {
                return Err(Error::format(
                    path,
                    format!("payload is {} bytes, header declares {want}", payload.len()),
                ));
            }
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyVolume::Gray(Volume::new(dims, pitch, data)?))
        }
        "u8" => {
            let want = dims.len();
            if payload.len() != want {
                return Err(Error::format(
                    path,
                    format!("payload is {} bytes, header declares {want}", payload.len()),
                ));
            }
            if let Some(v) = payload.iter().find(|&&v| v > 1) {
                return Err(Error::format(
                    path,
                    format!("label payload contains value {v} outside {{0,1}}"),
                ));
            }
            Ok(AnyVolume::Label(LabelVolume {
                dims,
                voxel_size_um: pitch,
                data: payload.to_vec(),
            }))
        }
        other => Err(Error::format(path, format!("unknown dtype tag `{other}`"))),
    }
}

/// Affine map to zero mean and unit (population) standard deviation.
///
/// Constant volumes are rejected: a zero-variance scan is meaningless to
/// every consumer downstream.
pub fn normalize(v: &Volume) -> Result<Volume> {
    if v.data.len() < 2 {
        return Err(Error::Degenerate(
            "normalize needs at least 2 voxels".into(),
        ));
    }
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "normalize: volume has zero variance".into(),
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - mean) * inv_std) as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        voxel_size_um: v.voxel_size_um,
        data,
    })
}

/// Free-function form of [`Volume::patch`].
pub fn extract_patch(v: &Volume, p: PatchRef) -> Result<Volume> {
    v.patch(p)
}

/// Free-function form of [`Volume::slice2d`].
pub fn slice2d(v: &Volume, z: usize) -> Result<Volume> {
    v.slice2d(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
        Volume::new(dims, 3.9, data).unwrap()
    }

    #[test]
    fn header_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vxg");
        let v = random_volume(Dims::new(4, 4, 4), 1);
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap().into_gray().unwrap();
        assert_eq!(loaded.data.len(), 64);
        assert_eq!(loaded.dims, Dims::new(4, 4, 4));
    }

    #[test]
    fn payload_size_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.vxg");
        let mut bytes = b"VXG1 dtype=f32 dims=4,4,4 pitch_um=3.9\n".to_vec();
        bytes.extend_from_slice(&vec![0u8; 255]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_dtype_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("odd.vxg");
        std::fs::write(&path, b"VXG1 dtype=f16 dims=1,1,1 pitch_um=1\n\x00\x00").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            load_volume(Path::new("/nonexistent/nope.vxg")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn label_values_outside_01_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad_label.vxg");
        std::fs::write(&path, b"VXG1 dtype=u8 dims=1,1,2 pitch_um=8.3\n\x00\x02").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.vxg");
        let v = random_volume(Dims::new(5, 3, 7), 2);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap().into_gray().unwrap();
        // Byte-level comparison via the raw bit patterns.
        let a: Vec<u32> = v.data.iter().map(|f| f.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|f| f.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.voxel_size_um, v.voxel_size_um);

        // Second leg: load ∘ save on the file bytes.
        let path2 = dir.path().join("rt2.vxg");
        save_volume(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn zero_volume_payload_is_all_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.vxg");
        let v = Volume::filled(Dims::new(2, 2, 2), 3.9, 0.0);
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert!(bytes[nl + 1..].iter().all(|&b| b == 0));
        assert_eq!(bytes[nl + 1..].len(), 32);
    }

    #[test]
    fn label_round_trip_one_byte_per_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vxg");
        let l = LabelVolume::new(Dims::new(2, 3, 4), 8.3, vec![1u8; 24]).unwrap();
        save_label_volume(&l, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 24);
        let back = load_volume(&path).unwrap().into_label().unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn normalize_two_point_volume() {
        let v = Volume::new(Dims::new(1, 1, 2), 1.0, vec![0.0, 2.0]).unwrap();
        let n = normalize(&v).unwrap();
        assert!((n.data[0] + 1.0).abs() < 1e-6);
        assert!((n.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let v = random_volume(Dims::new(32, 32, 32), 3);
        let n = normalize(&v).unwrap();
        let len = n.data.len() as f64;
        let mean = n.data.iter().map(|&x| x as f64).sum::<f64>() / len;
        let var = n.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / len;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());

        let n2 = normalize(&n).unwrap();
        for (a, b) in n.data.iter().zip(&n2.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_constant_volume() {
        let v = Volume::filled(Dims::new(2, 2, 2), 1.0, 7.0);
        assert!(matches!(normalize(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn whole_volume_patch_is_identity() {
        let v = random_volume(Dims::new(3, 4, 5), 4);
        let p = v
            .patch(PatchRef::new((0, 0, 0), (3, 4, 5)))
            .unwrap();
        assert_eq!(p, v);
    }

    #[test]
    fn single_voxel_patch() {
        let v = random_volume(Dims::new(3, 4, 5), 5);
        let p = v.patch(PatchRef::new((0, 0, 0), (1, 1, 1))).unwrap();
        assert_eq!(p.data, vec![v.at(0, 0, 0)]);
    }

    #[test]
    fn patch_matches_triple_loop_oracle() {
        let v = random_volume(Dims::new(6, 7, 8), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let shape = (
                rng.random_range(1..=6usize),
                rng.random_range(1..=7usize),
                rng.random_range(1..=8usize),
            );
            let origin = (
                rng.random_range(0..=6 - shape.0),
                rng.random_range(0..=7 - shape.1),
                rng.random_range(0..=8 - shape.2),
            );
            let p = v.patch(PatchRef::new(origin, shape)).unwrap();
            for z in 0..shape.0 {
                for y in 0..shape.1 {
                    for x in 0..shape.2 {
                        assert_eq!(
                            p.at(z, y, x),
                            v.at(origin.0 + z, origin.1 + y, origin.2 + x)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_patch_rejected() {
        let v = random_volume(Dims::new(3, 3, 3), 8);
        assert!(v.patch(PatchRef::new((1, 0, 0), (3, 3, 3))).is_err());
    }

    #[test]
    fn slice_reassembly_recovers_volume() {
        let v = random_volume(Dims::new(5, 4, 3), 9);
        let mut rebuilt = Vec::new();
        for z in 0..5 {
            rebuilt.extend_from_slice(&v.slice2d(z).unwrap().data);
        }
        assert_eq!(rebuilt, v.data);
    }

    #[test]
    fn slice_of_flat_volume_is_identity() {
        let v = random_volume(Dims::new(1, 4, 3), 10);
        assert_eq!(v.slice2d(0).unwrap(), v);
        assert!(v.slice2d(1).is_err());
    }

    #[test]
    fn patch_tiling_reassembles_volume() {
        let v = random_volume(Dims::new(4, 6, 8), 11);
        let mut out = vec![0.0f32; v.data.len()];
        for z0 in (0..4).step_by(2) {
            for y0 in (0..6).step_by(3) {
                for x0 in (0..8).step_by(4) {
                    let p = v.patch(PatchRef::new((z0, y0, x0), (2, 3, 4))).unwrap();
                    for z in 0..2 {
                        for y in 0..3 {
                            for x in 0..4 {
                                out[v.dims.index(z0 + z, y0 + y, x0 + x)] = p.at(z, y, x);
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(out, v.data);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normalize_preserves_order(data in proptest::collection::vec(-1e3f32..1e3, 8..64)) {
            let spread = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                - data.iter().cloned().fold(f32::INFINITY, f32::min);
            prop_assume!(spread > 1e-3);
            let dims = Dims::new(1, 1, data.len());
            let v = Volume::new(dims, 1.0, data.clone()).unwrap();
            let n = normalize(&v).unwrap();
            for i in 0..data.len() {
                for j in 0..data.len() {
                    if data[i] < data[j] {
                        prop_assert!(n.data[i] <= n.data[j]);
                    }
                }
            }
        }

        #[test]
        fn save_load_round_trip(nz in 1usize..4, ny in 1usize..4, nx in 1usize..4, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.vxg");
            let v = random_volume(Dims::new(nz, ny, nx), seed);
            save_volume(&v, &path).unwrap();
            let back = load_volume(&path).unwrap().into_gray().unwrap();
            prop_assert_eq!(
                v.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
                back.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
