//! Single-file NIfTI-1 reading and writing, optionally gzip-compressed.
//!
//! Geometry precedence on read is sform, then qform, then pixdim with an
//! identity direction. Writers always emit both sform (code 2) and qform
//! (code 1) describing the same lattice. NIfTI-1 stores the affine as `f32`,
//! so writers also attach a comment extension holding the geometry in full
//! precision. On read it is used only when it agrees with the header affine
//! to 1e-3, so a file whose header was edited by another tool still wins.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::{Geometry, ImageVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::registration::DeformationField;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const INTENT_VECTOR: i16 = 1007;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const XYZT_MM: u8 = 2;
const ECODE_COMMENT: i32 = 6;
const GEOMETRY_TAG: &str = "repeat-geometry-f64 ";
const EXTENSION_AGREEMENT: f64 = 1e-3;

/// The subset of NIfTI-1 header fields this crate interprets.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub little_endian: bool,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_code: 0,
            datatype: DT_FLOAT64,
            bitpix: 64,
            pixdim: [1.0; 8],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: XYZT_MM,
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: *b"n+1\0",
            little_endian: true,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl Cursor<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }
    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "header is {} bytes, expected {HEADER_SIZE}",
                bytes.len()
            )));
        }
        let size: [u8; 4] = bytes[0..4].try_into().unwrap();
        let le = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
            true
        } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
            false
        } else {
            return Err(Error::MalformedHeader("sizeof_hdr is not 348".into()));
        };
        let c = Cursor { bytes, le };
        let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let mut dim = [0i16; 8];
        for (n, d) in dim.iter_mut().enumerate() {
            *d = c.i16(40 + 2 * n);
        }
        if !(1..=7).contains(&dim[0]) {
            return Err(Error::MalformedHeader(format!("dim[0] = {}", dim[0])));
        }
        let mut pixdim = [0f32; 8];
        for (n, p) in pixdim.iter_mut().enumerate() {
            *p = c.f32(76 + 4 * n);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = c.f32(280 + 16 * r + 4 * col);
            }
        }
        Ok(Self {
            dim,
            intent_code: c.i16(68),
            datatype: c.i16(70),
            bitpix: c.i16(72),
            pixdim,
            vox_offset: c.f32(108),
            scl_slope: c.f32(112),
            scl_inter: c.f32(116),
            xyzt_units: bytes[123],
            qform_code: c.i16(252),
            sform_code: c.i16(254),
            quatern: [c.f32(256), c.f32(260), c.f32(264)],
            qoffset: [c.f32(268), c.f32(272), c.f32(276)],
            srow,
            magic,
            little_endian: le,
        })
    }

    /// Serializes to 348 little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        let put_i16 = |b: &mut [u8], off: usize, v: i16| b[off..off + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |b: &mut [u8], off: usize, v: f32| b[off..off + 4].copy_from_slice(&v.to_le_bytes());
        b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        b[38] = b'r';
        for (n, &d) in self.dim.iter().enumerate() {
            put_i16(&mut b, 40 + 2 * n, d);
        }
        put_i16(&mut b, 68, self.intent_code);
        put_i16(&mut b, 70, self.datatype);
        put_i16(&mut b, 72, self.bitpix);
        for (n, &p) in self.pixdim.iter().enumerate() {
            put_f32(&mut b, 76 + 4 * n, p);
        }
        put_f32(&mut b, 108, self.vox_offset);
        put_f32(&mut b, 112, self.scl_slope);
        put_f32(&mut b, 116, self.scl_inter);
        b[123] = self.xyzt_units;
        put_i16(&mut b, 252, self.qform_code);
        put_i16(&mut b, 254, self.sform_code);
        for n in 0..3 {
            put_f32(&mut b, 256 + 4 * n, self.quatern[n]);
            put_f32(&mut b, 268 + 4 * n, self.qoffset[n]);
        }
        for r in 0..3 {
            for col in 0..4 {
                put_f32(&mut b, 280 + 16 * r + 4 * col, self.srow[r][col]);
            }
        }
        if self.intent_code == INTENT_VECTOR {
            b[328..334].copy_from_slice(b"vector");
        }
        b[344..348].copy_from_slice(&self.magic);
        b
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        if self.dim[0] < 3 || self.dim[1..4].iter().any(|&d| d < 2) {
            return Err(Error::MalformedHeader(format!(
                "need a 3D volume with at least 2 voxels per axis, got dim {:?}",
                self.dim
            )));
        }
        Ok([self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize])
    }

    /// Geometry from sform, else qform, else pixdim alone.
    pub fn geometry(&self) -> Result<Geometry> {
        let dims = self.spatial_dims()?;
        if self.sform_code > 0 {
            let m = Matrix3::from_fn(|r, c| self.srow[r][c] as f64);
            let spacing = [0, 1, 2].map(|c| m.column(c).norm());
            if spacing.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::MalformedHeader("degenerate sform".into()));
            }
            let mut dir = m;
            for (c, s) in spacing.iter().enumerate() {
                dir.column_mut(c).scale_mut(1.0 / s);
            }
            let origin = [0, 1, 2].map(|r| self.srow[r][3] as f64);
            return Geometry::new(dims, spacing, origin, dir)
                .map_err(|e| Error::MalformedHeader(format!("sform: {e}")));
        }
        let spacing = [1, 2, 3].map(|a| (self.pixdim[a] as f64).abs());
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::MalformedHeader(format!(
                "non-positive pixdim {:?}",
                self.pixdim
            )));
        }
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = Matrix3::new(
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            );
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let mut dir = r;
            dir.column_mut(2).scale_mut(qfac);
            let origin = self.qoffset.map(|v| v as f64);
            return Geometry::new(dims, spacing, origin, dir)
                .map_err(|e| Error::MalformedHeader(format!("qform: {e}")));
        }
        Geometry::axis_aligned(dims, spacing, [0.0; 3])
    }

    /// Header describing `geometry`, with both sform and qform set.
    pub fn for_geometry(geometry: &Geometry, datatype: i16) -> Self {
        let mut h = NiftiHeader {
            datatype,
            bitpix: bits_per_voxel(datatype),
            ..Default::default()
        };
        for a in 0..3 {
            h.dim[a + 1] = geometry.dims[a] as i16;
            h.pixdim[a + 1] = geometry.spacing[a] as f32;
        }
        let m = geometry.index_to_world();
        for r in 0..3 {
            for c in 0..3 {
                h.srow[r][c] = m[(r, c)] as f32;
            }
            h.srow[r][3] = geometry.origin[r] as f32;
        }
        h.sform_code = 2;

        let mut rot = geometry.direction;
        let qfac = if rot.determinant() < 0.0 {
            rot.column_mut(2).neg_mut();
            -1.0
        } else {
            1.0
        };
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        h.quatern = [q.i * sign, q.j * sign, q.k * sign].map(|v| v as f32);
        h.qoffset = geometry.origin.map(|v| v as f32);
        h.pixdim[0] = qfac;
        h.qform_code = 1;
        h
    }
}

fn bits_per_voxel(datatype: i16) -> i16 {
    match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        _ => 64,
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode_samples(h: &NiftiHeader, bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bytes.len() < count * width {
        return Err(Error::MalformedHeader(format!(
            "expected {} data bytes, found {}",
            count * width,
            bytes.len()
        )));
    }
    let le = h.little_endian;
    let out = bytes[..count * width]
        .chunks_exact(width)
        .map(|b| match h.datatype {
            DT_UINT8 => b[0] as f64,
            DT_INT16 => {
                let a = [b[0], b[1]];
                (if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }) as f64
            }
            DT_FLOAT32 => {
                let a = [b[0], b[1], b[2], b[3]];
                (if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }) as f64
            }
            _ => {
                let a: [u8; 8] = b.try_into().unwrap();
                if le {
                    f64::from_le_bytes(a)
                } else {
                    f64::from_be_bytes(a)
                }
            }
        })
        .collect();
    Ok(out)
}

/// Header, raw data bytes and the full-precision geometry extension if any.
/// Handles both `n+1` single files and `ni1` pairs.
fn load(path: &Path) -> Result<(NiftiHeader, Vec<u8>, Option<Geometry>)> {
    let bytes = read_all(path)?;
    let header = NiftiHeader::parse(&bytes)?;
    if &header.magic == b"ni1\0" {
        let ext = extension_geometry(&bytes, header.little_endian, bytes.len());
        let img = img_path_for(path);
        let data = read_all(&img)?;
        let off = header.vox_offset.max(0.0) as usize;
        let data = data.get(off..).unwrap_or_default().to_vec();
        return Ok((header, data, ext));
    }
    let off = (header.vox_offset as usize).max(HEADER_SIZE);
    let ext = extension_geometry(&bytes, header.little_endian, off);
    let data = bytes.get(off..).unwrap_or_default().to_vec();
    Ok((header, data, ext))
}

/// Header geometry, refined by the extension when the two agree.
fn resolve_geometry(h: &NiftiHeader, ext: Option<Geometry>) -> Result<Geometry> {
    let g = h.geometry()?;
    Ok(match ext {
        Some(e) if e.approx_eq(&g, EXTENSION_AGREEMENT) => e,
        Some(_) => {
            log::warn!("geometry extension disagrees with the header affine; ignoring it");
            g
        }
        None => g,
    })
}

/// Extension block (esize, ecode, payload padded to 16 bytes) carrying `g`.
fn geometry_extension(g: &Geometry) -> Vec<u8> {
    let dir: Vec<f64> = g.direction.iter().copied().collect();
    let body = serde_json::json!({
        "dims": g.dims,
        "spacing": g.spacing,
        "origin": g.origin,
        "direction": dir,
    });
    let mut payload = format!("{GEOMETRY_TAG}{body}").into_bytes();
    payload.push(0);
    while (payload.len() + 8) % 16 != 0 {
        payload.push(0);
    }
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&((payload.len() + 8) as i32).to_le_bytes());
    out.extend_from_slice(&ECODE_COMMENT.to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Scans the extensions between the header and `end` for our geometry comment.
fn extension_geometry(bytes: &[u8], le: bool, end: usize) -> Option<Geometry> {
    if bytes.get(HEADER_SIZE).copied().unwrap_or(0) == 0 {
        return None;
    }
    let end = end.min(bytes.len());
    let word = |off: usize| -> Option<i32> {
        let b: [u8; 4] = bytes.get(off..off + 4)?.try_into().ok()?;
        Some(if le { i32::from_le_bytes(b) } else { i32::from_be_bytes(b) })
    };
    let mut off = VOX_OFFSET;
    while off + 8 <= end {
        let size = word(off)?;
        let code = word(off + 4)?;
        if size < 16 || size % 16 != 0 || off + size as usize > end {
            return None;
        }
        let payload = &bytes[off + 8..off + size as usize];
        if code == ECODE_COMMENT && payload.starts_with(GEOMETRY_TAG.as_bytes()) {
            let text = std::str::from_utf8(&payload[GEOMETRY_TAG.len()..]).ok()?;
            let v: serde_json::Value = serde_json::from_str(text.trim_end_matches('\0')).ok()?;
            let take = |k: &str| -> Option<Vec<f64>> {
                v[k].as_array()?.iter().map(|x| x.as_f64()).collect()
            };
            let dims: Vec<usize> = v["dims"]
                .as_array()?
                .iter()
                .map(|x| x.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()?;
            let (spacing, origin, dir) = (take("spacing")?, take("origin")?, take("direction")?);
            if dims.len() != 3 || spacing.len() != 3 || origin.len() != 3 || dir.len() != 9 {
                return None;
            }
            return Geometry::new(
                [dims[0], dims[1], dims[2]],
                [spacing[0], spacing[1], spacing[2]],
                [origin[0], origin[1], origin[2]],
                Matrix3::from_column_slice(&dir),
            )
            .ok();
        }
        off += size as usize;
    }
    None
}

fn img_path_for(hdr: &Path) -> PathBuf {
    let s = hdr.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else if let Some(stem) = s.strip_suffix(".hdr") {
        PathBuf::from(format!("{stem}.img"))
    } else {
        hdr.with_extension("img")
    }
}

fn apply_scaling(h: &NiftiHeader, data: &mut [f64]) {
    if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        let slope = h.scl_slope as f64;
        let inter = h.scl_inter as f64;
        if slope != 1.0 || inter != 0.0 {
            data.iter_mut().for_each(|v| *v = *v * slope + inter);
        }
    }
}

/// Reads a scalar NIfTI-1 volume as an intensity image.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let (h, raw, ext) = load(path)?;
    if h.dim[0] > 3 && h.dim[4..=h.dim[0] as usize].iter().any(|&d| d > 1) {
        return Err(Error::MalformedHeader(format!(
            "expected a scalar 3D volume, got dim {:?}",
            h.dim
        )));
    }
    let geometry = resolve_geometry(&h, ext)?;
    let mut data = decode_samples(&h, &raw, geometry.len())?;
    apply_scaling(&h, &mut data);
    ImageVolume::new(geometry, data, VolumeKind::Intensity)
}

/// Reads a label volume and binarizes it with `value > 0.5`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let vol = read_nifti(path.as_ref())?;
    if vol.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        log::warn!(
            "{}: mask has values outside {{0, 1}}; binarizing with value > 0.5",
            path.as_ref().display()
        );
    }
    let bits: Vec<bool> = vol.data().iter().map(|&v| v > 0.5).collect();
    ImageVolume::mask_from_bools(vol.geometry().clone(), &bits)
}

fn write_bytes(path: &Path, geometry: &Geometry, header: &NiftiHeader, payload: &[u8]) -> Result<()> {
    let ext = geometry_extension(geometry);
    let mut header = header.clone();
    header.vox_offset = (VOX_OFFSET + ext.len()) as f32;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.to_string_lossy().ends_with(".gz");
    let mut sink: Box<dyn Write> = if gz {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    let mut write = || -> std::io::Result<()> {
        sink.write_all(&header.to_bytes())?;
        sink.write_all(&[1, 0, 0, 0])?;
        sink.write_all(&ext)?;
        sink.write_all(payload)?;
        sink.flush()
    };
    write().map_err(|e| Error::io(path, e))?;
    drop(sink);
    Ok(())
}

/// Writes float64 for intensities and uint8 for masks; gzip iff the path ends in `.gz`.
pub fn write_nifti(vol: &ImageVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (datatype, payload) = match vol.kind() {
        VolumeKind::Mask => (
            DT_UINT8,
            vol.data().iter().map(|&v| if v > 0.5 { 1u8 } else { 0 }).collect::<Vec<u8>>(),
        ),
        VolumeKind::Intensity => (
            DT_FLOAT64,
            vol.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    };
    let header = NiftiHeader::for_geometry(vol.geometry(), datatype);
    write_bytes(path, vol.geometry(), &header, &payload)
}

/// Writes a displacement field as a 5D vector volume (dim[5] = 3), float64,
/// components stored as three consecutive x-fastest blocks.
pub fn write_deformation_field(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    let mut header = NiftiHeader::for_geometry(field.geometry(), DT_FLOAT64);
    header.dim[0] = 5;
    header.dim[4] = 1;
    header.dim[5] = 3;
    header.intent_code = INTENT_VECTOR;
    let disp = field.displacements();
    let mut payload = Vec::with_capacity(disp.len() * 24);
    for c in 0..3 {
        for u in disp {
            payload.extend_from_slice(&u[c].to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), field.geometry(), &header, &payload)
}

pub fn read_deformation_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    let (h, raw, ext) = load(path)?;
    if h.dim[0] != 5 || h.dim[4] != 1 || h.dim[5] != 3 {
        return Err(Error::MalformedField(format!(
            "expected dim[0]=5, dim[4]=1, dim[5]=3, got {:?}",
            h.dim
        )));
    }
    let geometry = resolve_geometry(&h, ext)?;
    let n = geometry.len();
    let mut data = decode_samples(&h, &raw, 3 * n)?;
    apply_scaling(&h, &mut data);
    let disp = (0..n)
        .map(|l| Vector3::new(data[l], data[n + l], data[2 * n + l]))
        .collect();
    DeformationField::new(geometry, disp)
}
