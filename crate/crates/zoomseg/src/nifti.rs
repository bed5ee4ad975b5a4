//! NIfTI-1 single-file volumes, optionally gzip-compressed.
//!
//! Only 3D scalar data of type uint8, int16, float32 or float64 is handled.
//! Orientation matrices are ignored; spacing comes from `pixdim[1..=3]` and
//! voxels keep their stored order (x fastest). The writer always produces
//! little-endian `n+1` files with data at byte 352. See `docs/nifti-subset.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};
use zoomseg_core::volume::{binarize, Mask, Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("input too short for a NIfTI-1 header ({0} bytes)")]
    Truncated(usize),
    #[error("sizeof_hdr is not 348 in either byte order")]
    CorruptHeader,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("inconsistent header: {0}")]
    Inconsistent(String),
    #[error("only 3D volumes are supported, got dim {0:?}")]
    UnsupportedDimensions([i16; 8]),
    #[error("data block holds {got} bytes, expected {expected}")]
    ShortRead { expected: usize, got: usize },
    #[error("refusing lossy write: {0}")]
    LossyWriteRefused(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, NiftiError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        })
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::U8 => 8,
            Datatype::I16 => 16,
            Datatype::F32 => 32,
            Datatype::F64 => 64,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "uint8" | "u8" => Some(Datatype::U8),
            "int16" | "i16" => Some(Datatype::I16),
            "float32" | "f32" => Some(Datatype::F32),
            "float64" | "f64" => Some(Datatype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

/// The header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub magic: [u8; 4],
    pub byte_order: ByteOrder,
}

impl NiftiHeader {
    /// Header for a little-endian single-file volume.
    pub fn for_volume(extents: [usize; 3], spacing: [f64; 3], datatype: Datatype) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        for a in 0..3 {
            dim[a + 1] = extents[a] as i16;
            pixdim[a + 1] = spacing[a] as f32;
        }
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype,
            bitpix: datatype.bitpix(),
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: "zoomseg".into(),
            magic: *b"n+1\0",
            byte_order: ByteOrder::Little,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        [1, 2, 3].map(|a| self.dim[a] as usize)
    }

    pub fn spacing(&self) -> [f64; 3] {
        [1, 2, 3].map(|a| self.pixdim[a] as f64)
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    /// Whether stored values must go through `slope * raw + inter`.
    pub fn scaled(&self) -> bool {
        self.scl_slope != 0.0 && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    /// Pair files (`ni1`) keep their data in a separate `.img` file.
    pub fn is_pair(&self) -> bool {
        &self.magic == b"ni1\0"
    }
}

struct Fields<'a> {
    b: &'a [u8],
    order: ByteOrder,
}

impl Fields<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.b[at..at + N].try_into().expect("in bounds")
    }

    fn i16(&self, at: usize) -> i16 {
        match self.order {
            ByteOrder::Little => i16::from_le_bytes(self.arr(at)),
            ByteOrder::Big => i16::from_be_bytes(self.arr(at)),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        match self.order {
            ByteOrder::Little => i32::from_le_bytes(self.arr(at)),
            ByteOrder::Big => i32::from_be_bytes(self.arr(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

/// Decodes and validates the first 348 bytes. The byte order is whichever
/// makes `sizeof_hdr` equal 348.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated(bytes.len()));
    }
    let order = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        ByteOrder::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        ByteOrder::Big
    } else {
        return Err(NiftiError::CorruptHeader);
    };
    let f = Fields { b: bytes, order };
    let magic: [u8; 4] = f.arr(344);
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let datatype = Datatype::from_code(f.i16(70))?;
    let bitpix = f.i16(72);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::Inconsistent(format!("bitpix {bitpix} for datatype {}", datatype.code())));
    }
    let dim: [i16; 8] = std::array::from_fn(|i| f.i16(40 + 2 * i));
    let rank = dim[0];
    let trailing_ones = (4..=7).all(|i| i > rank as usize || dim[i] == 1);
    if !(1..=7).contains(&rank) || rank < 3 || !trailing_ones || dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::UnsupportedDimensions(dim));
    }
    let pixdim: [f32; 8] = std::array::from_fn(|i| f.f32(76 + 4 * i));
    if pixdim[1..4].iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(NiftiError::Inconsistent(format!("pixdim {:?}", &pixdim[1..4])));
    }
    let descrip_raw = &bytes[148..228];
    let end = descrip_raw.iter().position(|&c| c == 0).unwrap_or(80);
    Ok(NiftiHeader {
        sizeof_hdr: 348,
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset: f.f32(108),
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        xyzt_units: bytes[123],
        descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
        magic,
        byte_order: order,
    })
}

/// Little-endian 348-byte encoding; unlisted fields are zero.
pub fn encode_header(h: &NiftiHeader) -> [u8; HEADER_SIZE] {
    let mut b = [0u8; HEADER_SIZE];
    let mut put = |at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
    put(0, &h.sizeof_hdr.to_le_bytes());
    put(38, b"r");
    for (i, d) in h.dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    put(70, &h.datatype.code().to_le_bytes());
    put(72, &h.bitpix.to_le_bytes());
    for (i, p) in h.pixdim.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &h.vox_offset.to_le_bytes());
    put(112, &h.scl_slope.to_le_bytes());
    put(116, &h.scl_inter.to_le_bytes());
    put(123, &[h.xyzt_units]);
    let d = h.descrip.as_bytes();
    put(148, &d[..d.len().min(79)]);
    put(344, &h.magic);
    b
}

fn gunzip_if_needed(bytes: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn decode_data(h: &NiftiHeader, data: &[u8]) -> Result<Vec<f64>> {
    let n = h.voxel_count();
    let width = h.datatype.bytes();
    let expected = n * width;
    if data.len() < expected {
        return Err(NiftiError::ShortRead { expected, got: data.len() });
    }
    let big = h.byte_order == ByteOrder::Big;
    let raw = data[..expected].chunks_exact(width).map(|c| -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let a = c.try_into().expect("chunk width");
                (if big { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match h.datatype {
            Datatype::U8 => c[0] as f64,
            Datatype::I16 => num!(i16),
            Datatype::F32 => num!(f32),
            Datatype::F64 => num!(f64),
        }
    });
    Ok(if h.scaled() {
        let (s, i) = (h.scl_slope as f64, h.scl_inter as f64);
        raw.map(|v| s * v + i).collect()
    } else {
        raw.collect()
    })
}

/// Decodes a complete single-file image, gzip-compressed or not.
pub fn decode_volume(bytes: Vec<u8>) -> Result<Volume> {
    let bytes = gunzip_if_needed(bytes).map_err(|source| NiftiError::Io { path: PathBuf::from("<memory>"), source })?;
    let h = parse_header(&bytes)?;
    if h.is_pair() {
        return Err(NiftiError::Inconsistent("pair header without its image file".into()));
    }
    let offset = h.vox_offset as usize;
    let data = bytes.get(offset..).unwrap_or(&[]);
    Ok(Volume::new(h.extents(), h.spacing(), decode_data(&h, data)?)?)
}

fn img_sibling(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    for (hdr, img) in [(".hdr.gz", ".img.gz"), (".hdr", ".img")] {
        if let Some(stem) = name.strip_suffix(hdr) {
            return Some(path.with_file_name(format!("{stem}{img}")));
        }
    }
    None
}

/// Reads a `.nii`, `.nii.gz`, or an `ni1` header with its `.img` file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bytes = gunzip_if_needed(bytes).map_err(io_err(path))?;
    let h = parse_header(&bytes)?;
    if !h.is_pair() {
        return decode_volume(bytes);
    }
    let img = img_sibling(path).ok_or_else(|| NiftiError::Inconsistent("ni1 header without .hdr suffix".into()))?;
    let data = gunzip_if_needed(fs::read(&img).map_err(io_err(&img))?).map_err(io_err(&img))?;
    let offset = h.vox_offset as usize;
    let data = data.get(offset..).unwrap_or(&[]);
    Ok(Volume::new(h.extents(), h.spacing(), decode_data(&h, data)?)?)
}

/// Reads any supported image and binarizes it at 0.5.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(binarize(&read_volume(path)?, 0.5))
}

/// Encodes `v` as a little-endian `n+1` image.
///
/// Integer types accept only integral in-range values unless `quantize` is
/// set, in which case values are rounded to nearest (still range-checked).
pub fn encode_volume(v: &Volume, datatype: Datatype, quantize: bool) -> Result<Vec<u8>> {
    let h = NiftiHeader::for_volume(v.extents(), v.spacing(), datatype);
    if v.extents().iter().any(|&e| e > i16::MAX as usize) {
        return Err(NiftiError::Inconsistent(format!("extents {:?} exceed the header range", v.extents())));
    }
    let mut out = Vec::with_capacity(DATA_OFFSET + v.len() * datatype.bytes());
    out.extend_from_slice(&encode_header(&h));
    out.extend_from_slice(&[0u8; 4]);
    let integral = |x: f64, lo: f64, hi: f64| -> Result<f64> {
        let r = if quantize { x.round() } else { x };
        if r.is_finite() && r.fract() == 0.0 && r >= lo && r <= hi {
            Ok(r)
        } else {
            Err(NiftiError::LossyWriteRefused(format!("value {x} as {datatype:?}")))
        }
    };
    for &x in v.data() {
        match datatype {
            Datatype::U8 => out.push(integral(x, 0.0, 255.0)? as u8),
            Datatype::I16 => out.extend_from_slice(&(integral(x, i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes()),
            Datatype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Datatype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    Ok(out)
}

fn wants_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    if wants_gzip(path) {
        // Zero mtime and no file name keep the output reproducible.
        let mut enc: GzEncoder<fs::File> = GzBuilder::new().mtime(0).write(file, Compression::default());
        enc.write_all(bytes).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(io_err(path))?;
    }
    Ok(())
}

/// Writes `v`; a `.gz` suffix selects gzip compression.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v, datatype, false)?)
}

/// Like [`write_volume`] but rounds values for integer datatypes.
pub fn write_volume_quantized(v: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v, datatype, true)?)
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&m.to_volume(), path, Datatype::U8)
}
