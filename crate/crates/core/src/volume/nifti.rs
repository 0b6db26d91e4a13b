//! NIfTI-1 subset reader/writer.
//!
//! Supported: single-file form (magic "n+1\0"), datatypes int16 (4),
//! float32 (16), float64 (64), dim[0] in {3,4}, scl_slope/scl_inter scaling,
//! vox_offset, little- or big-endian headers (detected via the dim[0] in
//! [1,7] heuristic). Deliberately out of scope: two-file form, extensions,
//! qform/sform reorientation, NIfTI-2.

use crate::error::{Error, Result};
use crate::volume::Volume4D;

pub const HEADER_SIZE: usize = 348;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl<'a> Reader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }
    fn i32_at(&self, off: usize) -> i32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
    fn f64_at(&self, off: usize) -> f64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.bytes[off..off + 8]);
        match self.endian {
            Endian::Little => f64::from_le_bytes(b),
            Endian::Big => f64::from_be_bytes(b),
        }
    }
}

/// Parse a single-file NIfTI-1 byte stream into a [`Volume4D`].
pub fn parse_nifti1(bytes: &[u8]) -> Result<Volume4D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "truncated header: expected at least {HEADER_SIZE} bytes, got {}",
            bytes.len()
        )));
    }

    // Endianness heuristic: dim[0] must land in [1,7] in the true byte order.
    let dim0_le = i16::from_le_bytes([bytes[40], bytes[41]]);
    let endian = if (1..=7).contains(&dim0_le) {
        Endian::Little
    } else {
        let dim0_be = i16::from_be_bytes([bytes[40], bytes[41]]);
        if (1..=7).contains(&dim0_be) {
            Endian::Big
        } else {
            return Err(Error::Format(format!(
                "dim[0] = {dim0_le} (LE) is outside [1,7] in either byte order"
            )));
        }
    };
    let r = Reader { bytes, endian };

    let magic = &bytes[344..348];
    if magic == MAGIC_PAIR {
        return Err(Error::Unsupported(
            "two-file NIfTI-1 (magic \"ni1\\0\"); only the single-file form is supported".into(),
        ));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }

    let sizeof_hdr = r.i32_at(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr = {sizeof_hdr}, expected {HEADER_SIZE}"
        )));
    }

    let ndim = r.i16_at(40);
    if ndim != 3 && ndim != 4 {
        return Err(Error::Unsupported(format!(
            "dim[0] = {ndim}; only 3-d and 4-d volumes are supported"
        )));
    }

    let dim = |i: usize| r.i16_at(40 + 2 * i);
    let (xd, yd, zd) = (dim(1), dim(2), dim(3));
    let td = if ndim == 4 { dim(4) } else { 1 };
    if xd <= 0 || yd <= 0 || zd <= 0 || td <= 0 {
        return Err(Error::Format(format!(
            "non-positive dims ({td}, {xd}, {yd}, {zd})"
        )));
    }
    let (t, x, y, z) = (td as usize, xd as usize, yd as usize, zd as usize);

    let datatype = r.i16_at(70);
    let bytes_per = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Unsupported(format!(
                "datatype code {other}; supported codes are 4 (int16), 16 (float32), 64 (float64)"
            )))
        }
    };

    let pixdim = |i: usize| r.f32_at(76 + 4 * i) as f64;
    let spacing = (pixdim(1), pixdim(2), pixdim(3));
    let mut tr = pixdim(4);
    if t == 1 && tr <= 0.0 {
        tr = 1.0; // 3-d files routinely leave pixdim[4] at 0
    }
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 || tr <= 0.0 {
        return Err(Error::Format(format!(
            "non-positive pixdim: spacing {spacing:?}, TR {tr}"
        )));
    }

    let vox_offset = r.f32_at(108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let off = vox_offset as usize;

    let scl_slope = r.f32_at(112);
    let scl_inter = r.f32_at(116);

    let nvox = t * x * y * z;
    let need = off + nvox * bytes_per;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: expected {need} bytes, got {}",
            bytes.len()
        )));
    }

    let mut data = Vec::with_capacity(nvox);
    for i in 0..nvox {
        let p = off + i * bytes_per;
        let raw = match datatype {
            DT_INT16 => r.i16_at(p) as f32,
            DT_FLOAT32 => r.f32_at(p),
            _ => r.f64_at(p) as f32,
        };
        let v = if scl_slope != 0.0 {
            raw * scl_slope + scl_inter
        } else {
            raw
        };
        data.push(v);
    }
    // Disk order is x-fastest, then y, z, t — identical to Volume4D layout.
    Volume4D::new((t, x, y, z), spacing, tr, data)
}

/// Serialize as little-endian single-file float32 NIfTI-1 with vox_offset 352.
pub fn write_nifti1(v: &Volume4D) -> Vec<u8> {
    let (t, x, y, z) = v.dims;
    let mut h = vec![0u8; 352];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[39] = b'r'; // regular
    put_i16(&mut h, 40, 4); // dim[0]
    put_i16(&mut h, 42, x as i16);
    put_i16(&mut h, 44, y as i16);
    put_i16(&mut h, 46, z as i16);
    put_i16(&mut h, 48, t as i16);
    for i in 5..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32); // bitpix
    put_f32(&mut h, 76, 1.0); // pixdim[0] (qfac)
    put_f32(&mut h, 80, v.spacing_mm.0 as f32);
    put_f32(&mut h, 84, v.spacing_mm.1 as f32);
    put_f32(&mut h, 88, v.spacing_mm.2 as f32);
    put_f32(&mut h, 92, v.tr_seconds as f32);
    put_f32(&mut h, 108, 352.0); // vox_offset
    put_f32(&mut h, 112, 0.0); // scl_slope = 0: no scaling
    put_f32(&mut h, 116, 0.0);
    h[123] = 2 | 8; // xyzt_units: mm + seconds
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    // 348..352: extension flag, all zero

    let mut out = h;
    out.reserve(v.data.len() * 4);
    for &val in &v.data {
        out.extend_from_slice(&val.to_le_bytes());
    }
    out
}
