//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Little-endian only; payload types uint8 (labels), int16 and float32
//! (intensities). The header is 348 bytes followed by a 4-byte empty extension
//! flag, so the payload always starts at byte 352.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Orientation, VoxelGrid};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

// header field offsets
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QUATERN: usize = 256;
const OFF_QOFFSET: usize = 268;
const OFF_SROW_X: usize = 280;
const OFF_SROW_Y: usize = 296;
const OFF_SROW_Z: usize = 312;
const OFF_MAGIC: usize = 344;

/// Decoded file content.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiVolume {
    Intensity(VoxelGrid),
    Labels(LabelVolume),
}

impl NiftiVolume {
    pub fn into_intensity(self) -> Result<VoxelGrid> {
        match self {
            NiftiVolume::Intensity(g) => Ok(g),
            NiftiVolume::Labels(l) => {
                let mut g = VoxelGrid::new(l.data().mapv(f32::from), l.spacing())?;
                g.orientation = l.orientation;
                Ok(g)
            }
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            NiftiVolume::Labels(l) => Ok(l),
            NiftiVolume::Intensity(_) => {
                Err(Error::Nifti("expected a uint8 label volume, found an intensity volume".into()))
            }
        }
    }
}

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn wr_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn wr_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn rd_f32x<const N: usize>(b: &[u8], off: usize) -> [f32; N] {
    std::array::from_fn(|i| rd_f32(b, off + 4 * i))
}

fn read_orientation(h: &[u8]) -> Orientation {
    Orientation {
        qform_code: rd_i16(h, OFF_QFORM_CODE),
        sform_code: rd_i16(h, OFF_SFORM_CODE),
        qfac: rd_f32(h, OFF_PIXDIM),
        quatern: rd_f32x(h, OFF_QUATERN),
        qoffset: rd_f32x(h, OFF_QOFFSET),
        srow_x: rd_f32x(h, OFF_SROW_X),
        srow_y: rd_f32x(h, OFF_SROW_Y),
        srow_z: rd_f32x(h, OFF_SROW_Z),
    }
}

/// Decodes a complete `.nii` byte image.
pub fn decode(bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file is {} bytes, shorter than the {HEADER_SIZE}-byte header", bytes.len())));
    }
    let h = &bytes[..HEADER_SIZE];
    let sizeof_hdr = rd_i32(h, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(h[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(Error::Nifti("big-endian files are not supported".into()));
        }
        return Err(Error::Nifti(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &h[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(Error::Nifti(format!("bad magic {:?}, expected \"n+1\\0\"", &h[OFF_MAGIC..OFF_MAGIC + 4])));
    }
    let ndim = rd_i16(h, OFF_DIM);
    let dim: Vec<i16> = (1..=7).map(|i| rd_i16(h, OFF_DIM + 2 * i)).collect();
    if !(3..=7).contains(&ndim) || dim[3..(ndim as usize)].iter().any(|&d| d != 1) {
        return Err(Error::Nifti(format!(
            "only 3D volumes are supported (dim[0]={ndim}, dims={:?})",
            &dim[..ndim.clamp(0, 7) as usize]
        )));
    }
    if dim[..3].iter().any(|&d| d <= 0) {
        return Err(Error::Nifti(format!("non-positive spatial dims {:?}", &dim[..3])));
    }
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let pix: [f32; 3] = std::array::from_fn(|i| rd_f32(h, OFF_PIXDIM + 4 * (i + 1)));
    let spacing = [pix[2], pix[1], pix[0]];

    let datatype = rd_i16(h, OFF_DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    };
    let vox_offset = rd_f32(h, OFF_VOX_OFFSET);
    if vox_offset < VOX_OFFSET as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Nifti(format!("unsupported vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = nx * ny * nz;
    let expected = start + n * width;
    if bytes.len() != expected {
        return Err(Error::Nifti(format!("size mismatch: header implies {expected} bytes, file has {}", bytes.len())));
    }
    let payload = &bytes[start..];
    let shape = (nz, ny, nx);
    let orientation = read_orientation(h);

    let slope = rd_f32(h, OFF_SCL_SLOPE);
    let inter = rd_f32(h, OFF_SCL_INTER);
    let scaled = slope != 0.0 && (slope != 1.0 || inter != 0.0);
    let scale = |v: f32| if scaled { v * slope + inter } else { v };

    match datatype {
        DT_UINT8 => {
            let data = Array3::from_shape_vec(shape, payload.to_vec()).expect("shape checked");
            let mut l = LabelVolume::new(data, spacing)?;
            l.orientation = orientation;
            Ok(NiftiVolume::Labels(l))
        }
        DT_INT16 => {
            let vals = payload.chunks_exact(2).map(|c| scale(f32::from(i16::from_le_bytes([c[0], c[1]])))).collect();
            let mut g = VoxelGrid::new(Array3::from_shape_vec(shape, vals).expect("shape checked"), spacing)?;
            g.orientation = orientation;
            Ok(NiftiVolume::Intensity(g))
        }
        _ => {
            let vals: Vec<f32> =
                payload.chunks_exact(4).map(|c| scale(f32::from_le_bytes(c.try_into().unwrap()))).collect();
            if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::Nifti(format!("non-finite voxel at flat index {i}")));
            }
            let mut g = VoxelGrid::new(Array3::from_shape_vec(shape, vals).expect("shape checked"), spacing)?;
            g.orientation = orientation;
            Ok(NiftiVolume::Intensity(g))
        }
    }
}

fn header(
    dims: (usize, usize, usize),
    spacing: [f32; 3],
    datatype: i16,
    bitpix: i16,
    o: &Orientation,
) -> Result<Vec<u8>> {
    let (nz, ny, nx) = dims;
    for d in [nx, ny, nz] {
        if d > i16::MAX as usize {
            return Err(Error::Nifti(format!("dimension {d} exceeds the NIfTI-1 limit")));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    wr_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    wr_i16(&mut h, OFF_DIM, 3);
    wr_i16(&mut h, OFF_DIM + 2, nx as i16);
    wr_i16(&mut h, OFF_DIM + 4, ny as i16);
    wr_i16(&mut h, OFF_DIM + 6, nz as i16);
    for i in 4..8 {
        wr_i16(&mut h, OFF_DIM + 2 * i, 1);
    }
    wr_i16(&mut h, OFF_DATATYPE, datatype);
    wr_i16(&mut h, OFF_BITPIX, bitpix);
    wr_f32(&mut h, OFF_PIXDIM, o.qfac);
    wr_f32(&mut h, OFF_PIXDIM + 4, spacing[2]);
    wr_f32(&mut h, OFF_PIXDIM + 8, spacing[1]);
    wr_f32(&mut h, OFF_PIXDIM + 12, spacing[0]);
    wr_f32(&mut h, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    wr_f32(&mut h, OFF_SCL_SLOPE, 1.0);
    wr_f32(&mut h, OFF_SCL_INTER, 0.0);
    // millimetres
    h[OFF_XYZT_UNITS] = 2;
    wr_i16(&mut h, OFF_QFORM_CODE, o.qform_code);
    wr_i16(&mut h, OFF_SFORM_CODE, o.sform_code);
    for i in 0..3 {
        wr_f32(&mut h, OFF_QUATERN + 4 * i, o.quatern[i]);
        wr_f32(&mut h, OFF_QOFFSET + 4 * i, o.qoffset[i]);
    }
    for i in 0..4 {
        wr_f32(&mut h, OFF_SROW_X + 4 * i, o.srow_x[i]);
        wr_f32(&mut h, OFF_SROW_Y + 4 * i, o.srow_y[i]);
        wr_f32(&mut h, OFF_SROW_Z + 4 * i, o.srow_z[i]);
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    Ok(h)
}

pub fn encode_intensity(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut out = header(grid.dims(), grid.spacing(), DT_FLOAT32, 32, &grid.orientation)?;
    out.reserve(grid.len() * 4);
    for v in grid.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelVolume) -> Result<Vec<u8>> {
    let mut out = header(labels.dims(), labels.spacing(), DT_UINT8, 8, &labels.orientation)?;
    out.extend(labels.data().iter().copied());
    Ok(out)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(msg) => Error::Nifti(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_nifti(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_intensity(grid)?).map_err(|e| Error::io(path, e))
}

pub fn write_nifti_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_2x2x2() -> VoxelGrid {
        let data = Array3::from_shape_fn((2, 2, 2), |(z, y, x)| (z * 4 + y * 2 + x) as f32 - 3.5);
        VoxelGrid::new(data, [1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn golden_header_fields() {
        let bytes = encode_intensity(&grid_2x2x2()).unwrap();
        assert_eq!(bytes.len(), 352 + 8 * 4);
        assert_eq!(&bytes[0..4], &348i32.to_le_bytes());
        assert_eq!(&bytes[40..42], &3i16.to_le_bytes());
        for off in [42, 44, 46] {
            assert_eq!(&bytes[off..off + 2], &2i16.to_le_bytes());
        }
        assert_eq!(&bytes[70..72], &16i16.to_le_bytes());
        assert_eq!(&bytes[72..74], &32i16.to_le_bytes());
        // pixdim[1..3] is (x, y, z) = reversed (D, H, W) spacing
        assert_eq!(&bytes[80..84], &3.0f32.to_le_bytes());
        assert_eq!(&bytes[84..88], &2.0f32.to_le_bytes());
        assert_eq!(&bytes[88..92], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[108..112], &352.0f32.to_le_bytes());
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(&bytes[352..356], &(-3.5f32).to_le_bytes());
        let back = decode(&bytes).unwrap().into_intensity().unwrap();
        assert_eq!(back.spacing(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn deterministic_bytes_and_datatype_codes() {
        let g = grid_2x2x2();
        assert_eq!(encode_intensity(&g).unwrap(), encode_intensity(&g).unwrap());
        let l = LabelVolume::new(Array3::from_elem((2, 3, 4), 2), [1.0; 3]).unwrap();
        let lb = encode_labels(&l).unwrap();
        assert_eq!(rd_i16(&lb, OFF_DATATYPE), DT_UINT8);
        assert_eq!(rd_i16(&lb, OFF_DIM + 2), 4);
        assert_eq!(decode(&lb).unwrap().into_labels().unwrap(), l);
    }

    #[test]
    fn truncated_file_is_size_mismatch() {
        let bytes = encode_intensity(&grid_2x2x2()).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
        assert!(decode(&bytes[..100]).is_err());
    }

    #[test]
    fn bad_magic_and_datatype_rejected() {
        let mut bytes = encode_intensity(&grid_2x2x2()).unwrap();
        bytes[345] = b'i';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode_intensity(&grid_2x2x2()).unwrap();
        wr_i16(&mut bytes, OFF_DATATYPE, 64);
        assert!(decode(&bytes).unwrap_err().to_string().contains("datatype"));
    }

    #[test]
    fn int16_payload_decodes_to_intensity() {
        let g = grid_2x2x2();
        let mut bytes = header(g.dims(), g.spacing(), DT_INT16, 16, &Orientation::default()).unwrap();
        for v in [-2i16, -1, 0, 1, 2, 3, 4, 300] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let back = decode(&bytes).unwrap().into_intensity().unwrap();
        assert_eq!(back.data()[[1, 1, 1]], 300.0);
        assert_eq!(back.data()[[0, 0, 0]], -2.0);
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_intensity(&grid_2x2x2()).unwrap();
        bytes[352..356].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn orientation_written_back_verbatim() {
        let mut g = grid_2x2x2();
        g.orientation.sform_code = 1;
        g.orientation.qform_code = 2;
        g.orientation.srow_x = [-1.0, 0.0, 0.0, 90.0];
        g.orientation.quatern = [0.0, 1.0, 0.0];
        g.orientation.qfac = -1.0;
        let back = decode(&encode_intensity(&g).unwrap()).unwrap().into_intensity().unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let g = grid_2x2x2();
        write_nifti(&g, &p).unwrap();
        assert_eq!(read_nifti(&p).unwrap(), NiftiVolume::Intensity(g));
        assert!(matches!(read_nifti(dir.path().join("missing.nii")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn float_round_trip_is_bit_exact(
            d in 1usize..5, h in 1usize..5, w in 1usize..5,
            sp in proptest::array::uniform3(0.1f32..5.0),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((d, h, w), |_| rng.gen_range(-1e6f32..1e6));
            let g = VoxelGrid::new(data, sp).unwrap();
            let back = decode(&encode_intensity(&g).unwrap()).unwrap().into_intensity().unwrap();
            prop_assert_eq!(back.dims(), g.dims());
            prop_assert_eq!(back.spacing(), g.spacing());
            let a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn label_round_trip(codes in proptest::collection::vec(0u8..4, 24)) {
            let l = LabelVolume::new(Array3::from_shape_vec((2, 3, 4), codes).unwrap(), [0.5, 1.0, 1.5]).unwrap();
            prop_assert_eq!(decode(&encode_labels(&l).unwrap()).unwrap().into_labels().unwrap(), l);
        }
    }
}
