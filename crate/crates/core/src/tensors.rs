//! Dense containers and the `NDT1` tensor file format.
//!
//! A video of `p` frames of `height × width` pixels is held as an `n × p`
//! Casorati matrix with `n = height·width`: pixels run down the rows, time runs
//! across the columns. Each frame is vectorized row-major into its column.
//!
//! On disk a tensor is
//!
//! ```text
//! "NDT1" | u8 rank | rank × u32 LE dims | prod(dims) × f32 LE payload
//! ```
//!
//! with no padding. A frame stack is written with dims `(p, height, width)`,
//! which makes the payload the Casorati matrix in column-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"NDT1";

/// Pixels × frames matrix of vectorized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CasoratiMatrix {
    values: DMatrix<f64>,
    frame_height: usize,
    frame_width: usize,
}

impl CasoratiMatrix {
    pub fn new(values: DMatrix<f64>, frame_height: usize, frame_width: usize) -> Result<Self> {
        if frame_height == 0 || frame_width == 0 {
            return Err(Error::shape(format!(
                "frame dimensions must be positive, got {frame_height}x{frame_width}"
            )));
        }
        if values.nrows() != frame_height * frame_width {
            return Err(Error::shape(format!(
                "{} rows cannot hold {frame_height}x{frame_width} frames",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::shape("a Casorati matrix needs at least one frame"));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                None,
                format!(
                    "non-finite entry at row {}, column {}",
                    idx % values.nrows(),
                    idx / values.nrows()
                ),
            ));
        }
        Ok(Self {
            values,
            frame_height,
            frame_width,
        })
    }

    pub fn zeros(frame_height: usize, frame_width: usize, frames: usize) -> Result<Self> {
        Self::new(
            DMatrix::zeros(frame_height * frame_width, frames),
            frame_height,
            frame_width,
        )
    }

    /// Wraps `values` with the frame shape of `self`.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, self.frame_height, self.frame_width)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Pixels per frame.
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Number of frames.
    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_height(&self) -> usize {
        self.frame_height
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            values: self.values.column(t).iter().copied().collect(),
            height: self.frame_height,
            width: self.frame_width,
        }
    }

    pub fn same_shape(&self, other: &CasoratiMatrix) -> bool {
        self.values.shape() == other.values.shape()
            && self.frame_height == other.frame_height
            && self.frame_width == other.frame_width
    }

    pub(crate) fn check_same_shape(&self, other: &CasoratiMatrix, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} ({}x{} frames) vs {}x{} ({}x{} frames)",
                self.n(),
                self.p(),
                self.frame_height,
                self.frame_width,
                other.n(),
                other.p(),
                other.frame_height,
                other.frame_width
            )))
        }
    }
}

/// One vectorized (row-major) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl Frame {
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "frame dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "frame of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(None, format!("non-finite pixel {idx}")));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }

    /// A `1 × len` frame, convenient for low-dimensional experiments.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        Self::new(values, 1, len)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: vec![0.0; height * width],
            height,
            width,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// New frame of the same shape holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiLabel {
    Ventricle,
    Septum,
    Other,
}

/// Boolean pixel mask for a region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    mask: Vec<bool>,
    label: RoiLabel,
}

impl RoiMask {
    pub fn new(mask: Vec<bool>, label: RoiLabel) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::argument(format!(
                "{label:?} mask must select at least one pixel"
            )));
        }
        Ok(Self { mask, label })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn label(&self) -> RoiLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn intersects(&self, other: &RoiMask) -> bool {
        self.mask.iter().zip(&other.mask).any(|(&a, &b)| a && b)
    }

    /// Mask from a tensor: any non-zero entry selects the pixel.
    pub fn from_tensor(tensor: &Tensor, label: RoiLabel) -> Result<Self> {
        Self::new(tensor.data.iter().map(|&v| v != 0.0).collect(), label)
    }

    /// `(height, width)` tensor of 0/1 values.
    pub fn to_tensor(&self, height: usize, width: usize) -> Result<Tensor> {
        if height * width != self.mask.len() {
            return Err(Error::shape(format!(
                "mask of {} pixels cannot be shaped {height}x{width}",
                self.mask.len()
            )));
        }
        Tensor::new(
            vec![height, width],
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Stacks equally shaped frames as the columns of a Casorati matrix.
pub fn stack_frames(frames: &[Frame]) -> Result<CasoratiMatrix> {
    let first = frames
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty frame sequence"))?;
    let (h, w) = (first.height, first.width);
    if let Some((t, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.height != h || f.width != w)
    {
        return Err(Error::shape(format!(
            "frame {t} is {}x{}, expected {h}x{w}",
            f.height, f.width
        )));
    }
    let n = h * w;
    let values = DMatrix::from_iterator(
        n,
        frames.len(),
        frames.iter().flat_map(|f| f.values.iter().copied()),
    );
    CasoratiMatrix::new(values, h, w)
}

pub fn unstack_frames(m: &CasoratiMatrix) -> Vec<Frame> {
    (0..m.p()).map(|t| m.frame(t)).collect()
}

/// Raw tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::shape(format!("rank {} exceeds 255", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::shape(format!("dimension {d} exceeds u32")));
        }
        let expected = element_count(&dims)
            .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// `(p, height, width)` tensor of a Casorati matrix.
    pub fn from_casorati(m: &CasoratiMatrix) -> Self {
        Self {
            dims: vec![m.p(), m.frame_height(), m.frame_width()],
            data: m.values().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Interprets a rank-3 `(p, h, w)` or rank-2 `(h, w)` tensor as frames.
    pub fn to_casorati(&self) -> Result<CasoratiMatrix> {
        let (p, h, w) = match self.dims.as_slice() {
            &[p, h, w] => (p, h, w),
            &[h, w] => (1, h, w),
            &[n] => (1, 1, n),
            dims => {
                return Err(Error::shape(format!(
                    "expected a (frames, height, width) tensor, got dims {dims:?}"
                )))
            }
        };
        let values = DMatrix::from_iterator(h * w, p, self.data.iter().map(|&v| v as f64));
        CasoratiMatrix::new(values, h, w)
    }

    pub fn to_frames(&self) -> Result<Vec<Frame>> {
        Ok(unstack_frames(&self.to_casorati()?))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(
                0,
                format!("file is {} bytes, too short for the magic", bytes.len()),
            ));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"NDT1\"", &bytes[..4]),
            ));
        }
        let rank = *bytes
            .get(4)
            .ok_or_else(|| Error::format(4, "missing rank byte"))? as usize;
        let header_len = 5 + 4 * rank;
        if bytes.len() < header_len {
            return Err(Error::format(
                bytes.len() as u64,
                format!("header truncated: rank {rank} needs {header_len} bytes"),
            ));
        }
        let dims: Vec<usize> = bytes[5..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = element_count(&dims)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(5, format!("dimension overflow for dims {dims:?}")))?;
        let expected = count * 4;
        let actual = bytes.len() - header_len;
        if actual != expected {
            let what = if actual < expected {
                "truncated payload"
            } else {
                "trailing bytes after payload"
            };
            return Err(Error::format(
                bytes.len().min(header_len + expected) as u64,
                format!("{what}: expected {expected} payload bytes, found {actual}"),
            ));
        }
        let data = bytes[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::decode(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&tensor.encode())?;
    Ok(())
}

pub fn read_casorati(path: impl AsRef<Path>) -> Result<CasoratiMatrix> {
    read_tensor(path)?.to_casorati()
}

pub fn write_casorati(path: impl AsRef<Path>, m: &CasoratiMatrix) -> Result<()> {
    write_tensor(path, &Tensor::from_casorati(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded_rng};
    use proptest::prelude::*;

    fn random_frames(seed: u64, h: usize, w: usize, p: usize) -> Vec<Frame> {
        let m = normal_matrix(&mut seeded_rng(seed), h * w, p);
        (0..p)
            .map(|t| Frame::new(m.column(t).iter().copied().collect(), h, w).unwrap())
            .collect()
    }

    #[test]
    fn single_frame_stacks_to_one_column() {
        let f = Frame::new(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let m = stack_frames(std::slice::from_ref(&f)).unwrap();
        assert_eq!(m.values().shape(), (4, 1));
        assert_eq!(m.values().column(0).as_slice(), f.values());
        assert_eq!(unstack_frames(&m), vec![f]);
    }

    #[test]
    fn seven_full_size_frames() {
        let frames: Vec<Frame> = (0..7).map(|_| Frame::zeros(256, 256)).collect();
        let m = stack_frames(&frames).unwrap();
        assert_eq!((m.n(), m.p()), (65536, 7));
        let back = unstack_frames(&m);
        assert_eq!(back.len(), 7);
        assert!(back.iter().all(|f| f.height() == 256 && f.width() == 256));
    }

    #[test]
    fn stack_rejects_mismatched_and_empty() {
        let frames = vec![Frame::zeros(2, 2), Frame::zeros(2, 3)];
        assert!(matches!(stack_frames(&frames), Err(Error::Shape(_))));
        assert!(matches!(stack_frames(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn casorati_rejects_non_finite() {
        let mut v = DMatrix::zeros(4, 2);
        v[(1, 1)] = f64::NAN;
        assert!(CasoratiMatrix::new(v, 2, 2).is_err());
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let frames = random_frames(3, 4, 4, 4);
        let m = stack_frames(&frames).unwrap();
        let t = Tensor::from_casorati(&m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndt");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims, vec![4, 4, 4]);
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn header_dims_describe_frame_stack() {
        let t = Tensor::new(vec![60, 256, 256], vec![0.0; 60 * 256 * 256]).unwrap();
        let frames = Tensor::decode(&t.encode()).unwrap().to_frames().unwrap();
        assert_eq!(frames.len(), 60);
        assert!(frames.iter().all(|f| f.len() == 65536));
    }

    #[test]
    fn layout_is_frame_major_row_major() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let m = t.to_casorati().unwrap();
        // frame 1, row 1, col 0
        assert_eq!(m.frame(1).values()[3], 9.0);
        assert_eq!(m.values()[(3, 1)], 9.0);
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut bytes = t.encode();
        bytes.truncate(bytes.len() - 5);
        let err = Tensor::decode(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 24 payload bytes, found 19"), "{msg}");
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len() as u64));
    }

    #[test]
    fn bad_magic_and_overflow() {
        let err = Tensor::decode(b"NDT2\x01\x01\x00\x00\x00").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));

        let mut bytes = b"NDT1\x03".to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = Tensor::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");
    }

    #[test]
    fn mask_tensor_round_trip() {
        let mask = RoiMask::new(vec![false, true, true, false], RoiLabel::Septum).unwrap();
        let t = mask.to_tensor(2, 2).unwrap();
        assert_eq!(RoiMask::from_tensor(&t, RoiLabel::Septum).unwrap(), mask);
        assert!(RoiMask::new(vec![false; 3], RoiLabel::Other).is_err());
    }

    proptest! {
        #[test]
        fn stack_unstack_identity(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, p in 1usize..6) {
            let frames = random_frames(seed, h, w, p);
            let m = stack_frames(&frames).unwrap();
            prop_assert_eq!(&unstack_frames(&m), &frames);
            prop_assert_eq!(stack_frames(&unstack_frames(&m)).unwrap(), m);
        }

        #[test]
        fn encode_decode_preserves_bits(data in proptest::collection::vec(any::<f32>(), 0..40)) {
            let t = Tensor::new(vec![data.len()], data).unwrap();
            let back = Tensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
