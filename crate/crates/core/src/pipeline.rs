//! Volume preparation and reconstruction around the network.
//!
//! A scan is resampled, normalized to `[-1, 1]`, cut into overlapping windows of
//! `window` slices along depth, replicated into three channels, inferred window by
//! window and finally recomposed by keeping each window's central slices (plus the
//! leading slices of the first window and the trailing slices of the last).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;

/// A single scalar scan, `(depth, height, width)`, width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    data: Vec<f32>,
    pub provenance: Option<String>,
}

/// Binary label grid with the same layout as [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    extents: [usize; 3],
    data: Vec<u8>,
}

fn voxel_count(extents: [usize; 3]) -> usize {
    extents.iter().product()
}

impl Volume {
    pub fn new(extents: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != voxel_count(extents) {
            return Err(Error::dim("voxel count", voxel_count(extents), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self {
            extents,
            data,
            provenance: None,
        })
    }

    pub fn from_fn(extents: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let [d, h, w] = extents;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            extents,
            data,
            provenance: None,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        let [_, eh, ew] = self.extents;
        self.data[(d * eh + h) * ew + w]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute_axes(&self, order: [usize; 3]) -> Result<Self> {
        let mut sorted = order;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return Err(Error::Contract(format!("{order:?} is not a permutation of the axes")));
        }
        let src = self.extents;
        let ext = [src[order[0]], src[order[1]], src[order[2]]];
        let out = Self::from_fn(ext, |a, b, c| {
            let mut idx = [0; 3];
            idx[order[0]] = a;
            idx[order[1]] = b;
            idx[order[2]] = c;
            self.get(idx[0], idx[1], idx[2])
        });
        Ok(Self {
            provenance: self.provenance.clone(),
            ..out
        })
    }

    /// As a `(1, 1, d, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new(&[1, 1, d, h, w], self.data.clone()).expect("volume extents")
    }
}

impl MaskVolume {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(extents) {
            return Err(Error::dim("voxel count", voxel_count(extents), data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Self { extents, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn positives(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Mask as `0.0 / 1.0` voxels.
    pub fn to_volume(&self) -> Volume {
        Volume {
            extents: self.extents,
            data: self.data.iter().map(|&v| v as f32).collect(),
            provenance: None,
        }
    }

    /// Nearest-neighbour resampling onto `target` extents (pixel-centre alignment).
    pub fn resample_nearest(&self, target: [usize; 3]) -> Self {
        let src = self.extents;
        let map = |o: usize, axis: usize| {
            let x = (o as f64 + 0.5) * src[axis] as f64 / target[axis] as f64;
            (x.floor() as usize).min(src[axis] - 1)
        };
        let [_, sh, sw] = src;
        let mut data = Vec::with_capacity(voxel_count(target));
        for d in 0..target[0] {
            for h in 0..target[1] {
                for w in 0..target[2] {
                    data.push(self.data[(map(d, 0) * sh + map(h, 1)) * sw + map(w, 2)]);
                }
            }
        }
        Self { extents: target, data }
    }
}

// Quadratic B-spline interpolation.

/// Pole of the quadratic B-spline interpolation prefilter.
const SPLINE_POLE: f64 = -0.171_572_875_253_809_9; // √8 − 3
/// Samples of antisymmetric extension on each side before prefiltering.
const SPLINE_MARGIN: usize = 24;

/// Sample `i` of the point-symmetric extension of `s` (exact for affine data).
fn extended(s: &[f64], i: isize) -> f64 {
    let n = s.len() as isize;
    if n == 1 {
        return s[0];
    }
    if i < 0 {
        2.0 * s[0] - extended(s, -i)
    } else if i >= n {
        2.0 * s[(n - 1) as usize] - extended(s, 2 * (n - 1) - i)
    } else {
        s[i as usize]
    }
}

/// Interpolation coefficients of the extended signal (mirror boundaries at its ends).
fn spline_coefficients(samples: &[f64]) -> Vec<f64> {
    let m = SPLINE_MARGIN as isize;
    let mut c: Vec<f64> = (-m..samples.len() as isize + m).map(|i| extended(samples, i)).collect();
    let n = c.len();
    let z = SPLINE_POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in &mut c {
        *v *= gain;
    }
    // Causal initialization, truncated sum over the mirrored signal.
    let horizon = n.min(40);
    let mut zn = z;
    let mut sum = c[0];
    for v in &c[1..horizon] {
        sum += zn * v;
        zn *= z;
    }
    c[0] = sum;
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
    c
}

/// Evaluates the quadratic spline with `coeffs` (offset by the margin) at `x`.
fn spline_eval(coeffs: &[f64], x: f64) -> f64 {
    let k = x.round();
    let t = x - k;
    let w = [0.5 * (0.5 - t) * (0.5 - t), 0.75 - t * t, 0.5 * (0.5 + t) * (0.5 + t)];
    let base = k as isize + SPLINE_MARGIN as isize - 1;
    let last = coeffs.len() as isize - 1;
    w.iter()
        .enumerate()
        .map(|(j, wj)| wj * coeffs[(base + j as isize).clamp(0, last) as usize])
        .sum()
}

fn resample_axis(line: &[f64], target: usize) -> Vec<f64> {
    let n = line.len();
    if n == target {
        return line.to_vec();
    }
    let coeffs = spline_coefficients(line);
    let scale = n as f64 / target as f64;
    (0..target)
        .map(|o| spline_eval(&coeffs, (o as f64 + 0.5) * scale - 0.5))
        .collect()
}

/// Separable quadratic B-spline resampling onto `target` extents.
///
/// Voxel centres are aligned (`x_in = (x_out + 0.5)·n_in/n_out − 0.5`) and the
/// signal is extended point-symmetrically beyond its ends, so constant and affine
/// volumes are reproduced.
pub fn resample(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::Geometry(format!("resample target {target:?} has an empty axis")));
    }
    let mut ext = v.extents;
    let mut data: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        if ext[axis] == target[axis] {
            continue;
        }
        let mut new_ext = ext;
        new_ext[axis] = target[axis];
        let stride: usize = ext[axis + 1..].iter().product();
        let outer: usize = ext[..axis].iter().product();
        let mut out = vec![0.0; voxel_count(new_ext)];
        let mut line = vec![0.0; ext[axis]];
        for o in 0..outer {
            for s in 0..stride {
                for (i, l) in line.iter_mut().enumerate() {
                    *l = data[(o * ext[axis] + i) * stride + s];
                }
                for (i, val) in resample_axis(&line, target[axis]).into_iter().enumerate() {
                    out[(o * target[axis] + i) * stride + s] = val;
                }
            }
        }
        data = out;
        ext = new_ext;
    }
    Ok(Volume {
        extents: ext,
        data: data.into_iter().map(|x| x as f32).collect(),
        provenance: v.provenance.clone(),
    })
}

/// Affine map sending the volume minimum to −1 and its maximum to +1.
pub fn normalize_scan(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateRange(format!("scan is constant ({lo})")));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = 2.0 / (hi - lo);
    Ok(Volume {
        extents: v.extents,
        data: v
            .data
            .iter()
            .map(|&x| ((x as f64 - lo) * scale - 1.0).clamp(-1.0, 1.0) as f32)
            .collect(),
        provenance: v.provenance.clone(),
    })
}

/// Copies a single-channel batch into three identical channels.
pub fn replicate_channels(slab: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = slab.dims5()?;
    if c != 1 {
        return Err(Error::Contract(format!("channel replication needs 1 channel, got {c}")));
    }
    let plane = d * h * w;
    let mut data = Vec::with_capacity(3 * slab.numel());
    for item in slab.data().chunks(plane) {
        for _ in 0..3 {
            data.extend_from_slice(item);
        }
    }
    Tensor::new(&[n, 3, d, h, w], data)
}

/// One depth window: its 1-based index, 1-based start slice and `(depth, h, w)` slab.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub index: usize,
    pub start: usize,
    pub slab: Tensor,
}

/// Overlapping depth windows of a volume and the plan to recompose them.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub window: usize,
    pub stride: usize,
    pub windows: Vec<Window>,
    pub source: [usize; 3],
}

/// Number of windows for `depth` slices, or a geometry error.
pub fn window_count(depth: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Geometry(format!(
            "window {window} with stride {stride}: need 0 < stride <= window"
        )));
    }
    if depth < window || !(depth - window).is_multiple_of(stride) {
        return Err(Error::Geometry(format!(
            "depth {depth} cannot be tiled by windows of {window} at stride {stride}; resample the volume first"
        )));
    }
    Ok((depth - window) / stride + 1)
}

impl WindowSet {
    /// Window-local 1-based inclusive slice range each window contributes on
    /// recomposition. Ranges tile `1..=depth` exactly once.
    pub fn keep_ranges(&self) -> Vec<(usize, usize)> {
        keep_ranges(self.windows.len(), self.window, self.stride)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Windows `range` as a `(n, 1, window, h, w)` batch.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        let [_, h, w] = self.source;
        let items: Vec<Tensor> = self.windows[range]
            .iter()
            .map(|win| win.slab.clone().reshape(&[1, 1, self.window, h, w]))
            .collect::<Result<_>>()?;
        Tensor::stack_batch(&items)
    }

    /// Same geometry with each slab replaced by `f(window)`.
    pub fn map_slabs(&self, mut f: impl FnMut(&Window) -> Result<Tensor>) -> Result<Self> {
        let windows = self
            .windows
            .iter()
            .map(|win| {
                let slab = f(win)?;
                win.slab.expect_same_shape(&slab)?;
                Ok(Window {
                    index: win.index,
                    start: win.start,
                    slab,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            windows,
            ..self.clone()
        })
    }
}

pub fn keep_ranges(count: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let lo = (window - stride) / 2;
    (0..count)
        .map(|i| {
            let first = if i == 0 { 1 } else { lo + 1 };
            let last = if i + 1 == count { window } else { lo + stride };
            (first, last)
        })
        .collect()
}

/// Cuts `v` into windows of `window` slices every `stride` slices.
pub fn decompose(v: &Volume, window: usize, stride: usize) -> Result<WindowSet> {
    let [d, h, w] = v.extents;
    let count = window_count(d, window, stride)?;
    let plane = h * w;
    let windows = (0..count)
        .map(|i| {
            let start = i * stride;
            let data = v.data[start * plane..(start + window) * plane].to_vec();
            Window {
                index: i + 1,
                start: start + 1,
                slab: Tensor::new(&[window, h, w], data).expect("window extents"),
            }
        })
        .collect();
    Ok(WindowSet {
        window,
        stride,
        windows,
        source: v.extents,
    })
}

/// Reassembles a volume from (inferred) windows by concatenating their keep ranges.
pub fn compose(ws: &WindowSet) -> Result<Volume> {
    let [d, h, w] = ws.source;
    let count = window_count(d, ws.window, ws.stride)?;
    if ws.windows.len() != count {
        return Err(Error::Completeness(format!(
            "expected {count} windows, found {}",
            ws.windows.len()
        )));
    }
    for (i, win) in ws.windows.iter().enumerate() {
        if win.index != i + 1 || win.start != i * ws.stride + 1 {
            return Err(Error::Completeness(format!(
                "window {} is missing or out of order",
                i + 1
            )));
        }
        if win.slab.shape() != [ws.window, h, w] {
            return Err(Error::Completeness(format!(
                "window {} has shape {:?}, expected {:?}",
                i + 1,
                win.slab.shape(),
                [ws.window, h, w]
            )));
        }
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(d * plane);
    for (win, (first, last)) in ws.windows.iter().zip(ws.keep_ranges()) {
        data.extend_from_slice(&win.slab.data()[(first - 1) * plane..last * plane]);
    }
    debug_assert_eq!(data.len(), d * plane);
    Volume::new(ws.source, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    /// Rescale predictions so min → 0 and max → 256, then keep voxels ≥ 16.
    Literal,
    /// Keep voxels with probability ≥ the threshold.
    Fixed(f32),
}

pub const LITERAL_SCALE: f64 = 256.0;
pub const LITERAL_THRESHOLD: f64 = 16.0;

pub fn binarize(pred: &Volume, mode: ThresholdMode) -> Result<MaskVolume> {
    let data = match mode {
        ThresholdMode::Fixed(t) => pred.data.iter().map(|&p| (p >= t) as u8).collect(),
        ThresholdMode::Literal => {
            let (lo, hi) = pred.min_max();
            if !(hi > lo) {
                return Err(Error::DegenerateRange(format!("predictions are constant ({lo})")));
            }
            let (lo, span) = (lo as f64, hi as f64 - lo as f64);
            pred.data
                .iter()
                .map(|&p| ((p as f64 - lo) / span * LITERAL_SCALE >= LITERAL_THRESHOLD) as u8)
                .collect()
        }
    };
    MaskVolume::new(pred.extents, data)
}

// PV3D file format: "PV3D", u16 version, u32 D, H, W, u8 dtype, raw little-endian data.

const MAGIC: &[u8; 4] = b"PV3D";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 1;
const DTYPE_F32: u8 = 0;
const DTYPE_MASK: u8 = 1;

/// Contents of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Scalar(Volume),
    Mask(MaskVolume),
}

fn header(extents: [usize; 3], dtype: u8) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in extents {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(dtype);
    Ok(out)
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = header(v.extents, DTYPE_F32)?;
    out.reserve(4 * v.data.len());
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(m: &MaskVolume) -> Result<Vec<u8>> {
    let mut out = header(m.extents, DTYPE_MASK)?;
    out.extend_from_slice(&m.data);
    Ok(out)
}

pub fn decode_volume_file(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PV3D header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PV3D version {version}")));
    }
    let mut extents = [0usize; 3];
    for (i, e) in extents.iter_mut().enumerate() {
        let o = 6 + 4 * i;
        *e = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    let body = &bytes[HEADER_LEN..];
    let n = voxel_count(extents);
    match bytes[HEADER_LEN - 1] {
        DTYPE_F32 => {
            if body.len() != 4 * n {
                return Err(Error::Format(format!("expected {} data bytes, found {}", 4 * n, body.len())));
            }
            let data = body
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Volume::new(extents, data).map(VolumeFile::Scalar)
        }
        DTYPE_MASK => {
            if body.len() != n {
                return Err(Error::Format(format!("expected {n} data bytes, found {}", body.len())));
            }
            MaskVolume::new(extents, body.to_vec())
                .map(VolumeFile::Mask)
                .map_err(|e| Error::Format(e.to_string()))
        }
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_volume(v)?)
}

pub fn write_mask(path: &Path, m: &MaskVolume) -> Result<()> {
    write_file(path, &encode_mask(m)?)
}

pub fn read_volume_file(path: &Path) -> Result<VolumeFile> {
    decode_volume_file(&fs::read(path)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_volume_file(path)? {
        VolumeFile::Scalar(v) => Ok(Volume {
            provenance: Some(path.display().to_string()),
            ..v
        }),
        VolumeFile::Mask(_) => Err(Error::Format(format!("{} holds a mask, not a scalar volume", path.display()))),
    }
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_volume_file(path)? {
        VolumeFile::Mask(m) => Ok(m),
        VolumeFile::Scalar(_) => Err(Error::Format(format!("{} holds a scalar volume, not a mask", path.display()))),
    }
}
