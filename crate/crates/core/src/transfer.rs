//! Mapping of 2D convolution weights into planar 3D weights, and the on-disk
//! weight manifest.
//!
//! A 2D kernel of shape `(out, in, kh, kw)` becomes a 3D kernel of shape
//! `(out, in, 1, kh, kw)` with every element kept as the same scalar value; the
//! biases carry over unchanged. The depth-1 axis is the first spatial axis, the
//! axis along which windows stack slices.
//!
//! # Manifest layout
//!
//! A manifest is a directory holding `manifest.toml` plus one blob per layer. A
//! blob stores the kernel as little-endian `f32` in row-major order followed by
//! the biases. `manifest.toml` lists, per layer, `name`, `kind`, `shape`,
//! `bias_len`, `file`, `crc32` (of the blob bytes) and `planar`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, ConvWeights, Kernel2D, Tensor};

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_TAG: &str = "planar3d-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Conv3d,
}

/// One named convolution layer: kernel shape, kernel elements and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub kernels: Vec<f32>,
    pub biases: Vec<f32>,
}

impl ManifestLayer {
    pub fn new(name: impl Into<String>, kind: LayerKind, shape: Vec<usize>, kernels: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind,
            shape,
            kernels,
            biases,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn from_kernel2d(name: impl Into<String>, k: &Kernel2D) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv2d,
            shape: k.kernels().shape().to_vec(),
            kernels: k.kernels().data().to_vec(),
            biases: k.biases().to_vec(),
        }
    }

    pub fn from_conv(name: impl Into<String>, w: &ConvWeights) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv3d,
            shape: w.kernels().shape().to_vec(),
            kernels: w.kernels().data().to_vec(),
            biases: w.biases().to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let rank = match self.kind {
            LayerKind::Conv2d => 4,
            LayerKind::Conv3d => 5,
        };
        if self.shape.len() != rank {
            return Err(Error::Format(format!(
                "layer `{}`: {:?} kernel needs rank {rank}, declared shape {:?}",
                self.name, self.kind, self.shape
            )));
        }
        let numel: usize = self.shape.iter().product();
        if numel != self.kernels.len() {
            return Err(Error::Format(format!(
                "layer `{}`: shape {:?} holds {numel} elements, data has {}",
                self.name,
                self.shape,
                self.kernels.len()
            )));
        }
        if self.biases.len() != self.shape[0] {
            return Err(Error::Format(format!(
                "layer `{}`: {} biases for {} output channels",
                self.name,
                self.biases.len(),
                self.shape[0]
            )));
        }
        Ok(())
    }

    /// A conv3d layer whose kernel depth is one.
    pub fn is_planar(&self) -> bool {
        self.kind == LayerKind::Conv3d && self.shape[2] == 1
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    pub fn to_kernel2d(&self) -> Result<Kernel2D> {
        if self.kind != LayerKind::Conv2d {
            return Err(Error::Contract(format!("layer `{}` is not conv2d", self.name)));
        }
        Kernel2D::new(Tensor::new(&self.shape, self.kernels.clone())?, self.biases.clone())
    }

    pub fn to_conv_weights(&self, geometry: ConvGeometry) -> Result<ConvWeights> {
        if self.kind != LayerKind::Conv3d {
            return Err(Error::Contract(format!("layer `{}` is not conv3d", self.name)));
        }
        ConvWeights::new(Tensor::new(&self.shape, self.kernels.clone())?, self.biases.clone(), geometry)
    }

    /// Blob bytes: kernel elements then biases, little-endian `f32`.
    pub fn blob(&self) -> Vec<u8> {
        self.kernels
            .iter()
            .chain(&self.biases)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn bias_bytes(&self) -> Vec<u8> {
        self.biases.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Ordered list of uniquely named layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightManifest {
    layers: Vec<ManifestLayer>,
}

impl WeightManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_layers(layers: Vec<ManifestLayer>) -> Result<Self> {
        let mut m = Self::new();
        for layer in layers {
            m.push(layer)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, layer: ManifestLayer) -> Result<()> {
        layer.validate()?;
        if self.layers.iter().any(|l| l.name == layer.name) {
            return Err(Error::Contract(format!("duplicate layer name `{}`", layer.name)));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[ManifestLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, name: &str) -> Option<&ManifestLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Places a 2D kernel into a planar 3D kernel with unit stride and dilation.
pub fn map_kernel_2d_to_3d(k: &Kernel2D) -> ConvWeights {
    let s = k.kernels().shape();
    let kernels = Tensor::new(&[s[0], s[1], 1, s[2], s[3]], k.kernels().data().to_vec())
        .expect("element count is unchanged by inserting a unit axis");
    ConvWeights::new(kernels, k.biases().to_vec(), ConvGeometry::default())
        .expect("bias length already matches output channels")
}

/// Drops the unit depth axis of a planar kernel; the inverse of [`map_kernel_2d_to_3d`].
pub fn flatten_planar(w: &ConvWeights) -> Result<Kernel2D> {
    if !w.is_planar() {
        return Err(Error::Contract(format!(
            "kernel depth {} is not planar",
            w.kernel_extent()[0]
        )));
    }
    let s = w.kernels().shape();
    Kernel2D::new(
        Tensor::new(&[s[0], s[1], s[3], s[4]], w.kernels().data().to_vec())?,
        w.biases().to_vec(),
    )
}

/// Maps every conv2d layer to its planar conv3d counterpart, keeping names and order.
pub fn map_weightset(manifest: &WeightManifest) -> Result<WeightManifest> {
    let mut out = WeightManifest::new();
    for layer in manifest.layers() {
        if layer.kind != LayerKind::Conv2d {
            return Err(Error::Contract(format!(
                "layer `{}` is already {:?}; only conv2d layers can be mapped",
                layer.name, layer.kind
            )));
        }
        let mapped = map_kernel_2d_to_3d(&layer.to_kernel2d()?);
        out.push(ManifestLayer::from_conv(layer.name.clone(), &mapped))?;
    }
    Ok(out)
}

/// Kernel elements plus biases over all layers.
pub fn count_params(manifest: &WeightManifest) -> usize {
    manifest.layers().iter().map(ManifestLayer::param_count).sum()
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    format: String,
    version: u32,
    #[serde(default)]
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    bias_len: usize,
    file: String,
    crc32: u32,
    planar: bool,
}

fn blob_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:03}_{clean}.bin")
}

/// Writes `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_manifest(manifest: &WeightManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut doc = ManifestDoc {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        layers: Vec::with_capacity(manifest.len()),
    };
    for (i, layer) in manifest.layers().iter().enumerate() {
        let file = blob_name(i, &layer.name);
        let blob = layer.blob();
        write_atomic(&dir.join(&file), &blob)?;
        doc.layers.push(LayerDoc {
            name: layer.name.clone(),
            kind: layer.kind,
            shape: layer.shape.clone(),
            bias_len: layer.biases.len(),
            file,
            crc32: crc32fast::hash(&blob),
            planar: layer.is_planar(),
        });
    }
    let text = toml::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let doc: ManifestDoc = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if doc.format != FORMAT_TAG || doc.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest format `{}` version {}",
            doc.format, doc.version
        )));
    }
    let mut seen = HashSet::new();
    let mut manifest = WeightManifest::new();
    for entry in doc.layers {
        if !seen.insert(entry.name.clone()) {
            return Err(Error::Format(format!("duplicate layer name `{}`", entry.name)));
        }
        let kernel_len: usize = entry.shape.iter().product();
        let expected = 4 * (kernel_len + entry.bias_len);
        let blob = fs::read(dir.join(&entry.file))?;
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "layer `{}`: blob `{}` has {} bytes, declared shape needs {expected}",
                entry.name,
                entry.file,
                blob.len()
            )));
        }
        if crc32fast::hash(&blob) != entry.crc32 {
            return Err(Error::Integrity(format!(
                "layer `{}`: checksum mismatch in `{}`",
                entry.name, entry.file
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let kernels: Vec<f32> = values.by_ref().take(kernel_len).collect();
        let biases: Vec<f32> = values.collect();
        let layer = ManifestLayer::new(entry.name, entry.kind, entry.shape, kernels, biases)?;
        if layer.is_planar() != entry.planar {
            return Err(Error::Format(format!("layer `{}`: planar flag disagrees with shape", layer.name)));
        }
        manifest.push(layer)?;
    }
    Ok(manifest)
}
