//! Planar 3D residual U-Net.
//!
//! The encoder follows the VGG-16 topology with planar `1×3×3` kernels and `1×2×2`
//! pooling, so no encoder layer ever mixes depth slices. Each decoder stage
//! upsamples with a `1×2×2` transposed convolution, concatenates the matching
//! encoder features and applies a residual block
//!
//! ```text
//! c = concat(upsample(x), skip)
//! y = conv_n(relu(... relu(conv_1_dilated(c)))) + proj(c)
//! ```
//!
//! where `proj` is a `1×1×1` convolution. A `1×1×1` head and a sigmoid produce
//! per-voxel probabilities. There is no normalization layer anywhere.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvGeometry, Padding, Tensor};
use crate::transfer::{self, LayerKind, ManifestLayer, WeightManifest};

/// Positive rational factor applied to every channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthScale {
    pub numerator: u32,
    pub denominator: u32,
}

impl WidthScale {
    pub const FULL: Self = Self::new(1, 1);
    pub const TOY: Self = Self::new(1, 8);

    pub const fn new(numerator: u32, denominator: u32) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    /// Scaled channel count, rounded to nearest and at least one.
    pub fn apply(&self, channels: usize) -> usize {
        let num = channels as u64 * self.numerator as u64;
        let den = self.denominator as u64;
        (((2 * num + den) / (2 * den)) as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub conv_count: usize,
    /// Channel count before width scaling.
    pub channels: usize,
    pub kernel: [usize; 3],
    pub activation: Activation,
    pub pool: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub upsample: [usize; 3],
    pub conv_count: usize,
    /// Channel count before width scaling.
    pub channels: usize,
    pub first_conv_dilation: [usize; 3],
    pub kernel: [usize; 3],
}

/// Declarative architecture. Encoder stage `i` feeds its pre-pooling features to
/// decoder stage `S - 1 - i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Nominal input window `(depth, height, width)`.
    pub window: [usize; 3],
    pub width_scale: WidthScale,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
}

const VGG16_STAGES: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

impl NetworkSpec {
    /// VGG-16 encoder with a mirrored residual decoder.
    pub fn vgg16_unet(width_scale: WidthScale, window: [usize; 3]) -> Self {
        let encoder: Vec<EncoderStage> = VGG16_STAGES
            .iter()
            .map(|&(conv_count, channels)| EncoderStage {
                conv_count,
                channels,
                kernel: [1, 3, 3],
                activation: Activation::Relu,
                pool: [1, 2, 2],
            })
            .collect();
        let decoder = encoder
            .iter()
            .rev()
            .map(|e| DecoderStage {
                upsample: e.pool,
                conv_count: 2,
                channels: e.channels,
                first_conv_dilation: [1, 2, 2],
                kernel: [3, 3, 3],
            })
            .collect();
        Self {
            in_channels: 3,
            window,
            width_scale,
            encoder,
            decoder,
        }
    }

    /// Desk-scale default: width 1/8 on 16×64×64 windows.
    pub fn toy() -> Self {
        Self::vgg16_unet(WidthScale::TOY, [16, 64, 64])
    }

    pub fn stage_count(&self) -> usize {
        self.encoder.len()
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder.iter().map(|s| self.width_scale.apply(s.channels)).collect()
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        self.decoder.iter().map(|s| self.width_scale.apply(s.channels)).collect()
    }

    /// Total downsampling factor per spatial axis.
    pub fn reduction(&self) -> [usize; 3] {
        let mut r = [1; 3];
        for s in &self.encoder {
            for (a, p) in r.iter_mut().zip(s.pool) {
                *a *= p;
            }
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.encoder.is_empty() {
            return bad("network needs at least one encoder stage".into());
        }
        if self.encoder.len() != self.decoder.len() {
            return bad(format!(
                "{} encoder stages but {} decoder stages",
                self.encoder.len(),
                self.decoder.len()
            ));
        }
        if self.width_scale.numerator == 0 || self.width_scale.denominator == 0 {
            return bad("width scale must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("input channel count must be positive".into());
        }
        let s = self.stage_count();
        for (i, e) in self.encoder.iter().enumerate() {
            if e.conv_count == 0 || e.channels == 0 {
                return bad(format!("encoder stage {i} needs convolutions and channels"));
            }
            if e.pool.contains(&0) || e.kernel.contains(&0) {
                return bad(format!("encoder stage {i} has a zero kernel or pool extent"));
            }
            let d = &self.decoder[s - 1 - i];
            if d.upsample != e.pool {
                return bad(format!(
                    "decoder stage {} upsamples by {:?} but encoder stage {i} pools by {:?}",
                    s - 1 - i,
                    d.upsample,
                    e.pool
                ));
            }
        }
        for (j, d) in self.decoder.iter().enumerate() {
            if d.conv_count == 0 || d.channels == 0 || d.kernel.contains(&0) || d.first_conv_dilation.contains(&0) {
                return bad(format!("decoder stage {j} is degenerate"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub part: Part,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
    pub transposed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub upsample: ConvLayer,
    pub convs: Vec<ConvLayer>,
    pub proj: ConvLayer,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Encoder stage outputs before pooling.
    pub encoder: Vec<Tensor>,
    /// Decoder block outputs.
    pub decoder: Vec<Tensor>,
    /// Residual (`proj`) path of each decoder block.
    pub residual: Vec<Tensor>,
    pub output: Tensor,
}

struct TraceVars {
    encoder: Vec<Var>,
    decoder: Vec<Var>,
    residual: Vec<Var>,
}

/// Instantiated network: parameters keyed by layer and the fixed graph over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Parameter>,
    encoder: Vec<Vec<ConvLayer>>,
    decoder: Vec<DecoderBlock>,
    head: ConvLayer,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
}

impl Builder {
    /// He-uniform kernel in `[-√(6/fan_in), √(6/fan_in)]`, zero biases.
    fn conv(&mut self, name: String, shape: [usize; 5], geometry: ConvGeometry, part: Part, transposed: bool) -> ConvLayer {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]) as f64;
        let bound = (6.0 / fan_in).sqrt() as f32;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let kernel = self.push(format!("{name}.kernel"), Tensor::new(&shape, data).expect("shape"), part);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[shape[0]]), part);
        ConvLayer {
            name,
            kernel,
            bias,
            geometry,
            transposed,
        }
    }

    fn push(&mut self, name: String, value: Tensor, part: Part) -> ParamId {
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
            part,
        });
        self.params.len() - 1
    }
}

impl Network {
    /// Builds the network, initializing parameters from `init_seed` and optionally
    /// loading the encoder from a planar weight manifest (layers in encoder order).
    pub fn build(spec: &NetworkSpec, init_seed: u64, encoder_weights: Option<&WeightManifest>) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(init_seed),
            params: Vec::new(),
        };
        let enc_ch = spec.encoder_channels();
        let dec_ch = spec.decoder_channels();

        let mut encoder = Vec::with_capacity(spec.stage_count());
        let mut cin = spec.in_channels;
        for (s, stage) in spec.encoder.iter().enumerate() {
            let mut convs = Vec::with_capacity(stage.conv_count);
            for c in 0..stage.conv_count {
                let [kd, kh, kw] = stage.kernel;
                let shape = [enc_ch[s], cin, kd, kh, kw];
                convs.push(b.conv(format!("block{}_conv{}", s + 1, c + 1), shape, ConvGeometry::default(), Part::Encoder, false));
                cin = enc_ch[s];
            }
            encoder.push(convs);
        }

        let s_count = spec.stage_count();
        let mut decoder = Vec::with_capacity(s_count);
        for (j, stage) in spec.decoder.iter().enumerate() {
            let cout = dec_ch[j];
            let skip_ch = enc_ch[s_count - 1 - j];
            let [ud, uh, uw] = stage.upsample;
            let up_geom = ConvGeometry {
                stride: stage.upsample,
                dilation: [1; 3],
                padding: Padding::Valid,
            };
            let upsample = b.conv(format!("dec{}_up", j + 1), [cout, cin, ud, uh, uw], up_geom, Part::Decoder, true);
            let cat = cout + skip_ch;
            let [kd, kh, kw] = stage.kernel;
            let mut convs = Vec::with_capacity(stage.conv_count);
            for c in 0..stage.conv_count {
                let geom = if c == 0 {
                    ConvGeometry::default().with_dilation(stage.first_conv_dilation)
                } else {
                    ConvGeometry::default()
                };
                let in_c = if c == 0 { cat } else { cout };
                convs.push(b.conv(format!("dec{}_conv{}", j + 1, c + 1), [cout, in_c, kd, kh, kw], geom, Part::Decoder, false));
            }
            let proj = b.conv(format!("dec{}_proj", j + 1), [cout, cat, 1, 1, 1], ConvGeometry::default(), Part::Decoder, false);
            decoder.push(DecoderBlock { upsample, convs, proj });
            cin = cout;
        }
        let head = b.conv("head".into(), [1, cin, 1, 1, 1], ConvGeometry::default(), Part::Head, false);

        let mut net = Self {
            spec: spec.clone(),
            params: b.params,
            encoder,
            decoder,
            head,
        };
        if let Some(manifest) = encoder_weights {
            net.load_encoder(manifest)?;
        }
        Ok(net)
    }

    fn load_encoder(&mut self, manifest: &WeightManifest) -> Result<()> {
        let layers: Vec<ConvLayer> = self.encoder.iter().flatten().cloned().collect();
        if manifest.len() != layers.len() {
            return Err(Error::Contract(format!(
                "encoder has {} convolution layers, manifest has {}",
                layers.len(),
                manifest.len()
            )));
        }
        for (layer, entry) in layers.iter().zip(manifest.layers()) {
            self.assign(layer, entry)?;
        }
        Ok(())
    }

    fn assign(&mut self, layer: &ConvLayer, entry: &ManifestLayer) -> Result<()> {
        let expected = self.params[layer.kernel].value.shape().to_vec();
        if entry.kind != LayerKind::Conv3d || entry.shape != expected {
            return Err(Error::Contract(format!(
                "layer `{}` ({}): expected conv3d kernel {:?}, got {:?} {:?}",
                layer.name, entry.name, expected, entry.kind, entry.shape
            )));
        }
        self.params[layer.kernel].value = Tensor::new(&entry.shape, entry.kernels.clone())?;
        self.params[layer.bias].value = Tensor::new(&[entry.biases.len()], entry.biases.clone())?;
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn encoder_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.encoder.iter().flatten()
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlock] {
        &self.decoder
    }

    pub fn head(&self) -> &ConvLayer {
        &self.head
    }

    /// Sets the trainable flag of every encoder parameter; decoder and head are untouched.
    pub fn set_encoder_trainable(mut self, trainable: bool) -> Self {
        self.set_encoder_trainable_mut(trainable);
        self
    }

    pub fn set_encoder_trainable_mut(&mut self, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.part == Part::Encoder) {
            p.trainable = trainable;
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().flat_map(|d| std::iter::once(&d.upsample).chain(&d.convs).chain(std::iter::once(&d.proj))))
            .chain(std::iter::once(&self.head))
    }

    /// Checks that `shape` is a valid batch for this network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, d, h, w] = <[usize; 5]>::try_from(shape).map_err(|_| Error::dim("rank", 5, shape.len()))?;
        if c != self.spec.in_channels {
            return Err(Error::dim("channel", self.spec.in_channels, c));
        }
        if d != self.spec.window[0] {
            return Err(Error::Geometry(format!(
                "input depth {d} differs from the window depth {}",
                self.spec.window[0]
            )));
        }
        let r = self.spec.reduction();
        for (axis, (ext, f)) in [d, h, w].into_iter().zip(r).enumerate() {
            if ext % f != 0 {
                return Err(Error::Geometry(format!(
                    "spatial axis {axis} extent {ext} is not divisible by the encoder reduction {f}"
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter on `tape`; the returned vector is indexed by [`ParamId`].
    pub fn register(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| tape.param(id, p.value.clone(), trainable && p.trainable))
            .collect()
    }

    fn apply(&self, tape: &mut Tape<f32>, vars: &[Var], layer: &ConvLayer, x: Var) -> Result<Var> {
        let (k, b) = (vars[layer.kernel], vars[layer.bias]);
        if layer.transposed {
            tape.transpose_conv3d(x, k, b, layer.geometry)
        } else {
            tape.conv3d(x, k, b, layer.geometry)
        }
    }

    fn record_encoder(&self, tape: &mut Tape<f32>, vars: &[Var], input: Var) -> Result<(Vec<Var>, Var)> {
        let mut x = input;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (stage, convs) in self.spec.encoder.iter().zip(&self.encoder) {
            for layer in convs {
                let y = self.apply(tape, vars, layer, x)?;
                x = match stage.activation {
                    Activation::Relu => tape.relu(y),
                    Activation::Sigmoid => tape.sigmoid(y),
                };
            }
            skips.push(x);
            x = tape.maxpool3d(x, stage.pool, stage.pool)?;
        }
        Ok((skips, x))
    }

    fn record_traced(&self, tape: &mut Tape<f32>, vars: &[Var], input: Var) -> Result<(Var, TraceVars)> {
        self.check_input(tape.value(input).shape())?;
        let (skips, mut x) = self.record_encoder(tape, vars, input)?;
        let mut trace = TraceVars {
            encoder: skips.clone(),
            decoder: Vec::new(),
            residual: Vec::new(),
        };
        for (j, block) in self.decoder.iter().enumerate() {
            let u = self.apply(tape, vars, &block.upsample, x)?;
            let c = tape.concat_channels(u, skips[skips.len() - 1 - j])?;
            let mut y = c;
            for (i, layer) in block.convs.iter().enumerate() {
                if i > 0 {
                    y = tape.relu(y);
                }
                y = self.apply(tape, vars, layer, y)?;
            }
            let r = self.apply(tape, vars, &block.proj, c)?;
            x = tape.add(y, r)?;
            trace.residual.push(r);
            trace.decoder.push(x);
        }
        let logits = self.apply(tape, vars, &self.head, x)?;
        Ok((tape.sigmoid(logits), trace))
    }

    /// Records the forward graph on `tape` and returns the probability output.
    pub fn record(&self, tape: &mut Tape<f32>, vars: &[Var], input: Var) -> Result<Var> {
        self.record_traced(tape, vars, input).map(|(v, _)| v)
    }

    /// Per-voxel lesion probabilities for a `(n, 3, 16, h, w)` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.record(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<Trace> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (out, tv) = self.record_traced(&mut tape, &vars, x)?;
        let collect = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(Trace {
            encoder: collect(&tv.encoder),
            decoder: collect(&tv.decoder),
            residual: collect(&tv.residual),
            output: tape.value(out).clone(),
        })
    }

    /// Encoder stage outputs (before pooling) for a batch of any depth.
    pub fn encoder_features(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (skips, _) = self.record_encoder(&mut tape, &vars, x)?;
        Ok(skips.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// All convolution layers as a conv3d manifest, in graph order.
    pub fn to_manifest(&self) -> Result<WeightManifest> {
        let layers = self
            .all_layers()
            .map(|l| {
                let k = &self.params[l.kernel].value;
                ManifestLayer::new(
                    l.name.clone(),
                    LayerKind::Conv3d,
                    k.shape().to_vec(),
                    k.data().to_vec(),
                    self.params[l.bias].value.data().to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        WeightManifest::from_layers(layers)
    }

    pub fn from_manifest(spec: &NetworkSpec, manifest: &WeightManifest) -> Result<Self> {
        let mut net = Self::build(spec, 0, None)?;
        let layers: Vec<ConvLayer> = net.all_layers().cloned().collect();
        if layers.len() != manifest.len() {
            return Err(Error::Contract(format!(
                "network has {} layers, manifest has {}",
                layers.len(),
                manifest.len()
            )));
        }
        for layer in &layers {
            let entry = manifest
                .layer(&layer.name)
                .ok_or_else(|| Error::Contract(format!("manifest lacks layer `{}`", layer.name)))?;
            net.assign(layer, entry)?;
        }
        Ok(net)
    }

    /// Writes `network.toml` and the weight manifest under `dir/weights`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        transfer::write_atomic(&dir.join(NETWORK_FILE), self.spec.to_toml()?.as_bytes())?;
        transfer::save_manifest(&self.to_manifest()?, &dir.join(WEIGHTS_DIR))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = NetworkSpec::from_toml(&fs::read_to_string(dir.join(NETWORK_FILE))?)?;
        let manifest = transfer::load_manifest(&dir.join(WEIGHTS_DIR))?;
        Self::from_manifest(&spec, &manifest)
    }
}

pub const NETWORK_FILE: &str = "network.toml";
pub const WEIGHTS_DIR: &str = "weights";

/// Seeded stand-in for pretrained 2D encoder weights: one conv2d layer per encoder
/// convolution of `spec`, named like the network's encoder layers.
pub fn synthetic_encoder_2d(spec: &NetworkSpec, seed: u64) -> Result<WeightManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cin = spec.in_channels;
    for (s, (stage, cout)) in spec.encoder.iter().zip(spec.encoder_channels()).enumerate() {
        for c in 0..stage.conv_count {
            let [_, kh, kw] = stage.kernel;
            let bound = (6.0 / (cin * kh * kw) as f64).sqrt() as f32;
            let kernels = (0..cout * cin * kh * kw).map(|_| rng.gen_range(-bound..=bound)).collect();
            let biases = (0..cout).map(|_| rng.gen_range(-0.1..=0.1)).collect();
            layers.push(ManifestLayer::new(
                format!("block{}_conv{}", s + 1, c + 1),
                LayerKind::Conv2d,
                vec![cout, cin, kh, kw],
                kernels,
                biases,
            )?);
            cin = cout;
        }
    }
    WeightManifest::from_layers(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::vgg16_unet(WidthScale::new(1, 32), [16, 32, 32]);
        spec.encoder.truncate(2);
        spec.decoder.drain(..3);
        spec
    }

    #[test]
    fn toy_channels() {
        let spec = NetworkSpec::toy();
        assert_eq!(spec.encoder_channels(), vec![8, 16, 32, 64, 64]);
        assert_eq!(spec.decoder_channels(), vec![64, 64, 32, 16, 8]);
        assert_eq!(spec.reduction(), [1, 32, 32]);
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = NetworkSpec::toy();
        assert_eq!(NetworkSpec::from_toml(&spec.to_toml().unwrap()).unwrap(), spec);
    }

    #[test]
    fn mismatched_stage_counts_rejected() {
        let mut spec = NetworkSpec::toy();
        spec.decoder.pop();
        assert!(matches!(Network::build(&spec, 0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = tiny_spec();
        let a = Network::build(&spec, 42, None).unwrap();
        let b = Network::build(&spec, 42, None).unwrap();
        let c = Network::build(&spec, 43, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn kernels_planar_in_encoder_full_in_decoder() {
        let net = Network::build(&tiny_spec(), 1, None).unwrap();
        for l in net.encoder_layers() {
            assert_eq!(net.parameters()[l.kernel].value.shape()[2], 1);
        }
        for b in net.decoder_blocks() {
            for l in &b.convs {
                assert_eq!(net.parameters()[l.kernel].value.shape()[2..], [3, 3, 3]);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_geometry() {
        let net = Network::build(&tiny_spec(), 1, None).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 3, 16, 30, 32])).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        let err = net.forward(&Tensor::zeros(&[1, 3, 8, 32, 32])).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn encoder_manifest_shape_mismatch_names_layer() {
        let spec = tiny_spec();
        let net = Network::build(&spec, 1, None).unwrap();
        let mut layers: Vec<ManifestLayer> = net
            .to_manifest()
            .unwrap()
            .layers()
            .iter()
            .filter(|l| l.name.starts_with("block"))
            .cloned()
            .collect();
        assert!(Network::build(&spec, 2, Some(&WeightManifest::from_layers(layers.clone()).unwrap())).is_ok());
        let bad = &mut layers[1];
        bad.shape = vec![bad.shape[0], bad.shape[1], 1, 1, 9];
        let err = Network::build(&spec, 2, Some(&WeightManifest::from_layers(layers).unwrap())).unwrap_err();
        assert!(err.to_string().contains("block1_conv2"), "{err}");
    }

    #[test]
    fn encoder_flag_is_idempotent_and_scoped() {
        let net = Network::build(&tiny_spec(), 1, None).unwrap().set_encoder_trainable(false);
        let again = net.clone().set_encoder_trainable(false);
        assert_eq!(net, again);
        for p in net.parameters() {
            assert_eq!(p.trainable, p.part != Part::Encoder);
        }
    }
}
