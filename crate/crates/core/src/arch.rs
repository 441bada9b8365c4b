//! Network construction: style pathways, the convolutional auto-encoder used
//! to initialise them, the synthesis network, and the assembled model with
//! its variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{rgb_to_hsv, HSV_DOWNSAMPLE};
use crate::error::{invalid, Error, Result};
use crate::layers::{softmax, softmax_xent, ConvLayer, DeconvLayer};
use crate::network::{mix_seed, Activations, Layer, Mode, Sequential};
use crate::rgb::RgbImage;
use crate::tensor::{Shape, Tensor};

/// Smallest accepted image side, before padding.
pub const MIN_INPUT_SIZE: usize = 16;
/// Network inputs are reflect-padded to a multiple of this.
pub const SPATIAL_MULTIPLE: usize = 4;
pub const STYLE_CLASSES: usize = 2;
pub const DROPOUT_RATE: f64 = 0.5;
pub const HSV_CHANNELS: usize = 3;

/// Channel widths. `Full` is 64 per pathway and 128 in the synthesis
/// network; `Desk` scales both by 1/4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl Profile {
    pub fn pathway_channels(&self) -> usize {
        match self {
            Profile::Desk => 16,
            Profile::Full => 64,
        }
    }

    pub fn synthesis_channels(&self) -> usize {
        match self {
            Profile::Desk => 32,
            Profile::Full => 128,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(invalid(format!("unknown profile '{}' (expected desk or full)", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// Style-supervised pathways.
    #[default]
    Bdn,
    /// Attribute stage trained without style labels.
    Bfcn,
    /// Attribute stage supervised jointly by the composite style label.
    BdnWp,
    /// 10-bin head trained with softmax cross-entropy.
    BdnSoftD,
    /// 10-bin head trained with KL divergence.
    BdnKlD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Bdn,
        Variant::Bfcn,
        Variant::BdnWp,
        Variant::BdnSoftD,
        Variant::BdnKlD,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Bdn => "bdn",
            Variant::Bfcn => "bfcn",
            Variant::BdnWp => "bdn-wp",
            Variant::BdnSoftD => "bdn-soft-d",
            Variant::BdnKlD => "bdn-kl-d",
        }
    }

    pub fn default_head(&self) -> Head {
        match self {
            Variant::BdnSoftD | Variant::BdnKlD => Head::Dist10,
            _ => Head::Binary,
        }
    }

    pub fn supports(&self, head: Head) -> bool {
        match self {
            Variant::BdnSoftD | Variant::BdnKlD => head == Head::Dist10,
            _ => head != Head::Dist10,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown variant '{}'", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Head {
    /// Low/High softmax.
    #[default]
    Binary,
    /// Rating mean and standard deviation.
    Gaussian,
    /// Distribution over the ten rating bins.
    Dist10,
}

impl Head {
    pub fn channels(&self) -> usize {
        match self {
            Head::Binary | Head::Gaussian => 2,
            Head::Dist10 => 10,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::Binary => "binary",
            Head::Gaussian => "gaussian",
            Head::Dist10 => "dist10",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Head::Binary),
            "gaussian" => Ok(Head::Gaussian),
            "dist10" => Ok(Head::Dist10),
            _ => Err(invalid(format!("unknown head '{}'", s))),
        }
    }
}

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> Layer {
    Layer::Conv(ConvLayer::new(i, o, (k, k), (s, s), (p, p)).expect("static layer geometry is valid"))
}

fn he_init(net: &mut Sequential, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut net.layers {
        match &mut l.layer {
            Layer::Conv(c) => c.init_he(&mut rng),
            Layer::Deconv(d) => d.init_he(&mut rng),
            _ => {}
        }
    }
}

/// conv1 5x5/2, conv2 3x3/2, conv3 3x3/1, each followed by ReLU, then
/// dropout. Output is `channels` maps at a quarter of the input size.
fn trunk(in_channels: usize, channels: usize) -> Sequential {
    let mut net = Sequential::new();
    net.push("conv1", conv(in_channels, channels, 5, 2, 2))
        .push("relu1", Layer::Relu)
        .push("conv2", conv(channels, channels, 3, 2, 1))
        .push("relu2", Layer::Relu)
        .push("conv3", conv(channels, channels, 3, 1, 1))
        .push("relu3", Layer::Relu)
        .push("drop3", Layer::Dropout(DROPOUT_RATE));
    net
}

fn classifier(in_channels: usize, classes: usize) -> Sequential {
    let mut net = Sequential::new();
    net.push("conv4", conv(in_channels, classes, 1, 1, 0)).push("gap", Layer::Gap);
    net
}

/// An untrained pathway trunk (conv1-conv3) for `profile`.
pub fn build_trunk(profile: Profile, seed: u64) -> Sequential {
    let mut net = trunk(3, profile.pathway_channels());
    he_init(&mut net, seed);
    net
}

/// One style pathway: the attribute trunk plus the conv4/GAP classifier
/// that is dropped once the pathway is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Pathway {
    pub trunk: Sequential,
    pub head: Sequential,
}

pub struct PathwayTrace {
    trunk: Activations,
    head: Activations,
}

impl PathwayTrace {
    pub fn output(&self) -> &Tensor {
        &self.head.output
    }
}

impl Pathway {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<PathwayTrace> {
        let trunk = self.trunk.forward(x, mode)?;
        let head = self.head.forward(&trunk.output, mode)?;
        Ok(PathwayTrace { trunk, head })
    }

    pub fn backward(&mut self, trace: &PathwayTrace, grad_out: &Tensor) -> Result<()> {
        let g = self
            .head
            .backward(&trace.head, grad_out, true)?
            .expect("input gradient requested");
        self.trunk.backward(&trace.trunk, &g, false)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("trunk", &mut self.trunk);
        out.extend(prefixed_mut("head", &mut self.head));
        out
    }
}

pub fn build_pathway(profile: Profile, seed: u64) -> Pathway {
    let c = profile.pathway_channels();
    let mut p = Pathway {
        trunk: trunk(3, c),
        head: classifier(c, STYLE_CLASSES),
    };
    he_init(&mut p.trunk, seed);
    he_init(&mut p.head, mix_seed(seed, 1));
    p
}

/// Softmax class probabilities `[p_absent, p_present]` for one image.
pub fn pathway_predict_style(pathway: &Pathway, img: &RgbImage) -> Result<[f64; 2]> {
    let (x, _) = prepare_image(img, false)?;
    let logits = pathway.head.infer(&pathway.trunk.infer(&x)?)?;
    let p = softmax(logits.item(0));
    Ok([p[0], p[1]])
}

/// Encoder/decoder pair of the auto-encoder. The encoder shares the
/// pathway's conv1/conv2 topology; the decoder mirrors it with transposed
/// convolutions and ends linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaeBlock {
    pub encoder: Sequential,
    pub decoder: Sequential,
}

/// Convolutional auto-encoder. With several blocks, each block encodes the
/// image independently and the decoder outputs are summed; this is the
/// merged, block-diagonal form used for the unsupervised baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Scae {
    pub profile: Profile,
    pub blocks: Vec<ScaeBlock>,
}

pub struct ScaeTrace {
    blocks: Vec<(Activations, Activations)>,
    pub output: Tensor,
}

pub fn build_scae(profile: Profile, n_blocks: usize, seed: u64) -> Result<Scae> {
    if n_blocks == 0 {
        return Err(invalid("auto-encoder needs at least one block"));
    }
    let c = profile.pathway_channels();
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let mut encoder = Sequential::new();
        encoder
            .push("conv1", conv(3, c, 5, 2, 2))
            .push("relu1", Layer::Relu)
            .push("conv2", conv(c, c, 3, 2, 1))
            .push("relu2", Layer::Relu);
        let conv1 = encoder.conv("conv1").expect("conv1 present");
        let conv2 = encoder.conv("conv2").expect("conv2 present");
        // Geometry for inputs that are multiples of 4.
        let deconv1 = DeconvLayer::mirror_of(conv1, SPATIAL_MULTIPLE * 4, SPATIAL_MULTIPLE * 4)?;
        let deconv2 = DeconvLayer::mirror_of(conv2, SPATIAL_MULTIPLE * 2, SPATIAL_MULTIPLE * 2)?;
        let mut decoder = Sequential::new();
        decoder
            .push("deconv2", Layer::Deconv(deconv2))
            .push("relu3", Layer::Relu)
            .push("deconv1", Layer::Deconv(deconv1));
        let block_seed = mix_seed(seed, b as u64);
        he_init(&mut encoder, block_seed);
        he_init(&mut decoder, mix_seed(block_seed, 1));
        blocks.push(ScaeBlock { encoder, decoder });
    }
    Ok(Scae { profile, blocks })
}

impl Scae {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ScaeTrace> {
        check_padded_input(x)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut output = Tensor::zeros(x.shape());
        for b in &self.blocks {
            let enc = b.encoder.forward(x, mode)?;
            let dec = b.decoder.forward(&enc.output, mode)?;
            for (o, v) in output.data_mut().iter_mut().zip(dec.output.data()) {
                *o += v;
            }
            traces.push((enc, dec));
        }
        Ok(ScaeTrace { blocks: traces, output })
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Infer)?.output)
    }

    pub fn backward(&mut self, trace: &ScaeTrace, grad_out: &Tensor) -> Result<()> {
        for (b, (enc, dec)) in self.blocks.iter_mut().zip(&trace.blocks) {
            let g = b.decoder.backward(dec, grad_out, true)?.expect("input gradient requested");
            b.encoder.backward(enc, &g, false)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{}.encoder", i), &b.encoder));
            out.extend(prefixed(&format!("block{}.decoder", i), &b.decoder));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("block{}.encoder", i), &mut b.encoder));
            out.extend(prefixed_mut(&format!("block{}.decoder", i), &mut b.decoder));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// A pathway whose conv1/conv2 are copied from encoder `block`; conv3
    /// and the classifier are freshly initialised from `seed`.
    pub fn init_pathway(&self, block: usize, seed: u64) -> Result<Pathway> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| invalid(format!("auto-encoder has no block {}", block)))?;
        let mut p = build_pathway(self.profile, seed);
        for name in ["conv1", "conv2"] {
            let src = b.encoder.conv(name).expect("encoder layer present").clone();
            *p.trunk.conv_mut(name).expect("trunk layer present") = src;
        }
        Ok(p)
    }
}

/// Trained conv1-conv3 trunks handed from attribute training to
/// fine-tuning, tagged with the protocol that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeStage {
    pub profile: Profile,
    /// `Bdn` for style-supervised pathways, `Bfcn` for the unsupervised
    /// stack, `BdnWp` for the composite-label stack.
    pub source: Variant,
    /// Style supervising each trunk (empty for `Bfcn`).
    pub styles: Vec<usize>,
    pub trunks: Vec<Sequential>,
    /// The conv4/GAP classifier, kept only in the with-head form.
    pub head: Option<Sequential>,
}

impl AttributeStage {
    pub fn headless(&self) -> AttributeStage {
        AttributeStage {
            head: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunks.is_empty() {
            return Err(invalid("attribute stage has no trunks"));
        }
        for t in &self.trunks {
            check_trunk(t, self.profile)?;
        }
        let supervised = !matches!(self.source, Variant::Bfcn);
        if supervised && self.styles.len() != self.trunks.len() {
            return Err(invalid(format!(
                "{} style indices for {} trunks",
                self.styles.len(),
                self.trunks.len()
            )));
        }
        if matches!(self.source, Variant::BdnSoftD | Variant::BdnKlD) {
            return Err(invalid("attribute stages come from bdn, bfcn or bdn-wp training"));
        }
        Ok(())
    }

    /// Joins single-pathway stages into one, in order.
    pub fn combine(stages: Vec<AttributeStage>) -> Result<AttributeStage> {
        let first = stages.first().ok_or_else(|| invalid("no attribute stages given"))?;
        let (profile, source) = (first.profile, first.source);
        let mut out = AttributeStage {
            profile,
            source,
            styles: Vec::new(),
            trunks: Vec::new(),
            head: None,
        };
        for s in stages {
            if s.profile != profile || s.source != source {
                return Err(invalid(format!(
                    "cannot combine a {}/{} stage with a {}/{} stage",
                    source, profile, s.source, s.profile
                )));
            }
            out.styles.extend(s.styles);
            out.trunks.extend(s.trunks);
        }
        if let Some(dup) = out.styles.iter().enumerate().find(|(i, s)| out.styles[..*i].contains(s)) {
            return Err(invalid(format!("style {} appears in two pathways", dup.1)));
        }
        out.validate()?;
        Ok(out)
    }
}

/// Synthesis network over `3 + n_pathways * C` attribute channels.
pub fn build_synthesis(profile: Profile, head: Head, n_pathways: usize, seed: u64) -> Sequential {
    let mut net = trunk(
        synthesis_input_channels(profile, n_pathways),
        profile.synthesis_channels(),
    );
    net.push("conv4", conv(profile.synthesis_channels(), head.channels(), 1, 1, 0))
        .push("gap", Layer::Gap);
    he_init(&mut net, seed);
    net
}

pub fn synthesis_input_channels(profile: Profile, n_pathways: usize) -> usize {
    HSV_CHANNELS + n_pathways * profile.pathway_channels()
}

/// Layer name and output shape for a `(1, c, h, w)` input.
pub fn shape_report(net: &Sequential, input: Shape) -> Result<Vec<(String, Shape)>> {
    let acts = net.forward(&Tensor::zeros(input), Mode::Infer)?;
    let mut shapes: Vec<Shape> = net
        .layers
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, _)| acts.input(i).shape())
        .collect();
    shapes.push(acts.output.shape());
    Ok(net.layers.iter().map(|l| l.name.clone()).zip(shapes).collect())
}

/// Reflect-pads to a multiple of 4 and returns the network input and,
/// when requested, the downsampled HSV planes.
pub fn prepare_image(img: &RgbImage, with_hsv: bool) -> Result<(Tensor, Option<Tensor>)> {
    if img.height() < MIN_INPUT_SIZE || img.width() < MIN_INPUT_SIZE {
        return Err(invalid(format!(
            "image is {}x{}; the minimum is {}x{}",
            img.height(),
            img.width(),
            MIN_INPUT_SIZE,
            MIN_INPUT_SIZE
        )));
    }
    let padded = img.reflect_pad_to_multiple(SPATIAL_MULTIPLE);
    let hsv = if with_hsv {
        Some(rgb_to_hsv(&padded)?.to_tensor())
    } else {
        None
    };
    Ok((padded.to_tensor(), hsv))
}

fn check_padded_input(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.c != 3
        || s.h < MIN_INPUT_SIZE
        || s.w < MIN_INPUT_SIZE
        || s.h % SPATIAL_MULTIPLE != 0
        || s.w % SPATIAL_MULTIPLE != 0
    {
        return Err(Error::ShapeMismatch {
            op: "network input",
            expected: format!(
                "Nx3xHxW with H, W >= {} and multiples of {}",
                MIN_INPUT_SIZE, SPATIAL_MULTIPLE
            ),
            actual: s.to_string(),
        });
    }
    Ok(())
}

/// Checks that `trunk` has the pathway topology for `profile`.
pub fn check_trunk(trunk: &Sequential, profile: Profile) -> Result<()> {
    let reference = self::trunk(3, profile.pathway_channels());
    let names = |n: &Sequential| n.layers.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
    let shapes = |n: &Sequential| n.params().into_iter().map(|(k, t)| (k, t.shape())).collect::<Vec<_>>();
    if names(trunk) != names(&reference) || shapes(trunk) != shapes(&reference) {
        return Err(invalid(format!(
            "pathway state is not a trained {} pathway trunk (expected layers {:?})",
            profile,
            names(&reference)
        )));
    }
    Ok(())
}

/// The assembled network: pathway trunks producing attributes, and the
/// synthesis network over the HSV planes plus all attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct BdnModel {
    pub variant: Variant,
    pub head: Head,
    pub profile: Profile,
    /// Style index supervising each pathway; empty when the attribute stage
    /// was trained without style labels.
    pub styles: Vec<usize>,
    pub pathways: Vec<Sequential>,
    pub synthesis: Sequential,
    /// Pathway parameters receive no updates while set.
    pub frozen_pathways: bool,
}

pub struct BdnTrace {
    pathways: Vec<Activations>,
    synthesis: Activations,
}

impl BdnTrace {
    pub fn output(&self) -> &Tensor {
        &self.synthesis.output
    }

    /// The synthesis network's input: HSV planes followed by every
    /// pathway's attribute maps.
    pub fn attributes(&self) -> &Tensor {
        self.synthesis.input(0)
    }
}

impl BdnModel {
    pub fn new(
        variant: Variant,
        head: Head,
        profile: Profile,
        pathways: Vec<Sequential>,
        styles: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if !variant.supports(head) {
            return Err(invalid(format!("variant {} does not support the {} head", variant, head)));
        }
        if pathways.is_empty() {
            return Err(invalid("model needs at least one pathway"));
        }
        for p in &pathways {
            check_trunk(p, profile)?;
        }
        if !styles.is_empty() && styles.len() != pathways.len() {
            return Err(invalid(format!(
                "{} style indices for {} pathways",
                styles.len(),
                pathways.len()
            )));
        }
        let synthesis = build_synthesis(profile, head, pathways.len(), seed);
        Ok(BdnModel {
            variant,
            head,
            profile,
            styles,
            pathways,
            synthesis,
            frozen_pathways: false,
        })
    }

    pub fn synthesis_input_channels(&self) -> usize {
        synthesis_input_channels(self.profile, self.pathways.len())
    }

    pub fn forward(&self, x: &Tensor, hsv: &Tensor, mode: Mode) -> Result<BdnTrace> {
        check_padded_input(x)?;
        let s = x.shape();
        let expect = Shape::new(s.n, HSV_CHANNELS, s.h / HSV_DOWNSAMPLE, s.w / HSV_DOWNSAMPLE);
        if hsv.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "hsv planes",
                expected: expect.to_string(),
                actual: hsv.shape().to_string(),
            });
        }
        let mut acts = Vec::with_capacity(self.pathways.len());
        for (i, p) in self.pathways.iter().enumerate() {
            acts.push(p.forward(x, sub_mode(mode, i as u64 + 1))?);
        }
        let mut parts: Vec<&Tensor> = vec![hsv];
        parts.extend(acts.iter().map(|a| &a.output));
        let attributes = Tensor::concat_channels(&parts)?;
        let synthesis = self.synthesis.forward(&attributes, sub_mode(mode, 0))?;
        Ok(BdnTrace {
            pathways: acts,
            synthesis,
        })
    }

    /// Head output for one image, `(1, head channels, 1, 1)`.
    pub fn run_image(&self, img: &RgbImage, mode: Mode) -> Result<Tensor> {
        let (x, hsv) = prepare_image(img, true)?;
        Ok(self.forward(&x, &hsv.expect("hsv requested"), mode)?.synthesis.output)
    }

    /// Accumulates gradients; pathways are skipped when frozen.
    pub fn backward(&mut self, trace: &BdnTrace, grad_out: &Tensor) -> Result<()> {
        let want = !self.frozen_pathways;
        let g = self.synthesis.backward(&trace.synthesis, grad_out, want)?;
        if let Some(g) = g {
            let mut sizes = vec![HSV_CHANNELS];
            sizes.extend(self.pathways.iter().map(|_| self.profile.pathway_channels()));
            let parts = g.split_channels(&sizes)?;
            for ((p, a), gp) in self.pathways.iter_mut().zip(&trace.pathways).zip(&parts[1..]) {
                p.backward(a, gp, false)?;
            }
        }
        Ok(())
    }

    pub fn pathway_params(&self) -> Vec<(String, &Tensor)> {
        self.pathways
            .iter()
            .enumerate()
            .flat_map(|(i, p)| prefixed(&format!("pathway{}", i), p))
            .collect()
    }

    pub fn pathway_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.pathways
            .iter_mut()
            .enumerate()
            .flat_map(|(i, p)| prefixed_mut(&format!("pathway{}", i), p))
            .collect()
    }

    pub fn synthesis_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("synthesis", &self.synthesis)
    }

    pub fn synthesis_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("synthesis", &mut self.synthesis)
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.pathway_params();
        out.extend(self.synthesis_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.pathways.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("pathway{}", i), p));
        }
        out.extend(prefixed_mut("synthesis", &mut self.synthesis));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters of the conv1-conv3 attribute stage.
    pub fn attribute_param_count(&self) -> usize {
        self.pathway_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Head output for one image as a plain vector.
pub fn bdn_forward(model: &BdnModel, img: &RgbImage, mode: Mode) -> Result<Vec<f64>> {
    Ok(model.run_image(img, mode)?.into_data())
}

pub(crate) fn sub_mode(mode: Mode, stream: u64) -> Mode {
    match mode {
        Mode::Train { seed } => Mode::Train {
            seed: mix_seed(seed, stream),
        },
        Mode::Infer => Mode::Infer,
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, net: &'a Sequential) -> Vec<(String, &'a Tensor)> {
    net.params()
        .into_iter()
        .map(|(k, t)| (format!("{}.{}", prefix, k), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, net: &'a mut Sequential) -> Vec<(String, &'a mut Tensor)> {
    net.params_mut()
        .into_iter()
        .map(|(k, t)| (format!("{}.{}", prefix, k), t))
        .collect()
}

/// Attribute stage trained under the composite style label: block-diagonal
/// trunks whose concatenated maps feed one dense conv4 with two channels
/// per style.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeStack {
    pub profile: Profile,
    pub styles: Vec<usize>,
    pub trunks: Vec<Sequential>,
    pub head: Sequential,
}

pub struct CompositeTrace {
    trunks: Vec<Activations>,
    head: Activations,
}

impl CompositeTrace {
    pub fn output(&self) -> &Tensor {
        &self.head.output
    }
}

impl CompositeStack {
    pub fn new(profile: Profile, styles: Vec<usize>, trunks: Vec<Sequential>, seed: u64) -> Result<Self> {
        if styles.is_empty() || styles.len() != trunks.len() {
            return Err(invalid(format!(
                "composite stack needs one trunk per style ({} styles, {} trunks)",
                styles.len(),
                trunks.len()
            )));
        }
        for t in &trunks {
            check_trunk(t, profile)?;
        }
        let mut head = classifier(trunks.len() * profile.pathway_channels(), STYLE_CLASSES * styles.len());
        he_init(&mut head, seed);
        Ok(CompositeStack {
            profile,
            styles,
            trunks,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<CompositeTrace> {
        let mut trunks = Vec::with_capacity(self.trunks.len());
        for (i, t) in self.trunks.iter().enumerate() {
            trunks.push(t.forward(x, sub_mode(mode, i as u64 + 1))?);
        }
        let parts: Vec<&Tensor> = trunks.iter().map(|a| &a.output).collect();
        let head = self.head.forward(&Tensor::concat_channels(&parts)?, sub_mode(mode, 0))?;
        Ok(CompositeTrace { trunks, head })
    }

    pub fn backward(&mut self, trace: &CompositeTrace, grad_out: &Tensor) -> Result<()> {
        let g = self.head.backward(&trace.head, grad_out, true)?.expect("input gradient requested");
        let sizes = vec![self.profile.pathway_channels(); self.trunks.len()];
        for ((t, a), gp) in self.trunks.iter_mut().zip(&trace.trunks).zip(g.split_channels(&sizes)?) {
            t.backward(a, &gp, false)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.trunks.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("trunk{}", i), t));
        }
        out.extend(prefixed_mut("head", &mut self.head));
        out
    }
}

/// Mean over style groups of the two-way softmax cross-entropy. Channels
/// `2g` and `2g + 1` hold group `g`'s absent/present logits.
pub fn composite_label_loss(output: &Tensor, labels: &[Vec<bool>]) -> Result<(f64, Tensor)> {
    let s = output.shape();
    let groups = s.c / STYLE_CLASSES;
    if s.n != labels.len() || s.n == 0 || s.h != 1 || s.w != 1 || s.c % STYLE_CLASSES != 0 || groups == 0 {
        return Err(Error::ShapeMismatch {
            op: "composite_label_loss",
            expected: format!("{}x(2G)x1x1", labels.len()),
            actual: s.to_string(),
        });
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != groups) {
        return Err(invalid(format!("{} style flags for {} groups", bad.len(), groups)));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s);
    for g in 0..groups {
        let logits = Tensor::from_fn(Shape::new(s.n, 2, 1, 1), |n, c, _, _| output.at(n, 2 * g + c, 0, 0));
        let classes: Vec<usize> = labels.iter().map(|l| l[g] as usize).collect();
        let (l, lg) = softmax_xent(&logits, &classes)?;
        loss += l;
        for n in 0..s.n {
            for c in 0..2 {
                grad.set(n, 2 * g + c, 0, 0, lg.at(n, c, 0, 0) / groups as f64);
            }
        }
    }
    Ok((loss / groups as f64, grad))
}
