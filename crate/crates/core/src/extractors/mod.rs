//! Face-feature extractors behind one interface, with shared preprocessing
//! for photos and grayscale sketches.

mod resnet;
mod toy;
mod vgg;

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear_matrix, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{ImageRange, ImageTensor};

pub use resnet::{random_resnet50_params, ResNet50};
pub use toy::{ToyExtractor, TOY_EXTRACTOR_FORMAT, TOY_EXTRACTOR_SEED};
pub use vgg::{random_vgg16_params, Vgg16};

/// Extractor used to initialize the latent code from a sketch.
pub const INIT_EXTRACTOR: &str = "vggface";
/// Appearance extractors of the full loss, in term order.
pub const APPEARANCE_EXTRACTORS: [&str; 3] = ["vggface", "vggface2", "vgg16"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Toy,
    Vgg16,
    Resnet50,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub extractor_id: String,
    pub arch: Arch,
    pub input_resolution: usize,
    /// Per-channel RGB mean, applied to unit-range pixels.
    pub mean: [f64; 3],
    /// Per-channel divisor applied after mean subtraction.
    pub scale: [f64; 3],
    pub feature_dim: usize,
    pub differentiable: bool,
    #[serde(default)]
    pub l2_normalize: bool,
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.input_resolution == 0 {
            return Err(Error::Config(format!(
                "extractor `{}` needs positive feature_dim and input_resolution",
                self.extractor_id
            )));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!(
                "extractor `{}` has invalid normalization constants",
                self.extractor_id
            )));
        }
        Ok(())
    }

    pub fn toy() -> Self {
        ExtractorSpec {
            extractor_id: "toy".into(),
            arch: Arch::Toy,
            input_resolution: 32,
            mean: [0.5; 3],
            scale: [0.5; 3],
            feature_dim: toy::TOY_FEATURE_DIM,
            differentiable: true,
            l2_normalize: false,
        }
    }

    pub fn vggface() -> Self {
        ExtractorSpec {
            extractor_id: "vggface".into(),
            arch: Arch::Vgg16,
            input_resolution: 224,
            mean: [129.1863 / 255.0, 104.7624 / 255.0, 93.5940 / 255.0],
            scale: [1.0 / 255.0; 3],
            feature_dim: 4096,
            differentiable: true,
            l2_normalize: false,
        }
    }

    pub fn vggface2() -> Self {
        ExtractorSpec {
            extractor_id: "vggface2".into(),
            arch: Arch::Resnet50,
            input_resolution: 224,
            mean: [131.0912 / 255.0, 103.8827 / 255.0, 91.4953 / 255.0],
            scale: [1.0 / 255.0; 3],
            feature_dim: 2048,
            differentiable: true,
            l2_normalize: false,
        }
    }

    pub fn vgg16() -> Self {
        ExtractorSpec {
            extractor_id: "vgg16".into(),
            arch: Arch::Vgg16,
            input_resolution: 224,
            mean: [0.485, 0.456, 0.406],
            scale: [0.229, 0.224, 0.225],
            feature_dim: 4096,
            differentiable: true,
            l2_normalize: false,
        }
    }
}

/// Descriptor from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    extractor_id: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, extractor_id: &str) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ShapeMismatch("empty feature vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of `{extractor_id}`")));
        }
        Ok(FeatureVector { values, extractor_id: extractor_id.to_string() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn expect_extractor(&self, id: &str) -> Result<()> {
        if self.extractor_id != id {
            return Err(Error::ExtractorMismatch {
                expected: id.to_string(),
                found: self.extractor_id.clone(),
            });
        }
        Ok(())
    }

    pub fn distance(&self, other: &FeatureVector) -> Result<f64> {
        other.expect_extractor(&self.extractor_id)?;
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", self.dim(), other.dim())));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Network mapping `N × 3 × R × R` normalized input to `N × d` features.
pub trait FeatureNet: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t>;
}

/// Differentiable preprocessing of an `N × C × H × W` tensor with pixels in
/// `range`: unit range, gray → RGB, bilinear resize, normalization.
pub fn preprocess_var<'t>(x: Var<'t>, range: &ImageRange, spec: &ExtractorSpec) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected NCHW input, got {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if h == 0 || w == 0 || shape[0] == 0 {
        return Err(Error::DegenerateImage(format!("{h}x{w} input has zero area")));
    }
    if c != 1 && c != 3 {
        return Err(Error::ShapeMismatch(format!("images need 1 or 3 channels, got {c}")));
    }
    let res = spec.input_resolution;
    let unit = match range {
        ImageRange::Unit => x,
        ImageRange::SignedUnit => x.scale(0.5).add_scalar(0.5),
        ImageRange::Normalized(id) => {
            if *id != spec.extractor_id {
                return Err(Error::ExtractorMismatch { expected: spec.extractor_id.clone(), found: id.clone() });
            }
            if c != 3 || h != res || w != res {
                return Err(Error::ShapeMismatch(format!(
                    "input normalized for `{id}` must be 3x{res}x{res}, got {c}x{h}x{w}"
                )));
            }
            return Ok(x);
        }
    };
    let rgb = if c == 1 { unit.repeat_channels(3) } else { unit };
    let sized = if h == res && w == res {
        rgb
    } else {
        rgb.resample(Arc::new(bilinear_matrix(res, h)), Arc::new(bilinear_matrix(res, w)))
    };
    let mul: Vec<f64> = spec.scale.iter().map(|s| 1.0 / s).collect();
    Ok(sized.affine_channels_const(&mul, &spec.mean))
}

/// Resized, normalized copy of `img` tagged for `spec`. Already-conforming
/// inputs are returned unchanged.
pub fn preprocess(img: &ImageTensor, spec: &ExtractorSpec) -> Result<ImageTensor> {
    let tape = Tape::new();
    let x = tape.constant(img.to_nchw());
    let y = preprocess_var(x, img.range(), spec)?;
    ImageTensor::from_nchw(&y.value(), ImageRange::Normalized(spec.extractor_id.clone()))
}

/// Spec plus (optionally) loaded weights.
#[derive(Clone)]
pub struct Extractor {
    spec: ExtractorSpec,
    net: Option<Arc<dyn FeatureNet>>,
    weights_id: Option<String>,
}

impl fmt::Debug for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Extractor")
            .field("spec", &self.spec)
            .field("weights_id", &self.weights_id)
            .finish()
    }
}

impl Extractor {
    pub fn unloaded(spec: ExtractorSpec) -> Self {
        Extractor { spec, net: None, weights_id: None }
    }

    /// Binds weights; the spec's feature_dim follows the network.
    pub fn with_net(mut spec: ExtractorSpec, net: Arc<dyn FeatureNet>, weights_id: String) -> Result<Self> {
        spec.feature_dim = net.feature_dim();
        spec.validate()?;
        Ok(Extractor { spec, net: Some(net), weights_id: Some(weights_id) })
    }

    /// Toy extractor with weights from its fixed seed.
    pub fn toy() -> Self {
        let net = ToyExtractor::from_seed(TOY_EXTRACTOR_SEED);
        let id = net.checkpoint_id();
        Extractor::with_net(ExtractorSpec::toy(), Arc::new(net), id).expect("toy spec is valid")
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.extractor_id
    }

    pub fn is_loaded(&self) -> bool {
        self.net.is_some()
    }

    pub fn weights_id(&self) -> Option<&str> {
        self.weights_id.as_deref()
    }

    fn net(&self) -> Result<&Arc<dyn FeatureNet>> {
        self.net.as_ref().ok_or_else(|| Error::WeightsMissing(self.spec.extractor_id.clone()))
    }

    /// Differentiable features of a single `1 × C × H × W` image; returns a
    /// length-d vector.
    pub fn features_var<'t>(&self, x: Var<'t>, range: &ImageRange) -> Result<Var<'t>> {
        let net = self.net()?;
        let shape = x.shape();
        if shape.first() != Some(&1) {
            return Err(Error::ShapeMismatch(format!("expected a single image, got {shape:?}")));
        }
        let input = preprocess_var(x, range, &self.spec)?;
        let f = net.forward(x.tape(), input);
        let d = self.spec.feature_dim;
        let f = f.reshape(&[d]);
        if f.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activations of `{}`", self.spec.extractor_id)));
        }
        Ok(if self.spec.l2_normalize {
            f.scale_by(f.norm2().add_scalar(1e-12).powf(-1.0))
        } else {
            f
        })
    }

    pub fn extract(&self, img: &ImageTensor) -> Result<FeatureVector> {
        let tape = Tape::new();
        let x = tape.constant(img.to_nchw());
        let f = self.features_var(x, img.range())?;
        FeatureVector::new(f.value().iter().copied().collect(), &self.spec.extractor_id)
    }
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    id: String,
    arch: Option<Arch>,
    weights: Option<String>,
    input_resolution: Option<usize>,
    mean: Option<[f64; 3]>,
    scale: Option<[f64; 3]>,
    l2_normalize: Option<bool>,
    stride_in_1x1: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct RegistryManifest {
    #[serde(default)]
    extractor: Vec<ManifestEntry>,
}

/// Extractors by id, in registration order.
#[derive(Clone, Debug)]
pub struct Registry {
    entries: Vec<Extractor>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Registry { entries: Vec::new() }
    }

    /// Toy extractor with weights, plus the pretrained specs awaiting weights.
    pub fn builtin() -> Self {
        Registry {
            entries: vec![
                Extractor::toy(),
                Extractor::unloaded(ExtractorSpec::vggface()),
                Extractor::unloaded(ExtractorSpec::vggface2()),
                Extractor::unloaded(ExtractorSpec::vgg16()),
            ],
        }
    }

    pub fn register(&mut self, ext: Extractor) -> Result<()> {
        ext.spec.validate()?;
        if self.entries.iter().any(|e| e.id() == ext.id()) {
            return Err(Error::Duplicate(format!("extractor `{}` already registered", ext.id())));
        }
        self.entries.push(ext);
        Ok(())
    }

    /// Replaces an unloaded entry with a loaded one.
    pub fn attach(&mut self, ext: Extractor) -> Result<()> {
        match self.entries.iter_mut().find(|e| e.id() == ext.id()) {
            Some(slot) if slot.is_loaded() => {
                Err(Error::Duplicate(format!("extractor `{}` already has weights", ext.id())))
            }
            Some(slot) => {
                *slot = ext;
                Ok(())
            }
            None => self.register(ext),
        }
    }

    pub fn get(&self, id: &str) -> Result<&Extractor> {
        self.entries
            .iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| Error::Unknown(format!("extractor `{id}`")))
    }

    pub fn specs(&self) -> Vec<ExtractorSpec> {
        self.entries.iter().map(|e| e.spec.clone()).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id()).collect()
    }

    /// Built-in registry plus the entries of a TOML manifest of
    /// `[[extractor]]` tables; weight paths are relative to the manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let parsed: RegistryManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reg = Registry::builtin();
        for entry in parsed.extractor {
            let mut spec = match reg.get(&entry.id) {
                Ok(e) => e.spec.clone(),
                Err(_) => {
                    let arch = entry.arch.ok_or_else(|| {
                        Error::Config(format!("extractor `{}` needs an `arch`", entry.id))
                    })?;
                    ExtractorSpec {
                        extractor_id: entry.id.clone(),
                        arch,
                        input_resolution: 0,
                        mean: [0.0; 3],
                        scale: [1.0; 3],
                        feature_dim: 1,
                        differentiable: true,
                        l2_normalize: false,
                    }
                }
            };
            if let Some(a) = entry.arch {
                spec.arch = a;
            }
            if let Some(r) = entry.input_resolution {
                spec.input_resolution = r;
            }
            if let Some(m) = entry.mean {
                spec.mean = m;
            }
            if let Some(s) = entry.scale {
                spec.scale = s;
            }
            if let Some(l) = entry.l2_normalize {
                spec.l2_normalize = l;
            }
            spec.validate()?;
            let ext = match &entry.weights {
                None => Extractor::unloaded(spec),
                Some(w) => {
                    let (net, wid) =
                        load_net(spec.arch, &base.join(w), spec.input_resolution, entry.stride_in_1x1.unwrap_or(true))?;
                    Extractor::with_net(spec, net, wid)?
                }
            };
            if let Some(slot) = reg.entries.iter_mut().find(|e| e.id() == ext.id()) {
                *slot = ext;
            } else {
                reg.register(ext)?;
            }
        }
        Ok(reg)
    }
}

/// Loads a weight file for `arch`. VGG and ResNet weights are bare
/// safetensors with torchvision tensor names; layer widths follow the file.
pub fn load_net(
    arch: Arch,
    path: &Path,
    resolution: usize,
    stride_in_1x1: bool,
) -> Result<(Arc<dyn FeatureNet>, String)> {
    Ok(match arch {
        Arch::Toy => {
            let t = ToyExtractor::load(path)?;
            let id = t.checkpoint_id();
            (Arc::new(t), id)
        }
        Arch::Vgg16 => {
            let (params, id) = checkpoint::read_tensors(path, "vgg16")?;
            (Arc::new(Vgg16::from_params(params, resolution)?), id)
        }
        Arch::Resnet50 => {
            let (params, id) = checkpoint::read_tensors(path, "resnet50")?;
            (Arc::new(ResNet50::from_params(params, stride_in_1x1)?), id)
        }
    })
}

/// Specs of the default registry.
pub fn list_extractors() -> Vec<ExtractorSpec> {
    Registry::builtin().specs()
}
