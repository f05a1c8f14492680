//! Model acquisition, input-shape resolution and a uniform layer view.

pub mod architectures;
pub mod fixtures;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::{Array3, ArrayD};
use profagent_nn::{checkpoint, Dense, Network, Op, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{io_err, Error, Result};
use crate::llm::{JsonSchemaSpec, JsonType, LlmGateway};

pub use architectures::{ResNetConfig, VitConfig};

/// Env var overriding the model and dataset cache root.
pub const CACHE_ENV: &str = "PROFAGENT_CACHE";
/// When set to `1`, registry models missing from the cache are downloaded.
pub const DOWNLOAD_ENV: &str = "PROFAGENT_ALLOW_DOWNLOAD";
const HUB_URL: &str = "https://huggingface.co";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Convolutional,
    Transformer,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Accelerator,
}

impl Device {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(Device::Cpu),
            "accelerator" | "gpu" | "cuda" => Ok(Device::Accelerator),
            other => Err(Error::Config(format!("unknown device `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Device::Cpu => "cpu",
            Device::Accelerator => "accelerator",
        }
    }

    /// Fails unless this build can execute on the device.
    pub fn ensure_available(self) -> Result<()> {
        match self {
            Device::Cpu => Ok(()),
            Device::Accelerator => Err(Error::DeviceUnavailable(
                "no accelerator runtime is compiled into this build".into(),
            )),
        }
    }
}

/// Where the weights of a handle came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightsSource {
    Fixture,
    Pretrained { path: PathBuf },
    /// Registry architecture with deterministic random weights (no cached checkpoint).
    SeededInit { seed: u64 },
    Checkpoint { path: PathBuf },
}

/// Image preprocessing paired with a model: resize, center crop, rescale, normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Resize the shortest edge to this before center cropping; `None` resizes straight to `height × width`.
    pub resize_shortest: Option<usize>,
    pub rescale: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub bicubic: bool,
}

impl Preprocessor {
    pub fn plain(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            resize_shortest: None,
            rescale: 1.0 / 255.0,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            bicubic: false,
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn apply<T: Scalar>(&self, img: &DynamicImage) -> ArrayD<T> {
        let filter = if self.bicubic { FilterType::CatmullRom } else { FilterType::Triangle };
        let img = match self.resize_shortest {
            Some(short) => {
                let (w, h) = (img.width().max(1), img.height().max(1));
                let scale = short as f64 / w.min(h) as f64;
                let (nw, nh) = (
                    ((w as f64 * scale).round() as u32).max(self.width as u32),
                    ((h as f64 * scale).round() as u32).max(self.height as u32),
                );
                let r = img.resize_exact(nw, nh, filter);
                let x = (nw - self.width as u32) / 2;
                let y = (nh - self.height as u32) / 2;
                r.crop_imm(x, y, self.width as u32, self.height as u32)
            }
            None => img.resize_exact(self.width as u32, self.height as u32, filter),
        };
        let mut out = Array3::<T>::zeros((self.channels, self.height, self.width));
        if self.channels == 1 {
            let g = img.to_luma8();
            for (x, y, p) in g.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = T::of((p[0] as f64 * self.rescale - self.mean[0]) / self.std[0]);
            }
        } else {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..self.channels.min(3) {
                    out[[c, y as usize, x as usize]] =
                        T::of((p[c] as f64 * self.rescale - self.mean[c]) / self.std[c]);
                }
            }
        }
        out.into_dyn()
    }
}

/// A loaded model plus everything needed to feed and interpret it.
#[derive(Debug, Clone)]
pub struct ModelHandle<T: Scalar = f32> {
    pub model_id: String,
    pub family: Family,
    pub device: Device,
    pub network: Network<T>,
    pub preprocessor: Preprocessor,
    pub labels: Vec<String>,
    /// Declared configuration values (`image_size`, `num_channels`, `preprocessor_size`).
    pub metadata: BTreeMap<String, Value>,
    pub weights: WeightsSource,
}

impl<T: Scalar> ModelHandle<T> {
    pub fn param_count(&self) -> u64 {
        self.network.param_count()
    }

    pub fn label(&self, index: usize) -> String {
        self.labels.get(index).cloned().unwrap_or_else(|| format!("LABEL_{index}"))
    }

    /// Shape of the tensors the preprocessor produces.
    pub fn input_shape(&self) -> Vec<usize> {
        self.preprocessor.output_shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Linear,
    Attention,
    Norm,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub qualified_name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub in_channels: usize,
    pub num_heads: Option<usize>,
    pub param_count: u64,
    pub has_bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    /// `float`, `qint8` or `float16` for dense layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub sequence_length: Option<usize>,
}

impl InputSpec {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, sequence_length: None }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::UnresolvableShape(format!("non-positive dimension in {self:?}")));
        }
        if self.sequence_length == Some(0) {
            return Err(Error::UnresolvableShape("sequence_length must be positive or null".into()));
        }
        Ok(())
    }
}

fn dense_descriptor<T: Scalar>(name: &str, d: &Dense<T>, params: u64) -> LayerDescriptor {
    let storage = match d {
        Dense::Float(_) => "float",
        Dense::Int8(_) => "qint8",
        Dense::Half(_) => "float16",
    };
    LayerDescriptor {
        qualified_name: name.to_string(),
        kind: LayerKind::Linear,
        out_channels: d.out_features(),
        in_channels: d.in_features(),
        num_heads: None,
        param_count: params,
        has_bias: d.bias().is_some(),
        conv: None,
        head_dim: None,
        storage: Some(storage.into()),
    }
}

fn dense_params<T: Scalar>(d: &Dense<T>) -> u64 {
    (d.in_features() * d.out_features() + d.bias().map_or(0, |b| b.len())) as u64
}

/// Every parameterized submodule, depth-first in definition order.
///
/// An attention block yields a container descriptor (zero own parameters)
/// followed by its query, key, value and output projections.
pub fn enumerate_layers<T: Scalar>(handle: &ModelHandle<T>) -> Vec<LayerDescriptor> {
    enumerate_network(&handle.network)
}

pub fn enumerate_network<T: Scalar>(net: &Network<T>) -> Vec<LayerDescriptor> {
    let mut out = Vec::new();
    for node in net.nodes() {
        let name = node.name.clone();
        let base = |kind, out_c, in_c, has_bias| LayerDescriptor {
            qualified_name: name.clone(),
            kind,
            out_channels: out_c,
            in_channels: in_c,
            num_heads: None,
            param_count: node.param_count(),
            has_bias,
            conv: None,
            head_dim: None,
            storage: None,
        };
        match &node.op {
            Op::Conv2d(c) => {
                let mut d = base(LayerKind::Conv2d, c.out_channels(), c.in_channels(), c.bias.is_some());
                d.conv = Some(ConvGeometry {
                    kernel: c.kernel(),
                    stride: c.stride,
                    padding: c.padding,
                    groups: c.groups,
                });
                out.push(d);
            }
            Op::Linear(d) => out.push(dense_descriptor(&name, d, node.param_count())),
            Op::BatchNorm2d(bn) => out.push(base(LayerKind::Norm, bn.channels(), bn.channels(), true)),
            Op::LayerNorm(ln) => out.push(base(LayerKind::Norm, ln.dim(), ln.dim(), true)),
            Op::Attention(a) => {
                let mut d = base(LayerKind::Attention, a.output.dense.out_features(), a.embed_dim(), true);
                d.param_count = 0;
                d.num_heads = Some(a.num_heads);
                d.head_dim = Some(a.head_dim);
                out.push(d);
                for p in a.projections() {
                    out.push(dense_descriptor(&p.name, &p.dense, dense_params(&p.dense)));
                }
            }
            Op::ClassToken(c) => out.push(base(LayerKind::Other, c.token.len(), c.token.len(), false)),
            Op::PositionEmbedding(p) => {
                out.push(base(LayerKind::Other, p.table.shape()[1], p.table.shape()[1], false))
            }
            _ => {}
        }
    }
    out
}

/// Cache root: `$PROFAGENT_CACHE`, else `~/.cache/profagent`.
pub fn cache_dir() -> PathBuf {
    if let Some(p) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("profagent")
}

pub fn model_cache_path(model_id: &str) -> PathBuf {
    cache_dir().join("models").join(model_id.replace('/', "--"))
}

struct RegistryEntry {
    id: &'static str,
    family: Family,
}

const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry { id: "google/vit-base-patch16-224", family: Family::Transformer },
    RegistryEntry { id: "facebook/deit-base-patch16-224", family: Family::Transformer },
    RegistryEntry { id: "microsoft/resnet-101", family: Family::Convolutional },
    RegistryEntry { id: "microsoft/resnet-50", family: Family::Convolutional },
];

/// Model ids known to the registry, fixtures first.
pub fn known_models() -> Vec<&'static str> {
    fixtures::NAMES.iter().copied().chain(REGISTRY.iter().map(|e| e.id)).collect()
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn registry_network<T: Scalar>(id: &str, rng: &mut ChaCha8Rng) -> Result<(Network<T>, Preprocessor)> {
    Ok(match id {
        "google/vit-base-patch16-224" | "facebook/deit-base-patch16-224" => {
            let net = architectures::vit(&VitConfig::base_patch16_224(), rng)?;
            let pre = if id.starts_with("google") {
                Preprocessor { mean: vec![0.5; 3], std: vec![0.5; 3], ..Preprocessor::plain(3, 224, 224) }
            } else {
                Preprocessor {
                    resize_shortest: Some(256),
                    mean: IMAGENET_MEAN.to_vec(),
                    std: IMAGENET_STD.to_vec(),
                    bicubic: true,
                    ..Preprocessor::plain(3, 224, 224)
                }
            };
            (net, pre)
        }
        "microsoft/resnet-101" | "microsoft/resnet-50" => {
            let cfg = if id.ends_with("101") { ResNetConfig::resnet101() } else { ResNetConfig::resnet50() };
            let net = architectures::resnet(&cfg, rng)?;
            let pre = Preprocessor {
                resize_shortest: Some(256),
                mean: IMAGENET_MEAN.to_vec(),
                std: IMAGENET_STD.to_vec(),
                bicubic: true,
                ..Preprocessor::plain(3, 224, 224)
            };
            (net, pre)
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    })
}

#[derive(Debug, Default, Deserialize)]
struct HubConfig {
    #[serde(default)]
    id2label: BTreeMap<String, String>,
    #[serde(default)]
    image_size: Option<Value>,
    #[serde(default)]
    num_channels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct HubPreprocessorConfig {
    #[serde(default)]
    size: Option<Value>,
    #[serde(default)]
    crop_pct: Option<f64>,
    #[serde(default)]
    image_mean: Option<Vec<f64>>,
    #[serde(default)]
    image_std: Option<Vec<f64>>,
    #[serde(default)]
    rescale_factor: Option<f64>,
}

fn read_json_opt<D: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<D> {
    if !path.exists() {
        return Ok(D::default());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn fetch(url: &str, dest: &Path) -> Result<()> {
    let mut resp = ureq::get(url)
        .call()
        .map_err(|e| Error::UnknownModel(format!("{url}: {e}")))?;
    let tmp = dest.with_extension("part");
    let mut file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    std::io::copy(&mut resp.body_mut().as_reader(), &mut file).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, dest).map_err(io_err(dest))?;
    Ok(())
}

fn download(model_id: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for file in ["config.json", "preprocessor_config.json", "model.safetensors"] {
        let dest = dir.join(file);
        if !dest.exists() {
            fetch(&format!("{HUB_URL}/{model_id}/resolve/main/{file}"), &dest)?;
        }
    }
    Ok(())
}

fn labels_from(cfg: &HubConfig) -> Vec<String> {
    let mut pairs: Vec<(usize, String)> = cfg
        .id2label
        .iter()
        .filter_map(|(k, v)| k.parse().ok().map(|i| (i, v.clone())))
        .collect();
    pairs.sort();
    pairs.into_iter().map(|(_, v)| v).collect()
}

fn apply_preprocessor_config(pre: &mut Preprocessor, cfg: &HubPreprocessorConfig) {
    if let Some(size) = &cfg.size {
        if let (Some(h), Some(w)) = (size.get("height").and_then(Value::as_u64), size.get("width").and_then(Value::as_u64))
        {
            pre.height = h as usize;
            pre.width = w as usize;
            pre.resize_shortest = None;
        } else if let Some(s) = size.get("shortest_edge").and_then(Value::as_u64) {
            let s = s as usize;
            let crop = cfg.crop_pct.unwrap_or(1.0);
            pre.height = s;
            pre.width = s;
            pre.resize_shortest = Some((s as f64 / crop).floor() as usize);
        } else if let Some(s) = size.as_u64() {
            pre.height = s as usize;
            pre.width = s as usize;
        }
    }
    if let Some(m) = &cfg.image_mean {
        pre.mean = m.clone();
    }
    if let Some(s) = &cfg.image_std {
        pre.std = s.clone();
    }
    if let Some(r) = cfg.rescale_factor {
        pre.rescale = r;
    }
}

fn size_value(v: &Value) -> Option<Value> {
    match v {
        Value::Number(_) => Some(v.clone()),
        Value::Array(a) if a.len() == 2 => Some(v.clone()),
        Value::Object(o) => {
            if let (Some(h), Some(w)) = (o.get("height"), o.get("width")) {
                Some(json!([h, w]))
            } else {
                o.get("shortest_edge").cloned()
            }
        }
        _ => None,
    }
}

fn acquire_registry<T: Scalar>(entry: &RegistryEntry, device: Device) -> Result<ModelHandle<T>> {
    let seed = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut network, mut preprocessor) = registry_network::<T>(entry.id, &mut rng)?;
    let dir = model_cache_path(entry.id);
    let weights_path = dir.join("model.safetensors");
    if !weights_path.exists() && std::env::var(DOWNLOAD_ENV).as_deref() == Ok("1") {
        download(entry.id, &dir)?;
    }
    let hub_cfg: HubConfig = read_json_opt(&dir.join("config.json"))?;
    let pre_cfg: HubPreprocessorConfig = read_json_opt(&dir.join("preprocessor_config.json"))?;
    apply_preprocessor_config(&mut preprocessor, &pre_cfg);
    let weights = if weights_path.exists() {
        let bytes = std::fs::read(&weights_path).map_err(io_err(&weights_path))?;
        let missing = checkpoint::fill_from_bytes(&mut network, &bytes)?;
        if let Some(first) = missing.first() {
            return Err(Error::Nn(profagent_nn::NnError::MissingTensor(first.clone())));
        }
        WeightsSource::Pretrained { path: weights_path }
    } else {
        WeightsSource::SeededInit { seed }
    };
    let mut labels = labels_from(&hub_cfg);
    if labels.is_empty() {
        let n = network.nodes().last().map_or(0, |n| match &n.op {
            Op::Linear(d) => d.out_features(),
            _ => 0,
        });
        labels = (0..n).map(|i| format!("LABEL_{i}")).collect();
    }
    let mut metadata = BTreeMap::new();
    let image_size = hub_cfg.image_size.clone().unwrap_or(json!(224));
    metadata.insert("image_size".to_string(), image_size);
    metadata.insert("num_channels".to_string(), json!(hub_cfg.num_channels.unwrap_or(3)));
    if let Some(v) = pre_cfg.size.as_ref().and_then(size_value) {
        metadata.insert("preprocessor_size".to_string(), v);
    } else {
        metadata.insert("preprocessor_size".to_string(), json!([preprocessor.height, preprocessor.width]));
    }
    network.set_input_shape(preprocessor.output_shape());
    Ok(ModelHandle {
        model_id: entry.id.to_string(),
        family: entry.family,
        device,
        network,
        preprocessor,
        labels,
        metadata,
        weights,
    })
}

/// Load a model by registry id, fixture name, or saved handle directory.
pub fn acquire_model<T: Scalar>(model_id: &str, device: Device) -> Result<ModelHandle<T>> {
    device.ensure_available()?;
    if let Some(h) = fixtures::build::<T>(model_id) {
        let mut h = h?;
        h.device = device;
        return Ok(h);
    }
    if let Some(entry) = REGISTRY.iter().find(|e| e.id == model_id) {
        return acquire_registry(entry, device);
    }
    let path = Path::new(model_id);
    if path.join(HANDLE_FILE).exists() {
        let mut h = load_handle(path)?;
        h.device = device;
        return Ok(h);
    }
    Err(Error::UnknownModel(model_id.to_string()))
}

const HANDLE_FILE: &str = "handle.json";
const WEIGHTS_FILE: &str = "model.safetensors";

#[derive(Serialize, Deserialize)]
struct HandleMeta {
    model_id: String,
    family: Family,
    preprocessor: Preprocessor,
    labels: Vec<String>,
    metadata: BTreeMap<String, Value>,
    weights: WeightsSource,
}

/// Write `model.safetensors` plus a `handle.json` sidecar into `dir`.
pub fn save_handle<T: Scalar>(handle: &ModelHandle<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = HandleMeta {
        model_id: handle.model_id.clone(),
        family: handle.family,
        preprocessor: handle.preprocessor.clone(),
        labels: handle.labels.clone(),
        metadata: handle.metadata.clone(),
        weights: handle.weights.clone(),
    };
    let mut tags = BTreeMap::new();
    tags.insert("model_id".to_string(), handle.model_id.clone());
    checkpoint::save(&handle.network, &dir.join(WEIGHTS_FILE), &tags)?;
    crate::artifacts::write_json(&dir.join(HANDLE_FILE), &meta)
}

pub fn load_handle<T: Scalar>(dir: &Path) -> Result<ModelHandle<T>> {
    let text = std::fs::read_to_string(dir.join(HANDLE_FILE)).map_err(io_err(dir.join(HANDLE_FILE)))?;
    let meta: HandleMeta = serde_json::from_str(&text)?;
    let (network, _) = checkpoint::load::<T>(&dir.join(WEIGHTS_FILE))?;
    Ok(ModelHandle {
        model_id: meta.model_id,
        family: meta.family,
        device: Device::Cpu,
        network,
        preprocessor: meta.preprocessor,
        labels: meta.labels,
        metadata: meta.metadata,
        weights: WeightsSource::Checkpoint { path: dir.join(WEIGHTS_FILE) },
    })
}

/// Deterministic unit-scale probe tensor, uniform in `[-1, 1)`.
pub fn probe_input<T: Scalar>(shape: &[usize], seed: u64) -> ArrayD<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches element count")
}

pub fn input_shape_prompt(model_id: &str) -> String {
    format!(
        "Provide the expected input dimensions for '{model_id}' in JSON format. \
         Fields should be: channels, height, width, sequence_length (use null if not applicable)."
    )
}

pub fn input_shape_schema() -> JsonSchemaSpec {
    JsonSchemaSpec::new(vec![
        ("channels", vec![JsonType::Integer]),
        ("height", vec![JsonType::Integer]),
        ("width", vec![JsonType::Integer]),
        ("sequence_length", vec![JsonType::Integer, JsonType::Null]),
    ])
    .with_bounds("channels", Some(1.0), None)
    .with_bounds("height", Some(1.0), None)
    .with_bounds("width", Some(1.0), None)
    .with_bounds("sequence_length", Some(1.0), None)
}

fn hw_from(v: &Value) -> Option<(usize, usize)> {
    match v {
        Value::Number(n) => n.as_u64().map(|s| (s as usize, s as usize)),
        Value::Array(a) if a.len() == 2 => Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)),
        Value::Object(_) => size_value(v).as_ref().and_then(hw_from),
        _ => None,
    }
}

fn metadata_channels(metadata: &BTreeMap<String, Value>) -> Option<usize> {
    ["num_channels", "channels"]
        .iter()
        .find_map(|k| metadata.get(*k).and_then(Value::as_u64))
        .map(|c| c as usize)
}

/// Shape from declared metadata: config image size first, then the preprocessor size.
pub fn spec_from_metadata(metadata: &BTreeMap<String, Value>) -> Option<InputSpec> {
    let channels = metadata_channels(metadata)?;
    let (h, w) = metadata
        .get("image_size")
        .and_then(hw_from)
        .or_else(|| metadata.get("preprocessor_size").and_then(hw_from))?;
    let spec = InputSpec::image(channels, h, w);
    spec.validate().ok().map(|_| spec)
}

/// How an input spec was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedInput {
    pub spec: InputSpec,
    /// `llm` or `metadata`.
    pub source: String,
    pub notes: Vec<String>,
}

/// Ask the LLM for the input dimensions, falling back to declared metadata.
///
/// When both the LLM answer and the preprocessor size are known and disagree,
/// the preprocessor wins.
pub fn resolve_input_spec(
    model_id: &str,
    metadata: &BTreeMap<String, Value>,
    llm: &mut LlmGateway,
) -> Result<ResolvedInput> {
    let mut notes = Vec::new();
    let llm_spec = match llm.complete_json(&input_shape_prompt(model_id), &input_shape_schema(), None) {
        Ok((value, _)) => {
            let get = |k: &str| value.get(k).and_then(Value::as_u64).unwrap_or(0) as usize;
            let spec = InputSpec {
                channels: get("channels"),
                height: get("height"),
                width: get("width"),
                sequence_length: value.get("sequence_length").and_then(Value::as_u64).map(|v| v as usize),
            };
            match spec.validate() {
                Ok(()) => Some(spec),
                Err(e) => {
                    notes.push(format!("LLM shape rejected: {e}"));
                    None
                }
            }
        }
        Err(e) => {
            notes.push(format!("LLM unavailable for input shape: {e}"));
            None
        }
    };
    if let Some(mut spec) = llm_spec {
        if let Some((h, w)) = metadata.get("preprocessor_size").and_then(hw_from) {
            if (spec.height, spec.width) != (h, w) {
                notes.push(format!(
                    "LLM shape {}x{} conflicts with preprocessor {h}x{w}; using preprocessor",
                    spec.height, spec.width
                ));
                spec.height = h;
                spec.width = w;
            }
        }
        if let Some(c) = metadata_channels(metadata) {
            if c != spec.channels {
                notes.push(format!("LLM channels {} conflict with declared {c}; using declared", spec.channels));
                spec.channels = c;
            }
        }
        return Ok(ResolvedInput { spec, source: "llm".into(), notes });
    }
    match spec_from_metadata(metadata) {
        Some(spec) => Ok(ResolvedInput { spec, source: "metadata".into(), notes }),
        None => Err(Error::UnresolvableShape(model_id.to_string())),
    }
}
