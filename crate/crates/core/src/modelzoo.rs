//! Classifier zoo and the index-preserving autoencoder.
//!
//! Four classifier families stand in for the usual ImageNet backbones at
//! CIFAR scale: a plain conv stack, a deep batch-normalised stack, a
//! residual network and a multi-branch (inception-style) network. The
//! autoencoder is a SegNet-style encoder/decoder whose decoder upsamples with
//! the max-pooling indices recorded by the encoder.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, ForwardCtx, Grads, Layer, Mode, ParamStore, Tape};
use crate::tensor::{ImageBatch, Tensor};

pub use crate::nn::{pool_with_indices, unpool_with_indices, PoolingRecord};

/// Versioned architecture library shipped with the crate.
pub const ZOO_V1: &str = include_str!("../specs/zoo-v1.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PlainConv,
    DeepBn,
    Residual,
    MultiBranch,
    AeSegnet,
}

impl Family {
    pub fn is_classifier(self) -> bool {
        !matches!(self, Family::AeSegnet)
    }
}

fn default_dense() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub family: Family,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub class_count: usize,
    pub stage_widths: Vec<usize>,
    pub pool_stages: usize,
    #[serde(default)]
    pub batch_norm: bool,
    /// Hidden width of the plain-conv classifier head.
    #[serde(default = "default_dense")]
    pub dense_width: usize,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stage_widths.is_empty() {
            problems.push("stage_widths must be non-empty".to_string());
        }
        if self.stage_widths.contains(&0) {
            problems.push("stage widths must be positive".to_string());
        }
        if self.pool_stages > self.stage_widths.len() {
            problems.push(format!(
                "pool_stages {} exceeds stage count {}",
                self.pool_stages,
                self.stage_widths.len()
            ));
        }
        let factor = 1usize << self.pool_stages.min(16);
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            problems.push("input shape must be positive".to_string());
        }
        if h % factor != 0 || w % factor != 0 {
            problems.push(format!(
                "input {h}×{w} not divisible by downsampling factor {factor}"
            ));
        }
        if self.family.is_classifier() && self.class_count < 2 {
            problems.push("classifiers need class_count ≥ 2".to_string());
        }
        if self.family == Family::MultiBranch && self.stage_widths.iter().any(|&w| w < 3) {
            problems.push("multi-branch stages need width ≥ 3".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::shape(format!("{}: {}", self.name, problems.join("; "))))
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.pool_stages
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ZooFile {
    version: u32,
    #[serde(rename = "architecture")]
    architectures: Vec<ArchitectureSpec>,
}

/// Parses an architecture library (TOML with `[[architecture]]` tables).
pub fn parse_zoo(text: &str) -> Result<BTreeMap<String, ArchitectureSpec>> {
    let zoo: ZooFile = toml::from_str(text).map_err(|e| Error::Format {
        what: "architecture library",
        detail: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for spec in zoo.architectures {
        spec.validate()?;
        if out.insert(spec.name.clone(), spec).is_some() {
            return Err(Error::Format {
                what: "architecture library",
                detail: "duplicate architecture name".into(),
            });
        }
    }
    Ok(out)
}

/// The built-in library.
pub fn builtin_zoo() -> BTreeMap<String, ArchitectureSpec> {
    parse_zoo(ZOO_V1).expect("bundled zoo parses")
}

fn conv_block(layers: &mut Vec<Layer>, name: &str, cin: usize, cout: usize, k: usize, bn: bool) {
    layers.push(Layer::conv(name, cin, cout, k));
    if bn {
        layers.push(Layer::bn(format!("{name}.bn"), cout));
    }
    layers.push(Layer::Relu);
}

fn classifier_layers(spec: &ArchitectureSpec) -> Vec<Layer> {
    let mut layers = Vec::new();
    let [c, h, w] = spec.input_shape;
    let widths = &spec.stage_widths;
    let pool = || Layer::MaxPool { window: 2, export: false };
    match spec.family {
        Family::PlainConv => {
            let mut prev = c;
            for (k, &wd) in widths.iter().enumerate() {
                conv_block(&mut layers, &format!("s{k}.conv"), prev, wd, 3, spec.batch_norm);
                if k < spec.pool_stages {
                    layers.push(pool());
                }
                prev = wd;
            }
            let f = spec.downsampling();
            layers.push(Layer::Flatten);
            layers.push(Layer::linear("fc1", prev * (h / f) * (w / f), spec.dense_width));
            layers.push(Layer::Relu);
            layers.push(Layer::linear("fc2", spec.dense_width, spec.class_count));
        }
        Family::DeepBn => {
            let mut prev = c;
            for (k, &wd) in widths.iter().enumerate() {
                conv_block(&mut layers, &format!("s{k}.conv1"), prev, wd, 3, true);
                conv_block(&mut layers, &format!("s{k}.conv2"), wd, wd, 3, true);
                if k < spec.pool_stages {
                    layers.push(pool());
                }
                prev = wd;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::linear("fc", prev, spec.class_count));
        }
        Family::Residual => {
            conv_block(&mut layers, "stem", c, widths[0], 3, true);
            let mut prev = widths[0];
            for (k, &wd) in widths.iter().enumerate() {
                let p = format!("s{k}");
                let body = vec![
                    Layer::conv(format!("{p}.conv1"), prev, wd, 3),
                    Layer::bn(format!("{p}.bn1"), wd),
                    Layer::Relu,
                    Layer::conv(format!("{p}.conv2"), wd, wd, 3),
                    Layer::bn(format!("{p}.bn2"), wd),
                ];
                let shortcut = if prev == wd {
                    vec![]
                } else {
                    vec![
                        Layer::conv(format!("{p}.proj"), prev, wd, 1),
                        Layer::bn(format!("{p}.proj.bn"), wd),
                    ]
                };
                layers.push(Layer::Residual { body, shortcut });
                layers.push(Layer::Relu);
                if k < spec.pool_stages {
                    layers.push(pool());
                }
                prev = wd;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::linear("fc", prev, spec.class_count));
        }
        Family::MultiBranch => {
            conv_block(&mut layers, "stem", c, widths[0], 3, true);
            let mut prev = widths[0];
            for (k, &wd) in widths.iter().enumerate() {
                let p = format!("s{k}");
                let a = wd / 4;
                let b = wd / 2;
                let d = wd - a - b;
                let mut br1 = Vec::new();
                conv_block(&mut br1, &format!("{p}.b1x1"), prev, a.max(1), 1, true);
                let mut br2 = Vec::new();
                conv_block(&mut br2, &format!("{p}.b3x3r"), prev, b, 1, true);
                conv_block(&mut br2, &format!("{p}.b3x3"), b, b, 3, true);
                let mut br3 = Vec::new();
                conv_block(&mut br3, &format!("{p}.b5x5"), prev, d, 5, true);
                layers.push(Layer::Concat {
                    branches: vec![br1, br2, br3],
                });
                if k < spec.pool_stages {
                    layers.push(pool());
                }
                prev = a.max(1) + b + d;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::linear("fc", prev, spec.class_count));
        }
        Family::AeSegnet => unreachable!("not a classifier family"),
    }
    layers
}

/// Encoder and decoder layer lists of the autoencoder.
fn autoencoder_layers(spec: &ArchitectureSpec) -> (Vec<Layer>, Vec<Layer>) {
    let c = spec.input_shape[0];
    let widths = &spec.stage_widths;
    let mut enc = Vec::new();
    let mut prev = c;
    for (k, &wd) in widths.iter().enumerate() {
        conv_block(&mut enc, &format!("enc.s{k}.conv"), prev, wd, 3, spec.batch_norm);
        if k < spec.pool_stages {
            enc.push(Layer::MaxPool { window: 2, export: true });
        }
        prev = wd;
    }
    let mut dec = Vec::new();
    for k in (0..widths.len()).rev() {
        if k < spec.pool_stages {
            dec.push(Layer::MaxUnpool { stage: k });
        }
        let out = if k > 0 { widths[k - 1] } else { widths[0] };
        conv_block(&mut dec, &format!("dec.s{k}.conv"), widths[k], out, 3, spec.batch_norm);
    }
    dec.push(Layer::conv("dec.out", widths[0], c, 3));
    dec.push(Layer::Clamp01);
    (enc, dec)
}

/// Anything that maps images to class logits.
pub trait Classifier: Sync {
    fn id(&self) -> &str;
    fn class_count(&self) -> usize;
    fn logits(&self, x: &ImageBatch) -> Result<Tensor>;
}

/// Anything that maps images to images of the same shape.
pub trait Preprocessor: Sync {
    fn key(&self) -> &str;
    fn apply(&self, x: &ImageBatch) -> Result<ImageBatch>;
}

/// Passes images through untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Preprocessor for Identity {
    fn key(&self) -> &str {
        "identity"
    }

    fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
        Ok(x.clone())
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub spec: ArchitectureSpec,
    pub params: ParamStore,
    pub frozen: bool,
    pub seed: u64,
    layers: Vec<Layer>,
}

pub fn build_classifier(spec: &ArchitectureSpec, seed: u64) -> Result<ClassifierModel> {
    if !spec.family.is_classifier() {
        return Err(Error::contract(format!(
            "{} is not a classifier family",
            spec.name
        )));
    }
    spec.validate()?;
    let layers = classifier_layers(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    nn::init_all(&layers, &mut params, &mut rng);
    Ok(ClassifierModel {
        spec: spec.clone(),
        params,
        frozen: false,
        seed,
        layers,
    })
}

impl ClassifierModel {
    fn from_parts(spec: ArchitectureSpec, params: ParamStore, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = classifier_layers(&spec);
        Ok(Self { spec, params, frozen: false, seed, layers })
    }

    pub fn checksum(&self) -> String {
        parameter_checksum(self)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::contract(format!(
                "{} expects input {:?}, got {:?}",
                self.spec.name,
                self.spec.input_shape,
                &x.shape()[1..]
            )));
        }
        Ok(())
    }

    /// Inference-mode logits.
    pub fn forward(&self, x: &ImageBatch) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ctx = ForwardCtx::default();
        Ok(nn::run(&self.layers, &self.params, x.clone(), Mode::Eval, &mut ctx)?.0)
    }

    pub(crate) fn forward_tape(&self, x: &ImageBatch, mode: Mode) -> Result<(Tensor, Tape, ForwardCtx<'static>)> {
        self.check_input(x)?;
        let mut ctx = ForwardCtx::default();
        let (y, tape) = nn::run(&self.layers, &self.params, x.clone(), mode, &mut ctx)?;
        Ok((y, tape, ctx))
    }

    /// Backpropagates `dlogits`; parameter gradients are skipped entirely
    /// when `param_grads` is false.
    pub(crate) fn backward(&self, tape: Tape, dlogits: Tensor, param_grads: bool) -> Result<(Tensor, Grads)> {
        let mut grads = Grads::new();
        let dx = nn::back(&self.layers, &self.params, tape, dlogits, &mut grads, &|_| param_grads)?;
        Ok((dx, grads))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}

impl Classifier for ClassifierModel {
    fn id(&self) -> &str {
        &self.spec.name
    }

    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn logits(&self, x: &ImageBatch) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Clone, Debug)]
pub struct AutoencoderModel {
    pub spec: ArchitectureSpec,
    /// Row key used in tables, e.g. `A_S` or `A_resnet`.
    pub label: String,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    /// Reject (rather than warn about) inputs outside `[0, 1]`.
    pub strict_range: bool,
    pub seed: u64,
    enc_layers: Vec<Layer>,
    dec_layers: Vec<Layer>,
}

pub fn build_autoencoder(spec: &ArchitectureSpec, seed: u64) -> Result<AutoencoderModel> {
    if spec.family != Family::AeSegnet {
        return Err(Error::contract(format!("{} is not an autoencoder", spec.name)));
    }
    spec.validate()?;
    let (enc_layers, dec_layers) = autoencoder_layers(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = ParamStore::new();
    nn::init_all(&enc_layers, &mut encoder, &mut rng);
    let mut decoder = ParamStore::new();
    nn::init_all(&dec_layers, &mut decoder, &mut rng);
    // start the output around mid-gray so the saturating clamp passes gradient
    decoder.param_mut("dec.out.bias")?.data_mut().fill(0.5);
    Ok(AutoencoderModel {
        spec: spec.clone(),
        label: "A_S".to_string(),
        encoder,
        decoder,
        strict_range: false,
        seed,
        enc_layers,
        dec_layers,
    })
}

/// Intermediate state of an autoencoder pass, kept for backpropagation.
pub(crate) struct AeTape {
    enc: Tape,
    dec: Tape,
}

impl AutoencoderModel {
    /// An autoencoder whose reconstruction is exactly the identity on
    /// `[0, 1]` inputs: a single unpooled stage with identity kernels.
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        let spec = ArchitectureSpec {
            name: "identity-ae".into(),
            family: Family::AeSegnet,
            input_shape: [channels, height, width],
            class_count: 0,
            stage_widths: vec![channels],
            pool_stages: 0,
            batch_norm: false,
            dense_width: default_dense(),
        };
        let mut ae = build_autoencoder(&spec, 0).expect("identity spec is valid");
        for store in [&mut ae.encoder, &mut ae.decoder] {
            let names: Vec<String> = store.param_names().map(str::to_string).collect();
            for n in names {
                let t = store.param_mut(&n).unwrap();
                t.data_mut().fill(0.0);
                if n.ends_with(".weight") {
                    let (co, ci, k, _) = t.dims4().unwrap();
                    for o in 0..co.min(ci) {
                        let centre = ((o * ci + o) * k + k / 2) * k + k / 2;
                        t.data_mut()[centre] = 1.0;
                    }
                }
            }
        }
        ae.label = "identity".into();
        ae
    }

    pub(crate) fn from_parts(
        spec: ArchitectureSpec,
        label: String,
        encoder: ParamStore,
        decoder: ParamStore,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let (enc_layers, dec_layers) = autoencoder_layers(&spec);
        Ok(Self {
            spec,
            label,
            encoder,
            decoder,
            strict_range: false,
            seed,
            enc_layers,
            dec_layers,
        })
    }

    pub fn pool_stages(&self) -> usize {
        self.spec.pool_stages
    }

    pub fn checksum(&self) -> String {
        parameter_checksum(self)
    }

    pub fn encoder_checksum(&self) -> String {
        self.encoder.checksum()
    }

    pub fn decoder_checksum(&self) -> String {
        self.decoder.checksum()
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::contract(format!(
                "{} expects input {:?}, got {:?}",
                self.label,
                self.spec.input_shape,
                &x.shape()[1..]
            )));
        }
        let (min, max) = x.min_max();
        if min < 0.0 || max > 1.0 {
            if self.strict_range {
                return Err(Error::Range { min, max });
            }
            warn!("{}: input outside [0, 1] (min {min}, max {max})", self.label);
        }
        Ok(())
    }

    pub fn encode(&self, x: &ImageBatch) -> Result<(Tensor, Vec<PoolingRecord>)> {
        let (latent, records, _, _) = self.encode_with(x, Mode::Eval)?;
        Ok((latent, records))
    }

    pub fn decode(&self, latent: &Tensor, records: &[PoolingRecord]) -> Result<ImageBatch> {
        Ok(self.decode_with(latent, records, Mode::Eval)?.0)
    }

    pub fn reconstruct(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let (latent, records) = self.encode(x)?;
        self.decode(&latent, &records)
    }

    fn encode_with(
        &self,
        x: &ImageBatch,
        mode: Mode,
    ) -> Result<(Tensor, Vec<PoolingRecord>, Tape, Vec<(String, Vec<f64>, Vec<f64>)>)> {
        self.check_input(x)?;
        let mut ctx = ForwardCtx::default();
        let (latent, tape) = nn::run(&self.enc_layers, &self.encoder, x.clone(), mode, &mut ctx)?;
        Ok((latent, ctx.records_out, tape, ctx.stat_updates))
    }

    fn decode_with(
        &self,
        latent: &Tensor,
        records: &[PoolingRecord],
        mode: Mode,
    ) -> Result<(ImageBatch, Tape, Vec<(String, Vec<f64>, Vec<f64>)>)> {
        if records.len() != self.spec.pool_stages {
            return Err(Error::contract(format!(
                "decoder needs {} pooling records, got {}",
                self.spec.pool_stages,
                records.len()
            )));
        }
        let mut ctx = ForwardCtx::with_records(records);
        let (y, tape) = nn::run(&self.dec_layers, &self.decoder, latent.clone(), mode, &mut ctx)?;
        Ok((y, tape, ctx.stat_updates))
    }

    /// Reconstruction plus the tape needed by [`Self::backward`]. In train
    /// mode the batch-norm statistic updates are returned for the caller to
    /// apply.
    pub(crate) fn forward_tape(
        &self,
        x: &ImageBatch,
        mode: Mode,
    ) -> Result<(ImageBatch, AeTape, Vec<(String, Vec<f64>, Vec<f64>)>)> {
        let (latent, records, enc, mut updates) = self.encode_with(x, mode)?;
        let (y, dec, dec_updates) = self.decode_with(&latent, &records, mode)?;
        updates.extend(dec_updates);
        Ok((y, AeTape { enc, dec }, updates))
    }

    /// Returns `(encoder grads, decoder grads, input grad)`. The encoder is
    /// only traversed when encoder gradients are requested.
    pub(crate) fn backward(
        &self,
        tape: AeTape,
        dy: Tensor,
        encoder_grads: bool,
        decoder_grads: bool,
    ) -> Result<(Grads, Grads, Option<Tensor>)> {
        let mut dg = Grads::new();
        let dlatent = nn::back(&self.dec_layers, &self.decoder, tape.dec, dy, &mut dg, &|_| decoder_grads)?;
        let mut eg = Grads::new();
        let dx = if encoder_grads {
            Some(nn::back(&self.enc_layers, &self.encoder, tape.enc, dlatent, &mut eg, &|_| true)?)
        } else {
            None
        };
        Ok((eg, dg, dx))
    }

    pub(crate) fn apply_stat_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        for u in updates {
            let store = if u.0.starts_with("enc.") { &mut self.encoder } else { &mut self.decoder };
            nn::apply_stat_updates(store, std::slice::from_ref(u))?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.parameter_count()
    }
}

impl Preprocessor for AutoencoderModel {
    fn key(&self) -> &str {
        &self.label
    }

    fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
        self.reconstruct(x)
    }
}

/// Models whose parameters can be digested.
pub trait Checksummed {
    fn hash_params(&self, hasher: &mut Sha256);
}

impl Checksummed for ClassifierModel {
    fn hash_params(&self, hasher: &mut Sha256) {
        self.params.hash_into(hasher);
    }
}

impl Checksummed for AutoencoderModel {
    fn hash_params(&self, hasher: &mut Sha256) {
        hasher.update(b"encoder");
        self.encoder.hash_into(hasher);
        hasher.update(b"decoder");
        self.decoder.hash_into(hasher);
    }
}

/// SHA-256 over every named parameter and buffer, in name order.
pub fn parameter_checksum(model: &impl Checksummed) -> String {
    let mut h = Sha256::new();
    model.hash_params(&mut h);
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic line, one line of JSON header, binary payload.

const MAGIC: &str = "SIGPROBE-CKPT 1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Classifier,
    Autoencoder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    store: String,
    name: String,
    buffer: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub label: String,
    pub checksum: String,
    tensors: Vec<TensorEntry>,
}

fn write_container(
    path: &Path,
    mut header: CheckpointHeader,
    stores: &[(&str, &ParamStore)],
) -> Result<()> {
    let mut payload = Vec::new();
    header.tensors.clear();
    for (store_name, store) in stores {
        for (is_param, name, t) in store.entries() {
            header.tensors.push(TensorEntry {
                store: store_name.to_string(),
                name: name.clone(),
                buffer: !is_param,
                shape: t.shape().to_vec(),
            });
            payload.extend_from_slice(&t.to_le_bytes());
        }
    }
    let mut bytes = Vec::with_capacity(payload.len() + 4096);
    writeln!(bytes, "{MAGIC}")?;
    serde_json::to_writer(&mut bytes, &header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    crate::orchestrator::write_atomic(path, &bytes)
}

fn read_container(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, ParamStore>)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let bad = |detail: &str| Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    };
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad("bad magic line"));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut stores: BTreeMap<String, ParamStore> = BTreeMap::new();
    let mut off = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = off + n * 8;
        if end > payload.len() {
            return Err(bad("payload truncated"));
        }
        let data = payload[off..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        off = end;
        let t = Tensor::new(e.shape.clone(), data)?;
        let store = stores.entry(e.store.clone()).or_default();
        if e.buffer {
            store.insert_buffer(e.name.clone(), t);
        } else {
            store.insert_param(e.name.clone(), t);
        }
    }
    if off != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((header, stores))
}

pub fn save_classifier(model: &ClassifierModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Classifier,
        spec: model.spec.clone(),
        seed: model.seed,
        label: model.spec.name.clone(),
        checksum: model.checksum(),
        tensors: vec![],
    };
    write_container(path, header, &[("params", &model.params)])
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let (header, mut stores) = read_container(path)?;
    if !matches!(header.kind, CheckpointKind::Classifier) {
        return Err(Error::contract("checkpoint does not hold a classifier"));
    }
    let params = stores.remove("params").unwrap_or_default();
    let model = ClassifierModel::from_parts(header.spec, params, header.seed)?;
    let actual = model.checksum();
    if actual != header.checksum {
        return Err(Error::Checksum { expected: header.checksum, actual });
    }
    Ok(model)
}

pub fn save_autoencoder(model: &AutoencoderModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Autoencoder,
        spec: model.spec.clone(),
        seed: model.seed,
        label: model.label.clone(),
        checksum: model.checksum(),
        tensors: vec![],
    };
    write_container(path, header, &[("encoder", &model.encoder), ("decoder", &model.decoder)])
}

pub fn load_autoencoder(path: &Path) -> Result<AutoencoderModel> {
    let (header, mut stores) = read_container(path)?;
    if !matches!(header.kind, CheckpointKind::Autoencoder) {
        return Err(Error::contract("checkpoint does not hold an autoencoder"));
    }
    let model = AutoencoderModel::from_parts(
        header.spec,
        header.label,
        stores.remove("encoder").unwrap_or_default(),
        stores.remove("decoder").unwrap_or_default(),
        header.seed,
    )?;
    let actual = model.checksum();
    if actual != header.checksum {
        return Err(Error::Checksum { expected: header.checksum, actual });
    }
    Ok(model)
}

/// Reads only the header of a checkpoint.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_container(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax;
    use rand::Rng;

    fn zoo() -> BTreeMap<String, ArchitectureSpec> {
        builtin_zoo()
    }

    fn images(n: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, 32, 32], |_| rng.random::<f64>())
    }

    #[test]
    fn builtin_zoo_has_four_classifier_families_and_an_autoencoder() {
        let z = zoo();
        for fam in [Family::PlainConv, Family::DeepBn, Family::Residual, Family::MultiBranch, Family::AeSegnet] {
            assert!(z.values().any(|s| s.family == fam), "{fam:?}");
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = &zoo()["lenet"];
        let a = build_classifier(spec, 7).unwrap();
        let b = build_classifier(spec, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_classifier(spec, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn every_classifier_yields_logits_of_batch_by_classes() {
        let x = images(4, 1);
        for spec in zoo().values().filter(|s| s.family.is_classifier()) {
            let m = build_classifier(spec, 1).unwrap();
            let l = m.forward(&x).unwrap();
            assert_eq!(l.shape(), &[4, spec.class_count], "{}", spec.name);
            for row in softmax(&l).unwrap().data().chunks(spec.class_count) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = build_classifier(&zoo()["resnet"], 3).unwrap();
        let x = images(2, 9);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut spec = zoo()["vgg"].clone();
        spec.input_shape = [3, 30, 30];
        assert!(matches!(build_classifier(&spec, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_autoencoder_spec_as_classifier() {
        assert!(build_classifier(&zoo()["segnet-desk"], 0).is_err());
    }

    #[test]
    fn encode_shapes_follow_pool_stages() {
        let ae = build_autoencoder(&zoo()["segnet-desk"], 0).unwrap();
        assert_eq!(ae.pool_stages(), 3);
        let x = images(2, 0);
        let (latent, records) = ae.encode(&x).unwrap();
        assert_eq!(&latent.shape()[2..], &[4, 4]);
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(PoolingRecord::indices_in_windows));
        let y = ae.decode(&latent, &records).unwrap();
        assert_eq!(y.shape(), x.shape());
        let (lo, hi) = y.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn zero_pool_stages_keeps_spatial_size() {
        let mut spec = zoo()["segnet-desk"].clone();
        spec.pool_stages = 0;
        let ae = build_autoencoder(&spec, 0).unwrap();
        let (latent, records) = ae.encode(&images(1, 0)).unwrap();
        assert_eq!(&latent.shape()[2..], &[32, 32]);
        assert!(records.is_empty());
    }

    #[test]
    fn decode_rejects_wrong_record_count() {
        let ae = build_autoencoder(&zoo()["segnet-desk"], 0).unwrap();
        let (latent, mut records) = ae.encode(&images(1, 0)).unwrap();
        records.pop();
        assert!(matches!(ae.decode(&latent, &records), Err(Error::Contract(_))));
    }

    #[test]
    fn strict_mode_rejects_out_of_range_input() {
        let mut ae = build_autoencoder(&zoo()["segnet-desk"], 0).unwrap();
        let x = Tensor::full(&[1, 3, 32, 32], 1.5);
        assert!(ae.encode(&x).is_ok());
        ae.strict_range = true;
        assert!(matches!(ae.encode(&x), Err(Error::Range { .. })));
    }

    #[test]
    fn untrained_reconstruction_error_is_finite_and_positive() {
        let ae = build_autoencoder(&zoo()["segnet-desk"], 0).unwrap();
        let x = images(16, 4);
        let y = ae.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let mse = crate::nn::loss::mse(&y, &x).unwrap().0;
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn identity_autoencoder_is_exact() {
        let ae = AutoencoderModel::identity(3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[3, 3, 8, 8], |_| rng.random::<f64>());
        assert_eq!(ae.reconstruct(&x).unwrap(), x);
    }

    #[test]
    fn partitions_are_disjoint() {
        let ae = build_autoencoder(&zoo()["segnet-desk"], 0).unwrap();
        let enc: Vec<&str> = ae.encoder.param_names().collect();
        assert!(ae.decoder.param_names().all(|n| !enc.contains(&n)));
    }

    #[test]
    fn checkpoint_round_trip_preserves_digest() {
        let dir = tempfile::tempdir().unwrap();
        let c = build_classifier(&zoo()["inception"], 5).unwrap();
        let p = dir.path().join("c.ckpt");
        save_classifier(&c, &p).unwrap();
        let back = load_classifier(&p).unwrap();
        assert_eq!(back.checksum(), c.checksum());
        let x = images(2, 2);
        assert_eq!(back.forward(&x).unwrap(), c.forward(&x).unwrap());

        let ae = build_autoencoder(&zoo()["segnet-desk"], 5).unwrap();
        let q = dir.path().join("a.ckpt");
        save_autoencoder(&ae, &q).unwrap();
        assert_eq!(load_autoencoder(&q).unwrap().checksum(), ae.checksum());
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = build_classifier(&zoo()["lenet"], 5).unwrap();
        let p = dir.path().join("c.ckpt");
        save_classifier(&c, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_classifier(&p), Err(Error::Checksum { .. })));
    }
}
