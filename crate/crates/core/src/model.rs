//! The activity classifier `h(x) = g(f(x))`: a convolutional feature
//! extractor `f` followed by a dense classifier `g`.
//!
//! The default configuration is the full-scale network (input 3×114×500,
//! six classes); `tiny`-style presets instantiate the same stack at sizes
//! where gradient checks and training runs take milliseconds.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{emit_kv, get_parsed, parse_kv};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSNS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A convolution layer: `channels` output maps from a `kernel`-sized window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Pool {
        window: (usize, usize),
        stride: (usize, usize),
    },
}

/// Architecture description: extractor layers, hidden dense widths, and the
/// class count. `Default` is the full-scale network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input extents (antennas, subcarriers, timesteps); antennas act as
    /// convolution channels.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Hidden dense widths between the flattened features and the final
    /// class layer.
    pub dense: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

fn conv(channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        channels,
        kernel,
        stride,
    })
}

fn pool() -> LayerSpec {
    LayerSpec::Pool {
        window: (1, 2),
        stride: (1, 2),
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: [3, 114, 500],
            layers: vec![
                conv(32, (15, 23), (9, 9)),
                conv(32, (3, 7), (1, 1)),
                pool(),
                conv(64, (3, 7), (1, 1)),
                conv(96, (3, 7), (1, 1)),
                pool(),
            ],
            dense: vec![128],
            classes: 6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Miniature preset for fast tests: input 1×8×32, under 10k parameters.
    pub fn tiny() -> Self {
        ModelConfig {
            input_shape: [1, 8, 32],
            layers: vec![
                conv(4, (3, 5), (1, 1)),
                conv(4, (3, 3), (1, 1)),
                pool(),
                conv(8, (1, 3), (1, 1)),
                conv(8, (1, 3), (1, 1)),
                pool(),
            ],
            dense: vec![16],
            classes: 4,
            seed: 0,
        }
    }

    /// Scaled-down stack for small inputs (subcarriers >= 16, timesteps >= 21).
    pub fn tiny_for(input_shape: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            input_shape,
            layers: vec![
                conv(4, (3, 5), (2, 2)),
                conv(4, (3, 3), (1, 1)),
                pool(),
                conv(8, (3, 3), (1, 1)),
                conv(8, (3, 3), (1, 1)),
                pool(),
            ],
            dense: vec![16],
            classes,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Walk the layer chain and return the extractor output shape, or a
    /// configuration error naming the first failing layer.
    pub fn extractor_output_shape(&self) -> Result<[usize; 3]> {
        let [a, s, t] = self.input_shape;
        let (mut c, mut h, mut w) = (a, s, t);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(spec) => {
                    let (kh, kw) = spec.kernel;
                    let (sh, sw) = spec.stride;
                    if kh > h || kw > w {
                        return Err(Error::Config(format!(
                            "layer {i} (conv {}x({kh},{kw})): kernel exceeds input {h}x{w}",
                            spec.channels
                        )));
                    }
                    if sh == 0 || sw == 0 || spec.channels == 0 {
                        return Err(Error::Config(format!(
                            "layer {i} (conv): zero stride or channel count"
                        )));
                    }
                    c = spec.channels;
                    h = (h - kh) / sh + 1;
                    w = (w - kw) / sw + 1;
                }
                LayerSpec::Pool { window, stride } => {
                    let (wh, ww) = *window;
                    let (sh, sw) = *stride;
                    if wh > h || ww > w {
                        return Err(Error::Config(format!(
                            "layer {i} (pool ({wh},{ww})): window exceeds input {h}x{w}"
                        )));
                    }
                    if sh == 0 || sw == 0 {
                        return Err(Error::Config(format!("layer {i} (pool): zero stride")));
                    }
                    h = (h - wh) / sh + 1;
                    w = (w - ww) / sw + 1;
                }
            }
        }
        Ok([c, h, w])
    }

    /// Canonical `key=value` text used in checkpoints and run sidecars.
    pub fn to_kv(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(c) => format!(
                    "conv:{}:{}x{}:{}x{}",
                    c.channels, c.kernel.0, c.kernel.1, c.stride.0, c.stride.1
                ),
                LayerSpec::Pool { window, stride } => format!(
                    "pool:{}x{}:{}x{}",
                    window.0, window.1, stride.0, stride.1
                ),
            })
            .collect::<Vec<_>>()
            .join("|");
        let dense = self
            .dense
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        emit_kv([
            (
                "input_shape",
                format!(
                    "{}x{}x{}",
                    self.input_shape[0], self.input_shape[1], self.input_shape[2]
                ),
            ),
            ("layers", layers),
            ("dense", dense),
            ("classes", self.classes.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let shape_raw: String = get_parsed(&map, "input_shape")?;
        let input_shape = parse_triple(&shape_raw)?;
        let mut layers = Vec::new();
        let layers_raw: String = get_parsed(&map, "layers")?;
        for part in layers_raw.split('|').filter(|p| !p.is_empty()) {
            layers.push(parse_layer(part)?);
        }
        let dense_raw: String = get_parsed(&map, "dense")?;
        let dense = dense_raw
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad dense width {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelConfig {
            input_shape,
            layers,
            dense,
            classes: get_parsed(&map, "classes")?,
            seed: get_parsed(&map, "seed")?,
        })
    }
}

fn parse_triple(raw: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = raw
        .split('x')
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Config(format!("bad extent {p:?} in {raw:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected AxSxT, got {raw:?}")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_pair(raw: &str) -> Result<(usize, usize)> {
    let (a, b) = raw
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("expected HxW, got {raw:?}")))?;
    Ok((
        a.parse()
            .map_err(|_| Error::Config(format!("bad extent {a:?}")))?,
        b.parse()
            .map_err(|_| Error::Config(format!("bad extent {b:?}")))?,
    ))
}

fn parse_layer(raw: &str) -> Result<LayerSpec> {
    let fields: Vec<&str> = raw.split(':').collect();
    match fields.as_slice() {
        ["conv", ch, kernel, stride] => Ok(LayerSpec::Conv(ConvSpec {
            channels: ch
                .parse()
                .map_err(|_| Error::Config(format!("bad channel count {ch:?}")))?,
            kernel: parse_pair(kernel)?,
            stride: parse_pair(stride)?,
        })),
        ["pool", window, stride] => Ok(LayerSpec::Pool {
            window: parse_pair(window)?,
            stride: parse_pair(stride)?,
        }),
        _ => Err(Error::Config(format!("bad layer spec {raw:?}"))),
    }
}

/// A built classifier: configuration plus parameter tensors.
///
/// Parameters are stored in declaration order — extractor convolution
/// kernels first (θ_f), then each dense layer's weight and bias (θ_g).
#[derive(Debug, Clone)]
pub struct HarModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    extractor_params: usize,
}

/// Tape handles for one staged copy of the parameters.
pub struct StagedParams {
    pub ids: Vec<TensorId>,
}

/// Forward-pass handles: the penultimate dense activation and the logits.
pub struct ForwardOut {
    pub penultimate: TensorId,
    pub logits: TensorId,
}

/// Initialize a model from a configuration: uniform(−b, b) parameters with
/// `b = sqrt(1/fan_in)` per layer, drawn deterministically from the config
/// seed.
pub fn build_model(config: &ModelConfig) -> Result<HarModel> {
    let feature_shape = config.extractor_output_shape()?;
    if config.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            config.classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
        (0..n)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect()
    };

    let mut params = Vec::new();
    let mut in_channels = config.input_shape[0];
    for layer in &config.layers {
        if let LayerSpec::Conv(spec) = layer {
            let (kh, kw) = spec.kernel;
            let fan_in = in_channels * kh * kw;
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = spec.channels * in_channels * kh * kw;
            params.push(Tensor::new(
                vec![spec.channels, in_channels, kh, kw],
                uniform(n, bound),
            )?);
            in_channels = spec.channels;
        }
    }
    let extractor_params = params.len();

    let mut width = feature_shape.iter().product::<usize>();
    for &next in config.dense.iter().chain(std::iter::once(&config.classes)) {
        let bound = (1.0 / width as f64).sqrt();
        params.push(Tensor::new(vec![next, width], uniform(next * width, bound))?);
        params.push(Tensor::new(vec![next], uniform(next, bound))?);
        width = next;
    }

    Ok(HarModel {
        config: config.clone(),
        params,
        extractor_params,
    })
}

impl HarModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    /// All parameters in declaration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Extractor parameters θ_f (convolution kernels).
    pub fn extractor_params(&self) -> &[Tensor] {
        &self.params[..self.extractor_params]
    }

    /// Classifier parameters θ_g (dense weights and biases).
    pub fn classifier_params(&self) -> &[Tensor] {
        &self.params[self.extractor_params..]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Width of the penultimate dense layer (the exported feature size).
    pub fn feature_width(&self) -> usize {
        match self.config.dense.last() {
            Some(&w) => w,
            None => self
                .config
                .extractor_output_shape()
                .map(|s| s.iter().product())
                .unwrap_or(0),
        }
    }

    /// Place every parameter on a tape, marked trainable or frozen.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedParams {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let t = p.clone();
                tape.leaf(if trainable { t.with_grad() } else { t })
            })
            .collect();
        StagedParams { ids }
    }

    /// Run the network on a staged input, returning penultimate and logit
    /// handles. Input is `[A,S,T]` or `[B,A,S,T]`.
    pub fn forward_staged(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        input: TensorId,
    ) -> Result<ForwardOut> {
        let in_shape = tape.shape(input).to_vec();
        let (batched, batch) = match in_shape.as_slice() {
            [a, s, t] if [*a, *s, *t] == self.config.input_shape => (false, 1),
            [b, a, s, t] if [*a, *s, *t] == self.config.input_shape => (true, *b),
            other => {
                return Err(Error::dimension(
                    "forward",
                    format!(
                        "input shape {other:?} does not match model input {:?}",
                        self.config.input_shape
                    ),
                ))
            }
        };

        let mut cursor = input;
        let mut param_idx = 0;
        for layer in &self.config.layers {
            match layer {
                LayerSpec::Conv(spec) => {
                    let kernel = staged.ids[param_idx];
                    param_idx += 1;
                    cursor = tape.conv2d(cursor, kernel, spec.stride)?;
                    cursor = tape.relu(cursor)?;
                }
                LayerSpec::Pool { window, stride } => {
                    cursor = tape.maxpool2d(cursor, *window, *stride)?;
                }
            }
        }

        let flat_width: usize = self.config.extractor_output_shape()?.iter().product();
        cursor = if batched {
            tape.reshape(cursor, vec![batch, flat_width])?
        } else {
            tape.reshape(cursor, vec![flat_width])?
        };

        let mut penultimate = cursor;
        let dense_count = self.config.dense.len() + 1;
        for i in 0..dense_count {
            let weight = staged.ids[self.extractor_params + 2 * i];
            let bias = staged.ids[self.extractor_params + 2 * i + 1];
            cursor = tape.dense(cursor, weight, bias)?;
            if i + 1 < dense_count {
                penultimate = cursor;
            }
        }

        Ok(ForwardOut {
            penultimate,
            logits: cursor,
        })
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let staged = self.stage(&mut tape, false);
        let out = self.forward_staged(&mut tape, &staged, input)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Row-wise class probabilities: `softmax(logits)`.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let staged = self.stage(&mut tape, false);
        let out = self.forward_staged(&mut tape, &staged, input)?;
        let probs = tape.softmax(out.logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Predicted class per row (ties: lowest index).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(argmax_rows(&logits))
    }

    /// Penultimate-layer activations without gradient tracking.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let staged = self.stage(&mut tape, false);
        let out = self.forward_staged(&mut tape, &staged, input)?;
        Ok(tape.value(out.penultimate).clone())
    }

    // ── Checkpoint I/O ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = self.config.to_kv();
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HarModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes);

        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}"),
            ));
        }
        let config_len = r.u32("config length")? as usize;
        let config_bytes = r.take(config_len, "config block")?;
        let config_text = std::str::from_utf8(config_bytes)
            .map_err(|_| Error::format(12, "config block is not UTF-8"))?;
        let config = ModelConfig::from_kv(config_text)?;

        let mut model = build_model(&config)?;
        for (i, p) in model.params.iter_mut().enumerate() {
            let ndim = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor extent")? as usize);
            }
            if shape != p.shape() {
                return Err(Error::format(
                    r.pos() as u64,
                    format!(
                        "parameter {i}: stored shape {shape:?} vs configured {:?}",
                        p.shape()
                    ),
                ));
            }
            for v in p.data_mut() {
                *v = r.f32("tensor value")? as f64;
            }
        }
        if !r.is_exhausted() {
            return Err(Error::format(
                r.pos() as u64,
                format!("{} trailing bytes", bytes.len() - r.pos()),
            ));
        }
        Ok(model)
    }
}

/// Row-wise argmax over the last axis of a 1-D or 2-D tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (rows, k) = match *t.shape() {
        [k] => (1, k),
        [b, k] => (b, k),
        _ => return Vec::new(),
    };
    (0..rows)
        .map(|r| {
            let row = &t.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn pos(&self) -> usize {
        self.pos
    }

    fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_shape_chain_matches_table() {
        let cfg = ModelConfig::default();
        // 3x114x500 -> conv(9,9) -> 32x12x54 -> conv -> 32x10x48 -> pool ->
        // 32x10x24 -> conv -> 64x8x18 -> conv -> 96x6x12 -> pool -> 96x6x6.
        assert_eq!(cfg.extractor_output_shape().unwrap(), [96, 6, 6]);
    }

    #[test]
    fn default_model_ends_in_class_layer() {
        let model = build_model(&ModelConfig::default()).unwrap();
        let last_weight = &model.classifier_params()[2];
        assert_eq!(last_weight.shape(), &[6, 128]);
        assert_eq!(model.classes(), 6);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny().with_seed(7);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = build_model(&cfg.with_seed(8)).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn tiny_preset_is_small_and_valid() {
        let model = build_model(&ModelConfig::tiny()).unwrap();
        assert!(model.param_count() < 10_000, "{}", model.param_count());
    }

    #[test]
    fn invalid_chain_names_failing_layer() {
        let mut cfg = ModelConfig::tiny();
        cfg.layers.insert(0, conv(2, (20, 1), (1, 1)));
        let err = build_model(&cfg).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn parameter_partition_is_exhaustive() {
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let f: usize = model.extractor_params().iter().map(Tensor::numel).sum();
        let g: usize = model.classifier_params().iter().map(Tensor::numel).sum();
        assert_eq!(f + g, model.param_count());
        for p in model.extractor_params() {
            assert_eq!(p.shape().len(), 4, "extractor params are conv kernels");
        }
        for pair in model.classifier_params().chunks(2) {
            assert_eq!(pair[0].shape().len(), 2);
            assert_eq!(pair[1].shape().len(), 1);
        }
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let model = build_model(&ModelConfig::tiny()).unwrap();
        let batch = Tensor::zeros(&[2, 1, 8, 32]);
        let logits = model.logits(&batch).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_independence() {
        let model = build_model(&ModelConfig::tiny().with_seed(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sample: Vec<f64> = (0..8 * 32).map(|_| rng.gen::<f64>()).collect();

        let single = Tensor::new(vec![1, 1, 8, 32], sample.clone()).unwrap();
        let logits_single = model.logits(&single).unwrap();

        let mut batch_data = Vec::new();
        for _ in 0..7 {
            batch_data.extend((0..8 * 32).map(|_| rng.gen::<f64>()));
        }
        batch_data.extend_from_slice(&sample);
        let batch = Tensor::new(vec![8, 1, 8, 32], batch_data).unwrap();
        let logits_batch = model.logits(&batch).unwrap();

        let k = model.classes();
        for i in 0..k {
            let a = logits_single.data()[i];
            let b = logits_batch.data()[7 * k + i];
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn proba_rows_sum_to_one_and_match_argmax() {
        let model = build_model(&ModelConfig::tiny().with_seed(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Tensor::new(
            vec![4, 1, 8, 32],
            (0..4 * 8 * 32).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let probs = model.predict_proba(&batch).unwrap();
        let k = model.classes();
        for r in 0..4 {
            let row = &probs.data()[r * k..(r + 1) * k];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        let logits = model.logits(&batch).unwrap();
        assert_eq!(argmax_rows(&probs), argmax_rows(&logits));
    }

    #[test]
    fn uniform_rows_when_final_layer_is_zero() {
        let mut model = build_model(&ModelConfig::tiny()).unwrap();
        let n = model.params().len();
        for p in &mut model.params_mut()[n - 2..] {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let batch = Tensor::filled(&[1, 1, 8, 32], 0.3);
        let probs = model.predict_proba(&batch).unwrap();
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn config_kv_round_trip() {
        for cfg in [ModelConfig::default(), ModelConfig::tiny()] {
            let text = cfg.to_kv();
            let back = ModelConfig::from_kv(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsns");
        let model = build_model(&ModelConfig::tiny().with_seed(9)).unwrap();
        model.save(&path).unwrap();
        let loaded = HarModel::load(&path).unwrap();

        let path2 = dir.path().join("model2.rsns");
        loaded.save(&path2).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsns");
        let model = build_model(&ModelConfig::tiny()).unwrap();
        model.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.rsns");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            HarModel::load(&bad).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));

        let full = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.rsns");
        std::fs::write(&trunc, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            HarModel::load(&trunc).unwrap_err(),
            Error::Format { .. }
        ));
    }
}
