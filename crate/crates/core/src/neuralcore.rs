//! Small dense/convolutional network with hand-written backpropagation and
//! (momentum) SGD. Everything is f64 and single-threaded per network.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BCE_EPSILON: f64 = 1e-12;
pub const SPEC_FILE: &str = "network.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.json";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: expected {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("backward needs a cache produced in train mode")]
    NoTrainCache,
    #[error("label {0} outside {{0, 1}}")]
    BadLabel(f64),
    #[error("empty training data")]
    Empty,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64, trace: Vec<f64> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Row-major batch: `shape[0]` is the batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NetError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(NetError::ShapeMismatch { expected: n, got: values.len() });
        }
        Ok(Tensor { shape, values })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NetError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NetError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NetError::ShapeMismatch { expected: cols, got: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn features(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.values[i * f..(i + 1) * f]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    Sigmoid,
    Conv1d { channels_in: usize, channels_out: usize, kernel: usize, stride: usize },
    Flatten,
    Dropout { p: f64 },
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub len: usize,
}

impl Shape {
    pub fn size(self) -> usize {
        self.channels * self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// dense(input, 1) + sigmoid.
    pub fn linear(input: usize, seed: u64) -> Self {
        NetworkSpec { input_dim: input, layers: vec![LayerSpec::Dense { input, output: 1 }, LayerSpec::Sigmoid], seed }
    }

    pub fn mlp(input: usize, seed: u64) -> Self {
        NetworkSpec {
            input_dim: input,
            layers: vec![
                LayerSpec::Dense { input, output: 256 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 256, output: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 64, output: 1 },
                LayerSpec::Sigmoid,
            ],
            seed,
        }
    }

    /// Two strided convolutions over the flat input, then a dense head.
    pub fn cnn(input: usize, seed: u64) -> Result<Self, NetError> {
        let (k, s, c) = (9, 4, 8);
        let l1 =
            conv_len(input, k, s).ok_or_else(|| NetError::InvalidSpec(format!("input {input} too short for the convolution stack")))?;
        let l2 = conv_len(l1, k, s).ok_or_else(|| NetError::InvalidSpec(format!("input {input} too short for the convolution stack")))?;
        Ok(NetworkSpec {
            input_dim: input,
            layers: vec![
                LayerSpec::Conv1d { channels_in: 1, channels_out: c, kernel: k, stride: s },
                LayerSpec::Relu,
                LayerSpec::Conv1d { channels_in: c, channels_out: c, kernel: k, stride: s },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: c * l2, output: 1 },
                LayerSpec::Sigmoid,
            ],
            seed,
        })
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, NetError> {
        if self.input_dim == 0 {
            return Err(NetError::InvalidSpec("input_dim is 0".into()));
        }
        let mut shapes = vec![Shape { channels: 1, len: self.input_dim }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match *layer {
                LayerSpec::Dense { input, output } => {
                    if input != cur.size() || output == 0 {
                        return Err(NetError::InvalidSpec(format!("layer {i}: dense({input},{output}) after {} features", cur.size())));
                    }
                    Shape { channels: 1, len: output }
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => cur,
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(NetError::InvalidSpec(format!("layer {i}: dropout p {p}")));
                    }
                    cur
                }
                LayerSpec::Flatten => Shape { channels: 1, len: cur.size() },
                LayerSpec::Conv1d { channels_in, channels_out, kernel, stride } => {
                    if channels_in == 0 || channels_out == 0 || kernel == 0 || stride == 0 {
                        return Err(NetError::InvalidSpec(format!("layer {i}: zero-sized conv1d")));
                    }
                    // A flat vector is read as one channel.
                    let in_len = if cur.channels == channels_in {
                        cur.len
                    } else if channels_in == 1 {
                        cur.size()
                    } else {
                        return Err(NetError::InvalidSpec(format!(
                            "layer {i}: conv1d expects {channels_in} channels, got {}",
                            cur.channels
                        )));
                    };
                    let len = conv_len(in_len, kernel, stride)
                        .ok_or_else(|| NetError::InvalidSpec(format!("layer {i}: input length {in_len} shorter than kernel {kernel}")))?;
                    Shape { channels: channels_out, len }
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_dim(&self) -> Result<usize, NetError> {
        Ok(self.shapes()?.last().unwrap().size())
    }
}

fn conv_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

/// Weights and biases of one layer; both empty for parameter-free layers.
///
/// Dense weights are stored input-major (`w[i * out + o]`); conv weights as
/// `w[(co * cin + ci) * kernel + t]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Param {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Param {
    fn zeros_like(&self) -> Param {
        Param { w: vec![0.0; self.w.len()], b: vec![0.0; self.b.len()] }
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Param>,
    shapes: Vec<Shape>,
}

pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub struct ForwardCache {
    /// `activations[l]` is the input of layer `l`; the last entry is the output.
    pub activations: Vec<Tensor>,
    masks: Vec<Option<Vec<f64>>>,
    train: bool,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

pub struct Gradients {
    pub params: Vec<Param>,
    /// `None` when the caller asked for parameter gradients only.
    pub input: Option<Tensor>,
}

impl Network {
    /// He-uniform weights U(±√(6/fan_in)) from `spec.seed`, zero biases.
    pub fn new(spec: NetworkSpec) -> Result<Self, NetError> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Dense { input, output } => he_param(&mut rng, input, input * output, output),
                LayerSpec::Conv1d { channels_in, channels_out, kernel, .. } => {
                    he_param(&mut rng, channels_in * kernel, channels_out * channels_in * kernel, channels_out)
                }
                _ => Param::default(),
            })
            .collect();
        Ok(Network { spec, params, shapes })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Param>) -> Result<Self, NetError> {
        let template = Network::new(spec)?;
        if params.len() != template.params.len()
            || params.iter().zip(&template.params).any(|(a, b)| a.w.len() != b.w.len() || a.b.len() != b.b.len())
        {
            return Err(NetError::InvalidSpec("parameter shapes do not match the network".into()));
        }
        Ok(Network { params, ..template })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn ends_with_sigmoid(&self) -> bool {
        matches!(self.spec.layers.last(), Some(LayerSpec::Sigmoid))
    }

    pub fn forward(&self, input: &Tensor, mode: Mode<'_>) -> Result<ForwardCache, NetError> {
        if input.shape.len() != 2 || input.features() != self.spec.input_dim {
            return Err(NetError::ShapeMismatch { expected: self.spec.input_dim, got: input.features() });
        }
        let (train, mut rng) = match mode {
            Mode::Train(rng) => (true, Some(rng)),
            Mode::Eval => (false, None),
        };
        let batch = input.batch();
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.spec.layers.len());
        activations.push(input.clone());
        for l in 0..self.spec.layers.len() {
            let (y, mask) = self.layer_forward(l, &activations[l].values, batch, rng.as_deref_mut());
            masks.push(mask);
            activations.push(Tensor { shape: vec![batch, self.shapes[l + 1].size()], values: y });
        }
        Ok(ForwardCache { activations, masks, train })
    }

    fn layer_forward(&self, l: usize, x: &[f64], batch: usize, rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Option<Vec<f64>>) {
        let (inp, out) = (self.shapes[l], self.shapes[l + 1]);
        let y = match self.spec.layers[l] {
            LayerSpec::Dense { input, output } => dense_forward(x, batch, input, output, &self.params[l]),
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::Dropout { p } => match rng {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                    let y = x.iter().zip(&m).map(|(a, b)| a * b).collect();
                    return (y, Some(m));
                }
                _ => x.to_vec(),
            },
            LayerSpec::Conv1d { channels_in, channels_out, kernel, stride } => conv_forward(
                x,
                batch,
                ConvDims { cin: channels_in, cout: channels_out, kernel, stride, in_len: inp.size() / channels_in, out_len: out.len },
                &self.params[l],
            ),
        };
        (y, None)
    }

    /// Eval-mode forward; returns the output batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NetError> {
        if input.shape.len() != 2 || input.features() != self.spec.input_dim {
            return Err(NetError::ShapeMismatch { expected: self.spec.input_dim, got: input.features() });
        }
        self.predict_from(0, input)
    }

    /// Eval-mode forward starting at layer `start`, whose input is `input`.
    pub fn predict_from(&self, start: usize, input: &Tensor) -> Result<Tensor, NetError> {
        let expected = self.shapes.get(start).map_or(0, |s| s.size());
        if input.shape.len() != 2 || input.features() != expected {
            return Err(NetError::ShapeMismatch { expected, got: input.features() });
        }
        let batch = input.batch();
        let mut x = input.values.clone();
        for l in start..self.spec.layers.len() {
            x = self.layer_forward(l, &x, batch, None).0;
        }
        Tensor::matrix(batch, self.shapes.last().unwrap().size(), x)
    }

    /// Gradients of all parameters and of the input, given dLoss/dOutput.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Gradients, NetError> {
        self.backward_from(cache, self.spec.layers.len(), grad_output, true)
    }

    /// Backward pass that starts below a final sigmoid, given dLoss/dLogit.
    /// Pairing it with BCE avoids the vanishing σ' factor on saturated units.
    pub fn backward_logits(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients, NetError> {
        if !self.ends_with_sigmoid() {
            return Err(NetError::InvalidSpec("network does not end with a sigmoid".into()));
        }
        self.backward_from(cache, self.spec.layers.len() - 1, grad_logits, true)
    }

    /// As [`Network::backward_logits`], skipping the input gradient.
    pub fn backward_logits_params(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients, NetError> {
        if !self.ends_with_sigmoid() {
            return Err(NetError::InvalidSpec("network does not end with a sigmoid".into()));
        }
        self.backward_from(cache, self.spec.layers.len() - 1, grad_logits, false)
    }

    fn backward_from(&self, cache: &ForwardCache, top: usize, grad: &Tensor, want_input: bool) -> Result<Gradients, NetError> {
        if !cache.train {
            return Err(NetError::NoTrainCache);
        }
        let expected = cache.activations[top].values.len();
        if grad.values.len() != expected {
            return Err(NetError::ShapeMismatch { expected, got: grad.values.len() });
        }
        let batch = cache.activations[0].batch();
        let mut grads: Vec<Param> = self.params.iter().map(Param::zeros_like).collect();
        let mut dy = grad.values.clone();
        for l in (0..top).rev() {
            let x = &cache.activations[l].values;
            let (inp, out) = (self.shapes[l], self.shapes[l + 1]);
            let want_dx = want_input || l > 0;
            dy = match self.spec.layers[l] {
                LayerSpec::Dense { input, output } => dense_backward(x, &dy, batch, input, output, &self.params[l], &mut grads[l], want_dx),
                LayerSpec::Relu => x.iter().zip(&dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
                LayerSpec::Sigmoid => {
                    let y = &cache.activations[l + 1].values;
                    y.iter().zip(&dy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
                }
                LayerSpec::Flatten => dy,
                LayerSpec::Dropout { .. } => match &cache.masks[l] {
                    Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => dy,
                },
                LayerSpec::Conv1d { channels_in, channels_out, kernel, stride } => conv_backward(
                    x,
                    &dy,
                    batch,
                    ConvDims { cin: channels_in, cout: channels_out, kernel, stride, in_len: inp.size() / channels_in, out_len: out.len },
                    &self.params[l],
                    &mut grads[l],
                    want_dx,
                ),
            };
        }
        let input = want_input.then(|| Tensor { shape: cache.activations[0].shape.clone(), values: dy });
        Ok(Gradients { params: grads, input })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.w.iter().chain(&p.b).all(|v| v.is_finite()))
    }

    /// Writes the spec, a flat little-endian f64 parameter blob and a JSON
    /// manifest of per-layer lengths.
    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&self.spec)?)?;
        let mut blob = Vec::with_capacity(self.param_count() * 8);
        let mut manifest = Vec::new();
        for (l, p) in self.params.iter().enumerate() {
            for v in p.w.iter().chain(&p.b) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ParamShape { layer: l, weights: p.w.len(), biases: p.b.len() });
        }
        fs::write(dir.join(PARAMS_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetError> {
        let spec: NetworkSpec = serde_json::from_str(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let manifest: Vec<ParamShape> = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let blob = fs::read(dir.join(PARAMS_FILE))?;
        let total: usize = manifest.iter().map(|m| m.weights + m.biases).sum();
        if blob.len() != total * 8 {
            return Err(NetError::InvalidSpec(format!("blob holds {} bytes, manifest needs {}", blob.len(), total * 8)));
        }
        let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params = manifest
            .iter()
            .map(|m| Param { w: values.by_ref().take(m.weights).collect(), b: values.by_ref().take(m.biases).collect() })
            .collect();
        Network::from_params(spec, params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamShape {
    layer: usize,
    weights: usize,
    biases: usize,
}

fn he_param(rng: &mut ChaCha8Rng, fan_in: usize, n_weights: usize, n_biases: usize) -> Param {
    let bound = (6.0 / fan_in as f64).sqrt();
    Param { w: (0..n_weights).map(|_| rng.gen_range(-bound..bound)).collect(), b: vec![0.0; n_biases] }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dense_forward(x: &[f64], batch: usize, input: usize, output: usize, p: &Param) -> Vec<f64> {
    let mut y = Vec::with_capacity(batch * output);
    for r in 0..batch {
        let mut row = p.b.clone();
        for (i, &xi) in x[r * input..(r + 1) * input].iter().enumerate() {
            if xi != 0.0 {
                for (o, w) in row.iter_mut().zip(&p.w[i * output..(i + 1) * output]) {
                    *o += xi * w;
                }
            }
        }
        y.extend_from_slice(&row);
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(x: &[f64], dy: &[f64], batch: usize, input: usize, output: usize, p: &Param, g: &mut Param, want_dx: bool) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; batch * input] } else { Vec::new() };
    for r in 0..batch {
        let dyr = &dy[r * output..(r + 1) * output];
        for (gb, d) in g.b.iter_mut().zip(dyr) {
            *gb += d;
        }
        let xr = &x[r * input..(r + 1) * input];
        for i in 0..input {
            if want_dx {
                dx[r * input + i] = dot(&p.w[i * output..(i + 1) * output], dyr);
            }
            if xr[i] != 0.0 {
                for (gw, d) in g.w[i * output..(i + 1) * output].iter_mut().zip(dyr) {
                    *gw += xr[i] * d;
                }
            }
        }
    }
    dx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4 * 4;
    for (ca, cb) in a[..chunks].chunks_exact(4).zip(b[..chunks].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[chunks..].iter().zip(&b[chunks..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
}

fn conv_forward(x: &[f64], batch: usize, d: ConvDims, p: &Param) -> Vec<f64> {
    let (in_size, out_size) = (d.cin * d.in_len, d.cout * d.out_len);
    let mut y = vec![0.0; batch * out_size];
    for r in 0..batch {
        let xr = &x[r * in_size..(r + 1) * in_size];
        let yr = &mut y[r * out_size..(r + 1) * out_size];
        for co in 0..d.cout {
            for l in 0..d.out_len {
                let mut acc = p.b[co];
                for ci in 0..d.cin {
                    let w = &p.w[(co * d.cin + ci) * d.kernel..][..d.kernel];
                    let xs = &xr[ci * d.in_len + l * d.stride..][..d.kernel];
                    acc += dot(w, xs);
                }
                yr[co * d.out_len + l] = acc;
            }
        }
    }
    y
}

fn conv_backward(x: &[f64], dy: &[f64], batch: usize, d: ConvDims, p: &Param, g: &mut Param, want_dx: bool) -> Vec<f64> {
    let (in_size, out_size) = (d.cin * d.in_len, d.cout * d.out_len);
    let mut dx = vec![0.0; batch * in_size];
    for r in 0..batch {
        let xr = &x[r * in_size..(r + 1) * in_size];
        let dyr = &dy[r * out_size..(r + 1) * out_size];
        let dxr = &mut dx[r * in_size..(r + 1) * in_size];
        for co in 0..d.cout {
            for l in 0..d.out_len {
                let gy = dyr[co * d.out_len + l];
                if gy == 0.0 {
                    continue;
                }
                g.b[co] += gy;
                for ci in 0..d.cin {
                    let base = (co * d.cin + ci) * d.kernel;
                    let off = ci * d.in_len + l * d.stride;
                    for t in 0..d.kernel {
                        g.w[base + t] += gy * xr[off + t];
                    }
                    if want_dx {
                        for t in 0..d.kernel {
                            dxr[off + t] += gy * p.w[base + t];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean binary cross-entropy on clamped predictions, with its gradient with
/// respect to the predictions.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>), NetError> {
    if predictions.len() != labels.len() {
        return Err(NetError::ShapeMismatch { expected: labels.len(), got: predictions.len() });
    }
    if predictions.is_empty() {
        return Err(NetError::Empty);
    }
    let n = predictions.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(predictions.len());
    for (&p, &y) in predictions.iter().zip(labels) {
        check_label(y)?;
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push((p - y) / (p * (1.0 - p)) / n);
    }
    Ok((loss / n, grad))
}

/// Same loss value as [`bce_loss`]; the gradient is taken with respect to
/// the pre-sigmoid logit, `(σ(z) − y) / n`.
pub fn bce_logit_grad(predictions: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>), NetError> {
    let (loss, _) = bce_loss(predictions, labels)?;
    let n = predictions.len() as f64;
    Ok((loss, predictions.iter().zip(labels).map(|(p, y)| (p - y) / n).collect()))
}

fn check_label(y: f64) -> Result<(), NetError> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(NetError::BadLabel(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// An epoch mean loss above this counts as divergence. Chance-level
    /// BCE is ln 2, so a finite ceiling well above it catches runs that
    /// saturate without overflowing.
    pub loss_ceiling: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            loss_ceiling: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        Ok(())
    }
}

/// Optimizer state for one parameter list.
pub struct Optimizer {
    cfg: OptimizerConfig,
    velocity: Vec<Param>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &[Param]) -> Self {
        Optimizer { cfg: cfg.clone(), velocity: params.iter().map(Param::zeros_like).collect() }
    }

    /// Weight decay applies to weights, not biases.
    pub fn step(&mut self, params: &mut [Param], grads: &[Param]) {
        let (lr, mu, wd) = (self.cfg.learning_rate, self.cfg.momentum, self.cfg.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for (decay, (ps, gs, vs)) in [(wd, (&mut p.w, &g.w, &mut v.w)), (0.0, (&mut p.b, &g.b, &mut v.b))] {
                for ((x, &gx), vx) in ps.iter_mut().zip(gs.iter()).zip(vs.iter_mut()) {
                    let step = gx + decay * *x;
                    match self.cfg.kind {
                        OptimizerKind::Sgd => *x -= lr * step,
                        OptimizerKind::Momentum => {
                            *vx = mu * *vx - lr * step;
                            *x += *vx;
                        }
                    }
                }
            }
        }
    }
}

/// Features plus binary labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<f64>) -> Result<Self, NetError> {
        if x.batch() != y.len() {
            return Err(NetError::ShapeMismatch { expected: y.len(), got: x.batch() });
        }
        for &v in &y {
            check_label(v)?;
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<f64>) {
        let f = self.x.features();
        let mut values = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            values.extend_from_slice(self.x.row(i));
        }
        (Tensor { shape: vec![idx.len(), f], values }, idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Trains a sigmoid-output network with BCE and returns the mean loss of
/// every epoch. Shuffling and dropout draw from `cfg.seed`.
pub fn train_epochs(net: &mut Network, data: &Dataset, cfg: &OptimizerConfig) -> Result<Vec<f64>, NetError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetError::Empty);
    }
    if !net.ends_with_sigmoid() || net.spec.output_dim()? != 1 {
        return Err(NetError::InvalidSpec("training needs a single sigmoid output".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, &net.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk);
            let cache = net.forward(&x, Mode::Train(&mut rng))?;
            let (loss, grad) = bce_logit_grad(&cache.output().values, &y)?;
            total += loss * chunk.len() as f64;
            let grads = net.backward_logits_params(&cache, &Tensor { shape: vec![chunk.len(), 1], values: grad })?;
            opt.step(&mut net.params, &grads.params);
        }
        let loss = total / data.len() as f64;
        trace.push(loss);
        let over = cfg.loss_ceiling.is_some_and(|c| loss > c);
        if !loss.is_finite() || over || !net.all_finite() {
            return Err(NetError::Diverged { epoch, loss, trace });
        }
    }
    Ok(trace)
}
