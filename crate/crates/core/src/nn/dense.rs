use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's own output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected feed-forward network with all parameters in one flat
/// buffer.
///
/// Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs and owns a
/// `(sizes[l] + 1) x sizes[l + 1]` row-major block: one row per input followed
/// by the bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<f64>,
}

/// Per-layer outputs of one forward pass, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub input_grad: Vec<f64>,
    pub param_grad: Vec<f64>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl DenseNet {
    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases alike.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let block = (w[0] + 1) * w[1];
            for p in &mut net.weights[offset..offset + block] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += block;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "a network needs at least an input and an output size".into(),
            ));
        }
        let mut activations = vec![hidden; sizes.len() - 1];
        *activations.last_mut().unwrap() = output;
        Self::from_parts(sizes.to_vec(), activations, vec![0.0; param_count(sizes)])
    }

    pub fn from_parts(sizes: Vec<usize>, activations: Vec<Activation>, weights: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be positive and at least two long, got {sizes:?}"
            )));
        }
        check_dim("activation list", sizes.len() - 1, activations.len())?;
        check_dim("weight count", param_count(&sizes), weights.len())?;
        Ok(Self {
            sizes,
            activations,
            weights,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Multiply the final layer (weights and bias) by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let n = self.sizes.len();
        let block = (self.sizes[n - 2] + 1) * self.sizes[n - 1];
        let start = self.weights.len() - block;
        for w in &mut self.weights[start..] {
            *w *= factor;
        }
    }

    /// Set the output layer's bias entries.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        check_dim("output bias", self.output_dim(), bias.len())?;
        let out = self.output_dim();
        let start = self.weights.len() - out;
        self.weights[start..].copy_from_slice(bias);
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), input.len())?;
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace);
        Ok(trace.layers.pop().unwrap())
    }

    /// Forward pass recording every layer output. The caller guarantees the
    /// input length.
    pub fn forward_trace(&self, input: &[f64], trace: &mut Trace) {
        debug_assert_eq!(input.len(), self.input_dim());
        let n_layers = self.sizes.len();
        trace.layers.resize_with(n_layers, Vec::new);
        trace.layers[0].clear();
        trace.layers[0].extend_from_slice(input);
        let mut offset = 0;
        for l in 0..n_layers - 1 {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let block = &self.weights[offset..offset + (fan_in + 1) * fan_out];
            let (done, rest) = trace.layers.split_at_mut(l + 1);
            let x = &done[l];
            let y = &mut rest[0];
            y.clear();
            y.extend_from_slice(&block[fan_in * fan_out..]);
            for (i, &xi) in x.iter().enumerate() {
                let row = &block[i * fan_out..(i + 1) * fan_out];
                for (yj, &w) in y.iter_mut().zip(row) {
                    *yj += xi * w;
                }
            }
            let act = self.activations[l];
            if act != Activation::Identity {
                for yj in y.iter_mut() {
                    *yj = act.apply(*yj);
                }
            }
            offset += (fan_in + 1) * fan_out;
        }
    }

    /// Backpropagate `out_grad` (dL/dy) through a recorded pass. Returns
    /// dL/dx and, when given, accumulates dL/dθ into `param_grad`.
    pub fn backward(&self, trace: &Trace, out_grad: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.sizes.len();
        let mut delta: Vec<f64> = out_grad.to_vec();
        let mut offset = self.weights.len();
        for l in (0..n_layers - 1).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let block_len = (fan_in + 1) * fan_out;
            offset -= block_len;
            let act = self.activations[l];
            let y = &trace.layers[l + 1];
            if act != Activation::Identity {
                for (d, &yj) in delta.iter_mut().zip(y) {
                    *d *= act.derivative_from_output(yj);
                }
            }
            let x = &trace.layers[l];
            let block = &self.weights[offset..offset + block_len];
            if let Some(pg) = param_grad.as_deref_mut() {
                let gblock = &mut pg[offset..offset + block_len];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gblock[i * fan_out..(i + 1) * fan_out];
                    for (g, &d) in row.iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
                for (g, &d) in gblock[fan_in * fan_out..].iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            let mut prev = vec![0.0; fan_in];
            for (i, p) in prev.iter_mut().enumerate() {
                let row = &block[i * fan_out..(i + 1) * fan_out];
                *p = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
            }
            delta = prev;
        }
        delta
    }

    /// Gradient of `weighting · forward(input)` with respect to the input.
    pub fn input_gradient(&self, input: &[f64], weighting: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gradients_inner(input, weighting, false)?.input_grad)
    }

    /// Gradient of `weighting · forward(input)` with respect to the weights.
    pub fn param_gradient(&self, input: &[f64], weighting: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gradients_inner(input, weighting, true)?.param_grad)
    }

    pub fn gradients(&self, input: &[f64], weighting: &[f64]) -> Result<GradientReport> {
        self.gradients_inner(input, weighting, true)
    }

    fn gradients_inner(&self, input: &[f64], weighting: &[f64], want_params: bool) -> Result<GradientReport> {
        check_dim("network input", self.input_dim(), input.len())?;
        check_dim("output weighting", self.output_dim(), weighting.len())?;
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace);
        let mut param_grad = if want_params {
            vec![0.0; self.weights.len()]
        } else {
            Vec::new()
        };
        let input_grad = self.backward(&trace, weighting, want_params.then_some(param_grad.as_mut_slice()));
        Ok(GradientReport { input_grad, param_grad })
    }

    /// Serialise to the text weight format: one header line, then one
    /// weight per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.name()).collect();
        let mut out = format!(
            "densenet sizes={} activations={} count={}\n",
            sizes.join(","),
            acts.join(","),
            self.weights.len()
        );
        for w in &self.weights {
            writeln!(out, "{w:.16e}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("weight file", "empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("densenet") {
            return Err(Error::parse("weight file", "missing `densenet` header"));
        }
        let (mut sizes, mut acts, mut count) = (None, None, None);
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse("weight file header", format!("bad field `{field}`")))?;
            match key {
                "sizes" => {
                    sizes = Some(
                        value
                            .split(',')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| Error::parse("weight file sizes", e.to_string()))?,
                    )
                }
                "activations" => {
                    acts = Some(
                        value
                            .split(',')
                            .map(|s| {
                                Activation::from_name(s)
                                    .ok_or_else(|| Error::parse("weight file", format!("unknown activation `{s}`")))
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "count" => {
                    count = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| Error::parse("weight file count", e.to_string()))?,
                    )
                }
                other => return Err(Error::parse("weight file header", format!("unknown key `{other}`"))),
            }
        }
        let sizes = sizes.ok_or_else(|| Error::parse("weight file", "missing sizes"))?;
        let acts = acts.ok_or_else(|| Error::parse("weight file", "missing activations"))?;
        let weights = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse("weight file", format!("weight line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(count) = count {
            check_dim("weight file count", count, weights.len())?;
        }
        check_finite("weight file", &weights)?;
        Self::from_parts(sizes, acts, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
