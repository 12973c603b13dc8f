use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::dense::{DenseNet, Trace};
use super::optim::{train_step, Adam, Loss, Sample};
use crate::error::{check_dim, check_finite, Error, Result};

/// Per-dimension affine input map `z = (x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim("standardizer", mean.len(), scale.len())?;
        check_finite("standardizer mean", &mean)?;
        if scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidConfig("standardizer scales must be positive".into()));
        }
        Ok(Self { mean, scale })
    }

    /// Column means and standard deviations of `rows`. Near-constant columns
    /// get unit scale.
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        for row in rows {
            check_dim("standardizer row", dim, row.len())?;
            n += 1;
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x;
                sum_sq[j] += x * x;
            }
        }
        if n == 0 {
            return Err(Error::InsufficientData("no rows to standardize".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / nf - m * m).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self::new(mean, scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len());
        self.apply_into(x, &mut z);
        z
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s));
    }

    /// Inverse map `x = z * scale + mean`.
    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// Pull a gradient with respect to `z` back to `x`.
    pub fn chain(&self, grad_z: &mut [f64]) {
        for (g, s) in grad_z.iter_mut().zip(&self.scale) {
            *g /= s;
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (label, values) in [("mean", &self.mean), ("scale", &self.scale)] {
            out.push_str(label);
            for v in values {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut scale = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let label = parts.next().unwrap();
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("standardization record", e.to_string()))?;
            match label {
                "mean" => mean = Some(values),
                "scale" => scale = Some(values),
                other => return Err(Error::parse("standardization record", format!("unknown row `{other}`"))),
            }
        }
        Self::new(
            mean.ok_or_else(|| Error::parse("standardization record", "missing mean"))?,
            scale.ok_or_else(|| Error::parse("standardization record", "missing scale"))?,
        )
    }
}

/// A dense net between an input standardizer and an output de-standardizer:
/// `y = output.invert(net(input.apply(x)))`. Gradients are reported in raw
/// input/output units.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledNet {
    pub input: Standardizer,
    pub output: Standardizer,
    pub net: DenseNet,
}

impl ScaledNet {
    pub fn new(input: Standardizer, output: Standardizer, net: DenseNet) -> Result<Self> {
        check_dim("standardizer vs network input", net.input_dim(), input.dim())?;
        check_dim("standardizer vs network output", net.output_dim(), output.dim())?;
        Ok(Self { input, output, net })
    }

    /// Input standardization only; outputs are the raw network outputs.
    pub fn with_input_scaling(input: Standardizer, net: DenseNet) -> Result<Self> {
        let out = Standardizer::identity(net.output_dim());
        Self::new(input, out, net)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("model input", self.input_dim(), x.len())?;
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace);
        Ok(self.output_of(&trace))
    }

    pub fn forward_trace(&self, x: &[f64], trace: &mut Trace) {
        let z = self.input.apply(x);
        self.net.forward_trace(&z, trace);
    }

    /// Raw-unit output of a recorded pass.
    pub fn output_of(&self, trace: &Trace) -> Vec<f64> {
        self.output.invert(trace.output())
    }

    /// Backward through a trace from `forward_trace`. `out_grad` is dL/dy in
    /// raw output units; the returned gradient is dL/dx in raw input units.
    pub fn backward(&self, trace: &Trace, out_grad: &[f64], param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let g_net: Vec<f64> = out_grad.iter().zip(self.output.scale()).map(|(g, s)| g * s).collect();
        let mut g = self.net.backward(trace, &g_net, param_grad);
        self.input.chain(&mut g);
        g
    }

    /// Returns `(output, d(weighting · output)/dx)`.
    pub fn value_and_input_gradient(&self, x: &[f64], weighting: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("model input", self.input_dim(), x.len())?;
        check_dim("output weighting", self.output_dim(), weighting.len())?;
        let mut trace = Trace::default();
        self.forward_trace(x, &mut trace);
        let out = self.output_of(&trace);
        let g = self.backward(&trace, weighting, None);
        Ok((out, g))
    }

    pub fn input_gradient(&self, x: &[f64], weighting: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_input_gradient(x, weighting)?.1)
    }

    /// Mean-squared-error gradient step in standardized output space.
    pub fn regression_step(&mut self, inputs: &[&[f64]], targets: &[&[f64]], opt: &mut Adam) -> Result<f64> {
        check_dim("regression batch", inputs.len(), targets.len())?;
        let zs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| {
                check_dim("model input", self.input_dim(), x.len())?;
                Ok(self.input.apply(x))
            })
            .collect::<Result<_>>()?;
        let ts: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| {
                check_dim("regression target", self.output_dim(), t.len())?;
                Ok(self.output.apply(t))
            })
            .collect::<Result<_>>()?;
        let batch: Vec<Sample> = zs
            .iter()
            .zip(&ts)
            .map(|(z, t)| Sample { input: z, target: t })
            .collect();
        let outcome = train_step(&mut self.net, &batch, Loss::Mse, opt)?;
        Ok(outcome.loss.unwrap_or(f64::NAN))
    }

    /// Writes `<path>` (weights) and `<path>.scale` (standardization sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(path)?;
        let text = format!(
            "{}{}",
            self.input.to_text(),
            self.output
                .to_text()
                .lines()
                .map(|l| format!("out_{l}\n"))
                .collect::<String>()
        );
        std::fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net = DenseNet::load(path)?;
        let side = sidecar_path(path);
        if !side.exists() {
            return Err(Error::MissingArtifact(side));
        }
        let text = std::fs::read_to_string(side)?;
        let (inp, out): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| !l.starts_with("out_"));
        let input = Standardizer::from_text(&inp.join("\n"))?;
        let output = if out.is_empty() {
            Standardizer::identity(net.output_dim())
        } else {
            let stripped: Vec<&str> = out.iter().map(|l| &l[4..]).collect();
            Standardizer::from_text(&stripped.join("\n"))?
        };
        Self::new(input, output, net)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}
