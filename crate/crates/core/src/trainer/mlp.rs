//! Feed-forward softmax classifier with ReLU hidden layers, hand-derived
//! backpropagation and SGD with momentum.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textio::{comment_block, fmt_f64, parse_f64, read_lines, write_file};
use crate::types::{ClassPrior, PredictionMatrix};

/// One affine layer, `x W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: Array2::zeros((n_in, n_out)),
            bias: Array1::zeros(n_out),
        }
    }

    fn zeros_like(other: &Dense) -> Self {
        Self::zeros(other.weights.nrows(), other.weights.ncols())
    }
}

/// Network weights plus the momentum buffers of the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layers: Vec<Dense>,
    momentum: Vec<Dense>,
}

impl ModelParams {
    /// He-normal hidden weights, zero biases and a zero output layer, so the
    /// untrained network predicts uniformly.
    pub fn init(input_dim: usize, hidden: &[usize], n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden, n_classes)?;
        let n = p.layers.len();
        for layer in &mut p.layers[..n - 1] {
            let scale = (2.0 / layer.weights.nrows() as f64).sqrt();
            layer.weights.mapv_inplace(|_| scale * rng.normal());
        }
        Ok(p)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], n_classes: usize) -> Result<Self> {
        if input_dim == 0 || n_classes == 0 || hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive: {input_dim} -> {hidden:?} -> {n_classes}"
            )));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_classes);
        let layers: Vec<Dense> = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self::from_layers(layers))
    }

    fn from_layers(layers: Vec<Dense>) -> Self {
        let momentum = layers.iter().map(Dense::zeros_like).collect();
        Self { layers, momentum }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn momentum(&self) -> &[Dense] {
        &self.momentum
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.ncols()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.ncols())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input followed by each post-ReLU hidden activation.
    pub inputs: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: PredictionMatrix,
}

pub fn forward_cached(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    if x.ncols() != params.input_dim() {
        return Err(Error::shape(format!(
            "{} features for a network expecting {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut h = x.to_owned();
    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = h.dot(&layer.weights);
        z += &layer.bias;
        inputs.push(h);
        if k + 1 < n_layers {
            z.mapv_inplace(|v| v.max(0.0));
        }
        h = z;
    }
    let probs = PredictionMatrix::from_logits(h.view())?;
    Ok(ForwardCache {
        inputs,
        logits: h,
        probs,
    })
}

/// Logits and row-softmax probabilities.
pub fn forward(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, PredictionMatrix)> {
    let c = forward_cached(params, x)?;
    Ok((c.logits, c.probs))
}

/// Parameter gradients given the gradient of the loss with respect to the
/// logits of a cached forward pass.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_logits: ArrayView2<'_, f64>) -> Vec<Dense> {
    let n_layers = params.layers.len();
    let mut grads: Vec<Dense> = Vec::with_capacity(n_layers);
    let mut delta = grad_logits.to_owned();
    for k in (0..n_layers).rev() {
        let input = &cache.inputs[k];
        let weights = input.t().dot(&delta);
        let bias = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut back = delta.dot(&params.layers[k].weights.t());
            // ReLU mask: the stored input is the post-activation, zero where clipped.
            ndarray::Zip::from(&mut back)
                .and(input)
                .for_each(|b, &a| {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                });
            delta = back;
        }
        grads.push(Dense { weights, bias });
    }
    grads.reverse();
    grads
}

/// Adds `scale * src` into `dst`, layer by layer.
pub fn accumulate(dst: &mut [Dense], src: &[Dense], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.weights.scaled_add(scale, &s.weights);
        d.bias.scaled_add(scale, &s.bias);
    }
}

pub fn zero_grads(params: &ModelParams) -> Vec<Dense> {
    params.layers.iter().map(Dense::zeros_like).collect()
}

/// `buf <- momentum buf + grad; param <- param - lr buf`.
pub fn sgd_momentum_step(params: &mut ModelParams, grads: &[Dense], lr: f64, momentum: f64) {
    for ((layer, buf), g) in params.layers.iter_mut().zip(&mut params.momentum).zip(grads) {
        buf.weights.mapv_inplace(|v| v * momentum);
        buf.weights += &g.weights;
        buf.bias.mapv_inplace(|v| v * momentum);
        buf.bias += &g.bias;
        layer.weights.scaled_add(-lr, &buf.weights);
        layer.bias.scaled_add(-lr, &buf.bias);
    }
}

const MODEL_MAGIC: &str = "plrlab-model";
const MODEL_VERSION: &str = "v1";

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(fmt_f64).collect::<Vec<_>>().join("\t")
}

/// Writes the network weights and the class prior it was trained with.
///
/// ```text
/// plrlab-model v1 input=<d> hidden=<h1,h2,..> classes=<c>
/// # comment lines
/// prior\t<c values>
/// layer\t<k>
/// w\t<row of W>      (one line per input unit)
/// b\t<bias values>
/// ```
pub fn write_model(params: &ModelParams, prior: &ClassPrior, path: &Path, comments: &[String]) -> Result<()> {
    let hidden = params
        .hidden()
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = format!(
        "{MODEL_MAGIC} {MODEL_VERSION} input={} hidden={hidden} classes={}\n",
        params.input_dim(),
        params.n_classes()
    );
    out.push_str(&comment_block(comments));
    out.push_str(&format!("prior\t{}\n", join(prior.as_slice().iter().copied())));
    for (k, layer) in params.layers.iter().enumerate() {
        out.push_str(&format!("layer\t{k}\n"));
        for row in layer.weights.outer_iter() {
            out.push_str(&format!("w\t{}\n", join(row.iter().copied())));
        }
        out.push_str(&format!("b\t{}\n", join(layer.bias.iter().copied())));
    }
    write_file(path, &out)
}

fn header_field<'a>(tok: Option<&'a str>, key: &str) -> Option<&'a str> {
    tok?.strip_prefix(key)?.strip_prefix('=')
}

/// Reads a model written by [`write_model`]. Momentum buffers start at zero.
pub fn read_model(path: &Path) -> Result<(ModelParams, ClassPrior)> {
    let lines: Vec<(usize, String)> = read_lines(path)?
        .into_iter()
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();
    let bad = |line: usize, msg: &str| Error::format(path, line, msg);
    let (_, header) = lines.first().ok_or_else(|| bad(1, "empty model file"))?;
    let mut toks = header.split(' ');
    if toks.next() != Some(MODEL_MAGIC) {
        return Err(bad(1, "not a plrlab model file"));
    }
    if toks.next() != Some(MODEL_VERSION) {
        return Err(bad(1, "unsupported model version"));
    }
    let input: usize = header_field(toks.next(), "input")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(1, "bad input= field"))?;
    let hidden: Vec<usize> = match header_field(toks.next(), "hidden") {
        Some("") => Vec::new(),
        Some(v) => v
            .split(',')
            .map(|h| h.parse().map_err(|_| bad(1, "bad hidden= field")))
            .collect::<Result<_>>()?,
        None => return Err(bad(1, "missing hidden= field")),
    };
    let classes: usize = header_field(toks.next(), "classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(1, "bad classes= field"))?;
    let mut params = ModelParams::zeros(input, &hidden, classes).map_err(|e| bad(1, &e.to_string()))?;

    let mut it = lines.iter().skip(1);
    let mut next_values = |tag: &str, width: usize| -> Result<(usize, Vec<f64>)> {
        let (ln, line) = it.next().ok_or_else(|| bad(lines.len() + 1, "truncated model file"))?;
        let mut parts = line.split('\t');
        if parts.next() != Some(tag) {
            return Err(bad(*ln, &format!("expected a {tag} line")));
        }
        let vals: Vec<f64> = parts
            .map(|s| parse_f64(s).ok_or_else(|| bad(*ln, &format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != width {
            return Err(bad(*ln, &format!("expected {width} values, found {}", vals.len())));
        }
        Ok((*ln, vals))
    };
    let (ln, raw_prior) = next_values("prior", classes)?;
    let prior = ClassPrior::new(raw_prior).map_err(|e| bad(ln, &e.to_string()))?;
    for k in 0..params.layers.len() {
        let (n_in, n_out) = params.layers[k].weights.dim();
        let (ln, tag) = next_values("layer", 1)?;
        if tag[0] != k as f64 {
            return Err(bad(ln, &format!("layer {k} out of order")));
        }
        for row in 0..n_in {
            let (_, vals) = next_values("w", n_out)?;
            params.layers[k].weights.row_mut(row).assign(&Array1::from(vals));
        }
        params.layers[k].bias = Array1::from(next_values("b", n_out)?.1);
    }
    Ok((params, prior))
}
