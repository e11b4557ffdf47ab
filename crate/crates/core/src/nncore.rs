//! A small deterministic feedforward classifier.
//!
//! The network maps each feature frame to a softmax distribution over the
//! token vocabulary. All arithmetic is `f64`. Parameters live in one flat
//! [`ParamVector`] so that gradients, Fisher diagonals and importance
//! weights share a single shape. Layer `l` contributes a row-major weight
//! matrix `[out × in]` followed by its bias vector `[out]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    pub(crate) fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Input dim, hidden dims, output dim (vocabulary size).
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("layer size at position {pos} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn vocab_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated config")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Describes how a flat parameter array splits into per-layer tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn for_layers(layer_sizes: &[usize]) -> Layout {
        let mut segments = Vec::with_capacity(2 * layer_sizes.len().saturating_sub(1));
        let mut offset = 0;
        for (layer, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            segments.push(Segment {
                layer,
                kind: SegmentKind::Weight,
                rows: fan_out,
                cols: fan_in,
                offset,
            });
            offset += fan_in * fan_out;
            segments.push(Segment {
                layer,
                kind: SegmentKind::Bias,
                rows: fan_out,
                cols: 1,
                offset,
            });
            offset += fan_out;
        }
        Layout { segments }
    }

    /// A single unnamed segment, for tests and toy objectives.
    pub fn flat(len: usize) -> Layout {
        Layout {
            segments: vec![Segment {
                layer: 0,
                kind: SegmentKind::Weight,
                rows: len,
                cols: 1,
                offset: 0,
            }],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn segment_of(&self, index: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&index))
    }
}

/// Flat parameter-shaped vector: parameters, gradients, Fisher diagonals,
/// importance weights and parameter deltas all use this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<ParamVector> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values but layout describes {}",
                values.len(),
                layout.len()
            )));
        }
        let v = ParamVector { values, layout };
        v.ensure_finite("parameter vector")?;
        Ok(v)
    }

    pub fn zeros(layout: &Layout) -> ParamVector {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout: layout.clone(),
        }
    }

    pub fn from_flat(values: Vec<f64>) -> ParamVector {
        let layout = Layout::flat(values.len());
        ParamVector { values, layout }
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector::zeros(&self.layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn ensure_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape(format!(
                "{what}: layout mismatch ({} vs {} parameters)",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Fails with a numerical error naming the first non-finite entry's segment.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(idx) = self.values.iter().position(|v| !v.is_finite()) {
            let place = match self.layout.segment_of(idx) {
                Some(seg) => format!("layer {} {:?} (index {idx})", seg.layer, seg.kind),
                None => format!("index {idx}"),
            };
            return Err(Error::numerical(what, format!("non-finite value at {place}")));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.ensure_same_layout(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.ensure_same_layout(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Dense row-major matrix of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn vstack<'a>(cols: usize, parts: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape(format!(
                    "cannot stack {}-column matrix into {cols} columns",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Frames with their true token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    features: Matrix,
    labels: Vec<usize>,
}

impl FrameBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<FrameBatch> {
        if features.rows() == 0 {
            return Err(Error::Shape("frame batch must contain at least one frame".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} frames",
                labels.len(),
                features.rows()
            )));
        }
        Ok(FrameBatch { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: MlpConfig,
    params: ParamVector,
}

/// Layer inputs recorded by a forward pass. `inputs[l]` is the `[n × in_l]`
/// input of layer `l`; `probs` is the `[n × C]` softmax output.
pub(crate) struct Trace {
    pub(crate) inputs: Vec<Vec<f64>>,
    pub(crate) probs: Vec<f64>,
    pub(crate) log_probs: Vec<f64>,
    pub(crate) n: usize,
}

impl Network {
    /// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn init(config: MlpConfig) -> Result<Network> {
        config.validate()?;
        let layout = Layout::for_layers(&config.layer_sizes);
        let mut values = vec![0.0; layout.len()];
        let mut rng = seed::rng(config.seed);
        for seg in layout.segments() {
            if seg.kind == SegmentKind::Weight {
                let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                for v in &mut values[seg.range()] {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        Ok(Network {
            params: ParamVector { values, layout },
            config,
        })
    }

    pub fn from_params(config: MlpConfig, params: ParamVector) -> Result<Network> {
        config.validate()?;
        let layout = Layout::for_layers(&config.layer_sizes);
        if params.layout() != &layout {
            return Err(Error::Shape(format!(
                "parameters ({} values) do not match network layout {:?}",
                params.len(),
                config.layer_sizes
            )));
        }
        params.ensure_finite("network parameters")?;
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    fn num_layers(&self) -> usize {
        self.config.layer_sizes.len() - 1
    }

    fn weight_and_bias(&self, layer: usize) -> (&[f64], &[f64]) {
        let segs = self.params.layout().segments();
        let w = &segs[2 * layer];
        let b = &segs[2 * layer + 1];
        (self.params.segment(w), self.params.segment(b))
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "features have {} columns, network expects {}",
                features.cols(),
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, features: &Matrix) -> Result<Trace> {
        self.check_input(features)?;
        let n = features.rows();
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        inputs.push(features.data().to_vec());
        let mut logits = Vec::new();
        for l in 0..layers {
            let fan_in = self.config.layer_sizes[l];
            let fan_out = self.config.layer_sizes[l + 1];
            let (w, b) = self.weight_and_bias(l);
            let input = &inputs[l];
            let mut out = vec![0.0; n * fan_out];
            for r in 0..n {
                let x = &input[r * fan_in..(r + 1) * fan_in];
                let z = &mut out[r * fan_out..(r + 1) * fan_out];
                for (o, zo) in z.iter_mut().enumerate() {
                    let wrow = &w[o * fan_in..(o + 1) * fan_in];
                    *zo = b[o] + dot(wrow, x);
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(
                    format!("forward pass, layer {l}"),
                    "non-finite pre-activation",
                ));
            }
            if l + 1 < layers {
                let act = self.config.activation;
                for v in &mut out {
                    *v = act.apply(*v);
                }
                inputs.push(out);
            } else {
                logits = out;
            }
        }
        let c = self.vocab_size();
        let mut probs = vec![0.0; n * c];
        let mut log_probs = vec![0.0; n * c];
        for r in 0..n {
            let z = &logits[r * c..(r + 1) * c];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let log_norm = m + sum.ln();
            for k in 0..c {
                let lp = z[k] - log_norm;
                log_probs[r * c + k] = lp;
                probs[r * c + k] = (z[k] - m).exp() / sum;
            }
        }
        Ok(Trace {
            inputs,
            probs,
            log_probs,
            n,
        })
    }

    /// Softmax probabilities, one row per frame.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        let t = self.trace(features)?;
        Matrix::new(t.n, self.vocab_size(), t.probs)
    }

    /// Backpropagate output-logit deltas `[n × C]` into a parameter gradient.
    pub(crate) fn backprop(&self, trace: &Trace, mut delta: Vec<f64>) -> ParamVector {
        let n = trace.n;
        let mut grad = self.params.zeros_like();
        let segs = self.params.layout().segments().to_vec();
        for l in (0..self.num_layers()).rev() {
            let fan_in = self.config.layer_sizes[l];
            let fan_out = self.config.layer_sizes[l + 1];
            let input = &trace.inputs[l];
            {
                let g = grad.values_mut();
                let (gw, gb) = g[segs[2 * l].offset..segs[2 * l + 1].range().end]
                    .split_at_mut(fan_in * fan_out);
                for r in 0..n {
                    let d = &delta[r * fan_out..(r + 1) * fan_out];
                    let x = &input[r * fan_in..(r + 1) * fan_in];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        gb[o] += dv;
                        for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                            *gwi += dv * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weight_and_bias(l);
            let act = self.config.activation;
            let mut prev = vec![0.0; n * fan_in];
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let p = &mut prev[r * fan_in..(r + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pi, wi) in p.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pi += dv * wi;
                    }
                }
                let h = &input[r * fan_in..(r + 1) * fan_in];
                for (pi, hi) in p.iter_mut().zip(h) {
                    *pi *= act.derivative_from_output(*hi);
                }
            }
            delta = prev;
        }
        grad
    }

    fn check_labels(&self, batch: &FrameBatch) -> Result<()> {
        let c = self.vocab_size();
        if let Some(bad) = batch.labels().iter().find(|&&y| y >= c) {
            return Err(Error::Shape(format!(
                "label {bad} outside vocabulary of size {c}"
            )));
        }
        Ok(())
    }

    /// Mean per-frame cross-entropy of the true labels and its exact gradient.
    pub fn loss_and_grad(&self, batch: &FrameBatch) -> Result<(f64, ParamVector)> {
        self.check_labels(batch)?;
        let trace = self.trace(batch.features())?;
        let c = self.vocab_size();
        let n = trace.n;
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut delta = trace.probs.clone();
        for (r, &y) in batch.labels().iter().enumerate() {
            loss -= trace.log_probs[r * c + y];
            delta[r * c + y] -= 1.0;
        }
        for d in &mut delta {
            *d *= inv_n;
        }
        let loss = loss * inv_n;
        if !loss.is_finite() {
            return Err(Error::numerical("loss", "non-finite cross-entropy"));
        }
        let grad = self.backprop(&trace, delta);
        grad.ensure_finite("gradient")?;
        Ok((loss, grad))
    }

    /// Applies `θ ← θ − lr·grad` in place and returns the applied change.
    pub fn apply_sgd(&mut self, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        self.params.ensure_same_layout(grad, "sgd step")?;
        grad.ensure_finite("sgd step gradient")?;
        let mut delta = grad.zeros_like();
        for ((p, g), d) in self
            .params
            .values
            .iter_mut()
            .zip(grad.values())
            .zip(delta.values_mut())
        {
            let old = *p;
            *p = old - lr * g;
            *d = *p - old;
        }
        Ok(delta)
    }

    /// Pure form of [`Network::apply_sgd`].
    pub fn sgd_step(&self, grad: &ParamVector, lr: f64) -> Result<(Network, ParamVector)> {
        let mut next = self.clone();
        let delta = next.apply_sgd(grad, lr)?;
        Ok((next, delta))
    }

    /// Per-frame argmax token; ties go to the lower token id.
    pub fn predict_tokens(&self, features: &Matrix) -> Result<Vec<usize>> {
        self.check_input(features)?;
        if features.rows() == 0 {
            return Ok(Vec::new());
        }
        let probs = self.forward(features)?;
        Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
    }
}

/// Index of the largest value, preferring the lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sizes: &[usize], seed: u64) -> MlpConfig {
        MlpConfig {
            layer_sizes: sizes.to_vec(),
            activation: Activation::Tanh,
            seed,
        }
    }

    fn zero_net(sizes: &[usize]) -> Network {
        let mut net = Network::init(cfg(sizes, 0)).unwrap();
        net.params_mut().values_mut().fill(0.0);
        net
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = Network::init(cfg(&[4, 8, 5], 7)).unwrap();
        let b = Network::init(cfg(&[4, 8, 5], 7)).unwrap();
        let c = Network::init(cfg(&[4, 8, 5], 8)).unwrap();
        assert_eq!(a.params().values(), b.params().values());
        assert_ne!(a.params().values(), c.params().values());
    }

    #[test]
    fn param_count_follows_layout() {
        let net = Network::init(cfg(&[4, 8, 5], 1)).unwrap();
        assert_eq!(net.params().len(), 4 * 8 + 8 + 8 * 5 + 5);
        assert_eq!(net.params().len(), 85);
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let net = Network::init(cfg(&[4, 8, 5], 3)).unwrap();
        for seg in net.layout().segments() {
            let vals = net.params().segment(seg);
            match seg.kind {
                SegmentKind::Bias => assert!(vals.iter().all(|&v| v == 0.0)),
                SegmentKind::Weight => {
                    let s = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= s));
                }
            }
        }
    }

    #[test]
    fn single_layer_config_rejected() {
        assert!(matches!(Network::init(cfg(&[4], 0)), Err(Error::Config(_))));
        assert!(matches!(Network::init(cfg(&[4, 0, 2], 0)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_net_predicts_uniform() {
        let net = zero_net(&[3, 4, 5]);
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let p = net.forward(&x).unwrap();
        for r in 0..2 {
            for &v in p.row(r) {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        // One frame, C=2: bias-only logits (0, ln 3) give (1/4, 3/4).
        let mut net = zero_net(&[1, 2]);
        net.params_mut().values_mut()[3] = 3.0_f64.ln();
        let x = Matrix::new(1, 1, vec![0.0]).unwrap();
        let p = net.forward(&x).unwrap();
        assert!((p.row(0)[0] - 0.25).abs() < 1e-15);
        assert!((p.row(0)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one_for_large_logits() {
        let mut net = Network::init(cfg(&[2, 3], 5)).unwrap();
        for v in net.params_mut().values_mut() {
            *v *= 400.0;
        }
        let x = Matrix::new(2, 2, vec![3.0, -4.0, 10.0, 8.0]).unwrap();
        let p = net.forward(&x).unwrap();
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_loss_is_ln_c() {
        let net = zero_net(&[3, 4]);
        let x = Matrix::new(3, 3, vec![0.3; 9]).unwrap();
        let batch = FrameBatch::new(x, vec![0, 3, 2]).unwrap();
        let (loss, _) = net.loss_and_grad(&batch).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let net = zero_net(&[3, 4]);
        let x = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
        let x = Matrix::new(1, 3, vec![0.0; 3]).unwrap();
        let batch = FrameBatch::new(x, vec![4]).unwrap();
        assert!(matches!(net.loss_and_grad(&batch), Err(Error::Shape(_))));
        assert!(FrameBatch::new(Matrix::zeros(0, 3), vec![]).is_err());
    }

    #[test]
    fn overflow_reports_layer() {
        let mut net = Network::init(cfg(&[2, 3, 2], 1)).unwrap();
        net.params_mut().values_mut()[0] = f64::MAX;
        let x = Matrix::new(1, 2, vec![f64::MAX, 1.0]).unwrap();
        let batch = FrameBatch::new(x, vec![0]).unwrap();
        match net.loss_and_grad(&batch) {
            Err(Error::Numerical { context, .. }) => assert!(context.contains("layer 0")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let cfg1 = cfg(&[1, 1], 0);
        let mut net = zero_net(&[1, 1]);
        net.params_mut().values_mut()[0] = 1.0;
        let grad = ParamVector::new(vec![2.0, 0.0], net.layout().clone()).unwrap();
        let (next, delta) = net.sgd_step(&grad, 0.1).unwrap();
        assert!((next.params().values()[0] - 0.8).abs() < 1e-15);
        assert!((delta.values()[0] + 0.2).abs() < 1e-15);
        assert_eq!(next.config(), &cfg1);
        for i in 0..2 {
            assert_eq!(
                net.params().values()[i] + delta.values()[i],
                next.params().values()[i]
            );
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let net = Network::init(cfg(&[3, 4, 2], 2)).unwrap();
        let x = Matrix::new(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.2, 0.9]).unwrap();
        let (_, g) = net.loss_and_grad(&FrameBatch::new(x, vec![0, 1]).unwrap()).unwrap();
        let (next, delta) = net.sgd_step(&g, 0.0).unwrap();
        assert_eq!(next.params(), net.params());
        assert!(delta.values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sgd_rejects_non_finite_grad() {
        let net = zero_net(&[1, 1]);
        let mut grad = net.params().zeros_like();
        grad.values_mut()[1] = f64::NAN;
        assert!(matches!(net.sgd_step(&grad, 0.1), Err(Error::Numerical { .. })));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let net = zero_net(&[2, 3]);
        assert_eq!(net.predict_tokens(&Matrix::zeros(0, 2)).unwrap(), Vec::<usize>::new());
        assert_eq!(net.predict_tokens(&Matrix::zeros(2, 2)).unwrap(), vec![0, 0]);
    }
}
