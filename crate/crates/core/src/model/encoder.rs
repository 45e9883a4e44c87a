use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::metric::EmbeddingSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// `act(x W^T + b)` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("an encoder needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {k}: weight {:?} with bias of length {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-uniform weights, zero biases; `activation` on hidden layers, the
    /// last layer linear.
    pub fn xavier<R: Rng>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::InvalidConfig(format!("layer sizes must be >= 1, got {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("valid range");
                Layer {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng)),
                    bias: Array1::zeros(fan_out),
                    activation: if k == last { Activation::Identity } else { activation },
                }
            })
            .collect();
        Self::new(layers)
    }

    /// A single linear layer computing the identity map.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Layer {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        let mut h = inputs.to_owned();
        for l in &self.layers {
            h = h.dot(&l.weight.t()) + &l.bias;
            let act = l.activation;
            h.mapv_inplace(|v| act.apply(v));
        }
        Ok(h)
    }
}

/// `f_theta` for the first modality, `g_phi` for the second.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub theta: Mlp,
    pub phi: Mlp,
}

impl EncoderPair {
    pub fn new(theta: Mlp, phi: Mlp) -> Result<Self> {
        if theta.output_dim() != phi.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoders output {} and {} dims",
                theta.output_dim(),
                phi.output_dim()
            )));
        }
        Ok(Self { theta, phi })
    }

    pub fn embedding_dim(&self) -> usize {
        self.theta.output_dim()
    }
}

pub fn forward_encode(encoder: &Mlp, inputs: ArrayView2<'_, f64>) -> Result<EmbeddingSet> {
    EmbeddingSet::new(encoder.forward(inputs)?)
}
