use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{DiagGaussian, VAR_MAX, VAR_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Mean and log-variance halves, `2 × output` final units.
    Gaussian,
    Plain,
}

/// Dense feed-forward network shape.
///
/// `layer_widths` is `[input, hidden.., output]`; for a Gaussian head the
/// output width is the latent dimension and the final layer carries twice
/// as many units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
}

impl MlpConfig {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head: OutputHead,
    ) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self {
            layer_widths,
            activation,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::invalid(
                "mlp needs an input width, at least one hidden layer and an output width",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("mlp layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.layer_count();
        (0..n)
            .map(|i| {
                let out = self.layer_widths[i + 1];
                let out = if i + 1 == n && self.head == OutputHead::Gaussian {
                    2 * out
                } else {
                    out
                };
                (self.layer_widths[i], out)
            })
            .collect()
    }

    /// Flattened parameter count.
    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Tensor names, in storage order, under `prefix`.
    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layer_count())
            .flat_map(|i| [format!("{prefix}.w{i}"), format!("{prefix}.b{i}")])
            .collect()
    }
}

/// Network weights stored as `[w0, b0, w1, b1, ..]` with `w: fan_in×fan_out`
/// and `b: 1×fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub tensors: Vec<Array2<f64>>,
}

impl NetParams {
    /// Uniform fan-in initialization, `U(±sqrt(3 / fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Self {
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in config.layer_shapes() {
            let bound = (3.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            tensors.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                dist.sample(rng)
            }));
            tensors.push(Array2::zeros((1, fan_out)));
        }
        Self { tensors }
    }

    pub fn zeros(config: &MlpConfig) -> Self {
        let tensors = config
            .layer_shapes()
            .into_iter()
            .flat_map(|(i, o)| [Array2::zeros((i, o)), Array2::zeros((1, o))])
            .collect();
        Self { tensors }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self, config: &MlpConfig) -> Result<()> {
        check_shapes(config, &self.tensors)
    }
}

pub(crate) fn check_shapes(config: &MlpConfig, tensors: &[Array2<f64>]) -> Result<()> {
    let shapes = config.layer_shapes();
    check_dim("mlp tensor count", 2 * shapes.len(), tensors.len())?;
    for (i, (fan_in, fan_out)) in shapes.into_iter().enumerate() {
        if tensors[2 * i].dim() != (fan_in, fan_out) || tensors[2 * i + 1].dim() != (1, fan_out)
        {
            return Err(Error::invalid(format!("mlp layer {i} has the wrong shape")));
        }
    }
    Ok(())
}

/// Raw network output (no head post-processing) for a batch of rows.
pub fn forward(config: &MlpConfig, tensors: &[Array2<f64>], x: ArrayView2<f64>) -> Array2<f64> {
    let n = config.layer_count();
    let mut h = x.to_owned();
    for i in 0..n {
        let mut z = h.dot(&tensors[2 * i]);
        z += &tensors[2 * i + 1];
        if i + 1 < n {
            z.mapv_inplace(|v| config.activation.apply(v));
        }
        h = z;
    }
    h
}

/// Same network recorded on a tape; `vars` mirrors the tensor layout.
pub fn forward_tape(config: &MlpConfig, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
    let n = config.layer_count();
    let mut h = x;
    for i in 0..n {
        let z = tape.matmul(h, vars[2 * i]);
        let z = tape.add_row(z, vars[2 * i + 1]);
        h = if i + 1 < n {
            config.activation.on_tape(tape, z)
        } else {
            z
        };
    }
    h
}

pub(crate) const LOG_VAR_MIN: f64 = -18.420_680_743_952_367; // ln 1e-8
pub(crate) const LOG_VAR_MAX: f64 = 18.420_680_743_952_367;

/// Batched Gaussian head: rows of means and of (clamped) variances.
pub fn encode_batch(
    config: &MlpConfig,
    tensors: &[Array2<f64>],
    x: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if config.head != OutputHead::Gaussian {
        return Err(Error::invalid("encode requires a gaussian output head"));
    }
    check_dim("encoder input width", config.input_dim(), x.ncols())?;
    let out = forward(config, tensors, x);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    let l = config.output_dim();
    let mean = out.slice(s![.., ..l]).to_owned();
    let var = out
        .slice(s![.., l..])
        .mapv(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp().clamp(VAR_MIN, VAR_MAX));
    Ok((mean, var))
}

/// Encodes one input vector into a latent Gaussian.
pub fn encode(params: &NetParams, config: &MlpConfig, x: &[f64]) -> Result<DiagGaussian> {
    params.check_shapes(config)?;
    let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
    let (mean, var) = encode_batch(config, &params.tensors, row)?;
    DiagGaussian::new(mean.row(0).to_vec(), var.row(0).to_vec())
}

/// Data-driven decoder mean for one latent point.
pub fn decode_datadriven(params: &NetParams, config: &MlpConfig, z: &[f64]) -> Result<Vec<f64>> {
    params.check_shapes(config)?;
    if config.head != OutputHead::Plain {
        return Err(Error::invalid("decoder requires a plain output head"));
    }
    check_dim("decoder latent width", config.input_dim(), z.len())?;
    let row = ArrayView2::from_shape((1, z.len()), z).expect("contiguous row");
    let out = forward(config, &params.tensors, row);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder activations".into()));
    }
    Ok(out.index_axis(Axis(0), 0).to_vec())
}

/// Column means of a batch, handy for summaries.
pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
