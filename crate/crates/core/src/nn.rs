//! Small fixed-architecture MLPs over a flat parameter vector.
//!
//! Parameters are stored layer-major: for each consecutive pair of layer
//! sizes `(n_in, n_out)` the weight matrix comes first (shape `n_out x n_in`,
//! row-major), followed by the `n_out` biases. Hidden layers apply the
//! configured activation, the output layer is always linear.
//!
//! The likelihood is a homoscedastic Gaussian with fixed `noise_var`, so the
//! negative log-likelihood of a dataset is
//! `sum_i ||y_i - f(x_i)||^2 / (2 noise_var) + (K n_out / 2) ln(2 pi noise_var)`.
//! Gradients are computed by hand-written reverse accumulation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation. ReLU uses 0 at 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        f.write_str(s)
    }
}

/// Layer sizes `(input, hidden..., output)` plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ArchSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an architecture needs at least 2 layers"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be >= 1"));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    /// The `(1, 40, 40, 1)` ReLU network used for sinusoid regression.
    pub fn sinusoid_default() -> Self {
        Self {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `sum (n_in + 1) * n_out` over consecutive layer pairs.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// `(n_in, n_out, weight_offset)` for every layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let here = offset;
            offset += (w[0] + 1) * w[1];
            (w[0], w[1], here)
        })
    }

    fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, architecture expects {}",
                params.len(),
                self.parameter_count()
            )));
        }
        Ok(())
    }
}

/// Weights and biases of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `n_out x n_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The flattened weight vector of an [`ArchSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatParams {
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(arch: &ArchSpec, values: Vec<f64>) -> Result<Self> {
        arch.check_params(&values)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { values })
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        Self {
            values: vec![0.0; arch.parameter_count()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Flatten per-layer matrices into the canonical layout.
    pub fn pack(arch: &ArchSpec, layers: &[LayerParams]) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                arch.num_layers(),
                layers.len()
            )));
        }
        let mut values = Vec::with_capacity(arch.parameter_count());
        for ((n_in, n_out, _), layer) in arch.layout().zip(layers) {
            if layer.weights.len() != n_in * n_out || layer.bias.len() != n_out {
                return Err(Error::invalid("layer matrix shape does not match architecture"));
            }
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.bias);
        }
        Self::new(arch, values)
    }

    pub fn unpack(&self, arch: &ArchSpec) -> Result<Vec<LayerParams>> {
        arch.check_params(&self.values)?;
        Ok(arch
            .layout()
            .map(|(n_in, n_out, off)| {
                let w_end = off + n_in * n_out;
                LayerParams {
                    weights: self.values[off..w_end].to_vec(),
                    bias: self.values[w_end..w_end + n_out].to_vec(),
                }
            })
            .collect())
    }
}

/// `K` input/target rows stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_in: usize,
    n_out: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(n_in: usize, n_out: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::invalid("dataset dimensions must be >= 1"));
        }
        if inputs.len() % n_in != 0 || targets.len() % n_out != 0 {
            return Err(Error::invalid("dataset buffers are not whole rows"));
        }
        if inputs.len() / n_in != targets.len() / n_out {
            return Err(Error::invalid("input and target row counts differ"));
        }
        Ok(Self {
            n_in,
            n_out,
            inputs,
            targets,
        })
    }

    pub fn empty(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.n_in
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.n_in
    }

    pub fn output_dim(&self) -> usize {
        self.n_out
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_in..(i + 1) * self.n_in]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.n_out..(i + 1) * self.n_out]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_in != other.n_in || self.n_out != other.n_out {
            return Err(Error::invalid("cannot concatenate datasets of different shapes"));
        }
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Ok(Dataset {
            n_in: self.n_in,
            n_out: self.n_out,
            inputs,
            targets,
        })
    }

    /// Rows selected by `order` (used for permutation tests and splits).
    pub fn select(&self, order: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(order.len() * self.n_in);
        let mut targets = Vec::with_capacity(order.len() * self.n_out);
        for &i in order {
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
        }
        Dataset {
            n_in: self.n_in,
            n_out: self.n_out,
            inputs,
            targets,
        }
    }

    fn check_arch(&self, arch: &ArchSpec) -> Result<()> {
        if self.n_in != arch.input_dim() || self.n_out != arch.output_dim() {
            return Err(Error::invalid(format!(
                "dataset shape ({}, {}) does not match architecture ({}, {})",
                self.n_in,
                self.n_out,
                arch.input_dim(),
                arch.output_dim()
            )));
        }
        Ok(())
    }
}

/// Evaluate `f_params(x)`.
pub fn forward(arch: &ArchSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    if x.len() != arch.input_dim() {
        return Err(Error::invalid(format!(
            "input has length {}, architecture expects {}",
            x.len(),
            arch.input_dim()
        )));
    }
    let mut cur = x.to_vec();
    let last = arch.num_layers() - 1;
    for (l, (n_in, n_out, off)) in arch.layout().enumerate() {
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        let next: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>();
                if l == last {
                    z
                } else {
                    arch.activation.apply(z)
                }
            })
            .collect();
        cur = next;
    }
    Ok(cur)
}

/// Mean squared error of `f_params` on `data`, averaged over rows and outputs.
pub fn mse(arch: &ArchSpec, params: &[f64], data: &Dataset) -> Result<f64> {
    data.check_arch(arch)?;
    if data.is_empty() {
        return Err(Error::invalid("mse of an empty dataset"));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = forward(arch, params, data.input(i))?;
        total += out
            .iter()
            .zip(data.target(i))
            .map(|(f, y)| (f - y) * (f - y))
            .sum::<f64>();
    }
    Ok(total / (data.len() * data.output_dim()) as f64)
}

fn gaussian_nll_const(rows: usize, n_out: usize, noise_var: f64) -> f64 {
    0.5 * (rows * n_out) as f64 * (2.0 * PI * noise_var).ln()
}

fn check_nll_args(arch: &ArchSpec, params: &[f64], data: &Dataset, noise_var: f64) -> Result<()> {
    arch.check_params(params)?;
    data.check_arch(arch)?;
    if data.is_empty() {
        return Err(Error::invalid("negative log-likelihood of an empty dataset"));
    }
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::invalid("noise_var must be positive and finite"));
    }
    Ok(())
}

/// Negative Gaussian log-likelihood without the gradient.
pub fn nll(arch: &ArchSpec, params: &[f64], data: &Dataset, noise_var: f64) -> Result<f64> {
    check_nll_args(arch, params, data, noise_var)?;
    let mut sq = 0.0;
    for i in 0..data.len() {
        let out = forward(arch, params, data.input(i))?;
        sq += out
            .iter()
            .zip(data.target(i))
            .map(|(f, y)| (y - f) * (y - f))
            .sum::<f64>();
    }
    Ok(sq / (2.0 * noise_var) + gaussian_nll_const(data.len(), data.output_dim(), noise_var))
}

/// Negative Gaussian log-likelihood and its exact gradient with respect to
/// the flat parameters.
pub fn nll_and_grad(
    arch: &ArchSpec,
    params: &[f64],
    data: &Dataset,
    noise_var: f64,
) -> Result<(f64, Vec<f64>)> {
    check_nll_args(arch, params, data, noise_var)?;
    let layout: Vec<(usize, usize, usize)> = arch.layout().collect();
    let n_layers = layout.len();
    let act = arch.activation;

    // acts[l] is the input to layer l; pre[l] its pre-activation output.
    let mut acts: Vec<Vec<f64>> = layout.iter().map(|&(n_in, _, _)| vec![0.0; n_in]).collect();
    let mut pre: Vec<Vec<f64>> = layout.iter().map(|&(_, n_out, _)| vec![0.0; n_out]).collect();
    let mut grad = vec![0.0; params.len()];
    let width = arch.max_width();
    let mut delta = vec![0.0; width];
    let mut delta_prev = vec![0.0; width];
    let mut sq = 0.0;

    for i in 0..data.len() {
        acts[0].copy_from_slice(data.input(i));
        for l in 0..n_layers {
            let (n_in, n_out, off) = layout[l];
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                pre[l][o] = b[o] + row.iter().zip(&acts[l]).map(|(a, c)| a * c).sum::<f64>();
            }
            if l + 1 < n_layers {
                for j in 0..n_out {
                    acts[l + 1][j] = act.apply(pre[l][j]);
                }
            }
        }

        let (_, n_out_last, _) = layout[n_layers - 1];
        for (o, y) in data.target(i).iter().enumerate().take(n_out_last) {
            let r = pre[n_layers - 1][o] - y;
            sq += r * r;
            delta[o] = r / noise_var;
        }

        for l in (0..n_layers).rev() {
            let (n_in, n_out, off) = layout[l];
            let w_end = off + n_in * n_out;
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in g_row.iter_mut().zip(&acts[l]) {
                    *g += d * a;
                }
                grad[w_end + o] += d;
            }
            if l > 0 {
                let w = &params[off..w_end];
                for j in 0..n_in {
                    let mut s = 0.0;
                    for o in 0..n_out {
                        s += w[o * n_in + j] * delta[o];
                    }
                    delta_prev[j] = s * act.derivative(pre[l - 1][j]);
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
    }

    let value = sq / (2.0 * noise_var) + gaussian_nll_const(data.len(), data.output_dim(), noise_var);
    Ok((value, grad))
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = f(&probe);
        probe[i] = params[i] - eps;
        let minus = f(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest componentwise relative error between `analytic` and `numeric`.
///
/// Components where both magnitudes are below `abs_floor` are compared
/// absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < abs_floor {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(arch: &ArchSpec, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..arch.parameter_count())
            .map(|_| rng.random_range(-scale..scale))
            .collect()
    }

    fn random_data(arch: &ArchSpec, k: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..k * arch.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = (0..k * arch.output_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        Dataset::new(arch.input_dim(), arch.output_dim(), x, y).unwrap()
    }

    // Independent forward pass over unpacked layer matrices.
    fn reference_forward(arch: &ArchSpec, layers: &[LayerParams], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let n_out = layer.bias.len();
            let n_in = h.len();
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    *zo += layer.weights[o * n_in + j] * hj;
                }
            }
            if l + 1 < layers.len() {
                for v in z.iter_mut() {
                    *v = match arch.activation() {
                        Activation::Relu => {
                            if *v > 0.0 {
                                *v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                        Activation::Identity => *v,
                    };
                }
            }
            assert_eq!(z.len(), n_out);
            h = z;
        }
        h
    }

    #[test]
    fn parameter_count_matches_formula() {
        let arch = ArchSpec::sinusoid_default();
        assert_eq!(arch.parameter_count(), 2 * 40 + 41 * 40 + 41);
        assert!(ArchSpec::new(vec![3], Activation::Relu).is_err());
        assert!(ArchSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = ArchSpec::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        let out = forward(&arch, &vec![0.0; arch.parameter_count()], &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let arch = ArchSpec::new(vec![3, 3], Activation::Identity).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let p = FlatParams::pack(&arch, &[LayerParams { weights: w, bias: vec![0.0; 3] }]).unwrap();
        let x = [0.25, -4.0, 7.5];
        assert_eq!(forward(&arch, p.as_slice(), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let arch = ArchSpec::sinusoid_default();
        let params = FlatParams::new(&arch, random_params(&arch, 7, 0.5)).unwrap();
        let layers = params.unpack(&arch).unwrap();
        let got = forward(&arch, params.as_slice(), &[0.5]).unwrap();
        let want = reference_forward(&arch, &layers, &[0.5]);
        assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let arch = ArchSpec::new(vec![2, 1], Activation::Identity).unwrap();
        assert!(forward(&arch, &[0.0; 3], &[1.0]).is_err());
        assert!(forward(&arch, &[0.0; 2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nll_at_perfect_fit_is_normalizer_only() {
        let arch = ArchSpec::new(vec![1, 4, 1], Activation::Relu).unwrap();
        let data = Dataset::new(1, 1, vec![0.1, 0.7, -0.3], vec![0.0; 3]).unwrap();
        let (v, g) = nll_and_grad(&arch, &vec![0.0; arch.parameter_count()], &data, 1.0).unwrap();
        assert!((v - 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_neuron_hand_gradient() {
        // y = w x + b, data {(1, 2)}, w = b = 0: nll = 2 + ln(2 pi)/2, dnll/dw = -2.
        let arch = ArchSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let data = Dataset::new(1, 1, vec![1.0], vec![2.0]).unwrap();
        let (v, g) = nll_and_grad(&arch, &[0.0, 0.0], &data, 1.0).unwrap();
        assert!((v - (2.0 + 0.5 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((g[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_empty_data_and_bad_noise() {
        let arch = ArchSpec::new(vec![1, 1], Activation::Identity).unwrap();
        assert!(nll_and_grad(&arch, &[0.0, 0.0], &Dataset::empty(1, 1), 1.0).is_err());
        let data = Dataset::new(1, 1, vec![1.0], vec![2.0]).unwrap();
        assert!(nll_and_grad(&arch, &[0.0, 0.0], &data, 0.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, (sizes, act)) in [
            (vec![1, 40, 40, 1], Activation::Relu),
            (vec![3, 7, 2], Activation::Tanh),
            (vec![2, 5, 4, 3], Activation::Identity),
        ]
        .into_iter()
        .enumerate()
        {
            let arch = ArchSpec::new(sizes, act).unwrap();
            let params = random_params(&arch, 100 + i as u64, 0.6);
            let data = random_data(&arch, 6, 200 + i as u64);
            let (_, g) = nll_and_grad(&arch, &params, &data, 0.7).unwrap();
            let fd = finite_diff_grad(|p| nll(&arch, p, &data, 0.7).unwrap(), &params, 1e-5).unwrap();
            let err = max_relative_error(&g, &fd, 1e-6);
            assert!(err <= 1e-4, "{arch:?}: max rel err {err}");
        }
    }

    #[test]
    fn finite_diff_of_quadratic_is_exact() {
        let g = finite_diff_grad(|p| 0.5 * (p[0] * p[0] + p[1] * p[1]), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
        let c = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-3).unwrap();
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_reports_non_finite_values() {
        assert!(finite_diff_grad(|p| (p[0]).ln(), &[0.0], 1e-3).is_err());
        assert!(finite_diff_grad(|p| p[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn dataset_shape_validation() {
        assert!(Dataset::new(2, 1, vec![1.0, 2.0, 3.0], vec![1.0]).is_err());
        assert!(Dataset::new(1, 1, vec![1.0, 2.0], vec![1.0]).is_err());
        let a = Dataset::new(1, 1, vec![1.0], vec![2.0]).unwrap();
        let b = Dataset::new(1, 1, vec![3.0], vec![4.0]).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.target(1), &[4.0]);
    }
}
