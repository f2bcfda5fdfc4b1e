//! Parameterized layers on top of the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NormSets, StatUpdate, Var};
use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training mode uses batch statistics and records running-stat updates;
/// evaluation mode reads the running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel batch statistics with running averages for evaluation.
    Batch { momentum: f64 },
    /// Per-sample group statistics; identical in training and evaluation.
    Group { groups: usize },
    None,
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::Batch { momentum: 0.1 }
    }
}

/// Builds parameters with a per-name random stream, so a parameter's initial
/// value depends only on the seed and its name.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, kind: ParamKind, shape: [usize; 4], std: f64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng)));
        self.store.add(name, kind, t)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, shape: [usize; 4], v: f64) -> ParamId {
        self.store.add(name, kind, Tensor::full(shape, T::of(v)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, bias: bool) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = init.normal(&format!("{name}.weight"), ParamKind::Weight, [cout, cin, k, k], std);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), ParamKind::Bias, [1, cout, 1, 1], 0.0));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
}

impl Norm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, kind: NormKind) -> Self {
        let shape = [1, channels, 1, 1];
        let gamma = init.constant(&format!("{name}.gamma"), ParamKind::NormScale, shape, 1.0);
        let beta = init.constant(&format!("{name}.beta"), ParamKind::NormShift, shape, 0.0);
        let (running_mean, running_var) = match kind {
            NormKind::Batch { .. } => (
                Some(init.constant(&format!("{name}.running_mean"), ParamKind::RunningStat, shape, 0.0)),
                Some(init.constant(&format!("{name}.running_var"), ParamKind::RunningStat, shape, 1.0)),
            ),
            _ => (None, None),
        };
        Self { kind, gamma, beta, running_mean, running_var }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match (self.kind, mode) {
            (NormKind::None, _) => Ok(x),
            (NormKind::Group { groups }, _) => Ok(g.norm(x, gamma, beta, NormSets::PerGroup(groups))?.0),
            (NormKind::Batch { .. }, Mode::Train) => {
                let (y, mean, var) = g.norm(x, gamma, beta, NormSets::PerChannel)?;
                let (rm, rv) = (self.running_mean.expect("batch norm"), self.running_var.expect("batch norm"));
                g.record_stats(StatUpdate { running_mean: rm, running_var: rv, mean, var });
                Ok(y)
            }
            (NormKind::Batch { .. }, Mode::Eval) => {
                let mean = store.get(self.running_mean.expect("batch norm")).data().to_vec();
                let var = store.get(self.running_var.expect("batch norm")).data().to_vec();
                g.frozen_norm(x, gamma, beta, &mean, &var)
            }
        }
    }
}

/// Convolution, normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormRelu {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        norm: NormKind,
    ) -> Self {
        // the bias is redundant under a shift-carrying normalization
        let bias = matches!(norm, NormKind::None);
        let conv = Conv::new(init, &format!("{name}.conv"), cin, cout, k, geom, bias);
        let norm = Norm::new(init, &format!("{name}.norm"), cout, norm);
        Self { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Non-negative output nonlinearity of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rectifier {
    Relu,
    Softplus,
}

/// Initial output bias of a ReLU-rectified stack, so it is not dead at init.
pub const RELU_OUTPUT_BIAS: f64 = 1.0;

/// Convolutions with ReLU between them and an optional output rectifier.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
    pub output: Option<Rectifier>,
}

impl ConvStack {
    /// `widths[0]` is the input width; `kernels[i]` is the kernel size of layer `i`.
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        widths: &[usize],
        kernels: &[usize],
        output: Option<Rectifier>,
    ) -> Self {
        assert_eq!(widths.len(), kernels.len() + 1);
        let n = kernels.len();
        let out_bias = if output == Some(Rectifier::Relu) { RELU_OUTPUT_BIAS } else { 0.0 };
        let layers = (0..n)
            .map(|i| {
                let k = kernels[i];
                let geom = if k == 1 { ConvGeom::PLAIN } else { ConvGeom::same3(1) };
                let conv = Conv::new(init, &format!("{name}.{i}"), widths[i], widths[i + 1], k, geom, true);
                if i + 1 == n && out_bias != 0.0 {
                    let b = conv.bias.expect("bias");
                    init.store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::of(out_bias));
                }
                conv
            })
            .collect();
        Self { layers, output }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(g, store, y)?;
            y = match (i + 1 < self.layers.len(), self.output) {
                (true, _) | (false, Some(Rectifier::Relu)) => g.relu(y),
                (false, Some(Rectifier::Softplus)) => g.softplus(y),
                (false, None) => y,
            };
        }
        Ok(y)
    }
}

/// Affine map on pooled vectors, as a 1×1 convolution over `[n, c, 1, 1]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub conv: Conv,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, kinds: (ParamKind, ParamKind), std: f64) -> Self {
        let weight = init.normal(&format!("{name}.weight"), kinds.0, [cout, cin, 1, 1], std);
        let bias = init.constant(&format!("{name}.bias"), kinds.1, [1, cout, 1, 1], 0.0);
        Self { conv: Conv { weight, bias: Some(bias), geom: ConvGeom::PLAIN } }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.conv.forward(g, store, x)
    }
}
