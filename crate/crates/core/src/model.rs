//! Feed-forward networks with a fixed flattened parameter layout
//! `θ = [vec(W₁), …, vec(W_{L+1}), b₁, …, b_{L+1}]` (trainable blocks only).

use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::rng::{CounterRng, Stream};
use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut, Range};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative with the convention `ReLU'(0) = 1`.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Weights of one layer: trainable (stored in θ) or frozen (stored here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    Trainable,
    /// Column-major `out × in` entries.
    Frozen(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSpec {
    None,
    Trainable,
    Frozen(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub weights: WeightSpec,
    pub bias: BiasSpec,
}

/// Index ranges of the trainable blocks inside θ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    /// Per layer, `(rows, cols)` of the weight matrix.
    pub shapes: Vec<(usize, usize)>,
    pub weights: Vec<Option<Range<usize>>>,
    pub biases: Vec<Option<Range<usize>>>,
    pub len: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weight_range(&self, layer: usize) -> Option<Range<usize>> {
        self.weights.get(layer).cloned().flatten()
    }

    pub fn bias_range(&self, layer: usize) -> Option<Range<usize>> {
        self.biases.get(layer).cloned().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    layout: ParamLayout,
}

impl Architecture {
    /// `layers` runs from the first hidden layer to the scalar output layer.
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_dim == 0 {
            return Err(LabError::Config("input dimension must be positive".into()));
        }
        let last = layers
            .last()
            .ok_or_else(|| LabError::Config("architecture needs an output layer".into()))?;
        if last.width != 1 {
            return Err(LabError::Config("output layer must have width 1".into()));
        }
        if last.activation != Activation::Identity {
            return Err(LabError::Config("output activation must be identity".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut fan_in = input_dim;
        for (j, l) in layers.iter().enumerate() {
            if l.width == 0 {
                return Err(LabError::Config(format!("layer {} has zero width", j + 1)));
            }
            if let WeightSpec::Frozen(w) = &l.weights {
                if w.len() != l.width * fan_in {
                    return Err(LabError::Config(format!(
                        "frozen weights of layer {} have {} entries, expected {}",
                        j + 1,
                        w.len(),
                        l.width * fan_in
                    )));
                }
            }
            if let BiasSpec::Frozen(b) = &l.bias {
                if b.len() != l.width {
                    return Err(LabError::Config(format!(
                        "frozen bias of layer {} has wrong length",
                        j + 1
                    )));
                }
            }
            shapes.push((l.width, fan_in));
            fan_in = l.width;
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(layers.len());
        for (l, &(r, c)) in layers.iter().zip(&shapes) {
            weights.push(match l.weights {
                WeightSpec::Trainable => {
                    let range = offset..offset + r * c;
                    offset += r * c;
                    Some(range)
                }
                WeightSpec::Frozen(_) => None,
            });
        }
        let mut biases = Vec::with_capacity(layers.len());
        for l in &layers {
            biases.push(match l.bias {
                BiasSpec::Trainable => {
                    let range = offset..offset + l.width;
                    offset += l.width;
                    Some(range)
                }
                _ => None,
            });
        }
        Ok(Self {
            input_dim,
            layout: ParamLayout {
                shapes,
                weights,
                biases,
                len: offset,
            },
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Width `m_j` with `m_0 = d`.
    pub fn width(&self, j: usize) -> usize {
        if j == 0 {
            self.input_dim
        } else {
            self.layers[j - 1].width
        }
    }

    /// Fixed ±1 outer weights of a two-layer network with frozen output
    /// layer, if this is one.
    pub fn fixed_outer_weights(&self) -> Option<&[f64]> {
        match self.layers.as_slice() {
            [first, out]
                if first.activation == Activation::Relu
                    && first.bias == BiasSpec::None
                    && first.weights == WeightSpec::Trainable
                    && out.bias == BiasSpec::None =>
            {
                match &out.weights {
                    WeightSpec::Frozen(a) => Some(a),
                    WeightSpec::Trainable => None,
                }
            }
            _ => None,
        }
    }

    /// Resolves the weights and biases of every layer for a given θ.
    pub fn bind<'a>(&'a self, theta: &'a [f64]) -> Result<BoundNet<'a>> {
        if theta.len() != self.layout.len {
            return Err(LabError::Dimension(format!(
                "theta has length {}, layout expects {}",
                theta.len(),
                self.layout.len
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let (rows, cols) = self.layout.shapes[j];
                let w: &[f64] = match &l.weights {
                    WeightSpec::Trainable => &theta[self.layout.weights[j].clone().unwrap()],
                    WeightSpec::Frozen(w) => w,
                };
                let b: Option<&[f64]> = match &l.bias {
                    BiasSpec::None => None,
                    BiasSpec::Trainable => Some(&theta[self.layout.biases[j].clone().unwrap()]),
                    BiasSpec::Frozen(b) => Some(b),
                };
                BoundLayer {
                    rows,
                    cols,
                    w,
                    b,
                    activation: l.activation,
                }
            })
            .collect();
        Ok(BoundNet { arch: self, layers })
    }
}

#[derive(Debug, Clone)]
struct BoundLayer<'a> {
    rows: usize,
    cols: usize,
    /// column-major
    w: &'a [f64],
    b: Option<&'a [f64]>,
    activation: Activation,
}

/// An architecture with θ resolved, reusable across many inputs.
#[derive(Debug, Clone)]
pub struct BoundNet<'a> {
    arch: &'a Architecture,
    layers: Vec<BoundLayer<'a>>,
}

/// Per-thread buffers for forward/backward passes.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    /// pre-activations per layer
    pre: Vec<Vec<f64>>,
    /// post-activations per layer
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl<'a> BoundNet<'a> {
    fn run(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        let n = self.layers.len();
        scratch.pre.resize(n, Vec::new());
        scratch.post.resize(n, Vec::new());
        for (j, layer) in self.layers.iter().enumerate() {
            let (done, rest) = scratch.post.split_at_mut(j);
            let input: &[f64] = if j == 0 { x } else { &done[j - 1] };
            let pre = &mut scratch.pre[j];
            pre.clear();
            match layer.b {
                Some(b) => pre.extend_from_slice(b),
                None => pre.resize(layer.rows, 0.0),
            }
            for (c, &h) in input.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let col = &layer.w[c * layer.rows..(c + 1) * layer.rows];
                for (p, &wv) in pre.iter_mut().zip(col) {
                    *p += wv * h;
                }
            }
            let post = &mut rest[0];
            post.clear();
            post.extend(pre.iter().map(|&z| layer.activation.apply(z)));
        }
        scratch.post[n - 1][0]
    }

    pub fn forward(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(x.len(), self.arch.input_dim);
        self.run(x, scratch)
    }

    /// Adds `coef · ∂f/∂θ (x)` into `grad`; returns `f(x)`.
    pub fn accumulate_grad(
        &self,
        x: &[f64],
        coef: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let out = self.run(x, scratch);
        let layout = &self.arch.layout;
        let n = self.layers.len();
        scratch.delta.clear();
        scratch.delta.push(coef * self.layers[n - 1].activation.slope(scratch.pre[n - 1][0]));
        for j in (0..n).rev() {
            let layer = &self.layers[j];
            let input: &[f64] = if j == 0 { x } else { &scratch.post[j - 1] };
            if let Some(r) = &layout.weights[j] {
                let g = &mut grad[r.clone()];
                for (c, &h) in input.iter().enumerate() {
                    if h == 0.0 {
                        continue;
                    }
                    let gcol = &mut g[c * layer.rows..(c + 1) * layer.rows];
                    for (gv, &d) in gcol.iter_mut().zip(&scratch.delta) {
                        *gv += d * h;
                    }
                }
            }
            if let Some(r) = &layout.biases[j] {
                for (gv, &d) in grad[r.clone()].iter_mut().zip(&scratch.delta) {
                    *gv += d;
                }
            }
            if j == 0 {
                break;
            }
            let below = &self.layers[j - 1];
            scratch.next_delta.clear();
            for c in 0..layer.cols {
                let col = &layer.w[c * layer.rows..(c + 1) * layer.rows];
                let s: f64 = col.iter().zip(&scratch.delta).map(|(w, d)| w * d).sum();
                scratch
                    .next_delta
                    .push(s * below.activation.slope(scratch.pre[j - 1][c]));
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.next_delta);
        }
        out
    }

    /// Smallest |pre-activation| of any ReLU unit at `x`.
    pub fn min_relu_margin(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        self.run(x, scratch);
        let mut m = f64::INFINITY;
        for (j, layer) in self.layers.iter().enumerate() {
            if layer.activation == Activation::Relu {
                for z in &scratch.pre[j] {
                    m = m.min(z.abs());
                }
            }
        }
        m
    }
}

/// `f(θ; x)`.
pub fn forward(arch: &Architecture, theta: &[f64], x: &[f64]) -> Result<f64> {
    if x.len() != arch.input_dim {
        return Err(LabError::Dimension(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    Ok(arch.bind(theta)?.forward(x, &mut Scratch::default()))
}

/// `∂f/∂θ (θ; x)` over the trainable coordinates, with `ReLU'(0) = 1`.
pub fn grad_theta(arch: &Architecture, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != arch.input_dim {
        return Err(LabError::Dimension(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    let mut g = vec![0.0; arch.layout.len];
    arch.bind(theta)?
        .accumulate_grad(x, 1.0, &mut g, &mut Scratch::default());
    Ok(g)
}

/// Flattened parameters together with their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if theta.len() != layout.len {
            return Err(LabError::Dimension(format!(
                "theta has length {}, layout expects {}",
                theta.len(),
                layout.len
            )));
        }
        Ok(Self { theta, layout })
    }

    /// Weight block of `layer` as an `out × in` matrix, if trainable.
    pub fn weight_matrix(&self, layer: usize) -> Option<Matrix> {
        let r = self.layout.weight_range(layer)?;
        let (rows, cols) = self.layout.shapes[layer];
        crate::linalg::unvec(&self.theta[r], rows, cols).ok()
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.theta
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}

/// Initialization: i.i.d. `N(0, scale²/fan_in)` weights, zero biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, scale: 1.0 }
    }
}

pub fn init_params(arch: &Architecture, init: InitSpec) -> ParamVector {
    let rng = CounterRng::new(init.seed);
    let layout = arch.layout.clone();
    let mut theta = vec![0.0; layout.len];
    for (j, range) in layout.weights.iter().enumerate() {
        if let Some(r) = range {
            let fan_in = layout.shapes[j].1 as f64;
            let std = init.scale / fan_in.sqrt();
            let draws = rng.normals(Stream::Init, r.start as u64, r.len());
            for (t, z) in theta[r.clone()].iter_mut().zip(draws) {
                *t = std * z;
            }
        }
    }
    ParamVector { theta, layout }
}

/// `f(W; x) = aᵀ ReLU(W x)` with fixed `a ∈ {±1}^m`; only `W` is trained.
pub fn make_fixed_outer_two_layer(
    d: usize,
    m: usize,
    a: &[f64],
    seed: u64,
) -> Result<(Architecture, ParamVector)> {
    make_fixed_outer_two_layer_with(d, m, a, InitSpec::new(seed))
}

pub fn make_fixed_outer_two_layer_with(
    d: usize,
    m: usize,
    a: &[f64],
    init: InitSpec,
) -> Result<(Architecture, ParamVector)> {
    if a.len() != m {
        return Err(LabError::Config(format!(
            "outer weights have length {}, width is {m}",
            a.len()
        )));
    }
    if let Some(bad) = a.iter().find(|v| **v != 1.0 && **v != -1.0) {
        return Err(LabError::Config(format!("outer weight {bad} is not ±1")));
    }
    let arch = Architecture::new(
        d,
        vec![
            LayerSpec {
                width: m,
                activation: Activation::Relu,
                weights: WeightSpec::Trainable,
                bias: BiasSpec::None,
            },
            LayerSpec {
                width: 1,
                activation: Activation::Identity,
                // a 1×m matrix is the same in either storage order
                weights: WeightSpec::Frozen(a.to_vec()),
                bias: BiasSpec::None,
            },
        ],
    )?;
    let theta = init_params(&arch, init);
    Ok((arch, theta))
}

/// Rademacher outer weights for the fixed-outer family.
pub fn rademacher_outer(m: usize, seed: u64) -> Vec<f64> {
    let rng = CounterRng::new(seed);
    (0..m as u64).map(|k| rng.rademacher(Stream::Outer, k)).collect()
}

/// `f(θ; x) = θ₁ᵀ ReLU(reshape(θ₂) x + b)` with every block trainable.
pub fn make_full_two_layer(d: usize, m: usize, seed: u64) -> Result<(Architecture, ParamVector)> {
    make_full_two_layer_with(d, m, InitSpec::new(seed))
}

pub fn make_full_two_layer_with(
    d: usize,
    m: usize,
    init: InitSpec,
) -> Result<(Architecture, ParamVector)> {
    let arch = Architecture::new(
        d,
        vec![
            LayerSpec {
                width: m,
                activation: Activation::Relu,
                weights: WeightSpec::Trainable,
                bias: BiasSpec::Trainable,
            },
            LayerSpec {
                width: 1,
                activation: Activation::Identity,
                weights: WeightSpec::Trainable,
                bias: BiasSpec::None,
            },
        ],
    )?;
    let theta = init_params(&arch, init);
    Ok((arch, theta))
}

/// General ReLU multilayer perceptron with trainable weights and optional
/// trainable biases on every layer.
pub fn make_mlp(
    d: usize,
    hidden: &[usize],
    bias: bool,
    init: InitSpec,
) -> Result<(Architecture, ParamVector)> {
    let mut layers: Vec<LayerSpec> = hidden
        .iter()
        .map(|&w| LayerSpec {
            width: w,
            activation: Activation::Relu,
            weights: WeightSpec::Trainable,
            bias: if bias { BiasSpec::Trainable } else { BiasSpec::None },
        })
        .collect();
    layers.push(LayerSpec {
        width: 1,
        activation: Activation::Identity,
        weights: WeightSpec::Trainable,
        bias: if bias { BiasSpec::Trainable } else { BiasSpec::None },
    });
    let arch = Architecture::new(d, layers)?;
    let theta = init_params(&arch, init);
    Ok((arch, theta))
}
