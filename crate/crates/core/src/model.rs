//! Fully connected ReLU classifiers used as guide and target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Which side of the guide/target pair a model plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Guide,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Guide => "guide",
            Role::Target => "target",
        }
    }
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of an MLP: input width first, class count last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, init_seed: u64) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation: Activation::Relu,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("a model needs at least an input and an output width"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer: `x · weight + bias`, weight stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of one model together with its spec and role.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    role: Role,
    layers: Vec<Layer>,
}

impl ModelState {
    /// He initialization: weights drawn from `N(0, 2 / fan_in)`, zero biases.
    pub fn init(spec: &ModelSpec, role: Role) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(spec.init_seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std_dev = libm::sqrt(2.0 / fan_in as f64);
                let normal = Normal::new(0.0, std_dev).expect("positive std dev");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Layer {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], data),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            role,
            layers,
        })
    }

    /// Assembles a state from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: ModelSpec, role: Role, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_widths.len() - 1 {
            return Err(Error::invalid(format!(
                "spec has {} layers, got {}",
                spec.layer_widths.len() - 1,
                layers.len()
            )));
        }
        for (layer, w) in layers.iter().zip(spec.layer_widths.windows(2)) {
            if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [w[1]] {
                return Err(Error::ShapeMismatch {
                    op: "from_layers",
                    left: layer.weight.shape().to_vec(),
                    right: w.to_vec(),
                });
            }
        }
        Ok(Self { spec, role, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Weights and biases in layer order: `w0, b0, w1, b1, …`.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records the parameters on `tape`, as gradient-tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let params = self
            .parameters()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundModel { params }
    }

    /// Logits for a `B×d` batch on a fresh tape, without gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let logits = bound.forward(&mut tape, input)?;
        Ok(tape.value(logits).clone())
    }
}

/// A model's parameters recorded on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    params: Vec<Var>,
}

impl BoundModel {
    /// Wraps parameter variables laid out as `w0, b0, w1, b1, …`.
    pub fn from_params(params: Vec<Var>) -> Result<Self> {
        if params.is_empty() || !params.len().is_multiple_of(2) {
            return Err(Error::invalid("parameters come in weight/bias pairs"));
        }
        Ok(Self { params })
    }

    /// Parameter variables in the order of [`ModelState::parameters`].
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// `B×d → B×K` logits: affine layers with ReLU between them and none
    /// after the last.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let input_dim = tape.value(self.params[0]).shape()[0];
        let xs = tape.try_value(x)?;
        if xs.rank() != 2 || xs.shape()[1] != input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: xs.shape().to_vec(),
                right: vec![input_dim],
            });
        }
        let n_layers = self.params.len() / 2;
        let mut h = x;
        for (i, pair) in self.params.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            h = tape.add(z, pair[1])?;
            if i + 1 < n_layers {
                // Activation::Relu is the only variant
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
