//! Small fully connected networks applied along the last tensor axis.

use crate::error::{Error, Result};
use crate::kernels::activation::{l2_normalize, relu, scaled_sigmoid_2, sigmoid, softplus};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Sigmoid,
    Softplus,
    L2Norm,
    ScaledSigmoid,
}

/// Layer widths including the input width, e.g. `[24, 32, 3]` is a two-layer
/// network. Hidden layers use ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], output: OutputActivation) -> Self {
        MlpSpec {
            widths: widths.to_vec(),
            output,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(
                "mlp",
                format!("need at least one layer of positive widths, got {:?}", self.widths),
            ));
        }
        Ok(())
    }
}

/// Dense layer `y = W x + b` with W stored out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        weight.expect_rank("linear", 2)?;
        if let Some(b) = &bias {
            b.expect_shape("linear", &[weight.dim(0)])?;
        }
        Ok(Linear { weight, bias })
    }

    pub fn load(store: &WeightStore, prefix: &str, inp: usize, out: usize, with_bias: bool) -> Result<Self> {
        let weight = store.get(&format!("{prefix}.weight"), &[out, inp])?.clone();
        let bias = if with_bias {
            Some(store.get(&format!("{prefix}.bias"), &[out])?.clone())
        } else {
            None
        };
        Linear::new(weight, bias)
    }

    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, inp: usize, out: usize, with_bias: bool) {
        let wname = format!("{prefix}.weight");
        store.insert(wname.clone(), rng.fan_in_uniform(&wname, &[out, inp], inp));
        if with_bias {
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_width(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward_row(&self, x: &[f32], y: &mut [f32]) {
        let (out, inp) = (self.out_width(), self.in_width());
        debug_assert_eq!(x.len(), inp);
        debug_assert_eq!(y.len(), out);
        let w = self.weight.data();
        for (o, dst) in y.iter_mut().enumerate() {
            let mut acc = self.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[o]));
            for (i, &xi) in x.iter().enumerate() {
                acc += f64::from(w[o * inp + i]) * f64::from(xi);
            }
            *dst = acc as f32;
        }
    }

    pub fn forward_row_vec(&self, x: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.out_width()];
        self.forward_row(x, &mut y);
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, layers: Vec<Linear>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers() {
            return Err(Error::shape("mlp", "layer count", spec.layers(), layers.len()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_width() != spec.widths[i] || l.out_width() != spec.widths[i + 1] {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} weight"),
                    format!("[{}, {}]", spec.widths[i + 1], spec.widths[i]),
                    format!("{:?}", l.weight.shape()),
                ));
            }
        }
        Ok(Mlp { spec, layers })
    }

    /// Reads `{prefix}.layer{i}.weight` / `.bias`.
    pub fn load(store: &WeightStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers())
            .map(|i| Linear::load(store, &format!("{prefix}.layer{i}"), spec.widths[i], spec.widths[i + 1], true))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(spec, layers)
    }

    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, spec: &MlpSpec) {
        for i in 0..spec.layers() {
            Linear::init(store, rng, &format!("{prefix}.layer{i}"), spec.widths[i], spec.widths[i + 1], true);
        }
    }

    /// Runs one input row through every layer, output activation included.
    pub fn forward_row(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.spec.input_width() {
            return Err(Error::shape("mlp_forward", "last axis", self.spec.input_width(), x.len()));
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.forward_row_vec(&cur);
            if i < last {
                next.iter_mut().for_each(|v| *v = relu(*v));
            }
            cur = next;
        }
        match self.spec.output {
            OutputActivation::None => {}
            OutputActivation::Sigmoid => cur.iter_mut().for_each(|v| *v = sigmoid(*v)),
            OutputActivation::Softplus => cur.iter_mut().for_each(|v| *v = softplus(*v)),
            OutputActivation::ScaledSigmoid => cur.iter_mut().for_each(|v| *v = scaled_sigmoid_2(*v)),
            OutputActivation::L2Norm => l2_normalize(&mut cur)?,
        }
        Ok(cur)
    }
}

/// Applies `mlp` to every row of a `...×Din` tensor.
pub fn mlp_forward(mlp: &Mlp, input: &Tensor) -> Result<Tensor> {
    let din = *input.shape().last().expect("rank >= 1");
    if din != mlp.spec.input_width() {
        return Err(Error::shape(
            "mlp_forward",
            format!("axis {}", input.rank() - 1),
            mlp.spec.input_width(),
            din,
        ));
    }
    let dout = mlp.spec.output_width();
    let rows = input.len() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for r in 0..rows {
        out.extend(mlp.forward_row(&input.data()[r * din..(r + 1) * din])?);
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Tensor::from_vec(&shape, out)
}
