use std::sync::Arc;

use rand::Rng;

use super::graph::{ConvGeom, Graph, Var};
use super::{Module, Parameter};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
    Sigmoid,
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::None => x,
    }
}

/// `act(x·W + b)` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
pub fn dense_layer(g: &mut Graph, x: Var, weight: &Parameter, bias: &Parameter, act: Activation) -> Result<Var> {
    let (_, i) = g.dims(x);
    let ws = weight.value().shape();
    if ws.len() != 2 || ws[0] != i {
        return Err(contract(format!(
            "dense layer {}: input width {i} does not match weight shape {ws:?}",
            weight.name()
        )));
    }
    if bias.value().len() != ws[1] {
        return Err(contract(format!(
            "dense layer {}: bias length {} vs output width {}",
            bias.name(),
            bias.value().len(),
            ws[1]
        )));
    }
    let w = g.param(weight);
    let b = g.param(bias);
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    Ok(activate(g, y, act))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), vec![input, output], input, rng),
            bias: Parameter::uniform(format!("{name}.bias"), vec![output], input, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
        dense_layer(g, x, &self.weight, &self.bias, act)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One input block of a factorized first layer: `input` multiplies weight
/// rows `rows`, and the product is row-gathered by `index` when present.
pub struct Block {
    pub input: Var,
    pub rows: std::ops::Range<usize>,
    pub index: Option<Vec<usize>>,
}

/// Pre-activation of `layer` on a row concatenation of blocks, without
/// materializing the concatenation.
pub fn first_layer(g: &mut Graph, layer: &Linear, blocks: Vec<Block>, n_out: usize) -> Result<Var> {
    let w = g.param(&layer.weight);
    let b = g.param(&layer.bias);
    let (w_rows, w_cols) = g.dims(w);
    let covered: usize = blocks.iter().map(|bl| bl.rows.len()).sum();
    let mut acc: Option<Var> = None;
    for bl in blocks {
        if bl.rows.end > w_rows || g.dims(bl.input).1 != bl.rows.len() {
            return Err(contract(format!(
                "{}: block of width {} at rows {:?} does not fit {w_rows} inputs",
                layer.weight.name(),
                g.dims(bl.input).1,
                bl.rows
            )));
        }
        let wb = g.gather_rows(w, bl.rows.collect());
        let mut part = g.matmul(bl.input, wb);
        if let Some(idx) = bl.index {
            part = g.gather_rows(part, idx);
        }
        if g.dims(part).0 != n_out {
            return Err(contract(format!("{}: block yields {} rows, expected {n_out}", layer.weight.name(), g.dims(part).0)));
        }
        acc = Some(match acc {
            Some(a) => g.add(a, part),
            None => part,
        });
    }
    if covered > w_rows {
        return Err(contract(format!("{}: blocks cover {covered} of {w_rows} rows", layer.weight.name())));
    }
    let acc = match acc {
        Some(a) => a,
        None => g.constant_matrix(n_out, w_cols, vec![0.0; n_out * w_cols]),
    };
    Ok(g.add_row(acc, b))
}

/// Stack of dense layers; ReLU between layers, `last` on the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub last: Activation,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(name: &str, widths: &[usize], last: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(&format!("{name}.{k}"), w[0], w[1], rng))
            .collect();
        Self { layers, last }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = if k + 1 == n { self.last } else { Activation::Relu };
            x = layer.forward(g, x, act)?;
        }
        Ok(x)
    }

    /// Multiplies the weights and bias of the output layer by `factor`.
    pub fn scale_output(&mut self, factor: f32) {
        if let Some(last) = self.layers.last_mut() {
            for p in last.params_mut() {
                p.value_mut().data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Sets every weight and bias to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params_mut() {
            p.value_mut().fill(0.0);
        }
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// 3x3 convolution with zero padding, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2, "only stride 1 and 2 are supported");
        let fan_in = 9 * cin;
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), vec![fan_in, cout], fan_in, rng),
            bias: Parameter::uniform(format!("{name}.bias"), vec![cout], fan_in, rng),
            stride,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value().shape()[0] / 9
    }

    pub fn cout(&self) -> usize {
        self.weight.value().shape()[1]
    }

    /// `x` is `[height*width, cin]`; returns the output and its spatial size.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        height: usize,
        width: usize,
        act: Activation,
    ) -> Result<(Var, usize, usize)> {
        if g.dims(x) != (height * width, self.cin()) {
            return Err(contract(format!(
                "conv {}: input {:?} is not {height}x{width}x{}",
                self.weight.name(),
                g.dims(x),
                self.cin()
            )));
        }
        let geom = ConvGeom {
            height,
            width,
            cin: self.cin(),
            cout: self.cout(),
            stride: self.stride,
        };
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, geom);
        let y = g.add_row(y, b);
        Ok((activate(g, y, act), geom.out_height(), geom.out_width()))
    }

    /// Stride-1 forward evaluated only at output rows `rows`. Other rows hold
    /// `act(bias)` and must not be read.
    pub fn forward_rows(
        &self,
        g: &mut Graph,
        x: Var,
        height: usize,
        width: usize,
        act: Activation,
        rows: Arc<Vec<usize>>,
    ) -> Result<Var> {
        if self.stride != 1 {
            return Err(contract(format!("conv {}: row-restricted forward needs stride 1", self.weight.name())));
        }
        if g.dims(x) != (height * width, self.cin()) {
            return Err(contract(format!(
                "conv {}: input {:?} is not {height}x{width}x{}",
                self.weight.name(),
                g.dims(x),
                self.cin()
            )));
        }
        let geom = ConvGeom {
            height,
            width,
            cin: self.cin(),
            cout: self.cout(),
            stride: 1,
        };
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d_rows(x, w, geom, rows);
        let y = g.add_row(y, b);
        Ok(activate(g, y, act))
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}
