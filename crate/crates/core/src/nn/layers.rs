use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// `act(x·W + b)` on tape variables.
pub fn linear_forward(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let y = tape.add_bias(xw, b)?;
    Ok(match act {
        Activation::None => y,
        Activation::Relu => tape.relu(y),
    })
}

/// Fully connected layer; weights are `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[in_dim, out_dim], bound))?;
        let b = store.add(format!("{name}.b"), uniform(rng, &[1, out_dim], bound))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        act: Activation,
    ) -> Result<Var> {
        if tape.cols(x) != self.in_dim {
            return Err(Error::dim(
                "linear",
                format!("input has {} features, layer expects {}", tape.cols(x), self.in_dim),
            ));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        linear_forward(tape, x, w, b, act)
    }
}

/// Feed-forward stack: ReLU on every hidden layer, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Returns the last hidden activation and the output.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let act = if i == last { Activation::None } else { Activation::Relu };
            h = layer.forward(tape, store, h, act)?;
        }
        Ok(h)
    }
}

/// LSTM cell with fused weights over `[x, h]`; gate order input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[in_dim + hidden, 4 * hidden], bound))?;
        let mut b = uniform(rng, &[1, 4 * hidden], bound);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), b)?;
        Ok(LstmCell { w, b, in_dim, hidden })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        if tape.cols(x) != self.in_dim {
            return Err(Error::dim(
                "lstm_step",
                format!("input has {} features, cell expects {}", tape.cols(x), self.in_dim),
            ));
        }
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        lstm_step(tape, x, h, c, w, b)
    }
}

/// One LSTM step on tape variables: `w` is `(in + H) × 4H`, `b` is `1 × 4H`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let hidden = tape.cols(h);
    if tape.cols(c) != hidden || tape.rows(c) != tape.rows(h) || tape.rows(x) != tape.rows(h) {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "x {}x{}, h {}x{}, c {}x{}",
                tape.rows(x),
                tape.cols(x),
                tape.rows(h),
                tape.cols(h),
                tape.rows(c),
                tape.cols(c)
            ),
        ));
    }
    if tape.cols(w) != 4 * hidden || tape.rows(w) != tape.cols(x) + hidden {
        return Err(Error::dim(
            "lstm_step",
            format!("weights {}x{} for input {} and hidden {}", tape.rows(w), tape.cols(w), tape.cols(x), hidden),
        ));
    }
    let xh = tape.concat_cols(&[x, h])?;
    let gates = linear_forward(tape, xh, w, b, Activation::None)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
