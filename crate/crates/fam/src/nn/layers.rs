//! Feedforward stacks and the gated recurrent cell used by every network.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{orthogonal, GradSet, ParamSet, ParamVars};
use super::tape::{Tape, VarId};
use crate::error::{FamError, Result};

/// Hidden state of a recurrent cell, one row per batch element.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrentState {
    pub hidden: Array2<f64>,
    pub step: usize,
}

impl RecurrentState {
    /// Fresh all-zero state, as required at episode start.
    pub fn zeros(batch: usize, width: usize) -> Self {
        RecurrentState {
            hidden: Array2::zeros((batch, width)),
            step: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.hidden.ncols()
    }
}

fn affine_init<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    n_in: usize,
    n_out: usize,
    gain: f64,
    rng: &mut R,
) {
    params.insert(&format!("{prefix}.w"), orthogonal(n_in, n_out, gain, rng));
    params.insert(&format!("{prefix}.b"), Array2::zeros((1, n_out)));
}

fn affine(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: VarId) -> VarId {
    let w = vars.id(&format!("{prefix}.w"));
    let b = vars.id(&format!("{prefix}.b"));
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Fully connected stack: ReLU between layers, linear final layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    /// orthogonal gain of the output layer (0.01 for policy heads)
    pub out_gain: f64,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize], out_gain: f64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        Mlp {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
            out_gain,
        }
    }

    pub fn in_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) {
        let last = self.sizes.len() - 2;
        for (i, w) in self.sizes.windows(2).enumerate() {
            let gain = if i == last { self.out_gain } else { 2f64.sqrt() };
            affine_init(params, &format!("{}.l{i}", self.prefix), w[0], w[1], gain, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: VarId) -> VarId {
        let last = self.sizes.len() - 2;
        let mut h = x;
        for i in 0..=last {
            h = affine(tape, vars, &format!("{}.l{i}", self.prefix), h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Validating forward pass outside any training tape.
    pub fn apply(&self, params: &ParamSet, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_width() {
            return Err(FamError::Input(format!(
                "mlp {} expects width {}, got {}",
                self.prefix,
                self.in_width(),
                input.ncols()
            )));
        }
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &vars, x);
        let out = tape.value(y).clone();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(FamError::Numeric("non-finite mlp output".into()));
        }
        Ok(out)
    }
}

/// Gated recurrent cell with fused gate weights.
///
/// Gate equations (z is the keep gate):
///   z = sigmoid(x Wz + h Uz + bz)
///   r = sigmoid(x Wr + h Ur + br)
///   n = tanh(x Wn + r * (h Un) + bn)
///   h' = z * h + (1 - z) * n
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gru {
    pub prefix: String,
    pub n_in: usize,
    pub n_hidden: usize,
}

impl Gru {
    pub fn new(prefix: &str, n_in: usize, n_hidden: usize) -> Self {
        Gru {
            prefix: prefix.to_string(),
            n_in,
            n_hidden,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) {
        // fused [z | r | n] blocks
        params.insert(
            &format!("{}.wx", self.prefix),
            orthogonal(self.n_in, 3 * self.n_hidden, 1.0, rng),
        );
        params.insert(
            &format!("{}.wh", self.prefix),
            orthogonal(self.n_hidden, 3 * self.n_hidden, 1.0, rng),
        );
        params.insert(
            &format!("{}.b", self.prefix),
            Array2::zeros((1, 3 * self.n_hidden)),
        );
    }

    pub fn step(&self, tape: &mut Tape, vars: &ParamVars, x: VarId, h: VarId) -> VarId {
        let nh = self.n_hidden;
        let wx = vars.id(&format!("{}.wx", self.prefix));
        let wh = vars.id(&format!("{}.wh", self.prefix));
        let b = vars.id(&format!("{}.b", self.prefix));

        let gx = tape.matmul(x, wx);
        let gh = tape.matmul(h, wh);

        let zx = tape.slice_cols(gx, 0, nh);
        let zh = tape.slice_cols(gh, 0, nh);
        let zb = tape.slice_cols(b, 0, nh);
        let z_pre = tape.add(zx, zh);
        let z_pre = tape.add_row(z_pre, zb);
        let z = tape.sigmoid(z_pre);

        let rx = tape.slice_cols(gx, nh, 2 * nh);
        let rh = tape.slice_cols(gh, nh, 2 * nh);
        let rb = tape.slice_cols(b, nh, 2 * nh);
        let r_pre = tape.add(rx, rh);
        let r_pre = tape.add_row(r_pre, rb);
        let r = tape.sigmoid(r_pre);

        let cx = tape.slice_cols(gx, 2 * nh, 3 * nh);
        let ch = tape.slice_cols(gh, 2 * nh, 3 * nh);
        let cb = tape.slice_cols(b, 2 * nh, 3 * nh);
        let gated = tape.mul(r, ch);
        let n_pre = tape.add(cx, gated);
        let n_pre = tape.add_row(n_pre, cb);
        let n = tape.tanh(n_pre);

        let keep = tape.mul(z, h);
        let omz = tape.one_minus(z);
        let new = tape.mul(omz, n);
        tape.add(keep, new)
    }

    /// Validating single step outside any training tape.
    pub fn apply(&self, params: &ParamSet, state: &RecurrentState, input: &Array2<f64>) -> Result<RecurrentState> {
        if input.ncols() != self.n_in || state.width() != self.n_hidden {
            return Err(FamError::Input(format!(
                "gru {} expects input {} hidden {}, got {} and {}",
                self.prefix,
                self.n_in,
                self.n_hidden,
                input.ncols(),
                state.width()
            )));
        }
        if input.nrows() != state.hidden.nrows() {
            return Err(FamError::Input("batch size mismatch".into()));
        }
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let x = tape.constant(input.clone());
        let h = tape.constant(state.hidden.clone());
        let out = self.step(&mut tape, &vars, x, h);
        Ok(RecurrentState {
            hidden: tape.value(out).clone(),
            step: state.step + 1,
        })
    }
}

/// Reverse-mode gradients of a recorded scalar loss with respect to one
/// registered parameter set.
pub fn compute_gradients(tape: &Tape, loss: VarId, vars: &ParamVars) -> Result<GradSet> {
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(FamError::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss);
    Ok(vars.gradients(tape, &grads))
}
