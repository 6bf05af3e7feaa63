//! Gated recurrent cell shared by both decoder layers.

use rand::Rng;

use crate::error::Result;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Matrix;

pub const INIT_RANGE: f64 = 0.1;
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Gate weights: `w_*` act on the input (H x D_in), `u_*` on the previous
/// hidden state (H x H), `b_*` are column biases (H x 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmParams {
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_o: ParamId,
    pub w_c: ParamId,
    pub u_i: ParamId,
    pub u_f: ParamId,
    pub u_o: ParamId,
    pub u_c: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, range: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-range..=range))
}

/// Glorot-uniform: range `sqrt(6 / (rows + cols))`.
pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

impl LstmParams {
    /// Registers the twelve blocks in declaration order.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        input: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |name: &str, cols: usize, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), uniform(rng, hidden, cols, INIT_RANGE))
        };
        let w_i = w("w_i", input, rng);
        let w_f = w("w_f", input, rng);
        let w_o = w("w_o", input, rng);
        let w_c = w("w_c", input, rng);
        let u_i = w("u_i", hidden, rng);
        let u_f = w("u_f", hidden, rng);
        let u_o = w("u_o", hidden, rng);
        let u_c = w("u_c", hidden, rng);
        let mut b = |name: &str, v: f64| {
            let mut m = Matrix::zeros(hidden, 1);
            m.fill(v);
            store.add(format!("{prefix}.{name}"), m)
        };
        Self {
            w_i,
            w_f,
            w_o,
            w_c,
            u_i,
            u_f,
            u_o,
            u_c,
            b_i: b("b_i", 0.0),
            b_f: b("b_f", FORGET_BIAS_INIT),
            b_o: b("b_o", 0.0),
            b_c: b("b_c", 0.0),
        }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.get(self.w_i).rows()
    }

    pub fn input(&self, store: &ParamStore) -> usize {
        store.get(self.w_i).cols()
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.w_i, self.w_f, self.w_o, self.w_c, self.u_i, self.u_f, self.u_o, self.u_c,
            self.b_i, self.b_f, self.b_o, self.b_c,
        ]
    }
}

/// Memory cell `m` and hidden feature `h`, both H x 1 nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmState {
    pub m: NodeId,
    pub h: NodeId,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, hidden: usize) -> Self {
        Self {
            m: tape.leaf(Matrix::zeros(hidden, 1)),
            h: tape.leaf(Matrix::zeros(hidden, 1)),
        }
    }
}

fn gate(
    tape: &mut Tape<'_>,
    x: NodeId,
    h: NodeId,
    w: ParamId,
    u: ParamId,
    b: ParamId,
) -> Result<NodeId> {
    let (w, u, b) = (tape.param(w), tape.param(u), tape.param(b));
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, b)
}

/// One step: sigmoid gates i, f, o; tanh candidate g;
/// `m = f*m_prev + i*g`, `h = o*tanh(m)`.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    x: NodeId,
    prev: LstmState,
    p: &LstmParams,
) -> Result<LstmState> {
    let i = gate(tape, x, prev.h, p.w_i, p.u_i, p.b_i)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, x, prev.h, p.w_f, p.u_f, p.b_f)?;
    let f = tape.sigmoid(f);
    let o = gate(tape, x, prev.h, p.w_o, p.u_o, p.b_o)?;
    let o = tape.sigmoid(o);
    let g = gate(tape, x, prev.h, p.w_c, p.u_c, p.b_c)?;
    let g = tape.tanh(g);
    let carry = tape.mul(f, prev.m)?;
    let write = tape.mul(i, g)?;
    let m = tape.add(carry, write)?;
    let tm = tape.tanh(m);
    let h = tape.mul(o, tm)?;
    Ok(LstmState { m, h })
}

/// Plain-value wrapper around [`lstm_step`]; returns `(m, h)`.
pub fn lstm_step_values(
    store: &ParamStore,
    p: &LstmParams,
    x: &[f64],
    m_prev: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new(store);
    let x = tape.leaf(Matrix::column(x.to_vec()));
    let prev = LstmState {
        m: tape.leaf(Matrix::column(m_prev.to_vec())),
        h: tape.leaf(Matrix::column(h_prev.to_vec())),
    };
    let s = lstm_step(&mut tape, x, prev, p)?;
    Ok((
        tape.value(s.m).data().to_vec(),
        tape.value(s.h).data().to_vec(),
    ))
}
