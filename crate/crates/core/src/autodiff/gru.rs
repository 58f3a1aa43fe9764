use super::{Tape, Var};
use crate::error::{Error, Result};

/// Weights of one GRU layer, generic over storage so the same layout can
/// hold parameter indices, tape handles or matrices.
///
/// Gates follow the original formulation:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `n = tanh(W_n x + U_n (r ⊙ h) + b_n)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    pub w_z: T,
    pub u_z: T,
    pub b_z: T,
    pub w_r: T,
    pub u_r: T,
    pub b_r: T,
    pub w_n: T,
    pub u_n: T,
    pub b_n: T,
}

impl<T> GruParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GruParams<U> {
        GruParams {
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            b_z: f(&self.b_z),
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            b_r: f(&self.b_r),
            w_n: f(&self.w_n),
            u_n: f(&self.u_n),
            b_n: f(&self.b_n),
        }
    }

    /// Fields paired with their names, in storage order.
    pub fn named(&self) -> [(&'static str, &T); 9] {
        [
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_n", &self.w_n),
            ("u_n", &self.u_n),
            ("b_n", &self.b_n),
        ]
    }
}

/// Shapes `(rows, cols)` of every GRU tensor for the given sizes.
pub fn gru_shapes(input: usize, hidden: usize) -> GruParams<(usize, usize)> {
    GruParams {
        w_z: (hidden, input),
        u_z: (hidden, hidden),
        b_z: (hidden, 1),
        w_r: (hidden, input),
        u_r: (hidden, hidden),
        b_r: (hidden, 1),
        w_n: (hidden, input),
        u_n: (hidden, hidden),
        b_n: (hidden, 1),
    }
}

fn gate(tape: &mut Tape, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, b)
}

/// One GRU step.
pub fn gru_cell(tape: &mut Tape, x: Var, h_prev: Var, p: &GruParams<Var>) -> Result<Var> {
    let (hidden, input) = tape.shape(p.w_z);
    if tape.shape(x) != (input, 1) || tape.shape(h_prev) != (hidden, 1) {
        let (xr, xc) = tape.shape(x);
        let (hr, hc) = tape.shape(h_prev);
        return Err(Error::Shape(format!(
            "gru_cell expects x {input}x1 and h {hidden}x1, got {xr}x{xc} and {hr}x{hc}"
        )));
    }
    let z_pre = gate(tape, p.w_z, x, p.u_z, h_prev, p.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, p.w_r, x, p.u_r, h_prev, p.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let n_pre = gate(tape, p.w_n, x, p.u_n, rh, p.b_n)?;
    let n = tape.tanh(n_pre);
    // h' = n + z ⊙ (h - n)
    let diff = tape.sub(h_prev, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Runs the GRU over the columns of `inputs` from `h0`, returning every
/// hidden state in order.
pub fn gru_sequence(tape: &mut Tape, inputs: &[Var], h0: Var, p: &GruParams<Var>) -> Result<Vec<Var>> {
    let mut h = h0;
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_cell(tape, x, h, p)?;
        states.push(h);
    }
    Ok(states)
}
