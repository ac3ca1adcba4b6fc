use rand::Rng;

use super::init_tensor;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Gated recurrent unit with the gate layout `[reset | update | candidate]`.
#[derive(Clone, Debug)]
pub(crate) struct GruCell {
    pub hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, init: f64, rng: &mut R) -> Self {
        let g = 3 * hidden;
        GruCell {
            hidden,
            w_ih: store.add(format!("{prefix}.w_ih"), init_tensor(&[input, g], init, rng)),
            w_hh: store.add(format!("{prefix}.w_hh"), init_tensor(&[hidden, g], init, rng)),
            b_ih: store.add(format!("{prefix}.b_ih"), init_tensor(&[g], init, rng)),
            b_hh: store.add(format!("{prefix}.b_hh"), init_tensor(&[g], init, rng)),
        }
    }

    /// Input-side gate pre-activations `x·W_ih + b_ih` for every row of `x`.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w_ih);
        let b = tape.param(store, self.b_ih);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    /// One recurrence given the projected input row `gi` (`[1, 3H]`).
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, gi: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let w = tape.param(store, self.w_hh);
        let b = tape.param(store, self.b_hh);
        let hw = tape.matmul(h, w)?;
        let gh = tape.add(hw, b)?;

        let i_r = tape.slice_cols(gi, 0, hd)?;
        let h_r = tape.slice_cols(gh, 0, hd)?;
        let r_pre = tape.add(i_r, h_r)?;
        let r = tape.sigmoid(r_pre)?;

        let i_z = tape.slice_cols(gi, hd, hd)?;
        let h_z = tape.slice_cols(gh, hd, hd)?;
        let z_pre = tape.add(i_z, h_z)?;
        let z = tape.sigmoid(z_pre)?;

        let i_n = tape.slice_cols(gi, 2 * hd, hd)?;
        let h_n = tape.slice_cols(gh, 2 * hd, hd)?;
        let gated = tape.mul(r, h_n)?;
        let n_pre = tape.add(i_n, gated)?;
        let n = tape.tanh(n_pre)?;

        // h' = (1 - z)∘n + z∘h = n + z∘(h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
