use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Tape handles of one LSTM layer. Gate columns are ordered input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `in x 4H`
    pub wx: Var,
    /// `H x 4H`
    pub wh: Var,
    /// `1 x 4H`
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmVars {
    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.value(self.wh).rows()
    }

    /// Input contribution `x Wx + b` for a block of rows.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.wx)?;
        tape.add_row(xw, self.b)
    }

    /// One step from raw input `x` (`B x in`).
    pub fn step(&self, tape: &mut Tape, state: LstmState, x: Var) -> Result<LstmState> {
        let proj = self.project_input(tape, x)?;
        self.step_projected(tape, state, proj)
    }

    /// One step from a precomputed input projection (`B x 4H`, bias included).
    pub fn step_projected(&self, tape: &mut Tape, state: LstmState, proj: Var) -> Result<LstmState> {
        let hidden = self.hidden(tape);
        let (b, cols) = tape.value(proj).shape();
        if cols != 4 * hidden || tape.value(state.h).shape() != (b, hidden) || tape.value(state.c).shape() != (b, hidden) {
            return Err(Error::Shape {
                op: "lstm_step",
                left: (b, cols),
                right: tape.value(state.h).shape(),
            });
        }
        let hw = tape.matmul(state.h, self.wh)?;
        let gates = tape.add(proj, hw)?;
        let i = tape.slice_cols(gates, 0, hidden)?;
        let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
        let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::standard_normal;
    use crate::tensor::Tensor;

    #[test]
    fn zero_weights_halve_the_cell() {
        let (hid, inp) = (3, 2);
        let mut tape = Tape::new();
        let lstm = LstmVars {
            wx: tape.constant(Tensor::zeros(inp, 4 * hid)),
            wh: tape.constant(Tensor::zeros(hid, 4 * hid)),
            b: tape.constant(Tensor::zeros(1, 4 * hid)),
        };
        let state = LstmState {
            h: tape.constant(Tensor::zeros(1, hid)),
            c: tape.constant(Tensor::full(1, hid, 1.0)),
        };
        let x = tape.constant(Tensor::full(1, inp, 0.7));
        let next = lstm.step(&mut tape, state, x).unwrap();
        for &c in tape.value(next.c).data() {
            assert_eq!(c, 0.5);
        }
        for &h in tape.value(next.h).data() {
            assert_eq!(h, 0.5 * libm::tanh(0.5));
        }

        let zero = LstmState {
            h: tape.constant(Tensor::zeros(1, hid)),
            c: tape.constant(Tensor::zeros(1, hid)),
        };
        let x0 = tape.constant(Tensor::zeros(1, inp));
        let next = lstm.step(&mut tape, zero, x0).unwrap();
        assert!(tape.value(next.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(next.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let mut tape = Tape::new();
        let lstm = LstmVars {
            wx: tape.constant(Tensor::zeros(2, 12)),
            wh: tape.constant(Tensor::zeros(3, 12)),
            b: tape.constant(Tensor::zeros(1, 12)),
        };
        let state = LstmState {
            h: tape.constant(Tensor::zeros(1, 4)),
            c: tape.constant(Tensor::zeros(1, 4)),
        };
        let x = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(lstm.step(&mut tape, state, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let (hid, inp) = (4, 3);
        let params = [
            standard_normal(inp, 4 * hid, 1),
            standard_normal(hid, 4 * hid, 2),
            standard_normal(1, 4 * hid, 3),
            standard_normal(2, hid, 4),
            standard_normal(2, hid, 5),
            standard_normal(2, inp, 6),
        ];
        let err = grad_check(
            |tape, p| {
                let lstm = LstmVars {
                    wx: p[0],
                    wh: p[1],
                    b: p[2],
                };
                let s = lstm.step(tape, LstmState { h: p[3], c: p[4] }, p[5])?;
                let sq = tape.mul(s.h, s.h)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
