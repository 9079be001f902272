//! Recurrent cell steps. Each cell consumes `[batch, in_dim]` input and the
//! previous `[batch, hidden]` state(s) and produces the next state.
//!
//! Gate weights are stored fused: one `[(in_dim + hidden), gates * hidden]`
//! matrix per cell (the GRU keeps its candidate weights separate because the
//! candidate sees the reset-gated state). Gate order: GRU `[z, r]` with
//! `h = (1 - z) (.) h_prev + z (.) candidate` (z is the write gate);
//! LSTM `[i, f, o, g]`.

use rand::Rng;

use crate::params::{glorot_uniform, ParamError, ParamSet};
use crate::tape::{AutogradError, Tape};
use crate::tensor::{Scalar, Tensor};

use super::{Architecture, Fwd, ParamsView};

type Result<T> = std::result::Result<T, AutogradError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn of(arch: Architecture) -> Option<CellKind> {
        match arch {
            Architecture::VanillaRnn => Some(CellKind::Rnn),
            Architecture::Gru => Some(CellKind::Gru),
            Architecture::Lstm => Some(CellKind::Lstm),
            Architecture::SelfAttention => None,
        }
    }
}

/// Hidden state of one cell; `cell` is present only for LSTMs.
#[derive(Clone)]
pub struct CellState<F: Scalar> {
    pub hidden: Tensor<F>,
    pub cell: Option<Tensor<F>>,
}

impl<F: Scalar> CellState<F> {
    pub(crate) fn zeros(kind: CellKind, batch: usize, hidden: usize) -> Self {
        CellState {
            hidden: Tensor::zeros(vec![batch, hidden]),
            cell: (kind == CellKind::Lstm).then(|| Tensor::zeros(vec![batch, hidden])),
        }
    }
}

/// `h = tanh(W @ [x; h_prev] + b)`.
pub fn rnn_cell_step<F: Scalar>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let xh = tape.concat(&[x, h_prev], 1)?;
    tape.tanh(&tape.bias_add(&tape.matmul(&xh, w)?, b)?)
}

/// Gated recurrent unit: `z, r = sigmoid(W_g @ [x; h])`,
/// `candidate = tanh(W_c @ [x; r (.) h])`,
/// `h = (1 - z) (.) h_prev + z (.) candidate`.
pub fn gru_cell_step<F: Scalar>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    w_gates: &Tensor<F>,
    b_gates: &Tensor<F>,
    w_cand: &Tensor<F>,
    b_cand: &Tensor<F>,
) -> Result<Tensor<F>> {
    let hidden = h_prev.last_dim();
    let xh = tape.concat(&[x, h_prev], 1)?;
    let gates = tape.sigmoid(&tape.bias_add(&tape.matmul(&xh, w_gates)?, b_gates)?)?;
    let z = tape.slice_last(&gates, 0, hidden)?;
    let r = tape.slice_last(&gates, hidden, hidden)?;
    let gated = tape.mul(&r, h_prev)?;
    let x_gated = tape.concat(&[x, &gated], 1)?;
    let candidate = tape.tanh(&tape.bias_add(&tape.matmul(&x_gated, w_cand)?, b_cand)?)?;
    let keep = tape.mul(&tape.one_minus(&z)?, h_prev)?;
    let write = tape.mul(&z, &candidate)?;
    tape.add(&keep, &write)
}

/// LSTM step with input/forget/output gates and candidate `g`:
/// `c = f (.) c_prev + i (.) g`, `h = o (.) tanh(c)`.
pub fn lstm_cell_step<F: Scalar>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let hidden = h_prev.last_dim();
    let xh = tape.concat(&[x, h_prev], 1)?;
    let all = tape.bias_add(&tape.matmul(&xh, w)?, b)?;
    let i = tape.sigmoid(&tape.slice_last(&all, 0, hidden)?)?;
    let f = tape.sigmoid(&tape.slice_last(&all, hidden, hidden)?)?;
    let o = tape.sigmoid(&tape.slice_last(&all, 2 * hidden, hidden)?)?;
    let g = tape.tanh(&tape.slice_last(&all, 3 * hidden, hidden)?)?;
    let c = tape.add(&tape.mul(&f, c_prev)?, &tape.mul(&i, &g)?)?;
    let h = tape.mul(&o, &tape.tanh(&c)?)?;
    Ok((h, c))
}

/// Declare the parameters of one cell under `prefix`.
pub(crate) fn declare_cell<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    kind: CellKind,
    in_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> std::result::Result<(), ParamError> {
    let cat = in_dim + hidden;
    match kind {
        CellKind::Rnn => {
            params.insert(format!("{prefix}.w"), glorot_uniform(cat, hidden, rng))?;
            params.insert(format!("{prefix}.b"), Tensor::zeros(vec![hidden]))?;
        }
        CellKind::Gru => {
            params.insert(format!("{prefix}.w_gates"), glorot_uniform(cat, 2 * hidden, rng))?;
            params.insert(format!("{prefix}.b_gates"), Tensor::zeros(vec![2 * hidden]))?;
            params.insert(format!("{prefix}.w_cand"), glorot_uniform(cat, hidden, rng))?;
            params.insert(format!("{prefix}.b_cand"), Tensor::zeros(vec![hidden]))?;
        }
        CellKind::Lstm => {
            params.insert(format!("{prefix}.w"), glorot_uniform(cat, 4 * hidden, rng))?;
            params.insert(format!("{prefix}.b"), Tensor::zeros(vec![4 * hidden]))?;
        }
    }
    Ok(())
}

/// Run one declared cell by prefix.
pub(crate) fn cell_step<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    prefix: &str,
    kind: CellKind,
    x: &Tensor<F>,
    state: &CellState<F>,
) -> Result<CellState<F>> {
    match kind {
        CellKind::Rnn => {
            let h = rnn_cell_step(
                fwd.tape,
                x,
                &state.hidden,
                p.get(&format!("{prefix}.w")),
                p.get(&format!("{prefix}.b")),
            )?;
            Ok(CellState { hidden: h, cell: None })
        }
        CellKind::Gru => {
            let h = gru_cell_step(
                fwd.tape,
                x,
                &state.hidden,
                p.get(&format!("{prefix}.w_gates")),
                p.get(&format!("{prefix}.b_gates")),
                p.get(&format!("{prefix}.w_cand")),
                p.get(&format!("{prefix}.b_cand")),
            )?;
            Ok(CellState { hidden: h, cell: None })
        }
        CellKind::Lstm => {
            let c_prev = state.cell.as_ref().expect("LSTM state carries a cell tensor");
            let (h, c) = lstm_cell_step(
                fwd.tape,
                x,
                &state.hidden,
                c_prev,
                p.get(&format!("{prefix}.w")),
                p.get(&format!("{prefix}.b")),
            )?;
            Ok(CellState { hidden: h, cell: Some(c) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rnn_zero_weights_give_zero_output() {
        let tape = Tape::new();
        let x = t(&[1, 3], &[0.7, -1.2, 9.0]);
        let h = t(&[1, 2], &[0.5, -0.5]);
        let w = Tensor::zeros(vec![5, 2]);
        let b = Tensor::zeros(vec![2]);
        let out = rnn_cell_step(&tape, &x, &h, &w, &b).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rnn_outputs_stay_inside_tanh_range() {
        let tape = Tape::new();
        let x = t(&[1, 2], &[3.0, -2.0]);
        let h = t(&[1, 2], &[1.5, 0.5]);
        let w = Tensor::full(vec![4, 2], 0.8);
        let b = Tensor::full(vec![2], 1.0);
        let out = rnn_cell_step(&tape, &x, &h, &w, &b).unwrap();
        assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn rnn_hand_case() {
        // h' = tanh(W [x; h] + b), 2-dim, computed with a scalar calculator:
        // x = [1, -1], h = [0.5], W rows (x1, x2, h): [[0.2], [0.4], [0.6]],
        // b = [0.1] -> pre = 0.2 - 0.4 + 0.3 + 0.1 = 0.2, h' = tanh(0.2)
        let tape = Tape::new();
        let x = t(&[1, 2], &[1.0, -1.0]);
        let h = t(&[1, 1], &[0.5]);
        let w = t(&[3, 1], &[0.2, 0.4, 0.6]);
        let b = t(&[1], &[0.1]);
        let out = rnn_cell_step(&tape, &x, &h, &w, &b).unwrap();
        assert!((out.data()[0] - 0.2f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn gru_write_gate_extremes() {
        let tape = Tape::new();
        let hidden = 3;
        let x = t(&[1, 2], &[0.3, -0.9]);
        let h = t(&[1, 3], &[0.2, -0.4, 0.8]);
        let w_gates = Tensor::zeros(vec![5, 2 * hidden]);
        let w_cand = Tensor::<f64>::from_vec(
            vec![5, 3],
            (0..15).map(|i| (i as f64) * 0.1 - 0.7).collect(),
        )
        .unwrap();
        let b_cand = Tensor::zeros(vec![3]);

        // z forced to 0: h' = h_prev regardless of x.
        let mut b = vec![0.0; 2 * hidden];
        for slot in b.iter_mut().take(hidden) {
            *slot = -1e9;
        }
        let b_gates = t(&[2 * hidden], &b);
        let out = gru_cell_step(&tape, &x, &h, &w_gates, &b_gates, &w_cand, &b_cand).unwrap();
        for (a, e) in out.data().iter().zip(h.data()) {
            assert!((a - e).abs() < 1e-12);
        }

        // z and r forced to 1: reduces to the vanilla tanh cell.
        let b_gates = Tensor::full(vec![2 * hidden], 1e9);
        let out = gru_cell_step(&tape, &x, &h, &w_gates, &b_gates, &w_cand, &b_cand).unwrap();
        let vanilla = rnn_cell_step(&tape, &x, &h, &w_cand, &b_cand).unwrap();
        for (a, e) in out.data().iter().zip(vanilla.data()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn gru_matches_independent_scalar_reference() {
        // Second implementation: plain scalar loops over the same weights.
        let tape = Tape::new();
        let (in_dim, hidden) = (3, 2);
        let mk = |seed: u64, n: usize| -> Vec<f64> {
            (0..n).map(|i| (((i as u64 + 1) * (seed + 3)) % 17) as f64 * 0.13 - 1.0).collect()
        };
        let x_v = mk(1, in_dim);
        let h_v = mk(2, hidden);
        let wg_v = mk(3, (in_dim + hidden) * 2 * hidden);
        let bg_v = mk(4, 2 * hidden);
        let wc_v = mk(5, (in_dim + hidden) * hidden);
        let bc_v = mk(6, hidden);

        let out = gru_cell_step(
            &tape,
            &t(&[1, in_dim], &x_v),
            &t(&[1, hidden], &h_v),
            &t(&[in_dim + hidden, 2 * hidden], &wg_v),
            &t(&[2 * hidden], &bg_v),
            &t(&[in_dim + hidden, hidden], &wc_v),
            &t(&[hidden], &bc_v),
        )
        .unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cat: Vec<f64> = x_v.iter().chain(&h_v).copied().collect();
        let mut z = vec![0.0; hidden];
        let mut r = vec![0.0; hidden];
        for j in 0..hidden {
            let mut zj = bg_v[j];
            let mut rj = bg_v[hidden + j];
            for (i, &c) in cat.iter().enumerate() {
                zj += c * wg_v[i * 2 * hidden + j];
                rj += c * wg_v[i * 2 * hidden + hidden + j];
            }
            z[j] = sigmoid(zj);
            r[j] = sigmoid(rj);
        }
        let gated: Vec<f64> = (0..hidden).map(|j| r[j] * h_v[j]).collect();
        let cat2: Vec<f64> = x_v.iter().chain(&gated).copied().collect();
        for j in 0..hidden {
            let mut cj = bc_v[j];
            for (i, &c) in cat2.iter().enumerate() {
                cj += c * wc_v[i * hidden + j];
            }
            let cand = cj.tanh();
            let expected = (1.0 - z[j]) * h_v[j] + z[j] * cand;
            assert!((out.data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_forced_gates() {
        let tape = Tape::new();
        let hidden = 2;
        let x = t(&[1, 2], &[0.4, -0.6]);
        let h = t(&[1, 2], &[0.1, 0.9]);
        let c = t(&[1, 2], &[-0.3, 0.7]);
        let w = Tensor::zeros(vec![4, 4 * hidden]);

        // forget = 1, input = 0: cell state is carried through untouched.
        let mut b = vec![0.0; 4 * hidden];
        for j in 0..hidden {
            b[j] = -1e9; // input gate -> 0
            b[hidden + j] = 1e9; // forget gate -> 1
        }
        let (_, c_next) = lstm_cell_step(&tape, &x, &h, &c, &w, &t(&[4 * hidden], &b)).unwrap();
        for (a, e) in c_next.data().iter().zip(c.data()) {
            assert!((a - e).abs() < 1e-12);
        }

        // All-zero weights and biases: gates at 0.5, candidate 0.
        let b0 = Tensor::zeros(vec![4 * hidden]);
        let (h_next, c_next) = lstm_cell_step(&tape, &x, &h, &c, &w, &b0).unwrap();
        for j in 0..hidden {
            let expect_c = 0.5 * c.data()[j];
            assert!((c_next.data()[j] - expect_c).abs() < 1e-12);
            assert!((h_next.data()[j] - 0.5 * expect_c.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_matches_independent_scalar_reference() {
        let tape = Tape::new();
        let (in_dim, hidden) = (2, 3);
        let mk = |seed: u64, n: usize| -> Vec<f64> {
            (0..n).map(|i| (((i as u64 + 2) * (seed + 5)) % 23) as f64 * 0.09 - 1.0).collect()
        };
        let x_v = mk(1, in_dim);
        let h_v = mk(2, hidden);
        let c_v = mk(3, hidden);
        let w_v = mk(4, (in_dim + hidden) * 4 * hidden);
        let b_v = mk(5, 4 * hidden);

        let (h_out, c_out) = lstm_cell_step(
            &tape,
            &t(&[1, in_dim], &x_v),
            &t(&[1, hidden], &h_v),
            &t(&[1, hidden], &c_v),
            &t(&[in_dim + hidden, 4 * hidden], &w_v),
            &t(&[4 * hidden], &b_v),
        )
        .unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cat: Vec<f64> = x_v.iter().chain(&h_v).copied().collect();
        for j in 0..hidden {
            let gate = |offset: usize| -> f64 {
                let mut acc = b_v[offset + j];
                for (i, &cv) in cat.iter().enumerate() {
                    acc += cv * w_v[i * 4 * hidden + offset + j];
                }
                acc
            };
            let i_g = sigmoid(gate(0));
            let f_g = sigmoid(gate(hidden));
            let o_g = sigmoid(gate(2 * hidden));
            let g = gate(3 * hidden).tanh();
            let c_new = f_g * c_v[j] + i_g * g;
            assert!((c_out.data()[j] - c_new).abs() < 1e-12);
            assert!((h_out.data()[j] - o_g * c_new.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let tape = Tape::new();
        let x = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let h = t(&[1, 2], &[0.0, 0.0]);
        let w = Tensor::<f64>::zeros(vec![4, 2]); // needs 5 rows
        let b = Tensor::zeros(vec![2]);
        assert!(rnn_cell_step(&tape, &x, &h, &w, &b).is_err());
    }
}
