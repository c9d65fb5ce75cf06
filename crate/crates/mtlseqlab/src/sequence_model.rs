//! The stacked bidirectional LSTM encoder and the two head types: greedy
//! per-token log-softmax classification and linear-chain CRF decoding.
//!
//! CRF transition parameters are stored as a finite `(|L|+2)²` matrix over
//! the label set plus virtual START/STOP states; the −∞ structural mask
//! (nothing enters START, nothing leaves STOP) is applied functionally, so
//! the stored parameters stay finite and the masked cells simply never enter
//! any path score or gradient.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::logsumexp;
use crate::numerics::{dropout_mask, Rng, Tensor};

/// One direction of one LSTM layer, as tape nodes. Weights are
/// `[(input_dim + hidden_dim) × hidden_dim]` over the concatenated
/// `[x_t ∘ h_{t-1}]`; biases are `[1 × hidden_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirVars {
    pub wi: Var,
    pub wf: Var,
    pub wo: Var,
    pub wg: Var,
    pub bi: Var,
    pub bf: Var,
    pub bo: Var,
    pub bg: Var,
}

/// One standard LSTM step:
/// `i,f,o = σ(affine), g = tanh(affine), c = f⊙c_prev + i⊙g, h = o⊙tanh(c)`.
pub fn lstm_step(
    tape: &Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmDirVars,
) -> Result<(Var, Var)> {
    let xh = tape.concat_cols(&[x, h_prev])?;
    let gate = |w: Var, b: Var| -> Result<Var> { tape.add(tape.matmul(xh, w)?, b) };
    let i = tape.sigmoid(gate(p.wi, p.bi)?);
    let f = tape.sigmoid(gate(p.wf, p.bf)?);
    let o = tape.sigmoid(gate(p.wo, p.bo)?);
    let g = tape.tanh(gate(p.wg, p.bg)?);
    let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
    let h = tape.mul(o, tape.tanh(c))?;
    Ok((h, c))
}

fn run_direction(
    tape: &Tape,
    inputs: &[Var],
    p: &LstmDirVars,
    reverse: bool,
) -> Result<Vec<Var>> {
    let hidden = tape.value(p.bi).cols();
    let mut h = tape.leaf(Tensor::zeros(&[1, hidden]));
    let mut c = tape.leaf(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let (nh, nc) = lstm_step(tape, inputs[t], h, c, p)?;
        h = nh;
        c = nc;
        out[t] = h;
    }
    Ok(out)
}

/// Stacked bidirectional encoder: each layer concatenates its forward and
/// backward hidden states per position and feeds the next layer. Dropout is
/// applied to the input of layer 1 and the output of layer k, training mode
/// only.
pub fn bilstm_encode(
    tape: &Tape,
    xs: &[Var],
    layers: &[(LstmDirVars, LstmDirVars)],
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("bilstm_encode"));
    }
    if layers.is_empty() {
        return Err(Error::EmptyInput("bilstm_encode: no layers"));
    }
    let apply_dropout = |tape: &Tape, vs: &[Var], rng: &mut Rng| -> Result<Vec<Var>> {
        if !training || dropout_rate == 0.0 {
            return Ok(vs.to_vec());
        }
        vs.iter()
            .map(|&v| {
                let shape = tape.value(v).shape().to_vec();
                let mask = dropout_mask(&shape, dropout_rate, rng)?;
                tape.mul_const(v, &mask)
            })
            .collect()
    };
    let mut current = apply_dropout(tape, xs, rng)?;
    for (fwd, bwd) in layers {
        let hf = run_direction(tape, &current, fwd, false)?;
        let hb = run_direction(tape, &current, bwd, true)?;
        current = hf
            .iter()
            .zip(&hb)
            .map(|(&f, &b)| tape.concat_cols(&[f, b]))
            .collect::<Result<Vec<Var>>>()?;
    }
    apply_dropout(tape, &current, rng)
}

/// Per-token log-probabilities of a greedy head:
/// `log_softmax(v·W + b)` row-wise over the stacked features `[n × d]`.
pub fn greedy_scores(tape: &Tape, features: Var, w: Var, b: Var) -> Result<Var> {
    tape.log_softmax_rows(tape.add(tape.matmul(features, w)?, b)?)
}

/// Row-wise argmax with lowest-index tie-breaking.
pub fn greedy_decode(logprobs: &Tensor) -> Vec<usize> {
    (0..logprobs.rows())
        .map(|r| {
            let row = logprobs.row_slice(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sum of negative gold log-probabilities over the sentence.
pub fn greedy_nll(tape: &Tape, logprobs: Var, gold: &[usize]) -> Result<Var> {
    let value = tape.value(logprobs);
    check_gold(gold, value.rows(), value.cols())?;
    let at: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
    Ok(tape.scale(tape.pick_sum(logprobs, &at), -1.0))
}

/// Index of the virtual START state for a label set of size `l`.
pub fn start_state(l: usize) -> usize {
    l
}

/// Index of the virtual STOP state for a label set of size `l`.
pub fn stop_state(l: usize) -> usize {
    l + 1
}

/// The conceptual transition matrix: stored values with −∞ written into the
/// structurally impossible cells (into START, out of STOP).
pub fn masked_transitions(trans: &Tensor, l: usize) -> Tensor {
    let n = l + 2;
    debug_assert_eq!(trans.shape(), &[n, n]);
    let mut out = trans.clone();
    for i in 0..n {
        out.data_mut()[i * n + start_state(l)] = f64::NEG_INFINITY;
        out.data_mut()[stop_state(l) * n + i] = f64::NEG_INFINITY;
    }
    out
}

fn check_crf_shapes(emissions: &Tensor, trans: &Tensor) -> Result<usize> {
    let l = emissions.cols();
    if emissions.shape().len() != 2 || trans.shape() != [l + 2, l + 2] {
        return Err(Error::ShapeMismatch {
            op: "crf",
            lhs: emissions.shape().to_vec(),
            rhs: trans.shape().to_vec(),
        });
    }
    Ok(l)
}

fn check_gold(gold: &[usize], n: usize, l: usize) -> Result<()> {
    if gold.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gold tag sequence",
            lhs: vec![n],
            rhs: vec![gold.len()],
        });
    }
    for &g in gold {
        if g >= l {
            return Err(Error::TagNotInSet {
                label: format!("id {g}"),
                task: format!("|L|={l} head"),
            });
        }
    }
    Ok(())
}

/// Forward algorithm in log space. Returns the alpha lattice `[n][l]` and
/// log Z. Only structurally legal transitions are ever read, so the stored
/// finite values at masked cells cannot leak in.
fn forward_alpha(emissions: &Tensor, trans: &Tensor, l: usize) -> (Vec<Vec<f64>>, f64) {
    let n = emissions.rows();
    let width = l + 2;
    let tr = |i: usize, j: usize| trans.data()[i * width + j];
    let mut alpha = vec![vec![0.0; l]; n];
    for j in 0..l {
        alpha[0][j] = tr(start_state(l), j) + emissions.at(0, j);
    }
    let mut scratch = vec![0.0; l];
    for t in 1..n {
        for j in 0..l {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = alpha[t - 1][i] + tr(i, j);
            }
            alpha[t][j] = logsumexp(&scratch) + emissions.at(t, j);
        }
    }
    let finals: Vec<f64> = (0..l)
        .map(|j| alpha[n - 1][j] + tr(j, stop_state(l)))
        .collect();
    let logz = logsumexp(&finals);
    (alpha, logz)
}

fn backward_beta(emissions: &Tensor, trans: &Tensor, l: usize) -> Vec<Vec<f64>> {
    let n = emissions.rows();
    let width = l + 2;
    let tr = |i: usize, j: usize| trans.data()[i * width + j];
    let mut beta = vec![vec![0.0; l]; n];
    for i in 0..l {
        beta[n - 1][i] = tr(i, stop_state(l));
    }
    let mut scratch = vec![0.0; l];
    for t in (0..n - 1).rev() {
        for i in 0..l {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = tr(i, j) + emissions.at(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = logsumexp(&scratch);
        }
    }
    beta
}

fn gold_score(emissions: &Tensor, trans: &Tensor, gold: &[usize], l: usize) -> f64 {
    let width = l + 2;
    let tr = |i: usize, j: usize| trans.data()[i * width + j];
    let mut score = tr(start_state(l), gold[0]);
    for (t, &g) in gold.iter().enumerate() {
        score += emissions.at(t, g);
        if t + 1 < gold.len() {
            score += tr(g, gold[t + 1]);
        }
    }
    score + tr(gold[gold.len() - 1], stop_state(l))
}

/// Negative log-likelihood of the gold path: `log Z − score(gold)`.
pub fn crf_nll(emissions: &Tensor, gold: &[usize], trans: &Tensor) -> Result<f64> {
    let l = check_crf_shapes(emissions, trans)?;
    check_gold(gold, emissions.rows(), l)?;
    let (_, logz) = forward_alpha(emissions, trans, l);
    Ok(logz - gold_score(emissions, trans, gold, l))
}

/// NLL plus its hand-derived gradients: for emissions, marginals minus the
/// gold one-hots; for transitions, expected minus observed transition counts
/// (START row and STOP column included; masked cells stay zero).
pub fn crf_nll_grad(
    emissions: &Tensor,
    gold: &[usize],
    trans: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    let l = check_crf_shapes(emissions, trans)?;
    let n = emissions.rows();
    check_gold(gold, n, l)?;
    let width = l + 2;
    let tr = |i: usize, j: usize| trans.data()[i * width + j];
    let (alpha, logz) = forward_alpha(emissions, trans, l);
    let beta = backward_beta(emissions, trans, l);
    let loss = logz - gold_score(emissions, trans, gold, l);

    let mut dem = Tensor::zeros(emissions.shape());
    for t in 0..n {
        for j in 0..l {
            let marginal = (alpha[t][j] + beta[t][j] - logz).exp();
            dem.data_mut()[t * l + j] = marginal - f64::from(gold[t] == j);
        }
    }

    let mut dtr = Tensor::zeros(trans.shape());
    {
        let d = dtr.data_mut();
        for j in 0..l {
            let marginal = (alpha[0][j] + beta[0][j] - logz).exp();
            d[start_state(l) * width + j] = marginal - f64::from(gold[0] == j);
        }
        for i in 0..l {
            let marginal = (alpha[n - 1][i] + beta[n - 1][i] - logz).exp();
            d[i * width + stop_state(l)] = marginal - f64::from(gold[n - 1] == i);
        }
        for t in 0..n.saturating_sub(1) {
            for i in 0..l {
                for j in 0..l {
                    let xi = (alpha[t][i] + tr(i, j) + emissions.at(t + 1, j) + beta[t + 1][j]
                        - logz)
                        .exp();
                    d[i * width + j] += xi;
                }
            }
            d[gold[t] * width + gold[t + 1]] -= 1.0;
        }
    }
    Ok((loss, dem, dtr))
}

/// [`crf_nll`] as a tape node with the hand-derived backward rule attached.
pub fn crf_nll_tape(tape: &Tape, emissions: Var, trans: Var, gold: &[usize]) -> Result<Var> {
    let em = tape.value(emissions);
    let tr = tape.value(trans);
    let (loss, dem, dtr) = crf_nll_grad(&em, gold, &tr)?;
    Ok(tape.custom(
        &[emissions, trans],
        Tensor::scalar(loss),
        move |g, _, _, sink| {
            let gv = g.data()[0];
            sink.with(0, |ge| {
                for (ge_i, d) in ge.iter_mut().zip(dem.data()) {
                    *ge_i += gv * d;
                }
            });
            sink.with(1, |gt| {
                for (gt_i, d) in gt.iter_mut().zip(dtr.data()) {
                    *gt_i += gv * d;
                }
            });
        },
    ))
}

/// Highest-scoring tag sequence and its score; ties break toward the lower
/// tag index at every step.
pub fn crf_viterbi(emissions: &Tensor, trans: &Tensor) -> Result<(Vec<usize>, f64)> {
    let l = check_crf_shapes(emissions, trans)?;
    let n = emissions.rows();
    let width = l + 2;
    let tr = |i: usize, j: usize| trans.data()[i * width + j];
    let mut score = vec![vec![0.0; l]; n];
    let mut back = vec![vec![0usize; l]; n];
    for j in 0..l {
        score[0][j] = tr(start_state(l), j) + emissions.at(0, j);
    }
    for t in 1..n {
        for j in 0..l {
            let mut best_i = 0;
            let mut best = score[t - 1][0] + tr(0, j);
            for i in 1..l {
                let s = score[t - 1][i] + tr(i, j);
                if s > best {
                    best = s;
                    best_i = i;
                }
            }
            score[t][j] = best + emissions.at(t, j);
            back[t][j] = best_i;
        }
    }
    let mut best_j = 0;
    let mut best = score[n - 1][0] + tr(0, stop_state(l));
    for j in 1..l {
        let s = score[n - 1][j] + tr(j, stop_state(l));
        if s > best {
            best = s;
            best_j = j;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = best_j;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, best))
}

/// Per-token log-marginals `log p(y_t = j | sentence)` via forward–backward.
/// Every row logsumexps to 0 (up to rounding).
pub fn crf_token_logprobs(emissions: &Tensor, trans: &Tensor) -> Result<Tensor> {
    let l = check_crf_shapes(emissions, trans)?;
    let n = emissions.rows();
    let (alpha, logz) = forward_alpha(emissions, trans, l);
    let beta = backward_beta(emissions, trans, l);
    let mut out = Tensor::zeros(&[n, l]);
    for t in 0..n {
        for j in 0..l {
            out.data_mut()[t * l + j] = alpha[t][j] + beta[t][j] - logz;
        }
    }
    Ok(out)
}
