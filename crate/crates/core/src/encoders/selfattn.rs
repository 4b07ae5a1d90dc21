//! Self-attentive bidirectional GRU encoder.
//!
//! Each utterance is encoded into an `n`-head matrix `M` whose columns are
//! attention-weighted sums of the bidirectional hidden states. For paired
//! training, [`second_order_attention`] scores corresponding head columns of
//! the two matrices against each other through a learned bilinear form and
//! softmax-normalizes those scores into a single shared head weighting; for
//! unpaired inference, [`head_average`] simply averages the heads.

use super::{fan_in_bound, EncoderConfig};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;

pub fn init(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut impl Rng) {
    for dir in ["fwd", "bwd"] {
        for gate in ["r", "z", "n"] {
            params.add_uniform(
                &format!("gru.{dir}.w_{gate}"),
                vec![cfg.hidden, cfg.emb_dim],
                fan_in_bound(cfg.emb_dim),
                rng,
            );
            params.add_uniform(
                &format!("gru.{dir}.u_{gate}"),
                vec![cfg.hidden, cfg.hidden],
                fan_in_bound(cfg.hidden),
                rng,
            );
            params.add_zeros(&format!("gru.{dir}.b_{gate}"), vec![cfg.hidden]);
        }
    }
    params.add_uniform(
        "attn.w1",
        vec![cfg.attn_dim, cfg.rep_dim],
        fan_in_bound(cfg.rep_dim),
        rng,
    );
    params.add_uniform(
        "attn.w2",
        vec![cfg.n_heads, cfg.attn_dim],
        fan_in_bound(cfg.attn_dim),
        rng,
    );
    params.add_uniform(
        "attn.second_order.w",
        vec![cfg.rep_dim, cfg.rep_dim],
        fan_in_bound(cfg.rep_dim),
        rng,
    );
}

struct GruDirIds {
    w: [TensorId; 3],
    u: [TensorId; 3],
    b: [TensorId; 3],
}

pub struct SelfAttnIds {
    pub emb: TensorId,
    fwd: GruDirIds,
    bwd: GruDirIds,
    pub attn_w1: TensorId,
    pub attn_w2: TensorId,
    pub second_order_w: TensorId,
}

impl SelfAttnIds {
    pub fn resolve(params: &ParamSet, bound: &BoundParams, _cfg: &EncoderConfig) -> Self {
        let dir = |d: &str| GruDirIds {
            w: ["r", "z", "n"].map(|g| bound.id(params, &format!("gru.{d}.w_{g}"))),
            u: ["r", "z", "n"].map(|g| bound.id(params, &format!("gru.{d}.u_{g}"))),
            b: ["r", "z", "n"].map(|g| bound.id(params, &format!("gru.{d}.b_{g}"))),
        };
        SelfAttnIds {
            emb: bound.id(params, "emb.table"),
            fwd: dir("fwd"),
            bwd: dir("bwd"),
            attn_w1: bound.id(params, "attn.w1"),
            attn_w2: bound.id(params, "attn.w2"),
            second_order_w: bound.id(params, "attn.second_order.w"),
        }
    }
}

fn gru_cell<'p>(
    tape: &mut Tape<'p>,
    ids: &GruDirIds,
    ones: TensorId,
    x: TensorId,
    h: TensorId,
) -> Result<TensorId, TensorError> {
    let gate = |tape: &mut Tape<'p>, g: usize, state: TensorId| -> Result<TensorId, TensorError> {
        let wx = tape.matvec(ids.w[g], x)?;
        let uh = tape.matvec(ids.u[g], state)?;
        let pre = tape.add(wx, uh)?;
        tape.add(pre, ids.b[g])
    };
    let reset = {
        let pre = gate(tape, 0, h)?;
        tape.sigmoid(pre)?
    };
    let update = {
        let pre = gate(tape, 1, h)?;
        tape.sigmoid(pre)?
    };
    let candidate = {
        let rh = tape.mul(reset, h)?;
        let pre = gate(tape, 2, rh)?;
        tape.tanh(pre)?
    };
    let keep = tape.mul(update, h)?;
    let one_minus_z = tape.affine(ones, update, 1.0, -1.0)?;
    let fresh = tape.mul(one_minus_z, candidate)?;
    tape.add(keep, fresh)
}

/// Encode one token sequence into the `[rep_dim, n_heads]` head matrix.
/// Attention is a softmax over the real timesteps only, so padding never
/// enters it.
pub fn encode_heads<'p>(
    tape: &mut Tape<'p>,
    ids: &SelfAttnIds,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<TensorId, TensorError> {
    if tokens.is_empty() {
        return Err(TensorError::BadShape {
            op: "encode_heads",
            shape: vec![0],
            reason: "empty token sequence",
        });
    }
    let t_len = tokens.len();
    let xs: Vec<TensorId> = tokens
        .iter()
        .map(|&t| {
            let row = tape.gather_rows(ids.emb, &[t as usize])?;
            tape.reshape(row, vec![cfg.emb_dim])
        })
        .collect::<Result<_, _>>()?;

    let ones = tape.constant(vec![1.0; cfg.hidden], vec![cfg.hidden]);
    let h0 = tape.constant(vec![0.0; cfg.hidden], vec![cfg.hidden]);

    let mut fwd = Vec::with_capacity(t_len);
    let mut h = h0;
    for &x in &xs {
        h = gru_cell(tape, &ids.fwd, ones, x, h)?;
        fwd.push(h);
    }
    let mut bwd = vec![h0; t_len];
    h = h0;
    for (t, &x) in xs.iter().enumerate().rev() {
        h = gru_cell(tape, &ids.bwd, ones, x, h)?;
        bwd[t] = h;
    }

    let states: Vec<TensorId> = (0..t_len)
        .map(|t| tape.concat0(&[fwd[t], bwd[t]]))
        .collect::<Result<_, _>>()?;
    let h_rows = tape.stack_rows(&states)?; // [T, rep_dim]
    let h_cols = tape.transpose(h_rows)?; // [rep_dim, T]

    let a1 = tape.matmul(ids.attn_w1, h_cols)?; // [attn_dim, T]
    let a1 = tape.tanh(a1)?;
    let logits = tape.matmul(ids.attn_w2, a1)?; // [n_heads, T]
    let attn = tape.softmax(logits, 1)?; // rows sum to 1 over time
    let attn_t = tape.transpose(attn)?; // [T, n_heads]
    tape.matmul(h_cols, attn_t) // [rep_dim, n_heads]
}

/// Paired head reweighting: score each pair of corresponding head columns
/// through the bilinear form, softmax the scores into a shared weighting
/// `s`, and project both head matrices through it.
pub fn second_order_attention<'p>(
    tape: &mut Tape<'p>,
    m_i: TensorId,
    m_j: TensorId,
    w: TensorId,
) -> Result<(TensorId, TensorId, TensorId), TensorError> {
    if tape.shape(m_i) != tape.shape(m_j) {
        return Err(TensorError::ShapeMismatch {
            op: "second_order_attention",
            lhs: tape.shape(m_i).to_vec(),
            rhs: tape.shape(m_j).to_vec(),
        });
    }
    let raw = tape.bilinear_diag(m_i, w, m_j)?;
    let scores = tape.tanh(raw)?;
    let s = tape.softmax(scores, 0)?;
    let r_i = tape.matvec(m_i, s)?;
    let r_j = tape.matvec(m_j, s)?;
    Ok((r_i, r_j, s))
}

/// Unpaired path: the representation is the mean of the head columns.
pub fn head_average<'p>(tape: &mut Tape<'p>, m: TensorId) -> Result<TensorId, TensorError> {
    tape.mean_axis(m, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            emb_dim: 3,
            rep_dim: 8,
            hidden: 4,
            n_heads: 2,
            attn_dim: 5,
            ..EncoderConfig::default()
        }
    }

    fn build(cfg: &EncoderConfig, vocab: usize, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, "init");
        params.add_uniform("emb.table", vec![vocab, cfg.emb_dim], 0.25, &mut rng);
        init(&mut params, cfg, &mut rng);
        params
    }

    fn heads_of(params: &ParamSet, cfg: &EncoderConfig, tokens: &[u32]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let ids = SelfAttnIds::resolve(params, &bound, cfg);
        let m = encode_heads(&mut tape, &ids, cfg, tokens).unwrap();
        tape.value(m).to_vec()
    }

    #[test]
    fn length_one_sequence_makes_every_head_the_single_state() {
        let cfg = tiny_cfg();
        let params = build(&cfg, 5, 11);
        let m = heads_of(&params, &cfg, &[3]);
        let (d, n) = (cfg.rep_dim, cfg.n_heads);
        for q in 0..d {
            for k in 1..n {
                assert!(
                    (m[q * n + k] - m[q * n]).abs() < 1e-12,
                    "head {k} differs from head 0 at coordinate {q}"
                );
            }
        }
    }

    #[test]
    fn equal_attention_logits_give_uniform_time_average() {
        // Zeroing the second attention projection makes every logit equal,
        // so each head becomes the uniform time-average of the states. A
        // one-head encoder built from the same draws (w2 is zeroed in both,
        // and it is the last projection before the unused bilinear form)
        // provides that average independently.
        let cfg = tiny_cfg();
        let mut params = build(&cfg, 5, 12);
        params.get_mut("attn.w2").values.iter_mut().for_each(|v| *v = 0.0);
        let single_cfg = EncoderConfig {
            n_heads: 1,
            ..tiny_cfg()
        };
        let mut single_params = build(&single_cfg, 5, 12);
        single_params
            .get_mut("attn.w2")
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);

        let tokens = [1u32, 4, 2];
        let m = heads_of(&params, &cfg, &tokens);
        let avg = heads_of(&single_params, &single_cfg, &tokens);
        let n = cfg.n_heads;
        for q in 0..cfg.rep_dim {
            for k in 0..n {
                assert!(
                    (m[q * n + k] - avg[q]).abs() < 1e-12,
                    "head {k} deviates from the uniform time average"
                );
            }
        }
    }

    #[test]
    fn head_columns_lie_in_the_convex_hull_of_states() {
        // With softmax weights, every head coordinate is bounded by the
        // per-coordinate min/max over time. Bound the range through tanh:
        // all states are in [-1, 1], so heads must be too.
        let cfg = tiny_cfg();
        let params = build(&cfg, 9, 13);
        let m = heads_of(&params, &cfg, &[0, 5, 8, 2, 2, 7]);
        assert!(m.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn second_order_matches_hand_computed_two_head_case() {
        // d=2, n=2, W=I, m_i1 = m_j1 = e1, m_i2 = e2 ⟂ m_j2 = e1:
        // scores = [tanh(1), 0], s ≈ [0.6816, 0.3184].
        let mut tape = Tape::new();
        let m_i = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let m_j = tape.leaf(vec![1.0, 1.0, 0.0, 0.0], vec![2, 2], false);
        let w = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let (r_i, _r_j, s) = second_order_attention(&mut tape, m_i, m_j, w).unwrap();
        let sv = tape.value(s);
        assert!((sv[0] - 0.6816).abs() < 1e-3, "s = {sv:?}");
        assert!((sv[1] - 0.3184).abs() < 1e-3);
        assert!((sv[0] + sv[1] - 1.0).abs() < 1e-12);
        // r_i = s0 * e1 + s1 * e2
        let ri = tape.value(r_i);
        assert!((ri[0] - sv[0]).abs() < 1e-12 && (ri[1] - sv[1]).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_give_uniform_weights_and_row_means() {
        // W = 0 makes every score 0, so s is uniform and r_i is the mean of
        // the head columns.
        let mut tape = Tape::new();
        let m_i = tape.leaf(vec![1.0, 3.0, 2.0, 4.0], vec![2, 2], false);
        let m_j = tape.leaf(vec![0.5, 0.25, 0.5, 0.25], vec![2, 2], false);
        let w = tape.leaf(vec![0.0; 4], vec![2, 2], false);
        let (r_i, _, s) = second_order_attention(&mut tape, m_i, m_j, w).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        assert_eq!(tape.value(r_i), &[2.0, 3.0]);
    }

    #[test]
    fn swapping_sides_with_transposed_form_preserves_weights() {
        let cfg = tiny_cfg();
        let params = build(&cfg, 6, 14);
        let tokens_a = [1u32, 2, 3];
        let tokens_b = [4u32, 5];
        let weights = |first: &[u32], second: &[u32], transpose_w: bool| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params);
            let ids = SelfAttnIds::resolve(&params, &bound, &cfg);
            let ma = encode_heads(&mut tape, &ids, &cfg, first).unwrap();
            let mb = encode_heads(&mut tape, &ids, &cfg, second).unwrap();
            let w = if transpose_w {
                tape.transpose(ids.second_order_w).unwrap()
            } else {
                ids.second_order_w
            };
            let (_, _, s) = second_order_attention(&mut tape, ma, mb, w).unwrap();
            tape.value(s).to_vec()
        };
        let s_ab = weights(&tokens_a, &tokens_b, false);
        let s_ba = weights(&tokens_b, &tokens_a, true);
        for (a, b) in s_ab.iter().zip(&s_ba) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_average_equals_second_order_with_forced_equal_scores() {
        let cfg = tiny_cfg();
        let params = build(&cfg, 6, 15);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let ids = SelfAttnIds::resolve(&params, &bound, &cfg);
        let m = encode_heads(&mut tape, &ids, &cfg, &[1, 2, 5]).unwrap();
        let avg = head_average(&mut tape, m).unwrap();
        let zero_w = tape.constant(vec![0.0; cfg.rep_dim * cfg.rep_dim], vec![cfg.rep_dim, cfg.rep_dim]);
        let (r_i, _, _) = second_order_attention(&mut tape, m, m, zero_w).unwrap();
        for (a, b) in tape.value(avg).iter().zip(tape.value(r_i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_head_counts_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 4], vec![2, 2], false);
        let b = tape.leaf(vec![0.0; 6], vec![2, 3], false);
        let w = tape.leaf(vec![0.0; 4], vec![2, 2], false);
        assert!(second_order_attention(&mut tape, a, b, w).is_err());
    }

    #[test]
    fn single_head_average_is_identity() {
        let mut tape = Tape::new();
        let m = tape.leaf(vec![1.5, -2.0, 0.25], vec![3, 1], false);
        let avg = head_average(&mut tape, m).unwrap();
        assert_eq!(tape.value(avg), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn outputs_are_finite_for_random_inputs() {
        let cfg = tiny_cfg();
        let params = build(&cfg, 12, 16);
        let m = heads_of(&params, &cfg, &[0, 11, 3, 7, 7, 1, 2]);
        assert!(m.iter().all(|v| v.is_finite()));
    }
}
