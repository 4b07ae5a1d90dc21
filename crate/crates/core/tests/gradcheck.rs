//! Central-difference gradient checks for every graph operation and for the
//! full pairwise objective through both encoders.

use pairlearn::classifier::ClassifierConfig;
use pairlearn::data::EmbeddingTable;
use pairlearn::encoders::{EncoderConfig, EncoderKind};
use pairlearn::losses::{pair_batch_loss_mean, LossConfig, PairExample};
use pairlearn::model::Model;
use pairlearn::rng::stream;
use pairlearn::tensor::{grad_check, grad_check_params, Tape, TensorError, TensorId};
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed, "gradcheck");
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Draw in [-1, 1] but keep a margin away from zero, for ops with a kink or
/// a singularity at the origin.
fn uniform_off_zero(seed: u64, n: usize) -> Vec<f64> {
    uniform(seed, n, 0.15, 1.0)
        .into_iter()
        .zip(uniform(seed.wrapping_add(1), n, 0.0, 1.0))
        .map(|(v, coin)| if coin < 0.5 { -v } else { v })
        .collect()
}

/// Reduce any tensor to a scalar through a fixed weighted sum, so every
/// output coordinate influences the check.
fn weighted_sum(
    tape: &mut Tape,
    out: TensorId,
) -> Result<TensorId, TensorError> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, vec![n])?;
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.05 * i as f64).collect();
    let w = tape.constant(weights, vec![n]);
    let prod = tape.mul(flat, w)?;
    tape.sum(prod)
}

fn check_unary<F>(name: &str, x: Vec<f64>, shape: Vec<usize>, op: F)
where
    F: for<'p> Fn(&mut Tape<'p>, TensorId) -> Result<TensorId, TensorError>,
{
    let err = grad_check(
        |tape, x| {
            let y = op(tape, x)?;
            weighted_sum(tape, y)
        },
        &x,
        &shape,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{name}: grad check error {err} >= {TOL}");
}

fn check_binary<F>(name: &str, inputs: [(Vec<f64>, Vec<usize>); 2], op: F)
where
    F: for<'p> Fn(&mut Tape<'p>, TensorId, TensorId) -> Result<TensorId, TensorError>,
{
    let refs: Vec<(&[f64], &[usize])> = inputs
        .iter()
        .map(|(v, s)| (v.as_slice(), s.as_slice()))
        .collect();
    let report = grad_check_params(
        |tape, ids| {
            let y = op(tape, ids[0], ids[1])?;
            weighted_sum(tape, y)
        },
        &refs,
        STEP,
        None,
        0,
    )
    .unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name}: grad check error {} >= {TOL}",
        report.max_rel_err
    );
}

#[test]
fn matmul_gradients() {
    check_binary(
        "matmul",
        [
            (uniform(1, 6, -1.0, 1.0), vec![2, 3]),
            (uniform(2, 12, -1.0, 1.0), vec![3, 4]),
        ],
        |t, a, b| t.matmul(a, b),
    );
}

#[test]
fn matvec_gradients() {
    check_binary(
        "matvec",
        [
            (uniform(3, 12, -1.0, 1.0), vec![4, 3]),
            (uniform(4, 3, -1.0, 1.0), vec![3]),
        ],
        |t, m, v| t.matvec(m, v),
    );
}

#[test]
fn transpose_gradients() {
    check_unary("transpose", uniform(5, 6, -1.0, 1.0), vec![2, 3], |t, x| {
        t.transpose(x)
    });
}

#[test]
fn add_mul_affine_scale_gradients() {
    check_binary(
        "add",
        [
            (uniform(6, 5, -1.0, 1.0), vec![5]),
            (uniform(7, 5, -1.0, 1.0), vec![5]),
        ],
        |t, a, b| t.add(a, b),
    );
    check_binary(
        "mul",
        [
            (uniform(8, 5, -1.0, 1.0), vec![5]),
            (uniform(9, 5, -1.0, 1.0), vec![5]),
        ],
        |t, a, b| t.mul(a, b),
    );
    check_binary(
        "affine",
        [
            (uniform(10, 5, -1.0, 1.0), vec![5]),
            (uniform(11, 5, -1.0, 1.0), vec![5]),
        ],
        |t, a, b| t.affine(a, b, 0.37, 0.63),
    );
    check_unary("scale", uniform(12, 5, -1.0, 1.0), vec![5], |t, x| {
        t.scale(x, -1.7)
    });
}

#[test]
fn activation_gradients() {
    check_unary("tanh", uniform(13, 6, -1.0, 1.0), vec![6], |t, x| t.tanh(x));
    check_unary("sigmoid", uniform(14, 6, -1.0, 1.0), vec![6], |t, x| {
        t.sigmoid(x)
    });
    check_unary("relu", uniform_off_zero(15, 6), vec![6], |t, x| t.relu(x));
}

#[test]
fn sqrt_and_log_gradients() {
    check_unary("sqrt", uniform(16, 5, 0.2, 1.0), vec![5], |t, x| t.sqrt(x));
    check_unary("log", uniform(17, 5, 0.2, 1.0), vec![5], |t, x| t.log(x));
}

#[test]
fn softmax_gradients_over_all_axes() {
    check_unary("softmax-1d", uniform(18, 5, -1.0, 1.0), vec![5], |t, x| {
        t.softmax(x, 0)
    });
    check_unary(
        "softmax-rows",
        uniform(19, 6, -1.0, 1.0),
        vec![2, 3],
        |t, x| t.softmax(x, 1),
    );
    check_unary(
        "softmax-cols",
        uniform(20, 6, -1.0, 1.0),
        vec![2, 3],
        |t, x| t.softmax(x, 0),
    );
    check_unary("log-softmax", uniform(21, 5, -1.0, 1.0), vec![5], |t, x| {
        t.log_softmax(x)
    });
}

#[test]
fn concat_stack_reshape_gradients() {
    check_binary(
        "concat0",
        [
            (uniform(22, 3, -1.0, 1.0), vec![3]),
            (uniform(23, 4, -1.0, 1.0), vec![4]),
        ],
        |t, a, b| t.concat0(&[a, b]),
    );
    check_binary(
        "stack_rows",
        [
            (uniform(24, 4, -1.0, 1.0), vec![4]),
            (uniform(25, 4, -1.0, 1.0), vec![4]),
        ],
        |t, a, b| t.stack_rows(&[a, b]),
    );
    check_unary("reshape", uniform(26, 6, -1.0, 1.0), vec![2, 3], |t, x| {
        t.reshape(x, vec![6])
    });
}

#[test]
fn conv_and_pooling_gradients() {
    check_binary(
        "conv1d",
        [
            (uniform(27, 15, -1.0, 1.0), vec![5, 3]), // sequence [T=5, d=3]
            (uniform(28, 12, -1.0, 1.0), vec![2, 2, 3]), // filters [F=2, w=2, d=3]
        ],
        |t, x, f| t.conv1d(x, f),
    );
    check_binary(
        "add_bias_rows",
        [
            (uniform(29, 8, -1.0, 1.0), vec![4, 2]),
            (uniform(30, 2, -1.0, 1.0), vec![2]),
        ],
        |t, x, b| t.add_bias_rows(x, b),
    );
    // distinct values keep the argmax stable under the probe step
    check_unary(
        "max_over_time",
        vec![0.9, -0.4, 0.1, 0.5, -0.8, 0.3, -0.2, 0.7],
        vec![4, 2],
        |t, x| t.max_over_time(x),
    );
}

#[test]
fn reduction_gradients() {
    check_unary("sum", uniform(31, 6, -1.0, 1.0), vec![6], |t, x| t.sum(x));
    check_unary(
        "mean-axis0",
        uniform(32, 6, -1.0, 1.0),
        vec![2, 3],
        |t, x| t.mean_axis(x, 0),
    );
    check_unary(
        "mean-axis1",
        uniform(33, 6, -1.0, 1.0),
        vec![2, 3],
        |t, x| t.mean_axis(x, 1),
    );
    check_unary("mean-1d", uniform(34, 5, -1.0, 1.0), vec![5], |t, x| {
        t.mean_axis(x, 0)
    });
}

#[test]
fn normalize_and_distance_gradients() {
    check_unary(
        "l2_normalize",
        uniform_off_zero(35, 5),
        vec![5],
        |t, x| t.l2_normalize(x),
    );
    check_binary(
        "sq_dist",
        [
            (uniform(36, 5, -1.0, 1.0), vec![5]),
            (uniform(37, 5, -1.0, 1.0), vec![5]),
        ],
        |t, a, b| t.sq_dist(a, b),
    );
}

#[test]
fn bilinear_diag_gradients() {
    let mi = (uniform(38, 8, -1.0, 1.0), vec![4usize, 2]);
    let w = (uniform(39, 16, -1.0, 1.0), vec![4usize, 4]);
    let mj = (uniform(40, 8, -1.0, 1.0), vec![4usize, 2]);
    let refs: Vec<(&[f64], &[usize])> = [&mi, &w, &mj]
        .iter()
        .map(|(v, s)| (v.as_slice(), s.as_slice()))
        .collect();
    let report = grad_check_params(
        |tape, ids| {
            let y = tape.bilinear_diag(ids[0], ids[1], ids[2])?;
            weighted_sum(tape, y)
        },
        &refs,
        STEP,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < TOL, "bilinear_diag: {}", report.max_rel_err);
}

#[test]
fn gather_rows_gradients() {
    check_unary(
        "gather_rows",
        uniform(41, 8, -1.0, 1.0),
        vec![4, 2],
        |t, table| t.gather_rows(table, &[3, 1, 1, 0]),
    );
}

#[test]
fn softmax_of_constant_composite_has_zero_gradient() {
    // softmax feeding a plain sum is constant 1; the analytic gradient is
    // exactly zero and so is the central difference.
    let x = uniform(42, 6, -1.0, 1.0);
    let err = grad_check(
        |tape, x| {
            let s = tape.softmax(x, 0)?;
            tape.sum(s)
        },
        &x,
        &[6],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "constant softmax composite err = {err}");
}

// ── Full objective through each encoder ─────────────────────────────────

fn micro_model(kind: EncoderKind, seed: u64) -> Model {
    let enc_cfg = EncoderConfig {
        emb_dim: 5,
        filter_widths: vec![1, 2, 3],
        filters_per_width: 3,
        rep_dim: 8,
        hidden: 4,
        n_heads: 3,
        attn_dim: 3,
    };
    let cls_cfg = ClassifierConfig {
        hidden1: 6,
        hidden2: 4,
    };
    let emb = EmbeddingTable::seeded_random(7, enc_cfg.emb_dim, seed);
    let mut model = Model::new(kind, enc_cfg, cls_cfg, &emb, 3, seed);
    // Derivatives are verified at a generic parameter point. The fan-in
    // init is a degenerate one here: its near-uniform attention makes the
    // heads almost identical, which collapses the gradient through the
    // shared head weighting to noise level. The bilinear matrix itself
    // stays small so the head-similarity scores sit in tanh's active range
    // instead of its saturated tail.
    let mut rng = stream(seed, "gradcheck-point");
    for p in model.params.iter_mut() {
        let bound = if p.name == "attn.second_order.w" {
            0.05
        } else {
            0.8
        };
        for v in p.values.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    model
}

fn check_pair_loss_through(kind: EncoderKind, seed: u64) {
    let model = micro_model(kind, seed);
    let cfg = LossConfig {
        beta: 0.5,
        ..LossConfig::default()
    };
    let tokens: [Vec<u32>; 12] = [
        vec![1, 2, 3],
        vec![4, 5],
        vec![2, 6, 0, 3],
        vec![5],
        vec![0, 1],
        vec![3, 3, 6],
        vec![6, 4, 1, 2],
        vec![2, 5, 0],
        vec![4, 0, 6],
        vec![1, 5, 5],
        vec![3, 0],
        vec![6, 2, 4, 1],
    ];
    let labels = [(0usize, 0usize), (1, 2), (2, 2), (0, 1), (1, 1), (2, 0)];
    let lambdas = [0.7, 0.35, 0.55, 0.8, 0.25, 0.6];
    let examples: Vec<PairExample> = (0..6)
        .map(|k| PairExample {
            tokens_i: &tokens[2 * k],
            tokens_j: &tokens[2 * k + 1],
            y_i: labels[k].0,
            y_j: labels[k].1,
            lambda: lambdas[k],
        })
        .collect();
    let inputs: Vec<(&[f64], &[usize])> = model
        .params
        .iter()
        .map(|p| (p.values.as_slice(), p.shape.as_slice()))
        .collect();
    let report = grad_check_params(
        |tape, leaves| {
            let ids = pairlearn::model::ModelIds::from_leaves(&model, leaves);
            pair_batch_loss_mean(tape, &model, &ids, &examples, &cfg)
        },
        &inputs,
        STEP,
        None,
        seed,
    )
    .unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{kind:?} pair loss grad check error {} over {} coords",
        report.max_rel_err,
        report.coords_checked
    );
}

#[test]
fn pair_objective_through_textcnn_matches_finite_differences() {
    check_pair_loss_through(EncoderKind::TextCnn, 50);
}

#[test]
fn pair_objective_through_selfattn_matches_finite_differences() {
    check_pair_loss_through(EncoderKind::SelfAttn, 51);
}
