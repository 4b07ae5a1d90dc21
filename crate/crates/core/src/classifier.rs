//! Three-layer fully connected classifier head producing pre-softmax class
//! scores from a (possibly interpolated) representation.

use crate::encoders::fan_in_bound;
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hidden widths of the tapered head; the output width is the class count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden1: 600,
            hidden2: 300,
        }
    }
}

pub fn init(
    params: &mut ParamSet,
    cfg: &ClassifierConfig,
    rep_dim: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) {
    params.add_uniform(
        "cls.l1.weight",
        vec![cfg.hidden1, rep_dim],
        fan_in_bound(rep_dim),
        rng,
    );
    params.add_zeros("cls.l1.bias", vec![cfg.hidden1]);
    params.add_uniform(
        "cls.l2.weight",
        vec![cfg.hidden2, cfg.hidden1],
        fan_in_bound(cfg.hidden1),
        rng,
    );
    params.add_zeros("cls.l2.bias", vec![cfg.hidden2]);
    params.add_uniform(
        "cls.l3.weight",
        vec![num_classes, cfg.hidden2],
        fan_in_bound(cfg.hidden2),
        rng,
    );
    params.add_zeros("cls.l3.bias", vec![num_classes]);
}

pub struct ClassifierIds {
    pub w: [TensorId; 3],
    pub b: [TensorId; 3],
}

impl ClassifierIds {
    pub fn resolve(params: &ParamSet, bound: &BoundParams) -> Self {
        ClassifierIds {
            w: [1, 2, 3].map(|l| bound.id(params, &format!("cls.l{l}.weight"))),
            b: [1, 2, 3].map(|l| bound.id(params, &format!("cls.l{l}.bias"))),
        }
    }
}

/// `tanh(W2 tanh(W1 r + b1) + b2) W3ᵀ + b3`; the output layer has no
/// activation so scores stay unbounded pre-softmax.
pub fn classify<'p>(
    tape: &mut Tape<'p>,
    ids: &ClassifierIds,
    rep: TensorId,
) -> Result<TensorId, TensorError> {
    let mut h = rep;
    for layer in 0..2 {
        let z = tape.matvec(ids.w[layer], h)?;
        let z = tape.add(z, ids.b[layer])?;
        h = tape.tanh(z)?;
    }
    let z = tape.matvec(ids.w[2], h)?;
    tape.add(z, ids.b[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::grad_check_params;

    fn tiny() -> (ParamSet, ClassifierConfig, usize, usize) {
        let cfg = ClassifierConfig {
            hidden1: 4,
            hidden2: 3,
        };
        let (rep_dim, classes) = (5usize, 2usize);
        let mut params = ParamSet::new();
        init(&mut params, &cfg, rep_dim, classes, &mut stream(21, "init"));
        (params, cfg, rep_dim, classes)
    }

    #[test]
    fn zero_input_and_biases_give_zero_scores() {
        let (params, _, rep_dim, classes) = tiny();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let ids = ClassifierIds::resolve(&params, &bound);
        let rep = tape.constant(vec![0.0; rep_dim], vec![rep_dim]);
        let out = classify(&mut tape, &ids, rep).unwrap();
        assert_eq!(tape.value(out), vec![0.0; classes]);
    }

    #[test]
    fn two_class_hand_evaluation() {
        // 1-dim rep, 1-wide hidden layers, hand-set weights:
        // h1 = tanh(2*r), h2 = tanh(0.5*h1 + 0.1), out = [h2, -3*h2 + 0.2]
        let mut params = ParamSet::new();
        params.add("cls.l1.weight", vec![1, 1], vec![2.0]);
        params.add("cls.l1.bias", vec![1], vec![0.0]);
        params.add("cls.l2.weight", vec![1, 1], vec![0.5]);
        params.add("cls.l2.bias", vec![1], vec![0.1]);
        params.add("cls.l3.weight", vec![2, 1], vec![1.0, -3.0]);
        params.add("cls.l3.bias", vec![2], vec![0.0, 0.2]);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let ids = ClassifierIds::resolve(&params, &bound);
        let rep = tape.constant(vec![0.7], vec![1]);
        let out_id = classify(&mut tape, &ids, rep).unwrap();
        let out = tape.value(out_id).to_vec();
        let h2 = (0.5 * (2.0f64 * 0.7).tanh() + 0.1).tanh();
        assert!((out[0] - h2).abs() < 1e-15);
        assert!((out[1] - (-3.0 * h2 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gradients_through_all_layers_match_finite_differences() {
        let (params, _, rep_dim, classes) = tiny();
        let inputs: Vec<(&[f64], &[usize])> = params
            .iter()
            .map(|p| (p.values.as_slice(), p.shape.as_slice()))
            .collect();
        let rep: Vec<f64> = (0..rep_dim).map(|i| 0.2 * i as f64 - 0.3).collect();
        let report = grad_check_params(
            |tape, ids| {
                let cls = ClassifierIds {
                    w: [ids[0], ids[2], ids[4]],
                    b: [ids[1], ids[3], ids[5]],
                };
                let r = tape.constant(rep.clone(), vec![rep.len()]);
                let out = classify(tape, &cls, r)?;
                let w = tape.constant((1..=classes).map(|i| i as f64).collect(), vec![classes]);
                let p = tape.mul(out, w)?;
                tape.sum(p)
            },
            &inputs,
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "classifier grad check err = {}",
            report.max_rel_err
        );
    }
}
