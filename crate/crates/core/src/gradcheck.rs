//! Central finite-difference oracle for gradients.
//!
//! This is the independent check used by the verification suite: it never
//! touches the backward pass, only repeated forward evaluations at
//! perturbed inputs.

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const FD_EPSILON: f64 = 1e-5;

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences at 64-bit. Returns the worst relative error
/// over all leaf elements, with an absolute floor to avoid 0/0 blowups on
/// genuinely tiny gradients.
pub fn max_relative_error<F>(leaves: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.get(id, &tape)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.numel() {
            let orig = leaf.data()[ei];
            work[li].data_mut()[ei] = orig + FD_EPSILON;
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - FD_EPSILON;
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            let exact = analytic[li].data()[ei];
            let denom = exact.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((numeric - exact).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::tape::Axis;

    pub(crate) fn random_matrix(rng: &mut CounterRng, m: usize, n: usize) -> Tensor<f64> {
        let data = (0..m * n).map(|_| rng.normal()).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = CounterRng::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let err = max_relative_error(&[a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            Ok(t.sum_all(c))
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = CounterRng::new(12);
        let x = random_matrix(&mut rng, 3, 5);
        for axis in [Axis::Rows, Axis::Cols] {
            let err = max_relative_error(std::slice::from_ref(&x), |t, ids| {
                let y = t.softmax(ids[0], axis)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            })
            .unwrap();
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = CounterRng::new(13);
        let x = random_matrix(&mut rng, 4, 6);
        let g = random_matrix(&mut rng, 1, 6);
        let g = Tensor::new(vec![6], g.data().to_vec()).unwrap();
        let b = Tensor::new(vec![6], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let err = max_relative_error(&[x, g, b], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = CounterRng::new(14);
        let x = random_matrix(&mut rng, 3, 3);
        let err = max_relative_error(std::slice::from_ref(&x), |t, ids| {
            let y = t.gelu(ids[0]);
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
