//! Dense tensors, neural-network kernels, and a reverse-mode tape whose
//! gradients are checked against finite differences.

mod gradcheck;
pub mod io;
mod layers;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, ElementCheck, GradCheckOptions, GradCheckReport};
pub use layers::{Conv2d, ConvNormAct, DepthwiseConv1d, LayerNorm, Linear, Mlp, LN_EPS};
pub use ops::{conv1d_depthwise, conv2d, layer_norm, linear, matmul, silu, softmax_rows};
pub use param::{Module, Param, ParamId};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod grad_tests {
    use std::rc::Rc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Result;

    /// Free-standing parameters used as op inputs.
    struct Inputs(Vec<Param>);

    impl Module for Inputs {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            self.0.iter().for_each(|p| f(p))
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.0.iter_mut().for_each(|p| f(p))
        }
    }

    fn inputs(seed: u64, shapes: &[&[usize]]) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Inputs(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| Param::new(format!("in{i}"), Tensor::randn(s, &mut rng)))
                .collect(),
        )
    }

    /// Reduces to a scalar with random weights so every output element matters.
    fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let w = Tensor::randn(&y.shape(), &mut rng);
        Ok(y.mul_const(&w)?.sum())
    }

    fn check<F>(shapes: &[&[usize]], f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        for seed in 0..5 {
            let mut m = inputs(seed, shapes);
            let report = grad_check(
                &mut m,
                |m: &Inputs, t| {
                    let vars: Vec<Var> = m.0.iter().map(|p| t.param(p)).collect();
                    project(f(t, &vars)?, seed)
                },
                GradCheckOptions::default(),
            )
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!(report.max_error() <= 1e-4);
        }
    }

    #[test]
    fn elementwise_ops() {
        check(&[&[3, 4], &[3, 4]], |_, v| v[0].add(v[1]));
        check(&[&[3, 4], &[3, 4]], |_, v| v[0].sub(v[1]));
        check(&[&[3, 4], &[3, 4]], |_, v| v[0].mul(v[1]));
        check(&[&[3, 4]], |_, v| Ok(v[0].silu()));
        check(&[&[3, 4]], |_, v| Ok(v[0].softplus()));
        check(&[&[3, 4]], |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3)));
        check(&[&[3, 4]], |_, v| Ok(v[0].mean()));
    }

    #[test]
    fn matrix_ops() {
        check(&[&[3, 4], &[4, 5]], |_, v| v[0].matmul(v[1]));
        check(&[&[3, 4], &[5, 4]], |_, v| v[0].matmul_t(v[1], true));
        check(&[&[2, 3, 4], &[4, 5], &[5]], |_, v| v[0].linear(v[1], v[2]));
        check(&[&[3, 4]], |_, v| v[0].transpose());
        check(&[&[2, 3, 4]], |_, v| v[0].grid_to_tokens());
        check(&[&[6, 2]], |_, v| v[0].tokens_to_grid(2, 3));
    }

    #[test]
    fn normalisation_ops() {
        check(&[&[3, 6], &[6], &[6]], |_, v| v[0].layer_norm(v[1], v[2], LN_EPS));
        check(&[&[3, 5]], |_, v| Ok(v[0].softmax_rows()));
        check(&[&[4, 3]], |_, v| v[0].cross_entropy_rows(&[0, 2, 1, 2]));
    }

    #[test]
    fn convolution_ops() {
        check(&[&[2, 5, 6], &[3, 2, 3, 3], &[3]], |_, v| v[0].conv2d(v[1], v[2], 1, 1));
        check(&[&[2, 7, 6], &[3, 2, 3, 3], &[3]], |_, v| v[0].conv2d(v[1], v[2], 2, 1));
        check(&[&[2, 4, 4], &[3, 2, 1, 1], &[3]], |_, v| v[0].conv2d(v[1], v[2], 1, 0));
        check(&[&[6, 3], &[3, 3]], |_, v| v[0].conv1d_depthwise(v[1]));
        check(&[&[2, 2, 3]], |_, v| v[0].upsample_nearest2());
    }

    #[test]
    fn structural_ops() {
        let idx = Rc::new(vec![3, 0, 0, 2]);
        check(&[&[4, 3]], move |_, v| v[0].gather_rows(idx.clone()));
        check(&[&[4, 3], &[4, 2]], |_, v| Var::concat_cols(&[v[0], v[1]]));
        check(&[&[4, 5]], |_, v| v[0].slice_cols(1, 3));
        check(&[&[2, 6]], |_, v| v[0].reshape(&[3, 4]));
    }

    #[test]
    fn tied_parameter_accumulates() {
        let p = Param::new("p", Tensor::from_vec(vec![2.0]));
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let y = a.mul(b).unwrap().sum();
        let g = tape.backward(y);
        assert_eq!(g.of_param(&p).unwrap().data(), &[4.0]);
    }
}
