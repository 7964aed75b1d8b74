//! Small multilayer perceptrons used for the flow nets, the conditional mean
//! network and the dynamics network.

use crate::error::Result;
use crate::tensor::{ElemKind, Tape, Tensor, Var};
use rand::Rng;

/// One-hidden-layer perceptron with tanh activation and linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one bound Mlp.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            w1: Tensor::kaiming_uniform(vec![hidden, input], input, rng),
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2: Tensor::kaiming_uniform(vec![output, hidden], hidden, rng),
            b2: Tensor::zeros(vec![output]).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape[0]
    }

    /// Forward pass without tape participation. Accumulation order matches
    /// the tape's affine primitive so both routes give bit-identical values.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (h, n) = (self.w1.shape[0], self.w1.shape[1]);
        debug_assert_eq!(x.len(), n);
        let mut hid = vec![0.0; h];
        for i in 0..h {
            let mut acc = 0.0;
            let row = &self.w1.data[i * n..(i + 1) * n];
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            hid[i] = (self.b1.data[i] + acc).tanh();
        }
        let m = self.w2.shape[0];
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            let row = &self.w2.data[i * h..(i + 1) * h];
            for (a, b) in row.iter().zip(&hid) {
                acc += a * b;
            }
            out[i] = self.b2.data[i] + acc;
        }
        out
    }

    /// Registers the parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Tape forward pass through bound parameters.
    pub fn forward(&self, tape: &mut Tape, vars: MlpVars, x: Var) -> Result<Var> {
        let h = tape.affine(x, vars.w1, vars.b1)?;
        let h = tape.elementwise(h, ElemKind::Tanh);
        tape.affine(h, vars.w2, vars.b2)
    }

    /// Pulls accumulated gradients from the tape into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, vars: MlpVars) -> Result<()> {
        self.w1.accumulate_grad(tape.grad(vars.w1))?;
        self.b1.accumulate_grad(tape.grad(vars.b1))?;
        self.w2.accumulate_grad(tape.grad(vars.w2))?;
        self.b2.accumulate_grad(tape.grad(vars.b2))?;
        Ok(())
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_matches_tape_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(3, 8, 2, &mut rng);
        let x = vec![0.2, -0.4, 1.0];
        let plain = mlp.eval(&x);

        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape);
        let xv = tape.constant(x);
        let y = mlp.forward(&mut tape, vars, xv).unwrap();
        assert_eq!(tape.value(y), plain.as_slice());
    }

    #[test]
    fn mlp_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(2, 6, 3, &mut rng);
        let mut params = vec![
            mlp.w1.clone(),
            mlp.b1.clone(),
            mlp.w2.clone(),
            mlp.b2.clone(),
        ];
        let err = gradient_check(
            |tape, vars| {
                let x = tape.constant(vec![0.7, -0.1]);
                let h = tape.affine(x, vars[0], vars[1])?;
                let h = tape.elementwise(h, crate::tensor::ElemKind::Tanh);
                let o = tape.affine(h, vars[2], vars[3])?;
                let sq = tape.elementwise(o, crate::tensor::ElemKind::Square);
                Ok(tape.sum(sq))
            },
            &mut params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "mlp gradient error {err}");
    }
}
