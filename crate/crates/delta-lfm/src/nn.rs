//! Dense layers shared by the autoencoder and the velocity network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gradcore::{NodeId, Tape, Tensor};

/// Fully connected layer mapping 1 x fan_in rows to 1 x fan_out rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights drawn from N(0, 1/fan_in), bias zero.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Linear {
            weight: Tensor::from_fn(fan_in, fan_out, |_, _| normal.sample(rng)),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    /// All parameters zero, for modulation generators that must start as
    /// the identity.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    /// Registers weight and bias as tape variables.
    pub fn on_tape(&self, tape: &mut Tape) -> LinearNodes {
        LinearNodes {
            weight: tape.var(self.weight.clone()),
            bias: tape.var(self.bias.clone()),
        }
    }

    /// Plain forward pass for inference paths that need no gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl LinearNodes {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let wx = tape.matmul(x, self.weight)?;
        tape.add(wx, self.bias)
    }
}

/// Uniform draw helper used by the data generator and training loops.
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::init(5, 3, &mut rng);
        let x = Tensor::row(vec![0.1, -0.4, 0.9, 0.2, -0.7]);

        let plain = layer.forward(&x).unwrap();

        let mut tape = Tape::new();
        let nodes = layer.on_tape(&mut tape);
        let xid = tape.constant(x);
        let out = nodes.apply(&mut tape, xid).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Linear::init(4, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Linear::init(4, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.weight.data(), b.weight.data());
    }
}
