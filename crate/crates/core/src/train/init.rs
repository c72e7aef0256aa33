//! He-scaled Gaussian parameter initialisation.
//!
//! Weights are drawn from N(0, 2/n_l) where the fan-in n_l counts the
//! connections feeding one unit of the layer (`k³ · C_in`). Biases start at
//! exactly zero and PReLU slopes at 0.25.

use rand::Rng;

use crate::ops::ConvKernelBank;
use crate::scalar::Scalar;

/// Fan-in of a layer: the connection count `k³ · C_in` per output unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FanIn(pub usize);

impl FanIn {
    pub fn of_bank<T: Scalar>(bank: &ConvKernelBank<T>) -> Self {
        FanIn(bank.taps_per_output())
    }

    /// Standard deviation of the weight distribution, √(2 / n_l).
    pub fn std_dev(self) -> f64 {
        (2.0 / self.0 as f64).sqrt()
    }
}

/// Initialise one kernel bank in place, deterministically in `rng`.
///
/// Weight draw order is the storage order of `bank.weights`, so a given RNG
/// stream always produces the same parameters regardless of thread count.
pub fn he_init_bank<T: Scalar, R: Rng + ?Sized>(bank: &mut ConvKernelBank<T>, rng: &mut R) {
    let std = T::of_f64(FanIn::of_bank(bank).std_dev());
    for w in &mut bank.weights {
        *w = T::standard_normal(rng) * std;
    }
    for b in &mut bank.bias {
        *b = T::zero();
    }
    if let Some(slopes) = &mut bank.prelu {
        for s in slopes.iter_mut() {
            *s = T::of_f64(0.25);
        }
    }
}
