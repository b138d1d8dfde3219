//! Orthonormal Sylvester–Hadamard channel mapper.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// `H_0 = [1]`, `H_k = (1/√2) [[H, H], [H, −H]]`.
pub fn hadamard_matrix(k: u32) -> Array {
    let mut h = vec![1.0];
    let mut n = 1;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..k {
        let m = 2 * n;
        let mut next = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                let v = s * h[i * n + j];
                next[i * m + j] = v;
                next[i * m + j + n] = v;
                next[(i + n) * m + j] = v;
                next[(i + n) * m + j + n] = -v;
            }
        }
        h = next;
        n = m;
    }
    Array::new([n, n], h).expect("square")
}

/// Hadamard matrix matching a channel width, which must be a power of two.
pub fn hadamard_for(channels: usize) -> Result<Array> {
    if channels == 0 || !channels.is_power_of_two() {
        return Err(Error::Config(format!(
            "Hadamard mapper needs a power-of-two channel count, got {channels}"
        )));
    }
    Ok(hadamard_matrix(channels.trailing_zeros()))
}

/// `((z H) W_H) Hᵀ` over the last axis of `z`.
pub fn hadamard_map(tape: &mut Tape, z: Var, w_h: Var) -> Result<Var> {
    let c = *tape.shape(z).last().unwrap_or(&0);
    let h = hadamard_for(c)?;
    let ht = h.t()?;
    let h = tape.constant(h);
    let ht = tape.constant(ht);
    // fold the three channel maps into one C×C matrix before touching z
    let hw = tape.matmul(h, w_h)?;
    let m = tape.matmul(hw, ht)?;
    crate::nn::linear(tape, z, m, None)
}
