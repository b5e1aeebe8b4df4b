use half::f16;
use ndarray::Array2;

use crate::Scalar;

/// Rounds to the nearest IEEE binary16 value (ties to even) and widens back.
pub fn fp16_round(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fp16Roundtrip<S> {
    pub values: Array2<S>,
    /// Finite inputs that became infinite.
    pub overflow: Array2<bool>,
}

impl<S> Fp16Roundtrip<S> {
    pub fn any_overflow(&self) -> bool {
        self.overflow.iter().any(|&o| o)
    }
}

pub fn quantize_fp16_roundtrip<S: Scalar>(values: &Array2<S>) -> Fp16Roundtrip<S> {
    let mut overflow = Array2::from_elem(values.dim(), false);
    let out = Array2::from_shape_fn(values.dim(), |(i, j)| {
        let x = values[[i, j]].to_f64().unwrap();
        let q = fp16_round(x);
        if x.is_finite() && q.is_infinite() {
            overflow[[i, j]] = true;
        }
        S::of(q)
    });
    Fp16Roundtrip { values: out, overflow }
}
