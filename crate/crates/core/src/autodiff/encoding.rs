use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{AutodiffError, Matrix};

/// Sinusoidal positional encoding.
///
/// Layout is component-major: for each input component `x` the output holds
/// `[x (if identity), sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub frequencies: usize,
    pub include_identity: bool,
}

impl Encoding {
    pub fn new(frequencies: usize, include_identity: bool) -> Self {
        Self {
            frequencies,
            include_identity,
        }
    }

    fn per_component(&self) -> usize {
        2 * self.frequencies + usize::from(self.include_identity)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.per_component()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        for &v in x {
            if self.include_identity {
                out.push(v);
            }
            let mut freq = PI;
            for _ in 0..self.frequencies {
                let (s, c) = (freq * v).sin_cos();
                out.push(s);
                out.push(c);
                freq *= 2.0;
            }
        }
        out
    }

    /// Encodes every row of `x`.
    pub fn encode_rows(&self, x: &Matrix) -> Matrix {
        let dim = self.output_dim(x.ncols());
        let mut out = Matrix::zeros((x.nrows(), dim));
        for (r, row) in x.rows().into_iter().enumerate() {
            let enc = self.encode(row.as_slice().expect("standard layout"));
            out.row_mut(r)
                .iter_mut()
                .zip(enc)
                .for_each(|(o, e)| *o = e);
        }
        out
    }

    /// Recorded encoding; gradients flow back to `x`.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let input = tape.value(x).as_standard_layout().to_owned();
        let (rows, cols) = input.dim();
        let per = self.per_component();
        let mut value = Matrix::zeros((rows, cols * per));
        let mut deriv = Matrix::zeros((rows, cols * per));
        let mut source = Vec::with_capacity(cols * per);
        for c in 0..cols {
            source.extend(std::iter::repeat_n(c, per));
        }
        for r in 0..rows {
            for c in 0..cols {
                let v = input[[r, c]];
                let mut k = c * per;
                if self.include_identity {
                    value[[r, k]] = v;
                    deriv[[r, k]] = 1.0;
                    k += 1;
                }
                let mut freq = PI;
                for _ in 0..self.frequencies {
                    let (s, co) = (freq * v).sin_cos();
                    value[[r, k]] = s;
                    deriv[[r, k]] = freq * co;
                    value[[r, k + 1]] = co;
                    deriv[[r, k + 1]] = -freq * s;
                    k += 2;
                    freq *= 2.0;
                }
            }
        }
        tape.spread(x, value, source, deriv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{ParamKey, ParamStore, StoreId};
    use proptest::prelude::*;

    #[test]
    fn zero_input_two_frequencies() {
        assert_eq!(Encoding::new(2, false).encode(&[0.0]), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_input_one_frequency() {
        let e = Encoding::new(1, false).encode(&[0.5]);
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
    }

    // Reference values computed with mpmath at 50 significant digits.
    #[test]
    fn two_components_four_frequencies_match_reference() {
        let expected = [
            0.80901699437494742410,
            0.58778525229247312917,
            0.95105651629515357212,
            -0.30901699437494742410,
            -0.58778525229247312917,
            -0.80901699437494742410,
            0.95105651629515357212,
            0.30901699437494742410,
            -0.80901699437494742410,
            -0.58778525229247312917,
            0.95105651629515357212,
            -0.30901699437494742410,
            -0.58778525229247312917,
            -0.80901699437494742410,
            0.95105651629515357212,
            0.30901699437494742410,
        ];
        let e = Encoding::new(4, false).encode(&[0.3, -0.7]);
        assert_eq!(e.len(), 16);
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn output_dim_formula() {
        assert_eq!(Encoding::new(10, true).output_dim(2), 42);
        assert_eq!(Encoding::new(4, false).output_dim(3), 24);
        assert_eq!(Encoding::new(0, true).output_dim(3), 3);
    }

    #[test]
    fn tape_encoding_gradient_matches_finite_differences() {
        let enc = Encoding::new(3, true);
        let x0 = ndarray::array![[0.31, -0.42], [0.05, 0.77]];
        let w = Matrix::from_shape_fn((2, enc.output_dim(2)), |(r, c)| ((r * 7 + c) as f64).sin());
        let eval = |x: &Matrix| -> (f64, Matrix) {
            let mut store = ParamStore::new(StoreId(0));
            let xi = store.add("x", x.clone()).unwrap();
            let mut tape = Tape::new();
            let xv = tape.param(&store, xi);
            let e = enc.encode_tape(&mut tape, xv).unwrap();
            assert_eq!(tape.value(e), &enc.encode_rows(x));
            let wv = tape.constant(w.clone());
            let p = tape.mul(e, wv).unwrap();
            let l = tape.sum(p);
            let g = tape.backward(l).unwrap();
            (
                tape.scalar(l),
                g.get(ParamKey { store: StoreId(0), index: 0 }).unwrap().clone(),
            )
        };
        let (_, g) = eval(&x0);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut xp = x0.clone();
                xp[[i, j]] += h;
                let mut xm = x0.clone();
                xm[[i, j]] -= h;
                let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-6 * num.abs().max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn identity_channel_makes_encoding_injective(
            a in -1.0f64..1.0, b in -1.0f64..1.0, l in 1usize..8
        ) {
            prop_assume!(a != b);
            let enc = Encoding::new(l, true);
            prop_assert_ne!(enc.encode(&[a]), enc.encode(&[b]));
        }
    }
}
