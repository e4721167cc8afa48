//! The texture predictor: RGBA over (uv, s, frame code), split into a
//! view-independent head and a single-channel view-dependent residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    sigmoid, Activation, AutodiffError, Encoding, Matrix, Mlp, MlpSpec, ParamStore, StoreId, Tape,
    Var,
};
use crate::geometry::Vec3;

pub const APPEARANCE_STORE: StoreId = StoreId(1);
const CODES: &str = "texture.codes";

#[derive(Debug, Error)]
pub enum AppearanceError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("frame {frame} out of range 1..={frames}")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("interpolation weight {0} outside [0, 1]")]
    BadWeight(f64),
    #[error("code has {got} entries, expected {want}")]
    CodeDim { got: usize, want: usize },
    #[error("{0}")]
    Unsupported(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureArch {
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub uv_encoding: Encoding,
    pub s_encoding: Encoding,
    pub dir_encoding: Encoding,
    pub code_dim: usize,
}

impl Default for TextureArch {
    fn default() -> Self {
        Self {
            trunk_width: 256,
            trunk_depth: 8,
            uv_encoding: Encoding::new(10, true),
            s_encoding: Encoding::new(4, true),
            dir_encoding: Encoding::new(4, true),
            code_dim: 32,
        }
    }
}

impl TextureArch {
    fn trunk_input(&self) -> usize {
        self.uv_encoding.output_dim(2) + self.s_encoding.output_dim(1) + self.code_dim
    }
}

/// A per-frame latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCode(pub Vec<f64>);

/// `(1 − w)·a + w·b`.
pub fn interpolate_codes(a: &FrameCode, b: &FrameCode, w: f64) -> Result<FrameCode, AppearanceError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(AppearanceError::BadWeight(w));
    }
    if a.0.len() != b.0.len() {
        return Err(AppearanceError::CodeDim {
            got: b.0.len(),
            want: a.0.len(),
        });
    }
    Ok(FrameCode(
        a.0.iter().zip(&b.0).map(|(x, y)| (1.0 - w) * x + w * y).collect(),
    ))
}

/// Which frame conditioning to use for a query.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameSelector {
    /// 1-based frame index.
    Frame(usize),
    Code(FrameCode),
}

/// Per-sample texture query. `uv` is S×2; `view`, when present, is S×3.
#[derive(Clone, Debug)]
pub struct TextureQuery<'a> {
    pub uv: &'a Matrix,
    pub layers: &'a [usize],
    pub s_values: &'a [f64],
    pub frame: &'a FrameSelector,
    pub view: Option<&'a Matrix>,
}

/// Anything that can shade layer samples (the learned field or an analytic scene).
pub trait Appearance: Sync {
    /// S×4 RGBA rows.
    fn rgba(&self, q: &TextureQuery) -> Result<Matrix, AppearanceError>;
}

/// Forward outputs kept on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TextureVars {
    /// S×3 final colour (view-independent plus residual when a view is given).
    pub rgb: Var,
    /// S×1 in [0, 1].
    pub alpha: Var,
    /// S×1 view-dependent scalar, when a view was given.
    pub residual: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureField {
    pub store: ParamStore,
    arch: TextureArch,
    frames: usize,
    trunk: Mlp,
    head: Mlp,
    view_head: Mlp,
    codes: usize,
}

fn specs(arch: &TextureArch) -> (MlpSpec, MlpSpec, MlpSpec) {
    let trunk = MlpSpec {
        input: arch.trunk_input(),
        widths: vec![arch.trunk_width; arch.trunk_depth],
        activation: Activation::Relu,
        activate_last: true,
    };
    let head = MlpSpec {
        input: arch.trunk_width,
        widths: vec![4],
        activation: Activation::Relu,
        activate_last: false,
    };
    let view_head = MlpSpec {
        input: arch.trunk_width + arch.dir_encoding.output_dim(3),
        widths: vec![1],
        activation: Activation::Relu,
        activate_last: false,
    };
    (trunk, head, view_head)
}

fn normalized_views(view: &Matrix) -> Matrix {
    let mut out = view.clone();
    for mut row in out.rows_mut() {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            log::warn!("view direction of length {n} normalized");
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }
    out
}

impl TextureField {
    pub fn new(arch: TextureArch, frames: usize, seed: u64) -> Result<Self, AppearanceError> {
        if frames == 0 {
            return Err(AutodiffError::Config("need at least one frame".into()).into());
        }
        if arch.trunk_depth == 0 {
            return Err(AutodiffError::Config("texture trunk needs a hidden layer".into()).into());
        }
        let mut store = ParamStore::new(APPEARANCE_STORE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ts, hs, vs) = specs(&arch);
        let trunk = Mlp::register(&mut store, "texture.trunk", ts, &mut rng)?;
        let head = Mlp::register(&mut store, "texture.head", hs, &mut rng)?;
        let view_head = Mlp::register(&mut store, "texture.view", vs, &mut rng)?;
        // colour starts mid-range so the clamp passes gradients
        let (_, hb) = head.layers()[0];
        for c in 0..3 {
            store.value_mut(hb)[[0, c]] = 0.5;
        }
        let table = Matrix::from_shape_fn((frames, arch.code_dim), |_| rng.random_range(-0.1..0.1));
        let codes = store.add(CODES, table)?;
        Ok(Self {
            store,
            arch,
            frames,
            trunk,
            head,
            view_head,
            codes,
        })
    }

    pub fn from_store(arch: TextureArch, store: ParamStore) -> Result<Self, AppearanceError> {
        let (ts, hs, vs) = specs(&arch);
        let trunk = Mlp::attach(&store, "texture.trunk", ts)?;
        let head = Mlp::attach(&store, "texture.head", hs)?;
        let view_head = Mlp::attach(&store, "texture.view", vs)?;
        let codes = store.require(CODES)?;
        let (frames, dim) = store.value(codes).dim();
        if dim != arch.code_dim || frames == 0 {
            return Err(AppearanceError::CodeDim {
                got: dim,
                want: arch.code_dim,
            });
        }
        Ok(Self {
            store,
            arch,
            frames,
            trunk,
            head,
            view_head,
            codes,
        })
    }

    pub fn arch(&self) -> &TextureArch {
        &self.arch
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Parameter indices of the two output heads.
    pub fn head_params(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.head.layers().iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend(self.view_head.layers().iter().flat_map(|&(w, b)| [w, b]));
        out
    }

    pub fn view_head_params(&self) -> Vec<usize> {
        self.view_head.layers().iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn check_frame(&self, frame: usize) -> Result<(), AppearanceError> {
        if frame == 0 || frame > self.frames {
            return Err(AppearanceError::FrameOutOfRange {
                frame,
                frames: self.frames,
            });
        }
        Ok(())
    }

    /// Row `frame` (1-based) of the embedding table.
    pub fn embed_frame(&self, frame: usize) -> Result<FrameCode, AppearanceError> {
        self.check_frame(frame)?;
        Ok(FrameCode(self.store.value(self.codes).row(frame - 1).to_vec()))
    }

    /// Codes for 1-based `frames`, gathered from the table on the tape.
    pub fn frame_codes_tape(&self, tape: &mut Tape, frames: &[usize]) -> Result<Var, AppearanceError> {
        for &f in frames {
            self.check_frame(f)?;
        }
        let table = tape.param(&self.store, self.codes);
        Ok(tape.gather_rows(table, frames.iter().map(|f| f - 1).collect())?)
    }

    fn code_rows(&self, frame: &FrameSelector, n: usize) -> Result<Matrix, AppearanceError> {
        let code = match frame {
            FrameSelector::Frame(j) => self.embed_frame(*j)?,
            FrameSelector::Code(c) => c.clone(),
        };
        if code.0.len() != self.arch.code_dim {
            return Err(AppearanceError::CodeDim {
                got: code.0.len(),
                want: self.arch.code_dim,
            });
        }
        Ok(Matrix::from_shape_fn((n, code.0.len()), |(_, c)| code.0[c]))
    }

    fn trunk_input(&self, uv: &Matrix, s_values: &[f64], codes: &Matrix) -> Matrix {
        let s = Matrix::from_shape_vec((s_values.len(), 1), s_values.to_vec()).unwrap();
        let parts = [
            self.arch.uv_encoding.encode_rows(uv),
            self.arch.s_encoding.encode_rows(&s),
            codes.clone(),
        ];
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views).expect("row counts agree")
    }

    /// Recorded forward pass. `uv` is S×2, `codes` S×code_dim; `view` (S×3)
    /// enables the view-dependent residual.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        uv: Var,
        s_values: &[f64],
        codes: Var,
        view: Option<&Matrix>,
    ) -> Result<TextureVars, AppearanceError> {
        let s = Matrix::from_shape_vec((s_values.len(), 1), s_values.to_vec()).unwrap();
        let s = tape.constant(s);
        let uv_enc = self.arch.uv_encoding.encode_tape(tape, uv)?;
        let s_enc = self.arch.s_encoding.encode_tape(tape, s)?;
        let input = tape.concat_cols(&[uv_enc, s_enc, codes])?;
        let feat = self.trunk.apply_tape(tape, &self.store, input)?;
        let raw = self.head.apply_tape(tape, &self.store, feat)?;
        let rgb = tape.slice_cols(raw, 0..3)?;
        let rgb = tape.clamp01(rgb);
        let alpha = tape.slice_cols(raw, 3..4)?;
        let alpha = tape.sigmoid(alpha);
        let (rgb, residual) = match view {
            Some(view) => {
                let dir = tape.constant(self.arch.dir_encoding.encode_rows(&normalized_views(view)));
                let vin = tape.concat_cols(&[feat, dir])?;
                let r = self.view_head.apply_tape(tape, &self.store, vin)?;
                (tape.add_col_broadcast(rgb, r)?, Some(r))
            }
            None => (rgb, None),
        };
        Ok(TextureVars {
            rgb,
            alpha,
            residual,
        })
    }

    /// Plain forward pass: S×4 RGBA plus the view-dependent scalar per row
    /// when a view is supplied.
    pub fn eval_rows(
        &self,
        uv: &Matrix,
        s_values: &[f64],
        codes: &Matrix,
        view: Option<&Matrix>,
    ) -> Result<(Matrix, Option<Vec<f64>>), AppearanceError> {
        let input = self.trunk_input(uv, s_values, codes);
        let feat = self.trunk.apply(&self.store, &input)?;
        let raw = self.head.apply(&self.store, &feat)?;
        let mut out = Matrix::zeros((raw.nrows(), 4));
        for (r, row) in raw.rows().into_iter().enumerate() {
            for c in 0..3 {
                out[[r, c]] = row[c].clamp(0.0, 1.0);
            }
            out[[r, 3]] = sigmoid(row[3]);
        }
        let residual = match view {
            Some(view) => {
                let dir = self.arch.dir_encoding.encode_rows(&normalized_views(view));
                let vin = ndarray::concatenate(ndarray::Axis(1), &[feat.view(), dir.view()])
                    .expect("row counts agree");
                let r = self.view_head.apply(&self.store, &vin)?;
                let r: Vec<f64> = r.column(0).to_vec();
                for (i, v) in r.iter().enumerate() {
                    for c in 0..3 {
                        out[[i, c]] += v;
                    }
                }
                Some(r)
            }
            None => None,
        };
        Ok((out, residual))
    }

    /// Single query: RGBA at `uv` on the level `s_value`.
    pub fn texture_eval(
        &self,
        uv: [f64; 2],
        s_value: f64,
        code: &FrameCode,
        view_dir: Option<Vec3>,
    ) -> Result<[f64; 4], AppearanceError> {
        let uv = Matrix::from_shape_vec((1, 2), uv.to_vec()).unwrap();
        let codes = self.code_rows(&FrameSelector::Code(code.clone()), 1)?;
        let view = view_dir.map(|d| Matrix::from_shape_vec((1, 3), vec![d.x, d.y, d.z]).unwrap());
        let (out, _) = self.eval_rows(&uv, &[s_value], &codes, view.as_ref())?;
        Ok([out[[0, 0]], out[[0, 1]], out[[0, 2]], out[[0, 3]]])
    }
}

impl Appearance for TextureField {
    fn rgba(&self, q: &TextureQuery) -> Result<Matrix, AppearanceError> {
        let codes = self.code_rows(q.frame, q.uv.nrows())?;
        Ok(self.eval_rows(q.uv, q.s_values, &codes, q.view)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> TextureArch {
        TextureArch {
            trunk_width: 8,
            trunk_depth: 2,
            uv_encoding: Encoding::new(2, true),
            s_encoding: Encoding::new(1, true),
            dir_encoding: Encoding::new(1, true),
            code_dim: 4,
        }
    }

    fn zero_heads(f: &mut TextureField) {
        for i in f.head_params() {
            f.store.value_mut(i).fill(0.0);
        }
    }

    #[test]
    fn zero_heads_give_black_half_alpha() {
        let mut f = TextureField::new(small_arch(), 3, 1).unwrap();
        zero_heads(&mut f);
        let code = f.embed_frame(2).unwrap();
        let out = f.texture_eval([0.3, -0.2], 0.25, &code, None).unwrap();
        assert_eq!(out, [0.0, 0.0, 0.0, 0.5]);
        let with_view = f
            .texture_eval([0.3, -0.2], 0.25, &code, Some(Vec3::new(0.0, 0.0, 1.0)))
            .unwrap();
        assert_eq!(with_view, out);
    }

    #[test]
    fn frame_embedding_lookup() {
        let f = TextureField::new(small_arch(), 3, 9).unwrap();
        assert_eq!(f.embed_frame(1).unwrap(), f.embed_frame(1).unwrap());
        assert_ne!(f.embed_frame(1).unwrap(), f.embed_frame(2).unwrap());
        assert!(f.embed_frame(0).is_err());
        assert!(f.embed_frame(4).is_err());
        let g = TextureField::new(small_arch(), 3, 9).unwrap();
        assert_eq!(f.store, g.store);
    }

    #[test]
    fn code_interpolation() {
        let a = FrameCode(vec![1.0, -2.0]);
        let b = FrameCode(vec![3.0, 4.0]);
        assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate_codes(&a, &b, 0.5).unwrap().0, vec![2.0, 1.0]);
        assert!(interpolate_codes(&a, &b, 1.5).is_err());
    }

    #[test]
    fn bypass_ignores_view_direction() {
        let f = TextureField::new(small_arch(), 2, 4).unwrap();
        let code = f.embed_frame(1).unwrap();
        let base = f.texture_eval([0.1, 0.7], 0.3, &code, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut differs = false;
        for _ in 0..100 {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
            assert_eq!(f.texture_eval([0.1, 0.7], 0.3, &code, None).unwrap(), base);
            differs |= f.texture_eval([0.1, 0.7], 0.3, &code, Some(d)).unwrap() != base;
        }
        assert!(differs);
    }

    #[test]
    fn alpha_stays_in_unit_interval() {
        let mut f = TextureField::new(small_arch(), 1, 2).unwrap();
        let (_, hb) = f.head.layers()[0];
        f.store.value_mut(hb)[[0, 3]] = 800.0;
        let code = f.embed_frame(1).unwrap();
        let a = f.texture_eval([0.0, 0.0], 0.2, &code, None).unwrap()[3];
        assert!((0.0..=1.0).contains(&a));
        f.store.value_mut(hb)[[0, 3]] = -800.0;
        let a = f.texture_eval([0.0, 0.0], 0.2, &code, None).unwrap()[3];
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn tape_and_plain_agree() {
        let f = TextureField::new(small_arch(), 3, 5).unwrap();
        let uv = Matrix::from_shape_vec((2, 2), vec![0.1, -0.4, 0.8, 0.3]).unwrap();
        let view = Matrix::from_shape_vec((2, 3), vec![0.0, 0.6, 0.8, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let uvv = tape.constant(uv.clone());
        let codes = f.frame_codes_tape(&mut tape, &[3, 1]).unwrap();
        let out = f
            .forward_tape(&mut tape, uvv, &[0.2, 0.3], codes, Some(&view))
            .unwrap();
        let code_rows = tape.value(codes).clone();
        let (plain, res) = f.eval_rows(&uv, &[0.2, 0.3], &code_rows, Some(&view)).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((tape.value(out.rgb)[[r, c]] - plain[[r, c]]).abs() < 1e-14);
            }
            assert!((tape.value(out.alpha)[[r, 0]] - plain[[r, 3]]).abs() < 1e-14);
            assert!((tape.value(out.residual.unwrap())[[r, 0]] - res.as_ref().unwrap()[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = TextureField::new(small_arch(), 2, 13).unwrap();
        let uv = Matrix::from_shape_vec((3, 2), vec![0.1, -0.4, 0.8, 0.3, -0.5, 0.05]).unwrap();
        let view = Matrix::from_shape_vec((3, 3), vec![0.0, 0.6, 0.8, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = [0.2, 0.3, 0.25];
        let frames = [2, 1, 2];
        let weights = [0.3, -0.7, 1.1, 0.4];
        let loss_of = |field: &TextureField, tape: &mut Tape| {
            let uvv = tape.constant(uv.clone());
            let codes = field.frame_codes_tape(tape, &frames).unwrap();
            let out = field.forward_tape(tape, uvv, &s, codes, Some(&view)).unwrap();
            let w = tape.constant(Matrix::from_shape_fn((4, 1), |(r, _)| weights[r]));
            let rgba = tape.concat_cols(&[out.rgb, out.alpha]).unwrap();
            let l = tape.matmul(rgba, w).unwrap();
            tape.sum(l)
        };
        let mut tape = Tape::new();
        let loss = loss_of(&f, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let mut g = f.clone();
        g.store.set_grads(&grads);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for pi in 0..f.store.len() {
            for k in 0..f.store.value(pi).len() {
                let eval = |delta: f64| {
                    let mut p = f.clone();
                    p.store.value_mut(pi).as_slice_mut().unwrap()[k] += delta;
                    let mut t = Tape::new();
                    let l = loss_of(&p, &mut t);
                    t.scalar(l)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = g.store.grad(pi).as_slice().unwrap()[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
