//! Modality de-equalizer: cross-modal attention, gated residual editors for
//! both modalities, and the adaptive image/text weighting. Also the one-step
//! gated editor used by the frozen stream.
//!
//! Feature layouts: image maps are `[C, H, W]`, text sequences `[D, L]`,
//! pooled vectors `[C]`. Editing requires `C == D`.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate and transform 1x1 convs of one editor branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchParams {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub transform_w: ParamId,
    pub transform_b: ParamId,
}

impl BranchParams {
    /// Zero-initialized, so a fresh editor is the identity.
    fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gate_w: store.add_zeros(format!("{prefix}.gate.weight"), &[width, 2 * width]),
            gate_b: store.add_zeros(format!("{prefix}.gate.bias"), &[width]),
            transform_w: store.add_zeros(format!("{prefix}.transform.weight"), &[width, width]),
            transform_b: store.add_zeros(format!("{prefix}.transform.bias"), &[width]),
        }
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.gate_w, self.gate_b, self.transform_w, self.transform_b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EditorParams {
    pub image: BranchParams,
    pub text: BranchParams,
    pub combiner_w: ParamId,
    pub combiner_b: ParamId,
}

impl EditorParams {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            image: BranchParams::new(store, "emd.image", width),
            text: BranchParams::new(store, "emd.text", width),
            combiner_w: store.add_uniform("emd.combiner.weight", &[1, 2 * width], 2 * width, rng),
            combiner_b: store.add_uniform("emd.combiner.bias", &[1], 2 * width, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.image.ids().to_vec();
        out.extend(self.text.ids());
        out.extend([self.combiner_w, self.combiner_b]);
        out
    }
}

/// Weights of the frozen stream's one-step editor.
#[derive(Clone, Copy, Debug)]
pub struct ClipEditorParams {
    pub ref_w: ParamId,
    pub ref_b: ParamId,
    pub txt_w: ParamId,
    pub txt_b: ParamId,
}

impl ClipEditorParams {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan = 2 * width;
        Self {
            ref_w: store.add_uniform("clip_editor.ref.weight", &[width, fan], fan, rng),
            ref_b: store.add_uniform("clip_editor.ref.bias", &[width], fan, rng),
            txt_w: store.add_uniform("clip_editor.txt.weight", &[width, fan], fan, rng),
            txt_b: store.add_uniform("clip_editor.txt.bias", &[width], fan, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.ref_w, self.ref_b, self.txt_w, self.txt_b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CombinerOutput {
    /// Image importance, shape `[1]`.
    pub alpha: Var,
    pub f_comb: Var,
    pub image_edited: Var,
    pub text_edited: Var,
    pub spatial: Var,
    pub word: Var,
}

fn dims3(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("{what} must be [C, H, W], got {s:?}")),
    }
}

fn dims2(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [d, l] => Ok((d, l)),
        ref s => shape_err(format!("{what} must be [D, L], got {s:?}")),
    }
}

fn same_width(c: usize, d: usize) -> Result<()> {
    if c != d {
        return shape_err(format!("image width {c} differs from text width {d}"));
    }
    Ok(())
}

/// Softmax over the rows of `m [P, C]` dotted with the pooled vector `g [C]`.
fn attend(tape: &mut Tape, m: Var, g: Var) -> Result<Var> {
    let n = tape.shape(m)[0];
    let c = tape.shape(g)[0];
    let g = tape.reshape(g, &[c, 1])?;
    let s = tape.matmul(m, g)?;
    let s = tape.reshape(s, &[1, n])?;
    tape.softmax(s, 1)
}

/// `[1, H, W]` softmax over positions of `f_ref(:, i, j) . GeM(f_txt)`.
pub fn spatial_attention(tape: &mut Tape, f_ref: Var, f_txt: Var, gem_p: f64) -> Result<Var> {
    let (c, h, w) = dims3(tape, f_ref, "image map")?;
    let (d, _) = dims2(tape, f_txt, "text sequence")?;
    same_width(c, d)?;
    let g = tape.gem(f_txt, gem_p)?;
    let flat = tape.reshape(f_ref, &[c, h * w])?;
    let rows = tape.transpose(flat)?;
    let a = attend(tape, rows, g)?;
    tape.reshape(a, &[1, h, w])
}

/// `[1, L]` softmax over words of `f_txt(:, l) . GeM(f_ref)`.
pub fn word_attention(tape: &mut Tape, f_txt: Var, f_ref: Var, gem_p: f64) -> Result<Var> {
    let (d, _) = dims2(tape, f_txt, "text sequence")?;
    let (c, h, w) = dims3(tape, f_ref, "image map")?;
    same_width(c, d)?;
    let flat = tape.reshape(f_ref, &[c, h * w])?;
    let g = tape.gem(flat, gem_p)?;
    let rows = tape.transpose(f_txt)?;
    attend(tape, rows, g)
}

/// Gated residual edit of `f [C, P]` under attention `a [1, P]`.
fn edit(tape: &mut Tape, f: Var, a: Var, p: &Bindings, br: &BranchParams) -> Result<Var> {
    let coarse = tape.mul(a, f)?;
    let both = tape.concat(&[coarse, f], 0)?;
    let g = tape.conv_1x1(both, p.var(br.gate_w), p.var(br.gate_b))?;
    let gate = tape.sigmoid(g);
    let t = tape.conv_1x1(coarse, p.var(br.transform_w), p.var(br.transform_b))?;
    let delta = tape.mul(gate, t)?;
    tape.add(delta, f)
}

pub fn edit_image(tape: &mut Tape, f_ref: Var, a_sp: Var, p: &Bindings, params: &EditorParams) -> Result<Var> {
    let (c, h, w) = dims3(tape, f_ref, "image map")?;
    if tape.shape(a_sp) != [1, h, w] {
        return shape_err(format!(
            "spatial attention {:?} does not fit map {h}x{w}",
            tape.shape(a_sp)
        ));
    }
    let f = tape.reshape(f_ref, &[c, h * w])?;
    let a = tape.reshape(a_sp, &[1, h * w])?;
    let out = edit(tape, f, a, p, &params.image)?;
    tape.reshape(out, &[c, h, w])
}

pub fn edit_text(tape: &mut Tape, f_txt: Var, a_w: Var, p: &Bindings, params: &EditorParams) -> Result<Var> {
    let (_, l) = dims2(tape, f_txt, "text sequence")?;
    if tape.shape(a_w) != [1, l] {
        return shape_err(format!("word attention {:?} does not fit {l} words", tape.shape(a_w)));
    }
    edit(tape, f_txt, a_w, p, &params.text)
}

/// Pooled `(image, text)` vectors of the edited features.
pub fn pool_pair(tape: &mut Tape, f_ref_edt: Var, f_txt_edt: Var, gem_p: f64) -> Result<(Var, Var)> {
    let (c, h, w) = dims3(tape, f_ref_edt, "image map")?;
    let (d, _) = dims2(tape, f_txt_edt, "text sequence")?;
    same_width(c, d)?;
    let flat = tape.reshape(f_ref_edt, &[c, h * w])?;
    Ok((tape.gem(flat, gem_p)?, tape.gem(f_txt_edt, gem_p)?))
}

/// `alpha * img + (1 - alpha) * txt` for `alpha [1]` and vectors `[C]`.
pub fn weighted_sum(tape: &mut Tape, alpha: Var, img: Var, txt: Var) -> Result<Var> {
    let a = tape.mul(alpha, img)?;
    let rest = tape.affine(alpha, -1.0, 1.0);
    let b = tape.mul(rest, txt)?;
    tape.add(a, b)
}

/// Image importance `sigmoid(FC([img; txt]))` from pooled vectors, shape `[1]`.
pub fn importance(tape: &mut Tape, img: Var, txt: Var, p: &Bindings, params: &EditorParams) -> Result<Var> {
    let cat = tape.concat(&[img, txt], 0)?;
    let n = tape.shape(cat)[0];
    let col = tape.reshape(cat, &[n, 1])?;
    let z = tape.matmul(p.var(params.combiner_w), col)?;
    let z = tape.reshape(z, &[1])?;
    let z = tape.add(z, p.var(params.combiner_b))?;
    Ok(tape.sigmoid(z))
}

/// Returns `(alpha, f_comb)`. `alpha_override` replaces the learned weight
/// with a constant, which tests use to pin the boundary cases.
pub fn adaptive_combine(
    tape: &mut Tape,
    f_ref_edt: Var,
    f_txt_edt: Var,
    p: &Bindings,
    params: &EditorParams,
    gem_p: f64,
    alpha_override: Option<f64>,
) -> Result<(Var, Var)> {
    let (img, txt) = pool_pair(tape, f_ref_edt, f_txt_edt, gem_p)?;
    let alpha = match alpha_override {
        Some(a) => tape.constant(Tensor::scalar(a)),
        None => importance(tape, img, txt, p, params)?,
    };
    let f_comb = weighted_sum(tape, alpha, img, txt)?;
    Ok((alpha, f_comb))
}

/// Attention, both editors and the adaptive combiner.
pub fn forward(
    tape: &mut Tape,
    f_ref: Var,
    f_txt: Var,
    p: &Bindings,
    params: &EditorParams,
    gem_p: f64,
) -> Result<CombinerOutput> {
    let spatial = spatial_attention(tape, f_ref, f_txt, gem_p)?;
    let word = word_attention(tape, f_txt, f_ref, gem_p)?;
    let image_edited = edit_image(tape, f_ref, spatial, p, params)?;
    let text_edited = edit_text(tape, f_txt, word, p, params)?;
    let (alpha, f_comb) = adaptive_combine(tape, image_edited, text_edited, p, params, gem_p, None)?;
    Ok(CombinerOutput {
        alpha,
        f_comb,
        image_edited,
        text_edited,
        spatial,
        word,
    })
}

/// `sigmoid(FC_ref([r; t])) * r + sigmoid(FC_txt([r; t])) * t` on `[D]` vectors.
pub fn clip_edit_combine(
    tape: &mut Tape,
    f_ref: Var,
    f_txt: Var,
    p: &Bindings,
    params: &ClipEditorParams,
) -> Result<Var> {
    let (r, t) = (tape.shape(f_ref).to_vec(), tape.shape(f_txt).to_vec());
    let ([d], [d2]) = (r.as_slice(), t.as_slice()) else {
        return shape_err(format!("frozen-stream embeddings must be vectors, got {r:?} and {t:?}"));
    };
    same_width(*d, *d2)?;
    let d = *d;
    let cat = tape.concat(&[f_ref, f_txt], 0)?;
    let col = tape.reshape(cat, &[2 * d, 1])?;
    let mut gate = |w: ParamId, b: ParamId| -> Result<Var> {
        let z = tape.conv_1x1(col, p.var(w), p.var(b))?;
        let z = tape.reshape(z, &[d])?;
        Ok(tape.sigmoid(z))
    };
    let a_ref = gate(params.ref_w, params.ref_b)?;
    let a_txt = gate(params.txt_w, params.txt_b)?;
    let x = tape.mul(a_ref, f_ref)?;
    let y = tape.mul(a_txt, f_txt)?;
    tape.add(x, y)
}
