//! The two MLP fields.
//!
//! `deform`: observation-space point, expression vector, and queried
//! deformation feature -> canonical offset `dx`. The output layer is
//! zero-initialized so the offset is exactly zero at initialization and the
//! pipeline starts as a static canonical field.
//!
//! `radiance`: canonical point, view direction, and per-frame appearance code
//! -> (rgb, density). Density comes off the trunk before any direction or
//! appearance conditioning, so it is independent of both by construction.
//! Two independently-weighted radiance fields are kept (coarse and fine),
//! matching the two photometric terms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Architecture and encoding sizes.
#[derive(Clone, Debug)]
pub struct FieldConfig {
    /// Frequencies for the canonical position encoding.
    pub x_freqs: usize,
    /// Frequencies for the view-direction encoding.
    pub d_freqs: usize,
    /// Frequencies for the deformation field's position encoding.
    pub deform_x_freqs: usize,
    pub deform_hidden: usize,
    pub deform_layers: usize,
    pub canon_hidden: usize,
    pub canon_layers: usize,
    /// 0-based hidden layer whose input re-concatenates the encoded position.
    pub canon_skip_input: usize,
    pub color_hidden: usize,
    /// Appearance code dimension.
    pub omega_dim: usize,
    /// Deformation feature width (volume output channels).
    pub feature_dim: usize,
    /// Expression vector length.
    pub de: usize,
    /// Unseen-frame appearance: mean of trained codes (true) or zero (false).
    pub test_omega_mean: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            x_freqs: 10,
            d_freqs: 4,
            deform_x_freqs: 6,
            deform_hidden: 128,
            deform_layers: 5,
            canon_hidden: 128,
            canon_layers: 6,
            canon_skip_input: 3,
            color_hidden: 64,
            omega_dim: 8,
            feature_dim: 16,
            de: 8,
            test_omega_mean: true,
        }
    }
}

/// Encoded width of a `dim`-vector with input passthrough.
pub fn encoded_width(dim: usize, freqs: usize) -> usize {
    dim * (1 + 2 * freqs)
}

impl FieldConfig {
    pub fn deform_input_width(&self) -> usize {
        encoded_width(3, self.deform_x_freqs) + self.de + self.feature_dim
    }

    pub fn canon_input_width(&self) -> usize {
        encoded_width(3, self.x_freqs)
    }

    pub fn color_input_width(&self) -> usize {
        self.canon_hidden + encoded_width(3, self.d_freqs) + self.omega_dim
    }
}

pub const APPEARANCE: &str = "appearance";

fn linear(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / fmath::sqrt(d_in as f64);
    params.insert(&format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], bound, rng).with_grad());
    params.insert(&format!("{name}.bias"), Tensor::uniform(&[d_out], bound, rng).with_grad());
}

/// Deformation-field parameters under the `deform.` prefix.
pub fn init_deform_params(params: &mut ParamSet, cfg: &FieldConfig, rng: &mut ChaCha8Rng) {
    let mut d_in = cfg.deform_input_width();
    for l in 0..cfg.deform_layers {
        linear(params, &format!("deform.l{l}"), d_in, cfg.deform_hidden, rng);
        d_in = cfg.deform_hidden;
    }
    // Zero-initialized output: dx = 0 until trained.
    params.insert("deform.out.weight", Tensor::zeros(&[d_in, 3]).with_grad());
    params.insert("deform.out.bias", Tensor::zeros(&[3]).with_grad());
}

/// Canonical radiance-field parameters under `{prefix}.`.
pub fn init_radiance_params(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &FieldConfig,
    rng: &mut ChaCha8Rng,
) {
    let enc = cfg.canon_input_width();
    let mut d_in = enc;
    for l in 0..cfg.canon_layers {
        if l == cfg.canon_skip_input {
            d_in += enc;
        }
        linear(params, &format!("{prefix}.l{l}"), d_in, cfg.canon_hidden, rng);
        d_in = cfg.canon_hidden;
    }
    linear(params, &format!("{prefix}.density"), cfg.canon_hidden, 1, rng);
    linear(params, &format!("{prefix}.color_hidden"), cfg.color_input_width(), cfg.color_hidden, rng);
    linear(params, &format!("{prefix}.color_out"), cfg.color_hidden, 3, rng);
}

/// Per-frame appearance codes `[n_frames, omega_dim]`, zero-initialized.
pub fn init_appearance_params(params: &mut ParamSet, n_frames: usize, cfg: &FieldConfig) {
    params.insert(APPEARANCE, Tensor::zeros(&[n_frames, cfg.omega_dim]).with_grad());
}

fn layer(tape: &mut Tape, vars: &BTreeMap<String, Var>, name: &str, x: Var) -> Var {
    let w = vars[&format!("{name}.weight")];
    let b = vars[&format!("{name}.bias")];
    tape.affine(x, w, b)
}

/// Canonical offsets for a batch: `x [n, 3]`, `psi [n, de]`, `feature [n, f]`
/// -> `dx [n, 3]`.
pub fn deform(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &FieldConfig,
    x: Var,
    psi: Var,
    feature: Var,
) -> Var {
    let pe = tape.posenc(x, cfg.deform_x_freqs, true);
    let mut h = tape.concat(&[pe, psi, feature], 1);
    for l in 0..cfg.deform_layers {
        let a = layer(tape, vars, &format!("deform.l{l}"), h);
        h = tape.relu(a);
    }
    layer(tape, vars, "deform.out", h)
}

/// Radiance field evaluation: canonical positions `[n, 3]`, *encoded* view
/// directions `[n, enc_d]`, appearance rows `[n, omega]` -> `(sigma [n, 1],
/// rgb [n, 3])`.
pub fn radiance(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    cfg: &FieldConfig,
    x_canonical: Var,
    encoded_dirs: Var,
    omega: Var,
) -> (Var, Var) {
    let pe = tape.posenc(x_canonical, cfg.x_freqs, true);
    let mut h = pe;
    for l in 0..cfg.canon_layers {
        if l == cfg.canon_skip_input {
            h = tape.concat(&[h, pe], 1);
        }
        let a = layer(tape, vars, &format!("{prefix}.l{l}"), h);
        h = tape.relu(a);
    }
    let sigma_pre = layer(tape, vars, &format!("{prefix}.density"), h);
    let sigma = tape.relu(sigma_pre);

    let color_in = tape.concat(&[h, encoded_dirs, omega], 1);
    let ch = layer(tape, vars, &format!("{prefix}.color_hidden"), color_in);
    let ch = tape.relu(ch);
    let rgb_pre = layer(tape, vars, &format!("{prefix}.color_out"), ch);
    let rgb = tape.sigmoid(rgb_pre);
    (sigma, rgb)
}

/// Appearance code for a frame. Training frames return their learned row;
/// unseen frames get the mean of all trained codes (or zero, per config).
pub fn appearance_code(codes: &Tensor, frame: Option<usize>, cfg: &FieldConfig) -> Vec<f64> {
    let n = codes.shape[0];
    let dim = codes.shape[1];
    match frame {
        Some(i) => {
            assert!(i < n, "appearance index {i} out of range ({n} training frames)");
            codes.data[i * dim..(i + 1) * dim].to_vec()
        }
        None => {
            if !cfg.test_omega_mean {
                return alloc::vec![0.0; dim];
            }
            let mut mean = alloc::vec![0.0; dim];
            for row in codes.data.chunks_exact(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            mean
        }
    }
}

/// On-tape appearance row for a training frame, tiled to `rows`.
pub fn appearance_rows(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    frame: usize,
    rows: usize,
) -> Var {
    let codes = vars[APPEARANCE];
    let n = tape.shape(codes)[0];
    assert!(frame < n, "appearance index {frame} out of range ({n} training frames)");
    let row = tape.slice(codes, 0, frame, frame + 1);
    tape.repeat_rows(row, rows)
}
