//! The two prediction heads: one post-norm self-attention encoder layer
//! followed by a 4096/512/32/1 classifier with ReLU activations and a sigmoid
//! output.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Mat, Tape, Var};
use crate::datamodel::{HeadId, HeadOutput};
use crate::error::{Error, Result};

pub const CLASSIFIER_WIDTHS: [usize; 4] = [4096, 512, 32, 1];
pub const PENULTIMATE_WIDTH: usize = 32;
pub const ATTENTION_HEADS: usize = 4;
pub const FEED_FORWARD_MULT: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Layer-norm placement in the encoder; recorded in checkpoints.
pub const NORM_PLACEMENT: &str = "post";

/// Tensor order inside [`HeadParameters::tensors`].
pub const TENSOR_NAMES: [&str; 24] = [
    "enc.attn.w_q",
    "enc.attn.b_q",
    "enc.attn.w_k",
    "enc.attn.b_k",
    "enc.attn.w_v",
    "enc.attn.b_v",
    "enc.attn.w_o",
    "enc.attn.b_o",
    "enc.norm1.gain",
    "enc.norm1.bias",
    "enc.ff.w_in",
    "enc.ff.b_in",
    "enc.ff.w_out",
    "enc.ff.b_out",
    "enc.norm2.gain",
    "enc.norm2.bias",
    "fc1.w",
    "fc1.b",
    "fc2.w",
    "fc2.b",
    "fc3.w",
    "fc3.b",
    "fc4.w",
    "fc4.b",
];

const ENCODER_TENSORS: usize = 16;

mod idx {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const FF_WIN: usize = 10;
    pub const FF_BIN: usize = 11;
    pub const FF_WOUT: usize = 12;
    pub const FF_BOUT: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
    pub const FC: usize = 16;
}

/// Optimizer groups; each gets its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Classifier,
}

pub fn param_group(tensor_index: usize) -> ParamGroup {
    if tensor_index < ENCODER_TENSORS {
        ParamGroup::Encoder
    } else {
        ParamGroup::Classifier
    }
}

/// Sinusoidal positional encodings, `n_s x d`.
pub fn positional_encoding(n_s: usize, d: usize) -> Result<Mat> {
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let mut pe = Array2::zeros((n_s, d));
    for pos in 0..n_s {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

/// All trainable tensors of one head, in [`TENSOR_NAMES`] order. Also used to
/// hold gradients and optimizer moments, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters {
    input_dim: usize,
    tensors: Vec<Mat>,
}

/// Shapes of every tensor for an encoder of width `d`.
pub fn tensor_shapes(d: usize) -> Vec<(usize, usize)> {
    let ff = FEED_FORWARD_MULT * d;
    let mut shapes = vec![
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (1, d),
        (1, d),
        (d, ff),
        (1, ff),
        (ff, d),
        (1, d),
        (1, d),
        (1, d),
    ];
    let mut fan_in = d;
    for w in CLASSIFIER_WIDTHS {
        shapes.push((fan_in, w));
        shapes.push((1, w));
        fan_in = w;
    }
    shapes
}

fn check_width(d: usize) -> Result<()> {
    if d == 0 || d % ATTENTION_HEADS != 0 {
        return Err(Error::DimensionMismatch(format!(
            "encoder width {d} must be a positive multiple of {ATTENTION_HEADS}"
        )));
    }
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    Ok(())
}

impl HeadParameters {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases
    /// zero, layer-norm gains one.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        check_width(input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_shapes(input_dim)
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| {
                let name = TENSOR_NAMES[i];
                if name.ends_with(".gain") {
                    Array2::ones((r, c))
                } else if r == 1 {
                    Array2::zeros((r, c))
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self { input_dim, tensors })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn from_tensors(input_dim: usize, tensors: Vec<Mat>) -> Result<Self> {
        check_width(input_dim)?;
        let shapes = tensor_shapes(input_dim);
        if tensors.len() != shapes.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.dim() != *s {
                return Err(Error::DimensionMismatch(format!(
                    "{} has shape {:?}, expected {:?}",
                    TENSOR_NAMES[i],
                    t.dim(),
                    s
                )));
            }
        }
        Ok(Self { input_dim, tensors })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Zeroes the output layer, making every score exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        let n = self.tensors.len();
        self.tensors[n - 2].fill(0.0);
        self.tensors[n - 1].fill(0.0);
    }

    /// Puts every tensor on `tape`, trainable or not.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        HeadVars {
            input_dim: self.input_dim,
            vars,
        }
    }

    /// Inference on one video's pooled stream.
    pub fn forward(&self, input: &Mat, positional: bool) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = vars.forward(&mut tape, &[input], positional)?;
        Ok(out[0].output(&tape))
    }
}

/// A head's tensors as registered on a tape.
#[derive(Clone, Debug)]
pub struct HeadVars {
    input_dim: usize,
    vars: Vec<Var>,
}

/// Tape handles for one video's outputs.
#[derive(Clone, Copy, Debug)]
pub struct VideoVars {
    /// `n_s x 1` sigmoid scores.
    pub scores: Var,
    /// `n_s x 32` post-ReLU penultimate activations.
    pub penultimate: Var,
}

impl VideoVars {
    pub fn output(&self, tape: &Tape) -> HeadOutput {
        HeadOutput {
            scores: tape.value(self.scores).column(0).to_vec(),
            penultimate: tape.value(self.penultimate).clone(),
        }
    }
}

impl HeadVars {
    fn encode(&self, tape: &mut Tape, x: Var) -> Var {
        let v = &self.vars;
        let d = self.input_dim;
        let dh = d / ATTENTION_HEADS;
        let q = tape.matmul(x, v[idx::WQ]);
        let q = tape.add_row(q, v[idx::BQ]);
        let k = tape.matmul(x, v[idx::WK]);
        let k = tape.add_row(k, v[idx::BK]);
        let val = tape.matmul(x, v[idx::WV]);
        let val = tape.add_row(val, v[idx::BV]);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(ATTENTION_HEADS);
        for h in 0..ATTENTION_HEADS {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(val, a, b);
            let logits = tape.matmul_t(qh, kh);
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let proj = tape.matmul(cat, v[idx::WO]);
        let proj = tape.add_row(proj, v[idx::BO]);
        let res1 = tape.add(x, proj);
        let x1 = self.layer_norm(tape, res1, idx::LN1_G, idx::LN1_B);
        let ff = tape.matmul(x1, v[idx::FF_WIN]);
        let ff = tape.add_row(ff, v[idx::FF_BIN]);
        let ff = tape.relu(ff);
        let ff = tape.matmul(ff, v[idx::FF_WOUT]);
        let ff = tape.add_row(ff, v[idx::FF_BOUT]);
        let res2 = tape.add(x1, ff);
        self.layer_norm(tape, res2, idx::LN2_G, idx::LN2_B)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, gain: usize, bias: usize) -> Var {
        let n = tape.normalize_rows(x, LAYER_NORM_EPS);
        let n = tape.mul_row(n, self.vars[gain]);
        tape.add_row(n, self.vars[bias])
    }

    /// Classifier over stacked segment rows; returns (scores, penultimate).
    fn classify(&self, tape: &mut Tape, h: Var) -> (Var, Var) {
        let mut act = h;
        let mut penultimate = h;
        for layer in 0..CLASSIFIER_WIDTHS.len() {
            let w = self.vars[idx::FC + 2 * layer];
            let b = self.vars[idx::FC + 2 * layer + 1];
            let z = tape.matmul(act, w);
            let z = tape.add_row(z, b);
            if layer + 1 < CLASSIFIER_WIDTHS.len() {
                act = tape.relu(z);
                penultimate = act;
            } else {
                act = tape.sigmoid(z);
            }
        }
        (act, penultimate)
    }

    /// Forward pass over several videos. The classifier runs once on all
    /// segments stacked together.
    pub fn forward(&self, tape: &mut Tape, inputs: &[&Mat], positional: bool) -> Result<Vec<VideoVars>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut encoded = Vec::with_capacity(inputs.len());
        let mut lengths = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.ncols() != self.input_dim {
                return Err(Error::DimensionMismatch(format!(
                    "input has {} features, head expects {}",
                    x.ncols(),
                    self.input_dim
                )));
            }
            if x.nrows() == 0 {
                return Err(Error::DimensionMismatch("input has no segments".into()));
            }
            let x = if positional {
                let pe = positional_encoding(x.nrows(), self.input_dim)?;
                tape.constant(*x + &pe)
            } else {
                tape.constant((*x).clone())
            };
            encoded.push(self.encode(tape, x));
            lengths.push(inputs[encoded.len() - 1].nrows());
        }
        let stacked = if encoded.len() == 1 {
            encoded[0]
        } else {
            tape.concat_rows(&encoded)
        };
        let (scores, z) = self.classify(tape, stacked);
        if lengths.len() == 1 {
            return Ok(vec![VideoVars {
                scores,
                penultimate: z,
            }]);
        }
        let mut out = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for n in lengths {
            out.push(VideoVars {
                scores: tape.slice_rows(scores, at, at + n),
                penultimate: tape.slice_rows(z, at, at + n),
            });
            at += n;
        }
        Ok(out)
    }

    /// Collects this head's gradients; tensors the loss ignored get zeros.
    pub fn gradients(&self, grads: &mut Gradients, like: &HeadParameters) -> HeadParameters {
        let tensors = self
            .vars
            .iter()
            .zip(like.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Array2::zeros(t.dim())))
            .collect();
        HeadParameters {
            input_dim: self.input_dim,
            tensors,
        }
    }
}

/// The main and auxiliary heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPair {
    pub main: HeadParameters,
    pub aux: HeadParameters,
}

impl HeadPair {
    pub fn init(main_dim: usize, aux_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            main: HeadParameters::init(main_dim, seed.wrapping_mul(2).wrapping_add(1))?,
            aux: HeadParameters::init(aux_dim, seed.wrapping_mul(2).wrapping_add(2))?,
        })
    }

    pub fn get(&self, id: HeadId) -> &HeadParameters {
        match id {
            HeadId::Main => &self.main,
            HeadId::Aux => &self.aux,
        }
    }

    pub fn get_mut(&mut self, id: HeadId) -> &mut HeadParameters {
        match id {
            HeadId::Main => &mut self.main,
            HeadId::Aux => &mut self.aux,
        }
    }
}

/// Exact reverse-mode gradients of a scalar loss built by `loss` over the
/// given heads' parameters. Returns the loss value and one gradient set per
/// head, in input order.
pub fn gradient<F>(heads: &[&HeadParameters], loss: F) -> Result<(f64, Vec<HeadParameters>)>
where
    F: FnOnce(&mut Tape, &[HeadVars]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<HeadVars> = heads.iter().map(|h| h.register(&mut tape, true)).collect();
    let out = loss(&mut tape, &vars)?;
    let value = {
        let m = tape.value(out);
        if m.dim() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        m[[0, 0]]
    };
    let mut grads = tape.backward(out)?;
    let per_head = vars
        .iter()
        .zip(heads)
        .map(|(v, h)| v.gradients(&mut grads, h))
        .collect();
    Ok((value, per_head))
}
