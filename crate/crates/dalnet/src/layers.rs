//! Neural building blocks composed by the denoiser: dense layers, an LSTM,
//! same-padded 1-D convolutions, inverted dropout, the sinusoidal
//! diffusion-step embedding with its MLP, and the condition embedder.

use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, Var};

/// Forward-pass mode. Eval disables dropout; nothing else differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform init in ±1/sqrt(fan_in).
pub fn init_weight(rng: &mut Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::param(data, shape).expect("init_weight: valid shape")
}

fn zero_param(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).expect("zero_param: valid shape")
}

// ── Dense ────────────────────────────────────────────────────────────

/// Fully connected layer, `x·W + b`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn init(rng: &mut Rng, input: usize, output: usize) -> Self {
        DenseLayer {
            weight: init_weight(rng, input, vec![input, output]),
            bias: zero_param(vec![output]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let wx = tape.matmul(x, w)?;
        tape.add_bias(wx, b)
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────

/// One gate's parameters: input weight, recurrent weight, bias.
#[derive(Debug, Clone)]
pub struct LstmGate {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

impl LstmGate {
    fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        LstmGate {
            w_x: init_weight(rng, input, vec![input, hidden]),
            w_h: init_weight(rng, hidden, vec![hidden, hidden]),
            bias: zero_param(vec![hidden]),
        }
    }

    fn pre_activation(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let wx = tape.leaf(&self.w_x);
        let wh = tape.leaf(&self.w_h);
        let b = tape.leaf(&self.bias);
        let xw = tape.matmul(x, wx)?;
        let hw = tape.matmul(h, wh)?;
        let s = tape.add(xw, hw)?;
        tape.add_bias(s, b)
    }
}

/// Single-layer LSTM. Hidden and cell states start at zero.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input: LstmGate,
    pub forget: LstmGate,
    pub cell: LstmGate,
    pub output: LstmGate,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        LstmLayer {
            input: LstmGate::init(rng, input, hidden),
            forget: LstmGate::init(rng, input, hidden),
            cell: LstmGate::init(rng, input, hidden),
            output: LstmGate::init(rng, input, hidden),
            hidden,
        }
    }

    /// Run the recurrence over pre-sliced steps, each `[batch, input]`.
    /// Returns one `[batch, hidden]` output per step.
    pub fn forward_steps(&self, tape: &mut Tape, steps: &[Var]) -> Result<Vec<Var>> {
        let batch = tape.shape(steps[0])[0];
        let mut h = tape.constant(vec![0.0; batch * self.hidden], vec![batch, self.hidden])?;
        let mut c = h;
        let mut outputs = Vec::with_capacity(steps.len());
        for &x in steps {
            let i_pre = self.input.pre_activation(tape, x, h)?;
            let f_pre = self.forget.pre_activation(tape, x, h)?;
            let g_pre = self.cell.pre_activation(tape, x, h)?;
            let o_pre = self.output.pre_activation(tape, x, h)?;
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let ct = tape.tanh(c);
            h = tape.mul(o, ct)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Full hidden-state sequence for one `[n, input]` sequence.
    pub fn forward(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let n = tape.shape(seq)[0];
        let steps: Vec<Var> = (0..n)
            .map(|i| tape.slice_rows(seq, i, 1))
            .collect::<Result<_>>()?;
        let outputs = self.forward_steps(tape, &steps)?;
        tape.concat_rows(&outputs)
    }
}

// ── Conv1D ───────────────────────────────────────────────────────────

/// Same-padded 1-D convolution, `[n, in_c] -> [n, out_c]`.
#[derive(Debug, Clone)]
pub struct Conv1D {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv1D {
    pub fn init(rng: &mut Rng, in_c: usize, out_c: usize, width: usize) -> Self {
        Conv1D {
            kernel: init_weight(rng, in_c * width, vec![out_c, in_c, width]),
            bias: zero_param(vec![out_c]),
        }
    }

    /// `seg_len` is the length of each independent sequence in `x`; zero
    /// padding never crosses a segment boundary.
    pub fn forward(&self, tape: &mut Tape, x: Var, seg_len: usize) -> Result<Var> {
        let k = tape.leaf(&self.kernel);
        let b = tape.leaf(&self.bias);
        tape.conv1d_same(x, k, b, seg_len)
    }
}

// ── Dropout ──────────────────────────────────────────────────────────

/// Inverted dropout: in train mode each unit is zeroed independently with
/// probability `rate` and survivors are rescaled by 1/(1-rate); eval mode is
/// the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        Dropout { rate }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..tape.data(x).len())
            .map(|_| if rng.uniform() < self.rate { 0.0 } else { scale })
            .collect();
        let shape = tape.shape(x).to_vec();
        let m = tape.constant(mask, shape)?;
        tape.mul(x, m)
    }
}

// ── Diffusion-step embedding ─────────────────────────────────────────

pub const STEP_EMBED_DIM: usize = 64;

/// Sinusoidal embedding of an integer diffusion step: 32 sines then 32
/// cosines at frequencies 10^(4k/31), k = 0..31, evaluated at t itself.
pub fn step_embedding(t: u32) -> Vec<f64> {
    let half = STEP_EMBED_DIM / 2;
    let mut out = vec![0.0; STEP_EMBED_DIM];
    for k in 0..half {
        let freq = 10f64.powf(4.0 * k as f64 / (half as f64 - 1.0));
        let arg = freq * t as f64;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Two dense layers, each followed by SiLU, mapping the 64-entry step
/// embedding to the hidden dimension.
#[derive(Debug, Clone)]
pub struct StepEmbedMlp {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl StepEmbedMlp {
    pub fn init(rng: &mut Rng, hidden: usize) -> Self {
        StepEmbedMlp {
            fc1: DenseLayer::init(rng, STEP_EMBED_DIM, hidden),
            fc2: DenseLayer::init(rng, hidden, hidden),
        }
    }

    /// `e: [batch, 64] -> [batch, hidden]`.
    pub fn forward(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        let h1 = self.fc1.forward(tape, e)?;
        let a1 = tape.silu(h1);
        let h2 = self.fc2.forward(tape, a1)?;
        Ok(tape.silu(h2))
    }
}

// ── Condition embedding ──────────────────────────────────────────────

/// Two 1x1 convolutions with SiLU between, lifting the scalar condition
/// channel to the hidden dimension while preserving sequence length.
#[derive(Debug, Clone)]
pub struct ConditionEmbed {
    pub conv1: Conv1D,
    pub conv2: Conv1D,
    pub seq_len: usize,
}

impl ConditionEmbed {
    pub fn init(rng: &mut Rng, hidden: usize, seq_len: usize) -> Self {
        ConditionEmbed {
            conv1: Conv1D::init(rng, 1, hidden, 1),
            conv2: Conv1D::init(rng, hidden, hidden, 1),
            seq_len,
        }
    }

    /// `c: [segments·seq_len, 1] -> [segments·seq_len, hidden]`.
    pub fn forward(&self, tape: &mut Tape, c: Var) -> Result<Var> {
        let h1 = self.conv1.forward(tape, c, self.seq_len)?;
        let a1 = tape.silu(h1);
        self.conv2.forward(tape, a1, self.seq_len)
    }
}
