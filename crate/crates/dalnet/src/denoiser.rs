//! The denoising network: input projection, LSTM backbone, diffusion-step
//! and condition embeddings fused additively, the temporal multi-scale
//! attention block, and a two-layer convolutional head producing the noise
//! prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    tmsab_forward, AttentionError, AttentionMask, HeadConfig, MaskKind, TemporalAttentionParams,
};
use crate::diffusion::{DiffusionError, NoisePredictor, Result as DiffResult};
use crate::layers::{step_embedding, ConditionEmbed, Conv1D, DenseLayer, Dropout, LstmLayer, Mode,
    StepEmbedMlp, STEP_EMBED_DIM};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Everything needed to rebuild the network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Hidden dimension H shared by the LSTM, embeddings, and attention.
    pub hidden: usize,
    /// Points per day curve.
    pub seq_len: usize,
    /// Diffusion steps the model is trained for.
    pub t_max: usize,
    /// Per-head attention masks; the per-head model dimension is
    /// hidden / heads.len().
    pub heads: Vec<MaskKind>,
    /// Feature dimension of the temporal attention projection.
    pub temporal_dim: usize,
    pub dropout: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            hidden: 128,
            seq_len: 24,
            t_max: 1000,
            heads: vec![
                MaskKind::Global,
                MaskKind::Window { w: 3 },
                MaskKind::Window { w: 6 },
                MaskKind::Dilated { w: 3, d: 1 },
            ],
            temporal_dim: 32,
            dropout: 0.3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        if self.hidden == 0 || self.seq_len == 0 || self.temporal_dim == 0 {
            return Err(ModelError::InvalidHyperparams(
                "hidden, seq_len, and temporal_dim must be positive".into(),
            ));
        }
        if self.t_max < 2 {
            return Err(ModelError::InvalidHyperparams("t_max must be at least 2".into()));
        }
        if self.heads.is_empty() {
            return Err(ModelError::InvalidHyperparams("at least one attention head".into()));
        }
        if self.hidden % self.heads.len() != 0 {
            return Err(ModelError::InvalidHyperparams(format!(
                "hidden {} not divisible by head count {}",
                self.hidden,
                self.heads.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidHyperparams("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// The learnable denoiser.
#[derive(Debug, Clone)]
pub struct DalnetModel {
    hp: Hyperparams,
    seed: u64,
    input_proj: DenseLayer,
    lstm: LstmLayer,
    step_mlp: StepEmbedMlp,
    cond_embed: ConditionEmbed,
    attn: HeadConfig,
    temporal: TemporalAttentionParams,
    conv_head1: Conv1D,
    conv_head2: Conv1D,
    dropout: Dropout,
}

const INIT_STREAM: u64 = 0x494e_4954;

impl DalnetModel {
    pub fn init(hp: Hyperparams, seed: u64) -> std::result::Result<Self, ModelError> {
        hp.validate()?;
        let mut rng = Rng::new(seed).derive(INIT_STREAM);
        let h = hp.hidden;
        let masks: Vec<AttentionMask> = hp
            .heads
            .iter()
            .map(|&kind| AttentionMask::build(kind, hp.seq_len))
            .collect::<std::result::Result<_, _>>()?;
        Ok(DalnetModel {
            input_proj: DenseLayer::init(&mut rng, 1, h),
            lstm: LstmLayer::init(&mut rng, h, h),
            step_mlp: StepEmbedMlp::init(&mut rng, h),
            cond_embed: ConditionEmbed::init(&mut rng, h, hp.seq_len),
            attn: HeadConfig::init(&mut rng, h, &masks)?,
            temporal: TemporalAttentionParams::init(&mut rng, h, hp.temporal_dim),
            conv_head1: Conv1D::init(&mut rng, h, h, 3),
            conv_head2: Conv1D::init(&mut rng, h, 1, 3),
            dropout: Dropout::new(hp.dropout),
            hp,
            seed,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All parameters in a stable order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("input_proj.weight".into(), &self.input_proj.weight));
        out.push(("input_proj.bias".into(), &self.input_proj.bias));
        for (gate_name, gate) in [
            ("input", &self.lstm.input),
            ("forget", &self.lstm.forget),
            ("cell", &self.lstm.cell),
            ("output", &self.lstm.output),
        ] {
            out.push((format!("lstm.{gate_name}.w_x"), &gate.w_x));
            out.push((format!("lstm.{gate_name}.w_h"), &gate.w_h));
            out.push((format!("lstm.{gate_name}.bias"), &gate.bias));
        }
        out.push(("step_mlp.fc1.weight".into(), &self.step_mlp.fc1.weight));
        out.push(("step_mlp.fc1.bias".into(), &self.step_mlp.fc1.bias));
        out.push(("step_mlp.fc2.weight".into(), &self.step_mlp.fc2.weight));
        out.push(("step_mlp.fc2.bias".into(), &self.step_mlp.fc2.bias));
        out.push(("cond_embed.conv1.kernel".into(), &self.cond_embed.conv1.kernel));
        out.push(("cond_embed.conv1.bias".into(), &self.cond_embed.conv1.bias));
        out.push(("cond_embed.conv2.kernel".into(), &self.cond_embed.conv2.kernel));
        out.push(("cond_embed.conv2.bias".into(), &self.cond_embed.conv2.bias));
        for (i, head) in self.attn.heads.iter().enumerate() {
            out.push((format!("attn.head{i}.w_q"), &head.w_q));
            out.push((format!("attn.head{i}.w_k"), &head.w_k));
            out.push((format!("attn.head{i}.w_v"), &head.w_v));
        }
        out.push(("attn.w_o".into(), &self.attn.w_o));
        out.push(("temporal.w_t".into(), &self.temporal.w_t));
        out.push(("temporal.w_l".into(), &self.temporal.w_l));
        out.push(("conv_head1.kernel".into(), &self.conv_head1.kernel));
        out.push(("conv_head1.bias".into(), &self.conv_head1.bias));
        out.push(("conv_head2.kernel".into(), &self.conv_head2.kernel));
        out.push(("conv_head2.bias".into(), &self.conv_head2.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("input_proj.weight".into(), &mut self.input_proj.weight));
        out.push(("input_proj.bias".into(), &mut self.input_proj.bias));
        for (gate_name, gate) in [
            ("input", &mut self.lstm.input),
            ("forget", &mut self.lstm.forget),
            ("cell", &mut self.lstm.cell),
            ("output", &mut self.lstm.output),
        ] {
            out.push((format!("lstm.{gate_name}.w_x"), &mut gate.w_x));
            out.push((format!("lstm.{gate_name}.w_h"), &mut gate.w_h));
            out.push((format!("lstm.{gate_name}.bias"), &mut gate.bias));
        }
        out.push(("step_mlp.fc1.weight".into(), &mut self.step_mlp.fc1.weight));
        out.push(("step_mlp.fc1.bias".into(), &mut self.step_mlp.fc1.bias));
        out.push(("step_mlp.fc2.weight".into(), &mut self.step_mlp.fc2.weight));
        out.push(("step_mlp.fc2.bias".into(), &mut self.step_mlp.fc2.bias));
        out.push(("cond_embed.conv1.kernel".into(), &mut self.cond_embed.conv1.kernel));
        out.push(("cond_embed.conv1.bias".into(), &mut self.cond_embed.conv1.bias));
        out.push(("cond_embed.conv2.kernel".into(), &mut self.cond_embed.conv2.kernel));
        out.push(("cond_embed.conv2.bias".into(), &mut self.cond_embed.conv2.bias));
        for (i, head) in self.attn.heads.iter_mut().enumerate() {
            out.push((format!("attn.head{i}.w_q"), &mut head.w_q));
            out.push((format!("attn.head{i}.w_k"), &mut head.w_k));
            out.push((format!("attn.head{i}.w_v"), &mut head.w_v));
        }
        out.push(("attn.w_o".into(), &mut self.attn.w_o));
        out.push(("temporal.w_t".into(), &mut self.temporal.w_t));
        out.push(("temporal.w_l".into(), &mut self.temporal.w_l));
        out.push(("conv_head1.kernel".into(), &mut self.conv_head1.kernel));
        out.push(("conv_head1.bias".into(), &mut self.conv_head1.bias));
        out.push(("conv_head2.kernel".into(), &mut self.conv_head2.kernel));
        out.push(("conv_head2.bias".into(), &mut self.conv_head2.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Single-curve noise prediction in eval mode.
    pub fn predict_noise(&self, xt: &[f64], cond: &[f64], t: u32) -> DiffResult<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let out = self.predict_batch(&mut tape, xt, cond, &[t], Mode::Eval, &mut rng)?;
        Ok(tape.data(out).to_vec())
    }
}

impl NoisePredictor for DalnetModel {
    fn seq_len(&self) -> usize {
        self.hp.seq_len
    }

    fn t_max(&self) -> usize {
        self.hp.t_max
    }

    fn predict_batch(
        &self,
        tape: &mut Tape,
        xt: &[f64],
        cond: &[f64],
        t: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> DiffResult<Var> {
        let n = self.hp.seq_len;
        let b = t.len();
        if b == 0 || xt.len() != b * n || cond.len() != b * n {
            return Err(DiffusionError::BadBatch(format!(
                "expected {b} x {n} values in xt/cond, got {} and {}",
                xt.len(),
                cond.len()
            )));
        }
        for &tb in t {
            if tb == 0 || tb as usize > self.hp.t_max {
                return Err(DiffusionError::StepOutOfRange {
                    t: tb as usize,
                    t_max: self.hp.t_max,
                });
            }
        }

        // Scalar load values projected to H per position.
        let xt_col = tape.constant(xt.to_vec(), vec![b * n, 1])?;
        let proj = self.input_proj.forward(tape, xt_col)?;

        // LSTM is batched per step: gather all items' position-p rows.
        let steps: Vec<Var> = (0..n)
            .map(|pos| tape.gather_rows(proj, (0..b).map(|bi| bi * n + pos).collect()))
            .collect::<crate::tensor::Result<_>>()?;
        let hs = self.lstm.forward_steps(tape, &steps)?;
        let h_nmajor = tape.concat_rows(&hs)?;
        // back to item-major rows: row b·n+p comes from p·b+b.
        let to_item_major: Vec<usize> =
            (0..b * n).map(|i| (i % n) * b + i / n).collect();
        let h_all = tape.gather_rows(h_nmajor, to_item_major)?;
        let h_all = self.dropout.apply(tape, h_all, mode, rng)?;

        // Diffusion-step embedding, broadcast to every position of its item.
        let mut emb = Vec::with_capacity(b * STEP_EMBED_DIM);
        for &tb in t {
            emb.extend_from_slice(&step_embedding(tb));
        }
        let emb = tape.constant(emb, vec![b, STEP_EMBED_DIM])?;
        let temb = self.step_mlp.forward(tape, emb)?;
        let temb_full = tape.gather_rows(temb, (0..b * n).map(|i| i / n).collect())?;

        // Condition embedding per position.
        let cond_col = tape.constant(cond.to_vec(), vec![b * n, 1])?;
        let cemb = self.cond_embed.forward(tape, cond_col)?;

        let fused = tape.add(h_all, temb_full)?;
        let fused = tape.add(fused, cemb)?;

        // Attention is per sequence.
        let att_items: Vec<Var> = (0..b)
            .map(|bi| {
                let item = tape.slice_rows(fused, bi * n, n)?;
                tmsab_forward(tape, item, &self.attn, &self.temporal)
            })
            .collect::<crate::attention::Result<_>>()?;
        let att = tape.concat_rows(&att_items)?;
        let att = self.dropout.apply(tape, att, mode, rng)?;

        let c1 = self.conv_head1.forward(tape, att, n)?;
        let a1 = tape.silu(c1);
        Ok(self.conv_head2.forward(tape, a1, n)?)
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("shape disagreement for '{name}': file has {file:?}, model expects {expected:?}")]
    ShapeDisagreement { name: String, file: Vec<usize>, expected: Vec<usize> },
    #[error("invalid checkpoint contents: {0}")]
    BadContents(String),
}

const MAGIC: &[u8; 4] = b"DLNC";
const VERSION: u32 = 1;

fn mask_code(kind: MaskKind) -> (u8, u32, u32) {
    match kind {
        MaskKind::Global => (0, 0, 0),
        MaskKind::Window { w } => (1, w as u32, 0),
        MaskKind::Dilated { w, d } => (2, w as u32, d as u32),
    }
}

fn mask_from_code(code: u8, w: u32, d: u32) -> Result<MaskKind, CheckpointError> {
    match code {
        0 => Ok(MaskKind::Global),
        1 => Ok(MaskKind::Window { w: w as usize }),
        2 => Ok(MaskKind::Dilated { w: w as usize, d: d as usize }),
        other => Err(CheckpointError::Corrupt(format!("unknown mask code {other}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated file".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize the model: magic, version, init seed, hyperparameter block,
/// then every named parameter with its shape and little-endian f64 data.
pub fn save_checkpoint(model: &DalnetModel, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    let hp = &model.hp;
    buf.extend_from_slice(&(hp.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(hp.seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(hp.t_max as u32).to_le_bytes());
    buf.extend_from_slice(&(hp.temporal_dim as u32).to_le_bytes());
    buf.extend_from_slice(&hp.dropout.to_le_bytes());
    buf.extend_from_slice(&(hp.heads.len() as u32).to_le_bytes());
    for &kind in &hp.heads {
        let (code, w, d) = mask_code(kind);
        buf.push(code);
        buf.extend_from_slice(&w.to_le_bytes());
        buf.extend_from_slice(&d.to_le_bytes());
    }
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(p.shape().len() as u8);
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Parameter shapes in the file are
/// validated against the shapes implied by the stored hyperparameters.
pub fn load_checkpoint(path: &Path) -> Result<DalnetModel, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let seed = r.u64()?;
    let hidden = r.u32()? as usize;
    let seq_len = r.u32()? as usize;
    let t_max = r.u32()? as usize;
    let temporal_dim = r.u32()? as usize;
    let dropout = r.f64()?;
    let head_count = r.u32()? as usize;
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let code = r.u8()?;
        let w = r.u32()?;
        let d = r.u32()?;
        heads.push(mask_from_code(code, w, d)?);
    }
    let hp = Hyperparams { hidden, seq_len, t_max, heads, temporal_dim, dropout };
    let mut model = DalnetModel::init(hp, seed)
        .map_err(|e| CheckpointError::BadContents(e.to_string()))?;

    let param_count = r.u32()? as usize;
    let expected = model.param_count();
    let mut loaded = 0usize;
    for _ in 0..param_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let mut params = model.params_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown parameter '{name}'")))?;
        if slot.1.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeDisagreement {
                name,
                file: shape,
                expected: slot.1.shape().to_vec(),
            });
        }
        slot.1.data_mut().copy_from_slice(&data);
        loaded += data.len();
    }
    if loaded != expected {
        return Err(CheckpointError::Corrupt(format!(
            "file supplies {loaded} parameter values, model has {expected}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(model)
}
