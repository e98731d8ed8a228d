//! WavCoch: a causal conv encoder, a lookup-free binary bottleneck and a causal
//! conv decoder that maps DFT frames to cochleagram (or mel) predictions.
//!
//! Tensors are time-major: `[batch, frames, channels]`. Conv weights are
//! `[kernel, in, out]`.

mod tokens;
pub mod train;

use std::path::Path;

use cochstream_numerics::{Array, Scalar, SpectrumMode, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tokens::{
    codebook_stats, decode_ctok, encode_ctok, read_ctok, vocab_size, write_ctok, CochlearTokenSeq, CodebookStats,
};

use crate::audio::Waveform;
use crate::cochlea::{self, SpectralFrames, TargetKind, TfMatrix, SPECTRAL_BINS};
use crate::params::{self, CheckpointData, ParamSet};
use crate::{CoreError, Result};

pub const DEFAULT_BIT_WIDTH: u32 = 13;
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 0.001;
pub const CHECKPOINT_KIND: &str = "wavcoch";

/// Spectral features fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Magnitude,
    Complex,
}

impl InputMode {
    pub fn spectrum_mode(self) -> SpectrumMode {
        match self {
            InputMode::Magnitude => SpectrumMode::Magnitude,
            InputMode::Complex => SpectrumMode::Complex,
        }
    }

    pub fn features(self) -> usize {
        match self {
            InputMode::Magnitude => SPECTRAL_BINS,
            InputMode::Complex => 2 * SPECTRAL_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavCochConfig {
    pub enc_layers: usize,
    pub enc_channels: usize,
    pub enc_kernel: usize,
    pub dec_layers: usize,
    /// Width of the hidden decoder layers; the last layer always emits the
    /// target's row count.
    pub dec_channels: usize,
    pub dec_kernel: usize,
    pub bit_width: u32,
    #[serde(default)]
    pub input: InputMode,
    #[serde(default)]
    pub target: TargetKind,
    pub entropy_weight: f64,
    #[serde(default)]
    pub init_seed: u64,
}

impl WavCochConfig {
    /// Full-size architecture: 8 x 512-channel kernel-3 encoder, 8-layer kernel-9 decoder.
    pub fn full() -> Self {
        Self {
            enc_layers: 8,
            enc_channels: 512,
            enc_kernel: 3,
            dec_layers: 8,
            dec_channels: cochlea::COCHLEAR_CHANNELS,
            dec_kernel: 9,
            bit_width: DEFAULT_BIT_WIDTH,
            input: InputMode::Magnitude,
            target: TargetKind::Cochleagram,
            entropy_weight: DEFAULT_ENTROPY_WEIGHT,
            init_seed: 0,
        }
    }

    /// Desk-scale: two layers each side, 32 channels.
    pub fn tiny() -> Self {
        Self { enc_layers: 2, enc_channels: 32, dec_layers: 2, dec_channels: 32, ..Self::full() }
    }

    /// Two layers, eight channels: small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self { enc_layers: 2, enc_channels: 8, dec_layers: 2, dec_channels: 8, ..Self::full() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(CoreError::Invalid(format!("unknown WavCoch preset {other:?} (full|tiny|micro)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        vocab_size(self.bit_width)?;
        let positive = [
            self.enc_layers,
            self.enc_channels,
            self.enc_kernel,
            self.dec_layers,
            self.dec_channels,
            self.dec_kernel,
        ];
        if positive.contains(&0) {
            return Err(CoreError::Invalid("layer counts, widths and kernels must be positive".into()));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(CoreError::Invalid(format!("entropy weight {} must be >= 0", self.entropy_weight)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> u32 {
        1 << self.bit_width
    }

    pub fn output_rows(&self) -> usize {
        self.target.rows()
    }

    /// Frames of look-back in the encoder beyond the current one.
    pub fn encoder_receptive_field(&self) -> usize {
        self.enc_layers * (self.enc_kernel - 1)
    }

    pub fn decoder_receptive_field(&self) -> usize {
        self.dec_layers * (self.dec_kernel - 1)
    }
}

/// How gradients pass through the binarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    /// Identity backward pass (training).
    StraightThrough,
    /// Bits enter the graph as constants; nothing flows back through them.
    /// Used for finite-difference verification, where the true derivative of
    /// the sign is zero almost everywhere.
    Frozen,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct WavCochGraph {
    pub logits: Var,
    pub bits: Var,
    pub prediction: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub loss: Var,
    pub mse: Var,
    pub penalty: Var,
    pub graph: WavCochGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavCoch<T> {
    pub config: WavCochConfig,
    pub params: ParamSet<T>,
}

/// Bit vector (±1 per dimension) to code, dimension 0 least significant.
pub fn bits_to_id(bits: &[f32]) -> Result<u32> {
    vocab_size(bits.len() as u32)?;
    let mut id = 0u32;
    for (i, &b) in bits.iter().enumerate() {
        if b == 1.0 {
            id |= 1 << i;
        } else if b != -1.0 {
            return Err(CoreError::Invalid(format!("bit {i} is {b}, expected +1 or -1")));
        }
    }
    Ok(id)
}

pub fn id_to_bits(id: u32, bit_width: u32) -> Result<Vec<f32>> {
    let vocab = vocab_size(bit_width)?;
    if id >= vocab {
        return Err(CoreError::Invalid(format!("token {id} outside vocabulary of {vocab}")));
    }
    Ok((0..bit_width).map(|i| if id >> i & 1 == 1 { 1.0 } else { -1.0 }).collect())
}

/// Sign with ties to -1.
pub fn binarize(logit: f32) -> f32 {
    if logit > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Factorized entropy penalty of a `frames x bits` logit matrix, in nats.
pub fn entropy_penalty(logits: &Array<f64>) -> Result<f64> {
    if !logits.all_finite() {
        return Err(CoreError::NonFinite("entropy penalty logits".into()));
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(logits.clone());
    let h = tape.bit_entropy(x);
    Ok(tape.value(h).item())
}

/// Encoder output for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBits {
    pub frames: usize,
    pub bit_width: u32,
    /// `frames x bits`, each ±1.
    pub bits: Vec<f32>,
    /// Pre-quantization logits, `frames x bits`.
    pub logits: Vec<f32>,
}

impl EncodedBits {
    pub fn ids(&self) -> Vec<u32> {
        self.bits
            .chunks(self.bit_width as usize)
            .map(|row| bits_to_id(row).expect("binarized rows are valid"))
            .collect()
    }
}

impl<T: Scalar> WavCoch<T> {
    /// He-uniform conv/linear weights, zero biases, seeded by `config.init_seed`.
    pub fn init(config: WavCochConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamSet::default();
        let nbits = config.bit_width as usize;
        let mut cin = config.input.features();
        for l in 0..config.enc_layers {
            let (k, cout) = (config.enc_kernel, config.enc_channels);
            p.push(format!("enc.{l}.w"), params::uniform(&mut rng, &[k, cin, cout], (6.0 / (k * cin) as f64).sqrt()));
            p.push(format!("enc.{l}.b"), Array::zeros(&[cout]));
            cin = cout;
        }
        p.push("lfq.w", params::uniform(&mut rng, &[cin, nbits], (3.0 / cin as f64).sqrt()));
        p.push("lfq.b", Array::zeros(&[nbits]));
        p.push("post.w", params::uniform(&mut rng, &[nbits, config.enc_channels], (3.0 / nbits as f64).sqrt()));
        p.push("post.b", Array::zeros(&[config.enc_channels]));
        cin = config.enc_channels;
        for l in 0..config.dec_layers {
            let k = config.dec_kernel;
            let cout = if l + 1 == config.dec_layers { config.output_rows() } else { config.dec_channels };
            p.push(format!("dec.{l}.w"), params::uniform(&mut rng, &[k, cin, cout], (6.0 / (k * cin) as f64).sqrt()));
            p.push(format!("dec.{l}.b"), Array::zeros(&[cout]));
            cin = cout;
        }
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> WavCoch<U> {
        WavCoch { config: self.config.clone(), params: self.params.cast() }
    }

    fn lfq_index(&self) -> usize {
        2 * self.config.enc_layers
    }

    fn decoder_index(&self) -> usize {
        2 * self.config.enc_layers + 4
    }

    /// `frames[B, T, F] -> logits[B, T, bits]`.
    pub fn encode_on(&self, tape: &mut Tape<T>, vars: &[Var], frames: Var) -> Result<Var> {
        let mut h = frames;
        for l in 0..self.config.enc_layers {
            h = tape.conv1d_causal(h, vars[2 * l], vars[2 * l + 1])?;
            h = tape.relu(h);
        }
        let i = self.lfq_index();
        let z = tape.matmul(h, vars[i])?;
        Ok(tape.add_row(z, vars[i + 1])?)
    }

    /// `bits[B, T, bits] -> prediction[B, T, rows]`.
    pub fn decode_on(&self, tape: &mut Tape<T>, vars: &[Var], bits: Var) -> Result<Var> {
        let i = self.lfq_index() + 2;
        let h = tape.matmul(bits, vars[i])?;
        let mut h = tape.add_row(h, vars[i + 1])?;
        let d = self.decoder_index();
        for l in 0..self.config.dec_layers {
            h = tape.conv1d_causal(h, vars[d + 2 * l], vars[d + 2 * l + 1])?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], frames: Var, quantizer: Quantizer) -> Result<WavCochGraph> {
        let logits = self.encode_on(tape, vars, frames)?;
        let bits = match quantizer {
            Quantizer::StraightThrough => tape.sign_ste(logits),
            Quantizer::Frozen => {
                let b = tape.value(logits).map(|x| if x > T::zero() { T::one() } else { -T::one() });
                tape.constant(b)
            }
        };
        let prediction = self.decode_on(tape, vars, bits)?;
        Ok(WavCochGraph { logits, bits, prediction })
    }

    /// `MSE(prediction, target) + entropy_weight * penalty(logits)`.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: Var,
        target: Var,
        quantizer: Quantizer,
    ) -> Result<LossGraph> {
        let graph = self.forward_on(tape, vars, frames, quantizer)?;
        let diff = tape.sub(graph.prediction, target)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq);
        let penalty = tape.bit_entropy(graph.logits);
        let weighted = tape.scale(penalty, T::of(self.config.entropy_weight));
        let loss = tape.add(mse, weighted)?;
        Ok(LossGraph { loss, mse, penalty, graph })
    }
}

impl WavCoch<f32> {
    /// Logits and bits for one clip's spectral frames.
    pub fn encode_bits(&self, frames: &SpectralFrames) -> Result<EncodedBits> {
        let f = self.config.input.features();
        if frames.cols != f || frames.mode != self.config.input.spectrum_mode() {
            return Err(CoreError::Invalid(format!(
                "encoder expects {f} {:?} features per frame, got {} {:?}",
                self.config.input, frames.cols, frames.mode
            )));
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.params.on_tape_frozen(&mut tape);
        let x = tape.constant(Array::new(&[1, frames.frames, f], frames.values.clone())?);
        let logits = self.encode_on(&mut tape, &vars, x)?;
        let logits = tape.value(logits).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("encoder activations".into()));
        }
        let bits = logits.iter().map(|&x| binarize(x)).collect();
        Ok(EncodedBits { frames: frames.frames, bit_width: self.config.bit_width, bits, logits })
    }

    /// Decoder output (time-major) for a `frames x bits` ±1 matrix.
    fn decode_bits(&self, frames: usize, bits: Vec<f32>) -> Result<TfMatrix> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.on_tape_frozen(&mut tape);
        let b = tape.constant(Array::new(&[1, frames, self.config.bit_width as usize], bits)?);
        let pred = self.decode_on(&mut tape, &vars, b)?;
        TfMatrix::from_time_major(frames, self.config.output_rows(), tape.value(pred).data())
    }

    /// Tokens of an exact 5 s clip.
    pub fn tokenize(&self, w: &Waveform) -> Result<CochlearTokenSeq> {
        let frames = cochlea::dft_frontend(w, self.config.input.spectrum_mode())?;
        self.tokenize_frames(&frames)
    }

    /// Tokens of any signal at least one analysis window long.
    pub fn tokenize_any(&self, w: &Waveform) -> Result<CochlearTokenSeq> {
        let frames = cochlea::spectral_frames_any(w, self.config.input.spectrum_mode())?;
        self.tokenize_frames(&frames)
    }

    pub fn tokenize_frames(&self, frames: &SpectralFrames) -> Result<CochlearTokenSeq> {
        let enc = self.encode_bits(frames)?;
        CochlearTokenSeq::new(enc.ids(), self.config.bit_width)
    }

    /// Predicted target (`rows x T`) from tokens.
    pub fn detokenize(&self, seq: &CochlearTokenSeq) -> Result<TfMatrix> {
        if seq.bit_width != self.config.bit_width {
            return Err(CoreError::Invalid(format!(
                "tokens are {}-bit, model is {}-bit",
                seq.bit_width, self.config.bit_width
            )));
        }
        if seq.is_empty() {
            return Err(CoreError::Empty("token sequence".into()));
        }
        let mut bits = Vec::with_capacity(seq.len() * self.config.bit_width as usize);
        for &id in &seq.ids {
            bits.extend(id_to_bits(id, self.config.bit_width)?);
        }
        self.decode_bits(seq.len(), bits)
    }

    /// Full quantized forward pass for one clip's frames: `rows x T`.
    pub fn reconstruct(&self, frames: &SpectralFrames) -> Result<TfMatrix> {
        let enc = self.encode_bits(frames)?;
        self.decode_bits(enc.frames, enc.bits)
    }

    pub fn save(&self, path: &Path, step: u64, corpus_hash: Option<String>, extra: serde_json::Value) -> Result<String> {
        self.save_with(path, step, corpus_hash, extra, Vec::new())
    }

    pub(crate) fn save_with<'a>(
        &'a self,
        path: &Path,
        step: u64,
        corpus_hash: Option<String>,
        extra: serde_json::Value,
        more: Vec<(String, &'a Array<f32>)>,
    ) -> Result<String> {
        let mut tensors: Vec<(String, &Array<f32>)> =
            self.params.names.iter().cloned().zip(self.params.tensors.iter()).collect();
        tensors.extend(more);
        params::save_checkpoint(
            path,
            CheckpointData {
                kind: CHECKPOINT_KIND,
                config: serde_json::to_value(&self.config)?,
                step,
                corpus_hash,
                tensors,
                extra,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::load_full(path)?.0)
    }

    pub(crate) fn load_full(path: &Path) -> Result<(Self, params::LoadedCheckpoint)> {
        let mut ck = params::load_checkpoint(path, CHECKPOINT_KIND)?;
        let config: WavCochConfig = serde_json::from_value(ck.manifest.config.clone())?;
        let mut model = Self::init(config)?;
        for (name, slot) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            let t = ck.take(name)?;
            if t.shape() != slot.shape() {
                return Err(CoreError::format(
                    path,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok((model, ck))
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn params_sha256(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * self.params.num_scalars());
        for t in &self.params.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        params::sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_code_examples() {
        assert_eq!(bits_to_id(&[-1.0; 13]).unwrap(), 0);
        assert_eq!(bits_to_id(&[1.0; 13]).unwrap(), 8191);
        let mut lsb = vec![-1.0; 13];
        lsb[0] = 1.0;
        assert_eq!(bits_to_id(&lsb).unwrap(), 1);
        assert!(id_to_bits(8192, 13).is_err());
        assert!(bits_to_id(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn ties_binarize_to_minus_one() {
        assert_eq!(binarize(0.0), -1.0);
        assert_eq!(binarize(-0.0), -1.0);
        assert_eq!(binarize(2.5), 1.0);
        assert_eq!(binarize(-0.1), -1.0);
    }

    #[test]
    fn parameter_layout() {
        let m = WavCoch::<f32>::init(WavCochConfig::full()).unwrap();
        assert_eq!(m.params.len(), 2 * 8 + 4 + 2 * 8);
        assert_eq!(m.params.tensors[0].shape(), &[3, 501, 512]);
        assert_eq!(m.params.tensors[16].shape(), &[512, 13]);
        assert_eq!(m.params.tensors[18].shape(), &[13, 512]);
        assert_eq!(m.params.tensors.last().unwrap().shape(), &[211]);
        let mel = WavCoch::<f32>::init(WavCochConfig { target: TargetKind::Mel, ..WavCochConfig::micro() }).unwrap();
        assert_eq!(mel.params.tensors.last().unwrap().shape(), &[80]);
    }

    #[test]
    fn penalty_fixed_points() {
        let zero = Array::<f64>::zeros(&[10, 13]);
        assert!(entropy_penalty(&zero).unwrap().abs() < 1e-12);
        let same = Array::<f64>::full(&[10, 13], 40.0);
        assert!(entropy_penalty(&same).unwrap().abs() < 1e-12);
    }
}
