//! The face-voice association network: two linear projections into a shared
//! latent space, an attention-gated fusion module, and a linear identity
//! classifier. Unimodal encoders are out of scope; features arrive
//! pre-extracted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_face_dim")]
    pub face_dim: usize,
    #[serde(default = "default_voice_dim")]
    pub voice_dim: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub num_identities: usize,
    /// Width of the fusion convolution kernel; must be odd.
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_face_dim() -> usize {
    4096
}
fn default_voice_dim() -> usize {
    512
}
fn default_latent_dim() -> usize {
    128
}
fn default_conv_kernel() -> usize {
    1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.face_dim == 0
            || self.voice_dim == 0
            || self.latent_dim == 0
            || self.num_identities == 0
        {
            return Err(Error::InvalidArgument(
                "model dimensions must all be at least 1".into(),
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// All learnable weights. Tensor layouts follow the out x in convention,
/// so a projection applies as `x . W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfopParams<S> {
    pub w_face: Tensor<S>,
    pub b_face: Tensor<S>,
    pub w_voice: Tensor<S>,
    pub b_voice: Tensor<S>,
    pub fusion_kernel: Tensor<S>,
    pub fusion_bias: Tensor<S>,
    pub w_cls: Tensor<S>,
    pub b_cls: Tensor<S>,
}

/// Canonical parameter order used by the optimizer and the checkpoint format.
pub const PARAM_NAMES: [&str; 8] = [
    "w_face",
    "b_face",
    "w_voice",
    "b_voice",
    "fusion_kernel",
    "fusion_bias",
    "w_cls",
    "b_cls",
];

impl<S: Scalar> RfopParams<S> {
    /// Weights drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with the
    /// seeded generator; biases start at zero. Same seed, same params.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.latent_dim;
        let w_face = uniform_matrix(&mut rng, d, cfg.face_dim, cfg.face_dim);
        let w_voice = uniform_matrix(&mut rng, d, cfg.voice_dim, cfg.voice_dim);
        let fusion_kernel = uniform_matrix(&mut rng, 2, cfg.conv_kernel, 2 * cfg.conv_kernel);
        let w_cls = uniform_matrix(&mut rng, cfg.num_identities, d, d);
        let mut params = RfopParams {
            w_face,
            b_face: Tensor::zeros(vec![d]),
            w_voice,
            b_voice: Tensor::zeros(vec![d]),
            fusion_kernel,
            fusion_bias: Tensor::scalar(S::zero()),
            w_cls,
            b_cls: Tensor::zeros(vec![cfg.num_identities]),
        };
        for (_, t) in params.tensors_mut() {
            t.set_requires_grad(true);
        }
        Ok(params)
    }

    pub fn from_parts(tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor<S>> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let params = RfopParams {
            w_face: take("w_face")?,
            b_face: take("b_face")?,
            w_voice: take("w_voice")?,
            b_voice: take("b_voice")?,
            fusion_kernel: take("fusion_kernel")?,
            fusion_bias: take("fusion_bias")?,
            w_cls: take("w_cls")?,
            b_cls: take("b_cls")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter `{extra}`")));
        }
        params.validate_shapes()?;
        Ok(params)
    }

    fn validate_shapes(&self) -> Result<()> {
        let d = self.latent_dim();
        let consistent = self.w_face.shape().len() == 2
            && self.w_voice.shape() == [d, self.voice_dim()]
            && self.b_face.shape() == [d]
            && self.b_voice.shape() == [d]
            && self.fusion_kernel.shape().len() == 2
            && self.fusion_kernel.shape()[0] == 2
            && self.fusion_kernel.shape()[1] % 2 == 1
            && self.fusion_bias.numel() == 1
            && self.w_cls.shape() == [self.num_identities(), d]
            && self.b_cls.shape() == [self.num_identities()];
        if !consistent {
            return Err(Error::Checkpoint(
                "parameter shapes are mutually inconsistent".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.w_face.shape()[0]
    }

    pub fn face_dim(&self) -> usize {
        self.w_face.shape()[1]
    }

    pub fn voice_dim(&self) -> usize {
        self.w_voice.shape()[1]
    }

    pub fn num_identities(&self) -> usize {
        self.w_cls.shape()[0]
    }

    pub fn conv_kernel(&self) -> usize {
        self.fusion_kernel.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w_face", &self.w_face),
            ("b_face", &self.b_face),
            ("w_voice", &self.w_voice),
            ("b_voice", &self.b_voice),
            ("fusion_kernel", &self.fusion_kernel),
            ("fusion_bias", &self.fusion_bias),
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("w_face", &mut self.w_face),
            ("b_face", &mut self.b_face),
            ("w_voice", &mut self.w_voice),
            ("b_voice", &mut self.b_voice),
            ("fusion_kernel", &mut self.fusion_kernel),
            ("fusion_bias", &mut self.fusion_bias),
            ("w_cls", &mut self.w_cls),
            ("b_cls", &mut self.b_cls),
        ]
    }

    /// Places every parameter on the tape, keyed for later gradient reads.
    pub fn bind(&self, tape: &mut Tape<S>) -> ParamVars {
        ParamVars {
            w_face: tape.leaf(&self.w_face),
            b_face: tape.leaf(&self.b_face),
            w_voice: tape.leaf(&self.w_voice),
            b_voice: tape.leaf(&self.b_voice),
            fusion_kernel: tape.leaf(&self.fusion_kernel),
            fusion_bias: tape.leaf(&self.fusion_bias),
            w_cls: tape.leaf(&self.w_cls),
            b_cls: tape.leaf(&self.b_cls),
        }
    }
}

fn uniform_matrix<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<S> = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random();
            S::from_f64(-bound + u * 2.0 * bound)
        })
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("shape matches data by construction")
}

/// Tape handles for the bound parameters of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w_face: Var,
    pub b_face: Var,
    pub w_voice: Var,
    pub b_voice: Var,
    pub fusion_kernel: Var,
    pub fusion_bias: Var,
    pub w_cls: Var,
    pub b_cls: Var,
}

impl ParamVars {
    pub fn in_order(&self) -> [Var; 8] {
        [
            self.w_face,
            self.b_face,
            self.w_voice,
            self.b_voice,
            self.fusion_kernel,
            self.fusion_bias,
            self.w_cls,
            self.b_cls,
        ]
    }
}

/// The two aligned latent embeddings of a batch.
#[derive(Debug, Clone, Copy)]
pub struct LatentPair {
    pub face: Var,
    pub voice: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub latent: LatentPair,
    /// Per-dimension gates in (0,1) shared by both modalities.
    pub attention: Var,
    pub fused: Var,
    pub logits: Var,
}

/// Projects both modalities into the shared latent space:
/// `X = feats . W^T + b` per modality.
pub fn project<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    face_feats: Var,
    voice_feats: Var,
) -> Result<LatentPair> {
    let wf_t = tape.transpose(params.w_face)?;
    let xf = tape.matmul(face_feats, wf_t)?;
    let face = tape.add_bias(xf, params.b_face)?;
    let wv_t = tape.transpose(params.w_voice)?;
    let xv = tape.matmul(voice_feats, wv_t)?;
    let voice = tape.add_bias(xv, params.b_voice)?;
    Ok(LatentPair { face, voice })
}

/// Attention-gated fusion: w = sigmoid(tanh(Xf) + tanh(Xv)) gates both
/// embeddings, which are then concatenated as channels and mixed by the
/// convolution back down to one d-dimensional embedding.
pub fn fuse<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    latent: &LatentPair,
) -> Result<(Var, Var)> {
    let tf = tape.tanh(latent.face);
    let tv = tape.tanh(latent.voice);
    let pre = tape.add(tf, tv)?;
    let attention = tape.sigmoid(pre);
    let gated_face = tape.mul(attention, latent.face)?;
    let gated_voice = tape.mul(attention, latent.voice)?;
    let stacked = tape.concat_channels(gated_face, gated_voice)?;
    let fused = tape.conv1d_mix(stacked, params.fusion_kernel, params.fusion_bias)?;
    Ok((attention, fused))
}

/// Linear identity head over the fused embedding. Probabilities are only
/// ever formed inside the cross-entropy loss.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, params: &ParamVars, fused: Var) -> Result<Var> {
    let wc_t = tape.transpose(params.w_cls)?;
    let logits = tape.matmul(fused, wc_t)?;
    tape.add_bias(logits, params.b_cls)
}

/// project -> fuse -> classify, exposing every intermediate the losses need.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    face_feats: Var,
    voice_feats: Var,
) -> Result<ForwardOut> {
    let latent = project(tape, params, face_feats, voice_feats)?;
    let (attention, fused) = fuse(tape, params, &latent)?;
    let logits = classify(tape, params, fused)?;
    Ok(ForwardOut {
        latent,
        attention,
        fused,
        logits,
    })
}
