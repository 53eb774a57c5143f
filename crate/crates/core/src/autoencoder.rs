//! Encoder/decoder that predicts the next frame of a video window.
//!
//! Four stacked input frames pass through stride-2 conv blocks down to a
//! bottleneck feature map; the decoder mirrors them with transposed convs,
//! concatenating encoder activations U-Net style on the way up. The
//! decoder's first block always takes twice the bottleneck channels — the
//! prototype read-out is fused in, or the feature map is doubled with
//! itself when no prototype stage is attached.

use rand::Rng;

use crate::error::{DiffError, PipelineError};
use crate::prototype::{fuse, ProtoOut, PrototypeNet};
use crate::tape::{Session, Val};
use crate::tensor::{Element, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub in_frames: usize,
    pub frame_channels: usize,
    pub frame_size: usize,
    pub depth: usize,
    pub base_width: usize,
    pub feat_channels: usize,
    pub leaky_slope: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            in_frames: 4,
            frame_channels: 1,
            frame_size: 64,
            depth: 3,
            base_width: 16,
            feat_channels: 64,
            leaky_slope: 0.2,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.depth == 0 {
            return Err(PipelineError::config("depth must be at least 1"));
        }
        if self.frame_size % (1 << self.depth) != 0 {
            return Err(PipelineError::config(format!(
                "frame size {} not divisible by 2^{}",
                self.frame_size, self.depth
            )));
        }
        if self.in_frames == 0 || self.frame_channels == 0 || self.base_width == 0 {
            return Err(PipelineError::config("zero-sized model dimension"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(PipelineError::config("leaky slope outside [0,1)"));
        }
        Ok(())
    }

    /// Spatial side of the bottleneck feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.frame_size >> self.depth
    }

    pub fn window_channels(&self) -> usize {
        self.in_frames * self.frame_channels
    }

    fn enc_out(&self, level: usize) -> usize {
        if level + 1 == self.depth {
            self.feat_channels
        } else {
            self.base_width << level
        }
    }

    fn enc_in(&self, level: usize) -> usize {
        if level == 0 {
            self.window_channels()
        } else {
            self.enc_out(level - 1)
        }
    }

    fn dec_out(&self, level: usize) -> usize {
        if level + 1 == self.depth {
            self.frame_channels
        } else {
            self.base_width << (self.depth - 2 - level)
        }
    }

    fn dec_in(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.feat_channels
        } else {
            // previous output plus the same-size encoder skip
            2 * self.dec_out(level - 1)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

/// Trainable predictor state. Holds parameter handles; values live in the
/// shared store.
#[derive(Clone, Debug)]
pub struct AeState {
    pub cfg: AeConfig,
    enc: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
}

/// All stride-2 resampling convs use 4x4 kernels with pad 1: the only
/// symmetric-pad geometry that halves/doubles even sizes exactly.
const RESAMPLE_K: usize = 4;
const RESAMPLE_PAD: usize = 1;
const RESAMPLE_STRIDE: usize = 2;

fn uniform_fan_in<E: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-bound..bound)))
}

impl AeState {
    /// Fresh parameters: kernels from a centered uniform with fan-in
    /// scaling, biases zero.
    pub fn init<E: Element>(
        cfg: AeConfig,
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let (ci, co) = (cfg.enc_in(i), cfg.enc_out(i));
            let fan_in = ci * RESAMPLE_K * RESAMPLE_K;
            let kernel = store.register(
                format!("ae.enc{i}.kernel"),
                uniform_fan_in(&[co, ci, RESAMPLE_K, RESAMPLE_K], fan_in, rng),
            );
            let bias = store.register(format!("ae.enc{i}.bias"), Tensor::zeros(&[co]));
            enc.push(ConvLayer { kernel, bias });
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let (ci, co) = (cfg.dec_in(i), cfg.dec_out(i));
            let fan_in = ci * RESAMPLE_K * RESAMPLE_K;
            let kernel = store.register(
                format!("ae.dec{i}.kernel"),
                uniform_fan_in(&[ci, co, RESAMPLE_K, RESAMPLE_K], fan_in, rng),
            );
            let bias = store.register(format!("ae.dec{i}.bias"), Tensor::zeros(&[co]));
            dec.push(ConvLayer { kernel, bias });
        }
        Ok(Self { cfg, enc, dec })
    }

    /// Rebuilds parameter handles from a store loaded from a checkpoint.
    pub fn from_store<E: Element>(
        cfg: AeConfig,
        store: &ParamStore<E>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let lookup = |name: String| {
            store
                .id_of(&name)
                .ok_or_else(|| PipelineError::config(format!("checkpoint lacks parameter {name}")))
        };
        let mut enc = Vec::new();
        for i in 0..cfg.depth {
            enc.push(ConvLayer {
                kernel: lookup(format!("ae.enc{i}.kernel"))?,
                bias: lookup(format!("ae.enc{i}.bias"))?,
            });
        }
        let mut dec = Vec::new();
        for i in 0..cfg.depth {
            dec.push(ConvLayer {
                kernel: lookup(format!("ae.dec{i}.kernel"))?,
                bias: lookup(format!("ae.dec{i}.bias"))?,
            });
        }
        Ok(Self { cfg, enc, dec })
    }

    /// Encodes a frame window to the bottleneck feature map plus the
    /// encoder activations (shallow to deep) used as skip connections.
    pub fn encode<E: Element>(
        &self,
        sess: &mut Session<E>,
        window: Val,
    ) -> Result<(Val, Vec<Val>), DiffError> {
        let shape = sess.tape.value(window).shape().to_vec();
        let want = [self.cfg.window_channels(), self.cfg.frame_size, self.cfg.frame_size];
        if shape != want {
            return Err(DiffError::dim(
                "encode",
                format!("window shape {shape:?}, config expects {want:?}"),
            ));
        }
        let mut x = window;
        let mut taps = Vec::with_capacity(self.cfg.depth);
        for layer in &self.enc {
            let k = sess.param(layer.kernel);
            let b = sess.param(layer.bias);
            let y = sess.tape.conv2d(x, k, RESAMPLE_STRIDE, RESAMPLE_PAD)?;
            let y = sess.tape.bias_channels(y, b)?;
            x = sess.tape.leaky_relu(y, self.cfg.leaky_slope)?;
            taps.push(x);
        }
        let feature_map = taps.pop().expect("depth >= 1");
        Ok((feature_map, taps))
    }

    /// Decodes the fused bottleneck back to a single frame in (-1, 1).
    pub fn decode<E: Element>(
        &self,
        sess: &mut Session<E>,
        fused: Val,
        skips: &[Val],
    ) -> Result<Val, DiffError> {
        let ch = sess.tape.value(fused).dims3("decode")?.0;
        if ch != 2 * self.cfg.feat_channels {
            return Err(DiffError::dim(
                "decode",
                format!("fused input has {ch} channels, expected {}", 2 * self.cfg.feat_channels),
            ));
        }
        if skips.len() != self.cfg.depth - 1 {
            return Err(DiffError::dim(
                "decode",
                format!("{} skips for depth {}", skips.len(), self.cfg.depth),
            ));
        }
        let mut x = fused;
        for (i, layer) in self.dec.iter().enumerate() {
            let k = sess.param(layer.kernel);
            let b = sess.param(layer.bias);
            let y = sess.tape.deconv2d(x, k, RESAMPLE_STRIDE, RESAMPLE_PAD)?;
            let y = sess.tape.bias_channels(y, b)?;
            if i + 1 == self.cfg.depth {
                x = sess.tape.tanh(y);
            } else {
                let act = sess.tape.leaky_relu(y, self.cfg.leaky_slope)?;
                // encoder level depth-2-i produced the matching resolution
                x = sess.tape.channel_concat(act, skips[self.cfg.depth - 2 - i])?;
            }
        }
        Ok(x)
    }
}

/// Outputs of one prediction pass.
pub struct PredictOut {
    pub prediction: Val,
    pub feature_map: Val,
    /// `(N, D)` site view of the feature map (present when a prototype
    /// stage ran).
    pub sites: Option<Val>,
    pub proto: Option<ProtoOut>,
}

/// Window to predicted-frame pass. Without a prototype net the feature map
/// is fused with itself so the decoder arity stays fixed.
pub fn predict<E: Element>(
    sess: &mut Session<E>,
    window: Val,
    ae: &AeState,
    proto: Option<&PrototypeNet>,
) -> Result<PredictOut, DiffError> {
    let (feature_map, skips) = ae.encode(sess, window)?;
    let (fused, sites, proto_out) = match proto {
        None => (fuse(sess, feature_map, feature_map)?, None, None),
        Some(net) => {
            let (sites, out) = net.forward(sess, feature_map)?;
            (fuse(sess, feature_map, out.p_tilde)?, Some(sites), Some(out))
        }
    };
    let prediction = ae.decode(sess, fused, &skips)?;
    Ok(PredictOut { prediction, feature_map, sites, proto: proto_out })
}
