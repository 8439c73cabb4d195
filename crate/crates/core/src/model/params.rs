use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sim::{TT_BINS, WINDOW_BUCKETS};
use crate::tensor::{Tape, Tensor, Var};

/// Channels of the multivariate series fed to the CNN modules.
pub const MTS_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// All four modules; secondary inputs chain from the GAT outputs at inference.
    Mtdt,
    /// CNN modules only, always fed ground-truth ext/inf.
    Moe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub conv_channels: [usize; 3],
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::Mtdt, hidden: 64, conv_channels: [16, 32, 32], kernel: 5 }
    }
}

impl ModelConfig {
    /// Length of one channel after the three conv + pool stages.
    pub fn cnn_out_len(&self) -> Result<usize> {
        let mut len = WINDOW_BUCKETS;
        for _ in 0..3 {
            if len < self.kernel + 1 {
                return Err(config_err!("kernel {} too large for the conv stack", self.kernel));
            }
            len = (len - self.kernel).div_ceil(2);
        }
        if len == 0 {
            return Err(config_err!("conv stack leaves no features"));
        }
        Ok(len)
    }

    pub fn flatten_len(&self) -> Result<usize> {
        Ok(self.cnn_out_len()? * self.conv_channels[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.kernel == 0 || self.conv_channels.contains(&0) {
            return Err(config_err!("model widths must be positive"));
        }
        self.flatten_len().map(|_| ())
    }
}

fn he<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

/// Graph attention module. `pre_w` maps one node's length-w series to the
/// hidden width (stored w×hidden, applied as `X · pre_w`). The attention
/// vector is kept as its source and target halves.
#[derive(Clone, Debug, PartialEq)]
pub struct GatModuleParams {
    pub pre_w: Tensor,
    pub pre_b: Tensor,
    pub att_src: Tensor,
    pub att_dst: Tensor,
    pub z_w: Tensor,
    pub z_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const GAT_PARAM_NAMES: [&str; 8] = ["pre_w", "pre_b", "att_src", "att_dst", "z_w", "z_b", "out_w", "out_b"];

impl GatModuleParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize, z_len: usize) -> Self {
        let w = WINDOW_BUCKETS;
        Self {
            pre_w: he(rng, &[w, hidden], w),
            pre_b: Tensor::full(&[hidden], 0.01),
            att_src: he(rng, &[hidden, 1], hidden),
            att_dst: he(rng, &[hidden, 1], hidden),
            z_w: he(rng, &[z_len, hidden], z_len),
            z_b: Tensor::zeros(&[hidden]),
            out_w: he(rng, &[hidden, w], hidden),
            out_b: Tensor::full(&[w], 0.01),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.pre_w, &self.pre_b, &self.att_src, &self.att_dst, &self.z_w, &self.z_b, &self.out_w, &self.out_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.pre_w,
            &mut self.pre_b,
            &mut self.att_src,
            &mut self.att_dst,
            &mut self.z_w,
            &mut self.z_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GatVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| put(tape, t, trainable)).collect();
        GatVars { pre_w: v[0], pre_b: v[1], att_src: v[2], att_dst: v[3], z_w: v[4], z_b: v[5], out_w: v[6], out_b: v[7] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub pre_w: Var,
    pub pre_b: Var,
    pub att_src: Var,
    pub att_dst: Var,
    pub z_w: Var,
    pub z_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Three conv1d stages (kernels c_out×c_in×k with biases) and a linear head
/// from the flattened features (stored flat×out).
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModuleParams {
    pub conv: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub lin_w: Tensor,
    pub lin_b: Tensor,
}

pub const CNN_PARAM_NAMES: [&str; 8] = ["conv1", "conv2", "conv3", "conv1_b", "conv2_b", "conv3_b", "lin_w", "lin_b"];

impl CnnModuleParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, out_len: usize) -> Result<Self> {
        let flat = config.flatten_len()?;
        let k = config.kernel;
        let [c1, c2, c3] = config.conv_channels;
        let conv = [
            he(rng, &[c1, MTS_CHANNELS, k], MTS_CHANNELS * k),
            he(rng, &[c2, c1, k], c1 * k),
            he(rng, &[c3, c2, k], c2 * k),
        ];
        Ok(Self {
            conv,
            conv_b: [Tensor::zeros(&[c1]), Tensor::zeros(&[c2]), Tensor::zeros(&[c3])],
            lin_w: he(rng, &[flat, out_len], flat),
            lin_b: Tensor::zeros(&[out_len]),
        })
    }

    pub fn out_len(&self) -> usize {
        self.lin_b.len()
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        let [a, b, c] = &self.conv;
        let [ab, bb, cb] = &self.conv_b;
        [a, b, c, ab, bb, cb, &self.lin_w, &self.lin_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        let [a, b, c] = &mut self.conv;
        let [ab, bb, cb] = &mut self.conv_b;
        [a, b, c, ab, bb, cb, &mut self.lin_w, &mut self.lin_b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CnnVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| put(tape, t, trainable)).collect();
        CnnVars { conv: [v[0], v[1], v[2]], conv_b: [v[3], v[4], v[5]], lin_w: v[6], lin_b: v[7] }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CnnVars {
    pub conv: [Var; 3],
    pub conv_b: [Var; 3],
    pub lin_w: Var,
    pub lin_b: Var,
}

fn put(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// All learnable tensors of a model. The GAT modules are absent for the MOE variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub gat_ext: Option<GatModuleParams>,
    pub gat_inf: Option<GatModuleParams>,
    pub cnn_ql: CnnModuleParams,
    pub cnn_tt: CnnModuleParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub gat_ext: Option<GatVars>,
    pub gat_inf: Option<GatVars>,
    pub cnn_ql: CnnVars,
    pub cnn_tt: CnnVars,
}

impl ModelParameters {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig, z_len: usize) -> Result<Self> {
        config.validate()?;
        let (gat_ext, gat_inf) = match config.variant {
            Variant::Mtdt => (
                Some(GatModuleParams::init(rng, config.hidden, z_len)),
                Some(GatModuleParams::init(rng, config.hidden, z_len)),
            ),
            Variant::Moe => (None, None),
        };
        Ok(Self {
            gat_ext,
            gat_inf,
            cnn_ql: CnnModuleParams::init(rng, config, WINDOW_BUCKETS)?,
            cnn_tt: CnnModuleParams::init(rng, config, TT_BINS)?,
        })
    }

    /// Every tensor with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (module, gat) in [("gat_ext", &self.gat_ext), ("gat_inf", &self.gat_inf)] {
            if let Some(g) = gat {
                out.extend(GAT_PARAM_NAMES.iter().zip(g.tensors()).map(|(n, t)| (format!("{module}.{n}"), t)));
            }
        }
        for (module, cnn) in [("cnn_ql", &self.cnn_ql), ("cnn_tt", &self.cnn_tt)] {
            out.extend(CNN_PARAM_NAMES.iter().zip(cnn.tensors()).map(|(n, t)| (format!("{module}.{n}"), t)));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(g) = &mut self.gat_ext {
            out.extend(g.tensors_mut());
        }
        if let Some(g) = &mut self.gat_inf {
            out.extend(g.tensors_mut());
        }
        out.extend(self.cnn_ql.tensors_mut());
        out.extend(self.cnn_tt.tensors_mut());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor on the tape, in [`ModelParameters::named`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            gat_ext: self.gat_ext.as_ref().map(|g| g.bind(tape, trainable)),
            gat_inf: self.gat_inf.as_ref().map(|g| g.bind(tape, trainable)),
            cnn_ql: self.cnn_ql.bind(tape, trainable),
            cnn_tt: self.cnn_tt.bind(tape, trainable),
        }
    }
}

impl BoundParams {
    /// Tape variables in [`ModelParameters::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for g in [&self.gat_ext, &self.gat_inf].into_iter().flatten() {
            out.extend([g.pre_w, g.pre_b, g.att_src, g.att_dst, g.z_w, g.z_b, g.out_w, g.out_b]);
        }
        for c in [&self.cnn_ql, &self.cnn_tt] {
            out.extend(c.conv);
            out.extend(c.conv_b);
            out.extend([c.lin_w, c.lin_b]);
        }
        out
    }
}
