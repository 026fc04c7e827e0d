//! The residual convolution/self-attention mixed block.
//!
//! One set of 1×1 projections (query, key, value) feeds two aggregation paths:
//!
//! * the convolution path recombines the projected maps into k² full-channel
//!   maps, shifts map `(p, q)` by `(p - k/2, q - k/2)` with a fixed one-hot
//!   depthwise kernel and sums the results, which is exactly a dense k×k
//!   convolution when the mixing weights are chosen from one;
//! * the attention path runs multi-head softmax attention over a clipped
//!   square window around every pixel, followed by a 1×1 output projection.
//!
//! The block output is `relu(alpha * attention + beta * conv + x)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RacmixConfig {
    pub channels: usize,
    pub heads: usize,
    pub kernel_size: usize,
    /// Attention reaches `window_radius` pixels in each direction.
    pub window_radius: usize,
}

impl Default for RacmixConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 4,
            kernel_size: 3,
            window_radius: 3,
        }
    }
}

impl RacmixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 {
            return Err(Error::Config("channels and heads must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.window_radius == 0 {
            return Err(Error::Config("window radius must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-head feature dimension.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Number of shifted maps in the convolution path, k².
    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Parameter handles of one block. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RacmixBlock {
    pub config: RacmixConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// (k²·C)×(3C)×1×1: concatenated q|k|v to the k² pre-shift maps.
    pub conv_mix: ParamId,
    pub mlp_weight: ParamId,
    pub mlp_bias: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

/// Output of the shared projection stage.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl RacmixBlock {
    /// Registers a freshly initialized block under `prefix`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: RacmixConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let taps = config.taps();
        let proj_std = (1.0 / c as f64).sqrt();
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            config,
            wq: add("wq", Tensor::randn([c, c, 1, 1], proj_std, rng)),
            wk: add("wk", Tensor::randn([c, c, 1, 1], proj_std, rng)),
            wv: add("wv", Tensor::randn([c, c, 1, 1], proj_std, rng)),
            conv_mix: add(
                "conv_mix",
                Tensor::randn(
                    [taps * c, 3 * c, 1, 1],
                    (1.0 / (3 * c * taps) as f64).sqrt(),
                    rng,
                ),
            ),
            mlp_weight: add("mlp.weight", Tensor::randn([c, c, 1, 1], proj_std, rng)),
            mlp_bias: add("mlp.bias", Tensor::zeros([c])),
            alpha: add("alpha", Tensor::scalar(T::one())),
            beta: add("beta", Tensor::scalar(T::one())),
        })
    }

    /// Builds a block whose convolution path reproduces the dense C×C×k×k
    /// convolution `kernel` (zero padding k/2, no bias).
    ///
    /// Query projection is the identity and the mixing weights route
    /// `K[:, :, p, q] · x` into tap map `(p, q)`; key and value are identity
    /// too, so the attention path stays well defined.
    pub fn from_dense_kernel<T: Real>(
        kernel: &Tensor<T>,
        heads: usize,
        window_radius: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        let (c, k) = match *kernel.shape() {
            [co, ci, kh, kw] if co == ci && kh == kw => (co, kh),
            ref s => {
                return Err(Error::shape(
                    "from_dense_kernel",
                    format!("expected C×C×k×k, got {s:?}"),
                ))
            }
        };
        let config = RacmixConfig {
            channels: c,
            heads,
            kernel_size: k,
            window_radius,
        };
        config.validate()?;
        let taps = k * k;
        let eye = identity::<T>(c);
        let kd = kernel.data();
        let conv_mix = Tensor::from_fn([taps * c, 3 * c, 1, 1], |i| {
            let (row, col) = (i / (3 * c), i % (3 * c));
            let (tap, o) = (row / c, row % c);
            // Only the query block (first C input channels) is used.
            if col < c {
                kd[(o * c + col) * taps + tap]
            } else {
                T::zero()
            }
        });
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            config,
            wq: add("wq", eye.clone()),
            wk: add("wk", eye.clone()),
            wv: add("wv", eye.clone()),
            conv_mix: add("conv_mix", conv_mix),
            mlp_weight: add("mlp.weight", eye),
            mlp_bias: add("mlp.bias", Tensor::zeros([c])),
            alpha: add("alpha", Tensor::scalar(T::one())),
            beta: add("beta", Tensor::scalar(T::one())),
        })
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (c, _, _) = tape.value(x).dims3()?;
        if c != self.config.channels {
            return Err(Error::shape(
                "racmix",
                format!(
                    "input has {c} channels, block expects {}",
                    self.config.channels
                ),
            ));
        }
        Ok(())
    }

    /// The shared stage: three 1×1 projections, each applied once.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Projections> {
        self.check_input(tape, x)?;
        Ok(Projections {
            q: tape.conv2d(x, p[self.wq], None, 1, 0)?,
            k: tape.conv2d(x, p[self.wk], None, 1, 0)?,
            v: tape.conv2d(x, p[self.wv], None, 1, 0)?,
        })
    }

    /// Mix the 3N projected groups into k² maps, shift each by its kernel
    /// offset with one grouped fixed-kernel convolution, and sum.
    pub fn conv_path<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        proj: &Projections,
    ) -> Result<Var> {
        let c = self.config.channels;
        let k = self.config.kernel_size;
        let qkv = tape.concat_channels(&[proj.q, proj.k, proj.v])?;
        let maps = tape.conv2d(qkv, p[self.conv_mix], None, 1, 0)?;
        let bank = tape.constant(shift_kernel_bank(c, k));
        let shifted = tape.depthwise_conv2d(maps, bank)?;
        tape.sum_groups(shifted, k * k)
    }

    /// Windowed multi-head attention followed by the output projection.
    pub fn attention_path<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        proj: &Projections,
    ) -> Result<Var> {
        let att = tape.local_attention(
            proj.q,
            proj.k,
            proj.v,
            self.config.heads,
            self.config.window_radius,
        )?;
        tape.conv2d(att, p[self.mlp_weight], Some(p[self.mlp_bias]), 1, 0)
    }

    /// `relu(alpha * attention + beta * conv + x)`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let proj = self.project(tape, p, x)?;
        let att = self.attention_path(tape, p, &proj)?;
        let conv = self.conv_path(tape, p, &proj)?;
        let att = tape.mul_scalar(att, p[self.alpha])?;
        let conv = tape.mul_scalar(conv, p[self.beta])?;
        let mixed = tape.add(att, conv)?;
        let res = tape.add(mixed, x)?;
        Ok(tape.relu(res))
    }

    /// Attention weights for input `x`, shaped H×W×heads×(2r+1)², zero at
    /// window slots clipped by the border.
    pub fn attention_weights<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<f64>> {
        let (_, h, w) = x.dims3()?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let proj = self.project(&mut tape, &bound, xv)?;
        let att = tape.local_attention(
            proj.q,
            proj.k,
            proj.v,
            self.config.heads,
            self.config.window_radius,
        )?;
        let side = 2 * self.config.window_radius + 1;
        let weights = tape
            .attention_weights(att)
            .expect("attention node")
            .to_vec();
        Tensor::new([h, w, self.config.heads, side * side], weights)
    }
}

/// C×C×1×1 identity.
pub fn identity<T: Real>(c: usize) -> Tensor<T> {
    Tensor::from_fn([c, c, 1, 1], |i| {
        if i / c == i % c {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// (k²·C)×k×k depthwise bank: channel block `p·k + q` carries the one-hot
/// kernel that shifts by `(p - k/2, q - k/2)`.
pub fn shift_kernel_bank<T: Real>(c: usize, k: usize) -> Tensor<T> {
    let kk = k * k;
    Tensor::from_fn([kk * c, k, k], |i| {
        let channel = i / kk;
        let tap = channel / c;
        if i % kk == tap {
            T::one()
        } else {
            T::zero()
        }
    })
}
