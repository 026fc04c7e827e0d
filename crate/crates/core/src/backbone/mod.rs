//! The dense edge-detection network.
//!
//! A 3×3 stem lifts the image to the first block width. Five main blocks
//! follow, each a stack of `{racmix, 1×1 conv}` sub-blocks with a local
//! residual. Every block's input is the sum of 1×1 projections (strided to its
//! resolution) of the stem and of all earlier blocks. Six independent heads
//! (one on the stem, one per block) produce full-resolution side logits; a
//! 1×1 fusion conv over the six logits gives the fused map.

mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::SIDE_OUTPUTS;
use crate::params::{Bound, ParamId, ParamStore};
use crate::racmix::{RacmixBlock, RacmixConfig};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{Adam, AdamConfig, StepReport, Trainer};

pub const MAIN_BLOCKS: usize = 5;
pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub channels: Vec<usize>,
    pub subblocks: Vec<usize>,
    /// Resolution divisor of each main block relative to the input.
    pub downsample: Vec<usize>,
    /// Heads, kernel size and window radius shared by every block; the
    /// channel count is taken from `channels`.
    pub racmix: RacmixConfig,
    pub side_outputs: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 48, 64, 80],
            subblocks: vec![2, 2, 3, 3, 3],
            downsample: vec![1, 2, 4, 8, 16],
            racmix: RacmixConfig::default(),
            side_outputs: SIDE_OUTPUTS,
        }
    }
}

impl NetworkConfig {
    /// A narrow single-sub-block network for short CPU overfitting runs.
    pub fn compact() -> Self {
        Self {
            channels: vec![16, 16, 24, 24, 32],
            subblocks: vec![1; MAIN_BLOCKS],
            racmix: RacmixConfig {
                heads: 2,
                window_radius: 2,
                ..RacmixConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", &self.channels),
            ("subblocks", &self.subblocks),
            ("downsample", &self.downsample),
        ] {
            if v.len() != MAIN_BLOCKS {
                return Err(Error::Config(format!(
                    "{name} needs {MAIN_BLOCKS} entries, got {}",
                    v.len()
                )));
            }
        }
        if self.side_outputs != SIDE_OUTPUTS {
            return Err(Error::Config(format!(
                "side_outputs must be {SIDE_OUTPUTS}, got {}",
                self.side_outputs
            )));
        }
        if self.subblocks.contains(&0) {
            return Err(Error::Config(
                "every main block needs at least one sub-block".into(),
            ));
        }
        let mut prev = 1;
        for &f in &self.downsample {
            if f == 0 || f < prev || f % prev != 0 {
                return Err(Error::Config(format!(
                    "downsample factors must be non-decreasing multiples of each other: {:?}",
                    self.downsample
                )));
            }
            prev = f;
        }
        for &c in &self.channels {
            RacmixConfig {
                channels: c,
                ..self.racmix
            }
            .validate()?;
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn max_factor(&self) -> usize {
        self.downsample.iter().copied().max().unwrap_or(1)
    }

    /// `key=value` lines; stored verbatim in checkpoints.
    pub fn to_echo(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "channels={}\nsubblocks={}\ndownsample={}\nheads={}\nkernel_size={}\nwindow_radius={}\nside_outputs={}\n",
            list(&self.channels),
            list(&self.subblocks),
            list(&self.downsample),
            self.racmix.heads,
            self.racmix.kernel_size,
            self.racmix.window_radius,
            self.side_outputs,
        )
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(&c) = cfg.channels.first() {
            cfg.racmix.channels = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one field by key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: bad integer {s:?}")))
                })
                .collect()
        }
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: bad integer {v:?}")))
        }
        match key {
            "channels" => self.channels = list(key, value)?,
            "subblocks" => self.subblocks = list(key, value)?,
            "downsample" => self.downsample = list(key, value)?,
            "heads" => self.racmix.heads = int(key, value)?,
            "kernel_size" => self.racmix.kernel_size = int(key, value)?,
            "window_radius" => self.racmix.window_radius = int(key, value)?,
            "side_outputs" => self.side_outputs = int(key, value)?,
            _ => return Err(Error::Config(format!("unknown network key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn([c_out, c_in, k, k], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            stride,
            padding: k / 2,
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p[self.weight],
            Some(p[self.bias]),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
struct SubBlock {
    racmix: RacmixBlock,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    blocks: Vec<Vec<SubBlock>>,
    /// `skips[b][j]` projects stage `j` (0 = stem, j = block j) into block `b`.
    skips: Vec<Vec<Conv>>,
    heads: Vec<Conv>,
    fuse: Conv,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub side_logits: Vec<Var>,
    pub sides: Vec<Var>,
    pub fused_logit: Var,
    pub fused: Var,
}

/// Materialized probability maps, each 1×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub sides: Vec<Tensor<T>>,
    pub fused: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EdgeNetwork<T: Real = f32> {
    config: NetworkConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> EdgeNetwork<T> {
    /// Deterministically initialized network.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;

        let stem = Conv::new(
            &mut store,
            "stem",
            IN_CHANNELS,
            ch[0],
            3,
            1,
            (2.0 / 27.0f64).sqrt(),
            &mut rng,
        );

        let mut skips = Vec::with_capacity(MAIN_BLOCKS);
        let mut blocks = Vec::with_capacity(MAIN_BLOCKS);
        for b in 0..MAIN_BLOCKS {
            // Sources: the stem (at factor 1) and blocks 0..b.
            let sources: Vec<(usize, usize)> = std::iter::once((ch[0], 1))
                .chain((0..b).map(|j| (ch[j], config.downsample[j])))
                .collect();
            let n = sources.len() as f64;
            let row = sources
                .iter()
                .enumerate()
                .map(|(j, &(c_src, f_src))| {
                    let stride = config.downsample[b] / f_src;
                    let std = (1.0 / (c_src as f64 * n)).sqrt();
                    Conv::new(
                        &mut store,
                        &format!("skip{b}_{j}"),
                        c_src,
                        ch[b],
                        1,
                        stride,
                        std,
                        &mut rng,
                    )
                })
                .collect();
            skips.push(row);

            let rc = RacmixConfig {
                channels: ch[b],
                ..config.racmix
            };
            let subs = (0..config.subblocks[b])
                .map(|s| {
                    let prefix = format!("block{b}.sub{s}");
                    let racmix =
                        RacmixBlock::new(rc, &mut store, &format!("{prefix}.racmix"), &mut rng)?;
                    let std = 0.5 * (1.0 / ch[b] as f64).sqrt();
                    let proj = Conv::new(
                        &mut store,
                        &format!("{prefix}.proj"),
                        ch[b],
                        ch[b],
                        1,
                        1,
                        std,
                        &mut rng,
                    );
                    Ok(SubBlock { racmix, proj })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(subs);
        }

        let head_inputs = std::iter::once(ch[0]).chain(ch.iter().copied());
        let heads = head_inputs
            .enumerate()
            .map(|(h, c)| {
                Conv::new(
                    &mut store,
                    &format!("head{}", h + 1),
                    c,
                    1,
                    1,
                    1,
                    (1.0 / c as f64).sqrt(),
                    &mut rng,
                )
            })
            .collect();

        let fuse = Conv {
            weight: store.add(
                "fuse.weight",
                Tensor::full([1, SIDE_OUTPUTS, 1, 1], T::of(1.0 / SIDE_OUTPUTS as f64)),
            ),
            bias: store.add("fuse.bias", Tensor::zeros([1])),
            stride: 1,
            padding: 0,
        };

        Ok(Self {
            config,
            store,
            layout: Layout {
                stem,
                blocks,
                skips,
                heads,
                fuse,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Weight and bias of side head `h` (1-based; head 1 sits on the stem).
    pub fn head_params(&self, h: usize) -> [ParamId; 2] {
        let c = self.layout.heads[h - 1];
        [c.weight, c.bias]
    }

    pub fn stem_params(&self) -> [ParamId; 2] {
        [self.layout.stem.weight, self.layout.stem.bias]
    }

    /// The same network with another storage type.
    pub fn cast<U: Real>(&self) -> EdgeNetwork<U> {
        EdgeNetwork {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != IN_CHANNELS {
            return Err(Error::shape(
                "forward",
                format!("expected {IN_CHANNELS} channels, got {c}"),
            ));
        }
        let f = self.config.max_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "forward",
                format!("{h}×{w} is not divisible by {f}"),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Outputs> {
        self.check_input(tape.value(image))?;
        let l = &self.layout;
        let stem = l.stem.apply(tape, p, image)?;
        let stem = tape.relu(stem);

        let mut stages = vec![stem];
        for (b, subs) in l.blocks.iter().enumerate() {
            let mut x = l.skips[b][0].apply(tape, p, stages[0])?;
            for (j, skip) in l.skips[b].iter().enumerate().skip(1) {
                let s = skip.apply(tape, p, stages[j])?;
                x = tape.add(x, s)?;
            }
            for sub in subs {
                let y = sub.racmix.forward(tape, p, x)?;
                let y = sub.proj.apply(tape, p, y)?;
                x = tape.add(x, y)?;
            }
            stages.push(x);
        }

        let factors = std::iter::once(1).chain(self.config.downsample.iter().copied());
        let mut side_logits = Vec::with_capacity(SIDE_OUTPUTS);
        for ((head, &stage), f) in l.heads.iter().zip(&stages).zip(factors) {
            // A 1×1 projection commutes with bilinear resampling, so project
            // first and upsample a single channel.
            let logit = head.apply(tape, p, stage)?;
            side_logits.push(if f > 1 {
                tape.upsample_bilinear(logit, f)?
            } else {
                logit
            });
        }
        let sides = side_logits.iter().map(|&v| tape.sigmoid(v)).collect();
        let stacked = tape.concat_channels(&side_logits)?;
        let fused_logit = l.fuse.apply(tape, p, stacked)?;
        let fused = tape.sigmoid(fused_logit);
        Ok(Outputs {
            side_logits,
            sides,
            fused_logit,
            fused,
        })
    }

    /// Forward pass returning the seven probability maps.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(Prediction {
            sides: out.sides.iter().map(|&v| tape.value(v).clone()).collect(),
            fused: tape.value(out.fused).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            channels: vec![4, 4, 8, 8, 8],
            subblocks: vec![1, 1, 1, 1, 1],
            downsample: vec![1, 2, 2, 4, 4],
            racmix: RacmixConfig {
                channels: 4,
                heads: 2,
                kernel_size: 3,
                window_radius: 1,
            },
            side_outputs: 6,
        }
    }

    #[test]
    fn side_output_count_is_enforced() {
        let cfg = NetworkConfig {
            side_outputs: 5,
            ..small()
        };
        assert!(matches!(
            EdgeNetwork::<f32>::build(cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut cfg = small();
        cfg.channels[2] = 6;
        cfg.racmix.heads = 4;
        assert!(matches!(
            EdgeNetwork::<f32>::build(cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = small();
        assert_eq!(NetworkConfig::from_echo(&cfg.to_echo()).unwrap(), cfg);
        assert!(NetworkConfig::from_echo("bogus=1").is_err());
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let net = EdgeNetwork::<f32>::build(small(), 0).unwrap();
        let img = Tensor::zeros([3, 10, 8]);
        assert!(matches!(net.predict(&img), Err(Error::Shape { .. })));
    }

    #[test]
    fn outputs_cover_input_resolution() {
        let net = EdgeNetwork::<f32>::build(small(), 0).unwrap();
        let img = Tensor::full([3, 8, 12], 0.5);
        let pred = net.predict(&img).unwrap();
        assert_eq!(pred.sides.len(), 6);
        for m in pred.sides.iter().chain([&pred.fused]) {
            assert_eq!(m.shape(), &[1, 8, 12]);
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
