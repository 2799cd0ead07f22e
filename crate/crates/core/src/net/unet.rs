use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    relu_backward, relu_inplace, BatchNorm2d, BnCache, Buffer, Conv2d, ConvTranspose2d, Param,
};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

/// Strided convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
struct EncoderBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

/// Strided transposed convolution, batch norm and optional ReLU.
#[derive(Debug, Clone)]
struct DecoderBlock<T> {
    conv: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    relu: bool,
}

impl<T: Scalar> EncoderBlock<T> {
    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.bn.forward_eval(&self.conv.forward(x));
        relu_inplace(&mut y);
        y
    }

    fn forward_train(&mut self, x: Tensor<T>) -> BlockCache<T> {
        let (mut y, bn) = self.bn.forward_train(&self.conv.forward(&x));
        relu_inplace(&mut y);
        BlockCache { input: x, bn, output: y }
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        relu_backward(&cache.output, &mut dy);
        let dz = self.bn.backward(&cache.bn, &dy);
        self.conv.backward(&cache.input, &dz, need_dx)
    }
}

impl<T: Scalar> DecoderBlock<T> {
    fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.bn.forward_eval(&self.conv.forward(x));
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    fn forward_train(&mut self, x: Tensor<T>) -> BlockCache<T> {
        let (mut y, bn) = self.bn.forward_train(&self.conv.forward(&x));
        if self.relu {
            relu_inplace(&mut y);
        }
        BlockCache { input: x, bn, output: y }
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut dy: Tensor<T>) -> Tensor<T> {
        if self.relu {
            relu_backward(&cache.output, &mut dy);
        }
        let dz = self.bn.backward(&cache.bn, &dy);
        self.conv.backward(&cache.input, &dz, true).expect("dx requested")
    }
}

/// Activations retained by [`SiameseUnet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    times: usize,
    mixture: Vec<BlockCache<T>>,
    reference: Vec<BlockCache<T>>,
    decoder: Vec<BlockCache<T>>,
}

/// Two-headed U-Net: one encoder for the mixture, one for the reference
/// (optionally the same weights), a shared decoder fed with skip connections
/// from both encoders, and a 3x3 output convolution.
///
/// A batch holds `B` mixtures and `k * B` references; reference `r` is paired
/// with mixture `r % B` and yields output item `r`.
#[derive(Debug, Clone)]
pub struct SiameseUnet<T> {
    config: ModelConfig,
    mixture_encoder: Vec<EncoderBlock<T>>,
    reference_encoder: Vec<EncoderBlock<T>>,
    decoder: Vec<DecoderBlock<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> SiameseUnet<T> {
    /// Builds a network with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, s, p) = (config.kernel, config.stride, config.padding);
        let (mom, eps) = (config.bn_momentum, config.bn_eps);
        let encoder = |prefix: &str, rng: &mut ChaCha8Rng| -> Vec<EncoderBlock<T>> {
            config
                .encoder
                .iter()
                .enumerate()
                .map(|(i, &[cin, cout])| {
                    let name = format!("{prefix}.{i}");
                    EncoderBlock {
                        conv: Conv2d::new(&format!("{name}.conv"), cin, cout, k, s, p, rng),
                        bn: BatchNorm2d::new(&format!("{name}.bn"), cout, mom, eps),
                    }
                })
                .collect()
        };
        let mixture_encoder = encoder("mixture_encoder", &mut rng);
        let reference_encoder = if config.share_encoder_weights {
            Vec::new()
        } else {
            encoder("reference_encoder", &mut rng)
        };
        let last = config.decoder.len() - 1;
        let decoder = config
            .decoder
            .iter()
            .enumerate()
            .map(|(j, &[cin, cout])| {
                let name = format!("decoder.{j}");
                DecoderBlock {
                    conv: ConvTranspose2d::new(&format!("{name}.conv"), cin, cout, k, s, p, &mut rng),
                    bn: BatchNorm2d::new(&format!("{name}.bn"), cout, mom, eps),
                    relu: j != last,
                }
            })
            .collect();
        let c = config.features.channels();
        let hk = config.head_kernel;
        let head = Conv2d::new("head", c, c, hk, 1, hk / 2, &mut rng);
        Ok(Self {
            config,
            mixture_encoder,
            reference_encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_inputs(&self, mix: &Tensor<T>, refs: &Tensor<T>) -> Result<usize> {
        let c = self.config.features.channels();
        let m = self.config.size_multiple();
        if mix.n == 0 || refs.n == 0 || !refs.n.is_multiple_of(mix.n) {
            return Err(Error::invalid(format!(
                "reference batch {} must be a positive multiple of mixture batch {}",
                refs.n, mix.n
            )));
        }
        if mix.c != c || refs.c != c {
            return Err(Error::invalid(format!(
                "inputs need {c} channels, got {} and {}",
                mix.c, refs.c
            )));
        }
        if (mix.h, mix.w) != (refs.h, refs.w) {
            return Err(Error::invalid("mixture and reference feature maps differ in size"));
        }
        if mix.h == 0 || mix.w == 0 || !mix.h.is_multiple_of(m) || !mix.w.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "feature map {}x{} must be a non-empty multiple of {m} in both dimensions",
                mix.h, mix.w
            )));
        }
        Ok(refs.n / mix.n)
    }

    fn has_reference_encoder(&self) -> bool {
        !self.config.share_encoder_weights
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, mix: &Tensor<T>, refs: &Tensor<T>) -> Result<Tensor<T>> {
        let times = self.check_inputs(mix, refs)?;
        let encode = |blocks: &[EncoderBlock<T>], x: &Tensor<T>| {
            let mut outs: Vec<Tensor<T>> = Vec::with_capacity(blocks.len());
            for b in blocks {
                let y = b.forward_eval(outs.last().unwrap_or(x));
                outs.push(y);
            }
            outs
        };
        let m = encode(&self.mixture_encoder, mix);
        let r = if self.has_reference_encoder() {
            encode(&self.reference_encoder, refs)
        } else {
            encode(&self.mixture_encoder, refs)
        };
        let depth = m.len();
        let mut d: Option<Tensor<T>> = None;
        for (j, block) in self.decoder.iter().enumerate() {
            let e = depth - 1 - j;
            let tiled = m[e].tile_batch(times);
            let x = match &d {
                None => Tensor::concat_channels(&[&tiled, &r[e]]),
                Some(prev) => Tensor::concat_channels(&[prev, &tiled, &r[e]]),
            };
            d = Some(block.forward_eval(&x));
        }
        Ok(self.head.forward(&d.expect("non-empty decoder")))
    }

    /// Training-mode forward pass: batch statistics, running-stat updates,
    /// and a cache for [`SiameseUnet::backward`].
    pub fn forward_train(&mut self, mix: &Tensor<T>, refs: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let times = self.check_inputs(mix, refs)?;
        fn encode<T: Scalar>(blocks: &mut [EncoderBlock<T>], x: &Tensor<T>) -> Vec<BlockCache<T>> {
            let mut caches: Vec<BlockCache<T>> = Vec::with_capacity(blocks.len());
            for b in blocks.iter_mut() {
                let input = caches.last().map_or_else(|| x.clone(), |c| c.output.clone());
                caches.push(b.forward_train(input));
            }
            caches
        }
        let mixture = encode(&mut self.mixture_encoder, mix);
        let reference = if self.has_reference_encoder() {
            encode(&mut self.reference_encoder, refs)
        } else {
            encode(&mut self.mixture_encoder, refs)
        };
        let depth = mixture.len();
        let mut decoder: Vec<BlockCache<T>> = Vec::with_capacity(depth);
        for j in 0..self.decoder.len() {
            let e = depth - 1 - j;
            let tiled = mixture[e].output.tile_batch(times);
            let x = match decoder.last() {
                None => Tensor::concat_channels(&[&tiled, &reference[e].output]),
                Some(prev) => Tensor::concat_channels(&[&prev.output, &tiled, &reference[e].output]),
            };
            decoder.push(self.decoder[j].forward_train(x));
        }
        let out = self.head.forward(&decoder.last().expect("non-empty decoder").output);
        Ok((
            out,
            ForwardCache {
                times,
                mixture,
                reference,
                decoder,
            },
        ))
    }

    /// Accumulates parameter gradients of `<output, dout>` into each
    /// parameter's `grad` buffer.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dout: &Tensor<T>) {
        let depth = cache.mixture.len();
        let head_in = &cache.decoder[depth - 1].output;
        let mut d = self.head.backward(head_in, dout, true).expect("dx requested");
        let mut dm: Vec<Option<Tensor<T>>> = vec![None; depth];
        let mut dr: Vec<Option<Tensor<T>>> = vec![None; depth];
        for j in (0..depth).rev() {
            let e = depth - 1 - j;
            let dx = self.decoder[j].backward(&cache.decoder[j], d);
            let ce = cache.mixture[e].output.c;
            let mut parts = if j == 0 {
                dx.split_channels(&[ce, ce])
            } else {
                dx.split_channels(&[cache.decoder[j - 1].output.c, ce, ce])
            };
            dr[e] = parts.pop();
            dm[e] = parts.pop().map(|t| t.untile_batch(cache.times));
            d = parts.pop().unwrap_or_else(|| Tensor::zeros(0, 0, 0, 0));
        }
        fn back<T: Scalar>(blocks: &mut [EncoderBlock<T>], caches: &[BlockCache<T>], mut grads: Vec<Option<Tensor<T>>>) {
            let mut carry: Option<Tensor<T>> = None;
            for i in (0..blocks.len()).rev() {
                let mut g = grads[i].take().expect("skip gradient");
                if let Some(c) = carry.take() {
                    g.add_assign(&c);
                }
                carry = blocks[i].backward(&caches[i], g, i > 0);
            }
        }
        back(&mut self.mixture_encoder, &cache.mixture, dm);
        if self.has_reference_encoder() {
            back(&mut self.reference_encoder, &cache.reference, dr);
        } else {
            back(&mut self.mixture_encoder, &cache.reference, dr);
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in self.mixture_encoder.iter().chain(&self.reference_encoder) {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        for b in &self.decoder {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in self.mixture_encoder.iter_mut().chain(self.reference_encoder.iter_mut()) {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        for b in &mut self.decoder {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let enc = self.mixture_encoder.iter().chain(&self.reference_encoder).map(|b| &b.bn);
        enc.chain(self.decoder.iter().map(|b| &b.bn)).flat_map(|bn| bn.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let enc = self
            .mixture_encoder
            .iter_mut()
            .chain(self.reference_encoder.iter_mut())
            .map(|b| &mut b.bn);
        enc.chain(self.decoder.iter_mut().map(|b| &mut b.bn))
            .flat_map(|bn| bn.buffers_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
