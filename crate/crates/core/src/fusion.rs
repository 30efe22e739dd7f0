//! UNet fusion network: `(N+1) × T × F` stacked log-mels → one `T × F` map.
//!
//! Encoder blocks are `[conv3×3 stride 2, conv3×3, BN, ReLU]`; decoder
//! blocks upsample with a 2×2 transposed convolution, concatenate the
//! encoder feature of matching resolution, then `[conv3×3, BN, ReLU]`.
//! A 1×1 head produces the fused log-mel estimate with no output
//! nonlinearity. Inputs are zero-padded symmetrically to a multiple of
//! `2^depth` and the output is cropped back to `T × F`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::{MelFeature, MultiChannelFeature};
use crate::nn::{
    concat_channels, crop2d, pad2d, relu, relu_backward, split_channels, BatchNorm, BnState,
    Conv2d, ConvTranspose2x2, Grads, ParamStore,
};
use crate::real::Real;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub skip_connections: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder_channels: vec![32, 64, 128, 256],
            skip_connections: true,
        }
    }
}

impl UNetConfig {
    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(invalid("UNet needs at least one input channel"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(invalid(
                "encoder channel list must be non-empty and positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Conv2d,
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: ConvTranspose2x2,
    conv: Conv2d,
    bn: BatchNorm,
    skip_ch: usize,
}

/// Network topology. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    enc: Vec<EncoderBlock>,
    dec: Vec<DecoderBlock>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct Level<T> {
    /// input to the first conv of the block
    input: Vec<T>,
    mid: Vec<T>,
    bn: BnState<T>,
    out: Vec<T>,
    h: usize,
    w: usize,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    batch: usize,
    t: usize,
    f: usize,
    hp: usize,
    wp: usize,
    top: usize,
    left: usize,
    padded: Vec<T>,
    enc: Vec<Level<T>>,
    dec: Vec<Level<T>>,
    head_in: Vec<T>,
}

impl<T> UNetCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl UNet {
    /// Build the topology and draw initial parameters from `seed`.
    ///
    /// Convolutions use variance-scaled normal weights. With skips enabled
    /// the head also sees the padded input, and its weights on those
    /// channels start at `1 / in_channels`, so the untrained network
    /// outputs roughly the per-cell channel mean.
    pub fn new<T: Real>(config: &UNetConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "unet-init", 0));
        let mut p = ParamStore::new();
        let ch = &config.encoder_channels;
        let mut enc = Vec::new();
        let mut prev = config.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(EncoderBlock {
                down: Conv2d::new(&mut p, &format!("enc{i}.down"), prev, c, 3, 2, 1, &mut rng),
                conv: Conv2d::new(&mut p, &format!("enc{i}.conv"), c, c, 3, 1, 1, &mut rng),
                bn: BatchNorm::new(&mut p, &format!("enc{i}.bn"), c),
            });
            prev = c;
        }
        let mut dec = Vec::new();
        for i in (0..ch.len()).rev() {
            let out_c = if i > 0 { ch[i - 1] } else { ch[0] };
            let skip_ch = match (config.skip_connections, i) {
                (false, _) => 0,
                (true, 0) => config.in_channels,
                (true, _) => ch[i - 1],
            };
            dec.push(DecoderBlock {
                up: ConvTranspose2x2::new(&mut p, &format!("dec{i}.up"), prev, out_c, &mut rng),
                conv: Conv2d::new(
                    &mut p,
                    &format!("dec{i}.conv"),
                    out_c + skip_ch,
                    out_c,
                    3,
                    1,
                    1,
                    &mut rng,
                ),
                bn: BatchNorm::new(&mut p, &format!("dec{i}.bn"), out_c),
                skip_ch,
            });
            prev = out_c;
        }
        let head_in = prev
            + if config.skip_connections {
                config.in_channels
            } else {
                0
            };
        let head = Conv2d::new(&mut p, "head", head_in, 1, 1, 1, 0, &mut rng);
        {
            let w = p.get_mut(head.w);
            let feat_scale = T::lit(0.1);
            for v in w[..prev].iter_mut() {
                *v *= feat_scale;
            }
            if config.skip_connections {
                let mean_w = T::one() / T::from_usize(config.in_channels);
                w[prev..].iter_mut().for_each(|v| *v = mean_w);
            }
        }
        Ok((
            Self {
                config: config.clone(),
                enc,
                dec,
                head,
            },
            p,
        ))
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Padded size and offsets for a `t × f` input.
    pub fn padded_dims(&self, t: usize, f: usize) -> (usize, usize, usize, usize) {
        let m = 1usize << self.config.depth();
        let hp = t.div_ceil(m) * m;
        let wp = f.div_ceil(m) * m;
        (hp, wp, (hp - t) / 2, (wp - f) / 2)
    }

    /// `x` is `[batch, in_channels, t, f]`; returns `[batch, t, f]`.
    /// Train mode uses batch statistics and needs `batch >= 2`.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        batch: usize,
        t: usize,
        f: usize,
        train: bool,
    ) -> Result<(Vec<T>, UNetCache<T>)> {
        let cin = self.config.in_channels;
        if x.len() != batch * cin * t * f || batch == 0 || t == 0 || f == 0 {
            return Err(invalid(format!(
                "fusion input of {} values does not match [{batch}, {cin}, {t}, {f}]",
                x.len()
            )));
        }
        if train && batch < 2 {
            return Err(invalid(
                "batch normalization in training mode needs batch >= 2",
            ));
        }
        let (hp, wp, top, left) = self.padded_dims(t, f);
        let padded = pad2d(x, batch, cin, t, f, top, left, hp, wp);

        let mut enc_levels = Vec::with_capacity(self.enc.len());
        let (mut cur, mut h, mut w) = (padded.clone(), hp, wp);
        for blk in &self.enc {
            let a = blk.down.forward(p, &cur, batch, h, w);
            let (ho, wo) = blk.down.out_hw(h, w);
            let b = blk.conv.forward(p, &a, batch, ho, wo);
            let (y, st) = blk.bn.forward(p, &b, batch, ho * wo, train);
            let out = relu(&y);
            enc_levels.push(Level {
                input: std::mem::take(&mut cur),
                mid: a,
                bn: st,
                out: out.clone(),
                h,
                w,
            });
            cur = out;
            h = ho;
            w = wo;
        }

        let depth = self.enc.len();
        let mut dec_levels = Vec::with_capacity(depth);
        for (j, blk) in self.dec.iter().enumerate() {
            let level = depth - 1 - j;
            let up = blk.up.forward(p, &cur, batch, h, w);
            let (uh, uw) = (2 * h, 2 * w);
            let cat = if blk.skip_ch > 0 {
                let skip = if level == 0 {
                    &padded
                } else {
                    &enc_levels[level - 1].out
                };
                concat_channels(&up, blk.up.cout, skip, blk.skip_ch, batch, uh * uw)
            } else {
                up
            };
            let b = blk.conv.forward(p, &cat, batch, uh, uw);
            let (y, st) = blk.bn.forward(p, &b, batch, uh * uw, train);
            let out = relu(&y);
            dec_levels.push(Level {
                input: std::mem::take(&mut cur),
                mid: cat,
                bn: st,
                out: out.clone(),
                h,
                w,
            });
            cur = out;
            h = uh;
            w = uw;
        }

        let last_c = self.dec.last().map_or(0, |d| d.up.cout);
        let head_in = if self.config.skip_connections {
            concat_channels(&cur, last_c, &padded, cin, batch, hp * wp)
        } else {
            cur
        };
        let full = self.head.forward(p, &head_in, batch, hp, wp);
        let out = crop2d(&full, batch, 1, hp, wp, top, left, t, f);
        Ok((
            out,
            UNetCache {
                batch,
                t,
                f,
                hp,
                wp,
                top,
                left,
                padded,
                enc: enc_levels,
                dec: dec_levels,
                head_in,
            },
        ))
    }

    /// Fold the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn commit_stats<T: Real>(&self, p: &mut ParamStore<T>, cache: &UNetCache<T>) {
        for (blk, lvl) in self.enc.iter().zip(&cache.enc) {
            if let Some(stats) = lvl.bn.stats() {
                blk.bn.update_running(p, stats);
            }
        }
        for (blk, lvl) in self.dec.iter().zip(&cache.dec) {
            if let Some(stats) = lvl.bn.stats() {
                blk.bn.update_running(p, stats);
            }
        }
    }

    /// Accumulates parameter gradients and returns `d loss / d input`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &UNetCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let UNetCache {
            batch,
            t,
            f,
            hp,
            wp,
            top,
            left,
            ..
        } = *cache;
        let cin = self.config.in_channels;
        let d_full = pad2d(dy, batch, 1, t, f, top, left, hp, wp);
        let d_head_in = self
            .head
            .backward(p, g, &cache.head_in, batch, hp, wp, &d_full);
        let last_c = self.dec.last().map_or(0, |d| d.up.cout);
        let (mut d_cur, mut d_padded) = if self.config.skip_connections {
            split_channels(&d_head_in, last_c, cin, batch, hp * wp)
        } else {
            (d_head_in, vec![T::zero(); cache.padded.len()])
        };

        let depth = self.enc.len();
        let mut d_enc_out: Vec<Vec<T>> = cache
            .enc
            .iter()
            .map(|l| vec![T::zero(); l.out.len()])
            .collect();
        for (j, blk) in self.dec.iter().enumerate().rev() {
            let level = depth - 1 - j;
            let lvl = &cache.dec[j];
            let (uh, uw) = (2 * lvl.h, 2 * lvl.w);
            let d_y = relu_backward(&lvl.out, &d_cur);
            let d_b = blk.bn.backward_state(p, g, &lvl.bn, &d_y, batch, uh * uw);
            let d_cat = blk.conv.backward(p, g, &lvl.mid, batch, uh, uw, &d_b);
            let d_up = if blk.skip_ch > 0 {
                let (d_up, d_skip) =
                    split_channels(&d_cat, blk.up.cout, blk.skip_ch, batch, uh * uw);
                let target = if level == 0 {
                    &mut d_padded
                } else {
                    &mut d_enc_out[level - 1]
                };
                for (a, b) in target.iter_mut().zip(&d_skip) {
                    *a += *b;
                }
                d_up
            } else {
                d_cat
            };
            d_cur = blk
                .up
                .backward(p, g, &lvl.input, batch, lvl.h, lvl.w, &d_up);
        }

        for (i, blk) in self.enc.iter().enumerate().rev() {
            let lvl = &cache.enc[i];
            for (a, b) in d_cur.iter_mut().zip(&d_enc_out[i]) {
                *a += *b;
            }
            let (ho, wo) = blk.down.out_hw(lvl.h, lvl.w);
            let d_y = relu_backward(&lvl.out, &d_cur);
            let d_b = blk.bn.backward_state(p, g, &lvl.bn, &d_y, batch, ho * wo);
            let d_a = blk.conv.backward(p, g, &lvl.mid, batch, ho, wo, &d_b);
            d_cur = blk
                .down
                .backward(p, g, &lvl.input, batch, lvl.h, lvl.w, &d_a);
        }
        for (a, b) in d_padded.iter_mut().zip(&d_cur) {
            *a += *b;
        }
        crop2d(&d_padded, batch, cin, hp, wp, top, left, t, f)
    }
}

/// The trained fusion network `g_θ` together with its parameters.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub init_seed: u64,
}

pub fn init_fusion(config: &UNetConfig, seed: u64) -> Result<Fusion> {
    let (net, params) = UNet::new(config, seed)?;
    Ok(Fusion {
        net,
        params,
        init_seed: seed,
    })
}

impl Fusion {
    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    /// Inference-mode fusion of one stacked feature.
    pub fn fuse(&self, z: &MultiChannelFeature) -> Result<MelFeature> {
        let want = self.config().in_channels;
        if z.channels() != want {
            return Err(invalid(format!(
                "fusion expects {want} channels, got {}",
                z.channels()
            )));
        }
        let x: Vec<f32> = z.values().iter().map(|&v| v as f32).collect();
        let (y, _) = self
            .net
            .forward(&self.params, &x, 1, z.frames(), z.n_mels(), false)?;
        MelFeature::new(
            y.iter().map(|&v| v as f64).collect(),
            z.frames(),
            z.n_mels(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(skip: bool) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            encoder_channels: vec![3, 4],
            skip_connections: skip,
        }
    }

    #[test]
    fn shapes_restored_for_odd_sizes() {
        for skip in [true, false] {
            let (net, p) = UNet::new::<f32>(&toy(skip), 1).unwrap();
            for (t, f) in [(5, 7), (16, 8), (13, 40)] {
                let x = vec![0.5f32; 2 * 2 * t * f];
                let (y, _) = net.forward(&p, &x, 2, t, f, true).unwrap();
                assert_eq!(y.len(), 2 * t * f);
            }
        }
    }

    #[test]
    fn rejects_bad_batches_and_shapes() {
        let (net, p) = UNet::new::<f32>(&toy(true), 1).unwrap();
        let x = vec![0.0f32; 2 * 8 * 8];
        assert!(net.forward(&p, &x, 1, 8, 8, true).is_err());
        assert!(net.forward(&p, &x, 1, 8, 8, false).is_ok());
        assert!(net.forward(&p, &x, 1, 8, 9, false).is_err());
        assert!(UNet::new::<f32>(
            &UNetConfig {
                in_channels: 0,
                ..toy(true)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn fuse_checks_channel_count() {
        let fusion = init_fusion(&toy(true), 3).unwrap();
        let m = MelFeature::new(vec![0.0; 12], 4, 3).unwrap();
        let z = MultiChannelFeature::from_channels(&[&m, &m, &m]).unwrap();
        assert!(fusion.fuse(&z).is_err());
        let z = MultiChannelFeature::from_channels(&[&m, &m]).unwrap();
        assert_eq!(fusion.fuse(&z).unwrap().shape(), (4, 3));
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seed::rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn fd_check(skip: bool, train: bool) {
        let cfg = UNetConfig {
            in_channels: 4,
            encoder_channels: vec![3, 4],
            skip_connections: skip,
        };
        let (net, p) = UNet::new::<f64>(&cfg, 7).unwrap();
        let (b, t, f) = (2, 16, 8);
        let x = random(b * 4 * t * f, 41);
        let r = random(b * t * f, 12);
        let loss = |p: &ParamStore<f64>, x: &[f64]| {
            let (y, _) = net.forward(p, x, b, t, f, train).unwrap();
            y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&p, &x, b, t, f, train).unwrap();
        let mut g = p.zero_grads();
        let dx = net.backward(&p, &mut g, &cache, &r);
        for (name, err) in gradcheck::check_params(&p, &g, 1e-4, |q| loss(q, &x)) {
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
        let num = gradcheck::numeric_grad(&x, 1e-4, |v| loss(&p, v));
        assert!(gradcheck::relative_error(&dx, &num) < 1e-3);
    }

    use crate::nn::gradcheck;

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(true, true);
        fd_check(false, true);
        fd_check(true, false);
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let (net, p) = UNet::new::<f64>(&toy(true), 5).unwrap();
        let x = random(2 * 2 * 12 * 10, 1);
        let r = random(2 * 12 * 10, 2);
        let (_, cache) = net.forward(&p, &x, 2, 12, 10, true).unwrap();
        let mut g = p.zero_grads();
        net.backward(&p, &mut g, &cache, &r);
        for (e, gd) in p.entries().iter().zip(&g.data) {
            if e.trainable {
                assert!(gd.iter().any(|v| *v != 0.0), "{} has zero gradient", e.name);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_near_channel_mean() {
        let cfg = UNetConfig {
            in_channels: 3,
            ..UNetConfig::default()
        };
        let a = init_fusion(&cfg, 1).unwrap();
        assert_eq!(a.params.hash(), init_fusion(&cfg, 1).unwrap().params.hash());
        assert_ne!(a.params.hash(), init_fusion(&cfg, 2).unwrap().params.hash());

        let (t, f) = (40, 24);
        let x: Vec<f32> = random(3 * t * f, 9).iter().map(|&v| v as f32).collect();
        let (y, _) = a.net.forward(&a.params, &x, 1, t, f, false).unwrap();
        let mut se = 0.0;
        for i in 0..t * f {
            let mean = (0..3).map(|c| x[c * t * f + i] as f64).sum::<f64>() / 3.0;
            se += (y[i] as f64 - mean).powi(2);
        }
        let rms = (se / (t * f) as f64).sqrt();
        assert!(rms <= 0.5, "init deviates from channel mean by {rms}");
    }

    #[test]
    fn inference_is_deterministic() {
        let fusion = init_fusion(&toy(true), 3).unwrap();
        let m = MelFeature::new(random(9 * 7, 4), 9, 7).unwrap();
        let z = MultiChannelFeature::from_channels(&[&m, &m.mean_normalized()]).unwrap();
        assert_eq!(fusion.fuse(&z).unwrap(), fusion.fuse(&z).unwrap());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn fuse_restores_input_shape(
            n in 1usize..4,
            t in 1usize..60,
            f in 2usize..41,
            depth in 1usize..4,
            skip in proptest::bool::ANY,
        ) {
            let cfg = UNetConfig {
                in_channels: n + 1,
                encoder_channels: (0..depth).map(|d| 2 << d).collect(),
                skip_connections: skip,
            };
            let fusion = init_fusion(&cfg, 3).unwrap();
            let chans: Vec<MelFeature> = (0..=n)
                .map(|c| MelFeature::new(random(t * f, c as u64), t, f).unwrap())
                .collect();
            let z = MultiChannelFeature::from_channels(&chans.iter().collect::<Vec<_>>()).unwrap();
            proptest::prop_assert_eq!(z.channels(), n + 1);
            let out = fusion.fuse(&z).unwrap();
            proptest::prop_assert_eq!(out.shape(), (t, f));
            proptest::prop_assert!(out.values().iter().all(|v| v.is_finite()));
        }
    }
}
