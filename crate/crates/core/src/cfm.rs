//! Cross-granularity frequency-aware features.
//!
//! A three-stage backbone is tapped at each stage. Every tap is split into an
//! octave pair (full-resolution high band, half-resolution low band), passed
//! through an octave convolution with cross-band exchange, realigned onto a
//! common grid by resize-and-add, and the three granularities are fused by the
//! neighbor connection decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv_same, join, ConvParams, ParamTree};
use crate::tensor::Tensor;

/// Spatial side of the grid every feature map is brought onto before the adapter.
pub const CANONICAL_GRID: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub stages: [ConvParams<T>; 3],
}

impl<T> ParamTree<T> for BackboneParams<T> {
    type Mapped<U> = BackboneParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<BackboneParams<U>, E> {
        Ok(BackboneParams {
            stages: self.stages.try_map_leaves(&join(prefix, "stages"), f)?,
        })
    }
}

impl BackboneParams<Tensor> {
    pub fn init(channels: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            stages: [
                ConvParams::init(channels[0], 3, 3, 2.0, rng),
                ConvParams::init(channels[1], channels[0], 3, 2.0, rng),
                ConvParams::init(channels[2], channels[1], 3, 2.0, rng),
            ],
        }
    }

    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.stages[i].out_channels())
    }
}

/// Backbone features at three depths; spatial size halves at each tap.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTaps<T> {
    pub low_level: T,
    pub mid_level: T,
    pub high_level: T,
}

impl<T> BackboneTaps<T> {
    pub fn as_array(&self) -> [&T; 3] {
        [&self.low_level, &self.mid_level, &self.high_level]
    }
}

/// Three conv(3x3) + relu + 2x2 average-pool stages.
pub fn toy_backbone(g: &mut Graph, image: Var, p: &BackboneParams<Var>) -> Result<BackboneTaps<Var>> {
    let (c, h, w) = dims3(g, image)?;
    if c != 3 || h % 8 != 0 || w % 8 != 0 {
        return shape_err(format!(
            "backbone input must be 3 x H x W with H, W divisible by 8, got {c}x{h}x{w}"
        ));
    }
    let mut x = image;
    let mut taps = Vec::with_capacity(3);
    for stage in &p.stages {
        let y = conv_same(g, x, stage)?;
        let y = g.relu(y);
        x = g.avg_pool2(y)?;
        taps.push(x);
    }
    Ok(BackboneTaps {
        low_level: taps[0],
        mid_level: taps[1],
        high_level: taps[2],
    })
}

pub(crate) fn dims3(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    g.value(v).dims3()
}

/// High band at full resolution and low band at half resolution, with equal
/// channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrequencyPair {
    pub high: Var,
    pub low: Var,
}

impl FrequencyPair {
    pub fn validate(&self, g: &Graph) -> Result<(usize, usize, usize)> {
        let (ch, h, w) = dims3(g, self.high)?;
        let (cl, lh, lw) = dims3(g, self.low)?;
        if ch != cl {
            return shape_err(format!("frequency pair channels differ: high {ch}, low {cl}"));
        }
        if h % 2 != 0 || w % 2 != 0 || (lh, lw) != (h / 2, w / 2) {
            return shape_err(format!("low band {lh}x{lw} is not half of high band {h}x{w}"));
        }
        Ok((ch, h, w))
    }
}

/// First half of the channels stays at full resolution; the second half is
/// average-pooled into the low band.
pub fn octave_split(g: &mut Graph, x: Var) -> Result<FrequencyPair> {
    let (c, h, w) = dims3(g, x)?;
    if c % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("octave_split needs even C, H, W, got {c}x{h}x{w}"));
    }
    let high = g.slice_channels(x, 0, c / 2)?;
    let rest = g.slice_channels(x, c / 2, c / 2)?;
    let low = g.avg_pool2(rest)?;
    Ok(FrequencyPair { high, low })
}

/// The four octave paths: high->high, low->high, low->low, high->low.
#[derive(Clone, Debug, PartialEq)]
pub struct OctaveWeights<T> {
    pub hh: ConvParams<T>,
    pub lh: ConvParams<T>,
    pub ll: ConvParams<T>,
    pub hl: ConvParams<T>,
}

impl<T> ParamTree<T> for OctaveWeights<T> {
    type Mapped<U> = OctaveWeights<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<OctaveWeights<U>, E> {
        Ok(OctaveWeights {
            hh: self.hh.try_map_leaves(&join(prefix, "hh"), f)?,
            lh: self.lh.try_map_leaves(&join(prefix, "lh"), f)?,
            ll: self.ll.try_map_leaves(&join(prefix, "ll"), f)?,
            hl: self.hl.try_map_leaves(&join(prefix, "hl"), f)?,
        })
    }
}

impl OctaveWeights<Tensor> {
    /// Each output band sums two paths, so each path gets half the variance.
    pub fn init(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            hh: ConvParams::init(cout, cin, k, 0.5, rng),
            lh: ConvParams::init(cout, cin, k, 0.5, rng),
            ll: ConvParams::init(cout, cin, k, 0.5, rng),
            hl: ConvParams::init(cout, cin, k, 0.5, rng),
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            hh: ConvParams::zeros(cout, cin, k),
            lh: ConvParams::zeros(cout, cin, k),
            ll: ConvParams::zeros(cout, cin, k),
            hl: ConvParams::zeros(cout, cin, k),
        }
    }
}

pub fn octave_conv(g: &mut Graph, pair: FrequencyPair, w: &OctaveWeights<Var>) -> Result<FrequencyPair> {
    let (_, h, wd) = pair.validate(g)?;
    let hh = conv_same(g, pair.high, &w.hh)?;
    let lh = conv_same(g, pair.low, &w.lh)?;
    let lh_up = g.bilinear_resize(lh, h, wd)?;
    let high = g.add(hh, lh_up)?;
    let ll = conv_same(g, pair.low, &w.ll)?;
    let pooled = g.avg_pool2(pair.high)?;
    let hl = conv_same(g, pooled, &w.hl)?;
    let low = g.add(ll, hl)?;
    Ok(FrequencyPair { high, low })
}

/// Resizes both bands onto `out_h x out_w` and adds them.
pub fn fam_realign(g: &mut Graph, pair: FrequencyPair, out_h: usize, out_w: usize) -> Result<Var> {
    pair.validate(g)?;
    let high = g.bilinear_resize(pair.high, out_h, out_w)?;
    let low = g.bilinear_resize(pair.low, out_h, out_w)?;
    g.add(high, low)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NcdParams<T> {
    /// 3x3 fusion from the `3C` concatenated channels to `C_N`.
    pub fuse: ConvParams<T>,
}

impl<T> ParamTree<T> for NcdParams<T> {
    type Mapped<U> = NcdParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<NcdParams<U>, E> {
        Ok(NcdParams {
            fuse: self.fuse.try_map_leaves(&join(prefix, "fuse"), f)?,
        })
    }
}

/// Every intermediate of the decoder, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct NcdOutput {
    pub f11: Var,
    pub f12: Var,
    pub f21: Var,
    pub f22: Var,
    pub f3: Var,
    pub out: Var,
}

fn resize_to(g: &mut Graph, x: Var, like: Var) -> Result<Var> {
    let (_, h, w) = dims3(g, like)?;
    g.bilinear_resize(x, h, w)
}

/// Neighbor connection decoder over a low/mid/high pyramid (largest first).
pub fn ncd(g: &mut Graph, x1: Var, x2: Var, x3: Var, p: &NcdParams<Var>) -> Result<NcdOutput> {
    let (c1, h1, w1) = dims3(g, x1)?;
    let (c2, h2, w2) = dims3(g, x2)?;
    let (c3, h3, w3) = dims3(g, x3)?;
    if c1 != c2 || c2 != c3 {
        return shape_err(format!("ncd channel counts differ: {c1}, {c2}, {c3}"));
    }
    if !(h1 >= h2 && h2 >= h3 && w1 >= w2 && w2 >= w3) {
        return shape_err(format!(
            "ncd expects a pyramid with the largest map first, got {h1}x{w1}, {h2}x{w2}, {h3}x{w3}"
        ));
    }
    if g.shape(p.fuse.weight)[1] != 3 * c1 {
        return shape_err(format!(
            "ncd fusion expects {} input channels, weight has {}",
            3 * c1,
            g.shape(p.fuse.weight)[1]
        ));
    }
    let x2_up = resize_to(g, x2, x1)?;
    let f11 = g.mul(x1, x2_up)?;
    let x3_to2 = resize_to(g, x3, x2)?;
    let f12 = g.mul(x2, x3_to2)?;
    let f12_up = resize_to(g, f12, f11)?;
    let f21 = g.mul(f11, f12_up)?;
    let f22 = g.concat_channels(&[f12, x3_to2])?;
    let f22_up = resize_to(g, f22, f21)?;
    let f3 = g.concat_channels(&[f21, f22_up])?;
    let out = conv_same(g, f3, &p.fuse)?;
    Ok(NcdOutput {
        f11,
        f12,
        f21,
        f22,
        f3,
        out,
    })
}

/// Which backbone depths feed the three decoder inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapSelection {
    /// Low, mid and high taps, one per decoder input.
    #[default]
    CrossLayer,
    LowOnly,
    MidOnly,
    HighOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfmConfig {
    pub backbone_channels: [usize; 3],
    /// Channel count `C` of every realigned frequency map.
    pub channels: usize,
    /// Output channels `C_N` of the decoder.
    pub out_channels: usize,
    /// Realignment grid per decoder input, largest first.
    pub realign: [usize; 3],
    pub taps: TapSelection,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [8, 16, 32],
            channels: 8,
            out_channels: 8,
            realign: [CANONICAL_GRID, 25, 13],
            taps: TapSelection::CrossLayer,
        }
    }
}

impl CfmConfig {
    fn tap_indices(&self) -> [usize; 3] {
        match self.taps {
            TapSelection::CrossLayer => [0, 1, 2],
            TapSelection::LowOnly => [0; 3],
            TapSelection::MidOnly => [1; 3],
            TapSelection::HighOnly => [2; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfmParams<T> {
    pub octave: [OctaveWeights<T>; 3],
    pub ncd: NcdParams<T>,
}

impl<T> ParamTree<T> for CfmParams<T> {
    type Mapped<U> = CfmParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<CfmParams<U>, E> {
        let o = &self.octave;
        Ok(CfmParams {
            octave: [
                o[0].try_map_leaves(&join(prefix, "octave.0"), f)?,
                o[1].try_map_leaves(&join(prefix, "octave.1"), f)?,
                o[2].try_map_leaves(&join(prefix, "octave.2"), f)?,
            ],
            ncd: self.ncd.try_map_leaves(&join(prefix, "ncd"), f)?,
        })
    }
}

impl CfmParams<Tensor> {
    pub fn init(cfg: &CfmConfig, rng: &mut impl Rng) -> Self {
        let idx = cfg.tap_indices();
        let octave = idx.map(|i| OctaveWeights::init(cfg.backbone_channels[i] / 2, cfg.channels, 3, rng));
        Self {
            octave,
            ncd: NcdParams {
                fuse: ConvParams::init(cfg.out_channels, 3 * cfg.channels, 3, 1.0, rng),
            },
        }
    }

    pub fn zeros(cfg: &CfmConfig) -> Self {
        let idx = cfg.tap_indices();
        Self {
            octave: idx.map(|i| OctaveWeights::zeros(cfg.backbone_channels[i] / 2, cfg.channels, 3)),
            ncd: NcdParams {
                fuse: ConvParams::zeros(cfg.out_channels, 3 * cfg.channels, 3),
            },
        }
    }
}

/// Frequency-aware features from precomputed backbone taps, on the
/// `realign[0]` grid.
pub fn cfm_from_taps(g: &mut Graph, taps: &BackboneTaps<Var>, p: &CfmParams<Var>, cfg: &CfmConfig) -> Result<Var> {
    let all = taps.as_array();
    let mut realigned = [None; 3];
    for (slot, (&tap_idx, weights)) in cfg.tap_indices().iter().zip(&p.octave).enumerate() {
        let pair = octave_split(g, *all[tap_idx])?;
        let pair = octave_conv(g, pair, weights)?;
        let side = cfg.realign[slot];
        realigned[slot] = Some(fam_realign(g, pair, side, side)?);
    }
    let [x1, x2, x3] = realigned.map(|v| v.ok_or_else(|| Error::InvalidArgument("missing tap".into())));
    Ok(ncd(g, x1?, x2?, x3?, &p.ncd)?.out)
}

/// Image to `C_N x 50 x 50` frequency-aware features.
pub fn cfm_forward(
    g: &mut Graph,
    image: Var,
    backbone: &BackboneParams<Var>,
    p: &CfmParams<Var>,
    cfg: &CfmConfig,
) -> Result<Var> {
    let taps = toy_backbone(g, image, backbone)?;
    cfm_from_taps(g, &taps, p, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backbone_tap_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bp = BackboneParams::init([8, 16, 32], &mut rng);
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&[3, 64, 64], &mut rng));
        let bv = bind(&mut g, &bp, false);
        let taps = toy_backbone(&mut g, img, &bv).unwrap();
        assert_eq!(g.shape(taps.low_level), &[8, 32, 32]);
        assert_eq!(g.shape(taps.mid_level), &[16, 16, 16]);
        assert_eq!(g.shape(taps.high_level), &[32, 8, 8]);
        let bad = g.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(toy_backbone(&mut g, bad, &bv).is_err());
    }

    #[test]
    fn backbone_zero_input_zero_bias_gives_zero_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bp = BackboneParams::init([4, 4, 4], &mut rng);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 16, 16]));
        let bv = bind(&mut g, &bp, false);
        let taps = toy_backbone(&mut g, img, &bv).unwrap();
        for t in taps.as_array() {
            assert!(g.value(*t).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn split_routes_channels() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 16];
        data.extend(vec![1.0; 16]);
        let x = g.constant(Tensor::new(vec![2, 4, 4], data).unwrap());
        let pair = octave_split(&mut g, x).unwrap();
        assert_eq!(g.value(pair.high), &Tensor::zeros(&[1, 4, 4]));
        assert_eq!(g.value(pair.low), &Tensor::ones(&[1, 2, 2]));
        let odd = g.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(octave_split(&mut g, odd).is_err());
    }

    #[test]
    fn split_of_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 6, 6], 0.7));
        let pair = octave_split(&mut g, x).unwrap();
        assert_eq!(g.value(pair.high), &Tensor::full(&[2, 6, 6], 0.7));
        assert_eq!(g.value(pair.low), &Tensor::full(&[2, 3, 3], 0.7));
    }

    #[test]
    fn octave_conv_zero_weights_gives_zero_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let high = g.constant(rand_tensor(&[2, 8, 8], &mut rng));
        let low = g.constant(rand_tensor(&[2, 4, 4], &mut rng));
        let w = bind(&mut g, &OctaveWeights::zeros(2, 3, 3), false);
        let out = octave_conv(&mut g, FrequencyPair { high, low }, &w).unwrap();
        assert_eq!(g.value(out.high), &Tensor::zeros(&[3, 8, 8]));
        assert_eq!(g.value(out.low), &Tensor::zeros(&[3, 4, 4]));
    }

    #[test]
    fn octave_conv_rejects_bad_pairs() {
        let mut g = Graph::new();
        let w = bind(&mut g, &OctaveWeights::zeros(2, 2, 3), false);
        let high = g.constant(Tensor::zeros(&[2, 8, 8]));
        let low = g.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(octave_conv(&mut g, FrequencyPair { high, low }, &w).is_err());
        let low = g.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(octave_conv(&mut g, FrequencyPair { high, low }, &w).is_err());
    }

    #[test]
    fn realign_constants_add() {
        let mut g = Graph::new();
        let high = g.constant(Tensor::full(&[2, 8, 8], 1.5));
        let low = g.constant(Tensor::full(&[2, 4, 4], -0.25));
        let f = fam_realign(&mut g, FrequencyPair { high, low }, 50, 50).unwrap();
        assert_eq!(g.shape(f), &[2, 50, 50]);
        assert!(g.value(f).data().iter().all(|&v| (v - 1.25).abs() < 1e-6));
    }

    #[test]
    fn realign_with_zero_low_is_resized_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = rand_tensor(&[2, 8, 8], &mut rng);
        let mut g = Graph::new();
        let high = g.constant(h.clone());
        let low = g.constant(Tensor::zeros(&[2, 4, 4]));
        let f = fam_realign(&mut g, FrequencyPair { high, low }, 13, 13).unwrap();
        let expected = kernels::bilinear_resize(&h, 13, 13).unwrap();
        assert_eq!(g.value(f), &expected);
    }

    #[test]
    fn ncd_ones_chain() {
        let c = 2;
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[c, 4, 4]));
        let fuse = ConvParams {
            weight: Tensor::full(&[3, 3 * c, 3, 3], 1.0 / (3 * c) as f32),
            bias: Tensor::zeros(&[3]),
        };
        let p = bind(&mut g, &NcdParams { fuse }, false);
        let out = ncd(&mut g, ones, ones, ones, &p).unwrap();
        for v in [out.f11, out.f12, out.f21] {
            assert_eq!(g.value(v), &Tensor::ones(&[c, 4, 4]));
        }
        assert_eq!(g.shape(out.out), &[3, 4, 4]);
        assert!(g.value(out.out).is_finite());
    }

    #[test]
    fn ncd_zero_mid_level_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 2;
        let mut g = Graph::new();
        let x1 = g.constant(rand_tensor(&[c, 16, 16], &mut rng));
        let x2 = g.constant(Tensor::zeros(&[c, 8, 8]));
        let x3 = g.constant(rand_tensor(&[c, 4, 4], &mut rng));
        let mut prng = ChaCha8Rng::seed_from_u64(8);
        let p = bind(
            &mut g,
            &NcdParams {
                fuse: ConvParams::init(4, 3 * c, 3, 1.0, &mut prng),
            },
            false,
        );
        let out = ncd(&mut g, x1, x2, x3, &p).unwrap();
        for v in [out.f11, out.f12, out.f21] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
        let first = g.value(out.f3).slice_channels(0, c).unwrap();
        assert!(first.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ncd_rejects_channel_mismatch_and_inverted_pyramid() {
        let mut g = Graph::new();
        let p = bind(
            &mut g,
            &NcdParams {
                fuse: ConvParams::zeros(2, 6, 3),
            },
            false,
        );
        let a = g.constant(Tensor::zeros(&[2, 8, 8]));
        let b = g.constant(Tensor::zeros(&[3, 4, 4]));
        let small = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(ncd(&mut g, a, b, small, &p).is_err());
        assert!(ncd(&mut g, small, a, small, &p).is_err());
    }

    #[test]
    fn cfm_forward_shape_and_zero_params() {
        let cfg = CfmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bp = BackboneParams::init(cfg.backbone_channels, &mut rng);
        for side in [32usize, 64] {
            let mut g = Graph::new();
            let img = g.constant(rand_tensor(&[3, side, side], &mut rng));
            let bv = bind(&mut g, &bp, false);
            let cp = bind(&mut g, &CfmParams::init(&cfg, &mut rng), false);
            let out = cfm_forward(&mut g, img, &bv, &cp, &cfg).unwrap();
            assert_eq!(g.shape(out), &[cfg.out_channels, CANONICAL_GRID, CANONICAL_GRID]);
        }
        let mut g = Graph::new();
        let img = g.constant(rand_tensor(&[3, 64, 64], &mut rng));
        let bv = bind(&mut g, &bp, false);
        let cp = bind(&mut g, &CfmParams::zeros(&cfg), false);
        let out = cfm_forward(&mut g, img, &bv, &cp, &cfg).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_depth_tap_selections_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for taps in [TapSelection::LowOnly, TapSelection::MidOnly, TapSelection::HighOnly] {
            let cfg = CfmConfig {
                taps,
                ..CfmConfig::default()
            };
            let bp = BackboneParams::init(cfg.backbone_channels, &mut rng);
            let mut g = Graph::new();
            let img = g.constant(rand_tensor(&[3, 32, 32], &mut rng));
            let bv = bind(&mut g, &bp, false);
            let cp = bind(&mut g, &CfmParams::init(&cfg, &mut rng), false);
            let out = cfm_forward(&mut g, img, &bv, &cp, &cfg).unwrap();
            assert_eq!(g.shape(out), &[cfg.out_channels, 50, 50]);
        }
    }
}
