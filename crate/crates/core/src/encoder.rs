//! Convolutional backbone plus top-down neck producing a four-level feature
//! pyramid at strides {4, 8, 16, 32} with a shared channel width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2d, GroupNorm, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub c_neck: usize,
    pub widths: [usize; 4],
    pub gn_group_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            c_neck: 32,
            widths: [16, 32, 64, 128],
            gn_group_size: 8,
        }
    }
}

/// Four feature maps; spatial sizes halve exactly between levels.
pub struct MultiScaleFeatures {
    pub levels: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
    pub channels: usize,
}

struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        group_size: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, 3, stride, true),
            norm: GroupNorm::new(store, &format!("{name}.gn"), out_ch, group_size),
        }
    }

    fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        t.relu(self.norm.forward(t, store, self.conv.forward(t, store, x)))
    }
}

pub struct Encoder {
    stem: ConvBlock,
    stages: Vec<(ConvBlock, ConvBlock)>,
    laterals: Vec<Conv2d>,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: EncoderConfig) -> Self {
        let g = cfg.gn_group_size;
        let stem = ConvBlock::new(store, rng, "enc.stem", 3, cfg.widths[0], 2, g);
        let mut stages = Vec::new();
        let mut prev = cfg.widths[0];
        for (i, &wdt) in cfg.widths.iter().enumerate() {
            let a = ConvBlock::new(store, rng, &format!("enc.s{i}.a"), prev, wdt, 2, g);
            let b = ConvBlock::new(store, rng, &format!("enc.s{i}.b"), wdt, wdt, 1, g);
            stages.push((a, b));
            prev = wdt;
        }
        let laterals = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &wdt)| {
                Conv2d::new(store, rng, &format!("enc.lat{i}"), wdt, cfg.c_neck, 1, 1, true)
            })
            .collect();
        Encoder { stem, stages, laterals, cfg }
    }

    /// Runs the backbone and neck. The input must be `[3,H,W]` with both
    /// spatial dimensions divisible by 32.
    pub fn forward(&self, t: &Tape, store: &ParamStore, image: Var) -> Result<MultiScaleFeatures> {
        let shape = t.shape(image);
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by 32"
            )));
        }
        let mut x = self.stem.forward(t, store, image);
        let mut stage_outs = Vec::with_capacity(4);
        for (a, b) in &self.stages {
            x = b.forward(t, store, a.forward(t, store, x));
            stage_outs.push(x);
        }
        // top-down: lateral projections plus nearest-neighbor upsampling
        let mut tops: Vec<Var> = vec![Var(0); 4];
        let mut prev: Option<Var> = None;
        for i in (0..4).rev() {
            let lat = self.laterals[i].forward(t, store, stage_outs[i]);
            let merged = match prev {
                Some(p) => t.add(lat, t.nearest_up2(p)),
                None => lat,
            };
            tops[i] = merged;
            prev = Some(merged);
        }
        let sizes: Vec<(usize, usize)> = (0..4)
            .map(|i| {
                let s = t.shape(tops[i]);
                (s[1], s[2])
            })
            .collect();
        debug_assert_eq!(sizes[0], (h / 4, w / 4));
        Ok(MultiScaleFeatures {
            levels: tops,
            sizes,
            channels: self.cfg.c_neck,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Arr {
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Arr::from_shape_vec(IxDyn(&[3, h, w]), data).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        let t = Tape::new();
        let img = t.constant(rand_image(&mut rng, 64, 64));
        let ms = enc.forward(&t, &store, img).unwrap();
        assert_eq!(ms.sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        for &lvl in &ms.levels {
            assert_eq!(t.shape(lvl)[0], 32);
        }
    }

    #[test]
    fn pyramid_shapes_for_32_and_other_sizes() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        for (h, w) in [(32, 32), (32, 64), (96, 32)] {
            let t = Tape::new();
            let img = t.constant(rand_image(&mut rng, h, w));
            let ms = enc.forward(&t, &store, img).unwrap();
            let expect: Vec<(usize, usize)> =
                [4, 8, 16, 32].iter().map(|s| (h / s, w / s)).collect();
            assert_eq!(ms.sizes, expect);
            // halving between consecutive levels
            for i in 1..4 {
                assert_eq!(ms.sizes[i - 1].0, 2 * ms.sizes[i].0);
                assert_eq!(ms.sizes[i - 1].1, 2 * ms.sizes[i].1);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        let t = Tape::new();
        let img = t.constant(Arr::zeros(IxDyn(&[3, 50, 64])));
        assert!(enc.forward(&t, &store, img).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        let img = rand_image(&mut rng, 32, 32);
        let run = || {
            let t = Tape::new();
            let v = t.constant(img.clone());
            let ms = enc.forward(&t, &store, v).unwrap();
            t.value(ms.levels[0]).as_ref().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderConfig::default());
        let img = rand_image(&mut rng, 32, 32);
        let loss = |store: &ParamStore| {
            let t = Tape::new();
            let v = t.constant(img.clone());
            let ms = enc.forward(&t, store, v).unwrap();
            // weighted sum so gradients are informative
            let mut total = None;
            for (i, &lvl) in ms.levels.iter().enumerate() {
                let s = t.mul_scalar(t.sum(t.mul(lvl, lvl)), 0.3 + 0.2 * i as f64);
                total = Some(match total {
                    None => s,
                    Some(acc) => t.add(acc, s),
                });
            }
            (t, total.unwrap())
        };
        let (t, l) = loss(&store);
        let grads = t.backward(l);

        // probe a handful of parameters end to end, perturbing in place
        let ids: Vec<_> = store.ids().collect();
        for probe in [0usize, 3, 11, 20, ids.len() - 1] {
            let id = ids[probe];
            let analytic = grads.param(id).cloned().unwrap();
            let base = store.value(id).as_ref().clone();
            let take = base.len().min(4);
            for k in 0..take {
                let orig = base.as_slice().unwrap()[k];
                let step = 1e-5 * orig.abs().max(1.0);
                let mut perturbed = base.clone();
                perturbed.as_slice_mut().unwrap()[k] = orig + step;
                store.set(id, perturbed.clone());
                let (tp, lp) = loss(&store);
                let fp = tp.scalar(lp);
                perturbed.as_slice_mut().unwrap()[k] = orig - step;
                store.set(id, perturbed);
                let (tm, lm) = loss(&store);
                let fm = tm.scalar(lm);
                store.set(id, base.clone());
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic.as_slice().unwrap()[k];
                let m = a.abs().max(numeric.abs());
                let rel = if m < 1e-6 { 0.0 } else { (a - numeric).abs() / m };
                assert!(rel < 1e-4, "param {probe} entry {k}: rel {rel}");
            }
        }
    }
}
