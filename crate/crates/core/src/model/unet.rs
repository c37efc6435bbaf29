//! U-Net style encoder-decoder with skip connections.
//!
//! All parameters live in one flat `f32` vector addressed by named slots, so
//! the optimizer and the checkpoint format see a single contiguous buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    col2im3, conv3_backward, conv3_forward, im2col3, maxpool2, maxpool2_backward, relu_backward, relu_inplace,
    upconv2_backward, upconv2_forward,
};
use super::LocalizationMap;
use crate::error::{invalid_input, invalid_param, Result};
use crate::image::{Map, RgbImage};
use crate::linalg::gemm;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of resolution levels; the image is pooled `encoder_depth - 1`
    /// times.
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub skip_connections: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(input_width: usize, input_height: usize) -> Self {
        Self {
            encoder_depth: 4,
            base_channels: 32,
            input_width,
            input_height,
            skip_connections: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth == 0 || self.base_channels == 0 {
            return Err(invalid_param("encoder depth and base channels must be positive"));
        }
        if !self.skip_connections {
            return Err(invalid_param("the localization network always uses skip connections"));
        }
        let div = 1usize << (self.encoder_depth - 1);
        if self.input_width == 0
            || self.input_height == 0
            || !self.input_width.is_multiple_of(div)
            || !self.input_height.is_multiple_of(div)
        {
            return Err(invalid_param(format!(
                "input {}x{} must be a positive multiple of {div} for depth {}",
                self.input_width, self.input_height, self.encoder_depth
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// A named region of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Level {
    enc: [Conv; 2],
    /// Upsampling from the level below plus the two decoder convs; absent on
    /// the bottom level.
    dec: Option<(Conv, [Conv; 2])>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: ModelConfig,
    slots: Vec<ParamSlot>,
    params: Vec<f32>,
    levels: Vec<Level>,
    head: Conv,
}

/// Activations kept for the backward pass of one image.
pub struct ForwardCache {
    enc_cols: Vec<[Vec<f32>; 2]>,
    enc_outs: Vec<[Vec<f32>; 2]>,
    pool_args: Vec<Vec<u32>>,
    up_inputs: Vec<Vec<f32>>,
    dec_cols: Vec<[Vec<f32>; 2]>,
    dec_outs: Vec<[Vec<f32>; 2]>,
    head_input: Vec<f32>,
    fg: Vec<f32>,
}

impl UNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut slots = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let slot = ParamSlot {
                name,
                shape,
                offset: total,
            };
            total += slot.len();
            slots.push(slot);
            slots.len() - 1
        };
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize| {
            let w = add(format!("{name}.weight"), vec![cout, cin, k, k]);
            let b = add(format!("{name}.bias"), vec![cout]);
            Conv { cin, cout, w, b }
        };
        let depth = cfg.encoder_depth;
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { 3 } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            levels.push(Level {
                enc: [
                    conv(&format!("enc{l}.conv1"), cin, c, 3),
                    conv(&format!("enc{l}.conv2"), c, c, 3),
                ],
                dec: None,
            });
        }
        for l in (0..depth.saturating_sub(1)).rev() {
            let c = cfg.channels(l);
            let up = conv(&format!("dec{l}.up"), cfg.channels(l + 1), c, 2);
            levels[l].dec = Some((
                up,
                [
                    conv(&format!("dec{l}.conv1"), 2 * c, c, 3),
                    conv(&format!("dec{l}.conv2"), c, c, 3),
                ],
            ));
        }
        let head = conv("head", cfg.channels(0), 2, 1);
        let mut net = Self {
            params: vec![0.0; total],
            cfg,
            slots,
            levels,
            head,
        };
        net.initialize();
        Ok(net)
    }

    /// Fan-in scaled normal weights, zero biases.
    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.init_seed);
        for slot in &self.slots {
            if !slot.name.ends_with(".weight") {
                continue;
            }
            // upsampling weights are (cout, cin, 2, 2); each output sees cin inputs
            let fan_in = if slot.name.ends_with(".up.weight") {
                slot.shape[1]
            } else {
                slot.shape[1] * slot.shape[2] * slot.shape[3]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut self.params[slot.range()] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(invalid_input("parameter vector length mismatch"));
        }
        self.params = params;
        Ok(())
    }

    fn slot(&self, i: usize) -> &[f32] {
        &self.params[self.slots[i].range()]
    }

    fn to_tensor(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.width() != self.cfg.input_width || image.height() != self.cfg.input_height {
            return Err(invalid_input(format!(
                "image is {}x{}, model expects {}x{}",
                image.width(),
                image.height(),
                self.cfg.input_width,
                self.cfg.input_height
            )));
        }
        if !image.is_finite() {
            return Err(invalid_input("image contains non-finite values"));
        }
        let hw = image.width() * image.height();
        let mut t = vec![0.0f32; 3 * hw];
        for (i, px) in image.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                t[c * hw + i] = px[c] as f32;
            }
        }
        Ok(t)
    }

    fn conv_relu(&self, conv: &Conv, input: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let mut col = Vec::new();
        im2col3(input, conv.cin, h, w, &mut col);
        let mut out = vec![0.0; conv.cout * h * w];
        conv3_forward(&col, self.slot(conv.w), self.slot(conv.b), conv.cout, h * w, &mut out);
        relu_inplace(&mut out);
        (col, out)
    }

    pub fn forward(&self, image: &RgbImage) -> Result<LocalizationMap> {
        let (_, map) = self.forward_cached(image)?;
        Ok(map)
    }

    /// Forward pass keeping every activation needed by [`UNet::backward`].
    pub fn forward_cached(&self, image: &RgbImage) -> Result<(ForwardCache, LocalizationMap)> {
        let depth = self.cfg.encoder_depth;
        let (mut h, mut w) = (self.cfg.input_height, self.cfg.input_width);
        let mut x = self.to_tensor(image)?;
        let mut cache = ForwardCache {
            enc_cols: Vec::with_capacity(depth),
            enc_outs: Vec::with_capacity(depth),
            pool_args: Vec::with_capacity(depth),
            up_inputs: vec![Vec::new(); depth],
            dec_cols: vec![[Vec::new(), Vec::new()]; depth],
            dec_outs: vec![[Vec::new(), Vec::new()]; depth],
            head_input: Vec::new(),
            fg: Vec::new(),
        };
        for (l, level) in self.levels.iter().enumerate() {
            let (col1, a) = self.conv_relu(&level.enc[0], &x, h, w);
            let (col2, b) = self.conv_relu(&level.enc[1], &a, h, w);
            if l + 1 < depth {
                let (pooled, arg) = maxpool2(&b, level.enc[1].cout, h, w);
                cache.pool_args.push(arg);
                x = pooled;
                h /= 2;
                w /= 2;
            } else {
                x = b.clone();
            }
            cache.enc_cols.push([col1, col2]);
            cache.enc_outs.push([a, b]);
        }
        let mut scratch = Vec::new();
        for l in (0..depth.saturating_sub(1)).rev() {
            let (up, convs) = self.levels[l].dec.as_ref().expect("decoder level");
            let u = upconv2_forward(
                &x,
                up.cin,
                h,
                w,
                self.slot(up.w),
                self.slot(up.b),
                up.cout,
                &mut scratch,
            );
            cache.up_inputs[l] = std::mem::take(&mut x);
            h *= 2;
            w *= 2;
            let mut cat = u;
            cat.extend_from_slice(&cache.enc_outs[l][1]);
            let (col1, a) = self.conv_relu(&convs[0], &cat, h, w);
            let (col2, b) = self.conv_relu(&convs[1], &a, h, w);
            x = b.clone();
            cache.dec_cols[l] = [col1, col2];
            cache.dec_outs[l] = [a, b];
        }
        let hw = h * w;
        let mut logits = vec![0.0f32; 2 * hw];
        for (co, row) in logits.chunks_exact_mut(hw).enumerate() {
            row.fill(self.slot(self.head.b)[co]);
        }
        gemm(
            2,
            self.head.cin,
            hw,
            1.0,
            self.slot(self.head.w),
            false,
            &x,
            false,
            1.0,
            &mut logits,
        );
        cache.head_input = x;
        let fg: Vec<f32> = (0..hw)
            .map(|i| {
                let d = logits[i] - logits[hw + i];
                1.0 / (1.0 + (-d).exp())
            })
            .collect();
        let fg_map = Map::from_vec(w, h, fg.iter().map(|&v| v as f64).collect())?;
        let bg_map = Map::from_vec(w, h, fg.iter().map(|&v| (1.0 - v) as f64).collect())?;
        cache.fg = fg;
        Ok((cache, LocalizationMap { fg: fg_map, bg: bg_map }))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂M1` for one image.
    pub fn backward(&self, cache: &ForwardCache, grad_fg: &Map, grads: &mut [f32]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(invalid_input("gradient buffer has the wrong length"));
        }
        let (mut h, mut w) = (self.cfg.input_height, self.cfg.input_width);
        let hw = h * w;
        if grad_fg.width() != w || grad_fg.height() != h {
            return Err(invalid_input("map gradient has the wrong shape"));
        }
        let depth = self.cfg.encoder_depth;
        // d/dz of the two-channel softmax: ∂M1/∂z1 = M1·M2 = -∂M1/∂z2
        let mut dlogits = vec![0.0f32; 2 * hw];
        for i in 0..hw {
            let m = cache.fg[i];
            let g = grad_fg.data()[i] as f32 * m * (1.0 - m);
            dlogits[i] = g;
            dlogits[hw + i] = -g;
        }
        let mut dp = vec![0.0f32; grads.len()];
        let c0 = self.head.cin;
        {
            let (dw, db) = self.weight_bias_mut(&self.head, &mut dp);
            gemm(2, hw, c0, 1.0, &dlogits, false, &cache.head_input, true, 1.0, dw);
            for (co, b) in db.iter_mut().enumerate() {
                *b += dlogits[co * hw..(co + 1) * hw].iter().sum::<f32>();
            }
        }
        let mut g = vec![0.0f32; c0 * hw];
        gemm(
            c0,
            2,
            hw,
            1.0,
            self.slot(self.head.w),
            true,
            &dlogits,
            false,
            0.0,
            &mut g,
        );

        let mut dskips: Vec<Vec<f32>> = Vec::with_capacity(depth);
        let mut dcol = Vec::new();
        let mut scratch = Vec::new();
        for l in 0..depth.saturating_sub(1) {
            let (up, convs) = self.levels[l].dec.as_ref().expect("decoder level");
            let din = self.conv_backward(
                &convs[1],
                &cache.dec_cols[l][1],
                &cache.dec_outs[l][1],
                g,
                h,
                w,
                &mut dp,
                &mut dcol,
            );
            let dcat = self.conv_backward(
                &convs[0],
                &cache.dec_cols[l][0],
                &cache.dec_outs[l][0],
                din,
                h,
                w,
                &mut dp,
                &mut dcol,
            );
            let c = up.cout;
            let (du, dskip) = dcat.split_at(c * h * w);
            dskips.push(dskip.to_vec());
            h /= 2;
            w /= 2;
            let (dw, db) = self.weight_bias_mut(up, &mut dp);
            g = upconv2_backward(
                &cache.up_inputs[l],
                up.cin,
                h,
                w,
                self.slot(up.w),
                up.cout,
                du,
                dw,
                db,
                &mut scratch,
            );
        }
        for l in (0..depth).rev() {
            if l + 1 < depth {
                for (a, b) in g.iter_mut().zip(&dskips[l]) {
                    *a += b;
                }
            }
            let level = &self.levels[l];
            let da = self.conv_backward(
                &level.enc[1],
                &cache.enc_cols[l][1],
                &cache.enc_outs[l][1],
                std::mem::take(&mut g),
                h,
                w,
                &mut dp,
                &mut dcol,
            );
            let dx = self.conv_backward(
                &level.enc[0],
                &cache.enc_cols[l][0],
                &cache.enc_outs[l][0],
                da,
                h,
                w,
                &mut dp,
                &mut dcol,
            );
            if l > 0 {
                let c = self.levels[l - 1].enc[1].cout;
                let mut up = vec![0.0f32; c * 4 * h * w];
                maxpool2_backward(&dx, &cache.pool_args[l - 1], &mut up);
                g = up;
                h *= 2;
                w *= 2;
            }
        }
        for (a, b) in grads.iter_mut().zip(&dp) {
            *a += b;
        }
        Ok(())
    }

    /// Gradient views of a layer's weight and bias; the bias slot directly
    /// follows the weight slot.
    fn weight_bias_mut<'a>(&self, conv: &Conv, dp: &'a mut [f32]) -> (&'a mut [f32], &'a mut [f32]) {
        let (ws, bs) = (&self.slots[conv.w], &self.slots[conv.b]);
        debug_assert_eq!(ws.offset + ws.len(), bs.offset);
        dp[ws.offset..bs.offset + bs.len()].split_at_mut(ws.len())
    }

    /// Back through `relu(conv(x))`; returns `∂L/∂x`.
    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        conv: &Conv,
        col: &[f32],
        out: &[f32],
        mut dout: Vec<f32>,
        h: usize,
        w: usize,
        dp: &mut [f32],
        dcol: &mut Vec<f32>,
    ) -> Vec<f32> {
        relu_backward(out, &mut dout);
        let (dw, db) = self.weight_bias_mut(conv, dp);
        conv3_backward(col, self.slot(conv.w), &dout, conv.cout, h * w, dw, db, dcol);
        let mut dx = vec![0.0f32; conv.cin * h * w];
        col2im3(dcol, conv.cin, h, w, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(depth: usize, base: usize, w: usize, h: usize) -> ModelConfig {
        ModelConfig {
            encoder_depth: depth,
            base_channels: base,
            input_width: w,
            input_height: h,
            skip_connections: true,
            init_seed: 7,
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn output_is_a_two_channel_softmax() {
        let net = UNet::new(small_cfg(3, 4, 16, 8)).unwrap();
        let out = net.forward(&random_image(16, 8, 1)).unwrap();
        assert_eq!((out.width(), out.height()), (16, 8));
        for (a, b) in out.fg.data().iter().zip(out.bg.data()) {
            assert!((a + b - 1.0).abs() <= 1e-5);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn default_parameter_count() {
        let cfg = ModelConfig::new(64, 64);
        let a = UNet::new(cfg.clone()).unwrap();
        let b = UNet::new(cfg).unwrap();
        // 3x3 convs (c_in·9 + 1)·c_out, 2x2 up-convs (c_in·4 + 1)·c_out, 1x1 head
        let conv = |i: usize, o: usize| (i * 9 + 1) * o;
        let up = |i: usize, o: usize| (i * 4 + 1) * o;
        let enc = conv(3, 32)
            + conv(32, 32)
            + conv(32, 64)
            + conv(64, 64)
            + conv(64, 128)
            + conv(128, 128)
            + conv(128, 256)
            + conv(256, 256);
        let dec = up(256, 128)
            + conv(256, 128)
            + conv(128, 128)
            + up(128, 64)
            + conv(128, 64)
            + conv(64, 64)
            + up(64, 32)
            + conv(64, 32)
            + conv(32, 32);
        let head = 32 * 2 + 2;
        assert_eq!(a.parameter_count(), enc + dec + head);
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.params(), b.params());
        assert!((1_800_000..2_100_000).contains(&a.parameter_count()));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(UNet::new(small_cfg(3, 4, 10, 8)).is_err());
        let net = UNet::new(small_cfg(2, 2, 8, 8)).unwrap();
        assert!(matches!(
            net.forward(&random_image(8, 6, 0)),
            Err(crate::DipsError::InvalidInput(_))
        ));
    }

    /// `L = Σ_p g_p · M1(p)` for a fixed random `g`.
    fn probe_loss(net: &UNet, image: &RgbImage, g: &Map) -> f64 {
        let out = net.forward(image).unwrap();
        out.fg.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = UNet::new(small_cfg(2, 3, 8, 8)).unwrap();
        let image = random_image(8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Map::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let (cache, _) = net.forward_cached(&image).unwrap();
        let mut grads = vec![0.0f32; net.parameter_count()];
        net.backward(&cache, &g, &mut grads).unwrap();
        let h = 2e-4f32;
        let mut checked = 0;
        let mut bad = Vec::new();
        for slot in net.slots().to_vec() {
            for k in [0, slot.len() / 2, slot.len() - 1] {
                let i = slot.offset + k;
                let orig = net.params()[i];
                net.params_mut()[i] = orig + h;
                let up = probe_loss(&net, &image, &g);
                net.params_mut()[i] = orig - h;
                let down = probe_loss(&net, &image, &g);
                net.params_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads[i] as f64;
                checked += 1;
                if (an - fd).abs() > 2e-2 * an.abs().max(fd.abs()) + 2e-3 {
                    bad.push((slot.name.clone(), k, an, fd));
                }
            }
        }
        // a ReLU kink crossed by the probe can spoil an isolated entry
        assert!(bad.is_empty(), "{checked} {bad:?}");
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let net = UNet::new(small_cfg(3, 4, 16, 16)).unwrap();
        let mut grads = vec![0.0f32; net.parameter_count()];
        for seed in 0..4 {
            let image = random_image(16, 16, seed);
            let (cache, out) = net.forward_cached(&image).unwrap();
            // partial cross-entropy style signal on a few pixels
            let g = Map::from_fn(16, 16, |x, y| match (x + 3 * y) % 7 {
                0 => -1.0 / out.fg.get(x, y),
                1 => 1.0 / out.bg.get(x, y),
                _ => 0.0,
            });
            net.backward(&cache, &g, &mut grads).unwrap();
        }
        for slot in net.slots() {
            let any = grads[slot.offset..slot.offset + slot.len()].iter().any(|v| *v != 0.0);
            assert!(any, "no gradient reaches {}", slot.name);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = UNet::new(small_cfg(3, 4, 16, 16)).unwrap();
        let image = random_image(16, 16, 3);
        assert_eq!(net.forward(&image).unwrap(), net.forward(&image).unwrap());
    }
}
