//! Pretrained style-based generator (StyleGAN2 synthesis network) read from
//! a safetensors export of a `Generator` state dict in the widely used
//! PyTorch layout (`input.input`, `conv1.*`, `to_rgb1.*`, `convs.{i}.*`,
//! `to_rgbs.{i}.*`, `style.{k}.*`, optional `latent_avg`). A leading
//! `g_ema.` on every key is accepted.
//!
//! One style vector drives each convolution; the RGB head at a resolution
//! reuses the style vector of the last convolution at that resolution, so a
//! 512² model has `L = 15`. Noise map `j` feeds convolution `j`.
//!
//! The output `(rgb + 1) / 2` is returned unclamped; the backward pass is
//! the exact adjoint of the forward computation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GeneratorBackend, LatentGeometry, LatentGrad, LatentState};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::image::Image;
use crate::nn::{self, UpFirDn};
use crate::weights::{Tensor, WeightStore};

const DEMOD_EPS: f64 = 1e-8;
const LRELU_SLOPE: f64 = 0.2;
const MAPPING_LR_MUL: f64 = 0.01;
const MAPPING_LAYERS: usize = 8;
/// Samples averaged for `ŵ` when the file carries no `latent_avg`.
const MEAN_LATENT_SAMPLES: usize = 4096;

#[derive(Clone, Debug)]
struct ModConv {
    cin: usize,
    cout: usize,
    k: usize,
    weight: Vec<f64>,
    mod_weight: Vec<f64>,
    mod_bias: Vec<f64>,
    demodulate: bool,
}

struct Modulated {
    s: Vec<f64>,
    weight: Vec<f64>,
    demod: Option<Vec<f64>>,
}

impl ModConv {
    fn scale(&self) -> f64 {
        1.0 / ((self.cin * self.k * self.k) as f64).sqrt()
    }

    fn modulate(&self, w: &[f64]) -> Modulated {
        let dim = w.len();
        let g = 1.0 / (dim as f64).sqrt();
        let s: Vec<f64> = (0..self.cin)
            .map(|i| {
                let row = &self.mod_weight[i * dim..(i + 1) * dim];
                row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() * g + self.mod_bias[i]
            })
            .collect();
        let kk = self.k * self.k;
        let scale = self.scale();
        let mut weight = vec![0.0; self.weight.len()];
        for o in 0..self.cout {
            for i in 0..self.cin {
                let base = (o * self.cin + i) * kk;
                for t in 0..kk {
                    weight[base + t] = scale * self.weight[base + t] * s[i];
                }
            }
        }
        let demod = self.demodulate.then(|| {
            let per = self.cin * kk;
            (0..self.cout)
                .map(|o| {
                    let ss: f64 = weight[o * per..(o + 1) * per].iter().map(|v| v * v).sum();
                    1.0 / (ss + DEMOD_EPS).sqrt()
                })
                .collect::<Vec<f64>>()
        });
        if let Some(d) = &demod {
            let per = self.cin * kk;
            for o in 0..self.cout {
                weight[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= d[o]);
            }
        }
        Modulated { s, weight, demod }
    }

    /// Gradient on the style vector from a gradient on the final weight.
    fn modulation_backward(&self, m: &Modulated, gweight: &[f64], dim: usize) -> Vec<f64> {
        let kk = self.k * self.k;
        let per = self.cin * kk;
        let scale = self.scale();
        let mut gs = vec![0.0; self.cin];
        for o in 0..self.cout {
            let gw = &gweight[o * per..(o + 1) * per];
            let base = &self.weight[o * per..(o + 1) * per];
            // pre-demodulation weight m = scale·W·s
            let (d, dot) = match &m.demod {
                Some(d) => {
                    let mut dot = 0.0;
                    for i in 0..self.cin {
                        for t in 0..kk {
                            dot += gw[i * kk + t] * scale * base[i * kk + t] * m.s[i];
                        }
                    }
                    (d[o], dot)
                }
                None => (1.0, 0.0),
            };
            let d3 = d * d * d;
            for i in 0..self.cin {
                let mut acc = 0.0;
                for t in 0..kk {
                    let wb = scale * base[i * kk + t];
                    let gm = gw[i * kk + t] * d - d3 * wb * m.s[i] * dot;
                    acc += gm * wb;
                }
                gs[i] += acc;
            }
        }
        let g = 1.0 / (dim as f64).sqrt();
        let mut gwv = vec![0.0; dim];
        for i in 0..self.cin {
            let row = &self.mod_weight[i * dim..(i + 1) * dim];
            for (a, r) in gwv.iter_mut().zip(row) {
                *a += gs[i] * r * g;
            }
        }
        gwv
    }
}

#[derive(Clone, Debug)]
struct StyledLayer {
    conv: ModConv,
    upsample: bool,
    noise_strength: f64,
    act_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
struct RgbHead {
    conv: ModConv,
    bias: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct StyleSynth {
    geometry: LatentGeometry,
    input: FeatureMap,
    /// Convolutions in order; layer `j` uses style row `j` and noise `j`.
    layers: Vec<StyledLayer>,
    /// One head per resolution.
    heads: Vec<RgbHead>,
    mean_latent: Vec<f64>,
    blur: UpFirDn,
    upsample: UpFirDn,
}

struct LayerTrace {
    x: FeatureMap,
    m: Modulated,
    /// Pre-blur transposed-conv output side (upsampling layers).
    t_side: usize,
    z: FeatureMap,
}

struct HeadTrace {
    x: FeatureMap,
    m: Modulated,
}

struct Trace {
    layers: Vec<LayerTrace>,
    heads: Vec<HeadTrace>,
}

fn lrelu(v: f64) -> f64 {
    std::f64::consts::SQRT_2 * if v > 0.0 { v } else { LRELU_SLOPE * v }
}

fn lrelu_grad(v: f64) -> f64 {
    std::f64::consts::SQRT_2 * if v > 0.0 { 1.0 } else { LRELU_SLOPE }
}

/// Layer index driving the RGB head at resolution stage `k`.
fn head_layer(k: usize) -> usize {
    2 * k
}

struct Keys<'a> {
    store: &'a WeightStore,
    prefix: &'static str,
}

impl Keys<'_> {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.store.get(&format!("{}{name}", self.prefix))
    }

    fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        self.store.expect(&format!("{}{name}", self.prefix), shape)
    }

    fn contains(&self, name: &str) -> bool {
        self.store.contains(&format!("{}{name}", self.prefix))
    }
}

fn load_modconv(keys: &Keys, prefix: &str, cin: usize, k: usize, demodulate: bool) -> Result<ModConv> {
    let t = keys.get(&format!("{prefix}.conv.weight"))?;
    if t.shape.len() != 5 || t.shape[0] != 1 || t.shape[2] != cin || t.shape[3] != k || t.shape[4] != k {
        return Err(Error::Weights(format!(
            "{prefix}.conv.weight has shape {:?}, expected [1, out, {cin}, {k}, {k}]",
            t.shape
        )));
    }
    let cout = t.shape[1];
    let mw = keys.get(&format!("{prefix}.conv.modulation.weight"))?;
    if mw.shape.len() != 2 || mw.shape[0] != cin {
        return Err(Error::Weights(format!("{prefix}.conv.modulation.weight has shape {:?}", mw.shape)));
    }
    let mod_bias = keys.expect(&format!("{prefix}.conv.modulation.bias"), &[cin])?.to_vec();
    Ok(ModConv {
        cin,
        cout,
        k,
        weight: t.data.clone(),
        mod_weight: mw.data.clone(),
        mod_bias,
        demodulate,
    })
}

fn load_layer(keys: &Keys, prefix: &str, cin: usize, upsample: bool) -> Result<StyledLayer> {
    let conv = load_modconv(keys, prefix, cin, 3, true)?;
    let noise_strength = keys.expect(&format!("{prefix}.noise.weight"), &[1])?[0];
    let act_bias = keys.expect(&format!("{prefix}.activate.bias"), &[conv.cout])?.to_vec();
    Ok(StyledLayer {
        conv,
        upsample,
        noise_strength,
        act_bias,
    })
}

fn load_head(keys: &Keys, prefix: &str, cin: usize) -> Result<RgbHead> {
    let conv = load_modconv(keys, prefix, cin, 1, false)?;
    if conv.cout != 3 {
        return Err(Error::Weights(format!("{prefix} must produce 3 channels")));
    }
    let b = keys.expect(&format!("{prefix}.bias"), &[1, 3, 1, 1])?;
    Ok(RgbHead {
        conv,
        bias: [b[0], b[1], b[2]],
    })
}

impl StyleSynth {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let prefix = if store.contains("input.input") { "" } else { "g_ema." };
        let keys = Keys { store, prefix };
        let inp = keys.get("input.input")?;
        if inp.shape.len() != 4 || inp.shape[0] != 1 || inp.shape[2] != 4 || inp.shape[3] != 4 {
            return Err(Error::Weights(format!("input.input has shape {:?}", inp.shape)));
        }
        let c0 = inp.shape[1];
        let input = FeatureMap::from_vec(c0, 4, 4, inp.data.clone())?;

        let mut layers = vec![load_layer(&keys, "conv1", c0, false)?];
        let dim = layers[0].conv.mod_weight.len() / c0;
        let mut heads = vec![load_head(&keys, "to_rgb1", layers[0].conv.cout)?];
        let mut i = 0;
        while keys.contains(&format!("convs.{i}.conv.weight")) {
            let cin = layers.last().expect("conv1").conv.cout;
            let up = load_layer(&keys, &format!("convs.{i}"), cin, true)?;
            let same = load_layer(&keys, &format!("convs.{}", i + 1), up.conv.cout, false)?;
            heads.push(load_head(&keys, &format!("to_rgbs.{}", i / 2), same.conv.cout)?);
            layers.push(up);
            layers.push(same);
            i += 2;
        }
        for l in &layers {
            if l.conv.mod_weight.len() != l.conv.cin * dim {
                return Err(Error::Weights("inconsistent style dimension across layers".into()));
            }
        }
        let stages = heads.len();
        let resolution = 4usize << (stages - 1);
        let noise_sides = (0..layers.len()).map(|j| 4usize << j.div_ceil(2)).collect();
        let geometry = LatentGeometry {
            num_layers: layers.len(),
            dim,
            noise_sides,
            resolution,
        };

        let mean_latent = if keys.contains("latent_avg") {
            keys.expect("latent_avg", &[dim])?.to_vec()
        } else {
            mapped_mean(&keys, dim)?
        };

        Ok(Self {
            geometry,
            input,
            layers,
            heads,
            mean_latent,
            blur: UpFirDn::binomial4(1, 1, 1, 4.0),
            upsample: UpFirDn::binomial4(2, 2, 1, 4.0),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?)
    }

    /// Checks the full-size configuration: 15 style rows of width 512 at 512².
    pub fn check_full_scale(&self) -> Result<()> {
        let g = &self.geometry;
        if g.num_layers == 15 && g.dim == 512 && g.resolution == 512 {
            Ok(())
        } else {
            Err(Error::Weights(format!(
                "expected L=15, D=512 at 512², found L={}, D={} at {}²",
                g.num_layers, g.dim, g.resolution
            )))
        }
    }

    /// Randomly initialised weights in the same layout, for tests and dry
    /// runs. `channels` is used at every resolution.
    pub fn random_store(resolution: usize, channels: usize, dim: usize, seed: u64) -> Result<WeightStore> {
        if !resolution.is_power_of_two() || resolution < 4 {
            return Err(Error::InvalidParameter("resolution must be a power of two ≥ 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        };
        let mut st = WeightStore::new();
        let c = channels;
        st.insert("input.input", Tensor::new(vec![1, c, 4, 4], randn(c * 16, 1.0))?);
        let put_conv = |st: &mut WeightStore, randn: &mut dyn FnMut(usize, f64) -> Vec<f64>, p: &str, cout: usize, k: usize| -> Result<()> {
            st.insert(format!("{p}.conv.weight"), Tensor::new(vec![1, cout, c, k, k], randn(cout * c * k * k, 1.0))?);
            st.insert(format!("{p}.conv.modulation.weight"), Tensor::new(vec![c, dim], randn(c * dim, 1.0))?);
            let b = randn(c, 0.1).into_iter().map(|v| v + 1.0).collect();
            st.insert(format!("{p}.conv.modulation.bias"), Tensor::new(vec![c], b)?);
            Ok(())
        };
        let layer = |st: &mut WeightStore, randn: &mut dyn FnMut(usize, f64) -> Vec<f64>, p: &str| -> Result<()> {
            put_conv(st, randn, p, c, 3)?;
            st.insert(format!("{p}.noise.weight"), Tensor::new(vec![1], randn(1, 0.3))?);
            st.insert(format!("{p}.activate.bias"), Tensor::new(vec![c], randn(c, 0.1))?);
            Ok(())
        };
        layer(&mut st, &mut randn, "conv1")?;
        let head = |st: &mut WeightStore, randn: &mut dyn FnMut(usize, f64) -> Vec<f64>, p: &str| -> Result<()> {
            st.insert(format!("{p}.conv.weight"), Tensor::new(vec![1, 3, c, 1, 1], randn(3 * c, 1.0))?);
            st.insert(format!("{p}.conv.modulation.weight"), Tensor::new(vec![c, dim], randn(c * dim, 1.0))?);
            let b = randn(c, 0.1).into_iter().map(|v| v + 1.0).collect();
            st.insert(format!("{p}.conv.modulation.bias"), Tensor::new(vec![c], b)?);
            st.insert(format!("{p}.bias"), Tensor::new(vec![1, 3, 1, 1], randn(3, 0.1))?);
            Ok(())
        };
        head(&mut st, &mut randn, "to_rgb1")?;
        let stages = resolution.trailing_zeros() as usize - 1;
        for s in 1..stages {
            layer(&mut st, &mut randn, &format!("convs.{}", 2 * s - 2))?;
            layer(&mut st, &mut randn, &format!("convs.{}", 2 * s - 1))?;
            head(&mut st, &mut randn, &format!("to_rgbs.{}", s - 1))?;
        }
        for k in 1..=MAPPING_LAYERS {
            st.insert(format!("style.{k}.weight"), Tensor::new(vec![dim, dim], randn(dim * dim, 100.0))?);
            st.insert(format!("style.{k}.bias"), Tensor::new(vec![dim], randn(dim, 1.0))?);
        }
        Ok(st)
    }

    fn noise_map(&self, state: &LatentState, j: usize) -> FeatureMap {
        let s = self.geometry.noise_sides[j];
        FeatureMap::from_vec(1, s, s, state.noise(j).to_vec()).expect("noise geometry")
    }

    fn run(&self, state: &LatentState) -> (Image, Trace) {
        let mut trace = Trace {
            layers: Vec::with_capacity(self.layers.len()),
            heads: Vec::with_capacity(self.heads.len()),
        };
        let mut x = self.input.clone();
        let mut skip: Option<FeatureMap> = None;
        for (j, layer) in self.layers.iter().enumerate() {
            let m = layer.conv.modulate(state.w(j));
            let (mut z, t_side) = if layer.upsample {
                let t = nn::conv_transpose2d_s2(&x, &m.weight, layer.conv.cout, 3);
                let side = t.height();
                (self.blur.apply(&t), side)
            } else {
                (nn::conv2d(&x, &m.weight, layer.conv.cout, 3, None), 0)
            };
            let noise = self.noise_map(state, j);
            let n = z.positions();
            for o in 0..layer.conv.cout {
                let b = layer.act_bias[o];
                for (v, nz) in z.plane_mut(o).iter_mut().zip(noise.values()) {
                    *v += layer.noise_strength * nz + b;
                }
            }
            debug_assert_eq!(n, noise.values().len());
            let mut out = z.clone();
            out.values_mut().iter_mut().for_each(|v| *v = lrelu(*v));
            trace.layers.push(LayerTrace { x, m, t_side, z });
            x = out;

            if j % 2 == 0 {
                let k = j / 2;
                let head = &self.heads[k];
                let hm = head.conv.modulate(state.w(head_layer(k)));
                let mut rgb = nn::conv2d(&x, &hm.weight, 3, 1, Some(&head.bias));
                if let Some(prev) = &skip {
                    rgb.add_assign(&self.upsample.apply(prev));
                }
                trace.heads.push(HeadTrace { x: x.clone(), m: hm });
                skip = Some(rgb);
            }
        }
        let mut img = skip.expect("at least one head").into_image();
        img.data_mut().iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
        (img, trace)
    }
}

/// `ŵ` as the average mapping-network output over seeded Gaussian codes.
fn mapped_mean(keys: &Keys, dim: usize) -> Result<Vec<f64>> {
    let mut mats = Vec::with_capacity(MAPPING_LAYERS);
    for k in 1..=MAPPING_LAYERS {
        let w = keys.expect(&format!("style.{k}.weight"), &[dim, dim]).map_err(|_| {
            Error::Weights("file has neither latent_avg nor a mapping network to derive the mean latent".into())
        })?;
        let b = keys.expect(&format!("style.{k}.bias"), &[dim])?;
        mats.push((w, b));
    }
    let scale = MAPPING_LR_MUL / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut mean = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut h = vec![0.0; dim];
    for _ in 0..MEAN_LATENT_SAMPLES {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let ms = z.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let inv = 1.0 / (ms + 1e-8).sqrt();
        z.iter_mut().for_each(|v| *v *= inv);
        for (w, b) in &mats {
            for o in 0..dim {
                let row = &w[o * dim..(o + 1) * dim];
                let a: f64 = row.iter().zip(&z).map(|(p, q)| p * q).sum::<f64>() * scale + b[o] * MAPPING_LR_MUL;
                h[o] = lrelu(a);
            }
            std::mem::swap(&mut z, &mut h);
        }
        for (m, v) in mean.iter_mut().zip(&z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= MEAN_LATENT_SAMPLES as f64);
    Ok(mean)
}

impl GeneratorBackend for StyleSynth {
    fn name(&self) -> &str {
        "stylesynth"
    }

    fn geometry(&self) -> &LatentGeometry {
        &self.geometry
    }

    fn mean_latent(&self) -> &[f64] {
        &self.mean_latent
    }

    fn synthesize(&self, state: &LatentState) -> Result<Image> {
        state.check_geometry(&self.geometry)?;
        Ok(self.run(state).0)
    }

    fn synthesize_vjp(&self, state: &LatentState, grad_image: &Image) -> Result<LatentGrad> {
        state.check_geometry(&self.geometry)?;
        let r = self.geometry.resolution;
        if grad_image.channels() != 3 || grad_image.height() != r || grad_image.width() != r {
            return Err(Error::shape("image gradient does not match generator output"));
        }
        let (_, trace) = self.run(state);
        let dim = self.geometry.dim;
        let mut out = LatentState::zeros(&self.geometry);

        let mut g_rgb = FeatureMap::from_image(grad_image);
        g_rgb.values_mut().iter_mut().for_each(|v| *v *= 0.5);
        // gradient flowing into the output of the next-processed layer
        let mut g_feat: Option<FeatureMap> = None;
        for j in (0..self.layers.len()).rev() {
            if j % 2 == 0 {
                let k = j / 2;
                let head = &self.heads[k];
                let ht = &trace.heads[k];
                let gx = nn::conv2d_input_grad(&g_rgb, &ht.m.weight, head.conv.cin, 1);
                let gw = nn::conv2d_weight_grad(&ht.x, &g_rgb, 1);
                let gv = head.conv.modulation_backward(&ht.m, &gw, dim);
                for (a, b) in out.w_mut(head_layer(k)).iter_mut().zip(&gv) {
                    *a += b;
                }
                match g_feat.as_mut() {
                    Some(g) => g.add_assign(&gx),
                    None => g_feat = Some(gx),
                }
                if k > 0 {
                    let prev = &trace.heads[k - 1].x;
                    g_rgb = self.upsample.apply_adjoint(&g_rgb, prev.height(), prev.width());
                }
            }
            let layer = &self.layers[j];
            let lt = &trace.layers[j];
            let mut gz = g_feat.take().expect("gradient reaches every layer");
            for (g, &z) in gz.values_mut().iter_mut().zip(lt.z.values()) {
                *g *= lrelu_grad(z);
            }
            {
                let gn = out.noise_mut(j);
                for o in 0..layer.conv.cout {
                    for (a, g) in gn.iter_mut().zip(gz.plane(o)) {
                        *a += layer.noise_strength * g;
                    }
                }
            }
            let (gx, gw) = if layer.upsample {
                let gt = self.blur.apply_adjoint(&gz, lt.t_side, lt.t_side);
                (
                    nn::conv_transpose2d_s2_input_grad(&gt, &lt.m.weight, layer.conv.cin, 3),
                    nn::conv_transpose2d_s2_weight_grad(&lt.x, &gt, 3),
                )
            } else {
                (
                    nn::conv2d_input_grad(&gz, &lt.m.weight, layer.conv.cin, 3),
                    nn::conv2d_weight_grad(&lt.x, &gz, 3),
                )
            };
            let gv = layer.conv.modulation_backward(&lt.m, &gw, dim);
            for (a, b) in out.w_mut(j).iter_mut().zip(&gv) {
                *a += b;
            }
            if j > 0 {
                g_feat = Some(gx);
            }
        }
        Ok(out)
    }
}
