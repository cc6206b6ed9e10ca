//! VGG-16 convolutional trunk loaded from a safetensors file using the
//! torchvision parameter names (`features.{i}.weight` / `.bias`).
//!
//! Taps: `Appearance` is relu1_1; `Block(b)` is the last ReLU of block `b`
//! (relu1_2, relu2_2, relu3_3, relu4_3, relu5_3). Channel widths are read
//! from the weight shapes, so narrow test networks work too. If the file
//! also holds LPIPS linear heads (`lin{k}.model.1.weight`, shape
//! `[1, C, 1, 1]`) they become the per-level calibration weights.

use std::path::Path;

use super::{check_backward_args, check_taps, FeatureExtractor, FeatureMap, LevelGeometry, Tap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn;
use crate::weights::WeightStore;

/// Convolutions per block.
pub const VGG16_BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Vgg16Extractor {
    convs: Vec<Conv>,
    levels: Vec<LevelGeometry>,
    calibration: Vec<Option<Vec<f64>>>,
}

/// torchvision `features` index of every convolution.
fn conv_indices() -> Vec<usize> {
    let mut out = Vec::new();
    let mut idx = 0;
    for (b, &depth) in VGG16_BLOCK_DEPTHS.iter().enumerate() {
        if b > 0 {
            idx += 1; // max-pool
        }
        for _ in 0..depth {
            out.push(idx);
            idx += 2; // conv + relu
        }
    }
    out
}

/// Index (into the conv list) of the last conv of each block.
fn block_ends() -> [usize; 5] {
    let mut ends = [0; 5];
    let mut acc = 0;
    for (b, &d) in VGG16_BLOCK_DEPTHS.iter().enumerate() {
        acc += d;
        ends[b] = acc - 1;
    }
    ends
}

fn block_of(conv: usize) -> usize {
    let mut acc = 0;
    for (b, &d) in VGG16_BLOCK_DEPTHS.iter().enumerate() {
        acc += d;
        if conv < acc {
            return b;
        }
    }
    unreachable!("conv index out of range")
}

struct Trace {
    /// Post-ReLU output of every conv that was run.
    outputs: Vec<FeatureMap>,
    /// Argmax and pre-pool size for the pool in front of blocks 2..=5.
    pools: Vec<(Vec<usize>, usize, usize)>,
}

impl Vgg16Extractor {
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for idx in conv_indices() {
            let wname = format!("features.{idx}.weight");
            let t = store.get(&wname)?;
            if t.shape.len() != 4 || t.shape[1] != cin || t.shape[2] != 3 || t.shape[3] != 3 {
                return Err(Error::Weights(format!(
                    "{wname}: shape {:?} does not continue a {cin}-channel trunk",
                    t.shape
                )));
            }
            let cout = t.shape[0];
            let bias = store.expect(&format!("features.{idx}.bias"), &[cout])?.to_vec();
            convs.push(Conv {
                cin,
                cout,
                weight: t.data.clone(),
                bias,
            });
            cin = cout;
        }
        let ends = block_ends();
        let levels: Vec<LevelGeometry> = ends
            .iter()
            .enumerate()
            .map(|(b, &e)| LevelGeometry {
                channels: convs[e].cout,
                stride: 1 << b,
            })
            .collect();
        let calibration = levels
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let name = format!("lin{k}.model.1.weight");
                if store.contains(&name) {
                    store.expect(&name, &[1, g.channels, 1, 1]).map(|w| Some(w.to_vec()))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            levels,
            calibration,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?)
    }

    /// Merges LPIPS linear heads from a second file.
    pub fn with_calibration_file(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let store = WeightStore::load(path)?;
        for (k, g) in self.levels.iter().enumerate() {
            let w = store.expect(&format!("lin{k}.model.1.weight"), &[1, g.channels, 1, 1])?;
            self.calibration[k] = Some(w.to_vec());
        }
        Ok(self)
    }

    fn tap_conv(tap: Tap) -> usize {
        match tap {
            Tap::Appearance => 0,
            Tap::Block(b) => block_ends()[b - 1],
        }
    }

    fn normalized(image: &Image) -> Result<FeatureMap> {
        if image.channels() != 3 {
            return Err(Error::shape("VGG expects 3-channel images"));
        }
        if !image.height().is_multiple_of(16) || !image.width().is_multiple_of(16) {
            return Err(Error::shape("VGG input sides must be multiples of 16"));
        }
        let mut x = FeatureMap::from_image(image);
        for c in 0..3 {
            for v in x.plane_mut(c) {
                *v = (*v - MEAN[c]) / STD[c];
            }
        }
        Ok(x)
    }

    fn run(&self, image: &Image, last: usize) -> Result<Trace> {
        let mut x = Self::normalized(image)?;
        let mut trace = Trace {
            outputs: Vec::with_capacity(last + 1),
            pools: Vec::new(),
        };
        for (i, conv) in self.convs.iter().enumerate().take(last + 1) {
            if i > 0 && block_of(i) != block_of(i - 1) {
                let (h, w) = (x.height(), x.width());
                let (pooled, arg) = nn::max_pool2(&x);
                trace.pools.push((arg, h, w));
                x = pooled;
            }
            let mut y = nn::conv2d(&x, &conv.weight, conv.cout, 3, Some(&conv.bias));
            y.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            trace.outputs.push(y.clone());
            x = y;
        }
        Ok(trace)
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn name(&self) -> &str {
        "vgg16"
    }

    fn levels(&self) -> &[LevelGeometry] {
        &self.levels
    }

    fn appearance_geometry(&self) -> LevelGeometry {
        LevelGeometry {
            channels: self.convs[0].cout,
            stride: 1,
        }
    }

    fn calibration(&self, level: usize) -> Option<&[f64]> {
        self.calibration.get(level.checked_sub(1)?)?.as_deref()
    }

    fn forward(&self, image: &Image, taps: &[Tap]) -> Result<Vec<FeatureMap>> {
        check_taps(self, taps)?;
        let Some(last) = taps.iter().map(|&t| Self::tap_conv(t)).max() else {
            return Ok(Vec::new());
        };
        let trace = self.run(image, last)?;
        Ok(taps.iter().map(|&t| trace.outputs[Self::tap_conv(t)].clone()).collect())
    }

    fn backward(&self, image: &Image, taps: &[Tap], grads: &[FeatureMap]) -> Result<Image> {
        check_backward_args(self, image, taps, grads)?;
        let Some(last) = taps.iter().map(|&t| Self::tap_conv(t)).max() else {
            return Ok(Image::zeros(3, image.height(), image.width()));
        };
        let mut trace = self.run(image, last)?;
        let mut g: Option<FeatureMap> = None;
        for i in (0..=last).rev() {
            for (&t, tg) in taps.iter().zip(grads) {
                if Self::tap_conv(t) == i {
                    match g.as_mut() {
                        Some(acc) => acc.add_assign(tg),
                        None => g = Some(tg.clone()),
                    }
                }
            }
            let Some(mut gi) = g.take() else { continue };
            let out = &trace.outputs[i];
            for (v, &o) in gi.values_mut().iter_mut().zip(out.values()) {
                if o <= 0.0 {
                    *v = 0.0;
                }
            }
            let conv = &self.convs[i];
            let mut gx = nn::conv2d_input_grad(&gi, &conv.weight, conv.cin, 3);
            if i > 0 && block_of(i) != block_of(i - 1) {
                let (arg, h, w) = trace.pools.pop().expect("pool recorded for block start");
                gx = nn::max_pool2_grad(&gx, &arg, h, w);
            }
            g = Some(gx);
        }
        let mut gx = g.expect("at least one tap").into_image();
        for c in 0..3 {
            for v in gx.plane_mut(c) {
                *v /= STD[c];
            }
        }
        Ok(gx)
    }
}
