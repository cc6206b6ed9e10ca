use super::{check_backward_args, check_taps, FeatureExtractor, FeatureMap, LevelGeometry, Tap, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::image::Image;

/// Every tap returns the input pixels unchanged. Useful wherever a loss
/// needs a closed form in pixel space.
#[derive(Clone, Debug)]
pub struct IdentityExtractor {
    levels: Vec<LevelGeometry>,
}

impl IdentityExtractor {
    pub fn new(channels: usize) -> Self {
        Self {
            levels: vec![LevelGeometry { channels, stride: 1 }; NUM_LEVELS],
        }
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn levels(&self) -> &[LevelGeometry] {
        &self.levels
    }

    fn appearance_geometry(&self) -> LevelGeometry {
        self.levels[0]
    }

    fn forward(&self, image: &Image, taps: &[Tap]) -> Result<Vec<FeatureMap>> {
        check_taps(self, taps)?;
        if image.channels() != self.levels[0].channels {
            return Err(Error::shape("identity extractor channel count differs from image"));
        }
        Ok(taps.iter().map(|_| FeatureMap::from_image(image)).collect())
    }

    fn backward(&self, image: &Image, taps: &[Tap], grads: &[FeatureMap]) -> Result<Image> {
        check_backward_args(self, image, taps, grads)?;
        let mut out = Image::zeros(image.channels(), image.height(), image.width());
        for g in grads {
            for (o, v) in out.data_mut().iter_mut().zip(g.values()) {
                *o += v;
            }
        }
        Ok(out)
    }
}
