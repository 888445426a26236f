//! Analytic oracle backend: the prediction is exactly the prompt box
//! interior. Overlap scores against rectangular ground truth then have
//! closed forms, which makes the whole evaluation harness verifiable to
//! machine precision. The oracle has no parameters and cannot train.

use crate::data::ImageTensor;
use crate::error::SegmenterError;
use crate::geometry::{BoundingBox, ProbabilityMap};

#[derive(Debug, Clone)]
pub struct OracleModel {
    resolution: u32,
}

impl OracleModel {
    pub fn new(resolution: u32) -> Self {
        Self { resolution }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Probability 1 inside the prompt box, 0 outside. The image is
    /// ignored.
    pub fn predict(
        &self,
        _image: &ImageTensor,
        prompt: &BoundingBox,
    ) -> Result<ProbabilityMap, SegmenterError> {
        if prompt.x_max() > self.resolution || prompt.y_max() > self.resolution {
            return Err(SegmenterError::PromptOutOfBounds {
                resolution: self.resolution,
            });
        }
        let side = self.resolution as usize;
        let mut data = vec![0.0; side * side];
        for y in prompt.y_min()..prompt.y_max() {
            let row = y as usize * side;
            data[row + prompt.x_min() as usize..row + prompt.x_max() as usize].fill(1.0);
        }
        Ok(ProbabilityMap::new(self.resolution, self.resolution, data))
    }
}
