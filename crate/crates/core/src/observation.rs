use bit_nn::Tensor;

use crate::error::{BitError, Result};

/// Stacked RGB frames, shape `(3k, H, W)`, values in `[0, 1]`.
///
/// Frame `j` occupies channels `3j..3j+3`; frame 0 is the oldest.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Observation {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(3) {
            return Err(BitError::Argument(format!(
                "observation channels must be a positive multiple of 3, got {channels}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(BitError::Argument(format!(
                "observation ({channels}, {height}, {width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Observation {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Observation {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_count(&self) -> usize {
        self.channels / 3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The three planes of stacked frame `j`.
    pub fn frame(&self, j: usize) -> &[f32] {
        let plane = 3 * self.height * self.width;
        &self.data[j * plane..(j + 1) * plane]
    }

    pub fn frame_mut(&mut self, j: usize) -> &mut [f32] {
        let plane = 3 * self.height * self.width;
        &mut self.data[j * plane..(j + 1) * plane]
    }

    /// `[1, C, H, W]` tensor for network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Stacks observations along a new leading batch axis.
    pub fn stack(observations: &[Observation]) -> Result<Tensor<f32>> {
        let first = observations
            .first()
            .ok_or_else(|| BitError::Argument("cannot stack zero observations".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(observations.len() * first.data.len());
        for o in observations {
            if o.shape() != shape {
                return Err(BitError::Argument(format!(
                    "observation shape {:?} differs from {:?}",
                    o.shape(),
                    shape
                )));
            }
            data.extend_from_slice(&o.data);
        }
        Ok(Tensor::from_vec(&[observations.len(), shape[0], shape[1], shape[2]], data).unwrap())
    }

    /// Splits row `i` of a `[n, C, H, W]` batch back out.
    pub fn from_batch(batch: &Tensor<f32>, i: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || i >= s[0] {
            return Err(BitError::Argument(format!("no row {i} in batch of shape {s:?}")));
        }
        let row = batch.slice_rows(i, 1);
        Observation::new(s[1], s[2], s[3], row.into_data())
    }
}
