use serde::{Deserialize, Serialize};

/// Image geometry. Flat image vectors are channel-major (`C x H x W`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const GRAY16: ImageShape = ImageShape { channels: 1, height: 16, width: 16 };

    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::GRAY16
    }
}
