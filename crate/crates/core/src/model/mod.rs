//! Trainable encoder-decoder producing two-channel localization maps.

mod adam;
mod checkpoint;
mod ops;
mod unet;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use unet::{ForwardCache, ModelConfig, ParamSlot, UNet};

use crate::error::{invalid_input, Result};
use crate::image::Map;

/// Foreground and background probability maps; `bg = 1 - fg` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub fg: Map,
    pub bg: Map,
}

impl LocalizationMap {
    pub fn from_foreground(fg: Map) -> Result<Self> {
        if fg.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_input("foreground map must lie in [0, 1]"));
        }
        let bg = fg.map(|v| 1.0 - *v);
        Ok(Self { fg, bg })
    }

    /// Two-channel softmax of per-pixel logits.
    pub fn from_logits(fg_logits: &Map, bg_logits: &Map) -> Result<Self> {
        if !fg_logits.same_shape(bg_logits) {
            return Err(invalid_input("logit maps differ in shape"));
        }
        let mut fg = Map::filled(fg_logits.width(), fg_logits.height(), 0.0);
        let mut bg = fg.clone();
        for (i, (&a, &b)) in fg_logits.data().iter().zip(bg_logits.data()).enumerate() {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            fg.data_mut()[i] = ea / (ea + eb);
            bg.data_mut()[i] = eb / (ea + eb);
        }
        Ok(Self { fg, bg })
    }

    pub fn width(&self) -> usize {
        self.fg.width()
    }

    pub fn height(&self) -> usize {
        self.fg.height()
    }

    pub fn swapped(&self) -> Self {
        Self {
            fg: self.bg.clone(),
            bg: self.fg.clone(),
        }
    }
}
