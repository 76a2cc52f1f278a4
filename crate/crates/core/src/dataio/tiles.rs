//! Sliding-window cropping of large labelled tiles and aggregation of
//! pixel labels into image-level multi-labels.

use std::path::Path;

use image::{GenericImageView, RgbImage};

use crate::error::{Error, Result};

pub const DEFAULT_SENTINEL: u16 = 255;

/// Per-pixel class IDs, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(SegMask { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        SegMask {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    /// Reads an 8- or 16-bit grayscale PNG/PGM; pixel values are class IDs.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let gray = img.to_luma16();
        let (w, h) = gray.dimensions();
        // to_luma16 rescales 8-bit input by 257; undo that for 8-bit sources
        let color = img.color();
        let eight_bit = color.bytes_per_pixel() == color.channel_count();
        let ids = gray
            .as_raw()
            .iter()
            .map(|&v| if eight_bit { v / 257 } else { v })
            .collect();
        Self::new(h as usize, w as usize, ids)
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn crop(&self, y: usize, x: usize, window: usize) -> SegMask {
        let mut ids = Vec::with_capacity(window * window);
        for row in y..y + window {
            ids.extend_from_slice(&self.ids[row * self.width + x..row * self.width + x + window]);
        }
        SegMask {
            height: window,
            width: window,
            ids,
        }
    }
}

/// Top-left corners of every `window×window` crop, row-major. Each axis
/// holds `floor((extent - window) / stride) + 1` positions.
pub fn crop_origins(height: usize, width: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || stride == 0 {
        return Err(Error::Usage("window and stride must be positive".into()));
    }
    if window > height || window > width {
        return Err(Error::Dimension(format!(
            "window {window} exceeds tile {height}x{width}"
        )));
    }
    let rows = (height - window) / stride + 1;
    let cols = (width - window) / stride + 1;
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct Crop {
    pub origin: (usize, usize),
    pub image: RgbImage,
    pub mask: SegMask,
}

pub fn crop_tiles(image: &RgbImage, mask: &SegMask, window: usize, stride: usize) -> Result<Vec<Crop>> {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (mask.height, mask.width) {
        return Err(Error::Dimension(format!(
            "tile is {w}x{h} but its mask is {}x{}",
            mask.width, mask.height
        )));
    }
    let origins = crop_origins(mask.height, mask.width, window, stride)?;
    Ok(origins
        .into_iter()
        .map(|(y, x)| Crop {
            origin: (y, x),
            image: image.view(x as u32, y as u32, window as u32, window as u32).to_image(),
            mask: mask.crop(y, x, window),
        })
        .collect())
}

/// Image-level labels: class `c` is positive iff some pixel has ID `c`.
/// Returns `Ok(None)` when any pixel carries the `sentinel` (the crop is
/// rejected).
pub fn mask_to_labels(mask: &SegMask, classes: usize, sentinel: u16) -> Result<Option<Vec<bool>>> {
    let mut labels = vec![false; classes];
    for &id in &mask.ids {
        if id == sentinel {
            return Ok(None);
        }
        match labels.get_mut(id as usize) {
            Some(l) => *l = true,
            None => {
                return Err(Error::Data(format!(
                    "mask id {id} is neither a class (< {classes}) nor the sentinel {sentinel}"
                )))
            }
        }
    }
    Ok(Some(labels))
}
