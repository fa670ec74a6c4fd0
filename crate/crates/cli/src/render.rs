//! Attention overlay rendering.

use anyhow::{ensure, Result};
use image::RgbImage;
use mtt_core::data::tensor_to_rgb;
use mtt_core::diffcore::{resize_bilinear, Tensor};

/// Highest blend weight of the heat colour, reached at the most attended cell.
const OVERLAY_ALPHA: f64 = 0.65;

/// Blends a red-to-yellow heat map of `attention` (a `gh x gw` grid) over `image`.
pub fn attention_overlay(image: &Tensor, attention: &Tensor, grid: (usize, usize)) -> Result<RgbImage> {
    let (gh, gw) = grid;
    ensure!(attention.len() == gh * gw, "attention has {} cells, grid is {gh}x{gw}", attention.len());
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let heat = resize_bilinear(&attention.clone().reshape(&[1, gh, gw])?, h, w)?;
    let peak = heat.data().iter().copied().fold(0.0, f64::max);
    let plane = h * w;
    let blended = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let a = if peak > 0.0 { heat.data()[p] / peak } else { 0.0 };
        let colour = match c {
            0 => 1.0,
            1 => a,
            _ => 0.0,
        };
        (1.0 - OVERLAY_ALPHA * a) * image.data()[i] + OVERLAY_ALPHA * a * colour
    });
    Ok(tensor_to_rgb(&blended)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_cell_is_tinted_and_cold_cells_untouched() {
        let image = Tensor::full(&[3, 32, 32], 0.5);
        let attention = Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let img = attention_overlay(&image, &attention, (2, 2)).unwrap();
        let hot = img.get_pixel(0, 0).0;
        let cold = img.get_pixel(31, 31).0;
        assert!(hot[0] > 200 && hot[2] < 100);
        assert_eq!(cold, [128, 128, 128]);
    }
}
