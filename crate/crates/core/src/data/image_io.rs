use std::path::Path;

use crate::error::{input_err, Result};
use crate::vq::ImageBatch;

/// Tile a batch into a grid `columns` wide, row-major, with `padding` pixels
/// of black border between and around tiles.
pub fn image_grid(images: &ImageBatch, columns: usize, padding: usize) -> Result<image::RgbImage> {
    if columns == 0 || images.batch == 0 {
        return Err(input_err!("image grid needs at least one image and one column"));
    }
    let rows = images.batch.div_ceil(columns);
    let (h, w) = (images.height, images.width);
    let width = columns * w + (columns + 1) * padding;
    let height = rows * h + (rows + 1) * padding;
    let mut out = image::RgbImage::new(width as u32, height as u32);
    let plane = h * w;
    for i in 0..images.batch {
        let (r, c) = (i / columns, i % columns);
        let (x0, y0) = (padding + c * (w + padding), padding + r * (h + padding));
        let img = images.image(i);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| (img[ch * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(out)
}

pub fn write_image_grid(images: &ImageBatch, columns: usize, padding: usize, path: &Path) -> Result<()> {
    image_grid(images, columns, padding)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions() {
        let imgs = ImageBatch::zeros(16, 32, 32);
        let g = image_grid(&imgs, 4, 2).unwrap();
        assert_eq!(g.dimensions(), (4 * 32 + 5 * 2, 4 * 32 + 5 * 2));
        let g = image_grid(&ImageBatch::zeros(5, 8, 8), 4, 0).unwrap();
        assert_eq!(g.dimensions(), (32, 16));
    }

    #[test]
    fn tiles_land_row_major() {
        let mut imgs = ImageBatch::zeros(2, 2, 2);
        let n = imgs.image_len();
        imgs.pixels[n..].iter_mut().for_each(|p| *p = 1.0);
        let g = image_grid(&imgs, 2, 0).unwrap();
        assert_eq!(g.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(g.get_pixel(3, 1).0, [255, 255, 255]);
    }
}
