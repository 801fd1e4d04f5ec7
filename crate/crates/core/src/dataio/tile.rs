//! Fixed-size tiling with flush right/bottom edges.

use super::Sample;
use crate::error::{shape_err, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Start offsets along one axis: multiples of `stride`, plus a final tile
/// flush with the end when the stride does not land there.
fn starts(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if *v.last().expect("extent >= size") != extent - size {
        v.push(extent - size);
    }
    v
}

/// Top-left corners `(row, col)` of the tiles of an `h x w` image, in
/// raster order.
pub fn tile_origins(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || stride == 0 {
        return shape_err("tile size and stride must be positive");
    }
    if size > h || size > w {
        return shape_err(format!("tile size {size} exceeds image {h}x{w}"));
    }
    let rows = starts(h, size, stride);
    let cols = starts(w, size, stride);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

pub fn crop_image(image: &Tensor<f32>, row: usize, col: usize, size: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Tensor::from_fn([3, size, size], |i| {
        let (ch, r, c) = (i / (size * size), (i / size) % size, i % size);
        image.data()[(ch * h + row + r) * w + col + c]
    })
}

pub fn tile(sample: &Sample, size: usize, stride: usize) -> Result<Vec<Sample>> {
    let (h, w) = (sample.height(), sample.width());
    let origins = tile_origins(h, w, size, stride)?;
    Ok(origins
        .into_iter()
        .map(|(row, col)| {
            let image = crop_image(&sample.image, row, col, size);
            let mask = (0..size * size)
                .map(|i| sample.mask.data()[(row + i / size) * w + col + i % size])
                .collect();
            Sample {
                id: format!("{}_r{row}_c{col}", sample.id),
                split: sample.split,
                image,
                mask: BinaryMask::new([size, size], mask).expect("sized"),
            }
        })
        .collect())
}
