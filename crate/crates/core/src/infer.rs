//! Full-image prediction by overlapping tiles.

use crate::dataio::tile::{crop_image, tile_origins};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::params::{ParamStore, Session};
use crate::roadnet::{predict_mask, RoadNet};
use crate::tensor::{Scalar, Tensor};

/// Averages overlapping `size`x`size` tile predictions into an `h`x`w` map.
/// Every pixel must be covered by at least one tile.
pub fn stitch(h: usize, w: usize, size: usize, origins: &[(usize, usize)], tiles: &[Vec<f32>]) -> Result<Tensor<f32>> {
    if origins.len() != tiles.len() {
        return Err(Error::Shape(format!("{} origins for {} tiles", origins.len(), tiles.len())));
    }
    let mut sum = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    for (&(r0, c0), t) in origins.iter().zip(tiles) {
        if t.len() != size * size || r0 + size > h || c0 + size > w {
            return Err(Error::Shape(format!("tile at ({r0}, {c0}) does not fit a {h}x{w} map")));
        }
        for r in 0..size {
            for c in 0..size {
                let i = (r0 + r) * w + c0 + c;
                sum[i] += t[r * size + c] as f64;
                hits[i] += 1;
            }
        }
    }
    if hits.contains(&0) {
        return Err(Error::Shape("tiles leave pixels uncovered".into()));
    }
    let data = sum.iter().zip(&hits).map(|(s, &n)| (s / n as f64) as f32).collect();
    Tensor::new([h, w], data)
}

/// Road probability `[H, W]` for an image `[3, H, W]` of any size at least
/// one tile large.
pub fn predict_image<T: Scalar>(
    net: &RoadNet,
    store: &mut ParamStore<T>,
    image: &Tensor<f32>,
    stride: usize,
    batch: usize,
) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let size = net.cfg.tile_size;
    let origins = tile_origins(h, w, size, stride)?;
    let mut tiles = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for &(r, c) in chunk {
            data.extend(crop_image(image, r, c, size).data().iter().map(|&v| T::lit(v as f64)));
        }
        let x = Tensor::new([chunk.len(), 3, size, size], data)?;
        let mut s = Session::new(store, false);
        let xv = s.input(x);
        let p = net.forward(&mut s, xv)?;
        let prob = s.value(p).data();
        for k in 0..chunk.len() {
            tiles.push(prob[k * size * size..(k + 1) * size * size].iter().map(|v| v.as_f64() as f32).collect());
        }
    }
    stitch(h, w, size, &origins, &tiles)
}

pub fn predict_image_mask<T: Scalar>(
    net: &RoadNet,
    store: &mut ParamStore<T>,
    image: &Tensor<f32>,
    stride: usize,
    threshold: f64,
) -> Result<(Tensor<f32>, BinaryMask)> {
    let prob = predict_image(net, store, image, stride, 4)?;
    let mask = predict_mask(&prob, threshold)?;
    Ok((prob, mask))
}
