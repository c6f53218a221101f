//! Images to patch grids, mask plans and pretraining batches.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid coordinate `(row, col)`.
pub type Loc = (usize, usize);

/// Non-overlapping square patches of one image, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub image_id: usize,
    pub patches: Vec<Tensor>,
    pub locations: Vec<Loc>,
    pub grid_shape: (usize, usize),
}

impl PatchSet {
    pub fn patch_at(&self, loc: Loc) -> &Tensor {
        &self.patches[loc.0 * self.grid_shape.1 + loc.1]
    }
}

/// Partition of the grid into visible (encoder) and masked (decoder) cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Row-major sorted.
    pub encoder_locs: Vec<Loc>,
    /// Random order; position `i` is the target slot of query `i`.
    pub decoder_locs: Vec<Loc>,
    pub keep_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// `[B×ne×ps×ps×C]`
    pub encoder_patches: Tensor,
    /// `[B×nd×ps×ps×C]`
    pub decoder_patches: Tensor,
    /// `B·ne` locations, image-major.
    pub encoder_locations: Vec<Loc>,
    /// `B·nd` locations, image-major.
    pub decoder_locations: Vec<Loc>,
    pub grid_shape: (usize, usize),
    /// The augmented images the patches were cut from.
    pub sources: Vec<Tensor>,
}

impl PretrainBatch {
    pub fn batch_size(&self) -> usize {
        self.encoder_patches.shape()[0]
    }

    pub fn encoder_count(&self) -> usize {
        self.encoder_patches.shape()[1]
    }

    pub fn decoder_count(&self) -> usize {
        self.decoder_patches.shape()[1]
    }

    pub fn patch_size(&self) -> usize {
        self.encoder_patches.shape()[2]
    }

    /// Paste every patch of image `b` back at its location.
    pub fn reassemble(&self, b: usize) -> Result<Tensor> {
        let (ne, nd) = (self.encoder_count(), self.decoder_count());
        let enc = self.encoder_patches.index_first(b)?;
        let dec = self.decoder_patches.index_first(b)?;
        let mut pieces = Vec::with_capacity(ne + nd);
        for i in 0..ne {
            pieces.push((self.encoder_locations[b * ne + i], enc.index_first(i)?));
        }
        for i in 0..nd {
            pieces.push((self.decoder_locations[b * nd + i], dec.index_first(i)?));
        }
        assemble(&pieces, self.grid_shape)
    }
}

fn check_image(op: &'static str, image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::invalid(op, format!("expected an H×W×C image, got {s:?}"))),
    }
}

/// Cut `image` into `ps×ps` patches.
pub fn extract_patch_grid(image: &Tensor, ps: usize, image_id: usize) -> Result<PatchSet> {
    let (h, w, c) = check_image("extract_patch_grid", image)?;
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::Config(format!(
            "patch size {ps} does not divide the {h}×{w} image evenly"
        )));
    }
    let (rows, cols) = (h / ps, w / ps);
    let src = image.data();
    let mut patches = Vec::with_capacity(rows * cols);
    let mut locations = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut data = Vec::with_capacity(ps * ps * c);
            for y in 0..ps {
                let start = ((r * ps + y) * w + q * ps) * c;
                data.extend_from_slice(&src[start..start + ps * c]);
            }
            patches.push(Tensor::new(vec![ps, ps, c], data)?);
            locations.push((r, q));
        }
    }
    Ok(PatchSet {
        image_id,
        patches,
        locations,
        grid_shape: (rows, cols),
    })
}

/// Inverse of [`extract_patch_grid`] for any ordering of located patches.
pub fn assemble(pieces: &[(Loc, Tensor)], grid: (usize, usize)) -> Result<Tensor> {
    let first = &pieces
        .first()
        .ok_or_else(|| Error::invalid("assemble", "no patches"))?
        .1;
    let (ps, _, c) = check_image("assemble", first)?;
    let (h, w) = (grid.0 * ps, grid.1 * ps);
    let mut out = vec![0.0f32; h * w * c];
    let mut seen = vec![false; grid.0 * grid.1];
    for ((r, q), patch) in pieces {
        if *r >= grid.0 || *q >= grid.1 || std::mem::replace(&mut seen[r * grid.1 + q], true) {
            return Err(Error::invalid("assemble", format!("bad or repeated location ({r}, {q})")));
        }
        for y in 0..ps {
            let dst = ((r * ps + y) * w + q * ps) * c;
            out[dst..dst + ps * c].copy_from_slice(&patch.data()[y * ps * c..(y + 1) * ps * c]);
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("assemble", "patches do not cover the grid"));
    }
    Tensor::new(vec![h, w, c], out)
}

/// Zero-pad by `pad` on every side and crop the window at `(top, left)`.
pub fn pad_crop_at(image: &Tensor, pad: usize, top: usize, left: usize) -> Result<Tensor> {
    let (h, w, c) = check_image("pad_crop", image)?;
    if top > 2 * pad || left > 2 * pad {
        return Err(Error::invalid("pad_crop", format!("offset ({top}, {left}) outside [0, {}]", 2 * pad)));
    }
    let src = image.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let sy = (y + top) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + left) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let s = (sy as usize * w + sx as usize) * c;
            let d = (y * w + x) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Random zero-pad-and-crop back to the original size.
pub fn augment_pad_crop<R: Rng + ?Sized>(image: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    if pad == 0 {
        check_image("pad_crop", image)?;
        return Ok(image.clone());
    }
    let top = rng.random_range(0..=2 * pad);
    let left = rng.random_range(0..=2 * pad);
    pad_crop_at(image, pad, top, left)
}

/// Number of cells routed to the encoder for keep fraction `p`.
pub fn encoder_count(grid_size: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("keep fraction {p} must lie in (0, 1)")));
    }
    let ne = (p * grid_size as f64).round() as usize;
    let nd = grid_size.saturating_sub(ne);
    if nd < 2 {
        return Err(Error::Config(format!(
            "keep fraction {p} on a {grid_size}-cell grid leaves {nd} masked patch(es); \
             at least 2 are needed, use a smaller p or a larger grid"
        )));
    }
    if ne == 0 {
        return Err(Error::Config(format!("keep fraction {p} leaves the encoder empty")));
    }
    Ok(ne)
}

fn plan_with_count<R: Rng + ?Sized>(grid: (usize, usize), ne: usize, p: f64, rng: &mut R) -> MaskPlan {
    let mut cells: Vec<Loc> = (0..grid.0).flat_map(|r| (0..grid.1).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let mut encoder_locs = cells[..ne].to_vec();
    encoder_locs.sort_unstable();
    MaskPlan {
        encoder_locs,
        decoder_locs: cells[ne..].to_vec(),
        keep_fraction: p,
    }
}

/// Route `round(p·G)` uniformly chosen cells to the encoder, the rest
/// (shuffled) to the decoder.
pub fn sample_mask_plan<R: Rng + ?Sized>(grid: (usize, usize), p: f64, rng: &mut R) -> Result<MaskPlan> {
    let ne = encoder_count(grid.0 * grid.1, p)?;
    Ok(plan_with_count(grid, ne, p, rng))
}

/// Augment, grid and mask each image; draws happen image by image in order
/// (crop offsets, then mask).
pub fn build_pretrain_batch<R: Rng + ?Sized>(
    images: &[Tensor],
    ps: usize,
    p: f64,
    pad: usize,
    rng: &mut R,
) -> Result<PretrainBatch> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("build_pretrain_batch", "empty image list"))?;
    let (h, w, c) = check_image("build_pretrain_batch", first)?;
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::Config(format!(
            "patch size {ps} does not divide the {h}×{w} image evenly"
        )));
    }
    let grid = (h / ps, w / ps);
    let ne = encoder_count(grid.0 * grid.1, p)?;
    let nd = grid.0 * grid.1 - ne;

    let b = images.len();
    let patch_len = ps * ps * c;
    let mut enc = Vec::with_capacity(b * ne * patch_len);
    let mut dec = Vec::with_capacity(b * nd * patch_len);
    let mut enc_locs = Vec::with_capacity(b * ne);
    let mut dec_locs = Vec::with_capacity(b * nd);
    let mut sources = Vec::with_capacity(b);
    for (i, image) in images.iter().enumerate() {
        if image.shape() != first.shape() {
            return Err(Error::shape("build_pretrain_batch", first.shape(), image.shape()));
        }
        let augmented = augment_pad_crop(image, pad, rng)?;
        let set = extract_patch_grid(&augmented, ps, i)?;
        let plan = plan_with_count(grid, ne, p, rng);
        for &loc in &plan.encoder_locs {
            enc.extend_from_slice(set.patch_at(loc).data());
        }
        for &loc in &plan.decoder_locs {
            dec.extend_from_slice(set.patch_at(loc).data());
        }
        enc_locs.extend_from_slice(&plan.encoder_locs);
        dec_locs.extend_from_slice(&plan.decoder_locs);
        sources.push(augmented);
    }
    Ok(PretrainBatch {
        encoder_patches: Tensor::new(vec![b, ne, ps, ps, c], enc)?,
        decoder_patches: Tensor::new(vec![b, nd, ps, ps, c], dec)?,
        encoder_locations: enc_locs,
        decoder_locations: dec_locs,
        grid_shape: grid,
        sources,
    })
}
