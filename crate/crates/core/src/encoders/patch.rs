use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major grid of flattened square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub grid: usize,
    pub patch: usize,
    pub channels: usize,
    /// `grid²` rows of `patch²·channels` values.
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn patch_values(&self, k: usize) -> &[f32] {
        let n = self.patch * self.patch * self.channels;
        &self.data[k * n..(k + 1) * n]
    }
}

pub fn patchify(image: &Image, patch: usize) -> Result<PatchGrid> {
    if image.width != image.height {
        return Err(Error::Invalid(format!(
            "image must be square, got {}×{}",
            image.width, image.height
        )));
    }
    if patch == 0 || image.width % patch != 0 {
        return Err(Error::Invalid(format!(
            "image side {} is not divisible by patch size {patch}",
            image.width
        )));
    }
    let g = image.width / patch;
    let mut data = Vec::with_capacity(image.pixels.len());
    for gi in 0..g {
        for gj in 0..g {
            for y in 0..patch {
                let row = (gi * patch + y) * image.width + gj * patch;
                data.extend_from_slice(&image.pixels[row..row + patch]);
            }
        }
    }
    Ok(PatchGrid {
        grid: g,
        patch,
        channels: 1,
        data,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let side = grid.grid * grid.patch;
    let mut img = Image::filled(side, side, 0.0);
    for k in 0..grid.grid * grid.grid {
        let (gi, gj) = (k / grid.grid, k % grid.grid);
        let vals = grid.patch_values(k);
        for y in 0..grid.patch {
            for x in 0..grid.patch {
                img.set(gj * grid.patch + x, gi * grid.patch + y, vals[y * grid.patch + x]);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic_and_inverse() {
        let px: Vec<f32> = (0..64 * 64).map(|i| (i % 251) as f32 / 251.0).collect();
        let img = Image::new(64, 64, px).unwrap();
        let g = patchify(&img, 8).unwrap();
        assert_eq!(g.grid, 8);
        assert_eq!(g.data.len(), 64 * 64);
        assert_eq!(g.patch_values(0).len(), 64);
        assert_eq!(g.patch_values(1)[0], img.get(8, 0));
        assert_eq!(g.patch_values(8)[0], img.get(0, 8));
        assert_eq!(unpatchify(&g), img);
    }

    #[test]
    fn indivisible_side_is_an_error() {
        let img = Image::filled(63, 63, 0.5);
        assert!(patchify(&img, 8).is_err());
    }
}
