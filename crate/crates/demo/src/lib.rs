//! Browser bindings: render a benchmark sample, show its per-patch
//! orientation field, and preview the perturbation used for position
//! consistency.

use roadclip::dape::orientation_grid;
use roadclip::image::Image;
use roadclip::losses::{apply_perturbation, Perturbation};
use roadclip::rng::RngStreams;
use roadclip::synthbench::{render_sample, sample_spec_in_class, DamageClass};
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 64;
pub const PATCH: usize = 8;
const ENERGY_FLOOR: f64 = 1e-3;

/// One rendered sample with its mask overlaid in red.
#[wasm_bindgen]
pub struct DemoSample {
    image: Image,
    mask: Vec<bool>,
    caption: String,
}

#[wasm_bindgen]
impl DemoSample {
    pub fn caption(&self) -> String {
        self.caption.clone()
    }

    /// RGBA bytes, `SIZE`×`SIZE`. With `overlay`, mask pixels are tinted red.
    pub fn rgba(&self, overlay: bool) -> Vec<u8> {
        to_rgba(&self.image, overlay.then_some(self.mask.as_slice()))
    }

    /// Per-patch orientation in radians, row-major over the patch grid.
    pub fn orientations(&self) -> Vec<f64> {
        orientation_grid(&self.image, PATCH, ENERGY_FLOOR)
    }

    /// RGBA bytes of the image shifted by `(dx, dy)` pixels and rotated by
    /// `degrees` about its centre.
    pub fn perturbed(&self, dx: i32, dy: i32, degrees: f64) -> Vec<u8> {
        let p = Perturbation {
            dx: dx as i64,
            dy: dy as i64,
            degrees,
        };
        to_rgba(&apply_perturbation(&self.image, &p), None)
    }
}

pub fn class_names() -> Vec<String> {
    DamageClass::default_names()
}

#[wasm_bindgen(js_name = classNames)]
pub fn class_names_js() -> Vec<String> {
    class_names()
}

/// Renders a sample of class `class` (index into the class list) from `seed`.
pub fn sample(class: usize, seed: u32) -> roadclip::Result<DemoSample> {
    let class = DamageClass::from_index(class)
        .ok_or_else(|| roadclip::Error::Invalid(format!("no class with index {class}")))?;
    let mut rng = RngStreams::new(seed as u64).indexed("demo-spec", &[class.index() as u64]);
    let spec = sample_spec_in_class(&mut rng, class, SIZE);
    let s = render_sample(&spec, SIZE, seed as u64)?;
    let mask = (0..SIZE * SIZE).map(|k| s.mask.get(k % SIZE, k / SIZE)).collect();
    Ok(DemoSample {
        image: s.image,
        mask,
        caption: s.caption,
    })
}

#[wasm_bindgen]
pub fn render(class: usize, seed: u32) -> Result<DemoSample, JsError> {
    sample(class, seed).map_err(|e| JsError::new(&e.to_string()))
}

fn to_rgba(image: &Image, mask: Option<&[bool]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.pixels.len() * 4);
    for (k, &v) in image.pixels.iter().enumerate() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if mask.is_some_and(|m| m[k]) {
            out.extend_from_slice(&[255, g / 2, g / 2, 255]);
        } else {
            out.extend_from_slice(&[g, g, g, 255]);
        }
    }
    out
}
