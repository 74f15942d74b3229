//! Contrastive, prototype, and position-consistency objectives, plus the
//! spatial perturbation that produces the shifted copy of an image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{RngStreams, StreamRng};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub concept: f64,
    pub pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            concept: 0.5,
            pos: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("loss.concept", self.concept), ("loss.pos", self.pos)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Initial value and clamp range of the learnable temperature `τ = exp(log_tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperature {
    pub init: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            init: 0.07,
            min: 0.01,
            max: 1.0,
        }
    }
}

impl Temperature {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::config("temperature", "need 0 < min ≤ max"));
        }
        if !(self.min..=self.max).contains(&self.init) {
            return Err(Error::config("temperature.init", "must lie in [min, max]"));
        }
        Ok(())
    }

    pub fn clamp_log(&self, log_tau: f64) -> f64 {
        log_tau.clamp(self.min.ln(), self.max.ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    pub max_translate_px: usize,
    pub max_rotate_deg: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            max_translate_px: 2,
            max_rotate_deg: 5.0,
        }
    }
}

/// One concrete draw: integer shift and rotation about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub dx: i64,
    pub dy: i64,
    pub degrees: f64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotate_deg.is_finite() && (0.0..=180.0).contains(&self.max_rotate_deg)) {
            return Err(Error::config("perturb.max_rotate_deg", "must lie in [0, 180]"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Perturbation {
        let t = self.max_translate_px as i64;
        let dx = rng.gen_range(-t..=t);
        let dy = rng.gen_range(-t..=t);
        let degrees = if self.max_rotate_deg > 0.0 {
            rng.gen_range(-self.max_rotate_deg..=self.max_rotate_deg)
        } else {
            0.0
        };
        Perturbation { dx, dy, degrees }
    }
}

/// Nearest-neighbour resampling: output pixel `p` reads the source at
/// `R(−θ)(p − c − t) + c`, with edge pixels replicated.
pub fn apply_perturbation(image: &Image, p: &Perturbation) -> Image {
    if p.dx == 0 && p.dy == 0 && p.degrees == 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = p.degrees.to_radians().sin_cos();
    let mut out = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let ux = x as f64 - cx - p.dx as f64;
            let uy = y as f64 - cy - p.dy as f64;
            let sx = c * ux + s * uy + cx;
            let sy = -s * ux + c * uy + cy;
            out.set(x, y, image.get_clamped(sx.round() as isize, sy.round() as isize));
        }
    }
    out
}

/// Perturbs with a draw from `seed`.
pub fn perturb_image(image: &Image, spec: &PerturbationSpec, seed: u64) -> Image {
    let p = spec.sample(&mut RngStreams::new(seed).stream("perturb"));
    apply_perturbation(image, &p)
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] == 0 {
        return Err(Error::Invalid(format!("{op} needs at least one row")));
    }
    Ok(sa[0])
}

/// Bidirectional InfoNCE: `−(1/N) Σ_i [log softmax_row(S)_ii + log softmax_col(S)_ii]`
/// with `S = Z_img Z_txtᵀ · inv_tau`.
pub fn itc_loss<T: Real>(g: &mut Graph<T>, zi: Var, zt: Var, inv_tau: Var) -> Result<Var> {
    let n = check_pair(g, zi, zt, "itc_loss")?;
    let tt = g.transpose(zt)?;
    let sim = g.matmul(zi, tt)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let rows = g.log_softmax(logits, 1)?;
    let cols = g.log_softmax(logits, 0)?;
    let a = g.gather(rows, diag.clone())?;
    let b = g.gather(cols, diag)?;
    let both = g.add(a, b)?;
    let s = g.sum(both);
    Ok(g.scale(s, -T::one() / T::of(n as f64)))
}

/// Batch mean of `‖z − z′‖²`.
pub fn pos_consist_loss<T: Real>(g: &mut Graph<T>, z: Var, z_shifted: Var) -> Result<Var> {
    let n = check_pair(g, z, z_shifted, "pos_consist_loss")?;
    let d = g.sub(z, z_shifted)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::one() / T::of(n as f64)))
}

/// The three terms of the objective as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub itc: Var,
    pub domain_align: Var,
    pub pos_consist: Option<Var>,
}

/// Per-term values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub itc: f64,
    pub domain_align: f64,
    pub pos_consist: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.itc, self.domain_align, self.pos_consist]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, `total` last.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("itc", self.itc),
            ("domain_align", self.domain_align),
            ("pos_consist", self.pos_consist),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `L_ITC + λ_concept·L_da + λ_pos·L_pc`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    terms: LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let da = g.scale(terms.domain_align, T::of(weights.concept));
    let mut total = g.add(terms.itc, da)?;
    if let Some(pc) = terms.pos_consist {
        let pc = g.scale(pc, T::of(weights.pos));
        total = g.add(total, pc)?;
    }
    let val = |v: Var| g.value(v).item().f64();
    let report = LossReport {
        total: val(total),
        itc: val(terms.itc),
        domain_align: val(terms.domain_align),
        pos_consist: terms.pos_consist.map_or(0.0, val),
    };
    Ok((total, report))
}

/// InfoNCE on fixed embeddings, for evaluation and tests.
pub fn itc_value<T: Real>(zi: &Tensor<T>, zt: &Tensor<T>, tau: T) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(zi.clone());
    let b = g.constant(zt.clone());
    let it = g.constant(Tensor::scalar(T::one() / tau));
    let l = itc_loss(&mut g, a, b, it)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStreams::new(seed).stream("rows");
        let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for r in v.chunks_mut(d) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::from_f64(&[n, d], &v).unwrap()
    }

    #[test]
    fn itc_singleton_is_zero() {
        let z = unit_rows(1, 4, 1);
        assert_eq!(itc_value(&z, &unit_rows(1, 4, 2), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn itc_uniform_is_two_ln_n() {
        for n in [2usize, 8, 64] {
            let mut t = Tensor::zeros(&[n, 3]);
            for r in 0..n {
                t.data_mut()[r * 3] = 1.0;
            }
            let l = itc_value(&t, &t, 0.07).unwrap();
            assert!((l - 2.0 * (n as f64).ln()).abs() < 1e-9, "{n}: {l}");
        }
    }

    #[test]
    fn itc_identity_pair_oracle() {
        let i = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let tau: f64 = 0.07;
        let l = itc_value(&i, &i, tau).unwrap();
        let oracle = 2.0 * (1.0 + (-1.0 / tau).exp()).ln();
        assert!((l - oracle).abs() < 1e-12, "{l} vs {oracle}");
        assert!((l - 1.2e-6).abs() < 1e-7);
    }

    #[test]
    fn itc_rejects_mismatched_rows() {
        assert!(itc_value(&unit_rows(3, 4, 1), &unit_rows(2, 4, 1), 0.1).is_err());
    }

    #[test]
    fn pos_consist_zero_and_bounded() {
        let mut g = Graph::new();
        let a = g.constant(unit_rows(4, 5, 1));
        let b = g.constant(unit_rows(4, 5, 2));
        let same = pos_consist_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let neg = g.scale(a, -1.0);
        let far = pos_consist_loss(&mut g, a, neg).unwrap();
        assert!((g.value(far).item() - 4.0).abs() < 1e-12);
        let l = pos_consist_loss(&mut g, a, b).unwrap();
        let v = g.value(l).item();
        assert!((0.0..=4.0).contains(&v));
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::<f64>::new();
        let itc = g.constant(Tensor::scalar(1.5));
        let da = g.constant(Tensor::scalar(2.0));
        let pc = g.constant(Tensor::scalar(0.3));
        let terms = LossTerms {
            itc,
            domain_align: da,
            pos_consist: Some(pc),
        };
        let (_, r) = total_loss(&mut g, terms, &LossWeights { concept: 0.0, pos: 0.0 }).unwrap();
        assert_eq!(r.total, 1.5);
        let (_, r) = total_loss(&mut g, terms, &LossWeights::default()).unwrap();
        assert!((r.total - (1.5 + 0.5 * 2.0 + 0.1 * 0.3)).abs() < 1e-15);
        assert!(r.to_json_line().starts_with("{\"total\":"));
    }

    fn pattern(w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|i| i as f32 / (w * h) as f32).collect()).unwrap()
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let img = pattern(9, 9);
        let spec = PerturbationSpec {
            max_translate_px: 0,
            max_rotate_deg: 0.0,
        };
        assert_eq!(perturb_image(&img, &spec, 5), img);
    }

    #[test]
    fn translation_moves_hot_pixel() {
        let mut img = Image::filled(5, 5, 0.0);
        img.set(2, 2, 1.0);
        let out = apply_perturbation(&img, &Perturbation { dx: 1, dy: 0, degrees: 0.0 });
        assert_eq!(out.get(3, 2), 1.0);
        assert_eq!(out.pixels.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn right_angle_rotation_is_exact() {
        // 0 1 2 / 3 4 5 / 6 7 8
        let img = Image::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let out = apply_perturbation(&img, &Perturbation { dx: 0, dy: 0, degrees: 90.0 });
        // out(x, y) = in(y, 2 − x)
        assert_eq!(out.pixels, vec![6.0, 3.0, 0.0, 7.0, 4.0, 1.0, 8.0, 5.0, 2.0]);
    }

    #[test]
    fn perturbation_draws_stay_in_bounds() {
        let spec = PerturbationSpec::default();
        let mut rng = RngStreams::new(9).stream("p");
        for _ in 0..200 {
            let p = spec.sample(&mut rng);
            assert!(p.dx.abs() <= 2 && p.dy.abs() <= 2 && p.degrees.abs() <= 5.0);
        }
        let img = pattern(8, 8);
        assert_eq!(perturb_image(&img, &spec, 3), perturb_image(&img, &spec, 3));
    }

    #[test]
    fn temperature_clamp() {
        let t = Temperature::default();
        assert!((t.clamp_log(5.0) - 0.0).abs() < 1e-15);
        assert!((t.clamp_log(-10.0) - 0.01f64.ln()).abs() < 1e-15);
        assert!(Temperature { init: 2.0, ..t }.validate().is_err());
    }
}
