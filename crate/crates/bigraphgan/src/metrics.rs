//! Pixel-level evaluation: single-scale SSIM with the canonical constants,
//! its masked variant, PSNR, and the foreground pose mask.
//!
//! All metrics run in f64 on `[3,h,w]` images with values in `[0,1]`.

use crate::data::{Skeleton, MAX_LIMB_RADIUS_FRAC, SKELETON_EDGES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SSIM window extent (11x11 Gaussian).
pub const SSIM_WINDOW: usize = 11;
/// Gaussian sigma of the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of one `h x w` plane.
fn gauss_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn check_image_pair(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!(
            "image shapes differ: {sa:?} vs {sb:?}"
        )));
    }
    if sa.len() != 3 || sa[0] != 3 {
        return Err(Error::shape(format!("expected [3,h,w] images, got {sa:?}")));
    }
    if sa[1] < SSIM_WINDOW || sa[2] < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {sa:?}"
        )));
    }
    Ok((sa[1], sa[2]))
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid-mode windows, averaged over channels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_image_pair(a, b)?;
    let plane = h * w;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = gauss_valid(pa, h, w);
        let mu_b = gauss_valid(pb, h, w);
        let m_aa = gauss_valid(&aa, h, w);
        let m_bb = gauss_valid(&bb, h, w);
        let m_ab = gauss_valid(&ab, h, w);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// SSIM of the mask-multiplied images (background zeroed). A `[1,h,w]` mask
/// broadcasts over channels.
pub fn masked_ssim(a: &Tensor<f64>, b: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_image_pair(a, b)?;
    let sm = mask.shape();
    if sm != [1, h, w] {
        return Err(Error::shape(format!(
            "mask must be [1,{h},{w}], got {sm:?}"
        )));
    }
    let plane = h * w;
    let apply = |img: &Tensor<f64>| {
        let mut data = Vec::with_capacity(3 * plane);
        for ch in 0..3 {
            for i in 0..plane {
                data.push(img.data()[ch * plane + i] * mask.data()[i]);
            }
        }
        Tensor::from_vec(vec![3, h, w], data).expect("mask application keeps shape")
    };
    ssim(&apply(a), &apply(b))
}

/// Peak signal-to-noise ratio in dB for range-1 images, clamped at 100 dB
/// (identical images report exactly 100).
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!(
            "image shapes differ: {sa:?} vs {sb:?}"
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Foreground mask: union of the skeleton's bone capsules, dilated by
/// `margin` pixels. Bone base radius is the renderer's maximum capsule
/// radius ([`MAX_LIMB_RADIUS_FRAC`] of `min(h,w)`).
pub fn pose_mask(skel: &Skeleton, h: usize, w: usize, margin: f64) -> Tensor<f64> {
    let u = h.min(w) as f64;
    let radius = MAX_LIMB_RADIUS_FRAC * u + margin;
    let mut data = vec![0.0f64; h * w];
    for &(a, b) in &SKELETON_EDGES {
        let (Some(ja), Some(jb)) = (skel.joints[a], skel.joints[b]) else {
            continue;
        };
        let x0 = ((ja.x.min(jb.x) - radius).floor().max(0.0)) as usize;
        let x1 = ((ja.x.max(jb.x) + radius).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((ja.y.min(jb.y) - radius).floor().max(0.0)) as usize;
        let y1 = ((ja.y.max(jb.y) + radius).ceil().min(h as f64 - 1.0)) as usize;
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let (px, py) = (ix as f64, iy as f64);
                let (dx, dy) = (jb.x - ja.x, jb.y - ja.y);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - ja.x) * dx + (py - ja.y) * dy) / len2).clamp(0.0, 1.0)
                };
                let (cx, cy) = (ja.x + t * dx, ja.y + t * dy);
                let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                if d2 <= radius * radius {
                    data[iy * w + ix] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(vec![1, h, w], data).expect("mask shape is valid")
}

/// Per-image metric rows plus corpus means.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub name: String,
    pub ssim: f64,
    pub mask_ssim: f64,
    pub psnr: f64,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, ssim: f64, mask_ssim: f64, psnr: f64) {
        self.rows.push(MetricRow {
            name: name.into(),
            ssim,
            mask_ssim,
            psnr,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn mean(&self, f: impl Fn(&MetricRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn mean_mask_ssim(&self) -> f64 {
        self.mean(|r| r.mask_ssim)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr)
    }

    /// `metric<TAB>value` summary lines.
    pub fn summary_lines(&self) -> String {
        format!(
            "ssim\t{}\nmask_ssim\t{}\npsnr\t{}\nsamples\t{}\n",
            self.mean_ssim(),
            self.mean_mask_ssim(),
            self.mean_psnr(),
            self.rows.len()
        )
    }

    /// Machine-readable `key = value` summary.
    pub fn summary_kv(&self) -> String {
        format!(
            "ssim = {}\nmask_ssim = {}\npsnr = {}\nsamples = {}\n",
            self.mean_ssim(),
            self.mean_mask_ssim(),
            self.mean_psnr(),
            self.rows.len()
        )
    }

    /// One tab-separated row per image.
    pub fn per_image_lines(&self) -> String {
        let mut out = String::from("name\tssim\tmask_ssim\tpsnr\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.ssim, r.mask_ssim, r.psnr));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_identity, synth_pose};

    fn fixture(seed: u64) -> Tensor<f64> {
        Tensor::<f64>::randn_seeded(&[3, 24, 24], 0.5, 0.15, seed)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0))
    }

    #[test]
    fn ssim_self_is_one() {
        let a = fixture(1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = fixture(2);
        let b = fixture(3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_bounded_above_by_one() {
        for seed in 0..5 {
            let a = fixture(seed);
            let b = fixture(seed + 100);
            assert!(ssim(&a, &b).unwrap() <= 1.0);
        }
    }

    #[test]
    fn masked_ssim_full_mask_equals_ssim() {
        let a = fixture(4);
        let b = fixture(5);
        let mask = Tensor::full(&[1, 24, 24], 1.0).unwrap();
        let m = masked_ssim(&a, &b, &mask).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!((m - s).abs() < 1e-12);
    }

    #[test]
    fn masked_ssim_zero_mask_is_degenerate_one() {
        let a = fixture(6);
        let b = fixture(7);
        let mask = Tensor::zeros(&[1, 24, 24]).unwrap();
        assert_eq!(masked_ssim(&a, &b, &mask).unwrap(), 1.0);
    }

    #[test]
    fn psnr_cases() {
        let a = fixture(8);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);

        // constant difference of 0.5: 10*log10(1/0.25)
        let zeros = Tensor::zeros(&[3, 4, 4]).unwrap();
        let half = Tensor::full(&[3, 4, 4], 0.5).unwrap();
        let expect = 10.0 * (4.0f64).log10();
        assert!((psnr(&zeros, &half).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = fixture(9);
        let mut last = f64::INFINITY;
        for amp_step in 1..5 {
            let amp = amp_step as f64 * 0.05;
            let noise = Tensor::<f64>::randn_seeded(&[3, 24, 24], 0.0, 1.0, 55).unwrap();
            let b = Tensor::from_vec(
                vec![3, 24, 24],
                a.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(x, n)| (x + amp * n).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last, "psnr should fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn psnr_mse_bijection_below_clamp() {
        let a = fixture(10);
        let b = fixture(11);
        let p = psnr(&a, &b).unwrap();
        let mse_back = 10f64.powf(-p / 10.0);
        let n = a.len() as f64;
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        assert!((mse - mse_back).abs() < 1e-12);
    }

    #[test]
    fn empty_skeleton_gives_zero_mask() {
        let mask = pose_mask(&Skeleton::empty(), 32, 32, 3.0);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn visible_joints_are_inside_mask() {
        let id = synth_identity(12);
        let (skel, _) = synth_pose(&id, 13, 64, 64);
        let mask = pose_mask(&skel, 64, 64, 3.0);
        for joint in skel.joints.iter().flatten() {
            let (ix, iy) = (joint.x.round() as usize, joint.y.round() as usize);
            assert_eq!(mask.data()[iy * 64 + ix], 1.0);
        }
    }

    #[test]
    fn mask_area_matches_sampled_rasterizer() {
        // Independent oracle: mark pixels by dense sampling along each bone
        // instead of the closed-form point-to-segment projection.
        let id = synth_identity(14);
        let (skel, _) = synth_pose(&id, 15, 48, 48);
        let margin = 3.0;
        let mask = pose_mask(&skel, 48, 48, margin);
        let u = 48f64;
        let radius = MAX_LIMB_RADIUS_FRAC * u + margin;

        let mut oracle = vec![false; 48 * 48];
        for &(a, b) in &SKELETON_EDGES {
            let (Some(ja), Some(jb)) = (skel.joints[a], skel.joints[b]) else {
                continue;
            };
            let steps = 4000usize;
            for iy in 0..48 {
                for ix in 0..48 {
                    if oracle[iy * 48 + ix] {
                        continue;
                    }
                    let (px, py) = (ix as f64, iy as f64);
                    for s in 0..=steps {
                        let t = s as f64 / steps as f64;
                        let cx = ja.x + t * (jb.x - ja.x);
                        let cy = ja.y + t * (jb.y - ja.y);
                        let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                        if d2 <= radius * radius {
                            oracle[iy * 48 + ix] = true;
                            break;
                        }
                    }
                }
            }
        }
        let mask_area: usize = mask.data().iter().filter(|&&v| v == 1.0).count();
        let oracle_area = oracle.iter().filter(|&&v| v).count();
        assert_eq!(mask_area, oracle_area);
        for (m, o) in mask.data().iter().zip(oracle.iter()) {
            assert_eq!(*m == 1.0, *o);
        }
    }

    #[test]
    fn half_plane_fixture_matches_direct_window_oracle() {
        // Independent oracle: direct (non-separable) 2-D windowed sums with a
        // freshly derived Gaussian window.
        let h = 16;
        let w = 16;
        let mut data = vec![0.0f64; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[ch * h * w + y * w + x] = if x < w / 2 { 0.0 } else { 1.0 };
                }
            }
        }
        let a = Tensor::from_vec(vec![3, h, w], data).unwrap();
        let b = a.map(|v| 1.0 - v);

        let got = ssim(&a, &b).unwrap();
        let expect = direct_ssim_oracle(&a, &b);
        assert!(
            (got - expect).abs() < 1e-12,
            "ssim {got} vs oracle {expect}"
        );
        assert!(got < 0.5, "anticorrelated fixture should score low: {got}");
    }

    fn direct_ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let plane = h * w;
        // fresh window derivation
        let mut win = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
        let c = (SSIM_WINDOW / 2) as f64;
        let mut sum = 0.0;
        for y in 0..SSIM_WINDOW {
            for x in 0..SSIM_WINDOW {
                let (dy, dx) = (y as f64 - c, x as f64 - c);
                let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                win[y * SSIM_WINDOW + x] = v;
                sum += v;
            }
        }
        for v in win.iter_mut() {
            *v /= sum;
        }
        let c1 = SSIM_K1.powi(2);
        let c2 = SSIM_K2.powi(2);
        let mut total = 0.0;
        for ch in 0..3 {
            let pa = &a.data()[ch * plane..(ch + 1) * plane];
            let pb = &b.data()[ch * plane..(ch + 1) * plane];
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for wy in 0..SSIM_WINDOW {
                        for wx in 0..SSIM_WINDOW {
                            let kv = win[wy * SSIM_WINDOW + wx];
                            let va = pa[(y0 + wy) * w + x0 + wx];
                            let vb = pb[(y0 + wy) * w + x0 + wx];
                            ma += kv * va;
                            mb += kv * vb;
                            maa += kv * va * va;
                            mbb += kv * vb * vb;
                            mab += kv * va * vb;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn report_means_are_arithmetic() {
        let mut r = MetricReport::default();
        r.push("a", 0.5, 0.6, 20.0);
        r.push("b", 0.7, 0.8, 30.0);
        assert!((r.mean_ssim() - 0.6).abs() < 1e-12);
        assert!((r.mean_mask_ssim() - 0.7).abs() < 1e-12);
        assert!((r.mean_psnr() - 25.0).abs() < 1e-12);
        assert!(r.summary_lines().contains("samples\t2"));
    }
}
