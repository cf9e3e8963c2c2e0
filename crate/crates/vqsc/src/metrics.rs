//! Image-quality and pipeline metrics: PSNR, SSIM, a fixed-feature
//! perceptual distance, and index accuracy.

use vqsc_tensor::Tensor;

use crate::codebook::IndexGrid;
use crate::image::Image;
use crate::perceptual::PerceptualExtractor;
use crate::VqscError;

/// One evaluated transmission. `index_accuracy` is absent for modes without
/// a discrete index path (the learned JSCC baseline).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_proxy: f64,
    pub index_accuracy: Option<f64>,
}

fn check_same_size(context: &str, a: &Image, b: &Image) -> Result<(), VqscError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(VqscError::ShapeMismatch {
            context: context.into(),
            detail: format!(
                "{}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            ),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in the 8-bit domain: 10*log10(255^2 / MSE).
/// Identical images return +inf.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, VqscError> {
    check_same_size("psnr", a, b)?;
    let mut se = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

/// Rec. 601 luma from 8-bit RGB.
pub fn grayscale(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for p in 0..w * h {
        let d = &img.data()[p * 3..p * 3 + 3];
        out[p] = 0.299 * d[0] as f64 + 0.587 * d[1] as f64 + 0.114 * d[2] as f64;
    }
    out
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity over valid 11x11 Gaussian windows of the
/// grayscale image, dynamic range 255.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, VqscError> {
    check_same_size("ssim", a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(VqscError::ShapeMismatch {
            context: "ssim".into(),
            detail: format!("image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let kernel = gaussian_kernel();

    // separable Gaussian filtering, valid mode
    let filter = |src: &[f64]| -> Vec<f64> {
        let wv = w - SSIM_WINDOW + 1;
        let mut tmp = vec![0.0; h * wv];
        for y in 0..h {
            for x in 0..wv {
                let mut s = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    s += kv * src[y * w + x + t];
                }
                tmp[y * wv + x] = s;
            }
        }
        let hv = h - SSIM_WINDOW + 1;
        let mut out = vec![0.0; hv * wv];
        for y in 0..hv {
            for x in 0..wv {
                let mut s = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    s += kv * tmp[(y + t) * wv + x];
                }
                out[y * wv + x] = s;
            }
        }
        out
    };

    let mul = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };

    let mu_a = filter(&ga);
    let mu_b = filter(&gb);
    let e_aa = filter(&mul(&ga, &ga));
    let e_bb = filter(&mul(&gb, &gb));
    let e_ab = filter(&mul(&ga, &gb));

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cab = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += s;
    }
    Ok(acc / mu_a.len() as f64)
}

/// Channel-normalized squared feature distance, averaged over the
/// extractor's taps. Zero iff the tap outputs are identical; symmetric by
/// construction.
pub fn perceptual_proxy(
    a: &Image,
    b: &Image,
    phi: &PerceptualExtractor,
) -> Result<f64, VqscError> {
    check_same_size("perceptual_proxy", a, b)?;
    let ta = phi.taps(&a.to_tensor())?;
    let tb = phi.taps(&b.to_tensor())?;
    Ok(tap_distance(&ta, &tb))
}

/// Distance between two tap stacks: per tap, unit-normalize each spatial
/// position's channel vector, then take the mean squared difference.
pub fn tap_distance(ta: &[Tensor], tb: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        let shape = x.shape();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let xd = x.data();
        let yd = y.data();
        let mut tap_acc = 0.0;
        for p in 0..hw {
            let mut nx = 0.0;
            let mut ny = 0.0;
            for ch in 0..c {
                nx += xd[ch * hw + p] * xd[ch * hw + p];
                ny += yd[ch * hw + p] * yd[ch * hw + p];
            }
            let nx = nx.sqrt().max(1e-10);
            let ny = ny.sqrt().max(1e-10);
            for ch in 0..c {
                let d = xd[ch * hw + p] / nx - yd[ch * hw + p] / ny;
                tap_acc += d * d;
            }
        }
        total += tap_acc / (c * hw) as f64;
    }
    total / ta.len() as f64
}

/// Fraction of grid positions with matching indices.
pub fn index_accuracy(predicted: &IndexGrid, reference: &IndexGrid) -> Result<f64, VqscError> {
    if predicted.grid() != reference.grid() {
        return Err(VqscError::ShapeMismatch {
            context: "index_accuracy".into(),
            detail: format!("{:?} vs {:?}", predicted.grid(), reference.grid()),
        });
    }
    let same = predicted
        .indices()
        .iter()
        .zip(reference.indices())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / predicted.indices().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_image;

    fn constant_image(size: usize, v: u8) -> Image {
        Image::new(size, size, vec![v; size * size * 3]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = constant_image(16, 100);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // uniform |diff| = 10 -> MSE = 100 -> 10*log10(650.25) = 28.1308...
        let b = constant_image(16, 110);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 28.130803608679344).abs() < 1e-9, "got {v}");
        assert!((v - 20.0 * 25.5f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_zero_db_at_full_scale_mse() {
        let a = constant_image(8, 0);
        let b = constant_image(8, 255);
        let v = psnr(&a, &b).unwrap();
        assert!(v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn psnr_symmetry_and_monotone_noise() {
        let base = synth_image(32, 77);
        let mut prev = f64::INFINITY;
        for amp in [2i16, 4, 8, 16] {
            // deterministic pseudo-noise, alternating sign
            let data: Vec<u8> = base
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let delta = if i % 2 == 0 { amp } else { -amp };
                    (v as i16 + delta).clamp(0, 255) as u8
                })
                .collect();
            let noisy = Image::new(32, 32, data).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            let q = psnr(&noisy, &base).unwrap();
            assert_eq!(p, q);
            assert!(p < prev, "psnr must strictly decrease with amplitude");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = synth_image(32, 5);
        let b = synth_image(32, 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = constant_image(16, 100);
        let b = constant_image(16, 120);
        // zero variance: per-window ssim = (2 c1 c2 + C1)/(c1^2 + c2^2 + C1)
        let (ca, cb) = (100.0f64, 120.0f64);
        let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
        let expect = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_matches_direct_reference_implementation() {
        // independent straightforward implementation: explicit per-window
        // weighted statistics, no separable filtering
        fn ssim_reference(a: &Image, b: &Image) -> f64 {
            let (w, h) = (a.width(), a.height());
            let ga = grayscale(a);
            let gb = grayscale(b);
            let k1d = gaussian_kernel();
            let mut k2d = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    k2d[i * SSIM_WINDOW + j] = k1d[i] * k1d[j];
                }
            }
            let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
            let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    let mut eaa = 0.0;
                    let mut ebb = 0.0;
                    let mut eab = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k2d[dy * SSIM_WINDOW + dx];
                            let va = ga[(y0 + dy) * w + x0 + dx];
                            let vb = gb[(y0 + dy) * w + x0 + dx];
                            ma += wgt * va;
                            mb += wgt * vb;
                            eaa += wgt * va * va;
                            ebb += wgt * vb * vb;
                            eab += wgt * va * vb;
                        }
                    }
                    let va = eaa - ma * ma;
                    let vb = ebb - mb * mb;
                    let cab = eab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            acc / count as f64
        }

        for seed in [1u64, 2, 3] {
            let a = synth_image(24, seed);
            let b = synth_image(24, seed + 100);
            let fast = ssim(&a, &b).unwrap();
            let reference = ssim_reference(&a, &b);
            assert!(
                (fast - reference).abs() < 1e-6,
                "seed {seed}: {fast} vs {reference}"
            );
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant_image(8, 1);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn perceptual_proxy_properties() {
        let phi = PerceptualExtractor::metric_reference();
        let a = synth_image(32, 11);
        let b = synth_image(32, 12);
        assert_eq!(perceptual_proxy(&a, &a, &phi).unwrap(), 0.0);
        let d_ab = perceptual_proxy(&a, &b, &phi).unwrap();
        let d_ba = perceptual_proxy(&b, &a, &phi).unwrap();
        assert_eq!(d_ab, d_ba);
        assert!(d_ab > 0.0);
        // reproducible bit-exactly across extractor instances
        let phi2 = PerceptualExtractor::metric_reference();
        assert_eq!(d_ab.to_bits(), perceptual_proxy(&a, &b, &phi2).unwrap().to_bits());
    }

    #[test]
    fn index_accuracy_examples() {
        let a = IndexGrid::new(4, 4, (0..16).collect()).unwrap();
        assert_eq!(index_accuracy(&a, &a).unwrap(), 1.0);
        let b = IndexGrid::new(4, 4, (16..32).collect()).unwrap();
        assert_eq!(index_accuracy(&a, &b).unwrap(), 0.0);
        let mut half = (0..16).collect::<Vec<_>>();
        for v in half.iter_mut().take(8) {
            *v += 100;
        }
        let c = IndexGrid::new(4, 4, half).unwrap();
        assert_eq!(index_accuracy(&a, &c).unwrap(), 0.5);
    }
}
