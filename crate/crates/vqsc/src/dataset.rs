//! Synthetic dataset generation and PPM directory ingestion.
//!
//! Images are anti-aliased ellipses and rectangles over gradient or solid
//! backgrounds, fully determined by a per-image seed recorded in the
//! manifest.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::{derive_seed, streams, VqscError};

const MANIFEST_NAME: &str = "manifest.txt";

/// Deterministic synthetic image for a seed.
pub fn synth_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.0f64; size * size * 3];

    // background: either a solid color or a linear gradient between two
    // random colors along a random direction
    let c0 = rand_color(&mut rng);
    if rng.gen_bool(0.3) {
        for p in 0..size * size {
            for c in 0..3 {
                px[p * 3 + c] = c0[c];
            }
        }
    } else {
        let c1 = rand_color(&mut rng);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (dx, dy) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let t = ((x as f64 * dx + y as f64 * dy) / (size as f64 * (dx.abs() + dy.abs())))
                    .clamp(0.0, 1.0);
                let p = y * size + x;
                for c in 0..3 {
                    px[p * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
                }
            }
        }
    }

    // 1..=3 anti-aliased shapes
    let shapes = rng.gen_range(1..=3usize);
    for _ in 0..shapes {
        let color = rand_color(&mut rng);
        let cx = rng.gen_range(0.15..0.85) * size as f64;
        let cy = rng.gen_range(0.15..0.85) * size as f64;
        let rx = rng.gen_range(0.08..0.35) * size as f64;
        let ry = rng.gen_range(0.08..0.35) * size as f64;
        let is_ellipse = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                // signed distance in units of pixels, negative inside
                let ddx = (x as f64 + 0.5 - cx).abs();
                let ddy = (y as f64 + 0.5 - cy).abs();
                let sd = if is_ellipse {
                    // approximate ellipse distance via normalized radius
                    let r = ((ddx / rx) * (ddx / rx) + (ddy / ry) * (ddy / ry)).sqrt();
                    (r - 1.0) * rx.min(ry)
                } else {
                    (ddx - rx).max(ddy - ry)
                };
                // smoothstep over one pixel for anti-aliasing
                let cover = (0.5 - sd).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let p = y * size + x;
                    for c in 0..3 {
                        px[p * 3 + c] = px[p * 3 + c] * (1.0 - cover) + color[c] * cover;
                    }
                }
            }
        }
    }

    let bytes: Vec<u8> = px
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(size, size, bytes).expect("consistent dims")
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]
}

/// Generate `n` images of `size` x `size`, write them as binary PPMs plus a
/// manifest of per-image seeds. Byte-deterministic for a given (n, size,
/// seed).
pub fn gen_data(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Vec<Image>, VqscError> {
    fs::create_dir_all(out_dir).map_err(|e| VqscError::io(out_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let img_seed = derive_seed(seed, &[streams::DATA_IMAGE, i as u64]);
        let img = synth_image(size, img_seed);
        let name = format!("img_{i:05}.ppm");
        img.write_ppm(&out_dir.join(&name))?;
        manifest.push_str(&format!("{name} {img_seed}\n"));
        images.push(img);
    }
    fs::write(out_dir.join(MANIFEST_NAME), manifest)
        .map_err(|e| VqscError::io(out_dir.display().to_string(), e))?;
    Ok(images)
}

/// Load every `.ppm` in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Image>, VqscError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| VqscError::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(VqscError::Dataset(format!(
            "no .ppm files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Image::read_ppm(p)).collect()
}

/// Generate in memory without touching disk (tests, held-out evaluation).
pub fn gen_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n)
        .map(|i| synth_image(size, derive_seed(seed, &[streams::DATA_IMAGE, i as u64])))
        .collect()
}
