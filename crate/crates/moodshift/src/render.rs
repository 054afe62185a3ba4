//! PNG output: Grad-CAM overlays, accuracy bars and confusion heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, RgbImage};
use moodshift_core::cam::CamMap;
use moodshift_core::data::FrameClip;

use crate::error::{AppError, IoContext, Result};

/// Jet-style colour for a heat value in `[0, 1]` (blue -> cyan -> yellow -> red).
pub fn heat_color(h: f64) -> [f64; 3] {
    let h = h.clamp(0.0, 1.0);
    let t = 3.0 * h;
    if t < 1.0 {
        [0.0, t, 1.0]
    } else if t < 2.0 {
        [t - 1.0, 1.0, 2.0 - t]
    } else {
        [1.0, 3.0 - t, 0.0]
    }
}

/// Blends each pixel toward the heat colour by the heat value.
pub fn overlay_frame(cam: &CamMap, clip: &FrameClip, frame: usize) -> RgbImage {
    let [_, h, w, _] = clip.shape();
    let px = clip.pixels().data();
    let heat = cam.heat.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = heat[(frame * h + y) * w + x];
        let tint = heat_color(a);
        let o = ((frame * h + y) * w + x) * 3;
        let mix = |c: usize| {
            let v = (1.0 - a) * px[o + c] + a * tint[c];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([mix(0), mix(1), mix(2)])
    })
}

/// Writes one overlay PNG per frame, upscaled by `scale` (nearest neighbour).
pub fn render_cam(cam: &CamMap, clip: &FrameClip, out: &Path, scale: u32) -> Result<Vec<PathBuf>> {
    let [d, h, w, _] = clip.shape();
    if cam.heat.shape() != [d, h, w] {
        return Err(AppError::data(format!(
            "CAM shape {:?} does not match clip frames {:?}",
            cam.heat.shape(),
            [d, h, w]
        )));
    }
    fs::create_dir_all(out).at(out)?;
    let scale = scale.max(1);
    (0..d)
        .map(|f| {
            let img = overlay_frame(cam, clip, f);
            let img = imageops::resize(&img, w as u32 * scale, h as u32 * scale, imageops::FilterType::Nearest);
            let p = out.join(format!("frame_{f:02}.png"));
            img.save(&p).map_err(|e| AppError::io(&p, std::io::Error::other(e)))?;
            Ok(p)
        })
        .collect()
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Grouped bars in `[0, 1]`, one group per fold, one colour per series.
pub fn accuracy_bars(series: &[&[f64]], path: &Path) -> Result<()> {
    const BAR: u32 = 16;
    const H: u32 = 200;
    let colours = [Rgb([52, 101, 164]), Rgb([204, 0, 0]), Rgb([78, 154, 6])];
    let groups = series.iter().map(|s| s.len()).max().unwrap_or(0) as u32;
    let per = series.len() as u32 * BAR + BAR;
    let mut img = RgbImage::from_pixel((groups * per + BAR).max(1), H + 2, Rgb([255, 255, 255]));
    for (si, s) in series.iter().enumerate() {
        for (g, &v) in s.iter().enumerate() {
            let bh = (v.clamp(0.0, 1.0) * f64::from(H)).round() as u32;
            let x = BAR + g as u32 * per + si as u32 * BAR;
            fill(&mut img, x, H - bh, BAR - 2, bh, colours[si % colours.len()]);
        }
    }
    let width = img.width();
    fill(&mut img, 0, H, width, 2, Rgb([0, 0, 0]));
    img.save(path).map_err(|e| AppError::io(path, std::io::Error::other(e)))
}

/// 3x3 heatmap, rows = truth, columns = prediction, darker = more items.
pub fn confusion_heatmap(confusion: &[[usize; 3]; 3], path: &Path) -> Result<()> {
    const CELL: u32 = 64;
    let max = confusion.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(3 * CELL, 3 * CELL, Rgb([255, 255, 255]));
    for (r, row) in confusion.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            let t = n as f64 / max;
            let shade = |base: f64| (255.0 - t * (255.0 - base)).round() as u8;
            fill(
                &mut img,
                c as u32 * CELL + 1,
                r as u32 * CELL + 1,
                CELL - 2,
                CELL - 2,
                Rgb([shade(8.0), shade(48.0), shade(107.0)]),
            );
        }
    }
    img.save(path).map_err(|e| AppError::io(path, std::io::Error::other(e)))
}
