use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use sonoseg::checkpoint::Checkpoint;
use sonoseg::data::{load_directory, LoadOptions, Mask};
use sonoseg::trainer::{binarize, load_model, predict};
use sonoseg::{Error, Result};

/// Ground truth is drawn green and predictions red, blended over the input.
pub const LEGEND: &str = "panels: input | ground truth (green) | prediction (red); \
overlays blend 50% color over the grayscale input; a missing ground truth panel is the plain input";

fn panel(img: &mut RgbImage, x0: u32, gray: &[u8], w: usize, mask: Option<&Mask>, color: [u8; 3]) {
    for (i, &g) in gray.iter().enumerate() {
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let px = match mask {
            Some(m) if m.data[i] == 1 => {
                let mix = |c: u8| ((g as u16 + c as u16) / 2) as u8;
                Rgb([mix(color[0]), mix(color[1]), mix(color[2])])
            }
            _ => Rgb([g, g, g]),
        };
        img.put_pixel(x0 + x, y, px);
    }
}

pub fn render(ckpt: &Path, images: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let (cfg, network, store) = load_model(&Checkpoint::load(ckpt)?)?;
    let size = cfg.data.image_size;
    let opts = LoadOptions {
        mask_suffix: cfg.data.mask_suffix.clone(),
        size: Some((size, size)),
    };
    let samples = load_directory(images, &opts)?;
    let probs = predict(&network, &store, &samples)?;
    let threshold = threshold.unwrap_or(cfg.optim.threshold);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    println!("# {LEGEND}");
    for (s, p) in samples.iter().zip(&probs) {
        let (w, h) = s.size();
        let pred = binarize(p, w, h, threshold)?;
        let gray = s.image.to_u8();
        let mut img = RgbImage::new(3 * w as u32, h as u32);
        panel(&mut img, 0, &gray, w, None, [0, 0, 0]);
        panel(&mut img, w as u32, &gray, w, s.mask.as_ref(), [0, 255, 0]);
        panel(&mut img, 2 * w as u32, &gray, w, Some(&pred), [255, 0, 0]);
        let path = out.join(format!("{}.png", s.id));
        img.save(&path).map_err(|e| Error::item(&path, e.to_string()))?;
        println!("{}", path.display());
    }
    Ok(())
}
