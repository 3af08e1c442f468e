//! Panel figures: ASL input, T1 input, PET target, PET prediction and absolute error.

use std::fs;
use std::path::PathBuf;

use image::{GrayImage, Luma};

use super::{CliError, PlotArgs};
use crate::datasets::{self, Batch};
use crate::model::load_checkpoint;

const GAP: u32 = 2;

/// Place unit-range planes side by side, each upscaled by `scale`, on a white background.
pub fn panel_strip(planes: &[&[f32]], height: usize, width: usize, scale: u32) -> GrayImage {
    let (h, w) = (height as u32 * scale, width as u32 * scale);
    let n = planes.len() as u32;
    let mut img = GrayImage::from_pixel(n * w + (n.saturating_sub(1)) * GAP, h, Luma([255]));
    for (i, plane) in planes.iter().enumerate() {
        let x0 = i as u32 * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                let v = plane[(y / scale) as usize * width + (x / scale) as usize];
                img.put_pixel(x0 + x, y, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    img
}

pub fn cmd_plot(args: &PlotArgs) -> Result<Vec<PathBuf>, CliError> {
    if args.scale == 0 {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let corpus = datasets::load_manifest(&args.manifest)?;
    let (mut net, _) = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let ids: Vec<u64> = match &args.subjects {
        Some(ids) => ids.clone(),
        None => corpus.paired().map(|s| s.id).collect(),
    };
    fs::create_dir_all(&args.out).map_err(|e| super::io_error(&args.out, e))?;
    let (h, w) = corpus.dims();
    let mut written = Vec::new();
    for id in ids {
        let subject = corpus.subject(id).ok_or(datasets::DatasetError::UnknownSubject(id))?;
        let pet = subject
            .pet
            .as_ref()
            .ok_or_else(|| CliError::Data(format!("subject {id} has no PET target to plot")))?;
        let batch = Batch::from_subjects(&[subject], net.config().use_t1);
        let pred = net.predict(&batch.asl, batch.t1.as_ref())?;
        let error: Vec<f32> = pred.data().iter().zip(&pet.pixels).map(|(p, t)| (p - t).abs()).collect();
        let planes: [&[f32]; 5] = [&subject.asl.pixels, &subject.t1.pixels, &pet.pixels, pred.data(), &error];
        let img = panel_strip(&planes, h, w, args.scale);
        let path = args.out.join(format!("sub-{id:04}_panels.png"));
        img.save(&path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_layout() {
        let a = [0.0f32, 1.0, 0.5, 0.25];
        let img = panel_strip(&[&a, &a], 2, 2, 3);
        assert_eq!(img.dimensions(), (2 * 6 + GAP, 6));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(3, 0).0[0], 255);
        assert_eq!(img.get_pixel(6, 0).0[0], 255);
        assert_eq!(img.get_pixel(6 + GAP, 3).0[0], 128);
    }
}
