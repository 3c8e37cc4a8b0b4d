//! Applying a trained state to image folders: synthetic LR generation,
//! SR inference and generator galleries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::degrade::{BlurKernel, NoiseMap};
use crate::error::{PdmError, Result};
use crate::image::{list_images, load_image, save_image, ImagePlane};
use crate::kernel_gen::{kernel_gallery, write_kernels_raw};
use crate::noise_gen::noise_to_image;
use crate::rng::{substream, Consumer};
use crate::synth::{kernel_covariance, procedural_image};
use crate::trainer::PdmState;

/// Manifest entry of one synthesized LR image.
#[derive(Clone, Debug, Serialize)]
pub struct SynthRecord {
    pub filename: String,
    pub source: String,
    /// Key of the latent draws used for this image.
    pub latent_key: u64,
    /// `(σ_yy, σ_xy, σ_xx)` of the kernel at the image centre.
    pub kernel_covariance: [f64; 3],
    pub noise_std: f64,
}

fn file_name(p: &Path) -> String {
    p.file_name().expect("listed file").to_string_lossy().into_owned()
}

/// Degrades every HR image with freshly sampled kernels and noise from the
/// trained generators. Writes LR PNGs, `manifest.jsonl` and `kernels.pdmk`.
pub fn synthesize_folder(state: &PdmState, hr_dir: &Path, out_dir: &Path) -> Result<Vec<SynthRecord>> {
    let sources = list_images(hr_dir)?;
    if sources.is_empty() {
        return Err(PdmError::Empty(format!("no PNG images in {}", hr_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PdmError::io(out_dir, e))?;
    let s = state.cfg.scale;
    let k = state.cfg.kernel.kernel_size;
    let mut records = Vec::new();
    let mut kernels = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let hr = load_image(src)?;
        let (h, w) = (hr.height() / s * s, hr.width() / s * s);
        if h == 0 || w == 0 {
            log::warn!("skipping {}: smaller than the scale", src.display());
            continue;
        }
        let x = hr.crop(0, 0, h, w)?;
        let key: u64 = substream(state.cfg.seed, i as u64, Consumer::Synthesize).random();
        let pair = state.synthesize_pair(&x.to_tensor(), key)?;
        let y = ImagePlane::from_batch(&pair.y_ref)?.remove(0).clamped().quantized();
        let name = file_name(src);
        save_image(&y, &out_dir.join(&name))?;
        let field = BlurKernel::from_batch(&pair.k, k)?.remove(0);
        let (_, fh, fw) = field.shape();
        let centre = BlurKernel::invariant(k, field.taps_at(fh / 2, fw / 2))?;
        let n = pair.n.data();
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let std = (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
        records.push(SynthRecord {
            filename: name,
            source: src.display().to_string(),
            latent_key: key,
            kernel_covariance: kernel_covariance(centre.weights(), k),
            noise_std: std,
        });
        kernels.push(centre);
    }
    let manifest = out_dir.join("manifest.jsonl");
    let mut out = BufWriter::new(File::create(&manifest).map_err(|e| PdmError::io(&manifest, e))?);
    for r in &records {
        let line = serde_json::to_string(r).map_err(|e| PdmError::format(&manifest, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| PdmError::io(&manifest, e))?;
    }
    out.flush().map_err(|e| PdmError::io(&manifest, e))?;
    if !kernels.is_empty() {
        write_kernels_raw(&out_dir.join("kernels.pdmk"), &kernels)?;
    }
    Ok(records)
}

/// Runs the SR model over every LR image, returning `(filename, output)`.
pub fn super_resolve_folder(state: &PdmState, lr_dir: &Path, save_to: Option<&Path>) -> Result<Vec<(String, ImagePlane)>> {
    let net = state
        .sr_net
        .as_ref()
        .ok_or_else(|| PdmError::Config("checkpoint has no SR model (sr_enabled = false)".into()))?;
    if let Some(d) = save_to {
        std::fs::create_dir_all(d).map_err(|e| PdmError::io(d, e))?;
    }
    let files = list_images(lr_dir)?;
    if files.is_empty() {
        return Err(PdmError::Empty(format!("no PNG images in {}", lr_dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let sr = net.super_resolve(&load_image(p)?)?.clamped();
            let name = file_name(p);
            if let Some(d) = save_to {
                save_image(&sr, &d.join(&name))?;
            }
            Ok((name, sr))
        })
        .collect()
}

/// Paths written by [`export_gallery`].
#[derive(Clone, Debug, Serialize)]
pub struct GalleryFiles {
    pub kernel_grid: PathBuf,
    pub kernels_raw: PathBuf,
    pub noise_maps: Vec<PathBuf>,
}

/// Writes a kernel grid, the raw kernels and a few noise visualizations.
/// Conditioning images come from `images` or, if empty, procedural ones.
pub fn export_gallery(state: &PdmState, count: usize, images: &[ImagePlane], out_dir: &Path) -> Result<GalleryFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| PdmError::io(out_dir, e))?;
    let s = state.cfg.scale;
    let probes: Vec<ImagePlane> = if images.is_empty() {
        (0..4)
            .map(|i| procedural_image(32 * s, &mut substream(state.cfg.seed, i, Consumer::Gallery)))
            .collect::<Result<_>>()?
    } else {
        images
            .iter()
            .map(|im| im.crop(0, 0, im.height() / s * s, im.width() / s * s))
            .collect::<Result<_>>()?
    };
    let kc = &state.cfg.kernel;
    let cond = kc.conditioning.uses_image() || kc.spatial_mode == crate::degrade::SpatialMode::Variant;
    let gallery = kernel_gallery(
        &state.kernel_net,
        count,
        kc.latent_source,
        state.cfg.seed,
        cond.then(|| &probes[0]),
        4,
    )?;
    let kernel_grid = out_dir.join("kernels.png");
    save_image(&gallery.grid, &kernel_grid)?;
    let kernels_raw = out_dir.join("kernels.pdmk");
    write_kernels_raw(&kernels_raw, &gallery.kernels)?;
    let mut noise_maps = Vec::new();
    for (i, x) in probes.iter().enumerate().take(4) {
        let pair = state.synthesize_pair(&x.to_tensor(), i as u64)?;
        let n = NoiseMap::new(ImagePlane::from_batch(&pair.n)?.remove(0));
        let path = out_dir.join(format!("noise_{i:02}.png"));
        save_image(&noise_to_image(&n, 5.0), &path)?;
        noise_maps.push(path);
    }
    Ok(GalleryFiles {
        kernel_grid,
        kernels_raw,
        noise_maps,
    })
}
