//! `attend`: per-word heatmap PNGs and a quadrant-mass sidecar.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use image::{GrayImage, Luma};
use serde::Serialize;
use serde_json::json;
use xvl_core::synthdata::{Image, Location};
use xvl_core::textpipe::split_sentences;
use xvl_core::zeroshot::{default_gradcam_layer, WordHeatmap};

use crate::manifest::{load_studies, write_jsonl, RunManifest};
use crate::{usage, ModelArgs};

pub const QUADRANT_FILE: &str = "quadrants.jsonl";

#[derive(Args, Debug)]
pub struct AttendArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Study to visualise; defaults to the first in the file.
    #[arg(long)]
    pub study: Option<String>,
    /// Text to attend with instead of the study's report.
    #[arg(long)]
    pub text: Option<String>,
    /// Fusion layer; defaults to the deepest layer whose word rows reach the
    /// match head.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Pixel magnification of the written PNGs.
    #[arg(long, default_value_t = 8)]
    pub scale: u32,
    /// Zero the attention gradient before forming the maps (sanity check:
    /// every map comes out empty).
    #[arg(long)]
    pub zero_grad: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct QuadrantLine<'a> {
    position: usize,
    token: &'a str,
    file: String,
    /// Keyed "left upper", "right upper", ...
    mass: serde_json::Map<String, serde_json::Value>,
    peak: f64,
}

fn file_name(h: &WordHeatmap) -> String {
    let clean: String = h
        .token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("word{:02}_{clean}.png", h.position)
}

/// Relevance scaled to the map's peak, as 8-bit gray.
fn heat_png(h: &WordHeatmap, scale: u32) -> GrayImage {
    let peak = h.pixels.iter().copied().fold(0.0, f64::max);
    GrayImage::from_fn(h.width as u32 * scale, h.height as u32 * scale, |x, y| {
        let v = h.pixels[(y / scale) as usize * h.width + (x / scale) as usize];
        Luma([if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 }])
    })
}

fn image_png(image: &Image, scale: u32) -> GrayImage {
    GrayImage::from_fn(image.width as u32 * scale, image.height as u32 * scale, |x, y| {
        let v = image.get((y / scale) as usize, (x / scale) as usize);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: AttendArgs, argv: &[String]) -> Result<()> {
    if args.scale == 0 {
        return Err(usage("--scale must be positive"));
    }
    let studies = load_studies(&args.corpus)?;
    let study = match &args.study {
        Some(id) => studies
            .iter()
            .find(|s| &s.0.study_id == id)
            .ok_or_else(|| usage(format!("no study `{id}` in {}", args.corpus.display())))?,
        None => studies.first().ok_or_else(|| usage("empty corpus"))?,
    };
    let study = &study.0;
    let loaded = args.model.load()?;
    let layer = args
        .layer
        .unwrap_or_else(|| default_gradcam_layer(loaded.model.config().fusion_layers));
    let text = match &args.text {
        Some(t) => split_sentences(t),
        None => study.report.clone(),
    };
    RunManifest::new(
        "attend",
        argv,
        json!({ "study": study.study_id, "text": text, "layer": layer, "zero_grad": args.zero_grad,
                "teacher": args.model.teacher }),
        0,
    )
    .input(&args.model.checkpoint)
    .input(&args.corpus)
    .output(args.out.join(QUADRANT_FILE))
    .write(&args.out)?;

    let scorer = loaded.scorer();
    let maps = if args.zero_grad {
        scorer.attention_gradcam_with(&study.image, &text, layer, |g| g.data_mut().fill(0.0))?
    } else {
        scorer.attention_gradcam(&study.image, &text, layer)?
    };
    save_png(&image_png(&study.image, args.scale), &args.out.join("image.png"))?;
    let mut lines = Vec::new();
    for h in &maps {
        let file = file_name(h);
        save_png(&heat_png(h, args.scale), &args.out.join(&file))?;
        let mut mass = serde_json::Map::new();
        for (loc, m) in Location::ALL.iter().zip(h.quadrant_mass()) {
            let (s, z) = loc.words();
            mass.insert(format!("{s} {z}"), json!(m));
        }
        lines.push(QuadrantLine {
            position: h.position,
            token: &h.token,
            file,
            mass,
            peak: h.pixels.iter().copied().fold(0.0, f64::max),
        });
    }
    write_jsonl(&args.out.join(QUADRANT_FILE), &lines)?;
    println!("study {} layer {layer}: {} word maps in {}", study.study_id, maps.len(), args.out.display());
    for l in &lines {
        let top = l
            .mass
            .iter()
            .max_by(|a, b| a.1.as_f64().unwrap_or(0.0).total_cmp(&b.1.as_f64().unwrap_or(0.0)))
            .map(|(k, v)| format!("{k} {:.2}", v.as_f64().unwrap_or(0.0)))
            .unwrap_or_default();
        println!("{:>3} {:<12} {top}", l.position, l.token);
    }
    Ok(())
}
