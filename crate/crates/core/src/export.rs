//! File outputs: PGM images, attention CSVs and on-disk datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{load_records, save_records, Record};
use crate::config::Dims;
use crate::dataset::{Sample, VOCABULARY};
use crate::error::{Error, Result};
use crate::mutual::AttentionTrace;
use crate::tensor::Tensor;

/// Binary greyscale (P5, maxval 255).
pub fn pgm_bytes(height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::shape(
            "pgm",
            format!("{} pixels for a {height}×{width} image", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((h, w, data))
}

pub fn mask_pgm(height: usize, width: usize, mask: &[bool]) -> Result<Vec<u8>> {
    let px: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    pgm_bytes(height, width, &px)
}

/// Probabilities in `[0, 1]` scaled to 0..=255.
pub fn probability_pgm(height: usize, width: usize, probs: &[f64]) -> Result<Vec<u8>> {
    let px: Vec<u8> = probs
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pgm_bytes(height, width, &px)
}

pub fn attention_csv(trace: &AttentionTrace) -> String {
    let mut s = String::from("pixel_index,token_index,score,relevance,kept,weight\n");
    let lt = trace.text_tokens;
    for i in 0..trace.visual_tokens {
        for j in 0..lt {
            let k = i * lt + j;
            let _ = writeln!(
                s,
                "{i},{j},{:.9},{:.9},{},{:.9}",
                trace.scores[k],
                trace.relevance[k],
                u8::from(trace.kept[k]),
                trace.weights[k]
            );
        }
    }
    s
}

/// Mean attention weight each token receives from `pixels`.
pub fn word_attention(trace: &AttentionTrace, pixels: &[usize]) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(Error::Input("empty pixel set".into()));
    }
    let lt = trace.text_tokens;
    let mut out = vec![0.0; lt];
    for &i in pixels {
        if i >= trace.visual_tokens {
            return Err(Error::Input(format!("pixel {i} out of range")));
        }
        for (o, w) in out.iter_mut().zip(&trace.weights[i * lt..(i + 1) * lt]) {
            *o += w;
        }
    }
    out.iter_mut().for_each(|v| *v /= pixels.len() as f64);
    Ok(out)
}

/// `token_index,word,mean_weight` for the given pixels.
pub fn word_attention_csv(trace: &AttentionTrace, tokens: &[usize], pixels: &[usize]) -> Result<String> {
    let w = word_attention(trace, pixels)?;
    let mut s = String::from("token_index,word,mean_weight\n");
    for (j, v) in w.iter().enumerate() {
        let word = tokens.get(j).and_then(|&t| VOCABULARY.get(t)).copied().unwrap_or("?");
        let _ = writeln!(s, "{j},{word},{v:.9}");
    }
    Ok(s)
}

/// Feature-grid cells whose image patch overlaps `mask`.
pub fn mask_to_grid(dims: &Dims, mask: &[bool]) -> Vec<usize> {
    let (iw, sy, sx) = (dims.image_width(), dims.image_height() / dims.h, dims.image_width() / dims.w);
    let mut cells = Vec::new();
    for gy in 0..dims.h {
        for gx in 0..dims.w {
            let hit = (0..sy).any(|dy| (0..sx).any(|dx| mask[(gy * sy + dy) * iw + gx * sx + dx]));
            if hit {
                cells.push(gy * dims.w + gx);
            }
        }
    }
    cells
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes one record file per sample (`image`, `tokens`, `target`) and a
/// manifest listing file name and expression.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.bin");
        save_records(
            &dir.join(&name),
            &[
                Record {
                    name: "image".into(),
                    frozen: true,
                    shape: s.image.shape().to_vec(),
                    data: s.image.to_vec(),
                },
                Record {
                    name: "tokens".into(),
                    frozen: true,
                    shape: vec![s.tokens.len()],
                    data: s.tokens.iter().map(|&t| t as f64).collect(),
                },
                Record {
                    name: "target".into(),
                    frozen: true,
                    shape: s.target_mask.shape().to_vec(),
                    data: s.target_mask.to_vec(),
                },
            ],
        )?;
        let _ = writeln!(manifest, "{name}\t{}", s.expression);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`export_dataset`]. Scene objects are not
/// stored, so imported samples carry none.
pub fn import_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (name, expression) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        let mut recs = load_records(&dir.join(name))?;
        let mut take = |key: &str| -> Result<Record> {
            let i = recs
                .iter()
                .position(|r| r.name == key)
                .ok_or_else(|| Error::Format(format!("{name} lacks {key}")))?;
            Ok(recs.swap_remove(i))
        };
        let image = take("image")?;
        let tokens = take("tokens")?;
        let target = take("target")?;
        let tokens: Vec<usize> = tokens
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < VOCABULARY.len() {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("{name}: bad token id {v}")))
                }
            })
            .collect::<Result<_>>()?;
        out.push(Sample {
            image: Tensor::new(&image.shape, image.data)?,
            tokens,
            target_mask: Tensor::new(&target.shape, target.data)?,
            expression: expression.to_string(),
            objects: Vec::new(),
            target: 0,
        });
    }
    Ok(out)
}
