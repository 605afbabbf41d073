//! JSONL corpora: one record per line, images referenced by relative path.
//!
//! ```text
//! {"image": "images/0.ppm", "caption": "a small red circle at the top left"}
//! {"image": "images/1.ppm", "turns": [{"instruction": "what color?", "answer": "red"}]}
//! ```
//!
//! An optional `"id"` names the sample; the image path is used otherwise.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::data::sample::{Content, Sample, Turn};
use crate::error::{Error, Result};
use crate::model::config::VisionEncoderConfig;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    turns: Option<Vec<Turn>>,
}

/// Reads `path`, resolving image paths against `image_root` (the file's
/// directory when `None`). Images must already be `cfg.image_size` square.
pub fn load_jsonl(path: &Path, image_root: Option<&Path>, cfg: &VisionEncoderConfig) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = match image_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut cache: HashMap<PathBuf, Arc<Image>> = HashMap::new();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Dataset {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let content = match (rec.caption, rec.turns) {
            (Some(c), None) => Content::Caption(c),
            (None, Some(t)) if !t.is_empty() => Content::Conversation(t),
            (None, Some(_)) => return Err(fail("\"turns\" is empty".into())),
            (Some(_), Some(_)) => return Err(fail("record has both \"caption\" and \"turns\"".into())),
            (None, None) => return Err(fail("record needs \"caption\" or \"turns\"".into())),
        };
        let image_path = root.join(&rec.image);
        let image = match cache.get(&image_path) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(Image::read(&image_path).map_err(|e| fail(e.to_string()))?);
                cache.insert(image_path, img.clone());
                img
            }
        };
        if image.height() != cfg.image_size || image.width() != cfg.image_size {
            return Err(fail(format!(
                "image {} is {}x{}, expected {}x{}",
                rec.image,
                image.height(),
                image.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        samples.push(Sample {
            id: rec.id.unwrap_or(rec.image),
            image,
            content,
        });
    }
    if samples.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            line: 0,
            msg: "no records".into(),
        });
    }
    Ok(samples)
}

/// Writes `samples` as `dir/data.jsonl` plus one PPM per sample under
/// `dir/images/`. Returns the JSONL path.
pub fn write_corpus(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join("data.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        s.image.write_ppm(&dir.join(&rel))?;
        let (caption, turns) = match &s.content {
            Content::Caption(c) => (Some(c.clone()), None),
            Content::Conversation(t) => (None, Some(t.clone())),
        };
        let rec = Record {
            id: Some(s.id.clone()),
            image: rel,
            caption,
            turns,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
