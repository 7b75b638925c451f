//! Frame manifests: a structured text file of ordered frame records (image
//! path, face parameters, camera, role), with 8-bit RGB images in a sibling
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facemodel::{Camera, FaceParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Driving,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub params: FaceParams,
    pub camera: Camera,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if !self.frames.iter().any(|f| f.role == Role::Source) {
            return Err(Error::Manifest("at least one source frame required".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("parse: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn with_role(&self, role: Role) -> Vec<&FrameRecord> {
        self.frames.iter().filter(|f| f.role == role).collect()
    }

    /// Resolves an image path relative to the manifest's directory.
    pub fn image_path(manifest_path: &Path, record: &FrameRecord) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&record.image)
    }
}

/// Writes a [3, H, W] tensor in [0, 1] as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Image(format!("expected [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = t.at3(c, y, x).clamp(0.0, 1.0);
                buf[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Image(format!("{e}")))?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set3(c, y, x, px[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}
