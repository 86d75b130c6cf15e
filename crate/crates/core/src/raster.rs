//! Per-pixel (scene class, instance id, part class) rasters and their
//! versioned binary container, plus the 8-bit image container.
//!
//! Raster container: magic `PPRAS`, version byte, H and W as u32 LE, then
//! three row-major planes of u16 LE ids (scene, instance, part).
//! Image container: magic `PPIMG`, version byte, H and W as u32 LE, then
//! three row-major planes of u8 (R, G, B).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::taxonomy::{Taxonomy, VOID};

const RASTER_MAGIC: &[u8; 5] = b"PPRAS";
const IMAGE_MAGIC: &[u8; 5] = b"PPIMG";
const CONTAINER_VERSION: u8 = 1;

/// The model's final output format and the ground-truth format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticPartMap {
    pub scene: Array2<u16>,
    pub instance: Array2<u16>,
    pub part: Array2<u16>,
}

impl PanopticPartMap {
    pub fn new(scene: Array2<u16>, instance: Array2<u16>, part: Array2<u16>) -> Result<Self> {
        if scene.dim() != instance.dim() || scene.dim() != part.dim() {
            return Err(Error::Shape(format!(
                "raster planes disagree: scene {:?}, instance {:?}, part {:?}",
                scene.dim(),
                instance.dim(),
                part.dim()
            )));
        }
        Ok(PanopticPartMap {
            scene,
            instance,
            part,
        })
    }

    pub fn void(h: usize, w: usize) -> Self {
        PanopticPartMap {
            scene: Array2::from_elem((h, w), VOID),
            instance: Array2::zeros((h, w)),
            part: Array2::from_elem((h, w), VOID),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.scene.dim()
    }

    pub fn height(&self) -> usize {
        self.scene.nrows()
    }

    pub fn width(&self) -> usize {
        self.scene.ncols()
    }

    /// Checks the structural invariants against a taxonomy. `strict_parts`
    /// additionally requires every non-void part label to be compatible with
    /// its scene class (always true for ground truth and merged predictions).
    pub fn validate(&self, tax: &Taxonomy, strict_parts: bool) -> Result<()> {
        let (h, w) = self.dims();
        for y in 0..h {
            for x in 0..w {
                let s = self.scene[[y, x]];
                let inst = self.instance[[y, x]];
                let p = self.part[[y, x]];
                if s != VOID && !tax.is_scene_class(s) {
                    return Err(Error::Format(format!("unknown scene class {s} at ({y},{x})")));
                }
                if inst > 0 && !tax.is_thing(s) {
                    return Err(Error::Format(format!(
                        "instance id {inst} on non-thing class {s} at ({y},{x})"
                    )));
                }
                if strict_parts && p != VOID && !tax.part_allowed(s, p) {
                    return Err(Error::Format(format!(
                        "part {p} not allowed for scene class {s} at ({y},{x})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (h, wd) = self.dims();
        w.write_all(RASTER_MAGIC)?;
        w.write_all(&[CONTAINER_VERSION])?;
        w.write_all(&(h as u32).to_le_bytes())?;
        w.write_all(&(wd as u32).to_le_bytes())?;
        for plane in [&self.scene, &self.instance, &self.part] {
            let mut buf = Vec::with_capacity(h * wd * 2);
            for v in plane.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let (h, w) = read_header(&mut r, RASTER_MAGIC, "raster")?;
        let mut planes = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut buf = vec![0u8; h * w * 2];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated raster payload".into()))?;
            let vals: Vec<u16> = buf
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            planes.push(Array2::from_shape_vec((h, w), vals).unwrap());
        }
        let part = planes.pop().unwrap();
        let instance = planes.pop().unwrap();
        let scene = planes.pop().unwrap();
        PanopticPartMap::new(scene, instance, part)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_header(r: &mut impl Read, magic: &[u8; 5], kind: &str) -> Result<(usize, usize)> {
    let mut head = [0u8; 14];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("truncated {kind} header")))?;
    if &head[0..5] != magic {
        return Err(Error::Format(format!("bad magic bytes for {kind} container")));
    }
    if head[5] != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "unsupported {kind} container version {}",
            head[5]
        )));
    }
    let h = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err(Error::Format(format!("{kind} container with zero dimension")));
    }
    Ok((h, w))
}

/// One generated scene: an RGB image in `[0,1]` (shape `[3,H,W]`, values
/// quantized to `k/255`) and its annotation.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: String,
    pub image: Array3<f64>,
    pub annotation: PanopticPartMap,
}

impl SceneSample {
    pub fn new(id: String, image: Array3<f64>, annotation: PanopticPartMap) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 || (h, w) != annotation.dims() {
            return Err(Error::Shape(format!(
                "image [{c},{h},{w}] does not match annotation {:?}",
                annotation.dims()
            )));
        }
        Ok(SceneSample {
            id,
            image,
            annotation,
        })
    }
}

/// Writes an RGB image (values in `[0,1]`) as three 8-bit planes.
pub fn write_image(image: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
    }
    let f = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(f);
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&[CONTAINER_VERSION])?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(3 * h * w);
    for v in image.iter() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads an image container back to `[3,H,W]` floats in `[0,1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let f = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(f);
    let (h, w) = read_header(&mut r, IMAGE_MAGIC, "image")?;
    let mut buf = vec![0u8; 3 * h * w];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated image payload".into()))?;
    let vals: Vec<f64> = buf.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((3, h, w), vals).unwrap())
}

/// Quantizes a color value the same way the image container stores it.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
