//! Deterministic generator of desk-scale scenes: part-composed things drawn
//! over a horizon-split stuff background with painter's-algorithm occlusion.
//!
//! Every sample is a pure function of `(config, index)`, so datasets can be
//! regenerated bit-identically and workers may fan out across indices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{quantize, write_image, PanopticPartMap, SceneSample};
use crate::taxonomy::{Taxonomy, VOID};

/// Axis-aligned primitive in bbox-relative coordinates (all in `[0,1]`;
/// disc radius is relative to the shorter bbox side).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rect { cx: f64, cy: f64, w: f64, h: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

/// One labeled primitive of a thing template. `part = 0` paints the thing
/// without a part label (only valid for part-less scene classes).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TemplatePart {
    pub part: u16,
    pub shape: Shape,
}

/// A parametric thing: the instance is the union of its primitives.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThingTemplate {
    pub scene_class: u16,
    pub parts: Vec<TemplatePart>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StuffLayout {
    pub upper: u16,
    pub lower: u16,
    pub horizon_range: [f64; 2],
}

impl Default for StuffLayout {
    fn default() -> Self {
        StuffLayout {
            upper: 4,
            lower: 3,
            horizon_range: [0.3, 0.55],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Appearance {
    /// Base RGB per scene class id (string keys for the config format).
    pub class_colors: BTreeMap<String, [f64; 3]>,
    /// Base RGB per part id; falls back to the class color.
    pub part_colors: BTreeMap<String, [f64; 3]>,
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
    /// Per-instance brightness jitter amplitude.
    pub instance_jitter: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        let mut class_colors = BTreeMap::new();
        class_colors.insert("1".into(), [0.75, 0.15, 0.15]); // vehicle
        class_colors.insert("2".into(), [0.20, 0.30, 0.80]); // person
        class_colors.insert("3".into(), [0.25, 0.55, 0.20]); // ground
        class_colors.insert("4".into(), [0.55, 0.75, 0.95]); // sky
        let mut part_colors = BTreeMap::new();
        part_colors.insert("10".into(), [0.85, 0.25, 0.15]); // body
        part_colors.insert("11".into(), [0.10, 0.10, 0.12]); // wheel
        part_colors.insert("12".into(), [0.90, 0.70, 0.55]); // head
        part_colors.insert("13".into(), [0.25, 0.35, 0.85]); // torso
        part_colors.insert("14".into(), [0.10, 0.12, 0.40]); // legs
        Appearance {
            class_colors,
            part_colors,
            noise: 0.04,
            instance_jitter: 0.06,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Canvas `[H, W]`.
    pub canvas: [usize; 2],
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance bbox side range in pixels.
    pub scale_range: [f64; 2],
    pub templates: Vec<ThingTemplate>,
    pub stuff_layout: StuffLayout,
    pub appearance: Appearance,
    /// When false, instance bboxes are rejection-sampled to avoid overlap.
    pub occlusion: bool,
    /// Width of the void frame around the canvas.
    pub void_border: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            canvas: [64, 64],
            min_instances: 1,
            max_instances: 4,
            scale_range: [18.0, 34.0],
            templates: default_templates(),
            stuff_layout: StuffLayout::default(),
            appearance: Appearance::default(),
            occlusion: true,
            void_border: 0,
        }
    }
}

/// Vehicle (body rectangle over two wheel discs) and person (head disc,
/// torso rectangle, legs rectangle) for the desk taxonomy.
pub fn default_templates() -> Vec<ThingTemplate> {
    vec![
        ThingTemplate {
            scene_class: 1,
            parts: vec![
                TemplatePart {
                    part: 10,
                    shape: Shape::Rect {
                        cx: 0.5,
                        cy: 0.38,
                        w: 0.96,
                        h: 0.62,
                    },
                },
                TemplatePart {
                    part: 11,
                    shape: Shape::Disc {
                        cx: 0.26,
                        cy: 0.8,
                        r: 0.17,
                    },
                },
                TemplatePart {
                    part: 11,
                    shape: Shape::Disc {
                        cx: 0.74,
                        cy: 0.8,
                        r: 0.17,
                    },
                },
            ],
        },
        ThingTemplate {
            scene_class: 2,
            parts: vec![
                TemplatePart {
                    part: 12,
                    shape: Shape::Disc {
                        cx: 0.5,
                        cy: 0.14,
                        r: 0.14,
                    },
                },
                TemplatePart {
                    part: 13,
                    shape: Shape::Rect {
                        cx: 0.5,
                        cy: 0.47,
                        w: 0.62,
                        h: 0.42,
                    },
                },
                TemplatePart {
                    part: 14,
                    shape: Shape::Rect {
                        cx: 0.5,
                        cy: 0.85,
                        w: 0.46,
                        h: 0.3,
                    },
                },
            ],
        },
    ]
}

/// Checks a generator config against the taxonomy.
pub fn validate_generator(cfg: &GeneratorConfig, tax: &Taxonomy) -> Result<()> {
    let [h, w] = cfg.canvas;
    if h == 0 || w == 0 {
        return Err(Error::Config("generator canvas has a zero dimension".into()));
    }
    if cfg.scale_range[0] <= 0.0 || cfg.scale_range[1] < cfg.scale_range[0] {
        return Err(Error::Config("generator scale_range must be positive and ordered".into()));
    }
    if cfg.templates.is_empty() && cfg.max_instances > 0 {
        return Err(Error::Config("generator has instances but no templates".into()));
    }
    for t in &cfg.templates {
        if !tax.is_thing(t.scene_class) {
            return Err(Error::Config(format!(
                "template scene class {} is not a thing class",
                t.scene_class
            )));
        }
        let with_parts = tax.has_parts(t.scene_class);
        for p in &t.parts {
            if p.part == VOID {
                if with_parts {
                    return Err(Error::Config(format!(
                        "template for class {} leaves pixels without a part label",
                        t.scene_class
                    )));
                }
            } else if !tax.part_allowed(t.scene_class, p.part) {
                return Err(Error::Config(format!(
                    "template references part {} not allowed for class {}",
                    p.part, t.scene_class
                )));
            }
        }
    }
    for layout_class in [cfg.stuff_layout.upper, cfg.stuff_layout.lower] {
        if !tax.is_stuff(layout_class) {
            return Err(Error::Config(format!(
                "stuff layout references non-stuff class {layout_class}"
            )));
        }
    }
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)))
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

struct Palette {
    class: BTreeMap<u16, [f64; 3]>,
    part: BTreeMap<u16, [f64; 3]>,
}

fn build_palette(app: &Appearance) -> Result<Palette> {
    let parse = |m: &BTreeMap<String, [f64; 3]>| -> Result<BTreeMap<u16, [f64; 3]>> {
        m.iter()
            .map(|(k, v)| {
                k.parse::<u16>()
                    .map(|id| (id, *v))
                    .map_err(|_| Error::Config(format!("bad color key {k:?}")))
            })
            .collect()
    };
    Ok(Palette {
        class: parse(&app.class_colors)?,
        part: parse(&app.part_colors)?,
    })
}

impl Palette {
    fn color(&self, scene: u16, part: u16) -> [f64; 3] {
        if part != VOID {
            if let Some(c) = self.part.get(&part) {
                return *c;
            }
        }
        self.class.get(&scene).copied().unwrap_or([0.5, 0.5, 0.5])
    }
}

/// Generates sample `index`. The annotation satisfies every raster invariant
/// and the output is byte-identical across calls with the same arguments.
pub fn generate_scene(cfg: &GeneratorConfig, tax: &Taxonomy, index: usize) -> Result<SceneSample> {
    validate_generator(cfg, tax)?;
    let palette = build_palette(&cfg.appearance)?;
    let [h, w] = cfg.canvas;
    let mut rng = sample_rng(cfg.seed, index);

    let mut map = PanopticPartMap::void(h, w);
    let mut color = Array3::<f64>::zeros((3, h, w));

    // stuff background split at a sampled horizon row
    let lo = cfg.stuff_layout.horizon_range[0].min(cfg.stuff_layout.horizon_range[1]);
    let hi = cfg.stuff_layout.horizon_range[0].max(cfg.stuff_layout.horizon_range[1]);
    let horizon = ((h as f64) * rng.gen_range(lo..=hi)).round() as usize;
    for y in 0..h {
        let class = if y < horizon {
            cfg.stuff_layout.upper
        } else {
            cfg.stuff_layout.lower
        };
        let base = palette.color(class, VOID);
        for x in 0..w {
            map.scene[[y, x]] = class;
            for c in 0..3 {
                color[[c, y, x]] = base[c];
            }
        }
    }

    // things, painter's algorithm: later instances occlude earlier ones
    let n = if cfg.max_instances == 0 {
        0
    } else {
        let lo = cfg.min_instances.min(cfg.max_instances);
        rng.gen_range(lo..=cfg.max_instances)
    };
    let margin = cfg.void_border;
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut next_id: u16 = 1;
    for _ in 0..n {
        let tpl = &cfg.templates[rng.gen_range(0..cfg.templates.len())];
        let avail_h = (h.saturating_sub(2 * margin)) as f64;
        let avail_w = (w.saturating_sub(2 * margin)) as f64;
        let mut bw = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        let mut bh = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        bw = bw.min(avail_w);
        bh = bh.min(avail_h);
        if bw < 2.0 || bh < 2.0 {
            continue;
        }
        let mut bbox = None;
        for _attempt in 0..20 {
            let y0 = margin as f64 + rng.gen_range(0.0..=(avail_h - bh));
            let x0 = margin as f64 + rng.gen_range(0.0..=(avail_w - bw));
            let cand = (y0, x0, bh, bw);
            let overlaps = placed.iter().any(|&(py, px, ph, pw)| {
                cand.0 < py + ph && py < cand.0 + cand.2 && cand.1 < px + pw && px < cand.1 + cand.3
            });
            if cfg.occlusion || !overlaps {
                bbox = Some(cand);
                break;
            }
        }
        let Some((y0, x0, bh, bw)) = bbox else { continue };
        placed.push((y0, x0, bh, bw));
        let jitter = rng.gen_range(-cfg.appearance.instance_jitter..=cfg.appearance.instance_jitter);
        let inst = next_id;
        next_id += 1;
        for tp in &tpl.parts {
            let base = palette.color(tpl.scene_class, tp.part);
            paint_shape(
                &mut map,
                &mut color,
                &tp.shape,
                (y0, x0, bh, bw),
                tpl.scene_class,
                inst,
                tp.part,
                [
                    (base[0] + jitter).clamp(0.0, 1.0),
                    (base[1] + jitter).clamp(0.0, 1.0),
                    (base[2] + jitter).clamp(0.0, 1.0),
                ],
            );
        }
    }

    // void frame
    for y in 0..h {
        for x in 0..w {
            if y < margin || x < margin || y >= h - margin || x >= w - margin {
                map.scene[[y, x]] = VOID;
                map.instance[[y, x]] = 0;
                map.part[[y, x]] = VOID;
            }
        }
    }

    // pixel noise, then quantize exactly as the image container stores it
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = color[[c, y, x]] + rng.gen_range(-cfg.appearance.noise..=cfg.appearance.noise);
                color[[c, y, x]] = quantize(v);
            }
        }
    }

    SceneSample::new(sample_id(index), color, map)
}

#[allow(clippy::too_many_arguments)]
fn paint_shape(
    map: &mut PanopticPartMap,
    color: &mut Array3<f64>,
    shape: &Shape,
    bbox: (f64, f64, f64, f64),
    scene: u16,
    inst: u16,
    part: u16,
    rgb: [f64; 3],
) {
    let (y0, x0, bh, bw) = bbox;
    let (h, w) = map.dims();
    let inside = |py: f64, px: f64| -> bool {
        match *shape {
            Shape::Rect { cx, cy, w: rw, h: rh } => {
                let ccx = x0 + cx * bw;
                let ccy = y0 + cy * bh;
                (px - ccx).abs() <= rw * bw / 2.0 && (py - ccy).abs() <= rh * bh / 2.0
            }
            Shape::Disc { cx, cy, r } => {
                let ccx = x0 + cx * bw;
                let ccy = y0 + cy * bh;
                let rr = r * bw.min(bh);
                let dx = px - ccx;
                let dy = py - ccy;
                dx * dx + dy * dy <= rr * rr
            }
        }
    };
    let ys = (y0.floor().max(0.0)) as usize;
    let ye = ((y0 + bh).ceil() as usize).min(h);
    let xs = (x0.floor().max(0.0)) as usize;
    let xe = ((x0 + bw).ceil() as usize).min(w);
    for y in ys..ye {
        for x in xs..xe {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                map.scene[[y, x]] = scene;
                map.instance[[y, x]] = inst;
                map.part[[y, x]] = part;
                for c in 0..3 {
                    color[[c, y, x]] = rgb[c];
                }
            }
        }
    }
}

// ---- manifests ----

const MANIFEST_HEADER: &str = "# pps-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "{MANIFEST_HEADER}");
        for r in &self.records {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}",
                r.id,
                r.image.display(),
                r.annotation.display(),
                r.split
            );
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "bad manifest header {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("bad manifest record {line:?}")));
            }
            records.push(ManifestRecord {
                id: cols[0].to_string(),
                image: PathBuf::from(cols[1]),
                annotation: PathBuf::from(cols[2]),
                split: cols[3].to_string(),
            });
        }
        Ok(Manifest { records })
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.split == name)
    }
}

/// Writes `n` samples (indices `0..n`, split tag `train`) plus a manifest.
pub fn generate_manifest(
    cfg: &GeneratorConfig,
    tax: &Taxonomy,
    n: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    generate_dataset(cfg, tax, &[("train", n)], out_dir)
}

/// Writes consecutive index ranges for each `(split, count)` pair and one
/// manifest covering all of them. Rerunning reproduces identical files.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    tax: &Taxonomy,
    splits: &[(&str, usize)],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("imgs");
    let ann_dir = out_dir.join("anns");
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&ann_dir)?;
    let mut manifest = Manifest::default();
    let mut index = 0usize;
    for (split, count) in splits {
        for _ in 0..*count {
            let sample = generate_scene(cfg, tax, index)?;
            let image = PathBuf::from("imgs").join(format!("{}.img", sample.id));
            let annotation = PathBuf::from("anns").join(format!("{}.ann", sample.id));
            write_image(&sample.image, out_dir.join(&image))?;
            sample.annotation.write(out_dir.join(&annotation))?;
            manifest.records.push(ManifestRecord {
                id: sample.id.clone(),
                image,
                annotation,
                split: split.to_string(),
            });
            index += 1;
        }
    }
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Loads the samples of one split back into memory.
pub fn load_split(out_dir: impl AsRef<Path>, manifest: &Manifest, split: &str) -> Result<Vec<SceneSample>> {
    let out_dir = out_dir.as_ref();
    manifest
        .split(split)
        .map(|r| {
            let image = crate::raster::read_image(out_dir.join(&r.image))?;
            let annotation = PanopticPartMap::read(out_dir.join(&r.annotation))?;
            SceneSample::new(r.id.clone(), image, annotation)
        })
        .collect()
}
