//! On-disk datasets (`manifest.json` + `images/` + `saliency/`) and
//! ingestion of CGL-style COCO annotations.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{BBox, Element, ElementClass, GrayRaster, Layout, PosterSample, RgbRaster};

pub const MANIFEST: &str = "manifest.json";

/// One manifest entry; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub saliency_path: String,
    #[serde(default)]
    pub slogans: Vec<String>,
    #[serde(default)]
    pub elements: Vec<Element>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Record {
            id: self.id.clone(),
            msg,
        };
        if self.id.is_empty() {
            return Err(invalid("sample id is empty"));
        }
        for p in [&self.image_path, &self.saliency_path] {
            if !is_contained(p) {
                return Err(bad(format!("path {p:?} leaves the dataset directory")));
            }
        }
        for e in &self.elements {
            if e.cls == ElementClass::Background {
                return Err(bad("background elements are not allowed".into()));
            }
            if !e.bbox.is_valid() {
                return Err(bad(format!("invalid box {:?}", e.bbox)));
            }
        }
        Ok(())
    }
}

/// Relative path made only of normal components.
fn is_contained(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

pub fn parse_manifest(json: &str) -> Result<Vec<SampleRecord>> {
    let records: Vec<SampleRecord> = serde_json::from_str(json)?;
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Record {
                id: r.id.clone(),
                msg: "duplicate id".into(),
            });
        }
    }
    Ok(records)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<SampleRecord>> {
    parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST))?)
}

pub fn load_sample(dir: &Path, record: &SampleRecord) -> Result<PosterSample> {
    let image = load_rgb(&dir.join(&record.image_path))?;
    let saliency = load_gray(&dir.join(&record.saliency_path))?;
    let sample = PosterSample {
        id: record.id.clone(),
        gt: Layout::new(image.width, image.height, record.elements.clone()),
        image,
        saliency,
        slogans: record.slogans.clone(),
    };
    sample.validate(usize::MAX)?;
    Ok(sample)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PosterSample>> {
    load_manifest(dir)?.iter().map(|r| load_sample(dir, r)).collect()
}

pub fn save_dataset(dir: &Path, samples: &[PosterSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("saliency"))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            image_path: format!("images/{}.png", s.id),
            saliency_path: format!("saliency/{}.png", s.id),
            slogans: s.slogans.clone(),
            elements: s.gt.elements.clone(),
        };
        rec.validate()?;
        save_rgb(&dir.join(&rec.image_path), &s.image)?;
        save_gray(&dir.join(&rec.saliency_path), &s.saliency)?;
        records.push(rec);
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<RgbRaster> {
    let img = image::open(path)?.into_rgb8();
    Ok(RgbRaster {
        width: img.width(),
        height: img.height(),
        data: img.into_raw(),
    })
}

pub fn save_rgb(path: &Path, r: &RgbRaster) -> Result<()> {
    let img = image::RgbImage::from_raw(r.width, r.height, r.data.clone())
        .ok_or_else(|| invalid("raster size does not match its data"))?;
    img.save(path)?;
    Ok(())
}

/// 8-bit grayscale image as values in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<GrayRaster> {
    let img = image::open(path)?.into_luma8();
    Ok(GrayRaster {
        width: img.width(),
        height: img.height(),
        data: img.as_raw().iter().map(|v| *v as f32 / 255.0).collect(),
    })
}

pub fn save_gray(path: &Path, r: &GrayRaster) -> Result<()> {
    let data = r.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(r.width, r.height, data)
        .ok_or_else(|| invalid("raster size does not match its data"))?;
    img.save(path)?;
    Ok(())
}

/// COCO-like annotation file. Boxes are pixel corners `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CglFile {
    pub images: Vec<CglImage>,
    #[serde(default)]
    pub annotations: Vec<CglAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CglImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub slogans: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CglAnnotation {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    /// Text content of a text element, when annotated.
    #[serde(default)]
    pub text: Option<String>,
}

/// Layout and slogans of one annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct CglRecord {
    pub id: String,
    pub file_name: String,
    pub slogans: Vec<String>,
    pub layout: Layout,
}

pub fn category_class(id: u32) -> Option<ElementClass> {
    match id {
        1 => Some(ElementClass::Logo),
        2 => Some(ElementClass::Text),
        3 => Some(ElementClass::Underlay),
        4 => Some(ElementClass::Embellishment),
        _ => None,
    }
}

pub fn parse_cgl(json: &str) -> Result<CglFile> {
    Ok(serde_json::from_str(json)?)
}

/// Converts annotations to normalized layouts. Images with an invalid
/// annotation are reported as record-level errors and left out.
pub fn cgl_records(file: &CglFile) -> (Vec<CglRecord>, Vec<Error>) {
    let mut by_image: BTreeMap<u64, Vec<&CglAnnotation>> = BTreeMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for img in &file.images {
        let id = Path::new(&img.file_name)
            .file_stem()
            .map_or_else(|| img.id.to_string(), |s| s.to_string_lossy().into_owned());
        match cgl_record(img, by_image.get(&img.id).map_or(&[][..], Vec::as_slice), &id) {
            Ok(r) => records.push(r),
            Err(msg) => errors.push(Error::Record { id, msg }),
        }
    }
    (records, errors)
}

fn cgl_record(img: &CglImage, anns: &[&CglAnnotation], id: &str) -> std::result::Result<CglRecord, String> {
    if img.width == 0 || img.height == 0 {
        return Err(format!("canvas {}×{} is empty", img.width, img.height));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let mut elements = Vec::with_capacity(anns.len());
    let mut texts = Vec::new();
    for a in anns {
        let cls = category_class(a.category_id).ok_or_else(|| format!("unknown category id {}", a.category_id))?;
        let [x1, y1, x2, y2] = a.bbox;
        if !a.bbox.iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(format!("degenerate box {:?}", a.bbox));
        }
        let b = BBox::from_corners(x1 / w, y1 / h, x2 / w, y2 / h);
        elements.push(Element::new(cls, if b.is_valid() { b } else { b.clamp() }));
        if let (ElementClass::Text, Some(t)) = (cls, &a.text) {
            texts.push(t.clone());
        }
    }
    let slogans = if img.slogans.is_empty() { texts } else { img.slogans.clone() };
    Ok(CglRecord {
        id: id.to_string(),
        file_name: img.file_name.clone(),
        slogans,
        layout: Layout::new(img.width, img.height, elements),
    })
}

#[derive(Debug, Default)]
pub struct CglIngest {
    pub samples: Vec<PosterSample>,
    pub errors: Vec<Error>,
    /// Images listed in the annotations but absent from the image root.
    pub missing_images: usize,
}

/// Reads annotations and pairs them with `<root>/<file_name>` and the
/// saliency companion `<root>/<stem>_sal.png`.
pub fn ingest_cgl(annotation: &Path, image_root: &Path) -> Result<CglIngest> {
    let file = parse_cgl(&std::fs::read_to_string(annotation)?)?;
    let (records, errors) = cgl_records(&file);
    let mut out = CglIngest {
        errors,
        ..CglIngest::default()
    };
    for r in records {
        let img_path = image_root.join(&r.file_name);
        if !is_contained(&r.file_name) || !img_path.is_file() {
            log::warn!("skipping {}: image {} not found", r.id, img_path.display());
            out.missing_images += 1;
            continue;
        }
        let sal_path: PathBuf = image_root.join(format!("{}_sal.png", r.id));
        let loaded = load_rgb(&img_path).and_then(|image| {
            let saliency = load_gray(&sal_path)?;
            let sample = PosterSample {
                id: r.id.clone(),
                image,
                saliency,
                slogans: r.slogans.clone(),
                gt: r.layout.clone(),
            };
            sample.validate(usize::MAX)?;
            Ok(sample)
        });
        match loaded {
            Ok(s) => out.samples.push(s),
            Err(e) => out.errors.push(Error::Record {
                id: r.id,
                msg: e.to_string(),
            }),
        }
    }
    Ok(out)
}
