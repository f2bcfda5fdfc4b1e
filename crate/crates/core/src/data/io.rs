use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelGrid};

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile { path: path.to_path_buf(), reason: reason.to_string() }
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>, Option<Vec<u8>>)> {
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| unreadable(path, e))?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| unreadable(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf, palette))
}

/// 8-bit RGB image (RGBA drops alpha, grey is replicated, indexed is expanded).
pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (info, buf, palette) = decode(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    match info.color_type {
        png::ColorType::Rgb => rgb = buf,
        png::ColorType::Rgba => buf.chunks(4).for_each(|p| rgb.extend_from_slice(&p[..3])),
        png::ColorType::Grayscale => buf.iter().for_each(|&v| rgb.extend_from_slice(&[v, v, v])),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).for_each(|p| rgb.extend_from_slice(&[p[0]; 3])),
        png::ColorType::Indexed => {
            let pal = palette.ok_or_else(|| unreadable(path, "indexed image without palette"))?;
            if info.bit_depth != png::BitDepth::Eight {
                return Err(unreadable(path, "only 8-bit indexed images are supported"));
            }
            for &i in &buf {
                let o = i as usize * 3;
                rgb.extend_from_slice(pal.get(o..o + 3).ok_or_else(|| unreadable(path, "palette index"))?);
            }
        }
    }
    Ok(RgbImage::from_rgb8(w, h, &rgb))
}

/// Label ids from a palette-indexed or single-channel 8-bit PNG; indices pass through.
pub fn read_label_png(path: &Path) -> Result<LabelGrid> {
    let (info, buf, _) = decode(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => LabelGrid::from_vec(w, h, buf),
        (ct, bd) => Err(unreadable(path, format!("label must be 8-bit indexed or grey, got {ct:?}/{bd:?}"))),
    }
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| unreadable(path, e))?;
    writer.write_image_data(&img.to_rgb8()).map_err(|e| unreadable(path, e))?;
    Ok(())
}

/// Palette-indexed PNG: pixel values are label ids, colours come from `palette`.
pub fn write_indexed_png(path: &Path, grid: &LabelGrid, palette: &[[u8; 3]]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, grid.width as u32, grid.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let mut pal: Vec<u8> = palette.iter().flatten().copied().collect();
    let used = grid.data.iter().copied().max().unwrap_or(0) as usize + 1;
    while pal.len() < used.max(palette.len()) * 3 {
        pal.extend_from_slice(&[255, 255, 255]);
    }
    enc.set_palette(pal);
    let mut writer = enc.write_header().map_err(|e| unreadable(path, e))?;
    writer.write_image_data(&grid.data).map_err(|e| unreadable(path, e))?;
    Ok(())
}

pub fn load_sample(image_path: &Path, label_path: &Path) -> Result<Sample> {
    let image = read_rgb_png(image_path)?;
    let labels = read_label_png(label_path)?;
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(image, labels, id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: u8,
    pub name: String,
}

/// Sidecar describing the label ids of a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<String>,
    #[serde(rename = "class")]
    pub classes: Vec<ManifestClass>,
}

impl Manifest {
    pub fn from_hierarchy(graph: &Hierarchy, hierarchy_file: Option<&str>) -> Self {
        let mut classes: Vec<ManifestClass> = graph
            .level(1)
            .iter()
            .flat_map(|&leaf| {
                let n = graph.node(leaf);
                n.class_ids.iter().map(move |&id| ManifestClass { id, name: n.name.clone() })
            })
            .collect();
        classes.sort_by_key(|c| c.id);
        classes.insert(0, ManifestClass { id: 0, name: "background".into() });
        Self { hierarchy: hierarchy_file.map(Into::into), classes }
    }
}

/// Write samples in the dataset directory layout.
pub fn write_dataset(root: &Path, samples: &[Sample], graph: &Hierarchy) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("labels"))?;
    let mut palette = vec![[0u8; 3]; graph.num_classes() + 1];
    for &leaf in graph.level(1) {
        let n = graph.node(leaf);
        for &c in &n.class_ids {
            palette[c as usize] = Hierarchy::node_color(&n.name);
        }
    }
    let mut list = String::new();
    for s in samples {
        write_rgb_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_indexed_png(&root.join("labels").join(format!("{}.png", s.id)), &s.leaf_labels, &palette)?;
        list.push_str(&s.id);
        list.push('\n');
    }
    fs::write(root.join("list.txt"), list)?;
    fs::write(root.join("hierarchy.toml"), graph.spec().to_toml())?;
    let manifest = Manifest::from_hierarchy(graph, Some("hierarchy.toml"));
    fs::write(root.join("manifest.toml"), toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(())
}

/// Read every sample listed in `<root>/list.txt`.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let list_path = root.join("list.txt");
    let list = fs::read_to_string(&list_path).map_err(|e| unreadable(&list_path, e))?;
    let ids: Vec<&str> = list.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if ids.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    ids.iter()
        .map(|id| {
            let img: PathBuf = root.join("images").join(format!("{id}.png"));
            let lab: PathBuf = root.join("labels").join(format!("{id}.png"));
            load_sample(&img, &lab).map(|mut s| {
                s.id = (*id).to_string();
                s
            })
        })
        .collect()
}

/// Hierarchy referenced by a dataset manifest, if any.
pub fn dataset_hierarchy(root: &Path) -> Result<Option<Hierarchy>> {
    let path = root.join("manifest.toml");
    let Ok(text) = fs::read_to_string(&path) else { return Ok(None) };
    let manifest: Manifest = toml::from_str(&text).map_err(|e| unreadable(&path, e))?;
    match manifest.hierarchy {
        Some(file) => {
            let spec = crate::hierarchy::HierarchySpec::load(&root.join(file))?;
            Hierarchy::build(spec).map(Some)
        }
        None => Ok(None),
    }
}
