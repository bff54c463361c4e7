//! On-disk dataset layout.
//!
//! ```text
//! <root>/<task>/<split>/<video_id>.txt         annotations, one line per frame
//! <root>/images/<video_id>.npy                 f32 array (frames, H, W, 3), or
//! <root>/images/<video_id>/<00000>.jpg         one image per frame
//! ```
//!
//! Frames whose image is missing are skipped with a warning.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{s, Array4, Ix4};

use super::parse::{
    parse_au_file, parse_expr_file, parse_va_file, write_au_file, write_expr_file, write_va_file,
};
use super::{npy, DatasetSplit, Provenance, SplitName};
use crate::error::{Error, Result};
use crate::types::{AuLabels, ExpressionLabel, FrameRecord, Image, Task, VaLabel, VideoSequence, N_AUS};

pub fn annotation_dir(root: &Path, task: Task, split: SplitName) -> PathBuf {
    root.join(task.as_str()).join(split.as_str())
}

pub fn container_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("images").join(format!("{video_id}.npy"))
}

pub fn frame_image_path(root: &Path, video_id: &str, frame_index: usize) -> PathBuf {
    root.join("images").join(video_id).join(format!("{frame_index:05}.jpg"))
}

enum Labels {
    Va(Vec<(usize, VaLabel)>),
    Expr(Vec<(usize, ExpressionLabel)>),
    Au(Vec<(usize, AuLabels)>),
}

impl Labels {
    fn len(&self) -> usize {
        match self {
            Labels::Va(v) => v.len(),
            Labels::Expr(v) => v.len(),
            Labels::Au(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, rec: &mut FrameRecord) {
        match self {
            Labels::Va(v) => rec.va = Some(v[i].1),
            Labels::Expr(v) => rec.expr = Some(v[i].1),
            Labels::Au(v) => rec.aus = Some(v[i].1),
        }
    }
}

struct ImageSource {
    container: Option<Array4<f32>>,
    root: PathBuf,
    video_id: String,
    size: usize,
}

impl ImageSource {
    fn open(root: &Path, video_id: &str, size: usize) -> Result<Self> {
        let path = container_path(root, video_id);
        let container = if path.exists() {
            let arr = npy::read_f32(&path)?
                .into_dimensionality::<Ix4>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let (_, h, w, c) = arr.dim();
            if (h, w, c) != (size, size, 3) {
                return Err(Error::Data(format!(
                    "{}: frames are {h}x{w}x{c}, config expects {size}x{size}x3",
                    path.display()
                )));
            }
            Some(arr)
        } else {
            None
        };
        Ok(Self {
            container,
            root: root.to_path_buf(),
            video_id: video_id.to_string(),
            size,
        })
    }

    fn get(&self, frame_index: usize) -> Result<Option<Image>> {
        if let Some(arr) = &self.container {
            if frame_index >= arr.dim().0 {
                return Ok(None);
            }
            return Ok(Some(arr.slice(s![frame_index, .., .., ..]).to_owned()));
        }
        let path = frame_image_path(&self.root, &self.video_id, frame_index);
        if !path.exists() {
            return Ok(None);
        }
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let size = self.size as u32;
        let img = if img.dimensions() == (size, size) {
            img
        } else {
            image::imageops::resize(&img, size, size, FilterType::Triangle)
        };
        Ok(Some(Image::from_shape_fn((self.size, self.size, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })))
    }
}

/// Loads every annotation file of `task`/`split` under `root`, pairing frames
/// with their images. Labels are returned unfiltered.
pub fn load_split(root: &Path, task: Task, split: SplitName, image_size: usize) -> Result<DatasetSplit> {
    let dir = annotation_dir(root, task, split);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut sequences = Vec::with_capacity(files.len());
    for path in files {
        let video_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?
            .to_string();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = match task {
            Task::Va => Labels::Va(parse_va_file(&text, &video_id)?),
            Task::Expr => Labels::Expr(parse_expr_file(&text, &video_id)?),
            Task::Au => Labels::Au(parse_au_file(&text, &video_id)?),
        };
        let images = ImageSource::open(root, &video_id, image_size)?;
        let mut frames = Vec::with_capacity(labels.len());
        let mut missing = 0usize;
        for i in 0..labels.len() {
            let Some(image) = images.get(i)? else {
                missing += 1;
                continue;
            };
            let mut rec = FrameRecord {
                video_id: video_id.clone(),
                frame_index: i,
                image,
                va: None,
                expr: None,
                aus: None,
            };
            labels.apply(i, &mut rec);
            frames.push(rec);
        }
        if missing > 0 {
            log::warn!("{video_id}: {missing} annotated frames have no image");
        }
        sequences.push(VideoSequence::new(video_id, frames)?);
    }
    DatasetSplit::new(split, sequences, Provenance::Disk)
}

/// Writes a split in the layout read by [`load_split`]. Gaps in frame indices
/// are filled with invalid labels and black frames.
pub fn write_split(root: &Path, task: Task, split: &DatasetSplit) -> Result<()> {
    let dir = annotation_dir(root, task, split.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for seq in &split.sequences {
        let Some(last) = seq.frames.last() else { continue };
        let n = last.frame_index + 1;
        let (h, w, c) = seq.frames[0].image.dim();
        let mut container = Array4::<f32>::zeros((n, h, w, c));
        let mut va = vec![VaLabel::sentinel(); n];
        let mut expr = vec![ExpressionLabel::INVALID; n];
        let mut aus = vec![AuLabels::new([-1; N_AUS]).expect("valid"); n];
        for f in &seq.frames {
            container.slice_mut(s![f.frame_index, .., .., ..]).assign(&f.image);
            let i = f.frame_index;
            match task {
                Task::Va => va[i] = f.va.ok_or_else(|| missing_label(f, task))?,
                Task::Expr => expr[i] = f.expr.ok_or_else(|| missing_label(f, task))?,
                Task::Au => aus[i] = f.aus.ok_or_else(|| missing_label(f, task))?,
            }
        }
        let text = match task {
            Task::Va => write_va_file(&va),
            Task::Expr => write_expr_file(&expr),
            Task::Au => write_au_file(&aus),
        };
        let path = dir.join(format!("{}.txt", seq.video_id));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = container_path(root, &seq.video_id);
        npy::write_f32(&path, &container.into_dyn())?;
    }
    Ok(())
}

fn missing_label(f: &FrameRecord, task: Task) -> Error {
    Error::Data(format!(
        "{}#{} has no {task} label",
        f.video_id, f.frame_index
    ))
}
