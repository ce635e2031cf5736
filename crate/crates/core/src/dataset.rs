//! Multi-view scenes: NeRF-Blender loading/saving, LR derivation and pyramids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image::{downsample_bicubic, Image, Pyramid};

/// Pyramid depth used when a caller does not ask for a specific one.
pub const DEFAULT_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub pose: CameraPose,
    pub lr: Image,
    pub hr: Option<Image>,
    pub scale: usize,
    /// Stem used for the PNG on disk, relative to the scene root (e.g. `train/r_0`).
    pub name: String,
}

impl ViewRecord {
    /// LR is derived from the HR image by bicubic downsampling.
    pub fn from_hr(pose: CameraPose, hr: Image, scale: usize, name: impl Into<String>) -> Result<Self> {
        if hr.width() % scale != 0 || hr.height() % scale != 0 {
            return Err(Error::Dimension(format!(
                "HR image {}x{} is not divisible by scale {scale}",
                hr.width(),
                hr.height()
            )));
        }
        let lr = downsample_bicubic(&hr, scale)?;
        Ok(Self { pose, lr, hr: Some(hr), scale, name: name.into() })
    }

    pub fn hr_size(&self) -> (usize, usize) {
        (self.lr.width() * self.scale, self.lr.height() * self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    views: Vec<ViewRecord>,
    splits: Vec<Split>,
    pyramids: Vec<Pyramid>,
    scale: usize,
}

impl SceneDataset {
    pub fn new(views: Vec<ViewRecord>, splits: Vec<Split>, levels: usize) -> Result<Self> {
        if views.len() != splits.len() {
            return Err(Error::Contract(format!("{} views but {} split labels", views.len(), splits.len())));
        }
        let scale = views.first().map_or(1, |v| v.scale);
        for (v, s) in views.iter().zip(&splits) {
            if v.scale != scale {
                return Err(Error::Contract(format!("view `{}` has scale {}, scene uses {scale}", v.name, v.scale)));
            }
            if let Some(hr) = &v.hr {
                if hr.width() != v.lr.width() * scale || hr.height() != v.lr.height() * scale {
                    return Err(Error::Dimension(format!(
                        "view `{}`: HR {}x{} is not {scale}x LR {}x{}",
                        v.name,
                        hr.width(),
                        hr.height(),
                        v.lr.width(),
                        v.lr.height()
                    )));
                }
            } else if *s == Split::Train {
                return Err(Error::Contract(format!("training view `{}` has no HR target", v.name)));
            }
        }
        let pyramids = views.iter().map(|v| Pyramid::build(&v.lr, levels)).collect::<Result<_>>()?;
        Ok(Self { views, splits, pyramids, scale })
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn view(&self, i: usize) -> &ViewRecord {
        &self.views[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn pyramid(&self, i: usize) -> &Pyramid {
        &self.pyramids[i]
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.pyramids.first().map_or(0, Pyramid::num_levels)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Rebuilds every pyramid to a new depth.
    pub fn with_levels(mut self, levels: usize) -> Result<Self> {
        if self.levels() != levels {
            self.pyramids = self.views.iter().map(|v| Pyramid::build(&v.lr, levels)).collect::<Result<_>>()?;
        }
        Ok(self)
    }
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

fn transforms_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("transforms_{}.json", split.as_str()))
}

fn image_path(dir: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.strip_prefix("./").unwrap_or(file_path);
    let p = dir.join(rel);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn parse_matrix(path: &Path, frame: usize, m: &[Vec<f64>]) -> Result<[[f64; 4]; 4]> {
    if m.len() != 4 || m.iter().any(|r| r.len() != 4) {
        let dims: Vec<usize> = m.iter().map(Vec::len).collect();
        return Err(Error::format(
            path,
            format!("frame {frame}: transform_matrix must be 4x4, got rows of lengths {dims:?}"),
        ));
    }
    let mut out = [[0.0; 4]; 4];
    for (o, r) in out.iter_mut().zip(m) {
        o.copy_from_slice(r);
    }
    Ok(out)
}

/// Loads a NeRF-Blender style scene. Stored images are the HR targets; LR
/// inputs are derived at `scale`. Pyramids get [`DEFAULT_LEVELS`] levels.
pub fn load_scene(dir: &Path, scale: usize) -> Result<SceneDataset> {
    load_scene_with_levels(dir, scale, DEFAULT_LEVELS)
}

pub fn load_scene_with_levels(dir: &Path, scale: usize, levels: usize) -> Result<SceneDataset> {
    if scale < 1 {
        return Err(Error::Config(format!("scale must be >= 1, got {scale}")));
    }
    let mut views = Vec::new();
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Test] {
        let path = transforms_path(dir, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let parsed: TransformsFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("malformed JSON: {e}")))?;
        for (i, frame) in parsed.frames.iter().enumerate() {
            let m = parse_matrix(&path, i, &frame.transform_matrix)?;
            let pose = CameraPose::from_matrix4(&m, parsed.camera_angle_x)
                .map_err(|e| Error::format(&path, format!("frame {i}: {e}")))?;
            let img_path = image_path(dir, &frame.file_path);
            if !img_path.exists() {
                return Err(Error::format(&img_path, "referenced image does not exist"));
            }
            let hr = Image::load_png(&img_path)?;
            let name = frame.file_path.strip_prefix("./").unwrap_or(&frame.file_path).to_string();
            let view = ViewRecord::from_hr(pose, hr, scale, name).map_err(|e| Error::format(&img_path, e.to_string()))?;
            views.push(view);
            splits.push(split);
        }
    }
    SceneDataset::new(views, splits, levels)
}

/// Writes HR images and both transforms files in the NeRF-Blender layout.
pub fn save_scene(ds: &SceneDataset, dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let idx = ds.indices(split);
        let mut frames = Vec::with_capacity(idx.len());
        let mut fov = None;
        for &i in &idx {
            let v = ds.view(i);
            let hr = v
                .hr
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("view `{}` has no HR image to write", v.name)))?;
            let png = image_path(dir, &v.name);
            if let Some(parent) = png.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            hr.save_png(&png)?;
            fov.get_or_insert(v.pose.fov_x());
            frames.push(FrameEntry {
                file_path: format!("./{}", v.name),
                transform_matrix: v.pose.to_matrix4().iter().map(|r| r.to_vec()).collect(),
            });
        }
        let file = TransformsFile { camera_angle_x: fov.unwrap_or(ds.views.first().map_or(0.6911, |v| v.pose.fov_x())), frames };
        let path = transforms_path(dir, split);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = serde_json::to_string_pretty(&file).expect("plain data serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn tiny_scene(dir: &Path, frames: usize) {
        fs::create_dir_all(dir.join("train")).unwrap();
        let mut entries = Vec::new();
        for i in 0..frames {
            Image::filled(8, 6, [0.2, 0.4, 0.6]).save_png(&dir.join(format!("train/r_{i}.png"))).unwrap();
            entries.push(format!(
                r#"{{"file_path": "./train/r_{i}", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,{i}],[0,0,0,1]]}}"#
            ));
        }
        write(dir, "transforms_train.json", &format!(r#"{{"camera_angle_x": 0.6911, "frames": [{}]}}"#, entries.join(",")));
        write(dir, "transforms_test.json", r#"{"camera_angle_x": 0.6911, "frames": []}"#);
    }

    #[test]
    fn loads_blender_layout() {
        let dir = tempfile::tempdir().unwrap();
        tiny_scene(dir.path(), 3);
        let ds = load_scene(dir.path(), 2).unwrap();
        assert_eq!(ds.len(), 3);
        for v in ds.views() {
            assert_eq!((v.lr.width(), v.lr.height()), (4, 3));
            assert_eq!(v.pose.fov_x(), 0.6911);
        }
        let m = ds.view(0).pose.to_matrix4();
        assert_eq!(m[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ds.view(2).pose.position(), [0.0, 0.0, 2.0]);
        assert_eq!(ds.indices(Split::Train), vec![0, 1, 2]);
    }

    #[test]
    fn reports_missing_and_malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_scene(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("transforms_train.json"), "{err}");

        tiny_scene(dir.path(), 1);
        write(dir.path(), "transforms_test.json", "{ not json");
        let err = load_scene(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("malformed JSON"), "{err}");

        write(
            dir.path(),
            "transforms_test.json",
            r#"{"camera_angle_x": 0.5, "frames": [{"file_path": "./train/r_0", "transform_matrix": [[1,0,0],[0,1,0],[0,0,1]]}]}"#,
        );
        let err = load_scene(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("4x4"), "{err}");

        write(
            dir.path(),
            "transforms_test.json",
            r#"{"camera_angle_x": 0.5, "frames": [{"file_path": "./test/missing", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}]}"#,
        );
        let err = load_scene(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");

        fs::create_dir_all(dir.path().join("test")).unwrap();
        fs::write(dir.path().join("test/missing.png"), b"not a png").unwrap();
        let err = load_scene(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("decode"), "{err}");
    }

    #[test]
    fn training_views_need_hr() {
        let pose = CameraPose::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 0.7).unwrap();
        let lr = Image::filled(4, 4, [0.5; 3]);
        let v = ViewRecord { pose, lr, hr: None, scale: 2, name: "x".into() };
        assert!(SceneDataset::new(vec![v.clone()], vec![Split::Train], 2).is_err());
        assert!(SceneDataset::new(vec![v], vec![Split::Test], 2).is_ok());
    }
}
