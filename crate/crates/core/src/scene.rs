//! Scene bundles: posed source views plus an optional target reference, and
//! their on-disk layout (`images/`, `cams/`, `gt/`, view 0000 is the target).

use std::path::{Path, PathBuf};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::imageio::{read_pfm, read_ppm, write_pfm, write_ppm};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub target: PinholeCamera,
    pub sources: Vec<PinholeCamera>,
    /// 3×H×W in [0, 1], one per source camera.
    pub source_images: Vec<Tensor>,
    pub target_image: Option<Tensor>,
    pub target_depth: Option<DepthMap>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "scene";
        if self.sources.len() < 2 {
            return Err(Error::invalid(OP, format!("need at least 2 source views, got {}", self.sources.len())));
        }
        if self.source_images.len() != self.sources.len() {
            return Err(Error::shape(OP, "source image count", self.sources.len(), self.source_images.len()));
        }
        for (cam, img) in self.sources.iter().zip(&self.source_images) {
            cam.validate()?;
            img.expect_shape(OP, &[3, cam.height, cam.width])?;
        }
        self.target.validate()?;
        if let Some(img) = &self.target_image {
            img.expect_shape(OP, &[3, self.target.height, self.target.width])?;
        }
        if let Some(d) = &self.target_depth {
            d.values.expect_shape(OP, &[self.target.height, self.target.width])?;
        }
        Ok(())
    }

    /// Same target with only the chosen sources, in the given order.
    pub fn with_sources(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.sources.len()) {
            return Err(Error::invalid("scene", format!("source index {bad} out of range")));
        }
        Ok(SceneBundle {
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
            source_images: indices.iter().map(|&i| self.source_images[i].clone()).collect(),
            ..self.clone()
        })
    }

    /// Writes the directory layout. Invalid ground-truth depth is stored as 0.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "cams", "gt"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.target.save(&cam_path(dir, 0))?;
        if let Some(img) = &self.target_image {
            write_ppm(&image_path(dir, 0), img)?;
        }
        if let Some(d) = &self.target_depth {
            let stored = Tensor::from_fn(d.values.shape(), |p| if d.valid[p] { d.values.data()[p] } else { 0.0 });
            write_pfm(&depth_path(dir, 0), &stored)?;
        }
        for (k, (cam, img)) in self.sources.iter().zip(&self.source_images).enumerate() {
            cam.save(&cam_path(dir, k + 1))?;
            write_ppm(&image_path(dir, k + 1), img)?;
        }
        Ok(())
    }

    /// Reads a scene directory and keeps the `count` candidate views nearest
    /// to the target (all of them when `count` is `None`).
    pub fn load(dir: &Path, count: Option<usize>) -> Result<Self> {
        let cams_dir = dir.join("cams");
        let mut ids: Vec<usize> = std::fs::read_dir(&cams_dir)
            .map_err(|e| Error::io(&cams_dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".txt")?.parse().ok()
            })
            .collect();
        ids.sort_unstable();
        if ids.first() != Some(&0) {
            return Err(Error::format(cam_path(dir, 0), "target", "missing target camera 0000"));
        }
        let mut sources = Vec::new();
        let mut images = Vec::new();
        for &id in &ids[1..] {
            let img = read_ppm(&image_path(dir, id))?;
            sources.push(PinholeCamera::load(&cam_path(dir, id), img.dim(2), img.dim(1))?);
            images.push(img);
        }
        let target_image = image_path(dir, 0).exists().then(|| read_ppm(&image_path(dir, 0))).transpose()?;
        let depth = depth_path(dir, 0).exists().then(|| read_pfm(&depth_path(dir, 0))).transpose()?;
        let (h, w) = match (&target_image, &depth, images.first()) {
            (Some(t), _, _) => (t.dim(1), t.dim(2)),
            (None, Some(d), _) => (d.dim(0), d.dim(1)),
            (None, None, Some(s)) => (s.dim(1), s.dim(2)),
            _ => return Err(Error::format(dir.join("images"), "images", "no images found")),
        };
        let target = PinholeCamera::load(&cam_path(dir, 0), w, h)?;
        let target_depth = depth
            .map(|d| {
                if d.rank() != 2 {
                    return Err(Error::format(depth_path(dir, 0), "channels", "depth must be single-channel"));
                }
                let valid = d.data().iter().map(|&v| v > 0.0 && v.is_finite()).collect();
                DepthMap::new(d, valid)
            })
            .transpose()?;
        let bundle = SceneBundle {
            target,
            sources,
            source_images: images,
            target_image,
            target_depth,
        };
        let keep = select_source_views(&bundle.target, &bundle.sources, count.unwrap_or(bundle.sources.len()))?;
        let bundle = bundle.with_sources(&keep)?;
        bundle.validate()?;
        Ok(bundle)
    }
}

fn cam_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("cams").join(format!("{id:04}.txt"))
}

fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:04}.ppm"))
}

pub fn depth_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("gt").join(format!("depth_{id:04}.pfm"))
}

/// Indices of the `count` candidates whose centers are nearest the target's,
/// nearest first, ties by index.
pub fn select_source_views(target: &PinholeCamera, candidates: &[PinholeCamera], count: usize) -> Result<Vec<usize>> {
    if count > candidates.len() {
        return Err(Error::invalid(
            "select_source_views",
            format!("asked for {count} views, only {} available", candidates.len()),
        ));
    }
    let c = target.center();
    let mut order: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(i, cam)| ((cam.center() - c).norm(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(count).map(|(_, i)| i).collect())
}
