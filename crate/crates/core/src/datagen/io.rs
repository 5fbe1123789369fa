use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{GenConfig, Sample, View};
use crate::geometry::{CropSpec, Intrinsics, Pose, Rotation};
use crate::model::tensor::{read_tensor_file, write_tensor_file, Tensor};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub query_image: String,
    pub template_images: String,
    pub poses: String,
    pub crops: String,
    pub intrinsics: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub object_id: u64,
    pub files: SampleFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub canvas: usize,
    pub image_size: usize,
    pub sample_count: usize,
    pub templates: usize,
    pub k_points: usize,
    pub generator: GenConfig,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

fn f64_tensor(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor<f64>> {
    Tensor::new(shape, data)
}

/// Writes `samples` under `dir` with a JSON manifest and one directory of
/// tensor files per sample.
pub fn write_dataset(dir: &Path, cfg: &GenConfig, samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = cfg.render.out_size;
    let n = cfg.templates;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        if sample.templates.len() != n {
            return Err(Error::Contract(format!(
                "sample {i} has {} templates, manifest declares {n}",
                sample.templates.len()
            )));
        }
        let sub = format!("sample_{i:05}");
        let sdir = dir.join(&sub);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let files = SampleFiles {
            query_image: format!("{sub}/query_image.bin"),
            template_images: format!("{sub}/template_images.bin"),
            poses: format!("{sub}/poses.bin"),
            crops: format!("{sub}/crops.bin"),
            intrinsics: format!("{sub}/intrinsics.bin"),
        };
        let views: Vec<&View> = std::iter::once(&sample.query).chain(&sample.templates).collect();
        write_tensor_file(&dir.join(&files.query_image), &Tensor::new(vec![s, s, 3], sample.query.image.clone())?)?;
        let timgs: Vec<f32> = sample.templates.iter().flat_map(|v| v.image.iter().copied()).collect();
        write_tensor_file(&dir.join(&files.template_images), &Tensor::new(vec![n, s, s, 3], timgs)?)?;
        let mut poses = Vec::with_capacity((n + 1) * 12);
        let mut crops = Vec::with_capacity((n + 1) * 5);
        let mut ks = Vec::with_capacity((n + 1) * 4);
        for v in &views {
            let m = v.pose.r.matrix();
            for r in 0..3 {
                poses.extend([m[(r, 0)], m[(r, 1)], m[(r, 2)], v.pose.t[r]]);
            }
            crops.extend([v.crop.x, v.crop.y, v.crop.w, v.crop.h, v.crop.r_z]);
            ks.extend([v.k.fx, v.k.fy, v.k.cx, v.k.cy]);
        }
        write_tensor_file(&dir.join(&files.poses), &f64_tensor(vec![n + 1, 3, 4], poses)?)?;
        write_tensor_file(&dir.join(&files.crops), &f64_tensor(vec![n + 1, 5], crops)?)?;
        write_tensor_file(&dir.join(&files.intrinsics), &f64_tensor(vec![n + 1, 4], ks)?)?;
        entries.push(SampleEntry {
            object_id: sample.object_id,
            files,
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed: cfg.seed,
        intrinsics: cfg.render.k,
        canvas: cfg.render.canvas,
        image_size: s,
        sample_count: samples.len(),
        templates: n,
        k_points: cfg.k_points,
        generator: cfg.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn expect_shape(path: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::format(path, 0, format!("shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

fn read_f32(path: PathBuf, shape: &[usize]) -> Result<Vec<f32>> {
    let t = read_tensor_file(&path)?.into_f32(&path)?;
    expect_shape(&path, t.shape(), shape)?;
    Ok(t.into_data())
}

fn read_f64(path: PathBuf, shape: &[usize]) -> Result<Vec<f64>> {
    let t = read_tensor_file(&path)?.into_f64(&path)?;
    expect_shape(&path, t.shape(), shape)?;
    Ok(t.into_data())
}

/// Reads a dataset written by [`write_dataset`]. Malformed files produce
/// [`Error::Format`] naming the file.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(&mpath, 0, format!("unsupported dataset version {}", manifest.version)));
    }
    if manifest.samples.len() != manifest.sample_count {
        return Err(Error::format(
            &mpath,
            0,
            format!("sample_count {} but {} entries", manifest.sample_count, manifest.samples.len()),
        ));
    }
    let (s, n) = (manifest.image_size, manifest.templates);
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for e in &manifest.samples {
        let f = &e.files;
        let qimg = read_f32(dir.join(&f.query_image), &[s, s, 3])?;
        let timgs = read_f32(dir.join(&f.template_images), &[n, s, s, 3])?;
        let ppath = dir.join(&f.poses);
        let poses = read_f64(ppath.clone(), &[n + 1, 3, 4])?;
        let crops = read_f64(dir.join(&f.crops), &[n + 1, 5])?;
        let kpath = dir.join(&f.intrinsics);
        let ks = read_f64(kpath.clone(), &[n + 1, 4])?;
        let mut views = Vec::with_capacity(n + 1);
        for v in 0..=n {
            let p = &poses[v * 12..v * 12 + 12];
            let m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
            let r = Rotation::from_matrix(m).map_err(|err| Error::format(&ppath, (v * 96) as u64, err.to_string()))?;
            let c = &crops[v * 5..v * 5 + 5];
            let k = &ks[v * 4..v * 4 + 4];
            let image = if v == 0 {
                qimg.clone()
            } else {
                timgs[(v - 1) * s * s * 3..v * s * s * 3].to_vec()
            };
            views.push(View {
                image,
                pose: Pose::new(r, Vector3::new(p[3], p[7], p[11])),
                k: Intrinsics::new(k[0], k[1], k[2], k[3])
                    .map_err(|err| Error::format(&kpath, (v * 32) as u64, err.to_string()))?,
                crop: CropSpec::new(c[0], c[1], c[2], c[3], c[4])
                    .map_err(|err| Error::format(dir.join(&f.crops), (v * 40) as u64, err.to_string()))?,
            });
        }
        let query = views.remove(0);
        samples.push(Sample {
            object_id: e.object_id,
            query,
            templates: views,
        });
    }
    Ok(Dataset { manifest, samples })
}
