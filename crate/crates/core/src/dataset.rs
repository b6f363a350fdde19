//! Dataset generation and loading: a manifest plus one tensor container per
//! multi-view frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, Payload};
use crate::error::{Error, Result};
use crate::geometry::{build_sampling_grid, ground_to_image_homography, CameraModel};
use crate::rng::rng_from;
use crate::scene::{
    generate_scene, place_ring_cameras, synthesize_sample, CameraRigConfig, CrowdConfig,
    GridSpec, MultiViewSample, RenderConfig,
};
use crate::tensor::Tensor;

const STREAM_FRAME: u64 = 0xf7a;
const STREAM_CAMERAS: u64 = 0xca0;
const STREAM_LABELS: u64 = 0x1ab;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Full dataset generation configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    /// Frames per scene; the last `test_frames_per_scene` of them form the
    /// test split.
    pub frames_per_scene: usize,
    pub test_frames_per_scene: usize,
    /// Camera views per frame.
    pub k: usize,
    /// Percentage of train frames per scene that carry labels.
    pub label_rate: f64,
    pub seed: u64,
    pub grid: GridSpec,
    pub crowd: CrowdConfig,
    pub render: RenderConfig,
    pub rig: CameraRigConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 4,
            frames_per_scene: 50,
            test_frames_per_scene: 10,
            k: 3,
            label_rate: 10.0,
            seed: 1,
            grid: GridSpec { h: 32, w: 32, meters_per_cell: 0.5, plane_height: 1.7 },
            crowd: CrowdConfig::default(),
            render: RenderConfig::default(),
            rig: CameraRigConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.scenes == 0 || self.frames_per_scene == 0 {
            return Err(Error::Config("need at least one scene and one frame".into()));
        }
        if self.test_frames_per_scene >= self.frames_per_scene {
            return Err(Error::Config(format!(
                "test_frames_per_scene {} must leave at least one train frame of {}",
                self.test_frames_per_scene, self.frames_per_scene
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("need at least one camera view".into()));
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 100.0) {
            return Err(Error::Config(format!(
                "label_rate must be in (0, 100], got {}",
                self.label_rate
            )));
        }
        Ok(())
    }

    pub fn train_frames_per_scene(&self) -> usize {
        self.frames_per_scene - self.test_frames_per_scene
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (want train or test)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameManifest {
    pub file: String,
    pub split: Split,
    pub labeled: bool,
    /// Ground-truth visible-person count, for quick inspection.
    pub person_count: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub id: usize,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<FrameManifest>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub k: usize,
    pub grid: GridSpec,
    pub config: DataConfig,
    pub scenes: Vec<SceneManifest>,
}

/// Shuffles `0..n_train` with a per-scene stream and labels the first
/// `ceil(rate% * n_train)`.
pub fn label_flags(n_train: usize, label_rate: f64, seed: u64, scene: usize) -> Result<Vec<bool>> {
    if !(label_rate > 0.0 && label_rate <= 100.0) {
        return Err(Error::Config(format!("label rate {label_rate} outside (0, 100]")));
    }
    let n_labeled = ((label_rate * n_train as f64) / 100.0).ceil() as usize;
    if n_labeled == 0 || n_labeled > n_train {
        return Err(Error::Config(format!(
            "label rate {label_rate}% yields {n_labeled} labeled frames out of {n_train}"
        )));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = rng_from(seed, &[STREAM_LABELS, scene as u64]);
    order.shuffle(&mut rng);
    let mut flags = vec![false; n_train];
    for &i in &order[..n_labeled] {
        flags[i] = true;
    }
    Ok(flags)
}

fn frame_file(scene: usize, frame: usize) -> String {
    format!("frames/scene{scene:03}_frame{frame:03}.mvct")
}

fn sample_to_container(sample: &MultiViewSample) -> Container {
    let mut c = Container::new();
    for (i, view) in sample.views.iter().enumerate() {
        c.push_tensor(format!("view_{i}"), view).expect("unique names");
    }
    c.push_tensor("gt_density", &sample.gt_density).expect("unique names");
    for (i, mask) in sample.coverage.iter().enumerate() {
        let bytes: Vec<u8> = mask.data().iter().map(|&v| (v > 0.0) as u8).collect();
        c.push(format!("coverage_{i}"), mask.shape().to_vec(), Payload::U8(bytes))
            .expect("unique names");
    }
    c
}

/// Generates the dataset directory: `manifest.toml` plus one container per
/// frame. Deterministic per config (including its seed).
pub fn make_dataset(config: &DataConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let extent = config.grid.extent();
    let n_train = config.train_frames_per_scene();
    let mut scenes = Vec::with_capacity(config.scenes);
    for s in 0..config.scenes {
        let cam_seed = {
            let mut rng = rng_from(config.seed, &[STREAM_CAMERAS, s as u64]);
            rand::Rng::random::<u64>(&mut rng)
        };
        let cameras = place_ring_cameras(&config.rig, extent, config.k, cam_seed)?;
        for cam in &cameras {
            cam.check_faces_scene(&config.grid)?;
        }
        let labels = label_flags(n_train, config.label_rate, config.seed, s)?;
        let mut frames = Vec::with_capacity(config.frames_per_scene);
        for f in 0..config.frames_per_scene {
            let split = if f < n_train { Split::Train } else { Split::Test };
            let labeled = match split {
                Split::Train => labels[f],
                Split::Test => true,
            };
            let frame_seed = {
                let mut rng = rng_from(config.seed, &[STREAM_FRAME, s as u64, f as u64]);
                rand::Rng::random::<u64>(&mut rng)
            };
            let scene = generate_scene(&config.crowd, extent, frame_seed)?;
            let sample = synthesize_sample(&scene, &cameras, &config.grid, &config.render, labeled);
            let file = frame_file(s, f);
            let path = out_dir.join(&file);
            sample_to_container(&sample).save(&path)?;
            frames.push(FrameManifest {
                file,
                split,
                labeled,
                person_count: sample.gt_count(),
            });
        }
        scenes.push(SceneManifest { id: s, cameras, frames });
    }

    let manifest = DatasetManifest {
        format_version: 1,
        config_hash: config.hash(),
        k: config.k,
        grid: config.grid,
        config: config.clone(),
        scenes,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Identifies one frame within a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameId {
    pub scene: usize,
    pub frame: usize,
}

/// A frame loaded into memory together with its dataset indices.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub id: FrameId,
    pub sample: MultiViewSample,
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Dataset> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("bad dataset manifest {}: {e}", path.display())))?;
        Ok(Dataset { root, manifest })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.manifest.grid
    }

    pub fn k(&self) -> usize {
        self.manifest.k
    }

    pub fn frame_ids(&self, split: Split) -> Vec<FrameId> {
        let mut ids = Vec::new();
        for scene in &self.manifest.scenes {
            for (frame, fm) in scene.frames.iter().enumerate() {
                if fm.split == split {
                    ids.push(FrameId { scene: scene.id, frame });
                }
            }
        }
        ids
    }

    pub fn frame_manifest(&self, id: FrameId) -> Result<&FrameManifest> {
        self.manifest
            .scenes
            .get(id.scene)
            .and_then(|s| s.frames.get(id.frame))
            .ok_or_else(|| Error::Data(format!("frame {id:?} not in manifest")))
    }

    /// Loads one frame; the labeled flag comes from the manifest.
    pub fn load_frame(&self, id: FrameId) -> Result<LoadedFrame> {
        let fm = self.frame_manifest(id)?;
        let cameras = self.manifest.scenes[id.scene].cameras.clone();
        let container = Container::load(self.root.join(&fm.file))?;
        let k = self.manifest.k;
        let views: Vec<Tensor> = (0..k)
            .map(|i| container.tensor(&format!("view_{i}")))
            .collect::<Result<_>>()?;
        let coverage: Vec<Tensor> = (0..k)
            .map(|i| container.tensor(&format!("coverage_{i}")))
            .collect::<Result<_>>()?;
        let gt_density = container.tensor("gt_density")?;
        Ok(LoadedFrame {
            id,
            sample: MultiViewSample { views, cameras, gt_density, coverage, labeled: fm.labeled },
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedFrame>> {
        self.frame_ids(split).into_iter().map(|id| self.load_frame(id)).collect()
    }

    /// Per-scene, per-view sampling grids for a model with the given
    /// feature stride.
    pub fn sampling_grids(&self, stride: usize) -> Result<Vec<Vec<Tensor>>> {
        self.manifest
            .scenes
            .iter()
            .map(|scene| {
                scene
                    .cameras
                    .iter()
                    .map(|cam| {
                        let hom = ground_to_image_homography(cam, &self.manifest.grid)?;
                        Ok(build_sampling_grid(&hom, &self.manifest.grid, stride as f64))
                    })
                    .collect()
            })
            .collect()
    }
}
