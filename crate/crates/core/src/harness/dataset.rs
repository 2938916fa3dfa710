//! Synthetic REAL/FAKE images with planted artifacts.
//!
//! Each scene is a smooth random intensity ramp. FAKE scenes carry one
//! artifact block at a recorded box: either uniform high-frequency noise or
//! a windowed ramp running against the scene gradient. A scene yields
//! several train and test variants that differ only in sensor noise, so the
//! nearest training images of a test image tend to share its label.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::{BoundingBox, GrayImage, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    NoiseBlock,
    InvertedGradient,
}

/// Which artifact kinds FAKE scenes draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactMix {
    Both,
    NoiseBlock,
    InvertedGradient,
}

impl std::str::FromStr for ArtifactMix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "noise-block" => Ok(Self::NoiseBlock),
            "inverted-gradient" => Ok(Self::InvertedGradient),
            other => Err(format!("unknown artifact mix {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Distinct scenes; every scene contributes `n_train / scenes` train and
    /// `n_test / scenes` test variants.
    pub scenes: usize,
    pub fake_fraction: f64,
    pub artifact: ArtifactMix,
    pub box_min: usize,
    pub box_max: usize,
    pub amplitude: (f64, f64),
    pub ramp_span: (f64, f64),
    /// Probability that a FAKE scene's artifact is scaled down by `subtle_scale`.
    pub subtle_probability: f64,
    pub subtle_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            patch_size: 8,
            n_train: 400,
            n_test: 200,
            scenes: 40,
            fake_fraction: 0.5,
            artifact: ArtifactMix::Both,
            box_min: 10,
            box_max: 16,
            amplitude: (0.1, 0.3),
            ramp_span: (0.8, 1.2),
            subtle_probability: 0.3,
            subtle_scale: 0.15,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.width == 0 || self.height == 0 || self.patch_size == 0 {
            return bad("image and patch sizes must be positive".into());
        }
        if !self.width.is_multiple_of(self.patch_size) || !self.height.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} does not tile {}x{}", self.patch_size, self.width, self.height));
        }
        if self.box_min < 2 || self.box_min > self.box_max {
            return bad(format!("box size range [{}, {}] is empty or too small", self.box_min, self.box_max));
        }
        if self.box_max > self.width.min(self.height) {
            return bad(format!("box size {} exceeds the {}x{} image", self.box_max, self.width, self.height));
        }
        if self.scenes == 0 || !self.n_train.is_multiple_of(self.scenes) || !self.n_test.is_multiple_of(self.scenes) {
            return bad(format!("{} scenes must divide n_train={} and n_test={}", self.scenes, self.n_train, self.n_test));
        }
        if !(0.0..=1.0).contains(&self.fake_fraction) || !(0.0..=1.0).contains(&self.subtle_probability) {
            return bad("fractions must lie in [0, 1]".into());
        }
        let ranges = [self.amplitude, self.ramp_span];
        if ranges.iter().any(|&(lo, hi)| !(lo >= 0.0 && lo <= hi && hi.is_finite())) {
            return bad("amplitude and span ranges must be ordered and non-negative".into());
        }
        if !(self.noise_std >= 0.0 && self.subtle_scale >= 0.0) {
            return bad("noise and subtle scale must be non-negative".into());
        }
        Ok(())
    }

    /// Number of FAKE scenes; scene `i` is FAKE when `⌊(i+1)f⌋ > ⌊if⌋`.
    fn scene_is_fake(&self, i: usize) -> bool {
        ((i + 1) as f64 * self.fake_fraction).floor() > (i as f64 * self.fake_fraction).floor()
    }
}

/// Everything needed to redraw a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub label: Label,
    pub offset: f64,
    pub gain: f64,
    pub angle: f64,
    pub bbox: BoundingBox,
    pub artifact: ArtifactKind,
    pub amplitude: f64,
    pub span: f64,
    pub artifact_seed: u64,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn draw_scene(spec: &SyntheticSpec, fake: bool, rng: &mut ChaCha8Rng) -> Scene {
    let offset = rng.gen_range(0.3..0.7);
    let gain = rng.gen_range(0.1..0.4);
    let angle = rng.gen_range(0.0..2.0 * PI);
    let width = rng.gen_range(spec.box_min..=spec.box_max);
    let height = rng.gen_range(spec.box_min..=spec.box_max);
    let x0 = rng.gen_range(0..=spec.width - width);
    let y0 = rng.gen_range(0..=spec.height - height);
    let coin = rng.gen_bool(0.5);
    let artifact = match spec.artifact {
        ArtifactMix::Both if coin => ArtifactKind::InvertedGradient,
        ArtifactMix::Both | ArtifactMix::NoiseBlock => ArtifactKind::NoiseBlock,
        ArtifactMix::InvertedGradient => ArtifactKind::InvertedGradient,
    };
    let mut amplitude = sample_range(rng, spec.amplitude);
    let mut span = sample_range(rng, spec.ramp_span);
    if rng.gen::<f64>() < spec.subtle_probability {
        amplitude *= spec.subtle_scale;
        span *= spec.subtle_scale;
    }
    Scene {
        label: if fake { Label::Fake } else { Label::Real },
        offset,
        gain,
        angle,
        bbox: BoundingBox { x0, y0, width, height },
        artifact,
        amplitude,
        span,
        artifact_seed: rng.gen(),
    }
}

/// Draws one variant of `scene`. With `planted = false` a FAKE scene is
/// drawn without its artifact, giving the REAL base it was built from.
pub fn render_scene(spec: &SyntheticSpec, scene: &Scene, noise_seed: u64, planted: bool) -> GrayImage {
    let (w, h) = (spec.width, spec.height);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise level");
    let (c, s) = (scene.angle.cos(), scene.angle.sin());
    let mut px = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xs = (x as f64 + 0.5) / w as f64 - 0.5;
            let ys = (y as f64 + 0.5) / h as f64 - 0.5;
            px[y * w + x] = scene.offset + scene.gain * (c * xs + s * ys) + noise.sample(&mut noise_rng);
        }
    }
    if planted && scene.label == Label::Fake {
        let b = scene.bbox;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.artifact_seed);
        for y in b.y0..b.y0 + b.height {
            for x in b.x0..b.x0 + b.width {
                px[y * w + x] += match scene.artifact {
                    ArtifactKind::NoiseBlock if scene.amplitude > 0.0 => {
                        rng.gen_range(-scene.amplitude..scene.amplitude)
                    }
                    ArtifactKind::NoiseBlock => 0.0,
                    ArtifactKind::InvertedGradient => {
                        let lx = (x - b.x0) as f64 / (b.width - 1) as f64 - 0.5;
                        let ly = (y - b.y0) as f64 / (b.height - 1) as f64 - 0.5;
                        let window = (PI * (lx + 0.5)).sin() * (PI * (ly + 0.5)).sin();
                        -2.0 * window * scene.span * (c * lx + s * ly)
                    }
                };
            }
        }
    }
    // Stored as f32 on disk; round here so memory and disk agree.
    let px = px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64).collect();
    GrayImage::new(w, h, px).expect("clamped pixels")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub scene: usize,
    pub label: Label,
    /// Ground-truth artifact region; `None` for REAL images.
    pub bbox: Option<BoundingBox>,
    pub artifact: Option<ArtifactKind>,
    pub image: GrayImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub scenes: Vec<Scene>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Deterministic in `spec` (including its seed). Rendering runs in parallel.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenes: Vec<Scene> = (0..spec.scenes)
        .map(|i| draw_scene(spec, spec.scene_is_fake(i), &mut rng))
        .collect();
    let (tr_per, te_per) = (spec.n_train / spec.scenes, spec.n_test / spec.scenes);
    let mut train_jobs = Vec::with_capacity(spec.n_train);
    let mut test_jobs = Vec::with_capacity(spec.n_test);
    for si in 0..spec.scenes {
        for _ in 0..tr_per {
            train_jobs.push((si, rng.gen::<u64>()));
        }
        for _ in 0..te_per {
            test_jobs.push((si, rng.gen::<u64>()));
        }
    }
    train_jobs.shuffle(&mut rng);
    let render = |offset: usize, jobs: &[(usize, u64)]| -> Vec<LabeledImage> {
        jobs.par_iter()
            .enumerate()
            .map(|(i, &(si, noise_seed))| {
                let scene = &scenes[si];
                let fake = scene.label == Label::Fake;
                LabeledImage {
                    id: offset + i,
                    scene: si,
                    label: scene.label,
                    bbox: fake.then_some(scene.bbox),
                    artifact: fake.then_some(scene.artifact),
                    image: render_scene(spec, scene, noise_seed, true),
                }
            })
            .collect()
    };
    let train = render(0, &train_jobs);
    let test = render(spec.n_train, &test_jobs);
    Ok(Dataset {
        spec: spec.clone(),
        scenes,
        train,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestItem {
    id: usize,
    scene: usize,
    label: Label,
    bbox: Option<BoundingBox>,
    artifact: Option<ArtifactKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: SyntheticSpec,
    scenes: Vec<Scene>,
    train: Vec<ManifestItem>,
    test: Vec<ManifestItem>,
    content_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.f32";
pub const TEST_FILE: &str = "test.f32";

fn grid_bytes(items: &[LabeledImage]) -> Vec<u8> {
    items
        .iter()
        .flat_map(|it| it.image.pixels().iter().flat_map(|&p| (p as f32).to_le_bytes()))
        .collect()
}

fn manifest_items(items: &[LabeledImage]) -> Vec<ManifestItem> {
    items
        .iter()
        .map(|it| ManifestItem {
            id: it.id,
            scene: it.scene,
            label: it.label,
            bbox: it.bbox,
            artifact: it.artifact,
        })
        .collect()
}

fn content_hash(spec: &SyntheticSpec, train: &[ManifestItem], test: &[ManifestItem], grids: [&[u8]; 2]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(spec, train, test)).expect("manifest serializes"));
    for g in grids {
        h.update(g);
    }
    hex::encode(h.finalize())
}

impl Dataset {
    /// SHA-256 over the manifest entries and the stored pixel grids.
    pub fn content_hash(&self) -> String {
        content_hash(
            &self.spec,
            &manifest_items(&self.train),
            &manifest_items(&self.test),
            [&grid_bytes(&self.train), &grid_bytes(&self.test)],
        )
    }

    /// Writes `manifest.json`, `train.f32` and `test.f32` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (tr, te) = (grid_bytes(&self.train), grid_bytes(&self.test));
        let (mtr, mte) = (manifest_items(&self.train), manifest_items(&self.test));
        let manifest = Manifest {
            content_hash: content_hash(&self.spec, &mtr, &mte, [&tr, &te]),
            spec: self.spec.clone(),
            scenes: self.scenes.clone(),
            train: mtr,
            test: mte,
        };
        fs::write(dir.join(TRAIN_FILE), tr)?;
        fs::write(dir.join(TEST_FILE), te)?;
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Reads a saved dataset and checks its content hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read(dir.join(name)).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.join(name).display())))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
            .map_err(|e| HarnessError::Data(format!("manifest: {e}")))?;
        let (tr, te) = (read(TRAIN_FILE)?, read(TEST_FILE)?);
        let hash = content_hash(&manifest.spec, &manifest.train, &manifest.test, [&tr, &te]);
        if hash != manifest.content_hash {
            return Err(HarnessError::Data(format!(
                "dataset content hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        let spec = manifest.spec;
        let unpack = |bytes: &[u8], items: Vec<ManifestItem>| -> Result<Vec<LabeledImage>, HarnessError> {
            let n = spec.width * spec.height;
            if bytes.len() != items.len() * n * 4 {
                return Err(HarnessError::Data("pixel grid size does not match manifest".into()));
            }
            items
                .into_iter()
                .zip(bytes.chunks_exact(n * 4))
                .map(|(it, chunk)| {
                    let px = chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    let image = GrayImage::new(spec.width, spec.height, px).map_err(HarnessError::Data)?;
                    Ok(LabeledImage {
                        id: it.id,
                        scene: it.scene,
                        label: it.label,
                        bbox: it.bbox,
                        artifact: it.artifact,
                        image,
                    })
                })
                .collect()
        };
        let train = unpack(&tr, manifest.train)?;
        let test = unpack(&te, manifest.test)?;
        Ok(Self {
            spec,
            scenes: manifest.scenes,
            train,
            test,
        })
    }
}
