//! Session state, the replayable edit log and the scene payload.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use gf2_core::compositor::SegmentInfo;
use gf2_core::model::{Generator, Scene, Which};
use gf2_core::toydata::{encode_ppm, to_rgb8};
use gf2_core::visuals::{depth_rgb8, layout_rgb8};
use gf2_core::{Error, Result, Rng, Tensor};

/// How an edit moves a latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Towards a seeded target by `t`.
    #[default]
    Interpolate,
    /// Straight to the seeded target.
    Resample,
}

/// One state transition of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Latent { segment: usize, which: Which, mode: Mode, t: f64, seed: u64 },
    Add { seed: u64 },
    Delete { segment: usize },
}

/// Everything that determines a session's image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub checkpoint: String,
    pub seed: u64,
    pub edits: Vec<Edit>,
}

/// Target latent of an edit seed.
pub fn target_latent(gen: &Generator<f32>, seed: u64) -> Result<Tensor<f32>> {
    let z = gen.sample_style_z(1, &mut Rng::new(seed).fork("edit"))?;
    z.into_reshape(&[gen.config.z_dim])
}

/// Applies one edit to `scene`.
pub fn apply(gen: &Generator<f32>, scene: &Scene<f32>, edit: &Edit) -> Result<Scene<f32>> {
    match *edit {
        Edit::Latent { segment, which, mode, t, seed } => {
            let target = target_latent(gen, seed)?;
            match mode {
                Mode::Interpolate => gen.interpolate(scene, segment, which, &target, t),
                Mode::Resample => gen.set_latent(scene, segment, which, &target),
            }
        }
        Edit::Add { seed } => {
            if scene.layout.len() >= gen.config.max_segments {
                return Err(Error::InvalidArgument(format!("layout is full ({} segments)", scene.layout.len())));
            }
            gen.add_segments(scene, &Rng::new(seed))
        }
        Edit::Delete { segment } => gen.delete_segment(scene, segment),
    }
}

/// Rebuilds the final scene of a log from scratch.
pub fn replay(gen: &Generator<f32>, seed: u64, edits: &[Edit]) -> Result<Scene<f32>> {
    edits.iter().try_fold(gen.scene(seed)?, |scene, e| apply(gen, &scene, e))
}

/// JSON body describing a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePayload {
    pub segments: Vec<SegmentInfo>,
    /// Base64 binary PPM of the rendered image.
    pub image: String,
    /// Base64 binary PPM of the argmax class map.
    pub layout_png_like: String,
    /// Base64 binary PPM of the normalized depth map.
    pub depth: String,
    pub resolution: usize,
    /// Digest of the layout tensor, equal iff the layout is bit-identical.
    pub layout_digest: String,
    pub image_digest: String,
}

fn b64_ppm(rgb: &[u8], r: usize) -> String {
    STANDARD.encode(encode_ppm(rgb, r, r))
}

pub fn payload(scene: &Scene<f32>) -> ScenePayload {
    let r = scene.layout.res();
    ScenePayload {
        segments: scene.layout.sidecar().segments,
        image: b64_ppm(&to_rgb8(&scene.image), r),
        layout_png_like: b64_ppm(&layout_rgb8(&scene.layout), r),
        depth: b64_ppm(&depth_rgb8(&scene.layout.depth_map), r),
        resolution: r,
        layout_digest: format!("{:016x}", scene.layout.tensor().digest()),
        image_digest: format!("{:016x}", scene.image.digest()),
    }
}

/// A live editing session.
pub struct Session {
    pub id: String,
    pub generator: std::sync::Arc<Generator<f32>>,
    pub scene: Scene<f32>,
    pub revision: u64,
    pub log: EditLog,
}

impl Session {
    /// Applies `edit`, appends it to the log and bumps the revision.
    pub fn edit(&mut self, edit: Edit) -> Result<()> {
        self.scene = apply(&self.generator, &self.scene, &edit)?;
        self.log.edits.push(edit);
        self.revision += 1;
        Ok(())
    }
}
