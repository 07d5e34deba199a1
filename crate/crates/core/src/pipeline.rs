//! End-to-end inference: text to keypoints, facial refinement, rendering.

use rand::Rng;
use rand_distr::StandardNormal;
use tips_tensor::Tensor;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::pose::{extract_keypoints, KeypointSet, OCCLUSION_THRESHOLD};
use crate::refiner::{apply_refinement, FacialRefiner, RefineOutcome};
use crate::render::PoseRenderer;
use crate::seed::rng_for;
use crate::text::{encode_manyhot, lerp_embeddings, AttributeSchema, DescriptionRecord, TextEmbedding};
use crate::text2pose::TextToPose;

/// The three trained stages and the schema their text inputs use.
#[derive(Debug, Clone)]
pub struct PipelineModels {
    pub text2pose: TextToPose,
    pub refiner: FacialRefiner,
    pub renderer: PoseRenderer,
    pub schema: AttributeSchema,
}

impl PipelineModels {
    pub fn new(text2pose: TextToPose, refiner: FacialRefiner, renderer: PoseRenderer, schema: AttributeSchema) -> Result<Self> {
        if text2pose.embed_dim() != schema.total_dim() {
            return Err(Error::SchemaMismatch(format!(
                "text-to-pose model expects {}-d embeddings, schema has {}",
                text2pose.embed_dim(),
                schema.total_dim()
            )));
        }
        if let Some(id) = &text2pose.schema_id {
            if id != schema.id() {
                return Err(Error::SchemaMismatch(format!("text-to-pose model was trained with schema {id}, got {}", schema.id())));
            }
        }
        Ok(PipelineModels { text2pose, refiner, renderer, schema })
    }

    pub fn from_checkpoints(t2p: &Checkpoint, refiner: &Checkpoint, render: &Checkpoint, schema: AttributeSchema) -> Result<Self> {
        Self::new(
            TextToPose::from_checkpoint(t2p)?,
            FacialRefiner::from_checkpoint(refiner)?,
            PoseRenderer::from_checkpoint(render)?,
            schema,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Source pose given as keypoints.
    Partial,
    /// Source pose estimated from its description.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourcePose {
    Keypoints(KeypointSet),
    Text(DescriptionRecord),
}

impl SourcePose {
    pub fn mode(&self) -> InferMode {
        match self {
            SourcePose::Keypoints(_) => InferMode::Partial,
            SourcePose::Text(_) => InferMode::Full,
        }
    }
}

/// Keypoints produced from text: as extracted and after refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPose {
    pub raw: KeypointSet,
    pub refined: KeypointSet,
    pub outcome: RefineOutcome,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub image: Image,
    pub target: TextPose,
    /// Source keypoints handed to the renderer.
    pub source_pose: KeypointSet,
    /// Present in full mode only.
    pub source_text_pose: Option<TextPose>,
    /// Attention maps `1 × C × S/2^ℓ × S/2^ℓ`, finest first.
    pub attention: Vec<Tensor>,
}

fn noise_for(seed: u64, tag: &str, dim: usize) -> Vec<f32> {
    let mut rng = rng_for(seed, tag);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs the text-to-pose stage and refinement for one embedding, returning
/// keypoints in a `size × size` frame.
pub fn text_to_keypoints(models: &PipelineModels, v: &TextEmbedding, noise: &[f32], size: usize) -> Result<TextPose> {
    let hm = models.text2pose.generate(v, noise)?;
    let raw = extract_keypoints(&hm, OCCLUSION_THRESHOLD).rescaled(size, size)?;
    let (refined, outcome) = apply_refinement(&raw, &models.refiner)?;
    Ok(TextPose { raw, refined, outcome })
}

/// Renders the source person in the pose described by `target_embedding`.
pub fn infer_with_embedding(
    models: &PipelineModels,
    image: &Image,
    source: &SourcePose,
    target_embedding: &TextEmbedding,
    noise_seed: u64,
) -> Result<PipelineOutput> {
    let size = models.renderer.image_size();
    if image.width != size || image.height != size {
        return Err(Error::shape(format!("renderer works on {size}x{size} images, got {}x{}", image.width, image.height)));
    }
    let nd = models.text2pose.generator.cfg.noise_dim;
    let target = text_to_keypoints(models, target_embedding, &noise_for(noise_seed, "pipeline/target-noise", nd), size)?;
    let (source_pose, source_text_pose) = match source {
        SourcePose::Keypoints(k) => (k.rescaled(size, size)?, None),
        SourcePose::Text(rec) => {
            let v = encode_manyhot(rec, &models.schema)?;
            let tp = text_to_keypoints(models, &v, &noise_for(noise_seed, "pipeline/source-noise", nd), size)?;
            (tp.refined.clone(), Some(tp))
        }
    };
    let (out, attention) = models.renderer.render(image, &source_pose, &target.refined)?;
    Ok(PipelineOutput { image: out, target, source_pose, source_text_pose, attention })
}

pub fn infer_pipeline(
    models: &PipelineModels,
    image: &Image,
    source: &SourcePose,
    target_text: &DescriptionRecord,
    noise_seed: u64,
) -> Result<PipelineOutput> {
    let v = encode_manyhot(target_text, &models.schema)?;
    infer_with_embedding(models, image, source, &v, noise_seed)
}

/// Renders `steps` images along the straight line between the embeddings
/// of two descriptions, all with the same noise.
pub fn interpolation_demo(
    models: &PipelineModels,
    image: &Image,
    source: &SourcePose,
    start: &DescriptionRecord,
    end: &DescriptionRecord,
    steps: usize,
    noise_seed: u64,
) -> Result<Vec<PipelineOutput>> {
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let v0 = encode_manyhot(start, &models.schema)?;
    let v1 = encode_manyhot(end, &models.schema)?;
    (0..steps)
        .map(|i| {
            let v = lerp_embeddings(&v0, &v1, i as f64 / (steps - 1) as f64)?;
            infer_with_embedding(models, image, source, &v, noise_seed)
        })
        .collect()
}
