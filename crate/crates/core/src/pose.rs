//! Keypoint sets, Gaussian heatmaps and the nose-centred facial frame.

use serde::{Deserialize, Serialize};
use tips_tensor::Tensor;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 18;

/// Body joints in COCO-18 order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Joint {
    Nose = 0,
    Neck,
    RightShoulder,
    RightElbow,
    RightWrist,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightHip,
    RightKnee,
    RightAnkle,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    RightEye,
    LeftEye,
    RightEar,
    LeftEar,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Nose,
        Joint::Neck,
        Joint::RightShoulder,
        Joint::RightElbow,
        Joint::RightWrist,
        Joint::LeftShoulder,
        Joint::LeftElbow,
        Joint::LeftWrist,
        Joint::RightHip,
        Joint::RightKnee,
        Joint::RightAnkle,
        Joint::LeftHip,
        Joint::LeftKnee,
        Joint::LeftAnkle,
        Joint::RightEye,
        Joint::LeftEye,
        Joint::RightEar,
        Joint::LeftEar,
    ];

    /// The five facial joints, in the order used by the refiner's 10-vector.
    pub const FACIAL: [Joint; 5] = [Joint::Nose, Joint::RightEye, Joint::LeftEye, Joint::RightEar, Joint::LeftEar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }

    pub fn is_facial(self) -> bool {
        Joint::FACIAL.contains(&self)
    }
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "right shoulder",
    "right elbow",
    "right wrist",
    "left shoulder",
    "left elbow",
    "left wrist",
    "right hip",
    "right knee",
    "right ankle",
    "left hip",
    "left knee",
    "left ankle",
    "right eye",
    "left eye",
    "right ear",
    "left ear",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Keypoint { x, y, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint { x: 0.0, y: 0.0, visible: false }
    }
}

/// 18 joints with pixel coordinates in a `width × height` frame.
///
/// Visible joints always lie inside the frame; coordinates of hidden joints
/// carry no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    joints: Vec<Keypoint>,
    width: usize,
    height: usize,
}

impl KeypointSet {
    pub fn new(joints: [Keypoint; NUM_JOINTS], width: usize, height: usize) -> Result<Self> {
        Self::from_vec(joints.to_vec(), width, height)
    }

    pub fn from_vec(joints: Vec<Keypoint>, width: usize, height: usize) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::InvalidKeypoints(format!("expected {NUM_JOINTS} joints, got {}", joints.len())));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidKeypoints("empty frame".into()));
        }
        for (j, kp) in joints.iter().enumerate() {
            if kp.visible && !(kp.x >= 0.0 && kp.x < width as f64 && kp.y >= 0.0 && kp.y < height as f64) {
                return Err(Error::InvalidKeypoints(format!(
                    "{} at ({}, {}) lies outside the {width}x{height} frame",
                    JOINT_NAMES[j], kp.x, kp.y
                )));
            }
        }
        Ok(KeypointSet { joints, width, height })
    }

    /// All joints hidden.
    pub fn empty(width: usize, height: usize) -> Self {
        KeypointSet { joints: vec![Keypoint::hidden(); NUM_JOINTS], width, height }
    }

    pub fn joints(&self) -> &[Keypoint] {
        &self.joints
    }

    pub fn get(&self, joint: Joint) -> Keypoint {
        self.joints[joint.index()]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_visible(&self) -> usize {
        self.joints.iter().filter(|k| k.visible).count()
    }

    /// Copy with one joint replaced; the result is validated.
    pub fn with_joint(&self, joint: Joint, kp: Keypoint) -> Result<Self> {
        let mut joints = self.joints.clone();
        joints[joint.index()] = kp;
        Self::from_vec(joints, self.width, self.height)
    }

    /// Maps coordinates linearly into a `width × height` frame.
    pub fn rescaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let joints = self.joints.iter().map(|k| Keypoint { x: k.x * sx, y: k.y * sy, visible: k.visible }).collect();
        Self::from_vec(joints, width, height)
    }
}

/// Resolution and spread of rendered heatmaps. Channels are fixed at 18 and
/// the Gaussian peak amplitude at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
}

impl HeatmapSpec {
    pub const DEFAULT_SIGMA: f64 = 1.5;
    pub const DEFAULT_SIZE: usize = 64;

    pub fn new(height: usize, width: usize, sigma: f64) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::shape(format!("heatmap must be at least 8x8, got {height}x{width}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::shape(format!("heatmap sigma must be positive, got {sigma}")));
        }
        Ok(HeatmapSpec { height, width, sigma })
    }

    /// Square map whose sigma scales with the side length, keeping the
    /// spread equal to [`Self::DEFAULT_SIGMA`] at 64 pixels.
    pub fn scaled(size: usize) -> Result<Self> {
        Self::new(size, size, Self::DEFAULT_SIGMA * size as f64 / Self::DEFAULT_SIZE as f64)
    }
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec { height: 64, width: 64, sigma: Self::DEFAULT_SIGMA }
    }
}

/// 18 × height × width activations in `[0, 1]`. An all-zero channel is a
/// hidden joint.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTensor {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl HeatmapTensor {
    pub fn from_values(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if values.len() != NUM_JOINTS * height * width {
            return Err(Error::shape(format!(
                "heatmap needs {} values for 18x{height}x{width}, got {}",
                NUM_JOINTS * height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(HeatmapTensor { height, width, values })
    }

    /// Maps a generator output in `(-1, 1)` to `[0, 1]` via `(x + 1) / 2`.
    pub fn from_signed(values: &[f32], height: usize, width: usize) -> Result<Self> {
        let mapped = values.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Self::from_values(mapped, height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[j * n..(j + 1) * n]
    }

    /// Values mapped to `[-1, 1]` via `2x - 1`, the range the critic sees.
    pub fn to_signed(&self) -> Vec<f32> {
        self.values.iter().map(|&v| 2.0 * v - 1.0).collect()
    }

    /// `1 × 18 × H × W` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone(), &[1, NUM_JOINTS, self.height, self.width])
    }

    /// Multiplies one channel by `factor`, clamping into `[0, 1]`.
    pub fn scale_channel(&mut self, j: usize, factor: f32) {
        let n = self.height * self.width;
        for v in &mut self.values[j * n..(j + 1) * n] {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
    }
}

/// Renders one Gaussian per visible joint at the spec's resolution.
///
/// Keypoints are rescaled from their own frame first. Channel `j` holds
/// `exp(-((x - x_j)^2 + (y - y_j)^2) / (2 sigma^2))` sampled at integer
/// pixel positions.
pub fn render_heatmaps(kps: &KeypointSet, spec: &HeatmapSpec) -> Result<HeatmapTensor> {
    let spec = HeatmapSpec::new(spec.height, spec.width, spec.sigma)?;
    let (h, w) = (spec.height, spec.width);
    let sx = w as f64 / kps.width() as f64;
    let sy = h as f64 / kps.height() as f64;
    let inv_two_var = 1.0 / (2.0 * spec.sigma * spec.sigma);
    let mut values = vec![0f32; NUM_JOINTS * h * w];
    for (j, kp) in kps.joints().iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let (cx, cy) = (kp.x * sx, kp.y * sy);
        if !(cx >= 0.0 && cx < w as f64 && cy >= 0.0 && cy < h as f64) {
            return Err(Error::InvalidKeypoints(format!("{} maps to ({cx}, {cy}), outside the {w}x{h} heatmap", JOINT_NAMES[j])));
        }
        let plane = &mut values[j * h * w..(j + 1) * h * w];
        let gx: Vec<f64> = (0..w).map(|x| (-(x as f64 - cx).powi(2) * inv_two_var).exp()).collect();
        for y in 0..h {
            let gy = (-(y as f64 - cy).powi(2) * inv_two_var).exp();
            for x in 0..w {
                plane[y * w + x] = ((gy * gx[x]) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(HeatmapTensor { height: h, width: w, values })
}

pub const OCCLUSION_THRESHOLD: f32 = 0.2;

/// Takes each channel's maximum activation as the joint location.
///
/// A joint whose maximum is below `threshold` is hidden. Equal maxima
/// resolve to the lowest row-major index. Coordinates are in the heatmap's
/// own frame.
pub fn extract_keypoints(hm: &HeatmapTensor, threshold: f32) -> KeypointSet {
    let (h, w) = (hm.height, hm.width);
    let joints = (0..NUM_JOINTS)
        .map(|j| {
            let ch = hm.channel(j);
            let (mut best, mut at) = (f32::NEG_INFINITY, 0usize);
            for (i, &v) in ch.iter().enumerate() {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            if best >= threshold {
                Keypoint::visible((at % w) as f64, (at / w) as f64)
            } else {
                Keypoint::hidden()
            }
        })
        .collect();
    KeypointSet { joints, width: w, height: h }
}

/// Nose position and half-span of the normalized facial frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacialNormParams {
    pub nose_origin: (f64, f64),
    pub scale: f64,
}

/// Moves the nose to the origin and divides by the largest absolute offset,
/// so the five facial joints fit in `[-1, 1]^2`.
///
/// Returns the flattened `(x, y)` pairs in [`Joint::FACIAL`] order.
pub fn normalize_facial(kps: &KeypointSet) -> Result<([f64; 10], FacialNormParams)> {
    let missing: Vec<&str> = Joint::FACIAL.iter().filter(|j| !kps.get(**j).visible).map(|j| j.name()).collect();
    if !missing.is_empty() {
        return Err(Error::RefinementInapplicable(format!("hidden facial joints: {}", missing.join(", "))));
    }
    let nose = kps.get(Joint::Nose);
    let mut offsets = [0f64; 10];
    for (i, j) in Joint::FACIAL.iter().enumerate() {
        let kp = kps.get(*j);
        offsets[2 * i] = kp.x - nose.x;
        offsets[2 * i + 1] = kp.y - nose.y;
    }
    let scale = offsets.iter().fold(0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateFace);
    }
    let vec10 = offsets.map(|v| v / scale);
    Ok((vec10, FacialNormParams { nose_origin: (nose.x, nose.y), scale }))
}

/// Inverse of [`normalize_facial`]: `coord = v * scale + nose`.
pub fn denormalize_facial(vec10: &[f64; 10], params: &FacialNormParams) -> [(f64, f64); 5] {
    let (nx, ny) = params.nose_origin;
    std::array::from_fn(|i| (vec10[2 * i] * params.scale + nx, vec10[2 * i + 1] * params.scale + ny))
}
