//! Procedural stick-figure dataset.
//!
//! Figures are posed by forward kinematics from a handful of joint angles,
//! rasterized with anti-aliased limbs, and described by thresholding the
//! same angles. Two poses share every identity attribute, which gives the
//! same-person pairs needed by the renderer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::pose::{normalize_facial, Joint, Keypoint, KeypointSet, NUM_JOINTS};
use crate::refiner::FACE_DIM;
use crate::render::RenderPair;
use crate::seed::rng_for;
use crate::text::{decode_bits, encode_manyhot, render_description_text, AttributeSchema, DescriptionRecord, TextEmbedding};
use crate::text2pose::T2PSample;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Arms count as raised above this shoulder elevation (degrees from hanging).
pub const ARM_RAISED_ABOVE: f64 = 100.0;
/// A non-raised arm is folded when the elbow's interior angle is below this.
pub const ELBOW_FOLDED_BELOW: f64 = 120.0;
/// A leg is folded when the knee's interior angle is below this.
pub const KNEE_FOLDED_BELOW: f64 = 150.0;

const GENDER_PATCH: usize = 4;
const FEMALE_TAG: [u8; 3] = [220, 40, 40];
const MALE_TAG: [u8; 3] = [40, 40, 220];
const BACKGROUND: [u8; 3] = [235, 235, 235];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyFacing {
    Front,
    Left,
    Right,
}

impl BodyFacing {
    pub fn option(self) -> &'static str {
        match self {
            BodyFacing::Front => "front",
            BodyFacing::Left => "left",
            BodyFacing::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadTurn {
    Straight,
    PartiallyLeft,
    PartiallyRight,
}

impl HeadTurn {
    pub fn option(self) -> &'static str {
        match self {
            HeadTurn::Straight => "straight",
            HeadTurn::PartiallyLeft => "partially left",
            HeadTurn::PartiallyRight => "partially right",
        }
    }

    /// Horizontal direction of the turn in image coordinates.
    fn sign(self) -> f64 {
        match self {
            HeadTurn::Straight => 0.0,
            HeadTurn::PartiallyLeft => -1.0,
            HeadTurn::PartiallyRight => 1.0,
        }
    }
}

/// Everything needed to pose and draw one figure. Paired arrays are
/// `[right, left]` from the figure's point of view; the figure's right side
/// is on the viewer's left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureParams {
    pub female: bool,
    pub thickness: f64,
    pub skin: [u8; 3],
    pub shirt: [u8; 3],
    pub pants: [u8; 3],
    pub hair: [u8; 3],
    /// Figure height as a fraction of the canvas.
    pub scale: f64,
    /// Horizontal offset of the neck from the canvas centre, as a fraction of the canvas.
    pub shift: f64,
    pub body: BodyFacing,
    pub head: HeadTurn,
    pub head_tilt: f64,
    /// Elevation of the upper arm, 0 hanging down, 180 straight up.
    pub shoulder: [f64; 2],
    /// Interior elbow angle, 180 fully extended.
    pub elbow: [f64; 2],
    /// Outward spread of the thigh from vertical.
    pub hip: [f64; 2],
    /// Interior knee angle, 180 fully extended.
    pub knee: [f64; 2],
}

fn color<R: Rng + ?Sized>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    std::array::from_fn(|_| rng.random_range(lo..=hi))
}

/// Identity attributes; pose fields are left neutral.
pub fn sample_identity<R: Rng + ?Sized>(rng: &mut R) -> FigureParams {
    let female = rng.random_bool(0.5);
    let tone = rng.random_range(0.55..1.0);
    let skin = [(235.0 * tone) as u8, (190.0 * tone) as u8, (150.0 * tone) as u8];
    FigureParams {
        female,
        thickness: rng.random_range(2.2..3.2),
        skin,
        shirt: color(rng, 20, 200),
        pants: color(rng, 20, 160),
        hair: color(rng, 10, 90),
        scale: rng.random_range(0.68..0.78),
        shift: 0.0,
        body: BodyFacing::Front,
        head: HeadTurn::Straight,
        head_tilt: 0.0,
        shoulder: [10.0; 2],
        elbow: [170.0; 2],
        hip: [5.0; 2],
        knee: [175.0; 2],
    }
}

/// Overwrites the pose fields of `base`, keeping its identity.
pub fn sample_pose<R: Rng + ?Sized>(base: &FigureParams, rng: &mut R) -> FigureParams {
    let mut p = base.clone();
    p.shift = rng.random_range(-0.04..0.04);
    p.body = [BodyFacing::Front, BodyFacing::Left, BodyFacing::Right][rng.random_range(0..3)];
    p.head = [HeadTurn::Straight, HeadTurn::PartiallyLeft, HeadTurn::PartiallyRight][rng.random_range(0..3)];
    p.head_tilt = rng.random_range(-15.0..15.0);
    for side in 0..2 {
        let (s, e) = match rng.random_range(0..3) {
            0 => (rng.random_range(0.0..80.0), rng.random_range(140.0..180.0)),
            1 => (rng.random_range(0.0..80.0), rng.random_range(40.0..100.0)),
            _ => (rng.random_range(120.0..170.0), rng.random_range(100.0..180.0)),
        };
        p.shoulder[side] = s;
        p.elbow[side] = e;
        if rng.random_bool(0.5) {
            p.hip[side] = rng.random_range(0.0..25.0);
            p.knee[side] = rng.random_range(160.0..180.0);
        } else {
            p.hip[side] = rng.random_range(10.0..40.0);
            p.knee[side] = rng.random_range(70.0..140.0);
        }
    }
    p
}

/// Body geometry in continuous canvas coordinates, before rounding.
struct Skeleton {
    pts: [(f64, f64); NUM_JOINTS],
    visible: [bool; NUM_JOINTS],
    head_radius: f64,
}

fn rotate((x, y): (f64, f64), deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    (x * c - y * s, x * s + y * c)
}

fn skeleton(p: &FigureParams, size: usize) -> Skeleton {
    use Joint::*;
    let s = size as f64;
    let h = p.scale * s;
    let neck = (s / 2.0 + p.shift * s, s / 2.0 - 0.23 * h);
    let side_view = p.body != BodyFacing::Front;
    let facing = match p.body {
        BodyFacing::Front => 0.0,
        BodyFacing::Left => -1.0,
        BodyFacing::Right => 1.0,
    };
    let (shoulder_w, hip_w) = if side_view { (0.10 * h, 0.08 * h) } else { (0.22 * h, 0.15 * h) };

    let mut pts = [(0.0, 0.0); NUM_JOINTS];
    let mut set = |j: Joint, v: (f64, f64)| pts[j.index()] = v;
    let turn = p.head.sign();
    let nose = (neck.0 + (0.03 * turn + 0.04 * facing) * h, neck.1 - 0.13 * h);
    set(Neck, neck);
    set(Nose, nose);
    let face = |dx: f64, dy: f64| {
        let (x, y) = rotate(((dx + 0.02 * turn) * h, dy * h), p.head_tilt);
        (nose.0 + x, nose.1 + y)
    };
    set(RightEye, face(-0.045, -0.035));
    set(LeftEye, face(0.045, -0.035));
    set(RightEar, face(-0.095, -0.01));
    set(LeftEar, face(0.095, -0.01));

    let arm_len = (0.17 * h, 0.15 * h);
    let leg_len = (0.22 * h, 0.21 * h);
    // side: -1 for the figure's right (viewer's left), +1 for its left.
    let dir = |side: f64, deg: f64| {
        let r = deg.to_radians();
        (side * r.sin(), r.cos())
    };
    let step = |from: (f64, f64), d: (f64, f64), len: f64| (from.0 + d.0 * len, from.1 + d.1 * len);
    let limbs = [
        (-1.0, 0usize, [RightShoulder, RightElbow, RightWrist], [RightHip, RightKnee, RightAnkle]),
        (1.0, 1usize, [LeftShoulder, LeftElbow, LeftWrist], [LeftHip, LeftKnee, LeftAnkle]),
    ];
    for (side, k, arm, leg) in limbs {
        let shoulder = (neck.0 + side * shoulder_w / 2.0, neck.1 + 0.02 * h);
        let upper = p.shoulder[k];
        let elbow = step(shoulder, dir(side, upper), arm_len.0);
        let wrist = step(elbow, dir(side, upper - (180.0 - p.elbow[k])), arm_len.1);
        set(arm[0], shoulder);
        set(arm[1], elbow);
        set(arm[2], wrist);

        let hip = (neck.0 + side * hip_w / 2.0, neck.1 + 0.35 * h);
        let thigh = p.hip[k];
        let knee = step(hip, dir(side, thigh), leg_len.0);
        let ankle = step(knee, dir(side, thigh - 0.6 * (180.0 - p.knee[k])), leg_len.1);
        set(leg[0], hip);
        set(leg[1], knee);
        set(leg[2], ankle);
    }

    let mut visible = [true; NUM_JOINTS];
    match p.head {
        HeadTurn::PartiallyLeft => visible[RightEar.index()] = false,
        HeadTurn::PartiallyRight => visible[LeftEar.index()] = false,
        HeadTurn::Straight => {}
    }
    Skeleton { pts, visible, head_radius: 0.1 * h }
}

/// Keypoints of the figure on a `size × size` canvas, rounded to pixel
/// centres so that heatmap rendering and extraction are exact inverses.
pub fn figure_keypoints(p: &FigureParams, size: usize) -> KeypointSet {
    let sk = skeleton(p, size);
    let max = (size - 1) as f64;
    let joints: Vec<Keypoint> = sk
        .pts
        .iter()
        .zip(sk.visible)
        .map(
            |(&(x, y), vis)| {
                if vis {
                    Keypoint::visible(x.round().clamp(0.0, max), y.round().clamp(0.0, max))
                } else {
                    Keypoint::hidden()
                }
            },
        )
        .collect();
    KeypointSet::from_vec(joints, size, size).expect("rounded keypoints lie inside the canvas")
}

/// Normalized facial vectors of `count` random figures with fully visible
/// faces, taken from the continuous geometry before pixel rounding.
pub fn facial_sets(count: usize, seed: u64) -> Vec<[f64; FACE_DIM]> {
    const SIZE: usize = 64;
    let mut rng = rng_for(seed, "synth/faces");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = sample_pose(&sample_identity(&mut rng), &mut rng);
        let sk = skeleton(&p, SIZE);
        let joints: Vec<Keypoint> =
            sk.pts.iter().zip(sk.visible).map(|(&(x, y), vis)| if vis { Keypoint::visible(x, y) } else { Keypoint::hidden() }).collect();
        let Ok(kps) = KeypointSet::from_vec(joints, SIZE, SIZE) else { continue };
        if let Ok((v, _)) = normalize_facial(&kps) {
            out.push(v);
        }
    }
    out
}

pub fn arm_option(shoulder: f64, elbow: f64) -> &'static str {
    if shoulder > ARM_RAISED_ABOVE {
        "raised"
    } else if elbow < ELBOW_FOLDED_BELOW {
        "folded"
    } else {
        "straight"
    }
}

pub fn leg_option(knee: f64) -> &'static str {
    if knee < KNEE_FOLDED_BELOW {
        "folded"
    } else {
        "straight"
    }
}

/// Description of a posed figure, validated against `schema`.
pub fn describe_figure(p: &FigureParams, kps: &KeypointSet, schema: &AttributeSchema) -> Result<DescriptionRecord> {
    let visible: Vec<&str> = Joint::ALL.iter().filter(|&&j| kps.get(j).visible).map(|j| j.name()).collect();
    let rec = DescriptionRecord::new()
        .with_choice("gender", if p.female { "woman" } else { "man" })
        .with_flags("visible", visible)
        .with_choice("head", p.head.option())
        .with_choice("body", p.body.option())
        .with_choice("right arm", arm_option(p.shoulder[0], p.elbow[0]))
        .with_choice("left arm", arm_option(p.shoulder[1], p.elbow[1]))
        .with_choice("right leg", leg_option(p.knee[0]))
        .with_choice("left leg", leg_option(p.knee[1]));
    rec.validate(schema)?;
    Ok(rec)
}

/// A random figure with its keypoints on the default 64-pixel canvas.
pub fn sample_figure(seed: u64, schema: &AttributeSchema) -> Result<(FigureParams, KeypointSet, DescriptionRecord)> {
    let mut rng = rng_for(seed, "synth/figure");
    let identity = sample_identity(&mut rng);
    let p = sample_pose(&identity, &mut rng);
    let kps = figure_keypoints(&p, DEFAULT_IMAGE_SIZE);
    let rec = describe_figure(&p, &kps, schema)?;
    Ok((p, kps, rec))
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

enum Shape {
    Segment((f64, f64), (f64, f64), f64),
    Disc((f64, f64), f64),
    Quad([(f64, f64); 4]),
}

impl Shape {
    /// Signed distance to the shape boundary, negative inside.
    fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Segment(a, b, w) => segment_distance(x, y, a, b) - w / 2.0,
            Shape::Disc(c, r) => ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() - r,
            Shape::Quad(q) => {
                let edge = (0..4).map(|i| segment_distance(x, y, q[i], q[(i + 1) % 4])).fold(f64::INFINITY, f64::min);
                let mut inside = false;
                for i in 0..4 {
                    let (a, b) = (q[i], q[(i + 1) % 4]);
                    if (a.1 > y) != (b.1 > y) && x < (b.0 - a.0) * (y - a.1) / (b.1 - a.1) + a.0 {
                        inside = !inside;
                    }
                }
                if inside {
                    -edge
                } else {
                    edge
                }
            }
        }
    }
}

/// Draws the figure on a `size × size` canvas. The top-left
/// `4 × 4` corner carries a gender tag.
pub fn render_figure(p: &FigureParams, size: usize) -> Result<Image> {
    if size < 32 {
        return Err(Error::Config(format!("figure canvas must be at least 32 px, got {size}")));
    }
    use Joint::*;
    let sk = skeleton(p, size);
    let at = |j: Joint| sk.pts[j.index()];
    let t = p.thickness * size as f64 / 64.0;
    let mut shapes: Vec<(Shape, [u8; 3])> = Vec::new();
    let darker = |c: [u8; 3], f: f64| c.map(|v| (v as f64 * f) as u8);
    let r = sk.head_radius;

    if p.female {
        let n = at(Nose);
        shapes.push((
            Shape::Quad([(n.0 - r * 1.1, n.1), (n.0 + r * 1.1, n.1), (n.0 + r * 1.3, n.1 + r * 2.2), (n.0 - r * 1.3, n.1 + r * 2.2)]),
            p.hair,
        ));
    }
    for (a, b, c) in [(RightHip, RightKnee, RightAnkle), (LeftHip, LeftKnee, LeftAnkle)] {
        shapes.push((Shape::Segment(at(a), at(b), t * 1.3), p.pants));
        shapes.push((Shape::Segment(at(b), at(c), t * 1.1), p.pants));
    }
    let (rs, ls, rh, lh) = (at(RightShoulder), at(LeftShoulder), at(RightHip), at(LeftHip));
    if p.female {
        let flare = 0.08 * p.scale * size as f64;
        let (rk, lk) = (at(RightKnee), at(LeftKnee));
        let hem = (rk.1 + lk.1) / 2.0 - 1.0;
        shapes.push((Shape::Quad([rh, lh, (lh.0 + flare, hem), (rh.0 - flare, hem)]), p.pants));
    }
    shapes.push((Shape::Quad([(rs.0, rs.1 - t / 2.0), (ls.0, ls.1 - t / 2.0), lh, rh]), p.shirt));
    shapes.push((Shape::Segment(at(Neck), at(Nose), t), p.skin));
    for (a, b, c) in [(RightShoulder, RightElbow, RightWrist), (LeftShoulder, LeftElbow, LeftWrist)] {
        shapes.push((Shape::Segment(at(a), at(b), t), p.shirt));
        shapes.push((Shape::Segment(at(b), at(c), t * 0.9), p.skin));
    }
    shapes.push((Shape::Disc(at(Nose), r), p.skin));
    for ear in [RightEar, LeftEar] {
        if sk.visible[ear.index()] {
            shapes.push((Shape::Disc(at(ear), r * 0.3), darker(p.skin, 0.8)));
        }
    }
    if !p.female {
        let n = at(Nose);
        shapes.push((Shape::Segment((n.0 - r * 0.7, n.1 - r * 0.8), (n.0 + r * 0.7, n.1 - r * 0.8), r * 0.5), p.hair));
    }
    for eye in [RightEye, LeftEye] {
        shapes.push((Shape::Disc(at(eye), 0.6), [20, 20, 20]));
    }

    let tag = if p.female { FEMALE_TAG } else { MALE_TAG };
    let mut data = vec![0f32; 3 * size * size];
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let mut px = BACKGROUND.map(|v| v as f64);
            if x < GENDER_PATCH && y < GENDER_PATCH {
                px = tag.map(|v| v as f64);
            } else {
                for (shape, c) in &shapes {
                    let cover = (0.5 - shape.distance(x as f64, y as f64)).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        for ch in 0..3 {
                            px[ch] += (c[ch] as f64 - px[ch]) * cover;
                        }
                    }
                }
            }
            for ch in 0..3 {
                data[ch * plane + y * size + x] = px[ch].round() as u8 as f32 / 127.5 - 1.0;
            }
        }
    }
    Image::new(size, size, data)
}

/// Gender tag painted by [`render_figure`]: `Some(true)` for female.
pub fn read_gender_tag(img: &Image) -> Option<bool> {
    if img.width < GENDER_PATCH || img.height < GENDER_PATCH {
        return None;
    }
    let plane = img.width * img.height;
    let mean = |ch: usize| {
        let mut s = 0.0;
        for y in 0..GENDER_PATCH {
            for x in 0..GENDER_PATCH {
                s += img.data[ch * plane + y * img.width + x] as f64;
            }
        }
        s / (GENDER_PATCH * GENDER_PATCH) as f64
    };
    let (r, b) = (mean(0), mean(2));
    if (r - b).abs() < 0.5 {
        None
    } else {
        Some(r > b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub identity: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub schema_id: String,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.samples.iter().filter(move |e| e.split == split).map(|e| e.id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { samples: 2200, test_samples: 200, size: DEFAULT_IMAGE_SIZE, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub id: String,
    pub image: Image,
    pub keypoints: KeypointSet,
    pub record: DescriptionRecord,
    pub embedding: TextEmbedding,
}

/// Samples generated in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub schema: AttributeSchema,
    pub samples: Vec<PoseSample>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.toml";
pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const KEYPOINTS_FILE: &str = "keypoints.csv";
pub const IMAGES_DIR: &str = "images";

/// Generates the dataset in memory. Samples `2i` and `2i + 1` show
/// identity `i`; the last identities form the test split.
pub fn generate_dataset(cfg: &SynthConfig, schema: &AttributeSchema) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.test_samples >= cfg.samples {
        return Err(Error::Config(format!("need at least one training sample ({} samples, {} test)", cfg.samples, cfg.test_samples)));
    }
    let identities = cfg.samples.div_ceil(2);
    let first_test = identities - cfg.test_samples.div_ceil(2);
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut entries = Vec::with_capacity(cfg.samples);
    for idx in 0..cfg.samples {
        let identity = idx / 2;
        let base = sample_identity(&mut rng_for(cfg.seed, &format!("synth/identity/{identity}")));
        let p = sample_pose(&base, &mut rng_for(cfg.seed, &format!("synth/pose/{idx}")));
        let keypoints = figure_keypoints(&p, cfg.size);
        let record = describe_figure(&p, &keypoints, schema)?;
        let embedding = encode_manyhot(&record, schema)?;
        let id = format!("s{idx:06}");
        let split = if identity >= first_test { Split::Test } else { Split::Train };
        entries.push(ManifestEntry { id: id.clone(), identity, split });
        samples.push(PoseSample { id, image: render_figure(&p, cfg.size)?, keypoints, record, embedding });
    }
    let manifest = DatasetManifest { seed: cfg.seed, size: cfg.size, schema_id: schema.id().to_string(), samples: entries };
    Ok(Dataset { manifest, schema: schema.clone(), samples })
}

/// Generates the dataset and writes it under `out_dir`.
pub fn build_dataset(cfg: &SynthConfig, schema: &AttributeSchema, out_dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_dataset(cfg, schema)?;
    ds.save(out_dir)?;
    Ok(ds.manifest)
}

/// Keypoint table with a header line and rows `name: [y...]: [x...]`.
pub fn keypoint_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a KeypointSet)>) -> String {
    let mut s = String::from("name:keypoints_y:keypoints_x\n");
    for (id, kps) in rows {
        s.push_str(&format_keypoint_row(id, kps));
        s.push('\n');
    }
    s
}

fn format_keypoint_row(id: &str, kps: &KeypointSet) -> String {
    let coords = |f: fn(&Keypoint) -> f64| {
        let v: Vec<String> = kps.joints().iter().map(|k| if k.visible { format!("{}", f(k)) } else { "-1".into() }).collect();
        format!("[{}]", v.join(", "))
    };
    format!("{id}.png: {}: {}", coords(|k| k.y), coords(|k| k.x))
}

fn parse_coord_list(s: &str) -> Option<Vec<f64>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner.split(',').map(|v| v.trim().parse().ok()).collect()
}

/// Reads a keypoint table with rows `name: [y...]: [x...]`, `-1` marking hidden joints.
pub fn load_keypoint_table(path: &Path, width: usize, height: usize) -> Result<HashMap<String, KeypointSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected `name: [y...]: [x...]`", n + 1));
        let mut parts = line.splitn(3, ':');
        let (name, ys, xs) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        let (ys, xs) = (parse_coord_list(ys).ok_or_else(bad)?, parse_coord_list(xs).ok_or_else(bad)?);
        if ys.len() != NUM_JOINTS || xs.len() != NUM_JOINTS {
            return Err(bad());
        }
        let joints =
            ys.iter().zip(&xs).map(|(&y, &x)| if x < 0.0 || y < 0.0 { Keypoint::hidden() } else { Keypoint::visible(x, y) }).collect();
        let id = name.trim().trim_end_matches(".png").to_string();
        out.insert(id, KeypointSet::from_vec(joints, width, height)?);
    }
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let images = out_dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut ann = String::new();
        for s in &self.samples {
            s.image.save(&images.join(format!("{}.png", s.id)))?;
            let bits: Vec<String> = s.embedding.values.iter().map(|v| format!("{}", *v as u8)).collect();
            let sentence = render_description_text(&s.record, &self.schema)?;
            writeln!(ann, "{}\t{}\t{}", s.id, bits.join(","), sentence).expect("string write");
        }
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&out_dir.join(MANIFEST_FILE), manifest + "\n")?;
        self.schema.save(&out_dir.join(SCHEMA_FILE))?;
        write_file(&out_dir.join(ANNOTATIONS_FILE), ann)?;
        let kp = keypoint_table(self.samples.iter().map(|s| (s.id.as_str(), &s.keypoints)));
        write_file(&out_dir.join(KEYPOINTS_FILE), kp)
    }

    /// Loads a dataset written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e))?;
        let schema = AttributeSchema::load(&dir.join(SCHEMA_FILE))?;
        if schema.id() != manifest.schema_id {
            return Err(Error::SchemaMismatch(format!("dataset was built with schema {}, found {}", manifest.schema_id, schema.id())));
        }
        let loaded = load_dfpass(&dir.join(ANNOTATIONS_FILE), &dir.join(IMAGES_DIR), &schema)?;
        let mut by_id: HashMap<String, PoseSample> = loaded.into_iter().map(|s| (s.id.clone(), s)).collect();
        let samples = manifest
            .samples
            .iter()
            .map(|e| by_id.remove(&e.id).ok_or_else(|| Error::format(dir, format!("sample `{}` has no annotation", e.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, schema, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&PoseSample> {
        self.samples.iter().zip(&self.manifest.samples).filter(|(_, e)| e.split == split).map(|(s, _)| s).collect()
    }

    /// `(source, target)` sample indices of same-identity pairs, both directions.
    pub fn pair_indices(&self, split: Split) -> Vec<(usize, usize)> {
        let mut by_identity: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, e) in self.manifest.samples.iter().enumerate() {
            if e.split != split {
                continue;
            }
            match by_identity.iter_mut().find(|(id, _)| *id == e.identity) {
                Some((_, v)) => v.push(i),
                None => by_identity.push((e.identity, vec![i])),
            }
        }
        let mut out = Vec::new();
        for (_, v) in by_identity {
            for &a in &v {
                for &b in &v {
                    if a != b {
                        out.push((a, b));
                    }
                }
            }
        }
        out
    }

    pub fn pairs(&self, split: Split) -> Vec<RenderPair> {
        self.pair_indices(split)
            .into_iter()
            .map(|(a, b)| {
                let (a, b) = (&self.samples[a], &self.samples[b]);
                RenderPair {
                    source: a.image.clone(),
                    source_pose: a.keypoints.clone(),
                    target: b.image.clone(),
                    target_pose: b.keypoints.clone(),
                }
            })
            .collect()
    }

    /// Heatmap/embedding pairs for the text-to-pose stage at `heatmap_size`.
    pub fn t2p_samples(&self, split: Split, heatmap_size: usize) -> Result<Vec<T2PSample>> {
        let spec = crate::pose::HeatmapSpec::scaled(heatmap_size)?;
        self.split(split)
            .into_iter()
            .map(|s| {
                let kps = s.keypoints.rescaled(heatmap_size, heatmap_size)?;
                Ok(T2PSample { heatmap: crate::pose::render_heatmaps(&kps, &spec)?, embedding: s.embedding.clone() })
            })
            .collect()
    }

    /// Normalized facial vectors of every sample whose face is fully visible.
    pub fn facial_vectors(&self, split: Split) -> Vec<[f64; FACE_DIM]> {
        self.split(split).into_iter().filter_map(|s| normalize_facial(&s.keypoints).ok().map(|(v, _)| v)).collect()
    }
}

/// Loads annotation lines `id<TAB>bits<TAB>sentence` with images from
/// `images_dir/<id>.png`. Keypoints come from a `keypoints.csv` next to the
/// annotation file when present. Lines whose vector does not decode are
/// skipped and counted.
pub fn load_dfpass(annotations: &Path, images_dir: &Path, schema: &AttributeSchema) -> Result<Vec<PoseSample>> {
    let text = fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let kp_path = annotations.with_file_name(KEYPOINTS_FILE);
    let mut table: Option<HashMap<String, KeypointSet>> = None;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or_default().trim().to_string();
        let bits = fields.next().ok_or_else(|| Error::format(annotations, format!("line {}: missing vector", n + 1)))?;
        let values: std::result::Result<Vec<f64>, _> = bits.split(',').map(|b| b.trim().parse::<f64>()).collect();
        let Ok(values) = values else {
            skipped += 1;
            continue;
        };
        if values.len() != schema.total_dim() {
            return Err(Error::SchemaMismatch(format!(
                "line {} has {} entries, schema expects {}",
                n + 1,
                values.len(),
                schema.total_dim()
            )));
        }
        let record = match decode_bits(&values, schema) {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let img_path: PathBuf = images_dir.join(format!("{id}.png"));
        let image = Image::load(&img_path)?;
        if table.is_none() && kp_path.exists() {
            table = Some(load_keypoint_table(&kp_path, image.width, image.height)?);
        }
        let keypoints = table.as_ref().and_then(|t| t.get(&id).cloned()).unwrap_or_else(|| KeypointSet::empty(image.width, image.height));
        let embedding = encode_manyhot(&record, schema)?;
        samples.push(PoseSample { id, image, keypoints, record, embedding });
    }
    if skipped > 0 {
        warn!("skipped {skipped} annotation lines with malformed vectors in {}", annotations.display());
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{extract_keypoints, render_heatmaps, HeatmapSpec, OCCLUSION_THRESHOLD};

    fn schema() -> AttributeSchema {
        AttributeSchema::default_synthetic()
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = schema();
        assert_eq!(sample_figure(0, &s).unwrap(), sample_figure(0, &s).unwrap());
        assert_ne!(sample_figure(0, &s).unwrap().0, sample_figure(1, &s).unwrap().0);
    }

    #[test]
    fn keypoints_survive_heatmap_round_trip() {
        let s = schema();
        let spec = HeatmapSpec::default();
        for seed in 0..50 {
            let (_, kps, rec) = sample_figure(seed, &s).unwrap();
            let back = extract_keypoints(&render_heatmaps(&kps, &spec).unwrap(), OCCLUSION_THRESHOLD);
            assert_eq!(back, kps);
            rec.validate(&s).unwrap();
        }
    }

    #[test]
    fn head_is_centred_on_nose() {
        let (p, kps, _) = sample_figure(7, &schema()).unwrap();
        let img = render_figure(&p, 64).unwrap();
        let nose = kps.get(Joint::Nose);
        let plane = 64 * 64;
        let px = |x: usize, y: usize| (0..3).map(|c| img.data[c * plane + y * 64 + x]).collect::<Vec<_>>();
        let skin: Vec<f32> = p.skin.iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        let (x, y) = (nose.x as usize, nose.y as usize + 1);
        let d: f32 = px(x, y).iter().zip(&skin).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 0.1);
    }

    #[test]
    fn gender_changes_the_image() {
        let (mut p, _, _) = sample_figure(3, &schema()).unwrap();
        p.female = false;
        let a = render_figure(&p, 64).unwrap();
        p.female = true;
        let b = render_figure(&p, 64).unwrap();
        assert_ne!(a, b);
        assert_eq!(read_gender_tag(&a), Some(false));
        assert_eq!(read_gender_tag(&b), Some(true));
        assert!(render_figure(&p, 16).is_err());
    }

    #[test]
    fn splits_follow_identities() {
        let ds = generate_dataset(&SynthConfig { samples: 10, test_samples: 4, size: 64, seed: 1 }, &schema()).unwrap();
        let test: Vec<_> = ds.manifest.ids(Split::Test).collect();
        assert_eq!(test, vec!["s000006", "s000007", "s000008", "s000009"]);
        assert_eq!(ds.pairs(Split::Train).len(), 6);
        assert_eq!(ds.split(Split::Train).len(), 6);
    }
}
