//! Synthetic multi-modal panoramas, on-disk dataset manifests, dataset
//! splits, and parameter/MAC accounting.
//!
//! The generator ray-casts a closed rectangular room with boxes and
//! cylinders standing on the floor, so color, metric depth, analytic
//! normals, HHA, and labels are mutually consistent by construction.
//! Object centers fall in two distance bands around the camera; with the
//! texture-ambiguity flag on, the two object classes share one color
//! distribution and can be told apart only through geometry.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    hha_encode, ray_unchecked, read_depth_png, read_labels_png, read_normals_png, read_rgb_png,
    resize_erp, write_depth_png, write_labels_png, write_normals_png, write_rgb_png,
    write_unit_rgb8, CameraPose, ErpImage, LabelMap, ModalityStack, IGNORE_LABEL,
};
use crate::model::ModelConfig;
use crate::train::mix_seed;
use crate::{CoreError, Result};

/// One named training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub stack: ModalityStack,
}

/// Object centers are drawn from one of these two horizontal distance
/// bands (meters from the camera axis). The gap between the bands keeps
/// the depth separation clean even across object extents.
const NEAR_BAND: [f64; 2] = [1.0, 1.9];
const FAR_BAND: [f64; 2] = [2.7, 3.6];

/// Rooms must leave space between the farthest object center and the
/// walls; see [`SynthSpec::validate`].
const MIN_HALF_EXTENT: f64 = 3.9;

/// Seed salts keep the texture, geometry, and per-scene streams disjoint.
const TEXTURE_SALT: u64 = 0x7465_7874_7572_6531;
const SCENE_SALT: u64 = 0x7363_656e_6553_616c;

/// Recipe for one synthetic scene (or, via [`synthesize_dataset`], a whole
/// dataset sharing its per-class textures).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Panorama height in pixels; the width is always twice this.
    pub height: usize,
    pub num_classes: usize,
    /// Range the room's half extent is drawn from, per horizontal axis (m).
    pub room_half_extent: [f64; 2],
    /// Range of floor-to-ceiling heights (m).
    pub room_height: [f64; 2],
    /// Range of camera heights above the floor (m).
    pub camera_height: [f64; 2],
    /// Inclusive range of object counts per scene.
    pub object_count: [usize; 2],
    /// With four classes, gives both object classes one RGB texture.
    pub texture_ambiguity: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            height: 64,
            num_classes: 4,
            room_half_extent: [3.9, 4.5],
            room_height: [2.6, 3.2],
            camera_height: [1.2, 1.8],
            object_count: [4, 7],
            texture_ambiguity: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "SynthSpec::validate";
        if self.height < 32 || self.height % 16 != 0 {
            return Err(CoreError::invalid(
                OP,
                format!(
                    "height must be at least 32 and divisible by 16, got {}",
                    self.height
                ),
            ));
        }
        if !(2..=4).contains(&self.num_classes) {
            return Err(CoreError::invalid(
                OP,
                format!(
                    "the scene recipe produces between 2 and 4 classes, got {}",
                    self.num_classes
                ),
            ));
        }
        for (name, range) in [
            ("room_half_extent", self.room_half_extent),
            ("room_height", self.room_height),
            ("camera_height", self.camera_height),
        ] {
            if !(range[0] > 0.0 && range[0] <= range[1] && range[1].is_finite()) {
                return Err(CoreError::invalid(
                    OP,
                    format!("{name} must be a positive range, got {range:?}"),
                ));
            }
        }
        if self.room_half_extent[0] < MIN_HALF_EXTENT {
            return Err(CoreError::invalid(
                OP,
                format!(
                    "room half extent below {MIN_HALF_EXTENT} m leaves no space \
                     between far objects and the walls, got {}",
                    self.room_half_extent[0]
                ),
            ));
        }
        if self.object_count[0] < 1 || self.object_count[0] > self.object_count[1] {
            return Err(CoreError::invalid(
                OP,
                format!("object_count must be a nonempty range, got {:?}", self.object_count),
            ));
        }
        if self.num_classes == 4 && self.object_count[0] < 2 {
            return Err(CoreError::invalid(
                OP,
                "four classes need at least 2 objects so both distance bands appear",
            ));
        }
        if self.texture_ambiguity && self.num_classes != 4 {
            return Err(CoreError::invalid(
                OP,
                format!(
                    "texture ambiguity pairs the two object classes and needs \
                     num_classes = 4, got {}",
                    self.num_classes
                ),
            ));
        }
        Ok(())
    }
}

/// Human-readable names for the recipe's classes, indexable by label value.
pub fn class_names(num_classes: usize) -> Result<Vec<String>> {
    let names: &[&str] = match num_classes {
        2 => &["structure", "object"],
        3 => &["floor", "wall", "object"],
        4 => &["floor", "wall", "near-object", "far-object"],
        _ => {
            return Err(CoreError::invalid(
                "class_names",
                format!("the scene recipe produces between 2 and 4 classes, got {num_classes}"),
            ))
        }
    };
    Ok(names.iter().map(|s| s.to_string()).collect())
}

/// Flat color plus per-pixel hash noise; equality of two classes' textures
/// makes their RGB distributions identical by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTexture {
    pub base: [f64; 3],
    pub amplitude: f64,
    pub noise_stream: u64,
}

/// Splitmix finalizer mapped to [0, 1); the per-pixel noise source.
fn hash01(stream: u64, key: u64) -> f64 {
    let mut z = stream.wrapping_add(key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Per-class textures derived from the spec's seed alone, so every scene
/// of a dataset shares them. Base colors are redrawn until pairwise well
/// separated; with texture ambiguity on, the far-object class then copies
/// the near-object texture verbatim.
pub fn class_textures(spec: &SynthSpec) -> Result<Vec<ClassTexture>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TEXTURE_SALT);
    let n = spec.num_classes;
    let mut bases: Vec<[f64; 3]>;
    loop {
        bases = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(0.15..0.85),
                ]
            })
            .collect();
        let separated = (0..n).all(|i| {
            (0..i).all(|j| {
                (0..3)
                    .map(|c| (bases[i][c] - bases[j][c]).abs())
                    .fold(0.0f64, f64::max)
                    >= 0.25
            })
        });
        if separated {
            break;
        }
    }
    let mut textures: Vec<ClassTexture> = bases
        .into_iter()
        .map(|base| ClassTexture {
            base,
            amplitude: 0.08,
            noise_stream: rng.gen(),
        })
        .collect();
    if spec.texture_ambiguity {
        textures[3] = textures[2];
    }
    Ok(textures)
}

/// Which scene surface a ray hit; merged down to the label set by
/// [`class_of`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SurfaceKind {
    Floor,
    Wall,
    NearObject,
    FarObject,
}

fn class_of(kind: SurfaceKind, num_classes: usize) -> u8 {
    use SurfaceKind::*;
    match (num_classes, kind) {
        (2, Floor | Wall) => 0,
        (2, NearObject | FarObject) => 1,
        (3, Floor) => 0,
        (3, Wall) => 1,
        (3, NearObject | FarObject) => 2,
        (_, Floor) => 0,
        (_, Wall) => 1,
        (_, NearObject) => 2,
        (_, FarObject) => 3,
    }
}

const RAY_EPS: f64 = 1e-9;

struct Hit {
    t: f64,
    normal: [f64; 3],
    kind: SurfaceKind,
}

/// Exit point of a ray that starts strictly inside the room box. Exiting
/// through the bottom face is the floor; every other face is wall-like
/// (the ceiling shares the wall class).
fn room_exit(o: &[f64; 3], d: &[f64; 3], half: [f64; 2], room_h: f64) -> Hit {
    let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, room_h)];
    let mut best_t = f64::INFINITY;
    let mut axis = 2;
    let mut sign = 1.0;
    for a in 0..3 {
        if d[a].abs() < RAY_EPS {
            continue;
        }
        let b = if d[a] > 0.0 { bounds[a].1 } else { bounds[a].0 };
        let t = (b - o[a]) / d[a];
        if t > RAY_EPS && t < best_t {
            best_t = t;
            axis = a;
            sign = d[a].signum();
        }
    }
    let mut normal = [0.0; 3];
    normal[axis] = -sign;
    let kind = if axis == 2 && sign < 0.0 {
        SurfaceKind::Floor
    } else {
        SurfaceKind::Wall
    };
    Hit {
        t: best_t,
        normal,
        kind,
    }
}

enum Shape {
    /// Axis-aligned box given by its two corners.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder standing on the floor.
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

struct SceneObject {
    shape: Shape,
    kind: SurfaceKind,
}

/// Nearest intersection with an object, for rays starting outside it.
fn object_hit(o: &[f64; 3], d: &[f64; 3], obj: &SceneObject) -> Option<Hit> {
    let (t, normal) = match &obj.shape {
        Shape::Box { min, max } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut enter_axis = 0;
            for a in 0..3 {
                if d[a].abs() < RAY_EPS {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (min[a] - o[a]) / d[a];
                let mut t1 = (max[a] - o[a]) / d[a];
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    enter_axis = a;
                }
                t_exit = t_exit.min(t1);
                if t_enter > t_exit {
                    return None;
                }
            }
            if t_enter <= RAY_EPS {
                return None;
            }
            let mut normal = [0.0; 3];
            normal[enter_axis] = -d[enter_axis].signum();
            (t_enter, normal)
        }
        Shape::Cylinder { center, radius, height } => {
            let ox = o[0] - center[0];
            let oy = o[1] - center[1];
            let a = d[0] * d[0] + d[1] * d[1];
            // Entry interval through the infinite cylinder side.
            let (s0, s1) = if a < RAY_EPS * RAY_EPS {
                if ox * ox + oy * oy > radius * radius {
                    return None;
                }
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                let b = 2.0 * (ox * d[0] + oy * d[1]);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a))
            };
            // Entry interval through the z slab [0, height].
            let (z0, z1) = if d[2].abs() < RAY_EPS {
                if o[2] < 0.0 || o[2] > *height {
                    return None;
                }
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                let t0 = (0.0 - o[2]) / d[2];
                let t1 = (*height - o[2]) / d[2];
                (t0.min(t1), t0.max(t1))
            };
            let t_enter = s0.max(z0);
            let t_exit = s1.min(z1);
            if t_enter > t_exit || t_enter <= RAY_EPS {
                return None;
            }
            let normal = if s0 >= z0 {
                let px = ox + t_enter * d[0];
                let py = oy + t_enter * d[1];
                let len = (px * px + py * py).sqrt();
                [px / len, py / len, 0.0]
            } else {
                [0.0, 0.0, -d[2].signum()]
            };
            (t_enter, normal)
        }
    };
    Some(Hit {
        t,
        normal,
        kind: obj.kind,
    })
}

struct SceneLayout {
    half: [f64; 2],
    room_h: f64,
    cam_h: f64,
    objects: Vec<SceneObject>,
}

/// Draws the room, the camera, and the objects. Both distance bands are
/// guaranteed to appear whenever at least two objects are drawn.
fn draw_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<SceneLayout> {
    let range = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..r[1])
        }
    };
    let half = [
        range(rng, spec.room_half_extent),
        range(rng, spec.room_half_extent),
    ];
    let room_h = range(rng, spec.room_height);
    let cam_h = range(rng, spec.camera_height);
    if cam_h <= 0.0 || cam_h >= room_h {
        return Err(CoreError::invalid(
            "synth_scene",
            format!(
                "camera at height {cam_h:.2} m is outside the {room_h:.2} m tall room"
            ),
        ));
    }
    let count = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
    let mut objects = Vec::with_capacity(count);
    for i in 0..count {
        let near = match i {
            0 => true,
            1 => false,
            _ => rng.gen_bool(0.5),
        };
        let band = if near { NEAR_BAND } else { FAR_BAND };
        let dist = range(rng, band);
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let cx = dist * azimuth.cos();
        let cy = dist * azimuth.sin();
        // Objects stay clear of the walls; validation keeps slack >= 0.25.
        let slack = (half[0] - cx.abs()).min(half[1] - cy.abs()) - 0.05;
        let kind = if near {
            SurfaceKind::NearObject
        } else {
            SurfaceKind::FarObject
        };
        let shape = if rng.gen_bool(0.5) {
            let ex = range(rng, [0.2, slack.min(0.55)]);
            let ey = range(rng, [0.2, slack.min(0.55)]);
            let h = rng.gen_range(0.5..1.6);
            Shape::Box {
                min: [cx - ex, cy - ey, 0.0],
                max: [cx + ex, cy + ey, h],
            }
        } else {
            let radius = range(rng, [0.2, slack.min(0.5)]);
            let h = rng.gen_range(0.5..1.6);
            Shape::Cylinder {
                center: [cx, cy],
                radius,
                height: h,
            }
        };
        objects.push(SceneObject { shape, kind });
    }
    Ok(SceneLayout {
        half,
        room_h,
        cam_h,
        objects,
    })
}

/// Ray-casts one scene with explicit textures; [`synthesize_dataset`] uses
/// this to share textures across scenes while varying geometry seeds.
pub fn synth_scene_textured(
    spec: &SynthSpec,
    textures: &[ClassTexture],
) -> Result<ModalityStack> {
    spec.validate()?;
    if textures.len() != spec.num_classes {
        return Err(CoreError::mismatch(
            "synth_scene",
            format!(
                "{} textures for {} classes",
                textures.len(),
                spec.num_classes
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = draw_layout(spec, &mut rng)?;

    let (h, w) = (spec.height, 2 * spec.height);
    let mut rgb = ErpImage::new(w, h, 3)?;
    let mut depth = ErpImage::new(w, h, 1)?;
    let mut normal = ErpImage::new(w, h, 3)?;
    let mut labels = LabelMap::new(w, h)?;
    let origin = [0.0, 0.0, layout.cam_h];

    for v in 0..h {
        for u in 0..w {
            let d = ray_unchecked(u as f64, v as f64, w, h);
            let mut hit = room_exit(&origin, &d, layout.half, layout.room_h);
            for obj in &layout.objects {
                if let Some(oh) = object_hit(&origin, &d, obj) {
                    if oh.t < hit.t {
                        hit = oh;
                    }
                }
            }
            let class = class_of(hit.kind, spec.num_classes);
            let tex = &textures[class as usize];
            let key = ((v * w + u) * 3) as u64;
            for c in 0..3 {
                let noise = hash01(tex.noise_stream, key + c as u64) - 0.5;
                let value = (tex.base[c] + tex.amplitude * noise).clamp(0.0, 1.0);
                rgb.set(c, v, u, value as f32);
            }
            depth.set(0, v, u, hit.t as f32);
            for c in 0..3 {
                normal.set(c, v, u, hit.normal[c] as f32);
            }
            labels.set(v, u, class);
        }
    }

    let pose = CameraPose::upright(layout.cam_h)?;
    let hha = hha_encode(&depth, &pose, &normal)?;
    ModalityStack::new(rgb, depth, normal, Some(hha), labels)
}

/// Ray-casts one scene, deriving textures from the spec's own seed.
/// Identical specs produce bit-identical stacks.
pub fn synth_scene(spec: &SynthSpec) -> Result<ModalityStack> {
    let textures = class_textures(spec)?;
    synth_scene_textured(spec, &textures)
}

/// Split tag carried by every manifest record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::invalid(
                "Split::from_str",
                format!("unknown split {other:?}, expected train, val, or test"),
            )),
        }
    }
}

/// File paths of one scene, relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub rgb: String,
    pub depth: String,
    pub normal: String,
    pub hha: String,
    pub labels: String,
}

/// On-disk dataset index. Loading validates that every referenced file
/// exists, so a manifest in hand means the data is complete.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub records: Vec<SceneRecord>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        const OP: &str = "Manifest::load";
        if self.num_classes < 2 || self.num_classes as u32 >= u32::from(IGNORE_LABEL) {
            return Err(CoreError::invalid(
                OP,
                format!(
                    "num_classes must be in [2, {}], got {}",
                    IGNORE_LABEL as u32 - 1,
                    self.num_classes
                ),
            ));
        }
        if self.class_names.len() != self.num_classes {
            return Err(CoreError::mismatch(
                OP,
                format!(
                    "{} class names for {} classes",
                    self.class_names.len(),
                    self.num_classes
                ),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for record in &self.records {
            if !seen.insert(record.scene_id.as_str()) {
                return Err(CoreError::invalid(
                    OP,
                    format!("duplicate scene_id {:?}", record.scene_id),
                ));
            }
            for rel in [
                &record.rgb,
                &record.depth,
                &record.normal,
                &record.hha,
                &record.labels,
            ] {
                let full = self.root.join(rel);
                if !full.is_file() {
                    return Err(CoreError::io(
                        full,
                        std::io::Error::new(
                            std::io::ErrorKind::NotFound,
                            "file referenced by the manifest is missing",
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Directory that relative record paths resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split_records(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Decodes one record's PNG stack, validates it, and resizes every
/// modality to `input_height` (width twice that).
pub fn load_sample(manifest: &Manifest, index: usize, input_height: usize) -> Result<Sample> {
    const OP: &str = "load_sample";
    let record = manifest.records.get(index).ok_or_else(|| {
        CoreError::invalid(
            OP,
            format!(
                "index {index} out of range for {} records",
                manifest.records.len()
            ),
        )
    })?;
    let root = &manifest.root;
    let rgb = read_rgb_png(&root.join(&record.rgb))?;
    let depth = read_depth_png(&root.join(&record.depth))?;
    let normal = read_normals_png(&root.join(&record.normal))?;
    let hha = read_rgb_png(&root.join(&record.hha))?;
    let labels = read_labels_png(&root.join(&record.labels))?;
    for &value in labels.data() {
        if value != IGNORE_LABEL && value as usize >= manifest.num_classes {
            return Err(CoreError::image(
                root.join(&record.labels),
                format!(
                    "label {value} outside the {} classes (ignore is {IGNORE_LABEL})",
                    manifest.num_classes
                ),
            ));
        }
    }
    let stack = ModalityStack::new(rgb, depth, normal, Some(hha), labels)?;
    let stack = resize_erp(&stack, input_height, 2 * input_height)?;
    Ok(Sample {
        name: record.scene_id.clone(),
        stack,
    })
}

/// Loads every record carrying the given split tag, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split, input_height: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (index, record) in manifest.records.iter().enumerate() {
        if record.split == split {
            samples.push(load_sample(manifest, index, input_height)?);
        }
    }
    Ok(samples)
}

/// Scene-level split produced by [`make_splits`] or the fixture lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, scene_id: &str) -> Option<Split> {
        if self.train.iter().any(|s| s == scene_id) {
            Some(Split::Train)
        } else if self.val.iter().any(|s| s == scene_id) {
            Some(Split::Val)
        } else if self.test.iter().any(|s| s == scene_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle followed by a contiguous partition. Val and test sizes
/// are round(ratio · n); train takes the remainder, so small inputs may
/// leave val or test empty. Splitting is by scene, never by image.
pub fn make_splits(
    scene_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    const OP: &str = "make_splits";
    if scene_ids.len() < 3 {
        return Err(CoreError::invalid(
            OP,
            format!("need at least 3 scenes, got {}", scene_ids.len()),
        ));
    }
    let unique: std::collections::BTreeSet<&str> =
        scene_ids.iter().map(String::as_str).collect();
    if unique.len() != scene_ids.len() {
        return Err(CoreError::invalid(OP, "scene ids contain duplicates"));
    }
    let (r_train, r_val, r_test) = ratios;
    if !(r_train > 0.0 && r_val >= 0.0 && r_test >= 0.0)
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(CoreError::invalid(
            OP,
            format!("ratios must be nonnegative and sum to 1, got {ratios:?}"),
        ));
    }
    let n = scene_ids.len();
    let val_n = (r_val * n as f64).round() as usize;
    let test_n = (r_test * n as f64).round() as usize;
    if val_n + test_n >= n {
        return Err(CoreError::invalid(
            OP,
            format!("ratios leave no training scenes for {n} inputs"),
        ));
    }
    let train_n = n - val_n - test_n;

    let mut shuffled = scene_ids.to_vec();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_start = train_n;
    let test_start = train_n + val_n;
    Ok(SplitAssignment {
        train: shuffled[..val_start].to_vec(),
        val: shuffled[val_start..test_start].to_vec(),
        test: shuffled[test_start..].to_vec(),
    })
}

/// Generates `scene_count` scenes sharing one texture set, writes the PNG
/// stacks under `out_dir/<scene_id>/`, assigns 80-10-10 splits, and writes
/// `manifest.json`. Returns the loaded-equivalent manifest.
pub fn synthesize_dataset(
    spec: &SynthSpec,
    scene_count: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    const OP: &str = "synthesize_dataset";
    spec.validate()?;
    if scene_count < 3 {
        return Err(CoreError::invalid(
            OP,
            format!("need at least 3 scenes to form splits, got {scene_count}"),
        ));
    }
    let textures = class_textures(spec)?;
    let ids: Vec<String> = (0..scene_count).map(|i| format!("scene_{i:04}")).collect();
    let assignment = make_splits(&ids, (0.8, 0.1, 0.1), spec.seed)?;

    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut records = Vec::with_capacity(scene_count);
    for (i, id) in ids.iter().enumerate() {
        let mut scene_spec = spec.clone();
        scene_spec.seed = mix_seed(spec.seed ^ SCENE_SALT, 0, i as u64);
        let stack = synth_scene_textured(&scene_spec, &textures)?;

        let scene_dir = out_dir.join(id);
        fs::create_dir_all(&scene_dir).map_err(|e| CoreError::io(&scene_dir, e))?;
        write_rgb_png(&scene_dir.join("rgb.png"), &stack.rgb)?;
        write_depth_png(&scene_dir.join("depth.png"), &stack.depth)?;
        write_normals_png(&scene_dir.join("normal.png"), &stack.normal)?;
        let hha = stack.hha.as_ref().expect("generator always fills hha");
        write_unit_rgb8(&scene_dir.join("hha.png"), hha)?;
        write_labels_png(&scene_dir.join("labels.png"), &stack.labels)?;

        let split = assignment
            .split_of(id)
            .expect("make_splits covers every input id");
        records.push(SceneRecord {
            scene_id: id.clone(),
            split,
            rgb: format!("{id}/rgb.png"),
            depth: format!("{id}/depth.png"),
            normal: format!("{id}/normal.png"),
            hha: format!("{id}/hha.png"),
            labels: format!("{id}/labels.png"),
        });
    }

    let manifest = Manifest {
        num_classes: spec.num_classes,
        class_names: class_names(spec.num_classes)?,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Parameter and multiply-accumulate counts for one forward pass at batch
/// size 1. FLOPs use the stated 1 MAC = 2 FLOPs convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    /// Input extents the MACs were counted at.
    pub input: String,
    pub params: u64,
    pub macs: u128,
    pub flops: u128,
    pub note: String,
}

/// Builds the model once and sums its checkpoint manifest for parameters;
/// MACs come from closed-form per-layer formulas.
pub fn count_cost(config: &ModelConfig, input_h: usize, input_w: usize) -> Result<CostReport> {
    let model = crate::model::Model::<f32>::new(config.clone(), 0)?;
    let params = model
        .store()
        .manifest()
        .iter()
        .map(|entry| entry.shape.iter().product::<usize>() as u64)
        .sum();
    let macs = model.count_macs(input_h, input_w)?;
    Ok(CostReport {
        input: format!("@ {input_h}x{input_w}x3"),
        params,
        macs,
        flops: 2 * macs,
        note: "1 MAC = 2 FLOPs".to_string(),
    })
}

/// Split identities for two public panoramic datasets, recorded verbatim
/// from their published segmentation protocols so runs on the original
/// data can reproduce the same partitions.
pub mod fixtures {
    use super::SplitAssignment;
    use crate::{CoreError, Result};

    /// Building ids held out for validation in the published Matterport3D
    /// panoramic segmentation split (80-10-10 over 90 buildings).
    pub const MATTERPORT_EVAL_BUILDINGS: [&str; 11] = [
        "UwV83HsGsw3",
        "X7HyMhZNoso",
        "Z6MFQCViBuw",
        "e9zR4mvMWw7",
        "q9vSo1VnCiC",
        "rPc6DW4iMge",
        "rqfALeAoiTq",
        "uNb9QFRL6hY",
        "wc2JMjhGNzB",
        "x8F5xyUWy9e",
        "yqstnuAEVhm",
    ];

    /// Building ids held out for testing in the same split; training takes
    /// every building in neither list.
    pub const MATTERPORT_TEST_BUILDINGS: [&str; 12] = [
        "VFuaQ6m2Qom",
        "VLzqgDo317F",
        "ZMojNkEp431",
        "jh4fc5c5qoQ",
        "jtcxE69GiFV",
        "pRbA3pwrgk9",
        "pa4otMbVnkk",
        "D7G3Y4RVNrH",
        "dhjEzFoUFzH",
        "GdvgFV5R1Z5",
        "gYvKGZ5eRqb",
        "YmJkqBEsHnH",
    ];

    /// Partitions a caller-supplied building list against the fixture:
    /// listed evaluation ids go to val, listed test ids to test, and
    /// everything else trains.
    pub fn matterport_splits(scene_ids: &[String]) -> SplitAssignment {
        let mut assignment = SplitAssignment {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for id in scene_ids {
            if MATTERPORT_EVAL_BUILDINGS.contains(&id.as_str()) {
                assignment.val.push(id.clone());
            } else if MATTERPORT_TEST_BUILDINGS.contains(&id.as_str()) {
                assignment.test.push(id.clone());
            } else {
                assignment.train.push(id.clone());
            }
        }
        assignment
    }

    pub const STANFORD_AREAS: [&str; 6] = [
        "area_1", "area_2", "area_3", "area_4", "area_5", "area_6",
    ];

    const STANFORD_FOLD_TEST: [&[&str]; 3] = [
        &["area_5"],
        &["area_2", "area_4"],
        &["area_1", "area_3", "area_6"],
    ];

    /// Train/test areas of the Stanford2D3DS 3-fold cross-validation
    /// protocol published with that dataset; `fold` is 1-based. Across the
    /// three folds every area is tested exactly once.
    pub fn stanford_fold(fold: usize) -> Result<(Vec<&'static str>, Vec<&'static str>)> {
        if !(1..=3).contains(&fold) {
            return Err(CoreError::invalid(
                "stanford_fold",
                format!("fold must be 1, 2, or 3, got {fold}"),
            ));
        }
        let test = STANFORD_FOLD_TEST[fold - 1];
        let train: Vec<&'static str> = STANFORD_AREAS
            .iter()
            .copied()
            .filter(|area| !test.contains(area))
            .collect();
        Ok((train, test.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            height: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_scenes_are_bit_identical() {
        let spec = small_spec();
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec;
        other.seed = 1;
        let c = synth_scene(&other).unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn camera_above_the_ceiling_is_rejected() {
        let spec = SynthSpec {
            camera_height: [5.0, 5.0],
            ..small_spec()
        };
        let err = synth_scene(&spec).unwrap_err().to_string();
        assert!(err.contains("outside"), "{err}");
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let cases = [
            SynthSpec { height: 24, ..small_spec() },
            SynthSpec { height: 48, num_classes: 1, ..small_spec() },
            SynthSpec { num_classes: 5, ..small_spec() },
            SynthSpec { texture_ambiguity: true, num_classes: 3, ..small_spec() },
            SynthSpec { object_count: [1, 4], num_classes: 4, ..small_spec() },
            SynthSpec { room_half_extent: [2.0, 4.5], ..small_spec() },
        ];
        for spec in cases {
            assert!(spec.validate().is_err(), "{spec:?} should be invalid");
        }
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn every_pixel_gets_depth_normal_and_label() {
        let stack = synth_scene(&small_spec()).unwrap();
        for &d in stack.depth.plane(0) {
            assert!(d > 0.0 && d.is_finite());
        }
        let n = &stack.normal;
        for v in 0..n.height() {
            for u in 0..n.width() {
                let norm: f64 = (0..3).map(|c| (n.at(c, v, u) as f64).powi(2)).sum();
                assert!((norm.sqrt() - 1.0).abs() < 1e-5, "pixel ({v},{u})");
            }
        }
        for &l in stack.labels.data() {
            assert!((l as usize) < 4);
        }
    }

    #[test]
    fn all_classes_appear_in_a_default_scene() {
        let stack = synth_scene(&small_spec()).unwrap();
        let mut seen = [false; 4];
        for &l in stack.labels.data() {
            seen[l as usize] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn floor_pixels_have_zero_hha_height() {
        let stack = synth_scene(&small_spec()).unwrap();
        let hha = stack.hha.as_ref().unwrap();
        let mut floor_pixels = 0;
        for v in 0..stack.height() {
            for u in 0..stack.width() {
                if stack.labels.at(v, u) == 0 {
                    floor_pixels += 1;
                    assert!(
                        hha.at(1, v, u) < 1e-5,
                        "floor pixel ({v},{u}) has height {}",
                        hha.at(1, v, u)
                    );
                }
            }
        }
        assert!(floor_pixels > 100);
    }

    #[test]
    fn ambiguity_unifies_the_two_object_textures() {
        let plain = small_spec();
        let ambiguous = SynthSpec {
            texture_ambiguity: true,
            ..small_spec()
        };
        let t_plain = class_textures(&plain).unwrap();
        let t_amb = class_textures(&ambiguous).unwrap();
        assert_ne!(t_plain[2], t_plain[3]);
        assert_eq!(t_amb[2], t_amb[3]);
        // Base colors of distinct classes stay well separated.
        for i in 0..3 {
            for j in 0..i {
                let gap = (0..3)
                    .map(|c| (t_amb[i].base[c] - t_amb[j].base[c]).abs())
                    .fold(0.0f64, f64::max);
                assert!(gap >= 0.25, "classes {i} and {j} too close");
            }
        }
    }

    #[test]
    fn ambiguous_object_classes_share_their_color_distribution() {
        let spec = SynthSpec {
            texture_ambiguity: true,
            object_count: [6, 8],
            ..SynthSpec::default()
        };
        let stack = synth_scene(&spec).unwrap();
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for v in 0..stack.height() {
            for u in 0..stack.width() {
                let l = stack.labels.at(v, u);
                if l == 2 || l == 3 {
                    let k = (l - 2) as usize;
                    counts[k] += 1;
                    for c in 0..3 {
                        sums[k][c] += stack.rgb.at(c, v, u) as f64;
                    }
                }
            }
        }
        assert!(counts[0] > 200 && counts[1] > 200, "{counts:?}");
        for c in 0..3 {
            let mean_near = sums[0][c] / counts[0] as f64;
            let mean_far = sums[1][c] / counts[1] as f64;
            assert!(
                (mean_near - mean_far).abs() < 0.02,
                "channel {c}: {mean_near} vs {mean_far}"
            );
        }
    }

    #[test]
    fn splits_partition_ninety_scenes_as_72_9_9() {
        let ids: Vec<String> = (0..90).map(|i| format!("s{i:02}")).collect();
        let a = make_splits(&ids, (0.8, 0.1, 0.1), 7).unwrap();
        let b = make_splits(&ids, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 72);
        assert_eq!(a.val.len(), 9);
        assert_eq!(a.test.len(), 9);
        let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 90);
        for id in &ids {
            assert!(a.split_of(id).is_some());
        }
    }

    #[test]
    fn splits_reject_degenerate_inputs() {
        let two: Vec<String> = vec!["a".into(), "b".into()];
        assert!(make_splits(&two, (0.8, 0.1, 0.1), 0).is_err());
        let dup: Vec<String> = vec!["a".into(), "a".into(), "b".into()];
        assert!(make_splits(&dup, (0.8, 0.1, 0.1), 0).is_err());
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert!(make_splits(&ids, (0.5, 0.2, 0.2), 0).is_err());
        assert!(make_splits(&ids, (0.1, 0.45, 0.45), 0).is_err());
    }

    #[test]
    fn matterport_fixture_routes_known_ids() {
        let mut ids: Vec<String> = fixtures::MATTERPORT_EVAL_BUILDINGS
            .iter()
            .chain(fixtures::MATTERPORT_TEST_BUILDINGS.iter())
            .map(|s| s.to_string())
            .collect();
        ids.push("SomeOtherBuilding".to_string());
        let assignment = fixtures::matterport_splits(&ids);
        assert_eq!(assignment.val.len(), 11);
        assert_eq!(assignment.test.len(), 12);
        assert_eq!(assignment.train, vec!["SomeOtherBuilding".to_string()]);
    }

    #[test]
    fn stanford_folds_test_every_area_exactly_once() {
        let mut tested: Vec<&str> = Vec::new();
        for fold in 1..=3 {
            let (train, test) = fixtures::stanford_fold(fold).unwrap();
            assert_eq!(train.len() + test.len(), 6);
            for area in &test {
                assert!(!train.contains(area));
                tested.push(area);
            }
        }
        tested.sort();
        assert_eq!(tested, fixtures::STANFORD_AREAS.to_vec());
        assert!(fixtures::stanford_fold(0).is_err());
        assert!(fixtures::stanford_fold(4).is_err());
    }

    #[test]
    fn class_names_track_the_class_count() {
        for nc in 2..=4 {
            assert_eq!(class_names(nc).unwrap().len(), nc);
        }
        assert!(class_names(5).is_err());
    }
}
