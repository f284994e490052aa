//! Synthetic articulated objects rendered straight into feature-map space.
//!
//! A class is a rigid layout of 3 to 5 anisotropic Gaussian parts, each
//! carrying a per-channel signature. An instance places one object on a
//! square map, poses it (rotation and reflection act on the layout about the
//! object center; scale and pan act on the box only), adds low-amplitude
//! noise that depends on the instance seed alone, and runs a fixed random
//! 3x3 convolution stem over the result.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SraError};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};
use crate::sampler::RoiBox;

pub const DATASET_FORMAT: &str = "sra-toy-dataset/v1";

/// Largest cosine allowed between part signatures of different classes.
pub const SIGNATURE_COSINE_LIMIT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub map_size: usize,
    /// Object rotations in the training split are drawn from
    /// `U(-train_rotation, train_rotation)` degrees.
    pub train_rotation: f64,
    /// Same for the test split.
    pub test_rotation: f64,
    pub min_object: f64,
    pub max_object: f64,
    pub noise: f64,
    pub stem_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_classes: 4,
            train_per_class: 200,
            test_per_class: 100,
            channels: 16,
            map_size: 64,
            train_rotation: 15.0,
            test_rotation: 180.0,
            min_object: 20.0,
            max_object: 36.0,
            noise: 0.05,
            stem_noise: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(SraError::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.channels == 0 {
            return Err(SraError::Config("channels must be positive".into()));
        }
        if !(self.min_object >= 4.0 && self.min_object <= self.max_object) {
            return Err(SraError::Config(format!(
                "object size range [{}, {}] is invalid",
                self.min_object, self.max_object
            )));
        }
        // the largest object, stretched by the widest aspect, must fit
        if self.max_object * ASPECT_LIMIT.sqrt() + 4.0 > self.map_size as f64 {
            return Err(SraError::Config(format!(
                "objects up to {} px do not fit a {} px map",
                self.max_object, self.map_size
            )));
        }
        if self.noise < 0.0 || self.stem_noise < 0.0 {
            return Err(SraError::Config("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

const ASPECT_LIMIT: f64 = 1.6;

/// Pose of an instance, or a pose change when passed to [`apply_transform`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Degrees, counterclockwise in `(x, y)`.
    pub rotation: f64,
    /// Horizontal reflection, applied before the rotation.
    pub reflect: bool,
    /// Box scale factor.
    pub scale: f64,
    /// Box center offsets as fractions of the box height and width.
    pub pan_y: f64,
    pub pan_x: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: 0.0,
        reflect: false,
        scale: 1.0,
        pan_y: 0.0,
        pan_x: 0.0,
    };

    pub fn rotation(degrees: f64) -> Pose {
        Pose {
            rotation: degrees,
            ..Pose::IDENTITY
        }
    }

    /// `delta` applied after `self`.
    pub fn then(&self, delta: &Pose) -> Pose {
        // R(a) F R(b) = R(a - b) F, so a reflection flips the earlier angle
        let inner = if delta.reflect { -self.rotation } else { self.rotation };
        Pose {
            rotation: normalize_degrees(delta.rotation + inner),
            reflect: self.reflect ^ delta.reflect,
            scale: self.scale * delta.scale,
            pan_y: self.pan_y + delta.pan_y,
            pan_x: self.pan_x + delta.pan_x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation.is_finite() && self.scale > 0.0 && self.pan_x.is_finite() && self.pan_y.is_finite()) {
            return Err(SraError::Config(format!("invalid pose {self:?}")));
        }
        Ok(())
    }
}

/// Maps to `(-180, 180]`.
fn normalize_degrees(a: f64) -> f64 {
    if a > -180.0 && a <= 180.0 {
        return a;
    }
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    /// Center offset from the object center, in units of the object's
    /// shorter side, `(x, y)`.
    pub offset: (f64, f64),
    /// Standard deviations along the major and minor axes, same units.
    pub sigma: (f64, f64),
    /// Major-axis direction in radians.
    pub orientation: f64,
    pub signature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub parts: Vec<Part>,
}

/// Fixed `C x C x 3 x 3` convolution: identity plus noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub channels: usize,
    pub kernel: Vec<f64>,
}

impl Stem {
    fn new(channels: usize, noise: f64, rng: &mut Rng) -> Stem {
        let scale = noise / (9.0 * channels as f64).sqrt();
        let mut kernel: Vec<f64> = (0..channels * channels * 9)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for c in 0..channels {
            kernel[(c * channels + c) * 9 + 4] += 1.0;
        }
        Stem { channels, kernel }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = (self.channels, x.dims()[1], x.dims()[2]);
        let src = x.data();
        let mut out = vec![0.0; c * h * w];
        for co in 0..c {
            let dst = &mut out[co * h * w..(co + 1) * h * w];
            for ci in 0..c {
                let plane = &src[ci * h * w..(ci + 1) * h * w];
                let k = &self.kernel[(co * c + ci) * 9..(co * c + ci + 1) * 9];
                for (t, kv) in k.iter().enumerate() {
                    if *kv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let (lo, hi) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                        for xs in lo..hi {
                            drow[(xs as isize - dx) as usize] += kv * row[xs];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("stem preserves shape")
    }
}

/// Class templates and stem shared by every split drawn from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub config: DataConfig,
    pub seed: u64,
    pub classes: Vec<ClassTemplate>,
    pub stem: Stem,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    /// `(C, S, S)` rendered map.
    pub feature_map: Tensor,
    /// Box after pose scale/pan, clamped to the map.
    pub roi: RoiBox,
    pub label: usize,
    pub pose: Pose,
    /// Unposed object center `(y, x)` and extent `(h, w)`.
    pub center: (f64, f64),
    pub extent: (f64, f64),
    /// Seeds the background noise.
    pub seed: u64,
}

/// Serializable description of an instance; the map is re-rendered from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMeta {
    pub label: usize,
    pub pose: Pose,
    pub center: (f64, f64),
    pub extent: (f64, f64),
    pub seed: u64,
}

impl SyntheticInstance {
    pub fn meta(&self) -> InstanceMeta {
        InstanceMeta {
            label: self.label,
            pose: self.pose,
            center: self.center,
            extent: self.extent,
            seed: self.seed,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl ToyWorld {
    pub fn new(config: &DataConfig, seed: u64) -> Result<ToyWorld> {
        config.validate()?;
        let mut r = rng::stream(seed, "data.classes");
        let mut classes: Vec<ClassTemplate> = Vec::with_capacity(config.n_classes);
        for _ in 0..config.n_classes {
            let n_parts = r.gen_range(3..=5);
            let mut parts: Vec<Part> = Vec::with_capacity(n_parts);
            while parts.len() < n_parts {
                let radius = r.gen_range(0.1..0.3);
                let angle = r.gen_range(-PI..PI);
                let offset = (radius * angle.cos(), radius * angle.sin());
                let crowded = parts
                    .iter()
                    .any(|p| (p.offset.0 - offset.0).hypot(p.offset.1 - offset.1) < 0.15);
                if crowded {
                    continue;
                }
                let signature = Self::signature(&classes, config.channels, &mut r)?;
                parts.push(Part {
                    offset,
                    sigma: (r.gen_range(0.07..0.12), r.gen_range(0.035..0.06)),
                    orientation: r.gen_range(0.0..PI),
                    signature,
                });
            }
            classes.push(ClassTemplate { parts });
        }
        let stem = Stem::new(config.channels, config.stem_noise, &mut rng::stream(seed, "data.stem"));
        Ok(ToyWorld {
            config: config.clone(),
            seed,
            classes,
            stem,
        })
    }

    /// Unit-norm signature far enough from every earlier class's parts.
    fn signature(classes: &[ClassTemplate], channels: usize, r: &mut Rng) -> Result<Vec<f64>> {
        for _ in 0..10_000 {
            let mut v: Vec<f64> = (0..channels).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let clash = classes
                .iter()
                .flat_map(|c| &c.parts)
                .any(|p| cosine(&p.signature, &v) >= SIGNATURE_COSINE_LIMIT);
            if !clash {
                return Ok(v);
            }
        }
        Err(SraError::Config(format!(
            "cannot draw {} separated part signatures in {channels} channels",
            classes.iter().map(|c| c.parts.len()).sum::<usize>() + 1
        )))
    }

    /// Largest cosine between part signatures of different classes.
    pub fn max_cross_class_cosine(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                for pa in &a.parts {
                    for pb in &b.parts {
                        worst = worst.max(cosine(&pa.signature, &pb.signature));
                    }
                }
            }
        }
        worst
    }

    /// Draws one unrendered instance with rotation in `U(-max_rotation, max_rotation)`.
    fn sample_meta(&self, label: usize, max_rotation: f64, seed: u64, r: &mut Rng) -> InstanceMeta {
        let cfg = &self.config;
        let side = r.gen_range(cfg.min_object..=cfg.max_object);
        let aspect = r.gen_range(1.0 / ASPECT_LIMIT..ASPECT_LIMIT);
        let (h, w) = (side * aspect.sqrt(), side / aspect.sqrt());
        let s = cfg.map_size as f64;
        let cy = r.gen_range(h / 2.0 + 1.0..s - 1.0 - h / 2.0);
        let cx = r.gen_range(w / 2.0 + 1.0..s - 1.0 - w / 2.0);
        let rotation = if max_rotation > 0.0 {
            r.gen_range(-max_rotation..=max_rotation)
        } else {
            0.0
        };
        InstanceMeta {
            label,
            pose: Pose::rotation(rotation),
            center: (cy, cx),
            extent: (h, w),
            seed,
        }
    }

    pub fn render(&self, meta: &InstanceMeta) -> Result<SyntheticInstance> {
        meta.pose.validate()?;
        let template = self
            .classes
            .get(meta.label)
            .ok_or_else(|| SraError::Config(format!("label {} out of range", meta.label)))?;
        let (c, size) = (self.config.channels, self.config.map_size);
        let mut noise = rng::stream(meta.seed, "data.noise");
        let mut data: Vec<f64> = (0..c * size * size)
            .map(|_| self.config.noise * noise.sample::<f64, _>(StandardNormal))
            .collect();

        let unit = meta.extent.0.min(meta.extent.1);
        let (sin_a, cos_a) = meta.pose.rotation.to_radians().sin_cos();
        let mirror = if meta.pose.reflect { -1.0 } else { 1.0 };
        for part in &template.parts {
            let (ox, oy) = (mirror * part.offset.0 * unit, part.offset.1 * unit);
            let px = meta.center.1 + cos_a * ox - sin_a * oy;
            let py = meta.center.0 + sin_a * ox + cos_a * oy;
            // axis direction: reflect then rotate
            let (sin_p, cos_p) = part.orientation.sin_cos();
            let (ax, ay) = (mirror * cos_p, sin_p);
            let (ux, uy) = (cos_a * ax - sin_a * ay, sin_a * ax + cos_a * ay);
            let (s1, s2) = (part.sigma.0 * unit, part.sigma.1 * unit);
            let reach = 4.0 * s1;
            let y_lo = (py - reach).floor().max(0.0) as usize;
            let y_hi = ((py + reach).ceil().max(0.0) as usize).min(size - 1);
            let x_lo = (px - reach).floor().max(0.0) as usize;
            let x_hi = ((px + reach).ceil().max(0.0) as usize).min(size - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let (dx, dy) = (x as f64 - px, y as f64 - py);
                    let (u, v) = (dx * ux + dy * uy, -dx * uy + dy * ux);
                    let g = (-0.5 * (u * u / (s1 * s1) + v * v / (s2 * s2))).exp();
                    for (ch, sig) in part.signature.iter().enumerate() {
                        data[(ch * size + y) * size + x] += g * sig;
                    }
                }
            }
        }
        let raw = Tensor::new(vec![c, size, size], data)?;
        let feature_map = self.stem.apply(&raw);

        let (h, w) = (meta.extent.0 * meta.pose.scale, meta.extent.1 * meta.pose.scale);
        let cy = meta.center.0 + meta.pose.pan_y * h;
        let cx = meta.center.1 + meta.pose.pan_x * w;
        let hi = (size - 1) as f64;
        let clamp = |v: f64| v.clamp(0.0, hi);
        let (mut x0, mut y0, mut x1, mut y1) = (clamp(cx - w / 2.0), clamp(cy - h / 2.0), clamp(cx + w / 2.0), clamp(cy + h / 2.0));
        // a box panned fully off the map collapses to a sliver at the border
        if x1 <= x0 {
            (x0, x1) = if x0 >= hi { (hi - 1.0, hi) } else { (x0, x0 + 1.0) };
        }
        if y1 <= y0 {
            (y0, y1) = if y0 >= hi { (hi - 1.0, hi) } else { (y0, y0 + 1.0) };
        }
        Ok(SyntheticInstance {
            feature_map,
            roi: RoiBox::new(x0, y0, x1, y1)?,
            label: meta.label,
            pose: meta.pose,
            center: meta.center,
            extent: meta.extent,
            seed: meta.seed,
        })
    }

    /// `n` instances with round-robin labels, drawn from the stream `split`.
    pub fn instances(&self, split: &str, n: usize, max_rotation: f64) -> Result<Vec<SyntheticInstance>> {
        let mut r = rng::stream(self.seed, &format!("data.split.{split}"));
        (0..n)
            .map(|i| {
                let seed = rng::derive_seed(self.seed, &format!("data.instance.{split}.{i}"));
                let meta = self.sample_meta(i % self.config.n_classes, max_rotation, seed, &mut r);
                self.render(&meta)
            })
            .collect()
    }
}

/// Re-renders `inst` with `delta` composed onto its pose.
pub fn apply_transform(world: &ToyWorld, inst: &SyntheticInstance, delta: &Pose) -> Result<SyntheticInstance> {
    delta.validate()?;
    let mut meta = inst.meta();
    meta.pose = inst.pose.then(delta);
    world.render(&meta)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: ToyWorld,
    pub train: Vec<SyntheticInstance>,
    /// Rotation-augmented split.
    pub test: Vec<SyntheticInstance>,
}

pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    let world = ToyWorld::new(config, seed)?;
    let train = world.instances("train", config.n_classes * config.train_per_class, config.train_rotation)?;
    let test = world.instances("test", config.n_classes * config.test_per_class, config.test_rotation)?;
    Ok(Dataset { world, train, test })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    world: ToyWorld,
    train: Vec<InstanceMeta>,
    test: Vec<InstanceMeta>,
    bundles: Vec<String>,
}

/// Stacks the maps of a split into one `(n, C, S*S)` tensor.
fn bundle(instances: &[SyntheticInstance]) -> Result<Tensor> {
    let first = instances
        .first()
        .ok_or_else(|| SraError::Usage("cannot bundle an empty split".into()))?;
    let (c, h, w) = first.feature_map.dims3("bundle")?;
    let data: Vec<f64> = instances.iter().flat_map(|i| i.feature_map.data().iter().copied()).collect();
    Tensor::new(vec![instances.len(), c, h * w], data)
}

/// Writes `manifest.json` plus one tjson bundle per split into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        world: dataset.world.clone(),
        train: dataset.train.iter().map(SyntheticInstance::meta).collect(),
        test: dataset.test.iter().map(SyntheticInstance::meta).collect(),
        bundles: vec!["train.tjson".into(), "test.tjson".into()],
    };
    bundle(&dataset.train)?.write_tjson(dir.join("train.tjson"))?;
    bundle(&dataset.test)?.write_tjson(dir.join("test.tjson"))?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(SraError::Format(format!("unsupported dataset format {:?}", manifest.format)));
    }
    let world = manifest.world;
    let mut splits = Vec::with_capacity(2);
    for (metas, file) in [(&manifest.train, "train.tjson"), (&manifest.test, "test.tjson")] {
        let stacked = Tensor::read_tjson(dir.join(file))?;
        let (n, c, plane) = stacked.dims3("load_dataset")?;
        let size = world.config.map_size;
        if n != metas.len() || c != world.config.channels || plane != size * size {
            return Err(SraError::Format(format!("{file} has dims {:?}", stacked.dims())));
        }
        let mut split = Vec::with_capacity(n);
        for (meta, chunk) in metas.iter().zip(stacked.data().chunks(c * plane)) {
            let mut inst = world.render(meta)?;
            inst.feature_map = Tensor::new(vec![c, size, size], chunk.to_vec())?;
            split.push(inst);
        }
        splits.push(split);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset { world, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DataConfig {
        DataConfig {
            n_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            channels: 6,
            map_size: 48,
            min_object: 16.0,
            max_object: 24.0,
            ..DataConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&tiny(), 3).unwrap();
        let b = generate_dataset(&tiny(), 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_dataset(&tiny(), 4).unwrap();
        assert_ne!(a.train[0].feature_map, c.train[0].feature_map);
    }

    #[test]
    fn labels_are_balanced() {
        let world = ToyWorld::new(&tiny(), 1).unwrap();
        for n in [7, 9, 10] {
            let mut counts = vec![0usize; 3];
            for inst in world.instances("x", n, 10.0).unwrap() {
                counts[inst.label] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn cross_class_signatures_are_separated() {
        for seed in 0..5 {
            let world = ToyWorld::new(&DataConfig::default(), seed).unwrap();
            assert!(world.max_cross_class_cosine() < SIGNATURE_COSINE_LIMIT);
        }
    }

    #[test]
    fn pose_group_properties() {
        let world = ToyWorld::new(&tiny(), 2).unwrap();
        let inst = &world.instances("x", 2, 30.0).unwrap()[1];

        let same = apply_transform(&world, inst, &Pose::IDENTITY).unwrap();
        assert_eq!(&same, inst);

        let half = Pose::rotation(180.0);
        let twice = apply_transform(&world, &apply_transform(&world, inst, &half).unwrap(), &half).unwrap();
        assert!(twice.feature_map.max_abs_diff(&inst.feature_map) < 1e-9);

        let flip = Pose {
            reflect: true,
            ..Pose::IDENTITY
        };
        let flipped = apply_transform(&world, inst, &flip).unwrap();
        assert!(flipped.feature_map.max_abs_diff(&inst.feature_map) > 1e-3);
        let back = apply_transform(&world, &flipped, &flip).unwrap();
        assert!(back.feature_map.max_abs_diff(&inst.feature_map) < 1e-9);
    }

    #[test]
    fn composition_matches_direct_pose() {
        let world = ToyWorld::new(&tiny(), 5).unwrap();
        let inst = &world.instances("x", 1, 0.0).unwrap()[0];
        let a = Pose {
            rotation: 30.0,
            reflect: true,
            scale: 1.1,
            pan_y: 0.05,
            pan_x: 0.0,
        };
        let b = Pose {
            rotation: -70.0,
            reflect: true,
            scale: 0.9,
            pan_y: 0.0,
            pan_x: -0.02,
        };
        let stepwise = apply_transform(&world, &apply_transform(&world, inst, &a).unwrap(), &b).unwrap();
        let direct = apply_transform(&world, inst, &Pose::IDENTITY.then(&a).then(&b)).unwrap();
        assert_eq!(stepwise, direct);
        // double reflection cancels; angles combine as -70 - 30
        assert!(!stepwise.pose.reflect);
        assert!((stepwise.pose.rotation + 100.0).abs() < 1e-12);
    }

    #[test]
    fn scale_and_pan_move_only_the_box() {
        let world = ToyWorld::new(&tiny(), 6).unwrap();
        let inst = &world.instances("x", 1, 0.0).unwrap()[0];
        let moved = apply_transform(
            &world,
            inst,
            &Pose {
                scale: 1.2,
                pan_x: 0.1,
                ..Pose::IDENTITY
            },
        )
        .unwrap();
        assert_eq!(moved.feature_map, inst.feature_map);
        assert!((moved.roi.width() - inst.roi.width()).abs() > 1.0);
    }

    #[test]
    fn boxes_stay_on_the_map() {
        let world = ToyWorld::new(&tiny(), 7).unwrap();
        let far = Pose {
            pan_x: 5.0,
            pan_y: -5.0,
            scale: 2.0,
            ..Pose::IDENTITY
        };
        for inst in world.instances("x", 12, 180.0).unwrap() {
            let moved = apply_transform(&world, &inst, &far).unwrap();
            for b in [inst.roi, moved.roi] {
                assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 47.0 && b.y1 <= 47.0 && b.x1 > b.x0 && b.y1 > b.y0);
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let ds = generate_dataset(&tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.world, ds.world);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ToyWorld::new(&DataConfig { n_classes: 1, ..tiny() }, 0).is_err());
        assert!(ToyWorld::new(&DataConfig { max_object: 60.0, ..tiny() }, 0).is_err());
    }
}
