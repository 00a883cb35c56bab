//! World model: synthetic cities, cubic submaps, and templated hint queries.

mod hint;
mod io;
mod vocab;

pub use hint::{
    parse_hint, render_hint, vocabulary, Hint, SLOT_BAND, SLOT_COLOR, SLOT_DIRECTION, SLOT_LABEL,
    TEMPLATE_LEN,
};
pub use io::{load_split, save_split};
pub use vocab::{cardinal_direction, ColorName, Direction, DistanceBand, SemanticLabel};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default cap on objects per submap.
pub const MAX_OBJECTS: usize = 28;

/// A segmented object: its point set plus categorical attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Dense index of the object within its city.
    pub id: u32,
    pub label: SemanticLabel,
    pub color: ColorName,
    pub rgb: [f64; 3],
    pub center: [f64; 3],
    pub points: Vec<[f64; 3]>,
}

impl SceneObject {
    pub fn new(
        id: u32,
        points: Vec<[f64; 3]>,
        label: SemanticLabel,
        color: ColorName,
        rgb: [f64; 3],
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("object point set"));
        }
        if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig(format!("rgb {rgb:?} outside [0, 1]")));
        }
        let center = mean_point(&points);
        Ok(Self {
            id,
            label,
            color,
            rgb,
            center,
            points,
        })
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }
}

/// Per-axis mean. Each axis is summed in sorted order, so the result does
/// not depend on the order of `points`.
pub fn mean_point(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut axis = Vec::with_capacity(points.len());
    let mut c = [0.0; 3];
    for (k, ck) in c.iter_mut().enumerate() {
        axis.clear();
        axis.extend(points.iter().map(|p| p[k]));
        axis.sort_by(f64::total_cmp);
        *ck = axis.iter().sum::<f64>() / n;
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityMap {
    pub scene_id: String,
    pub bounds: Aabb,
    pub objects: Vec<SceneObject>,
}

impl CityMap {
    pub fn object(&self, id: u32) -> &SceneObject {
        &self.objects[id as usize]
    }
}

/// A cubic slice of a city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub id: u32,
    pub scene_id: String,
    /// Minimum corner of the cube.
    pub origin: [f64; 3],
    pub edge: f64,
    /// Member object ids, ascending.
    pub objects: Vec<u32>,
}

impl Submap {
    pub fn center(&self) -> [f64; 3] {
        self.origin.map(|o| o + self.edge / 2.0)
    }

    pub fn center_xy(&self) -> [f64; 2] {
        let c = self.center();
        [c[0], c[1]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.origin[k] && p[k] <= self.origin[k] + self.edge)
    }

    /// Whether the square footprint contains `(x, y)`.
    pub fn footprint_contains(&self, xy: [f64; 2]) -> bool {
        (0..2).all(|k| xy[k] >= self.origin[k] && xy[k] <= self.origin[k] + self.edge)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedQuery {
    pub id: u32,
    pub scene_id: String,
    pub target: [f64; 2],
    pub hints: Vec<Hint>,
    /// Ids of every submap whose footprint contains the target, ascending.
    pub positive_submaps: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub scenes: Vec<CityMap>,
    pub submaps: Vec<Submap>,
    pub queries: Vec<LocalizedQuery>,
}

impl DatasetSplit {
    pub fn scene(&self, scene_id: &str) -> Option<&CityMap> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn submap_objects(&self, submap: &Submap) -> Vec<&SceneObject> {
        let city = self.scene(&submap.scene_id).expect("submap scene present in split");
        submap.objects.iter().map(|&id| city.object(id)).collect()
    }

    pub fn submap(&self, id: u32) -> &Submap {
        &self.submaps[id as usize]
    }

    /// Positive submaps of `query` that contain every object its hints
    /// describe.
    pub fn complete_submaps(&self, query: &LocalizedQuery) -> Vec<u32> {
        query
            .positive_submaps
            .iter()
            .copied()
            .filter(|&p| query.hints.iter().all(|h| self.submap(p).objects.contains(&h.object_ref)))
            .collect()
    }

    /// The submaps the fine stage is trained on for `query`: the complete
    /// ones when there are any, otherwise every positive.
    pub fn fine_submaps(&self, query: &LocalizedQuery) -> Vec<u32> {
        let complete = self.complete_submaps(query);
        if complete.is_empty() {
            query.positive_submaps.clone()
        } else {
            complete
        }
    }

    pub fn object_count(&self) -> usize {
        self.scenes.iter().map(|s| s.objects.len()).sum()
    }

    /// Checks the cross-record invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, sm) in self.submaps.iter().enumerate() {
            if sm.id as usize != i {
                return Err(Error::InvalidConfig(format!("submap {} stored at index {i}", sm.id)));
            }
            let city = self
                .scene(&sm.scene_id)
                .ok_or_else(|| Error::InvalidConfig(format!("submap {} names unknown scene", sm.id)))?;
            for &o in &sm.objects {
                if o as usize >= city.objects.len() {
                    return Err(Error::InvalidConfig(format!("submap {} references object {o}", sm.id)));
                }
            }
        }
        for q in &self.queries {
            for &p in &q.positive_submaps {
                let sm = self
                    .submaps
                    .get(p as usize)
                    .ok_or_else(|| Error::InvalidConfig(format!("query {} positive {p} missing", q.id)))?;
                if sm.scene_id != q.scene_id {
                    return Err(Error::InvalidConfig(format!("query {} positive {p} in another scene", q.id)));
                }
            }
        }
        Ok(())
    }
}

/// Size and sampling density of one semantic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub label: SemanticLabel,
    /// Extent ranges `[min, max]` along x, y, z in meters.
    pub size: [[f64; 2]; 3],
    /// Inclusive point-count range.
    pub points: [usize; 2],
    /// Ellipsoid scatter instead of a box.
    pub ellipsoid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Area extent in meters along x and y; the area starts at the origin.
    pub extent: [f64; 2],
    pub object_count: usize,
    /// Relative frequency of each label, indexed like [`SemanticLabel::ALL`].
    pub label_weights: Vec<f64>,
    /// Relative frequency of each color, indexed like [`ColorName::ALL`].
    pub color_weights: Vec<f64>,
    pub label_specs: Vec<LabelSpec>,
    /// Standard deviation of the per-object RGB jitter.
    pub rgb_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        use SemanticLabel::*;
        let spec = |label, size, points: [usize; 2], ellipsoid| LabelSpec {
            label,
            size,
            points,
            ellipsoid,
        };
        Self {
            extent: [110.0, 110.0],
            object_count: 260,
            label_weights: vec![1.0; SemanticLabel::ALL.len()],
            color_weights: vec![1.0; ColorName::ALL.len()],
            label_specs: vec![
                spec(Building, [[6.0, 14.0], [6.0, 14.0], [6.0, 15.0]], [24, 40], false),
                spec(Road, [[8.0, 16.0], [3.0, 6.0], [0.1, 0.3]], [16, 32], false),
                spec(Terrain, [[4.0, 10.0], [4.0, 10.0], [0.2, 0.8]], [12, 28], false),
                spec(Sidewalk, [[6.0, 12.0], [1.5, 3.0], [0.1, 0.4]], [12, 24], false),
                spec(Pole, [[0.2, 0.4], [0.2, 0.4], [4.0, 8.0]], [6, 12], false),
                spec(Vegetation, [[2.0, 6.0], [2.0, 6.0], [2.0, 8.0]], [16, 32], true),
                spec(Fence, [[4.0, 10.0], [0.1, 0.3], [1.0, 2.0]], [8, 20], false),
                spec(Wall, [[4.0, 10.0], [0.3, 0.6], [1.5, 4.0]], [10, 24], false),
            ],
            rgb_jitter: 0.03,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 {
            return Err(Error::InvalidConfig("object count must be positive".into()));
        }
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(Error::InvalidConfig(format!("area extent {:?} must be positive", self.extent)));
        }
        if self.label_weights.len() != SemanticLabel::ALL.len()
            || self.color_weights.len() != ColorName::ALL.len()
        {
            return Err(Error::InvalidConfig("weight vectors must cover every label and color".into()));
        }
        if self.label_weights.iter().chain(&self.color_weights).any(|w| *w < 0.0)
            || self.label_weights.iter().sum::<f64>() <= 0.0
            || self.color_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig("weights must be non-negative with a positive sum".into()));
        }
        for &l in SemanticLabel::ALL {
            let s = self
                .label_specs
                .iter()
                .find(|s| s.label == l)
                .ok_or_else(|| Error::InvalidConfig(format!("no shape spec for {l}")))?;
            if s.points[0] == 0 || s.points[0] > s.points[1] {
                return Err(Error::InvalidConfig(format!("bad point range for {l}")));
            }
            if s.size.iter().any(|r| r[0] <= 0.0 || r[0] > r[1]) {
                return Err(Error::InvalidConfig(format!("bad size range for {l}")));
            }
        }
        Ok(())
    }
}

fn weighted_index<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Samples a synthetic city. Deterministic in `(config, seed)`.
pub fn generate_city(config: &GeneratorConfig, seed: u64) -> Result<CityMap> {
    generate_named_city(config, seed, "scene-0")
}

pub fn generate_named_city(config: &GeneratorConfig, seed: u64, scene_id: &str) -> Result<CityMap> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::with_capacity(config.object_count);
    let mut zmax: f64 = 0.0;
    for id in 0..config.object_count {
        let label = SemanticLabel::ALL[weighted_index(&mut rng, &config.label_weights)];
        let color = ColorName::ALL[weighted_index(&mut rng, &config.color_weights)];
        let spec = config
            .label_specs
            .iter()
            .find(|s| s.label == label)
            .expect("validated");
        let mut size = spec.size.map(|r| rng.gen_range(r[0]..=r[1]));
        if rng.gen_bool(0.5) {
            size.swap(0, 1);
        }
        // keep the whole footprint inside the area
        let half = [
            (size[0] / 2.0).min(config.extent[0] / 2.0),
            (size[1] / 2.0).min(config.extent[1] / 2.0),
        ];
        let cx = rng.gen_range(half[0]..=config.extent[0] - half[0]);
        let cy = rng.gen_range(half[1]..=config.extent[1] - half[1]);
        let n = rng.gen_range(spec.points[0]..=spec.points[1]);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let mut u = [0.0f64; 3];
                loop {
                    for v in &mut u {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                    if !spec.ellipsoid || u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break;
                    }
                }
                [
                    cx + u[0] * half[0],
                    cy + u[1] * half[1],
                    (u[2] + 1.0) * size[2] / 2.0,
                ]
            })
            .collect();
        let proto = color.prototype();
        let rgb = proto.map(|c| (c + config.rgb_jitter * gaussian(&mut rng)).clamp(0.0, 1.0));
        let obj = SceneObject::new(id as u32, points, label, color, rgb)?;
        zmax = zmax.max(obj.points.iter().map(|p| p[2]).fold(0.0, f64::max));
        objects.push(obj);
    }
    Ok(CityMap {
        scene_id: scene_id.to_string(),
        bounds: Aabb {
            min: [0.0, 0.0, 0.0],
            max: [config.extent[0], config.extent[1], zmax],
        },
        objects,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub edge: f64,
    pub stride: f64,
    pub max_objects: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            edge: 30.0,
            stride: 10.0,
            max_objects: MAX_OBJECTS,
        }
    }
}

/// Window origins along one axis: the first at `lo`, then every `stride`
/// until a window reaches `hi`.
pub fn window_origins(lo: f64, hi: f64, edge: f64, stride: f64) -> Vec<f64> {
    let span = hi - lo;
    let count = if span <= edge {
        1
    } else {
        ((span - edge) / stride - 1e-9).ceil() as usize + 1
    };
    (0..count).map(|k| lo + k as f64 * stride).collect()
}

/// Slides a cube over the city. Each submap keeps the objects whose centers
/// fall inside its cube; beyond `max_objects` it keeps those nearest the cube
/// center (ties to the lower id). Empty windows are dropped. Submap ids count
/// from `first_id` in x-major, then y order.
pub fn partition_city(city: &CityMap, cfg: &PartitionConfig, first_id: u32) -> Result<Vec<Submap>> {
    if !(cfg.edge > 0.0) {
        return Err(Error::NonPositive {
            name: "edge",
            value: cfg.edge,
        });
    }
    if !(cfg.stride > 0.0 && cfg.stride <= cfg.edge) {
        return Err(Error::InvalidConfig(format!(
            "stride {} must lie in (0, edge = {}]",
            cfg.stride, cfg.edge
        )));
    }
    if cfg.max_objects == 0 {
        return Err(Error::InvalidConfig("max_objects must be positive".into()));
    }
    let b = &city.bounds;
    let xs = window_origins(b.min[0], b.max[0], cfg.edge, cfg.stride);
    let ys = window_origins(b.min[1], b.max[1], cfg.edge, cfg.stride);
    let mut out = Vec::new();
    let mut next = first_id;
    for &x in &xs {
        for &y in &ys {
            let mut cube = Submap {
                id: next,
                scene_id: city.scene_id.clone(),
                origin: [x, y, b.min[2]],
                edge: cfg.edge,
                objects: Vec::new(),
            };
            let c = cube.center();
            let mut members: Vec<(f64, u32)> = city
                .objects
                .iter()
                .filter(|o| cube.contains(o.center))
                .map(|o| {
                    let d2: f64 = (0..3).map(|k| (o.center[k] - c[k]).powi(2)).sum();
                    (d2, o.id)
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            members.truncate(cfg.max_objects);
            cube.objects = members.into_iter().map(|(_, id)| id).collect();
            cube.objects.sort_unstable();
            out.push(cube);
            next += 1;
        }
    }
    Ok(out)
}

/// How query targets and hint objects are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    /// Uniform target; hints describe the nearest objects.
    Nearest,
    /// Target placed at the centroid of the described objects.
    Centroid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub num_hints: usize,
    pub hint_radius: f64,
    /// Upper bound of the `near` band in meters.
    pub near_below: f64,
    /// Upper bound of the `mid` band in meters.
    pub mid_below: f64,
    pub mode: QueryMode,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            num_hints: 5,
            hint_radius: 15.0,
            near_below: 5.0,
            mid_below: 10.0,
            mode: QueryMode::Nearest,
        }
    }
}

impl QueryConfig {
    pub fn band(&self, dist: f64) -> DistanceBand {
        if dist < self.near_below {
            DistanceBand::Near
        } else if dist < self.mid_below {
            DistanceBand::Mid
        } else {
            DistanceBand::Far
        }
    }
}

fn dist_xy(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn positives_for(submaps: &[Submap], scene_id: &str, target: [f64; 2]) -> Vec<u32> {
    submaps
        .iter()
        .filter(|s| s.scene_id == scene_id && s.footprint_contains(target))
        .map(|s| s.id)
        .collect()
}

fn make_hint(obj: &SceneObject, target: [f64; 2], cfg: &QueryConfig) -> Hint {
    let relation = cardinal_direction(target, obj.xy());
    let band = cfg.band(dist_xy(target, obj.xy()));
    Hint {
        object_ref: obj.id,
        relation,
        distance_band: band,
        label: obj.label,
        color: obj.color,
        text: render_hint(obj.label, obj.color, relation, band),
    }
}

/// Describes `target` by its `num_hints` nearest objects among those within
/// the hint radius that belong to a submap containing the target. Hint order
/// is shuffled by `seed`.
pub fn generate_query(
    id: u32,
    city: &CityMap,
    submaps: &[Submap],
    target: [f64; 2],
    cfg: &QueryConfig,
    seed: u64,
) -> Result<LocalizedQuery> {
    if cfg.num_hints == 0 {
        return Err(Error::InvalidConfig("num_hints must be positive".into()));
    }
    let positive_submaps = positives_for(submaps, &city.scene_id, target);
    let eligible: BTreeSet<u32> = positive_submaps
        .iter()
        .flat_map(|&p| {
            submaps
                .iter()
                .find(|s| s.id == p)
                .map(|s| s.objects.clone())
                .unwrap_or_default()
        })
        .collect();
    let mut near: Vec<(f64, u32)> = eligible
        .iter()
        .map(|&o| (dist_xy(target, city.object(o).xy()), o))
        .filter(|(d, _)| *d <= cfg.hint_radius)
        .collect();
    if near.len() < cfg.num_hints {
        return Err(Error::TooFewHintObjects {
            radius: cfg.hint_radius,
            found: near.len(),
            needed: cfg.num_hints,
        });
    }
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hints: Vec<Hint> = near[..cfg.num_hints]
        .iter()
        .map(|&(_, o)| make_hint(city.object(o), target, cfg))
        .collect();
    hints.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(LocalizedQuery {
        id,
        scene_id: city.scene_id.clone(),
        target,
        hints,
        positive_submaps,
    })
}

/// Picks an anchor object, describes it and its nearest neighbours, and
/// places the target at their centroid. Fails unless some submap containing
/// the centroid holds every described object.
pub fn generate_centroid_query(
    id: u32,
    city: &CityMap,
    submaps: &[Submap],
    anchor: u32,
    cfg: &QueryConfig,
    seed: u64,
) -> Result<LocalizedQuery> {
    let a = city.object(anchor).xy();
    let mut near: Vec<(f64, u32)> = city
        .objects
        .iter()
        .map(|o| (dist_xy(a, o.xy()), o.id))
        .filter(|(d, _)| *d <= cfg.hint_radius)
        .collect();
    if near.len() < cfg.num_hints {
        return Err(Error::TooFewHintObjects {
            radius: cfg.hint_radius,
            found: near.len(),
            needed: cfg.num_hints,
        });
    }
    near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let chosen: Vec<u32> = near[..cfg.num_hints].iter().map(|&(_, o)| o).collect();
    let mut target = [0.0; 2];
    for &o in &chosen {
        let c = city.object(o).xy();
        target[0] += c[0] / chosen.len() as f64;
        target[1] += c[1] / chosen.len() as f64;
    }
    let positive_submaps = positives_for(submaps, &city.scene_id, target);
    let complete = positive_submaps
        .iter()
        .any(|p| submaps.iter().any(|s| s.id == *p && chosen.iter().all(|o| s.objects.contains(o))));
    if !complete {
        return Err(Error::InvalidConfig(format!(
            "no submap around the centroid of object {anchor}'s group holds every described object"
        )));
    }
    let mut hints: Vec<Hint> = chosen.iter().map(|&o| make_hint(city.object(o), target, cfg)).collect();
    hints.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(LocalizedQuery {
        id,
        scene_id: city.scene_id.clone(),
        target,
        hints,
        positive_submaps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    pub partition: PartitionConfig,
    pub query: QueryConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub queries_per_scene: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            partition: PartitionConfig::default(),
            query: QueryConfig::default(),
            train_scenes: 3,
            val_scenes: 1,
            test_scenes: 1,
            queries_per_scene: 160,
        }
    }
}

impl DatasetConfig {
    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one split from `scene_count` cities whose seeds are derived from
/// `seed` and `first_scene`.
pub fn generate_split(
    name: &str,
    cfg: &DatasetConfig,
    seed: u64,
    first_scene: usize,
    scene_count: usize,
) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        name: name.to_string(),
        seed,
        config_hash: cfg.hash(),
        scenes: Vec::new(),
        submaps: Vec::new(),
        queries: Vec::new(),
    };
    for s in first_scene..first_scene + scene_count {
        let scene_seed = derive_seed(seed, s as u64);
        let city = generate_named_city(&cfg.generator, scene_seed, &format!("scene-{s}"))?;
        let submaps = partition_city(&city, &cfg.partition, split.submaps.len() as u32)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 1));
        let mut made = 0;
        let mut attempts = 0;
        while made < cfg.queries_per_scene {
            attempts += 1;
            if attempts > cfg.queries_per_scene * 50 {
                return Err(Error::InvalidConfig(format!(
                    "could not place {} queries in {}",
                    cfg.queries_per_scene, city.scene_id
                )));
            }
            let qid = split.queries.len() as u32;
            let qseed = rng.gen::<u64>();
            let q = match cfg.query.mode {
                QueryMode::Nearest => {
                    let target = [
                        rng.gen_range(city.bounds.min[0]..city.bounds.max[0]),
                        rng.gen_range(city.bounds.min[1]..city.bounds.max[1]),
                    ];
                    generate_query(qid, &city, &submaps, target, &cfg.query, qseed)
                }
                QueryMode::Centroid => {
                    let anchor = rng.gen_range(0..city.objects.len()) as u32;
                    generate_centroid_query(qid, &city, &submaps, anchor, &cfg.query, qseed)
                }
            };
            match q {
                Ok(q) => {
                    split.queries.push(q);
                    made += 1;
                }
                Err(Error::TooFewHintObjects { .. }) | Err(Error::InvalidConfig(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        split.submaps.extend(submaps);
        split.scenes.push(city);
    }
    Ok(split)
}

/// The train, validation and test splits of one seed.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<[DatasetSplit; 3]> {
    let train = generate_split("train", cfg, seed, 0, cfg.train_scenes)?;
    let val = generate_split("val", cfg, seed, cfg.train_scenes, cfg.val_scenes)?;
    let test = generate_split(
        "test",
        cfg,
        seed,
        cfg.train_scenes + cfg.val_scenes,
        cfg.test_scenes,
    )?;
    Ok([train, val, test])
}

/// Resamples each object's label to a different label with probability
/// `rate`. Queries are untouched.
pub fn inject_label_noise(split: &DatasetSplit, rate: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("noise rate {rate} outside [0, 1]")));
    }
    let mut out = split.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SemanticLabel::ALL.len();
    for scene in &mut out.scenes {
        for obj in &mut scene.objects {
            let flip = rng.gen::<f64>() < rate;
            let shift = rng.gen_range(1..n);
            if flip {
                obj.label = SemanticLabel::ALL[(obj.label.index() + shift) % n];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(extent: f64, count: usize) -> GeneratorConfig {
        GeneratorConfig {
            extent: [extent, extent],
            object_count: count,
            ..Default::default()
        }
    }

    #[test]
    fn city_is_deterministic() {
        let cfg = small_cfg(200.0, 200);
        let a = generate_city(&cfg, 7).unwrap();
        let b = generate_city(&cfg, 7).unwrap();
        assert_eq!(a.objects.len(), 200);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_city(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(generate_city(&small_cfg(100.0, 0), 1).is_err());
        assert!(generate_city(&small_cfg(0.0, 10), 1).is_err());
    }

    #[test]
    fn centers_are_point_means_and_inside_bounds() {
        let city = generate_city(&small_cfg(100.0, 50), 3).unwrap();
        assert_eq!(city.objects.len(), 50);
        for o in &city.objects {
            assert!(city.bounds.contains(o.center), "{:?}", o.center);
            assert_eq!(o.center, mean_point(&o.points));
            assert!(!o.points.is_empty());
        }
    }

    #[test]
    fn sliding_windows_over_fifty_meters() {
        assert_eq!(window_origins(0.0, 50.0, 30.0, 10.0), vec![0.0, 10.0, 20.0]);
        assert_eq!(window_origins(0.0, 20.0, 30.0, 10.0), vec![0.0]);
        assert_eq!(window_origins(0.0, 55.0, 30.0, 10.0).len(), 4);
    }

    fn single_object_city() -> CityMap {
        let obj = SceneObject::new(
            0,
            vec![[5.0, 5.0, 0.0]],
            SemanticLabel::Pole,
            ColorName::Gray,
            [0.5; 3],
        )
        .unwrap();
        CityMap {
            scene_id: "scene-0".into(),
            bounds: Aabb {
                min: [0.0; 3],
                max: [50.0, 50.0, 1.0],
            },
            objects: vec![obj],
        }
    }

    #[test]
    fn single_object_lands_in_every_covering_cube() {
        let city = single_object_city();
        let subs = partition_city(&city, &PartitionConfig::default(), 0).unwrap();
        // only the window at origin (0,0) covers (5,5); the other eight are empty
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].origin, [0.0, 0.0, 0.0]);
        assert_eq!(subs[0].objects, vec![0]);
    }

    #[test]
    fn partition_rejects_bad_stride() {
        let city = single_object_city();
        let cfg = PartitionConfig {
            stride: 40.0,
            ..Default::default()
        };
        assert!(partition_city(&city, &cfg, 0).is_err());
    }

    #[test]
    fn dense_city_truncates_to_nearest_center() {
        let cfg = small_cfg(40.0, 150);
        let city = generate_city(&cfg, 5).unwrap();
        let subs = partition_city(&city, &PartitionConfig::default(), 0).unwrap();
        for s in &subs {
            assert!(s.objects.len() <= MAX_OBJECTS);
            let c = s.center();
            let d = |id: u32| -> f64 { (0..3).map(|k| (city.object(id).center[k] - c[k]).powi(2)).sum() };
            let worst_kept = s.objects.iter().map(|&o| d(o)).fold(0.0, f64::max);
            for o in &city.objects {
                if s.contains(o.center) && !s.objects.contains(&o.id) {
                    assert!(d(o.id) >= worst_kept);
                }
            }
        }
    }

    #[test]
    fn east_hint_for_object_on_positive_x() {
        let mk = |id, x: f64, y: f64| {
            SceneObject::new(id, vec![[x, y, 1.0]], SemanticLabel::ALL[id as usize % 8], ColorName::Red, [0.7, 0.1, 0.1])
                .unwrap()
        };
        let city = CityMap {
            scene_id: "scene-0".into(),
            bounds: Aabb {
                min: [0.0; 3],
                max: [30.0, 30.0, 2.0],
            },
            objects: vec![mk(0, 25.0, 15.0), mk(1, 5.0, 5.0), mk(2, 28.0, 28.0)],
        };
        let subs = partition_city(&city, &PartitionConfig::default(), 0).unwrap();
        let cfg = QueryConfig {
            num_hints: 1,
            ..Default::default()
        };
        let q = generate_query(0, &city, &subs, [15.0, 15.0], &cfg, 0).unwrap();
        assert_eq!(q.hints[0].relation, Direction::East);
        assert_eq!(q.hints[0].object_ref, 0);
        assert_eq!(q.positive_submaps, vec![0]);
    }

    #[test]
    fn too_few_nearby_objects_is_an_error() {
        let city = single_object_city();
        let subs = partition_city(&city, &PartitionConfig::default(), 0).unwrap();
        let err = generate_query(0, &city, &subs, [6.0, 6.0], &QueryConfig::default(), 0).unwrap_err();
        match err {
            Error::TooFewHintObjects { found, needed, .. } => {
                assert_eq!((found, needed), (1, 5));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn query_hints_are_a_partial_subset_of_positives() {
        let cfg = DatasetConfig {
            queries_per_scene: 40,
            ..Default::default()
        };
        let split = generate_split("t", &cfg, 3, 0, 1).unwrap();
        split.validate().unwrap();
        for q in &split.queries {
            assert_eq!(q.hints.len(), 5);
            assert!(!q.positive_submaps.is_empty());
            let mut union = BTreeSet::new();
            for &p in &q.positive_submaps {
                let s = split.submap(p);
                assert!(s.footprint_contains(q.target));
                union.extend(s.objects.iter().copied());
            }
            for h in &q.hints {
                assert!(union.contains(&h.object_ref));
                assert_eq!(parse_hint(&h.text).unwrap(), (h.label, h.color, h.relation, h.distance_band));
            }
        }
    }

    #[test]
    fn centroid_queries_target_the_hint_centroid() {
        let cfg = DatasetConfig {
            queries_per_scene: 20,
            query: QueryConfig {
                mode: QueryMode::Centroid,
                ..Default::default()
            },
            ..Default::default()
        };
        let split = generate_split("t", &cfg, 9, 0, 1).unwrap();
        let city = &split.scenes[0];
        for q in &split.queries {
            let n = q.hints.len() as f64;
            let cx: f64 = q.hints.iter().map(|h| city.object(h.object_ref).center[0]).sum::<f64>() / n;
            assert!((cx - q.target[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn label_noise_extremes() {
        let cfg = DatasetConfig {
            queries_per_scene: 5,
            ..Default::default()
        };
        let split = generate_split("t", &cfg, 1, 0, 1).unwrap();
        assert_eq!(inject_label_noise(&split, 0.0, 4).unwrap(), split);
        let flipped = inject_label_noise(&split, 1.0, 4).unwrap();
        for (a, b) in split.scenes[0].objects.iter().zip(&flipped.scenes[0].objects) {
            assert_ne!(a.label, b.label);
            assert_eq!((a.color, a.center, &a.points), (b.color, b.center, &b.points));
        }
        assert_eq!(flipped.queries, split.queries);
        assert!(inject_label_noise(&split, 1.5, 0).is_err());
    }
}
