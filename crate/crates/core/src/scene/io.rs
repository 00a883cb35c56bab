//! Line-delimited dataset files.
//!
//! One JSON record per line, discriminated by a `kind` field. The first line
//! is the `meta` record carrying the record counts; objects, submaps and
//! queries follow in that order. Field order is fixed by the record structs,
//! and floats print in shortest round-trip form, so equal splits serialize to
//! identical bytes.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Aabb, CityMap, ColorName, DatasetSplit, LocalizedQuery, SceneObject, SemanticLabel, Submap};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SceneHeader {
    scene_id: String,
    bounds: Aabb,
    objects: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    name: String,
    seed: u64,
    config_hash: String,
    scenes: Vec<SceneHeader>,
    submaps: usize,
    queries: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    scene_id: String,
    id: u32,
    label: SemanticLabel,
    color: ColorName,
    rgb: [f64; 3],
    center: [f64; 3],
    points: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta(Meta),
    Object(ObjectRecord),
    Submap(Submap),
    Query(LocalizedQuery),
}

fn write_record(out: &mut Vec<u8>, r: &Record) -> Result<()> {
    serde_json::to_writer(&mut *out, r)?;
    out.push(b'\n');
    Ok(())
}

/// Serializes a split to its line-delimited form.
pub fn to_bytes(split: &DatasetSplit) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let meta = Meta {
        version: FORMAT_VERSION,
        name: split.name.clone(),
        seed: split.seed,
        config_hash: split.config_hash.clone(),
        scenes: split
            .scenes
            .iter()
            .map(|s| SceneHeader {
                scene_id: s.scene_id.clone(),
                bounds: s.bounds,
                objects: s.objects.len(),
            })
            .collect(),
        submaps: split.submaps.len(),
        queries: split.queries.len(),
    };
    write_record(&mut out, &Record::Meta(meta))?;
    for scene in &split.scenes {
        for o in &scene.objects {
            let rec = ObjectRecord {
                scene_id: scene.scene_id.clone(),
                id: o.id,
                label: o.label,
                color: o.color,
                rgb: o.rgb,
                center: o.center,
                points: o.points.clone(),
            };
            write_record(&mut out, &Record::Object(rec))?;
        }
    }
    for s in &split.submaps {
        write_record(&mut out, &Record::Submap(s.clone()))?;
    }
    for q in &split.queries {
        write_record(&mut out, &Record::Query(q.clone()))?;
    }
    Ok(out)
}

/// Writes the split atomically.
pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(split)?)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_reader(BufReader::new(f))
}

pub fn from_reader<R: BufRead>(reader: R) -> Result<DatasetSplit> {
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let mut meta: Option<Meta> = None;
    let mut scenes: Vec<CityMap> = Vec::new();
    let mut submaps = Vec::new();
    let mut queries = Vec::new();
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line?;
        if line.trim().is_empty() {
            return Err(parse_err(lineno, "empty line".into()));
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match (rec, &meta) {
            (Record::Meta(m), None) => {
                if m.version != FORMAT_VERSION {
                    return Err(parse_err(lineno, format!("unsupported format version {}", m.version)));
                }
                scenes = m
                    .scenes
                    .iter()
                    .map(|h| CityMap {
                        scene_id: h.scene_id.clone(),
                        bounds: h.bounds,
                        objects: Vec::with_capacity(h.objects),
                    })
                    .collect();
                meta = Some(m);
            }
            (Record::Meta(_), Some(_)) => return Err(parse_err(lineno, "duplicate meta record".into())),
            (_, None) => return Err(parse_err(lineno, "first record must be meta".into())),
            (Record::Object(o), Some(_)) => {
                if !submaps.is_empty() || !queries.is_empty() {
                    return Err(parse_err(lineno, "object record after submaps".into()));
                }
                let scene = scenes
                    .iter_mut()
                    .find(|s| s.scene_id == o.scene_id)
                    .ok_or_else(|| parse_err(lineno, format!("unknown scene {:?}", o.scene_id)))?;
                if o.id as usize != scene.objects.len() {
                    return Err(parse_err(lineno, format!("object id {} out of sequence", o.id)));
                }
                let obj = SceneObject::new(o.id, o.points, o.label, o.color, o.rgb)
                    .map_err(|e| parse_err(lineno, e.to_string()))?;
                if obj.center != o.center {
                    return Err(parse_err(lineno, "center differs from the point mean".into()));
                }
                scene.objects.push(obj);
            }
            (Record::Submap(s), Some(_)) => {
                if !queries.is_empty() {
                    return Err(parse_err(lineno, "submap record after queries".into()));
                }
                submaps.push(s);
            }
            (Record::Query(q), Some(_)) => queries.push(q),
        }
    }
    let meta = meta.ok_or_else(|| parse_err(1, "missing meta record".into()))?;
    let truncated = |what: &str, want: usize, got: usize| {
        parse_err(
            last_line + 1,
            format!("file ends after {got} of {want} {what} records"),
        )
    };
    for (h, s) in meta.scenes.iter().zip(&scenes) {
        if s.objects.len() != h.objects {
            return Err(truncated("object", h.objects, s.objects.len()));
        }
    }
    if submaps.len() != meta.submaps {
        return Err(truncated("submap", meta.submaps, submaps.len()));
    }
    if queries.len() != meta.queries {
        return Err(truncated("query", meta.queries, queries.len()));
    }
    let split = DatasetSplit {
        name: meta.name,
        seed: meta.seed,
        config_hash: meta.config_hash,
        scenes,
        submaps,
        queries,
    };
    split.validate()?;
    Ok(split)
}
