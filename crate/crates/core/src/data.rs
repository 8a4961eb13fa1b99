//! Synthetic attribute world, triplet sampling and the on-disk triplet formats.
//!
//! # Triplet file
//!
//! UTF-8, one record per line, fields separated by a single tab:
//!
//! ```text
//! <reference_id> \t <text payload> \t <target_id> [\t subset=<id>,<id>,...] [\t changes=<attr>:<value>,...]
//! ```
//!
//! The text payload is a comma-separated list of decimal floats whose length
//! must equal the descriptor's `text_dim`. Ids are gallery manifest ids.
//! `subset` lists the candidate ids for subset recall; `changes` lists the
//! ground-truth attribute edits (0-based attribute and value) of synthetic
//! records. Blank lines and lines starting with `#` are ignored.
//!
//! # Gallery manifest
//!
//! One `<id> \t <payload file>` line per image, the path relative to the
//! manifest's directory. Each payload file holds one comma-separated line of
//! floats.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::RawInput;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Retry budget per triplet when the edited latent is not in the gallery.
pub const MAX_SAMPLE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub noise_std: f64,
    pub render_seed: u64,
    pub gallery_size: usize,
    pub image_dim: usize,
}

impl WorldSpec {
    /// Length of a modification payload: one `(V + 1)`-way one-hot slot per attribute.
    pub fn text_dim(&self) -> usize {
        self.num_attributes * (self.values_per_attribute + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_attributes < 1 {
            return Err(Error::Config("world needs at least one attribute".into()));
        }
        if self.values_per_attribute < 2 {
            return Err(Error::Config("each attribute needs at least two values".into()));
        }
        if self.gallery_size < 2 {
            return Err(Error::Config("gallery needs at least two images".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        let capacity = (self.values_per_attribute as u128)
            .checked_pow(self.num_attributes as u32)
            .unwrap_or(u128::MAX);
        if self.gallery_size as u128 > capacity {
            return Err(Error::Config(format!(
                "{} distinct images requested but only {capacity} latent vectors exist",
                self.gallery_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeChange {
    pub attribute: usize,
    pub value: usize,
}

/// Ids and payloads of the retrieval gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub ids: Vec<String>,
    pub payloads: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn payload(&self, i: usize) -> &[f64] {
        &self.payloads[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `image_dim x (A*V)` render map.
    pub render_map: Matrix,
    pub latents: Vec<Vec<usize>>,
    pub gallery: Gallery,
    lookup: HashMap<Vec<usize>, usize>,
}

pub fn gallery_id(i: usize) -> String {
    format!("img_{i:05}")
}

/// Draws the render map, then `G` distinct latent vectors, then per-image noise,
/// all from one ChaCha8 stream seeded with `render_seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (a, v) = (spec.num_attributes, spec.values_per_attribute);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.render_seed);
    let map_dist = Normal::new(0.0, 1.0 / (a as f64).sqrt()).expect("positive std");
    let render_map = Matrix::from_fn(spec.image_dim, a * v, |_, _| map_dist.sample(&mut rng));

    let mut latents = Vec::with_capacity(spec.gallery_size);
    let mut lookup = HashMap::with_capacity(spec.gallery_size);
    while latents.len() < spec.gallery_size {
        let latent: Vec<usize> = (0..a).map(|_| rng.random_range(0..v)).collect();
        if !lookup.contains_key(&latent) {
            lookup.insert(latent.clone(), latents.len());
            latents.push(latent);
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let payloads = latents
        .iter()
        .map(|latent| {
            let mut p = render_clean(&render_map, v, latent);
            p.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            p
        })
        .collect();
    let ids = (0..spec.gallery_size).map(gallery_id).collect();
    Ok(World {
        spec: spec.clone(),
        render_map,
        latents,
        gallery: Gallery { ids, payloads },
        lookup,
    })
}

/// Noise-free payload: the render map applied to the one-hot latent encoding.
pub fn render_clean(render_map: &Matrix, values_per_attribute: usize, latent: &[usize]) -> Vec<f64> {
    (0..render_map.rows())
        .map(|i| {
            latent
                .iter()
                .enumerate()
                .map(|(attr, &val)| render_map.get(i, attr * values_per_attribute + val))
                .sum()
        })
        .collect()
}

impl World {
    pub fn find(&self, latent: &[usize]) -> Option<usize> {
        self.lookup.get(latent).copied()
    }

    pub fn text_dim(&self) -> usize {
        self.spec.text_dim()
    }

    pub fn modification(&self, changes: &[AttributeChange]) -> RawInput {
        encode_modification(changes, self.spec.num_attributes, self.spec.values_per_attribute)
    }
}

/// Slot encoding of a modification: slot `a` is one-hot over `V + 1` positions,
/// position 0 meaning "unchanged" and position `v + 1` meaning "set to value `v`".
pub fn encode_modification(changes: &[AttributeChange], num_attributes: usize, values: usize) -> RawInput {
    let width = values + 1;
    let mut payload = vec![0.0; num_attributes * width];
    for a in 0..num_attributes {
        payload[a * width] = 1.0;
    }
    for c in changes {
        payload[c.attribute * width] = 0.0;
        payload[c.attribute * width + c.value + 1] = 1.0;
    }
    RawInput::text(payload)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub reference_id: usize,
    pub modification: RawInput,
    pub target_id: usize,
    /// Ground-truth edits, synthetic data only.
    pub changed_attributes: Option<Vec<AttributeChange>>,
    /// Candidate gallery indices for subset recall.
    pub subset: Option<Vec<usize>>,
}

pub fn sample_triplets(world: &World, n: usize, max_changes: usize, seed: u64) -> Result<Vec<Triplet>> {
    if max_changes < 1 || max_changes > world.spec.num_attributes {
        return Err(Error::Config(format!(
            "max_changes must be in 1..={}, got {max_changes}",
            world.spec.num_attributes
        )));
    }
    sample_triplets_with(world, n, 1, max_changes, seed)
}

/// Sampling with an explicit change-count range; `min_changes = max_changes = 0`
/// yields identity edits.
///
/// Per attempt, from one ChaCha8 stream: reference index uniform in `0..G`,
/// change count uniform in `min..=max`, that many distinct attributes via
/// `rand::seq::index::sample` (then sorted), and for each a shift uniform in
/// `1..V` applied modulo `V`. Attempts repeat until the edited latent exists.
pub fn sample_triplets_with(
    world: &World,
    n: usize,
    min_changes: usize,
    max_changes: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let (a, v, g) = (
        world.spec.num_attributes,
        world.spec.values_per_attribute,
        world.spec.gallery_size,
    );
    if min_changes > max_changes || max_changes > a {
        return Err(Error::Config(format!(
            "invalid change range {min_changes}..={max_changes} for {a} attributes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut found = None;
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let reference = rng.random_range(0..g);
            let count = rng.random_range(min_changes..=max_changes);
            let mut attrs = index::sample(&mut rng, a, count).into_vec();
            attrs.sort_unstable();
            let mut latent = world.latents[reference].clone();
            let mut changes = Vec::with_capacity(count);
            for attr in attrs {
                let value = (latent[attr] + rng.random_range(1..v)) % v;
                latent[attr] = value;
                changes.push(AttributeChange {
                    attribute: attr,
                    value,
                });
            }
            if let Some(target) = world.find(&latent) {
                found = Some((reference, target, changes));
                break;
            }
        }
        let (reference, target, changes) = found.ok_or_else(|| {
            Error::Config(format!(
                "triplet {i}: no edited latent found in the gallery after {MAX_SAMPLE_ATTEMPTS} attempts"
            ))
        })?;
        out.push(Triplet {
            reference_id: reference,
            modification: world.modification(&changes),
            target_id: target,
            changed_attributes: Some(changes),
            subset: None,
        });
    }
    Ok(out)
}

/// `B` aligned payloads ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub references: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub changes: Vec<Option<Vec<AttributeChange>>>,
}

impl TripletBatch {
    pub fn assemble<'a>(gallery: &Gallery, triplets: impl IntoIterator<Item = &'a Triplet>) -> Result<Self> {
        let mut b = TripletBatch {
            references: Vec::new(),
            texts: Vec::new(),
            targets: Vec::new(),
            changes: Vec::new(),
        };
        for t in triplets {
            if t.reference_id >= gallery.len() || t.target_id >= gallery.len() {
                return Err(Error::InvalidInput(format!(
                    "triplet refers to gallery index outside 0..{}",
                    gallery.len()
                )));
            }
            b.references.push(gallery.payloads[t.reference_id].clone());
            b.texts.push(t.modification.payload.clone());
            b.targets.push(gallery.payloads[t.target_id].clone());
            b.changes.push(t.changed_attributes.clone());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

// ---- file formats ------------------------------------------------------------

/// Descriptor for [`ingest_triplet_file`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletFormat {
    pub text_dim: usize,
}

pub const TRIPLET_HEADER: &str = "# tgcir-triplets v1";

fn join_floats(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 8);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x}").expect("string write");
    }
    s
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number"))
                .and_then(|x| if x.is_finite() { Ok(x) } else { Err(format!("`{t}` is not finite")) })
        })
        .collect()
}

pub fn format_triplets(triplets: &[Triplet], gallery: &Gallery) -> Result<String> {
    let mut out = String::new();
    out.push_str(TRIPLET_HEADER);
    out.push('\n');
    let id = |i: usize| -> Result<&str> {
        gallery
            .ids
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidInput(format!("gallery index {i} out of range")))
    };
    for t in triplets {
        write!(
            out,
            "{}\t{}\t{}",
            id(t.reference_id)?,
            join_floats(&t.modification.payload),
            id(t.target_id)?
        )
        .expect("string write");
        if let Some(subset) = &t.subset {
            let ids: Result<Vec<&str>> = subset.iter().map(|&i| id(i)).collect();
            write!(out, "\tsubset={}", ids?.join(",")).expect("string write");
        }
        if let Some(changes) = &t.changed_attributes {
            let cs: Vec<String> = changes.iter().map(|c| format!("{}:{}", c.attribute, c.value)).collect();
            write!(out, "\tchanges={}", cs.join(",")).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_triplet_file(path: &Path, triplets: &[Triplet], gallery: &Gallery) -> Result<()> {
    let text = format_triplets(triplets, gallery)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ingest_triplet_file(path: &Path, format: &TripletFormat, gallery: &Gallery) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text, path, format, gallery)
}

pub fn parse_triplets(text: &str, path: &Path, format: &TripletFormat, gallery: &Gallery) -> Result<Vec<Triplet>> {
    let index = gallery.index();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let resolve = |id: &str| -> Result<usize> {
            index
                .get(id.trim())
                .copied()
                .ok_or_else(|| err(format!("unknown gallery id `{}`", id.trim())))
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err(format!("expected at least 3 tab-separated fields, found {}", fields.len())));
        }
        let reference_id = resolve(fields[0])?;
        let payload = parse_floats(fields[1]).map_err(&err)?;
        if payload.len() != format.text_dim {
            return Err(err(format!(
                "text payload has {} values, descriptor expects {}",
                payload.len(),
                format.text_dim
            )));
        }
        let target_id = resolve(fields[2])?;
        let mut subset = None;
        let mut changed = None;
        for extra in &fields[3..] {
            if let Some(list) = extra.strip_prefix("subset=") {
                let ids: Result<Vec<usize>> = if list.is_empty() {
                    Ok(Vec::new())
                } else {
                    list.split(',').map(resolve).collect()
                };
                subset = Some(ids?);
            } else if let Some(list) = extra.strip_prefix("changes=") {
                let mut cs = Vec::new();
                for item in list.split(',').filter(|s| !s.is_empty()) {
                    let (a, v) = item
                        .split_once(':')
                        .ok_or_else(|| err(format!("change `{item}` is not attr:value")))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| err(format!("change `{item}` has a non-integer part")))
                    };
                    cs.push(AttributeChange {
                        attribute: parse(a)?,
                        value: parse(v)?,
                    });
                }
                changed = Some(cs);
            } else {
                return Err(err(format!("unrecognized field `{extra}`")));
            }
        }
        out.push(Triplet {
            reference_id,
            modification: RawInput::text(payload),
            target_id,
            changed_attributes: changed,
            subset,
        });
    }
    Ok(out)
}

/// Writes one payload file per image under `dir/gallery/` plus `dir/gallery.tsv`.
pub fn write_gallery(dir: &Path, gallery: &Gallery) -> Result<PathBuf> {
    let payload_dir = dir.join("gallery");
    fs::create_dir_all(&payload_dir).map_err(|e| Error::io(&payload_dir, e))?;
    let mut manifest = String::new();
    for (id, payload) in gallery.ids.iter().zip(&gallery.payloads) {
        let rel = format!("gallery/{id}.txt");
        let path = dir.join(&rel);
        fs::write(&path, join_floats(payload) + "\n").map_err(|e| Error::io(&path, e))?;
        writeln!(manifest, "{id}\t{rel}").expect("string write");
    }
    let manifest_path = dir.join("gallery.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_gallery(manifest: &Path, image_dim: Option<usize>) -> Result<Gallery> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut ids = Vec::new();
    let mut payloads = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rel) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `<id>\\t<payload file>`".into()))?;
        if seen.insert(id.to_string(), ()).is_some() {
            return Err(err(format!("duplicate gallery id `{id}`")));
        }
        let path = base.join(rel.trim());
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let payload = parse_floats(body.trim()).map_err(|m| Error::Parse {
            path: path.clone(),
            line: 1,
            message: m,
        })?;
        if let Some(dim) = image_dim {
            if payload.len() != dim {
                return Err(err(format!("payload of `{id}` has {} values, expected {dim}", payload.len())));
            }
        }
        ids.push(id.to_string());
        payloads.push(payload);
    }
    Ok(Gallery { ids, payloads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(a: usize, v: usize, g: usize, noise: f64) -> WorldSpec {
        WorldSpec {
            num_attributes: a,
            values_per_attribute: v,
            noise_std: noise,
            render_seed: 17,
            gallery_size: g,
            image_dim: 12,
        }
    }

    #[test]
    fn world_is_deterministic_and_distinct() {
        let s = spec(4, 3, 40, 0.1);
        let w1 = generate_world(&s).unwrap();
        let w2 = generate_world(&s).unwrap();
        assert_eq!(w1, w2);
        let set: HashSet<_> = w1.latents.iter().collect();
        assert_eq!(set.len(), 40);
        assert!(w1.latents.iter().flatten().all(|&x| x < 3));
    }

    #[test]
    fn full_world_enumerates_every_latent() {
        let w = generate_world(&spec(3, 3, 27, 0.0)).unwrap();
        let set: HashSet<_> = w.latents.iter().cloned().collect();
        assert_eq!(set.len(), 27);
        assert!(matches!(generate_world(&spec(3, 3, 28, 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_render_depends_only_on_latent() {
        let w = generate_world(&spec(3, 4, 10, 0.0)).unwrap();
        for (latent, payload) in w.latents.iter().zip(&w.gallery.payloads) {
            assert_eq!(&render_clean(&w.render_map, 4, latent), payload);
        }
        let a = render_clean(&w.render_map, 4, &[1, 2, 3]);
        let b = render_clean(&w.render_map, 4, &[1, 2, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_world(&spec(0, 3, 2, 0.0)).is_err());
        assert!(generate_world(&spec(2, 1, 2, 0.0)).is_err());
        assert!(generate_world(&spec(2, 3, 1, 0.0)).is_err());
        assert!(generate_world(&spec(2, 3, 4, -1.0)).is_err());
    }

    #[test]
    fn triplets_apply_exactly_the_recorded_changes() {
        let w = generate_world(&spec(4, 3, 60, 0.05)).unwrap();
        let ts = sample_triplets(&w, 200, 2, 5).unwrap();
        for t in &ts {
            let changes = t.changed_attributes.as_ref().unwrap();
            assert!((1..=2).contains(&changes.len()));
            let mut latent = w.latents[t.reference_id].clone();
            for c in changes {
                assert_ne!(latent[c.attribute], c.value);
                latent[c.attribute] = c.value;
            }
            assert_eq!(w.latents[t.target_id], latent);
            assert_eq!(t.modification, w.modification(changes));
        }
        assert!(sample_triplets(&w, 1, 0, 0).is_err());
        assert!(sample_triplets(&w, 1, 5, 0).is_err());
    }

    #[test]
    fn zero_changes_target_the_reference() {
        let w = generate_world(&spec(3, 3, 10, 0.0)).unwrap();
        for t in sample_triplets_with(&w, 20, 0, 0, 1).unwrap() {
            assert_eq!(t.reference_id, t.target_id);
            assert_eq!(t.changed_attributes.as_deref(), Some(&[][..]));
        }
    }

    #[test]
    fn modification_slots() {
        let m = encode_modification(&[AttributeChange { attribute: 1, value: 2 }], 2, 3);
        assert_eq!(m.payload, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn triplet_file_errors_carry_line_numbers() {
        let w = generate_world(&spec(2, 2, 4, 0.0)).unwrap();
        let fmt = TripletFormat { text_dim: 6 };
        let p = Path::new("mem.tsv");
        assert!(parse_triplets("", p, &fmt, &w.gallery).unwrap().is_empty());
        let text = "# header\nimg_00000\t1,0,0,1,0,0\timg_00001\nimg_00000\t1,0,0,1,0,0\timg_99999\n";
        match parse_triplets(text, p, &fmt, &w.gallery) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("img_99999"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = "img_00000\t1,0,0\timg_00001\n";
        assert!(matches!(parse_triplets(short, p, &fmt, &w.gallery), Err(Error::Parse { line: 1, .. })));
        let junk = "img_00000\t1,0,0,1,0,0\timg_00001\tfoo=bar\n";
        assert!(matches!(parse_triplets(junk, p, &fmt, &w.gallery), Err(Error::Parse { .. })));
    }
}
