//! Procedural pedestrian images with attribute-grammar captions.
//!
//! Every person owns a unique combination of identity attributes, drawn as
//! color blocks (hair, collar, torso, legs). Each image additionally carries
//! instance attributes (action, carried object) drawn as small marks, and a
//! camera-dependent tint, shift and noise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, DatasetModality, ManifestEntry, ManifestMeta, Split};
use crate::error::{Error, Result};

pub const GENDERS: [&str; 2] = ["man", "woman"];
pub const HAIR: [&str; 6] = ["black", "brown", "blonde", "red", "gray", "white"];
pub const COLORS: [&str; 10] = [
    "red", "green", "blue", "yellow", "white", "black", "purple", "orange", "pink", "gray",
];
pub const ACTIONS: [&str; 4] = ["walking", "standing", "running", "sitting"];
pub const OBJECTS: [&str; 5] = ["bag", "umbrella", "phone", "bottle", "backpack"];

fn rgb(word: &str) -> [f32; 3] {
    match word {
        "red" => [200., 30., 30.],
        "green" => [30., 160., 50.],
        "blue" => [30., 60., 200.],
        "yellow" => [230., 210., 40.],
        "white" => [235., 235., 235.],
        "black" => [20., 20., 20.],
        "purple" => [130., 40., 160.],
        "orange" => [240., 130., 20.],
        "pink" => [240., 150., 190.],
        "gray" => [128., 128., 128.],
        "brown" => [110., 70., 30.],
        "blonde" => [230., 200., 120.],
        "man" => [60., 90., 140.],
        "woman" => [170., 60., 110.],
        _ => [0., 0., 0.],
    }
}

/// Number of values used per attribute; each must not exceed the size of its word list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSizes {
    pub gender: usize,
    pub hair: usize,
    pub top_color: usize,
    pub bottom_color: usize,
    pub action: usize,
    pub carried_object: usize,
}

impl Default for AttributeSizes {
    fn default() -> Self {
        Self {
            gender: 2,
            hair: 4,
            top_color: 8,
            bottom_color: 6,
            action: 4,
            carried_object: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Identities per manifest.
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub n_cameras: usize,
    pub attributes: AttributeSizes,
    /// `[height, width]`
    pub image_size: [usize; 2],
    /// Fraction of training identities present in both manifests.
    pub shared_fraction: f64,
    /// Fraction of each manifest's identities held out for testing.
    pub test_fraction: f64,
    /// Per-pixel uniform noise amplitude, in 8-bit levels.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_identities: 32,
            images_per_identity: 8,
            n_cameras: 4,
            attributes: AttributeSizes::default(),
            image_size: [64, 32],
            shared_fraction: 0.25,
            test_fraction: 0.5,
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_test(&self) -> usize {
        ((self.n_identities as f64 * self.test_fraction).round() as usize)
            .clamp(1, self.n_identities - 1)
    }

    pub fn n_train(&self) -> usize {
        self.n_identities - self.n_test()
    }

    pub fn n_shared(&self) -> usize {
        (self.n_train() as f64 * self.shared_fraction).round() as usize
    }

    /// Distinct persons across both manifests.
    pub fn n_persons(&self) -> usize {
        2 * self.n_identities - self.n_shared()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attributes;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_identities < 2 {
            return bad(format!(
                "n_identities must be >= 2, got {}",
                self.n_identities
            ));
        }
        if self.images_per_identity < 4 {
            return bad(format!(
                "images_per_identity must be >= 4, got {}",
                self.images_per_identity
            ));
        }
        if self.n_cameras < 2 {
            return bad(format!("n_cameras must be >= 2, got {}", self.n_cameras));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction)
            || !(0.0 < self.test_fraction && self.test_fraction < 1.0)
        {
            return bad("shared_fraction must lie in [0, 1] and test_fraction in (0, 1)".into());
        }
        if self.image_size[0] < 16 || self.image_size[1] < 8 {
            return bad(format!("image_size {:?} is too small", self.image_size));
        }
        for (name, n, max) in [
            ("gender", a.gender, GENDERS.len()),
            ("hair", a.hair, HAIR.len()),
            ("top_color", a.top_color, COLORS.len()),
            ("bottom_color", a.bottom_color, COLORS.len()),
            ("action", a.action, ACTIONS.len()),
            ("carried_object", a.carried_object, OBJECTS.len()),
        ] {
            if n == 0 || n > max {
                return bad(format!("attribute {name} size {n} must be in 1..={max}"));
            }
        }
        let combos = a.gender * a.hair * a.top_color * a.bottom_color;
        if combos < self.n_persons() {
            return bad(format!(
                "{combos} identity attribute combinations cannot cover {} persons",
                self.n_persons()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonAttributes {
    pub gender: String,
    pub hair: String,
    pub top_color: String,
    pub bottom_color: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceAttributes {
    pub action: String,
    pub carried_object: String,
}

pub fn caption(p: &PersonAttributes, i: &InstanceAttributes) -> String {
    format!(
        "the {} with {} hair wearing {} top and {} pants, {} and carrying {}",
        p.gender, p.hair, p.top_color, p.bottom_color, i.action, i.carried_object
    )
}

/// Everything the generator decided, keyed by manifest and entry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    /// Indexed by raw identity id.
    pub persons: Vec<PersonAttributes>,
    pub t2i_instances: Vec<InstanceAttributes>,
    pub i2i_instances: Vec<InstanceAttributes>,
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub t2i: DatasetManifest,
    pub i2i: DatasetManifest,
    pub t2i_path: PathBuf,
    pub i2i_path: PathBuf,
    pub attributes: AttributeTable,
}

/// Person ids per role. Raw ids live in one namespace shared by both manifests.
struct Roster {
    t2i_train: Vec<u64>,
    t2i_test: Vec<u64>,
    i2i_train: Vec<u64>,
    i2i_test: Vec<u64>,
}

fn roster(spec: &SyntheticSpec) -> Roster {
    let (n_train, n_test, n_shared) = (
        spec.n_train() as u64,
        spec.n_test() as u64,
        spec.n_shared() as u64,
    );
    let t2i_train: Vec<u64> = (0..n_train).collect();
    let t2i_test: Vec<u64> = (n_train..n_train + n_test).collect();
    let mut next = n_train + n_test;
    let mut i2i_train: Vec<u64> = (0..n_shared).collect();
    i2i_train.extend(next..next + n_train - n_shared);
    next += n_train - n_shared;
    let i2i_test = (next..next + n_test).collect();
    Roster {
        t2i_train,
        t2i_test,
        i2i_train,
        i2i_test,
    }
}

fn person_table(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<PersonAttributes> {
    let a = &spec.attributes;
    let mut combos: Vec<[usize; 4]> =
        Vec::with_capacity(a.gender * a.hair * a.top_color * a.bottom_color);
    for g in 0..a.gender {
        for h in 0..a.hair {
            for t in 0..a.top_color {
                for b in 0..a.bottom_color {
                    combos.push([g, h, t, b]);
                }
            }
        }
    }
    combos.shuffle(rng);
    combos
        .into_iter()
        .take(spec.n_persons())
        .map(|[g, h, t, b]| PersonAttributes {
            gender: GENDERS[g].into(),
            hair: HAIR[h].into(),
            top_color: COLORS[t].into(),
            bottom_color: COLORS[b].into(),
        })
        .collect()
}

fn camera_tint(spec: &SyntheticSpec, camera: usize) -> [f32; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC0FFEE ^ camera as u64);
    [0; 3].map(|_| rng.random_range(0.8f32..1.2))
}

fn fill(img: &mut [f32], w: usize, rows: (usize, usize), cols: (usize, usize), color: [f32; 3]) {
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        }
    }
}

/// Renders one 8-bit RGB image, row-major.
pub fn render(
    spec: &SyntheticSpec,
    person: &PersonAttributes,
    inst: &InstanceAttributes,
    camera: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let [h, w] = spec.image_size;
    let ry = |f: f32| ((f * h as f32).round() as usize).min(h);
    let rx = |f: f32| ((f * w as f32).round() as usize).min(w);
    let mut img = vec![0f32; h * w * 3];
    let bg = [
        150. + 20. * (camera % 3) as f32,
        150.,
        140. + 15. * (camera % 2) as f32,
    ];
    fill(&mut img, w, (0, h), (0, w), bg);

    let skin = [220., 180., 150.];
    fill(
        &mut img,
        w,
        (ry(0.03), ry(0.09)),
        (rx(0.34), rx(0.66)),
        rgb(&person.hair),
    );
    fill(
        &mut img,
        w,
        (ry(0.09), ry(0.18)),
        (rx(0.34), rx(0.66)),
        skin,
    );
    fill(
        &mut img,
        w,
        (ry(0.18), ry(0.23)),
        (rx(0.22), rx(0.78)),
        rgb(&person.gender),
    );
    fill(
        &mut img,
        w,
        (ry(0.23), ry(0.55)),
        (rx(0.22), rx(0.78)),
        rgb(&person.top_color),
    );
    let legs = (ry(0.55), ry(0.95));
    fill(
        &mut img,
        w,
        legs,
        (rx(0.28), rx(0.72)),
        rgb(&person.bottom_color),
    );

    // Action: a dark mark whose position along the legs encodes the pose.
    let k = ACTIONS.iter().position(|a| *a == inst.action).unwrap_or(0) as f32;
    let top = 0.58 + 0.09 * k;
    fill(
        &mut img,
        w,
        (ry(top), ry(top + 0.06)),
        (rx(0.06), rx(0.2)),
        [40., 40., 40.],
    );
    // Carried object: a colored patch beside the torso.
    let o = OBJECTS
        .iter()
        .position(|a| *a == inst.carried_object)
        .unwrap_or(0);
    let object_color = [
        [90., 50., 20.],
        [20., 20., 120.],
        [10., 10., 10.],
        [60., 200., 220.],
        [180., 90., 40.],
    ][o];
    fill(
        &mut img,
        w,
        (ry(0.32), ry(0.45)),
        (rx(0.8), rx(0.97)),
        object_color,
    );

    let tint = camera_tint(spec, camera);
    let shift = rng.random_range(-1i64..=1) + (camera as i64 % 3) - 1;
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as i64 - shift).clamp(0, w as i64 - 1) as usize;
            for c in 0..3 {
                let noise = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..spec.noise)
                } else {
                    0.0
                };
                let v = img[(y * w + sx) * 3 + c] * tint[c] + noise;
                out[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn write_png(path: &Path, pixels: Vec<u8>, [h, w]: [usize; 2]) -> Result<()> {
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Data(format!("pixel buffer does not match {h}x{w}")))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

struct Builder<'a> {
    spec: &'a SyntheticSpec,
    persons: &'a [PersonAttributes],
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    instances: Vec<InstanceAttributes>,
}

impl Builder<'_> {
    fn add_identity(
        &mut self,
        modality: DatasetModality,
        id: u64,
        test: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let spec = self.spec;
        let n = spec.images_per_identity;
        let n_query = (n / 4).max(1);
        for k in 0..n {
            let inst = InstanceAttributes {
                action: ACTIONS[rng.random_range(0..spec.attributes.action)].into(),
                carried_object: OBJECTS[rng.random_range(0..spec.attributes.carried_object)].into(),
            };
            let camera = (k + id as usize) % spec.n_cameras;
            let split = match (modality, test) {
                (_, false) => Split::Train,
                (DatasetModality::T2i, true) => Split::Gallery,
                (DatasetModality::I2i, true) if k < n_query => Split::Query,
                (DatasetModality::I2i, true) => Split::Gallery,
            };
            let person = &self.persons[id as usize];
            let captions = match modality {
                DatasetModality::T2i => vec![caption(person, &inst)],
                DatasetModality::I2i => vec![],
            };
            let rel = format!("images/{id:04}_{k:02}.png");
            write_png(
                &self.dir.join(&rel),
                render(spec, person, &inst, camera, rng),
                spec.image_size,
            )?;
            self.entries.push(ManifestEntry {
                image_path: rel,
                identity: id,
                camera: camera as u32,
                split,
                captions,
            });
            self.instances.push(inst);
        }
        Ok(())
    }
}

fn build_manifest(
    spec: &SyntheticSpec,
    persons: &[PersonAttributes],
    out_dir: &Path,
    modality: DatasetModality,
    train: &[u64],
    test: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<(DatasetManifest, PathBuf, Vec<InstanceAttributes>)> {
    let name = match modality {
        DatasetModality::T2i => "synthetic_t2i",
        DatasetModality::I2i => "synthetic_i2i",
    };
    let dir = out_dir.join(name);
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut b = Builder {
        spec,
        persons,
        dir: dir.clone(),
        entries: vec![],
        instances: vec![],
    };
    for &id in train {
        b.add_identity(modality, id, false, rng)?;
    }
    for &id in test {
        b.add_identity(modality, id, true, rng)?;
    }
    let manifest = DatasetManifest {
        meta: ManifestMeta {
            name: name.into(),
            modality,
            image_size: spec.image_size,
            identity_namespace: Some(format!("synthetic-{}", spec.seed)),
        },
        entries: b.entries,
        root: dir.clone(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok((manifest, path, b.instances))
}

/// Writes `<out>/synthetic_t2i/` and `<out>/synthetic_i2i/` (manifest, images) and `<out>/attributes.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<GeneratedData> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let persons = person_table(spec, &mut rng);
    let r = roster(spec);
    let mut t2i_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut i2i_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let (t2i, t2i_path, t2i_instances) = build_manifest(
        spec,
        &persons,
        out_dir,
        DatasetModality::T2i,
        &r.t2i_train,
        &r.t2i_test,
        &mut t2i_rng,
    )?;
    let (i2i, i2i_path, i2i_instances) = build_manifest(
        spec,
        &persons,
        out_dir,
        DatasetModality::I2i,
        &r.i2i_train,
        &r.i2i_test,
        &mut i2i_rng,
    )?;
    let attributes = AttributeTable {
        persons,
        t2i_instances,
        i2i_instances,
    };
    let attr_path = out_dir.join("attributes.json");
    std::fs::write(&attr_path, serde_json::to_string_pretty(&attributes)?)
        .map_err(|e| Error::io(&attr_path, e))?;
    Ok(GeneratedData {
        t2i,
        i2i,
        t2i_path,
        i2i_path,
        attributes,
    })
}

/// Persons that appear in the training split of both manifests.
pub fn shared_train_identities(a: &DatasetManifest, b: &DatasetManifest) -> BTreeSet<u64> {
    a.train_identities()
        .intersection(&b.train_identities())
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::check_no_leakage;
    use std::collections::BTreeMap;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_identities: 8,
            images_per_identity: 8,
            ..Default::default()
        }
    }

    #[test]
    fn counts_per_manifest() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_synthetic(&small(), dir.path())?;
        for m in [&g.t2i, &g.i2i] {
            assert_eq!(m.entries.len(), 64);
            let mut per_id: BTreeMap<u64, usize> = BTreeMap::new();
            for e in &m.entries {
                *per_id.entry(e.identity).or_default() += 1;
            }
            assert_eq!(per_id.len(), 8);
            assert!(per_id.values().all(|&c| c == 8));
        }
        check_no_leakage(&[&g.t2i, &g.i2i])?;
        Ok(())
    }

    #[test]
    fn byte_identical_reruns() -> Result<()> {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small();
        let ga = generate_synthetic(&spec, a.path())?;
        generate_synthetic(&spec, b.path())?;
        for e in &ga.i2i.entries {
            let pa = a.path().join("synthetic_i2i").join(&e.image_path);
            let pb = b.path().join("synthetic_i2i").join(&e.image_path);
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        for f in [
            "synthetic_t2i/manifest.json",
            "synthetic_i2i/manifest.json",
            "attributes.json",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        Ok(())
    }

    #[test]
    fn captions_name_the_generating_top_color() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_synthetic(&small(), dir.path())?;
        for (e, inst) in g.t2i.entries.iter().zip(&g.attributes.t2i_instances) {
            let person = &g.attributes.persons[e.identity as usize];
            let words: Vec<&str> = e.captions[0]
                .split([' ', ','])
                .filter(|w| !w.is_empty())
                .collect();
            let wearing = words.iter().position(|w| *w == "wearing").unwrap();
            assert_eq!(words[wearing + 1], person.top_color);
            assert_eq!(words[1], person.gender);
            assert_eq!(words[3], person.hair);
            assert_eq!(words[wearing + 4], person.bottom_color);
            assert_eq!(words[wearing + 6], inst.action);
            assert_eq!(*words.last().unwrap(), inst.carried_object);
        }
        Ok(())
    }

    #[test]
    fn identities_are_shared_and_test_sets_are_disjoint() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_identities: 16,
            ..Default::default()
        };
        let g = generate_synthetic(&spec, dir.path())?;
        assert_eq!(
            shared_train_identities(&g.t2i, &g.i2i).len(),
            spec.n_shared()
        );
        let train: BTreeSet<u64> = g
            .t2i
            .train_identities()
            .union(&g.i2i.train_identities())
            .copied()
            .collect();
        for m in [&g.t2i, &g.i2i] {
            assert!(m
                .entries
                .iter()
                .filter(|e| e.split != Split::Train)
                .all(|e| !train.contains(&e.identity)));
        }
        let unique: BTreeSet<String> = g
            .attributes
            .persons
            .iter()
            .map(|p| format!("{p:?}"))
            .collect();
        assert_eq!(unique.len(), g.attributes.persons.len());
        Ok(())
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small();
        s.images_per_identity = 3;
        assert!(s.validate().is_err());
        let mut s = small();
        s.n_identities = 1;
        assert!(s.validate().is_err());
        let mut s = small();
        s.attributes = AttributeSizes {
            gender: 1,
            hair: 1,
            top_color: 1,
            bottom_color: 2,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(
            generate_synthetic(&small(), &file.join("sub")),
            Err(Error::Io { .. })
        ));
    }
}
