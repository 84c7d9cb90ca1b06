//! Paired synthetic scenes: a patch-grid "image" and a symbol-sequence "text"
//! describing the same set of objects.
//!
//! Objects are horizontal runs of `extent` cells on a `g×g` grid. Every cell of
//! an object carries the template vector of its (shape, color) plus Gaussian
//! noise; background cells carry noise only. The text lists one
//! `[color, shape, position]` clause per object, separated by `SEP`, in random
//! order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ImageTokens, ModalitySample, TextTokens};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const SEP: u32 = 2;
const FIRST_CONTENT: u32 = 3;
/// Position buckets are the four grid quadrants.
pub const POSITION_BUCKETS: usize = 4;

const PLACEMENT_RETRIES: usize = 1000;
const DATASET_MAGIC: &[u8; 4] = b"ONRD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_size: usize,
    pub patch_dim: usize,
    pub num_shapes: usize,
    pub num_colors: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_extent: usize,
    /// Standard deviation of the per-cell Gaussian noise.
    pub noise: f64,
    /// Probability that a scene gains one object visible in only one view.
    pub decoy: f64,
    /// Seed of the (shape, color) template vectors.
    pub template_seed: u64,
    /// Pad texts with `PAD` to exactly this length.
    pub text_len: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_size: 6,
            patch_dim: 16,
            num_shapes: 6,
            num_colors: 6,
            min_objects: 1,
            max_objects: 3,
            max_extent: 2,
            noise: 0.1,
            decoy: 0.0,
            template_seed: 0x5eed,
            text_len: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(m.to_string()));
        if self.grid_size < 2 || self.patch_dim == 0 {
            return fail("grid_size must be at least 2 and patch_dim positive");
        }
        if self.num_shapes == 0 || self.num_colors == 0 {
            return fail("need at least one shape and one color");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail("object count range must satisfy 1 <= min <= max");
        }
        if self.max_extent == 0 || self.max_extent > self.grid_size {
            return fail("max_extent must lie in 1..=grid_size");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=1.0).contains(&self.decoy) {
            return fail("noise must be finite and non-negative, decoy in [0, 1]");
        }
        if let Some(len) = self.text_len {
            if len < self.max_text_len_unpadded() {
                return fail("text_len shorter than the longest possible description");
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { num_colors: self.num_colors, num_shapes: self.num_shapes }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    fn max_text_len_unpadded(&self) -> usize {
        let n = self.max_objects + usize::from(self.decoy > 0.0);
        4 * n - 1
    }

    /// Longest text the generator can emit.
    pub fn max_text_len(&self) -> usize {
        self.text_len.unwrap_or_else(|| self.max_text_len_unpadded())
    }

    pub fn num_labels(&self) -> usize {
        self.num_shapes * self.num_colors
    }
}

/// Symbol layout: `PAD, MASK, SEP`, colors, shapes, position buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub num_colors: usize,
    pub num_shapes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symbol {
    Pad,
    Mask,
    Sep,
    Color(usize),
    Shape(usize),
    Position(usize),
}

impl Vocab {
    pub fn size(&self) -> usize {
        FIRST_CONTENT as usize + self.num_colors + self.num_shapes + POSITION_BUCKETS
    }

    pub fn color(&self, c: usize) -> u32 {
        FIRST_CONTENT + c as u32
    }

    pub fn shape(&self, s: usize) -> u32 {
        FIRST_CONTENT + (self.num_colors + s) as u32
    }

    pub fn position(&self, b: usize) -> u32 {
        FIRST_CONTENT + (self.num_colors + self.num_shapes + b) as u32
    }

    pub fn decode(&self, id: u32) -> Option<Symbol> {
        let (c, s) = (self.num_colors, self.num_shapes);
        match id {
            PAD => Some(Symbol::Pad),
            MASK => Some(Symbol::Mask),
            SEP => Some(Symbol::Sep),
            _ => {
                let i = (id - FIRST_CONTENT) as usize;
                if i < c {
                    Some(Symbol::Color(i))
                } else if i < c + s {
                    Some(Symbol::Shape(i - c))
                } else if i < c + s + POSITION_BUCKETS {
                    Some(Symbol::Position(i - c - s))
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Both,
    ImageOnly,
    TextOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape_id: usize,
    pub color_id: usize,
    pub row: usize,
    pub col: usize,
    /// Number of cells, laid out rightwards from `(row, col)`.
    pub extent: usize,
    pub visibility: Visibility,
}

impl SceneObject {
    pub fn cells(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        (self.col..self.col + self.extent).map(move |c| self.row * g + c)
    }

    /// Quadrant of the object's first cell.
    pub fn position_bucket(&self, g: usize) -> usize {
        let half = g.div_ceil(2);
        usize::from(self.row >= half) * 2 + usize::from(self.col >= half)
    }

    pub fn label(&self) -> Label {
        Label { shape_id: self.shape_id, color_id: self.color_id }
    }

    pub fn in_image(&self) -> bool {
        self.visibility != Visibility::TextOnly
    }

    pub fn in_text(&self) -> bool {
        self.visibility != Visibility::ImageOnly
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid_size: usize,
    pub objects: Vec<SceneObject>,
    pub noise_seed: u64,
}

/// Clause content of one described object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Clause {
    pub color_id: usize,
    pub shape_id: usize,
    pub position: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub shape_id: usize,
    pub color_id: usize,
}

impl Label {
    pub fn all(cfg: &SynthConfig) -> Vec<Label> {
        (0..cfg.num_colors).flat_map(|c| (0..cfg.num_shapes).map(move |s| Label { shape_id: s, color_id: c })).collect()
    }

    pub fn index(&self, cfg: &SynthConfig) -> usize {
        self.color_id * cfg.num_shapes + self.shape_id
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// `[color, shape]`
    #[default]
    Bare,
    /// `[SEP, color, shape, SEP]`
    Framed,
}

/// Text symbols naming a label, used as a localization or class prompt.
pub fn label_prompt(cfg: &SynthConfig, label: Label, template: PromptTemplate) -> Vec<u32> {
    let v = cfg.vocab();
    let core = [v.color(label.color_id), v.shape(label.shape_id)];
    match template {
        PromptTemplate::Bare => core.to_vec(),
        PromptTemplate::Framed => vec![SEP, core[0], core[1], SEP],
    }
}

/// Per-scene generator: the dataset seed selects the key, the scene index the
/// stream.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn free_run(occupied: &[bool], g: usize, row: usize, col: usize, extent: usize) -> bool {
    col + extent <= g && (col..col + extent).all(|c| !occupied[row * g + c])
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, occupied: &mut [bool], visibility: Visibility) -> Result<SceneObject> {
    let g = cfg.grid_size;
    let shape_id = rng.gen_range(0..cfg.num_shapes);
    let color_id = rng.gen_range(0..cfg.num_colors);
    let extent = rng.gen_range(1..=cfg.max_extent);
    for _ in 0..PLACEMENT_RETRIES {
        let row = rng.gen_range(0..g);
        let col = rng.gen_range(0..=g - extent);
        if free_run(occupied, g, row, col, extent) {
            let obj = SceneObject { shape_id, color_id, row, col, extent, visibility };
            if visibility != Visibility::TextOnly {
                for cell in obj.cells(g) {
                    occupied[cell] = true;
                }
            }
            return Ok(obj);
        }
    }
    Err(Error::Generation(format!("could not place an object of extent {extent} after {PLACEMENT_RETRIES} tries")))
}

/// Samples a scene with non-overlapping objects by rejection.
pub fn generate_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let g = cfg.grid_size;
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut occupied = vec![false; g * g];
    let mut objects = Vec::with_capacity(count + 1);
    for _ in 0..count {
        objects.push(place(rng, cfg, &mut occupied, Visibility::Both)?);
    }
    if cfg.decoy > 0.0 && rng.gen_bool(cfg.decoy) {
        let vis = if rng.gen_bool(0.5) { Visibility::ImageOnly } else { Visibility::TextOnly };
        objects.push(place(rng, cfg, &mut occupied, vis)?);
    }
    Ok(SceneSpec { grid_size: g, objects, noise_seed: rng.gen() })
}

/// Fixed template vectors: one per shape plus one per color, summed per
/// object so labels share structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    shapes: Vec<Vec<f32>>,
    colors: Vec<Vec<f32>>,
}

impl Templates {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
        let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid std");
        let mut draw = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|_| (0..cfg.patch_dim).map(|_| normal.sample(&mut rng) as f32).collect()).collect() };
        let shapes = draw(cfg.num_shapes);
        let colors = draw(cfg.num_colors);
        Self { shapes, colors }
    }

    pub fn template(&self, label: Label) -> Vec<f32> {
        self.shapes[label.shape_id].iter().zip(&self.colors[label.color_id]).map(|(a, b)| a + b).collect()
    }
}

/// Patch tensor `[g² × patch_dim]` and object mask `[g²]`.
pub fn render_image(scene: &SceneSpec, cfg: &SynthConfig, templates: &Templates) -> Result<(Tensor, Vec<bool>)> {
    let g = scene.grid_size;
    if g != cfg.grid_size {
        return Err(Error::Input(format!("scene grid {g} differs from config grid {}", cfg.grid_size)));
    }
    let pd = cfg.patch_dim;
    let mut data = vec![0.0f32; g * g * pd];
    let mut mask = vec![false; g * g];
    for obj in scene.objects.iter().filter(|o| o.in_image()) {
        if obj.row >= g || obj.col + obj.extent > g {
            return Err(Error::Input(format!("object outside the {g}x{g} grid")));
        }
        let t = templates.template(obj.label());
        for cell in obj.cells(g) {
            mask[cell] = true;
            data[cell * pd..(cell + 1) * pd].copy_from_slice(&t);
        }
    }
    if cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok((Tensor::new(vec![g * g, pd], data)?, mask))
}

pub fn clauses(scene: &SceneSpec) -> Vec<Clause> {
    let g = scene.grid_size;
    scene.objects.iter().filter(|o| o.in_text()).map(|o| Clause { color_id: o.color_id, shape_id: o.shape_id, position: o.position_bucket(g) }).collect()
}

/// One clause per text-visible object in shuffled order, separated by `SEP`.
pub fn render_text(scene: &SceneSpec, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    let v = cfg.vocab();
    let mut cl = clauses(scene);
    cl.shuffle(rng);
    let mut out = Vec::with_capacity(cl.len() * 4);
    for (i, c) in cl.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend([v.color(c.color_id), v.shape(c.shape_id), v.position(c.position)]);
    }
    if let Some(len) = cfg.text_len {
        if out.len() > len {
            return Err(Error::Generation(format!("text of {} symbols exceeds text_len {len}", out.len())));
        }
        out.resize(len, PAD);
    }
    Ok(out)
}

/// Inverse of [`render_text`]: the multiset of described clauses.
pub fn parse_text(symbols: &[u32], vocab: &Vocab) -> Result<BTreeMap<Clause, usize>> {
    let content: Vec<u32> = symbols.iter().copied().filter(|&s| s != PAD).collect();
    let mut out = BTreeMap::new();
    if content.is_empty() {
        return Ok(out);
    }
    for chunk in content.split(|&s| s == SEP) {
        match chunk.iter().map(|&s| vocab.decode(s)).collect::<Vec<_>>()[..] {
            [Some(Symbol::Color(c)), Some(Symbol::Shape(s)), Some(Symbol::Position(p))] => {
                *out.entry(Clause { color_id: c, shape_id: s, position: p }).or_insert(0) += 1;
            }
            _ => return Err(Error::Format(format!("malformed clause {chunk:?}"))),
        }
    }
    Ok(out)
}

/// One generated scene with both views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub index: u64,
    pub scene: SceneSpec,
    pub patches: Tensor,
    pub mask: Vec<bool>,
    pub text: Vec<u32>,
}

impl SceneRecord {
    pub fn image_tokens(&self) -> Result<ImageTokens> {
        ImageTokens::grid(self.patches.clone(), self.scene.grid_size)
    }

    pub fn image_sample(&self) -> Result<ModalitySample> {
        Ok(ModalitySample::image(self.index, self.image_tokens()?))
    }

    pub fn text_sample(&self) -> ModalitySample {
        ModalitySample::text(self.index, TextTokens::new(self.text.clone()))
    }

    pub fn mixture_sample(&self) -> Result<ModalitySample> {
        Ok(ModalitySample::mixture(self.index, self.image_tokens()?, TextTokens::new(self.text.clone())))
    }

    /// Cells covered by image-visible objects with the given label.
    pub fn label_mask(&self, label: Label) -> Vec<bool> {
        let g = self.scene.grid_size;
        let mut m = vec![false; g * g];
        for o in self.scene.objects.iter().filter(|o| o.in_image() && o.label() == label) {
            for c in o.cells(g) {
                m[c] = true;
            }
        }
        m
    }
}

/// Generates scene `index` of the dataset keyed by `seed`.
pub fn generate_record(cfg: &SynthConfig, templates: &Templates, seed: u64, index: u64) -> Result<SceneRecord> {
    let mut rng = scene_rng(seed, index);
    let scene = generate_scene(&mut rng, cfg)?;
    let text = render_text(&scene, cfg, &mut rng)?;
    let (patches, mask) = render_image(&scene, cfg, templates)?;
    Ok(SceneRecord { index, scene, patches, mask, text })
}

pub fn generate_records(cfg: &SynthConfig, seed: u64, range: std::ops::Range<u64>) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let templates = Templates::new(cfg);
    range.map(|i| generate_record(cfg, &templates, seed, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: SynthConfig,
    pub seed: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SceneRecord>,
}

fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_frame(r: &mut impl Read, what: &str) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Format(format!("truncated {what} length")))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("implausible {what} length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(buf)
}

/// Writes `count` scenes. Output is a pure function of `(count, seed, cfg)`.
pub fn write_dataset(path: &Path, count: u64, seed: u64, cfg: &SynthConfig) -> Result<()> {
    cfg.validate()?;
    let templates = Templates::new(cfg);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let header = DatasetHeader { version: DATASET_VERSION, config: cfg.clone(), seed, count };
    write_frame(&mut w, &serde_json::to_vec(&header)?)?;
    for i in 0..count {
        let rec = generate_record(cfg, &templates, seed, i)?;
        write_frame(&mut w, &serde_json::to_vec(&rec.scene)?)?;
        let patches: Vec<u8> = rec.patches.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_frame(&mut w, &patches)?;
        let text: Vec<u8> = rec.text.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_frame(&mut w, &text)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated dataset magic".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a scene dataset file".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| Error::Format("truncated dataset version".into()))?;
    let version = u32::from_le_bytes(v);
    if version != DATASET_VERSION {
        return Err(Error::Version(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let header: DatasetHeader = serde_json::from_slice(&read_frame(r, "header")?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(Error::Format("header version disagrees with file version".into()));
    }
    header.config.validate()?;
    Ok(header)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let cfg = &header.config;
    let (g, pd) = (cfg.grid_size, cfg.patch_dim);
    let mut records = Vec::with_capacity(header.count.min(1 << 20) as usize);
    for index in 0..header.count {
        let scene: SceneSpec = serde_json::from_slice(&read_frame(&mut r, "scene")?).map_err(|e| Error::Format(format!("bad scene record {index}: {e}")))?;
        let pbytes = read_frame(&mut r, "patches")?;
        if pbytes.len() != g * g * pd * 4 {
            return Err(Error::Format(format!("scene {index}: patch payload of {} bytes", pbytes.len())));
        }
        let data = pbytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tbytes = read_frame(&mut r, "text")?;
        if tbytes.len() % 4 != 0 {
            return Err(Error::Format(format!("scene {index}: ragged text payload")));
        }
        let text = tbytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut mask = vec![false; g * g];
        for o in scene.objects.iter().filter(|o| o.in_image()) {
            for c in o.cells(g) {
                *mask.get_mut(c).ok_or_else(|| Error::Format(format!("scene {index}: object off grid")))? = true;
            }
        }
        records.push(SceneRecord { index, scene, patches: Tensor::new(vec![g * g, pd], data)?, mask, text });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(Dataset { header, records })
}

/// Reads a dataset and insists its generator config equals `expected`.
pub fn read_dataset_expecting(path: &Path, expected: &SynthConfig) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    if &ds.header.config != expected {
        return Err(Error::Version(format!("dataset generated with {:?}, expected {:?}", ds.header.config, expected)));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg() -> SynthConfig {
        SynthConfig { grid_size: 4, patch_dim: 6, num_shapes: 3, num_colors: 3, ..SynthConfig::default() }
    }

    #[test]
    fn single_object_scene() {
        let c = SynthConfig { max_objects: 1, ..cfg() };
        for i in 0..50 {
            let s = generate_scene(&mut scene_rng(1, i), &c).unwrap();
            assert_eq!(s.objects.len(), 1);
            let o = &s.objects[0];
            assert!(o.row < 4 && o.col + o.extent <= 4);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&mut scene_rng(9, 3), &cfg()).unwrap();
        let b = generate_scene(&mut scene_rng(9, 3), &cfg()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&mut scene_rng(9, 4), &cfg()).unwrap());
    }

    #[test]
    fn objects_never_overlap() {
        let c = SynthConfig { min_objects: 4, max_objects: 4, max_extent: 2, ..cfg() };
        for i in 0..200 {
            let s = generate_scene(&mut scene_rng(2, i), &c).unwrap();
            let mut seen = [false; 16];
            for o in &s.objects {
                for cell in o.cells(4) {
                    assert!(!seen[cell]);
                    seen[cell] = true;
                }
            }
        }
    }

    #[test]
    fn infeasible_placement_is_a_generation_error() {
        let c = SynthConfig { grid_size: 2, min_objects: 5, max_objects: 5, max_extent: 1, ..cfg() };
        assert!(matches!(generate_scene(&mut scene_rng(0, 0), &c), Err(Error::Generation(_))));
    }

    #[test]
    fn label_marginals_are_uniform() {
        let c = SynthConfig { max_objects: 1, num_shapes: 5, num_colors: 4, ..cfg() };
        let n = 10_000;
        let mut shapes = [0f64; 5];
        let mut colors = [0f64; 4];
        for i in 0..n {
            let s = generate_scene(&mut scene_rng(3, i), &c).unwrap();
            shapes[s.objects[0].shape_id] += 1.0;
            colors[s.objects[0].color_id] += 1.0;
        }
        // chi-square statistic against its 3-sigma band: k-1 + 3*sqrt(2(k-1))
        let chi = |counts: &[f64]| {
            let e = n as f64 / counts.len() as f64;
            counts.iter().map(|c| (c - e).powi(2) / e).sum::<f64>()
        };
        assert!(chi(&shapes) < 4.0 + 3.0 * 8f64.sqrt());
        assert!(chi(&colors) < 3.0 + 3.0 * 6f64.sqrt());
    }

    #[test]
    fn zero_noise_patches_are_templates() {
        let c = SynthConfig { noise: 0.0, ..cfg() };
        let t = Templates::new(&c);
        let s = generate_scene(&mut scene_rng(4, 0), &c).unwrap();
        let (p, mask) = render_image(&s, &c, &t).unwrap();
        for o in &s.objects {
            for cell in o.cells(4) {
                assert_eq!(p.row(cell), &t.template(o.label())[..]);
            }
        }
        for (cell, &m) in mask.iter().enumerate() {
            if !m {
                assert!(p.row(cell).iter().all(|&v| v == 0.0));
            }
        }
        let weight: usize = s.objects.iter().map(|o| o.extent).sum();
        assert_eq!(mask.iter().filter(|&&m| m).count(), weight);
    }

    #[test]
    fn moved_objects_give_same_patch_multiset() {
        let c = SynthConfig { noise: 0.0, ..cfg() };
        let t = Templates::new(&c);
        let obj = |row, col| SceneObject { shape_id: 1, color_id: 2, row, col, extent: 2, visibility: Visibility::Both };
        let a = SceneSpec { grid_size: 4, objects: vec![obj(0, 0)], noise_seed: 0 };
        let b = SceneSpec { grid_size: 4, objects: vec![obj(3, 2)], noise_seed: 0 };
        let collect = |s: &SceneSpec| {
            let (p, m) = render_image(s, &c, &t).unwrap();
            let mut rows: Vec<Vec<u32>> = (0..16).filter(|&i| m[i]).map(|i| p.row(i).iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        assert_eq!(collect(&a), collect(&b));
    }

    #[test]
    fn one_object_gives_three_symbol_clause() {
        let c = cfg();
        let v = c.vocab();
        let s = SceneSpec {
            grid_size: 4,
            objects: vec![SceneObject { shape_id: 0, color_id: 1, row: 3, col: 0, extent: 1, visibility: Visibility::Both }],
            noise_seed: 0,
        };
        let text = render_text(&s, &c, &mut scene_rng(0, 0)).unwrap();
        assert_eq!(text, vec![v.color(1), v.shape(0), v.position(2)]);
    }

    #[test]
    fn clause_multiset_survives_shuffling_and_parsing() {
        let c = SynthConfig { max_objects: 4, ..cfg() };
        for i in 0..100 {
            let s = generate_scene(&mut scene_rng(5, i), &c).unwrap();
            let a = render_text(&s, &c, &mut scene_rng(100, i)).unwrap();
            let b = render_text(&s, &c, &mut scene_rng(200, i)).unwrap();
            let pa = parse_text(&a, &c.vocab()).unwrap();
            assert_eq!(pa, parse_text(&b, &c.vocab()).unwrap());
            let mut want = BTreeMap::new();
            for cl in clauses(&s) {
                *want.entry(cl).or_insert(0) += 1;
            }
            assert_eq!(pa, want);
        }
    }

    #[test]
    fn pairing_fidelity_with_decoys() {
        let c = SynthConfig { decoy: 1.0, text_len: Some(15), ..cfg() };
        let mut saw = [false; 2];
        for rec in generate_records(&c, 6, 0..100).unwrap() {
            assert_eq!(rec.text.len(), 15);
            let parsed: usize = parse_text(&rec.text, &c.vocab()).unwrap().values().sum();
            let text_objs = rec.scene.objects.iter().filter(|o| o.in_text()).count();
            assert_eq!(parsed, text_objs);
            let img_cells: usize = rec.scene.objects.iter().filter(|o| o.in_image()).map(|o| o.extent).sum();
            assert_eq!(rec.mask.iter().filter(|&&m| m).count(), img_cells);
            match rec.scene.objects.last().unwrap().visibility {
                Visibility::ImageOnly => saw[0] = true,
                Visibility::TextOnly => saw[1] = true,
                Visibility::Both => panic!("decoy=1 must add a one-view object"),
            }
        }
        assert!(saw[0] && saw[1]);
    }

    #[test]
    fn malformed_text_is_rejected() {
        let v = cfg().vocab();
        assert!(parse_text(&[v.shape(0), v.color(0), v.position(0)], &v).is_err());
        assert!(parse_text(&[PAD, PAD], &v).unwrap().is_empty());
    }

    #[test]
    fn dataset_round_trip_and_byte_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        write_dataset(&a, 25, 11, &cfg()).unwrap();
        write_dataset(&b, 25, 11, &cfg()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let ds = read_dataset(&a).unwrap();
        assert_eq!(ds.records, generate_records(&cfg(), 11, 0..25).unwrap());
        assert_eq!(ds.header.count, 25);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        write_dataset(&p, 0, 1, &cfg()).unwrap();
        assert!(read_dataset(&p).unwrap().records.is_empty());
    }

    #[test]
    fn corrupt_or_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&p, 3, 1, &cfg()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let t = dir.path().join("t.bin");
        std::fs::write(&t, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_dataset(&t), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&t, &bad).unwrap();
        assert!(matches!(read_dataset(&t), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        std::fs::write(&t, &v2).unwrap();
        assert!(matches!(read_dataset(&t), Err(Error::Version(_))));
        let other = SynthConfig { noise: 0.5, ..cfg() };
        assert!(matches!(read_dataset_expecting(&p, &other), Err(Error::Version(_))));
        assert!(read_dataset_expecting(&p, &cfg()).is_ok());
    }

    #[test]
    fn vocab_decodes_every_symbol() {
        let v = cfg().vocab();
        assert_eq!(v.size(), 3 + 3 + 3 + 4);
        for id in 0..v.size() as u32 {
            assert!(v.decode(id).is_some());
        }
        assert_eq!(v.decode(v.size() as u32), None);
        assert_eq!(v.decode(v.position(3)), Some(Symbol::Position(3)));
    }
}
