//! Benchmarks: pretraining datasets and continual task streams with disjoint
//! label spaces, deterministic splits, and standard augmentation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

// ---------------------------------------------------------------------------
// dataset identifiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    TinyImagenet,
    Svhn,
    Cub200,
    /// Synthetic grayscale glyph set used for pretraining (classes 0-9).
    GlyphsSrc,
    /// Synthetic grayscale glyph set streamed continually (disjoint classes).
    GlyphsCl,
    /// Synthetic texture set statistically dissimilar from the glyph family.
    GlyphsAlt,
}

impl DatasetId {
    pub fn all_names() -> &'static [&'static str] {
        &[
            "cifar10",
            "cifar100",
            "tiny_imagenet",
            "svhn",
            "cub200",
            "glyphs_src",
            "glyphs_cl",
            "glyphs_alt",
        ]
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::TinyImagenet => 200,
            DatasetId::Svhn => 10,
            DatasetId::Cub200 => 200,
            DatasetId::GlyphsSrc | DatasetId::GlyphsCl | DatasetId::GlyphsAlt => 10,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(
            self,
            DatasetId::GlyphsSrc | DatasetId::GlyphsCl | DatasetId::GlyphsAlt
        )
    }

    pub fn channels(&self) -> usize {
        if self.is_synthetic() {
            1
        } else {
            3
        }
    }

    pub fn native_resolution(&self) -> usize {
        match self {
            DatasetId::Cifar10 | DatasetId::Cifar100 | DatasetId::Svhn => 32,
            DatasetId::TinyImagenet => 64,
            DatasetId::Cub200 => 224,
            _ => GLYPH_SIZE,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::TinyImagenet => "tiny_imagenet",
            DatasetId::Svhn => "svhn",
            DatasetId::Cub200 => "cub200",
            DatasetId::GlyphsSrc => "glyphs_src",
            DatasetId::GlyphsCl => "glyphs_cl",
            DatasetId::GlyphsAlt => "glyphs_alt",
        };
        f.write_str(s)
    }
}

impl FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetId::Cifar10),
            "cifar100" => Ok(DatasetId::Cifar100),
            "tiny_imagenet" => Ok(DatasetId::TinyImagenet),
            "svhn" => Ok(DatasetId::Svhn),
            "cub200" => Ok(DatasetId::Cub200),
            "glyphs_src" => Ok(DatasetId::GlyphsSrc),
            "glyphs_cl" => Ok(DatasetId::GlyphsCl),
            "glyphs_alt" => Ok(DatasetId::GlyphsAlt),
            other => Err(Error::config(format!(
                "unknown dataset id '{}'; valid: {}",
                other,
                DatasetId::all_names().join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// in-memory dataset

/// Images stored as raw `u8` `(n, c, h, w)`; normalization happens at batch
/// assembly.
#[derive(Clone)]
pub struct ImageDataset {
    pub id: String,
    pub images: Array4<u8>,
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Per-channel mean/std of the (0..1 scaled) training pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let count = (self.len() * self.images.shape()[2] * self.images.shape()[3]) as f64;
        for (ci, mut_acc) in mean.iter_mut().enumerate() {
            let ch = self.images.index_axis(Axis(1), ci);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for &p in ch.iter() {
                let v = p as f64 / 255.0;
                s += v;
                s2 += v * v;
            }
            *mut_acc = s / count;
            sq[ci] = s2 / count;
        }
        let std: Vec<f64> = mean
            .iter()
            .zip(sq.iter())
            .map(|(&m, &s2)| (s2 - m * m).max(1e-12).sqrt())
            .collect();
        (mean, std)
    }
}

/// A batch ready for the model: normalized inputs plus labels and task ids.
pub struct ExampleBatch<S: Scalar> {
    pub inputs: ArrayD<S>, // (b, c, h, w)
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
}

// ---------------------------------------------------------------------------
// task streams

#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub classes: Vec<u16>,
    pub train_indices: Vec<u32>,
    pub test_indices: Vec<u32>,
}

/// Ordered sequence of tasks over disjoint class partitions.
pub struct TaskStream {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub tasks: Vec<TaskSplit>,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub seed: u64,
    /// label -> task id (valid for both ascending and shuffled assignment).
    pub class_to_task: Vec<usize>,
    pub pretrain: Option<ImageDataset>,
}

impl TaskStream {
    pub fn task_of_label(&self, label: usize) -> Result<usize> {
        self.class_to_task
            .get(label)
            .copied()
            .ok_or_else(|| Error::invalid(format!("label {} outside benchmark range", label)))
    }

    fn check_invariants(&self) -> Result<()> {
        let mut seen = vec![false; self.class_to_task.len()];
        for (i, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                let c = c as usize;
                if seen[c] {
                    return Err(Error::invalid(format!(
                        "class {} assigned to more than one task",
                        c
                    )));
                }
                seen[c] = true;
                if self.class_to_task[c] != i {
                    return Err(Error::invalid("class_to_task inconsistent".to_string()));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid(
                "union of task class sets does not cover the label space".to_string(),
            ));
        }
        Ok(())
    }
}

/// Task id of a label under ascending class-to-task assignment.
pub fn task_identifier_of(label: usize, classes_per_task: usize) -> usize {
    label / classes_per_task
}

/// Options controlling benchmark construction.
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub data_root: PathBuf,
    /// Shuffle the class-to-task assignment with the stream seed.
    pub shuffle_classes: bool,
    /// Per-class example counts for synthetic sets (train, test).
    pub glyph_counts: (usize, usize),
    pub resolution: Option<usize>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            data_root: PathBuf::from("data"),
            shuffle_classes: false,
            glyph_counts: (200, 80),
            resolution: None,
        }
    }
}

/// Build a Split benchmark: `num_tasks` tasks of `total/num_tasks` classes.
pub fn build_split_benchmark(
    dataset_id: DatasetId,
    num_tasks: usize,
    seed: u64,
    opts: &BenchmarkOptions,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::config("num_tasks must be positive"));
    }
    let total = dataset_id.num_classes();
    if !total.is_multiple_of(num_tasks) {
        return Err(Error::config(format!(
            "{} classes cannot be split into {} equal tasks",
            total, num_tasks
        )));
    }
    let classes_per_task = total / num_tasks;
    let train = load_dataset(dataset_id, Split::Train, opts)?;
    let test = load_dataset(dataset_id, Split::Test, opts)?;

    // class order: ascending by default, optional seeded permutation
    let mut class_order: Vec<u16> = (0..total as u16).collect();
    if opts.shuffle_classes {
        let mut rng = crate::rng::SeedTree::new(seed).rng("class_order");
        for i in (1..class_order.len()).rev() {
            let j = rng.gen_range(0..=i);
            class_order.swap(i, j);
        }
    }

    let mut class_to_task = vec![0usize; total];
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut classes: Vec<u16> =
            class_order[t * classes_per_task..(t + 1) * classes_per_task].to_vec();
        classes.sort_unstable();
        for &c in &classes {
            class_to_task[c as usize] = t;
        }
        tasks.push(TaskSplit {
            classes,
            train_indices: Vec::new(),
            test_indices: Vec::new(),
        });
    }
    for (i, &y) in train.labels.iter().enumerate() {
        tasks[class_to_task[y as usize]].train_indices.push(i as u32);
    }
    for (i, &y) in test.labels.iter().enumerate() {
        tasks[class_to_task[y as usize]].test_indices.push(i as u32);
    }

    let stream = TaskStream {
        train,
        test,
        tasks,
        num_tasks,
        classes_per_task,
        seed,
        class_to_task,
        pretrain: None,
    };
    stream.check_invariants()?;
    Ok(stream)
}

/// Load a pretraining dataset resampled to `target_resolution`.
pub fn load_pretrain_dataset(
    dataset_id: DatasetId,
    target_resolution: usize,
    opts: &BenchmarkOptions,
) -> Result<ImageDataset> {
    let mut ds = load_dataset(dataset_id, Split::Train, opts)?;
    let (h, w) = ds.resolution();
    if (h, w) != (target_resolution, target_resolution) {
        ds.images = resize_bilinear(&ds.images, target_resolution, target_resolution);
        ds.id = format!("{}@{}", ds.id, target_resolution);
    }
    Ok(ds)
}

fn load_dataset(id: DatasetId, split: Split, opts: &BenchmarkOptions) -> Result<ImageDataset> {
    let mut ds = match id {
        DatasetId::GlyphsSrc => synthetic_glyphs(GlyphFamily::Source, split, opts.glyph_counts),
        DatasetId::GlyphsCl => synthetic_glyphs(GlyphFamily::Stream, split, opts.glyph_counts),
        DatasetId::GlyphsAlt => synthetic_glyphs(GlyphFamily::Textures, split, opts.glyph_counts),
        DatasetId::Cifar10 => load_cifar10(&opts.data_root, split)?,
        DatasetId::Cifar100 => load_cifar100(&opts.data_root, split)?,
        DatasetId::TinyImagenet | DatasetId::Svhn | DatasetId::Cub200 => {
            load_raw_tensor(&opts.data_root, id, split)?
        }
    };
    if let Some(res) = opts.resolution {
        let (h, w) = ds.resolution();
        if (h, w) != (res, res) {
            ds.images = resize_bilinear(&ds.images, res, res);
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// synthetic glyphs
//
// Grayscale procedural classes built from a shared vocabulary of oriented
// Gabor patches and blobs, so that features learned on the source classes
// transfer to the disjoint stream classes. The texture family deliberately
// breaks that vocabulary for dissimilar-pretraining experiments.

pub const GLYPH_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphFamily {
    Source,
    Stream,
    Textures,
}

#[derive(Clone, Copy)]
struct GaborSpec {
    cx: f64,
    cy: f64,
    theta: f64,
    freq: f64,
    sigma: f64,
    amp: f64,
}

fn class_components(family: GlyphFamily, class: usize, rng: &mut ChaCha12Rng) -> Vec<GaborSpec> {
    let n = GLYPH_SIZE as f64;
    let pi = std::f64::consts::PI;
    let k = class as f64;
    match family {
        // Classes sit on an orientation-by-frequency grid: five orientations
        // times two frequency bands per family, the stream family rotated
        // half a step against the source family. Both families share the
        // oriented-edge vocabulary; classes activate near-disjoint filters.
        GlyphFamily::Source | GlyphFamily::Stream => {
            let source = family == GlyphFamily::Source;
            let orient = pi * (k / 2.0).floor() / 5.0;
            let band = match (source, class % 2 == 0) {
                (true, true) => 0.42,
                (true, false) => 0.85,
                (false, true) => 0.58,
                (false, false) => 1.1,
            };
            let blob = if source { class } else { class + 4 };
            let mut specs = vec![GaborSpec {
                cx: 0.5 * n,
                cy: 0.5 * n,
                theta: orient,
                freq: band,
                sigma: 0.42 * n,
                amp: 1.0,
            }];
            specs.push(GaborSpec {
                cx: (0.3 + 0.4 * ((blob % 3) as f64) / 2.0) * n,
                cy: (0.3 + 0.4 * (((blob / 3) % 3) as f64) / 2.0) * n,
                theta: orient + pi / 2.0,
                freq: 0.6,
                sigma: rng.gen_range(0.16..0.22) * n,
                amp: rng.gen_range(0.45..0.6),
            });
            specs
        }
        GlyphFamily::Textures => {
            // checker-like high-frequency axis-aligned textures
            (0..2)
                .map(|i| GaborSpec {
                    cx: n / 2.0,
                    cy: n / 2.0,
                    theta: if (class + i).is_multiple_of(2) {
                        0.0
                    } else {
                        std::f64::consts::FRAC_PI_2
                    },
                    freq: 0.9 + 0.05 * k + 0.2 * i as f64,
                    sigma: n,
                    amp: rng.gen_range(0.8..1.0),
                })
                .collect()
        }
    }
}

fn render_glyph(
    specs: &[GaborSpec],
    shift: (f64, f64),
    phase_jitter: f64,
    contrast: f64,
    noise_sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let n = GLYPH_SIZE;
    let mut img = vec![0.0f64; n * n];
    for spec in specs {
        let (st, ct) = spec.theta.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - (spec.cx + shift.0);
                let dy = y as f64 - (spec.cy + shift.1);
                let u = ct * dx + st * dy;
                let v = -st * dx + ct * dy;
                let envelope = (-(u * u + v * v) / (2.0 * spec.sigma * spec.sigma)).exp();
                let carrier = (spec.freq * u + phase_jitter).cos();
                img[y * n + x] += spec.amp * envelope * carrier;
            }
        }
    }
    for p in img.iter_mut() {
        let noise: f64 = {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        *p = 0.5 + 0.5 * contrast * *p + noise_sigma * noise;
    }
    img
}

/// Deterministic synthetic grayscale dataset; 10 classes per family.
pub fn synthetic_glyphs(
    family: GlyphFamily,
    split: Split,
    counts: (usize, usize),
) -> ImageDataset {
    let per_class = match split {
        Split::Train => counts.0,
        Split::Test => counts.1,
    };
    let family_seed = match family {
        GlyphFamily::Source => 0x67_u64,
        GlyphFamily::Stream => 0x68,
        GlyphFamily::Textures => 0x69,
    };
    let split_tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let num_classes = 10usize;
    let n = per_class * num_classes;
    let mut images = Array4::<u8>::zeros((n, 1, GLYPH_SIZE, GLYPH_SIZE));
    let mut labels = Vec::with_capacity(n);
    let tree = crate::rng::SeedTree::new(family_seed);
    let prototypes: Vec<Vec<GaborSpec>> = (0..num_classes)
        .map(|class| {
            let mut proto_rng = tree.rng_indexed("class_proto", class as u64);
            class_components(family, class, &mut proto_rng)
        })
        .collect();
    // A small fraction of examples blends in a foreign class's pattern, and
    // another small fraction carries its within-pair partner's label. Both
    // give the benchmark an irreducible error that keeps margins bounded
    // during training, as in natural image benchmarks.
    let ambiguity = 0.08f64;
    // training labels carry within-pair noise; the test split stays clean
    let label_flip = match split {
        Split::Train => 0.15f64,
        Split::Test => 0.0,
    };
    for class in 0..num_classes {
        let specs = &prototypes[class];
        let mut ex_rng = tree.child(split_tag).rng_indexed("examples", class as u64);
        for i in 0..per_class {
            let shift = (ex_rng.gen_range(-2.5..2.5), ex_rng.gen_range(-2.5..2.5));
            let phase = ex_rng.gen_range(-1.5..1.5);
            let contrast = ex_rng.gen_range(0.45..0.95);
            let mixed: Vec<GaborSpec>;
            let render_specs = if ex_rng.gen_bool(ambiguity) {
                let other = (class + 1 + ex_rng.gen_range(0..num_classes - 1)) % num_classes;
                let blend = ex_rng.gen_range(0.4..0.6);
                mixed = specs
                    .iter()
                    .map(|s| GaborSpec { amp: s.amp * (1.0 - blend), ..*s })
                    .chain(prototypes[other].iter().map(|s| GaborSpec {
                        amp: s.amp * blend,
                        ..*s
                    }))
                    .collect();
                &mixed
            } else {
                specs
            };
            let img = render_glyph(render_specs, shift, phase, contrast, 0.22, &mut ex_rng);
            let row = class * per_class + i;
            for (p, &v) in images
                .index_axis_mut(Axis(0), row)
                .iter_mut()
                .zip(img.iter())
            {
                *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            // flips stay within the class pair, so task membership holds
            if label_flip > 0.0 && ex_rng.gen_bool(label_flip) {
                labels.push((class ^ 1) as u16);
            } else {
                labels.push(class as u16);
            }
        }
    }
    ImageDataset {
        id: format!("glyphs_{:?}_{}", family, split_tag).to_lowercase(),
        images,
        labels,
        num_classes,
    }
}

// ---------------------------------------------------------------------------
// real dataset loaders

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open {}: {}", path.display(), e)))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn find_dir(root: &Path, candidates: &[&str]) -> Result<PathBuf> {
    for c in candidates {
        let p = root.join(c);
        if p.is_dir() {
            return Ok(p);
        }
    }
    Err(Error::config(format!(
        "none of {:?} found under {}",
        candidates,
        root.display()
    )))
}

fn load_cifar10(root: &Path, split: Split) -> Result<ImageDataset> {
    let dir = find_dir(root, &["cifar-10-batches-bin", "cifar10", "."])?;
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{}.bin", i)).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = read_file(&dir.join(&f))?;
        const REC: usize = 1 + 3 * 32 * 32;
        if bytes.len() % REC != 0 {
            return Err(Error::config(format!("{} has unexpected size", f)));
        }
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as u16);
            images.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len();
    Ok(ImageDataset {
        id: "cifar10".into(),
        images: Array4::from_shape_vec((n, 3, 32, 32), images)
            .map_err(|e| Error::shape(e.to_string()))?,
        labels,
        num_classes: 10,
    })
}

fn load_cifar100(root: &Path, split: Split) -> Result<ImageDataset> {
    let dir = find_dir(root, &["cifar-100-binary", "cifar100", "."])?;
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let bytes = read_file(&dir.join(file))?;
    const REC: usize = 2 + 3 * 32 * 32;
    if bytes.len() % REC != 0 {
        return Err(Error::config(format!("{} has unexpected size", file)));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(REC) {
        labels.push(rec[1] as u16); // fine label
        images.extend_from_slice(&rec[2..]);
    }
    let n = labels.len();
    Ok(ImageDataset {
        id: "cifar100".into(),
        images: Array4::from_shape_vec((n, 3, 32, 32), images)
            .map_err(|e| Error::shape(e.to_string()))?,
        labels,
        num_classes: 100,
    })
}

/// Raw tensor container: magic `IMGS`, u32 version, u32 n/c/h/w, then n u16
/// labels (LE), then n*c*h*w pixels. Used to ingest datasets that have no
/// canonical binary distribution (Tiny ImageNet, SVHN, CUB-200).
pub fn load_raw_tensor(root: &Path, id: DatasetId, split: Split) -> Result<ImageDataset> {
    let name = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let path = root.join(id.to_string()).join(name);
    let bytes = read_file(&path)?;
    parse_raw_tensor(&bytes, &id.to_string(), id.num_classes())
}

pub fn parse_raw_tensor(bytes: &[u8], id: &str, num_classes: usize) -> Result<ImageDataset> {
    if bytes.len() < 24 || &bytes[0..4] != b"IMGS" {
        return Err(Error::config(format!("{}: not a raw tensor file", id)));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != 1 {
        return Err(Error::config(format!("{}: unsupported version {}", id, version)));
    }
    let (n, c, h, w) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let labels_off = 24;
    let pixels_off = labels_off + 2 * n;
    if bytes.len() != pixels_off + n * c * h * w {
        return Err(Error::config(format!("{}: truncated raw tensor file", id)));
    }
    let labels: Vec<u16> = (0..n)
        .map(|i| u16::from_le_bytes(bytes[labels_off + 2 * i..labels_off + 2 * i + 2].try_into().unwrap()))
        .collect();
    let images = Array4::from_shape_vec((n, c, h, w), bytes[pixels_off..].to_vec())
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(ImageDataset {
        id: id.to_string(),
        images,
        labels,
        num_classes,
    })
}

pub fn write_raw_tensor(path: &Path, ds: &ImageDataset) -> Result<()> {
    use std::io::Write;
    let (n, c, h, w) = {
        let s = ds.images.shape();
        (s[0], s[1], s[2], s[3])
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"IMGS")?;
    for v in [1u32, n as u32, c as u32, h as u32, w as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for &l in &ds.labels {
        f.write_all(&l.to_le_bytes())?;
    }
    let contig = ds.images.as_standard_layout();
    f.write_all(contig.as_slice().expect("contiguous"))?;
    Ok(())
}

/// Bilinear resize of a `u8` image stack.
pub fn resize_bilinear(images: &Array4<u8>, out_h: usize, out_w: usize) -> Array4<u8> {
    let (n, c, h, w) = {
        let s = images.shape();
        (s[0], s[1], s[2], s[3])
    };
    let mut out = Array4::<u8>::zeros((n, c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ni in 0..n {
        for ci in 0..c {
            let src = images.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), ci);
            for oy in 0..out_h {
                let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let wy = fy - y0 as f64;
                for ox in 0..out_w {
                    let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let wx = fx - x0 as f64;
                    let v = (1.0 - wy) * (1.0 - wx) * src[(y0, x0)] as f64
                        + (1.0 - wy) * wx * src[(y0, x1)] as f64
                        + wy * (1.0 - wx) * src[(y1, x0)] as f64
                        + wy * wx * src[(y1, x1)] as f64;
                    out[(ni, ci, oy, ox)] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// normalization, augmentation, batching

#[derive(Debug, Clone)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Canonical statistics where established, otherwise computed from the
    /// training split.
    pub fn for_dataset(ds: &ImageDataset) -> Normalization {
        match ds.id.split('@').next().unwrap_or("") {
            "cifar10" => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            "cifar100" => Normalization {
                mean: vec![0.5071, 0.4865, 0.4409],
                std: vec![0.2673, 0.2564, 0.2762],
            },
            _ => {
                let (mean, std) = ds.channel_stats();
                Normalization { mean, std }
            }
        }
    }
}

/// Training-time augmentation; evaluation applies none.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Augment {
    pub pad_crop: usize,
    pub hflip: bool,
}

impl Augment {
    pub fn none() -> Self {
        Augment {
            pad_crop: 0,
            hflip: false,
        }
    }
}

/// Assemble a normalized batch from dataset rows, optionally augmented.
pub fn make_batch<S: Scalar>(
    ds: &ImageDataset,
    indices: &[u32],
    norm: &Normalization,
    augment: Option<(&Augment, &mut ChaCha12Rng)>,
    class_to_task: Option<&[usize]>,
) -> ExampleBatch<S> {
    let (c, h, w) = (ds.channels(), ds.resolution().0, ds.resolution().1);
    let b = indices.len();
    let mut inputs = ArrayD::<S>::zeros(IxDyn(&[b, c, h, w]));
    let mean: Vec<S> = norm.mean.iter().map(|&m| S::of_f64(m)).collect();
    let std: Vec<S> = norm.std.iter().map(|&s| S::of_f64(s)).collect();
    let scale = S::of_f64(1.0 / 255.0);

    let mut aug = augment;
    for (bi, &idx) in indices.iter().enumerate() {
        let src = ds.images.index_axis(Axis(0), idx as usize);
        // augmentation offsets
        let (dy, dx, flip) = match aug.as_mut() {
            Some((a, rng)) if a.pad_crop > 0 || a.hflip => {
                let p = a.pad_crop as i64;
                let dy = if p > 0 { rng.gen_range(-p..=p) } else { 0 };
                let dx = if p > 0 { rng.gen_range(-p..=p) } else { 0 };
                let flip = a.hflip && rng.gen_bool(0.5);
                (dy, dx, flip)
            }
            _ => (0, 0, false),
        };
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let sx0 = if flip { (w - 1 - x) as i64 } else { x as i64 };
                    let sx = sx0 + dx;
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[(ci, sy as usize, sx as usize)]
                    } else {
                        0
                    };
                    inputs[[bi, ci, y, x]] =
                        (S::of_f64(v as f64) * scale - mean[ci]) / std[ci];
                }
            }
        }
    }
    let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i as usize] as usize).collect();
    let task_ids: Vec<usize> = match class_to_task {
        Some(map) => labels.iter().map(|&y| map[y]).collect(),
        None => vec![0; b],
    };
    ExampleBatch {
        inputs,
        labels,
        task_ids,
    }
}

/// Deterministic shuffled epoch order.
pub fn shuffled_indices(indices: &[u32], rng: &mut ChaCha12Rng) -> Vec<u32> {
    let mut out = indices.to_vec();
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Write a split manifest: one example index per line.
pub fn write_split_manifest(path: &Path, indices: &[u32]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for &i in indices {
        writeln!(f, "{}", i)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph_opts() -> BenchmarkOptions {
        BenchmarkOptions {
            glyph_counts: (12, 6),
            ..Default::default()
        }
    }

    #[test]
    fn split_benchmark_partitions_classes() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &glyph_opts()).unwrap();
        assert_eq!(s.num_tasks, 5);
        assert_eq!(s.classes_per_task, 2);
        let expected: Vec<Vec<u16>> = vec![
            vec![0, 1],
            vec![2, 3],
            vec![4, 5],
            vec![6, 7],
            vec![8, 9],
        ];
        for (t, exp) in s.tasks.iter().zip(expected) {
            assert_eq!(t.classes, exp);
        }
    }

    #[test]
    fn single_task_degenerate_split() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 1, 0, &glyph_opts()).unwrap();
        assert_eq!(s.tasks[0].classes.len(), 10);
    }

    #[test]
    fn non_divisible_split_is_config_error() {
        let err = match build_split_benchmark(DatasetId::GlyphsCl, 3, 0, &glyph_opts()) {
            Err(e) => e,
            Ok(_) => panic!("expected configuration error"),
        };
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn task_identifier_examples() {
        assert_eq!(task_identifier_of(7, 2), 3);
        assert_eq!(task_identifier_of(0, 2), 0);
        assert_eq!(task_identifier_of(199, 20), 9);
    }

    #[test]
    fn label_out_of_range_errors() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &glyph_opts()).unwrap();
        assert!(s.task_of_label(3).is_ok());
        assert!(s.task_of_label(10).is_err());
    }

    #[test]
    fn rebuild_is_deterministic() {
        let a = build_split_benchmark(DatasetId::GlyphsCl, 5, 3, &glyph_opts()).unwrap();
        let b = build_split_benchmark(DatasetId::GlyphsCl, 5, 3, &glyph_opts()).unwrap();
        for (ta, tb) in a.tasks.iter().zip(b.tasks.iter()) {
            assert_eq!(ta.train_indices, tb.train_indices);
            assert_eq!(ta.test_indices, tb.test_indices);
        }
        assert_eq!(a.train.images, b.train.images);
    }

    #[test]
    fn shuffled_assignment_stays_disjoint() {
        let opts = BenchmarkOptions {
            shuffle_classes: true,
            ..glyph_opts()
        };
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 9, &opts).unwrap();
        // invariants checked in constructor; also every example maps to its task
        for (t, task) in s.tasks.iter().enumerate() {
            for &i in &task.train_indices {
                let y = s.train.labels[i as usize] as usize;
                assert_eq!(s.task_of_label(y).unwrap(), t);
            }
        }
    }

    #[test]
    fn every_example_maps_to_exactly_its_task() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &glyph_opts()).unwrap();
        for (t, task) in s.tasks.iter().enumerate() {
            for &i in &task.test_indices {
                let y = s.test.labels[i as usize] as usize;
                assert_eq!(task_identifier_of(y, s.classes_per_task), t);
            }
        }
    }

    #[test]
    fn pretrain_resize_noop_and_downscale() {
        let opts = glyph_opts();
        let native = load_pretrain_dataset(DatasetId::GlyphsSrc, GLYPH_SIZE, &opts).unwrap();
        assert_eq!(native.resolution(), (GLYPH_SIZE, GLYPH_SIZE));
        let down = load_pretrain_dataset(DatasetId::GlyphsSrc, 10, &opts).unwrap();
        assert_eq!(down.resolution(), (10, 10));
        // label space independent of the CL stream's: ids differ
        assert_eq!(native.num_classes, 10);
    }

    #[test]
    fn raw_tensor_round_trip() {
        let ds = synthetic_glyphs(GlyphFamily::Source, Split::Test, (4, 4));
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("svhn");
        std::fs::create_dir_all(&sub).unwrap();
        write_raw_tensor(&sub.join("test.bin"), &ds).unwrap();
        let loaded = load_raw_tensor(dir.path(), DatasetId::Svhn, Split::Test).unwrap();
        assert_eq!(loaded.images, ds.images);
        assert_eq!(loaded.labels, ds.labels);
    }

    #[test]
    fn cifar10_loader_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir_all(&sub).unwrap();
        // two fake records per training batch file
        for f in (1..=5).map(|i| format!("data_batch_{}.bin", i)) {
            let mut bytes = Vec::new();
            for rec in 0..2u8 {
                bytes.push(rec); // label
                bytes.extend(std::iter::repeat(rec * 10).take(3072));
            }
            std::fs::write(sub.join(f), &bytes).unwrap();
        }
        let opts = BenchmarkOptions {
            data_root: dir.path().to_path_buf(),
            ..Default::default()
        };
        let ds = load_dataset(DatasetId::Cifar10, Split::Train, &opts).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.resolution(), (32, 32));
        assert_eq!(ds.labels[1], 1);
    }

    #[test]
    fn batch_normalization_and_tasks() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &glyph_opts()).unwrap();
        let norm = Normalization::for_dataset(&s.train);
        let idx: Vec<u32> = s.tasks[3].train_indices[..4].to_vec();
        let batch = make_batch::<f32>(&s.train, &idx, &norm, None, Some(&s.class_to_task));
        assert_eq!(batch.inputs.shape(), &[4, 1, GLYPH_SIZE, GLYPH_SIZE]);
        assert!(batch.task_ids.iter().all(|&t| t == 3));
    }

    #[test]
    fn augmentation_is_seeded() {
        let s = build_split_benchmark(DatasetId::GlyphsCl, 5, 0, &glyph_opts()).unwrap();
        let norm = Normalization::for_dataset(&s.train);
        let aug = Augment {
            pad_crop: 2,
            hflip: true,
        };
        let idx: Vec<u32> = s.tasks[0].train_indices[..4].to_vec();
        let mut r1 = crate::rng::SeedTree::new(5).rng("aug");
        let mut r2 = crate::rng::SeedTree::new(5).rng("aug");
        let b1 = make_batch::<f32>(&s.train, &idx, &norm, Some((&aug, &mut r1)), None);
        let b2 = make_batch::<f32>(&s.train, &idx, &norm, Some((&aug, &mut r2)), None);
        assert_eq!(b1.inputs, b2.inputs);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let imgs = Array4::<u8>::from_elem((2, 3, 8, 8), 77);
        let out = resize_bilinear(&imgs, 4, 4);
        assert!(out.iter().all(|&v| v == 77));
        assert_eq!(out.shape(), &[2, 3, 4, 4]);
    }
}
