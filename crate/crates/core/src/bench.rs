//! Deterministic synthetic task generator: base-to-novel splits, domain
//! shifts, and cross-task transfer pools.
//!
//! Every class is a prototype on the unit sphere in input space. Images are
//! `prototype + σ_img · gaussian`; the class "text" descriptor is a low-noise
//! view of the same prototype (`σ_txt` small), which gives the frozen dual
//! encoder genuine zero-shot signal, mirroring a pretrained alignment.
//! Every byte of a bundle is a pure function of (spec, seed).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PretrainData;
use crate::rng;
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"GLTB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub d_in: usize,
    /// Total pretraining classes, including the held-out sanity-check pool.
    pub n_pretrain_classes: usize,
    /// Classes held out of contrastive pretraining for the zero-shot check.
    pub n_heldout: usize,
    /// Samples per pretraining class.
    pub pretrain_per_class: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Labeled examples per base class for few-shot adaptation.
    pub shots: usize,
    pub sigma_img: f64,
    pub sigma_txt: f64,
    pub test_per_class: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            seed: 1,
            d_in: 32,
            n_pretrain_classes: 64,
            n_heldout: 8,
            pretrain_per_class: 10,
            n_base: 10,
            n_novel: 10,
            shots: 16,
            sigma_img: 0.3,
            sigma_txt: 0.02,
            test_per_class: 50,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let checks: &[(bool, &str)] = &[
            (self.d_in >= 2, "task.d_in must be >= 2"),
            (self.shots >= 1, "task.shots must be >= 1"),
            (self.n_base >= 2, "task.n_base must be >= 2"),
            (self.n_novel >= 2, "task.n_novel must be >= 2"),
            (self.test_per_class >= 1, "task.test_per_class must be >= 1"),
            (
                self.pretrain_per_class >= 1,
                "task.pretrain_per_class must be >= 1",
            ),
            (self.n_heldout >= 2, "task.n_heldout must be >= 2"),
            (
                self.n_heldout + 2 <= self.n_pretrain_classes,
                "task.n_pretrain_classes must exceed task.n_heldout by at least 2",
            ),
            (self.sigma_img >= 0.0, "task.sigma_img must be >= 0"),
            (self.sigma_txt >= 0.0, "task.sigma_txt must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config((*msg).to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Rotation,
    Scale,
    Bias,
    Noise,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ShiftKind::Rotation),
            "scale" => Ok(ShiftKind::Scale),
            "bias" => Ok(ShiftKind::Bias),
            "noise" => Ok(ShiftKind::Noise),
            other => Err(Error::Config(format!(
                "unknown domain shift kind {other:?} (expected rotation|scale|bias|noise)"
            ))),
        }
    }
}

/// A fixed, label-preserving transform of image inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

/// One labeled split: images (n×d_in) with local class labels indexing the
/// split's own class-text rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub format_version: u32,
    pub spec: TaskSpec,
    /// Globally unique class ids per group; disjointness is asserted at
    /// generation.
    pub pretrain_ids: Vec<u64>,
    pub heldout_ids: Vec<u64>,
    pub base_ids: Vec<u64>,
    pub novel_ids: Vec<u64>,
    pub pretrain_protos: Tensor,
    pub heldout_protos: Tensor,
    pub base_protos: Tensor,
    pub novel_protos: Tensor,
    pub pretrain_texts: Tensor,
    pub heldout_texts: Tensor,
    pub base_texts: Tensor,
    pub novel_texts: Tensor,
    pub pretrain: SampleSet,
    pub heldout: SampleSet,
    pub train: SampleSet,
    pub test_base: SampleSet,
    pub test_novel: SampleSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestBase,
    TestNovel,
}

impl TaskBundle {
    pub fn split(&self, which: Split) -> &SampleSet {
        match which {
            Split::Train => &self.train,
            Split::TestBase => &self.test_base,
            Split::TestNovel => &self.test_novel,
        }
    }

    /// Class-text rows matching a split's label space.
    pub fn texts_for(&self, which: Split) -> &Tensor {
        match which {
            Split::Train | Split::TestBase => &self.base_texts,
            Split::TestNovel => &self.novel_texts,
        }
    }

    pub fn pretrain_data(&self) -> PretrainData<'_> {
        PretrainData {
            images: &self.pretrain.images,
            labels: &self.pretrain.labels,
            class_texts: &self.pretrain_texts,
            holdout_images: &self.heldout.images,
            holdout_labels: &self.heldout.labels,
            holdout_class_texts: &self.heldout_texts,
        }
    }
}

fn draw_protos(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(rng::unit_vector(rng, d));
    }
    Tensor::new(vec![n, d], data).expect("proto dims")
}

fn noisy_views(
    rng: &mut rand_chacha::ChaCha8Rng,
    protos: &Tensor,
    sigma: f64,
    per_class: usize,
) -> SampleSet {
    let (n, d) = (protos.shape()[0], protos.shape()[1]);
    let mut data = Vec::with_capacity(n * per_class * d);
    let mut labels = Vec::with_capacity(n * per_class);
    for class in 0..n {
        let proto = &protos.data()[class * d..(class + 1) * d];
        for _ in 0..per_class {
            for &p in proto {
                data.push(p + sigma * rng::gaussian(rng));
            }
            labels.push(class);
        }
    }
    SampleSet {
        images: Tensor::new(vec![n * per_class, d], data).expect("sample dims"),
        labels,
    }
}

fn text_views(rng: &mut rand_chacha::ChaCha8Rng, protos: &Tensor, sigma: f64) -> Tensor {
    let (n, d) = (protos.shape()[0], protos.shape()[1]);
    let data: Vec<f64> = protos
        .data()
        .iter()
        .map(|p| p + sigma * rng::gaussian(rng))
        .collect();
    Tensor::new(vec![n, d], data).expect("text dims")
}

/// Fails unless all id groups are pairwise disjoint.
pub fn check_disjoint(groups: &[&[u64]]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for group in groups {
        for id in *group {
            if !seen.insert(*id) {
                return Err(Error::Config(format!(
                    "class pools overlap: class id {id} appears in two groups"
                )));
            }
        }
    }
    Ok(())
}

fn generate_with_offset(spec: &TaskSpec, id_offset: u64) -> Result<TaskBundle> {
    spec.validate()?;
    let d = spec.d_in;
    let n_train_pool = spec.n_pretrain_classes - spec.n_heldout;

    let mut proto_rng = rng::stream(spec.seed, "prototypes");
    let pretrain_protos = draw_protos(&mut proto_rng, n_train_pool, d);
    let heldout_protos = draw_protos(&mut proto_rng, spec.n_heldout, d);
    let base_protos = draw_protos(&mut proto_rng, spec.n_base, d);
    let novel_protos = draw_protos(&mut proto_rng, spec.n_novel, d);

    let mut text_rng = rng::stream(spec.seed, "texts");
    let pretrain_texts = text_views(&mut text_rng, &pretrain_protos, spec.sigma_txt);
    let heldout_texts = text_views(&mut text_rng, &heldout_protos, spec.sigma_txt);
    let base_texts = text_views(&mut text_rng, &base_protos, spec.sigma_txt);
    let novel_texts = text_views(&mut text_rng, &novel_protos, spec.sigma_txt);

    let mut img_rng = rng::stream(spec.seed, "images");
    let pretrain = noisy_views(
        &mut img_rng,
        &pretrain_protos,
        spec.sigma_img,
        spec.pretrain_per_class,
    );
    let heldout = noisy_views(
        &mut img_rng,
        &heldout_protos,
        spec.sigma_img,
        spec.pretrain_per_class,
    );
    let train = noisy_views(&mut img_rng, &base_protos, spec.sigma_img, spec.shots);
    let test_base = noisy_views(
        &mut img_rng,
        &base_protos,
        spec.sigma_img,
        spec.test_per_class,
    );
    let test_novel = noisy_views(
        &mut img_rng,
        &novel_protos,
        spec.sigma_img,
        spec.test_per_class,
    );

    let mut next = id_offset;
    let mut take = |n: usize| -> Vec<u64> {
        let ids: Vec<u64> = (next..next + n as u64).collect();
        next += n as u64;
        ids
    };
    let pretrain_ids = take(n_train_pool);
    let heldout_ids = take(spec.n_heldout);
    let base_ids = take(spec.n_base);
    let novel_ids = take(spec.n_novel);
    check_disjoint(&[&pretrain_ids, &heldout_ids, &base_ids, &novel_ids])?;

    Ok(TaskBundle {
        format_version: BUNDLE_VERSION,
        spec: *spec,
        pretrain_ids,
        heldout_ids,
        base_ids,
        novel_ids,
        pretrain_protos,
        heldout_protos,
        base_protos,
        novel_protos,
        pretrain_texts,
        heldout_texts,
        base_texts,
        novel_texts,
        pretrain,
        heldout,
        train,
        test_base,
        test_novel,
    })
}

/// Deterministic bundle generation: same spec (including seed) gives a
/// byte-identical bundle.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskBundle> {
    generate_with_offset(spec, 0)
}

/// Apply a fixed label-preserving transform to an image matrix. Magnitude 0
/// is the bit-exact identity. The transform is a pure function of
/// (task seed, kind, magnitude).
pub fn apply_domain_shift(images: &Tensor, shift: &DomainShift, task_seed: u64) -> Result<Tensor> {
    if shift.magnitude < 0.0 {
        return Err(Error::Config(format!(
            "shift.magnitude must be >= 0, got {}",
            shift.magnitude
        )));
    }
    if shift.magnitude == 0.0 {
        return Ok(images.clone());
    }
    let (n, d) = (images.shape()[0], images.shape()[1]);
    let mut out = images.data().to_vec();
    match shift.kind {
        ShiftKind::Rotation => {
            // Givens rotations over a seeded pairing of axes; orthogonal, so
            // input norms are preserved.
            let mut axes: Vec<usize> = (0..d).collect();
            let mut rot_rng = rng::stream(task_seed, "shift-rotation");
            shuffle_usize(&mut axes, &mut rot_rng);
            let theta = shift.magnitude * std::f64::consts::FRAC_PI_4;
            let (c, s) = (theta.cos(), theta.sin());
            for pair in axes.chunks(2) {
                if pair.len() < 2 {
                    continue;
                }
                let (i, j) = (pair[0], pair[1]);
                for row in 0..n {
                    let xi = out[row * d + i];
                    let xj = out[row * d + j];
                    out[row * d + i] = c * xi - s * xj;
                    out[row * d + j] = s * xi + c * xj;
                }
            }
        }
        ShiftKind::Scale => {
            let f = 1.0 + shift.magnitude;
            for v in &mut out {
                *v *= f;
            }
        }
        ShiftKind::Bias => {
            let mut bias_rng = rng::stream(task_seed, "shift-bias");
            let dir = rng::unit_vector(&mut bias_rng, d);
            for row in 0..n {
                for j in 0..d {
                    out[row * d + j] += shift.magnitude * dir[j];
                }
            }
        }
        ShiftKind::Noise => {
            let tag = format!("shift-noise-{}", shift.magnitude.to_bits());
            let mut noise_rng = rng::stream(task_seed, &tag);
            for v in &mut out {
                *v += shift.magnitude * rng::gaussian(&mut noise_rng);
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

fn shuffle_usize(v: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// One source bundle plus `target_seeds.len()` transfer bundles sharing the
/// source's pretraining pool. Target class ids never collide with the
/// source's; disjointness is checked across the whole family.
pub fn cross_task_pool(source: &TaskSpec, target_seeds: &[u64]) -> Result<Vec<TaskBundle>> {
    let source_bundle = generate_task(source)?;
    let mut bundles = vec![source_bundle];
    let mut id_offset = (source.n_pretrain_classes + source.n_base + source.n_novel) as u64;
    for &seed in target_seeds {
        let mut spec = *source;
        spec.seed = seed;
        let target = generate_with_offset(&spec, id_offset)?;
        id_offset += (spec.n_pretrain_classes + spec.n_base + spec.n_novel) as u64;
        // Targets reuse the source pretraining pool; replace their own.
        let mut target = TaskBundle {
            pretrain_ids: bundles[0].pretrain_ids.clone(),
            heldout_ids: bundles[0].heldout_ids.clone(),
            pretrain_protos: bundles[0].pretrain_protos.clone(),
            heldout_protos: bundles[0].heldout_protos.clone(),
            pretrain_texts: bundles[0].pretrain_texts.clone(),
            heldout_texts: bundles[0].heldout_texts.clone(),
            pretrain: bundles[0].pretrain.clone(),
            heldout: bundles[0].heldout.clone(),
            ..target
        };
        target.format_version = BUNDLE_VERSION;
        check_disjoint(&[
            &target.pretrain_ids,
            &target.heldout_ids,
            &target.base_ids,
            &target.novel_ids,
        ])?;
        bundles.push(target);
    }
    // Family-wide disjointness of downstream pools against the shared pool.
    let mut groups: Vec<&[u64]> = vec![&bundles[0].pretrain_ids, &bundles[0].heldout_ids];
    for b in &bundles {
        groups.push(&b.base_ids);
        groups.push(&b.novel_ids);
    }
    check_disjoint(&groups)?;
    Ok(bundles)
}

// ---------------------------------------------------------------------------
// Bundle file format
// ---------------------------------------------------------------------------
//
// Byte layout (all integers little-endian):
//
//   bytes 0..4    magic "GLTB"
//   bytes 4..8    u32 format version (currently 1)
//   bytes 8..16   u64 header length H
//   bytes 16..16+H JSON header: the full TaskBundle minus tensor payloads,
//                  plus a manifest of (name, dtype, shape) for each array
//   then, for each manifest entry in order, the raw array:
//                  f64 arrays as 8-byte LE floats, u32 arrays as 4-byte LE
//
// The manifest makes the file self-describing for other tools; the JSON
// round-trips doubles exactly, and the payload is bit-exact by construction.

#[derive(Debug, Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    format_version: u32,
    spec: TaskSpec,
    pretrain_ids: Vec<u64>,
    heldout_ids: Vec<u64>,
    base_ids: Vec<u64>,
    novel_ids: Vec<u64>,
    sections: Vec<SectionDesc>,
}

enum SectionData<'a> {
    F64(&'a Tensor),
    U32(Vec<u32>),
}

fn label_section(labels: &[usize]) -> SectionData<'static> {
    SectionData::U32(labels.iter().map(|&l| l as u32).collect())
}

fn sections_of(bundle: &TaskBundle) -> Vec<(&'static str, SectionData<'_>)> {
    vec![
        ("pretrain_protos", SectionData::F64(&bundle.pretrain_protos)),
        ("heldout_protos", SectionData::F64(&bundle.heldout_protos)),
        ("base_protos", SectionData::F64(&bundle.base_protos)),
        ("novel_protos", SectionData::F64(&bundle.novel_protos)),
        ("pretrain_texts", SectionData::F64(&bundle.pretrain_texts)),
        ("heldout_texts", SectionData::F64(&bundle.heldout_texts)),
        ("base_texts", SectionData::F64(&bundle.base_texts)),
        ("novel_texts", SectionData::F64(&bundle.novel_texts)),
        ("pretrain_images", SectionData::F64(&bundle.pretrain.images)),
        ("pretrain_labels", label_section(&bundle.pretrain.labels)),
        ("heldout_images", SectionData::F64(&bundle.heldout.images)),
        ("heldout_labels", label_section(&bundle.heldout.labels)),
        ("train_images", SectionData::F64(&bundle.train.images)),
        ("train_labels", label_section(&bundle.train.labels)),
        (
            "test_base_images",
            SectionData::F64(&bundle.test_base.images),
        ),
        ("test_base_labels", label_section(&bundle.test_base.labels)),
        (
            "test_novel_images",
            SectionData::F64(&bundle.test_novel.images),
        ),
        (
            "test_novel_labels",
            label_section(&bundle.test_novel.labels),
        ),
    ]
}

pub fn bundle_to_bytes(bundle: &TaskBundle) -> Result<Vec<u8>> {
    let sections = sections_of(bundle);
    let manifest: Vec<SectionDesc> = sections
        .iter()
        .map(|(name, s)| match s {
            SectionData::F64(t) => SectionDesc {
                name: (*name).to_string(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
            },
            SectionData::U32(v) => SectionDesc {
                name: (*name).to_string(),
                dtype: "u32".into(),
                shape: vec![v.len()],
            },
        })
        .collect();
    let header = BundleHeader {
        format_version: bundle.format_version,
        spec: bundle.spec,
        pretrain_ids: bundle.pretrain_ids.clone(),
        heldout_ids: bundle.heldout_ids.clone(),
        base_ids: bundle.base_ids.clone(),
        novel_ids: bundle.novel_ids.clone(),
        sections: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, s) in &sections {
        match s {
            SectionData::F64(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            SectionData::U32(vals) => {
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<TaskBundle> {
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Data("not a task bundle (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    cur.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != BUNDLE_VERSION {
        return Err(Error::Data(format!("unsupported bundle version {version}")));
    }
    let mut u64buf = [0u8; 8];
    cur.read_exact(&mut u64buf)?;
    let hlen = u64::from_le_bytes(u64buf) as usize;
    let mut hbytes = vec![0u8; hlen];
    cur.read_exact(&mut hbytes)?;
    let header: BundleHeader = serde_json::from_slice(&hbytes)?;

    let mut f64_arrays: Vec<Tensor> = Vec::new();
    let mut u32_arrays: Vec<Vec<u32>> = Vec::new();
    let mut order: Vec<(String, bool)> = Vec::new(); // (name, is_f64)
    for sec in &header.sections {
        let numel: usize = sec.shape.iter().product();
        match sec.dtype.as_str() {
            "f64" => {
                let mut data = vec![0.0f64; numel];
                for v in &mut data {
                    let mut b = [0u8; 8];
                    cur.read_exact(&mut b)?;
                    *v = f64::from_le_bytes(b);
                }
                f64_arrays.push(Tensor::new(sec.shape.clone(), data)?);
                order.push((sec.name.clone(), true));
            }
            "u32" => {
                let mut data = vec![0u32; numel];
                for v in &mut data {
                    let mut b = [0u8; 4];
                    cur.read_exact(&mut b)?;
                    *v = u32::from_le_bytes(b);
                }
                u32_arrays.push(data);
                order.push((sec.name.clone(), false));
            }
            other => return Err(Error::Data(format!("unknown section dtype {other:?}"))),
        }
    }

    let mut f64_iter = f64_arrays.into_iter();
    let mut u32_iter = u32_arrays.into_iter();
    let mut take_f64 = |name: &str| -> Result<Tensor> {
        match order.iter().position(|(n, f)| n == name && *f) {
            Some(_) => f64_iter
                .next()
                .ok_or_else(|| Error::Data(format!("bundle missing section {name}"))),
            None => Err(Error::Data(format!("bundle missing section {name}"))),
        }
    };
    let mut take_u32 = |name: &str| -> Result<Vec<usize>> {
        match order.iter().position(|(n, f)| n == name && !*f) {
            Some(_) => u32_iter
                .next()
                .map(|v| v.into_iter().map(|x| x as usize).collect())
                .ok_or_else(|| Error::Data(format!("bundle missing section {name}"))),
            None => Err(Error::Data(format!("bundle missing section {name}"))),
        }
    };

    let pretrain_protos = take_f64("pretrain_protos")?;
    let heldout_protos = take_f64("heldout_protos")?;
    let base_protos = take_f64("base_protos")?;
    let novel_protos = take_f64("novel_protos")?;
    let pretrain_texts = take_f64("pretrain_texts")?;
    let heldout_texts = take_f64("heldout_texts")?;
    let base_texts = take_f64("base_texts")?;
    let novel_texts = take_f64("novel_texts")?;
    let pretrain_images = take_f64("pretrain_images")?;
    let pretrain_labels = take_u32("pretrain_labels")?;
    let heldout_images = take_f64("heldout_images")?;
    let heldout_labels = take_u32("heldout_labels")?;
    let train_images = take_f64("train_images")?;
    let train_labels = take_u32("train_labels")?;
    let test_base_images = take_f64("test_base_images")?;
    let test_base_labels = take_u32("test_base_labels")?;
    let test_novel_images = take_f64("test_novel_images")?;
    let test_novel_labels = take_u32("test_novel_labels")?;

    Ok(TaskBundle {
        format_version: header.format_version,
        spec: header.spec,
        pretrain_ids: header.pretrain_ids,
        heldout_ids: header.heldout_ids,
        base_ids: header.base_ids,
        novel_ids: header.novel_ids,
        pretrain_protos,
        heldout_protos,
        base_protos,
        novel_protos,
        pretrain_texts,
        heldout_texts,
        base_texts,
        novel_texts,
        pretrain: SampleSet {
            images: pretrain_images,
            labels: pretrain_labels,
        },
        heldout: SampleSet {
            images: heldout_images,
            labels: heldout_labels,
        },
        train: SampleSet {
            images: train_images,
            labels: train_labels,
        },
        test_base: SampleSet {
            images: test_base_images,
            labels: test_base_labels,
        },
        test_novel: SampleSet {
            images: test_novel_images,
            labels: test_novel_labels,
        },
    })
}

pub fn save_bundle(path: &Path, bundle: &TaskBundle) -> Result<()> {
    let bytes = bundle_to_bytes(bundle)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<TaskBundle> {
    bundle_from_bytes(&std::fs::read(path)?)
}

/// CSV export of the labeled splits for inspection:
/// `split,label,x0,...,x{d-1}`.
pub fn export_samples_csv(bundle: &TaskBundle, path: &Path) -> Result<()> {
    let d = bundle.spec.d_in;
    let mut out = String::new();
    out.push_str("split,label");
    for j in 0..d {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (name, set) in [
        ("train", &bundle.train),
        ("test-base", &bundle.test_base),
        ("test-novel", &bundle.test_novel),
    ] {
        for (i, &label) in set.labels.iter().enumerate() {
            out.push_str(name);
            out.push(',');
            out.push_str(&label.to_string());
            let row = &set.images.data()[i * d..(i + 1) * d];
            for v in row {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_byte_identical_bundles() {
        let spec = TaskSpec::default();
        let a = bundle_to_bytes(&generate_task(&spec).unwrap()).unwrap();
        let b = bundle_to_bytes(&generate_task(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_task(&TaskSpec::default()).unwrap();
        let b = generate_task(&TaskSpec {
            seed: 2,
            ..TaskSpec::default()
        })
        .unwrap();
        assert_ne!(a.base_protos.data(), b.base_protos.data());
    }

    #[test]
    fn shot_count_arithmetic() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        assert_eq!(bundle.train.images.shape()[0], 16 * 10);
        assert_eq!(bundle.train.labels.len(), 160);
    }

    #[test]
    fn test_splits_are_class_balanced() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        for set in [&bundle.test_base, &bundle.test_novel] {
            let mut counts = vec![0usize; 10];
            for &l in &set.labels {
                counts[l] += 1;
            }
            assert!(counts.iter().all(|&c| c == 50), "{counts:?}");
        }
    }

    #[test]
    fn disjointness_is_checked() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        check_disjoint(&[
            &bundle.pretrain_ids,
            &bundle.heldout_ids,
            &bundle.base_ids,
            &bundle.novel_ids,
        ])
        .unwrap();
        assert!(check_disjoint(&[&[1, 2], &[2, 3]]).is_err());
    }

    #[test]
    fn bundle_file_roundtrip_is_bit_exact() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        let bytes = bundle_to_bytes(&bundle).unwrap();
        let back = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(bundle, back);
        assert_eq!(bytes, bundle_to_bytes(&back).unwrap());
    }

    #[test]
    fn zero_magnitude_shift_is_identity() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        for kind in [
            ShiftKind::Rotation,
            ShiftKind::Scale,
            ShiftKind::Bias,
            ShiftKind::Noise,
        ] {
            let shifted = apply_domain_shift(
                &bundle.test_base.images,
                &DomainShift {
                    kind,
                    magnitude: 0.0,
                },
                bundle.spec.seed,
            )
            .unwrap();
            assert_eq!(shifted.data(), bundle.test_base.images.data());
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        let shifted = apply_domain_shift(
            &bundle.test_base.images,
            &DomainShift {
                kind: ShiftKind::Rotation,
                magnitude: 0.7,
            },
            bundle.spec.seed,
        )
        .unwrap();
        let d = bundle.spec.d_in;
        for (a, b) in bundle
            .test_base
            .images
            .data()
            .chunks(d)
            .zip(shifted.data().chunks(d))
        {
            let (na, nb) = (crate::tensor::l2_norm(a), crate::tensor::l2_norm(b));
            assert!((na - nb).abs() < 1e-10);
        }
    }

    #[test]
    fn unknown_shift_kind_is_config_error() {
        let err = "swirl".parse::<ShiftKind>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cross_task_pool_shares_source_pool_and_stays_disjoint() {
        let source = TaskSpec::default();
        let bundles = cross_task_pool(&source, &[101, 102, 103]).unwrap();
        assert_eq!(bundles.len(), 4);
        for target in &bundles[1..] {
            assert_eq!(
                target.pretrain.images.data(),
                bundles[0].pretrain.images.data()
            );
            assert_ne!(target.base_protos.data(), bundles[0].base_protos.data());
            for id in &target.base_ids {
                assert!(!bundles[0].base_ids.contains(id));
                assert!(!bundles[0].pretrain_ids.contains(id));
            }
        }
        // Distinct target seeds give distinct prototypes.
        assert_ne!(bundles[1].base_protos.data(), bundles[2].base_protos.data());
    }

    #[test]
    fn nearest_prototype_oracle_on_low_noise_task() {
        // With σ_img = 0.05 the task must be nearly separable: a
        // nearest-prototype classifier reaches 99%+ on base test.
        let spec = TaskSpec {
            sigma_img: 0.05,
            ..TaskSpec::default()
        };
        let bundle = generate_task(&spec).unwrap();
        let d = spec.d_in;
        let protos = bundle.base_protos.data();
        let mut correct = 0usize;
        for (i, &label) in bundle.test_base.labels.iter().enumerate() {
            let x = &bundle.test_base.images.data()[i * d..(i + 1) * d];
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..spec.n_base {
                let p = &protos[k * d..(k + 1) * d];
                let dist: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            if best.1 == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / bundle.test_base.labels.len() as f64;
        assert!(acc >= 0.99, "oracle accuracy {acc}");
    }

    #[test]
    fn csv_export_has_header_and_all_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let bundle = generate_task(&TaskSpec::default()).unwrap();
        export_samples_csv(&bundle, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("split,label,x0"));
        let expected = 160 + 500 + 500;
        assert_eq!(lines.len(), 1 + expected);
    }
}
