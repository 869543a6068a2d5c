//! Synthetic paired-corpus generation with a known latent alignment, plus
//! embedding file I/O and teacher pretraining.
//!
//! A [`SyntheticWorld`] draws class prototypes in a small latent space and
//! renders three views of each sample through frozen generator maps: raw
//! image features, an "LLM text embedding" (a frozen nonlinear map into a
//! higher-dimensional space with no built-in alignment to the others), and
//! raw text-side features for the toy CLIP text encoder. All three views of
//! a sample share one latent draw, so a ground-truth cross-modal alignment
//! exists by construction. Held-out classes never enter training batches,
//! standing in for the pretraining distribution that fine-tuning forgets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::OffsetReader;
use crate::embedding::{l2_normalize, EmbeddingBatch, NORM_SMOOTHING_EPS};
use crate::error::{Error, Result};
use crate::losses::{self, tuning_loss, GRAD_IMAGE, GRAD_LOG_TAU, GRAD_TEXT};
use crate::models::{Activation, MlpProjector, ToyEncoder};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use crate::seeds;

pub const PEMB_MAGIC: [u8; 4] = *b"PEMB";
pub const PEMB_VERSION: u32 = 1;

/// Post-map per-view noise as a fraction of `noise_sigma`. The sample's
/// latent perturbation (scale `noise_sigma`, shared across views) carries
/// the cross-modal signal; the per-view noise keeps the views from being
/// exact functions of it.
const VIEW_NOISE_FRACTION: f64 = 0.25;

/// How many whole-prototype redraws separability gets before giving up.
const SEPARABILITY_ATTEMPTS: usize = 100;

/// View dimensions of the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldDims {
    pub latent: usize,
    pub image: usize,
    pub llm: usize,
    pub clip: usize,
}

impl Default for WorldDims {
    fn default() -> Self {
        Self {
            latent: 8,
            image: 32,
            llm: 64,
            clip: 16,
        }
    }
}

/// Everything needed to regenerate a world bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub dims: WorldDims,
    pub n_classes: usize,
    pub noise_sigma: f64,
}

/// A frozen affine generator map.
#[derive(Debug, Clone, PartialEq)]
struct GeneratorMap {
    weight: EmbeddingBatch, // out x in
}

impl GeneratorMap {
    fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // Entries scaled by 1/sqrt(in_dim) keep output magnitudes near the
        // latent scale regardless of dimension.
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut weight = EmbeddingBatch::zeros(out_dim, in_dim);
        for v in weight.data_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        Self { weight }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|o| crate::embedding::dot(self.weight.row(o), z))
            .collect()
    }
}

/// Desk-scale stand-in for a large paired image-text corpus: shared latent
/// class structure, three frozen generator maps, one per view.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub dims: WorldDims,
    pub n_classes: usize,
    pub noise_sigma: f64,
    prototypes: EmbeddingBatch, // n_classes x latent
    image_map: GeneratorMap,
    // The "LLM embedder": a frozen nonlinear map into a higher-dimensional
    // space with no prior alignment to the CLIP side.
    llm_map_inner: GeneratorMap,
    llm_map_outer: GeneratorMap,
    clip_text_map: GeneratorMap,
}

/// Generates a world deterministically from `seed`. Prototype sets are
/// redrawn until every pairwise distance reaches `4 * noise_sigma`; if 100
/// redraws cannot achieve that, generation fails.
pub fn generate_world(
    seed: u64,
    dims: WorldDims,
    n_classes: usize,
    noise_sigma: f64,
) -> Result<SyntheticWorld> {
    if dims.latent == 0 || dims.image == 0 || dims.llm == 0 || dims.clip == 0 {
        return Err(Error::InvalidConfig("world dims must be positive".into()));
    }
    if n_classes < 4 {
        return Err(Error::InvalidConfig(format!(
            "need at least 4 classes, got {n_classes}"
        )));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise_sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    let mut rng = seeds::rng(seed, seeds::WORLD);

    let min_separation = 4.0 * noise_sigma;
    let mut prototypes = None;
    for _ in 0..SEPARABILITY_ATTEMPTS {
        let mut candidate = EmbeddingBatch::zeros(n_classes, dims.latent);
        for v in candidate.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let separated = (0..n_classes).all(|i| {
            ((i + 1)..n_classes).all(|j| {
                let sq: f64 = candidate
                    .row(i)
                    .iter()
                    .zip(candidate.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sq.sqrt() >= min_separation
            })
        });
        if separated {
            prototypes = Some(candidate);
            break;
        }
    }
    let prototypes = prototypes.ok_or_else(|| {
        Error::WorldGeneration(format!(
            "could not separate {n_classes} prototypes by {min_separation} \
             in {SEPARABILITY_ATTEMPTS} attempts"
        ))
    })?;

    let image_map = GeneratorMap::random(dims.image, dims.latent, &mut rng);
    let llm_map_inner = GeneratorMap::random(dims.llm, dims.latent, &mut rng);
    let llm_map_outer = GeneratorMap::random(dims.llm, dims.llm, &mut rng);
    let clip_text_map = GeneratorMap::random(dims.clip, dims.latent, &mut rng);

    Ok(SyntheticWorld {
        seed,
        dims,
        n_classes,
        noise_sigma,
        prototypes,
        image_map,
        llm_map_inner,
        llm_map_outer,
        clip_text_map,
    })
}

impl SyntheticWorld {
    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        generate_world(spec.seed, spec.dims, spec.n_classes, spec.noise_sigma)
    }

    pub fn spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            dims: self.dims,
            n_classes: self.n_classes,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    /// Noise-free image view of a latent point.
    pub fn image_view(&self, z: &[f64]) -> Vec<f64> {
        self.image_map.apply(z)
    }

    /// Noise-free LLM-embedder view: `outer(tanh(inner(z)))`.
    pub fn llm_view(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self.llm_map_inner.apply(z).iter().map(|v| v.tanh()).collect();
        self.llm_map_outer.apply(&hidden)
    }

    /// Noise-free text-feature view (input space of the CLIP text teacher).
    pub fn text_view(&self, z: &[f64]) -> Vec<f64> {
        self.clip_text_map.apply(z)
    }

    /// One sample of `class`: a shared latent draw rendered into all three
    /// views, each with its own post-map noise.
    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> PairedSample {
        let sigma = self.noise_sigma;
        let z: Vec<f64> = self
            .prototypes
            .row(class)
            .iter()
            .map(|p| p + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let view_sigma = VIEW_NOISE_FRACTION * sigma;
        let mut noisy = |mut v: Vec<f64>| {
            for x in &mut v {
                *x += view_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            v
        };
        PairedSample {
            image_features: noisy(self.image_view(&z)),
            llm_text_embedding: noisy(self.llm_view(&z)),
            text_features: noisy(self.text_view(&z)),
            clip_teacher_text_embedding: None,
            class_id: class,
        }
    }

    /// Canonical (noise-free) LLM embedding of every class prototype, the
    /// text side of the zero-shot class prototypes.
    pub fn canonical_llm_embeddings(&self) -> EmbeddingBatch {
        let rows: Vec<Vec<f64>> = (0..self.n_classes)
            .map(|c| self.llm_view(self.prototypes.row(c)))
            .collect();
        EmbeddingBatch::from_rows(&rows).expect("canonical embeddings are finite")
    }
}

/// One image-text pair: three generated views of a single latent draw plus
/// the teacher text embedding once it has been extracted offline.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub image_features: Vec<f64>,
    /// The offline LLM embedding `t'`.
    pub llm_text_embedding: Vec<f64>,
    /// Raw text-side features, the caption stand-in consumed by the teacher.
    pub text_features: Vec<f64>,
    /// Frozen teacher embedding of the text, filled by
    /// [`CorpusSplit::attach_teacher_embeddings`].
    pub clip_teacher_text_embedding: Option<Vec<f64>>,
    pub class_id: usize,
}

/// How a corpus is split: the last `heldout_classes` classes are excluded
/// from training entirely, and every evaluation set holds `eval_per_class`
/// fresh samples per class.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub heldout_classes: usize,
    pub eval_per_class: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    /// Training samples: classes `0..finetune_classes`, balanced.
    pub finetune: Vec<PairedSample>,
    /// Held-back samples from the fine-tune classes, for retrieval eval.
    pub retrieval_eval: Vec<PairedSample>,
    /// Samples from the held-out classes; never trained on.
    pub heldout: Vec<PairedSample>,
    pub n_classes: usize,
    pub finetune_classes: usize,
}

impl CorpusSplit {
    /// Runs the frozen text teacher over every split's raw text features
    /// and stores the embeddings on the samples (the offline extraction).
    pub fn attach_teacher_embeddings(&mut self, text_encoder: &ToyEncoder) -> Result<()> {
        for split in [&mut self.finetune, &mut self.retrieval_eval, &mut self.heldout] {
            if split.is_empty() {
                continue;
            }
            let inputs = EmbeddingBatch::from_rows(
                &split.iter().map(|s| s.text_features.clone()).collect::<Vec<_>>(),
            )?;
            let out = text_encoder.apply(&inputs)?;
            for (i, sample) in split.iter_mut().enumerate() {
                sample.clip_teacher_text_embedding = Some(out.row(i).to_vec());
            }
        }
        Ok(())
    }

    pub fn teacher_embeddings_attached(&self) -> bool {
        self.finetune
            .iter()
            .all(|s| s.clip_teacher_text_embedding.is_some())
    }
}

/// Draws a class-balanced corpus from the world, deterministically from the
/// world seed: `n_per_class` training samples for each fine-tune class and
/// `eval_per_class` evaluation samples for every class.
pub fn sample_corpus(
    world: &SyntheticWorld,
    n_per_class: usize,
    split: SplitSpec,
) -> Result<CorpusSplit> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be at least 1".into()));
    }
    if split.heldout_classes >= world.n_classes {
        return Err(Error::InvalidConfig(format!(
            "heldout_classes {} must be below n_classes {}",
            split.heldout_classes, world.n_classes
        )));
    }
    let finetune_classes = world.n_classes - split.heldout_classes;
    let mut rng = seeds::rng(world.seed, seeds::CORPUS);

    let mut finetune = Vec::with_capacity(finetune_classes * n_per_class);
    for c in 0..finetune_classes {
        for _ in 0..n_per_class {
            finetune.push(world.sample(c, &mut rng));
        }
    }
    let mut retrieval_eval = Vec::with_capacity(finetune_classes * split.eval_per_class);
    for c in 0..finetune_classes {
        for _ in 0..split.eval_per_class {
            retrieval_eval.push(world.sample(c, &mut rng));
        }
    }
    let mut heldout = Vec::with_capacity(split.heldout_classes * split.eval_per_class);
    for c in finetune_classes..world.n_classes {
        for _ in 0..split.eval_per_class {
            heldout.push(world.sample(c, &mut rng));
        }
    }
    Ok(CorpusSplit {
        finetune,
        retrieval_eval,
        heldout,
        n_classes: world.n_classes,
        finetune_classes,
    })
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

fn gather<F: Fn(&PairedSample) -> Vec<f64>>(samples: &[&PairedSample], f: F) -> EmbeddingBatch {
    EmbeddingBatch::from_rows(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        .expect("sample views are finite and rectangular")
}

pub fn image_batch(samples: &[&PairedSample]) -> EmbeddingBatch {
    gather(samples, |s| s.image_features.clone())
}

pub fn llm_batch(samples: &[&PairedSample]) -> EmbeddingBatch {
    gather(samples, |s| s.llm_text_embedding.clone())
}

pub fn text_feature_batch(samples: &[&PairedSample]) -> EmbeddingBatch {
    gather(samples, |s| s.text_features.clone())
}

pub fn teacher_batch(samples: &[&PairedSample]) -> Result<EmbeddingBatch> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.clip_teacher_text_embedding.clone().ok_or_else(|| {
                Error::InvalidConfig(
                    "teacher embeddings not attached; run the pretraining step first".into(),
                )
            })
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingBatch::from_rows(&rows)?)
}

pub fn labels_of(samples: &[&PairedSample]) -> Vec<usize> {
    samples.iter().map(|s| s.class_id).collect()
}

// ---------------------------------------------------------------------------
// PEMB embedding files
// ---------------------------------------------------------------------------

/// Writes a batch as magic `PEMB`, version u32, rows u64, cols u64, then
/// row-major little-endian f64. Round trips are bit-exact.
pub fn write_embeddings(path: &Path, batch: &EmbeddingBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PEMB_MAGIC)?;
    w.write_all(&PEMB_VERSION.to_le_bytes())?;
    w.write_all(&(batch.rows() as u64).to_le_bytes())?;
    w.write_all(&(batch.cols() as u64).to_le_bytes())?;
    for &v in batch.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let mut r = OffsetReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != PEMB_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected PEMB"),
        });
    }
    let version = r.read_u32("version")?;
    if version != PEMB_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let rows = r.read_u64("row count")? as usize;
    let cols = r.read_u64("column count")? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64("embedding data")?);
    }
    if let Some(extra) = r.at_eof()? {
        return Err(Error::Parse {
            offset: r.offset - 1,
            message: format!("trailing byte {extra:#04x} after embedding data"),
        });
    }
    EmbeddingBatch::new(rows, cols, data)
}

// ---------------------------------------------------------------------------
// Corpus directory layout
// ---------------------------------------------------------------------------

/// Files backing one split on disk, plus its labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFiles {
    pub image: String,
    pub llm: String,
    pub text_features: String,
    pub teacher_embeddings: Option<String>,
    pub class_ids: Vec<usize>,
}

/// On-disk corpus description: enough to reload the corpus and regenerate
/// the world bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub world: WorldSpec,
    pub n_classes: usize,
    pub finetune_classes: usize,
    pub splits: BTreeMap<String, SplitFiles>,
}

pub const MANIFEST_FILE: &str = "corpus_manifest.json";

fn split_entries<'a>(split: &'a CorpusSplit) -> [(&'static str, &'a [PairedSample]); 3] {
    [
        ("finetune", split.finetune.as_slice()),
        ("retrieval_eval", split.retrieval_eval.as_slice()),
        ("heldout", split.heldout.as_slice()),
    ]
}

/// Writes every split's views as PEMB files plus the manifest JSON.
/// Teacher-embedding files appear only for splits where they are attached.
pub fn write_corpus(dir: &Path, world: &SyntheticWorld, split: &CorpusSplit) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for (name, samples) in split_entries(split) {
        let refs: Vec<&PairedSample> = samples.iter().collect();
        let files = SplitFiles {
            image: format!("{name}.image.pemb"),
            llm: format!("{name}.llm.pemb"),
            text_features: format!("{name}.textfeat.pemb"),
            teacher_embeddings: None,
            class_ids: labels_of(&refs),
        };
        let empty_width = |w: usize| EmbeddingBatch::zeros(0, w);
        let (img, llm, tf) = if samples.is_empty() {
            (
                empty_width(world.dims.image),
                empty_width(world.dims.llm),
                empty_width(world.dims.clip),
            )
        } else {
            (image_batch(&refs), llm_batch(&refs), text_feature_batch(&refs))
        };
        write_embeddings(&dir.join(&files.image), &img)?;
        write_embeddings(&dir.join(&files.llm), &llm)?;
        write_embeddings(&dir.join(&files.text_features), &tf)?;
        let mut files = files;
        if !samples.is_empty() && samples.iter().all(|s| s.clip_teacher_text_embedding.is_some()) {
            let teacher = teacher_batch(&refs)?;
            let fname = format!("{name}.teacher.pemb");
            write_embeddings(&dir.join(&fname), &teacher)?;
            files.teacher_embeddings = Some(fname);
        }
        splits.insert(name.to_string(), files);
    }
    let manifest = CorpusManifest {
        world: world.spec(),
        n_classes: split.n_classes,
        finetune_classes: split.finetune_classes,
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

fn load_split(dir: &Path, files: &SplitFiles) -> Result<Vec<PairedSample>> {
    let img = read_embeddings(&dir.join(&files.image))?;
    let llm = read_embeddings(&dir.join(&files.llm))?;
    let tf = read_embeddings(&dir.join(&files.text_features))?;
    let teacher = files
        .teacher_embeddings
        .as_ref()
        .map(|f| read_embeddings(&dir.join(f)))
        .transpose()?;
    let n = files.class_ids.len();
    if img.rows() != n || llm.rows() != n || tf.rows() != n {
        return Err(Error::InvalidConfig(format!(
            "split files disagree on sample count: {} labels, {}/{}/{} rows",
            n,
            img.rows(),
            llm.rows(),
            tf.rows()
        )));
    }
    Ok((0..n)
        .map(|i| PairedSample {
            image_features: img.row(i).to_vec(),
            llm_text_embedding: llm.row(i).to_vec(),
            text_features: tf.row(i).to_vec(),
            clip_teacher_text_embedding: teacher.as_ref().map(|t| t.row(i).to_vec()),
            class_id: files.class_ids[i],
        })
        .collect())
}

/// Reloads a corpus directory; the world is regenerated from its spec.
pub fn load_corpus(dir: &Path) -> Result<(SyntheticWorld, CorpusSplit)> {
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let world = SyntheticWorld::from_spec(&manifest.world)?;
    let get = |name: &str| -> Result<&SplitFiles> {
        manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("manifest missing split {name}")))
    };
    let split = CorpusSplit {
        finetune: load_split(dir, get("finetune")?)?,
        retrieval_eval: load_split(dir, get("retrieval_eval")?)?,
        heldout: load_split(dir, get("heldout")?)?,
        n_classes: manifest.n_classes,
        finetune_classes: manifest.finetune_classes,
    };
    Ok((world, split))
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

/// Knobs for the toy CLIP pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_per_class: usize,
    pub eval_per_class: usize,
    /// Minimum recall@1 (worse direction) the pretrained pair must reach on
    /// a fresh draw from its own training distribution.
    pub recall_gate: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            batch_size: 256,
            lr: 1e-2,
            n_per_class: 64,
            eval_per_class: 8,
            recall_gate: 0.9,
        }
    }
}

/// The frozen products of pretraining: the CLIP text teacher, the pretrained
/// image encoder (the stage-2 starting point and drift reference), and the
/// learned temperature.
#[derive(Debug, Clone)]
pub struct Teachers {
    pub text_encoder: ToyEncoder,
    pub image_encoder: ToyEncoder,
    pub log_tau: f64,
    /// Recall@1 (image-to-text, text-to-image) at the pretraining gate.
    pub pretrain_recall: (f64, f64),
}

/// Jointly trains toy image and text encoders with the symmetric contrastive
/// objective over all classes, then freezes both. Fails if the pair cannot
/// retrieve its own training distribution at the configured gate.
pub fn pretrain_teachers(world: &SyntheticWorld, epochs: usize) -> Result<Teachers> {
    pretrain_teachers_with(world, epochs, &PretrainOptions::default())
}

pub fn pretrain_teachers_with(
    world: &SyntheticWorld,
    epochs: usize,
    opts: &PretrainOptions,
) -> Result<Teachers> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("pretraining needs at least 1 epoch".into()));
    }
    let mut corpus_rng = seeds::rng(world.seed, seeds::PRETRAIN_CORPUS);
    let samples: Vec<PairedSample> = (0..world.n_classes)
        .flat_map(|c| {
            (0..opts.n_per_class)
                .map(|_| world.sample(c, &mut corpus_rng))
                .collect::<Vec<_>>()
        })
        .collect();
    let n = samples.len();
    let batch_size = opts.batch_size.min(n);

    let mut image_encoder = ToyEncoder::new(
        MlpProjector::init(
            world.dims.image,
            opts.hidden_dim,
            world.dims.clip,
            Activation::Gelu,
            seeds::rng(world.seed, seeds::PRETRAIN_IMAGE_INIT).random(),
        ),
        "image_features",
    );
    let mut text_encoder = ToyEncoder::new(
        MlpProjector::init(
            world.dims.clip,
            opts.hidden_dim,
            world.dims.clip,
            Activation::Gelu,
            seeds::rng(world.seed, seeds::PRETRAIN_TEXT_INIT).random(),
        ),
        "text_features",
    );
    let mut log_tau = losses::TAU_INIT.ln();

    let adamw = AdamWConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: 0.0,
    };
    let tensor_lens: Vec<usize> = image_encoder
        .net
        .param_slices()
        .iter()
        .chain(text_encoder.net.param_slices().iter())
        .map(|s| s.len())
        .chain([1usize])
        .collect();
    let mut state = OptimizerState::new(&tensor_lens);

    let steps_per_epoch = n / batch_size;
    let total_steps = (steps_per_epoch * epochs) as u64;
    let mut step = 0u64;
    for epoch in 0..epochs {
        let perm = seeds::epoch_permutation(world.seed, epoch as u64, seeds::PRETRAIN_SHUFFLE, n);
        for chunk in perm.chunks_exact(batch_size) {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let images = image_batch(&batch);
            let texts = text_feature_batch(&batch);

            let (v_raw, v_cache) = image_encoder.net.forward(&images)?;
            let (t_raw, t_cache) = text_encoder.net.forward(&texts)?;
            let loss = tuning_loss(&v_raw, &t_raw, &v_raw, log_tau, 0.0)?;
            if !loss.value.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    context: "pretraining contrastive loss".into(),
                });
            }
            let (img_grads, _) = image_encoder.net.backward(&v_cache, &loss.grads[GRAD_IMAGE])?;
            let (txt_grads, _) = text_encoder.net.backward(&t_cache, &loss.grads[GRAD_TEXT])?;
            let tau_grad = [loss.grads[GRAD_LOG_TAU].get(0, 0)];

            let lr = cosine_lr(step, total_steps, opts.lr);
            let mut tau_param = [log_tau];
            {
                let mut params: Vec<&mut [f64]> = image_encoder.net.param_slices_mut();
                params.extend(text_encoder.net.param_slices_mut());
                params.push(&mut tau_param);
                let grad_slices: Vec<&[f64]> = img_grads
                    .slices()
                    .into_iter()
                    .chain(txt_grads.slices())
                    .chain([&tau_grad[..]])
                    .collect();
                adamw_step(&mut params, &grad_slices, &mut state, lr, &adamw)?;
            }
            log_tau = tau_param[0];
            step += 1;
        }
    }

    // Gate: fresh draw from the same (all-class) distribution.
    let mut eval_rng = seeds::rng(world.seed, seeds::PRETRAIN_EVAL);
    let eval_samples: Vec<PairedSample> = (0..world.n_classes)
        .flat_map(|c| {
            (0..opts.eval_per_class)
                .map(|_| world.sample(c, &mut eval_rng))
                .collect::<Vec<_>>()
        })
        .collect();
    let refs: Vec<&PairedSample> = eval_samples.iter().collect();
    let (v, _) = l2_normalize(&image_encoder.apply(&image_batch(&refs))?, NORM_SMOOTHING_EPS);
    let (t, _) = l2_normalize(&text_encoder.apply(&text_feature_batch(&refs))?, NORM_SMOOTHING_EPS);
    let (i2t, t2i) = crate::eval::recall_at_k(&v, &t, 1)?;
    if i2t.min(t2i) < opts.recall_gate {
        return Err(Error::PretrainGate {
            recall: i2t.min(t2i),
            required: opts.recall_gate,
        });
    }

    image_encoder.frozen = true;
    text_encoder.frozen = true;
    Ok(Teachers {
        text_encoder,
        image_encoder,
        log_tau,
        pretrain_recall: (i2t, t2i),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world() -> SyntheticWorld {
        generate_world(
            0,
            WorldDims {
                latent: 4,
                image: 8,
                llm: 12,
                clip: 6,
            },
            6,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        let a = tiny_world();
        let b = tiny_world();
        assert_eq!(a, b);
        let probe = vec![0.3, -0.2, 1.0, 0.5];
        assert_eq!(a.image_view(&probe), b.image_view(&probe));
        assert_eq!(a.llm_view(&probe), b.llm_view(&probe));
        assert_eq!(a.text_view(&probe), b.text_view(&probe));
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let world = generate_world(1, WorldDims::default(), 8, 0.0).unwrap();
        let mut rng = seeds::rng(7, 99);
        let a = world.sample(3, &mut rng);
        let b = world.sample(3, &mut rng);
        assert_eq!(a.image_features, b.image_features);
        assert_eq!(a.llm_text_embedding, b.llm_text_embedding);
        assert_eq!(a.text_features, b.text_features);
    }

    #[test]
    fn zero_noise_nearest_prototype_is_perfect_per_view() {
        let world = generate_world(2, WorldDims::default(), 8, 0.0).unwrap();
        let mut rng = seeds::rng(3, 99);
        // For each view, classify samples by nearest view-space prototype.
        for view in 0..3usize {
            let render = |z: &[f64]| match view {
                0 => world.image_view(z),
                1 => world.llm_view(z),
                _ => world.text_view(z),
            };
            let protos: Vec<Vec<f64>> =
                (0..8).map(|c| render(world.prototype(c))).collect();
            for c in 0..8 {
                let s = world.sample(c, &mut rng);
                let sample_view = match view {
                    0 => &s.image_features,
                    1 => &s.llm_text_embedding,
                    _ => &s.text_features,
                };
                let nearest = protos
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(sample_view.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(sample_view.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                assert_eq!(nearest, c);
            }
        }
    }

    #[test]
    fn unattainable_separability_fails() {
        let err = generate_world(0, WorldDims::default(), 32, 1e6).unwrap_err();
        assert!(matches!(err, Error::WorldGeneration(_)));
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(generate_world(0, WorldDims::default(), 3, 0.1).is_err());
    }

    #[test]
    fn corpus_split_shapes_and_balance() {
        let world = tiny_world();
        let split = sample_corpus(
            &world,
            5,
            SplitSpec {
                heldout_classes: 2,
                eval_per_class: 3,
            },
        )
        .unwrap();
        assert_eq!(split.finetune_classes, 4);
        assert_eq!(split.finetune.len(), 4 * 5);
        assert_eq!(split.retrieval_eval.len(), 4 * 3);
        assert_eq!(split.heldout.len(), 2 * 3);
        // Exactly uniform label histogram within each split.
        for (samples, classes, per) in [
            (&split.finetune, 4usize, 5usize),
            (&split.retrieval_eval, 4, 3),
        ] {
            let mut counts = vec![0usize; 4];
            for s in samples.iter() {
                assert!(s.class_id < classes);
                counts[s.class_id] += 1;
            }
            assert!(counts.iter().all(|&c| c == per));
        }
        // Held-out classes only in the heldout split.
        assert!(split.heldout.iter().all(|s| s.class_id >= 4));
    }

    #[test]
    fn zero_heldout_covers_all_classes() {
        let world = tiny_world();
        let split = sample_corpus(
            &world,
            1,
            SplitSpec {
                heldout_classes: 0,
                eval_per_class: 1,
            },
        )
        .unwrap();
        assert_eq!(split.finetune_classes, 6);
        assert_eq!(split.finetune.len(), 6);
        assert!(split.heldout.is_empty());
    }

    #[test]
    fn oversized_heldout_rejected() {
        let world = tiny_world();
        assert!(sample_corpus(
            &world,
            1,
            SplitSpec {
                heldout_classes: 6,
                eval_per_class: 1,
            },
        )
        .is_err());
    }

    #[test]
    fn pemb_round_trip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pemb");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let b = EmbeddingBatch::new(
            3,
            5,
            (0..15).map(|_| rng.random_range(-1e6..1e6)).collect(),
        )
        .unwrap();
        write_embeddings(&path, &b).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(b.rows(), back.rows());
        assert_eq!(b.cols(), back.cols());
        for (x, y) in b.data().iter().zip(back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn pemb_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pemb");
        write_embeddings(&path, &EmbeddingBatch::zeros(2, 2)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_embeddings(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pemb_empty_batch_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pemb");
        let b = EmbeddingBatch::zeros(0, 7);
        write_embeddings(&path, &b).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.cols(), 7);
    }

    #[test]
    fn pemb_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pemb");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let world = tiny_world();
        let split = sample_corpus(
            &world,
            3,
            SplitSpec {
                heldout_classes: 2,
                eval_per_class: 2,
            },
        )
        .unwrap();
        write_corpus(dir.path(), &world, &split).unwrap();
        let (world2, split2) = load_corpus(dir.path()).unwrap();
        assert_eq!(world, world2);
        assert_eq!(split.finetune.len(), split2.finetune.len());
        for (a, b) in split.finetune.iter().zip(&split2.finetune) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.image_features, b.image_features);
            assert_eq!(a.llm_text_embedding, b.llm_text_embedding);
            assert_eq!(a.text_features, b.text_features);
        }
    }

    #[test]
    fn gen_data_rerun_writes_identical_bytes() {
        let world = tiny_world();
        let split = sample_corpus(
            &world,
            2,
            SplitSpec {
                heldout_classes: 2,
                eval_per_class: 1,
            },
        )
        .unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_corpus(d1.path(), &world, &split).unwrap();
        write_corpus(d2.path(), &world, &split).unwrap();
        for entry in std::fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between reruns");
        }
    }

    #[test]
    fn attach_teacher_embeddings_fills_all_splits() {
        let world = tiny_world();
        let mut split = sample_corpus(
            &world,
            2,
            SplitSpec {
                heldout_classes: 2,
                eval_per_class: 1,
            },
        )
        .unwrap();
        assert!(!split.teacher_embeddings_attached());
        let teacher = ToyEncoder::new(
            MlpProjector::init(world.dims.clip, 8, world.dims.clip, Activation::Gelu, 1),
            "text_features",
        )
        .frozen();
        split.attach_teacher_embeddings(&teacher).unwrap();
        assert!(split.teacher_embeddings_attached());
        assert!(split
            .heldout
            .iter()
            .all(|s| s.clip_teacher_text_embedding.is_some()));
    }

    #[test]
    fn pretrain_is_deterministic_and_freezes_teachers() {
        let world = tiny_world();
        let opts = PretrainOptions {
            hidden_dim: 16,
            batch_size: 24,
            n_per_class: 8,
            eval_per_class: 4,
            recall_gate: 0.0, // smoke test: determinism only
            ..PretrainOptions::default()
        };
        let a = pretrain_teachers_with(&world, 2, &opts).unwrap();
        let b = pretrain_teachers_with(&world, 2, &opts).unwrap();
        assert_eq!(a.text_encoder.net, b.text_encoder.net);
        assert_eq!(a.image_encoder.net, b.image_encoder.net);
        assert_eq!(a.log_tau.to_bits(), b.log_tau.to_bits());
        assert!(a.text_encoder.frozen);
        assert!(a.image_encoder.frozen);
    }
}
