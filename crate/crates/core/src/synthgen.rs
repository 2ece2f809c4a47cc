//! Seeded two-domain synthetic corpora with planted anomaly windows.
//!
//! Every frame of stream A is drawn around its domain's mean. Frames inside
//! an anomaly window add the class direction, scaled by `anomaly_magnitude`,
//! plus a direction specific to the (domain, class) pair scaled by
//! `domain_anomaly_magnitude`. Stream B mixes a fixed linear map of stream A
//! with independent noise at correlation `rho`; only the fraction
//! `aux_domain_coupling` of the domain-specific terms reaches stream B. Both streams are averaged
//! over `clip_len`-frame chunks to give one feature row per clip.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::FrameLabels;
use crate::error::{Error, Result};
use crate::featstore::{encode_blob, FeatureBlob, ManifestEntry, ManifestFile, MANIFEST_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Inclusive range of anomaly window lengths, in frames.
    pub window: [usize; 2],
}

/// One manifest to emit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub domain: String,
    pub n_abnormal: usize,
    pub n_normal: usize,
    /// Restricts the anomaly classes drawn for this split; all when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub splits: Vec<SplitSpec>,
    /// Inclusive range of video lengths, in frames.
    pub frames: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub main_dim: usize,
    pub aux_dim: usize,
    /// Frames averaged into one feature row.
    pub clip_len: usize,
    /// Distance between the normal-feature means of the first domain and
    /// every other domain.
    pub domain_shift: f64,
    pub anomaly_magnitude: f64,
    pub domain_anomaly_magnitude: f64,
    pub rho: f64,
    pub noise: f64,
    /// Share of the domain mean and domain-specific anomaly direction that
    /// stream B inherits from stream A.
    #[serde(default = "default_coupling")]
    pub aux_domain_coupling: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    30.0
}

fn default_coupling() -> f64 {
    1.0
}

impl SynthSpec {
    /// Desk-scale two-domain layout: labeled source videos, external and test
    /// videos from a shifted target domain.
    pub fn two_domain(seed: u64, n_labeled: usize, n_external: usize, n_test: usize) -> Self {
        let split = |name: &str, domain: &str, n: usize| SplitSpec {
            name: name.into(),
            domain: domain.into(),
            n_abnormal: n / 2,
            n_normal: n - n / 2,
            classes: None,
        };
        Self {
            seed,
            splits: vec![
                split("labeled", "source", n_labeled),
                split("external", "target", n_external),
                split("test", "target", n_test),
            ],
            frames: [160, 320],
            classes: ["fighting", "arson", "theft"]
                .into_iter()
                .map(|n| ClassSpec {
                    name: n.into(),
                    window: [24, 64],
                })
                .collect(),
            main_dim: 16,
            aux_dim: 16,
            clip_len: 8,
            domain_shift: 1.0,
            anomaly_magnitude: 1.0,
            domain_anomaly_magnitude: 1.0,
            rho: 0.7,
            noise: 1.0,
            aux_domain_coupling: default_coupling(),
            fps: default_fps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        for (name, v) in [
            ("domain_shift", self.domain_shift),
            ("anomaly_magnitude", self.anomaly_magnitude),
            ("domain_anomaly_magnitude", self.domain_anomaly_magnitude),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.aux_domain_coupling) {
            return fail(format!("aux_domain_coupling must lie in [0, 1], got {}", self.aux_domain_coupling));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if self.main_dim == 0 || self.aux_dim == 0 || self.clip_len == 0 {
            return fail("dimensions and clip length must be positive".into());
        }
        let [lo, hi] = self.frames;
        if lo == 0 || lo > hi {
            return fail(format!("bad frame range [{lo}, {hi}]"));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.classes {
            let [a, b] = c.window;
            if a == 0 || a > b || b > lo {
                return fail(format!(
                    "class `{}` window [{a}, {b}] must be non-empty and fit the shortest video ({lo} frames)",
                    c.name
                ));
            }
            if !names.insert(c.name.as_str()) {
                return fail(format!("duplicate class `{}`", c.name));
            }
        }
        let mut split_names = std::collections::BTreeSet::new();
        for s in &self.splits {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return fail(format!("split name `{}` must be a plain identifier", s.name));
            }
            if !split_names.insert(s.name.as_str()) {
                return fail(format!("duplicate split `{}`", s.name));
            }
            let pool = self.split_classes(s);
            if let Some(unknown) = s.classes.iter().flatten().find(|c| !names.contains(c.as_str())) {
                return fail(format!("split `{}` names unknown class `{unknown}`", s.name));
            }
            if s.n_abnormal > 0 && pool.is_empty() {
                return fail(format!("split `{}` has abnormal videos but no classes", s.name));
            }
        }
        if self.splits.is_empty() {
            return fail("no splits".into());
        }
        Ok(())
    }

    fn split_classes(&self, split: &SplitSpec) -> Vec<&ClassSpec> {
        self.classes
            .iter()
            .filter(|c| split.classes.as_ref().map_or(true, |keep| keep.contains(&c.name)))
            .collect()
    }

    fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.splits {
            if !out.contains(&s.domain.as_str()) {
                out.push(&s.domain);
            }
        }
        out
    }
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"cdl-synth");
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v = gaussian_vec(rng, n);
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Fixed random quantities shared by every video of a corpus.
struct World {
    domain_means: BTreeMap<String, Array1<f64>>,
    class_dirs: BTreeMap<String, Array1<f64>>,
    domain_class_dirs: BTreeMap<(String, String), Array1<f64>>,
    /// `aux_dim x main_dim`, rows scaled so the map roughly preserves norms.
    cross_map: Array2<f64>,
}

impl World {
    fn new(spec: &SynthSpec) -> Self {
        let d = spec.main_dim;
        let domains = spec.domains();
        let mut domain_means = BTreeMap::new();
        for (i, dom) in domains.iter().enumerate() {
            let mean = if i == 0 {
                Array1::zeros(d)
            } else {
                unit(&mut rng_for(spec.seed, &["domain", dom]), d) * spec.domain_shift
            };
            domain_means.insert(dom.to_string(), mean);
        }
        let mut class_dirs = BTreeMap::new();
        let mut domain_class_dirs = BTreeMap::new();
        for c in &spec.classes {
            class_dirs.insert(c.name.clone(), unit(&mut rng_for(spec.seed, &["class", &c.name]), d));
            for dom in &domains {
                let dir = unit(&mut rng_for(spec.seed, &["domain-class", dom, &c.name]), d);
                domain_class_dirs.insert((dom.to_string(), c.name.clone()), dir);
            }
        }
        let mut rng = rng_for(spec.seed, &["cross-map"]);
        let scale = 1.0 / (d as f64).sqrt();
        let cross_map = Array2::from_shape_fn((spec.aux_dim, d), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        Self {
            domain_means,
            class_dirs,
            domain_class_dirs,
            cross_map,
        }
    }
}

/// One generated video before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub domain: String,
    pub anomaly_class: Option<String>,
    pub frame_labels: FrameLabels,
    pub main: FeatureBlob,
    pub aux: FeatureBlob,
}

fn chunk_mean(frames: &Array2<f64>, clip_len: usize) -> FeatureBlob {
    let n = frames.nrows();
    let rows = n.div_ceil(clip_len);
    let mut out = Array2::<f32>::zeros((rows, frames.ncols()));
    for r in 0..rows {
        let (a, b) = (r * clip_len, ((r + 1) * clip_len).min(n));
        let mean = frames.slice(ndarray::s![a..b, ..]).mean_axis(ndarray::Axis(0)).expect("non-empty chunk");
        out.row_mut(r).assign(&mean.mapv(|v| v as f32));
    }
    FeatureBlob::new(out)
}

fn generate_video(spec: &SynthSpec, world: &World, split: &SplitSpec, index: usize, abnormal: bool) -> SynthVideo {
    let video_id = format!("{}-{index:04}", split.name);
    let mut rng = rng_for(spec.seed, &["video", &split.name, &index.to_string()]);
    let n_f = rng.random_range(spec.frames[0]..=spec.frames[1]);
    let mut labels = vec![0u8; n_f];
    let mut class = None;
    let mut signal = None;
    let mut domain_signal = None;
    if abnormal {
        let pool = spec.split_classes(split);
        let c = pool[rng.random_range(0..pool.len())];
        let len = rng.random_range(c.window[0]..=c.window[1]);
        let start = rng.random_range(0..=n_f - len);
        labels[start..start + len].fill(1);
        signal = Some(&world.class_dirs[&c.name] * spec.anomaly_magnitude);
        domain_signal =
            Some(&world.domain_class_dirs[&(split.domain.clone(), c.name.clone())] * spec.domain_anomaly_magnitude);
        class = Some(c.name.clone());
    }
    let mean = &world.domain_means[&split.domain];
    let d = spec.main_dim;
    let mut a = Array2::<f64>::zeros((n_f, d));
    // domain-specific part of each frame, partly removed before mapping to B
    let mut dom = Array2::<f64>::zeros((n_f, d));
    for t in 0..n_f {
        let mut x = gaussian_vec(&mut rng, d) * spec.noise;
        let mut y = mean.clone();
        if labels[t] == 1 {
            x += signal.as_ref().expect("abnormal video has a signal");
            y += domain_signal.as_ref().expect("abnormal video has a signal");
        }
        a.row_mut(t).assign(&(x + &y));
        dom.row_mut(t).assign(&y);
    }
    let mix = (1.0 - spec.rho * spec.rho).sqrt();
    let seen = &a - &(dom * (1.0 - spec.aux_domain_coupling));
    let mut b = seen.dot(&world.cross_map.t()) * spec.rho;
    for mut row in b.rows_mut() {
        row.scaled_add(mix * spec.noise, &gaussian_vec(&mut rng, spec.aux_dim));
    }
    SynthVideo {
        video_id,
        domain: split.domain.clone(),
        anomaly_class: class,
        frame_labels: FrameLabels::new(labels).expect("binary labels"),
        main: chunk_mean(&a, spec.clip_len),
        aux: chunk_mean(&b, spec.clip_len),
    }
}

/// All videos of one split, abnormal first, in id order.
pub fn generate_split(spec: &SynthSpec, split: &SplitSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let world = World::new(spec);
    Ok((0..split.n_abnormal + split.n_normal)
        .map(|i| generate_video(spec, &world, split, i, i < split.n_abnormal))
        .collect())
}

/// Paths and content digest of a written corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub manifests: BTreeMap<String, PathBuf>,
    pub n_videos: usize,
    /// SHA-256 over every written file, in write order.
    pub corpus_hash: String,
}

/// Writes `<split>.json` manifests with their blobs and frame-label files
/// under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthReport> {
    spec.validate()?;
    let world = World::new(spec);
    let mut hasher = Sha256::new();
    let mut write = |rel: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        hasher.update((rel.len() as u64).to_le_bytes());
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    let mut manifests = BTreeMap::new();
    let mut n_videos = 0;
    for split in &spec.splits {
        let mut records = Vec::new();
        for i in 0..split.n_abnormal + split.n_normal {
            let v = generate_video(spec, &world, split, i, i < split.n_abnormal);
            let dir = &split.name;
            let main_rel = format!("{dir}/{}.main.cdlf", v.video_id);
            let aux_rel = format!("{dir}/{}.aux.cdlf", v.video_id);
            let labels_rel = format!("{dir}/{}.labels", v.video_id);
            write(&main_rel, &encode_blob(&v.main))?;
            write(&aux_rel, &encode_blob(&v.aux))?;
            write(&labels_rel, format!("{}\n", v.frame_labels).as_bytes())?;
            records.push(ManifestEntry {
                video_id: v.video_id.clone(),
                domain: v.domain.clone(),
                n_frames: v.frame_labels.len(),
                weak_label: Some(u8::from(v.frame_labels.any_positive())),
                frame_labels_path: Some(labels_rel),
                anomaly_class: v.anomaly_class.clone(),
                streams: [("main".to_string(), main_rel), ("aux".to_string(), aux_rel)].into(),
            });
            n_videos += 1;
        }
        let manifest = ManifestFile {
            version: MANIFEST_VERSION,
            fps: spec.fps,
            streams: [("main".to_string(), spec.main_dim), ("aux".to_string(), spec.aux_dim)].into(),
            classes: Some(spec.classes.iter().map(|c| c.name.clone()).collect()),
            records,
        };
        let rel = format!("{}.json", split.name);
        write(&rel, manifest.to_json().as_bytes())?;
        manifests.insert(split.name.clone(), out_dir.join(rel));
    }
    Ok(SynthReport {
        manifests,
        n_videos,
        corpus_hash: hex::encode(hasher.finalize()),
    })
}
