//! Seeded synthetic audio-visual classification tasks.
//!
//! Every class owns a fixed random token pattern per modality. A clip is its
//! class pattern broadcast over time (restricted to a window for the temporal
//! flavor, summed over active classes for the multi-label flavor) plus
//! i.i.d. Gaussian noise. Generation is a pure function of the [`TaskSpec`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    SingleLabelTemporal,
    MultiLabel,
    QaStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub flavor: Flavor,
    pub num_classes: usize,
    pub clips_train: usize,
    pub clips_val: usize,
    pub clips_test: usize,
    pub time_steps: usize,
    pub video_grid: (usize, usize),
    pub audio_grid: (usize, usize),
    pub base_channels: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Question count for the QA flavor; classes are (question, answer) pairs.
    #[serde(default = "default_questions")]
    pub num_questions: usize,
}

fn default_questions() -> usize {
    1
}

impl TaskSpec {
    pub fn new(
        task_id: &str,
        flavor: Flavor,
        num_classes: usize,
        seed: u64,
        noise_sigma: f64,
    ) -> Self {
        Self {
            task_id: task_id.to_string(),
            flavor,
            num_classes,
            clips_train: 600,
            clips_val: 100,
            clips_test: 100,
            time_steps: 5,
            video_grid: (4, 4),
            audio_grid: (4, 4),
            base_channels: 8,
            seed,
            noise_sigma,
            num_questions: 1,
        }
    }

    pub fn video_positions(&self) -> usize {
        self.video_grid.0 * self.video_grid.1
    }

    pub fn audio_positions(&self) -> usize {
        self.audio_grid.0 * self.audio_grid.1
    }

    pub fn answers_per_question(&self) -> usize {
        self.num_classes / self.num_questions.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid(format!("task {}", self.task_id), reason));
        if self.task_id.is_empty() || self.task_id.contains(['/', '\\', ',', '.']) {
            return bad("task id must be non-empty without separators".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.time_steps == 0 || self.base_channels == 0 {
            return bad("time_steps and base_channels must be positive".into());
        }
        let grids = [
            self.video_grid.0,
            self.video_grid.1,
            self.audio_grid.0,
            self.audio_grid.1,
        ];
        if grids.contains(&0) {
            return bad("grid dimensions must be positive".into());
        }
        if self.clips_train == 0 || self.clips_val == 0 || self.clips_test == 0 {
            return bad("every split needs at least one clip".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            ));
        }
        if self.flavor == Flavor::QaStyle {
            if self.num_questions == 0
                || self.num_classes % self.num_questions != 0
                || self.answers_per_question() < 2
            {
                return bad(format!(
                    "{} classes cannot be split into {} questions with at least 2 answers",
                    self.num_classes, self.num_questions
                ));
            }
        } else if self.num_questions != 1 {
            return bad("num_questions applies to the qa_style flavor only".into());
        }
        Ok(())
    }
}

/// Default three-task suite standing in for AVE, AVVP and AVQA.
pub fn default_suite() -> Vec<TaskSpec> {
    let mut qa = TaskSpec::new("AVQA", Flavor::QaStyle, 6, 303, 1.5);
    qa.num_questions = 2;
    vec![
        TaskSpec::new("AVE", Flavor::SingleLabelTemporal, 4, 101, 1.5),
        TaskSpec::new("AVVP", Flavor::MultiLabel, 4, 202, 1.0),
        qa,
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Single(usize),
    Multi(Vec<bool>),
}

impl Label {
    /// Class id for single-label clips; for multi-hot labels the bitmask.
    pub fn key(&self) -> usize {
        match self {
            Label::Single(c) => *c,
            Label::Multi(h) => h
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| 1usize << i)
                .sum(),
        }
    }

    pub fn active(&self) -> Vec<usize> {
        match self {
            Label::Single(c) => vec![*c],
            Label::Multi(h) => h
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Text target: the class embedding, or the normalized sum of the
    /// active classes' embeddings.
    pub fn text_target(&self, class_text: ArrayView2<'_, f32>) -> ndarray::Array1<f32> {
        let mut t = ndarray::Array1::zeros(class_text.ncols());
        for c in self.active() {
            t += &class_text.row(c);
        }
        let n = t.dot(&t).sqrt();
        if n > 0.0 {
            t /= n;
        }
        t
    }
}

/// One clip, `[T, positions, C]` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AVClip {
    pub video_raw: Array3<f32>,
    pub audio_raw: Array3<f32>,
    pub label: Label,
    pub question_id: Option<usize>,
}

/// One split stored as stacked arrays `[N, T, positions, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub video: Array4<f32>,
    pub audio: Array4<f32>,
    pub labels: Vec<Label>,
    pub question_ids: Vec<Option<usize>>,
    /// Global clip index of each row.
    pub indices: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clip(&self, i: usize) -> AVClip {
        AVClip {
            video_raw: self.video.index_axis(Axis(0), i).to_owned(),
            audio_raw: self.audio.index_axis(Axis(0), i).to_owned(),
            label: self.labels[i].clone(),
            question_id: self.question_ids[i],
        }
    }

    pub fn batch(&self, rows: &[usize]) -> (Array4<f32>, Array4<f32>) {
        (
            self.video.select(Axis(0), rows),
            self.audio.select(Axis(0), rows),
        )
    }

    pub fn text_targets(&self, rows: &[usize], class_text: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = Array2::zeros((rows.len(), class_text.ncols()));
        for (mut r, &i) in out.rows_mut().into_iter().zip(rows) {
            r.assign(&self.labels[i].text_target(class_text));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl TaskDataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

struct Patterns {
    video: Vec<Array2<f32>>,
    audio: Vec<Array2<f32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        (z * scale) as f32
    })
}

fn patterns(spec: &TaskSpec) -> Patterns {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.base_channels;
    let video = (0..spec.num_classes)
        .map(|_| gaussian(&mut rng, (spec.video_positions(), c), 1.0))
        .collect();
    let audio = (0..spec.num_classes)
        .map(|_| gaussian(&mut rng, (spec.audio_positions(), c), 1.0))
        .collect();
    Patterns { video, audio }
}

fn clip_rng(spec: &TaskSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn make_clip(spec: &TaskSpec, pats: &Patterns, index: usize) -> AVClip {
    let mut rng = clip_rng(spec, index);
    let k = spec.num_classes;
    let t = spec.time_steps;
    let (label, question_id) = match spec.flavor {
        Flavor::SingleLabelTemporal => (Label::Single(rng.random_range(0..k)), None),
        Flavor::QaStyle => {
            let c = rng.random_range(0..k);
            (Label::Single(c), Some(c / spec.answers_per_question()))
        }
        Flavor::MultiLabel => {
            let mut hot = vec![false; k];
            let first = rng.random_range(0..k);
            hot[first] = true;
            if rng.random_bool(0.5) {
                let second = (first + rng.random_range(1..k)) % k;
                hot[second] = true;
            }
            (Label::Multi(hot), None)
        }
    };
    let window = match spec.flavor {
        Flavor::SingleLabelTemporal => {
            let len = t.div_ceil(2);
            let start = rng.random_range(0..=t - len);
            start..start + len
        }
        _ => 0..t,
    };
    let active = label.active();
    let build = |rng: &mut ChaCha8Rng, pats: &[Array2<f32>], positions: usize| {
        let mut x = Array3::<f32>::zeros((t, positions, spec.base_channels));
        for ti in window.clone() {
            let mut frame = x.index_axis_mut(Axis(0), ti);
            for &c in &active {
                frame += &pats[c];
            }
        }
        x.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + (z * spec.noise_sigma) as f32
        });
        x
    };
    let video_raw = build(&mut rng, &pats.video, spec.video_positions());
    let audio_raw = build(&mut rng, &pats.audio, spec.audio_positions());
    AVClip {
        video_raw,
        audio_raw,
        label,
        question_id,
    }
}

fn stack(spec: &TaskSpec, pats: &Patterns, range: std::ops::Range<usize>) -> Split {
    let n = range.len();
    let t = spec.time_steps;
    let c = spec.base_channels;
    let mut video = Array4::zeros((n, t, spec.video_positions(), c));
    let mut audio = Array4::zeros((n, t, spec.audio_positions(), c));
    let mut labels = Vec::with_capacity(n);
    let mut question_ids = Vec::with_capacity(n);
    for (row, index) in range.clone().enumerate() {
        let clip = make_clip(spec, pats, index);
        video.slice_mut(s![row, .., .., ..]).assign(&clip.video_raw);
        audio.slice_mut(s![row, .., .., ..]).assign(&clip.audio_raw);
        labels.push(clip.label);
        question_ids.push(clip.question_id);
    }
    Split {
        video,
        audio,
        labels,
        question_ids,
        indices: range.collect(),
    }
}

/// Generates the three splits. Clip `i` is drawn from its own RNG stream, so
/// splits (train, then val, then test over consecutive indices) never share
/// a clip.
pub fn make_task(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let pats = patterns(spec);
    let a = spec.clips_train;
    let b = a + spec.clips_val;
    let c = b + spec.clips_test;
    Ok(TaskDataset {
        spec: spec.clone(),
        train: stack(spec, &pats, 0..a),
        val: stack(spec, &pats, a..b),
        test: stack(spec, &pats, b..c),
    })
}

/// Seeded orthonormal class embeddings `[num_classes, dim]` (Gram–Schmidt on
/// Gaussian rows).
pub fn class_text_embeddings(spec: &TaskSpec, dim: usize) -> Result<Array2<f32>> {
    let k = spec.num_classes;
    if dim < k {
        return Err(Error::invalid(
            "class text embeddings",
            format!("{k} orthonormal classes need dim ≥ {k}, got {dim}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(Array2::from_shape_fn((k, dim), |(i, j)| basis[i][j] as f32))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    indices: Vec<usize>,
    labels: Vec<Label>,
    question_ids: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    spec: TaskSpec,
    splits: BTreeMap<String, SplitManifest>,
    /// File name → SHA-256 of its bytes.
    arrays: BTreeMap<String, String>,
}

const SPLITS: [(&str, SplitName); 3] = [
    ("train", SplitName::Train),
    ("val", SplitName::Val),
    ("test", SplitName::Test),
];

/// Outcome of [`save_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaveOutcome {
    pub files_written: usize,
    pub manifest_sha256: String,
}

/// Persists a dataset as `manifest.json` plus one array file per split and
/// modality. Files whose bytes already match are left untouched.
pub fn save_dataset(ds: &TaskDataset, dir: &Path) -> Result<SaveOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut splits = BTreeMap::new();
    for (name, which) in SPLITS {
        let sp = ds.split(which);
        files.push((
            format!("{name}_video.f32"),
            store::encode_array(sp.video.view().into_dyn()),
        ));
        files.push((
            format!("{name}_audio.f32"),
            store::encode_array(sp.audio.view().into_dyn()),
        ));
        splits.insert(
            name.to_string(),
            SplitManifest {
                indices: sp.indices.clone(),
                labels: sp.labels.clone(),
                question_ids: sp.question_ids.clone(),
            },
        );
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA,
        spec: ds.spec.clone(),
        splits,
        arrays: files
            .iter()
            .map(|(n, b)| (n.clone(), store::sha256_hex(b)))
            .collect(),
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: dir.join("manifest.json"),
        source: e,
    })?;
    files.push(("manifest.json".into(), text));
    let mut written = 0;
    for (name, bytes) in &files {
        let path = dir.join(name);
        if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
            store::write_atomic(&path, bytes)?;
            written += 1;
        }
    }
    Ok(SaveOutcome {
        files_written: written,
        manifest_sha256: store::sha256_hex(&files.last().expect("manifest").1),
    })
}

pub fn load_dataset(dir: &Path) -> Result<TaskDataset> {
    let manifest: DatasetManifest = store::read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != DATASET_SCHEMA {
        return Err(Error::invalid(
            "dataset manifest",
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    manifest.spec.validate()?;
    let spec = manifest.spec;
    let mut out = Vec::new();
    for (name, _) in SPLITS {
        let meta = manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::invalid("dataset manifest", format!("missing split {name}")))?;
        let mut arrays = Vec::new();
        for (modality, positions) in [
            ("video", spec.video_positions()),
            ("audio", spec.audio_positions()),
        ] {
            let file = format!("{name}_{modality}.f32");
            let bytes = fs::read(dir.join(&file))
                .map_err(|e| Error::io(format!("reading {}", dir.join(&file).display()), e))?;
            if manifest.arrays.get(&file).map(String::as_str)
                != Some(store::sha256_hex(&bytes).as_str())
            {
                return Err(Error::CorruptArray {
                    name: file,
                    reason: "content hash does not match the manifest".into(),
                });
            }
            let a = store::decode_array(&file, &bytes)?;
            let expected = [
                meta.labels.len(),
                spec.time_steps,
                positions,
                spec.base_channels,
            ];
            let a = a
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|_| Error::CorruptArray {
                    name: file.clone(),
                    reason: "expected a rank-4 array".into(),
                })?;
            if a.shape() != expected {
                return Err(Error::CorruptArray {
                    name: file,
                    reason: format!("shape {:?}, expected {:?}", a.shape(), expected),
                });
            }
            arrays.push(a);
        }
        let audio = arrays.pop().expect("audio");
        let video = arrays.pop().expect("video");
        out.push(Split {
            video,
            audio,
            labels: meta.labels.clone(),
            question_ids: meta.question_ids.clone(),
            indices: meta.indices.clone(),
        });
    }
    let test = out.pop().expect("test");
    let val = out.pop().expect("val");
    let train = out.pop().expect("train");
    Ok(TaskDataset {
        spec,
        train,
        val,
        test,
    })
}
