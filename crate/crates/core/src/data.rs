//! Synthetic trimodal dataset: a class id rendered as an 8x8 glyph, a
//! colorized 3x8x8 glyph, and a one-hot text sequence spelling the class word.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::container::{Container, ContainerError, Payload, DATASET_MAGIC};
use crate::diffengine::Tensor;
use crate::model::{Likelihood, ModalityBatch, ModalitySpec, ModelError};
use crate::scalar::Scalar;

pub const SIDE: usize = 8;
pub const PIXELS: usize = SIDE * SIDE;
pub const CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 10;
/// 26 letters and the blank.
pub const ALPHABET: usize = 27;
pub const BLANK: usize = 26;
/// Label stored for samples without a class, e.g. generated ones.
pub const UNLABELED: u32 = u32::MAX;

pub const WORDS: [&str; MAX_CLASSES] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

// 6x6 digit shapes, drawn with a one-pixel margin inside the 8x8 frame so a
// one-pixel shift never clips them.
const SHAPES: [[&str; 6]; MAX_CLASSES] = [
    [".####.", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", "....#.", "..##..", ".#....", "######"],
    ["#####.", ".....#", "..###.", ".....#", ".....#", "#####."],
    ["#...#.", "#...#.", "######", "....#.", "....#.", "....#."],
    ["######", "#.....", "#####.", ".....#", ".....#", "#####."],
    [".####.", "#.....", "#####.", "#....#", "#....#", ".####."],
    ["######", "....#.", "...#..", "..#...", "..#...", "..#..."],
    [".####.", "#....#", ".####.", "#....#", "#....#", ".####."],
    [".####.", "#....#", "#....#", ".#####", ".....#", ".####."],
];

/// Binary 8x8 template of class `k`, row-major.
pub fn template(k: usize) -> [f32; PIXELS] {
    let mut t = [0.0; PIXELS];
    for (r, row) in SHAPES[k].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                t[(r + 1) * SIDE + c + 1] = 1.0;
            }
        }
    }
    t
}

/// `img` moved by `(dy, dx)`; pixels shifted in from outside are 0.
pub fn shift(img: &[f32], dy: i32, dx: i32) -> [f32; PIXELS] {
    let mut out = [0.0; PIXELS];
    for r in 0..SIDE as i32 {
        for c in 0..SIDE as i32 {
            let (sr, sc) = (r - dy, c - dx);
            if (0..SIDE as i32).contains(&sr) && (0..SIDE as i32).contains(&sc) {
                out[(r * SIDE as i32 + c) as usize] = img[(sr * SIDE as i32 + sc) as usize];
            }
        }
    }
    out
}

pub fn letter_index(ch: u8) -> usize {
    match ch {
        b'a'..=b'z' => (ch - b'a') as usize,
        _ => BLANK,
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub noise_std_a: f64,
    pub noise_std_b: f64,
    /// Random one-pixel translations of both glyph modalities.
    pub jitter: bool,
    pub text_length: usize,
    pub alphabet: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 10_000,
            num_classes: MAX_CLASSES,
            seed: 0,
            noise_std_a: 0.1,
            noise_std_b: 0.1,
            jitter: true,
            text_length: 8,
            alphabet: ALPHABET,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.num_samples == 0 {
            return bad("num_samples must be >= 1".into());
        }
        if !(1..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 1..={MAX_CLASSES}"));
        }
        if self.alphabet != ALPHABET {
            return bad(format!("alphabet must be {ALPHABET} (26 letters and blank)"));
        }
        let longest = WORDS[..self.num_classes].iter().map(|w| w.len()).max().unwrap_or(0);
        if self.text_length < longest {
            return bad(format!(
                "text_length {} is shorter than the longest class word ({longest})",
                self.text_length
            ));
        }
        for (name, s) in [("noise_std_a", self.noise_std_a), ("noise_std_b", self.noise_std_b)] {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalSample {
    /// 8x8 gray glyph in `[0, 1]`.
    pub mod_a: Vec<f32>,
    /// Channel-major 3x8x8 color glyph in `[0, 1]`.
    pub mod_b: Vec<f32>,
    /// `text_length x 27` one-hot rows.
    pub mod_c: Vec<f32>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub text_length: usize,
    pub samples: Vec<TrimodalSample>,
}

fn jitter<R: Rng>(rng: &mut R, on: bool) -> (i32, i32) {
    if on {
        (rng.random_range(-1..=1), rng.random_range(-1..=1))
    } else {
        (0, 0)
    }
}

fn add_noise<R: Rng>(rng: &mut R, x: &mut [f32], std: f64) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("finite std");
        for v in x {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
}

/// One-hot rows spelling `word` from position `start`, blanks elsewhere.
pub fn encode_text(word: &str, start: usize, text_length: usize) -> Vec<f32> {
    let mut out = vec![0.0; text_length * ALPHABET];
    for p in 0..text_length {
        let ch = p
            .checked_sub(start)
            .and_then(|i| word.as_bytes().get(i))
            .map_or(BLANK, |&b| letter_index(b));
        out[p * ALPHABET + ch] = 1.0;
    }
    out
}

/// Sample `i` of the dataset; depends only on `(config, i)`.
pub fn render_sample(config: &DatasetConfig, i: usize) -> TrimodalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64);
    let label = i % config.num_classes;
    let glyph = template(label);

    let (dy, dx) = jitter(&mut rng, config.jitter);
    let mut mod_a = shift(&glyph, dy, dx).to_vec();
    add_noise(&mut rng, &mut mod_a, config.noise_std_a);

    let (dy, dx) = jitter(&mut rng, config.jitter);
    let shape = shift(&glyph, dy, dx);
    let background: [f32; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
    let mut foreground: [f32; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let bright = rng.random_range(0..CHANNELS);
    foreground[bright] = rng.random_range(0.7..1.0);
    let mut mod_b = Vec::with_capacity(CHANNELS * PIXELS);
    for ch in 0..CHANNELS {
        mod_b.extend(shape.iter().map(|&on| if on > 0.5 { foreground[ch] } else { background[ch] }));
    }
    add_noise(&mut rng, &mut mod_b, config.noise_std_b);

    let word = WORDS[label];
    let start = rng.random_range(0..=config.text_length - word.len());
    let mod_c = encode_text(word, start, config.text_length);

    TrimodalSample {
        mod_a,
        mod_b,
        mod_c,
        label: label as u32,
    }
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    Ok(Dataset {
        num_classes: config.num_classes,
        text_length: config.text_length,
        samples: (0..config.num_samples).map(|i| render_sample(config, i)).collect(),
    })
}

/// Modality specs of the trimodal data with shared hidden widths.
pub fn trimodal_specs(text_length: usize, hidden: &[usize]) -> Vec<ModalitySpec> {
    let spec = |name: &str, n, likelihood| ModalitySpec {
        name: name.into(),
        element_count: n,
        likelihood,
        hidden: hidden.to_vec(),
    };
    vec![
        spec("mod_a", PIXELS, Likelihood::Gaussian { scale: 1.0 }),
        spec("mod_b", CHANNELS * PIXELS, Likelihood::Gaussian { scale: 1.0 }),
        spec(
            "mod_c",
            text_length * ALPHABET,
            Likelihood::Categorical { alphabet: ALPHABET },
        ),
    ]
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn element_counts(&self) -> [usize; 3] {
        [PIXELS, CHANNELS * PIXELS, self.text_length * ALPHABET]
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Modality tensors `[n, elements]` in sample order.
    pub fn tensors<T: Scalar>(&self) -> [Tensor<T>; 3] {
        let n = self.len();
        let counts = self.element_counts();
        let pick = |j: usize| {
            let data = self
                .samples
                .iter()
                .flat_map(|s| match j {
                    0 => &s.mod_a,
                    1 => &s.mod_b,
                    _ => &s.mod_c,
                })
                .map(|&v| T::lit(v as f64))
                .collect();
            Tensor::matrix(n, counts[j], data).expect("sample sizes match")
        };
        [pick(0), pick(1), pick(2)]
    }

    /// All samples as one complete batch.
    pub fn full_batch<T: Scalar>(&self) -> Result<ModalityBatch<T>, DataError> {
        if self.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(ModalityBatch::complete(self.tensors().to_vec(), self.labels())?)
    }

    /// Mini-batches in an order shuffled by `shuffle_seed`, the last one partial.
    pub fn batches<T: Scalar>(&self, batch_size: usize, shuffle_seed: u64) -> Result<Batches<T>, DataError> {
        if self.is_empty() {
            return Err(DataError::Empty);
        }
        if batch_size == 0 {
            return Err(DataError::Config("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        Ok(Batches {
            tensors: self.tensors(),
            labels: self.labels(),
            order,
            batch_size,
            next: 0,
        })
    }
}

pub struct Batches<T> {
    tensors: [Tensor<T>; 3],
    labels: Vec<u32>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<T: Scalar> Iterator for Batches<T> {
    type Item = ModalityBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let rows = &self.order[self.next..end];
        self.next = end;
        let data = self.tensors.iter().map(|t| t.select_rows(rows)).collect();
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Some(ModalityBatch::complete(data, labels).expect("rows from one dataset"))
    }
}

pub fn dataset_to_container(ds: &Dataset) -> Container {
    let n = ds.len();
    let counts = ds.element_counts();
    let mut c = Container::new(DATASET_MAGIC);
    c.push_meta("num_classes", ds.num_classes);
    c.push_meta("text_length", ds.text_length);
    let gather = |f: fn(&TrimodalSample) -> &[f32]| ds.samples.iter().flat_map(f).copied().collect();
    c.push("mod_a", vec![n, counts[0]], Payload::F32(gather(|s| &s.mod_a)));
    c.push("mod_b", vec![n, counts[1]], Payload::F32(gather(|s| &s.mod_b)));
    c.push("mod_c", vec![n, counts[2]], Payload::F32(gather(|s| &s.mod_c)));
    c.push("labels", vec![n], Payload::U32(ds.labels()));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset, DataError> {
    let bad = |m: String| DataError::Container(ContainerError::Malformed(m));
    let parse = |key: &str| -> Result<usize, DataError> {
        c.require_meta(key)?
            .parse()
            .map_err(|e| bad(format!("meta {key}: {e}")))
    };
    let num_classes = parse("num_classes")?;
    let text_length = parse("text_length")?;
    let counts = [PIXELS, CHANNELS * PIXELS, text_length * ALPHABET];
    let labels = match &c.entry("labels")?.payload {
        Payload::U32(v) => v.clone(),
        Payload::F32(_) => return Err(bad("labels must be u32".into())),
    };
    let n = labels.len();
    let mut mods = Vec::new();
    for (name, count) in ["mod_a", "mod_b", "mod_c"].into_iter().zip(counts) {
        let e = c.entry(name)?;
        if e.shape != [n, count] {
            return Err(bad(format!("{name} has shape {:?}, expected [{n}, {count}]", e.shape)));
        }
        match &e.payload {
            Payload::F32(v) => mods.push(v),
            Payload::U32(_) => return Err(bad(format!("{name} must be f32"))),
        }
    }
    let samples = (0..n)
        .map(|i| TrimodalSample {
            mod_a: mods[0][i * counts[0]..(i + 1) * counts[0]].to_vec(),
            mod_b: mods[1][i * counts[1]..(i + 1) * counts[1]].to_vec(),
            mod_c: mods[2][i * counts[2]..(i + 1) * counts[2]].to_vec(),
            label: labels[i],
        })
        .collect();
    Ok(Dataset {
        num_classes,
        text_length,
        samples,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), DataError> {
    Ok(dataset_to_container(ds).save(path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    dataset_from_container(&Container::load(path, DATASET_MAGIC)?)
}

/// Dataset holding generated modality tensors, labelled with `labels` or
/// [`UNLABELED`].
pub fn dataset_from_tensors<T: Scalar>(
    tensors: &[Tensor<T>],
    labels: Option<&[u32]>,
    num_classes: usize,
    text_length: usize,
) -> Dataset {
    let n = tensors[0].rows();
    let samples = (0..n)
        .map(|i| {
            let row = |j: usize| tensors[j].row_slice(i).iter().map(|v| v.to_f64_lossy() as f32).collect();
            TrimodalSample {
                mod_a: row(0),
                mod_b: row(1),
                mod_c: row(2),
                label: labels.map_or(UNLABELED, |l| l[i]),
            }
        })
        .collect();
    Dataset {
        num_classes,
        text_length,
        samples,
    }
}

#[cfg(test)]
mod tests;
