//! Synthetic dialogue SCM corpus with known implicit causes.
//!
//! Each utterance draws an implicit cause `E_i ~ N(±1, 1)^dim` (positive
//! mean for emotion utterances). Utterances are then accumulated in order,
//! `U_i = Σ_{j<i} α_{j,i} U_j + E_i`, with `α_{j,i}` drawn from the causal band
//! when `(i, j)` is a labeled emotion-cause pair and from the non-causal band
//! otherwise. An optional uniform perturbation `ξ_i` is added last.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng, rng_from};
use crate::skeleton::Conversation;

const STREAM_TEMPLATE: u64 = 0x544D_504C;
const STREAM_SAMPLE: u64 = 0x534D_504C;
const STREAM_PERTURB: u64 = 0x5045_5254;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Random conversation templates: alternating speakers, independent emotion
/// labels, one uniformly chosen cause (predecessor or self) per emotion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSynthesizer {
    pub min_len: usize,
    pub max_len: usize,
    pub n_speakers: usize,
    pub emotion_rate: f64,
}

impl Default for TemplateSynthesizer {
    fn default() -> Self {
        TemplateSynthesizer {
            min_len: 6,
            max_len: 12,
            n_speakers: 2,
            emotion_rate: 0.3,
        }
    }
}

impl TemplateSynthesizer {
    pub fn synthesize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Conversation> {
        let n = rng.random_range(self.min_len..=self.max_len);
        let speakers: Vec<String> = (0..n)
            .map(|k| format!("S{}", k % self.n_speakers))
            .collect();
        let mut emotions = Vec::with_capacity(n);
        let mut ecp = Vec::new();
        for t in 1..=n {
            if rng.random_bool(self.emotion_rate) {
                emotions.push(Some("emotion".to_string()));
                ecp.push((t, rng.random_range(1..=t)));
            } else {
                emotions.push(None);
            }
        }
        Conversation::new(speakers, emotions, ecp)
    }

    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len || self.n_speakers == 0 {
            return Err(Error::Validation(
                "template synthesizer needs 1 <= min_len <= max_len and >= 1 speaker".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.emotion_rate) {
            return Err(Error::Validation("emotion_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub dimension: usize,
    pub emotion_mean: f64,
    pub non_emotion_mean: f64,
    pub noise_std: f64,
    pub causal_weight_range: [f64; 2],
    pub non_causal_weight_range: [f64; 2],
    /// Bounds of the per-utterance uniform perturbation; `None` disables it.
    pub perturbation: Option<[f64; 2]>,
    pub split_sizes: SplitSizes,
    pub synthesizer: Option<TemplateSynthesizer>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dimension: 50,
            emotion_mean: 1.0,
            non_emotion_mean: -1.0,
            noise_std: 1.0,
            causal_weight_range: [0.7, 1.0],
            non_causal_weight_range: [0.0, 0.3],
            perturbation: Some([-0.25, 0.25]),
            split_sizes: SplitSizes {
                train: 833,
                val: 47,
                test: 225,
            },
            synthesizer: Some(TemplateSynthesizer::default()),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if self.dimension == 0 {
            return Err(Error::Validation("dimension must be >= 1".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Validation("noise_std must be > 0".into()));
        }
        if !ordered(self.causal_weight_range) || !ordered(self.non_causal_weight_range) {
            return Err(Error::Validation(
                "weight ranges must be ordered [lo, hi]".into(),
            ));
        }
        if let Some(p) = self.perturbation {
            if !(p[0] < p[1]) {
                return Err(Error::Validation(
                    "perturbation range must satisfy lo < hi".into(),
                ));
            }
        }
        if let Some(s) = &self.synthesizer {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRecord", into = "SampleRecord")]
pub struct SyntheticSample {
    pub id: String,
    pub conversation: Conversation,
    /// `N × dim` realized utterance vectors.
    pub vectors: Vec<Vec<f64>>,
    /// `N × dim` ground-truth implicit causes.
    pub implicit_causes: Vec<Vec<f64>>,
    /// `weights[j][i]` is the strength of `U_j → U_i` (0-based).
    pub weights: Vec<Vec<f64>>,
    pub perturbed: bool,
}

/// One JSONL line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    speakers: Vec<String>,
    emotions: Vec<Option<String>>,
    ecp: Vec<(usize, usize)>,
    vectors: Vec<Vec<f64>>,
    implicit_causes: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    perturbed: bool,
}

impl TryFrom<SampleRecord> for SyntheticSample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        let conversation = Conversation::new(r.speakers, r.emotions, r.ecp)?;
        let n = conversation.len();
        let rows_ok = |m: &Vec<Vec<f64>>, cols: Option<usize>| {
            m.len() == n && m.iter().all(|row| cols.is_none_or(|c| row.len() == c))
        };
        let dim = r.vectors.first().map_or(0, Vec::len);
        if dim == 0
            || !rows_ok(&r.vectors, Some(dim))
            || !rows_ok(&r.implicit_causes, Some(dim))
            || !rows_ok(&r.weights, Some(n))
        {
            return Err(Error::Validation(format!(
                "sample {}: matrix shapes do not match {n} utterances",
                r.id
            )));
        }
        Ok(SyntheticSample {
            id: r.id,
            conversation,
            vectors: r.vectors,
            implicit_causes: r.implicit_causes,
            weights: r.weights,
            perturbed: r.perturbed,
        })
    }
}

impl From<SyntheticSample> for SampleRecord {
    fn from(s: SyntheticSample) -> Self {
        let utterances = s.conversation.utterances();
        SampleRecord {
            id: s.id,
            speakers: utterances.iter().map(|u| u.speaker.clone()).collect(),
            emotions: utterances.iter().map(|u| u.emotion.clone()).collect(),
            ecp: s.conversation.ecp().to_vec(),
            vectors: s.vectors,
            implicit_causes: s.implicit_causes,
            weights: s.weights,
            perturbed: s.perturbed,
        }
    }
}

impl SyntheticSample {
    pub fn len(&self) -> usize {
        self.conversation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversation.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// Emotion label per utterance (true = emotion utterance).
    pub fn labels(&self) -> Vec<bool> {
        self.conversation
            .utterances()
            .iter()
            .map(|u| u.is_emotional())
            .collect()
    }

    /// `(I − Aᵀ) · vectors`, which equals the implicit causes before perturbation.
    pub fn implied_causes(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut row = self.vectors[i].clone();
                for j in 0..n {
                    let w = self.weights[j][i];
                    if w != 0.0 {
                        for (r, v) in row.iter_mut().zip(&self.vectors[j]) {
                            *r -= w * v;
                        }
                    }
                }
                row
            })
            .collect()
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Generates one sample over `template` (perturbation per `config`).
pub fn generate_sample(
    template: &Conversation,
    config: &SyntheticConfig,
    seed: u64,
) -> Result<SyntheticSample> {
    config.validate()?;
    let n = template.len();
    let dim = config.dimension;
    let mut rng = rng_from(derive_seed(seed, STREAM_SAMPLE, 0));
    let normal = |mean: f64| Normal::new(mean, config.noise_std).expect("validated std");

    let implicit_causes: Vec<Vec<f64>> = (1..=n)
        .map(|i| {
            let mean = if template.is_emotional(i) {
                config.emotion_mean
            } else {
                config.non_emotion_mean
            };
            let dist = normal(mean);
            (0..dim).map(|_| dist.sample(&mut rng)).collect()
        })
        .collect();

    let mut weights = vec![vec![0.0; n]; n];
    let mut vectors = implicit_causes.clone();
    for i in 1..=n {
        for j in 1..i {
            let causal = template.ecp().contains(&(i, j));
            let range = if causal {
                config.causal_weight_range
            } else {
                config.non_causal_weight_range
            };
            let alpha = uniform_in(&mut rng, range);
            weights[j - 1][i - 1] = alpha;
            let (before, rest) = vectors.split_at_mut(i - 1);
            for (u, v) in rest[0].iter_mut().zip(&before[j - 1]) {
                *u += alpha * v;
            }
        }
    }

    let perturbed = config.perturbation.is_some();
    if let Some(range) = config.perturbation {
        let mut prng = derived_rng(seed, STREAM_PERTURB, 0);
        for row in &mut vectors {
            let xi = prng.random_range(range[0]..range[1]);
            row.iter_mut().for_each(|v| *v += xi);
        }
    }
    Ok(SyntheticSample {
        id: String::new(),
        conversation: template.clone(),
        vectors,
        implicit_causes,
        weights,
        perturbed,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &Vec<SyntheticSample>); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

/// Generates the train/val/test corpus. Provided templates are used first,
/// the synthesizer fills the rest.
pub fn generate_corpus(templates: &[Conversation], config: &SyntheticConfig) -> Result<Corpus> {
    config.validate()?;
    let sizes = config.split_sizes;
    let total = sizes.total();
    if templates.len() < total && config.synthesizer.is_none() {
        return Err(Error::Validation(format!(
            "{} templates for {total} samples and no template synthesizer configured",
            templates.len()
        )));
    }
    let mut all = Vec::with_capacity(total);
    for idx in 0..total {
        let template = match templates.get(idx) {
            Some(t) => t.clone(),
            None => config
                .synthesizer
                .expect("checked above")
                .synthesize(&mut derived_rng(config.seed, STREAM_TEMPLATE, idx as u64))?,
        };
        let mut sample = generate_sample(
            &template,
            config,
            derive_seed(config.seed, STREAM_SAMPLE, idx as u64),
        )?;
        let (split, local) = if idx < sizes.train {
            ("train", idx)
        } else if idx < sizes.train + sizes.val {
            ("val", idx - sizes.train)
        } else {
            ("test", idx - sizes.train - sizes.val)
        };
        sample.id = format!("{split}-{local:05}");
        all.push(sample);
    }
    let test = all.split_off(sizes.train + sizes.val);
    let val = all.split_off(sizes.train);
    Ok(Corpus {
        train: all,
        val,
        test,
    })
}

pub fn save_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

/// SHA-256 of the canonical JSON of a value, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: SyntheticConfig,
    pub config_hash: String,
    pub counts: SplitSizes,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`.
pub fn save_corpus(
    dir: &Path,
    corpus: &Corpus,
    config: &SyntheticConfig,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    for (name, samples) in corpus.splits() {
        save_jsonl(&dir.join(format!("{name}.jsonl")), samples)?;
    }
    let manifest = CorpusManifest {
        config: config.clone(),
        config_hash: config_hash(config)?,
        counts: SplitSizes {
            train: corpus.train.len(),
            val: corpus.val.len(),
            test: corpus.test.len(),
        },
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads the three split files from `dir`; missing splits are empty.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let load = |name: &str| -> Result<Vec<SyntheticSample>> {
        let path = dir.join(format!("{name}.jsonl"));
        if path.exists() {
            load_jsonl(&path)
        } else {
            Ok(Vec::new())
        }
    };
    let corpus = Corpus {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    };
    if corpus.train.is_empty() && corpus.val.is_empty() && corpus.test.is_empty() {
        return Err(Error::Validation(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    Ok(corpus)
}
