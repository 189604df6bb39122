//! Evaluation: lexicon-based intensity scoring, topic adherence, perplexity
//! under the unperturbed model, and knob sweeps written as CSV.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lexicon::{AffectBag, EmotionCategory, Lexicon, TopicBag};
use crate::loss::{ControlConfig, GradientScaling, LossWeights};
use crate::model::{continuation_perplexity, LanguageModel};
use crate::steer::{generate, GenerationRecord, SamplerSettings, SamplingMode};

pub const CSV_HEADER: [&str; 9] = [
    "emotion",
    "knob",
    "prompt_id",
    "n",
    "mean_ppl",
    "median_ppl",
    "lexicon_intensity",
    "topic_hit_rate",
    "flagged",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityScore {
    /// Mean intensity over matched words, 0 when nothing matched.
    pub score: f64,
    pub matched: usize,
}

/// Lowercased words with ASCII punctuation removed; purely numeric tokens
/// are dropped.
pub fn scoring_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty() && !w.chars().all(|c| c.is_numeric()))
}

/// Mean lexicon intensity of the words of `text` listed under `emotion`,
/// counting repeated words once per occurrence.
pub fn intensity_score(text: &str, emotion: EmotionCategory, lexicon: &Lexicon) -> IntensityScore {
    let (sum, matched) = scoring_words(text)
        .filter_map(|w| lexicon.intensity(&w, emotion))
        .fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    IntensityScore {
        score: if matched == 0 { 0.0 } else { sum / matched as f64 },
        matched,
    }
}

/// Fraction of records whose continuation contains at least one topic word.
pub fn topic_hit_rate(records: &[GenerationRecord], topic: &TopicBag) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("record list".into()));
    }
    let words: HashSet<String> = topic.source_words.iter().map(|w| w.to_lowercase()).collect();
    let hits = records
        .iter()
        .filter(|r| scoring_words(&r.text).any(|w| words.contains(&w)))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Knob-sweep experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub knobs: Vec<f64>,
    pub emotions: Vec<EmotionCategory>,
    pub prompts: Vec<String>,
    pub generations: usize,
    pub length: usize,
    pub seed: u64,
    pub variance: f64,
    pub step_size: f64,
    pub gd_iterations: usize,
    pub weights: LossWeights,
    pub topic: Option<String>,
    pub window: Option<usize>,
    pub gradient_scaling: GradientScaling,
    pub sampler: SamplerSettings,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let base = ControlConfig::default();
        Self {
            knobs: Vec::new(),
            emotions: Vec::new(),
            prompts: Vec::new(),
            generations: 10,
            length: 20,
            seed: 0,
            variance: base.variance,
            step_size: base.step_size,
            gd_iterations: base.gd_iterations,
            weights: base.weights,
            topic: None,
            window: None,
            gradient_scaling: base.gradient_scaling,
            sampler: SamplerSettings::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Parse {
        line,
        message: format!("{key}: {e}"),
    })
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

impl SweepSpec {
    /// Parses `key = value` lines. `#` starts a comment; `prompt` may repeat;
    /// lists are comma separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key != "prompt" && !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            match key {
                "knobs" => {
                    spec.knobs = parse_list(line, key, value)?;
                    if spec.knobs.iter().any(|k| !(0.0..=1.0).contains(k)) {
                        return Err(Error::Parse {
                            line,
                            message: "knob values must lie in [0, 1]".into(),
                        });
                    }
                    if spec.knobs.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Parse {
                            line,
                            message: "knob values must be strictly ascending".into(),
                        });
                    }
                }
                "emotions" => spec.emotions = parse_list(line, key, value)?,
                "prompt" => {
                    if value.is_empty() {
                        return Err(Error::Parse {
                            line,
                            message: "empty prompt".into(),
                        });
                    }
                    spec.prompts.push(value.to_string());
                }
                "generations" => spec.generations = parse_value(line, key, value)?,
                "length" => spec.length = parse_value(line, key, value)?,
                "seed" => spec.seed = parse_value(line, key, value)?,
                "variance" => spec.variance = parse_value(line, key, value)?,
                "step_size" => spec.step_size = parse_value(line, key, value)?,
                "gd_iterations" => spec.gd_iterations = parse_value(line, key, value)?,
                "kl_scale" => spec.weights.kl_scale = parse_value(line, key, value)?,
                "topic_scale" => spec.weights.topic_scale = parse_value(line, key, value)?,
                "affect_scale" => spec.weights.affect_scale = parse_value(line, key, value)?,
                "topic" => spec.topic = Some(value.to_string()),
                "window" => spec.window = Some(parse_value(line, key, value)?),
                "gradient_scaling" => {
                    spec.gradient_scaling = match value {
                        "raw" => GradientScaling::Raw,
                        "per_tensor_norm" => GradientScaling::PerTensorNorm,
                        other => {
                            return Err(Error::Parse {
                                line,
                                message: format!("gradient_scaling must be raw or per_tensor_norm, got {other:?}"),
                            })
                        }
                    }
                }
                "top_k" => spec.sampler.k = parse_value(line, key, value)?,
                "temperature" => spec.sampler.temperature = parse_value(line, key, value)?,
                "sampling" => {
                    spec.sampler.mode = match value {
                        "greedy" => SamplingMode::Greedy,
                        "top_k" => SamplingMode::TopK,
                        other => {
                            return Err(Error::Parse {
                                line,
                                message: format!("sampling must be greedy or top_k, got {other:?}"),
                            })
                        }
                    }
                }
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knobs.is_empty() {
            return Err(Error::config("knobs", "at least one knob value is required"));
        }
        if self.knobs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("knobs", "values must be strictly ascending"));
        }
        if self.emotions.is_empty() {
            return Err(Error::config("emotions", "at least one emotion is required"));
        }
        if self.prompts.is_empty() {
            return Err(Error::config("prompt", "at least one prompt is required"));
        }
        if self.generations == 0 {
            return Err(Error::config("generations", "must be at least 1"));
        }
        if self.length == 0 {
            return Err(Error::config("length", "must be at least 1"));
        }
        self.sampler.validate()?;
        self.control(None, 0.0, None).validate()
    }

    /// Number of CSV rows a sweep produces.
    pub fn cell_count(&self) -> usize {
        self.emotions.len() * self.knobs.len() * self.prompts.len()
    }

    fn control(&self, affect: Option<Arc<AffectBag>>, knob: f64, topic: Option<Arc<TopicBag>>) -> ControlConfig {
        ControlConfig {
            affect,
            knob,
            variance: self.variance,
            topic,
            step_size: self.step_size,
            gd_iterations: self.gd_iterations,
            weights: self.weights,
            window: self.window,
            gradient_scaling: self.gradient_scaling,
            ..Default::default()
        }
    }
}

/// Aggregates of one (emotion, knob, prompt) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub emotion: EmotionCategory,
    /// `None` for cells generated with steering disabled.
    pub knob: Option<f64>,
    pub prompt_id: usize,
    /// Generations that completed.
    pub n: usize,
    pub mean_ppl: f64,
    pub median_ppl: f64,
    /// Mean intensity score over generations with at least one lexicon match.
    pub lexicon_intensity: f64,
    /// Generations with at least one lexicon match.
    pub matched_generations: usize,
    /// Only present when the sweep has a topic.
    pub topic_hit_rate: Option<f64>,
    /// Every generation of the cell failed.
    pub flagged: bool,
    /// Per-generation continuation perplexity, in generation order.
    pub perplexities: Vec<f64>,
    /// Per-generation intensity scores of the matched generations.
    pub intensities: Vec<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Sampler seed of generation `g` for an (emotion, prompt) pair. Knob values
/// share seeds so cells along the grid are paired.
pub fn generation_seed(master: u64, emotion: EmotionCategory, prompt_id: usize, g: usize) -> u64 {
    let e = EmotionCategory::ALL.iter().position(|&x| x == emotion).unwrap_or(0) as u64;
    splitmix(splitmix(splitmix(master ^ e.wrapping_mul(0x1000_0001)) ^ prompt_id as u64) ^ g as u64)
}

struct Cell {
    emotion: EmotionCategory,
    knob: Option<f64>,
    prompt_id: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every cell of `spec` with steering toward each emotion at each knob.
/// Cells run in parallel; results are in emotion, knob, prompt order.
pub fn run_sweep<M: LanguageModel + ?Sized>(model: &M, spec: &SweepSpec, lexicon: &Lexicon) -> Result<Vec<CellResult>> {
    let cells: Vec<Cell> = spec
        .emotions
        .iter()
        .flat_map(|&emotion| {
            spec.knobs.iter().flat_map(move |&knob| {
                (0..spec.prompts.len()).map(move |prompt_id| Cell {
                    emotion,
                    knob: Some(knob),
                    prompt_id,
                })
            })
        })
        .collect();
    run_cells(model, spec, lexicon, cells)
}

/// Cells with steering disabled, one per (emotion, prompt), using the same
/// seeds as [`run_sweep`]; intensity is scored against each emotion.
pub fn run_baseline<M: LanguageModel + ?Sized>(
    model: &M,
    spec: &SweepSpec,
    lexicon: &Lexicon,
) -> Result<Vec<CellResult>> {
    let cells = spec
        .emotions
        .iter()
        .flat_map(|&emotion| {
            (0..spec.prompts.len()).map(move |prompt_id| Cell {
                emotion,
                knob: None,
                prompt_id,
            })
        })
        .collect();
    run_cells(model, spec, lexicon, cells)
}

fn run_cells<M: LanguageModel + ?Sized>(
    model: &M,
    spec: &SweepSpec,
    lexicon: &Lexicon,
    cells: Vec<Cell>,
) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let vocab = model.vocabulary();
    let topic = match &spec.topic {
        Some(t) => Some(Arc::new(TopicBag::load(t, vocab)?)),
        None => None,
    };
    let mut bags = Vec::new();
    for &e in &spec.emotions {
        bags.push((e, Arc::new(AffectBag::build(lexicon, e, vocab)?)));
    }
    let bag_for = |e: EmotionCategory| bags.iter().find(|(x, _)| *x == e).map(|(_, b)| b.clone());

    cells
        .par_iter()
        .map(|cell| {
            let config = match cell.knob {
                Some(k) => spec.control(bag_for(cell.emotion), k, topic.clone()),
                None => spec.control(None, 0.0, None),
            };
            let prompt = &spec.prompts[cell.prompt_id];
            let prompt_tokens = vocab.encode(prompt);
            let mut records = Vec::with_capacity(spec.generations);
            let mut ppls = Vec::with_capacity(spec.generations);
            let mut intensities = Vec::new();
            for g in 0..spec.generations {
                let sampler = SamplerSettings {
                    seed: generation_seed(spec.seed, cell.emotion, cell.prompt_id, g),
                    ..spec.sampler
                };
                // A failed generation is excluded from the cell's counts.
                let Ok(record) = generate(model, prompt, spec.length, &config, sampler) else {
                    continue;
                };
                let Ok(ppl) = continuation_perplexity(model, &prompt_tokens, &record.tokens) else {
                    continue;
                };
                ppls.push(ppl);
                let s = intensity_score(&record.text, cell.emotion, lexicon);
                if s.matched > 0 {
                    intensities.push(s.score);
                }
                records.push(record);
            }
            let topic_hit_rate = match (&topic, records.is_empty()) {
                (Some(t), false) => Some(topic_hit_rate(&records, t)?),
                _ => None,
            };
            Ok(CellResult {
                emotion: cell.emotion,
                knob: cell.knob,
                prompt_id: cell.prompt_id,
                n: records.len(),
                mean_ppl: mean(&ppls),
                median_ppl: median(&ppls),
                lexicon_intensity: if intensities.is_empty() {
                    0.0
                } else {
                    mean(&intensities)
                },
                matched_generations: intensities.len(),
                topic_hit_rate,
                flagged: records.is_empty(),
                perplexities: ppls,
                intensities,
            })
        })
        .collect()
}

fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

/// Writes one CSV row per cell under [`CSV_HEADER`].
pub fn write_csv<W: Write>(cells: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.emotion.name().to_string(),
            c.knob.map_or_else(|| "off".to_string(), |k| format!("{k}")),
            c.prompt_id.to_string(),
            c.n.to_string(),
            fmt_f64(c.mean_ppl),
            fmt_f64(c.median_ppl),
            fmt_f64(c.lexicon_intensity),
            c.topic_hit_rate.map_or_else(String::new, fmt_f64),
            c.flagged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

pub fn write_csv_file(cells: &[CellResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(cells, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::LexiconEntry;
    use crate::model::tests_support::tiny_model;
    use proptest::prelude::*;

    fn glee() -> Lexicon {
        Lexicon::from_entries([LexiconEntry {
            word: "glee".into(),
            emotion: EmotionCategory::Joy,
            intensity: 0.9,
        }])
        .unwrap()
    }

    #[test]
    fn intensity_examples() {
        let lex = glee();
        let s = intensity_score("pure glee today", EmotionCategory::Joy, &lex);
        assert_eq!((s.score, s.matched), (0.9, 1));
        let s = intensity_score("nothing here 42", EmotionCategory::Joy, &lex);
        assert_eq!((s.score, s.matched), (0.0, 0));
        let s = intensity_score("glee glee dread", EmotionCategory::Joy, &lex);
        assert!((s.score - 0.9).abs() < 1e-12);
        assert_eq!(s.matched, 2);
        let s = intensity_score("Glee! GLEE.", EmotionCategory::Joy, &lex);
        assert_eq!(s.matched, 2);
        assert_eq!(intensity_score("glee", EmotionCategory::Fear, &lex).matched, 0);
    }

    fn record_with_text(text: &str) -> GenerationRecord {
        let m = tiny_model(1);
        let mut r = generate(&m, "w1", 1, &ControlConfig::default(), SamplerSettings::greedy()).unwrap();
        r.text = text.into();
        r
    }

    #[test]
    fn topic_hit_rate_counts_records() {
        let topic = TopicBag {
            topic_name: "space".into(),
            token_ids: vec![0],
            source_words: vec!["orbit".into()],
        };
        let recs: Vec<_> = ["an orbit", "the orbit .", "nothing", "orbit"]
            .iter()
            .map(|t| record_with_text(t))
            .collect();
        assert_eq!(topic_hit_rate(&recs, &topic).unwrap(), 0.75);
        assert_eq!(topic_hit_rate(&recs[..2], &topic).unwrap(), 1.0);
        assert_eq!(topic_hit_rate(&recs[2..3], &topic).unwrap(), 0.0);
        assert!(topic_hit_rate(&[], &topic).is_err());
    }

    const SPEC: &str = "# demo\nknobs = 0.2, 0.6\nemotions = joy, fear\nprompt = w1 w2\nprompt = w3\n\
                        generations = 3\nlength = 4\nseed = 5\nsampling = top_k\ntop_k = 3\n";

    #[test]
    fn spec_parsing_and_errors() {
        let spec = SweepSpec::parse(SPEC).unwrap();
        assert_eq!(spec.knobs, vec![0.2, 0.6]);
        assert_eq!(spec.prompts.len(), 2);
        assert_eq!(spec.cell_count(), 8);
        assert_eq!(spec.sampler.k, 3);

        let bad = SPEC.replace("generations = 3", "generations = lots");
        assert!(matches!(SweepSpec::parse(&bad), Err(Error::Parse { line: 6, .. })));
        let bad = SPEC.replace("knobs = 0.2, 0.6", "knobs = 0.6, 0.2");
        assert!(matches!(SweepSpec::parse(&bad), Err(Error::Parse { line: 2, .. })));
        let bad = SPEC.replace("emotions = joy, fear", "emotions = joy, hope");
        let err = SweepSpec::parse(&bad).unwrap_err().to_string();
        assert!(err.starts_with("line 3") && err.contains("surprise"), "{err}");
        assert!(matches!(
            SweepSpec::parse("bogus line"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            SweepSpec::parse("knobs = 0.5\ncolour = red"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(SweepSpec::parse("knobs = 0.5").is_err());
    }

    #[test]
    fn sweep_rows_and_reproducibility() {
        let m = tiny_model(2);
        let lex = Lexicon::parse_tsv("w1\tjoy\t0.8\nw4\tjoy\t0.3\nw2\tfear\t0.6\nw5\tfear\t0.1\n").unwrap();
        let spec = SweepSpec::parse(SPEC).unwrap();
        let cells = run_sweep(&m, &spec, &lex).unwrap();
        assert_eq!(cells.len(), spec.cell_count());
        assert!(cells.iter().all(|c| c.n == 3 && !c.flagged));
        let mut a = Vec::new();
        write_csv(&cells, &mut a).unwrap();
        let mut b = Vec::new();
        write_csv(&run_sweep(&m, &spec, &lex).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 1 + spec.cell_count());
        assert!(text.starts_with(&CSV_HEADER.join(",")));

        let base = run_baseline(&m, &spec, &lex).unwrap();
        assert_eq!(base.len(), 4);
        assert!(base.iter().all(|c| c.knob.is_none()));
    }

    #[test]
    fn zero_affect_scale_matches_baseline_exactly() {
        let m = tiny_model(2);
        let lex = Lexicon::parse_tsv("w1\tjoy\t0.8\nw4\tjoy\t0.3\nw6\tjoy\t0.5\n").unwrap();
        let mut spec = SweepSpec::parse(SPEC).unwrap();
        spec.knobs = vec![0.0];
        spec.emotions = vec![EmotionCategory::Joy];
        spec.weights.affect_scale = 0.0;
        let steered = run_sweep(&m, &spec, &lex).unwrap();
        let base = run_baseline(&m, &spec, &lex).unwrap();
        for (s, b) in steered.iter().zip(&base) {
            assert_eq!(s.lexicon_intensity, b.lexicon_intensity);
            assert_eq!(s.mean_ppl, b.mean_ppl);
        }
    }

    proptest! {
        #[test]
        fn intensity_is_order_invariant(words in proptest::collection::vec(0usize..4, 0..12), seed in any::<u64>()) {
            let vocab = ["glee", "dread", "calm", "glee!"];
            let lex = glee();
            let text: Vec<&str> = words.iter().map(|&i| vocab[i]).collect();
            let mut shuffled = text.clone();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let a = intensity_score(&text.join(" "), EmotionCategory::Joy, &lex);
            let b = intensity_score(&shuffled.join(" "), EmotionCategory::Joy, &lex);
            prop_assert_eq!(a.matched, b.matched);
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }
    }
}
