//! Synthetic gesture-to-text corpus: a seeded grammar, noisy per-channel cue
//! frames, and the TSV plus binary sidecar on-disk format.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{read_file, write_atomic};
use super::HarnessError;

pub const SIDECAR_MAGIC: &[u8; 4] = b"RVLF";
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub gestures: usize,
    pub words: usize,
    pub rules: usize,
    pub reorder_prob: f64,
    pub many_to_one: f64,
    /// Gesture pairs whose skeleton frames are identical; each pair is told
    /// apart only by its face or hand channel.
    pub ambiguous_pairs: usize,
    pub noise_skeleton: f64,
    pub noise_face: f64,
    pub noise_hand: f64,
    pub miss_rate: f64,
    pub frames_per_gesture: usize,
    pub feature_dim: usize,
    pub min_gestures: usize,
    pub max_gestures: usize,
    pub max_frames: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            gestures: 24,
            words: 40,
            rules: 8,
            reorder_prob: 0.5,
            many_to_one: 0.25,
            ambiguous_pairs: 6,
            noise_skeleton: 0.3,
            noise_face: 0.3,
            noise_hand: 0.3,
            miss_rate: 0.05,
            frames_per_gesture: 2,
            feature_dim: 8,
            min_gestures: 2,
            max_gestures: 5,
            max_frames: 300,
            train: 600,
            dev: 64,
            test: 64,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return bad("split sizes must be >= 1".into());
        }
        for (name, p) in [("reorder_prob", self.reorder_prob), ("many_to_one", self.many_to_one), ("miss_rate", self.miss_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.gestures < 2 || self.words < 1 || self.feature_dim < 1 || self.frames_per_gesture < 1 {
            return bad("gestures >= 2, words, feature_dim and frames_per_gesture >= 1 required".into());
        }
        if self.rules > self.gestures * self.gestures {
            return bad(format!("{} rules exceed the {} available gesture pairs", self.rules, self.gestures * self.gestures));
        }
        if 2 * self.ambiguous_pairs > self.gestures {
            return bad(format!("{} ambiguous pairs need more than {} gestures", self.ambiguous_pairs, self.gestures));
        }
        if self.min_gestures == 0 || self.min_gestures > self.max_gestures {
            return bad("need 1 <= min_gestures <= max_gestures".into());
        }
        if [self.noise_skeleton, self.noise_face, self.noise_hand].iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise std must be finite and >= 0".into());
        }
        if self.max_frames < self.frames_per_gesture {
            return bad("max_frames shorter than one gesture".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleKind {
    /// The pair is rendered by one phrase of its own.
    Collapse { phrase: usize },
    /// The pair is rendered second-then-first.
    Reorder,
    /// Listed but no-op.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub first: usize,
    pub second: usize,
    #[serde(flatten)]
    pub kind: RuleKind,
}

/// Gesture lexicon and bigram rules. Phrases index into `phrases`; phrase
/// `g` renders gesture `g`, the rest belong to collapse rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub words: Vec<String>,
    pub phrases: Vec<Vec<usize>>,
    pub rules: Vec<Rule>,
    /// `(a, b, channel)`: gesture `b` copies `a`'s skeleton; `channel` tells them apart.
    pub ambiguous: Vec<(usize, usize, String)>,
}

impl Grammar {
    fn rule(&self, a: usize, b: usize) -> Option<&Rule> {
        self.rules.iter().find(|r| r.first == a && r.second == b)
    }

    /// Left-to-right rewrite of a gesture stream into words.
    pub fn apply(&self, gestures: &[usize]) -> Vec<String> {
        let mut out: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < gestures.len() {
            let g = gestures[i];
            let next = gestures.get(i + 1).copied();
            match next.and_then(|b| self.rule(g, b)).map(|r| r.kind) {
                Some(RuleKind::Collapse { phrase }) => {
                    out.extend(&self.phrases[phrase]);
                    i += 2;
                }
                Some(RuleKind::Reorder) => {
                    out.extend(&self.phrases[next.unwrap_or(g)]);
                    out.extend(&self.phrases[g]);
                    i += 2;
                }
                _ => {
                    out.extend(&self.phrases[g]);
                    i += 1;
                }
            }
        }
        out.into_iter().map(|w| self.words[w].clone()).collect()
    }

    /// Words that appear in at least one phrase, in id order.
    pub fn used_words(&self) -> Vec<String> {
        let used: BTreeSet<usize> = self.phrases.iter().flatten().copied().collect();
        used.into_iter().map(|w| self.words[w].clone()).collect()
    }
}

/// Per-channel cue frames with detection flags for face and hand.
#[derive(Debug, Clone, PartialEq)]
pub struct CueFrames {
    pub frames: usize,
    pub dim: usize,
    /// Skeleton, face, hand; each `frames * dim` row-major.
    pub channels: [Vec<f32>; 3],
    /// Face and hand detection flags.
    pub detected: [Vec<bool>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub gestures: Vec<usize>,
    pub reference: String,
    pub cues: CueFrames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub grammar: Grammar,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Example], HarnessError> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(HarnessError::Missing(format!("split `{name}`"))),
        }
    }
}

struct Prototypes {
    /// `[channel][gesture][frame]` feature vectors.
    protos: [Vec<Vec<Vec<f64>>>; 3],
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..d).map(|_| n.sample(rng)).collect()
}

fn build_grammar(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Grammar {
    let words: Vec<String> = (0..spec.words).map(|i| format!("w{i:02}")).collect();
    let mut pool: Vec<usize> = (0..spec.words).collect();
    pool.shuffle(rng);
    let mut next_word = 0usize;
    let mut phrase = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=2);
        (0..len)
            .map(|_| {
                let w = pool[next_word % pool.len()];
                next_word += 1;
                w
            })
            .collect()
    };
    let mut phrases: Vec<Vec<usize>> = (0..spec.gestures).map(|_| phrase(rng)).collect();

    let mut pairs: Vec<(usize, usize)> =
        (0..spec.gestures).flat_map(|a| (0..spec.gestures).map(move |b| (a, b))).collect();
    pairs.shuffle(rng);
    let mut rules = Vec::with_capacity(spec.rules);
    for &(first, second) in pairs.iter().take(spec.rules) {
        let kind = if rng.gen::<f64>() < spec.many_to_one {
            phrases.push(phrase(rng));
            RuleKind::Collapse { phrase: phrases.len() - 1 }
        } else if rng.gen::<f64>() < spec.reorder_prob {
            RuleKind::Reorder
        } else {
            RuleKind::Identity
        };
        rules.push(Rule { first, second, kind });
    }

    let mut order: Vec<usize> = (0..spec.gestures).collect();
    order.shuffle(rng);
    let ambiguous = (0..spec.ambiguous_pairs)
        .map(|k| {
            let ch = if k % 2 == 0 { "face" } else { "hand" };
            (order[2 * k], order[2 * k + 1], ch.to_string())
        })
        .collect();
    Grammar { words, phrases, rules, ambiguous }
}

fn build_prototypes(spec: &CorpusSpec, grammar: &Grammar, rng: &mut ChaCha8Rng) -> Prototypes {
    let (g, f, d) = (spec.gestures, spec.frames_per_gesture, spec.feature_dim);
    let mut protos: [Vec<Vec<Vec<f64>>>; 3] = Default::default();
    for ch in &mut protos {
        *ch = (0..g).map(|_| (0..f).map(|_| random_vec(rng, d)).collect()).collect();
    }
    for (a, b, channel) in &grammar.ambiguous {
        protos[0][*b] = protos[0][*a].clone();
        // the pair shares everything except the deciding channel
        let (same, differ) = if channel == "face" { (2, 1) } else { (1, 2) };
        protos[same][*b] = protos[same][*a].clone();
        protos[differ][*b] = protos[differ][*a].iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    }
    Prototypes { protos }
}

fn render(spec: &CorpusSpec, protos: &Prototypes, gestures: &[usize], rng: &mut ChaCha8Rng) -> CueFrames {
    let (f, d) = (spec.frames_per_gesture, spec.feature_dim);
    let frames = (gestures.len() * f).min(spec.max_frames);
    let noise = [spec.noise_skeleton, spec.noise_face, spec.noise_hand];
    let mut channels: [Vec<f32>; 3] = Default::default();
    for (c, out) in channels.iter_mut().enumerate() {
        let n = Normal::new(0.0, noise[c].max(0.0)).expect("valid noise");
        out.reserve(frames * d);
        for t in 0..frames {
            let proto = &protos.protos[c][gestures[t / f]][t % f];
            out.extend(proto.iter().map(|&x| (x + if noise[c] > 0.0 { n.sample(rng) } else { 0.0 }) as f32));
        }
    }
    let mut detected: [Vec<bool>; 2] = Default::default();
    for (k, flags) in detected.iter_mut().enumerate() {
        *flags = (0..frames).map(|_| rng.gen::<f64>() >= spec.miss_rate).collect();
        if !flags.iter().any(|&x| x) {
            flags[0] = true;
        }
        // a missed detection leaves a blank frame behind
        for (t, &ok) in flags.iter().enumerate() {
            if !ok {
                channels[k + 1][t * d..(t + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    CueFrames { frames, dim: d, channels, detected }
}

/// Seed-deterministic corpus. Gesture streams are drawn uniformly; streams
/// whose reference text repeats an earlier example are redrawn, so no two
/// examples across all splits share a reference.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grammar = build_grammar(spec, &mut rng);
    let protos = build_prototypes(spec, &grammar, &mut rng);
    let mut seen = BTreeSet::new();
    let mut make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>, HarnessError> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * (n + 10) {
                return Err(HarnessError::Config("gesture space too small for the requested split sizes".into()));
            }
            let len = rng.gen_range(spec.min_gestures..=spec.max_gestures);
            let gestures: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.gestures)).collect();
            let reference = grammar.apply(&gestures).join(" ");
            if !seen.insert(reference.clone()) {
                continue;
            }
            let cues = render(spec, &protos, &gestures, rng);
            out.push(Example { id: format!("{prefix}-{:05}", out.len()), gestures, reference, cues });
        }
        Ok(out)
    };
    let train = make("train", spec.train, &mut rng)?;
    let dev = make("dev", spec.dev, &mut rng)?;
    let test = make("test", spec.test, &mut rng)?;
    Ok(Corpus { grammar, train, dev, test })
}

pub fn to_tsv(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        let g: Vec<String> = e.gestures.iter().map(|g| format!("g{g:02}")).collect();
        s.push_str(&format!("{}\t{}\t{}\n", e.id, g.join(" "), e.reference));
    }
    s
}

pub fn to_sidecar(examples: &[Example]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(SIDECAR_MAGIC);
    b.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    b.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for e in examples {
        b.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        b.extend_from_slice(e.id.as_bytes());
        b.extend_from_slice(&(e.cues.frames as u32).to_le_bytes());
        b.extend_from_slice(&(e.cues.dim as u32).to_le_bytes());
        for ch in &e.cues.channels {
            for v in ch {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        for flags in &e.cues.detected {
            b.extend(flags.iter().map(|&f| f as u8));
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HarnessError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn parse_tsv(text: &str) -> Result<Vec<(String, Vec<usize>, String)>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 || parts[2].trim().is_empty() {
                return Err(HarnessError::Format(format!("tsv line {}: expected id, gestures, reference", i + 1)));
            }
            let gestures = parts[1]
                .split_whitespace()
                .map(|g| g.trim_start_matches('g').parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Format(format!("tsv line {}: {e}", i + 1)))?;
            Ok((parts[0].to_string(), gestures, parts[2].to_string()))
        })
        .collect()
}

fn parse_sidecar(bytes: &[u8]) -> Result<Vec<(String, CueFrames)>, HarnessError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != SIDECAR_MAGIC {
        return Err(HarnessError::Format("bad sidecar magic".into()));
    }
    let version = r.u32()?;
    if version != SIDECAR_VERSION {
        return Err(HarnessError::Format(format!("unsupported sidecar version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let id = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| HarnessError::Format(e.to_string()))?;
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut channels: [Vec<f32>; 3] = Default::default();
        for ch in &mut channels {
            *ch = r
                .take(4 * frames * dim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
        }
        let mut detected: [Vec<bool>; 2] = Default::default();
        for flags in &mut detected {
            *flags = r.take(frames)?.iter().map(|&b| b != 0).collect();
        }
        out.push((id, CueFrames { frames, dim, channels, detected }));
    }
    if r.pos != bytes.len() {
        return Err(HarnessError::Format("trailing bytes in sidecar".into()));
    }
    Ok(out)
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        write_atomic(&dir.join(format!("{name}.tsv")), to_tsv(split).as_bytes())?;
        write_atomic(&dir.join(format!("{name}.feat")), &to_sidecar(split))?;
    }
    let grammar = serde_json::to_string_pretty(&corpus.grammar).expect("grammar serializes");
    write_atomic(&dir.join("grammar.json"), grammar.as_bytes())
}

pub fn read_split(dir: &Path, name: &str) -> Result<Vec<Example>, HarnessError> {
    let tsv = dir.join(format!("{name}.tsv"));
    if !tsv.exists() {
        return Err(HarnessError::Missing(format!("split `{name}` in {}", dir.display())));
    }
    let rows = parse_tsv(&String::from_utf8(read_file(&tsv)?).map_err(|e| HarnessError::Format(e.to_string()))?)?;
    let cues = parse_sidecar(&read_file(&dir.join(format!("{name}.feat")))?)?;
    if rows.len() != cues.len() {
        return Err(HarnessError::Format(format!("{name}: {} tsv rows vs {} feature records", rows.len(), cues.len())));
    }
    rows.into_iter()
        .zip(cues)
        .map(|((id, gestures, reference), (cid, cues))| {
            if id != cid {
                return Err(HarnessError::Format(format!("{name}: id `{id}` vs feature id `{cid}`")));
            }
            Ok(Example { id, gestures, reference, cues })
        })
        .collect()
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, HarnessError> {
    let g = read_file(&dir.join("grammar.json"))?;
    let grammar: Grammar = serde_json::from_slice(&g).map_err(|e| HarnessError::Format(format!("grammar.json: {e}")))?;
    Ok(Corpus {
        grammar,
        train: read_split(dir, "train")?,
        dev: read_split(dir, "dev")?,
        test: read_split(dir, "test")?,
    })
}
