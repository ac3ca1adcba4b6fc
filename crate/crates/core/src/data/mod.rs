//! Synthetic corpora: a Markov token grammar, a prototype "vocoder" that
//! renders tokens as feature frames, split generation and file formats.

mod augment;
mod io;

pub use augment::{augment, MaskFill};
pub use io::{decode_features, encode_features, read_features, read_token_file, write_features, write_token_file, HEADER_LEN};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FeatureSeq, TokenSeq};
use crate::seed::{derive_seed, rng_for};

/// First id available for content tokens (0 and 1 are EOS and SOS).
pub const FIRST_CONTENT: usize = 2;

/// Acoustic condition: per-token prototypes plus duration and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub pattern_table: Vec<Vec<f64>>,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Scale of a per-utterance constant offset added to every frame.
    #[serde(default)]
    pub offset_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Draws a `vocab × dim` prototype table with standard normal entries.
    pub fn random(vocab: usize, dim: usize, frames_per_token: usize, noise_sigma: f64, offset_sigma: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, "pattern_table");
        let pattern_table = (0..vocab)
            .map(|_| (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
            .collect();
        DomainSpec {
            pattern_table,
            frames_per_token,
            noise_sigma,
            offset_sigma,
            seed,
        }
    }

    pub fn vocab(&self) -> usize {
        self.pattern_table.len()
    }

    pub fn dim(&self) -> usize {
        self.pattern_table.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 || self.pattern_table.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("pattern_table rows must share a nonzero width".into()));
        }
        if self.frames_per_token == 0 {
            return Err(Error::Config("frames_per_token must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.offset_sigma >= 0.0) {
            return Err(Error::Config("noise scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Renders `y` as `|y|·frames_per_token` frames of prototype plus noise.
pub fn synth_features(y: &TokenSeq, d: &DomainSpec, utt_seed: u64) -> Result<FeatureSeq> {
    d.validate()?;
    y.validate(d.vocab())?;
    if y.is_empty() {
        return Err(Error::contract("cannot render an empty token sequence"));
    }
    let dim = d.dim();
    let mut rng = rng_for(d.seed, &format!("utterance.{utt_seed}"));
    let offset: Vec<f64> = if d.offset_sigma > 0.0 {
        let n = Normal::new(0.0, d.offset_sigma).expect("validated scale");
        (0..dim).map(|_| n.sample(&mut rng)).collect()
    } else {
        vec![0.0; dim]
    };
    let noise = (d.noise_sigma > 0.0).then(|| Normal::new(0.0, d.noise_sigma).expect("validated scale"));
    let mut data = Vec::with_capacity(y.len() * d.frames_per_token * dim);
    for &k in y.tokens() {
        for _ in 0..d.frames_per_token {
            for (c, &p) in d.pattern_table[k].iter().enumerate() {
                let e = noise.map_or(0.0, |n| n.sample(&mut rng));
                data.push(p + offset[c] + e);
            }
        }
    }
    FeatureSeq::new(y.len() * d.frames_per_token, dim, data)
}

/// First-order Markov chain over content tokens. Each state favours a few
/// successors so that a language model can beat the uniform rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGrammar {
    pub vocab: usize,
    /// Row 0 is the start state; row `i` follows content token `i + 1`.
    pub transitions: Vec<Vec<f64>>,
}

impl TokenGrammar {
    pub fn random(vocab: usize, favoured: usize, favoured_mass: f64, seed: u64) -> Result<Self> {
        if vocab <= FIRST_CONTENT {
            return Err(Error::Config(format!("vocab {vocab} leaves no content tokens")));
        }
        let c = vocab - FIRST_CONTENT;
        let favoured = favoured.clamp(1, c);
        let mut rng = rng_for(seed, "grammar");
        let transitions = (0..=c)
            .map(|_| {
                let mut row = vec![(1.0 - favoured_mass) / c as f64; c];
                let picks = rand::seq::index::sample(&mut rng, c, favoured);
                for j in picks.iter() {
                    row[j] += favoured_mass / favoured as f64;
                }
                row
            })
            .collect();
        Ok(TokenGrammar { vocab, transitions })
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> TokenSeq {
        let mut state = 0;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.gen();
            let row = &self.transitions[state];
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            out.push(pick + FIRST_CONTENT);
            state = pick + 1;
        }
        TokenSeq::from_ids(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainChoice {
    #[default]
    InDomain,
    OutOfDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub paired: usize,
    pub speech_only: usize,
    pub text_only: usize,
    pub dev: usize,
    pub paired_ood: usize,
    pub dev_ood: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            paired: 200,
            speech_only: 2000,
            text_only: 2000,
            dev: 200,
            paired_ood: 200,
            dev_ood: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub vocab: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub ood_frames_per_token: usize,
    pub noise_sigma: f64,
    pub offset_sigma: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub favoured_successors: usize,
    pub favoured_mass: f64,
    pub splits: SplitSizes,
    pub speech_only_domain: DomainChoice,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            vocab: 12,
            feature_dim: 8,
            frames_per_token: 4,
            ood_frames_per_token: 5,
            noise_sigma: 0.1,
            offset_sigma: 0.5,
            min_len: 3,
            max_len: 8,
            favoured_successors: 3,
            favoured_mass: 0.8,
            splits: SplitSizes::default(),
            speech_only_domain: DomainChoice::InDomain,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT {
            return Err(Error::Config("vocab must exceed 2".into()));
        }
        if self.feature_dim == 0 || self.frames_per_token == 0 || self.ood_frames_per_token == 0 {
            return Err(Error::Config("feature_dim and frame counts must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.favoured_mass) {
            return Err(Error::Config("favoured_mass must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn in_domain(&self) -> DomainSpec {
        DomainSpec::random(
            self.vocab,
            self.feature_dim,
            self.frames_per_token,
            self.noise_sigma,
            self.offset_sigma,
            derive_seed(self.seed, "domain.in"),
        )
    }

    pub fn out_of_domain(&self) -> DomainSpec {
        DomainSpec::random(
            self.vocab,
            self.feature_dim,
            self.ood_frames_per_token,
            self.noise_sigma,
            self.offset_sigma,
            derive_seed(self.seed, "domain.ood"),
        )
    }

    pub fn grammar(&self) -> Result<TokenGrammar> {
        TokenGrammar::random(
            self.vocab,
            self.favoured_successors,
            self.favoured_mass,
            derive_seed(self.seed, "grammar"),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenSeq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub splits: BTreeMap<String, Vec<Record>>,
    pub domains: BTreeMap<String, DomainSpec>,
    /// Token id files per split, relative to the manifest directory.
    #[serde(default)]
    pub token_files: BTreeMap<String, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for rec in self.splits.values().flatten() {
            if !seen.insert(rec.utt_id.as_str()) {
                return Err(Error::Config(format!("duplicate utt_id {}", rec.utt_id)));
            }
            if let Some(t) = &rec.tokens {
                t.validate(self.vocab_size)?;
            }
        }
        Ok(())
    }
}

fn render_split(
    name: &str,
    count: usize,
    cfg: &GenConfig,
    grammar: &TokenGrammar,
    domain: Option<(&str, &DomainSpec)>,
    keep_tokens: bool,
    out_dir: &Path,
) -> Result<Vec<Record>> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let utt_id = format!("{name}-{i:05}");
        let mut rng = rng_for(cfg.seed, &format!("tokens.{utt_id}"));
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let y = grammar.sample(len, &mut rng);
        let feature_path = match domain {
            Some((_, d)) => {
                let x = synth_features(&y, d, derive_seed(cfg.seed, &utt_id))?;
                let rel = format!("feats/{utt_id}.eatf");
                write_features(&out_dir.join(&rel), &x)?;
                Some(rel)
            }
            None => None,
        };
        records.push(Record {
            utt_id,
            tokens: keep_tokens.then_some(y),
            feature_path,
            domain: domain.map(|(n, _)| n.to_string()),
        });
    }
    Ok(records)
}

/// Writes feature files, token files and `manifest.json` under `out_dir`.
pub fn gen_corpus(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let grammar = cfg.grammar()?;
    let ind = cfg.in_domain();
    let ood = cfg.out_of_domain();
    let so_domain = match cfg.speech_only_domain {
        DomainChoice::InDomain => ("in", &ind),
        DomainChoice::OutOfDomain => ("ood", &ood),
    };
    let s = &cfg.splits;
    let plan: [(&str, usize, Option<(&str, &DomainSpec)>, bool); 6] = [
        ("paired", s.paired, Some(("in", &ind)), true),
        ("speech_only", s.speech_only, Some(so_domain), false),
        ("text_only", s.text_only, None, true),
        ("dev", s.dev, Some(("in", &ind)), true),
        ("paired_ood", s.paired_ood, Some(("ood", &ood)), true),
        ("dev_ood", s.dev_ood, Some(("ood", &ood)), true),
    ];
    let mut splits = BTreeMap::new();
    let mut token_files = BTreeMap::new();
    for (name, count, domain, keep) in plan {
        let recs = render_split(name, count, cfg, &grammar, domain, keep, out_dir)?;
        if keep {
            let rel = format!("{name}.txt");
            let seqs: Vec<&TokenSeq> = recs.iter().filter_map(|r| r.tokens.as_ref()).collect();
            write_token_file(&out_dir.join(&rel), &seqs)?;
            token_files.insert(name.to_string(), rel);
        }
        splits.insert(name.to_string(), recs);
    }
    let manifest = Manifest {
        vocab_size: cfg.vocab,
        feature_dim: cfg.feature_dim,
        splits,
        domains: BTreeMap::from([("in".to_string(), ind), ("ood".to_string(), ood)]),
        token_files,
    };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Option<TokenSeq>,
    pub feats: Option<FeatureSeq>,
}

/// A manifest with every referenced feature file loaded.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub root: PathBuf,
    splits: BTreeMap<String, Vec<Utterance>>,
}

impl Corpus {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut splits = BTreeMap::new();
        for (name, recs) in &manifest.splits {
            let mut utts = Vec::with_capacity(recs.len());
            for r in recs {
                let feats = match &r.feature_path {
                    Some(p) => {
                        let x = read_features(&root.join(p))?;
                        if x.dim() != manifest.feature_dim {
                            return Err(Error::shape("corpus", &[x.dim()], &[manifest.feature_dim]));
                        }
                        Some(x)
                    }
                    None => None,
                };
                utts.push(Utterance {
                    id: r.utt_id.clone(),
                    tokens: r.tokens.clone(),
                    feats,
                });
            }
            splits.insert(name.clone(), utts);
        }
        Ok(Corpus { manifest, root, splits })
    }

    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown split {name}")))
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    /// `(features, tokens)` pairs of a labelled split.
    pub fn pairs(&self, name: &str) -> Result<Vec<(&FeatureSeq, &TokenSeq)>> {
        self.split(name)?
            .iter()
            .map(|u| match (&u.feats, &u.tokens) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(Error::Config(format!("split {name} is not paired ({})", u.id))),
            })
            .collect()
    }

    pub fn speech(&self, name: &str) -> Result<Vec<&FeatureSeq>> {
        self.split(name)?
            .iter()
            .map(|u| u.feats.as_ref().ok_or_else(|| Error::Config(format!("split {name} has no features"))))
            .collect()
    }

    pub fn texts(&self, name: &str) -> Result<Vec<&TokenSeq>> {
        self.split(name)?
            .iter()
            .map(|u| u.tokens.as_ref().ok_or_else(|| Error::Config(format!("split {name} has no tokens"))))
            .collect()
    }
}
