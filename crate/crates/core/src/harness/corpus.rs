//! Deterministic synthetic corpora with multiple domains and a
//! hash-partitioned held-out split.
//!
//! Three generator families produce token streams whose per-domain
//! marginals are deliberately distinct (each domain leans on its own
//! vocabulary block), so macro-averaging over domains is non-degenerate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::train::{EvalSet, TokenSource};

use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Order-1 chains: every token has a few preferred successors.
    MarkovChain,
    /// Fixed token skeletons with distribution-filled slots.
    TemplateGrammar,
    /// Each domain mixes two Markov chains, chosen per sequence.
    MixtureOfDomains,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: GeneratorKind,
    pub vocab: u32,
    pub domains: Vec<String>,
    pub seed: u64,
    /// Zipf exponent of the per-domain token marginals; larger values
    /// concentrate mass on a handful of tokens.
    #[serde(default = "default_skew")]
    pub skew: f64,
}

fn default_skew() -> f64 {
    1.0
}

impl CorpusSpec {
    pub fn new(kind: GeneratorKind, vocab: u32, num_domains: usize, seed: u64) -> Self {
        CorpusSpec {
            kind,
            vocab,
            domains: (0..num_domains).map(|i| format!("domain{i}")).collect(),
            seed,
            skew: default_skew(),
        }
    }
}

/// Fraction of sequences hashed into the held-out split: 1 / 8.
const HELDOUT_MOD: u64 = 8;

struct MarkovModel {
    /// Three preferred successors per token.
    successors: Vec<[u32; 3]>,
    /// Probability mass on the successors (split 6:3:1); the rest falls
    /// uniformly on the domain's preferred block.
    successor_mass: f64,
    block: Vec<u32>,
    /// Zipf weights over `block` for start tokens, cumulative.
    start_cdf: Vec<f64>,
}

enum DomainGen {
    Markov(MarkovModel),
    Template {
        templates: Vec<Vec<Option<u32>>>,
        model: MarkovModel,
    },
    Mixture([MarkovModel; 2]),
}

struct Domain {
    name: String,
    gen: DomainGen,
}

/// A generated corpus: domain models plus the partition rule.
pub struct Corpus {
    spec: CorpusSpec,
    domains: Vec<Domain>,
}

fn zipf_cdf(len: usize, exponent: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..len).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    cdf.iter().position(|&c| x <= c).unwrap_or(cdf.len() - 1)
}

impl MarkovModel {
    fn build(vocab: u32, block: Vec<u32>, skew: f64, rng: &mut ChaCha8Rng) -> MarkovModel {
        let start_cdf = zipf_cdf(block.len(), skew);
        // Preferred successors drawn zipf-style from the block, so a few
        // tokens dominate the stationary distribution.
        let successors = (0..vocab)
            .map(|_| {
                let mut s = [0u32; 3];
                for slot in &mut s {
                    *slot = block[sample_cdf(&start_cdf, rng)];
                }
                s
            })
            .collect();
        MarkovModel {
            successors,
            successor_mass: 0.9,
            block,
            start_cdf,
        }
    }

    fn start(&self, rng: &mut ChaCha8Rng) -> u32 {
        self.block[sample_cdf(&self.start_cdf, rng)]
    }

    fn step(&self, current: u32, rng: &mut ChaCha8Rng) -> u32 {
        let x: f64 = rng.random();
        let m = self.successor_mass;
        let s = self.successors[current as usize];
        if x < m * 0.6 {
            s[0]
        } else if x < m * 0.9 {
            s[1]
        } else if x < m {
            s[2]
        } else {
            self.block[rng.random_range(0..self.block.len())]
        }
    }

    fn sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut current = self.start(rng);
        out.push(current);
        while out.len() < len {
            current = self.step(current, rng);
            out.push(current);
        }
        out
    }
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus, HarnessError> {
        if spec.vocab < 16 {
            return Err(HarnessError::Corpus(format!(
                "vocab {} is below the minimum of 16",
                spec.vocab
            )));
        }
        if spec.domains.is_empty() {
            return Err(HarnessError::Corpus("no domains".to_string()));
        }
        let d = spec.domains.len() as u32;
        let block_len = (spec.vocab / d).max(4);
        let mut domains = Vec::with_capacity(spec.domains.len());
        for (di, name) in spec.domains.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, di as u64, 0));
            let lo = (di as u32 * block_len) % spec.vocab;
            let block: Vec<u32> = (0..block_len).map(|j| (lo + j) % spec.vocab).collect();
            let gen = match spec.kind {
                GeneratorKind::MarkovChain => DomainGen::Markov(MarkovModel::build(
                    spec.vocab,
                    block,
                    spec.skew,
                    &mut rng,
                )),
                GeneratorKind::TemplateGrammar => {
                    let model = MarkovModel::build(spec.vocab, block.clone(), spec.skew, &mut rng);
                    let templates = (0..4)
                        .map(|_| {
                            (0..8)
                                .map(|_| {
                                    if rng.random::<f64>() < 0.5 {
                                        Some(block[rng.random_range(0..block.len())])
                                    } else {
                                        None // slot
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    DomainGen::Template { templates, model }
                }
                GeneratorKind::MixtureOfDomains => {
                    let a = MarkovModel::build(spec.vocab, block.clone(), spec.skew, &mut rng);
                    let b = MarkovModel::build(spec.vocab, block, spec.skew * 1.5, &mut rng);
                    DomainGen::Mixture([a, b])
                }
            };
            domains.push(Domain {
                name: name.clone(),
                gen,
            });
        }
        Ok(Corpus {
            spec: spec.clone(),
            domains,
        })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// The `index`-th sequence of a domain, deterministic in
    /// (corpus seed, domain, index, len).
    pub fn sequence(&self, domain: usize, index: u64, len: usize) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, domain as u64, index + 1));
        match &self.domains[domain].gen {
            DomainGen::Markov(m) => m.sequence(len, &mut rng),
            DomainGen::Template { templates, model } => {
                let mut out = Vec::with_capacity(len);
                while out.len() < len {
                    let t = &templates[rng.random_range(0..templates.len())];
                    for item in t {
                        if out.len() == len {
                            break;
                        }
                        out.push(match item {
                            Some(tok) => *tok,
                            None => model.start(&mut rng),
                        });
                    }
                }
                out
            }
            DomainGen::Mixture(chains) => {
                let which = usize::from(rng.random::<f64>() < 0.5);
                chains[which].sequence(len, &mut rng)
            }
        }
    }

    /// Content-hash partition: a sequence is held out iff its hash lands in
    /// the held-out residue class, so no content can sit in both splits.
    pub fn is_heldout(seq: &[u32]) -> bool {
        fnv1a(seq) % HELDOUT_MOD == 0
    }

    /// Round-robin training stream over domains, skipping held-out content.
    pub fn train_stream(&self, seq_len: usize) -> TrainStream<'_> {
        TrainStream {
            corpus: self,
            seq_len,
            cursor: 0,
        }
    }

    /// Fixed held-out split: the first `per_domain` held-out sequences of
    /// each domain at the given length.
    pub fn heldout(&self, seq_len: usize, per_domain: usize) -> EvalSet {
        let domains = (0..self.domains.len())
            .map(|di| {
                let mut seqs = Vec::with_capacity(per_domain);
                let mut index = 0u64;
                while seqs.len() < per_domain {
                    let seq = self.sequence(di, index, seq_len);
                    if Self::is_heldout(&seq) {
                        seqs.push(seq);
                    }
                    index += 1;
                }
                (self.domains[di].name.clone(), seqs)
            })
            .collect();
        EvalSet { domains }
    }

    /// Empirical token marginal of one domain from `samples` tokens.
    pub fn empirical_marginal(&self, domain: usize, samples: usize, seq_len: usize) -> Vec<f64> {
        let mut counts = vec![0u64; self.spec.vocab as usize];
        let mut index = 0u64;
        let mut seen = 0usize;
        while seen < samples {
            for &t in &self.sequence(domain, index, seq_len) {
                counts[t as usize] += 1;
                seen += 1;
            }
            index += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / seen as f64)
            .collect()
    }
}

/// Deterministic iterator over training sequences.
pub struct TrainStream<'a> {
    corpus: &'a Corpus,
    seq_len: usize,
    cursor: u64,
}

impl TokenSource for TrainStream<'_> {
    fn next_sequence(&mut self, len: usize) -> Vec<u32> {
        debug_assert_eq!(len, self.seq_len);
        let d = self.corpus.domains.len() as u64;
        loop {
            let i = self.cursor;
            self.cursor += 1;
            let seq = self.corpus.sequence((i % d) as usize, i / d, len);
            if !Corpus::is_heldout(&seq) {
                return seq;
            }
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style scrambling of (seed, a, b) into one stream seed.
    let mut x = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(b.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(seq: &[u32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &t in seq {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// KL divergence between two discrete distributions with light smoothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let eps = 1e-9;
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi + eps;
            let qi = qi + eps;
            pi * (pi / qi).ln()
        })
        .sum()
}
