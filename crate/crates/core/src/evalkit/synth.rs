//! Latent-cluster synthetic click data. Each cluster owns a Zipfian word
//! distribution and a set of topics (small word sets); queries sample a few
//! topic words, positive titles are drawn from the same topic with a
//! controlled number of literal query-word matches, and hard negatives are
//! other-cluster titles that still match the query lexically.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use super::{EvalDoc, EvalQuery, EvalSet, MAX_NEGATIVES, MAX_POSITIVES};
use crate::error::{Error, Result};
use crate::vocab::{unigrams, SubwordVocab, CONTINUATION, MASK, PAD, UNK};

const CONSONANTS: &str = "bcdfghjklmnprstvz";
const VOWELS: &str = "aeiou";

/// Literal-overlap band: a query-positive pair belongs to it when the
/// fraction of query words found in the title lies in `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapQuantile {
    pub min: f64,
    pub max: f64,
}

pub const QUANTILE_NAMES: [&str; 3] = ["low", "mid", "high"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub words_per_cluster: usize,
    pub shared_words: usize,
    /// Shared words that are also whole pieces of the subword vocabulary.
    pub whole_word_pieces: usize,
    /// Most frequent words of each cluster that are whole pieces.
    pub cluster_word_pieces: usize,
    pub topics_per_cluster: usize,
    pub topic_size: usize,
    /// Collection size, including positives and confusers.
    pub docs: usize,
    pub train_queries: usize,
    pub eval_queries: usize,
    pub query_len_mean: f64,
    pub title_len_mean: f64,
    /// Probability that a free title slot is a topic word.
    pub topic_share: f64,
    /// Probability that a free title slot is a shared word.
    pub shared_share: f64,
    pub zipf_exponent: f64,
    /// Overlap bands for the low, mid and high quantiles.
    pub overlap: [OverlapQuantile; 3],
    /// Minimum query-word match ratio for a hard negative.
    pub negative_match_threshold: f64,
    /// Other-cluster titles planted per evaluation query that pass the
    /// negative threshold.
    pub confusers_per_query: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            words_per_cluster: 600,
            shared_words: 200,
            whole_word_pieces: 200,
            cluster_word_pieces: 150,
            topics_per_cluster: 40,
            topic_size: 8,
            docs: 2_000,
            train_queries: 4_000,
            eval_queries: 300,
            query_len_mean: 2.6,
            title_len_mean: 13.4,
            topic_share: 0.35,
            shared_share: 0.15,
            zipf_exponent: 1.0,
            overlap: [
                OverlapQuantile { min: 0.0, max: 0.32 },
                OverlapQuantile { min: 0.33, max: 0.66 },
                OverlapQuantile { min: 0.67, max: 1.0 },
            ],
            negative_match_threshold: 0.3,
            confusers_per_query: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.clusters < 2 {
            return bad("at least 2 clusters are required");
        }
        if self.topic_size == 0 || self.topics_per_cluster == 0 || self.words_per_cluster < self.topic_size {
            return bad("each cluster needs at least one topic of at least one word");
        }
        if self.shared_words == 0 || self.whole_word_pieces > self.shared_words {
            return bad("shared_words must be >= 1 and >= whole_word_pieces");
        }
        if self.cluster_word_pieces > self.words_per_cluster {
            return bad("cluster_word_pieces exceeds words_per_cluster");
        }
        let capacity = {
            let s = CONSONANTS.len() * VOWELS.len();
            s * s + s * s * s
        };
        if self.clusters * self.words_per_cluster + self.shared_words > capacity {
            return bad("more words requested than the syllable inventory can form");
        }
        let shares_ok = (0.0..=1.0).contains(&self.topic_share)
            && (0.0..=1.0).contains(&self.shared_share)
            && self.topic_share + self.shared_share <= 1.0;
        if !shares_ok {
            return bad("topic_share and shared_share must be probabilities summing to <= 1");
        }
        if !(self.query_len_mean >= 1.0 && self.title_len_mean >= 1.0) {
            return bad("length means must be >= 1");
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be >= 0");
        }
        if !(self.negative_match_threshold > 0.0 && self.negative_match_threshold <= 1.0) {
            return bad("negative_match_threshold must be in (0, 1]");
        }
        if self.eval_queries > 0 && self.confusers_per_query == 0 {
            return bad("confusers_per_query must be >= 1 when generating evaluation queries");
        }
        for (q, name) in self.overlap.iter().zip(QUANTILE_NAMES) {
            if !(0.0 <= q.min && q.min <= q.max && q.max <= 1.0) {
                return Err(Error::InfeasibleOverlap {
                    quantile: name,
                    reason: format!("band [{}, {}] is not within [0, 1]", q.min, q.max),
                });
            }
        }
        Ok(())
    }
}

/// A training query with one positive title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthPair {
    pub query: String,
    pub doc: String,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub subvocab: SubwordVocab,
    pub train: Vec<SynthPair>,
    pub eval: EvalSet,
    /// Overlap quantile of each evaluation query.
    pub query_quantiles: Vec<&'static str>,
    pub query_clusters: Vec<usize>,
    pub doc_clusters: Vec<usize>,
}

impl SynthData {
    /// Every title in the collection and the training set, for pretraining
    /// and vocabulary building.
    pub fn titles(&self) -> Vec<&str> {
        self.eval
            .docs
            .iter()
            .map(|d| d.text.as_str())
            .chain(self.train.iter().map(|p| p.doc.as_str()))
            .collect()
    }
}

/// Fraction of distinct query words that occur in the title.
pub fn match_ratio(query: &str, title: &str) -> f64 {
    let q: BTreeSet<String> = unigrams(query).collect();
    if q.is_empty() {
        return 0.0;
    }
    let t: HashSet<String> = unigrams(title).collect();
    q.iter().filter(|w| t.contains(*w)).count() as f64 / q.len() as f64
}

struct World {
    words: Vec<String>,
    /// Word ids of each cluster, Zipf rank order.
    cluster_words: Vec<Vec<usize>>,
    shared: Vec<usize>,
    topics: Vec<Vec<Vec<usize>>>,
    cluster_zipf: WeightedIndex<f64>,
    shared_zipf: WeightedIndex<f64>,
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
}

fn syllables() -> Vec<String> {
    CONSONANTS
        .chars()
        .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
        .collect()
}

fn make_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let syl = syllables();
    let mut seen = HashSet::with_capacity(n);
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let len = if rng.gen_bool(0.7) { 2 } else { 3 };
        let w: String = (0..len).map(|_| syl[rng.gen_range(0..syl.len())].as_str()).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn length(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = Poisson::new(mean - 1.0).expect("positive rate");
    1 + p.sample(rng) as usize
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let total = cfg.clusters * cfg.words_per_cluster + cfg.shared_words;
        let words = make_words(total, rng);
        let cluster_words: Vec<Vec<usize>> = (0..cfg.clusters)
            .map(|c| (c * cfg.words_per_cluster..(c + 1) * cfg.words_per_cluster).collect())
            .collect();
        let shared: Vec<usize> = (cfg.clusters * cfg.words_per_cluster..total).collect();
        let topics = cluster_words
            .iter()
            .map(|cw| {
                (0..cfg.topics_per_cluster)
                    .map(|_| sample(rng, cw.len(), cfg.topic_size).into_iter().map(|i| cw[i]).collect())
                    .collect()
            })
            .collect();
        Self {
            words,
            cluster_words,
            shared,
            topics,
            cluster_zipf: zipf(cfg.words_per_cluster, cfg.zipf_exponent),
            shared_zipf: zipf(cfg.shared_words, cfg.zipf_exponent),
        }
    }

    fn subvocab(&self, cfg: &SynthConfig) -> Result<SubwordVocab> {
        let syl = syllables();
        let pieces = [PAD, UNK, MASK]
            .into_iter()
            .map(String::from)
            .chain(syl.iter().cloned())
            .chain(syl.iter().map(|s| format!("{CONTINUATION}{s}")))
            .chain(self.shared[..cfg.whole_word_pieces].iter().map(|&w| self.words[w].clone()))
            .chain(
                self.cluster_words
                    .iter()
                    .flat_map(|cw| cw[..cfg.cluster_word_pieces].iter().map(|&w| self.words[w].clone())),
            );
        SubwordVocab::new(pieces)
    }

    fn text(&self, ids: &[usize]) -> String {
        ids.iter().map(|&w| self.words[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    fn filler(&self, cfg: &SynthConfig, cluster: usize, topic: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        if u < cfg.topic_share {
            let t = &self.topics[cluster][topic];
            t[rng.gen_range(0..t.len())]
        } else if u < cfg.topic_share + cfg.shared_share {
            self.shared[self.shared_zipf.sample(rng)]
        } else {
            self.cluster_words[cluster][self.cluster_zipf.sample(rng)]
        }
    }

    /// A title of the given topic containing every word of `include` and
    /// none of `exclude`.
    fn title(
        &self,
        cfg: &SynthConfig,
        cluster: usize,
        topic: usize,
        include: &[usize],
        exclude: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        let len = length(cfg.title_len_mean, rng).max(include.len());
        let mut out = include.to_vec();
        while out.len() < len {
            let mut w = self.filler(cfg, cluster, topic, rng);
            let mut tries = 0;
            while exclude.contains(&w) {
                w = if tries < 16 {
                    self.filler(cfg, cluster, topic, rng)
                } else {
                    self.shared[rng.gen_range(0..self.shared.len())]
                };
                tries += 1;
            }
            out.push(w);
        }
        out.shuffle(rng);
        out
    }

    fn query(&self, cfg: &SynthConfig, cluster: usize, topic: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let t = &self.topics[cluster][topic];
        let len = length(cfg.query_len_mean, rng).min(t.len());
        sample(rng, t.len(), len).into_iter().map(|i| t[i]).collect()
    }
}

fn feasible_matches(band: OverlapQuantile, len: usize) -> Vec<usize> {
    (0..=len)
        .filter(|&m| {
            let r = m as f64 / len as f64;
            band.min <= r && r <= band.max
        })
        .collect()
}

struct Planned {
    cluster: usize,
    topic: usize,
    query: Vec<usize>,
    feasible: Vec<usize>,
}

/// Draws a query whose length admits a match count inside the band.
fn plan_query(world: &World, cfg: &SynthConfig, quantile: usize, rng: &mut ChaCha8Rng) -> Result<Planned> {
    const ATTEMPTS: usize = 256;
    let band = cfg.overlap[quantile];
    for _ in 0..ATTEMPTS {
        let cluster = rng.gen_range(0..cfg.clusters);
        let topic = rng.gen_range(0..cfg.topics_per_cluster);
        let query = world.query(cfg, cluster, topic, rng);
        let feasible = feasible_matches(band, query.len());
        if !feasible.is_empty() {
            return Ok(Planned {
                cluster,
                topic,
                query,
                feasible,
            });
        }
    }
    Err(Error::InfeasibleOverlap {
        quantile: QUANTILE_NAMES[quantile],
        reason: format!(
            "no query length up to {} admits a match ratio in [{}, {}]",
            cfg.topic_size, band.min, band.max
        ),
    })
}

fn positive_title(world: &World, cfg: &SynthConfig, p: &Planned, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = p.feasible[rng.gen_range(0..p.feasible.len())];
    let mut q = p.query.clone();
    q.shuffle(rng);
    let (include, exclude) = q.split_at(m);
    world.title(cfg, p.cluster, p.topic, include, exclude, rng)
}

struct Doc {
    words: Vec<usize>,
    cluster: usize,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(cfg, &mut rng);
    let subvocab = world.subvocab(cfg)?;

    let mut train = Vec::with_capacity(cfg.train_queries);
    for _ in 0..cfg.train_queries {
        let quantile = rng.gen_range(0..3);
        let p = plan_query(&world, cfg, quantile, &mut rng)?;
        let doc = positive_title(&world, cfg, &p, &mut rng);
        train.push(SynthPair {
            query: world.text(&p.query),
            doc: world.text(&doc),
        });
    }

    let mut docs: Vec<Doc> = Vec::with_capacity(cfg.docs);
    let mut planned = Vec::with_capacity(cfg.eval_queries);
    let mut positives: Vec<Vec<usize>> = Vec::with_capacity(cfg.eval_queries);
    for i in 0..cfg.eval_queries {
        let quantile = i % 3;
        let p = plan_query(&world, cfg, quantile, &mut rng)?;
        let n_pos = rng.gen_range(1..=MAX_POSITIVES);
        let mut pos = Vec::with_capacity(n_pos);
        for _ in 0..n_pos {
            pos.push(docs.len());
            docs.push(Doc {
                words: positive_title(&world, cfg, &p, &mut rng),
                cluster: p.cluster,
            });
        }
        let need = ((cfg.negative_match_threshold * p.query.len() as f64).ceil() as usize).clamp(1, p.query.len());
        for _ in 0..cfg.confusers_per_query {
            let other = (p.cluster + rng.gen_range(1..cfg.clusters)) % cfg.clusters;
            let topic = rng.gen_range(0..cfg.topics_per_cluster);
            let mut q = p.query.clone();
            q.shuffle(&mut rng);
            let words = world.title(cfg, other, topic, &q[..need], &[], &mut rng);
            docs.push(Doc { words, cluster: other });
        }
        positives.push(pos);
        planned.push((p, quantile));
    }
    if docs.len() > cfg.docs {
        return Err(Error::InvalidParameter(format!(
            "collection of {} documents cannot hold {} positives and confusers",
            cfg.docs,
            docs.len()
        )));
    }
    while docs.len() < cfg.docs {
        let cluster = rng.gen_range(0..cfg.clusters);
        let topic = rng.gen_range(0..cfg.topics_per_cluster);
        let words = world.title(cfg, cluster, topic, &[], &[], &mut rng);
        docs.push(Doc { words, cluster });
    }

    // shuffle the collection; slot[i] is the final position of generated doc i
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut slot = vec![0; docs.len()];
    for (new, &old) in order.iter().enumerate() {
        slot[old] = new;
    }
    let doc_id = |i: usize| format!("d{i:06}");

    let mut postings: HashMap<usize, Vec<usize>> = HashMap::new();
    for (new, &old) in order.iter().enumerate() {
        let distinct: BTreeSet<usize> = docs[old].words.iter().copied().collect();
        for w in distinct {
            postings.entry(w).or_default().push(new);
        }
    }

    let mut queries = Vec::with_capacity(planned.len());
    let mut query_quantiles = Vec::with_capacity(planned.len());
    let mut query_clusters = Vec::with_capacity(planned.len());
    for (i, ((p, quantile), pos)) in planned.iter().zip(&positives).enumerate() {
        let mut hits: HashMap<usize, usize> = HashMap::new();
        for w in &p.query {
            for &d in postings.get(w).map(Vec::as_slice).unwrap_or(&[]) {
                *hits.entry(d).or_default() += 1;
            }
        }
        let len = p.query.len() as f64;
        let mut candidates: Vec<(usize, usize)> = hits
            .into_iter()
            .filter(|&(d, h)| docs[order[d]].cluster != p.cluster && h as f64 / len >= cfg.negative_match_threshold)
            .collect();
        candidates.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut pos_ids: Vec<usize> = pos.iter().map(|&d| slot[d]).collect();
        pos_ids.sort_unstable();
        queries.push(EvalQuery {
            query_id: format!("q{i:05}"),
            text: world.text(&p.query),
            positives: pos_ids.into_iter().map(doc_id).collect(),
            negatives: candidates.into_iter().take(MAX_NEGATIVES).map(|(d, _)| doc_id(d)).collect(),
        });
        query_quantiles.push(QUANTILE_NAMES[*quantile]);
        query_clusters.push(p.cluster);
    }

    let eval_docs = order
        .iter()
        .enumerate()
        .map(|(new, &old)| EvalDoc {
            doc_id: doc_id(new),
            text: world.text(&docs[old].words),
        })
        .collect();
    let doc_clusters = order.iter().map(|&old| docs[old].cluster).collect();
    Ok(SynthData {
        subvocab,
        train,
        eval: EvalSet::new(queries, eval_docs)?,
        query_quantiles,
        query_clusters,
        doc_clusters,
    })
}
