//! Planted synthetic worlds: semantic classes of entities, synonym surface
//! variants, and several embedding spaces, with gold labels.
//!
//! In every space an entity vector is its class centroid plus noise, and each
//! synonym of the entity is the entity vector plus much smaller noise. The
//! generator checks that, in every space, the largest distance between two
//! surfaces of one entity is smaller than the smallest distance between
//! surfaces of different entities, and retries with a derived seed otherwise.
//!
//! Synonym surfaces are produced by rules that exercise the lexical pair
//! features: initialisms, uppercase prefixes, dropped tokens, and qualified
//! aliases sharing tokens with the canonical name.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::store::{
    create, write_embedding_space, write_seed_queries, write_vocabulary, EmbeddingBag, EmbeddingSpace, SeedQuery,
    TermId, Vocabulary,
};
use crate::synset::{write_synsets_json, Synset};

const MAX_ATTEMPTS: u64 = 16;

const SYLLABLES: [&str; 40] = [
    "ka", "lo", "ri", "ven", "tar", "mo", "sel", "dru", "pha", "nix", "qua", "bel", "zor", "fen", "gal", "hur",
    "isk", "jor", "lum", "ner", "os", "pra", "rud", "sto", "tev", "ul", "vig", "wen", "yar", "zem", "cor", "dal",
    "ema", "fis", "gor", "hal", "ith", "kes", "mar", "nol",
];

const TYPE_WORDS: [&str; 10] = [
    "River", "Province", "Tower", "Cup", "Island", "Order", "Valley", "Guild", "Harbor", "Circuit",
];

const QUALIFIERS: [&str; 4] = ["Greater", "Old", "Upper", "Free"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub classes: usize,
    pub entities_per_class: usize,
    /// Fraction of entities that receive synonym variants.
    pub synonym_rate: f64,
    /// Spread of entities around their class centroid (norm of the noise).
    pub noise_sigma: f64,
    /// Spread of synonym vectors around their entity.
    pub synonym_sigma: f64,
    /// Weight of a direction shared by all classes; higher makes classes closer.
    pub shared_direction: f64,
    pub spaces: usize,
    pub dim: usize,
    pub queries_per_class: usize,
    pub seeds_per_query: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            classes: 5,
            entities_per_class: 40,
            synonym_rate: 0.3,
            noise_sigma: 0.8,
            synonym_sigma: 0.05,
            shared_direction: 0.8,
            spaces: 3,
            dim: 16,
            queries_per_class: 4,
            seeds_per_query: 3,
            seed: 7,
        }
    }
}

impl WorldParams {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.entities_per_class == 0 || self.spaces == 0 || self.dim == 0 {
            return Err(Error::Config("classes, entities, spaces and dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) {
            return Err(Error::Config("synonym_rate must lie in [0, 1]".into()));
        }
        if !(self.synonym_sigma >= 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::Config("noise levels must be positive".into()));
        }
        if self.synonym_sigma * 4.0 >= self.noise_sigma {
            return Err(Error::Config(
                "synonym_sigma must be well below noise_sigma to keep the planted margin".into(),
            ));
        }
        if self.seeds_per_query > self.entities_per_class {
            return Err(Error::Config("seeds_per_query exceeds entities_per_class".into()));
        }
        Ok(())
    }
}

/// One planted entity and its surfaces (canonical name first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedEntity {
    pub class: usize,
    pub terms: Vec<TermId>,
}

#[derive(Debug, Clone)]
pub struct PlantedWorld {
    pub params: WorldParams,
    pub class_names: Vec<String>,
    pub vocab: Vocabulary,
    pub bag: EmbeddingBag,
    pub entities: Vec<PlantedEntity>,
    pub queries: Vec<SeedQuery>,
    /// Seed attempt that satisfied the margin check.
    pub attempt: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldClass {
    pub class_name: String,
    pub synsets: Vec<Vec<String>>,
}

impl PlantedWorld {
    /// Entity index of every term.
    pub fn entity_of(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.vocab.len()];
        for (e, ent) in self.entities.iter().enumerate() {
            for t in &ent.terms {
                out[t.index()] = e;
            }
        }
        out
    }

    /// All terms of a class.
    pub fn class_terms(&self, class: usize) -> Vec<TermId> {
        self.entities
            .iter()
            .filter(|e| e.class == class)
            .flat_map(|e| e.terms.iter().copied())
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn gold_classes(&self) -> Vec<GoldClass> {
        (0..self.class_names.len())
            .map(|c| GoldClass {
                class_name: self.class_names[c].clone(),
                synsets: self
                    .entities
                    .iter()
                    .filter(|e| e.class == c)
                    .map(|e| e.terms.iter().map(|&t| self.vocab.surface(t).to_string()).collect())
                    .collect(),
            })
            .collect()
    }

    pub fn gold_synsets(&self) -> Vec<Synset> {
        self.entities
            .iter()
            .map(|e| Synset {
                class_name: self.class_names[e.class].clone(),
                members: e.terms.clone(),
            })
            .collect()
    }

    /// Writes `vocab.tsv`, `emb_<space>.txt`, `seeds.json`, `gold_classes.json`
    /// and `gold_synsets.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_vocabulary(&dir.join("vocab.tsv"), &self.vocab)?;
        for s in self.bag.spaces() {
            write_embedding_space(&dir.join(format!("emb_{}.txt", s.name())), s, &self.vocab)?;
        }
        write_seed_queries(&dir.join("seeds.json"), &self.queries, &self.vocab)?;
        let gold = dir.join("gold_classes.json");
        let mut out = create(&gold)?;
        serde_json::to_writer_pretty(&mut out, &self.gold_classes()).map_err(|source| Error::Json {
            path: gold.clone(),
            source,
        })?;
        std::io::Write::flush(&mut out).map_err(|e| Error::io(&gold, e))?;
        write_synsets_json(&dir.join("gold_synsets.json"), &self.gold_synsets(), &self.vocab)
    }

    /// Largest intra-entity and smallest inter-entity Euclidean distance in a space.
    pub fn margin(&self, space: usize) -> (f64, f64) {
        let s = self.bag.space(space);
        let owner = self.entity_of();
        let ids: Vec<TermId> = self.vocab.ids().collect();
        let mut max_intra = 0.0f64;
        let mut min_inter = f64::INFINITY;
        for (i, &a) in ids.iter().enumerate() {
            let va = s.vector(a).expect("planted terms are embedded");
            for &b in &ids[i + 1..] {
                let vb = s.vector(b).expect("planted terms are embedded");
                let d = va.iter().zip(vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                if owner[a.index()] == owner[b.index()] {
                    max_intra = max_intra.max(d);
                } else {
                    min_inter = min_inter.min(d);
                }
            }
        }
        (max_intra, min_inter)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn random_token(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    let word: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    capitalize(&word)
}

fn canonical_name(rng: &mut ChaCha8Rng, class: usize) -> Vec<String> {
    let mut tokens = vec![random_token(rng)];
    let r: f64 = rng.random();
    if r < 0.25 {
        tokens.push(random_token(rng));
    } else if r < 0.55 {
        tokens.push(TYPE_WORDS[class % TYPE_WORDS.len()].to_string());
    } else if r < 0.65 {
        tokens.insert(0, "North".into());
    }
    tokens
}

/// Candidate synonym surfaces for a canonical name, in rule order.
fn variant_candidates(tokens: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::new();
    if tokens.len() >= 2 {
        out.push(tokens.iter().filter_map(|t| t.chars().next()).collect::<String>().to_uppercase());
        let longest = tokens.iter().fold("", |acc, t| if t.len() > acc.len() { t } else { acc });
        out.push(longest.to_string());
    }
    let first = &tokens[0];
    let cut = rng.random_range(2..=3).min(first.chars().count());
    out.push(first.chars().take(cut).collect::<String>().to_uppercase());
    let q = QUALIFIERS.choose(rng).expect("non-empty");
    out.push(format!("{q} {}", tokens.join(" ")));
    out.shuffle(rng);
    out
}

/// Generates a world, retrying vector sampling until the margin holds.
pub fn generate(params: &WorldParams) -> Result<PlantedWorld> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let class_names: Vec<String> = (0..params.classes).map(|c| format!("class_{c}")).collect();

    // Surfaces.
    let mut used: HashSet<String> = HashSet::new();
    let mut surfaces: Vec<(String, u64, usize)> = Vec::new();
    let mut entities: Vec<PlantedEntity> = Vec::new();
    let n_entities = params.classes * params.entities_per_class;
    let mut with_synonyms: Vec<bool> = (0..n_entities)
        .map(|i| i < (params.synonym_rate * n_entities as f64).round() as usize)
        .collect();
    with_synonyms.shuffle(&mut rng);
    for class in 0..params.classes {
        for k in 0..params.entities_per_class {
            let e = class * params.entities_per_class + k;
            let tokens = loop {
                let t = canonical_name(&mut rng, class);
                if !used.contains(&t.join(" ")) {
                    break t;
                }
            };
            let canonical = tokens.join(" ");
            used.insert(canonical.clone());
            let mut terms = vec![TermId::from(surfaces.len())];
            surfaces.push((canonical, rng.random_range(200..2000), e));
            if with_synonyms[e] {
                let want = rng.random_range(1..=2);
                for v in variant_candidates(&tokens, &mut rng) {
                    if terms.len() > want {
                        break;
                    }
                    if v.chars().count() >= 2 && used.insert(v.clone()) {
                        terms.push(TermId::from(surfaces.len()));
                        surfaces.push((v, rng.random_range(11..200), e));
                    }
                }
            }
            entities.push(PlantedEntity { class, terms });
        }
    }
    let vocab = Vocabulary::from_entries(
        surfaces
            .iter()
            .map(|(s, f, e)| (s.clone(), *f, Some(format!("Q{}", 1000 + e)))),
    )?;

    // Vectors.
    for attempt in 0..MAX_ATTEMPTS {
        let mut vrng = ChaCha8Rng::seed_from_u64(seed::derive(params.seed, 0x5EED + attempt));
        let mut spaces = Vec::with_capacity(params.spaces);
        for b in 0..params.spaces {
            spaces.push(sample_space(params, &format!("view{b}"), &entities, vocab.len(), &mut vrng)?);
        }
        let world = PlantedWorld {
            params: params.clone(),
            class_names: class_names.clone(),
            vocab: vocab.clone(),
            bag: EmbeddingBag::new(spaces)?,
            entities: entities.clone(),
            queries: Vec::new(),
            attempt,
        };
        if (0..params.spaces).all(|b| {
            let (intra, inter) = world.margin(b);
            intra < inter
        }) {
            let queries = make_queries(&world, &mut rng);
            return Ok(PlantedWorld { queries, ..world });
        }
    }
    Err(Error::InvalidInput(format!(
        "planted margin violated after {MAX_ATTEMPTS} attempts; lower synonym_sigma"
    )))
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn sample_space(
    params: &WorldParams,
    name: &str,
    entities: &[PlantedEntity],
    vocab_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingSpace> {
    let dim = params.dim;
    let shared = unit(gaussian(rng, dim, 1.0));
    let centroids: Vec<Vec<f64>> = (0..params.classes)
        .map(|_| {
            let own = unit(gaussian(rng, dim, 1.0));
            unit(
                own.iter()
                    .zip(&shared)
                    .map(|(o, s)| o + params.shared_direction * s)
                    .collect(),
            )
        })
        .collect();
    let mut rows = Vec::with_capacity(vocab_len);
    for e in entities {
        let noise = gaussian(rng, dim, params.noise_sigma);
        let base: Vec<f64> = centroids[e.class].iter().zip(&noise).map(|(c, n)| c + n).collect();
        for &t in &e.terms {
            let jitter = gaussian(rng, dim, params.synonym_sigma);
            rows.push((t, base.iter().zip(&jitter).map(|(b, j)| b + j).collect()));
        }
    }
    EmbeddingSpace::from_vectors(name, dim, vocab_len, rows)
}

fn make_queries(world: &PlantedWorld, rng: &mut ChaCha8Rng) -> Vec<SeedQuery> {
    let p = &world.params;
    let mut queries = Vec::new();
    for class in 0..p.classes {
        let members: Vec<usize> = (0..world.entities.len())
            .filter(|&e| world.entities[e].class == class)
            .collect();
        for _ in 0..p.queries_per_class {
            let picked: Vec<usize> = members.choose_multiple(rng, p.seeds_per_query).copied().collect();
            let synsets = picked
                .iter()
                .map(|&e| {
                    let terms = &world.entities[e].terms;
                    if terms.len() > 1 && rng.random_bool(0.5) {
                        terms[..2].to_vec()
                    } else {
                        terms[..1].to_vec()
                    }
                })
                .collect();
            queries.push(SeedQuery {
                class_name: world.class_names[class].clone(),
                synsets,
            });
        }
    }
    queries
}
