//! Synthetic fundus/OCT/text triplets with planted predilection sites.
//!
//! Each disease class owns a binary `n x d` site mask. OCT samples carry
//! signal exactly on the mask; fundus samples carry a pattern obtained by a
//! separate world-level linear map of the same mask, so the two modalities are
//! related only through the class. Prompts are rendered from a small template
//! bank, some of which spell out the site positions as tokens (`r1c7`), which
//! is what lets text for a never-seen disease land near a seen one that shares
//! its sites.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;

pub const EXEMPLAR_TEMPLATE: &str = "This retina fundus image shows {NAME}, {ABBR}";

/// Prompt bank templates; the first is the exemplar used at inference.
pub const PROMPT_TEMPLATES: [&str; 4] = [
    EXEMPLAR_TEMPLATE,
    "{NAME} ({ABBR}) is visible in this fundus photograph",
    "A fundus image with signs of {NAME}, {ABBR}, near {SITES}",
    "Findings consistent with {ABBR}: {NAME} affecting {SITES}",
];

/// Template mentioning sites only; useful for classes whose names the text
/// vocabulary has never seen.
pub const SITE_TEMPLATE: &str = PROMPT_TEMPLATES[2];

const DISEASE_NAMES: [(&str, &str); 12] = [
    ("Amber Drusenopathy", "AD"),
    ("Lattice Maculitis", "LM"),
    ("Cobalt Vasculopathy", "CV"),
    ("Ridge Choroidosis", "RC"),
    ("Ember Papillitis", "EP"),
    ("Silt Retinoschisis", "SR"),
    ("Halo Exudation", "HE"),
    ("Tessellate Atrophy", "TA"),
    ("Quill Neovascularity", "QN"),
    ("Dune Edema", "DE"),
    ("Frost Pigmentopathy", "FP"),
    ("Vesper Occlusion", "VO"),
];

/// Fraction of the `n x d` grid a generated site mask covers.
pub const DEFAULT_SITE_DENSITY: f64 = 0.125;

#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseSpec {
    pub class_id: usize,
    pub name: String,
    pub abbr: String,
    pub site_mask: Matrix,
    pub prompt_bank: Vec<String>,
}

impl DiseaseSpec {
    fn new(class_id: usize, name: &str, abbr: &str, site_mask: Matrix) -> Result<Self> {
        if site_mask.data().iter().all(|&v| v == 0.0) {
            return Err(contract(format!("class {name} has an empty site mask")));
        }
        if site_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(contract(format!("class {name} site mask is not binary")));
        }
        let sites = describe_sites(&site_mask);
        let prompt_bank = PROMPT_TEMPLATES
            .iter()
            .map(|t| render_prompt(&fill_sites(t, &sites), name, abbr))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_id,
            name: name.to_owned(),
            abbr: abbr.to_owned(),
            site_mask,
            prompt_bank,
        })
    }

    pub fn site_description(&self) -> String {
        describe_sites(&self.site_mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_density")]
    pub site_density: f64,
}

fn default_signal() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.25
}
fn default_density() -> f64 {
    DEFAULT_SITE_DENSITY
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n: 4,
            d: 16,
            seed: 0,
            signal: default_signal(),
            noise: default_noise(),
            site_density: default_density(),
        }
    }
}

impl WorldConfig {
    pub fn build(&self) -> Result<World> {
        let (c, n, d) = (self.num_classes, self.n, self.d);
        if c < 2 || n < 1 || d < 2 {
            return Err(contract(format!("world needs num_classes >= 2, n >= 1, d >= 2; got C={c}, n={n}, d={d}")));
        }
        if !(self.signal > 0.0) || !(self.noise >= 0.0) || self.noise > self.signal / 4.0 {
            return Err(contract(format!(
                "need signal > 0 and 0 <= noise <= signal/4, got signal={} noise={}",
                self.signal, self.noise
            )));
        }
        if !(self.site_density > 0.0 && self.site_density <= 1.0) {
            return Err(contract(format!("site_density must be in (0, 1], got {}", self.site_density)));
        }
        let cells = n * d;
        // Nonzero binary masks available on the grid: 2^(n*d) - 1.
        if cells < 64 && c as u128 > (1u128 << cells) - 1 {
            return Err(Error::Capacity(format!(
                "{c} distinct nonzero site masks do not fit on a {n}x{d} grid"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let masks = distinct_masks(c, n, d, self.site_density, &mut rng);
        let fundus_map = Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let classes = masks
            .into_iter()
            .enumerate()
            .map(|(k, mask)| {
                let (name, abbr) = disease_name(k);
                DiseaseSpec::new(k, &name, &abbr, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            n,
            d,
            signal: self.signal,
            noise: self.noise,
            fundus_map,
            classes,
        })
    }
}

fn disease_name(k: usize) -> (String, String) {
    match DISEASE_NAMES.get(k) {
        Some((name, abbr)) => ((*name).to_owned(), (*abbr).to_owned()),
        None => (format!("Synthetic Condition {k}"), format!("SC{k}")),
    }
}

fn distinct_masks(count: usize, n: usize, d: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let cells = n * d;
    let mut k = ((cells as f64 * density).round() as usize).clamp(1, cells);
    let mut positions: Vec<usize> = (0..cells).collect();
    let mut masks: Vec<Matrix> = Vec::with_capacity(count);
    let mut misses = 0;
    while masks.len() < count {
        positions.shuffle(rng);
        let mut mask = Matrix::zeros(n, d);
        for &p in &positions[..k] {
            mask.data_mut()[p] = 1.0;
        }
        if masks.contains(&mask) {
            misses += 1;
            // The current cardinality is (nearly) exhausted; move to denser masks.
            if misses > 1000 && k < cells {
                k += 1;
                misses = 0;
            }
            continue;
        }
        masks.push(mask);
    }
    masks
}

/// Shorthand for [`WorldConfig::build`] with default signal, noise and density.
pub fn make_world(num_classes: usize, n: usize, d: usize, seed: u64) -> Result<World> {
    WorldConfig {
        num_classes,
        n,
        d,
        seed,
        ..WorldConfig::default()
    }
    .build()
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub n: usize,
    pub d: usize,
    pub signal: f64,
    pub noise: f64,
    /// `d x d` map from a site mask to the fundus pattern.
    pub fundus_map: Matrix,
    pub classes: Vec<DiseaseSpec>,
}

impl World {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class_id: usize) -> Result<&DiseaseSpec> {
        self.classes
            .get(class_id)
            .ok_or_else(|| contract(format!("class {class_id} not in a world of {} classes", self.classes.len())))
    }

    /// A world with the same geometry and fundus map but a different class
    /// table, for diseases absent from training. Classes are renumbered from 0.
    pub fn unseen_world(&self, classes: &[(String, String, Matrix)]) -> Result<World> {
        if classes.is_empty() {
            return Err(contract("unseen world needs at least one class"));
        }
        let specs = classes
            .iter()
            .enumerate()
            .map(|(k, (name, abbr, mask))| {
                if mask.shape() != crate::error::Shape(self.n, self.d) {
                    return Err(Error::Shape {
                        op: "unseen_world",
                        left: crate::error::Shape(self.n, self.d),
                        right: mask.shape(),
                    });
                }
                DiseaseSpec::new(k, name, abbr, mask.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            classes: specs,
            ..self.clone()
        })
    }

    pub fn oct_sample<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> Result<Matrix> {
        let spec = self.class(class_id)?;
        let noise = Matrix::gaussian(self.n, self.d, self.noise, rng);
        spec.site_mask.scale(self.signal).add(&noise)
    }

    pub fn fundus_sample<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> Result<Matrix> {
        let spec = self.class(class_id)?;
        let pattern = spec.site_mask.matmul(&self.fundus_map)?.scale(self.signal);
        let noise = Matrix::gaussian(self.n, self.d, self.noise, rng);
        pattern.add(&noise)
    }

    pub fn sample<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> Result<Sample> {
        let spec = self.class(class_id)?;
        let fundus_raw = self.fundus_sample(class_id, rng)?;
        let oct_raw = self.oct_sample(class_id, rng)?;
        let prompt = spec.prompt_bank[rng.random_range(0..spec.prompt_bank.len())].clone();
        Ok(Sample {
            fundus_raw,
            oct_raw,
            prompt,
            class_id,
        })
    }

    pub fn to_document(&self) -> WorldDocument {
        WorldDocument {
            n: self.n,
            d: self.d,
            signal: self.signal,
            noise: self.noise,
            fundus_map: self.fundus_map.to_rows(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassDocument {
                    class_id: c.class_id,
                    name: c.name.clone(),
                    abbr: c.abbr.clone(),
                    site_mask: (0..self.n)
                        .map(|i| c.site_mask.row(i).iter().map(|&v| v as u8).collect())
                        .collect(),
                    prompt_bank: c.prompt_bank.clone(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &WorldDocument) -> Result<World> {
        let fundus_map = Matrix::from_rows(&doc.fundus_map)?;
        let classes = doc
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.class_id != k {
                    return Err(contract(format!("class ids must be 0..C in order, found {} at {k}", c.class_id)));
                }
                let rows: Vec<Vec<f64>> = c.site_mask.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                let mut spec = DiseaseSpec::new(k, &c.name, &c.abbr, Matrix::from_rows(&rows)?)?;
                spec.prompt_bank = c.prompt_bank.clone();
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World {
            n: doc.n,
            d: doc.d,
            signal: doc.signal,
            noise: doc.noise,
            fundus_map,
            classes,
        })
    }
}

/// JSON form of a [`World`]: class table, 0/1 site masks and prompt banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldDocument {
    pub n: usize,
    pub d: usize,
    pub signal: f64,
    pub noise: f64,
    pub fundus_map: Vec<Vec<f64>>,
    pub classes: Vec<ClassDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDocument {
    pub class_id: usize,
    pub name: String,
    pub abbr: String,
    pub site_mask: Vec<Vec<u8>>,
    pub prompt_bank: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub fundus_raw: Matrix,
    pub oct_raw: Matrix,
    pub prompt: String,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub samples: Vec<Sample>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Class-balanced batch drawn from a freshly seeded stream.
pub fn sample_batch(world: &World, batch: usize, noise: f64, seed: u64) -> Result<TripletBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = World {
        noise,
        ..world.clone()
    };
    if !(noise >= 0.0) || noise > world.signal / 4.0 {
        return Err(contract(format!("noise must be in [0, signal/4], got {noise}")));
    }
    sample_batch_with(&noisy, batch, &mut rng)
}

/// Class-balanced batch using the world's own noise level. Class `k` of the
/// batch is `(offset + k) mod C` for a random offset, so every class appears
/// `batch / C` or `batch / C + 1` times.
pub fn sample_batch_with<R: Rng + ?Sized>(world: &World, batch: usize, rng: &mut R) -> Result<TripletBatch> {
    if world.classes.is_empty() {
        return Err(contract("cannot sample from an empty world"));
    }
    if batch < 2 {
        return Err(contract(format!("batch size must be >= 2, got {batch}")));
    }
    let c = world.num_classes();
    let offset = rng.random_range(0..c);
    let samples = (0..batch)
        .map(|k| world.sample((offset + k) % c, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletBatch { samples })
}

/// Substitutes `{NAME}` and `{ABBR}` verbatim. Both placeholders must appear.
pub fn render_prompt(template: &str, name: &str, abbr: &str) -> Result<String> {
    for placeholder in ["{NAME}", "{ABBR}"] {
        if !template.contains(placeholder) {
            return Err(Error::Template(format!("template {template:?} lacks {placeholder}")));
        }
    }
    Ok(template.replace("{NAME}", name).replace("{ABBR}", abbr))
}

/// Space-separated `r{row}c{col}` tokens for every active mask entry.
pub fn describe_sites(mask: &Matrix) -> String {
    let mut tokens = Vec::new();
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            if mask.get(i, j) != 0.0 {
                tokens.push(format!("r{i}c{j}"));
            }
        }
    }
    tokens.join(" ")
}

pub fn fill_sites(template: &str, sites: &str) -> String {
    template.replace("{SITES}", sites)
}
