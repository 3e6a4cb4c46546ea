//! Synthetic corpus generation from planted Markov sources.
//!
//! Each family gets its own hidden-Markov generator whose rows are
//! Dirichlet-style draws sharpened by a `separation` knob: emission mass
//! `separation` goes to the family's own slice of the vocabulary (symbols
//! congruent to the family index mod K) while the remaining mass follows a
//! background distribution shared by every family. At `separation = 1`
//! family emission supports are disjoint, so a sample's own generator
//! certainly out-scores every other family's; as `separation` approaches 0
//! all generators collapse onto the shared background and become
//! indistinguishable. The generators are persisted so tests can score
//! pipeline output against the known ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hmm::{sample_observations, HmmModel, TrainLog};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k_families: usize,
    pub vocab_size: usize,
    pub states_per_source: usize,
    pub samples_per_family: usize,
    pub sample_length: usize,
    /// In (0, 1]; how distinct the per-family sources are.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k_families: 7,
            vocab_size: 40,
            states_per_source: 6,
            samples_per_family: 200,
            sample_length: 300,
            separation: 0.9,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_families == 0
            || self.vocab_size == 0
            || self.states_per_source == 0
            || self.samples_per_family == 0
            || self.sample_length == 0
        {
            return Err(Error::InvalidSpec("all counts must be >= 1".into()));
        }
        if !(self.separation > 0.0 && self.separation <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "separation must be in (0, 1], got {}",
                self.separation
            )));
        }
        if self.k_families > self.vocab_size {
            return Err(Error::InvalidSpec(format!(
                "{} families need at least that many vocabulary symbols, got {}",
                self.k_families, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub data_root: PathBuf,
    pub generators_path: PathBuf,
    /// Planted generator per family, in canonical order.
    pub generators: BTreeMap<String, HmmModel>,
}

pub fn family_name(index: usize) -> String {
    format!("family{index:02}")
}

fn dirichlet_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    // Normalized unit-rate exponentials = flat Dirichlet.
    let mut row: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Per-state emission background shared by every family, drawn from the
/// spec seed alone.
fn shared_background(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = seeding::rng(seeding::mix64(spec.seed ^ 0x6267));
    (0..spec.states_per_source)
        .map(|_| dirichlet_row(&mut rng, spec.vocab_size))
        .collect()
}

fn planted_generator(
    spec: &SynthSpec,
    family_idx: usize,
    seed: u64,
    background: &[Vec<f64>],
) -> HmmModel {
    // Salted so generator parameters never share a stream with a pipeline
    // that trains on this corpus with the same seed.
    let mut rng = seeding::rng(seeding::mix64(seed ^ 0x6765_6e));
    let n = spec.states_per_source;
    let m = spec.vocab_size;
    let k = spec.k_families;
    let sep = spec.separation;

    // pi and A: family-specific Dirichlet rows blended toward uniform as
    // the separation drops, so low-separation families look alike
    // dynamically too.
    let pi: Vec<f64> = dirichlet_row(&mut rng, n)
        .into_iter()
        .map(|v| sep * v + (1.0 - sep) / n as f64)
        .collect();
    let mut a = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row = dirichlet_row(&mut rng, n);
        a.extend(row.iter().map(|&v| sep * v + (1.0 - sep) / n as f64));
    }

    // Emissions: mass `sep` on the family's own symbols (s % k ==
    // family_idx), mass `1 - sep` on the shared background. At sep = 1 the
    // supports are exactly the disjoint per-family vocabulary slices; at
    // sep -> 0 every family emits from the same background.
    let own: Vec<usize> = (0..m).filter(|s| s % k == family_idx).collect();
    let mut b = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut b[i * m..(i + 1) * m];
        for (sym, bg) in background[i].iter().enumerate() {
            row[sym] = (1.0 - sep) * bg;
        }
        let own_row = dirichlet_row(&mut rng, own.len());
        for (slot, &sym) in own.iter().enumerate() {
            row[sym] += sep * own_row[slot];
        }
    }

    HmmModel {
        n,
        m,
        a,
        b,
        pi,
        family: family_name(family_idx),
        seed,
        train_log: TrainLog::default(),
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorsFile {
    spec: SynthSpec,
    families: BTreeMap<String, GeneratorEntry>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorEntry {
    n: usize,
    m: usize,
    seed: u64,
    pi: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

/// Generate the corpus on disk: one opcode file per sample under
/// `out_dir/<family>/`, a `manifest.csv`, and `generators.json` with the
/// planted parameters. Symbols are written as the synthetic mnemonics
/// `OP000`, `OP001`, ...
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    let mut manifest = String::from("sample_id,family,path\n");
    let mut generators = BTreeMap::new();

    let background = shared_background(spec);
    for family_idx in 0..spec.k_families {
        let name = family_name(family_idx);
        let fam_seed = seeding::family_seed(spec.seed, &name);
        let generator = planted_generator(spec, family_idx, fam_seed, &background);
        let family_dir = out_dir.join(&name);
        fs::create_dir_all(&family_dir)?;
        let mut rng = seeding::rng(seeding::mix64(fam_seed));
        for s in 0..spec.samples_per_family {
            let obs = sample_observations(&generator, spec.sample_length, &mut rng);
            let text: Vec<String> = obs.iter().map(|&o| format!("OP{o:03}")).collect();
            let rel = format!("{name}/s{s:04}.txt");
            fs::write(out_dir.join(&rel), text.join(" "))?;
            manifest.push_str(&format!("{name}_s{s:04},{name},{rel}\n"));
        }
        generators.insert(name, generator);
    }
    fs::write(&manifest_path, manifest)?;

    let generators_path = out_dir.join("generators.json");
    let file = GeneratorsFile {
        spec: *spec,
        families: generators
            .iter()
            .map(|(name, g)| {
                (
                    name.clone(),
                    GeneratorEntry {
                        n: g.n,
                        m: g.m,
                        seed: g.seed,
                        pi: g.pi.clone(),
                        a: (0..g.n).map(|i| g.a_row(i).to_vec()).collect(),
                        b: (0..g.n).map(|i| g.b_row(i).to_vec()).collect(),
                    },
                )
            })
            .collect(),
    };
    fs::write(&generators_path, serde_json::to_string_pretty(&file)?)?;

    Ok(SynthOutput {
        manifest_path,
        data_root: out_dir.to_path_buf(),
        generators_path,
        generators,
    })
}
