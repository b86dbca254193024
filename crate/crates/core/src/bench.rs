//! Synthetic multi-domain benchmark and CSV ingestion.
//!
//! All domains share one set of class anchors. A domain is defined by an
//! invertible affine "style" map (rotation, per-coordinate scaling, bias)
//! whose magnitude grows with `style_strength`; samples are styled anchors
//! plus isotropic noise. Features are min-max normalized per coordinate over
//! the whole benchmark and every domain is split 9:1 (train/val) per class.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl DomainDataset {
    /// Train followed by validation samples.
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Minimum samples a domain needs to yield nonempty train and val splits.
pub const MIN_DOMAIN_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub samples_per_domain: usize,
    pub style_strength: f64,
    pub label_noise: f64,
    /// Distance scale of the class anchors.
    pub class_separation: f64,
    /// Standard deviation of the isotropic noise added after styling.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_domains: 5,
            n_classes: 3,
            input_dim: 16,
            samples_per_domain: 600,
            style_strength: 1.0,
            label_noise: 0.0,
            class_separation: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_domains < 2 {
            return bad(format!("n_domains must be >= 2, got {}", self.n_domains));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.samples_per_domain < MIN_DOMAIN_SAMPLES * self.n_classes {
            return bad(format!(
                "samples_per_domain must be >= 10 * n_classes = {}, got {}",
                MIN_DOMAIN_SAMPLES * self.n_classes,
                self.samples_per_domain
            ));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            return bad(format!("style_strength must be >= 0, got {}", self.style_strength));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        if !(self.class_separation > 0.0 && self.noise_std >= 0.0) {
            return bad("class_separation must be > 0 and noise_std >= 0".into());
        }
        Ok(())
    }

    /// Seed used for the train/val split.
    pub fn split_seed(&self) -> u64 {
        self.seed
    }
}

/// Affine map `x -> R diag(s) x + b`.
#[derive(Clone, Debug)]
struct StyleMap {
    matrix: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

// Maximum Givens angle at unit style strength, and spreads of scale and bias.
const MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
const SCALE_SPREAD: f64 = 0.5;
const BIAS_SPREAD: f64 = 1.0;

impl StyleMap {
    fn draw(d: usize, strength: f64, rng: &mut rng::Rng) -> Self {
        let sigma = SCALE_SPREAD * strength;
        let scales: Vec<f64> = (0..d).map(|_| 1.0 + sigma * rng.gen_range(-1.0..=1.0)).collect();
        let bias: Vec<f64> = (0..d)
            .map(|_| BIAS_SPREAD * strength * rng.gen_range(-1.0..=1.0))
            .collect();
        let mut matrix: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { scales[j] } else { 0.0 }).collect())
            .collect();
        if d >= 2 {
            for _ in 0..d {
                let i = rng.gen_range(0..d);
                let mut j = rng.gen_range(0..d - 1);
                if j >= i {
                    j += 1;
                }
                let theta = MAX_ANGLE * strength * rng.gen_range(-1.0..=1.0);
                let (s, c) = theta.sin_cos();
                // left-multiply by the Givens rotation on rows (i, j)
                let (lo, hi) = matrix.split_at_mut(i.max(j));
                let (row_i, row_j) = if i < j {
                    (&mut lo[i], &mut hi[0])
                } else {
                    (&mut hi[0], &mut lo[j])
                };
                for (x, y) in row_i.iter_mut().zip(row_j.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        StyleMap { matrix, bias }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z).map(|(r, v)| r * v).sum::<f64>())
            .collect()
    }
}

/// Generates every domain's samples (normalized, unsplit, in generation order).
pub fn generate_domains(spec: &BenchSpec) -> Result<Vec<Vec<Sample>>> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut anchor_rng = stream(spec.seed, &[rng::TAG_ANCHORS]);
    let anchors: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..d)
                .map(|_| spec.class_separation * anchor_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut domains: Vec<Vec<Sample>> = (0..spec.n_domains)
        .map(|dom| {
            let style = StyleMap::draw(
                d,
                spec.style_strength,
                &mut stream(spec.seed, &[rng::TAG_STYLE, dom as u64]),
            );
            let mut srng = stream(spec.seed, &[rng::TAG_SAMPLES, dom as u64]);
            let mut nrng = stream(spec.seed, &[rng::TAG_LABEL_NOISE, dom as u64]);
            (0..spec.samples_per_domain)
                .map(|i| {
                    let class = i % spec.n_classes;
                    let mut x = style.apply(&anchors[class]);
                    for v in x.iter_mut() {
                        *v += spec.noise_std * srng.sample::<f64, _>(StandardNormal);
                    }
                    let mut y = class;
                    if spec.label_noise > 0.0 && nrng.gen_bool(spec.label_noise) {
                        y = (class + nrng.gen_range(1..spec.n_classes)) % spec.n_classes;
                    }
                    Sample { x, y, domain: dom }
                })
                .collect()
        })
        .collect();
    let mut all: Vec<&mut Sample> = domains.iter_mut().flatten().collect();
    normalize_min_max(&mut all);
    Ok(domains)
}

/// Per-coordinate min-max normalization to `[0, 1]`; constant coordinates map to 0.
fn normalize_min_max(samples: &mut [&mut Sample]) {
    let Some(first) = samples.first() else { return };
    let d = first.x.len();
    for j in 0..d {
        let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.x[j]), hi.max(s.x[j]))
        });
        let span = hi - lo;
        for s in samples.iter_mut() {
            s.x[j] = if span > 0.0 { (s.x[j] - lo) / span } else { 0.0 };
        }
    }
}

/// Stratified 9:1 split. Within each class, samples are shuffled with a
/// stream keyed by `(seed, domain)` and `round(n_class / 10)` go to validation
/// (at least one). Both halves keep the original sample order.
pub fn split_domain(domain: usize, samples: Vec<Sample>, seed: u64) -> Result<DomainDataset> {
    if samples.len() < MIN_DOMAIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "domain {domain} has {} samples; at least {MIN_DOMAIN_SAMPLES} required",
            samples.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.y).or_default().push(i);
    }
    let mut rng = stream(seed, &[rng::TAG_SPLIT, domain as u64]);
    let mut is_val = vec![false; samples.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = if idx.len() >= 2 {
            ((idx.len() as f64 / 10.0).round() as usize).max(1)
        } else {
            0
        };
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "domain {domain} split left an empty half"
        )));
    }
    Ok(DomainDataset { domain, train, val })
}

pub fn make_benchmark(spec: &BenchSpec) -> Result<Vec<DomainDataset>> {
    generate_domains(spec)?
        .into_iter()
        .enumerate()
        .map(|(d, samples)| split_domain(d, samples, spec.split_seed()))
        .collect()
}

/// Header for `d` feature columns: `domain,label,f0,...,f{d-1}`.
pub fn csv_header(d: usize) -> String {
    let mut h = String::from("domain,label");
    for j in 0..d {
        h.push_str(&format!(",f{j}"));
    }
    h
}

/// Writes samples in the benchmark CSV schema. Values use the shortest
/// representation that round-trips exactly.
pub fn write_csv<'a, W, I>(mut out: W, input_dim: usize, samples: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Sample>,
{
    writeln!(out, "{}", csv_header(input_dim))?;
    for s in samples {
        let mut line = format!("{},{}", s.domain, s.y);
        for v in &s.x {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_benchmark(spec: &BenchSpec, path: &Path) -> Result<()> {
    let domains = generate_domains(spec)?;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(file, spec.input_dim, domains.iter().flatten())
}

/// Parses the benchmark CSV schema, normalizes features per coordinate over
/// the whole file, and splits each domain 9:1 with `split_seed`.
pub fn read_csv<R: Read>(reader: R, origin: &Path, split_seed: u64) -> Result<Vec<DomainDataset>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let d = cols.len().saturating_sub(2);
    if d == 0 || cols.join(",") != csv_header(d) {
        return Err(parse_err(1, format!("header must be `{}`", csv_header(d.max(1)))));
    }
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 2, rec.len()),
            ));
        }
        let int = |k: usize, what: &str| -> Result<usize> {
            rec[k]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("{what} `{}` is not a nonnegative integer", &rec[k])))
        };
        let domain = int(0, "domain")?;
        let y = int(1, "label")?;
        let x = (2..d + 2)
            .map(|k| match rec[k].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(line, format!("feature `{}` is not a finite number", &rec[k]))),
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { x, y, domain });
    }
    let labels: BTreeSet<usize> = samples.iter().map(|s| s.y).collect();
    if labels.iter().enumerate().any(|(i, &l)| i != l) {
        return Err(Error::InvalidArgument(format!(
            "labels must be contiguous integers from 0, found {labels:?}"
        )));
    }
    {
        let mut refs: Vec<&mut Sample> = samples.iter_mut().collect();
        normalize_min_max(&mut refs);
    }
    let mut grouped: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.domain).or_default().push(s);
    }
    grouped
        .into_iter()
        .map(|(dom, s)| split_domain(dom, s, split_seed))
        .collect()
}

pub fn load_csv(path: &Path, split_seed: u64) -> Result<Vec<DomainDataset>> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), path, split_seed)
}
