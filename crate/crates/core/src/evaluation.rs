//! Sliced Wasserstein scores over Laplacian-pyramid patch descriptors, and
//! cosine nearest-neighbour retrieval over flattened embeddings.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use twingan_autograd::Tensor;

use crate::data::load_folder;
use crate::error::{Error, Result};
use crate::rng;

/// A stack of square planes in f64, `n × c × size × size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub n: usize,
    pub c: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if h != w {
            return Err(Error::Contract(format!("images must be square, got {h}x{w}")));
        }
        Ok(Self {
            n,
            c,
            size: h,
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    fn plane(&self, i: usize) -> &[f64] {
        let s2 = self.size * self.size;
        &self.data[i * s2..(i + 1) * s2]
    }

    /// 2×2 box average.
    pub fn downsample(&self) -> Self {
        let (s, h) = (self.size, self.size / 2);
        let mut data = Vec::with_capacity(self.n * self.c * h * h);
        for p in 0..self.n * self.c {
            let src = self.plane(p);
            for y in 0..h {
                for x in 0..h {
                    let (a, b) = (src[2 * y * s + 2 * x], src[2 * y * s + 2 * x + 1]);
                    let (c, d) = (src[(2 * y + 1) * s + 2 * x], src[(2 * y + 1) * s + 2 * x + 1]);
                    data.push((a + b + c + d) * 0.25);
                }
            }
        }
        Self {
            size: h,
            data,
            ..*self
        }
    }

    /// Nearest-neighbour 2× upsample.
    pub fn upsample(&self) -> Self {
        let (s, d) = (self.size, self.size * 2);
        let mut data = Vec::with_capacity(self.n * self.c * d * d);
        for p in 0..self.n * self.c {
            let src = self.plane(p);
            for y in 0..d {
                for x in 0..d {
                    data.push(src[(y / 2) * s + x / 2]);
                }
            }
        }
        Self {
            size: d,
            data,
            ..*self
        }
    }

    fn sub(&self, other: &Self) -> Self {
        Self {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..*self
        }
    }
}

/// Detail bands at the requested resolutions, highest first; the lowest
/// requested level holds the low-pass base instead of a detail band.
pub fn laplacian_pyramid(images: &Planes, levels: &[usize]) -> Result<Vec<Planes>> {
    let mut wanted: Vec<usize> = levels.to_vec();
    wanted.sort_unstable_by(|a, b| b.cmp(a));
    wanted.dedup();
    let Some(&lowest) = wanted.last() else {
        return Ok(Vec::new());
    };
    for &l in &wanted {
        if l > images.size || !l.is_power_of_two() || !images.size.is_multiple_of(l) {
            return Err(Error::Contract(format!(
                "pyramid level {l} is not reachable from {}",
                images.size
            )));
        }
    }
    let mut gauss = images.clone();
    let mut out = Vec::with_capacity(wanted.len());
    for &l in &wanted {
        while gauss.size > l {
            gauss = gauss.downsample();
        }
        if l == lowest {
            out.push(gauss.clone());
        } else {
            out.push(gauss.sub(&gauss.downsample().upsample()));
        }
    }
    Ok(out)
}

/// Row-major descriptor matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl Descriptors {
    pub fn len(&self) -> usize {
        self.rows.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            dim: rows.first().map_or(0, Vec::len),
            rows: rows.concat(),
        }
    }
}

/// Random `patch × patch × c` descriptors, each standardized per channel.
pub fn extract_descriptors(band: &Planes, per_image: usize, patch: usize, rng: &mut impl Rng) -> Result<Descriptors> {
    if band.size < patch {
        return Err(Error::Contract(format!("{patch}px patches do not fit {}px level", band.size)));
    }
    let (s, c) = (band.size, band.c);
    let dim = patch * patch * c;
    let mut rows = Vec::with_capacity(band.n * per_image * dim);
    for img in 0..band.n {
        for _ in 0..per_image {
            let y0 = rng.gen_range(0..=s - patch);
            let x0 = rng.gen_range(0..=s - patch);
            for ch in 0..c {
                let plane = band.plane(img * c + ch);
                let start = rows.len();
                for y in 0..patch {
                    rows.extend_from_slice(&plane[(y0 + y) * s + x0..(y0 + y) * s + x0 + patch]);
                }
                let vals = &mut rows[start..];
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                for v in vals.iter_mut() {
                    *v = if sd > 0.0 { (*v - m) / sd } else { 0.0 };
                }
            }
        }
    }
    Ok(Descriptors { dim, rows })
}

/// Unit-length random directions, `n × dim`.
pub fn random_projections(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn subsample(d: &Descriptors, n: usize, rng: &mut impl Rng) -> Descriptors {
    if d.len() == n {
        return d.clone();
    }
    let mut idx = sample(rng, d.len(), n).into_vec();
    idx.sort_unstable();
    Descriptors {
        dim: d.dim,
        rows: idx.iter().flat_map(|&i| d.row(i).iter().copied()).collect(),
    }
}

/// Mean over directions of the 1-D Wasserstein-1 distance between projections.
/// The larger set is randomly subsampled to the size of the smaller.
pub fn sliced_wasserstein_with(
    a: &Descriptors,
    b: &Descriptors,
    projections: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Contract(format!(
            "descriptor dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("descriptor sets must be non-empty".into()));
    }
    let n = a.len().min(b.len());
    let (a, b) = (subsample(a, n, rng), subsample(b, n, rng));
    let project = |d: &Descriptors, p: &[f64]| {
        let mut v: Vec<f64> = (0..n).map(|i| d.row(i).iter().zip(p).map(|(x, y)| x * y).sum()).collect();
        v.sort_unstable_by(f64::total_cmp);
        v
    };
    let mut total = 0.0;
    for p in projections {
        let (pa, pb) = (project(&a, p), project(&b, p));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / projections.len().max(1) as f64)
}

pub fn sliced_wasserstein(a: &Descriptors, b: &Descriptors, n_projections: usize, rng: &mut impl Rng) -> Result<f64> {
    let proj = random_projections(a.dim, n_projections, rng);
    sliced_wasserstein_with(a, b, &proj, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwdConfig {
    pub levels: Vec<usize>,
    pub patch_size: usize,
    pub descriptors_per_image: usize,
    pub n_projections: usize,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            levels: vec![16, 32],
            patch_size: 7,
            descriptors_per_image: 64,
            n_projections: 128,
            n_images: 256,
            seed: 0,
        }
    }
}

impl SwdConfig {
    pub fn resolution(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }
}

/// Per-level distances, scaled by 10³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwdReport {
    pub levels: Vec<(usize, f64)>,
    pub average: f64,
}

impl SwdReport {
    pub fn new(levels: Vec<(usize, f64)>) -> Self {
        let average = levels.iter().map(|(_, v)| v).sum::<f64>() / levels.len().max(1) as f64;
        Self { levels, average }
    }
}

fn pick_images(images: &Tensor, n: usize, rng: &mut impl Rng) -> Tensor {
    let total = images.shape()[0];
    if total <= n {
        if total < n {
            log::warn!("only {total} images available, {n} requested");
        }
        return images.clone();
    }
    let mut idx = sample(rng, total, n).into_vec();
    idx.sort_unstable();
    Tensor::stack(&idx.iter().map(|&i| images.select(i)).collect::<Vec<_>>())
}

/// Scores two image batches `[n, 3, r, r]` with `r` equal to the highest level.
pub fn swd_images(a: &Tensor, b: &Tensor, cfg: &SwdConfig) -> Result<SwdReport> {
    let a = pick_images(a, cfg.n_images, &mut rng::stream(cfg.seed, "swd-pick", 0));
    let b = pick_images(b, cfg.n_images, &mut rng::stream(cfg.seed, "swd-pick", 0));
    let pa = laplacian_pyramid(&Planes::from_tensor(&a)?, &cfg.levels)?;
    let pb = laplacian_pyramid(&Planes::from_tensor(&b)?, &cfg.levels)?;
    let mut sorted = cfg.levels.clone();
    sorted.sort_unstable_by(|x, y| y.cmp(x));
    sorted.dedup();
    let mut levels = Vec::with_capacity(sorted.len());
    for ((band_a, band_b), &level) in pa.iter().zip(&pb).zip(&sorted) {
        let l = level as u64;
        let da = extract_descriptors(band_a, cfg.descriptors_per_image, cfg.patch_size, &mut rng::stream(cfg.seed, "swd-patches", l))?;
        let db = extract_descriptors(band_b, cfg.descriptors_per_image, cfg.patch_size, &mut rng::stream(cfg.seed, "swd-patches", l))?;
        let mut prng = rng::stream(cfg.seed, "swd-projections", l);
        let proj = random_projections(da.dim, cfg.n_projections, &mut prng);
        let d = sliced_wasserstein_with(&da, &db, &proj, &mut prng)?;
        levels.push((level, d * 1e3));
    }
    levels.sort_by_key(|(l, _)| *l);
    Ok(SwdReport::new(levels))
}

pub fn swd_score(dir_a: &Path, dir_b: &Path, cfg: &SwdConfig) -> Result<SwdReport> {
    let r = cfg.resolution();
    let a = load_folder(dir_a, r)?;
    let b = load_folder(dir_b, r)?;
    swd_images(&Tensor::stack(&a.images), &Tensor::stack(&b.images), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedVariance {
    pub reports: Vec<SwdReport>,
    pub mean: f64,
    pub std: f64,
    /// Standard deviation above 10% of the mean.
    pub flagged: bool,
}

/// Repeats the average score over several seeds.
pub fn swd_seed_variance(a: &Tensor, b: &Tensor, cfg: &SwdConfig, seeds: &[u64]) -> Result<SeedVariance> {
    let reports = seeds
        .iter()
        .map(|&seed| swd_images(a, b, &SwdConfig { seed, ..cfg.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let avgs: Vec<f64> = reports.iter().map(|r| r.average).collect();
    let mean = avgs.iter().sum::<f64>() / avgs.len().max(1) as f64;
    let std = (avgs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / avgs.len().max(1) as f64).sqrt();
    Ok(SeedVariance {
        reports,
        mean,
        std,
        flagged: std > 0.1 * mean,
    })
}

/// Fixed-width table: model name, one column per level, then the average.
pub fn format_table(rows: &[(String, SwdReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let _ = write!(out, "{:<16}", "model");
    for (l, _) in &first.levels {
        let _ = write!(out, " {:>8}", l);
    }
    let _ = writeln!(out, " {:>8}", "average");
    for (name, r) in rows {
        let _ = write!(out, "{name:<16}");
        for (_, v) in &r.levels {
            let _ = write!(out, " {v:>8.2}");
        }
        let _ = writeln!(out, " {:>8.2}", r.average);
    }
    out
}

pub fn to_csv(rows: &[(String, SwdReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    out.push_str("model");
    for (l, _) in &first.levels {
        let _ = write!(out, ",{l}");
    }
    out.push_str(",average\n");
    for (name, r) in rows {
        out.push_str(name);
        for (_, v) in &r.levels {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.average);
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<(String, SwdReport)>> {
    let bad = |m: &str| Error::Contract(format!("malformed score table: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split(',').collect();
    if header.len() < 2 || header[0] != "model" || header[header.len() - 1] != "average" {
        return Err(bad("header"));
    }
    let levels: Vec<usize> = header[1..header.len() - 1]
        .iter()
        .map(|h| h.parse().map_err(|_| bad(h)))
        .collect::<Result<_>>()?;
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(line));
            }
            let vals: Vec<f64> = f[1..].iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?;
            let report = SwdReport {
                levels: levels.iter().copied().zip(vals.iter().copied()).collect(),
                average: vals[vals.len() - 1],
            };
            Ok((f[0].to_string(), report))
        })
        .collect()
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// For each query, `(corpus index, distance)` pairs ranked from most to least similar.
/// Zero-norm corpus vectors are left out.
pub fn nn_search(queries: &[Vec<f32>], corpus: &[Vec<f32>], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let dim = queries.first().or(corpus.first()).map_or(0, Vec::len);
    if queries.iter().chain(corpus).any(|v| v.len() != dim) {
        return Err(Error::Contract("embeddings have different lengths".into()));
    }
    let live: Vec<usize> = (0..corpus.len()).filter(|&i| norm(&corpus[i]) > 0.0).collect();
    if live.len() < corpus.len() {
        log::warn!("{} zero-norm corpus embeddings excluded", corpus.len() - live.len());
    }
    if k > live.len() {
        log::warn!("k = {k} exceeds corpus size {}; returning full ranking", live.len());
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut ranked: Vec<(usize, f64)> = live.iter().map(|&i| (i, cosine_distance(q, &corpus[i]))).collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// Fraction of queries whose top-ranked corpus item is their ground-truth partner.
pub fn top1_accuracy(rankings: &[Vec<(usize, f64)>], truth: impl Fn(usize) -> usize) -> f64 {
    let hits = rankings
        .iter()
        .enumerate()
        .filter(|(q, r)| r.first().is_some_and(|(i, _)| *i == truth(*q)))
        .count();
    hits as f64 / rankings.len().max(1) as f64
}

/// Held-out R² of a ridge regression from features to a scalar target.
/// The first `train` rows fit the model; the rest score it.
pub fn ridge_readout_r2(features: &[Vec<f32>], target: &[f64], train: usize, lambda: f64) -> Result<f64> {
    let n = features.len();
    if n != target.len() || train == 0 || train >= n {
        return Err(Error::Contract("readout needs matching rows and a non-empty held-out split".into()));
    }
    let d = features[0].len();
    let x = |i: usize, j: usize| if j == d { 1.0 } else { features[i][j] as f64 };
    let xt = DMatrix::from_fn(train, d + 1, &x);
    let yt = DVector::from_fn(train, |i, _| target[i]);
    let mut gram = xt.transpose() * &xt;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xt.transpose() * yt;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Contract("readout system is not positive definite".into()))?
        .solve(&rhs);
    let held: Vec<usize> = (train..n).collect();
    let mean = held.iter().map(|&i| target[i]).sum::<f64>() / held.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &i in &held {
        let pred: f64 = (0..=d).map(|j| x(i, j) * w[j]).sum();
        ss_res += (target[i] - pred).powi(2);
        ss_tot += (target[i] - mean).powi(2);
    }
    Ok(1.0 - ss_res / ss_tot.max(f64::MIN_POSITIVE))
}
