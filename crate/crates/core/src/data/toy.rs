//! Procedural two-domain shapes for small-scale experiments.
//!
//! Every sample index draws one attribute tuple. Domain A renders it as a
//! filled ellipse on a light background; domain B as a hexagon outline on a
//! dark striped background.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::augment::hsv_to_rgb;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyAttributes {
    pub index: usize,
    pub hue: f32,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

pub fn attributes(seed: u64, index: usize) -> ToyAttributes {
    let mut r = rng::stream(seed, "toy", index as u64);
    ToyAttributes {
        index,
        hue: r.gen_range(0.0..1.0),
        cx: r.gen_range(0.3..=0.7),
        cy: r.gen_range(0.3..=0.7),
        radius: r.gen_range(0.15..=0.4),
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders one sample as interleaved RGB bytes.
pub fn render(attrs: &ToyAttributes, domain: DomainId, size: usize) -> Vec<u8> {
    let s = size as f32;
    let (cx, cy, rad) = (attrs.cx * s, attrs.cy * s, attrs.radius * s);
    let mut out = Vec::with_capacity(size * size * 3);
    let (fg, line) = match domain {
        DomainId::A => (hsv_to_rgb(attrs.hue, 0.8, 0.9), 0.0),
        DomainId::B => (hsv_to_rgb(attrs.hue, 0.9, 1.0), (0.09 * s).max(1.0)),
    };
    let apothem = 3f32.sqrt() / 2.0;
    let in_hex = |dx: f32, dy: f32, r: f32| {
        let (ax, ay) = (dx.abs(), dy.abs());
        ay <= apothem * r && ax * apothem + ay * 0.5 <= apothem * r
    };
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let (dx, dy) = (x - cx, y - cy);
                    let hit = match domain {
                        DomainId::A => {
                            let (ex, ey) = (dx / rad, dy / (0.75 * rad));
                            ex * ex + ey * ey <= 1.0
                        }
                        DomainId::B => in_hex(dx, dy, rad) && !in_hex(dx, dy, rad - line),
                    };
                    if hit {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let bg = match domain {
                DomainId::A => (0.92, 0.92, 0.92),
                DomainId::B => {
                    let period = (s / 5.0).max(2.0);
                    let band = ((px + py) as f32 / period).floor() as i64 % 2 == 0;
                    if band {
                        (0.12, 0.12, 0.15)
                    } else {
                        (0.22, 0.22, 0.26)
                    }
                }
            };
            for (f, b) in [(fg.0, bg.0), (fg.1, bg.1), (fg.2, bg.2)] {
                let v = f * cover + b * (1.0 - cover);
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn check_empty_or_force(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::PathNotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `n_samples` PNGs and a manifest of their attributes into `dir`.
pub fn make_toy(spec: &ToySpec, domain: DomainId, dir: &Path, force: bool) -> Result<Vec<ToyAttributes>> {
    if spec.image_size < 4 {
        return Err(Error::Config("toy image size must be at least 4".into()));
    }
    check_empty_or_force(dir, force)?;
    let mut manifest = String::new();
    let mut all = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let a = attributes(spec.seed, i);
        let bytes = render(&a, domain, spec.image_size);
        let size = spec.image_size as u32;
        image::save_buffer(
            dir.join(format!("{i:05}.png")),
            &bytes,
            size,
            size,
            image::ColorType::Rgb8,
        )?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", a.index, a.hue, a.cx, a.cy, a.radius));
        all.push(a);
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    Ok(all)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ToyAttributes>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| Error::Config(format!("malformed manifest line `{line}`"));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| bad(line));
            Ok(ToyAttributes {
                index: f[0].parse().map_err(|_| bad(line))?,
                hue: num(f[1])?,
                cx: num(f[2])?,
                cy: num(f[3])?,
                radius: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attributes_are_pure_and_in_range() {
        for i in 0..200 {
            let a = attributes(42, i);
            assert_eq!(a, attributes(42, i));
            assert!((0.0..1.0).contains(&a.hue));
            assert!((0.3..=0.7).contains(&a.cx) && (0.3..=0.7).contains(&a.cy));
            assert!((0.15..=0.4).contains(&a.radius));
        }
        assert_ne!(attributes(42, 0), attributes(43, 0));
    }

    #[test]
    fn domains_look_different() {
        let a = attributes(1, 0);
        let ia = render(&a, DomainId::A, 32);
        let ib = render(&a, DomainId::B, 32);
        let mean = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!(mean(&ia) > mean(&ib) + 60.0, "A is light, B is dark");
        assert_eq!(ia, render(&a, DomainId::A, 32));
    }

    #[test]
    fn writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a");
        let spec = ToySpec {
            n_samples: 5,
            image_size: 16,
            seed: 3,
        };
        let attrs = make_toy(&spec, DomainId::A, &out, false).unwrap();
        let pngs = fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 5);
        assert_eq!(read_manifest(&out.join(MANIFEST)).unwrap(), attrs);
        assert!(matches!(
            make_toy(&spec, DomainId::A, &out, false),
            Err(Error::PathNotEmpty(_))
        ));
        make_toy(&spec, DomainId::A, &out, true).unwrap();
    }
}
