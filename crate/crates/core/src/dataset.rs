//! Paired clean/noisy patch sets and their on-disk layout.
//!
//! A dataset directory holds `manifest.txt` plus `pair_<idx>_clean.f32` and
//! `pair_<idx>_noisy.f32` for every index. Each patch file is the raw
//! `3×H×W` tensor in `(C, H, W)` order as little-endian `f32`, without a
//! header; the shape lives in the manifest's `shape` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::noise::{darken_enhance, gen_clean_patch, EnhanceParams, NoiseParams};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET_VERSION: u32 = 1;

/// Everything needed to regenerate a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub noise: NoiseParams,
    pub enhance: EnhanceParams,
}

impl DatasetSpec {
    /// Noise and capture settings of the reference synthetic benchmark.
    pub fn standard(count: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            height: size,
            width: size,
            noise: NoiseParams { a: 0.02, b: 5e-4, seed },
            enhance: EnhanceParams { gain: 0.3, gamma: 2.2 },
        }
    }
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: ImagePatch,
    pub noisy: ImagePatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub pairs: Vec<Pair>,
}

/// Pair `index` of `spec`: clean seed `derive_seed(seed, 2i)`, noise seed `derive_seed(seed, 2i + 1)`.
pub fn gen_pair(spec: &DatasetSpec, index: usize) -> Result<Pair> {
    let base = spec.noise.seed;
    let clean = gen_clean_patch(spec.height, spec.width, derive_seed(base, 2 * index as u64))?;
    let np = spec.noise.with_seed(derive_seed(base, 2 * index as u64 + 1));
    let (_, noisy) = darken_enhance(&clean, &np, &spec.enhance)?;
    Ok(Pair { clean, noisy })
}

impl Dataset {
    pub fn generate(spec: DatasetSpec) -> Result<Self> {
        spec.noise.validate()?;
        spec.enhance.validate()?;
        let pairs = (0..spec.count).map(|i| gen_pair(&spec, i)).collect::<Result<_>>()?;
        Ok(Self { spec, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = &self.spec;
        let mut m = String::new();
        let _ = writeln!(m, "format = cgd-dataset");
        let _ = writeln!(m, "version = {DATASET_VERSION}");
        let _ = writeln!(m, "count = {}", self.pairs.len());
        let _ = writeln!(m, "shape = 3 {} {}", s.height, s.width);
        let _ = writeln!(m, "dtype = f32le");
        let _ = writeln!(m, "layout = CHW");
        let _ = writeln!(m, "noise_a = {}", s.noise.a);
        let _ = writeln!(m, "noise_b = {}", s.noise.b);
        let _ = writeln!(m, "seed = {}", s.noise.seed);
        let _ = writeln!(m, "gain = {}", s.enhance.gain);
        let _ = writeln!(m, "gamma = {}", s.enhance.gamma);
        fs::write(dir.join(MANIFEST), m)?;
        for (i, p) in self.pairs.iter().enumerate() {
            write_f32(&dir.join(format!("pair_{i}_clean.f32")), p.clean.data())?;
            write_f32(&dir.join(format!("pair_{i}_noisy.f32")), p.noisy.data())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let spec = read_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let shape = [3, spec.height, spec.width];
        let load = |name: String| -> Result<ImagePatch> {
            let data = read_f32(&dir.join(&name))?;
            if data.len() != 3 * spec.height * spec.width {
                return Err(Error::format(name, format!("{} values for shape {shape:?}", data.len())));
            }
            ImagePatch::new(Tensor::new(&shape, data)?).map_err(|e| Error::format(name, e.to_string()))
        };
        let pairs = (0..spec.count)
            .map(|i| {
                Ok(Pair {
                    clean: load(format!("pair_{i}_clean.f32"))?,
                    noisy: load(format!("pair_{i}_noisy.f32"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, pairs })
    }
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path.display().to_string(), "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_manifest(text: &str) -> Result<DatasetSpec> {
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("manifest", format!("malformed line `{line}`")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(k, "missing"));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse().map_err(|e: T::Err| Error::format(k, e.to_string()))
    }
    if get("format")? != "cgd-dataset" {
        return Err(Error::format("format", "not a cgd dataset"));
    }
    let version: u32 = num("version", get("version")?)?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, expected: DATASET_VERSION });
    }
    for (k, want) in [("dtype", "f32le"), ("layout", "CHW")] {
        if get(k)? != want {
            return Err(Error::format(k, format!("unsupported value, expected {want}")));
        }
    }
    let dims = get("shape")?
        .split_whitespace()
        .map(|d| num::<usize>("shape", d))
        .collect::<Result<Vec<_>>>()?;
    let &[3, height, width] = dims.as_slice() else {
        return Err(Error::format("shape", format!("expected `3 H W`, got {dims:?}")));
    };
    let noise = NoiseParams {
        a: num("noise_a", get("noise_a")?)?,
        b: num("noise_b", get("noise_b")?)?,
        seed: num("seed", get("seed")?)?,
    };
    noise.validate().map_err(|e| Error::format("noise_a/noise_b", e.to_string()))?;
    let enhance = EnhanceParams {
        gain: num("gain", get("gain")?)?,
        gamma: num("gamma", get("gamma")?)?,
    };
    enhance.validate().map_err(|e| Error::format("gain/gamma", e.to_string()))?;
    Ok(DatasetSpec {
        count: num("count", get("count")?)?,
        height,
        width,
        noise,
        enhance,
    })
}
