//! Observational datasets drawn from the ground-truth SCMs, and their CSV form.
//!
//! A dataset is a CSV file with header `x_0..x_{d-1},y_0..y_{2d-1}` plus
//! `c_*`/`n_*` columns when latents are kept, and a JSON sidecar at
//! `<path>.meta.json`. Values are written with Rust's shortest round-trip
//! float formatting, so reading back is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Domain, GroundTruthScm, ScmDims};
use crate::error::{Error, Result};
use crate::rng;
use crate::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub domain: Domain,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub with_latents: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `[n x d]`
    pub x: Tensor,
    /// `[n x 2d]`
    pub y: Tensor,
    /// `([n x d], [n x d])` contexts and noises, when kept.
    pub latents: Option<(Tensor, Tensor)>,
}

/// Draw `n` i.i.d. samples from the domain's SCM.
///
/// Row `i` consumes the prior draws `x, c, n` in order from a stream seeded
/// by `seed` and the domain, so the output is a pure function of the arguments.
pub fn generate_dataset(
    domain: Domain,
    n: usize,
    dims: ScmDims,
    seed: u64,
    with_latents: bool,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let scm = GroundTruthScm::new(dims);
    let d = dims.d;
    let stream = rng::streams::DATA * 2 + matches!(domain, Domain::Target) as u64;
    let mut rng = rng::stream(seed, stream);
    let (mut xs, mut ys, mut cs, mut ns) = (
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * 2 * d),
        Vec::new(),
        Vec::new(),
    );
    for _ in 0..n {
        let t = scm.sample_prior(domain, &mut rng);
        let y = scm.mechanism(domain, &t.x, &t.c, &t.n)?;
        xs.extend_from_slice(&t.x);
        ys.extend_from_slice(&y);
        if with_latents {
            cs.extend_from_slice(&t.c);
            ns.extend_from_slice(&t.n);
        }
    }
    let latents = if with_latents {
        Some((Tensor::matrix(n, d, cs)?, Tensor::matrix(n, d, ns)?))
    } else {
        None
    };
    Ok(Dataset {
        meta: DatasetMeta {
            schema_version: DATASET_SCHEMA_VERSION,
            domain,
            d,
            n,
            seed,
            with_latents,
        },
        x: Tensor::matrix(n, d, xs)?,
        y: Tensor::matrix(n, 2 * d, ys)?,
        latents,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn header(d: usize, with_latents: bool) -> Vec<String> {
    let mut h: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    h.extend((0..2 * d).map(|i| format!("y_{i}")));
    if with_latents {
        h.extend((0..d).map(|i| format!("c_{i}")));
        h.extend((0..d).map(|i| format!("n_{i}")));
    }
    h
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    /// Write the CSV and its sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(header(d, self.latents.is_some()))
            .map_err(io_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.extend(self.y.row(i).iter().map(|v| v.to_string()));
            if let Some((c, n)) = &self.latents {
                rec.extend(c.row(i).iter().map(|v| v.to_string()));
                rec.extend(n.row(i).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("plain struct serializes");
        let side = sidecar_path(path);
        fs::write(&side, meta + "\n").map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    /// Read a dataset and validate it against its sidecar.
    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::parse(side.display().to_string(), e))?;
        if meta.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: DATASET_SCHEMA_VERSION,
                found: meta.schema_version,
            });
        }
        let d = meta.d;
        let ctx = path.display().to_string();
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let hdr: Vec<String> = r
            .headers()
            .map_err(|e| Error::parse(&ctx, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if hdr != header(d, meta.with_latents) {
            return Err(Error::parse(&ctx, format!("unexpected header {hdr:?} for d={d}")));
        }
        let width = hdr.len();
        let (mut xs, mut ys, mut cs, mut ns) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(&ctx, e))?;
            if rec.len() != width {
                return Err(Error::parse(&ctx, format!("row {} has {} fields", line + 1, rec.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(&ctx, format!("row {}: {e}", line + 1)))?;
            xs.extend_from_slice(&vals[..d]);
            ys.extend_from_slice(&vals[d..3 * d]);
            if meta.with_latents {
                cs.extend_from_slice(&vals[3 * d..4 * d]);
                ns.extend_from_slice(&vals[4 * d..5 * d]);
            }
            rows += 1;
        }
        if rows != meta.n {
            return Err(Error::parse(&ctx, format!("{rows} rows but sidecar says {}", meta.n)));
        }
        let latents = if meta.with_latents {
            Some((Tensor::matrix(rows, d, cs)?, Tensor::matrix(rows, d, ns)?))
        } else {
            None
        };
        Ok(Self {
            x: Tensor::matrix(rows, d, xs)?,
            y: Tensor::matrix(rows, 2 * d, ys)?,
            latents,
            meta,
        })
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let take = |t: &Tensor| {
            let c = t.cols();
            Tensor::matrix(n, c, t.data()[..n * c].to_vec())
        };
        let latents = match &self.latents {
            Some((c, z)) => Some((take(c)?, take(z)?)),
            None => None,
        };
        Ok(Self {
            meta: DatasetMeta {
                n,
                ..self.meta.clone()
            },
            x: take(&self.x)?,
            y: take(&self.y)?,
            latents,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latents_reproduce_effects() {
        let ds = generate_dataset(Domain::Source, 200, ScmDims::new(2).unwrap(), 7, true).unwrap();
        let scm = GroundTruthScm::new(ScmDims::new(2).unwrap());
        let (c, n) = ds.latents.as_ref().unwrap();
        for i in 0..ds.len() {
            let y = scm.source_mechanism(ds.x.row(i), c.row(i), n.row(i)).unwrap();
            assert_eq!(y.as_slice(), ds.y.row(i));
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let ds = generate_dataset(Domain::Target, 50, ScmDims::new(2).unwrap(), 1, true).unwrap();
        ds.write(&p).unwrap();
        let back = Dataset::read(&p).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn target_schema() {
        let ds = generate_dataset(Domain::Target, 10, ScmDims::new(2).unwrap(), 1, false).unwrap();
        assert_eq!(ds.x.shape(), &[10, 2]);
        assert_eq!(ds.y.shape(), &[10, 4]);
        assert!(ds.x.data().iter().all(|v| v.abs() <= 1.0));
        assert!(ds.latents.is_none());
    }

    #[test]
    fn zero_rows_rejected() {
        assert!(generate_dataset(Domain::Source, 0, ScmDims::new(1).unwrap(), 1, false).is_err());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let ds = generate_dataset(Domain::Source, 20, ScmDims::new(1).unwrap(), 3, false).unwrap();
        ds.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Dataset::read(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = Dataset::read(Path::new("/nonexistent/data.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.csv"));
    }
}
