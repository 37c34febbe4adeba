//! Seeded Gaussian-mixture data with several clusters per class, semantic
//! sub-labels per cluster and a parametric domain shift.

use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{csv_err, Class};
use crate::linalg::Matrix;

/// Isotropic Gaussian component of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub std: f64,
    /// Mixing weight within its class.
    pub weight: f64,
    /// 0 means "no attack" and is used by Live clusters.
    pub spoof_type: usize,
    pub illum: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    /// Probability that a sample is Live.
    pub live_fraction: f64,
    /// Clusters per class, indexed by [`Class::index`].
    pub classes: [Vec<Cluster>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: Class,
    pub spoof_type: usize,
    pub illum: usize,
    /// Global cluster id: Live clusters first, then Spoof clusters.
    pub cluster: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("mixture dimension must be positive"));
        }
        if !(0.0..=1.0).contains(&self.live_fraction) {
            return Err(Error::config("live_fraction must lie in [0, 1]"));
        }
        for class in Class::ALL {
            let clusters = &self.classes[class.index()];
            if clusters.is_empty() {
                return Err(Error::config(format!("{class} class has no clusters")));
            }
            let total: f64 = clusters.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{class} cluster weights sum to {total}, expected 1")));
            }
            for (k, c) in clusters.iter().enumerate() {
                if c.mean.len() != self.dim {
                    return Err(Error::config(format!("{class} cluster {k} mean has wrong dimension")));
                }
                if !(c.std > 0.0) || !c.std.is_finite() {
                    return Err(Error::config(format!("{class} cluster {k} std must be positive")));
                }
                if c.weight < 0.0 {
                    return Err(Error::config(format!("{class} cluster {k} has negative weight")));
                }
            }
        }
        Ok(())
    }

    /// Maps a global cluster id to its class and within-class index.
    pub fn locate(&self, cluster: usize) -> Option<(Class, usize)> {
        let n_live = self.classes[0].len();
        if cluster < n_live {
            Some((Class::Live, cluster))
        } else if cluster < n_live + self.classes[1].len() {
            Some((Class::Spoof, cluster - n_live))
        } else {
            None
        }
    }

    pub fn cluster(&self, id: usize) -> Option<&Cluster> {
        self.locate(id).map(|(c, k)| &self.classes[c.index()][k])
    }

    pub fn n_clusters(&self) -> usize {
        self.classes[0].len() + self.classes[1].len()
    }

    pub fn n_spoof_types(&self) -> usize {
        self.classes.iter().flatten().map(|c| c.spoof_type + 1).max().unwrap_or(1)
    }

    pub fn n_illum(&self) -> usize {
        self.classes.iter().flatten().map(|c| c.illum + 1).max().unwrap_or(1)
    }
}

/// Standard normal draws by the Box-Muller transform of two uniforms,
/// `sqrt(-2 ln u1)·(cos 2πu2, sin 2πu2)` with `u1 ∈ (0, 1]`; the sine half is
/// kept for the next call.
struct BoxMuller {
    spare: Option<f64>,
}

impl BoxMuller {
    fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = BoxMuller { spare: None };
    let offset = [0, spec.classes[0].len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y = if rng.gen::<f64>() < spec.live_fraction { Class::Live } else { Class::Spoof };
        let clusters = &spec.classes[y.index()];
        let u = rng.gen::<f64>();
        let mut acc = 0.0;
        let mut k = clusters.len() - 1;
        for (i, c) in clusters.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &clusters[k];
        let x = c.mean.iter().map(|m| m + c.std * normal.sample(&mut rng)).collect();
        out.push(LabeledSample { x, y, spoof_type: c.spoof_type, illum: c.illum, cluster: offset[y.index()] + k });
    }
    Ok(out)
}

/// Translates every cluster mean and multiplies every std.
pub fn shift_domain(spec: &MixtureSpec, translation: &[f64], std_scale: f64) -> Result<MixtureSpec> {
    if translation.len() != spec.dim {
        return Err(Error::config("translation dimension does not match the mixture"));
    }
    if !(std_scale > 0.0) || !std_scale.is_finite() {
        return Err(Error::config("std_scale must be positive"));
    }
    let mut shifted = spec.clone();
    for c in shifted.classes.iter_mut().flatten() {
        for (m, t) in c.mean.iter_mut().zip(translation) {
            *m += t;
        }
        c.std *= std_scale;
    }
    Ok(shifted)
}

/// Two Live and three Spoof clusters on a ring of radius 2, in the order
/// Live, Spoof, Live, Spoof, Spoof, so one Spoof cluster sits between the two
/// Live ones and no single center per class separates them.
pub fn default_fig1_spec() -> MixtureSpec {
    let at = |deg: f64| {
        let r = deg.to_radians();
        vec![2.0 * r.cos(), 2.0 * r.sin()]
    };
    let cluster = |deg: f64, weight: f64, spoof_type: usize, illum: usize| Cluster {
        mean: at(deg),
        std: 0.45,
        weight,
        spoof_type,
        illum,
    };
    MixtureSpec {
        dim: 2,
        live_fraction: 0.5,
        classes: [
            vec![cluster(0.0, 0.5, 0, 0), cluster(144.0, 0.5, 0, 1)],
            vec![
                cluster(72.0, 1.0 / 3.0, 1, 0),
                cluster(216.0, 1.0 / 3.0, 2, 1),
                cluster(288.0, 1.0 / 3.0, 3, 2),
            ],
        ],
    }
}

/// Stacks inputs into a matrix and collects labels.
pub fn to_batch(samples: &[LabeledSample]) -> Result<(Matrix, Vec<Class>)> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let x = Matrix::from_rows(&rows)?;
    Ok((x, samples.iter().map(|s| s.y).collect()))
}

/// Columns `x0..x{D-1},y,spoof_type,illum,cluster`.
pub fn write_samples_csv<W: Write>(samples: &[LabeledSample], w: W) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.extend(["y", "spoof_type", "illum", "cluster"].map(String::from));
    wtr.write_record(&header).map_err(csv_err)?;
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::contract("samples have differing dimensions"));
        }
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(s.y.index().to_string());
        rec.push(s.spoof_type.to_string());
        rec.push(s.illum.to_string());
        rec.push(s.cluster.to_string());
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<LabeledSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let dim = headers.iter().filter(|h| h.starts_with('x')).count();
    if headers.len() != dim + 4 {
        return Err(Error::Parse(format!("expected {} columns, header has {}", dim + 4, headers.len())));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("row {line}: {e}"));
        let x = (0..dim)
            .map(|i| rec[i].trim().parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>>>()?;
        let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|e| bad(&e));
        out.push(LabeledSample {
            x,
            y: Class::from_index(int(dim)?)?,
            spoof_type: int(dim + 1)?,
            illum: int(dim + 2)?,
            cluster: int(dim + 3)?,
        });
    }
    Ok(out)
}
