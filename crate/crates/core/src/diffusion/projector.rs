//! Stand-in for a learned image autoencoder: a fixed linear map with
//! orthonormal rows. `encode` is `B·x`, `decode` is `Bᵀ·z`, so a round trip
//! is the orthogonal projection onto the row space of `B`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::GrayImage;
use crate::rng::RandomnessContext;

use super::LatentTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentProjector {
    width: usize,
    height: usize,
    latent_shape: Vec<usize>,
    /// `rank × (width·height)`, row-major.
    basis: Vec<f64>,
}

impl LatentProjector {
    /// Validates that `rows` are orthonormal to within `1e-9`.
    pub fn from_rows(width: usize, height: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::contract("projector needs a nonempty image"));
        }
        if rows.is_empty() || rows.len() > n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract(format!(
                "projector rows must be 1..={n} vectors of length {n}"
            )));
        }
        for i in 0..rows.len() {
            for j in 0..=i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "projector rows {i} and {j} are not orthonormal (dot = {dot})"
                    )));
                }
            }
        }
        let rank = rows.len();
        Ok(Self {
            width,
            height,
            latent_shape: vec![rank],
            basis: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::contract("projector needs a nonempty image"));
        }
        let mut basis = vec![0.0; n * n];
        for i in 0..n {
            basis[i * n + i] = 1.0;
        }
        Ok(Self {
            width,
            height,
            latent_shape: vec![height, width],
            basis,
        })
    }

    /// Each latent cell is the sum of a `factor × factor` block divided by the
    /// square root of the block's pixel count (edge blocks may be smaller).
    pub fn block_average(width: usize, height: usize, factor: usize) -> Result<Self> {
        if width * height == 0 || factor == 0 {
            return Err(Error::contract(
                "block projector needs a nonempty image and factor >= 1",
            ));
        }
        let n = width * height;
        let (lh, lw) = (height.div_ceil(factor), width.div_ceil(factor));
        let mut basis = vec![0.0; lh * lw * n];
        for br in 0..lh {
            for bc in 0..lw {
                let rows = br * factor..((br + 1) * factor).min(height);
                let cols = bc * factor..((bc + 1) * factor).min(width);
                let weight = 1.0 / ((rows.len() * cols.len()) as f64).sqrt();
                let row = &mut basis[(br * lw + bc) * n..(br * lw + bc + 1) * n];
                for r in rows {
                    for c in cols.clone() {
                        row[r * width + c] = weight;
                    }
                }
            }
        }
        Ok(Self {
            width,
            height,
            latent_shape: vec![lh, lw],
            basis,
        })
    }

    /// `rank` random orthonormal rows from Gaussian draws, orthogonalized with
    /// two passes of modified Gram–Schmidt.
    pub fn random_orthonormal(width: usize, height: usize, rank: usize, ctx: &RandomnessContext) -> Result<Self> {
        let n = width * height;
        if n == 0 || rank == 0 || rank > n {
            return Err(Error::contract(format!("need 1 <= rank <= {n}, got {rank}")));
        }
        let mut rng = ctx.rng();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
        while rows.len() < rank {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            for _ in 0..2 {
                for q in &rows {
                    let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
        Self::from_rows(width, height, rows)
    }

    pub fn rank(&self) -> usize {
        self.basis.len() / (self.width * self.height)
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    fn row(&self, i: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.basis[i * n..(i + 1) * n]
    }

    pub fn encode(&self, image: &GrayImage) -> Result<LatentTensor> {
        image.ensure_same_dims((self.width, self.height), "encode")?;
        let values = (0..self.rank())
            .map(|i| self.row(i).iter().zip(image.pixels()).map(|(a, b)| a * b).sum())
            .collect();
        LatentTensor::new(self.latent_shape.clone(), values)
    }

    /// `Bᵀ·z` without clamping; values may leave `[0, 1]`.
    pub fn decode_raw(&self, latent: &LatentTensor) -> Result<Vec<f64>> {
        if latent.len() != self.rank() {
            return Err(Error::contract(format!(
                "latent has {} values, projector rank is {}",
                latent.len(),
                self.rank()
            )));
        }
        let mut out = vec![0.0; self.width * self.height];
        for (i, &z) in latent.values().iter().enumerate() {
            out.iter_mut().zip(self.row(i)).for_each(|(o, b)| *o += z * b);
        }
        Ok(out)
    }

    /// Decodes and clamps into a displayable image.
    pub fn decode(&self, latent: &LatentTensor) -> Result<GrayImage> {
        let raw = self.decode_raw(latent)?;
        GrayImage::new(
            self.width,
            self.height,
            raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}
