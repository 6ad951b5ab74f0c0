//! Linear whitening codec between data space and the latent space the
//! flow model works in.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::ToyDataset;
use crate::error::{Error, Result};

/// `encode: d_lat × d`, `decode: d × d_lat`, both row-major. For
/// `d_lat ≥ d` the pair satisfies `decode · encode = I_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    pub dim: usize,
    pub latent_dim: usize,
    pub encode: Vec<f64>,
    pub decode: Vec<f64>,
}

fn covariance(data: &ToyDataset) -> DMatrix<f64> {
    let n = data.len();
    let d = data.dim;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.point(i)) {
            *m += x / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let p = data.point(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    cov / (n.max(2) - 1) as f64
}

impl LatentCodec {
    /// PCA whitening: encoded coordinates have unit variance. With
    /// `d_lat < d` the leading principal directions are kept; with
    /// `d_lat > d` each whitened coordinate is spread evenly over the latent
    /// slots congruent to it modulo `d` (an isometric embedding).
    pub fn fit(data: &ToyDataset, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Argument("latent dimension must be >= 1".into()));
        }
        let d = data.dim;
        if data.len() < 2 {
            return Err(Error::Degenerate("need at least two points to fit a codec".into()));
        }
        let eig = SymmetricEigen::new(covariance(data));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let keep = latent_dim.min(d);
        for &k in &order[..keep] {
            if !(eig.eigenvalues[k] > 1e-12) {
                return Err(Error::Degenerate(format!(
                    "data variance {} along a principal direction",
                    eig.eigenvalues[k]
                )));
            }
        }

        // Whitening rows W (keep × d) and colouring columns C (d × keep).
        let mut white = vec![0.0; keep * d];
        let mut colour = vec![0.0; d * keep];
        for (r, &k) in order[..keep].iter().enumerate() {
            let s = eig.eigenvalues[k].sqrt();
            for c in 0..d {
                let u = eig.eigenvectors[(c, k)];
                white[r * d + c] = u / s;
                colour[c * keep + r] = u * s;
            }
        }

        // Spread matrix Q (latent_dim × keep) with orthonormal columns.
        let mut spread = vec![0.0; latent_dim * keep];
        for j in 0..keep {
            let rows: Vec<usize> = (0..latent_dim).filter(|i| i % keep == j).collect();
            let w = 1.0 / (rows.len() as f64).sqrt();
            for i in rows {
                spread[i * keep + j] = w;
            }
        }

        let mut encode = vec![0.0; latent_dim * d];
        for i in 0..latent_dim {
            for c in 0..d {
                encode[i * d + c] = (0..keep).map(|j| spread[i * keep + j] * white[j * d + c]).sum();
            }
        }
        let mut decode = vec![0.0; d * latent_dim];
        for c in 0..d {
            for i in 0..latent_dim {
                decode[c * latent_dim + i] = (0..keep).map(|j| colour[c * keep + j] * spread[i * keep + j]).sum();
            }
        }
        Ok(Self {
            dim: d,
            latent_dim,
            encode,
            decode,
        })
    }

    /// Maps row-major `n × d` points to `n × d_lat` latents.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        apply(x, self.dim, &self.encode, self.latent_dim)
    }

    /// Maps row-major `n × d_lat` latents back to `n × d` points.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        apply(z, self.latent_dim, &self.decode, self.dim)
    }

    pub fn arrays(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        vec![
            (vec![self.latent_dim, self.dim], self.encode.clone()),
            (vec![self.dim, self.latent_dim], self.decode.clone()),
        ]
    }

    pub fn from_arrays(encode: &(Vec<usize>, Vec<f64>), decode: &(Vec<usize>, Vec<f64>)) -> Result<Self> {
        match (encode.0.as_slice(), decode.0.as_slice()) {
            ([l, d], [d2, l2]) if l == l2 && d == d2 => Ok(Self {
                dim: *d,
                latent_dim: *l,
                encode: encode.1.clone(),
                decode: decode.1.clone(),
            }),
            _ => Err(Error::Checkpoint("codec matrices have inconsistent shapes".into())),
        }
    }
}

/// `y = x · Mᵀ` for row-major `x: n × cols_in` and `M: cols_out × cols_in`.
fn apply(x: &[f64], cols_in: usize, m: &[f64], cols_out: usize) -> Vec<f64> {
    let n = x.len() / cols_in;
    let mut out = vec![0.0; n * cols_out];
    for i in 0..n {
        let row = &x[i * cols_in..(i + 1) * cols_in];
        for o in 0..cols_out {
            out[i * cols_out + o] = row.iter().zip(&m[o * cols_in..(o + 1) * cols_in]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_gaussian_mixture;
    use crate::rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn variances(z: &[f64], k: usize) -> Vec<f64> {
        let n = z.len() / k;
        (0..k)
            .map(|j| {
                let m = (0..n).map(|i| z[i * k + j]).sum::<f64>() / n as f64;
                (0..n).map(|i| (z[i * k + j] - m).powi(2)).sum::<f64>() / (n - 1) as f64
            })
            .collect()
    }

    #[test]
    fn identity_covariance_gives_orthogonal_encoder() {
        let mut r = rng::stream(7, 0);
        let n = 20000;
        let ds = ToyDataset {
            name: "iso".into(),
            seed: 7,
            dim: 2,
            classes: 2,
            points: rng::normals(&mut r, 2 * n),
            labels: (0..n).map(|i| i % 2).collect(),
        };
        let codec = LatentCodec::fit(&ds, 2).unwrap();
        // H Hᵀ ≈ I since the sample covariance is ≈ I.
        let h = &codec.encode;
        let g00 = h[0] * h[0] + h[1] * h[1];
        let g01 = h[0] * h[2] + h[1] * h[3];
        let g11 = h[2] * h[2] + h[3] * h[3];
        assert!((g00 - 1.0).abs() < 0.05 && g01.abs() < 0.05 && (g11 - 1.0).abs() < 0.05);
        let x = ds.gather(&(0..50).collect::<Vec<_>>());
        let back = codec.decode(&codec.encode(&x));
        let err: Vec<f64> = back.iter().zip(&x).map(|(a, b)| a - b).collect();
        assert!(norm(&err) <= 1e-8 * norm(&x));
    }

    #[test]
    fn mixture_roundtrip_and_whitening() {
        let ds = make_gaussian_mixture(2048, 8, 0.3, 1).unwrap();
        for latent in [2, 3, 4] {
            let codec = LatentCodec::fit(&ds, latent).unwrap();
            for i in 0..ds.len() {
                let x = ds.point(i);
                let back = codec.decode(&codec.encode(x));
                let err: Vec<f64> = back.iter().zip(x).map(|(a, b)| a - b).collect();
                assert!(norm(&err) <= 1e-8 * norm(x), "d_lat={latent}");
            }
            let z = codec.encode(&ds.points);
            for v in variances(&z, latent) {
                assert!(v >= 0.5 - 1e-9 && v <= 2.0, "d_lat={latent}: variance {v}");
            }
        }
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let ds = ToyDataset {
            name: "flat".into(),
            seed: 0,
            dim: 2,
            classes: 2,
            points: (0..20).map(|i| if i % 2 == 0 { i as f64 } else { 1.0 }).collect(),
            labels: vec![0; 10],
        };
        assert!(matches!(LatentCodec::fit(&ds, 2), Err(Error::Degenerate(_))));
        assert!(LatentCodec::fit(&make_gaussian_mixture(16, 2, 0.3, 0).unwrap(), 0).is_err());
    }
}
