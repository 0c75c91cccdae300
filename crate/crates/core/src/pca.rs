//! Two-component principal-component projection and its CSV export.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative singular-value floor below which a component counts as absent.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    /// One `(pc1, pc2)` pair per input point.
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions, ordered by explained variance.
    pub components: [Vec<f64>; 2],
    /// Population variance captured by each component.
    pub explained_variance: [f64; 2],
    /// Set when the centered cloud has rank < 2; missing axes are zero.
    pub degenerate: bool,
}

/// Projects mean-centered points onto their top two principal directions.
///
/// Each direction's sign is fixed so its first nonzero loading is positive.
pub fn pca_2d<T: Scalar, R: AsRef<[T]>>(points: &[R]) -> Result<Projection2d> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Shape(format!("pca needs at least 3 points, got {n}")));
    }
    let d = points[0].as_ref().len();
    if d < 2 {
        return Err(Error::Shape(format!("pca needs dimension >= 2, got {d}")));
    }
    for p in points {
        if p.as_ref().len() != d {
            return Err(Error::DimensionMismatch {
                left: d,
                right: p.as_ref().len(),
            });
        }
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.as_ref()) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i].as_ref()[j].as_f64() - mean[j]);

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let top = svd.singular_values[order[0]];
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    let mut degenerate = false;
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let s = svd.singular_values[idx];
        if top <= 0.0 || s <= RANK_TOL * top {
            degenerate = true;
            continue;
        }
        let mut dir: Vec<f64> = v_t.row(idx).iter().copied().collect();
        if let Some(first) = dir.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
        explained[slot] = s * s / n as f64;
        components[slot] = dir;
    }
    if order.len() < 2 {
        degenerate = true;
    }

    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut c = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                c[k] = row.iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            c
        })
        .collect();
    Ok(Projection2d {
        coords,
        components,
        explained_variance: explained,
        degenerate,
    })
}

/// Writes `id,pc1,pc2` rows.
pub fn write_pca_csv(path: &Path, ids: &[String], proj: &Projection2d) -> Result<()> {
    if ids.len() != proj.coords.len() {
        return Err(Error::LengthMismatch {
            left: ids.len(),
            right: proj.coords.len(),
        });
    }
    let mut out = String::from("id,pc1,pc2\n");
    for (id, c) in ids.iter().zip(&proj.coords) {
        out.push_str(&format!("{id},{},{}\n", c[0], c[1]));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_in_a_plane_reconstruct_exactly() {
        let origin = [1.0, -2.0, 0.5, 3.0];
        let a = [1.0, 0.0, 2.0, -1.0];
        let b = [0.0, 1.0, -1.0, 0.5];
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let (s, t) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
                (0..4).map(|j| origin[j] + s * a[j] + t * b[j]).collect()
            })
            .collect();
        let p = pca_2d(&pts).unwrap();
        assert!(!p.degenerate);
        let mean: Vec<f64> = (0..4)
            .map(|j| pts.iter().map(|r| r[j]).sum::<f64>() / pts.len() as f64)
            .collect();
        for (pt, c) in pts.iter().zip(&p.coords) {
            for j in 0..4 {
                let rec = mean[j] + c[0] * p.components[0][j] + c[1] * p.components[1][j];
                assert!((rec - pt[j]).abs() < 1e-8);
            }
        }
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn collinear_points_are_flagged() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let p = pca_2d(&pts).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
        assert!(p.coords.iter().any(|c| c[0] != 0.0));
    }

    #[test]
    fn rejects_too_few_points() {
        let pts = vec![vec![0.0f64, 1.0]; 2];
        assert!(pca_2d(&pts).is_err());
    }

    #[test]
    fn sign_convention_first_loading_positive() {
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![-(i as f64), (i * i) as f64 * 0.1, 0.3 * i as f64])
            .collect();
        let p = pca_2d(&pts).unwrap();
        for comp in &p.components {
            let first = comp.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }
}
