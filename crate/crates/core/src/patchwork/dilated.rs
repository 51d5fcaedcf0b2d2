//! Dilated sampling: the `aK x bK x K` lattice is cut into `K x K` blocks of
//! `a x b` pillars each. Sample `s` takes one pillar from every block, chosen
//! by a per-block permutation, so the `a*b` samples visit every pillar exactly
//! once.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::DenseLatent;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilatedPartition {
    a: usize,
    b: usize,
    k: usize,
    /// `columns[s][u * k + v]` is the global `(x, y)` column feeding cell
    /// `(u, v)` of sample `s`.
    columns: Vec<Vec<[u32; 2]>>,
}

impl DilatedPartition {
    pub fn a(&self) -> usize {
        self.a
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sample_count(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self, sample: usize) -> &[[u32; 2]] {
        &self.columns[sample]
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.a * self.k, self.b * self.k, self.k]
    }
}

pub fn dilated_partition(a: usize, b: usize, k: usize, seed: u64) -> DilatedPartition {
    let pillars = a * b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = vec![Vec::with_capacity(k * k); pillars];
    let mut order: Vec<usize> = (0..pillars).collect();
    for u in 0..k {
        for v in 0..k {
            order.shuffle(&mut rng);
            for (s, &q) in order.iter().enumerate() {
                let x = u * a + q / b;
                let y = v * b + q % b;
                columns[s].push([x as u32, y as u32]);
            }
        }
    }
    DilatedPartition { a, b, k, columns }
}

/// The `a*b` dilated `K x K x K` samples of `z`.
pub fn gather_dilated(z: &DenseLatent, partition: &DilatedPartition) -> Result<Vec<DenseLatent>> {
    let [sx, sy, sz, c] = z.shape();
    if [sx, sy, sz] != partition.extent() {
        return Err(Error::Dimension(format!(
            "latent shape {:?} does not match dilated extent {:?}",
            z.shape(),
            partition.extent()
        )));
    }
    let k = partition.k;
    Ok(partition
        .columns
        .iter()
        .map(|cols| {
            let mut out = DenseLatent::zeros([k, k, k, c]);
            for u in 0..k {
                for v in 0..k {
                    let [x, y] = cols[u * k + v];
                    out.column_mut(u, v).copy_from_slice(z.column(x as usize, y as usize));
                }
            }
            out
        })
        .collect())
}

/// Writes each sample's vector back to its pillars.
pub fn scatter_dilated(vectors: &[DenseLatent], partition: &DilatedPartition) -> Result<DenseLatent> {
    if vectors.len() != partition.sample_count() {
        return Err(Error::Dimension(format!(
            "{} vectors for {} dilated samples",
            vectors.len(),
            partition.sample_count()
        )));
    }
    let k = partition.k;
    let c = vectors.first().map(|v| v.shape()[3]).unwrap_or(1);
    let [ex, ey, ez] = partition.extent();
    let mut out = DenseLatent::zeros([ex, ey, ez, c]);
    for (v, cols) in vectors.iter().zip(&partition.columns) {
        if v.shape() != [k, k, k, c] {
            return Err(Error::Dimension(format!("dilated vector has shape {:?}", v.shape())));
        }
        for u in 0..k {
            for w in 0..k {
                let [x, y] = cols[u * k + w];
                out.column_mut(x as usize, y as usize).copy_from_slice(v.column(u, w));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unextended_is_single_sample() {
        let p = dilated_partition(1, 1, 4, 0);
        assert_eq!(p.sample_count(), 1);
        let z = DenseLatent::gaussian([4, 4, 4, 1], 2);
        assert_eq!(gather_dilated(&z, &p).unwrap(), vec![z]);
    }

    #[test]
    fn counts_for_two_by_two() {
        let p = dilated_partition(2, 2, 4, 1);
        assert_eq!(p.sample_count(), 4);
        let z = DenseLatent::gaussian([8, 8, 4, 1], 2);
        let samples = gather_dilated(&z, &p).unwrap();
        assert!(samples.iter().all(|s| s.shape() == [4, 4, 4, 1]));
        // one pillar per 2x2 block, relative block position preserved
        for s in 0..4 {
            for u in 0..4 {
                for v in 0..4 {
                    let [x, y] = p.columns(s)[u * 4 + v];
                    assert_eq!(x as usize / 2, u);
                    assert_eq!(y as usize / 2, v);
                }
            }
        }
    }

    #[test]
    fn every_cell_written_exactly_once() {
        let p = dilated_partition(3, 2, 4, 9);
        let mut hits = vec![0usize; 12 * 8];
        for s in 0..p.sample_count() {
            for &[x, y] in p.columns(s) {
                hits[x as usize * 8 + y as usize] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn scatter_inverts_gather() {
        for seed in 0..10 {
            let p = dilated_partition(2, 3, 4, seed);
            let v = DenseLatent::gaussian([8, 12, 4, 2], seed + 100);
            let back = scatter_dilated(&gather_dilated(&v, &p).unwrap(), &p).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn zero_samples_give_zero_field() {
        let p = dilated_partition(2, 2, 4, 3);
        let zeros = vec![DenseLatent::zeros([4, 4, 4, 1]); 4];
        assert!(scatter_dilated(&zeros, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
