//! Block-sparse vectors for joint features. Blocks are contiguous runs at
//! fixed offsets; switched-off leaf slots simply have no block.

/// Sorted, non-overlapping `(offset, values)` blocks over a dense dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVec {
    dim: usize,
    blocks: Vec<(usize, Vec<f64>)>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        SparseVec { dim, blocks: Vec::new() }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let mut v = SparseVec::zeros(values.len());
        if values.iter().any(|&x| x != 0.0) {
            v.blocks.push((0, values.to_vec()));
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[(usize, Vec<f64>)] {
        &self.blocks
    }

    /// Appends a block; offsets must be pushed in increasing order.
    pub fn push_block(&mut self, offset: usize, values: Vec<f64>) {
        assert!(offset + values.len() <= self.dim, "block exceeds dimension");
        if let Some((o, v)) = self.blocks.last() {
            assert!(offset >= o + v.len(), "blocks must be pushed in order without overlap");
        }
        if !values.is_empty() {
            self.blocks.push((offset, values));
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0))
    }

    pub fn dot_dense(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.dim);
        let mut s = 0.0;
        for (o, v) in &self.blocks {
            s += dot(&w[*o..*o + v.len()], v);
        }
        s
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut s = 0.0;
        while i < self.blocks.len() && j < other.blocks.len() {
            let (oa, va) = &self.blocks[i];
            let (ob, vb) = &other.blocks[j];
            let (ea, eb) = (oa + va.len(), ob + vb.len());
            let lo = (*oa).max(*ob);
            let hi = ea.min(eb);
            if lo < hi {
                s += dot(&va[lo - oa..hi - oa], &vb[lo - ob..hi - ob]);
            }
            if ea <= eb {
                i += 1;
            } else {
                j += 1;
            }
        }
        s
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks.iter().map(|(_, v)| dot(v, v)).sum()
    }

    pub fn add_scaled_to(&self, out: &mut [f64], scale: f64) {
        for (o, v) in &self.blocks {
            for (dst, x) in out[*o..*o + v.len()].iter_mut().zip(v) {
                *dst += scale * x;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_scaled_to(&mut out, 1.0);
        out
    }

    /// `self - other`. Overlapping blocks must share offset and length, which
    /// holds for vectors built on the same feature layout.
    pub fn sub(&self, other: &SparseVec) -> SparseVec {
        assert_eq!(self.dim, other.dim);
        let mut out = SparseVec::zeros(self.dim);
        let (mut i, mut j) = (0, 0);
        loop {
            let a = self.blocks.get(i);
            let b = other.blocks.get(j);
            match (a, b) {
                (None, None) => break,
                (Some((oa, va)), Some((ob, vb))) if oa == ob => {
                    assert_eq!(va.len(), vb.len(), "misaligned blocks at offset {oa}");
                    out.blocks.push((*oa, va.iter().zip(vb).map(|(x, y)| x - y).collect()));
                    i += 1;
                    j += 1;
                }
                (Some((oa, va)), b) if b.is_none_or(|(ob, _)| oa < ob) => {
                    out.blocks.push((*oa, va.clone()));
                    i += 1;
                }
                (_, Some((ob, vb))) => {
                    out.blocks.push((*ob, vb.iter().map(|x| -x).collect()));
                    j += 1;
                }
                (Some(_), None) => unreachable!(),
            }
        }
        out
    }
}

/// Sequential dot product. Every score in the crate goes through this so that
/// equal inputs give bitwise-equal sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blocky(dim: usize, seed: &[(usize, Vec<f64>)]) -> SparseVec {
        let mut v = SparseVec::zeros(dim);
        for (o, b) in seed {
            v.push_block(*o, b.clone());
        }
        v
    }

    fn arb_aligned() -> impl Strategy<Value = SparseVec> {
        // 5 canonical blocks of length 3 over dim 15, each present or absent
        prop::collection::vec(prop::option::of(prop::collection::vec(-5.0..5.0f64, 3)), 5).prop_map(|bs| {
            let mut v = SparseVec::zeros(15);
            for (k, b) in bs.into_iter().enumerate() {
                if let Some(b) = b {
                    v.push_block(3 * k, b);
                }
            }
            v
        })
    }

    #[test]
    fn dot_handles_partial_overlap() {
        let a = blocky(10, &[(0, vec![1.0, 2.0, 3.0]), (5, vec![1.0, 1.0])]);
        let b = blocky(10, &[(2, vec![10.0, 0.0, 0.0, 7.0])]);
        assert_eq!(a.dot(&b), 30.0 + 7.0);
        assert_eq!(a.dot(&b), dot(&a.to_dense(), &b.to_dense()));
    }

    proptest! {
        #[test]
        fn sparse_ops_match_dense(a in arb_aligned(), b in arb_aligned()) {
            let (da, db) = (a.to_dense(), b.to_dense());
            prop_assert!((a.dot(&b) - dot(&da, &db)).abs() < 1e-12);
            prop_assert!((a.dot_dense(&db) - dot(&da, &db)).abs() < 1e-12);
            let d = a.sub(&b).to_dense();
            for k in 0..15 {
                prop_assert_eq!(d[k], da[k] - db[k]);
            }
            prop_assert!((a.norm_sq() - dot(&da, &da)).abs() < 1e-12);
        }
    }
}
