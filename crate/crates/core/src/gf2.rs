//! Rank and span membership for dense GF(2) matrices.

use crate::bits::BitVec;

/// Row basis in echelon form, indexed by leading-bit position.
struct Basis {
    rows: Vec<BitVec>,
}

impl Basis {
    fn new() -> Self {
        Basis { rows: Vec::new() }
    }

    /// Reduces `v` against the basis in place; returns its leading bit if the
    /// residue is nonzero.
    fn reduce(&self, v: &mut BitVec) -> Option<usize> {
        loop {
            let lead = v.leading_one()?;
            match self.rows.iter().find(|r| r.leading_one() == Some(lead)) {
                Some(r) => v.xor_assign(r),
                None => return Some(lead),
            }
        }
    }

    fn insert(&mut self, mut v: BitVec) -> bool {
        if self.reduce(&mut v).is_some() {
            self.rows.push(v);
            true
        } else {
            false
        }
    }
}

pub fn rank(rows: &[BitVec]) -> usize {
    let mut basis = Basis::new();
    let mut r = 0;
    for row in rows {
        if basis.insert(row.clone()) {
            r += 1;
        }
    }
    r
}

/// Whether `v` lies in the GF(2) row span of `rows`.
pub fn in_span(rows: &[BitVec], v: &BitVec) -> bool {
    let mut basis = Basis::new();
    for row in rows {
        basis.insert(row.clone());
    }
    let mut res = v.clone();
    basis.reduce(&mut res).is_none()
}
